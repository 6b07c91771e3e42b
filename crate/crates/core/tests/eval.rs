mod common;

use cdcl_core::dab::{DatasetId, Mode};
use cdcl_core::data::{Batch, Dataset};
use cdcl_core::eval::*;
use cdcl_core::segnet::{build_model, SegModel, SharingConfig};
use cdcl_core::tensor::{Tape, IGNORE_INDEX};
use cdcl_core::train::{train_multi, Monitor, TrainConfig};
use cdcl_core::{Error, Exec};
use common::*;

fn trained() -> (SegModel, Dataset, Dataset) {
    let a = tiny_dataset("a", 3, 0.0, 6, 1);
    let b = tiny_dataset("b", 3, 0.35, 10, 2);
    let cfg = TrainConfig { max_iter: 4, batch_size: 2, widths: vec![3, 4], ..TrainConfig::default() };
    (train_multi(&[&a, &b], &cfg, &mut Monitor::silent()).unwrap(), a, b)
}

#[test]
fn confusion_total_counts_labeled_pixels() {
    let (m, a, _) = trained();
    let metrics = evaluate(&m, &a, DatasetId(0)).unwrap();
    let labeled = a.samples.iter().flat_map(|s| &s.labels).filter(|&&l| l != IGNORE_INDEX).count();
    assert_eq!(metrics.pixels, labeled as u64);
    assert_eq!(metrics.confusion.total(), labeled as u64);
    assert!((0.0..=1.0).contains(&metrics.miou));
    let json = serde_json::to_value(&metrics).unwrap();
    assert!(json["per_class_iou"].get("disk").is_some());
}

#[test]
fn evaluation_is_independent_of_execution_policy_and_batching() {
    let (mut m, _, b) = trained();
    m.set_exec(Exec::Sequential);
    let seq = evaluate(&m, &b, DatasetId(1)).unwrap();
    m.set_exec(Exec::Parallel);
    assert_eq!(seq, evaluate(&m, &b, DatasetId(1)).unwrap());
    assert_eq!(seq, evaluate_with(&m, &b, DatasetId(1), 3).unwrap());
}

#[test]
fn evaluation_errors() {
    let (m, a, _) = trained();
    let four = tiny_dataset("f", 4, 0.0, 2, 3);
    assert!(matches!(evaluate(&m, &four, DatasetId(0)), Err(Error::Config(_))));
    let mut blank = a.clone();
    blank.samples.iter_mut().for_each(|s| s.labels.iter_mut().for_each(|l| *l = IGNORE_INDEX));
    assert!(matches!(evaluate(&m, &blank, DatasetId(0)), Err(Error::UndefinedMetric(_))));
}

#[test]
fn precise_bn_on_one_batch_reproduces_its_statistics() {
    let (m, _, b) = trained();
    let small = Dataset { samples: b.samples[..EVAL_BATCH].to_vec(), ..b.clone() };
    let recal = precise_bn(&m, &small, DatasetId(1)).unwrap();
    let batch = Batch::from_indices(&small, &(0..EVAL_BATCH).collect::<Vec<_>>(), DatasetId(1));
    let mut tape = Tape::new();
    let x = tape.constant(batch.images);
    let (_, stats) = m.forward(&mut tape, x, DatasetId(1), Mode::Train).unwrap();
    for (block, s) in recal.blocks().zip(&stats) {
        let bank = block.bn_for(DatasetId(1)).unwrap();
        assert_eq!(bank.running_mean.data(), &s.mean[..]);
        assert_eq!(bank.running_var.data(), &s.var[..]);
    }
}

#[test]
fn precise_bn_is_idempotent_and_touches_only_statistics() {
    let (m, _, b) = trained();
    let once = precise_bn(&m, &b, DatasetId(1)).unwrap();
    let twice = precise_bn(&once, &b, DatasetId(1)).unwrap();
    for (x, y) in once.blocks().zip(twice.blocks()) {
        let (p, q) = (x.bn_for(DatasetId(1)).unwrap(), y.bn_for(DatasetId(1)).unwrap());
        for (u, v) in p.running_mean.data().iter().chain(p.running_var.data()).zip(q.running_mean.data().iter().chain(q.running_var.data())) {
            assert!((u - v).abs() <= 1e-12, "{u} vs {v}");
        }
    }
    assert_eq!(all_values(m.store()), all_values(once.store()));
    for (x, y) in m.blocks().zip(once.blocks()) {
        assert_eq!(x.bank()[0], y.bank()[0]);
    }
    let flops = |s: &SegModel| s.count_flops(DatasetId(1), [1, 3, 16, 16]).unwrap();
    assert_eq!(flops(&m), flops(&once));
    let empty = Dataset { samples: vec![], ..b };
    assert!(matches!(precise_bn(&m, &empty, DatasetId(1)), Err(Error::Config(_))));
}

#[test]
fn distribution_report_properties() {
    let (m, _, _) = trained();
    let same = distribution_report(
        &[ReportInput { label: "x", model: &m, id: DatasetId(0) }, ReportInput { label: "y", model: &m, id: DatasetId(0) }],
        None,
    )
    .unwrap();
    assert_eq!(same.groups.len(), m.num_blocks() * 3);
    for g in &same.groups {
        assert_eq!(g.mean_divergence(), 0.0);
    }

    let mut shifted = m.clone();
    let delta = 0.75;
    for block in shifted.blocks_mut() {
        let bank = block.bn_for_mut(DatasetId(0)).unwrap();
        bank.running_mean.data_mut().iter_mut().for_each(|v| *v += delta);
    }
    let rep = distribution_report(
        &[ReportInput { label: "x", model: &m, id: DatasetId(0) }, ReportInput { label: "s", model: &shifted, id: DatasetId(0) }],
        None,
    )
    .unwrap();
    for (block, name) in m.blocks().zip(m.block_names()) {
        let g = rep.group(&name, ParamGroupKind::BnRunningMean).unwrap();
        assert!((g.mean_divergence() - delta).abs() <= g.bin_width() + 1e-12, "{name}: {}", g.mean_divergence());
        assert_eq!(rep.group(&name, ParamGroupKind::ConvWeight).unwrap().mean_divergence(), 0.0);
        let conv_numel = m.store().get(block.convs()[0]).numel() as u64;
        for counts in &rep.group(&name, ParamGroupKind::ConvWeight).unwrap().counts {
            assert_eq!(counts.iter().sum::<u64>(), conv_numel);
        }
        for counts in &g.counts {
            assert_eq!(counts.iter().sum::<u64>(), block.out_channels() as u64);
        }
    }
    let mut csv = Vec::new();
    rep.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("layer,group,record,a,b,bin,lo,hi,value"));
    assert!(text.contains(",divergence,x,s,"));
}

#[test]
fn distribution_report_rejects_mismatched_architectures() {
    let (m, _, _) = trained();
    let other = build_model(2, &[3, 3], &[3, 5], SharingConfig::CDCL, 0).unwrap();
    let r = distribution_report(
        &[ReportInput { label: "x", model: &m, id: DatasetId(0) }, ReportInput { label: "y", model: &other, id: DatasetId(0) }],
        None,
    );
    assert!(matches!(r, Err(Error::Comparison(_))));
    assert!(matches!(distribution_report(&[], None), Err(Error::Comparison(_))));
    let only = vec!["enc0".to_string()];
    let rep = distribution_report(&[ReportInput { label: "x", model: &m, id: DatasetId(0) }], Some(&only)).unwrap();
    assert_eq!(rep.layers(), only);
}

#[test]
fn nearest_bank_follows_the_data() {
    let (m, a, b) = trained();
    let tuned = precise_bn(&m, &b, DatasetId(1)).unwrap();
    let tuned = precise_bn(&tuned, &a, DatasetId(0)).unwrap();
    assert_eq!(select_bank(&tuned, &b, BankChoice::Nearest).unwrap(), DatasetId(1));
    assert_eq!(select_bank(&tuned, &a, BankChoice::Nearest).unwrap(), DatasetId(0));
    assert_eq!(select_bank(&tuned, &a, BankChoice::Fixed(1)).unwrap(), DatasetId(1));
    let four = tiny_dataset("f", 4, 0.0, 2, 3);
    assert!(matches!(select_bank(&tuned, &four, BankChoice::Nearest), Err(Error::Config(_))));
}
