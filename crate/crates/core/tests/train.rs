mod common;

use cdcl_core::dab::DatasetId;
use cdcl_core::data::{Batcher, Dataset};
use cdcl_core::eval::evaluate;
use cdcl_core::segnet::{build_model, checkpoint_to_bytes, SegModel, SharingConfig};
use cdcl_core::tensor::{Tape, IGNORE_INDEX};
use cdcl_core::train::*;
use cdcl_core::Error;
use common::*;

fn small_cfg(max_iter: usize) -> TrainConfig {
    TrainConfig { max_iter, batch_size: 2, widths: vec![3, 4], ..TrainConfig::default() }
}

fn model(n: usize, classes: &[usize], seed: u64) -> SegModel {
    build_model(n, classes, &[3, 4], SharingConfig::CDCL, seed).unwrap()
}

#[test]
fn single_dataset_dat_step_equals_non_dat_step() {
    let cfg = small_cfg(10);
    let batch = random_batch(0, 3, 2, 8, 8, 1);
    let mut a = model(1, &[3], 4);
    let mut b = a.clone();
    let mut oa = OptimizerState::new(a.store());
    let mut ob = OptimizerState::new(b.store());
    let la = dat_step(&mut a, std::slice::from_ref(&batch), &cfg, &mut oa, 0.01).unwrap();
    let lb = non_dat_step(&mut b, &batch, &cfg, &mut ob, 0.01).unwrap();
    assert_eq!(la, vec![lb]);
    assert_eq!(a, b);
}

#[test]
fn round_robin_and_alternation_differ() {
    let cfg = small_cfg(10);
    let batches = [random_batch(0, 3, 2, 8, 8, 1), random_batch(1, 3, 2, 8, 8, 2)];
    let mut a = model(2, &[3, 3], 4);
    let mut b = a.clone();
    let mut oa = OptimizerState::new(a.store());
    let mut ob = OptimizerState::new(b.store());
    dat_step(&mut a, &batches, &cfg, &mut oa, 0.01).unwrap();
    for batch in &batches {
        non_dat_step(&mut b, batch, &cfg, &mut ob, 0.01).unwrap();
    }
    assert_eq!(oa.steps(), 1);
    assert_eq!(ob.steps(), 2);
    assert_ne!(all_values(a.store()), all_values(b.store()));
}

#[test]
fn non_dat_loss_is_the_batch_cross_entropy() {
    let cfg = small_cfg(10);
    let batch = random_batch(1, 4, 2, 8, 8, 9);
    let mut m = model(2, &[3, 4], 0);
    let mut reference = m.clone();
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let y = reference.forward_train(&mut tape, x, DatasetId(1)).unwrap();
    let l = tape.cross_entropy(y, &batch.labels, IGNORE_INDEX).unwrap();
    let expect = tape.value(l).item().unwrap();
    let mut opt = OptimizerState::new(m.store());
    assert_eq!(non_dat_step(&mut m, &batch, &cfg, &mut opt, 0.01).unwrap(), expect);
}

#[test]
fn dat_gradient_is_the_sum_of_separate_gradients() {
    for trial in 0..5u64 {
        let n = 3;
        let m0 = model(n, &[3, 4, 2], trial);
        let batches: Vec<_> = (0..n).map(|i| random_batch(i, [3, 4, 2][i], 2, 8, 8, 10 * trial + i as u64)).collect();
        let mut joint = m0.clone();
        dat_backward(&mut joint, &batches, &[1.0; 3]).unwrap();
        let mut sum = vec![vec![]; m0.store().len()];
        for b in &batches {
            let mut sep = m0.clone();
            let mut tape = Tape::new();
            let x = tape.constant(b.images.clone());
            let y = sep.forward_train(&mut tape, x, b.dataset).unwrap();
            let l = tape.cross_entropy(y, &b.labels, IGNORE_INDEX).unwrap();
            tape.backward(l, sep.store_mut()).unwrap();
            for (acc, g) in sum.iter_mut().zip(all_grads(sep.store())) {
                if acc.is_empty() {
                    *acc = g;
                } else {
                    acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
            }
        }
        for (j, s) in all_grads(joint.store()).iter().zip(&sum) {
            for (a, b) in j.iter().zip(s) {
                assert!((a - b).abs() <= 1e-8, "trial {trial}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn zero_weight_dataset_still_updates_statistics() {
    let m0 = model(2, &[3, 3], 5);
    let batches = [random_batch(0, 3, 2, 8, 8, 1), random_batch(1, 3, 2, 8, 8, 2)];
    let mut m = m0.clone();
    dat_backward(&mut m, &batches, &[1.0, 0.0]).unwrap();
    for (b0, b) in m0.blocks().zip(m.blocks()) {
        let bank = &b.bank()[1];
        for p in [bank.gamma, bank.beta] {
            assert!(m.store().get(p).grad().unwrap().iter().all(|&g| g == 0.0));
        }
        assert_ne!(bank.running_mean, b0.bank()[1].running_mean);
    }
    let head1 = m.head(DatasetId(1)).unwrap();
    assert!(m.store().get(head1.weight).grad().unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn alternation_errors() {
    let cfg = small_cfg(10);
    let mut m = model(2, &[3, 3], 0);
    let mut opt = OptimizerState::new(m.store());
    let b0 = random_batch(0, 3, 2, 8, 8, 1);
    let b1 = random_batch(1, 3, 2, 8, 8, 1);
    for bad in [vec![b0.clone()], vec![b0.clone(), b0.clone()], vec![b0.clone(), b1.clone(), random_batch(2, 3, 2, 8, 8, 1)]] {
        assert!(matches!(dat_step(&mut m, &bad, &cfg, &mut opt, 0.01), Err(Error::Alternation(_))));
    }
    // order of the given batches does not matter
    let mut a = m.clone();
    let mut oa = opt.clone();
    dat_step(&mut m, &[b1.clone(), b0.clone()], &cfg, &mut opt, 0.01).unwrap();
    dat_step(&mut a, &[b0, b1], &cfg, &mut oa, 0.01).unwrap();
    assert_eq!(a, m);
}

#[test]
fn non_finite_loss_is_a_numerical_error() {
    let cfg = small_cfg(10);
    let mut m = model(1, &[3], 0);
    let head = m.head(DatasetId(0)).unwrap();
    m.store_mut().get_mut(head.bias).data_mut()[0] = f64::NAN;
    let mut opt = OptimizerState::new(m.store());
    let r = non_dat_step(&mut m, &random_batch(0, 3, 2, 8, 8, 1), &cfg, &mut opt, 0.01);
    assert!(matches!(r, Err(Error::Numerical(_))));
}

#[test]
fn parameter_groups_exclude_normalization_from_decay() {
    let m = model(2, &[3, 3], 0);
    let groups = param_groups(m.store());
    assert_eq!(groups.len(), m.store().len());
    for g in groups {
        let is_filter = g.name.ends_with(".conv") || g.name.ends_with(".weight");
        assert_eq!(g.weight_decay, is_filter, "{}", g.name);
    }
}

fn datasets() -> (Dataset, Dataset) {
    (tiny_dataset("a", 3, 0.0, 6, 1), tiny_dataset("b", 3, 0.3, 6, 2))
}

#[test]
fn training_is_deterministic_and_logs() {
    let (a, _) = datasets();
    let cfg = small_cfg(6);
    let dir = tempfile::tempdir().unwrap();
    let mut mon = Monitor::new(2).with_csv(&dir.path().join("metrics.csv")).unwrap().with_checkpoints(dir.path(), 3);
    let m1 = train_single(&a, &cfg, &mut mon).unwrap();
    let m2 = train_single(&a, &cfg, &mut Monitor::silent()).unwrap();
    assert_eq!(checkpoint_to_bytes(&m1).unwrap(), checkpoint_to_bytes(&m2).unwrap());
    assert_eq!(mon.rows().len(), 3);
    assert_eq!(mon.rows()[0].iter, 2);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iter,lr,loss_0,seconds");
    assert_eq!(lines.len(), 4);
    assert!(Monitor::checkpoint_path(dir.path(), 3).exists());
    assert!(Monitor::checkpoint_path(dir.path(), 6).exists());
    let other = train_single(&a, &TrainConfig { seed: 1, ..cfg }, &mut Monitor::silent()).unwrap();
    assert_ne!(checkpoint_to_bytes(&m1).unwrap(), checkpoint_to_bytes(&other).unwrap());
}

#[test]
fn joint_training_rejects_label_space_mismatch() {
    let (a, _) = datasets();
    let m = model(2, &[3, 4], 0);
    let cfg = small_cfg(1);
    assert!(matches!(finetune(&m, &a, &cfg, &mut Monitor::silent()), Err(Error::Architecture(_))));
    let single = model(1, &[3], 0);
    let wide = TrainConfig { widths: vec![3, 5], ..cfg };
    assert!(matches!(finetune(&single, &a, &wide, &mut Monitor::silent()), Err(Error::Architecture(_))));
}

#[test]
fn finetune_without_iterations_only_swaps_the_head() {
    let (a, _) = datasets();
    let target = tiny_dataset("t", 4, 0.2, 4, 3);
    let pre = train_single(&a, &small_cfg(2), &mut Monitor::silent()).unwrap();
    let ft = finetune(&pre, &target, &small_cfg(0), &mut Monitor::silent()).unwrap();
    let head = ft.head(DatasetId(0)).unwrap();
    assert_eq!(ft.class_count(DatasetId(0)).unwrap(), 4);
    for id in ft.store().ids() {
        if id == head.weight || id == head.bias {
            continue;
        }
        assert_eq!(ft.store().get(id).data(), pre.store().get(id).data());
    }
    for (x, y) in ft.blocks().zip(pre.blocks()) {
        assert_eq!(x.bank(), y.bank());
    }
    // and it trains
    let ft = finetune(&pre, &target, &small_cfg(2), &mut Monitor::silent()).unwrap();
    evaluate(&ft, &target, DatasetId(0)).unwrap();
}

#[test]
fn label_remap_with_empty_subset_equals_single() {
    let (a, _) = datasets();
    let empty = Dataset { samples: vec![], ..a.clone() };
    let cfg = small_cfg(3);
    let r = train_label_remap(&a, &empty, &cfg, &mut Monitor::silent()).unwrap();
    let s = train_single(&a, &cfg, &mut Monitor::silent()).unwrap();
    assert_eq!(checkpoint_to_bytes(&r).unwrap(), checkpoint_to_bytes(&s).unwrap());
    let four = tiny_dataset("t", 4, 0.0, 2, 3);
    assert!(matches!(train_label_remap(&a, &four, &cfg, &mut Monitor::silent()), Err(Error::Config(_))));
}

#[test]
fn concatenated_epoch_covers_both_sets_once() {
    let (a, b) = datasets();
    let joint = a.concat(&b, "joint").unwrap();
    let mut batcher = Batcher::new(&joint, DatasetId(0), 5, 3).unwrap();
    let mut seen: Vec<Vec<f32>> = Vec::new();
    while seen.len() < joint.len() {
        for i in batcher.next_indices() {
            seen.push(joint.samples[i].image.clone());
        }
    }
    let mut expect: Vec<Vec<f32>> = a.samples.iter().chain(&b.samples).map(|s| s.image.clone()).collect();
    let key = |v: &Vec<f32>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    seen.sort_by_key(key);
    expect.sort_by_key(key);
    assert_eq!(seen, expect);
}

#[test]
fn two_stage_with_frozen_convolutions_preserves_the_source_path() {
    let (a, b) = datasets();
    let cfg = small_cfg(3);
    let run = da_two_stage(&a, &b, &cfg, true, &mut Monitor::silent()).unwrap();
    let (s1, s2) = (&run.stage_one, &run.model);
    for id in s1.conv_params() {
        assert_eq!(s1.store().get(id).data(), s2.store().get(id).data());
    }
    let probe = random_batch(0, 3, 2, 16, 16, 7).images;
    assert_eq!(s1.predict(&probe, DatasetId(0)).unwrap(), s2.predict(&probe, DatasetId(0)).unwrap());
    assert_ne!(s1.predict(&probe, DatasetId(1)).unwrap(), s2.predict(&probe, DatasetId(1)).unwrap());

    let updated = da_stage_two(s1, &b, &cfg, false, &mut Monitor::silent()).unwrap();
    let conv = s1.conv_params()[0];
    assert_ne!(s1.store().get(conv).data(), updated.store().get(conv).data());
    // the source bank and head are never touched by stage 2
    assert_eq!(s1.blocks().next().unwrap().bank()[0], updated.blocks().next().unwrap().bank()[0]);
}
