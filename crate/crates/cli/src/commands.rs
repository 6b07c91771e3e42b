use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use cdcl_core::dab::DatasetId;
use cdcl_core::data::{generate_to_dir, remap_dataset, Batch, Dataset, LabelMap};
use cdcl_core::eval::{distribution_report, evaluate, precise_bn, Metrics, ParamGroupKind, ReportInput};
use cdcl_core::experiment::run_ablation;
use cdcl_core::segnet::{load_checkpoint, save_checkpoint, SegModel};
use cdcl_core::train::{
    da_two_stage, finetune, param_groups, train_label_remap, train_multi, train_single, Monitor,
};
use serde::Serialize;

use crate::config::{read_json, ExperimentConfig, GenSpec, Strategy};
use crate::failure::ConfigError;
use crate::lock::RunLock;

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(spec: &Path, out: &Path) -> anyhow::Result<()> {
    let spec: GenSpec = read_json(spec)?;
    let specs = spec.specs()?;
    let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(ConfigError(format!("dataset name {:?} used twice", w[0])).into());
    }
    let _lock = RunLock::acquire(out)?;
    for s in &specs {
        let ds = generate_to_dir(s, &out.join(&s.name))?;
        eprintln!("{}: {} samples, {} classes", ds.name, ds.len(), ds.num_classes());
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalEntry {
    model: String,
    dataset: String,
    id: usize,
    metrics: Metrics,
}

fn eval_entry(tag: &str, model: &SegModel, ds: &Dataset, id: usize) -> anyhow::Result<EvalEntry> {
    Ok(EvalEntry { model: tag.into(), dataset: ds.name.clone(), id, metrics: evaluate(model, ds, DatasetId(id))? })
}

/// Saves `model` and checks that reloading it reproduces its eval logits.
fn save_verified(model: &SegModel, path: &Path, probe: &Dataset, id: usize) -> anyhow::Result<()> {
    save_checkpoint(model, path)?;
    let loaded = load_checkpoint(path)?;
    let n = probe.len().min(2);
    let images = Batch::from_indices(probe, &(0..n).collect::<Vec<_>>(), DatasetId(id)).images;
    if loaded.predict(&images, DatasetId(id))? != model.predict(&images, DatasetId(id))? {
        anyhow::bail!("checkpoint {} does not reproduce the in-memory model", path.display());
    }
    Ok(())
}

fn run_dir(out: Option<&Path>, cfg: &ExperimentConfig, base: &Path) -> Option<PathBuf> {
    out.map(Path::to_path_buf).or_else(|| cfg.output_dir.as_ref().map(|d| base.join(d)))
}

pub fn train(config: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let (cfg, base) = ExperimentConfig::load(config)?;
    let dir = run_dir(out, &cfg, &base)
        .ok_or_else(|| ConfigError("no --out given and the config has no output_dir".into()))?;
    let _lock = RunLock::acquire(&dir)?;
    write_json(&dir.join("config.json"), &cfg)?;
    let splits = cfg.splits(&base)?;
    let n = splits.len();
    let ckpt_dir = dir.join("checkpoints");
    if cfg.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir)?;
    }
    let mut mon = Monitor::new(cfg.log_every)
        .with_csv(&dir.join("metrics.csv"))?
        .with_checkpoints(&ckpt_dir, cfg.checkpoint_every);
    let tc = &cfg.train;
    let mut results = Vec::new();
    let (model, probe, probe_id) = match cfg.strategy {
        Strategy::Single => {
            let t = cfg.index(cfg.target.or(Some(0)), "target", n)?;
            let m = train_single(&splits[t].train, tc, &mut mon)?;
            results.push(eval_entry("model", &m, &splits[t].val, 0)?);
            (m, &splits[t].val, 0)
        }
        Strategy::Cdcl => {
            let trains: Vec<&Dataset> = splits.iter().map(|s| &s.train).collect();
            let m = train_multi(&trains, tc, &mut mon)?;
            for (i, s) in splits.iter().enumerate() {
                results.push(eval_entry("model", &m, &s.val, i)?);
            }
            (m, &splits[0].val, 0)
        }
        Strategy::Finetune => {
            let s = cfg.index(cfg.source, "source", n)?;
            let t = cfg.index(cfg.target, "target", n)?;
            let pre = train_single(&splits[s].train, tc, &mut mon)?;
            save_verified(&pre, &dir.join("pretrained.cdcl"), &splits[s].val, 0)?;
            results.push(eval_entry("pretrained", &pre, &splits[s].val, 0)?);
            let m = finetune(&pre, &splits[t].train, tc, &mut mon)?;
            results.push(eval_entry("model", &m, &splits[t].val, 0)?);
            (m, &splits[t].val, 0)
        }
        Strategy::LabelRemap => {
            let s = cfg.index(cfg.source, "source", n)?;
            let t = cfg.index(cfg.target, "target", n)?;
            let (src, tgt) = (&splits[s].train, &splits[t].train);
            let map = LabelMap::from_names(&src.name, &src.class_names, &tgt.name, &tgt.class_names, &cfg.label_map)?;
            let remapped = remap_dataset(src, &map, cfg.min_valid_fraction)?;
            eprintln!("remapped {} of {} source samples", remapped.len(), src.len());
            let m = train_label_remap(tgt, &remapped, tc, &mut mon)?;
            results.push(eval_entry("model", &m, &splits[t].val, 0)?);
            (m, &splits[t].val, 0)
        }
        Strategy::DaTwoStage => {
            let s = cfg.index(cfg.source, "source", n)?;
            let t = cfg.index(cfg.target, "target", n)?;
            let run = da_two_stage(&splits[s].train, &splits[t].train, tc, cfg.freeze_conv, &mut mon)?;
            save_verified(&run.stage_one, &dir.join("stage_one.cdcl"), &splits[s].val, 0)?;
            results.push(eval_entry("stage_one", &run.stage_one, &splits[s].val, 0)?);
            results.push(eval_entry("model", &run.model, &splits[s].val, 0)?);
            results.push(eval_entry("model", &run.model, &splits[t].val, 1)?);
            (run.model, &splits[t].val, 1)
        }
    };
    save_verified(&model, &dir.join("model.cdcl"), probe, probe_id)?;
    write_json(&dir.join("param_groups.json"), &param_groups(model.store()))?;
    write_json(&dir.join("metrics.json"), &results)?;
    for r in &results {
        println!("{:10} {:24} id {}  mIoU {:.4}", r.model, r.dataset, r.id, r.metrics.miou);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    dataset: String,
    id: usize,
    standard: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    precise_bn: Option<Metrics>,
}

pub fn eval(checkpoint: &Path, dataset: &Path, id: usize, precise: bool, out: Option<&Path>) -> anyhow::Result<()> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let ds = Dataset::read_from_dir(dataset).with_context(|| format!("loading {}", dataset.display()))?;
    let standard = evaluate(&model, &ds, DatasetId(id))?;
    let precise_bn = if precise {
        Some(evaluate(&precise_bn(&model, &ds, DatasetId(id))?, &ds, DatasetId(id))?)
    } else {
        None
    };
    let report = EvalReport { checkpoint: checkpoint.to_path_buf(), dataset: ds.name.clone(), id, standard, precise_bn };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(())
}

pub fn ablate(config: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let (cfg, base) = ExperimentConfig::load(config)?;
    let dir = run_dir(out, &cfg, &base);
    let _lock = dir.as_deref().map(RunLock::acquire).transpose()?;
    let splits = cfg.splits(&base)?;
    let trains: Vec<&Dataset> = splits.iter().map(|s| &s.train).collect();
    let vals: Vec<&Dataset> = splits.iter().map(|s| &s.val).collect();
    let results = run_ablation(&trains, &vals, &cfg.train, |r, _| {
        eprintln!("{}: mean mIoU {:.4}", r.label, r.mean_miou);
    })?;
    let mut header = vec!["conv".to_string(), "bn".into(), "dat".into()];
    header.extend(vals.iter().map(|v| v.name.clone()));
    header.push("mean".into());
    println!("| {} |", header.join(" | "));
    println!("|{}", "---|".repeat(header.len()));
    let yes = |b: bool, t: &str, f: &str| if b { t.to_string() } else { f.to_string() };
    let mut rows = Vec::new();
    for r in &results {
        let mut cells = vec![
            yes(r.row.sharing.conv_shared, "shared", "not shared"),
            yes(r.row.sharing.bn_shared, "shared", "not shared"),
            yes(r.row.dat, "yes", "no"),
        ];
        cells.extend(r.miou.iter().map(|m| format!("{:.2}", 100.0 * m)));
        cells.push(format!("{:.2}", 100.0 * r.mean_miou));
        println!("| {} |", cells.join(" | "));
        rows.push(cells);
    }
    if let Some(dir) = dir {
        write_json(&dir.join("ablation.json"), &results)?;
        let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
        w.write_record(&header)?;
        for cells in rows {
            w.write_record(&cells)?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn diagnose(checkpoints: &[PathBuf], ids: &[usize], layers: &[String], out: Option<&Path>) -> anyhow::Result<()> {
    let mut models = Vec::new();
    for p in checkpoints {
        models.push(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?);
    }
    let mut labels = Vec::new();
    for (p, m) in checkpoints.iter().zip(&models) {
        let chosen: Vec<usize> = if ids.is_empty() { (0..m.num_datasets()).collect() } else { ids.to_vec() };
        for id in chosen {
            if id >= m.num_datasets() {
                return Err(ConfigError(format!("{} has no dataset id {id}", p.display())).into());
            }
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            labels.push((format!("{stem}#{id}"), m, DatasetId(id)));
        }
    }
    let inputs: Vec<ReportInput> =
        labels.iter().map(|(l, m, id)| ReportInput { label: l, model: m, id: *id }).collect();
    let filter = (!layers.is_empty()).then_some(layers);
    let report = distribution_report(&inputs, filter)?;
    match out {
        Some(p) => report.write_csv(fs::File::create(p)?)?,
        None => report.write_csv(std::io::stdout().lock())?,
    }
    let mut err = std::io::stderr().lock();
    writeln!(err, "layer      conv_weight  bn_running_mean  bn_running_var")?;
    for layer in report.layers() {
        let d = |k| report.group(&layer, k).map_or(0.0, |g| g.mean_divergence());
        writeln!(
            err,
            "{layer:10} {:11.6}  {:15.6}  {:14.6}",
            d(ParamGroupKind::ConvWeight),
            d(ParamGroupKind::BnRunningMean),
            d(ParamGroupKind::BnRunningVar)
        )?;
    }
    Ok(())
}
