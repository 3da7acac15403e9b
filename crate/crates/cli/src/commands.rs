use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use melafuse::data::{
    load_metadata_csv, read_manifest, remove_hair, write_manifest, Dataset, FeatureSchema, ManifestRow, Provenance,
    SynthConfig,
};
use melafuse::metrics::{roc_curve, write_reports_csv, ConfusionMatrix, MetricReport};
use melafuse::models::{build_classifier, build_efficientnet, ScalingConfig};
use melafuse::splitter::{fold_iter, group_kfold, FoldAssignment};
use melafuse::trainer::{
    evaluate, train_kfold, write_epoch_csv, Checkpoint, EpochStats, KFoldOutcome, ModelConfig, PipelineConfig, Split,
};
use melafuse::Error;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::plot::{chart_from_csv, Metric};
use crate::CliError;

pub fn synth(
    n: usize,
    malignant_frac: f64,
    size: usize,
    seed: u64,
    hair_prob: Option<f64>,
    out: &Path,
) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    if !(malignant_frac > 0.0 && malignant_frac < 1.0) {
        return Err(CliError::Usage(format!("--malignant-frac must lie strictly between 0 and 1, got {malignant_frac}")));
    }
    let mut cfg = SynthConfig::new(n, malignant_frac, size, seed);
    if let Some(p) = hair_prob {
        if !(0.0..=1.0).contains(&p) {
            return Err(CliError::Usage(format!("--hair-prob must lie in [0, 1], got {p}")));
        }
        cfg.hair_probability = p;
    }
    if cfg.malignant_count() == 0 || cfg.malignant_count() == n {
        return Err(CliError::Usage(format!(
            "--malignant-frac {malignant_frac} with --n {n} leaves one class empty"
        )));
    }
    cfg.validate().map_err(|e| CliError::Usage(format!("invalid synth arguments (--size, --n): {e}")))?;
    let dataset = Dataset::synthetic(&cfg)?;
    dataset.save(out)?;
    let malignant = dataset.labels().iter().filter(|&&t| t == 1).count();
    println!("wrote {} samples ({malignant} malignant) to {}", dataset.len(), out.display());
    Ok(())
}

pub fn split(csv: &Path, k: usize, out: &Path) -> Result<(), CliError> {
    let records = load_metadata_csv(csv)?;
    let groups: Vec<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    let assignment = group_kfold(&groups, k)?;
    let mut widths = vec![0; k];
    for (fold, w) in widths.iter_mut().enumerate() {
        let (train, _) = fold_iter(&assignment, fold)?;
        let train_records: Vec<_> = train.iter().map(|&i| records[i].clone()).collect();
        *w = FeatureSchema::fit(&train_records).width();
    }
    let rows: Vec<ManifestRow> = records
        .iter()
        .zip(assignment.fold_of())
        .map(|(r, &fold)| ManifestRow {
            image_name: r.image_name.clone(),
            patient_id: r.patient_id.clone(),
            target: r.target,
            provenance: Provenance::Original,
            fold,
            feature_width: widths[fold],
        })
        .collect();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_manifest(fs::File::create(out)?, &rows)?;
    for fold in 0..k {
        let members: Vec<&ManifestRow> = rows.iter().filter(|r| r.fold == fold).collect();
        let patients: BTreeSet<&str> = members.iter().map(|r| r.patient_id.as_str()).collect();
        let malignant = members.iter().filter(|r| r.target == 1).count();
        println!("fold {fold}: samples={} patients={} malignant={malignant}", members.len(), patients.len());
    }
    Ok(())
}

/// Stored beside each checkpoint so it can be evaluated without the run config.
#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    model: ModelConfig,
    schema: FeatureSchema,
    pipeline: PipelineConfig,
    threshold: f64,
}

fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

fn assignment_for(cfg: &RunConfig, dataset: &Dataset) -> Result<FoldAssignment, CliError> {
    let Some(path) = &cfg.data.manifest else {
        return Ok(group_kfold(&dataset.groups(), cfg.train.folds)?);
    };
    let rows = read_manifest(fs::File::open(path)?)?;
    let by_name: BTreeMap<&str, usize> = rows
        .iter()
        .filter(|r| r.provenance == Provenance::Original)
        .map(|r| (r.image_name.as_str(), r.fold))
        .collect();
    let fold_of = dataset
        .records
        .iter()
        .map(|r| {
            by_name.get(r.image_name.as_str()).copied().ok_or_else(|| {
                CliError::Core(Error::Consistency(format!("{} is missing from the manifest", r.image_name)))
            })
        })
        .collect::<Result<Vec<usize>, CliError>>()?;
    Ok(FoldAssignment::new(cfg.train.folds, fold_of)?)
}

/// Fold-averaged epoch statistics; recalls average over folds where defined.
fn mean_stats(stats: &[EpochStats]) -> Vec<EpochStats> {
    let epochs = stats.iter().map(|s| s.epoch).max().unwrap_or(0);
    let mut out = Vec::new();
    for epoch in 1..=epochs {
        for split in [Split::Train, Split::Val] {
            let rows: Vec<&EpochStats> = stats.iter().filter(|s| s.epoch == epoch && s.split == split).collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            let mean_opt = |f: fn(&EpochStats) -> Option<f64>| {
                let v: Vec<f64> = rows.iter().filter_map(|s| f(s)).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            out.push(EpochStats {
                fold: 0,
                epoch,
                split,
                loss: rows.iter().map(|s| s.loss).sum::<f64>() / n,
                acc: rows.iter().map(|s| s.acc).sum::<f64>() / n,
                recall_benign: mean_opt(|s| s.recall_benign),
                recall_malignant: mean_opt(|s| s.recall_malignant),
                seconds: rows.iter().map(|s| s.seconds).sum::<f64>() / n,
            });
        }
    }
    out
}

fn write_epochs(path: &Path, stats: &[EpochStats]) -> Result<(), CliError> {
    write_epoch_csv(fs::File::create(path)?, stats)?;
    Ok(())
}

fn render(input: &Path, out: &Path, metric: Metric) -> Result<(), CliError> {
    let chart = chart_from_csv(&fs::read_to_string(input)?, metric)?;
    fs::write(out, chart.to_svg())?;
    Ok(())
}

/// Confusion matrix with counts and percentages of the total.
pub fn confusion_table(m: &ConfusionMatrix) -> String {
    let p = if m.total() > 0 { m.percentages() } else { [0.0; 4] };
    let cell = |v: u64, pct: f64| format!("{v} ({pct:.1}%)");
    let mut s = String::new();
    let _ = writeln!(s, "{:<18} {:>22} {:>22}", "", "predicted benign", "predicted malignant");
    let _ = writeln!(s, "{:<18} {:>22} {:>22}", "actual benign", cell(m.a, p[0]), cell(m.b, p[1]));
    let _ = writeln!(s, "{:<18} {:>22} {:>22}", "actual malignant", cell(m.c, p[2]), cell(m.d, p[3]));
    s
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.6}"))
}

fn write_report_files(dir: &Path, text: &str, reports: &[MetricReport], json: &serde_json::Value) -> Result<(), CliError> {
    fs::write(dir.join("metrics.txt"), text)?;
    write_reports_csv(fs::File::create(dir.join("metrics.csv"))?, reports)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(json).expect("json value") + "\n")?;
    Ok(())
}

fn write_roc(dir: &Path, samples: &[melafuse::metrics::ScoredSample], plots: bool) -> Result<bool, CliError> {
    let Ok(curve) = roc_curve(samples) else {
        return Ok(false);
    };
    let path = dir.join("roc.csv");
    curve.write_csv(fs::File::create(&path)?)?;
    if plots {
        render(&path, &dir.join("roc.svg"), Metric::Loss)?;
    }
    Ok(true)
}

pub fn train(config: Option<&Path>, overrides: &[String]) -> Result<(), CliError> {
    let cfg = RunConfig::load(config, overrides)?;
    let dataset = Dataset::load(&cfg.data.csv, &cfg.data.images)?;
    let assignment = assignment_for(&cfg, &dataset)?;
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    fs::write(
        dir.join("seeds.txt"),
        format!("train.seed={}\nfolds={}\nsamples={}\n", cfg.train.seed, assignment.k(), dataset.len()),
    )?;
    let _ = fs::remove_file(dir.join("status.txt"));

    let mut per_fold: Vec<Vec<EpochStats>> = vec![Vec::new(); assignment.k()];
    let mut io_error: Option<CliError> = None;
    let mut progress = |s: &EpochStats| {
        eprintln!(
            "fold {} epoch {} {}: loss={:.4} acc={:.4} recall_benign={} recall_malignant={}",
            s.fold,
            s.epoch,
            s.split,
            s.loss,
            s.acc,
            fmt_opt(s.recall_benign),
            fmt_opt(s.recall_malignant)
        );
        per_fold[s.fold].push(s.clone());
        // Rewritten each epoch so an interrupted run still leaves its curves.
        if let Err(e) = write_epochs(&dir.join(format!("epochs_fold{}.csv", s.fold)), &per_fold[s.fold]) {
            io_error.get_or_insert(e);
        }
    };
    let builder = |w: usize| cfg.model.build(w, cfg.train.seed);
    let result = train_kfold(&builder, &dataset, &assignment, &cfg.train, &cfg.data.pipeline, &mut progress);
    if let Some(e) = io_error {
        return Err(e);
    }
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            fs::write(dir.join("status.txt"), format!("status=failed\nerror={e}\n"))?;
            return Err(e.into());
        }
    };
    write_bundle(&cfg, &dataset, &assignment, &outcome)?;

    let oof = &outcome.oof_report;
    println!("OOF AUC: {}", fmt_opt(oof.auc));
    println!("OOF accuracy: {}", fmt_opt(oof.rates.accuracy));
    println!("OOF recall malignant: {}", fmt_opt(oof.rates.tpr));
    println!("trainable params: {}", outcome.folds[0].trainable_params);
    println!("confusion matrix at threshold {}:", cfg.train.threshold);
    print!("{}", confusion_table(&oof.confusion));
    println!("bundle: {}", dir.display());
    Ok(())
}

fn write_bundle(
    cfg: &RunConfig,
    dataset: &Dataset,
    assignment: &FoldAssignment,
    outcome: &KFoldOutcome,
) -> Result<(), CliError> {
    let dir = &cfg.output.dir;
    for f in &outcome.folds {
        let ckpt_path = dir.join("checkpoints").join(format!("fold{}.ckpt", f.fold));
        f.checkpoint.save(&ckpt_path)?;
        let (train, _) = fold_iter(assignment, f.fold)?;
        let train_records: Vec<_> = train.iter().map(|&i| dataset.records[i].clone()).collect();
        let sidecar = Sidecar {
            model: cfg.model.clone(),
            schema: FeatureSchema::fit(&train_records),
            pipeline: cfg.data.pipeline.clone(),
            threshold: cfg.train.threshold,
        };
        fs::write(sidecar_path(&ckpt_path), serde_json::to_string_pretty(&sidecar).expect("sidecar") + "\n")?;
        write_epochs(&dir.join(format!("epochs_fold{}.csv", f.fold)), &f.stats)?;
    }
    let mean_path = dir.join("epochs_mean.csv");
    write_epochs(&mean_path, &mean_stats(&outcome.all_stats()))?;

    let mut oof_csv = csv::Writer::from_path(dir.join("oof.csv")).map_err(Error::from)?;
    oof_csv.write_record(["index", "image_name", "patient_id", "fold", "target", "score"]).map_err(Error::from)?;
    for o in &outcome.oof {
        oof_csv
            .write_record([
                o.index.to_string(),
                o.image_name.clone(),
                o.patient_id.clone(),
                o.fold.to_string(),
                o.sample.label.to_string(),
                o.sample.score.to_string(),
            ])
            .map_err(Error::from)?;
    }
    oof_csv.flush()?;

    let folds_json: Vec<serde_json::Value> = outcome
        .folds
        .iter()
        .map(|f| {
            serde_json::json!({
                "fold": f.fold,
                "train_size": f.train_size,
                "val_size": f.val_size,
                "trainable_params": f.trainable_params,
                "report": f.report,
            })
        })
        .collect();
    let json = serde_json::json!({ "folds": folds_json, "oof": outcome.oof_report });
    write_report_files(dir, &outcome.report_text(), &outcome.reports(), &json)?;
    write_roc(dir, &outcome.oof_samples(), cfg.output.plots)?;
    if cfg.output.plots {
        for (metric, name) in [(Metric::Loss, "loss.svg"), (Metric::Acc, "acc.svg"), (Metric::Recall, "recall.svg")] {
            render(&mean_path, &dir.join(name), metric)?;
        }
    }
    Ok(())
}

fn parse_triple(arch: &str) -> Option<ScalingConfig> {
    let v: Vec<&str> = arch.split(',').map(str::trim).collect();
    match v.as_slice() {
        [w, d, r] => Some(ScalingConfig::new(w.parse().ok()?, d.parse().ok()?, r.parse().ok()?, 0.2)),
        _ => None,
    }
}

pub fn params(arch: &str, classes: usize) -> Result<(), CliError> {
    let graph = if arch.contains(',') {
        let scaling = parse_triple(arch)
            .ok_or_else(|| CliError::Usage(format!("`{arch}` is not a width,depth,resolution triple")))?;
        scaling.validate()?;
        build_efficientnet(scaling, classes, 0)?
    } else {
        build_classifier(arch, classes, 0)?
    };
    println!("architecture: {arch} (classes {classes})");
    println!("{}", graph.summary());
    Ok(())
}

pub fn eval(
    checkpoint: &Path,
    csv: &Path,
    images: &Path,
    out: &Path,
    config: Option<&Path>,
    overrides: &[String],
) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let side_path = sidecar_path(checkpoint);
    let sidecar: Option<Sidecar> = match fs::read_to_string(&side_path) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| {
            CliError::Core(Error::Format(format!("{}: {e}", side_path.display())))
        })?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let run_cfg = if config.is_some() || !overrides.is_empty() || sidecar.is_none() {
        Some(RunConfig::load(config, overrides)?)
    } else {
        None
    };
    let (model_cfg, pipeline, threshold, batch_size) = match (&run_cfg, &sidecar) {
        (Some(c), _) => (c.model.clone(), c.data.pipeline.clone(), c.train.threshold, c.eval.batch_size),
        (None, Some(s)) => (s.model.clone(), s.pipeline.clone(), s.threshold, 32),
        (None, None) => unreachable!("a run config is loaded when no sidecar exists"),
    };
    let schema = match &sidecar {
        Some(s) => s.schema.clone(),
        None if !model_cfg.use_metadata => FeatureSchema::new(Vec::new()),
        None => {
            return Err(CliError::Core(Error::Format(format!(
                "{} is missing; it holds the metadata encoding the checkpoint was trained with",
                side_path.display()
            ))))
        }
    };
    let mut model = model_cfg.build(schema.width(), 0)?;
    ckpt.apply(&mut model, false)?;

    let dataset = Dataset::load(csv, images)?;
    let imgs = if pipeline.hair_removal {
        let k = pipeline.hair_kernel_for(model_cfg.image_size);
        dataset.images.iter().map(|im| remove_hair(im, k, pipeline.hair_threshold)).collect::<Result<Vec<_>, _>>()?
    } else {
        dataset.images.clone()
    };
    let (samples, report) = evaluate(&model, &dataset.records, &imgs, &schema, batch_size, threshold)?;

    fs::create_dir_all(out)?;
    let mut scores = csv::Writer::from_path(out.join("scores.csv")).map_err(Error::from)?;
    scores.write_record(["image_name", "patient_id", "target", "score"]).map_err(Error::from)?;
    for (r, s) in dataset.records.iter().zip(&samples) {
        scores
            .write_record([r.image_name.clone(), r.patient_id.clone(), s.label.to_string(), s.score.to_string()])
            .map_err(Error::from)?;
    }
    scores.flush()?;
    let json = serde_json::json!({ "eval": report });
    write_report_files(out, &report.to_key_values(""), std::slice::from_ref(&report), &json)?;
    if !write_roc(out, &samples, true)? {
        eprintln!("warning: the input holds a single class; AUC and the ROC curve are undefined");
    }

    println!("samples: {}", report.n);
    println!("AUC: {}", fmt_opt(report.auc));
    println!("accuracy: {}", fmt_opt(report.rates.accuracy));
    println!("confusion matrix at threshold {threshold}:");
    print!("{}", confusion_table(&report.confusion));
    Ok(())
}

pub fn plot(input: &Path, out: &Path, metric: Metric) -> Result<(), CliError> {
    render(input, out, metric)
}
