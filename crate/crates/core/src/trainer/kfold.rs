use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::time::Instant;

use super::checkpoint::Checkpoint;
use super::config::{PipelineConfig, TrainConfig};
use super::loss::cross_entropy_loss;
use super::optim::Optimizer;
use crate::data::{
    augment, batch_tensor, encode_features, oversample_indices, remove_hair, AugmentPolicy, Dataset, FeatureSchema,
    Image, MetadataRecord, Provenance,
};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, ScoredSample};
use crate::models::{CountMode, FusionModel, InputSpec, Selector};
use crate::nn::Mode;
use crate::splitter::{fold_iter, FoldAssignment};
use crate::tensor::{derive_seed, SeededRng, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// One epoch's summary on one split. Recalls are `None` when the split
/// holds no sample of that class.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub fold: usize,
    /// Counted from 1.
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub acc: f64,
    pub recall_benign: Option<f64>,
    pub recall_malignant: Option<f64>,
    pub seconds: f64,
}

pub const EPOCH_COLUMNS: [&str; 7] = ["epoch", "split", "loss", "acc", "recall_benign", "recall_malignant", "seconds"];

/// One CSV row per entry under the fixed header; the fold is not a column.
pub fn write_epoch_csv(writer: impl Write, stats: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EPOCH_COLUMNS)?;
    let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
    for s in stats {
        w.write_record([
            s.epoch.to_string(),
            s.split.to_string(),
            s.loss.to_string(),
            s.acc.to_string(),
            opt(s.recall_benign),
            opt(s.recall_malignant),
            format!("{:.3}", s.seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Out-of-fold score for one original sample.
#[derive(Clone, Debug, PartialEq)]
pub struct OofPrediction {
    pub index: usize,
    pub image_name: String,
    pub patient_id: String,
    pub fold: usize,
    pub sample: ScoredSample,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    /// Training items per epoch, oversampled copies included.
    pub train_size: usize,
    pub val_size: usize,
    pub stats: Vec<EpochStats>,
    pub report: MetricReport,
    pub checkpoint: Checkpoint,
    pub trainable_params: usize,
}

#[derive(Clone, Debug)]
pub struct KFoldOutcome {
    pub folds: Vec<FoldOutcome>,
    /// Ordered by dataset index; covers every original sample once.
    pub oof: Vec<OofPrediction>,
    pub oof_report: MetricReport,
}

impl KFoldOutcome {
    pub fn oof_samples(&self) -> Vec<ScoredSample> {
        self.oof.iter().map(|o| o.sample).collect()
    }

    /// Per-fold and OOF metrics as `key=value` lines. Timings are left out,
    /// so identical runs give identical text.
    pub fn report_text(&self) -> String {
        let mut s = String::new();
        for f in &self.folds {
            s.push_str(&f.report.to_key_values(&format!("fold{}", f.fold)));
        }
        s.push_str(&self.oof_report.to_key_values("oof"));
        s
    }

    pub fn reports(&self) -> Vec<MetricReport> {
        self.folds.iter().map(|f| f.report.clone()).chain(std::iter::once(self.oof_report.clone())).collect()
    }

    pub fn all_stats(&self) -> Vec<EpochStats> {
        self.folds.iter().flat_map(|f| f.stats.iter().cloned()).collect()
    }
}

/// Images after optional hair removal, with their records.
pub(crate) struct Prepared<'a> {
    pub records: &'a [MetadataRecord],
    pub images: Vec<Image>,
}

impl<'a> Prepared<'a> {
    pub fn new(dataset: &'a Dataset, pipeline: &PipelineConfig, image_size: usize) -> Result<Self> {
        pipeline.validate(image_size)?;
        let images = if pipeline.hair_removal {
            let k = pipeline.hair_kernel_for(image_size);
            dataset
                .images
                .iter()
                .map(|im| remove_hair(im, k, pipeline.hair_threshold))
                .collect::<Result<Vec<_>>>()?
        } else {
            dataset.images.clone()
        };
        for (r, im) in dataset.records.iter().zip(&images) {
            if im.height() < image_size || im.width() < image_size {
                return Err(Error::Shape(format!(
                    "{} is {}×{}, smaller than the model input {image_size}",
                    r.image_name,
                    im.height(),
                    im.width()
                )));
            }
        }
        Ok(Self { records: &dataset.records, images })
    }
}

/// Square input extent of the model's image branch.
pub fn model_image_size(model: &FusionModel) -> Result<usize> {
    match model.image.input {
        InputSpec::Image { resolution, .. } => Ok(resolution),
        InputSpec::Vector { .. } => Err(Error::Shape("image branch consumes vectors".into())),
    }
}

/// An entry of a training list: a dataset index and how it got there.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Item {
    pub index: usize,
    pub provenance: Provenance,
}

fn sample_seed(seed: u64, fold: usize, epoch: usize, record: &MetadataRecord, provenance: Provenance) -> u64 {
    derive_seed(
        seed,
        &[
            b"augment",
            &(fold as u64).to_le_bytes(),
            &(epoch as u64).to_le_bytes(),
            record.image_name.as_bytes(),
            provenance.to_string().as_bytes(),
        ],
    )
}

fn feature_tensor(model: &FusionModel, records: &[&MetadataRecord], schema: &FeatureSchema) -> Result<Option<Tensor>> {
    if model.tabular.is_none() {
        return Ok(None);
    }
    let width = schema.width();
    let mut data = Vec::with_capacity(records.len() * width);
    for r in records {
        data.extend(encode_features(r, schema));
    }
    Tensor::new(&[records.len(), width], data).map(Some)
}

/// Class tallies behind accuracy and per-class recall.
#[derive(Clone, Copy, Debug, Default)]
struct Tally {
    loss_sum: f64,
    n: usize,
    correct: [usize; 2],
    seen: [usize; 2],
}

impl Tally {
    fn add(&mut self, batch_loss: f64, probs: &Tensor, targets: &[u8], threshold: f64) {
        self.loss_sum += batch_loss * targets.len() as f64;
        self.n += targets.len();
        for (i, &t) in targets.iter().enumerate() {
            let predicted = u8::from(probs.at(&[i, 1]) >= threshold);
            self.seen[usize::from(t)] += 1;
            if predicted == t {
                self.correct[usize::from(t)] += 1;
            }
        }
    }

    fn stats(&self, fold: usize, epoch: usize, split: Split, seconds: f64) -> EpochStats {
        let recall = |c: usize| (self.seen[c] > 0).then(|| self.correct[c] as f64 / self.seen[c] as f64);
        EpochStats {
            fold,
            epoch,
            split,
            loss: self.loss_sum / self.n as f64,
            acc: (self.correct[0] + self.correct[1]) as f64 / self.n as f64,
            recall_benign: recall(0),
            recall_malignant: recall(1),
            seconds,
        }
    }
}

/// Split `0..n` into consecutive batches; a trailing single item joins the
/// previous batch so batch normalization never sees one sample alone.
fn batch_ranges(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(batch).map(|s| s..(s + batch).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("at least one batch").end = last.end;
    }
    out
}

/// Eval-mode probabilities `[N, 2]` over `indices`, scored in batches.
fn predict_indices(
    model: &FusionModel,
    prep: &Prepared,
    indices: &[usize],
    schema: &FeatureSchema,
    batch_size: usize,
) -> Result<Vec<[f64; 2]>> {
    let size = model_image_size(model)?;
    let policy = AugmentPolicy::eval(size);
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let imgs = chunk
            .iter()
            .map(|&i| augment(&prep.images[i], &policy, &mut SeededRng::new(0)))
            .collect::<Result<Vec<_>>>()?;
        let recs: Vec<&MetadataRecord> = chunk.iter().map(|&i| &prep.records[i]).collect();
        let mut tape = Tape::new();
        let x = tape.constant(batch_tensor(&imgs.iter().collect::<Vec<_>>())?);
        let f = feature_tensor(model, &recs, schema)?.map(|t| tape.constant(t));
        let pass = model.forward(&mut tape, x, f, Mode::Eval, &mut SeededRng::new(0))?;
        let p = tape.value(pass.output);
        for i in 0..chunk.len() {
            out.push([p.at(&[i, 0]), p.at(&[i, 1])]);
        }
    }
    Ok(out)
}

fn scored(probs: &[[f64; 2]], labels: impl Iterator<Item = u8>) -> Result<Vec<ScoredSample>> {
    probs.iter().zip(labels).map(|(p, l)| ScoredSample::new(p[1].clamp(0.0, 1.0), l)).collect()
}

fn mean_ce(probs: &[[f64; 2]], labels: &[u8], weights: Option<[f64; 2]>) -> f64 {
    let w = weights.unwrap_or([1.0, 1.0]);
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| -w[usize::from(l)] * super::loss::clamped_log(p[usize::from(l)]))
        .sum();
    sum / labels.len() as f64
}

/// Eval-mode scores and metric report for a set of records and images.
pub fn evaluate(
    model: &FusionModel,
    records: &[MetadataRecord],
    images: &[Image],
    schema: &FeatureSchema,
    batch_size: usize,
    threshold: f64,
) -> Result<(Vec<ScoredSample>, MetricReport)> {
    if records.len() != images.len() {
        return Err(Error::Shape(format!("{} records but {} images", records.len(), images.len())));
    }
    let prep = Prepared { records, images: images.to_vec() };
    let idx: Vec<usize> = (0..records.len()).collect();
    let probs = predict_indices(model, &prep, &idx, schema, batch_size)?;
    let samples = scored(&probs, records.iter().map(|r| r.target))?;
    let report = MetricReport::new("eval", &samples, threshold);
    Ok((samples, report))
}

/// Validation data for per-epoch monitoring.
pub(crate) struct ValSet<'a> {
    pub indices: &'a [usize],
}

/// Train `model` on `items` for the configured epochs. Returns per-epoch
/// stats for the training split and, when given, the validation split.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit(
    model: &mut FusionModel,
    prep: &Prepared,
    items: &[Item],
    val: Option<ValSet>,
    schema: &FeatureSchema,
    fold: usize,
    cfg: &TrainConfig,
    pipeline: &PipelineConfig,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let size = model_image_size(model)?;
    let policy = pipeline.train_policy(size);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut stats = Vec::new();
    let fold_bytes = (fold as u64).to_le_bytes();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let epoch_bytes = (epoch as u64).to_le_bytes();
        let mut order: Vec<usize> = (0..items.len()).collect();
        SeededRng::new(derive_seed(cfg.seed, &[b"shuffle", &fold_bytes, &epoch_bytes])).shuffle(&mut order);
        let mut tally = Tally::default();
        for (b, range) in batch_ranges(order.len(), cfg.batch_size).into_iter().enumerate() {
            let batch: Vec<Item> = order[range].iter().map(|&k| items[k]).collect();
            let imgs = batch
                .iter()
                .map(|it| {
                    let rec = &prep.records[it.index];
                    let mut rng = SeededRng::new(sample_seed(cfg.seed, fold, epoch, rec, it.provenance));
                    augment(&prep.images[it.index], &policy, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let recs: Vec<&MetadataRecord> = batch.iter().map(|it| &prep.records[it.index]).collect();
            let targets: Vec<u8> = recs.iter().map(|r| r.target).collect();

            let mut tape = Tape::new();
            let x = tape.constant(batch_tensor(&imgs.iter().collect::<Vec<_>>())?);
            let f = feature_tensor(model, &recs, schema)?.map(|t| tape.constant(t));
            let mut rng = SeededRng::new(derive_seed(
                cfg.seed,
                &[b"dropout", &fold_bytes, &epoch_bytes, &(b as u64).to_le_bytes()],
            ));
            let pass = model.forward(&mut tape, x, f, Mode::Train, &mut rng)?;
            let loss = cross_entropy_loss(&mut tape, pass.output, &targets, cfg.class_weights)?;
            let loss_value = tape.value(loss).item().expect("scalar loss");
            if !loss_value.is_finite() {
                return Err(Error::Divergence { fold, epoch, loss: loss_value });
            }
            tally.add(loss_value, tape.value(pass.output), &targets, cfg.threshold);
            let grads = tape.backward(loss)?;
            opt.step(model, &pass.bindings, &grads)?;
            model.commit(pass.stat_updates);
        }
        let train = tally.stats(fold, epoch, Split::Train, start.elapsed().as_secs_f64());
        progress(&train);
        stats.push(train);
        if let Some(v) = &val {
            let start = Instant::now();
            let probs = predict_indices(model, prep, v.indices, schema, cfg.batch_size)?;
            let labels: Vec<u8> = v.indices.iter().map(|&i| prep.records[i].target).collect();
            let mut t = Tally::default();
            let p = Tensor::new(&[probs.len(), 2], probs.iter().flatten().copied().collect())?;
            t.add(mean_ce(&probs, &labels, cfg.class_weights), &p, &labels, cfg.threshold);
            let vs = t.stats(fold, epoch, Split::Val, start.elapsed().as_secs_f64());
            progress(&vs);
            stats.push(vs);
        }
    }
    Ok(stats)
}

/// Training list for `train` indices: originals, then oversampled copies.
pub(crate) fn training_items(
    prep: &Prepared,
    train: &[usize],
    cfg: &TrainConfig,
    fold: usize,
) -> Result<Vec<Item>> {
    match cfg.oversample_ratio {
        None => Ok(train.iter().map(|&index| Item { index, provenance: Provenance::Original }).collect()),
        Some(ratio) => {
            let labels: Vec<u8> = train.iter().map(|&i| prep.records[i].target).collect();
            let mut rng = SeededRng::new(derive_seed(cfg.seed, &[b"oversample", &(fold as u64).to_le_bytes()]));
            Ok(oversample_indices(&labels, ratio, &mut rng)?
                .into_iter()
                .map(|d| Item { index: train[d.source], provenance: d.provenance })
                .collect())
        }
    }
}

/// Patients on both sides of a split, or copies of validation samples, are errors.
fn check_no_leakage(prep: &Prepared, items: &[Item], val: &[usize], fold: usize) -> Result<()> {
    let val_set: HashSet<usize> = val.iter().copied().collect();
    let val_patients: HashSet<&str> = val.iter().map(|&i| prep.records[i].patient_id.as_str()).collect();
    for it in items {
        if val_set.contains(&it.index) {
            return Err(Error::Consistency(format!(
                "fold {fold}: {} is in both training and validation",
                prep.records[it.index].image_name
            )));
        }
        let p = prep.records[it.index].patient_id.as_str();
        if val_patients.contains(p) {
            return Err(Error::Consistency(format!("fold {fold}: patient {p} appears in training and validation")));
        }
    }
    Ok(())
}

/// K-fold training with out-of-fold scoring. `builder` receives the
/// metadata feature width of the fold (sites are fitted on its training
/// portion) and must return a freshly initialized model.
pub fn train_kfold(
    builder: &dyn Fn(usize) -> Result<FusionModel>,
    dataset: &Dataset,
    assignment: &FoldAssignment,
    cfg: &TrainConfig,
    pipeline: &PipelineConfig,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<KFoldOutcome> {
    cfg.validate()?;
    if assignment.len() != dataset.len() {
        return Err(Error::Consistency(format!(
            "fold assignment covers {} samples, dataset has {}",
            assignment.len(),
            dataset.len()
        )));
    }
    let mut prep: Option<Prepared> = None;
    let mut folds = Vec::with_capacity(assignment.k());
    let mut oof = Vec::with_capacity(dataset.len());
    for fold in 0..assignment.k() {
        let (train, val) = fold_iter(assignment, fold)?;
        let train_records: Vec<MetadataRecord> = train.iter().map(|&i| dataset.records[i].clone()).collect();
        let schema = FeatureSchema::fit(&train_records);
        let mut model = builder(schema.width())?;
        if cfg.freeze_image_branch {
            model.set_trainable(Selector::ImageBranch, false)?;
        }
        let size = model_image_size(&model)?;
        if prep.is_none() {
            prep = Some(Prepared::new(dataset, pipeline, size)?);
        }
        let prep = prep.as_ref().expect("prepared above");
        let items = training_items(prep, &train, cfg, fold)?;
        check_no_leakage(prep, &items, &val, fold)?;
        let stats = fit(&mut model, prep, &items, Some(ValSet { indices: &val }), &schema, fold, cfg, pipeline, progress)?;

        let probs = predict_indices(&model, prep, &val, &schema, cfg.batch_size)?;
        let samples = scored(&probs, val.iter().map(|&i| dataset.records[i].target))?;
        for (&i, s) in val.iter().zip(&samples) {
            let r = &dataset.records[i];
            oof.push(OofPrediction {
                index: i,
                image_name: r.image_name.clone(),
                patient_id: r.patient_id.clone(),
                fold,
                sample: *s,
            });
        }
        let ckpt_rng = SeededRng::new(derive_seed(cfg.seed, &[b"checkpoint", &(fold as u64).to_le_bytes()]));
        folds.push(FoldOutcome {
            fold,
            train_size: items.len(),
            val_size: val.len(),
            stats,
            report: MetricReport::new(format!("fold{fold}"), &samples, cfg.threshold),
            checkpoint: Checkpoint::from_model(&model, &ckpt_rng),
            trainable_params: model.count_params(CountMode::RespectFreeze).trainable,
        });
    }
    oof.sort_by_key(|o| o.index);
    if oof.len() != dataset.len() || oof.iter().enumerate().any(|(k, o)| o.index != k) {
        return Err(Error::Consistency("out-of-fold scores do not cover the dataset exactly once".into()));
    }
    let samples: Vec<ScoredSample> = oof.iter().map(|o| o.sample).collect();
    let oof_report = MetricReport::new("oof", &samples, cfg.threshold);
    Ok(KFoldOutcome { folds, oof, oof_report })
}

/// Train on every sample of `dataset` without validation.
pub fn train_full(
    model: &mut FusionModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    pipeline: &PipelineConfig,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<(FeatureSchema, Vec<EpochStats>)> {
    cfg.validate()?;
    let prep = Prepared::new(dataset, pipeline, model_image_size(model)?)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let schema = FeatureSchema::fit(&dataset.records);
    if let Some(w) = model.feature_width() {
        if w != schema.width() {
            return Err(Error::Shape(format!("model expects {w} metadata features, data encodes {}", schema.width())));
        }
    }
    let items = training_items(&prep, &all, cfg, 0)?;
    let stats = fit(model, &prep, &items, None, &schema, 0, cfg, pipeline, progress)?;
    Ok((schema, stats))
}
