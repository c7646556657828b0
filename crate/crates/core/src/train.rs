//! Training procedures: one-to-many (foundation) and one-to-one TCN training,
//! contrastive encoder training, and embedding-only enrollment of a new device.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{batch_stream, derive_seed, rng_from, Batch, BatchKind, BatchSource, BatchSpec, RenderedPair};
use crate::encoder::{nt_xent_grad, EncoderConfig, EncoderModel, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::metrics::{esr_grad, to_db, CombinedLoss, LossParts};
use crate::model_zoo::DeviceRegistry;
use crate::optim::{AdamConfig, AdamState};
use crate::par;
use crate::signal_io::Corpus;
use crate::tcn::{TcnConfig, TcnGrads, TcnModel};
use crate::tensor::{GradSet, Leaves, Tensor};

/// A clean input and the device's rendered output.
pub type Pair = (Vec<f64>, Vec<f64>);

const SEED_INIT: u64 = 0x1417;
const SEED_TRAIN: u64 = 0x7A41;
const SEED_VAL: u64 = 0x7A42;
const SEED_SPLIT: u64 = 0x5B17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// ESR plus multi-resolution spectral loss.
    #[default]
    EsrMrsl,
    Esr,
}

/// Training objective for the TCN.
#[derive(Debug, Clone, Default)]
pub struct Objective {
    pub kind: LossKind,
    pub combined: CombinedLoss,
}

impl Objective {
    pub fn new(kind: LossKind) -> Self {
        Objective { kind, combined: CombinedLoss::default() }
    }

    pub fn value_grad(&self, target: &[f64], pred: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self.kind {
            LossKind::EsrMrsl => {
                let (parts, g) = self.combined.value_grad(target, pred)?;
                Ok((parts.total(), g))
            }
            LossKind::Esr => esr_grad(target, pred, self.combined.pre_emph),
        }
    }
}

/// TCN shape apart from the device count, which comes from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcnArch {
    pub n_blocks: usize,
    pub layers_per_block: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub dilation_growth: usize,
    pub embed_dim: usize,
}

impl Default for TcnArch {
    fn default() -> Self {
        TcnArch { n_blocks: 2, layers_per_block: 8, channels: 16, kernel_size: 3, dilation_growth: 2, embed_dim: 64 }
    }
}

impl TcnArch {
    pub fn config(&self, n_devices: usize) -> TcnConfig {
        TcnConfig {
            n_blocks: self.n_blocks,
            layers_per_block: self.layers_per_block,
            channels: self.channels,
            kernel_size: self.kernel_size,
            dilation_growth: self.dilation_growth,
            embed_dim: self.embed_dim,
            n_devices,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub clip_seconds: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub lr: f64,
    pub loss: LossKind,
    /// Fraction of the clean corpus (taken from the start of each file) used
    /// for training clips.
    pub data_fraction: f64,
    pub grad_clip: f64,
    pub val_batches: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            clip_seconds: 2.0,
            epochs: 8,
            steps_per_epoch: 100,
            seed: 0,
            lr: 1e-3,
            loss: LossKind::EsrMrsl,
            data_fraction: 1.0,
            grad_clip: 10.0,
            val_batches: 1,
            workers: 1,
        }
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::Value(format!("data fraction must be in (0, 1], got {f}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 || self.workers == 0 {
            return Err(Error::Value("batch_size, epochs, steps_per_epoch and workers must be positive".into()));
        }
        if !(self.clip_seconds > 0.0 && self.lr > 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Value("clip_seconds, lr and grad_clip must be positive".into()));
        }
        check_fraction(self.data_fraction)
    }
}

/// One row of a loss log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub esr_db: Option<f64>,
    pub mrsl_db: Option<f64>,
}

pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub log: Vec<LogRow>,
}

fn pair_of(p: &RenderedPair) -> (usize, Vec<f64>, Vec<f64>) {
    (p.device_id, p.clean.to_f64(), p.wet.to_f64())
}

fn pair_loss_grad(model: &TcnModel, device: Option<usize>, emb: &[f64], x: &[f64], y: &[f64], obj: &Objective) -> Result<(f64, TcnGrads)> {
    let (out, cache) = model.forward_train(x, device, emb)?;
    let (l, g) = obj.value_grad(y, &out)?;
    Ok((l, model.backward(&cache, &g)?))
}

/// Mean loss and mean parameter gradients over a batch of device pairs.
/// Per-pair work may run in parallel; reductions run in batch order.
pub fn batch_loss_grad(model: &TcnModel, items: &[(usize, Vec<f64>, Vec<f64>)], obj: &Objective) -> Result<(f64, GradSet)> {
    let parts = par::map(items, |(d, x, y)| {
        let e = model.embedding_lookup(*d)?;
        pair_loss_grad(model, Some(*d), &e, x, y, obj)
    });
    let n = items.len() as f64;
    let mut total = GradSet::zeros_for(model);
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        total.accumulate(&g.params)?;
    }
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

/// ESR and MRSL of the model on `pairs` under `embedding`, averaged over pairs.
pub fn mean_parts(model: &TcnModel, embedding: &[f64], pairs: &[Pair]) -> Result<LossParts> {
    if pairs.is_empty() {
        return Err(Error::Empty("no pairs to evaluate".into()));
    }
    let loss = CombinedLoss::default();
    let parts = par::map(pairs, |(x, y)| loss.parts(y, &model.forward_with_embedding(x, embedding)?));
    let mut acc = LossParts { esr: 0.0, mrsl: 0.0 };
    for p in parts {
        let p = p?;
        acc.esr += p.esr;
        acc.mrsl += p.mrsl;
    }
    let n = pairs.len() as f64;
    Ok(LossParts { esr: acc.esr / n, mrsl: acc.mrsl / n })
}

/// Per-device mean losses of `(device, clean, wet)` items.
pub fn evaluate_tcn(model: &TcnModel, items: &[(usize, Vec<f64>, Vec<f64>)]) -> Result<BTreeMap<usize, LossParts>> {
    let mut by_device: BTreeMap<usize, Vec<Pair>> = BTreeMap::new();
    for (d, x, y) in items {
        by_device.entry(*d).or_default().push((x.clone(), y.clone()));
    }
    by_device
        .into_iter()
        .map(|(d, pairs)| Ok((d, mean_parts(model, &model.embedding_lookup(d)?, &pairs)?)))
        .collect()
}

fn db_or_none(x: f64) -> Option<f64> {
    to_db(x).ok()
}

fn eval_row(model: &TcnModel, val: &[(usize, Vec<f64>, Vec<f64>)], step: usize, train_loss: Option<f64>) -> Result<LogRow> {
    if val.is_empty() {
        return Ok(LogRow { step, train_loss, val_loss: None, esr_db: None, mrsl_db: None });
    }
    let per = evaluate_tcn(model, val)?;
    let n = per.len() as f64;
    let esr = per.values().map(|p| p.esr).sum::<f64>() / n;
    let mrsl = per.values().map(|p| p.mrsl).sum::<f64>() / n;
    Ok(LogRow { step, train_loss, val_loss: Some(esr + mrsl), esr_db: db_or_none(esr), mrsl_db: db_or_none(mrsl) })
}

/// Keeps the first `fraction` of every corpus file.
fn corpus_fraction(corpus: &Arc<Corpus>, fraction: f64, min_samples: usize) -> Result<Arc<Corpus>> {
    check_fraction(fraction)?;
    if fraction == 1.0 {
        return Ok(corpus.clone());
    }
    let files = corpus
        .files()
        .iter()
        .map(|f| {
            let n = ((f.clip.len() as f64 * fraction).ceil() as usize).max(min_samples).min(f.clip.len());
            Ok((f.name.clone(), crate::signal_io::AudioClip::new(f.clip.samples[..n].to_vec(), f.clip.sample_rate)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Arc::new(Corpus::from_clips(files)?))
}

/// Trains a TCN over every device of `registry`, one embedding row per device.
pub fn train_foundation(corpus: Arc<Corpus>, registry: Arc<DeviceRegistry>, arch: &TcnArch, cfg: &TrainConfig) -> Result<TrainOutcome<TcnModel>> {
    cfg.validate()?;
    if registry.is_empty() {
        return Err(Error::BatchSpec("registry has no devices".into()));
    }
    let n = corpus.samples_for(cfg.clip_seconds)?;
    let train_corpus = corpus_fraction(&corpus, cfg.data_fraction, n)?;
    let mut model = TcnModel::init(arch.config(registry.len()), derive_seed(cfg.seed, &[SEED_INIT]))?;
    let mut opt = AdamState::new(&model, AdamConfig::with_lr(cfg.lr));
    let obj = Objective::new(cfg.loss);
    let spec = BatchSpec { kind: BatchKind::Paired { batch_size: cfg.batch_size }, duration_s: cfg.clip_seconds };

    let val_source = BatchSource { corpus: corpus.clone(), registry: registry.clone(), spec, global_seed: derive_seed(cfg.seed, &[SEED_VAL]) };
    let mut val = Vec::new();
    for k in 0..cfg.val_batches as u64 {
        if let Batch::Paired(pairs) = val_source.batch(k)? {
            val.extend(pairs.iter().map(pair_of));
        }
    }

    let source = BatchSource { corpus: train_corpus, registry, spec, global_seed: derive_seed(cfg.seed, &[SEED_TRAIN]) };
    let mut stream = batch_stream(source, cfg.workers);
    let mut log = Vec::with_capacity(cfg.epochs + 1);
    let mut step = 0;
    let mut initial = None;
    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            step += 1;
            let batch = match stream.next() {
                Some(Ok(Batch::Paired(p))) => p,
                Some(Ok(Batch::Contrastive(_))) => return Err(Error::BatchSpec("expected paired batches".into())),
                Some(Err(e)) => return Err(e),
                None => return Err(Error::BatchSpec("batch stream ended".into())),
            };
            let items: Vec<_> = batch.iter().map(pair_of).collect();
            let (loss, mut grads) = batch_loss_grad(&model, &items, &obj)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, detail: format!("loss is {loss}") });
            }
            if initial.is_none() {
                initial = Some(loss);
                log.push(eval_row(&model, &val, 0, Some(loss))?);
            }
            grads.clip_global_norm(cfg.grad_clip);
            opt.step(&mut model, &grads).map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence { step, detail },
                other => other,
            })?;
            epoch_loss += loss;
        }
        let row = eval_row(&model, &val, step, Some(epoch_loss / cfg.steps_per_epoch as f64))?;
        log::info!("step {step}: train {:?} val {:?}", row.train_loss, row.val_loss);
        log.push(row);
    }
    Ok(TrainOutcome { model, log })
}

/// Baseline: a TCN trained on one device only (embedding table with one row).
pub fn train_one_to_one(
    corpus: Arc<Corpus>,
    registry: &DeviceRegistry,
    device_id: usize,
    arch: &TcnArch,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<TcnModel>> {
    train_foundation(corpus, Arc::new(registry.subset(&[device_id])?), arch, cfg)
}

// -------------------------------------------------------------- enrollment

/// Index of the embedding row with the lowest total combined loss on `pairs`.
/// Per-pair losses are summed in sorted order, so the result does not depend
/// on pair order; ties go to the lowest index.
pub fn select_initial_embedding(model: &TcnModel, pairs: &[Pair]) -> Result<usize> {
    if pairs.is_empty() {
        return Err(Error::Empty("no pairs for embedding selection".into()));
    }
    let loss = CombinedLoss::default();
    let totals = par::try_map_range(model.config.n_devices, |d| {
        let e = model.embedding_lookup(d)?;
        let mut ls = pairs
            .iter()
            .map(|(x, y)| loss.value(y, &model.forward_with_embedding(x, &e)?))
            .collect::<Result<Vec<f64>>>()?;
        ls.sort_by(f64::total_cmp);
        Ok::<f64, Error>(ls.iter().sum())
    })?;
    let mut best = 0;
    for (d, &t) in totals.iter().enumerate() {
        if t < totals[best] {
            best = d;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnrollConfig {
    pub lr: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub val_every: usize,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    pub data_fraction: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub grad_clip: f64,
}

impl Default for EnrollConfig {
    fn default() -> Self {
        EnrollConfig {
            lr: 1e-2,
            max_steps: 2000,
            batch_size: 4,
            val_every: 50,
            patience: 10,
            data_fraction: 1.0,
            seed: 0,
            loss: LossKind::EsrMrsl,
            grad_clip: 10.0,
        }
    }
}

impl EnrollConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.batch_size == 0 || self.val_every == 0 || self.patience == 0 {
            return Err(Error::Value("max_steps, batch_size, val_every and patience must be positive".into()));
        }
        if !(self.lr > 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Value("lr and grad_clip must be positive".into()));
        }
        check_fraction(self.data_fraction)
    }
}

#[derive(Debug, Clone)]
pub struct PairSplit {
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
    pub test: Vec<Pair>,
}

/// Shuffled 90-5-5 split (validation and test get at least one pair each).
pub fn split_pairs(pairs: &[Pair], seed: u64) -> Result<PairSplit> {
    let n = pairs.len();
    if n < 3 {
        return Err(Error::Empty(format!("need at least 3 pairs to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(derive_seed(seed, &[SEED_SPLIT])));
    let n_held = ((n as f64 * 0.05).round() as usize).max(1);
    let take = |r: std::ops::Range<usize>| idx[r].iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
    Ok(PairSplit { val: take(0..n_held), test: take(n_held..2 * n_held), train: take(2 * n_held..n) })
}

#[derive(Debug, Clone)]
pub struct EnrollOutcome {
    pub embedding: Vec<f64>,
    pub initial_index: usize,
    pub train_pairs: usize,
    pub best_step: usize,
    pub initial_test: LossParts,
    pub test: LossParts,
    pub log: Vec<LogRow>,
}

/// Learns a new embedding for an unseen device with every model weight
/// frozen. Starts from the best existing row and returns the embedding with
/// the lowest validation loss.
pub fn enroll_device(model: &TcnModel, pairs: &[Pair], cfg: &EnrollConfig) -> Result<EnrollOutcome> {
    cfg.validate()?;
    let split = split_pairs(pairs, cfg.seed)?;
    if split.train.is_empty() {
        return Err(Error::Empty("no training pairs left after the split".into()));
    }
    let keep = ((split.train.len() as f64 * cfg.data_fraction).ceil() as usize).clamp(1, split.train.len());
    let train = &split.train[..keep];
    let initial_index = select_initial_embedding(model, train)?;
    let e0 = model.embedding_lookup(initial_index)?;
    let dim = e0.len();
    let mut leaves = Leaves(vec![("embedding".into(), Tensor::from_vec(&[dim], e0.clone())?)]);
    let mut opt = AdamState::new(&leaves, AdamConfig::with_lr(cfg.lr));
    let obj = Objective::new(cfg.loss);
    let mut rng = rng_from(derive_seed(cfg.seed, &[SEED_TRAIN]));

    let val_parts = |e: &[f64]| mean_parts(model, e, &split.val);
    let first = val_parts(&e0)?;
    let mut best = (first.total(), e0.clone(), 0usize);
    let mut log = vec![LogRow { step: 0, train_loss: None, val_loss: Some(first.total()), esr_db: db_or_none(first.esr), mrsl_db: db_or_none(first.mrsl) }];
    let mut stagnant = 0;
    let mut window = 0.0;
    for step in 1..=cfg.max_steps {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..train.len())).collect();
        let e = leaves.0[0].1.data.clone();
        let parts = par::map(&picks, |&i| pair_loss_grad(model, None, &e, &train[i].0, &train[i].1, &obj));
        let mut loss = 0.0;
        let mut g = vec![0.0; dim];
        for p in parts {
            let (l, tg) = p?;
            loss += l;
            for (a, b) in g.iter_mut().zip(&tg.embedding) {
                *a += b;
            }
        }
        let n = cfg.batch_size as f64;
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, detail: format!("enrollment loss is {loss}") });
        }
        let mut grads = GradSet { entries: vec![("embedding".into(), Tensor::from_vec(&[dim], g.iter().map(|v| v / n).collect())?)] };
        grads.clip_global_norm(cfg.grad_clip);
        opt.step(&mut leaves, &grads)?;
        window += loss;
        if step % cfg.val_every == 0 {
            let v = val_parts(&leaves.0[0].1.data)?;
            log.push(LogRow {
                step,
                train_loss: Some(window / cfg.val_every as f64),
                val_loss: Some(v.total()),
                esr_db: db_or_none(v.esr),
                mrsl_db: db_or_none(v.mrsl),
            });
            window = 0.0;
            if v.total() < best.0 {
                best = (v.total(), leaves.0[0].1.data.clone(), step);
                stagnant = 0;
            } else {
                stagnant += 1;
                if stagnant >= cfg.patience {
                    break;
                }
            }
        }
    }
    let initial_test = mean_parts(model, &e0, &split.test)?;
    let test = mean_parts(model, &best.1, &split.test)?;
    Ok(EnrollOutcome { embedding: best.1, initial_index, train_pairs: keep, best_step: best.2, initial_test, test, log })
}

// ----------------------------------------------------------------- encoder

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderTrainConfig {
    pub n_pairs: usize,
    pub clip_seconds: f64,
    pub iterations: usize,
    pub seed: u64,
    pub lr: f64,
    pub temperature: f64,
    pub grad_clip: f64,
    pub log_every: usize,
    pub workers: usize,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            n_pairs: 64,
            clip_seconds: 1.0,
            iterations: 1000,
            seed: 0,
            lr: 1e-3,
            temperature: DEFAULT_TEMPERATURE,
            grad_clip: 10.0,
            log_every: 100,
            workers: 1,
        }
    }
}

impl EncoderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 || self.iterations == 0 || self.log_every == 0 || self.workers == 0 {
            return Err(Error::Value("n_pairs, iterations, log_every and workers must be positive".into()));
        }
        if !(self.clip_seconds > 0.0 && self.lr > 0.0 && self.temperature > 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Value("clip_seconds, lr, temperature and grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Seed of the fixed held-out contrastive batch used for logging.
    pub fn heldout_seed(&self) -> u64 {
        derive_seed(self.seed, &[SEED_VAL])
    }
}

/// Held-out NT-Xent with batch statistics (running statistics untouched).
pub fn contrastive_loss(model: &EncoderModel, views: &[Vec<f64>], pair_index: &[usize], temperature: f64) -> Result<f64> {
    let (emb, _) = model.forward_batch_stats(views)?;
    Ok(nt_xent_grad(&emb, pair_index, temperature)?.0)
}

pub fn train_encoder(
    corpus: Arc<Corpus>,
    registry: Arc<DeviceRegistry>,
    encoder: &EncoderConfig,
    cfg: &EncoderTrainConfig,
) -> Result<TrainOutcome<EncoderModel>> {
    cfg.validate()?;
    if registry.len() < 2 {
        return Err(Error::BatchSpec("contrastive training needs at least two devices".into()));
    }
    let mut model = EncoderModel::init(encoder.clone(), derive_seed(cfg.seed, &[SEED_INIT]))?;
    let mut opt = AdamState::new(&model, AdamConfig::with_lr(cfg.lr));
    let spec = BatchSpec { kind: BatchKind::Contrastive { n_pairs: cfg.n_pairs }, duration_s: cfg.clip_seconds };
    let heldout_src = BatchSource { corpus: corpus.clone(), registry: registry.clone(), spec, global_seed: cfg.heldout_seed() };
    let Batch::Contrastive(held) = heldout_src.batch(0)? else {
        return Err(Error::BatchSpec("expected a contrastive batch".into()));
    };
    let held_views: Vec<Vec<f64>> = held.views.iter().map(|v| v.to_f64()).collect();
    let heldout = |m: &EncoderModel| contrastive_loss(m, &held_views, &held.pair_index, cfg.temperature);

    let source = BatchSource { corpus, registry, spec, global_seed: derive_seed(cfg.seed, &[SEED_TRAIN]) };
    let mut stream = batch_stream(source, cfg.workers);
    let mut log = vec![LogRow { step: 0, train_loss: None, val_loss: Some(heldout(&model)?), esr_db: None, mrsl_db: None }];
    let mut window = 0.0;
    for step in 1..=cfg.iterations {
        let batch = match stream.next() {
            Some(Ok(Batch::Contrastive(b))) => b,
            Some(Ok(Batch::Paired(_))) => return Err(Error::BatchSpec("expected contrastive batches".into())),
            Some(Err(e)) => return Err(e),
            None => return Err(Error::BatchSpec("batch stream ended".into())),
        };
        let views: Vec<Vec<f64>> = batch.views.iter().map(|v| v.to_f64()).collect();
        let (emb, cache) = model.forward_train(&views)?;
        let (loss, d_emb) = nt_xent_grad(&emb, &batch.pair_index, cfg.temperature)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, detail: format!("NT-Xent is {loss}") });
        }
        let mut grads = model.backward(&cache, &d_emb)?.params;
        grads.clip_global_norm(cfg.grad_clip);
        opt.step(&mut model, &grads)?;
        window += loss;
        if step % cfg.log_every == 0 || step == cfg.iterations {
            let span = if step % cfg.log_every == 0 { cfg.log_every } else { step % cfg.log_every };
            let row = LogRow { step, train_loss: Some(window / span as f64), val_loss: Some(heldout(&model)?), esr_db: None, mrsl_db: None };
            log::info!("step {step}: train {:?} held-out {:?}", row.train_loss, row.val_loss);
            log.push(row);
            window = 0.0;
        }
    }
    Ok(TrainOutcome { model, log })
}
