use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ampzoo::augmentation::{self, derive_seed, render_pair, rng_from, MANIFEST_FILE};
use ampzoo::checkpoint;
use ampzoo::encoder::{write_embeddings_csv, EncoderModel};
use ampzoo::gradcheck::{grad_check, CheckKind};
use ampzoo::lstm;
use ampzoo::metrics::{device_report, to_db, LossParts, LossReport, QuantileEntry};
use ampzoo::model_zoo::{build_registry, load_model_file, lstm_param_count, save_model_file, DeviceRegistry};
use ampzoo::par;
use ampzoo::signal_io::{read_wav, sample_clip, write_wav, AudioClip, Corpus, WavEncoding};
use ampzoo::tcn::TcnModel;
use ampzoo::toy;
use ampzoo::train::{self, write_log_csv, Pair};
use serde::Serialize;

use crate::config::{self, AugmentConfig, DataConfig, EncoderRunConfig, EnrollRunConfig, EvalConfig, FoundationConfig};
use crate::{CliError, RunArgs};

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn usage_if(r: ampzoo::Result<()>) -> Result<()> {
    r.map_err(|e| usage(e.to_string()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Corpus and registry for a run; the registry is narrowed to `devices` when given.
fn load_data(data: &DataConfig) -> Result<(Arc<Corpus>, Arc<DeviceRegistry>)> {
    let registry = build_registry(&data.models_dir, data.cond_points)?;
    let registry = match &data.devices {
        Some(ids) => registry.subset(ids)?,
        None => registry,
    };
    let corpus = Corpus::load_dir(&data.corpus_dir)?;
    Ok((Arc::new(corpus), Arc::new(registry)))
}

pub fn list(models_dir: &Path, cond_points: usize) -> Result<()> {
    let registry = build_registry(models_dir, cond_points).map_err(|e| usage(e.to_string()))?;
    for (path, why) in registry.skipped() {
        log::warn!("skipped {}: {why}", path.display());
    }
    println!("device_id\tmodel\tconditioning\tparams");
    for d in registry.devices() {
        let m = registry.model_for(d.device_id)?;
        let cond = d.conditioning.map_or_else(|| "-".to_string(), |c| c.to_string());
        println!("{}\t{}\t{}\t{}", d.device_id, m.name, cond, lstm_param_count(m));
    }
    Ok(())
}

pub fn render(model: &Path, input: &Path, out: &Path, cond: Option<f32>, block: usize, encoding: &str) -> Result<()> {
    let encoding: WavEncoding = encoding.parse().map_err(|e: ampzoo::Error| usage(e.to_string()))?;
    if block == 0 {
        return Err(usage("--block must be positive"));
    }
    let capture = load_model_file(model)?;
    match (capture.is_conditioned(), cond) {
        (false, Some(_)) => return Err(usage(format!("{} takes no conditioning input; drop --cond", capture.name))),
        (true, None) => return Err(usage(format!("{} is conditioned; pass --cond", capture.name))),
        _ => {}
    }
    let clip = read_wav(input)?;
    let wet = lstm::render_blocked(&capture, &clip.samples, cond, block)?;
    write_wav(&AudioClip::new(wet, clip.sample_rate)?, out, encoding)?;
    Ok(())
}

fn apply_overrides(out_dir: &mut std::path::PathBuf, run: &RunArgs) {
    if let Some(o) = &run.out_dir {
        *out_dir = std::path::absolute(o).unwrap_or_else(|_| o.clone());
    }
}

fn load_augment(run: &RunArgs) -> Result<AugmentConfig> {
    let mut cfg: AugmentConfig = config::load(&run.config)?;
    apply_overrides(&mut cfg.out_dir, run);
    Ok(cfg)
}

pub fn augment(run: &RunArgs, workers: Option<usize>) -> Result<()> {
    let mut cfg = load_augment(run)?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if cfg.clips_per_device == 0 || cfg.workers == 0 || !(cfg.clip_seconds > 0.0) {
        return Err(usage("clips_per_device, workers and clip_seconds must be positive"));
    }
    let registry = build_registry(&cfg.data.models_dir, cfg.data.cond_points)?;
    let corpus = Corpus::load_dir(&cfg.data.corpus_dir)?;
    let ids: Vec<usize> = cfg.data.devices.clone().unwrap_or_else(|| (0..registry.len()).collect());
    config::write_resolved(&cfg, &cfg.out_dir)?;
    let records = par::with_workers(cfg.workers, || {
        augmentation::make_supervised_dataset(&corpus, &registry, &ids, cfg.clips_per_device, cfg.clip_seconds, &cfg.out_dir, cfg.seed)
    })?;
    println!("wrote {} clips to {}", records.len(), cfg.out_dir.display());
    Ok(())
}

pub fn augment_replay(run: &RunArgs, name: &str, out: &Path) -> Result<()> {
    let cfg = load_augment(run)?;
    let records = augmentation::read_manifest(&cfg.out_dir.join(MANIFEST_FILE))?;
    let record = records
        .iter()
        .find(|r| r.clip_path == name)
        .ok_or_else(|| usage(format!("no clip named {name} in the manifest")))?;
    let registry = build_registry(&cfg.data.models_dir, cfg.data.cond_points)?;
    let corpus = Corpus::load_dir(&cfg.data.corpus_dir)?;
    let clip = augmentation::replay_record(&corpus, &registry, record)?;
    write_wav(&clip, out, WavEncoding::Float32)?;
    Ok(())
}

pub fn train_foundation(run: &RunArgs, workers: Option<usize>) -> Result<()> {
    let mut cfg: FoundationConfig = config::load(&run.config)?;
    apply_overrides(&mut cfg.out_dir, run);
    if let Some(w) = workers {
        cfg.train.workers = w;
    }
    usage_if(cfg.train.validate())?;
    usage_if(cfg.model.config(1).validate())?;
    let (corpus, registry) = load_data(&cfg.data)?;
    config::write_resolved(&cfg, &cfg.out_dir)?;
    let outcome = par::with_workers(cfg.train.workers, || train::train_foundation(corpus, registry.clone(), &cfg.model, &cfg.train))?;
    checkpoint::save(&outcome.model, &cfg.out_dir.join("model.ckpt"))?;
    write_log_csv(&outcome.log, &cfg.out_dir.join("loss_log.csv"))?;
    let devices = cfg.out_dir.join("devices.csv");
    fs::write(&devices, registry.manifest_csv()).map_err(|e| CliError::io(&devices, e))?;
    if let Some(last) = outcome.log.last() {
        println!("step {}: train {:?} val {:?}", last.step, last.train_loss, last.val_loss);
    }
    Ok(())
}

pub fn train_encoder(run: &RunArgs, workers: Option<usize>) -> Result<()> {
    let mut cfg: EncoderRunConfig = config::load(&run.config)?;
    apply_overrides(&mut cfg.out_dir, run);
    if let Some(w) = workers {
        cfg.train.workers = w;
    }
    usage_if(cfg.train.validate())?;
    usage_if(cfg.encoder.validate())?;
    let (corpus, registry) = load_data(&cfg.data)?;
    config::write_resolved(&cfg, &cfg.out_dir)?;
    let outcome = par::with_workers(cfg.train.workers, || train::train_encoder(corpus, registry, &cfg.encoder, &cfg.train))?;
    checkpoint::save(&outcome.model, &cfg.out_dir.join("encoder.ckpt"))?;
    write_log_csv(&outcome.log, &cfg.out_dir.join("loss_log.csv"))?;
    if let Some(last) = outcome.log.last() {
        println!("step {}: train {:?} held-out {:?}", last.step, last.train_loss, last.val_loss);
    }
    Ok(())
}

#[derive(Serialize)]
struct LossSummary {
    esr: f64,
    mrsl: f64,
    total: f64,
    esr_db: f64,
    mrsl_db: f64,
    total_db: f64,
}

impl LossSummary {
    fn new(p: LossParts) -> Result<Self> {
        Ok(LossSummary {
            esr: p.esr,
            mrsl: p.mrsl,
            total: p.total(),
            esr_db: to_db(p.esr)?,
            mrsl_db: to_db(p.mrsl)?,
            total_db: to_db(p.total())?,
        })
    }
}

#[derive(Serialize)]
struct EnrollSummary {
    device_index: usize,
    initial_index: usize,
    total_pairs: usize,
    train_pairs: usize,
    data_fraction: f64,
    best_step: usize,
    initial_test: LossSummary,
    test: LossSummary,
}

pub fn enroll(run: &RunArgs, fraction: Option<f64>) -> Result<()> {
    let mut cfg: EnrollRunConfig = config::load(&run.config)?;
    apply_overrides(&mut cfg.out_dir, run);
    if let Some(f) = fraction {
        cfg.enroll.data_fraction = f;
    }
    usage_if(cfg.enroll.validate())?;
    let src = &cfg.source;
    if src.n_pairs < 3 || !(src.clip_seconds > 0.0) {
        return Err(usage("source needs n_pairs >= 3 and a positive clip_seconds"));
    }
    let model: TcnModel = checkpoint::load(&cfg.checkpoint)?;
    let capture = load_model_file(&src.model_file)?;
    if capture.is_conditioned() != src.cond.is_some() {
        return Err(usage(format!("{}: cond must be set exactly when the capture is conditioned", capture.name)));
    }
    let corpus = Corpus::load_dir(&src.corpus_dir)?;
    config::write_resolved(&cfg, &cfg.out_dir)?;
    let pairs = par::try_map_range(src.n_pairs, |j| -> ampzoo::Result<Pair> {
        let draw = sample_clip(&corpus, src.clip_seconds, &mut rng_from(derive_seed(src.seed, &[j as u64])))?;
        let wet = lstm::render(&capture, &draw.clip, src.cond)?;
        Ok((draw.clip.to_f64(), wet.to_f64()))
    })?;
    let outcome = train::enroll_device(&model, &pairs, &cfg.enroll)?;
    log::info!("enrolling on {} of {} training pairs", outcome.train_pairs, pairs.len());
    let enrolled = model.with_enrolled(&outcome.embedding)?;
    checkpoint::save(&enrolled, &cfg.out_dir.join("enrolled.ckpt"))?;
    write_log_csv(&outcome.log, &cfg.out_dir.join("loss_log.csv"))?;
    write_embeddings_csv(&cfg.out_dir.join("embedding.csv"), &[(capture.name.clone(), outcome.embedding.clone())])?;
    let summary = EnrollSummary {
        device_index: model.config.n_devices,
        initial_index: outcome.initial_index,
        total_pairs: pairs.len(),
        train_pairs: outcome.train_pairs,
        data_fraction: cfg.enroll.data_fraction,
        best_step: outcome.best_step,
        initial_test: LossSummary::new(outcome.initial_test)?,
        test: LossSummary::new(outcome.test)?,
    };
    write_json(&summary, &cfg.out_dir.join("summary.json"))?;
    println!(
        "train pairs {} of {}; start row {}; test {:.2} dB (from {:.2} dB)",
        summary.train_pairs, summary.total_pairs, summary.initial_index, summary.test.total_db, summary.initial_test.total_db
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    report: LossReport,
    quantiles: Vec<QuantileEntry>,
}

pub fn eval(run: &RunArgs) -> Result<()> {
    let mut cfg: EvalConfig = config::load(&run.config)?;
    apply_overrides(&mut cfg.out_dir, run);
    if cfg.clips_per_device == 0 || !(cfg.clip_seconds > 0.0) {
        return Err(usage("clips_per_device and clip_seconds must be positive"));
    }
    let model: TcnModel = checkpoint::load(&cfg.checkpoint)?;
    let (corpus, registry) = load_data(&cfg.data)?;
    if registry.len() != model.config.n_devices {
        return Err(usage(format!(
            "checkpoint has {} device embeddings but the data selects {} devices",
            model.config.n_devices,
            registry.len()
        )));
    }
    config::write_resolved(&cfg, &cfg.out_dir)?;
    let n = registry.len() * cfg.clips_per_device;
    let items = par::try_map_range(n, |i| -> ampzoo::Result<(usize, Vec<f64>, Vec<f64>)> {
        let (d, j) = (i / cfg.clips_per_device, i % cfg.clips_per_device);
        let mut rng = rng_from(derive_seed(cfg.seed, &[d as u64, j as u64]));
        let pair = render_pair(&corpus, &registry, d, cfg.clip_seconds, &mut rng)?;
        Ok((d, pair.clean.to_f64(), pair.wet.to_f64()))
    })?;
    let per_device: BTreeMap<usize, LossParts> = train::evaluate_tcn(&model, &items)?;
    let quantiles = device_report(&per_device)?;
    let report = LossReport::from_per_device(per_device)?;
    let csv_path = cfg.out_dir.join("report.csv");
    fs::write(&csv_path, report.to_csv()?).map_err(|e| CliError::io(&csv_path, e))?;
    println!("ESR {:.2} dB, MRSL {:.2} dB over {} devices", report.esr_db, report.mrsl_db, report.per_device.len());
    for q in &quantiles {
        println!("{:>6}: device {} ESR {:.2} dB MRSL {:.2} dB", q.label, q.device_id, q.esr_db, q.mrsl_db);
    }
    write_json(&EvalReport { report, quantiles }, &cfg.out_dir.join("report.json"))
}

pub fn embed(checkpoint_path: &Path, input: &Path, out: &Path) -> Result<()> {
    let model: EncoderModel = checkpoint::load(checkpoint_path)?;
    let mut paths: Vec<_> = fs::read_dir(input)
        .map_err(|e| CliError::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!("no WAV files in {}", input.display())));
    }
    let rows = par::try_map_range(paths.len(), |i| -> ampzoo::Result<(String, Vec<f64>)> {
        let clip = read_wav(&paths[i])?;
        let e = model.embed(&[clip.to_f64()])?.remove(0);
        let id = paths[i].file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok((id, e))
    })?;
    write_embeddings_csv(out, &rows)?;
    Ok(())
}

pub fn gradcheck(kind: &str, seeds: u64, eps: f64) -> Result<()> {
    let kinds: Vec<CheckKind> = if kind == "all" {
        CheckKind::ALL.to_vec()
    } else {
        vec![kind.parse().map_err(|e: ampzoo::Error| usage(e.to_string()))?]
    };
    if seeds == 0 || !(eps > 0.0) {
        return Err(usage("--seeds and --eps must be positive"));
    }
    let mut failed = Vec::new();
    println!("check\tworst_rel_error\tat\ttolerance\tchecked\tskipped\tresult");
    for k in kinds {
        let mut worst = (f64::NEG_INFINITY, String::new(), 0u64);
        let (mut checked, mut skipped) = (0, 0);
        for seed in 0..seeds {
            let r = grad_check(k, seed, eps)?;
            checked += r.checked;
            skipped += r.skipped;
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, r.worst, seed);
            }
        }
        let ok = worst.0 < k.tolerance();
        println!(
            "{k}\t{:.3e}\t{} (seed {})\t{:.0e}\t{checked}\t{skipped}\t{}",
            worst.0,
            worst.1,
            worst.2,
            k.tolerance(),
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(k.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn make_toy(out: &Path, devices: usize, seconds: f64, files: usize, sample_rate: u32, seed: u64) -> Result<()> {
    if devices == 0 || files == 0 || !(seconds > 0.0) {
        return Err(usage("--devices, --files and --seconds must be positive"));
    }
    let models_dir = out.join("models");
    let corpus_dir = out.join("corpus");
    for d in [&models_dir, &corpus_dir] {
        fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
    }
    for m in toy::toy_devices(devices) {
        save_model_file(&m, &models_dir.join(format!("{}.json", m.name)))?;
    }
    let corpus = toy::toy_corpus(seconds, files, sample_rate, seed)?;
    for f in corpus.files() {
        write_wav(&f.clip, &corpus_dir.join(&f.name), WavEncoding::Float32)?;
    }
    println!("wrote {devices} captures to {} and {files} clean files to {}", models_dir.display(), corpus_dir.display());
    Ok(())
}
