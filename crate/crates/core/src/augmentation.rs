//! Online rendering of training data through registry devices.
//!
//! All randomness is derived from explicit seeds. Batch `k` of a stream is a
//! pure function of `(global_seed, k)`, so any number of render workers
//! produces the same sequence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm;
use crate::model_zoo::DeviceRegistry;
use crate::par;
use crate::signal_io::{self, AudioClip, Corpus, WavEncoding};

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from a base seed and a path of indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(base), |acc, &k| mix64(acc ^ mix64(k)))
}

/// Seed of batch `k` in a stream.
pub fn batch_seed(global_seed: u64, k: u64) -> u64 {
    derive_seed(global_seed, &[0xBA7C_4000, k])
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Where a rendered clip came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub source: usize,
    pub source_name: String,
    pub offset: usize,
    /// Seed of the generator that chose `source` and `offset`.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPair {
    pub clean: AudioClip,
    pub wet: AudioClip,
    pub device_id: usize,
    pub provenance: Provenance,
}

/// Renders `clean` through a registry device at its conditioning value.
pub fn render_device(registry: &DeviceRegistry, device_id: usize, clean: &AudioClip) -> Result<AudioClip> {
    let device = registry.device(device_id)?;
    let model = registry.model_for(device_id)?;
    lstm::render(model, clean, device.conditioning)
}

fn draw_location<R: Rng + ?Sized>(corpus: &Corpus, n: usize, rng: &mut R) -> Result<(u64, usize, usize)> {
    let seed = rng.next_u64();
    let draw = signal_io::sample_clip_samples(corpus, n, &mut rng_from(seed))?;
    Ok((seed, draw.source, draw.offset))
}

/// Renders the pair at a known corpus location.
pub fn replay_pair(
    corpus: &Corpus,
    registry: &DeviceRegistry,
    device_id: usize,
    source: usize,
    offset: usize,
    n: usize,
    seed: u64,
) -> Result<RenderedPair> {
    let clean = corpus.clip_at(source, offset, n)?;
    let wet = render_device(registry, device_id, &clean)?;
    Ok(RenderedPair {
        clean,
        wet,
        device_id,
        provenance: Provenance { source, source_name: corpus.files()[source].name.clone(), offset, seed },
    })
}

/// Samples one clean clip and renders it through `device_id`.
pub fn render_pair<R: Rng + ?Sized>(
    corpus: &Corpus,
    registry: &DeviceRegistry,
    device_id: usize,
    duration_s: f64,
    rng: &mut R,
) -> Result<RenderedPair> {
    registry.device(device_id)?;
    let n = corpus.samples_for(duration_s)?;
    let (seed, source, offset) = draw_location(corpus, n, rng)?;
    replay_pair(corpus, registry, device_id, source, offset, n, seed)
}

/// `2N` views; views `2i` and `2i+1` are the positive pair for one device.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub views: Vec<AudioClip>,
    pub pair_index: Vec<usize>,
    pub device_ids: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl ContrastiveBatch {
    pub fn n_pairs(&self) -> usize {
        self.views.len() / 2
    }
}

const DISTINCT_DRAW_ATTEMPTS: usize = 64;

/// Draws `n_pairs` distinct devices and, for each, two different clean clips
/// rendered through it.
pub fn make_contrastive_batch<R: Rng + ?Sized>(
    corpus: &Corpus,
    registry: &DeviceRegistry,
    n_pairs: usize,
    duration_s: f64,
    rng: &mut R,
) -> Result<ContrastiveBatch> {
    let m = registry.len();
    if n_pairs == 0 || n_pairs > m {
        return Err(Error::BatchSpec(format!("n_pairs must be in 1..={m}, got {n_pairs}")));
    }
    let n = corpus.samples_for(duration_s)?;
    let devices = rand::seq::index::sample(rng, m, n_pairs).into_vec();
    let mut plan = Vec::with_capacity(2 * n_pairs);
    for &d in &devices {
        let first = draw_location(corpus, n, rng)?;
        let mut second = draw_location(corpus, n, rng)?;
        let mut attempts = 1;
        while (second.1, second.2) == (first.1, first.2) {
            if attempts == DISTINCT_DRAW_ATTEMPTS {
                return Err(Error::Corpus("corpus too small to draw two different clips".into()));
            }
            second = draw_location(corpus, n, rng)?;
            attempts += 1;
        }
        plan.push((d, first));
        plan.push((d, second));
    }
    let rendered = par::map(&plan, |&(d, (seed, source, offset))| replay_pair(corpus, registry, d, source, offset, n, seed));
    let mut batch = ContrastiveBatch {
        views: Vec::with_capacity(2 * n_pairs),
        pair_index: (0..2 * n_pairs).map(|i| i ^ 1).collect(),
        device_ids: Vec::with_capacity(2 * n_pairs),
        provenance: Vec::with_capacity(2 * n_pairs),
    };
    for r in rendered {
        let p = r?;
        batch.views.push(p.wet);
        batch.device_ids.push(p.device_id);
        batch.provenance.push(p.provenance);
    }
    Ok(batch)
}

/// `batch_size` clean/wet pairs, each through a uniformly drawn device.
pub fn make_paired_batch<R: Rng + ?Sized>(
    corpus: &Corpus,
    registry: &DeviceRegistry,
    batch_size: usize,
    duration_s: f64,
    rng: &mut R,
) -> Result<Vec<RenderedPair>> {
    if batch_size == 0 || registry.is_empty() {
        return Err(Error::BatchSpec("paired batches need a positive size and a non-empty registry".into()));
    }
    let n = corpus.samples_for(duration_s)?;
    let mut plan = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let d = rng.random_range(0..registry.len());
        plan.push((d, draw_location(corpus, n, rng)?));
    }
    par::map(&plan, |&(d, (seed, source, offset))| replay_pair(corpus, registry, d, source, offset, n, seed))
        .into_iter()
        .collect()
}

/// One row of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub clip_path: String,
    pub source_path: String,
    pub source_offset_samples: usize,
    pub duration_samples: usize,
    pub device_id: usize,
    pub model_name: String,
    pub conditioning_value: Option<f32>,
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

/// Renders `clips_per_device` clips for each of `device_ids` into `out_dir`
/// as float32 WAV, and writes `manifest.csv` alongside.
///
/// Clip `j` of device `d` uses seed `derive_seed(seed, [d, j])`, so the output
/// depends only on the arguments. On failure every file written so far is
/// removed.
pub fn make_supervised_dataset(
    corpus: &Corpus,
    registry: &DeviceRegistry,
    device_ids: &[usize],
    clips_per_device: usize,
    duration_s: f64,
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<ManifestRecord>> {
    for &d in device_ids {
        registry.device(d)?;
    }
    let n = corpus.samples_for(duration_s)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let total = device_ids.len() * clips_per_device;
    let file_name = |i: usize| {
        let d = device_ids[i / clips_per_device];
        format!("dev{d:04}_clip{:05}.wav", i % clips_per_device)
    };
    let results = par::map_range(total, |i| -> Result<ManifestRecord> {
        let d = device_ids[i / clips_per_device];
        let j = i % clips_per_device;
        let clip_seed = derive_seed(seed, &[d as u64, j as u64]);
        let pair = render_pair(corpus, registry, d, duration_s, &mut rng_from(clip_seed))?;
        let name = file_name(i);
        signal_io::write_wav(&pair.wet, &out_dir.join(&name), WavEncoding::Float32)?;
        Ok(ManifestRecord {
            clip_path: name,
            source_path: pair.provenance.source_name,
            source_offset_samples: pair.provenance.offset,
            duration_samples: n,
            device_id: d,
            model_name: registry.model_for(d)?.name.clone(),
            conditioning_value: registry.device(d)?.conditioning,
            seed: clip_seed,
        })
    });
    let cleanup = || {
        for i in 0..total {
            let _ = fs::remove_file(out_dir.join(file_name(i)));
        }
        let _ = fs::remove_file(out_dir.join(MANIFEST_FILE));
    };
    let records = match results.into_iter().collect::<Result<Vec<_>>>() {
        Ok(r) => r,
        Err(e) => {
            cleanup();
            return Err(e);
        }
    };
    if let Err(e) = write_manifest(&records, &out_dir.join(MANIFEST_FILE)) {
        cleanup();
        return Err(e);
    }
    Ok(records)
}

/// Re-renders the wet clip of a manifest record from its recorded source.
pub fn replay_record(corpus: &Corpus, registry: &DeviceRegistry, record: &ManifestRecord) -> Result<AudioClip> {
    let source = corpus
        .source_index(&record.source_path)
        .ok_or_else(|| Error::Corpus(format!("{} is not in the corpus", record.source_path)))?;
    let pair = replay_pair(
        corpus,
        registry,
        record.device_id,
        source,
        record.source_offset_samples,
        record.duration_samples,
        record.seed,
    )?;
    Ok(pair.wet)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchKind {
    Contrastive { n_pairs: usize },
    Paired { batch_size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSpec {
    pub kind: BatchKind,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Contrastive(ContrastiveBatch),
    Paired(Vec<RenderedPair>),
}

/// Everything needed to render batch `k` of a stream.
#[derive(Debug, Clone)]
pub struct BatchSource {
    pub corpus: Arc<Corpus>,
    pub registry: Arc<DeviceRegistry>,
    pub spec: BatchSpec,
    pub global_seed: u64,
}

impl BatchSource {
    pub fn batch(&self, k: u64) -> Result<Batch> {
        let mut rng = rng_from(batch_seed(self.global_seed, k));
        match self.spec.kind {
            BatchKind::Contrastive { n_pairs } => {
                make_contrastive_batch(&self.corpus, &self.registry, n_pairs, self.spec.duration_s, &mut rng)
                    .map(Batch::Contrastive)
            }
            BatchKind::Paired { batch_size } => {
                make_paired_batch(&self.corpus, &self.registry, batch_size, self.spec.duration_s, &mut rng)
                    .map(Batch::Paired)
            }
        }
    }
}

/// Ordered batches `0, 1, 2, ...` rendered ahead by a worker pool into a
/// bounded queue. Output is identical for every worker count.
pub struct BatchStream {
    source: Arc<BatchSource>,
    next: u64,
    pending: BTreeMap<u64, Result<Batch>>,
    rx: Option<Receiver<(u64, Result<Batch>)>>,
    stop: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
}

/// Starts a stream with `workers` render threads. One worker (or a build
/// without the `parallel` feature) renders inline on the caller's thread.
pub fn batch_stream(source: BatchSource, workers: usize) -> BatchStream {
    let source = Arc::new(source);
    let stop = Arc::new(AtomicBool::new(false));
    let mut stream = BatchStream { source, next: 0, pending: BTreeMap::new(), rx: None, stop, handles: Vec::new() };
    if workers > 1 && par::is_parallel() {
        let (tx, rx) = sync_channel(2 * workers);
        let counter = Arc::new(AtomicU64::new(0));
        for _ in 0..workers {
            let (tx, counter, stop, source) = (tx.clone(), counter.clone(), stream.stop.clone(), stream.source.clone());
            stream.handles.push(std::thread::spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let k = counter.fetch_add(1, Ordering::Relaxed);
                let batch = source.batch(k);
                if tx.send((k, batch)).is_err() {
                    break;
                }
            }));
        }
        stream.rx = Some(rx);
    }
    stream
}

impl BatchStream {
    pub fn source(&self) -> &BatchSource {
        &self.source
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let k = self.next;
        self.next += 1;
        let Some(rx) = &self.rx else {
            return Some(self.source.batch(k));
        };
        loop {
            if let Some(b) = self.pending.remove(&k) {
                return Some(b);
            }
            match rx.recv() {
                Ok((idx, b)) => {
                    self.pending.insert(idx, b);
                }
                Err(_) => return None,
            }
        }
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        // workers blocked on a full queue see the disconnect and exit
        drop(self.rx.take());
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

/// Directory helper used by the dataset writer and the CLI.
pub fn clip_path(out_dir: &Path, record: &ManifestRecord) -> PathBuf {
    out_dir.join(&record.clip_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_zoo::DeviceModel;

    fn corpus() -> Corpus {
        let files = (0..3)
            .map(|f| {
                let samples = (0..3000).map(|i| ((i * (f + 3)) as f32 * 0.01).sin() * 0.5).collect();
                (format!("c{f}"), AudioClip::new(samples, 1000).unwrap())
            })
            .collect();
        Corpus::from_clips(files).unwrap()
    }

    fn registry() -> DeviceRegistry {
        let mut models = vec![DeviceModel::zeros("identity", 1, 2, true)];
        for k in 0..3 {
            let mut m = DeviceModel::zeros(&format!("dist{k}"), 1, 1, false);
            m.weight_ih = vec![1.0, -4.0, 2.0 + k as f32, 3.0];
            m.head_weight = vec![1.0];
            models.push(m);
        }
        let mut c = DeviceModel::zeros("cond", 2, 1, false);
        c.weight_ih = vec![0.5, 0.5, -3.0, 0.0, 2.0, 1.0, 3.0, 0.0];
        c.head_weight = vec![1.0];
        models.push(c);
        DeviceRegistry::from_models(models, 5).unwrap()
    }

    #[test]
    fn identity_device_passes_clean_through() {
        let (c, r) = (corpus(), registry());
        let id = r.devices().iter().position(|d| r.model_for(d.device_id).unwrap().name == "identity").unwrap();
        let p = render_pair(&c, &r, id, 0.5, &mut rng_from(3)).unwrap();
        assert_eq!(p.clean, p.wet);
    }

    #[test]
    fn pair_is_deterministic_and_replayable() {
        let (c, r) = (corpus(), registry());
        let a = render_pair(&c, &r, 2, 0.5, &mut rng_from(5)).unwrap();
        let b = render_pair(&c, &r, 2, 0.5, &mut rng_from(5)).unwrap();
        assert_eq!(a, b);
        let pv = &a.provenance;
        let replay = replay_pair(&c, &r, 2, pv.source, pv.offset, 500, pv.seed).unwrap();
        assert_eq!(replay.wet.samples, a.wet.samples);
        // the recorded seed alone reproduces the location
        let again = signal_io::sample_clip_samples(&c, 500, &mut rng_from(pv.seed)).unwrap();
        assert_eq!((again.source, again.offset), (pv.source, pv.offset));
    }

    #[test]
    fn contrastive_batch_structure() {
        let (c, r) = (corpus(), registry());
        let b = make_contrastive_batch(&c, &r, r.len(), 0.25, &mut rng_from(1)).unwrap();
        assert_eq!(b.views.len(), 2 * r.len());
        let mut ids: Vec<_> = b.device_ids.iter().step_by(2).copied().collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), r.len());
        for i in 0..b.views.len() {
            let p = b.pair_index[i];
            assert_eq!(b.pair_index[p], i);
            assert_ne!(p, i);
            assert_eq!(b.device_ids[i], b.device_ids[p]);
            let (x, y) = (&b.provenance[i], &b.provenance[p]);
            assert_ne!((x.source, x.offset), (y.source, y.offset));
        }
    }

    #[test]
    fn single_pair_batch() {
        let (c, r) = (corpus(), registry());
        let b = make_contrastive_batch(&c, &r, 1, 0.25, &mut rng_from(2)).unwrap();
        assert_eq!(b.views.len(), 2);
        assert_eq!(b.device_ids[0], b.device_ids[1]);
        assert_ne!(b.provenance[0], b.provenance[1]);
    }

    #[test]
    fn too_many_pairs() {
        let (c, r) = (corpus(), registry());
        assert!(matches!(make_contrastive_batch(&c, &r, r.len() + 1, 0.25, &mut rng_from(0)), Err(Error::BatchSpec(_))));
    }

    #[test]
    fn dataset_manifest_and_replay() {
        let (c, r) = (corpus(), registry());
        let dir = tempfile::tempdir().unwrap();
        let recs = make_supervised_dataset(&c, &r, &[1, 5], 3, 0.2, dir.path(), 9).unwrap();
        assert_eq!(recs.len(), 6);
        let wavs = fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "wav").count();
        assert_eq!(wavs, 6);
        assert_eq!(read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap(), recs);
        for rec in &recs {
            let on_disk = signal_io::read_wav(&clip_path(dir.path(), rec)).unwrap();
            assert_eq!(replay_record(&c, &r, rec).unwrap().samples, on_disk.samples);
        }
        assert_eq!(recs[3].conditioning_value, r.device(5).unwrap().conditioning);
    }

    #[test]
    fn dataset_bad_device_leaves_nothing() {
        let (c, r) = (corpus(), registry());
        let dir = tempfile::tempdir().unwrap();
        assert!(make_supervised_dataset(&c, &r, &[0, 999], 2, 0.2, dir.path(), 1).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    fn source(seed: u64) -> BatchSource {
        BatchSource {
            corpus: Arc::new(corpus()),
            registry: Arc::new(registry()),
            spec: BatchSpec { kind: BatchKind::Contrastive { n_pairs: 4 }, duration_s: 0.2 },
            global_seed: seed,
        }
    }

    #[test]
    fn stream_independent_of_workers() {
        let one: Vec<_> = batch_stream(source(7), 1).take(10).map(|b| b.unwrap()).collect();
        for w in [2, 4] {
            let many: Vec<_> = batch_stream(source(7), w).take(10).map(|b| b.unwrap()).collect();
            assert_eq!(one, many);
        }
    }

    #[test]
    fn stream_seeds_and_indices() {
        let s = source(7);
        assert_eq!(s.batch(7).unwrap(), s.batch(7).unwrap());
        let a = batch_stream(source(7), 1).next().unwrap().unwrap();
        let b = batch_stream(source(8), 1).next().unwrap().unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_ne!(batch_seed(0, 0), batch_seed(0, 1));
    }
}
