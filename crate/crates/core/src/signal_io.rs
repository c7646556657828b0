//! WAV I/O and random clip sampling from a clean-audio corpus.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};

/// Mono audio buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Value("sample rate must be positive".into()));
        }
        if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
            return Err(Error::Value(format!("non-finite sample {bad}")));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Pcm24,
    Float32,
}

impl std::str::FromStr for WavEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pcm16" | "i16" => Ok(WavEncoding::Pcm16),
            "pcm24" | "i24" => Ok(WavEncoding::Pcm24),
            "float32" | "f32" => Ok(WavEncoding::Float32),
            other => Err(Error::Format(format!("unknown encoding {other}"))),
        }
    }
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        // hound reports short reads as `Other` with a fixed message
        hound::Error::IoError(io)
            if io.kind() == std::io::ErrorKind::UnexpectedEof || io.to_string().contains("enough bytes") =>
        {
            Error::Parse(format!("{}: truncated file", path.display()))
        }
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::Unsupported => Error::Format(format!("{}: unsupported WAV encoding", path.display())),
        other => Error::Parse(format!("{}: {other}", path.display())),
    }
}

/// Reads PCM16, PCM24 or float32 WAV; channels are averaged to mono and
/// integer codes are scaled by `1 / 2^(bits-1)`.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (hound::SampleFormat::Int, bits @ (16 | 24)) => {
            let scale = 1.0 / (1u32 << (bits - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(path, e))?
        }
        (fmt, bits) => {
            return Err(Error::Format(format!("{}: {bits}-bit {fmt:?} not supported", path.display())))
        }
    };
    if interleaved.len() % channels != 0 {
        return Err(Error::Parse(format!("{}: truncated final frame", path.display())));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes a mono WAV. Integer encodings hard-clip samples outside `[-1, 1]`;
/// the number of clipped samples is returned.
pub fn write_wav(clip: &AudioClip, path: &Path, encoding: WavEncoding) -> Result<usize> {
    if clip.is_empty() {
        return Err(Error::EmptyClip);
    }
    let (bits, fmt) = match encoding {
        WavEncoding::Pcm16 => (16, hound::SampleFormat::Int),
        WavEncoding::Pcm24 => (24, hound::SampleFormat::Int),
        WavEncoding::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec { channels: 1, sample_rate: clip.sample_rate, bits_per_sample: bits, sample_format: fmt };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    let mut clipped = 0;
    match encoding {
        WavEncoding::Float32 => {
            for &s in &clip.samples {
                w.write_sample(s).map_err(|e| wav_err(path, e))?;
            }
        }
        WavEncoding::Pcm16 | WavEncoding::Pcm24 => {
            let full = (1i64 << (bits - 1)) as f64;
            let (lo, hi) = (-full as i64, full as i64 - 1);
            for &s in &clip.samples {
                if s.abs() > 1.0 {
                    clipped += 1;
                }
                let code = ((s as f64) * full).round() as i64;
                w.write_sample(code.clamp(lo, hi) as i32).map_err(|e| wav_err(path, e))?;
            }
        }
    }
    w.finalize().map_err(|e| wav_err(path, e))?;
    if clipped > 0 {
        log::warn!("{}: {clipped} samples clipped", path.display());
    }
    Ok(clipped)
}

/// One corpus file, loaded in memory.
#[derive(Debug, Clone)]
pub struct CorpusFile {
    /// Stable identifier recorded in provenance (the path for on-disk corpora).
    pub name: String,
    pub clip: AudioClip,
}

/// Clean-audio corpus sharing one sample rate.
#[derive(Debug, Clone)]
pub struct Corpus {
    files: Vec<CorpusFile>,
    sample_rate: u32,
}

/// A sampled clip and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipDraw {
    pub clip: AudioClip,
    pub source: usize,
    pub offset: usize,
}

impl Corpus {
    pub fn from_clips(files: Vec<(String, AudioClip)>) -> Result<Self> {
        let first = files.first().ok_or_else(|| Error::Corpus("corpus has no files".into()))?;
        let sample_rate = first.1.sample_rate;
        if let Some((name, c)) = files.iter().find(|(_, c)| c.sample_rate != sample_rate) {
            return Err(Error::Corpus(format!(
                "{name} has sample rate {} but the corpus uses {sample_rate}",
                c.sample_rate
            )));
        }
        Ok(Corpus { files: files.into_iter().map(|(name, clip)| CorpusFile { name, clip }).collect(), sample_rate })
    }

    /// Loads every `*.wav` under `dir` (non-recursive), sorted by path.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
            .collect();
        paths.sort();
        let files = paths
            .iter()
            .map(|p| Ok((p.display().to_string(), read_wav(p)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_clips(files)
    }

    pub fn files(&self) -> &[CorpusFile] {
        &self.files
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn total_samples(&self) -> usize {
        self.files.iter().map(|f| f.clip.len()).sum()
    }

    pub fn source_index(&self, name: &str) -> Option<usize> {
        self.files.iter().position(|f| f.name == name)
    }

    pub fn samples_for(&self, duration_s: f64) -> Result<usize> {
        let n = (duration_s * self.sample_rate as f64).round();
        if !(n >= 1.0) {
            return Err(Error::Value(format!("clip duration {duration_s}s is shorter than one sample")));
        }
        Ok(n as usize)
    }

    /// Number of valid start offsets for an `n`-sample clip in each file.
    pub fn eligible_offsets(&self, n: usize) -> Vec<usize> {
        self.files.iter().map(|f| (f.clip.len() + 1).saturating_sub(n)).collect()
    }

    /// Cuts `n` samples from `source` at `offset`.
    pub fn clip_at(&self, source: usize, offset: usize, n: usize) -> Result<AudioClip> {
        let f = self
            .files
            .get(source)
            .ok_or_else(|| Error::Corpus(format!("no corpus file with index {source}")))?;
        if offset + n > f.clip.len() {
            return Err(Error::Corpus(format!("{}: [{offset}, {}) is out of range", f.name, offset + n)));
        }
        Ok(AudioClip { samples: f.clip.samples[offset..offset + n].to_vec(), sample_rate: self.sample_rate })
    }
}

/// Draws a clip uniformly over all valid (file, offset) positions, so longer
/// files are picked proportionally more often.
pub fn sample_clip<R: Rng + ?Sized>(corpus: &Corpus, duration_s: f64, rng: &mut R) -> Result<ClipDraw> {
    let n = corpus.samples_for(duration_s)?;
    sample_clip_samples(corpus, n, rng)
}

pub fn sample_clip_samples<R: Rng + ?Sized>(corpus: &Corpus, n: usize, rng: &mut R) -> Result<ClipDraw> {
    let eligible = corpus.eligible_offsets(n);
    let total: u64 = eligible.iter().map(|&e| e as u64).sum();
    if total == 0 {
        return Err(Error::Corpus(format!("no corpus file holds {n} samples")));
    }
    let mut u = rng.random_range(0..total);
    for (source, &count) in eligible.iter().enumerate() {
        let count = count as u64;
        if u < count {
            let offset = u as usize;
            return Ok(ClipDraw { clip: corpus.clip_at(source, offset, n)?, source, offset });
        }
        u -= count;
    }
    unreachable!("draw below total always lands in a file")
}
