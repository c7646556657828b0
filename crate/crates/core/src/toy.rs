//! Small hand-built devices and a synthetic plucked-string corpus for smoke
//! runs and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model_zoo::DeviceModel;
use crate::signal_io::{AudioClip, Corpus};

/// (drive, asymmetry, forget-gate bias, output gain)
const TOY_TABLE: [(f32, f32, f32, f32); 8] = [
    (0.8, 0.0, -8.0, 1.0),
    (3.0, 0.3, -8.0, 0.8),
    (12.0, 0.0, -8.0, 0.5),
    (2.0, -0.6, -8.0, 0.9),
    (1.5, 0.0, 2.0, 0.4),
    (6.0, 0.4, 1.0, 0.6),
    (25.0, 0.8, -8.0, 0.4),
    (4.0, 0.0, 3.0, 0.3),
];

/// A single-unit LSTM capture acting as a (possibly leaky, asymmetric)
/// saturating drive. Devices `k` and `k + 8` share a character but differ in
/// gain.
pub fn toy_device(k: usize) -> DeviceModel {
    let (drive, asym, forget, gain) = TOY_TABLE[k % TOY_TABLE.len()];
    let scale = 1.0 + (k / TOY_TABLE.len()) as f32 * 0.5;
    let mut m = DeviceModel::zeros(&format!("toy_{k:02}"), 1, 1, false);
    // gate rows: input, forget, cell, output
    m.weight_ih = vec![0.0, 0.0, drive * scale, 0.0];
    m.bias_ih = vec![8.0, forget, asym, 8.0];
    m.head_weight = vec![gain];
    m.head_bias = -gain * asym.tanh().tanh() * 0.5;
    m
}

pub fn toy_devices(n: usize) -> Vec<DeviceModel> {
    (0..n).map(toy_device).collect()
}

/// Decaying harmonic notes at random pitches, onsets and levels.
pub fn plucked_signal(n_samples: usize, sample_rate: u32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let mut out = vec![0.0f64; n_samples];
    let mut t0 = 0usize;
    while t0 < n_samples {
        let f0 = 82.0 * 2f64.powf(rng.random_range(0.0..3.0));
        let amp = rng.random_range(0.05..0.5);
        let decay = rng.random_range(2.0..8.0);
        let len = ((rng.random_range(0.3..1.2)) * sr) as usize;
        let harmonics = rng.random_range(2..7);
        let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        for i in 0..len.min(n_samples - t0) {
            let t = i as f64 / sr;
            let env = (-decay * t).exp() * (1.0 - (-t * 400.0).exp());
            let mut v = 0.0;
            for (h, ph) in phases.iter().enumerate() {
                let f = f0 * (h + 1) as f64;
                if f < sr / 2.0 {
                    v += (std::f64::consts::TAU * f * t + ph).sin() / (h + 1) as f64;
                }
            }
            out[t0 + i] += amp * env * v;
        }
        t0 += ((rng.random_range(0.15..0.6)) * sr) as usize;
    }
    for v in out.iter_mut() {
        *v += rng.random_range(-1e-3..1e-3);
    }
    out.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect()
}

/// `n_files` synthetic clean recordings totalling about `duration_s` seconds.
pub fn toy_corpus(duration_s: f64, n_files: usize, sample_rate: u32, seed: u64) -> Result<Corpus> {
    let n_files = n_files.max(1);
    let per_file = (duration_s * sample_rate as f64 / n_files as f64).round() as usize;
    let files = (0..n_files)
        .map(|i| {
            let clip = AudioClip::new(plucked_signal(per_file, sample_rate, seed.wrapping_add(i as u64)), sample_rate)?;
            Ok((format!("toy_{i:02}.wav"), clip))
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::from_clips(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstm::render_blocked;

    #[test]
    fn toy_devices_are_valid_and_distinct() {
        let x = plucked_signal(4000, 16000, 1);
        let outs: Vec<Vec<f32>> = toy_devices(8)
            .iter()
            .map(|d| {
                d.validate().unwrap();
                render_blocked(d, &x, None, 512).unwrap()
            })
            .collect();
        for i in 0..outs.len() {
            assert!(outs[i].iter().all(|v| v.is_finite()));
            for j in 0..i {
                assert_ne!(outs[i], outs[j]);
            }
        }
    }

    #[test]
    fn corpus_is_deterministic_and_bounded() {
        let a = toy_corpus(2.0, 2, 16000, 7).unwrap();
        let b = toy_corpus(2.0, 2, 16000, 7).unwrap();
        assert_eq!(a.total_samples(), 32000);
        assert_eq!(a.files()[1].clip, b.files()[1].clip);
        assert!(a.files()[0].clip.samples.iter().all(|v| v.abs() <= 1.0));
        assert!(a.files()[0].clip.samples.iter().any(|v| v.abs() > 0.05));
    }
}
