//! Finite-difference verification of the analytic gradients.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{nt_xent_grad, softmax_cross_entropy, EncoderConfig, EncoderModel, Mlp};
use crate::error::{Error, Result};
use crate::metrics::{esr_grad, CombinedLoss, Mrsl, StftConfig};
use crate::tcn::{TcnConfig, TcnModel};
use crate::tensor::{GradSet, Leaves, Parameterized, Tensor};

/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    /// Coordinates whose perturbation crossed an activation kink.
    pub skipped: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against fourth-order central differences of `f` for
/// every parameter coordinate. `f` returns the loss and an activation sign
/// pattern; coordinates whose perturbation flips the pattern are skipped.
pub fn check_model<M, F>(model: &M, analytic: &GradSet, eps: f64, f: F) -> Result<GradCheckReport>
where
    M: Parameterized + Clone,
    F: Fn(&M) -> Result<(f64, Vec<bool>)>,
{
    let (_, base_pattern) = f(model)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked: 0, skipped: 0 };
    let mut work = model.clone();
    let shapes: Vec<(String, usize)> = model.params().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    for (pi, (name, len)) in shapes.iter().enumerate() {
        let g = analytic
            .get(name)
            .ok_or_else(|| Error::Shape(format!("analytic gradient missing {name}")))?;
        for j in 0..*len {
            let orig = work.params()[pi].1.data[j];
            let mut vals = [0.0; 4];
            let mut kink = false;
            for (v, step) in vals.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                work.params_mut()[pi].1.data[j] = orig + step * eps;
                let (l, pattern) = f(&work)?;
                *v = l;
                kink |= pattern != base_pattern;
            }
            work.params_mut()[pi].1.data[j] = orig;
            if kink {
                report.skipped += 1;
                continue;
            }
            let numeric = (8.0 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12.0 * eps);
            let err = rel_error(g.data[j], numeric);
            report.checked += 1;
            if report.worst.is_empty() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{name}[{j}]");
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Tcn,
    Encoder,
    Mlp,
    Esr,
    Mrsl,
    NtXent,
}

impl CheckKind {
    pub const ALL: [CheckKind; 6] = [CheckKind::Tcn, CheckKind::Encoder, CheckKind::Mlp, CheckKind::Esr, CheckKind::Mrsl, CheckKind::NtXent];

    pub fn tolerance(self) -> f64 {
        match self {
            CheckKind::Encoder => 1e-3,
            CheckKind::Tcn | CheckKind::Mrsl | CheckKind::NtXent => 1e-4,
            CheckKind::Mlp | CheckKind::Esr => 1e-5,
        }
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CheckKind::Tcn => "tcn",
            CheckKind::Encoder => "encoder",
            CheckKind::Mlp => "mlp",
            CheckKind::Esr => "esr",
            CheckKind::Mrsl => "mrsl",
            CheckKind::NtXent => "nt_xent",
        };
        f.write_str(s)
    }
}

impl FromStr for CheckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Value(format!("unknown gradient check {s:?}")))
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data.chunks(t.shape[1]).map(|r| r.to_vec()).collect()
}

/// Runs the check for `kind` on a small randomized instance built from `seed`.
pub fn grad_check(kind: CheckKind, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6C0F_FEE0);
    match kind {
        CheckKind::Tcn => {
            let cfg = TcnConfig { n_blocks: 1, layers_per_block: 2, channels: 2, kernel_size: 3, dilation_growth: 2, embed_dim: 3, n_devices: 2 };
            let mut model = TcnModel::init(cfg, seed)?;
            // move PReLU slopes and FiLM biases off their initial values
            for (name, t) in model.params_mut() {
                if name.ends_with("prelu") || name.ends_with("film_b") || name.ends_with("conv_b") {
                    for v in t.data.iter_mut() {
                        *v += rng.random_range(-0.2..0.2);
                    }
                }
            }
            let device = (seed % 2) as usize;
            let x = randn(&mut rng, 64, 0.8);
            let y = randn(&mut rng, 64, 0.5);
            let loss = CombinedLoss::with_resolutions(&[StftConfig::new(16, 4)?, StftConfig::new(32, 8)?])?;
            let eval = |m: &TcnModel| -> Result<(f64, Vec<f64>, crate::tcn::TcnCache)> {
                let e = m.embedding_lookup(device)?;
                let (out, cache) = m.forward_train(&x, Some(device), &e)?;
                let (parts, g) = loss.value_grad(&y, &out)?;
                Ok((parts.total(), g, cache))
            };
            let (_, up, cache) = eval(&model)?;
            let grads = model.backward(&cache, &up)?;
            check_model(&model, &grads.params, eps, |m| {
                let (l, _, c) = eval(m)?;
                Ok((l, c.prelu_pattern()))
            })
        }
        CheckKind::Encoder => {
            let cfg = EncoderConfig { channels: vec![2, 3], kernel_size: 5, embed_dim: 4 };
            let mut model = EncoderModel::init(cfg, seed)?;
            for (name, t) in model.params_mut() {
                if name.contains("bn") || name == "out_b" {
                    for v in t.data.iter_mut() {
                        *v += rng.random_range(-0.3..0.3);
                    }
                }
            }
            let clips: Vec<Vec<f64>> = (0..4).map(|_| randn(&mut rng, 32, 1.0)).collect();
            let pairs = [1, 0, 3, 2];
            let eval = |m: &EncoderModel| -> Result<(f64, Vec<Vec<f64>>, crate::encoder::EncoderCache)> {
                let (emb, cache) = m.forward_batch_stats(&clips)?;
                let (l, g) = nt_xent_grad(&emb, &pairs, 0.5)?;
                Ok((l, g, cache))
            };
            let (_, up, cache) = eval(&model)?;
            let grads = model.backward(&cache, &up)?;
            check_model(&model, &grads.params, eps, |m| {
                let (l, _, c) = eval(m)?;
                Ok((l, c.relu_pattern()))
            })
        }
        CheckKind::Mlp => {
            let mut model = Mlp::init(5, 7, 3, seed);
            for v in model.b1.data.iter_mut().chain(model.b2.data.iter_mut()) {
                *v = rng.random_range(-0.3..0.3);
            }
            let x: Vec<Vec<f64>> = (0..6).map(|_| randn(&mut rng, 5, 1.0)).collect();
            let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
            let (logits, cache) = model.forward_train(&x)?;
            let (_, dl) = softmax_cross_entropy(&logits, &labels)?;
            let grads = model.backward(&cache, &dl)?;
            check_model(&model, &grads, eps, |m| {
                let (z, c) = m.forward_train(&x)?;
                Ok((softmax_cross_entropy(&z, &labels)?.0, c.relu_pattern()))
            })
        }
        CheckKind::Esr => {
            let pre = if seed % 2 == 1 { Some(0.95) } else { None };
            let target = randn(&mut rng, 32, 1.0);
            let leaves = Leaves(vec![("pred".into(), Tensor::from_vec(&[32], randn(&mut rng, 32, 1.0))?)]);
            let (_, g) = esr_grad(&target, &leaves.0[0].1.data, pre)?;
            let analytic = GradSet { entries: vec![("pred".into(), Tensor::from_vec(&[32], g)?)] };
            check_model(&leaves, &analytic, eps, |m| Ok((esr_grad(&target, &m.0[0].1.data, pre)?.0, Vec::new())))
        }
        CheckKind::Mrsl => {
            let mrsl = Mrsl::new(&[StftConfig::new(32, 8)?, StftConfig::new(64, 16)?])?;
            let target = randn(&mut rng, 128, 1.0);
            let leaves = Leaves(vec![("pred".into(), Tensor::from_vec(&[128], randn(&mut rng, 128, 1.0))?)]);
            let (_, g) = mrsl.loss_grad(&target, &leaves.0[0].1.data)?;
            let analytic = GradSet { entries: vec![("pred".into(), Tensor::from_vec(&[128], g)?)] };
            check_model(&leaves, &analytic, eps, |m| Ok((mrsl.loss(&target, &m.0[0].1.data)?, Vec::new())))
        }
        CheckKind::NtXent => {
            let leaves = Leaves(vec![("z".into(), Tensor::from_vec(&[6, 4], randn(&mut rng, 24, 1.0))?)]);
            let pairs: Vec<usize> = (0..6).map(|i| i ^ 1).collect();
            let tau = 0.2 + (seed % 5) as f64 * 0.2;
            let (_, g) = nt_xent_grad(&rows(&leaves.0[0].1), &pairs, tau)?;
            let analytic = GradSet { entries: vec![("z".into(), Tensor::from_vec(&[6, 4], g.concat())?)] };
            check_model(&leaves, &analytic, eps, |m| Ok((nt_xent_grad(&rows(&m.0[0].1), &pairs, tau)?.0, Vec::new())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_passes_for_a_few_seeds() {
        for kind in CheckKind::ALL {
            for seed in 0..3 {
                let r = grad_check(kind, seed, DEFAULT_EPS).unwrap();
                assert!(r.checked > 0);
                assert!(r.max_rel_error < kind.tolerance(), "{kind} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let leaves = Leaves(vec![("x".into(), Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap())]);
        let wrong = GradSet { entries: vec![("x".into(), Tensor::from_vec(&[2], vec![2.0, 4.5]).unwrap())] };
        let r = check_model(&leaves, &wrong, 1e-6, |m| Ok((m.0[0].1.data.iter().map(|v| v * v).sum(), Vec::new()))).unwrap();
        assert!(r.max_rel_error > 0.1);
        assert_eq!(r.worst, "x[1]");
    }

    #[test]
    fn kind_names_round_trip() {
        for k in CheckKind::ALL {
            assert_eq!(k.to_string().parse::<CheckKind>().unwrap(), k);
        }
    }
}
