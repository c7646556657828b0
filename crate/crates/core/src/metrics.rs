//! Losses and evaluation: ESR, multi-resolution spectral loss, dB conversion
//! and per-device quantile reporting.
//!
//! All losses work on `f64` slices and come with analytic gradients with
//! respect to the prediction, used by the trainer.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;

use crate::error::{Error, Result};

/// Floor applied to the power spectrum before the square root, as in the
/// common auraloss formulation.
pub const MAG_POWER_FLOOR: f64 = 1e-8;

fn check_lengths(target: &[f64], pred: &[f64]) -> Result<()> {
    if target.len() != pred.len() {
        return Err(Error::Shape(format!("target has {} samples, prediction {}", target.len(), pred.len())));
    }
    if target.is_empty() {
        return Err(Error::Shape("empty signals".into()));
    }
    Ok(())
}

/// First-order pre-emphasis `y[n] = x[n] - a*x[n-1]`.
pub fn pre_emphasis(x: &[f64], coeff: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut prev = 0.0;
    for &v in x {
        out.push(v - coeff * prev);
        prev = v;
    }
    out
}

fn pre_emphasis_adjoint(g: &[f64], coeff: f64) -> Vec<f64> {
    let n = g.len();
    (0..n).map(|i| g[i] - if i + 1 < n { coeff * g[i + 1] } else { 0.0 }).collect()
}

/// Error-to-signal ratio `sum((t-p)^2) / sum(t^2)`, optionally after
/// pre-emphasis of both signals.
pub fn esr(target: &[f64], pred: &[f64], pre_emph: Option<f64>) -> Result<f64> {
    esr_inner(target, pred, pre_emph, false).map(|(v, _)| v)
}

/// ESR and its gradient with respect to `pred`.
pub fn esr_grad(target: &[f64], pred: &[f64], pre_emph: Option<f64>) -> Result<(f64, Vec<f64>)> {
    esr_inner(target, pred, pre_emph, true).map(|(v, g)| (v, g.unwrap_or_default()))
}

fn esr_inner(target: &[f64], pred: &[f64], pre_emph: Option<f64>, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    check_lengths(target, pred)?;
    let (t, p) = match pre_emph {
        Some(a) => (pre_emphasis(target, a), pre_emphasis(pred, a)),
        None => (target.to_vec(), pred.to_vec()),
    };
    let energy: f64 = t.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::DegenerateTarget);
    }
    let err: f64 = t.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
    let grad = want_grad.then(|| {
        let g: Vec<f64> = t.iter().zip(&p).map(|(a, b)| 2.0 * (b - a) / energy).collect();
        match pre_emph {
            Some(a) => pre_emphasis_adjoint(&g, a),
            None => g,
        }
    });
    Ok((err / energy, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize) -> Result<Self> {
        if !fft_size.is_power_of_two() || fft_size < 2 {
            return Err(Error::Value(format!("fft_size {fft_size} is not a power of two")));
        }
        if hop == 0 || hop > fft_size {
            return Err(Error::Value(format!("hop {hop} must be in 1..={fft_size}")));
        }
        Ok(StftConfig { fft_size, hop })
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            1 + (len - self.fft_size) / self.hop
        }
    }
}

/// FFT sizes 512, 1024 and 2048 with quarter-length hops.
pub fn default_resolutions() -> Vec<StftConfig> {
    [512, 1024, 2048].iter().map(|&n| StftConfig { fft_size: n, hop: n / 4 }).collect()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Magnitude spectrogram, `frames x bins` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub mag: Vec<f64>,
}

impl Spectrogram {
    pub fn frame(&self, m: usize) -> &[f64] {
        &self.mag[m * self.bins..(m + 1) * self.bins]
    }
}

/// A planned STFT for one resolution.
#[derive(Clone)]
pub struct StftPlan {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("cfg", &self.cfg).finish()
    }
}

impl StftPlan {
    pub fn new(cfg: StftConfig) -> Self {
        let mut planner = FftPlanner::new();
        StftPlan {
            cfg,
            window: hann(cfg.fft_size),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        }
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    /// Complex one-sided spectra, `frames x bins`.
    fn complex(&self, signal: &[f64]) -> Result<(usize, Vec<Complex<f64>>)> {
        let n = self.cfg.fft_size;
        if signal.len() < n {
            return Err(Error::Shape(format!("signal of {} samples is shorter than fft_size {n}", signal.len())));
        }
        let frames = self.cfg.frames(signal.len());
        let bins = self.cfg.bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for m in 0..frames {
            let start = m * self.cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(self.window[i] * signal[start + i], 0.0);
            }
            self.forward.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        Ok((frames, out))
    }

    pub fn magnitude(&self, signal: &[f64]) -> Result<Spectrogram> {
        let (frames, spec) = self.complex(signal)?;
        Ok(Spectrogram { frames, bins: self.cfg.bins(), mag: spec.iter().map(|c| c.norm()).collect() })
    }

    /// Spectral convergence plus mean absolute log-magnitude difference, and
    /// optionally its gradient with respect to `pred`.
    fn loss(&self, target: &[f64], pred: &[f64], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let (frames, ys) = self.complex(target)?;
        let (_, xs) = self.complex(pred)?;
        let floored = |c: &Complex<f64>| c.norm_sqr().max(MAG_POWER_FLOOR).sqrt();
        let ymag: Vec<f64> = ys.iter().map(floored).collect();
        let xmag: Vec<f64> = xs.iter().map(floored).collect();
        let count = ymag.len() as f64;

        let diff_norm = ymag.iter().zip(&xmag).map(|(y, x)| (y - x) * (y - x)).sum::<f64>().sqrt();
        let y_norm = ymag.iter().map(|y| y * y).sum::<f64>().sqrt();
        let sc = diff_norm / y_norm;
        let log_l1 = ymag.iter().zip(&xmag).map(|(y, x)| (y.ln() - x.ln()).abs()).sum::<f64>() / count;
        let value = sc + log_l1;
        if !want_grad {
            return Ok((value, None));
        }

        let n = self.cfg.fft_size;
        let bins = self.cfg.bins();
        let mut grad = vec![0.0; pred.len()];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for m in 0..frames {
            for b in buf.iter_mut() {
                *b = Complex::new(0.0, 0.0);
            }
            for k in 0..bins {
                let idx = m * bins + k;
                let (x, y) = (xmag[idx], ymag[idx]);
                let mut d_mag = 0.0;
                if diff_norm > 0.0 {
                    d_mag += (x - y) / (diff_norm * y_norm);
                }
                let log_diff = y.ln() - x.ln();
                if log_diff != 0.0 {
                    d_mag -= log_diff.signum() / (count * x);
                }
                let c = xs[idx];
                if c.norm_sqr() > MAG_POWER_FLOOR {
                    // d|X|/dRe = Re/|X|, d|X|/dIm = Im/|X|
                    buf[k] = Complex::new(d_mag * c.re / x, d_mag * c.im / x);
                }
            }
            // adjoint of the forward DFT restricted to the real input
            self.inverse.process(&mut buf);
            let start = m * self.cfg.hop;
            for i in 0..n {
                grad[start + i] += self.window[i] * buf[i].re;
            }
        }
        Ok((value, Some(grad)))
    }
}

/// Hann-windowed STFT magnitudes at `cfg`.
pub fn stft_mag(signal: &[f64], cfg: StftConfig) -> Result<Spectrogram> {
    StftPlan::new(cfg).magnitude(signal)
}

/// Multi-resolution spectral loss with cached FFT plans.
#[derive(Debug, Clone)]
pub struct Mrsl {
    plans: Vec<StftPlan>,
}

impl Default for Mrsl {
    fn default() -> Self {
        Mrsl::new(&default_resolutions()).expect("default resolutions are non-empty")
    }
}

impl Mrsl {
    pub fn new(resolutions: &[StftConfig]) -> Result<Self> {
        if resolutions.is_empty() {
            return Err(Error::Value("at least one resolution is required".into()));
        }
        Ok(Mrsl { plans: resolutions.iter().map(|&c| StftPlan::new(c)).collect() })
    }

    pub fn max_fft_size(&self) -> usize {
        self.plans.iter().map(|p| p.cfg.fft_size).max().unwrap_or(0)
    }

    pub fn loss(&self, target: &[f64], pred: &[f64]) -> Result<f64> {
        check_lengths(target, pred)?;
        let mut total = 0.0;
        for p in &self.plans {
            total += p.loss(target, pred, false)?.0;
        }
        Ok(total / self.plans.len() as f64)
    }

    pub fn loss_grad(&self, target: &[f64], pred: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_lengths(target, pred)?;
        let r = self.plans.len() as f64;
        let mut total = 0.0;
        let mut grad = vec![0.0; pred.len()];
        for p in &self.plans {
            let (v, g) = p.loss(target, pred, true)?;
            total += v;
            for (a, b) in grad.iter_mut().zip(g.unwrap_or_default()) {
                *a += b / r;
            }
        }
        Ok((total / r, grad))
    }
}

/// Mean over resolutions of spectral convergence plus L1 log-magnitude distance.
pub fn mrsl(target: &[f64], pred: &[f64], resolutions: &[StftConfig]) -> Result<f64> {
    Mrsl::new(resolutions)?.loss(target, pred)
}

/// ESR (no pre-emphasis) plus MRSL at the default resolutions.
#[derive(Debug, Clone, Default)]
pub struct CombinedLoss {
    pub mrsl: Mrsl,
    pub pre_emph: Option<f64>,
}

/// Loss value with its two components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParts {
    pub esr: f64,
    pub mrsl: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.esr + self.mrsl
    }
}

impl CombinedLoss {
    pub fn with_resolutions(resolutions: &[StftConfig]) -> Result<Self> {
        Ok(CombinedLoss { mrsl: Mrsl::new(resolutions)?, pre_emph: None })
    }

    pub fn parts(&self, target: &[f64], pred: &[f64]) -> Result<LossParts> {
        Ok(LossParts { esr: esr(target, pred, self.pre_emph)?, mrsl: self.mrsl.loss(target, pred)? })
    }

    pub fn value(&self, target: &[f64], pred: &[f64]) -> Result<f64> {
        self.parts(target, pred).map(|p| p.total())
    }

    pub fn value_grad(&self, target: &[f64], pred: &[f64]) -> Result<(LossParts, Vec<f64>)> {
        let (e, mut g) = esr_grad(target, pred, self.pre_emph)?;
        let (s, gs) = self.mrsl.loss_grad(target, pred)?;
        for (a, b) in g.iter_mut().zip(gs) {
            *a += b;
        }
        Ok((LossParts { esr: e, mrsl: s }, g))
    }
}

pub fn combined_loss(target: &[f64], pred: &[f64]) -> Result<f64> {
    CombinedLoss::default().value(target, pred)
}

/// `10 * log10(x)`.
pub fn to_db(x: f64) -> Result<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(10.0 * x.log10())
    } else {
        Err(Error::Domain(format!("cannot convert {x} to dB")))
    }
}

pub fn from_db(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Aggregate losses with per-device detail.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub esr: f64,
    pub mrsl: f64,
    pub esr_db: f64,
    pub mrsl_db: f64,
    pub per_device: BTreeMap<usize, LossParts>,
}

impl LossReport {
    /// Means over devices of the per-device losses.
    pub fn from_per_device(per_device: BTreeMap<usize, LossParts>) -> Result<Self> {
        if per_device.is_empty() {
            return Err(Error::Empty("no devices to report".into()));
        }
        let n = per_device.len() as f64;
        let esr = per_device.values().map(|p| p.esr).sum::<f64>() / n;
        let mrsl = per_device.values().map(|p| p.mrsl).sum::<f64>() / n;
        Ok(LossReport { esr, mrsl, esr_db: to_db(esr)?, mrsl_db: to_db(mrsl)?, per_device })
    }

    /// CSV rows `device_id,esr_db,mrsl_db`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["device_id", "esr_db", "mrsl_db"]).expect("in-memory csv");
        for (id, p) in &self.per_device {
            w.write_record([id.to_string(), to_db(p.esr)?.to_string(), to_db(p.mrsl)?.to_string()])
                .expect("in-memory csv");
        }
        Ok(String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileEntry {
    pub label: &'static str,
    pub rank: usize,
    pub device_id: usize,
    pub esr: f64,
    pub mrsl: f64,
    pub esr_db: f64,
    pub mrsl_db: f64,
}

/// Nearest rank (1-based) of percentile `p` among `n` items.
pub fn nearest_rank(p: f64, n: usize) -> usize {
    ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n)
}

/// Best, 25th percentile, median, 75th percentile and worst devices by
/// combined loss (ascending), using nearest-rank percentiles. Ties in loss are
/// ordered by device id.
pub fn device_report(per_device: &BTreeMap<usize, LossParts>) -> Result<Vec<QuantileEntry>> {
    if per_device.is_empty() {
        return Err(Error::Empty("no devices to report".into()));
    }
    let mut sorted: Vec<(usize, LossParts)> = per_device.iter().map(|(&k, &v)| (k, v)).collect();
    sorted.sort_by(|a, b| a.1.total().total_cmp(&b.1.total()).then(a.0.cmp(&b.0)));
    let n = sorted.len();
    [("best", 0.0), ("p25", 25.0), ("median", 50.0), ("p75", 75.0), ("worst", 100.0)]
        .iter()
        .map(|&(label, p)| {
            let rank = if p == 0.0 { 1 } else { nearest_rank(p, n) };
            let (id, parts) = sorted[rank - 1];
            Ok(QuantileEntry {
                label,
                rank,
                device_id: id,
                esr: parts.esr,
                mrsl: parts.mrsl,
                esr_db: to_db(parts.esr)?,
                mrsl_db: to_db(parts.mrsl)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn esr_closed_forms() {
        let t = noise(100, 1);
        assert_eq!(esr(&t, &t, None).unwrap(), 0.0);
        assert_eq!(esr(&t, &vec![0.0; 100], None).unwrap(), 1.0);
        assert!((esr(&[1.0, 2.0], &[1.0, 1.0], None).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn esr_errors() {
        assert!(matches!(esr(&[1.0], &[1.0, 2.0], None), Err(Error::Shape(_))));
        assert!(matches!(esr(&[0.0, 0.0], &[1.0, 2.0], None), Err(Error::DegenerateTarget)));
    }

    #[test]
    fn esr_scale_covariant() {
        let t = noise(64, 2);
        let p = noise(64, 3);
        let base = esr(&t, &p, Some(0.85)).unwrap();
        for alpha in [-3.0, 0.01, 7.5] {
            let ts: Vec<f64> = t.iter().map(|v| v * alpha).collect();
            let ps: Vec<f64> = p.iter().map(|v| v * alpha).collect();
            assert!((esr(&ts, &ps, Some(0.85)).unwrap() - base).abs() < 1e-12 * base);
        }
    }

    #[test]
    fn pre_emphasis_adjoint_is_transpose() {
        let x = noise(9, 4);
        let g = noise(9, 5);
        let lhs: f64 = pre_emphasis(&x, 0.9).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(pre_emphasis_adjoint(&g, 0.9)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sine_at_bin_centre_concentrates() {
        let cfg = StftConfig::new(512, 128).unwrap();
        let k = 20.0;
        let x: Vec<f64> = (0..2048).map(|n| (2.0 * PI * k * n as f64 / 512.0).sin()).collect();
        let s = stft_mag(&x, cfg).unwrap();
        for m in 0..s.frames {
            let f = s.frame(m);
            let total: f64 = f.iter().map(|v| v * v).sum();
            assert!(f[20] * f[20] / total > 0.6);
            // Hann main lobe spans the neighbouring bins
            let lobe: f64 = f[19..=21].iter().map(|v| v * v).sum();
            assert!(lobe / total > 0.9);
        }
    }

    #[test]
    fn zero_signal_zero_spectrogram() {
        let s = stft_mag(&[0.0; 1024], StftConfig::new(256, 64).unwrap()).unwrap();
        assert_eq!(s.frames, 13);
        assert_eq!(s.bins, 129);
        assert!(s.mag.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_signal_is_shape_error() {
        assert!(matches!(stft_mag(&[0.0; 100], StftConfig::new(128, 32).unwrap()), Err(Error::Shape(_))));
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::new(256, 100).unwrap();
        let x = noise(1000, 6);
        let s = stft_mag(&x, cfg).unwrap();
        let w = hann(256);
        for m in 0..s.frames {
            let time: f64 = (0..256).map(|i| (w[i] * x[m * 100 + i]).powi(2)).sum();
            let f = s.frame(m);
            let n = 256.0;
            let freq = (f[0] * f[0] + f[128] * f[128] + 2.0 * f[1..128].iter().map(|v| v * v).sum::<f64>()) / n;
            assert!((time - freq).abs() / time < 1e-4);
        }
    }

    #[test]
    fn stft_config_validation() {
        assert!(StftConfig::new(500, 100).is_err());
        assert!(StftConfig::new(512, 600).is_err());
        assert!(StftConfig::new(512, 0).is_err());
    }

    #[test]
    fn mrsl_identity_and_scaling() {
        let res = default_resolutions();
        let t = noise(4096, 7);
        assert_eq!(mrsl(&t, &t, &res).unwrap(), 0.0);
        let p: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
        let v = mrsl(&t, &p, &res).unwrap();
        assert!((v - (1.0 + 2f64.ln())).abs() < 1e-6, "{v}");
    }

    #[test]
    fn mrsl_orders_noise_above_scaled_target() {
        let res = default_resolutions();
        let t: Vec<f64> = (0..4096).map(|n| (2.0 * PI * 440.0 * n as f64 / 16000.0).sin()).collect();
        let scaled: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
        let wn = noise(4096, 8);
        let a = mrsl(&t, &scaled, &res).unwrap();
        let b = mrsl(&t, &wn, &res).unwrap();
        assert!(b > 0.0 && b > a, "{b} vs {a}");
    }

    #[test]
    fn combined_is_sum() {
        let t = noise(4096, 9);
        let p = noise(4096, 10);
        let c = combined_loss(&t, &p).unwrap();
        let s = esr(&t, &p, None).unwrap() + mrsl(&t, &p, &default_resolutions()).unwrap();
        assert!((c - s).abs() < 1e-12);
        assert_eq!(combined_loss(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn db_conversion() {
        assert!((to_db(0.01).unwrap() + 20.0).abs() < 1e-12);
        assert_eq!(to_db(1.0).unwrap(), 0.0);
        assert!((to_db(0.00389).unwrap() - -24.1).abs() < 0.05);
        assert!(matches!(to_db(0.0), Err(Error::Domain(_))));
        assert!(matches!(to_db(-1.0), Err(Error::Domain(_))));
        for x in [1e-6, 0.3, 1.0, 42.0] {
            assert!((from_db(to_db(x).unwrap()) - x).abs() <= 1e-12 * x.max(1.0));
        }
    }

    fn losses(vals: &[f64]) -> BTreeMap<usize, LossParts> {
        vals.iter().enumerate().map(|(i, &v)| (i, LossParts { esr: v, mrsl: v })).collect()
    }

    #[test]
    fn report_five_devices_in_order() {
        let r = device_report(&losses(&[0.5, 0.1, 0.3, 0.2, 0.4])).unwrap();
        let ids: Vec<_> = r.iter().map(|e| e.device_id).collect();
        assert_eq!(ids, vec![1, 3, 2, 4, 0]);
    }

    #[test]
    fn report_single_device() {
        let r = device_report(&losses(&[0.7])).unwrap();
        assert!(r.iter().all(|e| e.device_id == 0));
    }

    #[test]
    fn report_nearest_rank_against_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..100).map(|_| rng.random_range(0.01..1.0)).collect();
        let r = device_report(&losses(&vals)).unwrap();
        let mut order: Vec<usize> = (0..100).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        assert_eq!(r[1].device_id, order[24]);
        assert_eq!(r[2].device_id, order[49]);
        assert_eq!(r[3].device_id, order[74]);
        assert_eq!(r[4].device_id, order[99]);
    }

    #[test]
    fn report_csv() {
        let rep = LossReport::from_per_device(losses(&[0.01, 0.1])).unwrap();
        let csv = rep.to_csv().unwrap();
        assert!(csv.starts_with("device_id,esr_db,mrsl_db\n0,-20,-20\n"));
    }
}
