//! Convolutional effects encoder, NT-Xent, and the KNN / MLP classifiers used
//! on top of its embeddings.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::par;
use crate::tensor::{GradSet, Parameterized, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels of each block; every block halves the time axis.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { channels: vec![16, 16, 32, 32, 64, 64], kernel_size: 5, embed_dim: 64 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Value("encoder needs at least one block with positive channels".into()));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Value(format!("encoder channel schedule {:?} decreases", self.channels)));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Value(format!("encoder kernel size {} must be odd", self.kernel_size)));
        }
        if self.embed_dim == 0 {
            return Err(Error::Value("encoder embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Minimum clip length: the total downsampling factor.
    pub fn downsampling(&self) -> usize {
        1 << self.channels.len()
    }

    fn in_ch(&self, block: usize) -> usize {
        if block == 0 {
            1
        } else {
            self.channels[block - 1]
        }
    }

    fn geoms(&self, block: usize) -> (ConvGeom, ConvGeom, ConvGeom) {
        let (cin, cout, k) = (self.in_ch(block), self.channels[block], self.kernel_size);
        (
            ConvGeom::same(cin, cout, k, 2),
            ConvGeom::same(cout, cout, k, 1),
            ConvGeom { in_ch: cin, out_ch: cout, kernel: 1, stride: 2, dilation: 1, pad_left: 0, pad_right: 0 },
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::filled(&[c], 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub conv1: Tensor,
    pub bn1: BatchNorm,
    pub conv2: Tensor,
    pub bn2: BatchNorm,
    /// 1x1 stride-2 residual projection.
    pub proj: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub blocks: Vec<EncoderBlock>,
    /// `E x C_last`
    pub out_w: Tensor,
    pub out_b: Tensor,
    generation: u64,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    x: Vec<Vec<f64>>,
    len_in: usize,
    len_out: usize,
    bn1: BnCache,
    r1: Vec<Vec<f64>>,
    bn2: BnCache,
}

/// Activations recorded by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    generation: u64,
    blocks: Vec<BlockCache>,
    last: Vec<Vec<f64>>,
    last_len: usize,
}

impl EncoderCache {
    /// Sign pattern of every ReLU input; used to detect kinks in finite
    /// difference checks.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.bn1.pre.iter().chain(&b.bn2.pre))
            .flat_map(|v| v.iter().map(|&x| x > 0.0))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub params: GradSet,
    pub input: Vec<Vec<f64>>,
}

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn bn_forward(a: &[Vec<f64>], c: usize, t: usize, bn: &BatchNorm, train: bool) -> BnCache {
    let (mean, var) = if train {
        let n = (a.len() * t) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let m = a.iter().map(|x| x[ch * t..(ch + 1) * t].iter().sum::<f64>()).sum::<f64>() / n;
            let v = a
                .iter()
                .map(|x| x[ch * t..(ch + 1) * t].iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                .sum::<f64>()
                / n;
            mean[ch] = m;
            var[ch] = v;
        }
        (mean, var)
    } else {
        (bn.running_mean.data.clone(), bn.running_var.data.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Vec::with_capacity(a.len());
    let mut pre = Vec::with_capacity(a.len());
    for x in a {
        let mut xh = vec![0.0; c * t];
        let mut p = vec![0.0; c * t];
        for ch in 0..c {
            for i in ch * t..(ch + 1) * t {
                xh[i] = (x[i] - mean[ch]) * inv_std[ch];
                p[i] = bn.gamma.data[ch] * xh[i] + bn.beta.data[ch];
            }
        }
        xhat.push(xh);
        pre.push(p);
    }
    BnCache { xhat, pre, inv_std, mean, var }
}

/// Returns `d a` given `d pre`, accumulating gamma/beta gradients.
fn bn_backward(cache: &BnCache, dpre: &[Vec<f64>], c: usize, t: usize, gamma: &[f64], dgamma: &mut [f64], dbeta: &mut [f64]) -> Vec<Vec<f64>> {
    let n = (dpre.len() * t) as f64;
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for (dy, xh) in dpre.iter().zip(&cache.xhat) {
        for ch in 0..c {
            for i in ch * t..(ch + 1) * t {
                sum_dy[ch] += dy[i];
                sum_dy_xhat[ch] += dy[i] * xh[i];
            }
        }
    }
    for ch in 0..c {
        dgamma[ch] += sum_dy_xhat[ch];
        dbeta[ch] += sum_dy[ch];
    }
    dpre.iter()
        .zip(&cache.xhat)
        .map(|(dy, xh)| {
            let mut da = vec![0.0; c * t];
            for ch in 0..c {
                let k = gamma[ch] * cache.inv_std[ch] / n;
                for i in ch * t..(ch + 1) * t {
                    da[i] = k * (n * dy[i] - sum_dy[ch] - xh[i] * sum_dy_xhat[ch]);
                }
            }
            da
        })
        .collect()
}

/// Per-element convolution backward; weight gradients are summed in batch order.
fn conv_batch_backward(xs: &[Vec<f64>], len: usize, w: &[f64], dys: &[Vec<f64>], g: &ConvGeom, dw: &mut [f64]) -> Vec<Vec<f64>> {
    let parts = par::map_range(xs.len(), |b| {
        let mut dwb = vec![0.0; w.len()];
        let mut dx = vec![0.0; g.in_ch * len];
        conv::backward(&xs[b], len, w, &dys[b], g, &mut dwb, None, Some(&mut dx));
        (dwb, dx)
    });
    parts
        .into_iter()
        .map(|(dwb, dx)| {
            for (a, b) in dw.iter_mut().zip(&dwb) {
                *a += b;
            }
            dx
        })
        .collect()
}

impl EncoderModel {
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let blocks = (0..config.channels.len())
            .map(|b| {
                let (cin, cout) = (config.in_ch(b), config.channels[b]);
                EncoderBlock {
                    conv1: Tensor::zeros(&[cout, cin, k]),
                    bn1: BatchNorm::new(cout),
                    conv2: Tensor::zeros(&[cout, cout, k]),
                    bn2: BatchNorm::new(cout),
                    proj: Tensor::zeros(&[cout, cin]),
                }
            })
            .collect();
        let last = *config.channels.last().expect("validated");
        Ok(EncoderModel {
            out_w: Tensor::zeros(&[config.embed_dim, last]),
            out_b: Tensor::zeros(&[config.embed_dim]),
            config,
            blocks,
            generation: 0,
        })
    }

    /// He-normal convolution weights, unit batch-norm scale.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = m.config.kernel_size as f64;
        for b in m.blocks.iter_mut() {
            let (cout, cin) = (b.proj.shape[0], b.proj.shape[1]);
            b.conv1.data = normal(&mut rng, b.conv1.len(), (2.0 / (cin as f64 * k)).sqrt());
            b.conv2.data = normal(&mut rng, b.conv2.len(), (2.0 / (cout as f64 * k)).sqrt());
            b.proj.data = normal(&mut rng, b.proj.len(), (1.0 / cin as f64).sqrt());
        }
        let last = m.out_w.shape[1] as f64;
        m.out_w.data = normal(&mut rng, m.out_w.len(), (1.0 / last).sqrt());
        m.snap_to_f32();
        Ok(m)
    }

    /// Batch-norm running statistics (non-learnable state).
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.bn1.running_mean"), &b.bn1.running_mean));
            out.push((format!("blocks.{i}.bn1.running_var"), &b.bn1.running_var));
            out.push((format!("blocks.{i}.bn2.running_mean"), &b.bn2.running_mean));
            out.push((format!("blocks.{i}.bn2.running_var"), &b.bn2.running_var));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.bn1.running_mean"), &mut b.bn1.running_mean));
            out.push((format!("blocks.{i}.bn1.running_var"), &mut b.bn1.running_var));
            out.push((format!("blocks.{i}.bn2.running_mean"), &mut b.bn2.running_mean));
            out.push((format!("blocks.{i}.bn2.running_var"), &mut b.bn2.running_var));
        }
        out
    }

    fn check_clips(&self, clips: &[Vec<f64>]) -> Result<usize> {
        let Some(first) = clips.first() else {
            return Err(Error::Empty("encoder batch has no clips".into()));
        };
        let t = first.len();
        if clips.iter().any(|c| c.len() != t) {
            return Err(Error::Shape("encoder batch clips differ in length".into()));
        }
        let min = self.config.downsampling();
        if t < min {
            return Err(Error::Shape(format!("clip of {t} samples is shorter than the downsampling factor {min}")));
        }
        Ok(t)
    }

    fn run(&self, clips: &[Vec<f64>], train: bool) -> Result<(Vec<Vec<f64>>, EncoderCache)> {
        let mut len = self.check_clips(clips)?;
        let mut x: Vec<Vec<f64>> = clips.to_vec();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (bi, blk) in self.blocks.iter().enumerate() {
            let (g1, g2, gp) = self.config.geoms(bi);
            let c = g1.out_ch;
            let len_out = g1.out_len(len);
            let a1 = par::map(&x, |xb| conv::forward(xb, len, &blk.conv1.data, None, &g1));
            let bn1 = bn_forward(&a1, c, len_out, &blk.bn1, train);
            let r1: Vec<Vec<f64>> = bn1.pre.iter().map(|p| p.iter().map(|&v| v.max(0.0)).collect()).collect();
            let a2 = par::map(&r1, |rb| conv::forward(rb, len_out, &blk.conv2.data, None, &g2));
            let bn2 = bn_forward(&a2, c, len_out, &blk.bn2, train);
            let out: Vec<Vec<f64>> = par::map_range(x.len(), |b| {
                let mut y = conv::forward(&x[b], len, &blk.proj.data, None, &gp);
                for (yv, &p) in y.iter_mut().zip(&bn2.pre[b]) {
                    *yv += p.max(0.0);
                }
                y
            });
            blocks.push(BlockCache { x, len_in: len, len_out, bn1, r1, bn2 });
            x = out;
            len = len_out;
        }
        let e = self.config.embed_dim;
        let c = self.out_w.shape[1];
        let emb = x
            .iter()
            .map(|h| {
                let hbar: Vec<f64> = (0..c).map(|ch| h[ch * len..(ch + 1) * len].iter().sum::<f64>() / len as f64).collect();
                (0..e)
                    .map(|k| self.out_b.data[k] + (0..c).map(|ch| self.out_w.data[k * c + ch] * hbar[ch]).sum::<f64>())
                    .collect()
            })
            .collect();
        Ok((emb, EncoderCache { generation: self.generation, blocks, last: x, last_len: len }))
    }

    /// Eval-mode embeddings using running statistics. Pure.
    pub fn embed(&self, clips: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(clips, false)?.0)
    }

    /// Train-mode forward using batch statistics, without touching running
    /// statistics.
    pub fn forward_batch_stats(&self, clips: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, EncoderCache)> {
        self.run(clips, true)
    }

    /// Train-mode forward that also folds the batch statistics into the
    /// running estimates.
    pub fn forward_train(&mut self, clips: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, EncoderCache)> {
        let (emb, cache) = self.run(clips, true)?;
        let batch = clips.len();
        for (blk, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            let n = (batch * bc.len_out) as f64;
            for (bn, stats) in [(&mut blk.bn1, &bc.bn1), (&mut blk.bn2, &bc.bn2)] {
                for ch in 0..stats.mean.len() {
                    let unbiased = if n > 1.0 { stats.var[ch] * n / (n - 1.0) } else { stats.var[ch] };
                    let rm = &mut bn.running_mean.data[ch];
                    *rm = (((1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * stats.mean[ch]) as f32) as f64;
                    let rv = &mut bn.running_var.data[ch];
                    *rv = (((1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased) as f32) as f64;
                }
            }
        }
        Ok((emb, cache))
    }

    /// Gradients of `sum_b <d_emb[b], emb[b]>` for a train-mode cache.
    pub fn backward(&self, cache: &EncoderCache, d_emb: &[Vec<f64>]) -> Result<EncoderGrads> {
        if cache.generation != self.generation {
            return Err(Error::Cache("cache was produced before the last parameter update".into()));
        }
        if d_emb.len() != cache.last.len() || d_emb.iter().any(|d| d.len() != self.config.embed_dim) {
            return Err(Error::Cache("upstream gradient does not match cached batch".into()));
        }
        let mut grads = Self::zeros(self.config.clone())?;
        for b in grads.blocks.iter_mut() {
            b.bn1.gamma.data.iter_mut().for_each(|v| *v = 0.0);
            b.bn2.gamma.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let e = self.config.embed_dim;
        let c = self.out_w.shape[1];
        let len = cache.last_len;
        let mut dx: Vec<Vec<f64>> = Vec::with_capacity(d_emb.len());
        for (h, de) in cache.last.iter().zip(d_emb) {
            let mut dh = vec![0.0; c * len];
            for ch in 0..c {
                let hbar = h[ch * len..(ch + 1) * len].iter().sum::<f64>() / len as f64;
                let mut s = 0.0;
                for k in 0..e {
                    grads.out_w.data[k * c + ch] += de[k] * hbar;
                    s += self.out_w.data[k * c + ch] * de[k];
                }
                dh[ch * len..(ch + 1) * len].iter_mut().for_each(|v| *v = s / len as f64);
            }
            dx.push(dh);
        }
        for de in d_emb {
            for k in 0..e {
                grads.out_b.data[k] += de[k];
            }
        }

        for bi in (0..self.blocks.len()).rev() {
            let blk = &self.blocks[bi];
            let gb = &mut grads.blocks[bi];
            let bc = &cache.blocks[bi];
            let (g1, g2, gp) = self.config.geoms(bi);
            let cc = g1.out_ch;
            let dout = dx;
            let mut dxin = conv_batch_backward(&bc.x, bc.len_in, &blk.proj.data, &dout, &gp, &mut gb.proj.data);
            let dpre2: Vec<Vec<f64>> = dout
                .iter()
                .zip(&bc.bn2.pre)
                .map(|(d, p)| d.iter().zip(p).map(|(&d, &p)| if p > 0.0 { d } else { 0.0 }).collect())
                .collect();
            let da2 = bn_backward(&bc.bn2, &dpre2, cc, bc.len_out, &blk.bn2.gamma.data, &mut gb.bn2.gamma.data, &mut gb.bn2.beta.data);
            let dr1 = conv_batch_backward(&bc.r1, bc.len_out, &blk.conv2.data, &da2, &g2, &mut gb.conv2.data);
            let dpre1: Vec<Vec<f64>> = dr1
                .iter()
                .zip(&bc.bn1.pre)
                .map(|(d, p)| d.iter().zip(p).map(|(&d, &p)| if p > 0.0 { d } else { 0.0 }).collect())
                .collect();
            let da1 = bn_backward(&bc.bn1, &dpre1, cc, bc.len_out, &blk.bn1.gamma.data, &mut gb.bn1.gamma.data, &mut gb.bn1.beta.data);
            let dx1 = conv_batch_backward(&bc.x, bc.len_in, &blk.conv1.data, &da1, &g1, &mut gb.conv1.data);
            for (acc, d) in dxin.iter_mut().zip(&dx1) {
                for (a, b) in acc.iter_mut().zip(d) {
                    *a += b;
                }
            }
            dx = dxin;
        }
        Ok(EncoderGrads { params: GradSet::from_model(&grads), input: dx })
    }
}

impl Parameterized for EncoderModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.conv1"), &b.conv1));
            out.push((format!("blocks.{i}.bn1.gamma"), &b.bn1.gamma));
            out.push((format!("blocks.{i}.bn1.beta"), &b.bn1.beta));
            out.push((format!("blocks.{i}.conv2"), &b.conv2));
            out.push((format!("blocks.{i}.bn2.gamma"), &b.bn2.gamma));
            out.push((format!("blocks.{i}.bn2.beta"), &b.bn2.beta));
            out.push((format!("blocks.{i}.proj"), &b.proj));
        }
        out.push(("out_w".into(), &self.out_w));
        out.push(("out_b".into(), &self.out_b));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.generation += 1;
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.conv1"), &mut b.conv1));
            out.push((format!("blocks.{i}.bn1.gamma"), &mut b.bn1.gamma));
            out.push((format!("blocks.{i}.bn1.beta"), &mut b.bn1.beta));
            out.push((format!("blocks.{i}.conv2"), &mut b.conv2));
            out.push((format!("blocks.{i}.bn2.gamma"), &mut b.bn2.gamma));
            out.push((format!("blocks.{i}.bn2.beta"), &mut b.bn2.beta));
            out.push((format!("blocks.{i}.proj"), &mut b.proj));
        }
        out.push(("out_w".into(), &mut self.out_w));
        out.push(("out_b".into(), &mut self.out_b));
        out
    }
}

/// Writes one CSV row per clip: id followed by the embedding values.
pub fn write_embeddings_csv(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.1.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
    let mut header = vec!["clip_id".to_string()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
    for (id, v) in rows {
        if v.len() != dim {
            return Err(Error::Shape(format!("embedding for {id} has {} values, expected {dim}", v.len())));
        }
        let mut rec = vec![id.clone()];
        rec.extend(v.iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- NT-Xent

fn check_pairing(n_views: usize, pair_index: &[usize]) -> Result<()> {
    if n_views == 0 || n_views % 2 != 0 || pair_index.len() != n_views {
        return Err(Error::Pairing(format!("{n_views} views with {} pair indices", pair_index.len())));
    }
    for (i, &p) in pair_index.iter().enumerate() {
        if p >= n_views || p == i || pair_index[p] != i {
            return Err(Error::Pairing(format!("view {i} is not matched with exactly one partner")));
        }
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12)
}

/// NT-Xent loss and its gradient with respect to each embedding.
pub fn nt_xent_grad(embeddings: &[Vec<f64>], pair_index: &[usize], temperature: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Value(format!("temperature must be positive, got {temperature}")));
    }
    let n = embeddings.len();
    check_pairing(n, pair_index)?;
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Shape("embeddings differ in dimension".into()));
    }
    let norms: Vec<f64> = embeddings.iter().map(|e| norm(e)).collect();
    let u: Vec<Vec<f64>> = embeddings.iter().zip(&norms).map(|(e, &nm)| e.iter().map(|x| x / nm).collect()).collect();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = u[i].iter().zip(&u[j]).map(|(a, b)| a * b).sum::<f64>() / temperature;
        }
    }
    // dL/ds[i][j] from row i's softmax
    let mut ds = vec![0.0; n * n];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &s[i * n..(i + 1) * n];
        let mx = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).filter(|&j| j != i).map(|j| (row[j] - mx).exp()).sum();
        let lse = mx + z.ln();
        loss += lse - row[pair_index[i]];
        for j in (0..n).filter(|&j| j != i) {
            let p = (row[j] - lse).exp();
            ds[i * n + j] = (p - if j == pair_index[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    let grads = (0..n)
        .map(|i| {
            let mut du = vec![0.0; d];
            for j in 0..n {
                let w = (ds[i * n + j] + ds[j * n + i]) / temperature;
                if w != 0.0 {
                    for (a, b) in du.iter_mut().zip(&u[j]) {
                        *a += w * b;
                    }
                }
            }
            let dot: f64 = du.iter().zip(&u[i]).map(|(a, b)| a * b).sum();
            du.iter().zip(&u[i]).map(|(g, ui)| (g - ui * dot) / norms[i]).collect()
        })
        .collect();
    Ok((loss / n as f64, grads))
}

pub fn nt_xent(embeddings: &[Vec<f64>], pair_index: &[usize], temperature: f64) -> Result<f64> {
    Ok(nt_xent_grad(embeddings, pair_index, temperature)?.0)
}

// -------------------------------------------------------------------- KNN

fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let nm = norm(v);
    v.iter().map(|x| x / nm).collect()
}

/// Majority vote among the `k` nearest references (Euclidean distance on
/// L2-normalized vectors). Distance ties go to the lower reference index;
/// vote ties go to the class of the nearest neighbour among the tied classes.
pub fn knn_classify(reference: &[Vec<f64>], labels: &[usize], queries: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    if reference.is_empty() {
        return Err(Error::Empty("knn reference set".into()));
    }
    if labels.len() != reference.len() {
        return Err(Error::Shape(format!("{} references but {} labels", reference.len(), labels.len())));
    }
    if k == 0 || k > reference.len() {
        return Err(Error::Value(format!("k={k} with {} references", reference.len())));
    }
    let refs: Vec<Vec<f64>> = reference.iter().map(|r| l2_normalize(r)).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(par::map(queries, |q| {
        let q = l2_normalize(q);
        let mut dist: Vec<(f64, usize)> = refs
            .iter()
            .enumerate()
            .map(|(i, r)| (r.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; n_classes];
        for &(_, i) in &dist[..k] {
            votes[labels[i]] += 1;
        }
        let best = *votes.iter().max().expect("k >= 1");
        dist[..k].iter().map(|&(_, i)| labels[i]).find(|&l| votes[l] == best).expect("winner is among neighbours")
    }))
}

// -------------------------------------------------------------------- MLP

/// One hidden ReLU layer followed by a linear softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// `H x D`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `C x H`
    pub w2: Tensor,
    pub b2: Tensor,
    generation: u64,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    generation: u64,
    x: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.pre.iter().flat_map(|p| p.iter().map(|&v| v > 0.0)).collect()
    }
}

impl Mlp {
    pub fn init(input: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mlp {
            w1: Tensor::from_vec(&[hidden, input], normal(&mut rng, hidden * input, (2.0 / input as f64).sqrt())).expect("sized"),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::from_vec(&[classes, hidden], normal(&mut rng, classes * hidden, (1.0 / hidden as f64).sqrt())).expect("sized"),
            b2: Tensor::zeros(&[classes]),
            generation: 0,
        };
        m.snap_to_f32();
        m
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape[1]
    }

    pub fn classes(&self) -> usize {
        self.b2.len()
    }

    fn layer1(&self, x: &[f64]) -> Vec<f64> {
        let (h, d) = (self.w1.shape[0], self.w1.shape[1]);
        (0..h).map(|j| self.b1.data[j] + self.w1.data[j * d..(j + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect()
    }

    fn layer2(&self, a: &[f64]) -> Vec<f64> {
        let h = self.w2.shape[1];
        (0..self.classes())
            .map(|c| self.b2.data[c] + self.w2.data[c * h..(c + 1) * h].iter().zip(a).map(|(w, v)| w * v.max(0.0)).sum::<f64>())
            .collect()
    }

    fn check_inputs(&self, x: &[Vec<f64>]) -> Result<()> {
        let d = self.input_dim();
        match x.iter().find(|v| v.len() != d) {
            Some(v) => Err(Error::Shape(format!("mlp input has {} values, expected {d}", v.len()))),
            None => Ok(()),
        }
    }

    pub fn logits(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check_inputs(x)?;
        Ok(x.iter().map(|v| self.layer2(&self.layer1(v))).collect())
    }

    pub fn forward_train(&self, x: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, MlpCache)> {
        self.check_inputs(x)?;
        let pre: Vec<Vec<f64>> = x.iter().map(|v| self.layer1(v)).collect();
        let logits = pre.iter().map(|a| self.layer2(a)).collect();
        Ok((logits, MlpCache { generation: self.generation, x: x.to_vec(), pre }))
    }

    pub fn backward(&self, cache: &MlpCache, d_logits: &[Vec<f64>]) -> Result<GradSet> {
        if cache.generation != self.generation || d_logits.len() != cache.x.len() {
            return Err(Error::Cache("mlp cache does not match model or upstream gradient".into()));
        }
        let (h, d) = (self.w1.shape[0], self.w1.shape[1]);
        let c = self.classes();
        let mut g = Mlp {
            w1: self.w1.zeros_like(),
            b1: self.b1.zeros_like(),
            w2: self.w2.zeros_like(),
            b2: self.b2.zeros_like(),
            generation: 0,
        };
        for ((x, pre), dl) in cache.x.iter().zip(&cache.pre).zip(d_logits) {
            let mut da = vec![0.0; h];
            for k in 0..c {
                g.b2.data[k] += dl[k];
                for j in 0..h {
                    g.w2.data[k * h + j] += dl[k] * pre[j].max(0.0);
                    da[j] += self.w2.data[k * h + j] * dl[k];
                }
            }
            for j in 0..h {
                if pre[j] <= 0.0 {
                    continue;
                }
                g.b1.data[j] += da[j];
                for i in 0..d {
                    g.w1.data[j * d + i] += da[j] * x[i];
                }
            }
        }
        Ok(GradSet::from_model(&g))
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("w1".into(), &self.w1), ("b1".into(), &self.b1), ("w2".into(), &self.w2), ("b2".into(), &self.b2)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.generation += 1;
        vec![
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
        ]
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Shape(format!("{} logit rows for {} labels", logits.len(), labels.len())));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        if y >= z.len() {
            return Err(Error::Value(format!("label {y} out of range for {} classes", z.len())));
        }
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - z[y];
        grads.push(z.iter().enumerate().map(|(k, v)| ((v - lse).exp() - if k == y { 1.0 } else { 0.0 }) / n).collect());
    }
    Ok((loss / n, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpTrainConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        MlpTrainConfig { hidden: 100, steps: 300, lr: 1e-2, seed: 0 }
    }
}

/// Full-batch Adam training on L2-normalized embeddings.
pub fn mlp_train(embeddings: &[Vec<f64>], labels: &[usize], config: &MlpTrainConfig) -> Result<Mlp> {
    if embeddings.is_empty() {
        return Err(Error::Empty("mlp training set".into()));
    }
    if labels.len() != embeddings.len() {
        return Err(Error::Shape(format!("{} embeddings but {} labels", embeddings.len(), labels.len())));
    }
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::DegenerateLabels(distinct.len()));
    }
    let classes = distinct.last().expect("non-empty") + 1;
    let x: Vec<Vec<f64>> = embeddings.iter().map(|e| l2_normalize(e)).collect();
    let mut mlp = Mlp::init(x[0].len(), config.hidden, classes, config.seed);
    let mut opt = AdamState::new(&mlp, AdamConfig::with_lr(config.lr));
    for _ in 0..config.steps {
        let (logits, cache) = mlp.forward_train(&x)?;
        let (_, dl) = softmax_cross_entropy(&logits, labels)?;
        let g = mlp.backward(&cache, &dl)?;
        opt.step(&mut mlp, &g)?;
    }
    Ok(mlp)
}

/// Arg-max class per embedding (lowest index on ties).
pub fn mlp_predict(mlp: &Mlp, embeddings: &[Vec<f64>]) -> Result<Vec<usize>> {
    let x: Vec<Vec<f64>> = embeddings.iter().map(|e| l2_normalize(e)).collect();
    Ok(mlp
        .logits(&x)?
        .iter()
        .map(|z| z.iter().enumerate().fold(0, |best, (k, v)| if *v > z[best] { k } else { best }))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_vecs(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn adjacent_pairs(n: usize) -> Vec<usize> {
        (0..n).map(|i| i ^ 1).collect()
    }

    /// Direct summation straight from the definition.
    fn nt_xent_oracle(z: &[Vec<f64>], pair: &[usize], tau: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let n = z.len();
        let mut total = 0.0;
        for i in 0..n {
            let num = (cos(&z[i], &z[pair[i]]) / tau).exp();
            let mut den = 0.0;
            for k in 0..n {
                if k != i {
                    den += (cos(&z[i], &z[k]) / tau).exp();
                }
            }
            total += -(num / den).ln();
        }
        total / n as f64
    }

    #[test]
    fn default_schedule_and_param_count() {
        let m = EncoderModel::zeros(EncoderConfig::default()).unwrap();
        assert_eq!(m.param_count(), 106_528);
        assert_eq!(m.config.downsampling(), 64);
        assert_eq!(m.out_w.shape, vec![64, 64]);
    }

    #[test]
    fn schedule_must_not_decrease() {
        let cfg = EncoderConfig { channels: vec![16, 8], ..EncoderConfig::default() };
        assert!(EncoderModel::zeros(cfg).is_err());
    }

    #[test]
    fn identical_clips_identical_embeddings() {
        let m = EncoderModel::init(EncoderConfig::default(), 1).unwrap();
        let clip: Vec<f64> = (0..256).map(|i| (i as f64 * 0.1).sin()).collect();
        let e = m.embed(&[clip.clone(), clip]).unwrap();
        assert_eq!(e[0].len(), 64);
        assert_eq!(e[0], e[1]);
    }

    #[test]
    fn zero_output_conv_gives_zero_embeddings() {
        let mut m = EncoderModel::init(EncoderConfig::default(), 2).unwrap();
        m.out_w.data.iter_mut().for_each(|v| *v = 0.0);
        let e = m.embed(&rand_vecs(2, 128, 0)).unwrap();
        assert!(e.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn short_clip_rejected() {
        let m = EncoderModel::init(EncoderConfig::default(), 3).unwrap();
        assert!(matches!(m.embed(&[vec![0.0; 63]]), Err(Error::Shape(_))));
        assert!(m.embed(&[vec![0.0; 64]]).is_ok());
    }

    #[test]
    fn eval_forward_is_pure_and_train_updates_stats() {
        let mut m = EncoderModel::init(EncoderConfig { channels: vec![2, 3], kernel_size: 5, embed_dim: 4 }, 4).unwrap();
        let clips = rand_vecs(3, 16, 1);
        let before = m.clone();
        m.embed(&clips).unwrap();
        m.forward_batch_stats(&clips).unwrap();
        assert_eq!(m, before);
        m.forward_train(&clips).unwrap();
        assert_ne!(m.buffers()[0].1, before.buffers()[0].1);
    }

    /// One block, evaluated with direct loops over taps and explicit padding.
    fn one_block_oracle(m: &EncoderModel, clips: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let blk = &m.blocks[0];
        let c = m.config.channels[0];
        let k = m.config.kernel_size;
        let t = clips[0].len();
        let to = t.div_ceil(2);
        let p = (k / 2) as isize;
        let tap = |x: &[f64], len: usize, idx: isize| if idx >= 0 && (idx as usize) < len { x[idx as usize] } else { 0.0 };
        let bn_train = |a: &mut [Vec<Vec<f64>>], bn: &BatchNorm| {
            for ch in 0..c {
                let vals: Vec<f64> = a.iter().flat_map(|x| x[ch].clone()).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                for x in a.iter_mut() {
                    for v in x[ch].iter_mut() {
                        *v = (bn.gamma.data[ch] * (*v - mean) / (var + BN_EPS).sqrt() + bn.beta.data[ch]).max(0.0);
                    }
                }
            }
        };
        let mut r1: Vec<Vec<Vec<f64>>> = clips
            .iter()
            .map(|x| {
                (0..c)
                    .map(|o| (0..to).map(|s| (0..k).map(|j| blk.conv1.data[o * k + j] * tap(x, t, 2 * s as isize + j as isize - p)).sum()).collect())
                    .collect()
            })
            .collect();
        bn_train(&mut r1, &blk.bn1);
        let mut r2: Vec<Vec<Vec<f64>>> = r1
            .iter()
            .map(|x| {
                (0..c)
                    .map(|o| {
                        (0..to)
                            .map(|s| {
                                (0..c)
                                    .map(|i| (0..k).map(|j| blk.conv2.data[(o * c + i) * k + j] * tap(&x[i], to, s as isize + j as isize - p)).sum::<f64>())
                                    .sum()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        bn_train(&mut r2, &blk.bn2);
        clips
            .iter()
            .zip(&r2)
            .map(|(x, r)| {
                let hbar: Vec<f64> = (0..c).map(|o| (0..to).map(|s| r[o][s] + blk.proj.data[o] * x[2 * s]).sum::<f64>() / to as f64).collect();
                (0..m.config.embed_dim)
                    .map(|e| m.out_b.data[e] + (0..c).map(|o| m.out_w.data[e * c + o] * hbar[o]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn one_block_matches_direct_oracle() {
        let cfg = EncoderConfig { channels: vec![3], kernel_size: 5, embed_dim: 4 };
        let mut m = EncoderModel::init(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let blk = &mut m.blocks[0];
        for b in [&mut blk.bn1, &mut blk.bn2] {
            b.gamma.data.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
            b.beta.data.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        m.out_b.data = vec![0.1, -0.2, 0.0, 0.3];
        let clips = rand_vecs(3, 21, 2);
        let (got, _) = m.forward_batch_stats(&clips).unwrap();
        let want = one_block_oracle(&m, &clips);
        for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn nt_xent_single_pair_is_zero() {
        let z = rand_vecs(2, 5, 3);
        assert_eq!(nt_xent(&z, &[1, 0], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn nt_xent_identical_embeddings() {
        let z = vec![vec![0.3, -1.2, 0.5]; 128];
        let l = nt_xent(&z, &adjacent_pairs(128), 0.5).unwrap();
        assert!((l - 127f64.ln()).abs() < 1e-6, "{l}");
    }

    #[test]
    fn nt_xent_matches_direct_sum() {
        for seed in 0..5 {
            let z = rand_vecs(8, 6, seed);
            let pair = [3, 5, 7, 0, 6, 1, 4, 2];
            let a = nt_xent(&z, &pair, 0.3).unwrap();
            let b = nt_xent_oracle(&z, &pair, 0.3);
            assert!((a - b).abs() < 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn nt_xent_scale_invariant() {
        let z = rand_vecs(6, 4, 11);
        let scaled: Vec<Vec<f64>> = z.iter().map(|v| v.iter().map(|x| x * 37.5).collect()).collect();
        let p = adjacent_pairs(6);
        assert!((nt_xent(&z, &p, 0.5).unwrap() - nt_xent(&scaled, &p, 0.5).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn nt_xent_rejects_bad_pairings() {
        let z = rand_vecs(4, 3, 0);
        assert!(matches!(nt_xent(&z, &[1, 0, 2, 3], 0.5), Err(Error::Pairing(_))));
        assert!(matches!(nt_xent(&z, &[1, 2, 3, 0], 0.5), Err(Error::Pairing(_))));
        assert!(matches!(nt_xent(&z[..3], &[1, 0, 2], 0.5), Err(Error::Pairing(_))));
        assert!(matches!(nt_xent(&z, &[1, 0, 3, 2], 0.0), Err(Error::Value(_))));
    }

    #[test]
    fn knn_exact_match_and_tie_rule() {
        let refs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let labels = [0, 1, 2];
        assert_eq!(knn_classify(&refs, &labels, &[vec![0.0, 2.0]], 1).unwrap(), vec![1]);
        // nearest is class 0, second nearest class 1: one vote each
        let q = vec![1.0, 0.8];
        assert_eq!(knn_classify(&refs, &labels, &[q], 2).unwrap(), vec![0]);
        assert!(matches!(knn_classify(&[], &[], &[vec![1.0]], 1), Err(Error::Empty(_))));
    }

    #[test]
    fn knn_separates_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut sample = |center: [f64; 3]| -> Vec<f64> { center.iter().map(|c| c + noise.sample(&mut rng)).collect() };
        let (a, b) = ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        let mut refs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            refs.push(sample(if i % 2 == 0 { a } else { b }));
            labels.push(i % 2);
        }
        let queries: Vec<Vec<f64>> = (0..20).map(|i| sample(if i % 2 == 0 { a } else { b })).collect();
        let pred = knn_classify(&refs, &labels, &queries, 5).unwrap();
        assert!(pred.iter().enumerate().all(|(i, &p)| p == i % 2));
    }

    #[test]
    fn mlp_param_count() {
        assert_eq!(Mlp::init(64, 100, 13, 0).param_count(), 64 * 100 + 100 + 100 * 13 + 13);
        assert_eq!(Mlp::init(64, 100, 13, 0).param_count(), 7813);
    }

    #[test]
    fn mlp_fits_separable_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..100 {
            let label = i % 2;
            let mut v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            v[0] = if label == 0 { 1.0 + v[0].abs() } else { -1.0 - v[0].abs() };
            x.push(v);
            y.push(label);
        }
        let mlp = mlp_train(&x, &y, &MlpTrainConfig::default()).unwrap();
        let pred = mlp_predict(&mlp, &x).unwrap();
        let acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
        assert!(acc >= 0.99, "{acc}");
        let mut perm: Vec<usize> = (0..x.len()).collect();
        perm.reverse();
        let xp: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
        let pp = mlp_predict(&mlp, &xp).unwrap();
        assert!(perm.iter().zip(&pp).all(|(&i, &p)| pred[i] == p));
    }

    #[test]
    fn mlp_single_class_rejected() {
        let x = rand_vecs(4, 3, 0);
        assert!(matches!(mlp_train(&x, &[2, 2, 2, 2], &MlpTrainConfig::default()), Err(Error::DegenerateLabels(1))));
    }

    #[test]
    fn embeddings_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.csv");
        write_embeddings_csv(&p, &[("a".into(), vec![1.0, 2.5]), ("b".into(), vec![-1.0, 0.0])]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "clip_id,e0,e1\na,1,2.5\nb,-1,0\n");
    }
}
