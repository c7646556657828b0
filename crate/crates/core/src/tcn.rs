//! One-to-many TCN conditioned by FiLM from a learnable device-embedding table.
//!
//! Each layer: causal dilated conv -> FiLM (per-channel gamma, beta produced
//! from the device embedding by that layer's affine adaptor) -> PReLU ->
//! plus a 1x1 projection of the layer input. A 1x1 head maps the last layer
//! to one output channel. Dilations restart at 1 in every block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{GradSet, Parameterized, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcnConfig {
    pub n_blocks: usize,
    pub layers_per_block: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub dilation_growth: usize,
    pub embed_dim: usize,
    pub n_devices: usize,
}

impl TcnConfig {
    /// Two blocks of eight layers, 16 channels, kernel 3, dilation growth 2.
    pub fn reference(embed_dim: usize, n_devices: usize) -> Self {
        TcnConfig { n_blocks: 2, layers_per_block: 8, channels: 16, kernel_size: 3, dilation_growth: 2, embed_dim, n_devices }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_blocks", self.n_blocks),
            ("layers_per_block", self.layers_per_block),
            ("channels", self.channels),
            ("kernel_size", self.kernel_size),
            ("dilation_growth", self.dilation_growth),
            ("embed_dim", self.embed_dim),
            ("n_devices", self.n_devices),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Value(format!("tcn {name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.n_blocks * self.layers_per_block
    }

    /// Dilation of global layer index `layer`: `D^(layer mod L)`.
    pub fn dilation(&self, layer: usize) -> usize {
        self.dilation_growth.pow((layer % self.layers_per_block) as u32)
    }

    fn geom(&self, layer: usize) -> ConvGeom {
        let cin = if layer == 0 { 1 } else { self.channels };
        ConvGeom::valid(cin, self.channels, self.kernel_size, self.dilation(layer))
    }

    /// Samples of left context layer `layer` needs.
    pub fn context(&self, layer: usize) -> usize {
        (self.kernel_size - 1) * self.dilation(layer)
    }
}

/// `1 + n_blocks * (K - 1) * sum_{l<L} D^l`.
pub fn receptive_field(cfg: &TcnConfig) -> usize {
    let per_block: usize = (0..cfg.layers_per_block).map(|l| cfg.dilation_growth.pow(l as u32)).sum();
    1 + cfg.n_blocks * (cfg.kernel_size - 1) * per_block
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcnLayer {
    /// `C x C_in x K`
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    /// `2C x E`; rows `0..C` produce gamma, `C..2C` beta.
    pub film_w: Tensor,
    pub film_b: Tensor,
    pub prelu: Tensor,
    /// `C x C_in`
    pub res_w: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcnModel {
    pub config: TcnConfig,
    pub layers: Vec<TcnLayer>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    /// `M x E`, shared by every layer's adaptor.
    pub embeddings: Tensor,
    generation: u64,
}

/// Per-channel affine modulation `gamma[c] * x[c, t] + beta[c]` of a `C x T`
/// buffer.
pub fn film_apply(features: &[f64], channels: usize, gamma: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    if gamma.len() != channels || beta.len() != channels || channels == 0 || features.len() % channels != 0 {
        return Err(Error::Shape(format!(
            "film: {} features, {channels} channels, gamma {}, beta {}",
            features.len(),
            gamma.len(),
            beta.len()
        )));
    }
    let t = features.len() / channels;
    Ok(features.chunks(t).enumerate().flat_map(|(c, row)| row.iter().map(move |v| gamma[c] * v + beta[c])).collect())
}

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

impl TcnModel {
    /// All-zero parameters of the right shapes.
    pub fn zeros(config: TcnConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let e = config.embed_dim;
        let layers = (0..config.n_layers())
            .map(|l| {
                let cin = if l == 0 { 1 } else { c };
                TcnLayer {
                    conv_w: Tensor::zeros(&[c, cin, config.kernel_size]),
                    conv_b: Tensor::zeros(&[c]),
                    film_w: Tensor::zeros(&[2 * c, e]),
                    film_b: Tensor::zeros(&[2 * c]),
                    prelu: Tensor::zeros(&[c]),
                    res_w: Tensor::zeros(&[c, cin]),
                }
            })
            .collect();
        Ok(TcnModel {
            config,
            layers,
            head_w: Tensor::zeros(&[c]),
            head_b: Tensor::zeros(&[1]),
            embeddings: Tensor::zeros(&[config.n_devices, e]),
            generation: 0,
        })
    }

    /// Random initialization; embeddings are `N(0, 0.1^2)`, FiLM starts near
    /// the identity (gamma ~ 1, beta ~ 0), PReLU slopes at 0.25.
    pub fn init(config: TcnConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let k = config.kernel_size;
        for layer in m.layers.iter_mut() {
            let cin = layer.res_w.shape[1];
            layer.conv_w.data = normal(&mut rng, c * cin * k, 0.5 / ((cin * k) as f64).sqrt());
            layer.film_w.data = normal(&mut rng, 2 * c * config.embed_dim, 0.1 / (config.embed_dim as f64).sqrt());
            for (j, v) in layer.film_b.data.iter_mut().enumerate() {
                *v = if j < c { 1.0 } else { 0.0 };
            }
            layer.prelu.data.iter_mut().for_each(|v| *v = 0.25);
            layer.res_w.data = normal(&mut rng, c * cin, 1.0 / (cin as f64).sqrt());
        }
        m.head_w.data = normal(&mut rng, c, 1.0 / (c as f64).sqrt());
        m.embeddings.data = normal(&mut rng, config.n_devices * config.embed_dim, 0.1);
        m.snap_to_f32();
        Ok(m)
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Row `device_index` of the embedding table.
    pub fn embedding_lookup(&self, device_index: usize) -> Result<Vec<f64>> {
        let (m, e) = (self.config.n_devices, self.config.embed_dim);
        if device_index >= m {
            return Err(Error::DeviceIndex { index: device_index, count: m });
        }
        Ok(self.embeddings.data[device_index * e..(device_index + 1) * e].to_vec())
    }

    /// Copy of the model with `embedding` appended as a new device row.
    pub fn with_enrolled(&self, embedding: &[f64]) -> Result<Self> {
        if embedding.len() != self.config.embed_dim {
            return Err(Error::Shape(format!("embedding has {} values, expected {}", embedding.len(), self.config.embed_dim)));
        }
        let mut m = self.clone();
        m.config.n_devices += 1;
        m.embeddings.shape[0] += 1;
        m.embeddings.data.extend_from_slice(embedding);
        Ok(m)
    }

    fn film_params(&self, layer: &TcnLayer, embedding: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let c = self.config.channels;
        let e = self.config.embed_dim;
        let gb: Vec<f64> = (0..2 * c)
            .map(|j| {
                let row = &layer.film_w.data[j * e..(j + 1) * e];
                layer.film_b.data[j] + row.iter().zip(embedding).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        (gb[..c].to_vec(), gb[c..].to_vec())
    }

    /// Runs layer `l` on `xpad` (`C_in x (ctx + t)`, left context first) and
    /// returns the conv output `u` and layer output `y`, both `C x t`.
    fn layer_forward(&self, l: usize, xpad: &[f64], t: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let layer = &self.layers[l];
        let g = self.config.geom(l);
        let ctx = self.config.context(l);
        let plen = ctx + t;
        let u = conv::forward(xpad, plen, &layer.conv_w.data, Some(&layer.conv_b.data), &g);
        let c = self.config.channels;
        let mut y = vec![0.0; c * t];
        for o in 0..c {
            let (gm, bt, alpha) = (gamma[o], beta[o], layer.prelu.data[o]);
            let yrow = &mut y[o * t..(o + 1) * t];
            for (yv, &uv) in yrow.iter_mut().zip(&u[o * t..(o + 1) * t]) {
                let v = gm * uv + bt;
                *yv = if v > 0.0 { v } else { alpha * v };
            }
            for i in 0..g.in_ch {
                let r = layer.res_w.data[o * g.in_ch + i];
                let xi = &xpad[i * plen + ctx..(i + 1) * plen];
                for (yv, xv) in yrow.iter_mut().zip(xi) {
                    *yv += r * xv;
                }
            }
        }
        (u, y)
    }

    fn head(&self, y: &[f64], t: usize) -> Vec<f64> {
        let mut out = vec![self.head_b.data[0]; t];
        for (c, &w) in self.head_w.data.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(&y[c * t..(c + 1) * t]) {
                *o += w * v;
            }
        }
        out
    }

    fn check_embedding(&self, embedding: &[f64]) -> Result<()> {
        if embedding.len() != self.config.embed_dim {
            return Err(Error::Shape(format!("embedding has {} values, expected {}", embedding.len(), self.config.embed_dim)));
        }
        Ok(())
    }

    /// Forward pass conditioned on an explicit embedding vector.
    pub fn forward_with_embedding(&self, audio: &[f64], embedding: &[f64]) -> Result<Vec<f64>> {
        self.check_embedding(embedding)?;
        Ok(self.run(audio, embedding, None))
    }

    /// Forward pass conditioned on device `device_index`.
    pub fn forward(&self, audio: &[f64], device_index: usize) -> Result<Vec<f64>> {
        let e = self.embedding_lookup(device_index)?;
        Ok(self.run(audio, &e, None))
    }

    /// Train-mode forward: also returns the activation cache.
    pub fn forward_train(&self, audio: &[f64], device_index: Option<usize>, embedding: &[f64]) -> Result<(Vec<f64>, TcnCache)> {
        self.check_embedding(embedding)?;
        if let Some(d) = device_index {
            self.embedding_lookup(d)?;
        }
        let mut cache = TcnCache {
            generation: self.generation,
            device_index,
            embedding: embedding.to_vec(),
            len: audio.len(),
            inputs: Vec::with_capacity(self.layers.len()),
            conv_out: Vec::with_capacity(self.layers.len()),
            film: Vec::with_capacity(self.layers.len()),
            last: Vec::new(),
        };
        let out = self.run(audio, embedding, Some(&mut cache));
        Ok((out, cache))
    }

    fn run(&self, audio: &[f64], embedding: &[f64], mut cache: Option<&mut TcnCache>) -> Vec<f64> {
        let t = audio.len();
        let mut x = audio.to_vec();
        for l in 0..self.layers.len() {
            let (gamma, beta) = self.film_params(&self.layers[l], embedding);
            let ctx = self.config.context(l);
            let cin = self.config.geom(l).in_ch;
            let mut xpad = vec![0.0; cin * (ctx + t)];
            for i in 0..cin {
                xpad[i * (ctx + t) + ctx..(i + 1) * (ctx + t)].copy_from_slice(&x[i * t..(i + 1) * t]);
            }
            let (u, y) = self.layer_forward(l, &xpad, t, &gamma, &beta);
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(xpad);
                c.conv_out.push(u);
                c.film.push((gamma, beta));
            }
            x = y;
        }
        let out = self.head(&x, t);
        if let Some(c) = cache {
            c.last = x;
        }
        out
    }

    /// Exact reverse-mode gradients of `sum(upstream * output)`.
    pub fn backward(&self, cache: &TcnCache, upstream: &[f64]) -> Result<TcnGrads> {
        if cache.generation != self.generation {
            return Err(Error::Cache("cache was produced before the last parameter update".into()));
        }
        if cache.inputs.len() != self.layers.len() || cache.len != upstream.len() {
            return Err(Error::Cache(format!(
                "cache holds {} layers over {} samples; model has {} layers, upstream {} samples",
                cache.inputs.len(),
                cache.len,
                self.layers.len(),
                upstream.len()
            )));
        }
        let t = cache.len;
        let c = self.config.channels;
        let e = self.config.embed_dim;
        let mut grads = self.zeros_like();
        let mut d_emb = vec![0.0; e];

        grads.head_b.data[0] = upstream.iter().sum();
        let mut dy = vec![0.0; c * t];
        for ch in 0..c {
            let yrow = &cache.last[ch * t..(ch + 1) * t];
            grads.head_w.data[ch] = yrow.iter().zip(upstream).map(|(a, b)| a * b).sum();
            let w = self.head_w.data[ch];
            for (d, u) in dy[ch * t..(ch + 1) * t].iter_mut().zip(upstream) {
                *d = w * u;
            }
        }

        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let gl = &mut grads.layers[l];
            let g = self.config.geom(l);
            let ctx = self.config.context(l);
            let plen = ctx + t;
            let xpad = &cache.inputs[l];
            let u = &cache.conv_out[l];
            let (gamma, beta) = &cache.film[l];
            let mut du = vec![0.0; c * t];
            let mut dgb = vec![0.0; 2 * c];
            for o in 0..c {
                let alpha = layer.prelu.data[o];
                let (mut dg, mut dbeta, mut dalpha) = (0.0, 0.0, 0.0);
                for ti in 0..t {
                    let uv = u[o * t + ti];
                    let v = gamma[o] * uv + beta[o];
                    let da = dy[o * t + ti];
                    let dv = if v > 0.0 {
                        da
                    } else {
                        dalpha += da * v;
                        alpha * da
                    };
                    dg += dv * uv;
                    dbeta += dv;
                    du[o * t + ti] = gamma[o] * dv;
                }
                gl.prelu.data[o] += dalpha;
                dgb[o] = dg;
                dgb[c + o] = dbeta;
            }
            for (j, &dj) in dgb.iter().enumerate() {
                gl.film_b.data[j] += dj;
                let wrow = &layer.film_w.data[j * e..(j + 1) * e];
                for k in 0..e {
                    gl.film_w.data[j * e + k] += dj * cache.embedding[k];
                    d_emb[k] += wrow[k] * dj;
                }
            }
            let mut dxpad = vec![0.0; g.in_ch * plen];
            conv::backward(xpad, plen, &layer.conv_w.data, &du, &g, &mut gl.conv_w.data, Some(&mut gl.conv_b.data), Some(&mut dxpad));
            // residual 1x1 projection
            for o in 0..c {
                let dyo = &dy[o * t..(o + 1) * t];
                for i in 0..g.in_ch {
                    let xi = &xpad[i * plen + ctx..(i + 1) * plen];
                    gl.res_w.data[o * g.in_ch + i] += dyo.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                    let r = layer.res_w.data[o * g.in_ch + i];
                    for (d, gy) in dxpad[i * plen + ctx..(i + 1) * plen].iter_mut().zip(dyo) {
                        *d += r * gy;
                    }
                }
            }
            dy = (0..g.in_ch).flat_map(|i| dxpad[i * plen + ctx..(i + 1) * plen].to_vec()).collect();
        }

        if let Some(d) = cache.device_index {
            grads.embeddings.data[d * e..(d + 1) * e].copy_from_slice(&d_emb);
        }
        Ok(TcnGrads { params: GradSet::from_model(&grads), embedding: d_emb, input: dy })
    }

    /// A same-shaped model with all parameters zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.config).expect("config already validated");
        z.generation = self.generation;
        z
    }

    /// Streaming renderer with carried left context.
    pub fn stream(&self, device_index: usize) -> Result<TcnStream<'_>> {
        let embedding = self.embedding_lookup(device_index)?;
        Ok(self.stream_with_embedding(embedding))
    }

    pub fn stream_with_embedding(&self, embedding: Vec<f64>) -> TcnStream<'_> {
        let film = self.layers.iter().map(|l| self.film_params(l, &embedding)).collect();
        let history = (0..self.layers.len())
            .map(|l| vec![0.0; self.config.geom(l).in_ch * self.config.context(l)])
            .collect();
        TcnStream { model: self, film, history }
    }
}

/// Activations recorded by [`TcnModel::forward_train`].
#[derive(Debug, Clone)]
pub struct TcnCache {
    generation: u64,
    device_index: Option<usize>,
    embedding: Vec<f64>,
    len: usize,
    inputs: Vec<Vec<f64>>,
    conv_out: Vec<Vec<f64>>,
    film: Vec<(Vec<f64>, Vec<f64>)>,
    last: Vec<f64>,
}

impl TcnCache {
    /// Sign pattern of every PReLU input; used to detect kinks in finite
    /// difference checks.
    pub fn prelu_pattern(&self) -> Vec<bool> {
        self.conv_out
            .iter()
            .zip(&self.film)
            .flat_map(|(u, (gamma, beta))| {
                let t = self.len;
                u.iter().enumerate().map(move |(i, &uv)| gamma[i / t] * uv + beta[i / t] > 0.0)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TcnGrads {
    /// Gradients for every named parameter. The embedding-table entry is
    /// non-zero only in the row of the cached device index.
    pub params: GradSet,
    /// Gradient with respect to the conditioning embedding vector.
    pub embedding: Vec<f64>,
    /// Gradient with respect to the input audio.
    pub input: Vec<f64>,
}

/// Block-wise renderer; output is identical to a single full forward pass.
pub struct TcnStream<'a> {
    model: &'a TcnModel,
    film: Vec<(Vec<f64>, Vec<f64>)>,
    history: Vec<Vec<f64>>,
}

impl TcnStream<'_> {
    pub fn process(&mut self, block: &[f64]) -> Vec<f64> {
        let t = block.len();
        if t == 0 {
            return Vec::new();
        }
        let m = self.model;
        let mut x = block.to_vec();
        for l in 0..m.layers.len() {
            let ctx = m.config.context(l);
            let cin = m.config.geom(l).in_ch;
            let plen = ctx + t;
            let mut xpad = vec![0.0; cin * plen];
            for i in 0..cin {
                xpad[i * plen..i * plen + ctx].copy_from_slice(&self.history[l][i * ctx..(i + 1) * ctx]);
                xpad[i * plen + ctx..(i + 1) * plen].copy_from_slice(&x[i * t..(i + 1) * t]);
            }
            let (gamma, beta) = &self.film[l];
            let (_, y) = m.layer_forward(l, &xpad, t, gamma, beta);
            for i in 0..cin {
                self.history[l][i * ctx..(i + 1) * ctx].copy_from_slice(&xpad[(i + 1) * plen - ctx..(i + 1) * plen]);
            }
            x = y;
        }
        m.head(&x, t)
    }
}

impl Parameterized for TcnModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.conv_w"), &l.conv_w));
            out.push((format!("layers.{i}.conv_b"), &l.conv_b));
            out.push((format!("layers.{i}.film_w"), &l.film_w));
            out.push((format!("layers.{i}.film_b"), &l.film_b));
            out.push((format!("layers.{i}.prelu"), &l.prelu));
            out.push((format!("layers.{i}.res_w"), &l.res_w));
        }
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out.push(("embeddings".into(), &self.embeddings));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.generation += 1;
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.conv_w"), &mut l.conv_w));
            out.push((format!("layers.{i}.conv_b"), &mut l.conv_b));
            out.push((format!("layers.{i}.film_w"), &mut l.film_w));
            out.push((format!("layers.{i}.film_b"), &mut l.film_b));
            out.push((format!("layers.{i}.prelu"), &mut l.prelu));
            out.push((format!("layers.{i}.res_w"), &mut l.res_w));
        }
        out.push(("head_w".into(), &mut self.head_w));
        out.push(("head_b".into(), &mut self.head_b));
        out.push(("embeddings".into(), &mut self.embeddings));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n_devices: usize) -> TcnConfig {
        TcnConfig { n_blocks: 1, layers_per_block: 3, channels: 3, kernel_size: 3, dilation_growth: 2, embed_dim: 4, n_devices }
    }

    fn signal(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.37).sin() * 0.5 + (i as f64 * 0.051).cos() * 0.2).collect()
    }

    #[test]
    fn receptive_field_formula() {
        assert_eq!(receptive_field(&TcnConfig::reference(16, 4)), 1021);
        let single = TcnConfig { n_blocks: 1, layers_per_block: 1, channels: 4, kernel_size: 3, dilation_growth: 1, embed_dim: 1, n_devices: 1 };
        assert_eq!(receptive_field(&single), 3);
        let pointwise = TcnConfig { kernel_size: 1, ..TcnConfig::reference(8, 2) };
        assert_eq!(receptive_field(&pointwise), 1);
    }

    #[test]
    fn dilation_resets_per_block() {
        let c = TcnConfig::reference(4, 1);
        let d: Vec<_> = (0..16).map(|l| c.dilation(l)).collect();
        assert_eq!(&d[..8], &[1, 2, 4, 8, 16, 32, 64, 128]);
        assert_eq!(&d[8..], &d[..8]);
    }

    #[test]
    fn film_cases() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(film_apply(&x, 2, &[1.0, 1.0], &[0.0, 0.0]).unwrap(), x);
        assert_eq!(film_apply(&x, 2, &[0.0, 0.0], &[0.5, -1.0]).unwrap(), vec![0.5, 0.5, 0.5, -1.0, -1.0, -1.0]);
        let out = film_apply(&x, 2, &[2.0, -0.5], &[0.25, 3.0]).unwrap();
        let want = [2.25, 4.25, 6.25, 1.0, 0.5, 0.0];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(film_apply(&x, 2, &[1.0], &[0.0, 0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = TcnModel::zeros(tiny(2)).unwrap();
        assert!(m.forward(&signal(50), 1).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lookup_and_bounds() {
        let m = TcnModel::init(tiny(3), 1).unwrap();
        assert_eq!(m.embedding_lookup(0).unwrap(), m.embeddings.data[..4].to_vec());
        assert!(matches!(m.embedding_lookup(3), Err(Error::DeviceIndex { index: 3, count: 3 })));
        assert!(matches!(m.forward(&signal(8), 3), Err(Error::DeviceIndex { .. })));
    }

    #[test]
    fn devices_differ_through_film() {
        let m = TcnModel::init(tiny(2), 2).unwrap();
        let x = signal(200);
        assert_ne!(m.forward(&x, 0).unwrap(), m.forward(&x, 1).unwrap());
    }

    #[test]
    fn causal_and_bounded_impulse_response() {
        let cfg = TcnConfig { n_blocks: 2, layers_per_block: 3, channels: 2, kernel_size: 3, dilation_growth: 2, embed_dim: 2, n_devices: 1 };
        let m = TcnModel::init(cfg, 3).unwrap();
        let rf = receptive_field(&cfg);
        let n = 100;
        let base = m.forward(&vec![0.0; n], 0).unwrap();
        let mut x = vec![0.0; n];
        x[10] = 1.0;
        let y = m.forward(&x, 0).unwrap();
        for t in 0..n {
            let changed = (y[t] - base[t]).abs() > 0.0;
            if t < 10 || t >= 10 + rf {
                assert!(!changed, "t={t}");
            }
        }
        assert!((y[10 + rf - 1] - base[10 + rf - 1]).abs() > 0.0);
    }

    #[test]
    fn streaming_matches_full_forward_bitwise() {
        let m = TcnModel::init(tiny(2), 4).unwrap();
        let x = signal(301);
        let full = m.forward(&x, 1).unwrap();
        for block in [1, 7, 64, 301] {
            let mut s = m.stream(1).unwrap();
            let out: Vec<f64> = x.chunks(block).flat_map(|b| s.process(b)).collect();
            assert_eq!(out, full, "block {block}");
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut m = TcnModel::init(tiny(1), 5).unwrap();
        let e = m.embedding_lookup(0).unwrap();
        let (y, cache) = m.forward_train(&signal(20), Some(0), &e).unwrap();
        m.params_mut()[0].1.data[0] += 1.0;
        assert!(matches!(m.backward(&cache, &y), Err(Error::Cache(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let m = TcnModel::init(tiny(2), 6).unwrap();
        let e = m.embedding_lookup(1).unwrap();
        let (_, cache) = m.forward_train(&signal(20), Some(1), &e).unwrap();
        let g = m.backward(&cache, &[0.0; 20]).unwrap();
        assert!(g.params.is_zero());
        assert!(g.embedding.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unused_rows_get_no_gradient() {
        let m = TcnModel::init(tiny(3), 7).unwrap();
        let e = m.embedding_lookup(2).unwrap();
        let (y, cache) = m.forward_train(&signal(30), Some(2), &e).unwrap();
        let g = m.backward(&cache, &y).unwrap();
        let emb = g.params.get("embeddings").unwrap();
        assert!(emb.data[..8].iter().all(|&v| v == 0.0));
        assert!(emb.data[8..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_path_weights_give_zero_output() {
        let mut m = TcnModel::init(tiny(2), 9).unwrap();
        for layer in m.layers.iter_mut() {
            layer.conv_w.data.fill(0.0);
            layer.conv_b.data.fill(0.0);
            layer.res_w.data.fill(0.0);
        }
        m.head_w.data.fill(0.0);
        m.head_b.data.fill(0.0);
        assert!(m.forward(&signal(40), 0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interleaved_streams_do_not_share_state() {
        let m = TcnModel::init(tiny(2), 10).unwrap();
        let (xa, xb) = (signal(120), signal(200)[80..].to_vec());
        let (mut a, mut b) = (m.stream(0).unwrap(), m.stream(1).unwrap());
        let mut ya = Vec::new();
        let mut yb = Vec::new();
        for (ca, cb) in xa.chunks(16).zip(xb.chunks(16)) {
            ya.extend(a.process(ca));
            yb.extend(b.process(cb));
        }
        assert_eq!(ya, m.forward(&xa, 0).unwrap());
        assert_eq!(yb, m.forward(&xb, 1).unwrap());
    }

    #[test]
    fn every_film_layer_carries_embedding_gradient() {
        let base = TcnModel::init(tiny(1), 11).unwrap();
        let x = signal(40);
        let emb_grad = |m: &TcnModel| {
            let e = m.embedding_lookup(0).unwrap();
            let (y, cache) = m.forward_train(&x, Some(0), &e).unwrap();
            m.backward(&cache, &y).unwrap().embedding
        };
        let n = base.layers.len();
        for keep in 0..n {
            let mut m = base.clone();
            for (l, layer) in m.layers.iter_mut().enumerate() {
                if l != keep {
                    layer.film_w.data.fill(0.0);
                }
            }
            assert!(emb_grad(&m).iter().any(|&v| v != 0.0), "layer {keep}");
        }
        let mut cut = base.clone();
        cut.layers.iter_mut().for_each(|l| l.film_w.data.fill(0.0));
        assert!(emb_grad(&cut).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn enrolled_copy_appends_row() {
        let m = TcnModel::init(tiny(2), 8).unwrap();
        let e = vec![0.5; 4];
        let m2 = m.with_enrolled(&e).unwrap();
        assert_eq!(m2.config.n_devices, 3);
        assert_eq!(m2.embedding_lookup(2).unwrap(), e);
        assert_eq!(m2.embeddings.data[..8], m.embeddings.data[..]);
    }
}
