//! Named dense parameter tensors shared by the trainable models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense tensor of `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }
}

/// A model whose learnable state is a fixed, ordered list of named tensors.
pub trait Parameterized {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rounds every parameter to the nearest `f32`. Trained weights live on
    /// this grid so that checkpoints (stored as `f32`) round-trip exactly.
    fn snap_to_f32(&mut self) {
        for (_, t) in self.params_mut() {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Named gradients, one entry per model parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub entries: Vec<(String, Tensor)>,
}

impl GradSet {
    pub fn from_model<P: Parameterized>(model: &P) -> Self {
        GradSet {
            entries: model.params().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn zeros_for<P: Parameterized>(model: &P) -> Self {
        GradSet {
            entries: model.params().into_iter().map(|(n, t)| (n, t.zeros_like())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Adds `other` into `self`. Names and shapes must match.
    pub fn accumulate(&mut self, other: &GradSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape("gradient sets differ in length".into()));
        }
        for ((na, a), (nb, b)) in self.entries.iter_mut().zip(&other.entries) {
            if na != nb || a.shape != b.shape {
                return Err(Error::Shape(format!("gradient mismatch: {na} vs {nb}")));
            }
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in &mut self.entries {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.data.iter().all(|&v| v == 0.0))
    }

    /// Flattened values in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
    }
}

/// Flattened parameter values in declaration order.
pub fn flatten_params<P: Parameterized>(model: &P) -> Vec<f64> {
    model.params().iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
}

/// Overwrites parameters from a flat vector in declaration order.
pub fn load_flat_params<P: Parameterized>(model: &mut P, flat: &[f64]) -> Result<()> {
    let total = model.param_count();
    if total != flat.len() {
        return Err(Error::Shape(format!("expected {total} values, got {}", flat.len())));
    }
    let mut off = 0;
    for (_, t) in model.params_mut() {
        let n = t.len();
        t.data.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok(())
}

/// Free-standing tensors, for checking loss functions against their inputs.
#[derive(Debug, Clone)]
pub struct Leaves(pub Vec<(String, Tensor)>);

impl Parameterized for Leaves {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.0.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.0.iter_mut().map(|(n, t)| (n.clone(), t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut g = GradSet {
            entries: vec![("a".into(), Tensor::from_vec(&[2], vec![30.0, 40.0]).unwrap())],
        };
        let before = g.clip_global_norm(10.0);
        assert_eq!(before, 50.0);
        assert!((g.global_norm() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn from_vec_checks_len() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }
}
