//! 1-D convolution kernels (channel-major buffers) and their adjoints.

/// Geometry of a 1-D convolution. Weights are `out_ch x in_ch x kernel`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeom {
    /// Unpadded, stride 1.
    pub fn valid(in_ch: usize, out_ch: usize, kernel: usize, dilation: usize) -> Self {
        ConvGeom { in_ch, out_ch, kernel, stride: 1, dilation, pad_left: 0, pad_right: 0 }
    }

    /// Symmetric `kernel / 2` padding with the given stride.
    pub fn same(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        let p = kernel / 2;
        ConvGeom { in_ch, out_ch, kernel, stride, dilation: 1, pad_left: p, pad_right: p }
    }

    pub fn span(&self) -> usize {
        (self.kernel - 1) * self.dilation + 1
    }

    pub fn out_len(&self, len: usize) -> usize {
        let padded = len + self.pad_left + self.pad_right;
        if padded < self.span() {
            0
        } else {
            (padded - self.span()) / self.stride + 1
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel
    }

    /// Output positions `t` whose tap at offset `off` reads a valid input
    /// index, i.e. `0 <= t*stride + off - pad_left < len`.
    fn valid_range(&self, off: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if off >= self.pad_left { 0 } else { (self.pad_left - off).div_ceil(s) };
        // t*s + off - pad_left <= len - 1
        let hi = if len + self.pad_left < off + 1 {
            0
        } else {
            ((len + self.pad_left - off - 1) / s + 1).min(out_len)
        };
        (lo.min(hi), hi)
    }
}

/// `y[o,t] = b[o] + sum_{i,k} w[o,i,k] * x[i, t*stride + k*dilation - pad_left]`.
pub fn forward(x: &[f64], len: usize, w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    debug_assert_eq!(x.len(), g.in_ch * len);
    debug_assert_eq!(w.len(), g.weight_len());
    let out_len = g.out_len(len);
    let mut y = vec![0.0; g.out_ch * out_len];
    for o in 0..g.out_ch {
        let row = &mut y[o * out_len..(o + 1) * out_len];
        if let Some(b) = bias {
            row.iter_mut().for_each(|v| *v = b[o]);
        }
        for i in 0..g.in_ch {
            let xi = &x[i * len..(i + 1) * len];
            for k in 0..g.kernel {
                let wv = w[(o * g.in_ch + i) * g.kernel + k];
                if wv == 0.0 {
                    continue;
                }
                let off = k * g.dilation;
                let (lo, hi) = g.valid_range(off, len, out_len);
                if lo >= hi {
                    continue;
                }
                if g.stride == 1 {
                    let start = lo + off - g.pad_left;
                    for (yv, xv) in row[lo..hi].iter_mut().zip(&xi[start..start + (hi - lo)]) {
                        *yv += wv * xv;
                    }
                } else {
                    for (t, yv) in row.iter_mut().enumerate().take(hi).skip(lo) {
                        *yv += wv * xi[t * g.stride + off - g.pad_left];
                    }
                }
            }
        }
    }
    y
}

/// Accumulates weight, bias and (optionally) input gradients for [`forward`].
pub fn backward(
    x: &[f64],
    len: usize,
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    mut dx: Option<&mut [f64]>,
) {
    let out_len = g.out_len(len);
    debug_assert_eq!(dy.len(), g.out_ch * out_len);
    if let Some(db) = db {
        for o in 0..g.out_ch {
            db[o] += dy[o * out_len..(o + 1) * out_len].iter().sum::<f64>();
        }
    }
    for o in 0..g.out_ch {
        let dyo = &dy[o * out_len..(o + 1) * out_len];
        for i in 0..g.in_ch {
            let xi = &x[i * len..(i + 1) * len];
            for k in 0..g.kernel {
                let widx = (o * g.in_ch + i) * g.kernel + k;
                let off = k * g.dilation;
                let (lo, hi) = g.valid_range(off, len, out_len);
                if lo >= hi {
                    continue;
                }
                if g.stride == 1 {
                    let start = lo + off - g.pad_left;
                    let xs = &xi[start..start + (hi - lo)];
                    dw[widx] += dyo[lo..hi].iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = w[widx];
                        let dxi = &mut dx[i * len + start..i * len + start + (hi - lo)];
                        for (d, gy) in dxi.iter_mut().zip(&dyo[lo..hi]) {
                            *d += wv * gy;
                        }
                    }
                } else {
                    let mut acc = 0.0;
                    for t in lo..hi {
                        acc += dyo[t] * xi[t * g.stride + off - g.pad_left];
                    }
                    dw[widx] += acc;
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = w[widx];
                        for t in lo..hi {
                            dx[i * len + t * g.stride + off - g.pad_left] += wv * dyo[t];
                        }
                    }
                }
            }
        }
    }
}
