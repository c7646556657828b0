//! Sample-serial LSTM inference over a [`DeviceModel`].

use crate::error::{Error, Result};
use crate::model_zoo::DeviceModel;
use crate::signal_io::AudioClip;

/// Recurrent state carried between blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f32>,
    pub c: Vec<f32>,
}

pub fn init_state(model: &DeviceModel) -> LstmState {
    LstmState { h: vec![0.0; model.hidden_size], c: vec![0.0; model.hidden_size] }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn check_cond(model: &DeviceModel, cond: Option<f32>) -> Result<()> {
    match (model.is_conditioned(), cond) {
        (true, None) => Err(Error::Conditioning(format!("{} needs a conditioning value", model.name))),
        (false, Some(_)) => Err(Error::Conditioning(format!("{} takes no conditioning value", model.name))),
        (_, Some(c)) if !c.is_finite() => Err(Error::Value(format!("conditioning value {c}"))),
        _ => Ok(()),
    }
}

/// Renders `input` through `model`, continuing from and updating `state`.
///
/// Per sample: `z = W_ih [x, cond] + W_hh h + b_ih + b_hh`, gates
/// `i, f, o = sigmoid`, `g = tanh`, `c = f*c + i*g`, `h = o*tanh(c)`,
/// `y = head . h + head_bias (+ x if skip)`.
pub fn process_block(
    model: &DeviceModel,
    state: &mut LstmState,
    input: &[f32],
    cond: Option<f32>,
) -> Result<Vec<f32>> {
    check_cond(model, cond)?;
    if input.is_empty() {
        return Err(Error::EmptyClip);
    }
    if let Some(bad) = input.iter().find(|v| !v.is_finite()) {
        return Err(Error::Value(format!("non-finite input sample {bad}")));
    }
    let h = model.hidden_size;
    if state.h.len() != h || state.c.len() != h {
        return Err(Error::Shape(format!("state has dimension {} but model hidden_size is {h}", state.h.len())));
    }
    let g4 = 4 * h;
    let in_sz = model.input_size;
    let bias: Vec<f32> = model.bias_ih.iter().zip(&model.bias_hh).map(|(a, b)| a + b).collect();
    // the conditioning column is constant over the block, fold it into the bias
    let (w_x, base): (Vec<f32>, Vec<f32>) = if let Some(c) = cond {
        let wx = (0..g4).map(|r| model.weight_ih[r * in_sz]).collect();
        let b = (0..g4).map(|r| bias[r] + model.weight_ih[r * in_sz + 1] * c).collect();
        (wx, b)
    } else {
        (model.weight_ih.clone(), bias)
    };

    let mut z = vec![0.0f32; g4];
    let mut out = Vec::with_capacity(input.len());
    for &x in input {
        for r in 0..g4 {
            let row = &model.weight_hh[r * h..(r + 1) * h];
            let mut acc = base[r] + w_x[r] * x;
            for (w, hv) in row.iter().zip(&state.h) {
                acc += w * hv;
            }
            z[r] = acc;
        }
        let mut y = model.head_bias;
        for j in 0..h {
            let i_g = sigmoid(z[j]);
            let f_g = sigmoid(z[h + j]);
            let g_g = z[2 * h + j].tanh();
            let o_g = sigmoid(z[3 * h + j]);
            let c = f_g * state.c[j] + i_g * g_g;
            state.c[j] = c;
            let hv = o_g * c.tanh();
            state.h[j] = hv;
            y += model.head_weight[j] * hv;
        }
        if model.skip {
            y += x;
        }
        out.push(y);
    }
    Ok(out)
}

/// Stateless render of a whole clip from a zero state.
pub fn render(model: &DeviceModel, clip: &AudioClip, cond: Option<f32>) -> Result<AudioClip> {
    render_with_warmup(model, clip, cond, 0)
}

/// Like [`render`] but drops the first `warmup_samples` outputs, so the
/// result is `warmup_samples` shorter than the input.
pub fn render_with_warmup(
    model: &DeviceModel,
    clip: &AudioClip,
    cond: Option<f32>,
    warmup_samples: usize,
) -> Result<AudioClip> {
    if warmup_samples >= clip.samples.len() && warmup_samples > 0 {
        return Err(Error::Value(format!(
            "warm-up of {warmup_samples} samples consumes the whole {}-sample clip",
            clip.samples.len()
        )));
    }
    let mut state = init_state(model);
    let mut out = process_block(model, &mut state, &clip.samples, cond)?;
    out.drain(..warmup_samples);
    Ok(AudioClip { samples: out, sample_rate: clip.sample_rate })
}

/// Renders in consecutive blocks of `block` samples, carrying state.
pub fn render_blocked(model: &DeviceModel, input: &[f32], cond: Option<f32>, block: usize) -> Result<Vec<f32>> {
    if block == 0 {
        return Err(Error::Value("block size must be positive".into()));
    }
    check_cond(model, cond)?;
    let mut state = init_state(model);
    let mut out = Vec::with_capacity(input.len());
    for chunk in input.chunks(block) {
        out.extend(process_block(model, &mut state, chunk, cond)?);
    }
    if out.is_empty() {
        return Err(Error::EmptyClip);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h1_model(w: [f32; 4], u: [f32; 4], b: [f32; 4], head: f32, hb: f32) -> DeviceModel {
        let mut m = DeviceModel::zeros("h1", 1, 1, false);
        m.weight_ih = w.to_vec();
        m.weight_hh = u.to_vec();
        m.bias_ih = b.to_vec();
        m.head_weight = vec![head];
        m.head_bias = hb;
        m
    }

    #[test]
    fn zero_state() {
        let s = init_state(&DeviceModel::zeros("a", 1, 40, false));
        assert_eq!(s.h, vec![0.0; 40]);
        assert_eq!(s.c, vec![0.0; 40]);
        let s = init_state(&DeviceModel::zeros("a", 1, 1, false));
        assert_eq!((s.h, s.c), (vec![0.0], vec![0.0]));
    }

    #[test]
    fn zero_weight_skip_is_identity() {
        let m = DeviceModel::zeros("id", 1, 4, true);
        let x = vec![0.3, -0.7, 0.0, 1.0, 0.25];
        let mut s = init_state(&m);
        assert_eq!(process_block(&m, &mut s, &x, None).unwrap(), x);
    }

    #[test]
    fn silence_through_zero_model_is_head_bias() {
        let mut m = DeviceModel::zeros("z", 1, 3, false);
        m.head_bias = 0.125;
        let clip = AudioClip::new(vec![0.0; 16], 8000).unwrap();
        let out = render(&m, &clip, None).unwrap();
        assert!(out.samples.iter().all(|&v| v == 0.125));
        assert_eq!(out.sample_rate, 8000);
    }

    #[test]
    fn single_sample_matches_hand_evaluation() {
        let m = h1_model([0.5, -0.3, 0.8, 0.2], [0.0; 4], [0.1, 0.2, -0.1, 0.05], 1.5, -0.2);
        let x = 0.4f64;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(0.5 * x + 0.1);
        let g = (0.8 * x - 0.1).tanh();
        let o = sig(0.2 * x + 0.05);
        let c = i * g;
        let want = 1.5 * o * c.tanh() - 0.2;
        let mut s = init_state(&m);
        let got = process_block(&m, &mut s, &[x as f32], None).unwrap()[0] as f64;
        assert!((got - want).abs() <= 1e-5 * want.abs(), "{got} vs {want}");
    }

    #[test]
    fn conditioning_mismatch() {
        let plain = DeviceModel::zeros("p", 1, 2, false);
        let cond = DeviceModel::zeros("c", 2, 2, false);
        let mut s = init_state(&plain);
        assert!(matches!(process_block(&plain, &mut s, &[0.0], Some(0.5)), Err(Error::Conditioning(_))));
        let mut s = init_state(&cond);
        assert!(matches!(process_block(&cond, &mut s, &[0.0], None), Err(Error::Conditioning(_))));
    }

    #[test]
    fn non_finite_input_rejected() {
        let m = DeviceModel::zeros("p", 1, 2, false);
        let mut s = init_state(&m);
        assert!(matches!(process_block(&m, &mut s, &[0.0, f32::NAN], None), Err(Error::Value(_))));
    }

    #[test]
    fn conditioning_changes_output() {
        let mut m = DeviceModel::zeros("c", 2, 2, false);
        for (i, w) in m.weight_ih.iter_mut().enumerate() {
            *w = 0.3 + 0.1 * i as f32;
        }
        m.head_weight = vec![1.0, -0.5];
        let clip = AudioClip::new((0..64).map(|i| (i as f32 * 0.2).sin()).collect(), 8000).unwrap();
        let a = render(&m, &clip, Some(0.0)).unwrap();
        let b = render(&m, &clip, Some(1.0)).unwrap();
        assert_ne!(a.samples, b.samples);
    }

    #[test]
    fn warmup_trims_output() {
        let m = DeviceModel::zeros("id", 1, 2, true);
        let clip = AudioClip::new(vec![0.1, 0.2, 0.3, 0.4], 100).unwrap();
        assert_eq!(render_with_warmup(&m, &clip, None, 2).unwrap().samples, vec![0.3, 0.4]);
        assert!(render_with_warmup(&m, &clip, None, 4).is_err());
    }
}
