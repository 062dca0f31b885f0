//! Building blocks shared by the encoders, the fusion transformer and the
//! refinement network.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{uniform_fan_in, Graph, ParamId, ParamStore, Tensor, Var};

/// `y = x W (+ b)` applied to every row of an `n × d_in` matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.register(format!("{name}.w"), uniform_fan_in(rng, &[d_in, d_out], d_in))?;
        let b = if bias {
            Some(store.register(format!("{name}.b"), Tensor::zeros([d_out]))?)
        } else {
            None
        };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Sets weights (and bias) to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.w).data_mut().fill(0.0);
        if let Some(b) = self.b {
            store.value_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Gain/bias pair for a layer norm over vectors of length `d`.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{name}.gain"), Tensor::full([d], 1.0))?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros([d]))?,
        })
    }

    /// Normalizes each row of a matrix.
    pub fn rows(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(store, self.gain), g.param(store, self.bias));
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    /// Normalizes across channels at every position of a `C × H × W` map.
    pub fn channels(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(store, self.gain), g.param(store, self.bias));
        g.layer_norm_channels(x, gain, bias, LN_EPS)
    }
}

/// Scaled dot-product attention split into `heads` column blocks. Returns
/// the concatenated head outputs and each head's attention matrix.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(q)[1];
    if heads == 0 || d % heads != 0 || g.shape(k)[1] != d || g.shape(v)[1] != d {
        return Err(Error::InvalidArgument(format!(
            "attention width {d} (keys {:?}, values {:?}) must split into {heads} heads",
            g.shape(k),
            g.shape(v)
        )));
    }
    if g.shape(k)[0] != g.shape(v)[0] {
        return Err(Error::shape("attention", g.shape(k), g.shape(v)));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s)?;
        weights.push(a);
        outs.push(g.matmul(a, vh)?);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, weights))
}

/// `[sin(2^k π x), cos(2^k π x)]` for `k < freqs`, for every component.
pub fn sinusoidal(values: &[f64], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len() * 2 * freqs);
    for &x in values {
        for k in 0..freqs {
            let a = (1u64 << k) as f64 * std::f64::consts::PI * x;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// `[sin(k θ), cos(k θ)]` for `k = 1..=harmonics`, a smooth encoding of an
/// angle on the unit circle.
pub fn angle_encoding(theta: f64, harmonics: usize) -> Vec<f64> {
    (1..=harmonics)
        .flat_map(|k| {
            let a = k as f64 * theta;
            [a.sin(), a.cos()]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodings_have_expected_width() {
        assert_eq!(sinusoidal(&[0.1, 0.2, 0.3], 4).len(), 24);
        assert_eq!(sinusoidal(&[0.0], 2), vec![0.0, 1.0, 0.0, 1.0]);
        let e = angle_encoding(std::f64::consts::FRAC_PI_2, 2);
        assert!((e[0] - 1.0).abs() < 1e-15 && e[1].abs() < 1e-15);
        assert!(e[2].abs() < 1e-15 && (e[3] + 1.0).abs() < 1e-15);
    }
}
