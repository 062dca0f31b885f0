//! Visual and point-cloud encoders producing the token sets the fusion
//! transformer attends to.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{uniform_fan_in, Graph, ParamId, ParamStore, Tensor, Var};

/// Channel count of the concatenated prior image (rgb, depth, normal).
pub const VISUAL_CHANNELS: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output channels of the three stride-2 residual stages.
    pub visual_widths: Vec<usize>,
    pub point_hidden: usize,
    pub point_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            visual_widths: vec![32, 64, 128],
            point_hidden: 64,
            point_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn visual_dim(&self) -> usize {
        *self.visual_widths.last().expect("validated non-empty")
    }

    pub fn downsample(&self) -> usize {
        1 << self.visual_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.visual_widths.is_empty() || self.visual_widths.contains(&0) {
            return Err(Error::Config("visual_widths must be non-empty and positive".into()));
        }
        if self.point_hidden == 0 || self.point_dim == 0 {
            return Err(Error::Config("point encoder widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        let fan_in = cin * k * k;
        Ok(Self {
            w: store.register(format!("{name}.w"), uniform_fan_in(rng, &[cout, cin, k, k], fan_in))?,
            b: store.register(format!("{name}.b"), Tensor::zeros([cout]))?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.conv2d(x, w, b, stride, pad)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv1: Conv,
    conv2: Conv,
    shortcut: Conv,
}

/// Truncated residual CNN: each stage halves the resolution,
/// `relu(conv3x3(relu(conv3x3_s2(x))) + conv1x1_s2(x))`.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    stages: Vec<Stage>,
    cfg: EncoderConfig,
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut cin = VISUAL_CHANNELS;
        for (i, &cout) in cfg.visual_widths.iter().enumerate() {
            let p = format!("visual.stage{i}");
            stages.push(Stage {
                conv1: Conv::new(store, &format!("{p}.conv1"), cin, cout, 3, rng)?,
                conv2: Conv::new(store, &format!("{p}.conv2"), cout, cout, 3, rng)?,
                shortcut: Conv::new(store, &format!("{p}.shortcut"), cin, cout, 1, rng)?,
            });
            cin = cout;
        }
        Ok(Self {
            stages,
            cfg: cfg.clone(),
        })
    }

    /// Feature map `D_i × H/8 × W/8` for a `7 × H × W` input.
    pub fn feature_map(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let shape = g.shape(image).to_vec();
        let f = self.cfg.downsample();
        if shape.len() != 3 || shape[0] != VISUAL_CHANNELS {
            return Err(Error::shape("encode_visual", &[VISUAL_CHANNELS, 0, 0], &shape));
        }
        if shape[1] % f != 0 || shape[2] % f != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} is not divisible by {f}",
                shape[2], shape[1]
            )));
        }
        let mut x = image;
        for s in &self.stages {
            let h = s.conv1.forward(g, store, x, 2, 1)?;
            let h = g.relu(h);
            let h = s.conv2.forward(g, store, h, 1, 1)?;
            let short = s.shortcut.forward(g, store, x, 2, 0)?;
            let sum = g.add(h, short)?;
            x = g.relu(sum);
        }
        Ok(x)
    }

    /// Flattened token view `(H/8 · W/8) × D_i`.
    pub fn tokens(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let fm = self.feature_map(g, store, image)?;
        let s = g.shape(fm).to_vec();
        let flat = g.reshape(fm, &[s[0], s[1] * s[2]])?;
        g.transpose(flat)
    }
}

/// Shared per-point MLP `3 → hidden → dim` with ReLU after both layers; no
/// pooling, one token per point.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    l1: Linear,
    l2: Linear,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, "points.l1", 3, cfg.point_hidden, true, rng)?,
            l2: Linear::new(store, "points.l2", cfg.point_hidden, cfg.point_dim, true, rng)?,
        })
    }

    pub fn tokens(&self, g: &mut Graph, store: &ParamStore, points: Var) -> Result<Var> {
        let s = g.shape(points).to_vec();
        if s.len() != 2 || s[1] != 3 || s[0] == 0 {
            return Err(Error::shape("encode_points", &[0, 3], &s));
        }
        let h = self.l1.forward(g, store, points)?;
        let h = g.relu(h);
        let h = self.l2.forward(g, store, h)?;
        Ok(g.relu(h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn visual_output_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = VisualEncoder::new(&mut store, &EncoderConfig::default(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([7, 64, 64], |i| (i % 13) as f64 / 13.0));
        let fm = enc.feature_map(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(fm), &[128, 8, 8]);
        let t = enc.tokens(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(t), &[64, 128]);
        let bad = g.constant(Tensor::zeros([7, 60, 64]));
        assert!(enc.feature_map(&mut g, &store, bad).is_err());
    }

    #[test]
    fn empty_point_set_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = PointEncoder::new(&mut store, &EncoderConfig::default(), &mut rng).unwrap();
        let mut g = Graph::new();
        let bad = g.constant(Tensor::zeros([4, 2]));
        assert!(enc.tokens(&mut g, &store, bad).is_err());
    }
}
