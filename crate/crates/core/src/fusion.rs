//! Dual spatial-frequency fusion transformer and mask heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{angle_encoding, multi_head_attention, sinusoidal, Linear, Norm};
use crate::numerics::{uniform_fan_in, Graph, ParamId, ParamStore, Tensor, Var};
use crate::scene::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub d_f: usize,
    pub heads: usize,
    pub blocks: usize,
    /// One query projection for both cross-attention streams.
    pub shared_query: bool,
    /// Octaves of the sinusoidal position / view-direction encoding.
    pub position_freqs: usize,
    /// Harmonics of the yaw encoding feeding the difference head.
    pub orientation_harmonics: usize,
    /// Linear layers per mask head.
    pub mask_layers: usize,
    pub ffn_mult: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_f: 256,
            heads: 8,
            blocks: 4,
            shared_query: true,
            position_freqs: 6,
            orientation_harmonics: 4,
            mask_layers: 4,
            ffn_mult: 4,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_f == 0 || self.heads == 0 || self.d_f % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_f = {} must be a positive multiple of heads = {}",
                self.d_f, self.heads
            )));
        }
        if self.blocks == 0 || self.mask_layers == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("blocks, mask_layers and ffn_mult must be at least 1".into()));
        }
        if self.orientation_harmonics == 0 || self.position_freqs == 0 {
            return Err(Error::Config(
                "orientation_harmonics and position_freqs must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn pose_encoding_dim(&self) -> usize {
        6 * 2 * self.position_freqs
    }
}

/// Encoding of a listener position (already scaled into roughly `[0, 1]`)
/// and view direction.
pub fn pose_encoding(position: Vec3, forward: Vec3, freqs: usize) -> Vec<f64> {
    let mut v = sinusoidal(&position, freqs);
    v.extend(sinusoidal(&forward, freqs));
    v
}

/// Learned per-bin table plus a projected pose encoding added to every row.
#[derive(Clone, Debug)]
pub struct FrequencyEmbedding {
    pub table: ParamId,
    pub projection: Linear,
}

impl FrequencyEmbedding {
    pub fn new(store: &mut ParamStore, bins: usize, cfg: &FusionConfig, rng: &mut impl Rng) -> Result<Self> {
        let table = store.register("freq.table", uniform_fan_in(rng, &[bins, cfg.d_f], cfg.d_f))?;
        let projection = Linear::new(store, "freq.position", cfg.pose_encoding_dim(), cfg.d_f, false, rng)?;
        Ok(Self { table, projection })
    }

    /// The projected pose term alone (`1 × D_f`).
    pub fn position_term(&self, g: &mut Graph, store: &ParamStore, encoding: &[f64]) -> Result<Var> {
        let e = g.constant(Tensor::new([1, encoding.len()], encoding.to_vec())?);
        self.projection.forward(g, store, e)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, encoding: &[f64]) -> Result<Var> {
        let pos = self.position_term(g, store, encoding)?;
        let table = g.param(store, self.table);
        g.add_row(table, pos)
    }
}

/// Attention matrices recorded during one block, for inspection.
#[derive(Clone, Debug, Default)]
pub struct BlockAttention {
    pub image: Vec<Var>,
    pub points: Vec<Var>,
    pub itself: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub query: Linear,
    pub query_points: Option<Linear>,
    pub key_image: Linear,
    pub value_image: Linear,
    pub key_points: Linear,
    pub value_points: Linear,
    pub sa_query: Linear,
    pub sa_key: Linear,
    pub sa_value: Linear,
    pub norm_sum: Norm,
    pub norm_sa: Norm,
    pub norm_ffn: Norm,
    pub h1: Linear,
    pub h2: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl FusionBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FusionConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_f;
        let mut lin = |store: &mut ParamStore, n: &str, i: usize, o: usize, bias: bool| {
            Linear::new(store, &format!("{name}.{n}"), i, o, bias, rng)
        };
        Ok(Self {
            query: lin(store, "query", d, d, false)?,
            query_points: if cfg.shared_query {
                None
            } else {
                Some(lin(store, "query_points", d, d, false)?)
            },
            key_image: lin(store, "key_image", d, d, false)?,
            value_image: lin(store, "value_image", d, d, false)?,
            key_points: lin(store, "key_points", d, d, false)?,
            value_points: lin(store, "value_points", d, d, false)?,
            sa_query: lin(store, "sa_query", d, d, false)?,
            sa_key: lin(store, "sa_key", d, d, false)?,
            sa_value: lin(store, "sa_value", d, d, false)?,
            h1: lin(store, "ffn1", d, cfg.ffn_mult * d, true)?,
            h2: lin(store, "ffn2", cfg.ffn_mult * d, d, true)?,
            out: lin(store, "out", d, d, true)?,
            norm_sum: Norm::new(store, &format!("{name}.norm_sum"), d)?,
            norm_sa: Norm::new(store, &format!("{name}.norm_sa"), d)?,
            norm_ffn: Norm::new(store, &format!("{name}.norm_ffn"), d)?,
            heads: cfg.heads,
        })
    }

    /// `LayerNorm(F + Attn(F, image) + Attn(F, points))`.
    pub fn cross(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f: Var,
        image: Var,
        points: Var,
        rec: &mut BlockAttention,
    ) -> Result<Var> {
        let q = self.query.forward(g, store, f)?;
        let q_p = match &self.query_points {
            Some(l) => l.forward(g, store, f)?,
            None => q,
        };
        let (ki, vi) = (
            self.key_image.forward(g, store, image)?,
            self.value_image.forward(g, store, image)?,
        );
        let (kp, vp) = (
            self.key_points.forward(g, store, points)?,
            self.value_points.forward(g, store, points)?,
        );
        let (attn_i, wi) = multi_head_attention(g, q, ki, vi, self.heads)?;
        let (attn_p, wp) = multi_head_attention(g, q_p, kp, vp, self.heads)?;
        rec.image = wi;
        rec.points = wp;
        let s = g.add(f, attn_i)?;
        let s = g.add(s, attn_p)?;
        self.norm_sum.rows(g, store, s)
    }

    /// `LayerNorm(F + SelfAttn(F))` over frequency bins.
    pub fn self_attention(&self, g: &mut Graph, store: &ParamStore, f: Var, rec: &mut BlockAttention) -> Result<Var> {
        let q = self.sa_query.forward(g, store, f)?;
        let k = self.sa_key.forward(g, store, f)?;
        let v = self.sa_value.forward(g, store, f)?;
        let (a, w) = multi_head_attention(g, q, k, v, self.heads)?;
        rec.itself = w;
        let s = g.add(f, a)?;
        self.norm_sa.rows(g, store, s)
    }

    /// `H(LayerNorm(F + H2(relu(H1(F)))))`.
    pub fn ffn(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let h = self.h1.forward(g, store, f)?;
        let h = g.relu(h);
        let h = self.h2.forward(g, store, h)?;
        let s = g.add(f, h)?;
        let n = self.norm_ffn.rows(g, store, s)?;
        self.out.forward(g, store, n)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f: Var,
        image: Var,
        points: Var,
        rec: &mut BlockAttention,
    ) -> Result<Var> {
        let s = self.cross(g, store, f, image, points, rec)?;
        let s = self.self_attention(g, store, s, rec)?;
        self.ffn(g, store, s)
    }
}

/// Per-bin MLP heads for the mixture and difference masks.
#[derive(Clone, Debug)]
pub struct MaskHeads {
    pub mixture: Vec<Linear>,
    pub difference: Vec<Linear>,
    pub orientation: Linear,
}

impl MaskHeads {
    pub fn new(store: &mut ParamStore, cfg: &FusionConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_f;
        let mut head = |store: &mut ParamStore, name: &str| -> Result<Vec<Linear>> {
            (0..cfg.mask_layers)
                .map(|i| {
                    let out = if i + 1 == cfg.mask_layers { 1 } else { d };
                    Linear::new(store, &format!("{name}.l{i}"), d, out, true, rng)
                })
                .collect()
        };
        let mixture = head(store, "mask_mix")?;
        let difference = head(store, "mask_diff")?;
        let orientation = Linear::new(store, "orientation", 2 * cfg.orientation_harmonics, d, false, rng)?;
        Ok(Self {
            mixture,
            difference,
            orientation,
        })
    }

    fn mlp(layers: &[Linear], g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in layers.iter().enumerate() {
            h = l.forward(g, store, h)?;
            if i + 1 < layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn orientation_term(&self, g: &mut Graph, store: &ParamStore, encoding: &[f64]) -> Result<Var> {
        let e = g.constant(Tensor::new([1, encoding.len()], encoding.to_vec())?);
        self.orientation.forward(g, store, e)
    }

    /// Mixture mask in `[0, 2]` and difference mask in `[-1, 1]`, each
    /// `N_F × 1`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        acoustic: Var,
        orientation: &[f64],
    ) -> Result<(Var, Var)> {
        let m = Self::mlp(&self.mixture, g, store, acoustic)?;
        let m = g.sigmoid(m);
        let m = g.scale(m, 2.0);
        let o = self.orientation_term(g, store, orientation)?;
        let x = g.add_row(acoustic, o)?;
        let d = Self::mlp(&self.difference, g, store, x)?;
        Ok((m, g.tanh(d)))
    }

    /// Zeroes the final layer of both heads, so that `M_m ≡ 1` and `M_d ≡ 0`.
    pub fn zero_final_layers(&self, store: &mut ParamStore) {
        self.mixture.last().expect("at least one layer").zero(store);
        self.difference.last().expect("at least one layer").zero(store);
    }
}

/// Everything the fusion stage produces for one pose.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub frequency_embedding: Var,
    pub acoustic: Var,
    pub mixture: Var,
    pub difference: Var,
    pub attention: Vec<BlockAttention>,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub embedding: FrequencyEmbedding,
    pub image_proj: Linear,
    pub point_proj: Linear,
    pub blocks: Vec<FusionBlock>,
    pub masks: MaskHeads,
    pub cfg: FusionConfig,
}

impl Fusion {
    pub fn new(
        store: &mut ParamStore,
        bins: usize,
        image_dim: usize,
        point_dim: usize,
        cfg: &FusionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            embedding: FrequencyEmbedding::new(store, bins, cfg, rng)?,
            image_proj: Linear::new(store, "image_proj", image_dim, cfg.d_f, true, rng)?,
            point_proj: Linear::new(store, "point_proj", point_dim, cfg.d_f, true, rng)?,
            blocks: (0..cfg.blocks)
                .map(|i| FusionBlock::new(store, &format!("fusion{i}"), cfg, rng))
                .collect::<Result<_>>()?,
            masks: MaskHeads::new(store, cfg, rng)?,
            cfg: cfg.clone(),
        })
    }

    /// Runs embedding, all blocks and both mask heads. `image` and `points`
    /// are the raw encoder tokens.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pose_enc: &[f64],
        orient_enc: &[f64],
        image: Var,
        points: Var,
    ) -> Result<FusionOutput> {
        let ff = self.embedding.forward(g, store, pose_enc)?;
        let img = self.image_proj.forward(g, store, image)?;
        let pts = self.point_proj.forward(g, store, points)?;
        let mut f = ff;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut rec = BlockAttention::default();
            f = b.forward(g, store, f, img, pts, &mut rec)?;
            attention.push(rec);
        }
        let (mixture, difference) = self.masks.forward(g, store, f, orient_enc)?;
        Ok(FusionOutput {
            frequency_embedding: ff,
            acoustic: f,
            mixture,
            difference,
            attention,
        })
    }

    pub fn orientation_encoding(&self, yaw: f64) -> Vec<f64> {
        angle_encoding(yaw, self.cfg.orientation_harmonics)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_requires_heads_to_divide_width() {
        assert!(FusionConfig::default().validate().is_ok());
        assert!(FusionConfig { d_f: 30, heads: 8, ..FusionConfig::default() }.validate().is_err());
        assert!(FusionConfig { heads: 0, ..FusionConfig::default() }.validate().is_err());
        assert!(FusionConfig { blocks: 0, ..FusionConfig::default() }.validate().is_err());
        assert!(FusionConfig { position_freqs: 0, ..FusionConfig::default() }.validate().is_err());
    }

    #[test]
    fn pose_encoding_layout() {
        let c = FusionConfig { position_freqs: 2, ..FusionConfig::default() };
        let e = pose_encoding([0.5, 0.0, 0.25], [1.0, 0.0, 0.0], 2);
        assert_eq!(e.len(), c.pose_encoding_dim());
        // x = 0.5: sin(π/2), cos(π/2), sin(π), cos(π).
        let want_x = [1.0, 0.0, 0.0, -1.0];
        for (got, want) in e[..4].iter().zip(want_x) {
            assert!((got - want).abs() < 1e-15, "{e:?}");
        }
        // y = 0 encodes as (0, 1) at every frequency.
        assert_eq!(&e[4..8], &[0.0, 1.0, 0.0, 1.0]);
        // The forward direction follows the position block.
        assert!((e[12] - 0.0f64).abs() < 1e-15 && (e[13] + 1.0).abs() < 1e-15);
    }
}
