//! Spectral refinement: mask application, multi-kernel depthwise blocks and
//! phase recovery back to audio.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{griffin_lim, MagnitudeSpectrogram, PhaseInit, StftConfig, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::layers::Norm;
use crate::numerics::{uniform_fan_in, Graph, ParamId, ParamStore, Tensor, Var};

/// Channels of the stacked refinement input: mixture mask, difference mask,
/// source magnitude, side estimate.
pub const STACK_CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrnConfig {
    pub blocks: usize,
    pub channels: usize,
    pub kernels: Vec<usize>,
    pub expansion: usize,
    /// Drop-path ratio of the deepest block; shallower blocks ramp linearly
    /// from zero.
    pub drop_path: f64,
    /// Divide the multi-kernel sum by the number of kernels.
    pub normalize_kernel_sum: bool,
}

impl Default for SrnConfig {
    fn default() -> Self {
        Self {
            blocks: 9,
            channels: 16,
            kernels: vec![1, 3, 5, 7],
            expansion: 4,
            drop_path: 0.1,
            normalize_kernel_sum: false,
        }
    }
}

impl SrnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.channels == 0 || self.expansion == 0 {
            return Err(Error::Config("srn blocks, channels and expansion must be at least 1".into()));
        }
        if self.kernels.is_empty() || self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "srn kernel sizes must be odd and non-empty, got {:?}",
                self.kernels
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!("drop_path {} not in [0, 1)", self.drop_path)));
        }
        Ok(())
    }

    /// Drop-path ratio of block `i`.
    pub fn gamma(&self, i: usize) -> f64 {
        if self.blocks == 1 {
            self.drop_path
        } else {
            self.drop_path * i as f64 / (self.blocks - 1) as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pointwise {
    pub w: ParamId,
    pub b: ParamId,
}

impl Pointwise {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            w: store.register(format!("{name}.w"), uniform_fan_in(rng, &[cout, cin], cin))?,
            b: store.register(format!("{name}.b"), Tensor::zeros([cout]))?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.pointwise_conv2d(x, w, b)
    }

    fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.w).data_mut().fill(0.0);
        store.value_mut(self.b).data_mut().fill(0.0);
    }
}

#[derive(Clone, Debug)]
pub struct SrnBlock {
    /// `(kernel size, C × k × k weights)` per branch.
    pub kernels: Vec<(usize, ParamId)>,
    pub norm: Norm,
    pub expand: Pointwise,
    pub reduce: Pointwise,
    pub gamma: f64,
    pub normalize: bool,
}

impl SrnBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &SrnConfig, gamma: f64, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels;
        let kernels = cfg
            .kernels
            .iter()
            .map(|&k| {
                let w = uniform_fan_in(rng, &[c, k, k], k * k);
                Ok((k, store.register(format!("{name}.dw{k}"), w)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            kernels,
            norm: Norm::new(store, &format!("{name}.norm"), c)?,
            expand: Pointwise::new(store, &format!("{name}.expand"), c, cfg.expansion * c, rng)?,
            reduce: Pointwise::new(store, &format!("{name}.reduce"), cfg.expansion * c, c, rng)?,
            gamma,
            normalize: cfg.normalize_kernel_sum,
        })
    }

    /// The summed multi-kernel depthwise filter, as one centred kernel of
    /// the largest size.
    pub fn combined_kernel(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let size = self.kernels.iter().map(|(k, _)| *k).max().expect("validated non-empty");
        let mut total: Option<Var> = None;
        for &(k, id) in &self.kernels {
            let w = g.param(store, id);
            let w = if k == size { w } else { g.pad_kernel(w, size)? };
            total = Some(match total {
                Some(t) => g.add(t, w)?,
                None => w,
            });
        }
        let total = total.expect("non-empty");
        Ok(if self.normalize {
            g.scale(total, 1.0 / self.kernels.len() as f64)
        } else {
            total
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let k = self.combined_kernel(g, store)?;
        let h = g.depthwise_conv2d(x, k)?;
        let h = self.norm.channels(g, store, h)?;
        let h = self.expand.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.reduce.forward(g, store, h)?;
        let h = g.drop_path(h, self.gamma, training, rng)?;
        g.add(h, x)
    }
}

#[derive(Clone, Debug)]
pub struct Srn {
    pub stem: Pointwise,
    pub blocks: Vec<SrnBlock>,
    pub head: Pointwise,
    pub cfg: SrnConfig,
}

impl Srn {
    /// The head starts at zero so the network's output is its side input;
    /// the stem keeps a random initialization so gradients reach it.
    pub fn new(store: &mut ParamStore, cfg: &SrnConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let stem = Pointwise::new(store, "srn.stem", STACK_CHANNELS, cfg.channels, rng)?;
        let blocks = (0..cfg.blocks)
            .map(|i| SrnBlock::new(store, &format!("srn.block{i}"), cfg, cfg.gamma(i), rng))
            .collect::<Result<_>>()?;
        let head = Pointwise::new(store, "srn.head", cfg.channels, 1, rng)?;
        head.zero(store);
        Ok(Self {
            stem,
            blocks,
            head,
            cfg: cfg.clone(),
        })
    }

    pub fn zero_stem_and_head(&self, store: &mut ParamStore) {
        self.stem.zero(store);
        self.head.zero(store);
    }

    /// `relu(head(blocks(stem(stack))) + side)` for a `4 × N_F × N_T` stack.
    pub fn refine(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stack: Var,
        side: Var,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let s = g.shape(stack).to_vec();
        if s.len() != 3 || s[0] != STACK_CHANNELS || g.shape(side) != &s[1..] {
            return Err(Error::shape("refine", &s, g.shape(side)));
        }
        let mut h = self.stem.forward(g, store, stack)?;
        for b in &self.blocks {
            h = b.forward(g, store, h, training, rng)?;
        }
        let h = self.head.forward(g, store, h)?;
        let h = g.reshape(h, &s[1..])?;
        let sum = g.add(h, side)?;
        Ok(g.relu(sum))
    }
}

/// Broadcasts per-bin masks (`N_F × 1`) over `frames` and returns
/// `(S_l, S_r) = (relu(M_m S + M_d S), relu(M_m S − M_d S))`.
pub fn estimate_channels(g: &mut Graph, source: Var, mixture: Var, difference: Var) -> Result<(Var, Var, Var, Var)> {
    let frames = g.shape(source)[1];
    if g.value(mixture).len() != g.shape(source)[0] || g.value(difference).len() != g.shape(source)[0] {
        return Err(Error::shape("estimate_channels", g.shape(source), g.shape(mixture)));
    }
    let mb = g.broadcast_cols(mixture, frames);
    let db = g.broadcast_cols(difference, frames);
    let mix = g.mul(mb, source)?;
    let diff = g.mul(db, source)?;
    let l = g.add(mix, diff)?;
    let r = g.sub(mix, diff)?;
    let (l, r) = (g.relu(l), g.relu(r));
    Ok((l, r, mb, db))
}

/// The `4 × N_F × N_T` refinement input `[M_m, M_d, S_s, S_side]`.
pub fn assemble_input(g: &mut Graph, mixture: Var, difference: Var, source: Var, side: Var) -> Result<Var> {
    g.stack(&[mixture, difference, source, side])
}

/// Griffin-Lim phase recovery for each ear.
pub fn synthesize_waveform(
    left: &MagnitudeSpectrogram,
    right: &MagnitudeSpectrogram,
    cfg: StftConfig,
    iters: usize,
    init: &PhaseInit,
) -> Result<Waveform> {
    if left.signal_len != right.signal_len {
        return Err(Error::shape("synthesize_waveform", &[left.signal_len], &[right.signal_len]));
    }
    let l = griffin_lim(left, cfg, iters, init)?;
    let r = griffin_lim(right, cfg, iters, init)?;
    Waveform::stereo(l, r, DEFAULT_SAMPLE_RATE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(kernels: Vec<usize>) -> SrnConfig {
        SrnConfig { kernels, ..SrnConfig::default() }
    }

    #[test]
    fn config_rejects_even_or_missing_kernels_and_bad_ratio() {
        assert!(cfg(vec![1, 3, 5, 7]).validate().is_ok());
        assert!(cfg(vec![3, 4]).validate().is_err());
        assert!(cfg(vec![]).validate().is_err());
        assert!(SrnConfig { drop_path: 1.0, ..SrnConfig::default() }.validate().is_err());
        assert!(SrnConfig { channels: 0, ..SrnConfig::default() }.validate().is_err());
    }

    #[test]
    fn drop_path_ratio_ramps_linearly_over_blocks() {
        let c = SrnConfig { blocks: 5, drop_path: 0.2, ..SrnConfig::default() };
        let got: Vec<f64> = (0..5).map(|i| c.gamma(i)).collect();
        for (g, want) in got.iter().zip([0.0, 0.05, 0.1, 0.15, 0.2]) {
            assert!((g - want).abs() < 1e-15, "{got:?}");
        }
        let single = SrnConfig { blocks: 1, drop_path: 0.2, ..SrnConfig::default() };
        assert_eq!(single.gamma(0), 0.2);
    }

    #[test]
    fn combined_kernel_centres_smaller_branches() {
        for normalize in [false, true] {
            let c = SrnConfig { channels: 1, kernels: vec![1, 3], normalize_kernel_sum: normalize, ..SrnConfig::default() };
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let block = SrnBlock::new(&mut store, "b", &c, 0.0, &mut rng).unwrap();
            store.value_mut(store.id("b.dw1").unwrap()).data_mut().copy_from_slice(&[10.0]);
            let three: Vec<f64> = (1..=9).map(f64::from).collect();
            store.value_mut(store.id("b.dw3").unwrap()).data_mut().copy_from_slice(&three);
            let mut g = Graph::new();
            let k = block.combined_kernel(&mut g, &store).unwrap();
            let mut want = three.clone();
            want[4] += 10.0;
            if normalize {
                want.iter_mut().for_each(|v| *v /= 2.0);
            }
            assert_eq!(g.value(k).shape(), &[1, 3, 3]);
            assert_eq!(g.value(k).data(), want.as_slice());
        }
    }

    #[test]
    fn channel_estimates_with_unit_mixture_copy_source() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::new([2, 2], vec![0.5, 1.0, 0.0, 2.0]).unwrap());
        let m = g.constant(Tensor::full([2, 1], 1.0));
        let d = g.constant(Tensor::zeros([2, 1]));
        let (l, r, _, _) = estimate_channels(&mut g, s, m, d).unwrap();
        assert_eq!(g.value(l).data(), &[0.5, 1.0, 0.0, 2.0]);
        assert_eq!(g.value(r).data(), &[0.5, 1.0, 0.0, 2.0]);
    }

    #[test]
    fn waveform_synthesis_rejects_mismatched_lengths() {
        let a = MagnitudeSpectrogram::new(5, 5, vec![0.0; 25], 16).unwrap();
        let b = MagnitudeSpectrogram::new(5, 4, vec![0.0; 20], 12).unwrap();
        let cfg = StftConfig { n_fft: 8, hop: 4 };
        assert!(synthesize_waveform(&a, &b, cfg, 1, &PhaseInit::Zero).is_err());
    }
}
