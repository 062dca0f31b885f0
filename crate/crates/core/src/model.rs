//! The full network: priors and pose in, refined binaural magnitudes out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{stft, MagnitudeSpectrogram, PhaseInit, StftConfig, Waveform, DEFAULT_SAMPLE_RATE};
use crate::encoders::{EncoderConfig, PointEncoder, VisualEncoder};
use crate::error::{Error, Result};
use crate::fusion::{pose_encoding, Fusion, FusionConfig, FusionOutput};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::scene::{CameraPose, ScenePriors};
use crate::srn::{assemble_input, estimate_channels, synthesize_waveform, Srn, SrnConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stft: StftConfig,
    pub encoders: EncoderConfig,
    pub fusion: FusionConfig,
    pub srn: SrnConfig,
}

impl ModelConfig {
    pub fn bins(&self) -> usize {
        self.stft.bins()
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.encoders.validate()?;
        self.fusion.validate()?;
        self.srn.validate()
    }

    /// Tiny configuration for gradient checks: 16 bins, width 32, one
    /// single-head fusion block, two refinement blocks.
    pub fn toy() -> Self {
        Self {
            stft: StftConfig::for_bins(16).expect("16 bins is valid"),
            encoders: EncoderConfig {
                visual_widths: vec![4, 6, 8],
                point_hidden: 8,
                point_dim: 8,
            },
            fusion: FusionConfig {
                d_f: 32,
                heads: 1,
                blocks: 1,
                position_freqs: 2,
                orientation_harmonics: 2,
                ffn_mult: 2,
                ..FusionConfig::default()
            },
            srn: SrnConfig {
                blocks: 2,
                channels: 4,
                expansion: 2,
                ..SrnConfig::default()
            },
        }
    }
}

/// Network inputs for one pose and source clip.
#[derive(Clone, Debug)]
pub struct ModelInput {
    /// `7 × H × W` prior image.
    pub visual: Tensor,
    /// `N × 3` normalized points.
    pub points: Tensor,
    pub pose_encoding: Vec<f64>,
    pub yaw: f64,
    /// `N_F × N_T` source magnitude.
    pub source: Tensor,
}

pub fn magnitude_tensor(m: &MagnitudeSpectrogram) -> Tensor {
    Tensor::new([m.bins, m.frames], m.data.clone()).expect("spectrogram is consistent")
}

impl ModelInput {
    pub fn new(
        cfg: &ModelConfig,
        priors: &ScenePriors,
        pose: &CameraPose,
        diagonal: f64,
        source_mag: &MagnitudeSpectrogram,
    ) -> Result<Self> {
        if source_mag.bins != cfg.bins() {
            return Err(Error::shape("model input", &[cfg.bins()], &[source_mag.bins]));
        }
        Ok(Self {
            visual: priors.visual_input(diagonal),
            points: priors.point_input(diagonal)?,
            pose_encoding: pose_encoding(
                pose.position.map(|v| v / diagonal),
                pose.forward,
                cfg.fusion.position_freqs,
            ),
            yaw: pose.yaw(),
            source: magnitude_tensor(source_mag),
        })
    }

    /// Convenience constructor that runs the STFT of a mono source clip.
    pub fn from_audio(
        cfg: &ModelConfig,
        priors: &ScenePriors,
        pose: &CameraPose,
        diagonal: f64,
        source: &[f64],
    ) -> Result<Self> {
        let mag = stft(source, cfg.stft)?.magnitude();
        Self::new(cfg, priors, pose, diagonal, &mag)
    }
}

/// Forward-pass results. All are graph variables.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub fusion: FusionOutput,
    /// Mask estimates before refinement.
    pub estimate_left: Var,
    pub estimate_right: Var,
    /// Refined magnitudes `Ŝ_l`, `Ŝ_r`.
    pub left: Var,
    pub right: Var,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub visual: VisualEncoder,
    pub points: PointEncoder,
    pub fusion: Fusion,
    pub srn: Srn,
}

impl Network {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let visual = VisualEncoder::new(store, &cfg.encoders, rng)?;
        let points = PointEncoder::new(store, &cfg.encoders, rng)?;
        let fusion = Fusion::new(
            store,
            cfg.bins(),
            cfg.encoders.visual_dim(),
            cfg.encoders.point_dim,
            &cfg.fusion,
            rng,
        )?;
        let srn = Srn::new(store, &cfg.srn, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            visual,
            points,
            fusion,
            srn,
        })
    }

    /// Encoders and fusion transformer only: the per-bin features and masks
    /// for one pose.
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        visual: &Tensor,
        points: &Tensor,
        pose_encoding: &[f64],
        yaw: f64,
    ) -> Result<FusionOutput> {
        let image = g.constant(visual.clone());
        let image = self.visual.tokens(g, store, image)?;
        let pts = g.constant(points.clone());
        let pts = self.points.tokens(g, store, pts)?;
        let orient = self.fusion.orientation_encoding(yaw);
        self.fusion.forward(g, store, pose_encoding, &orient, image, pts)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &ModelInput,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<ModelOutput> {
        let fusion = self.fuse(g, store, &input.visual, &input.points, &input.pose_encoding, input.yaw)?;
        let source = g.constant(input.source.clone());
        let (el, er, mb, db) = estimate_channels(g, source, fusion.mixture, fusion.difference)?;
        let stack_l = assemble_input(g, mb, db, source, el)?;
        let left = self.srn.refine(g, store, stack_l, el, training, rng)?;
        let stack_r = assemble_input(g, mb, db, source, er)?;
        let right = self.srn.refine(g, store, stack_r, er, training, rng)?;
        Ok(ModelOutput {
            fusion,
            estimate_left: el,
            estimate_right: er,
            left,
            right,
        })
    }

    /// Zeroes the mask heads' final layers and the refinement stem and head:
    /// the network then outputs the source magnitude on both ears.
    pub fn make_residual_identity(&self, store: &mut ParamStore) {
        self.fusion.masks.zero_final_layers(store);
        self.srn.zero_stem_and_head(store);
    }
}

/// Network plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Network::new(cfg, &mut store, &mut rng)?;
        Ok(Self { net, store })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    /// Eval-mode prediction of `(Ŝ_l, Ŝ_r)` as `N_F × N_T` tensors.
    pub fn predict(&self, input: &ModelInput) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        // Eval mode draws no random numbers; the generator is a placeholder.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.net.forward(&mut g, &self.store, input, false, &mut rng)?;
        Ok((g.value(out.left).clone(), g.value(out.right).clone()))
    }

    /// `(F_F, F_acoustic)`, each `N_F × D_f`, for a pose.
    pub fn features(&self, priors: &ScenePriors, pose: &CameraPose, diagonal: f64) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let enc = pose_encoding(
            pose.position.map(|v| v / diagonal),
            pose.forward,
            self.cfg().fusion.position_freqs,
        );
        let out = self.net.fuse(
            &mut g,
            &self.store,
            &priors.visual_input(diagonal),
            &priors.point_input(diagonal)?,
            &enc,
            pose.yaw(),
        )?;
        Ok((
            g.value(out.frequency_embedding).clone(),
            g.value(out.acoustic).clone(),
        ))
    }

    /// Predicts both magnitudes and recovers a stereo waveform of
    /// `signal_len` samples with Griffin-Lim. A silent source yields
    /// silence without running the network: there is nothing to place.
    pub fn synthesize(&self, input: &ModelInput, signal_len: usize, iters: usize, init: &PhaseInit) -> Result<Waveform> {
        if input.source.data().iter().all(|&v| v == 0.0) {
            return Waveform::stereo(vec![0.0; signal_len], vec![0.0; signal_len], DEFAULT_SAMPLE_RATE);
        }
        let (l, r) = self.predict(input)?;
        let spec = |t: Tensor| MagnitudeSpectrogram::new(t.shape()[0], t.shape()[1], t.into_data(), signal_len);
        synthesize_waveform(&spec(l)?, &spec(r)?, self.cfg().stft, iters, init)
    }
}
