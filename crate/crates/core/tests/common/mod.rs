//! Toy-sized fixtures shared by the model-level tests and the acceptance
//! suite.
#![allow(dead_code)]

use avsurf::dsp::MagnitudeSpectrogram;
use avsurf::model::{Model, ModelConfig, ModelInput};
use avsurf::numerics::{Graph, ParamStore, Tensor, Var};
use avsurf::scene::{priors_for_pose, CameraPose, RenderConfig, SceneConfig};
use avsurf::training::compute_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOY_FRAMES: usize = 6;

pub fn toy_scene(seed: u64) -> SceneConfig {
    SceneConfig {
        render: RenderConfig {
            width: 16,
            height: 16,
            ..RenderConfig::default()
        },
        num_points: 24,
        seed,
        ..SceneConfig::default()
    }
}

pub fn random_pose(rng: &mut impl Rng) -> CameraPose {
    CameraPose::from_yaw_pitch(
        [rng.random_range(0.8..4.2), rng.random_range(0.8..3.2), rng.random_range(1.0..2.0)],
        rng.random_range(-180.0..180.0),
        rng.random_range(-20.0..20.0),
    )
}

/// Priors, pose and a positive random source magnitude for the toy model.
pub fn toy_input(cfg: &ModelConfig, seed: u64) -> ModelInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = toy_scene(seed);
    let pose = random_pose(&mut rng);
    let priors = priors_for_pose(&scene, &pose).unwrap();
    let bins = cfg.bins();
    let data = (0..bins * TOY_FRAMES).map(|_| rng.random_range(0.05..1.0)).collect();
    let mag = MagnitudeSpectrogram::new(bins, TOY_FRAMES, data, 64).unwrap();
    ModelInput::new(cfg, &priors, &pose, scene.room.diagonal(), &mag).unwrap()
}

pub fn random_like(t: &Tensor, rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(t.shape().to_vec(), |_| rng.random_range(lo..hi))
}

/// Adds uniform noise in `[-scale, scale)` to every parameter. Zero-valued
/// biases and the zero refinement head would otherwise leave units sitting
/// exactly on ReLU kinks and parameters without any influence.
pub fn jitter(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        store
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-scale..scale));
    }
}

/// A toy model with every parameter jittered away from its initialization.
pub fn toy_model(seed: u64) -> Model {
    let mut m = Model::new(&ModelConfig::toy(), seed).unwrap();
    jitter(&mut m.store, 0.2, seed ^ 0xabcd);
    m
}

/// Random positive targets shaped like the model output.
pub fn toy_targets(input: &ModelInput, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a7);
    (
        random_like(&input.source, &mut rng, 0.0, 1.0),
        random_like(&input.source, &mut rng, 0.0, 1.0),
    )
}

/// Eval-mode training loss of the full network.
pub fn full_loss(
    m: &Model,
    g: &mut Graph,
    store: &ParamStore,
    input: &ModelInput,
    targets: &(Tensor, Tensor),
) -> avsurf::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = m.net.forward(g, store, input, false, &mut rng)?;
    let tl = g.constant(targets.0.clone());
    let tr = g.constant(targets.1.clone());
    compute_loss(g, out.left, out.right, tl, tr)
}
