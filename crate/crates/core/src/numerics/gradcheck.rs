//! Central finite-difference verification of analytic gradients.
//!
//! Relative errors are norm-wise: `‖analytic − numeric‖ / max(‖analytic‖,
//! ‖numeric‖)`, which stays meaningful when individual entries are tiny.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Reduces a non-scalar output to a scalar with fixed, non-uniform weights so
/// that every output element contributes to the checked gradient.
pub fn scalarize(g: &mut Graph, out: Var) -> Result<Var> {
    let n = g.value(out).len();
    if n == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    g.weighted_sum(out, w)
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    /// One relative error per input tensor.
    pub per_input: Vec<f64>,
}

impl InputCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks the gradient of `f` with respect to every element of every input.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<InputCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        let loss = scalarize(&mut g, out)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let loss = scalarize(&mut g, out)?;
    g.backward(loss)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            *slot = (up - down) / (2.0 * h);
        }
        per_input.push(relative_error(&analytic, &numeric));
    }
    Ok(InputCheck { per_input })
}

/// Step of the parameter check. Richardson extrapolation keeps its
/// truncation error at `O(h⁴)`, so a coarser step than [`DEFAULT_STEP`] is
/// affordable and keeps roundoff small on tiny gradients.
pub const PARAM_STEP: f64 = 1e-4;

/// Largest relative disagreement between the `h` and `h/2` central
/// differences still attributed to smooth truncation.
pub const KINK_TOL: f64 = 1e-5;

/// Largest relative gap between the forward and backward one-sided
/// differences at `h/2`; a smooth function keeps it near `h·|f''/f'|`.
pub const SIDE_TOL: f64 = 1e-2;

/// Derivative at 0 of `f`, whose value there is `f0`, by Richardson-
/// extrapolated central differences. Returns `None` when a ReLU-style kink
/// lies inside the stencil: either the `h` and `h/2` central differences
/// disagree, or the one-sided slopes on either side of 0 do.
pub fn smooth_derivative(mut f: impl FnMut(f64) -> Result<f64>, f0: f64, h: f64) -> Result<Option<f64>> {
    let (a, b) = (f(h)?, f(-h)?);
    let (c, d) = (f(0.5 * h)?, f(-0.5 * h)?);
    let wide = (a - b) / (2.0 * h);
    let narrow = (c - d) / h;
    // Roundoff of the narrow difference, with generous headroom.
    let noise = 64.0 * f64::EPSILON * (a.abs() + b.abs() + c.abs() + d.abs() + f0.abs()) / h;
    if (wide - narrow).abs() > KINK_TOL * wide.abs().max(narrow.abs()) + noise {
        return Ok(None);
    }
    let (fwd, bwd) = ((c - f0) / (0.5 * h), (f0 - d) / (0.5 * h));
    if (fwd - bwd).abs() > SIDE_TOL * fwd.abs().max(bwd.abs()) + 4.0 * noise {
        return Ok(None);
    }
    Ok(Some((4.0 * narrow - wide) / 3.0))
}

#[derive(Clone, Debug)]
pub struct ParamErr {
    pub name: String,
    /// Error over sampled coordinates.
    pub coords: f64,
    /// Error of the directional derivative along a random unit direction.
    pub direction: f64,
    /// Probes discarded because a kink lay inside the stencil.
    pub kinked: usize,
    /// Probes compared.
    pub probed: usize,
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub per_param: Vec<ParamErr>,
}

impl ParamCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.coords.max(p.direction))
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamErr> {
        self.per_param
            .iter()
            .max_by(|a, b| a.coords.max(a.direction).total_cmp(&b.coords.max(b.direction)))
    }

    /// Fraction of probes discarded as kinked.
    pub fn kinked_fraction(&self) -> f64 {
        let k: usize = self.per_param.iter().map(|p| p.kinked).sum();
        let n: usize = self.per_param.iter().map(|p| p.kinked + p.probed).sum();
        if n == 0 {
            0.0
        } else {
            k as f64 / n as f64
        }
    }
}

/// Random directions tried per parameter before giving up on one.
const DIRECTION_TRIES: usize = 8;

/// Step reductions tried when a kink sits inside the stencil.
const STEP_DIVISORS: [f64; 3] = [1.0, 8.0, 64.0];

fn probe(mut f: impl FnMut(f64) -> Result<f64>, f0: f64, h: f64) -> Result<Option<f64>> {
    for div in STEP_DIVISORS {
        if let Some(d) = smooth_derivative(&mut f, f0, h / div)? {
            return Ok(Some(d));
        }
    }
    Ok(None)
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// parameter in `store`: up to `coords_per_param` sampled coordinates plus
/// one random direction per parameter tensor. A probe whose stencil
/// straddles a kink is retried with smaller steps, then replaced by a fresh
/// draw. `f` must be deterministic.
pub fn check_params<F>(
    store: &mut ParamStore,
    h: f64,
    coords_per_param: usize,
    seed: u64,
    mut f: F,
) -> Result<ParamCheck>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward_params(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    store.zero_grads();

    let mut eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item())
    };
    let f0 = eval(store)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_param = Vec::new();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let n = store.value(id).len();
        let base = store.value(id).data().to_vec();
        let mut kinked = 0;
        let mut a_s = Vec::with_capacity(coords_per_param);
        let mut n_s = Vec::with_capacity(coords_per_param);
        // Visit coordinates in random order until enough smooth ones are found.
        for i in sample(&mut rng, n, n).into_iter() {
            if a_s.len() == coords_per_param.min(n) {
                break;
            }
            let d = probe(
                |t| {
                    store.value_mut(id).data_mut()[i] = base[i] + t;
                    let v = eval(store);
                    store.value_mut(id).data_mut()[i] = base[i];
                    v
                },
                f0,
                h,
            )?;
            match d {
                Some(d) => {
                    a_s.push(analytic[pi][i]);
                    n_s.push(d);
                }
                None => kinked += 1,
            }
        }

        let mut direction = 0.0;
        let mut found = false;
        for _ in 0..DIRECTION_TRIES {
            let mut dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let len = norm(&dir);
            dir.iter_mut().for_each(|d| *d /= len);
            let fd = probe(
                |t| {
                    for (x, (b, d)) in store.value_mut(id).data_mut().iter_mut().zip(base.iter().zip(&dir)) {
                        *x = b + t * d;
                    }
                    let v = eval(store);
                    store.value_mut(id).data_mut().copy_from_slice(&base);
                    v
                },
                f0,
                h,
            )?;
            match fd {
                Some(fd) => {
                    let ad: f64 = analytic[pi].iter().zip(&dir).map(|(a, d)| a * d).sum();
                    // A random projection can nearly cancel; measure it
                    // against at least its typical size, ‖g‖/√n.
                    let typical = norm(&analytic[pi]) / (n as f64).sqrt();
                    let scale = ad.abs().max(fd.abs());
                    direction = if scale == 0.0 { 0.0 } else { (ad - fd).abs() / scale.max(typical) };
                    found = true;
                    break;
                }
                None => kinked += 1,
            }
        }
        if !found {
            // Every direction hit a kink: report it as a failure rather
            // than silently passing.
            direction = f64::INFINITY;
        }

        // Sampled coordinates can all be far smaller than the tensor's
        // typical entry; measure them against at least the RMS entry.
        let rms = (analytic[pi].iter().map(|a| a * a).sum::<f64>() / n as f64).sqrt();
        let floor = rms * (a_s.len() as f64).sqrt();
        let coords = relative_error(&a_s, &n_s) * {
            let scale = norm(&a_s).max(norm(&n_s));
            if scale == 0.0 { 1.0 } else { scale / scale.max(floor) }
        };
        per_param.push(ParamErr {
            name: store.get(id).name.clone(),
            coords,
            direction,
            kinked,
            probed: a_s.len() + usize::from(found),
        });
    }
    Ok(ParamCheck { per_param })
}
