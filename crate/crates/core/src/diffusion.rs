//! Conditional residual diffusion: forward sampling, the combined-noise
//! target, the reverse transition and the full reverse chain.
//!
//! Training draws a continuous noise level `sqrt(alpha_bar)` and works with
//! [`continuous_params`]; sampling walks the rows of a [`DiscreteSchedule`]
//! from `T` down to 1 and hands `sqrt(alpha_bar_t)` to the denoiser.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::grad::{lit, Real, Tensor};
use crate::nets::{det_apply, sto_apply, NetConfig, NetError};
use crate::schedule::{continuous_params, DiscreteSchedule, ScheduleError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("combined noise is undefined at noise level 1")]
    CleanLevel,
    #[error("recombination ratio {0} must lie in [0, 1)")]
    Ratio(f64),
    #[error("reverse chain produced non-finite samples at step {0}")]
    NonFinite(usize),
}

fn same_len(a: usize, b: usize) -> Result<(), DiffusionError> {
    if a == b {
        Ok(())
    } else {
        Err(DiffusionError::Length(a, b))
    }
}

#[inline]
fn f<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Clean residual `x0 = x - y_init` and noisy residual `y0 = y - y_init`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPair<T> {
    pub x0: Vec<T>,
    pub y0: Vec<T>,
}

impl<T: Real> ResidualPair<T> {
    pub fn new(x0: Vec<T>, y0: Vec<T>) -> Result<Self, DiffusionError> {
        same_len(x0.len(), y0.len())?;
        Ok(Self { x0, y0 })
    }

    pub fn from_signals(clean: &[T], noisy: &[T], initial: &[T]) -> Result<Self, DiffusionError> {
        same_len(clean.len(), noisy.len())?;
        same_len(clean.len(), initial.len())?;
        Ok(Self {
            x0: clean.iter().zip(initial).map(|(&x, &i)| x - i).collect(),
            y0: noisy.iter().zip(initial).map(|(&y, &i)| y - i).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }
}

/// Coefficients `(a, b, s)` of `x_t = a x0 + b y0 + s eps` at a continuous level.
pub fn forward_coefficients(sqrt_alpha_bar: f64) -> Result<(f64, f64, f64), DiffusionError> {
    let (m, delta) = continuous_params(sqrt_alpha_bar)?;
    Ok(((1.0 - m) * sqrt_alpha_bar, m * sqrt_alpha_bar, delta.sqrt()))
}

/// Coefficients `(r, s)` of `eps* = r (y0 - x0) + s eps`. Level 1 is rejected.
pub fn combined_noise_coefficients(sqrt_alpha_bar: f64) -> Result<(f64, f64), DiffusionError> {
    let (m, delta) = continuous_params(sqrt_alpha_bar)?;
    let one_minus = 1.0 - sqrt_alpha_bar * sqrt_alpha_bar;
    if one_minus <= 0.0 {
        return Err(DiffusionError::CleanLevel);
    }
    let denom = one_minus.sqrt();
    Ok((m * sqrt_alpha_bar / denom, delta.sqrt() / denom))
}

/// `x_t = (1 - m) sqrt(ab) x0 + m sqrt(ab) y0 + sqrt(delta) eps`.
pub fn forward_sample<T: Real>(
    pair: &ResidualPair<T>,
    sqrt_alpha_bar: f64,
    eps: &[T],
) -> Result<Vec<T>, DiffusionError> {
    same_len(pair.len(), eps.len())?;
    let (a, b, s) = forward_coefficients(sqrt_alpha_bar)?;
    Ok(pair
        .x0
        .iter()
        .zip(&pair.y0)
        .zip(eps)
        .map(|((&x, &y), &e)| lit(a * f(x) + b * f(y) + s * f(e)))
        .collect())
}

/// The regression target: Gaussian noise plus the non-Gaussian `y0 - x0`
/// part, both normalized by `sqrt(1 - ab)`.
pub fn combined_noise<T: Real>(
    pair: &ResidualPair<T>,
    sqrt_alpha_bar: f64,
    eps: &[T],
) -> Result<Vec<T>, DiffusionError> {
    same_len(pair.len(), eps.len())?;
    let (r, s) = combined_noise_coefficients(sqrt_alpha_bar)?;
    Ok(pair
        .x0
        .iter()
        .zip(&pair.y0)
        .zip(eps)
        .map(|((&x, &y), &e)| lit(r * (f(y) - f(x)) + s * f(e)))
        .collect())
}

/// Mean squared error between predicted and target noise.
pub fn training_loss<T: Real>(eps_hat: &[T], eps_star: &[T]) -> Result<f64, DiffusionError> {
    same_len(eps_hat.len(), eps_star.len())?;
    let n = eps_hat.len().max(1) as f64;
    Ok(eps_hat
        .iter()
        .zip(eps_star)
        .map(|(&a, &b)| (f(a) - f(b)).powi(2))
        .sum::<f64>()
        / n)
}

/// `x_T = sqrt(ab_T) y0 + sqrt(delta_T) z`.
pub fn init_reverse<T: Real, R: Rng + ?Sized>(
    y0: &[T],
    sched: &DiscreteSchedule,
    rng: &mut R,
) -> Vec<T> {
    let big_t = sched.steps();
    let (mean, sd) = (sched.sqrt_alpha_bar(big_t), sched.delta(big_t).sqrt());
    y0.iter()
        .map(|&y| {
            let z: f64 = rng.sample(StandardNormal);
            lit(mean * f(y) + sd * z)
        })
        .collect()
}

/// One ancestral step `x_t -> x_{t-1}`:
/// `cx x_t + cy y0 - ce eps_hat + sqrt(delta_tilde) z`, with no noise at `t = 1`.
pub fn reverse_step<T: Real, R: Rng + ?Sized>(
    x_t: &[T],
    y0: &[T],
    t: usize,
    eps_hat: &[T],
    sched: &DiscreteSchedule,
    rng: &mut R,
) -> Result<Vec<T>, DiffusionError> {
    same_len(x_t.len(), y0.len())?;
    same_len(x_t.len(), eps_hat.len())?;
    let row = sched.reverse_row(t)?;
    let sd = row.delta_tilde.sqrt();
    Ok(x_t
        .iter()
        .zip(y0)
        .zip(eps_hat)
        .map(|((&x, &y), &e)| {
            let mut v = row.cx * f(x) + row.cy * f(y) - row.ce * f(e);
            if t > 1 {
                let z: f64 = rng.sample(StandardNormal);
                v += sd * z;
            }
            lit(v)
        })
        .collect())
}

/// Runs `init_reverse` and then `reverse_step` for `t = T..=1`, querying
/// `predict(x_t, y0, sqrt(ab_t))` for the noise estimate at each step.
pub fn reverse_chain<R, P>(
    y0: &[f32],
    sched: &DiscreteSchedule,
    rng: &mut R,
    mut predict: P,
) -> Result<Vec<f32>, DiffusionError>
where
    R: Rng + ?Sized,
    P: FnMut(&[f32], &[f32], f64) -> Result<Vec<f32>, DiffusionError>,
{
    let mut x = init_reverse(y0, sched, rng);
    for t in (1..=sched.steps()).rev() {
        let eps_hat = predict(&x, y0, sched.sqrt_alpha_bar(t))?;
        x = reverse_step(&x, y0, t, &eps_hat, sched, rng)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite(t));
        }
    }
    Ok(x)
}

/// How the deterministic module is wired around the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainWiring {
    /// Condition on `y - D(y)`, return `x0 + D(y)`.
    Residual,
    /// Condition on `D(y)` itself, return the sampled signal.
    ResidualFree,
    /// No deterministic module: condition on `y`, return the sample.
    NoDeterministic,
}

/// Weights of one network: its config and its tensors in layout order.
#[derive(Debug, Clone, Copy)]
pub struct NetWeights<'a> {
    pub config: &'a NetConfig,
    pub params: &'a [Tensor<f32>],
}

/// Full enhancement of one noisy waveform (before recombination).
pub fn sample_chain<R: Rng + ?Sized>(
    det: NetWeights<'_>,
    sto: NetWeights<'_>,
    wiring: ChainWiring,
    y: &[f32],
    sched: &DiscreteSchedule,
    rng: &mut R,
) -> Result<Vec<f32>, DiffusionError> {
    let predict = |x: &[f32], c: &[f32], level: f64| -> Result<Vec<f32>, DiffusionError> {
        Ok(sto_apply(sto.config, sto.params, x, c, level)?)
    };
    match wiring {
        ChainWiring::NoDeterministic => reverse_chain(y, sched, rng, predict),
        ChainWiring::Residual => {
            let y_init = det_apply(det.config, det.params, y)?;
            let y0: Vec<f32> = y.iter().zip(&y_init).map(|(a, b)| a - b).collect();
            let x0 = reverse_chain(&y0, sched, rng, predict)?;
            Ok(x0.iter().zip(&y_init).map(|(a, b)| a + b).collect())
        }
        ChainWiring::ResidualFree => {
            let y_init = det_apply(det.config, det.params, y)?;
            reverse_chain(&y_init, sched, rng, predict)
        }
    }
}

/// `(1 - ratio) enhanced + ratio noisy`.
pub fn recombine(enhanced: &[f32], noisy: &[f32], ratio: f64) -> Result<Vec<f32>, DiffusionError> {
    same_len(enhanced.len(), noisy.len())?;
    if !(0.0..1.0).contains(&ratio) {
        return Err(DiffusionError::Ratio(ratio));
    }
    Ok(enhanced
        .iter()
        .zip(noisy)
        .map(|(&e, &n)| ((1.0 - ratio) * f64::from(e) + ratio * f64::from(n)) as f32)
        .collect())
}
