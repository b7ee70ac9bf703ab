//! Diffusion-process constants.
//!
//! A [`DiscreteSchedule`] holds every per-step quantity the forward and
//! reverse chains need. Arrays are indexed by step `t` directly: index 0 is
//! the clean endpoint (`alpha_bar[0] = 1`, `m[0] = 0`, `delta[0] = 0`) and
//! indices `1..=T` are the diffusion steps. Reverse coefficients at index 0
//! are unused and stored as zero.
//!
//! All arithmetic here is `f64`; `delta_tilde` near `t = 1` is a difference
//! of nearly equal terms.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Accepted band for the terminal interpolation ratio `m[T]`.
pub const M_TERMINAL_BAND: (f64, f64) = (0.9, 1.1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid beta range: need 0 < beta_start ({start}) <= beta_end ({end}) < 1")]
    BetaRange { start: f64, end: f64 },
    #[error("schedule needs at least one step")]
    NoSteps,
    #[error("terminal interpolation ratio m[T] = {0} is outside [0.9, 1.1]")]
    TerminalRatio(f64),
    #[error("noise level sqrt(alpha_bar) = {0} must lie in (0, 1]")]
    NoiseLevel(f64),
    #[error("step {t} out of range 1..={steps}")]
    Step { t: usize, steps: usize },
}

/// Linear-beta schedule parameters, as stored in configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            beta_start: 1e-4,
            beta_end: 0.035,
            steps: 50,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<DiscreteSchedule, ScheduleError> {
        build_schedule(self.beta_start, self.beta_end, self.steps)
    }
}

/// The four constants of one reverse transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseRow {
    pub cx: f64,
    pub cy: f64,
    pub ce: f64,
    pub delta_tilde: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSchedule {
    params: ScheduleParams,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    m: Vec<f64>,
    delta: Vec<f64>,
    rows: Vec<ReverseRow>,
}

/// Interpolation ratio and forward variance at a continuous noise level.
///
/// `m = sqrt((1 - ab) / sqrt(ab))` and `delta = (1 - ab) - m^2 ab` with
/// `ab = sqrt_alpha_bar^2`. `m` is not clamped to 1.
pub fn continuous_params(sqrt_alpha_bar: f64) -> Result<(f64, f64), ScheduleError> {
    if !(sqrt_alpha_bar > 0.0 && sqrt_alpha_bar <= 1.0) {
        return Err(ScheduleError::NoiseLevel(sqrt_alpha_bar));
    }
    Ok(ratio_and_variance(sqrt_alpha_bar * sqrt_alpha_bar))
}

fn ratio_and_variance(alpha_bar: f64) -> (f64, f64) {
    let m = ((1.0 - alpha_bar) / alpha_bar.sqrt()).sqrt();
    let delta = (1.0 - alpha_bar) - m * m * alpha_bar;
    // Equal to (1 - ab)(1 - sqrt(ab)) >= 0; rounding can leave a tiny negative.
    (m, delta.max(0.0))
}

pub fn build_schedule(
    beta_start: f64,
    beta_end: f64,
    steps: usize,
) -> Result<DiscreteSchedule, ScheduleError> {
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(ScheduleError::BetaRange {
            start: beta_start,
            end: beta_end,
        });
    }
    if steps == 0 {
        return Err(ScheduleError::NoSteps);
    }

    let mut alpha = vec![1.0; steps + 1];
    let mut alpha_bar = vec![1.0; steps + 1];
    for t in 1..=steps {
        let beta = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
        };
        alpha[t] = 1.0 - beta;
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }

    let (m, delta): (Vec<f64>, Vec<f64>) =
        alpha_bar.iter().map(|&ab| ratio_and_variance(ab)).unzip();

    let m_terminal = m[steps];
    if !(M_TERMINAL_BAND.0..=M_TERMINAL_BAND.1).contains(&m_terminal) {
        return Err(ScheduleError::TerminalRatio(m_terminal));
    }

    let mut sched = DiscreteSchedule {
        params: ScheduleParams {
            beta_start,
            beta_end,
            steps,
        },
        alpha,
        alpha_bar,
        m,
        delta,
        rows: Vec::with_capacity(steps + 1),
    };
    sched.rows.push(ReverseRow {
        cx: 0.0,
        cy: 0.0,
        ce: 0.0,
        delta_tilde: 0.0,
    });
    for t in 1..=steps {
        let row = sched.compute_row(t);
        sched.rows.push(row);
    }
    Ok(sched)
}

impl DiscreteSchedule {
    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn m(&self, t: usize) -> f64 {
        self.m[t]
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t]
    }

    pub fn delta_tilde(&self, t: usize) -> f64 {
        self.rows[t].delta_tilde
    }

    /// Reverse-step constants for `1 <= t <= T`.
    pub fn reverse_row(&self, t: usize) -> Result<ReverseRow, ScheduleError> {
        if t == 0 || t > self.steps() {
            return Err(ScheduleError::Step {
                t,
                steps: self.steps(),
            });
        }
        Ok(self.rows[t])
    }

    fn compute_row(&self, t: usize) -> ReverseRow {
        let a = self.alpha[t];
        let sqrt_a = a.sqrt();
        if t == 1 {
            // delta[0] = 0: the delta_{t-1} -> 0 limits of the general formulas.
            return ReverseRow {
                cx: 1.0 / sqrt_a,
                cy: 0.0,
                ce: (1.0 - self.alpha_bar[1]).sqrt() / sqrt_a,
                delta_tilde: 0.0,
            };
        }
        let (m_t, m_p) = (self.m[t], self.m[t - 1]);
        let (d_t, d_p) = (self.delta[t], self.delta[t - 1]);
        let ratio = (1.0 - m_t) / (1.0 - m_p);

        let delta_tilde = (d_p - ratio * ratio * a * d_p * d_p / d_t).max(0.0);
        let cx = ratio * (d_p / d_t) * sqrt_a + (1.0 - m_p) * (delta_tilde / d_p) / sqrt_a;
        let cy = (m_p * d_t - ratio * m_t * a * d_p) * self.alpha_bar[t - 1].sqrt() / d_t;
        let ce = (1.0 - m_p) * (delta_tilde / d_p) * (1.0 - self.alpha_bar[t]).sqrt() / sqrt_a;
        ReverseRow {
            cx,
            cy,
            ce,
            delta_tilde,
        }
    }

    /// CSV with header `t,alpha,alpha_bar,m,delta,delta_tilde,cx,cy,ce`,
    /// values printed with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,alpha,alpha_bar,m,delta,delta_tilde,cx,cy,ce\n");
        for t in 1..=self.steps() {
            let r = self.rows[t];
            let cols = [
                self.alpha[t],
                self.alpha_bar[t],
                self.m[t],
                self.delta[t],
                r.delta_tilde,
                r.cx,
                r.cy,
                r.ce,
            ];
            out.push_str(&t.to_string());
            for v in cols {
                out.push(',');
                out.push_str(&format!("{v:.16e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Band edges `l[0] = 1 > l[1] > ... > l[S]` with `l[s] = sqrt(alpha_bar[s])`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLevelBands {
    edges: Vec<f64>,
}

pub fn noise_level_bands(sched: &DiscreteSchedule) -> NoiseLevelBands {
    NoiseLevelBands {
        edges: (0..=sched.steps())
            .map(|t| sched.sqrt_alpha_bar(t))
            .collect(),
    }
}

impl NoiseLevelBands {
    /// Number of bands `S`.
    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Hierarchical draw: a band uniformly from `1..=S`, then a level
    /// uniformly inside `(l[s], l[s-1])`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let s = rng.random_range(1..=self.len());
        let (hi, lo) = (self.edges[s - 1], self.edges[s]);
        loop {
            let u: f64 = rng.random();
            let v = lo + (hi - lo) * u;
            if v > lo && v < hi {
                return v;
            }
        }
    }
}

pub fn sample_noise_level<R: Rng + ?Sized>(bands: &NoiseLevelBands, rng: &mut R) -> f64 {
    bands.sample(rng)
}
