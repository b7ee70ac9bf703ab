//! WebAssembly bindings for the static demo page in `www/`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use srtnet::data::{CleanKind, DatasetSpec, NoiseKind, Pair};
use srtnet::diffusion::{forward_sample, init_reverse, reverse_step, ResidualPair};
use srtnet::metrics::si_snr;
use srtnet::schedule::{DiscreteSchedule, ScheduleParams};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn schedule(beta_start: f64, beta_end: f64, steps: usize) -> Result<DiscreteSchedule, JsError> {
    ScheduleParams {
        beta_start,
        beta_end,
        steps,
    }
    .build()
    .map_err(js_err)
}

/// Rows `t, alpha_bar, m, delta, delta_tilde` for `t = 0..=T`, flattened.
#[wasm_bindgen]
pub fn schedule_table(beta_start: f64, beta_end: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    let s = schedule(beta_start, beta_end, steps)?;
    let mut out = Vec::with_capacity(5 * (steps + 1));
    for t in 0..=steps {
        out.extend([
            t as f64,
            s.alpha_bar(t),
            s.m(t),
            s.delta(t),
            s.delta_tilde(t),
        ]);
    }
    Ok(out)
}

fn noise_kind(name: &str) -> Result<NoiseKind, JsError> {
    match name {
        "white" => Ok(NoiseKind::White),
        "pink" => Ok(NoiseKind::Pink),
        "burst" => Ok(NoiseKind::FilteredBurst),
        _ => Err(JsError::new(&format!("unknown noise kind {name:?}"))),
    }
}

/// A synthetic clean/noisy clip and the schedule it is diffused with.
#[wasm_bindgen]
pub struct Scene {
    pair: Pair,
    sched: DiscreteSchedule,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, snr_db: f64, noise: &str, steps: usize) -> Result<Scene, JsError> {
        let spec = DatasetSpec {
            n_clips: 1,
            clip_seconds: 0.25,
            snr_grid_db: vec![snr_db],
            clean_kind: CleanKind::SineMixture,
            noise_kind: noise_kind(noise)?,
            seed,
            ..DatasetSpec::default()
        };
        Ok(Scene {
            pair: spec.pair(0).map_err(js_err)?,
            sched: schedule(1e-4, 0.035, steps)?,
        })
    }

    pub fn clean(&self) -> Vec<f32> {
        self.pair.clean.samples.clone()
    }

    pub fn noisy(&self) -> Vec<f32> {
        self.pair.noisy.samples.clone()
    }

    pub fn steps(&self) -> usize {
        self.sched.steps()
    }

    /// `x_t` drawn from the forward process between the clean and noisy clip.
    pub fn diffuse(&self, t: usize, seed: u64) -> Result<Vec<f32>, JsError> {
        if t > self.sched.steps() {
            return Err(JsError::new("step beyond the schedule"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f32> = (0..self.pair.clean.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let pair = ResidualPair::new(self.clean(), self.noisy()).map_err(js_err)?;
        forward_sample(&pair, self.sched.sqrt_alpha_bar(t), &eps).map_err(js_err)
    }

    /// Reverse chain from the noisy clip down to step `stop`, with the exact
    /// noise plus Gaussian error of standard deviation `error` standing in
    /// for a trained denoiser.
    pub fn reverse(&self, stop: usize, error: f64, seed: u64) -> Result<Vec<f32>, JsError> {
        let (x0, y0) = (self.clean(), self.noisy());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = init_reverse(&y0, &self.sched, &mut rng);
        for t in (stop.max(1)..=self.sched.steps()).rev() {
            let ab = self.sched.alpha_bar(t);
            let eps: Vec<f32> = x
                .iter()
                .zip(&x0)
                .map(|(&x, &c)| {
                    let exact = (f64::from(x) - ab.sqrt() * f64::from(c)) / (1.0 - ab).sqrt();
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (exact + error * z) as f32
                })
                .collect();
            x = reverse_step(&x, &y0, t, &eps, &self.sched, &mut rng).map_err(js_err)?;
        }
        Ok(x)
    }

    /// SI-SNR of `est` against the clean clip, in dB.
    pub fn score(&self, est: &[f32]) -> Result<f64, JsError> {
        si_snr(est, &self.pair.clean.samples).map_err(js_err)
    }
}
