//! Joint training of the deterministic module and the residual denoiser,
//! enhancement, evaluation and checkpoints.

pub mod benchmark;
mod checkpoint;
mod eval;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    AdamSnapshot, Checkpoint, CheckpointError, TensorEntry, FORMAT_VERSION, MAGIC,
};
pub use eval::{enhance, evaluate, evaluate_with, ClipScore, EnhanceOptions, Enhanced, EvalReport};

use crate::data::{DataError, Dataset};
use crate::diffusion::{
    combined_noise_coefficients, forward_coefficients, ChainWiring, DiffusionError, NetWeights,
};
use crate::grad::{AdamConfig, AdamState, GradError, Graph, Tensor, Var};
use crate::metrics::MetricError;
use crate::nets::{
    det_forward, init_params, layout, sto_forward, NetConfig, NetError, NetKind, ParamSet,
};
use crate::schedule::{
    noise_level_bands, DiscreteSchedule, NoiseLevelBands, ScheduleError, ScheduleParams,
};

const STREAM_DET_INIT: u64 = 1;
const STREAM_STO_INIT: u64 = 2;
const STREAM_EPOCH: u64 = 1 << 62;
const STREAM_CROP: u64 = 1 << 63;
const STREAM_NOISE: u64 = (1 << 63) | (1 << 62);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(
        "non-finite loss at step {step}: levels in [{level_min}, {level_max}], \
         parameter norm {param_norm}, input norm {input_norm}"
    )]
    NonFinite {
        step: u64,
        level_min: f64,
        level_max: f64,
        param_norm: f64,
        input_norm: f64,
    },
    #[error("{0}: {1}")]
    Io(String, String),
}

/// Which parts of the model are trained and how they are wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VariantMode {
    /// Diffusion on the residuals `x - D(y)` and `y - D(y)`.
    Srtnet,
    /// Diffusion on `x` conditioned on `D(y)`.
    ResidualFree,
    /// `ResidualFree` plus a squared error between `D(y)` and `x`.
    ResidualFreeAuxLoss,
    /// No deterministic module: diffusion on `x` conditioned on `y`.
    NoDeterministic,
}

impl VariantMode {
    pub const ALL: [VariantMode; 4] = [
        VariantMode::Srtnet,
        VariantMode::ResidualFree,
        VariantMode::ResidualFreeAuxLoss,
        VariantMode::NoDeterministic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantMode::Srtnet => "SRTNET",
            VariantMode::ResidualFree => "RESIDUAL_FREE",
            VariantMode::ResidualFreeAuxLoss => "RESIDUAL_FREE_AUX_LOSS",
            VariantMode::NoDeterministic => "NO_DETERMINISTIC",
        }
    }

    pub fn has_deterministic(self) -> bool {
        self != VariantMode::NoDeterministic
    }

    pub fn wiring(self) -> ChainWiring {
        match self {
            VariantMode::Srtnet => ChainWiring::Residual,
            VariantMode::ResidualFree | VariantMode::ResidualFreeAuxLoss => {
                ChainWiring::ResidualFree
            }
            VariantMode::NoDeterministic => ChainWiring::NoDeterministic,
        }
    }
}

impl fmt::Display for VariantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
                format!("unknown mode {s:?}; expected one of {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: VariantMode,
    /// Total optimizer steps; a resumed run continues up to this count.
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: ScheduleParams,
    pub aux_loss_weight: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Samples per training crop.
    pub segment_len: usize,
    pub det_net: NetConfig,
    pub sto_net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: VariantMode::Srtnet,
            steps: 5000,
            batch_size: 32,
            lr: 2e-4,
            schedule: ScheduleParams::default(),
            aux_loss_weight: 1.0,
            seed: 0,
            checkpoint_every: 1000,
            segment_len: 512,
            det_net: NetConfig::default(),
            sto_net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.batch_size == 0 || self.segment_len == 0 || self.checkpoint_every == 0 {
            return bad("batch_size, segment_len and checkpoint_every must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be a positive finite number");
        }
        if !(self.aux_loss_weight >= 0.0 && self.aux_loss_weight.is_finite()) {
            return bad("aux_loss_weight must be non-negative and finite");
        }
        self.det_net.validate()?;
        self.sto_net.validate()?;
        self.schedule.build()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Fresh parameters: `det.*` (absent without a deterministic module) then `sto.*`.
pub fn init_model_params(config: &TrainConfig) -> ParamSet<f32> {
    let mut params = ParamSet::new();
    if config.mode.has_deterministic() {
        let mut rng = config.rng(STREAM_DET_INIT);
        params.extend(init_params(
            &config.det_net,
            NetKind::Deterministic,
            "det.",
            &mut rng,
        ));
    }
    let mut rng = config.rng(STREAM_STO_INIT);
    params.extend(init_params(
        &config.sto_net,
        NetKind::Denoiser,
        "sto.",
        &mut rng,
    ));
    params
}

/// Inference view of a checkpoint.
#[derive(Debug, Clone)]
pub struct Model {
    pub mode: VariantMode,
    pub det_config: NetConfig,
    pub sto_config: NetConfig,
    pub schedule: DiscreteSchedule,
    params: ParamSet<f32>,
    n_det: usize,
}

fn check_names(
    params: &ParamSet<f32>,
    expected: &[(String, Vec<usize>)],
) -> Result<(), PipelineError> {
    if params.len() != expected.len() {
        return Err(CheckpointError::Manifest(format!(
            "expected {} tensors, found {}",
            expected.len(),
            params.len()
        ))
        .into());
    }
    for ((name, t), (want, shape)) in params.iter().zip(expected) {
        if name != want || t.shape() != shape.as_slice() {
            return Err(CheckpointError::Manifest(format!(
                "tensor {name} {:?} where {want} {shape:?} was expected",
                t.shape()
            ))
            .into());
        }
    }
    Ok(())
}

fn expected_layout(
    mode: VariantMode,
    det: &NetConfig,
    sto: &NetConfig,
) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    if mode.has_deterministic() {
        for (n, s) in layout(det, NetKind::Deterministic) {
            out.push((format!("det.{n}"), s));
        }
    }
    for (n, s) in layout(sto, NetKind::Denoiser) {
        out.push((format!("sto.{n}"), s));
    }
    out
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, PipelineError> {
        ckpt.det_config.validate()?;
        ckpt.sto_config.validate()?;
        check_names(
            &ckpt.params,
            &expected_layout(ckpt.mode, &ckpt.det_config, &ckpt.sto_config),
        )?;
        let n_det = if ckpt.mode.has_deterministic() {
            layout(&ckpt.det_config, NetKind::Deterministic).len()
        } else {
            0
        };
        Ok(Self {
            mode: ckpt.mode,
            det_config: ckpt.det_config.clone(),
            sto_config: ckpt.sto_config.clone(),
            schedule: ckpt.schedule.build()?,
            params: ckpt.params.clone(),
            n_det,
        })
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn det_weights(&self) -> NetWeights<'_> {
        NetWeights {
            config: &self.det_config,
            params: &self.params.tensors()[..self.n_det],
        }
    }

    pub fn sto_weights(&self) -> NetWeights<'_> {
        NetWeights {
            config: &self.sto_config,
            params: &self.params.tensors()[self.n_det..],
        }
    }

    /// Samples with a different step count than the one trained with.
    pub fn with_schedule(mut self, schedule: DiscreteSchedule) -> Self {
        self.schedule = schedule;
        self
    }
}

/// `batch` aligned crops of `len` samples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub clean: Vec<f32>,
    pub noisy: Vec<f32>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    pub fn new(clean: Vec<f32>, noisy: Vec<f32>, batch: usize) -> Result<Self, PipelineError> {
        if batch == 0
            || clean.len() != noisy.len()
            || !clean.len().is_multiple_of(batch)
            || clean.is_empty()
        {
            return Err(PipelineError::Config(format!(
                "batch of {batch} needs equal non-empty clean/noisy buffers divisible by it \
                 (got {} and {})",
                clean.len(),
                noisy.len()
            )));
        }
        let len = clean.len() / batch;
        Ok(Self {
            clean,
            noisy,
            batch,
            len,
        })
    }
}

/// Per-step draws of the objective: a noise level per item and Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    pub levels: Vec<f64>,
    pub eps: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub loss: f32,
    pub wall_ms: u64,
}

pub const LOSS_LOG_HEADER: &str = "step,loss,wall_ms";

impl LossRow {
    pub fn csv(&self) -> String {
        format!("{},{:e},{}", self.step, self.loss, self.wall_ms)
    }
}

fn norm(xs: impl Iterator<Item = f32>) -> f64 {
    xs.map(|v| f64::from(v).powi(2)).sum::<f64>().sqrt()
}

/// Training state: parameters of both networks and one Adam state over their union.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    bands: NoiseLevelBands,
    params: ParamSet<f32>,
    n_det: usize,
    adam: AdamState<f32>,
    step: u64,
    epoch_cache: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let params = init_model_params(&config);
        let adam = AdamState::new(config.adam(), params.tensors());
        Self::assemble(config, params, adam, 0)
    }

    /// Continues from `ckpt`. Everything except `steps` and
    /// `checkpoint_every` must match the checkpoint's training config.
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut saved = ckpt.train.clone();
        saved.steps = config.steps;
        saved.checkpoint_every = config.checkpoint_every;
        if saved != config {
            return Err(PipelineError::Resume(
                "training config differs from the checkpoint's".into(),
            ));
        }
        let model = Model::from_checkpoint(ckpt)?;
        let adam = match &ckpt.adam {
            Some(a) => AdamState {
                config: a.config,
                step: a.step,
                first: a.first.clone(),
                second: a.second.clone(),
            },
            None => {
                return Err(PipelineError::Resume(
                    "checkpoint has no optimizer state".into(),
                ))
            }
        };
        for ((t, m), v) in model
            .params
            .tensors()
            .iter()
            .zip(&adam.first)
            .zip(&adam.second)
        {
            if m.len() != t.len() || v.len() != t.len() {
                return Err(CheckpointError::Manifest("optimizer moment sizes".into()).into());
            }
        }
        Self::assemble(config, model.params, adam, ckpt.step)
    }

    fn assemble(
        config: TrainConfig,
        params: ParamSet<f32>,
        adam: AdamState<f32>,
        step: u64,
    ) -> Result<Self, PipelineError> {
        let bands = noise_level_bands(&config.schedule.build()?);
        let n_det = if config.mode.has_deterministic() {
            layout(&config.det_net, NetKind::Deterministic).len()
        } else {
            0
        };
        Ok(Self {
            config,
            bands,
            params,
            n_det,
            adam,
            step,
            epoch_cache: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    /// Stops the deterministic module from learning; its tensors become constants.
    pub fn freeze_deterministic(&mut self) {
        for t in &mut self.params.tensors_mut()[..self.n_det] {
            t.requires_grad = false;
            t.grad = None;
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            mode: self.config.mode,
            step: self.step,
            det_config: self.config.det_net.clone(),
            sto_config: self.config.sto_net.clone(),
            schedule: self.config.schedule,
            train: self.config.clone(),
            params: self.params.clone(),
            adam: Some(AdamSnapshot {
                config: self.adam.config,
                step: self.adam.step,
                first: self.adam.first.clone(),
                second: self.adam.second.clone(),
            }),
        }
    }

    fn epoch_order(&mut self, epoch: u64, n: usize) -> &[usize] {
        if self.epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut self.config.rng(STREAM_EPOCH | epoch));
            self.epoch_cache = Some((epoch, order));
        }
        &self.epoch_cache.as_ref().expect("filled above").1
    }

    /// Crops for the step about to run. Items are taken in shuffled epoch
    /// order; crop offsets come from the step's own random stream.
    pub fn next_batch(&mut self, data: &Dataset) -> Result<Batch, PipelineError> {
        let n = data.len();
        if n == 0 {
            return Err(PipelineError::EmptyDataset);
        }
        let (b, seg) = (self.config.batch_size, self.config.segment_len);
        let mut rng = self.config.rng(STREAM_CROP | self.step);
        let mut clean = Vec::with_capacity(b * seg);
        let mut noisy = Vec::with_capacity(b * seg);
        for j in 0..b {
            let k = self.step * b as u64 + j as u64;
            let idx = self.epoch_order(k / n as u64, n)[(k % n as u64) as usize];
            let pair = &data.pairs[idx];
            let len = pair.clean.len();
            if len < seg {
                return Err(PipelineError::Config(format!(
                    "clip {} has {len} samples, fewer than segment_len {seg}",
                    data.ids[idx]
                )));
            }
            let off = rng.random_range(0..=len - seg);
            clean.extend_from_slice(&pair.clean.samples[off..off + seg]);
            noisy.extend_from_slice(&pair.noisy.samples[off..off + seg]);
        }
        Batch::new(clean, noisy, b)
    }

    /// Levels and noise for the step about to run.
    pub fn step_noise(&self, batch: usize, len: usize) -> StepNoise {
        let mut rng = self.config.rng(STREAM_NOISE | self.step);
        let levels = (0..batch).map(|_| self.bands.sample(&mut rng)).collect();
        let eps = (0..batch * len)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        StepNoise { levels, eps }
    }

    /// One optimizer step with this step's seeded noise draws.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f32, PipelineError> {
        let noise = self.step_noise(batch.batch, batch.len);
        self.train_step_with(batch, &noise)
    }

    /// Builds the objective, backpropagates, clears stale gradients and
    /// applies one Adam update. Returns the loss before the update.
    pub fn train_step_with(
        &mut self,
        batch: &Batch,
        noise: &StepNoise,
    ) -> Result<f32, PipelineError> {
        let g = Graph::new();
        let (loss, vars) = self.objective(&g, batch, noise)?;
        let value = g.item(loss);
        if !value.is_finite() {
            let (lo, hi) = noise
                .levels
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &l| {
                    (a.min(l), b.max(l))
                });
            return Err(PipelineError::NonFinite {
                step: self.step + 1,
                level_min: lo,
                level_max: hi,
                param_norm: norm(
                    self.params
                        .tensors()
                        .iter()
                        .flat_map(|t| t.data().iter().copied()),
                ),
                input_norm: norm(batch.noisy.iter().copied()),
            });
        }
        g.backward(loss)?;
        self.params.zero_grads();
        self.params.pull_grads(&g, &vars);
        self.adam.step(self.params.tensors_mut())?;
        self.step += 1;
        Ok(value)
    }

    /// Gradients of the objective for the current parameters, without
    /// updating them.
    pub fn gradients(
        &self,
        batch: &Batch,
        noise: &StepNoise,
    ) -> Result<(f32, ParamSet<f32>), PipelineError> {
        let g = Graph::new();
        let (loss, vars) = self.objective(&g, batch, noise)?;
        g.backward(loss)?;
        let mut params = self.params.clone();
        params.zero_grads();
        params.pull_grads(&g, &vars);
        Ok((g.item(loss), params))
    }

    fn objective(
        &self,
        g: &Graph<f32>,
        batch: &Batch,
        noise: &StepNoise,
    ) -> Result<(Var, Vec<Var>), PipelineError> {
        let (b, len) = (batch.batch, batch.len);
        if noise.levels.len() != b || noise.eps.len() != b * len {
            return Err(PipelineError::Config(
                "noise draws do not match the batch".into(),
            ));
        }
        let shape = vec![b, 1, len];
        let x = g.constant(&Tensor::new(shape.clone(), batch.clean.clone())?);
        let y = g.constant(&Tensor::new(shape.clone(), batch.noisy.clone())?);
        let eps = g.constant(&Tensor::new(shape, noise.eps.clone())?);

        let vars = self.params.bind(g);
        let (det_w, sto_w) = vars.split_at(self.n_det);
        let mode = self.config.mode;

        let y_init = if mode.has_deterministic() {
            Some(det_forward(g, &self.config.det_net, det_w, y)?)
        } else {
            None
        };
        let (x0, y0) = match (mode, y_init) {
            (VariantMode::Srtnet, Some(yi)) => (g.sub(x, yi)?, g.sub(y, yi)?),
            (VariantMode::ResidualFree | VariantMode::ResidualFreeAuxLoss, Some(yi)) => (x, yi),
            _ => (x, y),
        };

        let mut ca = Vec::with_capacity(b);
        let mut cb = Vec::with_capacity(b);
        let mut cs = Vec::with_capacity(b);
        let mut cr = Vec::with_capacity(b);
        let mut cq = Vec::with_capacity(b);
        for &l in &noise.levels {
            let (a, bb, s) = forward_coefficients(l)?;
            let (r, q) = combined_noise_coefficients(l)?;
            ca.push(a as f32);
            cb.push(bb as f32);
            cs.push(s as f32);
            cr.push(r as f32);
            cq.push(q as f32);
        }
        let x_t = g.add(
            g.add(g.scale_batch(x0, &ca)?, g.scale_batch(y0, &cb)?)?,
            g.scale_batch(eps, &cs)?,
        )?;
        let eps_star = g.add(
            g.scale_batch(g.sub(y0, x0)?, &cr)?,
            g.scale_batch(eps, &cq)?,
        )?;
        let eps_hat = sto_forward(g, &self.config.sto_net, sto_w, x_t, y0, &noise.levels)?;
        let mut loss = g.mse(eps_hat, eps_star)?;
        if let (VariantMode::ResidualFreeAuxLoss, Some(yi)) = (mode, y_init) {
            let aux = g.mse(yi, x)?;
            loss = g.add(loss, g.scale(aux, self.config.aux_loss_weight as f32))?;
        }
        Ok((loss, vars))
    }
}

/// Runs the trainer up to `config.steps`. `on_step` sees every loss row;
/// `on_checkpoint` receives a checkpoint every `checkpoint_every` steps.
/// Returns the final checkpoint.
pub fn train<S, C>(
    trainer: &mut Trainer,
    data: &Dataset,
    mut on_step: S,
    mut on_checkpoint: C,
) -> Result<Checkpoint, PipelineError>
where
    S: FnMut(&LossRow) -> Result<(), PipelineError>,
    C: FnMut(&Checkpoint) -> Result<(), PipelineError>,
{
    if data.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let start = Instant::now();
    while trainer.step < trainer.config.steps {
        let batch = trainer.next_batch(data)?;
        let loss = trainer.train_step(&batch)?;
        on_step(&LossRow {
            step: trainer.step,
            loss,
            wall_ms: start.elapsed().as_millis() as u64,
        })?;
        if trainer.step.is_multiple_of(trainer.config.checkpoint_every) {
            on_checkpoint(&trainer.checkpoint())?;
        }
    }
    Ok(trainer.checkpoint())
}
