//! The deterministic pre-enhancer and the noise-predicting denoiser.
//!
//! Both are small dilated 1-D convolutional residual networks working
//! directly on waveforms shaped `(batch, 1, len)`. Each residual block is
//!
//! ```text
//! z    = dilated_conv(h)                      (+ level(e) and cond(y0), denoiser only)
//! a    = tanh(z)
//! h    = (h + res_1x1(a)) / sqrt(2)
//! skip = skip + skip_1x1(a)
//! ```
//!
//! followed by `out_1x1(relu(post_1x1(relu(skip / sqrt(n)))))`. The final
//! projection starts at zero, so an untrained network outputs zeros.
//!
//! Only the denoiser sees the noise level and the conditioner. The level is
//! encoded with [`encode_noise_level`], passed through two dense+relu layers
//! and projected per block; the conditioner waveform enters every block
//! through its own dilated conv.
//!
//! Parameter counts, with `C` channels, kernel `K` and `n` blocks:
//!
//! ```text
//! deterministic: n (K C^2 + 2 C^2 + 3 C) + C^2 + 4 C + 1
//! denoiser:      deterministic + n (C^2 + K C + 2 C) + C^2 + 130 C
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{lit, GradError, Graph, Real, Tensor, Var};

/// Length of the noise-level embedding.
pub const EMBED_DIM: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("input contains non-finite samples")]
    NonFinite,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("noise level {0} must lie in (0, 1]")]
    Level(f64),
    #[error("parameter layout mismatch: expected {expected} tensors, got {got}")]
    Layout { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub n_blocks: usize,
    pub channels: usize,
    pub dilation_cycle: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            channels: 16,
            dilation_cycle: vec![1, 2, 4, 8],
            kernel_size: 3,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.n_blocks == 0 || self.channels == 0 || self.kernel_size == 0 {
            return Err(NetError::Config("sizes must be positive".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(NetError::Config(format!(
                "kernel_size {} must be odd",
                self.kernel_size
            )));
        }
        if self.dilation_cycle.is_empty() || self.dilation_cycle.contains(&0) {
            return Err(NetError::Config(
                "dilation_cycle must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }

    fn dilation(&self, block: usize) -> usize {
        self.dilation_cycle[block % self.dilation_cycle.len()]
    }
}

/// `sin(10^(4k/63) * level)` for `k < 64`, then the matching cosines.
pub fn encode_noise_level(sqrt_alpha_bar: f64) -> Result<[f64; EMBED_DIM], NetError> {
    if !(sqrt_alpha_bar > 0.0 && sqrt_alpha_bar <= 1.0) {
        return Err(NetError::Level(sqrt_alpha_bar));
    }
    let half = EMBED_DIM / 2;
    let mut out = [0.0; EMBED_DIM];
    for k in 0..half {
        let arg = 10f64.powf(4.0 * k as f64 / 63.0) * sqrt_alpha_bar;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    Ok(out)
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn extend(&mut self, other: ParamSet<T>) {
        self.names.extend(other.names);
        self.tensors.extend(other.tensors);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on `g`, tracking gradients for those that ask.
    pub fn bind(&self, g: &Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t)).collect()
    }

    /// Adds the graph's gradients for `vars` into the tensors' `grad`.
    pub fn pull_grads(&mut self, g: &Graph<T>, vars: &[Var]) {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if !t.requires_grad {
                continue;
            }
            let grad = g.grad(v).unwrap_or_else(|| vec![T::zero(); t.len()]);
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &b)| *a += b),
                slot => *slot = Some(grad),
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Deterministic,
    Denoiser,
}

/// Shape list for one network; the order is the forward pass's read order.
pub fn layout(config: &NetConfig, kind: NetKind) -> Vec<(String, Vec<usize>)> {
    let c = config.channels;
    let k = config.kernel_size;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>| out.push((name, shape));

    if kind == NetKind::Denoiser {
        add("embed.fc1.w".into(), vec![EMBED_DIM, c]);
        add("embed.fc1.b".into(), vec![c]);
        add("embed.fc2.w".into(), vec![c, c]);
        add("embed.fc2.b".into(), vec![c]);
    }
    add("input.w".into(), vec![c, 1, 1]);
    add("input.b".into(), vec![c]);
    for j in 0..config.n_blocks {
        if kind == NetKind::Denoiser {
            add(format!("blocks.{j}.level.w"), vec![c, c]);
            add(format!("blocks.{j}.level.b"), vec![c]);
            add(format!("blocks.{j}.cond.w"), vec![c, 1, k]);
            add(format!("blocks.{j}.cond.b"), vec![c]);
        }
        add(format!("blocks.{j}.dil.w"), vec![c, c, k]);
        add(format!("blocks.{j}.dil.b"), vec![c]);
        add(format!("blocks.{j}.res.w"), vec![c, c, 1]);
        add(format!("blocks.{j}.res.b"), vec![c]);
        add(format!("blocks.{j}.skip.w"), vec![c, c, 1]);
        add(format!("blocks.{j}.skip.b"), vec![c]);
    }
    add("post.w".into(), vec![c, c, 1]);
    add("post.b".into(), vec![c]);
    add("out.w".into(), vec![1, c, 1]);
    add("out.b".into(), vec![1]);
    out
}

/// Closed-form parameter count (see the module docs).
pub fn param_count(config: &NetConfig, kind: NetKind) -> usize {
    let (c, k, n) = (config.channels, config.kernel_size, config.n_blocks);
    let det = n * (k * c * c + 2 * c * c + 3 * c) + c * c + 4 * c + 1;
    match kind {
        NetKind::Deterministic => det,
        NetKind::Denoiser => det + n * (c * c + k * c + 2 * c) + c * c + 130 * c,
    }
}

/// Fan-in uniform weights with unit-variance scaling, zero biases, and a
/// zero final projection. Names are prefixed with `prefix`.
pub fn init_params<T: Real, R: Rng + ?Sized>(
    config: &NetConfig,
    kind: NetKind,
    prefix: &str,
    rng: &mut R,
) -> ParamSet<T> {
    let mut set = ParamSet::new();
    for (name, shape) in layout(config, kind) {
        let n: usize = shape.iter().product();
        let data: Vec<T> = if name.ends_with(".b") || name.starts_with("out.") {
            vec![T::zero(); n]
        } else {
            // conv (out, in, k) and dense (in, out) both fan in over all but one axis
            let fan_in = if shape.len() == 3 {
                shape[1] * shape[2]
            } else {
                shape[0]
            };
            let a = (3.0 / fan_in as f64).sqrt();
            (0..n).map(|_| lit(rng.random_range(-a..a))).collect()
        };
        let t = Tensor::new(shape, data)
            .expect("layout shapes are non-empty")
            .with_grad();
        set.push(format!("{prefix}{name}"), t);
    }
    set
}

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}

fn check_layout(config: &NetConfig, kind: NetKind, w: &[Var]) -> Result<(), NetError> {
    config.validate()?;
    let expected = layout(config, kind).len();
    if w.len() != expected {
        return Err(NetError::Layout {
            expected,
            got: w.len(),
        });
    }
    Ok(())
}

/// Shared residual stack. `cond` supplies the denoiser's per-block
/// additions to the dilated conv output.
fn trunk<T: Real>(
    g: &Graph<T>,
    config: &NetConfig,
    cur: &mut Cursor<'_>,
    input: Var,
    mut cond: Option<(Var, Var)>,
) -> Result<Var, NetError> {
    let (iw, ib) = (cur.next(), cur.next());
    let mut h = g.relu(g.conv1d(input, iw, Some(ib), 1)?);
    let mut skips: Option<Var> = None;
    let inv_sqrt2 = lit::<T>(std::f64::consts::FRAC_1_SQRT_2);

    for j in 0..config.n_blocks {
        let d = config.dilation(j);
        let z = match cond.as_mut() {
            Some((embed, y0)) => {
                let (lw, lb, cw, cb) = (cur.next(), cur.next(), cur.next(), cur.next());
                let level = g.dense(*embed, lw, Some(lb))?;
                let h_in = g.add_over_time(h, level)?;
                let (dw, db) = (cur.next(), cur.next());
                let z = g.conv1d(h_in, dw, Some(db), d)?;
                g.add(z, g.conv1d(*y0, cw, Some(cb), d)?)?
            }
            None => {
                let (dw, db) = (cur.next(), cur.next());
                g.conv1d(h, dw, Some(db), d)?
            }
        };
        let a = g.tanh(z);
        let (rw, rb, sw, sb) = (cur.next(), cur.next(), cur.next(), cur.next());
        let res = g.conv1d(a, rw, Some(rb), 1)?;
        let skip = g.conv1d(a, sw, Some(sb), 1)?;
        h = g.scale(g.add(h, res)?, inv_sqrt2);
        skips = Some(match skips {
            Some(s) => g.add(s, skip)?,
            None => skip,
        });
    }

    let skips = skips.expect("n_blocks > 0");
    let s = g.relu(g.scale(skips, lit(1.0 / (config.n_blocks as f64).sqrt())));
    let (pw, pb, ow, ob) = (cur.next(), cur.next(), cur.next(), cur.next());
    let s = g.relu(g.conv1d(s, pw, Some(pb), 1)?);
    Ok(g.conv1d(s, ow, Some(ob), 1)?)
}

/// Deterministic module on a `(B, 1, L)` waveform batch.
pub fn det_forward<T: Real>(
    g: &Graph<T>,
    config: &NetConfig,
    w: &[Var],
    y: Var,
) -> Result<Var, NetError> {
    check_layout(config, NetKind::Deterministic, w)?;
    let mut cur = Cursor { vars: w, pos: 0 };
    trunk(g, config, &mut cur, y, None)
}

/// Noise predictor on `(B, 1, L)` batches with one noise level per item.
pub fn sto_forward<T: Real>(
    g: &Graph<T>,
    config: &NetConfig,
    w: &[Var],
    x_t: Var,
    y0: Var,
    levels: &[f64],
) -> Result<Var, NetError> {
    check_layout(config, NetKind::Denoiser, w)?;
    let (xs, ys) = (g.shape(x_t), g.shape(y0));
    if xs != ys {
        return Err(GradError::ShapeMismatch {
            op: "sto_forward",
            left: xs,
            right: ys,
        }
        .into());
    }
    if levels.len() != xs[0] {
        return Err(NetError::Length(levels.len(), xs[0]));
    }
    let mut codes = Vec::with_capacity(levels.len() * EMBED_DIM);
    for &l in levels {
        codes.extend(encode_noise_level(l)?.iter().map(|&v| lit::<T>(v)));
    }
    let codes = g.constant(&Tensor::new(vec![levels.len(), EMBED_DIM], codes)?);

    let mut cur = Cursor { vars: w, pos: 0 };
    let (f1w, f1b, f2w, f2b) = (cur.next(), cur.next(), cur.next(), cur.next());
    let e = g.relu(g.dense(codes, f1w, Some(f1b))?);
    let e = g.relu(g.dense(e, f2w, Some(f2b))?);
    trunk(g, config, &mut cur, x_t, Some((e, y0)))
}

fn check_finite(x: &[f32]) -> Result<(), NetError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NetError::NonFinite)
    }
}

fn waveform_leaf(g: &Graph<f32>, x: &[f32]) -> Result<Var, NetError> {
    Ok(g.constant(&Tensor::new(vec![1, 1, x.len()], x.to_vec())?))
}

/// Inference helper: `D(y)` for one waveform. `params` holds exactly the
/// deterministic module's tensors.
pub fn det_apply(
    config: &NetConfig,
    params: &[Tensor<f32>],
    y: &[f32],
) -> Result<Vec<f32>, NetError> {
    check_finite(y)?;
    let g = Graph::new();
    let w: Vec<Var> = params.iter().map(|t| g.constant(t)).collect();
    let input = waveform_leaf(&g, y)?;
    let out = det_forward(&g, config, &w, input)?;
    Ok(g.value(out))
}

/// Inference helper: the denoiser's noise estimate for one waveform.
pub fn sto_apply(
    config: &NetConfig,
    params: &[Tensor<f32>],
    x_t: &[f32],
    y0: &[f32],
    sqrt_alpha_bar: f64,
) -> Result<Vec<f32>, NetError> {
    if x_t.len() != y0.len() {
        return Err(NetError::Length(x_t.len(), y0.len()));
    }
    check_finite(x_t)?;
    check_finite(y0)?;
    let g = Graph::new();
    let w: Vec<Var> = params.iter().map(|t| g.constant(t)).collect();
    let (x, c) = (waveform_leaf(&g, x_t)?, waveform_leaf(&g, y0)?);
    let out = sto_forward(&g, config, &w, x, c, &[sqrt_alpha_bar])?;
    Ok(g.value(out))
}
