//! Finite-difference checks of every graph op and of both networks at 64 bits.

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grad::check::{check_gradients, GradCheckReport};
use crate::grad::{GradError, Graph, Tensor, Var};
use crate::nets::{det_forward, init_params, sto_forward, NetConfig, NetError, NetKind};

pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let u = Uniform::new(-1.0, 1.0).expect("valid range");
    Tensor::new(shape.to_vec(), (0..n).map(|_| u.sample(rng)).collect()).expect("shape matches")
}

/// `sum(out * w)` for a fixed random `w`, so every output element matters.
fn weighted(g: &Graph<f64>, out: Var, w: &Tensor<f64>) -> Result<Var, GradError> {
    let c = g.constant(w);
    Ok(g.sum(g.mul(out, c)?))
}

fn op_check<F>(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor<f64>>,
    out_shape: &[usize],
    f: F,
) -> Result<GradCheckReport, GradError>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var, GradError>,
{
    let w = random(rng, out_shape);
    check_gradients(&inputs, STEP, |g, v| weighted(g, f(g, v)?, &w))
}

/// One check per op over `cases` randomized shapes each, then both networks.
pub fn run_suite(seed: u64, cases: usize) -> Result<Vec<CheckResult>, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut record = |name: &str, reports: Vec<GradCheckReport>| {
        let worst = reports
            .into_iter()
            .reduce(|a, b| if b.max_rel_err > a.max_rel_err { b } else { a })
            .expect("at least one case");
        results.push(CheckResult {
            name: name.to_string(),
            report: worst,
        });
    };

    macro_rules! cases {
        ($name:expr, |$rng:ident| $body:expr) => {{
            let mut reports = Vec::new();
            for _ in 0..cases {
                let $rng = &mut rng;
                reports.push($body?);
            }
            record($name, reports);
        }};
    }

    cases!("add", |r| {
        let s = [r.random_range(1..4), r.random_range(1..6)];
        let ins = vec![random(r, &s), random(r, &s)];
        op_check(r, ins, &s, |g, v| g.add(v[0], v[1]))
    });
    cases!("sub", |r| {
        let s = [r.random_range(1..4), r.random_range(1..6)];
        let ins = vec![random(r, &s), random(r, &s)];
        op_check(r, ins, &s, |g, v| g.sub(v[0], v[1]))
    });
    cases!("mul", |r| {
        let s = [r.random_range(1..4), r.random_range(1..6)];
        let ins = vec![random(r, &s), random(r, &s)];
        op_check(r, ins, &s, |g, v| g.mul(v[0], v[1]))
    });
    cases!("scale", |r| {
        let s = [r.random_range(1..8)];
        let c: f64 = r.random_range(-2.0..2.0);
        let ins = vec![random(r, &s)];
        op_check(r, ins, &s, move |g, v| Ok(g.scale(v[0], c)))
    });
    cases!("scale_batch", |r| {
        let s = [r.random_range(1..4), 1, r.random_range(1..6)];
        let c: Vec<f64> = (0..s[0]).map(|_| r.random_range(-2.0..2.0)).collect();
        let ins = vec![random(r, &s)];
        op_check(r, ins, &s, move |g, v| g.scale_batch(v[0], &c))
    });
    cases!("relu", |r| {
        let s = [r.random_range(1..10)];
        let ins = vec![random(r, &s)];
        op_check(r, ins, &s, |g, v| Ok(g.relu(v[0])))
    });
    cases!("tanh", |r| {
        let s = [r.random_range(1..10)];
        let ins = vec![random(r, &s)];
        op_check(r, ins, &s, |g, v| Ok(g.tanh(v[0])))
    });
    cases!("sum", |r| {
        let s = [r.random_range(1..4), r.random_range(1..5)];
        let ins = vec![random(r, &s)];
        op_check(r, ins, &[1], |g, v| Ok(g.sum(v[0])))
    });
    cases!("mean", |r| {
        let s = [r.random_range(1..4), r.random_range(1..5)];
        let ins = vec![random(r, &s)];
        op_check(r, ins, &[1], |g, v| Ok(g.mean(v[0])))
    });
    cases!("mse", |r| {
        let s = [r.random_range(1..4), r.random_range(1..5)];
        let ins = vec![random(r, &s), random(r, &s)];
        op_check(r, ins, &[1], |g, v| g.mse(v[0], v[1]))
    });
    cases!("matmul", |r| {
        let (n, k, m) = (
            r.random_range(1..4),
            r.random_range(1..5),
            r.random_range(1..4),
        );
        let ins = vec![random(r, &[n, k]), random(r, &[k, m])];
        op_check(r, ins, &[n, m], |g, v| g.matmul(v[0], v[1]))
    });
    cases!("dense", |r| {
        let (b, i, o) = (
            r.random_range(1..4),
            r.random_range(1..5),
            r.random_range(1..4),
        );
        let ins = vec![random(r, &[b, i]), random(r, &[i, o]), random(r, &[o])];
        op_check(r, ins, &[b, o], |g, v| g.dense(v[0], v[1], Some(v[2])))
    });
    cases!("conv1d", |r| {
        let (b, ci, co) = (
            r.random_range(1..3),
            r.random_range(1..4),
            r.random_range(1..4),
        );
        let k = [1, 3, 5][r.random_range(0..3)];
        let d = r.random_range(1..4);
        let l = r.random_range(1..12);
        let ins = vec![
            random(r, &[b, ci, l]),
            random(r, &[co, ci, k]),
            random(r, &[co]),
        ];
        op_check(r, ins, &[b, co, l], move |g, v| {
            g.conv1d(v[0], v[1], Some(v[2]), d)
        })
    });
    cases!("add_over_time", |r| {
        let (b, c, l) = (
            r.random_range(1..3),
            r.random_range(1..4),
            r.random_range(1..6),
        );
        let ins = vec![random(r, &[b, c, l]), random(r, &[b, c])];
        op_check(r, ins, &[b, c, l], |g, v| g.add_over_time(v[0], v[1]))
    });

    let net = NetConfig {
        n_blocks: 2,
        channels: 4,
        dilation_cycle: vec![1, 2],
        kernel_size: 3,
    };
    let (b, l) = (2, 12);
    let mut nets_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6E65_7473);
    for kind in [NetKind::Deterministic, NetKind::Denoiser] {
        let mut reports = Vec::new();
        for _ in 0..cases.min(3) {
            let mut params = init_params::<f64, _>(&net, kind, "", &mut nets_rng);
            // zero biases put relus exactly on their kink and a zero output
            // projection hides every upstream gradient
            for (name, t) in params.names().to_vec().iter().zip(params.tensors_mut()) {
                if name.starts_with("out.") || name.ends_with(".b") {
                    *t = random(&mut nets_rng, t.shape());
                }
            }
            let x = random(&mut nets_rng, &[b, 1, l]);
            let c = random(&mut nets_rng, &[b, 1, l]);
            let target = random(&mut nets_rng, &[b, 1, l]);
            let levels: Vec<f64> = (0..b).map(|_| nets_rng.random_range(0.6..1.0)).collect();
            let mut inputs = params.tensors().to_vec();
            inputs.push(x);
            let n = params.len();
            let report = check_gradients::<_, NetError>(&inputs, STEP, |g, v| {
                let (w, x) = (&v[..n], v[n]);
                let out = match kind {
                    NetKind::Deterministic => det_forward(g, &net, w, x),
                    NetKind::Denoiser => {
                        let cv = g.constant(&c);
                        sto_forward(g, &net, w, x, cv, &levels)
                    }
                }?;
                Ok(g.mse(out, g.constant(&target))?)
            })?;
            reports.push(report);
        }
        record(
            match kind {
                NetKind::Deterministic => "deterministic net",
                NetKind::Denoiser => "denoiser net",
            },
            reports,
        );
    }
    Ok(results)
}

pub fn max_error(results: &[CheckResult]) -> f64 {
    results
        .iter()
        .map(|r| r.report.max_rel_err)
        .fold(0.0, f64::max)
}
