use std::f64::consts::TAU;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, Waveform};

/// Peak level both signals of a pair are scaled to at most.
pub const PEAK: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanKind {
    SineMixture,
    Chirp,
    AmTone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    FilteredBurst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_clips: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub snr_grid_db: Vec<f64>,
    pub clean_kind: CleanKind,
    pub noise_kind: NoiseKind,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_clips: 200,
            clip_seconds: 1.0,
            sample_rate: 4000,
            snr_grid_db: vec![0.0, 5.0, 10.0, 15.0],
            clean_kind: CleanKind::SineMixture,
            noise_kind: NoiseKind::White,
            seed: 0,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_clips == 0 {
            return Err(DataError::Spec("n_clips must be positive".into()));
        }
        if !(self.clip_seconds > 0.0) || self.sample_rate == 0 {
            return Err(DataError::Spec(
                "clip_seconds and sample_rate must be positive".into(),
            ));
        }
        if self.snr_grid_db.is_empty() || self.snr_grid_db.iter().any(|s| !s.is_finite()) {
            return Err(DataError::Spec(
                "snr_grid_db must be a non-empty list of finite values".into(),
            ));
        }
        if self.samples_per_clip() < 16 {
            return Err(DataError::Spec(
                "clips must hold at least 16 samples".into(),
            ));
        }
        Ok(())
    }

    pub fn samples_per_clip(&self) -> usize {
        (self.clip_seconds * f64::from(self.sample_rate)).round() as usize
    }

    /// Seed of clip `i`, recorded in the manifest.
    pub fn clip_seed(&self, i: usize) -> u64 {
        splitmix64(self.seed ^ splitmix64(i as u64 ^ 0x5352_544E))
    }

    pub fn clip_rng(&self, i: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.clip_seed(i))
    }

    /// Clip `i`; depends only on `(self, i)`.
    pub fn pair(&self, i: usize) -> Result<Pair, DataError> {
        generate_pair(self, &mut self.clip_rng(i))
    }
}

/// Randomized parameters of one clean signal.
#[derive(Debug, Clone, PartialEq)]
pub enum CleanParams {
    SineMixture {
        freqs_hz: Vec<f64>,
        amps: Vec<f64>,
        phases: Vec<f64>,
    },
    Chirp {
        f0_hz: f64,
        f1_hz: f64,
        phase: f64,
    },
    AmTone {
        carrier_hz: f64,
        mod_hz: f64,
        depth: f64,
        phase: f64,
    },
}

impl CleanParams {
    pub fn draw<R: Rng + ?Sized>(kind: CleanKind, spec: &DatasetSpec, rng: &mut R) -> Self {
        let sr = f64::from(spec.sample_rate);
        let dur = spec.clip_seconds;
        match kind {
            CleanKind::SineMixture => {
                // whole cycles per clip so each component sits on a DFT bin
                let lo = (80.0 * dur).ceil() as usize;
                let hi = ((0.1 * sr * dur).floor() as usize).max(lo + 4);
                let n = rng.random_range(2..=4);
                let mut bins: Vec<usize> = sample_indices(rng, hi - lo, n)
                    .into_iter()
                    .map(|b| b + lo)
                    .collect();
                bins.sort_unstable();
                let freqs_hz = bins.iter().map(|&b| b as f64 / dur).collect();
                let amps = (0..n).map(|_| rng.random_range(0.3..1.0)).collect();
                let phases = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
                CleanParams::SineMixture {
                    freqs_hz,
                    amps,
                    phases,
                }
            }
            CleanKind::Chirp => {
                let a = rng.random_range(100.0..0.1 * sr);
                let b = rng.random_range(0.1 * sr..0.25 * sr);
                let (f0_hz, f1_hz) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
                CleanParams::Chirp {
                    f0_hz,
                    f1_hz,
                    phase: rng.random_range(0.0..TAU),
                }
            }
            CleanKind::AmTone => CleanParams::AmTone {
                carrier_hz: rng.random_range(150.0..0.2 * sr),
                mod_hz: rng.random_range(2.0..8.0),
                depth: rng.random_range(0.3..0.9),
                phase: rng.random_range(0.0..TAU),
            },
        }
    }

    pub fn render(&self, n: usize, sample_rate: u32) -> Vec<f64> {
        let sr = f64::from(sample_rate);
        let dur = n as f64 / sr;
        (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                match self {
                    CleanParams::SineMixture {
                        freqs_hz,
                        amps,
                        phases,
                    } => freqs_hz
                        .iter()
                        .zip(amps)
                        .zip(phases)
                        .map(|((f, a), p)| a * (TAU * f * t + p).sin())
                        .sum(),
                    CleanParams::Chirp {
                        f0_hz,
                        f1_hz,
                        phase,
                    } => (TAU * (f0_hz * t + (f1_hz - f0_hz) * t * t / (2.0 * dur)) + phase).sin(),
                    CleanParams::AmTone {
                        carrier_hz,
                        mod_hz,
                        depth,
                        phase,
                    } => {
                        let env = (1.0 + depth * (TAU * mod_hz * t).sin()) / (1.0 + depth);
                        env * (TAU * carrier_hz * t + phase).sin()
                    }
                }
            })
            .collect()
    }
}

/// A clean signal of `n` samples and the parameters it was drawn with.
pub fn clean_signal<R: Rng + ?Sized>(
    spec: &DatasetSpec,
    n: usize,
    rng: &mut R,
) -> (Vec<f64>, CleanParams) {
    let params = CleanParams::draw(spec.clean_kind, spec, rng);
    (params.render(n, spec.sample_rate), params)
}

// Pinking filter: 3 poles / 3 zeros approximating a 1/f power spectrum.
const PINK_B: [f64; 4] = [0.049922035, -0.095993537, 0.050612699, -0.004408786];
const PINK_A: [f64; 4] = [1.0, -2.494956002, 2.017265875, -0.522189400];

pub fn noise_signal<R: Rng + ?Sized>(kind: NoiseKind, n: usize, rng: &mut R) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    match kind {
        NoiseKind::White => white,
        NoiseKind::Pink => {
            let mut out = vec![0.0; n];
            for i in 0..n {
                let mut acc = 0.0;
                for k in 0..4 {
                    if i >= k {
                        acc += PINK_B[k] * white[i - k];
                        if k > 0 {
                            acc -= PINK_A[k] * out[i - k];
                        }
                    }
                }
                out[i] = acc;
            }
            out
        }
        NoiseKind::FilteredBurst => {
            let mut gate = vec![0.05; n];
            let bursts = rng.random_range(3..=6);
            for _ in 0..bursts {
                let len = ((n as f64) * rng.random_range(0.05..0.2)) as usize;
                let start = rng.random_range(0..n.saturating_sub(len).max(1));
                gate[start..(start + len).min(n)]
                    .iter_mut()
                    .for_each(|g| *g = 1.0);
            }
            let mut state = 0.0;
            white
                .iter()
                .zip(&gate)
                .map(|(&w, &g)| {
                    state = 0.6 * state + 0.4 * w;
                    state * g
                })
                .collect()
        }
    }
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// `clean + g * noise` with `g` chosen so that the clean-to-scaled-noise
/// power ratio is `snr_db`.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform, DataError> {
    if clean.len() != noise.len() {
        return Err(DataError::Length(clean.len(), noise.len()));
    }
    let c: Vec<f64> = clean.samples.iter().map(|&v| f64::from(v)).collect();
    let n: Vec<f64> = noise.samples.iter().map(|&v| f64::from(v)).collect();
    let mixed = mix_f64(&c, &n, snr_db)?;
    Ok(Waveform::new(
        mixed.into_iter().map(|v| v as f32).collect(),
        clean.sample_rate,
    ))
}

fn mix_f64(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<Vec<f64>, DataError> {
    let (pc, pn) = (power(clean), power(noise));
    if pc == 0.0 {
        return Err(DataError::ZeroPower("clean"));
    }
    if pn == 0.0 {
        return Err(DataError::ZeroPower("noise"));
    }
    let gain = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(clean.iter().zip(noise).map(|(c, n)| c + gain * n).collect())
}

/// A clean/noisy training or test pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub clean: Waveform,
    pub noisy: Waveform,
    pub snr_db: f64,
    /// Known for generated pairs, absent for pairs read from disk.
    pub params: Option<CleanParams>,
}

/// A clean signal, noise at an SNR drawn from the grid, both scaled by one
/// gain so the peak is at most 0.95. Use [`DatasetSpec::pair`] for clip `i`
/// of a dataset.
pub fn generate_pair(spec: &DatasetSpec, rng: &mut impl Rng) -> Result<Pair, DataError> {
    spec.validate()?;
    let n = spec.samples_per_clip();
    let (clean, params) = clean_signal(spec, n, rng);
    let noise = noise_signal(spec.noise_kind, n, rng);
    let snr_db = spec.snr_grid_db[rng.random_range(0..spec.snr_grid_db.len())];
    let noisy = mix_f64(&clean, &noise, snr_db)?;

    let peak = clean
        .iter()
        .chain(&noisy)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = PEAK / peak;
    let to_wave = |x: &[f64]| {
        Waveform::new(
            x.iter().map(|v| (v * gain) as f32).collect(),
            spec.sample_rate,
        )
    };
    Ok(Pair {
        clean: to_wave(&clean),
        noisy: to_wave(&noisy),
        snr_db,
        params: Some(params),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snr_db(clean: &[f64], mixed: &[f64]) -> f64 {
        let noise: Vec<f64> = mixed.iter().zip(clean).map(|(m, c)| m - c).collect();
        10.0 * (power(clean) / power(&noise)).log10()
    }

    #[test]
    fn same_index_same_pair() {
        let spec = DatasetSpec::default();
        let a = spec.pair(7).unwrap();
        let b = spec.pair(7).unwrap();
        assert_eq!(a, b);
        let c = spec.pair(8).unwrap();
        assert_ne!(a.clean, c.clean);
    }

    #[test]
    fn one_second_at_4k_is_4000_samples() {
        for clean_kind in [CleanKind::SineMixture, CleanKind::Chirp, CleanKind::AmTone] {
            for noise_kind in [NoiseKind::White, NoiseKind::Pink, NoiseKind::FilteredBurst] {
                let spec = DatasetSpec {
                    clean_kind,
                    noise_kind,
                    ..DatasetSpec::default()
                };
                let p = spec.pair(0).unwrap();
                assert_eq!(p.clean.len(), 4000);
                assert_eq!(p.noisy.len(), 4000);
                let peak = p
                    .clean
                    .samples
                    .iter()
                    .chain(&p.noisy.samples)
                    .fold(0.0f32, |m, v| m.max(v.abs()));
                assert!(peak <= 0.95 + 1e-6);
                assert!(spec.snr_grid_db.contains(&p.snr_db));
            }
        }
    }

    #[test]
    fn sine_mixture_peaks_only_at_drawn_bins() {
        let spec = DatasetSpec::default();
        for i in 0..5 {
            let p = spec.pair(i).unwrap();
            let Some(CleanParams::SineMixture { freqs_hz, .. }) = &p.params else {
                panic!("expected a sine mixture");
            };
            let x = &p.clean.samples;
            let n = x.len();
            // naive DFT magnitude per integer-Hz bin
            let mag: Vec<f64> = (0..n / 2)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (j, &v) in x.iter().enumerate() {
                        let a = TAU * (k * j) as f64 / n as f64;
                        re += f64::from(v) * a.cos();
                        im -= f64::from(v) * a.sin();
                    }
                    (re * re + im * im).sqrt()
                })
                .collect();
            let top = mag.iter().cloned().fold(0.0, f64::max);
            let peaks: Vec<usize> = (0..n / 2).filter(|&k| mag[k] > 0.05 * top).collect();
            let want: Vec<usize> = freqs_hz.iter().map(|f| f.round() as usize).collect();
            assert_eq!(peaks, want);
        }
    }

    #[test]
    fn zero_db_mix_balances_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clean: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.1).sin()).collect();
        let noise = noise_signal(NoiseKind::White, 1000, &mut rng);
        let mixed = mix_f64(&clean, &noise, 0.0).unwrap();
        let scaled: Vec<f64> = mixed.iter().zip(&clean).map(|(m, c)| m - c).collect();
        assert!((power(&clean) / power(&scaled) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sixty_db_is_nearly_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clean: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.05).cos()).collect();
        let noise = noise_signal(NoiseKind::Pink, 1000, &mut rng);
        let mixed = mix_f64(&clean, &noise, 60.0).unwrap();
        let err: f64 = mixed
            .iter()
            .zip(&clean)
            .map(|(m, c)| (m - c).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = clean.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!(err / norm < 1e-3 + 10f64.powf(-3.0));
    }

    #[test]
    fn measured_snr_matches_request() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(64..2000);
            let clean: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let kind = [NoiseKind::White, NoiseKind::Pink, NoiseKind::FilteredBurst]
                [rng.random_range(0..3)];
            let noise = noise_signal(kind, n, &mut rng);
            let snr = rng.random_range(-10.0..30.0);
            let mixed = mix_f64(&clean, &noise, snr).unwrap();
            assert!((snr_db(&clean, &mixed) - snr).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_power_rejected() {
        let z = Waveform::new(vec![0.0; 8], 4000);
        let o = Waveform::new(vec![1.0; 8], 4000);
        assert_eq!(mix_at_snr(&z, &o, 0.0), Err(DataError::ZeroPower("clean")));
        assert_eq!(mix_at_snr(&o, &z, 0.0), Err(DataError::ZeroPower("noise")));
        assert!(matches!(
            mix_at_snr(&o, &Waveform::new(vec![1.0; 4], 4000), 0.0),
            Err(DataError::Length(8, 4))
        ));
    }

    #[test]
    fn invalid_specs() {
        let mut s = DatasetSpec::default();
        s.snr_grid_db.clear();
        assert!(s.validate().is_err());
        let s = DatasetSpec {
            n_clips: 0,
            ..DatasetSpec::default()
        };
        assert!(s.validate().is_err());
    }
}
