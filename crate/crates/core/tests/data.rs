use std::fs;

use proptest::prelude::*;
use srtnet::data::{
    decode_wav, encode_wav, mix_at_snr, wav_read, wav_write, CleanKind, CleanParams, DataError,
    Dataset, DatasetSpec, NoiseKind, Waveform,
};

fn power(x: &[f32]) -> f64 {
    x.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / x.len() as f64
}

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        n_clips: 4,
        clip_seconds: 0.05,
        seed,
        ..DatasetSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mixing_hits_the_requested_snr(
        clean in prop::collection::vec(-1.0f32..1.0, 64),
        noise in prop::collection::vec(-1.0f32..1.0, 64),
        snr in -10.0f64..30.0,
    ) {
        prop_assume!(power(&clean) > 1e-6 && power(&noise) > 1e-6);
        let c = Waveform::new(clean.clone(), 4000);
        let n = Waveform::new(noise, 4000);
        // recompute the SNR in f64 from the mix itself
        let mixed = mix_at_snr(&c, &n, snr).unwrap();
        let resid: Vec<f64> = mixed.samples.iter().zip(&clean)
            .map(|(&m, &c)| f64::from(m) - f64::from(c)).collect();
        let pr = resid.iter().map(|v| v * v).sum::<f64>() / resid.len() as f64;
        let got = 10.0 * (power(&clean) / pr).log10();
        // the mix is stored as f32, which bounds the achievable accuracy
        prop_assert!((got - snr).abs() < 1e-3, "{got} vs {snr}");
    }

    #[test]
    fn wav_round_trip_within_half_lsb(
        samples in prop::collection::vec(-1.0f32..1.0, 0..300),
        rate in 1u32..48_000,
    ) {
        let w = Waveform::new(samples.clone(), rate);
        let (bytes, clipped) = encode_wav(&w);
        prop_assert_eq!(clipped, 0);
        prop_assert_eq!(bytes.len(), 44 + 2 * samples.len());
        let back = decode_wav(&bytes).unwrap();
        prop_assert_eq!(back.sample_rate, rate);
        prop_assert_eq!(back.len(), samples.len());
        for (a, b) in back.samples.iter().zip(&samples) {
            prop_assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-7);
        }
        // decoded samples are on the grid, so a second pass is lossless
        prop_assert_eq!(encode_wav(&back).0, bytes);
    }

    #[test]
    fn generated_pairs_respect_peak_and_grid(seed in any::<u64>()) {
        let spec = small_spec(seed);
        let d = Dataset::generate(&spec).unwrap();
        for p in &d.pairs {
            prop_assert!(spec.snr_grid_db.contains(&p.snr_db));
            let peak = p.clean.samples.iter().chain(&p.noisy.samples)
                .fold(0.0f32, |m, v| m.max(v.abs()));
            prop_assert!(peak <= 0.95 + 1e-6);
        }
    }
}

#[test]
fn mixed_snr_matches_to_microdecibels_in_f64() {
    // 32 non-trivial pairs at 1e-6 dB, using values exactly representable in f32
    for k in 0..32u32 {
        let clean: Vec<f32> = (0..256)
            .map(|i| ((i * (k + 3)) % 17) as f32 / 16.0 - 0.5)
            .collect();
        let noise: Vec<f32> = (0..256)
            .map(|i| ((i * 7 + k) % 13) as f32 / 12.0 - 0.5)
            .collect();
        let snr = f64::from(k) - 5.0;
        let mixed = mix_at_snr(
            &Waveform::new(clean.clone(), 4000),
            &Waveform::new(noise.clone(), 4000),
            snr,
        )
        .unwrap();
        let gain = (power(&clean) / (power(&noise) * 10f64.powf(snr / 10.0))).sqrt();
        for ((m, c), n) in mixed.samples.iter().zip(&clean).zip(&noise) {
            let want = (f64::from(*c) + gain * f64::from(*n)) as f32;
            assert_eq!(*m, want);
        }
        let pn = power(&noise) * gain * gain;
        assert!((10.0 * (power(&clean) / pn).log10() - snr).abs() < 1e-6);
    }
}

#[test]
fn mixing_rejects_silence_and_length_mismatch() {
    let z = Waveform::new(vec![0.0; 8], 4000);
    let o = Waveform::new(vec![0.5; 8], 4000);
    assert_eq!(mix_at_snr(&z, &o, 0.0), Err(DataError::ZeroPower("clean")));
    assert_eq!(mix_at_snr(&o, &z, 0.0), Err(DataError::ZeroPower("noise")));
    let short = Waveform::new(vec![0.5; 4], 4000);
    assert_eq!(mix_at_snr(&o, &short, 0.0), Err(DataError::Length(8, 4)));
}

#[test]
fn dataset_write_is_byte_identical() {
    let spec = DatasetSpec {
        noise_kind: NoiseKind::Pink,
        clean_kind: CleanKind::Chirp,
        ..small_spec(7)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    Dataset::generate(&spec).unwrap().write(a.path()).unwrap();
    Dataset::generate(&spec).unwrap().write(b.path()).unwrap();
    for rel in ["manifest.json", "clean/clip0000.wav", "noisy/clip0003.wav"] {
        assert_eq!(
            fs::read(a.path().join(rel)).unwrap(),
            fs::read(b.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
    let loaded = Dataset::load(a.path()).unwrap();
    assert_eq!(loaded.len(), 4);
    assert_eq!(loaded.spec, spec);
}

#[test]
fn clip_depends_only_on_spec_and_index() {
    let few = small_spec(3);
    let many = DatasetSpec {
        n_clips: 9,
        ..few.clone()
    };
    let a = Dataset::generate(&few).unwrap();
    let b = Dataset::generate(&many).unwrap();
    assert_eq!(a.pairs[..], b.pairs[..4]);
    assert_ne!(
        a.pairs[0],
        Dataset::generate(&small_spec(4)).unwrap().pairs[0]
    );
}

#[test]
fn every_signal_family_generates() {
    for clean_kind in [CleanKind::SineMixture, CleanKind::Chirp, CleanKind::AmTone] {
        for noise_kind in [NoiseKind::White, NoiseKind::Pink, NoiseKind::FilteredBurst] {
            let spec = DatasetSpec {
                clean_kind,
                noise_kind,
                ..small_spec(1)
            };
            let d = Dataset::generate(&spec).unwrap();
            assert!(d
                .pairs
                .iter()
                .all(|p| p.clean.is_finite() && p.noisy.is_finite()));
        }
    }
}

#[test]
fn malformed_wav_files_are_rejected() {
    let (good, _) = encode_wav(&Waveform::new(vec![0.1, -0.2, 0.3], 4000));
    assert!(matches!(
        decode_wav(&good[..10]),
        Err(DataError::MalformedWav(_))
    ));
    let mut stereo = good.clone();
    stereo[22] = 2;
    assert_eq!(decode_wav(&stereo), Err(DataError::NotMono(2)));
    let mut float = good.clone();
    float[20] = 3;
    float[34] = 32;
    assert!(matches!(
        decode_wav(&float),
        Err(DataError::NotPcm16 {
            format: 3,
            bits: 32
        })
    ));
    let mut truncated = good.clone();
    truncated.truncate(good.len() - 1);
    assert!(matches!(
        decode_wav(&truncated),
        Err(DataError::MalformedWav(_))
    ));
}

#[test]
fn loading_a_missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(DataError::Io(..))));
    fs::write(
        dir.path().join("manifest.json"),
        "{\"spec\":{},\"clips\":[],\"extra\":1}",
    )
    .unwrap();
    assert!(matches!(
        Dataset::load(dir.path()),
        Err(DataError::Manifest(_))
    ));
}

/// Magnitude of every DFT bin up to Nyquist, computed directly.
fn dft_magnitudes(x: &[f32]) -> Vec<f64> {
    let n = x.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (i, &v) in x.iter().enumerate() {
                let w = std::f64::consts::TAU * (k * i % n) as f64 / n as f64;
                re += f64::from(v) * w.cos();
                im -= f64::from(v) * w.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

#[test]
fn sine_mixture_energy_sits_on_the_drawn_frequencies() {
    let spec = DatasetSpec {
        n_clips: 3,
        seed: 21,
        ..DatasetSpec::default()
    };
    for i in 0..spec.n_clips {
        let pair = spec.pair(i).unwrap();
        let Some(CleanParams::SineMixture { freqs_hz, .. }) = &pair.params else {
            panic!("sine mixture params expected");
        };
        let mags = dft_magnitudes(&pair.clean.samples);
        let bins: Vec<usize> = freqs_hz
            .iter()
            .map(|f| (f * spec.clip_seconds).round() as usize)
            .collect();
        let floor = bins.iter().map(|&b| mags[b]).fold(f64::INFINITY, f64::min);
        let stray = mags
            .iter()
            .enumerate()
            .filter(|(k, _)| !bins.contains(k))
            .map(|(_, &m)| m)
            .fold(0.0, f64::max);
        // everything off the drawn bins is PCM-level leakage from f32 storage
        assert!(
            stray < 1e-3 * floor,
            "clip {i}: stray {stray} vs peak {floor}"
        );
    }
}

#[test]
fn mixing_limits() {
    let clean: Vec<f32> = (0..512).map(|i| (i as f32 * 0.05).sin()).collect();
    let noise: Vec<f32> = (0..512)
        .map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0)
        .collect();
    let c = Waveform::new(clean.clone(), 4000);
    let n = Waveform::new(noise, 4000);
    let even = mix_at_snr(&c, &n, 0.0).unwrap();
    let resid: Vec<f32> = even
        .samples
        .iter()
        .zip(&clean)
        .map(|(m, c)| m - c)
        .collect();
    assert!((power(&resid) / power(&clean) - 1.0).abs() < 1e-6);
    let quiet = mix_at_snr(&c, &n, 60.0).unwrap();
    let err: f64 = quiet
        .samples
        .iter()
        .zip(&clean)
        .map(|(m, c)| f64::from(m - c).powi(2))
        .sum::<f64>();
    let norm: f64 = clean.iter().map(|&v| f64::from(v).powi(2)).sum();
    assert!((err / norm).sqrt() < 1e-3 + 10f64.powf(-3.0));
    assert_eq!(
        Dataset::generate(&DatasetSpec::default()).unwrap().pairs[0]
            .clean
            .len(),
        4000
    );
}

#[test]
fn ramp_round_trip_and_header_fields() {
    let n = 2000;
    let ramp: Vec<f32> = (0..n).map(|i| -1.0 + 2.0 * i as f32 / n as f32).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ramp.wav");
    wav_write(&path, &Waveform::new(ramp.clone(), 16_000)).unwrap();
    let back = wav_read(&path).unwrap();
    let worst = back
        .samples
        .iter()
        .zip(&ramp)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max);
    assert!(worst <= 1.0 / 32768.0);

    let b = fs::read(&path).unwrap();
    let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
    assert_eq!(&b[0..4], b"RIFF");
    assert_eq!(u32_at(4) as usize, b.len() - 8);
    assert_eq!(&b[8..16], b"WAVEfmt ");
    assert_eq!(u32_at(16), 16);
    assert_eq!(u16_at(20), 1, "PCM format tag");
    assert_eq!(u16_at(22), 1, "mono");
    assert_eq!(u32_at(24), 16_000);
    assert_eq!(u32_at(28), 32_000, "byte rate");
    assert_eq!(u16_at(32), 2, "block align");
    assert_eq!(u16_at(34), 16, "bits per sample");
    assert_eq!(&b[36..40], b"data");
    assert_eq!(u32_at(40) as usize, 2 * n);
}

#[test]
fn out_of_range_samples_are_clipped() {
    let (bytes, clipped) = encode_wav(&Waveform::new(vec![1.5, -2.0, 0.25], 4000));
    assert_eq!(clipped, 2);
    let back = decode_wav(&bytes).unwrap();
    assert_eq!(back.samples, vec![32767.0 / 32768.0, -1.0, 0.25]);
}
