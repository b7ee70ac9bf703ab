//! Objective quality metrics: scale-invariant SNR and segmental SNR.

use serde::Serialize;
use thiserror::Error;

/// SI-SNR ceiling, reached when the residual vanishes.
pub const SI_SNR_CEILING_DB: f64 = 60.0;

pub const SEG_FRAME: usize = 256;
pub const SEG_FLOOR_DB: f64 = -10.0;
pub const SEG_CEIL_DB: f64 = 35.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: estimate {0}, reference {1}")]
    Length(usize, usize),
    #[error("reference signal is zero")]
    ZeroReference,
    #[error("reference is silent in every frame")]
    AllSilent,
    #[error("frame length must be at least 1")]
    FrameLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub si_snr_db: f64,
    pub seg_snr_db: f64,
    pub n_frames: usize,
    /// SI-SNR hit [`SI_SNR_CEILING_DB`].
    pub capped: bool,
}

fn centered(x: &[f32]) -> Vec<f64> {
    let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / x.len() as f64;
    x.iter().map(|&v| f64::from(v) - mean).collect()
}

/// Scale-invariant SNR in dB, both signals mean-removed, capped at +60 dB.
pub fn si_snr(est: &[f32], reference: &[f32]) -> Result<f64, MetricError> {
    if est.len() != reference.len() {
        return Err(MetricError::Length(est.len(), reference.len()));
    }
    let (e, r) = (centered(est), centered(reference));
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if reference.is_empty() || rr == 0.0 {
        return Err(MetricError::ZeroReference);
    }
    let scale = e.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
    let (mut target, mut resid) = (0.0, 0.0);
    for (a, b) in e.iter().zip(&r) {
        let t = scale * b;
        target += t * t;
        resid += (a - t) * (a - t);
    }
    if resid <= target * 10f64.powf(-SI_SNR_CEILING_DB / 10.0) {
        return Ok(SI_SNR_CEILING_DB);
    }
    Ok(10.0 * (target / resid).log10())
}

/// Mean per-frame SNR over non-overlapping frames, each clamped to
/// `[floor_db, ceil_db]`; frames whose reference energy is zero are skipped.
/// A trailing partial frame counts as a frame. Returns `(score, frames used)`.
pub fn seg_snr(
    est: &[f32],
    reference: &[f32],
    frame_len: usize,
    floor_db: f64,
    ceil_db: f64,
) -> Result<(f64, usize), MetricError> {
    if est.len() != reference.len() {
        return Err(MetricError::Length(est.len(), reference.len()));
    }
    if frame_len == 0 {
        return Err(MetricError::FrameLength);
    }
    let mut total = 0.0;
    let mut used = 0;
    for (e, r) in est.chunks(frame_len).zip(reference.chunks(frame_len)) {
        let sig: f64 = r.iter().map(|&v| f64::from(v).powi(2)).sum();
        if sig == 0.0 {
            continue;
        }
        let err: f64 = e
            .iter()
            .zip(r)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum();
        let db = if err == 0.0 {
            ceil_db
        } else {
            (10.0 * (sig / err).log10()).clamp(floor_db, ceil_db)
        };
        total += db;
        used += 1;
    }
    if used == 0 {
        return Err(MetricError::AllSilent);
    }
    Ok((total / used as f64, used))
}

/// Both metrics with default segmental settings.
pub fn report(est: &[f32], reference: &[f32]) -> Result<MetricReport, MetricError> {
    let si = si_snr(est, reference)?;
    let (seg, n_frames) = seg_snr(est, reference, SEG_FRAME, SEG_FLOOR_DB, SEG_CEIL_DB)?;
    Ok(MetricReport {
        si_snr_db: si,
        seg_snr_db: seg,
        n_frames,
        capped: si >= SI_SNR_CEILING_DB,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (i as f32 * 0.13).sin() + 0.3 * (i as f32 * 0.41).cos())
            .collect()
    }

    #[test]
    fn identical_hits_ceiling() {
        let r = tone(500);
        assert_eq!(si_snr(&r, &r).unwrap(), SI_SNR_CEILING_DB);
        let doubled: Vec<f32> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_snr(&doubled, &r).unwrap(), SI_SNR_CEILING_DB);
        let (s, _) = seg_snr(&r, &r, 256, -10.0, 35.0).unwrap();
        assert_eq!(s, 35.0);
    }

    #[test]
    fn orthogonal_equal_power_is_zero_db() {
        // zero-mean reference and an orthogonal zero-mean vector of equal norm
        let r = [1.0f32, -1.0, 1.0, -1.0];
        let n = [1.0f32, 1.0, -1.0, -1.0];
        let est: Vec<f32> = r.iter().zip(&n).map(|(a, b)| a + b).collect();
        assert!(si_snr(&est, &r).unwrap().abs() < 1e-6);
    }

    #[test]
    fn scale_invariance() {
        let r = tone(300);
        let est: Vec<f32> = r
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.2 * (i as f32 * 1.7).sin())
            .collect();
        let base = si_snr(&est, &r).unwrap();
        for a in [0.1f32, 3.0, 17.0] {
            let scaled: Vec<f32> = est.iter().map(|v| a * v).collect();
            assert!((si_snr(&scaled, &r).unwrap() - base).abs() < 1e-4);
        }
    }

    #[test]
    fn hand_computed_single_frame() {
        let r = [1.0f32, 2.0, -1.0, 0.5];
        let e = [0.5f32, 2.0, -1.5, 0.0];
        // sig = 1 + 4 + 1 + 0.25 = 6.25, err = 0.25 + 0 + 0.25 + 0.25 = 0.75
        let want = 10.0 * (6.25f64 / 0.75).log10();
        let (got, frames) = seg_snr(&e, &r, 4, -10.0, 35.0).unwrap();
        assert_eq!(frames, 1);
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn leading_silence_is_ignored() {
        let r = tone(512);
        let e: Vec<f32> = r
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.1 * (i as f32).cos())
            .collect();
        let (base, _) = seg_snr(&e, &r, 256, -10.0, 35.0).unwrap();
        let mut rs = vec![0.0f32; 512];
        let mut es = vec![0.0f32; 512];
        rs.extend_from_slice(&r);
        es.extend_from_slice(&e);
        let (padded, frames) = seg_snr(&es, &rs, 256, -10.0, 35.0).unwrap();
        assert_eq!(frames, 2);
        assert!((padded - base).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert_eq!(si_snr(&[1.0, 2.0], &[1.0]), Err(MetricError::Length(2, 1)));
        assert_eq!(
            si_snr(&[1.0, 2.0], &[3.0, 3.0]),
            Err(MetricError::ZeroReference)
        );
        assert_eq!(
            seg_snr(&[0.0; 8], &[0.0; 8], 4, -10.0, 35.0),
            Err(MetricError::AllSilent)
        );
        assert_eq!(
            seg_snr(&[0.0; 8], &[1.0; 8], 0, -10.0, 35.0),
            Err(MetricError::FrameLength)
        );
    }
}
