//! Waveforms, synthetic paired datasets and WAV I/O.

mod synth;
mod wav;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use synth::{
    clean_signal, generate_pair, mix_at_snr, noise_signal, CleanKind, CleanParams, DatasetSpec,
    NoiseKind, Pair,
};
pub use wav::{decode_wav, encode_wav, wav_read, wav_write};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("{0}: {1}")]
    Io(String, String),
    #[error("malformed WAV: {0}")]
    MalformedWav(String),
    #[error("unsupported WAV encoding (format tag {format}, {bits} bits); PCM 16-bit required")]
    NotPcm16 { format: u16, bits: u16 },
    #[error("mono required, file has {0} channels")]
    NotMono(u16),
    #[error("cannot mix at an SNR: {0} has zero power")]
    ZeroPower(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("bad manifest: {0}")]
    Manifest(String),
}

/// Mono signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|s| s.is_finite())
    }
}

/// One clip's entry in `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub id: String,
    pub clean: String,
    pub noisy: String,
    pub seed: u64,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub clips: Vec<ClipEntry>,
}

/// Generated clips held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub ids: Vec<String>,
    pub pairs: Vec<Pair>,
}

impl Dataset {
    /// Every clip of `spec`; clip `i` depends only on `(spec, i)`.
    pub fn generate(spec: &DatasetSpec) -> Result<Self, DataError> {
        spec.validate()?;
        let pairs: Vec<Pair> = (0..spec.n_clips)
            .map(|i| spec.pair(i))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            spec: spec.clone(),
            ids: (0..spec.n_clips).map(|i| format!("clip{i:04}")).collect(),
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Writes `clean/<id>.wav`, `noisy/<id>.wav` and `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<Manifest, DataError> {
        let io =
            |p: &Path, e: std::io::Error| DataError::Io(p.display().to_string(), e.to_string());
        for sub in ["clean", "noisy"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
        }
        let mut clips = Vec::with_capacity(self.len());
        for (i, (id, pair)) in self.ids.iter().zip(&self.pairs).enumerate() {
            let clean = format!("clean/{id}.wav");
            let noisy = format!("noisy/{id}.wav");
            wav_write(dir.join(&clean), &pair.clean)?;
            wav_write(dir.join(&noisy), &pair.noisy)?;
            clips.push(ClipEntry {
                id: id.clone(),
                clean,
                noisy,
                seed: self.spec.clip_seed(i),
                snr_db: pair.snr_db,
            });
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            clips,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| io(&path, e))?;
        Ok(manifest)
    }

    /// Loads the WAV pairs listed in `<dir>/manifest.json`.
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| DataError::Io(path.display().to_string(), e.to_string()))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
        let mut pairs = Vec::with_capacity(manifest.clips.len());
        for c in &manifest.clips {
            let clean = wav_read(dir.join(&c.clean))?;
            let noisy = wav_read(dir.join(&c.noisy))?;
            if clean.len() != noisy.len() {
                return Err(DataError::Length(clean.len(), noisy.len()));
            }
            pairs.push(Pair {
                clean,
                noisy,
                snr_db: c.snr_db,
                params: None,
            });
        }
        Ok(Self {
            spec: manifest.spec,
            ids: manifest.clips.into_iter().map(|c| c.id).collect(),
            pairs,
        })
    }
}
