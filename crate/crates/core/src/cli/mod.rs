//! Command-line front end. A JSON run config supplies defaults; flags win.

pub mod gradcheck;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{wav_read, wav_write, DataError, Dataset, DatasetSpec, Waveform};
use crate::pipeline::{
    enhance, evaluate, train, Checkpoint, EnhanceOptions, Model, PipelineError, TrainConfig,
    Trainer, VariantMode, LOSS_LOG_HEADER,
};
use crate::schedule::ScheduleParams;

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "srtnet",
    version,
    about = "Enhance-and-refine diffusion for waveform denoising"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct CommonArgs {
    /// JSON run config; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// SRTNET, RESIDUAL_FREE, RESIDUAL_FREE_AUX_LOSS or NO_DETERMINISTIC.
    #[arg(long, global = true, value_name = "NAME")]
    pub mode: Option<VariantMode>,
    #[arg(long, global = true, value_name = "N")]
    pub steps: Option<u64>,
    #[arg(long, global = true, value_name = "N")]
    pub runs: Option<usize>,
    #[arg(long, global = true, value_name = "R")]
    pub ratio: Option<f64>,
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired dataset (WAVs and manifest.json).
    SynthData,
    /// Train and write checkpoints plus loss.csv into the output directory.
    Train {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Enhance one WAV file or every WAV in a directory.
    Enhance {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
        /// Average the run waveforms instead of writing only per-run files.
        #[arg(long)]
        average_waveforms: bool,
    },
    /// Score a checkpoint on a dataset directory.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        average_waveforms: bool,
    },
    /// Write the diffusion schedule as CSV.
    ScheduleDump,
    /// Finite-difference check of every op and both networks.
    Gradcheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_runs: usize,
    pub ratio: f64,
    pub average_waveforms: bool,
    /// Sampling schedule; the checkpoint's own schedule when absent.
    pub schedule: Option<ScheduleParams>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let e = EnhanceOptions::default();
        Self {
            n_runs: e.n_runs,
            ratio: e.ratio,
            average_waveforms: e.average_waveforms,
            schedule: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Applied to every random source of the command when set.
    pub seed: Option<u64>,
    pub data: DatasetSpec,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    /// Folds flag values into the config; the seed lands in every section.
    pub fn resolve(mut self, args: &CommonArgs) -> Self {
        if let Some(s) = args.seed.or(self.seed) {
            self.seed = Some(s);
            self.data.seed = s;
            self.train.seed = s;
        }
        if let Some(m) = args.mode {
            self.train.mode = m;
        }
        if let Some(n) = args.steps {
            self.train.steps = n;
        }
        if let Some(n) = args.runs {
            self.sampler.n_runs = n;
        }
        if let Some(r) = args.ratio {
            self.sampler.ratio = r;
        }
        if let Some(p) = &args.out {
            self.paths.out = Some(p.clone());
        }
        self
    }

    pub fn enhance_options(&self) -> EnhanceOptions {
        EnhanceOptions {
            n_runs: self.sampler.n_runs,
            ratio: self.sampler.ratio,
            seed: self.seed.unwrap_or(0),
            average_waveforms: self.sampler.average_waveforms,
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad usage or invalid configuration: exit 1.
    Validation(String),
    /// Failure while doing the work: exit 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::Resume(_) | PipelineError::Schedule(_) => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Spec(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn required(p: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    p.clone().ok_or_else(|| {
        CliError::Validation(format!(
            "missing {what} (flag or paths.{what} in the config)"
        ))
    })
}

fn log_config(cfg: &RunConfig) {
    eprintln!(
        "resolved config: {}",
        serde_json::to_string(cfg).expect("config serializes")
    );
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let base = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.resolve(&cli.common);
    match &cli.command {
        Command::SynthData => {
            log_config(&cfg);
            synth_data(&cfg)
        }
        Command::Train { data, resume } => {
            if data.is_some() {
                cfg.paths.data = data.clone();
            }
            if resume.is_some() {
                cfg.paths.resume = resume.clone();
            }
            log_config(&cfg);
            run_train(&cfg)
        }
        Command::Enhance {
            checkpoint,
            input,
            average_waveforms,
        } => {
            if checkpoint.is_some() {
                cfg.paths.checkpoint = checkpoint.clone();
            }
            if input.is_some() {
                cfg.paths.input = input.clone();
            }
            cfg.sampler.average_waveforms |= *average_waveforms;
            log_config(&cfg);
            run_enhance(&cfg)
        }
        Command::Evaluate {
            checkpoint,
            data,
            average_waveforms,
        } => {
            if checkpoint.is_some() {
                cfg.paths.checkpoint = checkpoint.clone();
            }
            if data.is_some() {
                cfg.paths.data = data.clone();
            }
            cfg.sampler.average_waveforms |= *average_waveforms;
            log_config(&cfg);
            run_evaluate(&cfg)
        }
        Command::ScheduleDump => {
            log_config(&cfg);
            let sched = cfg
                .train
                .schedule
                .build()
                .map_err(|e| CliError::Validation(e.to_string()))?;
            let csv = sched.to_csv();
            match &cfg.paths.out {
                Some(p) => write_file(p, csv.as_bytes()),
                None => std::io::stdout().write_all(csv.as_bytes()).map_err(runtime),
            }
        }
        Command::Gradcheck => {
            log_config(&cfg);
            let results = gradcheck::run_suite(cfg.seed.unwrap_or(0), 10).map_err(runtime)?;
            let mut text = String::new();
            for r in &results {
                text.push_str(&format!(
                    "{:<18} max_rel_err={:.3e} checked={} worst={:?}\n",
                    r.name, r.report.max_rel_err, r.report.checked, r.report.worst
                ));
            }
            let worst = gradcheck::max_error(&results);
            text.push_str(&format!("max relative error: {worst:.3e}\n"));
            print!("{text}");
            if let Some(p) = &cfg.paths.out {
                write_file(p, text.as_bytes())?;
            }
            if worst < GRADCHECK_TOLERANCE {
                Ok(())
            } else {
                Err(CliError::Runtime(format!(
                    "gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE:e}"
                )))
            }
        }
    }
}

fn synth_data(cfg: &RunConfig) -> Result<(), CliError> {
    let out = required(&cfg.paths.out, "out")?;
    cfg.data.validate()?;
    let data = Dataset::generate(&cfg.data)?;
    data.write(&out)?;
    println!("wrote {} clips to {}", data.len(), out.display());
    Ok(())
}

fn run_train(cfg: &RunConfig) -> Result<(), CliError> {
    let data_dir = required(&cfg.paths.data, "data")?;
    let out = required(&cfg.paths.out, "out")?;
    cfg.train.validate()?;
    let data = Dataset::load(&data_dir)?;
    create_dir(&out)?;

    let mut trainer = match &cfg.paths.resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p).map_err(runtime)?, cfg.train.clone())?,
        None => Trainer::new(cfg.train.clone())?,
    };
    write_file(
        &out.join("config.json"),
        (serde_json::to_string_pretty(cfg).expect("config serializes") + "\n").as_bytes(),
    )?;

    let log_path = out.join("loss.csv");
    let mut log = if trainer.step() > 0 && log_path.exists() {
        fs::OpenOptions::new().append(true).open(&log_path)
    } else {
        fs::File::create(&log_path).and_then(|mut f| writeln!(f, "{LOSS_LOG_HEADER}").map(|_| f))
    }
    .map_err(|e| CliError::Runtime(format!("{}: {e}", log_path.display())))?;

    let every = cfg.train.checkpoint_every.clamp(1, 100);
    let final_ckpt = train(
        &mut trainer,
        &data,
        |row| {
            writeln!(log, "{}", row.csv())
                .map_err(|e| PipelineError::Io(log_path.display().to_string(), e.to_string()))?;
            if row.step % every == 0 {
                eprintln!("step {} loss {:.6}", row.step, row.loss);
            }
            Ok(())
        },
        |ckpt| {
            ckpt.save(out.join(format!("step_{:06}.srtn", ckpt.step)))?;
            Ok(())
        },
    )?;
    final_ckpt.save(out.join("final.srtn")).map_err(runtime)?;
    println!(
        "trained {} to step {}; checkpoint {}",
        final_ckpt.mode,
        final_ckpt.step,
        out.join("final.srtn").display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<Model, CliError> {
    let path = required(&cfg.paths.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(&path).map_err(runtime)?;
    let model = Model::from_checkpoint(&ckpt)?;
    Ok(match &cfg.sampler.schedule {
        Some(s) => model.with_schedule(s.build().map_err(|e| CliError::Validation(e.to_string()))?),
        None => model,
    })
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}.wav"))
}

fn run_enhance(cfg: &RunConfig) -> Result<(), CliError> {
    let input = required(&cfg.paths.input, "input")?;
    let out = required(&cfg.paths.out, "out")?;
    let opts = cfg.enhance_options();
    opts.validate()?;
    let model = load_model(cfg)?;

    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        create_dir(&out)?;
        wav_files(&input)?
            .into_iter()
            .map(|p| {
                let name = p.file_name().expect("listed file").to_owned();
                (p, out.join(name))
            })
            .collect()
    } else {
        vec![(input.clone(), out.clone())]
    };
    if jobs.is_empty() {
        return Err(CliError::Validation(format!(
            "no WAV files in {}",
            input.display()
        )));
    }

    for (clip, (src, dst)) in jobs.iter().enumerate() {
        let noisy = wav_read(src)?;
        let result = enhance(&model, &noisy.samples, &opts, clip)?;
        let rate = noisy.sample_rate;
        if opts.n_runs == 1 {
            wav_write(dst, &Waveform::new(result.runs[0].clone(), rate))?;
        } else {
            for (k, run) in result.runs.iter().enumerate() {
                wav_write(
                    with_suffix(dst, &format!("_run{k}")),
                    &Waveform::new(run.clone(), rate),
                )?;
            }
            wav_write(dst, &Waveform::new(result.mean.clone(), rate))?;
        }
        println!("{} -> {}", src.display(), dst.display());
    }
    Ok(())
}

fn run_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let data_dir = required(&cfg.paths.data, "data")?;
    let opts = cfg.enhance_options();
    opts.validate()?;
    let model = load_model(cfg)?;
    let data = Dataset::load(&data_dir)?;
    let report = evaluate(&model, &data, &opts)?;
    let summary = report.summary();
    if let Some(out) = &cfg.paths.out {
        create_dir(out)?;
        write_file(&out.join("evaluation.csv"), report.to_csv().as_bytes())?;
        write_file(&out.join("summary.txt"), format!("{summary}\n").as_bytes())?;
    }
    println!("{summary}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let cfg = RunConfig {
            seed: Some(3),
            ..RunConfig::default()
        };
        let args = CommonArgs {
            seed: Some(9),
            mode: Some(VariantMode::NoDeterministic),
            runs: Some(4),
            ..CommonArgs::default()
        };
        let r = cfg.resolve(&args);
        assert_eq!((r.seed, r.data.seed, r.train.seed), (Some(9), 9, 9));
        assert_eq!(r.train.mode, VariantMode::NoDeterministic);
        assert_eq!(r.sampler.n_runs, 4);
        assert_eq!(r.enhance_options().seed, 9);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"stepz": 3}}"#).is_err());
        let ok: RunConfig = serde_json::from_str(r#"{"train": {"steps": 3}}"#).unwrap();
        assert_eq!(ok.train.steps, 3);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["srtnet", "frobnicate"]), 1);
        assert_eq!(run(["srtnet", "train", "--mode", "srtnet"]), 1);
        assert_eq!(run(["srtnet", "schedule-dump", "--bogus"]), 1);
        assert_eq!(run(["srtnet", "train"]), 1);
    }

    #[test]
    fn every_mode_name_parses() {
        for m in VariantMode::ALL {
            let cli = Cli::try_parse_from(["srtnet", "--mode", m.name(), "schedule-dump"]).unwrap();
            assert_eq!(cli.common.mode, Some(m));
        }
    }
}
