use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lfm_audio::audio_io::{read_json, read_matrix_csv, read_wav, write_json, write_matrix_csv, write_wav, EnvelopeMatrix};
use lfm_audio::baselines::{relative_report, rms_error, cosine_distance, Metrics};
use lfm_audio::filterbank::ErbFilterbank;
use lfm_audio::pipeline::{
    decompose, evaluate_sound, generate, hex_digest, reconstruct, train_model, DemodSpec, ModelFile, ModelInputs, PipelineConfig,
};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const THREADS_VAR: &str = "LFM_SOUND_THREADS";

#[derive(Parser)]
#[command(name = "lfm-audio", version, about = "Latent force modelling of natural sound envelopes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a WAV file into subband envelopes and carriers.
    Decompose {
        input: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[command(flatten)]
        front: FrontFlags,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit a model to an envelope CSV.
    Train {
        envelopes: PathBuf,
        /// fb.json from decompose; needed later for sampling
        #[arg(long)]
        filterbank: Option<PathBuf>,
        /// carriers.csv from decompose; needed later for sampling
        #[arg(long)]
        carriers: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Rebuild envelopes from the smoothed latent forces.
    Reconstruct {
        model: PathBuf,
        envelopes: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Generate a new sound from a model.
    Sample {
        model: PathBuf,
        /// Seconds of audio to generate.
        #[arg(long, default_value_t = 2.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out.wav")]
        out: PathBuf,
    },
    /// Compare the model with NMF and tNMF on every WAV in a directory.
    Evaluate {
        sound_dir: PathBuf,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
        #[command(flatten)]
        front: FrontFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct FrontFlags {
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    f_lo: Option<f64>,
    #[arg(long)]
    f_hi: Option<f64>,
    #[arg(long)]
    lengthscale_ms: Option<f64>,
    #[arg(long)]
    decimation: Option<usize>,
}

#[derive(Args, Default)]
struct TrainFlags {
    /// Latent force count; omitted means chosen by BIC.
    #[arg(long)]
    forces: Option<usize>,
    #[arg(long)]
    history: Option<usize>,
    /// Iteration cap per training stage.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct FilterbankFile {
    filterbank: ErbFilterbank,
    demod: DemodSpec,
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    duration: f64,
    model_hash: String,
    sample_rate: u32,
    samples: usize,
}

/// Everything went through, but something deserves a look.
struct Warnings;

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => read_json(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn apply_front(cfg: &mut PipelineConfig, f: &FrontFlags) {
    let fe = &mut cfg.front_end;
    fe.channels = f.channels.unwrap_or(fe.channels);
    fe.f_lo = f.f_lo.unwrap_or(fe.f_lo);
    fe.f_hi = f.f_hi.unwrap_or(fe.f_hi);
    fe.lengthscale_ms = f.lengthscale_ms.unwrap_or(fe.lengthscale_ms);
    fe.decimation = f.decimation.unwrap_or(fe.decimation);
}

fn apply_train(cfg: &mut PipelineConfig, f: &TrainFlags) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(r) = f.forces {
        if r == 0 {
            bail!("--forces must be at least 1");
        }
        t.forces = Some(r);
    }
    if let Some(p) = f.history {
        t.history = p;
    }
    if let Some(n) = f.iters {
        if n == 0 {
            bail!("--iters must be at least 1");
        }
        t.max_iters = n;
    }
    t.seed = f.seed.unwrap_or(t.seed);
    t.check()?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_decompose(input: &Path, out_dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    let audio = read_wav(input).with_context(|| format!("reading {}", input.display()))?;
    let dec = decompose(&audio, &cfg.front_end)?;
    create_dir(out_dir)?;
    dec.envelopes.write_csv(out_dir.join("envelopes.csv"))?;
    let carriers = nalgebra::DMatrix::from_fn(dec.carriers.len(), dec.carriers[0].len(), |m, i| dec.carriers[m][i]);
    write_matrix_csv(out_dir.join("carriers.csv"), &carriers, dec.fb.sample_rate as f64)?;
    write_json(
        out_dir.join("fb.json"),
        &FilterbankFile {
            filterbank: dec.fb,
            demod: dec.demod,
        },
    )?;
    info!(
        "{} channels x {} frames at {} Hz",
        dec.envelopes.channels(),
        dec.envelopes.frames(),
        dec.envelopes.frame_rate
    );
    Ok(())
}

fn cmd_train(
    envelopes: &Path,
    filterbank: Option<&Path>,
    carriers: Option<&Path>,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<Option<Warnings>> {
    let env = EnvelopeMatrix::read_csv(envelopes)?;
    let mut inputs = ModelInputs::default();
    if let Some(path) = filterbank {
        let fb: FilterbankFile = read_json(path).with_context(|| format!("reading {}", path.display()))?;
        inputs.filterbank = Some(fb.filterbank);
        inputs.demod = Some(fb.demod);
    }
    if let Some(path) = carriers {
        let (values, _) = read_matrix_csv(path)?;
        inputs.carriers = Some(values.row_iter().map(|r| r.iter().copied().collect()).collect());
    }
    let (model, report) = train_model(&env, &cfg.train, inputs)?;
    create_dir(out_dir)?;
    fs::write(out_dir.join("model.json"), model.to_json()?).context("writing model.json")?;
    write_json(out_dir.join("report.json"), &report)?;
    info!("loglik {:.3} after {:.1} s", report.loglik, report.wall_time_s);
    if report.warnings.is_empty() {
        Ok(None)
    } else {
        for w in &report.warnings {
            warn!("{w}");
        }
        Ok(Some(Warnings))
    }
}

fn load_model(path: &Path) -> Result<(ModelFile, Vec<u8>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let text = std::str::from_utf8(&bytes).context("model file is not UTF-8")?;
    let model = ModelFile::from_json(text).with_context(|| format!("loading model {}", path.display()))?;
    Ok((model, bytes))
}

fn cmd_reconstruct(model: &Path, envelopes: &Path, out_dir: &Path) -> Result<()> {
    let (model, _) = load_model(model)?;
    let env = EnvelopeMatrix::read_csv(envelopes)?;
    let recon = reconstruct(&env, &model.params, &model.layout, model.provenance.config.skip_threshold_db)?;
    let metrics = Metrics {
        rms: rms_error(&env.values, &recon)?,
        cosine: cosine_distance(&env.values, &recon)?,
    };
    create_dir(out_dir)?;
    write_matrix_csv(out_dir.join("recon.csv"), &recon, env.frame_rate)?;
    write_json(out_dir.join("metrics.json"), &metrics)?;
    info!("rms {:.6}, cosine {:.6}", metrics.rms, metrics.cosine);
    Ok(())
}

fn cmd_sample(model_path: &Path, duration: f64, seed: u64, out: &Path) -> Result<()> {
    if !(duration > 0.0 && duration.is_finite()) {
        bail!("--duration must be a positive number of seconds, got {duration}");
    }
    let (model, bytes) = load_model(model_path)?;
    let (audio, _) = generate(&model, duration, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_wav(&audio, out)?;
    let manifest = Manifest {
        seed,
        duration,
        model_hash: hex_digest(&bytes),
        sample_rate: audio.sample_rate,
        samples: audio.len(),
    };
    write_json(out.with_file_name("manifest.json"), &manifest)?;
    Ok(())
}

/// Sounds that fail are logged and listed in the report; the run still succeeds.
fn cmd_evaluate(dir: &Path, out: &Path, cfg: &PipelineConfig) -> Result<()> {
    cfg.front_end.check()?;
    cfg.baselines.check()?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no WAV files in {}", dir.display());
    }
    let results: Vec<_> = files
        .par_iter()
        .map(|path| {
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let outcome = read_wav(path)
                .and_then(|audio| evaluate_sound(&name, &audio, &cfg.front_end, &cfg.train, &cfg.baselines));
            (name, outcome)
        })
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (name, outcome) in results {
        match outcome {
            Ok(m) => ok.push(m),
            Err(e) => {
                warn!("{name} excluded: {e}");
                failed.push((name, e.to_string()));
            }
        }
    }
    if ok.is_empty() {
        bail!("every sound failed; first error: {}", failed[0].1);
    }
    let mut report = relative_report(&ok);
    report.excluded.extend(failed.iter().cloned());
    if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(d)?;
    }
    fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", report.to_table());
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .with_context(|| format!("{THREADS_VAR} must be a positive integer, got `{value}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<Option<Warnings>> {
    configure_threads()?;
    match cli.command {
        Command::Decompose {
            input,
            out_dir,
            front,
            config,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            apply_front(&mut cfg, &front);
            cmd_decompose(&input, &out_dir, &cfg)?;
            Ok(None)
        }
        Command::Train {
            envelopes,
            filterbank,
            carriers,
            out_dir,
            train,
            config,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            apply_train(&mut cfg, &train)?;
            cmd_train(&envelopes, filterbank.as_deref(), carriers.as_deref(), &out_dir, &cfg)
        }
        Command::Reconstruct {
            model,
            envelopes,
            out_dir,
        } => {
            cmd_reconstruct(&model, &envelopes, &out_dir)?;
            Ok(None)
        }
        Command::Sample {
            model,
            duration,
            seed,
            out,
        } => {
            cmd_sample(&model, duration, seed, &out)?;
            Ok(None)
        }
        Command::Evaluate {
            sound_dir,
            out,
            front,
            train,
            config,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            apply_front(&mut cfg, &front);
            apply_train(&mut cfg, &train)?;
            cmd_evaluate(&sound_dir, &out, &cfg)?;
            Ok(None)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(Warnings)) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
