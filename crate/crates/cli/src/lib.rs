//! Subcommands of the `cknet` binary. Exit codes: 0 success, 1 runtime
//! failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;

use cknet_core::checkpoint::{Checkpoint, Dims};
use cknet_core::dataset::{self, Dataset};
use cknet_core::dynamics::{Policy, SystemKind, SystemSpec};
use cknet_core::edmd::{self, Dictionary, SnapshotSet};
use cknet_core::evalreport::{self, EvalReport};
use cknet_core::koopman::{spectrum_csv, KoopmanModel};
use cknet_core::netcore::{EncoderMode, LayerSpec, Network, Shape};
use cknet_core::render::RenderConfig;
use cknet_core::training::{self, TrainConfig, TrainState};
use cknet_core::Error;

pub const THREADS_ENV: &str = "CKNET_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Runtime(Error::Config(_)) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cknet", version, about = "Koopman latent dynamics from pixels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate, render and store a dataset.
    Gen {
        #[arg(long)]
        system: String,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value = "random_uniform")]
        policy: String,
        /// Action CSV for the scripted policy.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        /// Frames stacked per observation.
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
    },
    /// Train a model on a pixel dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Continue from a checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Latent MAE and pixel error curves over a horizon.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Eigenvalues of the learned operator and the controllability rank.
    Spectrum {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decoded open-loop rollout of one episode as a PGM series.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        episode: usize,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// EDMD fit on the recorded states of a dataset.
    Edmd {
        #[arg(long)]
        data_vector: PathBuf,
        /// identity | monomial:D | hermite:D | rbf:K:WIDTH
        #[arg(long, default_value = "identity")]
        dictionary: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Caps the worker pool from `CKNET_THREADS`; unset keeps the default.
pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Gen {
            system,
            episodes,
            steps,
            policy,
            script,
            seed,
            out,
            height,
            width,
            channels,
            threshold,
        } => {
            let render = RenderConfig {
                height,
                width,
                channels,
                enhance_threshold: threshold,
                ..RenderConfig::default()
            };
            let data = cmd_gen(&system, episodes, steps, &policy, script.as_deref(), seed, &out, &render)?;
            println!(
                "wrote {} episodes of {} steps to {}",
                data.manifest.episodes.len(),
                steps,
                out.display()
            );
        }
        Command::Train {
            data,
            config,
            out_checkpoint,
            log,
            resume,
        } => {
            let state = cmd_train(&data, config.as_deref(), &out_checkpoint, &log, resume.as_deref())?;
            let rank = state.model.controllability()?.1;
            if let Some(last) = state.last {
                let l = last.loss;
                println!(
                    "epoch {}: L_linear {:.6e} L_recon {:.6e} L_pred {:.6e} l2 {:.6e} total {:.6e}",
                    last.epoch, l.linear, l.recon, l.pred, l.l2, l.total
                );
            }
            println!("controllability rank {rank} of {}", state.model.latent_dim());
        }
        Command::Eval {
            checkpoint,
            data,
            horizon,
            out,
        } => {
            let report = cmd_eval(&checkpoint, &data, horizon, &out)?;
            println!(
                "evaluated {} episodes ({} skipped); MAE at step {horizon}: {:.6e}",
                report.episodes_used,
                report.episodes_skipped,
                report.mae.last().copied().unwrap_or(0.0)
            );
        }
        Command::Spectrum { checkpoint, out } => {
            let (radius, rank, dim) = cmd_spectrum(&checkpoint, &out)?;
            println!("spectral radius {radius:.6}; controllability rank {rank} of {dim}");
        }
        Command::Predict {
            checkpoint,
            data,
            episode,
            horizon,
            out,
        } => {
            let n = cmd_predict(&checkpoint, &data, episode, horizon, &out)?;
            println!("wrote {n} frames to {}", out.display());
        }
        Command::Edmd {
            data_vector,
            dictionary,
            out,
        } => {
            let fit = cmd_edmd(&data_vector, &dictionary, &out)?;
            for w in &fit.warnings {
                eprintln!("warning: {w}");
            }
            println!("fitted {}x{} operator; outputs in {}", fit.a.nrows(), fit.a.ncols(), out.display());
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_gen(
    system: &str,
    episodes: usize,
    steps: usize,
    policy: &str,
    script: Option<&Path>,
    seed: u64,
    out: &Path,
    render: &RenderConfig,
) -> CliResult<Dataset> {
    if episodes == 0 {
        return Err(CliError::Usage("--episodes must be >= 1".into()));
    }
    if steps == 0 {
        return Err(CliError::Usage("--steps must be >= 1".into()));
    }
    let kind = SystemKind::from_name(system).map_err(|e| CliError::Usage(e.to_string()))?;
    let spec = SystemSpec::by_kind(kind);
    let policy = match Policy::from_name(policy, script) {
        Err(Error::Config(msg)) => return Err(CliError::Usage(msg)),
        other => other?,
    };
    let render = (kind != SystemKind::LinearRef).then_some(render);
    let data = dataset::generate(&spec, &policy, episodes, steps, seed, render)?;
    data.write(out)?;
    Ok(data)
}

/// Final state of a training command.
pub struct TrainOutcome {
    pub model: KoopmanModel,
    pub last: Option<training::EpochRecord>,
}

pub fn read_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(TrainConfig::parse(&text)?)
        }
    }
}

pub fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    out_checkpoint: &Path,
    log: &Path,
    resume: Option<&Path>,
) -> CliResult<TrainOutcome> {
    let cfg = read_config(config)?;
    let data = Dataset::read(data)?;
    let episodes = data.episodes()?;
    let mut state = match resume {
        None => TrainState::new(training::initial_model(&episodes, data.manifest.dt, &cfg)?, &cfg),
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let optimizer = ckpt
                .optimizer
                .ok_or_else(|| Error::format(path, "checkpoint carries no optimizer state to resume from"))?;
            TrainState {
                model: ckpt.model,
                optimizer,
                epoch: ckpt.epoch,
            }
        }
    };
    let records = training::train_from(&mut state, &episodes, &cfg)?;
    write_text(log, &training::log_csv(&records))?;
    Checkpoint::new(state.model.clone(), state.epoch, Some(state.optimizer)).save(out_checkpoint)?;
    Ok(TrainOutcome {
        model: state.model,
        last: records.last().copied(),
    })
}

fn load_compatible(checkpoint: &Path, data: &Path) -> CliResult<(KoopmanModel, Dataset)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data_set = Dataset::read(data)?;
    let dims = ckpt.dims();
    let info = data_set
        .manifest
        .frames
        .ok_or_else(|| Error::format(data, "dataset has no frames"))?;
    let n = data_set.trajectories[0].actions.first().map_or(0, Vec::len);
    let expected = Dims {
        channels: info.channels,
        height: info.height,
        width: info.width,
        action: n,
        ..dims
    };
    if dims != expected {
        return Err(Error::format(
            checkpoint,
            format!("model dims {dims:?} incompatible with dataset ({info:?}, {n} actions)"),
        )
        .into());
    }
    Ok((ckpt.model, data_set))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    Ok(fs::write(path, text).map_err(|e| Error::io(path, e))?)
}

fn create_dir(path: &Path) -> CliResult<()> {
    Ok(fs::create_dir_all(path).map_err(|e| Error::io(path, e))?)
}

/// Writes `curves.csv`, `mae.svg` and `spectrum.csv` under `out`.
pub fn cmd_eval(checkpoint: &Path, data: &Path, horizon: usize, out: &Path) -> CliResult<EvalReport> {
    if horizon == 0 {
        return Err(CliError::Usage("--horizon must be >= 1".into()));
    }
    let (model, data_set) = load_compatible(checkpoint, data)?;
    let episodes = data_set.episodes()?;
    let mut report = evalreport::evaluate(&model, &episodes, horizon, &checkpoint.display().to_string())?;
    if report.episodes_skipped > 0 {
        eprintln!(
            "warning: {} episodes shorter than the horizon were skipped",
            report.episodes_skipped
        );
    }
    create_dir(out)?;
    write_text(&out.join("curves.csv"), &evalreport::curves_csv(&report))?;
    write_text(
        &out.join("mae.svg"),
        &evalreport::svg_line_plot("latent MAE", &[("latent MAE", report.mae.as_slice())]),
    )?;
    match model.spectrum() {
        Ok(spec) => {
            let path = out.join("spectrum.csv");
            write_text(&path, &spectrum_csv(&spec))?;
            report.spectrum_path = Some(path);
        }
        Err(e) => eprintln!("warning: no spectrum export: {e}"),
    }
    Ok(report)
}

/// Writes the spectrum CSV; returns `(spectral radius, rank, latent dim)`.
pub fn cmd_spectrum(checkpoint: &Path, out: &Path) -> CliResult<(f64, usize, usize)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let report = ckpt.model.spectrum()?;
    write_text(out, &spectrum_csv(&report))?;
    Ok((
        report.spectral_radius(),
        report.controllability_rank.unwrap_or(0),
        report.dim(),
    ))
}

pub fn cmd_predict(checkpoint: &Path, data: &Path, episode: usize, horizon: usize, out: &Path) -> CliResult<usize> {
    let (model, data_set) = load_compatible(checkpoint, data)?;
    let episodes = data_set.episodes()?;
    let ep = episodes
        .get(episode)
        .ok_or_else(|| CliError::Usage(format!("--episode {episode} out of range ({} episodes)", episodes.len())))?;
    let frames = evalreport::rollout_images(&model, ep, horizon)?;
    evalreport::write_frame_series(out, &frames)?;
    Ok(frames.len())
}

pub fn parse_dictionary(spec: &str, states: &[Vec<f64>]) -> CliResult<Dictionary> {
    let parts: Vec<&str> = spec.split(':').collect();
    let degree = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| CliError::Usage(format!("bad dictionary degree `{s}`")))
    };
    match parts.as_slice() {
        ["identity"] => Ok(Dictionary::Identity),
        ["monomial", d] => Ok(Dictionary::Monomial { degree: degree(d)? }),
        ["hermite", d] => Ok(Dictionary::Hermite { degree: degree(d)? }),
        ["rbf", k, width] => {
            let k = degree(k)?;
            let width: f64 = width
                .parse()
                .map_err(|_| CliError::Usage(format!("bad rbf width `{width}`")))?;
            if k == 0 || states.is_empty() {
                return Err(CliError::Usage("rbf dictionary needs at least one center".into()));
            }
            // centers spread evenly over the recorded states
            let centers = (0..k).map(|i| states[i * states.len() / k].clone()).collect();
            Ok(Dictionary::Rbf { centers, width })
        }
        _ => Err(CliError::Usage(format!(
            "unknown dictionary `{spec}`; expected identity, monomial:D, hermite:D or rbf:K:WIDTH"
        ))),
    }
}

fn identity_network(n: usize) -> cknet_core::Result<Network> {
    let mut params = vec![0.0; n * n + n];
    for i in 0..n {
        params[i * n + i] = 1.0;
    }
    Network::with_params(Shape::Vector(n), vec![LayerSpec::dense(n, n)], params)
}

/// Model whose encoder and decoder are identities on lifted coordinates.
pub fn lifted_model(a: DMatrix<f64>, b: DMatrix<f64>, dt: f64) -> cknet_core::Result<KoopmanModel> {
    let v = a.nrows();
    KoopmanModel::new(a, b, identity_network(v)?, identity_network(v)?, EncoderMode::Deterministic, dt)
}

/// Writes `model.ckpt`, `spectrum.csv` and `dictionary.txt` under `out`.
pub fn cmd_edmd(data: &Path, dictionary: &str, out: &Path) -> CliResult<edmd::EdmdFit> {
    let data_set = Dataset::read(data)?;
    let all_states: Vec<Vec<f64>> = data_set.trajectories.iter().flat_map(|t| t.states.clone()).collect();
    let dict = parse_dictionary(dictionary, &all_states)?;
    let snaps = SnapshotSet::from_trajectories(&dict, &data_set.trajectories)?;
    let fit = edmd::fit(&snaps)?;
    create_dir(out)?;
    let model = lifted_model(fit.a.clone(), fit.b.clone(), data_set.manifest.dt)?;
    Checkpoint::new(model.clone(), 0, None).save(&out.join("model.ckpt"))?;
    write_text(&out.join("dictionary.txt"), &format!("{dictionary}\n"))?;
    match cknet_core::koopman::spectrum(&model.a, model.dt) {
        Ok(report) => write_text(&out.join("spectrum.csv"), &spectrum_csv(&report))?,
        Err(e) => eprintln!("warning: no spectrum export: {e}"),
    }
    Ok(fit)
}
