use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use spikesplat::config::RunConfigFile;
use spikesplat::eval::{ablation_report, evaluate_run, pose_report};
use spikesplat::formats::{write_pgm, write_tensor, Checkpoint};
use spikesplat::recon::{recon_sequence, ReconInputs, ReconNetParams};
use spikesplat::scene::{build_dataset, gen_scene, Dataset};
use spikesplat::spike::{read_spk, tfi, tfp};
use spikesplat::trainer::{RunOutput, RunState, TrainConfig, TrainMode, Trainer};
use spikesplat::{diff::Tensor, Image};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] spikesplat::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Missing(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => match e {
                spikesplat::Error::InvalidArgument(_) => "invalid-argument",
                spikesplat::Error::Shape(_) => "shape",
                spikesplat::Error::OutOfRange(_) => "out-of-range",
                spikesplat::Error::NonFinite(_) => "non-finite",
                spikesplat::Error::Format(_) => "format",
                spikesplat::Error::Tape(_) => "tape",
                spikesplat::Error::Io(_) => "io",
                spikesplat::Error::Json(_) => "config",
            },
            CliError::Usage(_) => "usage",
            CliError::Missing(_) => "missing-file",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "spikesplat", version, about = "Spike-camera reconstruction, pose refinement and Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Tfp,
    Tfi,
    Net,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Joint,
    GsOnly,
    RecOnly,
    JointSingleReblur,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Joint => TrainMode::Joint,
            Mode::GsOnly => TrainMode::GsOnly,
            Mode::RecOnly => TrainMode::RecOnly,
            Mode::JointSingleReblur => TrainMode::JointSingleReblur,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a scene and write its dataset.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct one image from a spike stream.
    Reconstruct {
        #[arg(long)]
        spike: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Frame index of the reconstruction (default: middle frame).
        #[arg(long)]
        center: Option<usize>,
        #[arg(long, default_value_t = 41)]
        window: usize,
        #[arg(long, default_value_t = 1.0)]
        threshold: f64,
        /// Exposure length used to normalise time for `net`.
        #[arg(long, default_value_t = 97)]
        exposure: usize,
        /// `.pgm` for an 8-bit preview, anything else for a tensor file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "joint")]
        mode: Mode,
        #[arg(long, value_parser = ["0", "10", "20", "30"])]
        pose_level: Option<String>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics and degradation probe of a finished run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pose errors before and after training.
    PoseEval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        level: Option<u32>,
    },
    /// Train every ablation mode with a shared seed and tabulate them.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfigFile> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Missing(format!("config {} not found", p.display())));
            }
            Ok(RunConfigFile::load(p)?)
        }
        None => Ok(RunConfigFile::default()),
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("scene.json").exists() {
        return Err(CliError::Missing(format!("{} has no scene.json", dir.display())));
    }
    Ok(Dataset::load(dir)?)
}

fn write_image(path: &Path, img: &Image) -> Result<()> {
    if path.extension().is_some_and(|e| e == "pgm") {
        write_pgm(path, img)?;
    } else {
        write_tensor(path, &Tensor::from_image(img).reshape(&[img.height(), img.width()])?)?;
    }
    Ok(())
}

fn final_checkpoint(run: &Path) -> Result<PathBuf> {
    let dir = run.join("checkpoints");
    let mut best: Option<(u64, PathBuf)> = None;
    let entries = fs::read_dir(&dir).map_err(|_| CliError::Missing(format!("{} not found", dir.display())))?;
    for entry in entries {
        let path = entry.map_err(spikesplat::Error::from)?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_")?.strip_suffix(".ckpt")?.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().map_or(true, |(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| CliError::Missing(format!("no checkpoints in {}", dir.display())))
}

fn run_echo(run: &Path) -> Result<RunConfigFile> {
    let p = run.join("config.json");
    if !p.exists() {
        return Err(CliError::Missing(format!("{} not found", p.display())));
    }
    Ok(RunConfigFile::load(p)?)
}

fn train_one(dataset: &Dataset, cfg: &RunConfigFile, out: &Path) -> Result<RunState> {
    fs::create_dir_all(out).map_err(spikesplat::Error::from)?;
    cfg.write(out.join("config.json"))?;
    let mut trainer = Trainer::new(dataset, &cfg.train)?;
    trainer.run(Some(RunOutput { dir: out }))?;
    Ok(trainer.state)
}

fn text_path(out: &Path) -> PathBuf {
    out.with_extension("txt")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let spec = gen_scene(&cfg.scene)?;
            let ds = build_dataset(spec, &out)?;
            cfg.write(out.join("config.json"))?;
            println!(
                "wrote {} views of {}x{} ({} frames) to {}",
                ds.views.len(),
                ds.width(),
                ds.height(),
                ds.spec.layout.total_frames,
                out.display()
            );
        }
        Command::Reconstruct {
            spike,
            method,
            checkpoint,
            center,
            window,
            threshold,
            exposure,
            out,
        } => {
            if !spike.exists() {
                return Err(CliError::Missing(format!("{} not found", spike.display())));
            }
            let stream = read_spk(&spike)?;
            let k = center.unwrap_or(stream.frames() / 2);
            if k >= stream.frames() {
                return Err(CliError::Usage(format!("center {k} outside {} frames", stream.frames())));
            }
            let img = match method {
                Method::Tfp => {
                    let half = window / 2;
                    let lo = k.saturating_sub(half);
                    let hi = (k + half).min(stream.frames() - 1);
                    tfp(&stream, lo..=hi, threshold)?
                }
                Method::Tfi => tfi(&stream, k, threshold)?,
                Method::Net => {
                    let ckpt = checkpoint
                        .ok_or_else(|| CliError::Usage("--method net requires --checkpoint".into()))?;
                    let ckpt = Checkpoint::read(&ckpt)?;
                    let meta: serde_json::Value = serde_json::from_str(&ckpt.metadata).map_err(spikesplat::Error::from)?;
                    let train: TrainConfig =
                        serde_json::from_value(meta["config"].clone()).map_err(spikesplat::Error::from)?;
                    let net = ReconNetParams::from_named(train.network, ckpt.with_prefix("network."))?;
                    if exposure > stream.frames() || exposure < 2 {
                        return Err(CliError::Usage(format!("exposure {exposure} does not fit the stream")));
                    }
                    let margin = (stream.frames() - exposure) / 2;
                    let t = (k as f64 - margin as f64) / (exposure - 1) as f64;
                    let inputs =
                        ReconInputs::from_stream(&stream, &[k], &[t.clamp(0.0, 1.0)], train.network.short_frames)?;
                    recon_sequence(&net, &inputs)?.remove(0)
                }
            };
            write_image(&out, &img)?;
            println!("mean {:.6} -> {}", img.mean(), out.display());
        }
        Command::Train {
            dataset,
            mode,
            pose_level,
            iters,
            seed,
            config,
            out,
        } => {
            let ds = load_dataset(&dataset)?;
            let mut cfg = load_config(config.as_deref())?;
            cfg.train.mode = mode.into();
            if let Some(l) = pose_level {
                cfg.train.pose_level = l.parse().map_err(|_| CliError::Usage(format!("bad level {l}")))?;
            }
            if let Some(n) = iters {
                cfg.train.iterations = n;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let state = train_one(&ds, &cfg, &out)?;
            let last = state.log.last().map(|r| r.report.total).unwrap_or(f64::NAN);
            println!("trained {} for {} steps; final loss {last:.6e}", cfg.train.mode, state.step);
        }
        Command::Eval { run, dataset, out } => {
            let ds = load_dataset(&dataset)?;
            let _echo = run_echo(&run)?;
            let state = RunState::load(final_checkpoint(&run)?, &ds)?;
            let report = evaluate_run(&state, &ds)?;
            fs::write(&out, report.csv()).map_err(spikesplat::Error::from)?;
            fs::write(text_path(&out), report.text()).map_err(spikesplat::Error::from)?;
            print!("{}", report.text());
        }
        Command::PoseEval { run, dataset, level } => {
            let ds = load_dataset(&dataset)?;
            let echo = run_echo(&run)?;
            let state = RunState::load(final_checkpoint(&run)?, &ds)?;
            let level = level.unwrap_or(echo.eval.pose_level);
            if level != state.config.pose_level {
                return Err(CliError::Usage(format!(
                    "run started from level {}, not {level}",
                    state.config.pose_level
                )));
            }
            print!("{}", pose_report(&state, &ds, level)?.text());
        }
        Command::Ablate {
            dataset,
            out,
            iters,
            seed,
            config,
        } => {
            let ds = load_dataset(&dataset)?;
            let mut base = load_config(config.as_deref())?;
            if let Some(n) = iters {
                base.train.iterations = n;
            }
            if let Some(s) = seed {
                base.train.seed = s;
            }
            let mut states = Vec::new();
            for mode in TrainMode::ALL {
                let mut cfg = base.clone();
                cfg.train.mode = mode;
                cfg.validate()?;
                let state = train_one(&ds, &cfg, &out.join(mode.name()))?;
                eprintln!("finished {mode}");
                states.push((mode, state));
            }
            let runs: Vec<_> = states.iter().map(|(m, s)| (*m, s)).collect();
            let report = ablation_report(&runs, &ds)?;
            fs::write(out.join("ablation.csv"), report.csv()).map_err(spikesplat::Error::from)?;
            fs::write(out.join("ablation.txt"), report.text()).map_err(spikesplat::Error::from)?;
            print!("{}", report.text());
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("USPG_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("USPG_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
