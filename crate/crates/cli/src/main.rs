use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hjreach_core::grid::{self, Grid};
use hjreach_core::io::{self, Checkpoint, RunConfig};
use hjreach_core::rng::{self, Stream};
use hjreach_core::rollout::{self, default_dt};
use hjreach_core::train::{run_pretrain, run_train};
use hjreach_core::verify::{self, RunRecord};
use hjreach_core::{Error, LearnedValue, SystemSpec, ValueFunction};

#[derive(Parser)]
#[command(name = "hjreach", version, about = "Reachability analysis with neural value functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the training and verification seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Primary output path of the command.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArg {
    /// Checkpoint to evaluate; defaults to the configured checkpoint path.
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Zero the network output at the terminal time.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Overrides `train.pretrain_iters`.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Curriculum training; pretrains first unless resuming.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `train.iters`.
        #[arg(long)]
        iters: Option<usize>,
        /// Resume from this checkpoint.
        #[arg(long, value_name = "PATH")]
        from: Option<PathBuf>,
        /// Accept a checkpoint made for a different system definition.
        #[arg(long)]
        force: bool,
    },
    /// Solve the grid oracle down to t = 0.
    GridSolve {
        #[command(flatten)]
        common: Common,
    },
    /// Monte-Carlo volume of the corrected safe set.
    EvalVolume {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
    },
    /// Conformal calibration followed by the volume estimate.
    Verify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Simulate the learned policy from one state and write the trajectory CSV.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        /// Initial state, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        x0: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
        /// Step size; `T / 500` by default.
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Write a 2-D slice of a model or grid field as CSV.
    ExportSlice {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        /// Slice a grid field file instead of a model.
        #[arg(long, value_name = "PATH", conflicts_with = "ckpt")]
        field: Option<PathBuf>,
        /// Overrides `slice.delta`.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Summarize verification records as mean ± std per variant.
    Report {
        #[command(flatten)]
        common: Common,
        /// Record files (JSON lines); defaults to the configured report path.
        #[arg(long = "input", value_name = "PATH")]
        inputs: Vec<PathBuf>,
    },
}

/// Invocation problems, reported with exit code 2 like clap's own errors.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            if matches!(
                e,
                Error::Checksum { .. } | Error::Metadata(_) | Error::Format { .. }
            ) {
                return 3;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HJREACH_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("HJREACH_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

/// Config plus the system it describes, with CLI overrides applied.
struct Setup {
    cfg: RunConfig,
    sys: SystemSpec,
}

fn load(common: &Common) -> Result<Setup> {
    if !common.config.is_file() {
        return Err(UsageError(format!(
            "config file {} does not exist\n\nUsage: hjreach <COMMAND> --config <PATH>",
            common.config.display()
        ))
        .into());
    }
    let mut cfg = RunConfig::load(&common.config)
        .with_context(|| format!("reading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.verify.seed = seed;
    }
    let sys = cfg.system.build()?;
    Ok(Setup { cfg, sys })
}

impl Setup {
    fn path(&self, configured: &Path) -> PathBuf {
        self.cfg.output.resolve(configured)
    }

    fn checkpoint_path(&self, model: &ModelArg) -> PathBuf {
        model
            .ckpt
            .clone()
            .unwrap_or_else(|| self.path(&self.cfg.output.checkpoint))
    }

    fn model(&self, model: &ModelArg) -> Result<LearnedValue> {
        let path = self.checkpoint_path(model);
        let ckpt = io::load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        ckpt.check_system(&self.sys)?;
        Ok(LearnedValue {
            variant: ckpt.variant,
            params: ckpt.params,
            sys: self.sys.clone(),
            vanilla_scale: ckpt.vanilla_scale,
        })
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn append(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { common, iters } => {
            let mut s = load(&common)?;
            if let Some(n) = iters {
                s.cfg.train.pretrain_iters = n;
            }
            let mut params = s.cfg.train.init_params(&s.sys)?;
            let mut log = create(&s.path(&s.cfg.output.train_log))?;
            let trace = run_pretrain(&mut params, &s.sys, &s.cfg.train, Some(&mut log))?;
            log.flush()?;
            let out = common.out.clone().unwrap_or_else(|| s.path(&s.cfg.output.checkpoint));
            io::save_checkpoint(&out, &Checkpoint::new(&s.sys, &s.cfg.train, 0, params))?;
            println!(
                "pretrained {} iterations, final loss {:.3e}, wrote {}",
                trace.len(),
                trace.last().copied().unwrap_or(0.0),
                out.display()
            );
        }
        Command::Train {
            common,
            iters,
            from,
            force,
        } => {
            let mut s = load(&common)?;
            if let Some(n) = iters {
                s.cfg.train.iters = n;
            }
            let log_path = s.path(&s.cfg.output.train_log);
            let (mut params, start, mut log) = match &from {
                Some(path) => {
                    let ckpt = io::load_checkpoint(path)
                        .with_context(|| format!("loading {}", path.display()))?;
                    if !force {
                        ckpt.check_system(&s.sys)?;
                    }
                    if ckpt.variant != s.cfg.train.variant {
                        return Err(Error::Metadata(format!(
                            "checkpoint holds a {} model, config trains {}",
                            ckpt.variant, s.cfg.train.variant
                        ))
                        .into());
                    }
                    let expected = s.cfg.train.layer_sizes(&s.sys);
                    if ckpt.params.layer_sizes != expected {
                        return Err(Error::Metadata(format!(
                            "checkpoint layers {:?} differ from configured {:?}",
                            ckpt.params.layer_sizes, expected
                        ))
                        .into());
                    }
                    (ckpt.params, ckpt.iteration as usize, append(&log_path)?)
                }
                None => {
                    let mut params = s.cfg.train.init_params(&s.sys)?;
                    let mut log = create(&log_path)?;
                    run_pretrain(&mut params, &s.sys, &s.cfg.train, Some(&mut log))?;
                    (params, 0, log)
                }
            };
            let stats = run_train(&mut params, &s.sys, &s.cfg.train, start, Some(&mut log))?;
            log.flush()?;
            let out = common.out.clone().unwrap_or_else(|| s.path(&s.cfg.output.checkpoint));
            let done = s.cfg.train.iters.max(start) as u64;
            io::save_checkpoint(&out, &Checkpoint::new(&s.sys, &s.cfg.train, done, params))?;
            match stats.last() {
                Some(last) => println!(
                    "trained iterations {start}..{done}, final pde loss {:.3e}, wrote {}",
                    last.pde_loss,
                    out.display()
                ),
                None => println!("nothing to train (checkpoint at iteration {start}), wrote {}", out.display()),
            }
        }
        Command::GridSolve { common } => {
            let s = load(&common)?;
            let Some(gcfg) = &s.cfg.grid else {
                bail!("the config has no [grid] section");
            };
            let grid = Grid::for_system(&s.sys, gcfg.counts.clone())?;
            let field = grid::solve(&s.sys, &grid, s.sys.horizon, gcfg.cfl)?;
            let out = common.out.clone().unwrap_or_else(|| s.path(&s.cfg.output.field));
            io::save_field(&out, &field)?;
            println!(
                "solved {} nodes, sub-zero fraction {:.4}, wrote {}",
                grid.len(),
                field.sub_zero_fraction(),
                out.display()
            );
        }
        Command::EvalVolume {
            common,
            model,
            delta,
        } => {
            let s = load(&common)?;
            let vf = s.model(&model)?;
            let mut rng = rng::stream(s.cfg.verify.seed, Stream::Volume);
            let volume = verify::mc_volume(&vf, delta, s.cfg.verify.volume_samples, &mut rng)?;
            println!("volume {volume:.3}% at delta {delta} ({} samples)", s.cfg.verify.volume_samples);
            if let Some(out) = &common.out {
                let rec = record(&s, &vf, delta, volume);
                let mut w = create(out)?;
                serde_json::to_writer(&mut w, &rec)?;
                writeln!(w)?;
                w.flush()?;
            }
        }
        Command::Verify { common, model } => {
            let s = load(&common)?;
            s.cfg.verify.validate()?;
            let vf = s.model(&model)?;
            let mut cal_rng = rng::stream(s.cfg.verify.seed, Stream::Calibration);
            let cal = verify::calibrate(&vf, &s.cfg.verify, &mut cal_rng)?;
            let mut vol_rng = rng::stream(s.cfg.verify.seed, Stream::Volume);
            let volume = verify::mc_volume(&vf, cal.delta, s.cfg.verify.volume_samples, &mut vol_rng)?;
            let rec = record(&s, &vf, cal.delta, volume);
            let out = common.out.clone().unwrap_or_else(|| s.path(&s.cfg.output.report));
            let mut w = append(&out)?;
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w)?;
            w.flush()?;
            println!(
                "delta {:.6} (epsilon {}, {} rollouts), volume {:.3}%, appended to {}",
                cal.delta,
                s.cfg.verify.epsilon,
                s.cfg.verify.calib_samples,
                volume,
                out.display()
            );
        }
        Command::Rollout {
            common,
            model,
            x0,
            t0,
            dt,
        } => {
            let s = load(&common)?;
            let vf = s.model(&model)?;
            let dt = dt.unwrap_or_else(|| default_dt(&s.sys));
            let traj = rollout::simulate(&s.sys, |x, t| vf.control(x, t), &x0, t0, dt)?;
            let out = common.out.clone().unwrap_or_else(|| s.path(Path::new("rollout.csv")));
            let mut w = create(&out)?;
            traj.write_csv(&s.sys, &mut w)?;
            w.flush()?;
            println!(
                "{} steps, cost {:.6}{}, wrote {}",
                traj.len() - 1,
                traj.cost,
                if traj.diverged { " (diverged)" } else { "" },
                out.display()
            );
        }
        Command::ExportSlice {
            common,
            model,
            field,
            delta,
        } => {
            let s = load(&common)?;
            let Some(mut spec) = s.cfg.slice.clone() else {
                bail!("the config has no [slice] section");
            };
            if let Some(d) = delta {
                spec.delta = d;
            }
            let out = common.out.clone().unwrap_or_else(|| s.path(&s.cfg.output.slice));
            let mut w = create(&out)?;
            match &field {
                Some(path) => {
                    let f = io::load_field(path).with_context(|| format!("loading {}", path.display()))?;
                    io::export_field_slice(&f, &s.sys, &spec, &mut w)?;
                }
                None => io::export_model_slice(&s.model(&model)?, &spec, &mut w)?,
            }
            w.flush()?;
            println!(
                "wrote {} rows to {}",
                spec.resolution * spec.resolution,
                out.display()
            );
        }
        Command::Report { common, inputs } => {
            let s = load(&common)?;
            let inputs = if inputs.is_empty() {
                vec![s.path(&s.cfg.output.report)]
            } else {
                inputs
            };
            let mut records = Vec::new();
            for path in &inputs {
                let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                for (i, line) in BufReader::new(f).lines().enumerate() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let rec: RunRecord = serde_json::from_str(&line)
                        .with_context(|| format!("{}:{}", path.display(), i + 1))?;
                    records.push(rec);
                }
            }
            if records.is_empty() {
                bail!("no run records found");
            }
            let rows = verify::volume_report(&records);
            print!("{}", verify::format_table(&rows));
            if let Some(out) = &common.out {
                let mut w = create(out)?;
                serde_json::to_writer_pretty(&mut w, &rows)?;
                writeln!(w)?;
                w.flush()?;
            }
        }
    }
    Ok(())
}

fn record(s: &Setup, vf: &LearnedValue, delta: f64, volume: f64) -> RunRecord {
    RunRecord {
        system: s.sys.name.clone(),
        variant: vf.variant.to_string(),
        seed: s.cfg.train.seed,
        delta,
        volume,
    }
}
