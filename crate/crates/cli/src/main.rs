use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use embp_core::em::{make_schedule, Schedule, ScheduleKind};
use embp_core::harness::{run_ber_sweep, run_mse_over_iters, write_block_records, write_sweep_csv};
use embp_core::selftest;
use embp_core::train::{train_schedule, write_log_csv, ParamMask, SyntheticSpec};
use embp_core::{ExperimentConfig, GradientMode, Objective, ScheduleSource, TrainConfig, TrainingSet};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Blind joint channel estimation and detection with EM and belief propagation.
#[derive(Parser)]
#[command(name = "embp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// BER, MSE and BMI over an SNR grid for every configured detector.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Write per-block records as JSON lines.
        #[arg(long, value_name = "FILE")]
        dump_blocks: Option<PathBuf>,
    },
    /// Mean squared channel error after every EMBP iteration.
    Iters {
        #[command(flatten)]
        common: Common,
        /// Schedules to compare, as NAME=SPEC where SPEC is `serial[:T]`,
        /// `parallel[:T]` or a schedule file. Defaults to serial and parallel.
        #[arg(long = "schedule", value_name = "NAME=SPEC")]
        schedules: Vec<String>,
    },
    /// Learn momentum weights by unrolling EMBP.
    Train(TrainArgs),
    /// BER sweep with a schedule loaded from a file.
    EvalSchedule {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        schedule: PathBuf,
    },
    /// Small-instance oracle checks; exits nonzero on any failure.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// INI experiment configuration.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one configuration entry, e.g. `experiment.blocks=500`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output CSV; standard output when absent.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "mse_h")]
    objective: Objective,
    /// Number of unrolled iterations.
    #[arg(long = "T", value_name = "T", default_value_t = 3)]
    iterations: usize,
    /// Budget of raw parameter updates kept after pruning.
    #[arg(long)]
    kem: Option<usize>,
    /// Starting schedule: `serial`, `parallel` or a schedule file.
    #[arg(long, default_value = "parallel")]
    start: String,
    #[arg(long, default_value_t = 250)]
    batches: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.02)]
    step_size: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// `exact` or `spsa`.
    #[arg(long, default_value = "exact")]
    gradient: GradientMode,
    /// Also learn the BP momentum weights.
    #[arg(long)]
    train_bp: bool,
    /// Keep the EM weights fixed.
    #[arg(long)]
    freeze_em: bool,
    /// Training SNR range in dB; defaults to the span of the configured grid.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    snr_range: Option<Vec<f64>>,
    #[arg(long, default_value_t = 256)]
    validation_blocks: usize,
    #[arg(long, default_value_t = 0)]
    validate_every: usize,
    /// Where to write the learned schedule.
    #[arg(long, value_name = "FILE", default_value = "schedule.txt")]
    schedule_out: PathBuf,
    /// Where to write the training log CSV.
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Sweep { common, dump_blocks } => {
            let config = resolve(&common)?;
            let output = run_ber_sweep(&config, dump_blocks.is_some())?;
            report_timing(&output.rows);
            write_csv(common.out.as_deref(), |w| write_sweep_csv(&output.rows, w))?;
            if let (Some(path), Some(records)) = (dump_blocks, output.records) {
                let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                let mut w = BufWriter::new(file);
                write_block_records(&records, &mut w)?;
                w.flush()?;
            }
        }
        Command::Iters { common, schedules } => {
            let config = resolve(&common)?;
            let named = if schedules.is_empty() {
                let t = 3 * (config.memory + 2);
                vec![
                    ("serial".to_string(), make_schedule(ScheduleKind::Serial, t, config.memory)?),
                    ("parallel".to_string(), make_schedule(ScheduleKind::Parallel, t, config.memory)?),
                ]
            } else {
                schedules
                    .iter()
                    .map(|s| parse_named_schedule(s, config.memory))
                    .collect::<Result<_>>()?
            };
            let trace = run_mse_over_iters(&config, &named)?;
            write_csv(common.out.as_deref(), |w| trace.write_csv(w))?;
        }
        Command::Train(args) => train(args)?,
        Command::EvalSchedule { common, schedule } => {
            let mut config = resolve(&common)?;
            config.schedule = ScheduleSource::File(schedule);
            let s = config.schedule.resolve(config.memory)?;
            eprintln!(
                "# schedule: {} iterations, {} raw updates per block",
                s.iterations(),
                s.raw_update_count()
            );
            let output = run_ber_sweep(&config, false)?;
            report_timing(&output.rows);
            write_csv(common.out.as_deref(), |w| write_sweep_csv(&output.rows, w))?;
        }
        Command::Selftest { seed } => {
            eprintln!("# seed = {seed}");
            let checks = selftest::run_all(seed);
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if failed > 0 {
                eprintln!("{failed} of {} checks failed", checks.len());
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Loads the configuration, applies overrides and echoes the result.
fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for entry in &common.overrides {
        let (key, value) = entry
            .split_once('=')
            .with_context(|| format!("override `{entry}` is not of the form key=value"))?;
        config.set(key.trim(), value)?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    eprint!("{}", config.to_ini());
    eprintln!("; master seed {}, {} blocks per SNR point", config.seed, config.blocks);
    Ok(config)
}

fn write_csv(path: Option<&Path>, emit: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let file = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            let mut w = BufWriter::new(file);
            emit(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            emit(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn report_timing(rows: &[embp_core::harness::ResultRow]) {
    for r in rows {
        eprintln!("# snr {} dB: {:.2} s", r.snr_db, r.wall_time.as_secs_f64());
    }
}

fn parse_kind(spec: &str, memory: usize) -> Result<Option<Schedule>> {
    let (name, t) = match spec.split_once(':') {
        Some((n, t)) => (n, Some(t.parse::<usize>().with_context(|| format!("bad iteration count in `{spec}`"))?)),
        None => (spec, None),
    };
    let kind = match name {
        "serial" => ScheduleKind::Serial,
        "parallel" => ScheduleKind::Parallel,
        _ => return Ok(None),
    };
    Ok(Some(make_schedule(kind, t.unwrap_or(3 * (memory + 2)), memory)?))
}

fn parse_named_schedule(entry: &str, memory: usize) -> Result<(String, Schedule)> {
    let (name, spec) = entry.split_once('=').unwrap_or((entry, entry));
    let schedule = match parse_kind(spec, memory)? {
        Some(s) => s,
        None => Schedule::load(spec).with_context(|| format!("loading schedule `{spec}`"))?,
    };
    if schedule.memory() != memory {
        bail!("schedule `{name}` is for memory {}, experiment uses {memory}", schedule.memory());
    }
    Ok((name.to_string(), schedule))
}

fn train(args: TrainArgs) -> Result<()> {
    let config = resolve(&args.common)?;
    let initial = match parse_kind(&args.start, config.memory)? {
        Some(_) => {
            let kind: ScheduleKind = args.start.parse()?;
            make_schedule(kind, args.iterations, config.memory)?
        }
        None => Schedule::load(&args.start).with_context(|| format!("loading schedule `{}`", args.start))?,
    };
    if initial.memory() != config.memory {
        bail!("start schedule is for memory {}, experiment uses {}", initial.memory(), config.memory);
    }
    let snr_db = match &args.snr_range {
        Some(r) => (r[0], r[1]),
        None => {
            let lo = config.snr_db.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = config.snr_db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        }
    };
    let set = TrainingSet::synthetic(
        SyntheticSpec {
            block_len: config.block_len,
            memory: config.memory,
            constellation: config.constellation.clone(),
            snr_db,
            init: config.init.clone(),
            seed: config.seed,
        },
        args.validation_blocks,
    )?;
    let train_config = TrainConfig {
        objective: args.objective,
        batches: args.batches,
        batch_size: args.batch_size,
        step_size: args.step_size,
        k_em_target: args.kem,
        lambda_l1: args.lambda,
        gradient_mode: args.gradient,
        mask: ParamMask {
            em: !args.freeze_em,
            bp: args.train_bp,
        },
        seed: config.seed,
        validate_every: args.validate_every,
    };
    eprintln!(
        "; training {} on T = {}, {} batches of {}, snr [{}, {}] dB, kem {:?}",
        args.objective,
        initial.iterations(),
        args.batches,
        args.batch_size,
        snr_db.0,
        snr_db.1,
        args.kem
    );
    let outcome = train_schedule(&set, &train_config, initial)?;
    outcome
        .schedule
        .save(&args.schedule_out)
        .with_context(|| format!("writing {}", args.schedule_out.display()))?;
    eprintln!(
        "# wrote {} ({} raw updates per block)",
        args.schedule_out.display(),
        outcome.schedule.raw_update_count()
    );
    if let Some(path) = &args.log {
        write_csv(Some(path), |w| write_log_csv(&outcome.log, w))?;
    }
    Ok(())
}
