use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lemon_core::checkpoint::{read_checkpoint, read_header, read_json, write_checkpoint_with_map, AnyWeights};
use lemon_core::expander::{expand_model, DepthMode, DuplicateMap, ExpansionPlan, Policy};
use lemon_core::recipe::{init_random_model, symmetry_report, verify_lossless};
use lemon_core::schedule::{schedule_csv, ScheduleSpec};
use lemon_core::{DType, Error};

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "lemon", version, about = "Lossless model expansion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Lemon,
    Net2netEqual,
    ZeroTail,
}

#[derive(Clone, Copy, ValueEnum)]
enum DepthArg {
    Type1,
    Type2,
    Type1Aki,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Expand a checkpoint to a wider and/or deeper model.
    Expand {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        target_width: Option<usize>,
        #[arg(long)]
        target_depth: Option<usize>,
        #[arg(long, value_enum, default_value = "lemon")]
        policy: PolicyArg,
        #[arg(long, value_enum, default_value = "type1")]
        depth_mode: DepthArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        noise_scale: Option<f64>,
        /// JSON expansion plan; command-line flags override its fields.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Check that two checkpoints compute the same function.
    Verify {
        #[arg(long)]
        small: PathBuf,
        #[arg(long)]
        big: PathBuf,
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Emit a warmup + cosine learning-rate schedule as CSV.
    Schedule {
        #[arg(long, required_unless_present = "preset")]
        max_lr: Option<f64>,
        #[arg(long, required_unless_present = "preset")]
        min_lr: Option<f64>,
        #[arg(long, required_unless_present = "preset")]
        total: Option<u64>,
        #[arg(long, required_unless_present = "preset")]
        warmup: Option<u64>,
        /// vit, vit-lemon, bert, bert-lemon-165k or bert-lemon-132k.
        #[arg(long, conflicts_with_all = ["max_lr", "min_lr", "total", "warmup"])]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a checkpoint's header and validate its tensor table.
    Inspect { file: PathBuf },
    /// Report how far apart the fan-out weights of replicated units are.
    Symmetry {
        #[arg(long)]
        ckpt: PathBuf,
        /// Duplicate map JSON; defaults to the one stored in the checkpoint.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Write a checkpoint with deterministic random weights.
    InitRandom {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DTypeArg,
    },
}

enum Outcome {
    Pass,
    Fail,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_usage() {
        EXIT_USAGE
    } else {
        EXIT_IO
    }
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    match cli.command {
        Command::Expand {
            input,
            out,
            target_width,
            target_depth,
            policy,
            depth_mode,
            seed,
            noise_scale,
            plan,
        } => {
            let ck = read_checkpoint(&input)?;
            let mut p = match plan {
                Some(path) => read_json::<ExpansionPlan>(path).map_err(|e| match e {
                    Error::Json(j) => Error::InvalidPlan(j.to_string()),
                    other => other,
                })?,
                None => ExpansionPlan::new(ck.spec.width, ck.spec.depth),
            };
            p.target_width = target_width.unwrap_or(p.target_width);
            p.target_depth = target_depth.unwrap_or(p.target_depth);
            p.policy = match policy {
                PolicyArg::Lemon => Policy::Lemon,
                PolicyArg::Net2netEqual => Policy::Net2netEqual,
                PolicyArg::ZeroTail => Policy::ZeroTail,
            };
            p.depth_mode = match depth_mode {
                DepthArg::Type1 => DepthMode::Type1,
                DepthArg::Type2 => DepthMode::Type2,
                DepthArg::Type1Aki => DepthMode::Type1Aki,
            };
            p.seed = seed;
            if let Some(n) = noise_scale {
                p.noise_scale = n;
            }
            match &ck.weights {
                AnyWeights::F32(w) => {
                    let (big, spec, map) = expand_model(w, &ck.spec, &p)?;
                    write_checkpoint_with_map(&big, &spec, Some(&map), &out)?;
                }
                AnyWeights::F64(w) => {
                    let (big, spec, map) = expand_model(w, &ck.spec, &p)?;
                    write_checkpoint_with_map(&big, &spec, Some(&map), &out)?;
                }
            }
            println!(
                "expanded {} (width {}, depth {}) -> {} (width {}, depth {})",
                input.display(),
                ck.spec.width,
                ck.spec.depth,
                out.display(),
                p.target_width,
                p.target_depth
            );
            Ok(Outcome::Pass)
        }
        Command::Verify {
            small,
            big,
            samples,
            seed,
            tol,
            json,
        } => {
            let report = verify_lossless(&read_checkpoint(small)?, &read_checkpoint(big)?, samples, seed, tol)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                for s in &report.samples {
                    println!(
                        "sample {:>4}: max |diff| {:.3e} at row {}, col {}",
                        s.sample, s.max_abs_diff, s.position.0, s.position.1
                    );
                }
                println!(
                    "{}: max |diff| {:.3e} (tol {:.1e}) over {} samples",
                    if report.pass { "PASS" } else { "FAIL" },
                    report.max_abs_diff,
                    tol,
                    samples
                );
            }
            Ok(if report.pass { Outcome::Pass } else { Outcome::Fail })
        }
        Command::Schedule {
            max_lr,
            min_lr,
            total,
            warmup,
            preset,
            out,
        } => {
            let spec = match preset {
                Some(name) => ScheduleSpec::preset(&name)
                    .ok_or_else(|| Error::InvalidSchedule(format!("unknown preset {name}")))?,
                None => ScheduleSpec::new(
                    max_lr.expect("required by clap"),
                    min_lr.expect("required by clap"),
                    warmup.expect("required by clap"),
                    total.expect("required by clap"),
                )?,
            };
            std::fs::write(&out, schedule_csv(&spec)?)?;
            Ok(Outcome::Pass)
        }
        Command::Inspect { file } => {
            let header = read_header(&file)?;
            let s = &header.spec;
            println!("spec: {}", serde_json::to_string(s)?);
            println!("heads: {}, hidden: {}", s.heads(), s.hidden());
            let bytes: u64 = header.tensors.iter().map(|e| e.byte_length).sum();
            let dtype = header.tensors.first().map(|e| e.dtype.as_str()).unwrap_or("-");
            println!("tensors: {} ({dtype}, {bytes} payload bytes)", header.tensors.len());
            for e in &header.tensors {
                println!("  {:<40} {:?} @ {} (+{})", e.name, e.shape, e.byte_offset, e.byte_length);
            }
            match &header.expansion {
                Some(m) => println!("duplicate groups: {}", m.groups.len()),
                None => println!("duplicate groups: none"),
            }
            Ok(Outcome::Pass)
        }
        Command::Symmetry { ckpt, map } => {
            let ck = read_checkpoint(ckpt)?;
            let map = match map {
                Some(path) => {
                    if !path.exists() {
                        return Err(Error::MissingMap(format!("{} does not exist", path.display())));
                    }
                    read_json::<DuplicateMap>(path)?
                }
                None => ck.expansion.clone().unwrap_or_default(),
            };
            let report = symmetry_report(&ck, &map)?;
            if report.is_empty() {
                println!("no replicated units");
            }
            for g in &report {
                println!("{} {:?}: min distance {:.6e}", g.tensor, g.indices, g.min_distance);
            }
            Ok(Outcome::Pass)
        }
        Command::InitRandom {
            config,
            out,
            seed,
            dtype,
        } => {
            let dtype = match dtype {
                DTypeArg::F32 => DType::F32,
                DTypeArg::F64 => DType::F64,
            };
            let spec = init_random_model(config, seed, &out, dtype)?;
            println!(
                "wrote {} ({:?}, width {}, depth {})",
                out.display(),
                spec.norm_style,
                spec.width,
                spec.depth
            );
            Ok(Outcome::Pass)
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("LEMON_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("LEMON_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(EXIT_FAIL),
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(exit_code(&e))
        }
    }
}
