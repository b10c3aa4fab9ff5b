//! Command-line interface: argument parsing, dispatch and exit codes.
//!
//! Commands: `train`, `eval`, `route-stats`, `flops`, `gradcheck`,
//! `export`, `config-reference`. Exit codes: 0 success, 2 configuration or
//! usage error, 3 NaN abort, 4 corrupt checkpoint, 1 anything else
//! (including gradcheck failures).

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use crate::degradations::Task;
use crate::error::MoceError;

pub use checkpoint::{checkpoint_from_model, restore_into_model, Checkpoint};
pub use commands::{
    cmd_config_reference, cmd_eval, cmd_export, cmd_flops, cmd_gradcheck, cmd_route_stats,
    cmd_train,
};
pub use config::{config_reference, RunConfig};

const USAGE: &str = "usage: moce <command> [flags]

commands:
  train            --config PATH --checkpoint PATH [--resume PATH] [--log PATH]
  eval             --checkpoint PATH [--task NAME] [--samples N] [--seed U64]
  route-stats      --checkpoint PATH [--samples N] [--seed U64]
  flops            --checkpoint PATH [--size HxW] [--seed U64]
  gradcheck
  export           --out DIR --task NAME [--samples N] [--seed U64] [--size HxW]
  config-reference

env: MOCE_THREADS caps worker parallelism during training.
";

#[derive(Default)]
struct Flags {
    config: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    resume: Option<PathBuf>,
    log: Option<PathBuf>,
    out: Option<PathBuf>,
    task: Option<String>,
    samples: Option<usize>,
    seed: Option<u64>,
    size: Option<usize>,
}

fn parse_flags(args: &[String]) -> Result<Flags, String> {
    let mut flags = Flags::default();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let mut value = || {
            it.next()
                .cloned()
                .ok_or_else(|| format!("flag {flag} needs a value"))
        };
        match flag.as_str() {
            "--config" => flags.config = Some(PathBuf::from(value()?)),
            "--checkpoint" => flags.checkpoint = Some(PathBuf::from(value()?)),
            "--resume" => flags.resume = Some(PathBuf::from(value()?)),
            "--log" => flags.log = Some(PathBuf::from(value()?)),
            "--out" => flags.out = Some(PathBuf::from(value()?)),
            "--task" => flags.task = Some(value()?),
            "--samples" => {
                flags.samples = Some(value()?.parse().map_err(|_| "bad --samples".to_string())?)
            }
            "--seed" => flags.seed = Some(value()?.parse().map_err(|_| "bad --seed".to_string())?),
            "--size" => flags.size = Some(parse_size(&value()?)?),
            other => return Err(format!("unknown flag {other}")),
        }
    }
    Ok(flags)
}

/// Accepts `64` or `64x64`; the model operates on square power-of-two crops.
fn parse_size(s: &str) -> Result<usize, String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let h: usize = parts[0].parse().map_err(|_| format!("bad --size {s}"))?;
    if parts.len() == 2 {
        let w: usize = parts[1].parse().map_err(|_| format!("bad --size {s}"))?;
        if w != h {
            return Err(format!("--size must be square, got {s}"));
        }
    } else if parts.len() > 2 {
        return Err(format!("bad --size {s}"));
    }
    Ok(h)
}

fn exit_code(err: &MoceError) -> i32 {
    match err {
        MoceError::Parse { .. } | MoceError::Config(_) | MoceError::Io(_) => 2,
        MoceError::Nan { .. } => 3,
        MoceError::Corrupt(_) => 4,
        _ => 1,
    }
}

/// Dispatch `args` (without the program name); returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return 2;
    };
    let flags = match parse_flags(&args[1..]) {
        Ok(f) => f,
        Err(msg) => {
            eprintln!("error: {msg}");
            eprint!("{USAGE}");
            return 2;
        }
    };

    let missing = |what: &str| {
        eprintln!("error: {what} is required");
        2
    };

    let outcome: Result<i32, MoceError> = (|| {
        match command.as_str() {
            "train" => {
                let Some(config) = &flags.config else { return Ok(missing("--config")) };
                let Some(out) = &flags.checkpoint else { return Ok(missing("--checkpoint")) };
                cmd_train(config, out, flags.resume.as_deref(), flags.log.as_deref())?;
                Ok(0)
            }
            "eval" => {
                let Some(ck) = &flags.checkpoint else { return Ok(missing("--checkpoint")) };
                let task = match &flags.task {
                    Some(name) => Some(Task::parse(name)?),
                    None => None,
                };
                let csv = cmd_eval(ck, task, flags.samples.unwrap_or(16), flags.seed.unwrap_or(0))?;
                print!("{csv}");
                Ok(0)
            }
            "route-stats" => {
                let Some(ck) = &flags.checkpoint else { return Ok(missing("--checkpoint")) };
                let text =
                    cmd_route_stats(ck, flags.samples.unwrap_or(16), flags.seed.unwrap_or(0))?;
                print!("{text}");
                Ok(0)
            }
            "flops" => {
                let Some(ck) = &flags.checkpoint else { return Ok(missing("--checkpoint")) };
                let table = cmd_flops(ck, flags.size.unwrap_or(32), flags.seed.unwrap_or(0))?;
                print!("{table}");
                Ok(0)
            }
            "gradcheck" => {
                let (table, ok) = cmd_gradcheck()?;
                print!("{table}");
                Ok(if ok { 0 } else { 1 })
            }
            "export" => {
                let Some(out) = &flags.out else { return Ok(missing("--out")) };
                let Some(task) = &flags.task else { return Ok(missing("--task")) };
                let msg = cmd_export(
                    out,
                    Task::parse(task)?,
                    flags.samples.unwrap_or(8),
                    flags.seed.unwrap_or(0),
                    flags.size.unwrap_or(32),
                )?;
                print!("{msg}");
                Ok(0)
            }
            "config-reference" => {
                print!("{}", cmd_config_reference());
                Ok(0)
            }
            other => {
                eprintln!("error: unknown command '{other}'");
                eprint!("{USAGE}");
                Ok(2)
            }
        }
    })();

    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
