mod args;
mod bench;
mod clips;
mod data;
mod run;

use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use pmk_core::config::RunConfig;
use pmk_core::tensor::parallel;
use pmk_core::CoreError;
use serde_json::Value;

use args::{Cli, Command, Global, Jitter};

/// Exit status by failure class.
mod exit {
    pub const INTERNAL: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const IO: u8 = 4;
    pub const FORMAT: u8 = 5;
    pub const DIVERGED: u8 = 6;
    pub const INVALID: u8 = 7;
}

fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<CoreError>() {
            return match c {
                CoreError::Config(_) | CoreError::Manifest { .. } => (exit::CONFIG, "config"),
                CoreError::Io { .. } => (exit::IO, "io"),
                CoreError::BadMagic { .. }
                | CoreError::UnsupportedVersion { .. }
                | CoreError::Truncated { .. }
                | CoreError::DTypeMismatch { .. }
                | CoreError::Header { .. } => (exit::FORMAT, "format"),
                CoreError::Diverged { .. } => (exit::DIVERGED, "diverged"),
                CoreError::Invalid { .. } => (exit::INVALID, "invalid"),
                CoreError::Tensor(_) => (exit::INTERNAL, "internal"),
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (exit::IO, "io");
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return (exit::CONFIG, "config");
        }
    }
    (exit::INTERNAL, "internal")
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("pmk: error[usage]: {}", one_line(first));
            return ExitCode::from(exit::USAGE);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!("pmk: error[{kind}]: {}", one_line(&format!("{e:#}")));
            ExitCode::from(code)
        }
    }
}

fn workers(g: &Global) -> Result<usize> {
    if g.deterministic {
        return Ok(1);
    }
    if let Some(n) = g.workers {
        return Ok(n.max(1));
    }
    if let Ok(v) = std::env::var("PMK_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| CoreError::Config(format!("PMK_THREADS={v:?} is not a worker count")))?;
        return Ok(n.max(1));
    }
    Ok(std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Config file, then `--seed`, then every set flag, validated strictly.
pub fn effective_config(g: &Global, jitter: Option<&Jitter>) -> Result<RunConfig> {
    let mut doc = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| CoreError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| CoreError::Config("config must be a JSON object".into()))?;
    if let Some(s) = g.seed {
        obj.insert("seed".into(), s.into());
    }
    let mut merge = |v: Value| {
        if let Value::Object(m) = v {
            obj.extend(m);
        }
    };
    merge(serde_json::to_value(&g.overrides)?);
    if let Some(j) = jitter {
        merge(serde_json::to_value(j)?);
    }
    Ok(RunConfig::from_json(&doc.to_string())?)
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    pmk_core::io::write_json(&dir.join("config.json"), cfg)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = &cli.global;
    parallel::init_global_threads(workers(g)?);
    match &cli.command {
        Command::Synth { out, synth } => data::synth(g, out, synth),
        Command::SynthUntrimmed {
            out,
            window_fraction,
            videos_per_class,
            synth,
        } => data::synth_untrimmed(g, out, *window_fraction, *videos_per_class, synth),
        Command::Encode { data, out } => data::encode(&effective_config(g, None)?, &data.data, out),
        Command::Augment {
            jitter,
            input,
            out,
            count,
        } => data::augment(&effective_config(g, Some(jitter))?, input, out, *count),
        Command::Train { jitter, data, out } => run::train(&effective_config(g, Some(jitter))?, &data.data, out),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => run::eval(checkpoint, &data.data, split, out.as_deref()),
        Command::GateReport {
            checkpoint,
            data,
            split,
            out,
        } => run::gate_report(checkpoint, &data.data, split, out),
        Command::ClipsOracle {
            jitter,
            data,
            out,
            window_fraction,
        } => clips::oracle(&effective_config(g, Some(jitter))?, &data.data, out, *window_fraction),
        Command::ClipsTrain {
            jitter,
            data,
            run,
            window_fraction,
        } => clips::train(&effective_config(g, Some(jitter))?, &data.data, run, *window_fraction),
        Command::ClipsSelect {
            jitter,
            data,
            run,
            k,
            window_fraction,
        } => clips::select(&effective_config(g, Some(jitter))?, &data.data, run, *k, *window_fraction),
        Command::Bench {
            op,
            shape,
            frames,
            reps,
            out,
        } => bench::run(op, shape, *frames, *reps, out.as_deref()),
        Command::Sweep {
            data,
            beta,
            gamma,
            out,
        } => run::sweep(&effective_config(g, None)?, &data.data, beta, gamma, out),
    }
}
