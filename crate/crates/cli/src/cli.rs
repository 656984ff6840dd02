//! Argument parsing and dispatch.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{value_parser, Arg, ArgMatches, Command};
use serde_json::Value;

use crate::commands::{self, Ctx};
use crate::config::{known_keys, parse_flag_value, read_config_file, resolve, VERSION};
use crate::{CliError, CliResult};

fn split_arg() -> Arg {
    Arg::new("split")
        .long("split")
        .default_value("eval")
        .help("Dataset split: train or eval")
}

fn phase_arg() -> Arg {
    Arg::new("phase")
        .long("phase")
        .required(true)
        .value_parser(value_parser!(usize))
        .help("Phase number, starting at 1")
}

fn with_config_args(mut cmd: Command, keys: &[String]) -> Command {
    cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .help("JSON config with flat dotted keys"),
    );
    for key in keys {
        cmd = cmd.arg(
            Arg::new(key.clone())
                .long(key.clone())
                .value_name("VALUE")
                .allow_negative_numbers(true)
                .help_heading("Config overrides")
                .hide_short_help(key != "seed" && key != "out"),
        );
    }
    cmd
}

pub fn command() -> Command {
    let keys = known_keys();
    let sub = |name: &'static str, about: &'static str| with_config_args(Command::new(name).about(about), &keys);
    Command::new("twophase")
        .version(VERSION)
        .about("Two-phase weakly supervised localization on synthetic images")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("gen-data", "Generate the train and eval splits"))
        .subcommand(sub("train", "Train one phase").arg(phase_arg()))
        .subcommand(sub("pipeline", "Generate data, train every phase, fuse, evaluate and report"))
        .subcommand(sub("infer", "Heat maps and point predictions of one phase").arg(phase_arg()).arg(split_arg()))
        .subcommand(sub("fuse", "Weighted map voting over the configured phases").arg(split_arg()))
        .subcommand(
            sub("cues", "Binary localization cues from heat maps")
                .arg(
                    Arg::new("source")
                        .long("source")
                        .default_value("fused")
                        .help("Heat maps to threshold: fused or phaseK"),
                )
                .arg(split_arg()),
        )
        .subcommand(sub("eval-loc", "Point localization AP of every source").arg(split_arg()))
        .subcommand(sub("eval-sal", "Saliency AP of every heat-map source").arg(split_arg()))
        .subcommand(sub("eval-dist", "Distance between consecutive phase predictions").arg(split_arg()))
        .subcommand(sub("report", "metrics.json, report.txt and renders").arg(split_arg()))
}

fn config_from(matches: &ArgMatches) -> CliResult<Ctx> {
    let file = match matches.get_one::<PathBuf>("config") {
        Some(path) => read_config_file(path)?,
        None => BTreeMap::new(),
    };
    let mut flags: BTreeMap<String, Value> = BTreeMap::new();
    for key in known_keys() {
        if let Some(raw) = matches.get_one::<String>(&key) {
            flags.insert(key, parse_flag_value(raw));
        }
    }
    Ok(Ctx::new(resolve(&file, &flags)?))
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("TPL_THREADS") else { return Ok(()) };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("TPL_THREADS must be a positive integer, got `{raw}`")))?;
    if rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().is_err() {
        log::debug!("thread pool already initialized");
    }
    Ok(())
}

fn dispatch(matches: &ArgMatches) -> CliResult<()> {
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let ctx = config_from(sub)?;
    let split = || {
        let s = sub.get_one::<String>("split").expect("split has a default").clone();
        commands::check_split(&s).map(|_| s)
    };
    let phase = || *sub.get_one::<usize>("phase").expect("phase is required");
    match name {
        "gen-data" => commands::gen_data(&ctx),
        "train" => commands::train(&ctx, phase()),
        "pipeline" => commands::pipeline(&ctx).map(|_| ()),
        "infer" => commands::infer(&ctx, phase(), &split()?),
        "fuse" => commands::fuse(&ctx, &split()?),
        "cues" => commands::cues(&ctx, sub.get_one::<String>("source").expect("source has a default"), &split()?),
        "eval-loc" => commands::eval_loc(&ctx, &split()?).map(|_| ()),
        "eval-sal" => commands::eval_sal(&ctx, &split()?).map(|_| ()),
        "eval-dist" => commands::eval_dist(&ctx, &split()?).map(|_| ()),
        "report" => commands::report(&ctx, &split()?).map(|_| ()),
        other => Err(CliError::usage(format!("unknown subcommand `{other}`"))),
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { crate::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|_| dispatch(&matches)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
