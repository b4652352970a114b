//! `maps`: data preparation, training, evaluation and analysis.
//!
//! Every config key is also a flag (`--section.key value`). Values are
//! layered as defaults < `--config` file < `MAPS_OUTPUT_DIR` < flags. A flag
//! value with commas runs the cross product of all such lists, one run per
//! subdirectory of the output directory.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use maps_core::config::{expand_grid, KEYS, OUTPUT_DIR_ENV};
use maps_core::{MapsError, RunConfig};

const COMMANDS: &[(&str, &str)] = &[
    ("prepare", "filter and split a corpus, writing the prepared corpus and split summary"),
    ("train", "train a model and write its checkpoint and per-epoch metrics"),
    ("evaluate", "score a split with a checkpoint and write report.json"),
    ("analyze-consultations", "proportion of searches with a related earlier consultation"),
    ("generate-synthetic", "write a planted synthetic corpus and token embeddings"),
    ("export-mapping", "write the token-item mapping built from the training split"),
];

fn cli() -> Command {
    let key_args: Vec<Arg> = KEYS
        .iter()
        .map(|s| {
            Arg::new(s.key)
                .long(s.key)
                .value_name("VALUE")
                .help(format!("{} [default: {}]", s.doc, if s.default.is_empty() { "\"\"" } else { s.default }))
                .help_heading("Config keys")
        })
        .collect();
    let mut cmd = Command::new("maps")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Motivation-aware personalized product search")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        cmd = cmd.subcommand(
            Command::new(*name)
                .about(*about)
                .args_override_self(true)
                .arg(Arg::new("config").long("config").value_name("PATH").help("flat `key = value` config file"))
                .arg(
                    Arg::new("ablate")
                        .long("ablate")
                        .value_name("KEY[=VALUE]")
                        .action(ArgAction::Append)
                        .help("switch an ablation; a bare key means `KEY=true`"),
                )
                .args(key_args.clone()),
        );
    }
    cmd
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    KEYS.iter().filter_map(|s| m.get_one::<String>(s.key).map(|v| (s.key.to_string(), v.clone()))).collect()
}

fn ablations(m: &ArgMatches) -> Vec<(String, String)> {
    m.get_many::<String>("ablate")
        .into_iter()
        .flatten()
        .map(|a| match a.split_once('=') {
            Some((k, v)) => (k.trim().to_string(), v.trim().to_string()),
            None => (a.trim().to_string(), "true".to_string()),
        })
        .collect()
}

fn error_kind(e: &anyhow::Error) -> (u8, &'static str) {
    match e.downcast_ref::<MapsError>() {
        Some(MapsError::Config(_)) => (2, "config"),
        Some(MapsError::Load { .. }) => (3, "missing_input"),
        Some(MapsError::Io(io)) if io.kind() == std::io::ErrorKind::NotFound => (3, "missing_input"),
        _ => (1, "runtime"),
    }
}

fn report_error(e: &anyhow::Error) -> ExitCode {
    let (code, kind) = error_kind(e);
    let mut message = String::new();
    for cause in e.chain().map(|c| c.to_string()) {
        if !message.contains(&cause) {
            if !message.is_empty() {
                message.push_str(": ");
            }
            message.push_str(&cause);
        }
    }
    let line = serde_json::json!({ "error": kind, "exit_code": code, "message": message });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn run(name: &str, m: &ArgMatches) -> anyhow::Result<()> {
    let file = m.get_one::<String>("config").map(PathBuf::from);
    let env_dir = std::env::var(OUTPUT_DIR_ENV).ok();
    let flags = overrides(m);
    let ablate = ablations(m);
    let grid = expand_grid(&flags);
    if grid.len() == 1 {
        let cfg = RunConfig::layered(file.as_deref(), env_dir.as_deref(), &flags)?;
        return commands::dispatch(name, &cfg, &ablate);
    }
    let base = RunConfig::layered(file.as_deref(), env_dir.as_deref(), &[])?;
    let root = base.output_dir();
    let mut runs = Vec::with_capacity(grid.len());
    for (i, assignment) in grid.iter().enumerate() {
        let mut cfg = RunConfig::layered(file.as_deref(), env_dir.as_deref(), assignment)?;
        if !assignment.iter().any(|(k, _)| k == "paths.output_dir") {
            cfg.set("paths.output_dir", &root.join(format!("grid-{i:03}")).to_string_lossy())?;
        }
        log::info!("grid run {}/{}: {:?}", i + 1, grid.len(), assignment);
        commands::dispatch(name, &cfg, &ablate)?;
        runs.push(serde_json::json!({
            "output_dir": cfg.get("paths.output_dir"),
            "overrides": assignment.iter().cloned().collect::<std::collections::BTreeMap<_, _>>(),
        }));
    }
    std::fs::create_dir_all(&root)?;
    std::fs::write(root.join("grid.json"), serde_json::to_string_pretty(&runs)? + "\n")?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    return ExitCode::SUCCESS;
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    return ExitCode::from(2);
                }
                _ => {}
            }
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            return report_error(&MapsError::Config(first).into());
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}
