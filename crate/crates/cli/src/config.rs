//! Argument parsing with an optional `key = value` defaults file.
//!
//! Keys from `--config` are spliced in as `--key value` right after the
//! subcommand name, so anything given on the command line wins.

use clap::error::ErrorKind;
use clap::Parser;
use pnp_core::io::{parse_key_values, read_to_string};

use crate::{Cli, Failure};

const SUBCOMMANDS: [&str; 9] = [
    "train-gmm",
    "denoise",
    "sharpen",
    "deblur-pair",
    "gen-scene",
    "metrics",
    "verify-prox",
    "bench",
    "grid-search",
];

/// Global options that consume a value.
const GLOBAL_WITH_VALUE: [&str; 3] = ["--seed", "--threads", "--config"];

pub fn parse(argv: Vec<String>) -> Result<Cli, Failure> {
    let argv = match config_path(&argv) {
        Some(path) => splice(argv, &path)?,
        None => argv,
    };
    Cli::try_parse_from(&argv).map_err(|e| match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            e.exit()
        }
        _ => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            Failure::Usage(first.to_string())
        }
    })
}

fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
    }
    None
}

/// Index of the subcommand token, skipping global options and their values.
fn subcommand_position(argv: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].as_str();
        if SUBCOMMANDS.contains(&a) {
            return Some(i);
        }
        i += if GLOBAL_WITH_VALUE.contains(&a) { 2 } else { 1 };
    }
    None
}

fn splice(argv: Vec<String>, path: &str) -> Result<Vec<String>, Failure> {
    let pairs = parse_key_values(&read_to_string(path)?)?;
    let Some(pos) = subcommand_position(&argv) else {
        return Ok(argv);
    };
    let mut injected = Vec::new();
    for (k, v) in pairs {
        let flag = format!("--{}", k.replace('_', "-"));
        match v.as_str() {
            "true" => injected.push(flag),
            "false" => {}
            _ => {
                injected.push(flag);
                injected.push(v);
            }
        }
    }
    let mut merged = argv[..=pos].to_vec();
    merged.extend(injected);
    merged.extend_from_slice(&argv[pos + 1..]);
    Ok(merged)
}
