//! `--config FILE`: plain `key = value` lines that fill in flags not given on
//! the command line. Keys are long flag names; `#` starts a comment.

use std::fs;
use std::path::Path;

use clap::{ArgAction, Command};

use crate::error::{io, CliError, CliResult};

/// Parses the config text into `(key, value)` pairs, rejecting duplicates.
pub fn parse(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| CliError::usage(format!("config line {}: expected key = value", n + 1)))?;
        let key = key.trim().replace('_', "-");
        if pairs.iter().any(|(k, _)| *k == key) {
            return Err(CliError::usage(format!("config line {}: {key} given twice", n + 1)));
        }
        pairs.push((key, value.trim().to_string()));
    }
    Ok(pairs)
}

fn flag_given(args: &[String], long: &str) -> bool {
    let flag = format!("--{long}");
    args.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")))
}

/// Returns `args` with the config file (if any) folded in.
pub fn merge(cmd: &Command, args: Vec<String>) -> CliResult<Vec<String>> {
    let mut config_path = None;
    for (k, a) in args.iter().enumerate() {
        if a == "--config" {
            config_path = Some(args.get(k + 1).cloned().ok_or_else(|| CliError::usage("--config needs a path"))?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            config_path = Some(p.to_string());
        }
    }
    let Some(path) = config_path else {
        return Ok(args);
    };
    let Some(sub) = args.iter().skip(1).find_map(|a| cmd.find_subcommand(a)) else {
        return Err(CliError::usage("--config needs a subcommand"));
    };
    let text = fs::read_to_string(&path).map_err(|e| io(Path::new(&path), e))?;
    let mut out = args.clone();
    for (key, value) in parse(&text)? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config" && key != "help")
            .ok_or_else(|| CliError::usage(format!("{path}: unknown key {key:?} for {}", sub.get_name())))?;
        if flag_given(&args, &key) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" => out.push(format!("--{key}")),
                "false" => {}
                other => return Err(CliError::usage(format!("{path}: {key} must be true or false, not {other:?}"))),
            },
            _ => out.push(format!("--{key}={value}")),
        }
    }
    Ok(out)
}
