//! Config-file defaults, merged into argv before parsing.
//!
//! The file is TOML. Top-level keys name global flags (`threads`,
//! `manifest`) or flags shared by the selected subcommand (`seed`); a table
//! named after a subcommand (`[mc-study]`) holds that subcommand's flags.
//! Keys are long flag names. Booleans switch a flag on, arrays become
//! comma-separated lists. A key is only used when the same flag is absent
//! from the command line.

use std::path::Path;

use clap::{ArgAction, Command};

use crate::error::{CliError, CliResult};

const GLOBAL_KEYS: [&str; 2] = ["threads", "manifest"];

/// Value of `--config` in raw arguments, if present.
pub fn find_config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
        if a == "--config" {
            return it.next().cloned();
        }
    }
    None
}

fn scalar(key: &str, value: &toml::Value) -> CliResult<String> {
    match value {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        toml::Value::Array(items) => items
            .iter()
            .map(|v| scalar(key, v))
            .collect::<CliResult<Vec<_>>>()
            .map(|v| v.join(",")),
        _ => Err(CliError::Config(format!("config key {key:?} has an unsupported value"))),
    }
}

fn given_on_command_line(argv: &[String], long: &str) -> bool {
    let flag = format!("--{long}");
    let prefix = format!("--{long}=");
    argv.iter().any(|a| *a == flag || a.starts_with(&prefix))
}

fn tokens_for(sub: &Command, argv: &[String], key: &str, value: &toml::Value) -> CliResult<Vec<String>> {
    let arg = sub
        .get_arguments()
        .find(|a| a.get_long() == Some(key))
        .ok_or_else(|| CliError::Config(format!("unknown config key {key:?} for {}", sub.get_name())))?;
    if given_on_command_line(argv, key) {
        return Ok(Vec::new());
    }
    match arg.get_action() {
        ArgAction::SetTrue => match value {
            toml::Value::Boolean(true) => Ok(vec![format!("--{key}")]),
            toml::Value::Boolean(false) => Ok(Vec::new()),
            _ => Err(CliError::Config(format!("config key {key:?} must be a boolean"))),
        },
        _ => Ok(vec![format!("--{key}"), scalar(key, value)?]),
    }
}

/// Returns `argv` with config-file defaults inserted after the subcommand.
pub fn merge_config(argv: &[String], path: &Path, cmd: &Command) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;

    let names: Vec<&str> = cmd.get_subcommands().map(|s| s.get_name()).collect();
    let Some(pos) = argv.iter().skip(1).position(|a| names.contains(&a.as_str())).map(|p| p + 1) else {
        // No subcommand: let clap report it.
        return Ok(argv.to_vec());
    };
    let sub = cmd.find_subcommand(&argv[pos]).expect("name came from the command");

    let mut global = Vec::new();
    let mut local = Vec::new();
    for (key, value) in &table {
        if let toml::Value::Table(inner) = value {
            if !names.contains(&key.as_str()) {
                return Err(CliError::Config(format!("unknown config section [{key}]")));
            }
            if key == sub.get_name() {
                for (k, v) in inner {
                    local.extend(tokens_for(sub, argv, k, v)?);
                }
            }
        } else if GLOBAL_KEYS.contains(&key.as_str()) {
            if !given_on_command_line(argv, key) {
                global.push(format!("--{key}"));
                global.push(scalar(key, value)?);
            }
        } else if sub.get_arguments().any(|a| a.get_long() == Some(key.as_str())) {
            local.extend(tokens_for(sub, argv, key, value)?);
        } else if !names.iter().filter_map(|n| cmd.find_subcommand(n)).any(|s| s.get_arguments().any(|a| a.get_long() == Some(key.as_str()))) {
            return Err(CliError::Config(format!("unknown config key {key:?}")));
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(global);
    out.extend(local);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}
