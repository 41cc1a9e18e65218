//! `--config` file support: TOML values are turned into flags and spliced in
//! right after the subcommand name, so anything given on the command line
//! comes later and wins.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::CommandFactory;

use crate::args::Cli;
use crate::error::CliError;

/// Locates `--config` in raw arguments.
fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let s = arg.to_str()?;
        if s == "--config" {
            return iter.next().map(PathBuf::from);
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(rest));
        }
    }
    None
}

/// Position of the subcommand name in `args`.
fn subcommand_index(args: &[OsString], names: &BTreeSet<String>) -> Option<usize> {
    args.iter()
        .enumerate()
        .skip(1)
        .find(|(_, a)| a.to_str().is_some_and(|s| names.contains(s)))
        .map(|(i, _)| i)
}

fn long_flags(cmd: &clap::Command) -> BTreeSet<String> {
    cmd.get_arguments()
        .filter_map(|a| a.get_long())
        .filter(|l| *l != "config")
        .map(str::to_owned)
        .collect()
}

fn scalar(key: &str, value: &toml::Value) -> Result<String, CliError> {
    Ok(match value {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        other => {
            return Err(CliError::Config(format!("{key}: unsupported value {other}")));
        }
    })
}

fn push_flag(out: &mut Vec<OsString>, key: &str, value: &toml::Value) -> Result<(), CliError> {
    let flag = format!("--{}", key.replace('_', "-"));
    match value {
        toml::Value::Array(items) => {
            for item in items {
                out.push(flag.clone().into());
                out.push(scalar(key, item)?.into());
            }
        }
        v => {
            out.push(flag.into());
            out.push(scalar(key, v)?.into());
        }
    }
    Ok(())
}

/// Returns `args` with the config file's flags inserted, or unchanged when
/// no `--config` is present.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;

    let root = Cli::command();
    let subcommands: Vec<(String, BTreeSet<String>)> = root
        .get_subcommands()
        .map(|c| (c.get_name().to_owned(), long_flags(c)))
        .collect();
    let names: BTreeSet<String> = subcommands.iter().map(|(n, _)| n.clone()).collect();
    // Without a subcommand clap reports the usage error itself.
    let Some(at) = subcommand_index(&args, &names) else {
        return Ok(args);
    };
    let current = args[at].to_str().unwrap_or_default().to_owned();
    let accepted = &subcommands.iter().find(|(n, _)| *n == current).expect("known subcommand").1;
    let known_anywhere: BTreeSet<&String> = subcommands.iter().flat_map(|(_, f)| f).collect();

    let mut injected = Vec::new();
    for (key, value) in &table {
        let flag = key.replace('_', "-");
        match value {
            toml::Value::Table(section) => {
                if !names.contains(key) {
                    return Err(CliError::Config(format!("unknown section [{key}]")));
                }
                if *key != current {
                    continue;
                }
                for (k, v) in section {
                    if !accepted.contains(&k.replace('_', "-")) {
                        return Err(CliError::Config(format!("[{key}] has no option {k:?}")));
                    }
                    push_flag(&mut injected, k, v)?;
                }
            }
            _ if accepted.contains(&flag) => push_flag(&mut injected, key, value)?,
            _ if known_anywhere.contains(&flag) => {}
            _ => return Err(CliError::Config(format!("unknown option {key:?}"))),
        }
    }
    // Section values come after top-level ones so they take precedence.
    let mut out = args[..=at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[at + 1..]);
    Ok(out)
}
