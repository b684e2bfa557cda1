//! `key = value` run files. Entries are turned into long flags and placed
//! ahead of the real command line, so explicit flags win.

use std::collections::BTreeSet;
use std::ffi::OsString;

use clap::{ArgAction, Command};
use pdl_core::PdlError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parses a run file. Blank lines and `#` comments are skipped; keys may use
/// `_` or `-`.
pub fn parse(text: &str) -> Result<Vec<Entry>, PdlError> {
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(PdlError::Config(format!("line {line}: expected `key = value`")));
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(PdlError::Config(format!("line {line}: empty key or value")));
        }
        if !seen.insert(key.clone()) {
            return Err(PdlError::Config(format!("line {line}: duplicate key `{key}`")));
        }
        entries.push(Entry { line, key, value });
    }
    Ok(entries)
}

/// Translates entries into flags understood by `cmd`. Keys that do not name
/// one of its long options are rejected.
pub fn to_flags(cmd: &Command, entries: &[Entry]) -> Result<Vec<OsString>, PdlError> {
    let mut flags = Vec::new();
    for e in entries {
        let arg = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(e.key.as_str()) && e.key != "config")
            .ok_or_else(|| {
                PdlError::Config(format!(
                    "line {}: unknown key `{}` for `{}`",
                    e.line,
                    e.key,
                    cmd.get_name()
                ))
            })?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match e.value.as_str() {
                "true" => flags.push(format!("--{}", e.key).into()),
                "false" => {}
                other => {
                    return Err(PdlError::Config(format!(
                        "line {}: `{}` expects true or false, got `{other}`",
                        e.line, e.key
                    )))
                }
            }
        } else {
            flags.push(format!("--{}", e.key).into());
            flags.push(e.value.clone().into());
        }
    }
    Ok(flags)
}

/// The value of `--config` in a raw argument list, if present.
pub fn find_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(rest.into());
        }
    }
    None
}
