//! Flat `key = value` config files.
//!
//! Each entry is spliced in as `--key=value` right after the subcommand, so
//! keys are flag names and the same validation applies. Flags given on the
//! command line come later in argv and win.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context};

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse(text: &str) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key = value, got '{line}'", n + 1);
        };
        let key = k.trim().trim_start_matches("--");
        if key.is_empty() || key.contains(char::is_whitespace) {
            bail!("line {}: bad key '{}'", n + 1, k.trim());
        }
        out.push((key.to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

/// Value of `--config` in `args`, if any.
fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

/// Returns `args` with the config file's entries inserted after the
/// subcommand name. Without `--config`, `args` comes back unchanged.
pub fn splice(args: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let entries = parse(&text).with_context(|| format!("in config {}", path.display()))?;
    // The subcommand is the first argument after the binary that is not a
    // flag or the value of a global flag.
    let mut idx = 1;
    while idx < args.len() {
        let s = args[idx].to_string_lossy();
        if s == "--config" || s == "--log" {
            idx += 2;
        } else if s.starts_with('-') {
            idx += 1;
        } else {
            break;
        }
    }
    if idx >= args.len() {
        return Ok(args);
    }
    let mut out = args[..=idx].to_vec();
    out.extend(entries.into_iter().map(|(k, v)| OsString::from(format!("--{k}={v}"))));
    out.extend_from_slice(&args[idx + 1..]);
    Ok(out)
}
