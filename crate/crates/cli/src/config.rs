//! `--config FILE` support: `key = value` lines become flags placed before
//! the command-line flags, so the command line wins.

use std::ffi::OsString;
use std::fs;

use anyhow::{bail, Context, Result};

/// Returns `argv` with the config file's flags spliced in after the
/// subcommand name.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    let mut it = argv.iter().enumerate().skip(2);
    while let Some((_, a)) = it.next() {
        let a = a.to_string_lossy();
        if a == "--config" {
            path = it.next().map(|(_, p)| p.clone());
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(OsString::from(p));
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.to_string_lossy()))?;
    let injected = parse(&text).with_context(|| format!("in config {}", path.to_string_lossy()))?;
    let mut out: Vec<OsString> = argv[..2].to_vec();
    out.extend(injected.into_iter().map(OsString::from));
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

fn parse(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`", i + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            bail!("line {}: invalid key `{}`", i + 1, k.trim());
        }
        match v.trim() {
            "true" => out.push(format!("--{key}")),
            "false" => {}
            v => {
                out.push(format!("--{key}"));
                out.push(v.to_string());
            }
        }
    }
    Ok(out)
}
