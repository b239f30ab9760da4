//! Flat `key=value` configuration files.
//!
//! A file passed with `--config FILE` is turned into command-line flags that
//! are inserted directly after the subcommand name, so flags given on the
//! command line (which come later) override them.

use std::ffi::OsString;
use std::fs;

use anyhow::{bail, Context, Result};
use clap::{ArgMatches, Command};

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key=value, got {raw:?}", i + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn takes_value(cmd: &Command, sub: &str, key: &str) -> Option<bool> {
    let sc = cmd.find_subcommand(sub)?;
    sc.get_arguments()
        .chain(cmd.get_arguments())
        .find(|a| a.get_long() == Some(key))
        .map(|a| a.get_action().takes_values())
}

/// Replaces `--config FILE` in `args` by the flags it contains.
pub fn expand(cmd: &Command, args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut path = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy().into_owned();
        if s == "--config" {
            path = Some(it.next().context("--config needs a file")?);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(OsString::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.to_string_lossy()))?;
    let pairs = parse(&text)?;
    let names: Vec<String> = cmd.get_subcommands().map(|c| c.get_name().to_string()).collect();
    let Some(pos) = rest.iter().position(|a| names.iter().any(|n| a.to_str() == Some(n))) else {
        bail!("--config needs a subcommand");
    };
    let sub = rest[pos].to_string_lossy().into_owned();
    let mut flags = Vec::new();
    for (k, v) in pairs {
        match takes_value(cmd, &sub, &k) {
            None => bail!("config key {k:?} is not a flag of `{sub}`"),
            Some(true) => {
                flags.push(OsString::from(format!("--{k}")));
                flags.push(OsString::from(v));
            }
            Some(false) => match v.as_str() {
                "true" => flags.push(OsString::from(format!("--{k}"))),
                "false" => {}
                other => bail!("config key {k:?} is a switch; use true or false, not {other:?}"),
            },
        }
    }
    rest.splice(pos + 1..pos + 1, flags);
    Ok(rest)
}

/// The resolved flags of the chosen subcommand as `key=value` lines, in
/// definition order; readable back with `--config`.
pub fn dump(cmd: &Command, matches: &ArgMatches) -> String {
    let Some((name, sub)) = matches.subcommand() else { return String::new() };
    let Some(sc) = cmd.find_subcommand(name) else { return String::new() };
    let mut out = format!("# pctomo {name}\n");
    let mut seen = std::collections::HashSet::new();
    for a in sc.get_arguments().chain(cmd.get_arguments()) {
        let id = a.get_id().as_str();
        if matches!(id, "config" | "dump_config" | "help" | "version") || !seen.insert(id) {
            continue;
        }
        let Some(long) = a.get_long() else { continue };
        if let Ok(Some(vals)) = sub.try_get_raw(id) {
            let v: Vec<String> = vals.map(|v| v.to_string_lossy().into_owned()).collect();
            out.push_str(&format!("{long}={}\n", v.join(",")));
        }
    }
    out
}
