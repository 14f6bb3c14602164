//! `--config FILE`: flat `key = value` lines whose keys are long flag names.
//! Values are spliced in right after the subcommand, so flags given on the
//! command line come later and win.

use std::fs;

use clap::{ArgAction, CommandFactory};

use crate::Cli;

pub fn usage() -> String {
    Cli::command().render_usage().to_string()
}

fn config_path(raw: &[String]) -> Option<String> {
    let mut it = raw.iter().skip(1);
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

pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
        let v = v.trim();
        let v = v
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .unwrap_or(v);
        out.push((k.trim().replace('_', "-"), v.to_string()));
    }
    Ok(out)
}

pub fn merge_config(raw: &[String]) -> Result<Vec<String>, String> {
    let Some(path) = config_path(raw) else {
        return Ok(raw.to_vec());
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("config file {path}: {e}"))?;
    let pairs = parse_pairs(&text).map_err(|e| format!("config file {path}: {e}"))?;
    let root = Cli::command();
    let Some((pos, sub)) = raw
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(i, a)| root.find_subcommand(a).map(|s| (i, s)))
    else {
        // No subcommand: let the parser report it.
        return Ok(raw.to_vec());
    };
    let mut injected = Vec::new();
    for (k, v) in pairs {
        if k == "config" {
            return Err(format!("config file {path}: `config` cannot be nested"));
        }
        let arg = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(k.as_str()))
            .ok_or_else(|| format!("config file {path}: unknown key `{k}` for `{}`", sub.get_name()))?;
        match arg.get_action() {
            ArgAction::SetTrue | ArgAction::Count => {
                let on: bool = v
                    .parse()
                    .map_err(|_| format!("config file {path}: `{k}` expects true or false, got `{v}`"))?;
                if on {
                    injected.push(format!("--{k}"));
                }
            }
            _ => {
                injected.push(format!("--{k}"));
                injected.push(v);
            }
        }
    }
    let mut argv = raw[..=pos].to_vec();
    argv.extend(injected);
    argv.extend_from_slice(&raw[pos + 1..]);
    Ok(argv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn pairs() {
        let p = parse_pairs("# c\nper_stratum = 150\nseed=7\nout = \"a b\"\n").unwrap();
        assert_eq!(
            p,
            vec![
                ("per-stratum".into(), "150".into()),
                ("seed".into(), "7".into()),
                ("out".into(), "a b".into())
            ]
        );
        assert!(parse_pairs("oops").is_err());
    }

    #[test]
    fn splices_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "seed = 3\nallow-short = true\nlenient = false\n").unwrap();
        let raw = argv(&format!("bindlogic --config {} build-dataset --seed 9", cfg.display()));
        let merged = merge_config(&raw).unwrap();
        let tail: Vec<&str> = merged[4..].iter().map(String::as_str).collect();
        assert_eq!(tail, ["--seed", "3", "--allow-short", "--seed", "9"]);

        fs::write(&cfg, "bogus = 1\n").unwrap();
        assert!(merge_config(&raw).unwrap_err().contains("bogus"));
    }
}
