//! Effective configuration: defaults (or a checkpoint's echo), then the
//! config file, then `--scene-*`, `--model-*` and `--train-*` flags.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nct_core::config::RunConfig;
use toml::{Table, Value};

const SECTIONS: [&str; 3] = ["scene", "model", "train"];

/// A `section.key` override taken from the command line.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub flag: String,
    pub key: String,
    pub raw: String,
}

fn flag_key(name: &str) -> Option<String> {
    match name {
        "lambda" => return Some("train.lambda".into()),
        "seed" => return Some("train.seed".into()),
        _ => {}
    }
    SECTIONS.iter().find_map(|s| {
        let rest = name.strip_prefix(s)?.strip_prefix('-')?;
        (!rest.is_empty()).then(|| format!("{s}.{}", rest.replace('-', "_")))
    })
}

/// Pulls configuration overrides out of `args`, returning them and the
/// arguments left for the command parser.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<Override>, Vec<String>)> {
    let mut overrides = Vec::new();
    let mut rest = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        let Some(key) = flag_key(&name) else {
            rest.push(arg);
            continue;
        };
        let raw = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| anyhow!("--{name} ({key}) needs a value"))?,
        };
        overrides.push(Override {
            flag: format!("--{name}"),
            key,
            raw,
        });
    }
    Ok((overrides, rest))
}

/// Interprets a flag value as a TOML literal, falling back to a bare string.
fn coerce(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(into: &mut Table, from: Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let (section, field) = key.split_once('.').expect("override keys are namespaced");
    let entry = table.entry(section).or_insert_with(|| Value::Table(Table::new()));
    match entry {
        Value::Table(t) => {
            t.insert(field.to_string(), value);
            Ok(())
        }
        _ => bail!("{section}: expected a table"),
    }
}

/// `section.key` of the line an error span points into.
fn key_at(text: &str, offset: usize) -> Option<String> {
    let head = &text[..offset.min(text.len())];
    let line_start = head.rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next()?;
    let key = line.split_once('=')?.0.trim();
    let section = head[..line_start]
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix('[')?.strip_suffix(']'))?;
    Some(format!("{section}.{key}"))
}

/// Builds and validates the effective configuration.
pub fn parse_config(base: &RunConfig, file: Option<&Path>, overrides: &[Override]) -> Result<RunConfig> {
    let mut table = Table::try_from(base).context("serializing base configuration")?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
        let parsed: Table = toml::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))?;
        for k in parsed.keys() {
            if !SECTIONS.contains(&k.as_str()) {
                bail!("{k}: unknown configuration section (expected scene, model or train)");
            }
        }
        merge(&mut table, parsed);
    }
    for o in overrides {
        let mut value = coerce(&o.raw);
        let (section, field) = o.key.split_once('.').expect("override keys are namespaced");
        if let (Some(Value::Float(_)), Value::Integer(i)) = (table.get(section).and_then(|t| t.get(field)), &value) {
            value = Value::Float(*i as f64);
        }
        set_path(&mut table, &o.key, value)?;
    }
    let text = toml::to_string(&table)?;
    let config: RunConfig = toml::from_str(&text).map_err(|e| {
        let key = e.span().and_then(|s| key_at(&text, s.start));
        let flag = key.as_ref().and_then(|k| overrides.iter().rev().find(|o| &o.key == k));
        match (key, flag) {
            (Some(k), Some(o)) => anyhow!("{k}: {} (from {} {})", e.message().trim(), o.flag, o.raw),
            (Some(k), None) => anyhow!("{k}: {}", e.message().trim()),
            (None, _) => anyhow!("invalid configuration: {e}"),
        }
    })?;
    config.validate()?;
    Ok(config)
}

pub fn echo(config: &RunConfig) -> Result<String> {
    Ok(toml::to_string(config)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn flags_map_to_keys() {
        let (o, rest) = split_overrides(args("--lambda 0.02 train --model-d-model=32 --out x --scene-seed 4")).unwrap();
        assert_eq!(rest, args("train --out x"));
        let keys: Vec<_> = o.iter().map(|o| (o.key.as_str(), o.raw.as_str())).collect();
        assert_eq!(
            keys,
            [("train.lambda", "0.02"), ("model.d_model", "32"), ("scene.seed", "4")]
        );
        assert!(split_overrides(args("--train-lr")).is_err());
    }

    #[test]
    fn defaults_only() {
        let c = parse_config(&RunConfig::default(), None, &[]).unwrap();
        assert_eq!(c.model.neighborhood, 3);
        assert_eq!(c.model.decoder_layers, 2);
        assert_eq!(c.model.heads, 8);
        assert_eq!(c.train.lambda, 0.01);
    }

    #[test]
    fn flag_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[train]\nlambda = 0.01\nepochs = 3\n").unwrap();
        let (o, _) = split_overrides(args("--lambda 0.02")).unwrap();
        let c = parse_config(&RunConfig::default(), Some(&path), &o).unwrap();
        assert_eq!(c.train.lambda, 0.02);
        assert_eq!(c.train.epochs, 3);
    }

    #[test]
    fn errors_name_the_key() {
        let (o, _) = split_overrides(args("--lambda -1")).unwrap();
        let e = parse_config(&RunConfig::default(), None, &o).unwrap_err().to_string();
        assert!(e.contains("train.lambda"), "{e}");

        let (o, _) = split_overrides(args("--train-epochs many")).unwrap();
        let e = parse_config(&RunConfig::default(), None, &o).unwrap_err().to_string();
        assert!(e.contains("train.epochs"), "{e}");

        let (o, _) = split_overrides(args("--model-depth 3")).unwrap();
        let e = parse_config(&RunConfig::default(), None, &o).unwrap_err().to_string();
        assert!(e.contains("depth"), "{e}");
    }

    #[test]
    fn echo_roundtrips() {
        let mut c = RunConfig::default();
        c.train.lambda = 0.1;
        let back: RunConfig = toml::from_str(&echo(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
