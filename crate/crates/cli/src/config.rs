//! TOML loading and `--set dotted.path=value` overrides.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use apr_core::pipeline::RunConfig;
use toml::{Table, Value};

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut tree = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            text.parse::<Table>().with_context(|| format!("parsing {}", p.display()))?
        }
        None => Table::new(),
    };
    // Fill defaults first so overrides can address any key.
    let resolved: RunConfig = Value::Table(tree.clone()).try_into().context("invalid config")?;
    let mut full = match Value::try_from(&resolved)? {
        Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    };
    merge(&mut full, std::mem::take(&mut tree));
    for o in overrides {
        apply_override(&mut full, o)?;
    }
    let cfg: RunConfig = Value::Table(full).try_into().context("invalid config after overrides")?;
    Ok(cfg)
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string.
pub fn apply_override(tree: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not of the form key.path=value"))?;
    let value = parse_value(raw.trim());
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override `{spec}` has an empty key segment");
    }
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut node = tree;
    for (i, k) in parents.iter().enumerate() {
        node = match node.get_mut(*k) {
            Some(Value::Table(t)) => t,
            Some(_) => bail!("`{}` is not a table", keys[..=i].join(".")),
            None => bail!("unknown config key `{}`", keys[..=i].join(".")),
        };
    }
    if !node.contains_key(*last) && !OPTIONAL_LEAVES.contains(last) {
        bail!("unknown config key `{path}`");
    }
    node.insert((*last).to_string(), value);
    Ok(())
}

/// Keys that may be absent from a serialized config.
const OPTIONAL_LEAVES: &[&str] = &["output_dir", "scale", "k"];

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use apr_core::data::StartMode;
    use apr_core::storage::CovMode;

    #[test]
    fn defaults_without_file() {
        let cfg = load(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = load(
            None,
            &[
                "replay.attack.alpha=12.5".into(),
                "loss.lambda_kd=0".into(),
                "calib.cov_mode.kind=\"svd\"".into(),
                "calib.cov_mode.k=8".into(),
                "start=warm".into(),
                "classifiers=[\"ncm\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.replay.attack.alpha, 12.5);
        assert_eq!(cfg.loss.lambda_kd, 0.0);
        assert_eq!(cfg.classifiers.len(), 1);
        assert_eq!(cfg.calib.cov_mode, CovMode::Svd { k: 8 });
        assert_eq!(cfg.start, StartMode::Warm);
        let inline = load(None, &["calib.cov_mode={ kind = \"svd\", k = 4 }".into()]).unwrap();
        assert_eq!(inline.calib.cov_mode, CovMode::Svd { k: 4 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(load(None, &["replay.nope=1".into()]).is_err());
        assert!(load(None, &["tasks".into()]).is_err());
        assert!(load(None, &["tasks.x=1".into()]).is_err());
    }

    #[test]
    fn file_values_survive_and_overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "tasks = 4\n[replay]\nk = 9\n").unwrap();
        let cfg = load(Some(&p), &["replay.k=11".into()]).unwrap();
        assert_eq!(cfg.tasks, 4);
        assert_eq!(cfg.replay.k, 11);
    }
}
