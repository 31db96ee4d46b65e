//! Layered run configuration: profile preset, then TOML file, then flags.

use std::path::{Path, PathBuf};

use flowdistill::distiller::{fingerprint, Profile, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub literal_norm: bool,
    pub include_channels: bool,
    pub heatmaps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub width: usize,
    pub height: usize,
    pub warmup: usize,
    pub timed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub out: PathBuf,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn preset(profile: Profile) -> Self {
        Self {
            profile,
            out: PathBuf::from("runs").join(match profile {
                Profile::Desk => "desk",
                Profile::Paper => "paper",
            }),
            train: TrainConfig::for_profile(profile),
            eval: EvalConfig {
                literal_norm: false,
                include_channels: true,
                heatmaps: false,
            },
            bench: BenchConfig {
                width: 640,
                height: 320,
                warmup: 3,
                timed: 10,
            },
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }
}

/// Command-line inputs that shape the config.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub out: Option<PathBuf>,
    pub set: Vec<String>,
}

fn invalid(key: &str, reason: impl Into<String>) -> CliError {
    CliError::ConfigInvalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Overlays `user` onto `base`, refusing keys the base does not have. A
/// table that names its `kind` replaces the base table whole.
fn merge(base: &mut Value, user: Value, prefix: &str) -> Result<(), CliError> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) if !u.contains_key("kind") => {
            for (k, v) in u {
                let key = join(prefix, &k);
                let slot = b.get_mut(&k).ok_or_else(|| invalid(&key, "unknown key"))?;
                merge(slot, v, &key)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => {
            serde_json::to_value(t.remove("v").expect("parsed key")).unwrap_or(Value::Null)
        }
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..=i].join(".");
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| invalid(&here, "is not a table"))?;
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| invalid(&here, "unknown key"))?;
    }
    *cur = value;
    Ok(())
}

fn read_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| invalid("--config", format!("{}: {e}", path.display())))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| invalid("--config", e.to_string()))?;
    serde_json::to_value(table).map_err(|e| invalid("--config", e.to_string()))
}

fn profile_of(v: &Value) -> Result<Option<Profile>, CliError> {
    match v.get("profile") {
        None => Ok(None),
        Some(p) => serde_json::from_value(p.clone()).map(Some).map_err(|_| {
            invalid(
                "profile",
                format!("expected \"desk\" or \"paper\", got {p}"),
            )
        }),
    }
}

/// Profile defaults, then the file, then flags, then `--set`. Relative
/// checkpoint and cache paths end up under `out`.
pub fn resolve(o: &Overrides) -> Result<RunConfig, CliError> {
    let file = o.config.as_deref().map(read_file).transpose()?;
    let profile = match o.profile {
        Some(p) => p,
        None => file
            .as_ref()
            .map(profile_of)
            .transpose()?
            .flatten()
            .unwrap_or(Profile::Desk),
    };
    let mut tree = serde_json::to_value(RunConfig::preset(profile)).expect("preset serializes");
    if let Some(mut f) = file {
        if let Some(obj) = f.as_object_mut() {
            obj.remove("profile");
        }
        merge(&mut tree, f, "")?;
    }
    tree["profile"] = serde_json::to_value(profile).expect("profile serializes");
    if let Some(seed) = o.seed {
        tree["train"]["seed"] = seed.into();
    }
    if o.deterministic {
        tree["train"]["deterministic"] = true.into();
    }
    if let Some(out) = &o.out {
        tree["out"] = Value::String(out.display().to_string());
    }
    for s in &o.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| invalid(s, "expected key=value"))?;
        set_path(&mut tree, k.trim(), parse_scalar(v.trim()))?;
    }
    let mut cfg: RunConfig =
        serde_json::from_value(tree).map_err(|e| invalid("config", e.to_string()))?;
    cfg.train.validate().map_err(CliError::from_core)?;
    if cfg.bench.timed < 10 {
        return Err(invalid(
            "bench.timed",
            format!("needs at least 10, got {}", cfg.bench.timed),
        ));
    }
    let out = cfg.out.clone();
    cfg.train.resolve_paths(&out);
    Ok(cfg)
}

fn flatten(v: &Value, prefix: &str, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                flatten(child, &join(prefix, k), out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

/// Keys whose paper-profile default comes from the published setup.
const PAPER_KEYS: &[&str] = &[
    "train.epochs",
    "train.batch_size",
    "train.base_lr",
    "train.lr_decay_factor",
    "train.lr_decay_every_iters",
    "train.weights.content",
    "train.weights.style",
    "train.weights.tv",
    "train.weights.residual",
    "train.weights.temporal",
    "train.weights.rank",
    "train.weights.k",
    "train.lowrank_anchor",
    "train.use_temporal",
    "bench.width",
    "bench.height",
];

/// Every config key with its desk and paper defaults and where the paper
/// default comes from.
pub fn key_table() -> String {
    let mut desk = Vec::new();
    flatten(
        &serde_json::to_value(RunConfig::preset(Profile::Desk)).unwrap(),
        "",
        &mut desk,
    );
    let mut paper = Vec::new();
    flatten(
        &serde_json::to_value(RunConfig::preset(Profile::Paper)).unwrap(),
        "",
        &mut paper,
    );
    let paper: Map<String, Value> = paper.into_iter().collect();
    let width = desk.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (desk default | paper default | source):\n");
    for (k, v) in &desk {
        let p = paper
            .get(k)
            .map(Value::to_string)
            .unwrap_or_else(|| "-".into());
        let source = if PAPER_KEYS.contains(&k.as_str()) {
            "paper"
        } else {
            "artifact"
        };
        s.push_str(&format!("  {k:<width$}  {v} | {p} | {source}\n"));
    }
    s.push_str("Dataset tables switch form with kind = \"synthetic\" | \"directory\".\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "out = \"x\"\n[train]\nseed = 4\nepochs = 2\n[train.weights]\nk = 3\n",
        );
        let cfg = resolve(&Overrides {
            config: Some(path),
            seed: Some(9),
            set: vec!["train.epochs=7".into(), "eval.heatmaps=true".into()],
            ..Default::default()
        })
        .unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.weights.k, 3);
        assert!(cfg.eval.heatmaps);
        assert_eq!(cfg.train.cache_dir, Path::new("x/cache"));
    }

    #[test]
    fn unknown_keys_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "[train.weights]\nrnak = 1.0\n");
        let err = resolve(&Overrides {
            config: Some(path),
            ..Default::default()
        })
        .unwrap_err();
        assert!(
            matches!(&err, CliError::ConfigInvalid { key, .. } if key == "train.weights.rnak"),
            "{err}"
        );
        let err = resolve(&Overrides {
            set: vec!["train.nope=1".into()],
            ..Default::default()
        })
        .unwrap_err();
        assert!(matches!(&err, CliError::ConfigInvalid { key, .. } if key == "train.nope"));
    }

    #[test]
    fn invalid_values_name_the_key() {
        let err = resolve(&Overrides {
            set: vec!["train.lr_decay_factor=0.5".into()],
            ..Default::default()
        })
        .unwrap_err();
        assert!(matches!(&err, CliError::ConfigInvalid { key, .. } if key == "lr_decay_factor"));
    }

    #[test]
    fn dataset_kind_replaces_the_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "[train.dataset]\nkind = \"directory\"\nroot = \"clips\"\n",
        );
        let cfg = resolve(&Overrides {
            config: Some(path),
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(
            cfg.train.dataset,
            flowdistill::distiller::DatasetSpec::Directory { .. }
        ));
    }

    #[test]
    fn paper_profile_carries_published_weights() {
        let cfg = resolve(&Overrides {
            profile: Some(Profile::Paper),
            ..Default::default()
        })
        .unwrap();
        let w = &cfg.train.weights;
        assert_eq!((w.k, w.residual, w.temporal, w.rank), (5, 4e8, 1e6, 1e2));
        assert!(key_table().contains("train.weights.residual"));
    }
}
