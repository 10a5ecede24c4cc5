use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::SynthTaskConfig;
use crate::decoding::BeamConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::derive_seed;
use crate::training::{Mode, TrainConfig};

/// Environment variable naming the default root for run directories.
pub const OUTPUT_ROOT_ENV: &str = "CRESS_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// Keys that are absent from the serialized defaults because they default to `None`.
const OPTIONAL_INTEGER_KEYS: [&str; 1] = ["beam.max_len"];

/// Empty paths are filled in by [`ExperimentConfig::resolve`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Manifests, feature files and the vocabulary. Default `<root>/corpus`.
    pub corpus_dir: PathBuf,
    /// Default `<root>/<run_name>/checkpoints`.
    pub checkpoint_dir: PathBuf,
    /// Metrics, hypotheses, reports and the echoed config. Default `<root>/<run_name>`.
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_name: String,
    /// Every random stream of a run descends from this value.
    pub seed: u64,
    pub data: SynthTaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            run_name: "default".into(),
            seed: 1,
            data: SynthTaskConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            beam: BeamConfig::default(),
            paths: PathsConfig::default(),
        };
        cfg.train.seed = cfg.train_seed();
        cfg
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.run_name.is_empty()
            || self.run_name.contains(['/', '\\'])
            || self.run_name.starts_with('.')
        {
            return Err(Error::config("run_name", "must be a plain, non-empty directory name"));
        }
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.beam.validate()
    }

    /// Seed of one corpus split (`"train"`, `"dev"`, `"test"`).
    pub fn data_seed(&self, split: &str) -> u64 {
        derive_seed(derive_seed(self.seed, "data"), split)
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init")
    }

    /// Drives batching, dropout and scheduled sampling.
    pub fn train_seed(&self) -> u64 {
        derive_seed(self.seed, "train")
    }

    pub fn bootstrap_seed(&self) -> u64 {
        derive_seed(self.seed, "bootstrap")
    }

    /// Fill empty paths under `root` and derive the training seed.
    pub fn resolve(mut self, root: &Path) -> Self {
        if self.paths.corpus_dir.as_os_str().is_empty() {
            self.paths.corpus_dir = root.join("corpus");
        }
        if self.paths.output_dir.as_os_str().is_empty() {
            self.paths.output_dir = root.join(&self.run_name);
        }
        if self.paths.checkpoint_dir.as_os_str().is_empty() {
            self.paths.checkpoint_dir = self.paths.output_dir.join("checkpoints");
        }
        self.train.seed = self.train_seed();
        self
    }

    /// TOML text that loads back to this configuration.
    pub fn to_toml(&self) -> String {
        let mut plain = self.clone();
        plain.train.seed = 0;
        let mut table = Table::try_from(&plain).expect("config serialises");
        if let Some(Value::Table(t)) = table.get_mut("train") {
            t.remove("seed");
        }
        toml::to_string(&table).expect("config serialises")
    }
}

/// `$CRESS_OUTPUT_ROOT`, or `runs` in the working directory.
pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            _ => out.push(key),
        }
    }
}

/// Every dotted key a config file or `--key value` flag may set.
pub fn config_keys() -> Vec<String> {
    config_defaults().into_iter().map(|(k, _)| k).collect()
}

/// Dotted keys with their default values rendered as TOML (`none` when unset).
pub fn config_defaults() -> Vec<(String, String)> {
    let mut table = Table::try_from(ExperimentConfig::default()).expect("config serialises");
    let mut keys = Vec::new();
    flatten("", &table, &mut keys);
    keys.retain(|k| k != "train.seed");
    let mut out: Vec<(String, String)> = keys
        .into_iter()
        .map(|k| {
            let shown = lookup(&mut table, &k)
                .and_then(|(t, leaf)| t.get(&leaf).map(ToString::to_string))
                .unwrap_or_default();
            (k, shown)
        })
        .collect();
    out.extend(OPTIONAL_INTEGER_KEYS.iter().map(|k| (k.to_string(), "none".to_string())));
    out.sort();
    out
}

fn lookup<'a>(table: &'a mut Table, key: &str) -> Option<(&'a mut Table, String)> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop()?.to_string();
    let mut t = table;
    for p in parts {
        t = match t.get_mut(p)? {
            Value::Table(inner) => inner,
            _ => return None,
        };
    }
    Some((t, leaf))
}

fn typed_value(key: &str, current: Option<&Value>, raw: &str) -> Result<Value> {
    let bad = |what: &str| Error::config(key, format!("expected {what}, got `{raw}`"));
    match current {
        Some(Value::String(_)) => Ok(Value::String(raw.to_string())),
        Some(Value::Boolean(_)) => raw.parse().map(Value::Boolean).map_err(|_| bad("true or false")),
        Some(Value::Float(_)) => raw
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Value::Float)
            .ok_or_else(|| bad("a finite number")),
        Some(Value::Integer(_)) | None => raw
            .parse::<i64>()
            .ok()
            .filter(|v| *v >= 0)
            .map(Value::Integer)
            .ok_or_else(|| bad("a non-negative integer")),
        Some(other) => Err(Error::config(key, format!("cannot override a {} value", other.type_str()))),
    }
}

fn reject_train_seed(table: &Table) -> Result<()> {
    if let Some(Value::Table(t)) = table.get("train") {
        if t.contains_key("seed") {
            return Err(Error::config(
                "train.seed",
                "derived from the top-level `seed`; set that instead",
            ));
        }
    }
    Ok(())
}

/// Defaults, then `file`, then `overrides` (dotted key, raw value), then
/// validation and path resolution under `root`.
pub fn load_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
    root: &Path,
) -> Result<ExperimentConfig> {
    let mut base: ExperimentConfig = match file {
        None => ExperimentConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let raw: Table = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
            reject_train_seed(&raw)?;
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
        }
    };
    base.train.seed = 0;
    let known = config_keys();
    let mut table = Table::try_from(&base).expect("config serialises");
    for (key, raw) in overrides {
        if !known.contains(key) {
            return Err(Error::config(key, "unknown configuration key"));
        }
        let (parent, leaf) = lookup(&mut table, key)
            .ok_or_else(|| Error::config(key, "unknown configuration key"))?;
        if key == "train.mode" {
            raw.parse::<Mode>()?;
        }
        let value = typed_value(key, parent.get(&leaf), raw)?;
        parent.insert(leaf, value);
    }
    let cfg: ExperimentConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config("overrides", e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg.resolve(root))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_survives_derived_seeds_beyond_toml_integers() {
        for seed in 0..16 {
            let cfg = ExperimentConfig {
                seed,
                ..ExperimentConfig::default()
            }
            .resolve(Path::new("runs"));
            let text = cfg.to_toml();
            assert!(!text.contains("[train]\nseed") && text.contains(&format!("seed = {seed}")));
        }
    }

    fn ov(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn keys_cover_every_section() {
        let keys = config_keys();
        for k in ["seed", "run_name", "data.noise", "model.conv.kernel", "train.mu", "beam.max_len", "paths.output_dir"] {
            assert!(keys.iter().any(|x| x == k), "missing {k}");
        }
        assert!(!keys.iter().any(|x| x == "train.seed"));
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        fs::write(&file, "seed = 7\ntrain.mu = 12\ntrain.mode = \"cress\"\n").unwrap();
        let cfg = load_config(
            Some(&file),
            &[ov("train.mu", "20"), ov("beam.max_len", "9"), ov("train.adaptive", "false")],
            dir.path(),
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.mu, 20.0);
        assert_eq!(cfg.beam.max_len, Some(9));
        assert!(!cfg.train.adaptive);
        assert_eq!(cfg.train.mode, Mode::Cress);
        assert_eq!(cfg.train.seed, derive_seed(7, "train"));
        assert_eq!(cfg.paths.checkpoint_dir, dir.path().join("default/checkpoints"));
    }

    #[test]
    fn bad_values_name_the_field() {
        let root = Path::new("unused");
        let err = |o: &[(String, String)]| match load_config(None, o, root) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(err(&[ov("train.mu", "abc")]), "train.mu");
        assert_eq!(err(&[ov("train.mu", "-1")]), "train.mu");
        assert_eq!(err(&[ov("train.nope", "1")]), "train.nope");
        assert_eq!(err(&[ov("model.heads", "5")]), "model.heads");
        assert_eq!(err(&[ov("train.mode", "rl")]), "train.mode");
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config(None, &[ov("run_name", "x"), ov("train.lambda", "0.5")], dir.path()).unwrap();
        let file = dir.path().join("echo.toml");
        fs::write(&file, cfg.to_toml()).unwrap();
        assert_eq!(load_config(Some(&file), &[], dir.path()).unwrap(), cfg);
    }

    #[test]
    fn train_seed_in_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        fs::write(&file, "[train]\nseed = 3\n").unwrap();
        assert!(matches!(
            load_config(Some(&file), &[], dir.path()),
            Err(Error::Config { field, .. }) if field == "train.seed"
        ));
    }
}
