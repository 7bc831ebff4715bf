//! Run configuration read from a TOML file.
//!
//! Every section is optional and falls back to defaults. Validation collects
//! all problems (unknown keys, type errors, out-of-range values) before
//! failing, so one run reports every offending key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_K_GRID, RankMethod};
use crate::influence::InfluenceConfig;
use crate::model::{ModelConfig, TrainConfig};
use crate::sae::SaeConfig;

/// Environment variables that override `[paths]` entries.
pub const ENV_CHECKPOINTS: &str = "LATINF_CHECKPOINTS";
pub const ENV_OUTPUTS: &str = "LATINF_OUTPUTS";
pub const ENV_TRAIN_JSONL: &str = "LATINF_TRAIN_JSONL";
pub const ENV_TEST_JSONL: &str = "LATINF_TEST_JSONL";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Jsonl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Largest vocabulary built from JSONL records, specials included.
    pub max_vocab: usize,
    /// Whether answer choices are appended to the question text.
    pub include_choices: bool,
    #[serde(flatten)]
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { source: DataSource::Synthetic, max_vocab: 512, include_choices: true, synthetic: SyntheticSpec::default() }
    }
}

/// Extra influence settings that are not part of a single solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct InfluenceSection {
    #[serde(flatten)]
    pub solve: InfluenceConfig,
    /// Training examples used for the curvature; 0 means all of them.
    pub curvature_examples: usize,
    /// Number of test examples that receive an IFR.
    pub num_test: usize,
}

impl Default for InfluenceSection {
    fn default() -> Self {
        InfluenceSection { solve: InfluenceConfig::default(), curvature_examples: 0, num_test: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct EvalConfig {
    pub k_grid: Vec<usize>,
    pub methods: Vec<RankMethod>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k_grid: DEFAULT_K_GRID.to_vec(), methods: RankMethod::ALL.to_vec() }
    }
}

/// Settings of the swap-versus-sweep timing benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct BenchConfig {
    /// Number of (train, test) pairs timed per method.
    pub pairs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { pairs: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct PathsConfig {
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
    /// JSONL inputs when `data.source = "jsonl"`.
    pub train_jsonl: PathBuf,
    pub test_jsonl: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            checkpoints: PathBuf::from("run/checkpoints"),
            outputs: PathBuf::from("run/outputs"),
            train_jsonl: PathBuf::new(),
            test_jsonl: PathBuf::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sae: SaeConfig,
    pub influence: InfluenceSection,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

fn unknown_keys(given: &toml::Value, known: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    let (toml::Value::Table(g), toml::Value::Table(k)) = (given, known) else {
        return;
    };
    for (key, value) in g {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match k.get(key) {
            None => out.push(format!("{path}: unknown key")),
            Some(sub) => unknown_keys(value, sub, &path, out),
        }
    }
}

/// Every key of the default config that never appears in files, so
/// optional path entries are accepted too.
fn known_template() -> toml::Value {
    let mut v = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
    if let toml::Value::Table(t) = &mut v {
        if let Some(toml::Value::Table(p)) = t.get_mut("paths") {
            p.insert("train-jsonl".into(), toml::Value::String(String::new()));
            p.insert("test-jsonl".into(), toml::Value::String(String::new()));
        }
    }
    v
}

fn section<T: for<'de> Deserialize<'de> + Default>(table: &toml::Table, name: &str, errors: &mut Vec<String>) -> T {
    match table.get(name) {
        None => T::default(),
        Some(v) => match T::deserialize(v.clone()) {
            Ok(x) => x,
            Err(e) => {
                errors.push(format!("{name}: {}", e.message().trim()));
                T::default()
            }
        },
    }
}

fn prefixed(section: &str, r: Result<()>, out: &mut Vec<String>) {
    if let Err(e) = r {
        let msg = match e {
            Error::Config(m) => m,
            other => other.to_string(),
        };
        out.extend(msg.split("; ").map(|m| format!("{section}: {m}")));
    }
}

impl RunConfig {
    /// Parses TOML text, reporting every problem at once.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().trim().to_string()))?;
        let mut errors = Vec::new();
        unknown_keys(&toml::Value::Table(value.clone()), &known_template(), "", &mut errors);
        let seed = match value.get("seed") {
            None => 0,
            Some(toml::Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(other) => {
                errors.push(format!("seed: expected a non-negative integer, found {other}"));
                0
            }
        };
        let cfg = RunConfig {
            seed,
            data: section(&value, "data", &mut errors),
            model: section(&value, "model", &mut errors),
            train: section(&value, "train", &mut errors),
            sae: section(&value, "sae", &mut errors),
            influence: section(&value, "influence", &mut errors),
            eval: section(&value, "eval", &mut errors),
            bench: section(&value, "bench", &mut errors),
            paths: section(&value, "paths", &mut errors),
        };
        errors.extend(cfg.problems());
        if errors.is_empty() { Ok(cfg) } else { Err(Error::Config(errors.join("\n"))) }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}:\n{m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Range problems across all sections, one message per offending key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        prefixed("model", self.model.validate(), &mut out);
        if self.train.epochs == 0 {
            out.push("train: epochs must be positive".into());
        }
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            out.push("train: learning-rate must be positive".into());
        }
        if self.train.batch_size == 0 {
            out.push("train: batch-size must be positive".into());
        }
        prefixed("sae", self.sae.validate(self.model.embed_dim), &mut out);
        prefixed("influence", self.influence.solve.validate(), &mut out);
        if self.influence.num_test == 0 {
            out.push("influence: num-test must be positive".into());
        }
        if self.eval.k_grid.is_empty() || self.eval.k_grid.contains(&0) {
            out.push("eval: k-grid must be non-empty with positive entries".into());
        }
        if self.eval.methods.is_empty() {
            out.push("eval: methods must not be empty".into());
        }
        if self.bench.pairs == 0 {
            out.push("bench: pairs must be positive".into());
        }
        if self.data.source == DataSource::Synthetic {
            prefixed("data", self.data.synthetic.validate(), &mut out);
            if self.data.synthetic.vocab_size > self.model.vocab_size {
                out.push(format!(
                    "data: vocab-size {} exceeds model vocab-size {}",
                    self.data.synthetic.vocab_size, self.model.vocab_size
                ));
            }
            if self.data.synthetic.num_classes != self.model.num_classes {
                out.push(format!(
                    "data: num-classes {} differs from model num-classes {}",
                    self.data.synthetic.num_classes, self.model.num_classes
                ));
            }
            if self.data.synthetic.max_len > self.model.max_seq_len {
                out.push(format!(
                    "data: max-len {} exceeds model max-seq-len {}",
                    self.data.synthetic.max_len, self.model.max_seq_len
                ));
            }
        } else {
            if self.paths.train_jsonl.as_os_str().is_empty() {
                out.push("paths: train-jsonl is required when data.source = \"jsonl\"".into());
            }
            if self.paths.test_jsonl.as_os_str().is_empty() {
                out.push("paths: test-jsonl is required when data.source = \"jsonl\"".into());
            }
            if self.data.max_vocab > self.model.vocab_size {
                out.push(format!("data: max-vocab {} exceeds model vocab-size {}", self.data.max_vocab, self.model.vocab_size));
            }
        }
        if self.paths.checkpoints.as_os_str().is_empty() {
            out.push("paths: checkpoints must not be empty".into());
        }
        if self.paths.outputs.as_os_str().is_empty() {
            out.push("paths: outputs must not be empty".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() { Ok(()) } else { Err(Error::Config(p.join("\n"))) }
    }

    /// Applies path overrides from `lookup` (normally the process
    /// environment).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (var, slot) in [
            (ENV_CHECKPOINTS, &mut self.paths.checkpoints),
            (ENV_OUTPUTS, &mut self.paths.outputs),
            (ENV_TRAIN_JSONL, &mut self.paths.train_jsonl),
            (ENV_TEST_JSONL, &mut self.paths.test_jsonl),
        ] {
            if let Some(v) = lookup(var).filter(|v| !v.is_empty()) {
                *slot = PathBuf::from(v);
            }
        }
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn sae_config(&self) -> SaeConfig {
        SaeConfig { seed: self.seed, ..self.sae.clone() }
    }
}

/// Where each default comes from: a published setting or a local choice.
pub fn default_provenance() -> BTreeMap<String, String> {
    let published = "published setting";
    let local = "desk-scale choice";
    [
        ("influence.damping", published),
        ("influence.cg-iters", published),
        ("influence.curvature-batch", published),
        ("influence.retain-fraction", published),
        ("influence.method", published),
        ("influence.target", published),
        ("influence.max-escalations", local),
        ("influence.tolerance", local),
        ("influence.path-steps", local),
        ("influence.solver", local),
        ("influence.curvature-examples", local),
        ("influence.num-test", local),
        ("eval.k-grid", published),
        ("eval.methods", published),
        ("sae.latents", local),
        ("sae.k", local),
        ("sae.ortho-weight", published),
        ("sae.task-weight", local),
        ("sae.epochs", local),
        ("sae.learning-rate", local),
        ("sae.batch-size", local),
        ("sae.holdout", local),
        ("bench.pairs", local),
        ("model", local),
        ("train", local),
        ("data", local),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}
