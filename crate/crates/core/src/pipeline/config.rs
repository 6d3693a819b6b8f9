//! The experiment config: one TOML file, deep-merged over the defaults,
//! with `key.path=value` overrides on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::align::TrainConfig;
use crate::corpus::DialogueBounds;
use crate::genpipeline::{HttpConfig, Sampling};
use crate::io::derive_seed;
use crate::pairforge::ForgeConfig;
use crate::policy::{Arch, DecodeConfig, LoraConfig};
use crate::template::sha256_hex;
use crate::text::Scheme;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Rule records (JSONL); the world's rules when unset.
    #[serde(default)]
    pub rules: Option<PathBuf>,
    /// Alias map (JSON); the world's names when unset.
    #[serde(default)]
    pub aliases: Option<PathBuf>,
    /// Directory with `rule.txt`, `convert.txt`, `ruleify.txt`.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    /// QA records (JSONL); drawn from the world when unset.
    #[serde(default)]
    pub qa: Option<PathBuf>,
    /// Rule world (JSON); replaces `world.kind`.
    #[serde(default)]
    pub world: Option<PathBuf>,
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            rules: None,
            aliases: None,
            templates: None,
            qa: None,
            world: None,
            corpus: "work/corpus".into(),
            checkpoints: "work/checkpoints".into(),
            reports: "work/reports".into(),
        }
    }
}

impl Paths {
    pub fn converted(&self) -> PathBuf {
        self.corpus.join("converted.jsonl")
    }
    pub fn dialogues(&self) -> PathBuf {
        self.corpus.join("dialogues.jsonl")
    }
    pub fn train_split(&self) -> PathBuf {
        self.corpus.join("train.jsonl")
    }
    pub fn test_split(&self) -> PathBuf {
        self.corpus.join("test.jsonl")
    }
    pub fn pairs(&self) -> PathBuf {
        self.corpus.join("pairs.jsonl")
    }
    pub fn sft_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("sft.ckpt")
    }
    pub fn dpo_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("dpo.ckpt")
    }

    fn inputs(&self) -> [(&'static str, &Option<PathBuf>); 5] {
        [
            ("paths.rules", &self.rules),
            ("paths.aliases", &self.aliases),
            ("paths.templates", &self.templates),
            ("paths.qa", &self.qa),
            ("paths.world", &self.world),
        ]
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.rules, &mut self.aliases, &mut self.templates, &mut self.qa, &mut self.world]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.corpus);
        fix(&mut self.checkpoints);
        fix(&mut self.reports);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    Urology,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub kind: WorldKind,
    /// Disease count for a generated world.
    pub diseases: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { kind: WorldKind::Urology, diseases: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Synthetic,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Synthetic backend: chance of a rule-breaking reply.
    pub failure_rate: f64,
    #[serde(default)]
    pub http: Option<HttpConfig>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { kind: BackendKind::Synthetic, failure_rate: 0.1, http: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    /// Records drawn from the world when `paths.qa` is unset.
    pub qa_records: usize,
    pub parallelism: usize,
    pub sampling: Sampling,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { qa_records: 600, parallelism: 4, sampling: Sampling::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub test_fraction: f64,
    pub bounds: DialogueBounds,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { test_fraction: 0.2, bounds: DialogueBounds::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub context: usize,
    /// Adapters trained in the preference phase instead of full weights.
    #[serde(default)]
    pub lora: Option<LoraConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_model: 48, n_layers: 2, n_heads: 4, d_mlp: 96, context: 192, lora: None }
    }
}

impl ModelConfig {
    pub fn arch(&self, vocab: usize) -> Arch {
        Arch {
            vocab,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_mlp: self.d_mlp,
            context: self.context,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub decode: DecodeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { decode: DecodeConfig::greedy(48) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpConfig {
    pub cases: usize,
    pub max_turns: usize,
    pub decode: DecodeConfig,
}

impl Default for SpConfig {
    fn default() -> Self {
        Self { cases: 50, max_turns: 16, decode: DecodeConfig::greedy(48) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub arms: Vec<super::Arm>,
    /// Pair fraction of the subsampled arm.
    pub subsample: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], arms: super::Arm::ALL.to_vec(), subsample: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scheme: Scheme,
    pub paths: Paths,
    pub world: WorldConfig,
    pub backend: BackendConfig,
    pub generation: GenerationConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub sft: TrainConfig,
    pub dpo: TrainConfig,
    pub forge: ForgeConfig,
    pub eval: EvalConfig,
    pub sp: SpConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            scheme: Scheme::Word,
            paths: Paths::default(),
            world: WorldConfig::default(),
            backend: BackendConfig::default(),
            generation: GenerationConfig::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            // One supervised epoch: ten saturate the synthetic world and
            // leave preference training nothing to correct.
            sft: TrainConfig { epochs: 1, ..TrainConfig::sft() },
            dpo: TrainConfig { learning_rate: 2e-4, beta: Some(2.0), ..TrainConfig::dpo() },
            forge: ForgeConfig {
                decode: DecodeConfig { temperature: 0.7, ..ForgeConfig::default().decode },
                ..ForgeConfig::default()
            },
            eval: EvalConfig::default(),
            sp: SpConfig::default(),
            ablation: AblationConfig::default(),
        };
        cfg.propagate_seed();
        cfg
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// TOML form of a serializable value: module seeds dropped (they are
/// always derived from the global seed) and unset options omitted.
fn toml_value<T: Serialize>(value: &T) -> toml::Value {
    fn strip(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Object(m) => {
                m.remove("seed");
                m.retain(|_, c| !c.is_null());
                m.values_mut().for_each(strip);
            }
            serde_json::Value::Array(a) => a.iter_mut().for_each(strip),
            _ => {}
        }
    }
    let mut v = serde_json::to_value(value).expect("value serializes");
    strip(&mut v);
    toml::Value::try_from(v).expect("stripped value has a TOML form")
}

fn parse_override(spec: &str) -> Result<toml::Value, PipelineError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override {spec:?} is not of the form key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut out = value;
    for part in key.trim().rsplit('.') {
        if part.is_empty() {
            return Err(PipelineError::Config(format!("override {spec:?} has an empty key segment")));
        }
        let mut t = toml::Table::new();
        t.insert(part.to_string(), out);
        out = toml::Value::Table(t);
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Parses `text` over the defaults, then applies `key.path=value`
    /// overrides. Relative paths are resolved against `base`.
    pub fn from_toml(text: &str, overrides: &[String], base: &Path) -> Result<Self, PipelineError> {
        let mut merged = toml_value(&Self::default());
        let given: toml::Table = text.parse().map_err(|e| PipelineError::Config(format!("config: {e}")))?;
        let seed = given.get("seed").cloned();
        let mut given = toml_value(&given);
        if let (Some(s), toml::Value::Table(t)) = (seed, &mut given) {
            t.insert("seed".into(), s);
        }
        merge(&mut merged, given);
        for o in overrides {
            merge(&mut merged, parse_override(o)?);
        }
        if let toml::Value::Table(t) = &mut merged {
            t.entry("seed").or_insert(toml::Value::Integer(0));
        }
        let mut cfg: Self = merged.try_into().map_err(|e: toml::de::Error| PipelineError::Config(format!("config: {e}")))?;
        cfg.paths.resolve(base);
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, overrides, &base)
    }

    /// The config with every module seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.propagate_seed();
        c
    }

    pub fn propagate_seed(&mut self) {
        let s = self.seed;
        self.generation.sampling.seed = derive_seed(s, &["generation"]);
        self.sft.seed = derive_seed(s, &["sft"]);
        self.dpo.seed = derive_seed(s, &["dpo"]);
        self.forge.seed = derive_seed(s, &["forge"]);
        self.forge.decode.seed = derive_seed(s, &["forge", "decode"]);
        self.eval.decode.seed = derive_seed(s, &["eval"]);
        self.sp.decode.seed = derive_seed(s, &["sp"]);
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, &[stage])
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.backend.kind == BackendKind::Http && self.backend.http.is_none() {
            return bad("backend.kind = \"http\" needs a [backend.http] table".into());
        }
        if !(0.0..=1.0).contains(&self.backend.failure_rate) {
            return bad(format!("backend.failure_rate must lie in [0, 1], got {}", self.backend.failure_rate));
        }
        if !(self.corpus.test_fraction > 0.0 && self.corpus.test_fraction < 1.0) {
            return bad(format!("corpus.test_fraction must lie in (0, 1), got {}", self.corpus.test_fraction));
        }
        if !(self.ablation.subsample > 0.0 && self.ablation.subsample <= 1.0) {
            return bad(format!("ablation.subsample must lie in (0, 1], got {}", self.ablation.subsample));
        }
        if self.world.kind == WorldKind::Generated && self.world.diseases == 0 {
            return bad("world.diseases must be positive".into());
        }
        if self.sp.max_turns < 2 {
            return bad("sp.max_turns must be at least 2".into());
        }
        self.sft.validate().map_err(|e| PipelineError::Config(format!("sft: {e}")))?;
        self.dpo.validate().map_err(|e| PipelineError::Config(format!("dpo: {e}")))?;
        self.forge.validate().map_err(|e| PipelineError::Config(format!("forge: {e}")))?;
        self.model.arch(16).validate().map_err(|e| PipelineError::Config(format!("model: {e}")))?;
        Ok(())
    }

    /// Every configured input path must exist.
    pub fn check_inputs(&self) -> Result<(), PipelineError> {
        for (key, p) in self.paths.inputs() {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(PipelineError::Config(format!("{key}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// The config as TOML; loading it back gives the same config.
    pub fn to_toml(&self) -> String {
        let mut v = toml_value(self);
        if let toml::Value::Table(t) = &mut v {
            t.insert("seed".into(), toml::Value::Integer(self.seed as i64));
        }
        toml::to_string(&v).expect("config serializes")
    }

    /// Digest of everything that shapes outputs: file locations and worker
    /// counts are left out.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        obj.remove("paths");
        if let Some(g) = obj.get_mut("generation").and_then(|g| g.as_object_mut()) {
            g.remove("parallelism");
        }
        sha256_hex(v.to_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_tables_merge_over_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 4\n[sft]\nepochs = 3\n[corpus.bounds]\nmax_rounds = 11\n",
            &["model.d_model=32".into(), "forge.mix.sampled=0.5".into()],
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.sft.epochs, 3);
        assert_eq!(cfg.sft.learning_rate, TrainConfig::sft().learning_rate);
        assert_eq!(cfg.corpus.bounds.max_rounds, 11);
        assert_eq!(cfg.corpus.bounds.min_rounds, 3);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.paths.corpus, Path::new("/base/work/corpus"));
        assert_eq!(cfg.sft.seed, derive_seed(4, &["sft"]));
    }

    #[test]
    fn typos_and_bad_values_are_config_errors() {
        let e = ExperimentConfig::from_toml("[sft]\nepoch = 3\n", &[], Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("epoch"), "{e}");
        assert!(ExperimentConfig::from_toml("[corpus]\ntest_fraction = 1.5\n", &[], Path::new(".")).is_err());
        assert!(ExperimentConfig::from_toml("", &["nokey".into()], Path::new(".")).is_err());
        assert!(ExperimentConfig::from_toml("[backend]\nkind = \"http\"\n", &[], Path::new(".")).is_err());
    }

    #[test]
    fn module_seeds_follow_the_global_seed() {
        let a = ExperimentConfig::from_toml("[sft]\nseed = 99\n", &[], Path::new(".")).unwrap();
        assert_eq!(a.sft.seed, derive_seed(0, &["sft"]));
        let b = a.with_seed(1);
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.forge.seed, b.forge.seed);
    }

    #[test]
    fn toml_round_trip_and_path_free_hash() {
        let cfg = ExperimentConfig::default().with_seed(7);
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), &[], Path::new("")).unwrap();
        assert_eq!(back, cfg);
        let moved = ExperimentConfig::from_toml(&cfg.to_toml(), &[], Path::new("/elsewhere")).unwrap();
        assert_eq!(moved.hash(), cfg.hash());
    }
}
