//! Run configuration, read from a TOML file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use factrace_core::attribution::{Normalize, Order, Precondition};
use factrace_core::bm25::Bm25Params;
use factrace_core::eval::{Level, SliceKind};
use factrace_core::model::{AdafactorConfig, ModelConfig, TrainConfig};
use factrace_core::synthgen::GenConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Overrides `paths.cache` when set.
pub const CACHE_DIR_ENV: &str = "FACTRACE_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Every stage seed is derived from this one.
    pub seed: u64,
    /// Worker threads for scoring and evaluation.
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub generation: Generation,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub attribution: AttributionSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub bundle: PathBuf,
    pub checkpoints: PathBuf,
    pub cache: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            bundle: "run/bundle".into(),
            checkpoints: "run/checkpoints".into(),
            cache: "run/cache".into(),
            reports: "run/reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Generation {
    /// Read this JSONL file instead of generating.
    pub external: Option<PathBuf>,
    pub n_entities: u32,
    pub n_facts: usize,
    pub pairings_per_fact: usize,
    pub maskings_per_sentence: usize,
    pub n_query_facts: usize,
    pub query_variants: usize,
    pub novel_entities: u32,
    pub lexical_variation: bool,
}

impl Default for Generation {
    fn default() -> Self {
        Generation {
            external: None,
            n_entities: 200,
            n_facts: 2000,
            pairings_per_fact: 4,
            maskings_per_sentence: 2,
            n_query_facts: 100,
            query_variants: 2,
            novel_entities: 40,
            lexical_variation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub max_seq_len: usize,
    pub include_eos_in_target: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(1, 0);
        ModelSection {
            d_model: d.d_model,
            n_heads: d.n_heads,
            d_ff: d.d_ff,
            n_enc_layers: d.n_enc_layers,
            n_dec_layers: d.n_dec_layers,
            max_seq_len: d.max_seq_len,
            include_eos_in_target: d.include_eos_in_target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub optimizer: AdafactorConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            pretrain_epochs: 10,
            finetune_epochs: 10,
            batch_size: 16,
            checkpoint_every: 200,
            optimizer: AdafactorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSection {
    /// Fine-tuning checkpoints kept for TracIn.
    pub checkpoints: usize,
    /// Gradient layer tags for TracIn.
    pub layers: Vec<String>,
    /// Activation layer tags for the embedding method.
    pub embed_layers: Vec<String>,
    #[serde(with = "text")]
    pub normalize: Normalize,
    #[serde(with = "text")]
    pub precondition: Precondition,
    #[serde(with = "text")]
    pub order: Order,
    /// Checkpoint steps to sum over; all selected ones when absent.
    pub steps: Option<Vec<u64>>,
    /// Tag sets for the layer sweep; comma-joined tags are summed.
    pub sweep: Vec<String>,
    /// Queries whose gradients are held in memory at once.
    pub query_chunk: usize,
}

impl Default for AttributionSection {
    fn default() -> Self {
        AttributionSection {
            checkpoints: 3,
            layers: vec!["G.0".into()],
            embed_layers: vec!["A.E.0".into()],
            normalize: Normalize::Cosine,
            precondition: Precondition::Adafactor,
            order: Order::PreconditionThenNormalize,
            steps: None,
            sweep: Vec::new(),
            query_chunk: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub methods: Vec<String>,
    #[serde(with = "text")]
    pub slice: SliceKind,
    pub levels: Vec<Level>,
    /// Number of query subsamples.
    pub subsamples: usize,
    /// Queries per subsample; clamped to the slice size.
    pub subsample_size: usize,
    pub k: usize,
    pub bm25: Bm25Params,
    pub bm25_top_k: usize,
    pub same_target: usize,
    pub random: usize,
    /// One report per seed; seeds drive tie-breaking and subsampling.
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            methods: ["tracin", "embed", "ensemble", "bm25", "random-target"]
                .map(String::from)
                .to_vec(),
            slice: SliceKind::FinetuneLearned,
            levels: Level::ALL.to_vec(),
            subsamples: 3,
            subsample_size: 200,
            k: 10,
            bm25: Bm25Params::default(),
            bm25_top_k: 100,
            same_target: 100,
            random: 100,
            seeds: vec![0],
        }
    }
}

/// Serializes the core enums through their `Display`/`FromStr` spelling.
mod text {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(value: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(value)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

pub const METHODS: [&str; 5] = ["tracin", "embed", "ensemble", "bm25", "random-target"];

impl RunConfig {
    /// Parses `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.bundle);
        fix(&mut self.paths.checkpoints);
        fix(&mut self.paths.cache);
        fix(&mut self.paths.reports);
        if let Some(e) = &mut self.generation.external {
            fix(e);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            bail!("workers must be positive");
        }
        for m in &self.eval.methods {
            if !METHODS.contains(&m.as_str()) {
                bail!("unknown method {m:?}; expected one of {}", METHODS.join(", "));
            }
        }
        if self.eval.seeds.is_empty() {
            bail!("eval.seeds must not be empty");
        }
        if self.eval.subsamples == 0 || self.eval.subsample_size == 0 || self.eval.k == 0 {
            bail!("eval.subsamples, eval.subsample_size and eval.k must be positive");
        }
        if self.attribution.checkpoints == 0 {
            bail!("attribution.checkpoints must be positive");
        }
        if self.train.finetune_epochs == 0 {
            bail!("train.finetune_epochs must be positive");
        }
        self.train_config(0).validate()?;
        Ok(())
    }

    /// Cache root, honoring [`CACHE_DIR_ENV`].
    pub fn cache_dir(&self) -> PathBuf {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.paths.cache.clone(),
        }
    }

    /// Short hash of the whole configuration, paths excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        c.workers = 1;
        digest(&[c.to_toml().as_bytes()])
    }

    pub fn gen_config(&self) -> GenConfig {
        let g = &self.generation;
        GenConfig {
            n_entities: g.n_entities,
            n_facts: g.n_facts,
            pairings_per_fact: g.pairings_per_fact,
            maskings_per_sentence: g.maskings_per_sentence,
            n_query_facts: g.n_query_facts,
            query_variants: g.query_variants,
            novel_entities: g.novel_entities,
            lexical_variation: g.lexical_variation,
            seed: derive_seed(self.seed, "gen"),
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            n_enc_layers: m.n_enc_layers,
            n_dec_layers: m.n_dec_layers,
            max_seq_len: m.max_seq_len,
            include_eos_in_target: m.include_eos_in_target,
            seed: derive_seed(self.seed, "init"),
        }
    }

    /// Training settings for a phase with `epochs` epochs.
    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs: epochs.max(1),
            batch_size: self.train.batch_size,
            checkpoint_every: self.train.checkpoint_every,
            optimizer: self.train.optimizer.clone(),
            seed: 0,
        }
    }
}

/// Seed for a named stage: the first 8 bytes of SHA-256 over the global
/// seed and the label.
pub fn derive_seed(global: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// Hex SHA-256 prefix over `parts`, length-delimited.
pub fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(&h.finalize()[..8])
}
