//! Run configuration and the end-to-end pipeline behind one seed: data,
//! vocabulary, pretraining, partition and the federated session.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augmentor::AugmentConfig;
use crate::corpus::{build_vocab_multi, load_jsonl, split, synth_corpus, synth_generate, CorpusSpec, Dataset, Splits, SynthSpec, Vocab};
use crate::error::{Error, Result};
use crate::federation::{run_session, Mode, RoundConfig, SessionAbort, SessionInputs, SessionOutcome};
use crate::model::{init_params, load_checkpoint, pretrain_mlm, ModelConfig, ModelParams, OptimizerKind, PretrainConfig};
use crate::partitioner::{partition, reveal_all, Partition, PartitionSpec};
use crate::prompt::{preset_pattern, Pvp, Task};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSection {
    pub enabled: bool,
    pub confidence_threshold: f64,
    pub per_client_budget: usize,
    pub cumulative: bool,
    pub capacity_check: bool,
    pub full_scan: bool,
}

impl Default for AugmentationSection {
    fn default() -> Self {
        let a = AugmentConfig::default();
        AugmentationSection {
            enabled: false,
            confidence_threshold: a.confidence_threshold,
            per_client_budget: a.per_client_budget,
            cumulative: a.cumulative,
            capacity_check: a.capacity_check,
            full_scan: a.full_scan,
        }
    }
}

/// Partition settings; the seed comes from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub num_clients: usize,
    pub n_labeled: usize,
    pub gamma: f64,
    pub xi: usize,
    pub alpha: f64,
    pub random_xi: bool,
}

impl Default for PartitionSection {
    fn default() -> Self {
        let p = PartitionSpec::default();
        PartitionSection {
            num_clients: p.num_clients,
            n_labeled: p.n_labeled,
            gamma: p.gamma,
            xi: p.xi,
            alpha: p.alpha,
            random_xi: p.random_xi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub precision: Precision,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { d_model: 32, num_layers: 2, num_heads: 4, d_ffn: 64, max_seq_len: 32, precision: Precision::F32 }
    }
}

/// Pattern and verbalizer. The verbalizer maps label names to tokens; when
/// empty, every label is verbalized by its own name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PvpSection {
    pub preset: Option<String>,
    pub pattern: Option<String>,
    pub verbalizer: BTreeMap<String, String>,
}

impl Default for PvpSection {
    fn default() -> Self {
        PvpSection { preset: Some("yelp".into()), pattern: None, verbalizer: BTreeMap::new() }
    }
}

impl PvpSection {
    pub fn resolve(&self, label_names: &[String]) -> Result<Pvp> {
        let pattern = match (&self.pattern, &self.preset) {
            (Some(p), _) => p.clone(),
            (None, Some(name)) => preset_pattern(name)
                .ok_or_else(|| Error::Config(format!("unknown pattern preset {name:?}")))?
                .to_string(),
            (None, None) => return Err(Error::Config("pvp needs a pattern or a preset".into())),
        };
        if self.verbalizer.is_empty() {
            let identity = label_names.iter().map(|l| (l.clone(), l.clone())).collect();
            Pvp::from_label_names(&pattern, label_names, &identity)
        } else {
            Pvp::from_label_names(&pattern, label_names, &self.verbalizer)
        }
    }
}

/// Where examples come from. A JSONL file needs its label names; otherwise
/// the synthetic task is generated. Pretraining text is the synthetic
/// corpus, or the training split of a JSONL dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub jsonl: Option<PathBuf>,
    pub labels: Vec<String>,
    pub synth: SynthSpec,
    pub corpus: CorpusSpec,
    pub test_fraction: f64,
    /// Defaults to a tenth of `test_fraction`.
    pub validation_fraction: Option<f64>,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            jsonl: None,
            labels: Vec::new(),
            synth: SynthSpec { examples_per_class: 1000, ..SynthSpec::default() },
            corpus: CorpusSpec::default(),
            test_fraction: 0.1,
            validation_fraction: None,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Start from this checkpoint instead of pretraining.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        PretrainSection { steps: p.steps, batch_size: p.batch_size, learning_rate: p.learning_rate, checkpoint: None }
    }
}

/// Cells of a sweep: the cross product of these lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub n_labeled: Vec<usize>,
    pub gamma: Vec<f64>,
    pub mode: Vec<Mode>,
    pub augmentation: Vec<bool>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            n_labeled: vec![16, 64, 256],
            gamma: vec![100.0],
            mode: vec![Mode::FedPrompt, Mode::FedCls],
            augmentation: vec![false],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub participants_per_round: usize,
    pub local_iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub max_rounds: usize,
    pub patience: usize,
    pub record_wall_time: bool,
    pub augmentation: AugmentationSection,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub pvp: PvpSection,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub seeds: Vec<u64>,
    /// Also run a reference with every training label revealed, for
    /// relative performance.
    pub fullset: bool,
    pub grid: Option<Grid>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let r = RoundConfig::default();
        RunConfig {
            mode: r.mode,
            participants_per_round: r.participants_per_round,
            local_iterations: r.local_iterations,
            batch_size: r.batch_size,
            learning_rate: r.learning_rate,
            optimizer: r.optimizer,
            max_rounds: r.max_rounds,
            patience: r.patience,
            record_wall_time: r.record_wall_time,
            augmentation: AugmentationSection::default(),
            partition: PartitionSection::default(),
            model: ModelSection::default(),
            pvp: PvpSection::default(),
            data: DataSection::default(),
            pretrain: PretrainSection::default(),
            seeds: vec![1, 2, 3],
            fullset: false,
            grid: None,
        }
    }
}

impl RunConfig {
    /// Parses TOML for `.toml` files and JSON otherwise.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?
        } else {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::parse(&text, path)?, text))
    }

    pub fn validate(&self) -> Result<()> {
        self.round_config().validate()?;
        self.augment_config().validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let probe = ModelConfig {
            vocab_size: 16,
            num_labels: 2,
            d_model: self.model.d_model,
            num_layers: self.model.num_layers,
            num_heads: self.model.num_heads,
            d_ffn: self.model.d_ffn,
            max_seq_len: self.model.max_seq_len,
        };
        probe.validate()?;
        if self.data.jsonl.is_some() && self.data.labels.len() < 2 {
            return Err(Error::Config("a JSONL dataset needs at least two label names in data.labels".into()));
        }
        if self.data.jsonl.is_none() {
            self.data.synth.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.partition_spec(0).validate(usize::MAX)?;
        if let Some(g) = &self.grid {
            if g.n_labeled.is_empty() || g.gamma.is_empty() || g.mode.is_empty() || g.augmentation.is_empty() {
                return Err(Error::Config("every grid list needs at least one value".into()));
            }
        }
        Ok(())
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            participants_per_round: self.participants_per_round,
            local_iterations: self.local_iterations,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            mode: self.mode,
            augmentation_enabled: self.augmentation.enabled,
            max_rounds: self.max_rounds,
            patience: self.patience,
            record_wall_time: self.record_wall_time,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        let a = &self.augmentation;
        AugmentConfig {
            confidence_threshold: a.confidence_threshold,
            per_client_budget: a.per_client_budget,
            cumulative: a.cumulative,
            capacity_check: a.capacity_check,
            full_scan: a.full_scan,
        }
    }

    pub fn partition_spec(&self, seed: u64) -> PartitionSpec {
        let p = &self.partition;
        PartitionSpec {
            num_clients: p.num_clients,
            n_labeled: p.n_labeled,
            gamma: p.gamma,
            xi: p.xi,
            alpha: p.alpha,
            random_xi: p.random_xi,
            seed,
        }
    }

    pub fn model_config(&self, vocab_size: usize, num_labels: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size,
            num_labels,
            d_model: m.d_model,
            num_layers: m.num_layers,
            num_heads: m.num_heads,
            d_ffn: m.d_ffn,
            max_seq_len: m.max_seq_len,
        }
    }

    pub fn validation_fraction(&self) -> f64 {
        self.data.validation_fraction.unwrap_or(self.data.test_fraction / 10.0)
    }
}

/// Data shared by every seed of a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub splits: Splits,
    pub corpus: Dataset,
    pub vocab: Arc<Vocab>,
    pub pvp: Pvp,
}

impl Prepared {
    pub fn label_names(&self) -> &[String] {
        &self.splits.train.label_names
    }

    pub fn task(&self, mode: Mode, max_seq_len: usize) -> Result<Task> {
        match mode {
            Mode::FedPrompt => Task::prompt(self.pvp.clone(), self.vocab.clone(), max_seq_len),
            Mode::FedCls => Ok(Task::cls(self.vocab.clone(), max_seq_len)),
        }
    }
}

/// Loads or generates the dataset, splits it and builds the vocabulary over
/// the pretraining text, the task text, the verbalizer and the pattern.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (dataset, corpus) = match &cfg.data.jsonl {
        Some(path) => {
            let ds = load_jsonl(path, &cfg.data.labels)?;
            (ds, None)
        }
        None => (synth_generate(&cfg.data.synth)?, Some(synth_corpus(&cfg.data.synth, &cfg.data.corpus)?)),
    };
    let splits = split(&dataset, cfg.data.test_fraction, cfg.validation_fraction(), cfg.data.split_seed)?;
    let corpus = corpus.unwrap_or_else(|| splits.train.clone());
    let pvp = cfg.pvp.resolve(&dataset.label_names)?;
    let mut vocab = build_vocab_multi(&[&corpus, &dataset], &pvp.verbalizer_words())?;
    vocab.extend_with_text(&pvp.literal_text());
    Ok(Prepared { splits, corpus, vocab: Arc::new(vocab), pvp })
}

/// Initial weights for `seed`: the configured checkpoint, or a fresh model
/// pretrained on the corpus.
pub fn pretrained<S: Scalar>(cfg: &RunConfig, prepared: &Prepared, seed: u64) -> Result<ModelParams<S>> {
    let model_cfg = cfg.model_config(prepared.vocab.len(), prepared.label_names().len());
    if let Some(path) = &cfg.pretrain.checkpoint {
        let ckpt = load_checkpoint::<S>(path)?;
        if ckpt.params.config != model_cfg {
            return Err(Error::Config(format!("checkpoint {} does not match the model config", path.display())));
        }
        if ckpt.vocab.as_ref().is_some_and(|v| v.tokens() != prepared.vocab.tokens()) {
            return Err(Error::Config(format!("checkpoint {} was built with another vocabulary", path.display())));
        }
        return Ok(ckpt.params);
    }
    let mut params = init_params::<S>(&model_cfg, seed)?;
    let pre = PretrainConfig {
        steps: cfg.pretrain.steps,
        batch_size: cfg.pretrain.batch_size,
        learning_rate: cfg.pretrain.learning_rate,
        seed: derive_seed(seed, &[1]),
    };
    pretrain_mlm(&mut params, &prepared.corpus, &prepared.vocab, &pre)?;
    Ok(params)
}

/// Partition for `seed`; with `fullset` every training label is revealed.
pub fn partition_for(cfg: &RunConfig, prepared: &Prepared, seed: u64, fullset: bool) -> Result<Partition> {
    let mut part = partition(&prepared.splits.train, &cfg.partition_spec(seed))?;
    if fullset {
        reveal_all(&mut part.shards, &prepared.splits.train);
    }
    Ok(part)
}

/// One federated session of `cfg` under `seed`, starting from `initial`.
pub fn run_seed<S: Scalar>(
    cfg: &RunConfig,
    prepared: &Prepared,
    initial: &ModelParams<S>,
    seed: u64,
    fullset: bool,
) -> std::result::Result<SessionOutcome<S>, SessionAbort> {
    let abort = |source| SessionAbort { history: Vec::new(), source };
    let part = partition_for(cfg, prepared, seed, fullset).map_err(abort)?;
    let task = prepared.task(cfg.mode, cfg.model.max_seq_len).map_err(abort)?;
    run_session(SessionInputs {
        train: &prepared.splits.train,
        test: &prepared.splits.test,
        validation: &prepared.splits.validation,
        shards: part.shards,
        task: &task,
        initial: initial.clone(),
        round: cfg.round_config(),
        augment: cfg.augment_config(),
        seed,
    })
}
