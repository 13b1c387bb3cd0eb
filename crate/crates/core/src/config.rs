//! Model and training configuration, serialized as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Aggregation, ToyEncoderConfig};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::pair_head::{AdjacencyConfig, AdjacencyDecoderKind};
use crate::params::Activation;
use crate::prompt::DEFAULT_MAX_WORDS;
use crate::relation_head::TripleScorerKind;

/// Backbone name that selects the built-in trainable encoder.
pub const TOY_BACKBONE: &str = "toy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub backbone: String,
    pub max_words: usize,
    pub bilstm: bool,
    /// Concatenated output width of both LSTM directions.
    pub bilstm_hidden: usize,
    pub aggregation: Aggregation,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab_min_freq: usize,
    pub hash_buckets: usize,
}

impl EncoderSection {
    pub fn toy(&self) -> ToyEncoderConfig {
        ToyEncoderConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanSection {
    pub max_width: usize,
    pub type_activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    AllPairs,
    Adjacency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSection {
    pub strategy: PairStrategy,
    pub adjacency: AdjacencyConfig,
}

impl PairSection {
    /// Resolved decoder, `None` in all-pairs mode.
    pub fn decoder(&self) -> Result<Option<AdjacencyDecoderKind>> {
        let kind = self.adjacency.resolve()?;
        match (self.strategy, kind) {
            (PairStrategy::AllPairs, None) => Ok(None),
            (PairStrategy::AllPairs, Some(_)) => Err(Error::config(
                "pairs.strategy = \"all_pairs\" cannot be combined with an adjacency decoder",
            )),
            (PairStrategy::Adjacency, None) => Err(Error::config(
                "pairs.strategy = \"adjacency\" requires pairs.adjacency.kind",
            )),
            (PairStrategy::Adjacency, Some(k)) => Ok(Some(k)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSection {
    pub scorer: TripleScorerKind,
    pub dropout: f64,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub enabled: bool,
    pub optimizer: Optimizer,
    pub encoder_lr: f64,
    pub head_lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
}

impl StageConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        let lr_ok = |x: f64| x >= 0.0 && x.is_finite();
        if !lr_ok(self.encoder_lr) || !lr_ok(self.head_lr) {
            return Err(Error::config(format!("{name}: learning rates must be nonnegative")));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config(format!("{name}: warmup_ratio must lie in [0, 1)")));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{name}: batch_size must be positive")));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("{name}: weight_decay must be nonnegative")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    pub entity_threshold: f64,
    pub relation_threshold: f64,
    pub flat_ner: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub seed: u64,
    /// Randomise label order in every training prompt.
    pub shuffle_labels: bool,
    /// Probability of leaving each label out of a training prompt; at least
    /// one label of each kind is always kept.
    #[serde(default)]
    pub label_dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub encoder: EncoderSection,
    pub span: SpanSection,
    pub pairs: PairSection,
    pub relation: RelationSection,
    pub loss: LossConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub inference: InferenceSection,
    pub training: TrainingSection,
}

impl Default for Config {
    /// Released-checkpoint hyperparameters for the large pretrained backbone.
    fn default() -> Self {
        Self {
            encoder: EncoderSection {
                backbone: "deberta-v3-large".into(),
                max_words: DEFAULT_MAX_WORDS,
                bilstm: true,
                bilstm_hidden: 1024,
                aggregation: Aggregation::First,
                dim: 1024,
                layers: 24,
                heads: 16,
                ffn_mult: 4,
                vocab_min_freq: 1,
                hash_buckets: 256,
            },
            span: SpanSection {
                max_width: 12,
                type_activation: Activation::None,
            },
            pairs: PairSection {
                strategy: PairStrategy::AllPairs,
                adjacency: AdjacencyConfig::default(),
            },
            relation: RelationSection {
                scorer: TripleScorerKind::PairMlp,
                dropout: 0.1,
                activation: Activation::None,
            },
            loss: LossConfig::default(),
            stage1: StageConfig {
                enabled: true,
                optimizer: Optimizer::AdamW,
                encoder_lr: 1e-5,
                head_lr: 5e-5,
                warmup_ratio: 0.05,
                batch_size: 8,
                epochs: 1,
                weight_decay: 0.01,
            },
            stage2: StageConfig {
                enabled: true,
                optimizer: Optimizer::AdamW,
                encoder_lr: 3e-6,
                head_lr: 5e-6,
                warmup_ratio: 0.05,
                batch_size: 8,
                epochs: 5,
                weight_decay: 0.01,
            },
            inference: InferenceSection {
                entity_threshold: 0.3,
                relation_threshold: 0.5,
                flat_ner: false,
            },
            training: TrainingSection {
                seed: 0,
                shuffle_labels: true,
                label_dropout: 0.0,
            },
        }
    }
}

impl Config {
    /// Toy-encoder preset sized for a laptop: D = 64 and learning rates scaled up.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.encoder.backbone = TOY_BACKBONE.into();
        c.encoder.dim = 64;
        c.encoder.layers = 2;
        c.encoder.heads = 4;
        c.encoder.ffn_mult = 2;
        c.encoder.bilstm_hidden = 64;
        for stage in [&mut c.stage1, &mut c.stage2] {
            stage.encoder_lr = 1e-4;
            stage.head_lr = 1e-3;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.max_words == 0 {
            return Err(Error::config("encoder.max_words must be positive"));
        }
        if e.backbone == TOY_BACKBONE {
            if e.dim == 0 || e.heads == 0 || e.dim % e.heads != 0 {
                return Err(Error::config("encoder.dim must be a positive multiple of encoder.heads"));
            }
            if e.layers == 0 || e.ffn_mult == 0 {
                return Err(Error::config("encoder.layers and encoder.ffn_mult must be positive"));
            }
        }
        if e.bilstm && e.bilstm_hidden != e.dim {
            return Err(Error::config(format!(
                "encoder.bilstm_hidden ({}) must equal encoder.dim ({}) so the heads keep width D",
                e.bilstm_hidden, e.dim
            )));
        }
        if e.hash_buckets == 0 || e.vocab_min_freq == 0 {
            return Err(Error::config("encoder.hash_buckets and encoder.vocab_min_freq must be positive"));
        }
        if self.span.max_width == 0 {
            return Err(Error::config("span.max_width must be at least 1"));
        }
        self.pairs.decoder()?;
        self.relation.scorer.validate(e.dim)?;
        if !(0.0..1.0).contains(&self.relation.dropout) {
            return Err(Error::config("relation.dropout must lie in [0, 1)"));
        }
        self.loss.validate()?;
        if self.loss.lambda_adjacency > 0.0 && self.pairs.strategy == PairStrategy::AllPairs {
            return Err(Error::config("loss.lambda_adjacency > 0 needs an adjacency decoder"));
        }
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        if !(0.0..1.0).contains(&self.training.label_dropout) {
            return Err(Error::config("training.label_dropout must lie in [0, 1)"));
        }
        let t = &self.inference;
        for (name, v) in [("entity_threshold", t.entity_threshold), ("relation_threshold", t.relation_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("inference.{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}
