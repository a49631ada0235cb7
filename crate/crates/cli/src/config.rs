use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cotlab::attribution::Distance;
use cotlab::evaluation::DEFAULT_RATIO_GRID;
use cotlab::inference::DecodeConfig;
use cotlab::model::{AdaptSettings, ModelConfig};
use cotlab::synthworld::{CorpusSizes, LexiconSettings};
use cotlab::training::{OptimizerSettings, TrainingRecipe, Variant};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub sizes: CorpusSizes,
    pub min_words: usize,
    pub max_words: usize,
    pub emphasis_rate: f64,
}

/// Model shape shared by every variant; the vocabulary size follows from the
/// lexicon and the initialization seed from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub tie_embeddings: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub ratios: Vec<f64>,
    pub contrastive_pairs: usize,
    /// Test items used by the attribution suite (the first ones).
    pub attribution_items: usize,
    pub distance: Distance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Seeds the lexicon, corpus and contrastive set shared by all runs.
    pub data_seed: u64,
    /// One run per seed and variant; seeds model init, data order and decoding.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub lexicon: LexiconSettings,
    pub corpus: CorpusConfig,
    pub model: ModelShape,
    /// Text-only stage before unit adaptation; `steps = 0` skips it.
    pub pretrain: OptimizerSettings,
    pub adaptation: AdaptSettings,
    pub recipes: BTreeMap<Variant, TrainingRecipe>,
    pub decode: DecodeConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let optimizer = OptimizerSettings {
            peak_lr: 1e-3,
            final_lr: 1e-4,
            batch_size: 32,
            steps: 3000,
            ..OptimizerSettings::default()
        };
        let recipes = Variant::ALL
            .into_iter()
            .map(|v| {
                let mut r = TrainingRecipe::for_variant(v);
                r.optimizer = optimizer.clone();
                (v, r)
            })
            .collect();
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            data_seed: 7,
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("runs/default"),
            lexicon: LexiconSettings {
                n_words: 48,
                n_ambiguous: 8,
                n_languages: 2,
                n_units: 200,
            },
            corpus: CorpusConfig {
                sizes: CorpusSizes {
                    s2tt: 4000,
                    asr: 4000,
                    t2tt: 1000,
                    test: 100,
                },
                min_words: 3,
                max_words: 6,
                emphasis_rate: 0.5,
            },
            model: ModelShape {
                n_layers: 3,
                n_heads: 4,
                d_model: 64,
                d_ff: 256,
                max_context: 64,
                tie_embeddings: false,
            },
            pretrain: OptimizerSettings {
                steps: 1500,
                ..optimizer.clone()
            },
            adaptation: AdaptSettings {
                steps: 200,
                lr: 1e-3,
                batch_size: 32,
            },
            recipes,
            decode: DecodeConfig::default(),
            evaluation: EvaluationConfig {
                ratios: DEFAULT_RATIO_GRID.to_vec(),
                contrastive_pairs: 100,
                attribution_items: 100,
                distance: Distance::Cosine,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cotlab::LabError::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Parse {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.corpus.min_words == 0 || self.corpus.min_words > self.corpus.max_words {
            return bad("corpus word range is empty".into());
        }
        for v in Variant::ALL {
            let r = self
                .recipes
                .get(&v)
                .ok_or_else(|| CliError::Config(format!("no recipe for variant {}", v.as_str())))?;
            if r.variant != v {
                return bad(format!("recipe under {} declares variant {}", v.as_str(), r.variant.as_str()));
            }
            r.validate()?;
        }
        if self.pretrain.steps > 0 {
            let mut r = TrainingRecipe::for_variant(Variant::Base);
            r.optimizer = self.pretrain.clone();
            r.validate()?;
        }
        if self.corpus.sizes.t2tt == 0 && self.pretrain.steps > 0 {
            return bad("pretraining needs t2tt samples".into());
        }
        if !self.evaluation.ratios.contains(&0.0) {
            return bad("evaluation ratios must include 0".into());
        }
        self.decode.validate()?;
        self.model_config(0, 1).validate()?;
        Ok(())
    }

    pub fn word_range(&self) -> (usize, usize) {
        (self.corpus.min_words, self.corpus.max_words)
    }

    pub fn model_config(&self, seed: u64, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            d_ff: m.d_ff,
            vocab_size,
            max_context: m.max_context,
            seed,
            tie_embeddings: m.tie_embeddings,
        }
    }

    /// Recipe for `variant` with the optimizer seeded by the run seed.
    pub fn recipe(&self, variant: Variant, seed: u64) -> TrainingRecipe {
        let mut r = self.recipes[&variant].clone();
        r.optimizer.seed = seed;
        r
    }

    pub fn decode_for(&self, seed: u64) -> DecodeConfig {
        DecodeConfig {
            seed,
            ..self.decode.clone()
        }
    }

    /// Digest of everything that affects results; the output location is
    /// excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let canonical = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text, Path::new("mem")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn digest_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.data_seed += 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = ExperimentConfig {
            seeds: vec![1, 1],
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            schema_version: 99,
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.recipes.remove(&Variant::Dual);
        assert!(c.validate().is_err());
        let text = ExperimentConfig::default().to_toml().replace("data_seed", "data_sed");
        assert!(ExperimentConfig::from_toml(&text, Path::new("mem")).is_err());
    }
}
