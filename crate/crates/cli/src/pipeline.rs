//! gen → train → eval over one output directory.
//!
//! ```text
//! <out>/manifest.json                 digests of every file below
//! <out>/config.toml
//! <out>/data/{lexicon.json, train.jsonl, test.jsonl, contrastive.jsonl}
//! <out>/seed-<s>/pretrain/{checkpoint.bin, metrics.jsonl, train.json}
//! <out>/seed-<s>/<variant>/{checkpoint.bin, metrics.jsonl, train.json, adaptation.json}
//! <out>/seed-<s>/<variant>/{quality,robustness,attribution,prosody}.json
//! <out>/report/...
//! ```

use std::collections::HashSet;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cotlab::evaluation::{
    attribution_suite, contrastive_eval, evaluate_quality_runs, mean_attribution, robustness_sweep,
    AttributionItem, ContrastiveReport, QualityReport, RobustnessCurve,
};
use cotlab::inference::{ModelSystem, RunMode};
use cotlab::model::checkpoint::Checkpoint;
use cotlab::model::{adapt_embeddings, Parameters};
use cotlab::synthworld::{
    build_lexicon, make_contrastive_pairs, make_corpus, ContrastivePair, Lexicon, Sample, SampleFormat, WordId,
};
use cotlab::attribution::RegionAttribution;
use cotlab::training::{build_mixture, OptimizerSettings, StepMetrics, Trainer, TrainingRecipe, Variant};
use cotlab::vocab::{TokenId, Vocabulary};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::store::Store;

const CHECKPOINT_EVERY: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Quality,
    Robustness,
    Attribution,
    Prosody,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Quality, Suite::Robustness, Suite::Attribution, Suite::Prosody];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Quality => "quality",
            Suite::Robustness => "robustness",
            Suite::Attribution => "attribution",
            Suite::Prosody => "prosody",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| CliError::Config(format!("unknown suite {s:?}")))
    }
}

/// The generated micro-world shared by every run.
#[derive(Clone, Debug)]
pub struct World {
    pub lexicon: Lexicon,
    pub vocab: Vocabulary,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub pairs: Vec<ContrastivePair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Variant name, or `pretrain` for the shared text stage.
    pub run: String,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub adaptation_losses: Vec<f64>,
    pub parameters: usize,
    pub checkpoint_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: RunMode,
    pub item: usize,
    pub transcript: Option<Vec<TokenId>>,
    pub translation: Vec<TokenId>,
    pub truncated: bool,
    pub decode_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualitySuite {
    pub reports: Vec<QualityReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSuite {
    pub curves: Vec<RobustnessCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMode {
    pub mode: RunMode,
    pub items_requested: usize,
    /// Mean over scored items; absent when no item produced a translation.
    pub mean: Option<RegionAttribution>,
    pub items: Vec<AttributionItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionSuite {
    pub modes: Vec<AttributionMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsodySuite {
    pub reports: Vec<ContrastiveReport>,
}

pub fn run_dir(seed: u64, variant: Variant) -> String {
    format!("seed-{seed}/{}", variant.as_str())
}

pub fn pretrain_dir(seed: u64) -> String {
    format!("seed-{seed}/pretrain")
}

pub fn suite_file(seed: u64, variant: Variant, suite: Suite) -> String {
    format!("{}/{}.json", run_dir(seed, variant), suite.as_str())
}

#[derive(Clone, Debug)]
pub struct Lab {
    pub config: ExperimentConfig,
    pub store: Store,
}

impl Lab {
    /// `out` overrides the configured output directory.
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let root = out.unwrap_or_else(|| config.output_dir.clone());
        let store = Store::new(root, config.digest());
        Ok(Lab { config, store })
    }

    fn seeds(&self, seed: Option<u64>) -> Result<Vec<u64>> {
        match seed {
            None => Ok(self.config.seeds.clone()),
            Some(s) if self.config.seeds.contains(&s) => Ok(vec![s]),
            Some(s) => Err(CliError::Config(format!("seed {s} is not listed in the config"))),
        }
    }

    /// Generates the lexicon, corpus and contrastive set.
    pub fn gen(&self) -> Result<()> {
        let c = &self.config;
        self.store.manifest()?;
        let lexicon = build_lexicon(c.data_seed, &c.lexicon)?;
        let corpus = make_corpus(
            &lexicon,
            c.data_seed,
            &c.corpus.sizes,
            c.word_range(),
            c.corpus.emphasis_rate,
        )?;
        let seen: HashSet<Vec<WordId>> = corpus
            .train
            .iter()
            .chain(&corpus.test)
            .map(|s| s.transcript.clone())
            .collect();
        let pairs = make_contrastive_pairs(
            &lexicon,
            c.data_seed,
            c.evaluation.contrastive_pairs,
            c.word_range(),
            &seen,
        )?;
        let s = &self.store;
        s.write_bytes("config.toml", c.to_toml().as_bytes())?;
        s.write_json("data/lexicon.json", "lexicon", &lexicon)?;
        s.write_lines("data/train.jsonl", "train_samples", &corpus.train)?;
        s.write_lines("data/test.jsonl", "test_samples", &corpus.test)?;
        s.write_lines("data/contrastive.jsonl", "contrastive_pairs", &pairs)?;
        s.register(&[
            "config.toml".into(),
            "data/lexicon.json".into(),
            "data/train.jsonl".into(),
            "data/test.jsonl".into(),
            "data/contrastive.jsonl".into(),
        ])?;
        log::info!(
            "generated {} train, {} test, {} contrastive items",
            corpus.train.len(),
            corpus.test.len(),
            pairs.len()
        );
        Ok(())
    }

    pub fn load_world(&self) -> Result<World> {
        let missing: Vec<String> = ["data/lexicon.json", "data/train.jsonl", "data/test.jsonl", "data/contrastive.jsonl"]
            .into_iter()
            .filter(|f| !self.store.exists(f))
            .map(String::from)
            .collect();
        if !missing.is_empty() {
            return Err(CliError::Missing(missing));
        }
        let lexicon: Lexicon = self.store.read_json("data/lexicon.json", "lexicon")?;
        Ok(World {
            vocab: Vocabulary::for_lexicon(&lexicon),
            train: self.store.read_lines("data/train.jsonl", "train_samples")?,
            test: self.store.read_lines("data/test.jsonl", "test_samples")?,
            pairs: self.store.read_lines("data/contrastive.jsonl", "contrastive_pairs")?,
            lexicon,
        })
    }

    /// Trains `variant` (all variants when `None`) for the given seed (all
    /// configured seeds when `None`). An interrupted run resumes from its
    /// last checkpoint.
    pub fn train(&self, variant: Option<Variant>, seed: Option<u64>) -> Result<()> {
        self.train_limited(variant, seed, None)
    }

    /// Like [`Lab::train`], but each run stops after at most `step_limit`
    /// optimizer steps in this call, leaving a checkpoint to resume from.
    pub fn train_limited(&self, variant: Option<Variant>, seed: Option<u64>, step_limit: Option<usize>) -> Result<()> {
        let world = self.load_world()?;
        let variants = variant.map_or(Variant::ALL.to_vec(), |v| vec![v]);
        for seed in self.seeds(seed)? {
            for &v in &variants {
                self.train_one(&world, v, seed, step_limit)?;
            }
        }
        Ok(())
    }

    fn train_one(&self, world: &World, variant: Variant, seed: u64, step_limit: Option<usize>) -> Result<()> {
        let dir = run_dir(seed, variant);
        let recipe = self.config.recipe(variant, seed);
        if self.finished(&dir)? {
            log::info!("{dir}: already trained, skipping");
            return Ok(());
        }
        if !self.store.exists(&format!("{dir}/checkpoint.bin")) && !self.pretrain(world, seed, step_limit)? {
            log::info!("{dir}: waiting for {} to finish", pretrain_dir(seed));
            return Ok(());
        }
        let init = || -> Result<(Parameters<f32>, Vec<f64>)> {
            let base = self.pretrained(world, seed)?;
            let streams: Vec<Vec<TokenId>> = world
                .train
                .iter()
                .filter(|x| !x.units.is_empty())
                .map(|x| world.vocab.units_to_tokens(x.units.as_slice()))
                .collect();
            let adapted = adapt_embeddings(&base, &streams, &self.config.adaptation)?;
            Ok((adapted.params, adapted.losses))
        };
        self.fit(world, &dir, variant.as_str(), &world.train, &recipe, seed, step_limit, init)?;
        Ok(())
    }

    /// Runs the text-only stage (T2TT samples only) for `seed`; it stands in
    /// for a pretrained language model shared by every variant of a seed.
    /// Returns whether it is complete.
    fn pretrain(&self, world: &World, seed: u64, step_limit: Option<usize>) -> Result<bool> {
        let dir = pretrain_dir(seed);
        if self.config.pretrain.steps == 0 || self.finished(&dir)? {
            return Ok(true);
        }
        let text: Vec<Sample> = world
            .train
            .iter()
            .filter(|s| s.format == SampleFormat::T2tt)
            .cloned()
            .collect();
        let mut recipe = TrainingRecipe::for_variant(Variant::Base);
        recipe.optimizer = OptimizerSettings {
            seed,
            ..self.config.pretrain.clone()
        };
        let init = || Ok((self.fresh_parameters(world, seed)?, Vec::new()));
        self.fit(world, &dir, "pretrain", &text, &recipe, seed, step_limit, init)
    }

    fn fresh_parameters(&self, world: &World, seed: u64) -> Result<Parameters<f32>> {
        Ok(Parameters::<f32>::init(&self.config.model_config(seed, world.vocab.size()))?)
    }

    /// Parameters the variants of `seed` start from: the finished text stage,
    /// or the fresh initialization when pretraining is disabled.
    fn pretrained(&self, world: &World, seed: u64) -> Result<Parameters<f32>> {
        if self.config.pretrain.steps == 0 {
            return self.fresh_parameters(world, seed);
        }
        let dir = pretrain_dir(seed);
        Ok(Checkpoint::load(&self.store.path(&format!("{dir}/checkpoint.bin")))?.params)
    }

    /// True when `dir` holds a summary whose checkpoint digest still matches.
    fn finished(&self, dir: &str) -> Result<bool> {
        let s = &self.store;
        let (ck_rel, summary_rel) = (format!("{dir}/checkpoint.bin"), format!("{dir}/train.json"));
        if !(s.exists(&summary_rel) && s.exists(&ck_rel)) {
            return Ok(false);
        }
        let done: TrainSummary = s.read_json(&summary_rel, "train_summary")?;
        if crate::store::sha256_file(&s.path(&ck_rel))? == done.checkpoint_sha256 {
            return Ok(true);
        }
        log::warn!("{dir}: checkpoint does not match train.json, retraining");
        Ok(false)
    }

    /// Trains `recipe` over `corpus` into `dir`, resuming from an unfinished
    /// checkpoint there or starting from `init` (parameters plus any
    /// adaptation losses to record). Returns whether the run is complete.
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &self,
        world: &World,
        dir: &str,
        run: &str,
        corpus: &[Sample],
        recipe: &TrainingRecipe,
        seed: u64,
        step_limit: Option<usize>,
        init: impl FnOnce() -> Result<(Parameters<f32>, Vec<f64>)>,
    ) -> Result<bool> {
        let started = Instant::now();
        let (ck_rel, metrics_rel, summary_rel, adapt_rel) = (
            format!("{dir}/checkpoint.bin"),
            format!("{dir}/metrics.jsonl"),
            format!("{dir}/train.json"),
            format!("{dir}/adaptation.json"),
        );
        let s = &self.store;
        let root = s.path(dir);
        std::fs::create_dir_all(&root).map_err(|e| cotlab::LabError::io(&root, e))?;

        let resumable = s.exists(&ck_rel) && !s.exists(&summary_rel);
        let (mut trainer, mut history, adaptation_losses) = if resumable {
            let ck = Checkpoint::load(&s.path(&ck_rel))?;
            let history: Vec<StepMetrics> = s.read_lines(&metrics_rel, "metrics")?;
            let adapt: Vec<f64> = if s.exists(&adapt_rel) {
                s.read_json(&adapt_rel, "adaptation_losses")?
            } else {
                Vec::new()
            };
            if history.len() != ck.step {
                return Err(CliError::Config(format!(
                    "{metrics_rel} has {} steps but the checkpoint is at step {}",
                    history.len(),
                    ck.step
                )));
            }
            log::info!("{dir}: resuming at step {}", ck.step);
            (Trainer::from_checkpoint(ck, recipe)?, history, adapt)
        } else {
            if s.exists(&summary_rel) {
                std::fs::remove_file(s.path(&summary_rel))
                    .map_err(|e| cotlab::LabError::io(s.path(&summary_rel), e))?;
            }
            let (params, adapt) = init()?;
            if !adapt.is_empty() {
                s.write_json(&adapt_rel, "adaptation_losses", &adapt)?;
            }
            (Trainer::new(params, recipe)?, Vec::new(), adapt)
        };

        let mut stream = build_mixture(corpus, &world.vocab, &world.lexicon, recipe)?;
        stream.skip_items((trainer.step * recipe.optimizer.batch_size) as u64)?;
        let mut budget = step_limit.unwrap_or(usize::MAX);
        while !trainer.finished() {
            if budget == 0 {
                trainer.checkpoint().save(&s.path(&ck_rel))?;
                s.write_lines(&metrics_rel, "metrics", &history)?;
                log::info!("{dir}: paused at step {}", trainer.step);
                return Ok(false);
            }
            budget -= 1;
            let m = trainer.step_once(&mut stream)?;
            if m.step % 100 == 0 {
                log::info!("{dir}: step {} loss {:.4} lr {:.2e}", m.step, m.loss, m.lr);
            }
            history.push(m);
            if trainer.step % CHECKPOINT_EVERY == 0 && !trainer.finished() {
                trainer.checkpoint().save(&s.path(&ck_rel))?;
                s.write_lines(&metrics_rel, "metrics", &history)?;
            }
        }
        let ck = trainer.checkpoint();
        let ck_path = s.path(&ck_rel);
        ck.save(&ck_path)?;
        s.write_lines(&metrics_rel, "metrics", &history)?;
        let summary = TrainSummary {
            run: run.to_string(),
            seed,
            steps: history.len(),
            final_loss: history.last().map_or(f64::NAN, |m| m.loss),
            parameters: trainer.params.num_parameters(),
            adaptation_losses,
            checkpoint_sha256: crate::store::sha256_file(&ck_path)?,
        };
        s.write_json(&summary_rel, "train_summary", &summary)?;
        let mut files = vec![ck_rel, metrics_rel, summary_rel];
        if s.exists(&adapt_rel) {
            files.push(adapt_rel);
        }
        s.register(&files)?;
        log::info!(
            "{dir}: trained {} steps in {:.0?}, final loss {:.4}",
            summary.steps,
            started.elapsed(),
            summary.final_loss
        );
        Ok(true)
    }

    pub fn load_params(&self, variant: Variant, seed: u64) -> Result<Parameters<f32>> {
        let dir = run_dir(seed, variant);
        let summary = format!("{dir}/train.json");
        if !self.store.exists(&summary) {
            return Err(CliError::Missing(vec![format!("{dir}/checkpoint.bin")]));
        }
        let _: TrainSummary = self.store.read_json(&summary, "train_summary")?;
        Ok(Checkpoint::load(&self.store.path(&format!("{dir}/checkpoint.bin")))?.params)
    }

    pub fn eval(&self, variant: Option<Variant>, suite: Option<Suite>, seed: Option<u64>) -> Result<()> {
        let world = self.load_world()?;
        let variants = variant.map_or(Variant::ALL.to_vec(), |v| vec![v]);
        let suites = suite.map_or(Suite::ALL.to_vec(), |s| vec![s]);
        for seed in self.seeds(seed)? {
            for &v in &variants {
                let params = self.load_params(v, seed)?;
                for &suite in &suites {
                    let started = Instant::now();
                    self.eval_one(&world, &params, v, seed, suite)?;
                    log::info!(
                        "{}: {} suite in {:.0?}",
                        run_dir(seed, v),
                        suite.as_str(),
                        started.elapsed()
                    );
                }
            }
        }
        Ok(())
    }

    fn eval_one(
        &self,
        world: &World,
        params: &Parameters<f32>,
        variant: Variant,
        seed: u64,
        suite: Suite,
    ) -> Result<()> {
        let c = &self.config;
        let decode = c.decode_for(seed);
        let system = ModelSystem {
            params,
            vocab: &world.vocab,
            config: decode.clone(),
        };
        let rel = suite_file(seed, variant, suite);
        let mut written = vec![rel.clone()];
        let s = &self.store;
        match suite {
            Suite::Quality => {
                let decode_digest = hex::encode(Sha256::digest(
                    serde_json::to_vec(&decode).expect("decode config serializes"),
                ));
                let mut reports = Vec::new();
                let mut records = Vec::new();
                for mode in [RunMode::Cot, RunMode::Cascade, RunMode::Direct] {
                    let (report, runs) = evaluate_quality_runs(&system, &world.test, mode)?;
                    records.extend(runs.into_iter().enumerate().map(|(item, r)| RunRecord {
                        mode,
                        item,
                        transcript: r.transcript,
                        translation: r.translation,
                        truncated: r.truncated,
                        decode_digest: decode_digest.clone(),
                    }));
                    reports.push(report);
                }
                let runs_rel = format!("{}/runs-quality.jsonl", run_dir(seed, variant));
                s.write_lines(&runs_rel, "run_records", &records)?;
                written.push(runs_rel);
                s.write_json(&rel, "quality", &QualitySuite { reports })?;
            }
            Suite::Robustness => {
                let curves = [RunMode::Cot, RunMode::Cascade]
                    .into_iter()
                    .map(|mode| {
                        robustness_sweep(
                            &system,
                            &world.lexicon,
                            &world.test,
                            &c.evaluation.ratios,
                            mode,
                            c.data_seed,
                        )
                    })
                    .collect::<cotlab::Result<Vec<_>>>()?;
                s.write_json(&rel, "robustness", &RobustnessSuite { curves })?;
            }
            Suite::Attribution => {
                let n = c.evaluation.attribution_items.min(world.test.len());
                let items = &world.test[..n];
                let mut modes = Vec::new();
                for mode in [RunMode::Cot, RunMode::Cascade] {
                    let scored = attribution_suite(&system, params, items, mode, c.evaluation.distance)?;
                    modes.push(AttributionMode {
                        mode,
                        items_requested: n,
                        mean: mean_attribution(&scored).ok(),
                        items: scored,
                    });
                }
                s.write_json(&rel, "attribution", &AttributionSuite { modes })?;
            }
            Suite::Prosody => {
                let reports = [RunMode::Cot, RunMode::Cascade, RunMode::Direct]
                    .into_iter()
                    .map(|mode| contrastive_eval(&system, &world.pairs, mode))
                    .collect::<cotlab::Result<Vec<_>>>()?;
                s.write_json(&rel, "prosody", &ProsodySuite { reports })?;
            }
        }
        s.register(&written)
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<PathBuf> {
        self.gen()?;
        self.train(None, None)?;
        self.eval(None, None, None)?;
        self.report()
    }
}
