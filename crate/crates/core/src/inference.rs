//! Decoding and the three translation strategies.
//!
//! * CoT: transcribe, then translate in the same context, speech still visible.
//! * Cascade: transcribe, then translate in a fresh context holding only the
//!   transcript.
//! * Direct: translate straight from the speech units.
//!
//! The second CoT turn is written by the template, mirroring the training
//! layout; only assistant turns are generated.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{next_token_logits, Parameters};
use crate::synthworld::{stream_rng, LangId, UnitId, WordId};
use crate::training::{PromptBuilder, PromptLayout, Region};
use crate::vocab::{TokenId, Vocabulary, END_OF_TURN};

const STREAM_DECODE: u64 = 0xdec0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Sample,
    BeamSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beams: usize,
    pub temperature: f64,
    pub top_p: f64,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            beams: 1,
            temperature: 0.2,
            top_p: 0.95,
            top_k: 50,
            max_new_tokens: 32,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beams == 0 {
            return Err(LabError::Config("beams must be at least 1".into()));
        }
        if self.strategy != Strategy::Greedy
            && !(self.temperature > 0.0 && self.top_p > 0.0 && self.top_p <= 1.0)
        {
            return Err(LabError::Config(
                "sampling needs temperature > 0 and top_p in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    /// Generated tokens, without the closing end-of-turn token.
    pub tokens: Vec<TokenId>,
    /// True when generation stopped on the token budget or context limit
    /// rather than an end-of-turn token.
    pub truncated: bool,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Log-probabilities after temperature, top-k and top-p filtering, in that
/// order. Filtered entries are `-inf`.
pub fn filtered_log_probs(logits: &[f64], config: &DecodeConfig) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&x| x / config.temperature).collect();
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
    let mut keep = vec![true; scaled.len()];
    if config.top_k > 0 {
        for &i in order.iter().skip(config.top_k) {
            keep[i] = false;
        }
    }
    let max = scaled[order[0]];
    let kept_mass: f64 = (0..scaled.len())
        .filter(|&i| keep[i])
        .map(|i| (scaled[i] - max).exp())
        .sum();
    let mut cumulative = 0.0;
    let mut reached = false;
    for &i in &order {
        if !keep[i] {
            continue;
        }
        if reached {
            keep[i] = false;
            continue;
        }
        cumulative += (scaled[i] - max).exp() / kept_mass;
        reached = cumulative >= config.top_p;
    }
    let z: f64 = (0..scaled.len())
        .filter(|&i| keep[i])
        .map(|i| (scaled[i] - max).exp())
        .sum();
    let log_z = max + z.ln();
    (0..scaled.len())
        .map(|i| if keep[i] { scaled[i] - log_z } else { f64::NEG_INFINITY })
        .collect()
}

fn logits_f64(params: &Parameters<f32>, context: &[TokenId]) -> Result<Vec<f64>> {
    Ok(next_token_logits(params, context)?
        .iter()
        .map(|&x| x as f64)
        .collect())
}

fn budget(params: &Parameters<f32>, prefix: &[TokenId], config: &DecodeConfig) -> usize {
    config
        .max_new_tokens
        .min(params.config.max_context.saturating_sub(prefix.len()))
}

fn decode_chain<R: Rng + ?Sized>(
    params: &Parameters<f32>,
    prefix: &[TokenId],
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<Decoded> {
    let mut context = prefix.to_vec();
    let limit = budget(params, prefix, config);
    for _ in 0..limit {
        let logits = logits_f64(params, &context)?;
        let next = match config.strategy {
            Strategy::Greedy => argmax(&logits),
            _ => {
                let probs: Vec<f64> = filtered_log_probs(&logits, config)
                    .into_iter()
                    .map(f64::exp)
                    .collect();
                WeightedIndex::new(&probs)
                    .map_err(|e| LabError::Data(format!("degenerate sampling distribution: {e}")))?
                    .sample(rng)
            }
        } as TokenId;
        if next == END_OF_TURN {
            return Ok(Decoded {
                tokens: context[prefix.len()..].to_vec(),
                truncated: false,
            });
        }
        context.push(next);
    }
    Ok(Decoded {
        tokens: context[prefix.len()..].to_vec(),
        truncated: true,
    })
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Multinomial beam search: each step samples `2 × beams` continuations
/// without replacement from the joint beam distribution and keeps the best
/// `beams` unfinished ones. Hypotheses are ranked by length-normalized
/// log-probability.
fn decode_beam_sample<R: Rng + ?Sized>(
    params: &Parameters<f32>,
    prefix: &[TokenId],
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<Decoded> {
    let limit = budget(params, prefix, config);
    let mut live: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
    for _ in 0..limit {
        let mut candidates = Vec::new();
        for (b, (tokens, score)) in live.iter().enumerate() {
            let mut context = prefix.to_vec();
            context.extend_from_slice(tokens);
            let lp = filtered_log_probs(&logits_f64(params, &context)?, config);
            for (tok, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    let total = score + l;
                    candidates.push((total + gumbel(rng), total, b, tok as TokenId));
                }
            }
        }
        candidates.sort_by(|x, y| y.0.total_cmp(&x.0));
        candidates.truncate(2 * config.beams);
        candidates.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.2.cmp(&y.2)).then(x.3.cmp(&y.3)));
        let mut next = Vec::new();
        for (_, total, b, tok) in candidates {
            if tok == END_OF_TURN {
                finished.push((live[b].0.clone(), total));
            } else if next.len() < config.beams {
                let mut t = live[b].0.clone();
                t.push(tok);
                next.push((t, total));
            }
        }
        live = next;
        if finished.len() >= config.beams || live.is_empty() {
            break;
        }
    }
    let normalized = |(t, s): &(Vec<TokenId>, f64)| s / (t.len() + 1) as f64;
    let pick = |pool: &[(Vec<TokenId>, f64)]| {
        pool.iter()
            .max_by(|a, b| normalized(a).total_cmp(&normalized(b)))
            .map(|(t, _)| t.clone())
    };
    if let Some(tokens) = pick(&finished) {
        return Ok(Decoded {
            tokens,
            truncated: false,
        });
    }
    Ok(Decoded {
        tokens: pick(&live).unwrap_or_default(),
        truncated: true,
    })
}

/// Generates one assistant turn after `prefix` with an explicit random source.
pub fn decode_with_rng<R: Rng + ?Sized>(
    params: &Parameters<f32>,
    prefix: &[TokenId],
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<Decoded> {
    config.validate()?;
    if prefix.len() > params.config.max_context {
        return Err(LabError::Overlength {
            len: prefix.len(),
            max: params.config.max_context,
        });
    }
    match config.strategy {
        Strategy::BeamSample => decode_beam_sample(params, prefix, config, rng),
        _ => decode_chain(params, prefix, config, rng),
    }
}

/// Generates one assistant turn, seeding from `config.seed`.
pub fn decode(params: &Parameters<f32>, prefix: &[TokenId], config: &DecodeConfig) -> Result<Decoded> {
    decode_with_rng(params, prefix, config, &mut stream_rng(config.seed, STREAM_DECODE))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Cot,
    Cascade,
    Direct,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Cot => "cot",
            RunMode::Cascade => "cascade",
            RunMode::Direct => "direct",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationRun {
    pub mode: RunMode,
    /// Absent for direct runs.
    pub transcript: Option<Vec<TokenId>>,
    pub translation: Vec<TokenId>,
    /// Final translation-generation context, including the generated
    /// translation and its end-of-turn token when one was produced.
    pub prompt: Vec<TokenId>,
    pub layout: PromptLayout,
    pub truncated: bool,
}

/// Anything that can translate speech units; implemented by the model and by
/// test oracles.
pub trait S2ttSystem {
    fn vocab(&self) -> &Vocabulary;

    fn run(&self, mode: RunMode, units: &[UnitId], language: LangId) -> Result<TranslationRun>;

    /// Translation with a given transcript: CoT keeps the speech in context,
    /// cascade sees only the transcript. Direct is not a forced mode.
    fn run_forced(
        &self,
        mode: RunMode,
        units: &[UnitId],
        transcript: &[WordId],
        language: LangId,
    ) -> Result<TranslationRun>;
}

/// A trained model paired with its vocabulary and decoding settings.
#[derive(Clone, Debug)]
pub struct ModelSystem<'a> {
    pub params: &'a Parameters<f32>,
    pub vocab: &'a Vocabulary,
    pub config: DecodeConfig,
}

impl S2ttSystem for ModelSystem<'_> {
    fn vocab(&self) -> &Vocabulary {
        self.vocab
    }

    fn run(&self, mode: RunMode, units: &[UnitId], language: LangId) -> Result<TranslationRun> {
        let (p, v, c) = (self.params, self.vocab, &self.config);
        match mode {
            RunMode::Cot => run_cot(p, v, units, language, c),
            RunMode::Cascade => run_cascade(p, v, units, language, c),
            RunMode::Direct => run_direct(p, v, units, language, c),
        }
    }

    fn run_forced(
        &self,
        mode: RunMode,
        units: &[UnitId],
        transcript: &[WordId],
        language: LangId,
    ) -> Result<TranslationRun> {
        let (p, v, c) = (self.params, self.vocab, &self.config);
        let transcript = v.words_to_tokens(transcript);
        match mode {
            RunMode::Cot => run_cot_forced(p, v, units, &transcript, language, c),
            RunMode::Cascade => run_cascade_forced(p, v, &transcript, language, c),
            RunMode::Direct => Err(LabError::Config(
                "direct translation has no transcript to force".into(),
            )),
        }
    }
}

fn check_language(vocab: &Vocabulary, language: LangId) -> Result<()> {
    if language as usize >= vocab.n_languages {
        return Err(LabError::Data(format!("unknown target language {language}")));
    }
    Ok(())
}

/// Generates the final translation turn of `b` and packages the run.
fn finish_translation<R: Rng + ?Sized>(
    params: &Parameters<f32>,
    mut b: PromptBuilder<'_>,
    mode: RunMode,
    transcript: Option<Vec<TokenId>>,
    earlier_truncation: bool,
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<TranslationRun> {
    b.open_assistant();
    let out = decode_with_rng(params, b.tokens(), config, rng)?;
    b.assistant_content(Region::Translation, &out.tokens, 0.0);
    if !out.truncated {
        b.close_assistant(0.0);
    }
    let prompt = b.finish();
    Ok(TranslationRun {
        mode,
        transcript,
        translation: out.tokens,
        prompt: prompt.tokens,
        layout: prompt.layout,
        truncated: out.truncated || earlier_truncation,
    })
}

/// Writes `U units TRANSCRIBE E A` and decodes the transcript turn.
fn transcribe<'v, R: Rng + ?Sized>(
    params: &Parameters<f32>,
    vocab: &'v Vocabulary,
    units: &[UnitId],
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<(PromptBuilder<'v>, Decoded)> {
    let mut b = PromptBuilder::new(vocab);
    let instr = b.transcribe_instruction();
    b.user_turn(Region::Speech, &vocab.units_to_tokens(units), &instr);
    b.open_assistant();
    let out = decode_with_rng(params, b.tokens(), config, rng)?;
    Ok((b, out))
}

fn cot_translate_turn(b: &mut PromptBuilder<'_>, transcript: &[TokenId], language: LangId) {
    b.assistant_content(Region::Transcription, transcript, 0.0);
    b.close_assistant(0.0);
    let instr = b.translate_instruction(language);
    b.user_turn(Region::Speech, &[], &instr);
}

pub fn run_cot(
    params: &Parameters<f32>,
    vocab: &Vocabulary,
    units: &[UnitId],
    language: LangId,
    config: &DecodeConfig,
) -> Result<TranslationRun> {
    check_language(vocab, language)?;
    let mut rng = stream_rng(config.seed, STREAM_DECODE);
    let (mut b, stage1) = transcribe(params, vocab, units, config, &mut rng)?;
    cot_translate_turn(&mut b, &stage1.tokens, language);
    let t = Some(stage1.tokens);
    finish_translation(params, b, RunMode::Cot, t, stage1.truncated, config, &mut rng)
}

pub fn run_cascade(
    params: &Parameters<f32>,
    vocab: &Vocabulary,
    units: &[UnitId],
    language: LangId,
    config: &DecodeConfig,
) -> Result<TranslationRun> {
    check_language(vocab, language)?;
    let mut rng = stream_rng(config.seed, STREAM_DECODE);
    let (_, stage1) = transcribe(params, vocab, units, config, &mut rng)?;
    let mut b = PromptBuilder::new(vocab);
    let instr = b.translate_instruction(language);
    b.user_turn(Region::Transcription, &stage1.tokens, &instr);
    let t = Some(stage1.tokens);
    finish_translation(params, b, RunMode::Cascade, t, stage1.truncated, config, &mut rng)
}

pub fn run_direct(
    params: &Parameters<f32>,
    vocab: &Vocabulary,
    units: &[UnitId],
    language: LangId,
    config: &DecodeConfig,
) -> Result<TranslationRun> {
    check_language(vocab, language)?;
    let mut rng = stream_rng(config.seed, STREAM_DECODE);
    let mut b = PromptBuilder::new(vocab);
    let instr = b.translate_instruction(language);
    b.user_turn(Region::Speech, &vocab.units_to_tokens(units), &instr);
    finish_translation(params, b, RunMode::Direct, None, false, config, &mut rng)
}

/// CoT translation with `transcript` (tokens) written into the first
/// assistant turn in place of the model's own transcript.
pub fn run_cot_forced(
    params: &Parameters<f32>,
    vocab: &Vocabulary,
    units: &[UnitId],
    transcript: &[TokenId],
    language: LangId,
    config: &DecodeConfig,
) -> Result<TranslationRun> {
    check_language(vocab, language)?;
    let mut rng = stream_rng(config.seed, STREAM_DECODE);
    let mut b = PromptBuilder::new(vocab);
    let instr = b.transcribe_instruction();
    b.user_turn(Region::Speech, &vocab.units_to_tokens(units), &instr);
    b.open_assistant();
    cot_translate_turn(&mut b, transcript, language);
    let t = Some(transcript.to_vec());
    finish_translation(params, b, RunMode::Cot, t, false, config, &mut rng)
}

/// Second cascade stage alone, on a given transcript.
pub fn run_cascade_forced(
    params: &Parameters<f32>,
    vocab: &Vocabulary,
    transcript: &[TokenId],
    language: LangId,
    config: &DecodeConfig,
) -> Result<TranslationRun> {
    check_language(vocab, language)?;
    let mut rng = stream_rng(config.seed, STREAM_DECODE);
    let mut b = PromptBuilder::new(vocab);
    let instr = b.translate_instruction(language);
    b.user_turn(Region::Transcription, transcript, &instr);
    let t = Some(transcript.to_vec());
    finish_translation(params, b, RunMode::Cascade, t, false, config, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn setup() -> (Parameters<f32>, Vocabulary) {
        let vocab = Vocabulary {
            n_languages: 2,
            n_units: 13,
            n_words: 6,
            target_size: 7,
        };
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: vocab.size(),
            max_context: 64,
            seed: 11,
            tie_embeddings: false,
        };
        let mut params = Parameters::init(&cfg).unwrap();
        // Sharpen the random model so sampled continuations vary.
        params.output_projection.as_mut().unwrap().mapv_inplace(|x| x * 40.0);
        (params, vocab)
    }

    fn sampling(seed: u64) -> DecodeConfig {
        DecodeConfig {
            strategy: Strategy::Sample,
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
            seed,
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn filters_compose() {
        let logits = [2.0, 1.0, 0.5, 0.0, -1.0];
        let cfg = DecodeConfig {
            temperature: 1.0,
            top_k: 3,
            top_p: 1.0,
            ..DecodeConfig::default()
        };
        let lp = filtered_log_probs(&logits, &cfg);
        assert!(lp[3].is_infinite() && lp[4].is_infinite());
        let total: f64 = lp.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);

        let cfg = DecodeConfig {
            temperature: 1.0,
            top_k: 0,
            top_p: 0.5,
            ..DecodeConfig::default()
        };
        let lp = filtered_log_probs(&logits, &cfg);
        // The top token alone carries more than half the mass.
        assert_eq!(lp.iter().filter(|x| x.is_finite()).count(), 1);
        assert_eq!(lp[0], 0.0);
    }

    #[test]
    fn top_k_one_and_cold_sampling_match_greedy() {
        let (params, _) = setup();
        let prefix = [0, 1, 20, 21, 4, 3, 2];
        let greedy = decode(&params, &prefix, &DecodeConfig::default()).unwrap();
        for seed in 0..5 {
            let k1 = DecodeConfig {
                top_k: 1,
                ..sampling(seed)
            };
            let cold = DecodeConfig {
                temperature: 1e-6,
                ..sampling(seed)
            };
            assert_eq!(decode(&params, &prefix, &k1).unwrap(), greedy);
            assert_eq!(decode(&params, &prefix, &cold).unwrap(), greedy);
        }
    }

    #[test]
    fn seeded_sampling_is_deterministic_and_seed_dependent() {
        let (params, _) = setup();
        let prefix = [0, 1, 20, 4, 3, 2];
        let outs: Vec<Decoded> = (0..8)
            .map(|s| decode(&params, &prefix, &sampling(s)).unwrap())
            .collect();
        for (s, out) in outs.iter().enumerate() {
            assert_eq!(&decode(&params, &prefix, &sampling(s as u64)).unwrap(), out);
        }
        assert!(outs.iter().any(|o| o != &outs[0]));
        let beam = DecodeConfig {
            strategy: Strategy::BeamSample,
            beams: 3,
            ..sampling(3)
        };
        assert_eq!(
            decode(&params, &prefix, &beam).unwrap(),
            decode(&params, &prefix, &beam).unwrap()
        );
    }

    #[test]
    fn budget_and_context_limits_truncate() {
        let (params, _) = setup();
        let cfg = DecodeConfig {
            max_new_tokens: 2,
            ..DecodeConfig::default()
        };
        let out = decode(&params, &[0, 1], &cfg).unwrap();
        assert!(out.tokens.len() <= 2);
        assert_eq!(out.truncated, out.tokens.len() == 2);
        let full = vec![0; 64];
        let out = decode(&params, &full, &DecodeConfig::default()).unwrap();
        assert!(out.tokens.is_empty() && out.truncated);
        assert!(decode(&params, &vec![0; 65], &DecodeConfig::default()).is_err());
    }

    #[test]
    fn run_layouts_and_cascade_blindness() {
        let (params, vocab) = setup();
        let units = [1, 2, 12, 3];
        let cfg = DecodeConfig {
            max_new_tokens: 5,
            ..DecodeConfig::default()
        };
        let cot = run_cot(&params, &vocab, &units, 1, &cfg).unwrap();
        let cas = run_cascade(&params, &vocab, &units, 1, &cfg).unwrap();
        let dir = run_direct(&params, &vocab, &units, 1, &cfg).unwrap();
        assert!(cot.layout.has(Region::Speech));
        assert!(!dir.layout.has(Region::Transcription));
        assert!(dir.transcript.is_none());
        assert_eq!(cot.transcript, cas.transcript);
        assert!(cas.prompt.iter().all(|&t| !vocab.is_unit(t)));
        assert_eq!(cot.layout.len, cot.prompt.len());

        let own = cot.transcript.clone().unwrap();
        let forced = run_cot_forced(&params, &vocab, &units, &own, 1, &cfg).unwrap();
        assert_eq!(forced.translation, cot.translation);
        assert_eq!(forced.prompt, cot.prompt);
        let stage2 = run_cascade_forced(&params, &vocab, &own, 1, &cfg).unwrap();
        assert_eq!(stage2.translation, cas.translation);
        assert!(run_cot(&params, &vocab, &units, 2, &cfg).is_err());
    }
}
