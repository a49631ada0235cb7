use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{LabError, Result};
use crate::synthworld::{Corruption, Lexicon, Sample, SampleFormat, WordId};

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedTranscript {
    pub words: Vec<WordId>,
    pub span_start: usize,
    pub span_len: usize,
}

/// Number of words replaced at `ratio` in a transcript of `n` words.
pub fn corruption_span_len(ratio: f64, n: usize) -> usize {
    if ratio <= 0.0 || n == 0 {
        0
    } else {
        ((ratio * n as f64).round() as usize).clamp(1, n)
    }
}

/// Replaces one contiguous span of the transcript with different words.
///
/// Replacements avoid every word of the original transcript when the lexicon
/// allows it, and always differ from the word they replace. Length is kept.
pub fn corrupt_transcript<R: Rng + ?Sized>(
    transcript: &[WordId],
    ratio: f64,
    rng: &mut R,
    lexicon: &Lexicon,
) -> Result<CorruptedTranscript> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(LabError::Config(format!(
            "corruption ratio {ratio} outside [0, 1]"
        )));
    }
    if transcript.is_empty() {
        return Err(LabError::Data("cannot corrupt an empty transcript".into()));
    }
    let n = transcript.len();
    let span_len = corruption_span_len(ratio, n);
    if span_len == 0 {
        return Ok(CorruptedTranscript {
            words: transcript.to_vec(),
            span_start: 0,
            span_len: 0,
        });
    }
    let span_start = rng.random_range(0..=n - span_len);
    let unrelated: Vec<WordId> = (0..lexicon.n_words() as WordId)
        .filter(|w| !transcript.contains(w))
        .collect();
    let mut words = transcript.to_vec();
    for slot in &mut words[span_start..span_start + span_len] {
        let original = *slot;
        *slot = match unrelated.choose(rng) {
            Some(&w) => w,
            None => {
                let others: Vec<WordId> = (0..lexicon.n_words() as WordId)
                    .filter(|&w| w != original)
                    .collect();
                *others.choose(rng).ok_or_else(|| {
                    LabError::Config("lexicon too small to corrupt a transcript".into())
                })?
            }
        };
    }
    Ok(CorruptedTranscript {
        words,
        span_start,
        span_len,
    })
}

/// Turns a CoT sample into a noisy-CoT sample with a corrupted transcript.
pub fn corrupt_sample<R: Rng + ?Sized>(
    sample: &Sample,
    ratio: f64,
    rng: &mut R,
    lexicon: &Lexicon,
) -> Result<Sample> {
    let c = corrupt_transcript(&sample.transcript, ratio, rng, lexicon)?;
    Ok(Sample {
        transcript: c.words,
        format: SampleFormat::NoisyCot,
        corruption: Some(Corruption {
            ratio,
            span_start: c.span_start,
            span_len: c.span_len,
        }),
        ..sample.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{build_lexicon, stream_rng, LexiconSettings};
    use proptest::prelude::*;

    fn lexicon() -> Lexicon {
        build_lexicon(3, &LexiconSettings::default()).unwrap()
    }

    #[test]
    fn span_lengths() {
        assert_eq!(corruption_span_len(0.15, 20), 3);
        assert_eq!(corruption_span_len(0.025, 20), 1);
        assert_eq!(corruption_span_len(0.01, 4), 1);
        assert_eq!(corruption_span_len(0.0, 4), 0);
        assert_eq!(corruption_span_len(1.0, 4), 4);
    }

    #[test]
    fn zero_ratio_is_identity_and_full_ratio_replaces_all() {
        let lex = lexicon();
        let t = vec![1, 2, 3, 4, 5];
        let mut rng = stream_rng(0, 0);
        assert_eq!(corrupt_transcript(&t, 0.0, &mut rng, &lex).unwrap().words, t);
        let c = corrupt_transcript(&t, 1.0, &mut rng, &lex).unwrap();
        assert!(c.words.iter().zip(&t).all(|(a, b)| a != b));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let lex = lexicon();
        let mut rng = stream_rng(0, 0);
        assert!(corrupt_transcript(&[1], 1.5, &mut rng, &lex).is_err());
        assert!(corrupt_transcript(&[1], f64::NAN, &mut rng, &lex).is_err());
        assert!(corrupt_transcript(&[], 0.5, &mut rng, &lex).is_err());
    }

    proptest! {
        #[test]
        fn corruption_replaces_exactly_one_span(
            words in proptest::sample::subsequence((0u32..48).collect::<Vec<_>>(), 1..20),
            ratio in 0.0f64..=1.0,
            seed in 0u64..1000,
        ) {
            let lex = lexicon();
            let mut rng = stream_rng(seed, 1);
            let c = corrupt_transcript(&words, ratio, &mut rng, &lex).unwrap();
            prop_assert_eq!(c.words.len(), words.len());
            prop_assert_eq!(c.span_len, corruption_span_len(ratio, words.len()));
            let changed: Vec<usize> = (0..words.len()).filter(|&i| c.words[i] != words[i]).collect();
            prop_assert_eq!(changed.len(), c.span_len);
            if let (Some(&a), Some(&b)) = (changed.first(), changed.last()) {
                prop_assert_eq!(a, c.span_start);
                prop_assert_eq!(b - a + 1, c.span_len);
            }
        }
    }
}
