//! Evaluation: word error rate, slot/intent semantic error rate with its
//! chunk-level counting rules, utterance-level error rates, and relative
//! error-rate reduction arithmetic.

use serde::Serialize;

use crate::data::Utterance;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty reference sequence")]
    EmptyReference,
    #[error("empty utterance set")]
    EmptySet,
    #[error("token and slot sequences differ in length ({tokens} vs {slots})")]
    LengthMismatch { tokens: usize, slots: usize },
    #[error("reference and prediction counts differ ({refs} vs {preds})")]
    CountMismatch { refs: usize, preds: usize },
    #[error("relative reduction needs a positive baseline, got {0}")]
    ZeroBaseline(f64),
}

/// Edit-distance operation counts from an optimal alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EditCounts {
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.insertions + self.deletions + self.substitutions
    }
}

/// Levenshtein alignment counts; cost ties prefer substitution, then
/// deletion, so the decomposition is deterministic.
pub fn edit_counts(reference: &[usize], hypothesis: &[usize]) -> EditCounts {
    let cols = hypothesis.len() + 1;
    let mut prev: Vec<(usize, EditCounts)> = (0..cols)
        .map(|j| {
            (
                j,
                EditCounts {
                    insertions: j,
                    ..EditCounts::default()
                },
            )
        })
        .collect();
    for i in 1..=reference.len() {
        let mut row = vec![(0usize, EditCounts::default()); cols];
        row[0] = (
            i,
            EditCounts {
                deletions: i,
                ..EditCounts::default()
            },
        );
        for j in 1..=hypothesis.len() {
            let matched = reference[i - 1] == hypothesis[j - 1];
            let diag = {
                let (cost, mut counts) = prev[j - 1];
                if !matched {
                    counts.substitutions += 1;
                }
                (cost + usize::from(!matched), counts)
            };
            let del = {
                let (cost, mut counts) = prev[j];
                counts.deletions += 1;
                (cost + 1, counts)
            };
            let ins = {
                let (cost, mut counts) = row[j - 1];
                counts.insertions += 1;
                (cost + 1, counts)
            };
            let mut best = diag;
            for cand in [del, ins] {
                if cand.0 < best.0 {
                    best = cand;
                }
            }
            row[j] = best;
        }
        prev = row;
    }
    prev[cols - 1].1
}

/// Word error rate: edit operations over the reference length.
pub fn wer(reference: &[usize], hypothesis: &[usize]) -> Result<f64, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    Ok(edit_counts(reference, hypothesis).total() as f64 / reference.len() as f64)
}

/// A maximal run of tokens sharing one non-Other slot tag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotChunk {
    pub tag: usize,
    pub value: Vec<usize>,
}

/// Groups consecutive equal non-Other tags into chunks; Other tokens are
/// not scored.
pub fn slot_chunks(
    tokens: &[usize],
    slots: &[usize],
    other: usize,
) -> Result<Vec<SlotChunk>, MetricsError> {
    if tokens.len() != slots.len() {
        return Err(MetricsError::LengthMismatch {
            tokens: tokens.len(),
            slots: slots.len(),
        });
    }
    let mut chunks: Vec<SlotChunk> = Vec::new();
    for i in 0..tokens.len() {
        let tag = slots[i];
        if tag == other {
            continue;
        }
        // Adjacency decides chunk membership: an equal tag after a gap
        // starts a fresh chunk.
        if i > 0 && slots[i - 1] == tag {
            chunks.last_mut().expect("previous position opened a chunk").value.push(tokens[i]);
        } else {
            chunks.push(SlotChunk {
                tag,
                value: vec![tokens[i]],
            });
        }
    }
    Ok(chunks)
}

/// Slot-chunk and intent error counts for one utterance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SemErrCounts {
    pub correct: usize,
    pub deletion: usize,
    pub insertion: usize,
    pub substitution: usize,
}

impl SemErrCounts {
    pub fn has_error(&self) -> bool {
        self.deletion + self.insertion + self.substitution > 0
    }

    /// Error rate: (deletions + insertions + substitutions) over
    /// (correct + deletions + substitutions), with a floor of one on the
    /// denominator so chunk-free references stay finite.
    pub fn rate(&self) -> f64 {
        let numerator = (self.deletion + self.insertion + self.substitution) as f64;
        let denominator = (self.correct + self.deletion + self.substitution).max(1) as f64;
        numerator / denominator
    }

    pub fn add(&mut self, other: &SemErrCounts) {
        self.correct += other.correct;
        self.deletion += other.deletion;
        self.insertion += other.insertion;
        self.substitution += other.substitution;
    }
}

/// Semantic error rate for one utterance: chunks are matched greedily,
/// exact tag+value pairs first, then same-tag pairs as substitutions;
/// leftovers are deletions (reference side) or insertions (hypothesis
/// side); an intent mismatch adds one substitution.
#[allow(clippy::too_many_arguments)]
pub fn semer(
    ref_tokens: &[usize],
    ref_slots: &[usize],
    ref_intent: usize,
    hyp_tokens: &[usize],
    hyp_slots: &[usize],
    hyp_intent: usize,
    other: usize,
) -> Result<(f64, SemErrCounts), MetricsError> {
    let ref_chunks = slot_chunks(ref_tokens, ref_slots, other)?;
    let hyp_chunks = slot_chunks(hyp_tokens, hyp_slots, other)?;
    let mut hyp_used = vec![false; hyp_chunks.len()];
    let mut ref_matched = vec![false; ref_chunks.len()];
    let mut counts = SemErrCounts::default();

    for (ri, rc) in ref_chunks.iter().enumerate() {
        let exact = hyp_chunks
            .iter()
            .enumerate()
            .find(|(hi, hc)| !hyp_used[*hi] && hc.tag == rc.tag && hc.value == rc.value);
        if let Some((hi, _)) = exact {
            hyp_used[hi] = true;
            ref_matched[ri] = true;
            counts.correct += 1;
        }
    }
    for (ri, rc) in ref_chunks.iter().enumerate() {
        if ref_matched[ri] {
            continue;
        }
        let same_tag = hyp_chunks
            .iter()
            .enumerate()
            .find(|(hi, hc)| !hyp_used[*hi] && hc.tag == rc.tag);
        if let Some((hi, _)) = same_tag {
            hyp_used[hi] = true;
            counts.substitution += 1;
        } else {
            counts.deletion += 1;
        }
    }
    counts.insertion += hyp_used.iter().filter(|used| !**used).count();
    if ref_intent != hyp_intent {
        counts.substitution += 1;
    }
    Ok((counts.rate(), counts))
}

/// Fraction of utterances with any slot or intent error.
pub fn irer(per_utterance: &[SemErrCounts]) -> Result<f64, MetricsError> {
    if per_utterance.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let errors = per_utterance.iter().filter(|c| c.has_error()).count();
    Ok(errors as f64 / per_utterance.len() as f64)
}

/// Fraction of utterances whose predicted intent differs from the
/// reference.
pub fn icer(ref_intents: &[usize], hyp_intents: &[usize]) -> Result<f64, MetricsError> {
    if ref_intents.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    if ref_intents.len() != hyp_intents.len() {
        return Err(MetricsError::CountMismatch {
            refs: ref_intents.len(),
            preds: hyp_intents.len(),
        });
    }
    let wrong = ref_intents
        .iter()
        .zip(hyp_intents)
        .filter(|(r, h)| r != h)
        .count();
    Ok(wrong as f64 / ref_intents.len() as f64)
}

/// Relative error-rate reduction in percent: 100 * (baseline - candidate)
/// / baseline.
pub fn relative_reduction(baseline: f64, candidate: f64) -> Result<f64, MetricsError> {
    if baseline.is_nan() || baseline <= 0.0 {
        return Err(MetricsError::ZeroBaseline(baseline));
    }
    Ok(100.0 * (baseline - candidate) / baseline)
}

/// One decoded utterance to score against its reference.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub tokens: Vec<usize>,
    pub slots: Vec<usize>,
    pub intent: usize,
}

/// Per-utterance evaluation row.
#[derive(Clone, Debug, Serialize)]
pub struct UtteranceReport {
    pub index: usize,
    pub wer: f64,
    pub semer: f64,
    pub counts: SemErrCounts,
    pub intent_correct: bool,
}

/// Corpus-level evaluation: WER and SemER pool edit operations and chunk
/// counts across utterances; IRER and ICER average indicators.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub wer: f64,
    pub semer: f64,
    pub irer: f64,
    pub icer: f64,
    pub per_utterance: Vec<UtteranceReport>,
}

pub fn evaluate(
    references: &[Utterance],
    predictions: &[Prediction],
    other: usize,
) -> Result<EvalReport, MetricsError> {
    if references.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    if references.len() != predictions.len() {
        return Err(MetricsError::CountMismatch {
            refs: references.len(),
            preds: predictions.len(),
        });
    }
    let mut rows = Vec::with_capacity(references.len());
    let mut edit_ops = 0usize;
    let mut ref_tokens = 0usize;
    let mut pooled = SemErrCounts::default();
    let mut semer_counts = Vec::with_capacity(references.len());
    for (index, (r, p)) in references.iter().zip(predictions).enumerate() {
        if r.tokens.is_empty() {
            return Err(MetricsError::EmptyReference);
        }
        let ops = edit_counts(&r.tokens, &p.tokens);
        edit_ops += ops.total();
        ref_tokens += r.tokens.len();
        let (utt_semer, counts) = semer(
            &r.tokens, &r.slots, r.intent, &p.tokens, &p.slots, p.intent, other,
        )?;
        pooled.add(&counts);
        semer_counts.push(counts);
        rows.push(UtteranceReport {
            index,
            wer: ops.total() as f64 / r.tokens.len() as f64,
            semer: utt_semer,
            counts,
            intent_correct: r.intent == p.intent,
        });
    }
    let ref_intents: Vec<usize> = references.iter().map(|r| r.intent).collect();
    let hyp_intents: Vec<usize> = predictions.iter().map(|p| p.intent).collect();
    Ok(EvalReport {
        utterances: references.len(),
        wer: edit_ops as f64 / ref_tokens as f64,
        semer: pooled.rate(),
        irer: irer(&semer_counts)?,
        icer: icer(&ref_intents, &hyp_intents)?,
        per_utterance: rows,
    })
}
