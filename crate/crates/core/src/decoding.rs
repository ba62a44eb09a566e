//! Inference: greedy decoding, frame-synchronous semantic beam search over
//! (word-piece, slot) candidate pairs, a streaming session with bitwise
//! one-shot equivalence, and an exhaustive enumeration oracle.

use serde::Serialize;

use crate::model::{DecoderState, EncoderState, ModelError, ModelParams, Session};
use crate::numerics::{logaddexp, NumericsError, Tensor, ValueId};

const MAX_EXHAUSTIVE_WORK: u128 = 1_000_000;

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no frames to decode")]
    NoFrames,
    #[error("bad beam config: {0}")]
    BadConfig(String),
    #[error("exhaustive search space {work} exceeds the limit {limit}")]
    SearchSpaceTooLarge { work: u128, limit: u128 },
    #[error("streaming session already finalized")]
    SessionFinalized,
}

/// Beam widths: per-step word-piece and slot shortlists, the per-hypothesis
/// candidate cap, and the global pool size. `max_emits_per_frame` bounds
/// label emissions between frame advances so untrained models terminate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct BeamConfig {
    pub b_wp: usize,
    pub b_slot: usize,
    pub b_local: usize,
    pub b_beam: usize,
    pub max_emits_per_frame: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            b_wp: 2,
            b_slot: 2,
            b_local: 4,
            b_beam: 8,
            max_emits_per_frame: 5,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let all = [
            ("b_wp", self.b_wp),
            ("b_slot", self.b_slot),
            ("b_local", self.b_local),
            ("b_beam", self.b_beam),
            ("max_emits_per_frame", self.max_emits_per_frame),
        ];
        for (name, v) in all {
            if v == 0 {
                return Err(DecodeError::BadConfig(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// One live search path: emitted labels, the accumulated log-score, the
/// decoder state after the last emission, and progress counters.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub slots: Vec<usize>,
    pub score: f64,
    pub state: DecoderState,
    pub frames_consumed: usize,
    emits_this_frame: usize,
}

/// One ranked output: label sequences plus the final log-score.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NBest {
    pub tokens: Vec<usize>,
    pub slots: Vec<usize>,
    pub score: f64,
}

/// Ranked hypotheses plus the intent read from the best one's word-piece
/// branch state.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodeResult {
    pub n_best: Vec<NBest>,
    pub intent: usize,
    pub intent_logprobs: Vec<f64>,
}

/// Indices of the `k` largest entries, skipping `skip`, ties broken toward
/// the lower index.
fn top_k(values: &[f64], k: usize, skip: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| i != skip).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.truncate(k);
    order
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

enum Candidate {
    /// Blanked earlier this frame (or just now); sequence is final for the
    /// frame and the decoder state is unchanged.
    Done(Hypothesis),
    /// Emitted a pair; the decoder state advances only if it survives the
    /// global prune.
    Emit {
        parent_state: DecoderState,
        tokens: Vec<usize>,
        slots: Vec<usize>,
        score: f64,
        emits_this_frame: usize,
        frames_consumed: usize,
    },
}

impl Candidate {
    fn score(&self) -> f64 {
        match self {
            Candidate::Done(h) => h.score,
            Candidate::Emit { score, .. } => *score,
        }
    }
}

/// Adds a blanked hypothesis to the frame's finished pool, combining
/// scores by logsumexp when the label sequences match.
fn merge_done(done: &mut Vec<Hypothesis>, hyp: Hypothesis) {
    for existing in done.iter_mut() {
        if existing.tokens == hyp.tokens && existing.slots == hyp.slots {
            existing.score = logaddexp(existing.score, hyp.score);
            return;
        }
    }
    done.push(hyp);
}

/// Runs the per-frame candidate rounds: every active hypothesis repeatedly
/// expands into a blank move (ending its frame) plus top word/slot pairs,
/// with local and global pruning, until no hypothesis is mid-frame.
fn advance_frame(
    session: &mut Session,
    config: &BeamConfig,
    pool: Vec<Hypothesis>,
    enc_row: ValueId,
) -> Result<Vec<Hypothesis>, DecodeError> {
    let blank_wp = session.config().blank_wp();
    let blank_slot = session.config().blank_slot();
    let mut active = pool;
    for hyp in &mut active {
        hyp.emits_this_frame = 0;
        hyp.frames_consumed += 1;
    }
    let mut done: Vec<Hypothesis> = Vec::new();

    while !active.is_empty() {
        let mut emit_candidates: Vec<Candidate> = Vec::new();
        for hyp in active.drain(..) {
            let (wp_id, slot_id) = session.joint(enc_row, hyp.state.g)?;
            let wp_lp = session.value(wp_id).values().to_vec();
            let slot_lp = session.value(slot_id).values().to_vec();

            let mut local: Vec<Candidate> = Vec::new();
            // The blank candidate goes first so stable sorting keeps it
            // ahead of equal-scoring emissions.
            local.push(Candidate::Done(Hypothesis {
                score: hyp.score + wp_lp[blank_wp],
                ..hyp.clone()
            }));
            if hyp.emits_this_frame < config.max_emits_per_frame {
                let wps = top_k(&wp_lp, config.b_wp, blank_wp);
                let slots = top_k(&slot_lp, config.b_slot, blank_slot);
                for &w in &wps {
                    for &s in &slots {
                        let mut tokens = hyp.tokens.clone();
                        let mut slot_seq = hyp.slots.clone();
                        tokens.push(w);
                        slot_seq.push(s);
                        local.push(Candidate::Emit {
                            parent_state: hyp.state.clone(),
                            tokens,
                            slots: slot_seq,
                            score: (hyp.score + wp_lp[w]) + slot_lp[s],
                            emits_this_frame: hyp.emits_this_frame + 1,
                            frames_consumed: hyp.frames_consumed,
                        });
                    }
                }
            }
            local.sort_by(|a, b| b.score().total_cmp(&a.score()));
            local.truncate(config.b_local);
            for cand in local {
                match cand {
                    Candidate::Done(h) => merge_done(&mut done, h),
                    emit => emit_candidates.push(emit),
                }
            }
        }

        // Global prune over everything alive at this point in the frame:
        // hypotheses already done plus the fresh emissions.
        let mut all: Vec<Candidate> = done.drain(..).map(Candidate::Done).collect();
        all.extend(emit_candidates);
        all.sort_by(|a, b| b.score().total_cmp(&a.score()));
        all.truncate(config.b_beam);

        for cand in all {
            match cand {
                Candidate::Done(h) => done.push(h),
                Candidate::Emit {
                    parent_state,
                    tokens,
                    slots,
                    score,
                    emits_this_frame,
                    frames_consumed,
                } => {
                    let wp = *tokens.last().unwrap();
                    let slot = *slots.last().unwrap();
                    let state = session.decoder_step(&parent_state, wp, slot)?;
                    active.push(Hypothesis {
                        tokens,
                        slots,
                        score,
                        state,
                        frames_consumed,
                        emits_this_frame,
                    });
                }
            }
        }
    }
    Ok(done)
}

fn result_from_pool(
    session: &mut Session,
    mut pool: Vec<Hypothesis>,
) -> Result<DecodeResult, DecodeError> {
    pool.sort_by(|a, b| b.score.total_cmp(&a.score));
    let top = pool.first().expect("frame pool is never empty");
    let intent_id = session.intent_logprobs(top.state.g_w)?;
    let intent_logprobs = session.value(intent_id).values().to_vec();
    let intent = argmax(&intent_logprobs);
    Ok(DecodeResult {
        n_best: pool
            .into_iter()
            .map(|h| NBest {
                tokens: h.tokens,
                slots: h.slots,
                score: h.score,
            })
            .collect(),
        intent,
        intent_logprobs,
    })
}

/// Incremental decoder: frames arrive in chunks, the beam advances frame
/// by frame, and `finalize` yields exactly what a one-shot search over the
/// concatenated frames would.
pub struct StreamingSession {
    session: Session,
    enc_state: EncoderState,
    config: BeamConfig,
    pool: Vec<Hypothesis>,
    frames: usize,
    finalized: bool,
}

impl StreamingSession {
    pub fn new(params: &ModelParams, config: BeamConfig) -> Result<Self, DecodeError> {
        config.validate()?;
        let mut session = Session::new(params)?;
        let enc_state = session.encoder_state();
        let state = session.initial_decoder_state()?;
        let pool = vec![Hypothesis {
            tokens: Vec::new(),
            slots: Vec::new(),
            score: 0.0,
            state,
            frames_consumed: 0,
            emits_this_frame: 0,
        }];
        Ok(Self {
            session,
            enc_state,
            config,
            pool,
            frames: 0,
            finalized: false,
        })
    }

    /// Consumes zero or more post-pipeline frame rows.
    pub fn push_frames(&mut self, frames: &Tensor) -> Result<(), DecodeError> {
        if self.finalized {
            return Err(DecodeError::SessionFinalized);
        }
        let rows = self.session.encode_continue(&mut self.enc_state, frames)?;
        for row in rows {
            let pool = std::mem::take(&mut self.pool);
            self.pool = advance_frame(&mut self.session, &self.config, pool, row)?;
            self.frames += 1;
        }
        Ok(())
    }

    pub fn frames_consumed(&self) -> usize {
        self.frames
    }

    /// Best hypothesis so far (labels and score).
    pub fn partial_best(&self) -> NBest {
        let mut best = &self.pool[0];
        for h in &self.pool[1..] {
            if h.score > best.score {
                best = h;
            }
        }
        NBest {
            tokens: best.tokens.clone(),
            slots: best.slots.clone(),
            score: best.score,
        }
    }

    pub fn finalize(&mut self) -> Result<DecodeResult, DecodeError> {
        if self.finalized {
            return Err(DecodeError::SessionFinalized);
        }
        if self.frames == 0 {
            return Err(DecodeError::NoFrames);
        }
        self.finalized = true;
        let pool = std::mem::take(&mut self.pool);
        result_from_pool(&mut self.session, pool)
    }
}

/// One-shot semantic beam search over post-pipeline features.
pub fn semantic_beam_search(
    params: &ModelParams,
    features: &Tensor,
    config: &BeamConfig,
) -> Result<DecodeResult, DecodeError> {
    let mut session = StreamingSession::new(params, *config)?;
    session.push_frames(features)?;
    session.finalize()
}

/// Greedy decoding: per frame, emit the argmax (word-piece, slot) pair
/// while its score beats staying blank (ties go to blank), then advance.
/// Matches `semantic_beam_search` with all beam widths at 1.
pub fn greedy_decode(params: &ModelParams, features: &Tensor) -> Result<DecodeResult, DecodeError> {
    let mut session = Session::new(params)?;
    let blank_wp = session.config().blank_wp();
    let blank_slot = session.config().blank_slot();
    let cap = BeamConfig::default().max_emits_per_frame;
    let rows = session.encode(features)?;
    if rows.is_empty() {
        return Err(DecodeError::NoFrames);
    }

    let mut state = session.initial_decoder_state()?;
    let mut tokens = Vec::new();
    let mut slots = Vec::new();
    let mut score = 0.0;
    let mut frames_consumed = 0;
    for row in rows {
        frames_consumed += 1;
        let mut emits = 0;
        loop {
            let (wp_id, slot_id) = session.joint(row, state.g)?;
            let wp_lp = session.value(wp_id).values().to_vec();
            let slot_lp = session.value(slot_id).values().to_vec();
            let blank_score = score + wp_lp[blank_wp];
            if emits >= cap {
                score = blank_score;
                break;
            }
            let w = top_k(&wp_lp, 1, blank_wp)[0];
            let s = top_k(&slot_lp, 1, blank_slot)[0];
            let emit_score = (score + wp_lp[w]) + slot_lp[s];
            if emit_score > blank_score {
                score = emit_score;
                tokens.push(w);
                slots.push(s);
                state = session.decoder_step(&state, w, s)?;
                emits += 1;
            } else {
                score = blank_score;
                break;
            }
        }
    }

    let pool = vec![Hypothesis {
        tokens,
        slots,
        score,
        state,
        frames_consumed,
        emits_this_frame: 0,
    }];
    result_from_pool(&mut session, pool)
}

/// Total log-probability of emitting exactly the given labels over all
/// alignments that blank once per frame and emit at most `frame_cap`
/// labels between blanks. Scores exactly as the beam does: emissions add
/// both head log-probs, blanks add only the word-piece blank.
fn sequence_log_prob(
    emit_lp: &[Vec<f64>],
    blank_lp: &[Vec<f64>],
    u_len: usize,
    frame_cap: usize,
) -> f64 {
    let t_len = blank_lp.len();
    let mut beta = vec![f64::NEG_INFINITY; u_len + 1];
    beta[0] = 0.0;
    for t in 0..t_len {
        let mut next = vec![f64::NEG_INFINITY; u_len + 1];
        for u in 0..=u_len {
            if beta[u] == f64::NEG_INFINITY {
                continue;
            }
            let mut acc = beta[u];
            for e in 0..=frame_cap.min(u_len - u) {
                if e > 0 {
                    acc += emit_lp[t][u + e - 1];
                }
                next[u + e] = logaddexp(next[u + e], acc + blank_lp[t][u + e]);
            }
        }
        beta = next;
    }
    beta[u_len]
}

fn pow_u128(base: u128, exp: usize) -> u128 {
    let mut acc: u128 = 1;
    for _ in 0..exp {
        acc = acc.saturating_mul(base);
    }
    acc
}

/// Enumerates every label sequence up to `max_len`, scores each one by
/// the capped-alignment DP above, and returns the argmax. Oracle for the
/// beam: with saturating widths and the same frame cap the beam's top
/// hypothesis must match.
pub fn exhaustive_decode(
    params: &ModelParams,
    features: &Tensor,
    max_len: usize,
    frame_cap: usize,
) -> Result<NBest, DecodeError> {
    let cfg = params.config.clone();
    let pairs = (cfg.n_wp as u128) * (cfg.n_slot as u128);
    let mut sequences: u128 = 0;
    for len in 0..=max_len {
        sequences = sequences.saturating_add(pow_u128(pairs, len));
    }
    let mut session = Session::new(params)?;
    let rows = session.encode(features)?;
    if rows.is_empty() {
        return Err(DecodeError::NoFrames);
    }
    let alignments = pow_u128((frame_cap + 1) as u128, rows.len());
    let work = sequences.saturating_mul(alignments);
    if work > MAX_EXHAUSTIVE_WORK {
        return Err(DecodeError::SearchSpaceTooLarge {
            work,
            limit: MAX_EXHAUSTIVE_WORK,
        });
    }

    let blank_wp = cfg.blank_wp();
    let blank_slot = cfg.blank_slot();
    let initial = session.initial_decoder_state()?;

    // Joint outputs for one decoder state across every frame.
    type HeadRows = (Vec<Vec<f64>>, Vec<Vec<f64>>);
    let score_rows = |session: &mut Session,
                          state: &DecoderState|
     -> Result<HeadRows, DecodeError> {
        let mut wp = Vec::with_capacity(rows.len());
        let mut slot = Vec::with_capacity(rows.len());
        for &row in &rows {
            let (wp_id, slot_id) = session.joint(row, state.g)?;
            wp.push(session.value(wp_id).values().to_vec());
            slot.push(session.value(slot_id).values().to_vec());
        }
        Ok((wp, slot))
    };

    struct Frame {
        state: DecoderState,
        wp_lp: Vec<Vec<f64>>,
        slot_lp: Vec<Vec<f64>>,
    }

    let (wp_lp, slot_lp) = score_rows(&mut session, &initial)?;
    let mut stack = vec![Frame {
        state: initial,
        wp_lp,
        slot_lp,
    }];
    let mut tokens: Vec<usize> = Vec::new();
    let mut slots: Vec<usize> = Vec::new();
    let mut best: Option<NBest> = None;

    // Depth-first over label sequences; the stack shares prefix decoder
    // states so each state is computed once.
    loop {
        let depth = tokens.len();
        if depth == stack.len() - 1 {
            // Score the current prefix as a complete sequence.
            let emit_lp: Vec<Vec<f64>> = (0..rows.len())
                .map(|t| {
                    (0..depth)
                        .map(|u| stack[u].wp_lp[t][tokens[u]] + stack[u].slot_lp[t][slots[u]])
                        .collect()
                })
                .collect();
            let blank_lp: Vec<Vec<f64>> = (0..rows.len())
                .map(|t| (0..=depth).map(|u| stack[u].wp_lp[t][blank_wp]).collect())
                .collect();
            let score = sequence_log_prob(&emit_lp, &blank_lp, depth, frame_cap);
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(NBest {
                    tokens: tokens.clone(),
                    slots: slots.clone(),
                    score,
                });
            }
        }
        // Advance to the next sequence in depth-first order.
        if depth < max_len {
            tokens.push(0);
            slots.push(0);
            let parent = &stack[depth].state.clone();
            let state = session.decoder_step(parent, 0, 0)?;
            let (wp_lp, slot_lp) = score_rows(&mut session, &state)?;
            stack.push(Frame {
                state,
                wp_lp,
                slot_lp,
            });
            continue;
        }
        // Backtrack, bumping the last label pair odometer-style.
        loop {
            let (Some(mut w), Some(mut s)) = (tokens.pop(), slots.pop()) else {
                let _ = blank_slot;
                return Ok(best.expect("empty sequence always scored"));
            };
            stack.pop();
            if s + 1 < cfg.n_slot {
                s += 1;
            } else if w + 1 < cfg.n_wp {
                s = 0;
                w += 1;
            } else {
                continue;
            }
            tokens.push(w);
            slots.push(s);
            let parent = &stack[tokens.len() - 1].state.clone();
            let state = session.decoder_step(parent, w, s)?;
            let (wp_lp, slot_lp) = score_rows(&mut session, &state)?;
            stack.push(Frame {
                state,
                wp_lp,
                slot_lp,
            });
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, FusionMode, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn decode_config(n_wp: usize, n_slot: usize) -> ModelConfig {
        ModelConfig {
            feat_dim: 4,
            enc_layers: 1,
            enc_hidden: 4,
            enc_out: 3,
            wp_embed: 3,
            wp_hidden: 4,
            wp_out: 3,
            slot_embed: 2,
            slot_hidden: 3,
            slot_out: 3,
            joint_hidden: 4,
            intent_hidden: 3,
            fusion_mode: FusionMode::Add,
            n_wp,
            n_slot,
            n_intent: 3,
        }
    }

    fn random_features(t_len: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![t_len, dim],
            (0..t_len * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Scaled-up weights so decoding is decisive rather than near-uniform.
    fn random_model(seed: u64, n_wp: usize, n_slot: usize) -> ModelParams {
        let mut params = init_params(&decode_config(n_wp, n_slot), seed).unwrap();
        for (_, t) in params.tensors.iter_mut() {
            for v in t.values_mut() {
                *v *= 3.0;
            }
        }
        params
    }

    #[test]
    fn blank_dominant_model_emits_nothing() {
        let mut params = init_params(&decode_config(5, 3), 1).unwrap();
        let blank = 5;
        let b = params.tensors.get_mut("joint.wp.b").unwrap();
        b.values_mut()[blank] = 25.0;
        let features = random_features(4, 4, 0);
        let out = greedy_decode(&params, &features).unwrap();
        assert!(out.n_best[0].tokens.is_empty());
        assert!(out.n_best[0].slots.is_empty());

        // The score is the sum of per-frame blank log-probs at the initial
        // decoder state.
        let mut session = Session::new(&params).unwrap();
        let rows = session.encode(&features).unwrap();
        let state = session.initial_decoder_state().unwrap();
        let mut expected = 0.0;
        for row in rows {
            let (wp_id, _) = session.joint(row, state.g).unwrap();
            expected += session.value(wp_id).values()[blank];
        }
        assert_eq!(out.n_best[0].score, expected);
    }

    #[test]
    fn greedy_is_deterministic() {
        let params = random_model(7, 5, 3);
        let features = random_features(5, 4, 2);
        let a = greedy_decode(&params, &features).unwrap();
        let b = greedy_decode(&params, &features).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_matches_unit_beam_bitwise() {
        let unit = BeamConfig {
            b_wp: 1,
            b_slot: 1,
            b_local: 1,
            b_beam: 1,
            max_emits_per_frame: BeamConfig::default().max_emits_per_frame,
        };
        for seed in 0..12 {
            let params = random_model(seed, 5, 3);
            let features = random_features(1 + (seed as usize % 5), 4, seed);
            let greedy = greedy_decode(&params, &features).unwrap();
            let beam = semantic_beam_search(&params, &features, &unit).unwrap();
            assert_eq!(beam.n_best.len(), 1);
            assert_eq!(greedy.n_best[0].tokens, beam.n_best[0].tokens, "seed {seed}");
            assert_eq!(greedy.n_best[0].slots, beam.n_best[0].slots, "seed {seed}");
            assert_eq!(
                greedy.n_best[0].score.to_bits(),
                beam.n_best[0].score.to_bits(),
                "seed {seed}"
            );
            assert_eq!(greedy.intent, beam.intent);
            assert_eq!(greedy.intent_logprobs, beam.intent_logprobs);
        }
    }

    #[test]
    fn beam_output_is_sorted_bounded_and_blank_free() {
        let params = random_model(3, 5, 3);
        let features = random_features(6, 4, 3);
        let config = BeamConfig::default();
        let out = semantic_beam_search(&params, &features, &config).unwrap();
        assert!(!out.n_best.is_empty());
        assert!(out.n_best.len() <= config.b_beam);
        for pair in out.n_best.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
        for h in &out.n_best {
            assert_eq!(h.tokens.len(), h.slots.len());
            assert!(h.tokens.iter().all(|&w| w < 5));
            assert!(h.slots.iter().all(|&s| s < 3));
        }
        assert!(out.intent < 3);
    }

    #[test]
    fn wider_global_beams_never_shrink_the_output() {
        let params = random_model(9, 4, 2);
        let features = random_features(4, 4, 9);
        let mut last = 0;
        for b_beam in 1..=6 {
            let config = BeamConfig {
                b_wp: 4,
                b_slot: 2,
                b_local: 9,
                b_beam,
                max_emits_per_frame: 2,
            };
            let out = semantic_beam_search(&params, &features, &config).unwrap();
            assert!(out.n_best.len() >= last, "b_beam {b_beam}");
            last = out.n_best.len();
        }
    }

    #[test]
    fn zero_width_beam_config_is_rejected() {
        let params = random_model(1, 3, 2);
        let features = random_features(2, 4, 1);
        let bad = BeamConfig {
            b_wp: 0,
            ..BeamConfig::default()
        };
        assert!(matches!(
            semantic_beam_search(&params, &features, &bad),
            Err(DecodeError::BadConfig(_))
        ));
    }

    #[test]
    fn empty_input_is_rejected() {
        let params = random_model(1, 3, 2);
        let features = Tensor::zeros(vec![0, 4]);
        assert!(matches!(
            greedy_decode(&params, &features),
            Err(DecodeError::NoFrames)
        ));
        assert!(matches!(
            semantic_beam_search(&params, &features, &BeamConfig::default()),
            Err(DecodeError::NoFrames)
        ));
    }

    fn saturating_config(n_wp: usize, n_slot: usize, frame_cap: usize) -> BeamConfig {
        BeamConfig {
            b_wp: n_wp,
            b_slot: n_slot,
            b_local: n_wp * n_slot + 1,
            b_beam: 1 << 12,
            max_emits_per_frame: frame_cap,
        }
    }

    #[test]
    fn saturating_beam_matches_exhaustive_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for case in 0..12 {
            let n_wp = rng.random_range(2..=3);
            let n_slot = rng.random_range(1..=2);
            let (t_len, cap) = if rng.random_bool(0.5) { (2, 1) } else { (1, 2) };
            let params = random_model(100 + case, n_wp, n_slot);
            let features = random_features(t_len, 4, 200 + case);
            let beam = semantic_beam_search(
                &params,
                &features,
                &saturating_config(n_wp, n_slot, cap),
            )
            .unwrap();
            let oracle = exhaustive_decode(&params, &features, t_len * cap, cap).unwrap();
            let top = &beam.n_best[0];
            assert_eq!(top.tokens, oracle.tokens, "case {case}");
            assert_eq!(top.slots, oracle.slots, "case {case}");
            assert!(
                (top.score - oracle.score).abs() < 1e-9,
                "case {case}: {} vs {}",
                top.score,
                oracle.score
            );
        }
    }

    #[test]
    fn exhaustive_with_no_emissions_scores_the_blank_path() {
        let params = random_model(5, 3, 2);
        let features = random_features(3, 4, 5);
        let out = exhaustive_decode(&params, &features, 0, 1).unwrap();
        assert!(out.tokens.is_empty());

        let mut session = Session::new(&params).unwrap();
        let rows = session.encode(&features).unwrap();
        let state = session.initial_decoder_state().unwrap();
        let mut expected = 0.0;
        for row in rows {
            let (wp_id, _) = session.joint(row, state.g).unwrap();
            expected += session.value(wp_id).values()[3];
        }
        assert!((out.score - expected).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_with_one_word_piece_only_varies_alignment() {
        let params = random_model(6, 1, 1);
        let features = random_features(2, 4, 6);
        let out = exhaustive_decode(&params, &features, 2, 1).unwrap();
        assert!(out.tokens.iter().all(|&w| w == 0));
        assert!(out.slots.iter().all(|&s| s == 0));
    }

    #[test]
    fn exhaustive_guards_the_search_space() {
        let params = random_model(6, 5, 3);
        let features = random_features(6, 4, 6);
        assert!(matches!(
            exhaustive_decode(&params, &features, 12, 5),
            Err(DecodeError::SearchSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn streaming_matches_one_shot_bitwise() {
        let params = random_model(11, 5, 3);
        let full = random_features(6, 4, 11);
        let config = BeamConfig::default();
        let one_shot = semantic_beam_search(&params, &full, &config).unwrap();

        for chunks in [vec![1usize, 1, 1, 1, 1, 1], vec![3, 3], vec![2, 0, 4], vec![6]] {
            let mut stream = StreamingSession::new(&params, config).unwrap();
            let mut offset = 0;
            for len in chunks.clone() {
                let chunk = Tensor::new(
                    vec![len, 4],
                    full.values()[offset * 4..(offset + len) * 4].to_vec(),
                )
                .unwrap();
                stream.push_frames(&chunk).unwrap();
                offset += len;
            }
            let streamed = stream.finalize().unwrap();
            assert_eq!(streamed.n_best.len(), one_shot.n_best.len(), "{chunks:?}");
            for (a, b) in streamed.n_best.iter().zip(&one_shot.n_best) {
                assert_eq!(a.tokens, b.tokens, "{chunks:?}");
                assert_eq!(a.slots, b.slots, "{chunks:?}");
                assert_eq!(a.score.to_bits(), b.score.to_bits(), "{chunks:?}");
            }
            assert_eq!(streamed.intent, one_shot.intent);
        }
    }

    #[test]
    fn partial_best_equals_prefix_decode() {
        let params = random_model(13, 5, 3);
        let full = random_features(5, 4, 13);
        let config = BeamConfig::default();
        let mut stream = StreamingSession::new(&params, config).unwrap();
        for k in 1..=5usize {
            let chunk = Tensor::new(vec![1, 4], full.values()[(k - 1) * 4..k * 4].to_vec()).unwrap();
            stream.push_frames(&chunk).unwrap();
            let prefix = Tensor::new(vec![k, 4], full.values()[..k * 4].to_vec()).unwrap();
            let one_shot = semantic_beam_search(&params, &prefix, &config).unwrap();
            let partial = stream.partial_best();
            assert_eq!(partial.tokens, one_shot.n_best[0].tokens, "prefix {k}");
            assert_eq!(partial.slots, one_shot.n_best[0].slots, "prefix {k}");
            assert_eq!(
                partial.score.to_bits(),
                one_shot.n_best[0].score.to_bits(),
                "prefix {k}"
            );
        }
    }

    #[test]
    fn streaming_session_lifecycle_errors() {
        let params = random_model(1, 3, 2);
        let mut stream = StreamingSession::new(&params, BeamConfig::default()).unwrap();
        assert!(matches!(stream.finalize(), Err(DecodeError::NoFrames)));

        let mut stream = StreamingSession::new(&params, BeamConfig::default()).unwrap();
        stream.push_frames(&random_features(2, 4, 0)).unwrap();
        assert_eq!(stream.frames_consumed(), 2);
        stream.finalize().unwrap();
        assert!(matches!(
            stream.push_frames(&random_features(1, 4, 0)),
            Err(DecodeError::SessionFinalized)
        ));
        assert!(matches!(stream.finalize(), Err(DecodeError::SessionFinalized)));
    }
}
