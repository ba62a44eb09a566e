//! Training objectives: word-piece RNN-T loss, intent cross-entropy,
//! slot cross-entropy, and the aligned RNN-T loss that rescores the slot
//! sequence jointly with the word pieces. Every lattice quantity has a
//! brute-force enumeration oracle for cross-checking.

use rand::prelude::*;

use crate::data::{feature_pipeline, DataError, Utterance};
use crate::model::{ModelError, ModelParams, Session};
use crate::numerics::{logsumexp, GradientMap, NumericsError, Tape, Tensor, ValueId};

const MAX_BRUTEFORCE_PATHS: u128 = 1_000_000;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("no frames to align against")]
    NoFrames,
    #[error("no targets: {0}")]
    EmptyTargets(&'static str),
    #[error("token and slot sequences differ in length ({tokens} vs {slots})")]
    LengthMismatch { tokens: usize, slots: usize },
    #[error("{kind} target {index} outside label range 0..{limit}")]
    TargetOutOfRange {
        kind: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("bad grid: {0}")]
    BadGrid(String),
    #[error("{paths} alignment paths exceed the enumeration limit {limit}")]
    TooManyPaths { paths: u128, limit: u128 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("bad loss weights: {0}")]
    BadWeights(String),
}

/// Teacher-forced joint outputs for one utterance: at (t, u) the encoder
/// has consumed frames 1..=t+1 and the decoder the first u target pairs.
/// Rows are tape values, so losses built on them are differentiable.
pub struct Lattice {
    /// T x (U+1) word-piece logprob vectors, each of width V^w + 1.
    pub wp: Vec<Vec<ValueId>>,
    /// T x (U+1) slot logprob vectors, each of width V^s + 1.
    pub slot: Vec<Vec<ValueId>>,
    /// Word-piece branch output at the final decoder state (intent input).
    pub g_w_final: ValueId,
    pub tokens: Vec<usize>,
    pub slots: Vec<usize>,
    pub t_len: usize,
    n_wp: usize,
    n_slot: usize,
}

/// Runs the encoder and the teacher-forced decoder and evaluates the joint
/// network at every (t, u) pair. `features` are post-pipeline frames.
pub fn build_lattice(
    session: &mut Session,
    features: &Tensor,
    tokens: &[usize],
    slots: &[usize],
) -> Result<Lattice, LossError> {
    if tokens.len() != slots.len() {
        return Err(LossError::LengthMismatch {
            tokens: tokens.len(),
            slots: slots.len(),
        });
    }
    let cfg = session.config().clone();
    for &wp in tokens {
        if wp >= cfg.n_wp {
            return Err(LossError::TargetOutOfRange {
                kind: "word-piece",
                index: wp,
                limit: cfg.n_wp,
            });
        }
    }
    for &slot in slots {
        if slot >= cfg.n_slot {
            return Err(LossError::TargetOutOfRange {
                kind: "slot",
                index: slot,
                limit: cfg.n_slot,
            });
        }
    }

    let enc_rows = session.encode(features)?;
    let t_len = enc_rows.len();
    if t_len == 0 {
        return Err(LossError::NoFrames);
    }

    let mut states = Vec::with_capacity(tokens.len() + 1);
    states.push(session.initial_decoder_state()?);
    for (&wp, &slot) in tokens.iter().zip(slots) {
        let next = session.decoder_step(states.last().unwrap(), wp, slot)?;
        states.push(next);
    }

    let mut wp_grid = Vec::with_capacity(t_len);
    let mut slot_grid = Vec::with_capacity(t_len);
    for &h in &enc_rows {
        let mut wp_row = Vec::with_capacity(states.len());
        let mut slot_row = Vec::with_capacity(states.len());
        for state in &states {
            let (wp_lp, slot_lp) = session.joint(h, state.g)?;
            wp_row.push(wp_lp);
            slot_row.push(slot_lp);
        }
        wp_grid.push(wp_row);
        slot_grid.push(slot_row);
    }

    Ok(Lattice {
        wp: wp_grid,
        slot: slot_grid,
        g_w_final: states.last().unwrap().g_w,
        tokens: tokens.to_vec(),
        slots: slots.to_vec(),
        t_len,
        n_wp: cfg.n_wp,
        n_slot: cfg.n_slot,
    })
}

impl Lattice {
    pub fn u_len(&self) -> usize {
        self.tokens.len()
    }

    /// Word-piece move scores: emit the next target token, or blank.
    pub fn wp_parts(&self, tape: &mut Tape) -> Result<TransducerParts, LossError> {
        parts_from_rows(tape, &self.wp, &self.tokens, self.n_wp)
    }

    /// Slot move scores: emit the next target tag, or blank.
    pub fn slot_parts(&self, tape: &mut Tape) -> Result<TransducerParts, LossError> {
        parts_from_rows(tape, &self.slot, &self.slots, self.n_slot)
    }

    /// Joint word-piece/slot move scores: both heads must emit their
    /// targets together (or both blank), so log-scores add.
    pub fn combined_parts(&self, tape: &mut Tape) -> Result<TransducerParts, LossError> {
        let wp = self.wp_parts(tape)?;
        let slot = self.slot_parts(tape)?;
        add_parts(tape, &wp, &slot)
    }
}

/// Per-move log-scores of one transducer grid: `emit[t][u]` advances u,
/// `blank[t][u]` advances t. Scalars on the tape.
pub struct TransducerParts {
    pub emit: Vec<Vec<ValueId>>,
    pub blank: Vec<Vec<ValueId>>,
}

fn parts_from_rows(
    tape: &mut Tape,
    rows: &[Vec<ValueId>],
    targets: &[usize],
    blank: usize,
) -> Result<TransducerParts, LossError> {
    let mut emit = Vec::with_capacity(rows.len());
    let mut blanks = Vec::with_capacity(rows.len());
    for row in rows {
        let mut emit_row = Vec::with_capacity(targets.len());
        for (u, &y) in targets.iter().enumerate() {
            emit_row.push(tape.index(row[u], y)?);
        }
        let mut blank_row = Vec::with_capacity(row.len());
        for &cell in row {
            blank_row.push(tape.index(cell, blank)?);
        }
        emit.push(emit_row);
        blanks.push(blank_row);
    }
    Ok(TransducerParts { emit, blank: blanks })
}

fn add_parts(
    tape: &mut Tape,
    a: &TransducerParts,
    b: &TransducerParts,
) -> Result<TransducerParts, LossError> {
    let zip2 = |tape: &mut Tape, xs: &[Vec<ValueId>], ys: &[Vec<ValueId>]| {
        xs.iter()
            .zip(ys)
            .map(|(xr, yr)| {
                xr.iter()
                    .zip(yr)
                    .map(|(&x, &y)| tape.add(x, y))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()
    };
    Ok(TransducerParts {
        emit: zip2(tape, &a.emit, &b.emit)?,
        blank: zip2(tape, &a.blank, &b.blank)?,
    })
}

/// Forward-algorithm transducer loss over prepared move scores:
/// -log of the total probability over all alignment paths. alpha(t, u) is
/// the log-sum over paths that consumed t+1 frames and emitted u targets.
pub fn rnnt_forward(tape: &mut Tape, parts: &TransducerParts) -> Result<ValueId, LossError> {
    let t_len = parts.blank.len();
    if t_len == 0 {
        return Err(LossError::NoFrames);
    }
    let u_len = parts.blank[0].len() - 1;
    let zero = tape.scalar(0.0);
    let mut alpha = vec![vec![zero; u_len + 1]; t_len];
    for t in 0..t_len {
        for u in 0..=u_len {
            alpha[t][u] = match (t, u) {
                (0, 0) => zero,
                (0, u) => tape.add(alpha[0][u - 1], parts.emit[0][u - 1])?,
                (t, 0) => tape.add(alpha[t - 1][0], parts.blank[t - 1][0])?,
                (t, u) => {
                    let down = tape.add(alpha[t - 1][u], parts.blank[t - 1][u])?;
                    let right = tape.add(alpha[t][u - 1], parts.emit[t][u - 1])?;
                    tape.logaddexp(down, right)?
                }
            };
        }
    }
    let end = tape.add(alpha[t_len - 1][u_len], parts.blank[t_len - 1][u_len])?;
    Ok(tape.scale(end, -1.0)?)
}

fn grid_dims(grid: &Tensor, targets: &[usize]) -> Result<(usize, usize, usize), LossError> {
    if grid.rank() != 3 {
        return Err(LossError::BadGrid(format!(
            "expected a rank-3 grid, got shape {:?}",
            grid.shape()
        )));
    }
    let (t_len, cols, classes) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    if t_len == 0 {
        return Err(LossError::NoFrames);
    }
    if cols != targets.len() + 1 {
        return Err(LossError::BadGrid(format!(
            "grid has {cols} decoder states but {} targets",
            targets.len()
        )));
    }
    if classes < 2 {
        return Err(LossError::BadGrid(format!(
            "grid class axis {classes} leaves no labels beside blank"
        )));
    }
    let vocab = classes - 1;
    for &y in targets {
        if y >= vocab {
            return Err(LossError::TargetOutOfRange {
                kind: "grid",
                index: y,
                limit: vocab,
            });
        }
    }
    Ok((t_len, targets.len(), vocab))
}

/// Move scores from a tape-resident T x (U+1) x (V+1) grid (blank last).
pub fn grid_parts(
    tape: &mut Tape,
    grid: ValueId,
    targets: &[usize],
) -> Result<TransducerParts, LossError> {
    let (t_len, u_len, vocab) = grid_dims(tape.value(grid), targets)?;
    let flat = |t: usize, u: usize, v: usize| (t * (u_len + 1) + u) * (vocab + 1) + v;
    let mut emit = Vec::with_capacity(t_len);
    let mut blank = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut emit_row = Vec::with_capacity(u_len);
        for (u, &y) in targets.iter().enumerate() {
            emit_row.push(tape.index(grid, flat(t, u, y))?);
        }
        let mut blank_row = Vec::with_capacity(u_len + 1);
        for u in 0..=u_len {
            blank_row.push(tape.index(grid, flat(t, u, vocab))?);
        }
        emit.push(emit_row);
        blank.push(blank_row);
    }
    Ok(TransducerParts { emit, blank })
}

/// Transducer loss of a raw logprob grid (shape T x (U+1) x (V+1)).
pub fn rnnt_loss(grid: &Tensor, targets: &[usize]) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let gid = tape.constant(grid.clone());
    let parts = grid_parts(&mut tape, gid, targets)?;
    let loss = rnnt_forward(&mut tape, &parts)?;
    Ok(tape.value(loss).item())
}

/// Transducer loss plus its gradient with respect to the grid entries.
pub fn rnnt_loss_grad(grid: &Tensor, targets: &[usize]) -> Result<(f64, Tensor), LossError> {
    let mut tape = Tape::new();
    let gid = tape.leaf("grid", grid.clone());
    let parts = grid_parts(&mut tape, gid, targets)?;
    let loss = rnnt_forward(&mut tape, &parts)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, grads.get("grid").expect("grid is a leaf").clone()))
}

/// Transducer loss of two grids forced to move together: emit requires
/// both heads to emit their targets, blank requires both to blank.
pub fn combined_grid_loss(
    wp_grid: &Tensor,
    slot_grid: &Tensor,
    tokens: &[usize],
    slots: &[usize],
) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let wp_id = tape.constant(wp_grid.clone());
    let slot_id = tape.constant(slot_grid.clone());
    let wp = grid_parts(&mut tape, wp_id, tokens)?;
    let slot = grid_parts(&mut tape, slot_id, slots)?;
    let both = add_parts(&mut tape, &wp, &slot)?;
    let loss = rnnt_forward(&mut tape, &both)?;
    Ok(tape.value(loss).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Move {
    Emit,
    Blank,
}

/// One monotone lattice walk: U emit moves and T blank moves, the last
/// move always the blank that leaves the final frame.
#[derive(Clone, Debug)]
pub struct AlignmentPath {
    pub moves: Vec<Move>,
}

impl AlignmentPath {
    /// Sum of move log-scores along the walk.
    pub fn log_prob(&self, emit: &[Vec<f64>], blank: &[Vec<f64>]) -> f64 {
        let (mut t, mut u) = (0usize, 0usize);
        let mut total = 0.0;
        for &m in &self.moves {
            match m {
                Move::Emit => {
                    total += emit[t][u];
                    u += 1;
                }
                Move::Blank => {
                    total += blank[t][u];
                    t += 1;
                }
            }
        }
        total
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

/// Every alignment path through a T x (U+1) grid. Errors when the count
/// passes the enumeration limit.
pub fn enumerate_alignment_paths(
    t_len: usize,
    u_len: usize,
) -> Result<Vec<AlignmentPath>, LossError> {
    if t_len == 0 {
        return Err(LossError::NoFrames);
    }
    let paths = binomial((t_len + u_len) as u128, u_len as u128);
    if paths > MAX_BRUTEFORCE_PATHS {
        return Err(LossError::TooManyPaths {
            paths,
            limit: MAX_BRUTEFORCE_PATHS,
        });
    }
    let mut out = Vec::new();
    let mut moves = Vec::with_capacity(t_len + u_len);
    walk(t_len, u_len, 0, 0, &mut moves, &mut out);
    Ok(out)
}

fn walk(
    t_len: usize,
    u_len: usize,
    t: usize,
    u: usize,
    moves: &mut Vec<Move>,
    out: &mut Vec<AlignmentPath>,
) {
    if t == t_len - 1 && u == u_len {
        moves.push(Move::Blank);
        out.push(AlignmentPath { moves: moves.clone() });
        moves.pop();
        return;
    }
    if u < u_len {
        moves.push(Move::Emit);
        walk(t_len, u_len, t, u + 1, moves, out);
        moves.pop();
    }
    if t < t_len - 1 {
        moves.push(Move::Blank);
        walk(t_len, u_len, t + 1, u, moves, out);
        moves.pop();
    }
}

/// Literal-enumeration transducer loss over raw move scores.
pub fn bruteforce_from_parts(emit: &[Vec<f64>], blank: &[Vec<f64>]) -> Result<f64, LossError> {
    let t_len = blank.len();
    if t_len == 0 {
        return Err(LossError::NoFrames);
    }
    let u_len = blank[0].len() - 1;
    let paths = enumerate_alignment_paths(t_len, u_len)?;
    let scores: Vec<f64> = paths.iter().map(|p| p.log_prob(emit, blank)).collect();
    Ok(-logsumexp(&scores))
}

/// Emit scores (T x U) and blank scores (T x (U+1)) as plain rows.
type RawParts = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn raw_parts(grid: &Tensor, targets: &[usize]) -> Result<RawParts, LossError> {
    let (t_len, u_len, vocab) = grid_dims(grid, targets)?;
    let flat = |t: usize, u: usize, v: usize| (t * (u_len + 1) + u) * (vocab + 1) + v;
    let values = grid.values();
    let emit = (0..t_len)
        .map(|t| targets.iter().enumerate().map(|(u, &y)| values[flat(t, u, y)]).collect())
        .collect();
    let blank = (0..t_len)
        .map(|t| (0..=u_len).map(|u| values[flat(t, u, vocab)]).collect())
        .collect();
    Ok((emit, blank))
}

/// Enumeration oracle for `rnnt_loss`.
pub fn rnnt_loss_bruteforce(grid: &Tensor, targets: &[usize]) -> Result<f64, LossError> {
    let (emit, blank) = raw_parts(grid, targets)?;
    bruteforce_from_parts(&emit, &blank)
}

/// Enumeration oracle for `combined_grid_loss`.
pub fn combined_loss_bruteforce(
    wp_grid: &Tensor,
    slot_grid: &Tensor,
    tokens: &[usize],
    slots: &[usize],
) -> Result<f64, LossError> {
    let (wp_emit, wp_blank) = raw_parts(wp_grid, tokens)?;
    let (slot_emit, slot_blank) = raw_parts(slot_grid, slots)?;
    let add2 = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        a.iter()
            .zip(b)
            .map(|(ar, br)| ar.iter().zip(br).map(|(x, y)| x + y).collect())
            .collect()
    };
    bruteforce_from_parts(&add2(&wp_emit, &slot_emit), &add2(&wp_blank, &slot_blank))
}

/// Intent cross-entropy: the negated log-probability of the true intent.
pub fn ce_intent_loss(
    tape: &mut Tape,
    intent_logprobs: ValueId,
    intent: usize,
) -> Result<ValueId, LossError> {
    let n = tape.value(intent_logprobs).len();
    if intent >= n {
        return Err(LossError::TargetOutOfRange {
            kind: "intent",
            index: intent,
            limit: n,
        });
    }
    let picked = tape.index(intent_logprobs, intent)?;
    Ok(tape.scale(picked, -1.0)?)
}

/// Slot cross-entropy: at each decoder state u-1, the log-probability of
/// the next ground-truth tag averaged over all T frames, negated and
/// summed over u. The blank column is never a target.
pub fn ce_slot_loss(tape: &mut Tape, lattice: &Lattice) -> Result<ValueId, LossError> {
    if lattice.slots.is_empty() {
        return Err(LossError::EmptyTargets("slot cross-entropy needs targets"));
    }
    let mut acc: Option<ValueId> = None;
    for (u, &y) in lattice.slots.iter().enumerate() {
        for t in 0..lattice.t_len {
            let picked = tape.index(lattice.slot[t][u], y)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, picked)?,
                None => picked,
            });
        }
    }
    Ok(tape.scale(acc.unwrap(), -1.0 / lattice.t_len as f64)?)
}

/// Slot-sequence transducer loss plus the combined-grid alignment term
/// that makes both heads traverse the same path.
pub fn aligned_rnnt_loss(tape: &mut Tape, lattice: &Lattice) -> Result<ValueId, LossError> {
    let slot_parts = lattice.slot_parts(tape)?;
    let slot_term = rnnt_forward(tape, &slot_parts)?;
    let both = lattice.combined_parts(tape)?;
    let align_term = rnnt_forward(tape, &both)?;
    Ok(tape.add(slot_term, align_term)?)
}

/// Per-objective weights; the plain multi-task sum uses 1.0 everywhere.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub wp: f64,
    pub slot: f64,
    pub intent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            wp: 1.0,
            slot: 1.0,
            intent: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.wp, self.slot, self.intent];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LossError::BadWeights(
                "weights must be finite and non-negative".into(),
            ));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(LossError::BadWeights("at least one weight must be positive".into()));
        }
        Ok(())
    }
}

/// Which objective trains the slot head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotMode {
    #[default]
    Ce,
    RnntAlign,
}

impl std::fmt::Display for SlotMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SlotMode::Ce => write!(f, "ce"),
            SlotMode::RnntAlign => write!(f, "rnnt_align"),
        }
    }
}

impl std::str::FromStr for SlotMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ce" => Ok(SlotMode::Ce),
            "rnnt_align" => Ok(SlotMode::RnntAlign),
            other => Err(format!("unknown slot mode {other:?}, expected ce or rnnt_align")),
        }
    }
}

/// Batch objective value with unweighted per-objective sums and the
/// gradient of the weighted total.
pub struct BatchLosses {
    pub total: f64,
    pub wp: f64,
    pub slot: f64,
    pub intent: f64,
    pub grads: GradientMap,
}

/// Weighted multi-task loss summed over a batch of raw utterances, with
/// gradients for every parameter. Utterances with no targets contribute
/// only word-piece and intent terms (the slot sums are empty).
pub fn total_loss(
    params: &ModelParams,
    batch: &[Utterance],
    weights: &LossWeights,
    mode: SlotMode,
) -> Result<BatchLosses, LossError> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut totals = BatchLosses {
        total: 0.0,
        wp: 0.0,
        slot: 0.0,
        intent: 0.0,
        grads: GradientMap::default(),
    };
    for utt in batch {
        if utt.intent >= params.config.n_intent {
            return Err(LossError::TargetOutOfRange {
                kind: "intent",
                index: utt.intent,
                limit: params.config.n_intent,
            });
        }
        let features = feature_pipeline(&utt.features)?;
        let mut session = Session::new(params)?;
        let lattice = build_lattice(&mut session, &features, &utt.tokens, &utt.slots)?;

        let wp_parts = lattice.wp_parts(session.tape())?;
        let wp_loss = rnnt_forward(session.tape(), &wp_parts)?;

        let slot_loss = if utt.tokens.is_empty() && mode == SlotMode::Ce {
            session.tape().scalar(0.0)
        } else {
            match mode {
                SlotMode::Ce => ce_slot_loss(session.tape(), &lattice)?,
                SlotMode::RnntAlign => aligned_rnnt_loss(session.tape(), &lattice)?,
            }
        };

        let intent_lp = session.intent_logprobs(lattice.g_w_final)?;
        let intent_loss = ce_intent_loss(session.tape(), intent_lp, utt.intent)?;

        let tape = session.tape();
        let weighted_wp = tape.scale(wp_loss, weights.wp)?;
        let weighted_slot = tape.scale(slot_loss, weights.slot)?;
        let weighted_intent = tape.scale(intent_loss, weights.intent)?;
        let partial = tape.add(weighted_wp, weighted_slot)?;
        let utt_total = tape.add(partial, weighted_intent)?;

        totals.wp += session.value(wp_loss).item();
        totals.slot += session.value(slot_loss).item();
        totals.intent += session.value(intent_loss).item();
        totals.total += session.value(utt_total).item();
        totals.grads.add_map(&session.backward(utt_total)?);
    }
    Ok(totals)
}

/// A random log-normalized T x (U+1) x (V+1) grid.
pub fn random_grid(t_len: usize, u_len: usize, vocab: usize, rng: &mut impl Rng) -> Tensor {
    let classes = vocab + 1;
    let mut values = Vec::with_capacity(t_len * (u_len + 1) * classes);
    for _ in 0..t_len * (u_len + 1) {
        let logits: Vec<f64> = (0..classes).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z = logsumexp(&logits);
        values.extend(logits.iter().map(|l| l - z));
    }
    Tensor::new(vec![t_len, u_len + 1, classes], values).expect("grid shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, FusionMode, ModelConfig};
    use crate::numerics::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            feat_dim: 6,
            enc_layers: 1,
            enc_hidden: 5,
            enc_out: 4,
            wp_embed: 3,
            wp_hidden: 4,
            wp_out: 4,
            slot_embed: 2,
            slot_hidden: 3,
            slot_out: 4,
            joint_hidden: 5,
            intent_hidden: 4,
            fusion_mode: FusionMode::Add,
            n_wp: 5,
            n_slot: 3,
            n_intent: 4,
        }
    }

    fn uniform_grid(t_len: usize, u_len: usize, vocab: usize) -> Tensor {
        let classes = vocab + 1;
        Tensor::full(
            vec![t_len, u_len + 1, classes],
            -((classes as f64).ln()),
        )
    }

    /// Raw features that the pipeline turns into exactly `t_len` frames
    /// of width 6 (tiny config feat_dim).
    fn raw_features(t_len: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![3 * t_len, 2],
            (0..6 * t_len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn test_utterance(t_len: usize, tokens: Vec<usize>, slots: Vec<usize>, intent: usize, seed: u64) -> Utterance {
        Utterance {
            features: raw_features(t_len, seed),
            tokens,
            slots,
            intent,
        }
    }

    #[test]
    fn uniform_single_step_loss_is_two_log_six() {
        let grid = uniform_grid(1, 1, 5);
        let loss = rnnt_loss(&grid, &[2]).unwrap();
        assert!((loss - 2.0 * 6.0f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn single_path_loss_is_emit_plus_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = random_grid(1, 1, 4, &mut rng);
        let loss = rnnt_loss(&grid, &[3]).unwrap();
        let emit = grid.values()[3];
        let blank = grid.values()[5 + 4];
        assert!((loss + emit + blank).abs() < 1e-12);
    }

    #[test]
    fn empty_targets_leave_the_all_blank_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = random_grid(4, 0, 3, &mut rng);
        let loss = rnnt_loss(&grid, &[]).unwrap();
        let expected: f64 = -(0..4).map(|t| grid.values()[t * 4 + 3]).sum::<f64>();
        assert!((loss - expected).abs() < 1e-12);
        let brute = rnnt_loss_bruteforce(&grid, &[]).unwrap();
        assert!((loss - brute).abs() < 1e-12);
    }

    #[test]
    fn two_frame_one_target_grid_has_two_paths() {
        let paths = enumerate_alignment_paths(2, 1).unwrap();
        assert_eq!(paths.len(), 2);
        for p in &paths {
            assert_eq!(p.moves.len(), 3);
            assert_eq!(p.moves.iter().filter(|m| **m == Move::Blank).count(), 2);
            assert_eq!(*p.moves.last().unwrap(), Move::Blank);
        }
    }

    #[test]
    fn path_enumeration_is_guarded() {
        let err = enumerate_alignment_paths(40, 40).unwrap_err();
        assert!(matches!(err, LossError::TooManyPaths { .. }));
    }

    #[test]
    fn forward_matches_bruteforce_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..40 {
            let t_len = rng.random_range(1..=4);
            let u_len = rng.random_range(0..=4);
            let vocab = rng.random_range(1..=5);
            let grid = random_grid(t_len, u_len, vocab, &mut rng);
            let targets: Vec<usize> = (0..u_len).map(|_| rng.random_range(0..vocab)).collect();
            let fast = rnnt_loss(&grid, &targets).unwrap();
            let brute = rnnt_loss_bruteforce(&grid, &targets).unwrap();
            assert!(
                (fast - brute).abs() < 1e-9,
                "case {case}: T={t_len} U={u_len} V={vocab}: {fast} vs {brute}"
            );
        }
    }

    #[test]
    fn combined_loss_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..25 {
            let t_len = rng.random_range(1..=4);
            let u_len = rng.random_range(0..=3);
            let wp_grid = random_grid(t_len, u_len, 4, &mut rng);
            let slot_grid = random_grid(t_len, u_len, 2, &mut rng);
            let tokens: Vec<usize> = (0..u_len).map(|_| rng.random_range(0..4)).collect();
            let slots: Vec<usize> = (0..u_len).map(|_| rng.random_range(0..2)).collect();
            let fast = combined_grid_loss(&wp_grid, &slot_grid, &tokens, &slots).unwrap();
            let brute = combined_loss_bruteforce(&wp_grid, &slot_grid, &tokens, &slots).unwrap();
            assert!((fast - brute).abs() < 1e-9, "{fast} vs {brute}");
        }
    }

    #[test]
    fn certain_wp_grid_reduces_combined_to_slot_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t_len, u_len) = (3, 2);
        let wp_grid = Tensor::zeros(vec![t_len, u_len + 1, 5]);
        let slot_grid = random_grid(t_len, u_len, 3, &mut rng);
        let tokens = vec![1, 2];
        let slots = vec![0, 2];
        let combined = combined_grid_loss(&wp_grid, &slot_grid, &tokens, &slots).unwrap();
        let slot_only = rnnt_loss(&slot_grid, &slots).unwrap();
        assert!((combined - slot_only).abs() < 1e-12);
    }

    #[test]
    fn grid_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = random_grid(3, 2, 4, &mut rng);
        let targets = vec![1, 3];
        let (_, dgrid) = rnnt_loss_grad(&grid, &targets).unwrap();
        let mut params = crate::numerics::NamedTensors::new();
        params.insert("grid", grid);
        let mut analytic = GradientMap::default();
        analytic.accumulate("grid", &dgrid);
        let report = finite_diff_check(
            |nt| rnnt_loss(nt.get("grid").unwrap(), &targets),
            &params,
            &analytic,
            30,
            1e-5,
            7,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{:?}", report.worst());
    }

    #[test]
    fn grid_shape_and_target_errors() {
        let grid = uniform_grid(2, 1, 3);
        assert!(matches!(
            rnnt_loss(&grid, &[0, 1]),
            Err(LossError::BadGrid(_))
        ));
        assert!(matches!(
            rnnt_loss(&grid, &[3]),
            Err(LossError::TargetOutOfRange { .. })
        ));
        let empty = Tensor::zeros(vec![0, 2, 4]);
        assert!(matches!(rnnt_loss(&empty, &[0]), Err(LossError::NoFrames)));
    }

    #[test]
    fn intent_ce_on_uniform_and_certain_distributions() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::full(vec![4], -(4.0f64.ln())));
        let loss = ce_intent_loss(&mut tape, uniform, 2).unwrap();
        assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);

        let mut certain = vec![f64::NEG_INFINITY; 4];
        certain[1] = 0.0;
        let certain = tape.constant(Tensor::vector(certain));
        let loss = ce_intent_loss(&mut tape, certain, 1).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        assert!(matches!(
            ce_intent_loss(&mut tape, uniform, 4),
            Err(LossError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn intent_ce_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.leaf("logits", Tensor::vector(vec![0.3, -1.2, 0.8, 0.1]));
        let lp = tape.log_softmax(logits).unwrap();
        let loss = ce_intent_loss(&mut tape, lp, 2).unwrap();
        let grads = tape.backward(loss).unwrap();
        let got = grads.get("logits").unwrap();
        let lp_values = tape.value(lp).values().to_vec();
        for (k, &g) in got.values().iter().enumerate() {
            let expected = lp_values[k].exp() - if k == 2 { 1.0 } else { 0.0 };
            assert!((g - expected).abs() < 1e-12, "coord {k}");
        }
    }

    fn lattice_for(
        params: &ModelParams,
        t_len: usize,
        tokens: &[usize],
        slots: &[usize],
        seed: u64,
    ) -> (Session, Lattice) {
        let mut session = Session::new(params).unwrap();
        let features = feature_pipeline(&raw_features(t_len, seed)).unwrap();
        let lattice = build_lattice(&mut session, &features, tokens, slots).unwrap();
        (session, lattice)
    }

    #[test]
    fn lattice_has_teacher_forced_shape_and_normalization() {
        let params = init_params(&tiny_config(), 11).unwrap();
        let (session, lattice) = lattice_for(&params, 3, &[1, 2], &[0, 1], 0);
        assert_eq!(lattice.t_len, 3);
        assert_eq!(lattice.u_len(), 2);
        assert_eq!(lattice.wp.len(), 3);
        assert_eq!(lattice.wp[0].len(), 3);
        for t in 0..3 {
            for u in 0..3 {
                let wp = session.value(lattice.wp[t][u]);
                assert_eq!(wp.shape(), &[6]);
                assert!(logsumexp(wp.values()).abs() < 1e-10);
                let slot = session.value(lattice.slot[t][u]);
                assert_eq!(slot.shape(), &[4]);
                assert!(logsumexp(slot.values()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lattice_rows_depend_only_on_consumed_targets() {
        let params = init_params(&tiny_config(), 11).unwrap();
        let (s1, l1) = lattice_for(&params, 3, &[1, 2, 3], &[0, 1, 2], 0);
        let (s2, l2) = lattice_for(&params, 3, &[1, 2, 4], &[0, 1, 0], 0);
        for t in 0..3 {
            for u in 0..=2 {
                assert_eq!(
                    s1.value(l1.wp[t][u]).values(),
                    s2.value(l2.wp[t][u]).values(),
                    "row ({t},{u}) changed under a later-target edit"
                );
            }
            assert_ne!(s1.value(l1.wp[t][3]).values(), s2.value(l2.wp[t][3]).values());
        }
    }

    #[test]
    fn slot_ce_on_a_uniform_head_is_target_count_times_log_classes() {
        let mut params = init_params(&tiny_config(), 13).unwrap();
        for name in ["joint.slot.w", "joint.slot.b"] {
            params.tensors.get_mut(name).unwrap().values_mut().fill(0.0);
        }
        let (mut session, lattice) = lattice_for(&params, 3, &[1, 2], &[0, 1], 1);
        let loss = ce_slot_loss(session.tape(), &lattice).unwrap();
        let expected = 2.0 * 4.0f64.ln();
        assert!((session.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn slot_ce_with_one_frame_is_plain_per_state_ce() {
        let params = init_params(&tiny_config(), 13).unwrap();
        let (mut session, lattice) = lattice_for(&params, 1, &[1, 2], &[0, 1], 1);
        let loss = ce_slot_loss(session.tape(), &lattice).unwrap();
        let direct: f64 = (0..2)
            .map(|u| -session.value(lattice.slot[0][u]).values()[lattice.slots[u]])
            .sum();
        assert!((session.value(loss).item() - direct).abs() < 1e-12);
    }

    #[test]
    fn slot_ce_requires_targets() {
        let params = init_params(&tiny_config(), 13).unwrap();
        let (mut session, lattice) = lattice_for(&params, 2, &[], &[], 1);
        assert!(matches!(
            ce_slot_loss(session.tape(), &lattice),
            Err(LossError::EmptyTargets(_))
        ));
    }

    #[test]
    fn lattice_losses_match_grid_oracles() {
        let params = init_params(&tiny_config(), 17).unwrap();
        let tokens = vec![1, 4, 2];
        let slots = vec![0, 2, 1];
        let (mut session, lattice) = lattice_for(&params, 3, &tokens, &slots, 2);

        let mut wp_values = Vec::new();
        let mut slot_values = Vec::new();
        for t in 0..3 {
            for u in 0..=3 {
                wp_values.extend_from_slice(session.value(lattice.wp[t][u]).values());
                slot_values.extend_from_slice(session.value(lattice.slot[t][u]).values());
            }
        }
        let wp_grid = Tensor::new(vec![3, 4, 6], wp_values).unwrap();
        let slot_grid = Tensor::new(vec![3, 4, 4], slot_values).unwrap();

        let wp_parts = lattice.wp_parts(session.tape()).unwrap();
        let wp_loss = rnnt_forward(session.tape(), &wp_parts).unwrap();
        let brute = rnnt_loss_bruteforce(&wp_grid, &tokens).unwrap();
        assert!((session.value(wp_loss).item() - brute).abs() < 1e-9);

        let aligned = aligned_rnnt_loss(session.tape(), &lattice).unwrap();
        let brute_slot = rnnt_loss_bruteforce(&slot_grid, &slots).unwrap();
        let brute_combined =
            combined_loss_bruteforce(&wp_grid, &slot_grid, &tokens, &slots).unwrap();
        assert!((session.value(aligned).item() - (brute_slot + brute_combined)).abs() < 1e-9);
    }

    #[test]
    fn total_loss_is_the_weighted_component_sum() {
        let params = init_params(&tiny_config(), 19).unwrap();
        let batch = vec![
            test_utterance(3, vec![1, 2], vec![0, 1], 1, 0),
            test_utterance(2, vec![4], vec![2], 3, 1),
        ];
        let weights = LossWeights {
            wp: 0.7,
            slot: 1.3,
            intent: 0.5,
        };
        for mode in [SlotMode::Ce, SlotMode::RnntAlign] {
            let out = total_loss(&params, &batch, &weights, mode).unwrap();
            let recombined = 0.7 * out.wp + 1.3 * out.slot + 0.5 * out.intent;
            assert!(
                (out.total - recombined).abs() < 1e-9,
                "{mode}: {} vs {recombined}",
                out.total
            );
            assert!(out.total.is_finite());
            assert!(!out.grads.is_empty());
        }
    }

    #[test]
    fn total_loss_rejects_bad_inputs() {
        let params = init_params(&tiny_config(), 19).unwrap();
        let weights = LossWeights::default();
        assert!(matches!(
            total_loss(&params, &[], &weights, SlotMode::Ce),
            Err(LossError::EmptyBatch)
        ));
        let zero = LossWeights {
            wp: 0.0,
            slot: 0.0,
            intent: 0.0,
        };
        let batch = vec![test_utterance(2, vec![1], vec![0], 0, 0)];
        assert!(matches!(
            total_loss(&params, &batch, &zero, SlotMode::Ce),
            Err(LossError::BadWeights(_))
        ));
        let negative = LossWeights {
            wp: -1.0,
            ..LossWeights::default()
        };
        assert!(matches!(
            total_loss(&params, &batch, &negative, SlotMode::Ce),
            Err(LossError::BadWeights(_))
        ));
        let bad_intent = vec![test_utterance(2, vec![1], vec![0], 9, 0)];
        assert!(matches!(
            total_loss(&params, &bad_intent, &weights, SlotMode::Ce),
            Err(LossError::TargetOutOfRange { .. })
        ));
    }

    fn check_model_gradients(weights: LossWeights, mode: SlotMode, seed: u64) {
        let cfg = tiny_config();
        let params = init_params(&cfg, seed).unwrap();
        let batch = vec![
            test_utterance(4, vec![1, 2, 3], vec![0, 1, 2], 1, 10),
            test_utterance(2, vec![4], vec![2], 3, 11),
        ];
        let out = total_loss(&params, &batch, &weights, mode).unwrap();
        let report = finite_diff_check(
            |nt| {
                let p = ModelParams {
                    config: cfg.clone(),
                    tensors: nt.clone(),
                };
                total_loss(&p, &batch, &weights, mode).map(|b| b.total)
            },
            &params.tensors,
            &out.grads,
            12,
            1e-5,
            seed,
        )
        .unwrap();
        assert!(
            report.max_rel_err() < 1e-4,
            "{mode}: worst {:?}",
            report.worst()
        );
    }

    #[test]
    fn wp_rnnt_gradients_pass_finite_differences() {
        check_model_gradients(
            LossWeights {
                wp: 1.0,
                slot: 0.0,
                intent: 0.0,
            },
            SlotMode::Ce,
            21,
        );
    }

    #[test]
    fn slot_ce_gradients_pass_finite_differences() {
        check_model_gradients(
            LossWeights {
                wp: 0.0,
                slot: 1.0,
                intent: 0.0,
            },
            SlotMode::Ce,
            22,
        );
    }

    #[test]
    fn aligned_gradients_pass_finite_differences() {
        check_model_gradients(
            LossWeights {
                wp: 0.0,
                slot: 1.0,
                intent: 0.0,
            },
            SlotMode::RnntAlign,
            23,
        );
    }

    #[test]
    fn intent_gradients_pass_finite_differences() {
        check_model_gradients(
            LossWeights {
                wp: 0.0,
                slot: 0.0,
                intent: 1.0,
            },
            SlotMode::Ce,
            24,
        );
    }

    #[test]
    fn full_multitask_gradients_pass_finite_differences() {
        check_model_gradients(LossWeights::default(), SlotMode::RnntAlign, 25);
    }
}
