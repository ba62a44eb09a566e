//! Adam training loop with gradient clipping, a deterministic held-out
//! split, per-epoch JSONL logging, and checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{feature_pipeline, DataError, Utterance, Vocabulary};
use crate::decoding::{greedy_decode, semantic_beam_search, BeamConfig, DecodeError};
use crate::losses::{total_loss, LossError, LossWeights, SlotMode};
use crate::metrics::{evaluate as score_predictions, EvalReport, MetricsError, Prediction};
use crate::model::{init_params, save_checkpoint, ModelConfig, ModelError, ModelParams};
use crate::numerics::{GradientMap, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("diverged at epoch {epoch} step {step}: first non-finite value in {tensor}")]
    Diverged {
        epoch: usize,
        step: usize,
        tensor: String,
    },
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Optimization settings. `learning_rate` may be zero, in which case the
/// parameters are left bit-for-bit unchanged.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::grad_clip_norm")]
    pub grad_clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub slot_mode: SlotMode,
    #[serde(default)]
    pub loss_weights: LossWeights,
}

mod defaults {
    pub fn epochs() -> usize {
        30
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn learning_rate() -> f64 {
        3e-3
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn epsilon() -> f64 {
        1e-8
    }
    pub fn grad_clip_norm() -> f64 {
        5.0
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            epsilon: defaults::epsilon(),
            grad_clip_norm: defaults::grad_clip_norm(),
            seed: 0,
            slot_mode: SlotMode::default(),
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return bad(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            ));
        }
        for (name, value) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&value) {
                return bad(format!("{name} must lie in [0, 1), got {value}"));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return bad(format!(
                "grad_clip_norm must be positive, got {}",
                self.grad_clip_norm
            ));
        }
        self.loss_weights.validate().map_err(TrainError::Loss)
    }
}

/// One line of the training log, written per epoch. Losses are means per
/// training utterance; held-out metrics come from greedy decoding and are
/// absent when the held-out split is empty.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub wp_loss: f64,
    pub slot_loss: f64,
    pub intent_loss: f64,
    /// Largest deviation over the epoch between the logged total and the
    /// weighted sum of the component losses.
    pub weight_gap: f64,
    pub held_out_wer: Option<f64>,
    pub held_out_icer: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters after the final epoch.
    pub params: ModelParams,
    /// Parameters at the best epoch, the standard pick for evaluation.
    pub best_params: ModelParams,
    pub log: Vec<EpochRecord>,
    /// Epoch whose checkpoint was selected as best on held-out metrics
    /// (lowest intent error, ties broken by word error, then earliest).
    pub best_epoch: usize,
}

const SPLITMIX_GAMMA: u64 = 0x9e3779b97f4a7c15;

/// splitmix64 finalizer; used to hash utterance indices into splits.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(SPLITMIX_GAMMA);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic 90/10 split by utterance index hash, independent of seed
/// and epoch ordering so the held-out set is stable across runs.
pub fn holdout_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for i in 0..n {
        if splitmix64(i as u64).is_multiple_of(10) {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    (train, held)
}

/// Scales `grads` in place so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut GradientMap, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm {
        grads.scale_in_place(max_norm / norm);
    }
    norm
}

/// Per-tensor first and second moment estimates.
struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamState {
    fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParams, grads: &GradientMap, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for (name, grad) in grads.iter() {
            let param = params
                .tensors
                .get_mut(name)
                .expect("gradient names a model parameter");
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            for i in 0..grad.values().len() {
                let g = grad.values()[i];
                let mi = cfg.beta1 * m.values()[i] + (1.0 - cfg.beta1) * g;
                let vi = cfg.beta2 * v.values()[i] + (1.0 - cfg.beta2) * g * g;
                m.values_mut()[i] = mi;
                v.values_mut()[i] = vi;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                param.values_mut()[i] -=
                    cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Greedy-decodes `utterances` and returns (word error rate, intent
/// classification error rate).
fn greedy_metrics(
    params: &ModelParams,
    utterances: &[&Utterance],
    vocab: &Vocabulary,
) -> Result<(f64, f64), TrainError> {
    let refs: Vec<Utterance> = utterances.iter().map(|&u| u.clone()).collect();
    let mut preds = Vec::with_capacity(refs.len());
    for u in &refs {
        let features = feature_pipeline(&u.features)?;
        let out = greedy_decode(params, &features)?;
        let top = &out.n_best[0];
        preds.push(Prediction {
            tokens: top.tokens.clone(),
            slots: top.slots.clone(),
            intent: out.intent,
        });
    }
    let report = score_predictions(&refs, &preds, vocab.other_slot())?;
    Ok((report.wer, report.icer))
}

/// Checkpoint paths derived from the output stem: the final parameters at
/// `out`, the best-validation copy at `out.best`, per-epoch snapshots at
/// `out.epochN`, and the JSONL log at `out.log.jsonl`.
pub struct CheckpointPaths {
    pub out: PathBuf,
    pub best: PathBuf,
    pub log: PathBuf,
}

impl CheckpointPaths {
    pub fn new(out: &Path) -> Self {
        Self {
            out: out.to_path_buf(),
            best: suffixed(out, ".best"),
            log: suffixed(out, ".log.jsonl"),
        }
    }

    pub fn epoch(&self, epoch: usize) -> PathBuf {
        suffixed(&self.out, &format!(".epoch{epoch}"))
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(suffix);
    PathBuf::from(name)
}

/// Trains a fresh model on `dataset`, deterministically for a given config.
/// When `out` is given, writes per-epoch checkpoints, the best and final
/// checkpoints, and a JSONL epoch log next to it.
pub fn train(
    model_cfg: &ModelConfig,
    dataset: &[Utterance],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let params = init_params(model_cfg, cfg.seed)?;
    train_from(params, dataset, vocab, cfg, out)
}

/// Continues training from existing parameters, e.g. a loaded checkpoint.
pub fn train_from(
    mut params: ModelParams,
    dataset: &[Utterance],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (train_idx, held_idx) = holdout_split(dataset.len());
    if train_idx.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let held: Vec<&Utterance> = held_idx.iter().map(|&i| &dataset[i]).collect();

    let paths = out.map(CheckpointPaths::new);
    let mut log_file = match &paths {
        Some(p) => Some(fs::File::create(&p.log).map_err(|e| TrainError::Io {
            path: p.log.clone(),
            source: e,
        })?),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new();
    let mut order = train_idx;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, f64, usize)> = None;
    let mut best_params = params.clone();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut weight_gap = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<Utterance> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let mut losses = total_loss(&params, &batch, &cfg.loss_weights, cfg.slot_mode)?;
            let recombined = cfg.loss_weights.wp * losses.wp
                + cfg.loss_weights.slot * losses.slot
                + cfg.loss_weights.intent * losses.intent;
            weight_gap = weight_gap.max((losses.total - recombined).abs());
            if !losses.total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    tensor: "loss".into(),
                });
            }
            if let Some((name, index)) = losses.grads.first_non_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    tensor: format!("grad {name}[{index}]"),
                });
            }
            sums[0] += losses.total;
            sums[1] += losses.wp;
            sums[2] += losses.slot;
            sums[3] += losses.intent;
            clip_gradients(&mut losses.grads, cfg.grad_clip_norm);
            adam.update(&mut params, &losses.grads, cfg);
        }

        let (held_out_wer, held_out_icer) = if held.is_empty() {
            (None, None)
        } else {
            let (wer, icer) = greedy_metrics(&params, &held, vocab)?;
            (Some(wer), Some(icer))
        };
        let n = order.len() as f64;
        let record = EpochRecord {
            epoch,
            total_loss: sums[0] / n,
            wp_loss: sums[1] / n,
            slot_loss: sums[2] / n,
            intent_loss: sums[3] / n,
            weight_gap,
            held_out_wer,
            held_out_icer,
        };

        let candidate = (
            held_out_icer.unwrap_or(record.total_loss),
            held_out_wer.unwrap_or(0.0),
        );
        let improved = match best {
            None => true,
            Some((icer, wer, _)) => candidate < (icer, wer),
        };
        if improved {
            best = Some((candidate.0, candidate.1, epoch));
            best_params = params.clone();
        }

        if let Some(p) = &paths {
            save_checkpoint(&params, &p.epoch(epoch))?;
        }
        if let Some(f) = &mut log_file {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| TrainError::Io {
                path: paths.as_ref().expect("log implies paths").log.clone(),
                source: e,
            })?;
        }
        log.push(record);
    }

    let best_epoch = best.map(|(_, _, e)| e).unwrap_or(cfg.epochs);
    if let Some(p) = &paths {
        save_checkpoint(&params, &p.out)?;
        save_checkpoint(&best_params, &p.best)?;
    }
    Ok(TrainOutcome {
        params,
        best_params,
        log,
        best_epoch,
    })
}

/// Beam-decodes every utterance and scores the predictions against the
/// references.
pub fn evaluate(
    params: &ModelParams,
    dataset: &[Utterance],
    vocab: &Vocabulary,
    beam: &BeamConfig,
) -> Result<EvalReport, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut preds = Vec::with_capacity(dataset.len());
    for u in dataset {
        let features = feature_pipeline(&u.features)?;
        let out = semantic_beam_search(params, &features, beam)?;
        let top = &out.n_best[0];
        preds.push(Prediction {
            tokens: top.tokens.clone(),
            slots: top.slots.clone(),
            intent: out.intent,
        });
    }
    Ok(score_predictions(dataset, &preds, vocab.other_slot())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, GrammarSpec, Template};
    use crate::model::load_checkpoint;
    use std::collections::BTreeMap;

    fn toy_grammar() -> GrammarSpec {
        let mut fillers = BTreeMap::new();
        fillers.insert(
            "Location".to_string(),
            vec!["kitchen".to_string(), "bedroom".to_string()],
        );
        fillers.insert(
            "Appliance".to_string(),
            vec!["lights".to_string(), "fan".to_string()],
        );
        GrammarSpec {
            templates: vec![
                Template {
                    pattern: "turn on the <Location> <Appliance>".to_string(),
                    intent: "TurnOnIntent".to_string(),
                },
                Template {
                    pattern: "turn off the <Location> <Appliance>".to_string(),
                    intent: "TurnOffIntent".to_string(),
                },
            ],
            fillers,
            frames_per_token: 2,
            noise_sigma: 0.05,
        }
    }

    fn tiny_model(vocab: &Vocabulary) -> ModelConfig {
        let mut cfg = ModelConfig::for_vocab(vocab);
        cfg.feat_dim = crate::data::RAW_FEATURE_DIM * crate::data::STACK_FACTOR;
        cfg.enc_layers = 1;
        cfg.enc_hidden = 8;
        cfg.enc_out = 8;
        cfg.wp_embed = 4;
        cfg.wp_hidden = 8;
        cfg.wp_out = 8;
        cfg.slot_embed = 4;
        cfg.slot_hidden = 8;
        cfg.slot_out = 8;
        cfg.joint_hidden = 8;
        cfg.intent_hidden = 8;
        cfg
    }

    fn tiny_run(n: usize) -> (ModelConfig, Vec<Utterance>, Vocabulary) {
        let (utts, vocab) = generate_corpus(&toy_grammar(), n, 11).unwrap();
        let cfg = tiny_model(&vocab);
        (cfg, utts, vocab)
    }

    #[test]
    fn holdout_split_is_deterministic_and_roughly_ten_percent() {
        let (train, held) = holdout_split(1000);
        let (train2, held2) = holdout_split(1000);
        assert_eq!(train, train2);
        assert_eq!(held, held2);
        assert_eq!(train.len() + held.len(), 1000);
        assert!(held.len() > 50 && held.len() < 200, "held {}", held.len());
        for &i in &held {
            assert!(!train.contains(&i));
        }
    }

    #[test]
    fn clip_leaves_small_gradients_alone_and_bounds_large_ones() {
        let mut grads = GradientMap::default();
        grads.accumulate("a", &Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let before = clip_gradients(&mut grads, 10.0);
        assert_eq!(before, 5.0);
        assert_eq!(grads.get("a").unwrap().values(), &[3.0, 4.0]);

        let pre = clip_gradients(&mut grads, 1.0);
        assert_eq!(pre, 5.0);
        let norm = grads.l2_norm();
        assert!(norm <= 1.0 + 1e-9, "post-clip norm {norm}");
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_a_bitwise_no_op() {
        let (cfg, utts, vocab) = tiny_run(12);
        let train_cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 0.0,
            seed: 7,
            ..TrainConfig::default()
        };
        let outcome = train(&cfg, &utts, &vocab, &train_cfg, None).unwrap();
        let fresh = init_params(&cfg, 7).unwrap();
        for (name, tensor) in fresh.tensors.iter() {
            let trained = outcome.params.tensors.get(name).unwrap();
            for (a, b) in tensor.values().iter().zip(trained.values()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} changed");
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_logs_and_params() {
        let (cfg, utts, vocab) = tiny_run(12);
        let train_cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train(&cfg, &utts, &vocab, &train_cfg, None).unwrap();
        let b = train(&cfg, &utts, &vocab, &train_cfg, None).unwrap();
        assert_eq!(
            serde_json::to_string(&a.log).unwrap(),
            serde_json::to_string(&b.log).unwrap()
        );
        for (name, tensor) in a.params.tensors.iter() {
            let other = b.params.tensors.get(name).unwrap();
            for (x, y) in tensor.values().iter().zip(other.values()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} differs");
            }
        }
    }

    #[test]
    fn logged_total_matches_weighted_components_in_both_modes() {
        let (cfg, utts, vocab) = tiny_run(12);
        for slot_mode in [SlotMode::Ce, SlotMode::RnntAlign] {
            let train_cfg = TrainConfig {
                epochs: 2,
                batch_size: 4,
                slot_mode,
                loss_weights: LossWeights {
                    wp: 1.0,
                    slot: 0.5,
                    intent: 2.0,
                },
                ..TrainConfig::default()
            };
            let outcome = train(&cfg, &utts, &vocab, &train_cfg, None).unwrap();
            for record in &outcome.log {
                assert!(record.weight_gap < 1e-9, "gap {}", record.weight_gap);
                let recombined = record.wp_loss * 1.0
                    + record.slot_loss * 0.5
                    + record.intent_loss * 2.0;
                assert!((record.total_loss - recombined).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn checkpoints_and_log_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("model.ckpt");
        let (cfg, utts, vocab) = tiny_run(12);
        let train_cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let outcome = train(&cfg, &utts, &vocab, &train_cfg, Some(&out)).unwrap();
        let paths = CheckpointPaths::new(&out);
        for path in [&paths.out, &paths.best, &paths.epoch(1), &paths.epoch(2)] {
            assert!(path.exists(), "{} missing", path.display());
        }
        let reloaded = load_checkpoint(&paths.out).unwrap();
        for (name, tensor) in outcome.params.tensors.iter() {
            assert_eq!(tensor.values(), reloaded.tensors.get(name).unwrap().values());
        }
        let text = fs::read_to_string(&paths.log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let record: EpochRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(record.epoch, 1);
        assert_eq!(
            serde_json::to_string(&record).unwrap(),
            serde_json::to_string(&outcome.log[0]).unwrap()
        );
    }

    #[test]
    fn divergence_names_the_offending_tensor() {
        let (cfg, utts, vocab) = tiny_run(8);
        let mut params = init_params(&cfg, 0).unwrap();
        params.tensors.get_mut("joint.b").unwrap().values_mut()[0] = f64::NAN;
        let train_cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let err = train_from(params, &utts, &vocab, &train_cfg, None).unwrap_err();
        match &err {
            TrainError::Diverged { epoch, step, .. } => {
                assert_eq!((*epoch, *step), (1, 1));
            }
            other => panic!("expected divergence, got {other}"),
        }
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn loss_decreases_on_a_tiny_corpus() {
        let (cfg, utts, vocab) = tiny_run(16);
        let train_cfg = TrainConfig {
            epochs: 4,
            batch_size: 4,
            seed: 1,
            ..TrainConfig::default()
        };
        let outcome = train(&cfg, &utts, &vocab, &train_cfg, None).unwrap();
        let first = outcome.log.first().unwrap().total_loss;
        let last = outcome.log.last().unwrap().total_loss;
        assert!(last < first, "no improvement: {first} -> {last}");
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                beta1: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                grad_clip_norm: 0.0,
                ..TrainConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_ok());
    }
}
