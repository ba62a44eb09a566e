//! The multi-task transducer network: unidirectional LSTM audio encoder,
//! two prediction networks (word pieces and slot tags) fused into one
//! decoder representation, a joint network with separate word-piece and
//! slot classification heads, and an intent head reading only the
//! word-piece branch.
//!
//! All forward math runs on a [`Tape`] owned by a [`Session`], so the same
//! code path serves training (with gradients) and decoding.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::numerics::{NamedTensors, NumericsError, Tape, Tensor, ValueId};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("config: {0}")]
    BadConfig(String),
    #[error("feature dim {got} does not match configured {expected}")]
    FeatureDimMismatch { got: usize, expected: usize },
    #[error("blank {kind} index {index} fed to the prediction network")]
    BlankInput { kind: &'static str, index: usize },
    #[error("{kind} index {index} outside label range 0..{limit}")]
    LabelOutOfRange {
        kind: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("checkpoint {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// How the two prediction-network outputs combine into one decoder vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Add,
    ConcatProject,
}

/// Network dimensions and vocabulary sizes. Vocabulary sizes count labels
/// including the BOS symbol at index 0 and excluding the blanks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "defaults::feat_dim")]
    pub feat_dim: usize,
    #[serde(default = "defaults::enc_layers")]
    pub enc_layers: usize,
    #[serde(default = "defaults::width")]
    pub enc_hidden: usize,
    #[serde(default = "defaults::width")]
    pub enc_out: usize,
    #[serde(default = "defaults::wp_embed")]
    pub wp_embed: usize,
    #[serde(default = "defaults::width")]
    pub wp_hidden: usize,
    #[serde(default = "defaults::width")]
    pub wp_out: usize,
    #[serde(default = "defaults::slot_embed")]
    pub slot_embed: usize,
    #[serde(default = "defaults::width")]
    pub slot_hidden: usize,
    #[serde(default = "defaults::width")]
    pub slot_out: usize,
    #[serde(default = "defaults::width")]
    pub joint_hidden: usize,
    #[serde(default = "defaults::intent_hidden")]
    pub intent_hidden: usize,
    #[serde(default)]
    pub fusion_mode: FusionMode,
    /// Zero means "fill from the vocabulary"; see [`ModelConfig::fill_vocab`].
    #[serde(default)]
    pub n_wp: usize,
    #[serde(default)]
    pub n_slot: usize,
    #[serde(default)]
    pub n_intent: usize,
}

mod defaults {
    pub fn feat_dim() -> usize {
        192
    }
    pub fn enc_layers() -> usize {
        2
    }
    pub fn width() -> usize {
        32
    }
    pub fn wp_embed() -> usize {
        16
    }
    pub fn slot_embed() -> usize {
        8
    }
    pub fn intent_hidden() -> usize {
        16
    }
}

impl Default for ModelConfig {
    /// Default dimensions with vocabulary counts left at zero, to be filled
    /// by [`ModelConfig::fill_vocab`]. Matches parsing `{}` with serde.
    fn default() -> Self {
        Self {
            feat_dim: defaults::feat_dim(),
            enc_layers: defaults::enc_layers(),
            enc_hidden: defaults::width(),
            enc_out: defaults::width(),
            wp_embed: defaults::wp_embed(),
            wp_hidden: defaults::width(),
            wp_out: defaults::width(),
            slot_embed: defaults::slot_embed(),
            slot_hidden: defaults::width(),
            slot_out: defaults::width(),
            joint_hidden: defaults::width(),
            intent_hidden: defaults::intent_hidden(),
            fusion_mode: FusionMode::Add,
            n_wp: 0,
            n_slot: 0,
            n_intent: 0,
        }
    }
}

impl ModelConfig {
    /// Default dimensions for a given vocabulary.
    pub fn for_vocab(vocab: &Vocabulary) -> Self {
        Self::default().fill_vocab(vocab)
    }

    /// Replaces any zero vocabulary count with the size from `vocab`, so a
    /// config file may specify dimensions only.
    pub fn fill_vocab(mut self, vocab: &Vocabulary) -> Self {
        if self.n_wp == 0 {
            self.n_wp = vocab.n_wp();
        }
        if self.n_slot == 0 {
            self.n_slot = vocab.n_slot();
        }
        if self.n_intent == 0 {
            self.n_intent = vocab.n_intent();
        }
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("feat_dim", self.feat_dim),
            ("enc_layers", self.enc_layers),
            ("enc_hidden", self.enc_hidden),
            ("enc_out", self.enc_out),
            ("wp_embed", self.wp_embed),
            ("wp_hidden", self.wp_hidden),
            ("wp_out", self.wp_out),
            ("slot_embed", self.slot_embed),
            ("slot_hidden", self.slot_hidden),
            ("slot_out", self.slot_out),
            ("joint_hidden", self.joint_hidden),
            ("intent_hidden", self.intent_hidden),
            ("n_wp", self.n_wp),
            ("n_slot", self.n_slot),
            ("n_intent", self.n_intent),
        ];
        for (name, dim) in dims {
            if dim == 0 {
                return Err(ModelError::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.fusion_mode == FusionMode::Add
            && !(self.wp_out == self.slot_out && self.slot_out == self.enc_out)
        {
            return Err(ModelError::BadConfig(format!(
                "add fusion requires wp_out == slot_out == enc_out, got {}/{}/{}",
                self.wp_out, self.slot_out, self.enc_out
            )));
        }
        Ok(())
    }

    /// Blank word-piece id (one past the labels).
    pub fn blank_wp(&self) -> usize {
        self.n_wp
    }

    pub fn blank_slot(&self) -> usize {
        self.n_slot
    }

    /// Width of the fused decoder output g_u.
    pub fn g_dim(&self) -> usize {
        self.wp_out
    }
}

/// What initializer a parameter takes.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Uniform in [-k, k] with k = 1/sqrt(fan_in).
    Uniform { fan_in: usize },
    /// All zeros.
    Zero,
    /// LSTM bias: zeros with the forget-gate block set to 1.0.
    LstmBias { hidden: usize },
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));

    for layer in 0..cfg.enc_layers {
        let input = if layer == 0 { cfg.feat_dim } else { cfg.enc_hidden };
        push(
            format!("enc.l{layer}.w"),
            vec![4 * cfg.enc_hidden, input + cfg.enc_hidden],
            Init::Uniform {
                fan_in: input + cfg.enc_hidden,
            },
        );
        push(
            format!("enc.l{layer}.b"),
            vec![4 * cfg.enc_hidden],
            Init::LstmBias {
                hidden: cfg.enc_hidden,
            },
        );
    }
    push(
        "enc.proj.w".into(),
        vec![cfg.enc_out, cfg.enc_hidden],
        Init::Uniform {
            fan_in: cfg.enc_hidden,
        },
    );
    push("enc.proj.b".into(), vec![cfg.enc_out], Init::Zero);

    push(
        "wp.embed".into(),
        vec![cfg.n_wp, cfg.wp_embed],
        Init::Uniform {
            fan_in: cfg.wp_embed,
        },
    );
    push(
        "wp.lstm.w".into(),
        vec![4 * cfg.wp_hidden, cfg.wp_embed + cfg.wp_hidden],
        Init::Uniform {
            fan_in: cfg.wp_embed + cfg.wp_hidden,
        },
    );
    push(
        "wp.lstm.b".into(),
        vec![4 * cfg.wp_hidden],
        Init::LstmBias {
            hidden: cfg.wp_hidden,
        },
    );
    push(
        "wp.proj.w".into(),
        vec![cfg.wp_out, cfg.wp_hidden],
        Init::Uniform {
            fan_in: cfg.wp_hidden,
        },
    );
    push("wp.proj.b".into(), vec![cfg.wp_out], Init::Zero);

    push(
        "slot.embed".into(),
        vec![cfg.n_slot, cfg.slot_embed],
        Init::Uniform {
            fan_in: cfg.slot_embed,
        },
    );
    push(
        "slot.lstm.w".into(),
        vec![4 * cfg.slot_hidden, cfg.slot_embed + cfg.slot_hidden],
        Init::Uniform {
            fan_in: cfg.slot_embed + cfg.slot_hidden,
        },
    );
    push(
        "slot.lstm.b".into(),
        vec![4 * cfg.slot_hidden],
        Init::LstmBias {
            hidden: cfg.slot_hidden,
        },
    );
    push(
        "slot.proj.w".into(),
        vec![cfg.slot_out, cfg.slot_hidden],
        Init::Uniform {
            fan_in: cfg.slot_hidden,
        },
    );
    push("slot.proj.b".into(), vec![cfg.slot_out], Init::Zero);

    if cfg.fusion_mode == FusionMode::ConcatProject {
        push(
            "fusion.w".into(),
            vec![cfg.g_dim(), cfg.wp_out + cfg.slot_out],
            Init::Uniform {
                fan_in: cfg.wp_out + cfg.slot_out,
            },
        );
    }

    push(
        "joint.enc.w".into(),
        vec![cfg.joint_hidden, cfg.enc_out],
        Init::Uniform {
            fan_in: cfg.enc_out,
        },
    );
    push(
        "joint.dec.w".into(),
        vec![cfg.joint_hidden, cfg.g_dim()],
        Init::Uniform {
            fan_in: cfg.g_dim(),
        },
    );
    push("joint.b".into(), vec![cfg.joint_hidden], Init::Zero);
    push(
        "joint.wp.w".into(),
        vec![cfg.n_wp + 1, cfg.joint_hidden],
        Init::Uniform {
            fan_in: cfg.joint_hidden,
        },
    );
    push("joint.wp.b".into(), vec![cfg.n_wp + 1], Init::Zero);
    push(
        "joint.slot.w".into(),
        vec![cfg.n_slot + 1, cfg.joint_hidden],
        Init::Uniform {
            fan_in: cfg.joint_hidden,
        },
    );
    push("joint.slot.b".into(), vec![cfg.n_slot + 1], Init::Zero);

    push(
        "intent.l0.w".into(),
        vec![cfg.intent_hidden, cfg.g_dim()],
        Init::Uniform {
            fan_in: cfg.g_dim(),
        },
    );
    push("intent.l0.b".into(), vec![cfg.intent_hidden], Init::Zero);
    push(
        "intent.l1.w".into(),
        vec![cfg.intent_hidden, cfg.intent_hidden],
        Init::Uniform {
            fan_in: cfg.intent_hidden,
        },
    );
    push("intent.l1.b".into(), vec![cfg.intent_hidden], Init::Zero);
    push(
        "intent.out.w".into(),
        vec![cfg.n_intent, cfg.intent_hidden],
        Init::Uniform {
            fan_in: cfg.intent_hidden,
        },
    );
    push("intent.out.b".into(), vec![cfg.n_intent], Init::Zero);

    specs
}

/// A configured network: the config plus every named weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: NamedTensors,
}

/// Draws fresh parameters: weights uniform in [-k, k] with k = 1/sqrt(fan_in),
/// biases zero except LSTM forget gates at 1.0. Deterministic per seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = NamedTensors::new();
    for (name, shape, init) in param_specs(config) {
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Uniform { fan_in } => {
                let k = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-k..k)).collect()
            }
            Init::Zero => vec![0.0; n],
            Init::LstmBias { hidden } => {
                let mut b = vec![0.0; n];
                b[hidden..2 * hidden].fill(1.0);
                b
            }
        };
        tensors.insert(name, Tensor::new(shape, values)?);
    }
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

impl ModelParams {
    /// Checks that the tensor map holds exactly the names and shapes the
    /// config implies.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let specs = param_specs(&self.config);
        if specs.len() != self.tensors.len() {
            return Err(ModelError::BadConfig(format!(
                "expected {} tensors, got {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _) in &specs {
            match self.tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::BadConfig(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                None => {
                    return Err(ModelError::BadConfig(format!("missing tensor {name}")));
                }
            }
        }
        Ok(())
    }
}

/// Per-layer (h, c) pairs of the encoder stack.
#[derive(Clone, Debug)]
pub struct EncoderState {
    layers: Vec<(ValueId, ValueId)>,
}

/// Prediction-network state after consuming a (wp, slot) pair, plus the
/// cached branch outputs and the fused decoder vector for that position.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub wp_h: ValueId,
    pub wp_c: ValueId,
    pub slot_h: ValueId,
    pub slot_c: ValueId,
    /// Word-piece branch output g^w_u (feeds the intent head).
    pub g_w: ValueId,
    /// Slot branch output g^s_u.
    pub g_s: ValueId,
    /// Fused decoder output g_u (feeds the joint network).
    pub g: ValueId,
    pub last_wp: usize,
    pub last_slot: usize,
}

/// One forward-computation context: a tape with the parameters bound as
/// leaves. Training builds losses on it and calls backward; decoding reads
/// values out and never does.
pub struct Session {
    tape: Tape,
    cfg: ModelConfig,
    ids: std::collections::BTreeMap<String, ValueId>,
}

impl Session {
    pub fn new(params: &ModelParams) -> Result<Self, ModelError> {
        params.validate()?;
        let mut tape = Tape::new();
        let mut ids = std::collections::BTreeMap::new();
        for (name, tensor) in params.tensors.iter() {
            ids.insert(name.clone(), tape.leaf(name, tensor.clone()));
        }
        Ok(Self {
            tape,
            cfg: params.config.clone(),
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tape(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        self.tape.value(id)
    }

    pub fn backward(&self, root: ValueId) -> Result<crate::numerics::GradientMap, NumericsError> {
        self.tape.backward(root)
    }

    fn p(&self, name: &str) -> ValueId {
        self.ids[name]
    }

    fn lstm_step(
        &mut self,
        w: ValueId,
        b: ValueId,
        hidden: usize,
        x: ValueId,
        h: ValueId,
        c: ValueId,
    ) -> Result<(ValueId, ValueId), NumericsError> {
        let xh = self.tape.concat(x, h)?;
        let z = self.tape.matmul(w, xh)?;
        let z = self.tape.add(z, b)?;
        let zi = self.tape.slice(z, 0, hidden)?;
        let i = self.tape.sigmoid(zi)?;
        let zf = self.tape.slice(z, hidden, hidden)?;
        let f = self.tape.sigmoid(zf)?;
        let zg = self.tape.slice(z, 2 * hidden, hidden)?;
        let g = self.tape.tanh(zg)?;
        let zo = self.tape.slice(z, 3 * hidden, hidden)?;
        let o = self.tape.sigmoid(zo)?;
        let fc = self.tape.mul(f, c)?;
        let ig = self.tape.mul(i, g)?;
        let c_next = self.tape.add(fc, ig)?;
        let ct = self.tape.tanh(c_next)?;
        let h_next = self.tape.mul(o, ct)?;
        Ok((h_next, c_next))
    }

    fn linear(&mut self, w: &str, b: Option<&str>, x: ValueId) -> Result<ValueId, NumericsError> {
        let wid = self.p(w);
        let y = self.tape.matmul(wid, x)?;
        match b {
            Some(b) => {
                let bid = self.p(b);
                self.tape.add(y, bid)
            }
            None => Ok(y),
        }
    }

    /// Fresh all-zero encoder state.
    pub fn encoder_state(&mut self) -> EncoderState {
        let layers = (0..self.cfg.enc_layers)
            .map(|_| {
                let h = self.tape.constant(Tensor::zeros(vec![self.cfg.enc_hidden]));
                let c = self.tape.constant(Tensor::zeros(vec![self.cfg.enc_hidden]));
                (h, c)
            })
            .collect();
        EncoderState { layers }
    }

    /// Runs the encoder over `features` rows (post-pipeline, T x feat_dim),
    /// advancing `state` in place. Returns one output row per input frame;
    /// each row depends only on the frames seen so far.
    pub fn encode_continue(
        &mut self,
        state: &mut EncoderState,
        features: &Tensor,
    ) -> Result<Vec<ValueId>, ModelError> {
        if features.rank() != 2 || features.shape()[1] != self.cfg.feat_dim {
            return Err(ModelError::FeatureDimMismatch {
                got: if features.rank() == 2 { features.shape()[1] } else { 0 },
                expected: self.cfg.feat_dim,
            });
        }
        let t_len = features.shape()[0];
        let mut rows = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut x = self
                .tape
                .constant(Tensor::vector(features.row(t).to_vec()));
            for layer in 0..self.cfg.enc_layers {
                let w = self.p(&format!("enc.l{layer}.w"));
                let b = self.p(&format!("enc.l{layer}.b"));
                let (h, c) = state.layers[layer];
                let (h2, c2) = self.lstm_step(w, b, self.cfg.enc_hidden, x, h, c)?;
                state.layers[layer] = (h2, c2);
                x = h2;
            }
            rows.push(self.linear("enc.proj.w", Some("enc.proj.b"), x)?);
        }
        Ok(rows)
    }

    /// One-shot encode from a fresh state.
    pub fn encode(&mut self, features: &Tensor) -> Result<Vec<ValueId>, ModelError> {
        let mut state = self.encoder_state();
        self.encode_continue(&mut state, features)
    }

    /// Decoder state after consuming the BOS pair from zero recurrent state.
    pub fn initial_decoder_state(&mut self) -> Result<DecoderState, ModelError> {
        let wp_h = self.tape.constant(Tensor::zeros(vec![self.cfg.wp_hidden]));
        let wp_c = self.tape.constant(Tensor::zeros(vec![self.cfg.wp_hidden]));
        let slot_h = self.tape.constant(Tensor::zeros(vec![self.cfg.slot_hidden]));
        let slot_c = self.tape.constant(Tensor::zeros(vec![self.cfg.slot_hidden]));
        let seed = DecoderState {
            wp_h,
            wp_c,
            slot_h,
            slot_c,
            // Placeholders; decoder_step overwrites every field.
            g_w: wp_h,
            g_s: slot_h,
            g: wp_h,
            last_wp: 0,
            last_slot: 0,
        };
        self.decoder_step(&seed, 0, 0)
    }

    /// Advances both prediction networks by one (wp, slot) label pair and
    /// fuses their outputs. Blanks are never valid inputs here.
    pub fn decoder_step(
        &mut self,
        state: &DecoderState,
        wp: usize,
        slot: usize,
    ) -> Result<DecoderState, ModelError> {
        if wp == self.cfg.blank_wp() {
            return Err(ModelError::BlankInput {
                kind: "word-piece",
                index: wp,
            });
        }
        if slot == self.cfg.blank_slot() {
            return Err(ModelError::BlankInput {
                kind: "slot",
                index: slot,
            });
        }
        if wp > self.cfg.n_wp {
            return Err(ModelError::LabelOutOfRange {
                kind: "word-piece",
                index: wp,
                limit: self.cfg.n_wp,
            });
        }
        if slot > self.cfg.n_slot {
            return Err(ModelError::LabelOutOfRange {
                kind: "slot",
                index: slot,
                limit: self.cfg.n_slot,
            });
        }

        let wp_table = self.p("wp.embed");
        let wp_x = self.tape.embed_row(wp_table, wp)?;
        let wp_w = self.p("wp.lstm.w");
        let wp_b = self.p("wp.lstm.b");
        let (wp_h, wp_c) =
            self.lstm_step(wp_w, wp_b, self.cfg.wp_hidden, wp_x, state.wp_h, state.wp_c)?;
        let g_w = self.linear("wp.proj.w", Some("wp.proj.b"), wp_h)?;

        let slot_table = self.p("slot.embed");
        let slot_x = self.tape.embed_row(slot_table, slot)?;
        let slot_w = self.p("slot.lstm.w");
        let slot_b = self.p("slot.lstm.b");
        let (slot_h, slot_c) = self.lstm_step(
            slot_w,
            slot_b,
            self.cfg.slot_hidden,
            slot_x,
            state.slot_h,
            state.slot_c,
        )?;
        let g_s = self.linear("slot.proj.w", Some("slot.proj.b"), slot_h)?;

        let g = match self.cfg.fusion_mode {
            FusionMode::Add => self.tape.add(g_w, g_s)?,
            FusionMode::ConcatProject => {
                let gg = self.tape.concat(g_w, g_s)?;
                let w = self.p("fusion.w");
                self.tape.matmul(w, gg)?
            }
        };

        Ok(DecoderState {
            wp_h,
            wp_c,
            slot_h,
            slot_c,
            g_w,
            g_s,
            g,
            last_wp: wp,
            last_slot: slot,
        })
    }

    /// Joint network over one (encoder row, decoder vector) pair. Returns
    /// log-softmax word-piece logprobs (blank at index V^w) and slot
    /// logprobs (blank at index V^s).
    pub fn joint(&mut self, h: ValueId, g: ValueId) -> Result<(ValueId, ValueId), ModelError> {
        let from_enc = self.linear("joint.enc.w", None, h)?;
        let from_dec = self.linear("joint.dec.w", None, g)?;
        let pre = self.tape.add(from_enc, from_dec)?;
        let b = self.p("joint.b");
        let pre = self.tape.add(pre, b)?;
        let hidden = self.tape.tanh(pre)?;
        let wp_logits = self.linear("joint.wp.w", Some("joint.wp.b"), hidden)?;
        let wp_logprobs = self.tape.log_softmax(wp_logits)?;
        let slot_logits = self.linear("joint.slot.w", Some("joint.slot.b"), hidden)?;
        let slot_logprobs = self.tape.log_softmax(slot_logits)?;
        Ok((wp_logprobs, slot_logprobs))
    }

    /// Intent log-distribution from the word-piece branch output at the
    /// final non-blank position.
    pub fn intent_logprobs(&mut self, g_w_final: ValueId) -> Result<ValueId, ModelError> {
        let a = self.linear("intent.l0.w", Some("intent.l0.b"), g_w_final)?;
        let a = self.tape.relu(a)?;
        let a2 = self.linear("intent.l1.w", Some("intent.l1.b"), a)?;
        let a2 = self.tape.relu(a2)?;
        let logits = self.linear("intent.out.w", Some("intent.out.b"), a2)?;
        Ok(self.tape.log_softmax(logits)?)
    }
}

/// One-shot encoder run materialized as a T x enc_out matrix.
pub fn encode_matrix(params: &ModelParams, features: &Tensor) -> Result<Tensor, ModelError> {
    let mut session = Session::new(params)?;
    let rows = session.encode(features)?;
    let mut values = Vec::with_capacity(rows.len() * params.config.enc_out);
    for id in &rows {
        values.extend_from_slice(session.value(*id).values());
    }
    Ok(Tensor::new(vec![rows.len(), params.config.enc_out], values)?)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SMRT";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes the checkpoint: "SMRT", version, length-prefixed config JSON,
/// then a count-prefixed tensor table (name, rank, dims, f64 values, all
/// little-endian). Byte-exact with `load_checkpoint`.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config_json = serde_json::to_vec(&params.config).expect("config serializes");
    out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(params.tensors.len() as u64).to_le_bytes());
    for (name, tensor) in params.tensors.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u64).to_le_bytes());
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.at + n > self.bytes.len() {
            return Err(ModelError::BadCheckpoint {
                path: self.path.display().to_string(),
                reason: format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.at,
                    self.bytes.len()
                ),
            });
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fail(&self, reason: String) -> ModelError {
        ModelError::BadCheckpoint {
            path: self.path.display().to_string(),
            reason,
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let bytes = fs::read(path).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut cur = Cursor {
        bytes: &bytes,
        at: 0,
        path,
    };
    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(cur.fail(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(cur.fail(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let config_len = cur.u64()? as usize;
    let config_bytes = cur.take(config_len)?;
    let config: ModelConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| cur.fail(format!("bad config json: {e}")))?;
    let count = cur.u64()? as usize;
    let mut tensors = NamedTensors::new();
    for _ in 0..count {
        let name_len = cur.u64()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| cur.fail(format!("tensor name is not utf-8: {e}")))?
            .to_string();
        let rank = cur.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        tensors.insert(name, Tensor::new(shape, values)?);
    }
    if cur.at != bytes.len() {
        return Err(cur.fail(format!(
            "{} trailing bytes after tensor table",
            bytes.len() - cur.at
        )));
    }
    let params = ModelParams { config, tensors };
    params.validate()?;
    Ok(params)
}
