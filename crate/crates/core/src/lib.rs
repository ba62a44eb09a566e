//! Streaming multi-task RNN transducer for end-to-end spoken language
//! understanding.
//!
//! One network jointly predicts word pieces, slot tags, and an utterance
//! intent from acoustic frames. The pieces:
//!
//! * [`numerics`]: f64 tensors and a reverse-mode tape with finite-difference
//!   gradient checking.
//! * [`data`]: synthetic grammar corpus generation, the frame stacking
//!   pipeline, and JSONL dataset I/O.
//! * [`model`]: LSTM encoder, dual prediction networks with fused decoder
//!   output, multi-output joint network, intent head, checkpoint format.
//! * [`losses`]: transducer lattice, forward-algorithm loss with a path
//!   enumeration oracle, intent and slot cross entropies, the aligned
//!   transducer loss, and the weighted total.
//! * [`decoding`]: greedy and semantic beam search, an exhaustive decode
//!   oracle, and a streaming session equivalent to one-shot decoding.
//! * [`metrics`]: WER, SemER, IRER, ICER, relative reduction.
//! * [`trainer`]: Adam with global-norm clipping, deterministic epochs,
//!   held-out evaluation.
//! * [`cli`]: the `smrt` command line.

pub mod cli;
pub mod data;
pub mod decoding;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod selftest;
pub mod trainer;
