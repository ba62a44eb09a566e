//! f64 tensors, a reverse-mode tape, and finite-difference gradient checks.
//!
//! Every probability in this crate lives in log space and every value is
//! f64; the tape is the single source of gradients for training and for
//! the gradient-check oracles.

mod check;
mod tape;
mod tensor;

pub use check::{finite_diff_check, FiniteDiffReport, ProbeResult};
pub use tape::{GradientMap, Tape, ValueId};
pub use tensor::{NamedTensors, Tensor};

/// Errors raised by tensor construction and tape primitives.
#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: index {index} out of bounds for shape {shape:?}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} values, got {got}")]
    ValueCount {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("value id {0} is not on this tape")]
    UnknownValue(usize),
}

/// log(exp(a) + exp(b)) without overflow; -inf is absorbing on both sides.
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Stable log(sum(exp(xs))); empty input is -inf.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logaddexp_handles_neg_infinity() {
        assert_eq!(logaddexp(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert_eq!(logaddexp(f64::NEG_INFINITY, -1.5), -1.5);
        assert_eq!(logaddexp(-1.5, f64::NEG_INFINITY), -1.5);
    }

    #[test]
    fn logaddexp_matches_direct_formula() {
        let got = logaddexp(-1.0, -2.0);
        let want = ((-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_of_equal_terms() {
        let got = logsumexp(&[-3.0, -3.0, -3.0]);
        assert!((got - (-3.0 + 3.0f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
    }
}
