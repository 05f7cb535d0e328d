//! Deep-supervision loss: per-stage binary cross-entropy combined with fixed
//! stage weights, finest stage first.

pub use crate::ops::bce_loss;
pub use crate::ops::BCE_EPSILON;

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Stage weights, indexed finest-first: the final full-resolution output
/// carries `alpha[0]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: [1.0, 0.5, 0.2],
        }
    }
}

impl LossWeights {
    pub fn new(alpha: [f64; 3]) -> Result<Self> {
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::config(format!(
                "loss weights must be finite and non-negative, got {alpha:?}"
            )));
        }
        Ok(LossWeights { alpha })
    }
}

/// Weighted sum of exactly three per-stage losses, ordered finest first.
pub fn total_loss<T: Scalar>(
    tape: &Tape<T>,
    per_stage_losses: &[Tensor<T>],
    weights: &LossWeights,
) -> Result<Tensor<T>> {
    if per_stage_losses.len() != 3 {
        return Err(Error::contract(format!(
            "total_loss expects exactly 3 stage losses, got {}",
            per_stage_losses.len()
        )));
    }
    let mut acc = ops::scale(
        tape,
        &per_stage_losses[0],
        T::from_f64(weights.alpha[0]),
    );
    for (loss, &alpha) in per_stage_losses[1..].iter().zip(&weights.alpha[1..]) {
        let term = ops::scale(tape, loss, T::from_f64(alpha));
        acc = ops::add(tape, &acc, &term)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::seeded_rng;
    use rand::RngExt;

    #[test]
    fn weighted_sum_hand_case() {
        let tape = Tape::inference();
        let losses = vec![
            Tensor::<f64>::scalar(0.3),
            Tensor::<f64>::scalar(0.4),
            Tensor::<f64>::scalar(0.5),
        ];
        let w = LossWeights::default();
        let total = total_loss(&tape, &losses, &w).unwrap().item().unwrap();
        assert!((total - 0.6).abs() < 1e-12, "got {total}");
    }

    #[test]
    fn finest_only_weighting_reduces_to_first_stage() {
        let tape = Tape::inference();
        let losses = vec![
            Tensor::<f64>::scalar(0.37),
            Tensor::<f64>::scalar(9.9),
            Tensor::<f64>::scalar(4.2),
        ];
        let w = LossWeights::new([1.0, 0.0, 0.0]).unwrap();
        let total = total_loss(&tape, &losses, &w).unwrap().item().unwrap();
        assert_eq!(total, 0.37);
    }

    #[test]
    fn random_weights_match_dot_product() {
        let mut rng = seeded_rng(51);
        let tape = Tape::inference();
        for _ in 0..20 {
            let ls: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0)).collect();
            let al: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.5)).collect();
            let tensors: Vec<Tensor<f64>> = ls.iter().map(|&v| Tensor::scalar(v)).collect();
            let w = LossWeights::new([al[0], al[1], al[2]]).unwrap();
            let total = total_loss(&tape, &tensors, &w).unwrap().item().unwrap();
            let expect: f64 = ls.iter().zip(&al).map(|(l, a)| l * a).sum();
            assert!((total - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_stage_count_and_negative_weights() {
        let tape = Tape::inference();
        let two = vec![Tensor::<f64>::scalar(0.1), Tensor::scalar(0.2)];
        assert!(total_loss(&tape, &two, &LossWeights::default()).is_err());
        assert!(LossWeights::new([1.0, -0.1, 0.2]).is_err());
    }
}
