//! Weighted random sampling for class imbalance.
//!
//! Each example is weighted `1/√κ` by the training-set share `κ` of its
//! class, and an epoch draws as many indices as there are examples,
//! independently and with replacement. In expectation the positive class
//! then makes up `√κ_p / (√κ_p + √κ_n)` of an epoch.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleWeights {
    pub weights: Vec<f64>,
    pub kappa_pos: f64,
    pub kappa_neg: f64,
}

impl SampleWeights {
    pub fn positive_weight(&self) -> f64 {
        1.0 / self.kappa_pos.sqrt()
    }

    pub fn negative_weight(&self) -> f64 {
        1.0 / self.kappa_neg.sqrt()
    }

    /// Expected fraction of positive draws per epoch.
    pub fn expected_positive_fraction(&self) -> f64 {
        let (p, n) = (self.kappa_pos.sqrt(), self.kappa_neg.sqrt());
        p / (p + n)
    }

    pub fn draw_epoch(&self, n: usize, seed: u64) -> Result<Vec<usize>> {
        draw_epoch(&self.weights, n, seed)
    }
}

/// `(κ_p, κ_n)`: the positive and negative shares of `labels` (1 = positive).
pub fn class_ratios(labels: &[u8]) -> Result<(f64, f64)> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Degenerate(format!(
            "{pos} positives among {} examples; both classes are required",
            labels.len()
        )));
    }
    let kp = pos as f64 / labels.len() as f64;
    Ok((kp, 1.0 - kp))
}

/// Per-example weights `1/√κ_p` for positives and `1/√κ_n` for negatives.
pub fn wrs_weights(labels: &[u8]) -> Result<SampleWeights> {
    let (kappa_pos, kappa_neg) = class_ratios(labels)?;
    let (wp, wn) = (1.0 / kappa_pos.sqrt(), 1.0 / kappa_neg.sqrt());
    Ok(SampleWeights {
        weights: labels.iter().map(|&y| if y == 1 { wp } else { wn }).collect(),
        kappa_pos,
        kappa_neg,
    })
}

/// `n` indices drawn with replacement, `P(i) = w_i / Σ w`. Deterministic in `seed`.
pub fn draw_epoch(weights: &[f64], n: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_epoch_with(weights, n, &mut rng)
}

pub fn draw_epoch_with<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Contract("epoch length must be at least 1".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::Contract(format!("sampling weight {w} is not positive")));
    }
    let dist = WeightedIndex::new(weights).map_err(|e| Error::Contract(format!("sampling weights: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}
