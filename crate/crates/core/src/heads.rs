//! Classification heads and their losses: a two-way softmax head trained with
//! cross-entropy, and an M-way sigmoid head trained with binary cross-entropy.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::linear;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamRole, ParamStore, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Decision threshold on a positive-class or per-category probability.
/// A probability exactly at the threshold decides negative.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryHead {
    /// `[2 × d_model]`
    pub weight: ParamId,
    /// `[2]`
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiLabelHead {
    /// `[M × d_model]`
    pub weight: ParamId,
    /// `[M]`
    pub bias: ParamId,
    pub num_labels: usize,
}

fn init_dense<R: Rng + ?Sized>(store: &mut ParamStore, out: usize, d_model: usize, rng: &mut R) -> (ParamId, ParamId) {
    let w = store.add(
        "classifier.weight",
        ParamRole::Classifier,
        true,
        Tensor::normal(&[out, d_model], 0.02, rng),
    );
    let b = store.add("classifier.bias", ParamRole::Classifier, false, Tensor::zeros(&[out]));
    (w, b)
}

impl BinaryHead {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, d_model: usize, rng: &mut R) -> Self {
        let (weight, bias) = init_dense(store, 2, d_model, rng);
        BinaryHead { weight, bias }
    }

    /// `softmax(W h + b)`; index 1 is the positive class.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, h: Var) -> Result<Var> {
        let d = tape.value(h).len();
        let row = tape.reshape(h, &[1, d])?;
        let logits = linear(tape, store, row, self.weight, self.bias)?;
        let probs = tape.softmax(logits)?;
        tape.reshape(probs, &[2])
    }
}

impl MultiLabelHead {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, d_model: usize, num_labels: usize, rng: &mut R) -> Self {
        let (weight, bias) = init_dense(store, num_labels, d_model, rng);
        MultiLabelHead {
            weight,
            bias,
            num_labels,
        }
    }

    /// `σ(Wᶜ h + bᶜ)`, one independent probability per label.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, h: Var) -> Result<Var> {
        let d = tape.value(h).len();
        let row = tape.reshape(h, &[1, d])?;
        let logits = linear(tape, store, row, self.weight, self.bias)?;
        let probs = tape.sigmoid(logits);
        tape.reshape(probs, &[self.num_labels])
    }
}

/// Cross-entropy of one two-way prediction on the tape, unaveraged.
pub fn binary_nll(tape: &mut Tape<'_>, probs: Var, gold: u8) -> Result<Var> {
    if tape.value(probs).len() != 2 {
        return Err(Error::shape("binary_nll", tape.shape(probs), &[2]));
    }
    let row = tape.reshape(probs, &[1, 2])?;
    let pos = tape.slice_cols(row, 1, 1)?;
    let p = if gold == 1 { pos } else { tape.affine(pos, -1.0, 1.0) };
    let lp = tape.ln_clamped(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let s = tape.sum(lp);
    Ok(tape.scale(s, -1.0))
}

/// Binary cross-entropy of one M-way prediction on the tape, summed over labels.
pub fn multilabel_nll(tape: &mut Tape<'_>, probs: Var, gold: &[u8]) -> Result<Var> {
    if tape.value(probs).len() != gold.len() {
        return Err(Error::Contract(format!(
            "gold vector has {} labels, prediction has {}",
            gold.len(),
            tape.value(probs).len()
        )));
    }
    let y: Vec<f64> = gold.iter().map(|&g| f64::from(g)).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let lp = tape.ln_clamped(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = tape.affine(probs, -1.0, 1.0);
    let lq = tape.ln_clamped(q, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let a = tape.mul_const(lp, y)?;
    let b = tape.mul_const(lq, not_y)?;
    let t = tape.add(a, b)?;
    let s = tape.sum(t);
    Ok(tape.scale(s, -1.0))
}

/// Batch-mean of per-example losses already recorded on one tape.
pub fn batch_mean(tape: &mut Tape<'_>, losses: &[Var]) -> Result<Var> {
    let (&first, rest) = losses
        .split_first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let mut total = first;
    for &l in rest {
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, 1.0 / losses.len() as f64))
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean over the batch of `−[y ln ŷ + (1−y) ln(1−ŷ)]`, where `ŷ` is the
/// positive-class probability `probs[i][1]`.
pub fn binary_loss(probs: &[[f64; 2]], golds: &[u8]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if probs.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} golds",
            probs.len(),
            golds.len()
        )));
    }
    let total: f64 = probs
        .iter()
        .zip(golds)
        .map(|(p, &y)| {
            let yhat = clamp(p[1]);
            if y == 1 {
                -yhat.ln()
            } else {
                -clamp(1.0 - yhat).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Mean over samples of the per-label binary cross-entropy summed over labels.
pub fn bce_loss(probs: &[Vec<f64>], golds: &[Vec<u8>], num_labels: usize) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if probs.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} golds",
            probs.len(),
            golds.len()
        )));
    }
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(golds) {
        if y.len() != num_labels || p.len() != num_labels {
            return Err(Error::Contract(format!(
                "expected {num_labels} labels, got prediction {} / gold {}",
                p.len(),
                y.len()
            )));
        }
        for (&pc, &yc) in p.iter().zip(y) {
            let pc = clamp(pc);
            total -= if yc == 1 { pc.ln() } else { clamp(1.0 - pc).ln() };
        }
    }
    Ok(total / probs.len() as f64)
}

pub fn decide_binary(probs: &[f64; 2]) -> u8 {
    u8::from(probs[1] > DECISION_THRESHOLD)
}

pub fn decide_multilabel(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p > DECISION_THRESHOLD)).collect()
}
