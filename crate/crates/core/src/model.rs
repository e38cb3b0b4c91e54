//! Encoder, pooler, dropout and a task head assembled into one classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::NUM_CATEGORIES;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{binary_nll, decide_binary, decide_multilabel, multilabel_nll, BinaryHead, MultiLabelHead};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subtask {
    /// Binary detection.
    Binary,
    /// Seven-way multi-label categorization.
    Categories,
}

impl Subtask {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Subtask::Binary),
            2 => Ok(Subtask::Categories),
            _ => Err(Error::Config(format!("subtask must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Subtask::Binary => 1,
            Subtask::Categories => 2,
        }
    }

    pub fn num_labels(self) -> usize {
        match self {
            Subtask::Binary => 1,
            Subtask::Categories => NUM_CATEGORIES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub subtask: Subtask,
}

#[derive(Clone, Debug)]
pub enum Head {
    Binary(BinaryHead),
    MultiLabel(MultiLabelHead),
}

/// The parameters live in `store`; the classifier holds only their handles.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub head: Head,
}

impl Classifier {
    /// Parameters are registered in a fixed order, so two stores built from
    /// the same config always agree on ids and shapes.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::init(config.encoder.clone(), store, rng)?;
        let d = config.encoder.d_model;
        let head = match config.subtask {
            Subtask::Binary => Head::Binary(BinaryHead::init(store, d, rng)),
            Subtask::Categories => Head::MultiLabel(MultiLabelHead::init(store, d, NUM_CATEGORIES, rng)),
        };
        Ok(Classifier { config, encoder, head })
    }

    /// Class probabilities: `[2]` for the binary head, `[7]` for categories.
    pub fn forward<'a, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        tokens: &[u32],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let h = self.encoder.encode(tape, store, tokens, train, rng)?;
        let pooled = self.encoder.pooler(tape, store, h)?;
        let pooled = tape.dropout(pooled, self.config.encoder.dropout, train, rng)?;
        match &self.head {
            Head::Binary(b) => b.forward(tape, store, pooled),
            Head::MultiLabel(m) => m.forward(tape, store, pooled),
        }
    }

    /// Negative log-likelihood of `gold` (one bit, or one bit per category).
    pub fn loss(&self, tape: &mut Tape<'_>, probs: Var, gold: &[u8]) -> Result<Var> {
        match &self.head {
            Head::Binary(_) => match gold {
                [y] => binary_nll(tape, probs, *y),
                _ => Err(Error::Contract(format!("binary gold has {} bits", gold.len()))),
            },
            Head::MultiLabel(_) => multilabel_nll(tape, probs, gold),
        }
    }

    /// Hard decision from head probabilities, in the gold-label layout.
    pub fn decide(&self, probs: &[f64]) -> Vec<u8> {
        match &self.head {
            Head::Binary(_) => vec![decide_binary(&[probs[0], probs[1]])],
            Head::MultiLabel(_) => decide_multilabel(probs),
        }
    }

    /// Inference-mode probabilities for one sequence.
    pub fn predict_probs(&self, store: &ParamStore, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        // Dropout is off in inference, so this generator is never drawn from.
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let p = self.forward(&mut tape, store, tokens, false, &mut unused)?;
        Ok(tape.value(p).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(subtask: Subtask) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: 20,
                d_model: 8,
                n_heads: 2,
                n_layers: 2,
                d_ff: 16,
                max_len: 12,
                dropout: 0.1,
            },
            subtask,
        }
    }

    #[test]
    fn same_config_same_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut a, mut b) = (ParamStore::new(), ParamStore::new());
        Classifier::init(tiny(Subtask::Binary), &mut a, &mut rng).unwrap();
        Classifier::init(tiny(Subtask::Binary), &mut b, &mut rng).unwrap();
        assert_eq!(a.len(), b.len());
        for ((_, p), (_, q)) in a.iter().zip(b.iter()) {
            assert_eq!((&p.name, p.tensor.shape()), (&q.name, q.tensor.shape()));
        }
    }

    #[test]
    fn outputs_are_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (st, width) in [(Subtask::Binary, 2), (Subtask::Categories, 7)] {
            let mut store = ParamStore::new();
            let m = Classifier::init(tiny(st), &mut store, &mut rng).unwrap();
            let p = m.predict_probs(&store, &[2, 7, 9, 3]).unwrap();
            assert_eq!(p.len(), width);
            assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert_eq!(m.decide(&p).len(), st.num_labels());
        }
    }

    #[test]
    fn loss_backpropagates_to_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let m = Classifier::init(tiny(Subtask::Categories), &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = m.forward(&mut tape, &store, &[2, 5, 6, 3, 0], true, &mut rng).unwrap();
        let l = m.loss(&mut tape, p, &[1, 0, 0, 0, 0, 1, 0]).unwrap();
        assert!(tape.value(l)[0] > 0.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.into_param_grads().len(), store.len());
    }
}
