//! The training recipe: sampled epochs, grouped optimization under a warmup
//! and cosine schedule, periodic validation with early stopping, and the
//! k-fold, multi-seed and λ-sweep drivers built on it.

mod config;
mod runs;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{parse_kv_text, RunConfig};
pub use runs::{
    build_vocab, examples_from_records, fold_strata, kfold, lambda_sweep, multi_seed, predict, train_split, write_sweep_tsv,
    KfoldResult, RunMetadata, SplitOptions, SweepRow, DEFAULT_LAMBDA_GRID,
};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::metrics::{macro_f1, mean, prf1_positive};
use crate::model::{Classifier, Subtask};
use crate::optim::{build_grouped_llrd, cosine_warmup_multiplier, single_group, AdamW, ScheduleState};
use crate::sampler::{draw_epoch_with, wrs_weights};
use crate::tensor::ParamStore;

/// A tokenized example with its gold labels (one bit, or one per category).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<u32>,
    pub gold: Vec<u8>,
}

impl Example {
    /// 1 when any gold bit is set.
    pub fn is_positive(&self) -> u8 {
        u8::from(self.gold.contains(&1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub step: usize,
    /// Positive-class F1, or macro F1 over categories.
    pub metric: f64,
    /// Positive-class recall, or mean per-category recall.
    pub recall: f64,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub preds: Vec<Vec<u8>>,
    pub metric: f64,
    pub recall: f64,
}

/// Scores hard predictions with the subtask's selection metric.
pub fn score(subtask: Subtask, preds: &[Vec<u8>], golds: &[Vec<u8>]) -> Result<(f64, f64)> {
    match subtask {
        Subtask::Binary => {
            let p: Vec<u8> = preds.iter().map(|v| v[0]).collect();
            let g: Vec<u8> = golds.iter().map(|v| v[0]).collect();
            let s = prf1_positive(&p, &g)?;
            Ok((s.f1, s.recall))
        }
        Subtask::Categories => {
            let s = macro_f1(preds, golds)?;
            let recalls: Vec<f64> = s.counts.iter().map(|c| c.recall()).collect();
            Ok((s.macro_f1, mean(&recalls)))
        }
    }
}

/// Model, parameters, optimizer and generator of one training run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Classifier,
    pub store: ParamStore,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub total_steps: usize,
}

fn run_rng(seed: u64, fold: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + fold as u64);
    rng
}

impl Trainer {
    /// Fresh model for `n_train` training examples. Initialization depends on
    /// the seed only; sampling and dropout also depend on the fold.
    pub fn new(cfg: &RunConfig, vocab_size: usize, n_train: usize, fold: usize) -> Result<Self> {
        cfg.validate()?;
        if n_train == 0 {
            return Err(Error::Config("no training examples".into()));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = Classifier::init(cfg.model_config(vocab_size), &mut store, &mut init_rng)?;
        let groups = if cfg.llrd {
            build_grouped_llrd(&store, cfg.n_layers, &cfg.llrd_config())?
        } else {
            single_group(&store, cfg.eta, cfg.weight_decay)
        };
        let opt = AdamW::new(groups, &store)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            store,
            opt,
            rng: run_rng(cfg.seed, fold),
            total_steps: cfg.epochs * n_train.div_ceil(cfg.batch_size),
        })
    }

    /// Schedule multiplier for the next update; update `s` (1-based) uses
    /// schedule step `s`, so the last planned update runs at multiplier 0.
    pub fn next_multiplier(&self) -> Result<f64> {
        let step = self.opt.step_count() as usize + 1;
        cosine_warmup_multiplier(&ScheduleState {
            step,
            total_steps: self.total_steps,
            warmup_frac: self.cfg.warmup_frac,
        })
    }

    /// Example order for one epoch: `n` weighted draws with replacement, or a
    /// shuffled permutation when `weights` is `None`.
    pub fn epoch_order(&mut self, n: usize, weights: Option<&[f64]>) -> Result<Vec<usize>> {
        match weights {
            Some(w) => draw_epoch_with(w, n, &mut self.rng),
            None => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut self.rng);
                Ok(order)
            }
        }
    }

    /// One optimizer update on the mean loss of `batch`; returns that mean.
    pub fn train_batch(&mut self, batch: &[&Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mult = self.next_multiplier()?;
        let inv = 1.0 / batch.len() as f64;
        self.store.zero_grad();
        let mut total = 0.0;
        for ex in batch {
            let diagnose = |what: String| {
                let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
                Error::NonFinite(format!(
                    "{what} on example {} at update {} (lr multiplier {mult}); batch {ids:?}",
                    ex.id,
                    self.opt.step_count() + 1
                ))
            };
            let (loss, grads) = {
                let mut tape = Tape::new();
                let forward = self
                    .model
                    .forward(&mut tape, &self.store, &ex.tokens, true, &mut self.rng)
                    .and_then(|p| self.model.loss(&mut tape, p, &ex.gold));
                let l = match forward {
                    Ok(l) => l,
                    Err(e) if self.store.iter().any(|(_, p)| !p.tensor.is_finite()) => {
                        return Err(diagnose(format!("non-finite parameters ({e})")))
                    }
                    Err(e) => return Err(e),
                };
                let loss = tape.value(l)[0];
                if !loss.is_finite() {
                    return Err(diagnose(format!("loss {loss}")));
                }
                let scaled = tape.scale(l, inv);
                tape.backward(scaled)?;
                (loss, tape.into_param_grads())
            };
            total += loss;
            for (id, g) in grads {
                self.store.accumulate(id, &g)?;
            }
        }
        self.opt.step(&mut self.store, mult)?;
        Ok(total * inv)
    }

    pub fn evaluate(&self, examples: &[Example]) -> Result<Evaluation> {
        evaluate_model(&self.model, &self.store, examples)
    }
}

pub fn evaluate_model(model: &Classifier, store: &ParamStore, examples: &[Example]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Config("no evaluation examples".into()));
    }
    let preds: Vec<Vec<u8>> = examples
        .iter()
        .map(|ex| Ok(model.decide(&model.predict_probs(store, &ex.tokens)?)))
        .collect::<Result<_>>()?;
    let golds: Vec<Vec<u8>> = examples.iter().map(|e| e.gold.clone()).collect();
    let (metric, recall) = score(model.config.subtask, &preds, &golds)?;
    Ok(Evaluation { preds, metric, recall })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldProgress {
    pub fold: usize,
    pub epochs_done: usize,
    pub total_steps: usize,
    pub history: Vec<EvalPoint>,
    pub best_metric: Option<f64>,
    pub best_step: usize,
    pub evals_since_best: usize,
    pub stopped_early: bool,
}

impl FoldProgress {
    pub fn steps_taken(&self) -> usize {
        self.history.last().map_or(0, |p| p.step)
    }
}

#[derive(Serialize, Deserialize)]
struct RunState {
    config: RunConfig,
    progress: FoldProgress,
}

#[derive(Clone, Debug, Default)]
pub struct FoldOptions {
    pub fold: usize,
    /// Return after this many completed epochs, as if interrupted.
    pub stop_after_epoch: Option<usize>,
    /// `(last, best)` checkpoints of an interrupted run to continue from.
    pub resume: Option<(Checkpoint, Checkpoint)>,
}

pub struct FoldOutcome {
    pub progress: FoldProgress,
    /// Parameters at the best validation metric.
    pub best: Checkpoint,
    /// Full state after the last completed update, for resuming.
    pub last: Checkpoint,
}

impl FoldOutcome {
    pub fn best_metric(&self) -> f64 {
        self.progress.best_metric.unwrap_or(0.0)
    }
}

/// Trains on `train`, validating on `val` every `eval_every_batches` updates
/// and at the end of each epoch. Stops after `patience_rounds` evaluations
/// without a strict improvement, or after `epochs` epochs.
pub fn train_fold(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    train: &[Example],
    val: &[Example],
    opts: FoldOptions,
) -> Result<FoldOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "fold needs training and validation examples, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let mut trainer = Trainer::new(cfg, vocab.len(), train.len(), opts.fold)?;
    let weights = if cfg.wrs {
        let labels: Vec<u8> = train.iter().map(Example::is_positive).collect();
        Some(wrs_weights(&labels)?.weights)
    } else {
        None
    };
    let mut progress = FoldProgress {
        fold: opts.fold,
        epochs_done: 0,
        total_steps: trainer.total_steps,
        history: Vec::new(),
        best_metric: None,
        best_step: 0,
        evals_since_best: 0,
        stopped_early: false,
    };
    let mut best_params = trainer.store.snapshot();

    if let Some((last, best)) = &opts.resume {
        let state: RunState = serde_json::from_value(last.header.run.clone())?;
        if state.config != *cfg || state.progress.fold != opts.fold {
            return Err(Error::Checkpoint("resume state belongs to a different run".into()));
        }
        let (_, store, _) = last.restore_model()?;
        trainer.opt = last
            .restore_optimizer(&store)?
            .ok_or_else(|| Error::Checkpoint("resume checkpoint lacks optimizer state".into()))?;
        trainer.rng = last
            .restore_rng()?
            .ok_or_else(|| Error::Checkpoint("resume checkpoint lacks generator state".into()))?;
        trainer.store = store;
        best_params = best.params.clone();
        progress = state.progress;
    }

    let n_batches = train.len().div_ceil(cfg.batch_size);
    'epochs: while progress.epochs_done < cfg.epochs && !progress.stopped_early {
        let epoch = progress.epochs_done;
        let order = trainer.epoch_order(train.len(), weights.as_deref())?;
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            loss_sum += trainer.train_batch(&batch)?;
            loss_n += 1;
            if (b + 1) % cfg.eval_every_batches == 0 || b + 1 == n_batches {
                let eval = trainer.evaluate(val)?;
                let step = trainer.opt.step_count() as usize;
                progress.history.push(EvalPoint {
                    epoch,
                    step,
                    metric: eval.metric,
                    recall: eval.recall,
                    train_loss: loss_sum / loss_n as f64,
                });
                (loss_sum, loss_n) = (0.0, 0);
                if progress.best_metric.is_none_or(|m| eval.metric > m) {
                    progress.best_metric = Some(eval.metric);
                    progress.best_step = step;
                    progress.evals_since_best = 0;
                    best_params = trainer.store.snapshot();
                } else {
                    progress.evals_since_best += 1;
                    if progress.evals_since_best >= cfg.patience_rounds {
                        progress.stopped_early = true;
                        log::info!("fold {}: early stop at update {step}", opts.fold);
                        break 'epochs;
                    }
                }
            }
        }
        progress.epochs_done += 1;
        log::info!(
            "fold {} epoch {}: best {:.4}",
            opts.fold,
            progress.epochs_done,
            progress.best_metric.unwrap_or(0.0)
        );
        if opts.stop_after_epoch == Some(progress.epochs_done) {
            break;
        }
    }

    let run = serde_json::to_value(RunState {
        config: cfg.clone(),
        progress: progress.clone(),
    })?;
    let last = Checkpoint::capture(&trainer.model, &trainer.store, vocab, Some(&trainer.opt), Some(&trainer.rng), run.clone());
    trainer.store.restore(&best_params)?;
    let best = Checkpoint::capture(&trainer.model, &trainer.store, vocab, None, None, run);
    Ok(FoldOutcome { progress, best, last })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, SyntheticSpec};

    fn small_cfg() -> RunConfig {
        let mut c = RunConfig::new(Subtask::Binary);
        c.d_model = 16;
        c.n_heads = 2;
        c.n_layers = 3;
        c.d_ff = 32;
        c.max_len = 40;
        c.dropout = 0.1;
        c.epochs = 2;
        c.eta = 1e-3;
        c.eval_every_batches = 5;
        c.patience_rounds = 100;
        c
    }

    fn data(n: usize) -> (Vocabulary, Vec<Example>) {
        let recs = generate(&SyntheticSpec {
            n,
            positive_frac: 0.25,
            ..Default::default()
        })
        .unwrap();
        let cfg = small_cfg();
        let vocab = build_vocab(&recs, &cfg);
        let ex = examples_from_records(&recs, &vocab, &cfg).unwrap();
        (vocab, ex)
    }

    #[test]
    fn step_count_matches_plan_without_early_stop() {
        let (vocab, ex) = data(50);
        let cfg = small_cfg();
        let out = train_fold(&cfg, &vocab, &ex[..38], &ex[38..], FoldOptions::default()).unwrap();
        assert_eq!(out.progress.total_steps, 2 * 38usize.div_ceil(4));
        assert_eq!(out.progress.steps_taken(), out.progress.total_steps);
        assert_eq!(out.last.header.optimizer.as_ref().unwrap().step as usize, out.progress.total_steps);
    }

    #[test]
    fn patience_stops_early() {
        let (vocab, ex) = data(50);
        let mut cfg = small_cfg();
        cfg.patience_rounds = 1;
        cfg.eval_every_batches = 1;
        cfg.epochs = 5;
        let out = train_fold(&cfg, &vocab, &ex[..38], &ex[38..], FoldOptions::default()).unwrap();
        assert!(out.progress.stopped_early);
        assert!(out.progress.steps_taken() < out.progress.total_steps);
        let best = out.progress.history.iter().map(|p| p.metric).fold(f64::MIN, f64::max);
        assert_eq!(out.progress.best_metric, Some(best));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (vocab, ex) = data(40);
        let cfg = small_cfg();
        let full = train_fold(&cfg, &vocab, &ex[..30], &ex[30..], FoldOptions::default()).unwrap();
        let half = train_fold(
            &cfg,
            &vocab,
            &ex[..30],
            &ex[30..],
            FoldOptions {
                stop_after_epoch: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(half.progress.epochs_done, 1);
        let last = Checkpoint::from_bytes(&half.last.to_bytes().unwrap()).unwrap();
        let resumed = train_fold(
            &cfg,
            &vocab,
            &ex[..30],
            &ex[30..],
            FoldOptions {
                resume: Some((last, half.best)),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.progress, full.progress);
        assert_eq!(resumed.last.to_bytes().unwrap(), full.last.to_bytes().unwrap());
        assert_eq!(resumed.best.to_bytes().unwrap(), full.best.to_bytes().unwrap());
    }

    #[test]
    fn empty_splits_refused() {
        let (vocab, ex) = data(20);
        assert!(matches!(
            train_fold(&small_cfg(), &vocab, &[], &ex, FoldOptions::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn poisoned_parameters_abort_with_diagnostics() {
        let (vocab, ex) = data(20);
        let mut t = Trainer::new(&small_cfg(), vocab.len(), 20, 0).unwrap();
        let id = t.store.ids().last().unwrap();
        t.store.get_mut(id).tensor.data_mut()[0] = f64::NAN;
        let batch: Vec<&Example> = ex[..4].iter().collect();
        match t.train_batch(&batch) {
            Err(Error::NonFinite(msg)) => {
                assert!(msg.contains("lr multiplier"), "{msg}");
                assert!(msg.contains(&ex[0].id), "{msg}");
            }
            other => panic!("{:?}", other.map(|_| ())),
        }
    }
}
