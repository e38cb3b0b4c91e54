use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_fold, EvalPoint, Example, FoldOptions, FoldOutcome, RunConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{compose_input, multilabel_strata, stratified_kfold, tokenize, ParagraphRecord, Vocabulary};
use crate::ensemble::{Predictions, RunReport};
use crate::error::{Error, Result};
use crate::metrics::{mean, std_dev};
use crate::model::Subtask;

pub const DEFAULT_LAMBDA_GRID: [f64; 7] = [0.6, 1.6, 2.6, 3.6, 4.6, 5.6, 6.6];

/// Vocabulary over the composed inputs of `records`.
pub fn build_vocab(records: &[ParagraphRecord], cfg: &RunConfig) -> Vocabulary {
    let texts: Vec<String> = records.iter().map(compose_input).collect();
    Vocabulary::build(texts.iter().map(String::as_str), cfg.min_freq)
}

/// Tokenized examples for the configured subtask. Category runs drop
/// paragraphs without any category unless `include_negatives` is set.
pub fn examples_from_records(records: &[ParagraphRecord], vocab: &Vocabulary, cfg: &RunConfig) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let gold = match cfg.subtask {
            Subtask::Binary => vec![r
                .binary_label()
                .ok_or_else(|| Error::Config(format!("paragraph {} has no label", r.par_id)))?],
            Subtask::Categories => {
                let c = r
                    .categories
                    .ok_or_else(|| Error::Config(format!("paragraph {} has no category vector", r.par_id)))?;
                if !cfg.include_negatives && c.iter().all(|&b| b == 0) {
                    continue;
                }
                c.to_vec()
            }
        };
        out.push(Example {
            id: r.par_id.clone(),
            tokens: tokenize(&compose_input(r), vocab, cfg.max_len),
            gold,
        });
    }
    Ok(out)
}

/// Stratification labels: the binary label, or the category rule of
/// [`multilabel_strata`].
pub fn fold_strata(examples: &[Example], cfg: &RunConfig) -> Vec<usize> {
    match cfg.subtask {
        Subtask::Binary => examples.iter().map(|e| usize::from(e.gold[0])).collect(),
        Subtask::Categories => {
            let vectors: Vec<[u8; 7]> = examples
                .iter()
                .map(|e| e.gold.as_slice().try_into().expect("category gold has 7 bits"))
                .collect();
            multilabel_strata(&vectors, cfg.include_negatives, cfg.k_folds)
        }
    }
}

/// Written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config: RunConfig,
    pub seed: u64,
    pub fold: Option<usize>,
    /// Order of the boundary-wrapped terms in front of each paragraph.
    pub term_order: Vec<String>,
    pub history: Vec<EvalPoint>,
    pub best_metric: f64,
    pub steps_taken: usize,
    pub total_steps: usize,
    pub stopped_early: bool,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_sha256: Option<String>,
}

impl RunMetadata {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub struct KfoldResult {
    pub report: RunReport,
    pub folds: Vec<RunMetadata>,
    /// Best-validation model of the best fold.
    pub best: Checkpoint,
}

/// Controls for [`train_split`].
#[derive(Clone, Debug, Default)]
pub struct SplitOptions {
    /// Continue from `last.ckpt` and `best.ckpt` in the output directory.
    pub resume: bool,
    pub stop_after_epoch: Option<usize>,
}

/// Trains with stratified fold `fold` held out for validation. With `dir`,
/// writes `best.ckpt`, `last.ckpt` and `metadata.json` there.
pub fn train_split(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    examples: &[Example],
    fold: usize,
    dir: Option<&Path>,
    opts: &SplitOptions,
) -> Result<(RunMetadata, FoldOutcome)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let started = Instant::now();
    let assignment = stratified_kfold(&fold_strata(examples, cfg), cfg.k_folds, cfg.seed)?;
    let (tr, va) = assignment.split(fold)?;
    let train: Vec<Example> = tr.iter().map(|&i| examples[i].clone()).collect();
    let val: Vec<Example> = va.iter().map(|&i| examples[i].clone()).collect();
    let resume = match (opts.resume, dir) {
        (true, Some(d)) => Some((Checkpoint::read(&d.join("last.ckpt"))?, Checkpoint::read(&d.join("best.ckpt"))?)),
        (true, None) => return Err(Error::Config("resuming needs an output directory".into())),
        (false, _) => None,
    };
    let outcome = train_fold(
        cfg,
        vocab,
        &train,
        &val,
        FoldOptions {
            fold,
            stop_after_epoch: opts.stop_after_epoch,
            resume,
        },
    )?;
    let (checkpoint, checkpoint_sha256) = match dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("best.ckpt");
            let sha = outcome.best.write(&path)?;
            outcome.last.write(&dir.join("last.ckpt"))?;
            (Some(path), Some(sha))
        }
        None => (None, None),
    };
    let p = &outcome.progress;
    let meta = RunMetadata {
        config: cfg.clone(),
        seed: cfg.seed,
        fold: Some(fold),
        term_order: vec!["keyword".into(), "country".into()],
        history: p.history.clone(),
        best_metric: outcome.best_metric(),
        steps_taken: p.steps_taken(),
        total_steps: p.total_steps,
        stopped_early: p.stopped_early,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoint,
        checkpoint_sha256,
    };
    if let Some(dir) = dir {
        meta.write(&dir.join("metadata.json"))?;
    }
    log::info!("seed {} fold {fold}: {:.4}", cfg.seed, meta.best_metric);
    Ok((meta, outcome))
}

/// Every fold in turn held out for validation. With `out`, each fold writes
/// `fold_<i>/{best.ckpt,last.ckpt,metadata.json}` and the run writes
/// `report.json`; the report's checkpoint is the best fold's model.
pub fn kfold(cfg: &RunConfig, vocab: &Vocabulary, examples: &[Example], out: Option<&Path>) -> Result<KfoldResult> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let run_fold = |fold: usize| -> Result<(RunMetadata, Checkpoint)> {
        let dir = out.map(|d| d.join(format!("fold_{fold}")));
        let (meta, outcome) = train_split(cfg, vocab, examples, fold, dir.as_deref(), &SplitOptions::default())?;
        Ok((meta, outcome.best))
    };
    let results: Vec<(RunMetadata, Checkpoint)> = if cfg.parallel {
        (0..cfg.k_folds).into_par_iter().map(run_fold).collect::<Result<_>>()?
    } else {
        (0..cfg.k_folds).map(run_fold).collect::<Result<_>>()?
    };
    let metrics: Vec<f64> = results.iter().map(|(m, _)| m.best_metric).collect();
    let best_fold = (0..metrics.len())
        .max_by(|&a, &b| metrics[a].total_cmp(&metrics[b]).then(b.cmp(&a)))
        .expect("k ≥ 2");
    let (folds, mut checkpoints): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let report = RunReport::new(
        cfg.seed,
        metrics,
        folds[best_fold].checkpoint.clone().unwrap_or_default(),
    );
    if let Some(dir) = out {
        report.save(&dir.join("report.json"))?;
    }
    Ok(KfoldResult {
        report,
        best: checkpoints.swap_remove(best_fold),
        folds,
    })
}

/// One k-fold run per seed, under `out/seed_<s>/` when `out` is given.
pub fn multi_seed(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    examples: &[Example],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<KfoldResult>> {
    let run = |&seed: &u64| {
        let cfg = RunConfig { seed, ..cfg.clone() };
        let dir = out.map(|d| d.join(format!("seed_{seed}")));
        kfold(&cfg, vocab, examples, dir.as_deref())
    };
    if cfg.parallel {
        seeds.par_iter().map(run).collect()
    } else {
        seeds.iter().map(run).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean: f64,
    pub std: f64,
}

/// One k-fold run per λ; the row holds the mean and population standard
/// deviation of the fold metrics.
pub fn lambda_sweep(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    examples: &[Example],
    grid: &[f64],
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if !cfg.llrd {
        return Err(Error::Config("a λ sweep needs grouped decay enabled".into()));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty λ grid".into()));
    }
    let run = |&lambda: &f64| -> Result<SweepRow> {
        let cfg = RunConfig { lambda, ..cfg.clone() };
        let dir = out.map(|d| d.join(format!("lambda_{lambda}")));
        let r = kfold(&cfg, vocab, examples, dir.as_deref())?;
        Ok(SweepRow {
            lambda,
            mean: mean(&r.report.fold_metrics),
            std: std_dev(&r.report.fold_metrics),
        })
    };
    if cfg.parallel {
        grid.par_iter().map(run).collect()
    } else {
        grid.iter().map(run).collect()
    }
}

/// `lambda<TAB>mean<TAB>std` with a header line.
pub fn write_sweep_tsv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "lambda\tmean\tstd")?;
    for r in rows {
        writeln!(w, "{}\t{:.6}\t{:.6}", r.lambda, r.mean, r.std)?;
    }
    w.flush()?;
    Ok(())
}

/// Hard predictions of a checkpointed model, keyed by paragraph id.
pub fn predict(checkpoint: &Checkpoint, records: &[ParagraphRecord]) -> Result<Predictions> {
    let (model, store, vocab) = checkpoint.restore_model()?;
    let max_len = model.config.encoder.max_len;
    let mut out = Predictions::default();
    for r in records {
        let tokens = tokenize(&compose_input(r), &vocab, max_len);
        out.ids.push(r.par_id.clone());
        out.labels.push(model.decide(&model.predict_probs(&store, &tokens)?));
    }
    Ok(out)
}
