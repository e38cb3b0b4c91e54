mod args;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::Parser;
use pclfit_core::data::{load_subtask1_tsv, load_subtask2_records, with_negatives, TsvOptions};
use pclfit_core::ensemble::{fuse, select_top_k};
use pclfit_core::metrics::{macro_f1, prf1_positive};
use pclfit_core::trainer::{
    build_vocab, examples_from_records, kfold, lambda_sweep, multi_seed, parse_kv_text, predict, train_split,
    write_sweep_tsv, Example, SplitOptions,
};
use pclfit_core::{Checkpoint, Error, Predictions, RunConfig, Subtask, Vocabulary};

use args::{Cli, Command, DataFlags, RunFlags};

/// Invalid invocation that clap itself cannot see.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Io(io)) if io.kind() == io::ErrorKind::NotFound => 2,
        _ => e
            .downcast_ref::<io::Error>()
            .map_or(1, |io| if io.kind() == io::ErrorKind::NotFound { 2 } else { 1 }),
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train {
            run,
            data,
            fold,
            resume,
            stop_after_epoch,
        } => {
            let cfg = resolve_config(&run)?;
            if fold >= cfg.k_folds {
                return Err(usage(format!("--fold {fold} but only {} folds", cfg.k_folds)));
            }
            let out = out_dir(&cfg)?;
            let (vocab, examples) = load_examples(&cfg, &data, &out)?;
            let opts = SplitOptions {
                resume,
                stop_after_epoch,
            };
            let (meta, _) = train_split(&cfg, &vocab, &examples, fold, Some(&out), &opts)?;
            println!(
                "fold {fold}: best {:.6} after {} of {} updates{}",
                meta.best_metric,
                meta.steps_taken,
                meta.total_steps,
                if meta.stopped_early { " (stopped early)" } else { "" }
            );
            println!("checkpoint: {}", out.join("best.ckpt").display());
        }
        Command::Kfold {
            run,
            data,
            seeds,
            top_k,
        } => {
            let cfg = resolve_config(&run)?;
            let out = out_dir(&cfg)?;
            let (vocab, examples) = load_examples(&cfg, &data, &out)?;
            if seeds.is_empty() {
                let r = kfold(&cfg, &vocab, &examples, Some(&out))?;
                for (i, m) in r.report.fold_metrics.iter().enumerate() {
                    println!("fold {i}\t{m:.6}");
                }
                println!("mean\t{:.6}", r.report.mean_val);
            } else {
                let runs = multi_seed(&cfg, &vocab, &examples, &seeds, Some(&out))?;
                let reports: Vec<_> = runs.into_iter().map(|r| r.report).collect();
                for r in &reports {
                    println!("seed {}\t{:.6}", r.seed, r.mean_val);
                }
                if top_k <= reports.len() {
                    let top = select_top_k(&reports, top_k)?;
                    fs::write(out.join("selected.json"), serde_json::to_string_pretty(&top)?)?;
                    let chosen: Vec<String> = top.iter().map(|r| r.seed.to_string()).collect();
                    println!("top {top_k}: {}", chosen.join(","));
                }
            }
        }
        Command::Sweep { run, data, grid } => {
            let cfg = resolve_config(&run)?;
            let out = out_dir(&cfg)?;
            let (vocab, examples) = load_examples(&cfg, &data, &out)?;
            let rows = lambda_sweep(&cfg, &vocab, &examples, &grid, Some(&out))?;
            let path = out.join("sweep.tsv");
            write_sweep_tsv(&path, &rows)?;
            print!("{}", fs::read_to_string(&path)?);
        }
        Command::Predict {
            checkpoint,
            input,
            output,
            data,
        } => {
            let ckpt = Checkpoint::read(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let records = load_subtask1_tsv(&data.resolve(&input), &tsv_options(&data))
                .with_context(|| format!("reading {}", input.display()))?;
            let preds = predict(&ckpt, &records)?;
            match output {
                Some(path) => preds.save(&path)?,
                None => preds.write_to(io::stdout().lock())?,
            }
        }
        Command::Ensemble { preds, output } => {
            if preds.len() < 3 || preds.len() % 2 == 0 {
                return Err(usage(format!("--preds needs an odd number of at least 3 files, got {}", preds.len())));
            }
            let voters: Vec<Predictions> = preds
                .iter()
                .map(|p| Predictions::load(p).with_context(|| format!("reading {}", p.display())))
                .collect::<anyhow::Result<_>>()?;
            let fused = fuse(&voters)?;
            match output {
                Some(path) => fused.save(&path)?,
                None => fused.write_to(io::stdout().lock())?,
            }
        }
        Command::Evaluate { gold, pred, subtask } => {
            let gold = Predictions::load(&gold).with_context(|| format!("reading {}", gold.display()))?;
            let pred = Predictions::load(&pred).with_context(|| format!("reading {}", pred.display()))?;
            let predicted = pred.aligned_to(&gold.ids)?;
            if pred.len() != gold.len() {
                bail!("{} predictions for {} gold labels", pred.len(), gold.len());
            }
            match Subtask::from_number(subtask)? {
                Subtask::Binary => {
                    let flat = |v: &[Vec<u8>]| -> anyhow::Result<Vec<u8>> {
                        v.iter()
                            .map(|l| match l.as_slice() {
                                [y] => Ok(*y),
                                _ => Err(usage("subtask 1 files hold one label per line")),
                            })
                            .collect()
                    };
                    print!("{}", prf1_positive(&flat(&predicted)?, &flat(&gold.labels)?)?.report());
                }
                Subtask::Categories => print!("{}", macro_f1(&predicted, &gold.labels)?.report()),
            }
        }
    }
    Ok(())
}

/// Defaults, then `--config`, then flags.
fn resolve_config(flags: &RunFlags) -> anyhow::Result<RunConfig> {
    let mut pairs = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_kv_text(&text)?
        }
        None => Vec::new(),
    };
    pairs.extend(flags.pairs());
    let cfg = RunConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg.out_dir.clone().ok_or_else(|| usage("--out-dir (or out_dir in --config) is required"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn tsv_options(data: &DataFlags) -> TsvOptions {
    TsvOptions {
        header: data.header,
        columns: data.columns.clone(),
    }
}

/// Reads the training file, builds the vocabulary and writes it to `out/vocab.txt`.
fn load_examples(cfg: &RunConfig, data: &DataFlags, out: &Path) -> anyhow::Result<(Vocabulary, Vec<Example>)> {
    let train = cfg
        .train
        .as_ref()
        .ok_or_else(|| usage("--train (or train in --config) is required"))?;
    let path = data.resolve(train);
    let opts = tsv_options(data);
    let records = match cfg.subtask {
        Subtask::Binary => load_subtask1_tsv(&path, &opts),
        Subtask::Categories => load_subtask2_records(&path, &opts),
    }
    .with_context(|| format!("reading {}", path.display()))?;
    let records = match (cfg.subtask, cfg.include_negatives, &data.negatives) {
        (Subtask::Categories, true, Some(neg)) => {
            let neg = data.resolve(neg);
            let binary = load_subtask1_tsv(
                &neg,
                &TsvOptions {
                    header: data.header,
                    columns: None,
                },
            )
            .with_context(|| format!("reading {}", neg.display()))?;
            with_negatives(records, &binary)
        }
        (Subtask::Categories, true, None) => return Err(usage("--include-negatives needs --negatives <subtask-1 file>")),
        (_, _, Some(_)) => return Err(usage("--negatives only applies to subtask 2 with --include-negatives")),
        _ => records,
    };
    if records.is_empty() {
        return Err(usage(format!("{} holds no examples", path.display())));
    }
    let vocab = build_vocab(&records, cfg);
    vocab.save(&out.join("vocab.txt"))?;
    let examples = examples_from_records(&records, &vocab, cfg)?;
    log::info!("{} examples, vocabulary of {}", examples.len(), vocab.len());
    Ok((vocab, examples))
}
