use std::path::{Path, PathBuf};

use clap::builder::BoolishValueParser;
use clap::{Args, Parser, Subcommand};
use pclfit_core::data::ColumnMap;

#[derive(Parser, Debug)]
#[command(name = "pclfit", version, about = "Train, evaluate and ensemble paragraph classifiers")]
pub struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model with a stratified fold held out for validation.
    Train {
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        data: DataFlags,
        /// Fold used for validation.
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Continue from last.ckpt and best.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after_epoch: Option<usize>,
    },
    /// k-fold cross-validation, optionally repeated over several seeds.
    Kfold {
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        data: DataFlags,
        /// Comma-separated seeds; each gets its own k-fold run.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Seeds kept for the ensemble when several are given.
        #[arg(long, default_value_t = pclfit_core::ensemble::DEFAULT_TOP_K)]
        top_k: usize,
    },
    /// One k-fold run per λ; writes sweep.tsv.
    Sweep {
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        data: DataFlags,
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',', default_values_t = pclfit_core::trainer::DEFAULT_LAMBDA_GRID)]
        grid: Vec<f64>,
    },
    /// Label paragraphs with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Paragraph TSV; a column map without `label` reads unlabelled files.
        #[arg(long)]
        input: PathBuf,
        /// Prediction file; standard output when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
    },
    /// Majority vote over prediction files.
    Ensemble {
        /// Comma-separated prediction files, an odd number of at least three.
        #[arg(long, value_delimiter = ',', required = true)]
        preds: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a prediction file against gold labels in the same format.
    Evaluate {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        subtask: u8,
    },
}

/// Run settings. Each flag overrides the same key of `--config`.
#[derive(Args, Debug, Default)]
pub struct RunFlags {
    /// File of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub subtask: Option<u8>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub head_multiplier: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup_frac: Option<f64>,
    #[arg(long)]
    pub k_folds: Option<usize>,
    #[arg(long)]
    pub eval_every_batches: Option<usize>,
    #[arg(long)]
    pub patience_rounds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = BoolishValueParser::new())]
    pub wrs: Option<bool>,
    #[arg(long, value_parser = BoolishValueParser::new())]
    pub llrd: Option<bool>,
    #[arg(long, value_parser = BoolishValueParser::new())]
    pub include_negatives: Option<bool>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub min_freq: Option<usize>,
    #[arg(long, value_parser = BoolishValueParser::new())]
    pub parallel: Option<bool>,
    /// Training TSV.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

macro_rules! pairs {
    ($self:ident, $out:ident; $($field:ident),*) => {
        $(
            if let Some(v) = &$self.$field {
                $out.push((stringify!($field).to_string(), v.to_string()));
            }
        )*
    };
}

impl RunFlags {
    /// The flags given, as `(key, value)` settings.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        pairs!(self, out; subtask, batch_size, max_len, dropout, epochs, eta, lambda, groups, head_multiplier,
            weight_decay, warmup_frac, k_folds, eval_every_batches, patience_rounds, seed, wrs, llrd,
            include_negatives, d_model, n_heads, n_layers, d_ff, min_freq, parallel);
        for (key, path) in [("train", &self.train), ("out_dir", &self.out_dir)] {
            if let Some(p) = path {
                out.push((key.to_string(), p.display().to_string()));
            }
        }
        out
    }
}

#[derive(Args, Debug, Default)]
pub struct DataFlags {
    /// Directory that relative data paths are read from.
    #[arg(long, env = "PCLFIT_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Input files start with a header line.
    #[arg(long)]
    pub header: bool,
    /// Column order of the input file, e.g. `par_id,art_id,keyword,country,text,label`.
    #[arg(long)]
    pub columns: Option<ColumnMap>,
    /// Binary-labelled TSV whose negatives join a category run (with `--include-negatives`).
    #[arg(long)]
    pub negatives: Option<PathBuf>,
}

impl DataFlags {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.data_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        }
    }
}
