//! Multi-seed model selection and hard-label majority voting.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::NUM_CATEGORIES;
use crate::error::{Error, Result};
use crate::metrics::mean;

pub const DEFAULT_SEEDS: [u64; 5] = [13, 21, 42, 87, 100];
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub fold_metrics: Vec<f64>,
    pub mean_val: f64,
    pub checkpoint: PathBuf,
}

impl RunReport {
    pub fn new(seed: u64, fold_metrics: Vec<f64>, checkpoint: PathBuf) -> Self {
        RunReport {
            seed,
            mean_val: mean(&fold_metrics),
            fold_metrics,
            checkpoint,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: RunReport = serde_json::from_str(&fs::read_to_string(path)?)?;
        if r.mean_val.to_bits() != mean(&r.fold_metrics).to_bits() {
            return Err(Error::Contract(format!(
                "{}: mean_val {} is not the mean of its fold metrics",
                path.display(),
                r.mean_val
            )));
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// The `k` reports with the highest mean, best first; equal means go to the
/// lower seed.
pub fn select_top_k(reports: &[RunReport], k: usize) -> Result<Vec<RunReport>> {
    if k == 0 || reports.len() < k {
        return Err(Error::Config(format!(
            "cannot select top {k} of {} reports",
            reports.len()
        )));
    }
    if let Some(r) = reports.iter().find(|r| r.mean_val.is_nan()) {
        return Err(Error::Config(format!("seed {} has a NaN mean", r.seed)));
    }
    let mut sorted = reports.to_vec();
    sorted.sort_by(|a, b| b.mean_val.total_cmp(&a.mean_val).then(a.seed.cmp(&b.seed)));
    sorted.truncate(k);
    Ok(sorted)
}

fn check_voters<T>(voters: &[Vec<T>]) -> Result<usize> {
    if voters.is_empty() || voters.len() % 2 == 0 {
        return Err(Error::Config(format!(
            "majority voting needs an odd number of voters, got {}",
            voters.len()
        )));
    }
    let n = voters[0].len();
    if voters.iter().any(|v| v.len() != n) {
        return Err(Error::Contract("voters predict different numbers of examples".into()));
    }
    Ok(n)
}

/// Elementwise majority of an odd number of 0/1 vectors.
pub fn vote_binary(voters: &[Vec<u8>]) -> Result<Vec<u8>> {
    let n = check_voters(voters)?;
    let half = voters.len() / 2;
    Ok((0..n)
        .map(|i| u8::from(voters.iter().filter(|v| v[i] == 1).count() > half))
        .collect())
}

/// Per-label majority over voters, each predicting one label vector per example.
pub fn vote_multilabel(voters: &[Vec<Vec<u8>>]) -> Result<Vec<Vec<u8>>> {
    let n = check_voters(voters)?;
    let half = voters.len() / 2;
    (0..n)
        .map(|i| {
            let width = voters[0][i].len();
            if voters.iter().any(|v| v[i].len() != width) {
                return Err(Error::Contract(format!("example {i}: label vectors of unequal length")));
            }
            Ok((0..width)
                .map(|c| u8::from(voters.iter().filter(|v| v[i][c] == 1).count() > half))
                .collect())
        })
        .collect()
}

/// One row per example: an id and either one label or a label vector.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Predictions {
    pub ids: Vec<String>,
    pub labels: Vec<Vec<u8>>,
}

impl Predictions {
    pub fn binary(ids: Vec<String>, labels: Vec<u8>) -> Self {
        Predictions {
            ids,
            labels: labels.into_iter().map(|y| vec![y]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.labels.iter().all(|l| l.len() == 1)
    }

    pub fn binary_labels(&self) -> Result<Vec<u8>> {
        if !self.is_binary() {
            return Err(Error::Contract("expected single-label predictions".into()));
        }
        Ok(self.labels.iter().map(|l| l[0]).collect())
    }

    /// `id<TAB>label` or `id<TAB>b0,b1,…,b6`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for (id, l) in self.ids.iter().zip(&self.labels) {
            let bits: Vec<String> = l.iter().map(u8::to_string).collect();
            writeln!(w, "{id}\t{}", bits.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut out = Predictions::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_owned(),
                line: n + 1,
                msg,
            };
            let (id, rest) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `id<TAB>labels`".into()))?;
            let bits: Vec<u8> = rest
                .split(',')
                .map(|b| match b.trim() {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(err(format!("label {other:?} is not 0 or 1"))),
                })
                .collect::<Result<_>>()?;
            if bits.len() != 1 && bits.len() != NUM_CATEGORIES {
                return Err(err(format!("{} labels; expected 1 or {NUM_CATEGORIES}", bits.len())));
            }
            if out.labels.first().is_some_and(|f| f.len() != bits.len()) {
                return Err(err("label width differs from earlier rows".into()));
            }
            out.ids.push(id.trim().to_owned());
            out.labels.push(bits);
        }
        Ok(out)
    }

    /// Labels reordered to follow `ids`; every id must be present.
    pub fn aligned_to(&self, ids: &[String]) -> Result<Vec<Vec<u8>>> {
        let index: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        if index.len() != self.ids.len() {
            return Err(Error::Contract("duplicate ids in predictions".into()));
        }
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| self.labels[i].clone())
                    .ok_or_else(|| Error::Contract(format!("no prediction for {id}")))
            })
            .collect()
    }
}

/// Majority vote over prediction files, aligned on the first file's ids.
pub fn fuse(voters: &[Predictions]) -> Result<Predictions> {
    let Some(first) = voters.first() else {
        return Err(Error::Config("no prediction files to fuse".into()));
    };
    let aligned: Vec<Vec<Vec<u8>>> = voters.iter().map(|p| p.aligned_to(&first.ids)).collect::<Result<_>>()?;
    if voters.iter().any(|p| p.len() != first.len()) {
        return Err(Error::Contract("prediction files cover different examples".into()));
    }
    Ok(Predictions {
        ids: first.ids.clone(),
        labels: vote_multilabel(&aligned)?,
    })
}
