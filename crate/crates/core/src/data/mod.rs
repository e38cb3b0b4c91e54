//! Corpus records, label schemes, input composition, tokenization, and
//! fold assignment.

mod folds;
mod io;
pub mod synthetic;
mod vocab;

use serde::{Deserialize, Serialize};

pub use folds::{multilabel_strata, stratified_kfold, FoldAssignment};
pub use io::{
    load_subtask1_tsv, load_subtask2_labels, load_subtask2_records, write_subtask1_tsv, write_subtask2_tsv, ColumnMap,
    Field, TsvOptions,
};
pub use vocab::{pad_batch, split_tokens, tokenize, Vocabulary, SPECIAL_TOKENS};

use crate::error::{Error, Result};

pub const TERM_OPEN: &str = "<e>";
pub const TERM_CLOSE: &str = "</e>";

/// The seven category labels in canonical order: abbreviation and full name.
pub const CATEGORIES: [(&str, &str); 7] = [
    ("unb.", "Unbalanced power relations"),
    ("shal.", "Shallow solution"),
    ("pres.", "Presupposition"),
    ("auth.", "Authority voice"),
    ("met.", "Metaphor"),
    ("comp.", "Compassion"),
    ("merr.", "The poorer, the merrier"),
];

pub const NUM_CATEGORIES: usize = CATEGORIES.len();

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParagraphRecord {
    pub par_id: String,
    pub art_id: String,
    pub keyword: String,
    pub country: String,
    pub text: String,
    /// Graded label 0–4, when the source carries one.
    pub raw_label: Option<u8>,
    /// One bit per entry of [`CATEGORIES`], when the source carries them.
    pub categories: Option<[u8; NUM_CATEGORIES]>,
}

impl ParagraphRecord {
    /// Binary label: from the graded label when present, otherwise whether
    /// any category bit is set.
    pub fn binary_label(&self) -> Option<u8> {
        match (self.raw_label, &self.categories) {
            (Some(raw), _) => binarize_label(raw).ok(),
            (None, Some(c)) => Some(u8::from(c.contains(&1))),
            (None, None) => None,
        }
    }
}

/// Grades 2, 3 and 4 are positive; 0 and 1 are negative.
pub fn binarize_label(raw: u8) -> Result<u8> {
    match raw {
        0 | 1 => Ok(0),
        2..=4 => Ok(1),
        _ => Err(Error::Contract(format!("label {raw} outside 0..=4"))),
    }
}

/// `"<e> keyword </e> <e> country </e> text"`.
pub fn compose_input(record: &ParagraphRecord) -> String {
    format!(
        "{TERM_OPEN} {} {TERM_CLOSE} {TERM_OPEN} {} {TERM_CLOSE} {}",
        record.keyword, record.country, record.text
    )
}

/// Category records plus the negatives of a binary-labelled corpus, each
/// with an all-zero category vector. Paragraphs already present are skipped.
pub fn with_negatives(mut categorized: Vec<ParagraphRecord>, binary: &[ParagraphRecord]) -> Vec<ParagraphRecord> {
    let known: std::collections::HashSet<String> = categorized.iter().map(|r| r.par_id.clone()).collect();
    for r in binary {
        if r.binary_label() == Some(0) && !known.contains(&r.par_id) {
            categorized.push(ParagraphRecord {
                categories: Some([0; NUM_CATEGORIES]),
                ..r.clone()
            });
        }
    }
    categorized
}

/// Index into [`CATEGORIES`] for an abbreviation or full name. Matching
/// ignores case, whitespace, underscores, and punctuation.
pub fn parse_category(name: &str) -> Option<usize> {
    let norm = |s: &str| -> String {
        s.chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect()
    };
    let key = norm(name);
    if key.is_empty() {
        return None;
    }
    CATEGORIES
        .iter()
        .position(|(abbr, full)| norm(abbr) == key || norm(full) == key)
}
