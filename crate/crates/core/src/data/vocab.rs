use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{TERM_CLOSE, TERM_OPEN};
use crate::encoder::PAD_ID;
use crate::error::{Error, Result};

/// Reserved tokens, in id order. `[PAD]` must stay at id 0.
pub const SPECIAL_TOKENS: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", TERM_OPEN, TERM_CLOSE];
const UNK_ID: u32 = 1;
const CLS_ID: u32 = 2;
const SEP_ID: u32 = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from raw texts. Tokens seen fewer than `min_freq`
    /// times are left out; the rest are ordered by descending frequency, then
    /// lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in split_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens).expect("specials are unique and first")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Contract(format!("vocabulary must start with {s} at id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Contract(format!("invalid vocabulary token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Contract(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn pad_id(&self) -> u32 {
        PAD_ID
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or("[UNK]")).collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        Self::from_tokens(tokens).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: 0,
            msg: e.to_string(),
        })
    }
}

/// Lowercases and splits on whitespace and at punctuation boundaries. The
/// term markers `<e>` and `</e>` survive as single tokens.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if chunk == TERM_OPEN || chunk == TERM_CLOSE {
            out.push(chunk.to_string());
            continue;
        }
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                word.extend(c.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Token ids wrapped as `[CLS] … [SEP]`, at most `max_len` long.
///
/// Leading `<e> … </e>` term groups are kept whole; only the trailing text is
/// cut from the right when the sequence is too long.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    let toks = split_tokens(text);
    let protected = leading_terms_len(&toks);
    let budget = max_len.saturating_sub(2);
    let keep = if protected >= budget {
        budget
    } else {
        toks.len().min(budget)
    };
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(CLS_ID);
    ids.extend(toks[..keep].iter().map(|t| vocab.id(t).unwrap_or(UNK_ID)));
    ids.push(SEP_ID);
    ids
}

fn leading_terms_len(toks: &[String]) -> usize {
    let mut i = 0;
    while toks.get(i).map(String::as_str) == Some(TERM_OPEN) {
        match toks[i + 1..].iter().position(|t| t == TERM_CLOSE) {
            Some(off) => i += off + 2,
            None => break,
        }
    }
    i
}

/// Right-pads every sequence with `[PAD]` to the longest one.
pub fn pad_batch(seqs: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let longest = seqs.iter().map(Vec::len).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut p = s.clone();
            p.resize(longest, PAD_ID);
            p
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(
            split_tokens("He helped, didn't he?"),
            ["he", "helped", ",", "didn", "'", "t", "he", "?"]
        );
        assert_eq!(split_tokens("<e> GB </e> x"), ["<e>", "gb", "</e>", "x"]);
    }

    #[test]
    fn empty_text_is_cls_sep() {
        let v = Vocabulary::build(["a b"], 1);
        assert_eq!(tokenize("", &v, 250), vec![CLS_ID, SEP_ID]);
    }

    #[test]
    fn unknown_maps_to_unk_and_round_trips_known() {
        let v = Vocabulary::build(["the cat sat"], 1);
        let ids = tokenize("The dog sat", &v, 250);
        assert_eq!(v.decode(&ids), ["[CLS]", "the", "[UNK]", "sat", "[SEP]"]);
    }

    #[test]
    fn truncation_keeps_terms() {
        let text = format!("<e> kw </e> <e> gb </e> {}", "word ".repeat(400));
        let v = Vocabulary::build([text.as_str()], 1);
        let ids = tokenize(&text, &v, 250);
        assert_eq!(ids.len(), 250);
        assert_eq!(&v.decode(&ids)[..8], ["[CLS]", "<e>", "kw", "</e>", "<e>", "gb", "</e>", "word"]);
        assert_eq!(*ids.last().unwrap(), SEP_ID);

        let short = tokenize(&text, &v, 5);
        assert_eq!(short.len(), 5);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocabulary::build(["b a a c", "<e> x </e>"], 1);
        assert_eq!(v.token(0), Some("[PAD]"));
        assert_eq!(v.token(6), Some("a"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);

        std::fs::write(&p, "a\nb\n").unwrap();
        assert!(Vocabulary::load(&p).is_err());
    }

    #[test]
    fn min_freq_filters() {
        let v = Vocabulary::build(["a a b"], 2);
        assert!(v.id("a").is_some());
        assert!(v.id("b").is_none());
    }

    #[test]
    fn padding_to_batch_max() {
        let p = pad_batch(&[vec![2, 9, 3], vec![2, 3]]);
        assert_eq!(p, vec![vec![2, 9, 3], vec![2, 3, 0]]);
    }
}
