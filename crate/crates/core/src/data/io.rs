use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::data::{parse_category, ParagraphRecord, CATEGORIES, NUM_CATEGORIES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Field {
    ParId,
    ArtId,
    Keyword,
    Country,
    Text,
    Label,
    Category,
    /// A column that is read past and ignored.
    Skip,
}

impl FromStr for Field {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "par_id" => Field::ParId,
            "art_id" => Field::ArtId,
            "keyword" => Field::Keyword,
            "country" => Field::Country,
            "text" => Field::Text,
            "label" => Field::Label,
            "category" => Field::Category,
            "_" | "skip" => Field::Skip,
            other => return Err(Error::Config(format!("unknown column name {other:?}"))),
        })
    }
}

/// Column order of a TSV file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnMap {
    columns: Vec<Field>,
}

impl ColumnMap {
    pub fn new(columns: Vec<Field>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for c in &columns {
            if *c != Field::Skip && !seen.insert(*c) {
                return Err(Error::Config(format!("column {c:?} listed twice")));
            }
        }
        Ok(ColumnMap { columns })
    }

    /// `par_id, art_id, keyword, country, text, label`
    pub fn subtask1() -> Self {
        use Field::*;
        ColumnMap {
            columns: vec![ParId, ArtId, Keyword, Country, Text, Label],
        }
    }

    /// `par_id, art_id, text, keyword, country, category`
    pub fn subtask2() -> Self {
        use Field::*;
        ColumnMap {
            columns: vec![ParId, ArtId, Text, Keyword, Country, Category],
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    fn index(&self, field: Field) -> Option<usize> {
        self.columns.iter().position(|&c| c == field)
    }

    fn require(&self, fields: &[Field]) -> Result<()> {
        match fields.iter().find(|f| self.index(**f).is_none()) {
            Some(f) => Err(Error::Config(format!("column map lacks {f:?}"))),
            None => Ok(()),
        }
    }
}

impl FromStr for ColumnMap {
    type Err = Error;

    /// Comma-separated field names, e.g. `par_id,art_id,keyword,country,text,label`.
    fn from_str(s: &str) -> Result<Self> {
        ColumnMap::new(s.split(',').map(str::parse).collect::<Result<_>>()?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TsvOptions {
    /// Skip the first line.
    pub header: bool,
    /// Overrides the subtask's canonical column order.
    pub columns: Option<ColumnMap>,
}

struct Row<'l> {
    line: usize,
    cells: Vec<&'l str>,
}

fn rows<'t>(path: &Path, text: &'t str, opts: &TsvOptions, map: &ColumnMap) -> Result<Vec<Row<'t>>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        if (opts.header && n == 0) || raw.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = raw.strip_suffix('\r').unwrap_or(raw).split('\t').collect();
        if cells.len() != map.len() {
            return Err(Error::Parse {
                path: path.to_owned(),
                line,
                msg: format!("expected {} columns, found {}", map.len(), cells.len()),
            });
        }
        out.push(Row { line, cells });
    }
    Ok(out)
}

fn cell<'r>(row: &'r Row, map: &ColumnMap, field: Field) -> &'r str {
    map.index(field).map(|i| row.cells[i].trim()).unwrap_or("")
}

/// One record per row, with the graded label in `raw_label`. A column map
/// without `label` reads unlabelled paragraphs.
pub fn load_subtask1_tsv(path: &Path, opts: &TsvOptions) -> Result<Vec<ParagraphRecord>> {
    let map = opts.columns.clone().unwrap_or_else(ColumnMap::subtask1);
    map.require(&[Field::ParId, Field::Text])?;
    let labelled = map.index(Field::Label).is_some();
    let text = fs::read_to_string(path)?;
    rows(path, &text, opts, &map)?
        .iter()
        .map(|row| {
            let label = cell(row, &map, Field::Label);
            let parse_err = |msg: String| Error::Parse {
                path: path.to_owned(),
                line: row.line,
                msg,
            };
            let raw_label = if labelled {
                let raw: u8 = label.parse().map_err(|_| parse_err(format!("label {label:?} is not an integer")))?;
                if raw > 4 {
                    return Err(parse_err(format!("label {raw} outside 0..=4")));
                }
                Some(raw)
            } else {
                None
            };
            Ok(ParagraphRecord {
                par_id: cell(row, &map, Field::ParId).to_owned(),
                art_id: cell(row, &map, Field::ArtId).to_owned(),
                keyword: cell(row, &map, Field::Keyword).to_owned(),
                country: cell(row, &map, Field::Country).to_owned(),
                text: cell(row, &map, Field::Text).to_owned(),
                raw_label,
                categories: None,
            })
        })
        .collect()
}

/// Paragraph records in first-appearance order, each carrying the union of
/// its category rows.
pub fn load_subtask2_records(path: &Path, opts: &TsvOptions) -> Result<Vec<ParagraphRecord>> {
    let map = opts.columns.clone().unwrap_or_else(ColumnMap::subtask2);
    map.require(&[Field::ParId, Field::Category])?;
    let text = fs::read_to_string(path)?;
    let mut records: Vec<ParagraphRecord> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for row in rows(path, &text, opts, &map)? {
        let name = cell(&row, &map, Field::Category);
        let c = parse_category(name).ok_or_else(|| Error::Parse {
            path: path.to_owned(),
            line: row.line,
            msg: format!("unknown category {name:?}"),
        })?;
        let par_id = cell(&row, &map, Field::ParId);
        let idx = *slot.entry(par_id.to_owned()).or_insert_with(|| {
            records.push(ParagraphRecord {
                par_id: par_id.to_owned(),
                art_id: cell(&row, &map, Field::ArtId).to_owned(),
                keyword: cell(&row, &map, Field::Keyword).to_owned(),
                country: cell(&row, &map, Field::Country).to_owned(),
                text: cell(&row, &map, Field::Text).to_owned(),
                raw_label: None,
                categories: Some([0; NUM_CATEGORIES]),
            });
            records.len() - 1
        });
        if let Some(v) = records[idx].categories.as_mut() {
            v[c] = 1;
        }
    }
    Ok(records)
}

/// `(par_id, category vector)` per paragraph.
pub fn load_subtask2_labels(path: &Path, opts: &TsvOptions) -> Result<Vec<(String, [u8; NUM_CATEGORIES])>> {
    Ok(load_subtask2_records(path, opts)?
        .into_iter()
        .map(|r| (r.par_id, r.categories.unwrap_or([0; NUM_CATEGORIES])))
        .collect())
}

fn clean(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

/// Canonical Subtask-1 layout. Records without a graded label are written
/// with their binary label (0 or 2).
pub fn write_subtask1_tsv(path: &Path, records: &[ParagraphRecord], header: bool) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    if header {
        writeln!(w, "par_id\tart_id\tkeyword\tcountry\ttext\tlabel")?;
    }
    for r in records {
        let label = match (r.raw_label, r.binary_label()) {
            (Some(raw), _) => raw,
            (None, Some(b)) => 2 * b,
            (None, None) => return Err(Error::Contract(format!("record {} has no label", r.par_id))),
        };
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{label}",
            clean(&r.par_id),
            clean(&r.art_id),
            clean(&r.keyword),
            clean(&r.country),
            clean(&r.text)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Canonical Subtask-2 layout, one row per set category. Paragraphs with no
/// category produce no rows.
pub fn write_subtask2_tsv(path: &Path, records: &[ParagraphRecord], header: bool) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    if header {
        writeln!(w, "par_id\tart_id\ttext\tkeyword\tcountry\tcategory")?;
    }
    for r in records {
        let Some(v) = r.categories else { continue };
        for (c, _) in v.iter().enumerate().filter(|(_, &b)| b == 1) {
            let name = CATEGORIES[c].1.replace([' ', ','], "_").replace("__", "_");
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{name}",
                clean(&r.par_id),
                clean(&r.art_id),
                clean(&r.text),
                clean(&r.keyword),
                clean(&r.country)
            )?;
        }
    }
    w.flush()?;
    Ok(())
}
