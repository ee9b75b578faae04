//! Entity-level rating histories and their aggregation into step panels.
//!
//! Input CSV: `entity_id,date,rating` with ISO dates. Ratings come from a
//! declared ordered alphabet; one extra label marks "not rated", during
//! which the entity is censored.
//!
//! A rating dated `d` takes effect at the end of day `d`: the state at a step
//! boundary `b` is the last rating dated strictly before `b`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::panel::MigrationPanel;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    pub labels: Vec<String>,
    pub censor: String,
}

impl Alphabet {
    pub fn new<S: Into<String>>(
        labels: impl IntoIterator<Item = S>,
        censor: impl Into<String>,
    ) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let censor = censor.into();
        if labels.is_empty() {
            return Err(Error::InvalidData("rating alphabet is empty".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) || *l == censor {
                return Err(Error::InvalidData(format!("label {l:?} declared twice")));
            }
        }
        Ok(Self { labels, censor })
    }

    pub fn p(&self) -> usize {
        self.labels.len()
    }

    /// `Some(Some(i))` for rating `i`, `Some(None)` for the censor label.
    fn parse(&self, label: &str) -> Option<Option<usize>> {
        if label == self.censor {
            return Some(None);
        }
        self.labels.iter().position(|l| l == label).map(Some)
    }

    fn label(&self, rating: Option<usize>) -> &str {
        rating.map_or(&self.censor, |i| &self.labels[i])
    }
}

/// Dated ratings per entity; `None` marks a censoring spell.
pub type RatingPath = Vec<(NaiveDate, Option<usize>)>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RatingPaths {
    pub entities: BTreeMap<String, RatingPath>,
    /// Same-entity same-date rows overridden by a later row.
    pub duplicates: usize,
}

impl RatingPaths {
    pub fn first_date(&self) -> Option<NaiveDate> {
        self.entities
            .values()
            .filter_map(|p| p.first())
            .map(|e| e.0)
            .min()
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.entities
            .values()
            .filter_map(|p| p.last())
            .map(|e| e.0)
            .max()
    }

    pub fn write_csv<W: Write>(&self, alphabet: &Alphabet, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["entity_id", "date", "rating"])?;
        for (id, path) in &self.entities {
            for (date, rating) in path {
                w.write_record([
                    id.as_str(),
                    &date.format("%Y-%m-%d").to_string(),
                    alphabet.label(*rating),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn ingest_ratings<R: Read>(reader: R, alphabet: &Alphabet) -> Result<RatingPaths> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = r.headers()?.clone();
    if header.is_empty() {
        return Err(Error::Empty("ratings file has no header".into()));
    }
    let expected = ["entity_id", "date", "rating"];
    if header.len() != 3 || header.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(Error::Malformed {
            line: 1,
            message: "expected header entity_id,date,rating".into(),
        });
    }
    let mut raw: BTreeMap<String, BTreeMap<NaiveDate, Option<usize>>> = BTreeMap::new();
    let mut duplicates = 0;
    let mut rows = 0;
    let mut rec = csv::StringRecord::new();
    loop {
        let more = r.read_record(&mut rec).map_err(|e| Error::Malformed {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Malformed { line, message };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", rec.len())));
        }
        if rec[0].is_empty() {
            return Err(bad("empty entity_id".into()));
        }
        let date = NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d")
            .map_err(|e| bad(format!("bad date {:?}: {e}", &rec[1])))?;
        let rating = alphabet
            .parse(&rec[2])
            .ok_or_else(|| bad(format!("unknown rating label {:?}", &rec[2])))?;
        if raw
            .entry(rec[0].to_string())
            .or_default()
            .insert(date, rating)
            .is_some()
        {
            duplicates += 1;
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Empty("ratings file has no rows".into()));
    }
    let entities = raw
        .into_iter()
        .map(|(id, dated)| (id, dated.into_iter().collect()))
        .collect();
    Ok(RatingPaths {
        entities,
        duplicates,
    })
}

/// State of a path at boundary `b`: last entry dated before `b`.
fn state_at(path: &RatingPath, b: NaiveDate) -> Option<usize> {
    let idx = path.partition_point(|(d, _)| *d < b);
    idx.checked_sub(1).and_then(|i| path[i].1)
}

/// Aggregates paths on steps `[origin + tD, origin + (t+1)D)` for every full
/// step ending on or before `end`.
///
/// An entity counts in step `t` when it is rated at both boundaries and has
/// no censoring entry dated inside the step; its move is taken from start
/// rating to end rating.
pub fn build_panel(
    paths: &RatingPaths,
    p: usize,
    step_days: u32,
    origin: NaiveDate,
    end: NaiveDate,
) -> Result<MigrationPanel> {
    if step_days == 0 {
        return Err(Error::InvalidData(
            "step length must be at least one day".into(),
        ));
    }
    let span = (end - origin).num_days();
    let steps = if span > 0 {
        span as usize / step_days as usize
    } else {
        0
    };
    let boundary = |t: usize| origin + chrono::Days::new(t as u64 * step_days as u64);
    let mut counts = vec![vec![vec![0u64; p]; p]; steps];
    for path in paths.entities.values() {
        for (t, c) in counts.iter_mut().enumerate() {
            let (b0, b1) = (boundary(t), boundary(t + 1));
            let (Some(j), Some(k)) = (state_at(path, b0), state_at(path, b1)) else {
                continue;
            };
            let lo = path.partition_point(|(d, _)| *d < b0);
            let hi = path.partition_point(|(d, _)| *d < b1);
            if path[lo..hi].iter().any(|(_, r)| r.is_none()) {
                continue;
            }
            if j >= p || k >= p {
                return Err(Error::Dimension(format!(
                    "rating index out of range for p={p}"
                )));
            }
            c[j][k] += 1;
        }
    }
    MigrationPanel::new(counts, step_days)
}
