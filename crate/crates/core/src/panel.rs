//! Aggregated observations: step panels of exposures and migration counts,
//! and continuous-time event streams.
//!
//! Panel CSV layout (one row per step, 1-based step index):
//!
//! ```text
//! t,Y_1,...,Y_p,N_1_1,N_1_2,...,N_p_p
//! ```
//!
//! Event-stream CSV layout: a `# horizon=<T>` comment line, a column header,
//! then rows `time,from_rating,to_rating,Y_1..Y_p`. Rows with
//! `from_rating = to_rating = 0` set the exposures at that time (the first
//! one, at `t = 0`, carries the initial exposures); every other row is a
//! migration and carries the exposures just before it.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exposures and migration counts per observation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationPanel {
    /// `exposures[t][j]`: entities rated `j` entering step `t`.
    pub exposures: Vec<Vec<u64>>,
    /// `counts[t][j][k]`: entities moving `j → k` during step `t`; the
    /// diagonal counts stayers.
    pub counts: Vec<Vec<Vec<u64>>>,
    pub step_length_days: u32,
}

impl MigrationPanel {
    /// Builds a panel and checks conservation `Σ_k N^{jk}_t = Y^j_t`.
    pub fn new(counts: Vec<Vec<Vec<u64>>>, step_length_days: u32) -> Result<Self> {
        let exposures = counts
            .iter()
            .map(|c| c.iter().map(|row| row.iter().sum()).collect())
            .collect();
        let panel = Self {
            exposures,
            counts,
            step_length_days,
        };
        panel.check()?;
        Ok(panel)
    }

    pub fn steps(&self) -> usize {
        self.counts.len()
    }

    pub fn p(&self) -> usize {
        self.exposures.first().map_or(0, |y| y.len())
    }

    /// Verifies shapes and the conservation invariant.
    pub fn check(&self) -> Result<()> {
        if self.step_length_days == 0 {
            return Err(Error::InvalidData(
                "step length must be at least one day".into(),
            ));
        }
        if self.exposures.len() != self.counts.len() {
            return Err(Error::Dimension(format!(
                "{} exposure rows for {} count steps",
                self.exposures.len(),
                self.counts.len()
            )));
        }
        let p = self.p();
        for (t, (y, c)) in self.exposures.iter().zip(&self.counts).enumerate() {
            if y.len() != p || c.len() != p || c.iter().any(|r| r.len() != p) {
                return Err(Error::Dimension(format!(
                    "step {} has inconsistent shape",
                    t + 1
                )));
            }
            for j in 0..p {
                let s: u64 = c[j].iter().sum();
                if s != y[j] {
                    return Err(Error::InvalidData(format!(
                        "step {}: rating {} has exposure {} but counts sum to {}",
                        t + 1,
                        j + 1,
                        y[j],
                        s
                    )));
                }
            }
        }
        Ok(())
    }

    /// Total off-diagonal migrations in step `t`.
    pub fn jumps_in_step(&self, t: usize) -> u64 {
        let c = &self.counts[t];
        (0..c.len())
            .map(|j| {
                (0..c.len())
                    .filter(|&k| k != j)
                    .map(|k| c[j][k])
                    .sum::<u64>()
            })
            .sum()
    }

    /// Steps `range` as a new panel.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            exposures: self.exposures[range.clone()].to_vec(),
            counts: self.counts[range].to_vec(),
            step_length_days: self.step_length_days,
        }
    }

    /// Realized ratio `N^{jk}_t / Y^j_t`, `None` when nobody was exposed.
    pub fn realized_ratio(&self, t: usize, j: usize, k: usize) -> Option<f64> {
        let y = self.exposures[t][j];
        (y > 0).then(|| self.counts[t][j][k] as f64 / y as f64)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let p = self.p();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=p).map(|j| format!("Y_{j}")));
        for j in 1..=p {
            header.extend((1..=p).map(|k| format!("N_{j}_{k}")));
        }
        w.write_record(&header)?;
        for (t, (y, c)) in self.exposures.iter().zip(&self.counts).enumerate() {
            let mut rec = vec![(t + 1).to_string()];
            rec.extend(y.iter().map(|v| v.to_string()));
            rec.extend(c.iter().flatten().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, step_length_days: u32) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let ycols = header.iter().filter(|h| h.starts_with("Y_")).count();
        let p = ycols;
        if p == 0 || header.len() != 1 + p + p * p {
            return Err(Error::Malformed {
                line: 1,
                message: format!(
                    "header has {} columns, expected 1 + p + p² for p = {p}",
                    header.len()
                ),
            });
        }
        let mut exposures = Vec::new();
        let mut counts = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Malformed {
                    line,
                    message: format!("expected {} fields, found {}", header.len(), rec.len()),
                });
            }
            let parse = |s: &str| -> Result<u64> {
                s.trim().parse::<u64>().map_err(|e| Error::Malformed {
                    line,
                    message: format!("bad count {s:?}: {e}"),
                })
            };
            let y = (1..=p)
                .map(|c| parse(&rec[c]))
                .collect::<Result<Vec<_>>>()?;
            let mut c = vec![vec![0; p]; p];
            for j in 0..p {
                for k in 0..p {
                    c[j][k] = parse(&rec[1 + p + j * p + k])?;
                }
            }
            exposures.push(y);
            counts.push(c);
        }
        if counts.is_empty() {
            return Err(Error::Empty("panel has no steps".into()));
        }
        let panel = Self {
            exposures,
            counts,
            step_length_days,
        };
        panel.check()?;
        Ok(panel)
    }
}

/// A single migration `from → to` at `time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub from: usize,
    pub to: usize,
    /// Exposures just before the migration.
    pub exposures: Vec<u64>,
}

/// Exposures replaced at `time` (cohort entries and exits).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureReset {
    pub time: f64,
    pub exposures: Vec<u64>,
}

/// Time-ordered migrations without simultaneous jumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStream {
    pub horizon: f64,
    pub initial_exposures: Vec<u64>,
    pub events: Vec<Event>,
    pub resets: Vec<ExposureReset>,
}

/// Either a migration or an exposure reset, in time order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StreamItem<'a> {
    Jump(&'a Event),
    Reset(&'a ExposureReset),
}

impl StreamItem<'_> {
    pub fn time(&self) -> f64 {
        match self {
            StreamItem::Jump(e) => e.time,
            StreamItem::Reset(r) => r.time,
        }
    }
}

impl EventStream {
    pub fn p(&self) -> usize {
        self.initial_exposures.len()
    }

    /// Events and resets merged by time; a reset sorts before an event at
    /// the same time.
    pub fn items(&self) -> Vec<StreamItem<'_>> {
        let mut out = Vec::with_capacity(self.events.len() + self.resets.len());
        let (mut i, mut j) = (0, 0);
        while i < self.events.len() || j < self.resets.len() {
            let take_reset = j < self.resets.len()
                && (i >= self.events.len() || self.resets[j].time <= self.events[i].time);
            if take_reset {
                out.push(StreamItem::Reset(&self.resets[j]));
                j += 1;
            } else {
                out.push(StreamItem::Jump(&self.events[i]));
                i += 1;
            }
        }
        out
    }

    /// Checks strict time ordering, ratings in range and snapshot consistency.
    pub fn check(&self) -> Result<()> {
        let p = self.p();
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidData(format!(
                "horizon {} must be positive",
                self.horizon
            )));
        }
        for w in self.events.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(Error::InvalidData(format!(
                    "event times not strictly increasing at {}",
                    w[1].time
                )));
            }
        }
        let mut y = self.initial_exposures.clone();
        for item in self.items() {
            let t = item.time();
            if !(0.0..=self.horizon).contains(&t) {
                return Err(Error::InvalidData(format!(
                    "time {t} outside [0, {}]",
                    self.horizon
                )));
            }
            match item {
                StreamItem::Reset(r) => {
                    if r.exposures.len() != p {
                        return Err(Error::Dimension(format!("reset at {t} has wrong width")));
                    }
                    y = r.exposures.clone();
                }
                StreamItem::Jump(e) => {
                    if e.from >= p || e.to >= p || e.from == e.to {
                        return Err(Error::InvalidData(format!(
                            "event at {t} has invalid transition {}→{}",
                            e.from + 1,
                            e.to + 1
                        )));
                    }
                    if e.exposures != y {
                        return Err(Error::InvalidData(format!(
                            "exposure snapshot at {t} inconsistent with cumulative migrations"
                        )));
                    }
                    if y[e.from] == 0 {
                        return Err(Error::InvalidData(format!(
                            "event at {t} leaves rating {} with no exposure",
                            e.from + 1
                        )));
                    }
                    y[e.from] -= 1;
                    y[e.to] += 1;
                }
            }
        }
        Ok(())
    }

    /// Counts migrations per step of `step_length` days. The diagonal holds
    /// `Y^j_t` minus the departures from `j`.
    pub fn aggregate(&self, step_length_days: u32) -> Result<MigrationPanel> {
        let d = step_length_days as f64;
        let steps = ((self.horizon / d) + 1e-9).floor() as usize;
        let p = self.p();
        let mut exposures = Vec::with_capacity(steps);
        let mut counts = Vec::with_capacity(steps);
        let items = self.items();
        let mut idx = 0;
        let mut y = self.initial_exposures.clone();
        for t in 0..steps {
            let start = t as f64 * d;
            let end = start + d;
            while idx < items.len() && items[idx].time() < start {
                apply_item(&mut y, &items[idx]);
                idx += 1;
            }
            // resets at the boundary belong to this step's opening exposures
            while idx < items.len() && items[idx].time() == start {
                if let StreamItem::Reset(_) = items[idx] {
                    apply_item(&mut y, &items[idx]);
                    idx += 1;
                } else {
                    break;
                }
            }
            let y0 = y.clone();
            let mut c = vec![vec![0u64; p]; p];
            while idx < items.len() && items[idx].time() < end {
                if let StreamItem::Jump(e) = items[idx] {
                    c[e.from][e.to] += 1;
                }
                apply_item(&mut y, &items[idx]);
                idx += 1;
            }
            for j in 0..p {
                let out: u64 = (0..p).filter(|&k| k != j).map(|k| c[j][k]).sum();
                if out > y0[j] {
                    return Err(Error::InvalidData(format!(
                        "step {}: {} departures from rating {} exceed exposure {}",
                        t + 1,
                        out,
                        j + 1,
                        y0[j]
                    )));
                }
                c[j][j] = y0[j] - out;
            }
            exposures.push(y0);
            counts.push(c);
        }
        let panel = MigrationPanel {
            exposures,
            counts,
            step_length_days,
        };
        panel.check()?;
        Ok(panel)
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "# horizon={}", self.horizon)?;
        let p = self.p();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["time".to_string(), "from_rating".into(), "to_rating".into()];
        header.extend((1..=p).map(|j| format!("Y_{j}")));
        w.write_record(&header)?;
        let mut write_row = |time: f64, from: usize, to: usize, y: &[u64]| -> Result<()> {
            let mut rec = vec![time.to_string(), from.to_string(), to.to_string()];
            rec.extend(y.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
            Ok(())
        };
        write_row(0.0, 0, 0, &self.initial_exposures)?;
        for item in self.items() {
            match item {
                StreamItem::Reset(r) => write_row(r.time, 0, 0, &r.exposures)?,
                StreamItem::Jump(e) => write_row(e.time, e.from + 1, e.to + 1, &e.exposures)?,
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut buf = BufReader::new(reader);
        let mut first = String::new();
        buf.read_line(&mut first)?;
        let horizon = first
            .trim()
            .strip_prefix("# horizon=")
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Malformed {
                line: 1,
                message: "expected '# horizon=<T>'".into(),
            })?;
        let mut r = csv::Reader::from_reader(buf);
        let header = r.headers()?.clone();
        if header.len() < 4 {
            return Err(Error::Malformed {
                line: 2,
                message: "expected time,from_rating,to_rating,Y_1..Y_p".into(),
            });
        }
        let p = header.len() - 3;
        let mut initial: Option<Vec<u64>> = None;
        let mut events = Vec::new();
        let mut resets = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 3;
            let rec = rec?;
            let bad = |message: String| Error::Malformed { line, message };
            if rec.len() != header.len() {
                return Err(bad(format!("expected {} fields", header.len())));
            }
            let time: f64 = rec[0]
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad time {:?}", &rec[0])))?;
            let from: usize = rec[1]
                .trim()
                .parse()
                .map_err(|_| bad("bad from_rating".into()))?;
            let to: usize = rec[2]
                .trim()
                .parse()
                .map_err(|_| bad("bad to_rating".into()))?;
            let y = (3..3 + p)
                .map(|c| {
                    rec[c]
                        .trim()
                        .parse::<u64>()
                        .map_err(|_| bad("bad exposure".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            if from == 0 && to == 0 {
                if initial.is_none() {
                    if time != 0.0 {
                        return Err(bad("first exposure row must be at time 0".into()));
                    }
                    initial = Some(y);
                } else {
                    resets.push(ExposureReset { time, exposures: y });
                }
            } else {
                if initial.is_none() {
                    return Err(bad("initial exposure row missing".into()));
                }
                if from == 0 || to == 0 || from > p || to > p {
                    return Err(bad(format!("rating out of range: {from}→{to}")));
                }
                events.push(Event {
                    time,
                    from: from - 1,
                    to: to - 1,
                    exposures: y,
                });
            }
        }
        let stream = Self {
            horizon,
            initial_exposures: initial
                .ok_or_else(|| Error::Empty("event stream has no rows".into()))?,
            events,
            resets,
        };
        stream.check()?;
        Ok(stream)
    }
}

fn apply_item(y: &mut Vec<u64>, item: &StreamItem<'_>) {
    match item {
        StreamItem::Reset(r) => y.clone_from(&r.exposures),
        StreamItem::Jump(e) => {
            y[e.from] -= 1;
            y[e.to] += 1;
        }
    }
}
