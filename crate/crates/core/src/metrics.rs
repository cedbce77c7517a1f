//! Evaluation, per-round records, seed aggregation and CSV reports.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::federation::Mode;
use crate::model::ModelParams;
use crate::prompt::Task;
use crate::scalar::Scalar;

/// Accuracy of argmax predictions against gold labels.
pub fn evaluate<S: Scalar>(params: &ModelParams<S>, task: &Task, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let hits = test
        .examples
        .par_iter()
        .map(|e| {
            let gold = e
                .gold_label
                .ok_or_else(|| Error::Contract(format!("evaluation example {} has no gold label", e.id)))?;
            Ok(usize::from(task.distribution(params, e)?.argmax == gold))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / test.len() as f64)
}

/// One round of a session. Round 0 is the zero-shot record taken before any
/// training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mode: Mode,
    pub test_accuracy: f64,
    pub participants: Vec<usize>,
    pub scanned: usize,
    pub kept: usize,
    /// Share of kept pseudo labels that match the hidden gold label.
    pub precision: Option<f64>,
    pub mean_confidence: Option<f64>,
    /// `None` when augmentation is off.
    pub gate_open: Option<bool>,
    pub wall_time: f64,
}

impl RoundRecord {
    pub fn zero_shot(mode: Mode, test_accuracy: f64) -> Self {
        RoundRecord {
            round: 0,
            mode,
            test_accuracy,
            participants: Vec::new(),
            scanned: 0,
            kept: 0,
            precision: None,
            mean_confidence: None,
            gate_open: None,
            wall_time: 0.0,
        }
    }
}

/// Best test accuracy over the trained rounds; the zero-shot record counts
/// only when no round was trained.
pub fn best_accuracy(history: &[RoundRecord]) -> Option<f64> {
    let trained = history.iter().filter(|r| r.round > 0).map(|r| r.test_accuracy);
    let best = trained.fold(None, |acc: Option<f64>, a| Some(acc.map_or(a, |b| b.max(a))));
    best.or_else(|| history.first().map(|r| r.test_accuracy))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedAggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

pub fn mean_std(values: &[f64]) -> Result<SeedAggregate> {
    if values.is_empty() {
        return Err(Error::Contract("nothing to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(SeedAggregate { mean, std: var.sqrt(), count: values.len() })
}

/// Mean and spread of the best accuracy of each seed's history.
pub fn aggregate_seeds(histories: &[Vec<RoundRecord>]) -> Result<SeedAggregate> {
    let best = histories
        .iter()
        .map(|h| best_accuracy(h).ok_or_else(|| Error::Contract("empty history".into())))
        .collect::<Result<Vec<f64>>>()?;
    mean_std(&best)
}

/// `accuracy / fullset_accuracy`, absent when the reference is zero.
pub fn relative_performance(accuracy: f64, fullset_accuracy: f64) -> Option<f64> {
    (fullset_accuracy != 0.0).then(|| accuracy / fullset_accuracy)
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub const HISTORY_COLUMNS: [&str; 13] = [
    "seed",
    "round",
    "mode",
    "n_labeled",
    "gamma",
    "test_accuracy",
    "scanned",
    "kept",
    "precision",
    "mean_confidence",
    "gate_open",
    "participants",
    "wall_time",
];

pub const SUMMARY_COLUMNS: [&str; 10] =
    ["n_labeled", "gamma", "mode", "augmentation", "mean", "std", "fullset", "relative", "gain", "seeds"];

/// Identifies the run a history belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunContext {
    pub seed: u64,
    pub n_labeled: usize,
    pub gamma: f64,
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("<csv>", io),
        other => Error::Parse { line: 0, message: format!("{other:?}") },
    }
}

fn parse_field<T: std::str::FromStr>(row: &csv::StringRecord, i: usize, line: usize) -> Result<T> {
    let raw = row.get(i).unwrap_or("");
    raw.parse()
        .map_err(|_| Error::Parse { line, message: format!("bad value {raw:?} in column {}", i + 1) })
}

fn parse_opt<T: std::str::FromStr>(row: &csv::StringRecord, i: usize, line: usize) -> Result<Option<T>> {
    if row.get(i).unwrap_or("").is_empty() {
        Ok(None)
    } else {
        parse_field(row, i, line).map(Some)
    }
}

fn check_header(header: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse { line: 1, message: format!("expected header {}", expected.join(",")) });
    }
    Ok(())
}

pub fn write_history<W: Write>(out: W, context: &RunContext, history: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTORY_COLUMNS).map_err(csv_err)?;
    for r in history {
        let participants: Vec<String> = r.participants.iter().map(|p| p.to_string()).collect();
        w.write_record([
            context.seed.to_string(),
            r.round.to_string(),
            r.mode.to_string(),
            context.n_labeled.to_string(),
            fmt_f(context.gamma),
            fmt_f(r.test_accuracy),
            r.scanned.to_string(),
            r.kept.to_string(),
            fmt_opt(r.precision),
            fmt_opt(r.mean_confidence),
            r.gate_open.map(|g| g.to_string()).unwrap_or_default(),
            participants.join(" "),
            fmt_f(r.wall_time),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_history<R: Read>(input: R) -> Result<Vec<(RunContext, RoundRecord)>> {
    let mut r = csv::Reader::from_reader(input);
    check_header(r.headers().map_err(csv_err)?, &HISTORY_COLUMNS)?;
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let line = i + 2;
        let ctx = RunContext {
            seed: parse_field(&row, 0, line)?,
            n_labeled: parse_field(&row, 3, line)?,
            gamma: parse_field(&row, 4, line)?,
        };
        let participants = row
            .get(11)
            .unwrap_or("")
            .split_whitespace()
            .map(|p| p.parse().map_err(|_| Error::Parse { line, message: format!("bad participant {p:?}") }))
            .collect::<Result<Vec<usize>>>()?;
        out.push((
            ctx,
            RoundRecord {
                round: parse_field(&row, 1, line)?,
                mode: parse_field(&row, 2, line)?,
                test_accuracy: parse_field(&row, 5, line)?,
                scanned: parse_field(&row, 6, line)?,
                kept: parse_field(&row, 7, line)?,
                precision: parse_opt(&row, 8, line)?,
                mean_confidence: parse_opt(&row, 9, line)?,
                gate_open: parse_opt(&row, 10, line)?,
                participants,
                wall_time: parse_field(&row, 12, line)?,
            },
        ));
    }
    Ok(out)
}

pub fn save_history(path: &Path, context: &RunContext, history: &[RoundRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_history(f, context, history)
}

pub fn load_history(path: &Path) -> Result<Vec<(RunContext, RoundRecord)>> {
    read_history(File::open(path).map_err(|e| Error::io(path, e))?)
}

/// One cell of a sweep aggregated over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub n_labeled: usize,
    pub gamma: f64,
    pub mode: Mode,
    pub augmentation: bool,
    pub mean: f64,
    pub std: f64,
    /// Mean accuracy of the full-set reference run, when one was made.
    pub fullset: Option<f64>,
    pub relative: Option<f64>,
    /// Prompt-mode mean minus head-mode mean for the same cell.
    pub gain: Option<f64>,
    pub seeds: usize,
}

/// Fills `gain` on every row whose cell has both modes.
pub fn fill_gain(rows: &mut [SummaryRow]) {
    let key = |r: &SummaryRow| (r.n_labeled, r.gamma.to_bits(), r.augmentation);
    let means: Vec<((usize, u64, bool), Mode, f64)> = rows.iter().map(|r| (key(r), r.mode, r.mean)).collect();
    for row in rows.iter_mut() {
        let find = |m: Mode| means.iter().find(|(k, mode, _)| *k == key(row) && *mode == m).map(|x| x.2);
        row.gain = match (find(Mode::FedPrompt), find(Mode::FedCls)) {
            (Some(p), Some(c)) => Some(p - c),
            _ => None,
        };
    }
}

pub fn write_summary<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.n_labeled.to_string(),
            fmt_f(r.gamma),
            r.mode.to_string(),
            r.augmentation.to_string(),
            fmt_f(r.mean),
            fmt_f(r.std),
            fmt_opt(r.fullset),
            fmt_opt(r.relative),
            fmt_opt(r.gain),
            r.seeds.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_summary<R: Read>(input: R) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(input);
    check_header(r.headers().map_err(csv_err)?, &SUMMARY_COLUMNS)?;
    r.records()
        .enumerate()
        .map(|(i, row)| {
            let row = row.map_err(csv_err)?;
            let line = i + 2;
            Ok(SummaryRow {
                n_labeled: parse_field(&row, 0, line)?,
                gamma: parse_field(&row, 1, line)?,
                mode: parse_field(&row, 2, line)?,
                augmentation: parse_field(&row, 3, line)?,
                mean: parse_field(&row, 4, line)?,
                std: parse_field(&row, 5, line)?,
                fullset: parse_opt(&row, 6, line)?,
                relative: parse_opt(&row, 7, line)?,
                gain: parse_opt(&row, 8, line)?,
                seeds: parse_field(&row, 9, line)?,
            })
        })
        .collect()
}

pub fn save_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_summary(f, rows)
}

pub fn load_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    read_summary(File::open(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(round: usize, acc: f64) -> RoundRecord {
        RoundRecord {
            round,
            mode: Mode::FedPrompt,
            test_accuracy: acc,
            participants: vec![1, 4],
            scanned: 10,
            kept: 3,
            precision: Some(2.0 / 3.0),
            mean_confidence: Some(0.95),
            gate_open: Some(true),
            wall_time: 0.0,
        }
    }

    #[test]
    fn mean_std_closed_forms() {
        let a = mean_std(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!((a.mean, a.std), (0.5, 0.0));
        let a = mean_std(&[0.4, 0.6]).unwrap();
        assert!((a.mean - 0.5).abs() < 1e-12 && (a.std - 0.1).abs() < 1e-12);
        assert!(mean_std(&[]).is_err());
        assert!(aggregate_seeds(&[]).is_err());
    }

    #[test]
    fn best_accuracy_skips_zero_shot() {
        assert_eq!(best_accuracy(&[record(0, 0.9), record(1, 0.5), record(2, 0.6)]), Some(0.6));
        assert_eq!(best_accuracy(&[record(0, 0.3)]), Some(0.3));
        assert_eq!(best_accuracy(&[]), None);
    }

    #[test]
    fn relative_performance_cases() {
        assert!((relative_performance(0.45, 0.5).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(relative_performance(0.7, 0.7), Some(1.0));
        assert_eq!(relative_performance(0.7, 0.0), None);
    }

    #[test]
    fn empty_history_is_header_only() {
        let mut buf = Vec::new();
        write_history(&mut buf, &RunContext { seed: 1, n_labeled: 64, gamma: 100.0 }, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{}\n", HISTORY_COLUMNS.join(",")));
    }

    #[test]
    fn history_round_trip() {
        let ctx = RunContext { seed: 3, n_labeled: 16, gamma: 0.001 };
        let mut zs = RoundRecord::zero_shot(Mode::FedCls, 0.25);
        zs.participants.clear();
        let hist = vec![zs, record(1, 0.5), record(2, 0.625)];
        let mut buf = Vec::new();
        write_history(&mut buf, &ctx, &hist).unwrap();
        let back = read_history(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        for ((c, r), orig) in back.iter().zip(&hist) {
            assert_eq!(*c, ctx);
            assert_eq!(r.participants, orig.participants);
            assert_eq!(r.gate_open, orig.gate_open);
            assert!((r.test_accuracy - orig.test_accuracy).abs() < 1e-6);
            assert_eq!(r.precision.is_some(), orig.precision.is_some());
        }
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(2).unwrap().contains(",0.666667,0.950000,true,1 4,"));
    }

    #[test]
    fn summary_round_trip_and_gain() {
        let row = |mode, mean| SummaryRow {
            n_labeled: 64,
            gamma: 100.0,
            mode,
            augmentation: false,
            mean,
            std: 0.01,
            fullset: Some(0.8),
            relative: Some(mean / 0.8),
            gain: None,
            seeds: 3,
        };
        let mut rows = vec![row(Mode::FedPrompt, 0.7), row(Mode::FedCls, 0.4)];
        fill_gain(&mut rows);
        assert!((rows[0].gain.unwrap() - 0.3).abs() < 1e-12);
        let mut buf = Vec::new();
        write_summary(&mut buf, &rows).unwrap();
        let back = read_summary(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        // ratio recomputed from the written columns, up to the 6-decimal rounding
        for r in &back {
            let again = relative_performance(r.mean, r.fullset.unwrap()).unwrap();
            assert!((again - r.relative.unwrap()).abs() < 1e-6);
        }
        assert!(read_summary("a,b\n".as_bytes()).is_err());
    }
}
