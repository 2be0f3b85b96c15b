use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::LossReport;

pub const TRACE_HEADER: &str = "step,epoch,sum_bg,sum_fg,beta,total";

/// Per-step loss reports of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace {
    pub steps_per_epoch: usize,
    pub reports: Vec<LossReport>,
}

/// Means over the steps of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMean {
    pub epoch: usize,
    pub sum_bg: f64,
    pub sum_fg: f64,
    pub beta: f64,
    pub total: f64,
}

/// One parsed trace CSV row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub sum_bg: f64,
    pub sum_fg: f64,
    pub beta: f64,
    pub total: f64,
}

impl TraceRow {
    pub fn weighted_fg(&self) -> f64 {
        self.beta * self.sum_fg
    }

    pub fn weighted_bg(&self) -> f64 {
        (1.0 - self.beta) * self.sum_bg
    }
}

impl TrainTrace {
    pub fn new(steps_per_epoch: usize) -> Self {
        Self {
            steps_per_epoch,
            reports: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    /// 1-based epoch of the 1-based `step`.
    pub fn epoch_of(&self, step: usize) -> usize {
        (step - 1) / self.steps_per_epoch + 1
    }

    pub fn epoch_means(&self) -> Vec<EpochMean> {
        self.reports
            .chunks(self.steps_per_epoch)
            .enumerate()
            .map(|(i, chunk)| {
                let n = chunk.len() as f64;
                let mean = |f: fn(&LossReport) -> f64| chunk.iter().map(f).sum::<f64>() / n;
                EpochMean {
                    epoch: i + 1,
                    sum_bg: mean(|r| r.sum_bg),
                    sum_fg: mean(|r| r.sum_fg),
                    beta: mean(|r| r.beta),
                    total: mean(|r| r.total),
                }
            })
            .collect()
    }

    /// Mean `|weighted fg - weighted bg|` over the last `fraction` of steps
    /// (at least one step).
    pub fn tail_gap(&self, fraction: f64) -> Result<f64> {
        if self.reports.is_empty() {
            return Err(Error::InvalidState("empty trace has no tail".into()));
        }
        let n =
            ((self.reports.len() as f64 * fraction).ceil() as usize).clamp(1, self.reports.len());
        let tail = &self.reports[self.reports.len() - n..];
        Ok(tail.iter().map(LossReport::weighted_gap).sum::<f64>() / n as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.reports {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                r.step,
                self.epoch_of(r.step),
                r.sum_bg,
                r.sum_fg,
                r.beta,
                r.total
            );
        }
        out
    }
}

pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Config(format!("trace CSV: {e}")))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != TRACE_HEADER {
        return Err(Error::Config(format!(
            "trace CSV header is {header:?}, expected {TRACE_HEADER:?}"
        )));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Config(format!("trace CSV line {line}: {e}")))?;
        let field = |k: usize| -> Result<&str> {
            record.get(k).ok_or_else(|| {
                Error::Config(format!("trace CSV line {line}: missing column {}", k + 1))
            })
        };
        let int = |k: usize| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|e| Error::Config(format!("trace CSV line {line}: {e}")))
        };
        let real = |k: usize| -> Result<f64> {
            field(k)?
                .parse()
                .map_err(|e| Error::Config(format!("trace CSV line {line}: {e}")))
        };
        rows.push(TraceRow {
            step: int(0)?,
            epoch: int(1)?,
            sum_bg: real(2)?,
            sum_fg: real(3)?,
            beta: real(4)?,
            total: real(5)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Config("trace CSV has no rows".into()));
    }
    Ok(rows)
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace_csv(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(step: usize, total: f64) -> LossReport {
        LossReport {
            step,
            sum_bg: 2.0 * total,
            sum_fg: total,
            beta: 0.7,
            total,
            pixels: 4,
        }
    }

    #[test]
    fn epoch_means_and_csv_round_trip() {
        let mut t = TrainTrace::new(2);
        t.reports = (1..=4).map(|s| report(s, s as f64)).collect();
        let means = t.epoch_means();
        assert_eq!(means.len(), 2);
        assert_eq!((means[0].epoch, means[0].total), (1, 1.5));
        assert_eq!(means[1].total, 3.5);
        let rows = parse_trace_csv(&t.to_csv()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[2].step, rows[2].epoch, rows[2].sum_bg), (3, 2, 6.0));
        assert!((rows[3].weighted_fg() - 0.7 * 4.0).abs() < 1e-12);
        assert!(t
            .to_csv()
            .lines()
            .nth(1)
            .unwrap()
            .ends_with("0.700000,1.000000"));
    }

    #[test]
    fn tail_gap_covers_the_last_steps() {
        let mut t = TrainTrace::new(10);
        t.reports = (1..=10)
            .map(|s| report(s, if s == 10 { 1.0 } else { 0.0 }))
            .collect();
        let gap = (0.7 - 0.3 * 2.0_f64).abs();
        assert!((t.tail_gap(0.1).unwrap() - gap).abs() < 1e-12);
        assert!((t.tail_gap(0.2).unwrap() - gap / 2.0).abs() < 1e-12);
        assert!(TrainTrace::new(1).tail_gap(0.1).is_err());
    }

    #[test]
    fn malformed_trace_csv() {
        assert!(parse_trace_csv("step,epoch\n1,1\n").is_err());
        assert!(parse_trace_csv(&format!("{TRACE_HEADER}\n")).is_err());
        assert!(parse_trace_csv(&format!("{TRACE_HEADER}\n1,1,x,0,0.5,0\n")).is_err());
        assert!(parse_trace_csv(&format!("{TRACE_HEADER}\n1,1,0,0,0.5\n")).is_err());
    }
}
