use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const METRICS_HEADER: &str = "iter,loss,acc,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss: f64,
    pub acc: f64,
    pub seconds: f64,
}

/// Training telemetry, one row per logging interval.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.iter <= last.iter {
                return Err(invalid!("metrics iteration {} after {}", row.iter, last.iter));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// Rows without the wall-clock column.
    pub fn trajectory(&self) -> Vec<(u64, f64, f64)> {
        self.rows.iter().map(|r| (r.iter, r.loss, r.acc)).collect()
    }

    /// Drop rows after iteration `iter`.
    pub fn retain_through(&mut self, iter: u64) {
        self.rows.retain(|r| r.iter <= iter);
    }

    /// Prepare a log for continuation from `iter`: drop later rows and any
    /// end-of-run row that falls between logging intervals.
    pub fn truncate_for_resume(&mut self, iter: u64, log_every: u64) {
        self.rows.retain(|r| r.iter <= iter && r.iter.is_multiple_of(log_every));
    }

    /// Append another log that continues this one.
    pub fn extend(&mut self, other: MetricsLog) -> Result<()> {
        other.rows.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            // {:?} on f64 prints the shortest representation that round-trips
            let _ = writeln!(s, "{},{:?},{:?},{:.3}", r.iter, r.loss, r.acc, r.seconds);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::Parse {
                what: "metrics".into(),
                line: 1,
                msg: format!("expected header {METRICS_HEADER}"),
            });
        }
        let mut log = MetricsLog::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let err = |msg: String| Error::Parse { what: "metrics".into(), line: i + 2, msg };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            log.push(MetricsRow {
                iter: f[0].parse().map_err(|e| err(format!("{:?}: {e}", f[0])))?,
                loss: num(f[1])?,
                acc: num(f[2])?,
                seconds: num(f[3])?,
            })?;
        }
        Ok(log)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip() {
        let mut log = MetricsLog::new();
        log.push(MetricsRow { iter: 1, loss: 2.0794415416798357, acc: 0.125, seconds: 0.5 }).unwrap();
        log.push(MetricsRow { iter: 2, loss: 1.9, acc: 0.25, seconds: 1.0 }).unwrap();
        let csv = log.to_csv();
        assert!(csv.starts_with("iter,loss,acc,seconds\n1,2.0794415416798357,0.125,0.500\n"));
        assert_eq!(MetricsLog::from_csv(&csv).unwrap(), log);
    }

    #[test]
    fn iterations_must_increase() {
        let mut log = MetricsLog::new();
        log.push(MetricsRow { iter: 5, loss: 1.0, acc: 0.0, seconds: 0.0 }).unwrap();
        assert!(log.push(MetricsRow { iter: 5, loss: 1.0, acc: 0.0, seconds: 0.0 }).is_err());
    }

    #[test]
    fn resume_drops_off_interval_rows() {
        let mut log = MetricsLog::new();
        for iter in [2, 4, 5] {
            log.push(MetricsRow { iter, loss: 1.0, acc: 0.0, seconds: 0.0 }).unwrap();
        }
        log.truncate_for_resume(5, 2);
        assert_eq!(log.rows().iter().map(|r| r.iter).collect::<Vec<_>>(), [2, 4]);
    }
}
