//! CSV tables and the plain-text summary block.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::CliError;

/// Shortest representation that reads back to the same value.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&'static str]) -> Self {
        Table {
            name: name.into(),
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Writes `dir/name` with a trailing `# config_hash=…,seed=…` line.
    pub fn write(&self, dir: &Path, hash: &str, seed: u64) -> Result<(), CliError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let mut bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
        writeln!(bytes, "# config_hash={hash},seed={seed}")?;
        fs::write(dir.join(&self.name), bytes)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Status {
    Pass,
    /// The interval is too wide to decide.
    Inconclusive,
    Fail,
}

impl Status {
    pub fn label(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Inconclusive => "inconclusive",
            Status::Fail => "fail",
        }
    }

    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slope {
    pub name: String,
    pub value: f64,
    pub half_width: f64,
}

/// Everything a pipeline hands back besides its tables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub tables: Vec<Table>,
    pub slopes: Vec<Slope>,
    pub checks: Vec<(String, Status)>,
    /// Extra `key = value` lines.
    pub notes: Vec<(String, String)>,
}

impl Report {
    pub fn slope(&mut self, name: &str, value: f64, half_width: f64) {
        self.slopes.push(Slope {
            name: name.into(),
            value,
            half_width,
        });
    }

    pub fn check(&mut self, name: &str, status: Status) {
        self.checks.push((name.into(), status));
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.into(), value.to_string()));
    }

    pub fn merge(&mut self, other: Report) {
        self.tables.extend(other.tables);
        self.slopes.extend(other.slopes);
        self.checks.extend(other.checks);
        self.notes.extend(other.notes);
    }

    pub fn worst(&self) -> Status {
        self.checks
            .iter()
            .map(|(_, s)| *s)
            .max()
            .unwrap_or(Status::Pass)
    }
}

/// Status of a slope compared with `target ± tolerance`, or with the
/// one-sided `slope ≤ target + tolerance` when `upper_only`.
pub fn slope_status(
    value: f64,
    half_width: f64,
    target: f64,
    tolerance: f64,
    max_ci: f64,
    upper_only: bool,
) -> Status {
    let inside = if upper_only {
        value <= target + tolerance
    } else {
        (value - target).abs() <= tolerance
    };
    if !half_width.is_finite() || half_width > max_ci {
        Status::Inconclusive
    } else {
        Status::from_bool(inside)
    }
}

pub struct SummaryHeader<'a> {
    pub command: &'a str,
    pub seed: u64,
    pub theta: f64,
    pub zeta_target: f64,
    pub config_hash: &'a str,
}

pub fn summary_block(h: &SummaryHeader<'_>, r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[summary]");
    let _ = writeln!(s, "command = {}", h.command);
    let _ = writeln!(s, "seed = {}", h.seed);
    let _ = writeln!(s, "theta = {}", h.theta);
    let _ = writeln!(s, "zeta_target = {}", h.zeta_target);
    let _ = writeln!(s, "config_hash = {}", h.config_hash);
    let slopes: Vec<String> = r
        .slopes
        .iter()
        .map(|x| format!("{}={:.4}±{:.4}", x.name, x.value, x.half_width))
        .collect();
    let _ = writeln!(s, "slopes = {}", slopes.join(", "));
    for (k, v) in &r.notes {
        let _ = writeln!(s, "{k} = {v}");
    }
    for (k, st) in &r.checks {
        let _ = writeln!(s, "{k} = {}", st.label());
    }
    let _ = writeln!(s, "overall = {}", r.worst().label());
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_trailer() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new("x.csv", &["n", "value"]);
        t.push(vec!["1".into(), num(0.5)]);
        t.write(dir.path(), "abc", 7).unwrap();
        let text = std::fs::read_to_string(dir.path().join("x.csv")).unwrap();
        assert_eq!(text, "n,value\n1,5e-1\n# config_hash=abc,seed=7\n");
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 2.5e-300, -7.0] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn slope_status_rules() {
        assert_eq!(
            slope_status(-2.1, 0.05, -2.0, 0.4, 0.25, false),
            Status::Pass
        );
        assert_eq!(
            slope_status(-2.5, 0.05, -2.0, 0.4, 0.25, false),
            Status::Fail
        );
        assert_eq!(
            slope_status(-2.5, 0.05, -2.0, 0.4, 0.25, true),
            Status::Pass
        );
        assert_eq!(
            slope_status(-2.0, 0.5, -2.0, 0.4, 0.25, false),
            Status::Inconclusive
        );
    }

    #[test]
    fn worst_status_wins() {
        let mut r = Report::default();
        assert_eq!(r.worst(), Status::Pass);
        r.check("a", Status::Inconclusive);
        assert_eq!(r.worst(), Status::Inconclusive);
        r.check("b", Status::Fail);
        assert_eq!(r.worst(), Status::Fail);
    }
}
