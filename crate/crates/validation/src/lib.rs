//! Reporting for the `acceptance` test target: each criterion runs as a
//! closure, records named sub-checks, and prints a single PASS/FAIL line
//! followed by its details.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

/// Sub-check collector handed to each criterion.
#[derive(Debug, Default)]
pub struct Checks {
    lines: Vec<(bool, String)>,
}

impl Checks {
    pub fn check(&mut self, ok: bool, detail: impl Into<String>) -> bool {
        self.lines.push((ok, detail.into()));
        ok
    }

    pub fn note(&mut self, detail: impl Into<String>) {
        self.lines.push((true, detail.into()));
    }

    pub fn passed(&self) -> bool {
        self.lines.iter().all(|(ok, _)| *ok)
    }
}

#[derive(Debug)]
pub struct Outcome {
    pub id: String,
    pub title: String,
    pub passed: bool,
    pub elapsed: Duration,
    pub lines: Vec<(bool, String)>,
}

/// Runs criteria in order, honouring positional filters from the command
/// line (`cargo test --test acceptance -- 3 7`).
#[derive(Debug)]
pub struct Suite {
    filters: Vec<String>,
    outcomes: Vec<Outcome>,
}

impl Suite {
    pub fn from_args() -> Self {
        let filters = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
        Self::with_filters(filters)
    }

    pub fn with_filters(filters: Vec<String>) -> Self {
        Self {
            filters,
            outcomes: Vec::new(),
        }
    }

    pub fn selected(&self, id: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| f == id)
    }

    /// Runs one criterion. A returned `Err` counts as a failed check.
    pub fn run<F>(&mut self, id: &str, title: &str, f: F)
    where
        F: FnOnce(&mut Checks) -> Result<(), String>,
    {
        if !self.selected(id) {
            return;
        }
        let start = Instant::now();
        let mut checks = Checks::default();
        if let Err(e) = f(&mut checks) {
            checks.check(false, format!("error: {e}"));
        }
        let outcome = Outcome {
            id: id.to_string(),
            title: title.to_string(),
            passed: checks.passed(),
            elapsed: start.elapsed(),
            lines: checks.lines,
        };
        print_outcome(&outcome);
        self.outcomes.push(outcome);
    }

    pub fn outcomes(&self) -> &[Outcome] {
        &self.outcomes
    }

    /// Prints the summary and returns failure if any criterion failed.
    pub fn finish(self) -> ExitCode {
        println!();
        println!("acceptance summary");
        for o in &self.outcomes {
            println!("{} criterion {:>2}: {}", verdict(o.passed), o.id, o.title);
        }
        let failed = self.outcomes.iter().filter(|o| !o.passed).count();
        println!("{} passed, {failed} failed", self.outcomes.len() - failed);
        if failed == 0 {
            ExitCode::SUCCESS
        } else {
            ExitCode::FAILURE
        }
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn print_outcome(o: &Outcome) {
    println!(
        "{} criterion {:>2}: {} ({:.1} s)",
        verdict(o.passed),
        o.id,
        o.title,
        o.elapsed.as_secs_f64()
    );
    for (ok, line) in &o.lines {
        println!("       [{}] {line}", if *ok { "ok" } else { "!!" });
    }
}

/// Median of a non-empty slice; the mean of the middle pair for even
/// lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// The workspace root, two levels above this crate.
pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn failing_check_fails_criterion() {
        let mut s = Suite::with_filters(vec![]);
        s.run("1", "ok", |c| {
            c.check(true, "fine");
            Ok(())
        });
        s.run("2", "bad", |c| {
            c.check(false, "broken");
            Ok(())
        });
        s.run("3", "err", |_| Err("boom".into()));
        let passed: Vec<bool> = s.outcomes().iter().map(|o| o.passed).collect();
        assert_eq!(passed, vec![true, false, false]);
    }

    #[test]
    fn filters_select_ids() {
        let s = Suite::with_filters(vec!["7".into()]);
        assert!(s.selected("7") && !s.selected("1"));
    }
}
