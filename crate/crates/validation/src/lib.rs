//! Acceptance criteria as plain functions, each returning a [`Verdict`].
//!
//! The `acceptance` test target runs them in order and prints one line per
//! criterion. Budgets are fixed; nothing here is scaled down for speed.

use std::fmt;
use std::time::{Duration, Instant};

pub mod numerics;
pub mod simulator;
pub mod training;

#[derive(Clone, Debug)]
pub struct Verdict {
    pub id: u32,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} [{:>2}] {} ({:.1}s): {}", self.id, self.title, self.elapsed.as_secs_f64(), self.detail)
    }
}

/// Runs `check` and folds errors and an optional wall-clock limit into the
/// verdict.
pub fn timed(
    id: u32,
    title: &'static str,
    limit: Option<Duration>,
    check: impl FnOnce() -> Result<(bool, String), String>,
) -> Verdict {
    let start = Instant::now();
    let (mut passed, mut detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
    let elapsed = start.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            passed = false;
            detail.push_str(&format!("; exceeded {}s limit", limit.as_secs()));
        }
    }
    Verdict { id, title, passed, detail, elapsed }
}

pub(crate) fn err(e: impl fmt::Display) -> String {
    e.to_string()
}
