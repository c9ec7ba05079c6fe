//! Runner for the acceptance criteria in `tests/acceptance.rs`.
//!
//! `ATTNLAB_ACCEPTANCE_ONLY=1,3,8` restricts a run to the listed criteria.

use std::collections::BTreeSet;
use std::time::Instant;

/// Outcome of one criterion.
#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict { pass, detail: detail.into() }
    }
}

/// Criterion numbers selected by `ATTNLAB_ACCEPTANCE_ONLY`, or `None` for all.
pub fn selection() -> Option<BTreeSet<usize>> {
    let raw = std::env::var("ATTNLAB_ACCEPTANCE_ONLY").ok()?;
    Some(raw.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

/// Runs the selected criteria in order, printing one line each. Returns the
/// number of failures.
pub fn run<C>(ctx: &mut C, criteria: &[(usize, &str, fn(&mut C) -> Verdict)]) -> usize {
    let only = selection();
    let mut failed = 0;
    for (k, name, f) in criteria {
        if only.as_ref().is_some_and(|s| !s.contains(k)) {
            continue;
        }
        let t = Instant::now();
        let v = f(ctx);
        failed += !v.pass as usize;
        println!(
            "criterion {k:>2} {name}: {} | {} ({:.1} s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
    }
    failed
}
