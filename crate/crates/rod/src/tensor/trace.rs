//! Thread-local kernel invocation counters.
//!
//! The bench harness uses these to show that two runs with the same seed and
//! thread mode execute the identical operation sequence even when wall times
//! differ. Counting is coarse (one bump per kernel call) and cheap enough to
//! stay always-on.

use std::cell::RefCell;
use std::collections::BTreeMap;

thread_local! {
    static COUNTS: RefCell<BTreeMap<&'static str, u64>> = const { RefCell::new(BTreeMap::new()) };
}

/// Record one invocation of the named kernel.
pub fn bump(kind: &'static str) {
    COUNTS.with(|c| {
        *c.borrow_mut().entry(kind).or_insert(0) += 1;
    });
}

/// Zero all counters on the current thread.
pub fn reset() {
    COUNTS.with(|c| c.borrow_mut().clear());
}

/// Snapshot of per-kernel invocation counts on the current thread.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OpTrace(pub BTreeMap<String, u64>);

impl OpTrace {
    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }
}

pub fn snapshot() -> OpTrace {
    COUNTS.with(|c| OpTrace(c.borrow().iter().map(|(k, v)| (k.to_string(), *v)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counters_accumulate_and_reset() {
        reset();
        bump("conv2d");
        bump("conv2d");
        bump("resize");
        let snap = snapshot();
        assert_eq!(snap.0.get("conv2d"), Some(&2));
        assert_eq!(snap.0.get("resize"), Some(&1));
        assert_eq!(snap.total(), 3);
        reset();
        assert_eq!(snapshot().total(), 0);
    }
}
