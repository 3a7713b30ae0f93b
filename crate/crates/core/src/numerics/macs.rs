//! Thread-local multiply-accumulate counter.
//!
//! Every dense kernel in this module tree reports the MACs it performs
//! here. Analytic cost formulas are checked against this counter.

use std::cell::Cell;

thread_local! {
    static COUNT: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    COUNT.with(|c| c.set(0));
}

pub fn read() -> u64 {
    COUNT.with(|c| c.get())
}

#[inline]
pub(crate) fn add(n: usize) {
    COUNT.with(|c| c.set(c.get() + n as u64));
}

/// Runs `f` and returns its result together with the MACs it performed.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = read();
    let out = f();
    (out, read() - before)
}
