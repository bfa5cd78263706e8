//! Thread-local operation counters, incremented by the compute kernels as
//! they run. Used to cross-check the analytic cost model against what the
//! kernels actually execute.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
    static MISC_OPS: Cell<u64> = const { Cell::new(0) };
}

/// Record `n` multiply-accumulates executed by a kernel.
pub fn add_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

/// Record `n` non-MAC element operations (pooling, interpolation, softmax).
pub fn add_misc(n: u64) {
    MISC_OPS.with(|c| c.set(c.get() + n));
}

/// Counters measured on this thread since the last reset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub macs: u64,
    pub misc_ops: u64,
}

impl Counts {
    /// Total FLOPs under the 1 MAC = 2 FLOPs convention.
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.misc_ops
    }
}

pub fn read() -> Counts {
    Counts {
        macs: MACS.with(|c| c.get()),
        misc_ops: MISC_OPS.with(|c| c.get()),
    }
}

pub fn reset() {
    MACS.with(|c| c.set(0));
    MISC_OPS.with(|c| c.set(0));
}

/// Run `f` with fresh counters and return its result with what it executed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, Counts) {
    let before = read();
    reset();
    let out = f();
    let counts = read();
    MACS.with(|c| c.set(before.macs + counts.macs));
    MISC_OPS.with(|c| c.set(before.misc_ops + counts.misc_ops));
    (out, counts)
}
