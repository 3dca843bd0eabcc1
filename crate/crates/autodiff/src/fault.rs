//! Gradient fault injection for negative-control checks.
//!
//! While a fault is active on the current thread, the backward rule of the
//! selected operation kind scales its upstream gradient by [`FAULT_SCALE`],
//! so any gradient check that exercises that op must fail.

use std::cell::Cell;

use crate::tape::OpKind;

pub const FAULT_SCALE: f64 = 1.5;

thread_local! {
    static ACTIVE: Cell<Option<OpKind>> = const { Cell::new(None) };
}

pub(crate) fn active() -> Option<OpKind> {
    ACTIVE.with(Cell::get)
}

/// Runs `f` with a corrupted backward rule for `kind` on this thread.
pub fn with_fault<R>(kind: OpKind, f: impl FnOnce() -> R) -> R {
    struct Reset(Option<OpKind>);
    impl Drop for Reset {
        fn drop(&mut self) {
            ACTIVE.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(ACTIVE.with(|c| c.replace(Some(kind))));
    f()
}
