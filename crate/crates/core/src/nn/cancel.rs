//! Process-wide cooperative cancellation for long training loops. Loops
//! poll [`requested`] after each optimizer step and stop early, leaving the
//! caller to checkpoint what was learned so far.

use std::sync::atomic::{AtomicBool, Ordering};

static CANCEL: AtomicBool = AtomicBool::new(false);

pub fn request() {
    CANCEL.store(true, Ordering::SeqCst);
}

pub fn requested() -> bool {
    CANCEL.load(Ordering::SeqCst)
}

pub fn reset() {
    CANCEL.store(false, Ordering::SeqCst);
}
