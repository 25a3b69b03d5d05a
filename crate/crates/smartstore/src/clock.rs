//! Injectable time sources.
//!
//! The engine stamps origins through a [`Clock`], and demo workers pace
//! themselves through a [`WorkerClock`], which adds blocking waits and a
//! halt signal. [`VirtualClock`] is manually driven, which makes timed
//! scenarios deterministic and fast under test; [`WallClock`] tracks real
//! time anchored to the moment it was created.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

/// Microseconds since the Unix epoch, UTC.
pub trait Clock: Send + Sync {
    fn now_micros(&self) -> i64;
}

/// Result of a blocking wait.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaitOutcome {
    /// The clock reached the requested instant.
    Reached,
    /// The clock was halted before the instant arrived.
    Halted,
}

/// A clock workers can sleep against and that can be shut down.
pub trait WorkerClock: Clock {
    /// Blocks until the clock reaches `deadline_micros` or is halted.
    /// A deadline already in the past returns immediately with `Reached`,
    /// even on a halted clock.
    fn wait_until(&self, deadline_micros: i64) -> WaitOutcome;

    /// Wakes all waiters and makes future waits on unreached deadlines
    /// return [`WaitOutcome::Halted`].
    fn halt(&self);
}

/// Reads the system clock directly. No waiting support; used when the
/// engine only needs timestamps.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_micros(&self) -> i64 {
        system_now_micros()
    }
}

fn system_now_micros() -> i64 {
    match SystemTime::now().duration_since(UNIX_EPOCH) {
        Ok(d) => d.as_micros() as i64,
        Err(e) => -(e.duration().as_micros() as i64),
    }
}

struct VirtualState {
    now: i64,
    halted: bool,
}

/// A clock that only moves when told to. Waits block on a condvar until
/// the driver advances past the deadline or halts the clock.
pub struct VirtualClock {
    state: Mutex<VirtualState>,
    changed: Condvar,
}

impl VirtualClock {
    pub fn new(start_micros: i64) -> Self {
        VirtualClock {
            state: Mutex::new(VirtualState {
                now: start_micros,
                halted: false,
            }),
            changed: Condvar::new(),
        }
    }

    /// Moves time forward to `t_micros`. Moving backwards is a no-op.
    pub fn advance_to(&self, t_micros: i64) {
        let mut state = self.state.lock().unwrap();
        if t_micros > state.now {
            state.now = t_micros;
            self.changed.notify_all();
        }
    }

    pub fn advance(&self, delta_micros: i64) {
        let mut state = self.state.lock().unwrap();
        state.now = state.now.saturating_add(delta_micros.max(0));
        self.changed.notify_all();
    }

    pub fn is_halted(&self) -> bool {
        self.state.lock().unwrap().halted
    }
}

impl Clock for VirtualClock {
    fn now_micros(&self) -> i64 {
        self.state.lock().unwrap().now
    }
}

impl WorkerClock for VirtualClock {
    fn wait_until(&self, deadline_micros: i64) -> WaitOutcome {
        let mut state = self.state.lock().unwrap();
        loop {
            if state.now >= deadline_micros {
                return WaitOutcome::Reached;
            }
            if state.halted {
                return WaitOutcome::Halted;
            }
            state = self.changed.wait(state).unwrap();
        }
    }

    fn halt(&self) {
        let mut state = self.state.lock().unwrap();
        state.halted = true;
        self.changed.notify_all();
    }
}

/// Real time, anchored so `now_micros` is the system clock but waits can
/// still be interrupted by `halt`.
pub struct WallClock {
    base_micros: i64,
    started: Instant,
    halted: Mutex<bool>,
    changed: Condvar,
}

impl WallClock {
    pub fn new() -> Self {
        WallClock {
            base_micros: system_now_micros(),
            started: Instant::now(),
            halted: Mutex::new(false),
            changed: Condvar::new(),
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        WallClock::new()
    }
}

impl Clock for WallClock {
    fn now_micros(&self) -> i64 {
        self.base_micros + self.started.elapsed().as_micros() as i64
    }
}

impl WorkerClock for WallClock {
    fn wait_until(&self, deadline_micros: i64) -> WaitOutcome {
        let mut halted = self.halted.lock().unwrap();
        loop {
            let now = self.base_micros + self.started.elapsed().as_micros() as i64;
            if now >= deadline_micros {
                return WaitOutcome::Reached;
            }
            if *halted {
                return WaitOutcome::Halted;
            }
            let remaining = Duration::from_micros((deadline_micros - now) as u64);
            let chunk = remaining.min(Duration::from_millis(20));
            let (guard, _) = self.changed.wait_timeout(halted, chunk).unwrap();
            halted = guard;
        }
    }

    fn halt(&self) {
        *self.halted.lock().unwrap() = true;
        self.changed.notify_all();
    }
}
