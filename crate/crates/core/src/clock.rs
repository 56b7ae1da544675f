//! Process-wide monotonic clock.
//!
//! Every timestamp in the crate is a [`Timestamp`]: nanoseconds since a lazily
//! initialised process epoch. Readers are wait-free after the first call.

use std::fmt;
use std::ops::{Add, Sub};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

static EPOCH: OnceLock<Instant> = OnceLock::new();

fn epoch() -> Instant {
    *EPOCH.get_or_init(Instant::now)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn now() -> Self {
        Timestamp(epoch().elapsed().as_nanos() as u64)
    }

    pub fn from_nanos(ns: u64) -> Self {
        Timestamp(ns)
    }

    pub fn from_micros(us: u64) -> Self {
        Timestamp(us.saturating_mul(1_000))
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_micros(self) -> u64 {
        self.0 / 1_000
    }

    pub fn as_micros_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn to_instant(self) -> Instant {
        epoch() + Duration::from_nanos(self.0)
    }

    pub fn saturating_since(self, earlier: Timestamp) -> Duration {
        Duration::from_nanos(self.0.saturating_sub(earlier.0))
    }
}

impl Add<Duration> for Timestamp {
    type Output = Timestamp;

    fn add(self, rhs: Duration) -> Timestamp {
        Timestamp(self.0.saturating_add(rhs.as_nanos() as u64))
    }
}

impl Sub for Timestamp {
    type Output = Duration;

    fn sub(self, rhs: Timestamp) -> Duration {
        self.saturating_since(rhs)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.as_micros())
    }
}

/// Converts a non-negative microsecond quantity into a `Duration`.
/// Negative and non-finite inputs clamp to zero.
pub fn micros_f64(us: f64) -> Duration {
    if us.is_finite() && us > 0.0 {
        Duration::from_nanos((us * 1_000.0).round() as u64)
    } else {
        Duration::ZERO
    }
}

/// Lowers the kernel timer slack for the calling thread so that short sleeps
/// wake close to their deadline. Linux only; elsewhere a no-op.
pub fn tighten_timer_slack() {
    #[cfg(target_os = "linux")]
    unsafe {
        libc::prctl(libc::PR_SET_TIMERSLACK, 1 as libc::c_ulong, 0, 0, 0);
    }
}

/// Keeps freed heap memory mapped so that per-collective buffers are reused
/// instead of being faulted in afresh. Page faults are the dominant transport
/// cost on small virtual machines. glibc only; elsewhere a no-op.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}

/// CPU time consumed by the whole process so far.
pub fn process_cpu_time() -> Duration {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_PROCESS_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return Duration::ZERO;
    }
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

/// Holds the calling thread until `deadline` without consuming CPU.
///
/// Spinning would be more precise, but on hosts with few cores a spinning
/// compute thread starves the communication threads it is meant to overlap
/// with. The wake-up overshoot is the same in every mode, so comparisons
/// between runs are unaffected. Call [`tighten_timer_slack`] first.
pub fn compute_until(deadline: Instant) {
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        std::thread::sleep(deadline - now);
    }
}

pub fn compute_for(duration: Duration) {
    if duration.is_zero() {
        return;
    }
    compute_until(Instant::now() + duration);
}
