//! Monotonic stream clock and CPU-time probes.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

fn read_clock(id: libc::clockid_t) -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec and `id` is a clock id
    // supported on every Linux kernel this crate targets.
    let rc = unsafe { libc::clock_gettime(id, &mut ts) };
    debug_assert_eq!(rc, 0, "clock_gettime failed");
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

/// CLOCK_MONOTONIC in microseconds. Shared by every process on the host.
pub fn monotonic_us() -> u64 {
    read_clock(libc::CLOCK_MONOTONIC) / 1_000
}

/// CPU time consumed by the calling thread, in nanoseconds.
pub fn thread_cpu_ns() -> u64 {
    read_clock(libc::CLOCK_THREAD_CPUTIME_ID)
}

/// CPU time (user + system) consumed by the whole process, in nanoseconds.
pub fn process_cpu_ns() -> u64 {
    read_clock(libc::CLOCK_PROCESS_CPUTIME_ID)
}

/// Microsecond clock anchored at a stream epoch.
///
/// All capture, composite and render timestamps of one stream are expressed
/// against the same epoch, so latency is a plain subtraction. The epoch is a
/// CLOCK_MONOTONIC reading, which lets a client on the same host map its own
/// readings into the server's domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamClock {
    epoch_mono_us: u64,
}

impl StreamClock {
    /// Start a new epoch now.
    pub fn new() -> Self {
        Self {
            epoch_mono_us: monotonic_us(),
        }
    }

    /// Adopt an epoch announced by a peer on the same host.
    pub fn from_epoch(epoch_mono_us: u64) -> Self {
        Self { epoch_mono_us }
    }

    pub fn epoch_mono_us(&self) -> u64 {
        self.epoch_mono_us
    }

    /// Microseconds since the epoch.
    pub fn now_us(&self) -> u64 {
        monotonic_us().saturating_sub(self.epoch_mono_us)
    }
}

impl Default for StreamClock {
    fn default() -> Self {
        Self::new()
    }
}

/// A stop flag that sleeping loops can wait on.
///
/// `wait_until` returns early as soon as `stop` is called, so producer
/// threads exit promptly instead of finishing their current period.
#[derive(Debug, Default)]
pub struct StopSignal {
    stopped: Mutex<bool>,
    cv: Condvar,
}

impl StopSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stop(&self) {
        *self.stopped.lock().unwrap() = true;
        self.cv.notify_all();
    }

    pub fn is_stopped(&self) -> bool {
        *self.stopped.lock().unwrap()
    }

    /// Sleep until `deadline_us` on `clock`. Returns `true` if stopped.
    pub fn wait_until(&self, clock: &StreamClock, deadline_us: u64) -> bool {
        let mut stopped = self.stopped.lock().unwrap();
        loop {
            if *stopped {
                return true;
            }
            let now = clock.now_us();
            if now >= deadline_us {
                return false;
            }
            let wait = Duration::from_micros(deadline_us - now);
            stopped = self.cv.wait_timeout(stopped, wait).unwrap().0;
        }
    }

    /// Sleep for `dur`. Returns `true` if stopped.
    pub fn wait_for(&self, dur: Duration) -> bool {
        let clock = StreamClock::new();
        self.wait_until(&clock, dur.as_micros() as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::time::Instant;

    #[test]
    fn clock_is_monotone() {
        let clock = StreamClock::new();
        let a = clock.now_us();
        std::thread::sleep(Duration::from_millis(2));
        let b = clock.now_us();
        assert!(b >= a + 1_000);
    }

    #[test]
    fn peer_epoch_maps_to_same_domain() {
        let server = StreamClock::new();
        let client = StreamClock::from_epoch(server.epoch_mono_us());
        let a = server.now_us();
        let b = client.now_us();
        assert!(b >= a && b - a < 10_000);
    }

    #[test]
    fn stop_interrupts_wait() {
        let sig = Arc::new(StopSignal::new());
        let s2 = sig.clone();
        let t = std::thread::spawn(move || s2.wait_for(Duration::from_secs(10)));
        let start = Instant::now();
        std::thread::sleep(Duration::from_millis(20));
        sig.stop();
        assert!(t.join().unwrap());
        assert!(start.elapsed() < Duration::from_secs(2));
    }

    #[test]
    fn thread_cpu_advances_under_work() {
        let before = thread_cpu_ns();
        let mut x = 0u64;
        for i in 0..5_000_000u64 {
            x = x.wrapping_mul(31).wrapping_add(i);
        }
        std::hint::black_box(x);
        assert!(thread_cpu_ns() > before);
        assert!(process_cpu_ns() > 0);
    }
}
