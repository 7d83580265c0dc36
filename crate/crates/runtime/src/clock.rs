//! Tick pacing.
//!
//! Realtime mode sleeps to absolute deadlines `start + k * ts`, so lateness
//! on one tick does not push back the following ones. Late ticks are
//! counted as overruns and still run; nothing is skipped.

use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    Realtime,
    Accelerated,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TickStats {
    pub ticks: u64,
    /// Ticks that began more than one period after their deadline.
    pub overruns: u64,
    /// Largest wake-up lateness, seconds.
    pub max_lateness: f64,
    /// Seconds between the first and the latest tick.
    pub span: f64,
}

impl TickStats {
    /// Mean tick period in seconds, `None` before the second tick.
    pub fn mean_period(&self) -> Option<f64> {
        (self.ticks >= 2).then(|| self.span / (self.ticks - 1) as f64)
    }
}

#[derive(Debug)]
pub struct LoopClock {
    ts: Duration,
    mode: ClockMode,
    tick: u64,
    start: Option<Instant>,
    stats: TickStats,
}

impl LoopClock {
    pub fn new(ts_secs: f64, mode: ClockMode) -> Self {
        Self { ts: Duration::from_secs_f64(ts_secs), mode, tick: 0, start: None, stats: TickStats::default() }
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn ts(&self) -> Duration {
        self.ts
    }

    /// Ticks handed out so far.
    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn stats(&self) -> TickStats {
        self.stats
    }

    /// Blocks until tick `k` is due (immediately when accelerated) and
    /// returns `k`, counting from zero.
    pub fn wait_next(&mut self) -> u64 {
        let k = self.tick;
        self.tick += 1;
        self.stats.ticks = self.tick;
        if self.mode == ClockMode::Accelerated {
            return k;
        }
        let start = *self.start.get_or_insert_with(Instant::now);
        let deadline = start + self.ts * k as u32;
        let now = Instant::now();
        if now < deadline {
            std::thread::sleep(deadline - now);
        }
        let woke = Instant::now();
        let late = woke.saturating_duration_since(deadline);
        if late > self.ts {
            self.stats.overruns += 1;
            log::warn!("tick {k} started {:.1} ms late", late.as_secs_f64() * 1e3);
        }
        self.stats.max_lateness = self.stats.max_lateness.max(late.as_secs_f64());
        self.stats.span = woke.duration_since(start).as_secs_f64();
        k
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accelerated_counts_without_waiting() {
        let mut c = LoopClock::new(10.0, ClockMode::Accelerated);
        let t0 = Instant::now();
        for k in 0..100 {
            assert_eq!(c.wait_next(), k);
        }
        assert!(t0.elapsed() < Duration::from_secs(1));
        assert_eq!(c.tick_count(), 100);
    }

    #[test]
    fn realtime_keeps_period() {
        let mut c = LoopClock::new(0.01, ClockMode::Realtime);
        for _ in 0..21 {
            c.wait_next();
        }
        let p = c.stats().mean_period().unwrap();
        assert!((p - 0.01).abs() < 0.002, "period {p}");
    }
}
