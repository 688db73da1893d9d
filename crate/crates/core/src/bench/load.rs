//! CPU and composite-time sampling during a bench.

use std::time::Instant;

use super::report::LoadSample;
use crate::clock::process_cpu_ns;
use crate::server::Server;

fn cores() -> f64 {
    std::thread::available_parallelism().map_or(1, |n| n.get()) as f64
}

/// Turns successive readings of a running server into load samples.
pub struct LoadSampler {
    started: Instant,
    last_wall: Instant,
    last_proc_ns: u64,
    last_source_ns: u64,
    last_tick_seq: Option<u64>,
}

impl LoadSampler {
    pub fn new(server: &Server) -> Self {
        let now = Instant::now();
        Self {
            started: now,
            last_wall: now,
            last_proc_ns: process_cpu_ns(),
            last_source_ns: server.source_cpu_ns(),
            last_tick_seq: server.tick_stats().last().map(|t| t.frame_seq),
        }
    }

    pub fn sample(&mut self, server: &Server) -> LoadSample {
        let now = Instant::now();
        let wall_ns = now.duration_since(self.last_wall).as_nanos().max(1) as f64 * cores();
        let proc_ns = process_cpu_ns();
        let source_ns = server.source_cpu_ns();
        let stats = server.tick_stats();
        let ticks: Vec<f64> = stats
            .iter()
            .filter(|t| self.last_tick_seq.is_none_or(|s| t.frame_seq > s))
            .map(|t| t.composite_us)
            .collect();
        if let Some(last) = stats.last() {
            self.last_tick_seq = Some(last.frame_seq);
        }
        let sample = LoadSample {
            t: now.duration_since(self.started).as_secs_f64(),
            cpu_fraction: ((proc_ns - self.last_proc_ns) as f64 / wall_ns).clamp(0.0, 1.0),
            source_cpu_fraction: ((source_ns - self.last_source_ns) as f64 / wall_ns).clamp(0.0, 1.0),
            composite_time_us: super::stats::median(&ticks),
        };
        self.last_wall = now;
        self.last_proc_ns = proc_ns;
        self.last_source_ns = source_ns;
        sample
    }
}
