//! Request-generator workload model: a thread group started over a
//! ramp-up period, each thread looping over a fixed request sequence with
//! Gaussian think delays.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::policy::ContainerId;

use super::SimMs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub target: ContainerId,
    pub threads: u32,
    pub ramp_up_s: u64,
    pub loop_count: u32,
    pub requests_per_loop: u32,
    pub think_time_mean_ms: f64,
    pub think_time_stddev_ms: f64,
    pub base_service_time_ms: SimMs,
    pub rng_seed: u64,
}

impl WorkloadSpec {
    /// Thread start offset: threads start at a uniform rate of
    /// threads/ramp_up per second.
    pub fn start_offset_ms(&self, thread_idx: u32) -> SimMs {
        if self.threads == 0 {
            return 0;
        }
        thread_idx as u64 * self.ramp_up_s * 1000 / self.threads as u64
    }

    pub fn total_requests(&self) -> u64 {
        self.threads as u64 * self.loop_count as u64 * self.requests_per_loop as u64
    }
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            target: String::new(),
            threads: 9,
            ramp_up_s: 2,
            loop_count: 5,
            requests_per_loop: 8,
            think_time_mean_ms: 300.0,
            think_time_stddev_ms: 100.0,
            base_service_time_ms: 166,
            rng_seed: 0,
        }
    }
}

/// Deterministic Gaussian delay source (Box–Muller over a seeded
/// counter-based generator). Samples are clamped at zero and rounded to
/// whole milliseconds.
pub struct GaussianTimer {
    rng: ChaCha8Rng,
    mean: f64,
    stddev: f64,
    spare: Option<f64>,
}

impl GaussianTimer {
    pub fn new(seed: u64, mean: f64, stddev: f64) -> Self {
        GaussianTimer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            mean,
            stddev,
            spare: None,
        }
    }

    fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1: f64 = loop {
            let u: f64 = self.rng.gen();
            if u > f64::EPSILON {
                break u;
            }
        };
        let u2: f64 = self.rng.gen();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn delay_ms(&mut self) -> SimMs {
        let sample = self.mean + self.stddev * self.standard_normal();
        sample.max(0.0).round() as SimMs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn start_offsets_are_uniform_over_ramp_up() {
        let spec = WorkloadSpec::default();
        assert_eq!(spec.start_offset_ms(0), 0);
        assert_eq!(spec.start_offset_ms(1), 222);
        assert_eq!(spec.start_offset_ms(8), 1777);
        let slow = WorkloadSpec {
            ramp_up_s: 36,
            ..WorkloadSpec::default()
        };
        assert_eq!(slow.start_offset_ms(8), 32000);
    }

    #[test]
    fn timer_is_deterministic_per_seed() {
        let mut a = GaussianTimer::new(7, 300.0, 100.0);
        let mut b = GaussianTimer::new(7, 300.0, 100.0);
        let seq_a: Vec<SimMs> = (0..64).map(|_| a.delay_ms()).collect();
        let seq_b: Vec<SimMs> = (0..64).map(|_| b.delay_ms()).collect();
        assert_eq!(seq_a, seq_b);
        let mut c = GaussianTimer::new(8, 300.0, 100.0);
        let seq_c: Vec<SimMs> = (0..64).map(|_| c.delay_ms()).collect();
        assert_ne!(seq_a, seq_c);
    }

    #[test]
    fn timer_matches_parameters_roughly() {
        let mut timer = GaussianTimer::new(42, 300.0, 100.0);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| timer.delay_ms() as f64).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 300.0).abs() < 5.0, "mean {mean}");
        assert!((var.sqrt() - 100.0).abs() < 5.0, "stddev {}", var.sqrt());
        assert!(samples.iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn total_requests_counts_threads_loops_requests() {
        let spec = WorkloadSpec::default();
        assert_eq!(spec.total_requests(), 9 * 5 * 8);
    }
}
