//! Forward-pass throughput: warmup batches, then timed batches, eval mode.

use std::time::Instant;

use crate::cost::{baseline_of, count_flops};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Mode;
use crate::tensor::{Fill, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub batch: usize,
    pub warmup: usize,
    pub measured: usize,
    pub input_hw: (usize, usize),
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            warmup: 10,
            measured: 100,
            input_hw: (32, 32),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub model: String,
    pub batch: usize,
    pub forward_passes: usize,
    /// Seconds per measured batch.
    pub batch_seconds: Vec<f64>,
    pub macs: u64,
    pub baseline_macs: u64,
}

impl BenchReport {
    fn rates(&self) -> impl Iterator<Item = f64> + '_ {
        self.batch_seconds.iter().map(|s| self.batch as f64 / s.max(1e-12))
    }

    pub fn mean_images_per_second(&self) -> f64 {
        self.rates().sum::<f64>() / self.batch_seconds.len() as f64
    }

    pub fn std_images_per_second(&self) -> f64 {
        let n = self.batch_seconds.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean_images_per_second();
        (self.rates().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {:.1} +- {:.1} img/s over {} batches of {} ({} forward passes, CPU wall clock)\nMACs per image: {} (ConvMixer baseline {}, ratio {:.4})",
            self.model,
            self.mean_images_per_second(),
            self.std_images_per_second(),
            self.batch_seconds.len(),
            self.batch,
            self.forward_passes,
            self.macs,
            self.baseline_macs,
            self.macs as f64 / self.baseline_macs as f64
        )
    }
}

pub fn bench(config: &ModelConfig, bench: &BenchConfig) -> Result<BenchReport> {
    if bench.batch == 0 || bench.measured == 0 {
        return Err(Error::Config("bench needs a positive batch size and measured batch count".into()));
    }
    let macs = count_flops(config, bench.input_hw)?.macs();
    let baseline_macs = count_flops(&baseline_of(config), bench.input_hw)?.macs();
    let mut model = Model::<f32>::build(*config, bench.seed)?;
    let x = Tensor4::alloc_dims(
        [bench.batch, config.in_channels, bench.input_hw.0, bench.input_hw.1],
        Fill::Uniform {
            lo: 0.0,
            hi: 1.0,
            seed: bench.seed,
        },
    )?;
    let mut passes = 0;
    for _ in 0..bench.warmup {
        model.predict(&x, Mode::Eval)?;
        passes += 1;
    }
    let mut batch_seconds = Vec::with_capacity(bench.measured);
    for _ in 0..bench.measured {
        let t = Instant::now();
        std::hint::black_box(model.predict(&x, Mode::Eval)?);
        batch_seconds.push(t.elapsed().as_secs_f64());
        passes += 1;
    }
    Ok(BenchReport {
        model: config.name(),
        batch: bench.batch,
        forward_passes: passes,
        batch_seconds,
        macs,
        baseline_macs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_counts_passes() {
        let mut c = ModelConfig::parse_name("SplitMixer-II-8/2").unwrap();
        c.k = 3;
        let r = bench(
            &c,
            &BenchConfig {
                batch: 2,
                warmup: 3,
                measured: 5,
                input_hw: (8, 8),
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(r.forward_passes, 8);
        assert_eq!(r.batch_seconds.len(), 5);
        assert!(r.mean_images_per_second() > 0.0);
        assert!(r.macs < r.baseline_macs);
    }
}
