//! Wall-clock scaling of the token-to-image transform.
//!
//! Each size N embeds N tokens into a strip one patch high and N patches
//! wide, so image capacity equals the sequence length.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::error::{Result, XmarError};
use crate::image::ImageSpec;
use crate::program::AdversarialProgram;

#[derive(Clone, Debug, PartialEq)]
pub struct TimingConfig {
    pub sizes: Vec<usize>,
    pub patch: usize,
    pub channels: usize,
    pub vocab_size: usize,
    /// Timed samples per size; the median is reported.
    pub samples: usize,
    /// Embeds per timed sample.
    pub inner: usize,
    pub seed: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self { sizes: vec![128, 256, 512], patch: 8, channels: 3, vocab_size: 16, samples: 15, inner: 40, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingPoint {
    pub n: usize,
    /// Median seconds per embed.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRatio {
    pub n: usize,
    pub doubled: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    pub points: Vec<TimingPoint>,
    /// `time(2N) / time(N)` for each N whose double was also measured.
    pub ratios: Vec<TimingRatio>,
}

impl TimingReport {
    pub fn ratio(&self, n: usize) -> Option<f64> {
        self.ratios.iter().find(|r| r.n == n).map(|r| r.ratio)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "points": self.points.iter().map(|p| json!({"n": p.n, "seconds": p.seconds})).collect::<Vec<_>>(),
            "ratios": self.ratios.iter().map(|r| json!({"n": r.n, "doubled": r.doubled, "ratio": r.ratio})).collect::<Vec<_>>(),
        })
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

pub fn bench_timing(config: &TimingConfig) -> Result<TimingReport> {
    if config.sizes.is_empty() || config.sizes.contains(&0) || config.samples == 0 || config.inner == 0 {
        return Err(XmarError::invalid("timing needs positive sizes, samples and inner repeats"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut points = Vec::with_capacity(config.sizes.len());
    for &n in &config.sizes {
        let spec = ImageSpec::new(config.patch, config.patch * n, config.channels)?;
        let program = AdversarialProgram::new(config.vocab_size, spec, config.patch, 0, config.seed)?;
        let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..config.vocab_size)).collect();
        program.embed(&tokens)?;
        let mut samples = Vec::with_capacity(config.samples);
        for _ in 0..config.samples {
            let start = Instant::now();
            for _ in 0..config.inner {
                std::hint::black_box(program.embed(std::hint::black_box(&tokens))?);
            }
            samples.push(start.elapsed().as_secs_f64() / config.inner as f64);
        }
        points.push(TimingPoint { n, seconds: median(samples) });
    }
    let ratios = points
        .iter()
        .filter_map(|p| {
            points
                .iter()
                .find(|q| q.n == 2 * p.n)
                .map(|q| TimingRatio { n: p.n, doubled: q.n, ratio: q.seconds / p.seconds })
        })
        .collect();
    Ok(TimingReport { points, ratios })
}
