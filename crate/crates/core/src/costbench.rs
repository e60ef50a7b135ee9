//! Wall-clock comparison of four-direction slice propagation against
//! mean-field message passing, with message counts reported alongside.

use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meanfield::{self, MeanFieldConfig, MeanFieldError};
use crate::scnn::{self, Direction, ScnnError, ScnnStack, Scheme};
use crate::tensor::{Tensor3, TensorError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark spec: {0}")]
    Config(String),
    #[error(transparent)]
    Scnn(#[from] ScnnError),
    #[error(transparent)]
    MeanField(#[from] MeanFieldError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchMethod {
    #[serde(rename = "scnn")]
    ScnnDulr,
    #[serde(rename = "meanfield")]
    MeanField,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threading {
    #[default]
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSpec {
    pub method: BenchMethod,
    pub shape: [usize; 3],
    /// SCNN kernel width.
    pub w: usize,
    pub n_iter: usize,
    /// Mean-field message kernel side.
    pub kernel_size: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub threading: Threading,
    pub seed: u64,
}

impl BenchSpec {
    pub fn new(method: BenchMethod, shape: [usize; 3]) -> Self {
        Self {
            method,
            shape,
            w: 9,
            n_iter: meanfield::DEFAULT_ITERATIONS,
            kernel_size: meanfield::DEFAULT_KERNEL_SIZE,
            repetitions: 5,
            warmup: 1,
            threading: Threading::Single,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.repetitions < 3 {
            return Err(BenchError::Config(format!(
                "need at least 3 repetitions, got {}",
                self.repetitions
            )));
        }
        if self.shape.contains(&0) {
            return Err(BenchError::Config(format!("empty shape {:?}", self.shape)));
        }
        match self.method {
            BenchMethod::ScnnDulr if self.w.is_multiple_of(2) => {
                Err(BenchError::Config(format!("kernel width must be odd, got {}", self.w)))
            }
            BenchMethod::MeanField if self.n_iter == 0 || self.kernel_size.is_multiple_of(2) => Err(BenchError::Config(
                format!("need n_iter ≥ 1 and odd kernel size, got {} / {}", self.n_iter, self.kernel_size),
            )),
            _ => Ok(()),
        }
    }

    /// Theoretical message count for this configuration.
    pub fn messages(&self) -> u64 {
        let [_, h, w] = self.shape;
        match self.method {
            BenchMethod::ScnnDulr => meanfield::count_messages_scnn(h as u64, w as u64, self.w as u64, 4),
            BenchMethod::MeanField => meanfield::count_messages_dense(h as u64, w as u64, self.n_iter as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub method: BenchMethod,
    pub shape: [usize; 3],
    pub w: usize,
    pub n_iter: usize,
    pub median_ms: f64,
    pub messages: u64,
    pub kernel_size: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub threading: Threading,
    pub seed: u64,
    pub samples_ms: Vec<f64>,
}

/// Median of the samples; the mean of the two middle values for even counts.
pub fn median(samples: &[f64]) -> f64 {
    assert!(!samples.is_empty(), "median of no samples");
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn run_bench(spec: &BenchSpec) -> Result<BenchResult, BenchError> {
    spec.validate()?;
    let [c, h, w] = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let input = Tensor3::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))?;
    let threaded = spec.threading == Threading::Multi;

    let mut job: Box<dyn FnMut() -> Result<Tensor3, BenchError>> = match spec.method {
        BenchMethod::ScnnDulr => {
            let order = [Direction::Down, Direction::Up, Direction::Right, Direction::Left];
            let stack = ScnnStack::random_init(c, spec.w, &order, Scheme::Sequential, &mut rng)?;
            Box::new(move || {
                let mut cur = input.clone();
                for (cfg, k) in stack.layers() {
                    cur = if threaded {
                        scnn::scnn_forward_threaded(&cur, k, *cfg)?
                    } else {
                        scnn::scnn_forward(&cur, k, *cfg)?
                    };
                }
                Ok(cur)
            })
        }
        BenchMethod::MeanField => {
            let cfg = MeanFieldConfig::new(c, spec.n_iter, spec.kernel_size)?;
            Box::new(move || {
                Ok(if threaded {
                    meanfield::mf_iterate_threaded(&input, &cfg)?
                } else {
                    meanfield::mf_iterate(&input, &cfg)?
                })
            })
        }
    };

    for _ in 0..spec.warmup {
        std::hint::black_box(job()?);
    }
    let mut samples_ms = Vec::with_capacity(spec.repetitions);
    for _ in 0..spec.repetitions {
        let start = Instant::now();
        let out = job()?;
        let elapsed = start.elapsed();
        std::hint::black_box(out);
        samples_ms.push(elapsed.as_nanos() as f64 / 1e6);
    }
    Ok(BenchResult {
        method: spec.method,
        shape: spec.shape,
        w: spec.w,
        n_iter: spec.n_iter,
        median_ms: median(&samples_ms),
        messages: spec.messages(),
        kernel_size: spec.kernel_size,
        repetitions: spec.repetitions,
        warmup: spec.warmup,
        threading: spec.threading,
        seed: spec.seed,
        samples_ms,
    })
}
