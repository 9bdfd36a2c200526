//! Wall-clock timing of full and skip forwards.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{embed_template, flop_estimate, ForwardMode};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::head::SearchBox;
use crate::model::ModelWeights;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::tracker::{run_pipeline, PipelineOutput};

/// A template/search image pair in network units.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardInput {
    pub template: Tensor,
    pub search: Tensor,
}

impl ForwardInput {
    /// Uniform `[-1, 1)` images.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let (t, s) = (cfg.template_side, cfg.search_side);
        ForwardInput {
            template: Tensor::from_fn(&[3, t, t], |_| rng.uniform_f32(-1.0, 1.0)),
            search: Tensor::from_fn(&[3, s, s], |_| rng.uniform_f32(-1.0, 1.0)),
        }
    }
}

/// Embedding, backbone, GGCA, head and decode for one input pair.
pub fn forward(input: &ForwardInput, model: &ModelWeights, cfg: &ModelConfig, mode: ForwardMode) -> Result<PipelineOutput> {
    let xz = embed_template(&input.template, cfg, &model.backbone)?;
    run_pipeline(&xz, &input.search, model, cfg, mode, None)
}

/// What one forward pass decided and predicted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardReport {
    pub mode: ForwardMode,
    pub blocks_executed: usize,
    pub chosen_k: Option<usize>,
    pub probabilities: Option<Vec<f32>>,
    pub score_max: f32,
    /// Decoded box in search-region pixels.
    pub search_box: SearchBox,
}

impl ForwardReport {
    pub fn new(mode: ForwardMode, out: &PipelineOutput) -> Self {
        ForwardReport {
            mode,
            blocks_executed: out.trace.blocks_executed(),
            chosen_k: out.chosen_k,
            probabilities: out.selection.as_ref().map(|s| s.probabilities.clone()),
            score_max: out.score_max(),
            search_box: out.search_box,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub mode: ForwardMode,
    pub iterations: usize,
    pub warmup: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
    pub flops: u64,
    /// Forwards per second, `1e6 / mean_us`.
    pub throughput: f64,
    pub config_fingerprint: String,
}

impl BenchReport {
    /// Summarises per-forward durations in microseconds.
    pub fn from_samples(
        mode: ForwardMode,
        warmup: usize,
        samples_us: &[f64],
        cfg: &ModelConfig,
    ) -> Result<Self> {
        if samples_us.is_empty() {
            return Err(Error::Argument("benchmark needs at least one sample".into()));
        }
        let mut sorted = samples_us.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mean_us = sorted.iter().sum::<f64>() / n as f64;
        let median_us = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Ok(BenchReport {
            mode,
            iterations: n,
            warmup,
            mean_us,
            median_us,
            p95_us: percentile_nearest_rank(&sorted, 95.0),
            flops: flop_estimate(cfg, mode),
            throughput: 1e6 / mean_us,
            config_fingerprint: cfg.fingerprint(),
        })
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times `iters` forwards after `warmup` untimed ones, on a fixed random input.
pub fn bench_forward(
    cfg: &ModelConfig,
    model: &ModelWeights,
    mode: ForwardMode,
    iters: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchReport> {
    if iters == 0 {
        return Err(Error::Argument("iters must be at least 1".into()));
    }
    let input = ForwardInput::random(cfg, seed);
    for _ in 0..warmup {
        std::hint::black_box(forward(&input, model, cfg, mode)?);
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        std::hint::black_box(forward(&input, model, cfg, mode)?);
        samples.push(start.elapsed().as_secs_f64() * 1e6);
    }
    BenchReport::from_samples(mode, warmup, &samples, cfg)
}

/// One configuration to time in [`bench_interleaved`].
#[derive(Clone, Debug)]
pub struct BenchCase {
    pub cfg: ModelConfig,
    pub model: ModelWeights,
    pub mode: ForwardMode,
}

/// Times several cases round-robin in `rounds` chunks so slow drift in machine
/// speed spreads evenly over them. Each case gets `iters` timed forwards.
pub fn bench_interleaved(
    cases: &[BenchCase],
    iters: usize,
    warmup: usize,
    rounds: usize,
    seed: u64,
) -> Result<Vec<BenchReport>> {
    if iters == 0 || rounds == 0 {
        return Err(Error::Argument("iters and rounds must be at least 1".into()));
    }
    let inputs: Vec<_> = cases.iter().map(|c| ForwardInput::random(&c.cfg, seed)).collect();
    for (c, input) in cases.iter().zip(&inputs) {
        for _ in 0..warmup {
            std::hint::black_box(forward(input, &c.model, &c.cfg, c.mode)?);
        }
    }
    let mut samples = vec![Vec::with_capacity(iters); cases.len()];
    for round in 0..rounds {
        let chunk = iters / rounds + usize::from(round < iters % rounds);
        for ((c, input), out) in cases.iter().zip(&inputs).zip(&mut samples) {
            for _ in 0..chunk {
                let start = Instant::now();
                std::hint::black_box(forward(input, &c.model, &c.cfg, c.mode)?);
                out.push(start.elapsed().as_secs_f64() * 1e6);
            }
        }
    }
    cases
        .iter()
        .zip(&samples)
        .map(|(c, s)| BenchReport::from_samples(c.mode, warmup, s, &c.cfg))
        .collect()
}
