//! Block masking of template images and the occlusion-robustness loss.
//!
//! Two samplers share one output type. Uniform mode keeps the `K` blocks with
//! the largest i.i.d. uniform scores, so the masked count never varies. Cox
//! mode draws a Poisson point pattern whose intensity is a Gaussian bump over
//! the grid, simulated by thinning a homogeneous process; a block is masked
//! when at least one accepted point lands in it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{forward_all, patch_embed, BackboneWeights};
use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Per-cell intensity used when `ρ = 1` cannot be met by any finite field.
pub const SATURATED_INTENSITY: f64 = 50.0;
const BISECTION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Uniform,
    #[default]
    Cox,
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskMode::Uniform => "uniform",
            MaskMode::Cox => "cox",
        })
    }
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(MaskMode::Uniform),
            "cox" => Ok(MaskMode::Cox),
            other => Err(Error::Argument(format!("unknown mask mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub template_height: usize,
    pub template_width: usize,
    pub block_side: usize,
    /// Expected fraction of blocks masked, `ρ`.
    pub mask_ratio: f64,
    pub mode: MaskMode,
    /// Gaussian bandwidth as a fraction of the shorter grid side.
    pub cox_bandwidth_frac: f64,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            template_height: 128,
            template_width: 128,
            block_side: 16,
            mask_ratio: 0.25,
            mode: MaskMode::Cox,
            cox_bandwidth_frac: 0.25,
            seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w, b) = (self.template_height, self.template_width, self.block_side);
        if b == 0 || h == 0 || w == 0 || h % b != 0 || w % b != 0 {
            return Err(Error::Config(format!(
                "{h}×{w} template not divisible into {b}-pixel blocks"
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if !(self.cox_bandwidth_frac > 0.0) || !self.cox_bandwidth_frac.is_finite() {
            return Err(Error::Config("cox bandwidth must be positive".into()));
        }
        Ok(())
    }

    /// Block grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.template_height / self.block_side, self.template_width / self.block_side)
    }

    pub fn grid_cells(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Config whose block grid is exactly `rows × cols`, for block side `b`.
    pub fn with_grid(rows: usize, cols: usize, b: usize) -> Self {
        MaskConfig {
            template_height: rows * b,
            template_width: cols * b,
            block_side: b,
            ..MaskConfig::default()
        }
    }

    /// Blocks kept by uniform masking, `round((1 − ρ)·cells)`.
    pub fn kept_blocks(&self) -> usize {
        ((1.0 - self.mask_ratio) * self.grid_cells() as f64).round() as usize
    }
}

/// Binary block grid; 1 marks a masked block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPattern {
    pub grid_h: usize,
    pub grid_w: usize,
    pub cells: Vec<u8>,
    pub mode: MaskMode,
    pub seed: u64,
    pub masked_count: usize,
}

impl MaskPattern {
    pub fn from_cells(grid_h: usize, grid_w: usize, cells: Vec<u8>, mode: MaskMode, seed: u64) -> Result<Self> {
        if cells.len() != grid_h * grid_w || cells.iter().any(|&c| c > 1) {
            return shape_err(format!("mask cells do not form a binary {grid_h}×{grid_w} grid"));
        }
        let masked_count = cells.iter().filter(|&&c| c == 1).count();
        Ok(MaskPattern {
            grid_h,
            grid_w,
            cells,
            mode,
            seed,
            masked_count,
        })
    }

    pub fn empty(grid_h: usize, grid_w: usize) -> Self {
        Self::from_cells(grid_h, grid_w, vec![0; grid_h * grid_w], MaskMode::Uniform, 0).unwrap()
    }

    pub fn full(grid_h: usize, grid_w: usize) -> Self {
        Self::from_cells(grid_h, grid_w, vec![1; grid_h * grid_w], MaskMode::Uniform, 0).unwrap()
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.grid_w + j] == 1
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// Binary PGM, one pixel per block scaled up by `scale`; masked blocks are white.
    pub fn to_pgm(&self, scale: usize) -> Vec<u8> {
        let scale = scale.max(1);
        let (h, w) = (self.grid_h * scale, self.grid_w * scale);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            for x in 0..w {
                out.push(if self.is_masked(y / scale, x / scale) { 255 } else { 0 });
            }
        }
        out
    }
}

pub fn uniform_mask(cfg: &MaskConfig, rng: &mut SeededRng) -> Result<MaskPattern> {
    cfg.validate()?;
    let (gh, gw) = cfg.grid();
    let cells = cfg.grid_cells();
    let scores: Vec<f64> = (0..cells).map(|_| rng.next_f64()).collect();
    let mut order: Vec<usize> = (0..cells).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut grid = vec![1u8; cells];
    for &i in &order[..cfg.kept_blocks()] {
        grid[i] = 0;
    }
    MaskPattern::from_cells(gh, gw, grid, MaskMode::Uniform, cfg.seed)
}

/// Per-cell intensity of the Cox sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityField {
    pub grid_h: usize,
    pub grid_w: usize,
    pub lambda: Vec<f64>,
    /// `Σ (1 − e^{−λ})`, the expected number of masked cells.
    pub expected_masked: f64,
    /// Set when the target was unreachable and the field was capped.
    pub saturated: bool,
}

impl IntensityField {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.lambda[i * self.grid_w + j]
    }

    pub fn max(&self) -> f64 {
        self.lambda.iter().copied().fold(0.0, f64::max)
    }
}

fn expected_occupied(lambda: impl Iterator<Item = f64>) -> f64 {
    lambda.map(|l| -(-l).exp_m1()).sum()
}

/// Gaussian bump scaled so the expected number of occupied cells is `ρ·cells`.
pub fn cox_intensity(grid_h: usize, grid_w: usize, ratio: f64, bandwidth_frac: f64) -> Result<IntensityField> {
    if grid_h == 0 || grid_w == 0 {
        return shape_err("empty mask grid");
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Argument(format!("mask ratio {ratio} outside [0, 1]")));
    }
    if !(bandwidth_frac > 0.0) {
        return Err(Error::Argument("bandwidth must be positive".into()));
    }
    let cells = grid_h * grid_w;
    let field = |lambda: Vec<f64>, saturated| IntensityField {
        grid_h,
        grid_w,
        expected_masked: expected_occupied(lambda.iter().copied()),
        lambda,
        saturated,
    };
    if ratio == 0.0 {
        return Ok(field(vec![0.0; cells], false));
    }
    if ratio == 1.0 {
        return Ok(field(vec![SATURATED_INTENSITY; cells], true));
    }
    let sigma = bandwidth_frac * grid_h.min(grid_w) as f64;
    let (ci, cj) = ((grid_h as f64 - 1.0) / 2.0, (grid_w as f64 - 1.0) / 2.0);
    let shape: Vec<f64> = (0..cells)
        .map(|idx| {
            let (i, j) = ((idx / grid_w) as f64, (idx % grid_w) as f64);
            (-((i - ci).powi(2) + (j - cj).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let target = ratio * cells as f64;
    let total = |alpha: f64| expected_occupied(shape.iter().map(|s| alpha * s));
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while total(hi) < target {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Degenerate("intensity bracket diverged".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f = total(mid);
        if (f - target).abs() < BISECTION_TOL {
            lo = mid;
            hi = mid;
            break;
        }
        if f < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let alpha = 0.5 * (lo + hi);
    Ok(field(shape.iter().map(|s| alpha * s).collect(), false))
}

pub fn cox_mask(cfg: &MaskConfig, rng: &mut SeededRng) -> Result<MaskPattern> {
    cfg.validate()?;
    let (gh, gw) = cfg.grid();
    let field = cox_intensity(gh, gw, cfg.mask_ratio, cfg.cox_bandwidth_frac)?;
    cox_mask_from_field(&field, cfg.seed, rng)
}

/// Thinning: a homogeneous process at rate `λ_max` over the grid rectangle
/// (unit-area cells), each point kept with probability `λ(cell)/λ_max`.
pub fn cox_mask_from_field(field: &IntensityField, seed: u64, rng: &mut SeededRng) -> Result<MaskPattern> {
    let (gh, gw) = (field.grid_h, field.grid_w);
    let mut grid = vec![0u8; gh * gw];
    let lambda_max = field.max();
    if lambda_max > 0.0 {
        let horizon = lambda_max * (gh * gw) as f64;
        let mut t = rng.exponential();
        while t < horizon {
            let x = rng.uniform_f64(0.0, gw as f64);
            let y = rng.uniform_f64(0.0, gh as f64);
            let cell = (y as usize).min(gh - 1) * gw + (x as usize).min(gw - 1);
            if rng.next_f64() * lambda_max < field.lambda[cell] {
                grid[cell] = 1;
            }
            t += rng.exponential();
        }
    }
    MaskPattern::from_cells(gh, gw, grid, MaskMode::Cox, seed)
}

/// Draws a pattern from a fresh stream seeded with `cfg.seed`.
pub fn generate_mask(cfg: &MaskConfig) -> Result<MaskPattern> {
    let mut rng = SeededRng::new(cfg.seed);
    match cfg.mode {
        MaskMode::Uniform => uniform_mask(cfg, &mut rng),
        MaskMode::Cox => cox_mask(cfg, &mut rng),
    }
}

/// Zeroes every pixel of each masked `b×b` block in all channels.
pub fn apply_mask(z: &Tensor, pattern: &MaskPattern, block: usize) -> Result<Tensor> {
    let dims = z.dims();
    if dims.len() != 3 || block == 0 || dims[1] != pattern.grid_h * block || dims[2] != pattern.grid_w * block {
        return shape_err(format!(
            "image {dims:?} does not match a {}×{} grid of {block}-pixel blocks",
            pattern.grid_h, pattern.grid_w
        ));
    }
    let (h, w) = (dims[1], dims[2]);
    let mut out = z.clone();
    let data = out.data_mut();
    for c in 0..dims[0] {
        for y in 0..h {
            let row = &mut data[(c * h + y) * w..(c * h + y + 1) * w];
            for (x, px) in row.iter_mut().enumerate() {
                if pattern.is_masked(y / block, x / block) {
                    *px = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Mean squared difference between two token matrices.
pub fn orr_loss(unmasked: &Tensor, masked: &Tensor) -> Result<f32> {
    if unmasked.dims() != masked.dims() {
        return shape_err(format!(
            "orr loss of {:?} and {:?}",
            unmasked.dims(),
            masked.dims()
        ));
    }
    let sum: f64 = unmasked
        .data()
        .iter()
        .zip(masked.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok((sum / unmasked.len() as f64) as f32)
}

/// Runs the clean and masked template through the full frozen backbone and
/// compares the final-layer template tokens.
pub fn orr_diagnostic(
    z: &Tensor,
    s: &Tensor,
    pattern: &MaskPattern,
    block: usize,
    cfg: &ModelConfig,
    w: &BackboneWeights,
) -> Result<f32> {
    let masked = apply_mask(z, pattern, block)?;
    let n_z = cfg.template_tokens();
    let last = |img: &Tensor| -> Result<Tensor> {
        let x0 = patch_embed(img, s, cfg, w)?;
        let layers = forward_all(&x0, cfg, w)?;
        layers.last().expect("depth >= 1").tokens.slice_rows(0, n_z)
    };
    orr_loss(&last(z)?, &last(&masked)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskStatistics {
    pub trials: usize,
    pub mean_masked: f64,
    pub std_masked: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Fraction of trials in which each cell was masked, row-major.
    pub per_cell_frequency: Vec<f64>,
}

impl MaskStatistics {
    pub fn frequency(&self, i: usize, j: usize) -> f64 {
        self.per_cell_frequency[i * self.grid_w + j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.grid_h {
            let row: Vec<String> = (0..self.grid_w).map(|j| format!("{:.6}", self.frequency(i, j))).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

/// Monte-Carlo summary; trial `i` uses seed `cfg.seed + i`.
pub fn mask_statistics(cfg: &MaskConfig, trials: usize) -> Result<MaskStatistics> {
    if trials == 0 {
        return Err(Error::Argument("at least one trial required".into()));
    }
    cfg.validate()?;
    let (gh, gw) = cfg.grid();
    let field = cox_intensity(gh, gw, cfg.mask_ratio, cfg.cox_bandwidth_frac)?;
    let mut counts = vec![0u64; gh * gw];
    let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
    for i in 0..trials {
        let seed = cfg.seed.wrapping_add(i as u64);
        let mut rng = SeededRng::new(seed);
        let pattern = match cfg.mode {
            MaskMode::Uniform => uniform_mask(&MaskConfig { seed, ..cfg.clone() }, &mut rng)?,
            MaskMode::Cox => cox_mask_from_field(&field, seed, &mut rng)?,
        };
        for (c, &m) in counts.iter_mut().zip(&pattern.cells) {
            *c += m as u64;
        }
        let n = pattern.masked_count as f64;
        sum += n;
        sum_sq += n * n;
    }
    let t = trials as f64;
    let mean = sum / t;
    Ok(MaskStatistics {
        trials,
        mean_masked: mean,
        std_masked: (sum_sq / t - mean * mean).max(0.0).sqrt(),
        grid_h: gh,
        grid_w: gw,
        per_cell_frequency: counts.iter().map(|&c| c as f64 / t).collect(),
    })
}

/// Headline numbers of a masking simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSimReport {
    pub mode: MaskMode,
    pub grid_h: usize,
    pub grid_w: usize,
    pub mask_ratio: f64,
    pub trials: usize,
    pub seed: u64,
    /// Exact count for uniform masks, `ρ·cells` for Cox masks.
    pub expected_masked: f64,
    pub mean_masked: f64,
    pub std_masked: f64,
}

impl MaskSimReport {
    pub fn new(cfg: &MaskConfig, stats: &MaskStatistics) -> Self {
        let cells = cfg.grid_cells();
        let expected_masked = match cfg.mode {
            MaskMode::Uniform => (cells - cfg.kept_blocks()) as f64,
            MaskMode::Cox => cfg.mask_ratio * cells as f64,
        };
        MaskSimReport {
            mode: cfg.mode,
            grid_h: stats.grid_h,
            grid_w: stats.grid_w,
            mask_ratio: cfg.mask_ratio,
            trials: stats.trials,
            seed: cfg.seed,
            expected_masked,
            mean_masked: stats.mean_masked,
            std_masked: stats.std_masked,
        }
    }
}
