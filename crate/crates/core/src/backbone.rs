//! Joint template/search patch embedding and the pre-norm transformer stack.
//!
//! Layer numbering is 1-based to match depth counts: `X^0` is the embedding
//! output and block `i` maps `X^{i-1}` to `X^i`. In skip mode blocks
//! `1..=l*` run in sequence and a single block `l*+k` is applied directly to
//! `X^{l*}`.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{gemm, layer_norm, matmul, softmax_in_place, MatRef, Tensor};

pub const INIT_RANGE: f32 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    /// `D × 3D`, output columns laid out as `[q | k | v]`.
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

fn uniform(dims: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.uniform_f32(-INIT_RANGE, INIT_RANGE))
}

impl BlockWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        BlockWeights {
            norm1_gamma: Tensor::ones(&[d]),
            norm1_beta: Tensor::zeros(&[d]),
            qkv_weight: uniform(&[d, 3 * d], rng),
            qkv_bias: Tensor::zeros(&[3 * d]),
            proj_weight: uniform(&[d, d], rng),
            proj_bias: Tensor::zeros(&[d]),
            norm2_gamma: Tensor::ones(&[d]),
            norm2_beta: Tensor::zeros(&[d]),
            fc1_weight: uniform(&[d, hidden], rng),
            fc1_bias: Tensor::zeros(&[hidden]),
            fc2_weight: uniform(&[hidden, d], rng),
            fc2_bias: Tensor::zeros(&[d]),
        }
    }

    /// Both residual branches disabled: the block is the identity map.
    pub fn identity(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        BlockWeights {
            norm1_gamma: Tensor::zeros(&[d]),
            norm1_beta: Tensor::zeros(&[d]),
            qkv_weight: Tensor::zeros(&[d, 3 * d]),
            qkv_bias: Tensor::zeros(&[3 * d]),
            proj_weight: Tensor::zeros(&[d, d]),
            proj_bias: Tensor::zeros(&[d]),
            norm2_gamma: Tensor::zeros(&[d]),
            norm2_beta: Tensor::zeros(&[d]),
            fc1_weight: Tensor::zeros(&[d, hidden]),
            fc1_bias: Tensor::zeros(&[hidden]),
            fc2_weight: Tensor::zeros(&[hidden, d]),
            fc2_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("norm1.gamma", &self.norm1_gamma),
            ("norm1.beta", &self.norm1_beta),
            ("attn.qkv.weight", &self.qkv_weight),
            ("attn.qkv.bias", &self.qkv_bias),
            ("attn.proj.weight", &self.proj_weight),
            ("attn.proj.bias", &self.proj_bias),
            ("norm2.gamma", &self.norm2_gamma),
            ("norm2.beta", &self.norm2_beta),
            ("mlp.fc1.weight", &self.fc1_weight),
            ("mlp.fc1.bias", &self.fc1_bias),
            ("mlp.fc2.weight", &self.fc2_weight),
            ("mlp.fc2.bias", &self.fc2_bias),
        ]
    }

    pub(crate) fn expected_dims(cfg: &ModelConfig) -> [Vec<usize>; 12] {
        let d = cfg.embed_dim;
        let h = cfg.mlp_hidden();
        [
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, h],
            vec![h],
            vec![h, d],
            vec![d],
        ]
    }

    pub(crate) fn from_parts(mut parts: Vec<Tensor>) -> Self {
        assert_eq!(parts.len(), 12);
        let mut next = || parts.remove(0);
        BlockWeights {
            norm1_gamma: next(),
            norm1_beta: next(),
            qkv_weight: next(),
            qkv_bias: next(),
            proj_weight: next(),
            proj_bias: next(),
            norm2_gamma: next(),
            norm2_beta: next(),
            fc1_weight: next(),
            fc1_bias: next(),
            fc2_weight: next(),
            fc2_bias: next(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    /// `3·p² × D`; patch features are flattened channel, row, column.
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub pos_template: Tensor,
    pub pos_search: Tensor,
    pub blocks: Vec<BlockWeights>,
}

impl BackboneWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let d = cfg.embed_dim;
        let patch_weight = uniform(&[cfg.patch_features(), d], rng);
        let pos_template = uniform(&[cfg.template_tokens(), d], rng);
        let pos_search = uniform(&[cfg.search_tokens(), d], rng);
        let blocks = (0..cfg.depth).map(|_| BlockWeights::init(cfg, rng)).collect();
        BackboneWeights {
            patch_weight,
            patch_bias: Tensor::zeros(&[d]),
            pos_template,
            pos_search,
            blocks,
        }
    }

    /// Block for 1-based layer `layer`.
    pub fn block(&self, layer: usize) -> &BlockWeights {
        &self.blocks[layer - 1]
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.embed_dim;
        let expect = |name: &str, t: &Tensor, dims: &[usize]| -> Result<()> {
            if t.dims() != dims {
                return shape_err(format!("{name}: expected {dims:?}, got {:?}", t.dims()));
            }
            Ok(())
        };
        expect("patch weight", &self.patch_weight, &[cfg.patch_features(), d])?;
        expect("patch bias", &self.patch_bias, &[d])?;
        expect("template positions", &self.pos_template, &[cfg.template_tokens(), d])?;
        expect("search positions", &self.pos_search, &[cfg.search_tokens(), d])?;
        if self.blocks.len() != cfg.depth {
            return shape_err(format!(
                "{} blocks for depth {}",
                self.blocks.len(),
                cfg.depth
            ));
        }
        let dims = BlockWeights::expected_dims(cfg);
        for b in &self.blocks {
            for ((name, t), want) in b.named().iter().zip(&dims) {
                expect(name, t, want)?;
            }
        }
        Ok(())
    }
}

/// Token matrix emitted by one layer of the stack.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures {
    pub layer_index: usize,
    pub tokens: Tensor,
}

impl LayerFeatures {
    /// First template token, the input to the layer selector.
    pub fn first_token(&self) -> &[f32] {
        self.tokens.row(0)
    }
}

/// Records which blocks ran, in order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExecTrace {
    pub blocks: Vec<usize>,
}

impl ExecTrace {
    pub fn blocks_executed(&self) -> usize {
        self.blocks.len()
    }
}

/// Splits a `3×H×W` image into non-overlapping `p×p` patches, one row per patch.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let dims = image.dims();
    if dims.len() != 3 || dims[0] != 3 {
        return shape_err(format!("expected a 3×H×W image, got {dims:?}"));
    }
    let (h, w) = (dims[1], dims[2]);
    if h % patch != 0 || w % patch != 0 {
        return shape_err(format!("image {h}×{w} not divisible by patch {patch}"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let feat = 3 * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * feat);
    for gi in 0..gh {
        for gj in 0..gw {
            for c in 0..3 {
                for py in 0..patch {
                    let row = (c * h + gi * patch + py) * w + gj * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(&[gh * gw, feat], out)
}

fn embed_image(
    image: &Tensor,
    side: usize,
    pos: &Tensor,
    cfg: &ModelConfig,
    w: &BackboneWeights,
) -> Result<Tensor> {
    if image.dims() != [3, side, side] {
        return shape_err(format!(
            "expected image 3×{side}×{side}, got {:?}",
            image.dims()
        ));
    }
    let patches = patchify(image, cfg.patch)?;
    let mut tokens = matmul(&patches, &w.patch_weight)?;
    tokens.add_row_vector_in_place(&w.patch_bias)?;
    tokens.add(pos)
}

pub fn embed_template(z: &Tensor, cfg: &ModelConfig, w: &BackboneWeights) -> Result<Tensor> {
    embed_image(z, cfg.template_side, &w.pos_template, cfg, w)
}

pub fn embed_search(s: &Tensor, cfg: &ModelConfig, w: &BackboneWeights) -> Result<Tensor> {
    embed_image(s, cfg.search_side, &w.pos_search, cfg, w)
}

/// `X^0 = [X_z, X_s]`, template tokens first.
pub fn patch_embed(
    z: &Tensor,
    s: &Tensor,
    cfg: &ModelConfig,
    w: &BackboneWeights,
) -> Result<LayerFeatures> {
    let xz = embed_template(z, cfg, w)?;
    let xs = embed_search(s, cfg, w)?;
    Ok(LayerFeatures {
        layer_index: 0,
        tokens: Tensor::concat_rows(&xz, &xs)?,
    })
}

pub(crate) fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut y = matmul(x, weight)?;
    y.add_row_vector_in_place(bias)?;
    Ok(y)
}

fn self_attention(h: &Tensor, w: &BlockWeights, heads: usize) -> Result<Tensor> {
    let (n, d) = (h.rows(), h.cols());
    if d % heads != 0 {
        return Err(Error::Config(format!("dim {d} not divisible by {heads} heads")));
    }
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let qkv = linear(h, &w.qkv_weight, &w.qkv_bias)?;
    let qkv_view = MatRef::of(&qkv);
    let mut scores = vec![0.0f32; n * n];
    let mut head_out = vec![0.0f32; n * hd];
    let mut merged = vec![0.0f32; n * d];
    for head in 0..heads {
        let q = qkv_view.cols_range(head * hd, hd);
        let k = qkv_view.cols_range(d + head * hd, hd);
        let v = qkv_view.cols_range(2 * d + head * hd, hd);
        gemm(q, k.t(), 0.0, &mut scores);
        for row in scores.chunks_exact_mut(n) {
            row.iter_mut().for_each(|s| *s *= scale);
            softmax_in_place(row);
        }
        gemm(MatRef::dense(&scores, n, n), v, 0.0, &mut head_out);
        for (dst, src) in merged.chunks_exact_mut(d).zip(head_out.chunks_exact(hd)) {
            dst[head * hd..(head + 1) * hd].copy_from_slice(src);
        }
    }
    let merged = Tensor::new(&[n, d], merged)?;
    linear(&merged, &w.proj_weight, &w.proj_bias)
}

/// Pre-norm block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))` with GELU.
pub fn transformer_block(x: &Tensor, w: &BlockWeights, heads: usize, eps: f32) -> Result<Tensor> {
    if x.rank() != 2 {
        return shape_err(format!("block input must be N×D, got {:?}", x.dims()));
    }
    let h = layer_norm(x, &w.norm1_gamma, &w.norm1_beta, eps)?;
    let x1 = x.add(&self_attention(&h, w, heads)?)?;
    let h2 = layer_norm(&x1, &w.norm2_gamma, &w.norm2_beta, eps)?;
    let mut mid = linear(&h2, &w.fc1_weight, &w.fc1_bias)?;
    mid.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let out = linear(&mid, &w.fc2_weight, &w.fc2_bias)?;
    x1.add(&out)
}

/// Applies block `layer` (1-based) to `x`, whatever layer `x` came from.
pub fn apply_block(
    x: &LayerFeatures,
    layer: usize,
    cfg: &ModelConfig,
    w: &BackboneWeights,
    trace: &mut ExecTrace,
) -> Result<LayerFeatures> {
    if layer == 0 || layer > w.blocks.len() {
        return Err(Error::Argument(format!(
            "block {layer} out of range 1..={}",
            w.blocks.len()
        )));
    }
    let tokens = transformer_block(&x.tokens, w.block(layer), cfg.heads, cfg.layer_norm_eps)?;
    trace.blocks.push(layer);
    Ok(LayerFeatures {
        layer_index: layer,
        tokens,
    })
}

fn expect_embedding(x0: &LayerFeatures) -> Result<()> {
    if x0.layer_index != 0 {
        return Err(Error::Argument(format!(
            "expected embedding output (layer 0), got layer {}",
            x0.layer_index
        )));
    }
    Ok(())
}

/// Sequential pass through all `L` blocks, returning `[X^1, …, X^L]`.
pub fn forward_all(
    x0: &LayerFeatures,
    cfg: &ModelConfig,
    w: &BackboneWeights,
) -> Result<Vec<LayerFeatures>> {
    expect_embedding(x0)?;
    let mut trace = ExecTrace::default();
    let mut out: Vec<LayerFeatures> = Vec::with_capacity(cfg.depth);
    for layer in 1..=cfg.depth {
        let prev = out.last().unwrap_or(x0);
        let next = apply_block(prev, layer, cfg, w, &mut trace)?;
        out.push(next);
    }
    Ok(out)
}

/// Runs blocks `1..=l*` and returns the saturated features `X^{l*}`.
pub fn forward_prefix(
    x0: &LayerFeatures,
    cfg: &ModelConfig,
    w: &BackboneWeights,
    trace: &mut ExecTrace,
) -> Result<LayerFeatures> {
    expect_embedding(x0)?;
    let mut x = x0.clone();
    for layer in 1..=cfg.saturated_layer {
        x = apply_block(&x, layer, cfg, w, trace)?;
    }
    Ok(x)
}

/// `X^{l*+k} = T^{l*+k}(T^{l*}(… T^1(X^0)))`; exactly `l*+1` blocks run.
pub fn forward_skip_traced(
    x0: &LayerFeatures,
    cfg: &ModelConfig,
    w: &BackboneWeights,
    k: usize,
    trace: &mut ExecTrace,
) -> Result<LayerFeatures> {
    check_choice(cfg, k)?;
    let saturated = forward_prefix(x0, cfg, w, trace)?;
    apply_block(&saturated, cfg.saturated_layer + k, cfg, w, trace)
}

pub fn forward_skip(
    x0: &LayerFeatures,
    cfg: &ModelConfig,
    w: &BackboneWeights,
    k: usize,
) -> Result<LayerFeatures> {
    forward_skip_traced(x0, cfg, w, k, &mut ExecTrace::default())
}

pub(crate) fn check_choice(cfg: &ModelConfig, k: usize) -> Result<()> {
    if k == 0 || k > cfg.choices() {
        return Err(Error::Argument(format!(
            "layer choice k={k} outside 1..={}",
            cfg.choices()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    Full,
    Skip,
}

impl std::fmt::Display for ForwardMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ForwardMode::Full => "full",
            ForwardMode::Skip => "skip",
        })
    }
}

impl std::str::FromStr for ForwardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ForwardMode::Full),
            "skip" => Ok(ForwardMode::Skip),
            other => Err(Error::Argument(format!("unknown forward mode `{other}`"))),
        }
    }
}

pub fn param_count(cfg: &ModelConfig) -> u64 {
    let d = cfg.embed_dim as u64;
    let h = cfg.mlp_hidden() as u64;
    let embed = cfg.patch_features() as u64 * d + d + cfg.tokens() as u64 * d;
    let block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d);
    embed + cfg.depth as u64 * block
}

/// FLOPs of one block, counting a multiply-accumulate as two.
pub fn block_flops(cfg: &ModelConfig) -> u64 {
    let n = cfg.tokens() as u64;
    let d = cfg.embed_dim as u64;
    let r = cfg.mlp_ratio as u64;
    8 * n * d * d + 4 * n * n * d + 4 * r * n * d * d
}

pub fn embed_flops(cfg: &ModelConfig) -> u64 {
    2 * cfg.tokens() as u64 * cfg.patch_features() as u64 * cfg.embed_dim as u64
}

pub fn selector_flops(cfg: &ModelConfig) -> u64 {
    let d = cfg.embed_dim as u64;
    let h = cfg.selector_hidden as u64;
    let k = cfg.choices() as u64;
    2 * (d * h + h * h + h * k)
}

pub fn blocks_run(cfg: &ModelConfig, mode: ForwardMode) -> usize {
    match mode {
        ForwardMode::Full => cfg.depth,
        ForwardMode::Skip => cfg.saturated_layer + 1,
    }
}

/// Analytic backbone FLOPs: embedding plus executed blocks (plus the selector in skip mode).
pub fn flop_estimate(cfg: &ModelConfig, mode: ForwardMode) -> u64 {
    let blocks = blocks_run(cfg, mode) as u64 * block_flops(cfg);
    let selector = match mode {
        ForwardMode::Full => 0,
        ForwardMode::Skip => selector_flops(cfg),
    };
    embed_flops(cfg) + blocks + selector
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ModelConfig, BackboneWeights) {
        let cfg = ModelConfig::tiny();
        let w = BackboneWeights::init(&cfg, &mut SeededRng::new(1));
        (cfg, w)
    }

    fn random_image(side: usize, rng: &mut SeededRng) -> Tensor {
        Tensor::from_fn(&[3, side, side], |_| rng.uniform_f32(-1.0, 1.0))
    }

    fn random_x0(cfg: &ModelConfig, w: &BackboneWeights, seed: u64) -> LayerFeatures {
        let mut rng = SeededRng::new(seed);
        let z = random_image(cfg.template_side, &mut rng);
        let s = random_image(cfg.search_side, &mut rng);
        patch_embed(&z, &s, cfg, w).unwrap()
    }

    #[test]
    fn default_token_layout() {
        let cfg = ModelConfig {
            depth: 2,
            saturated_layer: 1,
            embed_dim: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        let w = BackboneWeights::init(&cfg, &mut SeededRng::new(0));
        let z = Tensor::zeros(&[3, 128, 128]);
        let s = Tensor::zeros(&[3, 256, 256]);
        let x0 = patch_embed(&z, &s, &cfg, &w).unwrap();
        assert_eq!(x0.tokens.dims(), &[320, 8]);
        assert_eq!(x0.layer_index, 0);
    }

    #[test]
    fn zero_inputs_embed_to_zero() {
        let (cfg, mut w) = tiny();
        w.pos_template = Tensor::zeros(w.pos_template.dims());
        w.pos_search = Tensor::zeros(w.pos_search.dims());
        let z = Tensor::zeros(&[3, 8, 8]);
        let s = Tensor::zeros(&[3, 16, 16]);
        let x0 = patch_embed(&z, &s, &cfg, &w).unwrap();
        assert!(x0.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_patch_matches_dot_products() {
        let cfg = ModelConfig {
            template_side: 4,
            search_side: 4,
            ..ModelConfig::tiny()
        };
        let mut rng = SeededRng::new(9);
        let mut w = BackboneWeights::init(&cfg, &mut rng);
        w.patch_bias = Tensor::from_fn(&[8], |i| i as f32 * 0.1);
        w.pos_template = Tensor::zeros(&[1, 8]);
        w.pos_search = Tensor::zeros(&[1, 8]);
        let z = random_image(4, &mut rng);
        let s = random_image(4, &mut rng);
        let x0 = patch_embed(&z, &s, &cfg, &w).unwrap();
        for (row, img) in [(0, &z), (1, &s)] {
            for j in 0..8 {
                let mut acc = w.patch_bias.data()[j];
                // flatten order: channel, row, column
                for c in 0..3 {
                    for y in 0..4 {
                        for x in 0..4 {
                            let f = c * 16 + y * 4 + x;
                            acc += img.at(&[c, y, x]) * w.patch_weight.at(&[f, j]);
                        }
                    }
                }
                assert!((x0.tokens.at(&[row, j]) - acc).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn patch_embed_rejects_wrong_sizes() {
        let (cfg, w) = tiny();
        let z = Tensor::zeros(&[3, 12, 12]);
        let s = Tensor::zeros(&[3, 16, 16]);
        assert!(matches!(patch_embed(&z, &s, &cfg, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_blocks_pass_through() {
        let (cfg, mut w) = tiny();
        w.blocks = (0..cfg.depth).map(|_| BlockWeights::identity(&cfg)).collect();
        let x0 = random_x0(&cfg, &w, 4);
        let out = transformer_block(&x0.tokens, &w.blocks[0], cfg.heads, cfg.layer_norm_eps).unwrap();
        assert_eq!(out, x0.tokens);
        for xi in forward_all(&x0, &cfg, &w).unwrap() {
            assert_eq!(xi.tokens, x0.tokens);
        }
    }

    #[test]
    fn block_matches_unrolled_scalar_computation() {
        // N=2, D=2, one head: every intermediate written out by hand
        let cfg = ModelConfig {
            embed_dim: 2,
            heads: 1,
            mlp_ratio: 1,
            ..ModelConfig::tiny()
        };
        let mut rng = SeededRng::new(21);
        let r = |rng: &mut SeededRng, dims: &[usize]| Tensor::from_fn(dims, |_| rng.uniform_f32(-0.8, 0.8));
        let w = BlockWeights {
            norm1_gamma: r(&mut rng, &[2]),
            norm1_beta: r(&mut rng, &[2]),
            qkv_weight: r(&mut rng, &[2, 6]),
            qkv_bias: r(&mut rng, &[6]),
            proj_weight: r(&mut rng, &[2, 2]),
            proj_bias: r(&mut rng, &[2]),
            norm2_gamma: r(&mut rng, &[2]),
            norm2_beta: r(&mut rng, &[2]),
            fc1_weight: r(&mut rng, &[2, 2]),
            fc1_bias: r(&mut rng, &[2]),
            fc2_weight: r(&mut rng, &[2, 2]),
            fc2_bias: r(&mut rng, &[2]),
        };
        let x = Tensor::new(&[2, 2], vec![0.3, -1.2, 0.9, 0.4]).unwrap();
        let eps = cfg.layer_norm_eps as f64;
        let g = |t: &Tensor, i: usize| t.data()[i] as f64;
        let gm = |t: &Tensor, i: usize, j: usize| t.at(&[i, j]) as f64;
        let ln = |a: f64, b: f64, gamma: &Tensor, beta: &Tensor| {
            let m = (a + b) / 2.0;
            let v = ((a - m).powi(2) + (b - m).powi(2)) / 2.0;
            let s = (v + eps).sqrt();
            [(a - m) / s * g(gamma, 0) + g(beta, 0), (b - m) / s * g(gamma, 1) + g(beta, 1)]
        };
        let gelu64 = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
        let xs = [[g(&x, 0), g(&x, 1)], [g(&x, 2), g(&x, 3)]];
        let h = [ln(xs[0][0], xs[0][1], &w.norm1_gamma, &w.norm1_beta), ln(xs[1][0], xs[1][1], &w.norm1_gamma, &w.norm1_beta)];
        let mut qkv = [[0.0f64; 6]; 2];
        for t in 0..2 {
            for c in 0..6 {
                qkv[t][c] = h[t][0] * gm(&w.qkv_weight, 0, c) + h[t][1] * gm(&w.qkv_weight, 1, c) + g(&w.qkv_bias, c);
            }
        }
        let scale = 1.0 / 2f64.sqrt();
        let mut x1 = [[0.0f64; 2]; 2];
        for t in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|u| (qkv[t][0] * qkv[u][2] + qkv[t][1] * qkv[u][3]) * scale)
                .collect();
            let mx = s[0].max(s[1]);
            let e = [(s[0] - mx).exp(), (s[1] - mx).exp()];
            let a = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
            let att = [
                a[0] * qkv[0][4] + a[1] * qkv[1][4],
                a[0] * qkv[0][5] + a[1] * qkv[1][5],
            ];
            for c in 0..2 {
                x1[t][c] = xs[t][c] + att[0] * gm(&w.proj_weight, 0, c) + att[1] * gm(&w.proj_weight, 1, c) + g(&w.proj_bias, c);
            }
        }
        let got = transformer_block(&x, &w, 1, cfg.layer_norm_eps).unwrap();
        for t in 0..2 {
            let h2 = ln(x1[t][0], x1[t][1], &w.norm2_gamma, &w.norm2_beta);
            let m: Vec<f64> = (0..2)
                .map(|c| gelu64(h2[0] * gm(&w.fc1_weight, 0, c) + h2[1] * gm(&w.fc1_weight, 1, c) + g(&w.fc1_bias, c)))
                .collect();
            for c in 0..2 {
                let want = x1[t][c] + m[0] * gm(&w.fc2_weight, 0, c) + m[1] * gm(&w.fc2_weight, 1, c) + g(&w.fc2_bias, c);
                assert!((got.at(&[t, c]) as f64 - want).abs() < 1e-4, "token {t} ch {c}");
            }
        }
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let (cfg, w) = tiny();
        let mut rng = SeededRng::new(5);
        let x = Tensor::from_fn(&[6, 8], |_| rng.uniform_f32(-1.0, 1.0));
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut px = Vec::new();
        for &p in &perm {
            px.extend_from_slice(x.row(p));
        }
        let px = Tensor::new(&[6, 8], px).unwrap();
        let b = &w.blocks[0];
        let y = transformer_block(&x, b, cfg.heads, cfg.layer_norm_eps).unwrap();
        let py = transformer_block(&px, b, cfg.heads, cfg.layer_norm_eps).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in py.row(i).iter().zip(y.row(p)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_all_matches_manual_composition() {
        let (cfg, w) = tiny();
        let x0 = random_x0(&cfg, &w, 2);
        let all = forward_all(&x0, &cfg, &w).unwrap();
        assert_eq!(all.len(), cfg.depth);
        let mut x = x0.tokens.clone();
        for (i, xi) in all.iter().enumerate() {
            x = transformer_block(&x, &w.blocks[i], cfg.heads, cfg.layer_norm_eps).unwrap();
            assert_eq!(xi.layer_index, i + 1);
            assert_eq!(xi.tokens, x);
        }
    }

    #[test]
    fn depth_one_is_single_block() {
        let cfg = ModelConfig { depth: 1, ..ModelConfig::tiny() };
        let w = BackboneWeights::init(&cfg, &mut SeededRng::new(3));
        let x0 = random_x0(&cfg, &w, 3);
        let all = forward_all(&x0, &cfg, &w).unwrap();
        assert_eq!(all.len(), 1);
        let want = transformer_block(&x0.tokens, &w.blocks[0], cfg.heads, cfg.layer_norm_eps).unwrap();
        assert_eq!(all[0].tokens, want);
    }

    #[test]
    fn skip_without_gap_equals_full_pass() {
        let cfg = ModelConfig { saturated_layer: 5, ..ModelConfig::tiny() };
        let w = BackboneWeights::init(&cfg, &mut SeededRng::new(8));
        let x0 = random_x0(&cfg, &w, 8);
        let all = forward_all(&x0, &cfg, &w).unwrap();
        let skip = forward_skip(&x0, &cfg, &w, 1).unwrap();
        assert_eq!(skip, all[5]);
    }

    #[test]
    fn skip_applies_selected_block_to_saturated_features() {
        let cfg = ModelConfig {
            depth: 4,
            saturated_layer: 2,
            ..ModelConfig::tiny()
        };
        let w = BackboneWeights::init(&cfg, &mut SeededRng::new(10));
        let x0 = random_x0(&cfg, &w, 10);
        let all = forward_all(&x0, &cfg, &w).unwrap();
        let mut trace = ExecTrace::default();
        let skip = forward_skip_traced(&x0, &cfg, &w, 2, &mut trace).unwrap();
        let want = transformer_block(&all[1].tokens, &w.blocks[3], cfg.heads, cfg.layer_norm_eps).unwrap();
        assert_eq!(skip.layer_index, 4);
        assert!(skip.tokens.max_abs_diff(&want) <= 1e-6);
        assert_eq!(trace.blocks, vec![1, 2, 4]);
        assert!(forward_skip(&x0, &cfg, &w, 0).is_err());
        assert!(forward_skip(&x0, &cfg, &w, 3).is_err());
    }

    #[test]
    fn skip_runs_saturated_plus_one_blocks() {
        let (cfg, w) = tiny();
        let x0 = random_x0(&cfg, &w, 6);
        for k in 1..=cfg.choices() {
            let mut trace = ExecTrace::default();
            let out = forward_skip_traced(&x0, &cfg, &w, k, &mut trace).unwrap();
            assert_eq!(trace.blocks_executed(), cfg.saturated_layer + 1);
            assert_eq!(out.layer_index, cfg.saturated_layer + k);
        }
    }

    #[test]
    fn swapping_identical_halves_permutes_token_blocks() {
        let cfg = ModelConfig {
            template_side: 8,
            search_side: 8,
            ..ModelConfig::tiny()
        };
        let mut w = BackboneWeights::init(&cfg, &mut SeededRng::new(4));
        w.pos_template = Tensor::zeros(w.pos_template.dims());
        w.pos_search = Tensor::zeros(w.pos_search.dims());
        let mut rng = SeededRng::new(44);
        let a = random_image(8, &mut rng);
        let b = random_image(8, &mut rng);
        let ab = forward_all(&patch_embed(&a, &b, &cfg, &w).unwrap(), &cfg, &w).unwrap();
        let ba = forward_all(&patch_embed(&b, &a, &cfg, &w).unwrap(), &cfg, &w).unwrap();
        let nz = cfg.template_tokens();
        let last_ab = &ab.last().unwrap().tokens;
        let last_ba = &ba.last().unwrap().tokens;
        for i in 0..nz {
            for (x, y) in last_ab.row(i).iter().zip(last_ba.row(i + nz)) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn flop_counts() {
        let cfg = ModelConfig::default();
        let block_ratio = blocks_run(&cfg, ForwardMode::Skip) as f64 * block_flops(&cfg) as f64
            / (blocks_run(&cfg, ForwardMode::Full) as f64 * block_flops(&cfg) as f64);
        assert_eq!(block_ratio, 0.75);
        // N=320, D=192, ratio 4, patch 16:
        //   block = 8·320·192² + 4·320²·192 + 16·320·192² = 361_758_720
        //   embed = 2·320·768·192                         =  94_371_840
        assert_eq!(block_flops(&cfg), 361_758_720);
        assert_eq!(embed_flops(&cfg), 94_371_840);
        assert_eq!(flop_estimate(&cfg, ForwardMode::Full), 4_435_476_480);
        assert_eq!(flop_estimate(&cfg, ForwardMode::Skip), 3_350_314_240);
        assert!(flop_estimate(&cfg, ForwardMode::Full) > flop_estimate(&cfg, ForwardMode::Skip));

        let wide = ModelConfig { embed_dim: 384, heads: 6, ..cfg.clone() };
        let n = cfg.tokens() as u64;
        let d2 = |c: &ModelConfig| block_flops(c) - 4 * n * n * c.embed_dim as u64;
        assert_eq!(d2(&wide), 4 * d2(&cfg));
    }

    #[test]
    fn param_count_matches_init() {
        let (cfg, w) = tiny();
        let mut total = w.patch_weight.len() + w.patch_bias.len() + w.pos_template.len() + w.pos_search.len();
        for b in &w.blocks {
            total += b.named().iter().map(|(_, t)| t.len()).sum::<usize>();
        }
        assert_eq!(param_count(&cfg), total as u64);
    }
}
