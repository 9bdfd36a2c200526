//! Global-grouped coordinate attention over the search-region feature map.
//!
//! Channels are split into `G` groups. Each group is pooled along width
//! (giving a per-row descriptor) and along height (a per-column descriptor)
//! with average and max pooling. One bottleneck transform, shared by every
//! group and every pooled branch, maps each descriptor back to `C/G`
//! channels. Summed branches pass through a sigmoid and the two directional
//! gates rescale the input.

use crate::config::{GgcaConfig, GgcaPooling};
use crate::error::{shape_err, Result};
use crate::rng::SeededRng;
use crate::tensor::{axis_pool, broadcast_mul, matmul, PoolMode, Tensor};

pub const BN_EPS: f32 = 1e-5;

/// Shared bottleneck: `U2 · ReLU(BN(U1 · p + b1)) + b2`, BN in inference form.
#[derive(Clone, Debug, PartialEq)]
pub struct GgcaWeights {
    /// `c_mid × c_g`
    pub reduce_weight: Tensor,
    pub reduce_bias: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_mean: Tensor,
    pub bn_var: Tensor,
    /// `c_g × c_mid`
    pub expand_weight: Tensor,
    pub expand_bias: Tensor,
}

impl GgcaWeights {
    pub fn init(channels: usize, cfg: &GgcaConfig, rng: &mut SeededRng, range: f32) -> Result<Self> {
        let cg = cfg.group_channels(channels)?;
        let mid = cfg.mid_channels(channels)?;
        let mut uniform = |dims: &[usize]| Tensor::from_fn(dims, |_| rng.uniform_f32(-range, range));
        let reduce_weight = uniform(&[mid, cg]);
        let expand_weight = uniform(&[cg, mid]);
        Ok(GgcaWeights {
            reduce_weight,
            reduce_bias: Tensor::zeros(&[mid]),
            bn_gamma: Tensor::ones(&[mid]),
            bn_beta: Tensor::zeros(&[mid]),
            bn_mean: Tensor::zeros(&[mid]),
            bn_var: Tensor::ones(&[mid]),
            expand_weight,
            expand_bias: Tensor::zeros(&[cg]),
        })
    }

    /// All projections and biases zero, BN the identity.
    pub fn zeroed(channels: usize, cfg: &GgcaConfig) -> Result<Self> {
        let cg = cfg.group_channels(channels)?;
        let mid = cfg.mid_channels(channels)?;
        Ok(GgcaWeights {
            reduce_weight: Tensor::zeros(&[mid, cg]),
            reduce_bias: Tensor::zeros(&[mid]),
            bn_gamma: Tensor::ones(&[mid]),
            bn_beta: Tensor::zeros(&[mid]),
            bn_mean: Tensor::zeros(&[mid]),
            bn_var: Tensor::ones(&[mid]),
            expand_weight: Tensor::zeros(&[cg, mid]),
            expand_bias: Tensor::zeros(&[cg]),
        })
    }

    pub fn group_channels(&self) -> usize {
        self.reduce_weight.dims()[1]
    }

    pub fn mid_channels(&self) -> usize {
        self.reduce_weight.dims()[0]
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("reduce.weight", &self.reduce_weight),
            ("reduce.bias", &self.reduce_bias),
            ("bn.gamma", &self.bn_gamma),
            ("bn.beta", &self.bn_beta),
            ("bn.running_mean", &self.bn_mean),
            ("bn.running_var", &self.bn_var),
            ("expand.weight", &self.expand_weight),
            ("expand.bias", &self.expand_bias),
        ]
    }

    pub(crate) fn expected_dims(channels: usize, cfg: &GgcaConfig) -> Result<[Vec<usize>; 8]> {
        let cg = cfg.group_channels(channels)?;
        let mid = cfg.mid_channels(channels)?;
        Ok([
            vec![mid, cg],
            vec![mid],
            vec![mid],
            vec![mid],
            vec![mid],
            vec![mid],
            vec![cg, mid],
            vec![cg],
        ])
    }

    pub(crate) fn from_parts(parts: Vec<Tensor>) -> Result<Self> {
        let [reduce_weight, reduce_bias, bn_gamma, bn_beta, bn_mean, bn_var, expand_weight, expand_bias]: [Tensor; 8] =
            parts.try_into().expect("eight GGCA tensors");
        if bn_var.data().iter().any(|&v| v < 0.0) {
            return shape_err("GGCA batch-norm running variance must be non-negative");
        }
        Ok(GgcaWeights {
            reduce_weight,
            reduce_bias,
            bn_gamma,
            bn_beta,
            bn_mean,
            bn_var,
            expand_weight,
            expand_bias,
        })
    }

    fn check(&self, group_channels: usize) -> Result<()> {
        let cg = self.group_channels();
        let mid = self.mid_channels();
        if cg != group_channels
            || self.expand_weight.dims() != [cg, mid]
            || self.reduce_bias.len() != mid
            || self.expand_bias.len() != cg
            || [&self.bn_gamma, &self.bn_beta, &self.bn_mean, &self.bn_var]
                .iter()
                .any(|t| t.len() != mid)
        {
            return shape_err(format!(
                "GGCA weights for {cg} group channels used with {group_channels}"
            ));
        }
        Ok(())
    }
}

/// `N_s × D` search tokens to a `D × H × W` map; token `i·W + j` lands at `(i, j)`.
pub fn tokens_to_map(tokens: &Tensor) -> Result<Tensor> {
    if tokens.rank() != 2 {
        return shape_err(format!("expected N×D tokens, got {:?}", tokens.dims()));
    }
    let (n, d) = (tokens.rows(), tokens.cols());
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return shape_err(format!("{n} tokens do not form a square map"));
    }
    tokens.transpose2d()?.reshape(&[d, side, side])
}

/// Inverse of [`tokens_to_map`].
pub fn map_to_tokens(map: &Tensor) -> Result<Tensor> {
    if map.rank() != 3 {
        return shape_err(format!("expected C×H×W map, got {:?}", map.dims()));
    }
    let d = map.dims()[0];
    let hw = map.dims()[1] * map.dims()[2];
    map.clone().reshape(&[d, hw])?.transpose2d()
}

/// Directional descriptors, each `G × c_g × len`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualPool {
    pub h_avg: Tensor,
    pub h_max: Tensor,
    pub w_avg: Tensor,
    pub w_max: Tensor,
}

pub fn grouped_dual_pool(map: &Tensor, groups: usize) -> Result<DualPool> {
    if map.rank() != 3 {
        return shape_err(format!("expected C×H×W map, got {:?}", map.dims()));
    }
    let (c, h, w) = (map.dims()[0], map.dims()[1], map.dims()[2]);
    let cg = GgcaConfig {
        groups,
        ..GgcaConfig::default()
    }
    .group_channels(c)?;
    let grouped = map.clone().reshape(&[groups, cg, h, w])?;
    let along_w = |mode| -> Result<Tensor> { axis_pool(&grouped, 3, mode)?.reshape(&[groups, cg, h]) };
    let along_h = |mode| -> Result<Tensor> { axis_pool(&grouped, 2, mode)?.reshape(&[groups, cg, w]) };
    Ok(DualPool {
        h_avg: along_w(PoolMode::Avg)?,
        h_max: along_w(PoolMode::Max)?,
        w_avg: along_h(PoolMode::Avg)?,
        w_max: along_h(PoolMode::Max)?,
    })
}

/// Applies the shared bottleneck to every channel vector `P[g, :, t]`.
pub fn shared_transform(pooled: &Tensor, w: &GgcaWeights) -> Result<Tensor> {
    if pooled.rank() != 3 {
        return shape_err(format!("expected G×c_g×len, got {:?}", pooled.dims()));
    }
    let (groups, cg, len) = (pooled.dims()[0], pooled.dims()[1], pooled.dims()[2]);
    w.check(cg)?;
    let mid = w.mid_channels();
    let bn_scale: Vec<f32> = w
        .bn_gamma
        .data()
        .iter()
        .zip(w.bn_var.data())
        .map(|(g, v)| g / (v + BN_EPS).sqrt())
        .collect();
    let mut out = Vec::with_capacity(pooled.len());
    for g in 0..groups {
        let block = Tensor::new(&[cg, len], pooled.data()[g * cg * len..(g + 1) * cg * len].to_vec())?;
        let mut hidden = matmul(&w.reduce_weight, &block)?;
        for (m, row) in hidden.data_mut().chunks_exact_mut(len).enumerate() {
            let (b, mean, beta) = (w.reduce_bias.data()[m], w.bn_mean.data()[m], w.bn_beta.data()[m]);
            for v in row {
                *v = ((*v + b - mean) * bn_scale[m] + beta).max(0.0);
            }
        }
        debug_assert_eq!(hidden.dims(), [mid, len]);
        let mut y = matmul(&w.expand_weight, &hidden)?;
        for (c, row) in y.data_mut().chunks_exact_mut(len).enumerate() {
            let b = w.expand_bias.data()[c];
            row.iter_mut().for_each(|v| *v += b);
        }
        out.extend_from_slice(y.data());
    }
    Tensor::new(pooled.dims(), out)
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// `σ(Y_avg + Y_max)` elementwise.
pub fn attention_weights(y_avg: &Tensor, y_max: &Tensor) -> Result<Tensor> {
    y_avg.zip_map(y_max, |a, b| sigmoid(a + b))
}

fn directional_gate(
    avg: &Tensor,
    max: &Tensor,
    pooling: GgcaPooling,
    w: &GgcaWeights,
) -> Result<Tensor> {
    match pooling {
        GgcaPooling::AvgMax => attention_weights(&shared_transform(avg, w)?, &shared_transform(max, w)?),
        // the absent branch contributes zero to the sum
        GgcaPooling::Avg => Ok(shared_transform(avg, w)?.map(sigmoid)),
        GgcaPooling::Max => Ok(shared_transform(max, w)?.map(sigmoid)),
    }
}

/// Recalibrated map `F'[c,i,j] = F[c,i,j] · A_h[c,i] · A_w[c,j]`, same shape as `F`.
pub fn ggca_forward(map: &Tensor, cfg: &GgcaConfig, w: &GgcaWeights) -> Result<Tensor> {
    let pooled = grouped_dual_pool(map, cfg.groups)?;
    let (c, h, wd) = (map.dims()[0], map.dims()[1], map.dims()[2]);
    let gate_h = directional_gate(&pooled.h_avg, &pooled.h_max, cfg.pooling, w)?.reshape(&[c, h, 1])?;
    let gate_w = directional_gate(&pooled.w_avg, &pooled.w_max, cfg.pooling, w)?.reshape(&[c, 1, wd])?;
    broadcast_mul(&broadcast_mul(map, &gate_h)?, &gate_w)
}

/// Shared-transform parameter count, including BN running statistics.
pub fn ggca_param_count(channels: usize, cfg: &GgcaConfig) -> Result<usize> {
    let cg = cfg.group_channels(channels)?;
    let mid = cfg.mid_channels(channels)?;
    Ok(2 * cg * mid + cg + mid + 4 * mid)
}
