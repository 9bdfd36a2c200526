//! Box prediction from the recalibrated search map.
//!
//! Three branches, each two zero-padded 3×3 convolutions with a ReLU between,
//! produce a raw score map, a sub-cell centre offset and a normalised box
//! size. The score map is reweighted by a raised-cosine window before the
//! peak is decoded into search-region pixels.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::rng::SeededRng;
use crate::select::argmax_first;
use crate::tensor::{matmul, window_2d, Tensor, WindowKind};

/// One `3×3` convolution, weight `out × in × 3 × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3 {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv3x3 {
    pub fn init(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / ((input * 9) as f32).sqrt();
        Conv3x3 {
            weight: Tensor::from_fn(&[output, input, 3, 3], |_| rng.uniform_f32(-bound, bound)),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Conv3x3 {
            weight: Tensor::zeros(&[output, input, 3, 3]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Zero-padded, stride 1, same spatial size.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 3 || dims[0] != self.inputs() {
            return shape_err(format!(
                "conv expects {}×H×W, got {dims:?}",
                self.inputs()
            ));
        }
        let (c, h, w) = (dims[0], dims[1], dims[2]);
        let cols = im2col(x.data(), c, h, w);
        let kernel = self.weight.clone().reshape(&[self.outputs(), c * 9])?;
        let mut y = matmul(&kernel, &Tensor::new(&[c * 9, h * w], cols)?)?;
        for (o, row) in y.data_mut().chunks_exact_mut(h * w).enumerate() {
            let b = self.bias.data()[o];
            row.iter_mut().for_each(|v| *v += b);
        }
        y.reshape(&[self.outputs(), h, w])
    }
}

/// `(c·9) × (h·w)` patch matrix; row `c·9 + ky·3 + kx` holds the input
/// shifted by `(ky − 1, kx − 1)`.
fn im2col(x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c * 9 * h * w];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = &mut out[((ch * 9 + ky * 3 + kx) * h * w)..][..h * w];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + kx as isize - 1;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        dst[i * w + j] = x[(ch * h + si as usize) * w + sj as usize];
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
}

impl Branch {
    pub fn init(input: usize, width: usize, output: usize, rng: &mut SeededRng) -> Self {
        Branch {
            conv1: Conv3x3::init(input, width, rng),
            conv2: Conv3x3::init(width, output, rng),
        }
    }

    pub fn zeros(input: usize, width: usize, output: usize) -> Self {
        Branch {
            conv1: Conv3x3::zeros(input, width),
            conv2: Conv3x3::zeros(width, output),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let hidden = self.conv1.forward(x)?.map(|v| v.max(0.0));
        self.conv2.forward(&hidden)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub score: Branch,
    pub offset: Branch,
    pub size: Branch,
}

impl HeadWeights {
    pub fn init(channels: usize, width: usize, rng: &mut SeededRng) -> Self {
        HeadWeights {
            score: Branch::init(channels, width, 1, rng),
            offset: Branch::init(channels, width, 2, rng),
            size: Branch::init(channels, width, 2, rng),
        }
    }

    pub fn zeros(channels: usize, width: usize) -> Self {
        HeadWeights {
            score: Branch::zeros(channels, width, 1),
            offset: Branch::zeros(channels, width, 2),
            size: Branch::zeros(channels, width, 2),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(12);
        for (name, b) in [("score", &self.score), ("offset", &self.offset), ("size", &self.size)] {
            for (conv, c) in [("conv1", &b.conv1), ("conv2", &b.conv2)] {
                out.push((format!("{name}.{conv}.weight"), &c.weight));
                out.push((format!("{name}.{conv}.bias"), &c.bias));
            }
        }
        out
    }

    pub(crate) fn expected_dims(channels: usize, width: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(12);
        for outputs in [1, 2, 2] {
            out.push(vec![width, channels, 3, 3]);
            out.push(vec![width]);
            out.push(vec![outputs, width, 3, 3]);
            out.push(vec![outputs]);
        }
        out
    }

    pub(crate) fn from_parts(parts: Vec<Tensor>) -> Self {
        let mut it = parts.into_iter();
        let mut conv = || Conv3x3 {
            weight: it.next().expect("head weight"),
            bias: it.next().expect("head bias"),
        };
        let mut branch = || Branch {
            conv1: conv(),
            conv2: conv(),
        };
        HeadWeights {
            score: branch(),
            offset: branch(),
            size: branch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// `H × W`, unbounded.
    pub score: Tensor,
    /// `2 × H × W`, `(dx, dy)` in cells, each in `(−0.5, 0.5)`.
    pub offset: Tensor,
    /// `2 × H × W`, `(w, h)` as fractions of the search side.
    pub size: Tensor,
}

pub fn head_forward(map: &Tensor, w: &HeadWeights) -> Result<HeadOutput> {
    let score = w.score.forward(map)?;
    let (h, wd) = (score.dims()[1], score.dims()[2]);
    Ok(HeadOutput {
        score: score.reshape(&[h, wd])?,
        offset: w.offset.forward(map)?.map(|v| 0.5 * v.tanh()),
        size: w.size.forward(map)?.map(|v| 1.0 / (1.0 + (-v).exp())),
    })
}

/// Added after the min-shift so a flat map still takes the window's shape.
pub const PENALTY_FLOOR: f32 = 1e-6;

/// Shifts the map to be positive, then multiplies by the window.
pub fn hanning_penalty(score: &Tensor, kind: WindowKind) -> Result<Tensor> {
    if score.rank() != 2 {
        return shape_err(format!("score map must be H×W, got {:?}", score.dims()));
    }
    let min = score.data().iter().copied().fold(f32::INFINITY, f32::min);
    let window = window_2d(kind, score.dims()[0], score.dims()[1]);
    score.zip_map(&window, |s, w| (s - min + PENALTY_FLOOR) * w)
}

/// Box in search-region pixels, centre and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
    pub row: usize,
    pub col: usize,
}

/// Peak cell (row-major first on ties) turned into search-region pixels.
pub fn decode_search(score: &Tensor, out: &HeadOutput, search_side: usize) -> Result<SearchBox> {
    let (h, w) = (score.dims()[0], score.dims()[1]);
    if score.rank() != 2 || out.offset.dims() != [2, h, w] || out.size.dims() != [2, h, w] {
        return shape_err("score, offset and size maps disagree");
    }
    let (idx, _) = argmax_first(score.data());
    let (row, col) = (idx / w, idx % w);
    let side = search_side as f32;
    let dx = out.offset.data()[idx];
    let dy = out.offset.data()[h * w + idx];
    Ok(SearchBox {
        cx: (col as f32 + 0.5 + dx) / w as f32 * side,
        cy: (row as f32 + 0.5 + dy) / h as f32 * side,
        w: out.size.data()[idx] * side,
        h: out.size.data()[h * w + idx] * side,
        row,
        col,
    })
}
