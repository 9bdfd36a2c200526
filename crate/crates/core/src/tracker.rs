//! Single-object tracking: cropping, one pass through the skip pipeline and
//! box decoding back into frame coordinates.

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    apply_block, check_choice, embed_search, embed_template, forward_prefix, ExecTrace, ForwardMode,
    LayerFeatures,
};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::ggca::{ggca_forward, tokens_to_map};
use crate::head::{decode_search, hanning_penalty, head_forward, HeadOutput, SearchBox};
use crate::model::ModelWeights;
use crate::select::{select_layer, SelectionDecision};
use crate::tensor::Tensor;

/// Interleaved RGB8 image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument(format!("frame must be non-empty, got {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Parse(format!(
                "{width}x{height} RGB frame needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Frame { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Frame::new(width, height, rgb.repeat(width * height))
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Frame::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn channel_mean(&self) -> [f32; 3] {
        let mut sum = [0u64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as u64;
            }
        }
        let n = (self.width * self.height) as f64;
        sum.map(|s| (s as f64 / n) as f32)
    }

    /// Binary `P6` with maxval 255; `#` comments allowed in the header.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Parse(format!("PPM: {msg}"));
        let mut pos = 0;
        let token = |pos: &mut usize| -> Result<String> {
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err(bad("truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };
        if token(&mut pos)? != "P6" {
            return Err(bad("not a binary P6 file"));
        }
        let num = |pos: &mut usize, what: &str| -> Result<usize> {
            token(pos)?
                .parse::<usize>()
                .map_err(|_| bad(&format!("invalid {what}")))
        };
        let width = num(&mut pos, "width")?;
        let height = num(&mut pos, "height")?;
        let maxval = num(&mut pos, "maxval")?;
        if maxval != 255 {
            return Err(bad(&format!("maxval {maxval} unsupported")));
        }
        if pos >= bytes.len() {
            return Err(bad("missing pixel data"));
        }
        pos += 1;
        let need = width * height * 3;
        if bytes.len() - pos != need {
            return Err(bad(&format!("expected {need} pixel bytes, found {}", bytes.len() - pos)));
        }
        Frame::new(width, height, bytes[pos..].to_vec())
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        Frame::from_ppm(&std::fs::read(path)?)
    }

    pub fn read_raw(path: &Path, width: usize, height: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        std::fs::File::open(path)?.read_to_end(&mut data)?;
        Frame::new(width, height, data)
    }
}

/// `value = (pixel · scale − mean) / std`, per channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub scale: f32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    /// Raw `0..=255` values.
    pub fn raw() -> Self {
        Normalization {
            scale: 1.0,
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn unit() -> Self {
        Normalization {
            scale: 1.0 / 255.0,
            ..Normalization::raw()
        }
    }

    pub fn imagenet() -> Self {
        Normalization {
            scale: 1.0 / 255.0,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }

    pub fn apply(&self, c: usize, v: f32) -> f32 {
        (v * self.scale - self.mean[c]) / self.std[c]
    }
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::imagenet()
    }
}

/// Square crop of `side` frame pixels centred on `(cx, cy)`, resampled to `out_side`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub cx: f32,
    pub cy: f32,
    pub side: f32,
    pub out_side: usize,
}

impl CropParams {
    /// Frame pixels per output pixel.
    pub fn scale(&self) -> f32 {
        self.side / self.out_side as f32
    }

    pub fn origin(&self) -> (f32, f32) {
        (self.cx - self.side / 2.0, self.cy - self.side / 2.0)
    }

    /// Crop-space point (output pixels) to frame coordinates.
    pub fn to_frame(&self, x: f32, y: f32) -> (f32, f32) {
        let (x0, y0) = self.origin();
        (x0 + x * self.scale(), y0 + y * self.scale())
    }
}

/// Bilinear sampling at pixel centres; out-of-frame taps read the frame's mean colour.
pub fn crop_resize(frame: &Frame, crop: &CropParams, norm: &Normalization) -> Result<Tensor> {
    if !(crop.side > 0.0) || !crop.side.is_finite() {
        return Err(Error::Argument(format!("crop side must be positive, got {}", crop.side)));
    }
    if crop.out_side == 0 {
        return Err(Error::Argument("crop output side must be positive".into()));
    }
    if !crop.cx.is_finite() || !crop.cy.is_finite() {
        return Err(Error::Argument("crop centre must be finite".into()));
    }
    let n = crop.out_side;
    let mean = frame.channel_mean();
    let (x0, y0) = crop.origin();
    let step = crop.scale();
    let coords = |origin: f32| -> Vec<(i64, f32)> {
        (0..n)
            .map(|u| {
                let s = origin + (u as f32 + 0.5) * step - 0.5;
                let f = s.floor();
                (f as i64, s - f)
            })
            .collect()
    };
    let xs = coords(x0);
    let ys = coords(y0);
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    let tap = |x: i64, y: i64, c: usize| -> f32 {
        if x < 0 || y < 0 || x >= w || y >= h {
            mean[c]
        } else {
            frame.data[((y * w + x) * 3) as usize + c] as f32
        }
    };
    let mut out = vec![0.0f32; 3 * n * n];
    for c in 0..3 {
        for (v, &(iy, fy)) in ys.iter().enumerate() {
            for (u, &(ix, fx)) in xs.iter().enumerate() {
                let top = tap(ix, iy, c) * (1.0 - fx) + tap(ix + 1, iy, c) * fx;
                let bottom = tap(ix, iy + 1, c) * (1.0 - fx) + tap(ix + 1, iy + 1, c) * fx;
                let value = top * (1.0 - fy) + bottom * fy;
                out[(c * n + v) * n + u] = norm.apply(c, value);
            }
        }
    }
    Tensor::new(&[3, n, n], out)
}

/// Axis-aligned box in frame pixels, centre and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BoundingBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Result<Self> {
        let b = BoundingBox { cx, cy, w, h };
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) || w <= 0.0 || h <= 0.0 {
            return Err(Error::Argument(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    /// Intersects with the frame; each side is kept at least one pixel.
    pub fn clip(&self, width: usize, height: usize) -> BoundingBox {
        let axis = |c: f32, len: f32, limit: f32| -> (f32, f32) {
            let lo = (c - len / 2.0).clamp(0.0, limit);
            let hi = (c + len / 2.0).clamp(0.0, limit);
            if hi - lo >= 1.0 {
                ((lo + hi) / 2.0, hi - lo)
            } else {
                (c.clamp(0.5, limit - 0.5), 1.0)
            }
        };
        let (cx, w) = axis(self.cx, self.w, width as f32);
        let (cy, h) = axis(self.cy, self.h, height as f32);
        BoundingBox { cx, cy, w, h }
    }

    pub fn scale(&self) -> f32 {
        (self.w * self.h).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub template_factor: f32,
    pub search_factor: f32,
    pub normalization: Normalization,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            template_factor: 2.0,
            search_factor: 4.0,
            normalization: Normalization::imagenet(),
        }
    }
}

/// Per-sequence state. The template embedding is fixed at initialisation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    pub bbox: BoundingBox,
    template_tokens: Arc<Tensor>,
    pub last_crop: Option<CropParams>,
    pub frame_index: usize,
}

impl TrackState {
    pub fn template_tokens(&self) -> &Tensor {
        &self.template_tokens
    }
}

pub fn init_track(
    frame: &Frame,
    bbox: BoundingBox,
    model: &ModelWeights,
    cfg: &ModelConfig,
    tcfg: &TrackerConfig,
) -> Result<TrackState> {
    let bbox = BoundingBox::new(bbox.cx, bbox.cy, bbox.w, bbox.h)?;
    let crop = CropParams {
        cx: bbox.cx,
        cy: bbox.cy,
        side: tcfg.template_factor * bbox.scale(),
        out_side: cfg.template_side,
    };
    let z = crop_resize(frame, &crop, &tcfg.normalization)?;
    let tokens = embed_template(&z, cfg, &model.backbone)?;
    Ok(TrackState {
        bbox,
        template_tokens: Arc::new(tokens),
        last_crop: None,
        frame_index: 0,
    })
}

/// Everything one forward pass produces, in search-region coordinates.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub features: LayerFeatures,
    pub selection: Option<SelectionDecision>,
    /// Candidate actually run, `None` in full mode.
    pub chosen_k: Option<usize>,
    pub head: HeadOutput,
    pub penalized: Tensor,
    pub search_box: SearchBox,
    pub trace: ExecTrace,
}

impl PipelineOutput {
    /// Largest raw (pre-penalty) score.
    pub fn score_max(&self) -> f32 {
        self.head.score.data().iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Backbone → GGCA → head → penalty → decode for one template/search pair.
///
/// Skip mode runs blocks `1..=l*`, asks the selector (unless `force_k` is
/// given) and applies block `l*+k`. Full mode runs all `L` blocks.
pub fn run_pipeline(
    template_tokens: &Tensor,
    search: &Tensor,
    model: &ModelWeights,
    cfg: &ModelConfig,
    mode: ForwardMode,
    force_k: Option<usize>,
) -> Result<PipelineOutput> {
    let xs = embed_search(search, cfg, &model.backbone)?;
    let x0 = LayerFeatures {
        layer_index: 0,
        tokens: Tensor::concat_rows(template_tokens, &xs)?,
    };
    let mut trace = ExecTrace::default();
    let (features, selection, chosen_k) = match mode {
        ForwardMode::Skip => {
            let saturated = forward_prefix(&x0, cfg, &model.backbone, &mut trace)?;
            let decision = select_layer(saturated.first_token(), &model.selector)?;
            let k = force_k.unwrap_or(decision.chosen_k);
            check_choice(cfg, k)?;
            let out = apply_block(&saturated, cfg.saturated_layer + k, cfg, &model.backbone, &mut trace)?;
            (out, Some(decision), Some(k))
        }
        ForwardMode::Full => {
            let mut x = x0;
            for layer in 1..=cfg.depth {
                x = apply_block(&x, layer, cfg, &model.backbone, &mut trace)?;
            }
            (x, None, None)
        }
    };
    let nz = cfg.template_tokens();
    let search_tokens = features.tokens.slice_rows(nz, nz + cfg.search_tokens())?;
    let map = ggca_forward(&tokens_to_map(&search_tokens)?, &cfg.ggca, &model.ggca)?;
    let head = head_forward(&map, &model.head)?;
    let penalized = hanning_penalty(&head.score, cfg.window)?;
    let search_box = decode_search(&penalized, &head, cfg.search_side)?;
    Ok(PipelineOutput {
        features,
        selection,
        chosen_k,
        head,
        penalized,
        search_box,
        trace,
    })
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: TrackState,
    pub bbox: BoundingBox,
    pub crop: CropParams,
    pub pipeline: PipelineOutput,
}

impl StepOutput {
    pub fn chosen_k(&self) -> usize {
        self.pipeline.chosen_k.expect("tracking runs in skip mode")
    }

    pub fn score_max(&self) -> f32 {
        self.pipeline.score_max()
    }

    pub fn blocks_executed(&self) -> usize {
        self.pipeline.trace.blocks_executed()
    }
}

/// One tracking step; `state` is left untouched and the successor returned.
pub fn track_step(
    state: &TrackState,
    frame: &Frame,
    model: &ModelWeights,
    cfg: &ModelConfig,
    tcfg: &TrackerConfig,
    force_k: Option<usize>,
) -> Result<StepOutput> {
    let crop = CropParams {
        cx: state.bbox.cx,
        cy: state.bbox.cy,
        side: tcfg.search_factor * state.bbox.scale(),
        out_side: cfg.search_side,
    };
    let search = crop_resize(frame, &crop, &tcfg.normalization)?;
    let pipeline = run_pipeline(&state.template_tokens, &search, model, cfg, ForwardMode::Skip, force_k)?;
    let sb = pipeline.search_box;
    let (cx, cy) = crop.to_frame(sb.cx, sb.cy);
    let bbox = BoundingBox {
        cx,
        cy,
        w: sb.w * crop.scale(),
        h: sb.h * crop.scale(),
    }
    .clip(frame.width(), frame.height());
    let next = TrackState {
        bbox,
        template_tokens: Arc::clone(&state.template_tokens),
        last_crop: Some(crop),
        frame_index: state.frame_index + 1,
    };
    Ok(StepOutput {
        state: next,
        bbox,
        crop,
        pipeline,
    })
}

/// `{width, height, frames}`; frame paths are `.ppm` or raw RGB8, relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<String>,
    /// Initial box `[cx, cy, w, h]`; defaults to the centred quarter-area box.
    #[serde(default)]
    pub init_box: Option<[f32; 4]>,
}

impl SequenceManifest {
    pub fn initial_box(&self) -> Result<BoundingBox> {
        match self.init_box {
            Some([cx, cy, w, h]) => BoundingBox::new(cx, cy, w, h),
            None => BoundingBox::new(
                self.width as f32 / 2.0,
                self.height as f32 / 2.0,
                self.width as f32 / 2.0,
                self.height as f32 / 2.0,
            ),
        }
    }

    pub fn load_frame(&self, base: &Path, i: usize) -> Result<Frame> {
        let path = base.join(&self.frames[i]);
        let frame = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            Frame::read_ppm(&path)?
        } else {
            Frame::read_raw(&path, self.width, self.height)?
        };
        if frame.width() != self.width || frame.height() != self.height {
            return Err(Error::Parse(format!(
                "{}: {}x{} frame in a {}x{} sequence",
                path.display(),
                frame.width(),
                frame.height(),
                self.width,
                self.height
            )));
        }
        Ok(frame)
    }
}

/// One JSON line of tracker output. Frame 0 carries the initial box and null selector fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub frame: usize,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
    pub chosen_k: Option<usize>,
    pub score_max: Option<f32>,
}

/// Tracks a whole sequence, returning one record per frame.
pub fn track_sequence(
    frames: impl IntoIterator<Item = Result<Frame>>,
    init_box: BoundingBox,
    model: &ModelWeights,
    cfg: &ModelConfig,
    tcfg: &TrackerConfig,
) -> Result<Vec<TrackRecord>> {
    let mut frames = frames.into_iter();
    let first = frames
        .next()
        .ok_or_else(|| Error::Argument("sequence has no frames".into()))??;
    let mut state = init_track(&first, init_box, model, cfg, tcfg)?;
    let b = state.bbox;
    let mut out = vec![TrackRecord {
        frame: 0,
        cx: b.cx,
        cy: b.cy,
        w: b.w,
        h: b.h,
        chosen_k: None,
        score_max: None,
    }];
    for frame in frames {
        let step = track_step(&state, &frame?, model, cfg, tcfg, None)?;
        out.push(TrackRecord {
            frame: step.state.frame_index,
            cx: step.bbox.cx,
            cy: step.bbox.cy,
            w: step.bbox.w,
            h: step.bbox.h,
            chosen_k: Some(step.chosen_k()),
            score_max: Some(step.score_max()),
        });
        state = step.state;
    }
    Ok(out)
}
