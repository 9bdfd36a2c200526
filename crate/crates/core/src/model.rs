//! The full tracker weight set and its flat, named view.
//!
//! Names are dotted paths: `backbone.blocks.3.attn.qkv.weight`,
//! `ggca.bn.running_var`, `selector.fc2.bias`, `head.size.conv1.weight`.
//! Block indices in names are 0-based.

use indexmap::IndexMap;

use crate::backbone::{BackboneWeights, BlockWeights};
use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::ggca::GgcaWeights;
use crate::head::HeadWeights;
use crate::rng::SeededRng;
use crate::select::SelectorMlp;
use crate::tensor::Tensor;

pub const GGCA_INIT_RANGE: f32 = 0.1;

/// Ordered name → tensor map, the in-memory form of a weight file.
pub type NamedTensors = IndexMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub backbone: BackboneWeights,
    pub ggca: GgcaWeights,
    pub selector: SelectorMlp,
    pub head: HeadWeights,
}

impl ModelWeights {
    /// Random weights; the same `(cfg, seed)` always gives the same tensors.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed);
        let backbone = BackboneWeights::init(cfg, &mut rng);
        let ggca = GgcaWeights::init(cfg.embed_dim, &cfg.ggca, &mut rng, GGCA_INIT_RANGE)?;
        let selector = SelectorMlp::for_config(cfg, &mut rng);
        let head = HeadWeights::init(cfg.embed_dim, cfg.head_channels, &mut rng);
        Ok(ModelWeights {
            backbone,
            ggca,
            selector,
            head,
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let b = &self.backbone;
        let mut out: Vec<(String, &Tensor)> = vec![
            ("backbone.patch_embed.weight".into(), &b.patch_weight),
            ("backbone.patch_embed.bias".into(), &b.patch_bias),
            ("backbone.pos_template".into(), &b.pos_template),
            ("backbone.pos_search".into(), &b.pos_search),
        ];
        for (i, block) in b.blocks.iter().enumerate() {
            for (name, t) in block.named() {
                out.push((format!("backbone.blocks.{i}.{name}"), t));
            }
        }
        out.extend(self.ggca.named().into_iter().map(|(n, t)| (format!("ggca.{n}"), t)));
        out.extend(self.selector.named().into_iter().map(|(n, t)| (format!("selector.{n}"), t)));
        out.extend(self.head.named().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        out
    }

    pub fn to_named(&self) -> NamedTensors {
        self.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Every tensor name and shape a model for `cfg` needs, in file order.
    pub fn expected(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut out = vec![
            ("backbone.patch_embed.weight".to_string(), vec![cfg.patch_features(), d]),
            ("backbone.patch_embed.bias".to_string(), vec![d]),
            ("backbone.pos_template".to_string(), vec![cfg.template_tokens(), d]),
            ("backbone.pos_search".to_string(), vec![cfg.search_tokens(), d]),
        ];
        let block_dims = BlockWeights::expected_dims(cfg);
        let probe = BlockWeights::identity(cfg);
        for i in 0..cfg.depth {
            for ((name, _), dims) in probe.named().iter().zip(&block_dims) {
                out.push((format!("backbone.blocks.{i}.{name}"), dims.clone()));
            }
        }
        let ggca_probe = GgcaWeights::zeroed(d, &cfg.ggca)?;
        for ((name, _), dims) in ggca_probe.named().iter().zip(GgcaWeights::expected_dims(d, &cfg.ggca)?) {
            out.push((format!("ggca.{name}"), dims));
        }
        let (h, k) = (cfg.selector_hidden, cfg.choices());
        let sel_probe = SelectorMlp::zeros(d, h, k);
        for ((name, _), dims) in sel_probe.named().iter().zip(SelectorMlp::expected_dims(d, h, k)) {
            out.push((format!("selector.{name}"), dims));
        }
        let head_probe = HeadWeights::zeros(d, cfg.head_channels);
        for ((name, _), dims) in head_probe
            .named()
            .iter()
            .zip(HeadWeights::expected_dims(d, cfg.head_channels))
        {
            out.push((format!("head.{name}"), dims));
        }
        Ok(out)
    }

    /// Rebuilds a model, requiring exactly the expected names with matching shapes.
    pub fn from_named(cfg: &ModelConfig, named: &NamedTensors) -> Result<Self> {
        let expected = Self::expected(cfg)?;
        let mut parts = Vec::with_capacity(expected.len());
        for (name, dims) in &expected {
            let t = named.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.dims() != dims.as_slice() {
                return shape_err(format!("{name}: expected {dims:?}, got {:?}", t.dims()));
            }
            parts.push(t.clone());
        }
        if named.len() != expected.len() {
            let extra = named
                .keys()
                .find(|k| !expected.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Argument(format!("unexpected tensor `{extra}`")));
        }

        let mut it = parts.into_iter();
        let mut take = |n: usize| -> Vec<Tensor> { it.by_ref().take(n).collect() };
        let [patch_weight, patch_bias, pos_template, pos_search]: [Tensor; 4] =
            take(4).try_into().expect("four embedding tensors");
        let blocks = (0..cfg.depth)
            .map(|_| BlockWeights::from_parts(take(12)))
            .collect();
        let ggca = GgcaWeights::from_parts(take(8))?;
        let selector = SelectorMlp::from_parts(take(6))?;
        let head = HeadWeights::from_parts(take(12));
        Ok(ModelWeights {
            backbone: BackboneWeights {
                patch_weight,
                patch_bias,
                pos_template,
                pos_search,
                blocks,
            },
            ggca,
            selector,
            head,
        })
    }
}
