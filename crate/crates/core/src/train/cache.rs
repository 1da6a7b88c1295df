//! Frozen-backbone feature cache for strategies that leave the backbone's
//! intermediate features unchanged.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::baselines;
use crate::data::Dataset;
use crate::model::{Model, Strategy};
use crate::tensor::{Result, Tensor, TensorError};
use crate::vit::{self, ViTConfig};

const CHUNK: usize = 64;

/// What is stored per cached layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheLayout {
    /// Keys and values, so a step only runs the query branch.
    #[default]
    KeyValue,
    /// Layer inputs; keys and values are recomputed every step.
    Intermediate,
}

impl CacheLayout {
    fn parts(self) -> usize {
        match self {
            CacheLayout::KeyValue => 2,
            CacheLayout::Intermediate => 1,
        }
    }
}

/// Bytes needed to cache `layers` layers of `images` samples with 4-byte
/// storage.
pub fn estimate_bytes(cfg: &ViTConfig, layout: CacheLayout, layers: usize, images: usize) -> u64 {
    let per = (layers * cfg.tokens() * cfg.d * 4) as u64;
    per * layout.parts() as u64 * images as u64
}

#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub layout: CacheLayout,
    d: usize,
    tokens: usize,
    /// `[layer][part][sample]`, each `D x tokens`; empty for uncached layers.
    slots: Vec<Vec<Vec<Tensor>>>,
    cls: Vec<Vec<f64>>,
    taps: Vec<Vec<f64>>,
}

impl FeatureCache {
    /// Runs the frozen backbone once over `data`.
    pub fn build(model: &Model, data: &Dataset, layout: CacheLayout) -> Result<FeatureCache> {
        let s = model.strategy();
        if s.modifies_features() {
            return Err(TensorError::Contract(format!(
                "cannot cache features for {s}: intermediate features change per step"
            )));
        }
        let cfg = &model.cfg;
        let layers: Vec<bool> = match &model.queries {
            Some(q) => q.tokens().iter().map(Option::is_some).collect(),
            None => vec![false; cfg.m],
        };
        let idx: Vec<usize> = (0..data.len()).collect();
        let chunks: Vec<Chunk> = idx
            .par_chunks(CHUNK)
            .map(|c| run_chunk(model, &data.image_refs(c), layout, &layers))
            .collect::<Result<_>>()?;
        let parts = layout.parts();
        let mut slots: Vec<Vec<Vec<Tensor>>> = layers
            .iter()
            .map(|&on| if on { vec![Vec::with_capacity(data.len()); parts] } else { Vec::new() })
            .collect();
        let mut cls = Vec::with_capacity(data.len());
        let mut taps = Vec::new();
        for ch in chunks {
            for (m, layer) in ch.slots.into_iter().enumerate() {
                for (p, samples) in layer.into_iter().enumerate() {
                    slots[m][p].extend(samples);
                }
            }
            cls.extend(ch.cls);
            taps.extend(ch.taps);
        }
        Ok(FeatureCache {
            layout,
            d: cfg.d,
            tokens: cfg.tokens(),
            slots,
            cls,
            taps,
        })
    }

    pub fn len(&self) -> usize {
        self.cls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cls.is_empty()
    }

    /// Bytes held, at 8 bytes per value.
    pub fn bytes(&self) -> usize {
        let slots: usize = self.slots.iter().flatten().flatten().map(Tensor::bytes).sum();
        let cls: usize = self.cls.iter().map(|c| c.len() * 8).sum();
        let taps: usize = self.taps.iter().map(|c| c.len() * 8).sum();
        slots + cls + taps
    }

    pub fn cached_layers(&self) -> Vec<usize> {
        (0..self.slots.len()).filter(|&m| !self.slots[m].is_empty()).collect()
    }

    pub(crate) fn check_compatible(&self, model: &Model) -> Result<()> {
        let cfg = &model.cfg;
        if cfg.d != self.d || cfg.tokens() != self.tokens || cfg.m != self.slots.len() {
            return Err(TensorError::Contract("cache was built for another backbone".into()));
        }
        if let Some(q) = &model.queries {
            for (m, p) in q.tokens().iter().enumerate() {
                if p.is_some() && self.slots[m].is_empty() {
                    return Err(TensorError::Contract(format!("layer {m} is not cached")));
                }
            }
        }
        if model.strategy() == Strategy::Head2Toe && self.taps.is_empty() && !self.is_empty() {
            return Err(TensorError::Contract("cache holds no taps".into()));
        }
        Ok(())
    }

    fn check_idx(&self, idx: &[usize]) -> Result<()> {
        match idx.iter().find(|&&i| i >= self.len()) {
            Some(i) => Err(TensorError::Contract(format!("sample {i} outside a cache of {}", self.len()))),
            None => Ok(()),
        }
    }

    /// `D x (B tokens)` for the samples in `idx`.
    pub fn batch(&self, layer: usize, part: usize, idx: &[usize]) -> Result<Tensor> {
        self.check_idx(idx)?;
        let samples = self
            .slots
            .get(layer)
            .and_then(|l| l.get(part))
            .ok_or_else(|| TensorError::Contract(format!("layer {layer} part {part} is not cached")))?;
        let n = self.tokens;
        let mut data = Vec::with_capacity(self.d * n * idx.len());
        for i in 0..self.d {
            for &s in idx {
                data.extend_from_slice(&samples[s].data()[i * n..(i + 1) * n]);
            }
        }
        Tensor::new(vec![self.d, n * idx.len()], data)
    }

    /// `D x B` final CLS vectors.
    pub fn cls_batch(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(self.d * idx.len());
        for i in 0..self.d {
            data.extend(idx.iter().map(|&s| self.cls[s][i]));
        }
        Tensor::new(vec![self.d, idx.len()], data).expect("sizes agree")
    }

    /// `B x tap_dim` pooled taps.
    pub fn taps_batch(&self, idx: &[usize]) -> Result<Tensor> {
        self.check_idx(idx)?;
        if self.taps.is_empty() {
            return Err(TensorError::Contract("cache holds no taps".into()));
        }
        let dim = self.taps[0].len();
        let data = idx.iter().flat_map(|&s| self.taps[s].iter().copied()).collect();
        Tensor::new(vec![idx.len(), dim], data)
    }
}

struct Chunk {
    slots: Vec<Vec<Vec<Tensor>>>,
    cls: Vec<Vec<f64>>,
    taps: Vec<Vec<f64>>,
}

fn run_chunk(model: &Model, images: &[&Tensor], layout: CacheLayout, layers: &[bool]) -> Result<Chunk> {
    let cfg = &model.cfg;
    let batch = images.len();
    let tok = cfg.tokens();
    let mut g = Graph::inference();
    let bw = model.backbone.bind(&mut g, false);
    let patches = g.input(vit::patchify(images, cfg)?);
    let mut z = vit::embed(&mut g, cfg, &bw, patches)?;
    let z0 = z;
    let mut slots = vec![Vec::new(); cfg.m];
    let mut trace = Vec::with_capacity(cfg.m);
    for (m, lw) in bw.layers.iter().enumerate() {
        let nodes = vit::layer(&mut g, cfg, lw, z, batch, tok, None)?;
        if layers[m] {
            let parts = match layout {
                CacheLayout::KeyValue => vec![nodes.k, nodes.v],
                CacheLayout::Intermediate => vec![nodes.input],
            };
            slots[m] = parts
                .into_iter()
                .map(|p| {
                    let t = g.value(p);
                    (0..batch).map(|b| t.columns(b * tok, (b + 1) * tok)).collect()
                })
                .collect();
        }
        trace.push(nodes);
        z = nodes.output;
    }
    let cls_t = vit::cls_columns(g.value(z), tok);
    let cls = (0..batch).map(|b| cls_t.column(b)).collect();
    let taps = if model.strategy() == Strategy::Head2Toe {
        let z0v = g.value(z0);
        (0..batch)
            .map(|b| {
                let cols = |id| g.value(id).columns(b * tok, (b + 1) * tok);
                let tr: Vec<vit::LayerTrace> = trace
                    .iter()
                    .map(|n| vit::LayerTrace {
                        input: cols(n.input),
                        post_ln: cols(n.post_ln),
                        post_msa: cols(n.post_msa),
                        hidden: cols(n.hidden),
                        output: cols(n.output),
                    })
                    .collect();
                baselines::head2toe_features(&z0v.columns(b * tok, (b + 1) * tok), &tr, &model.spec.pooling)
                    .map(|t| t.values)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(Chunk { slots, cls, taps })
}
