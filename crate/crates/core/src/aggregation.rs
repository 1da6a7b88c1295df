//! Ways to turn per-layer summarized features into the head input.
//!
//! Within a layer the `T` columns of `Z'_m` are kept, averaged or combined
//! with learned weights. Across layers the results are concatenated, mixed
//! with learned per-layer weights, or fed with the CLS vector through one
//! extra transformer layer whose CLS output becomes the feature vector.
//!
//! Weighted sums are evaluated as a product with a selection matrix whose
//! nonzero entries are the weights, so uniform weights reproduce the mean
//! and one-hot weights reproduce the selected column exactly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::tensor::{Result, Tensor, TensorError};
use crate::vit::{self, LayerParams, ViTConfig, ViTWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Within {
    #[default]
    None,
    Mean,
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Across {
    #[default]
    Concat,
    Weighted,
    TransLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationPlan {
    #[serde(default)]
    pub within: Within,
    #[serde(default)]
    pub across: Across,
}

impl AggregationPlan {
    /// Columns per layer after within-layer aggregation.
    pub fn width(&self, t: usize) -> usize {
        match self.within {
            Within::None => t,
            Within::Mean | Within::Weighted => 1,
        }
    }

    /// Head input length for `layers` summarized layers plus CLS.
    pub fn output_dim(&self, d: usize, t: usize, layers: usize) -> usize {
        let k = self.width(t);
        match self.across {
            Across::Concat => layers * d * k + d,
            Across::Weighted => d * k + d,
            Across::TransLayer => d,
        }
    }
}

/// Learned aggregation weights. Weighted sums start uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationParams {
    pub plan: AggregationPlan,
    /// Length-`T` weights per summarized layer.
    pub within: Vec<Tensor>,
    /// One weight per summarized layer.
    pub across: Option<Tensor>,
    pub trans: Option<LayerParams<Tensor>>,
}

impl AggregationParams {
    pub fn init(plan: AggregationPlan, cfg: &ViTConfig, t: usize, layers: usize, seed: u64) -> Result<Self> {
        if t == 0 && plan.within == Within::Weighted {
            return Err(TensorError::Contract("weighted within-layer sum needs T >= 1".into()));
        }
        let within = match plan.within {
            Within::Weighted => vec![Tensor::full(&[t], 1.0 / t as f64); layers],
            _ => Vec::new(),
        };
        let across = (plan.across == Across::Weighted && layers > 0)
            .then(|| Tensor::full(&[layers], 1.0 / layers as f64));
        let trans = match plan.across {
            Across::TransLayer => {
                let mut one = cfg.clone();
                one.m = 1;
                let w = ViTWeights::init(&one, seed ^ 0x7472_616e_73)?;
                Some(w.layers.into_iter().next().expect("one layer"))
            }
            _ => None,
        };
        Ok(AggregationParams {
            plan,
            within,
            across,
            trans,
        })
    }

    pub fn param_count(&self) -> usize {
        let mut n: usize = self.within.iter().map(Tensor::len).sum();
        n += self.across.as_ref().map_or(0, Tensor::len);
        if let Some(t) = &self.trans {
            n += t.fields().iter().map(|f| f.len()).sum::<usize>();
        }
        n
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        for w in &mut self.within {
            f(w);
        }
        if let Some(w) = &mut self.across {
            f(w);
        }
        if let Some(t) = &mut self.trans {
            for p in t.fields_mut() {
                f(p);
            }
        }
    }

    pub fn visit(&self, mut f: impl FnMut(&Tensor)) {
        for w in &self.within {
            f(w);
        }
        if let Some(w) = &self.across {
            f(w);
        }
        if let Some(t) = &self.trans {
            for p in t.fields() {
                f(p);
            }
        }
    }
}

/// Graph handles of [`AggregationParams`].
#[derive(Debug, Clone)]
pub struct AggregationBinding {
    pub within: Vec<NodeId>,
    pub across: Option<NodeId>,
    pub trans: Option<LayerParams<NodeId>>,
}

/// `x (D x cols)` times a `cols x out` matrix holding `w[widx]` at the
/// listed `(row, col, widx)` positions and zero elsewhere.
fn weighted_columns(
    g: &mut Graph,
    x: NodeId,
    w: NodeId,
    entries: &[(usize, usize, usize)],
    out: usize,
) -> Result<NodeId> {
    let cols = g.shape(x)[1];
    let mut index = vec![0usize; cols * out];
    let mut mask = vec![0.0; cols * out];
    for &(r, c, k) in entries {
        index[r * out + c] = k;
        mask[r * out + c] = 1.0;
    }
    let s = g.gather(w, index, vec![cols, out])?;
    let mask = g.input(Tensor::new(vec![cols, out], mask)?);
    let s = g.mul(s, mask)?;
    g.matmul(x, s)
}

/// Within-layer aggregation of `D x (B T)` features; returns `D x (B k)`.
pub fn within_graph(
    g: &mut Graph,
    plan: AggregationPlan,
    x: NodeId,
    weights: Option<NodeId>,
    batch: usize,
    t: usize,
) -> Result<NodeId> {
    let entries: Vec<_> = (0..batch).flat_map(|b| (0..t).map(move |j| (b * t + j, b, j))).collect();
    match plan.within {
        Within::None => Ok(x),
        Within::Mean => {
            let w = g.input(Tensor::full(&[t], 1.0 / t as f64));
            weighted_columns(g, x, w, &entries, batch)
        }
        Within::Weighted => {
            let w = weights.ok_or_else(|| TensorError::Contract("weighted sum needs weights".into()))?;
            if g.shape(w) != [t] {
                return Err(TensorError::Contract(format!(
                    "{:?} within-layer weights for T = {t}",
                    g.shape(w)
                )));
            }
            weighted_columns(g, x, w, &entries, batch)
        }
    }
}

/// Builds the `B x dim` head input from per-sample column blocks. Each block
/// is `(node, columns per sample)`; a sample's block contributes `d * k + t`.
pub(crate) fn flatten_blocks(g: &mut Graph, blocks: &[(NodeId, usize)], batch: usize) -> Result<NodeId> {
    let d = g.shape(blocks[0].0)[0];
    let nodes: Vec<NodeId> = blocks.iter().map(|b| b.0).collect();
    let joined = if nodes.len() == 1 { nodes[0] } else { g.concat_cols(&nodes)? };
    let width = g.shape(joined)[1];
    let mut offsets = Vec::with_capacity(blocks.len());
    let mut off = 0;
    for &(n, _) in blocks {
        offsets.push(off);
        off += g.shape(n)[1];
    }
    let dim: usize = blocks.iter().map(|b| d * b.1).sum();
    let mut index = Vec::with_capacity(batch * dim);
    for b in 0..batch {
        for (&(node, k), &o) in blocks.iter().zip(&offsets) {
            let stride = g.shape(node)[1] / batch;
            for i in 0..d {
                for j in 0..k {
                    index.push(i * width + o + b * stride + j);
                }
            }
        }
    }
    g.gather(joined, index, vec![batch, dim])
}

/// Across-layer aggregation. `layers` are `D x (B k)` per summarized layer;
/// `cls` is `(node, columns per sample)` with the CLS token first in each
/// sample. Returns the `B x dim` head input.
#[allow(clippy::too_many_arguments)]
pub fn across_graph(
    g: &mut Graph,
    cfg: &ViTConfig,
    plan: AggregationPlan,
    layers: &[NodeId],
    cls: (NodeId, usize),
    bind: &AggregationBinding,
    batch: usize,
    k: usize,
) -> Result<NodeId> {
    let cls_block = (cls.0, 1);
    match plan.across {
        Across::Concat => {
            let mut blocks: Vec<(NodeId, usize)> = layers.iter().map(|&n| (n, k)).collect();
            blocks.push(cls_block);
            flatten_blocks(g, &blocks, batch)
        }
        Across::Weighted => {
            if layers.is_empty() {
                return flatten_blocks(g, &[cls_block], batch);
            }
            let w = bind
                .across
                .ok_or_else(|| TensorError::Contract("weighted sum needs weights".into()))?;
            if g.shape(w) != [layers.len()] {
                return Err(TensorError::Contract(format!(
                    "{:?} across-layer weights for {} layers",
                    g.shape(w),
                    layers.len()
                )));
            }
            let x = if layers.len() == 1 { layers[0] } else { g.concat_cols(layers)? };
            let per = batch * k;
            let entries: Vec<_> = (0..layers.len())
                .flat_map(|m| (0..per).map(move |c| (m * per + c, c, m)))
                .collect();
            let mixed = weighted_columns(g, x, w, &entries, per)?;
            flatten_blocks(g, &[(mixed, k), cls_block], batch)
        }
        Across::TransLayer => {
            let lw = bind
                .trans
                .as_ref()
                .ok_or_else(|| TensorError::Contract("trans-layer needs weights".into()))?;
            let d = cfg.d;
            let mut parts = vec![cls.0];
            parts.extend_from_slice(layers);
            let joined = g.concat_cols(&parts)?;
            let width = g.shape(joined)[1];
            let tokens = 1 + layers.len() * k;
            let cls_width = g.shape(cls.0)[1];
            let mut index = Vec::with_capacity(d * batch * tokens);
            for i in 0..d {
                for b in 0..batch {
                    index.push(i * width + b * cls.1);
                    for m in 0..layers.len() {
                        let base = cls_width + m * batch * k + b * k;
                        index.extend((0..k).map(|j| i * width + base + j));
                    }
                }
            }
            let x = g.gather(joined, index, vec![d, batch * tokens])?;
            let nodes = vit::layer(g, cfg, lw, x, batch, tokens, None)?;
            flatten_blocks(g, &[(nodes.output, 1)], batch)
        }
    }
}

/// `Z'` (`D x T`) aggregated within the layer for one sample.
pub fn aggregate_within(z_prime: &Tensor, plan: AggregationPlan, weights: Option<&Tensor>) -> Result<Tensor> {
    let mut g = Graph::inference();
    let t = z_prime.cols();
    if let (Within::Weighted, Some(w)) = (plan.within, weights) {
        if w.len() != t {
            return Err(TensorError::Contract(format!("{} weights for T = {t}", w.len())));
        }
    }
    let x = g.input(z_prime.clone());
    let w = weights.map(|w| g.input(w.clone()));
    let out = within_graph(&mut g, plan, x, w, 1, t)?;
    Ok(g.value(out).clone())
}

/// Feature vector of one sample from its per-layer `D x k` features and CLS.
pub fn aggregate_across(
    cfg: &ViTConfig,
    per_layer: &[Tensor],
    cls: &[f64],
    params: &AggregationParams,
) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let k = per_layer.first().map_or(1, Tensor::cols);
    let layers: Vec<NodeId> = per_layer.iter().map(|t| g.input(t.clone())).collect();
    let c = g.input(Tensor::new(vec![cls.len(), 1], cls.to_vec())?);
    let bind = AggregationBinding {
        within: Vec::new(),
        across: params.across.as_ref().map(|t| g.input(t.clone())),
        trans: params.trans.as_ref().map(|l| l.map(|t| g.input(t.clone()))),
    };
    let out = across_graph(&mut g, cfg, params.plan, &layers, (c, 1), &bind, 1, k)?;
    Ok(g.value(out).data().to_vec())
}
