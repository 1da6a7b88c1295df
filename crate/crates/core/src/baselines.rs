//! Comparison strategies sharing the backbone: VPT-Deep prompts, the
//! AdaptFormer bottleneck adapter and Head2Toe-style pooled taps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Category, Graph, NodeId};
use crate::tensor::{Result, Tensor, TensorError};
use crate::vit::{self, glorot, uniform, LayerNodes, LayerParams, LayerTrace, ViTConfig};

pub const DEFAULT_ADAPTER_DIM: usize = 64;
pub const DEFAULT_ADAPTER_SCALE: f64 = 0.1;

/// Per-layer VPT-Deep prompts, `D x T` each.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub t: usize,
    pub prompts: Vec<Option<Tensor>>,
}

impl PromptSet {
    pub fn init(cfg: &ViTConfig, t: usize, active: &[bool], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = glorot(cfg.d, cfg.d);
        let prompts = active
            .iter()
            .map(|&a| (a && t > 0).then(|| uniform(&mut rng, &[cfg.d, t], r)))
            .collect();
        PromptSet { t, prompts }
    }
}

pub fn vpt_param_count(d: usize, layers: usize, t: usize) -> usize {
    t * d * layers
}

/// Bottleneck adapter: `down` is `dim x D`, `up` is `D x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<T> {
    pub down: T,
    pub up: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub dim: usize,
    pub scale: f64,
    pub layers: Vec<Option<AdapterParams<Tensor>>>,
}

impl AdapterWeights {
    /// Fan-based `down`, zero `up`, so a fresh adapter leaves the layer unchanged.
    pub fn init(cfg: &ViTConfig, dim: usize, scale: f64, active: &[bool], seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(TensorError::Contract("adapter dim must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = active
            .iter()
            .map(|&a| {
                a.then(|| AdapterParams {
                    down: uniform(&mut rng, &[dim, cfg.d], glorot(cfg.d, dim)),
                    up: Tensor::zeros(&[cfg.d, dim]),
                })
            })
            .collect();
        Ok(AdapterWeights { dim, scale, layers })
    }
}

/// `dim * 2 * D * layers`; the adapters carry no biases.
pub fn adapter_param_count(d: usize, layers: usize, dim: usize) -> usize {
    dim * 2 * d * layers
}

/// An adapter bound to graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct AdapterBinding {
    pub down: NodeId,
    pub up: NodeId,
    pub scale: f64,
}

impl AdapterBinding {
    /// `s * up(gelu(down(x)))` per column.
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = g.matmul(self.down, x)?;
        let h = g.gelu(h)?;
        let y = g.matmul(self.up, h)?;
        g.scale(y, self.scale)
    }
}

/// One layer with `D x T` prompts appended to every sample. The prompt
/// columns produce queries, keys and values like any token; their outputs
/// are dropped. `k` and `v` of the result cover the original tokens only,
/// while the other taps keep all `n + T` columns per sample.
#[allow(clippy::too_many_arguments)]
pub fn vpt_layer(
    g: &mut Graph,
    cfg: &ViTConfig,
    lw: &LayerParams<NodeId>,
    z: NodeId,
    prompt: NodeId,
    batch: usize,
    tokens: usize,
    adapter: Option<&AdapterBinding>,
) -> Result<LayerNodes> {
    let d = g.shape(z)[0];
    let t = g.shape(prompt)[1];
    let ext = tokens + t;
    let prev = g.set_category(Category::PromptBranch);
    let joined = g.concat_cols(&[z, prompt])?;
    let width = batch * tokens + t;
    let mut index = Vec::with_capacity(d * batch * ext);
    for i in 0..d {
        for b in 0..batch {
            for j in 0..ext {
                let src = if j < tokens { b * tokens + j } else { batch * tokens + j - tokens };
                index.push(i * width + src);
            }
        }
    }
    let x = g.gather(joined, index, vec![d, batch * ext])?;
    g.set_category(prev);
    let mut nodes = vit::layer(g, cfg, lw, x, batch, ext, adapter)?;
    let mut keep = Vec::with_capacity(d * batch * tokens);
    for i in 0..d {
        for b in 0..batch {
            keep.extend((0..tokens).map(|j| i * batch * ext + b * ext + j));
        }
    }
    let shape = vec![d, batch * tokens];
    nodes.output = g.gather(nodes.output, keep.clone(), shape.clone())?;
    nodes.k = g.gather(nodes.k, keep.clone(), shape.clone())?;
    nodes.v = g.gather(nodes.v, keep, shape)?;
    nodes.input = z;
    Ok(nodes)
}

/// VPT-Deep layer on a single sample; `T = 0` is the plain layer.
pub fn vpt_layer_forward(
    z_prev: &Tensor,
    prompts: &Tensor,
    lw: &LayerParams<Tensor>,
    cfg: &ViTConfig,
) -> Result<Tensor> {
    if prompts.cols() == 0 {
        return Ok(vit::layer_forward(z_prev, lw, cfg)?.0);
    }
    let mut g = Graph::inference();
    let bl = lw.map(|t| g.input(t.clone()));
    let z = g.input(z_prev.clone());
    let p = g.input(prompts.clone());
    let nodes = vpt_layer(&mut g, cfg, &bl, z, p, 1, z_prev.cols(), None)?;
    Ok(g.value(nodes.output).clone())
}

/// Layer with a parallel adapter on the MLP branch, single sample.
pub fn adaptformer_layer_forward(
    z_prev: &Tensor,
    lw: &LayerParams<Tensor>,
    adapter: &AdapterParams<Tensor>,
    scale: f64,
    cfg: &ViTConfig,
) -> Result<Tensor> {
    let mut g = Graph::inference();
    let bl = lw.map(|t| g.input(t.clone()));
    let z = g.input(z_prev.clone());
    let ad = AdapterBinding {
        down: g.input(adapter.down.clone()),
        up: g.input(adapter.up.clone()),
        scale,
    };
    let nodes = vit::layer(&mut g, cfg, &bl, z, 1, z_prev.cols(), Some(&ad))?;
    Ok(g.value(nodes.output).clone())
}

/// Token-group average pooling: groups start at `0, stride, 2 stride, ...`
/// below the token count and span `window` tokens, the last one possibly
/// partial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    /// Window and stride `ceil(n / groups)`, which yields `groups` groups
    /// whenever that many fit.
    pub fn groups(n: usize, groups: usize) -> Self {
        let w = n.div_ceil(groups.max(1));
        PoolSpec { window: w, stride: w }
    }

    pub fn count(&self, n: usize) -> usize {
        n.div_ceil(self.stride)
    }

    fn ranges(&self, n: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..n)
            .step_by(self.stride)
            .map(move |s| (s, (s + self.window).min(n)))
    }
}

/// Pooling per tap. `z0` applies once; the rest apply to every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolingPlan {
    pub z0: PoolSpec,
    pub ln: PoolSpec,
    pub msa: PoolSpec,
    pub hidden: PoolSpec,
    pub out: PoolSpec,
}

/// The three feature-size regimes, given as group counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolRegime {
    Small,
    Medium,
    Large,
}

impl PoolingPlan {
    pub fn uniform(spec: PoolSpec) -> Self {
        PoolingPlan {
            z0: spec,
            ln: spec,
            msa: spec,
            hidden: spec,
            out: spec,
        }
    }

    /// Group counts `(z0, ln, msa, hidden, out)` per regime. At ViT-B these
    /// give 68,352-, 814,848- and 1,800,192-dimensional vectors.
    pub fn regime(regime: PoolRegime, tokens: usize) -> Self {
        let (z0, ln, msa, hidden, out) = match regime {
            PoolRegime::Small => (5, 1, 1, 1, 1),
            PoolRegime::Medium => (5, 8, 8, 16, 8),
            PoolRegime::Large => (4, 25, 25, 29, 29),
        };
        let g = |k| PoolSpec::groups(tokens, k);
        PoolingPlan {
            z0: g(z0),
            ln: g(ln),
            msa: g(msa),
            hidden: g(hidden),
            out: g(out),
        }
    }

    fn specs(&self) -> [PoolSpec; 5] {
        [self.z0, self.ln, self.msa, self.hidden, self.out]
    }

    pub fn validate(&self) -> Result<()> {
        if self.specs().iter().any(|s| s.window == 0 || s.stride == 0) {
            return Err(TensorError::Contract("pooling window and stride must be positive".into()));
        }
        Ok(())
    }
}

/// Length of the tap vector, excluding the CLS block.
pub fn tap_dim(cfg: &ViTConfig, plan: &PoolingPlan) -> usize {
    let n = cfg.tokens();
    let (d, h) = (cfg.d, cfg.hidden());
    plan.z0.count(n) * d
        + cfg.m
            * (plan.ln.count(n) * d + plan.msa.count(n) * d + plan.hidden.count(n) * h + plan.out.count(n) * d)
}

/// Pools the columns of one sample's `rows x n` tap; output index is
/// `row * groups + group`.
pub fn pool_tokens(x: &Tensor, spec: PoolSpec) -> Vec<f64> {
    let (rows, n) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(rows * spec.count(n));
    for i in 0..rows {
        let row = &x.data()[i * n..(i + 1) * n];
        for (s, e) in spec.ranges(n) {
            out.push(row[s..e].iter().sum::<f64>() / (e - s) as f64);
        }
    }
    out
}

/// Pooled and concatenated taps of one sample: `Z_0`, then per layer the
/// post-LN, post-MSA, MLP-hidden and output taps.
#[derive(Debug, Clone, PartialEq)]
pub struct TapVector {
    pub values: Vec<f64>,
}

pub fn head2toe_features(z0: &Tensor, trace: &[LayerTrace], plan: &PoolingPlan) -> Result<TapVector> {
    plan.validate()?;
    if trace.is_empty() {
        return Err(TensorError::Contract("head2toe needs at least one layer".into()));
    }
    let mut values = pool_tokens(z0, plan.z0);
    for tr in trace {
        values.extend(pool_tokens(&tr.post_ln, plan.ln));
        values.extend(pool_tokens(&tr.post_msa, plan.msa));
        values.extend(pool_tokens(&tr.hidden, plan.hidden));
        values.extend(pool_tokens(&tr.output, plan.out));
    }
    Ok(TapVector { values })
}

/// Tap vectors for a batch of images run through the frozen backbone.
pub fn head2toe_batch(
    images: &[&Tensor],
    weights: &vit::ViTWeights,
    cfg: &ViTConfig,
    plan: &PoolingPlan,
) -> Result<Vec<TapVector>> {
    let tok = cfg.tokens();
    let z0 = vit::patch_embed(images, weights, cfg)?;
    let fw = vit::forward(&z0, weights, cfg)?;
    (0..images.len())
        .map(|b| {
            let cols = |t: &Tensor| t.columns(b * tok, (b + 1) * tok);
            let trace: Vec<LayerTrace> = fw
                .trace
                .iter()
                .map(|tr| LayerTrace {
                    input: cols(&tr.input),
                    post_ln: cols(&tr.post_ln),
                    post_msa: cols(&tr.post_msa),
                    hidden: cols(&tr.hidden),
                    output: cols(&tr.output),
                })
                .collect();
            head2toe_features(&cols(&z0), &trace, plan)
        })
        .collect()
}
