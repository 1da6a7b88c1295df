//! Small ViT encoder: patch embedding, CLS token, learned positions and a
//! stack of transformer layers.
//!
//! Token matrices are `D x (B * n)`: sample `b` owns columns
//! `b*n .. (b+1)*n`, with its CLS token first. Every kernel used here
//! accumulates in an order that does not depend on how many columns are in
//! the batch, so a sample's outputs are bitwise the same whether it is run
//! alone or with others.
//!
//! Two layer modes are supported. [`Mode::Paper`] is the bare equation form:
//! one head, `Q = W_q Z`, `K = W_k Z`, `V = W_v Z`, attention
//! `V softmax(K^T Q / sqrt(D))`, then a column-wise two-layer GELU MLP, with
//! no normalization and no residuals. [`Mode::Full`] is a standard pre-LN
//! block with multi-head attention, an output projection and residuals.

pub(crate) mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionSpec, Category, Graph, NodeId};
use crate::baselines::AdapterBinding;
use crate::tensor::{Result, Tensor, TensorError};

pub use io::{
    load_weights, load_weights_expecting, read_weights, save_weights, write_weights, FormatError, WeightsFile,
    WEIGHTS_MAGIC, WEIGHTS_VERSION,
};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Paper,
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub d: usize,
    pub m: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub image: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub mode: Mode,
}

fn default_channels() -> usize {
    3
}

impl ViTConfig {
    /// The configuration used for all desk-scale experiments.
    pub fn desk() -> Self {
        ViTConfig {
            d: 16,
            m: 4,
            heads: 2,
            mlp_ratio: 4,
            patch: 4,
            image: 16,
            channels: 3,
            mode: Mode::Full,
        }
    }

    /// ViT-B/16 at 224 pixels.
    pub fn vit_b() -> Self {
        ViTConfig {
            d: 768,
            m: 12,
            heads: 12,
            mlp_ratio: 4,
            patch: 16,
            image: 224,
            channels: 3,
            mode: Mode::Full,
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// Number of patch tokens `N`.
    pub fn patches(&self) -> usize {
        let side = self.image / self.patch;
        side * side
    }

    /// Tokens per sample, `1 + N`.
    pub fn tokens(&self) -> usize {
        1 + self.patches()
    }

    pub fn hidden(&self) -> usize {
        self.d * self.mlp_ratio
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Heads actually used by attention in this mode.
    pub fn attn_heads(&self) -> usize {
        match self.mode {
            Mode::Paper => 1,
            Mode::Full => self.heads,
        }
    }

    /// Softmax scale `1 / sqrt(D / H)`; paper mode is the single-head case.
    pub fn attn_scale(&self) -> f64 {
        1.0 / ((self.d / self.attn_heads()) as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::Contract(msg));
        if self.d == 0 || self.heads == 0 || self.mlp_ratio == 0 || self.patch == 0 || self.channels == 0 {
            return bad("d, heads, mlp_ratio, patch and channels must be positive".into());
        }
        if self.d % self.heads != 0 {
            return bad(format!("heads {} do not divide d {}", self.heads, self.d));
        }
        if self.image == 0 || self.image % self.patch != 0 {
            return bad(format!("image {} is not a multiple of patch {}", self.image, self.patch));
        }
        if self.mode == Mode::Full && self.d < 2 {
            return bad("full mode needs d >= 2 for layernorm".into());
        }
        Ok(())
    }
}

/// Per-layer parameters. Matrices map column vectors, so `wq` is `D x D`,
/// `w1` is `hidden x D` and `w2` is `D x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

pub const LAYER_FIELDS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2",
    "b2",
];

impl<T> LayerParams<T> {
    pub fn fields(&self) -> [&T; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn from_fields(mut it: impl Iterator<Item = T>) -> Option<Self> {
        Some(LayerParams {
            ln1_g: it.next()?,
            ln1_b: it.next()?,
            wq: it.next()?,
            bq: it.next()?,
            wk: it.next()?,
            bk: it.next()?,
            wv: it.next()?,
            bv: it.next()?,
            wo: it.next()?,
            bo: it.next()?,
            ln2_g: it.next()?,
            ln2_b: it.next()?,
            w1: it.next()?,
            b1: it.next()?,
            w2: it.next()?,
            b2: it.next()?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams::from_fields(self.fields().into_iter().map(&mut f)).expect("16 fields")
    }

    /// Whether field `i` (in [`LAYER_FIELDS`] order) takes part in the given mode.
    pub fn used_in(mode: Mode, i: usize) -> bool {
        match mode {
            Mode::Full => true,
            Mode::Paper => matches!(LAYER_FIELDS[i], "wq" | "wk" | "wv" | "w1" | "b1" | "w2" | "b2"),
        }
    }
}

/// All backbone parameters. `patch_w` is `D x (C p p)`, `cls` has length D
/// and `pos` is `D x (1 + N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams<T> {
    pub patch_w: T,
    pub patch_b: T,
    pub cls: T,
    pub pos: T,
    pub layers: Vec<LayerParams<T>>,
}

pub type ViTWeights = ViTParams<Tensor>;

impl<T> ViTParams<T> {
    /// Visits every parameter in storage order with its name.
    pub fn visit(&self, mut f: impl FnMut(String, &T)) {
        f("patch_w".into(), &self.patch_w);
        f("patch_b".into(), &self.patch_b);
        f("cls".into(), &self.cls);
        f("pos".into(), &self.pos);
        for (m, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                f(format!("layers.{m}.{name}"), t);
            }
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut T)) {
        f(&mut self.patch_w);
        f(&mut self.patch_b);
        f(&mut self.cls);
        f(&mut self.pos);
        for layer in &mut self.layers {
            for t in layer.fields_mut() {
                f(t);
            }
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ViTParams<U> {
        ViTParams {
            patch_w: f(&self.patch_w),
            patch_b: f(&self.patch_b),
            cls: f(&self.cls),
            pos: f(&self.pos),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
        }
    }
}

/// Shapes of every parameter in storage order.
pub fn param_shapes(cfg: &ViTConfig) -> ViTParams<Vec<usize>> {
    let (d, h) = (cfg.d, cfg.hidden());
    let layer = LayerParams {
        ln1_g: vec![d],
        ln1_b: vec![d],
        wq: vec![d, d],
        bq: vec![d],
        wk: vec![d, d],
        bk: vec![d],
        wv: vec![d, d],
        bv: vec![d],
        wo: vec![d, d],
        bo: vec![d],
        ln2_g: vec![d],
        ln2_b: vec![d],
        w1: vec![h, d],
        b1: vec![h],
        w2: vec![d, h],
        b2: vec![d],
    };
    ViTParams {
        patch_w: vec![d, cfg.patch_dim()],
        patch_b: vec![d],
        cls: vec![d],
        pos: vec![d, cfg.tokens()],
        layers: vec![layer; cfg.m],
    }
}

/// Number of backbone parameters that take part in a forward pass.
pub fn backbone_param_count(cfg: &ViTConfig) -> usize {
    let shapes = param_shapes(cfg);
    let mut total = shapes.patch_w.iter().product::<usize>() + cfg.d + cfg.d + cfg.d * cfg.tokens();
    for layer in &shapes.layers {
        for (i, s) in layer.fields().into_iter().enumerate() {
            if LayerParams::<Vec<usize>>::used_in(cfg.mode, i) {
                total += s.iter().product::<usize>();
            }
        }
    }
    total
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], r: f64) -> Tensor {
    let n = shape.iter().product();
    let mut t = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-r..r)).collect())
        .expect("shape matches length");
    t.round_to_f32();
    t
}

/// Fan-based uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ViTWeights {
    /// Seeded random weights. All values are f32-representable so the
    /// weights file round trip is exact.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = param_shapes(cfg);
        let mut mat = |s: &Vec<usize>| uniform(&mut rng, s, glorot(s[1], s[0]));
        let patch_w = mat(&shapes.patch_w);
        let layers_w: Vec<_> = shapes
            .layers
            .iter()
            .map(|l| (mat(&l.wq), mat(&l.wk), mat(&l.wv), mat(&l.wo), mat(&l.w1), mat(&l.w2)))
            .collect();
        let cls = uniform(&mut rng, &[cfg.d], 0.5);
        let pos = uniform(&mut rng, &[cfg.d, cfg.tokens()], 0.5);
        let d = cfg.d;
        let layers = layers_w
            .into_iter()
            .map(|(wq, wk, wv, wo, w1, w2)| LayerParams {
                ln1_g: Tensor::full(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                wq,
                bq: Tensor::zeros(&[d]),
                wk,
                bk: Tensor::zeros(&[d]),
                wv,
                bv: Tensor::zeros(&[d]),
                wo,
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::full(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w1,
                b1: Tensor::zeros(&[cfg.hidden()]),
                w2,
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(ViTParams {
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            cls,
            pos,
            layers,
        })
    }

    /// Checks every tensor shape against the configuration, naming the first
    /// mismatch.
    pub fn check_shapes(&self, cfg: &ViTConfig) -> std::result::Result<(), String> {
        if self.layers.len() != cfg.m {
            return Err(format!("{} layers, config has {}", self.layers.len(), cfg.m));
        }
        let mut expected = Vec::new();
        param_shapes(cfg).visit(|name, s| expected.push((name, s.clone())));
        let mut err = None;
        let mut i = 0;
        self.visit(|_, t| {
            let (name, s) = &expected[i];
            if err.is_none() && t.shape() != s.as_slice() {
                err = Some(format!("tensor {name} has shape {:?}, expected {s:?}", t.shape()));
            }
            i += 1;
        });
        err.map_or(Ok(()), Err)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ViTParams<NodeId> {
        self.map(|t| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
    }
}

/// Rearranges `C x h x w` images into a `(C p p) x (B N)` patch matrix.
/// Row `c p p + dy p + dx`, column `b N + py (w / p) + px`.
pub fn patchify(images: &[&Tensor], cfg: &ViTConfig) -> Result<Tensor> {
    let (c, p) = (cfg.channels, cfg.patch);
    let n = cfg.patches();
    let rows = cfg.patch_dim();
    let cols = images.len() * n;
    let mut out = vec![0.0; rows * cols];
    for (b, img) in images.iter().enumerate() {
        let s = img.shape();
        if s.len() != 3 || s[0] != c {
            return Err(TensorError::shape(
                "patch_embed",
                format!("image shape {s:?}, expected [{c}, h, w]"),
            ));
        }
        let (h, w) = (s[1], s[2]);
        if h % p != 0 || w % p != 0 {
            return Err(TensorError::shape(
                "patch_embed",
                format!("{h}x{w} image is not divisible by patch {p}"),
            ));
        }
        if h != cfg.image || w != cfg.image {
            return Err(TensorError::shape(
                "patch_embed",
                format!("{h}x{w} image, config expects {0}x{0}", cfg.image),
            ));
        }
        let side = w / p;
        let data = img.data();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let row = ch * p * p + (y % p) * p + x % p;
                    let col = b * n + (y / p) * side + x / p;
                    out[row * cols + col] = data[(ch * h + y) * w + x];
                }
            }
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// `Z0` for a batch: `[cls | W_e patches + b_e] + pos` per sample.
pub fn embed(g: &mut Graph, cfg: &ViTConfig, w: &ViTParams<NodeId>, patches: NodeId) -> Result<NodeId> {
    let (d, n, tok) = (cfg.d, cfg.patches(), cfg.tokens());
    let cols = g.shape(patches)[1];
    let batch = cols / n;
    let e = g.matmul(w.patch_w, patches)?;
    let e = g.add_col_bias(e, w.patch_b)?;
    let cls = g.gather(w.cls, (0..d).collect(), vec![d, 1])?;
    let joined = g.concat_cols(&[cls, e])?;
    let width = 1 + batch * n;
    let mut index = Vec::with_capacity(d * batch * tok);
    let mut pos_index = Vec::with_capacity(d * batch * tok);
    for i in 0..d {
        for b in 0..batch {
            for t in 0..tok {
                let src = if t == 0 { 0 } else { 1 + b * n + t - 1 };
                index.push(i * width + src);
                pos_index.push(i * tok + t);
            }
        }
    }
    let z = g.gather(joined, index, vec![d, batch * tok])?;
    let pos = g.gather(w.pos, pos_index, vec![d, batch * tok])?;
    g.add(z, pos)
}

/// Column-wise nodes produced by one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub input: NodeId,
    /// `LN1(Z)` in full mode, `Z` itself in paper mode.
    pub post_ln: NodeId,
    pub k: NodeId,
    pub v: NodeId,
    /// Attention block output before the residual add.
    pub post_msa: NodeId,
    /// MLP hidden activations after the GELU.
    pub hidden: NodeId,
    pub output: NodeId,
}

fn lin(g: &mut Graph, w: NodeId, b: Option<NodeId>, x: NodeId) -> Result<NodeId> {
    let y = g.matmul(w, x)?;
    match b {
        Some(b) => g.add_col_bias(y, b),
        None => Ok(y),
    }
}

/// `(W_q, b_q)` etc. with the biases dropped in paper mode.
fn bias(cfg: &ViTConfig, b: NodeId) -> Option<NodeId> {
    (cfg.mode == Mode::Full).then_some(b)
}

/// Projects token columns to queries.
pub(crate) fn project_q(g: &mut Graph, cfg: &ViTConfig, lw: &LayerParams<NodeId>, x: NodeId) -> Result<NodeId> {
    let h = pre_ln1(g, cfg, lw, x)?;
    lin(g, lw.wq, bias(cfg, lw.bq), h)
}

/// Keys and values of already normalized token columns.
pub(crate) fn project_kv(
    g: &mut Graph,
    cfg: &ViTConfig,
    lw: &LayerParams<NodeId>,
    h: NodeId,
) -> Result<(NodeId, NodeId)> {
    let k = lin(g, lw.wk, bias(cfg, lw.bk), h)?;
    let v = lin(g, lw.wv, bias(cfg, lw.bv), h)?;
    Ok((k, v))
}

pub(crate) fn pre_ln1(g: &mut Graph, cfg: &ViTConfig, lw: &LayerParams<NodeId>, x: NodeId) -> Result<NodeId> {
    match cfg.mode {
        Mode::Full => g.layernorm(x, lw.ln1_g, lw.ln1_b, LN_EPS),
        Mode::Paper => Ok(x),
    }
}

/// Attention output `x` plus the attention-sublayer output before the residual.
/// Returns `(post_msa, stream)` where `stream` feeds the MLP block.
pub(crate) fn attend(
    g: &mut Graph,
    cfg: &ViTConfig,
    lw: &LayerParams<NodeId>,
    residual: NodeId,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    batch: usize,
    queries: usize,
    keys: usize,
) -> Result<(NodeId, NodeId, NodeId)> {
    let spec = AttentionSpec {
        heads: cfg.attn_heads(),
        batch,
        queries,
        keys,
        scale: cfg.attn_scale(),
    };
    let a = g.attention(q, k, v, spec)?;
    match cfg.mode {
        Mode::Paper => Ok((a, a, a)),
        Mode::Full => {
            let o = lin(g, lw.wo, Some(lw.bo), a)?;
            let x = g.add(residual, o)?;
            Ok((a, o, x))
        }
    }
}

/// Column-wise MLP block on the residual stream `x`, with an optional
/// adapter in parallel to the MLP branch. Returns `(hidden, output)`.
pub(crate) fn mlp_block(
    g: &mut Graph,
    cfg: &ViTConfig,
    lw: &LayerParams<NodeId>,
    x: NodeId,
    adapter: Option<&AdapterBinding>,
) -> Result<(NodeId, NodeId)> {
    let h2 = match cfg.mode {
        Mode::Full => g.layernorm(x, lw.ln2_g, lw.ln2_b, LN_EPS)?,
        Mode::Paper => x,
    };
    let u = lin(g, lw.w1, Some(lw.b1), h2)?;
    let u = g.gelu(u)?;
    let mut y = lin(g, lw.w2, Some(lw.b2), u)?;
    if let Some(ad) = adapter {
        let prev = g.set_category(Category::Adapter);
        let a = ad.apply(g, h2)?;
        g.set_category(prev);
        y = g.add(y, a)?;
    }
    let out = match cfg.mode {
        Mode::Full => g.add(x, y)?,
        Mode::Paper => y,
    };
    Ok((u, out))
}

/// One transformer layer on `batch` samples of `tokens` columns each.
pub fn layer(
    g: &mut Graph,
    cfg: &ViTConfig,
    lw: &LayerParams<NodeId>,
    z: NodeId,
    batch: usize,
    tokens: usize,
    adapter: Option<&AdapterBinding>,
) -> Result<LayerNodes> {
    let h = pre_ln1(g, cfg, lw, z)?;
    let q = lin(g, lw.wq, bias(cfg, lw.bq), h)?;
    let (k, v) = project_kv(g, cfg, lw, h)?;
    let (_, post_msa, x) = attend(g, cfg, lw, z, q, k, v, batch, tokens, tokens)?;
    let (hidden, output) = mlp_block(g, cfg, lw, x, adapter)?;
    Ok(LayerNodes {
        input: z,
        post_ln: h,
        k,
        v,
        post_msa,
        hidden,
        output,
    })
}

/// Materialized taps of one layer for a single forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub input: Tensor,
    pub post_ln: Tensor,
    pub post_msa: Tensor,
    pub hidden: Tensor,
    pub output: Tensor,
}

impl LayerTrace {
    pub(crate) fn read(g: &Graph, n: &LayerNodes) -> Self {
        LayerTrace {
            input: g.value(n.input).clone(),
            post_ln: g.value(n.post_ln).clone(),
            post_msa: g.value(n.post_msa).clone(),
            hidden: g.value(n.hidden).clone(),
            output: g.value(n.output).clone(),
        }
    }
}

/// Result of a plain forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `Z_0 ..= Z_M`.
    pub z: Vec<Tensor>,
    /// CLS column of `Z_M` for every sample, `D x B`.
    pub cls: Tensor,
    pub trace: Vec<LayerTrace>,
}

/// Extracts the CLS column of every sample.
pub fn cls_columns(z: &Tensor, tokens: usize) -> Tensor {
    let (d, cols) = (z.rows(), z.cols());
    let batch = cols / tokens;
    let mut out = Vec::with_capacity(d * batch);
    for i in 0..d {
        for b in 0..batch {
            out.push(z.data()[i * cols + b * tokens]);
        }
    }
    Tensor::new(vec![d, batch], out).expect("sizes agree")
}

/// `Z_0` for each image, concatenated along columns.
pub fn patch_embed(images: &[&Tensor], w: &ViTWeights, cfg: &ViTConfig) -> Result<Tensor> {
    let mut g = Graph::inference();
    let bw = w.bind(&mut g, false);
    let p = g.input(patchify(images, cfg)?);
    let z = embed(&mut g, cfg, &bw, p)?;
    Ok(g.value(z).clone())
}

/// One layer applied to a single sample's `D x n` tokens.
pub fn layer_forward(z: &Tensor, lw: &LayerParams<Tensor>, cfg: &ViTConfig) -> Result<(Tensor, LayerTrace)> {
    let mut g = Graph::inference();
    let bl = lw.map(|t| g.input(t.clone()));
    let zi = g.input(z.clone());
    let nodes = layer(&mut g, cfg, &bl, zi, 1, z.cols(), None)?;
    Ok((g.value(nodes.output).clone(), LayerTrace::read(&g, &nodes)))
}

/// Runs the whole stack on `Z_0` holding `z0.cols() / (1 + N)` samples.
pub fn forward(z0: &Tensor, w: &ViTWeights, cfg: &ViTConfig) -> Result<Forward> {
    let tok = cfg.tokens();
    if z0.rows() != cfg.d || z0.cols() % tok != 0 {
        return Err(TensorError::shape(
            "forward",
            format!("Z0 of shape {:?} for D = {}, {tok} tokens", z0.shape(), cfg.d),
        ));
    }
    let batch = z0.cols() / tok;
    let mut g = Graph::inference();
    let mut z = g.input(z0.clone());
    let mut zs = vec![z0.clone()];
    let mut trace = Vec::with_capacity(cfg.m);
    for lw in &w.layers {
        let bl = lw.map(|t| g.input(t.clone()));
        let nodes = layer(&mut g, cfg, &bl, z, batch, tok, None)?;
        trace.push(LayerTrace::read(&g, &nodes));
        zs.push(g.value(nodes.output).clone());
        z = nodes.output;
    }
    let cls = cls_columns(zs.last().expect("Z0 present"), tok);
    Ok(Forward { z: zs, cls, trace })
}

#[cfg(test)]
mod tests;
