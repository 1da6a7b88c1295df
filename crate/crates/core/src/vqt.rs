//! Query-only tokens.
//!
//! Each active layer `m` gets learnable tokens `P_{m-1}` (`D x T`). They are
//! projected by the layer's query map only and attend over the keys and
//! values of the original tokens, so the original outputs of the layer are
//! untouched. The attended columns then run through the layer's column-wise
//! pipeline to give the summarized features `Z'_m`. Tokens are not carried
//! into the next layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Category, Graph, NodeId};
use crate::baselines::AdapterBinding;
use crate::tensor::{Result, Tensor, TensorError};
use crate::vit::{self, glorot, uniform, LayerParams, Mode, ViTConfig};

/// Per-layer query tokens; `None` marks a layer without tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTokenSet {
    t: usize,
    tokens: Vec<Option<Tensor>>,
}

impl QueryTokenSet {
    /// Tokens drawn from `uniform(-r, r)`, `r = sqrt(6 / (D + D))`.
    pub fn init(cfg: &ViTConfig, t: usize, active: &[bool], seed: u64) -> Result<Self> {
        if active.len() != cfg.m {
            return Err(TensorError::Contract(format!(
                "{} active flags for {} layers",
                active.len(),
                cfg.m
            )));
        }
        if t == 0 && active.iter().any(|&a| a) {
            return Err(TensorError::Contract("active layers need T >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = glorot(cfg.d, cfg.d);
        let tokens = active
            .iter()
            .map(|&a| a.then(|| uniform(&mut rng, &[cfg.d, t], r)))
            .collect();
        Ok(QueryTokenSet { t, tokens })
    }

    pub fn from_parts(t: usize, tokens: Vec<Option<Tensor>>) -> Result<Self> {
        for p in tokens.iter().flatten() {
            if p.shape().len() != 2 || p.cols() != t {
                return Err(TensorError::shape(
                    "query tokens",
                    format!("{:?} for T = {t}", p.shape()),
                ));
            }
            if !p.all_finite() {
                return Err(TensorError::NonFinite { op: "query tokens" });
            }
        }
        if t == 0 && tokens.iter().any(Option::is_some) {
            return Err(TensorError::Contract("active layers need T >= 1".into()));
        }
        Ok(QueryTokenSet { t, tokens })
    }

    pub fn layers(&self) -> usize {
        self.tokens.len()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn tokens(&self) -> &[Option<Tensor>] {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut [Option<Tensor>] {
        &mut self.tokens
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&m| self.tokens[m].is_some()).collect()
    }
}

/// `|H_all| = layers * D * T + D`.
pub fn feature_dim(layers: usize, d: usize, t: usize) -> usize {
    layers * d * t + d
}

/// Query tokens plus the head rows for the summarized features:
/// `T D M + T D M C`.
pub fn vqt_param_count(d: usize, m: usize, t: usize, classes: usize) -> usize {
    t * d * m + t * d * m * classes
}

/// Nodes of one layer's query branch.
#[derive(Debug, Clone, Copy)]
pub struct QueryNodes {
    /// Attention output of the query columns, before any projection or MLP.
    pub msa: NodeId,
    /// Summarized features `Z'`, `D x (B T)`.
    pub out: NodeId,
}

/// Replicates `D x T` columns for every sample of the batch.
pub(crate) fn tile(g: &mut Graph, x: NodeId, batch: usize) -> Result<NodeId> {
    let (d, t) = (g.shape(x)[0], g.shape(x)[1]);
    let mut index = Vec::with_capacity(d * batch * t);
    for i in 0..d {
        for _ in 0..batch {
            index.extend((0..t).map(|j| i * t + j));
        }
    }
    g.gather(x, index, vec![d, batch * t])
}

/// Runs `P` through layer `lw` against keys/values `k`, `v` of `batch`
/// samples with `keys` columns each.
#[allow(clippy::too_many_arguments)]
pub fn query_branch(
    g: &mut Graph,
    cfg: &ViTConfig,
    lw: &LayerParams<NodeId>,
    p: NodeId,
    k: NodeId,
    v: NodeId,
    batch: usize,
    keys: usize,
    adapter: Option<&AdapterBinding>,
) -> Result<QueryNodes> {
    let prev = g.set_category(Category::QueryBranch);
    let res = (|| {
        let t = g.shape(p)[1];
        let q = vit::project_q(g, cfg, lw, p)?;
        let q = tile(g, q, batch)?;
        let residual = match cfg.mode {
            Mode::Full => tile(g, p, batch)?,
            Mode::Paper => q,
        };
        let (msa, _, x) = vit::attend(g, cfg, lw, residual, q, k, v, batch, t, keys)?;
        let (_, out) = vit::mlp_block(g, cfg, lw, x, adapter)?;
        Ok(QueryNodes { msa, out })
    })();
    g.set_category(prev);
    res
}

/// Outputs of one layer with query tokens attached, for a single sample.
#[derive(Debug, Clone)]
pub struct VqtLayerOut {
    pub z_next: Tensor,
    pub z_prime: Tensor,
    pub query_msa: Tensor,
}

/// One layer on a single sample's `D x n` tokens with `D x T` query tokens.
pub fn vqt_layer_forward(
    z_prev: &Tensor,
    p_prev: &Tensor,
    lw: &LayerParams<Tensor>,
    cfg: &ViTConfig,
) -> Result<VqtLayerOut> {
    let mut g = Graph::inference();
    let bl = lw.map(|t| g.input(t.clone()));
    let z = g.input(z_prev.clone());
    let p = g.input(p_prev.clone());
    let n = z_prev.cols();
    let nodes = vit::layer(&mut g, cfg, &bl, z, 1, n, None)?;
    let q = query_branch(&mut g, cfg, &bl, p, nodes.k, nodes.v, 1, n, None)?;
    Ok(VqtLayerOut {
        z_next: g.value(nodes.output).clone(),
        z_prime: g.value(q.out).clone(),
        query_msa: g.value(q.msa).clone(),
    })
}

/// Summarized features of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// `Z'_m` of each active layer, in layer order, each `D x T`.
    pub z_prime: Vec<Tensor>,
    pub cls: Vec<f64>,
}

impl FeatureBundle {
    /// Layer-major, then `d * T + t` within a layer, CLS last.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for z in &self.z_prime {
            out.extend_from_slice(z.data());
        }
        out.extend_from_slice(&self.cls);
        out
    }
}

/// Runs the frozen backbone with query tokens on a batch of images.
pub fn collect_features(
    images: &[&Tensor],
    weights: &vit::ViTWeights,
    queries: &QueryTokenSet,
    cfg: &ViTConfig,
) -> Result<Vec<FeatureBundle>> {
    if queries.layers() != cfg.m {
        return Err(TensorError::Contract(format!(
            "query tokens for {} layers, config has {}",
            queries.layers(),
            cfg.m
        )));
    }
    let batch = images.len();
    let tok = cfg.tokens();
    let mut g = Graph::inference();
    let bw = weights.bind(&mut g, false);
    let patches = g.input(vit::patchify(images, cfg)?);
    let mut z = vit::embed(&mut g, cfg, &bw, patches)?;
    let mut primes = Vec::new();
    for (m, lw) in bw.layers.iter().enumerate() {
        let nodes = vit::layer(&mut g, cfg, lw, z, batch, tok, None)?;
        if let Some(p) = &queries.tokens()[m] {
            let p = g.input(p.clone());
            let q = query_branch(&mut g, cfg, lw, p, nodes.k, nodes.v, batch, tok, None)?;
            primes.push(q.out);
        }
        z = nodes.output;
    }
    let t = queries.t();
    let cls = vit::cls_columns(g.value(z), tok);
    Ok((0..batch)
        .map(|b| FeatureBundle {
            z_prime: primes.iter().map(|&p| g.value(p).columns(b * t, (b + 1) * t)).collect(),
            cls: cls.column(b),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_columns;
    use crate::vit::{forward, patch_embed, ViTWeights};

    fn setup(mode: Mode) -> (ViTConfig, ViTWeights) {
        let cfg = ViTConfig::desk().with_mode(mode);
        let w = ViTWeights::init(&cfg, 7).unwrap();
        (cfg, w)
    }

    fn image(cfg: &ViTConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(&mut rng, &[cfg.channels, cfg.image, cfg.image], 1.0)
    }

    #[test]
    fn feature_dim_formula() {
        assert_eq!(feature_dim(12, 768, 1), 9984);
        assert_eq!(feature_dim(0, 16, 3), 16);
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(vqt_param_count(768, 12, 2, 50), 940_032);
        assert_eq!(vqt_param_count(768, 12, 4, 50), 1_880_064);
        assert_eq!(vqt_param_count(768, 12, 0, 50), 0);
    }

    #[test]
    fn layer_output_is_intact() {
        for mode in [Mode::Paper, Mode::Full] {
            let (cfg, w) = setup(mode);
            let z0 = patch_embed(&[&image(&cfg, 1)], &w, &cfg).unwrap();
            let (plain, _) = vit::layer_forward(&z0, &w.layers[0], &cfg).unwrap();
            for t in [1, 4] {
                let q = QueryTokenSet::init(&cfg, t, &[true; 4], 3).unwrap();
                let p = q.tokens()[0].as_ref().unwrap();
                let out = vqt_layer_forward(&z0, p, &w.layers[0], &cfg).unwrap();
                assert!(out.z_next.bitwise_eq(&plain));
                assert_eq!(out.z_prime.shape(), &[cfg.d, t]);
            }
        }
    }

    #[test]
    fn zero_queries_pool_values_in_paper_mode() {
        let (cfg, w) = setup(Mode::Paper);
        let z0 = patch_embed(&[&image(&cfg, 2)], &w, &cfg).unwrap();
        let p = Tensor::zeros(&[cfg.d, 2]);
        let out = vqt_layer_forward(&z0, &p, &w.layers[0], &cfg).unwrap();
        let v = w.layers[0].wv.matmul(&z0).unwrap();
        let n = v.cols() as f64;
        for i in 0..cfg.d {
            let mean: f64 = (0..v.cols()).map(|j| v.at(i, j)).sum::<f64>() / n;
            for t in 0..2 {
                assert!((out.query_msa.at(i, t) - mean).abs() < 1e-12);
            }
        }
    }

    /// Straight-line scalar evaluation of the paper-mode query column.
    fn scalar_oracle(z: &Tensor, p: &Tensor, lw: &LayerParams<Tensor>) -> Tensor {
        let d = z.rows();
        let n = z.cols();
        let t = p.cols();
        let mv = |w: &Tensor, x: &[f64]| -> Vec<f64> {
            (0..w.rows()).map(|i| (0..w.cols()).map(|j| w.at(i, j) * x[j]).sum()).collect()
        };
        let keys: Vec<Vec<f64>> = (0..n).map(|j| mv(&lw.wk, &z.column(j))).collect();
        let vals: Vec<Vec<f64>> = (0..n).map(|j| mv(&lw.wv, &z.column(j))).collect();
        let mut out = Tensor::zeros(&[d, t]);
        for c in 0..t {
            let q = mv(&lw.wq, &p.column(c));
            let scores: Vec<f64> = keys
                .iter()
                .map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let s = softmax_columns(&Tensor::new(vec![n, 1], scores).unwrap()).unwrap();
            let a: Vec<f64> = (0..d).map(|i| (0..n).map(|j| vals[j][i] * s.data()[j]).sum()).collect();
            let h: Vec<f64> = mv(&lw.w1, &a)
                .iter()
                .zip(lw.b1.data())
                .map(|(x, b)| crate::tensor::gelu_scalar(x + b))
                .collect();
            let y: Vec<f64> = mv(&lw.w2, &h).iter().zip(lw.b2.data()).map(|(x, b)| x + b).collect();
            for i in 0..d {
                out.set(i, c, y[i]);
            }
        }
        out
    }

    #[test]
    fn paper_mode_query_column_matches_scalar_oracle() {
        let cfg = ViTConfig {
            d: 4,
            m: 1,
            heads: 1,
            mlp_ratio: 2,
            patch: 2,
            image: 2,
            channels: 1,
            mode: Mode::Paper,
        };
        let w = ViTWeights::init(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = uniform(&mut rng, &[4, 3], 1.0);
        let p = uniform(&mut rng, &[4, 2], 1.0);
        let out = vqt_layer_forward(&z, &p, &w.layers[0], &cfg).unwrap();
        let oracle = scalar_oracle(&z, &p, &w.layers[0]);
        assert!(out.z_prime.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn collect_features_keeps_cls_and_dimension() {
        let (cfg, w) = setup(Mode::Full);
        let imgs = [image(&cfg, 3), image(&cfg, 4)];
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let q = QueryTokenSet::init(&cfg, 2, &[false, true, false, true], 9).unwrap();
        let feats = collect_features(&refs, &w, &q, &cfg).unwrap();
        let z0 = patch_embed(&refs, &w, &cfg).unwrap();
        let plain = forward(&z0, &w, &cfg).unwrap();
        for (b, f) in feats.iter().enumerate() {
            assert_eq!(f.flatten().len(), feature_dim(2, cfg.d, 2));
            let expect = plain.cls.column(b);
            assert!(f.cls.iter().zip(&expect).all(|(a, e)| a.to_bits() == e.to_bits()));
        }
        let none = QueryTokenSet::init(&cfg, 1, &[false; 4], 9).unwrap();
        let f = collect_features(&refs, &w, &none, &cfg).unwrap();
        assert_eq!(f[0].flatten(), f[0].cls);
        let again = collect_features(&refs, &w, &q, &cfg).unwrap();
        assert_eq!(feats, again);
    }

    #[test]
    fn batched_and_single_features_agree_bitwise() {
        let (cfg, w) = setup(Mode::Full);
        let imgs = [image(&cfg, 5), image(&cfg, 6), image(&cfg, 7)];
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let q = QueryTokenSet::init(&cfg, 3, &[true; 4], 1).unwrap();
        let all = collect_features(&refs, &w, &q, &cfg).unwrap();
        for (b, img) in imgs.iter().enumerate() {
            let one = collect_features(&[img], &w, &q, &cfg).unwrap();
            assert_eq!(one[0], all[b]);
        }
    }

    #[test]
    fn rejects_tokens_with_wrong_width() {
        let bad = QueryTokenSet::from_parts(2, vec![Some(Tensor::zeros(&[4, 3]))]);
        assert!(bad.is_err());
    }
}
