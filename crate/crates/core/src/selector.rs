//! Group-lasso heads, feature importance and fraction selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

/// Linear classifier `x W + b` on row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `dim x C`.
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearHead {
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.w)?;
        let c = self.b.len();
        for row in y.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(self.b.data()) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn accuracy(&self, x: &Tensor, y: &[usize]) -> Result<f64> {
        let pred = crate::model::argmax_rows(&self.logits(x)?);
        Ok(accuracy(&pred, y))
    }
}

pub fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

/// Row-wise group soft-threshold: rows with norm at most `thresh` become
/// zero, others shrink towards zero by `thresh`.
pub fn prox_rows(w: &mut Tensor, thresh: f64) {
    let c = w.cols();
    for row in w.data_mut().chunks_mut(c) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= thresh {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            let s = 1.0 - thresh / norm;
            row.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
fn ce_grad(logits: &Tensor, y: &[usize]) -> (f64, Tensor) {
    let c = logits.cols();
    let n = y.len() as f64;
    let mut g = logits.clone();
    let mut loss = 0.0;
    for (row, &label) in g.data_mut().chunks_mut(c).zip(y) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        loss -= (row[label] / z).ln();
        for v in row.iter_mut() {
            *v /= z * n;
        }
        row[label] -= 1.0 / n;
    }
    (loss / n, g)
}

/// Largest squared singular value of `[x, 1]` by power iteration.
fn sigma_max_sq(x: &Tensor) -> f64 {
    let (n, d) = (x.rows(), x.cols());
    let mut v = vec![1.0 / ((d + 1) as f64).sqrt(); d + 1];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut u = vec![0.0; n];
        for (i, ui) in u.iter_mut().enumerate() {
            let row = &x.data()[i * d..(i + 1) * d];
            *ui = row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d];
        }
        let mut w = vec![0.0; d + 1];
        for (i, &ui) in u.iter().enumerate() {
            let row = &x.data()[i * d..(i + 1) * d];
            for (wj, a) in w.iter_mut().zip(row) {
                *wj += a * ui;
            }
            w[d] += ui;
        }
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = w.into_iter().map(|a| a / norm).collect();
        if (next - lambda).abs() <= 1e-10 * next {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Minimizes mean cross-entropy plus `lambda * sum_i ||W_i||_2` by
/// accelerated proximal gradient with step `1 / L`.
pub fn train_head_group_lasso(x: &Tensor, y: &[usize], classes: usize, lambda: f64, steps: usize) -> Result<LinearHead> {
    if x.shape().len() != 2 || x.rows() != y.len() || y.is_empty() {
        return Err(TensorError::shape(
            "group_lasso",
            format!("features {:?} for {} labels", x.shape(), y.len()),
        ));
    }
    if !x.all_finite() {
        return Err(TensorError::NonFinite { op: "group_lasso features" });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(TensorError::Contract(format!("lambda {lambda}")));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(TensorError::Contract(format!("label {bad} with {classes} classes")));
    }
    let (n, d) = (x.rows(), x.cols());
    let lip = 0.5 * sigma_max_sq(x) / n as f64;
    let step = if lip > 0.0 { 1.0 / lip } else { 1.0 };
    let xt = x.transpose();
    let mut head = LinearHead {
        w: Tensor::zeros(&[d, classes]),
        b: Tensor::zeros(&[classes]),
    };
    let mut prev = head.clone();
    let mut momentum = 1.0f64;
    for _ in 0..steps {
        let next_m = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        let beta = (momentum - 1.0) / next_m;
        momentum = next_m;
        let look = LinearHead {
            w: extrapolate(&head.w, &prev.w, beta),
            b: extrapolate(&head.b, &prev.b, beta),
        };
        let (_, g) = ce_grad(&look.logits(x)?, y);
        let gw = xt.matmul(&g)?;
        let mut gb = vec![0.0; classes];
        for row in g.data().chunks(classes) {
            for (a, v) in gb.iter_mut().zip(row) {
                *a += v;
            }
        }
        let mut w = look.w;
        for (a, v) in w.data_mut().iter_mut().zip(gw.data()) {
            *a -= step * v;
        }
        prox_rows(&mut w, step * lambda);
        let mut b = look.b;
        for (a, v) in b.data_mut().iter_mut().zip(&gb) {
            *a -= step * v;
        }
        prev = std::mem::replace(&mut head, LinearHead { w, b });
    }
    if !head.w.all_finite() || !head.b.all_finite() {
        return Err(TensorError::NonFinite { op: "group_lasso" });
    }
    Ok(head)
}

fn extrapolate(cur: &Tensor, prev: &Tensor, beta: f64) -> Tensor {
    let mut out = cur.clone();
    for (o, p) in out.data_mut().iter_mut().zip(prev.data()) {
        *o += beta * (*o - p);
    }
    out
}

/// Mean cross-entropy of a head, for tests and diagnostics.
pub fn head_loss(head: &LinearHead, x: &Tensor, y: &[usize]) -> Result<f64> {
    Ok(ce_grad(&head.logits(x)?, y).0)
}

/// Row norms of `W`.
pub fn importance(w: &Tensor) -> Vec<f64> {
    w.data()
        .chunks(w.cols())
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(TensorError::Contract(format!("fraction {f} outside (0, 1]")))
    }
}

/// Indices of the top `round(F * len)` scores, ties to the lower index,
/// returned ascending.
pub fn select_fraction(scores: &[f64], f: f64) -> Result<Vec<usize>> {
    check_fraction(f)?;
    let k = (f * scores.len() as f64).round() as usize;
    Ok(top_k(scores, k))
}

fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..k.min(order.len())].to_vec();
    kept.sort_unstable();
    kept
}

/// How the trailing CLS block is treated by selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClsPolicy {
    /// CLS columns are always kept; `F` applies to the other columns.
    #[default]
    AlwaysKeep,
    /// CLS columns compete with every other column.
    Selectable,
}

/// Selection over features whose last `cls` columns form the CLS block.
pub fn select_with_policy(scores: &[f64], f: f64, cls: usize, policy: ClsPolicy) -> Result<Vec<usize>> {
    check_fraction(f)?;
    match policy {
        ClsPolicy::Selectable => select_fraction(scores, f),
        ClsPolicy::AlwaysKeep => {
            let split = scores.len().saturating_sub(cls);
            let mut kept = select_fraction(&scores[..split], f)?;
            kept.extend(split..scores.len());
            Ok(kept)
        }
    }
}

/// Columns `kept` of row-major `x`.
pub fn restrict_columns(x: &Tensor, kept: &[usize]) -> Tensor {
    let d = x.cols();
    let data = x
        .data()
        .chunks(d)
        .flat_map(|row| kept.iter().map(move |&j| row[j]))
        .collect();
    Tensor::new(vec![x.rows(), kept.len()], data).expect("sizes agree")
}

/// Fresh unregularized head on the kept columns.
pub fn retrain_selected(x: &Tensor, y: &[usize], classes: usize, kept: &[usize], steps: usize) -> Result<LinearHead> {
    if kept.is_empty() {
        return Err(TensorError::Contract("empty selection".into()));
    }
    if let Some(&bad) = kept.iter().find(|&&j| j >= x.cols()) {
        return Err(TensorError::Contract(format!("column {bad} of {}", x.cols())));
    }
    train_head_group_lasso(&restrict_columns(x, kept), y, classes, 0.0, steps)
}

/// Mean importance per block; the last block is CLS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    pub per_layer: Vec<f64>,
    pub cls: f64,
}

/// Block means of `scores` laid out as layer blocks of the given widths
/// followed by a CLS block of `cls` columns.
pub fn layer_importance(scores: &[f64], blocks: &[usize], cls: usize) -> Result<LayerImportance> {
    let body: usize = blocks.iter().sum();
    if body + cls != scores.len() || blocks.contains(&0) {
        return Err(TensorError::Contract(format!(
            "{} scores do not split into blocks {blocks:?} and {cls} CLS columns",
            scores.len()
        )));
    }
    let mean = |s: &[f64]| if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 };
    let mut per_layer = Vec::with_capacity(blocks.len());
    let mut off = 0;
    for &w in blocks {
        per_layer.push(mean(&scores[off..off + w]));
        off += w;
    }
    Ok(LayerImportance {
        per_layer,
        cls: mean(&scores[body..]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub scores: Vec<f64>,
    pub kept: Vec<usize>,
    pub per_layer: Vec<f64>,
    pub cls: f64,
    /// Widths of the layer blocks, then of the CLS block.
    pub blocks: Vec<usize>,
    pub cls_width: usize,
    #[serde(rename = "F")]
    pub f: f64,
    pub lambda: f64,
    pub cls_policy: ClsPolicy,
}

impl SelectionReport {
    pub fn layer_importance(&self) -> Result<LayerImportance> {
        layer_importance(&self.scores, &self.blocks, self.cls_width)
    }

    pub fn new(scores: Vec<f64>, f: f64, lambda: f64, blocks: &[usize], cls: usize, policy: ClsPolicy) -> Result<Self> {
        let kept = select_with_policy(&scores, f, cls, policy)?;
        let li = layer_importance(&scores, blocks, cls)?;
        Ok(SelectionReport {
            scores,
            kept,
            per_layer: li.per_layer,
            cls: li.cls,
            blocks: blocks.to_vec(),
            cls_width: cls,
            f,
            lambda,
            cls_policy: policy,
        })
    }
}

/// Gaussian features where the label is the sign of `x[a] + x[b]`.
pub fn planted_features(n: usize, dim: usize, informative: (usize, usize), seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = Tensor::new(vec![n, dim], data).expect("sized");
    let y = (0..n)
        .map(|i| usize::from(x.at(i, informative.0) + x.at(i, informative.1) > 0.0))
        .collect();
    (x, y)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn prox_zeroes_small_rows_and_shrinks_large_ones() {
        let mut w = Tensor::from_rows(&[vec![0.3, 0.4], vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        prox_rows(&mut w, 0.5);
        assert_eq!(&w.data()[..2], &[0.0, 0.0]);
        assert!((w.at(1, 0) - 2.7).abs() < 1e-15 && (w.at(1, 1) - 3.6).abs() < 1e-15);
        assert_eq!(&w.data()[4..], &[0.0, 0.0]);
    }

    #[test]
    fn huge_lambda_kills_every_row() {
        let (x, y) = planted_features(100, 6, (1, 2), 0);
        let h = train_head_group_lasso(&x, &y, 2, 1e3, 50).unwrap();
        assert!(h.w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_lambda_matches_plain_logistic_regression() {
        let (x, mut y) = planted_features(200, 4, (0, 1), 1);
        for label in y.iter_mut().step_by(5) {
            *label = 1 - *label;
        }
        let lasso = train_head_group_lasso(&x, &y, 2, 0.0, 400).unwrap();
        let plain = plain_gd(&x, &y, 2, 20_000);
        let la = head_loss(&lasso, &x, &y).unwrap();
        let lp = head_loss(&plain, &x, &y).unwrap();
        assert!((la - lp).abs() < 1e-3, "{la} vs {lp}");
        assert_eq!(lasso.accuracy(&x, &y).unwrap(), plain.accuracy(&x, &y).unwrap());
    }

    fn plain_gd(x: &Tensor, y: &[usize], c: usize, steps: usize) -> LinearHead {
        let mut h = LinearHead {
            w: Tensor::zeros(&[x.cols(), c]),
            b: Tensor::zeros(&[c]),
        };
        let xt = x.transpose();
        for _ in 0..steps {
            let (_, g) = ce_grad(&h.logits(x).unwrap(), y);
            let gw = xt.matmul(&g).unwrap();
            for (a, v) in h.w.data_mut().iter_mut().zip(gw.data()) {
                *a -= 0.5 * v;
            }
            for row in g.data().chunks(c) {
                for (a, v) in h.b.data_mut().iter_mut().zip(row) {
                    *a -= 0.5 * v;
                }
            }
        }
        h
    }

    #[test]
    fn planted_rows_have_the_largest_norms() {
        for seed in 0..3 {
            let (x, y) = planted_features(500, 20, (3, 7), seed);
            let h = train_head_group_lasso(&x, &y, 2, 1e-2, 300).unwrap();
            let s = importance(&h.w);
            assert_eq!(top_k(&s, 2), vec![3, 7], "seed {seed}: {s:?}");
        }
    }

    #[test]
    fn select_fraction_examples() {
        assert_eq!(select_fraction(&[5.0, 1.0, 9.0, 1.0], 0.5).unwrap(), vec![0, 2]);
        assert_eq!(select_fraction(&[1.0; 5], 1.0).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_fraction(&[1.0; 4], 0.5).unwrap(), vec![0, 1]);
        assert!(select_fraction(&[1.0], 0.0).is_err());
        assert!(select_fraction(&[1.0], 1.5).is_err());
        let scores: Vec<f64> = (0..9984).map(|i| (i * 7919 % 9984) as f64).collect();
        assert_eq!(select_fraction(&scores, 0.7).unwrap().len(), 6989);
    }

    #[test]
    fn cls_policy_keeps_cls() {
        let s = [5.0, 1.0, 9.0, 1.0, 0.0, 0.0];
        assert_eq!(select_with_policy(&s, 0.5, 2, ClsPolicy::AlwaysKeep).unwrap(), vec![0, 2, 4, 5]);
        assert_eq!(select_with_policy(&s, 0.5, 2, ClsPolicy::Selectable).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn retrain_rejects_empty_and_separates_one_feature() {
        let x = Tensor::from_rows(&[vec![0.0, -1.0], vec![5.0, -2.0], vec![0.1, 1.0], vec![7.0, 2.0]]).unwrap();
        let y = [0, 0, 1, 1];
        assert!(retrain_selected(&x, &y, 2, &[], 10).is_err());
        let h = retrain_selected(&x, &y, 2, &[1], 200).unwrap();
        assert_eq!(h.accuracy(&restrict_columns(&x, &[1]), &y).unwrap(), 1.0);
    }

    #[test]
    fn planted_columns_alone_train_as_well_as_all() {
        let (x, y) = planted_features(500, 20, (3, 7), 4);
        let all = retrain_selected(&x, &y, 2, &(0..20).collect::<Vec<_>>(), 300).unwrap();
        let two = retrain_selected(&x, &y, 2, &[3, 7], 300).unwrap();
        let a = all.accuracy(&x, &y).unwrap();
        let b = two.accuracy(&restrict_columns(&x, &[3, 7]), &y).unwrap();
        assert!(b >= a - 0.01, "{b} vs {a}");
    }

    #[test]
    fn layer_importance_is_block_means() {
        let li = layer_importance(&[1.0; 10], &[2; 4], 2).unwrap();
        assert_eq!(li.per_layer, vec![1.0; 4]);
        assert_eq!(li.cls, 1.0);
        let mut s = vec![0.0; 10];
        s[6] = 3.0;
        s[7] = 1.0;
        let li = layer_importance(&s, &[2; 4], 2).unwrap();
        assert_eq!(li.per_layer, vec![0.0, 0.0, 0.0, 2.0]);
        assert!(layer_importance(&[1.0; 9], &[2; 4], 2).is_err());
    }

    #[test]
    fn non_finite_features_are_rejected() {
        let x = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        let err = train_head_group_lasso(&x, &[0], 2, 0.0, 1).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    proptest! {
        #[test]
        fn selection_is_monotone(scores in proptest::collection::vec(0.0f64..4.0, 1..60), a in 0.01f64..1.0, b in 0.01f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let small = select_fraction(&scores, lo).unwrap();
            let large = select_fraction(&scores, hi).unwrap();
            prop_assert!(small.iter().all(|i| large.contains(i)));
        }

        #[test]
        fn layer_importance_matches_block_mean(scores in proptest::collection::vec(0.0f64..1.0, 3..4).prop_flat_map(|_| proptest::collection::vec(0.0f64..1.0, 14))) {
            let li = layer_importance(&scores, &[3; 4], 2).unwrap();
            for (m, v) in li.per_layer.iter().enumerate() {
                let want = scores[m * 3..m * 3 + 3].iter().sum::<f64>() / 3.0;
                prop_assert!((v - want).abs() < 1e-15);
            }
        }
    }
}
