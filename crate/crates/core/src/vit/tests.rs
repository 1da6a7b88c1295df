use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{gelu_scalar, softmax_columns};

fn tiny(mode: Mode) -> ViTConfig {
    ViTConfig {
        d: 4,
        m: 2,
        heads: 2,
        mlp_ratio: 2,
        patch: 2,
        image: 2,
        channels: 1,
        mode,
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    uniform(&mut ChaCha8Rng::seed_from_u64(seed), shape, 1.0)
}

/// Randomizes every parameter, including biases and layernorm affines.
fn random_weights(cfg: &ViTConfig, seed: u64) -> ViTWeights {
    let mut w = ViTWeights::init(cfg, seed).unwrap();
    let mut s = seed * 1000;
    w.visit_mut(|t| {
        s += 1;
        *t = rand_t(t.shape(), s);
    });
    w
}

#[test]
fn zero_image_embeds_bias_and_cls() {
    let cfg = ViTConfig::desk();
    let mut w = random_weights(&cfg, 1);
    w.pos = Tensor::zeros(&[cfg.d, cfg.tokens()]);
    let img = Tensor::zeros(&[3, 16, 16]);
    let z = patch_embed(&[&img], &w, &cfg).unwrap();
    assert_eq!(z.shape(), &[16, 17]);
    for i in 0..cfg.d {
        assert_eq!(z.at(i, 0), w.cls.data()[i]);
        for j in 1..17 {
            assert_eq!(z.at(i, j), w.patch_b.data()[i]);
        }
    }
}

#[test]
fn one_hot_pixel_changes_one_patch() {
    let cfg = ViTConfig::desk();
    let w = random_weights(&cfg, 2);
    let zero = patch_embed(&[&Tensor::zeros(&[3, 16, 16])], &w, &cfg).unwrap();
    let mut img = Tensor::zeros(&[3, 16, 16]);
    // Channel 1, row 9, column 6: patch row 2, patch column 1.
    img.data_mut()[(16 + 9) * 16 + 6] = 1.0;
    let z = patch_embed(&[&img], &w, &cfg).unwrap();
    let changed: Vec<usize> = (0..17).filter(|&j| z.column(j) != zero.column(j)).collect();
    assert_eq!(changed, vec![1 + 2 * 4 + 1]);
}

#[test]
fn indivisible_image_is_rejected() {
    let cfg = ViTConfig::desk();
    let w = ViTWeights::init(&cfg, 0).unwrap();
    let err = patch_embed(&[&Tensor::zeros(&[3, 15, 16])], &w, &cfg).unwrap_err();
    assert!(matches!(err, TensorError::Shape { .. }));
}

#[test]
fn single_token_attention_returns_value() {
    let cfg = tiny(Mode::Paper);
    let w = random_weights(&cfg, 3);
    let lw = &w.layers[0];
    let z = rand_t(&[4, 1], 4);
    let (_, trace) = layer_forward(&z, lw, &cfg).unwrap();
    let v = lw.wv.matmul(&z).unwrap();
    assert!(trace.post_msa.bitwise_eq(&v));
}

#[test]
fn zero_key_map_forces_uniform_attention() {
    let cfg = tiny(Mode::Paper);
    let mut w = random_weights(&cfg, 5);
    w.layers[0].wk = Tensor::zeros(&[4, 4]);
    let z = rand_t(&[4, 5], 6);
    let (_, trace) = layer_forward(&z, &w.layers[0], &cfg).unwrap();
    let v = w.layers[0].wv.matmul(&z).unwrap();
    for i in 0..4 {
        let mean = v.data()[i * 5..(i + 1) * 5].iter().sum::<f64>() / 5.0;
        for j in 0..5 {
            assert!((trace.post_msa.at(i, j) - mean).abs() < 1e-12);
        }
    }
}

fn mv(w: &Tensor, b: Option<&Tensor>, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| {
            let s: f64 = (0..w.cols()).map(|j| w.at(i, j) * x[j]).sum();
            s + b.map_or(0.0, |b| b.data()[i])
        })
        .collect()
}

fn ln(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let r = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * r * g.data()[i] + b.data()[i])
        .collect()
}

/// Straight-line evaluation of one layer, column by column.
fn layer_oracle(z: &Tensor, lw: &LayerParams<Tensor>, cfg: &ViTConfig) -> Tensor {
    let (d, n) = (z.rows(), z.cols());
    let full = cfg.mode == Mode::Full;
    let heads = cfg.attn_heads();
    let dh = d / heads;
    let cols: Vec<Vec<f64>> = (0..n).map(|j| z.column(j)).collect();
    let h: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| if full { ln(c, &lw.ln1_g, &lw.ln1_b) } else { c.clone() })
        .collect();
    let opt = |b: &Tensor| if full { Some(b.clone()) } else { None };
    let (bq, bk, bv) = (opt(&lw.bq), opt(&lw.bk), opt(&lw.bv));
    let q: Vec<Vec<f64>> = h.iter().map(|c| mv(&lw.wq, bq.as_ref(), c)).collect();
    let k: Vec<Vec<f64>> = h.iter().map(|c| mv(&lw.wk, bk.as_ref(), c)).collect();
    let v: Vec<Vec<f64>> = h.iter().map(|c| mv(&lw.wv, bv.as_ref(), c)).collect();
    let mut out = Tensor::zeros(&[d, n]);
    for t in 0..n {
        let mut a = vec![0.0; d];
        for hd in 0..heads {
            let r = hd * dh..(hd + 1) * dh;
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    r.clone().map(|i| k[j][i] * q[t][i]).sum::<f64>() * cfg.attn_scale()
                })
                .collect();
            let p = softmax_columns(&Tensor::new(vec![n, 1], scores).unwrap()).unwrap();
            for i in r {
                a[i] = (0..n).map(|j| v[j][i] * p.data()[j]).sum();
            }
        }
        let x: Vec<f64> = if full {
            let o = mv(&lw.wo, Some(&lw.bo), &a);
            cols[t].iter().zip(&o).map(|(z, o)| z + o).collect()
        } else {
            a
        };
        let h2 = if full { ln(&x, &lw.ln2_g, &lw.ln2_b) } else { x.clone() };
        let u: Vec<f64> = mv(&lw.w1, Some(&lw.b1), &h2).into_iter().map(gelu_scalar).collect();
        let y = mv(&lw.w2, Some(&lw.b2), &u);
        for i in 0..d {
            out.set(i, t, if full { x[i] + y[i] } else { y[i] });
        }
    }
    out
}

#[test]
fn layer_matches_straight_line_oracle() {
    for mode in [Mode::Paper, Mode::Full] {
        let cfg = tiny(mode);
        let w = random_weights(&cfg, 7);
        let z = rand_t(&[4, 3], 8);
        let (out, _) = layer_forward(&z, &w.layers[0], &cfg).unwrap();
        let oracle = layer_oracle(&z, &w.layers[0], &cfg);
        assert!(out.max_abs_diff(&oracle) < 1e-12, "{mode:?}");
    }
}

#[test]
fn empty_stack_returns_embedded_cls() {
    let mut cfg = ViTConfig::desk();
    cfg.m = 0;
    let w = random_weights(&cfg, 9);
    let img = rand_t(&[3, 16, 16], 10);
    let z0 = patch_embed(&[&img], &w, &cfg).unwrap();
    let f = forward(&z0, &w, &cfg).unwrap();
    assert_eq!(f.cls.column(0), z0.column(0));
}

#[test]
fn forward_is_composition_of_layers() {
    for mode in [Mode::Paper, Mode::Full] {
        let mut cfg = ViTConfig::desk().with_mode(mode);
        cfg.m = 2;
        let w = random_weights(&cfg, 11);
        let img = rand_t(&[3, 16, 16], 12);
        let z0 = patch_embed(&[&img], &w, &cfg).unwrap();
        let f = forward(&z0, &w, &cfg).unwrap();
        let (z1, _) = layer_forward(&z0, &w.layers[0], &cfg).unwrap();
        let (z2, _) = layer_forward(&z1, &w.layers[1], &cfg).unwrap();
        assert!(f.z[1].bitwise_eq(&z1));
        assert!(f.z[2].bitwise_eq(&z2));
    }
}

#[test]
fn batch_columns_match_single_runs() {
    let cfg = ViTConfig::desk();
    let w = random_weights(&cfg, 13);
    let imgs: Vec<Tensor> = (0..3).map(|s| rand_t(&[3, 16, 16], 20 + s)).collect();
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let z0 = patch_embed(&refs, &w, &cfg).unwrap();
    let all = forward(&z0, &w, &cfg).unwrap();
    for (b, img) in imgs.iter().enumerate() {
        let one = forward(&patch_embed(&[img], &w, &cfg).unwrap(), &w, &cfg).unwrap();
        for m in 0..=cfg.m {
            assert!(all.z[m].columns(b * 17, (b + 1) * 17).bitwise_eq(&one.z[m]));
        }
    }
}

#[test]
fn vit_b_shapes() {
    let cfg = ViTConfig::vit_b();
    assert_eq!(cfg.patches(), 196);
    let w = ViTWeights::init(&cfg, 0).unwrap();
    let img = Tensor::zeros(&[3, 224, 224]);
    let z0 = patch_embed(&[&img], &w, &cfg).unwrap();
    let f = forward(&z0, &w, &cfg).unwrap();
    assert_eq!(f.z.len(), 13);
    for z in &f.z {
        assert_eq!(z.shape(), &[768, 197]);
    }
}

#[test]
fn weights_round_trip_bitwise() {
    let cfg = ViTConfig::desk();
    let w = ViTWeights::init(&cfg, 14).unwrap();
    let q = crate::vqt::QueryTokenSet::init(&cfg, 2, &[false, true, true, false], 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.vqtw");
    save_weights(&path, &cfg, &w, Some(&q)).unwrap();
    let back = load_weights(&path).unwrap();
    assert_eq!(back.config, cfg);
    let mut pairs = Vec::new();
    w.visit(|_, t| pairs.push(t.clone()));
    let mut i = 0;
    back.weights.visit(|_, t| {
        assert!(t.bitwise_eq(&pairs[i]));
        i += 1;
    });
    assert_eq!(back.queries.as_ref(), Some(&q));

    let plain = dir.path().join("p.vqtw");
    save_weights(&plain, &cfg, &w, None).unwrap();
    assert!(load_weights(&plain).unwrap().queries.is_none());
}

#[test]
fn truncated_and_corrupt_files_are_format_errors() {
    let cfg = ViTConfig::desk();
    let w = ViTWeights::init(&cfg, 15).unwrap();
    let mut buf = Vec::new();
    write_weights(&mut buf, &cfg, &w, None).unwrap();
    for cut in [0, 3, 10, 40, buf.len() / 2, buf.len() - 1] {
        let err = read_weights(&buf[..cut]).err().expect("truncated file must fail");
        assert!(matches!(err, FormatError::Truncated(_)), "cut {cut}: {err}");
    }
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_weights(bad.as_slice()), Err(FormatError::BadMagic { .. })));
    let mut bad = buf.clone();
    bad[4] = 9;
    assert!(matches!(read_weights(bad.as_slice()), Err(FormatError::Version(9))));
    let mut bad = buf;
    bad.extend_from_slice(b"JUNK");
    assert!(matches!(read_weights(bad.as_slice()), Err(FormatError::BadMagic { .. })));
}

#[test]
fn mismatched_config_names_tensor() {
    let a = ViTConfig::desk();
    let mut b = a.clone();
    b.mlp_ratio = 2;
    let w = ViTWeights::init(&a, 16).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.vqtw");
    save_weights(&path, &a, &w, None).unwrap();
    let err = load_weights_expecting(&path, &b).err().unwrap();
    assert!(err.to_string().contains("layers.0.w1"), "{err}");
    let mut c = a.clone();
    c.m = 2;
    let err = load_weights_expecting(&path, &c).err().unwrap();
    assert!(err.to_string().contains("layers.2"), "{err}");
    assert!(load_weights_expecting(&path, &a).is_ok());
}

#[test]
fn backbone_count_is_mode_aware() {
    let cfg = ViTConfig::desk();
    let full = backbone_param_count(&cfg);
    let paper = backbone_param_count(&cfg.clone().with_mode(Mode::Paper));
    let d = cfg.d;
    let per_layer_extra = 4 * d + 3 * d + d * d + d;
    assert_eq!(full - paper, cfg.m * per_layer_extra);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn token_permutation_is_equivariant(seed in 0u64..1000, perm_seed in 0u64..1000, full in any::<bool>()) {
        let cfg = tiny(if full { Mode::Full } else { Mode::Paper });
        let w = random_weights(&cfg, seed);
        let n = 5;
        let z = rand_t(&[4, n], seed + 1);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let mut zp = Tensor::zeros(&[4, n]);
        for (j, &p) in perm.iter().enumerate() {
            for i in 0..4 {
                zp.set(i, j, z.at(i, p));
            }
        }
        let (out, _) = layer_forward(&z, &w.layers[0], &cfg).unwrap();
        let (outp, _) = layer_forward(&zp, &w.layers[0], &cfg).unwrap();
        for (j, &p) in perm.iter().enumerate() {
            for i in 0..4 {
                prop_assert!((outp.at(i, j) - out.at(i, p)).abs() < 1e-12);
            }
        }
    }
}
