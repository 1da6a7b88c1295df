//! Synthetic pretext and downstream tasks with a planted intermediate-layer
//! signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{Model, ModelSpec, Strategy};
use crate::tensor::{Result, Tensor, TensorError};
use crate::train::harness::{fit, Hyper};
use crate::vit::{self, ViTConfig, ViTWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub teacher_seed: u64,
    pub classes: usize,
    pub pretext_classes: usize,
    pub train: usize,
    pub test: usize,
    pub pretext: usize,
    /// Layer whose token-mean decides the downstream label; `M / 2` if unset.
    pub signal_layer: Option<usize>,
    pub label_noise: f64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            teacher_seed: 0,
            classes: 5,
            pretext_classes: 10,
            train: 1000,
            test: 500,
            pretext: 1000,
            signal_layer: None,
            label_noise: 0.0,
            pretrain_steps: 300,
            pretrain_lr: 1e-3,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn layer(&self, cfg: &ViTConfig) -> usize {
        self.signal_layer.unwrap_or(cfg.m / 2)
    }

    pub fn validate(&self, cfg: &ViTConfig) -> Result<()> {
        let k = self.layer(cfg);
        if k < 1 || k > cfg.m {
            return Err(TensorError::Contract(format!("signal layer {k} outside 1..={}", cfg.m)));
        }
        if self.classes < 2 || self.pretext_classes < 2 {
            return Err(TensorError::Contract("tasks need at least two classes".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(TensorError::Contract(format!("label noise {}", self.label_noise)));
        }
        Ok(())
    }
}

/// Linear readout of standardized features with class-balancing biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `C` rows of length `D`.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Readout {
    /// Random readout whose biases are tuned so classes come out balanced
    /// on `features`.
    pub fn fit(features: &[Vec<f64>], classes: usize, rng: &mut ChaCha8Rng) -> Readout {
        let d = features[0].len();
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    1.0 / var.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let w = (0..classes)
            .map(|_| {
                (0..d)
                    .map(|_| StandardNormal.sample(rng))
                    .map(|v: f64| v / (d as f64).sqrt())
                    .collect()
            })
            .collect();
        let mut r = Readout {
            mean,
            scale,
            w,
            b: vec![0.0; classes],
        };
        let target = 1.0 / classes as f64;
        for _ in 0..300 {
            let mut counts = vec![0.0; classes];
            for f in features {
                counts[r.label(f)] += 1.0;
            }
            for (b, c) in r.b.iter_mut().zip(&counts) {
                *b += 0.5 * (target - c / n);
            }
        }
        r
    }

    pub fn scores(&self, f: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = f
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) * s)
            .collect();
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(&z).map(|(a, c)| a * c).sum::<f64>() + b)
            .collect()
    }

    pub fn label(&self, f: &[f64]) -> usize {
        let s = self.scores(f);
        let mut best = 0;
        for (j, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = j;
            }
        }
        best
    }
}

/// Seeded Gaussian images with f32-representable values.
pub fn random_images(cfg: &ViTConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let shape = [cfg.channels, cfg.image, cfg.image];
    let len: usize = shape.iter().product();
    (0..n)
        .map(|_| {
            let data = (0..len).map(|_| StandardNormal.sample(&mut *rng)).map(|v: f64| v as f32 as f64).collect();
            Tensor::new(shape.to_vec(), data).expect("sized")
        })
        .collect()
}

/// Gaussian images with uniformly random labels.
pub fn random_dataset(cfg: &ViTConfig, n: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = random_images(cfg, n, &mut rng);
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    Dataset {
        channels: cfg.channels,
        height: cfg.image,
        width: cfg.image,
        classes,
        images,
        labels,
    }
}

/// Token-mean of `Z_k` (`k = 0` is the embedding) for every image, and the
/// final CLS vector.
pub fn layer_summaries(cfg: &ViTConfig, w: &ViTWeights, images: &[Tensor], k: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let tok = cfg.tokens();
    let mut means = Vec::with_capacity(images.len());
    let mut cls = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let z0 = vit::patch_embed(&refs, w, cfg)?;
        let fw = vit::forward(&z0, w, cfg)?;
        let zk = &fw.z[k];
        for b in 0..chunk.len() {
            let s = zk.columns(b * tok, (b + 1) * tok);
            means.push((0..cfg.d).map(|i| s.data()[i * tok..(i + 1) * tok].iter().sum::<f64>() / tok as f64).collect());
            cls.push(fw.cls.column(b));
        }
    }
    Ok((means, cls))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub spec: SyntheticTaskSpec,
    pub signal_layer: usize,
    pub downstream: Readout,
    pub pretext: Readout,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub info: TaskInfo,
    pub teacher: ViTWeights,
    pub pretext: Dataset,
    pub train: Dataset,
    pub test: Dataset,
}

fn labelled(
    cfg: &ViTConfig,
    images: Vec<Tensor>,
    feats: &[Vec<f64>],
    readout: &Readout,
    classes: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let labels = feats
        .iter()
        .map(|f| {
            let y = readout.label(f);
            if noise > 0.0 && rng.gen::<f64>() < noise {
                rng.gen_range(0..classes)
            } else {
                y
            }
        })
        .collect();
    Dataset {
        channels: cfg.channels,
        height: cfg.image,
        width: cfg.image,
        classes,
        images,
        labels,
    }
}

/// Teacher, pretext set and downstream train/test sets.
pub fn gen_task(cfg: &ViTConfig, spec: &SyntheticTaskSpec) -> Result<Task> {
    cfg.validate()?;
    spec.validate(cfg)?;
    let k = spec.layer(cfg);
    let teacher = ViTWeights::init(cfg, spec.teacher_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.teacher_seed ^ 0x7a5c_0001);
    let pre_images = random_images(cfg, spec.pretext, &mut rng);
    let down_images = random_images(cfg, spec.train + spec.test, &mut rng);
    let (_, pre_cls) = layer_summaries(cfg, &teacher, &pre_images, cfg.m)?;
    let (down_means, _) = layer_summaries(cfg, &teacher, &down_images, k)?;
    let pre_readout = Readout::fit(&pre_cls, spec.pretext_classes, &mut rng);
    let down_readout = Readout::fit(&down_means, spec.classes, &mut rng);
    let pretext = labelled(cfg, pre_images, &pre_cls, &pre_readout, spec.pretext_classes, 0.0, &mut rng);
    let mut all = labelled(cfg, down_images, &down_means, &down_readout, spec.classes, spec.label_noise, &mut rng);
    let test_images = all.images.split_off(spec.train);
    let test_labels = all.labels.split_off(spec.train);
    let test = Dataset {
        images: test_images,
        labels: test_labels,
        ..all.clone()
    };
    Ok(Task {
        info: TaskInfo {
            spec: spec.clone(),
            signal_layer: k,
            downstream: down_readout,
            pretext: pre_readout,
        },
        teacher,
        pretext,
        train: all,
        test,
    })
}

/// Fine-tunes the whole backbone with a linear head on the pretext labels
/// for `steps` Adam steps, returning f32-representable weights.
pub fn pretrain(cfg: &ViTConfig, teacher: &ViTWeights, pretext: &Dataset, steps: usize, lr: f64, seed: u64) -> Result<ViTWeights> {
    if steps == 0 {
        return Ok(teacher.clone());
    }
    let spec = ModelSpec::new(Strategy::Finetune, cfg, pretext.classes);
    let mut model = Model::new(cfg, teacher.clone(), spec, seed)?;
    let idx: Vec<usize> = (0..pretext.len()).collect();
    let hp = Hyper {
        max_steps: Some(steps),
        ..Hyper::new(lr, 0.0, usize::MAX)
    };
    fit(&mut model, pretext, &idx, None, &hp, seed)?;
    let mut w = model.backbone;
    w.visit_mut(|t| t.round_to_f32());
    Ok(w)
}
