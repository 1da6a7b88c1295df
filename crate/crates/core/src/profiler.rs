//! Retained-activation accounting per strategy and memory/accuracy tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Category;
use crate::model::{Input, Model};
use crate::tensor::Result;

/// Bytes retained for the backward pass of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub strategy: String,
    /// Retained bytes per category name.
    pub categories: BTreeMap<String, usize>,
    /// Retained bytes per backbone layer, including branches attached to it.
    pub by_layer: BTreeMap<usize, usize>,
    pub retained_total: usize,
    pub peak_grad_bytes: usize,
    /// Retained activations plus peak gradient buffers.
    pub peak_total: usize,
    pub tunable_param_bytes: usize,
}

impl MemoryReport {
    pub fn category(&self, c: Category) -> usize {
        self.categories.get(c.name()).copied().unwrap_or(0)
    }
}

/// Runs one forward and backward pass on a batch and reads the tape.
pub fn profile_step(model: &Model, input: Input, labels: &[usize]) -> Result<MemoryReport> {
    let (g, bound, _, loss) = model.loss_graph(input, labels)?;
    let ret = g.retention();
    let grads = g.backward(loss)?;
    let categories = Category::ALL.iter().map(|&c| (c.name().to_string(), ret.category(c))).collect();
    let tunable: usize = bound.trainable.iter().map(|&id| g.value(id).bytes()).sum();
    Ok(MemoryReport {
        strategy: model.strategy().to_string(),
        categories,
        by_layer: ret.by_layer.clone(),
        retained_total: ret.total,
        peak_grad_bytes: grads.peak_grad_bytes(),
        peak_total: ret.total + grads.peak_grad_bytes(),
        tunable_param_bytes: tunable,
    })
}

/// One row of an accuracy/memory trade-off table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub budget: Option<usize>,
    pub strategy: String,
    /// Inserted into the last `layers` layers; `None` when nothing fits.
    pub layers: Option<usize>,
    pub peak_bytes: Option<usize>,
    pub accuracy: Option<f64>,
}

/// A measured configuration: strategy name, last-k layers, peak bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Footprint {
    pub strategy: String,
    pub layers: usize,
    pub peak_bytes: usize,
}

/// For every budget and strategy, the most accurate configuration whose
/// peak bytes fit, ties going to more layers. `accuracy` is evaluated once
/// per configuration, and only for configurations that fit some budget.
pub fn tradeoff_table(
    footprints: &[Footprint],
    budgets: &[Option<usize>],
    mut accuracy: impl FnMut(&Footprint) -> Result<f64>,
) -> Result<Vec<TradeoffRow>> {
    let fits = |f: &Footprint, b: Option<usize>| b.is_none_or(|b| f.peak_bytes <= b);
    let mut acc: Vec<Option<f64>> = vec![None; footprints.len()];
    for (i, f) in footprints.iter().enumerate() {
        if budgets.iter().any(|&b| fits(f, b)) {
            acc[i] = Some(accuracy(f)?);
        }
    }
    let mut strategies: Vec<&str> = Vec::new();
    for f in footprints {
        if !strategies.contains(&f.strategy.as_str()) {
            strategies.push(&f.strategy);
        }
    }
    let mut rows = Vec::new();
    for &b in budgets {
        for &s in &strategies {
            let best = footprints
                .iter()
                .enumerate()
                .filter(|(_, f)| f.strategy == s && fits(f, b))
                .max_by(|(i, f), (j, g)| acc[*i].unwrap().total_cmp(&acc[*j].unwrap()).then(f.layers.cmp(&g.layers)));
            rows.push(match best {
                Some((i, f)) => TradeoffRow {
                    budget: b,
                    strategy: s.to_string(),
                    layers: Some(f.layers),
                    peak_bytes: Some(f.peak_bytes),
                    accuracy: acc[i],
                },
                None => TradeoffRow {
                    budget: b,
                    strategy: s.to_string(),
                    layers: None,
                    peak_bytes: None,
                    accuracy: None,
                },
            });
        }
    }
    Ok(rows)
}

pub fn write_tradeoff_csv(rows: &[TradeoffRow], w: impl std::io::Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["budget", "strategy", "layers", "peak_bytes", "accuracy"])?;
    let opt = |v: Option<String>| v.unwrap_or_else(|| "infeasible".into());
    for r in rows {
        out.write_record([
            r.budget.map_or_else(|| "inf".into(), |b| b.to_string()),
            r.strategy.clone(),
            opt(r.layers.map(|v| v.to_string())),
            opt(r.peak_bytes.map(|v| v.to_string())),
            opt(r.accuracy.map(|v| format!("{v:.4}"))),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{last_k, ModelSpec, Strategy};
    use crate::synth::random_dataset;
    use crate::vit::{Mode, ViTConfig, ViTWeights};

    fn report(cfg: &ViTConfig, s: Strategy, t: usize, k: usize) -> MemoryReport {
        let w = ViTWeights::init(cfg, 1).unwrap();
        let spec = ModelSpec::new(s, cfg, 3).with_t(t).with_active(last_k(cfg.m, k));
        let model = Model::new(cfg, w, spec, 0).unwrap();
        let data = random_dataset(cfg, 4, 3, 2);
        let idx = [0, 1, 2, 3];
        profile_step(&model, Input::Images(&data.image_refs(&idx)), &data.labels).unwrap()
    }

    #[test]
    fn categories_sum_to_total() {
        let cfg = ViTConfig::desk();
        for s in Strategy::ALL {
            let r = report(&cfg, s, 2, cfg.m);
            assert_eq!(r.categories.values().sum::<usize>(), r.retained_total, "{s}");
            assert_eq!(r.peak_total, r.retained_total + r.peak_grad_bytes);
        }
    }

    #[test]
    fn linear_and_vqt_retain_nothing_on_the_main_path() {
        for mode in [Mode::Paper, Mode::Full] {
            let cfg = ViTConfig::desk().with_mode(mode);
            assert_eq!(report(&cfg, Strategy::Linear, 1, 4).category(Category::BackboneMain), 0);
            let vqt = report(&cfg, Strategy::Vqt, 4, 4);
            let vpt = report(&cfg, Strategy::Vpt, 4, 4);
            assert_eq!(vqt.category(Category::BackboneMain), 0);
            assert!(vqt.category(Category::QueryBranch) > 0);
            assert!(vpt.category(Category::BackboneMain) > 0);
            assert!(vqt.peak_total < vpt.peak_total);
        }
    }

    #[test]
    fn finetuning_retains_in_every_layer() {
        let cfg = ViTConfig::desk();
        let r = report(&cfg, Strategy::Finetune, 1, cfg.m);
        for m in 0..cfg.m {
            assert!(r.by_layer.get(&m).copied().unwrap_or(0) > 0, "layer {m}");
        }
    }

    #[test]
    fn fewer_vqt_layers_retain_less() {
        let cfg = ViTConfig::desk();
        assert!(report(&cfg, Strategy::Vqt, 1, 1).retained_total < report(&cfg, Strategy::Vqt, 1, cfg.m).retained_total);
    }

    fn fp(s: &str, layers: usize, peak: usize) -> Footprint {
        Footprint {
            strategy: s.into(),
            layers,
            peak_bytes: peak,
        }
    }

    #[test]
    fn tradeoff_budgets() {
        let fps = [fp("vqt", 1, 10), fp("vqt", 2, 20), fp("vpt", 1, 50), fp("vpt", 2, 90)];
        let rows = tradeoff_table(&fps, &[None, Some(30), Some(5)], |f| Ok(f.layers as f64 / 10.0)).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!((rows[0].layers, rows[1].layers), (Some(2), Some(2)));
        assert_eq!((rows[2].layers, rows[3].layers), (Some(2), None));
        assert_eq!((rows[4].layers, rows[5].layers), (None, None));
        let mut buf = Vec::new();
        write_tradeoff_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("30,vpt,infeasible,infeasible,infeasible"));
    }

    #[test]
    fn tradeoff_accuracy_is_monotone_in_budget() {
        let fps = [fp("a", 1, 10), fp("a", 2, 20), fp("a", 3, 30)];
        let accs = [0.5, 0.4, 0.7];
        let budgets: Vec<Option<usize>> = (0..40).step_by(5).map(Some).collect();
        let rows = tradeoff_table(&fps, &budgets, |f| Ok(accs[f.layers - 1])).unwrap();
        let vals: Vec<f64> = rows.iter().map(|r| r.accuracy.unwrap_or(0.0)).collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]), "{vals:?}");
    }
}
