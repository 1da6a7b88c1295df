//! Experiment configuration, single runs and sweeps.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationPlan;
use crate::baselines::{PoolRegime, PoolingPlan, DEFAULT_ADAPTER_DIM, DEFAULT_ADAPTER_SCALE};
use crate::data::Dataset;
use crate::model::{last_k, Input, Model, ModelSpec, Strategy};
use crate::profiler::profile_step;
use crate::selector::{self, ClsPolicy, SelectionReport};
use crate::tensor::{Result, Tensor, TensorError};
use crate::train::cache::{CacheLayout, FeatureCache};
use crate::train::harness::{evaluate, grid_search, head_features, split_80_20, GridResult, DEFAULT_BATCH};
use crate::vit::{ViTConfig, ViTWeights};

/// Layers receiving inserted parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerSel {
    #[default]
    All,
    Last(usize),
}

impl LayerSel {
    pub fn mask(self, m: usize) -> Vec<bool> {
        match self {
            LayerSel::All => vec![true; m],
            LayerSel::Last(k) => last_k(m, k),
        }
    }
}

impl fmt::Display for LayerSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSel::All => f.write_str("all"),
            LayerSel::Last(k) => write!(f, "last:{k}"),
        }
    }
}

impl FromStr for LayerSel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "all" {
            return Ok(LayerSel::All);
        }
        s.strip_prefix("last:")
            .and_then(|k| k.parse().ok())
            .map(LayerSel::Last)
            .ok_or_else(|| format!("layers must be `all` or `last:k`, got {s:?}"))
    }
}

impl Serialize for LayerSel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerSel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "F")]
    pub f: f64,
    pub lambdas: Vec<f64>,
    pub lrs: Vec<f64>,
    pub wds: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub data_fraction: f64,
    pub layers: LayerSel,
    pub aggregation: AggregationPlan,
    pub cache: bool,
    pub cache_layout: CacheLayout,
    pub adapter_dim: usize,
    pub adapter_scale: f64,
    pub pooling: PoolRegime,
    /// Proximal-gradient steps for group-lasso and retrained heads.
    pub lasso_steps: usize,
    pub cls_policy: ClsPolicy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategy: Strategy::Vqt,
            t: 1,
            f: 1.0,
            lambdas: vec![1e-4, 1e-3, 1e-2],
            lrs: vec![1.0, 0.5, 0.25, 0.1, 0.05],
            wds: vec![0.01, 0.001, 0.0001, 0.0],
            epochs: 100,
            batch_size: DEFAULT_BATCH,
            seed: 0,
            data_fraction: 1.0,
            layers: LayerSel::All,
            aggregation: AggregationPlan::default(),
            cache: true,
            cache_layout: CacheLayout::KeyValue,
            adapter_dim: DEFAULT_ADAPTER_DIM,
            adapter_scale: DEFAULT_ADAPTER_SCALE,
            pooling: PoolRegime::Small,
            lasso_steps: 300,
            cls_policy: ClsPolicy::AlwaysKeep,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.lrs.is_empty() || self.wds.is_empty() || self.lambdas.is_empty() {
            return Err("lrs, wds and lambdas must be nonempty".into());
        }
        if !(self.f > 0.0 && self.f <= 1.0) {
            return Err(format!("F = {} outside (0, 1]", self.f));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(format!("data_fraction = {} outside (0, 1]", self.data_fraction));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err("epochs and batch_size must be positive".into());
        }
        if self.lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err("lambdas must be finite and nonnegative".into());
        }
        Ok(())
    }

    pub fn model_spec(&self, cfg: &ViTConfig, classes: usize) -> std::result::Result<ModelSpec, String> {
        if let LayerSel::Last(k) = self.layers {
            if k > cfg.m {
                return Err(format!("last:{k} with {} layers", cfg.m));
            }
        }
        Ok(ModelSpec {
            strategy: self.strategy,
            t: self.t,
            active: self.layers.mask(cfg.m),
            adapter_dim: self.adapter_dim,
            adapter_scale: self.adapter_scale,
            aggregation: self.aggregation,
            pooling: PoolingPlan::regime(self.pooling, cfg.tokens()),
            classes,
        })
    }

    fn uses_selection(&self) -> bool {
        self.strategy == Strategy::Head2Toe || (self.strategy.queries() && self.f < 1.0)
    }
}

/// One result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub strategy: String,
    pub seed: u64,
    pub hyperparams: String,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub tunable_params: usize,
    pub retained_bytes: usize,
    pub wall_ms: u64,
}

pub const CSV_HEADER: [&str; 9] = [
    "strategy",
    "seed",
    "hyperparams",
    "train_acc",
    "val_acc",
    "test_acc",
    "tunable_params",
    "retained_bytes",
    "wall_ms",
];

pub fn write_rows_csv(rows: &[RunRow], extra: Option<(&str, &[String])>, w: impl std::io::Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = Vec::new();
    if let Some((name, _)) = extra {
        header.push(name);
    }
    header.extend(CSV_HEADER);
    out.write_record(&header)?;
    for (i, r) in rows.iter().enumerate() {
        let mut rec = Vec::new();
        if let Some((_, vals)) = extra {
            rec.push(vals[i].clone());
        }
        rec.extend([
            r.strategy.clone(),
            r.seed.to_string(),
            r.hyperparams.clone(),
            format!("{:.6}", r.train_acc),
            format!("{:.6}", r.val_acc),
            format!("{:.6}", r.test_acc),
            r.tunable_params.to_string(),
            r.retained_bytes.to_string(),
            r.wall_ms.to_string(),
        ]);
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub row: RunRow,
    pub model: Model,
    pub grid: Option<GridResult>,
    pub selection: Option<SelectionReport>,
}

/// Seeded subset of `round(fraction * n)` indices, at least one per class
/// present when possible.
pub fn fraction_indices(data: &Dataset, fraction: f64, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    if fraction >= 1.0 {
        return idx;
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xf7ac));
    let k = ((fraction * data.len() as f64).round() as usize).clamp(1.min(data.len()), data.len());
    let mut kept = idx[..k].to_vec();
    kept.sort_unstable();
    kept
}

fn build_cache(model: &Model, data: &Dataset, exp: &ExperimentConfig) -> Result<Option<FeatureCache>> {
    if exp.cache && !model.strategy().modifies_features() {
        Ok(Some(FeatureCache::build(model, data, exp.cache_layout)?))
    } else {
        Ok(None)
    }
}

/// Runs one configured experiment on a frozen or tunable backbone.
pub fn run_experiment(
    cfg: &ViTConfig,
    backbone: &ViTWeights,
    train: &Dataset,
    test: &Dataset,
    exp: &ExperimentConfig,
) -> Result<RunOutput> {
    exp.validate().map_err(TensorError::Contract)?;
    let start = Instant::now();
    let train = train.subset(&fraction_indices(train, exp.data_fraction, exp.seed));
    let spec = exp.model_spec(cfg, train.classes).map_err(TensorError::Contract)?;
    let template = Model::new(cfg, backbone.clone(), spec, exp.seed)?;
    let train_cache = build_cache(&template, &train, exp)?;
    let test_cache = build_cache(&template, test, exp)?;
    let idx: Vec<usize> = (0..train.len()).collect();
    let (tr, val) = split_80_20(&idx, exp.seed);

    let mut grid = None;
    let mut model = if exp.strategy == Strategy::Head2Toe {
        template
    } else {
        let (m, g) = grid_search(
            &template,
            &train,
            &idx,
            train_cache.as_ref(),
            &exp.lrs,
            &exp.wds,
            exp.epochs,
            exp.seed,
        )?;
        grid = Some(g);
        m
    };
    let mut selection = None;
    let mut hyper = grid
        .as_ref()
        .map(|g| format!("lr={};wd={}", g.best_lr, g.best_wd))
        .unwrap_or_default();
    let mut val_acc = grid.as_ref().map_or(0.0, |g| g.val_acc);
    if exp.uses_selection() {
        let h = head_features(&model, &train, &idx, train_cache.as_ref())?;
        let (report, acc) = select_head(&mut model, &h, &train.labels, &tr, &val, exp)?;
        if !hyper.is_empty() {
            hyper.push(';');
        }
        hyper.push_str(&format!("lambda={};F={}", report.lambda, exp.f));
        val_acc = acc;
        selection = Some(report);
    }
    let train_acc = evaluate(&model, &train, &idx, train_cache.as_ref())?;
    let test_idx: Vec<usize> = (0..test.len()).collect();
    let test_acc = evaluate(&model, test, &test_idx, test_cache.as_ref())?;
    let probe: Vec<usize> = idx.iter().copied().take(DEFAULT_BATCH).collect();
    let labels: Vec<usize> = probe.iter().map(|&i| train.labels[i]).collect();
    let mem = profile_step(&model, Input::Images(&train.image_refs(&probe)), &labels)?;
    let row = RunRow {
        strategy: exp.strategy.to_string(),
        seed: exp.seed,
        hyperparams: hyper,
        train_acc,
        val_acc,
        test_acc,
        tunable_params: model.tunable_params(),
        retained_bytes: mem.retained_total,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    Ok(RunOutput {
        row,
        model,
        grid,
        selection,
    })
}

/// Group-lasso selection over head inputs `h` with a validation search over
/// lambda, then a retrained head on the kept columns of every sample.
fn select_head(
    model: &mut Model,
    h: &Tensor,
    labels: &[usize],
    tr: &[usize],
    val: &[usize],
    exp: &ExperimentConfig,
) -> Result<(SelectionReport, f64)> {
    let classes = model.classes();
    let (blocks, cls) = model.head_layout();
    let rows = |x: &Tensor, idx: &[usize]| {
        let d = x.cols();
        let data = idx.iter().flat_map(|&i| x.data()[i * d..(i + 1) * d].iter().copied()).collect();
        Tensor::new(vec![idx.len(), d], data).expect("sized")
    };
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let (htr, hval) = (rows(h, tr), rows(h, val));
    let (ytr, yval) = (pick(tr), pick(val));
    let trials: Vec<(f64, Option<f64>)> = exp
        .lambdas
        .par_iter()
        .map(|&lambda| {
            let res = (|| {
                let head = selector::train_head_group_lasso(&htr, &ytr, classes, lambda, exp.lasso_steps)?;
                let report = SelectionReport::new(selector::importance(&head.w), exp.f, lambda, &blocks, cls, exp.cls_policy)?;
                let fresh = selector::retrain_selected(&htr, &ytr, classes, &report.kept, exp.lasso_steps)?;
                fresh.accuracy(&selector::restrict_columns(&hval, &report.kept), &yval)
            })();
            match res {
                Ok(a) => Ok((lambda, Some(a))),
                Err(TensorError::NonFinite { .. }) => Ok((lambda, None)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let (lambda, acc) = trials
        .iter()
        .filter_map(|&(l, a)| a.map(|a| (l, a)))
        .min_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)))
        .ok_or(TensorError::NonFinite { op: "every lambda" })?;
    let head = selector::train_head_group_lasso(h, labels, classes, lambda, exp.lasso_steps)?;
    let report = SelectionReport::new(selector::importance(&head.w), exp.f, lambda, &blocks, cls, exp.cls_policy)?;
    let fresh = selector::retrain_selected(h, labels, classes, &report.kept, exp.lasso_steps)?;
    model.set_selected_head(report.kept.clone(), fresh.w, fresh.b)?;
    Ok((report, acc))
}

/// Sweep axes.
#[derive(Debug, Clone, PartialEq)]
pub enum Axis {
    DataFraction(Vec<f64>),
    T(Vec<usize>),
    F(Vec<f64>),
    Layers(Vec<LayerSel>),
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::DataFraction(_) => "data_fraction",
            Axis::T(_) => "T",
            Axis::F(_) => "F",
            Axis::Layers(_) => "layers",
        }
    }

    fn configs(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Axis::DataFraction(v) => v.iter().map(|&x| (x.to_string(), with(&|c| c.data_fraction = x))).collect(),
            Axis::T(v) => v.iter().map(|&x| (x.to_string(), with(&|c| c.t = x))).collect(),
            Axis::F(v) => v.iter().map(|&x| (x.to_string(), with(&|c| c.f = x))).collect(),
            Axis::Layers(v) => v.iter().map(|&x| (x.to_string(), with(&|c| c.layers = x))).collect(),
        }
    }
}

/// One run per axis value, in axis order.
pub fn sweep(
    cfg: &ViTConfig,
    backbone: &ViTWeights,
    train: &Dataset,
    test: &Dataset,
    base: &ExperimentConfig,
    axis: &Axis,
) -> Result<Vec<(String, RunRow)>> {
    axis.configs(base)
        .into_par_iter()
        .map(|(label, exp)| run_experiment(cfg, backbone, train, test, &exp).map(|o| (label, o.row)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_task, SyntheticTaskSpec};

    fn quick(strategy: Strategy) -> ExperimentConfig {
        ExperimentConfig {
            strategy,
            lrs: vec![0.05],
            wds: vec![0.0],
            lambdas: vec![1e-3],
            epochs: 2,
            lasso_steps: 30,
            ..Default::default()
        }
    }

    fn task() -> (ViTConfig, crate::synth::Task) {
        let cfg = ViTConfig::desk();
        let spec = SyntheticTaskSpec {
            train: 60,
            test: 20,
            pretext: 10,
            ..Default::default()
        };
        (cfg.clone(), gen_task(&cfg, &spec).unwrap())
    }

    #[test]
    fn layer_selection_parses() {
        assert_eq!("all".parse::<LayerSel>().unwrap(), LayerSel::All);
        assert_eq!("last:3".parse::<LayerSel>().unwrap(), LayerSel::Last(3));
        assert!("last:x".parse::<LayerSel>().is_err());
        assert_eq!(LayerSel::Last(2).mask(4), vec![false, false, true, true]);
    }

    #[test]
    fn defaults_match_the_documented_grids() {
        let c = ExperimentConfig::default();
        assert_eq!(c.lrs.len() * c.wds.len(), 20);
        assert_eq!(c.epochs, 100);
        let json = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"learning_rate": 1}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn every_strategy_runs_and_reports_its_formula() {
        let (cfg, t) = task();
        for s in Strategy::ALL {
            let exp = quick(s);
            let out = run_experiment(&cfg, &t.teacher, &t.train, &t.test, &exp).unwrap();
            let spec = exp.model_spec(&cfg, 5).unwrap();
            assert_eq!(out.row.tunable_params, spec.count_tunable(&cfg), "{s}");
            assert!((0.0..=1.0).contains(&out.row.test_acc));
        }
    }

    #[test]
    fn cache_does_not_change_results() {
        let (cfg, t) = task();
        let mut exp = quick(Strategy::Vqt);
        let a = run_experiment(&cfg, &t.teacher, &t.train, &t.test, &exp).unwrap();
        exp.cache = false;
        let b = run_experiment(&cfg, &t.teacher, &t.train, &t.test, &exp).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!((a.row.train_acc, a.row.test_acc), (b.row.train_acc, b.row.test_acc));
    }

    #[test]
    fn selection_keeps_the_requested_fraction() {
        let (cfg, t) = task();
        let exp = ExperimentConfig { f: 0.5, ..quick(Strategy::Vqt) };
        let out = run_experiment(&cfg, &t.teacher, &t.train, &t.test, &exp).unwrap();
        let sel = out.selection.unwrap();
        let body = cfg.m * cfg.d;
        assert_eq!(sel.kept.len(), (0.5 * body as f64).round() as usize + cfg.d);
        assert_eq!(sel.per_layer.len(), cfg.m);
        assert_eq!(out.model.selected.as_deref(), Some(sel.kept.as_slice()));
    }

    #[test]
    fn full_fraction_equals_a_plain_run_and_sweeps_follow_axis_order() {
        let (cfg, t) = task();
        let exp = quick(Strategy::Linear);
        let plain = run_experiment(&cfg, &t.teacher, &t.train, &t.test, &exp).unwrap();
        let rows = sweep(&cfg, &t.teacher, &t.train, &t.test, &exp, &Axis::DataFraction(vec![0.5, 1.0])).unwrap();
        assert_eq!(rows[0].0, "0.5");
        assert_eq!(rows[1].1.test_acc, plain.row.test_acc);
        assert_eq!(rows[1].1.train_acc, plain.row.train_acc);
    }

    #[test]
    fn fewer_active_layers_retain_fewer_bytes() {
        let (cfg, t) = task();
        let rows = sweep(
            &cfg,
            &t.teacher,
            &t.train,
            &t.test,
            &quick(Strategy::Vqt),
            &Axis::Layers(vec![LayerSel::Last(1), LayerSel::All]),
        )
        .unwrap();
        assert!(rows[0].1.retained_bytes < rows[1].1.retained_bytes);
    }

    #[test]
    fn csv_has_the_documented_columns() {
        let row = RunRow {
            strategy: "vqt".into(),
            seed: 1,
            hyperparams: "lr=0.1;wd=0".into(),
            train_acc: 1.0,
            val_acc: 0.5,
            test_acc: 0.25,
            tunable_params: 10,
            retained_bytes: 20,
            wall_ms: 3,
        };
        let mut buf = Vec::new();
        write_rows_csv(&[row], None, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "strategy,seed,hyperparams,train_acc,val_acc,test_acc,tunable_params,retained_bytes,wall_ms\n\
             vqt,1,lr=0.1;wd=0,1.000000,0.500000,0.250000,10,20,3\n"
        );
    }
}
