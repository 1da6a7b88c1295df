//! Strategies assembled on top of the backbone into one trainable model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::{self, AggregationBinding, AggregationParams, AggregationPlan, Across};
use crate::autodiff::{Category, Graph, NodeId};
use crate::baselines::{
    self, adapter_param_count, tap_dim, vpt_param_count, AdapterBinding, AdapterWeights, PoolRegime,
    PoolingPlan, PromptSet, DEFAULT_ADAPTER_DIM, DEFAULT_ADAPTER_SCALE,
};
use crate::tensor::{Result, Tensor, TensorError};
use crate::train::cache::{CacheLayout, FeatureCache};
use crate::vit::{self, backbone_param_count, LayerNodes, LayerParams, LayerTrace, ViTConfig, ViTParams, ViTWeights};
use crate::vqt::{self, vqt_param_count, QueryTokenSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Linear,
    Finetune,
    Vqt,
    Vpt,
    Head2Toe,
    AdaptFormer,
    VptVqt,
    AdaptFormerVqt,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Linear,
        Strategy::Finetune,
        Strategy::Vqt,
        Strategy::Vpt,
        Strategy::Head2Toe,
        Strategy::AdaptFormer,
        Strategy::VptVqt,
        Strategy::AdaptFormerVqt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Linear => "linear",
            Strategy::Finetune => "finetune",
            Strategy::Vqt => "vqt",
            Strategy::Vpt => "vpt",
            Strategy::Head2Toe => "head2toe",
            Strategy::AdaptFormer => "adaptformer",
            Strategy::VptVqt => "vpt+vqt",
            Strategy::AdaptFormerVqt => "adaptformer+vqt",
        }
    }

    pub fn queries(self) -> bool {
        matches!(self, Strategy::Vqt | Strategy::VptVqt | Strategy::AdaptFormerVqt)
    }

    pub fn prompts(self) -> bool {
        matches!(self, Strategy::Vpt | Strategy::VptVqt)
    }

    pub fn adapters(self) -> bool {
        matches!(self, Strategy::AdaptFormer | Strategy::AdaptFormerVqt)
    }

    /// Whether training changes the backbone's intermediate features.
    pub fn modifies_features(self) -> bool {
        self == Strategy::Finetune || self.prompts() || self.adapters()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Strategy::ALL.iter().map(|x| x.name()).collect();
                format!("unknown strategy {s:?}, expected one of {}", names.join(", "))
            })
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Layers that receive inserted parameters.
pub fn last_k(m: usize, k: usize) -> Vec<bool> {
    (0..m).map(|i| i + k >= m).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub strategy: Strategy,
    /// Query tokens or prompts per layer.
    pub t: usize,
    /// Layers with inserted parameters (or trainable layers for fine-tuning).
    pub active: Vec<bool>,
    pub adapter_dim: usize,
    pub adapter_scale: f64,
    pub aggregation: AggregationPlan,
    pub pooling: PoolingPlan,
    pub classes: usize,
}

impl ModelSpec {
    pub fn new(strategy: Strategy, cfg: &ViTConfig, classes: usize) -> Self {
        ModelSpec {
            strategy,
            t: 1,
            active: vec![true; cfg.m],
            adapter_dim: DEFAULT_ADAPTER_DIM,
            adapter_scale: DEFAULT_ADAPTER_SCALE,
            aggregation: AggregationPlan::default(),
            pooling: PoolingPlan::regime(PoolRegime::Small, cfg.tokens()),
            classes,
        }
    }

    pub fn with_t(mut self, t: usize) -> Self {
        self.t = t;
        self
    }

    pub fn with_active(mut self, active: Vec<bool>) -> Self {
        self.active = active;
        self
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Head input length before any selection.
    pub fn head_dim(&self, cfg: &ViTConfig) -> usize {
        let s = self.strategy;
        if s.queries() {
            self.aggregation.output_dim(cfg.d, self.t, self.active_count())
        } else if s == Strategy::Head2Toe {
            tap_dim(cfg, &self.pooling) + cfg.d
        } else {
            cfg.d
        }
    }

    /// Parameters trained on top of a linear head on the CLS vector, with
    /// the default concatenation and no feature selection.
    pub fn count_tunable(&self, cfg: &ViTConfig) -> usize {
        let (d, l, t, c) = (cfg.d, self.active_count(), self.t, self.classes);
        let mut n = 0;
        if self.strategy.queries() {
            n += vqt_param_count(d, l, t, c);
        }
        if self.strategy.prompts() {
            n += vpt_param_count(d, l, t);
        }
        if self.strategy.adapters() {
            n += adapter_param_count(d, l, self.adapter_dim);
        }
        match self.strategy {
            Strategy::Finetune => n += finetune_count(cfg, &self.active),
            Strategy::Head2Toe => n += tap_dim(cfg, &self.pooling) * c,
            _ => {}
        }
        n
    }
}

fn finetune_count(cfg: &ViTConfig, active: &[bool]) -> usize {
    if active.iter().all(|&a| a) {
        return backbone_param_count(cfg);
    }
    let per_layer = {
        let mut one = cfg.clone();
        one.m = 1;
        let mut zero = cfg.clone();
        zero.m = 0;
        backbone_param_count(&one) - backbone_param_count(&zero)
    };
    per_layer * active.iter().filter(|&&a| a).count()
}

/// What the model reads for a batch.
#[derive(Clone, Copy)]
pub enum Input<'a> {
    Images(&'a [&'a Tensor]),
    Cached { cache: &'a FeatureCache, idx: &'a [usize] },
}

impl Input<'_> {
    pub fn batch(&self) -> usize {
        match self {
            Input::Images(i) => i.len(),
            Input::Cached { idx, .. } => idx.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ViTConfig,
    pub spec: ModelSpec,
    pub backbone: ViTWeights,
    pub queries: Option<QueryTokenSet>,
    pub prompts: Option<PromptSet>,
    pub adapters: Option<AdapterWeights>,
    pub agg: AggregationParams,
    /// `dim x C`, where `dim` is the selected head input length.
    pub head_w: Tensor,
    pub head_b: Tensor,
    /// Kept head-input columns, ascending.
    pub selected: Option<Vec<usize>>,
    /// Freezes inserted parameters and aggregation weights.
    pub freeze_inserts: bool,
}

/// Graph handles for one step.
#[derive(Debug, Clone)]
pub struct Bound {
    pub backbone: ViTParams<NodeId>,
    pub queries: Vec<Option<NodeId>>,
    pub prompts: Vec<Option<NodeId>>,
    pub adapters: Vec<Option<AdapterBinding>>,
    pub agg: AggregationBinding,
    pub head_w: NodeId,
    pub head_b: NodeId,
    /// Trainable leaves in [`Model::visit_trainable_mut`] order.
    pub trainable: Vec<NodeId>,
}

/// Nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// `Z_0 ..= Z_M` when run from images.
    pub z: Vec<NodeId>,
    /// Summarized features per layer with query tokens.
    pub primes: Vec<NodeId>,
    pub head_input: NodeId,
    pub logits: NodeId,
}

impl Model {
    pub fn new(cfg: &ViTConfig, backbone: ViTWeights, spec: ModelSpec, seed: u64) -> Result<Model> {
        cfg.validate()?;
        backbone.check_shapes(cfg).map_err(TensorError::Contract)?;
        if spec.active.len() != cfg.m {
            return Err(TensorError::Contract(format!(
                "{} active flags for {} layers",
                spec.active.len(),
                cfg.m
            )));
        }
        if spec.classes < 2 {
            return Err(TensorError::Contract(format!("{} classes", spec.classes)));
        }
        spec.pooling.validate()?;
        let s = spec.strategy;
        let queries = s
            .queries()
            .then(|| QueryTokenSet::init(cfg, spec.t, &spec.active, seed ^ 0x51))
            .transpose()?;
        let prompts = s.prompts().then(|| PromptSet::init(cfg, spec.t, &spec.active, seed ^ 0x50));
        let adapters = s
            .adapters()
            .then(|| AdapterWeights::init(cfg, spec.adapter_dim, spec.adapter_scale, &spec.active, seed ^ 0x41))
            .transpose()?;
        let layers = if s.queries() { spec.active_count() } else { 0 };
        let agg_plan = if s.queries() { spec.aggregation } else { AggregationPlan::default() };
        let agg = AggregationParams::init(agg_plan, cfg, spec.t, layers, seed ^ 0x47)?;
        let dim = spec.head_dim(cfg);
        Ok(Model {
            cfg: cfg.clone(),
            head_w: Tensor::zeros(&[dim, spec.classes]),
            head_b: Tensor::zeros(&[spec.classes]),
            spec,
            backbone,
            queries,
            prompts,
            adapters,
            agg,
            selected: None,
            freeze_inserts: false,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.spec.strategy
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Head input length before selection.
    pub fn head_dim(&self) -> usize {
        self.spec.head_dim(&self.cfg)
    }

    /// Widths of the per-layer blocks of the head input and of the trailing
    /// CLS block.
    pub fn head_layout(&self) -> (Vec<usize>, usize) {
        let d = self.cfg.d;
        let s = self.strategy();
        if s.queries() {
            let plan = self.agg.plan;
            let k = plan.width(self.spec.t);
            let layers = self.spec.active_count();
            let blocks = match plan.across {
                Across::Concat => vec![d * k; layers],
                Across::Weighted if layers > 0 => vec![d * k],
                _ => Vec::new(),
            };
            (blocks, d)
        } else if s == Strategy::Head2Toe {
            let n = self.cfg.tokens();
            let p = &self.spec.pooling;
            let mut blocks = vec![d * p.z0.count(n)];
            let per = d * (p.ln.count(n) + p.msa.count(n) + p.out.count(n)) + self.cfg.hidden() * p.hidden.count(n);
            blocks.extend(std::iter::repeat(per).take(self.cfg.m));
            (blocks, d)
        } else {
            (Vec::new(), d)
        }
    }

    /// Keeps only the given head-input columns and installs a head on them.
    /// Inserted parameters are frozen from here on.
    pub fn set_selected_head(&mut self, kept: Vec<usize>, w: Tensor, b: Tensor) -> Result<()> {
        let dim = self.head_dim();
        if kept.is_empty() {
            return Err(TensorError::Contract("empty selection".into()));
        }
        if kept.windows(2).any(|p| p[0] >= p[1]) || kept.iter().any(|&k| k >= dim) {
            return Err(TensorError::Contract(format!(
                "selection must be ascending indices below {dim}"
            )));
        }
        if w.shape() != [kept.len(), self.classes()] || b.shape() != [self.classes()] {
            return Err(TensorError::shape(
                "set_selected_head",
                format!("head {:?} + {:?} for {} kept columns", w.shape(), b.shape(), kept.len()),
            ));
        }
        self.selected = Some(kept);
        self.head_w = w;
        self.head_b = b;
        self.freeze_inserts = true;
        Ok(())
    }

    /// Which backbone tensors are trained.
    pub fn backbone_mask(&self) -> ViTParams<bool> {
        let ft = self.strategy() == Strategy::Finetune;
        let all = self.spec.active.iter().all(|&a| a);
        let mut mask = self.backbone.map(|_| ft && all);
        let mode = self.cfg.mode;
        for (m, layer) in mask.layers.iter_mut().enumerate() {
            for (i, f) in layer.fields_mut().into_iter().enumerate() {
                *f = ft && self.spec.active[m] && LayerParams::<bool>::used_in(mode, i);
            }
        }
        mask
    }

    fn backbone_flags(&self) -> Vec<bool> {
        let mut flags = Vec::new();
        self.backbone_mask().visit(|_, &f| flags.push(f));
        flags
    }

    /// Visits every trainable tensor in a fixed order.
    pub fn visit_trainable_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        let flags = self.backbone_flags();
        let mut i = 0;
        self.backbone.visit_mut(|t| {
            if flags[i] {
                f(t);
            }
            i += 1;
        });
        if !self.freeze_inserts {
            if let Some(p) = &mut self.prompts {
                p.prompts.iter_mut().flatten().for_each(&mut f);
            }
            if let Some(a) = &mut self.adapters {
                for ad in a.layers.iter_mut().flatten() {
                    f(&mut ad.down);
                    f(&mut ad.up);
                }
            }
            if let Some(q) = &mut self.queries {
                q.tokens_mut().iter_mut().flatten().for_each(&mut f);
            }
            self.agg.visit_mut(&mut f);
        }
        f(&mut self.head_w);
        f(&mut self.head_b);
    }

    pub fn trainable_shapes(&mut self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        self.visit_trainable_mut(|t| out.push(t.shape().to_vec()));
        out
    }

    /// Trained parameters beyond a linear head on the CLS vector.
    pub fn tunable_params(&self) -> usize {
        let mut n = 0;
        let flags = self.backbone_flags();
        let mut i = 0;
        self.backbone.visit(|_, t| {
            if flags[i] {
                n += t.len();
            }
            i += 1;
        });
        if let Some(p) = &self.prompts {
            n += p.prompts.iter().flatten().map(Tensor::len).sum::<usize>();
        }
        if let Some(a) = &self.adapters {
            n += a.layers.iter().flatten().map(|l| l.down.len() + l.up.len()).sum::<usize>();
        }
        if let Some(q) = &self.queries {
            n += q.tokens().iter().flatten().map(Tensor::len).sum::<usize>();
        }
        n += self.agg.param_count();
        let rows = self.head_w.rows();
        n + rows.saturating_sub(self.cfg.d) * self.classes()
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, &mut |g, t| g.param(t.clone()))
    }

    /// Binds with existing leaves standing in for the trainable tensors, in
    /// [`Model::visit_trainable_mut`] order.
    pub fn bind_to(&self, g: &mut Graph, leaves: &[NodeId]) -> Result<Bound> {
        let mut it = leaves.iter();
        let mut bad = false;
        let bound = self.bind_with(g, &mut |g, t| match it.next() {
            Some(&id) if g.shape(id) == t.shape() => id,
            _ => {
                bad = true;
                g.param(t.clone())
            }
        });
        match (bad, it.next()) {
            (false, None) => Ok(bound),
            _ => Err(TensorError::Contract(format!(
                "{} leaves do not match the {} trainable tensors",
                leaves.len(),
                bound.trainable.len()
            ))),
        }
    }

    fn bind_with(&self, g: &mut Graph, make: &mut dyn FnMut(&mut Graph, &Tensor) -> NodeId) -> Bound {
        let prev = g.set_category(Category::BackboneMain);
        let mut trainable = Vec::new();
        let flags = self.backbone_flags();
        let mut i = 0;
        let backbone = self.backbone.map(|t| {
            let id = if flags[i] {
                let id = make(g, t);
                trainable.push(id);
                id
            } else {
                g.input(t.clone())
            };
            i += 1;
            id
        });
        let train = !self.freeze_inserts;
        let mut leaf = |g: &mut Graph, t: &Tensor, trainable: &mut Vec<NodeId>| {
            if train {
                let id = make(g, t);
                trainable.push(id);
                id
            } else {
                g.input(t.clone())
            }
        };
        let m = self.cfg.m;
        g.set_category(Category::PromptBranch);
        let prompts = match &self.prompts {
            Some(p) => p.prompts.iter().map(|x| x.as_ref().map(|t| leaf(g, t, &mut trainable))).collect(),
            None => vec![None; m],
        };
        g.set_category(Category::Adapter);
        let adapters = match &self.adapters {
            Some(a) => a
                .layers
                .iter()
                .map(|x| {
                    x.as_ref().map(|ad| AdapterBinding {
                        down: leaf(g, &ad.down, &mut trainable),
                        up: leaf(g, &ad.up, &mut trainable),
                        scale: a.scale,
                    })
                })
                .collect(),
            None => vec![None; m],
        };
        g.set_category(Category::QueryBranch);
        let queries = match &self.queries {
            Some(q) => q.tokens().iter().map(|x| x.as_ref().map(|t| leaf(g, t, &mut trainable))).collect(),
            None => vec![None; m],
        };
        g.set_category(Category::Head);
        let within = self.agg.within.iter().map(|t| leaf(g, t, &mut trainable)).collect();
        let across = self.agg.across.as_ref().map(|t| leaf(g, t, &mut trainable));
        let trans = self.agg.trans.as_ref().map(|l| l.map(|t| leaf(g, t, &mut trainable)));
        let head_w = make(g, &self.head_w);
        let head_b = make(g, &self.head_b);
        trainable.push(head_w);
        trainable.push(head_b);
        g.set_category(prev);
        Bound {
            backbone,
            queries,
            prompts,
            adapters,
            agg: AggregationBinding { within, across, trans },
            head_w,
            head_b,
            trainable,
        }
    }

    /// Trainable tensors in [`Model::visit_trainable_mut`] order.
    pub fn trainable_tensors(&self) -> Vec<Tensor> {
        let mut m = self.clone();
        let mut out = Vec::new();
        m.visit_trainable_mut(|t| out.push(t.clone()));
        out
    }

    /// Largest relative error between tape gradients of the mean
    /// cross-entropy and central differences, over every trainable scalar.
    pub fn gradient_check(&self, input: Input, labels: &[usize]) -> Result<f64> {
        crate::autodiff::finite_diff_check(
            |g, ids| {
                let b = self.bind_to(g, ids)?;
                let f = self.forward(g, &b, input)?;
                g.cross_entropy(f.logits, labels)
            },
            &self.trainable_tensors(),
        )
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, input: Input) -> Result<ForwardNodes> {
        let batch = input.batch();
        if batch == 0 {
            return Err(TensorError::Contract("empty batch".into()));
        }
        let cfg = &self.cfg;
        let tok = cfg.tokens();
        let prev = g.set_category(Category::BackboneMain);
        let mut zs = Vec::new();
        let mut primes = Vec::new();
        let mut taps: Option<NodeId> = None;
        let cls: NodeId;
        match input {
            Input::Images(images) => {
                let patches = g.input(vit::patchify(images, cfg)?);
                let mut z = vit::embed(g, cfg, &b.backbone, patches)?;
                zs.push(z);
                let mut nodes_all: Vec<LayerNodes> = Vec::with_capacity(cfg.m);
                for m in 0..cfg.m {
                    g.set_layer(Some(m));
                    let lw = &b.backbone.layers[m];
                    let ad = b.adapters[m].as_ref();
                    let nodes = match b.prompts[m] {
                        Some(p) => baselines::vpt_layer(g, cfg, lw, z, p, batch, tok, ad)?,
                        None => vit::layer(g, cfg, lw, z, batch, tok, ad)?,
                    };
                    if let Some(p) = b.queries[m] {
                        let q = vqt::query_branch(g, cfg, lw, p, nodes.k, nodes.v, batch, tok, ad)?;
                        primes.push(q.out);
                    }
                    z = nodes.output;
                    zs.push(z);
                    nodes_all.push(nodes);
                }
                g.set_layer(None);
                if self.strategy() == Strategy::Head2Toe {
                    let t = self.tap_matrix(g, zs[0], &nodes_all, batch)?;
                    taps = Some(g.input(t));
                }
                cls = z;
            }
            Input::Cached { cache, idx } => {
                cache.check_compatible(self)?;
                cls = g.input(cache.cls_batch(idx));
                for m in 0..cfg.m {
                    let Some(p) = b.queries[m] else { continue };
                    g.set_layer(Some(m));
                    let lw = &b.backbone.layers[m];
                    let (k, v) = match cache.layout {
                        CacheLayout::KeyValue => {
                            let k = g.input(cache.batch(m, 0, idx)?);
                            let v = g.input(cache.batch(m, 1, idx)?);
                            (k, v)
                        }
                        CacheLayout::Intermediate => {
                            let z = g.input(cache.batch(m, 0, idx)?);
                            let h = vit::pre_ln1(g, cfg, lw, z)?;
                            vit::project_kv(g, cfg, lw, h)?
                        }
                    };
                    let q = vqt::query_branch(g, cfg, lw, p, k, v, batch, tok, None)?;
                    primes.push(q.out);
                }
                g.set_layer(None);
                if self.strategy() == Strategy::Head2Toe {
                    taps = Some(g.input(cache.taps_batch(idx)?));
                }
            }
        }
        g.set_category(Category::Head);
        let res = self.head(g, b, cls, &primes, taps, batch);
        g.set_category(prev);
        let (head_input, logits) = res?;
        Ok(ForwardNodes {
            z: zs,
            primes,
            head_input,
            logits,
        })
    }

    /// Pooled taps of every sample as a `B x tap_dim` matrix.
    fn tap_matrix(&self, g: &Graph, z0: NodeId, nodes: &[LayerNodes], batch: usize) -> Result<Tensor> {
        let tok = self.cfg.tokens();
        let plan = &self.spec.pooling;
        let mut data = Vec::new();
        for b in 0..batch {
            let cols = |id: NodeId| g.value(id).columns(b * tok, (b + 1) * tok);
            let trace: Vec<LayerTrace> = nodes
                .iter()
                .map(|n| LayerTrace {
                    input: cols(n.input),
                    post_ln: cols(n.post_ln),
                    post_msa: cols(n.post_msa),
                    hidden: cols(n.hidden),
                    output: cols(n.output),
                })
                .collect();
            data.extend(baselines::head2toe_features(&cols(z0), &trace, plan)?.values);
        }
        let dim = data.len() / batch;
        Tensor::new(vec![batch, dim], data)
    }

    fn head(
        &self,
        g: &mut Graph,
        b: &Bound,
        cls: NodeId,
        primes: &[NodeId],
        taps: Option<NodeId>,
        batch: usize,
    ) -> Result<(NodeId, NodeId)> {
        let stride = g.shape(cls)[1] / batch;
        let h = if self.strategy().queries() {
            let plan = self.agg.plan;
            let t = self.spec.t;
            let mut layers = Vec::with_capacity(primes.len());
            for (i, &p) in primes.iter().enumerate() {
                layers.push(aggregation::within_graph(g, plan, p, b.agg.within.get(i).copied(), batch, t)?);
            }
            aggregation::across_graph(g, &self.cfg, plan, &layers, (cls, stride), &b.agg, batch, plan.width(t))?
        } else {
            let c = aggregation::flatten_blocks(g, &[(cls, 1)], batch)?;
            match taps {
                Some(t) => g.concat_cols(&[t, c])?,
                None => c,
            }
        };
        let h = match &self.selected {
            Some(sel) => {
                let dim = g.shape(h)[1];
                let index = (0..batch).flat_map(|r| sel.iter().map(move |&j| r * dim + j)).collect();
                g.gather(h, index, vec![batch, sel.len()])?
            }
            None => h,
        };
        let y = g.matmul(h, b.head_w)?;
        let logits = g.add_row_bias(y, b.head_b)?;
        Ok((h, logits))
    }

    /// Builds a training graph and returns it with the bound leaves and the
    /// mean cross-entropy node.
    pub fn loss_graph(&self, input: Input, labels: &[usize]) -> Result<(Graph, Bound, ForwardNodes, NodeId)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let f = self.forward(&mut g, &b, input)?;
        let prev = g.set_category(Category::Head);
        let loss = g.cross_entropy(f.logits, labels);
        g.set_category(prev);
        let loss = loss?;
        Ok((g, b, f, loss))
    }

    /// Logits in an inference graph.
    pub fn logits(&self, input: Input) -> Result<Tensor> {
        let mut g = Graph::inference();
        let b = self.bind(&mut g);
        let f = self.forward(&mut g, &b, input)?;
        Ok(g.value(f.logits).clone())
    }

    /// Head input before selection, `B x dim`.
    pub fn head_features(&self, input: Input) -> Result<Tensor> {
        let mut probe = self.clone();
        probe.selected = None;
        probe.head_w = Tensor::zeros(&[self.head_dim(), self.classes()]);
        let mut g = Graph::inference();
        let b = probe.bind(&mut g);
        let f = probe.forward(&mut g, &b, input)?;
        Ok(g.value(f.head_input).clone())
    }
}

/// Arg-max class per row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.cols();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
