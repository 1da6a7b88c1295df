//! Reverse-mode differentiation on an explicit tape.
//!
//! Every op is evaluated eagerly when it is recorded. A node keeps the
//! buffers its backward rule needs only when that rule will actually run,
//! i.e. when the node requires a gradient, and then only the buffers needed
//! for the inputs that themselves require gradients. [`Graph::retention`]
//! reports those bytes per node and per category; [`Graph::backward`]
//! records which buffers it read so the two can be compared.
//!
//! Leaves (parameters and inputs) never count as retained activations.

mod gradcheck;
mod ops;

use std::collections::{BTreeMap, BTreeSet};

use crate::tensor::{Result, Tensor, TensorError};

pub use gradcheck::{finite_diff_check, finite_diff_check_with_step};
pub use ops::AttentionSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of a model a recorded op belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    BackboneMain,
    QueryBranch,
    PromptBranch,
    Adapter,
    Head,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::BackboneMain,
        Category::QueryBranch,
        Category::PromptBranch,
        Category::Adapter,
        Category::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::BackboneMain => "backbone-main",
            Category::QueryBranch => "query-branch",
            Category::PromptBranch => "prompt-branch",
            Category::Adapter => "adapter",
            Category::Head => "head",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Param,
    Input,
}

pub(crate) struct Node {
    pub op: ops::Op,
    pub parents: Vec<NodeId>,
    pub value: Tensor,
    pub requires_grad: bool,
    pub category: Category,
    pub layer: Option<usize>,
}

impl Node {
    fn is_leaf(&self) -> bool {
        matches!(self.op, ops::Op::Leaf(_))
    }
}

/// Public view of one tape record.
#[derive(Debug, Clone)]
pub struct NodeInfo {
    pub op: &'static str,
    pub parents: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub category: Category,
    pub layer: Option<usize>,
    pub retained_bytes: usize,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    category: Category,
    layer: Option<usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            category: Category::BackboneMain,
            layer: None,
        }
    }

    /// A graph in which no node requires a gradient; nothing is retained.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Sets the category for subsequently recorded ops, returning the old one.
    pub fn set_category(&mut self, c: Category) -> Category {
        std::mem::replace(&mut self.category, c)
    }

    pub fn set_layer(&mut self, layer: Option<usize>) -> Option<usize> {
        std::mem::replace(&mut self.layer, layer)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn category(&self, id: NodeId) -> Category {
        self.nodes[id.0].category
    }

    pub fn info(&self, id: NodeId) -> NodeInfo {
        let n = &self.nodes[id.0];
        NodeInfo {
            op: n.op.name(),
            parents: n.parents.clone(),
            shape: n.value.shape().to_vec(),
            requires_grad: n.requires_grad,
            category: n.category,
            layer: n.layer,
            retained_bytes: self.retention().per_node[id.0],
        }
    }

    /// Trainable leaf. Requires a gradient unless the graph is in inference mode.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        let rg = self.grad_enabled;
        self.leaf(t, LeafKind::Param, rg)
    }

    /// Constant leaf (data or frozen weights).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, LeafKind::Input, false)
    }

    fn leaf(&mut self, t: Tensor, kind: LeafKind, requires_grad: bool) -> NodeId {
        debug_assert!(t.all_finite(), "non-finite leaf");
        self.nodes.push(Node {
            op: ops::Op::Leaf(kind),
            parents: Vec::new(),
            value: t,
            requires_grad,
            category: self.category,
            layer: self.layer,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, op: ops::Op, parents: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { op.without_buffers() };
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
            category: self.category,
            layer: self.layer,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn parent_mask(&self, node: &Node) -> Vec<bool> {
        node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect()
    }

    /// Bytes each node keeps alive for the backward pass.
    pub fn retention(&self) -> Retention {
        let n = self.nodes.len();
        let mut owner: Vec<Option<(Category, Option<usize>)>> = vec![None; n];
        let mut internal = vec![0usize; n];
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad || node.is_leaf() {
                continue;
            }
            let saved = node.op.saved(&self.parent_mask(node));
            for (p, needed) in node.parents.iter().zip(&saved.inputs) {
                if *needed && !self.nodes[p.0].is_leaf() && owner[p.0].is_none() {
                    owner[p.0] = Some((node.category, node.layer));
                }
            }
            if saved.output && owner[i].is_none() {
                owner[i] = Some((node.category, node.layer));
            }
            internal[i] = saved.internal_bytes;
        }
        let mut r = Retention::default();
        r.per_node = vec![0; n];
        for i in 0..n {
            let node = &self.nodes[i];
            if let Some((cat, layer)) = owner[i] {
                let b = node.value.bytes();
                r.per_node[i] += b;
                r.add(cat, layer, b);
            }
            if internal[i] > 0 {
                r.per_node[i] += internal[i];
                r.add(node.category, node.layer, internal[i]);
            }
        }
        r
    }

    /// Ids of nodes that require a gradient and lie on a path to `loss`.
    pub fn backward_closure(&self, loss: NodeId) -> BTreeSet<NodeId> {
        let mut mark = vec![false; loss.0 + 1];
        mark[loss.0] = self.nodes[loss.0].requires_grad;
        for i in (0..=loss.0).rev() {
            if !mark[i] {
                continue;
            }
            for p in &self.nodes[i].parents {
                if self.nodes[p.0].requires_grad {
                    mark[p.0] = true;
                }
            }
        }
        mark.iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Differentiates a scalar `loss` with respect to every node in its
    /// backward closure.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let closure = self.backward_closure(loss);
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        let mut tracker = ReadTracker::default();
        let mut live = 0usize;
        let mut peak = 0usize;
        if closure.contains(&loss) {
            let g = Tensor::full(lv.shape(), 1.0);
            live += g.bytes();
            peak = live;
            grads[loss.0] = Some(g);
        }
        for i in (0..=loss.0).rev() {
            if !closure.contains(&NodeId(i)) {
                continue;
            }
            let node = &self.nodes[i];
            if node.is_leaf() {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            let mask = self.parent_mask(node);
            let parent_grads = ops::backward(self, NodeId(i), g, &mask, &mut tracker)?;
            for ((p, pg), needed) in node.parents.iter().zip(parent_grads).zip(&mask) {
                if !*needed {
                    continue;
                }
                let pg = pg.expect("backward rule omitted a required parent gradient");
                if !pg.all_finite() {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
                match &mut lower[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => {
                        live += pg.bytes();
                        *slot = Some(pg);
                    }
                }
            }
            peak = peak.max(live);
            // An intermediate gradient is dead once propagated to its parents.
            live -= g.bytes();
        }
        let map: BTreeMap<NodeId, Tensor> = grads
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (NodeId(i), g)))
            .collect();
        let mut read_bytes = 0;
        for id in &tracker.values {
            read_bytes += self.nodes[id.0].value.bytes();
        }
        for id in &tracker.internals {
            read_bytes += self.nodes[id.0].op.internal_bytes();
        }
        Ok(Gradients {
            map,
            read_bytes,
            peak_grad_bytes: peak,
        })
    }
}

#[derive(Default)]
pub(crate) struct ReadTracker {
    values: BTreeSet<NodeId>,
    internals: BTreeSet<NodeId>,
}

impl ReadTracker {
    /// Reads the stored value of `id` during backward.
    pub(crate) fn value<'g>(&mut self, g: &'g Graph, id: NodeId) -> &'g Tensor {
        if !g.nodes[id.0].is_leaf() {
            self.values.insert(id);
        }
        &g.nodes[id.0].value
    }

    pub(crate) fn internal(&mut self, id: NodeId) {
        self.internals.insert(id);
    }
}

/// Retained-for-backward bytes, broken down by node, category and layer.
#[derive(Debug, Clone, Default)]
pub struct Retention {
    pub per_node: Vec<usize>,
    pub by_category: BTreeMap<Category, usize>,
    pub by_layer: BTreeMap<usize, usize>,
    pub total: usize,
}

impl Retention {
    fn add(&mut self, cat: Category, layer: Option<usize>, bytes: usize) {
        *self.by_category.entry(cat).or_default() += bytes;
        if let Some(l) = layer {
            *self.by_layer.entry(l).or_default() += bytes;
        }
        self.total += bytes;
    }

    pub fn category(&self, c: Category) -> usize {
        self.by_category.get(&c).copied().unwrap_or(0)
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    map: BTreeMap<NodeId, Tensor>,
    read_bytes: usize,
    peak_grad_bytes: usize,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn keys(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.map.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Bytes of stored activations the backward pass actually read.
    pub fn read_bytes(&self) -> usize {
        self.read_bytes
    }

    /// Largest total size of gradient buffers alive at once.
    pub fn peak_grad_bytes(&self) -> usize {
        self.peak_grad_bytes
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.map.remove(&id)
    }
}
