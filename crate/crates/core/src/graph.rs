//! Static computation graphs with a recorded tape for reverse-mode
//! differentiation.
//!
//! A [`ComputeGraph`] is an append-only list of [`Node`]s in topological
//! order plus the specs of every trainable tensor. A [`Network`] pairs a
//! graph with materialized [`Param`]s and batch-norm running statistics and
//! executes it: `forward` records a tape, `backward` walks it in reverse and
//! accumulates into `Param::grad`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Error, Result};
use crate::ops::{self, BnAttrs, BnCache, ConvAttrs, Mode, PoolAttrs, RunningStats};
use crate::tensor::{LabelMap, Scalar, Shape4, Tensor4};

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Gaussian { std: f64 },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape4,
    pub init: Init,
    /// Excluded from weight decay (batch-norm affine terms and biases).
    pub decay_exempt: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input {
        slot: usize,
    },
    Param(ParamId),
    /// Inputs `[x, w]` or `[x, w, b]`.
    Conv2d(ConvAttrs),
    /// Inputs `[x, w]` or `[x, w, b]`; weight is `(in, out, kh, kw)`.
    Deconv2d(ConvAttrs),
    MaxPool(PoolAttrs),
    AvgPool(PoolAttrs),
    /// Inputs `[x, reference]`: bilinear resize of `x` to the spatial size
    /// of `reference`. No gradient flows to `reference`.
    ResizeLike,
    /// Inputs `[x, gamma, beta]`.
    BatchNorm {
        stats: usize,
        attrs: BnAttrs,
    },
    Relu,
    Dropout {
        keep_prob: f64,
    },
    Concat,
    Add,
    /// Inputs `[logits]`; output is a `(1, 1, 1, 1)` scalar.
    SoftmaxCe {
        labels: usize,
        ignore_index: u8,
    },
}

impl Op {
    /// Convolutions and transposed convolutions carry learned spatial
    /// weights; these are the layers counted as depth.
    pub fn is_weighted(&self) -> bool {
        matches!(self, Op::Conv2d(_) | Op::Deconv2d(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub name: String,
    /// Static channel count of the output (0 for scalars and parameters).
    pub channels: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    params: Vec<ParamSpec>,
    bn_channels: Vec<usize>,
    num_inputs: usize,
    num_label_slots: usize,
}

impl ComputeGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.params
    }

    /// Channel counts of every batch-norm running-stat slot.
    pub fn bn_channels(&self) -> &[usize] {
        &self.bn_channels
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    pub fn num_label_slots(&self) -> usize {
        self.num_label_slots
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.shape.numel() as u64).sum()
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub(crate) fn push(&mut self, node: Node) -> Result<NodeId> {
        let id = self.nodes.len();
        if let Some(&bad) = node.inputs.iter().find(|&&i| i >= id) {
            return Err(config_err!(
                "node '{}' consumes node {bad} that does not precede it",
                node.name
            ));
        }
        self.nodes.push(node);
        Ok(id)
    }

    pub(crate) fn push_param(&mut self, spec: ParamSpec) -> ParamId {
        self.params.push(spec);
        self.params.len() - 1
    }

    pub(crate) fn push_bn(&mut self, channels: usize) -> usize {
        self.bn_channels.push(channels);
        self.bn_channels.len() - 1
    }

    pub(crate) fn push_input(&mut self) -> usize {
        self.num_inputs += 1;
        self.num_inputs - 1
    }

    pub(crate) fn push_label_slot(&mut self) -> usize {
        self.num_label_slots += 1;
        self.num_label_slots - 1
    }

    /// Nodes that `outputs` transitively depend on.
    pub fn ancestors(&self, outputs: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        for &o in outputs {
            needed[o] = true;
        }
        for id in (0..self.nodes.len()).rev() {
            if needed[id] {
                for &i in &self.nodes[id].inputs {
                    needed[i] = true;
                }
            }
        }
        needed
    }

    /// Static shape of every node reachable from the inputs, given the
    /// shape fed to each input slot. Errors name the offending node.
    pub fn infer_shapes(&self, inputs: &[Shape4]) -> Result<Vec<Shape4>> {
        let mut shapes: Vec<Shape4> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let s = |k: usize| shapes[node.inputs[k]];
            let shape = match &node.op {
                Op::Input { slot } => inputs
                    .get(*slot)
                    .copied()
                    .ok_or_else(|| config_err!("no shape given for input slot {slot}")),
                Op::Param(p) => Ok(self.params[*p].shape),
                Op::Conv2d(a) => ops::conv2d_output_shape(s(0), s(1), a),
                Op::Deconv2d(a) => ops::deconv2d_output_shape(s(0), s(1), a),
                Op::MaxPool(a) | Op::AvgPool(a) => a.output_shape(s(0)),
                Op::ResizeLike => Ok(Shape4::new(s(0).n, s(0).c, s(1).h, s(1).w)),
                Op::BatchNorm { .. } | Op::Relu | Op::Dropout { .. } => Ok(s(0)),
                Op::Concat => {
                    let first = s(0);
                    let mut c = 0;
                    for k in 0..node.inputs.len() {
                        let t = s(k);
                        if (t.n, t.h, t.w) != (first.n, first.h, first.w) {
                            return Err(config_err!(
                                "node '{}': concat input {} has shape {t} but input 0 has {first}",
                                node.name,
                                self.nodes[node.inputs[k]].name
                            ));
                        }
                        c += t.c;
                    }
                    Ok(Shape4::new(first.n, c, first.h, first.w))
                }
                Op::Add => {
                    if s(0) != s(1) {
                        Err(config_err!("cannot add {} and {}", s(0), s(1)))
                    } else {
                        Ok(s(0))
                    }
                }
                Op::SoftmaxCe { .. } => Ok(Shape4::new(1, 1, 1, 1)),
            }
            .map_err(|e| match e {
                Error::Config(msg) if !msg.starts_with("node '") => {
                    config_err!("node '{}': {msg}", node.name)
                }
                other => other,
            })?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Longest chain of weighted layers ending at each node.
    pub fn weighted_depths(&self) -> Vec<usize> {
        let mut depth = vec![0usize; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            let base = node.inputs.iter().map(|&i| depth[i]).max().unwrap_or(0);
            depth[id] = base + usize::from(node.op.is_weighted());
        }
        depth
    }
}

/// A trainable tensor with its gradient and momentum buffer.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
    pub momentum_buf: Tensor4<T>,
    pub decay_exempt: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor4<T>, decay_exempt: bool) -> Self {
        let shape = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Tensor4::zeros(shape),
            momentum_buf: Tensor4::zeros(shape),
            decay_exempt,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Everything fed to one forward pass.
#[derive(Debug, Clone)]
pub struct Feed<'a, T> {
    pub inputs: Vec<&'a Tensor4<T>>,
    pub labels: Vec<&'a LabelMap>,
    pub mode: Mode,
    /// Seed for dropout masks; each dropout node derives its own stream.
    pub seed: u64,
}

impl<'a, T> Feed<'a, T> {
    pub fn infer(inputs: Vec<&'a Tensor4<T>>) -> Self {
        Self {
            inputs,
            labels: Vec::new(),
            mode: Mode::Infer,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
enum Aux<T> {
    None,
    Argmax(Vec<usize>),
    Bn(BnCache<T>),
    Mask(Option<Vec<T>>),
    Loss { value: f64, grad: Tensor4<T> },
}

#[derive(Debug, Clone)]
struct Tape<T> {
    values: Vec<Option<Tensor4<T>>>,
    aux: Vec<Aux<T>>,
}

/// SplitMix64 finalizer, used to derive per-node random streams.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A graph together with its parameters, running statistics and the tape
/// of the last forward pass.
#[derive(Debug, Clone)]
pub struct Network<T> {
    graph: ComputeGraph,
    pub params: Vec<Param<T>>,
    pub stats: Vec<RunningStats<T>>,
    tape: Option<Tape<T>>,
}

impl<T: Scalar> Network<T> {
    /// Materialize every parameter from its spec. Values are drawn in spec
    /// order from one stream seeded by `seed`, in `f64`, so networks of
    /// different precision built from the same seed agree up to rounding.
    pub fn new(graph: ComputeGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = graph
            .params
            .iter()
            .map(|spec| {
                let value = match spec.init {
                    Init::Constant(v) => Tensor4::full(spec.shape, T::of(v)),
                    Init::Gaussian { std } => {
                        let normal = Normal::new(0.0, std).expect("finite positive std");
                        Tensor4::from_fn(spec.shape, |_| T::of(normal.sample(&mut rng)))
                    }
                };
                Param::new(spec.name.clone(), value, spec.decay_exempt)
            })
            .collect();
        let stats = graph
            .bn_channels
            .iter()
            .map(|&c| RunningStats::new(c))
            .collect();
        Self {
            graph,
            params,
            stats,
            tape: None,
        }
    }

    pub fn graph(&self) -> &ComputeGraph {
        &self.graph
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.value.len() as u64).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }

    /// Same parameter values and statistics in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            graph: self.graph.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param::new(p.name.clone(), p.value.cast(), p.decay_exempt))
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.iter().map(|v| U::of(v.f64())).collect(),
                    var: s.var.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
            tape: None,
        }
    }

    /// Evaluate every node `outputs` depends on and record the tape.
    pub fn forward(&mut self, feed: &Feed<'_, T>, outputs: &[NodeId]) -> Result<()> {
        if feed.inputs.len() != self.graph.num_inputs {
            return Err(Error::Usage(format!(
                "graph has {} inputs, {} fed",
                self.graph.num_inputs,
                feed.inputs.len()
            )));
        }
        let needed = self.graph.ancestors(outputs);
        let n = self.graph.nodes.len();
        let mut tape = Tape {
            values: vec![None; n],
            aux: vec![Aux::None; n],
        };
        for id in 0..n {
            if !needed[id] {
                continue;
            }
            let (value, aux) = self.eval_node(id, feed, &tape).map_err(|e| match e {
                Error::Config(msg) if !msg.starts_with("node '") => {
                    config_err!("node '{}': {msg}", self.graph.nodes[id].name)
                }
                other => other,
            })?;
            tape.values[id] = value;
            tape.aux[id] = aux;
        }
        self.tape = Some(tape);
        Ok(())
    }

    fn eval_node(
        &mut self,
        id: NodeId,
        feed: &Feed<'_, T>,
        tape: &Tape<T>,
    ) -> Result<(Option<Tensor4<T>>, Aux<T>)> {
        let node = &self.graph.nodes[id];
        let params = &self.params;
        let get = |k: usize| -> &Tensor4<T> {
            let src = node.inputs[k];
            match self.graph.nodes[src].op {
                Op::Param(p) => &params[p].value,
                _ => tape.values[src]
                    .as_ref()
                    .expect("inputs evaluated before consumers"),
            }
        };
        let out = match &node.op {
            Op::Input { slot } => (Some(feed.inputs[*slot].clone()), Aux::None),
            Op::Param(_) => (None, Aux::None),
            Op::Conv2d(a) => {
                let b = (node.inputs.len() > 2).then(|| get(2));
                (Some(ops::conv2d(get(0), get(1), b, a)?), Aux::None)
            }
            Op::Deconv2d(a) => {
                let b = (node.inputs.len() > 2).then(|| get(2));
                (Some(ops::deconv2d(get(0), get(1), b, a)?), Aux::None)
            }
            Op::MaxPool(a) => {
                let (y, idx) = ops::maxpool2d(get(0), a)?;
                (Some(y), Aux::Argmax(idx))
            }
            Op::AvgPool(a) => (Some(ops::avgpool2d(get(0), a)?), Aux::None),
            Op::ResizeLike => {
                let r = get(1).shape();
                (Some(ops::bilinear_resize(get(0), r.h, r.w)), Aux::None)
            }
            Op::BatchNorm { stats, attrs } => {
                let (x, g, b) = (get(0), get(1), get(2));
                let (y, cache) =
                    ops::batch_norm(x, g, b, &mut self.stats[*stats], feed.mode, attrs)?;
                (Some(y), Aux::Bn(cache))
            }
            Op::Relu => (Some(ops::relu(get(0))), Aux::None),
            Op::Dropout { keep_prob } => {
                let (y, mask) = ops::dropout(
                    get(0),
                    *keep_prob,
                    feed.mode,
                    mix_seed(feed.seed, id as u64),
                )?;
                (Some(y), Aux::Mask(mask))
            }
            Op::Concat => {
                let xs: Vec<&Tensor4<T>> = (0..node.inputs.len()).map(get).collect();
                (Some(ops::concat_channels(&xs)?), Aux::None)
            }
            Op::Add => (Some(ops::eltwise_add(get(0), get(1))?), Aux::None),
            Op::SoftmaxCe {
                labels,
                ignore_index,
            } => {
                let map = feed
                    .labels
                    .get(*labels)
                    .ok_or_else(|| Error::Usage(format!("label slot {labels} not fed")))?;
                let (value, grad) = ops::softmax_ce_loss(get(0), map, *ignore_index)?;
                (
                    Some(Tensor4::scalar(T::of(value))),
                    Aux::Loss { value, grad },
                )
            }
        };
        Ok(out)
    }

    /// Output of `id` from the last forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor4<T>> {
        let tape = self.tape.as_ref()?;
        match self.graph.nodes[id].op {
            Op::Param(p) => Some(&self.params[p].value),
            _ => tape.values[id].as_ref(),
        }
    }

    /// Loss value of a `SoftmaxCe` node from the last forward pass, at full
    /// `f64` accumulation precision.
    pub fn loss(&self, id: NodeId) -> Option<f64> {
        match self.tape.as_ref()?.aux[id] {
            Aux::Loss { value, .. } => Some(value),
            _ => None,
        }
    }

    /// Accumulate the gradient of `sum_k weights[k] * loss_k` into every
    /// parameter's `grad`.
    pub fn backward(&mut self, losses: &[NodeId], weights: &[f64]) -> Result<()> {
        if losses.len() != weights.len() {
            return Err(Error::Usage(format!(
                "{} loss nodes but {} weights",
                losses.len(),
                weights.len()
            )));
        }
        let mut seeds = Vec::with_capacity(losses.len());
        for (&id, &w) in losses.iter().zip(weights) {
            if !matches!(self.graph.nodes[id].op, Op::SoftmaxCe { .. }) {
                return Err(Error::Usage(format!(
                    "node '{}' is not a loss",
                    self.graph.nodes[id].name
                )));
            }
            seeds.push((id, Tensor4::scalar(T::of(w))));
        }
        self.backward_from(seeds, false).map(|_| ())
    }

    /// General reverse pass from arbitrary seed gradients. Returns the
    /// gradient reaching each input slot when `input_grads` is set.
    pub fn backward_from(
        &mut self,
        seeds: Vec<(NodeId, Tensor4<T>)>,
        input_grads: bool,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        let tape = self
            .tape
            .as_ref()
            .ok_or_else(|| Error::Usage("backward called before forward".into()))?;
        let graph = &self.graph;
        let n = graph.nodes.len();

        let mut requires = vec![false; n];
        for (id, node) in graph.nodes.iter().enumerate() {
            requires[id] = match node.op {
                Op::Param(_) => true,
                Op::Input { .. } => input_grads,
                _ => node.inputs.iter().any(|&i| requires[i]),
            };
        }

        let mut grads: Vec<Option<Tensor4<T>>> = vec![None; n];
        for (id, g) in seeds {
            if tape.values[id].is_none() {
                return Err(Error::Usage(format!(
                    "node '{}' was not evaluated in the last forward pass",
                    graph.nodes[id].name
                )));
            }
            accumulate(&mut grads, id, g);
        }
        let mut inputs_out: Vec<Option<Tensor4<T>>> = vec![None; graph.num_inputs];

        let params = &mut self.params;
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &graph.nodes[id];
            let value = |k: usize| -> &Tensor4<T> {
                let src = node.inputs[k];
                match graph.nodes[src].op {
                    Op::Param(p) => &params[p].value,
                    _ => tape.values[src].as_ref().expect("evaluated"),
                }
            };
            let mut emit: Vec<(NodeId, Tensor4<T>)> = Vec::new();
            match &node.op {
                Op::Input { slot } => {
                    inputs_out[*slot] = Some(g);
                    continue;
                }
                Op::Param(p) => {
                    params[*p].grad.add_assign(&g);
                    continue;
                }
                Op::Conv2d(a) | Op::Deconv2d(a) => {
                    let x_id = node.inputs[0];
                    let x = value(0);
                    let w = value(1);
                    let with_bias = node.inputs.len() > 2;
                    let grads_conv = if matches!(node.op, Op::Conv2d(_)) {
                        ops::conv2d_backward(x, w, with_bias, &g, a, requires[x_id])?
                    } else {
                        ops::deconv2d_backward(x, w, with_bias, &g, a, requires[x_id])?
                    };
                    if let Some(gx) = grads_conv.x {
                        emit.push((x_id, gx));
                    }
                    emit.push((node.inputs[1], grads_conv.w));
                    if let Some(gb) = grads_conv.b {
                        emit.push((node.inputs[2], gb));
                    }
                }
                Op::MaxPool(_) => {
                    let Aux::Argmax(idx) = &tape.aux[id] else {
                        unreachable!("maxpool aux")
                    };
                    let shape = node_shape(tape, node.inputs[0]);
                    emit.push((node.inputs[0], ops::maxpool2d_backward(shape, idx, &g)));
                }
                Op::AvgPool(a) => {
                    let shape = node_shape(tape, node.inputs[0]);
                    emit.push((node.inputs[0], ops::avgpool2d_backward(shape, a, &g)));
                }
                Op::ResizeLike => {
                    let shape = node_shape(tape, node.inputs[0]);
                    emit.push((node.inputs[0], ops::bilinear_resize_backward(shape, &g)));
                }
                Op::BatchNorm { .. } => {
                    let Aux::Bn(cache) = &tape.aux[id] else {
                        unreachable!("bn aux")
                    };
                    let bn = ops::batch_norm_backward(&g, value(1), cache);
                    emit.push((node.inputs[0], bn.x));
                    emit.push((node.inputs[1], bn.gamma));
                    emit.push((node.inputs[2], bn.beta));
                }
                Op::Relu => {
                    let x = tape.values[id].as_ref().expect("evaluated");
                    emit.push((node.inputs[0], ops::relu_backward(x, &g)));
                }
                Op::Dropout { .. } => {
                    let Aux::Mask(mask) = &tape.aux[id] else {
                        unreachable!("dropout aux")
                    };
                    emit.push((node.inputs[0], ops::dropout_backward(&g, mask.as_deref())));
                }
                Op::Concat => {
                    let channels: Vec<usize> =
                        node.inputs.iter().map(|&i| node_shape(tape, i).c).collect();
                    for (k, part) in ops::concat_backward(&g, &channels).into_iter().enumerate() {
                        emit.push((node.inputs[k], part));
                    }
                }
                Op::Add => {
                    emit.push((node.inputs[0], g.clone()));
                    emit.push((node.inputs[1], g));
                }
                Op::SoftmaxCe { .. } => {
                    let Aux::Loss { grad, .. } = &tape.aux[id] else {
                        unreachable!("loss aux")
                    };
                    let mut gl = grad.clone();
                    gl.scale(g.data()[0]);
                    emit.push((node.inputs[0], gl));
                }
            }
            for (target, gt) in emit {
                if requires[target] {
                    accumulate(&mut grads, target, gt);
                }
            }
        }
        Ok(inputs_out)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor4<T>>], id: NodeId, g: Tensor4<T>) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn node_shape<T: Scalar>(tape: &Tape<T>, id: NodeId) -> Shape4 {
    tape.values[id].as_ref().expect("evaluated").shape()
}
