//! Incremental construction of a [`ComputeGraph`] with static channel
//! bookkeeping and scoped, dot-separated node names.

use crate::error::{config_err, Result};
use crate::graph::{ComputeGraph, Init, Node, NodeId, Op, ParamSpec};
use crate::ops::{BnAttrs, ConvAttrs, PoolAttrs};
use crate::tensor::Shape4;

/// Gain applied to the fan-in scaled Gaussian initializer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gain {
    /// `sqrt(2)`, for layers fed by a ReLU.
    Relu,
    /// 1, for layers fed by unrectified features.
    Linear,
    Custom(f64),
}

impl Gain {
    fn value(self) -> f64 {
        match self {
            Gain::Relu => std::f64::consts::SQRT_2,
            Gain::Linear => 1.0,
            Gain::Custom(g) => g,
        }
    }
}

#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: ComputeGraph,
    scope: Vec<String>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finish(self) -> ComputeGraph {
        self.graph
    }

    pub fn graph(&self) -> &ComputeGraph {
        &self.graph
    }

    /// Run `f` with `name` appended to the naming scope.
    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    pub fn qualify(&self, name: &str) -> String {
        if self.scope.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.scope.join("."))
        }
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.graph.node(id).channels
    }

    fn node(&mut self, op: Op, inputs: Vec<NodeId>, name: &str, channels: usize) -> Result<NodeId> {
        let name = self.qualify(name);
        self.graph.push(Node {
            op,
            inputs,
            name,
            channels,
        })
    }

    pub fn input(&mut self, name: &str, channels: usize) -> Result<NodeId> {
        let slot = self.graph.push_input();
        self.node(Op::Input { slot }, vec![], name, channels)
    }

    pub fn label_slot(&mut self) -> usize {
        self.graph.push_label_slot()
    }

    pub fn param(
        &mut self,
        name: &str,
        shape: Shape4,
        init: Init,
        decay_exempt: bool,
    ) -> Result<NodeId> {
        let full = self.qualify(name);
        let id = self.graph.push_param(ParamSpec {
            name: full,
            shape,
            init,
            decay_exempt,
        });
        self.node(Op::Param(id), vec![], name, 0)
    }

    /// `kernel x kernel` convolution to `out_channels` with fan-in scaled
    /// Gaussian weights.
    pub fn conv(
        &mut self,
        x: NodeId,
        name: &str,
        out_channels: usize,
        kernel: usize,
        attrs: ConvAttrs,
        bias: bool,
        gain: Gain,
    ) -> Result<NodeId> {
        let ci = self.channels(x);
        if out_channels == 0 || ci == 0 {
            return Err(config_err!(
                "{}: convolution {ci} -> {out_channels} channels",
                self.qualify(name)
            ));
        }
        let std = gain.value() / ((ci * kernel * kernel) as f64).sqrt();
        self.scoped(name, |b| {
            let w = b.param(
                "weight",
                Shape4::new(out_channels, ci, kernel, kernel),
                Init::Gaussian { std },
                false,
            )?;
            let mut inputs = vec![x, w];
            if bias {
                inputs.push(b.param(
                    "bias",
                    Shape4::new(1, out_channels, 1, 1),
                    Init::Constant(0.0),
                    true,
                )?);
            }
            Ok(inputs)
        })
        .and_then(|inputs| self.node(Op::Conv2d(attrs), inputs, name, out_channels))
    }

    /// Transposed convolution; weight layout `(in, out, kh, kw)`.
    pub fn deconv(
        &mut self,
        x: NodeId,
        name: &str,
        out_channels: usize,
        kernel: usize,
        attrs: ConvAttrs,
        bias: bool,
        gain: Gain,
    ) -> Result<NodeId> {
        let ci = self.channels(x);
        if out_channels == 0 || ci == 0 {
            return Err(config_err!(
                "{}: deconvolution {ci} -> {out_channels} channels",
                self.qualify(name)
            ));
        }
        // Each output position receives ci * (k / stride)^2 contributions.
        let fan_in = (ci * kernel * kernel) as f64 / (attrs.stride.0 * attrs.stride.1) as f64;
        let std = gain.value() / fan_in.max(1.0).sqrt();
        self.scoped(name, |b| {
            let w = b.param(
                "weight",
                Shape4::new(ci, out_channels, kernel, kernel),
                Init::Gaussian { std },
                false,
            )?;
            let mut inputs = vec![x, w];
            if bias {
                inputs.push(b.param(
                    "bias",
                    Shape4::new(1, out_channels, 1, 1),
                    Init::Constant(0.0),
                    true,
                )?);
            }
            Ok(inputs)
        })
        .and_then(|inputs| self.node(Op::Deconv2d(attrs), inputs, name, out_channels))
    }

    pub fn batch_norm(&mut self, x: NodeId, name: &str, attrs: BnAttrs) -> Result<NodeId> {
        let c = self.channels(x);
        let stats = self.graph.push_bn(c);
        let (gamma, beta) = self.scoped(name, |b| -> Result<_> {
            let shape = Shape4::new(1, c, 1, 1);
            Ok((
                b.param("gamma", shape, Init::Constant(1.0), true)?,
                b.param("beta", shape, Init::Constant(0.0), true)?,
            ))
        })?;
        self.node(
            Op::BatchNorm { stats, attrs },
            vec![x, gamma, beta],
            name,
            c,
        )
    }

    pub fn relu(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let c = self.channels(x);
        self.node(Op::Relu, vec![x], name, c)
    }

    pub fn dropout(&mut self, x: NodeId, name: &str, keep_prob: f64) -> Result<NodeId> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(config_err!(
                "{}: keep_prob {keep_prob} outside (0, 1]",
                self.qualify(name)
            ));
        }
        let c = self.channels(x);
        self.node(Op::Dropout { keep_prob }, vec![x], name, c)
    }

    pub fn maxpool(&mut self, x: NodeId, name: &str, attrs: PoolAttrs) -> Result<NodeId> {
        let c = self.channels(x);
        self.node(Op::MaxPool(attrs), vec![x], name, c)
    }

    pub fn avgpool(&mut self, x: NodeId, name: &str, attrs: PoolAttrs) -> Result<NodeId> {
        let c = self.channels(x);
        self.node(Op::AvgPool(attrs), vec![x], name, c)
    }

    pub fn concat(&mut self, xs: &[NodeId], name: &str) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(config_err!("{}: concat of nothing", self.qualify(name)));
        }
        let c = xs.iter().map(|&x| self.channels(x)).sum();
        self.node(Op::Concat, xs.to_vec(), name, c)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<NodeId> {
        let (ca, cb) = (self.channels(a), self.channels(b));
        if ca != cb {
            return Err(config_err!(
                "{}: cannot add {ca} and {cb} channels",
                self.qualify(name)
            ));
        }
        self.node(Op::Add, vec![a, b], name, ca)
    }

    pub fn resize_like(&mut self, x: NodeId, reference: NodeId, name: &str) -> Result<NodeId> {
        let c = self.channels(x);
        self.node(Op::ResizeLike, vec![x, reference], name, c)
    }

    pub fn softmax_ce(
        &mut self,
        logits: NodeId,
        labels: usize,
        ignore_index: u8,
        name: &str,
    ) -> Result<NodeId> {
        self.node(
            Op::SoftmaxCe {
                labels,
                ignore_index,
            },
            vec![logits],
            name,
            0,
        )
    }
}
