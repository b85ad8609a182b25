//! Static computation graphs: declared once through [`GraphBuilder`], then
//! evaluated and differentiated in reverse mode any number of times.

use std::collections::{BTreeMap, HashMap};
use std::ops::Deref;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::kernels as loss_kernels;
use crate::nn::kernels;
use crate::tensor::{numel, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation kinds. Spatial ops accept `[C,H,W]` or batched `[N,C,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input {
        name: String,
        requires_grad: bool,
    },
    Param {
        name: String,
    },
    Zeros,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    Sum,
    Relu,
    Sigmoid,
    Tanh,
    /// Inputs: x, kernel `[C_out,C_in,k,k]`, bias `[C_out]`.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    MaxPool2d,
    Upsample {
        factor: usize,
    },
    Concat,
    SliceChannels {
        start: usize,
        len: usize,
    },
    Softmax,
    /// Inputs: logits, class-id target, per-sample label mask.
    SegCrossEntropy {
        ignore: Option<usize>,
    },
    /// Inputs: activated grid, encoded target grid, per-sample label mask.
    DetectionLoss {
        lambda_coord: f64,
        lambda_noobj: f64,
    },
    /// Inputs: prediction, target, per-sample label mask.
    Huber {
        delta: f64,
    },
    /// Inputs: k scalar losses followed by a presence vector of length k.
    WeightedSum {
        weights: Vec<f64>,
    },
    /// Inputs: k scalar losses followed by a presence vector of length k.
    GeometricMean {
        eps: f64,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Zeros => "zeros",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d => "max_pool2d",
            Op::Upsample { .. } => "upsample",
            Op::Concat => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Softmax => "softmax",
            Op::SegCrossEntropy { .. } => "seg_cross_entropy",
            Op::DetectionLoss { .. } => "detection_loss",
            Op::Huber { .. } => "huber",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::GeometricMean { .. } => "geometric_mean",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub label: String,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
    params: Vec<(String, NodeId)>,
    inputs: Vec<(String, NodeId)>,
}

/// Named parameter tensors, kept in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = tensor,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Named input tensors fed to a graph.
pub type Feed<T> = BTreeMap<String, Tensor<T>>;

/// Auxiliary forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum Aux<T> {
    None,
    Values(Vec<T>),
    Indices(Vec<usize>),
}

enum Slot<'a, T> {
    Borrowed(&'a [T]),
    Owned(Vec<T>),
}

impl<T> Deref for Slot<'_, T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        match self {
            Slot::Borrowed(s) => s,
            Slot::Owned(v) => v,
        }
    }
}

/// Result of a forward pass; holds every node value for backward.
pub struct Evaluation<'a, T> {
    graph: &'a Graph,
    values: Vec<Slot<'a, T>>,
    aux: Vec<Aux<T>>,
}

impl<T: Real> Evaluation<'_, T> {
    pub fn value(&self, node: NodeId) -> Tensor<T> {
        Tensor::new(self.graph.nodes[node.0].shape.clone(), self.values[node.0].to_vec())
            .expect("node value matches declared shape")
    }

    pub fn values(&self, node: NodeId) -> &[T] {
        &self.values[node.0]
    }

    pub fn scalar(&self, node: NodeId) -> T {
        self.values[node.0][0]
    }

    pub fn outputs(&self) -> BTreeMap<String, Tensor<T>> {
        self.graph
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.value(*id)))
            .collect()
    }
}

/// Gradients keyed by parameter name plus any `requires_grad` inputs.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: ParamStore<T>,
    pub inputs: BTreeMap<String, Tensor<T>>,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    /// Parameters referenced by the graph, with their declared shapes.
    pub fn param_decls(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.params
            .iter()
            .map(|(name, id)| (name.as_str(), self.nodes[id.0].shape.as_slice()))
    }

    pub fn input_decls(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.inputs
            .iter()
            .map(|(name, id)| (name.as_str(), self.nodes[id.0].shape.as_slice()))
    }

    /// Runs the forward pass, failing on shape mismatch or the first non-finite node.
    pub fn eval<'a, T: Real>(&'a self, params: &'a ParamStore<T>, feed: &'a Feed<T>) -> Result<Evaluation<'a, T>> {
        let mut values: Vec<Slot<'a, T>> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (slot, extra) = match &node.op {
                Op::Input { name, .. } => {
                    let t = feed.get(name).ok_or_else(|| Error::MissingInput(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::shape(
                            &node.label,
                            format!("input `{name}` has shape {:?}, declared {:?}", t.shape(), node.shape),
                        ));
                    }
                    (Slot::Borrowed(t.data()), Aux::None)
                }
                Op::Param { name } => {
                    let t = params.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::shape(
                            &node.label,
                            format!("param `{name}` has shape {:?}, declared {:?}", t.shape(), node.shape),
                        ));
                    }
                    (Slot::Borrowed(t.data()), Aux::None)
                }
                op => {
                    let ins: Vec<&[T]> = node.inputs.iter().map(|i| &*values[i.0]).collect();
                    let shapes: Vec<&[usize]> = node.inputs.iter().map(|i| self.nodes[i.0].shape.as_slice()).collect();
                    let (out, extra) = forward_op(op, &ins, &shapes, &node.shape)
                        .map_err(|detail| Error::shape(&node.label, detail))?;
                    debug_assert_eq!(out.len(), numel(&node.shape), "{}", node.label);
                    (Slot::Owned(out), extra)
                }
            };
            if slot.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    node: node.label.clone(),
                });
            }
            values.push(slot);
            aux.push(extra);
        }
        Ok(Evaluation {
            graph: self,
            values,
            aux,
        })
    }

    /// Reverse-mode sweep from a scalar node over a completed forward pass.
    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        eval: &Evaluation<'_, T>,
        seed: NodeId,
    ) -> Result<Gradients<T>> {
        let seed_node = &self.nodes[seed.0];
        if numel(&seed_node.shape) != 1 {
            return Err(Error::NonScalarSeed {
                node: seed_node.label.clone(),
                shape: seed_node.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(vec![T::one()]);
        for idx in (0..=seed.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            let ins: Vec<&[T]> = node.inputs.iter().map(|i| &*eval.values[i.0]).collect();
            let shapes: Vec<&[usize]> = node.inputs.iter().map(|i| self.nodes[i.0].shape.as_slice()).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].needs_grad).collect();
            let input_grads = backward_op(
                &node.op,
                &ins,
                &shapes,
                &eval.values[idx],
                &eval.aux[idx],
                &dout,
                &needs,
            );
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(dout);
        }

        let mut out = params.zeros_like();
        for (name, id) in &self.params {
            if let (Some(g), Some(t)) = (grads[id.0].take(), out.get_mut(name)) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient { param: name.clone() });
                }
                t.data_mut().copy_from_slice(&g);
            }
        }
        let mut inputs = BTreeMap::new();
        for (name, id) in &self.inputs {
            if !self.nodes[id.0].needs_grad {
                continue;
            }
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); numel(&self.nodes[id.0].shape)]);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { param: name.clone() });
            }
            inputs.insert(name.clone(), Tensor::new(self.nodes[id.0].shape.clone(), g)?);
        }
        Ok(Gradients { params: out, inputs })
    }
}

/// Forward pass returning the named graph outputs.
pub fn eval_graph<T: Real>(
    graph: &Graph,
    params: &ParamStore<T>,
    feed: &Feed<T>,
) -> Result<BTreeMap<String, Tensor<T>>> {
    Ok(graph.eval(params, feed)?.outputs())
}

/// Forward then backward from `seed`.
pub fn backward<T: Real>(graph: &Graph, params: &ParamStore<T>, feed: &Feed<T>, seed: NodeId) -> Result<Gradients<T>> {
    let eval = graph.eval(params, feed)?;
    graph.backward(params, &eval, seed)
}

fn forward_op<T: Real>(
    op: &Op,
    ins: &[&[T]],
    shapes: &[&[usize]],
    out_shape: &[usize],
) -> std::result::Result<(Vec<T>, Aux<T>), String> {
    let plain = |v: Vec<T>| Ok((v, Aux::None));
    match op {
        Op::Input { .. } | Op::Param { .. } => unreachable!("leaf nodes are fed directly"),
        Op::Zeros => plain(vec![T::zero(); numel(out_shape)]),
        Op::Add => plain(ins[0].iter().zip(ins[1]).map(|(a, b)| *a + *b).collect()),
        Op::Sub => plain(ins[0].iter().zip(ins[1]).map(|(a, b)| *a - *b).collect()),
        Op::Mul => plain(ins[0].iter().zip(ins[1]).map(|(a, b)| *a * *b).collect()),
        Op::Neg => plain(ins[0].iter().map(|a| -*a).collect()),
        Op::Scale(c) => {
            let c = T::of_f64(*c);
            plain(ins[0].iter().map(|a| *a * c).collect())
        }
        Op::Sum => plain(vec![ins[0].iter().copied().sum()]),
        Op::Relu => plain(kernels::relu(ins[0])),
        Op::Sigmoid => plain(ins[0].iter().map(|&x| kernels::sigmoid(x)).collect()),
        Op::Tanh => plain(ins[0].iter().map(|x| x.tanh()).collect()),
        Op::Conv2d { stride, padding } => {
            let geom = kernels::ConvGeom::new(shapes[0], shapes[1], *stride, *padding)?;
            let (out, cols) = kernels::conv2d_forward(ins[0], ins[1], ins[2], &geom);
            Ok((out, Aux::Values(cols)))
        }
        Op::MaxPool2d => {
            let (out, idx) = kernels::max_pool2d_forward(ins[0], kernels::nchw(shapes[0])?);
            Ok((out, Aux::Indices(idx)))
        }
        Op::Upsample { factor } => plain(kernels::upsample_forward(ins[0], kernels::nchw(shapes[0])?, *factor)),
        Op::Concat => plain(kernels::concat_forward(
            ins[0],
            kernels::nchw(shapes[0])?,
            ins[1],
            kernels::nchw(shapes[1])?,
        )),
        Op::SliceChannels { start, len } => {
            plain(kernels::slice_forward(ins[0], kernels::nchw(shapes[0])?, *start, *len))
        }
        Op::Softmax => plain(kernels::softmax_forward(ins[0], kernels::nchw(shapes[0])?)),
        Op::SegCrossEntropy { ignore } => {
            let (loss, probs) =
                loss_kernels::seg_ce_forward(ins[0], kernels::nchw(shapes[0])?, ins[1], ins[2], *ignore)?;
            Ok((vec![loss], Aux::Values(probs)))
        }
        Op::DetectionLoss {
            lambda_coord,
            lambda_noobj,
        } => plain(vec![loss_kernels::det_forward(
            ins[0],
            kernels::nchw(shapes[0])?,
            ins[1],
            ins[2],
            *lambda_coord,
            *lambda_noobj,
        )]),
        Op::Huber { delta } => plain(vec![loss_kernels::huber_forward(ins[0], ins[1], ins[2], *delta)]),
        Op::WeightedSum { weights } => {
            let k = weights.len();
            let losses: Vec<T> = ins[..k].iter().map(|v| v[0]).collect();
            plain(vec![loss_kernels::weighted_sum(&losses, ins[k], weights)])
        }
        Op::GeometricMean { eps } => {
            let k = ins.len() - 1;
            let losses: Vec<T> = ins[..k].iter().map(|v| v[0]).collect();
            plain(vec![loss_kernels::geometric_mean(&losses, ins[k], *eps)])
        }
    }
}

fn backward_op<T: Real>(
    op: &Op,
    ins: &[&[T]],
    shapes: &[&[usize]],
    out: &[T],
    aux: &Aux<T>,
    dout: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let when = |flag: bool, f: &dyn Fn() -> Vec<T>| if flag { Some(f()) } else { None };
    let nchw = |s: &[usize]| kernels::nchw(s).expect("validated at build time");
    match op {
        Op::Input { .. } | Op::Param { .. } | Op::Zeros => vec![],
        Op::Add => vec![when(needs[0], &|| dout.to_vec()), when(needs[1], &|| dout.to_vec())],
        Op::Sub => vec![
            when(needs[0], &|| dout.to_vec()),
            when(needs[1], &|| dout.iter().map(|d| -*d).collect()),
        ],
        Op::Mul => vec![
            when(needs[0], &|| dout.iter().zip(ins[1]).map(|(d, b)| *d * *b).collect()),
            when(needs[1], &|| dout.iter().zip(ins[0]).map(|(d, a)| *d * *a).collect()),
        ],
        Op::Neg => vec![Some(dout.iter().map(|d| -*d).collect())],
        Op::Scale(c) => {
            let c = T::of_f64(*c);
            vec![Some(dout.iter().map(|d| *d * c).collect())]
        }
        Op::Sum => vec![Some(vec![dout[0]; ins[0].len()])],
        Op::Relu => vec![Some(
            ins[0]
                .iter()
                .zip(dout)
                .map(|(x, d)| if *x > T::zero() { *d } else { T::zero() })
                .collect(),
        )],
        Op::Sigmoid => vec![Some(
            out.iter().zip(dout).map(|(y, d)| *d * *y * (T::one() - *y)).collect(),
        )],
        Op::Tanh => vec![Some(
            out.iter().zip(dout).map(|(y, d)| *d * (T::one() - *y * *y)).collect(),
        )],
        Op::Conv2d { stride, padding } => {
            let geom =
                kernels::ConvGeom::new(shapes[0], shapes[1], *stride, *padding).expect("validated at build time");
            let Aux::Values(cols) = aux else { unreachable!() };
            let (dx, dw, db) = kernels::conv2d_backward(ins[1], cols, dout, &geom, needs[0]);
            vec![dx, when(needs[1], &|| dw.clone()), when(needs[2], &|| db.clone())]
        }
        Op::MaxPool2d => {
            let Aux::Indices(idx) = aux else { unreachable!() };
            vec![Some(kernels::max_pool2d_backward(idx, dout, ins[0].len()))]
        }
        Op::Upsample { factor } => vec![Some(kernels::upsample_backward(dout, nchw(shapes[0]), *factor))],
        Op::Concat => {
            let (da, db) = kernels::concat_backward(dout, nchw(shapes[0]), nchw(shapes[1]));
            vec![when(needs[0], &|| da.clone()), when(needs[1], &|| db.clone())]
        }
        Op::SliceChannels { start, len } => vec![Some(kernels::slice_backward(dout, nchw(shapes[0]), *start, *len))],
        Op::Softmax => vec![Some(kernels::softmax_backward(out, dout, nchw(shapes[0])))],
        Op::SegCrossEntropy { ignore } => {
            let Aux::Values(probs) = aux else { unreachable!() };
            vec![
                Some(loss_kernels::seg_ce_backward(
                    probs,
                    nchw(shapes[0]),
                    ins[1],
                    ins[2],
                    *ignore,
                    dout[0],
                )),
                None,
                None,
            ]
        }
        Op::DetectionLoss {
            lambda_coord,
            lambda_noobj,
        } => vec![
            Some(loss_kernels::det_backward(
                ins[0],
                nchw(shapes[0]),
                ins[1],
                ins[2],
                *lambda_coord,
                *lambda_noobj,
                dout[0],
            )),
            None,
            None,
        ],
        Op::Huber { delta } => vec![
            Some(loss_kernels::huber_backward(ins[0], ins[1], ins[2], *delta, dout[0])),
            None,
            None,
        ],
        Op::WeightedSum { weights } => {
            let k = weights.len();
            let mut v: Vec<Option<Vec<T>>> = (0..k)
                .map(|i| {
                    let present = ins[k][i] > T::zero();
                    when(needs[i], &|| {
                        vec![if present {
                            dout[0] * T::of_f64(weights[i])
                        } else {
                            T::zero()
                        }]
                    })
                })
                .collect();
            v.push(None);
            v
        }
        Op::GeometricMean { eps } => {
            let k = ins.len() - 1;
            let losses: Vec<T> = ins[..k].iter().map(|v| v[0]).collect();
            let partials = loss_kernels::geometric_mean_partials(&losses, ins[k], *eps, out[0]);
            let mut v: Vec<Option<Vec<T>>> = partials
                .into_iter()
                .enumerate()
                .map(|(i, p)| when(needs[i], &|| vec![dout[0] * p]))
                .collect();
            v.push(None);
            v
        }
    }
}

/// Declares graph nodes, inferring and validating shapes as it goes.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: Graph,
    scopes: Vec<String>,
    param_nodes: HashMap<String, NodeId>,
    input_nodes: HashMap<String, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_scope(&mut self, scope: impl Into<String>) {
        self.scopes.push(scope.into());
    }

    pub fn pop_scope(&mut self) {
        self.scopes.pop();
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.graph.nodes[id.0].shape
    }

    fn label(&self, what: &str) -> String {
        let id = self.graph.nodes.len();
        if self.scopes.is_empty() {
            format!("{what}#{id}")
        } else {
            format!("{}/{what}#{id}", self.scopes.join("/"))
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let needs_grad = match &op {
            Op::Param { .. } => true,
            Op::Input { requires_grad, .. } => *requires_grad,
            _ => inputs.iter().any(|i| self.graph.nodes[i.0].needs_grad),
        };
        let label = self.label(op.kind());
        let id = NodeId(self.graph.nodes.len());
        self.graph.nodes.push(Node {
            op,
            inputs,
            shape,
            label,
            needs_grad,
        });
        id
    }

    fn fail(&self, what: &str, detail: impl Into<String>) -> Error {
        Error::shape(self.label(what), detail)
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.input_with_grad(name, shape, false)
    }

    pub fn input_with_grad(&mut self, name: &str, shape: &[usize], requires_grad: bool) -> Result<NodeId> {
        if let Some(&id) = self.input_nodes.get(name) {
            if self.shape(id) != shape {
                return Err(self.fail("input", format!("input `{name}` redeclared with shape {shape:?}")));
            }
            return Ok(id);
        }
        let id = self.push(
            Op::Input {
                name: name.to_string(),
                requires_grad,
            },
            vec![],
            shape.to_vec(),
        );
        self.input_nodes.insert(name.to_string(), id);
        self.graph.inputs.push((name.to_string(), id));
        Ok(id)
    }

    /// Declares (or reuses) a parameter. Reuse across call sites is how weights are shared.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(name) {
            if self.shape(id) != shape {
                return Err(self.fail(
                    "param",
                    format!("param `{name}` shape {:?} reused as {shape:?}", self.shape(id)),
                ));
            }
            return Ok(id);
        }
        let id = self.push(Op::Param { name: name.to_string() }, vec![], shape.to_vec());
        self.param_nodes.insert(name.to_string(), id);
        self.graph.params.push((name.to_string(), id));
        Ok(id)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> NodeId {
        self.push(Op::Zeros, vec![], shape.to_vec())
    }

    fn same_shape(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.fail(
                op.kind(),
                format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, vec![a, b], shape))
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(op, vec![a], shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Mul, a, b)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Neg, a)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::Scale(c), a)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum, vec![a], vec![1])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh, a)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let geom = kernels::ConvGeom::new(self.shape(x), self.shape(w), stride, padding)
            .map_err(|d| self.fail("conv2d", d))?;
        if self.shape(b) != [geom.co] {
            return Err(self.fail(
                "conv2d",
                format!(
                    "bias shape {:?} does not match {} output channels",
                    self.shape(b),
                    geom.co
                ),
            ));
        }
        let shape = with_chw(self.shape(x), geom.co, geom.ho, geom.wo);
        Ok(self.push(Op::Conv2d { stride, padding }, vec![x, w, b], shape))
    }

    pub fn max_pool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let d = kernels::nchw(self.shape(x)).map_err(|d| self.fail("max_pool2d", d))?;
        if d.h % 2 != 0 || d.w % 2 != 0 {
            return Err(self.fail("max_pool2d", format!("spatial size {}x{} is not even", d.h, d.w)));
        }
        let shape = with_chw(self.shape(x), d.c, d.h / 2, d.w / 2);
        Ok(self.push(Op::MaxPool2d, vec![x], shape))
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if ![2, 4, 8].contains(&factor) {
            return Err(self.fail("upsample", format!("unsupported factor {factor}, expected 2, 4 or 8")));
        }
        let d = kernels::nchw(self.shape(x)).map_err(|d| self.fail("upsample", d))?;
        let shape = with_chw(self.shape(x), d.c, d.h * factor, d.w * factor);
        Ok(self.push(Op::Upsample { factor }, vec![x], shape))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let da = kernels::nchw(self.shape(a)).map_err(|d| self.fail("concat", d))?;
        let db = kernels::nchw(self.shape(b)).map_err(|d| self.fail("concat", d))?;
        if (da.n, da.h, da.w) != (db.n, db.h, db.w) || self.shape(a).len() != self.shape(b).len() {
            return Err(self.fail(
                "concat",
                format!("cannot stack {:?} with {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let shape = with_chw(self.shape(a), da.c + db.c, da.h, da.w);
        Ok(self.push(Op::Concat, vec![a, b], shape))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let d = kernels::nchw(self.shape(x)).map_err(|d| self.fail("slice_channels", d))?;
        if start + len > d.c || len == 0 {
            return Err(self.fail(
                "slice_channels",
                format!("channels {start}..{} out of range for {}", start + len, d.c),
            ));
        }
        let shape = with_chw(self.shape(x), len, d.h, d.w);
        Ok(self.push(Op::SliceChannels { start, len }, vec![x], shape))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        kernels::nchw(self.shape(x)).map_err(|d| self.fail("softmax", d))?;
        Ok(self.unary(Op::Softmax, x))
    }

    fn check_mask(&self, what: &str, mask: NodeId, n: usize) -> Result<()> {
        if self.shape(mask) != [n] {
            return Err(self.fail(what, format!("label mask shape {:?}, expected [{n}]", self.shape(mask))));
        }
        Ok(())
    }

    pub fn seg_cross_entropy(
        &mut self,
        logits: NodeId,
        target: NodeId,
        mask: NodeId,
        ignore: Option<usize>,
    ) -> Result<NodeId> {
        let d = kernels::nchw(self.shape(logits)).map_err(|e| self.fail("seg_cross_entropy", e))?;
        if numel(self.shape(target)) != d.n * d.h * d.w {
            return Err(self.fail(
                "seg_cross_entropy",
                format!(
                    "target shape {:?} does not cover {}x{}x{}",
                    self.shape(target),
                    d.n,
                    d.h,
                    d.w
                ),
            ));
        }
        self.check_mask("seg_cross_entropy", mask, d.n)?;
        Ok(self.push(Op::SegCrossEntropy { ignore }, vec![logits, target, mask], vec![1]))
    }

    pub fn detection_loss(
        &mut self,
        pred: NodeId,
        target: NodeId,
        mask: NodeId,
        lambda_coord: f64,
        lambda_noobj: f64,
    ) -> Result<NodeId> {
        let d = kernels::nchw(self.shape(pred)).map_err(|e| self.fail("detection_loss", e))?;
        if self.shape(pred) != self.shape(target) || d.c < 6 {
            return Err(self.fail(
                "detection_loss",
                format!("prediction {:?} vs target {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        self.check_mask("detection_loss", mask, d.n)?;
        Ok(self.push(
            Op::DetectionLoss {
                lambda_coord,
                lambda_noobj,
            },
            vec![pred, target, mask],
            vec![1],
        ))
    }

    pub fn huber(&mut self, pred: NodeId, target: NodeId, mask: NodeId, delta: f64) -> Result<NodeId> {
        if self.shape(pred) != self.shape(target) {
            return Err(self.fail(
                "huber",
                format!("prediction {:?} vs target {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let n = if self.shape(pred).len() == 4 {
            self.shape(pred)[0]
        } else {
            1
        };
        self.check_mask("huber", mask, n)?;
        Ok(self.push(Op::Huber { delta }, vec![pred, target, mask], vec![1]))
    }

    fn check_combine(&self, what: &str, losses: &[NodeId], presence: NodeId) -> Result<()> {
        if losses.is_empty() {
            return Err(self.fail(what, "no task losses"));
        }
        if let Some(bad) = losses.iter().find(|l| self.shape(**l) != [1]) {
            return Err(self.fail(what, format!("loss node has shape {:?}", self.shape(*bad))));
        }
        if self.shape(presence) != [losses.len()] {
            return Err(self.fail(what, format!("presence shape {:?}", self.shape(presence))));
        }
        Ok(())
    }

    pub fn weighted_sum(&mut self, losses: &[NodeId], presence: NodeId, weights: &[f64]) -> Result<NodeId> {
        self.check_combine("weighted_sum", losses, presence)?;
        if weights.len() != losses.len() {
            return Err(self.fail("weighted_sum", "one weight per task required"));
        }
        let mut inputs = losses.to_vec();
        inputs.push(presence);
        Ok(self.push(
            Op::WeightedSum {
                weights: weights.to_vec(),
            },
            inputs,
            vec![1],
        ))
    }

    pub fn geometric_mean(&mut self, losses: &[NodeId], presence: NodeId, eps: f64) -> Result<NodeId> {
        self.check_combine("geometric_mean", losses, presence)?;
        let mut inputs = losses.to_vec();
        inputs.push(presence);
        Ok(self.push(Op::GeometricMean { eps }, inputs, vec![1]))
    }

    pub fn output(&mut self, name: &str, node: NodeId) {
        self.graph.outputs.push((name.to_string(), node));
    }

    pub fn finish(self) -> Graph {
        self.graph
    }
}

fn with_chw(shape: &[usize], c: usize, h: usize, w: usize) -> Vec<usize> {
    if shape.len() == 4 {
        vec![shape[0], c, h, w]
    } else {
        vec![c, h, w]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Entry budget per tensor before switching to a seeded subsample.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// Max relative error per parameter (and per `requires_grad` input).
    pub per_tensor: Vec<(String, f64)>,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences.
pub fn grad_check(
    graph: &Graph,
    params: &ParamStore<f64>,
    feed: &Feed<f64>,
    seed: NodeId,
    tolerance: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let grads = backward(graph, params, feed, seed)?;
    grad_check_against(graph, params, feed, seed, &grads, tolerance, opts)
}

/// Like [`grad_check`] but with caller-supplied analytic gradients.
pub fn grad_check_against(
    graph: &Graph,
    params: &ParamStore<f64>,
    feed: &Feed<f64>,
    seed: NodeId,
    grads: &Gradients<f64>,
    tolerance: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pick = |n: usize| -> Vec<usize> {
        if n <= opts.max_entries {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.max_entries).into_vec();
            v.sort_unstable();
            v
        }
    };
    let h = opts.step;
    let mut per_tensor = Vec::new();

    let mut probe_params = params.clone();
    for (name, analytic) in grads.params.iter() {
        let entries = pick(analytic.len());
        let mut worst: f64 = 0.0;
        for i in entries {
            let orig = probe_params.get(name).expect("param").data()[i];
            let f = |p: &mut ParamStore<f64>, v: f64| -> Result<f64> {
                p.get_mut(name).expect("param").data_mut()[i] = v;
                Ok(graph.eval(p, feed)?.scalar(seed))
            };
            let plus = f(&mut probe_params, orig + h)?;
            let minus = f(&mut probe_params, orig - h)?;
            probe_params.get_mut(name).expect("param").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        per_tensor.push((name.to_string(), worst));
    }

    let mut probe_feed = feed.clone();
    for (name, analytic) in &grads.inputs {
        let entries = pick(analytic.len());
        let mut worst: f64 = 0.0;
        for i in entries {
            let orig = probe_feed[name].data()[i];
            let mut f = |v: f64| -> Result<f64> {
                probe_feed.get_mut(name).expect("input").data_mut()[i] = v;
                Ok(graph.eval(params, &probe_feed)?.scalar(seed))
            };
            let plus = f(orig + h)?;
            let minus = f(orig - h)?;
            probe_feed.get_mut(name).expect("input").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        per_tensor.push((name.clone(), worst));
    }

    let max_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_tensor,
        max_error,
        tolerance,
        passed: max_error < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feed(entries: &[(&str, Tensor<f64>)]) -> Feed<f64> {
        entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[3]).unwrap();
        b.output("y", x);
        let g = b.finish();
        let x = Tensor::from_f64_slice(&[3], &[1.0, -2.0, 3.5]).unwrap();
        let out = eval_graph(&g, &ParamStore::new(), &feed(&[("x", x.clone())])).unwrap();
        assert_eq!(out["y"], x);
    }

    #[test]
    fn add_negate_cancels() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4]).unwrap();
        let n = b.neg(x);
        let y = b.add(x, n).unwrap();
        b.output("y", y);
        let g = b.finish();
        let x = Tensor::from_f64_slice(&[4], &[0.3, -7.0, 1e3, 2.0]).unwrap();
        let out = eval_graph(&g, &ParamStore::new(), &feed(&[("x", x)])).unwrap();
        assert!(out["y"].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[3]).unwrap();
        let s = b.sum(x);
        let sq = b.mul(x, x).unwrap();
        let s2 = b.sum(sq);
        let g = b.finish();
        let mut params = ParamStore::<f64>::new();
        params.insert("x", Tensor::from_f64_slice(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let g1 = backward(&g, &params, &Feed::new(), s).unwrap();
        assert_eq!(g1.params.get("x").unwrap().data(), &[1.0, 1.0, 1.0]);
        let g2 = backward(&g, &params, &Feed::new(), s2).unwrap();
        assert_eq!(g2.params.get("x").unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unreachable_param_gets_exact_zero() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[2]).unwrap();
        let _y = b.param("y", &[2]).unwrap();
        let s = b.sum(x);
        let g = b.finish();
        let mut params = ParamStore::<f64>::new();
        params.insert("x", Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap());
        params.insert("y", Tensor::from_f64_slice(&[2], &[3.0, 4.0]).unwrap());
        let grads = backward(&g, &params, &Feed::new(), s).unwrap();
        assert_eq!(grads.params.get("y").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[2]).unwrap();
        let y = b.relu(x);
        let g = b.finish();
        let mut params = ParamStore::<f64>::new();
        params.insert("x", Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap());
        assert!(matches!(
            backward(&g, &params, &Feed::new(), y),
            Err(Error::NonScalarSeed { .. })
        ));
    }

    #[test]
    fn input_shape_mismatch_names_node() {
        let mut b = GraphBuilder::new();
        b.push_scope("stem");
        let x = b.input("x", &[2]).unwrap();
        let y = b.relu(x);
        b.output("y", y);
        let g = b.finish();
        let err = eval_graph(&g, &ParamStore::<f64>::new(), &feed(&[("x", Tensor::zeros(&[3]))])).unwrap_err();
        assert!(err.to_string().contains("stem/input#0"), "{err}");
    }

    #[test]
    fn non_finite_names_node() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[1]).unwrap();
        let y = b.scale(x, 1e300);
        let z = b.scale(y, 1e300);
        b.output("z", z);
        let g = b.finish();
        let err = eval_graph(&g, &ParamStore::new(), &feed(&[("x", Tensor::scalar(10.0))])).unwrap_err();
        match err {
            Error::NonFinite { node } => assert_eq!(node, "scale#2"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn param_shape_conflict_fails_at_build() {
        let mut b = GraphBuilder::new();
        b.param("w", &[2]).unwrap();
        assert!(b.param("w", &[3]).is_err());
    }

    #[test]
    fn shared_param_accumulates() {
        // f = sum(w*a) + sum(w*b) uses w twice; grad = a + b.
        let mut b = GraphBuilder::new();
        let w = b.param("w", &[2]).unwrap();
        let a = b.input("a", &[2]).unwrap();
        let c = b.input("c", &[2]).unwrap();
        let wa = b.mul(w, a).unwrap();
        let wc = b.mul(w, c).unwrap();
        let s1 = b.sum(wa);
        let s2 = b.sum(wc);
        let s = b.add(s1, s2).unwrap();
        let g = b.finish();
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::from_f64_slice(&[2], &[0.5, -1.0]).unwrap());
        let f = feed(&[
            ("a", Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap()),
            ("c", Tensor::from_f64_slice(&[2], &[10.0, 20.0]).unwrap()),
        ]);
        let grads = backward(&g, &params, &f, s).unwrap();
        assert_eq!(grads.params.get("w").unwrap().data(), &[11.0, 22.0]);
    }
}
