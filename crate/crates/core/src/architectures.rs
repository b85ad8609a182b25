//! Declarative model family: shared residual encoder, FCN8-style dense
//! decoders, a grid detection decoder, single- and two-stream assembly, and
//! parameter/MAC accounting.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, NodeId, Op, ParamStore};
use crate::losses::Task;
use crate::nn::{self, kernels};
use crate::tensor::Tensor;

pub const ENCODER: &str = "encoder";
pub const FUSION: &str = "fusion";
pub const FRAME_CURR: &str = "frame_curr";
pub const FRAME_PREV: &str = "frame_prev";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub base_width: usize,
    #[serde(default = "three")]
    pub input_channels: usize,
    pub input_size: usize,
}

fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DecoderKind {
    Segmentation { num_classes: usize },
    Detection { num_classes: usize, grid: usize },
    Depth,
    Motion,
}

impl DecoderKind {
    pub fn task(&self) -> Task {
        match self {
            DecoderKind::Segmentation { .. } => Task::Segmentation,
            DecoderKind::Detection { .. } => Task::Detection,
            DecoderKind::Depth => Task::Depth,
            DecoderKind::Motion => Task::Motion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    pub name: String,
    /// Read the fused two-frame taps instead of the current frame's. Motion always does.
    #[serde(default)]
    pub fused: bool,
}

impl DecoderSpec {
    pub fn new(name: impl Into<String>, kind: DecoderKind) -> Self {
        Self {
            kind,
            name: name.into(),
            fused: false,
        }
    }

    pub fn fused(mut self) -> Self {
        self.fused = true;
        self
    }

    pub fn reads_fused(&self) -> bool {
        self.fused || self.kind == DecoderKind::Motion
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    None,
    Concat,
    ConvLstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub num_streams: usize,
    #[serde(default)]
    pub fusion: Fusion,
    #[serde(default = "yes")]
    pub share_encoder: bool,
}

fn yes() -> bool {
    true
}

impl StreamSpec {
    pub fn single() -> Self {
        Self {
            num_streams: 1,
            fusion: Fusion::None,
            share_encoder: true,
        }
    }

    pub fn two(fusion: Fusion) -> Self {
        Self {
            num_streams: 2,
            fusion,
            share_encoder: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub encoder: EncoderSpec,
    pub streams: StreamSpec,
    pub decoders: Vec<DecoderSpec>,
    #[serde(default)]
    pub auxiliary: BTreeSet<String>,
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.base_width == 0 {
            return Err(Error::spec("encoder.base_width", "must be positive"));
        }
        if e.input_channels == 0 {
            return Err(Error::spec("encoder.input_channels", "must be positive"));
        }
        if e.input_size == 0 || !e.input_size.is_multiple_of(32) {
            return Err(Error::spec(
                "encoder.input_size",
                format!("{} is not a positive multiple of 32", e.input_size),
            ));
        }
        let s = &self.streams;
        match (s.num_streams, s.fusion) {
            (1, Fusion::None) => {}
            (1, _) => return Err(Error::spec("streams.fusion", "a single stream cannot fuse")),
            (2, Fusion::None) => {
                return Err(Error::spec(
                    "streams.fusion",
                    "two streams need concat or conv_lstm fusion",
                ))
            }
            (2, _) => {}
            (n, _) => return Err(Error::spec("streams.num_streams", format!("{n} is not 1 or 2"))),
        }
        if s.num_streams == 2 && !s.share_encoder {
            return Err(Error::spec(
                "streams.share_encoder",
                "two-stream models share their encoder",
            ));
        }
        if self.decoders.is_empty() {
            return Err(Error::spec("decoders", "at least one decoder is required"));
        }
        let mut names = BTreeSet::new();
        for (i, d) in self.decoders.iter().enumerate() {
            let field = |f: &str| format!("decoders[{i}].{f}");
            if d.name.is_empty() || d.name == ENCODER || d.name == FUSION || d.name.contains('.') {
                return Err(Error::spec(
                    field("name"),
                    format!("`{}` is not a usable decoder name", d.name),
                ));
            }
            if !names.insert(d.name.as_str()) {
                return Err(Error::spec(field("name"), format!("duplicate decoder `{}`", d.name)));
            }
            match d.kind {
                DecoderKind::Segmentation { num_classes } if num_classes < 2 => {
                    return Err(Error::spec(
                        field("kind.num_classes"),
                        "segmentation needs at least 2 classes",
                    ))
                }
                DecoderKind::Detection { num_classes, grid } => {
                    if num_classes < 1 {
                        return Err(Error::spec(field("kind.num_classes"), "detection needs a class"));
                    }
                    if grid != e.input_size / 8 {
                        return Err(Error::spec(
                            field("kind.grid"),
                            format!("grid {grid} must equal input_size/8 = {}", e.input_size / 8),
                        ));
                    }
                }
                _ => {}
            }
            if d.reads_fused() && s.num_streams != 2 {
                return Err(Error::spec(field("fused"), "fused inputs need a two-stream model"));
            }
        }
        for aux in &self.auxiliary {
            if !names.contains(aux.as_str()) {
                return Err(Error::spec("auxiliary", format!("`{aux}` is not a decoder")));
            }
        }
        if names.len() == self.auxiliary.len() {
            return Err(Error::spec("auxiliary", "every decoder is auxiliary"));
        }
        Ok(())
    }

    pub fn decoder(&self, name: &str) -> Option<&DecoderSpec> {
        self.decoders.iter().find(|d| d.name == name)
    }

    pub fn is_auxiliary(&self, name: &str) -> bool {
        self.auxiliary.contains(name)
    }

    pub fn tasks(&self) -> BTreeSet<Task> {
        self.decoders.iter().map(|d| d.kind.task()).collect()
    }
}

/// One convolution of the encoder plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub projection: bool,
}

impl ConvLayer {
    pub fn params(&self) -> usize {
        self.kernel * self.kernel * self.c_in * self.c_out + self.c_out
    }
}

/// Stage name, output channels multiplier, stride.
const ENCODER_STAGES: [(&str, usize); 4] = [("block1", 2), ("block2", 4), ("block3", 8), ("block4", 8)];

impl EncoderSpec {
    /// Stem, four residual blocks and a closing 1x1 conv, in build order.
    pub fn conv_layers(&self) -> Vec<ConvLayer> {
        let w = self.base_width;
        let layer = |name: String, c_in, c_out, kernel, stride, projection| ConvLayer {
            name,
            c_in,
            c_out,
            kernel,
            stride,
            projection,
        };
        let mut out = vec![layer("stem".into(), self.input_channels, w, 3, 2, false)];
        let mut c = w;
        for (stage, mult) in ENCODER_STAGES {
            let c_out = mult * w;
            out.push(layer(format!("{stage}.conv1"), c, c_out, 3, 2, false));
            out.push(layer(format!("{stage}.conv2"), c_out, c_out, 3, 1, false));
            out.push(layer(format!("{stage}.proj"), c, c_out, 1, 2, true));
            c = c_out;
        }
        out.push(layer("head".into(), c, c, 1, 1, false));
        out
    }

    pub fn tap_channels(&self) -> [usize; 3] {
        let w = self.base_width;
        [4 * w, 8 * w, 8 * w]
    }
}

/// Encoder feature maps at strides 8, 16 and 32.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub s8: NodeId,
    pub s16: NodeId,
    pub s32: NodeId,
}

fn conv(b: &mut GraphBuilder, name: &str, x: NodeId, c_out: usize, kernel: usize, stride: usize) -> Result<NodeId> {
    let c_in = kernels::nchw(b.shape(x)).map_err(Error::InvalidArgument)?.c;
    let w = b.param(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel])?;
    let bias = b.param(&format!("{name}.bias"), &[c_out])?;
    b.conv2d(x, w, bias, stride, kernel / 2)
}

/// Emits the encoder on `input` (`[N,C,H,W]`). Calling it twice shares weights.
pub fn build_encoder(b: &mut GraphBuilder, spec: &EncoderSpec, input: NodeId) -> Result<Taps> {
    build_encoder_as(b, spec, input, ENCODER)
}

fn build_encoder_as(b: &mut GraphBuilder, spec: &EncoderSpec, input: NodeId, component: &str) -> Result<Taps> {
    let shape = b.shape(input).to_vec();
    if !spec.input_size.is_multiple_of(32) {
        return Err(Error::spec("encoder.input_size", "must be divisible by 32"));
    }
    let d = kernels::nchw(&shape).map_err(Error::InvalidArgument)?;
    if d.c != spec.input_channels || d.h != spec.input_size || d.w != spec.input_size {
        return Err(Error::shape(
            "encoder",
            format!("input {shape:?} does not match encoder spec {spec:?}"),
        ));
    }
    let w = spec.base_width;
    b.push_scope(component);
    let x = conv(b, &format!("{component}.stem"), input, w, 3, 2)?;
    let mut x = b.relu(x);
    let mut taps = Vec::new();
    for (stage, mult) in ENCODER_STAGES {
        let c_out = mult * w;
        let p = format!("{component}.{stage}");
        let h = conv(b, &format!("{p}.conv1"), x, c_out, 3, 2)?;
        let h = b.relu(h);
        let h = conv(b, &format!("{p}.conv2"), h, c_out, 3, 1)?;
        let skip = conv(b, &format!("{p}.proj"), x, c_out, 1, 2)?;
        let sum = b.add(h, skip)?;
        x = b.relu(sum);
        taps.push(x);
    }
    let head = conv(b, &format!("{component}.head"), x, 8 * w, 1, 1)?;
    let s32 = b.relu(head);
    b.pop_scope();
    Ok(Taps {
        s8: taps[1],
        s16: taps[2],
        s32,
    })
}

/// FCN8 skip decoder producing full-resolution maps with `c_out` channels.
pub fn build_fcn8(b: &mut GraphBuilder, prefix: &str, taps: &Taps, c_out: usize) -> Result<NodeId> {
    b.push_scope(prefix);
    let s32 = conv(b, &format!("{prefix}.score32"), taps.s32, c_out, 1, 1)?;
    let up = b.upsample(s32, 2)?;
    let s16 = conv(b, &format!("{prefix}.score16"), taps.s16, c_out, 1, 1)?;
    let x = b.add(up, s16)?;
    let up = b.upsample(x, 2)?;
    let s8 = conv(b, &format!("{prefix}.score8"), taps.s8, c_out, 1, 1)?;
    let x = b.add(up, s8)?;
    let out = b.upsample(x, 8)?;
    b.pop_scope();
    Ok(out)
}

pub fn build_seg_decoder(b: &mut GraphBuilder, name: &str, taps: &Taps, num_classes: usize) -> Result<NodeId> {
    build_fcn8(b, name, taps, num_classes)
}

/// FCN8 topology with one linear regression channel.
pub fn build_depth_decoder(b: &mut GraphBuilder, name: &str, taps: &Taps) -> Result<NodeId> {
    build_fcn8(b, name, taps, 1)
}

/// Two-class moving/static logits over fused taps.
pub fn build_motion_decoder(b: &mut GraphBuilder, name: &str, fused: &Taps) -> Result<NodeId> {
    build_fcn8(b, name, fused, 2)
}

/// Grid head on the stride-8 tap: `[5+C, S, S]` with sigmoid objectness and
/// offsets, linear square-root sizes and per-cell class scores.
pub fn build_det_decoder(
    b: &mut GraphBuilder,
    name: &str,
    taps: &Taps,
    base_width: usize,
    num_classes: usize,
    grid: usize,
) -> Result<NodeId> {
    let d = kernels::nchw(b.shape(taps.s8)).map_err(Error::InvalidArgument)?;
    if d.h != grid || d.w != grid {
        return Err(Error::shape(
            name,
            format!("grid {grid} does not match stride-8 tap {}x{}", d.h, d.w),
        ));
    }
    b.push_scope(name);
    let h = conv(b, &format!("{name}.conv"), taps.s8, 2 * base_width, 3, 1)?;
    let h = b.relu(h);
    let raw = conv(b, &format!("{name}.pred"), h, 5 + num_classes, 1, 1)?;
    let obj_xy = b.slice_channels(raw, 0, 3)?;
    let obj_xy = b.sigmoid(obj_xy);
    let size = b.slice_channels(raw, 3, 2)?;
    let cls = b.slice_channels(raw, 5, num_classes)?;
    let cls = if num_classes >= 2 {
        b.softmax(cls)?
    } else {
        b.sigmoid(cls)
    };
    let boxes = b.concat(obj_xy, size)?;
    let out = b.concat(boxes, cls)?;
    b.pop_scope();
    Ok(out)
}

fn fuse(b: &mut GraphBuilder, spec: &ArchitectureSpec, curr: &Taps, prev: &Taps) -> Result<Taps> {
    b.push_scope(FUSION);
    let fused = match spec.streams.fusion {
        Fusion::Concat => Taps {
            s8: b.concat(curr.s8, prev.s8)?,
            s16: b.concat(curr.s16, prev.s16)?,
            s32: b.concat(curr.s32, prev.s32)?,
        },
        Fusion::ConvLstm => {
            let shape = b.shape(curr.s32).to_vec();
            let c = kernels::nchw(&shape).map_err(Error::InvalidArgument)?.c;
            let kernel = b.param(
                "fusion.lstm.weight",
                &[4 * c, 2 * c, nn::CONV_LSTM_KERNEL, nn::CONV_LSTM_KERNEL],
            )?;
            let bias = b.param("fusion.lstm.bias", &[4 * c])?;
            let h0 = b.zeros(&shape);
            let c0 = b.zeros(&shape);
            let (h1, c1) = nn::conv_lstm_step_node(b, prev.s32, h0, c0, kernel, bias)?;
            let (h2, _) = nn::conv_lstm_step_node(b, curr.s32, h1, c1, kernel, bias)?;
            Taps {
                s8: curr.s8,
                s16: curr.s16,
                s32: h2,
            }
        }
        Fusion::None => unreachable!("validated"),
    };
    b.pop_scope();
    Ok(fused)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Every decoder, auxiliary ones included.
    Train,
    /// Auxiliary decoders are not built.
    Inference,
}

/// Adds the model to `b` for a batch of `batch` frames. Returns decoder outputs by name.
pub fn assemble(
    b: &mut GraphBuilder,
    spec: &ArchitectureSpec,
    batch: usize,
    mode: Mode,
) -> Result<BTreeMap<String, NodeId>> {
    assemble_as(b, spec, batch, mode, ENCODER)
}

/// Parameter prefix of the previous-frame encoder in [`assemble_untied`].
pub const UNTIED_PREV_ENCODER: &str = "encoder_prev";

/// Like [`assemble`], but the previous-frame encoder reads its own
/// `encoder_prev.*` parameters. With those set equal to `encoder.*` the
/// outputs match the tied model and per-stream encoder gradients can be
/// read separately.
pub fn assemble_untied(
    b: &mut GraphBuilder,
    spec: &ArchitectureSpec,
    batch: usize,
    mode: Mode,
) -> Result<BTreeMap<String, NodeId>> {
    assemble_as(b, spec, batch, mode, UNTIED_PREV_ENCODER)
}

fn assemble_as(
    b: &mut GraphBuilder,
    spec: &ArchitectureSpec,
    batch: usize,
    mode: Mode,
    prev_encoder: &str,
) -> Result<BTreeMap<String, NodeId>> {
    spec.validate()?;
    let e = &spec.encoder;
    let frame = [batch, e.input_channels, e.input_size, e.input_size];
    let curr_in = b.input(FRAME_CURR, &frame)?;
    let curr = build_encoder(b, e, curr_in)?;
    let active: Vec<&DecoderSpec> = spec
        .decoders
        .iter()
        .filter(|d| mode == Mode::Train || !spec.is_auxiliary(&d.name))
        .collect();
    let fused = if spec.streams.num_streams == 2 && active.iter().any(|d| d.reads_fused()) {
        let prev_in = b.input(FRAME_PREV, &frame)?;
        let prev = build_encoder_as(b, e, prev_in, prev_encoder)?;
        Some(fuse(b, spec, &curr, &prev)?)
    } else {
        None
    };
    let mut heads = BTreeMap::new();
    for d in active {
        let taps = if d.reads_fused() {
            fused.as_ref().expect("fused taps")
        } else {
            &curr
        };
        let out = match d.kind {
            DecoderKind::Segmentation { num_classes } => build_seg_decoder(b, &d.name, taps, num_classes)?,
            DecoderKind::Detection { num_classes, grid } => {
                build_det_decoder(b, &d.name, taps, e.base_width, num_classes, grid)?
            }
            DecoderKind::Depth => build_depth_decoder(b, &d.name, taps)?,
            DecoderKind::Motion => build_motion_decoder(b, &d.name, taps)?,
        };
        heads.insert(d.name.clone(), out);
    }
    Ok(heads)
}

/// A model graph plus the node of each decoder output.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub graph: Graph,
    pub heads: BTreeMap<String, NodeId>,
    pub batch: usize,
}

pub fn model_graph(spec: &ArchitectureSpec, batch: usize, mode: Mode) -> Result<ModelGraph> {
    let mut b = GraphBuilder::new();
    let heads = assemble(&mut b, spec, batch, mode)?;
    for (name, id) in &heads {
        b.output(name, *id);
    }
    Ok(ModelGraph {
        graph: b.finish(),
        heads,
        batch,
    })
}

/// Architecture plus its parameters (32-bit).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ArchitectureSpec,
    params: ParamStore<f32>,
}

impl Model {
    /// He fan-in normal weights, zero biases, drawn in registration order.
    pub fn new(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        let decls = model_graph(&spec, 1, Mode::Train)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in decls.graph.param_decls() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            } else {
                vec![0.0; n]
            };
            params.insert(name, Tensor::new(shape.to_vec(), data)?);
        }
        Ok(Self { spec, params })
    }

    pub fn zeroed(spec: ArchitectureSpec) -> Result<Self> {
        let mut m = Self::new(spec, 0)?;
        for (_, t) in m.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(m)
    }

    pub fn from_parts(spec: ArchitectureSpec, params: ParamStore<f32>) -> Result<Self> {
        let decls = model_graph(&spec, 1, Mode::Train)?;
        for (name, shape) in decls.graph.param_decls() {
            match params.get(name) {
                Some(t) if t.shape() == shape => {}
                Some(t) => {
                    return Err(Error::shape(
                        name,
                        format!("stored {:?}, architecture needs {shape:?}", t.shape()),
                    ))
                }
                None => return Err(Error::MissingParam(name.to_string())),
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn graph(&self, batch: usize, mode: Mode) -> Result<ModelGraph> {
        model_graph(&self.spec, batch, mode)
    }
}

pub fn assemble_model(spec: ArchitectureSpec, seed: u64) -> Result<Model> {
    Model::new(spec, seed)
}

/// Component a parameter belongs to: the text before its first dot.
pub fn component_of(param: &str) -> &str {
    param.split('.').next().unwrap_or(param)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub per_component: BTreeMap<String, u64>,
    pub total: u64,
    pub shared: u64,
    pub macs: BTreeMap<String, u64>,
}

impl ParamBudget {
    pub fn component(&self, name: &str) -> u64 {
        self.per_component.get(name).copied().unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,params,macs\n");
        for (name, p) in &self.per_component {
            out.push_str(&format!("{name},{p},{}\n", self.macs.get(name).copied().unwrap_or(0)));
        }
        out.push_str(&format!("total,{},{}\n", self.total, self.macs.values().sum::<u64>()));
        out
    }
}

/// Exact parameter counts per component plus conv MACs for one frame (or frame pair).
pub fn count_params(model: &Model) -> Result<ParamBudget> {
    budget_for(model.spec(), Some(model.params()))
}

/// Budget computed from the architecture alone, without materializing weights.
pub fn count_spec_params(spec: &ArchitectureSpec) -> Result<ParamBudget> {
    budget_for(spec, None)
}

fn budget_for(spec: &ArchitectureSpec, params: Option<&ParamStore<f32>>) -> Result<ParamBudget> {
    let mg = model_graph(spec, 1, Mode::Train)?;
    let mut per_component: BTreeMap<String, u64> = BTreeMap::new();
    for (name, shape) in mg.graph.param_decls() {
        let n = match params {
            Some(p) => p.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?.len(),
            None => shape.iter().product(),
        };
        *per_component.entry(component_of(name).to_string()).or_default() += n as u64;
    }
    let mut macs: BTreeMap<String, u64> = per_component.keys().map(|k| (k.clone(), 0)).collect();
    let nodes = mg.graph.nodes();
    for node in nodes {
        if let Op::Conv2d { stride, padding } = node.op {
            let x = &nodes[node.inputs[0].index()].shape;
            let w = &nodes[node.inputs[1].index()];
            let geom = kernels::ConvGeom::new(x, &w.shape, stride, padding).map_err(Error::InvalidArgument)?;
            let Op::Param { name } = &w.op else { continue };
            *macs.entry(component_of(name).to_string()).or_default() += geom.macs();
        }
    }
    let total = per_component.values().sum();
    let consumers = spec.decoders.len() + usize::from(spec.streams.num_streams == 2);
    let shared = if consumers >= 2 {
        per_component.get(ENCODER).copied().unwrap_or(0)
    } else {
        0
    };
    Ok(ParamBudget {
        per_component,
        total,
        shared,
        macs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharingReport {
    pub tasks: usize,
    pub stl_total: u64,
    pub mtl_total: u64,
    pub savings: i64,
    pub shared_fraction: f64,
    pub reclaim_per_task: f64,
}

/// Fraction of each task's budget freed when `shared_fraction` of the combined
/// single-task budget is shared across `tasks` networks.
pub fn reclaim_per_task(shared_fraction: f64, tasks: usize) -> f64 {
    if tasks == 0 {
        return 0.0;
    }
    shared_fraction * (tasks as f64 - 1.0) / tasks as f64
}

pub fn sharing_analysis(stl: &[ParamBudget], mtl: &ParamBudget) -> Result<SharingReport> {
    if stl.is_empty() {
        return Err(Error::InvalidArgument(
            "sharing analysis needs single-task budgets".into(),
        ));
    }
    let stl_total: u64 = stl.iter().map(|b| b.total).sum();
    let shared_fraction = if stl.len() == 1 {
        0.0
    } else {
        mtl.shared as f64 / stl_total as f64
    };
    Ok(SharingReport {
        tasks: stl.len(),
        stl_total,
        mtl_total: mtl.total,
        savings: stl_total as i64 - mtl.total as i64,
        shared_fraction,
        reclaim_per_task: reclaim_per_task(shared_fraction, stl.len()),
    })
}

pub mod detection {
    //! Grid encoding of boxes for the detection head, and its inverse.

    use crate::metrics::BBox;
    use crate::tensor::Tensor;

    /// Cell `(row, col)` holding a box center.
    pub fn cell_of(b: &BBox, grid: usize) -> (usize, usize) {
        let clamp = |v: f64| ((v * grid as f64).floor().max(0.0) as usize).min(grid - 1);
        (clamp(b.y), clamp(b.x))
    }

    /// Encodes boxes into a `[5+C, S, S]` target. When two centers share a
    /// cell the larger box wins.
    pub fn encode_boxes(boxes: &[BBox], grid: usize, num_classes: usize) -> Tensor<f32> {
        let d = 5 + num_classes;
        let plane = grid * grid;
        let mut data = vec![0.0f32; d * plane];
        let mut order: Vec<&BBox> = boxes.iter().filter(|b| b.class_id < num_classes).collect();
        order.sort_by(|a, b| (a.w * a.h).total_cmp(&(b.w * b.h)));
        for b in order {
            let (r, c) = cell_of(b, grid);
            let p = r * grid + c;
            data[p] = 1.0;
            data[plane + p] = (b.x * grid as f64 - c as f64) as f32;
            data[2 * plane + p] = (b.y * grid as f64 - r as f64) as f32;
            data[3 * plane + p] = b.w.sqrt() as f32;
            data[4 * plane + p] = b.h.sqrt() as f32;
            for k in 0..num_classes {
                data[(5 + k) * plane + p] = if k == b.class_id { 1.0 } else { 0.0 };
            }
        }
        Tensor::new(vec![d, grid, grid], data).expect("grid shape")
    }

    /// Box encoded at one cell, as `(x, y, w, h)` in image-normalized units.
    pub fn decode_cell(
        t_x: f64,
        t_y: f64,
        t_w: f64,
        t_h: f64,
        row: usize,
        col: usize,
        grid: usize,
    ) -> (f64, f64, f64, f64) {
        let s = grid as f64;
        ((col as f64 + t_x) / s, (row as f64 + t_y) / s, t_w * t_w, t_h * t_h)
    }
}
