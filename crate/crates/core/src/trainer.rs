//! Optimizers, the training loop, evaluation and checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::architectures::{
    self, component_of, detection, ArchitectureSpec, DecoderKind, Mode, Model, FRAME_CURR, FRAME_PREV,
};
use crate::error::{Error, Result};
use crate::graph::{Feed, Graph, GraphBuilder, NodeId, ParamStore};
use crate::io_util::{read_json, write_json};
use crate::losses::{self, batch_masks, LossConfig, ScalarizationStrategy, Task};
use crate::metrics::{self, ConfusionMatrix, DecodeOptions, MetricsReport};
use crate::synthdata::{Dataset, Sample, Split};
use crate::tensor::{read_tns, write_tns, Precision, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_lr() -> f64 {
    0.0005
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(default_lr())
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    /// A zero learning rate is accepted so a run can be frozen on purpose.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr() >= 0.0 && self.lr().is_finite()) {
            return Err(Error::spec(
                "optimizer.lr",
                format!("{} must be non-negative", self.lr()),
            ));
        }
        match *self {
            OptimizerConfig::Sgd { momentum, .. } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::spec("optimizer.momentum", "must lie in [0, 1)"))
            }
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                for (f, v) in [("optimizer.beta1", beta1), ("optimizer.beta2", beta2)] {
                    if !(v > 0.0 && v < 1.0) {
                        return Err(Error::spec(f, "must lie in (0, 1)"));
                    }
                }
                if !(eps > 0.0) {
                    return Err(Error::spec("optimizer.eps", "must be positive"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// First and second moments (Adam) or velocity in `m` (SGD).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn cast<U: Real>(&self) -> OptimizerState<U> {
        OptimizerState {
            step: self.step,
            m: self.m.cast(),
            v: self.v.cast(),
        }
    }
}

/// Bias-corrected Adam: `θ ← θ − lr·m̂/(√v̂ + ε)`.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::of_f64(beta1), T::of_f64(beta2));
    let (one_b1, one_b2) = (T::of_f64(1.0 - beta1), T::of_f64(1.0 - beta2));
    let (lr_t, eps_t, c1_t, c2_t) = (T::of_f64(lr), T::of_f64(eps), T::of_f64(c1), T::of_f64(c2));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                name,
                format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
            ));
        }
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = b1 * md[i] + one_b1 * gi;
            vd[i] = b2 * vd[i] + one_b2 * gi * gi;
            let m_hat = md[i] / c1_t;
            let v_hat = vd[i] / c2_t;
            pd[i] = pd[i] - lr_t * m_hat / (v_hat.sqrt() + eps_t);
        }
    }
    Ok(())
}

/// Heavy-ball SGD: `u ← μu + g`, `θ ← θ − lr·u`.
pub fn sgd_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    state.step += 1;
    let (lr_t, mu) = (T::of_f64(lr), T::of_f64(momentum));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let u = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                name,
                format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
            ));
        }
        let (pd, ud) = (p.data_mut(), u.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            ud[i] = mu * ud[i] + gi;
            pd[i] = pd[i] - lr_t * ud[i];
        }
    }
    Ok(())
}

pub fn optimizer_step<T: Real>(
    config: &OptimizerConfig,
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    match *config {
        OptimizerConfig::Sgd { lr, momentum } => sgd_step(params, grads, state, lr, momentum),
        OptimizerConfig::Adam { lr, beta1, beta2, eps } => adam_step(params, grads, state, lr, beta1, beta2, eps),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub strategy: ScalarizationStrategy,
    /// Evaluate on the validation split every this many epochs; 0 disables.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss: LossConfig,
    /// Global gradient-norm clip; off unless set.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_batch() -> usize {
    8
}

impl TrainConfig {
    pub fn new(epochs: usize, strategy: ScalarizationStrategy) -> Self {
        Self {
            epochs,
            batch_size: default_batch(),
            seed: 0,
            strategy,
            eval_every: 0,
            precision: Precision::Train32,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::spec("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::spec("train.batch_size", "must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::spec("train.grad_clip", "must be positive"));
            }
        }
        self.strategy.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()
    }
}

/// A model graph extended with per-task losses and their scalarization.
#[derive(Debug, Clone)]
pub struct TrainingGraph {
    pub graph: Graph,
    pub heads: BTreeMap<String, NodeId>,
    /// Decoder name, task and loss node, in decoder order.
    pub losses: Vec<(String, Task, NodeId)>,
    pub total: NodeId,
    pub batch: usize,
}

pub const PRESENCE: &str = "presence";

pub fn target_input(decoder: &str) -> String {
    format!("target.{decoder}")
}

pub fn mask_input(decoder: &str) -> String {
    format!("mask.{decoder}")
}

/// Weight of a decoder under a weighted sum: looked up by decoder name, then task name.
pub fn decoder_weight(weights: &BTreeMap<String, f64>, name: &str, task: Task) -> Option<f64> {
    weights.get(name).or_else(|| weights.get(task.name())).copied()
}

pub fn build_training_graph(
    spec: &ArchitectureSpec,
    batch: usize,
    loss: &LossConfig,
    strategy: &ScalarizationStrategy,
) -> Result<TrainingGraph> {
    let mut b = GraphBuilder::new();
    let heads = architectures::assemble(&mut b, spec, batch, Mode::Train)?;
    let size = spec.encoder.input_size;
    let mut loss_nodes = Vec::new();
    b.push_scope("loss");
    for d in &spec.decoders {
        let head = heads[&d.name];
        let mask = b.input(&mask_input(&d.name), &[batch])?;
        let node = match d.kind {
            DecoderKind::Segmentation { .. } | DecoderKind::Motion => {
                let target = b.input(&target_input(&d.name), &[batch, size, size])?;
                b.seg_cross_entropy(head, target, mask, None)?
            }
            DecoderKind::Detection { num_classes, grid } => {
                let target = b.input(&target_input(&d.name), &[batch, 5 + num_classes, grid, grid])?;
                b.detection_loss(head, target, mask, loss.lambda_coord, loss.lambda_noobj)?
            }
            DecoderKind::Depth => {
                let target = b.input(&target_input(&d.name), &[batch, 1, size, size])?;
                b.huber(head, target, mask, loss.huber_delta)?
            }
        };
        loss_nodes.push((d.name.clone(), d.kind.task(), node));
    }
    let presence = b.input(PRESENCE, &[spec.decoders.len()])?;
    let ids: Vec<NodeId> = loss_nodes.iter().map(|(_, _, n)| *n).collect();
    let total = match strategy {
        ScalarizationStrategy::WeightedSum { weights } => {
            let w = loss_nodes
                .iter()
                .map(|(name, task, _)| {
                    decoder_weight(weights, name, *task)
                        .ok_or_else(|| Error::spec(format!("strategy.weights.{name}"), "no weight for this decoder"))
                })
                .collect::<Result<Vec<f64>>>()?;
            b.weighted_sum(&ids, presence, &w)?
        }
        ScalarizationStrategy::GeometricMean { epsilon } => b.geometric_mean(&ids, presence, *epsilon)?,
    };
    b.pop_scope();
    for (name, _, node) in &loss_nodes {
        b.output(&format!("loss.{name}"), *node);
    }
    b.output("loss.total", total);
    Ok(TrainingGraph {
        graph: b.finish(),
        heads,
        losses: loss_nodes,
        total,
        batch,
    })
}

/// Checks that a dataset can supervise an architecture.
pub fn check_compatible(spec: &ArchitectureSpec, dataset: &Dataset) -> Result<()> {
    let scene = dataset.spec();
    if scene.image_size != spec.encoder.input_size {
        return Err(Error::spec(
            "encoder.input_size",
            format!("dataset images are {}px", scene.image_size),
        ));
    }
    let tasks = dataset.tasks();
    for (i, d) in spec.decoders.iter().enumerate() {
        match d.kind {
            DecoderKind::Segmentation { num_classes } if num_classes != scene.seg_classes.len() => {
                return Err(Error::spec(
                    format!("decoders[{i}].kind.num_classes"),
                    format!("dataset has {} segmentation classes", scene.seg_classes.len()),
                ))
            }
            DecoderKind::Detection { num_classes, .. } if num_classes != scene.det_classes.len() => {
                return Err(Error::spec(
                    format!("decoders[{i}].kind.num_classes"),
                    format!("dataset has {} detection classes", scene.det_classes.len()),
                ))
            }
            _ => {}
        }
        if !spec.is_auxiliary(&d.name) && !tasks.contains(&d.kind.task()) {
            return Err(Error::spec(
                format!("decoders[{i}]"),
                format!("dataset carries no {} labels", d.kind.task()),
            ));
        }
    }
    Ok(())
}

fn frames<T: Real>(samples: &[&Sample], prev: bool) -> Result<Tensor<T>> {
    let s = samples[0].frame_curr.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * s.iter().product::<usize>());
    for x in samples {
        let f = if prev { &x.frame_prev } else { &x.frame_curr };
        data.extend(f.data().iter().map(|&v| T::of_f64(v as f64)));
    }
    Tensor::new(vec![samples.len(), s[0], s[1], s[2]], data)
}

/// Builds every graph input for a batch. Returns the feed and per-decoder masks.
pub fn batch_feed<T: Real>(
    graph: &Graph,
    spec: &ArchitectureSpec,
    samples: &[&Sample],
) -> Result<(Feed<T>, Vec<Vec<f64>>)> {
    let n = samples.len();
    let size = spec.encoder.input_size;
    let mut feed = Feed::new();
    let inputs: BTreeSet<&str> = graph.input_decls().map(|(name, _)| name).collect();
    feed.insert(FRAME_CURR.to_string(), frames::<T>(samples, false)?);
    if inputs.contains(FRAME_PREV) {
        feed.insert(FRAME_PREV.to_string(), frames::<T>(samples, true)?);
    }
    let tasks: Vec<Task> = spec.decoders.iter().map(|d| d.kind.task()).collect();
    let labels: Vec<BTreeSet<Task>> = samples.iter().map(|s| s.tasks.clone()).collect();
    let masks = batch_masks(&tasks, &labels);
    for (k, d) in spec.decoders.iter().enumerate() {
        if !inputs.contains(mask_input(&d.name).as_str()) {
            continue;
        }
        let to_t = |v: &[f64]| v.iter().map(|&x| T::of_f64(x)).collect::<Vec<T>>();
        feed.insert(mask_input(&d.name), Tensor::new(vec![n], to_t(&masks.per_task[k]))?);
        let target = match d.kind {
            DecoderKind::Segmentation { .. } => {
                let data = samples
                    .iter()
                    .flat_map(|s| s.seg.iter().map(|&c| T::of_f64(c as f64)))
                    .collect();
                Tensor::new(vec![n, size, size], data)?
            }
            DecoderKind::Motion => {
                let data = samples
                    .iter()
                    .flat_map(|s| s.motion.iter().map(|&c| T::of_f64(c as f64)))
                    .collect();
                Tensor::new(vec![n, size, size], data)?
            }
            DecoderKind::Depth => {
                let data = samples
                    .iter()
                    .flat_map(|s| s.depth.data().iter().map(|&v| T::of_f64(v as f64)))
                    .collect();
                Tensor::new(vec![n, 1, size, size], data)?
            }
            DecoderKind::Detection { num_classes, grid } => {
                let mut data = Vec::with_capacity(n * (5 + num_classes) * grid * grid);
                for s in samples {
                    let t = detection::encode_boxes(&s.boxes, grid, num_classes);
                    data.extend(t.data().iter().map(|&v| T::of_f64(v as f64)));
                }
                Tensor::new(vec![n, 5 + num_classes, grid, grid], data)?
            }
        };
        feed.insert(target_input(&d.name), target);
    }
    if inputs.contains(PRESENCE) {
        let p = masks.presence.iter().map(|&x| T::of_f64(x)).collect();
        feed.insert(PRESENCE.to_string(), Tensor::new(vec![tasks.len()], p)?);
    }
    Ok((feed, masks.per_task))
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over batches where the decoder's task was labeled.
    pub losses: BTreeMap<String, f64>,
    pub total: f64,
    /// Mean global gradient norm per component.
    pub grad_norms: BTreeMap<String, f64>,
    pub batches: usize,
    pub skipped_batches: usize,
    /// Present task losses that fell below the geometric-mean clamp.
    pub clamp_events: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("epoch record serializes")
    }
}

/// Per-epoch sample order, reproducible from `(seed, epoch)` alone.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Stateful training loop at precision `T`.
pub struct Trainer<T: Real = f32> {
    spec: ArchitectureSpec,
    config: TrainConfig,
    params: ParamStore<T>,
    state: OptimizerState<T>,
    epoch: usize,
    graphs: BTreeMap<usize, TrainingGraph>,
    log: Vec<EpochRecord>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: &Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params: ParamStore<T> = model.params().cast();
        let state = OptimizerState::new(&params);
        Ok(Self {
            spec: model.spec().clone(),
            config,
            params,
            state,
            epoch: 0,
            graphs: BTreeMap::new(),
            log: Vec::new(),
        })
    }

    /// Continues from a checkpoint; the next epoch run is `checkpoint.epoch`.
    pub fn resume(checkpoint: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let mut t = Self::new(&checkpoint.model, config)?;
        t.state = checkpoint.optimizer.cast();
        t.epoch = checkpoint.epoch;
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.log
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.spec.clone(), self.params.cast())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.model()?,
            optimizer: self.state.cast(),
            optimizer_config: self.config.optimizer,
            epoch: self.epoch,
        })
    }

    fn graph(&mut self, batch: usize) -> Result<&TrainingGraph> {
        if !self.graphs.contains_key(&batch) {
            let g = build_training_graph(&self.spec, batch, &self.config.loss, &self.config.strategy)?;
            self.graphs.insert(batch, g);
        }
        Ok(&self.graphs[&batch])
    }

    /// Runs one epoch over the training split.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochRecord> {
        check_compatible(&self.spec, dataset)?;
        let train = dataset.split(Split::Train);
        if train.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        let epoch = self.epoch;
        let order = epoch_order(train.len(), self.config.seed, epoch);
        let eps = match self.config.strategy {
            ScalarizationStrategy::GeometricMean { epsilon } => Some(epsilon),
            _ => None,
        };
        let mut loss_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut norm_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total_sum = 0.0;
        let (mut batches, mut skipped, mut clamps) = (0usize, 0usize, 0usize);
        for (bi, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            let spec = self.spec.clone();
            let tg = self.graph(samples.len())?.clone();
            let (feed, masks) = batch_feed::<T>(&tg.graph, &spec, &samples)?;
            if masks.iter().all(|m| m.iter().all(|&v| v == 0.0)) {
                log::warn!("epoch {epoch} batch {bi}: no labels for any task; skipped");
                skipped += 1;
                continue;
            }
            let diverged = |detail: String| Error::Diverged {
                epoch,
                batch: bi,
                detail,
            };
            let eval = tg.graph.eval(&self.params, &feed).map_err(|e| match e {
                Error::NonFinite { node } => diverged(format!("non-finite value at {node}")),
                other => other,
            })?;
            let total = eval.scalar(tg.total).as_f64();
            if !total.is_finite() {
                return Err(diverged(format!("total loss {total}")));
            }
            for (k, (name, _, node)) in tg.losses.iter().enumerate() {
                if masks[k].iter().any(|&v| v > 0.0) {
                    let v = eval.scalar(*node).as_f64();
                    if eps.is_some_and(|e| v < e) {
                        clamps += 1;
                    }
                    let e = loss_sums.entry(name.clone()).or_default();
                    e.0 += v;
                    e.1 += 1;
                }
            }
            let mut grads = tg.graph.backward(&self.params, &eval, tg.total).map_err(|e| match e {
                Error::NonFiniteGradient { param } => diverged(format!("non-finite gradient for {param}")),
                other => other,
            })?;
            drop(eval);
            let mut sq: BTreeMap<String, f64> = BTreeMap::new();
            for (name, g) in grads.params.iter() {
                let s: f64 = g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
                *sq.entry(component_of(name).to_string()).or_default() += s;
            }
            for (c, s) in &sq {
                *norm_sums.entry(c.clone()).or_default() += s.sqrt();
            }
            if let Some(clip) = self.config.grad_clip {
                let norm = sq.values().sum::<f64>().sqrt();
                if norm > clip {
                    let k = T::of_f64(clip / norm);
                    for (_, g) in grads.params.iter_mut() {
                        g.data_mut().iter_mut().for_each(|v| *v = *v * k);
                    }
                }
            }
            optimizer_step(&self.config.optimizer, &mut self.params, &grads.params, &mut self.state)?;
            total_sum += total;
            batches += 1;
        }
        self.epoch += 1;
        let denom = batches.max(1) as f64;
        let mut record = EpochRecord {
            epoch,
            losses: loss_sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
            total: total_sum / denom,
            grad_norms: norm_sums.into_iter().map(|(k, s)| (k, s / denom)).collect(),
            batches,
            skipped_batches: skipped,
            clamp_events: clamps,
            metrics: None,
        };
        if self.config.eval_every > 0 && self.epoch.is_multiple_of(self.config.eval_every) {
            let model = self.model()?;
            record.metrics = Some(evaluate(&model, dataset, Split::Val, &EvalOptions::default())?);
        }
        log::info!("epoch {epoch}: total {:.6}", record.total);
        self.log.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining epochs up to `config.epochs`.
    pub fn fit(&mut self, dataset: &Dataset) -> Result<&[EpochRecord]> {
        while self.epoch < self.config.epochs {
            self.run_epoch(dataset)?;
        }
        Ok(&self.log)
    }
}

/// Trains `model` in place and returns the epoch log.
pub fn train(model: &mut Model, dataset: &Dataset, config: &TrainConfig) -> Result<Vec<EpochRecord>> {
    fn run<T: Real>(model: &mut Model, dataset: &Dataset, config: &TrainConfig) -> Result<Vec<EpochRecord>> {
        let mut t = Trainer::<T>::new(model, config.clone())?;
        t.fit(dataset)?;
        *model = t.model()?;
        Ok(t.log)
    }
    match config.precision {
        Precision::Train32 => run::<f32>(model, dataset, config),
        Precision::Check64 => run::<f64>(model, dataset, config),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub decode: DecodeOptions,
    pub iou_threshold: f64,
    pub depth_threshold: f64,
    pub loss: LossConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 16,
            decode: DecodeOptions::default(),
            iou_threshold: 0.5,
            depth_threshold: 1.25,
            loss: LossConfig::default(),
        }
    }
}

/// Arg-max over channels of `[N, C, H, W]`; ties go to the lowest id.
fn argmax_channels(t: &Tensor<f32>) -> Vec<u8> {
    let s = t.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let d = t.data();
    let mut out = vec![0u8; n * plane];
    for i in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if d[(i * c + k) * plane + p] > d[(i * c + best) * plane + p] {
                    best = k;
                }
            }
            out[i * plane + p] = best as u8;
        }
    }
    out
}

fn slice_batch(t: &Tensor<f32>, i: usize) -> Tensor<f32> {
    let per: usize = t.shape()[1..].iter().product();
    Tensor::new(t.shape()[1..].to_vec(), t.data()[i * per..(i + 1) * per].to_vec()).expect("batch slice")
}

/// Runs inference over a split (auxiliary decoders skipped) and aggregates
/// metrics in sample order.
pub fn evaluate(model: &Model, dataset: &Dataset, split: Split, opts: &EvalOptions) -> Result<MetricsReport> {
    let spec = model.spec();
    check_compatible(spec, dataset)?;
    let scene = dataset.spec();
    let samples = dataset.split(split);
    let active: Vec<_> = spec.decoders.iter().filter(|d| !spec.is_auxiliary(&d.name)).collect();
    let mut seg_cm: BTreeMap<String, ConfusionMatrix> = BTreeMap::new();
    let mut loss_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut det_preds: Vec<Vec<metrics::BBox>> = Vec::new();
    let mut det_gts: Vec<Vec<metrics::BBox>> = Vec::new();
    let (mut depth_hits, mut depth_total) = (0u64, 0u64);
    let mut graphs: BTreeMap<usize, architectures::ModelGraph> = BTreeMap::new();
    for chunk in samples.chunks(opts.batch_size.max(1)) {
        if let std::collections::btree_map::Entry::Vacant(e) = graphs.entry(chunk.len()) {
            e.insert(model.graph(chunk.len(), Mode::Inference)?);
        }
        let mg = &graphs[&chunk.len()];
        let (feed, _) = batch_feed::<f32>(&mg.graph, spec, chunk)?;
        let eval = mg.graph.eval(model.params(), &feed)?;
        for d in &active {
            let out = eval.value(mg.heads[&d.name]);
            let labeled: Vec<usize> = (0..chunk.len())
                .filter(|&i| chunk[i].tasks.contains(&d.kind.task()))
                .collect();
            let mut add_loss = |v: f64, n: usize| {
                let e = loss_sums.entry(d.name.clone()).or_default();
                e.0 += v * n as f64;
                e.1 += n;
            };
            match d.kind {
                DecoderKind::Segmentation { .. } | DecoderKind::Motion => {
                    let classes = match d.kind {
                        DecoderKind::Segmentation { num_classes } => num_classes,
                        _ => 2,
                    };
                    let pred = argmax_channels(&out);
                    let plane = out.shape()[2] * out.shape()[3];
                    let cm = seg_cm
                        .entry(d.name.clone())
                        .or_insert_with(|| ConfusionMatrix::new(classes));
                    for &i in &labeled {
                        let gt = if d.kind == DecoderKind::Motion {
                            &chunk[i].motion
                        } else {
                            &chunk[i].seg
                        };
                        cm.add(&pred[i * plane..(i + 1) * plane], gt, None)?;
                        let l = losses::seg_cross_entropy(&slice_batch(&out, i), gt, None)?;
                        add_loss(l.value, 1);
                    }
                }
                DecoderKind::Depth => {
                    for &i in &labeled {
                        let p = slice_batch(&out, i);
                        let (h, t) = metrics::depth_hits(p.data(), chunk[i].depth.data(), opts.depth_threshold)?;
                        depth_hits += h;
                        depth_total += t;
                        let target = chunk[i].depth.clone().reshape(p.shape())?;
                        let l = losses::huber_depth_loss(&p, &target, opts.loss.huber_delta)?;
                        add_loss(l.value, 1);
                    }
                }
                DecoderKind::Detection { num_classes, grid } => {
                    for &i in &labeled {
                        let p = slice_batch(&out, i);
                        det_preds.push(metrics::decode_detections(&p, opts.decode)?);
                        det_gts.push(chunk[i].boxes.clone());
                        let target = detection::encode_boxes(&chunk[i].boxes, grid, num_classes);
                        let l = losses::det_loss(&p, &target, &opts.loss)?;
                        add_loss(l.value, 1);
                    }
                }
            }
        }
    }
    let mut report = MetricsReport {
        losses: loss_sums
            .into_iter()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect(),
        ..MetricsReport::default()
    };
    for d in &active {
        match d.kind {
            DecoderKind::Segmentation { .. } if report.mean_iou.is_none() => {
                if let Some(cm) = seg_cm.get(&d.name) {
                    let r = cm.report();
                    report.per_class_iou = r
                        .per_class
                        .iter()
                        .map(|(&c, &v)| (scene.seg_classes[c].clone(), v))
                        .collect();
                    report.mean_iou = Some(r.mean);
                }
            }
            DecoderKind::Motion if report.motion_iou.is_none() => {
                report.motion_iou = seg_cm.get(&d.name).map(|cm| cm.report().mean);
            }
            DecoderKind::Depth if depth_total > 0 => {
                report.depth_accuracy = Some(depth_hits as f64 / depth_total as f64);
            }
            DecoderKind::Detection { .. } if !det_gts.is_empty() => {
                let ap = metrics::detection_ap(&det_preds, &det_gts, opts.iou_threshold)?;
                report.per_class_ap = ap
                    .per_class
                    .iter()
                    .map(|(&c, &v)| (scene.det_classes[c].clone(), v))
                    .collect();
                report.mean_ap = Some(ap.mean);
            }
            _ => {}
        }
    }
    Ok(report)
}

/// Arg-max segmentation masks from the first non-auxiliary segmentation decoder.
pub fn predict_segmentation(model: &Model, samples: &[&Sample]) -> Result<Vec<Vec<u8>>> {
    let spec = model.spec();
    let dec = spec
        .decoders
        .iter()
        .find(|d| matches!(d.kind, DecoderKind::Segmentation { .. }) && !spec.is_auxiliary(&d.name))
        .ok_or_else(|| Error::InvalidArgument("model has no segmentation decoder".into()))?;
    let mut out = Vec::with_capacity(samples.len());
    if samples.is_empty() {
        return Ok(out);
    }
    let mg = model.graph(samples.len(), Mode::Inference)?;
    let (feed, _) = batch_feed::<f32>(&mg.graph, spec, samples)?;
    let eval = mg.graph.eval(model.params(), &feed)?;
    let logits = eval.value(mg.heads[&dec.name]);
    let pred = argmax_channels(&logits);
    let plane = logits.shape()[2] * logits.shape()[3];
    for i in 0..samples.len() {
        out.push(pred[i * plane..(i + 1) * plane].to_vec());
    }
    Ok(out)
}

/// Parameters, optimizer state and epoch counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: OptimizerState<f32>,
    pub optimizer_config: OptimizerConfig,
    /// Epochs completed.
    pub epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    format_version: u32,
    architecture: ArchitectureSpec,
    epoch: usize,
    optimizer: OptimizerConfig,
    optimizer_step: u64,
    params: Vec<IndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn flatten_json(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_json(&key, child, out);
            }
        }
        serde_json::Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                flatten_json(&format!("{prefix}[{i}]"), child, out);
            }
            if items.is_empty() {
                out.insert(prefix.to_string(), v.clone());
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

/// Dotted paths of architecture fields that differ, e.g. `encoder.base_width`.
pub fn fingerprint_diff(a: &ArchitectureSpec, b: &ArchitectureSpec) -> Vec<String> {
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten_json("", &serde_json::to_value(a).expect("spec serializes"), &mut fa);
    flatten_json("", &serde_json::to_value(b).expect("spec serializes"), &mut fb);
    let keys: BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    keys.into_iter().filter(|k| fa.get(*k) != fb.get(*k)).cloned().collect()
}

fn tensor_file(kind: &str, name: &str) -> String {
    format!("{kind}/{name}.tns")
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let mut entries = Vec::new();
    for (name, t) in ckpt.model.params().iter() {
        let file = tensor_file("params", name);
        write_tns(&dir.join(&file), t)?;
        write_tns(
            &dir.join(tensor_file("adam_m", name)),
            ckpt.optimizer.m.get(name).expect("state"),
        )?;
        write_tns(
            &dir.join(tensor_file("adam_v", name)),
            ckpt.optimizer.v.get(name).expect("state"),
        )?;
        entries.push(IndexEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let index = CheckpointIndex {
        format_version: 1,
        architecture: ckpt.model.spec().clone(),
        epoch: ckpt.epoch,
        optimizer: ckpt.optimizer_config,
        optimizer_step: ckpt.optimizer.step,
        params: entries,
    };
    write_json(&dir.join("index.json"), &index)
}

/// Loads a checkpoint, refusing one whose architecture differs from `expected`.
pub fn load_checkpoint(dir: &Path, expected: Option<&ArchitectureSpec>) -> Result<Checkpoint> {
    let index: CheckpointIndex = read_json(&dir.join("index.json"))?;
    if let Some(spec) = expected {
        let fields = fingerprint_diff(spec, &index.architecture);
        if !fields.is_empty() {
            return Err(Error::Fingerprint { fields });
        }
    }
    let mut params = ParamStore::new();
    let mut m = ParamStore::new();
    let mut v = ParamStore::new();
    for e in &index.params {
        let path = dir.join(&e.file);
        let t = read_tns(&path)?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format {
                path,
                detail: format!("shape {:?}, index says {:?}", t.shape(), e.shape),
            });
        }
        params.insert(e.name.clone(), t);
        m.insert(e.name.clone(), read_tns(&dir.join(tensor_file("adam_m", &e.name)))?);
        v.insert(e.name.clone(), read_tns(&dir.join(tensor_file("adam_v", &e.name)))?);
    }
    Ok(Checkpoint {
        model: Model::from_parts(index.architecture, params)?,
        optimizer: OptimizerState {
            step: index.optimizer_step,
            m,
            v,
        },
        optimizer_config: index.optimizer,
        epoch: index.epoch,
    })
}

/// Writes epoch records as JSON lines.
pub fn write_epoch_log(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_json_line());
        text.push('\n');
    }
    crate::io_util::write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_f64_slice(&[1], &[v]).unwrap());
        p
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = store(1.0);
        let g = store(0.1);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &g, &mut s, 0.0005, 0.9, 0.999, 1e-8).unwrap();
        let delta = p.get("w").unwrap().data()[0] - 1.0;
        assert!((delta + 0.0005).abs() < 1e-9, "{delta}");
    }

    #[test]
    fn zero_gradient_zero_state_is_fixed_point() {
        let mut p = store(0.7);
        let g = store(0.0);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &g, &mut s, 0.1, 0.9, 0.999, 1e-8).unwrap();
        sgd_step(&mut p, &g, &mut s, 0.1, 0.9).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = store(1.0);
        let g = store(2.0);
        let mut s = OptimizerState::new(&p);
        sgd_step(&mut p, &g, &mut s, 0.25, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.5);
    }

    #[test]
    fn optimizer_config_validation() {
        assert!(OptimizerConfig::Sgd { lr: 0.1, momentum: 1.0 }.validate().is_err());
        assert!(OptimizerConfig::adam(-1.0).validate().is_err());
        let json = r#"{"kind": "adam"}"#;
        let c: OptimizerConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c, OptimizerConfig::adam(0.0005));
    }

    #[test]
    fn epoch_order_is_a_permutation_and_reproducible() {
        let a = epoch_order(20, 4, 3);
        assert_eq!(a, epoch_order(20, 4, 3));
        assert_ne!(a, epoch_order(20, 4, 4));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }
}
