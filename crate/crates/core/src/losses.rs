//! Per-task losses, loss scalarization (weighted sum and geometric mean) and
//! partial-label masking.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::nchw;
use crate::tensor::{Real, Tensor};

/// Label families a sample may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Detection,
    Depth,
    Motion,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Segmentation, Task::Detection, Task::Depth, Task::Motion];

    pub fn name(self) -> &'static str {
        match self {
            Task::Segmentation => "segmentation",
            Task::Detection => "detection",
            Task::Depth => "depth",
            Task::Motion => "motion",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub task: String,
    pub value: f64,
    /// Labeled samples that contributed; zero means the task is absent from the batch.
    pub sample_count: usize,
}

impl TaskLoss {
    pub fn new(task: impl Into<String>, value: f64, sample_count: usize) -> Self {
        Self {
            task: task.into(),
            value,
            sample_count,
        }
    }

    pub fn present(&self) -> bool {
        self.sample_count > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum ScalarizationStrategy {
    WeightedSum {
        weights: BTreeMap<String, f64>,
    },
    GeometricMean {
        #[serde(default = "default_eps")]
        epsilon: f64,
    },
}

fn default_eps() -> f64 {
    1e-8
}

impl ScalarizationStrategy {
    pub fn unit_sum(tasks: &[&str]) -> Self {
        ScalarizationStrategy::WeightedSum {
            weights: tasks.iter().map(|t| (t.to_string(), 1.0)).collect(),
        }
    }

    pub fn geometric_mean() -> Self {
        ScalarizationStrategy::GeometricMean { epsilon: default_eps() }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ScalarizationStrategy::WeightedSum { weights } => {
                if let Some((task, w)) = weights.iter().find(|(_, w)| !(**w >= 0.0 && w.is_finite())) {
                    return Err(Error::spec(
                        format!("weights.{task}"),
                        format!("weight {w} must be non-negative"),
                    ));
                }
            }
            ScalarizationStrategy::GeometricMean { epsilon } => {
                if !(*epsilon > 0.0) {
                    return Err(Error::spec("epsilon", "must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub huber_delta: f64,
    pub clamp_eps: f64,
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            huber_delta: 1.0,
            clamp_eps: 1e-8,
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("huber_delta", self.huber_delta),
            ("clamp_eps", self.clamp_eps),
            ("lambda_coord", self.lambda_coord),
            ("lambda_noobj", self.lambda_noobj),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::spec(name, format!("{v} must be positive")));
            }
        }
        Ok(())
    }
}

fn batch_of(shape: &[usize]) -> usize {
    if shape.len() == 4 {
        shape[0]
    } else {
        1
    }
}

/// Mean per-pixel cross entropy over non-ignored pixels.
pub fn seg_cross_entropy<T: Real>(logits: &Tensor<T>, target: &[u8], ignore_id: Option<u8>) -> Result<TaskLoss> {
    let d = nchw(logits.shape()).map_err(Error::InvalidArgument)?;
    if target.len() != d.n * d.h * d.w {
        return Err(Error::InvalidArgument(format!(
            "target has {} ids for {}x{}x{} logits",
            target.len(),
            d.n,
            d.h,
            d.w
        )));
    }
    let target: Vec<T> = target.iter().map(|&v| T::of_f64(v as f64)).collect();
    let mask = vec![T::one(); d.n];
    let (loss, _) = kernels::seg_ce_forward(logits.data(), d, &target, &mask, ignore_id.map(usize::from))
        .map_err(Error::InvalidArgument)?;
    Ok(TaskLoss::new(Task::Segmentation.name(), loss.as_f64(), d.n))
}

/// Squared-error grid loss on an activated detection grid against its encoded target.
pub fn det_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, config: &LossConfig) -> Result<TaskLoss> {
    if pred.shape() != target.shape() {
        return Err(Error::InvalidArgument(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let d = nchw(pred.shape()).map_err(Error::InvalidArgument)?;
    let mask = vec![T::one(); d.n];
    let v = kernels::det_forward(
        pred.data(),
        d,
        target.data(),
        &mask,
        config.lambda_coord,
        config.lambda_noobj,
    );
    Ok(TaskLoss::new(Task::Detection.name(), v.as_f64(), d.n))
}

pub fn huber_depth_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, delta: f64) -> Result<TaskLoss> {
    if pred.shape() != target.shape() {
        return Err(Error::InvalidArgument(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = batch_of(pred.shape());
    let mask = vec![T::one(); n];
    let v = kernels::huber_forward(pred.data(), target.data(), &mask, delta);
    Ok(TaskLoss::new(Task::Depth.name(), v.as_f64(), n))
}

/// `Σ w_i L_i` over present tasks.
pub fn combine_weighted_sum(losses: &[TaskLoss], weights: &BTreeMap<String, f64>) -> Result<f64> {
    let mut total = 0.0;
    for l in losses.iter().filter(|l| l.present()) {
        let w = weights
            .get(&l.task)
            .ok_or_else(|| Error::InvalidArgument(format!("no weight for task `{}`", l.task)))?;
        total += w * l.value;
    }
    Ok(total)
}

/// `(Π max(L_i, ε))^(1/N)` over present tasks, evaluated in log space.
pub fn combine_geometric_mean(losses: &[TaskLoss], eps: f64) -> f64 {
    let values: Vec<f64> = losses.iter().map(|l| l.value).collect();
    let presence: Vec<f64> = losses.iter().map(|l| if l.present() { 1.0 } else { 0.0 }).collect();
    kernels::geometric_mean(&values, &presence, eps)
}

/// `∂L_Total/∂L_i` of the geometric mean; zero for clamped or absent tasks.
pub fn geometric_mean_gradient(losses: &[TaskLoss], eps: f64) -> Vec<f64> {
    let values: Vec<f64> = losses.iter().map(|l| l.value).collect();
    let presence: Vec<f64> = losses.iter().map(|l| if l.present() { 1.0 } else { 0.0 }).collect();
    let total = kernels::geometric_mean(&values, &presence, eps);
    kernels::geometric_mean_partials(&values, &presence, eps, total)
}

pub fn combine(strategy: &ScalarizationStrategy, losses: &[TaskLoss]) -> Result<f64> {
    match strategy {
        ScalarizationStrategy::WeightedSum { weights } => combine_weighted_sum(losses, weights),
        ScalarizationStrategy::GeometricMean { epsilon } => Ok(combine_geometric_mean(losses, *epsilon)),
    }
}

/// Per-task label masks for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMasks {
    /// One 0/1 entry per sample, per task.
    pub per_task: Vec<Vec<f64>>,
    /// 1 where at least one sample carries the task's labels.
    pub presence: Vec<f64>,
}

impl BatchMasks {
    pub fn labeled_count(&self, task: usize) -> usize {
        self.per_task[task].iter().filter(|v| **v > 0.0).count()
    }

    pub fn any_present(&self) -> bool {
        self.presence.iter().any(|p| *p > 0.0)
    }
}

pub fn batch_masks(tasks: &[Task], labels_present: &[BTreeSet<Task>]) -> BatchMasks {
    let per_task: Vec<Vec<f64>> = tasks
        .iter()
        .map(|t| {
            labels_present
                .iter()
                .map(|s| if s.contains(t) { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let presence = per_task
        .iter()
        .map(|m| if m.iter().any(|v| *v > 0.0) { 1.0 } else { 0.0 })
        .collect();
    BatchMasks { per_task, presence }
}

/// Averages each task's per-sample losses over the samples labeled for it.
/// Tasks nobody in the batch is labeled for are dropped; `None` means every
/// task was absent and the batch should be skipped.
pub fn mask_task_losses(
    per_sample: &[BTreeMap<Task, f64>],
    labels_present: &[BTreeSet<Task>],
) -> Option<Vec<TaskLoss>> {
    let mut out = Vec::new();
    for task in Task::ALL {
        let vals: Vec<f64> = per_sample
            .iter()
            .zip(labels_present)
            .filter(|(_, labels)| labels.contains(&task))
            .filter_map(|(losses, _)| losses.get(&task).copied())
            .collect();
        if !vals.is_empty() {
            out.push(TaskLoss::new(
                task.name(),
                vals.iter().sum::<f64>() / vals.len() as f64,
                vals.len(),
            ));
        }
    }
    if out.is_empty() {
        log::warn!("every task is unlabeled in this batch; skipping it");
        None
    } else {
        Some(out)
    }
}

pub mod kernels {
    //! Slice-level loss kernels used by the graph ops.

    use crate::nn::kernels::Nchw;
    use crate::tensor::Real;

    fn labeled<T: Real>(mask: &[T], n: usize) -> bool {
        mask[n] > T::of_f64(0.5)
    }

    /// Returns the mean cross entropy and the per-pixel softmax.
    pub fn seg_ce_forward<T: Real>(
        logits: &[T],
        d: Nchw,
        target: &[T],
        mask: &[T],
        ignore: Option<usize>,
    ) -> Result<(T, Vec<T>), String> {
        let plane = d.h * d.w;
        let probs = crate::nn::kernels::softmax_forward(logits, d);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for n in 0..d.n {
            for p in 0..plane {
                let id = target[n * plane + p].as_f64();
                let id = id as usize;
                if Some(id) == ignore {
                    continue;
                }
                if id >= d.c {
                    return Err(format!("class id {id} out of range for {} classes", d.c));
                }
                if !labeled(mask, n) {
                    continue;
                }
                let base = n * d.c * plane + p;
                let m = (0..d.c)
                    .map(|c| logits[base + c * plane])
                    .fold(T::neg_infinity(), T::max);
                let lse = m + (0..d.c).map(|c| (logits[base + c * plane] - m).exp()).sum::<T>().ln();
                total += (lse - logits[base + id * plane]).as_f64();
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok((T::of_f64(loss), probs))
    }

    pub fn seg_ce_backward<T: Real>(
        probs: &[T],
        d: Nchw,
        target: &[T],
        mask: &[T],
        ignore: Option<usize>,
        g: T,
    ) -> Vec<T> {
        let plane = d.h * d.w;
        let mut dx = vec![T::zero(); probs.len()];
        let valid = |n: usize, p: usize| {
            let id = target[n * plane + p].as_f64() as usize;
            labeled(mask, n) && Some(id) != ignore
        };
        let count = (0..d.n)
            .flat_map(|n| (0..plane).map(move |p| (n, p)))
            .filter(|&(n, p)| valid(n, p))
            .count();
        if count == 0 {
            return dx;
        }
        let scale = g / T::of_f64(count as f64);
        for n in 0..d.n {
            for p in 0..plane {
                if !valid(n, p) {
                    continue;
                }
                let id = target[n * plane + p].as_f64() as usize;
                for c in 0..d.c {
                    let at = n * d.c * plane + c * plane + p;
                    let onehot = if c == id { T::one() } else { T::zero() };
                    dx[at] = scale * (probs[at] - onehot);
                }
            }
        }
        dx
    }

    fn det_terms<T: Real>(
        pred: &[T],
        d: Nchw,
        target: &[T],
        mask: &[T],
        lambda_coord: f64,
        lambda_noobj: f64,
        mut visit: impl FnMut(usize, T, T),
    ) -> usize {
        let plane = d.h * d.w;
        let (lc, ln) = (T::of_f64(lambda_coord), T::of_f64(lambda_noobj));
        let mut labeled_n = 0;
        for n in 0..d.n {
            if !labeled(mask, n) {
                continue;
            }
            labeled_n += 1;
            let base = n * d.c * plane;
            for p in 0..plane {
                let at = |c: usize| base + c * plane + p;
                let has_object = target[at(0)] > T::of_f64(0.5);
                if has_object {
                    visit(at(0), T::one(), pred[at(0)] - target[at(0)]);
                    for c in 1..5 {
                        visit(at(c), lc, pred[at(c)] - target[at(c)]);
                    }
                    for c in 5..d.c {
                        visit(at(c), T::one(), pred[at(c)] - target[at(c)]);
                    }
                } else {
                    visit(at(0), ln, pred[at(0)] - target[at(0)]);
                }
            }
        }
        labeled_n
    }

    /// Weighted squared error normalized by the number of labeled samples.
    pub fn det_forward<T: Real>(
        pred: &[T],
        d: Nchw,
        target: &[T],
        mask: &[T],
        lambda_coord: f64,
        lambda_noobj: f64,
    ) -> T {
        let mut total = 0.0f64;
        let n = det_terms(pred, d, target, mask, lambda_coord, lambda_noobj, |_, w, e| {
            total += (w * e * e).as_f64();
        });
        if n == 0 {
            T::zero()
        } else {
            T::of_f64(total / n as f64)
        }
    }

    pub fn det_backward<T: Real>(
        pred: &[T],
        d: Nchw,
        target: &[T],
        mask: &[T],
        lambda_coord: f64,
        lambda_noobj: f64,
        g: T,
    ) -> Vec<T> {
        let mut dx = vec![T::zero(); pred.len()];
        let mut touched = Vec::new();
        let n = det_terms(pred, d, target, mask, lambda_coord, lambda_noobj, |i, w, e| {
            touched.push((i, w * e));
        });
        if n == 0 {
            return dx;
        }
        let scale = g * T::of_f64(2.0 / n as f64);
        for (i, we) in touched {
            dx[i] = scale * we;
        }
        dx
    }

    fn huber_pixels<T: Real>(pred: &[T], mask: &[T]) -> (usize, usize) {
        let n = mask.len();
        (n, pred.len() / n)
    }

    pub fn huber_forward<T: Real>(pred: &[T], target: &[T], mask: &[T], delta: f64) -> T {
        let (n, per) = huber_pixels(pred, mask);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for s in (0..n).filter(|&s| labeled(mask, s)) {
            for i in s * per..(s + 1) * per {
                let e = (pred[i] - target[i]).as_f64().abs();
                total += if e <= delta {
                    0.5 * e * e
                } else {
                    delta * (e - 0.5 * delta)
                };
                count += 1;
            }
        }
        if count == 0 {
            T::zero()
        } else {
            T::of_f64(total / count as f64)
        }
    }

    pub fn huber_backward<T: Real>(pred: &[T], target: &[T], mask: &[T], delta: f64, g: T) -> Vec<T> {
        let (n, per) = huber_pixels(pred, mask);
        let mut dx = vec![T::zero(); pred.len()];
        let count = (0..n).filter(|&s| labeled(mask, s)).count() * per;
        if count == 0 {
            return dx;
        }
        let scale = g / T::of_f64(count as f64);
        let delta_t = T::of_f64(delta);
        for s in (0..n).filter(|&s| labeled(mask, s)) {
            for i in s * per..(s + 1) * per {
                let e = pred[i] - target[i];
                let de = if e.abs() <= delta_t { e } else { delta_t * e.signum() };
                dx[i] = scale * de;
            }
        }
        dx
    }

    pub fn weighted_sum<T: Real>(losses: &[T], presence: &[T], weights: &[f64]) -> T {
        losses
            .iter()
            .zip(presence)
            .zip(weights)
            .filter(|((_, p), _)| **p > T::zero())
            .map(|((l, _), w)| *l * T::of_f64(*w))
            .sum()
    }

    pub fn geometric_mean<T: Real>(losses: &[T], presence: &[T], eps: f64) -> T {
        let eps = T::of_f64(eps);
        let present: Vec<T> = losses
            .iter()
            .zip(presence)
            .filter(|(_, p)| **p > T::zero())
            .map(|(l, _)| l.max(eps).ln())
            .collect();
        if present.is_empty() {
            return T::zero();
        }
        let m = T::of_f64(present.len() as f64);
        (present.into_iter().sum::<T>() / m).exp()
    }

    /// `L/(N·L_i)` for present, unclamped tasks; zero otherwise.
    pub fn geometric_mean_partials<T: Real>(losses: &[T], presence: &[T], eps: f64, total: T) -> Vec<T> {
        let m = presence.iter().filter(|p| **p > T::zero()).count();
        let eps = T::of_f64(eps);
        losses
            .iter()
            .zip(presence)
            .map(|(l, p)| {
                if *p > T::zero() && *l > eps {
                    total / (T::of_f64(m as f64) * *l)
                } else {
                    T::zero()
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tl(task: &str, v: f64) -> TaskLoss {
        TaskLoss::new(task, v, 1)
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::<f64>::zeros(&[3, 4, 4]);
        let l = seg_cross_entropy(&logits, &[1u8; 16], None).unwrap();
        assert!((l.value - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_drive_ce_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut v = vec![0.0; 2 * 4];
            for p in 0..4 {
                v[4 + p] = margin; // class 1 everywhere
            }
            let l = seg_cross_entropy(&Tensor::<f64>::from_f64_slice(&[2, 2, 2], &v).unwrap(), &[1u8; 4], None)
                .unwrap()
                .value;
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn out_of_range_class_fails() {
        let logits = Tensor::<f64>::zeros(&[2, 1, 2]);
        assert!(seg_cross_entropy(&logits, &[0, 2], None).is_err());
        assert!(seg_cross_entropy(&logits, &[0, 255], Some(255)).is_ok());
    }

    #[test]
    fn huber_branches() {
        let t = Tensor::<f64>::zeros(&[1, 1, 1]);
        let h = |e: f64| huber_depth_loss(&Tensor::full(&[1, 1, 1], e), &t, 1.0).unwrap().value;
        assert!((h(0.5) - 0.125).abs() < 1e-15);
        assert!((h(2.0) - 1.5).abs() < 1e-15);
        assert!((h(1.0) - 0.5).abs() < 1e-15);
        let just_above = h(1.0 + 1e-9);
        assert!((just_above - 0.5).abs() < 1e-8);
    }

    #[test]
    fn weighted_sum_examples() {
        let w: BTreeMap<String, f64> = [("seg".into(), 1.0), ("det".into(), 1.0)].into();
        assert_eq!(
            combine_weighted_sum(&[tl("seg", 2.0), tl("det", 3.0)], &w).unwrap(),
            5.0
        );
        let w: BTreeMap<String, f64> = [("seg".into(), 100.0), ("det".into(), 1.0)].into();
        assert_eq!(
            combine_weighted_sum(&[tl("seg", 0.5), tl("det", 2.0)], &w).unwrap(),
            52.0
        );
        assert!(combine_weighted_sum(&[tl("depth", 1.0)], &w).is_err());
    }

    #[test]
    fn absent_task_skipped_in_weighted_sum() {
        let w: BTreeMap<String, f64> = [("seg".into(), 1.0)].into();
        let absent = TaskLoss::new("det", 10.0, 0);
        assert_eq!(combine_weighted_sum(&[tl("seg", 2.0), absent], &w).unwrap(), 2.0);
    }

    #[test]
    fn geometric_mean_examples() {
        assert!((combine_geometric_mean(&[tl("a", 1.0), tl("b", 1.0), tl("c", 1.0)], 1e-8) - 1.0).abs() < 1e-15);
        assert!((combine_geometric_mean(&[tl("a", 8.0), tl("b", 1.0), tl("c", 1.0)], 1e-8) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn geometric_mean_zero_loss_is_clamped() {
        let v = combine_geometric_mean(&[tl("a", 0.0), tl("b", 1.0)], 1e-8);
        assert!((v - 1e-4).abs() < 1e-16);
        let g = geometric_mean_gradient(&[tl("a", 0.0), tl("b", 1.0)], 1e-8);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn masking_with_all_labels_is_identity() {
        let per: Vec<BTreeMap<Task, f64>> = vec![
            [(Task::Segmentation, 1.0), (Task::Detection, 4.0)].into(),
            [(Task::Segmentation, 3.0), (Task::Detection, 2.0)].into(),
        ];
        let full: BTreeSet<Task> = [Task::Segmentation, Task::Detection].into();
        let out = mask_task_losses(&per, &[full.clone(), full]).unwrap();
        assert_eq!(
            out,
            vec![
                TaskLoss::new("segmentation", 2.0, 2),
                TaskLoss::new("detection", 3.0, 2)
            ]
        );
    }

    #[test]
    fn masking_drops_unlabeled_tasks() {
        let per: Vec<BTreeMap<Task, f64>> = vec![[(Task::Segmentation, 1.0), (Task::Detection, 4.0)].into()];
        let seg_only: BTreeSet<Task> = [Task::Segmentation].into();
        let out = mask_task_losses(&per, &[seg_only]).unwrap();
        assert_eq!(out.len(), 1);
        assert!(mask_task_losses(&per, &[BTreeSet::new()]).is_none());
    }

    #[test]
    fn strategy_json_shape() {
        let s: ScalarizationStrategy =
            serde_json::from_str(r#"{"strategy":"weighted_sum","weights":{"seg":10.0,"det":1.0}}"#).unwrap();
        assert!(matches!(s, ScalarizationStrategy::WeightedSum { .. }));
        let g: ScalarizationStrategy = serde_json::from_str(r#"{"strategy":"geometric_mean"}"#).unwrap();
        assert_eq!(g, ScalarizationStrategy::geometric_mean());
    }
}
