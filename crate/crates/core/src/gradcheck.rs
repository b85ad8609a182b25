//! Seeded finite-difference checks for every differentiable graph op.
//!
//! Each case builds a small graph around one op with random shapes and
//! values, reduces its output to a scalar through a fixed random projection
//! and compares analytic against central-difference gradients at f64.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{grad_check, Feed, GradCheckOptions, Graph, GraphBuilder, NodeId, ParamStore};
use crate::nn::conv_lstm_step_node;
use crate::tensor::Tensor;

/// Ops covered by [`run_suite`], in report order.
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "sum",
    "relu",
    "sigmoid",
    "tanh",
    "conv2d",
    "max_pool2d",
    "upsample",
    "concat",
    "slice_channels",
    "softmax",
    "conv_lstm",
    "seg_cross_entropy",
    "detection_loss",
    "huber",
    "weighted_sum",
    "geometric_mean",
];

/// One self-contained check: graph, values and the scalar to differentiate.
pub struct Case {
    pub graph: Graph,
    pub params: ParamStore<f64>,
    pub feed: Feed<f64>,
    pub seed: NodeId,
}

#[derive(Debug, Clone, Serialize)]
pub struct OpSummary {
    pub op: String,
    pub cases: usize,
    pub failures: usize,
    pub max_error: f64,
}

impl OpSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

struct Ctx {
    b: GraphBuilder,
    rng: ChaCha8Rng,
    params: ParamStore<f64>,
    feed: Feed<f64>,
}

impl Ctx {
    fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            b: GraphBuilder::new(),
            rng,
            params: ParamStore::new(),
            feed: Feed::new(),
        }
    }

    fn uniform(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.gen_range(lo..hi)).collect()
    }

    fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).expect("generated data matches shape")
    }

    fn param(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<NodeId> {
        self.params.insert(name, Self::tensor(shape, data));
        self.b.param(name, shape)
    }

    /// Differentiable input; its gradient is checked too.
    fn var(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<NodeId> {
        self.feed.insert(name.into(), Self::tensor(shape, data));
        self.b.input_with_grad(name, shape, true)
    }

    fn constant(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<NodeId> {
        self.feed.insert(name.into(), Self::tensor(shape, data));
        self.b.input(name, shape)
    }

    fn spatial_shape(&mut self, max_c: usize, hw: &[usize]) -> Vec<usize> {
        let c = self.rng.gen_range(1..=max_c);
        let h = *hw.choose(&mut self.rng).expect("sizes");
        let w = *hw.choose(&mut self.rng).expect("sizes");
        if self.rng.gen_bool(0.5) {
            vec![self.rng.gen_range(1..=2), c, h, w]
        } else {
            vec![c, h, w]
        }
    }

    /// Values bounded away from zero, so relu kinks are never straddled.
    fn away_from_zero(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let m = self.rng.gen_range(0.05..1.5);
                if self.rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect()
    }

    /// Projects `out` onto a random fixed direction.
    fn reduce(mut self, out: NodeId) -> Result<Case> {
        let shape = self.b.shape(out).to_vec();
        let n: usize = shape.iter().product();
        let r = self.uniform(n, -1.0, 1.0);
        let r = self.constant("proj", &shape, r)?;
        let prod = self.b.mul(out, r)?;
        let seed = self.b.sum(prod);
        Ok(self.finish(seed))
    }

    fn finish(mut self, seed: NodeId) -> Case {
        self.b.output("f", seed);
        Case {
            graph: self.b.finish(),
            params: self.params,
            feed: self.feed,
            seed,
        }
    }

    fn sample_mask(&mut self, n: usize) -> Vec<f64> {
        let mut m: Vec<f64> = (0..n).map(|_| f64::from(u8::from(self.rng.gen_bool(0.7)))).collect();
        let keep = self.rng.gen_range(0..n);
        m[keep] = 1.0;
        m
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Builds case number `seed` for `op`.
pub fn op_case(op: &str, seed: u64) -> Result<Case> {
    let stream = OPS.iter().position(|o| *o == op).unwrap_or(OPS.len()) as u64;
    let mut cx = Ctx::new(seed, stream);
    match op {
        "add" | "sub" | "mul" => {
            let shape = cx.spatial_shape(3, &[1, 2, 3]);
            let a = cx.uniform(numel(&shape), -2.0, 2.0);
            let bv = cx.uniform(numel(&shape), -2.0, 2.0);
            let a = cx.var("a", &shape, a)?;
            let bn = cx.param("b", &shape, bv)?;
            let out = match op {
                "add" => cx.b.add(a, bn)?,
                "sub" => cx.b.sub(a, bn)?,
                _ => cx.b.mul(a, bn)?,
            };
            cx.reduce(out)
        }
        "neg" | "scale" | "sum" | "relu" | "sigmoid" | "tanh" => {
            let shape = cx.spatial_shape(3, &[1, 2, 3]);
            let v = match op {
                "relu" => cx.away_from_zero(numel(&shape)),
                _ => cx.uniform(numel(&shape), -3.0, 3.0),
            };
            let x = cx.var("x", &shape, v)?;
            let out = match op {
                "neg" => cx.b.neg(x),
                "scale" => {
                    let c = cx.rng.gen_range(-2.0..2.0);
                    cx.b.scale(x, c)
                }
                "sum" => cx.b.sum(x),
                "relu" => cx.b.relu(x),
                "sigmoid" => cx.b.sigmoid(x),
                _ => cx.b.tanh(x),
            };
            cx.reduce(out)
        }
        "conv2d" => {
            let shape = cx.spatial_shape(3, &[3, 4, 5]);
            let ci = shape[shape.len() - 3];
            let co = cx.rng.gen_range(1..=3);
            let k = *[1usize, 3].choose(&mut cx.rng).expect("kernels");
            let stride = cx.rng.gen_range(1..=2);
            let pad = if k == 3 { cx.rng.gen_range(0..=1) } else { 0 };
            let xv = cx.uniform(numel(&shape), -1.0, 1.0);
            let wv = cx.uniform(co * ci * k * k, -1.0, 1.0);
            let bv = cx.uniform(co, -0.5, 0.5);
            let x = cx.var("x", &shape, xv)?;
            let w = cx.param("w", &[co, ci, k, k], wv)?;
            let bias = cx.param("bias", &[co], bv)?;
            let out = cx.b.conv2d(x, w, bias, stride, pad)?;
            cx.reduce(out)
        }
        "max_pool2d" => {
            let shape = cx.spatial_shape(2, &[2, 4]);
            // Distinct levels 0.1 apart keep every window's argmax stable.
            let n = numel(&shape);
            let mut levels: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
            levels.shuffle(&mut cx.rng);
            let x = cx.var("x", &shape, levels)?;
            let out = cx.b.max_pool2d(x)?;
            cx.reduce(out)
        }
        "upsample" => {
            let shape = cx.spatial_shape(2, &[1, 2, 3]);
            let factor = *[2usize, 4, 8].choose(&mut cx.rng).expect("factors");
            let v = cx.uniform(numel(&shape), -1.0, 1.0);
            let x = cx.var("x", &shape, v)?;
            let out = cx.b.upsample(x, factor)?;
            cx.reduce(out)
        }
        "concat" => {
            let shape = cx.spatial_shape(2, &[1, 2, 3]);
            let mut other = shape.clone();
            let ci = other.len() - 3;
            other[ci] = cx.rng.gen_range(1..=3);
            let av = cx.uniform(numel(&shape), -1.0, 1.0);
            let bv = cx.uniform(numel(&other), -1.0, 1.0);
            let a = cx.var("a", &shape, av)?;
            let bn = cx.var("b", &other, bv)?;
            let out = cx.b.concat(a, bn)?;
            cx.reduce(out)
        }
        "slice_channels" => {
            let mut shape = cx.spatial_shape(1, &[1, 2, 3]);
            let ci = shape.len() - 3;
            shape[ci] = cx.rng.gen_range(2..=5);
            let start = cx.rng.gen_range(0..shape[ci]);
            let len = cx.rng.gen_range(1..=shape[ci] - start);
            let v = cx.uniform(numel(&shape), -1.0, 1.0);
            let x = cx.var("x", &shape, v)?;
            let out = cx.b.slice_channels(x, start, len)?;
            cx.reduce(out)
        }
        "softmax" => {
            let mut shape = cx.spatial_shape(1, &[1, 2, 3]);
            let ci = shape.len() - 3;
            shape[ci] = cx.rng.gen_range(2..=4);
            let v = cx.uniform(numel(&shape), -3.0, 3.0);
            let x = cx.var("x", &shape, v)?;
            let out = cx.b.softmax(x)?;
            cx.reduce(out)
        }
        "conv_lstm" => {
            let n = cx.rng.gen_range(1..=2);
            let ci = cx.rng.gen_range(1..=2);
            let c = cx.rng.gen_range(1..=2);
            let (h, w) = (cx.rng.gen_range(1..=3), cx.rng.gen_range(1..=3));
            let xv = cx.uniform(n * ci * h * w, -1.0, 1.0);
            let hv = cx.uniform(n * c * h * w, -1.0, 1.0);
            let cv = cx.uniform(n * c * h * w, -1.0, 1.0);
            let kv = cx.uniform(4 * c * (ci + c) * 9, -0.5, 0.5);
            let bv = cx.uniform(4 * c, -0.5, 0.5);
            let x = cx.var("x", &[n, ci, h, w], xv)?;
            let hid = cx.var("h", &[n, c, h, w], hv)?;
            let cell = cx.var("c", &[n, c, h, w], cv)?;
            let k = cx.param("k", &[4 * c, ci + c, 3, 3], kv)?;
            let bias = cx.param("bias", &[4 * c], bv)?;
            let (h2, c2) = conv_lstm_step_node(&mut cx.b, x, hid, cell, k, bias)?;
            let both = cx.b.concat(h2, c2)?;
            cx.reduce(both)
        }
        "seg_cross_entropy" => {
            let n = cx.rng.gen_range(1..=3);
            let c = cx.rng.gen_range(2..=4);
            let (h, w) = (cx.rng.gen_range(1..=3), cx.rng.gen_range(1..=3));
            let ignore = cx.rng.gen_bool(0.5).then_some(c);
            let hi = if ignore.is_some() { c + 1 } else { c };
            let t: Vec<f64> = (0..n * h * w).map(|_| cx.rng.gen_range(0..hi) as f64).collect();
            let lv = cx.uniform(n * c * h * w, -3.0, 3.0);
            let mask = cx.sample_mask(n);
            let logits = cx.var("logits", &[n, c, h, w], lv)?;
            let target = cx.constant("target", &[n, h, w], t)?;
            let mask = cx.constant("mask", &[n], mask)?;
            let loss = cx.b.seg_cross_entropy(logits, target, mask, ignore)?;
            Ok(cx.finish(loss))
        }
        "detection_loss" => {
            let n = cx.rng.gen_range(1..=3);
            let c = 5 + cx.rng.gen_range(1..=3);
            let s = cx.rng.gen_range(1..=3);
            let plane = s * s;
            let mut t = cx.uniform(n * c * plane, 0.0, 1.0);
            for sample in 0..n {
                for p in 0..plane {
                    t[sample * c * plane + p] = f64::from(u8::from(cx.rng.gen_bool(0.4)));
                }
            }
            let pv = cx.uniform(n * c * plane, 0.0, 1.0);
            let mask = cx.sample_mask(n);
            let pred = cx.var("pred", &[n, c, s, s], pv)?;
            let target = cx.constant("target", &[n, c, s, s], t)?;
            let mask = cx.constant("mask", &[n], mask)?;
            let lc = cx.rng.gen_range(0.5..5.0);
            let ln = cx.rng.gen_range(0.1..1.0);
            let loss = cx.b.detection_loss(pred, target, mask, lc, ln)?;
            Ok(cx.finish(loss))
        }
        "huber" => {
            let n = cx.rng.gen_range(1..=3);
            let (h, w) = (cx.rng.gen_range(1..=4), cx.rng.gen_range(1..=4));
            let delta = cx.rng.gen_range(0.3..1.5);
            let len = n * h * w;
            let t = cx.uniform(len, -1.0, 1.0);
            // Residuals stay clear of the |e| = delta seam.
            let pv: Vec<f64> = t
                .iter()
                .map(|tv| {
                    let m = if cx.rng.gen_bool(0.5) {
                        cx.rng.gen_range(0.05..0.9) * delta
                    } else {
                        cx.rng.gen_range(1.1..3.0) * delta
                    };
                    tv + if cx.rng.gen_bool(0.5) { m } else { -m }
                })
                .collect();
            let mask = cx.sample_mask(n);
            let pred = cx.var("pred", &[n, 1, h, w], pv)?;
            let target = cx.constant("target", &[n, 1, h, w], t)?;
            let mask = cx.constant("mask", &[n], mask)?;
            let loss = cx.b.huber(pred, target, mask, delta)?;
            Ok(cx.finish(loss))
        }
        "weighted_sum" | "geometric_mean" => {
            let k = cx.rng.gen_range(1..=4);
            let mut presence = cx.sample_mask(k);
            if op == "geometric_mean" && cx.rng.gen_bool(0.5) {
                presence.iter_mut().for_each(|p| *p = 1.0);
            }
            let mut losses = Vec::with_capacity(k);
            for i in 0..k {
                let v = cx.rng.gen_range(0.05..3.0);
                losses.push(cx.param(&format!("l{i}"), &[1], vec![v])?);
            }
            let presence = cx.constant("presence", &[k], presence)?;
            let total = if op == "weighted_sum" {
                let w = cx.uniform(k, 0.0, 5.0);
                cx.b.weighted_sum(&losses, presence, &w)?
            } else {
                cx.b.geometric_mean(&losses, presence, 1e-8)?
            };
            Ok(cx.finish(total))
        }
        other => Err(Error::InvalidArgument(format!("no gradient check for op `{other}`"))),
    }
}

/// Runs `cases` seeded checks for each op in `ops`.
pub fn run_suite(ops: &[&str], cases: usize, tolerance: f64) -> Result<Vec<OpSummary>> {
    ops.iter()
        .map(|op| {
            let mut summary = OpSummary {
                op: op.to_string(),
                cases,
                failures: 0,
                max_error: 0.0,
            };
            for seed in 0..cases as u64 {
                let case = op_case(op, seed)?;
                let report = grad_check(
                    &case.graph,
                    &case.params,
                    &case.feed,
                    case.seed,
                    tolerance,
                    GradCheckOptions {
                        seed,
                        ..GradCheckOptions::default()
                    },
                )?;
                summary.max_error = summary.max_error.max(report.max_error);
                if !report.passed {
                    summary.failures += 1;
                }
            }
            Ok(summary)
        })
        .collect()
}
