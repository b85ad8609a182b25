//! Naive reference implementations used as test oracles. Written as plain
//! loops over the definitions, independent of the library kernels.

#![allow(dead_code)]

use std::collections::BTreeMap;

use mtl_lab::metrics::BBox;
use rand::Rng;

/// Splits a `[C,H,W]` or `[N,C,H,W]` shape into `(n, c, h, w)`.
pub fn dims(shape: &[usize]) -> (usize, usize, usize, usize) {
    match shape {
        [c, h, w] => (1, *c, *h, *w),
        [n, c, h, w] => (*n, *c, *h, *w),
        _ => panic!("not spatial: {shape:?}"),
    }
}

pub fn conv2d(
    x: &[f64],
    xs: &[usize],
    w: &[f64],
    ws: &[usize],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let (n, ci, h, wd) = dims(xs);
    let (co, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], ci);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for s in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for u in 0..k {
                            for v in 0..k {
                                let r = (i * stride + u) as isize - pad as isize;
                                let q = (j * stride + v) as isize - pad as isize;
                                if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                    continue;
                                }
                                let xv = x[((s * ci + c) * h + r as usize) * wd + q as usize];
                                acc += xv * w[((o * ci + c) * k + u) * k + v];
                            }
                        }
                    }
                    out[((s * co + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

pub fn max_pool2d(x: &[f64], xs: &[usize]) -> Vec<f64> {
    let (n, c, h, w) = dims(xs);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![f64::NEG_INFINITY; n * c * ho * wo];
    for p in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                let o = &mut out[(p * ho + i) * wo + j];
                for u in 0..2 {
                    for v in 0..2 {
                        *o = o.max(x[(p * h + 2 * i + u) * w + 2 * j + v]);
                    }
                }
            }
        }
    }
    out
}

pub fn softmax_channels(x: &[f64], xs: &[usize]) -> Vec<f64> {
    let (n, c, h, w) = dims(xs);
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for p in 0..h * w {
            let at = |ch: usize| (s * c + ch) * h * w + p;
            let m = (0..c).map(|ch| x[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ch| (x[at(ch)] - m).exp()).sum();
            for ch in 0..c {
                out[at(ch)] = (x[at(ch)] - m).exp() / z;
            }
        }
    }
    out
}

/// Half-pixel-centre bilinear resize by an integer factor.
pub fn upsample(x: &[f64], xs: &[usize], f: usize) -> Vec<f64> {
    let (n, c, h, w) = dims(xs);
    let (ho, wo) = (h * f, w * f);
    let src = |d: usize, len: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) / f as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        for i in 0..ho {
            let (r0, r1, a) = src(i, h);
            for j in 0..wo {
                let (c0, c1, bw) = src(j, w);
                let g = |r: usize, q: usize| x[(p * h + r) * w + q];
                out[(p * ho + i) * wo + j] = (1.0 - a) * ((1.0 - bw) * g(r0, c0) + bw * g(r0, c1))
                    + a * ((1.0 - bw) * g(r1, c0) + bw * g(r1, c1));
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One ConvLSTM step, gates `[i,f,o,g]` from a 3x3 same-padded conv over
/// `[x ‖ h]`. Returns `(h', c')`, each `[N,C,H,W]` flattened.
pub fn conv_lstm(
    x: &[f64],
    xs: &[usize],
    hidden: &[f64],
    cell: &[f64],
    hs: &[usize],
    kernel: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (n, ci, h, w) = dims(xs);
    let c = dims(hs).1;
    let plane = h * w;
    let mut stacked = Vec::with_capacity(n * (ci + c) * plane);
    for s in 0..n {
        stacked.extend_from_slice(&x[s * ci * plane..(s + 1) * ci * plane]);
        stacked.extend_from_slice(&hidden[s * c * plane..(s + 1) * c * plane]);
    }
    let (gates, _, _) = conv2d(&stacked, &[n, ci + c, h, w], kernel, &[4 * c, ci + c, 3, 3], bias, 1, 1);
    let mut h2 = vec![0.0; n * c * plane];
    let mut c2 = vec![0.0; n * c * plane];
    for s in 0..n {
        for ch in 0..c {
            for p in 0..plane {
                let g = |k: usize| gates[(s * 4 * c + k * c + ch) * plane + p];
                let idx = (s * c + ch) * plane + p;
                let cn = sigmoid(g(1)) * cell[idx] + sigmoid(g(0)) * g(3).tanh();
                c2[idx] = cn;
                h2[idx] = sigmoid(g(2)) * cn.tanh();
            }
        }
    }
    (h2, c2)
}

/// Per-class IoU over classes seen in prediction or ground truth, and their mean.
pub fn class_iou(pred: &[u8], gt: &[u8], classes: usize) -> (BTreeMap<usize, f64>, f64) {
    let mut per = BTreeMap::new();
    for c in 0..classes {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize == c, g as usize == c);
            tp += u64::from(p && g);
            fp += u64::from(p && !g);
            fn_ += u64::from(!p && g);
        }
        if tp + fp + fn_ > 0 {
            per.insert(c, tp as f64 / (tp + fp + fn_) as f64);
        }
    }
    let mean = if per.is_empty() {
        0.0
    } else {
        per.values().sum::<f64>() / per.len() as f64
    };
    (per, mean)
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let lo = |c: f64, s: f64| c - s / 2.0;
    let hi = |c: f64, s: f64| c + s / 2.0;
    let ix = (hi(a.x, a.w).min(hi(b.x, b.w)) - lo(a.x, a.w).max(lo(b.x, b.w))).max(0.0);
    let iy = (hi(a.y, a.h).min(hi(b.y, b.h)) - lo(a.y, a.h).max(lo(b.y, b.h))).max(0.0);
    let area = |q: &BBox| (hi(q.x, q.w) - lo(q.x, q.w)) * (hi(q.y, q.h) - lo(q.y, q.h));
    let inter = ix * iy;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Brute-force all-point AP: rank by confidence (stable), match each
/// prediction to its best unmatched same-class GT at IoU >= thr, then sum
/// `max(precision at ranks >= i) / n_gt` over the hits.
pub fn detection_ap(preds: &[Vec<BBox>], gts: &[Vec<BBox>], thr: f64) -> (BTreeMap<usize, f64>, f64) {
    let mut classes: Vec<usize> = gts.iter().flatten().map(|b| b.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per = BTreeMap::new();
    for class in classes {
        let n_gt = gts.iter().flatten().filter(|b| b.class_id == class).count();
        let mut ranked = Vec::new();
        for (img, ps) in preds.iter().enumerate() {
            for p in ps.iter().filter(|p| p.class_id == class) {
                ranked.push((img, *p));
            }
        }
        // Insertion sort keeps equal confidences in their original order.
        for i in 1..ranked.len() {
            let mut j = i;
            while j > 0 && ranked[j - 1].1.confidence < ranked[j].1.confidence {
                ranked.swap(j - 1, j);
                j -= 1;
            }
        }
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut hits = Vec::new();
        for (img, p) in &ranked {
            let mut best = None;
            let mut best_iou = f64::NEG_INFINITY;
            for (j, g) in gts[*img].iter().enumerate() {
                if g.class_id == class && !used[*img][j] {
                    let iou = box_iou(p, g);
                    if iou >= thr && iou > best_iou {
                        best = Some(j);
                        best_iou = iou;
                    }
                }
            }
            if let Some(j) = best {
                used[*img][j] = true;
            }
            hits.push(best.is_some());
        }
        let prec: Vec<f64> = (0..hits.len())
            .map(|i| hits[..=i].iter().filter(|h| **h).count() as f64 / (i + 1) as f64)
            .collect();
        let mut ap = 0.0;
        for i in 0..hits.len() {
            if hits[i] {
                let interp = prec[i..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                ap += interp / n_gt as f64;
            }
        }
        per.insert(class, ap);
    }
    let mean = if per.is_empty() {
        0.0
    } else {
        per.values().sum::<f64>() / per.len() as f64
    };
    (per, mean)
}

/// Random detection instance: ground truth per image plus predictions made
/// of jittered copies, spurious boxes and quantized (often tied) confidences.
pub fn random_detection_instance(rng: &mut impl Rng) -> (Vec<Vec<BBox>>, Vec<Vec<BBox>>) {
    let images = rng.gen_range(1..=4);
    let classes = rng.gen_range(1..=3);
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for _ in 0..images {
        let mut g = Vec::new();
        for _ in 0..rng.gen_range(0..=4) {
            g.push(BBox::new(
                rng.gen_range(0..classes),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.05..0.4),
            ));
        }
        let mut p = Vec::new();
        for b in &g {
            for _ in 0..rng.gen_range(0..=2) {
                let j = rng.gen_range(0.0..0.08);
                let class_id = if rng.gen_bool(0.85) {
                    b.class_id
                } else {
                    rng.gen_range(0..classes)
                };
                p.push(
                    BBox::new(class_id, b.x + j, b.y - j / 2.0, b.w * rng.gen_range(0.8..1.2), b.h)
                        .with_confidence(f64::from(rng.gen_range(1..=10u8)) / 10.0),
                );
            }
        }
        for _ in 0..rng.gen_range(0..=2) {
            p.push(
                BBox::new(
                    rng.gen_range(0..classes),
                    rng.gen_range(0.1..0.9),
                    rng.gen_range(0.1..0.9),
                    rng.gen_range(0.05..0.4),
                    rng.gen_range(0.05..0.4),
                )
                .with_confidence(f64::from(rng.gen_range(1..=10u8)) / 10.0),
            );
        }
        gts.push(g);
        preds.push(p);
    }
    (preds, gts)
}

/// Hand-stepped Adam on `f(θ) = θ²`.
pub fn adam_on_square(theta0: f64, steps: usize, lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = 2.0 * theta;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t as i32));
        let v_hat = v / (1.0 - b2.powi(t as i32));
        theta -= lr * m_hat / (v_hat.sqrt() + eps);
        out.push(theta);
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub mod checks;
