mod common;

use mtl_lab::gradcheck::{run_suite, OPS};
use mtl_lab::graph::{backward, eval_graph};
use mtl_lab::losses::kernels::{geometric_mean, geometric_mean_partials};
use mtl_lab::metrics::{class_iou_report, detection_ap};
use mtl_lab::nn::{self, Conv2dParams, ConvLstmParams, ConvLstmState};
use mtl_lab::trainer::{adam_step, OptimizerState};
use mtl_lab::{Feed, GraphBuilder, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_spatial(r: &mut impl Rng, max_c: usize, max_hw: usize) -> Vec<usize> {
    let c = r.gen_range(1..=max_c);
    let h = r.gen_range(1..=max_hw);
    let w = r.gen_range(1..=max_hw);
    if r.gen_bool(0.5) {
        vec![r.gen_range(1..=3), c, h, w]
    } else {
        vec![c, h, w]
    }
}

#[test]
fn conv2d_matches_naive_loops() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let k = [1usize, 2, 3, 5][r.gen_range(0..4)];
        let stride = r.gen_range(1..=3);
        let pad = r.gen_range(0..=k / 2 + 1);
        let mut xs = rand_spatial(&mut r, 4, 9);
        let hw = xs.len() - 1;
        xs[hw - 1] = xs[hw - 1].max(k);
        xs[hw] = xs[hw].max(k);
        let ci = xs[xs.len() - 3];
        let co = r.gen_range(1..=4);
        let x = rand_tensor(&mut r, &xs);
        let w = rand_tensor(&mut r, &[co, ci, k, k]);
        let b = rand_tensor(&mut r, &[co]);
        let got = nn::conv2d(
            &x,
            &Conv2dParams {
                kernel: w.clone(),
                bias: b.clone(),
                stride,
                padding: pad,
            },
        )
        .unwrap();
        let (want, ho, wo) = common::conv2d(x.data(), &xs, w.data(), w.shape(), b.data(), stride, pad);
        assert_eq!(&got.shape()[got.shape().len() - 2..], &[ho, wo]);
        assert!(common::max_abs_diff(got.data(), &want) < 1e-10, "seed {seed}");
    }
}

#[test]
fn max_pool_softmax_upsample_match_naive_loops() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let mut xs = rand_spatial(&mut r, 4, 4);
        let l = xs.len();
        xs[l - 1] *= 2;
        xs[l - 2] *= 2;
        let x = rand_tensor(&mut r, &xs);
        let got = nn::max_pool2d(&x).unwrap();
        assert_eq!(got.data(), common::max_pool2d(x.data(), &xs).as_slice());

        let mut ss = rand_spatial(&mut r, 5, 4);
        let l = ss.len();
        ss[l - 3] = ss[l - 3].max(2);
        let s = rand_tensor(&mut r, &ss).map(|v| v * 8.0);
        let got = nn::softmax_channels(&s).unwrap();
        assert!(common::max_abs_diff(got.data(), &common::softmax_channels(s.data(), &ss)) < 1e-10);

        let f = [2usize, 4, 8][r.gen_range(0..3)];
        let us = rand_spatial(&mut r, 3, 4);
        let u = rand_tensor(&mut r, &us);
        let got = nn::bilinear_upsample(&u, f).unwrap();
        assert!(common::max_abs_diff(got.data(), &common::upsample(u.data(), &us, f)) < 1e-10);
    }
}

#[test]
fn conv_lstm_matches_naive_loops() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let n = r.gen_range(1..=2);
        let (ci, c) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let (h, w) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let x = rand_tensor(&mut r, &[n, ci, h, w]);
        let hid = rand_tensor(&mut r, &[n, c, h, w]);
        let cell = rand_tensor(&mut r, &[n, c, h, w]);
        let k = rand_tensor(&mut r, &[4 * c, ci + c, 3, 3]);
        let b = rand_tensor(&mut r, &[4 * c]);
        let (want_h, want_c) = common::conv_lstm(
            x.data(),
            x.shape(),
            hid.data(),
            cell.data(),
            hid.shape(),
            k.data(),
            b.data(),
        );

        let state = ConvLstmState {
            hidden: hid.clone(),
            cell: cell.clone(),
        };
        let params = ConvLstmParams {
            kernel: k.clone(),
            bias: b.clone(),
        };
        let (out, next) = nn::conv_lstm_step(&x, &state, &params).unwrap();
        assert!(common::max_abs_diff(out.data(), &want_h) < 1e-10);
        assert!(common::max_abs_diff(next.cell.data(), &want_c) < 1e-10);

        // The graph form of the cell agrees too.
        let mut g = GraphBuilder::new();
        let xi = g.input("x", x.shape()).unwrap();
        let hi = g.input("h", hid.shape()).unwrap();
        let cc = g.input("c", cell.shape()).unwrap();
        let kp = g.param("k", k.shape()).unwrap();
        let bp = g.param("b", b.shape()).unwrap();
        let (h2, c2) = nn::conv_lstm_step_node(&mut g, xi, hi, cc, kp, bp).unwrap();
        g.output("h", h2);
        g.output("c", c2);
        let graph = g.finish();
        let mut params = ParamStore::new();
        params.insert("k", k);
        params.insert("b", b);
        let feed: Feed<f64> = [("x", x), ("h", hid), ("c", cell)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let out = eval_graph(&graph, &params, &feed).unwrap();
        assert!(common::max_abs_diff(out["h"].data(), &want_h) < 1e-10);
        assert!(common::max_abs_diff(out["c"].data(), &want_c) < 1e-10);
    }
}

#[test]
fn class_iou_matches_brute_force() {
    for seed in 0..200 {
        let mut r = rng(seed);
        let classes = r.gen_range(1..=6);
        let n = r.gen_range(1..=300);
        // Skewed draws so some classes go missing from one side or both.
        let pred: Vec<u8> = (0..n).map(|_| r.gen_range(0..classes.max(2) - 1) as u8).collect();
        let gt: Vec<u8> = (0..n).map(|_| r.gen_range(0..classes) as u8).collect();
        let got = class_iou_report(&pred, &gt, classes, None).unwrap();
        let (per, mean) = common::class_iou(&pred, &gt, classes);
        assert_eq!(got.per_class, per, "seed {seed}");
        assert_eq!(got.mean, mean, "seed {seed}");
    }
}

#[test]
fn detection_ap_matches_brute_force() {
    for seed in 0..200 {
        let mut r = rng(seed);
        let (preds, gts) = common::random_detection_instance(&mut r);
        let got = detection_ap(&preds, &gts, 0.5).unwrap();
        let (per, mean) = common::detection_ap(&preds, &gts, 0.5);
        assert_eq!(got.per_class, per, "seed {seed}");
        assert_eq!(got.mean, mean, "seed {seed}");
    }
}

/// Random elementwise DAGs evaluated by the graph and by direct recursion.
#[test]
fn random_graphs_match_hand_interpreter() {
    #[derive(Clone, Copy)]
    enum N {
        Leaf(usize),
        Un(u8, usize),
        Bin(u8, usize, usize),
    }
    fn interp(nodes: &[N], leaves: &[Vec<f64>], i: usize, k: usize) -> f64 {
        match nodes[i] {
            N::Leaf(l) => leaves[l][k],
            N::Un(op, a) => {
                let a = interp(nodes, leaves, a, k);
                match op {
                    0 => -a,
                    1 => a.max(0.0),
                    2 => 1.0 / (1.0 + (-a).exp()),
                    3 => a.tanh(),
                    _ => 0.5 * a,
                }
            }
            N::Bin(op, a, b) => {
                let (a, b) = (interp(nodes, leaves, a, k), interp(nodes, leaves, b, k));
                match op {
                    0 => a + b,
                    1 => a - b,
                    _ => a * b,
                }
            }
        }
    }
    for seed in 0..100 {
        let mut r = rng(seed);
        let len = r.gen_range(1..=6);
        let n_leaves = r.gen_range(1..=3);
        let mut g = GraphBuilder::new();
        let mut ids = Vec::new();
        let mut nodes = Vec::new();
        let mut leaves = Vec::new();
        let mut params = ParamStore::<f64>::new();
        for l in 0..n_leaves {
            let t = rand_tensor(&mut r, &[len]);
            leaves.push(t.data().to_vec());
            ids.push(g.param(&format!("p{l}"), &[len]).unwrap());
            params.insert(format!("p{l}"), t);
            nodes.push(N::Leaf(l));
        }
        for _ in 0..r.gen_range(1..=12) {
            let a = r.gen_range(0..ids.len());
            if r.gen_bool(0.5) {
                let op = r.gen_range(0..5u8);
                let id = match op {
                    0 => g.neg(ids[a]),
                    1 => g.relu(ids[a]),
                    2 => g.sigmoid(ids[a]),
                    3 => g.tanh(ids[a]),
                    _ => g.scale(ids[a], 0.5),
                };
                ids.push(id);
                nodes.push(N::Un(op, a));
            } else {
                let b = r.gen_range(0..ids.len());
                let op = r.gen_range(0..3u8);
                let id = match op {
                    0 => g.add(ids[a], ids[b]),
                    1 => g.sub(ids[a], ids[b]),
                    _ => g.mul(ids[a], ids[b]),
                }
                .unwrap();
                ids.push(id);
                nodes.push(N::Bin(op, a, b));
            }
        }
        let last = *ids.last().unwrap();
        g.output("y", last);
        let graph = g.finish();
        let out = eval_graph(&graph, &params, &Feed::new()).unwrap();
        let want: Vec<f64> = (0..len).map(|k| interp(&nodes, &leaves, nodes.len() - 1, k)).collect();
        assert!(common::max_abs_diff(out["y"].data(), &want) < 1e-12, "seed {seed}");
    }
}

#[test]
fn every_op_passes_finite_differences() {
    let report = run_suite(OPS, 100, 1e-4).unwrap();
    for s in &report {
        assert!(
            s.passed(),
            "{} failed {} of {} (max {:e})",
            s.op,
            s.failures,
            s.cases,
            s.max_error
        );
    }
}

#[test]
fn adam_matches_hand_stepped_square() {
    let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
    let want = common::adam_on_square(1.5, 10, lr, b1, b2, eps);
    let mut params = ParamStore::<f64>::new();
    params.insert("theta", Tensor::scalar(1.5));
    let mut state = OptimizerState::new(&params);
    for (step, expected) in want.iter().enumerate() {
        let theta = params.get("theta").unwrap().item();
        let mut grads = ParamStore::new();
        grads.insert("theta", Tensor::scalar(2.0 * theta));
        adam_step(&mut params, &grads, &mut state, lr, b1, b2, eps).unwrap();
        let got = params.get("theta").unwrap().item();
        assert!((got - expected).abs() < 1e-12, "step {step}: {got} vs {expected}");
    }
}

#[test]
fn geometric_mean_gradient_is_total_over_n_li() {
    for n in [2usize, 3] {
        for seed in 0..50 {
            let mut r = rng(seed);
            let losses: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..5.0)).collect();
            let presence = vec![1.0; n];
            let mut g = GraphBuilder::new();
            let ids: Vec<_> = (0..n).map(|i| g.param(&format!("l{i}"), &[1]).unwrap()).collect();
            let p = g.input("presence", &[n]).unwrap();
            let total = g.geometric_mean(&ids, p, 1e-8).unwrap();
            let graph = g.finish();
            let mut params = ParamStore::<f64>::new();
            for (i, l) in losses.iter().enumerate() {
                params.insert(format!("l{i}"), Tensor::scalar(*l));
            }
            let mut feed = Feed::new();
            feed.insert("presence".into(), Tensor::from_f64_slice(&[n], &presence).unwrap());
            let grads = backward(&graph, &params, &feed, total).unwrap();
            let l_total = losses.iter().product::<f64>().powf(1.0 / n as f64);
            assert!((geometric_mean(&losses, &presence, 1e-8) - l_total).abs() < 1e-12 * l_total);
            let partials = geometric_mean_partials(&losses, &presence, 1e-8, l_total);
            for i in 0..n {
                let want = l_total / (n as f64 * losses[i]);
                let got = grads.params.get(&format!("l{i}")).unwrap().item();
                assert!(((got - want) / want).abs() < 1e-6, "n={n} seed={seed} i={i}");
                assert!(((partials[i] - want) / want).abs() < 1e-6);
            }
        }
    }
}
