//! Structural and oracle checks shared by the integration tests and the
//! acceptance runner. Each returns a one-line detail on success or a reason
//! on failure.

use std::time::Instant;

use mtl_lab::architectures::Model;
use mtl_lab::architectures::{
    assemble, assemble_untied, count_spec_params, model_graph, reclaim_per_task, ArchitectureSpec, Mode, ENCODER,
    FRAME_CURR, FRAME_PREV, FUSION, UNTIED_PREV_ENCODER,
};
use mtl_lab::experiments::{setup, Variant};
use mtl_lab::gradcheck::{run_suite, OPS};
use mtl_lab::graph::backward;
use mtl_lab::metrics::{class_iou_report, detection_ap};
use mtl_lab::nn::{self, Conv2dParams, ConvLstmParams, ConvLstmState};
use mtl_lab::synthdata::SceneSpec;
use mtl_lab::{Feed, GraphBuilder, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_tensor(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).expect("shape")
}

pub fn gradient_soundness() -> Check {
    let start = Instant::now();
    let report = run_suite(OPS, 100, 1e-4).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    let worst = report.iter().map(|s| s.max_error).fold(0.0, f64::max);
    if let Some(bad) = report.iter().find(|s| !s.passed()) {
        return Err(format!(
            "{} failed {}/{} cases (max rel err {:.2e})",
            bad.op, bad.failures, bad.cases, bad.max_error
        ));
    }
    ensure(elapsed < 120.0, || format!("took {elapsed:.1}s"))?;
    Ok(format!(
        "{} ops x 100 cases, max rel err {worst:.2e}, {elapsed:.2}s",
        report.len()
    ))
}

pub fn product_gradient_identity() -> Check {
    let mut worst: f64 = 0.0;
    for n in [2usize, 3] {
        for seed in 0..100u64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let losses: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..5.0)).collect();
            let mut g = GraphBuilder::new();
            let ids: Vec<_> = (0..n)
                .map(|i| g.param(&format!("l{i}"), &[1]).expect("param"))
                .collect();
            let presence = g.input("presence", &[n]).expect("input");
            let total = g.geometric_mean(&ids, presence, 1e-8).expect("gm");
            let graph = g.finish();
            let mut params = ParamStore::<f64>::new();
            for (i, l) in losses.iter().enumerate() {
                params.insert(format!("l{i}"), Tensor::scalar(*l));
            }
            let mut feed = Feed::new();
            feed.insert("presence".into(), Tensor::full(&[n], 1.0));
            let ev = graph.eval(&params, &feed).map_err(|e| e.to_string())?;
            let l_total = ev.scalar(total);
            let grads = graph.backward(&params, &ev, total).map_err(|e| e.to_string())?;
            for (i, l) in losses.iter().enumerate() {
                let want = l_total / (n as f64 * l);
                let got = grads.params.get(&format!("l{i}")).expect("grad").item();
                worst = worst.max(((got - want) / want).abs());
            }
        }
    }
    ensure(worst < 1e-6, || format!("max relative deviation {worst:.2e}"))?;
    Ok(format!("N in {{2,3}} x 100 cases, max rel dev {worst:.2e}"))
}

pub fn oracle_equivalence() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (n, ci, co) = (r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4));
        let k = [1usize, 3, 5][r.gen_range(0..3)];
        let (h, w) = (r.gen_range(k..=9), r.gen_range(k..=9));
        let (stride, pad) = (r.gen_range(1..=2), r.gen_range(0..=k / 2));
        let x = rand_tensor(&mut r, &[n, ci, h, w]);
        let wt = rand_tensor(&mut r, &[co, ci, k, k]);
        let b = rand_tensor(&mut r, &[co]);
        let got = nn::conv2d(
            &x,
            &Conv2dParams {
                kernel: wt.clone(),
                bias: b.clone(),
                stride,
                padding: pad,
            },
        )
        .map_err(|e| e.to_string())?;
        let (want, _, _) = super::conv2d(x.data(), x.shape(), wt.data(), wt.shape(), b.data(), stride, pad);
        worst = worst.max(super::max_abs_diff(got.data(), &want));

        let p = rand_tensor(&mut r, &[n, ci, 2 * h, 2 * w]);
        let got = nn::max_pool2d(&p).map_err(|e| e.to_string())?;
        worst = worst.max(super::max_abs_diff(got.data(), &super::max_pool2d(p.data(), p.shape())));

        let s = rand_tensor(&mut r, &[n, ci + 1, h, w]).map(|v| 6.0 * v);
        let got = nn::softmax_channels(&s).map_err(|e| e.to_string())?;
        worst = worst.max(super::max_abs_diff(
            got.data(),
            &super::softmax_channels(s.data(), s.shape()),
        ));

        let c = r.gen_range(1..=3);
        let hid = rand_tensor(&mut r, &[n, c, h, w]);
        let cell = rand_tensor(&mut r, &[n, c, h, w]);
        let kl = rand_tensor(&mut r, &[4 * c, ci + c, 3, 3]);
        let bl = rand_tensor(&mut r, &[4 * c]);
        let (out, next) = nn::conv_lstm_step(
            &x,
            &ConvLstmState {
                hidden: hid.clone(),
                cell: cell.clone(),
            },
            &ConvLstmParams {
                kernel: kl.clone(),
                bias: bl.clone(),
            },
        )
        .map_err(|e| e.to_string())?;
        let (wh, wc) = super::conv_lstm(
            x.data(),
            x.shape(),
            hid.data(),
            cell.data(),
            hid.shape(),
            kl.data(),
            bl.data(),
        );
        worst = worst.max(super::max_abs_diff(out.data(), &wh));
        worst = worst.max(super::max_abs_diff(next.cell.data(), &wc));
    }
    ensure(worst < 1e-10, || format!("layer oracle deviation {worst:.2e}"))?;

    for seed in 0..200u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let classes = r.gen_range(1..=6);
        let len = r.gen_range(1..=300);
        let pred: Vec<u8> = (0..len).map(|_| r.gen_range(0..classes) as u8).collect();
        let gt: Vec<u8> = (0..len).map(|_| r.gen_range(0..classes) as u8).collect();
        let got = class_iou_report(&pred, &gt, classes, None).map_err(|e| e.to_string())?;
        let (per, mean) = super::class_iou(&pred, &gt, classes);
        ensure(got.per_class == per && got.mean == mean, || {
            format!("class IoU differs on instance {seed}")
        })?;

        let (preds, gts) = super::random_detection_instance(&mut r);
        let got = detection_ap(&preds, &gts, 0.5).map_err(|e| e.to_string())?;
        let (per, mean) = super::detection_ap(&preds, &gts, 0.5);
        ensure(got.per_class == per && got.mean == mean, || {
            format!("AP differs on instance {seed}")
        })?;
    }
    Ok(format!("layers max dev {worst:.2e}; IoU and AP exact on 200 instances"))
}

fn budget(variant: Variant) -> Result<mtl_lab::architectures::ParamBudget, String> {
    let scene = SceneSpec::default();
    count_spec_params(&setup(variant, &scene, 16).architecture).map_err(|e| e.to_string())
}

pub fn parameter_identities() -> Check {
    let three = budget(Variant::ThreeTaskSum)?;
    let seg = budget(Variant::StlSeg)?;
    let depth = budget(Variant::StlDepth)?;
    let motion = budget(Variant::StlMotion)?;
    let heads = three.component("depth") + three.component("motion") + three.component(FUSION);
    ensure(three.total - seg.total == heads, || {
        format!("3-task {} - STL seg {} != heads+fusion {heads}", three.total, seg.total)
    })?;
    let encoder = three.component(ENCODER);
    let savings = (seg.total + depth.total + motion.total) as i64 - three.total as i64;
    ensure(savings == 2 * encoder as i64, || {
        format!("savings {savings} != 2 x encoder {encoder}")
    })?;
    let reclaim = reclaim_per_task(0.30, 2);
    ensure(reclaim == 0.15, || format!("reclaim {reclaim}"))?;
    Ok(format!(
        "3-task {} = seg {} + {heads}; savings {savings} = 2 x {encoder}; reclaim(0.30, 2) = {reclaim}",
        three.total, seg.total
    ))
}

/// Scalar probe: every head projected onto a fixed random direction, summed.
fn probe_graph(untied: bool, spec: &ArchitectureSpec, batch: usize) -> (mtl_lab::Graph, mtl_lab::NodeId) {
    let mut b = GraphBuilder::new();
    let heads = if untied {
        assemble_untied(&mut b, spec, batch, Mode::Train)
    } else {
        assemble(&mut b, spec, batch, Mode::Train)
    }
    .expect("assemble");
    let mut total = None;
    for (name, id) in heads {
        let shape = b.shape(id).to_vec();
        let r = b.input(&format!("proj.{name}"), &shape).expect("proj");
        let m = b.mul(id, r).expect("mul");
        let s = b.sum(m);
        total = Some(match total {
            None => s,
            Some(t) => b.add(t, s).expect("add"),
        });
    }
    let total = total.expect("at least one head");
    b.output("probe", total);
    (b.finish(), total)
}

pub fn multi_stream_structure() -> Check {
    let scene = SceneSpec {
        image_size: 32,
        ..SceneSpec::default()
    };
    let single = setup(Variant::StlSeg, &scene, 4).architecture;
    let single_names: Vec<String> = model_graph(&single, 1, Mode::Train)
        .map_err(|e| e.to_string())?
        .graph
        .param_decls()
        .filter(|(n, _)| n.starts_with("encoder."))
        .map(|(n, _)| n.to_string())
        .collect();
    let mut worst: f64 = 0.0;
    for variant in [Variant::MsNet2, Variant::RnNet2, Variant::ThreeTaskSum] {
        let spec = setup(variant, &scene, 4).architecture;
        let tied = model_graph(&spec, 2, Mode::Train).map_err(|e| e.to_string())?;
        let names: Vec<String> = tied
            .graph
            .param_decls()
            .filter(|(n, _)| n.starts_with("encoder"))
            .map(|(n, _)| n.to_string())
            .collect();
        ensure(names == single_names, || {
            format!("{variant}: encoder parameter set differs from single-stream")
        })?;

        let model = Model::new(spec.clone(), 3).map_err(|e| e.to_string())?;
        let params: ParamStore<f64> = model.params().cast();
        let mut untied_params = params.clone();
        for (name, t) in params.iter().filter(|(n, _)| n.starts_with("encoder.")) {
            untied_params.insert(name.replacen(ENCODER, UNTIED_PREV_ENCODER, 1), t.clone());
        }
        let (tg, tl) = probe_graph(false, &spec, 2);
        let (ug, ul) = probe_graph(true, &spec, 2);
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let feed: Feed<f64> = tg
            .input_decls()
            .map(|(name, shape)| (name.to_string(), rand_tensor(&mut r, shape)))
            .collect();
        ensure(feed.contains_key(FRAME_PREV) && feed.contains_key(FRAME_CURR), || {
            format!("{variant}: not two-stream")
        })?;
        let gt = backward(&tg, &params, &feed, tl).map_err(|e| e.to_string())?;
        let gu = backward(&ug, &untied_params, &feed, ul).map_err(|e| e.to_string())?;
        let mut prev_mass = 0.0;
        for name in &single_names {
            let prev = name.replacen(ENCODER, UNTIED_PREV_ENCODER, 1);
            let a = gt.params.get(name).expect("tied grad").data();
            let c = gu.params.get(name).expect("curr grad").data();
            let p = gu.params.get(&prev).expect("prev grad").data();
            for i in 0..a.len() {
                worst = worst.max((a[i] - (c[i] + p[i])).abs());
            }
            prev_mass += p.iter().map(|v| v.abs()).sum::<f64>();
        }
        ensure(prev_mass > 0.0, || {
            format!("{variant}: previous stream contributes no encoder gradient")
        })?;
    }
    ensure(worst < 1e-8, || {
        format!("encoder gradient vs per-stream sum deviates by {worst:.2e}")
    })?;
    let concat = budget(Variant::MsNet2)?.total;
    let lstm = budget(Variant::RnNet2)?.total;
    ensure(lstm > concat, || format!("ConvLSTM {lstm} <= Concat {concat}"))?;
    Ok(format!(
        "one encoder set; grad split dev {worst:.2e}; ConvLSTM {lstm} > Concat {concat}"
    ))
}
