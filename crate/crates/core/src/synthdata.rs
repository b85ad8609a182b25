//! Procedural driving scenes: a ground plane with road and sidewalks, boxy
//! vehicles and elliptical pedestrians, rendered as two consecutive frames
//! with segmentation, box, depth and motion labels. Also dataset I/O.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io_util::{read_json, write_atomic, write_json};
use crate::losses::Task;
use crate::metrics::BBox;
use crate::tensor::{read_tns, write_tns, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const BACKGROUND: &str = "background";
pub const ROAD: &str = "road";
pub const SIDEWALK: &str = "sidewalk";

/// Objects must be at least this purity of their own class inside their box.
pub const MIN_BOX_PURITY: f64 = 0.6;
const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default = "default_size")]
    pub image_size: usize,
    #[serde(default = "default_seg_classes")]
    pub seg_classes: Vec<String>,
    #[serde(default = "default_det_classes")]
    pub det_classes: Vec<String>,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    #[serde(default = "default_moving")]
    pub moving_fraction: f64,
    /// Std-dev of the per-pixel noise shared by both frames.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_size() -> usize {
    64
}
fn default_seg_classes() -> Vec<String> {
    [BACKGROUND, ROAD, SIDEWALK, "vehicle", "person"]
        .map(String::from)
        .to_vec()
}
fn default_det_classes() -> Vec<String> {
    ["vehicle", "person"].map(String::from).to_vec()
}
fn default_max_objects() -> usize {
    5
}
fn default_moving() -> f64 {
    0.5
}
fn default_noise() -> f64 {
    0.02
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: default_size(),
            seg_classes: default_seg_classes(),
            det_classes: default_det_classes(),
            max_objects: default_max_objects(),
            moving_fraction: default_moving(),
            noise: default_noise(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::spec(
                "image_size",
                format!("{} is not a positive multiple of 32", self.image_size),
            ));
        }
        for required in [BACKGROUND, ROAD, SIDEWALK] {
            if !self.seg_classes.iter().any(|c| c == required) {
                return Err(Error::spec("seg_classes", format!("missing `{required}`")));
            }
        }
        if self.seg_classes.len() > 255 {
            return Err(Error::spec("seg_classes", "at most 255 classes"));
        }
        let unique: BTreeSet<&String> = self.seg_classes.iter().collect();
        if unique.len() != self.seg_classes.len() {
            return Err(Error::spec("seg_classes", "duplicate class name"));
        }
        for c in &self.det_classes {
            if !self.seg_classes.contains(c) || [BACKGROUND, ROAD, SIDEWALK].contains(&c.as_str()) {
                return Err(Error::spec(
                    "det_classes",
                    format!("`{c}` is not an object class of seg_classes"),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.moving_fraction) {
            return Err(Error::spec("moving_fraction", "must lie in [0, 1]"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::spec("noise", "must be a finite non-negative number"));
        }
        Ok(())
    }

    pub fn seg_id(&self, name: &str) -> Option<u8> {
        self.seg_classes.iter().position(|c| c == name).map(|i| i as u8)
    }

    /// Segmentation id of each detection class.
    pub fn det_seg_ids(&self) -> Vec<u8> {
        self.det_classes
            .iter()
            .map(|c| self.seg_id(c).expect("validated"))
            .collect()
    }

    /// Ground-plane depth at `row`: 1 at the horizon, falling off like 1/distance below it.
    pub fn ground_depth(&self, row: usize, horizon: usize) -> f32 {
        if row < horizon {
            return 1.0;
        }
        let c = self.image_size as f64 / 4.0;
        (c / ((row - horizon) as f64 + c)) as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    /// `[3, H, W]` in `[0, 1]`.
    pub frame_prev: Tensor<f32>,
    pub frame_curr: Tensor<f32>,
    /// Row-major class ids of the current frame.
    pub seg: Vec<u8>,
    /// Detection-class boxes in the current frame.
    pub boxes: Vec<BBox>,
    /// `[H, W]` normalized depth.
    pub depth: Tensor<f32>,
    /// Row-major 0/1, set on pixels of objects that moved.
    pub motion: Vec<u8>,
    pub horizon: usize,
    pub tasks: BTreeSet<Task>,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.depth.shape()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone)]
struct Object {
    det_class: usize,
    shape: Shape,
    /// Current-frame box, pixel units, exclusive upper bounds.
    x0: i64,
    y0: i64,
    w: i64,
    h: i64,
    dx: i64,
    color: [f32; 3],
}

impl Object {
    fn covers(&self, px: i64, py: i64, shift: i64) -> bool {
        let x0 = self.x0 - shift;
        if px < x0 || px >= x0 + self.w || py < self.y0 || py >= self.y0 + self.h {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let (a, b) = (self.w as f64 / 2.0, self.h as f64 / 2.0);
                let u = (px - x0) as f64 + 0.5 - a;
                let v = (py - self.y0) as f64 + 0.5 - b;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
        }
    }

    /// Horizontal extent covering both frames.
    fn span(&self) -> (i64, i64) {
        let a = self.x0.min(self.x0 - self.dx);
        let b = (self.x0 + self.w).max(self.x0 - self.dx + self.w);
        (a, b)
    }

    fn overlaps(&self, other: &Object) -> bool {
        let (a0, a1) = self.span();
        let (b0, b1) = other.span();
        a0 < b1 + 1 && b0 < a1 + 1 && self.y0 < other.y0 + other.h + 1 && other.y0 < self.y0 + self.h + 1
    }
}

struct Layout {
    horizon: usize,
    vanish_x: f64,
    bottom_x: f64,
    road_top: f64,
    road_bottom: f64,
    walk_top: f64,
    walk_bottom: f64,
}

impl Layout {
    fn t(&self, row: usize, size: usize) -> f64 {
        (row as f64 - self.horizon as f64) / (size as f64 - 1.0 - self.horizon as f64)
    }
    fn center(&self, t: f64) -> f64 {
        self.vanish_x + (self.bottom_x - self.vanish_x) * t
    }
    fn road_half(&self, t: f64) -> f64 {
        self.road_top + (self.road_bottom - self.road_top) * t
    }
    fn walk(&self, t: f64) -> f64 {
        self.walk_top + (self.walk_bottom - self.walk_top) * t
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    base.map(|v| (v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

const SKY: [f32; 3] = [0.55, 0.70, 0.90];
const TERRAIN: [f32; 3] = [0.30, 0.50, 0.25];
const ROAD_RGB: [f32; 3] = [0.30, 0.30, 0.32];
const WALK_RGB: [f32; 3] = [0.72, 0.66, 0.55];
const RECT_PALETTE: [[f32; 3]; 3] = [[0.85, 0.15, 0.10], [0.15, 0.25, 0.85], [0.95, 0.80, 0.10]];
const ELLIPSE_PALETTE: [[f32; 3]; 3] = [[0.60, 0.20, 0.65], [0.95, 0.55, 0.75], [0.95, 0.95, 0.95]];

fn shape_of(name: &str) -> Shape {
    match name {
        "person" | "pedestrian" | "cyclist" => Shape::Ellipse,
        _ => Shape::Rect,
    }
}

/// Renders sample `index` of the scene family. Deterministic in `(spec.seed, index)`.
pub fn generate_sample(spec: &SceneSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let size = spec.image_size;
    let s = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let horizon = (s * rng.gen_range(0.30..0.40)).round() as usize;
    let layout = Layout {
        horizon,
        vanish_x: s * (0.5 + rng.gen_range(-0.1..0.1)),
        bottom_x: s * (0.5 + rng.gen_range(-0.15..0.15)),
        road_top: s * 0.08,
        road_bottom: s * rng.gen_range(0.30..0.40),
        walk_top: s * 0.06,
        walk_bottom: s * rng.gen_range(0.26..0.34),
    };
    let sky = jitter(&mut rng, SKY, 0.05);
    let terrain = jitter(&mut rng, TERRAIN, 0.05);
    let road_rgb = jitter(&mut rng, ROAD_RGB, 0.04);
    let walk_rgb = jitter(&mut rng, WALK_RGB, 0.04);

    let background = spec.seg_id(BACKGROUND).expect("validated");
    let road = spec.seg_id(ROAD).expect("validated");
    let sidewalk = spec.seg_id(SIDEWALK).expect("validated");
    let n = size * size;
    let mut seg = vec![background; n];
    let mut base = vec![[0.0f32; 3]; n];
    for r in 0..size {
        for c in 0..size {
            let p = r * size + c;
            if r < horizon {
                let fade = 0.15 * (r as f32 / horizon.max(1) as f32);
                base[p] = sky.map(|v| (v + fade).min(1.0));
                continue;
            }
            let t = layout.t(r, size);
            let dist = (c as f64 + 0.5 - layout.center(t)).abs();
            let half = layout.road_half(t);
            if dist <= half {
                seg[p] = road;
                base[p] = road_rgb;
            } else if dist <= half + layout.walk(t) {
                seg[p] = sidewalk;
                base[p] = walk_rgb;
            } else {
                base[p] = terrain;
            }
        }
    }

    let mut objects: Vec<Object> = Vec::new();
    if !spec.det_classes.is_empty() {
        let count = rng.gen_range(0..=spec.max_objects);
        let unit = s / 32.0;
        let min_gap = (s * 0.3) as usize;
        for _ in 0..count {
            let det_class = rng.gen_range(0..spec.det_classes.len());
            let shape = shape_of(&spec.det_classes[det_class]);
            let palette = match shape {
                Shape::Rect => &RECT_PALETTE,
                Shape::Ellipse => &ELLIPSE_PALETTE,
            };
            let pick = palette[rng.gen_range(0..palette.len())];
            let color = jitter(&mut rng, pick, 0.05);
            let moving = rng.gen_bool(spec.moving_fraction);
            for _ in 0..PLACEMENT_ATTEMPTS {
                let lo = horizon + min_gap;
                if lo >= size {
                    break;
                }
                let base_row = rng.gen_range(lo..size);
                let reach = (base_row - horizon) as f64 + unit;
                let (w, h) = match shape {
                    Shape::Rect => {
                        let w = 0.8 * reach;
                        (w, 0.6 * w)
                    }
                    Shape::Ellipse => {
                        let h = 1.0 * reach;
                        ((0.55 * h).max(2.0 * unit), h)
                    }
                };
                let (w, h) = (w.round() as i64, h.round() as i64);
                let t = layout.t(base_row, size);
                let center = layout.center(t);
                let half = layout.road_half(t);
                let cx = match shape {
                    Shape::Rect => center + rng.gen_range(-0.6..0.6) * half,
                    Shape::Ellipse => {
                        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                        let walk = layout.walk(t);
                        center + side * (half + walk / 2.0 + rng.gen_range(-0.3..0.3) * walk)
                    }
                };
                let dx = if moving {
                    let d = rng.gen_range(2..=6) as i64;
                    if rng.gen_bool(0.5) {
                        d
                    } else {
                        -d
                    }
                } else {
                    0
                };
                let obj = Object {
                    det_class,
                    shape,
                    x0: (cx - w as f64 / 2.0).round() as i64,
                    y0: base_row as i64 + 1 - h,
                    w,
                    h,
                    dx,
                    color,
                };
                let (a, b) = obj.span();
                let inside = a >= 0 && b <= size as i64 && obj.y0 >= horizon as i64 / 2;
                if inside && !objects.iter().any(|o| o.overlaps(&obj)) {
                    objects.push(obj);
                    break;
                }
            }
        }
    }

    let det_ids = spec.det_seg_ids();
    let mut depth = vec![0.0f32; n];
    for r in 0..size {
        let d = spec.ground_depth(r, horizon);
        depth[r * size..(r + 1) * size].iter_mut().for_each(|v| *v = d);
    }
    let mut motion = vec![0u8; n];
    let mut curr = base.clone();
    let mut prev = base;
    let mut boxes = Vec::new();
    for o in &objects {
        let obj_depth = spec.ground_depth((o.y0 + o.h - 1) as usize, horizon);
        for py in o.y0..o.y0 + o.h {
            for px in o.span().0..o.span().1 {
                let p = py as usize * size + px as usize;
                if o.covers(px, py, 0) {
                    seg[p] = det_ids[o.det_class];
                    depth[p] = obj_depth;
                    curr[p] = o.color;
                    motion[p] = u8::from(o.dx != 0);
                }
                if o.covers(px, py, o.dx) {
                    prev[p] = o.color;
                }
            }
        }
        boxes.push(BBox::new(
            o.det_class,
            (o.x0 as f64 + o.w as f64 / 2.0) / s,
            (o.y0 as f64 + o.h as f64 / 2.0) / s,
            o.w as f64 / s,
            o.h as f64 / s,
        ));
    }

    let noise = Normal::new(0.0f64, spec.noise).expect("validated noise");
    let mut frame_curr = vec![0.0f32; 3 * n];
    let mut frame_prev = vec![0.0f32; 3 * n];
    for ch in 0..3 {
        for p in 0..n {
            let e = if spec.noise > 0.0 {
                noise.sample(&mut rng) as f32
            } else {
                0.0
            };
            frame_curr[ch * n + p] = (curr[p][ch] + e).clamp(0.0, 1.0);
            frame_prev[ch * n + p] = (prev[p][ch] + e).clamp(0.0, 1.0);
        }
    }

    Ok(Sample {
        index,
        frame_prev: Tensor::new(vec![3, size, size], frame_prev)?,
        frame_curr: Tensor::new(vec![3, size, size], frame_curr)?,
        seg,
        boxes,
        depth: Tensor::new(vec![size, size], depth)?,
        motion,
        horizon,
        tasks: Task::ALL.into_iter().collect(),
    })
}

/// Checks the label invariants every generated sample satisfies.
pub fn validate_sample(spec: &SceneSpec, sample: &Sample) -> Result<()> {
    let fail = |detail: String| Error::Invariant {
        sample: sample.index,
        detail,
    };
    let size = spec.image_size;
    let n = size * size;
    for (name, t) in [("frame_prev", &sample.frame_prev), ("frame_curr", &sample.frame_curr)] {
        if t.shape() != [3, size, size] {
            return Err(fail(format!("{name} has shape {:?}", t.shape())));
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(fail(format!("{name} leaves [0, 1]")));
        }
    }
    if sample.depth.shape() != [size, size] || sample.seg.len() != n || sample.motion.len() != n {
        return Err(fail("label maps do not match the image size".into()));
    }
    if let Some(&bad) = sample.seg.iter().find(|&&c| c as usize >= spec.seg_classes.len()) {
        return Err(fail(format!("segmentation id {bad} out of range")));
    }
    let det_ids = spec.det_seg_ids();
    for p in 0..n {
        if sample.motion[p] > 1 {
            return Err(fail(format!("motion value {} at pixel {p}", sample.motion[p])));
        }
        if sample.motion[p] == 1 && !det_ids.contains(&sample.seg[p]) {
            return Err(fail(format!("moving pixel {p} is not on an object")));
        }
    }
    let depth = sample.depth.data();
    let ground = |p: usize| !det_ids.contains(&sample.seg[p]);
    for r in sample.horizon..size.saturating_sub(1) {
        for c in 0..size {
            let (a, b) = (r * size + c, (r + 1) * size + c);
            if ground(a) && ground(b) && depth[b] >= depth[a] {
                return Err(fail(format!("ground depth not decreasing at row {r}, column {c}")));
            }
        }
    }
    for (i, b) in sample.boxes.iter().enumerate() {
        if b.class_id >= det_ids.len() {
            return Err(fail(format!("box {i} has class {}", b.class_id)));
        }
        let (x0, y0, x1, y1) = b.corners();
        if !(b.w > 0.0 && b.h > 0.0 && x0 >= -1e-9 && y0 >= -1e-9 && x1 <= 1.0 + 1e-9 && y1 <= 1.0 + 1e-9) {
            return Err(fail(format!("box {i} leaves the image")));
        }
        let px = |v: f64| (v * size as f64).round() as usize;
        let (c0, r0, c1, r1) = (px(x0), px(y0), px(x1).min(size), px(y1).min(size));
        let total = (c1 - c0) * (r1 - r0);
        let own = (r0..r1)
            .flat_map(|r| (c0..c1).map(move |c| r * size + c))
            .filter(|&p| sample.seg[p] == det_ids[b.class_id])
            .count();
        if total == 0 || (own as f64) < MIN_BOX_PURITY * total as f64 {
            return Err(fail(format!("box {i} interior is {own}/{total} of its class")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: SceneSpec,
    pub num_samples: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    #[serde(default)]
    pub label_drop: BTreeMap<Task, f64>,
    pub fingerprint: String,
}

impl Manifest {
    fn compute_fingerprint(&self) -> String {
        let body = serde_json::json!({
            "format_version": self.format_version,
            "spec": self.spec,
            "num_samples": self.num_samples,
            "train": self.train,
            "val": self.val,
            "label_drop": self.label_drop,
        });
        let digest = Sha256::digest(body.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check(&self, path: &Path) -> Result<()> {
        let fmt = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if self.format_version != FORMAT_VERSION {
            return Err(fmt(format!("unsupported format version {}", self.format_version)));
        }
        let mut seen = BTreeSet::new();
        for &i in self.train.iter().chain(&self.val) {
            if i >= self.num_samples || !seen.insert(i) {
                return Err(fmt(format!("split index {i} is out of range or repeated")));
            }
        }
        if seen.len() != self.num_samples {
            return Err(fmt(format!(
                "splits cover {} samples, manifest declares {}",
                seen.len(),
                self.num_samples
            )));
        }
        if self.fingerprint != self.compute_fingerprint() {
            return Err(fmt("fingerprint does not match contents".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Dataset {
    pub fn spec(&self) -> &SceneSpec {
        &self.manifest.spec
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        let idx = match split {
            Split::Train => &self.manifest.train,
            Split::Val => &self.manifest.val,
        };
        idx.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn fingerprint(&self) -> &str {
        &self.manifest.fingerprint
    }

    /// Tasks labeled on at least one training sample.
    pub fn tasks(&self) -> BTreeSet<Task> {
        self.split(Split::Train)
            .iter()
            .flat_map(|s| s.tasks.iter().copied())
            .collect()
    }
}

/// Samples `0..n_train` form the training split, the rest validation. Each
/// task in `label_drop` loses its labels on exactly `round(rate * n_train)`
/// training samples.
pub fn generate(spec: &SceneSpec, n_train: usize, n_val: usize, label_drop: &BTreeMap<Task, f64>) -> Result<Dataset> {
    spec.validate()?;
    for (task, &rate) in label_drop {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::spec(format!("label_drop.{task}"), "rate must lie in [0, 1]"));
        }
    }
    let total = n_train + n_val;
    let mut samples = (0..total)
        .map(|i| generate_sample(spec, i))
        .collect::<Result<Vec<_>>>()?;
    for (k, (&task, &rate)) in label_drop.iter().enumerate() {
        let count = (rate * n_train as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(u64::MAX - k as u64);
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng);
        for &i in &order[..count] {
            samples[i].tasks.remove(&task);
            if task == Task::Detection {
                samples[i].boxes.clear();
            }
        }
    }
    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        num_samples: total,
        train: (0..n_train).collect(),
        val: (n_train..total).collect(),
        label_drop: label_drop.clone(),
        fingerprint: String::new(),
    };
    manifest.fingerprint = manifest.compute_fingerprint();
    Ok(Dataset { manifest, samples })
}

#[derive(Debug, Serialize, Deserialize)]
struct Labels {
    index: usize,
    horizon: usize,
    tasks: BTreeSet<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<BBox>>,
}

fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join("samples").join(format!("{index:06}"))
}

fn mask_tensor(mask: &[u8], size: usize) -> Tensor<f32> {
    Tensor::new(vec![size, size], mask.iter().map(|&v| v as f32).collect()).expect("square mask")
}

pub fn write_dataset(dataset: &Dataset, dir: &Path, ppm: bool) -> Result<()> {
    let size = dataset.spec().image_size;
    for s in &dataset.samples {
        let d = sample_dir(dir, s.index);
        write_tns(&d.join("frame_prev.tns"), &s.frame_prev)?;
        write_tns(&d.join("frame_curr.tns"), &s.frame_curr)?;
        write_tns(&d.join("seg.tns"), &mask_tensor(&s.seg, size))?;
        write_tns(&d.join("depth.tns"), &s.depth)?;
        write_tns(&d.join("motion.tns"), &mask_tensor(&s.motion, size))?;
        let labels = Labels {
            index: s.index,
            horizon: s.horizon,
            tasks: s.tasks.clone(),
            boxes: s.tasks.contains(&Task::Detection).then(|| s.boxes.clone()),
        };
        write_json(&d.join("labels.json"), &labels)?;
        if ppm {
            write_atomic(&d.join("panel.ppm"), &render_sample(dataset.spec(), s))?;
        }
    }
    write_json(&dir.join("manifest.json"), &dataset.manifest)
}

pub fn generate_dataset(
    spec: &SceneSpec,
    n_train: usize,
    n_val: usize,
    label_drop: &BTreeMap<Task, f64>,
    out_dir: &Path,
    ppm: bool,
) -> Result<Manifest> {
    let dataset = generate(spec, n_train, n_val, label_drop)?;
    write_dataset(&dataset, out_dir, ppm)?;
    Ok(dataset.manifest)
}

fn read_mask(path: &Path, size: usize, max: usize) -> Result<Vec<u8>> {
    let t = read_tns(path)?;
    if t.shape() != [size, size] {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("shape {:?}, expected [{size}, {size}]", t.shape()),
        });
    }
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < max {
                Ok(v as u8)
            } else {
                Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("value {v} is not a valid label"),
                })
            }
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = read_json(&manifest_path)?;
    manifest.check(&manifest_path)?;
    let spec = &manifest.spec;
    spec.validate()?;
    let size = spec.image_size;
    let on_disk = match std::fs::read_dir(dir.join("samples")) {
        Ok(entries) => entries.filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).count(),
        Err(e) => return Err(Error::io(dir.join("samples"), e)),
    };
    if on_disk != manifest.num_samples {
        return Err(Error::Format {
            path: manifest_path,
            detail: format!("manifest lists {} samples, found {on_disk}", manifest.num_samples),
        });
    }
    let mut samples = Vec::with_capacity(manifest.num_samples);
    for index in 0..manifest.num_samples {
        let d = sample_dir(dir, index);
        let labels_path = d.join("labels.json");
        let labels: Labels = read_json(&labels_path)?;
        if labels.index != index {
            return Err(Error::Format {
                path: labels_path,
                detail: format!("index {} in sample directory {index}", labels.index),
            });
        }
        let sample = Sample {
            index,
            frame_prev: read_tns(&d.join("frame_prev.tns"))?,
            frame_curr: read_tns(&d.join("frame_curr.tns"))?,
            seg: read_mask(&d.join("seg.tns"), size, spec.seg_classes.len())?,
            boxes: labels.boxes.unwrap_or_default(),
            depth: read_tns(&d.join("depth.tns"))?,
            motion: read_mask(&d.join("motion.tns"), size, 2)?,
            horizon: labels.horizon,
            tasks: labels.tasks,
        };
        validate_sample(spec, &sample)?;
        samples.push(sample);
    }
    Ok(Dataset { manifest, samples })
}

/// Binary PPM (P6) of a `[3, H, W]` image in `[0, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..plane {
        for ch in 0..3 {
            out.push((d[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Fixed display color per class id.
pub fn class_color(id: u8) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 8] = [
        [0.0, 0.0, 0.0],
        [0.5, 0.25, 0.5],
        [0.96, 0.14, 0.9],
        [0.0, 0.0, 0.56],
        [0.86, 0.08, 0.24],
        [0.42, 0.56, 0.14],
        [0.27, 0.51, 0.71],
        [0.98, 0.67, 0.12],
    ];
    PALETTE[id as usize % PALETTE.len()]
}

pub fn colorize_mask(mask: &[u8], size: usize) -> Tensor<f32> {
    let n = size * size;
    let mut data = vec![0.0f32; 3 * n];
    for (p, &id) in mask.iter().enumerate() {
        let c = class_color(id);
        for ch in 0..3 {
            data[ch * n + p] = c[ch];
        }
    }
    Tensor::new(vec![3, size, size], data).expect("square mask")
}

pub fn gray_to_rgb(map: &[f32], size: usize) -> Tensor<f32> {
    let data = [map, map, map].concat();
    Tensor::new(vec![3, size, size], data).expect("square map")
}

/// Places `[3, H, W_i]` images side by side.
pub fn hstack(images: &[Tensor<f32>]) -> Tensor<f32> {
    let h = images[0].shape()[1];
    let total_w: usize = images.iter().map(|t| t.shape()[2]).sum();
    let mut data = vec![0.0f32; 3 * h * total_w];
    let mut x = 0;
    for img in images {
        let w = img.shape()[2];
        for ch in 0..3 {
            for r in 0..h {
                let src = &img.data()[(ch * h + r) * w..(ch * h + r + 1) * w];
                let dst = (ch * h + r) * total_w + x;
                data[dst..dst + w].copy_from_slice(src);
            }
        }
        x += w;
    }
    Tensor::new(vec![3, h, total_w], data).expect("consistent heights")
}

/// Frame, segmentation, depth and motion panels as one PPM.
pub fn render_sample(spec: &SceneSpec, s: &Sample) -> Vec<u8> {
    let size = spec.image_size;
    let motion: Vec<f32> = s.motion.iter().map(|&v| v as f32).collect();
    encode_ppm(&hstack(&[
        s.frame_curr.clone(),
        colorize_mask(&s.seg, size),
        gray_to_rgb(s.depth.data(), size),
        gray_to_rgb(&motion, size),
    ]))
}
