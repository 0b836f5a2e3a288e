//! Toy one-stage grid detector: three stride-2 convolutions with ReLU and a
//! per-cell head (objectness, class scores, box). Also the summed target
//! confidence used as the attack loss.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::image::{load_image, save_image, ImageBuffer};
use crate::optim::Adam;

pub const DEFAULT_LABELS: [&str; 3] = ["car", "cone", "other"];
/// Total downsampling of the backbone; one grid cell covers this many pixels.
pub const STRIDE: usize = 8;
const KERNEL: usize = 3;
const BOX: usize = 4;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One candidate box with `[x_min, y_min, x_max, y_max]` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub class_scores: Vec<f64>,
    pub objectness: f64,
}

impl Detection {
    /// Objectness times the class score.
    pub fn score(&self, class: usize) -> f64 {
        self.objectness * self.class_scores[class]
    }

    /// Best class index and its score.
    pub fn best(&self) -> (usize, f64) {
        let mut best = (0, self.score(0));
        for j in 1..self.class_scores.len() {
            let s = self.score(j);
            if s > best.1 {
                best = (j, s);
            }
        }
        best
    }

    pub fn area(&self) -> f64 {
        (self.bbox[2] - self.bbox[0]).max(0.0) * (self.bbox[3] - self.bbox[1]).max(0.0)
    }

    fn intersection(&self, other: &Detection) -> f64 {
        let (a, b) = (self.bbox, other.bbox);
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &Detection) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Share of the smaller box covered by the other one.
    pub fn containment(&self, other: &Detection) -> f64 {
        let small = self.area().min(other.area());
        if small > 0.0 {
            self.intersection(other) / small
        } else {
            0.0
        }
    }
}

/// Decision rule for "the detector saw the target".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorThreshold {
    pub threshold: f64,
    pub target_class: String,
}

impl Default for DetectorThreshold {
    fn default() -> Self {
        Self {
            threshold: 0.6,
            target_class: "car".into(),
        }
    }
}

impl DetectorThreshold {
    pub fn new(threshold: f64, target_class: impl Into<String>) -> Result<Self> {
        let t = Self {
            threshold,
            target_class: target_class.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "detection threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Reporting options for [`detect_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectOptions {
    pub iou_threshold: f64,
    /// A box mostly inside a stronger box of the same class is dropped too.
    pub containment_threshold: f64,
    /// Boxes whose best score is below this are not reported.
    pub min_score: f64,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            iou_threshold: 0.3,
            containment_threshold: 0.8,
            min_score: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    channels: [usize; 3],
    labels: Vec<String>,
    seed: u64,
    params: Vec<f64>,
}

impl ToyDetector {
    /// All parameters zero: every sigmoid output is exactly one half.
    pub fn zeros(channels: [usize; 3], labels: &[&str]) -> Self {
        let mut det = Self {
            channels,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            seed: 0,
            params: Vec::new(),
        };
        det.params = vec![0.0; det.param_count()];
        det
    }

    /// Uniform fan-in initialization; objectness starts low.
    pub fn random(channels: [usize; 3], labels: &[&str], seed: u64) -> Self {
        let mut det = Self::zeros(channels, labels);
        det.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = det.layout();
        for (k, &(off, len, fan_in)) in layout.iter().enumerate() {
            if k % 2 == 0 {
                let mut limit = (6.0 / fan_in as f64).sqrt();
                if k == 6 {
                    limit *= 0.1;
                }
                for v in &mut det.params[off..off + len] {
                    *v = rng.random_range(-limit..limit);
                }
            }
        }
        let (off, _, _) = layout[7];
        det.params[off] = -2.0;
        det
    }

    pub fn channels(&self) -> [usize; 3] {
        self.channels
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    /// Objectness, one score per class, four box terms.
    pub fn head_channels(&self) -> usize {
        1 + self.labels.len() + BOX
    }

    /// Overwrites one head bias (channel order: objectness, classes, box).
    pub fn set_head_bias(&mut self, channel: usize, value: f64) {
        let (off, _, _) = self.layout()[7];
        self.params[off + channel] = value;
    }

    fn layout(&self) -> [(usize, usize, usize); 8] {
        let [c1, c2, c3] = self.channels;
        let kk = KERNEL * KERNEL;
        let dims = [
            (c1 * kk * 3, 3 * kk),
            (c1, 0),
            (c2 * kk * c1, c1 * kk),
            (c2, 0),
            (c3 * kk * c2, c2 * kk),
            (c3, 0),
            (self.head_channels() * c3, c3),
            (self.head_channels(), 0),
        ];
        let mut out = [(0, 0, 0); 8];
        let mut off = 0;
        for (k, (len, fan)) in dims.into_iter().enumerate() {
            out[k] = (off, len, fan);
            off += len;
        }
        out
    }

    fn param_count(&self) -> usize {
        let (off, len, _) = self.layout()[7];
        off + len
    }

    fn slice(&self, k: usize) -> &[f64] {
        let (off, len, _) = self.layout()[k];
        &self.params[off..off + len]
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(STRIDE) || !w.is_multiple_of(STRIDE) {
            return Err(Error::Dimension(format!(
                "detector input {w}x{h} must be a positive multiple of {STRIDE}"
            )));
        }
        Ok(())
    }

    fn constant_params(&self, tape: &mut Tape) -> [Var; 8] {
        std::array::from_fn(|k| {
            let s = self.slice(k).to_vec();
            tape.constant(Shape::vector(s.len()), s)
        })
    }

    /// Head logits `n × G × G × head_channels` for an `n × H × W × 3` input.
    pub fn forward_tape_with(tape: &mut Tape, image: Var, p: &[Var; 8]) -> Var {
        let mut x = image;
        for stage in 0..3 {
            x = tape.conv2d(x, p[2 * stage], p[2 * stage + 1], KERNEL, 2, 1);
            x = tape.relu(x);
        }
        tape.affine(x, p[6], p[7])
    }

    /// Head logits with the weights held constant.
    pub fn record_head(&self, tape: &mut Tape, image: Var) -> Var {
        let p = self.constant_params(tape);
        Self::forward_tape_with(tape, image, &p)
    }

    /// Sum over every grid cell of objectness × class score for `class`.
    pub fn record_loss(&self, tape: &mut Tape, image: Var, class: usize) -> Var {
        let head = self.record_head(tape, image);
        Self::loss_from_head(tape, head, class)
    }

    fn loss_from_head(tape: &mut Tape, head: Var, class: usize) -> Var {
        let obj = tape.slice_channels(head, 0, 1);
        let cls = tape.slice_channels(head, 1 + class, 1);
        let obj = tape.sigmoid(obj);
        let cls = tape.sigmoid(cls);
        let prod = tape.mul(obj, cls);
        tape.sum(prod)
    }

    /// Every grid cell decoded to a box, before suppression.
    pub fn raw_detections(&self, img: &ImageBuffer) -> Result<Vec<Detection>> {
        let (h, w) = img.dims();
        self.check_dims(h, w)?;
        let mut tape = Tape::new();
        let x = tape.constant(Shape::image(h, w, 3), img.data().to_vec());
        let head = self.record_head(&mut tape, x);
        let shape = tape.shape(head);
        let nc = self.labels.len();
        let hc = self.head_channels();
        let values = tape.value(head);
        let mut out = Vec::with_capacity(shape.h * shape.w);
        for gy in 0..shape.h {
            for gx in 0..shape.w {
                let cell = &values[(gy * shape.w + gx) * hc..][..hc];
                let t = &cell[1 + nc..];
                let cx = (gx as f64 + sigmoid(t[0])) * STRIDE as f64;
                let cy = (gy as f64 + sigmoid(t[1])) * STRIDE as f64;
                let bw = sigmoid(t[2]) * w as f64;
                let bh = sigmoid(t[3]) * h as f64;
                out.push(Detection {
                    bbox: [cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0],
                    class_scores: cell[1..1 + nc].iter().map(|&z| sigmoid(z)).collect(),
                    objectness: sigmoid(cell[0]),
                });
            }
        }
        Ok(out)
    }
}

/// Reported detections: raw boxes labeled by their best class, then greedy
/// per-class suppression at IoU 0.5.
pub fn detect(det: &ToyDetector, img: &ImageBuffer) -> Result<Vec<Detection>> {
    detect_with(det, img, &DetectOptions::default())
}

pub fn detect_with(det: &ToyDetector, img: &ImageBuffer, opts: &DetectOptions) -> Result<Vec<Detection>> {
    let raw = det.raw_detections(img)?;
    Ok(non_max_suppression(raw, opts))
}

pub fn non_max_suppression(raw: Vec<Detection>, opts: &DetectOptions) -> Vec<Detection> {
    let mut order: Vec<(usize, usize, f64)> = raw
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let (label, score) = d.best();
            (i, label, score)
        })
        .filter(|&(_, _, s)| s >= opts.min_score)
        .collect();
    order.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for (i, label, _) in order {
        let clash = kept
            .iter()
            .any(|&(k, l)| {
                l == label
                    && (raw[k].iou(&raw[i]) > opts.iou_threshold || raw[k].containment(&raw[i]) > opts.containment_threshold)
            });
        if !clash {
            kept.push((i, label));
        }
    }
    kept.into_iter().map(|(i, _)| raw[i].clone()).collect()
}

/// Whether any reported detection of `class` reaches the threshold.
pub fn target_detected(detections: &[Detection], class: usize, threshold: f64) -> bool {
    detections.iter().any(|d| d.best().0 == class && d.score(class) >= threshold)
}

/// The summed target confidence on a tape, ready for backpropagation to the
/// image.
#[derive(Debug)]
pub struct LossTrace {
    pub tape: Tape,
    pub image: Var,
    pub loss: Var,
}

impl LossTrace {
    pub fn value(&self) -> f64 {
        self.tape.scalar(self.loss)
    }
}

pub fn detection_loss(det: &ToyDetector, img: &ImageBuffer, target_class: &str) -> Result<LossTrace> {
    let class = det.label_index(target_class)?;
    let (h, w) = img.dims();
    det.check_dims(h, w)?;
    let mut tape = Tape::new();
    let image = tape.input(Shape::image(h, w, 3), img.data().to_vec());
    let loss = det.record_loss(&mut tape, image, class);
    Ok(LossTrace { tape, image, loss })
}

/// A labeled object: class name and `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub label: String,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub image: ImageBuffer,
    pub objects: Vec<Annotation>,
}

pub fn parse_annotations(text: &str, origin: &Path) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::parse(origin, i + 1, "expected `class x_min y_min x_max y_max`"));
        }
        let mut bbox = [0.0; 4];
        for (b, f) in bbox.iter_mut().zip(&fields[1..]) {
            *b = f
                .parse()
                .map_err(|_| Error::parse(origin, i + 1, format!("bad number `{f}`")))?;
        }
        if !(bbox[0] < bbox[2] && bbox[1] < bbox[3]) {
            return Err(Error::parse(origin, i + 1, "box corners out of order"));
        }
        out.push(Annotation {
            label: fields[0].to_string(),
            bbox,
        });
    }
    Ok(out)
}

pub fn annotations_to_text(objects: &[Annotation]) -> String {
    let mut out = String::new();
    for a in objects {
        let [x0, y0, x1, y1] = a.bbox;
        writeln!(out, "{} {x0} {y0} {x1} {y1}", a.label).unwrap();
    }
    out
}

/// Writes `<stem>.ppm` and `<stem>.txt` into `dir`.
pub fn save_labeled_scene(scene: &LabeledScene, dir: &Path, stem: &str) -> Result<()> {
    save_image(&scene.image, dir.join(format!("{stem}.ppm")))?;
    let path = dir.join(format!("{stem}.txt"));
    fs::write(&path, annotations_to_text(&scene.objects)).map_err(|e| Error::io(&path, e))
}

/// Loads every `*.ppm` in `dir` (sorted by name) with its `.txt` sidecar; a
/// missing sidecar means the scene holds no objects.
pub fn load_labeled_dir(dir: &Path) -> Result<Vec<LabeledScene>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut images: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            images.push(path);
        }
    }
    images.sort();
    let mut out = Vec::with_capacity(images.len());
    for path in images {
        let image = load_image(&path)?;
        let side = path.with_extension("txt");
        let objects = match fs::read_to_string(&side) {
            Ok(text) => parse_annotations(&text, &side)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&side, e)),
        };
        out.push(LabeledScene { image, objects });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub channels: [usize; 3],
    /// Weight of the box regression term on positive cells.
    pub box_weight: f64,
    /// Show each scene left-right mirrored with probability one half.
    pub mirror: bool,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            step_size: 4e-3,
            batch_size: 16,
            seed: 7,
            channels: [16, 32, 32],
            box_weight: 5.0,
            mirror: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTrainReport {
    /// Mean per-scene training loss after the last epoch.
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

struct CellTargets {
    objectness: Arc<Vec<f64>>,
    classes: Arc<Vec<f64>>,
    class_weight: Arc<Vec<f64>>,
    boxes: Vec<f64>,
    box_weight: Arc<Vec<f64>>,
}

fn cell_targets(det: &ToyDetector, scene: &LabeledScene, box_weight: f64) -> Result<CellTargets> {
    let (h, w) = scene.image.dims();
    let (gh, gw) = (h / STRIDE, w / STRIDE);
    let nc = det.labels.len();
    let mut objectness = vec![0.0; gh * gw];
    let mut classes = vec![0.0; gh * gw * nc];
    let mut class_weight = vec![0.0; gh * gw * nc];
    let mut boxes = vec![0.0; gh * gw * BOX];
    let mut bw = vec![0.0; gh * gw * BOX];
    for a in &scene.objects {
        let class = det.label_index(&a.label)?;
        let cx = (a.bbox[0] + a.bbox[2]) / 2.0;
        let cy = (a.bbox[1] + a.bbox[3]) / 2.0;
        let (bw_px, bh_px) = (a.bbox[2] - a.bbox[0], a.bbox[3] - a.bbox[1]);
        let gx = ((cx / STRIDE as f64).floor().max(0.0) as usize).min(gw - 1);
        let gy = ((cy / STRIDE as f64).floor().max(0.0) as usize).min(gh - 1);
        // the centre cell plus any cell whose centre sits in the middle half
        // of the box; a miss by one cell should not lose the object
        let near = |g: usize, c: f64, extent: f64| ((g as f64 + 0.5) * STRIDE as f64 - c).abs() <= extent / 4.0;
        for cy_cell in 0..gh {
            for cx_cell in 0..gw {
                let centre = cx_cell == gx && cy_cell == gy;
                if !centre && !(near(cx_cell, cx, bw_px) && near(cy_cell, cy, bh_px)) {
                    continue;
                }
                let cell = cy_cell * gw + cx_cell;
                objectness[cell] = 1.0;
                for j in 0..nc {
                    class_weight[cell * nc + j] = 1.0;
                    classes[cell * nc + j] = 0.0;
                }
                classes[cell * nc + class] = 1.0;
                let t = [
                    (cx / STRIDE as f64 - cx_cell as f64).clamp(0.0, 1.0),
                    (cy / STRIDE as f64 - cy_cell as f64).clamp(0.0, 1.0),
                    (bw_px / w as f64).clamp(0.0, 1.0),
                    (bh_px / h as f64).clamp(0.0, 1.0),
                ];
                boxes[cell * BOX..(cell + 1) * BOX].copy_from_slice(&t);
                bw[cell * BOX..(cell + 1) * BOX].fill(box_weight);
            }
        }
    }
    Ok(CellTargets {
        objectness: Arc::new(objectness),
        classes: Arc::new(classes),
        class_weight: Arc::new(class_weight),
        boxes,
        box_weight: Arc::new(bw),
    })
}

/// Per-scene training loss on the tape: objectness cross-entropy over all
/// cells, class cross-entropy and squared box error on positive cells.
fn record_training_loss(det: &ToyDetector, tape: &mut Tape, image: Var, p: &[Var; 8], t: &CellTargets) -> Var {
    let head = ToyDetector::forward_tape_with(tape, image, p);
    let nc = det.labels.len();
    let obj = tape.slice_channels(head, 0, 1);
    let cls = tape.slice_channels(head, 1, nc);
    let bx = tape.slice_channels(head, 1 + nc, BOX);
    let ones = Arc::new(vec![1.0; t.objectness.len()]);
    let l_obj = tape.bce_with_logits(obj, Arc::clone(&t.objectness), ones);
    let l_cls = tape.bce_with_logits(cls, Arc::clone(&t.classes), Arc::clone(&t.class_weight));
    let s = tape.sigmoid(bx);
    let neg: Vec<f64> = t.boxes.iter().map(|v| -v).collect();
    let d = tape.add_const(s, &neg);
    let d2 = tape.mul(d, d);
    let d2 = tape.mul_const(d2, Arc::clone(&t.box_weight));
    let l_box = tape.sum(d2);
    let l = tape.add(l_obj, l_cls);
    tape.add(l, l_box)
}

fn scene_loss_and_grad(det: &ToyDetector, scene: &LabeledScene, t: &CellTargets) -> Result<(f64, Vec<f64>)> {
    let (h, w) = scene.image.dims();
    let mut tape = Tape::new();
    let image = tape.constant(Shape::image(h, w, 3), scene.image.data().to_vec());
    let p: [Var; 8] = std::array::from_fn(|k| {
        let s = det.slice(k).to_vec();
        tape.input(Shape::vector(s.len()), s)
    });
    let loss = record_training_loss(det, &mut tape, image, &p, t);
    let value = tape.scalar(loss);
    let grad = tape.backward(loss)?;
    let mut flat = Vec::with_capacity(det.params.len());
    for v in p {
        flat.extend(grad.wrt(v));
    }
    Ok((value, flat))
}

fn mean_loss(det: &ToyDetector, scenes: &[LabeledScene], targets: &[CellTargets]) -> Result<f64> {
    let losses = scenes
        .par_iter()
        .zip(targets)
        .map(|(s, t)| {
            let mut tape = Tape::new();
            let (h, w) = s.image.dims();
            let image = tape.constant(Shape::image(h, w, 3), s.image.data().to_vec());
            let p = det.constant_params(&mut tape);
            let l = record_training_loss(det, &mut tape, image, &p, t);
            tape.scalar(l)
        })
        .collect::<Vec<_>>();
    Ok(losses.iter().sum::<f64>() / scenes.len() as f64)
}

/// The scene flipped left to right, boxes included.
pub fn mirror_scene(scene: &LabeledScene) -> LabeledScene {
    let (h, w) = scene.image.dims();
    let image = ImageBuffer::from_fn(h, w, |x, y| scene.image.pixel(w - 1 - x, y));
    let objects = scene
        .objects
        .iter()
        .map(|a| Annotation {
            label: a.label.clone(),
            bbox: [w as f64 - a.bbox[2], a.bbox[1], w as f64 - a.bbox[0], a.bbox[3]],
        })
        .collect();
    LabeledScene { image, objects }
}

/// Trains a fresh detector with mini-batch Adam and a cosine-decayed step.
/// Batch gradients are reduced in scene order, so results do not depend on
/// the thread count.
pub fn train_toy_detector(
    scenes: &[LabeledScene],
    cfg: &DetectorTrainConfig,
) -> Result<(ToyDetector, DetectorTrainReport)> {
    let mut det = ToyDetector::random(cfg.channels, &DEFAULT_LABELS, cfg.seed);
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let car = det.label_index("car")?;
    let has_car = |s: &LabeledScene| s.objects.iter().any(|a| a.label == DEFAULT_LABELS[car]);
    if !scenes.iter().any(has_car) || scenes.iter().all(has_car) {
        return Err(Error::InvalidConfig(
            "detector training needs scenes with and without a car".into(),
        ));
    }
    for s in scenes {
        det.check_dims(s.image.height(), s.image.width())?;
    }
    if cfg.batch_size == 0 || !(cfg.step_size > 0.0) {
        return Err(Error::InvalidConfig("batch size and step size must be positive".into()));
    }
    let targets = scenes
        .iter()
        .map(|s| cell_targets(&det, s, cfg.box_weight))
        .collect::<Result<Vec<_>>>()?;
    let mirrored: Vec<LabeledScene> = if cfg.mirror {
        scenes.iter().map(mirror_scene).collect()
    } else {
        Vec::new()
    };
    let mirrored_targets = mirrored
        .iter()
        .map(|s| cell_targets(&det, s, cfg.box_weight))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Adam::new(det.params.len(), cfg.step_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xde7e_c70f);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let batches_per_epoch = scenes.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch).max(1);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let picks: Vec<(usize, bool)> = batch.iter().map(|&i| (i, cfg.mirror && rng.random_bool(0.5))).collect();
            let results = picks
                .par_iter()
                .map(|&(i, flip)| {
                    if flip {
                        scene_loss_and_grad(&det, &mirrored[i], &mirrored_targets[i])
                    } else {
                        scene_loss_and_grad(&det, &scenes[i], &targets[i])
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0; det.params.len()];
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!("detector loss became {loss}")));
                }
                epoch_total += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b / batch.len() as f64;
                }
            }
            let progress = step as f64 / total_steps as f64;
            opt.step_size = cfg.step_size * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            opt.step(&mut det.params, &grad);
            step += 1;
        }
        epoch_losses.push(epoch_total / scenes.len() as f64);
    }
    let final_loss = mean_loss(&det, scenes, &targets)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged(format!("detector loss became {final_loss}")));
    }
    Ok((
        det,
        DetectorTrainReport {
            final_loss,
            epoch_losses,
        },
    ))
}

const TENSOR_NAMES: [&str; 8] = [
    "conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "head.w", "head.b",
];

impl ToyDetector {
    pub fn to_text(&self) -> String {
        let [c1, c2, c3] = self.channels;
        let mut out = String::from("# projforge toy detector\n");
        writeln!(out, "arch 3 {c1} {c2} {c3} {}", self.head_channels()).unwrap();
        writeln!(out, "seed {}", self.seed).unwrap();
        writeln!(out, "labels {}", self.labels.join(" ")).unwrap();
        for (k, name) in TENSOR_NAMES.iter().enumerate() {
            let (_, len, fan) = self.layout()[k];
            let row = if fan == 0 { len } else { fan };
            for chunk in self.slice(k).chunks(row) {
                let vals: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{name} {}", vals.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut arch: Option<[usize; 3]> = None;
        let mut head = None;
        let mut seed = 0;
        let mut labels: Option<Vec<String>> = None;
        let mut tensors: Vec<Vec<f64>> = vec![Vec::new(); 8];
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let key = fields.next().unwrap();
            let rest: Vec<&str> = fields.collect();
            let bad = |f: &str| Error::parse(origin, i + 1, format!("bad number `{f}`"));
            match key {
                "arch" => {
                    let dims = rest
                        .iter()
                        .map(|f| f.parse::<usize>().map_err(|_| bad(f)))
                        .collect::<Result<Vec<_>>>()?;
                    if dims.len() != 5 || dims[0] != 3 || dims[1..4].contains(&0) {
                        return Err(Error::parse(origin, i + 1, "expected `arch 3 c1 c2 c3 head`"));
                    }
                    arch = Some([dims[1], dims[2], dims[3]]);
                    head = Some(dims[4]);
                }
                "seed" => {
                    let f = rest.first().copied().unwrap_or("");
                    seed = f.parse().map_err(|_| bad(f))?;
                }
                "labels" => {
                    if rest.is_empty() {
                        return Err(Error::parse(origin, i + 1, "empty label list"));
                    }
                    labels = Some(rest.iter().map(|s| s.to_string()).collect());
                }
                name => {
                    let k = TENSOR_NAMES
                        .iter()
                        .position(|n| *n == name)
                        .ok_or_else(|| Error::parse(origin, i + 1, format!("unknown key `{name}`")))?;
                    for f in rest {
                        tensors[k].push(f.parse().map_err(|_| bad(f))?);
                    }
                }
            }
        }
        let line_end = text.lines().count();
        let arch = arch.ok_or_else(|| Error::parse(origin, line_end, "missing `arch` line"))?;
        let labels = labels.ok_or_else(|| Error::parse(origin, line_end, "missing `labels` line"))?;
        let label_refs: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
        let mut det = Self::zeros(arch, &label_refs);
        det.seed = seed;
        if head != Some(det.head_channels()) {
            return Err(Error::parse(origin, 1, "head width does not match the label list"));
        }
        let layout = det.layout();
        for (k, t) in tensors.iter().enumerate() {
            let (off, len, _) = layout[k];
            if t.len() != len {
                return Err(Error::parse(
                    origin,
                    line_end,
                    format!("{} has {} values, expected {len}", TENSOR_NAMES[k], t.len()),
                ));
            }
            det.params[off..off + len].copy_from_slice(t);
        }
        Ok(det)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}
