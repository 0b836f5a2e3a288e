//! Patch optimization: squashed latent grid, total variation and p-norm
//! penalties, summed detector confidence, and the sampled-transform loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Shape, SparseLinear, Tape, Var};
use crate::compositor::{ObjectTransform, ProjectionOperands, ProjectionPlan, ScenePlan, SceneSpec};
use crate::detector::ToyDetector;
use crate::error::{Error, Result};
use crate::image::{save_image, ImageBuffer};
use crate::optim::Adam;

/// Latent values are clipped to this magnitude before squashing so the
/// squashed value never rounds to exactly 0 or 1.
pub const LATENT_LIMIT: f64 = 15.0;

/// `tanh(v)/2 + 0.5` with `v` clipped to `±LATENT_LIMIT`.
pub fn squash(v: f64) -> f64 {
    v.clamp(-LATENT_LIMIT, LATENT_LIMIT).tanh() * 0.5 + 0.5
}

fn check_grid(cells: usize, height: usize, width: usize) -> Result<()> {
    if cells == 0 || height == 0 || width == 0 || !height.is_multiple_of(cells) || !width.is_multiple_of(cells) {
        return Err(Error::Dimension(format!(
            "patch size {width}x{height} is not divisible into {cells}x{cells} cells"
        )));
    }
    Ok(())
}

/// Maps an `n × n` cell grid onto an `height × width` image; each pixel
/// copies its cell.
pub fn upsample_operator(cells: usize, height: usize, width: usize) -> Result<SparseLinear> {
    check_grid(cells, height, width)?;
    let (bh, bw) = (height / cells, width / cells);
    let rows = (0..height)
        .flat_map(|y| (0..width).map(move |x| vec![((y / bh) * cells + x / bw, 1.0)]))
        .collect();
    Ok(SparseLinear::from_rows(cells * cells, rows))
}

/// Records the patch image for a latent node (`1 × n × n × 3`).
pub fn record_delta(tape: &mut Tape, latent: Var, upsample: Arc<SparseLinear>, height: usize, width: usize) -> Var {
    let v = tape.clamp(latent, -LATENT_LIMIT, LATENT_LIMIT);
    let v = tape.tanh(v);
    let v = tape.scale(v, 0.5);
    let v = tape.offset(v, 0.5);
    tape.sparse(v, upsample, height, width)
}

/// Squashes `latent` (`n·n·3` values, row-major cells) and upsamples it to
/// `size = (height, width)`.
pub fn latent_to_delta(latent: &[f64], cells: usize, size: (usize, usize)) -> Result<ImageBuffer> {
    let (h, w) = size;
    let up = Arc::new(upsample_operator(cells, h, w)?);
    if latent.len() != cells * cells * 3 {
        return Err(Error::Dimension(format!(
            "latent has {} values, expected {}",
            latent.len(),
            cells * cells * 3
        )));
    }
    let mut tape = Tape::new();
    let l = tape.constant(Shape::image(cells, cells, 3), latent.to_vec());
    let d = record_delta(&mut tape, l, up, h, w);
    ImageBuffer::new(h, w, tape.value(d).to_vec())
}

/// Horizontal and vertical neighbour differences, one row per pair.
pub fn difference_operator(height: usize, width: usize) -> SparseLinear {
    let mut rows = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if x + 1 < width {
                rows.push(vec![(i + 1, 1.0), (i, -1.0)]);
            }
            if y + 1 < height {
                rows.push(vec![(i + width, 1.0), (i, -1.0)]);
            }
        }
    }
    SparseLinear::from_rows(height * width, rows)
}

/// Records the summed absolute neighbour differences divided by the pixel
/// count.
pub fn record_total_variation(tape: &mut Tape, img: Var, diffs: Arc<SparseLinear>, pixels: usize) -> Var {
    let pairs = diffs.rows();
    if pairs == 0 {
        let zero = tape.scale(img, 0.0);
        let s = tape.sum(zero);
        return s;
    }
    let d = tape.sparse(img, diffs, 1, pairs);
    let a = tape.abs(d);
    let s = tape.sum(a);
    tape.scale(s, 1.0 / pixels as f64)
}

pub fn total_variation(img: &ImageBuffer) -> f64 {
    let (h, w) = img.dims();
    let mut tape = Tape::new();
    let x = tape.constant(Shape::image(h, w, 3), img.data().to_vec());
    let tv = record_total_variation(&mut tape, x, Arc::new(difference_operator(h, w)), h * w);
    tape.scalar(tv)
}

/// The optimization variable: an unconstrained latent per cell and channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchParams {
    latent: Vec<f64>,
    cells: usize,
    height: usize,
    width: usize,
}

impl PatchParams {
    pub fn new(latent: Vec<f64>, cells: usize, height: usize, width: usize) -> Result<Self> {
        check_grid(cells, height, width)?;
        if latent.len() != cells * cells * 3 {
            return Err(Error::Dimension(format!(
                "latent has {} values, expected {}",
                latent.len(),
                cells * cells * 3
            )));
        }
        if latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("latent values must be finite".into()));
        }
        Ok(Self {
            latent,
            cells,
            height,
            width,
        })
    }

    /// All-zero latent: a uniform 0.5 projection.
    pub fn mid_gray(cells: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(vec![0.0; cells * cells * 3], cells, height, width)
    }

    pub fn latent(&self) -> &[f64] {
        &self.latent
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn delta(&self) -> ImageBuffer {
        latent_to_delta(&self.latent, self.cells, self.size()).expect("validated patch")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# projforge patch latent\n");
        writeln!(out, "cells {}", self.cells).unwrap();
        writeln!(out, "size {} {}", self.height, self.width).unwrap();
        for cell in self.latent.chunks(3) {
            writeln!(out, "{} {} {}", cell[0], cell[1], cell[2]).unwrap();
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut cells = None;
        let mut size = None;
        let mut latent = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |f: &str| Error::parse(origin, i + 1, format!("bad number `{f}`"));
            match fields[0] {
                "cells" if fields.len() == 2 => cells = Some(fields[1].parse::<usize>().map_err(|_| bad(fields[1]))?),
                "size" if fields.len() == 3 => {
                    let h = fields[1].parse::<usize>().map_err(|_| bad(fields[1]))?;
                    let w = fields[2].parse::<usize>().map_err(|_| bad(fields[2]))?;
                    size = Some((h, w));
                }
                _ if fields.len() == 3 => {
                    for f in fields {
                        latent.push(f.parse::<f64>().map_err(|_| bad(f))?);
                    }
                }
                _ => return Err(Error::parse(origin, i + 1, "expected `cells n`, `size h w` or three latent values")),
            }
        }
        let end = text.lines().count();
        let cells = cells.ok_or_else(|| Error::parse(origin, end, "missing `cells` line"))?;
        let (h, w) = size.ok_or_else(|| Error::parse(origin, end, "missing `size` line"))?;
        Self::new(latent, cells, h, w)
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

/// Ranges for the per-sample object transform. Shift is a fraction of the
/// background size; rotation and brightness are symmetric bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformRanges {
    pub scale: [f64; 2],
    pub shift: f64,
    pub rotation_deg: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            scale: [0.8, 1.2],
            shift: 0.1,
            rotation_deg: 10.0,
            brightness: 0.1,
            noise_sigma: 0.02,
        }
    }
}

impl TransformRanges {
    pub const fn identity() -> Self {
        Self {
            scale: [1.0, 1.0],
            shift: 0.0,
            rotation_deg: 0.0,
            brightness: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale[0] > 0.0
            && self.scale[0] <= self.scale[1]
            && self.shift >= 0.0
            && self.rotation_deg >= 0.0
            && self.brightness >= 0.0
            && self.noise_sigma >= 0.0
            && [self.scale[1], self.shift, self.rotation_deg, self.brightness, self.noise_sigma]
                .iter()
                .all(|v| v.is_finite());
        if !ok {
            return Err(Error::InvalidConfig(format!("bad transform ranges {self:?}")));
        }
        Ok(())
    }

    /// Draws one transform. Always consumes the same number of values from
    /// `rng`, whatever the ranges.
    pub fn sample(&self, rng: &mut impl Rng, background: (usize, usize)) -> ObjectTransform {
        let [a, b, c, d, e]: [f64; 5] = std::array::from_fn(|_| rng.random());
        let noise_seed = rng.random::<u64>();
        let sym = |t: f64, r: f64| (2.0 * t - 1.0) * r;
        ObjectTransform {
            scale: self.scale[0] + a * (self.scale[1] - self.scale[0]),
            rotation_deg: sym(b, self.rotation_deg),
            shift: [sym(c, self.shift * background.1 as f64), sym(d, self.shift * background.0 as f64)],
            brightness: sym(e, self.brightness),
            noise_sigma: self.noise_sigma,
            noise_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EotSettings {
    pub samples_per_step: usize,
    pub transforms: TransformRanges,
}

impl Default for EotSettings {
    fn default() -> Self {
        Self {
            samples_per_step: 4,
            transforms: TransformRanges::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Weight of the p-norm change penalty.
    pub lambda: f64,
    pub p: f64,
    pub tv_weight: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Cells per patch side.
    pub granularity: usize,
    pub target_class: String,
    /// Previews and checkpoints are emitted every this many iterations.
    pub checkpoint_every: usize,
    pub eot: EotSettings,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            p: 2.0,
            tv_weight: 1.0,
            step_size: 0.05,
            iterations: 500,
            seed: 7,
            granularity: 10,
            target_class: "car".into(),
            checkpoint_every: 100,
            eot: EotSettings::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be nonnegative", self.lambda));
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return bad(format!("p {} must be at least 1", self.p));
        }
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return bad(format!("tv_weight {} must be nonnegative", self.tv_weight));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size {} must be positive", self.step_size));
        }
        if self.granularity == 0 || self.eot.samples_per_step == 0 || self.checkpoint_every == 0 {
            return bad("granularity, samples per step and checkpoint interval must be positive".into());
        }
        self.eot.transforms.validate()
    }
}

/// One object view: benign image, its footprint, where it sits on the
/// backgrounds, and its projection models.
#[derive(Debug, Clone)]
pub struct AttackView {
    pub label: String,
    pub object: ImageBuffer,
    pub object_mask: ImageBuffer,
    pub placement: (usize, usize),
    pub operands: ProjectionOperands,
}

/// Views and backgrounds sampled by the optimizer.
#[derive(Debug, Clone)]
pub struct EotScenes {
    pub views: Vec<AttackView>,
    pub backgrounds: Vec<ImageBuffer>,
}

/// Per-view precomputation shared by every step.
#[derive(Debug, Clone)]
pub struct ViewPlan {
    view: AttackView,
    projection: ProjectionPlan,
    region: Arc<Vec<f64>>,
    region_pixels: usize,
    upsample: Arc<SparseLinear>,
    diffs: Arc<SparseLinear>,
    cells: usize,
}

impl ViewPlan {
    pub fn new(view: &AttackView, cells: usize) -> Result<Self> {
        let projection = ProjectionPlan::new(&view.operands, &view.object)?;
        if !view.object.same_dims(&view.object_mask) {
            return Err(Error::Dimension("object and object mask differ".into()));
        }
        let region: Vec<f64> = view
            .object_mask
            .data()
            .iter()
            .map(|&m| if m > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let region_pixels = region.iter().filter(|&&r| r > 0.0).count() / 3;
        let (ph, pw) = projection.patch_dims();
        Ok(Self {
            view: view.clone(),
            projection,
            region: Arc::new(region),
            region_pixels: region_pixels.max(1),
            upsample: Arc::new(upsample_operator(cells, ph, pw)?),
            diffs: Arc::new(difference_operator(ph, pw)),
            cells,
        })
    }

    pub fn view(&self) -> &AttackView {
        &self.view
    }

    pub fn projection(&self) -> &ProjectionPlan {
        &self.projection
    }

    pub fn scene(&self, background: &ImageBuffer) -> Result<SceneSpec> {
        SceneSpec::new(
            self.view.object.clone(),
            self.view.object_mask.clone(),
            background.clone(),
            self.view.placement,
        )
    }
}

/// Loss terms for one sample and the gradient of `total` w.r.t. the latent.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub total: f64,
    pub detection: f64,
    pub pnorm: f64,
    pub tv: f64,
    pub grad: Vec<f64>,
}

/// Tape handles of the loss terms recorded by [`record_step`].
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub total: Var,
    pub detection: Var,
    pub pnorm: Var,
    pub tv: Var,
}

/// Records the full per-sample loss for `latent` (n×n×3) on the tape.
pub fn record_step(
    tape: &mut Tape,
    latent: Var,
    plan: &ViewPlan,
    scene: &ScenePlan,
    det: &ToyDetector,
    class: usize,
    cfg: &AttackConfig,
) -> StepVars {
    let (ph, pw) = plan.projection.patch_dims();
    let delta = record_delta(tape, latent, Arc::clone(&plan.upsample), ph, pw);
    let attacked = plan.projection.record(tape, delta);
    let composed = scene.record(tape, attacked);
    let detection = det.record_loss(tape, composed, class);

    let neg: Vec<f64> = plan.view.object.data().iter().map(|v| -v).collect();
    let change = tape.add_const(attacked, &neg);
    let change = tape.mul_const(change, Arc::clone(&plan.region));
    let norm = tape.pnorm(change, cfg.p);
    let pnorm = tape.scale(norm, (plan.region_pixels as f64).powf(-1.0 / cfg.p));
    let tv = record_total_variation(tape, delta, Arc::clone(&plan.diffs), ph * pw);

    let weighted_norm = tape.scale(pnorm, cfg.lambda);
    let weighted_tv = tape.scale(tv, cfg.tv_weight);
    let total = tape.add(detection, weighted_norm);
    let total = tape.add(total, weighted_tv);
    StepVars { total, detection, pnorm, tv }
}

/// Loss and latent gradient for one (view, background, transform) sample.
pub fn attack_step(
    patch: &PatchParams,
    plan: &ViewPlan,
    background: &ImageBuffer,
    transform: &ObjectTransform,
    det: &ToyDetector,
    cfg: &AttackConfig,
) -> Result<StepResult> {
    if patch.cells != plan.cells || patch.size() != plan.projection.patch_dims() {
        return Err(Error::Dimension(format!(
            "patch {:?}/{} does not match the view patch {:?}/{}",
            patch.size(),
            patch.cells,
            plan.projection.patch_dims(),
            plan.cells
        )));
    }
    let class = det.label_index(&cfg.target_class)?;
    let scene = ScenePlan::new(&plan.scene(background)?, transform)?;
    let (bh, bw) = scene.dims();
    det.check_dims(bh, bw)?;
    let n = patch.cells;

    let mut tape = Tape::new();
    let latent = tape.input(Shape::image(n, n, 3), patch.latent.clone());
    let StepVars { total, detection: j, pnorm: norm, tv } = record_step(&mut tape, latent, plan, &scene, det, class, cfg);

    let result = StepResult {
        total: tape.scalar(total),
        detection: tape.scalar(j),
        pnorm: tape.scalar(norm),
        tv: tape.scalar(tv),
        grad: Vec::new(),
    };
    let grad = tape.backward(total)?.wrt(latent);
    Ok(StepResult { grad, ..result })
}

/// Indices into the view and background lists plus the drawn transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EotSample {
    pub view: usize,
    pub background: usize,
    pub transform: ObjectTransform,
}

pub fn draw_samples(rng: &mut ChaCha8Rng, scenes: &EotScenes, eot: &EotSettings) -> Vec<EotSample> {
    (0..eot.samples_per_step)
        .map(|_| {
            let view = rng.random_range(0..scenes.views.len());
            let background = rng.random_range(0..scenes.backgrounds.len());
            let dims = scenes.backgrounds[background].dims();
            EotSample {
                view,
                background,
                transform: eot.transforms.sample(rng, dims),
            }
        })
        .collect()
}

/// Averages per-sample results in sample-index order, whatever order they
/// arrive in.
pub fn reduce_samples(mut results: Vec<(usize, StepResult)>) -> StepResult {
    results.sort_by_key(|(i, _)| *i);
    let k = results.len() as f64;
    let len = results[0].1.grad.len();
    let mut out = StepResult {
        total: 0.0,
        detection: 0.0,
        pnorm: 0.0,
        tv: 0.0,
        grad: vec![0.0; len],
    };
    for (_, r) in &results {
        out.total += r.total;
        out.detection += r.detection;
        out.pnorm += r.pnorm;
        out.tv += r.tv;
        for (a, b) in out.grad.iter_mut().zip(&r.grad) {
            *a += b;
        }
    }
    out.total /= k;
    out.detection /= k;
    out.pnorm /= k;
    out.tv /= k;
    for g in &mut out.grad {
        *g /= k;
    }
    out
}

/// Sample-mean loss terms at one iteration, before that iteration's update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub detection: f64,
    pub pnorm: f64,
    pub tv: f64,
    pub total: f64,
}

/// Renders of the patch at one checkpoint on the first view and background.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Number of updates applied so far.
    pub iteration: usize,
    pub patch: PatchParams,
    pub delta: ImageBuffer,
    pub warped: ImageBuffer,
    pub patched_object: ImageBuffer,
    pub scene: ImageBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackStatus {
    Completed,
    /// Stopped at `iteration` because the loss was not finite; the returned
    /// patch is the last finite one.
    Aborted { iteration: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub patch: PatchParams,
    pub trace: Vec<TraceRow>,
    pub checkpoints: Vec<Checkpoint>,
    pub status: AttackStatus,
}

pub fn render_checkpoint(iteration: usize, patch: &PatchParams, plan: &ViewPlan, background: &ImageBuffer) -> Result<Checkpoint> {
    let delta = patch.delta();
    let projection = plan.projection();
    let warped_full = projection.warp().apply(&delta)?;
    let mask = projection.mask();
    let (h, w) = mask.dims();
    let warped = ImageBuffer::from_clamped(
        h,
        w,
        warped_full.data().iter().zip(mask.data()).map(|(d, m)| d * m).collect(),
    )?;
    let patched_object = projection.render(&delta)?;
    let scene = ScenePlan::new(&plan.scene(background)?, &ObjectTransform::identity())?.render(&patched_object)?;
    Ok(Checkpoint {
        iteration,
        patch: patch.clone(),
        delta,
        warped,
        patched_object,
        scene,
    })
}

/// Minimizes the sample-mean loss with Adam. Samples within a step run in
/// parallel; their results are reduced in index order, so the output is the
/// same for any thread count.
pub fn run_attack(initial: &PatchParams, det: &ToyDetector, cfg: &AttackConfig, scenes: &EotScenes) -> Result<AttackOutcome> {
    cfg.validate()?;
    if scenes.views.is_empty() || scenes.backgrounds.is_empty() {
        return Err(Error::InvalidConfig("attack needs at least one view and one background".into()));
    }
    if initial.cells != cfg.granularity {
        return Err(Error::InvalidConfig(format!(
            "patch has {} cells per side, config asks for {}",
            initial.cells, cfg.granularity
        )));
    }
    det.label_index(&cfg.target_class)?;
    let plans = scenes
        .views
        .iter()
        .map(|v| ViewPlan::new(v, cfg.granularity))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut patch = initial.clone();
    let mut opt = Adam::new(patch.latent.len(), cfg.step_size);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = vec![render_checkpoint(0, &patch, &plans[0], &scenes.backgrounds[0])?];
    for it in 0..cfg.iterations {
        let samples = draw_samples(&mut rng, scenes, &cfg.eot);
        let results = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                attack_step(&patch, &plans[s.view], &scenes.backgrounds[s.background], &s.transform, det, cfg)
                    .map(|r| (i, r))
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = reduce_samples(results);
        if !mean.total.is_finite() || mean.grad.iter().any(|g| !g.is_finite()) {
            return Ok(AttackOutcome {
                patch,
                trace,
                checkpoints,
                status: AttackStatus::Aborted {
                    iteration: it,
                    reason: format!("loss became {}", mean.total),
                },
            });
        }
        trace.push(TraceRow {
            iteration: it,
            detection: mean.detection,
            pnorm: mean.pnorm,
            tv: mean.tv,
            total: mean.total,
        });
        opt.step(&mut patch.latent, &mean.grad);
        let done = it + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.iterations {
            checkpoints.push(render_checkpoint(done, &patch, &plans[0], &scenes.backgrounds[0])?);
        }
    }
    Ok(AttackOutcome {
        patch,
        trace,
        checkpoints,
        status: AttackStatus::Completed,
    })
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("iteration,J,pnorm,tv,total\n");
    for r in trace {
        writeln!(out, "{},{},{},{},{}", r.iteration, r.detection, r.pnorm, r.tv, r.total).unwrap();
    }
    out
}

/// Writes `config.json`, `trace.csv`, `patch_final.{ppm,txt}` and, per
/// checkpoint, `patch_iter_NNNN.{ppm,txt}`, `warped_iter_NNNN.ppm`,
/// `object_iter_NNNN.ppm` and `preview_iter_NNNN.ppm`.
pub fn write_run_dir(dir: &Path, config_json: &str, outcome: &AttackOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: &str| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("config.json", config_json)?;
    write("trace.csv", &trace_to_csv(&outcome.trace))?;
    save_image(&outcome.patch.delta(), dir.join("patch_final.ppm"))?;
    outcome.patch.save(dir.join("patch_final.txt"))?;
    for c in &outcome.checkpoints {
        let tag = format!("{:04}", c.iteration);
        save_image(&c.delta, dir.join(format!("patch_iter_{tag}.ppm")))?;
        c.patch.save(dir.join(format!("patch_iter_{tag}.txt")))?;
        save_image(&c.warped, dir.join(format!("warped_iter_{tag}.ppm")))?;
        save_image(&c.patched_object, dir.join(format!("object_iter_{tag}.ppm")))?;
        save_image(&c.scene, dir.join(format!("preview_iter_{tag}.ppm")))?;
    }
    Ok(())
}

/// Largest spread of values inside any one cell block, over all channels.
pub fn max_intra_cell_deviation(img: &ImageBuffer, cells: usize) -> Result<f64> {
    let (h, w) = img.dims();
    check_grid(cells, h, w)?;
    let (bh, bw) = (h / cells, w / cells);
    let mut worst: f64 = 0.0;
    for cy in 0..cells {
        for cx in 0..cells {
            let first = img.pixel(cx * bw, cy * bh);
            for y in cy * bh..(cy + 1) * bh {
                for x in cx * bw..(cx + 1) * bw {
                    let p = img.pixel(x, y);
                    for k in 0..3 {
                        worst = worst.max((p[k] - first[k]).abs());
                    }
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, GradCheckConfig};
    use crate::color::ColorModel;
    use crate::detector::DEFAULT_LABELS;
    use crate::image::Point2;
    use crate::tps::{fit_tps, ControlPointSet};

    fn random_latent(len: usize, seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn zero_latent_is_mid_gray() {
        let d = latent_to_delta(&[0.0; 12], 2, (4, 6)).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_latent_stays_inside() {
        let d = latent_to_delta(&[20.0, -20.0, 20.0], 1, (2, 2)).unwrap();
        let p = d.pixel(1, 1);
        assert!((p[0] - 1.0).abs() < 1e-8 && p[0] < 1.0);
        assert!(p[1].abs() < 1e-8 && p[1] > 0.0);
    }

    #[test]
    fn delta_matches_direct_loop() {
        let latent = random_latent(12, 1, 3.0);
        let d = latent_to_delta(&latent, 2, (4, 4)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let cell = (y / 2) * 2 + x / 2;
                for k in 0..3 {
                    let want = latent[cell * 3 + k].tanh() / 2.0 + 0.5;
                    assert!((d.pixel(x, y)[k] - want).abs() <= 1e-12);
                }
            }
        }
        assert_eq!(max_intra_cell_deviation(&d, 2).unwrap(), 0.0);
    }

    #[test]
    fn indivisible_patch_is_rejected() {
        assert!(matches!(latent_to_delta(&[0.0; 12], 2, (5, 4)), Err(Error::Dimension(_))));
        assert!(matches!(PatchParams::mid_gray(3, 10, 9), Err(Error::Dimension(_))));
    }

    #[test]
    fn total_variation_examples() {
        assert_eq!(total_variation(&ImageBuffer::filled(5, 4, 0.3)), 0.0);
        let pair = ImageBuffer::new(1, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(total_variation(&pair), 1.5);
        let checker = ImageBuffer::from_fn(6, 6, |x, y| [((x + y) % 2) as f64; 3]);
        let ramp = ImageBuffer::from_fn(6, 6, |x, _| [x as f64 / 5.0; 3]);
        assert!(total_variation(&checker) >= total_variation(&ramp));
    }

    #[test]
    fn total_variation_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let point: Vec<f64> = (0..5 * 4 * 3).map(|_| rng.random()).collect();
        let diffs = Arc::new(difference_operator(5, 4));
        let report = check_gradients(
            |tape, v| record_total_variation(tape, v[0], Arc::clone(&diffs), 20),
            &[(Shape::image(5, 4, 3), point)],
            &GradCheckConfig::default(),
        );
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn patch_text_round_trip() {
        let p = PatchParams::new(random_latent(27, 3, 2.0), 3, 6, 9).unwrap();
        assert_eq!(PatchParams::from_text(&p.to_text(), Path::new("p.txt")).unwrap(), p);
    }

    pub(crate) fn toy_view(shape: f64) -> AttackView {
        // 8x8 patch onto the middle of a 12x16 object
        let src = vec![
            Point2::new(0.0, 0.0),
            Point2::new(7.0, 0.0),
            Point2::new(0.0, 7.0),
            Point2::new(7.0, 7.0),
            Point2::new(3.5, 3.5),
        ];
        let dst = vec![
            Point2::new(4.0, 2.0),
            Point2::new(12.0, 2.5),
            Point2::new(3.5, 9.0),
            Point2::new(11.5, 9.5),
            Point2::new(8.2, 5.6),
        ];
        let tps = fit_tps(&ControlPointSet::new(src, dst).unwrap(), 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        AttackView {
            label: "toy".into(),
            object: ImageBuffer::from_fn(12, 16, |_, _| [rng.random_range(0.2..0.8), 0.3, 0.6]),
            object_mask: ImageBuffer::from_fn(12, 16, |x, _| [if x < 15 { 1.0 } else { 0.0 }; 3]),
            placement: (4, 2),
            operands: ProjectionOperands {
                tps,
                color: ColorModel::random(8, 4),
                patch_shape: ImageBuffer::filled(8, 8, shape),
            },
        }
    }

    fn toy_setup(shape: f64) -> (ViewPlan, ImageBuffer, ToyDetector) {
        let view = toy_view(shape);
        let plan = ViewPlan::new(&view, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bg = ImageBuffer::from_fn(16, 24, |_, _| [rng.random(), rng.random(), rng.random()]);
        (plan, bg, ToyDetector::random([4, 6, 6], &DEFAULT_LABELS, 5))
    }

    fn small_cfg() -> AttackConfig {
        AttackConfig {
            granularity: 2,
            iterations: 5,
            checkpoint_every: 2,
            ..AttackConfig::default()
        }
    }

    #[test]
    fn isolated_detection_term() {
        let (plan, bg, det) = toy_setup(1.0);
        let patch = PatchParams::new(random_latent(12, 4, 1.0), 2, 8, 8).unwrap();
        let cfg = AttackConfig { lambda: 0.0, tv_weight: 0.0, ..small_cfg() };
        let t = ObjectTransform::identity();
        let r = attack_step(&patch, &plan, &bg, &t, &det, &cfg).unwrap();
        let patched = plan.projection().render(&patch.delta()).unwrap();
        let scene = crate::compositor::compose_scene(&plan.scene(&bg).unwrap(), &patched).unwrap();
        let j = crate::detector::detection_loss(&det, &scene, "car").unwrap().value();
        assert!((r.total - j).abs() <= 1e-12);
        assert!(r.grad.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn empty_footprint_has_no_gradient() {
        let (plan, bg, det) = toy_setup(0.0);
        let cfg = AttackConfig { lambda: 0.5, tv_weight: 0.0, ..small_cfg() };
        let t = ObjectTransform::identity();
        let a = attack_step(&PatchParams::new(random_latent(12, 5, 1.0), 2, 8, 8).unwrap(), &plan, &bg, &t, &det, &cfg).unwrap();
        let b = attack_step(&PatchParams::new(random_latent(12, 6, 1.0), 2, 8, 8).unwrap(), &plan, &bg, &t, &det, &cfg).unwrap();
        assert_eq!(a.total, b.total);
        assert!(a.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn step_gradient_matches_finite_differences() {
        let (plan, bg, det) = toy_setup(1.0);
        let cfg = AttackConfig { lambda: 0.3, ..small_cfg() };
        let t = ObjectTransform {
            scale: 1.05,
            rotation_deg: 3.0,
            shift: [0.4, -0.6],
            brightness: 0.03,
            noise_sigma: 0.01,
            noise_seed: 2,
        };
        let latent = random_latent(12, 7, 1.0);
        let analytic = attack_step(&PatchParams::new(latent.clone(), 2, 8, 8).unwrap(), &plan, &bg, &t, &det, &cfg).unwrap();
        let h = 1e-5;
        for i in 0..12 {
            let eval = |d: f64| {
                let mut l = latent.clone();
                l[i] += d;
                attack_step(&PatchParams::new(l, 2, 8, 8).unwrap(), &plan, &bg, &t, &det, &cfg).unwrap().total
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel <= 1e-4, "coordinate {i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn zero_iterations_keep_initial_patch() {
        let (plan, bg, det) = toy_setup(1.0);
        let scenes = EotScenes { views: vec![plan.view().clone()], backgrounds: vec![bg] };
        let init = PatchParams::mid_gray(2, 8, 8).unwrap();
        let out = run_attack(&init, &det, &AttackConfig { iterations: 0, ..small_cfg() }, &scenes).unwrap();
        assert_eq!(out.patch, init);
        assert!(out.trace.is_empty());
        assert_eq!(out.status, AttackStatus::Completed);
    }

    #[test]
    fn single_sample_run_is_plain_descent() {
        let (plan, bg, det) = toy_setup(1.0);
        let scenes = EotScenes { views: vec![plan.view().clone()], backgrounds: vec![bg.clone()] };
        let cfg = AttackConfig {
            eot: EotSettings { samples_per_step: 1, transforms: TransformRanges::identity() },
            ..small_cfg()
        };
        let init = PatchParams::new(random_latent(12, 8, 0.5), 2, 8, 8).unwrap();
        let out = run_attack(&init, &det, &cfg, &scenes).unwrap();

        let mut patch = init.clone();
        let mut opt = Adam::new(12, cfg.step_size);
        for row in &out.trace {
            let r = attack_step(&patch, &plan, &bg, &ObjectTransform::identity(), &det, &cfg).unwrap();
            assert_eq!(r.total.to_bits(), row.total.to_bits());
            opt.step(&mut patch.latent, &r.grad);
        }
        assert_eq!(patch, out.patch);
    }

    #[test]
    fn reduction_ignores_arrival_order() {
        let (plan, bg, det) = toy_setup(1.0);
        let patch = PatchParams::new(random_latent(12, 11, 1.0), 2, 8, 8).unwrap();
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let results: Vec<(usize, StepResult)> = (0..5)
            .map(|i| {
                let t = cfg.eot.transforms.sample(&mut rng, bg.dims());
                (i, attack_step(&patch, &plan, &bg, &t, &det, &cfg).unwrap())
            })
            .collect();
        let mut shuffled = results.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        let a = reduce_samples(results);
        let b = reduce_samples(shuffled);
        assert_eq!(a, b);
    }

    #[test]
    fn run_is_repeatable_across_thread_counts() {
        let (plan, bg, det) = toy_setup(1.0);
        let scenes = EotScenes { views: vec![plan.view().clone()], backgrounds: vec![bg.clone(), bg] };
        let init = PatchParams::mid_gray(2, 8, 8).unwrap();
        let cfg = small_cfg();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_attack(&init, &det, &cfg, &scenes).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(trace_to_csv(&a.trace), trace_to_csv(&b.trace));
        assert_eq!(a.patch, b.patch);
        assert_eq!(a.checkpoints.len(), 4);
        for c in &a.checkpoints {
            assert_eq!(max_intra_cell_deviation(&c.delta, 2).unwrap(), 0.0);
            assert!(c.delta.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zero_footprint_leaves_latent_untouched() {
        let (plan, bg, det) = toy_setup(0.0);
        let scenes = EotScenes { views: vec![plan.view().clone()], backgrounds: vec![bg] };
        let init = PatchParams::new(random_latent(12, 12, 1.0), 2, 8, 8).unwrap();
        let cfg = AttackConfig { tv_weight: 0.0, ..small_cfg() };
        let out = run_attack(&init, &det, &cfg, &scenes).unwrap();
        assert_eq!(out.patch, init);
    }

    #[test]
    fn run_dir_has_expected_files() {
        let (plan, bg, det) = toy_setup(1.0);
        let scenes = EotScenes { views: vec![plan.view().clone()], backgrounds: vec![bg] };
        let cfg = small_cfg();
        let out = run_attack(&PatchParams::mid_gray(2, 8, 8).unwrap(), &det, &cfg, &scenes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run_dir(dir.path(), &serde_json::to_string(&cfg).unwrap(), &out).unwrap();
        for name in ["config.json", "trace.csv", "patch_final.ppm", "patch_iter_0000.ppm", "preview_iter_0005.ppm"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let csv = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("iteration,J,pnorm,tv,total\n"));
    }
}
