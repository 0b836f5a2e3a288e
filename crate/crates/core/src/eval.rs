//! Misdetection rate over frame sets, and distance / angle / ambient sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackView, PatchParams};
use crate::color::ColorModel;
use crate::compositor::{ProjectionOperands, ProjectionPlan, ScenePlan, SceneSpec};
use crate::detector::{detect, target_detected, DetectorThreshold, ToyDetector};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::synth::frame_jitter;

/// Grid cell a frame belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConditionTag {
    pub distance: String,
    pub angle: String,
    pub ambient: String,
}

impl ConditionTag {
    pub fn new(distance: &str, angle: &str, ambient: &str) -> Self {
        Self {
            distance: distance.into(),
            angle: angle.into(),
            ambient: ambient.into(),
        }
    }
}

/// Ordered frames with the expected presence of the target and a condition
/// tag per frame.
#[derive(Debug, Clone)]
pub struct FrameSet {
    frames: Vec<ImageBuffer>,
    labels: Vec<bool>,
    tags: Vec<ConditionTag>,
}

impl FrameSet {
    pub fn new(frames: Vec<ImageBuffer>, labels: Vec<bool>, tags: Vec<ConditionTag>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != frames.len() || tags.len() != frames.len() {
            return Err(Error::Dimension(format!(
                "{} frames, {} labels, {} tags",
                frames.len(),
                labels.len(),
                tags.len()
            )));
        }
        Ok(Self { frames, labels, tags })
    }

    /// Every frame expected to hold the target, all under one tag.
    pub fn uniform(frames: Vec<ImageBuffer>, tag: ConditionTag) -> Result<Self> {
        let n = frames.len();
        Self::new(frames, vec![true; n], vec![tag; n])
    }

    pub fn frames(&self) -> &[ImageBuffer] {
        &self.frames
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn tags(&self) -> &[ConditionTag] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Frame and miss counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub misdetected: usize,
}

impl Counts {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.misdetected as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmdrReport {
    pub total: usize,
    pub misdetected: usize,
    pub omdr: f64,
    /// Per frame: whether the target was found.
    pub detected: Vec<bool>,
    pub breakdown: BTreeMap<ConditionTag, Counts>,
}

/// A frame is misdetected when no reported detection of the target class
/// reaches the threshold.
pub fn compute_omdr(frames: &FrameSet, det: &ToyDetector, thr: &DetectorThreshold) -> Result<OmdrReport> {
    thr.validate()?;
    let class = det.label_index(&thr.target_class)?;
    let detected = frames
        .frames
        .par_iter()
        .map(|f| detect(det, f).map(|d| target_detected(&d, class, thr.threshold)))
        .collect::<Result<Vec<bool>>>()?;
    let mut breakdown: BTreeMap<ConditionTag, Counts> = BTreeMap::new();
    for (tag, &hit) in frames.tags.iter().zip(&detected) {
        let c = breakdown.entry(tag.clone()).or_default();
        c.total += 1;
        c.misdetected += usize::from(!hit);
    }
    let misdetected = detected.iter().filter(|&&d| !d).count();
    Ok(OmdrReport {
        total: frames.len(),
        misdetected,
        omdr: misdetected as f64 / frames.len() as f64,
        detected,
        breakdown,
    })
}

/// A color model standing for one ambient light level.
#[derive(Debug, Clone)]
pub struct AmbientModel {
    pub label: String,
    pub color: ColorModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// Distance labels with the object scale that stands for them.
    pub distances: Vec<(String, f64)>,
    /// View labels to evaluate; empty means every view given.
    pub angles: Vec<String>,
    /// Ambient labels to evaluate; empty means every model given.
    pub ambients: Vec<String>,
    pub frames_per_cell: usize,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            distances: vec![("1.5m".into(), 1.0), ("2.0m".into(), 0.8), ("2.5m".into(), 0.6)],
            angles: Vec::new(),
            ambients: Vec::new(),
            frames_per_cell: 4,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub tag: ConditionTag,
    pub attack: OmdrReport,
    pub benign: OmdrReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn mean_attack(&self) -> f64 {
        mean(self.cells.iter().map(|c| c.attack.omdr))
    }

    pub fn mean_benign(&self) -> f64 {
        mean(self.cells.iter().map(|c| c.benign.omdr))
    }

    /// Mean with-attack OMDR per ambient label, in first-seen order.
    pub fn attack_by_ambient(&self) -> Vec<(String, f64)> {
        let mut labels: Vec<String> = Vec::new();
        for c in &self.cells {
            if !labels.contains(&c.tag.ambient) {
                labels.push(c.tag.ambient.clone());
            }
        }
        labels
            .into_iter()
            .map(|l| {
                let m = mean(self.cells.iter().filter(|c| c.tag.ambient == l).map(|c| c.attack.omdr));
                (l, m)
            })
            .collect()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Benign and attacked frames for one view at one object scale: frame `k`
/// uses background `k mod len` and a jittered pose drawn from `seed`.
pub fn render_frames(
    view: &AttackView,
    color: &ColorModel,
    patch: &PatchParams,
    backgrounds: &[ImageBuffer],
    scale: f64,
    frames: usize,
    seed: u64,
) -> Result<(Vec<ImageBuffer>, Vec<ImageBuffer>)> {
    if backgrounds.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one background".into()));
    }
    let ops = ProjectionOperands {
        color: color.clone(),
        ..view.operands.clone()
    };
    let patched = ProjectionPlan::new(&ops, &view.object)?.render(&patch.delta())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attack = Vec::with_capacity(frames);
    let mut benign = Vec::with_capacity(frames);
    for k in 0..frames {
        let t = frame_jitter(&mut rng, scale);
        let spec = SceneSpec::new(
            view.object.clone(),
            view.object_mask.clone(),
            backgrounds[k % backgrounds.len()].clone(),
            view.placement,
        )?;
        let plan = ScenePlan::new(&spec, &t)?;
        attack.push(plan.render(&patched)?);
        benign.push(plan.render(&view.object)?);
    }
    Ok((attack, benign))
}

/// OMDR with and without the patch for every (distance, angle, ambient)
/// cell. Angle comes from the view, distance from object scale, ambient from
/// the color model. Frame poses depend on distance and angle only.
pub fn run_sweep(
    views: &[AttackView],
    patch: &PatchParams,
    det: &ToyDetector,
    ambients: &[AmbientModel],
    thr: &DetectorThreshold,
    backgrounds: &[ImageBuffer],
    spec: &SweepSpec,
) -> Result<SweepGrid> {
    if views.is_empty() || ambients.is_empty() || spec.distances.is_empty() || spec.frames_per_cell == 0 {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    let angles: Vec<&AttackView> = if spec.angles.is_empty() {
        views.iter().collect()
    } else {
        spec.angles
            .iter()
            .map(|a| {
                views
                    .iter()
                    .find(|v| &v.label == a)
                    .ok_or_else(|| Error::MissingBundle(format!("angle {a}")))
            })
            .collect::<Result<_>>()?
    };
    let ambient_set: Vec<&AmbientModel> = if spec.ambients.is_empty() {
        ambients.iter().collect()
    } else {
        spec.ambients
            .iter()
            .map(|a| {
                ambients
                    .iter()
                    .find(|m| &m.label == a)
                    .ok_or_else(|| Error::UnknownLabel(a.clone()))
            })
            .collect::<Result<_>>()?
    };
    let mut jobs = Vec::new();
    for amb in &ambient_set {
        for (di, (dlabel, scale)) in spec.distances.iter().enumerate() {
            for (ai, view) in angles.iter().enumerate() {
                let seed = spec.seed ^ ((di as u64) << 32) ^ ((ai as u64) << 16);
                jobs.push((*amb, dlabel.as_str(), *scale, *view, seed));
            }
        }
    }
    let cells = jobs
        .par_iter()
        .map(|&(amb, dlabel, scale, view, seed)| {
            let (attack, benign) =
                render_frames(view, &amb.color, patch, backgrounds, scale, spec.frames_per_cell, seed)?;
            let tag = ConditionTag::new(dlabel, &view.label, &amb.label);
            let a = compute_omdr(&FrameSet::uniform(attack, tag.clone())?, det, thr)?;
            let b = compute_omdr(&FrameSet::uniform(benign, tag.clone())?, det, thr)?;
            Ok(SweepCell { tag, attack: a, benign: b })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepGrid { cells })
}

pub fn sweep_csv(grid: &SweepGrid) -> String {
    let mut out = String::from("distance,angle,ambient,omdr_attack,omdr_benign\n");
    for c in &grid.cells {
        writeln!(
            out,
            "{},{},{},{:.4},{:.4}",
            c.tag.distance, c.tag.angle, c.tag.ambient, c.attack.omdr, c.benign.omdr
        )
        .unwrap();
    }
    out
}

fn heat_color(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * v).round() as u8;
    let g = (255.0 * (1.0 - v) * 0.8).round() as u8;
    format!("rgb({r},{g},60)")
}

/// Rows are distances, columns angles; each cell is shaded by the
/// with-attack rate and annotated `attack/benign`.
pub fn heatmap_svg(grid: &SweepGrid, ambient: &str) -> String {
    let cells: Vec<&SweepCell> = grid.cells.iter().filter(|c| c.tag.ambient == ambient).collect();
    let mut rows: Vec<&str> = Vec::new();
    let mut cols: Vec<&str> = Vec::new();
    for c in &cells {
        if !rows.contains(&c.tag.distance.as_str()) {
            rows.push(&c.tag.distance);
        }
        if !cols.contains(&c.tag.angle.as_str()) {
            cols.push(&c.tag.angle);
        }
    }
    let (cw, ch, left, top) = (80, 40, 70, 50);
    let width = left + cw * cols.len() + 10;
    let height = top + ch * rows.len() + 10;
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="12">"#).unwrap();
    writeln!(svg, r#"<text x="{left}" y="18">OMDR, ambient {ambient} (attack/benign)</text>"#).unwrap();
    for (j, col) in cols.iter().enumerate() {
        writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{col}</text>"#, left + j * cw + cw / 2, top - 8).unwrap();
    }
    for (i, row) in rows.iter().enumerate() {
        writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{row}</text>"#, left - 6, top + i * ch + ch / 2 + 4).unwrap();
        for (j, col) in cols.iter().enumerate() {
            let Some(c) = cells.iter().find(|c| c.tag.distance == *row && c.tag.angle == *col) else {
                continue;
            };
            let (x, y) = (left + j * cw, top + i * ch);
            writeln!(
                svg,
                r#"<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{}" stroke="white"/>"#,
                heat_color(c.attack.omdr)
            )
            .unwrap();
            writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="white">{:.2}/{:.2}</text>"#,
                x + cw / 2,
                y + ch / 2 + 4,
                c.attack.omdr,
                c.benign.omdr
            )
            .unwrap();
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `sweep.csv` and `heatmap_<ambient>.svg` per ambient label.
pub fn emit_report(grid: &SweepGrid, out_dir: &Path) -> Result<()> {
    if grid.cells.is_empty() {
        return Err(Error::InvalidConfig("empty sweep grid".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("sweep.csv");
    fs::write(&path, sweep_csv(grid)).map_err(|e| Error::io(&path, e))?;
    for (label, _) in grid.attack_by_ambient() {
        let path = out_dir.join(format!("heatmap_{label}.svg"));
        fs::write(&path, heatmap_svg(grid, &label)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
