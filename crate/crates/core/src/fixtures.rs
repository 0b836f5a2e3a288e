//! The bundled desk-scale fixture: per-view scene bundles of the toy car,
//! ambient color models, a trained toy detector, held-out backgrounds, and
//! small TPS and compositor fixtures.
//!
//! Everything is generated from seeds, so `build_fixtures` followed by
//! `write_fixtures` reproduces the shipped files byte for byte.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackView, EotScenes, PatchParams};
use crate::bundle::{load_bundles, SceneBundle, SceneMeta};
use crate::color::{train_color_model, CaptureLaw, ColorModel, ColorTrainConfig};
use crate::detector::{train_toy_detector, DetectorTrainConfig, ToyDetector};
use crate::error::{Error, Result};
use crate::eval::{render_frames, AmbientModel, ConditionTag, FrameSet};
use crate::image::{load_image, save_image, ImageBuffer, Point2};
use crate::synth::{background, detector_scenes, quantized, render_car, view_controls, FIXTURE_BODY, PATCH_SIZE, PLACEMENT, VIEW_ANGLES};
use crate::tps::ControlPointSet;

/// Ambient labels from darkest to brightest.
pub const AMBIENT_LABELS: [&str; 3] = ["low", "mid", "high"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub detector_scenes: usize,
    pub detector_seed: u64,
    pub detector: DetectorTrainConfig,
    pub color: ColorTrainConfig,
    pub color_samples: usize,
    pub color_seed: u64,
    /// Backgrounds per bundle, seen by the optimizer.
    pub bundle_backgrounds: usize,
    /// Backgrounds kept away from the optimizer for evaluation.
    pub heldout_backgrounds: usize,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            detector_scenes: 200,
            detector_seed: 7,
            detector: DetectorTrainConfig::default(),
            color: ColorTrainConfig::default(),
            color_samples: 512,
            color_seed: 7,
            bundle_backgrounds: 4,
            heldout_backgrounds: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixtureSet {
    pub bundles: Vec<SceneBundle>,
    pub ambients: Vec<AmbientModel>,
    pub detector: ToyDetector,
    pub heldout: Vec<ImageBuffer>,
}

impl FixtureSet {
    pub fn views(&self) -> Result<Vec<AttackView>> {
        self.bundles.iter().map(SceneBundle::attack_view).collect()
    }

    /// Every view over the backgrounds of the first bundle.
    pub fn eot_scenes(&self) -> Result<EotScenes> {
        Ok(EotScenes {
            views: self.views()?,
            backgrounds: self.bundles[0].backgrounds.clone(),
        })
    }
}

pub fn view_label(angle: f64) -> String {
    format!("{angle:+.0}")
}

fn bundle_dir_name(label: &str) -> String {
    format!("view_{}", label.replace('+', "p").replace('-', "m"))
}

pub fn train_ambient_models(cfg: &FixtureConfig) -> Result<Vec<AmbientModel>> {
    AMBIENT_LABELS
        .iter()
        .enumerate()
        .map(|(level, label)| {
            let data = CaptureLaw::ambient(level).synthesize_random(cfg.color_samples, cfg.color_seed);
            let (color, _) = train_color_model(&data, &cfg.color)?;
            Ok(AmbientModel {
                label: label.to_string(),
                color,
            })
        })
        .collect()
}

/// Bundles for every view angle. They share one color model and one set of
/// backgrounds.
pub fn view_bundles(color: &ColorModel, backgrounds: &[ImageBuffer]) -> Vec<SceneBundle> {
    VIEW_ANGLES
        .iter()
        .map(|&angle| {
            let (object, object_mask) = render_car(FIXTURE_BODY, angle);
            SceneBundle {
                meta: SceneMeta {
                    placement: [PLACEMENT.0, PLACEMENT.1],
                    patch_size: [PATCH_SIZE, PATCH_SIZE],
                    view: view_label(angle),
                    tps_regularization: 0.0,
                },
                object,
                object_mask,
                backgrounds: backgrounds.to_vec(),
                controls: view_controls(angle),
                color: color.clone(),
            }
        })
        .collect()
}

pub fn build_fixtures(cfg: &FixtureConfig) -> Result<FixtureSet> {
    let ambients = train_ambient_models(cfg)?;
    let bundle_bg: Vec<ImageBuffer> = (0..cfg.bundle_backgrounds as u64).map(|i| background(100 + i)).collect();
    let heldout: Vec<ImageBuffer> = (0..cfg.heldout_backgrounds as u64).map(|i| background(900 + i)).collect();
    let bundles = view_bundles(&ambients[0].color, &bundle_bg);
    let scenes = detector_scenes(cfg.detector_scenes, cfg.detector_seed)?;
    let (detector, _) = train_toy_detector(&scenes, &cfg.detector)?;
    Ok(FixtureSet {
        bundles,
        ambients,
        detector,
        heldout,
    })
}

/// Four control points on a square mapped to themselves.
pub fn identity_square() -> ControlPointSet {
    let pts: Vec<Point2> = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0)]
        .iter()
        .map(|&(x, y)| Point2::new(x, y))
        .collect();
    ControlPointSet::new(pts.clone(), pts).expect("square is well spread")
}

/// A 3×3 lattice under a fixed shear, scale and shift.
pub fn affine_lattice() -> ControlPointSet {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for j in 0..3 {
        for i in 0..3 {
            let (x, y) = (8.0 * i as f64, 8.0 * j as f64);
            src.push(Point2::new(x, y));
            dst.push(Point2::new(1.1 * x + 0.25 * y + 3.0, -0.15 * x + 0.9 * y + 1.5));
        }
    }
    ControlPointSet::new(src, dst).expect("lattice is well spread")
}

/// The 16×16 compositor fixture: a two-tone object, an 8×8 color board
/// patch, and controls that bend the patch across the object.
pub fn compositor_fixture() -> (ImageBuffer, ImageBuffer, ControlPointSet) {
    let object = ImageBuffer::from_fn(16, 16, |x, y| {
        if (x / 4 + y / 4) % 2 == 0 {
            [0.7, 0.2, 0.15]
        } else {
            [0.25, 0.3, 0.6]
        }
    });
    let board = ImageBuffer::from_fn(8, 8, |x, y| [x as f64 / 7.0, y as f64 / 7.0, ((x + y) % 3) as f64 / 2.0]);
    let src: Vec<Point2> = [(0.0, 0.0), (7.0, 0.0), (0.0, 7.0), (7.0, 7.0), (3.5, 3.5), (3.5, 0.0)]
        .iter()
        .map(|&(x, y)| Point2::new(x, y))
        .collect();
    let dst: Vec<Point2> = [(2.0, 3.0), (13.0, 2.0), (3.0, 12.5), (12.5, 13.0), (8.4, 7.1), (7.5, 1.0)]
        .iter()
        .map(|&(x, y)| Point2::new(x, y))
        .collect();
    (object, quantized(&board), ControlPointSet::new(src, dst).expect("controls are well spread"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Layout under `dir`: `bundles/view_*/`, `ambient/{low,mid,high}.txt`,
/// `detector.txt`, `heldout/background_*.ppm`, `tps/*.txt`, `compositor/`.
pub fn write_fixtures(set: &FixtureSet, cfg: &FixtureConfig, dir: &Path) -> Result<()> {
    create(dir)?;
    let json = serde_json::to_string_pretty(cfg).expect("config serializes") + "\n";
    write_text(&dir.join("fixture_config.json"), &json)?;
    for b in &set.bundles {
        b.save(dir.join("bundles").join(bundle_dir_name(&b.meta.view)))?;
    }
    let amb = dir.join("ambient");
    create(&amb)?;
    for a in &set.ambients {
        a.color.save(amb.join(format!("{}.txt", a.label)))?;
    }
    set.detector.save(dir.join("detector.txt"))?;
    let held = dir.join("heldout");
    create(&held)?;
    for (i, bg) in set.heldout.iter().enumerate() {
        save_image(bg, held.join(format!("background_{i:02}.ppm")))?;
    }
    let tps = dir.join("tps");
    create(&tps)?;
    write_text(&tps.join("identity_square.txt"), &identity_square().to_text())?;
    write_text(&tps.join("affine.txt"), &affine_lattice().to_text())?;
    write_text(&tps.join("checkerboard.txt"), &view_controls(10.0).to_text())?;
    let comp = dir.join("compositor");
    create(&comp)?;
    let (object, delta, controls) = compositor_fixture();
    save_image(&object, comp.join("object.ppm"))?;
    save_image(&delta, comp.join("delta.ppm"))?;
    write_text(&comp.join("controls.txt"), &controls.to_text())?;
    Ok(())
}

pub fn load_ambients(dir: &Path) -> Result<Vec<AmbientModel>> {
    AMBIENT_LABELS
        .iter()
        .map(|label| {
            Ok(AmbientModel {
                label: label.to_string(),
                color: ColorModel::load(dir.join(format!("{label}.txt")))?,
            })
        })
        .collect()
}

pub fn load_backgrounds(dir: &Path) -> Result<Vec<ImageBuffer>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::MissingFile {
            path: dir.join("*.ppm"),
        });
    }
    paths.iter().map(load_image).collect()
}

pub fn load_fixtures(dir: &Path) -> Result<FixtureSet> {
    Ok(FixtureSet {
        bundles: load_bundles(dir.join("bundles"))?,
        ambients: load_ambients(&dir.join("ambient"))?,
        detector: ToyDetector::load(dir.join("detector.txt"))?,
        heldout: load_backgrounds(&dir.join("heldout"))?,
    })
}

/// The evaluation sequence: every view over every held-out background at
/// full scale with small pose jitter. Returns attacked and benign frames.
pub fn fixture_sequence(set: &FixtureSet, patch: &PatchParams, color: &ColorModel, seed: u64) -> Result<(FrameSet, FrameSet)> {
    let mut attack = Vec::new();
    let mut benign = Vec::new();
    let mut tags = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for view in set.views()? {
        let view_seed = rand::Rng::random::<u64>(&mut rng);
        let (a, b) = render_frames(&view, color, patch, &set.heldout, 1.0, set.heldout.len(), view_seed)?;
        tags.extend(std::iter::repeat_n(ConditionTag::new("1.5m", &view.label, "low"), a.len()));
        attack.extend(a);
        benign.extend(b);
    }
    let labels = vec![true; attack.len()];
    Ok((
        FrameSet::new(attack, labels.clone(), tags.clone())?,
        FrameSet::new(benign, labels, tags)?,
    ))
}
