//! Self-checks behind `projforge diag`: finite-difference gradient audits,
//! TPS interpolation audits, and repeat-run digests.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::attack::{record_step, record_total_variation, difference_operator, run_attack, trace_to_csv, AttackConfig, EotScenes, EotSettings, PatchParams, ViewPlan};
use crate::autodiff::{check_gradients, GradCheckConfig, GradCheckReport, Shape};
use crate::color::{train_color_model, CaptureLaw, ColorTrainConfig};
use crate::compositor::{ObjectTransform, ScenePlan};
use crate::detector::{train_toy_detector, DetectorTrainConfig};
use crate::error::{Error, Result};
use crate::eval::{run_sweep, sweep_csv, AmbientModel, SweepSpec};
use crate::fixtures::{view_bundles, FixtureSet};
use crate::synth::{background, detector_scenes, view_controls};
use crate::tps::{apply_tps, fit_tps, ControlPointSet};

/// One named pass/fail line.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl DiagCheck {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn from_report(name: &str, r: &GradCheckReport) -> DiagCheck {
    DiagCheck::new(
        name,
        r.passed(),
        format!(
            "{} coordinates, worst relative error {:.2e} (limit {:.0e})",
            r.checked(),
            r.worst_relative_error,
            r.tolerance
        ),
    )
}

/// Reverse-mode against central differences for the color model, total
/// variation, the detection loss, and the full attack loss, all on the
/// shipped fixture.
pub fn gradient_checks(set: &FixtureSet, cfg: &GradCheckConfig) -> Result<Vec<DiagCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();

    // color model w.r.t. the projected color, many pixels at once
    let color = set.bundles[0].color.clone();
    let n = 64;
    let surface: Vec<f64> = (0..n * 3).map(|_| rng.random_range(0.05..0.95)).collect();
    let projected: Vec<f64> = (0..n * 3).map(|_| rng.random_range(0.05..0.95)).collect();
    let weights: Arc<Vec<f64>> = Arc::new((0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect());
    let report = check_gradients(
        |t, v| {
            let s = t.constant(Shape::image(1, n, 3), surface.clone());
            let x = t.concat(s, v[0]);
            let y = color.forward_tape(t, x);
            let y = t.mul_const(y, Arc::clone(&weights));
            t.sum(y)
        },
        &[(Shape::image(1, n, 3), projected)],
        cfg,
    );
    out.push(from_report("color model / projected color", &report));

    // total variation of a patch-sized image
    let (h, w) = (set.bundles[0].meta.patch_size[0], set.bundles[0].meta.patch_size[1]);
    let img: Vec<f64> = (0..h * w * 3).map(|_| rng.random()).collect();
    let diffs = Arc::new(difference_operator(h, w));
    let report = check_gradients(
        |t, v| record_total_variation(t, v[0], Arc::clone(&diffs), h * w),
        &[(Shape::image(h, w, 3), img)],
        cfg,
    );
    out.push(from_report("total variation", &report));

    // detection loss w.r.t. the benign scene
    let scene = crate::compositor::compose_scene(&set.bundles[0].scene(0)?, &set.bundles[0].object)?;
    let class = set.detector.label_index("car")?;
    let (sh, sw) = scene.dims();
    let report = check_gradients(
        |t, v| set.detector.record_loss(t, v[0], class),
        &[(Shape::image(sh, sw, 3), scene.data().to_vec())],
        cfg,
    );
    out.push(from_report("detection loss / image", &report));

    // full attack loss w.r.t. the latent, under a non-trivial transform
    let attack = AttackConfig::default();
    let view = set.bundles[0].attack_view()?;
    let plan = ViewPlan::new(&view, attack.granularity)?;
    let transform = ObjectTransform {
        scale: 0.95,
        rotation_deg: 4.0,
        shift: [1.5, -0.5],
        brightness: 0.03,
        noise_sigma: 0.01,
        noise_seed: 3,
    };
    let scene = ScenePlan::new(&plan.scene(&set.bundles[0].backgrounds[0])?, &transform)?;
    let cells = attack.granularity;
    let latent: Vec<f64> = (0..cells * cells * 3).map(|_| rng.random_range(-1.5..1.5)).collect();
    let report = check_gradients(
        |t, v| record_step(t, v[0], &plan, &scene, &set.detector, class, &attack).total,
        &[(Shape::image(cells, cells, 3), latent)],
        cfg,
    );
    out.push(from_report("attack loss / latent", &report));
    Ok(out)
}

/// Every control-point file under `dir` (recursively) interpolates exactly;
/// files named `affine*` or `identity*` must also have no bending.
pub fn tps_checks(dir: &Path) -> Result<Vec<DiagCheck>> {
    let mut files = Vec::new();
    collect_control_files(dir, &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingFile {
            path: dir.join("*.txt"),
        });
    }
    let mut out = Vec::new();
    for path in files {
        let cps = ControlPointSet::load(&path)?;
        out.push(tps_check(&path.display().to_string(), &cps, &path)?);
    }
    Ok(out)
}

fn tps_check(name: &str, cps: &ControlPointSet, path: &Path) -> Result<DiagCheck> {
    let model = fit_tps(cps, 0.0)?;
    let worst = cps
        .source()
        .iter()
        .zip(cps.target())
        .map(|(s, t)| apply_tps(&model, *s).distance(t))
        .fold(0.0, f64::max);
    let stem = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let flat = stem.starts_with("affine") || stem.starts_with("identity");
    let bend = model.max_abs_weight();
    let passed = worst <= 1e-6 && (!flat || bend < 1e-8);
    Ok(DiagCheck::new(
        name,
        passed,
        format!("{} controls, worst residual {worst:.2e} px, max |w| {bend:.2e}", cps.len()),
    ))
}

fn collect_control_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_control_files(&path, out)?;
        } else if path.extension().is_some_and(|x| x == "txt") {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name == "controls.txt" || path.parent().is_some_and(|p| p.ends_with("tps")) {
                out.push(path);
            }
        }
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs a shrunken copy of every pipeline stage and returns the digest of
/// each stage's output text.
pub fn pipeline_digests(seed: u64) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let tps = fit_tps(&view_controls(10.0), 0.0)?;
    out.push(("tps model".to_string(), sha256_hex(tps.to_text().as_bytes())));

    let color_cfg = ColorTrainConfig {
        epochs: 30,
        seed,
        ..ColorTrainConfig::default()
    };
    let data = CaptureLaw::ambient(0).synthesize_random(128, seed);
    let (color, _) = train_color_model(&data, &color_cfg)?;
    out.push(("color model".to_string(), sha256_hex(color.to_text().as_bytes())));

    let scenes = detector_scenes(24, seed)?;
    let det_cfg = DetectorTrainConfig {
        epochs: 2,
        channels: [4, 8, 8],
        seed,
        ..DetectorTrainConfig::default()
    };
    let (detector, _) = train_toy_detector(&scenes, &det_cfg)?;
    out.push(("detector".to_string(), sha256_hex(detector.to_text().as_bytes())));

    let backgrounds = vec![background(seed), background(seed + 1)];
    let set = FixtureSet {
        bundles: view_bundles(&color, &backgrounds),
        ambients: vec![AmbientModel {
            label: "low".into(),
            color: color.clone(),
        }],
        detector,
        heldout: backgrounds.clone(),
    };
    let attack = AttackConfig {
        iterations: 6,
        checkpoint_every: 3,
        seed,
        eot: EotSettings {
            samples_per_step: 3,
            ..EotSettings::default()
        },
        ..AttackConfig::default()
    };
    let views = set.views()?;
    let scenes = EotScenes {
        views: views.clone(),
        backgrounds,
    };
    let initial = PatchParams::mid_gray(attack.granularity, set.bundles[0].meta.patch_size[0], set.bundles[0].meta.patch_size[1])?;
    let outcome = run_attack(&initial, &set.detector, &attack, &scenes)?;
    let mut text = trace_to_csv(&outcome.trace);
    text.push_str(&outcome.patch.to_text());
    out.push(("attack run".to_string(), sha256_hex(text.as_bytes())));

    let spec = SweepSpec {
        frames_per_cell: 2,
        seed,
        ..SweepSpec::default()
    };
    let grid = run_sweep(&views, &outcome.patch, &set.detector, &set.ambients, &Default::default(), &set.heldout, &spec)?;
    out.push(("sweep report".to_string(), sha256_hex(sweep_csv(&grid).as_bytes())));
    Ok(out)
}

/// Runs [`pipeline_digests`] on one thread and on the default pool, and
/// checks every digest matches.
pub fn determinism_checks(seed: u64) -> Result<(Vec<DiagCheck>, Vec<(String, String)>)> {
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
        .install(|| pipeline_digests(seed))?;
    let parallel = pipeline_digests(seed)?;
    let checks = serial
        .iter()
        .zip(&parallel)
        .map(|((name, a), (_, b))| DiagCheck::new(name.clone(), a == b, format!("{} / {}", &a[..16], &b[..16])))
        .collect();
    Ok((checks, parallel))
}
