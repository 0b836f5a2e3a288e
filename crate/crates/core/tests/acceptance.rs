//! Acceptance suite. Runs every criterion against the shipped fixture in
//! `fixtures/`, prints one PASS/FAIL line per criterion, and exits non-zero
//! if any failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use projforge::attack::{max_intra_cell_deviation, run_attack, trace_to_csv, write_run_dir, AttackConfig, AttackOutcome, PatchParams};
use projforge::autodiff::GradCheckConfig;
use projforge::color::{constant_baseline_l1, mean_l1, predict_color, train_color_model, CaptureLaw, ColorTrainConfig};
use projforge::compositor::{project_patch, ObjectTransform, ProjectionOperands, ProjectionPlan, ScenePlan};
use projforge::detector::{detection_loss, DetectorThreshold};
use projforge::diag::{determinism_checks, gradient_checks, tps_checks};
use projforge::eval::{compute_omdr, run_sweep, sweep_csv, SweepGrid, SweepSpec};
use projforge::fixtures::{build_fixtures, fixture_sequence, load_fixtures, write_fixtures, FixtureConfig, FixtureSet};
use projforge::synth::PATCH_SIZE;
use projforge::tps::{apply_tps, fit_tps, ControlPointSet};
use projforge::{load_image, sample_bilinear, ImageBuffer, Point2};

/// Seed of the frame jitter in the evaluation sequence.
const SEQUENCE_SEED: u64 = 5;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Verdict) -> Verdict {
    let start = Instant::now();
    let mut v = f();
    let took = start.elapsed();
    v.detail = format!("{} [{:.2}s]", v.detail, took.as_secs_f64());
    if let Some(limit) = limit {
        if took > limit {
            v.passed = false;
            v.detail = format!("{} exceeds {}s", v.detail, limit.as_secs());
        }
    }
    v
}

fn tps_exactness() -> Verdict {
    let dir = fixture_dir();
    let checks = match tps_checks(&dir) {
        Ok(c) => c,
        Err(e) => return verdict(false, e.to_string()),
    };
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.line()).collect();
    let affine = ControlPointSet::load(dir.join("tps/affine.txt")).and_then(|c| fit_tps(&c, 0.0));
    let bend = affine.map(|m| m.max_abs_weight()).unwrap_or(f64::INFINITY);
    let has_checker = checks.iter().any(|c| c.name.ends_with("checkerboard.txt"));
    verdict(
        failed.is_empty() && has_checker && bend < 1e-8,
        format!(
            "{} control sets, checkerboard included: {has_checker}, affine max |w| {bend:.1e}{}",
            checks.len(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(" | ")) }
        ),
    )
}

fn gradient_integrity(set: &FixtureSet) -> Verdict {
    let cfg = GradCheckConfig { samples: 50, ..GradCheckConfig::default() };
    match gradient_checks(set, &cfg) {
        Ok(checks) => {
            let enough = checks.iter().all(|c| c.detail.starts_with("50 coordinates"));
            verdict(
                checks.len() == 4 && enough && checks.iter().all(|c| c.passed),
                checks.iter().map(|c| c.line()).collect::<Vec<_>>().join("; "),
            )
        }
        Err(e) => verdict(false, e.to_string()),
    }
}

fn color_fit() -> Verdict {
    let law = CaptureLaw::SEPARABLE;
    let train = law.synthesize_random(512, 7);
    let heldout = law.synthesize_random(128, 8);
    let cfg = ColorTrainConfig { seed: 7, ..ColorTrainConfig::default() };
    match train_color_model(&train, &cfg) {
        Ok((model, _)) => {
            let l1 = mean_l1(&model, &heldout);
            let base = constant_baseline_l1(&heldout);
            verdict(
                l1 <= 0.02 && base >= 5.0 * l1,
                format!("held-out L1 {l1:.5} (limit 0.02), constant predictor {base:.4}, ratio {:.1}x", base / l1),
            )
        }
        Err(e) => verdict(false, e.to_string()),
    }
}

/// Per-pixel evaluation of the projection straight from the TPS, bilinear
/// sampling and the color model, without the precomputed operators.
fn brute_force_projection(ops: &ProjectionOperands, x: &ImageBuffer, delta: &ImageBuffer) -> ImageBuffer {
    let reverse = ops.tps.reverse().expect("fixture controls are invertible");
    ImageBuffer::from_fn(x.height(), x.width(), |i, j| {
        let q = apply_tps(reverse, Point2::new(i as f64, j as f64));
        let m = sample_bilinear(&ops.patch_shape, q)[0].clamp(0.0, 1.0);
        let xv = x.pixel(i, j);
        let lit = if m > 0.0 {
            let d = sample_bilinear(delta, q).map(|v| v.clamp(0.0, 1.0));
            predict_color(&ops.color, xv.map(|v| m * v), d)
        } else {
            [0.0; 3]
        };
        std::array::from_fn(|k| ((1.0 - m) * xv[k] + lit[k]).clamp(0.0, 1.0))
    })
}

fn compositor_identities(set: &FixtureSet) -> Verdict {
    let dir = fixture_dir().join("compositor");
    let loaded = (|| -> projforge::Result<_> {
        let x = load_image(dir.join("object.ppm"))?;
        let delta = load_image(dir.join("delta.ppm"))?;
        let tps = fit_tps(&ControlPointSet::load(dir.join("controls.txt"))?, 0.0)?;
        Ok((x, delta, tps))
    })();
    let (x, delta, tps) = match loaded {
        Ok(v) => v,
        Err(e) => return verdict(false, e.to_string()),
    };
    let color = set.ambients[0].color.clone();
    let full = ProjectionOperands {
        tps: tps.clone(),
        color: color.clone(),
        patch_shape: ImageBuffer::filled(delta.height(), delta.width(), 1.0),
    };
    let empty = ProjectionOperands {
        patch_shape: ImageBuffer::filled(delta.height(), delta.width(), 0.0),
        ..full.clone()
    };
    let (blank, _) = project_patch(&empty, &x, &delta).expect("zero footprint renders");
    let zero_ok = blank.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let (out, _) = project_patch(&full, &x, &delta).expect("fixture renders");
    let mask = ProjectionPlan::new(&full, &x).unwrap().mask().clone();
    let outside = mask.data().iter().filter(|&&m| m == 0.0).count() / 3;
    let untouched = mask
        .data()
        .iter()
        .zip(out.data().iter().zip(x.data()))
        .all(|(m, (o, v))| *m != 0.0 || o.to_bits() == v.to_bits());
    let in_range = out.data().iter().all(|v| (0.0..=1.0).contains(v));
    let oracle = brute_force_projection(&full, &x, &delta);
    let gap = out.max_abs_diff(&oracle);
    let lit = mask.data().iter().filter(|&&m| m > 0.0).count() / 3;
    verdict(
        zero_ok && untouched && in_range && gap <= 1e-10 && lit > 0 && outside > 0,
        format!(
            "M=0 bitwise {zero_ok}, {outside} unmasked pixels unchanged {untouched}, range ok {in_range}, oracle gap {gap:.1e} over {lit} lit pixels"
        ),
    )
}

/// Mean J over every view and optimizer background at the fixture pose.
fn mean_detection_loss(set: &FixtureSet, patch: &PatchParams) -> projforge::Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for b in &set.bundles {
        let view = b.attack_view()?;
        let patched = ProjectionPlan::new(&view.operands, &view.object)?.render(&patch.delta())?;
        for i in 0..b.backgrounds.len() {
            let plan = ScenePlan::new(&b.scene(i)?, &ObjectTransform::identity())?;
            total += detection_loss(&set.detector, &plan.render(&patched)?, "car")?.value();
            n += 1;
        }
    }
    Ok(total / n as f64)
}

fn run_fixture_attack(set: &FixtureSet) -> projforge::Result<AttackOutcome> {
    let cfg = AttackConfig::default();
    let initial = PatchParams::mid_gray(cfg.granularity, PATCH_SIZE, PATCH_SIZE)?;
    run_attack(&initial, &set.detector, &cfg, &set.eot_scenes()?)
}

fn attack_efficacy(set: &FixtureSet, outcome: &AttackOutcome) -> Verdict {
    let thr = DetectorThreshold::default();
    let result = (|| -> projforge::Result<Verdict> {
        let initial = PatchParams::mid_gray(10, PATCH_SIZE, PATCH_SIZE)?;
        let j0 = mean_detection_loss(set, &initial)?;
        let j1 = mean_detection_loss(set, &outcome.patch)?;
        let color = &set.ambients[0].color;
        let (attacked, benign) = fixture_sequence(set, &outcome.patch, color, SEQUENCE_SEED)?;
        let a = compute_omdr(&attacked, &set.detector, &thr)?;
        let b = compute_omdr(&benign, &set.detector, &thr)?;
        let detection_rate = 1.0 - b.omdr;
        Ok(verdict(
            outcome.trace.len() == 500 && detection_rate >= 0.95 && j1 <= 0.5 * j0 && a.omdr >= 0.5 && b.omdr <= 0.05,
            format!(
                "benign detection {:.0}% at 0.6, mean J {j0:.4} -> {j1:.4} ({:.0}%), OMDR attacked {:.2} vs benign {:.2} over {} frames",
                100.0 * detection_rate,
                100.0 * j1 / j0,
                a.omdr,
                b.omdr,
                a.total
            ),
        ))
    })();
    result.unwrap_or_else(|e| verdict(false, e.to_string()))
}

fn fixture_sweep(set: &FixtureSet, patch: &PatchParams) -> projforge::Result<SweepGrid> {
    run_sweep(
        &set.views()?,
        patch,
        &set.detector,
        &set.ambients,
        &DetectorThreshold::default(),
        &set.heldout,
        &SweepSpec::default(),
    )
}

fn trend(set: &FixtureSet, patch: &PatchParams) -> Verdict {
    let grid = match fixture_sweep(set, patch) {
        Ok(g) => g,
        Err(e) => return verdict(false, e.to_string()),
    };
    let worse: Vec<String> = grid
        .cells
        .iter()
        .filter(|c| c.attack.omdr < c.benign.omdr)
        .map(|c| format!("{}/{}/{}", c.tag.distance, c.tag.angle, c.tag.ambient))
        .collect();
    let by_ambient = grid.attack_by_ambient();
    let ordered = by_ambient.windows(2).all(|w| w[1].1 <= w[0].1);
    verdict(
        grid.cells.len() == 45 && worse.is_empty() && ordered,
        format!(
            "{} cells, attack below benign in {} cells, mean OMDR by ambient {}, benign mean {:.3}",
            grid.cells.len(),
            worse.len(),
            by_ambient
                .iter()
                .map(|(l, m)| format!("{l} {m:.3}"))
                .collect::<Vec<_>>()
                .join(" >= "),
            grid.mean_benign()
        ),
    )
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn determinism(set: &FixtureSet, outcome: &AttackOutcome) -> Verdict {
    let result = (|| -> projforge::Result<Verdict> {
        let mut notes = Vec::new();
        // every stage, one thread against the full pool
        let (checks, _) = determinism_checks(7)?;
        let stages_ok = checks.iter().all(|c| c.passed);
        notes.push(format!("{} stage digests match across thread counts: {stages_ok}", checks.len()));

        // regenerating the fixture reproduces the shipped files
        let cfg = FixtureConfig::default();
        let tmp = tempfile::tempdir().map_err(|e| projforge::Error::InvalidConfig(e.to_string()))?;
        write_fixtures(&build_fixtures(&cfg)?, &cfg, tmp.path())?;
        let shipped = fixture_dir();
        let mut differ = Vec::new();
        let ours = files_under(tmp.path());
        for p in &ours {
            let rel = p.strip_prefix(tmp.path()).unwrap();
            if fs::read(p).ok() != fs::read(shipped.join(rel)).ok() {
                differ.push(rel.display().to_string());
            }
        }
        notes.push(format!("{} regenerated fixture files, {} differ", ours.len(), differ.len()));

        // the attack run and sweep report repeat byte for byte
        let again = run_fixture_attack(set)?;
        let same_run = trace_to_csv(&again.trace) == trace_to_csv(&outcome.trace) && again.patch.to_text() == outcome.patch.to_text();
        let a = tmp.path().join("run_a");
        let b = tmp.path().join("run_b");
        write_run_dir(&a, "{}\n", outcome)?;
        write_run_dir(&b, "{}\n", &again)?;
        let dirs_same = files_under(&a)
            .iter()
            .all(|p| fs::read(p).ok() == fs::read(b.join(p.strip_prefix(&a).unwrap())).ok());
        let sweep_same = sweep_csv(&fixture_sweep(set, &outcome.patch)?) == sweep_csv(&fixture_sweep(set, &again.patch)?);
        notes.push(format!("attack trace and patch repeat: {same_run}, run dirs identical: {dirs_same}, sweep CSV repeats: {sweep_same}"));
        Ok(verdict(
            stages_ok && differ.is_empty() && same_run && dirs_same && sweep_same,
            format!("{}{}", notes.join("; "), if differ.is_empty() { String::new() } else { format!("; differing: {}", differ.join(", ")) }),
        ))
    })();
    result.unwrap_or_else(|e| verdict(false, e.to_string()))
}

fn granularity_and_box(outcome: &AttackOutcome) -> Verdict {
    let cells = AttackConfig::default().granularity;
    let mut worst_spread: f64 = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut file_spread: f64 = 0.0;
    let tmp = tempfile::tempdir().unwrap();
    write_run_dir(tmp.path(), "{}\n", outcome).unwrap();
    for c in &outcome.checkpoints {
        worst_spread = worst_spread.max(max_intra_cell_deviation(&c.delta, cells).unwrap());
        for &v in c.delta.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let ppm = load_image(tmp.path().join(format!("patch_iter_{:04}.ppm", c.iteration))).unwrap();
        file_spread = file_spread.max(max_intra_cell_deviation(&ppm, cells).unwrap());
        let reloaded = PatchParams::load(tmp.path().join(format!("patch_iter_{:04}.txt", c.iteration))).unwrap();
        worst_spread = worst_spread.max(reloaded.delta().max_abs_diff(&c.delta));
    }
    verdict(
        outcome.checkpoints.len() == 6 && worst_spread == 0.0 && file_spread == 0.0 && lo > 0.0 && hi < 1.0,
        format!(
            "{} checkpoints, intra-cell spread {worst_spread} (files {file_spread}), values in [{lo:.4}, {hi:.4}]",
            outcome.checkpoints.len()
        ),
    )
}

fn main() {
    let set = load_fixtures(&fixture_dir()).expect("shipped fixture loads");
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    results.push(("1 TPS exactness", timed(Some(Duration::from_secs(1)), tps_exactness)));
    results.push(("2 gradient integrity", timed(Some(Duration::from_secs(30)), || gradient_integrity(&set))));
    results.push(("3 color-model fit", timed(Some(Duration::from_secs(60)), color_fit)));
    results.push(("4 compositor identities", timed(Some(Duration::from_secs(5)), || compositor_identities(&set))));

    let start = Instant::now();
    let outcome = run_fixture_attack(&set).expect("fixture attack runs");
    let attack_time = start.elapsed();
    let mut efficacy = timed(Some(Duration::from_secs(600).saturating_sub(attack_time)), || attack_efficacy(&set, &outcome));
    efficacy.detail = format!("{} + attack run [{:.2}s]", efficacy.detail, attack_time.as_secs_f64());
    results.push(("5 attack efficacy", efficacy));
    results.push(("6 trend reproduction", timed(Some(Duration::from_secs(600)), || trend(&set, &outcome.patch))));
    results.push(("7 determinism", timed(None, || determinism(&set, &outcome))));
    results.push(("8 grid granularity and box", timed(None, || granularity_and_box(&outcome))));

    println!("acceptance (attack run {:.2}s)", attack_time.as_secs_f64());
    let mut failed = 0;
    for (name, v) in &results {
        println!("{} criterion {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.passed);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
