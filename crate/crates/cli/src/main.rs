//! `projforge`: fit the geometry and color models, train the toy detector,
//! optimize a projected patch, and evaluate it.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use projforge::attack::{run_attack, write_run_dir, AttackStatus, PatchParams};
use projforge::bundle::{load_bundles, SceneBundle};
use projforge::color::{constant_baseline_l1, mean_l1, train_color_model, CaptureLaw, ColorDataset, ColorModel};
use projforge::config::RunConfig;
use projforge::detector::{load_labeled_dir, train_toy_detector, ToyDetector};
use projforge::diag::{determinism_checks, gradient_checks, tps_checks, DiagCheck};
use projforge::eval::{emit_report, run_sweep, AmbientModel};
use projforge::fixtures::{build_fixtures, load_backgrounds, load_fixtures, write_fixtures, AMBIENT_LABELS};
use projforge::synth::detector_scenes;
use projforge::tps::{apply_tps, fit_tps, ControlPointSet, TpsModel};
use projforge::Error;

const DEFAULT_FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures");

#[derive(Parser, Debug)]
#[command(name = "projforge", version, about = "Simulated adversarial projection attacks on a toy detector")]
struct Cli {
    /// JSON file overriding the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a TPS model to a control-point file.
    FitTps {
        controls: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides tps.regularization.
        #[arg(long)]
        regularization: Option<f64>,
        /// Reload the saved model and check it reproduces every target.
        #[arg(long)]
        verify: bool,
    },
    /// Train the projector color model.
    FitColor {
        /// Dataset file; omit when synthesizing.
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Generate a capture dataset from a named law and seed instead.
        #[arg(long, num_args = 2, value_names = ["LAW", "SEED"])]
        synthesize: Option<Vec<String>>,
    },
    /// Train the toy detector on labeled scenes.
    TrainDetector {
        /// Directory of `*.ppm` scenes with `.txt` sidecars; omit with --synthesize.
        scenes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train on generated scenes (count and seed from the config).
        #[arg(long)]
        synthesize: bool,
    },
    /// Optimize a projected patch against the detector.
    TrainPatch {
        /// One scene bundle, or a directory of bundles.
        bundles: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distance / angle / ambient sweep with and without the patch.
    Evaluate {
        /// Directory of scene bundles, one per angle.
        bundles: PathBuf,
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        /// Directory of ambient color models, `<label>.txt` each.
        #[arg(long)]
        ambient_dir: Option<PathBuf>,
        /// Extra ambient model as LABEL=PATH.
        #[arg(long = "ambient", value_name = "LABEL=PATH")]
        ambient: Vec<String>,
        /// Evaluation backgrounds; defaults to the first bundle's.
        #[arg(long)]
        backgrounds: Option<PathBuf>,
        /// Comma-separated ambient labels to evaluate.
        #[arg(long, value_delimiter = ',')]
        ambients: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-checks; exits 0 only if every check passes.
    Diag {
        target: DiagTarget,
        #[arg(long, default_value = DEFAULT_FIXTURES)]
        fixtures: PathBuf,
    },
    /// Regenerate the bundled fixture set.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum DiagTarget {
    Gradients,
    Tps,
    Determinism,
}

enum Failure {
    Input(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    cfg: RunConfig,
    quiet: bool,
}

impl Ctx {
    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var("PROJFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Input(format!("PROJFORGE_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Input(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Outcome {
    configure_threads()?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let ctx = Ctx { cfg, quiet: cli.quiet };
    match cli.command {
        Command::FitTps {
            controls,
            out,
            regularization,
            verify,
        } => fit_tps_cmd(ctx, &controls, &out, regularization, verify),
        Command::FitColor { dataset, out, synthesize } => fit_color_cmd(&ctx, dataset.as_deref(), &out, synthesize),
        Command::TrainDetector { scenes, out, synthesize } => train_detector_cmd(&ctx, scenes.as_deref(), &out, synthesize),
        Command::TrainPatch { bundles, detector, out } => train_patch_cmd(&ctx, &bundles, &detector, &out),
        Command::Evaluate {
            bundles,
            patch,
            detector,
            ambient_dir,
            ambient,
            backgrounds,
            ambients,
            out,
        } => {
            let mut ctx = ctx;
            if let Some(labels) = ambients {
                ctx.cfg.sweep.ambients = labels;
            }
            let inputs = EvalInputs {
                bundles,
                patch,
                detector,
                ambient_dir,
                ambient,
                backgrounds,
            };
            evaluate_cmd(&ctx, &inputs, &out)
        }
        Command::Diag { target, fixtures } => diag_cmd(&ctx, target, &fixtures),
        Command::Fixtures { out } => {
            let set = build_fixtures(&ctx.cfg.fixtures)?;
            write_fixtures(&set, &ctx.cfg.fixtures, &out)?;
            ctx.cfg.save(out.join("config.json"))?;
            ctx.say(format!("wrote fixtures to {}", out.display()));
            Ok(())
        }
    }
}

/// Single-file outputs get the resolved config beside them.
fn save_config_beside(cfg: &RunConfig, out: &Path) -> Outcome {
    let mut name = out.as_os_str().to_owned();
    name.push(".config.json");
    cfg.save(PathBuf::from(name))?;
    Ok(())
}

fn create_parent(path: &Path) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::Input(format!("{}: {e}", parent.display())))?;
    }
    Ok(())
}

fn fit_tps_cmd(mut ctx: Ctx, controls: &Path, out: &Path, regularization: Option<f64>, verify: bool) -> Outcome {
    if let Some(r) = regularization {
        ctx.cfg.tps.regularization = r;
        ctx.cfg.validate()?;
    }
    let cps = ControlPointSet::load(controls)?;
    let model = fit_tps(&cps, ctx.cfg.tps.regularization)?;
    create_parent(out)?;
    model.save(out)?;
    save_config_beside(&ctx.cfg, out)?;
    ctx.say(format!(
        "fitted {} controls, max |w| {:.3e}, wrote {}",
        cps.len(),
        model.max_abs_weight(),
        out.display()
    ));
    if verify {
        let saved = TpsModel::load(out)?;
        let worst = cps
            .source()
            .iter()
            .zip(cps.target())
            .map(|(s, t)| apply_tps(&saved, *s).distance(t))
            .fold(0.0, f64::max);
        ctx.say(format!("verify: worst control residual {worst:.3e} px"));
        if worst > 1e-6 {
            return Err(Failure::Numerical(format!(
                "saved model misses a control by {worst:.3e} px (limit 1e-6)"
            )));
        }
    }
    Ok(())
}

fn fit_color_cmd(ctx: &Ctx, dataset: Option<&Path>, out: &Path, synthesize: Option<Vec<String>>) -> Outcome {
    let (train, heldout) = match (dataset, synthesize) {
        (Some(_), Some(_)) => return Err(Failure::Input("give a dataset or --synthesize, not both".into())),
        (None, None) => return Err(Failure::Input("a dataset path or --synthesize LAW SEED is required".into())),
        (Some(path), None) => (ColorDataset::load(path)?, None),
        (None, Some(args)) => {
            let law = CaptureLaw::by_name(&args[0]).ok_or_else(|| {
                Failure::Input(format!(
                    "unknown capture law `{}` (separable, ambient-low, ambient-mid, ambient-high)",
                    args[0]
                ))
            })?;
            let seed: u64 = args[1]
                .parse()
                .map_err(|_| Failure::Input(format!("seed `{}` is not an integer", args[1])))?;
            let d = &ctx.cfg.color_data;
            (
                law.synthesize_random(d.train_samples, seed),
                Some(law.synthesize_random(d.heldout_samples, seed.wrapping_add(1))),
            )
        }
    };
    let (model, report) = train_color_model(&train, &ctx.cfg.color)?;
    create_parent(out)?;
    model.save(out)?;
    save_config_beside(&ctx.cfg, out)?;
    ctx.say(format!("train L1 {:.6}", report.final_loss));
    if let Some(h) = heldout {
        ctx.say(format!(
            "held-out L1 {:.6} (constant predictor {:.6})",
            mean_l1(&model, &h),
            constant_baseline_l1(&h)
        ));
    }
    Ok(())
}

fn train_detector_cmd(ctx: &Ctx, scenes: Option<&Path>, out: &Path, synthesize: bool) -> Outcome {
    let data = match (scenes, synthesize) {
        (Some(dir), false) => load_labeled_dir(dir)?,
        (None, true) => detector_scenes(ctx.cfg.detector_data.scenes, ctx.cfg.detector_data.seed)?,
        _ => return Err(Failure::Input("give a scene directory or --synthesize".into())),
    };
    let (det, report) = train_toy_detector(&data, &ctx.cfg.detector)?;
    create_parent(out)?;
    det.save(out)?;
    save_config_beside(&ctx.cfg, out)?;
    ctx.say(format!("trained on {} scenes, final loss {:.6}", data.len(), report.final_loss));
    Ok(())
}

fn bundles_at(path: &Path) -> Result<Vec<SceneBundle>, Failure> {
    if path.join("scene.json").is_file() {
        Ok(vec![SceneBundle::load(path)?])
    } else {
        Ok(load_bundles(path)?)
    }
}

fn train_patch_cmd(ctx: &Ctx, bundles: &Path, detector: &Path, out: &Path) -> Outcome {
    let bundles = bundles_at(bundles)?;
    let det = ToyDetector::load(detector)?;
    let views = bundles.iter().map(SceneBundle::attack_view).collect::<Result<Vec<_>, _>>()?;
    let scenes = projforge::attack::EotScenes {
        views,
        backgrounds: bundles[0].backgrounds.clone(),
    };
    let [h, w] = bundles[0].meta.patch_size;
    let cfg = &ctx.cfg.attack;
    let initial = PatchParams::mid_gray(cfg.granularity, h, w)?;
    let outcome = run_attack(&initial, &det, cfg, &scenes)?;
    write_run_dir(out, &ctx.cfg.to_json(), &outcome)?;
    if let (Some(first), Some(last)) = (outcome.trace.first(), outcome.trace.last()) {
        ctx.say(format!(
            "{} iterations, J {:.6} -> {:.6}, wrote {}",
            outcome.trace.len(),
            first.detection,
            last.detection,
            out.display()
        ));
    } else {
        ctx.say(format!("no iterations run, wrote {}", out.display()));
    }
    match outcome.status {
        AttackStatus::Completed => Ok(()),
        AttackStatus::Aborted { iteration, reason } => Err(Failure::Numerical(format!(
            "attack stopped at iteration {iteration}: {reason}"
        ))),
    }
}

struct EvalInputs {
    bundles: PathBuf,
    patch: PathBuf,
    detector: PathBuf,
    ambient_dir: Option<PathBuf>,
    ambient: Vec<String>,
    backgrounds: Option<PathBuf>,
}

fn ambient_rank(label: &str) -> usize {
    AMBIENT_LABELS.iter().position(|l| *l == label).unwrap_or(AMBIENT_LABELS.len())
}

fn load_ambient_models(dir: Option<&Path>, extra: &[String]) -> Result<Vec<AmbientModel>, Failure> {
    let mut out = Vec::new();
    if let Some(dir) = dir {
        let entries = fs::read_dir(dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        paths.sort_by_key(|p| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
            (ambient_rank(&stem), stem)
        });
        for p in paths {
            let label = p.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
            out.push(AmbientModel {
                label,
                color: ColorModel::load(&p)?,
            });
        }
    }
    for spec in extra {
        let (label, path) = spec
            .split_once('=')
            .ok_or_else(|| Failure::Input(format!("--ambient expects LABEL=PATH, got `{spec}`")))?;
        out.push(AmbientModel {
            label: label.to_string(),
            color: ColorModel::load(path)?,
        });
    }
    if out.is_empty() {
        return Err(Failure::Input("no ambient color models given (--ambient-dir or --ambient)".into()));
    }
    Ok(out)
}

fn evaluate_cmd(ctx: &Ctx, inputs: &EvalInputs, out: &Path) -> Outcome {
    let bundles = bundles_at(&inputs.bundles)?;
    let views = bundles.iter().map(SceneBundle::attack_view).collect::<Result<Vec<_>, _>>()?;
    let patch = PatchParams::load(&inputs.patch)?;
    let det = ToyDetector::load(&inputs.detector)?;
    let ambients = load_ambient_models(inputs.ambient_dir.as_deref(), &inputs.ambient)?;
    let backgrounds = match &inputs.backgrounds {
        Some(dir) => load_backgrounds(dir)?,
        None => bundles[0].backgrounds.clone(),
    };
    let grid = run_sweep(&views, &patch, &det, &ambients, &ctx.cfg.threshold, &backgrounds, &ctx.cfg.sweep)?;
    emit_report(&grid, out)?;
    ctx.cfg.save(out.join("config.json"))?;
    ctx.say(format!(
        "{} cells, mean OMDR with patch {:.4}, without {:.4}",
        grid.cells.len(),
        grid.mean_attack(),
        grid.mean_benign()
    ));
    for (label, m) in grid.attack_by_ambient() {
        ctx.say(format!("  ambient {label}: {m:.4}"));
    }
    Ok(())
}

fn report_checks(ctx: &Ctx, checks: &[DiagCheck]) -> Outcome {
    for c in checks {
        ctx.say(c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("{failed} of {} checks failed", checks.len())))
    }
}

fn diag_cmd(ctx: &Ctx, target: DiagTarget, fixtures: &Path) -> Outcome {
    match target {
        DiagTarget::Gradients => {
            let set = load_fixtures(fixtures)?;
            report_checks(ctx, &gradient_checks(&set, &Default::default())?)
        }
        DiagTarget::Tps => report_checks(ctx, &tps_checks(fixtures)?),
        DiagTarget::Determinism => {
            let seed = ctx.cfg.attack.seed;
            let (checks, digests) = determinism_checks(seed)?;
            for (stage, digest) in &digests {
                ctx.say(format!("{stage}: {digest}"));
            }
            report_checks(ctx, &checks)
        }
    }
}
