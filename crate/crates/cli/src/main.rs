//! Command-line front end: fit clouds, evaluate segmentations, check
//! gradients and run the built-in demo.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dsqfit::decoders::MirrorMode;
use dsqfit::fitter::{abstraction_points, gradient_check, toy_instance, GradCheckOptions};
use dsqfit::io::{export_result, load_point_cloud, read_labels, read_points, write_labels, PointCloud, RunConfig};
use dsqfit::metrics::{chamfer, dbi, emd, miou, nmi};
use dsqfit::synthetic::demo_table;
use dsqfit::{fit_batch, fit_shape, Backend, FitConfig, FitResult, LogitInit};
use serde_json::{json, Value};

const THREADS_VAR: &str = "DSQFIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "dsqfit", version, about = "Superquadric shape abstraction and part segmentation of point clouds")]
struct Cli {
    /// Worker threads for batch fits (0 = one per core).
    #[arg(long, global = true, env = THREADS_VAR, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one or more point clouds and export the five outputs.
    Fit(FitArgs),
    /// Compute segmentation and reconstruction metrics from files.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a small instance.
    Gradcheck(GradcheckArgs),
    /// Fit the built-in four-legged table and score it against its labels.
    Demo(DemoArgs),
}

/// Fit settings. Unset flags fall back to the config file, then to the
/// library defaults shown here.
#[derive(Args, Debug, Default, Clone)]
struct FitFlags {
    /// Optimization steps [default: 600].
    #[arg(long)]
    steps: Option<usize>,
    /// Random seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Instance slots M [default: 16].
    #[arg(long)]
    primitives: Option<usize>,
    /// Semantic slots S [default: 6].
    #[arg(long)]
    semantics: Option<usize>,
    /// Feature channels D [default: 32].
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Surface samples per primitive [default: 256].
    #[arg(long)]
    samples: Option<usize>,
    /// Resample every input to this many points [default: keep all].
    #[arg(long)]
    n_points: Option<usize>,
    /// Membership backend: direct or pointwise-mlp [default: direct].
    #[arg(long)]
    backend: Option<Backend>,
    /// Initial direct instance logits: seeded or gaussian [default: seeded].
    #[arg(long)]
    logit_init: Option<LogitInit>,
    /// Mirror selection: straight-through, relaxed or argmax [default: straight-through].
    #[arg(long)]
    mirror_mode: Option<MirrorMode>,
    /// Initial learning rate [default: 0.01].
    #[arg(long)]
    lr_start: Option<f64>,
    /// Final learning rate [default: 0.003].
    #[arg(long)]
    lr_end: Option<f64>,
    /// Decoupled weight decay [default: 0.001].
    #[arg(long)]
    weight_decay: Option<f64>,
    /// A primitive is kept when more than this many points carry its label [default: 20].
    #[arg(long)]
    existence_threshold: Option<usize>,
}

impl FitFlags {
    fn apply(&self, cfg: &mut FitConfig) {
        macro_rules! set {
            ($flag:ident => $field:ident) => {
                if let Some(v) = self.$flag {
                    cfg.$field = v;
                }
            };
        }
        set!(steps => total_steps);
        set!(seed => seed);
        set!(primitives => max_primitives);
        set!(semantics => max_semantics);
        set!(feature_dim => feature_dim);
        set!(samples => samples_per_primitive);
        set!(backend => backend);
        set!(logit_init => logit_init);
        set!(mirror_mode => mirror_mode);
        set!(lr_start => lr_start);
        set!(lr_end => lr_end);
        set!(weight_decay => weight_decay);
        set!(existence_threshold => existence_threshold);
        if self.n_points.is_some() {
            cfg.n_points = self.n_points;
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Input clouds (.xyz, .txt, .pts, .ply, .obj).
    #[arg(long = "input", short = 'i', num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Output directory; one subdirectory per input when fitting several.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    /// TOML config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    fit: FitFlags,
    /// Skip the label files.
    #[arg(long)]
    no_labels: bool,
    /// Skip the OBJ meshes.
    #[arg(long)]
    no_meshes: bool,
    /// Skip report.json.
    #[arg(long)]
    no_report: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predicted labels, one per line.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Ground-truth labels, one per line.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Points the labels refer to (needed by dbi; first cloud for cd and emd).
    #[arg(long)]
    points: Option<PathBuf>,
    /// Second cloud for cd and emd.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Comma-separated subset of miou, nmi, dbi, cd, emd [default: miou,nmi].
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    /// TOML config file supplying `metrics` when the flag is absent.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Cloud to check on; a small synthetic table when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Points of the synthetic cloud.
    #[arg(long, default_value_t = 64)]
    points: usize,
    #[arg(long, default_value_t = 4)]
    primitives: usize,
    #[arg(long, default_value_t = 2)]
    semantics: usize,
    #[arg(long, default_value_t = 8)]
    feature_dim: usize,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    /// Coordinates compared.
    #[arg(long, default_value_t = 200)]
    coordinates: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Include every compared coordinate in the output.
    #[arg(long)]
    entries: bool,
}

#[derive(Args, Debug)]
struct DemoArgs {
    /// Points on the table.
    #[arg(long, default_value_t = 2048)]
    points: usize,
    /// Also write the cloud, its labels and the fit outputs here.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    /// TOML config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    fit: FitFlags,
}

/// Failure of a command with its exit status.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<dsqfit::Error> for Failure {
    fn from(e: dsqfit::Error) -> Self {
        Self {
            code: e.category().exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    dsqfit::Error::Config(message.into()).into()
}

/// Exit status of checks that ran but did not pass.
const CHECK_FAILED: u8 = 1;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("warning: thread pool: {e}");
    }
    let outcome = match cli.command {
        Command::Fit(args) => run_fit(args),
        Command::Eval(args) => run_eval(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::Demo(args) => run_demo(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn print_json(value: &Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON values always serialize"));
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn prepare(cloud: PointCloud, cfg: &FitConfig) -> Result<PointCloud, Failure> {
    Ok(match cfg.n_points {
        Some(n) => cloud.resample(n, cfg.seed)?,
        None => cloud,
    })
}

/// Output directory of each input: `out` itself for a single input,
/// otherwise `out/<stem>` with a numeric suffix on repeated stems.
fn output_dirs(out: &Path, inputs: &[PathBuf]) -> Vec<PathBuf> {
    if inputs.len() == 1 {
        return vec![out.to_path_buf()];
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    inputs
        .iter()
        .map(|p| {
            let stem = p.file_stem().map_or_else(|| "cloud".to_string(), |s| s.to_string_lossy().into_owned());
            let n = seen.entry(stem.clone()).or_default();
            *n += 1;
            if *n == 1 {
                out.join(stem)
            } else {
                out.join(format!("{stem}_{n}"))
            }
        })
        .collect()
}

fn run_fit(args: FitArgs) -> Result<(), Failure> {
    let mut run = load_config(args.config.as_deref())?;
    args.fit.apply(&mut run.fit);
    if !args.inputs.is_empty() {
        run.inputs = args.inputs;
    }
    if args.out.is_some() {
        run.out = args.out;
    }
    run.export.labels &= !args.no_labels;
    run.export.meshes &= !args.no_meshes;
    run.export.report &= !args.no_report;
    run.validate()?;
    if run.inputs.is_empty() {
        return Err(usage("no input clouds given (use --input or `inputs` in the config file)"));
    }
    let out = run.out.clone().ok_or_else(|| usage("no output directory given (use --out or `out` in the config file)"))?;
    let cfg = run.fit.clone();
    cfg.validate()?;

    let dirs = output_dirs(&out, &run.inputs);
    let mut errors: Vec<Failure> = Vec::new();
    let mut clouds: Vec<(usize, PointCloud)> = Vec::new();
    for (i, path) in run.inputs.iter().enumerate() {
        match load_point_cloud(path).map_err(Failure::from).and_then(|c| prepare(c, &cfg)) {
            Ok(c) => clouds.push((i, c)),
            Err(f) => {
                eprintln!("{}: {}", path.display(), f.message);
                errors.push(f);
            }
        }
    }

    let start = Instant::now();
    let results: Vec<dsqfit::Result<FitResult>> = if run.inputs.len() == 1 {
        clouds.iter().map(|(_, c)| fit_shape(&c.points, &cfg)).collect()
    } else {
        let points: Vec<_> = clouds.iter().map(|(_, c)| c.points.clone()).collect();
        fit_batch(&points, &cfg)
    };

    for ((i, cloud), result) in clouds.iter().zip(results) {
        let path = &run.inputs[*i];
        let exported = result.and_then(|r| {
            let used = FitConfig { seed: r.seed, ..cfg.clone() };
            export_result(&r, cloud, &used, &dirs[*i], &run.export)?;
            Ok(r)
        });
        match exported {
            Ok(r) => {
                eprintln!(
                    "{}: {} points, {} primitives kept, loss {:.5}, {:.1} s -> {}",
                    path.display(),
                    cloud.len(),
                    r.kept().len(),
                    r.final_loss.total,
                    r.elapsed_seconds,
                    dirs[*i].display()
                );
                if let Some(d) = &r.diagnostic {
                    eprintln!("{}: stopped early: {d}", path.display());
                }
            }
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                errors.push(e.into());
            }
        }
    }
    eprintln!("{} of {} clouds fitted in {:.1} s", run.inputs.len() - errors.len(), run.inputs.len(), start.elapsed().as_secs_f64());
    match errors.into_iter().next() {
        Some(first) => Err(first),
        None => Ok(()),
    }
}

fn run_eval(args: EvalArgs) -> Result<(), Failure> {
    let run = load_config(args.config.as_deref())?;
    let mut metrics = if args.metrics.is_empty() { run.metrics } else { args.metrics };
    if metrics.is_empty() {
        metrics = vec!["miou".into(), "nmi".into()];
    }
    let need = |p: &Option<PathBuf>, flag: &str, metric: &str| -> Result<PathBuf, Failure> {
        p.clone().ok_or_else(|| usage(format!("metric {metric} needs --{flag}")))
    };
    let mut out = serde_json::Map::new();
    for metric in &metrics {
        let name = metric.trim().to_ascii_lowercase();
        let value = match name.as_str() {
            "miou" | "nmi" => {
                let pred = read_labels(&need(&args.pred, "pred", &name)?)?;
                let gt = read_labels(&need(&args.gt, "gt", &name)?)?;
                if name == "miou" {
                    miou(&pred, &gt)?
                } else {
                    nmi(&pred, &gt)?
                }
            }
            "dbi" => {
                let points = read_points(&need(&args.points, "points", &name)?)?;
                let pred = read_labels(&need(&args.pred, "pred", &name)?)?;
                dbi(&points, &pred)?
            }
            "cd" | "emd" => {
                let a = read_points(&need(&args.points, "points", &name)?)?;
                let b = read_points(&need(&args.reference, "reference", &name)?)?;
                if name == "cd" {
                    chamfer(&a, &b)?
                } else {
                    emd(&a, &b)?
                }
            }
            other => return Err(usage(format!("unknown metric `{other}` (expected miou, nmi, dbi, cd or emd)"))),
        };
        out.insert(name, json!(value));
    }
    print_json(&Value::Object(out));
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    let cloud = match &args.input {
        Some(path) => load_point_cloud(path)?,
        None => PointCloud::from_raw(demo_table(args.points, args.seed).points, None, dsqfit::fitter::MIN_POINTS)?,
    };
    let cfg = FitConfig {
        max_primitives: args.primitives,
        max_semantics: args.semantics,
        feature_dim: args.feature_dim,
        samples_per_primitive: args.samples,
        seed: args.seed,
        ..Default::default()
    };
    cfg.validate()?;
    let opts = GradCheckOptions {
        coordinates: args.coordinates,
        tolerance: args.tolerance,
        seed: args.seed,
        ..Default::default()
    };
    let state = toy_instance(&cloud.points, &cfg);
    let mut report = gradient_check(&state, &cloud.points, &cfg, &opts)?;
    if !args.entries {
        report.entries.clear();
    }
    print_json(&serde_json::to_value(&report).map_err(dsqfit::Error::from)?);
    if report.passed {
        Ok(())
    } else {
        Err(Failure {
            code: CHECK_FAILED,
            message: format!("gradient check failed: max relative error {:.3e}", report.max_rel_error),
        })
    }
}

/// Number of legs whose majority slot is distinct, kept, and shares its
/// repeat semantic with the most other legs.
fn legs_sharing_semantic(result: &FitResult, gt_instances: &[usize], slots: usize) -> usize {
    let mut majority: Vec<usize> = (1..5)
        .map(|leg| {
            let mut counts = vec![0usize; slots];
            for (g, &s) in gt_instances.iter().zip(&result.instance_labels) {
                if *g == leg {
                    counts[s] += 1;
                }
            }
            (0..slots).max_by_key(|&m| counts[m]).unwrap_or(0)
        })
        .filter(|&m| result.existence[m])
        .collect();
    majority.sort_unstable();
    majority.dedup();
    let mut per_semantic: BTreeMap<usize, usize> = BTreeMap::new();
    for m in majority {
        *per_semantic.entry(result.repeat[m]).or_default() += 1;
    }
    per_semantic.values().copied().max().unwrap_or(0)
}

fn run_demo(args: DemoArgs) -> Result<(), Failure> {
    let mut run = load_config(args.config.as_deref())?;
    args.fit.apply(&mut run.fit);
    let cfg = FitConfig { n_points: None, ..run.fit };
    cfg.validate()?;
    let shape = demo_table(args.points, cfg.seed);
    let cloud = PointCloud::from_raw(shape.points.clone(), None, dsqfit::fitter::MIN_POINTS)?;
    let r = fit_shape(&cloud.points, &cfg)?;
    eprintln!("demo fit: {} points, {} steps, {:.1} s", cloud.len(), cfg.total_steps, r.elapsed_seconds);

    let cd = |theta| -> Result<f64, Failure> {
        let pts = abstraction_points(&r, theta, cfg.samples_per_primitive, cfg.seed)?;
        Ok(if pts.is_empty() { f64::INFINITY } else { chamfer(&pts, &cloud.points)? })
    };
    let summary = json!({
        "seed": cfg.seed,
        "points": cloud.len(),
        "steps": cfg.total_steps,
        "kept_primitives": r.kept().len(),
        "final_loss": r.final_loss.total,
        "cd_instance": cd(&r.theta_ins)?,
        "cd_semantic": cd(&r.theta_sem)?,
        "cd_repeatable": cd(&r.theta_rep)?,
        "instance_miou": miou(&r.instance_labels, &shape.instance_labels)?,
        "semantic_miou": miou(&r.semantic_labels, &shape.semantic_labels)?,
        "semantic_nmi": nmi(&r.semantic_labels, &shape.semantic_labels)?,
        "legs_sharing_semantic": legs_sharing_semantic(&r, &shape.instance_labels, cfg.max_primitives),
        "diagnostic": r.diagnostic,
    });

    if let Some(out) = &args.out {
        export_result(&r, &cloud, &cfg, out, &run.export)?;
        let xyz: String = shape.points.iter().map(|p| format!("{:.17e} {:.17e} {:.17e}\n", p.x, p.y, p.z)).collect();
        let path = out.join("table.xyz");
        std::fs::write(&path, xyz).map_err(|e| Failure {
            code: dsqfit::error::ErrorCategory::Io.exit_code() as u8,
            message: format!("{}: {e}", path.display()),
        })?;
        write_labels(&out.join("table_instance.labels"), &shape.instance_labels)?;
        write_labels(&out.join("table_semantic.labels"), &shape.semantic_labels)?;
        let summary_path = out.join("demo.json");
        std::fs::write(&summary_path, serde_json::to_string_pretty(&summary).expect("JSON values always serialize")).map_err(|e| Failure {
            code: dsqfit::error::ErrorCategory::Io.exit_code() as u8,
            message: format!("{}: {e}", summary_path.display()),
        })?;
    }
    print_json(&summary);
    Ok(())
}
