//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 data error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{validate_config, EngineConfig, Pooling};
use crate::diffusion::{closed_form, fixed_point_residual, walk_step};
use crate::error::Error;
use crate::features::{extract_pyramid, load_pyramid, save_pyramid, FeaturePyramid};
use crate::grid::{Image, LabelMap, NodeGrid, IGNORE_LABEL};
use crate::manifest::RunManifest;
use crate::metrics::miou;
use crate::netpbm::{read_image, read_labels, write_labels};
use crate::pipeline::{segment, Segmentation};
use crate::seed::{influence, load_pixel_seeds, PixelSeed};
use crate::similarity::{save_transition, transition_row};
use crate::synth::{random_scores, random_transition, sample_pixel_seeds, two_region_image};
use crate::train::{
    fit_instances, grad_check, load_params, save_params, FeatureSource, Instance, Model, Sample,
    TrainConfig, Trainable,
};
use crate::viz::write_heatmap;

#[derive(Debug, Parser)]
#[command(
    name = "seedwalk",
    version,
    about = "Seeded graph-diffusion segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment an image from seeds and write a label map plus a run manifest.
    Segment(SegmentArgs),
    /// Compare iterated walks on one random transition matrix with the direct solve.
    Oracle(OracleArgs),
    /// Write a grayscale heatmap of an intermediate quantity.
    Viz(VizArgs),
    /// Fit cascade weights and the importance head on a directory of examples.
    Train(TrainArgs),
    /// Mean IoU over `*.pred.pgm` / `*.gt.pgm` pairs in a directory.
    Eval(EvalArgs),
    /// Check analytic gradients against central differences on a synthetic instance.
    GradCheck(GradCheckArgs),
    /// Time each phase of a synthetic segmentation.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PoolingArg {
    Average,
    Max,
}

#[derive(Debug, Args)]
struct EngineArgs {
    /// Number of cascade stages.
    #[arg(long, default_value_t = 5)]
    stages: usize,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    /// Pixels per node side.
    #[arg(long, default_value_t = 5)]
    downsample: usize,
    /// Drop the 1/sqrt(d) affinity scaling.
    #[arg(long)]
    no_affinity_scale: bool,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    /// Comma-separated 1-based stages to skip.
    #[arg(long, value_delimiter = ',')]
    skip: Vec<usize>,
    #[arg(long, value_enum, default_value = "average")]
    pooling: PoolingArg,
    /// Class count; inferred from parameters, seeds or labels when absent.
    #[arg(long)]
    classes: Option<usize>,
}

impl EngineArgs {
    fn config(&self, classes: usize) -> Result<EngineConfig, CliError> {
        let cfg = EngineConfig {
            num_stages: self.stages,
            embed_dim: self.embed_dim,
            downsample_factor: self.downsample,
            affinity_scale: !self.no_affinity_scale,
            softmax_temperature: self.temperature,
            standardize_epsilon: self.epsilon,
            skip_stages: self.skip.iter().copied().collect(),
            num_classes: classes,
            pooling: match self.pooling {
                PoolingArg::Average => Pooling::Average,
                PoolingArg::Max => Pooling::Max,
            },
        };
        Ok(validate_config(cfg)?)
    }
}

#[derive(Debug, Args)]
struct InputArgs {
    /// PPM (color) or PGM (gray) image.
    #[arg(long)]
    image: PathBuf,
    /// Seed text file or scribble PGM.
    #[arg(long)]
    seeds: PathBuf,
    /// Trained parameter file; untrained defaults otherwise.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Precomputed feature pyramid to use instead of extraction.
    #[arg(long)]
    pyramid: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Label map output (PGM, one class index per pixel).
    #[arg(long)]
    out: PathBuf,
    /// Manifest output; defaults to the label path with a `.manifest` extension.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Also write the feature pyramid.
    #[arg(long)]
    dump_pyramid: Option<PathBuf>,
    /// Also write each transition matrix as `stage<t>.tmat` in this directory.
    #[arg(long)]
    dump_transitions: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0.5)]
    mu: f64,
    #[arg(long, default_value_t = 80)]
    iters: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VizWhat {
    Scoremap,
    Influence,
    Importance,
    TransitionRow,
    StageTrace,
}

#[derive(Debug, Args)]
struct VizArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, value_enum)]
    what: VizWhat,
    /// Source node for `transition-row`.
    #[arg(long)]
    node: Option<usize>,
    /// 1-based stage; for `stage-trace`, 0 shows the seed.
    #[arg(long)]
    stage: Option<usize>,
    #[arg(long, default_value_t = 0)]
    class: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of `name.ppm`, `name.seeds` and `name.gt.pgm` triples.
    #[arg(long)]
    data: PathBuf,
    /// Parameter file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long)]
    freeze_cascade: bool,
    #[arg(long)]
    freeze_head: bool,
    /// Per-epoch loss, one value per line.
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    classes: usize,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    /// Node grid side.
    #[arg(long, default_value_t = 5)]
    side: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Entries to list, worst first.
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Random stochastic matrices instead of image-derived ones.
    #[arg(long)]
    random_transitions: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Image side in pixels.
    #[arg(long, default_value_t = 160)]
    size: usize,
    #[arg(long, default_value_t = 21)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    downsample: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            // Only flag values feed configuration.
            Error::InvalidConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other),
        }
    }
}

type CliResult = Result<(), CliError>;

/// Parses `argv` (program name first) and runs the subcommand on the process streams.
pub fn cli_dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    dispatch_to(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// [`cli_dispatch`] with explicit output streams.
pub fn dispatch_to<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::Segment(a) => run_segment(a, out),
        Command::Oracle(a) => run_oracle(a, out),
        Command::Viz(a) => run_viz(a, out),
        Command::Train(a) => run_train(a, out),
        Command::Eval(a) => run_eval(a, out),
        Command::GradCheck(a) => run_grad_check(a, out),
        Command::Bench(a) => run_bench(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}\n\nFor more information, try '--help'.");
            1
        }
        Err(CliError::Data(e)) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Emits a line to the output stream, ignoring broken pipes.
macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        let _ = writeln!($out, $($arg)*);
    };
}

struct Loaded {
    image: Image,
    seeds: Vec<PixelSeed>,
    model: Model,
    cfg: EngineConfig,
    pyramid: Option<FeaturePyramid>,
}

fn load_inputs(input: &InputArgs) -> Result<Loaded, CliError> {
    let image = read_image(&input.image)?;
    let seeds = load_pixel_seeds(&input.seeds)?;
    let params = input.params.as_deref().map(load_params).transpose()?;
    let seed_classes = seeds.iter().map(|s| s.class + 1).max().unwrap_or(0);
    let classes = input
        .engine
        .classes
        .or(params.as_ref().map(|m| m.head.classes()))
        .unwrap_or_else(|| seed_classes.max(EngineConfig::default().num_classes));
    let cfg = input.engine.config(classes)?;
    let model = match params {
        Some(m) => {
            if m.params.stages() != cfg.num_stages || m.head.classes() != classes {
                return Err(CliError::Data(Error::DimensionMismatch(format!(
                    "parameter file has {} stages and {} head classes, engine expects {} and {}",
                    m.params.stages(),
                    m.head.classes(),
                    cfg.num_stages,
                    classes
                ))));
            }
            m
        }
        None => Model::new(cfg.num_stages, classes),
    };
    let pyramid = input
        .pyramid
        .as_deref()
        .map(|p| load_pyramid(p, &cfg))
        .transpose()?;
    Ok(Loaded {
        image,
        seeds,
        model,
        cfg,
        pyramid,
    })
}

fn run_loaded(
    l: Loaded,
    keep_trace: bool,
) -> Result<(Segmentation, EngineConfig, Model), CliError> {
    let seg = segment(&l.image, &l.seeds, &l.model, &l.cfg, l.pyramid, keep_trace)?;
    Ok((seg, l.cfg, l.model))
}

fn run_segment(a: SegmentArgs, out: &mut dyn Write) -> CliResult {
    let loaded = load_inputs(&a.input)?;
    let (seg, cfg, model) = run_loaded(loaded, false)?;
    let labels = seg.pixel_labels()?;
    write_labels(&a.out, &labels)?;

    let mut manifest = RunManifest::new(&cfg, &model.params);
    manifest
        .inputs
        .push(("image".into(), a.input.image.clone()));
    manifest
        .inputs
        .push(("seeds".into(), a.input.seeds.clone()));
    if let Some(p) = &a.input.pyramid {
        manifest.inputs.push(("pyramid".into(), p.clone()));
    }
    manifest.params = a.input.params.clone();
    manifest.timings = seg.timings;
    manifest.outputs.push(("labels".into(), a.out.clone()));
    if let Some(path) = &a.dump_pyramid {
        save_pyramid(&seg.pyramid, path)?;
        manifest.outputs.push(("pyramid".into(), path.clone()));
    }
    if let Some(dir) = &a.dump_transitions {
        std::fs::create_dir_all(dir).map_err(|e| Error::from(e).at(dir))?;
        for (t, p) in seg.transitions.iter().enumerate() {
            let path = dir.join(format!("stage{}.tmat", t + 1));
            save_transition(p, &path)?;
            manifest
                .outputs
                .push((format!("transition[{}]", t + 1), path));
        }
    }
    let manifest_path = a
        .manifest
        .unwrap_or_else(|| a.out.with_extension("manifest"));
    manifest.write(&manifest_path)?;
    say!(
        out,
        "segmented {}x{} image on a {}x{} node grid with {} classes",
        labels.grid().height(),
        labels.grid().width(),
        seg.grid.height(),
        seg.grid.width(),
        cfg.num_classes
    );
    say!(out, "labels: {}", a.out.display());
    say!(out, "manifest: {}", manifest_path.display());
    Ok(())
}

fn run_oracle(a: OracleArgs, out: &mut dyn Write) -> CliResult {
    if !(a.mu > 0.0 && a.mu < 1.0) {
        return Err(usage(format!("--mu must lie in (0, 1), got {}", a.mu)));
    }
    if a.n == 0 || a.classes == 0 {
        return Err(usage("--n and --classes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let grid = NodeGrid::new(1, a.n, 1)?;
    let p = random_transition(0, a.n, &mut rng);
    let s = random_scores(grid, a.classes, &mut rng);
    let mut y = s.clone();
    for _ in 0..a.iters {
        y = walk_step(&y, &p, &s, a.mu)?;
    }
    let exact = closed_form(&p, &s, a.mu)?;
    say!(
        out,
        "nodes={} classes={} mu={} iterations={}",
        a.n,
        a.classes,
        a.mu,
        a.iters
    );
    say!(out, "max_deviation={:e}", y.max_abs_diff(&exact));
    say!(
        out,
        "fixed_point_residual={:e}",
        fixed_point_residual(&y, &p, &s, a.mu)?
    );
    say!(out, "geometric_factor={:e}", a.mu.powi(a.iters as i32));
    Ok(())
}

fn run_viz(a: VizArgs, out: &mut dyn Write) -> CliResult {
    let loaded = load_inputs(&a.input)?;
    let grid = NodeGrid::for_image(
        loaded.image.height(),
        loaded.image.width(),
        loaded.cfg.downsample_factor,
    )?;
    let stages = loaded.cfg.num_stages;
    let classes = loaded.cfg.num_classes;
    if matches!(a.what, VizWhat::Scoremap | VizWhat::StageTrace) && a.class >= classes {
        return Err(CliError::Data(Error::ClassOutOfRange {
            class: a.class,
            classes,
        }));
    }
    let node = match (a.what, a.node) {
        (VizWhat::TransitionRow, None) => return Err(usage("--what transition-row needs --node")),
        (VizWhat::TransitionRow, Some(n)) => {
            grid.check_node(n)?;
            n
        }
        _ => 0,
    };
    let stage = match a.what {
        VizWhat::TransitionRow => {
            let t = a.stage.unwrap_or(1);
            if !(1..=stages).contains(&t) {
                return Err(CliError::Data(Error::OutOfBounds {
                    what: "stage",
                    index: t,
                    limit: stages,
                }));
            }
            t
        }
        VizWhat::StageTrace => {
            let t = a.stage.unwrap_or(stages);
            if t > stages {
                return Err(CliError::Data(Error::OutOfBounds {
                    what: "stage",
                    index: t,
                    limit: stages,
                }));
            }
            t
        }
        _ => 0,
    };
    let (seg, _, _) = run_loaded(loaded, a.what == VizWhat::StageTrace)?;
    let column = |m: &crate::grid::ScoreMap| m.values().column(a.class).to_vec();
    let values = match a.what {
        VizWhat::Scoremap => column(&seg.scores),
        VizWhat::Influence => influence(&seg.scores).values,
        VizWhat::Importance => seg.importance.values.clone(),
        VizWhat::TransitionRow => transition_row(&seg.transitions[stage - 1], node, &grid)?
            .iter()
            .copied()
            .collect(),
        VizWhat::StageTrace => {
            // Output after stage `stage`: skipped stages pass their input through.
            let trace = seg.state.trace.as_ref().expect("trace requested");
            let applied = seg.state.applied.iter().filter(|&&t| t < stage).count();
            column(&trace[applied])
        }
    };
    write_heatmap(&a.out, grid.height(), grid.width(), &values)?;
    say!(
        out,
        "wrote {}x{} heatmap to {}",
        grid.height(),
        grid.width(),
        a.out.display()
    );
    Ok(())
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::from(e).at(dir))?;
    let mut paths = entries
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::from(e).at(dir))?;
    paths.sort();
    Ok(paths)
}

fn file_name(path: &Path) -> &str {
    path.file_name().and_then(|n| n.to_str()).unwrap_or("")
}

fn run_train(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    struct Raw {
        image: Image,
        seeds: Vec<PixelSeed>,
        truth: LabelMap,
    }
    let mut raw = Vec::new();
    for path in read_dir_sorted(&a.data)? {
        let Some(stem) = file_name(&path).strip_suffix(".ppm") else {
            continue;
        };
        let seeds_path = [".seeds", ".scribble.pgm"]
            .iter()
            .map(|ext| a.data.join(format!("{stem}{ext}")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::malformed("dataset", format!("no seeds for {stem}")).at(&path))?;
        let truth = read_labels(&a.data.join(format!("{stem}.gt.pgm")))?;
        let image = read_image(&path)?;
        if (truth.grid().height(), truth.grid().width()) != (image.height(), image.width()) {
            return Err(CliError::Data(
                Error::DimensionMismatch("ground truth and image sizes differ".into()).at(&path),
            ));
        }
        raw.push(Raw {
            image,
            seeds: load_pixel_seeds(&seeds_path)?,
            truth,
        });
    }
    if raw.is_empty() {
        return Err(CliError::Data(Error::EmptyDataset.at(&a.data)));
    }
    let classes = a.engine.classes.unwrap_or_else(|| {
        let seen = raw
            .iter()
            .flat_map(|r| {
                r.seeds.iter().map(|s| s.class).chain(
                    r.truth
                        .labels()
                        .iter()
                        .filter(|&&l| l != IGNORE_LABEL)
                        .map(|&l| l as usize),
                )
            })
            .max()
            .unwrap_or(0);
        (seen + 1).max(EngineConfig::default().num_classes)
    });
    let cfg = a.engine.config(classes)?;
    let tcfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        momentum: a.momentum,
        trainable: Trainable {
            cascade_params: !a.freeze_cascade,
            importance_head: !a.freeze_head,
        },
        ..TrainConfig::default()
    };
    tcfg.validate()?;

    let mut instances = Vec::with_capacity(raw.len());
    for r in raw {
        let grid = NodeGrid::for_image(r.image.height(), r.image.width(), cfg.downsample_factor)?;
        let sample = Sample {
            source: FeatureSource::Image(r.image),
            seeds: crate::seed::seeds_to_nodes(&r.seeds, &grid)?,
            labels: r.truth.downsample(&grid)?,
        };
        instances.push(sample.to_instance(&cfg)?);
    }
    let fit = fit_instances(&instances, &cfg, &tcfg, Model::new(cfg.num_stages, classes))?;
    save_params(&fit.model, &a.out)?;
    if let Some(path) = &a.history {
        let text: String = fit.history.iter().map(|l| format!("{l}\n")).collect();
        crate::binio::write_atomic(path, text.as_bytes())?;
    }
    say!(
        out,
        "examples={} classes={} epochs={}",
        instances.len(),
        classes,
        a.epochs
    );
    say!(
        out,
        "loss: first={} last={}",
        fit.history[0],
        fit.history[fit.history.len() - 1]
    );
    for t in 0..cfg.num_stages {
        say!(
            out,
            "stage {}: mu={:.4} beta={:.4}",
            t + 1,
            fit.model.params.mu(t),
            fit.model.params.beta(t)
        );
    }
    say!(out, "params: {}", a.out.display());
    Ok(())
}

fn run_eval(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    if a.classes == 0 {
        return Err(usage("--classes must be positive"));
    }
    let mut scores = Vec::new();
    for path in read_dir_sorted(&a.dir)? {
        let Some(stem) = file_name(&path).strip_suffix(".pred.pgm") else {
            continue;
        };
        let gt = a.dir.join(format!("{stem}.gt.pgm"));
        let pred = read_labels(&path)?;
        let truth = read_labels(&gt)?;
        let report = miou(&pred, &truth, a.classes).map_err(|e| e.at(&path))?;
        say!(out, "{stem} miou={}", report.mean);
        scores.push(report.mean);
    }
    if scores.is_empty() {
        return Err(CliError::Data(Error::EmptyEvaluation.at(&a.dir)));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    say!(out, "pairs={} mean_miou={}", scores.len(), mean);
    Ok(())
}

fn run_grad_check(a: GradCheckArgs, out: &mut dyn Write) -> CliResult {
    if a.side == 0 || a.classes == 0 || !(a.eps > 0.0) {
        return Err(usage("--side, --classes and --eps must be positive"));
    }
    if a.side * a.side > 100 {
        return Err(usage(
            "finite differences are limited to 100 nodes (--side <= 10)",
        ));
    }
    let cfg = validate_config(EngineConfig::with_classes(a.classes))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let instance = if a.random_transitions {
        let grid = NodeGrid::new(a.side, a.side, 1)?;
        let n = grid.count();
        let transitions = (0..cfg.num_stages)
            .map(|t| random_transition(t, n, &mut rng))
            .collect();
        let labels = (0..n).map(|_| rng.gen_range(0..a.classes) as u8).collect();
        Instance::new(
            transitions,
            random_scores(grid, a.classes, &mut rng),
            LabelMap::new(grid, labels)?,
        )?
    } else {
        // Image-derived transitions; the image must cover the descriptor window.
        let rho = cfg.downsample_factor;
        let side_px = (a.side * rho).max(crate::features::MIN_IMAGE_SIDE);
        let (image, truth) = two_region_image(side_px, side_px, &mut rng)?;
        let grid = NodeGrid::for_image(side_px, side_px, rho)?;
        let seeds = sample_pixel_seeds(&truth, a.classes, 0.1, 0.1, &mut rng);
        let pyramid = extract_pyramid(&image, &cfg)?;
        Instance::from_pyramid(
            &pyramid,
            &crate::seed::seeds_to_nodes(&seeds, &grid)?,
            truth.downsample(&grid)?,
            &cfg,
        )?
    };
    let model = Model::new(cfg.num_stages, a.classes);
    let report = grad_check(&instance, &model, &cfg, a.eps, Trainable::ALL)?;
    say!(
        out,
        "parameters={} nodes={} fd_epsilon={:e}",
        report.entries.len(),
        instance.scores.grid().count(),
        a.eps
    );
    say!(out, "max_relative_error={:e}", report.max_relative_error());
    for e in report.entries.iter().take(a.top) {
        say!(
            out,
            "{:<14} analytic={:+.10e} numeric={:+.10e} rel={:.3e}",
            e.name,
            e.analytic,
            e.numeric,
            e.relative_error
        );
    }
    Ok(())
}

fn run_bench(a: BenchArgs, out: &mut dyn Write) -> CliResult {
    if a.classes == 0 || a.classes > 255 {
        return Err(usage("--classes must lie in 1..=255"));
    }
    let cfg = validate_config(EngineConfig {
        downsample_factor: a.downsample,
        ..EngineConfig::with_classes(a.classes)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (image, truth) = two_region_image(a.size, a.size, &mut rng)?;
    let mut seeds = sample_pixel_seeds(&truth, 2, 0.05, 0.0, &mut rng);
    for s in &mut seeds {
        s.class = rng.gen_range(0..a.classes);
    }
    let model = Model::new(cfg.num_stages, a.classes);
    let seg = segment(&image, &seeds, &model, &cfg, None, false)?;
    let t = seg.timings;
    say!(
        out,
        "nodes={} classes={} stages={}",
        seg.grid.count(),
        a.classes,
        cfg.num_stages
    );
    say!(out, "time.feature={:.6}", t.feature);
    say!(out, "time.similarity={:.6}", t.similarity);
    say!(out, "time.seed={:.6}", t.seed);
    say!(out, "time.diffusion={:.6}", t.diffusion);
    if let Some(path) = &a.manifest {
        let mut manifest = RunManifest::new(&cfg, &model.params);
        manifest.timings = t;
        manifest.write(path)?;
        say!(out, "manifest: {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let argv = std::iter::once("seedwalk").chain(args.iter().copied());
        let code = dispatch_to(argv, &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        let (code, _, err) = run(&["frobnicate"]);
        assert_eq!(code, 1);
        assert!(err.contains("Usage"), "{err}");
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(&["oracle", "--bogus"]).0, 1);
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("segment") && out.contains("grad-check"));
    }

    #[test]
    fn oracle_converges() {
        let (code, out, _) = run(&["oracle", "--n", "64", "--mu", "0.5", "--iters", "80"]);
        assert_eq!(code, 0);
        let dev: f64 = out
            .lines()
            .find_map(|l| l.strip_prefix("max_deviation="))
            .unwrap()
            .parse()
            .unwrap();
        assert!(dev <= 1e-8, "{dev}");
    }

    #[test]
    fn oracle_rejects_bad_mu() {
        assert_eq!(run(&["oracle", "--mu", "1.5"]).0, 1);
    }

    #[test]
    fn grad_check_reports_agreement() {
        let (code, out, _) = run(&["grad-check", "--side", "3", "--classes", "2"]);
        assert_eq!(code, 0);
        let max: f64 = out
            .lines()
            .find_map(|l| l.strip_prefix("max_relative_error="))
            .unwrap()
            .parse()
            .unwrap();
        assert!(max < 1e-5, "{out}");
    }

    #[test]
    fn eval_on_missing_dir_is_data_error() {
        assert_eq!(
            run(&["eval", "--dir", "/nonexistent/seedwalk", "--classes", "2"]).0,
            2
        );
    }
}
