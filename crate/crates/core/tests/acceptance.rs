//! Acceptance suite. Runs without the libtest harness so that every criterion
//! prints a single PASS/FAIL line; the process exits non-zero on any failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seedwalk::diffusion::{closed_form, power_series, run_cascade, walk_step, CascadeParams};
use seedwalk::features::{decode_pyramid, encode_pyramid, FeatureMap, FeaturePyramid};
use seedwalk::metrics::{argmax_labels, miou};
use seedwalk::netpbm::{decode_image, decode_labels, encode_image, encode_labels};
use seedwalk::pipeline::segment;
use seedwalk::seed::{
    format_seed_text, importance, make_seed, parse_seed_text, ImportanceHead, ImportanceMap,
};
use seedwalk::similarity::{
    build_transitions, decode_transition, encode_transition, Projection, TransitionMatrix,
};
use seedwalk::synth::{random_scores, random_transition, sample_pixel_seeds, two_region_image};
use seedwalk::train::{
    fit, format_params, grad_check, parse_params, FeatureSource, Instance, Model, Sample,
    TrainConfig, Trainable,
};
use seedwalk::{EngineConfig, LabelMap, NodeGrid, ScoreMap, IGNORE_LABEL};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn line_grid(n: usize) -> NodeGrid {
    NodeGrid::new(1, n, 1).unwrap()
}

/// Iterated walks approach the direct solve once the geometric tail is negligible.
fn convergence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let sizes = [16, 100, 400];
    let mus: [f64; 3] = [0.3, 0.5, 0.9];
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let n = sizes[i % 3];
        let mu = mus[(i / 3) % 3];
        let p = random_transition(0, n, &mut rng);
        let s = random_scores(line_grid(n), 4, &mut rng);
        let iters = (1e-10f64.ln() / mu.ln()).ceil() as usize;
        assert!(mu.powi(iters as i32) < 1e-10);
        let mut y = s.clone();
        for _ in 0..iters {
            y = walk_step(&y, &p, &s, mu).unwrap();
        }
        worst = worst.max(y.max_abs_diff(&closed_form(&p, &s, mu).unwrap()));
    }
    outcome(
        worst <= 1e-8,
        format!("20 instances, worst max-norm deviation {worst:.2e} (tol 1e-8)"),
    )
}

fn power_series_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(2..=12);
        let k = rng.gen_range(1..=4);
        let mu = rng.gen_range(0.05..0.95);
        let terms = rng.gen_range(0..=15);
        let p = random_transition(0, n, &mut rng);
        let s = random_scores(line_grid(n), k, &mut rng);
        let mut y = s.clone();
        for _ in 0..=terms {
            y = walk_step(&y, &p, &s, mu).unwrap();
        }
        worst = worst.max(y.max_abs_diff(&power_series(&p, &s, mu, terms).unwrap()));
    }
    outcome(
        worst <= 1e-10,
        format!("50 instances, worst deviation {worst:.2e} (tol 1e-10)"),
    )
}

struct SuiteImage {
    transitions: Vec<TransitionMatrix>,
    cascade_miou: f64,
    seed_only_miou: f64,
    oracle_miou: f64,
}

/// Twenty synthetic two-region images segmented with the untrained engine.
fn build_suite() -> Vec<SuiteImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let cfg = EngineConfig::default();
    let model = Model::new(cfg.num_stages, cfg.num_classes);
    (0..20)
        .map(|_| {
            let (image, truth_px) = two_region_image(80, 80, &mut rng).unwrap();
            let seeds = sample_pixel_seeds(&truth_px, 2, 0.05, 0.10, &mut rng);
            let seg = segment(&image, &seeds, &model, &cfg, None, false).unwrap();
            let truth = truth_px.downsample(&seg.grid).unwrap();
            let seed_only = argmax_labels(&seg.scores);
            // Single-walk limit on the first level, same seed, same mu.
            let limit = closed_form(&seg.transitions[0], &seg.seed, model.params.mu(0)).unwrap();
            SuiteImage {
                cascade_miou: miou(&seg.labels, &truth, 2).unwrap().mean,
                seed_only_miou: miou(&seed_only, &truth, 2).unwrap().mean,
                oracle_miou: miou(&argmax_labels(&limit), &truth, 2).unwrap().mean,
                transitions: seg.transitions,
            }
        })
        .collect()
}

fn row_stochastic(suite: &[SuiteImage]) -> Outcome {
    let mut worst_row: f64 = 0.0;
    let mut in_range = true;
    let mut count = 0;
    for p in suite.iter().flat_map(|s| &s.transitions) {
        worst_row = worst_row.max(p.max_row_deviation());
        in_range &= p.values().iter().all(|&v| (0.0..=1.0).contains(&v));
        count += 1;
    }
    outcome(
        worst_row <= 1e-9 && in_range,
        format!(
            "{count} matrices, worst |row sum - 1| {worst_row:.2e}, entries in [0,1]: {in_range}"
        ),
    )
}

fn constant_pyramid(h: usize, w: usize) -> FeaturePyramid {
    let levels = [5, 6, 5, 3, 8]
        .iter()
        .enumerate()
        .map(|(l, &d)| {
            FeatureMap::new(l, h, w, Array2::from_elem((d, h * w), 0.3 + l as f64)).unwrap()
        })
        .collect();
    FeaturePyramid::new(levels).unwrap()
}

fn degenerate_limits() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let cfg = EngineConfig::default();
    let n = 30;
    let ps: Vec<_> = (0..5).map(|t| random_transition(t, n, &mut rng)).collect();
    let s = random_scores(line_grid(n), 3, &mut rng);

    let no_walk = CascadeParams::uniform(5, -40.0, 0.7);
    let mu_dev = run_cascade(&s, &ps, &no_walk, &cfg, false)
        .unwrap()
        .current
        .max_abs_diff(&s);
    let frozen = CascadeParams::uniform(5, 0.4, -1000.0);
    let beta_exact = run_cascade(&s, &ps, &frozen, &cfg, false).unwrap().current == s;

    let x = random_scores(NodeGrid::new(5, 6, 1).unwrap(), 3, &mut rng);
    let ones = ImportanceMap {
        grid: *x.grid(),
        values: vec![1.0; 30],
    };
    let head_saturated = ImportanceHead {
        weights: vec![0.0; 27],
        bias: 1000.0,
    };
    let m_exact = make_seed(&x, &ones).unwrap() == x
        && make_seed(&x, &importance(&x, &head_saturated, x.grid()).unwrap()).unwrap() == x;

    let pyramid = constant_pyramid(20, 25);
    let grid = NodeGrid::for_image(20, 25, cfg.downsample_factor).unwrap();
    let transitions = build_transitions(
        &pyramid,
        &Projection::for_pyramid(&pyramid, &cfg),
        &grid,
        &cfg,
    )
    .unwrap();
    let uniform = TransitionMatrix::uniform(0, grid.count());
    let uniform_exact = transitions.iter().all(|p| p.values() == uniform.values());

    outcome(
        mu_dev <= 1e-12 && beta_exact && m_exact && uniform_exact,
        format!(
            "mu->0 deviation {mu_dev:.1e}; beta->0 exact: {beta_exact}; M=1 exact: {m_exact}; uniform P exact: {uniform_exact}"
        ),
    )
}

fn random_model(stages: usize, k: usize, rng: &mut ChaCha8Rng) -> Model {
    Model {
        params: CascadeParams {
            mu_logits: (0..stages).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            beta_logits: (0..stages).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        },
        head: ImportanceHead {
            weights: (0..k * 9).map(|_| rng.gen_range(-0.3..0.3)).collect(),
            bias: rng.gen_range(-0.5..0.5),
        },
    }
}

fn gradient_agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut checked = 0;
    for i in 0..10 {
        let side = 3 + i % 3;
        let k = 2 + i % 3;
        let grid = NodeGrid::new(side, side, 1).unwrap();
        let n = grid.count();
        let transitions = (0..5).map(|t| random_transition(t, n, &mut rng)).collect();
        let mut labels: Vec<u8> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    IGNORE_LABEL
                } else {
                    rng.gen_range(0..k) as u8
                }
            })
            .collect();
        // at least one node must count towards the loss
        labels[0] = 0;
        let instance = Instance::new(
            transitions,
            random_scores(grid, k, &mut rng),
            LabelMap::new(grid, labels).unwrap(),
        )
        .unwrap();
        let model = random_model(5, k, &mut rng);
        let cfg = EngineConfig::with_classes(k);
        let report = grad_check(&instance, &model, &cfg, 1e-5, Trainable::ALL).unwrap();
        checked += report.entries.len();
        if report.entries[0].relative_error > worst {
            worst = report.entries[0].relative_error;
            worst_name = report.entries[0].name.clone();
        }
    }
    outcome(
        worst < 1e-5,
        format!("{checked} scalars on 10 instances, worst relative error {worst:.2e} ({worst_name}, tol 1e-5)"),
    )
}

fn linearity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let n = rng.gen_range(4..40);
        let grid = line_grid(n);
        let ps: Vec<_> = (0..5).map(|t| random_transition(t, n, &mut rng)).collect();
        let params = random_model(5, 1, &mut rng).params;
        let cfg = EngineConfig::default();
        let (s1, s2) = (
            random_scores(grid, 3, &mut rng),
            random_scores(grid, 3, &mut rng),
        );
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mixed = ScoreMap::new(grid, s1.values() * a + s2.values() * b).unwrap();
        let run = |s: &ScoreMap| run_cascade(s, &ps, &params, &cfg, false).unwrap().current;
        let expected = run(&s1).values() * a + run(&s2).values() * b;
        let got = run(&mixed);
        let dev = (got.values() - &expected)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(dev);
    }
    outcome(
        worst <= 1e-10,
        format!("10 instances, worst superposition error {worst:.2e} (tol 1e-10)"),
    )
}

fn segmentation_benefit(suite: &[SuiteImage]) -> Outcome {
    let wins = suite
        .iter()
        .filter(|s| s.cascade_miou > s.seed_only_miou)
        .count();
    let mean = |f: fn(&SuiteImage) -> f64| suite.iter().map(f).sum::<f64>() / suite.len() as f64;
    let cascade = mean(|s| s.cascade_miou);
    let seed_only = mean(|s| s.seed_only_miou);
    let predicted = mean(|s| s.oracle_miou - s.seed_only_miou);
    let worst = suite
        .iter()
        .map(|s| s.cascade_miou - s.seed_only_miou)
        .fold(f64::INFINITY, f64::min);
    outcome(
        wins == suite.len(),
        format!(
            "cascade beats seeds on {wins}/{} images; mean mIoU {cascade:.3} vs {seed_only:.3}; \
             margin {:.3} (closed-form predicted {predicted:.3}), smallest {worst:.3}",
            suite.len(),
            cascade - seed_only
        ),
    )
}

fn ablation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let (image, truth) = two_region_image(40, 40, &mut rng).unwrap();
    let seeds = sample_pixel_seeds(&truth, 2, 0.05, 0.0, &mut rng);
    let model = random_model(5, 2, &mut rng);
    let skip = EngineConfig {
        skip_stages: [2, 4].into(),
        ..EngineConfig::default()
    };
    let seg = segment(&image, &seeds, &model, &skip, None, false).unwrap();

    let keep = [0, 2, 4];
    let short_cfg = EngineConfig {
        num_stages: 3,
        ..EngineConfig::default()
    };
    let short_params = CascadeParams {
        mu_logits: keep.iter().map(|&t| model.params.mu_logits[t]).collect(),
        beta_logits: keep.iter().map(|&t| model.params.beta_logits[t]).collect(),
    };
    let short_p: Vec<_> = keep.iter().map(|&t| seg.transitions[t].clone()).collect();
    let short = run_cascade(&seg.seed, &short_p, &short_params, &short_cfg, false).unwrap();
    let dev = seg.state.current.max_abs_diff(&short.current);
    outcome(
        dev <= 1e-12 && seg.state.applied == vec![0, 2, 4],
        format!("skip {{2,4}} vs stages {{1,3,5}}: deviation {dev:.1e} (tol 1e-12)"),
    )
}

fn long_range() -> Outcome {
    let cfg = EngineConfig::default();
    let pyramid = constant_pyramid(100, 100);
    let grid = NodeGrid::for_image(100, 100, cfg.downsample_factor).unwrap();
    let p = build_transitions(
        &pyramid,
        &Projection::for_pyramid(&pyramid, &cfg),
        &grid,
        &cfg,
    )
    .unwrap()
    .remove(0);
    let mut x = Array2::zeros((grid.count(), 2));
    x[[0, 1]] = 1.0;
    let s = ScoreMap::new(grid, x).unwrap();
    let y = walk_step(&s, &p, &s, 0.5).unwrap();
    let far = grid.node_index(19, 19).unwrap();
    let score = y.values()[[far, 1]];
    outcome(
        score > 0.0,
        format!("20x20 grid, seed at (0,0), score at (19,19) after one walk {score:.3e}"),
    )
}

fn parameter_ranges() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let cfg = EngineConfig::default();
    let sample = |rng: &mut ChaCha8Rng, noise: f64| {
        let (image, truth_px) = two_region_image(50, 50, rng).unwrap();
        let grid = NodeGrid::for_image(50, 50, cfg.downsample_factor).unwrap();
        let pixel_seeds = sample_pixel_seeds(&truth_px, 2, 0.05, noise, rng);
        Sample {
            source: FeatureSource::Image(image),
            seeds: seedwalk::seed::seeds_to_nodes(&pixel_seeds, &grid).unwrap(),
            labels: truth_px.downsample(&grid).unwrap(),
        }
    };

    let single = [sample(&mut rng, 0.0)];
    let short = TrainConfig {
        epochs: 11,
        ..TrainConfig::default()
    };
    let history = fit(&single, &cfg, &short).unwrap().history;
    let decreasing = history.windows(2).all(|w| w[1] < w[0]);

    let dataset: Vec<Sample> = (0..4).map(|_| sample(&mut rng, 0.1)).collect();
    let long = TrainConfig {
        epochs: 60,
        ..TrainConfig::default()
    };
    let trained = fit(&dataset, &cfg, &long).unwrap().model;
    let values: Vec<(f64, f64)> = (0..5)
        .map(|t| (trained.params.mu(t), trained.params.beta(t)))
        .collect();
    let open = |v: f64| v > 0.0 && v < 1.0;
    let in_range = values.iter().all(|&(m, b)| open(m) && open(b));
    let shown: Vec<String> = values
        .iter()
        .map(|(m, b)| format!("{m:.2}/{b:.2}"))
        .collect();
    outcome(
        in_range && decreasing,
        format!(
            "mu/beta per stage [{}] all in (0,1): {in_range}; single-image loss strictly decreasing over 10 epochs: {decreasing}",
            shown.join(" ")
        ),
    )
}

fn performance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let n = 1024;
    let grid = NodeGrid::new(32, 32, 1).unwrap();
    let ps: Vec<_> = (0..5).map(|t| random_transition(t, n, &mut rng)).collect();
    let s = random_scores(grid, 21, &mut rng);
    let cfg = EngineConfig::with_classes(21);
    let clock = Instant::now();
    let state = run_cascade(&s, &ps, &CascadeParams::new(5), &cfg, false).unwrap();
    let walks = clock.elapsed().as_secs_f64();
    assert_eq!(state.applied.len(), 5);

    // The same phase as it appears in a run record.
    let (image, truth) = two_region_image(160, 160, &mut rng).unwrap();
    let mut seeds = sample_pixel_seeds(&truth, 2, 0.05, 0.0, &mut rng);
    seeds
        .iter_mut()
        .for_each(|s| s.class = rng.gen_range(0..21));
    let seg = segment(&image, &seeds, &Model::new(5, 21), &cfg, None, false).unwrap();
    let manifest = seedwalk::manifest::RunManifest {
        timings: seg.timings,
        ..seedwalk::manifest::RunManifest::new(&cfg, &CascadeParams::new(5))
    };
    let reported = manifest
        .to_text()
        .lines()
        .any(|l| l.starts_with("time.diffusion="));
    outcome(
        walks < 1.0 && reported && seg.grid.count() == 1024,
        format!(
            "5 walks N=1024 K=21 in {walks:.3}s (limit 1s); pipeline phases feature {:.3}s similarity {:.3}s seed {:.4}s diffusion {:.3}s",
            seg.timings.feature, seg.timings.similarity, seg.timings.seed, seg.timings.diffusion
        ),
    )
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn golden_formats() -> Outcome {
    let dir = golden_dir();
    let read = |name: &str| std::fs::read(dir.join(name)).unwrap();
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    let bytes = read("image.ppm");
    let image = decode_image(&bytes).unwrap();
    let expected_first = (7.0 / 255.0, 60.0 / 255.0, 113.0 / 255.0);
    check(
        "image.ppm",
        encode_image(&image).unwrap() == bytes
            && (image.get(0, 0, 0), image.get(1, 0, 0), image.get(2, 0, 0)) == expected_first,
    );

    let bytes = read("gray.pgm");
    let gray = decode_image(&bytes).unwrap();
    check(
        "gray.pgm",
        encode_image(&gray).unwrap() == bytes && gray.channels() == 1,
    );

    let bytes = read("labels.pgm");
    let labels = decode_labels(&bytes).unwrap();
    check(
        "labels.pgm",
        encode_labels(&labels) == bytes && labels.labels() == [0, 1, 2, 255, 1, 0, 2, 2, 255],
    );

    let bytes = read("pyramid.fpyr");
    let pyramid = decode_pyramid(&bytes, &EngineConfig::default()).unwrap();
    let value_ok = pyramid.levels().iter().all(|l| {
        l.data()
            .indexed_iter()
            .all(|((k, p), &v)| v == (l.level() * 1000 + k * 100 + p) as f64 / 7.0 - 2.0)
    });
    check(
        "pyramid.fpyr",
        encode_pyramid(&pyramid) == bytes && value_ok,
    );

    let bytes = read("matrix.tmat");
    let p = decode_transition(&bytes).unwrap();
    check(
        "matrix.tmat",
        encode_transition(&p) == bytes && p.level() == 2 && p.values()[[2, 1]] == 1.0 / 3.0,
    );

    let text = String::from_utf8(read("params.txt")).unwrap();
    let model = parse_params(&text).unwrap();
    check(
        "params.txt",
        format_params(&model) == text
            && model.params.mu_logits == [0.25, -1.5]
            && model.head.weights[8] == 0.5
            && model.head.bias == -0.3,
    );

    let text = String::from_utf8(read("seeds.txt")).unwrap();
    let seeds = parse_seed_text(&text).unwrap();
    check(
        "seeds.txt",
        format_seed_text(&seeds) == text && seeds.len() == 4 && seeds[2].confidence == 0.75,
    );

    // Through the filesystem as well.
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("copy.tmat");
    seedwalk::similarity::save_transition(&p, &path).unwrap();
    check(
        "matrix.tmat (file)",
        std::fs::read(&path).unwrap() == read("matrix.tmat"),
    );

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "7 golden files round-trip bit-exactly".into()
        } else {
            format!("mismatch: {}", failures.join(", "))
        },
    )
}

fn main() {
    // Accept and ignore libtest-style arguments.
    let clock = Instant::now();
    let suite = build_suite();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("convergence to the direct solve", Box::new(convergence)),
        (
            "power-series equivalence",
            Box::new(power_series_equivalence),
        ),
        (
            "row-stochastic transitions",
            Box::new(|| row_stochastic(&suite)),
        ),
        ("degenerate-limit identities", Box::new(degenerate_limits)),
        ("gradient correctness", Box::new(gradient_agreement)),
        ("linearity in the seed", Box::new(linearity)),
        (
            "segmentation benefit over seeds",
            Box::new(|| segmentation_benefit(&suite)),
        ),
        ("stage-skip ablation", Box::new(ablation)),
        ("long-range propagation", Box::new(long_range)),
        ("learned parameter ranges", Box::new(parameter_ranges)),
        ("diffusion performance", Box::new(performance)),
        ("format golden files", Box::new(golden_formats)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {:>2}. {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    println!(
        "{} of {} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        clock.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
