//! Learning the cascade weights and the importance head with the transition
//! matrices held fixed, plus a central-difference gradient checker.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::binio::{read_file, write_atomic};
use crate::config::{ConfigError, EngineConfig};
use crate::diffusion::{run_cascade, CascadeParams, CascadeState};
use crate::error::{Error, Result};
use crate::features::{extract_pyramid, FeaturePyramid};
use crate::grid::{Image, LabelMap, NodeGrid, ScoreMap, IGNORE_LABEL};
use crate::seed::{
    importance, importance_logits, make_seed, neighbor, rasterize_seeds, ImportanceHead,
    SparseSeeds, HEAD_TAPS,
};
use crate::similarity::{build_transitions, Projection, TransitionMatrix};

/// Which parameter groups receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub cascade_params: bool,
    pub importance_head: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        cascade_params: true,
        importance_head: true,
    };
    pub const NONE: Trainable = Trainable {
        cascade_params: false,
        importance_head: false,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub fd_epsilon: f64,
    pub trainable: Trainable,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 200,
            momentum: 0.9,
            fd_epsilon: 1e-5,
            trainable: Trainable::ALL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        // Zero learning rate is accepted as a frozen run.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            errors.push(ConfigError::LearningRate(self.learning_rate));
        }
        if self.epochs == 0 {
            errors.push(ConfigError::Epochs(self.epochs));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errors.push(ConfigError::Momentum(self.momentum));
        }
        if !(self.fd_epsilon > 0.0 && self.fd_epsilon.is_finite()) {
            errors.push(ConfigError::FdEpsilon(self.fd_epsilon));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errors))
        }
    }
}

/// Everything the optimizer can change.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: CascadeParams,
    pub head: ImportanceHead,
}

impl Model {
    /// Logits at zero and an all-zero head.
    pub fn new(stages: usize, classes: usize) -> Self {
        Self {
            params: CascadeParams::new(stages),
            head: ImportanceHead::zeros(classes),
        }
    }

    /// Flattened as mu logits, beta logits, head weights, head bias.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.params.mu_logits.clone();
        v.extend(&self.params.beta_logits);
        v.extend(&self.head.weights);
        v.push(self.head.bias);
        v
    }

    pub fn set_from(&mut self, v: &[f64]) {
        let t = self.params.stages();
        let h = self.head.weights.len();
        self.params.mu_logits.copy_from_slice(&v[..t]);
        self.params.beta_logits.copy_from_slice(&v[t..2 * t]);
        self.head.weights.copy_from_slice(&v[2 * t..2 * t + h]);
        self.head.bias = v[2 * t + h];
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let t = self.params.stages();
        let mut names: Vec<String> = (0..t).map(|i| format!("mu_logit[{i}]")).collect();
        names.extend((0..t).map(|i| format!("beta_logit[{i}]")));
        names.extend((0..self.head.weights.len()).map(|i| format!("head_w[{i}]")));
        names.push("head_b".into());
        names
    }

    /// Mask over [`Model::to_vec`] for the selected groups.
    fn trainable_mask(&self, trainable: Trainable) -> Vec<bool> {
        let t = self.params.stages();
        let mut mask = vec![trainable.cascade_params; 2 * t];
        mask.extend(std::iter::repeat_n(
            trainable.importance_head,
            self.head.weights.len() + 1,
        ));
        mask
    }
}

/// Mean softmax cross-entropy over non-ignored nodes and its gradient in `y`.
pub fn cross_entropy(y: &ScoreMap, labels: &LabelMap) -> Result<(f64, Array2<f64>)> {
    let (n, k) = y.values().dim();
    if labels.labels().len() != n
        || labels.grid().height() != y.grid().height()
        || labels.grid().width() != y.grid().width()
    {
        return Err(Error::DimensionMismatch(
            "label map and score map grids differ".into(),
        ));
    }
    let counted = labels
        .labels()
        .iter()
        .filter(|&&l| l != IGNORE_LABEL)
        .count();
    if counted == 0 {
        return Err(Error::EmptyLoss);
    }
    let norm = 1.0 / counted as f64;
    let mut grad = Array2::zeros((n, k));
    let mut loss = 0.0;
    for (i, &label) in labels.labels().iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let label = label as usize;
        if label >= k {
            return Err(Error::ClassOutOfRange {
                class: label,
                classes: k,
            });
        }
        let row = y.values().row(i);
        let (argmax, max) =
            row.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |b, (j, &v)| if v > b.1 { (j, v) } else { b },
            );
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != argmax)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        // log-sum-exp minus the true score, kept accurate when the margin is large
        loss += (max - row[label]) + rest.ln_1p();
        let total = 1.0 + rest;
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let prob = (row[j] - max).exp() / total;
            *g = norm * (prob - if j == label { 1.0 } else { 0.0 });
        }
    }
    Ok((loss * norm, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeGradients {
    pub mu_logits: Vec<f64>,
    pub beta_logits: Vec<f64>,
    /// Gradient with respect to the seed `s`.
    pub seed: Array2<f64>,
}

/// Reverse-mode pass through `y^{t+1} = beta (mu P y^t + (1-mu) s) + (1-beta) y^t`
/// for every applied stage, with `y^0 = s`.
pub fn backward_cascade(
    state: &CascadeState,
    transitions: &[TransitionMatrix],
    params: &CascadeParams,
    dl_dy: &Array2<f64>,
) -> Result<CascadeGradients> {
    let trace = state.trace.as_ref().ok_or(Error::MissingTrace)?;
    if trace.len() != state.applied.len() + 1 {
        return Err(Error::MissingTrace);
    }
    if dl_dy.dim() != state.current.values().dim() {
        return Err(Error::DimensionMismatch(format!(
            "loss gradient {:?} for a {:?} prediction",
            dl_dy.dim(),
            state.current.values().dim()
        )));
    }
    let s = trace[0].values();
    let stages = params.stages();
    let mut mu_grad = vec![0.0; stages];
    let mut beta_grad = vec![0.0; stages];
    let mut seed_grad = Array2::<f64>::zeros(s.dim());
    let mut upstream = dl_dy.clone();

    for (step, &t) in state.applied.iter().enumerate().rev() {
        let y = trace[step].values();
        let p = transitions
            .get(t)
            .ok_or_else(|| Error::DimensionMismatch(format!("no transition matrix for stage {t}")))?
            .values();
        let (mu, beta) = (params.mu(t), params.beta(t));
        let py = p.dot(y);
        let mut d_mu = 0.0;
        let mut d_beta = 0.0;
        ndarray::Zip::from(&upstream)
            .and(&py)
            .and(s)
            .and(y)
            .for_each(|&g, &pyv, &sv, &yv| {
                d_mu += g * (pyv - sv);
                d_beta += g * (mu * pyv + (1.0 - mu) * sv - yv);
            });
        mu_grad[t] = beta * d_mu * mu * (1.0 - mu);
        beta_grad[t] = d_beta * beta * (1.0 - beta);
        seed_grad.scaled_add(beta * (1.0 - mu), &upstream);

        let mut next = p.t().dot(&upstream) * (beta * mu);
        next.scaled_add(1.0 - beta, &upstream);
        upstream = next;
    }
    seed_grad += &upstream;
    Ok(CascadeGradients {
        mu_logits: mu_grad,
        beta_logits: beta_grad,
        seed: seed_grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Chains `dL/ds` through `s = M x` and `M = logistic(head(x))` into the head.
pub fn backward_importance(
    x: &ScoreMap,
    head: &ImportanceHead,
    dl_ds: &Array2<f64>,
) -> Result<HeadGradients> {
    if dl_ds.dim() != x.values().dim() {
        return Err(Error::DimensionMismatch(
            "seed gradient and score map shapes differ".into(),
        ));
    }
    let logits = importance_logits(x, head)?;
    let grid = x.grid();
    let classes = x.classes();
    let mut weights = vec![0.0; head.weights.len()];
    let mut bias = 0.0;
    for (node, &a) in logits.iter().enumerate() {
        let m = crate::numeric::logistic(a);
        let d_m: f64 = dl_ds
            .row(node)
            .iter()
            .zip(x.values().row(node))
            .map(|(g, xv)| g * xv)
            .sum();
        let d_a = d_m * m * (1.0 - m);
        if d_a == 0.0 {
            continue;
        }
        bias += d_a;
        for dr in -1..=1 {
            for dc in -1..=1 {
                let source = neighbor(grid, node, dr, dc);
                for k in 0..classes {
                    weights[ImportanceHead::tap_index(k, dr, dc)] += d_a * x.values()[[source, k]];
                }
            }
        }
    }
    debug_assert_eq!(weights.len(), classes * HEAD_TAPS);
    Ok(HeadGradients { weights, bias })
}

/// A training example with its transitions precomputed.
#[derive(Debug, Clone)]
pub struct Instance {
    pub transitions: Vec<TransitionMatrix>,
    pub scores: ScoreMap,
    pub labels: LabelMap,
}

impl Instance {
    pub fn new(
        transitions: Vec<TransitionMatrix>,
        scores: ScoreMap,
        labels: LabelMap,
    ) -> Result<Self> {
        let n = scores.grid().count();
        if transitions.iter().any(|p| p.size() != n) || labels.labels().len() != n {
            return Err(Error::DimensionMismatch(
                "instance transitions, scores and labels disagree on node count".into(),
            ));
        }
        Ok(Self {
            transitions,
            scores,
            labels,
        })
    }

    /// Builds transitions from `pyramid` with the default seeded projections.
    pub fn from_pyramid(
        pyramid: &FeaturePyramid,
        seeds: &SparseSeeds,
        labels: LabelMap,
        cfg: &EngineConfig,
    ) -> Result<Self> {
        let grid = NodeGrid::for_image(pyramid.height(), pyramid.width(), cfg.downsample_factor)?;
        let projections = Projection::for_pyramid(pyramid, cfg);
        let transitions = build_transitions(pyramid, &projections, &grid, cfg)?;
        let scores = rasterize_seeds(seeds, &grid, cfg.num_classes)?;
        Self::new(transitions, scores, labels)
    }
}

/// Where a sample's features come from.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    Image(Image),
    Pyramid(FeaturePyramid),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub source: FeatureSource,
    pub seeds: SparseSeeds,
    /// Node-resolution ground truth.
    pub labels: LabelMap,
}

impl Sample {
    pub fn to_instance(&self, cfg: &EngineConfig) -> Result<Instance> {
        let extracted;
        let pyramid = match &self.source {
            FeatureSource::Image(image) => {
                extracted = extract_pyramid(image, cfg)?;
                &extracted
            }
            FeatureSource::Pyramid(p) => p,
        };
        Instance::from_pyramid(pyramid, &self.seeds, self.labels.clone(), cfg)
    }
}

fn forward(
    instance: &Instance,
    model: &Model,
    cfg: &EngineConfig,
    trace: bool,
) -> Result<CascadeState> {
    let grid = instance.scores.grid();
    let m = importance(&instance.scores, &model.head, grid)?;
    let s = make_seed(&instance.scores, &m)?;
    run_cascade(&s, &instance.transitions, &model.params, cfg, trace)
}

pub fn instance_loss(instance: &Instance, model: &Model, cfg: &EngineConfig) -> Result<f64> {
    let state = forward(instance, model, cfg, false)?;
    Ok(cross_entropy(&state.current, &instance.labels)?.0)
}

/// Loss and its gradient over [`Model::to_vec`] order.
pub fn loss_and_gradient(
    instance: &Instance,
    model: &Model,
    cfg: &EngineConfig,
) -> Result<(f64, Vec<f64>)> {
    let state = forward(instance, model, cfg, true)?;
    let (loss, dl_dy) = cross_entropy(&state.current, &instance.labels)?;
    let cascade = backward_cascade(&state, &instance.transitions, &model.params, &dl_dy)?;
    let head = backward_importance(&instance.scores, &model.head, &cascade.seed)?;
    let mut grad = cascade.mu_logits;
    grad.extend(cascade.beta_logits);
    grad.extend(head.weights);
    grad.push(head.bias);
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: Model,
    /// Mean dataset loss at the start of each epoch.
    pub history: Vec<f64>,
}

pub fn fit(dataset: &[Sample], cfg: &EngineConfig, tcfg: &TrainConfig) -> Result<FitResult> {
    let instances = dataset
        .iter()
        .map(|s| s.to_instance(cfg))
        .collect::<Result<Vec<_>>>()?;
    fit_instances(
        &instances,
        cfg,
        tcfg,
        Model::new(cfg.num_stages, cfg.num_classes),
    )
}

/// Momentum gradient descent over precomputed instances, starting from `init`.
pub fn fit_instances(
    instances: &[Instance],
    cfg: &EngineConfig,
    tcfg: &TrainConfig,
    init: Model,
) -> Result<FitResult> {
    tcfg.validate()?;
    if instances.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = init;
    let mask = model.trainable_mask(tcfg.trainable);
    let mut theta = model.to_vec();
    let mut velocity = vec![0.0; theta.len()];
    let mut history = Vec::with_capacity(tcfg.epochs);
    let scale = 1.0 / instances.len() as f64;

    for epoch in 0..tcfg.epochs {
        let mut loss = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for instance in instances {
            let (l, g) = loss_and_gradient(instance, &model, cfg)?;
            loss += l * scale;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b * scale);
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        history.push(loss);
        for i in 0..theta.len() {
            if mask[i] {
                velocity[i] = tcfg.momentum * velocity[i] + grad[i];
                theta[i] -= tcfg.learning_rate * velocity[i];
            }
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch, loss });
        }
        model.set_from(&theta);
    }
    Ok(FitResult { model, history })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEntry {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// Analytic versus finite-difference gradients, worst agreement first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientReport {
    pub entries: Vec<GradientEntry>,
}

impl GradientReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.relative_error)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Central differences of `loss` around `theta` for every index in `indices`.
pub fn check_gradient(
    loss: impl Fn(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    names: &[String],
    indices: impl IntoIterator<Item = usize>,
    fd_epsilon: f64,
) -> Result<GradientReport> {
    let mut probe = theta.to_vec();
    let mut entries = Vec::new();
    for i in indices {
        probe[i] = theta[i] + fd_epsilon;
        let plus = loss(&probe)?;
        probe[i] = theta[i] - fd_epsilon;
        let minus = loss(&probe)?;
        probe[i] = theta[i];
        let numeric = (plus - minus) / (2.0 * fd_epsilon);
        entries.push(GradientEntry {
            name: names[i].clone(),
            analytic: analytic[i],
            numeric,
            relative_error: relative_error(analytic[i], numeric),
        });
    }
    entries.sort_by(|a, b| b.relative_error.total_cmp(&a.relative_error));
    Ok(GradientReport { entries })
}

/// Compares [`loss_and_gradient`] with central differences for every trainable scalar.
pub fn grad_check(
    instance: &Instance,
    model: &Model,
    cfg: &EngineConfig,
    fd_epsilon: f64,
    trainable: Trainable,
) -> Result<GradientReport> {
    let (_, analytic) = loss_and_gradient(instance, model, cfg)?;
    let theta = model.to_vec();
    let names = model.parameter_names();
    let mask = model.trainable_mask(trainable);
    let loss = |v: &[f64]| {
        let mut m = model.clone();
        m.set_from(v);
        instance_loss(instance, &m, cfg)
    };
    check_gradient(
        loss,
        &theta,
        &analytic,
        &names,
        (0..theta.len()).filter(|&i| mask[i]),
        fd_epsilon,
    )
}

/// `key=value` text: `mu_logit[t]`, `beta_logit[t]`, `head_w[i]`, `head_b`.
pub fn format_params(model: &Model) -> String {
    let mut out = String::new();
    for (t, v) in model.params.mu_logits.iter().enumerate() {
        writeln!(out, "mu_logit[{t}]={v}").unwrap();
    }
    for (t, v) in model.params.beta_logits.iter().enumerate() {
        writeln!(out, "beta_logit[{t}]={v}").unwrap();
    }
    for (i, v) in model.head.weights.iter().enumerate() {
        writeln!(out, "head_w[{i}]={v}").unwrap();
    }
    writeln!(out, "head_b={}", model.head.bias).unwrap();
    out
}

pub fn parse_params(text: &str) -> Result<Model> {
    let mut mu = Vec::new();
    let mut beta = Vec::new();
    let mut weights = Vec::new();
    let mut bias = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| {
            Error::malformed("parameter", format!("line {}: {reason}", lineno + 1))
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad number {value:?}")))?;
        if !value.is_finite() {
            return Err(bad(format!("non-finite value for {key}")));
        }
        let key = key.trim();
        if key == "head_b" {
            if bias.replace(value).is_some() {
                return Err(bad("duplicate head_b".into()));
            }
            continue;
        }
        let (name, index) = key
            .strip_suffix(']')
            .and_then(|k| k.split_once('['))
            .ok_or_else(|| bad(format!("unknown key {key:?}")))?;
        let index: usize = index
            .parse()
            .map_err(|_| bad(format!("bad index in {key:?}")))?;
        let target = match name {
            "mu_logit" => &mut mu,
            "beta_logit" => &mut beta,
            "head_w" => &mut weights,
            _ => return Err(bad(format!("unknown key {key:?}"))),
        };
        if index != target.len() {
            return Err(bad(format!(
                "{key} out of order, expected index {}",
                target.len()
            )));
        }
        target.push(value);
    }
    let bias = bias.ok_or_else(|| Error::malformed("parameter", "missing head_b"))?;
    if mu.is_empty() || mu.len() != beta.len() {
        return Err(Error::malformed(
            "parameter",
            format!("{} mu logits and {} beta logits", mu.len(), beta.len()),
        ));
    }
    if weights.is_empty() || weights.len() % HEAD_TAPS != 0 {
        return Err(Error::malformed(
            "parameter",
            format!(
                "{} head weights is not a positive multiple of {HEAD_TAPS}",
                weights.len()
            ),
        ));
    }
    Ok(Model {
        params: CascadeParams {
            mu_logits: mu,
            beta_logits: beta,
        },
        head: ImportanceHead { weights, bias },
    })
}

pub fn save_params(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, format_params(model).as_bytes())
}

pub fn load_params(path: &Path) -> Result<Model> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::malformed("parameter", "file is not UTF-8").at(path))?;
    parse_params(&text).map_err(|e| e.at(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::logistic;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn line_grid(n: usize) -> NodeGrid {
        NodeGrid::new(1, n, 1).unwrap()
    }

    fn random_stochastic(n: usize, rng: &mut StdRng) -> TransitionMatrix {
        let mut v = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..1.0));
        for mut row in v.rows_mut() {
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        TransitionMatrix::new(0, v).unwrap()
    }

    fn random_instance(side: usize, k: usize, stages: usize, rng: &mut StdRng) -> Instance {
        let grid = NodeGrid::new(side, side, 1).unwrap();
        let n = grid.count();
        let transitions = (0..stages).map(|_| random_stochastic(n, rng)).collect();
        let scores = ScoreMap::new(
            grid,
            Array2::from_shape_fn((n, k), |_| rng.gen_range(-2.0..2.0)),
        )
        .unwrap();
        let labels = (0..n)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    IGNORE_LABEL
                } else {
                    rng.gen_range(0..k) as u8
                }
            })
            .collect();
        Instance::new(transitions, scores, LabelMap::new(grid, labels).unwrap()).unwrap()
    }

    fn random_model(stages: usize, k: usize, rng: &mut StdRng) -> Model {
        Model {
            params: CascadeParams {
                mu_logits: (0..stages).map(|_| rng.gen_range(-1.5..1.5)).collect(),
                beta_logits: (0..stages).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            },
            head: ImportanceHead {
                weights: (0..k * HEAD_TAPS)
                    .map(|_| rng.gen_range(-0.3..0.3))
                    .collect(),
                bias: rng.gen_range(-0.5..0.5),
            },
        }
    }

    #[test]
    fn uniform_scores_give_log_k() {
        let g = line_grid(3);
        let y = ScoreMap::zeros(g, 4);
        let labels = LabelMap::new(g, vec![0, 3, 2]).unwrap();
        let (loss, _) = cross_entropy(&y, &labels).unwrap();
        assert_abs_diff_eq!(loss, 4f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn saturated_margin_loss_vanishes() {
        let g = line_grid(1);
        let y = ScoreMap::new(g, array![[50.0, 0.0]]).unwrap();
        let (loss, _) = cross_entropy(&y, &LabelMap::new(g, vec![0]).unwrap()).unwrap();
        assert!(loss <= 1e-20 && loss > 0.0, "{loss}");
    }

    #[test]
    fn two_node_hand_instance() {
        let g = line_grid(2);
        let y = ScoreMap::new(g, array![[1.0, 2.0], [0.5, -0.5]]).unwrap();
        let labels = LabelMap::new(g, vec![0, 0]).unwrap();
        let (loss, grad) = cross_entropy(&y, &labels).unwrap();
        let node0 = -(1f64.exp() / (1f64.exp() + 2f64.exp())).ln();
        let node1 = -(0.5f64.exp() / (0.5f64.exp() + (-0.5f64).exp())).ln();
        assert_abs_diff_eq!(loss, 0.5 * (node0 + node1), epsilon = 1e-15);
        let p01 = 2f64.exp() / (1f64.exp() + 2f64.exp());
        assert_abs_diff_eq!(grad[[0, 1]], 0.5 * p01, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[[0, 0]], -0.5 * p01, epsilon = 1e-15);
    }

    #[test]
    fn ignored_nodes_excluded() {
        let g = line_grid(2);
        let y = ScoreMap::new(g, array![[3.0, -1.0], [0.0, 0.0]]).unwrap();
        let (_, grad) =
            cross_entropy(&y, &LabelMap::new(g, vec![IGNORE_LABEL, 1]).unwrap()).unwrap();
        assert_eq!(grad.row(0).to_vec(), vec![0.0, 0.0]);
        assert!(matches!(
            cross_entropy(&y, &LabelMap::new(g, vec![IGNORE_LABEL; 2]).unwrap()),
            Err(Error::EmptyLoss)
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = StdRng::seed_from_u64(11);
        let inst = random_instance(3, 2, 3, &mut rng);
        let model = random_model(3, 2, &mut rng);
        let cfg = EngineConfig {
            num_stages: 3,
            num_classes: 2,
            ..EngineConfig::default()
        };
        let state = forward(&inst, &model, &cfg, true).unwrap();
        let g = backward_cascade(
            &state,
            &inst.transitions,
            &model.params,
            &Array2::zeros((9, 2)),
        )
        .unwrap();
        assert!(g.mu_logits.iter().chain(&g.beta_logits).all(|&v| v == 0.0));
        assert!(g.seed.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_trace_rejected() {
        let mut rng = StdRng::seed_from_u64(12);
        let inst = random_instance(2, 2, 1, &mut rng);
        let model = random_model(1, 2, &mut rng);
        let cfg = EngineConfig {
            num_stages: 1,
            ..EngineConfig::default()
        };
        let state = forward(&inst, &model, &cfg, false).unwrap();
        assert!(matches!(
            backward_cascade(
                &state,
                &inst.transitions,
                &model.params,
                &Array2::zeros((4, 2))
            ),
            Err(Error::MissingTrace)
        ));
    }

    #[test]
    fn single_stage_mu_gradient_by_hand() {
        // y^1 = mu P s + (1 - mu) s with beta = 1, so dL/dmu = <G, P s - s>.
        let mut rng = StdRng::seed_from_u64(13);
        let n = 5;
        let p = random_stochastic(n, &mut rng);
        let s = ScoreMap::new(
            line_grid(n),
            Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0)),
        )
        .unwrap();
        let mu_logit = 0.3;
        let params = CascadeParams {
            mu_logits: vec![mu_logit],
            beta_logits: vec![1000.0],
        };
        let cfg = EngineConfig {
            num_stages: 1,
            ..EngineConfig::default()
        };
        let state = run_cascade(&s, std::slice::from_ref(&p), &params, &cfg, true).unwrap();
        let upstream = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        let g = backward_cascade(&state, std::slice::from_ref(&p), &params, &upstream).unwrap();
        let mut inner = 0.0;
        for i in 0..n {
            for k in 0..3 {
                let mut ps = 0.0;
                for j in 0..n {
                    ps += p.values()[[i, j]] * s.values()[[j, k]];
                }
                inner += upstream[[i, k]] * (ps - s.values()[[i, k]]);
            }
        }
        let mu = logistic(mu_logit);
        assert_abs_diff_eq!(g.mu_logits[0], inner * mu * (1.0 - mu), epsilon = 1e-14);
    }

    #[test]
    fn analytic_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(14);
        for (side, k, stages) in [(3, 2, 3), (5, 4, 5), (4, 3, 2)] {
            let inst = random_instance(side, k, stages, &mut rng);
            let model = random_model(stages, k, &mut rng);
            let cfg = EngineConfig {
                num_stages: stages,
                num_classes: k,
                ..EngineConfig::default()
            };
            let report = grad_check(&inst, &model, &cfg, 1e-5, Trainable::ALL).unwrap();
            assert_eq!(report.entries.len(), 2 * stages + k * HEAD_TAPS + 1);
            assert!(
                report.max_relative_error() < 1e-5,
                "{:?}",
                report.entries[0]
            );
        }
    }

    #[test]
    fn seed_gradient_is_linear_in_upstream() {
        let mut rng = StdRng::seed_from_u64(15);
        let inst = random_instance(3, 2, 4, &mut rng);
        let model = random_model(4, 2, &mut rng);
        let cfg = EngineConfig {
            num_stages: 4,
            ..EngineConfig::default()
        };
        let state = forward(&inst, &model, &cfg, true).unwrap();
        let g = Array2::from_shape_fn((9, 2), |_| rng.gen_range(-1.0..1.0));
        let a = backward_cascade(&state, &inst.transitions, &model.params, &g).unwrap();
        let b = backward_cascade(&state, &inst.transitions, &model.params, &(&g * 3.0)).unwrap();
        for (x, y) in a.seed.iter().zip(b.seed.iter()) {
            assert_abs_diff_eq!(3.0 * x, y, epsilon = 1e-13);
        }
    }

    #[test]
    fn quadratic_stub_is_exact() {
        let loss = |v: &[f64]| Ok(3.0 * (v[0] - 1.25).powi(2));
        let theta = [0.4];
        let analytic = [6.0 * (0.4 - 1.25)];
        let report =
            check_gradient(loss, &theta, &analytic, &["x".to_string()], [0], 1e-5).unwrap();
        assert!(report.max_relative_error() < 1e-8);
    }

    #[test]
    fn default_engine_on_small_grid() {
        let mut rng = StdRng::seed_from_u64(16);
        let inst = random_instance(5, 3, 5, &mut rng);
        let model = Model::new(5, 3);
        let cfg = EngineConfig {
            num_stages: 5,
            num_classes: 3,
            ..EngineConfig::default()
        };
        let fine = grad_check(&inst, &model, &cfg, 1e-5, Trainable::ALL).unwrap();
        assert!(fine.max_relative_error() < 1e-5);
        let coarse = grad_check(&inst, &model, &cfg, 1e-1, Trainable::ALL).unwrap();
        assert!(
            coarse.max_relative_error() > 1e-3,
            "{}",
            coarse.max_relative_error()
        );
        // worst first
        assert!(coarse
            .entries
            .windows(2)
            .all(|w| w[0].relative_error >= w[1].relative_error));
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut rng = StdRng::seed_from_u64(17);
        let inst = random_instance(3, 2, 2, &mut rng);
        let cfg = EngineConfig {
            num_stages: 2,
            ..EngineConfig::default()
        };
        let init = random_model(2, 2, &mut rng);
        let tcfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 5,
            ..TrainConfig::default()
        };
        let fit = fit_instances(std::slice::from_ref(&inst), &cfg, &tcfg, init.clone()).unwrap();
        assert_eq!(fit.model, init);
        assert_eq!(fit.history.len(), 5);
        assert!(fit.history.iter().all(|&l| l == fit.history[0]));

        let frozen = TrainConfig {
            epochs: 4,
            trainable: Trainable::NONE,
            ..TrainConfig::default()
        };
        let fit = fit_instances(std::slice::from_ref(&inst), &cfg, &frozen, init.clone()).unwrap();
        assert_eq!(fit.model, init);
        assert_eq!(fit.history.len(), 4);
    }

    #[test]
    fn training_lowers_loss_and_keeps_ranges() {
        let mut rng = StdRng::seed_from_u64(18);
        let inst = random_instance(4, 2, 3, &mut rng);
        let cfg = EngineConfig {
            num_stages: 3,
            ..EngineConfig::default()
        };
        let tcfg = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        let fit = fit_instances(&[inst], &cfg, &tcfg, Model::new(3, 2)).unwrap();
        assert!(fit.history.last().unwrap() < &fit.history[0]);
        for t in 0..3 {
            let (mu, beta) = (fit.model.params.mu(t), fit.model.params.beta(t));
            assert!(mu > 0.0 && mu < 1.0 && beta > 0.0 && beta < 1.0);
        }
    }

    #[test]
    fn params_text_round_trip() {
        let mut rng = StdRng::seed_from_u64(19);
        let model = random_model(5, 2, &mut rng);
        let text = format_params(&model);
        assert!(text.starts_with("mu_logit[0]="));
        assert!(text.contains("\nhead_b="));
        let back = parse_params(&text).unwrap();
        assert_eq!(back, model);
        assert_eq!(format_params(&back), text);
    }

    #[test]
    fn train_config_errors_collected() {
        let bad = TrainConfig {
            learning_rate: -1.0,
            epochs: 0,
            momentum: 1.0,
            ..TrainConfig::default()
        };
        match bad.validate() {
            Err(Error::InvalidConfig(errs)) => assert_eq!(errs.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn params_parse_errors() {
        assert!(parse_params("mu_logit[1]=0.0\n").is_err());
        assert!(parse_params("mu_logit[0]=0\nbeta_logit[0]=0\nhead_b=0\n").is_err());
        assert!(parse_params("gamma[0]=1\n").is_err());
        assert!(parse_params("mu_logit[0]=NaN\n").is_err());
    }
}
