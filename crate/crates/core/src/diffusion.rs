//! Random-walk diffusion: single walks, the identity-mapped cascade, the
//! closed-form limit, the unrolled power series and the energy diagnostic.

use ndarray::Array2;

use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::grid::ScoreMap;
use crate::numeric::{logistic, solve_dense};
use crate::seed::ImportanceMap;
use crate::similarity::{AffinityMatrix, TransitionMatrix};

/// Per-stage walk weights `mu_t` and identity-mapping weights `beta_t`,
/// stored as logits so the effective values stay in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeParams {
    pub mu_logits: Vec<f64>,
    pub beta_logits: Vec<f64>,
}

impl CascadeParams {
    /// All logits zero, i.e. `mu_t = beta_t = 0.5`.
    pub fn new(stages: usize) -> Self {
        Self {
            mu_logits: vec![0.0; stages],
            beta_logits: vec![0.0; stages],
        }
    }

    pub fn uniform(stages: usize, mu_logit: f64, beta_logit: f64) -> Self {
        Self {
            mu_logits: vec![mu_logit; stages],
            beta_logits: vec![beta_logit; stages],
        }
    }

    pub fn stages(&self) -> usize {
        self.mu_logits.len()
    }

    /// Effective `mu` of 0-based stage `t`.
    pub fn mu(&self, t: usize) -> f64 {
        logistic(self.mu_logits[t])
    }

    pub fn beta(&self, t: usize) -> f64 {
        logistic(self.beta_logits[t])
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu_logits.len() != self.beta_logits.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} mu logits but {} beta logits",
                self.mu_logits.len(),
                self.beta_logits.len()
            )));
        }
        if self
            .mu_logits
            .iter()
            .chain(&self.beta_logits)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("cascade parameters".into()));
        }
        Ok(())
    }
}

/// Output of a cascade run.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeState {
    pub current: ScoreMap,
    /// Number of the last stage applied (1-based), 0 if none ran.
    pub stage: usize,
    /// 0-based indices of the stages that ran, in order.
    pub applied: Vec<usize>,
    /// `y^0 = s` followed by the output of each applied stage.
    pub trace: Option<Vec<ScoreMap>>,
}

fn check_walk_shapes(y: &ScoreMap, p: &TransitionMatrix, s: &ScoreMap) -> Result<()> {
    y.check_same_shape(s, "walk state and seed")?;
    if p.size() != y.values().nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{}-node transition matrix applied to {} nodes",
            p.size(),
            y.values().nrows()
        )));
    }
    Ok(())
}

fn walk_values(y: &Array2<f64>, p: &TransitionMatrix, s: &Array2<f64>, mu: f64) -> Array2<f64> {
    let mut out = p.values().dot(y);
    out.zip_mut_with(s, |o, &sv| *o = mu * *o + (1.0 - mu) * sv);
    out
}

/// One random walk: `mu P y + (1 - mu) s`.
pub fn walk_step(y: &ScoreMap, p: &TransitionMatrix, s: &ScoreMap, mu: f64) -> Result<ScoreMap> {
    check_walk_shapes(y, p, s)?;
    Ok(y.with_values(walk_values(y.values(), p, s.values(), mu)))
}

/// `beta R(y, P, s, mu) + (1 - beta) y`.
pub fn cascade_step(
    y: &ScoreMap,
    p: &TransitionMatrix,
    s: &ScoreMap,
    mu: f64,
    beta: f64,
) -> Result<ScoreMap> {
    check_walk_shapes(y, p, s)?;
    let mut out = walk_values(y.values(), p, s.values(), mu);
    out.zip_mut_with(y.values(), |o, &yv| *o = beta * *o + (1.0 - beta) * yv);
    Ok(y.with_values(out))
}

/// Runs every enabled stage in order starting from `y^0 = s`.
pub fn run_cascade(
    s: &ScoreMap,
    transitions: &[TransitionMatrix],
    params: &CascadeParams,
    cfg: &EngineConfig,
    keep_trace: bool,
) -> Result<CascadeState> {
    params.validate()?;
    if transitions.len() != cfg.num_stages || params.stages() != cfg.num_stages {
        return Err(Error::DimensionMismatch(format!(
            "{} transition matrices and {} parameter stages for a {}-stage cascade",
            transitions.len(),
            params.stages(),
            cfg.num_stages
        )));
    }
    let mut y = s.clone();
    let mut trace = keep_trace.then(|| vec![s.clone()]);
    let mut applied = Vec::new();
    for (t, p) in transitions.iter().enumerate() {
        if !cfg.stage_enabled(t + 1) {
            continue;
        }
        y = cascade_step(&y, p, s, params.mu(t), params.beta(t))?;
        applied.push(t);
        if let Some(trace) = trace.as_mut() {
            trace.push(y.clone());
        }
    }
    Ok(CascadeState {
        current: y,
        stage: applied.last().map_or(0, |t| t + 1),
        applied,
        trace,
    })
}

/// Solves `(I - mu P) y = (1 - mu) s` directly.
pub fn closed_form(p: &TransitionMatrix, s: &ScoreMap, mu: f64) -> Result<ScoreMap> {
    let n = p.size();
    if s.values().nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n}-node transition matrix with a {}-node seed",
            s.values().nrows()
        )));
    }
    let mut system = p.values().mapv(|v| -mu * v);
    for i in 0..n {
        system[[i, i]] += 1.0;
    }
    let rhs = s.values().mapv(|v| (1.0 - mu) * v);
    let y = solve_dense(&system, &rhs)?;
    ScoreMap::new(*s.grid(), y)
}

/// `(mu P)^{t+1} s + (1 - mu) sum_{i=0..t} (mu P)^i s` for `t = terms`.
pub fn power_series(p: &TransitionMatrix, s: &ScoreMap, mu: f64, terms: usize) -> Result<ScoreMap> {
    check_walk_shapes(s, p, s)?;
    let mut power = s.values().clone();
    let mut sum = Array2::<f64>::zeros(power.dim());
    for _ in 0..=terms {
        sum += &power;
        power = p.values().dot(&power) * mu;
    }
    sum *= 1.0 - mu;
    Ok(s.with_values(power + sum))
}

/// Max-norm of `y - (mu P y + (1 - mu) s)`.
pub fn fixed_point_residual(
    y: &ScoreMap,
    p: &TransitionMatrix,
    s: &ScoreMap,
    mu: f64,
) -> Result<f64> {
    let next = walk_step(y, p, s, mu)?;
    Ok(y.max_abs_diff(&next))
}

/// Smoothness-plus-fidelity objective with symmetric degree normalization:
/// `1/2 (mu sum_ij W_ij |y_i/sqrt(d_i) - y_j/sqrt(d_j)| + (1 - mu) sum_i M_i |y_i - x_i|)`
/// with Euclidean row norms.
pub fn energy(
    y: &ScoreMap,
    w: &AffinityMatrix,
    m: &ImportanceMap,
    x: &ScoreMap,
    mu: f64,
) -> Result<f64> {
    y.check_same_shape(x, "energy prediction and score map")?;
    let n = y.values().nrows();
    if w.size() != n || w.degrees.len() != n || m.values.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "energy over {n} nodes with a {}-node affinity and {}-node importance",
            w.size(),
            m.values.len()
        )));
    }
    if let Some((node, &degree)) = w.degrees.iter().enumerate().find(|(_, &d)| !(d > 0.0)) {
        return Err(Error::DegenerateGraph { node, degree });
    }
    let normalized: Array2<f64> = Array2::from_shape_fn(y.values().dim(), |(i, k)| {
        y.values()[[i, k]] / w.degrees[i].sqrt()
    });
    let mut smooth = 0.0;
    for i in 0..n {
        for j in 0..n {
            let weight = w.values[[i, j]];
            if weight == 0.0 {
                continue;
            }
            let dist = normalized
                .row(i)
                .iter()
                .zip(normalized.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            smooth += weight * dist;
        }
    }
    let fidelity: f64 = (0..n)
        .map(|i| {
            let dist = y
                .values()
                .row(i)
                .iter()
                .zip(x.values().row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            m.values[i] * dist
        })
        .sum();
    Ok(0.5 * (mu * smooth + (1.0 - mu) * fidelity))
}
