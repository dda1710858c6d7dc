//! Similarity branch: per-level projection to node embeddings, inner-product
//! affinities, and row-softmax transition matrices.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{put_f64s, put_u32, read_file, write_atomic, Reader};
use crate::config::{EngineConfig, Pooling};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeaturePyramid};
use crate::grid::NodeGrid;

/// Tolerance used for the symmetry and row-sum invariants.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-9;

const PROJECTION_SEED: u64 = 0x5_eed0_fd1f;
const MATRIX_MAGIC: &[u8; 4] = b"TMAT";

/// 1x1 convolution, per-image standardization and node pooling for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub level: usize,
    /// `d x d_t`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub epsilon: f64,
    pub pool_factor: usize,
    pub pooling: Pooling,
}

impl Projection {
    /// Uniform weights in `[-1/sqrt(d_t), 1/sqrt(d_t)]` from a fixed per-level seed; zero bias.
    pub fn seeded(level: usize, input_dim: usize, cfg: &EngineConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED ^ ((level as u64) << 32));
        let bound = 1.0 / (input_dim as f64).sqrt();
        let weights = Array2::from_shape_fn((cfg.embed_dim, input_dim), |_| {
            rng.gen_range(-bound..=bound)
        });
        Self {
            level,
            weights,
            bias: Array1::zeros(cfg.embed_dim),
            epsilon: cfg.standardize_epsilon,
            pool_factor: cfg.downsample_factor,
            pooling: cfg.pooling,
        }
    }

    /// One seeded projection per pyramid level.
    pub fn for_pyramid(pyramid: &FeaturePyramid, cfg: &EngineConfig) -> Vec<Projection> {
        pyramid
            .levels()
            .iter()
            .map(|l| Projection::seeded(l.level(), l.dim(), cfg))
            .collect()
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Symmetric pairwise affinities `W` with their row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub values: Array2<f64>,
    pub degrees: Vec<f64>,
}

impl AffinityMatrix {
    pub fn from_values(values: Array2<f64>) -> Self {
        let degrees = values.rows().into_iter().map(|r| r.sum()).collect();
        Self { values, degrees }
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.size();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((self.values[[i, j]] - self.values[[j, i]]).abs());
            }
        }
        worst
    }
}

/// Row-stochastic random-walk matrix for one cascade stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    level: usize,
    values: Array2<f64>,
}

impl TransitionMatrix {
    /// Wraps `values`, checking entries lie in `[0,1]` and rows sum to one.
    pub fn new(level: usize, values: Array2<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() || values.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "transition matrix must be square, got {:?}",
                values.dim()
            )));
        }
        let p = Self { level, values };
        let deviation = p.max_row_deviation();
        if !(deviation <= STOCHASTIC_TOLERANCE) {
            return Err(Error::DimensionMismatch(format!(
                "matrix is not row-stochastic (row-sum deviation {deviation:e})"
            )));
        }
        if p.values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::DimensionMismatch(
                "transition entries must lie in [0, 1]".into(),
            ));
        }
        Ok(p)
    }

    pub fn identity(level: usize, n: usize) -> Self {
        Self {
            level,
            values: Array2::eye(n),
        }
    }

    pub fn uniform(level: usize, n: usize) -> Self {
        Self {
            level,
            values: Array2::from_elem((n, n), 1.0 / n as f64),
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Largest `|row sum - 1|` over all rows.
    pub fn max_row_deviation(&self) -> f64 {
        self.values
            .rows()
            .into_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, |a, b| if b.is_nan() { f64::NAN } else { a.max(b) })
    }
}

pub fn project(features: &FeatureMap, proj: &Projection, grid: &NodeGrid) -> Result<Array2<f64>> {
    let (h, w) = (features.height(), features.width());
    if proj.weights.ncols() != features.dim() {
        return Err(Error::DimensionMismatch(format!(
            "projection for level {} takes {} inputs, features have {}",
            proj.level,
            proj.weights.ncols(),
            features.dim()
        )));
    }
    if proj.bias.len() != proj.weights.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "projection bias has {} entries for {} outputs",
            proj.bias.len(),
            proj.weights.nrows()
        )));
    }
    let rho = proj.pool_factor;
    if rho != grid.downsample_factor()
        || h.div_ceil(rho) != grid.height()
        || w.div_ceil(rho) != grid.width()
    {
        return Err(Error::DimensionMismatch(format!(
            "{h}x{w} features pooled by {rho} do not match a {}x{} grid at factor {}",
            grid.height(),
            grid.width(),
            grid.downsample_factor()
        )));
    }
    if !(proj.epsilon > 0.0)
        || proj
            .weights
            .iter()
            .chain(&proj.bias)
            .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite(format!(
            "projection for level {}",
            proj.level
        )));
    }

    // Evaluated pixel by pixel in a fixed order so equal inputs map to bitwise-equal outputs.
    let input = features.data();
    let mut pixels = Array2::zeros((proj.weights.nrows(), input.ncols()));
    for (p, column) in input.columns().into_iter().enumerate() {
        for (o, weights) in proj.weights.rows().into_iter().enumerate() {
            let dot: f64 = weights.iter().zip(column.iter()).map(|(a, b)| a * b).sum();
            pixels[[o, p]] = dot + proj.bias[o];
        }
    }
    for mut channel in pixels.rows_mut() {
        let n = channel.len() as f64;
        // Shifted two-pass statistics: a constant channel standardizes to exact zeros.
        let pivot = channel[0];
        let mean = pivot + channel.iter().map(|v| v - pivot).sum::<f64>() / n;
        let var = channel.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = var.sqrt() + proj.epsilon;
        channel.mapv_inplace(|v| (v - mean) / scale);
    }

    let d = pixels.nrows();
    let mut nodes = Array2::zeros((d, grid.count()));
    let area = (rho * rho) as f64;
    for node_row in 0..grid.height() {
        for node_col in 0..grid.width() {
            let node = node_row * grid.width() + node_col;
            for ch in 0..d {
                let mut acc = match proj.pooling {
                    Pooling::Average => 0.0,
                    Pooling::Max => f64::NEG_INFINITY,
                };
                for dr in 0..rho {
                    let r = (node_row * rho + dr).min(h - 1);
                    for dc in 0..rho {
                        let c = (node_col * rho + dc).min(w - 1);
                        let v = pixels[[ch, r * w + c]];
                        match proj.pooling {
                            Pooling::Average => acc += v,
                            Pooling::Max => acc = acc.max(v),
                        }
                    }
                }
                nodes[[ch, node]] = match proj.pooling {
                    Pooling::Average => acc / area,
                    Pooling::Max => acc,
                };
            }
        }
    }
    if nodes.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "embedding for level {}",
            proj.level
        )));
    }
    Ok(nodes)
}

/// Inner products of embedding columns, `d x N -> N x N`.
pub fn affinity(embeddings: &Array2<f64>, cfg: &EngineConfig) -> AffinityMatrix {
    let (d, n) = embeddings.dim();
    let columns = embeddings.t().as_standard_layout().into_owned();
    let scale = if cfg.affinity_scale {
        1.0 / (d as f64).sqrt()
    } else {
        1.0
    };
    let mut values = Array2::zeros((n, n));
    // Filled pairwise so W is exactly symmetric and equal columns give equal rows.
    for i in 0..n {
        let zi = columns.row(i);
        for j in i..n {
            let zj = columns.row(j);
            let dot: f64 = zi.iter().zip(zj.iter()).map(|(a, b)| a * b).sum();
            let v = dot * scale;
            values[[i, j]] = v;
            values[[j, i]] = v;
        }
    }
    AffinityMatrix::from_values(values)
}

/// Temperature softmax along each row, shifted by the row maximum.
pub fn row_softmax(w: &AffinityMatrix, temperature: f64) -> TransitionMatrix {
    row_softmax_values(&w.values, temperature)
}

pub(crate) fn row_softmax_values(w: &Array2<f64>, temperature: f64) -> TransitionMatrix {
    let mut values = w.mapv(|v| v / temperature);
    for mut row in values.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    TransitionMatrix { level: 0, values }
}

pub fn build_transitions(
    pyramid: &FeaturePyramid,
    projections: &[Projection],
    grid: &NodeGrid,
    cfg: &EngineConfig,
) -> Result<Vec<TransitionMatrix>> {
    if projections.len() != pyramid.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} projections for {} pyramid levels",
            projections.len(),
            pyramid.len()
        )));
    }
    if pyramid.len() != cfg.num_stages {
        return Err(Error::DimensionMismatch(format!(
            "pyramid has {} levels, configuration expects {}",
            pyramid.len(),
            cfg.num_stages
        )));
    }
    pyramid
        .levels()
        .iter()
        .zip(projections)
        .map(|(features, proj)| {
            let embeddings = project(features, proj, grid)?;
            let w = affinity(&embeddings, cfg);
            let mut p = row_softmax(&w, cfg.softmax_temperature);
            p.level = features.level();
            Ok(p)
        })
        .collect()
}

/// Row `node` of `p` laid out as an `h' x w'` heat grid.
pub fn transition_row(p: &TransitionMatrix, node: usize, grid: &NodeGrid) -> Result<Array2<f64>> {
    if p.size() != grid.count() {
        return Err(Error::DimensionMismatch(format!(
            "{}-node matrix on a {}-node grid",
            p.size(),
            grid.count()
        )));
    }
    grid.check_node(node)?;
    let row = p.values.row(node).to_owned();
    Ok(row
        .into_shape_with_order((grid.height(), grid.width()))
        .expect("row length equals grid size"))
}

pub fn encode_transition(p: &TransitionMatrix) -> Vec<u8> {
    let mut out = MATRIX_MAGIC.to_vec();
    put_u32(&mut out, p.size());
    put_u32(&mut out, p.level);
    put_f64s(&mut out, p.values.iter());
    out
}

pub fn decode_transition(bytes: &[u8]) -> Result<TransitionMatrix> {
    let mut reader = Reader::new(bytes, "TMAT");
    reader.expect_magic(MATRIX_MAGIC)?;
    let n = reader.u32("matrix size")? as usize;
    let level = reader.u32("matrix level")? as usize;
    let values = reader.f64s(n * n, "matrix payload")?;
    if reader.remaining() != 0 {
        return Err(Error::malformed(
            "TMAT",
            format!("{} trailing bytes", reader.remaining()),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("transition matrix".into()));
    }
    let values = Array2::from_shape_vec((n, n), values).expect("payload length checked");
    TransitionMatrix::new(level, values)
}

pub fn save_transition(p: &TransitionMatrix, path: &Path) -> Result<()> {
    write_atomic(path, &encode_transition(p))
}

pub fn load_transition(path: &Path) -> Result<TransitionMatrix> {
    decode_transition(&read_file(path)?).map_err(|e| e.at(path))
}
