//! Python bindings. Score maps cross the boundary as lists of rows
//! (`nodes x classes`); free-standing ones live on a `1 x N` node grid.

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ::seedwalk as sw;
use sw::diffusion::CascadeParams;
use sw::seed::PixelSeed;
use sw::train::Model;

create_exception!(seedwalk, SeedwalkError, PyValueError);

fn err(e: sw::Error) -> PyErr {
    SeedwalkError::new_err(e.to_string())
}

fn line_grid(n: usize) -> PyResult<sw::NodeGrid> {
    sw::NodeGrid::new(1, n, 1).map_err(err)
}

fn to_array(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(SeedwalkError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat())
        .map_err(|e| SeedwalkError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn score_map(rows: &[Vec<f64>]) -> PyResult<sw::ScoreMap> {
    sw::ScoreMap::new(line_grid(rows.len())?, to_array(rows)?).map_err(err)
}

fn transition(rows: &[Vec<f64>], level: usize) -> PyResult<sw::similarity::TransitionMatrix> {
    sw::similarity::TransitionMatrix::new(level, to_array(rows)?).map_err(err)
}

#[pyclass(name = "EngineConfig", module = "seedwalk", skip_from_py_object)]
#[derive(Clone)]
struct PyEngineConfig {
    inner: sw::EngineConfig,
}

#[pymethods]
impl PyEngineConfig {
    #[new]
    #[pyo3(signature = (
        num_stages = 5, embed_dim = 16, downsample_factor = 5, affinity_scale = true,
        softmax_temperature = 1.0, standardize_epsilon = 1e-5, skip_stages = Vec::new(),
        num_classes = 2, pooling = "average"
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        num_stages: usize,
        embed_dim: usize,
        downsample_factor: usize,
        affinity_scale: bool,
        softmax_temperature: f64,
        standardize_epsilon: f64,
        skip_stages: Vec<usize>,
        num_classes: usize,
        pooling: &str,
    ) -> PyResult<Self> {
        let pooling = match pooling {
            "average" => sw::Pooling::Average,
            "max" => sw::Pooling::Max,
            other => return Err(SeedwalkError::new_err(format!("unknown pooling {other:?}"))),
        };
        let inner = sw::validate_config(sw::EngineConfig {
            num_stages,
            embed_dim,
            downsample_factor,
            affinity_scale,
            softmax_temperature,
            standardize_epsilon,
            skip_stages: skip_stages.into_iter().collect(),
            num_classes,
            pooling,
        })
        .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn num_stages(&self) -> usize {
        self.inner.num_stages
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn downsample_factor(&self) -> usize {
        self.inner.downsample_factor
    }

    #[getter]
    fn skip_stages(&self) -> Vec<usize> {
        self.inner.skip_stages.iter().copied().collect()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "Image", module = "seedwalk")]
struct PyImage {
    inner: sw::Image,
}

#[pymethods]
impl PyImage {
    /// Planar data, channel by channel, values in [0, 1].
    #[new]
    fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: sw::Image::new(channels, height, width, data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: sw::netpbm::read_image(&path).map_err(err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        sw::netpbm::write_image(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (
            self.inner.channels(),
            self.inner.height(),
            self.inner.width(),
        )
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }
}

#[pyclass(name = "TransitionMatrix", module = "seedwalk")]
struct PyTransition {
    inner: sw::similarity::TransitionMatrix,
}

#[pymethods]
impl PyTransition {
    #[new]
    #[pyo3(signature = (rows, level = 0))]
    fn new(rows: Vec<Vec<f64>>, level: usize) -> PyResult<Self> {
        Ok(Self {
            inner: transition(&rows, level)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: sw::similarity::load_transition(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        sw::similarity::save_transition(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    #[getter]
    fn level(&self) -> usize {
        self.inner.level()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.values())
    }

    fn max_row_deviation(&self) -> f64 {
        self.inner.max_row_deviation()
    }
}

#[pyclass(name = "Model", module = "seedwalk", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Untrained parameters: all logits zero, importance head zero.
    #[new]
    #[pyo3(signature = (stages = 5, classes = 2))]
    fn new(stages: usize, classes: usize) -> Self {
        Self {
            inner: Model::new(stages, classes),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: sw::train::load_params(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        sw::train::save_params(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn mu_logits(&self) -> Vec<f64> {
        self.inner.params.mu_logits.clone()
    }

    #[setter]
    fn set_mu_logits(&mut self, v: Vec<f64>) -> PyResult<()> {
        if v.len() != self.inner.params.stages() {
            return Err(SeedwalkError::new_err("one logit per stage"));
        }
        self.inner.params.mu_logits = v;
        Ok(())
    }

    #[getter]
    fn beta_logits(&self) -> Vec<f64> {
        self.inner.params.beta_logits.clone()
    }

    #[setter]
    fn set_beta_logits(&mut self, v: Vec<f64>) -> PyResult<()> {
        if v.len() != self.inner.params.stages() {
            return Err(SeedwalkError::new_err("one logit per stage"));
        }
        self.inner.params.beta_logits = v;
        Ok(())
    }

    /// Effective per-stage values after the logistic.
    fn mu(&self) -> Vec<f64> {
        (0..self.inner.params.stages())
            .map(|t| self.inner.params.mu(t))
            .collect()
    }

    fn beta(&self) -> Vec<f64> {
        (0..self.inner.params.stages())
            .map(|t| self.inner.params.beta(t))
            .collect()
    }

    fn to_text(&self) -> String {
        sw::train::format_params(&self.inner)
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: sw::train::parse_params(text).map_err(err)?,
        })
    }
}

#[pyclass(name = "Segmentation", module = "seedwalk")]
struct PySegmentation {
    inner: sw::pipeline::Segmentation,
}

#[pymethods]
impl PySegmentation {
    /// Node grid `(rows, cols)`.
    #[getter]
    fn grid(&self) -> (usize, usize) {
        (self.inner.grid.height(), self.inner.grid.width())
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        self.inner.labels.labels().to_vec()
    }

    fn pixel_labels(&self) -> PyResult<Vec<u8>> {
        Ok(self.inner.pixel_labels().map_err(err)?.labels().to_vec())
    }

    #[getter]
    fn scores(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.scores.values())
    }

    #[getter]
    fn seed(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.seed.values())
    }

    #[getter]
    fn prediction(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.state.current.values())
    }

    #[getter]
    fn importance(&self) -> Vec<f64> {
        self.inner.importance.values.clone()
    }

    fn influence(&self) -> Vec<f64> {
        sw::seed::influence(&self.inner.scores).values
    }

    /// `y^0 = s`, then one entry per applied stage; empty unless traced.
    fn trace(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner
            .state
            .trace
            .iter()
            .flatten()
            .map(|y| to_rows(y.values()))
            .collect()
    }

    fn transition(&self, stage: usize) -> PyResult<PyTransition> {
        let p = self
            .inner
            .transitions
            .get(stage)
            .ok_or_else(|| SeedwalkError::new_err(format!("no stage {stage}")))?;
        Ok(PyTransition { inner: p.clone() })
    }

    #[getter]
    fn timings(&self) -> HashMap<&'static str, f64> {
        let t = self.inner.timings;
        HashMap::from([
            ("feature", t.feature),
            ("similarity", t.similarity),
            ("seed", t.seed),
            ("diffusion", t.diffusion),
        ])
    }
}

/// Segments an image from `(row, col, class, confidence)` pixel seeds.
#[pyfunction]
#[pyo3(signature = (image, seeds, model = None, config = None, trace = false))]
fn segment(
    image: PyRef<'_, PyImage>,
    seeds: Vec<(usize, usize, usize, f64)>,
    model: Option<PyRef<'_, PyModel>>,
    config: Option<PyRef<'_, PyEngineConfig>>,
    trace: bool,
) -> PyResult<PySegmentation> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let model = model
        .map(|m| m.inner.clone())
        .unwrap_or_else(|| Model::new(cfg.num_stages, cfg.num_classes));
    let seeds: Vec<PixelSeed> = seeds
        .into_iter()
        .map(|(row, col, class, confidence)| PixelSeed {
            row,
            col,
            class,
            confidence,
        })
        .collect();
    let inner =
        sw::pipeline::segment(&image.inner, &seeds, &model, &cfg, None, trace).map_err(err)?;
    Ok(PySegmentation { inner })
}

#[pyfunction]
fn walk_step(
    y: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
    mu: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let out = sw::diffusion::walk_step(&score_map(&y)?, &transition(&p, 0)?, &score_map(&s)?, mu)
        .map_err(err)?;
    Ok(to_rows(out.values()))
}

/// Direct solve of the limiting diffusion for one transition matrix.
#[pyfunction]
fn closed_form(p: Vec<Vec<f64>>, s: Vec<Vec<f64>>, mu: f64) -> PyResult<Vec<Vec<f64>>> {
    let out = sw::diffusion::closed_form(&transition(&p, 0)?, &score_map(&s)?, mu).map_err(err)?;
    Ok(to_rows(out.values()))
}

#[pyfunction]
#[pyo3(signature = (s, transitions, mu_logits, beta_logits, skip_stages = Vec::new()))]
fn run_cascade(
    s: Vec<Vec<f64>>,
    transitions: Vec<Vec<Vec<f64>>>,
    mu_logits: Vec<f64>,
    beta_logits: Vec<f64>,
    skip_stages: Vec<usize>,
) -> PyResult<Vec<Vec<f64>>> {
    let ps = transitions
        .iter()
        .enumerate()
        .map(|(t, rows)| transition(rows, t))
        .collect::<PyResult<Vec<_>>>()?;
    let cfg = sw::EngineConfig {
        num_stages: ps.len(),
        skip_stages: skip_stages.into_iter().collect(),
        ..sw::EngineConfig::default()
    };
    let params = CascadeParams {
        mu_logits,
        beta_logits,
    };
    let state =
        sw::diffusion::run_cascade(&score_map(&s)?, &ps, &params, &cfg, false).map_err(err)?;
    Ok(to_rows(state.current.values()))
}

/// Per-class IoU (None for absent classes) and their mean.
#[pyfunction]
fn miou(pred: Vec<u8>, truth: Vec<u8>, classes: usize) -> PyResult<(Vec<Option<f64>>, f64)> {
    let grid = line_grid(pred.len())?;
    let pred = sw::LabelMap::new(grid, pred).map_err(err)?;
    let truth = sw::LabelMap::new(line_grid(truth.len())?, truth).map_err(err)?;
    let r = sw::metrics::miou(&pred, &truth, classes).map_err(err)?;
    Ok((r.per_class, r.mean))
}

#[pyfunction]
fn argmax_labels(scores: Vec<Vec<f64>>) -> PyResult<Vec<u8>> {
    Ok(sw::metrics::argmax_labels(&score_map(&scores)?)
        .labels()
        .to_vec())
}

/// `(name, analytic, numeric, relative_error)`.
type GradRow = (String, f64, f64, f64);

/// Finite-difference check on a synthetic instance; returns the worst
/// relative error and `(name, analytic, numeric, rel)` entries, worst first.
#[pyfunction]
#[pyo3(signature = (side = 4, classes = 2, fd_epsilon = 1e-5, seed = 0))]
fn grad_check(
    side: usize,
    classes: usize,
    fd_epsilon: f64,
    seed: u64,
) -> PyResult<(f64, Vec<GradRow>)> {
    use rand::Rng;
    let cfg = sw::validate_config(sw::EngineConfig::with_classes(classes)).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = sw::NodeGrid::new(side, side, 1).map_err(err)?;
    let n = grid.count();
    let transitions = (0..cfg.num_stages)
        .map(|t| sw::synth::random_transition(t, n, &mut rng))
        .collect();
    let labels = (0..n).map(|_| rng.gen_range(0..classes) as u8).collect();
    let instance = sw::train::Instance::new(
        transitions,
        sw::synth::random_scores(grid, classes, &mut rng),
        sw::LabelMap::new(grid, labels).map_err(err)?,
    )
    .map_err(err)?;
    let model = Model::new(cfg.num_stages, classes);
    let report = sw::train::grad_check(
        &instance,
        &model,
        &cfg,
        fd_epsilon,
        sw::train::Trainable::ALL,
    )
    .map_err(err)?;
    let entries = report
        .entries
        .iter()
        .map(|e| (e.name.clone(), e.analytic, e.numeric, e.relative_error))
        .collect();
    Ok((report.max_relative_error(), entries))
}

#[pyfunction]
fn read_labels(path: PathBuf) -> PyResult<(usize, usize, Vec<u8>)> {
    let l = sw::netpbm::read_labels(&path).map_err(err)?;
    Ok((l.grid().height(), l.grid().width(), l.labels().to_vec()))
}

#[pyfunction]
fn write_heatmap(path: PathBuf, height: usize, width: usize, values: Vec<f64>) -> PyResult<()> {
    sw::viz::write_heatmap(&path, height, width, &values).map_err(err)
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
fn cli(argv: Vec<String>) -> i32 {
    sw::cli::cli_dispatch(std::iter::once("seedwalk".to_string()).chain(argv))
}

#[pymodule]
fn seedwalk(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SeedwalkError", m.py().get_type::<SeedwalkError>())?;
    m.add_class::<PyEngineConfig>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyTransition>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PySegmentation>()?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(walk_step, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form, m)?)?;
    m.add_function(wrap_pyfunction!(run_cascade, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(argmax_labels, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(read_labels, m)?)?;
    m.add_function(wrap_pyfunction!(write_heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
