//! The full segmentation path: features, transitions, seed, cascade, labels.

use std::time::Instant;

use crate::config::{validate_config, EngineConfig};
use crate::diffusion::{run_cascade, CascadeState};
use crate::error::{Error, Result};
use crate::features::{extract_pyramid, FeaturePyramid};
use crate::grid::{Image, LabelMap, NodeGrid, ScoreMap};
use crate::metrics::argmax_labels;
use crate::seed::{
    importance, make_seed, rasterize_seeds, seeds_to_nodes, ImportanceMap, PixelSeed,
};
use crate::similarity::{build_transitions, Projection, TransitionMatrix};
use crate::train::Model;

/// Wall-clock seconds per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    pub feature: f64,
    pub similarity: f64,
    pub seed: f64,
    pub diffusion: f64,
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub grid: NodeGrid,
    pub pyramid: FeaturePyramid,
    pub transitions: Vec<TransitionMatrix>,
    /// Score map `x` rasterized from the seeds.
    pub scores: ScoreMap,
    pub importance: ImportanceMap,
    pub seed: ScoreMap,
    pub state: CascadeState,
    /// Node-resolution labels.
    pub labels: LabelMap,
    pub timings: PhaseTimings,
}

impl Segmentation {
    /// Labels at the input image resolution.
    pub fn pixel_labels(&self) -> Result<LabelMap> {
        self.labels
            .upsample(self.pyramid.height(), self.pyramid.width())
    }
}

/// Segments `image` from pixel seeds. A precomputed `pyramid` replaces feature
/// extraction and must match the image size.
pub fn segment(
    image: &Image,
    seeds: &[PixelSeed],
    model: &Model,
    cfg: &EngineConfig,
    pyramid: Option<FeaturePyramid>,
    keep_trace: bool,
) -> Result<Segmentation> {
    let cfg = &validate_config(cfg.clone())?;
    if model.params.stages() != cfg.num_stages {
        return Err(Error::DimensionMismatch(format!(
            "parameters cover {} stages, engine has {}",
            model.params.stages(),
            cfg.num_stages
        )));
    }
    model.params.validate()?;
    let mut timings = PhaseTimings::default();

    let clock = Instant::now();
    let pyramid = match pyramid {
        Some(p) => {
            if p.height() != image.height() || p.width() != image.width() {
                return Err(Error::DimensionMismatch(format!(
                    "pyramid is {}x{}, image is {}x{}",
                    p.height(),
                    p.width(),
                    image.height(),
                    image.width()
                )));
            }
            p
        }
        None => extract_pyramid(image, cfg)?,
    };
    timings.feature = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let grid = NodeGrid::for_image(image.height(), image.width(), cfg.downsample_factor)?;
    let projections = Projection::for_pyramid(&pyramid, cfg);
    let transitions = build_transitions(&pyramid, &projections, &grid, cfg)?;
    timings.similarity = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let scores = rasterize_seeds(&seeds_to_nodes(seeds, &grid)?, &grid, cfg.num_classes)?;
    let importance = importance(&scores, &model.head, &grid)?;
    let seed = make_seed(&scores, &importance)?;
    timings.seed = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let state = run_cascade(&seed, &transitions, &model.params, cfg, keep_trace)?;
    timings.diffusion = clock.elapsed().as_secs_f64();

    let labels = argmax_labels(&state.current);
    Ok(Segmentation {
        grid,
        pyramid,
        transitions,
        scores,
        importance,
        seed,
        state,
        labels,
        timings,
    })
}
