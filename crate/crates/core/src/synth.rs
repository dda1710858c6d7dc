//! Reproducible synthetic inputs for the oracle, benchmark and evaluation suites.

use ndarray::Array2;
use rand::Rng;

use crate::error::Result;
use crate::grid::{Image, LabelMap, NodeGrid, ScoreMap};
use crate::seed::PixelSeed;
use crate::similarity::TransitionMatrix;

/// Dense row-stochastic matrix with uniform random weights.
pub fn random_transition<R: Rng>(level: usize, n: usize, rng: &mut R) -> TransitionMatrix {
    let mut values = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..1.0));
    for mut row in values.rows_mut() {
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    TransitionMatrix::new(level, values).expect("normalized rows")
}

pub fn random_scores<R: Rng>(grid: NodeGrid, classes: usize, rng: &mut R) -> ScoreMap {
    let values = Array2::from_shape_fn((grid.count(), classes), |_| rng.gen_range(-1.0..1.0));
    ScoreMap::new(grid, values).expect("finite scores")
}

/// A three-channel image split in two by a random line, each side with its
/// own base color and texture, plus the pixel-level ground truth.
pub fn two_region_image<R: Rng>(
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<(Image, LabelMap)> {
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let (nx, ny) = (angle.cos(), angle.sin());
    let cx = width as f64 * rng.gen_range(0.35..0.65);
    let cy = height as f64 * rng.gen_range(0.35..0.65);
    let base: [[f64; 3]; 2] = loop {
        let a = [(); 3].map(|_| rng.gen_range(0.15..0.85));
        let b = [(); 3].map(|_| rng.gen_range(0.15..0.85));
        let dist: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y): (&f64, &f64)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        if dist > 0.35 {
            break [a, b];
        }
    };
    // Region 0 is smooth with mild noise, region 1 carries stripes.
    let period = rng.gen_range(3.0..6.0);
    let mut labels = vec![0u8; height * width];
    let mut noise = vec![[0.0; 3]; height * width];
    for (p, label) in labels.iter_mut().enumerate() {
        let (r, c) = ((p / width) as f64, (p % width) as f64);
        *label = u8::from((c - cx) * nx + (r - cy) * ny > 0.0);
        noise[p] = [(); 3].map(|_| rng.gen_range(-0.04..0.04));
    }
    let image = Image::from_fn(3, height, width, |ch, r, c| {
        let p = r * width + c;
        let region = labels[p] as usize;
        let texture = if region == 1 {
            0.08 * (2.0 * std::f64::consts::PI * (r + c) as f64 / period).sin()
        } else {
            0.0
        };
        (base[region][ch] + texture + noise[p][ch]).clamp(0.0, 1.0)
    })?;
    Ok((
        image,
        LabelMap::new(NodeGrid::new(height, width, 1)?, labels)?,
    ))
}

/// Picks `fraction` of the pixels uniformly without replacement and labels
/// them from `truth`, replacing the label with a different class with
/// probability `noise`.
pub fn sample_pixel_seeds<R: Rng>(
    truth: &LabelMap,
    classes: usize,
    fraction: f64,
    noise: f64,
    rng: &mut R,
) -> Vec<PixelSeed> {
    let width = truth.grid().width();
    let total = truth.labels().len();
    let count = ((total as f64 * fraction).round() as usize).min(total);
    rand::seq::index::sample(rng, total, count)
        .into_iter()
        .filter_map(|p| {
            let label = truth.labels()[p] as usize;
            if label >= classes {
                return None;
            }
            let class = if classes > 1 && rng.gen_bool(noise) {
                (label + rng.gen_range(1..classes)) % classes
            } else {
                label
            };
            Some(PixelSeed {
                row: p / width,
                col: p % width,
                class,
                confidence: 1.0,
            })
        })
        .collect()
}
