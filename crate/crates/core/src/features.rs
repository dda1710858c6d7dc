//! Hand-crafted feature pyramid standing in for backbone taps, plus the
//! `FPYR` container for loading precomputed pyramids.
//!
//! The five built-in levels grow in receptive field: raw color and position,
//! 3x3 local statistics, 7x7 gradient orientation histograms, 15x15 context
//! averages, and soft memberships to per-image color/position clusters.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{put_f64s, put_u32, read_file, write_atomic, Reader};
use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::grid::Image;

/// Number of levels the built-in extractor produces.
pub const BUILTIN_LEVELS: usize = 5;
/// Side of the largest descriptor window; smaller images are rejected.
pub const MIN_IMAGE_SIDE: usize = 15;
/// Cluster count for the level-5 soft assignments.
pub const CLUSTERS: usize = 8;
pub const LLOYD_ITERATIONS: usize = 10;
/// Temperature of the level-5 soft assignment over squared color distance.
pub const ASSIGNMENT_TEMPERATURE: f64 = 0.05;

const PYRAMID_MAGIC: &[u8; 4] = b"FPYR";

/// One level of features at full image resolution, stored `dim x (h*w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    level: usize,
    height: usize,
    width: usize,
    data: Array2<f64>,
}

impl FeatureMap {
    pub fn new(level: usize, height: usize, width: usize, data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "feature level {level}: {}x{} data for a {height}x{width} grid",
                data.nrows(),
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature level {level}")));
        }
        Ok(Self {
            level,
            height,
            width,
            data,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }
}

/// Ordered feature levels; entry `t` carries level index `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::DimensionMismatch("pyramid has no levels".into()))?;
        let (h, w) = (first.height, first.width);
        for (t, level) in levels.iter().enumerate() {
            if level.level != t {
                return Err(Error::DimensionMismatch(format!(
                    "pyramid entry {t} carries level index {}",
                    level.level
                )));
            }
            if (level.height, level.width) != (h, w) {
                return Err(Error::DimensionMismatch(format!(
                    "level {t} is {}x{}, level 0 is {h}x{w}",
                    level.height, level.width
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.levels[0].height
    }

    pub fn width(&self) -> usize {
        self.levels[0].width
    }

    fn expect_levels(&self, expected: usize) -> Result<()> {
        if self.levels.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "pyramid has {} levels, configuration expects {expected}",
                self.levels.len()
            )));
        }
        Ok(())
    }
}

/// Feature dimension of each built-in level for a `channels`-channel image.
pub fn builtin_dims(channels: usize) -> [usize; BUILTIN_LEVELS] {
    [channels + 2, 2 * channels, 5, channels, CLUSTERS]
}

pub fn extract_pyramid(image: &Image, cfg: &EngineConfig) -> Result<FeaturePyramid> {
    if cfg.num_stages != BUILTIN_LEVELS {
        return Err(Error::DimensionMismatch(format!(
            "built-in extractor yields {BUILTIN_LEVELS} levels, configuration asks for {}",
            cfg.num_stages
        )));
    }
    let (h, w) = (image.height(), image.width());
    if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
        return Err(Error::DescriptorWindow {
            height: h,
            width: w,
            min: MIN_IMAGE_SIDE,
        });
    }
    let levels = vec![
        FeatureMap::new(0, h, w, color_position(image))?,
        FeatureMap::new(1, h, w, local_statistics(image))?,
        FeatureMap::new(2, h, w, gradient_histogram(image))?,
        FeatureMap::new(3, h, w, context_average(image))?,
        FeatureMap::new(4, h, w, cluster_assignments(image))?,
    ];
    FeaturePyramid::new(levels)
}

fn color_position(image: &Image) -> Array2<f64> {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let mut out = Array2::zeros((c + 2, h * w));
    for ch in 0..c {
        for (p, &v) in image.plane(ch).iter().enumerate() {
            out[[ch, p]] = v;
        }
    }
    for r in 0..h {
        for col in 0..w {
            out[[c, r * w + col]] = r as f64 / h as f64;
            out[[c + 1, r * w + col]] = col as f64 / w as f64;
        }
    }
    out
}

/// 3x3 mean and standard deviation per channel, means first.
fn local_statistics(image: &Image) -> Array2<f64> {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let mut out = Array2::zeros((2 * c, h * w));
    for ch in 0..c {
        let plane = image.plane(ch);
        for r in 0..h {
            for col in 0..w {
                // Shift by the center value so flat patches give exactly zero spread.
                let center = plane[r * w + col];
                let (mut sum, mut sum_sq) = (0.0, 0.0);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let v = plane[clamp(r, dr, h) * w + clamp(col, dc, w)] - center;
                        sum += v;
                        sum_sq += v * v;
                    }
                }
                let mean = sum / 9.0;
                let var = (sum_sq / 9.0 - mean * mean).max(0.0);
                out[[ch, r * w + col]] = center + mean;
                out[[c + ch, r * w + col]] = var.sqrt();
            }
        }
    }
    out
}

/// Gradient magnitude plus a 4-bin unsigned orientation histogram averaged
/// over a 7x7 window.
fn gradient_histogram(image: &Image) -> Array2<f64> {
    let (h, w) = (image.height(), image.width());
    let gray = grayscale(image);
    let mut out = Array2::zeros((5, h * w));
    let mut votes = vec![vec![0.0; h * w]; 4];
    for r in 0..h {
        for col in 0..w {
            let gx = 0.5 * (gray[r * w + clamp(col, 1, w)] - gray[r * w + clamp(col, -1, w)]);
            let gy = 0.5 * (gray[clamp(r, 1, h) * w + col] - gray[clamp(r, -1, h) * w + col]);
            let magnitude = gx.hypot(gy);
            out[[0, r * w + col]] = magnitude;
            if magnitude > 0.0 {
                let theta = gy.atan2(gx).rem_euclid(PI);
                let bin = ((theta / (PI / 4.0)) as usize).min(3);
                votes[bin][r * w + col] = magnitude;
            }
        }
    }
    for (bin, plane) in votes.iter().enumerate() {
        for (p, v) in box_mean(plane, h, w, 3).into_iter().enumerate() {
            out[[1 + bin, p]] = v;
        }
    }
    out
}

fn context_average(image: &Image) -> Array2<f64> {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let mut out = Array2::zeros((c, h * w));
    for ch in 0..c {
        for (p, v) in box_mean(image.plane(ch), h, w, 7).into_iter().enumerate() {
            out[[ch, p]] = v;
        }
    }
    out
}

/// Soft memberships to [`CLUSTERS`] centroids fitted by Lloyd's method on
/// color plus normalized position. Memberships compare color only, so pixels
/// of equal color share a membership vector.
fn cluster_assignments(image: &Image) -> Array2<f64> {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let n = h * w;
    let dim = c + 2;
    let mut points = vec![0.0; n * dim];
    for p in 0..n {
        for ch in 0..c {
            points[p * dim + ch] = image.plane(ch)[p];
        }
        points[p * dim + c] = (p / w) as f64 / h as f64;
        points[p * dim + c + 1] = (p % w) as f64 / w as f64;
    }
    let centroids = lloyd(&points, dim, CLUSTERS, image_checksum(image));

    let mut out = Array2::zeros((CLUSTERS, n));
    let mut logits = [0.0; CLUSTERS];
    for p in 0..n {
        let color = &points[p * dim..p * dim + c];
        for (k, logit) in logits.iter_mut().enumerate() {
            let centroid = &centroids[k * dim..k * dim + c];
            *logit = -squared_distance(color, centroid) / ASSIGNMENT_TEMPERATURE;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (k, l) in logits.iter().enumerate() {
            out[[k, p]] = (l - max).exp() / total;
        }
    }
    out
}

/// k-means++ seeding followed by a fixed number of Lloyd iterations.
fn lloyd(points: &[f64], dim: usize, k: usize, seed: u64) -> Vec<f64> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(point(rng.gen_range(0..n)));
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| squared_distance(point(i), &centroids[..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let chosen = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(point(chosen));
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(squared_distance(point(i), &centroids[start..start + dim]));
        }
    }

    let mut assignment = vec![0usize; n];
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for _ in 0..LLOYD_ITERATIONS {
        for (i, slot) in assignment.iter_mut().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for j in 0..k {
                let d = squared_distance(point(i), &centroids[j * dim..(j + 1) * dim]);
                if d < best.0 {
                    best = (d, j);
                }
            }
            *slot = best.1;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for (i, &j) in assignment.iter().enumerate() {
            counts[j] += 1;
            for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[j] > 0 {
                for d in 0..dim {
                    centroids[j * dim + d] = sums[j * dim + d] / counts[j] as f64;
                }
            }
        }
    }
    centroids
}

/// FNV-1a over the shape and pixel bits; seeds the cluster initialization.
fn image_checksum(image: &Image) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for dim in [image.channels(), image.height(), image.width()] {
        feed(&(dim as u64).to_le_bytes());
    }
    for v in image.data() {
        feed(&v.to_bits().to_le_bytes());
    }
    hash
}

fn grayscale(image: &Image) -> Vec<f64> {
    let c = image.channels() as f64;
    let mut gray = vec![0.0; image.height() * image.width()];
    for ch in 0..image.channels() {
        for (g, v) in gray.iter_mut().zip(image.plane(ch)) {
            *g += v;
        }
    }
    gray.iter_mut().for_each(|g| *g /= c);
    gray
}

/// Separable `(2r+1) x (2r+1)` mean with edge replication.
fn box_mean(plane: &[f64], h: usize, w: usize, radius: isize) -> Vec<f64> {
    let taps = (2 * radius + 1) as f64;
    let mut horizontal = vec![0.0; h * w];
    for r in 0..h {
        for col in 0..w {
            let mut sum = 0.0;
            for d in -radius..=radius {
                sum += plane[r * w + clamp(col, d, w)];
            }
            horizontal[r * w + col] = sum / taps;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for col in 0..w {
            let mut sum = 0.0;
            for d in -radius..=radius {
                sum += horizontal[clamp(r, d, h) * w + col];
            }
            out[r * w + col] = sum / taps;
        }
    }
    out
}

fn clamp(i: usize, offset: isize, len: usize) -> usize {
    (i as isize + offset).clamp(0, len as isize - 1) as usize
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn encode_pyramid(pyramid: &FeaturePyramid) -> Vec<u8> {
    let mut out = PYRAMID_MAGIC.to_vec();
    for level in &pyramid.levels {
        put_u32(&mut out, level.level);
        put_u32(&mut out, level.dim());
        put_u32(&mut out, level.height);
        put_u32(&mut out, level.width);
        put_f64s(&mut out, level.data.iter());
    }
    out
}

pub fn decode_pyramid(bytes: &[u8], cfg: &EngineConfig) -> Result<FeaturePyramid> {
    let mut reader = Reader::new(bytes, "FPYR");
    reader.expect_magic(PYRAMID_MAGIC)?;
    let mut levels = Vec::new();
    while reader.remaining() > 0 {
        let level = reader.u32("level index")? as usize;
        let dim = reader.u32("level dimension")? as usize;
        let h = reader.u32("level height")? as usize;
        let w = reader.u32("level width")? as usize;
        if dim == 0 || h == 0 || w == 0 {
            return Err(Error::malformed(
                "FPYR",
                format!("level {level} has empty shape {dim}x{h}x{w}"),
            ));
        }
        let values = reader.f64s(dim * h * w, "level payload")?;
        let data =
            Array2::from_shape_vec((dim, h * w), values).expect("payload length checked by reader");
        levels.push(FeatureMap::new(level, h, w, data)?);
    }
    let pyramid = FeaturePyramid::new(levels)?;
    pyramid.expect_levels(cfg.num_stages)?;
    Ok(pyramid)
}

pub fn save_pyramid(pyramid: &FeaturePyramid, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pyramid(pyramid))
}

pub fn load_pyramid(path: &Path, cfg: &EngineConfig) -> Result<FeaturePyramid> {
    decode_pyramid(&read_file(path)?, cfg).map_err(|e| e.at(path))
}
