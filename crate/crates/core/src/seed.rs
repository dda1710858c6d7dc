//! Seed branch: sparse seeds to score maps, the logistic importance head,
//! the importance-weighted seed `s = M x`, and the influence map.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::binio::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::grid::{LabelMap, NodeGrid, ScoreMap, IGNORE_LABEL};
use crate::numeric::logistic;

/// Taps in the importance head's local window.
pub const HEAD_TAPS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedEntry {
    pub node: usize,
    pub class: usize,
    pub confidence: f64,
}

/// Node-level seeds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseSeeds {
    pub entries: Vec<SeedEntry>,
}

impl SparseSeeds {
    pub fn new(entries: Vec<SeedEntry>) -> Self {
        Self { entries }
    }

    pub fn max_class(&self) -> Option<usize> {
        self.entries.iter().map(|e| e.class).max()
    }
}

/// A seed placed at image resolution, as read from a seed file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSeed {
    pub row: usize,
    pub col: usize,
    pub class: usize,
    pub confidence: f64,
}

pub fn rasterize_seeds(seeds: &SparseSeeds, grid: &NodeGrid, classes: usize) -> Result<ScoreMap> {
    let mut values = Array2::<f64>::zeros((grid.count(), classes));
    let mut seen = vec![false; grid.count() * classes];
    for e in &seeds.entries {
        grid.check_node(e.node)?;
        if e.class >= classes {
            return Err(Error::ClassOutOfRange {
                class: e.class,
                classes,
            });
        }
        if !(e.confidence.is_finite() && e.confidence > 0.0) {
            return Err(Error::InvalidSeed(format!(
                "confidence {} at node {} must be positive and finite",
                e.confidence, e.node
            )));
        }
        let slot = e.node * classes + e.class;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(Error::DuplicateSeed {
                node: e.node,
                class: e.class,
            });
        }
        values[[e.node, e.class]] = e.confidence;
    }
    ScoreMap::new(*grid, values)
}

/// Collapses pixel seeds onto nodes by confidence-weighted majority per block.
/// The winning class (lowest index on ties) is seeded with the mean confidence
/// of its votes.
pub fn seeds_to_nodes(pixels: &[PixelSeed], grid: &NodeGrid) -> Result<SparseSeeds> {
    let mut votes: Vec<Vec<(f64, usize)>> = vec![Vec::new(); grid.count()];
    for p in pixels {
        if !(p.confidence.is_finite() && p.confidence > 0.0) {
            return Err(Error::InvalidSeed(format!(
                "confidence {} at pixel ({}, {}) must be positive and finite",
                p.confidence, p.row, p.col
            )));
        }
        let node = grid.node_of_pixel(p.row, p.col)?;
        let tally = &mut votes[node];
        if tally.len() <= p.class {
            tally.resize(p.class + 1, (0.0, 0));
        }
        tally[p.class].0 += p.confidence;
        tally[p.class].1 += 1;
    }
    let entries = votes
        .iter()
        .enumerate()
        .filter_map(|(node, tally)| {
            let mut best: Option<(usize, f64, usize)> = None;
            for (class, &(weight, count)) in tally.iter().enumerate() {
                if count > 0 && best.is_none_or(|(_, w, _)| weight > w) {
                    best = Some((class, weight, count));
                }
            }
            best.map(|(class, weight, count)| SeedEntry {
                node,
                class,
                confidence: weight / count as f64,
            })
        })
        .collect();
    Ok(SparseSeeds { entries })
}

/// Parses `row,col,class,confidence` lines; `#` starts a comment.
pub fn parse_seed_text(text: &str) -> Result<Vec<PixelSeed>> {
    let mut seeds = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: &str| {
            Error::malformed("seed", format!("line {}: {reason}: {raw:?}", lineno + 1))
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad("expected row,col,class,confidence"));
        }
        let row = fields[0].parse().map_err(|_| bad("bad row"))?;
        let col = fields[1].parse().map_err(|_| bad("bad column"))?;
        let class = fields[2].parse().map_err(|_| bad("bad class"))?;
        let confidence: f64 = fields[3].parse().map_err(|_| bad("bad confidence"))?;
        if !(confidence.is_finite() && confidence > 0.0) {
            return Err(bad("confidence must be positive"));
        }
        seeds.push(PixelSeed {
            row,
            col,
            class,
            confidence,
        });
    }
    Ok(seeds)
}

pub fn format_seed_text(seeds: &[PixelSeed]) -> String {
    let mut out = String::new();
    for s in seeds {
        writeln!(out, "{},{},{},{}", s.row, s.col, s.class, s.confidence).unwrap();
    }
    out
}

/// Seeds from a pixel-resolution scribble mask (value = class, 255 = unseeded),
/// each with confidence 1.
pub fn seeds_from_scribble(mask: &LabelMap) -> Vec<PixelSeed> {
    let w = mask.grid().width();
    mask.labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != IGNORE_LABEL)
        .map(|(i, &l)| PixelSeed {
            row: i / w,
            col: i % w,
            class: l as usize,
            confidence: 1.0,
        })
        .collect()
}

/// Reads a seed text file or, for `.pgm` files, a scribble mask.
pub fn load_pixel_seeds(path: &Path) -> Result<Vec<PixelSeed>> {
    let bytes = read_file(path)?;
    if bytes.starts_with(b"P5") {
        let mask = crate::netpbm::decode_labels(&bytes).map_err(|e| e.at(path))?;
        return Ok(seeds_from_scribble(&mask));
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::malformed("seed", "file is not UTF-8 text").at(path))?;
    parse_seed_text(&text).map_err(|e| e.at(path))
}

pub fn save_pixel_seeds(seeds: &[PixelSeed], path: &Path) -> Result<()> {
    write_atomic(path, format_seed_text(seeds).as_bytes())
}

/// Local 3x3 linear layer over the score channels followed by a logistic.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceHead {
    /// `classes * 9` taps; tap `(dr, dc)` of class `k` sits at `k*9 + (dr+1)*3 + (dc+1)`.
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ImportanceHead {
    /// All-zero head: `M = 0.5` everywhere.
    pub fn zeros(classes: usize) -> Self {
        Self {
            weights: vec![0.0; classes * HEAD_TAPS],
            bias: 0.0,
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.len() / HEAD_TAPS
    }

    pub fn tap_index(class: usize, dr: isize, dc: isize) -> usize {
        class * HEAD_TAPS + ((dr + 1) * 3 + (dc + 1)) as usize
    }

    fn check(&self, classes: usize) -> Result<()> {
        if self.weights.len() != classes * HEAD_TAPS {
            return Err(Error::DimensionMismatch(format!(
                "importance head has {} weights, {classes} classes need {}",
                self.weights.len(),
                classes * HEAD_TAPS
            )));
        }
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("importance head".into()));
        }
        Ok(())
    }
}

/// Diagonal of the importance matrix `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub grid: NodeGrid,
    pub values: Vec<f64>,
}

/// Per-node total absolute score.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMap {
    pub grid: NodeGrid,
    pub values: Vec<f64>,
}

/// Node index of the window tap `(dr, dc)` around `node`, replicating edges.
pub(crate) fn neighbor(grid: &NodeGrid, node: usize, dr: isize, dc: isize) -> usize {
    let (h, w) = (grid.height() as isize, grid.width() as isize);
    let r = (node as isize / w + dr).clamp(0, h - 1);
    let c = (node as isize % w + dc).clamp(0, w - 1);
    (r * w + c) as usize
}

/// Pre-activation of the importance head at every node.
pub(crate) fn importance_logits(x: &ScoreMap, head: &ImportanceHead) -> Result<Vec<f64>> {
    let classes = x.classes();
    head.check(classes)?;
    let grid = x.grid();
    let values = x.values();
    Ok((0..grid.count())
        .map(|node| {
            let mut acc = head.bias;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let source = neighbor(grid, node, dr, dc);
                    for k in 0..classes {
                        acc += head.weights[ImportanceHead::tap_index(k, dr, dc)]
                            * values[[source, k]];
                    }
                }
            }
            acc
        })
        .collect())
}

pub fn importance(x: &ScoreMap, head: &ImportanceHead, grid: &NodeGrid) -> Result<ImportanceMap> {
    if x.grid() != grid {
        return Err(Error::DimensionMismatch(
            "score map and importance grid differ".into(),
        ));
    }
    let values = importance_logits(x, head)?
        .into_iter()
        .map(logistic)
        .collect();
    Ok(ImportanceMap {
        grid: *grid,
        values,
    })
}

/// `s = M x`: scales each node's score row by its importance.
pub fn make_seed(x: &ScoreMap, m: &ImportanceMap) -> Result<ScoreMap> {
    if x.grid() != &m.grid || m.values.len() != x.grid().count() {
        return Err(Error::DimensionMismatch(
            "importance map and score map grids differ".into(),
        ));
    }
    let mut values = x.values().clone();
    for (mut row, &weight) in values.rows_mut().into_iter().zip(&m.values) {
        row.mapv_inplace(|v| weight * v);
    }
    ScoreMap::new(*x.grid(), values)
}

pub fn influence(x: &ScoreMap) -> InfluenceMap {
    InfluenceMap {
        grid: *x.grid(),
        values: x
            .values()
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum())
            .collect(),
    }
}
