//! Images, node grids and the per-node containers shared across the pipeline.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// A channel-major image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "empty shape {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::InvalidImage(format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds an image from a closure evaluated at `(channel, row, col)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for r in 0..height {
                for col in 0..width {
                    data.push(f(c, r, col));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    /// One channel as a row-major slice.
    pub fn plane(&self, channel: usize) -> &[f64] {
        let len = self.height * self.width;
        &self.data[channel * len..(channel + 1) * len]
    }
}

/// The downsampled lattice diffusion runs on. Nodes are numbered row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeGrid {
    height: usize,
    width: usize,
    downsample_factor: usize,
}

impl NodeGrid {
    pub fn new(height: usize, width: usize, downsample_factor: usize) -> Result<Self> {
        if height == 0 || width == 0 || downsample_factor == 0 {
            return Err(Error::DimensionMismatch(format!(
                "node grid {height}x{width} with factor {downsample_factor}"
            )));
        }
        Ok(Self {
            height,
            width,
            downsample_factor,
        })
    }

    /// Grid covering a `height x width` pixel area, using ceiling division.
    pub fn for_image(height: usize, width: usize, downsample_factor: usize) -> Result<Self> {
        if downsample_factor == 0 {
            return Err(Error::DimensionMismatch("downsample factor 0".into()));
        }
        Self::new(
            height.div_ceil(downsample_factor),
            width.div_ceil(downsample_factor),
            downsample_factor,
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.height * self.width
    }

    pub fn downsample_factor(&self) -> usize {
        self.downsample_factor
    }

    pub fn node_index(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.height {
            return Err(Error::OutOfBounds {
                what: "node row",
                index: row,
                limit: self.height,
            });
        }
        if col >= self.width {
            return Err(Error::OutOfBounds {
                what: "node column",
                index: col,
                limit: self.width,
            });
        }
        Ok(row * self.width + col)
    }

    /// Inverse of [`NodeGrid::node_index`].
    pub fn cell(&self, node: usize) -> Result<(usize, usize)> {
        self.check_node(node)?;
        Ok((node / self.width, node % self.width))
    }

    pub fn check_node(&self, node: usize) -> Result<()> {
        if node >= self.count() {
            return Err(Error::OutOfBounds {
                what: "node",
                index: node,
                limit: self.count(),
            });
        }
        Ok(())
    }

    /// Node containing pixel `(row, col)`.
    pub fn node_of_pixel(&self, row: usize, col: usize) -> Result<usize> {
        self.node_index(row / self.downsample_factor, col / self.downsample_factor)
    }
}

/// Convenience wrapper over [`NodeGrid::node_index`].
pub fn node_index(row: usize, col: usize, grid: &NodeGrid) -> Result<usize> {
    grid.node_index(row, col)
}

/// Per-node, per-class real scores (`N x K`).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    grid: NodeGrid,
    values: Array2<f64>,
}

impl ScoreMap {
    pub fn new(grid: NodeGrid, values: Array2<f64>) -> Result<Self> {
        if values.nrows() != grid.count() {
            return Err(Error::DimensionMismatch(format!(
                "score map has {} rows for {} nodes",
                values.nrows(),
                grid.count()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::DimensionMismatch("score map has no classes".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score map".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: NodeGrid, classes: usize) -> Self {
        Self {
            grid,
            values: Array2::zeros((grid.count(), classes.max(1))),
        }
    }

    pub fn grid(&self) -> &NodeGrid {
        &self.grid
    }

    pub fn classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Replaces the values keeping the grid; used on hot paths where shape
    /// has already been checked.
    pub(crate) fn with_values(&self, values: Array2<f64>) -> Self {
        debug_assert_eq!(values.dim(), self.values.dim());
        Self {
            grid: self.grid,
            values,
        }
    }

    pub(crate) fn check_same_shape(&self, other: &ScoreMap, what: &str) -> Result<()> {
        if self.values.dim() != other.values.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.values.dim(),
                other.values.dim()
            )));
        }
        Ok(())
    }

    /// Largest absolute entry difference.
    pub fn max_abs_diff(&self, other: &ScoreMap) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// One class label per node; [`IGNORE_LABEL`] marks unlabeled nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    grid: NodeGrid,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(grid: NodeGrid, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != grid.count() {
            return Err(Error::DimensionMismatch(format!(
                "label map has {} entries for {} nodes",
                labels.len(),
                grid.count()
            )));
        }
        Ok(Self { grid, labels })
    }

    /// Like [`LabelMap::new`] but also checks every non-ignore label is below `classes`.
    pub fn with_classes(grid: NodeGrid, labels: Vec<u8>, classes: usize) -> Result<Self> {
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= classes)
        {
            return Err(Error::ClassOutOfRange {
                class: bad as usize,
                classes,
            });
        }
        Self::new(grid, labels)
    }

    pub fn grid(&self) -> &NodeGrid {
        &self.grid
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Collapses a pixel-resolution label map onto `grid` by per-block majority.
    /// Ignored pixels do not vote; ties go to the lowest class; an all-ignored
    /// block stays ignored.
    pub fn downsample(&self, grid: &NodeGrid) -> Result<LabelMap> {
        let rho = grid.downsample_factor();
        if self.grid.height().div_ceil(rho) != grid.height()
            || self.grid.width().div_ceil(rho) != grid.width()
        {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} labels do not cover a {}x{} grid at factor {rho}",
                self.grid.height(),
                self.grid.width(),
                grid.height(),
                grid.width()
            )));
        }
        let mut votes = vec![[0u32; 256]; grid.count()];
        for r in 0..self.grid.height() {
            for c in 0..self.grid.width() {
                let label = self.labels[r * self.grid.width() + c];
                if label != IGNORE_LABEL {
                    votes[(r / rho) * grid.width() + c / rho][label as usize] += 1;
                }
            }
        }
        let labels = votes
            .iter()
            .map(|v| {
                let mut best = IGNORE_LABEL;
                let mut best_count = 0;
                for (label, &count) in v.iter().enumerate().take(255) {
                    if count > best_count {
                        best = label as u8;
                        best_count = count;
                    }
                }
                best
            })
            .collect();
        LabelMap::new(*grid, labels)
    }

    /// Expands node labels back to pixel resolution (nearest node).
    pub fn upsample(&self, height: usize, width: usize) -> Result<LabelMap> {
        let pixel_grid = NodeGrid::new(height, width, 1)?;
        let mut labels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                labels.push(self.labels[self.grid.node_of_pixel(r, c)?]);
            }
        }
        LabelMap::new(pixel_grid, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn node_index_examples() {
        let grid = NodeGrid::new(3, 4, 1).unwrap();
        assert_eq!(node_index(0, 0, &grid).unwrap(), 0);
        assert_eq!(node_index(1, 2, &grid).unwrap(), 6);
        assert_eq!(node_index(2, 3, &grid).unwrap(), 11);
    }

    #[test]
    fn node_index_out_of_range() {
        let grid = NodeGrid::new(3, 4, 1).unwrap();
        assert!(matches!(
            grid.node_index(3, 0),
            Err(Error::OutOfBounds {
                what: "node row",
                ..
            })
        ));
        assert!(matches!(
            grid.node_index(0, 4),
            Err(Error::OutOfBounds {
                what: "node column",
                ..
            })
        ));
        assert!(grid.cell(12).is_err());
    }

    #[test]
    fn ceil_division_sizing() {
        assert_eq!(NodeGrid::for_image(10, 10, 5).unwrap().height(), 2);
        assert_eq!(NodeGrid::for_image(11, 10, 5).unwrap().height(), 3);
    }

    #[test]
    fn image_rejects_out_of_range_values() {
        assert!(Image::new(1, 1, 2, vec![0.0, 1.5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(Image::new(1, 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn label_downsample_majority() {
        let pixels = NodeGrid::new(2, 4, 1).unwrap();
        let labels = LabelMap::new(pixels, vec![1, 1, 255, 255, 0, 1, 255, 255]).unwrap();
        let grid = NodeGrid::for_image(2, 4, 2).unwrap();
        let down = labels.downsample(&grid).unwrap();
        assert_eq!(down.labels(), &[1, IGNORE_LABEL]);
    }

    proptest! {
        #[test]
        fn node_index_round_trips(h in 1usize..=64, w in 1usize..=64) {
            let grid = NodeGrid::new(h, w, 1).unwrap();
            for r in 0..h {
                for c in 0..w {
                    let i = grid.node_index(r, c).unwrap();
                    prop_assert!(i < grid.count());
                    prop_assert_eq!(grid.cell(i).unwrap(), (r, c));
                }
            }
        }
    }
}
