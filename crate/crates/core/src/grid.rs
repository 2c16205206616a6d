//! Feature-cell coordinates and dense motion fields over them.

use gmrw_tape::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Pixel-centre coordinates of the feature cells of a frame, row-major.
///
/// Cell `(r, q)` at effective stride `s` sits at pixel
/// `(q·s + (s−1)/2, r·s + (s−1)/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid {
    rows: usize,
    cols: usize,
    stride: usize,
    coords: Vec<[f32; 2]>,
}

/// Builds the cell-centre grid for a `height × width` frame.
pub fn grid_coordinates(height: usize, width: usize, effective_stride: usize) -> Result<CoordinateGrid> {
    if effective_stride == 0 || height % effective_stride != 0 || width % effective_stride != 0 {
        return Err(Error::Dimension(format!(
            "{height}x{width} is not divisible by stride {effective_stride}"
        )));
    }
    let rows = height / effective_stride;
    let cols = width / effective_stride;
    let s = effective_stride as f32;
    let offset = (s - 1.0) / 2.0;
    let coords = (0..rows)
        .flat_map(|r| (0..cols).map(move |q| [q as f32 * s + offset, r as f32 * s + offset]))
        .collect();
    Ok(CoordinateGrid { rows, cols, stride: effective_stride, coords })
}

impl CoordinateGrid {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn coords(&self) -> &[[f32; 2]] {
        &self.coords
    }

    /// Frame size `(height, width)` in pixels.
    pub fn frame_size(&self) -> (usize, usize) {
        (self.rows * self.stride, self.cols * self.stride)
    }

    /// Continuous `(column, row)` cell index of a pixel position.
    pub fn cell_position(&self, x: f32, y: f32) -> (f32, f32) {
        let s = self.stride as f32;
        let offset = (s - 1.0) / 2.0;
        ((x - offset) / s, (y - offset) / s)
    }

    /// Index of the cell whose area contains the pixel position.
    pub fn cell_index(&self, x: f32, y: f32) -> Option<usize> {
        let (q, r) = self.cell_position(x, y);
        let (q, r) = (q.round(), r.round());
        (q >= 0.0 && r >= 0.0 && (q as usize) < self.cols && (r as usize) < self.rows)
            .then(|| r as usize * self.cols + q as usize)
    }

    /// The `n × 2` coordinate matrix on a tape-compatible tensor.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::new(
            &[self.len(), 2],
            self.coords.iter().flat_map(|c| [S::lit(c[0] as f64), S::lit(c[1] as f64)]).collect(),
        )
    }

    /// Bilinear interpolation of a per-cell field at a pixel position,
    /// replicating edge cells outside the cell-centre hull.
    pub fn sample<const K: usize>(&self, field: &[[f32; K]], x: f32, y: f32) -> [f32; K] {
        debug_assert_eq!(field.len(), self.len());
        let (q, r) = self.cell_position(x, y);
        let q = q.clamp(0.0, (self.cols - 1) as f32);
        let r = r.clamp(0.0, (self.rows - 1) as f32);
        let q0 = q.floor() as usize;
        let r0 = r.floor() as usize;
        let q1 = (q0 + 1).min(self.cols - 1);
        let r1 = (r0 + 1).min(self.rows - 1);
        let fq = q - q0 as f32;
        let fr = r - r0 as f32;
        let at = |rr: usize, qq: usize| field[rr * self.cols + qq];
        let mut out = [0.0; K];
        for (k, o) in out.iter_mut().enumerate() {
            let top = at(r0, q0)[k] * (1.0 - fq) + at(r0, q1)[k] * fq;
            let bottom = at(r1, q0)[k] * (1.0 - fq) + at(r1, q1)[k] * fq;
            *o = top * (1.0 - fr) + bottom * fr;
        }
        out
    }
}

/// Per-cell pixel displacements between two frames.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    pub flow: Vec<[f32; 2]>,
    pub grid: CoordinateGrid,
}

impl MotionField {
    pub fn new(flow: Vec<[f32; 2]>, grid: CoordinateGrid) -> Result<Self> {
        if flow.len() != grid.len() {
            return Err(Error::Shape(format!("{} flow vectors for {} cells", flow.len(), grid.len())));
        }
        if flow.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("motion field".into()));
        }
        Ok(Self { flow, grid })
    }

    pub fn zeros(grid: CoordinateGrid) -> Self {
        Self { flow: vec![[0.0; 2]; grid.len()], grid }
    }

    /// Displacement at an arbitrary pixel position.
    pub fn sample(&self, x: f32, y: f32) -> [f32; 2] {
        self.grid.sample(&self.flow, x, y)
    }
}
