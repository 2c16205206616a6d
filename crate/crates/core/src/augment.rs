//! Random resized crops for the two halves of a cycle, and the supervision
//! label warped between them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use gmrw_tape::Tensor;

use crate::clip::{Frame, VideoClip};
use crate::error::{Error, Result};
use crate::grid::{grid_coordinates, CoordinateGrid};

/// Affine resampling of a source frame into an `output_size` frame.
///
/// `matrix` maps output pixel coordinates to source pixel coordinates.
/// `crop_box` is `(x0, y0, w, h)` in edge coordinates, where the source
/// frame spans `[0, W] × [0, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineAugmentation {
    pub matrix: [[f64; 3]; 2],
    pub crop_box: [f64; 4],
    /// `(height, width)` of the produced frame.
    pub output_size: (usize, usize),
    pub source_size: (usize, usize),
}

impl AffineAugmentation {
    /// Resizes the box `crop_box` of a `source_size` frame to `output_size`.
    pub fn from_crop(crop_box: [f64; 4], source_size: (usize, usize), output_size: (usize, usize)) -> Result<Self> {
        let [x0, y0, w, h] = crop_box;
        let (sh, sw) = (source_size.0 as f64, source_size.1 as f64);
        let tol = 1e-9;
        if !(w > 0.0 && h > 0.0) || x0 < -tol || y0 < -tol || x0 + w > sw + tol || y0 + h > sh + tol {
            return Err(Error::InfeasibleCrop(format!("box {crop_box:?} outside {sw}x{sh} frame")));
        }
        if output_size.0 == 0 || output_size.1 == 0 {
            return Err(Error::InfeasibleCrop("empty output size".into()));
        }
        let ax = w / output_size.1 as f64;
        let ay = h / output_size.0 as f64;
        let matrix = [[ax, 0.0, x0 + 0.5 * ax - 0.5], [0.0, ay, y0 + 0.5 * ay - 0.5]];
        Ok(Self { matrix, crop_box, output_size, source_size })
    }

    /// Full-frame resize.
    pub fn identity(source_size: (usize, usize), output_size: (usize, usize)) -> Self {
        Self::from_crop([0.0, 0.0, source_size.1 as f64, source_size.0 as f64], source_size, output_size)
            .expect("full frame is a valid crop")
    }

    /// Source coordinates of an output pixel position.
    pub fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.matrix;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    /// Output coordinates of a source pixel position.
    pub fn inverse(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let m = &self.matrix;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(Error::NonInvertible);
        }
        let (dx, dy) = (x - m[0][2], y - m[1][2]);
        Ok(((m[1][1] * dx - m[0][1] * dy) / det, (m[0][0] * dy - m[1][0] * dx) / det))
    }
}

/// Draws a crop of the output's aspect ratio whose side is a uniformly
/// sampled fraction of the largest such crop, placed uniformly.
pub fn sample_augmentation(
    rng: &mut impl Rng,
    scale_range: [f64; 2],
    source_size: (usize, usize),
    output_size: (usize, usize),
) -> Result<AffineAugmentation> {
    let [lo, hi] = scale_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::InfeasibleCrop(format!("scale range {scale_range:?} is not within (0, 1]")));
    }
    if source_size.0 == 0 || source_size.1 == 0 || output_size.0 == 0 || output_size.1 == 0 {
        return Err(Error::InfeasibleCrop("empty frame".into()));
    }
    let (sh, sw) = (source_size.0 as f64, source_size.1 as f64);
    let aspect = output_size.1 as f64 / output_size.0 as f64;
    let max_w = sw.min(sh * aspect);
    let max_h = max_w / aspect;
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let (w, h) = (max_w * scale, max_h * scale);
    let x0 = if sw - w > 0.0 { rng.random_range(0.0..=sw - w) } else { 0.0 };
    let y0 = if sh - h > 0.0 { rng.random_range(0.0..=sh - h) } else { 0.0 };
    AffineAugmentation::from_crop([x0, y0, w, h], source_size, output_size)
}

pub fn apply_augmentation(frame: &Frame, aug: &AffineAugmentation) -> Frame {
    let (h, w) = aug.output_size;
    Frame::from_fn(h, w, |u, v| {
        let (x, y) = aug.forward(u as f64, v as f64);
        frame.sample(x as f32, y as f32)
    })
}

/// Soft correspondence between the cells of two augmented views.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedLabel {
    /// `n × n`; row `i` holds bilinear weights over backward-view cells.
    pub target: Tensor<f32>,
    pub valid_mask: Vec<bool>,
}

impl WarpedLabel {
    pub fn identity(n: usize) -> Self {
        Self { target: Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 }), valid_mask: vec![true; n] }
    }

    pub fn valid_rows(&self) -> usize {
        self.valid_mask.iter().filter(|v| **v).count()
    }
}

/// Snaps values within rounding noise of an integer.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-6 {
        r
    } else {
        v
    }
}

/// Label mapping each cell of the `t_f` view to its location in the `t_b` view.
pub fn warp_label(t_f: &AffineAugmentation, t_b: &AffineAugmentation, grid: &CoordinateGrid) -> Result<WarpedLabel> {
    if t_f.source_size != t_b.source_size || t_f.output_size != t_b.output_size {
        return Err(Error::Shape("augmentations differ in source or output size".into()));
    }
    if grid.frame_size() != t_f.output_size {
        return Err(Error::Shape(format!("grid covers {:?}, views are {:?}", grid.frame_size(), t_f.output_size)));
    }
    let n = grid.len();
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut target = vec![0.0f32; n * n];
    let mut valid_mask = vec![false; n];
    for (i, c) in grid.coords().iter().enumerate() {
        let (sx, sy) = t_f.forward(c[0] as f64, c[1] as f64);
        let (bx, by) = t_b.inverse(sx, sy)?;
        let s = grid.stride() as f64;
        let off = (s - 1.0) / 2.0;
        let q = snap((bx - off) / s);
        let r = snap((by - off) / s);
        if !(q >= 0.0 && r >= 0.0 && q <= (cols - 1) as f64 && r <= (rows - 1) as f64) {
            continue;
        }
        valid_mask[i] = true;
        let (q0, r0) = (q.floor() as usize, r.floor() as usize);
        let (fq, fr) = (q - q0 as f64, r - r0 as f64);
        let row = &mut target[i * n..(i + 1) * n];
        for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
            for (dq, wq) in [(0, 1.0 - fq), (1, fq)] {
                let wgt = wr * wq;
                if wgt > 0.0 {
                    row[(r0 + dr) * cols + q0 + dq] += wgt as f32;
                }
            }
        }
    }
    Ok(WarpedLabel { target: Tensor::new(&[n, n], target), valid_mask })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale_range: [f64; 2],
    /// Inclusive range of the temporal distance between the two frames.
    pub frame_gap_range: [usize; 2],
    /// Distinct crops for the forward and backward halves of the cycle.
    pub label_warp: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { scale_range: [0.6, 1.0], frame_gap_range: [1, 4], label_warp: true }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("scale_range {:?} must lie in (0, 1]", self.scale_range)));
        }
        let [g0, g1] = self.frame_gap_range;
        if g0 == 0 || g0 > g1 {
            return Err(Error::Config(format!("frame_gap_range {:?} is empty", self.frame_gap_range)));
        }
        Ok(())
    }
}

/// Training sample `[T^f(I_1), T^f(I_2), T^b(I_1)]` with its cycle label.
#[derive(Clone, Debug)]
pub struct Palindrome {
    pub frames: [Frame; 3],
    pub label: WarpedLabel,
    pub t_f: AffineAugmentation,
    pub t_b: AffineAugmentation,
    pub frame_indices: (usize, usize),
}

/// Samples two frames `frame_gap` apart and augments them into a palindrome
/// whose views are `output_size` with cells every `stride` pixels.
pub fn build_palindrome(
    clip: &VideoClip,
    frame_gap: usize,
    config: &AugmentConfig,
    output_size: (usize, usize),
    stride: usize,
    rng: &mut impl Rng,
) -> Result<Palindrome> {
    if frame_gap == 0 {
        return Err(Error::Config("frame gap must be positive".into()));
    }
    if clip.len() < frame_gap + 1 {
        return Err(Error::ClipTooShort { frames: clip.len(), needed: frame_gap + 1 });
    }
    let grid = grid_coordinates(output_size.0, output_size.1, stride)?;
    let t1 = rng.random_range(0..clip.len() - frame_gap);
    let t2 = t1 + frame_gap;
    let source = (clip.height(), clip.width());
    let t_f = sample_augmentation(rng, config.scale_range, source, output_size)?;
    let (t_b, label) = if config.label_warp {
        let t_b = sample_augmentation(rng, config.scale_range, source, output_size)?;
        let label = warp_label(&t_f, &t_b, &grid)?;
        (t_b, label)
    } else {
        (t_f.clone(), WarpedLabel::identity(grid.len()))
    };
    let frames = [
        apply_augmentation(clip.frame(t1), &t_f),
        apply_augmentation(clip.frame(t2), &t_f),
        apply_augmentation(clip.frame(t1), &t_b),
    ];
    Ok(Palindrome { frames, label, t_f, t_b, frame_indices: (t1, t2) })
}
