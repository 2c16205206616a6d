//! Cycle-consistency loss, expected motion, edge-aware smoothness and the
//! supervised Huber variant.

use std::rc::Rc;

use gmrw_tape::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::augment::WarpedLabel;
use crate::clip::Frame;
use crate::error::{Error, Result};
use crate::grid::{CoordinateGrid, MotionField};
use crate::matcher::TransitionMatrix;
use crate::resample::average_pool;

/// Added inside the logarithm of the cycle cross-entropy.
pub const LOG_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub smoothness_weight: f64,
    /// Edge sensitivity on the `[0, 1]` colour scale.
    pub edge_sensitivity: f64,
    pub use_smoothness: bool,
    /// Huber threshold of the supervised variant, in grid cells.
    pub huber_delta: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { smoothness_weight: 0.1, edge_sensitivity: 150.0, use_smoothness: true, huber_delta: 1.0 }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothness_weight >= 0.0 && self.smoothness_weight.is_finite()) {
            return Err(Error::Config("smoothness_weight must be non-negative".into()));
        }
        if !(self.edge_sensitivity > 0.0 && self.edge_sensitivity.is_finite()) {
            return Err(Error::Config("edge_sensitivity must be positive".into()));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config("huber_delta must be positive".into()));
        }
        Ok(())
    }

    /// Weight actually applied to the smoothness term.
    pub fn effective_smoothness_weight(&self) -> f64 {
        if self.use_smoothness {
            self.smoothness_weight
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub crw: f64,
    pub smooth: f64,
    pub total: f64,
    pub valid_row_fraction: f64,
}

pub fn total_loss(crw: f64, smooth: f64, valid_row_fraction: f64, config: &ObjectiveConfig) -> Result<LossReport> {
    let total = crw + config.effective_smoothness_weight() * smooth;
    if !total.is_finite() || !smooth.is_finite() {
        return Err(Error::NonFinite(format!("loss (crw {crw}, smooth {smooth})")));
    }
    Ok(LossReport { crw, smooth, total, valid_row_fraction })
}

/// Mean over valid label rows of the cross-entropy against the chained walk.
pub fn crw_loss(chained: &TransitionMatrix, label: &WarpedLabel) -> Result<f64> {
    if chained.probs.shape() != label.target.shape() || label.valid_mask.len() != chained.rows() {
        return Err(Error::Shape(format!(
            "chained {:?} vs label {:?}",
            chained.probs.shape(),
            label.target.shape()
        )));
    }
    if label.valid_rows() == 0 {
        return Err(Error::UndefinedLoss);
    }
    let tape = Tape::<f64>::inference();
    let p = tape.constant(chained.probs.cast());
    let loss = p.soft_cross_entropy(Rc::new(label.target.cast()), Rc::new(label.valid_mask.clone()), LOG_FLOOR);
    Ok(loss.value().item())
}

/// `A·D − D` on the tape for transitions `[.., n, n]` between two frames of
/// the same grid.
pub fn flow_from_probs<'t, S: Scalar>(probs: &Var<'t, S>, grid: &CoordinateGrid) -> Var<'t, S> {
    let d = probs.tape().constant(grid.to_tensor());
    probs.matmul(&d).sub(&d)
}

/// Expected per-cell displacement under the transition matrix.
pub fn expected_flow(a: &TransitionMatrix, grid: &CoordinateGrid) -> Result<MotionField> {
    let n = grid.len();
    if a.probs.shape() != [n, n] || a.source_grid != (grid.rows(), grid.cols()) || a.target_grid != a.source_grid {
        return Err(Error::Shape(format!("transition {:?} for a {}-cell grid", a.probs.shape(), n)));
    }
    let tape = Tape::<f64>::inference();
    let f = flow_from_probs(&tape.constant(a.probs.cast()), grid);
    let flow = f.value().data().chunks(2).map(|c| [c[0] as f32, c[1] as f32]).collect();
    MotionField::new(flow, grid.clone())
}

/// Edge-aware weights `exp(−λ·|∂I|)` per direction for images already at
/// grid resolution. Derivatives are central differences averaged over
/// channels; border cells without both neighbours get weight one (unused).
pub fn edge_weights<S: Scalar>(images: &[&Frame], edge_sensitivity: f64) -> (Tensor<S>, Tensor<S>) {
    let (h, w) = (images[0].height(), images[0].width());
    let mut wx = Vec::with_capacity(images.len() * h * w);
    let mut wy = Vec::with_capacity(images.len() * h * w);
    let grad = |a: [f32; 3], b: [f32; 3]| a.iter().zip(&b).map(|(p, q)| ((p - q) / 2.0).abs() as f64).sum::<f64>() / 3.0;
    for img in images {
        for y in 0..h {
            for x in 0..w {
                let gx = if x >= 1 && x + 1 < w { grad(img.pixel(x + 1, y), img.pixel(x - 1, y)) } else { 0.0 };
                let gy = if y >= 1 && y + 1 < h { grad(img.pixel(x, y + 1), img.pixel(x, y - 1)) } else { 0.0 };
                wx.push(S::lit((-edge_sensitivity * gx).exp()));
                wy.push(S::lit((-edge_sensitivity * gy).exp()));
            }
        }
    }
    (Tensor::new(&[images.len(), h, w], wx), Tensor::new(&[images.len(), h, w], wy))
}

/// Brings an image to one pixel per grid cell.
pub fn image_at_grid(image: &Frame, grid: &CoordinateGrid) -> Result<Frame> {
    if (image.height(), image.width()) == (grid.rows(), grid.cols()) {
        return Ok(image.clone());
    }
    if (image.height(), image.width()) == grid.frame_size() {
        return Ok(average_pool(image, grid.stride()));
    }
    Err(Error::Shape(format!(
        "{}x{} image does not align with a {}x{} grid",
        image.height(),
        image.width(),
        grid.rows(),
        grid.cols()
    )))
}

/// Edge-aware second-order smoothness of a flow field, measured in cells.
///
/// `image` may be at frame or grid resolution.
pub fn smoothness_loss(flow: &MotionField, image: &Frame, edge_sensitivity: f64) -> Result<f64> {
    let grid = &flow.grid;
    if grid.rows() < 3 || grid.cols() < 3 {
        return Err(Error::Dimension(format!(
            "{}x{} grid is too small for second differences",
            grid.rows(),
            grid.cols()
        )));
    }
    let img = image_at_grid(image, grid)?;
    let (wx, wy) = edge_weights::<f64>(&[&img], edge_sensitivity);
    let s = grid.stride() as f64;
    let f = Tensor::new(
        &[1, grid.rows(), grid.cols(), 2],
        flow.flow.iter().flat_map(|v| [v[0] as f64 / s, v[1] as f64 / s]).collect(),
    );
    let tape = Tape::<f64>::inference();
    Ok(tape.constant(f).second_order_smoothness(Rc::new(wx), Rc::new(wy)).value().item())
}

/// Mean Huber penalty on the per-cell displacement error, in cells.
pub fn supervised_loss(pred: &MotionField, gt: &MotionField, delta: f64) -> Result<f64> {
    if pred.grid != gt.grid {
        return Err(Error::Shape("predicted and reference flows use different grids".into()));
    }
    let s = pred.grid.stride() as f64;
    let to_tensor = |m: &MotionField| {
        Tensor::new(&[m.flow.len(), 2], m.flow.iter().flat_map(|v| [v[0] as f64 / s, v[1] as f64 / s]).collect())
    };
    let tape = Tape::<f64>::inference();
    Ok(tape.constant(to_tensor(pred)).huber(Rc::new(to_tensor(gt)), delta).value().item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::grid_coordinates;
    use proptest::prelude::*;

    fn tm(n: usize, v: Vec<f32>) -> TransitionMatrix {
        TransitionMatrix::new(Tensor::new(&[n, n], v), (1, n), (1, n)).unwrap()
    }

    fn eye(n: usize) -> Vec<f32> {
        (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
    }

    fn label(target: Vec<f32>, n: usize) -> WarpedLabel {
        WarpedLabel { target: Tensor::new(&[n, n], target), valid_mask: vec![true; n] }
    }

    #[test]
    fn perfect_cycle_has_floor_loss() {
        let l = crw_loss(&tm(3, eye(3)), &label(eye(3), 3)).unwrap();
        assert!(l.abs() <= 1e-8);
        let shift = vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        assert!(crw_loss(&tm(3, shift.clone()), &label(shift, 3)).unwrap() <= 1e-8);
    }

    #[test]
    fn uniform_walk_costs_ln2() {
        let l = crw_loss(&tm(2, vec![0.5; 4]), &label(eye(2), 2)).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-8);
    }

    #[test]
    fn fully_masked_label_is_undefined() {
        let lab = WarpedLabel { target: Tensor::zeros(&[2, 2]), valid_mask: vec![false; 2] };
        assert!(matches!(crw_loss(&tm(2, eye(2)), &lab), Err(Error::UndefinedLoss)));
    }

    #[test]
    fn expected_flow_examples() {
        let g = grid_coordinates(4, 8, 4).unwrap();
        let f = expected_flow(&tm(2, eye(2)), &g).unwrap();
        assert_eq!(f.flow, vec![[0.0, 0.0]; 2]);
        // D = [[1.5, 1.5], [5.5, 1.5]]: swapping moves each cell by ±4 px
        let f = expected_flow(&tm(2, vec![0.0, 1.0, 1.0, 0.0]), &g).unwrap();
        assert_eq!(f.flow, vec![[4.0, 0.0], [-4.0, 0.0]]);
        let f = expected_flow(&tm(2, vec![0.5; 4]), &g).unwrap();
        assert_eq!(f.flow, vec![[2.0, 0.0], [-2.0, 0.0]]);
    }

    fn field(g: &CoordinateGrid, f: impl Fn(usize, usize) -> [f32; 2]) -> MotionField {
        let flow = (0..g.len()).map(|i| f(i % g.cols(), i / g.cols())).collect();
        MotionField::new(flow, g.clone()).unwrap()
    }

    #[test]
    fn smoothness_zero_cases_and_parabola() {
        let g = grid_coordinates(6, 7, 1).unwrap();
        let img = Frame::filled(6, 7, [0.4, 0.2, 0.9]);
        assert_eq!(smoothness_loss(&field(&g, |_, _| [3.0, -1.0]), &img, 150.0).unwrap(), 0.0);
        assert_eq!(smoothness_loss(&field(&g, |x, y| [2.0 * x as f32 - 1.0, 0.5 * y as f32]), &img, 150.0).unwrap(), 0.0);
        let l = smoothness_loss(&field(&g, |x, _| [(x * x) as f32, 0.0]), &img, 150.0).unwrap();
        assert!((l - 2.0).abs() < 1e-12);
    }

    #[test]
    fn smoothness_needs_three_cells() {
        let g = grid_coordinates(2, 8, 1).unwrap();
        assert!(smoothness_loss(&MotionField::zeros(g), &Frame::filled(2, 8, [0.0; 3]), 1.0).is_err());
    }

    #[test]
    fn edges_damp_the_penalty() {
        let g = grid_coordinates(5, 5, 1).unwrap();
        let flat = Frame::filled(5, 5, [0.5; 3]);
        let edged = Frame::from_fn(5, 5, |x, _| [if x >= 2 { 1.0 } else { 0.0 }; 3]);
        let f = field(&g, |x, _| [if x >= 2 { 4.0 } else { 0.0 }, 0.0]);
        assert!(smoothness_loss(&f, &edged, 150.0).unwrap() < 1e-6 * smoothness_loss(&f, &flat, 150.0).unwrap());
    }

    #[test]
    fn total_loss_examples() {
        let c = |w| ObjectiveConfig { smoothness_weight: w, ..Default::default() };
        assert_eq!(total_loss(0.5, 0.2, 1.0, &c(0.0)).unwrap().total, 0.5);
        assert!((total_loss(0.5, 0.2, 1.0, &c(1.0)).unwrap().total - 0.7).abs() < 1e-12);
        let r = total_loss(std::f64::consts::LN_2, 2.0, 1.0, &c(0.1)).unwrap();
        assert!((r.total - 0.8931).abs() < 1e-4);
        let off = ObjectiveConfig { use_smoothness: false, ..c(1.0) };
        assert_eq!(total_loss(0.5, 0.2, 1.0, &off).unwrap().total, 0.5);
        assert!(total_loss(f64::NAN, 0.0, 1.0, &c(0.1)).is_err());
    }

    #[test]
    fn huber_regimes() {
        let g = grid_coordinates(3, 3, 1).unwrap();
        let zero = MotionField::zeros(g.clone());
        let delta = 1.6;
        assert_eq!(supervised_loss(&zero, &zero, delta).unwrap(), 0.0);
        let e = |m: f32| field(&g, move |_, _| [0.6 * m, 0.8 * m]);
        let small = supervised_loss(&e(0.5 * delta as f32), &zero, delta).unwrap();
        assert!((small - 0.125 * delta * delta).abs() < 1e-6);
        let large = supervised_loss(&e(2.0 * delta as f32), &zero, delta).unwrap();
        assert!((large - 1.5 * delta * delta).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn smoothness_ignores_offsets(c in -5.0f32..5.0, tint in -0.3f32..0.3, seed in 0u32..1000) {
            let g = grid_coordinates(5, 6, 1).unwrap();
            let img = Frame::from_fn(5, 6, |x, y| [0.5 + 0.1 * ((x * 3 + y + seed as usize) % 4) as f32 / 4.0; 3]);
            let shifted = Frame::from_fn(5, 6, |x, y| img.pixel(x, y).map(|v| v + tint));
            let f = field(&g, |x, y| [((x * y + seed as usize) % 5) as f32, (x as f32).sin()]);
            let fc = field(&g, |x, y| { let v = f.flow[y * 6 + x]; [v[0] + c, v[1] - c] });
            let base = smoothness_loss(&f, &img, 150.0).unwrap();
            prop_assert!((smoothness_loss(&fc, &img, 150.0).unwrap() - base).abs() < 1e-5);
            prop_assert!((smoothness_loss(&f, &shifted, 150.0).unwrap() - base).abs() < 1e-5);
        }

        #[test]
        fn huber_is_symmetric_and_monotone(a in 0.0f32..5.0, b in 0.0f32..5.0) {
            let g = grid_coordinates(2, 2, 1).unwrap();
            let zero = MotionField::zeros(g.clone());
            let at = |m: f32| supervised_loss(&field(&g, |_, _| [m, 0.0]), &zero, 1.0).unwrap();
            prop_assert_eq!(at(a), at(-a));
            if a <= b {
                prop_assert!(at(a) <= at(b));
            }
        }

        #[test]
        fn crw_loss_is_nonnegative(vals in prop::collection::vec(0.01f32..1.0, 9)) {
            let mut probs = vals.clone();
            for r in probs.chunks_mut(3) {
                let s: f32 = r.iter().sum();
                r.iter_mut().for_each(|v| *v /= s);
            }
            let lab = label(eye(3), 3);
            prop_assert!(crw_loss(&tm(3, probs), &lab).unwrap() >= 0.0);
        }
    }
}
