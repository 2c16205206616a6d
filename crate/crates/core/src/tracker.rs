//! Long-range point tracking from pairwise expected motion.

use serde::{Deserialize, Serialize};

use crate::clip::{validate_clip, QueryPoint, Track, VideoClip};
use crate::error::{Error, Result};
use crate::grid::grid_coordinates;
pub use crate::grid::MotionField;
use crate::model::Model;
use crate::objective::expected_flow;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackMode {
    /// Adjacent-frame motion composed over time.
    Chained,
    /// Query frame matched against every frame independently.
    Direct,
}

impl std::str::FromStr for TrackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chained" => Ok(Self::Chained),
            "direct" => Ok(Self::Direct),
            _ => Err(Error::Config(format!("unknown tracking mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub mode: TrackMode,
    /// Pixels per feature cell at inference; `None` picks 1 for chained
    /// and 2 for direct tracking.
    pub eval_stride: Option<usize>,
    /// Cycle error in pixels above which a point counts as occluded.
    pub cycle_threshold: f32,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { mode: TrackMode::Chained, eval_stride: None, cycle_threshold: 3.0 }
    }
}

impl TrackerConfig {
    pub fn stride(&self) -> usize {
        self.eval_stride.unwrap_or(match self.mode {
            TrackMode::Chained => 1,
            TrackMode::Direct => 2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stride(), 1 | 2 | 4) {
            return Err(Error::UnsupportedStride(self.stride()));
        }
        if !(self.cycle_threshold > 0.0) {
            return Err(Error::Config("cycle_threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Forward (`a → b`) and backward (`b → a`) expected motion.
pub fn pair_motion(
    frame_a: &crate::clip::Frame,
    frame_b: &crate::clip::Frame,
    model: &Model,
    stride: usize,
) -> Result<(MotionField, MotionField)> {
    if (frame_a.height(), frame_a.width()) != (frame_b.height(), frame_b.width()) {
        return Err(Error::Shape("frames differ in size".into()));
    }
    let grid = grid_coordinates(frame_a.height(), frame_a.width(), stride)?;
    let (ab, ba) = model.pair_transitions(frame_a, frame_b, stride)?;
    Ok((expected_flow(&ab, &grid)?, expected_flow(&ba, &grid)?))
}

fn in_frame(p: [f32; 2], (h, w): (usize, usize)) -> bool {
    p[0] >= -0.5 && p[1] >= -0.5 && p[0] < w as f32 - 0.5 && p[1] < h as f32 - 0.5
}

/// Forward-backward consistency of the motion at `point`.
pub fn cycle_visibility(fwd: &MotionField, bwd: &MotionField, point: [f32; 2], threshold: f32) -> bool {
    let size = fwd.grid.frame_size();
    let f = fwd.sample(point[0], point[1]);
    let moved = [point[0] + f[0], point[1] + f[1]];
    if !in_frame(moved, size) {
        return false;
    }
    let b = bwd.sample(moved[0], moved[1]);
    let err = [f[0] + b[0], f[1] + b[1]];
    (err[0] * err[0] + err[1] * err[1]).sqrt() <= threshold
}

fn advect(field: &MotionField, p: [f32; 2]) -> [f32; 2] {
    let f = field.sample(p[0], p[1]);
    [p[0] + f[0], p[1] + f[1]]
}

fn check_queries(clip: &VideoClip, queries: &[QueryPoint]) -> Result<()> {
    queries.iter().try_for_each(|q| q.check(clip.len(), clip.height(), clip.width()))
}

fn tokens(clip: &VideoClip, model: &Model, stride: usize) -> Result<Vec<gmrw_tape::Tensor<f32>>> {
    let frames: Vec<_> = clip.frames().iter().collect();
    model.frame_tokens(&frames, stride)
}

/// Motion for the ordered frame pair `(s, t)` in both directions.
fn motion_between(
    model: &Model,
    toks: &[gmrw_tape::Tensor<f32>],
    grid: &crate::grid::CoordinateGrid,
    s: usize,
    t: usize,
) -> Result<(MotionField, MotionField)> {
    let (st, ts) = model.transitions(&toks[s], &toks[t], (grid.rows(), grid.cols()))?;
    Ok((expected_flow(&st, grid)?, expected_flow(&ts, grid)?))
}

/// Tracks by composing adjacent-frame motion forward and backward in time
/// from each query frame; visibility is tested per adjacent pair.
pub fn track_chained(clip: &VideoClip, queries: &[QueryPoint], model: &Model, config: &TrackerConfig) -> Result<Vec<Track>> {
    config.validate()?;
    let stride = config.stride();
    validate_clip(clip, stride)?;
    check_queries(clip, queries)?;
    let grid = grid_coordinates(clip.height(), clip.width(), stride)?;
    let toks = tokens(clip, model, stride)?;
    let pairs: Vec<(MotionField, MotionField)> =
        (0..clip.len() - 1).map(|t| motion_between(model, &toks, &grid, t, t + 1)).collect::<Result<_>>()?;
    let tau = config.cycle_threshold;
    Ok(queries
        .iter()
        .map(|q| {
            let n = clip.len();
            let mut positions = vec![[0.0; 2]; n];
            let mut visible = vec![false; n];
            positions[q.t] = [q.x, q.y];
            visible[q.t] = true;
            for t in q.t..n - 1 {
                let (fwd, bwd) = &pairs[t];
                positions[t + 1] = advect(fwd, positions[t]);
                visible[t + 1] = cycle_visibility(fwd, bwd, positions[t], tau);
            }
            for t in (1..=q.t).rev() {
                let (fwd, bwd) = &pairs[t - 1];
                positions[t - 1] = advect(bwd, positions[t]);
                visible[t - 1] = cycle_visibility(bwd, fwd, positions[t], tau);
            }
            Track { positions, visible }
        })
        .collect())
}

/// Tracks by matching each query frame directly against every other frame.
pub fn track_direct(clip: &VideoClip, queries: &[QueryPoint], model: &Model, config: &TrackerConfig) -> Result<Vec<Track>> {
    config.validate()?;
    let stride = config.stride();
    validate_clip(clip, stride)?;
    check_queries(clip, queries)?;
    let grid = grid_coordinates(clip.height(), clip.width(), stride)?;
    let toks = tokens(clip, model, stride)?;
    let n = clip.len();
    let mut tracks: Vec<Track> = queries
        .iter()
        .map(|q| {
            let mut visible = vec![false; n];
            visible[q.t] = true;
            Track { positions: vec![[q.x, q.y]; n], visible }
        })
        .collect();
    let mut query_frames: Vec<usize> = queries.iter().map(|q| q.t).collect();
    query_frames.sort_unstable();
    query_frames.dedup();
    for &s in &query_frames {
        for t in (0..n).filter(|&t| t != s) {
            let (fwd, bwd) = motion_between(model, &toks, &grid, s, t)?;
            for (q, track) in queries.iter().zip(tracks.iter_mut()).filter(|(q, _)| q.t == s) {
                track.positions[t] = advect(&fwd, [q.x, q.y]);
                track.visible[t] = cycle_visibility(&fwd, &bwd, [q.x, q.y], config.cycle_threshold);
            }
        }
    }
    Ok(tracks)
}

pub fn track(clip: &VideoClip, queries: &[QueryPoint], model: &Model, config: &TrackerConfig) -> Result<Vec<Track>> {
    match config.mode {
        TrackMode::Chained => track_chained(clip, queries, model, config),
        TrackMode::Direct => track_direct(clip, queries, model, config),
    }
}
