//! Point-tracking metrics: positional accuracy, occlusion accuracy and
//! average Jaccard.
//!
//! Errors are measured after rescaling each axis to a 256 × 256 reference
//! frame and compared with the thresholds inclusively (`error <= δ`).
//! Predicted positions outside the frame are scored as given.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::clip::{QueryPoint, Track};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Thresholds in pixels of the reference frame.
    pub thresholds: Vec<f64>,
    /// Side of the square reference frame.
    pub reference_size: f64,
    pub query_stride: usize,
    /// Leave the query frame itself out of every metric.
    pub exclude_query_frame: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { thresholds: DEFAULT_THRESHOLDS.to_vec(), reference_size: 256.0, query_stride: 5, exclude_query_frame: true }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Config("thresholds must be positive and non-empty".into()));
        }
        if !(self.reference_size > 0.0) || self.query_stride == 0 {
            return Err(Error::Config("reference_size and query_stride must be positive".into()));
        }
        Ok(())
    }
}

/// Ground truth with one entry per query; `tracks[i]` belongs to `queries[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTrackSet {
    pub queries: Vec<QueryPoint>,
    pub tracks: Vec<Track>,
}

/// One query every `query_stride` frames where the point is visible.
pub fn sample_queries_strided(tracks: &[Track], query_stride: usize) -> Result<GroundTruthTrackSet> {
    if tracks.is_empty() {
        return Err(Error::EmptyInput("no tracks to query".into()));
    }
    if query_stride == 0 {
        return Err(Error::Config("query_stride must be positive".into()));
    }
    let mut set = GroundTruthTrackSet { queries: Vec::new(), tracks: Vec::new() };
    for (k, track) in tracks.iter().enumerate() {
        let before = set.queries.len();
        for t in (0..track.len()).step_by(query_stride).filter(|&t| track.visible[t]) {
            let [x, y] = track.positions[t];
            set.queries.push(QueryPoint::new(t, x, y));
            set.tracks.push(track.clone());
        }
        if set.queries.len() == before {
            debug!("track {k} is never visible on the query stride; skipped");
        }
    }
    Ok(set)
}

/// Per-axis factors taking frame pixels to reference pixels.
pub fn reference_scale(frame_size: (usize, usize), reference_size: f64) -> [f64; 2] {
    [reference_size / frame_size.1 as f64, reference_size / frame_size.0 as f64]
}

fn check_aligned(pred: &[Track], gt: &[Track], mask: Option<&[Vec<bool>]>) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted tracks for {} ground-truth tracks", pred.len(), gt.len())));
    }
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() || p.visible.len() != p.len() || g.visible.len() != g.len() {
            return Err(Error::Shape(format!("track {i} lengths differ")));
        }
        if mask.is_some_and(|m| m[i].len() != g.len()) {
            return Err(Error::Shape(format!("mask {i} length differs")));
        }
    }
    if mask.is_some_and(|m| m.len() != gt.len()) {
        return Err(Error::Shape("mask count differs".into()));
    }
    Ok(())
}

/// Cells `(track, frame)` that count towards the metrics.
fn cells<'a>(gt: &'a [Track], mask: Option<&'a [Vec<bool>]>) -> impl Iterator<Item = (usize, usize)> + 'a {
    gt.iter()
        .enumerate()
        .flat_map(|(i, g)| (0..g.len()).map(move |t| (i, t)))
        .filter(move |&(i, t)| mask.is_none_or(|m| m[i][t]))
}

fn error(p: [f32; 2], g: [f32; 2], scale: [f64; 2]) -> f64 {
    let dx = (p[0] as f64 - g[0] as f64) * scale[0];
    let dy = (p[1] as f64 - g[1] as f64) * scale[1];
    (dx * dx + dy * dy).sqrt()
}

/// Fraction of visible ground-truth cells predicted within each threshold,
/// and the mean over thresholds.
pub fn positional_accuracy(
    pred: &[Track],
    gt: &[Track],
    scale: [f64; 2],
    thresholds: &[f64],
    mask: Option<&[Vec<bool>]>,
) -> Result<(f64, Vec<f64>)> {
    check_aligned(pred, gt, mask)?;
    let errors: Vec<f64> = cells(gt, mask)
        .filter(|&(i, t)| gt[i].visible[t])
        .map(|(i, t)| error(pred[i].positions[t], gt[i].positions[t], scale))
        .collect();
    if errors.is_empty() {
        return Err(Error::UndefinedMetric("no visible ground-truth points".into()));
    }
    let fractions: Vec<f64> = thresholds
        .iter()
        .map(|&d| errors.iter().filter(|&&e| e <= d).count() as f64 / errors.len() as f64)
        .collect();
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    Ok((mean, fractions))
}

/// Fraction of cells whose predicted visibility matches the ground truth.
pub fn occlusion_accuracy(pred: &[Track], gt: &[Track], mask: Option<&[Vec<bool>]>) -> Result<f64> {
    check_aligned(pred, gt, mask)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, t) in cells(gt, mask) {
        total += 1;
        hit += (pred[i].visible[t] == gt[i].visible[t]) as usize;
    }
    if total == 0 {
        return Err(Error::EmptyInput("no cells to score".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Jaccard per threshold and its mean.
pub fn average_jaccard(
    pred: &[Track],
    gt: &[Track],
    scale: [f64; 2],
    thresholds: &[f64],
    mask: Option<&[Vec<bool>]>,
) -> Result<(f64, Vec<f64>)> {
    check_aligned(pred, gt, mask)?;
    let mut per = Vec::with_capacity(thresholds.len());
    for &d in thresholds {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (i, t) in cells(gt, mask) {
            let (pv, gv) = (pred[i].visible[t], gt[i].visible[t]);
            let close = error(pred[i].positions[t], gt[i].positions[t], scale) <= d;
            tp += (pv && gv && close) as usize;
            fp += (pv && (!gv || !close)) as usize;
            fneg += (gv && (!pv || !close)) as usize;
        }
        let denom = tp + fp + fneg;
        if denom == 0 {
            return Err(Error::UndefinedMetric("no visible points predicted or present".into()));
        }
        per.push(tp as f64 / denom as f64);
    }
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub threshold: f64,
    pub fraction: f64,
    pub jaccard: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aj: f64,
    pub delta_avg: f64,
    pub oa: f64,
    pub per_threshold: Vec<ThresholdScore>,
    pub num_queries: usize,
}

impl MetricsReport {
    pub fn summary(&self) -> String {
        format!(
            "AJ {:.4}  delta_avg {:.4}  OA {:.4}  ({} queries)",
            self.aj, self.delta_avg, self.oa, self.num_queries
        )
    }

    /// Plain-text report with the scoring conventions in its header.
    pub fn to_text(&self, config: &MetricsConfig) -> String {
        let mut s = format!(
            "# thresholds in pixels at {0}x{0} reference resolution, inclusive (error <= threshold)\n\
             # query frame {1}; positions outside the frame scored as given\n",
            config.reference_size,
            if config.exclude_query_frame { "excluded" } else { "included" },
        );
        s.push_str(&format!("aj {:.6}\ndelta_avg {:.6}\noa {:.6}\nqueries {}\n", self.aj, self.delta_avg, self.oa, self.num_queries));
        s.push_str("threshold fraction jaccard\n");
        for t in &self.per_threshold {
            s.push_str(&format!("{} {:.6} {:.6}\n", t.threshold, t.fraction, t.jaccard));
        }
        s
    }
}

/// All metrics for predictions aligned with `gt.queries`.
pub fn evaluate(
    pred: &[Track],
    gt: &GroundTruthTrackSet,
    frame_size: (usize, usize),
    config: &MetricsConfig,
) -> Result<MetricsReport> {
    if gt.queries.len() != gt.tracks.len() {
        return Err(Error::Shape("one ground-truth track per query required".into()));
    }
    let mask: Vec<Vec<bool>> = gt
        .queries
        .iter()
        .zip(&gt.tracks)
        .map(|(q, g)| (0..g.len()).map(|t| !(config.exclude_query_frame && t == q.t)).collect())
        .collect();
    let scale = reference_scale(frame_size, config.reference_size);
    let (delta_avg, fractions) = positional_accuracy(pred, &gt.tracks, scale, &config.thresholds, Some(&mask))?;
    let (aj, jaccards) = average_jaccard(pred, &gt.tracks, scale, &config.thresholds, Some(&mask))?;
    let oa = occlusion_accuracy(pred, &gt.tracks, Some(&mask))?;
    let per_threshold = config
        .thresholds
        .iter()
        .zip(fractions.iter().zip(&jaccards))
        .map(|(&threshold, (&fraction, &jaccard))| ThresholdScore { threshold, fraction, jaccard })
        .collect();
    Ok(MetricsReport { aj, delta_avg, oa, per_threshold, num_queries: gt.queries.len() })
}

/// Predictions that never move and are always visible.
pub fn zero_motion_tracks(gt: &GroundTruthTrackSet) -> Vec<Track> {
    gt.queries
        .iter()
        .zip(&gt.tracks)
        .map(|(q, g)| Track { positions: vec![[q.x, q.y]; g.len()], visible: vec![true; g.len()] })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn track(pos: &[[f32; 2]], vis: &[bool]) -> Track {
        Track { positions: pos.to_vec(), visible: vis.to_vec() }
    }

    #[test]
    fn strided_queries_enumerate() {
        let always = track(&[[1.0, 2.0]; 10], &[true; 10]);
        let set = sample_queries_strided(&[always], 5).unwrap();
        assert_eq!(set.queries.iter().map(|q| q.t).collect::<Vec<_>>(), vec![0, 5]);
        let mut vis = [false; 10];
        vis[3] = true;
        let once = track(&[[0.0, 0.0]; 10], &vis);
        assert!(sample_queries_strided(&[once.clone()], 5).unwrap().queries.is_empty());
        assert_eq!(sample_queries_strided(&[once], 1).unwrap().queries.len(), 1);
    }

    #[test]
    fn three_pixel_error_scores_point_six() {
        let g = track(&[[10.0, 10.0]], &[true]);
        let p = track(&[[13.0, 10.0]], &[true]);
        let (avg, fr) = positional_accuracy(&[p], &[g], [1.0, 1.0], &DEFAULT_THRESHOLDS, None).unwrap();
        assert_eq!(fr, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!((avg - 0.6).abs() < 1e-12);
    }

    #[test]
    fn threshold_ties_count_as_within() {
        let g = track(&[[0.0, 0.0]], &[true]);
        let p = track(&[[0.0, 2.0]], &[true]);
        let (_, fr) = positional_accuracy(&[p], &[g], [1.0, 1.0], &[2.0], None).unwrap();
        assert_eq!(fr, vec![1.0]);
    }

    #[test]
    fn perfect_and_failed_predictions() {
        let g = track(&[[1.0, 1.0], [2.0, 2.0]], &[true, true]);
        assert_eq!(average_jaccard(&[g.clone()], &[g.clone()], [1.0; 2], &DEFAULT_THRESHOLDS, None).unwrap().0, 1.0);
        let hidden = track(&g.positions, &[false, false]);
        assert_eq!(average_jaccard(&[hidden.clone()], &[g.clone()], [1.0; 2], &DEFAULT_THRESHOLDS, None).unwrap().0, 0.0);
        assert_eq!(occlusion_accuracy(&[g.clone()], &[g.clone()], None).unwrap(), 1.0);
        assert_eq!(occlusion_accuracy(&[hidden], &[g], None).unwrap(), 0.0);
    }

    #[test]
    fn three_of_four_visibility_cells() {
        let g = track(&[[0.0; 2]; 4], &[true, false, true, false]);
        let p = track(&[[0.0; 2]; 4], &[true, false, false, false]);
        assert_eq!(occlusion_accuracy(&[p], &[g], None).unwrap(), 0.75);
    }

    #[test]
    fn one_hit_one_false_positive_gives_half() {
        let g = vec![track(&[[0.0, 0.0]], &[true]), track(&[[5.0, 5.0]], &[false])];
        let p = vec![track(&[[0.0, 0.0]], &[true]), track(&[[5.0, 5.0]], &[true])];
        assert_eq!(average_jaccard(&p, &g, [1.0; 2], &DEFAULT_THRESHOLDS, None).unwrap().0, 0.5);
    }

    #[test]
    fn undefined_cases_error() {
        let g = track(&[[0.0; 2]], &[false]);
        assert!(matches!(
            positional_accuracy(&[g.clone()], &[g.clone()], [1.0; 2], &[1.0], None),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(average_jaccard(&[g.clone()], &[g], [1.0; 2], &[1.0], None).is_err());
        assert!(occlusion_accuracy(&[], &[], None).is_err());
    }

    #[test]
    fn report_excludes_query_frames_and_rescales() {
        let gt_track = track(&[[8.0, 8.0], [10.0, 8.0]], &[true, true]);
        let gt = GroundTruthTrackSet { queries: vec![QueryPoint::new(0, 8.0, 8.0)], tracks: vec![gt_track] };
        let base = zero_motion_tracks(&gt);
        // 2 px on a 64-wide frame is 8 reference pixels
        let r = evaluate(&base, &gt, (64, 64), &MetricsConfig::default()).unwrap();
        assert_eq!(r.per_threshold.iter().map(|t| t.fraction).collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(r.oa, 1.0);
        assert!(r.to_text(&MetricsConfig::default()).contains("inclusive"));
    }

    /// Independent per-cell enumeration of all three metrics.
    fn oracle(pred: &[Track], gt: &[Track], th: &[f64]) -> (f64, f64, f64) {
        let mut delta = 0.0;
        let mut aj = 0.0;
        for &d in th {
            let (mut within, mut vis, mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..gt.len() {
                for t in 0..gt[i].len() {
                    let dx = (pred[i].positions[t][0] - gt[i].positions[t][0]) as f64;
                    let dy = (pred[i].positions[t][1] - gt[i].positions[t][1]) as f64;
                    let ok = dx.hypot(dy) <= d;
                    let (pv, gv) = (pred[i].visible[t], gt[i].visible[t]);
                    if gv {
                        vis += 1.0;
                        if ok {
                            within += 1.0;
                        }
                    }
                    match (pv, gv, ok) {
                        (true, true, true) => tp += 1.0,
                        (true, true, false) => {
                            fp += 1.0;
                            fneg += 1.0
                        }
                        (true, false, _) => fp += 1.0,
                        (false, true, _) => fneg += 1.0,
                        (false, false, _) => {}
                    }
                }
            }
            delta += within / vis;
            aj += tp / (tp + fp + fneg);
        }
        let cells: usize = gt.iter().map(|g| g.len()).sum();
        let agree: usize =
            gt.iter().zip(pred).map(|(g, p)| g.visible.iter().zip(&p.visible).filter(|(a, b)| a == b).count()).sum();
        (aj / th.len() as f64, delta / th.len() as f64, agree as f64 / cells as f64)
    }

    fn instance() -> impl Strategy<Value = (Vec<Track>, Vec<Track>)> {
        (1usize..=5, 1usize..=10).prop_flat_map(|(n, t)| {
            let tr = move || {
                prop::collection::vec(
                    (prop::collection::vec((0.0f32..20.0, 0.0f32..20.0), t), prop::collection::vec(any::<bool>(), t)),
                    n,
                )
                .prop_map(|v| {
                    v.into_iter()
                        .map(|(p, mut vis)| {
                            vis[0] = true;
                            Track { positions: p.into_iter().map(|(x, y)| [x.round(), y.round()]).collect(), visible: vis }
                        })
                        .collect::<Vec<_>>()
                })
            };
            (tr(), tr())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn metrics_match_enumeration((pred, gt) in instance()) {
            let th = DEFAULT_THRESHOLDS;
            let (aj, delta, oa) = oracle(&pred, &gt, &th);
            prop_assert!((average_jaccard(&pred, &gt, [1.0; 2], &th, None).unwrap().0 - aj).abs() <= 1e-9);
            prop_assert!((positional_accuracy(&pred, &gt, [1.0; 2], &th, None).unwrap().0 - delta).abs() <= 1e-9);
            prop_assert!((occlusion_accuracy(&pred, &gt, None).unwrap() - oa).abs() <= 1e-9);
        }

        #[test]
        fn metrics_ignore_track_order((pred, gt) in instance(), rot in 0usize..5) {
            let th = DEFAULT_THRESHOLDS;
            let k = rot % gt.len();
            let (mut p2, mut g2) = (pred.clone(), gt.clone());
            p2.rotate_left(k);
            g2.rotate_left(k);
            prop_assert_eq!(average_jaccard(&pred, &gt, [1.0; 2], &th, None).unwrap(), average_jaccard(&p2, &g2, [1.0; 2], &th, None).unwrap());
            prop_assert_eq!(positional_accuracy(&pred, &gt, [1.0; 2], &th, None).unwrap(), positional_accuracy(&p2, &g2, [1.0; 2], &th, None).unwrap());
        }

        #[test]
        fn noise_never_helps((_, gt) in instance(), noise in prop::collection::vec(0.0f32..3.0, 50), angle in 0.0f32..6.28) {
            let th = DEFAULT_THRESHOLDS;
            let perturb = |amount: f32| -> Vec<Track> {
                gt.iter().enumerate().map(|(i, g)| Track {
                    positions: g.positions.iter().enumerate().map(|(t, p)| {
                        let m = amount * noise[(i * 10 + t) % 50];
                        [p[0] + m * angle.cos(), p[1] + m * angle.sin()]
                    }).collect(),
                    visible: g.visible.clone(),
                }).collect()
            };
            let (a, b) = (perturb(1.0), perturb(2.0));
            let d = |p: &[Track]| positional_accuracy(p, &gt, [1.0; 2], &th, None).unwrap().0;
            let j = |p: &[Track]| average_jaccard(p, &gt, [1.0; 2], &th, None).unwrap().0;
            prop_assert!(d(&b) <= d(&a) + 1e-12 && d(&a) <= 1.0);
            prop_assert!(j(&b) <= j(&a) + 1e-12);
        }
    }
}
