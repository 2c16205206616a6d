//! Line-delimited JSON track files.
//!
//! Each line holds one query and, optionally, its per-frame track:
//!
//! ```text
//! {"id":0,"query":[t,x,y],"size":[W,H],"xy":[[x,y],...],"visible":[true,...]}
//! ```
//!
//! Fields appear in this order. `id` pairs predictions with ground truth.
//! `size` is the frame size in pixels. `xy` and `visible` hold one entry per
//! frame; a queries file may leave them out. Blank lines are ignored.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clip::{QueryPoint, Track};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub id: u64,
    /// `[t, x, y]`.
    pub query: [f64; 3],
    /// `[width, height]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub xy: Vec<[f32; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub visible: Vec<bool>,
}

impl TrackRecord {
    pub fn new(id: u64, query: &QueryPoint, size: (usize, usize), track: &Track) -> Self {
        Self {
            id,
            query: [query.t as f64, query.x as f64, query.y as f64],
            size: Some([size.1, size.0]),
            xy: track.positions.clone(),
            visible: track.visible.clone(),
        }
    }

    pub fn query_point(&self) -> QueryPoint {
        QueryPoint::new(self.query[0] as usize, self.query[1] as f32, self.query[2] as f32)
    }

    pub fn track(&self) -> Track {
        Track { positions: self.xy.clone(), visible: self.visible.clone() }
    }

    pub fn has_track(&self) -> bool {
        !self.xy.is_empty()
    }
}

pub fn to_jsonl(records: &[TrackRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("track records serialise"));
        out.push('\n');
    }
    out
}

pub fn write_track_file(path: &Path, records: &[TrackRecord]) -> Result<()> {
    fs::write(path, to_jsonl(records)).map_err(|e| Error::io(path, e))
}

/// Parses and checks a track file; `require_tracks` demands `xy` and
/// `visible` on every line.
pub fn read_track_file(path: &Path, require_tracks: bool) -> Result<Vec<TrackRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_track_lines(&text, &path.display().to_string(), require_tracks)
}

pub fn parse_track_lines(text: &str, source: &str, require_tracks: bool) -> Result<Vec<TrackRecord>> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| Error::Parse { path: source.to_string(), line: i + 1, message };
        if line.trim().is_empty() {
            continue;
        }
        let r: TrackRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if !ids.insert(r.id) {
            return Err(err(format!("duplicate id {}", r.id)));
        }
        let [t, x, y] = r.query;
        if t < 0.0 || t.fract() != 0.0 || !x.is_finite() || !y.is_finite() {
            return Err(err(format!("field `query`: invalid [t, x, y] {:?}", r.query)));
        }
        if require_tracks && (r.xy.is_empty() || r.visible.is_empty()) {
            return Err(err("fields `xy` and `visible` are required".into()));
        }
        if r.xy.len() != r.visible.len() {
            return Err(err(format!("field `visible`: {} entries for {} positions", r.visible.len(), r.xy.len())));
        }
        if r.has_track() && t as usize >= r.xy.len() {
            return Err(err(format!("field `query`: frame {t} beyond {} frames", r.xy.len())));
        }
        if r.xy.iter().flatten().any(|v| !v.is_finite()) {
            return Err(err("field `xy`: non-finite coordinate".into()));
        }
        records.push(r);
    }
    Ok(records)
}
