//! Frames, clips, query points and tracks.
//!
//! Pixel coordinates are `(x, y)` with `x` to the right, `y` downward and the
//! origin at the centre of the top-left pixel, so pixel `(i, j)` covers
//! `[i - 0.5, i + 0.5) × [j - 0.5, j + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB image with channel values nominally in `[0, 1]`, stored HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 frame needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at a continuous pixel position, clamping at the border.
    pub fn sample(&self, x: f32, y: f32) -> [f32; 3] {
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let y = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let p = |xx: usize, yy: usize| self.data[(yy * self.width + xx) * 3 + c];
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    /// Planar CHW copy of the channels, as the network consumes them.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c];
            }
        }
        out
    }
}

/// A video as a sequence of equally sized frames.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Vec<Frame>,
    /// Metadata only.
    pub frame_rate: Option<f32>,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::EmptyInput("clip has no frames".into()));
        };
        let (h, w) = (first.height, first.width);
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.height != h || f.width != w) {
            return Err(Error::Shape(format!(
                "frame {i} is {}x{}, expected {h}x{w}",
                f.height, f.width
            )));
        }
        Ok(Self { frames, frame_rate: None })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Frame {
        &self.frames[t]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }
}

/// Checks the clip invariants for processing at `effective_stride` pixels
/// per feature cell and returns it unchanged.
pub fn validate_clip(clip: &VideoClip, effective_stride: usize) -> Result<&VideoClip> {
    if clip.len() < 2 {
        return Err(Error::ClipTooShort { frames: clip.len(), needed: 2 });
    }
    if effective_stride == 0 {
        return Err(Error::Config("effective stride must be positive".into()));
    }
    let (h, w) = (clip.height(), clip.width());
    if h % effective_stride != 0 || w % effective_stride != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} frames are not divisible by stride {effective_stride}"
        )));
    }
    for (t, frame) in clip.frames().iter().enumerate() {
        if let Some((i, &v)) = frame.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range { index: t * frame.data().len() + i, value: v });
        }
    }
    Ok(clip)
}

/// A point to track: frame index and pixel position in that frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPoint {
    pub t: usize,
    pub x: f32,
    pub y: f32,
}

impl QueryPoint {
    pub fn new(t: usize, x: f32, y: f32) -> Self {
        Self { t, x, y }
    }

    pub fn check(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        let inside = self.x >= 0.0 && self.y >= 0.0 && self.x < width as f32 && self.y < height as f32;
        if self.t >= frames || !inside {
            return Err(Error::Dimension(format!(
                "query ({}, {}, {}) outside {frames}x{height}x{width} clip",
                self.t, self.x, self.y
            )));
        }
        Ok(())
    }
}

/// Per-frame positions and visibility of one tracked point.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub positions: Vec<[f32; 2]>,
    pub visible: Vec<bool>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(t: usize, h: usize, w: usize, v: f32) -> VideoClip {
        VideoClip::new(vec![Frame::filled(h, w, [v; 3]); t]).unwrap()
    }

    #[test]
    fn divisible_clip_is_accepted() {
        let c = clip(2, 64, 64, 0.5);
        assert!(validate_clip(&c, 4).is_ok());
    }

    #[test]
    fn indivisible_height_is_rejected() {
        let c = clip(2, 63, 64, 0.5);
        assert!(matches!(validate_clip(&c, 4), Err(Error::Dimension(_))));
        assert!(validate_clip(&c, 1).is_ok());
    }

    #[test]
    fn out_of_range_value_is_rejected() {
        let mut frames = vec![Frame::filled(8, 8, [0.2; 3]); 2];
        frames[1].set_pixel(3, 2, [0.1, 1.5, 0.0]);
        let c = VideoClip::new(frames).unwrap();
        assert!(matches!(validate_clip(&c, 4), Err(Error::Range { value, .. }) if value == 1.5));
    }

    #[test]
    fn single_frame_clip_is_rejected() {
        let c = clip(1, 8, 8, 0.0);
        assert!(matches!(validate_clip(&c, 4), Err(Error::ClipTooShort { frames: 1, .. })));
    }

    #[test]
    fn mixed_frame_sizes_are_rejected() {
        let frames = vec![Frame::filled(8, 8, [0.0; 3]), Frame::filled(8, 4, [0.0; 3])];
        assert!(VideoClip::new(frames).is_err());
    }

    #[test]
    fn bilinear_sample_interpolates_and_clamps() {
        let f = Frame::from_fn(2, 2, |x, y| [x as f32, y as f32, (x + y) as f32]);
        assert_eq!(f.sample(0.5, 0.5), [0.5, 0.5, 1.0]);
        assert_eq!(f.sample(-3.0, 9.0), [0.0, 1.0, 1.0]);
    }
}
