//! Optical-flow colour coding: hue gives direction, saturation magnitude,
//! zero motion is white.

use gmrw::grid::MotionField;
use image::{Rgb, RgbImage};

/// Hue ramp lengths between red, yellow, green, cyan, blue and magenta.
const RAMPS: [usize; 6] = [15, 6, 4, 11, 13, 6];

fn colour_wheel() -> Vec<[f32; 3]> {
    let mut wheel = Vec::with_capacity(RAMPS.iter().sum());
    let keys = [[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0], [1.0, 0.0, 1.0]];
    for (i, &n) in RAMPS.iter().enumerate() {
        let (a, b): ([f32; 3], [f32; 3]) = (keys[i], keys[(i + 1) % 6]);
        for k in 0..n {
            let f = k as f32 / n as f32;
            wheel.push([0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * f));
        }
    }
    wheel
}

/// Colour of a displacement `(u, v)` already divided by the saturation radius.
pub fn flow_colour(u: f32, v: f32, wheel: &[[f32; 3]]) -> [u8; 3] {
    let n = wheel.len();
    let radius = (u * u + v * v).sqrt();
    let angle = (-v).atan2(-u) / std::f32::consts::PI;
    let fk = (angle + 1.0) / 2.0 * (n - 1) as f32;
    let k0 = (fk.floor() as usize).min(n - 1);
    let k1 = (k0 + 1) % n;
    let f = fk - k0 as f32;
    [0, 1, 2].map(|c| {
        let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
        let col = if radius <= 1.0 { 1.0 - radius * (1.0 - col) } else { col * 0.75 };
        (col * 255.0).round() as u8
    })
}

/// One block of `stride × stride` pixels per feature cell.
pub fn render(flow: &MotionField, max_flow: Option<f32>) -> RgbImage {
    let grid = &flow.grid;
    let observed = flow.flow.iter().map(|f| f[0].hypot(f[1])).fold(0.0f32, f32::max);
    let radius = max_flow.unwrap_or(observed.max(8.0)).max(f32::EPSILON);
    let wheel = colour_wheel();
    let (h, w) = grid.frame_size();
    let s = grid.stride();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let f = flow.flow[(y as usize / s) * grid.cols() + x as usize / s];
        Rgb(flow_colour(f[0] / radius, f[1] / radius, &wheel))
    })
}
