//! Image resampling with the pixel-centre convention of [`crate::clip`].

use crate::clip::Frame;

/// Bilinear resize; output pixel `u` reads source position `(u + ½)·in/out − ½`.
pub fn resize_bilinear(frame: &Frame, out_height: usize, out_width: usize) -> Frame {
    let sx = frame.width() as f32 / out_width as f32;
    let sy = frame.height() as f32 / out_height as f32;
    Frame::from_fn(out_height, out_width, |x, y| {
        frame.sample((x as f32 + 0.5) * sx - 0.5, (y as f32 + 0.5) * sy - 0.5)
    })
}

/// Mean over non-overlapping `k × k` blocks.
pub fn average_pool(frame: &Frame, k: usize) -> Frame {
    assert!(k > 0 && frame.height() % k == 0 && frame.width() % k == 0);
    let norm = 1.0 / (k * k) as f32;
    Frame::from_fn(frame.height() / k, frame.width() / k, |x, y| {
        let mut acc = [0.0f32; 3];
        for dy in 0..k {
            for dx in 0..k {
                let p = frame.pixel(x * k + dx, y * k + dy);
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
        }
        acc.map(|v| v * norm)
    })
}
