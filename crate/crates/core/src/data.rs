//! Synthetic sprite videos with exact ground truth, frame-directory
//! ingestion, and training batch assembly.

use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_palindrome, AugmentConfig, Palindrome};
use crate::clip::{Frame, Track, VideoClip};
use crate::error::{Error, Result};
use crate::resample::resize_bilinear;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Noise,
    Checker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpriteSceneConfig {
    /// `[height, width]` in pixels.
    pub canvas_size: [usize; 2],
    pub num_sprites: usize,
    /// Inclusive side-length range in pixels.
    pub sprite_size_range: [usize; 2],
    /// Speed range in pixels per frame.
    pub velocity_range: [f32; 2],
    pub texture: Texture,
    pub allow_overlap: bool,
    pub num_frames: usize,
    /// Tracked texels per sprite.
    pub points_per_sprite: usize,
    pub seed: u64,
}

impl Default for SpriteSceneConfig {
    fn default() -> Self {
        Self {
            canvas_size: [64, 64],
            num_sprites: 3,
            sprite_size_range: [12, 24],
            velocity_range: [0.5, 2.0],
            texture: Texture::Noise,
            allow_overlap: true,
            num_frames: 8,
            points_per_sprite: 4,
            seed: 0,
        }
    }
}

impl SpriteSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.canvas_size;
        let [s0, s1] = self.sprite_size_range;
        if s0 < 3 || s0 > s1 || s1 > h.min(w) {
            return Err(Error::Config(format!(
                "sprite sizes {:?} do not fit a {h}x{w} canvas",
                self.sprite_size_range
            )));
        }
        let [v0, v1] = self.velocity_range;
        if !(v0 >= 0.0 && v0 <= v1 && v1 < s0 as f32) {
            return Err(Error::Config(format!(
                "velocity range {:?} must be non-negative and below the smallest sprite size",
                self.velocity_range
            )));
        }
        if self.num_frames < 2 {
            return Err(Error::Config("scenes need at least two frames".into()));
        }
        Ok(())
    }
}

/// A rendered clip with ground-truth tracks of sprite-attached points.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    pub clip: VideoClip,
    pub tracks: Vec<Track>,
}

/// A textured rectangle and its top-left corner in every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub texture: Frame,
    pub path: Vec<[f32; 2]>,
}

impl Sprite {
    fn width(&self) -> f32 {
        self.texture.width() as f32
    }

    fn height(&self) -> f32 {
        self.texture.height() as f32
    }

    /// Whether pixel position `(x, y)` lies on the sprite at frame `t`.
    pub fn covers(&self, t: usize, x: f32, y: f32) -> bool {
        let [px, py] = self.path[t];
        x >= px && x < px + self.width() && y >= py && y < py + self.height()
    }

    /// Colour of the sprite at image position `(x, y)` in frame `t`.
    fn color(&self, t: usize, x: f32, y: f32) -> [f32; 3] {
        let [px, py] = self.path[t];
        self.texture.sample(x - px, y - py)
    }
}

/// Value noise: random colours on a lattice of `cell`-pixel spacing,
/// bilinearly interpolated, with a random base tint.
pub fn noise_texture(height: usize, width: usize, cell: usize, contrast: f32, rng: &mut impl Rng) -> Frame {
    let lh = height / cell + 2;
    let lw = width / cell + 2;
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let lattice = Frame::from_fn(lh, lw, |_, _| {
        std::array::from_fn(|c| (base[c] + contrast * rng.random_range(-0.5..0.5f32)).clamp(0.0, 1.0))
    });
    let off: [f32; 2] = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
    Frame::from_fn(height, width, |x, y| {
        lattice.sample(x as f32 / cell as f32 + off[0], y as f32 / cell as f32 + off[1])
    })
}

/// Two-colour checkerboard with `cell`-pixel squares and slight noise.
pub fn checker_texture(height: usize, width: usize, cell: usize, rng: &mut impl Rng) -> Frame {
    let a: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.45));
    let b: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.55..1.0));
    Frame::from_fn(height, width, |x, y| {
        let base = if (x / cell + y / cell) % 2 == 0 { a } else { b };
        base.map(|v| (v + rng.random_range(-0.05..0.05f32)).clamp(0.0, 1.0))
    })
}

fn sprite_texture(kind: Texture, h: usize, w: usize, rng: &mut impl Rng) -> Frame {
    match kind {
        Texture::Noise => noise_texture(h, w, 2, 0.9, rng),
        Texture::Checker => checker_texture(h, w, 3, rng),
    }
}

/// Background texture used by every scene.
pub fn background(height: usize, width: usize, rng: &mut impl Rng) -> Frame {
    noise_texture(height, width, 3, 0.6, rng)
}

/// Renders sprites over a static background; later sprites are nearer.
/// Each `points[k] = (sprite, u, v)` is tracked at local texture position
/// `(u, v)`; it is visible when on the canvas and not covered by a nearer
/// sprite.
pub fn render_scene(background: &Frame, sprites: &[Sprite], points: &[(usize, f32, f32)]) -> Result<DatasetSample> {
    let frames_n = sprites.first().map_or(0, |s| s.path.len());
    if sprites.iter().any(|s| s.path.len() != frames_n) || frames_n < 2 {
        return Err(Error::Config("sprite paths must share a length of at least two frames".into()));
    }
    let (h, w) = (background.height(), background.width());
    let frames = (0..frames_n)
        .map(|t| {
            Frame::from_fn(h, w, |x, y| {
                let (fx, fy) = (x as f32, y as f32);
                sprites
                    .iter()
                    .rev()
                    .find(|s| s.covers(t, fx, fy))
                    .map_or_else(|| background.pixel(x, y), |s| s.color(t, fx, fy))
            })
        })
        .collect();
    let tracks = points
        .iter()
        .map(|&(k, u, v)| {
            let positions: Vec<[f32; 2]> = sprites[k].path.iter().map(|p| [p[0] + u, p[1] + v]).collect();
            let visible = positions
                .iter()
                .enumerate()
                .map(|(t, &[x, y])| {
                    let on_canvas = x >= -0.5 && y >= -0.5 && x < w as f32 - 0.5 && y < h as f32 - 0.5;
                    on_canvas && !sprites[k + 1..].iter().any(|s| s.covers(t, x, y))
                })
                .collect();
            Track { positions, visible }
        })
        .collect();
    Ok(DatasetSample { clip: VideoClip::new(frames)?, tracks })
}

/// Texel positions at least one pixel inside the sprite border.
fn sample_points(sprite: usize, size: (usize, usize), count: usize, rng: &mut impl Rng) -> Vec<(usize, f32, f32)> {
    let (h, w) = size;
    (0..count)
        .map(|_| (sprite, rng.random_range(1..w - 1) as f32, rng.random_range(1..h - 1) as f32))
        .collect()
}

fn bounce_path(start: [f32; 2], vel: [f32; 2], size: [f32; 2], canvas: [f32; 2], frames: usize) -> Vec<[f32; 2]> {
    let (mut p, mut v) = (start, vel);
    let mut path = Vec::with_capacity(frames);
    for _ in 0..frames {
        path.push(p);
        for a in 0..2 {
            p[a] += v[a];
            let hi = canvas[a] - size[a];
            if p[a] < 0.0 {
                p[a] = -p[a];
                v[a] = -v[a];
            } else if p[a] > hi {
                p[a] = 2.0 * hi - p[a];
                v[a] = -v[a];
            }
        }
    }
    path
}

fn overlaps(a: &Sprite, b: &Sprite) -> bool {
    a.path.iter().zip(&b.path).any(|(p, q)| {
        p[0] < q[0] + b.width() && q[0] < p[0] + a.width() && p[1] < q[1] + b.height() && q[1] < p[1] + a.height()
    })
}

/// Sprites translating at constant speed and bouncing off the borders.
pub fn generate_sprite_clip(config: &SpriteSceneConfig) -> Result<DatasetSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let [h, w] = config.canvas_size;
    let bg = background(h, w, &mut rng);
    let mut sprites: Vec<Sprite> = Vec::new();
    let mut points = Vec::new();
    for k in 0..config.num_sprites {
        let mut placed = None;
        for _ in 0..1000 {
            let sh = rng.random_range(config.sprite_size_range[0]..=config.sprite_size_range[1]);
            let sw = rng.random_range(config.sprite_size_range[0]..=config.sprite_size_range[1]);
            let start = [rng.random_range(0.0..=(w - sw) as f32), rng.random_range(0.0..=(h - sh) as f32)];
            let [v0, v1] = config.velocity_range;
            let speed = if v0 == v1 { v0 } else { rng.random_range(v0..=v1) };
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            let vel = [speed * angle.cos(), speed * angle.sin()];
            let path = bounce_path(start, vel, [sw as f32, sh as f32], [w as f32, h as f32], config.num_frames);
            let cand = Sprite { texture: Frame::filled(sh, sw, [0.0; 3]), path };
            if config.allow_overlap || sprites.iter().all(|s| !overlaps(s, &cand)) {
                placed = Some((cand, sh, sw));
                break;
            }
        }
        let (mut sprite, sh, sw) =
            placed.ok_or_else(|| Error::Config(format!("could not place sprite {k} without overlap")))?;
        sprite.texture = sprite_texture(config.texture, sh, sw, &mut rng);
        points.extend(sample_points(k, (sh, sw), config.points_per_sprite, &mut rng));
        sprites.push(sprite);
    }
    render_scene(&bg, &sprites, &points)
}

/// Scripted scenes for checks that random scenes cannot guarantee.
pub mod fixtures {
    use super::*;

    fn textured_sprite(size: usize, path: Vec<[f32; 2]>, rng: &mut impl Rng) -> Sprite {
        Sprite { texture: noise_texture(size, size, 2, 0.9, rng), path }
    }

    /// Sprites that never move.
    pub fn static_scene(canvas: usize, frames: usize, seed: u64) -> Result<DatasetSample> {
        let config = SpriteSceneConfig {
            canvas_size: [canvas, canvas],
            velocity_range: [0.0, 0.0],
            num_frames: frames,
            seed,
            ..Default::default()
        };
        generate_sprite_clip(&config)
    }

    /// One sprite drifting slowly that jumps across the canvas at mid-clip.
    pub fn teleport(canvas: usize, frames: usize, seed: u64) -> Result<DatasetSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = canvas / 4;
        let c = canvas as f32;
        let path = (0..frames)
            .map(|t| {
                let t = t as f32;
                if (t as usize) < frames / 2 {
                    [0.15 * c + 0.5 * t, 0.2 * c]
                } else {
                    [0.55 * c + 0.5 * t, 0.55 * c]
                }
            })
            .collect();
        let bg = background(canvas, canvas, &mut rng);
        let sprite = textured_sprite(size, path, &mut rng);
        let points = sample_points(0, (size, size), 6, &mut rng);
        render_scene(&bg, &[sprite], &points)
    }

    /// Static rear sprites with a fast front sprite sweeping over them, so
    /// tracked points are hidden for part of the clip.
    pub fn occlusion(canvas: usize, frames: usize, seed: u64) -> Result<DatasetSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = canvas as f32;
        let rear = canvas * 5 / 16;
        let bg = background(canvas, canvas, &mut rng);
        let mut sprites = vec![
            textured_sprite(rear, vec![[0.1 * c, 0.1 * c]; frames], &mut rng),
            textured_sprite(rear, vec![[0.55 * c, 0.55 * c]; frames], &mut rng),
        ];
        let front = canvas * 7 / 16;
        let speed = (c - front as f32) / (frames - 1) as f32;
        let sweep = (0..frames).map(|t| {
            let p = t as f32 * speed;
            [p, p]
        });
        sprites.push(textured_sprite(front, sweep.collect(), &mut rng));
        let mut points = sample_points(0, (rear, rear), 8, &mut rng);
        points.extend(sample_points(1, (rear, rear), 8, &mut rng));
        render_scene(&bg, &sprites, &points)
    }
}

/// Reads every decodable image in a directory, in lexicographic order.
/// Frames are resized to `resize_to = (height, width)`, or to the first
/// frame's size when `None`.
pub fn load_frame_directory(path: &Path, resize_to: Option<(usize, usize)>) -> Result<VideoClip> {
    let mut files: Vec<_> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyInput(format!("no image files in {}", path.display())));
    }
    let mut target = resize_to;
    let mut frames = Vec::with_capacity(files.len());
    for file in &files {
        let img = image::open(file).map_err(|e| Error::Image { path: file.clone(), source: e })?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        let frame = Frame::new(h, w, data)?;
        let (th, tw) = *target.get_or_insert((h, w));
        frames.push(if (h, w) == (th, tw) { frame } else { resize_bilinear(&frame, th, tw) });
    }
    VideoClip::new(frames)
}

/// Writes a clip as numbered PNG files.
pub fn save_frames(clip: &VideoClip, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in clip.frames().iter().enumerate() {
        let path = dir.join(format!("{t:05}.png"));
        let bytes = f.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::RgbImage::from_raw(f.width() as u32, f.height() as u32, bytes).expect("frame buffer size");
        img.save(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?;
    }
    Ok(())
}

/// A stream of training clips.
pub trait ClipSource {
    fn next_clip(&mut self, rng: &mut ChaCha8Rng) -> Result<VideoClip>;
}

/// Endless freshly generated sprite scenes; each draws its seed from the
/// batch RNG.
#[derive(Clone, Debug)]
pub struct SpriteSource {
    pub config: SpriteSceneConfig,
}

impl ClipSource for SpriteSource {
    fn next_clip(&mut self, rng: &mut ChaCha8Rng) -> Result<VideoClip> {
        let config = SpriteSceneConfig { seed: rng.random(), ..self.config.clone() };
        Ok(generate_sprite_clip(&config)?.clip)
    }
}

/// A fixed list of clips, each used once.
#[derive(Clone, Debug)]
pub struct ClipList {
    clips: std::vec::IntoIter<VideoClip>,
}

impl ClipList {
    pub fn new(clips: Vec<VideoClip>) -> Self {
        Self { clips: clips.into_iter() }
    }
}

impl ClipSource for ClipList {
    fn next_clip(&mut self, _rng: &mut ChaCha8Rng) -> Result<VideoClip> {
        self.clips.next().ok_or(Error::SourceExhausted)
    }
}

/// A fixed list of clips, revisited in order without end.
#[derive(Clone, Debug)]
pub struct ClipCycle {
    clips: Vec<VideoClip>,
    next: usize,
}

impl ClipCycle {
    pub fn new(clips: Vec<VideoClip>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::EmptyInput("no clips to cycle".into()));
        }
        Ok(Self { clips, next: 0 })
    }
}

impl ClipSource for ClipCycle {
    fn next_clip(&mut self, _rng: &mut ChaCha8Rng) -> Result<VideoClip> {
        let clip = self.clips[self.next].clone();
        self.next = (self.next + 1) % self.clips.len();
        Ok(clip)
    }
}

/// `batch_size` palindromes with gaps drawn uniformly from the configured
/// range; clips shorter than the drawn gap are skipped with a warning.
pub fn make_training_batch(
    source: &mut dyn ClipSource,
    batch_size: usize,
    augment: &AugmentConfig,
    output_size: (usize, usize),
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Palindrome>> {
    let [g0, g1] = augment.frame_gap_range;
    let mut batch = Vec::with_capacity(batch_size);
    while batch.len() < batch_size {
        let clip = source.next_clip(rng)?;
        let gap = rng.random_range(g0..=g1);
        if clip.len() <= gap {
            warn!("skipping {}-frame clip for frame gap {gap}", clip.len());
            continue;
        }
        batch.push(build_palindrome(&clip, gap, augment, output_size, stride, rng)?);
    }
    Ok(batch)
}
