//! Synthetic clips, mask downsampling and file IO.
//!
//! Each synthetic object is a textured shape defined in its own local frame
//! and placed in every frame by a similarity transform (optionally preceded by
//! a smooth warp). Pixel `(x, y)` of an image has its center at coordinate
//! `(x, y)`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point2, SimilarityTransform2D};
use crate::maskops::Mask;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("bad dimensions: {0}")]
    BadDims(String),
    #[error("{file}: parse error at byte {offset}: {message}")]
    Parse {
        file: String,
        offset: u64,
        message: String,
    },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// RGB image, row-major with interleaved channels, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, DataError> {
        if data.len() != width * height * 3 {
            return Err(DataError::BadDims(format!(
                "{}x{}x3 image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Cyclic shift: output pixel (x, y) reads input (x - dx, y - dy).
    pub fn roll(&self, dx: isize, dy: isize) -> Image {
        let (w, h) = (self.width as isize, self.height as isize);
        Image::from_fn(self.width, self.height, |x, y| {
            let sx = (x as isize - dx).rem_euclid(w) as usize;
            let sy = (y as isize - dy).rem_euclid(h) as usize;
            self.pixel(sx, sy)
        })
    }

    /// Bilinear lookup with edge clamping.
    pub fn sample(&self, p: Point2) -> [f64; 3] {
        let x = p.x.clamp(0.0, (self.width - 1) as f64);
        let y = p.y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let (a, b, c, d) = (
            self.pixel(x0, y0),
            self.pixel(x1, y0),
            self.pixel(x0, y1),
            self.pixel(x1, y1),
        );
        std::array::from_fn(|ch| {
            (a[ch] * (1.0 - fx) + b[ch] * fx) * (1.0 - fy) + (c[ch] * (1.0 - fx) + d[ch] * fx) * fy
        })
    }
}

/// One frame of a ground-truth track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl TrackPoint {
    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: usize,
    /// One entry per clip frame.
    pub points: Vec<TrackPoint>,
}

impl Track {
    pub fn first_visible(&self) -> Option<usize> {
        self.points.iter().position(|p| p.visible)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
}

impl TrackSet {
    pub fn num_frames(&self) -> usize {
        self.tracks.first().map_or(0, |t| t.points.len())
    }
}

/// A clip: frames, per-frame per-object masks (`masks[frame][object]`) and,
/// for synthetic clips, tracks and the local-to-image pose of each object.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub name: String,
    pub frames: Vec<Image>,
    pub masks: Vec<Vec<Mask>>,
    pub gt_tracks: Option<TrackSet>,
    /// `poses[frame][object]`.
    pub poses: Vec<Vec<SimilarityTransform2D>>,
}

impl Clip {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_objects(&self) -> usize {
        self.masks.first().map_or(0, |m| m.len())
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.frames.len();
        if n == 0 || self.masks.len() != n {
            return Err(DataError::DimMismatch(format!(
                "{} frames but {} mask frames",
                n,
                self.masks.len()
            )));
        }
        let (w, h) = (self.frames[0].width, self.frames[0].height);
        let objects = self.masks[0].len();
        if objects == 0 {
            return Err(DataError::DimMismatch("clip has no objects".into()));
        }
        for (t, (f, ms)) in self.frames.iter().zip(&self.masks).enumerate() {
            if f.width != w || f.height != h {
                return Err(DataError::DimMismatch(format!(
                    "frame {t} is {}x{}",
                    f.width, f.height
                )));
            }
            if ms.len() != objects {
                return Err(DataError::DimMismatch(format!(
                    "frame {t} has {} masks",
                    ms.len()
                )));
            }
            if ms.iter().any(|m| m.width() != w || m.height() != h) {
                return Err(DataError::DimMismatch(format!(
                    "frame {t} mask size differs from frame"
                )));
            }
        }
        if let Some(ts) = &self.gt_tracks {
            if ts.tracks.iter().any(|t| t.points.len() != n) {
                return Err(DataError::DimMismatch(
                    "track length differs from frame count".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Downsamples an image-resolution mask by `patch`: a cell is foreground when
/// at least half of its pixels are.
pub fn mask_to_grid(m: &Mask, patch: usize) -> Result<Mask, DataError> {
    if patch == 0 || !m.width().is_multiple_of(patch) || !m.height().is_multiple_of(patch) {
        return Err(DataError::BadDims(format!(
            "{}x{} mask is not divisible by patch {}",
            m.width(),
            m.height(),
            patch
        )));
    }
    let (gw, gh) = (m.width() / patch, m.height() / patch);
    Ok(Mask::from_fn(gw, gh, |gx, gy| {
        let mut count = 0;
        for y in gy * patch..(gy + 1) * patch {
            for x in gx * patch..(gx + 1) * patch {
                count += m.get(x, y) as usize;
            }
        }
        2 * count >= patch * patch
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    Static,
    /// Constant per-frame displacement in pixels.
    Translate {
        dx: f64,
        dy: f64,
    },
    /// Smooth random walk over scale, rotation and position.
    RandomWalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub motion: Motion,
    pub scale_range: [f64; 2],
    pub max_rotation_deg: f64,
    /// Object radius range in pixels at scale 1.
    pub radius_range: [f64; 2],
    /// Peak displacement of the optional warp in pixels; 0 disables it.
    pub deform: f64,
    pub tracks_per_object: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            frames: 16,
            min_objects: 1,
            max_objects: 3,
            motion: Motion::RandomWalk,
            scale_range: [0.7, 1.4],
            max_rotation_deg: 30.0,
            radius_range: [18.0, 28.0],
            deform: 0.0,
            tracks_per_object: 20,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::BadConfig(m.into()));
        if self.width < 8 || self.height < 8 {
            return bad("image must be at least 8x8");
        }
        if self.frames == 0 {
            return bad("frames must be >= 1");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 <= min_objects <= max_objects");
        }
        let [s0, s1] = self.scale_range;
        if !(s0 > 0.0 && s0 <= 1.0 && s1 >= 1.0) {
            return bad("scale_range must satisfy 0 < lo <= 1 <= hi");
        }
        let [r0, r1] = self.radius_range;
        if !(r0 >= 3.0 && r0 <= r1) {
            return bad("radius_range must satisfy 3 <= lo <= hi");
        }
        if !(self.max_rotation_deg >= 0.0) {
            return bad("max_rotation_deg must be >= 0");
        }
        if !(0.0..=8.0).contains(&self.deform) {
            return bad("deform must lie in [0, 8]");
        }
        if let Motion::Translate { dx, dy } = self.motion {
            if !dx.is_finite() || !dy.is_finite() {
                return bad("translation must be finite");
            }
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(ix as u64 ^ splitmix(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (smooth(x - fx), smooth(y - fy));
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    (a * (1.0 - tx) + b * tx) * (1.0 - ty) + (c * (1.0 - tx) + d * tx) * ty
}

/// Seeded multi-octave value noise, one independent field per channel.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Texture {
    seed: u64,
    base: [f64; 3],
    contrast: f64,
    cell: f64,
}

impl Texture {
    const OCTAVES: [(f64, f64); 3] = [(1.0, 0.55), (0.5, 0.3), (0.25, 0.15)];

    fn color(&self, p: Point2) -> [f64; 3] {
        std::array::from_fn(|ch| {
            let mut n = 0.0;
            for (o, &(size, amp)) in Self::OCTAVES.iter().enumerate() {
                let s = self.cell * size;
                let seed = splitmix(self.seed ^ ((ch * 8 + o) as u64 + 1));
                n += amp * value_noise(seed, p.x / s, p.y / s);
            }
            (self.base[ch] + self.contrast * (n - 0.5)).clamp(0.0, 1.0)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Ellipse {
        a: f64,
        b: f64,
    },
    Polygon {
        vertices: Vec<Point2>,
    },
    /// Radius `r0 (1 + sum_k amp_k cos(k phi + phase_k))`.
    Blob {
        r0: f64,
        harmonics: Vec<(f64, f64)>,
    },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, radius: f64) -> Shape {
        match rng.gen_range(0..3) {
            0 => Shape::Ellipse {
                a: radius,
                b: radius * rng.gen_range(0.6..1.0),
            },
            1 => {
                let n = rng.gen_range(5..9);
                let vertices = (0..n)
                    .map(|i| {
                        let phi = std::f64::consts::TAU * (i as f64 + rng.gen_range(-0.25..0.25))
                            / n as f64;
                        let r = radius * rng.gen_range(0.8..1.0);
                        Point2::new(r * phi.cos(), r * phi.sin())
                    })
                    .collect();
                Shape::Polygon { vertices }
            }
            _ => Shape::Blob {
                r0: radius * 0.9,
                harmonics: (2..5)
                    .map(|_| {
                        (
                            rng.gen_range(0.0..0.12),
                            rng.gen_range(0.0..std::f64::consts::TAU),
                        )
                    })
                    .collect(),
            },
        }
    }

    /// Signed inside test with an inward margin in local pixels.
    fn contains(&self, p: Point2, margin: f64) -> bool {
        match self {
            Shape::Ellipse { a, b } => {
                let (a, b) = (a - margin, b - margin);
                a > 0.0 && b > 0.0 && (p.x / a).powi(2) + (p.y / b).powi(2) <= 1.0
            }
            Shape::Polygon { vertices } => {
                // convex, counter-clockwise
                let n = vertices.len();
                (0..n).all(|i| {
                    let a = vertices[i];
                    let b = vertices[(i + 1) % n];
                    let e = b - a;
                    let cross = e.x * (p.y - a.y) - e.y * (p.x - a.x);
                    cross / e.norm() >= margin
                })
            }
            Shape::Blob { r0, harmonics } => {
                let phi = p.y.atan2(p.x);
                let mut r = 1.0;
                for (k, &(amp, phase)) in harmonics.iter().enumerate() {
                    r += amp * ((k + 2) as f64 * phi + phase).cos();
                }
                // the radial profile has slope well below 1, so a radial
                // margin bounds the Euclidean one from above
                p.norm() <= r0 * r - 1.5 * margin
            }
        }
    }
}

/// Smooth displacement applied in local coordinates before the pose.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Warp {
    amp: f64,
    phase: [f64; 2],
}

impl Warp {
    const FREQ: f64 = 0.06;

    fn offset(&self, u: Point2, t: usize) -> Point2 {
        let tt = 0.35 * t as f64;
        Point2::new(
            self.amp * (Self::FREQ * u.y + self.phase[0] + tt).sin(),
            self.amp * (Self::FREQ * u.x + self.phase[1] + tt).sin(),
        )
    }

    fn forward(&self, u: Point2, t: usize) -> Point2 {
        u + self.offset(u, t)
    }

    /// Solves `u + offset(u) = v` by fixed-point iteration (a contraction).
    fn inverse(&self, v: Point2, t: usize) -> Point2 {
        let mut u = v;
        for _ in 0..40 {
            u = v - self.offset(u, t);
        }
        u
    }
}

struct SynthObject {
    shape: Shape,
    texture: Texture,
    warp: Option<Warp>,
    poses: Vec<SimilarityTransform2D>,
}

impl SynthObject {
    fn local_to_image(&self, u: Point2, t: usize) -> Point2 {
        let w = self.warp.map_or(u, |w| w.forward(u, t));
        self.poses[t].apply(w)
    }

    fn image_to_local(&self, p: Point2, t: usize) -> Point2 {
        let v = self.poses[t].inverse().apply(p);
        self.warp.map_or(v, |w| w.inverse(v, t))
    }
}

fn reflect(v: f64, lo: f64, hi: f64, vel: &mut f64) -> f64 {
    if v < lo {
        *vel = vel.abs();
        2.0 * lo - v
    } else if v > hi {
        *vel = -vel.abs();
        2.0 * hi - v
    } else {
        v
    }
}

fn trajectory(cfg: &SynthConfig, rng: &mut ChaCha8Rng, radius: f64) -> Vec<SimilarityTransform2D> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let margin = (radius * 0.6).min(w / 2.0 - 1.0).min(h / 2.0 - 1.0);
    let mut c = Point2::new(
        rng.gen_range(margin..w - margin),
        rng.gen_range(margin..h - margin),
    );
    let max_rot = cfg.max_rotation_deg.to_radians();
    let [s_lo, s_hi] = cfg.scale_range;
    let mut s: f64 = rng.gen_range(s_lo.max(0.85)..=s_hi.min(1.15));
    let mut theta = rng.gen_range(-0.3..=0.3) * max_rot;
    match cfg.motion {
        Motion::Static => vec![SimilarityTransform2D::from_parts(s, theta, c); cfg.frames],
        Motion::Translate { dx, dy } => (0..cfg.frames)
            .map(|t| {
                let ct = Point2::new(c.x + t as f64 * dx, c.y + t as f64 * dy);
                SimilarityTransform2D::from_parts(s, theta, ct)
            })
            .collect(),
        Motion::RandomWalk => {
            let mut vel = Point2::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            let mut v_log_s = rng.gen_range(-0.03..0.03);
            let mut v_theta = rng.gen_range(-0.04..0.04) * max_rot.max(1e-12) / 0.5;
            let mut out = Vec::with_capacity(cfg.frames);
            for _ in 0..cfg.frames {
                out.push(SimilarityTransform2D::from_parts(s, theta, c));
                vel = vel * 0.85 + Point2::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6));
                let speed = vel.norm();
                if speed > 3.0 {
                    vel = vel * (3.0 / speed);
                }
                v_log_s = 0.8 * v_log_s + rng.gen_range(-0.02..0.02);
                v_theta = 0.8 * v_theta + rng.gen_range(-0.03..0.03) * max_rot;
                c.x = reflect(c.x + vel.x, margin, w - margin, &mut vel.x);
                c.y = reflect(c.y + vel.y, margin, h - margin, &mut vel.y);
                let log_s = reflect(s.ln() + v_log_s, s_lo.ln(), s_hi.ln(), &mut v_log_s);
                s = log_s.exp();
                theta = reflect(theta + v_theta, -max_rot, max_rot, &mut v_theta);
            }
            out
        }
    }
}

fn random_texture(rng: &mut ChaCha8Rng, contrast: f64) -> Texture {
    Texture {
        seed: rng.gen(),
        base: std::array::from_fn(|_| rng.gen_range(0.25..0.75)),
        contrast,
        cell: rng.gen_range(7.0..12.0),
    }
}

/// Minimum distance from a track point to its shape boundary, local pixels.
const TRACK_MARGIN: f64 = 2.0;

/// Renders one synthetic clip. Deterministic in `seed`.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64, name: &str) -> Result<Clip, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let background = random_texture(&mut rng, 1.6);
    let objects: Vec<SynthObject> = (0..n_obj)
        .map(|_| {
            let radius = rng.gen_range(cfg.radius_range[0]..=cfg.radius_range[1]);
            let shape = Shape::random(&mut rng, radius);
            let texture = random_texture(&mut rng, 2.2);
            let warp = (cfg.deform > 0.0).then(|| Warp {
                amp: cfg.deform,
                phase: [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)],
            });
            let poses = trajectory(cfg, &mut rng, radius);
            SynthObject {
                shape,
                texture,
                warp,
                poses,
            }
        })
        .collect();

    let (w, h) = (cfg.width, cfg.height);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut frame_masks = vec![Mask::empty(w, h); n_obj];
        let img = Image::from_fn(w, h, |x, y| {
            let p = Point2::new(x as f64, y as f64);
            // later objects are in front
            for (k, obj) in objects.iter().enumerate().rev() {
                let u = obj.image_to_local(p, t);
                if obj.shape.contains(u, 0.0) {
                    frame_masks[k].set(x, y, true);
                    return obj.texture.color(u);
                }
            }
            background.color(p)
        });
        frames.push(img);
        masks.push(frame_masks);
    }

    let mut tracks = Vec::new();
    for (k, obj) in objects.iter().enumerate() {
        let r = cfg.radius_range[1] * 1.2;
        let mut placed = 0;
        let mut attempts = 0;
        // track ids are `object * tracks_per_object + index`
        while placed < cfg.tracks_per_object && attempts < 100_000 {
            attempts += 1;
            let u = Point2::new(rng.gen_range(-r..r), rng.gen_range(-r..r));
            if !obj.shape.contains(u, TRACK_MARGIN) {
                continue;
            }
            let points: Vec<TrackPoint> = (0..cfg.frames)
                .map(|t| {
                    let p = obj.local_to_image(u, t);
                    let inside =
                        p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64;
                    TrackPoint {
                        x: p.x,
                        y: p.y,
                        visible: inside && masks[t][k].contains_point(p),
                    }
                })
                .collect();
            tracks.push(Track {
                id: k * cfg.tracks_per_object + placed,
                points,
            });
            placed += 1;
        }
    }

    let poses = (0..cfg.frames)
        .map(|t| objects.iter().map(|o| o.poses[t]).collect())
        .collect();
    let clip = Clip {
        name: name.to_string(),
        frames,
        masks,
        gt_tracks: Some(TrackSet { tracks }),
        poses,
    };
    clip.validate()?;
    Ok(clip)
}

/// How to obtain a train/held-out corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSpec {
    Generate(GeneratorSpec),
    Path(PathBuf),
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec::Generate(GeneratorSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub synth: SynthConfig,
    pub train_clips: usize,
    pub heldout_clips: usize,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train_clips: 20,
            heldout_clips: 5,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Clip>,
    pub heldout: Vec<Clip>,
}

pub fn generate_corpus(spec: &GeneratorSpec) -> Result<Corpus, DataError> {
    let make = |split: &str, n: usize, salt: u64| -> Result<Vec<Clip>, DataError> {
        (0..n)
            .map(|i| {
                let seed = splitmix(spec.seed ^ splitmix(salt + i as u64));
                gen_synthetic(&spec.synth, seed, &format!("{split}_{i:04}"))
            })
            .collect()
    };
    Ok(Corpus {
        train: make("train", spec.train_clips, 0)?,
        heldout: make("heldout", spec.heldout_clips, 1 << 32)?,
    })
}

pub fn load_corpus(spec: &CorpusSpec) -> Result<Corpus, DataError> {
    match spec {
        CorpusSpec::Generate(g) => generate_corpus(g),
        CorpusSpec::Path(dir) => read_corpus(dir),
    }
}

// ---------------------------------------------------------------- netpbm

fn parse_err(file: &Path, offset: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        file: file.display().to_string(),
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parses a binary netpbm header; returns (width, height, data offset).
fn parse_netpbm_header(
    bytes: &[u8],
    magic: &[u8; 2],
    file: &Path,
) -> Result<(usize, usize, usize), DataError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(parse_err(
            file,
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        let start_ws = pos;
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        if pos == start_ws {
            return Err(parse_err(file, pos, "expected whitespace"));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(parse_err(
                file,
                pos,
                format!("expected header field {}", i + 1),
            ));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| parse_err(file, start, "header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(parse_err(
            file,
            pos,
            "expected single whitespace after maxval",
        ));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(parse_err(
            file,
            pos - 1,
            format!("unsupported maxval {maxval}"),
        ));
    }
    if w == 0 || h == 0 {
        return Err(parse_err(file, pos - 1, "zero image dimension"));
    }
    Ok((w, h, pos))
}

fn write_bytes(path: &Path, header: &str, body: &[u8]) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(header.as_bytes()).map_err(io_err(path))?;
    w.write_all(body).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Binary PGM, 0 = background, 255 = foreground.
pub fn write_pgm(path: &Path, m: &Mask) -> Result<(), DataError> {
    let body: Vec<u8> = m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_bytes(
        path,
        &format!("P5\n{} {}\n255\n", m.width(), m.height()),
        &body,
    )
}

/// Reads a binary PGM mask; any value of 128 or more is foreground.
pub fn read_pgm(path: &Path) -> Result<Mask, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, start) = parse_netpbm_header(&bytes, b"P5", path)?;
    let body = &bytes[start..];
    if body.len() != w * h {
        return Err(parse_err(
            path,
            start + body.len().min(w * h),
            format!("expected {} pixel bytes, found {}", w * h, body.len()),
        ));
    }
    Mask::new(w, h, body.iter().map(|&v| v >= 128).collect())
        .map_err(|e| DataError::BadDims(e.to_string()))
}

/// Binary PPM; values are rounded to 8 bits.
pub fn write_ppm(path: &Path, img: &Image) -> Result<(), DataError> {
    let body: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_bytes(
        path,
        &format!("P6\n{} {}\n255\n", img.width, img.height),
        &body,
    )
}

pub fn read_ppm(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, start) = parse_netpbm_header(&bytes, b"P6", path)?;
    let body = &bytes[start..];
    if body.len() != w * h * 3 {
        return Err(parse_err(
            path,
            start + body.len().min(w * h * 3),
            format!("expected {} pixel bytes, found {}", w * h * 3, body.len()),
        ));
    }
    Image::new(w, h, body.iter().map(|&v| v as f64 / 255.0).collect())
}

// ---------------------------------------------------------------- tracks

const TRACK_COLUMNS: [&str; 5] = ["track_id", "frame", "x", "y", "visible"];

pub fn write_tracks(path: &Path, tracks: &TrackSet) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(TRACK_COLUMNS).map_err(|e| csv_io(path, e))?;
    for t in &tracks.tracks {
        for (f, p) in t.points.iter().enumerate() {
            w.write_record([
                t.id.to_string(),
                f.to_string(),
                p.x.to_string(),
                p.y.to_string(),
                (p.visible as u8).to_string(),
            ])
            .map_err(|e| csv_io(path, e))?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn csv_io(path: &Path, e: csv::Error) -> DataError {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io {
            path: path.display().to_string(),
            source,
        },
        kind => parse_err(path, offset as usize, format!("{kind:?}")),
    }
}

/// Reads `track_id,frame,x,y,visible` rows (any column order). Every track
/// must cover frames `0..n` exactly once, with the same `n` for all tracks.
pub fn read_tracks(path: &Path) -> Result<TrackSet, DataError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let headers = r.headers().map_err(|e| csv_io(path, e))?.clone();
    let mut col = [0usize; 5];
    for (slot, name) in col.iter_mut().zip(TRACK_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| parse_err(path, 0, format!("missing column '{name}'")))?;
    }
    let mut rows: Vec<(usize, usize, TrackPoint)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let offset = rec.position().map_or(0, |p| p.byte()) as usize;
        let field = |i: usize| -> Result<&str, DataError> {
            rec.get(col[i]).map(str::trim).ok_or_else(|| {
                parse_err(
                    path,
                    offset,
                    format!("row lacks column '{}'", TRACK_COLUMNS[i]),
                )
            })
        };
        let bad = |i: usize| {
            parse_err(
                path,
                offset,
                format!("bad value in column '{}'", TRACK_COLUMNS[i]),
            )
        };
        let id: usize = field(0)?.parse().map_err(|_| bad(0))?;
        let frame: usize = field(1)?.parse().map_err(|_| bad(1))?;
        let x: f64 = field(2)?.parse().map_err(|_| bad(2))?;
        let y: f64 = field(3)?.parse().map_err(|_| bad(3))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(parse_err(path, offset, "non-finite coordinate"));
        }
        let visible = match field(4)? {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(bad(4)),
        };
        rows.push((id, frame, TrackPoint { x, y, visible }));
    }
    rows.sort_by_key(|&(id, frame, _)| (id, frame));
    let mut tracks: Vec<Track> = Vec::new();
    for (id, frame, p) in rows {
        match tracks.last_mut() {
            Some(t) if t.id == id => {
                if frame != t.points.len() {
                    return Err(DataError::DimMismatch(format!(
                        "track {id}: frame {frame} out of sequence"
                    )));
                }
                t.points.push(p);
            }
            _ => {
                if frame != 0 {
                    return Err(DataError::DimMismatch(format!(
                        "track {id} does not start at frame 0"
                    )));
                }
                tracks.push(Track {
                    id,
                    points: vec![p],
                });
            }
        }
    }
    if let Some(n) = tracks.first().map(|t| t.points.len()) {
        if let Some(t) = tracks.iter().find(|t| t.points.len() != n) {
            return Err(DataError::DimMismatch(format!(
                "track {} has {} frames, expected {n}",
                t.id,
                t.points.len()
            )));
        }
    }
    Ok(TrackSet { tracks })
}

// ---------------------------------------------------------------- clips

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    scale: f64,
    angle: f64,
    tx: f64,
    ty: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipMeta {
    name: String,
    width: usize,
    height: usize,
    frames: usize,
    objects: usize,
    has_tracks: bool,
    /// `poses[frame][object]`, empty when unknown.
    poses: Vec<Vec<PoseRecord>>,
}

pub fn write_clip(dir: &Path, clip: &Clip) -> Result<(), DataError> {
    clip.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (t, (frame, ms)) in clip.frames.iter().zip(&clip.masks).enumerate() {
        write_ppm(&dir.join(format!("frame_{t:05}.ppm")), frame)?;
        for (k, m) in ms.iter().enumerate() {
            write_pgm(&dir.join(format!("mask_{t:05}_obj{k:02}.pgm")), m)?;
        }
    }
    if let Some(ts) = &clip.gt_tracks {
        write_tracks(&dir.join("tracks.csv"), ts)?;
    }
    let meta = ClipMeta {
        name: clip.name.clone(),
        width: clip.frames[0].width,
        height: clip.frames[0].height,
        frames: clip.num_frames(),
        objects: clip.num_objects(),
        has_tracks: clip.gt_tracks.is_some(),
        poses: clip
            .poses
            .iter()
            .map(|ps| {
                ps.iter()
                    .map(|p| PoseRecord {
                        scale: p.scale,
                        angle: p.angle(),
                        tx: p.translation.x,
                        ty: p.translation.y,
                    })
                    .collect()
            })
            .collect(),
    };
    let path = dir.join("clip.json");
    let json = serde_json::to_string_pretty(&meta).expect("metadata serialises");
    fs::write(&path, json).map_err(io_err(&path))
}

pub fn read_clip(dir: &Path) -> Result<Clip, DataError> {
    let path = dir.join("clip.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let meta: ClipMeta =
        serde_json::from_str(&text).map_err(|e| parse_err(&path, 0, e.to_string()))?;
    let mut frames = Vec::with_capacity(meta.frames);
    let mut masks = Vec::with_capacity(meta.frames);
    for t in 0..meta.frames {
        let f = read_ppm(&dir.join(format!("frame_{t:05}.ppm")))?;
        if f.width != meta.width || f.height != meta.height {
            return Err(DataError::DimMismatch(format!(
                "frame {t} is {}x{}, clip.json says {}x{}",
                f.width, f.height, meta.width, meta.height
            )));
        }
        frames.push(f);
        let ms = (0..meta.objects)
            .map(|k| read_pgm(&dir.join(format!("mask_{t:05}_obj{k:02}.pgm"))))
            .collect::<Result<Vec<_>, _>>()?;
        masks.push(ms);
    }
    let gt_tracks = if meta.has_tracks {
        Some(read_tracks(&dir.join("tracks.csv"))?)
    } else {
        None
    };
    let poses = meta
        .poses
        .iter()
        .map(|ps| {
            ps.iter()
                .map(|p| {
                    SimilarityTransform2D::from_parts(p.scale, p.angle, Point2::new(p.tx, p.ty))
                })
                .collect()
        })
        .collect();
    let clip = Clip {
        name: meta.name,
        frames,
        masks,
        gt_tracks,
        poses,
    };
    clip.validate()?;
    Ok(clip)
}

/// Writes `<dir>/train/<clip>` and `<dir>/heldout/<clip>`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<(), DataError> {
    for (split, clips) in [("train", &corpus.train), ("heldout", &corpus.heldout)] {
        for clip in clips {
            write_clip(&dir.join(split).join(&clip.name), clip)?;
        }
    }
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus, DataError> {
    let read_split = |split: &str| -> Result<Vec<Clip>, DataError> {
        let sub = dir.join(split);
        if !sub.exists() {
            return Ok(Vec::new());
        }
        let mut names: Vec<PathBuf> = fs::read_dir(&sub)
            .map_err(io_err(&sub))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("clip.json").exists())
            .collect();
        names.sort();
        names.iter().map(|p| read_clip(p)).collect()
    };
    let corpus = Corpus {
        train: read_split("train")?,
        heldout: read_split("heldout")?,
    };
    if corpus.train.is_empty() && corpus.heldout.is_empty() {
        return Err(DataError::BadConfig(format!(
            "no clips under {}",
            dir.display()
        )));
    }
    Ok(corpus)
}
