//! Synthetic paired RGB-X tracking sequences.
//!
//! Each auxiliary modality carries a distinct signature:
//! * depth: smooth background ramp, a constant-disparity object with a sharp
//!   boundary, alternating-row sensor banding;
//! * thermal: low-frequency cool background, a warm blob on the object,
//!   alternating-column fixed-pattern noise;
//! * event: +-1 spikes where the latent scene changed since the previous
//!   frame, stored as `0.5 + 0.5 * polarity`.
//!
//! Degraded sequences spoil the RGB view (darkness, occlusion by look-alike
//! clones, blur) while the auxiliary view keeps the target visible.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::geometry::BoxPx;
use crate::modality::Modality;
use crate::scalar::Scalar;
use crate::tokenizer::{Frame, Role};

/// Event polarity threshold on the latent grey level.
pub const EVENT_THRESHOLD: f64 = 0.04;
/// Amplitude of the per-sensor alternating stripe pattern.
pub const SENSOR_PATTERN: f64 = 0.1;
/// Number of look-alike clones in degraded sequences.
pub const DEGRADED_CLONES: usize = 2;

/// How the RGB view is spoiled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Degradation {
    None,
    /// RGB scaled by `1 - level` plus sensor noise; static clones.
    Darkness { level: f64 },
    /// Moving look-alike clones drawn over the scene.
    Occlusion,
    /// Box blur of the given radius; static clones.
    Blur { radius: usize },
}

impl Degradation {
    pub fn is_degraded(&self) -> bool {
        !matches!(self, Degradation::None)
    }

    pub fn label(&self) -> &'static str {
        match self {
            Degradation::None => "clean",
            Degradation::Darkness { .. } => "darkness",
            Degradation::Occlusion => "occlusion",
            Degradation::Blur { .. } => "blur",
        }
    }

    /// The profile under which `m` helps most.
    pub fn matched(m: Modality) -> Self {
        match m {
            Modality::Depth => Degradation::Occlusion,
            Modality::Thermal => Degradation::Darkness { level: 0.9 },
            Modality::Event => Degradation::Blur { radius: 4 },
        }
    }
}

/// Parametric centre path: `start + velocity t + amplitude sin(2 pi t / period + phase)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub amplitude: (f64, f64),
    pub period: f64,
    pub phase: f64,
}

impl Trajectory {
    pub fn fixed(x: f64, y: f64) -> Self {
        Self {
            start: (x, y),
            velocity: (0.0, 0.0),
            amplitude: (0.0, 0.0),
            period: 1.0,
            phase: 0.0,
        }
    }

    pub fn center(&self, t: f64) -> (f64, f64) {
        let s = (2.0 * std::f64::consts::PI * t / self.period + self.phase).sin();
        (
            self.start.0 + self.velocity.0 * t + self.amplitude.0 * s,
            self.start.1 + self.velocity.1 * t + self.amplitude.1 * s,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub length: usize,
    pub frame_size: usize,
    pub trajectory: Trajectory,
    pub object_size: (f64, f64),
    pub appearance_seed: u64,
    pub background_seed: u64,
    pub distractors: usize,
    pub degradation: Degradation,
}

impl SequenceSpec {
    pub fn box_at(&self, t: usize) -> BoxPx {
        let (cx, cy) = self.trajectory.center(t as f64);
        let (w, h) = self.object_size;
        BoxPx::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.frame_size == 0 {
            return Err(config_err!("sequence length and frame size must be positive"));
        }
        let (w, h) = self.object_size;
        if !(w >= 1.0 && h >= 1.0) {
            return Err(config_err!("object size {w}x{h} too small"));
        }
        let fs = self.frame_size as f64;
        for t in 0..self.length {
            let b = self.box_at(t);
            if !b.within(fs, fs) {
                return Err(Error::Data(format!(
                    "trajectory leaves the {fs}x{fs} frame at t={t}: {b:?}"
                )));
            }
        }
        Ok(())
    }

    /// Random valid spec; `degraded` selects the profile matched to `modality`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, modality: Modality, degraded: bool, length: usize, frame_size: usize) -> Self {
        let fs = frame_size as f64;
        loop {
            let w = rng.random_range(10.0..18.0);
            let h = rng.random_range(10.0..18.0);
            let speed = rng.random_range(0.8..1.4);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let velocity = (speed * angle.cos(), speed * angle.sin());
            let amp = rng.random_range(0.0..4.0);
            let travel = (velocity.0 * length as f64, velocity.1 * length as f64);
            // start so that the straight path stays centred in the frame
            let start = (
                fs / 2.0 - travel.0 / 2.0 + rng.random_range(-6.0..6.0),
                fs / 2.0 - travel.1 / 2.0 + rng.random_range(-6.0..6.0),
            );
            let spec = SequenceSpec {
                length,
                frame_size,
                trajectory: Trajectory {
                    start,
                    velocity,
                    amplitude: (amp * -angle.sin(), amp * angle.cos()),
                    period: rng.random_range(12.0..30.0),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                },
                object_size: (w, h),
                appearance_seed: rng.random(),
                background_seed: rng.random(),
                distractors: rng.random_range(0..=2),
                degradation: if degraded {
                    Degradation::matched(modality)
                } else {
                    Degradation::None
                },
            };
            if spec.validate().is_ok() {
                return spec;
            }
        }
    }
}

type Rgb = [f64; 3];

#[derive(Clone, Debug)]
struct Patch {
    traj: Trajectory,
    size: (f64, f64),
    outer: Rgb,
    inner: Rgb,
}

impl Patch {
    fn rect(&self, t: f64) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.traj.center(t);
        (cx - self.size.0 / 2.0, cy - self.size.1 / 2.0, self.size.0, self.size.1)
    }
}

/// Static scene content drawn from the spec's seeds.
struct Scene {
    size: usize,
    bg_base: Rgb,
    bg_grad: [(f64, f64); 3],
    bg_wave: [(f64, f64, f64, f64); 3],
    target: Patch,
    distractors: Vec<Patch>,
    clones: Vec<Patch>,
    depth_obj: f64,
    depth_tilt: f64,
    thermal_wave: (f64, f64, f64, f64),
}

fn color_dist(a: &Rgb, b: &Rgb) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn random_color<R: Rng>(rng: &mut R) -> Rgb {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

fn distinct_color<R: Rng>(rng: &mut R, avoid: &[Rgb], min: f64) -> Rgb {
    for _ in 0..200 {
        let c = random_color(rng);
        if avoid.iter().all(|a| color_dist(a, &c) >= min) {
            return c;
        }
    }
    random_color(rng)
}

impl Scene {
    fn new(spec: &SequenceSpec) -> Self {
        let mut bg_rng = ChaCha8Rng::seed_from_u64(spec.background_seed);
        let mut app_rng = ChaCha8Rng::seed_from_u64(spec.appearance_seed);
        let fs = spec.frame_size as f64;

        let bg_base = [
            bg_rng.random_range(0.25..0.75),
            bg_rng.random_range(0.25..0.75),
            bg_rng.random_range(0.25..0.75),
        ];
        let bg_grad = std::array::from_fn(|_| (bg_rng.random_range(-0.15..0.15), bg_rng.random_range(-0.15..0.15)));
        let bg_wave = std::array::from_fn(|_| {
            (
                bg_rng.random_range(0.02..0.06),
                bg_rng.random_range(0.5..2.0),
                bg_rng.random_range(0.5..2.0),
                bg_rng.random_range(0.0..std::f64::consts::TAU),
            )
        });

        let outer = distinct_color(&mut app_rng, &[bg_base], 0.6);
        let inner = distinct_color(&mut app_rng, &[bg_base, outer], 0.5);
        let target = Patch {
            traj: spec.trajectory,
            size: spec.object_size,
            outer,
            inner,
        };

        let mut distractors = Vec::new();
        for _ in 0..spec.distractors {
            let c = distinct_color(&mut app_rng, &[bg_base, outer, inner], 0.6);
            distractors.push(Patch {
                traj: Trajectory::fixed(app_rng.random_range(8.0..fs - 8.0), app_rng.random_range(8.0..fs - 8.0)),
                size: (app_rng.random_range(8.0..16.0), app_rng.random_range(8.0..16.0)),
                outer: c,
                inner: c,
            });
        }

        let mut clones = Vec::new();
        if spec.degradation.is_degraded() {
            for _ in 0..DEGRADED_CLONES {
                let moving = matches!(spec.degradation, Degradation::Occlusion);
                // keep the clone's path inside the frame
                let traj = loop {
                    let mut tr = Trajectory::fixed(
                        app_rng.random_range(10.0..fs - 10.0),
                        app_rng.random_range(10.0..fs - 10.0),
                    );
                    if moving {
                        let a = app_rng.random_range(0.0..std::f64::consts::TAU);
                        let sp = app_rng.random_range(0.5..1.2);
                        let len = spec.length as f64;
                        tr.velocity = (sp * a.cos(), sp * a.sin());
                        tr.start = (tr.start.0 - tr.velocity.0 * len / 2.0, tr.start.1 - tr.velocity.1 * len / 2.0);
                    }
                    let ok = (0..spec.length).all(|t| {
                        let (cx, cy) = tr.center(t as f64);
                        cx > spec.object_size.0 / 2.0
                            && cy > spec.object_size.1 / 2.0
                            && cx < fs - spec.object_size.0 / 2.0
                            && cy < fs - spec.object_size.1 / 2.0
                    });
                    if ok {
                        break tr;
                    }
                };
                clones.push(Patch {
                    traj,
                    size: spec.object_size,
                    outer,
                    inner,
                });
            }
        }

        Self {
            size: spec.frame_size,
            bg_base,
            bg_grad,
            bg_wave,
            target,
            distractors,
            clones,
            depth_obj: app_rng.random_range(0.12..0.3),
            depth_tilt: bg_rng.random_range(-0.05..0.05),
            thermal_wave: (
                bg_rng.random_range(0.5..1.5),
                bg_rng.random_range(0.5..1.5),
                bg_rng.random_range(0.0..std::f64::consts::TAU),
                bg_rng.random_range(0.0..std::f64::consts::TAU),
            ),
        }
    }

    fn background(&self) -> Array3<f64> {
        let n = self.size;
        let fs = n as f64;
        Array3::from_shape_fn((3, n, n), |(c, y, x)| {
            let (u, v) = (x as f64 / fs, y as f64 / fs);
            let (amp, fx, fy, ph) = self.bg_wave[c];
            let g = self.bg_grad[c];
            (self.bg_base[c] + g.0 * (u - 0.5) + g.1 * (v - 0.5)
                + amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin())
            .clamp(0.0, 1.0)
        })
    }

    /// Clean RGB render of frame `t` (no degradation).
    fn render_clean(&self, t: f64) -> Array3<f64> {
        let mut img = self.background();
        for d in &self.distractors {
            draw_patch(&mut img, d, t);
        }
        draw_patch(&mut img, &self.target, t);
        for c in &self.clones {
            draw_patch(&mut img, c, t);
        }
        img
    }

    fn render_depth(&self, t: f64) -> Array2<f64> {
        let n = self.size;
        let fs = n as f64;
        let mut plane = Array2::from_shape_fn((n, n), |(y, x)| {
            0.55 + 0.35 * y as f64 / fs + self.depth_tilt * x as f64 / fs
        });
        let (x0, y0, w, h) = self.target.rect(t);
        fill_rect(&mut plane, x0, y0, w, h, self.depth_obj);
        for ((y, _), v) in plane.indexed_iter_mut() {
            *v = (*v + stripe(y)).clamp(0.0, 1.0);
        }
        plane
    }

    fn render_thermal(&self, t: f64) -> Array2<f64> {
        let n = self.size;
        let fs = n as f64;
        let (cx, cy) = self.target.traj.center(t);
        let (sx, sy) = (self.target.size.0 / 3.0, self.target.size.1 / 3.0);
        let (f1, f2, p1, p2) = self.thermal_wave;
        Array2::from_shape_fn((n, n), |(y, x)| {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let bg = 0.18
                + 0.06 * (std::f64::consts::TAU * f1 * xf / fs + p1).sin()
                + 0.06 * (std::f64::consts::TAU * f2 * yf / fs + p2).sin();
            let blob = 0.7 * (-((xf - cx).powi(2) / (2.0 * sx * sx) + (yf - cy).powi(2) / (2.0 * sy * sy))).exp();
            (bg + blob + stripe(x)).clamp(0.0, 1.0)
        })
    }

    fn render_event(&self, t: f64) -> Array2<f64> {
        let now = grey(&self.render_clean(t));
        let before = grey(&self.render_clean(t - 1.0));
        ndarray::Zip::from(&now).and(&before).map_collect(|&a, &b| {
            let d = a - b;
            if d > EVENT_THRESHOLD {
                1.0
            } else if d < -EVENT_THRESHOLD {
                0.0
            } else {
                0.5
            }
        })
    }
}

fn stripe(i: usize) -> f64 {
    if i % 2 == 0 {
        SENSOR_PATTERN
    } else {
        -SENSOR_PATTERN
    }
}

fn grey(img: &Array3<f64>) -> Array2<f64> {
    let (_, h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| (img[[0, y, x]] + img[[1, y, x]] + img[[2, y, x]]) / 3.0)
}

/// Pixel coverage of [a, b) over the unit cell [i, i + 1).
fn coverage(a: f64, b: f64, i: usize) -> f64 {
    let lo = a.max(i as f64);
    let hi = b.min(i as f64 + 1.0);
    (hi - lo).max(0.0)
}

fn fill_rect(plane: &mut Array2<f64>, x0: f64, y0: f64, w: f64, h: f64, value: f64) {
    let (rows, cols) = plane.dim();
    let ys = (y0.floor().max(0.0) as usize)..((y0 + h).ceil().min(rows as f64) as usize);
    let xs = (x0.floor().max(0.0) as usize)..((x0 + w).ceil().min(cols as f64) as usize);
    for y in ys {
        let cy = coverage(y0, y0 + h, y);
        for x in xs.clone() {
            let a = cy * coverage(x0, x0 + w, x);
            if a > 0.0 {
                plane[[y, x]] = plane[[y, x]] * (1.0 - a) + value * a;
            }
        }
    }
}

fn draw_patch(img: &mut Array3<f64>, p: &Patch, t: f64) {
    let (x0, y0, w, h) = p.rect(t);
    let border = 2.0;
    for c in 0..3 {
        let mut ch = img.index_axis_mut(ndarray::Axis(0), c).to_owned();
        fill_rect(&mut ch, x0, y0, w, h, p.outer[c]);
        fill_rect(&mut ch, x0 + border, y0 + border, w - 2.0 * border, h - 2.0 * border, p.inner[c]);
        img.index_axis_mut(ndarray::Axis(0), c).assign(&ch);
    }
}

fn box_blur(img: &Array3<f64>, radius: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let r = radius as isize;
    let mut tmp = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut n) = (0.0, 0.0);
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if xx >= 0 && xx < w as isize {
                        s += img[[ch, y, xx as usize]];
                        n += 1.0;
                    }
                }
                tmp[[ch, y, x]] = s / n;
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut n) = (0.0, 0.0);
                for dy in -r..=r {
                    let yy = y as isize + dy;
                    if yy >= 0 && yy < h as isize {
                        s += tmp[[ch, yy as usize, x]];
                        n += 1.0;
                    }
                }
                out[[ch, y, x]] = s / n;
            }
        }
    }
    out
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize<T: Scalar>(v: u8) -> T {
    T::of(v as f64 / 255.0)
}

/// One rendered sequence, stored quantised to 8 bits.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub modality: Modality,
    pub degradation: Degradation,
    pub size: usize,
    /// Per frame, [3, H, W] row-major.
    pub rgb: Vec<Vec<u8>>,
    /// Per frame, [H, W] row-major single channel.
    pub x: Vec<Vec<u8>>,
    pub boxes: Vec<BoxPx>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn rgb_frame<T: Scalar>(&self, t: usize, role: Role) -> Frame<T> {
        let n = self.size;
        let px = Array3::from_shape_fn((3, n, n), |(c, y, x)| dequantize(self.rgb[t][(c * n + y) * n + x]));
        Frame::new(px, role).expect("3 channels")
    }

    pub fn x_plane<T: Scalar>(&self, t: usize) -> Array2<T> {
        let n = self.size;
        Array2::from_shape_fn((n, n), |(y, x)| dequantize(self.x[t][y * n + x]))
    }

    pub fn x_frame<T: Scalar>(&self, t: usize, role: Role) -> Frame<T> {
        Frame::from_single_channel(&self.x_plane(t), role)
    }

    /// Top-left corner of a `size` square centred on the target at frame `t`,
    /// clamped into the frame.
    pub fn crop_origin(&self, t: usize, size: usize) -> (usize, usize) {
        let (cx, cy) = self.boxes[t].center();
        let max = (self.size - size) as f64;
        let x0 = (cx - size as f64 / 2.0).round().clamp(0.0, max) as usize;
        let y0 = (cy - size as f64 / 2.0).round().clamp(0.0, max) as usize;
        (x0, y0)
    }

    /// Template crops (RGB, X) around the target at frame `t`.
    pub fn template<T: Scalar>(&self, t: usize, size: usize) -> (Frame<T>, Frame<T>) {
        let (x0, y0) = self.crop_origin(t, size);
        let n = self.size;
        let rgb = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
            dequantize(self.rgb[t][(c * n + y0 + y) * n + x0 + x])
        });
        let x = Array2::from_shape_fn((size, size), |(y, x)| dequantize(self.x[t][(y0 + y) * n + x0 + x]));
        (
            Frame::new(rgb, Role::Template).expect("3 channels"),
            Frame::from_single_channel(&x, Role::Template),
        )
    }

    pub fn samples<T: Scalar>(&self) -> Vec<ModalSample<T>> {
        (0..self.len())
            .map(|t| ModalSample {
                rgb: self.rgb_frame(t, Role::Search),
                x: self.x_frame(t, Role::Search),
                modality: self.modality,
                gt_box: self.boxes[t],
                sequence_id: self.id.clone(),
                frame_index: t,
            })
            .collect()
    }
}

/// One aligned RGB/X frame pair with its annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalSample<T> {
    pub rgb: Frame<T>,
    pub x: Frame<T>,
    pub modality: Modality,
    pub gt_box: BoxPx,
    pub sequence_id: String,
    pub frame_index: usize,
}

/// Renders a whole sequence. `seed` drives the RGB sensor noise; scene
/// content comes from the spec's own seeds.
pub fn render_sequence(id: impl Into<String>, spec: &SequenceSpec, modality: Modality, seed: u64) -> Result<Sequence> {
    spec.validate()?;
    let scene = Scene::new(spec);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).expect("valid");
    let n = spec.frame_size;
    let mut rgb = Vec::with_capacity(spec.length);
    let mut x = Vec::with_capacity(spec.length);
    let mut boxes = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let tf = t as f64;
        let clean = scene.render_clean(tf);
        let img = match spec.degradation {
            Degradation::None | Degradation::Occlusion => clean,
            Degradation::Darkness { level } => clean.mapv(|v| (v * (1.0 - level) + noise.sample(&mut noise_rng)).clamp(0.0, 1.0)),
            Degradation::Blur { radius } => box_blur(&clean, radius),
        };
        rgb.push(img.iter().map(|&v| quantize(v)).collect());
        let plane = match modality {
            Modality::Depth => scene.render_depth(tf),
            Modality::Thermal => scene.render_thermal(tf),
            Modality::Event => scene.render_event(tf),
        };
        x.push(plane.iter().map(|&v| quantize(v)).collect());
        boxes.push(spec.box_at(t));
    }
    debug_assert!(rgb.iter().all(|f: &Vec<u8>| f.len() == 3 * n * n));
    Ok(Sequence {
        id: id.into(),
        modality,
        degradation: spec.degradation,
        size: n,
        rgb,
        x,
        boxes,
    })
}

/// Renders a sequence and returns it as per-frame samples.
pub fn generate_sequence<T: Scalar>(spec: &SequenceSpec, modality: Modality, seed: u64) -> Result<Vec<ModalSample<T>>> {
    Ok(render_sequence(format!("{modality}_{seed:06}"), spec, modality, seed)?.samples())
}

/// Half-open range of sequence seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub len: u64,
}

impl SeedRange {
    pub fn new(start: u64, len: u64) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> u64 {
        self.start + self.len
    }

    pub fn overlaps(&self, other: &SeedRange) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            o => Err(Error::Data(format!("unknown split {o:?}"))),
        }
    }
}

/// Planned sequence: everything needed to render it.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub modality: Modality,
    pub split: Split,
    pub seed: u64,
    pub spec: SequenceSpec,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn render(&self) -> Result<Vec<Sequence>> {
        self.entries
            .iter()
            .map(|e| render_sequence(e.id.clone(), &e.spec, e.modality, e.seed))
            .collect()
    }
}

/// Data-set shape shared by the split planner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub length: usize,
    pub frame_size: usize,
    /// Fraction of sequences (per modality and split) with a degraded RGB view.
    pub degraded_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            length: 32,
            frame_size: 64,
            degraded_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Manifest,
    pub test: Manifest,
}

fn plan(modality: Modality, seeds: SeedRange, split: Split, n: usize, cfg: &DataConfig) -> Vec<ManifestEntry> {
    let n_degraded = (n as f64 * cfg.degraded_fraction).round() as usize;
    (0..n)
        .map(|i| {
            // one seed per (modality, index) inside the range
            let seed = seeds.start + (i * 3 + modality.index()) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xA5A5);
            let spec = SequenceSpec::sample(&mut rng, modality, i < n_degraded, cfg.length, cfg.frame_size);
            ManifestEntry {
                id: format!("{modality}_{seed:06}"),
                modality,
                split,
                seed,
                spec,
            }
        })
        .collect()
}

/// Plans balanced train/test manifests over disjoint seed ranges.
pub fn make_splits(
    n_train_per_modality: usize,
    n_test_per_modality: usize,
    train_seeds: SeedRange,
    test_seeds: SeedRange,
    cfg: &DataConfig,
) -> Result<Splits> {
    if train_seeds.overlaps(&test_seeds) {
        return Err(config_err!(
            "train seeds {train_seeds:?} overlap test seeds {test_seeds:?}"
        ));
    }
    for (range, n) in [(train_seeds, n_train_per_modality), (test_seeds, n_test_per_modality)] {
        if (n as u64) * 3 > range.len {
            return Err(config_err!("seed range {range:?} too small for {n} sequences per modality"));
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for m in Modality::ALL {
        train.extend(plan(m, train_seeds, Split::Train, n_train_per_modality, cfg));
        test.extend(plan(m, test_seeds, Split::Test, n_test_per_modality, cfg));
    }
    Ok(Splits {
        train: Manifest { entries: train },
        test: Manifest { entries: test },
    })
}

/// Clean RGB-only sequences used to pretrain the frozen backbone.
pub fn clean_rgb_manifest(n: usize, seeds: SeedRange, cfg: &DataConfig) -> Result<Manifest> {
    if n as u64 > seeds.len {
        return Err(config_err!("seed range {seeds:?} too small for {n} sequences"));
    }
    let entries = (0..n)
        .map(|i| {
            let seed = seeds.start + i as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5A5A);
            let spec = SequenceSpec::sample(&mut rng, Modality::Depth, false, cfg.length, cfg.frame_size);
            ManifestEntry {
                id: format!("rgb_{seed:06}"),
                modality: Modality::Depth,
                split: Split::Train,
                seed,
                spec,
            }
        })
        .collect();
    Ok(Manifest { entries })
}

/// Mean absolute contrast between the object box and the rest of the frame,
/// averaged over channels.
pub fn box_contrast(frame: &Array3<f64>, b: &BoxPx) -> f64 {
    let (c, h, w) = frame.dim();
    let mut total = 0.0;
    for ch in 0..c {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let inside = (x as f64) >= b.x.ceil()
                    && (x as f64 + 1.0) <= (b.x + b.w).floor()
                    && (y as f64) >= b.y.ceil()
                    && (y as f64 + 1.0) <= (b.y + b.h).floor();
                if inside {
                    si += frame[[ch, y, x]];
                    ni += 1.0;
                } else {
                    so += frame[[ch, y, x]];
                    no += 1.0;
                }
            }
        }
        total += (si / ni - so / no).abs();
    }
    total / c as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(degradation: Degradation) -> SequenceSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = SequenceSpec::sample(&mut rng, Modality::Thermal, false, 8, 64);
        s.degradation = degradation;
        s
    }

    #[test]
    fn leaving_trajectory_is_rejected() {
        let mut s = spec(Degradation::None);
        s.trajectory = Trajectory {
            start: (32.0, 32.0),
            velocity: (10.0, 0.0),
            ..s.trajectory
        };
        assert!(matches!(s.validate(), Err(Error::Data(_))));
    }

    #[test]
    fn overlapping_seed_ranges_are_rejected() {
        let cfg = DataConfig::default();
        assert!(make_splits(2, 2, SeedRange::new(0, 100), SeedRange::new(50, 100), &cfg).is_err());
    }

    #[test]
    fn box_blur_preserves_constant() {
        let img = Array3::from_elem((3, 8, 8), 0.25);
        let b = box_blur(&img, 2);
        assert!(b.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }
}
