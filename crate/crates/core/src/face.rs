//! Deterministic stand-in for the android face and its camera.
//!
//! An [`ActuatorVector`] drives a procedurally drawn grayscale face. Each of
//! the 35 actuator channels moves exactly one visual element (see
//! [`ACTUATOR_NAMES`]), so every channel is observable in the image. Vectors
//! longer than 35 fold onto the channels by index modulo 35 (the channel
//! value is the mean of its actuators); shorter vectors leave the missing
//! channels at the neutral value 0.5.
//!
//! [`FaceSim::latent_intensity`] is the hidden ground truth used for testing
//! and synthetic annotation. It is a radial bump around a seeded per-emotion
//! optimum under a separable weighted distance, rescaled so the optimum maps
//! to 1 and the farthest corner of the cube (the antipode) maps to 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::emotion::Emotion;
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 224;
pub const DEFAULT_DOF: usize = 35;
pub const CHANNELS: usize = 35;

/// Channel names, indexed by actuator channel. `_l`/`_r` are image-left and image-right.
pub const ACTUATOR_NAMES: [&str; CHANNELS] = [
    "brow_inner_raise_l",
    "brow_inner_raise_r",
    "brow_outer_raise_l",
    "brow_outer_raise_r",
    "brow_lower_l",
    "brow_lower_r",
    "upper_lid_raise_l",
    "upper_lid_raise_r",
    "lid_tighten_l",
    "lid_tighten_r",
    "gaze_horizontal",
    "gaze_vertical",
    "cheek_raise_l",
    "cheek_raise_r",
    "nose_wrinkle",
    "nostril_flare_l",
    "nostril_flare_r",
    "upper_lip_raise_l",
    "upper_lip_raise_r",
    "lip_corner_pull_l",
    "lip_corner_pull_r",
    "lip_corner_depress_l",
    "lip_corner_depress_r",
    "lip_stretch_l",
    "lip_stretch_r",
    "lower_lip_depress",
    "chin_raise",
    "lip_pucker",
    "lip_press",
    "jaw_drop",
    "dimple_l",
    "dimple_r",
    "forehead_wrinkle",
    "glabella_frown",
    "mouth_shift",
];

mod ch {
    pub const BROW_INNER: [usize; 2] = [0, 1];
    pub const BROW_OUTER: [usize; 2] = [2, 3];
    pub const BROW_LOWER: [usize; 2] = [4, 5];
    pub const UPPER_LID: [usize; 2] = [6, 7];
    pub const LID_TIGHTEN: [usize; 2] = [8, 9];
    pub const GAZE_H: usize = 10;
    pub const GAZE_V: usize = 11;
    pub const CHEEK: [usize; 2] = [12, 13];
    pub const NOSE_WRINKLE: usize = 14;
    pub const NOSTRIL: [usize; 2] = [15, 16];
    pub const UPPER_LIP: [usize; 2] = [17, 18];
    pub const CORNER_PULL: [usize; 2] = [19, 20];
    pub const CORNER_DEPRESS: [usize; 2] = [21, 22];
    pub const STRETCH: [usize; 2] = [23, 24];
    pub const LOWER_LIP: usize = 25;
    pub const CHIN: usize = 26;
    pub const PUCKER: usize = 27;
    pub const PRESS: usize = 28;
    pub const JAW: usize = 29;
    pub const DIMPLE: [usize; 2] = [30, 31];
    pub const FOREHEAD: usize = 32;
    pub const GLABELLA: usize = 33;
    pub const MOUTH_SHIFT: usize = 34;
}

/// Pixel box `(x0, y0, x1, y1)`, half-open, that contains every pixel a
/// mouth-group actuator can change.
pub const MOUTH_REGION: (usize, usize, usize, usize) = (40, 136, 184, 224);

/// Channels whose drawing is confined to [`MOUTH_REGION`].
pub const MOUTH_CHANNELS: [usize; 16] = [17, 18, 19, 20, 21, 22, 23, 24, 25, 26, 27, 28, 29, 30, 31, 34];

/// Normalized actuator command, every element in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ActuatorVector(Vec<f64>);

impl ActuatorVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidActuator("empty vector".into()));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidActuator(format!("element {i} = {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn neutral(dof: usize) -> Self {
        Self(vec![0.5; dof])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ActuatorVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ActuatorVector> for Vec<f64> {
    fn from(v: ActuatorVector) -> Self {
        v.0
    }
}

/// Grayscale raster with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl FaceImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage("empty image".into()));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidImage("pixel outside [0, 1]".into()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// 8-bit quantization used for PNG/PGM output.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|p| (p * 255.0).round() as u8).collect()
    }

    pub fn from_u8(width: usize, height: usize, data: &[u8]) -> Result<Self> {
        Self::new(width, height, data.iter().map(|&b| f64::from(b) / 255.0).collect())
    }
}

/// Per-emotion ground-truth profile.
#[derive(Debug, Clone)]
struct LatentProfile {
    optimum: Vec<f64>,
    weights: Vec<f64>,
    antipode: Vec<f64>,
    bandwidth_sq: f64,
    floor: f64,
}

/// Key channels and the end of their range each expression pushes toward.
fn key_channels(emotion: Emotion) -> &'static [(usize, bool)] {
    use ch::*;
    match emotion {
        Emotion::Anger => &[
            (BROW_LOWER[0], true),
            (BROW_LOWER[1], true),
            (BROW_INNER[0], false),
            (BROW_INNER[1], false),
            (GLABELLA, true),
            (LID_TIGHTEN[0], true),
            (LID_TIGHTEN[1], true),
            (PRESS, true),
        ],
        Emotion::Disgust => &[
            (NOSE_WRINKLE, true),
            (UPPER_LIP[0], true),
            (UPPER_LIP[1], true),
            (CORNER_DEPRESS[0], true),
            (CORNER_DEPRESS[1], true),
            (CHIN, true),
            (CHEEK[0], true),
            (CHEEK[1], true),
        ],
        Emotion::Fear => &[
            (BROW_INNER[0], true),
            (BROW_INNER[1], true),
            (BROW_OUTER[0], true),
            (BROW_OUTER[1], true),
            (UPPER_LID[0], true),
            (UPPER_LID[1], true),
            (STRETCH[0], true),
            (STRETCH[1], true),
        ],
        Emotion::Happiness => &[
            (CORNER_PULL[0], true),
            (CORNER_PULL[1], true),
            (CHEEK[0], true),
            (CHEEK[1], true),
            (LID_TIGHTEN[0], true),
            (LID_TIGHTEN[1], true),
            (CORNER_DEPRESS[0], false),
            (CORNER_DEPRESS[1], false),
        ],
        Emotion::Sadness => &[
            (BROW_INNER[0], true),
            (BROW_INNER[1], true),
            (CORNER_DEPRESS[0], true),
            (CORNER_DEPRESS[1], true),
            (CORNER_PULL[0], false),
            (CORNER_PULL[1], false),
            (UPPER_LID[0], false),
            (UPPER_LID[1], false),
        ],
        Emotion::Surprise => &[
            (BROW_INNER[0], true),
            (BROW_INNER[1], true),
            (BROW_OUTER[0], true),
            (BROW_OUTER[1], true),
            (UPPER_LID[0], true),
            (UPPER_LID[1], true),
            (JAW, true),
            (FOREHEAD, true),
        ],
        Emotion::Neutral => &[],
    }
}

const KEY_WEIGHT: f64 = 1.0;
const MINOR_WEIGHT: f64 = 0.06;

impl LatentProfile {
    fn build(emotion: Emotion, dof: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(emotion.index() as u64 + 1));
        let keys = key_channels(emotion);
        let mut optimum = Vec::with_capacity(dof);
        let mut weights = Vec::with_capacity(dof);
        for i in 0..dof {
            let channel = i % CHANNELS;
            match keys.iter().find(|(c, _)| *c == channel) {
                Some(&(_, high)) => {
                    let jitter: f64 = rng.random_range(0.03..0.15);
                    optimum.push(if high { 1.0 - jitter } else { jitter });
                    weights.push(KEY_WEIGHT);
                }
                None if emotion == Emotion::Neutral => {
                    optimum.push(0.5);
                    weights.push(KEY_WEIGHT);
                }
                None => {
                    optimum.push(rng.random_range(0.35..0.65));
                    weights.push(MINOR_WEIGHT);
                }
            }
        }
        // Farthest point of the cube under a separable distance: each
        // coordinate at the bound opposite its optimum.
        let antipode: Vec<f64> = optimum.iter().map(|&o| if o < 0.5 { 1.0 } else { 0.0 }).collect();
        let max_d2 = weighted_sq_dist(&antipode, &optimum, &weights);
        let bandwidth_sq = 0.2 * max_d2;
        let floor = (-max_d2 / (2.0 * bandwidth_sq)).exp();
        Self { optimum, weights, antipode, bandwidth_sq, floor }
    }

    fn intensity(&self, v: &[f64]) -> f64 {
        let d2 = weighted_sq_dist(v, &self.optimum, &self.weights);
        let bump = (-d2 / (2.0 * self.bandwidth_sq)).exp();
        ((bump - self.floor) / (1.0 - self.floor)).clamp(0.0, 1.0)
    }
}

fn weighted_sq_dist(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), w)| w * (x - y) * (x - y)).sum()
}

/// The simulated face: renderer plus hidden per-emotion ground truth.
#[derive(Debug, Clone)]
pub struct FaceSim {
    dof: usize,
    seed: u64,
    profiles: Vec<LatentProfile>,
}

impl Default for FaceSim {
    fn default() -> Self {
        Self::new(DEFAULT_DOF, 0)
    }
}

impl FaceSim {
    pub fn new(dof: usize, seed: u64) -> Self {
        assert!(dof > 0, "face needs at least one actuator");
        let profiles = Emotion::ALL.iter().map(|&e| LatentProfile::build(e, dof, seed)).collect();
        Self { dof, seed, profiles }
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check(&self, v: &ActuatorVector) -> Result<()> {
        if v.len() != self.dof {
            return Err(Error::InvalidActuator(format!(
                "expected {} actuators, got {}",
                self.dof,
                v.len()
            )));
        }
        Ok(())
    }

    /// Folds the actuator vector onto the 35 drawing channels.
    fn channels(&self, v: &[f64]) -> [f64; CHANNELS] {
        let mut sum = [0.0; CHANNELS];
        let mut count = [0usize; CHANNELS];
        for (i, &x) in v.iter().enumerate() {
            sum[i % CHANNELS] += x;
            count[i % CHANNELS] += 1;
        }
        let mut out = [0.5; CHANNELS];
        for c in 0..CHANNELS {
            if count[c] > 0 {
                out[c] = sum[c] / count[c] as f64;
            }
        }
        out
    }

    pub fn render(&self, v: &ActuatorVector) -> Result<FaceImage> {
        self.check(v)?;
        let a = self.channels(v.values());
        let mut canvas = Canvas::new(IMAGE_SIZE, 0.12);
        draw_face(&mut canvas, &a);
        FaceImage::new(IMAGE_SIZE, IMAGE_SIZE, canvas.px)
    }

    pub fn latent_intensity(&self, v: &ActuatorVector, emotion: Emotion) -> Result<f64> {
        self.check(v)?;
        Ok(self.profiles[emotion.index()].intensity(v.values()))
    }

    /// Actuator vector with latent intensity 1 for `emotion`.
    pub fn optimum(&self, emotion: Emotion) -> ActuatorVector {
        ActuatorVector(self.profiles[emotion.index()].optimum.clone())
    }

    /// Cube corner farthest from the optimum; latent intensity 0.
    pub fn antipode(&self, emotion: Emotion) -> ActuatorVector {
        ActuatorVector(self.profiles[emotion.index()].antipode.clone())
    }
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

/// Anti-aliased coverage from a signed distance in pixels (negative inside).
fn coverage(sd: f64) -> f64 {
    (0.5 - sd).clamp(0.0, 1.0)
}

fn seg_dist(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.0 + t * dx - px, a.1 + t * dy - py);
    (cx * cx + cy * cy).sqrt()
}

fn quad_bezier(p0: (f64, f64), c: (f64, f64), p1: (f64, f64), n: usize) -> Vec<(f64, f64)> {
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            let u = 1.0 - t;
            (u * u * p0.0 + 2.0 * u * t * c.0 + t * t * p1.0, u * u * p0.1 + 2.0 * u * t * c.1 + t * t * p1.1)
        })
        .collect()
}

fn cubic(p: [f64; 4], t: f64) -> f64 {
    let u = 1.0 - t;
    u * u * u * p[0] + 3.0 * u * u * t * p[1] + 3.0 * u * t * t * p[2] + t * t * t * p[3]
}

impl Canvas {
    fn new(size: usize, background: f64) -> Self {
        Self { size, px: vec![background; size * size] }
    }

    /// Blends `value` into every pixel of the box with weight `cov(x, y)`,
    /// evaluated at pixel centres.
    fn paint(&mut self, bbox: (f64, f64, f64, f64), value: f64, cov: impl Fn(f64, f64) -> f64) {
        let clampi = |v: f64| (v.floor().max(0.0) as usize).min(self.size);
        let (x0, y0) = (clampi(bbox.0), clampi(bbox.1));
        let (x1, y1) = (clampi(bbox.2 + 1.0), clampi(bbox.3 + 1.0));
        for y in y0..y1 {
            let py = y as f64 + 0.5;
            let row = &mut self.px[y * self.size..(y + 1) * self.size];
            for (x, p) in row.iter_mut().enumerate().take(x1).skip(x0) {
                let a = cov(x as f64 + 0.5, py);
                if a > 0.0 {
                    *p += (value - *p) * a.min(1.0);
                }
            }
        }
    }

    fn stroke(&mut self, pts: &[(f64, f64)], half_width: f64, value: f64, alpha: f64) {
        if alpha <= 0.0 {
            return;
        }
        let pad = half_width + 1.0;
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(x, y) in pts {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        self.paint((x0 - pad, y0 - pad, x1 + pad, y1 + pad), value, |x, y| {
            let d = pts.windows(2).map(|w| seg_dist(x, y, w[0], w[1])).fold(f64::MAX, f64::min);
            alpha * coverage(d - half_width)
        });
    }

    fn ellipse(&mut self, c: (f64, f64), rx: f64, ry: f64, value: f64, alpha: f64) {
        let r = rx.min(ry);
        self.paint((c.0 - rx - 1.0, c.1 - ry - 1.0, c.0 + rx + 1.0, c.1 + ry + 1.0), value, |x, y| {
            let q = (((x - c.0) / rx).powi(2) + ((y - c.1) / ry).powi(2)).sqrt();
            alpha * coverage((q - 1.0) * r)
        });
    }

    fn glow(&mut self, c: (f64, f64), sigma: f64, value: f64, alpha: f64) {
        let reach = 3.0 * sigma;
        self.paint((c.0 - reach, c.1 - reach, c.0 + reach, c.1 + reach), value, |x, y| {
            let r2 = (x - c.0).powi(2) + (y - c.1).powi(2);
            alpha * (-r2 / (2.0 * sigma * sigma)).exp()
        });
    }
}

const INK: f64 = 0.18;
const CREASE: f64 = 0.45;

fn draw_face(cv: &mut Canvas, a: &[f64; CHANNELS]) {
    let u = |c: usize| a[c] - 0.5;
    let sides = [(0usize, -1.0f64), (1usize, 1.0f64)];

    // head and fixed nose bridge
    cv.ellipse((112.0, 116.0), 86.0, 102.0, 0.78, 1.0);
    cv.stroke(&[(112.0, 92.0), (109.0, 118.0), (112.0, 131.0)], 1.0, 0.55, 1.0);

    cv.stroke_lines_forehead(a[ch::FOREHEAD]);
    let frown = a[ch::GLABELLA];
    for x in [106.0, 118.0] {
        cv.stroke(&[(x, 64.0), (x, 86.0)], 1.8, CREASE, 0.9 * frown);
    }

    for (i, s) in sides {
        let lower = u(ch::BROW_LOWER[i]);
        let inner = (112.0 + s * (16.0 - 10.0 * lower), 74.0 - 18.0 * u(ch::BROW_INNER[i]) + 10.0 * lower);
        let outer = (112.0 + s * 58.0, 76.0 - 18.0 * u(ch::BROW_OUTER[i]) + 6.0 * lower);
        let ctrl = ((inner.0 + outer.0) / 2.0, inner.1.min(outer.1) - 5.0);
        cv.stroke(&quad_bezier(inner, ctrl, outer, 10), 3.0, INK, 1.0);
    }

    let gaze = (5.0 * u(ch::GAZE_H), 3.0 * u(ch::GAZE_V));
    for (i, s) in sides {
        let c = (112.0 + s * 30.0, 100.0);
        let top = 9.0 + 12.0 * u(ch::UPPER_LID[i]);
        let bottom = 6.0 - 8.0 * u(ch::LID_TIGHTEN[i]);
        draw_eye(cv, c, 17.0, top, bottom, (c.0 + gaze.0, c.1 + gaze.1));
    }

    for (i, s) in sides {
        let raise = a[ch::CHEEK[i]];
        cv.glow((112.0 + s * 48.0, 134.0 - 16.0 * u(ch::CHEEK[i])), 14.0, 0.6, 0.9 * raise);
        // nasolabial fold deepens as the cheek lifts
        let fold = [(112.0 + s * 16.0, 130.0), (112.0 + s * (30.0 + 6.0 * raise), 146.0), (112.0 + s * 36.0, 164.0)];
        cv.stroke(&fold, 1.6, CREASE, raise);
    }

    let wrinkle = a[ch::NOSE_WRINKLE];
    for (i, s) in sides {
        for k in 0..3 {
            let y = 100.0 + 7.0 * k as f64;
            cv.stroke(&[(112.0 + s * 4.0, y), (112.0 + s * 16.0, y + 6.0)], 1.6, CREASE, wrinkle);
        }
        let flare = u(ch::NOSTRIL[i]);
        cv.ellipse((112.0 + s * (8.0 + 3.0 * flare), 138.0), 4.0 + 3.0 * flare, 2.5, 0.25, 1.0);
    }

    draw_mouth(cv, a);
}

impl Canvas {
    fn stroke_lines_forehead(&mut self, level: f64) {
        for y in [36.0, 46.0, 56.0] {
            self.stroke(&quad_bezier((72.0, y), (112.0, y - 4.0), (152.0, y), 8), 1.4, CREASE, 0.9 * level);
        }
    }
}

fn eye_sdf(p: (f64, f64), c: (f64, f64), rx: f64, top: f64, bottom: f64) -> f64 {
    let dy = p.1 - c.1;
    let ry = if dy < 0.0 { top } else { bottom };
    let q = (((p.0 - c.0) / rx).powi(2) + (dy / ry).powi(2)).sqrt();
    (q - 1.0) * rx.min(ry)
}

fn draw_eye(cv: &mut Canvas, c: (f64, f64), rx: f64, top: f64, bottom: f64, pupil: (f64, f64)) {
    let bbox = (c.0 - rx - 3.0, c.1 - top - 3.0, c.0 + rx + 3.0, c.1 + bottom + 3.0);
    cv.paint(bbox, 0.97, |x, y| coverage(eye_sdf((x, y), c, rx, top, bottom)));
    cv.paint(bbox, 0.08, |x, y| {
        let inside = coverage(eye_sdf((x, y), c, rx, top, bottom));
        let r = ((x - pupil.0).powi(2) + (y - pupil.1).powi(2)).sqrt();
        inside * coverage(r - 5.5)
    });
    cv.paint(bbox, INK, |x, y| coverage(eye_sdf((x, y), c, rx, top, bottom).abs() - 1.2));
}

fn draw_mouth(cv: &mut Canvas, a: &[f64; CHANNELS]) {
    let u = |c: usize| a[c] - 0.5;
    let shift = 10.0 * u(ch::MOUTH_SHIFT);
    let corner = |i: usize, s: f64| {
        let half = 26.0 + 10.0 * u(ch::CORNER_PULL[i]) + 12.0 * u(ch::STRETCH[i]) - 12.0 * u(ch::PUCKER);
        let y = 170.0 - 10.0 * u(ch::CORNER_PULL[i]) + 10.0 * u(ch::CORNER_DEPRESS[i]) + 3.0 * u(ch::STRETCH[i]);
        (112.0 + shift + s * half, y)
    };
    let left = corner(0, -1.0);
    let right = corner(1, 1.0);
    let mid = (left.1 + right.1) / 2.0;
    let upper = [left.1, mid - 3.0 - 14.0 * u(ch::UPPER_LIP[0]), mid - 3.0 - 14.0 * u(ch::UPPER_LIP[1]), right.1];
    let opening = 4.0 + 16.0 * a[ch::JAW] + 6.0 * a[ch::LOWER_LIP] - 4.0 * u(ch::PRESS) - 5.0 * u(ch::CHIN);
    let lower = [left.1, mid + opening, mid + opening, right.1];
    let lip_half = 2.0 + 1.5 * u(ch::PUCKER) - 1.2 * u(ch::PRESS);
    let width = right.0 - left.0;

    let curves = move |x: f64| {
        let t = ((x - left.0) / width).clamp(0.0, 1.0);
        (cubic(upper, t), cubic(lower, t))
    };
    let y_min = upper.iter().chain(&lower).fold(f64::MAX, |m, &v| m.min(v));
    let y_max = upper.iter().chain(&lower).fold(f64::MIN, |m, &v| m.max(v));
    let bbox = (left.0 - 4.0, y_min - 4.0, right.0 + 4.0, y_max + 4.0);

    cv.paint(bbox, 0.1, |x, y| {
        let (yu, yl) = curves(x);
        let inside = (y - yu).min(yl - y).min(x - left.0).min(right.0 - x);
        coverage(-inside)
    });
    let lip_dist = move |x: f64, y: f64, pick_lower: bool| {
        if x < left.0 {
            ((x - left.0).powi(2) + (y - left.1).powi(2)).sqrt()
        } else if x > right.0 {
            ((x - right.0).powi(2) + (y - right.1).powi(2)).sqrt()
        } else {
            let (yu, yl) = curves(x);
            (y - if pick_lower { yl } else { yu }).abs()
        }
    };
    cv.paint(bbox, 0.3, |x, y| coverage(lip_dist(x, y, false).min(lip_dist(x, y, true)) - lip_half));

    for (i, (c, s)) in [(left, -1.0), (right, 1.0)].into_iter().enumerate() {
        let d = a[ch::DIMPLE[i]];
        cv.ellipse((c.0 + s * 7.0, c.1 - 2.0), 4.0, 4.0, 0.4, 0.9 * d);
    }
    let chin = a[ch::CHIN];
    let cy = 198.0 - 4.0 * u(ch::CHIN);
    cv.stroke(&quad_bezier((98.0, cy), (112.0, cy + 5.0), (126.0, cy), 6), 1.6, CREASE, 0.9 * chin);
}
