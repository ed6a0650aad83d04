//! The fifteen augmentation operations and their magnitude mapping.
//!
//! Every op takes a discrete magnitude level in `0..=9`. The level is mapped
//! linearly onto an op-specific continuous parameter by [`magnitude_to_param`].
//! Geometric ops use nearest-neighbour sampling at pixel centres and fill
//! vacated pixels with [`FILL_VALUE`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, FILL_VALUE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    AutoContrast,
    Invert,
    Equalize,
    Solarize,
    Posterize,
    Contrast,
    Color,
    Brightness,
    Sharpness,
    Cutout,
}

impl OpKind {
    pub const COUNT: usize = 15;

    pub const ALL: [OpKind; Self::COUNT] = [
        OpKind::ShearX,
        OpKind::ShearY,
        OpKind::TranslateX,
        OpKind::TranslateY,
        OpKind::Rotate,
        OpKind::AutoContrast,
        OpKind::Invert,
        OpKind::Equalize,
        OpKind::Solarize,
        OpKind::Posterize,
        OpKind::Contrast,
        OpKind::Color,
        OpKind::Brightness,
        OpKind::Sharpness,
        OpKind::Cutout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::ShearX => "shearx",
            OpKind::ShearY => "sheary",
            OpKind::TranslateX => "translatex",
            OpKind::TranslateY => "translatey",
            OpKind::Rotate => "rotate",
            OpKind::AutoContrast => "autocontrast",
            OpKind::Invert => "invert",
            OpKind::Equalize => "equalize",
            OpKind::Solarize => "solarize",
            OpKind::Posterize => "posterize",
            OpKind::Contrast => "contrast",
            OpKind::Color => "color",
            OpKind::Brightness => "brightness",
            OpKind::Sharpness => "sharpness",
            OpKind::Cutout => "cutout",
        }
    }

    /// Position in [`OpKind::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_geometric(self) -> bool {
        matches!(
            self,
            OpKind::ShearX
                | OpKind::ShearY
                | OpKind::TranslateX
                | OpKind::TranslateY
                | OpKind::Rotate
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown augmentation op `{0}`")]
pub struct UnknownOp(pub String);

impl FromStr for OpKind {
    type Err = UnknownOp;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|op| op.name() == s)
            .ok_or_else(|| UnknownOp(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("{kind} level {value} out of range 0..={max}")]
pub struct LevelError {
    pub kind: &'static str,
    pub value: i64,
    pub max: u8,
}

/// Magnitude level in `0..=9`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(try_from = "i64", into = "u8")]
pub struct MagLevel(u8);

impl MagLevel {
    pub const MAX: u8 = 9;
    pub const LEVELS: usize = 10;

    pub fn new(level: u8) -> Result<Self, LevelError> {
        Self::try_from(level as i64)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Level as a fraction of the top level, in `[0, 1]`.
    pub fn fraction(self) -> f64 {
        self.0 as f64 / Self::MAX as f64
    }

    pub fn all() -> impl Iterator<Item = MagLevel> {
        (0..=Self::MAX).map(MagLevel)
    }
}

impl TryFrom<i64> for MagLevel {
    type Error = LevelError;

    fn try_from(v: i64) -> Result<Self, Self::Error> {
        if (0..=Self::MAX as i64).contains(&v) {
            Ok(MagLevel(v as u8))
        } else {
            Err(LevelError {
                kind: "magnitude",
                value: v,
                max: Self::MAX,
            })
        }
    }
}

impl From<MagLevel> for u8 {
    fn from(m: MagLevel) -> u8 {
        m.0
    }
}

/// Continuous parameter an op receives for a given magnitude level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpArg {
    /// Horizontal/vertical shear factor.
    Shear(f64),
    /// Translation as a fraction of the image extent along the axis.
    TranslateFraction(f64),
    Degrees(f64),
    /// Pixels at or above the threshold are inverted.
    Threshold(f64),
    /// Number of most-significant bits kept.
    Bits(u32),
    /// Enhancement blend factor; 1.0 is the identity.
    Factor(f64),
    /// Cutout square edge length in pixels.
    Edge(usize),
    Ignored,
}

pub fn magnitude_to_param(op: OpKind, mag: MagLevel) -> OpArg {
    let m = mag.get() as f64;
    let frac = mag.fraction();
    match op {
        OpKind::ShearX | OpKind::ShearY => OpArg::Shear(0.3 * frac),
        OpKind::TranslateX | OpKind::TranslateY => {
            OpArg::TranslateFraction(10.0 * m / (9.0 * 32.0))
        }
        OpKind::Rotate => OpArg::Degrees(30.0 * frac),
        OpKind::Solarize => OpArg::Threshold(256.0 * (1.0 - frac)),
        OpKind::Posterize => OpArg::Bits(8 - (4.0 * frac).round() as u32),
        OpKind::Contrast | OpKind::Color | OpKind::Brightness | OpKind::Sharpness => {
            OpArg::Factor(0.1 + 1.8 * frac)
        }
        OpKind::Cutout => OpArg::Edge(2 * mag.get() as usize),
        OpKind::AutoContrast | OpKind::Invert | OpKind::Equalize => OpArg::Ignored,
    }
}

/// Pixel displacement used by TranslateX/Y for an image extent of `extent`.
pub fn translate_pixels(extent: usize, mag: MagLevel) -> i64 {
    (extent as f64 * 10.0 * mag.get() as f64 / (9.0 * 32.0)).round() as i64
}

/// Applies `op` at level `mag`. The input is left untouched.
///
/// Geometric ops draw one fair coin from `rng` to negate their displacement;
/// Cutout draws a patch centre. All other ops consume no randomness.
pub fn apply_op<R: Rng + ?Sized>(img: &Image, op: OpKind, mag: MagLevel, rng: &mut R) -> Image {
    let sign = if op.is_geometric() {
        if rng.gen_bool(0.5) {
            -1.0
        } else {
            1.0
        }
    } else {
        1.0
    };
    match (op, magnitude_to_param(op, mag)) {
        (OpKind::ShearX, OpArg::Shear(s)) => shear(img, sign * s, true),
        (OpKind::ShearY, OpArg::Shear(s)) => shear(img, sign * s, false),
        (OpKind::TranslateX, _) => {
            translate(img, sign as i64 * translate_pixels(img.width(), mag), 0)
        }
        (OpKind::TranslateY, _) => {
            translate(img, 0, sign as i64 * translate_pixels(img.height(), mag))
        }
        (OpKind::Rotate, OpArg::Degrees(d)) => rotate(img, sign * d),
        (OpKind::AutoContrast, _) => autocontrast(img),
        (OpKind::Invert, _) => map_values(img, |v| 255 - v),
        (OpKind::Equalize, _) => equalize(img),
        (OpKind::Solarize, OpArg::Threshold(t)) => {
            map_values(img, |v| if v as f64 >= t { 255 - v } else { v })
        }
        (OpKind::Posterize, OpArg::Bits(bits)) => {
            let mask = (0xFFu16 << (8 - bits)) as u8;
            map_values(img, |v| v & mask)
        }
        (OpKind::Contrast, OpArg::Factor(f)) => contrast(img, f),
        (OpKind::Color, OpArg::Factor(f)) => color(img, f),
        (OpKind::Brightness, OpArg::Factor(f)) => map_values(img, |v| blend_value(0.0, v, f)),
        (OpKind::Sharpness, OpArg::Factor(f)) => sharpness(img, f),
        (OpKind::Cutout, OpArg::Edge(e)) => cutout_patch(img, e, rng),
        (op, arg) => unreachable!("op {op} received mismatched argument {arg:?}"),
    }
}

/// Sets a `size_px` square centred on a uniformly drawn pixel to the fill
/// value. The square is clipped at the borders.
///
/// The centre is always drawn, even for `size_px == 0`, so the amount of
/// randomness consumed does not depend on the magnitude.
pub fn cutout_patch<R: Rng + ?Sized>(img: &Image, size_px: usize, rng: &mut R) -> Image {
    let cx = rng.gen_range(0..img.width());
    let cy = rng.gen_range(0..img.height());
    cutout_at(img, size_px, cx, cy)
}

/// Cutout with an explicit centre. The patch spans `[c - size/2, c - size/2 + size)`.
pub fn cutout_at(img: &Image, size_px: usize, cx: usize, cy: usize) -> Image {
    let mut out = img.clone();
    if size_px == 0 {
        return out;
    }
    let half = (size_px / 2) as i64;
    let x0 = (cx as i64 - half).max(0) as usize;
    let y0 = (cy as i64 - half).max(0) as usize;
    let x1 = ((cx as i64 - half + size_px as i64).max(0) as usize).min(img.width());
    let y1 = ((cy as i64 - half + size_px as i64).max(0) as usize).min(img.height());
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..img.channels() {
                out.set(x, y, c, FILL_VALUE);
            }
        }
    }
    out
}

fn map_values(img: &Image, f: impl Fn(u8) -> u8) -> Image {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = f(*v);
    }
    out
}

#[inline]
fn clamp_round(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// `degenerate + factor * (v - degenerate)`, the enhancement blend.
#[inline]
fn blend_value(degenerate: f64, v: u8, factor: f64) -> u8 {
    clamp_round(degenerate + factor * (v as f64 - degenerate))
}

fn shear(img: &Image, factor: f64, horizontal: bool) -> Image {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (sx, sy) = if horizontal {
                ((px + factor * py).floor() as i64, y as i64)
            } else {
                (x as i64, (py + factor * px).floor() as i64)
            };
            out.copy_or_fill(img, x, y, sx, sy);
        }
    }
    out
}

fn translate(img: &Image, dx: i64, dy: i64) -> Image {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.copy_or_fill(img, x, y, x as i64 - dx, y as i64 - dy);
        }
    }
    out
}

fn rotate(img: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = img.width() as f64 / 2.0;
    let cy = img.height() as f64 / 2.0;
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            // inverse mapping: rotate the output coordinate back by -angle
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            out.copy_or_fill(img, x, y, sx.floor() as i64, sy.floor() as i64);
        }
    }
    out
}

fn channel_histogram(img: &Image, c: usize) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for px in img.data().chunks_exact(img.channels()) {
        hist[px[c] as usize] += 1;
    }
    hist
}

fn apply_channel_luts(img: &Image, luts: &[[u8; 256]]) -> Image {
    let mut out = img.clone();
    let ch = img.channels();
    for px in out.data_mut().chunks_exact_mut(ch) {
        for (c, v) in px.iter_mut().enumerate() {
            *v = luts[c][*v as usize];
        }
    }
    out
}

fn identity_lut() -> [u8; 256] {
    let mut lut = [0u8; 256];
    for (i, v) in lut.iter_mut().enumerate() {
        *v = i as u8;
    }
    lut
}

fn autocontrast(img: &Image) -> Image {
    let luts: Vec<[u8; 256]> = (0..img.channels())
        .map(|c| {
            let hist = channel_histogram(img, c);
            let lo = hist.iter().position(|&n| n > 0).unwrap_or(0);
            let hi = hist.iter().rposition(|&n| n > 0).unwrap_or(255);
            if hi <= lo {
                return identity_lut();
            }
            let scale = 255.0 / (hi - lo) as f64;
            let offset = -(lo as f64) * scale;
            let mut lut = [0u8; 256];
            for (i, v) in lut.iter_mut().enumerate() {
                *v = (i as f64 * scale + offset).clamp(0.0, 255.0) as u8;
            }
            lut
        })
        .collect();
    apply_channel_luts(img, &luts)
}

fn equalize(img: &Image) -> Image {
    let luts: Vec<[u8; 256]> = (0..img.channels())
        .map(|c| {
            let hist = channel_histogram(img, c);
            let nonzero: Vec<u64> = hist.iter().copied().filter(|&n| n > 0).collect();
            if nonzero.len() <= 1 {
                return identity_lut();
            }
            let total: u64 = nonzero.iter().sum();
            let step = (total - nonzero[nonzero.len() - 1]) / 255;
            if step == 0 {
                return identity_lut();
            }
            let mut lut = [0u8; 256];
            let mut n = step / 2;
            for (i, v) in lut.iter_mut().enumerate() {
                *v = (n / step).min(255) as u8;
                n += hist[i];
            }
            lut
        })
        .collect();
    apply_channel_luts(img, &luts)
}

#[inline]
fn luma(r: u8, g: u8, b: u8) -> f64 {
    (r as f64 * 299.0 + g as f64 * 587.0 + b as f64 * 114.0) / 1000.0
}

fn grayscale_values(img: &Image) -> Vec<f64> {
    match img.channels() {
        1 => img.data().iter().map(|&v| v as f64).collect(),
        _ => img
            .data()
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]))
            .collect(),
    }
}

fn contrast(img: &Image, factor: f64) -> Image {
    let gray = grayscale_values(img);
    let mean = (gray.iter().map(|g| g.round()).sum::<f64>() / gray.len() as f64).round();
    map_values(img, |v| blend_value(mean, v, factor))
}

fn color(img: &Image, factor: f64) -> Image {
    if img.channels() == 1 {
        return img.clone();
    }
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let gray = luma(px[0], px[1], px[2]).round();
        for v in px.iter_mut() {
            *v = blend_value(gray, *v, factor);
        }
    }
    out
}

fn sharpness(img: &Image, factor: f64) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    // Border pixels keep their value in the smoothed image, so they are
    // unchanged by the blend for any factor.
    if w < 3 || h < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for c in 0..img.channels() {
                let mut acc = 0u32;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let weight = if kx == 1 && ky == 1 { 5 } else { 1 };
                        acc += weight * img.get(x + kx - 1, y + ky - 1, c) as u32;
                    }
                }
                let smooth = (acc as f64 / 13.0).round();
                out.set(x, y, c, blend_value(smooth, img.get(x, y, c), factor));
            }
        }
    }
    out
}
