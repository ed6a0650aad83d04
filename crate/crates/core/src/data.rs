//! Datasets: a synthetic shape-classification generator, stratified
//! subsetting, and a raw binary format with a JSON manifest.
//!
//! Raw split file layout (all integers little-endian `u32`):
//!
//! ```text
//! "PBAD" count height width channels
//! count x [label: u8, pixels: height*width*channels bytes]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, FILL_VALUE};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Natural-image-like: horizontal flips are label preserving.
    Natural,
    /// Digit-like: no flips.
    #[default]
    Digit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: u64,
    pub image: Image,
    pub label: usize,
}

/// Per-channel statistics of pixel values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn from_examples(examples: &[Example]) -> Self {
        let channels = examples.first().map_or(1, |e| e.image.channels());
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        let mut n = 0usize;
        for e in examples {
            for px in e.image.data().chunks_exact(channels) {
                for (c, &v) in px.iter().enumerate() {
                    let v = v as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity(channels);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Self { mean, std }
    }

    pub fn features(&self, img: &Image) -> Vec<f64> {
        let ch = img.channels();
        img.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i % ch;
                (v as f64 / 255.0 - self.mean[c]) / self.std[c]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub class_count: usize,
    pub kind: DatasetKind,
    pub normalization: Normalization,
}

impl DatasetSplits {
    pub fn input_dim(&self) -> usize {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .next()
            .map_or(0, |e| e.image.data().len())
    }

    /// True when no example id occurs in two splits.
    pub fn is_disjoint(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .all(|e| seen.insert(e.id))
    }

    pub fn class_counts(examples: &[Example], classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for e in examples {
            counts[e.label] += 1;
        }
        counts
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("class_count {requested} exceeds the {available} available templates")]
    TooManyClasses { requested: usize, available: usize },
    #[error("invalid `{field}`: {reason}")]
    Spec { field: &'static str, reason: String },
    #[error("cannot reduce to {n} examples: need at least one per class ({classes})")]
    ReduceTooSmall { n: usize, classes: usize },
    #[error("cannot reduce to {n} examples: train split has {available}")]
    ReduceTooLarge { n: usize, available: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Raw {
        path: PathBuf,
        #[source]
        source: RawError,
    },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RawError {
    #[error("bad magic at byte 0: expected \"PBAD\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("truncated at byte {offset}: expected {expected} bytes in total, found {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{extra} trailing bytes after byte {offset}")]
    Trailing { offset: usize, extra: usize },
    #[error("invalid dimensions at byte 8: {width}x{height}x{channels}")]
    Dimensions {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("label {label} at byte {offset} out of range 0..{class_count}")]
    Label {
        offset: usize,
        label: u8,
        class_count: usize,
    },
    #[error("example {index} has shape {found:?}, file declares {expected:?}")]
    Shape {
        index: usize,
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
}

/// Parameters of the synthetic shape dataset. The train split is rendered
/// upright and centred; validation and test splits apply the nuisance
/// transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub class_count: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    /// Rotation drawn uniformly from `[-rotation_deg, rotation_deg]`.
    #[serde(default)]
    pub rotation_deg: f64,
    /// Shift drawn uniformly from `[-t, t]` times the image size, per axis.
    #[serde(default)]
    pub translate_frac: f64,
    /// Intensity factor drawn uniformly from `[1 - j, 1 + j]`.
    #[serde(default)]
    pub brightness_jitter: f64,
    pub seed: u64,
    #[serde(default)]
    pub kind: DatasetKind,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 16,
            class_count: 8,
            train_samples: 400,
            val_samples: 400,
            test_samples: 1000,
            rotation_deg: 30.0,
            translate_frac: 0.0,
            brightness_jitter: 0.0,
            seed: 0,
            kind: DatasetKind::Digit,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Primitive {
    Segment([f64; 2], [f64; 2]),
    Disk([f64; 2], f64),
    Ring([f64; 2], f64),
}

const TEMPLATES: usize = 10;

fn template(class: usize) -> Vec<Primitive> {
    use Primitive::*;
    match class {
        0 => vec![Segment([-0.7, 0.0], [0.7, 0.0])],
        1 => vec![
            Segment([-0.6, 0.0], [0.6, 0.0]),
            Segment([0.0, -0.6], [0.0, 0.6]),
        ],
        2 => vec![
            Segment([-0.4, -0.6], [-0.4, 0.6]),
            Segment([-0.4, 0.6], [0.5, 0.6]),
        ],
        3 => vec![
            Segment([-0.6, -0.5], [0.6, -0.5]),
            Segment([0.0, -0.5], [0.0, 0.6]),
        ],
        4 => vec![
            Segment([-0.5, -0.5], [0.5, -0.5]),
            Segment([0.5, -0.5], [0.5, 0.5]),
            Segment([0.5, 0.5], [-0.5, 0.5]),
            Segment([-0.5, 0.5], [-0.5, -0.5]),
        ],
        5 => vec![Disk([0.0, 0.0], 0.45)],
        6 => vec![
            Segment([0.0, -0.6], [0.6, 0.45]),
            Segment([0.6, 0.45], [-0.6, 0.45]),
            Segment([-0.6, 0.45], [0.0, -0.6]),
        ],
        7 => vec![
            Segment([-0.6, -0.3], [0.6, -0.3]),
            Segment([-0.6, 0.3], [0.6, 0.3]),
        ],
        8 => vec![Ring([0.0, 0.0], 0.55)],
        9 => vec![
            Disk([-0.45, -0.45], 0.17),
            Disk([0.45, -0.45], 0.17),
            Disk([0.0, 0.45], 0.17),
        ],
        _ => unreachable!("template index checked by caller"),
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let (apx, apy) = (p[0] - a[0], p[1] - a[1]);
    let t = ((apx * abx + apy * aby) / (abx * abx + aby * aby)).clamp(0.0, 1.0);
    let (dx, dy) = (apx - t * abx, apy - t * aby);
    (dx * dx + dy * dy).sqrt()
}

fn covered(prims: &[Primitive], q: [f64; 2], thickness: f64) -> bool {
    prims.iter().any(|p| match *p {
        Primitive::Segment(a, b) => segment_distance(q, a, b) <= thickness,
        Primitive::Disk(c, r) => ((q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2)).sqrt() <= r,
        Primitive::Ring(c, r) => {
            (((q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2)).sqrt() - r).abs() <= thickness
        }
    })
}

#[derive(Debug, Clone, Copy)]
struct Nuisance {
    rotation_rad: f64,
    shift: [f64; 2],
    brightness: f64,
}

fn render<R: Rng>(
    class: usize,
    size: usize,
    channels: usize,
    nuisance: Nuisance,
    rng: &mut R,
) -> Image {
    let prims = template(class);
    let scale = rng.gen_range(0.85..1.1);
    let thickness = rng.gen_range(0.1..0.16);
    let fg = rng.gen_range(180.0..250.0);
    let bg = rng.gen_range(15.0..50.0);
    let (sin, cos) = nuisance.rotation_rad.sin_cos();
    const SS: usize = 2;
    let mut data = Vec::with_capacity(size * size * channels);
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    // pixel sample in [-1, 1], then undo shift, rotation, scale
                    let u = ((x as f64 + (sx as f64 + 0.5) / SS as f64) / size as f64) * 2.0
                        - 1.0
                        - nuisance.shift[0];
                    let v = ((y as f64 + (sy as f64 + 0.5) / SS as f64) / size as f64) * 2.0
                        - 1.0
                        - nuisance.shift[1];
                    let q = [(cos * u + sin * v) / scale, (-sin * u + cos * v) / scale];
                    if covered(&prims, q, thickness) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f64 / (SS * SS) as f64;
            let base = (bg + cov * (fg - bg)) * nuisance.brightness;
            for _ in 0..channels {
                let noise = rng.gen_range(-8.0..8.0);
                data.push((base + noise).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::new(size, size, channels, data).expect("valid dimensions")
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.class_count > TEMPLATES {
            return Err(DataError::TooManyClasses {
                requested: self.class_count,
                available: TEMPLATES,
            });
        }
        let bad = |field, reason: &str| {
            Err(DataError::Spec {
                field,
                reason: reason.into(),
            })
        };
        if self.class_count < 2 {
            return bad("class_count", "need at least 2 classes");
        }
        if self.image_size < 4 {
            return bad("image_size", "must be at least 4");
        }
        if self.train_samples == 0 || self.val_samples == 0 || self.test_samples == 0 {
            return bad("train_samples", "every split needs at least one sample");
        }
        if !(self.rotation_deg >= 0.0
            && self.translate_frac >= 0.0
            && (0.0..1.0).contains(&self.brightness_jitter))
        {
            return bad(
                "rotation_deg",
                "nuisance ranges must be non-negative and brightness_jitter < 1",
            );
        }
        Ok(())
    }

    fn draw_nuisance<R: Rng>(&self, rng: &mut R) -> Nuisance {
        let r = self.rotation_deg.to_radians();
        let t = 2.0 * self.translate_frac;
        let j = self.brightness_jitter;
        Nuisance {
            rotation_rad: if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 },
            shift: if t > 0.0 {
                [rng.gen_range(-t..=t), rng.gen_range(-t..=t)]
            } else {
                [0.0, 0.0]
            },
            brightness: if j > 0.0 {
                rng.gen_range(1.0 - j..=1.0 + j)
            } else {
                1.0
            },
        }
    }

    fn split(&self, n: usize, first_id: u64, split_index: u32, nuisance: bool) -> Vec<Example> {
        let mut rng = rng::stream(self.seed, Domain::Data, split_index);
        let channels = match self.kind {
            DatasetKind::Natural => 3,
            DatasetKind::Digit => 1,
        };
        let clean = Nuisance {
            rotation_rad: 0.0,
            shift: [0.0, 0.0],
            brightness: 1.0,
        };
        (0..n)
            .map(|i| {
                let label = i % self.class_count;
                let nz = if nuisance {
                    self.draw_nuisance(&mut rng)
                } else {
                    clean
                };
                Example {
                    id: first_id + i as u64,
                    image: render(label, self.image_size, channels, nz, &mut rng),
                    label,
                }
            })
            .collect()
    }

    /// Applies one random nuisance draw to an existing image: rotation and
    /// shift about the centre with nearest-neighbour sampling, vacated pixels
    /// set to the fill value, then the brightness factor. This is the
    /// augmentation that matches the test-time distribution exactly.
    pub fn apply_nuisance<R: Rng>(&self, img: &Image, rng: &mut R) -> Image {
        let nz = self.draw_nuisance(rng);
        let (w, h) = (img.width(), img.height());
        let (sin, cos) = nz.rotation_rad.sin_cos();
        let mut out = img.clone();
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0 - nz.shift[0];
                let v = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0 - nz.shift[1];
                let (qu, qv) = (cos * u + sin * v, -sin * u + cos * v);
                let sx = ((qu + 1.0) / 2.0 * w as f64).floor() as i64;
                let sy = ((qv + 1.0) / 2.0 * h as f64).floor() as i64;
                let inside = sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h;
                for c in 0..img.channels() {
                    let p = if inside {
                        img.get(sx as usize, sy as usize, c)
                    } else {
                        FILL_VALUE
                    };
                    out.set(
                        x,
                        y,
                        c,
                        (p as f64 * nz.brightness).round().clamp(0.0, 255.0) as u8,
                    );
                }
            }
        }
        out
    }
}

/// Renders the synthetic dataset. Labels cycle through the classes, so every
/// split is balanced up to one example.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetSplits, DataError> {
    spec.validate()?;
    let train = spec.split(spec.train_samples, 0, 0, false);
    let val = spec.split(spec.val_samples, spec.train_samples as u64, 1, true);
    let test = spec.split(
        spec.test_samples,
        (spec.train_samples + spec.val_samples) as u64,
        2,
        true,
    );
    let normalization = Normalization::from_examples(&train);
    Ok(DatasetSplits {
        train,
        val,
        test,
        class_count: spec.class_count,
        kind: spec.kind,
        normalization,
    })
}

/// Subsamples the train split to `n` examples, stratified by class.
/// Validation and test splits are untouched.
pub fn reduce_split(
    splits: &DatasetSplits,
    n: usize,
    seed: u64,
) -> Result<DatasetSplits, DataError> {
    let available = splits.train.len();
    if n > available {
        return Err(DataError::ReduceTooLarge { n, available });
    }
    if n < splits.class_count {
        return Err(DataError::ReduceTooSmall {
            n,
            classes: splits.class_count,
        });
    }
    let mut by_class: Vec<Vec<usize>> = vec![vec![]; splits.class_count];
    for (i, e) in splits.train.iter().enumerate() {
        by_class[e.label].push(i);
    }
    // largest-remainder apportionment
    let mut quotas: Vec<usize> = by_class.iter().map(|c| c.len() * n / available).collect();
    let mut remainders: Vec<(usize, usize)> = by_class
        .iter()
        .enumerate()
        .map(|(k, c)| (c.len() * n % available, k))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - quotas.iter().sum::<usize>();
    for &(_, k) in remainders.iter().take(short) {
        quotas[k] += 1;
    }
    let mut rng = rng::stream(seed, Domain::Data, 100);
    let mut keep: Vec<usize> = vec![];
    for (members, quota) in by_class.iter_mut().zip(quotas) {
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..quota]);
    }
    keep.sort_unstable();
    Ok(DatasetSplits {
        train: keep.into_iter().map(|i| splits.train[i].clone()).collect(),
        ..splits.clone()
    })
}

const RAW_MAGIC: &[u8; 4] = b"PBAD";
const RAW_HEADER: usize = 20;

/// Encodes examples in the raw split format. All examples must share one shape.
pub fn encode_raw(examples: &[Example]) -> Result<Vec<u8>, RawError> {
    let (w, h, c) = examples.first().map_or((1, 1, 1), |e| {
        (e.image.width(), e.image.height(), e.image.channels())
    });
    let mut out = Vec::with_capacity(RAW_HEADER + examples.len() * (1 + w * h * c));
    out.extend_from_slice(RAW_MAGIC);
    for v in [examples.len(), h, w, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (index, e) in examples.iter().enumerate() {
        let found = (e.image.width(), e.image.height(), e.image.channels());
        if found != (w, h, c) {
            return Err(RawError::Shape {
                index,
                expected: (w, h, c),
                found,
            });
        }
        out.push(e.label as u8);
        out.extend_from_slice(e.image.data());
    }
    Ok(out)
}

/// Decodes a raw split. Example ids are `first_id + index`.
pub fn decode_raw(
    bytes: &[u8],
    class_count: usize,
    first_id: u64,
) -> Result<Vec<Example>, RawError> {
    if bytes.len() < 4 || &bytes[..4] != RAW_MAGIC {
        return Err(RawError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < RAW_HEADER {
        return Err(RawError::Truncated {
            offset: bytes.len(),
            expected: RAW_HEADER,
            actual: bytes.len(),
        });
    }
    let field = |i: usize| {
        u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let (count, height, width, channels) = (field(0), field(1), field(2), field(3));
    if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
        return Err(RawError::Dimensions {
            width,
            height,
            channels,
        });
    }
    let record = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .and_then(|p| p.checked_add(1))
        .ok_or(RawError::Dimensions {
            width,
            height,
            channels,
        })?;
    let expected = count
        .checked_mul(record)
        .and_then(|b| b.checked_add(RAW_HEADER))
        .unwrap_or(usize::MAX);
    if bytes.len() < expected {
        return Err(RawError::Truncated {
            offset: bytes.len(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(RawError::Trailing {
            offset: expected,
            extra: bytes.len() - expected,
        });
    }
    let mut out = Vec::with_capacity(count);
    for (i, rec) in bytes[RAW_HEADER..].chunks_exact(record).enumerate() {
        let offset = RAW_HEADER + i * record;
        let label = rec[0];
        if label as usize >= class_count {
            return Err(RawError::Label {
                offset,
                label,
                class_count,
            });
        }
        let image =
            Image::new(width, height, channels, rec[1..].to_vec()).expect("dimensions validated");
        out.push(Example {
            id: first_id + i as u64,
            image,
            label: label as usize,
        });
    }
    Ok(out)
}

/// Reads one raw split file.
pub fn load_raw(path: &Path, class_count: usize, first_id: u64) -> Result<Vec<Example>, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.into(),
        source,
    })?;
    decode_raw(&bytes, class_count, first_id).map_err(|source| DataError::Raw {
        path: path.into(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub class_count: usize,
    #[serde(default)]
    pub kind: DatasetKind,
    /// Normalisation statistics; computed from the train split when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// `{"train": path, "val": path, "test": path, "meta": {...}}`. Relative
/// paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub meta: ManifestMeta,
}

pub fn load_manifest(path: &Path) -> Result<DatasetSplits, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.into(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| DataError::Manifest {
        path: path.into(),
        source,
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let k = manifest.meta.class_count;
    let train = load_raw(&dir.join(&manifest.train), k, 0)?;
    let val = load_raw(&dir.join(&manifest.val), k, train.len() as u64)?;
    let test = load_raw(
        &dir.join(&manifest.test),
        k,
        (train.len() + val.len()) as u64,
    )?;
    let normalization = manifest
        .meta
        .normalization
        .clone()
        .unwrap_or_else(|| Normalization::from_examples(&train));
    Ok(DatasetSplits {
        train,
        val,
        test,
        class_count: k,
        kind: manifest.meta.kind,
        normalization,
    })
}

/// Writes `splits` as three raw files plus `manifest.json` inside `dir`.
pub fn write_dataset(dir: &Path, splits: &DatasetSplits) -> Result<PathBuf, DataError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, examples) in [
        ("train.bin", &splits.train),
        ("val.bin", &splits.val),
        ("test.bin", &splits.test),
    ] {
        let p = dir.join(name);
        let bytes = encode_raw(examples).map_err(|source| DataError::Raw {
            path: p.clone(),
            source,
        })?;
        fs::write(&p, bytes).map_err(io_err(&p))?;
    }
    let manifest = Manifest {
        train: "train.bin".into(),
        val: "val.bin".into(),
        test: "test.bin".into(),
        meta: ManifestMeta {
            class_count: splits.class_count,
            kind: splits.kind,
            normalization: Some(splits.normalization.clone()),
            extra: BTreeMap::new(),
        },
    };
    let p = dir.join("manifest.json");
    fs::write(
        &p,
        serde_json::to_vec_pretty(&manifest).expect("manifest serialises"),
    )
    .map_err(io_err(&p))?;
    Ok(p)
}
