//! 2AFC triplets (on-disk reader/writer and a synthetic generator) and
//! labeled image sets for the classifier harness.
//!
//! On-disk triplet layout, shared by real and generated data:
//!
//! ```text
//! <root>/<split>/<category>/ref/000000.png
//!                          /p0/000000.png
//!                          /p1/000000.png
//!                          /judge/000000.txt   (or .npy)
//! ```
//!
//! A judge file holds the fraction of raters preferring `p1`, either as a
//! decimal number in plain text or as a `.npy` array with exactly one
//! float element (`<f4`/`<f8`, any shape of size one). A split without
//! category directories (`ref/` directly under `<split>/`) is read as the
//! `synthetic` category.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::graph::logistic;
use crate::image::Image;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Traditional,
    Cnn,
    Superres,
    Deblur,
    Color,
    Frameinterp,
    Synthetic,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Traditional,
        Category::Cnn,
        Category::Superres,
        Category::Deblur,
        Category::Color,
        Category::Frameinterp,
        Category::Synthetic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Traditional => "traditional",
            Category::Cnn => "cnn",
            Category::Superres => "superres",
            Category::Deblur => "deblur",
            Category::Color => "color",
            Category::Frameinterp => "frameinterp",
            Category::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown category `{s}`")))
    }
}

/// Reference `x`, distortions `x0`/`x1`, and `h`, the fraction of judges
/// who found `x1` closer to `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoAFCTriplet {
    pub x: Image,
    pub x0: Image,
    pub x1: Image,
    pub h: f64,
    pub category: Category,
}

impl TwoAFCTriplet {
    pub fn validate(&self) -> Result<()> {
        if !self.x.same_shape(&self.x0) || !self.x.same_shape(&self.x1) {
            return Err(Error::Shape(format!(
                "triplet images have shapes {:?}, {:?}, {:?}",
                self.x.shape(),
                self.x0.shape(),
                self.x1.shape()
            )));
        }
        check_judgment(self.h)
    }
}

fn check_judgment(h: f64) -> Result<()> {
    if (0.0..=1.0).contains(&h) {
        Ok(())
    } else {
        Err(Error::Dataset(format!("judgment {h} outside [0, 1]")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    GaussianBlur,
    AdditiveNoise,
    Quantize,
    ColorShift,
    DownUpSample,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 5] = [
        DistortionKind::GaussianBlur,
        DistortionKind::AdditiveNoise,
        DistortionKind::Quantize,
        DistortionKind::ColorShift,
        DistortionKind::DownUpSample,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DistortionKind::GaussianBlur => "gaussian_blur",
            DistortionKind::AdditiveNoise => "additive_noise",
            DistortionKind::Quantize => "quantize",
            DistortionKind::ColorShift => "color_shift",
            DistortionKind::DownUpSample => "down_up_sample",
        }
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistortionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown distortion kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub severity: f64,
    pub seed: u64,
}

pub const NOISE_SIGMA: f64 = 0.1;
const BLUR_MAX_PASSES: f64 = 8.0;
const COLOR_SHIFT_MAX: f64 = 0.3;
const DOWN_UP_MAX_LEVEL: f64 = 3.0;

/// Applies one distortion. Severity 0 returns `x` unchanged, and for a
/// fixed kind and seed the pixel-space deviation from `x` never shrinks as
/// severity grows.
pub fn apply_distortion(x: &Image, spec: &DistortionSpec) -> Result<Image> {
    let s = spec.severity;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("severity {s} outside [0, 1]")));
    }
    if s == 0.0 {
        return Ok(x.clone());
    }
    let [h, w, c] = x.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let out = match spec.kind {
        DistortionKind::AdditiveNoise => {
            let sigma = NOISE_SIGMA * s;
            let data = x
                .data()
                .iter()
                .map(|v| v + sigma * truncated_normal(&mut rng))
                .collect();
            Tensor::new(vec![h, w, c], data)
        }
        DistortionKind::ColorShift => {
            let mut dir: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dir.iter_mut().for_each(|v| *v *= COLOR_SHIFT_MAX * s / n);
            let mut t = x.tensor().clone();
            for px in t.data_mut().chunks_mut(c) {
                px.iter_mut().zip(&dir).for_each(|(v, d)| *v += d);
            }
            t
        }
        DistortionKind::Quantize => {
            let bits = (8.0 - 7.0 * s).round();
            let levels = 2f64.powf(bits);
            x.tensor().map(|v| (v * levels).round() / levels)
        }
        DistortionKind::GaussianBlur => {
            let passes = BLUR_MAX_PASSES * s;
            let whole = passes.floor() as usize;
            let frac = passes - whole as f64;
            let mut t = x.tensor().clone();
            for _ in 0..whole {
                t = blur_pass(&t);
            }
            if frac > 0.0 {
                let next = blur_pass(&t);
                t = t.zip_map(&next, |a, b| (1.0 - frac) * a + frac * b);
            }
            t
        }
        DistortionKind::DownUpSample => {
            let level = DOWN_UP_MAX_LEVEL * s;
            let k = level.floor() as u32;
            let frac = level - k as f64;
            let lo = block_average(x.tensor(), 1 << k);
            if frac > 0.0 {
                let hi = block_average(x.tensor(), 1 << (k + 1));
                lo.zip_map(&hi, |a, b| (1.0 - frac) * a + frac * b)
            } else {
                lo
            }
        }
    };
    Ok(Image::from_tensor_clamped(out))
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 3.0 {
            return z;
        }
    }
}

/// One separable pass of the circular `[1/4, 1/2, 1/4]` kernel.
pub fn blur_pass(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let at = |d: &[f64], y: usize, x: usize, ch: usize| d[(y * w + x) * c + ch];
    let src = t.data();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let l = at(src, y, (x + w - 1) % w, ch);
                let r = at(src, y, (x + 1) % w, ch);
                tmp[(y * w + x) * c + ch] = 0.25 * l + 0.5 * at(src, y, x, ch) + 0.25 * r;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let u = at(&tmp, (y + h - 1) % h, x, ch);
                let d = at(&tmp, (y + 1) % h, x, ch);
                out[(y * w + x) * c + ch] = 0.25 * u + 0.5 * at(&tmp, y, x, ch) + 0.25 * d;
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Replaces every `f×f` block (clipped at the border) by its mean.
fn block_average(t: &Tensor, f: usize) -> Tensor {
    if f == 1 {
        return t.clone();
    }
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = t.clone();
    for by in (0..h).step_by(f) {
        for bx in (0..w).step_by(f) {
            let (ye, xe) = ((by + f).min(h), (bx + f).min(w));
            let n = ((ye - by) * (xe - bx)) as f64;
            for ch in 0..c {
                let mut sum = 0.0;
                for y in by..ye {
                    for x in bx..xe {
                        sum += t.data()[(y * w + x) * c + ch];
                    }
                }
                for y in by..ye {
                    for x in bx..xe {
                        out.data_mut()[(y * w + x) * c + ch] = sum / n;
                    }
                }
            }
        }
    }
    out
}

/// Smooth procedural images: a few random plane waves per channel plus a
/// linear ramp, squashed into `(0, 1)`.
pub fn synth_base_images(n: usize, size: usize, channels: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let waves: Vec<[f64; 5]> = (0..4 * channels)
                .map(|_| {
                    [
                        rng.random_range(-6.0..6.0),
                        rng.random_range(-6.0..6.0),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.3..1.2),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect();
            let mut data = Vec::with_capacity(size * size * channels);
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
                    for ch in 0..channels {
                        let mut acc = 0.0;
                        for wv in &waves[4 * ch..4 * ch + 4] {
                            acc += wv[3] * (std::f64::consts::PI * (wv[0] * u + wv[1] * v) + wv[2]).sin();
                            acc += 0.5 * wv[4] * (u - v);
                        }
                        data.push(logistic(1.2 * acc));
                    }
                }
            }
            Image::new(size, size, channels, data).expect("logistic output lies in [0, 1]")
        })
        .collect()
}

/// Distorts `base` at severities `s0` and `s1` and labels the triplet with
/// `h = 1` when `x1` is the less distorted side, `h = 0` otherwise.
pub fn make_triplet(
    base: &Image,
    kind: DistortionKind,
    s0: f64,
    s1: f64,
    seeds: [u64; 2],
    category: Category,
) -> Result<TwoAFCTriplet> {
    let x0 = apply_distortion(base, &DistortionSpec { kind, severity: s0, seed: seeds[0] })?;
    let x1 = apply_distortion(base, &DistortionSpec { kind, severity: s1, seed: seeds[1] })?;
    Ok(TwoAFCTriplet {
        x: base.clone(),
        x0,
        x1,
        h: if s1 < s0 { 1.0 } else { 0.0 },
        category,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub kinds: Vec<DistortionKind>,
    pub min_severity: f64,
    pub max_severity: f64,
    /// Smallest allowed `|s0 - s1|`.
    pub min_gap: f64,
    /// When set, `h = sigmoid((s0 - s1) / temperature)` instead of the hard label.
    pub soft_temperature: Option<f64>,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            kinds: DistortionKind::ALL.to_vec(),
            min_severity: 0.05,
            max_severity: 1.0,
            min_gap: 0.1,
            soft_temperature: None,
            seed: 0,
        }
    }
}

/// Generates `n` triplets. Both sides of a triplet use the same distortion
/// kind at different severities; a fair coin decides which side is `x0`.
pub fn synth_generate(bases: &[Image], n: usize, opts: &SynthOptions) -> Result<Vec<TwoAFCTriplet>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if bases.is_empty() {
        return Err(Error::EmptyDataset("synthetic generation needs a base image".into()));
    }
    if opts.kinds.is_empty() {
        return Err(Error::InvalidArgument("no distortion kinds selected".into()));
    }
    let (lo, hi) = (opts.min_severity, opts.max_severity);
    if !(0.0 <= lo && lo < hi && hi <= 1.0) || opts.min_gap < 0.0 || opts.min_gap >= hi - lo {
        return Err(Error::InvalidArgument(format!(
            "bad severity range [{lo}, {hi}] with gap {}",
            opts.min_gap
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let base = &bases[rng.random_range(0..bases.len())];
        let kind = opts.kinds[rng.random_range(0..opts.kinds.len())];
        let (mut s0, mut s1);
        loop {
            s0 = rng.random_range(lo..=hi);
            s1 = rng.random_range(lo..=hi);
            if (s0 - s1).abs() >= opts.min_gap && s0 != s1 {
                break;
            }
        }
        let seeds = [rng.random(), rng.random()];
        let swap: bool = rng.random();
        let mut t = make_triplet(base, kind, s0, s1, seeds, Category::Synthetic)?;
        if let Some(temp) = opts.soft_temperature {
            t.h = logistic((s0 - s1) / temp);
        }
        if swap {
            std::mem::swap(&mut t.x0, &mut t.x1);
            t.h = 1.0 - t.h;
        }
        out.push(t);
    }
    Ok(out)
}

/// Per-category triplet counts of a split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: String,
    pub counts: BTreeMap<Category, usize>,
    pub total: usize,
}

#[derive(Clone, Debug)]
struct TripletFiles {
    category: Category,
    index: String,
    reference: PathBuf,
    p0: PathBuf,
    p1: PathBuf,
    judge: PathBuf,
}

/// Lazily decoded triplets of one split.
#[derive(Clone, Debug)]
pub struct TripletStream {
    entries: Vec<TripletFiles>,
    pos: usize,
}

impl TripletStream {
    /// Same triplets in a seeded random order.
    pub fn shuffled(mut self, seed: u64) -> Self {
        self.entries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn read(e: &TripletFiles) -> Result<TwoAFCTriplet> {
        let h = read_judgment(&e.judge).map_err(|err| {
            Error::Dataset(format!("triplet {} ({}): {err}", e.index, e.judge.display()))
        })?;
        let t = TwoAFCTriplet {
            x: Image::load(&e.reference)?,
            x0: Image::load(&e.p0)?,
            x1: Image::load(&e.p1)?,
            h,
            category: e.category,
        };
        t.validate()
            .map_err(|err| Error::Dataset(format!("triplet {}: {err}", e.index)))?;
        Ok(t)
    }
}

impl Iterator for TripletStream {
    type Item = Result<TwoAFCTriplet>;

    fn next(&mut self) -> Option<Self::Item> {
        let e = self.entries.get(self.pos)?;
        self.pos += 1;
        Some(Self::read(e))
    }
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

fn find_judge(dir: &Path, index: &str) -> Option<PathBuf> {
    ["txt", "npy"]
        .iter()
        .map(|ext| dir.join(format!("{index}.{ext}")))
        .find(|p| p.is_file())
}

fn list_category(dir: &Path, category: Category, out: &mut Vec<TripletFiles>) -> Result<()> {
    for p in sorted_dir(&dir.join("ref"))? {
        if p.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let index = p
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Dataset(format!("bad file name {}", p.display())))?
            .to_string();
        let counterpart = |sub: &str| {
            let q = dir.join(sub).join(format!("{index}.png"));
            if q.is_file() {
                Ok(q)
            } else {
                Err(Error::Dataset(format!(
                    "triplet {index} in {}: missing {}",
                    dir.display(),
                    q.display()
                )))
            }
        };
        let (p0, p1) = (counterpart("p0")?, counterpart("p1")?);
        let judge = find_judge(&dir.join("judge"), &index).ok_or_else(|| {
            Error::Dataset(format!(
                "triplet {index} in {}: missing judge/{index}.txt or .npy",
                dir.display()
            ))
        })?;
        out.push(TripletFiles {
            category,
            index,
            reference: p,
            p0,
            p1,
            judge,
        });
    }
    Ok(())
}

/// Lists a split and returns its triplets in category, then index, order.
pub fn load_bapps_layout(root: &Path, split: &str) -> Result<(TripletStream, Manifest)> {
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("split directory {} not found", dir.display())));
    }
    let mut entries = Vec::new();
    if dir.join("ref").is_dir() {
        list_category(&dir, Category::Synthetic, &mut entries)?;
    } else {
        for sub in sorted_dir(&dir)? {
            if !sub.is_dir() {
                continue;
            }
            let name = sub.file_name().and_then(|s| s.to_str()).unwrap_or_default();
            let category: Category = name.parse()?;
            list_category(&sub, category, &mut entries)?;
        }
    }
    let mut manifest = Manifest {
        split: split.to_string(),
        ..Manifest::default()
    };
    for e in &entries {
        *manifest.counts.entry(e.category).or_default() += 1;
    }
    manifest.total = entries.len();
    Ok((TripletStream { entries, pos: 0 }, manifest))
}

/// Writes triplets under `<root>/<split>/<category>/` with a `manifest.json`.
/// Pixels are stored as 8-bit PNG.
pub fn write_bapps_layout(root: &Path, split: &str, triplets: &[TwoAFCTriplet]) -> Result<Manifest> {
    let dir = root.join(split);
    let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
    for t in triplets {
        t.validate()?;
        let n = counts.entry(t.category).or_default();
        let cat = dir.join(t.category.as_str());
        let name = format!("{:06}", *n);
        for (sub, img) in [("ref", &t.x), ("p0", &t.x0), ("p1", &t.x1)] {
            let d = cat.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            img.save_png(&d.join(format!("{name}.png")))?;
        }
        write_atomic(&cat.join("judge").join(format!("{name}.txt")), format!("{}\n", t.h).as_bytes())?;
        *n += 1;
    }
    let manifest = Manifest {
        split: split.to_string(),
        total: triplets.len(),
        counts,
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

fn read_judgment(path: &Path) -> Result<f64> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = if path.extension().and_then(|e| e.to_str()) == Some("npy") {
        parse_npy_scalar(&bytes)?
    } else {
        let text = String::from_utf8_lossy(&bytes);
        text.trim()
            .parse::<f64>()
            .map_err(|_| Error::Dataset(format!("cannot parse judgment `{}`", text.trim())))?
    };
    check_judgment(h)?;
    Ok(h)
}

/// Reads the single float element of a `.npy` file.
fn parse_npy_scalar(bytes: &[u8]) -> Result<f64> {
    let bad = |m: &str| Error::Dataset(format!("npy judgment: {m}"));
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(bad("missing magic"));
    }
    let (hlen, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (
            u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize,
            12,
        ),
        _ => return Err(bad("unsupported version")),
    };
    let header = std::str::from_utf8(bytes.get(start..start + hlen).ok_or_else(|| bad("truncated header"))?)
        .map_err(|_| bad("header is not text"))?;
    let descr = header
        .split("'descr':")
        .nth(1)
        .and_then(|r| r.split('\'').nth(1))
        .ok_or_else(|| bad("no dtype"))?;
    let shape = header
        .split("'shape':")
        .nth(1)
        .and_then(|r| r.split('(').nth(1))
        .and_then(|r| r.split(')').next())
        .ok_or_else(|| bad("no shape"))?;
    let size: usize = shape
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("bad shape")))
        .product::<Result<usize>>()?;
    if size != 1 {
        return Err(bad("expected exactly one element"));
    }
    let data = &bytes[start + hlen..];
    match descr {
        "<f8" if data.len() == 8 => Ok(f64::from_le_bytes(data.try_into().expect("8 bytes"))),
        "<f4" if data.len() == 4 => Ok(f32::from_le_bytes(data.try_into().expect("4 bytes")) as f64),
        _ => Err(bad(&format!("unsupported dtype `{descr}` or payload size"))),
    }
}

/// Labeled images, with class names indexed by label.
#[derive(Clone, Debug, Default)]
pub struct LabeledSet {
    pub items: Vec<(Image, usize)>,
    pub classes: Vec<String>,
    pub warnings: Vec<String>,
}

/// Reads `<root>/<split>/<class>/*.png`; labels follow sorted class names.
pub fn load_labeled_images(root: &Path, split: &str) -> Result<LabeledSet> {
    let dir = root.join(split);
    let mut set = LabeledSet::default();
    for class_dir in sorted_dir(&dir)?.into_iter().filter(|p| p.is_dir()) {
        let label = set.classes.len();
        let name = class_dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let before = set.items.len();
        for f in sorted_dir(&class_dir)? {
            if f.extension().and_then(|e| e.to_str()) == Some("png") {
                set.items.push((Image::load(&f)?, label));
            }
        }
        if set.items.len() == before {
            let msg = format!("class `{name}` has no images");
            log::warn!("{msg}");
            set.warnings.push(msg);
        }
        set.classes.push(name);
    }
    Ok(set)
}

pub fn write_labeled_images(root: &Path, split: &str, set: &LabeledSet) -> Result<()> {
    let dir = root.join(split);
    let mut counters = vec![0usize; set.classes.len()];
    for name in &set.classes {
        let d = dir.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (img, label) in &set.items {
        let name = set.classes.get(*label).ok_or_else(|| {
            Error::Dataset(format!("label {label} has no class name"))
        })?;
        img.save_png(&dir.join(name).join(format!("{:06}.png", counters[*label])))?;
        counters[*label] += 1;
    }
    Ok(())
}

pub const SYNTH_CLASSES: usize = 10;

/// Ten classes of noisy oriented gratings: five orientations times two
/// color schemes, with random phase, frequency and contrast.
pub fn synth_labeled(per_class: usize, size: usize, seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palettes = [[0.9, 0.5, 0.1], [0.1, 0.5, 0.9]];
    let mut items = Vec::with_capacity(per_class * SYNTH_CLASSES);
    for i in 0..per_class * SYNTH_CLASSES {
        let label = i % SYNTH_CLASSES;
        let angle = (label % 5) as f64 * std::f64::consts::PI / 5.0 + rng.random_range(-0.12..0.12);
        let palette = palettes[label / 5];
        let freq = rng.random_range(2.5..4.5);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let contrast = rng.random_range(0.25..0.45);
        let (ca, sa) = (angle.cos(), angle.sin());
        let mut data = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
                let wave = (std::f64::consts::TAU * freq * (ca * u + sa * v) + phase).sin();
                for p in palette {
                    let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.05;
                    data.push((0.5 + contrast * wave * (2.0 * p - 1.0) + 0.15 * (p - 0.5) + noise).clamp(0.0, 1.0));
                }
            }
        }
        items.push((Image::new(size, size, 3, data).expect("clamped"), label));
    }
    LabeledSet {
        items,
        classes: (0..SYNTH_CLASSES).map(|c| format!("class{c:02}")).collect(),
        warnings: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_severity_is_identity() {
        let x = synth_base_images(1, 8, 3, 1).remove(0);
        for kind in DistortionKind::ALL {
            let y = apply_distortion(&x, &DistortionSpec { kind, severity: 0.0, seed: 4 }).unwrap();
            assert_eq!(y, x, "{kind:?}");
        }
    }

    #[test]
    fn unknown_kind_is_an_error() {
        assert!("sharpen".parse::<DistortionKind>().is_err());
        assert_eq!("quantize".parse::<DistortionKind>().unwrap(), DistortionKind::Quantize);
    }

    #[test]
    fn blur_preserves_mass_of_a_delta() {
        let mut t = Tensor::zeros(vec![9, 9, 1]);
        t.data_mut()[4 * 9 + 4] = 1.0;
        let x = Image::from_tensor_clamped(t);
        let y = apply_distortion(
            &x,
            &DistortionSpec { kind: DistortionKind::GaussianBlur, severity: 1.0, seed: 0 },
        )
        .unwrap();
        let total: f64 = y.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-3);
        assert!(y.data()[4 * 9 + 4] < 0.5);
        assert!(y.data()[4 * 9 + 5] > 0.0);
    }

    #[test]
    fn npy_scalar_forms() {
        let mk = |descr: &str, shape: &str, payload: &[u8]| {
            let header = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape}, }}\n");
            let mut b = b"\x93NUMPY\x01\x00".to_vec();
            b.extend_from_slice(&(header.len() as u16).to_le_bytes());
            b.extend_from_slice(header.as_bytes());
            b.extend_from_slice(payload);
            b
        };
        assert_eq!(parse_npy_scalar(&mk("<f8", "()", &0.25f64.to_le_bytes())).unwrap(), 0.25);
        assert_eq!(parse_npy_scalar(&mk("<f4", "(1,)", &0.5f32.to_le_bytes())).unwrap(), 0.5);
        assert_eq!(parse_npy_scalar(&mk("<f4", "(1, 1)", &0.75f32.to_le_bytes())).unwrap(), 0.75);
        assert!(parse_npy_scalar(&mk("<f4", "(2,)", &[0; 8])).is_err());
    }

    #[test]
    fn forced_severities_label() {
        let x = synth_base_images(1, 8, 3, 2).remove(0);
        let t = make_triplet(&x, DistortionKind::AdditiveNoise, 0.8, 0.1, [1, 2], Category::Synthetic).unwrap();
        assert_eq!(t.h, 1.0);
    }
}
