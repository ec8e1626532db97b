//! Synthetic mask/image datasets and their on-disk PGM form.
//!
//! Three generator families stand in for segmentation tasks with distinct
//! mask statistics: one large central blob (lesion), many small ellipses
//! (nuclei), and clusters that may be absent or cover most of the image
//! (tumor). Every sample is drawn from its own rng seeded by mixing the
//! dataset seed with the sample index, so output does not depend on
//! generation order.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, data_err, format_err, Error, Result};
use crate::tensor::Tensor;

/// Largest supported spatial extent.
pub const MAX_SIZE: usize = 64;
/// Nuclei counts are specified for a canvas of this extent and scaled by area.
pub const NUCLEI_REFERENCE_SIZE: usize = 64;
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DatasetKind {
    Lesion,
    Nuclei,
    Tumor,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 3] = [DatasetKind::Lesion, DatasetKind::Nuclei, DatasetKind::Tumor];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Lesion => "lesion",
            DatasetKind::Nuclei => "nuclei",
            DatasetKind::Tumor => "tumor",
        }
    }

    /// Ensemble size used for this kind of data: 10 for lesion, 25 for
    /// nuclei, 5 for tumor.
    pub fn ensemble_preset(self) -> usize {
        match self {
            DatasetKind::Lesion => 10,
            DatasetKind::Nuclei => 25,
            DatasetKind::Tumor => 5,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lesion" => Ok(DatasetKind::Lesion),
            "nuclei" => Ok(DatasetKind::Nuclei),
            "tumor" => Ok(DatasetKind::Tumor),
            other => Err(config_err!("unknown dataset kind '{other}' (expected lesion, nuclei or tumor)")),
        }
    }
}

/// Kind-specific shape parameters. Areas and radii relative to the image
/// are fractions; absolute radii are pixels.
#[derive(Debug, Clone, PartialEq)]
pub enum ShapeParams {
    Lesion { area: (f64, f64), center_jitter: f64 },
    Nuclei { count: (usize, usize), radius: (f64, f64) },
    Tumor { empty_prob: f64, large_prob: f64, large_coverage: (f64, f64), clusters: (usize, usize), cluster_radius: (f64, f64) },
}

impl ShapeParams {
    pub fn default_for(kind: DatasetKind) -> Self {
        match kind {
            DatasetKind::Lesion => ShapeParams::Lesion { area: (0.15, 0.50), center_jitter: 0.10 },
            DatasetKind::Nuclei => ShapeParams::Nuclei { count: (10, 40), radius: (2.0, 4.0) },
            DatasetKind::Tumor => ShapeParams::Tumor {
                empty_prob: 0.12,
                large_prob: 0.16,
                large_coverage: (0.55, 0.90),
                clusters: (1, 5),
                cluster_radius: (0.08, 0.18),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub params: ShapeParams,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, count: usize, size: usize, seed: u64) -> Self {
        DatasetSpec { kind, count, size, seed, params: ShapeParams::default_for(kind) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(config_err!("dataset count must be at least 1"));
        }
        if !self.size.is_power_of_two() || self.size < 4 || self.size > MAX_SIZE {
            return Err(config_err!("size {} must be a power of two in 4..={MAX_SIZE}", self.size));
        }
        let matches = matches!(
            (self.kind, &self.params),
            (DatasetKind::Lesion, ShapeParams::Lesion { .. })
                | (DatasetKind::Nuclei, ShapeParams::Nuclei { .. })
                | (DatasetKind::Tumor, ShapeParams::Tumor { .. })
        );
        if !matches {
            return Err(config_err!("shape parameters do not belong to kind {}", self.kind));
        }
        Ok(())
    }
}

/// A binary mask and its single-channel condition image, both row-major
/// `size × size` with values in {0, 1} and [0, 1] respectively.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImagePair {
    pub id: String,
    pub size: usize,
    pub mask: Vec<f64>,
    pub image: Vec<f64>,
}

impl MaskImagePair {
    pub fn new(id: impl Into<String>, size: usize, mask: Vec<f64>, image: Vec<f64>) -> Result<Self> {
        if mask.len() != size * size || image.len() != size * size {
            return Err(data_err!("mask/image length must be {}", size * size));
        }
        if let Some(v) = mask.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(data_err!("mask value {v} is not binary"));
        }
        if let Some(v) = image.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(data_err!("image value {v} outside [0, 1]"));
        }
        Ok(MaskImagePair { id: id.into(), size, mask, image })
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().sum::<f64>() / self.mask.len() as f64
    }
}

/// Which field of a pair to stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Mask,
    Image,
}

/// Stacks the chosen field of `pairs` into `[B,1,H,W]`, encoded to [-1, 1].
pub fn stack_encoded<'a>(pairs: impl IntoIterator<Item = &'a MaskImagePair>, field: Field) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut size = None;
    let mut batch = 0;
    for p in pairs {
        if *size.get_or_insert(p.size) != p.size {
            return Err(data_err!("cannot stack samples of different sizes"));
        }
        let src = match field {
            Field::Mask => &p.mask,
            Field::Image => &p.image,
        };
        data.extend(src.iter().map(|v| 2.0 * v - 1.0));
        batch += 1;
    }
    let size = size.ok_or_else(|| data_err!("cannot stack an empty batch"))?;
    Tensor::new(vec![batch, 1, size, size], data)
}

/// SplitMix64 finalizer, used to derive independent seeds from a root seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from a label, for threading one root seed through subsystems.
pub fn mix_seed_str(seed: u64, label: &str) -> u64 {
    label.bytes().fold(mix_seed(seed, 0x5EED), |acc, b| mix_seed(acc, b as u64))
}

fn sample_rng(spec: &DatasetSpec, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index as u64))
}

fn sample_id(kind: DatasetKind, index: usize) -> String {
    format!("{kind}_{index:05}")
}

/// Generates the dataset described by `spec`, dispatching on its kind.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<MaskImagePair>> {
    spec.validate()?;
    (0..spec.count)
        .map(|i| {
            let mut rng = sample_rng(spec, i);
            let mask = match &spec.params {
                ShapeParams::Lesion { area, center_jitter } => lesion_mask(spec.size, *area, *center_jitter, &mut rng),
                ShapeParams::Nuclei { count, radius } => nuclei_mask(spec.size, *count, *radius, &mut rng),
                ShapeParams::Tumor { .. } => tumor_mask(spec.size, &spec.params, &mut rng),
            };
            let image = render_condition_image(&mask, spec.size, &mut rng);
            MaskImagePair::new(sample_id(spec.kind, i), spec.size, mask, image)
        })
        .collect()
}

fn expect_kind(spec: &DatasetSpec, kind: DatasetKind) -> Result<()> {
    if spec.kind != kind {
        return Err(config_err!("expected a {kind} spec, got {}", spec.kind));
    }
    Ok(())
}

pub fn gen_lesion(spec: &DatasetSpec) -> Result<Vec<MaskImagePair>> {
    expect_kind(spec, DatasetKind::Lesion)?;
    generate(spec)
}

pub fn gen_nuclei(spec: &DatasetSpec) -> Result<Vec<MaskImagePair>> {
    expect_kind(spec, DatasetKind::Nuclei)?;
    generate(spec)
}

pub fn gen_tumor(spec: &DatasetSpec) -> Result<Vec<MaskImagePair>> {
    expect_kind(spec, DatasetKind::Tumor)?;
    generate(spec)
}

/// Smooth star-convex radius profile: r(θ) = 1 + Σ a_k cos(kθ + φ_k), k = 2..4.
struct StarShape {
    harmonics: Vec<(f64, f64, f64)>,
}

impl StarShape {
    fn random<R: Rng + ?Sized>(rng: &mut R, roughness: f64) -> Self {
        let harmonics = (2..=4).map(|k| (k as f64, rng.gen_range(0.0..roughness) / k as f64, rng.gen_range(0.0..2.0 * PI))).collect();
        StarShape { harmonics }
    }

    fn radius(&self, theta: f64) -> f64 {
        1.0 + self.harmonics.iter().map(|(k, a, phi)| a * (k * theta + phi).cos()).sum::<f64>()
    }

    /// Mean of r(θ)², so that π·R²·mean_r2 is the polygon area at scale R.
    fn mean_r2(&self) -> f64 {
        1.0 + 0.5 * self.harmonics.iter().map(|(_, a, _)| a * a).sum::<f64>()
    }

    fn paint(&self, mask: &mut [f64], size: usize, cx: f64, cy: f64, scale: f64) {
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let d = (dx * dx + dy * dy).sqrt();
                if d <= scale * self.radius(dy.atan2(dx)) {
                    mask[y * size + x] = 1.0;
                }
            }
        }
    }
}

fn lesion_mask<R: Rng + ?Sized>(size: usize, area: (f64, f64), jitter: f64, rng: &mut R) -> Vec<f64> {
    let n = size as f64;
    let target = rng.gen_range(area.0..=area.1) * n * n;
    let shape = StarShape::random(rng, 0.2);
    let scale = (target / (PI * shape.mean_r2())).sqrt();
    let cx = n / 2.0 + rng.gen_range(-jitter..=jitter) * n;
    let cy = n / 2.0 + rng.gen_range(-jitter..=jitter) * n;
    let mut mask = vec![0.0; size * size];
    shape.paint(&mut mask, size, cx, cy, scale);
    keep_largest_component(&mut mask, size);
    mask
}

/// Nuclei count scaled from the reference canvas to `size` by area.
pub fn nuclei_count_range(size: usize, count: (usize, usize)) -> (usize, usize) {
    let f = (size as f64 / NUCLEI_REFERENCE_SIZE as f64).powi(2);
    let lo = ((count.0 as f64 * f).round() as usize).max(1);
    let hi = ((count.1 as f64 * f).round() as usize).max(lo);
    (lo, hi)
}

fn nuclei_mask<R: Rng + ?Sized>(size: usize, count: (usize, usize), radius: (f64, f64), rng: &mut R) -> Vec<f64> {
    let (lo, hi) = nuclei_count_range(size, count);
    let n = rng.gen_range(lo..=hi);
    let mut mask = vec![0.0; size * size];
    for _ in 0..n {
        let cx = rng.gen_range(0.0..size as f64);
        let cy = rng.gen_range(0.0..size as f64);
        let rx = rng.gen_range(radius.0..=radius.1);
        let ry = rng.gen_range(radius.0..=radius.1);
        let (s, c) = rng.gen_range(0.0..PI).sin_cos();
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                if u * u + v * v <= 1.0 {
                    mask[y * size + x] = 1.0;
                }
            }
        }
    }
    mask
}

fn tumor_mask<R: Rng + ?Sized>(size: usize, params: &ShapeParams, rng: &mut R) -> Vec<f64> {
    let ShapeParams::Tumor { empty_prob, large_prob, large_coverage, clusters, cluster_radius } = params else {
        unreachable!("tumor_mask called with non-tumor parameters")
    };
    let mut mask = vec![0.0; size * size];
    let mode: f64 = rng.gen();
    if mode < *empty_prob {
        return mask;
    }
    if mode < empty_prob + large_prob {
        // threshold a smooth field at the quantile matching the drawn coverage
        let field = wave_field(size, 8, 6, rng);
        let coverage = rng.gen_range(large_coverage.0..=large_coverage.1);
        let mut sorted = field.clone();
        sorted.sort_by(f64::total_cmp);
        let keep = ((coverage * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        let cut = sorted[sorted.len() - keep];
        for (m, f) in mask.iter_mut().zip(&field) {
            if *f >= cut {
                *m = 1.0;
            }
        }
        return mask;
    }
    let n = rng.gen_range(clusters.0..=clusters.1);
    for _ in 0..n {
        // a cluster is a handful of lobes scattered around a common center
        let spread = rng.gen_range(cluster_radius.0..=cluster_radius.1) * size as f64;
        let cx = rng.gen_range(0.0..size as f64);
        let cy = rng.gen_range(0.0..size as f64);
        for _ in 0..rng.gen_range(3..=8) {
            let shape = StarShape::random(rng, 0.5);
            let (r, a) = (spread * rng.gen::<f64>().sqrt(), rng.gen_range(0.0..2.0 * PI));
            shape.paint(&mut mask, size, cx + r * a.cos(), cy + r * a.sin(), spread * rng.gen_range(0.3..0.5));
        }
    }
    mask
}

/// Sum of `count` random plane waves with at most `max_freq` cycles per
/// axis, rescaled to [-1, 1].
fn wave_field<R: Rng + ?Sized>(size: usize, count: usize, max_freq: i32, rng: &mut R) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            let u = rng.gen_range(-max_freq..=max_freq) as f64;
            let v = rng.gen_range(-max_freq..=max_freq) as f64;
            let u = if u == 0.0 && v == 0.0 { 1.0 } else { u };
            (u, v, rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.5..1.0))
        })
        .collect();
    let n = size as f64;
    let mut field: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            waves.iter().map(|(u, v, phi, a)| a * (2.0 * PI * (u * x + v * y) / n + phi).cos()).sum()
        })
        .collect();
    let (lo, hi) = field.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-12);
    for v in &mut field {
        *v = 2.0 * (*v - lo) / span - 1.0;
    }
    field
}

pub const TEXTURE_MEAN: f64 = 0.35;
pub const TEXTURE_AMPLITUDE: f64 = 0.15;
pub const FOREGROUND_CONTRAST: f64 = 0.3;
pub const PIXEL_NOISE: f64 = 0.1;

/// Condition image for a mask: smooth background texture, a +0.3 contrast
/// shift on foreground, Gaussian pixel noise with σ = 0.1, clipped to [0, 1].
pub fn render_condition_image<R: Rng + ?Sized>(mask: &[f64], size: usize, rng: &mut R) -> Vec<f64> {
    let texture = wave_field(size, 4, 2, rng);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    mask.iter()
        .zip(&texture)
        .map(|(&m, &tex)| {
            let v = TEXTURE_MEAN + TEXTURE_AMPLITUDE * tex + FOREGROUND_CONTRAST * m + noise.sample(rng);
            v.clamp(0.0, 1.0)
        })
        .collect()
}

/// Labels 4-connected foreground components; returns per-pixel labels
/// (0 = background, components numbered from 1) and component areas.
pub fn label_components(mask: &[f64], size: usize) -> (Vec<usize>, Vec<usize>) {
    let mut labels = vec![0usize; mask.len()];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0.0 || labels[start] != 0 {
            continue;
        }
        let label = areas.len() + 1;
        labels[start] = label;
        stack.push(start);
        let mut area = 0;
        while let Some(p) = stack.pop() {
            area += 1;
            let (x, y) = (p % size, p / size);
            let mut visit = |q: usize| {
                if mask[q] != 0.0 && labels[q] == 0 {
                    labels[q] = label;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < size {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - size);
            }
            if y + 1 < size {
                visit(p + size);
            }
        }
        areas.push(area);
    }
    (labels, areas)
}

pub fn component_areas(mask: &[f64], size: usize) -> Vec<usize> {
    label_components(mask, size).1
}

fn keep_largest_component(mask: &mut [f64], size: usize) {
    let (labels, areas) = label_components(mask, size);
    if areas.len() <= 1 {
        return;
    }
    let best = areas.iter().enumerate().max_by_key(|(i, a)| (**a, std::cmp::Reverse(*i))).map(|(i, _)| i + 1).unwrap_or(0);
    for (m, l) in mask.iter_mut().zip(labels) {
        if l != best {
            *m = 0.0;
        }
    }
}

/// Writes a binary 8-bit PGM; values must lie in [0, 1].
pub fn save_pgm(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, data)?)?;
    Ok(())
}

pub fn encode_pgm(width: usize, height: usize, data: &[f64]) -> Result<Vec<u8>> {
    if width == 0 || height == 0 || data.len() != width * height {
        return Err(data_err!("pgm data length {} does not match {width}x{height}", data.len()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &v in data {
        if !(0.0..=1.0).contains(&v) {
            return Err(data_err!("pgm value {v} outside [0, 1]"));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

/// Reads a binary PGM as `(width, height, values in [0, 1])`.
pub fn load_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_pgm(&fs::read(path)?)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(format_err!("truncated pgm header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(format_err!("not a binary pgm (magic must be P5)"));
    }
    let mut number = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse::<usize>().map_err(|_| format_err!("bad pgm {what} '{t}'"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(format_err!("unsupported pgm header {width}x{height} maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let end = start + width * height;
    if bytes.len() < end {
        return Err(format_err!("truncated pgm raster: need {} bytes, have {}", width * height, bytes.len().saturating_sub(start)));
    }
    let data = bytes[start..end]
        .iter()
        .map(|&b| if b as usize > maxval { Err(format_err!("pixel {b} exceeds maxval {maxval}")) } else { Ok(b as f64 / maxval as f64) })
        .collect::<Result<Vec<_>>>()?;
    Ok((width, height, data))
}

/// Deterministic shuffled split; `ratio` is the training fraction.
pub fn split_train_val<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(config_err!("split ratio {ratio} must lie in (0, 1)"));
    }
    let n_train = (ratio * items.len() as f64).round() as usize;
    if n_train == 0 || n_train == items.len() {
        return Err(config_err!("split of {} items at ratio {ratio} leaves an empty side", items.len()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order[..n_train].iter().map(|&i| items[i].clone()).collect();
    let val = order[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: String,
    pub size: usize,
    pub train: Vec<MaskImagePair>,
    pub val: Vec<MaskImagePair>,
}

impl Dataset {
    pub fn all(&self) -> impl Iterator<Item = &MaskImagePair> {
        self.train.iter().chain(&self.val)
    }
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_img.pgm"))
}

pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_mask.pgm"))
}

/// Writes every pair as `<id>_img.pgm` / `<id>_mask.pgm` plus a manifest
/// with columns id, split, kind. Returns the written paths.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut manifest = String::from("id,split,kind\n");
    for (split, items) in [("train", &data.train), ("val", &data.val)] {
        for p in items.iter() {
            let (ip, mp) = (image_path(dir, &p.id), mask_path(dir, &p.id));
            save_pgm(&ip, p.size, p.size, &p.image)?;
            save_pgm(&mp, p.size, p.size, &p.mask)?;
            written.push(ip);
            written.push(mp);
            manifest.push_str(&format!("{},{split},{}\n", p.id, data.kind));
        }
    }
    let mpath = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&mpath)?;
    f.write_all(manifest.as_bytes())?;
    written.push(mpath);
    Ok(written)
}

fn read_pair(dir: &Path, id: &str) -> Result<MaskImagePair> {
    let (w, h, image) = load_pgm(&image_path(dir, id))?;
    let (mw, mh, raw_mask) = load_pgm(&mask_path(dir, id))?;
    if w != h || (w, h) != (mw, mh) {
        return Err(data_err!("{id}: image {w}x{h} and mask {mw}x{mh} must be equal and square"));
    }
    let mask = raw_mask.into_iter().map(|v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    MaskImagePair::new(id, w, mask, image)
}

/// Seed used to split ingested pair directories that carry no manifest.
pub const INGEST_SPLIT_SEED: u64 = 0;

/// Loads a dataset directory. With a manifest the recorded split is used;
/// otherwise every `<id>_img.pgm` with a matching mask is ingested and split
/// 80/20 with a fixed seed.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let (kind, train, val) = if mpath.exists() {
        let text = fs::read_to_string(&mpath)?;
        let rows: Vec<(String, String, String)> = crate::csvio::read_rows(&text, &["id", "split", "kind"], &mpath.display().to_string())?;
        let mut kind = String::new();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (n, (id, split, k)) in rows.into_iter().enumerate() {
            kind = k;
            let pair = read_pair(dir, &id)?;
            match split.as_str() {
                "train" => train.push(pair),
                "val" => val.push(pair),
                other => return Err(format_err!("{} row {}: unknown split '{other}'", mpath.display(), n + 1)),
            }
        }
        (kind, train, val)
    } else {
        let mut ids = BTreeMap::new();
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix("_img.pgm") {
                ids.insert(id.to_string(), ());
            }
        }
        let pairs = ids.keys().filter(|id| mask_path(dir, id).exists()).map(|id| read_pair(dir, id)).collect::<Result<Vec<_>>>()?;
        let (train, val) = split_train_val(&pairs, 0.8, INGEST_SPLIT_SEED)?;
        ("external".to_string(), train, val)
    };
    let size = train.first().or(val.first()).map(|p| p.size).ok_or_else(|| data_err!("no samples found in {}", dir.display()))?;
    if train.iter().chain(&val).any(|p| p.size != size) {
        return Err(data_err!("samples in {} differ in size", dir.display()));
    }
    if train.is_empty() {
        return Err(data_err!("{} has no training samples", dir.display()));
    }
    Ok(Dataset { kind, size, train, val })
}
