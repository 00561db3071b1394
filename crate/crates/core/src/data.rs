//! Synthetic dual-domain scenes, splits, manifests and raster file I/O.
//!
//! A scene is a textured background with axis-aligned rectangular buildings.
//! Each building draws a damage class, and the post-event image is derived
//! from the pre-event image by a per-class transform:
//!
//! * No-Damage: unchanged
//! * Minor: a small roof color shift
//! * Major: rubble over a contiguous 40-60% slab of the footprint
//! * Destroyed: rubble over the whole footprint plus debris speckle in a
//!   ring outside it
//!
//! Every post image also gets mild uniform noise (at most 0.01). The target
//! domain applies a [`DomainShiftSpec`] to both images of every pair.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::gaussian_blur;
use crate::error::{Error, Result};
use crate::model::DomainTag;
use crate::raster::{clamp_unit, DamageMask, ImagePair, RasterImage};

/// Upper bound of the uniform noise added to every post image.
pub const POST_NOISE: f64 = 0.01;

const PLACEMENT_ATTEMPTS: usize = 500;
const BUILDING_GAP: usize = 4;
const DEBRIS_RING: usize = 3;
const DEBRIS_DENSITY: f64 = 0.35;
const RUBBLE_BASE: [f64; 3] = [0.52, 0.45, 0.36];
const RUBBLE_SPREAD: f64 = 0.3;
const MINOR_SHIFT: [f64; 3] = [0.10, 0.03, -0.09];

/// Low-frequency value noise over a flat base color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundTexture {
    pub base: [f64; 3],
    /// Amplitude of the smooth noise field.
    pub amplitude: f64,
    /// Grid spacing of the noise field in pixels.
    pub scale: usize,
    /// Per-pixel grain amplitude.
    pub grain: f64,
}

impl Default for BackgroundTexture {
    fn default() -> Self {
        Self {
            base: [0.28, 0.34, 0.24],
            amplitude: 0.08,
            scale: 16,
            grain: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of the building count.
    pub building_count: (usize, usize),
    /// Inclusive range of building side lengths.
    pub building_size: (usize, usize),
    /// Probabilities of No-Damage, Minor, Major, Destroyed.
    pub damage_distribution: [f64; 4],
    pub texture: BackgroundTexture,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            building_count: (6, 10),
            building_size: (12, 24),
            damage_distribution: [0.35, 0.22, 0.22, 0.21],
            texture: BackgroundTexture::default(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.building_size;
        if lo == 0 || lo > hi || hi > self.width || hi > self.height {
            return Err(Error::invalid(format!(
                "building sizes {lo}..={hi} do not fit a {}x{} scene",
                self.width, self.height
            )));
        }
        if self.building_count.0 > self.building_count.1 {
            return Err(Error::invalid("building_count range is reversed"));
        }
        let p = &self.damage_distribution;
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("damage distribution must be non-negative and sum to 1"));
        }
        if self.texture.scale == 0 {
            return Err(Error::invalid("texture scale must be positive"));
        }
        Ok(())
    }
}

/// Placed building: footprint rectangle and damage label (1..=4).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Building {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub class: u8,
}

impl Building {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.width && y >= self.y0 && y < self.y0 + self.height
    }

    /// True when the rectangles, grown by `gap`, overlap.
    fn near(&self, other: &Building, gap: usize) -> bool {
        self.x0 < other.x0 + other.width + gap
            && other.x0 < self.x0 + self.width + gap
            && self.y0 < other.y0 + other.height + gap
            && other.y0 < self.y0 + self.height + gap
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub pair: ImagePair,
    pub mask: DamageMask,
    pub buildings: Vec<Building>,
}

fn sample_class(dist: &[f64; 4], rng: &mut impl Rng) -> u8 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u8 + 1;
        }
    }
    // Rounding leaves u >= acc only at the very top; pick the last non-empty class.
    dist.iter().rposition(|p| *p > 0.0).unwrap_or(0) as u8 + 1
}

/// Smooth noise in [-1, 1]: random lattice values, bilinearly interpolated.
fn value_noise(w: usize, h: usize, scale: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gw = w / scale + 2;
    let gh = h / scale + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = y as f64 / scale as f64;
        let (gy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / scale as f64;
            let (gx, tx) = (fx.floor() as usize, fx.fract());
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(gx, gy) + tx * (at(gx + 1, gy) - at(gx, gy));
            let bot = at(gx, gy + 1) + tx * (at(gx + 1, gy + 1) - at(gx, gy + 1));
            out.push(top + ty * (bot - top));
        }
    }
    out
}

fn place_buildings(spec: &SceneSpec, rng: &mut impl Rng) -> Result<Vec<Building>> {
    let (lo, hi) = spec.building_size;
    let count = rng.random_range(spec.building_count.0..=spec.building_count.1);
    let mut placed: Vec<Building> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let bw = rng.random_range(lo..=hi);
            let bh = rng.random_range(lo..=hi);
            let cand = Building {
                x0: rng.random_range(0..=spec.width - bw),
                y0: rng.random_range(0..=spec.height - bh),
                width: bw,
                height: bh,
                class: 0,
            };
            if placed.iter().all(|b| !b.near(&cand, BUILDING_GAP)) {
                placed.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Generation(format!(
                "could not place building {} of {count} in a {}x{} scene after {PLACEMENT_ATTEMPTS} attempts",
                placed.len() + 1,
                spec.width,
                spec.height
            )));
        }
    }
    for b in &mut placed {
        b.class = sample_class(&spec.damage_distribution, rng);
    }
    Ok(placed)
}

fn roof_color(existing: &[[f64; 3]], rng: &mut impl Rng) -> [f64; 3] {
    let mut best = [0.0; 3];
    let mut best_gap = -1.0;
    for _ in 0..20 {
        let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.45..0.95));
        let gap = existing
            .iter()
            .map(|e| (0..3).map(|i| (e[i] - c[i]).abs()).fold(0.0, f64::max))
            .fold(f64::INFINITY, f64::min);
        if gap > 0.1 {
            return c;
        }
        if gap > best_gap {
            best = c;
            best_gap = gap;
        }
    }
    best
}

fn rubble(rng: &mut impl Rng) -> [f64; 3] {
    std::array::from_fn(|c| RUBBLE_BASE[c] + rng.random_range(-RUBBLE_SPREAD..RUBBLE_SPREAD))
}

/// Deterministic scene from `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tex = &spec.texture;
    let noise = value_noise(w, h, tex.scale, &mut rng);
    let mut pre: Vec<f64> = Vec::with_capacity(w * h * 3);
    for n in &noise {
        for c in 0..3 {
            pre.push(tex.base[c] + tex.amplitude * n + rng.random_range(-tex.grain..=tex.grain));
        }
    }
    let buildings = place_buildings(spec, &mut rng)?;
    let mut labels = vec![0u8; w * h];
    let mut roofs: Vec<[f64; 3]> = Vec::with_capacity(buildings.len());
    for b in &buildings {
        let roof = roof_color(&roofs, &mut rng);
        roofs.push(roof);
        for y in b.y0..b.y0 + b.height {
            // A faint ridge along the long axis gives roofs some structure.
            for x in b.x0..b.x0 + b.width {
                let ridge = if b.width >= b.height { y == b.y0 + b.height / 2 } else { x == b.x0 + b.width / 2 };
                let shade = if ridge { -0.06 } else { 0.0 };
                let p = y * w + x;
                for c in 0..3 {
                    pre[p * 3 + c] = roof[c] + shade + rng.random_range(-0.015..=0.015);
                }
                labels[p] = b.class;
            }
        }
    }
    let pre = RasterImage::from_clamped(w, h, 3, pre);
    let mut post = pre.data().to_vec();
    for b in &buildings {
        match b.class {
            2 => {
                for y in b.y0..b.y0 + b.height {
                    for x in b.x0..b.x0 + b.width {
                        for c in 0..3 {
                            post[(y * w + x) * 3 + c] += MINOR_SHIFT[c];
                        }
                    }
                }
            }
            3 => {
                let frac = rng.random_range(0.4..0.6);
                let side = rng.random_range(0..4u8);
                let (cols, rows) = match side {
                    0 | 1 => (((b.width as f64 * frac).ceil() as usize).max(1), b.height),
                    _ => (b.width, ((b.height as f64 * frac).ceil() as usize).max(1)),
                };
                let x0 = if side == 1 { b.x0 + b.width - cols } else { b.x0 };
                let y0 = if side == 3 { b.y0 + b.height - rows } else { b.y0 };
                for y in y0..y0 + rows {
                    for x in x0..x0 + cols {
                        let r = rubble(&mut rng);
                        post[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&r);
                    }
                }
            }
            4 => {
                let x_lo = b.x0.saturating_sub(DEBRIS_RING);
                let y_lo = b.y0.saturating_sub(DEBRIS_RING);
                let x_hi = (b.x0 + b.width + DEBRIS_RING).min(w);
                let y_hi = (b.y0 + b.height + DEBRIS_RING).min(h);
                for y in y_lo..y_hi {
                    for x in x_lo..x_hi {
                        let inside = b.contains(x, y);
                        if inside || (labels[y * w + x] == 0 && rng.random::<f64>() < DEBRIS_DENSITY) {
                            let r = rubble(&mut rng);
                            post[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&r);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    for v in &mut post {
        *v += rng.random_range(-POST_NOISE..=POST_NOISE);
    }
    let post = RasterImage::from_clamped(w, h, 3, post);
    Ok(Scene {
        pair: ImagePair::new(pre, post)?,
        mask: DamageMask::new(w, h, labels)?,
        buildings,
    })
}

/// Sensor/atmosphere change applied to target-domain imagery. The default
/// is a strong haze: contrast roughly halved and lifted toward gray.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainShiftSpec {
    pub channel_gain: [f64; 3],
    pub channel_bias: [f64; 3],
    pub blur_sigma: f64,
    pub noise_sigma: f64,
}

impl DomainShiftSpec {
    pub const IDENTITY: DomainShiftSpec = DomainShiftSpec {
        channel_gain: [1.0; 3],
        channel_bias: [0.0; 3],
        blur_sigma: 0.0,
        noise_sigma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if self.channel_gain.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::invalid("channel gains must be positive"));
        }
        if self.channel_bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("channel biases must be finite"));
        }
        if !(self.blur_sigma >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("blur and noise sigmas must be >= 0"));
        }
        Ok(())
    }
}

impl Default for DomainShiftSpec {
    fn default() -> Self {
        Self {
            channel_gain: [0.5, 0.55, 0.6],
            channel_bias: [0.4, 0.38, 0.36],
            blur_sigma: 1.0,
            noise_sigma: 0.03,
        }
    }
}

/// `clamp(gain * v + bias)` per channel, then blur, then seeded Gaussian noise, clamped.
pub fn apply_domain_shift(img: &RasterImage, shift: &DomainShiftSpec, seed: u64) -> Result<RasterImage> {
    shift.validate()?;
    if img.channels() != 3 {
        return Err(Error::invalid(format!(
            "domain shift needs a 3-channel image, got {}",
            img.channels()
        )));
    }
    let (w, h) = (img.width(), img.height());
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| clamp_unit(shift.channel_gain[i % 3] * v + shift.channel_bias[i % 3]))
        .collect();
    let mut out = RasterImage::from_clamped(w, h, 3, data);
    if shift.blur_sigma > 0.0 {
        out = gaussian_blur(&out, shift.blur_sigma);
    }
    if shift.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, shift.noise_sigma).expect("finite sigma");
        let data = out.into_data().into_iter().map(|v| v + normal.sample(&mut rng)).collect();
        out = RasterImage::from_clamped(w, h, 3, data);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// `(train, val, test)` with `val = test = round(0.1 n)`.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 scenes to split, got {n}")));
    }
    let tenth = (0.1 * n as f64).round() as usize;
    Ok((n - 2 * tenth, tenth, tenth))
}

/// Split label of every index: train first, then val, then test.
pub fn assign_splits(n: usize) -> Result<Vec<Split>> {
    let (train, val, test) = split_sizes(n)?;
    Ok(std::iter::repeat_n(Split::Train, train)
        .chain(std::iter::repeat_n(Split::Val, val))
        .chain(std::iter::repeat_n(Split::Test, test))
        .collect())
}

/// Source-domain split: train and val only, `val = round(0.1 n)`.
pub fn assign_source_splits(n: usize) -> Result<Vec<Split>> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 source scenes, got {n}")));
    }
    let val = ((0.1 * n as f64).round() as usize).max(1);
    Ok(std::iter::repeat_n(Split::Train, n - val)
        .chain(std::iter::repeat_n(Split::Val, val))
        .collect())
}

/// One pair in a manifest. Paths are relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pre_path: PathBuf,
    pub post_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
    pub domain: DomainTag,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self { entries, root };
        for e in &manifest.entries {
            for p in [&e.pre_path, &e.post_path, &e.mask_path] {
                let full = manifest.root.join(p);
                if !full.is_file() {
                    return Err(Error::format(path, format!("listed file {} does not exist", full.display())));
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.entries).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn select(&self, domain: DomainTag, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.domain == domain && e.split == split).collect()
    }

    pub fn count(&self, domain: DomainTag, split: Split) -> usize {
        self.select(domain, split).len()
    }

    /// Reads every pair and mask of one domain/split, in manifest order.
    pub fn load_split(&self, domain: DomainTag, split: Split) -> Result<Vec<(ImagePair, DamageMask)>> {
        self.select(domain, split)
            .par_iter()
            .map(|e| {
                let pair = load_pair(&self.root.join(&e.pre_path), &self.root.join(&e.post_path))?;
                let mask = read_mask(&self.root.join(&e.mask_path))?;
                if !mask.same_shape(pair.width(), pair.height()) {
                    return Err(Error::format(&e.mask_path, "mask size differs from its images"));
                }
                Ok((pair, mask))
            })
            .collect()
    }
}

fn scene_seed(seed: u64, domain: DomainTag, index: usize) -> u64 {
    let offset = match domain {
        DomainTag::Source => 0,
        DomainTag::Target => 1 << 32,
    };
    seed.wrapping_add(offset).wrapping_add(index as u64)
}

/// One generated (and, for the target domain, shifted) scene.
pub fn domain_scene(
    scene: &SceneSpec,
    shift: &DomainShiftSpec,
    seed: u64,
    domain: DomainTag,
    index: usize,
) -> Result<(ImagePair, DamageMask)> {
    let s = scene_seed(seed, domain, index);
    let generated = generate_scene(&SceneSpec { seed: s, ..scene.clone() })?;
    match domain {
        DomainTag::Source => Ok((generated.pair, generated.mask)),
        DomainTag::Target => {
            let noise_seed = s ^ 0x9e37_79b9_7f4a_7c15;
            let pre = apply_domain_shift(&generated.pair.pre, shift, noise_seed)?;
            let post = apply_domain_shift(&generated.pair.post, shift, noise_seed.wrapping_add(1))?;
            Ok((ImagePair::new(pre, post)?, generated.mask))
        }
    }
}

/// Writes `source_scenes` unshifted and `target_scenes` shifted scenes under
/// `out_dir` plus `manifest.json`.
pub fn build_dataset_with(
    source_scenes: usize,
    target_scenes: usize,
    scene: &SceneSpec,
    shift: &DomainShiftSpec,
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    scene.validate()?;
    shift.validate()?;
    let source_splits = assign_source_splits(source_scenes)?;
    let target_splits = assign_splits(target_scenes)?;
    let jobs: Vec<(DomainTag, usize, Split)> = source_splits
        .iter()
        .enumerate()
        .map(|(i, s)| (DomainTag::Source, i, *s))
        .chain(target_splits.iter().enumerate().map(|(i, s)| (DomainTag::Target, i, *s)))
        .collect();
    for d in ["source", "target"] {
        let dir = out_dir.join(d);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let entries = jobs
        .par_iter()
        .map(|&(domain, i, split)| {
            let (pair, mask) = domain_scene(scene, shift, seed, domain, i)?;
            let name = match domain {
                DomainTag::Source => "source",
                DomainTag::Target => "target",
            };
            let rel = |kind: &str| PathBuf::from(name).join(format!("{name}_{i:04}_{kind}.png"));
            let entry = ManifestEntry {
                pre_path: rel("pre"),
                post_path: rel("post"),
                mask_path: rel("mask"),
                split,
                domain,
            };
            write_image(&out_dir.join(&entry.pre_path), &pair.pre)?;
            write_image(&out_dir.join(&entry.post_path), &pair.post)?;
            write_mask(&out_dir.join(&entry.mask_path), &mask)?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// [`build_dataset_with`] using `n_scenes` for both domains.
pub fn build_dataset(
    n_scenes: usize,
    scene: &SceneSpec,
    shift: &DomainShiftSpec,
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    build_dataset_with(n_scenes, n_scenes, scene, shift, out_dir, seed)
}

fn image_error(path: &Path, err: image::ImageError) -> Error {
    match err {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::format(path, other.to_string()),
    }
}

/// Saves a 1- or 3-channel image as 8-bit PNG.
pub fn write_image(path: &Path, img: &RasterImage) -> Result<()> {
    let color = match img.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::invalid(format!("cannot write a {c}-channel image"))),
    };
    image::save_buffer_with_format(
        path,
        &img.to_u8(),
        img.width() as u32,
        img.height() as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| image_error(path, e))
}

/// Loads any readable raster as a 3-channel image.
pub fn read_image(path: &Path) -> Result<RasterImage> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.into_rgb8();
    RasterImage::from_u8(img.width() as usize, img.height() as usize, 3, img.as_raw())
}

pub fn load_pair(pre: &Path, post: &Path) -> Result<ImagePair> {
    let pair = ImagePair::new(read_image(pre)?, read_image(post)?);
    pair.map_err(|e| Error::format(post, e.to_string()))
}

/// Saves label values 0-4 verbatim as a single-channel PNG.
pub fn write_mask(path: &Path, mask: &DamageMask) -> Result<()> {
    image::save_buffer_with_format(
        path,
        mask.data(),
        mask.width() as u32,
        mask.height() as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )
    .map_err(|e| image_error(path, e))
}

pub fn read_mask(path: &Path) -> Result<DamageMask> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::format(path, format!("mask must be 8-bit single channel, found {:?}", img.color())));
    }
    let img = img.into_luma8();
    if let Some(bad) = img.as_raw().iter().find(|v| **v > 4) {
        return Err(Error::format(path, format!("mask value {bad} outside the label range 0-4")));
    }
    DamageMask::new(img.width() as usize, img.height() as usize, img.into_raw())
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Display colors: background black, then green, yellow, orange, red.
pub const MASK_PALETTE: [[u8; 3]; 5] = [[0, 0, 0], [0, 255, 0], [255, 255, 0], [255, 165, 0], [255, 0, 0]];

pub fn render_mask(mask: &DamageMask) -> RasterImage {
    let bytes: Vec<u8> = mask.data().iter().flat_map(|l| MASK_PALETTE[*l as usize]).collect();
    RasterImage::from_u8(mask.width(), mask.height(), 3, &bytes).expect("palette image is well formed")
}
