//! Image enhancement operators and model-input assembly.
//!
//! Four operators feed the damage classifier: a Sobel edge map, per-channel
//! CLAHE, unsharp masking and a weighted fusion of the three with the
//! original image. [`build_input`] stacks the selected components for the
//! pre- and post-event images into one multi-channel raster.
//!
//! All convolutions use symmetric reflection at the borders
//! (`d c b a | a b c d | d c b a`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{clamp_unit, to_grayscale, ImagePair, RasterImage};

/// Maps a possibly out-of-range index onto `0..len` by symmetric reflection.
#[inline]
pub(crate) fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Parameters of unsharp masking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnsharpParams {
    /// Sharpening strength, `>= 0`.
    pub lambda: f64,
    /// Gaussian width in pixels, `> 0`.
    pub sigma: f64,
}

impl Default for UnsharpParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            sigma: 1.0,
        }
    }
}

impl UnsharpParams {
    pub fn kernel_radius(&self) -> usize {
        (3.0 * self.sigma).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("unsharp lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("unsharp sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Parameters of contrast-limited adaptive histogram equalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaheParams {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Bins are clipped at `clip_limit * tile_pixels / bins`.
    pub clip_limit: f64,
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            tiles_x: 8,
            tiles_y: 8,
            clip_limit: 2.0,
            bins: 256,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<()> {
        if self.tiles_x == 0 || self.tiles_y == 0 {
            return Err(Error::invalid("CLAHE tile grid must be at least 1x1"));
        }
        if !(self.clip_limit > 0.0 && self.clip_limit.is_finite()) {
            return Err(Error::invalid(format!("CLAHE clip limit must be > 0, got {}", self.clip_limit)));
        }
        if self.bins < 2 {
            return Err(Error::invalid("CLAHE needs at least 2 histogram bins"));
        }
        Ok(())
    }
}

/// Weights of the fusion `alpha*I + beta*E + gamma*C + delta*U`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.2,
            gamma: 0.2,
            delta: 0.2,
        }
    }
}

impl FusionWeights {
    pub const IDENTITY: FusionWeights = FusionWeights {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
        delta: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma, self.delta];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(format!("fusion weights must be >= 0, got {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("fusion weights must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// An enhancement that can be stacked next to the RGB baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Edges,
    Contrast,
    Unsharp,
}

impl Component {
    /// Channels contributed per image (pre and post each).
    pub fn width(self) -> usize {
        match self {
            Component::Edges => 1,
            Component::Contrast | Component::Unsharp => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Component::Edges => "edges",
            Component::Contrast => "contrast",
            Component::Unsharp => "unsharp",
        }
    }
}

/// Which model input layout to build; mirrors the ablation table rows.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum AugMode {
    RgbOnly,
    /// Baseline RGB plus the given components, kept sorted and deduplicated.
    RgbPlus(Vec<Component>),
    FusionOnly,
    RgbPlusFusion,
}

impl AugMode {
    pub fn rgb_plus(components: &[Component]) -> AugMode {
        let mut c = components.to_vec();
        c.sort();
        c.dedup();
        if c.is_empty() {
            AugMode::RgbOnly
        } else {
            AugMode::RgbPlus(c)
        }
    }

    /// Number of model input channels this layout produces.
    pub fn input_channels(&self) -> usize {
        match self {
            AugMode::RgbOnly | AugMode::FusionOnly => 6,
            AugMode::RgbPlusFusion => 12,
            AugMode::RgbPlus(set) => 6 + set.iter().map(|c| 2 * c.width()).sum::<usize>(),
        }
    }

    /// Human-readable row label, e.g. `RGB + Unsharp + Edges`.
    pub fn label(&self) -> String {
        match self {
            AugMode::RgbOnly => "RGB only".into(),
            AugMode::FusionOnly => "Fusion Aug.".into(),
            AugMode::RgbPlusFusion => "RGB + Fusion Aug.".into(),
            AugMode::RgbPlus(set) => {
                let mut s = String::from("RGB");
                for c in set {
                    s.push_str(" + ");
                    let n = c.name();
                    s.push_str(&n[..1].to_uppercase());
                    s.push_str(&n[1..]);
                }
                s
            }
        }
    }
}

impl fmt::Display for AugMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugMode::RgbOnly => f.write_str("rgb"),
            AugMode::FusionOnly => f.write_str("fusion"),
            AugMode::RgbPlusFusion => f.write_str("rgb,fusion"),
            AugMode::RgbPlus(set) => {
                f.write_str("rgb")?;
                for c in set {
                    write!(f, ",{}", c.name())?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for AugMode {
    type Err = Error;

    /// Parses a comma list over `{rgb, edges, contrast, unsharp, fusion}`.
    fn from_str(s: &str) -> Result<Self> {
        let mut rgb = false;
        let mut fusion = false;
        let mut comps = Vec::new();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok.to_ascii_lowercase().as_str() {
                "rgb" => rgb = true,
                "fusion" => fusion = true,
                "edges" => comps.push(Component::Edges),
                "contrast" => comps.push(Component::Contrast),
                "unsharp" => comps.push(Component::Unsharp),
                other => return Err(Error::invalid(format!("unknown augmentation '{other}'"))),
            }
        }
        match (fusion, rgb, comps.is_empty()) {
            (true, _, false) => Err(Error::invalid(
                "fusion already combines edges, contrast and unsharp; list it alone or with rgb",
            )),
            (true, false, true) => Ok(AugMode::FusionOnly),
            (true, true, true) => Ok(AugMode::RgbPlusFusion),
            (false, _, true) if rgb => Ok(AugMode::RgbOnly),
            (false, _, true) => Err(Error::invalid("empty augmentation list")),
            (false, _, false) => Ok(AugMode::rgb_plus(&comps)),
        }
    }
}

impl Serialize for AugMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for AugMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Full augmentation configuration of one ablation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub mode: AugMode,
    #[serde(default)]
    pub unsharp: UnsharpParams,
    #[serde(default)]
    pub clahe: ClaheParams,
    #[serde(default)]
    pub fusion: FusionWeights,
}

impl AugmentationConfig {
    pub fn new(mode: AugMode) -> Self {
        Self {
            mode,
            unsharp: UnsharpParams::default(),
            clahe: ClaheParams::default(),
            fusion: FusionWeights::default(),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.mode.input_channels()
    }

    pub fn validate(&self) -> Result<()> {
        self.unsharp.validate()?;
        self.clahe.validate()?;
        self.fusion.validate()
    }
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// One separable pass. Computed as `center + sum w_k (neighbor - center)`,
/// which equals the plain weighted sum for a normalized kernel and leaves
/// constant regions bit-exact.
fn blur_pass(plane: &[f64], w: usize, h: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let center = plane[y * w + x];
            let mut acc = 0.0;
            for (k, wk) in kernel.iter().enumerate() {
                let off = k as isize - r;
                let v = if horizontal {
                    plane[y * w + reflect(x as isize + off, w)]
                } else {
                    plane[reflect(y as isize + off, h) * w + x]
                };
                acc += wk * (v - center);
            }
            out[y * w + x] = center + acc;
        }
    }
    out
}

pub(crate) fn blur_plane(plane: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let tmp = blur_pass(plane, w, h, &kernel, true);
    blur_pass(&tmp, w, h, &kernel, false)
}

/// Separable Gaussian blur of every channel.
pub fn gaussian_blur(img: &RasterImage, sigma: f64) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    let planes: Vec<Vec<f64>> = (0..img.channels())
        .map(|c| blur_plane(&img.plane(c), w, h, sigma))
        .collect();
    RasterImage::from_planes(w, h, &planes)
}

/// Unsharp masking `clamp(I + lambda (I - G_sigma * I))`, per channel.
pub fn unsharp(img: &RasterImage, params: &UnsharpParams) -> Result<RasterImage> {
    params.validate()?;
    let (w, h) = (img.width(), img.height());
    let planes: Vec<Vec<f64>> = (0..img.channels())
        .map(|c| {
            let plane = img.plane(c);
            let blurred = blur_plane(&plane, w, h, params.sigma);
            plane
                .iter()
                .zip(&blurred)
                .map(|(i, b)| clamp_unit(i + params.lambda * (i - b)))
                .collect()
        })
        .collect();
    Ok(RasterImage::from_planes(w, h, &planes))
}

/// Sobel gradient magnitude of the luminance, rescaled so the maximum is 1.
pub fn edge_map(img: &RasterImage) -> Result<RasterImage> {
    let gray = to_grayscale(img)?;
    let (w, h) = (gray.width(), gray.height());
    let g = gray.data();
    let mut mag = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            // Central differences weighted (1, 2, 1): constant regions give exactly 0.
            let xs = [-1isize, 0, 1].map(|d| reflect(x as isize + d, w));
            let ys = [-1isize, 0, 1].map(|d| reflect(y as isize + d, h));
            let at = |xi: usize, yi: usize| g[ys[yi] * w + xs[xi]];
            let (mut gx, mut gy) = (0.0, 0.0);
            for (i, wt) in [1.0, 2.0, 1.0].iter().enumerate() {
                gx += wt * (at(2, i) - at(0, i));
                gy += wt * (at(i, 2) - at(i, 0));
            }
            mag[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut mag {
            *v /= max;
        }
    }
    Ok(RasterImage::from_planes(w, h, &[mag]))
}

enum TileMap {
    /// Histogram with a single occupied bin: equalization is undefined, values pass through.
    Identity,
    Lut(Vec<f64>),
}

impl TileMap {
    #[inline]
    fn apply(&self, v: f64, bins: usize) -> f64 {
        match self {
            TileMap::Identity => v,
            TileMap::Lut(lut) => lut[bin_of(v, bins)],
        }
    }
}

#[inline]
pub(crate) fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64) as usize).min(bins - 1)
}

fn tile_map(values: impl Iterator<Item = f64>, params: &ClaheParams) -> TileMap {
    let bins = params.bins;
    let mut hist = vec![0.0f64; bins];
    let mut n = 0usize;
    for v in values {
        hist[bin_of(v, bins)] += 1.0;
        n += 1;
    }
    if hist.iter().filter(|c| **c > 0.0).count() <= 1 {
        return TileMap::Identity;
    }
    let limit = params.clip_limit * n as f64 / bins as f64;
    let mut excess = 0.0;
    for c in &mut hist {
        if *c > limit {
            excess += *c - limit;
            *c = limit;
        }
    }
    let share = excess / bins as f64;
    let mut cdf = 0.0;
    let lut = hist
        .iter()
        .map(|c| {
            cdf += c + share;
            clamp_unit(cdf / n as f64)
        })
        .collect();
    TileMap::Lut(lut)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Tile index pair and interpolation weight for a coordinate.
fn interp_coord(pos: usize, centers: &[f64]) -> (usize, usize, f64) {
    let p = pos as f64;
    let last = centers.len() - 1;
    if p <= centers[0] {
        return (0, 0, 0.0);
    }
    if p >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.iter().rposition(|c| *c <= p).unwrap_or(0);
    (i, i + 1, (p - centers[i]) / (centers[i + 1] - centers[i]))
}

fn clahe_plane(plane: &[f64], w: usize, h: usize, params: &ClaheParams) -> Vec<f64> {
    let (tx, ty) = (params.tiles_x, params.tiles_y);
    let xb: Vec<usize> = (0..=tx).map(|i| i * w / tx).collect();
    let yb: Vec<usize> = (0..=ty).map(|j| j * h / ty).collect();
    let mut maps = Vec::with_capacity(tx * ty);
    for j in 0..ty {
        for i in 0..tx {
            let vals = (yb[j]..yb[j + 1])
                .flat_map(|y| (xb[i]..xb[i + 1]).map(move |x| (x, y)))
                .map(|(x, y)| plane[y * w + x]);
            maps.push(tile_map(vals, params));
        }
    }
    let cx: Vec<f64> = (0..tx).map(|i| (xb[i] + xb[i + 1]) as f64 / 2.0 - 0.5).collect();
    let cy: Vec<f64> = (0..ty).map(|j| (yb[j] + yb[j + 1]) as f64 / 2.0 - 0.5).collect();
    let bins = params.bins;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let (j0, j1, b) = interp_coord(y, &cy);
        for x in 0..w {
            let (i0, i1, a) = interp_coord(x, &cx);
            let v = plane[y * w + x];
            let top = lerp(maps[j0 * tx + i0].apply(v, bins), maps[j0 * tx + i1].apply(v, bins), a);
            let bottom = lerp(maps[j1 * tx + i0].apply(v, bins), maps[j1 * tx + i1].apply(v, bins), a);
            out[y * w + x] = clamp_unit(lerp(top, bottom, b));
        }
    }
    out
}

/// Per-channel CLAHE with bilinear interpolation between tile mappings.
pub fn clahe(img: &RasterImage, params: &ClaheParams) -> Result<RasterImage> {
    params.validate()?;
    let (w, h) = (img.width(), img.height());
    if w < params.tiles_x || h < params.tiles_y {
        return Err(Error::invalid(format!(
            "image {w}x{h} is smaller than the {}x{} tile grid",
            params.tiles_x, params.tiles_y
        )));
    }
    let planes: Vec<Vec<f64>> = (0..img.channels())
        .map(|c| clahe_plane(&img.plane(c), w, h, params))
        .collect();
    Ok(RasterImage::from_planes(w, h, &planes))
}

/// Weighted combination of precomputed components. `edges` is single-channel
/// and is broadcast across the channels of `original`.
pub fn fuse_components(
    original: &RasterImage,
    edges: &RasterImage,
    contrast: &RasterImage,
    sharpened: &RasterImage,
    weights: &FusionWeights,
) -> Result<RasterImage> {
    weights.validate()?;
    let (w, h, ch) = (original.width(), original.height(), original.channels());
    let same = |r: &RasterImage, c: usize| r.width() == w && r.height() == h && r.channels() == c;
    if !same(edges, 1) || !same(contrast, ch) || !same(sharpened, ch) {
        return Err(Error::invalid("fusion components must share the original's shape"));
    }
    let e = edges.data();
    let data = original
        .data()
        .iter()
        .zip(contrast.data())
        .zip(sharpened.data())
        .enumerate()
        .map(|(k, ((i, c), u))| {
            weights.alpha * i + weights.beta * e[k / ch] + weights.gamma * c + weights.delta * u
        })
        .collect();
    Ok(RasterImage::from_clamped(w, h, ch, data))
}

/// Fusion augmentation of a 3-channel image.
pub fn fuse(
    img: &RasterImage,
    weights: &FusionWeights,
    unsharp_params: &UnsharpParams,
    clahe_params: &ClaheParams,
) -> Result<RasterImage> {
    weights.validate()?;
    let e = edge_map(img)?;
    let c = clahe(img, clahe_params)?;
    let u = unsharp(img, unsharp_params)?;
    fuse_components(img, &e, &c, &u, weights)
}

fn component(img: &RasterImage, comp: Component, cfg: &AugmentationConfig) -> Result<RasterImage> {
    match comp {
        Component::Edges => edge_map(img),
        Component::Contrast => clahe(img, &cfg.clahe),
        Component::Unsharp => unsharp(img, &cfg.unsharp),
    }
}

/// Assembles the damage model input for `pair` under `config`.
///
/// Layouts:
/// * `RgbOnly`: `[pre, post]`, 6 channels.
/// * `RgbPlus(S)`: the 6 baseline channels, then for each component of `S` in
///   the order edges, contrast, unsharp: component(pre), component(post).
/// * `FusionOnly`: `[fuse(pre), fuse(post)]`, 6 channels.
/// * `RgbPlusFusion`: baseline followed by the fused pair, 12 channels.
pub fn build_input(pair: &ImagePair, config: &AugmentationConfig) -> Result<RasterImage> {
    config.validate()?;
    let fused = |img: &RasterImage| fuse(img, &config.fusion, &config.unsharp, &config.clahe);
    match &config.mode {
        AugMode::RgbOnly => RasterImage::stack(&[&pair.pre, &pair.post]),
        AugMode::FusionOnly => RasterImage::stack(&[&fused(&pair.pre)?, &fused(&pair.post)?]),
        AugMode::RgbPlusFusion => {
            let (fp, fq) = (fused(&pair.pre)?, fused(&pair.post)?);
            RasterImage::stack(&[&pair.pre, &pair.post, &fp, &fq])
        }
        AugMode::RgbPlus(set) => {
            let mut parts = Vec::with_capacity(2 + 2 * set.len());
            for comp in set {
                parts.push(component(&pair.pre, *comp, config)?);
                parts.push(component(&pair.post, *comp, config)?);
            }
            let mut refs = vec![&pair.pre, &pair.post];
            refs.extend(parts.iter());
            RasterImage::stack(&refs)
        }
    }
}
