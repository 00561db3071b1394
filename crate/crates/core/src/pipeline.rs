//! Two-stage gated inference and the training aids around it.
//!
//! Stage 1 thresholds the localization ensemble's building probability on the
//! pre-event image. Stage 2 labels only the pixels Stage 1 marked as
//! building, taking the argmax over the four damage classes of the damage
//! ensemble; everything else is background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_input, AugmentationConfig};
use crate::error::{Error, Result};
use crate::eval::f1_from_counts;
use crate::model::{ensemble_predict, EnsembleSpec, ProbMap};
use crate::raster::{BinaryMask, DamageClass, DamageMask, ImagePair, RasterImage};

/// Candidate thresholds for [`optimize_threshold`]: 0.05, 0.10, ..., 0.95.
pub fn threshold_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

/// Everything needed to run both stages.
#[derive(Clone, Debug)]
pub struct PipelineSpec {
    pub localization: EnsembleSpec,
    pub damage: EnsembleSpec,
    pub aug_config: AugmentationConfig,
    pub loc_threshold: f64,
}

impl PipelineSpec {
    pub fn new(
        localization: EnsembleSpec,
        damage: EnsembleSpec,
        aug_config: AugmentationConfig,
        loc_threshold: f64,
    ) -> Result<Self> {
        let spec = Self {
            localization,
            damage,
            aug_config,
            loc_threshold,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.localization.num_classes() != 2 || self.localization.in_channels() != 3 {
            return Err(Error::invalid(
                "localization ensemble must map 3 input channels to 2 classes",
            ));
        }
        if self.damage.num_classes() != 5 {
            return Err(Error::invalid("damage ensemble must output 5 classes"));
        }
        let width = self.aug_config.input_channels();
        if self.damage.in_channels() != width {
            return Err(Error::invalid(format!(
                "damage ensemble takes {} channels but augmentation '{}' builds {width}",
                self.damage.in_channels(),
                self.aug_config.mode
            )));
        }
        if !(0.0..=1.0).contains(&self.loc_threshold) {
            return Err(Error::invalid(format!(
                "localization threshold {} outside [0, 1]",
                self.loc_threshold
            )));
        }
        Ok(())
    }
}

/// Building mask from per-pixel building probabilities: `p >= threshold`.
pub fn threshold_building(building_prob: &[f64], width: usize, height: usize, threshold: f64) -> Result<BinaryMask> {
    BinaryMask::new(
        width,
        height,
        building_prob.iter().map(|p| u8::from(*p >= threshold)).collect(),
    )
}

/// Stage 1: building footprint from the pre-event image only.
pub fn localize(spec: &PipelineSpec, pre: &RasterImage) -> Result<BinaryMask> {
    let probs = ensemble_predict(&spec.localization, pre)?;
    threshold_building(&probs.class_plane(1), pre.width(), pre.height(), spec.loc_threshold)
}

/// Gates damage probabilities with a footprint: argmax over classes 1..=4
/// (ties to the lower class) where `loc_mask == 1`, background elsewhere.
pub fn gate_damage(probs: &ProbMap, loc_mask: &BinaryMask) -> Result<DamageMask> {
    if probs.classes != 5 {
        return Err(Error::invalid("damage probabilities need 5 classes"));
    }
    if !loc_mask.same_shape(probs.width, probs.height) {
        return Err(Error::invalid("localization mask and damage map differ in size"));
    }
    let labels = loc_mask
        .data()
        .iter()
        .enumerate()
        .map(|(p, m)| {
            if *m == 0 {
                return 0;
            }
            let px = probs.pixel(p);
            let mut best = 1;
            for k in 2..=4 {
                if px[k] > px[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    DamageMask::new(probs.width, probs.height, labels)
}

/// Stage 2: damage labels restricted to the localized footprint.
pub fn classify_damage(spec: &PipelineSpec, pair: &ImagePair, loc_mask: &BinaryMask) -> Result<DamageMask> {
    classify_with_input(spec, pair, loc_mask, None)
}

fn classify_with_input(
    spec: &PipelineSpec,
    pair: &ImagePair,
    loc_mask: &BinaryMask,
    prebuilt: Option<&RasterImage>,
) -> Result<DamageMask> {
    if !loc_mask.same_shape(pair.width(), pair.height()) {
        return Err(Error::invalid(format!(
            "localization mask is {}x{} but images are {}x{}",
            loc_mask.width(),
            loc_mask.height(),
            pair.width(),
            pair.height()
        )));
    }
    if loc_mask.data().iter().all(|v| *v == 0) {
        return Ok(DamageMask::zeros(pair.width(), pair.height()));
    }
    let probs = match prebuilt {
        Some(input) => ensemble_predict(&spec.damage, input)?,
        None => ensemble_predict(&spec.damage, &build_input(pair, &spec.aug_config)?)?,
    };
    gate_damage(&probs, loc_mask)
}

/// Localization followed by gated damage classification.
pub fn run_two_stage(spec: &PipelineSpec, pair: &ImagePair) -> Result<(BinaryMask, DamageMask)> {
    let loc = localize(spec, &pair.pre)?;
    let damage = classify_damage(spec, pair, &loc)?;
    Ok((loc, damage))
}

/// Same as [`run_two_stage`] with the damage model input already built.
pub fn run_two_stage_prebuilt(
    spec: &PipelineSpec,
    pair: &ImagePair,
    input: &RasterImage,
) -> Result<(BinaryMask, DamageMask)> {
    let loc = localize(spec, &pair.pre)?;
    let damage = classify_with_input(spec, pair, &loc, Some(input))?;
    Ok((loc, damage))
}

/// Grid search for the localization threshold given precomputed building
/// probabilities. Returns the lowest grid value reaching the best pooled F1.
pub fn optimize_threshold_from_probs(validation: &[(Vec<f64>, &BinaryMask)]) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::invalid("threshold search needs a non-empty validation set"));
    }
    for (probs, gt) in validation {
        if probs.len() != gt.data().len() {
            return Err(Error::invalid("probability map and mask differ in size"));
        }
    }
    let mut best = (f64::NEG_INFINITY, 0.0);
    for t in threshold_grid() {
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (probs, gt) in validation {
            for (p, g) in probs.iter().zip(gt.data()) {
                match (*p >= t, *g == 1) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => {}
                }
            }
        }
        let f1 = f1_from_counts(tp, fp, fneg);
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    Ok(best.1)
}

/// Localization threshold maximizing pooled F1 on `(pre image, footprint)` pairs.
pub fn optimize_threshold(ensemble: &EnsembleSpec, validation: &[(RasterImage, BinaryMask)]) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::invalid("threshold search needs a non-empty validation set"));
    }
    let probs = validation
        .iter()
        .map(|(img, gt)| Ok((ensemble_predict(ensemble, img)?.class_plane(1), gt)))
        .collect::<Result<Vec<_>>>()?;
    optimize_threshold_from_probs(&probs)
}

/// Crop window sampling settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSamplerConfig {
    pub crop_size: usize,
    /// Probability that a crop is forced to contain at least one Destroyed pixel.
    pub destroyed_bias: f64,
    pub seed: u64,
}

impl Default for CropSamplerConfig {
    fn default() -> Self {
        Self {
            crop_size: 32,
            destroyed_bias: 0.5,
            seed: 0,
        }
    }
}

/// Square crop windows over one label map, with the subset of windows
/// containing a Destroyed pixel precomputed.
#[derive(Clone, Debug)]
pub struct WindowSampler {
    cols: usize,
    rows: usize,
    destroyed: Vec<(usize, usize)>,
}

impl WindowSampler {
    pub fn new(labels: &[u8], width: usize, height: usize, crop_size: usize) -> Result<Self> {
        if crop_size == 0 || crop_size > width || crop_size > height {
            return Err(Error::invalid(format!(
                "crop size {crop_size} does not fit a {width}x{height} image"
            )));
        }
        if labels.len() != width * height {
            return Err(Error::invalid("label map size mismatch"));
        }
        // Summed-area table of Destroyed pixels.
        let mut sat = vec![0u32; (width + 1) * (height + 1)];
        for y in 0..height {
            for x in 0..width {
                let v = u32::from(labels[y * width + x] == DamageClass::Destroyed.label());
                sat[(y + 1) * (width + 1) + x + 1] =
                    v + sat[y * (width + 1) + x + 1] + sat[(y + 1) * (width + 1) + x] - sat[y * (width + 1) + x];
            }
        }
        let (cols, rows) = (width - crop_size + 1, height - crop_size + 1);
        let s = crop_size;
        let mut destroyed = Vec::new();
        for y in 0..rows {
            for x in 0..cols {
                let at = |yy: usize, xx: usize| sat[yy * (width + 1) + xx];
                if at(y + s, x + s) + at(y, x) > at(y, x + s) + at(y + s, x) {
                    destroyed.push((x, y));
                }
            }
        }
        Ok(Self { cols, rows, destroyed })
    }

    pub fn window_count(&self) -> usize {
        self.cols * self.rows
    }

    pub fn destroyed_windows(&self) -> &[(usize, usize)] {
        &self.destroyed
    }

    /// Top-left corner of one window. Always consumes two draws from `rng`.
    pub fn draw(&self, destroyed_bias: f64, rng: &mut impl Rng) -> (usize, usize) {
        let forced = rng.random::<f64>() < destroyed_bias;
        if forced && !self.destroyed.is_empty() {
            self.destroyed[rng.random_range(0..self.destroyed.len())]
        } else {
            let k = rng.random_range(0..self.window_count());
            (k % self.cols, k / self.cols)
        }
    }
}

/// A sampled training crop.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub x0: usize,
    pub y0: usize,
    pub pair: ImagePair,
    pub target: DamageMask,
    pub footprint: BinaryMask,
}

/// Draws `n` crops, Destroyed-biased per `cfg`, deterministic in `cfg.seed`.
pub fn sample_crops(pair: &ImagePair, gt: &DamageMask, cfg: &CropSamplerConfig, n: usize) -> Result<Vec<Crop>> {
    if n == 0 {
        return Err(Error::invalid("need at least one crop"));
    }
    if !gt.same_shape(pair.width(), pair.height()) {
        return Err(Error::invalid("mask and images differ in size"));
    }
    let sampler = WindowSampler::new(gt.data(), gt.width(), gt.height(), cfg.crop_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.crop_size;
    (0..n)
        .map(|_| {
            let (x0, y0) = sampler.draw(cfg.destroyed_bias, &mut rng);
            let target = gt.crop(x0, y0, s, s);
            Ok(Crop {
                x0,
                y0,
                pair: ImagePair::new(pair.pre.crop(x0, y0, s, s), pair.post.crop(x0, y0, s, s))?,
                footprint: target.footprint(),
                target,
            })
        })
        .collect()
}
