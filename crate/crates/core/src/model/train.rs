//! Minibatch SGD over random crops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_grad, ModelCheckpoint, TrainingMeta};
use crate::error::{Error, Result};
use crate::pipeline::WindowSampler;
use crate::raster::RasterImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub crop_size: usize,
    pub batch_size: usize,
    /// Crops drawn from every sample per epoch.
    pub crops_per_sample: usize,
    /// Probability that a crop is forced to contain a Destroyed pixel.
    pub destroyed_bias: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.15,
            epochs: 20,
            crop_size: 32,
            batch_size: 4,
            crops_per_sample: 4,
            destroyed_bias: 0.5,
            seed: 0,
        }
    }
}

/// One training image: model input, per-pixel labels and an optional loss mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub input: RasterImage,
    pub target: Vec<u8>,
    pub mask: Option<Vec<u8>>,
}

fn crop_labels(labels: &[u8], width: usize, x0: usize, y0: usize, size: usize) -> Vec<u8> {
    (y0..y0 + size)
        .flat_map(|y| labels[y * width + x0..y * width + x0 + size].iter().copied())
        .collect()
}

fn validate(ckpt: &ModelCheckpoint, samples: &[TrainSample], hyper: &TrainHyper) -> Result<()> {
    ckpt.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training needs at least one sample"));
    }
    if hyper.batch_size == 0 || hyper.crops_per_sample == 0 {
        return Err(Error::invalid("batch_size and crops_per_sample must be positive"));
    }
    if !(hyper.learning_rate >= 0.0 && hyper.learning_rate.is_finite()) {
        return Err(Error::invalid("learning rate must be finite and >= 0"));
    }
    if hyper.crop_size < ckpt.config.min_input_size() {
        return Err(Error::invalid(format!(
            "crop size {} below the network minimum {}",
            hyper.crop_size,
            ckpt.config.min_input_size()
        )));
    }
    for s in samples {
        let (w, h) = (s.input.width(), s.input.height());
        if s.input.channels() != ckpt.config.in_channels {
            return Err(Error::invalid(format!(
                "sample has {} channels, model expects {}",
                s.input.channels(),
                ckpt.config.in_channels
            )));
        }
        if s.target.len() != w * h || s.mask.as_ref().is_some_and(|m| m.len() != w * h) {
            return Err(Error::invalid("sample target/mask shape does not match its input"));
        }
        if hyper.crop_size > w || hyper.crop_size > h {
            return Err(Error::invalid(format!(
                "crop size {} exceeds sample size {w}x{h}",
                hyper.crop_size
            )));
        }
    }
    Ok(())
}

/// Trains a copy of `ckpt` with plain SGD on the masked cross-entropy.
///
/// Every epoch visits the samples in a shuffled order and draws
/// `crops_per_sample` windows from each (Destroyed-biased, see
/// [`WindowSampler`]); consecutive crops form minibatches whose mean gradient
/// drives one update. The trajectory is a pure function of the inputs and
/// `hyper.seed`.
pub fn train(ckpt: &ModelCheckpoint, samples: &[TrainSample], hyper: &TrainHyper) -> Result<ModelCheckpoint> {
    if hyper.epochs == 0 {
        return Ok(ckpt.clone());
    }
    let mut out = ckpt.clone();
    validate(ckpt, samples, hyper)?;
    let samplers: Vec<WindowSampler> = samples
        .iter()
        .map(|s| WindowSampler::new(&s.target, s.input.width(), s.input.height(), hyper.crop_size))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let size = hyper.crop_size;
    let mut step = ckpt.meta.steps;
    let mut epoch_loss = 0.0;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut crops = Vec::with_capacity(samples.len() * hyper.crops_per_sample);
        for &i in &order {
            for _ in 0..hyper.crops_per_sample {
                crops.push((i, samplers[i].draw(hyper.destroyed_bias, &mut rng)));
            }
        }
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for batch in crops.chunks(hyper.batch_size) {
            let mut grad = vec![0.0; out.weights.len()];
            let mut batch_loss = 0.0;
            for &(i, (x0, y0)) in batch {
                let s = &samples[i];
                let w = s.input.width();
                let input = s.input.crop(x0, y0, size, size);
                let target = crop_labels(&s.target, w, x0, y0, size);
                let mask = s.mask.as_ref().map(|m| crop_labels(m, w, x0, y0, size));
                let (loss, g) = loss_and_grad(&out, &input, &target, mask.as_deref())?;
                batch_loss += loss;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { step });
            }
            let scale = hyper.learning_rate / batch.len() as f64;
            if scale != 0.0 {
                for (w, g) in out.weights.iter_mut().zip(&grad) {
                    *w -= scale * g;
                }
            }
            loss_sum += batch_loss / batch.len() as f64;
            batches += 1;
            step += 1;
        }
        epoch_loss = loss_sum / batches as f64;
    }
    if out.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::TrainingDiverged { step });
    }
    out.meta = TrainingMeta {
        epochs: ckpt.meta.epochs + hyper.epochs,
        steps: step,
        final_loss: Some(epoch_loss),
    };
    Ok(out)
}
