//! A small encoder-decoder segmentation network trained from scratch.
//!
//! The network is U-Net shaped: `depth` encoder blocks (3x3 conv, ReLU,
//! 2x2 max pool), a 3x3 bottleneck, `depth` decoder blocks (nearest
//! upsample, concatenation with the matching encoder output, 3x3 conv, ReLU)
//! and a 1x1 head producing per-pixel class logits. Encoder level `i` has
//! `base_width * 2^i` features. Input values are mapped from [0, 1] to
//! [-1, 1] before the first convolution.
//!
//! Weights live in one flat `f64` vector described by a named layout, which
//! keeps checkpointing and gradient checking simple.

mod checkpoint;
mod layers;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;
use layers::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use train::{train, TrainHyper, TrainSample};

/// Architecture and seed of one network.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// 2 for localization, 5 for damage (background included).
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::invalid("model needs at least one input channel"));
        }
        if self.num_classes != 2 && self.num_classes != 5 {
            return Err(Error::invalid(format!(
                "num_classes must be 2 or 5, got {}",
                self.num_classes
            )));
        }
        if self.depth == 0 || self.base_width == 0 {
            return Err(Error::invalid("depth and base_width must be at least 1"));
        }
        Ok(())
    }

    /// Smallest spatial size the network accepts.
    pub fn min_input_size(&self) -> usize {
        1 << self.depth
    }

    fn convs(&self) -> Vec<ConvSpec> {
        let width = |i: usize| self.base_width << i;
        let mut convs = Vec::with_capacity(2 * self.depth + 2);
        for i in 0..self.depth {
            let in_c = if i == 0 { self.in_channels } else { width(i - 1) };
            convs.push(ConvSpec::new(format!("enc{i}"), in_c, width(i), 3));
        }
        convs.push(ConvSpec::new(
            "bottleneck".into(),
            width(self.depth - 1),
            width(self.depth),
            3,
        ));
        for i in (0..self.depth).rev() {
            convs.push(ConvSpec::new(format!("dec{i}"), width(i + 1) + width(i), width(i), 3));
        }
        convs.push(ConvSpec::new("head".into(), width(0), self.num_classes, 1));
        convs
    }

    /// Named parameter blocks in storage order.
    pub fn layout(&self) -> Vec<ParamBlock> {
        let mut offset = 0;
        let mut blocks = Vec::new();
        for conv in self.convs() {
            for (suffix, shape) in [
                ("weight", vec![conv.out_c, conv.in_c, conv.k, conv.k]),
                ("bias", vec![conv.out_c]),
            ] {
                let len: usize = shape.iter().product();
                blocks.push(ParamBlock {
                    name: format!("{}.{suffix}", conv.name),
                    shape,
                    offset,
                });
                offset += len;
            }
        }
        blocks
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(ParamBlock::len).sum()
    }
}

#[derive(Clone, Debug)]
struct ConvSpec {
    name: String,
    in_c: usize,
    out_c: usize,
    k: usize,
}

impl ConvSpec {
    fn new(name: String, in_c: usize, out_c: usize, k: usize) -> Self {
        Self { name, in_c, out_c, k }
    }

    fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }

    fn len(&self) -> usize {
        self.weight_len() + self.out_c
    }

    fn fan_in(&self) -> usize {
        self.in_c * self.k * self.k
    }
}

/// A named slice of the flat weight vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

/// Trainable weights plus everything needed to interpret them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub layout: Vec<ParamBlock>,
    pub weights: Vec<f64>,
    pub domain: DomainTag,
    pub meta: TrainingMeta,
}

impl ModelCheckpoint {
    /// Checks layout consistency and weight finiteness.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layout != self.config.layout() {
            return Err(Error::Checkpoint("layout does not match the model config".into()));
        }
        let expected = self.config.parameter_count();
        if self.weights.len() != expected {
            return Err(Error::Checkpoint(format!(
                "weight vector has {} entries, layout needs {expected}",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Checkpoint("non-finite weight".into()));
        }
        Ok(())
    }

    pub fn with_domain(mut self, domain: DomainTag) -> Self {
        self.domain = domain;
        self
    }
}

/// Standard deviation of the He-normal initializer for each weight entry
/// (biases start at zero and report 0).
pub fn init_std(config: &ModelConfig) -> Vec<f64> {
    let mut std = Vec::with_capacity(config.parameter_count());
    for conv in config.convs() {
        let s = (2.0 / conv.fan_in() as f64).sqrt();
        std.extend(std::iter::repeat_n(s, conv.weight_len()));
        std.extend(std::iter::repeat_n(0.0, conv.out_c));
    }
    std
}

/// Fresh He-normal initialized network, deterministic in `config.seed`.
pub fn init_model(config: &ModelConfig) -> Result<ModelCheckpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weights = init_std(config)
        .into_iter()
        .map(|s| {
            if s == 0.0 {
                0.0
            } else {
                Normal::new(0.0, s).expect("positive std").sample(&mut rng)
            }
        })
        .collect();
    Ok(ModelCheckpoint {
        layout: config.layout(),
        config: config.clone(),
        weights,
        domain: DomainTag::Source,
        meta: TrainingMeta::default(),
    })
}

/// Per-pixel class probabilities, pixel-major: `data[p * classes + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * classes {
            return Err(Error::invalid("probability map length mismatch"));
        }
        Ok(Self {
            width,
            height,
            classes,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.classes..(p + 1) * self.classes]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Probability of class `k` at every pixel.
    pub fn class_plane(&self, k: usize) -> Vec<f64> {
        self.data.iter().skip(k).step_by(self.classes).copied().collect()
    }
}

fn softmax_planar(logits: &Tensor) -> ProbMap {
    let (c, hw) = (logits.c, logits.h * logits.w);
    let mut data = vec![0.0; c * hw];
    for p in 0..hw {
        let max = (0..c).map(|k| logits.data[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..c {
            let e = (logits.data[k * hw + p] - max).exp();
            data[p * c + k] = e;
            sum += e;
        }
        for v in &mut data[p * c..(p + 1) * c] {
            *v /= sum;
        }
    }
    ProbMap {
        width: logits.w,
        height: logits.h,
        classes: c,
        data,
    }
}

fn to_planar(input: &RasterImage) -> Tensor {
    let planes: Vec<f64> = (0..input.channels()).flat_map(|c| input.plane(c)).map(|v| 2.0 * v - 1.0).collect();
    Tensor {
        c: input.channels(),
        h: input.height(),
        w: input.width(),
        data: planes,
    }
}

/// Activations kept for the backward pass, indexed like `convs()`.
struct Trace {
    inputs: Vec<Tensor>,
    /// Post-ReLU outputs; empty for the head.
    outputs: Vec<Tensor>,
    pool_args: Vec<Vec<usize>>,
    probs: ProbMap,
}

struct Net<'a> {
    convs: Vec<ConvSpec>,
    offsets: Vec<usize>,
    weights: &'a [f64],
    depth: usize,
}

impl<'a> Net<'a> {
    fn new(ckpt: &'a ModelCheckpoint) -> Self {
        let convs = ckpt.config.convs();
        let mut off = 0;
        let offsets = convs
            .iter()
            .map(|c| {
                let o = off;
                off += c.len();
                o
            })
            .collect();
        Self {
            convs,
            offsets,
            weights: &ckpt.weights,
            depth: ckpt.config.depth,
        }
    }

    fn params(&self, idx: usize) -> (&[f64], &[f64]) {
        let spec = &self.convs[idx];
        let o = self.offsets[idx];
        (
            &self.weights[o..o + spec.weight_len()],
            &self.weights[o + spec.weight_len()..o + spec.len()],
        )
    }

    fn apply(&self, idx: usize, x: &Tensor, relu: bool) -> Tensor {
        let spec = &self.convs[idx];
        let (w, b) = self.params(idx);
        let mut y = layers::conv_forward(x, w, b, spec.out_c, spec.k);
        if relu {
            layers::relu_inplace(&mut y);
        }
        y
    }

    fn forward(&self, input: Tensor) -> Trace {
        let d = self.depth;
        let head = self.convs.len() - 1;
        let mut inputs = Vec::with_capacity(head + 1);
        let mut outputs: Vec<Tensor> = Vec::with_capacity(head + 1);
        let mut pool_args = Vec::with_capacity(d);
        let mut x = input;
        for i in 0..d {
            let s = self.apply(i, &x, true);
            let (p, arg) = layers::maxpool_forward(&s);
            inputs.push(x);
            outputs.push(s);
            pool_args.push(arg);
            x = p;
        }
        let mut y = self.apply(d, &x, true);
        inputs.push(x);
        for idx in d + 1..head {
            let skip = &outputs[2 * d - idx];
            let cat = Tensor::concat(&layers::upsample_forward(&y, skip.h, skip.w), skip);
            outputs.push(y);
            y = self.apply(idx, &cat, true);
            inputs.push(cat);
        }
        let logits = self.apply(head, &y, false);
        outputs.push(y.clone());
        inputs.push(y);
        Trace {
            inputs,
            outputs,
            pool_args,
            probs: softmax_planar(&logits),
        }
    }

    fn conv_back(&self, trace: &Trace, idx: usize, g: &Tensor, grad: &mut [f64], want_input: bool) -> Option<Tensor> {
        let spec = &self.convs[idx];
        let o = self.offsets[idx];
        let (gw, gb) = grad[o..o + spec.len()].split_at_mut(spec.weight_len());
        let (w, _) = self.params(idx);
        layers::conv_backward(&trace.inputs[idx], w, g, spec.k, gw, gb, want_input)
    }

    /// Backpropagates planar logit gradients into a flat weight gradient.
    fn backward(&self, trace: &Trace, grad_logits: Tensor) -> Vec<f64> {
        let d = self.depth;
        let head = self.convs.len() - 1;
        let mut grad = vec![0.0; self.weights.len()];
        let mut g = self
            .conv_back(trace, head, &grad_logits, &mut grad, true)
            .expect("head input gradient");
        let mut skip_grads: Vec<Option<Tensor>> = (0..d).map(|_| None).collect();
        for idx in (d + 1..head).rev() {
            let level = 2 * d - idx;
            layers::relu_backward(&trace.outputs[idx], &mut g);
            let gcat = self.conv_back(trace, idx, &g, &mut grad, true).expect("decoder input gradient");
            let up_c = trace.inputs[idx].c - trace.outputs[level].c;
            let (gup, gskip) = gcat.split(up_c);
            skip_grads[level] = Some(gskip);
            let below = &trace.outputs[idx - 1];
            g = layers::upsample_backward(&gup, below.h, below.w);
        }
        layers::relu_backward(&trace.outputs[d], &mut g);
        g = self
            .conv_back(trace, d, &g, &mut grad, true)
            .expect("bottleneck input gradient");
        for level in (0..d).rev() {
            let s = &trace.outputs[level];
            let mut gs = layers::maxpool_backward(&g, &trace.pool_args[level], s.c, s.h, s.w);
            if let Some(extra) = skip_grads[level].take() {
                for (a, b) in gs.data.iter_mut().zip(&extra.data) {
                    *a += b;
                }
            }
            layers::relu_backward(s, &mut gs);
            match self.conv_back(trace, level, &gs, &mut grad, level > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
        grad
    }
}

fn check_input(ckpt: &ModelCheckpoint, input: &RasterImage) -> Result<()> {
    if input.channels() != ckpt.config.in_channels {
        return Err(Error::invalid(format!(
            "model expects {} input channels, got {}",
            ckpt.config.in_channels,
            input.channels()
        )));
    }
    let min = ckpt.config.min_input_size();
    if input.width() < min || input.height() < min {
        return Err(Error::invalid(format!(
            "input {}x{} smaller than the {min}x{min} minimum for depth {}",
            input.width(),
            input.height(),
            ckpt.config.depth
        )));
    }
    if ckpt.weights.len() != ckpt.config.parameter_count() {
        return Err(Error::invalid("checkpoint weights do not match its layout"));
    }
    Ok(())
}

/// Per-pixel class probabilities (softmax over the logits).
pub fn forward(ckpt: &ModelCheckpoint, input: &RasterImage) -> Result<ProbMap> {
    check_input(ckpt, input)?;
    Ok(Net::new(ckpt).forward(to_planar(input)).probs)
}

/// Loss value with its gradient with respect to the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Pixel-major like [`ProbMap::data`].
    pub grad_logits: Vec<f64>,
    pub contributing: usize,
}

/// Mean negative log-probability of the target label over contributing
/// pixels (all pixels, or those with `mask == 1`). No contributing pixels
/// yields loss 0 with a zero gradient.
pub fn masked_cross_entropy(pred: &ProbMap, target: &[u8], mask: Option<&[u8]>) -> Result<LossOutput> {
    let n = pred.pixel_count();
    if target.len() != n || mask.is_some_and(|m| m.len() != n) {
        return Err(Error::invalid("loss target/mask shape does not match prediction"));
    }
    if let Some(t) = target.iter().find(|t| **t as usize >= pred.classes) {
        return Err(Error::invalid(format!("target label {t} out of range for {} classes", pred.classes)));
    }
    let contributes = |p: usize| mask.is_none_or(|m| m[p] != 0);
    let count = (0..n).filter(|p| contributes(*p)).count();
    let mut grad = vec![0.0; pred.data.len()];
    if count == 0 {
        return Ok(LossOutput {
            loss: 0.0,
            grad_logits: grad,
            contributing: 0,
        });
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    for p in (0..n).filter(|p| contributes(*p)) {
        let t = target[p] as usize;
        let probs = pred.pixel(p);
        loss -= probs[t].ln();
        for (k, pk) in probs.iter().enumerate() {
            let onehot = if k == t { 1.0 } else { 0.0 };
            grad[p * pred.classes + k] = (pk - onehot) * scale;
        }
    }
    Ok(LossOutput {
        loss: loss * scale,
        grad_logits: grad,
        contributing: count,
    })
}

/// Loss of one sample and its gradient with respect to every weight.
pub fn loss_and_grad(
    ckpt: &ModelCheckpoint,
    input: &RasterImage,
    target: &[u8],
    mask: Option<&[u8]>,
) -> Result<(f64, Vec<f64>)> {
    check_input(ckpt, input)?;
    let net = Net::new(ckpt);
    let trace = net.forward(to_planar(input));
    let out = masked_cross_entropy(&trace.probs, target, mask)?;
    let (c, h, w) = (ckpt.config.num_classes, input.height(), input.width());
    let hw = h * w;
    let mut planar = Tensor::zeros(c, h, w);
    for p in 0..hw {
        for k in 0..c {
            planar.data[k * hw + p] = out.grad_logits[p * c + k];
        }
    }
    Ok((out.loss, net.backward(&trace, planar)))
}

/// A set of checkpoints whose probabilities are averaged at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSpec {
    members: Vec<ModelCheckpoint>,
    /// Set when the ensemble is a source ensemble applied without adaptation.
    pub zero_shot: bool,
}

impl EnsembleSpec {
    pub fn new(members: Vec<ModelCheckpoint>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::invalid("ensemble needs at least one member"))?;
        let (c, k) = (first.config.in_channels, first.config.num_classes);
        if members
            .iter()
            .any(|m| m.config.in_channels != c || m.config.num_classes != k)
        {
            return Err(Error::invalid(
                "ensemble members must share input channels and class count",
            ));
        }
        Ok(Self {
            members,
            zero_shot: false,
        })
    }

    pub fn members(&self) -> &[ModelCheckpoint] {
        &self.members
    }

    pub fn into_members(self) -> Vec<ModelCheckpoint> {
        self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn in_channels(&self) -> usize {
        self.members[0].config.in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].config.num_classes
    }

    /// Domain of the members, if they all agree.
    pub fn domain(&self) -> Option<DomainTag> {
        let d = self.members[0].domain;
        self.members.iter().all(|m| m.domain == d).then_some(d)
    }
}

/// Mean of the members' probability maps.
///
/// Each pixel/class mean sums the member values in ascending order, so the
/// result is bitwise independent of member order.
pub fn ensemble_predict(ensemble: &EnsembleSpec, input: &RasterImage) -> Result<ProbMap> {
    let maps: Vec<ProbMap> = ensemble
        .members
        .par_iter()
        .map(|m| forward(m, input))
        .collect::<Result<_>>()?;
    average_maps(&maps)
}

/// Order-independent mean of equally shaped probability maps.
pub fn average_maps(maps: &[ProbMap]) -> Result<ProbMap> {
    let first = maps.first().ok_or_else(|| Error::invalid("nothing to average"))?;
    if maps
        .iter()
        .any(|m| m.width != first.width || m.height != first.height || m.classes != first.classes)
    {
        return Err(Error::invalid("cannot average maps of different shapes"));
    }
    if maps.len() == 1 {
        return Ok(first.clone());
    }
    let k = maps.len() as f64;
    let mut vals = vec![0.0; maps.len()];
    let data = (0..first.data.len())
        .map(|i| {
            for (v, m) in vals.iter_mut().zip(maps) {
                *v = m.data[i];
            }
            vals.sort_by(f64::total_cmp);
            vals.iter().sum::<f64>() / k
        })
        .collect();
    Ok(ProbMap { data, ..*first })
}

#[cfg(test)]
mod tests;
