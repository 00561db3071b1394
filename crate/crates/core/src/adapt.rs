//! Source pretraining, supervised fine-tuning on the target domain, and the
//! zero-shot (no adaptation) baseline.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{build_input, AugmentationConfig};
use crate::error::{Error, Result};
use crate::model::{init_model, train, DomainTag, EnsembleSpec, ModelCheckpoint, ModelConfig, TrainHyper, TrainSample};
use crate::raster::{DamageMask, ImagePair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdaptationMode {
    #[serde(rename = "sda")]
    SupervisedDA,
    #[serde(rename = "noda")]
    NoDA,
}

impl AdaptationMode {
    /// Suffix used in report rows.
    pub fn label(self) -> &'static str {
        match self {
            AdaptationMode::SupervisedDA => "DA",
            AdaptationMode::NoDA => "w/o DA",
        }
    }
}

impl fmt::Display for AdaptationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaptationMode::SupervisedDA => "sda",
            AdaptationMode::NoDA => "noda",
        })
    }
}

impl FromStr for AdaptationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sda" | "da" | "supervised" => Ok(AdaptationMode::SupervisedDA),
            "noda" | "none" | "zero-shot" => Ok(AdaptationMode::NoDA),
            other => Err(Error::invalid(format!("unknown adaptation mode '{other}' (expected sda or noda)"))),
        }
    }
}

/// Stage-2 training samples: augmented input, damage labels, loss restricted
/// to ground-truth building pixels.
pub fn damage_samples(split: &[(ImagePair, DamageMask)], aug: &AugmentationConfig) -> Result<Vec<TrainSample>> {
    split
        .par_iter()
        .map(|(pair, mask)| {
            Ok(TrainSample {
                input: build_input(pair, aug)?,
                target: mask.data().to_vec(),
                mask: Some(mask.footprint().data().to_vec()),
            })
        })
        .collect()
}

/// Stage-1 training samples: pre image, building footprint, no loss mask.
pub fn localization_samples(split: &[(ImagePair, DamageMask)]) -> Vec<TrainSample> {
    split
        .iter()
        .map(|(pair, mask)| TrainSample {
            input: pair.pre.clone(),
            target: mask.footprint().data().to_vec(),
            mask: None,
        })
        .collect()
}

/// Trains one freshly initialized network on source data.
pub fn pretrain_source(config: &ModelConfig, source_train: &[TrainSample], hyper: &TrainHyper) -> Result<ModelCheckpoint> {
    if source_train.is_empty() {
        return Err(Error::invalid("source pretraining needs a non-empty training set"));
    }
    let init = init_model(config)?;
    Ok(train(&init, source_train, hyper)?.with_domain(DomainTag::Source))
}

/// `members` source networks; member `i` uses model seed `config.seed + i`
/// and training seed `hyper.seed + i`.
pub fn pretrain_ensemble(
    config: &ModelConfig,
    members: usize,
    source_train: &[TrainSample],
    hyper: &TrainHyper,
) -> Result<EnsembleSpec> {
    if members == 0 {
        return Err(Error::invalid("ensemble needs at least one member"));
    }
    let ckpts = (0..members as u64)
        .into_par_iter()
        .map(|i| {
            let cfg = ModelConfig { seed: config.seed.wrapping_add(i), ..config.clone() };
            let h = TrainHyper { seed: hyper.seed.wrapping_add(i), ..hyper.clone() };
            pretrain_source(&cfg, source_train, &h)
        })
        .collect::<Result<Vec<_>>>()?;
    EnsembleSpec::new(ckpts)
}

/// Inputs of one adaptation run.
#[derive(Clone, Debug)]
pub struct AdaptationPlan<'a> {
    pub source: EnsembleSpec,
    pub target_train: &'a [TrainSample],
    pub hyper: TrainHyper,
    pub mode: AdaptationMode,
}

/// Continues every source member on the target training split. Member `i`
/// trains with seed `hyper.seed + i`; order and architectures are kept.
pub fn finetune(plan: &AdaptationPlan) -> Result<EnsembleSpec> {
    if plan.mode == AdaptationMode::NoDA {
        return Err(Error::invalid("fine-tuning requested in no-DA mode; use zero_shot"));
    }
    if plan.target_train.is_empty() {
        return Err(Error::invalid("supervised adaptation needs a non-empty target training split"));
    }
    let members = plan
        .source
        .members()
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let h = TrainHyper { seed: plan.hyper.seed.wrapping_add(i as u64), ..plan.hyper.clone() };
            Ok(train(m, plan.target_train, &h)?.with_domain(DomainTag::Target))
        })
        .collect::<Result<Vec<_>>>()?;
    EnsembleSpec::new(members)
}

/// The source ensemble as-is, flagged as the no-adaptation baseline.
pub fn zero_shot(source: &EnsembleSpec) -> EnsembleSpec {
    let mut out = source.clone();
    out.zero_shot = true;
    out
}

/// Fine-tuning hyperparameters derived from pretraining: a tenth of the
/// learning rate, other settings unchanged.
pub fn default_finetune_hyper(pretrain: &TrainHyper) -> TrainHyper {
    TrainHyper {
        learning_rate: pretrain.learning_rate * 0.1,
        ..pretrain.clone()
    }
}
