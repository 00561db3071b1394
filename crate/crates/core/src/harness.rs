//! Experiment orchestration: dataset generation, training, adaptation,
//! inference, evaluation and the augmentation ablation matrix.
//!
//! Every command is a pure function of its configuration and inputs, so
//! repeated invocations write byte-identical reports, manifests and masks.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{
    damage_samples, default_finetune_hyper, finetune, localization_samples, pretrain_ensemble, zero_shot,
    AdaptationMode, AdaptationPlan,
};
use crate::augment::{build_input, AugMode, AugmentationConfig, Component};
use crate::data::{
    build_dataset_with, read_mask, render_mask, write_image, write_mask, DatasetManifest, DomainShiftSpec,
    ManifestEntry, SceneSpec, Split, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_predictions, format_table, F1Report, COLUMN_NAMES};
use crate::model::{
    load_checkpoint, save_checkpoint, DomainTag, EnsembleSpec, ModelConfig, TrainHyper,
};
use crate::pipeline::{optimize_threshold, run_two_stage_prebuilt, PipelineSpec};
use crate::raster::{DamageMask, ImagePair, RasterImage};

pub const PIPELINE_FILE: &str = "pipeline.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

type Split3 = Vec<(ImagePair, DamageMask)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub base_width: usize,
    pub depth: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self { base_width: 8, depth: 2 }
    }
}

/// Scene counts and generator settings used by `generate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub source_scenes: usize,
    pub target_scenes: usize,
    pub scene: SceneSpec,
    pub shift: DomainShiftSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source_scenes: 40,
            target_scenes: 60,
            scene: SceneSpec::default(),
            shift: DomainShiftSpec::default(),
        }
    }
}

/// One row of the ablation matrix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationCell {
    pub aug: AugMode,
    pub mode: AdaptationMode,
}

impl AblationCell {
    pub fn new(aug: AugMode, mode: AdaptationMode) -> Self {
        Self { aug, mode }
    }

    pub fn label(&self) -> String {
        format!("Two-Stage Ensemble + {} + {}", self.aug.label(), self.mode.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixPreset {
    /// Adaptation study: RGB, Fusion and RGB + Fusion with adaptation, Fusion without.
    Adaptation,
    /// Component study: every augmentation configuration with adaptation.
    Components,
    /// Union of both, in that order.
    Full,
}

impl MatrixPreset {
    pub fn cells(self) -> Vec<AblationCell> {
        use AdaptationMode::{NoDA, SupervisedDA};
        use Component::{Contrast, Edges, Unsharp};
        let adaptation = vec![
            AblationCell::new(AugMode::RgbOnly, SupervisedDA),
            AblationCell::new(AugMode::FusionOnly, SupervisedDA),
            AblationCell::new(AugMode::RgbPlusFusion, SupervisedDA),
            AblationCell::new(AugMode::FusionOnly, NoDA),
        ];
        let components: Vec<AblationCell> = [
            AugMode::rgb_plus(&[Contrast]),
            AugMode::rgb_plus(&[Unsharp]),
            AugMode::rgb_plus(&[Edges]),
            AugMode::rgb_plus(&[Contrast, Edges]),
            AugMode::rgb_plus(&[Unsharp, Edges]),
            AugMode::rgb_plus(&[Unsharp, Contrast]),
            AugMode::FusionOnly,
            AugMode::RgbPlusFusion,
        ]
        .into_iter()
        .map(|a| AblationCell::new(a, SupervisedDA))
        .collect();
        match self {
            MatrixPreset::Adaptation => adaptation,
            MatrixPreset::Components => components,
            MatrixPreset::Full => {
                let mut all = adaptation;
                for c in components {
                    if !all.contains(&c) {
                        all.push(c);
                    }
                }
                all
            }
        }
    }
}

/// Either a named preset or an explicit list of cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Matrix {
    Preset(MatrixPreset),
    Cells(Vec<AblationCell>),
}

impl Matrix {
    pub fn cells(&self) -> Vec<AblationCell> {
        match self {
            Matrix::Preset(p) => p.cells(),
            Matrix::Cells(c) => c.clone(),
        }
    }
}

/// Single JSON document holding every tunable of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Dataset, initialization and (added to each hyper's own seed) training seed.
    pub seed: u64,
    pub matrix: Matrix,
    /// Augmentation used by `train`; its operator parameters also apply to every matrix cell.
    pub augmentation: AugmentationConfig,
    /// Adaptation used by `finetune`.
    pub mode: AdaptationMode,
    pub model: ModelShape,
    pub ensemble_size: usize,
    pub pretrain: TrainHyper,
    pub finetune: TrainHyper,
    pub dataset: DatasetConfig,
    /// Share source ensembles between ablation cells with equal keys.
    pub cache: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let pretrain = TrainHyper::default();
        Self {
            manifest: None,
            out_dir: None,
            seed: 0,
            matrix: Matrix::Preset(MatrixPreset::Full),
            augmentation: AugmentationConfig::new(AugMode::RgbOnly),
            mode: AdaptationMode::SupervisedDA,
            model: ModelShape::default(),
            ensemble_size: 3,
            finetune: TrainHyper {
                epochs: 10,
                ..default_finetune_hyper(&pretrain)
            },
            pretrain,
            dataset: DatasetConfig::default(),
            cache: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(Error::invalid("ensemble_size must be at least 1"));
        }
        if self.model.base_width == 0 || self.model.depth == 0 {
            return Err(Error::invalid("model base_width and depth must be at least 1"));
        }
        self.augmentation.validate()?;
        let cells = self.matrix.cells();
        let unique: HashSet<&AblationCell> = cells.iter().collect();
        if unique.len() != cells.len() {
            return Err(Error::invalid("ablation matrix lists the same (augmentation, mode) cell twice"));
        }
        Ok(())
    }

    fn loc_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            num_classes: 2,
            base_width: self.model.base_width,
            depth: self.model.depth,
            seed: self.seed,
        }
    }

    fn damage_config(&self, aug: &AugmentationConfig) -> ModelConfig {
        ModelConfig {
            in_channels: aug.input_channels(),
            num_classes: 5,
            base_width: self.model.base_width,
            depth: self.model.depth,
            seed: self.seed.wrapping_add(1000),
        }
    }

    fn seeded(&self, hyper: &TrainHyper) -> TrainHyper {
        TrainHyper {
            seed: hyper.seed.wrapping_add(self.seed),
            ..hyper.clone()
        }
    }

    /// The augmentation of a matrix row, with the shared operator parameters.
    pub fn cell_augmentation(&self, aug: &AugMode) -> AugmentationConfig {
        AugmentationConfig {
            mode: aug.clone(),
            ..self.augmentation.clone()
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PipelineFile {
    aug_config: AugmentationConfig,
    loc_threshold: f64,
    zero_shot: bool,
    localization: Vec<String>,
    damage: Vec<String>,
}

/// Writes the ensembles' checkpoints and `pipeline.json` into `dir`.
pub fn save_pipeline(spec: &PipelineSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |prefix: &str, ens: &EnsembleSpec| -> Result<Vec<String>> {
        ens.members()
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let name = format!("{prefix}_{i}.ckpt");
                save_checkpoint(m, &dir.join(&name))?;
                Ok(name)
            })
            .collect()
    };
    let file = PipelineFile {
        aug_config: spec.aug_config.clone(),
        loc_threshold: spec.loc_threshold,
        zero_shot: spec.damage.zero_shot,
        localization: write("localization", &spec.localization)?,
        damage: write("damage", &spec.damage)?,
    };
    let path = dir.join(PIPELINE_FILE);
    let text = serde_json::to_string_pretty(&file).expect("pipeline serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_pipeline(dir: &Path) -> Result<PipelineSpec> {
    let path = dir.join(PIPELINE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: PipelineFile = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let load = |names: &[String]| -> Result<EnsembleSpec> {
        EnsembleSpec::new(names.iter().map(|n| load_checkpoint(&dir.join(n))).collect::<Result<_>>()?)
    };
    let mut localization = load(&file.localization)?;
    let mut damage = load(&file.damage)?;
    localization.zero_shot = file.zero_shot;
    damage.zero_shot = file.zero_shot;
    PipelineSpec::new(localization, damage, file.aug_config, file.loc_threshold)
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    DatasetManifest::load(&path)
}

fn load_nonempty(manifest: &DatasetManifest, domain: DomainTag, split: Split) -> Result<Split3> {
    let data = manifest.load_split(domain, split)?;
    if data.is_empty() {
        return Err(Error::format(
            manifest.root.join(MANIFEST_FILE),
            format!("manifest has no {domain:?} {split:?} entries"),
        ));
    }
    Ok(data)
}

fn fit_threshold(loc: &EnsembleSpec, val: &[(ImagePair, DamageMask)]) -> Result<f64> {
    let v: Vec<(RasterImage, _)> = val.iter().map(|(p, m)| (p.pre.clone(), m.footprint())).collect();
    optimize_threshold(loc, &v)
}

/// Summary printed by `generate`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GenerateSummary {
    pub manifest: PathBuf,
    pub source: (usize, usize),
    pub target: (usize, usize, usize),
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<GenerateSummary> {
    let d = &cfg.dataset;
    let m = build_dataset_with(d.source_scenes, d.target_scenes, &d.scene, &d.shift, out, cfg.seed)?;
    Ok(GenerateSummary {
        manifest: out.join(MANIFEST_FILE),
        source: (m.count(DomainTag::Source, Split::Train), m.count(DomainTag::Source, Split::Val)),
        target: (
            m.count(DomainTag::Target, Split::Train),
            m.count(DomainTag::Target, Split::Val),
            m.count(DomainTag::Target, Split::Test),
        ),
    })
}

/// Source-domain pipeline: localization and damage ensembles trained on the
/// source training split, threshold fit on source validation.
pub fn train_source_pipeline(
    cfg: &ExperimentConfig,
    aug: &AugmentationConfig,
    source_train: &[(ImagePair, DamageMask)],
    source_val: &[(ImagePair, DamageMask)],
) -> Result<PipelineSpec> {
    let loc = pretrain_ensemble(
        &cfg.loc_config(),
        cfg.ensemble_size,
        &localization_samples(source_train),
        &cfg.seeded(&cfg.pretrain),
    )?;
    let damage = pretrain_ensemble(
        &cfg.damage_config(aug),
        cfg.ensemble_size,
        &damage_samples(source_train, aug)?,
        &cfg.seeded(&cfg.pretrain),
    )?;
    let threshold = fit_threshold(&loc, source_val)?;
    PipelineSpec::new(loc, damage, aug.clone(), threshold)
}

/// Adapts both stages of a source pipeline. Without adaptation the source
/// ensembles and threshold are kept and flagged zero-shot.
pub fn adapt_pipeline(
    cfg: &ExperimentConfig,
    source: &PipelineSpec,
    mode: AdaptationMode,
    target_train: &[(ImagePair, DamageMask)],
    target_val: &[(ImagePair, DamageMask)],
) -> Result<PipelineSpec> {
    match mode {
        AdaptationMode::NoDA => PipelineSpec::new(
            zero_shot(&source.localization),
            zero_shot(&source.damage),
            source.aug_config.clone(),
            source.loc_threshold,
        ),
        AdaptationMode::SupervisedDA => {
            let hyper = cfg.seeded(&cfg.finetune);
            let loc_samples = localization_samples(target_train);
            let loc = finetune(&AdaptationPlan {
                source: source.localization.clone(),
                target_train: &loc_samples,
                hyper: hyper.clone(),
                mode,
            })?;
            let dmg_samples = damage_samples(target_train, &source.aug_config)?;
            let damage = finetune(&AdaptationPlan {
                source: source.damage.clone(),
                target_train: &dmg_samples,
                hyper,
                mode,
            })?;
            let threshold = fit_threshold(&loc, target_val)?;
            PipelineSpec::new(loc, damage, source.aug_config.clone(), threshold)
        }
    }
}

pub fn cmd_train(cfg: &ExperimentConfig, manifest: &Path, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let m = load_manifest(manifest)?;
    let train = load_nonempty(&m, DomainTag::Source, Split::Train)?;
    let val = load_nonempty(&m, DomainTag::Source, Split::Val)?;
    let spec = train_source_pipeline(cfg, &cfg.augmentation, &train, &val)?;
    save_pipeline(&spec, out)?;
    Ok(out.join(PIPELINE_FILE))
}

pub fn cmd_finetune(cfg: &ExperimentConfig, manifest: &Path, model_dir: &Path, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let source = load_pipeline(model_dir)?;
    let m = load_manifest(manifest)?;
    let (train, val) = match cfg.mode {
        AdaptationMode::SupervisedDA => (
            load_nonempty(&m, DomainTag::Target, Split::Train)?,
            load_nonempty(&m, DomainTag::Target, Split::Val)?,
        ),
        AdaptationMode::NoDA => (Vec::new(), Vec::new()),
    };
    let spec = adapt_pipeline(cfg, &source, cfg.mode, &train, &val)?;
    save_pipeline(&spec, out)?;
    Ok(out.join(PIPELINE_FILE))
}

fn entry_stem(e: &ManifestEntry) -> String {
    let stem = e.mask_path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
    stem.strip_suffix("_mask").unwrap_or(stem).to_string()
}

/// File name `infer` uses for the prediction of a manifest entry.
pub fn prediction_name(e: &ManifestEntry) -> String {
    format!("{}_pred.png", entry_stem(e))
}

/// Predicts every pair of one domain/split and writes `<scene>_pred.png`
/// (labels 0-4) plus, with `render`, `<scene>_pred_color.png`.
pub fn cmd_infer(
    model_dir: &Path,
    manifest: &Path,
    domain: DomainTag,
    split: Split,
    out: &Path,
    render: bool,
) -> Result<Vec<PathBuf>> {
    let spec = load_pipeline(model_dir)?;
    let m = load_manifest(manifest)?;
    let entries = m.select(domain, split);
    let data = load_nonempty(&m, domain, split)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::with_capacity(entries.len());
    for (e, (pair, _)) in entries.iter().zip(&data) {
        let input = build_input(pair, &spec.aug_config)?;
        let (_, damage) = run_two_stage_prebuilt(&spec, pair, &input)?;
        let path = out.join(prediction_name(e));
        write_mask(&path, &damage)?;
        if render {
            write_image(&out.join(format!("{}_pred_color.png", entry_stem(e))), &render_mask(&damage))?;
        }
        written.push(path);
    }
    Ok(written)
}

/// Where `evaluate` gets its predictions from.
#[derive(Clone, Debug)]
pub enum Predictions {
    /// Run the saved pipeline in this directory.
    Model(PathBuf),
    /// Read `<scene>_pred.png` masks written by `infer`.
    Masks(PathBuf),
}

fn write_reports(out: &Path, json: &str, table: &str) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (name, text) in [(REPORT_JSON, json), (REPORT_TXT, table)] {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn cmd_evaluate(
    predictions: &Predictions,
    manifest: &Path,
    domain: DomainTag,
    split: Split,
    out: &Path,
) -> Result<F1Report> {
    let m = load_manifest(manifest)?;
    let entries = m.select(domain, split);
    let data = load_nonempty(&m, domain, split)?;
    let (preds, label) = match predictions {
        Predictions::Model(dir) => {
            let spec = load_pipeline(dir)?;
            let preds = data
                .iter()
                .map(|(pair, _)| run_two_stage_prebuilt(&spec, pair, &build_input(pair, &spec.aug_config)?))
                .collect::<Result<Vec<_>>>()?;
            (preds, spec.aug_config.mode.label())
        }
        Predictions::Masks(dir) => {
            let preds = entries
                .iter()
                .map(|e| {
                    let d = read_mask(&dir.join(prediction_name(e)))?;
                    Ok((d.footprint(), d))
                })
                .collect::<Result<Vec<_>>>()?;
            (preds, "Predictions".to_string())
        }
    };
    let truth: Vec<DamageMask> = data.into_iter().map(|(_, m)| m).collect();
    let report = evaluate_predictions(&preds, &truth)?;
    write_reports(out, &(report.to_json() + "\n"), &report.to_table(&label))?;
    Ok(report)
}

/// One emitted row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub aug: AugMode,
    pub mode: AdaptationMode,
    pub input_channels: usize,
    pub metrics: Option<F1Report>,
    pub error: Option<String>,
    /// Per column: this row attains the column maximum.
    pub best: [bool; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    fn new(rows: Vec<(AblationCell, Result<F1Report>)>) -> Self {
        let mut max = [f64::NEG_INFINITY; 6];
        for (_, r) in &rows {
            if let Ok(r) = r {
                for (m, v) in max.iter_mut().zip(r.columns()) {
                    *m = m.max(v);
                }
            }
        }
        let rows = rows
            .into_iter()
            .map(|(cell, r)| {
                let best = match &r {
                    Ok(r) => std::array::from_fn(|j| r.columns()[j] == max[j]),
                    Err(_) => [false; 6],
                };
                let (metrics, error) = match r {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                AblationRow {
                    label: cell.label(),
                    input_channels: cell.aug.input_channels(),
                    aug: cell.aug,
                    mode: cell.mode,
                    metrics,
                    error,
                    best,
                }
            })
            .collect();
        Self {
            columns: COLUMN_NAMES.iter().map(|s| s.to_string()).collect(),
            rows,
        }
    }

    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned table; `*` marks the best value of each column.
    pub fn to_table(&self) -> String {
        let rows: Vec<(String, Option<F1Report>)> =
            self.rows.iter().map(|r| (r.label.clone(), r.metrics.clone())).collect();
        let marks: Vec<[bool; 6]> = self.rows.iter().map(|r| r.best).collect();
        let mut out = format_table(&rows, &marks);
        for r in self.rows.iter().filter(|r| r.error.is_some()) {
            out.push_str(&format!("error in '{}': {}\n", r.label, r.error.as_deref().unwrap_or("")));
        }
        out
    }
}

/// All splits the ablation touches.
pub struct ExperimentData {
    pub source_train: Split3,
    pub source_val: Split3,
    pub target_train: Split3,
    pub target_val: Split3,
    pub target_test: Split3,
}

impl ExperimentData {
    pub fn load(manifest: &Path) -> Result<Self> {
        let m = load_manifest(manifest)?;
        Ok(Self {
            source_train: load_nonempty(&m, DomainTag::Source, Split::Train)?,
            source_val: load_nonempty(&m, DomainTag::Source, Split::Val)?,
            target_train: load_nonempty(&m, DomainTag::Target, Split::Train)?,
            target_val: load_nonempty(&m, DomainTag::Target, Split::Val)?,
            target_test: load_nonempty(&m, DomainTag::Target, Split::Test)?,
        })
    }
}

/// Memoizes trained ensembles by a serialized description of everything
/// that determines them.
#[derive(Default)]
struct EnsembleCache {
    enabled: bool,
    map: BTreeMap<String, EnsembleSpec>,
}

impl EnsembleCache {
    fn get_or(&mut self, key: String, make: impl FnOnce() -> Result<EnsembleSpec>) -> Result<EnsembleSpec> {
        if !self.enabled {
            return make();
        }
        if let Some(e) = self.map.get(&key) {
            return Ok(e.clone());
        }
        let e = make()?;
        self.map.insert(key, e.clone());
        Ok(e)
    }
}

fn cache_key(parts: impl Serialize) -> String {
    serde_json::to_string(&parts).expect("key serializes")
}

struct Ablation<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a ExperimentData,
    cache: EnsembleCache,
}

impl Ablation<'_> {
    fn source_localization(&mut self) -> Result<EnsembleSpec> {
        let (cfg, data) = (self.cfg, self.data);
        let key = cache_key(("loc-source", cfg.loc_config(), cfg.ensemble_size, cfg.seeded(&cfg.pretrain)));
        self.cache.get_or(key, || {
            pretrain_ensemble(
                &cfg.loc_config(),
                cfg.ensemble_size,
                &localization_samples(&data.source_train),
                &cfg.seeded(&cfg.pretrain),
            )
        })
    }

    fn target_localization(&mut self) -> Result<EnsembleSpec> {
        let source = self.source_localization()?;
        let (cfg, data) = (self.cfg, self.data);
        let key = cache_key((
            "loc-target",
            cfg.loc_config(),
            cfg.ensemble_size,
            cfg.seeded(&cfg.pretrain),
            cfg.seeded(&cfg.finetune),
        ));
        self.cache.get_or(key, || {
            finetune(&AdaptationPlan {
                source,
                target_train: &localization_samples(&data.target_train),
                hyper: cfg.seeded(&cfg.finetune),
                mode: AdaptationMode::SupervisedDA,
            })
        })
    }

    fn source_damage(&mut self, aug: &AugmentationConfig) -> Result<EnsembleSpec> {
        let (cfg, data) = (self.cfg, self.data);
        let model = cfg.damage_config(aug);
        let key = cache_key(("damage-source", aug, model.in_channels, &model, cfg.ensemble_size, cfg.seeded(&cfg.pretrain)));
        self.cache.get_or(key, || {
            pretrain_ensemble(&model, cfg.ensemble_size, &damage_samples(&data.source_train, aug)?, &cfg.seeded(&cfg.pretrain))
        })
    }

    fn run_cell(&mut self, cell: &AblationCell) -> Result<F1Report> {
        let aug = self.cfg.cell_augmentation(&cell.aug);
        let damage = self.source_damage(&aug)?;
        let spec = match cell.mode {
            AdaptationMode::NoDA => {
                let loc = self.source_localization()?;
                let t = fit_threshold(&loc, &self.data.source_val)?;
                PipelineSpec::new(zero_shot(&loc), zero_shot(&damage), aug, t)?
            }
            AdaptationMode::SupervisedDA => {
                let loc = self.target_localization()?;
                let t = fit_threshold(&loc, &self.data.target_val)?;
                let samples = damage_samples(&self.data.target_train, &aug)?;
                let damage = finetune(&AdaptationPlan {
                    source: damage,
                    target_train: &samples,
                    hyper: self.cfg.seeded(&self.cfg.finetune),
                    mode: cell.mode,
                })?;
                PipelineSpec::new(loc, damage, aug, t)?
            }
        };
        crate::eval::evaluate_split(&spec, &self.data.target_test)
    }
}

/// Runs every matrix cell on already loaded data. A failing cell becomes an
/// error row; the remaining cells still run.
pub fn run_ablation(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<AblationReport> {
    cfg.validate()?;
    let mut ablation = Ablation {
        cfg,
        data,
        cache: EnsembleCache {
            enabled: cfg.cache,
            ..EnsembleCache::default()
        },
    };
    let rows = cfg
        .matrix
        .cells()
        .into_iter()
        .map(|cell| {
            let r = ablation.run_cell(&cell);
            (cell, r)
        })
        .collect();
    Ok(AblationReport::new(rows))
}

/// Loads the manifest, runs the matrix and writes `report.json` and `report.txt`.
pub fn cmd_ablate(cfg: &ExperimentConfig, manifest: &Path, out: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    let data = ExperimentData::load(manifest)?;
    let report = run_ablation(cfg, &data)?;
    write_reports(out, &report.to_json(), &report.to_table())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_dataset_with;

    fn tiny_config() -> ExperimentConfig {
        let hyper = TrainHyper {
            learning_rate: 0.1,
            epochs: 1,
            crop_size: 16,
            batch_size: 2,
            crops_per_sample: 1,
            destroyed_bias: 0.5,
            seed: 3,
        };
        ExperimentConfig {
            ensemble_size: 2,
            model: ModelShape { base_width: 4, depth: 2 },
            pretrain: hyper.clone(),
            finetune: hyper,
            dataset: DatasetConfig {
                source_scenes: 4,
                target_scenes: 10,
                scene: SceneSpec {
                    width: 32,
                    height: 32,
                    building_count: (1, 3),
                    building_size: (6, 10),
                    ..SceneSpec::default()
                },
                shift: DomainShiftSpec::default(),
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn presets_have_the_table_shapes() {
        assert_eq!(MatrixPreset::Adaptation.cells().len(), 4);
        let t3 = MatrixPreset::Components.cells();
        assert_eq!(t3.len(), 8);
        assert!(t3.iter().all(|c| c.mode == AdaptationMode::SupervisedDA));
        let widths: Vec<usize> = t3.iter().map(|c| c.aug.input_channels()).collect();
        assert_eq!(widths, vec![12, 12, 8, 14, 14, 18, 6, 12]);
        assert_eq!(MatrixPreset::Full.cells().len(), 10);
    }

    #[test]
    fn config_json_round_trip_and_overrides() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 5, "matrix": "adaptation", "pretrain": {"epochs": 2}}"#).unwrap();
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.matrix.cells().len(), 4);
        assert_eq!(partial.pretrain.epochs, 2);
        assert_eq!(partial.pretrain.crop_size, TrainHyper::default().crop_size);
        let cells: ExperimentConfig =
            serde_json::from_str(r#"{"matrix": [{"aug": "rgb,unsharp", "mode": "sda"}]}"#).unwrap();
        assert_eq!(cells.matrix.cells()[0].aug.input_channels(), 12);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn duplicate_cells_are_rejected() {
        let cell = AblationCell::new(AugMode::RgbOnly, AdaptationMode::SupervisedDA);
        let cfg = ExperimentConfig { matrix: Matrix::Cells(vec![cell.clone(), cell]), ..ExperimentConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn best_markers_follow_column_maxima() {
        let r = |v: f64| F1Report { localization_f1: 0.9, per_class_f1: [v, 1.0 - v, v, 0.5], macro_f1: v };
        let cells = MatrixPreset::Adaptation.cells();
        let rows = vec![
            (cells[0].clone(), Ok(r(0.3))),
            (cells[1].clone(), Ok(r(0.7))),
            (cells[2].clone(), Err(Error::invalid("boom"))),
            (cells[3].clone(), Ok(r(0.1))),
        ];
        let report = AblationReport::new(rows);
        assert_eq!(report.failed(), 1);
        assert_eq!(report.rows[1].best, [true, true, false, true, true, true]);
        assert_eq!(report.rows[3].best, [true, false, true, false, true, false]);
        assert_eq!(report.rows[2].best, [false; 6]);
        let table = report.to_table();
        assert!(table.contains("ERROR"));
        assert!(table.contains("0.7000*"));
    }

    #[test]
    fn end_to_end_commands_on_a_tiny_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let data_dir = dir.path().join("data");
        let summary = cmd_generate(&cfg, &data_dir).unwrap();
        assert_eq!(summary.target, (8, 1, 1));
        let manifest = summary.manifest.clone();

        let src_dir = dir.path().join("source");
        cmd_train(&cfg, &manifest, &src_dir).unwrap();
        let source = load_pipeline(&src_dir).unwrap();
        assert_eq!(source.damage.len(), 2);
        assert_eq!(source.damage.domain(), Some(DomainTag::Source));

        let tgt_dir = dir.path().join("target");
        cmd_finetune(&cfg, &manifest, &src_dir, &tgt_dir).unwrap();
        assert_eq!(load_pipeline(&tgt_dir).unwrap().damage.domain(), Some(DomainTag::Target));

        let pred_dir = dir.path().join("pred");
        let written = cmd_infer(&tgt_dir, &manifest, DomainTag::Target, Split::Test, &pred_dir, true).unwrap();
        assert_eq!(written.len(), 1);
        assert!(read_mask(&written[0]).unwrap().data().iter().all(|v| *v <= 4));

        let eval_a = dir.path().join("eval_a");
        let eval_b = dir.path().join("eval_b");
        let a = cmd_evaluate(&Predictions::Model(tgt_dir.clone()), &manifest, DomainTag::Target, Split::Test, &eval_a).unwrap();
        let b = cmd_evaluate(&Predictions::Masks(pred_dir), &manifest, DomainTag::Target, Split::Test, &eval_b).unwrap();
        assert_eq!(a, b);
        assert_eq!(fs::read(eval_a.join(REPORT_JSON)).unwrap(), fs::read(eval_b.join(REPORT_JSON)).unwrap());
    }

    #[test]
    fn oracle_predictions_evaluate_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let d = &cfg.dataset;
        let m = build_dataset_with(d.source_scenes, d.target_scenes, &d.scene, &d.shift, dir.path(), 1).unwrap();
        let pred = dir.path().join("oracle");
        fs::create_dir_all(&pred).unwrap();
        for e in m.select(DomainTag::Target, Split::Train) {
            fs::copy(dir.path().join(&e.mask_path), pred.join(prediction_name(e))).unwrap();
        }
        let out = dir.path().join("eval");
        let r = cmd_evaluate(&Predictions::Masks(pred), &dir.path().join(MANIFEST_FILE), DomainTag::Target, Split::Train, &out)
            .unwrap();
        assert_eq!(r.columns(), [1.0; 6]);
        assert!(fs::read_to_string(out.join(REPORT_TXT)).unwrap().contains("1.0000"));
    }

    #[test]
    fn ablation_cache_is_transparent_and_errors_are_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cmd_generate(&cfg, dir.path()).unwrap();
        let data = ExperimentData::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        cfg.matrix = Matrix::Cells(vec![
            AblationCell::new(AugMode::RgbOnly, AdaptationMode::SupervisedDA),
            AblationCell::new(AugMode::FusionOnly, AdaptationMode::SupervisedDA),
            AblationCell::new(AugMode::RgbOnly, AdaptationMode::NoDA),
        ]);
        let cached = run_ablation(&cfg, &data).unwrap();
        let uncached = run_ablation(&ExperimentConfig { cache: false, ..cfg.clone() }, &data).unwrap();
        assert_eq!(cached.to_json(), uncached.to_json());
        // Reordering cells must not change any row.
        let mut reversed = cfg.clone();
        reversed.matrix = Matrix::Cells(cfg.matrix.cells().into_iter().rev().collect());
        let rev = run_ablation(&reversed, &data).unwrap();
        for row in &cached.rows {
            let other = rev.rows.iter().find(|r| r.label == row.label).unwrap();
            assert_eq!(other.metrics, row.metrics);
        }
        // Crops larger than the scenes make every cell fail without aborting the run.
        cfg.pretrain.crop_size = 64;
        let failed = run_ablation(&cfg, &data).unwrap();
        assert_eq!(failed.failed(), 3);
        assert_eq!(failed.rows.len(), 3);
    }

    #[test]
    fn missing_inputs_are_descriptive() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_train(&tiny_config(), &dir.path().join("none.json"), &dir.path().join("o")).unwrap_err();
        assert!(err.to_string().contains("none.json"));
        assert!(!dir.path().join("o").exists());
        assert!(load_pipeline(dir.path()).is_err());
    }
}
