use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use damage_core::harness::{
    cmd_ablate, cmd_evaluate, cmd_finetune, cmd_generate, cmd_infer, cmd_train, AblationCell, ExperimentConfig,
    Matrix, Predictions,
};
use damage_core::{AdaptationMode, AugMode, DomainTag, Error, Split};

/// Building damage segmentation experiments on synthetic dual-domain data.
#[derive(Parser)]
#[command(name = "damage", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a source/target dataset and its manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Target-domain scene count.
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        source_scenes: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain both stages on the source domain.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma list over rgb, edges, contrast, unsharp, fusion.
        #[arg(long)]
        aug: Option<AugMode>,
        #[command(flatten)]
        common: Common,
    },
    /// Adapt a source model to the target domain (or keep it, with `--mode noda`).
    Finetune {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<AdaptationMode>,
        #[command(flatten)]
        common: Common,
    },
    /// Write predicted damage masks for one split.
    Infer {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DomainArg::Target)]
        domain: DomainArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also write color-rendered masks.
        #[arg(long)]
        render: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score a model, or masks written by `infer`, against ground truth.
    Evaluate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        model: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DomainArg::Target)]
        domain: DomainArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[command(flatten)]
        common: Common,
    },
    /// Run the augmentation x adaptation matrix and write the report table.
    Ablate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Restrict the matrix to these augmentations (repeatable).
        #[arg(long)]
        aug: Vec<AugMode>,
        /// Adaptation modes crossed with `--aug` (repeatable, default sda).
        #[arg(long)]
        mode: Vec<AdaptationMode>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for DomainTag {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => DomainTag::Source,
            DomainArg::Target => DomainTag::Target,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

enum Failure {
    Usage(String),
    Core(Error),
    Partial(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::InvalidArgument(_)) => 1,
            Failure::Core(Error::TrainingDiverged { .. }) => 3,
            Failure::Core(_) => 2,
            Failure::Partial(_) => 4,
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_path(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    flag.or_else(|| cfg.manifest.clone())
        .ok_or_else(|| Failure::Usage("--manifest is required (or set \"manifest\" in --config)".into()))
}

fn print_report(path: &Path) {
    if let Ok(text) = std::fs::read_to_string(path.join(damage_core::harness::REPORT_TXT)) {
        print!("{text}");
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { out, scenes, source_scenes, common } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = scenes {
                cfg.dataset.target_scenes = n;
            }
            if let Some(n) = source_scenes {
                cfg.dataset.source_scenes = n;
            }
            let s = cmd_generate(&cfg, &out)?;
            println!("manifest: {}", s.manifest.display());
            println!("source train/val: {}/{}", s.source.0, s.source.1);
            println!("target train/val/test: {}/{}/{}", s.target.0, s.target.1, s.target.2);
        }
        Command::Train { manifest, out, aug, common } => {
            let mut cfg = load_config(&common)?;
            if let Some(a) = aug {
                cfg.augmentation.mode = a;
            }
            let manifest = manifest_path(manifest, &cfg)?;
            let p = cmd_train(&cfg, &manifest, &out)?;
            println!("source model: {}", p.display());
        }
        Command::Finetune { manifest, model, out, mode, common } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let manifest = manifest_path(manifest, &cfg)?;
            let p = cmd_finetune(&cfg, &manifest, &model, &out)?;
            println!("adapted model: {}", p.display());
        }
        Command::Infer { manifest, model, out, domain, split, render, common } => {
            let cfg = load_config(&common)?;
            let manifest = manifest_path(manifest, &cfg)?;
            let written = cmd_infer(&model, &manifest, domain.into(), split.into(), &out, render)?;
            println!("wrote {} masks to {}", written.len(), out.display());
        }
        Command::Evaluate { manifest, model, predictions, out, domain, split, common } => {
            let cfg = load_config(&common)?;
            let manifest = manifest_path(manifest, &cfg)?;
            let source = match (model, predictions) {
                (Some(m), _) => Predictions::Model(m),
                (None, Some(p)) => Predictions::Masks(p),
                (None, None) => return Err(Failure::Usage("one of --model or --predictions is required".into())),
            };
            cmd_evaluate(&source, &manifest, domain.into(), split.into(), &out)?;
            print_report(&out);
        }
        Command::Ablate { manifest, out, aug, mode, common } => {
            let mut cfg = load_config(&common)?;
            if !aug.is_empty() {
                let modes = if mode.is_empty() { vec![AdaptationMode::SupervisedDA] } else { mode };
                cfg.matrix = Matrix::Cells(
                    aug.iter()
                        .flat_map(|a| modes.iter().map(|m| AblationCell::new(a.clone(), *m)))
                        .collect(),
                );
            } else if !mode.is_empty() {
                cfg.matrix = Matrix::Cells(cfg.matrix.cells().into_iter().filter(|c| mode.contains(&c.mode)).collect());
            }
            if cfg.matrix.cells().is_empty() {
                return Err(Failure::Usage("the ablation matrix is empty".into()));
            }
            let manifest = manifest_path(manifest, &cfg)?;
            let report = cmd_ablate(&cfg, &manifest, &out)?;
            print_report(&out);
            if report.failed() > 0 {
                return Err(Failure::Partial(report.failed()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Partial(n) => eprintln!("error: {n} ablation cell(s) failed; see the report"),
            }
            ExitCode::from(f.code())
        }
    }
}
