use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mrst::dataset::{load_dataset, save_dataset};
use mrst::pipeline::{self, with_pool, PipelineConfig, RunOptions, StageToggles};
use mrst::sim::{self, PhantomSpec, StudyModel, StudyRoi};
use mrst::state::Stage;

#[derive(Parser)]
#[command(name = "mrst", version, about = "Multi-resolution spatio-temporal fitting of voxel time series")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Worker threads (default: all logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset directory (overrides the configuration).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Output directory for state and reports (overrides the configuration).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Reuse stages already persisted in the output directory.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom dataset.
    Simulate {
        /// Destination directory.
        #[arg(long)]
        out: PathBuf,
        /// Phantom description (TOML); defaults to the desk-scale phantom.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Use the small 8x8x8 two-ROI phantom.
        #[arg(long, conflicts_with = "spec")]
        smoke: bool,
    },
    /// Run every stage.
    Run,
    /// Per-voxel mean and AR(2) fits.
    FitTemporal,
    /// Per-ROI partition search, covariance fit and shrinkage.
    FitLocal,
    /// Sparse precision across ROI means.
    FitRegional,
    /// Voxel-wise task-versus-rest tests with FDR control.
    TestActivation,
    /// Hold out voxels of one ROI and predict them from the rest.
    Krige {
        /// 1-based ROI label.
        #[arg(long)]
        roi: usize,
        #[arg(long, default_value_t = 50)]
        holdout: usize,
    },
    /// False-positive study.
    StudyFp(StudyArgs),
    /// Kriging RMSE study.
    StudyKrige(StudyArgs),
    /// Power against effect size.
    StudyPower {
        #[command(flatten)]
        study: StudyArgs,
        /// Comma-separated effect sizes.
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2,0.4")]
        effects: Vec<f64>,
    },
    /// Regenerate reports from persisted state.
    Report,
}

#[derive(Args)]
struct StudyArgs {
    /// Phantom description supplying the true covariances (TOML).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Take the true covariances from this dataset instead.
    #[arg(long, conflicts_with = "spec")]
    empirical: Option<PathBuf>,
    /// Override the number of replicates.
    #[arg(long)]
    reps: Option<usize>,
    /// Comma-separated subset of glm,iso,aniso,l-aniso.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] mrst::Error),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("invalid TOML in {path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("unknown model {0}; expected glm, iso, aniso or l-aniso")]
    Model(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| CliError::Toml {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| CliError::Write {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn load_config(global: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &global.config {
        Some(path) => read_toml(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(t) = global.threads {
        cfg.threads = t;
    }
    if let Some(d) = &global.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(o) = &global.output {
        cfg.output = o.clone();
    }
    if let Some(s) = global.seed {
        cfg.seed = s;
        cfg.study.seed = s;
    }
    Ok(cfg)
}

fn run_stage(cfg: &PipelineConfig, global: &Global, stage: Option<Stage>) -> Result<()> {
    let cfg = PipelineConfig {
        stages: stage.map_or(cfg.stages, StageToggles::only),
        ..cfg.clone()
    };
    let state = pipeline::run_pipeline(
        &cfg,
        RunOptions {
            resume: global.resume,
            stop_after: None,
        },
    )?;
    let names: Vec<&str> = state.stages().into_iter().map(Stage::name).collect();
    eprintln!("state in {} holds: {}", cfg.output.display(), names.join(", "));
    Ok(())
}

fn study_inputs(cfg: &PipelineConfig, args: &StudyArgs) -> Result<(Vec<StudyRoi>, sim::StudyConfig)> {
    let rois = match (&args.spec, &args.empirical) {
        (_, Some(dir)) => sim::empirical_rois(&load_dataset(dir)?)?,
        (Some(path), None) => sim::study_rois(&read_toml::<PhantomSpec>(path)?)?,
        (None, None) => sim::study_rois(&PhantomSpec::default())?,
    };
    let mut study = cfg.study.clone();
    if let Some(r) = args.reps {
        study.reps = r;
    }
    if let Some(models) = &args.models {
        study.models = models
            .iter()
            .map(|m| StudyModel::parse(m.trim()).ok_or_else(|| CliError::Model(m.clone())))
            .collect::<Result<_>>()?;
    }
    Ok((rois, study))
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_text(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let threads = cfg.effective_threads();
    match &cli.command {
        Command::Simulate { out, spec, smoke } => {
            let spec = match (spec, smoke) {
                (Some(path), _) => read_toml(path)?,
                (None, true) => PhantomSpec::smoke(),
                (None, false) => PhantomSpec::default(),
            };
            let (dataset, _) = sim::gen_phantom(&spec, cfg.seed)?;
            save_dataset(&dataset, out)?;
            eprintln!(
                "wrote {} voxels x {} scans in {} ROIs to {}",
                dataset.n_voxels(),
                dataset.n_scans(),
                dataset.parcellation.n_rois(),
                out.display()
            );
        }
        Command::Run => run_stage(&cfg, &cli.global, None)?,
        Command::FitTemporal => run_stage(&cfg, &cli.global, Some(Stage::Temporal))?,
        Command::FitLocal => run_stage(&cfg, &cli.global, Some(Stage::Local))?,
        Command::FitRegional => run_stage(&cfg, &cli.global, Some(Stage::Regional))?,
        Command::TestActivation => run_stage(&cfg, &cli.global, Some(Stage::Activation))?,
        Command::Krige { roi, holdout } => {
            let text = with_pool(threads, || pipeline::krige_holdout(&cfg, *roi, *holdout))??;
            let path = cfg.output.join(pipeline::REPORT_DIR).join(format!("krige_roi{roi}.csv"));
            write_text(&path, &text)?;
            eprintln!("wrote {}", path.display());
        }
        Command::StudyFp(args) | Command::StudyKrige(args) => {
            let (rois, study) = study_inputs(&cfg, args)?;
            let report = with_pool(threads, || match &cli.command {
                Command::StudyFp(_) => sim::run_fp_study(&rois, &study),
                _ => sim::run_krige_study(&rois, &study),
            })??;
            emit(&args.out, &report.to_csv())?;
            eprintln!("{} reps in {:.1} s", report.reps, report.runtime_seconds);
        }
        Command::StudyPower { study: args, effects } => {
            let (rois, study) = study_inputs(&cfg, args)?;
            let curve = with_pool(threads, || sim::power_curve(&rois, effects, &study))??;
            emit(&args.out, &curve.to_csv())?;
            eprintln!("{} reps in {:.1} s", curve.reps, curve.runtime_seconds);
        }
        Command::Report => {
            pipeline::report(&cfg)?;
            eprintln!("reports in {}", cfg.output.join(pipeline::REPORT_DIR).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
