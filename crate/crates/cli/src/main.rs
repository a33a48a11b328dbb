use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trajforge::pes::parse_elements;
use trajforge::pipeline::{self, ConfigInvalid, PipelineConfig, PipelineError, RunControl, Stage};
use trajforge::schema::Functional;

#[derive(Parser)]
#[command(name = "trajforge", version, about = "Curate DFT relaxation trajectories into sharded datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Pipeline config (JSON). Omitted fields take their defaults; without a
    /// file every setting is a default.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, env = "TRAJFORGE_OUT")]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Root seed for every random stream in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for the train/test split only.
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct PesArgs {
    /// Comma-separated chemical subset, e.g. Fe,Cu,Al,Ni.
    #[arg(long)]
    elements: Option<String>,
    #[arg(long)]
    functional: Option<String>,
    #[arg(long)]
    rcut: Option<f64>,
    #[arg(long)]
    nmax: Option<usize>,
    #[arg(long)]
    lmax: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Elemental reference energies, JSON keyed by functional.
    #[arg(long)]
    refs: Option<PathBuf>,
    #[arg(long)]
    components: Option<usize>,
    /// Project with the PCA stored in this model.json instead of fitting.
    #[arg(long)]
    fit_on: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured stages, skipping ones already complete.
    Run {
        #[command(flatten)]
        common: Common,
        /// Stop once this stage has completed.
        #[arg(long)]
        stop_after: Option<Stage>,
        /// Re-run stages even if they already completed.
        #[arg(long)]
        force: bool,
    },
    /// Check a config without running anything.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Stream source records into the work area.
    Fetch(Common),
    /// Convert fetched records into frames.
    Transform(Common),
    /// Apply the quality filters.
    Filter(Common),
    /// Write shards and the manifest.
    Export(Common),
    /// Build train/test splits from the export.
    Split(Common),
    /// Compute dataset statistics from the export.
    Stats(Common),
    /// Project a chemical subset onto principal components of SOAP space.
    Pes {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pes: PesArgs,
    },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigInvalid {
    ConfigInvalid {
        field: field.into(),
        reason: reason.into(),
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn load(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| invalid("<file>", format!("{}: {e}", path.display())))?;
            let base = absolute(path).parent().map(PathBuf::from).unwrap_or_default();
            PipelineConfig::parse(&text, &base)?
        }
        None => PipelineConfig::parse("", &absolute(Path::new(".")))?,
    };
    if let Some(out) = &common.out {
        cfg.out_dir = absolute(out);
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = common.split_seed {
        cfg.split.seed = s;
    }
    Ok(cfg)
}

fn apply_pes(cfg: &mut PipelineConfig, a: &PesArgs) -> Result<(), ConfigInvalid> {
    let pes = &mut cfg.pes;
    if let Some(list) = &a.elements {
        pes.elements = parse_elements(list).map_err(|r| invalid("pes.elements", r))?.into_iter().collect();
    }
    if let Some(f) = &a.functional {
        pes.functional = serde_json::from_value::<Functional>(serde_json::Value::String(f.clone()))
            .map_err(|e| invalid("pes.functional", e.to_string()))?;
    }
    if let Some(v) = a.rcut {
        pes.soap.r_cut = v;
    }
    if let Some(v) = a.nmax {
        pes.soap.n_max = v;
    }
    if let Some(v) = a.lmax {
        pes.soap.l_max = v;
    }
    if let Some(v) = a.sigma {
        pes.soap.sigma = v;
    }
    if let Some(v) = a.components {
        pes.components = v;
    }
    if let Some(p) = &a.refs {
        pes.refs = Some(absolute(p));
    }
    if let Some(p) = &a.fit_on {
        pes.fit_on = Some(absolute(p));
    }
    Ok(())
}

fn single_stage(common: &Common, stage: Stage) -> Result<(PipelineConfig, RunControl), PipelineError> {
    let mut cfg = load(common)?;
    cfg.stages = vec![stage];
    let ctrl = RunControl {
        force: true,
        ..Default::default()
    };
    Ok((cfg, ctrl))
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let (cfg, ctrl) = match cli.command {
        Command::Validate { common } => {
            let cfg = load(&common)?;
            cfg.check_values()?;
            pipeline::check_dependencies(&cfg)?;
            println!("config ok: stages {:?}, out_dir {}", cfg.stages, cfg.out_dir.display());
            return Ok(());
        }
        Command::Run { common, stop_after, force } => (
            load(&common)?,
            RunControl {
                stop_after,
                force,
                ..Default::default()
            },
        ),
        Command::Fetch(c) => single_stage(&c, Stage::Fetch)?,
        Command::Transform(c) => single_stage(&c, Stage::Transform)?,
        Command::Filter(c) => single_stage(&c, Stage::Filter)?,
        Command::Export(c) => single_stage(&c, Stage::Export)?,
        Command::Split(c) => single_stage(&c, Stage::Split)?,
        Command::Stats(c) => single_stage(&c, Stage::Stats)?,
        Command::Pes { common, pes } => {
            let (mut cfg, ctrl) = single_stage(&common, Stage::Pes)?;
            apply_pes(&mut cfg, &pes)?;
            (cfg, ctrl)
        }
    };
    let report = pipeline::run_with(&cfg, &ctrl)?;
    for s in &report.stages {
        println!(
            "{:<9} {:>9.2}s  in {:>10}  out {:>10}  rejected {:>8}  dropped {:>8}{}",
            s.stage.name(),
            s.wall_seconds,
            s.records_in,
            s.records_out,
            s.rejected,
            s.dropped,
            if s.skipped { "  (done earlier)" } else { "" }
        );
    }
    if !report.conservation_ok {
        for n in &report.conservation_notes {
            log::warn!("{n}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
