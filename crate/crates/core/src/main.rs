use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tmb_mil::pipeline::{Pipeline, PipelineConfig, Stage};
use tmb_mil::synth::SyntheticCohortSpec;
use tmb_mil::training::TrainConfig;
use tmb_mil::types::Magnification;
use tmb_mil::{Error, Result};

#[derive(Parser)]
#[command(name = "tmb-mil", version, about = "Multi-scale graph-attention MIL for slide-level TMB status")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline TOML config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// 5, 10, 20 or all.
    #[arg(long, value_parser = parse_mags)]
    magnification: Option<Mags>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Segment tissue and list tile positions for every manifest slide.
    Tile(Common),
    /// Embed tiles into feature bags.
    Embed(Common),
    /// Build kNN graphs over tile features.
    Graph(Common),
    /// Cross-validated training; writes fold checkpoints and logs.
    Train(Common),
    /// Score patients and write predictions.csv.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Score every patient with this checkpoint instead of the
        /// held-out fold models.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// AUC, operating point, subgroups and survival statistics.
    Evaluate(Common),
    /// Attention heatmaps for selected slides.
    Heatmap(Common),
    /// Generate a synthetic cohort as feature bags plus labels.
    Synth(Common),
    /// Run every stage in order, reusing cached artifacts.
    Pipeline(Common),
}

#[derive(Clone)]
struct Mags(Vec<Magnification>);

fn parse_mags(s: &str) -> std::result::Result<Mags, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Mags(Magnification::ALL.to_vec()));
    }
    s.parse::<Magnification>()
        .map(|m| Mags(vec![m]))
        .map_err(|e| e.to_string())
}

fn load_config(c: &Common, allow_default_synth: bool) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(path) => PipelineConfig::load(path, c.seed)?,
        None if allow_default_synth => {
            let seed = c
                .seed
                .ok_or_else(|| Error::Config("synth without --config needs --seed".into()))?;
            PipelineConfig::synthetic(SyntheticCohortSpec::new(seed), TrainConfig::new(seed))
        }
        None => return Err(Error::Config("--config is required".into())),
    };
    if let Some(m) = &c.magnification {
        cfg.magnifications = m.0.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let (common, stages, checkpoint) = match cli.command {
        Command::Tile(c) => (c, vec![Stage::Tile], None),
        Command::Embed(c) => (c, vec![Stage::Embed], None),
        Command::Graph(c) => (c, vec![Stage::Graph], None),
        Command::Train(c) => (c, vec![Stage::Train], None),
        Command::Predict { common, checkpoint } => (common, vec![Stage::Predict], checkpoint),
        Command::Evaluate(c) => (c, vec![Stage::Evaluate], None),
        Command::Heatmap(c) => (c, vec![Stage::Heatmap], None),
        Command::Synth(c) => (c, vec![Stage::Synth], None),
        Command::Pipeline(c) => (c, Vec::new(), None),
    };
    if let Some(n) = common.jobs {
        if n == 0 {
            return Err(Error::Config("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let cfg = load_config(&common, stages == [Stage::Synth])?;
    let mut p = Pipeline::new(cfg, &common.out_dir)?;
    let stages = if stages.is_empty() { p.stages() } else { stages };
    for s in stages {
        if s == Stage::Predict && checkpoint.is_some() {
            p.predict(checkpoint.as_deref())?;
        } else {
            p.run_stage(s)?;
        }
    }
    print!("{}", p.report.summary());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
