//! Command-line entry point.
//!
//! `sentinel run` drives the full staged pipeline from a config file; the
//! per-stage subcommands run a single stage against an existing workdir.
//! Exit codes: 0 success, 2 config error, 3 missing upstream artifact,
//! 4 numeric divergence, 1 other failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use sentinel::config::{parse_config, RunConfig, Scenario};
use sentinel::detectors::DetectorKind;
use sentinel::error::Result;
use sentinel::interventions::InterventionMode;
use sentinel::pipeline::{parse_stages, run_pipeline, run_stage, Stage, StageOptions};
use sentinel::redteam::DeceptionMode;
use sentinel::traces::TraceKind;

#[derive(Parser)]
#[command(name = "sentinel", version, about = "Backdoor monitoring testbed")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (flat key = value lines); defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Working directory for artifacts (overrides the config).
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,

    /// Run seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Scenario preset: c1 backdoor only, c2 unify-mode deception,
    /// c3 autoencoder-evasion deception (overrides the config).
    #[arg(long, global = true)]
    scenario: Option<Scenario>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a stage list (default: the scenario's full pipeline).
    Run {
        /// Comma-separated stages in canonical order, or `all`.
        #[arg(long, default_value = "all")]
        stages: String,
    },
    /// Generate the labeled dataset.
    Gen,
    /// Train the backdoored toy model.
    Train,
    /// Extract internal-state traces from the trained model.
    Extract {
        /// Layer to capture (default: config trace.layer).
        #[arg(long)]
        layer: Option<usize>,
        /// Trace kind to extract (default: both).
        #[arg(long)]
        kind: Option<TraceKind>,
    },
    /// Fit detectors on benign traces and calibrate thresholds.
    Fit {
        /// Fit a single detector (default: all five).
        #[arg(long)]
        detector: Option<DetectorKind>,
    },
    /// Score calibration and test traces with the fitted detectors.
    Score,
    /// Red-team fine-tuning against the monitors.
    Redteam {
        /// Deception objective (default: scenario preset).
        #[arg(long)]
        mode: Option<DeceptionMode>,
        /// Layer the deception loss is evaluated on.
        #[arg(long)]
        loss_layer: Option<usize>,
        /// Comma-separated adapter-bearing layers.
        #[arg(long)]
        train_layers: Option<String>,
        /// Weight of the unifying loss.
        #[arg(long)]
        w_unify: Option<f64>,
    },
    /// Mean/zero interventions with logit-difference measurement.
    Intervene {
        /// Intervention mode (default: both).
        #[arg(long)]
        mode: Option<InterventionMode>,
        /// `all` or a comma-separated layer list.
        #[arg(long)]
        layers: Option<String>,
    },
    /// Emit the per-detector and ensemble challenge report.
    Evaluate,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path)?,
        None => {
            let mut c = RunConfig::default();
            c.finalize();
            c
        }
    };
    if let Some(workdir) = &common.workdir {
        cfg.workdir = workdir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(scenario) = common.scenario {
        cfg.scenario = scenario;
    }
    cfg.finalize();
    cfg.validate()?;
    Ok(cfg)
}

fn parse_usize_list(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| sentinel::SentinelError::Config(format!("bad layer list entry `{p}`")))
        })
        .collect()
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let mut opts = StageOptions::default();

    match cli.command {
        Command::Run { stages } => {
            let stages = parse_stages(&stages, cfg.scenario)?;
            run_pipeline(&cfg, &stages, &opts)
        }
        Command::Gen => run_stage(&cfg, Stage::Gen, &opts),
        Command::Train => run_stage(&cfg, Stage::Train, &opts),
        Command::Extract { layer, kind } => {
            opts.extract_layer = layer;
            opts.extract_kind = kind;
            run_stage(&cfg, Stage::Extract, &opts)
        }
        Command::Fit { detector } => {
            opts.fit_detector = detector;
            run_stage(&cfg, Stage::Fit, &opts)
        }
        Command::Score => run_stage(&cfg, Stage::Score, &opts),
        Command::Redteam {
            mode,
            loss_layer,
            train_layers,
            w_unify,
        } => {
            if let Some(mode) = mode {
                cfg.redteam.deception.mode = mode;
            }
            if let Some(layer) = loss_layer {
                cfg.redteam.deception.loss_layer = layer;
            }
            if let Some(spec) = train_layers {
                cfg.redteam.deception.trainable_layers = parse_usize_list(&spec)?;
            }
            if let Some(w) = w_unify {
                cfg.redteam.weights.w_unify = w;
            }
            cfg.validate()?;
            run_stage(&cfg, Stage::Redteam, &opts)
        }
        Command::Intervene { mode, layers } => {
            opts.intervene_mode = mode;
            if let Some(spec) = layers {
                if spec != "all" {
                    opts.intervene_layers = Some(parse_usize_list(&spec)?);
                }
            }
            run_stage(&cfg, Stage::Intervene, &opts)
        }
        Command::Evaluate => run_stage(&cfg, Stage::Evaluate, &opts),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = execute(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
