use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cfsg_cli::commands::{self, EvalSource, PredictOptions, SynthKind};
use cfsg_cli::config::PipelineConfig;
use cfsg_cli::{exit_code, EXIT_USAGE};
use clap::{Parser, Subcommand};

/// Crop/weed segmentation and weed-mapping pipeline.
#[derive(Debug, Parser)]
#[command(name = "cfsg", version)]
struct Cli {
    /// Pipeline configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset of images, masks and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, value_enum, default_value = "field")]
        kind: SynthKind,
        /// Overrides the configured base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write its best checkpoint.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Tiled prediction of one image, writing masks and probabilities.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: MapArgs,
    },
    /// Prediction plus weed heatmap, prescription maps and spray statistics.
    Map {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: MapArgs,
    },
    /// Confusion matrix and per-class metrics on a labelled dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of predicted masks named like the dataset's masks.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refine a probability dump with the dense CRF.
    Crf {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        probabilities: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the channels of one layer as grayscale PNGs.
    Featmaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Saving rate against grid size for a label mask, with a linear fit.
    Spraycurve {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        grids: Vec<usize>,
        #[arg(long)]
        gsd: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class pixel counts and loss weights of a dataset.
    Weights {
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
struct MapArgs {
    #[arg(long)]
    crf: bool,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    gsd: Option<f64>,
    /// Prescription grid sizes in pixels, comma separated.
    #[arg(long, alias = "grid", value_delimiter = ',')]
    grids: Option<Vec<usize>>,
}

impl MapArgs {
    fn options(&self) -> PredictOptions {
        PredictOptions {
            crf: self.crf.then_some(true),
            tile: self.tile,
            overlap: self.overlap,
            gsd: self.gsd,
            grids: self.grids.clone(),
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    print_text(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn print_text(text: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("CFSG_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| cfsg_core::Error::Config(format!("CFSG_THREADS must be a number, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("building the thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Synth { out, count, kind, seed } => {
            if let Some(s) = seed {
                cfg.synthetic.seed = s;
            }
            let m = commands::synth(&cfg, &out, count, kind)?;
            eprintln!("wrote {} samples from {} scenes to {}", m.entries.len(), m.scene_seeds.len(), out.display());
        }
        Command::Train { train, val, out, seed, epochs } => {
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            if let Some(e) = epochs {
                cfg.training.max_epochs = e;
            }
            cfg.validate()?;
            print_json(&commands::train(&cfg, &train, &val, &out)?)?;
        }
        Command::Predict { checkpoint, input, out, opts } | Command::Map { checkpoint, input, out, opts } => {
            print_json(&commands::predict(&cfg, &checkpoint, &input, &out, &opts.options())?)?;
        }
        Command::Eval { data, checkpoint, predictions, out } => {
            let source = match (&checkpoint, &predictions) {
                (Some(c), _) => EvalSource::Checkpoint(c),
                (None, Some(p)) => EvalSource::Predictions(p),
                (None, None) => unreachable!("clap requires one source"),
            };
            print_text(&commands::eval(&cfg, &data, source, out.as_deref())?.to_text())?;
        }
        Command::Crf { image, probabilities, out } => {
            commands::crf_refine(&cfg, &image, &probabilities, &out)?;
        }
        Command::Featmaps { checkpoint, image, layer, out } => {
            print_json(&commands::featmaps(&checkpoint, &image, &layer, &out)?)?;
        }
        Command::Spraycurve { mask, grids, gsd, out } => {
            let gsd = gsd.unwrap_or(cfg.mapping.gsd_mm_per_px);
            print_json(&commands::spraycurve(&mask, &grids, gsd, cfg.mapping.min_weed_pixels, &out)?)?;
        }
        Command::Weights { data } => print_json(&commands::weights(&data)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
