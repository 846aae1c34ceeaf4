//! Command-line front end: corpus generation, training, runs, sweeps and
//! mask rendering.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use docprune::content_filter::detector_recall;
use docprune::instruction_filter::{ifm_recall, IfmTrainScope};
use docprune::pipeline::{
    detector_training, ifm_training, read_corpus, render_masks, sweep, train_mlp_detector,
    write_corpus, Pipeline, PipelineConfig, Profile, RunReport, Timings,
};
use docprune::pnm::write_file;
use docprune::synthdoc::{make_corpus, Corpus};
use docprune::{Error, Result};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "docprune",
    version,
    about = "Visual token pruning for document encoders"
)]
struct Cli {
    /// TOML config file; keys mirror the pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Data seed. Falls back to HRVDA_SEED, then to the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    /// Output directory. `run` prints to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: manifest.json plus PGM previews.
    Gen {
        /// Number of documents.
        #[arg(long)]
        n: Option<usize>,
        /// Target content fraction per page.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Train the MLP content detector and write detector.hrvd.
    TrainDetector {
        /// Corpus directory from `gen`; defaults to the configured corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the instruction filter and write ifm.hrvd.
    TrainIfm {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum, default_value_t = IfmTrainScope::EndToEnd)]
        scope: IfmTrainScope,
    },
    /// Run the pipeline and emit a report.
    Run {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Run a grid of (eps_c, eps_i) settings and write summary.csv.
    Sweep {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Comma-separated `eps_c:eps_i` pairs.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0.25:0.25,0.25:0.5,0.5:0.25,0.5:0.5"
        )]
        settings: Vec<String>,
    },
    /// Write post-stage-2, post-stage-4 and post-IFM masks as PBM files.
    Render {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Render an existing JSON report instead of running.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            })
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(p) = cli.profile {
        cfg.profile = p;
    }
    if let Some(seed) = cli.seed.or(PipelineConfig::env_seed()?) {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// The corpus named on the command line, or the configured one. A loaded
/// corpus overrides the config's corpus section and seed so reports echo it.
fn load_corpus(cfg: &mut PipelineConfig, dir: Option<&Path>) -> Result<Corpus> {
    match dir {
        Some(dir) => {
            let (m, corpus) = read_corpus(dir)?;
            cfg.seed = m.seed;
            cfg.corpus.documents = corpus.docs.len();
            cfg.corpus.content_fraction = m.content_fraction;
            Ok(corpus)
        }
        None => make_corpus(
            cfg.corpus.documents,
            cfg.corpus.content_fraction,
            cfg.image_side(),
            cfg.seed,
        ),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

fn timings_json(t: &Timings) -> Result<String> {
    Ok(serde_json::to_string_pretty(t)? + "\n")
}

fn report_text(report: &RunReport, format: Format) -> Result<String> {
    match format {
        Format::Json => report.to_json(),
        Format::Csv => report.to_csv(),
    }
}

fn parse_setting(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("setting {s:?} is not eps_c:eps_i"));
    let (c, i) = s.split_once(':').ok_or_else(bad)?;
    let c: f64 = c.trim().parse().map_err(|_| bad())?;
    let i: f64 = i.trim().parse().map_err(|_| bad())?;
    if !(0.0..=1.0).contains(&c) || !(0.0..=1.0).contains(&i) {
        return Err(Error::Config(format!(
            "setting {s:?} has a threshold outside [0,1]"
        )));
    }
    Ok((c, i))
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Gen { n, fraction } => {
            let n = n.unwrap_or(cfg.corpus.documents);
            let fraction = fraction.unwrap_or(cfg.corpus.content_fraction);
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::Config(format!(
                    "--fraction {fraction} outside [0,1]"
                )));
            }
            let corpus = make_corpus(n, fraction, cfg.image_side(), cfg.seed)?;
            let dir = out_dir(cli, "corpus");
            let path = write_corpus(&corpus, cfg.seed, fraction, &dir)?;
            eprintln!(
                "wrote {n} documents ({}px, content {:.3}) to {}",
                cfg.image_side(),
                corpus.mean_content_fraction(),
                path.display()
            );
        }
        Command::TrainDetector { corpus, epochs } => {
            let docs = load_corpus(&mut cfg, corpus.as_deref())?.docs;
            let mut train = detector_training();
            train.epochs = epochs.unwrap_or(train.epochs);
            let patch = cfg.encoder_config().patch;
            let (model, curve) =
                train_mlp_detector(&cfg.detector, patch, cfg.model_seed, &docs, &train)?;
            let eps = cfg.thresholds.eps_c.first().copied().unwrap_or(0.0);
            let recall = detector_recall(&model, &docs, eps)?;
            let dir = out_dir(cli, ".");
            std::fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
            let path = dir.join("detector.hrvd");
            model.to_weight_file()?.write(&path)?;
            eprintln!(
                "loss {:.4} -> {:.4}, training recall {recall:.4} at {eps}; wrote {}",
                curve[0],
                curve[curve.len() - 1],
                path.display()
            );
        }
        Command::TrainIfm {
            corpus,
            epochs,
            scope,
        } => {
            let docs = load_corpus(&mut cfg, corpus.as_deref())?.docs;
            let mut train = ifm_training();
            train.epochs = epochs.unwrap_or(train.epochs);
            let mut pipeline = Pipeline::new(cfg)?;
            let curve = pipeline.train_ifm(&docs, &train, *scope)?;
            let recall = ifm_recall(&pipeline.ifm, &pipeline.ifm_samples(&docs)?)?;
            let dir = out_dir(cli, ".");
            std::fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
            let path = dir.join("ifm.hrvd");
            pipeline.ifm.to_weight_file().write(&path)?;
            eprintln!(
                "loss {:.4} -> {:.4}, training recall {recall:.4} at {}; wrote {}",
                curve[0],
                curve[curve.len() - 1],
                pipeline.ifm.eps_i,
                path.display()
            );
        }
        Command::Run { corpus } => {
            let corpus = load_corpus(&mut cfg, corpus.as_deref())?;
            let (report, timings) = Pipeline::new(cfg)?.run(&corpus)?;
            let text = report_text(&report, cli.format)?;
            match &cli.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
                    let ext = if cli.format == Format::Json {
                        "json"
                    } else {
                        "csv"
                    };
                    write_text(&dir.join(format!("report.{ext}")), &text)?;
                    write_text(&dir.join("timings.json"), &timings_json(&timings)?)?;
                }
                None => print!("{text}"),
            }
        }
        Command::Sweep { corpus, settings } => {
            let settings = settings
                .iter()
                .map(|s| parse_setting(s))
                .collect::<Result<Vec<_>>>()?;
            let corpus = load_corpus(&mut cfg, corpus.as_deref())?;
            let result = sweep(&Pipeline::new(cfg)?, &corpus, &settings)?;
            let dir = out_dir(cli, "sweep");
            std::fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
            write_text(&dir.join("summary.csv"), &result.summary_csv()?)?;
            for (k, report) in result.reports.iter().enumerate() {
                write_text(&dir.join(format!("report_{k:02}.json")), &report.to_json()?)?;
            }
            for ((c, i), e) in &result.failures {
                eprintln!("setting ({c}, {i}) failed: {e}");
            }
            for v in &result.violations {
                eprintln!("monotonicity violation: {v}");
            }
            if !result.failures.is_empty() || !result.violations.is_empty() {
                return Ok(ExitCode::from(EXIT_RUNTIME));
            }
        }
        Command::Render { corpus, report } => {
            let report = match report {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
                    RunReport::from_json(&text)?
                }
                None => {
                    let corpus = load_corpus(&mut cfg, corpus.as_deref())?;
                    Pipeline::new(cfg)?.run(&corpus)?.0
                }
            };
            let dir = out_dir(cli, "masks");
            let files = render_masks(&report, &dir)?;
            eprintln!("wrote {} mask files to {}", 3 * files.len(), dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
