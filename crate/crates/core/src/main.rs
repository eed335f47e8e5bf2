use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use scribble_seg::data::synthesize_dataset;
use scribble_seg::harness::{
    ablate_lambda, ablate_supervision, emit_report, evaluate_frames, load_report, run_cv, train_single,
    ExperimentConfig, Report, StrategyArm, DEFAULT_LAMBDAS, DEFAULT_STRATEGIES,
};
use scribble_seg::metrics::aggregate;
use scribble_seg::model::load_checkpoint;
use scribble_seg::train::DecoderChoice;

#[derive(Parser)]
#[command(name = "scribble-seg", version, about = "Scribble-supervised cardiac segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.max_iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sets both the training seed and the fold seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let mut config = base.with_overrides(&self.set)?;
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            config.train.seed = seed;
            config.fold_seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset to `--out`.
    Synth(Common),
    /// Train one model on all patients.
    Train(Common),
    /// Evaluate a checkpoint on every labelled frame.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_decoder, default_value = "main")]
        decoder: DecoderChoice,
    },
    /// K-fold cross-validation.
    Cv(Common),
    /// Sweep the weight of the pseudo-label term.
    AblateLambda {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Compare supervision strategies.
    AblateSupervision {
        #[command(flatten)]
        common: Common,
        /// Subset of pce, cr, cps, pls-fixed, pls.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<String>>,
    },
    /// Rewrite report files from an existing `report.json` in `--out`.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_decoder(s: &str) -> Result<DecoderChoice, String> {
    match s {
        "main" => Ok(DecoderChoice::Main),
        "aux" => Ok(DecoderChoice::Aux),
        other => Err(format!("unknown decoder '{other}' (main|aux)")),
    }
}

fn summarize(report: &Report) {
    print!("{}", report.to_csv());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(common) => {
            let config = common.resolve()?;
            let Some(out) = &common.out else {
                bail!("synth needs --out");
            };
            let frames = synthesize_dataset(out, &config.data.synth)?;
            println!("wrote {} frames to {}", frames.len(), out.display());
        }
        Command::Train(common) => {
            let config = common.resolve()?;
            let outcome = train_single(&config)?;
            if let Some(last) = outcome.history.last() {
                println!("final loss {:.4} after {} iterations", last.loss_total, last.iter + 1);
            }
            if let Some((rec, _)) = &outcome.best {
                println!("best validation mean DSC {:.4} at iteration {}", rec.mean_dsc, rec.iter);
            }
        }
        Command::Eval {
            common,
            checkpoint,
            decoder,
        } => {
            let config = common.resolve()?;
            let (params, _) = load_checkpoint(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let frames = config.load_frames()?;
            let refs: Vec<_> = frames.iter().filter(|f| f.dense.is_some()).collect();
            let cases = evaluate_frames(&params, &refs, decoder, config.train.input_size)?;
            let table = aggregate(&cases)?;
            let report = Report {
                kind: "eval".into(),
                config_hash: config.hash(),
                control_hash: config.control_hash(),
                fold_hash: String::new(),
                folds: 0,
                pooling: "all labelled frames".into(),
                significance: String::new(),
                rows: vec![scribble_seg::harness::ReportRow {
                    method: decoder.name().into(),
                    arm: "eval".into(),
                    decoder,
                    lambda: None,
                    config_hash: config.hash(),
                    aggregate: table,
                    vs_baseline: None,
                    cases,
                }],
            };
            emit_report(&report, &config.report_formats, &config.output_dir)?;
            summarize(&report);
        }
        Command::Cv(common) => summarize(&run_cv(&common.resolve()?)?),
        Command::AblateLambda { common, values } => {
            let values = values.unwrap_or_else(|| DEFAULT_LAMBDAS.to_vec());
            summarize(&ablate_lambda(&common.resolve()?, &values)?);
        }
        Command::AblateSupervision { common, strategies } => {
            let strategies: Vec<StrategyArm> = match strategies {
                Some(names) => names.iter().map(|s| s.parse()).collect::<Result<_, _>>()?,
                None => DEFAULT_STRATEGIES.to_vec(),
            };
            summarize(&ablate_supervision(&common.resolve()?, &strategies)?);
        }
        Command::Report { out } => {
            let report = load_report(&out.join("report.json"))?;
            emit_report(&report, &[scribble_seg::harness::ReportFormat::Csv], &out)?;
            summarize(&report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
