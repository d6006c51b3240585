use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use exaggerator_cli::commands::{self, ExplainMode};
use exaggerator_cli::manifest::{output_dir, OUTPUT_ROOT_ENV};
use exaggerator_cli::Config;

#[derive(Parser)]
#[command(name = "exaggerator", version, about = "Counterfactual explanations by progressive exaggeration")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.delta=0.2`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory; relative paths resolve under $EXAGGERATOR_OUT.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic disc dataset.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a classifier (regular, biased or oracle).
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["regular", "biased", "oracle"])]
        kind: Option<String>,
        #[arg(long)]
        attribute: Option<String>,
    },
    /// Train an explainer for a frozen classifier.
    TrainExplainer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Explain one image: a single shift or the whole sweep.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, conflicts_with = "sweep", allow_hyphen_values = true)]
        delta: Option<f64>,
        /// Sweep every bin; an optional step must match the bundle's.
        #[arg(long, num_args = 0..=1, default_missing_value = "bundle")]
        sweep: Option<String>,
    },
    /// Evaluate an explainer.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated metric names.
        #[arg(long, default_value = "compatibility,self_consistency,fid,closeness,identity,pixel_flip,measurement")]
        metrics: String,
        /// Attribute oracle, needed by confounding and flip_matrix. Repeatable.
        #[arg(long)]
        oracle: Vec<PathBuf>,
    },
    /// Biased versus unbiased classifier on confounded synthetic data.
    BiasExperiment {
        #[command(flatten)]
        common: Common,
    },
}

fn config(common: &Common, flags: &[(&str, Option<String>)]) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for s in &common.overrides {
        cfg.set(s)?;
    }
    for (key, v) in flags {
        if let Some(v) = v {
            cfg.set_value(key, v)?;
        }
    }
    Ok(cfg)
}

fn out_dir(common: &Common, command: &str) -> PathBuf {
    output_dir(common.out.as_deref(), command)
}

fn announce(path: &Path) {
    println!("wrote {}", path.display());
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { common, samples, seed } => {
            let cfg = config(
                &common,
                &[("data.samples", samples.map(|v| v.to_string())), ("data.seed", seed.map(|v| v.to_string()))],
            )?;
            let out = out_dir(&common, "synth-data");
            commands::for_each_run(&cfg, &out, |c, o| {
                commands::synth_data(c, o)?;
                announce(o);
                Ok(())
            })?;
        }
        Command::TrainClassifier { common, data, kind, attribute } => {
            let cfg = config(&common, &[("classifier.kind", kind), ("classifier.attribute", attribute)])?;
            let out = out_dir(&common, "train-classifier");
            commands::for_each_run(&cfg, &out, |c, o| {
                let (clf, _) = commands::train_classifier(c, &data, o)?;
                println!("validation accuracy {:.4}", clf.manifest.validation_accuracy);
                announce(o);
                Ok(())
            })?;
        }
        Command::TrainExplainer { common, data, classifier, steps, seed } => {
            let cfg = config(
                &common,
                &[("train.steps", steps.map(|v| v.to_string())), ("train.seed", seed.map(|v| v.to_string()))],
            )?;
            let out = out_dir(&common, "train-explainer");
            commands::for_each_run(&cfg, &out, |c, o| {
                commands::train_explainer(c, &data, &classifier, o)?;
                announce(o);
                Ok(())
            })?;
        }
        Command::Explain { common, bundle, classifier, image, delta, sweep } => {
            let cfg = config(&common, &[])?;
            let mode = match (delta, sweep) {
                (Some(d), _) => ExplainMode::Delta(d),
                (None, Some(s)) if s == "bundle" => ExplainMode::Sweep(None),
                (None, Some(s)) => ExplainMode::Sweep(Some(
                    s.parse().map_err(|_| anyhow::anyhow!("--sweep step `{s}` is not a number"))?,
                )),
                (None, None) => anyhow::bail!("pass --delta <shift> or --sweep"),
            };
            let out = out_dir(&common, "explain");
            let (o, _) = commands::explain(&cfg, &bundle, &classifier, &image, mode, &out)?;
            for p in [&o.strip, &o.series, &o.saliency, &o.saliency_values] {
                announce(p);
            }
        }
        Command::Evaluate { common, bundle, classifier, data, metrics, oracle } => {
            let metrics = commands::parse_metrics(&metrics)?;
            let cfg = config(&common, &[])?;
            let out = out_dir(&common, "evaluate");
            commands::for_each_run(&cfg, &out, |c, o| {
                let (report, _) = commands::evaluate(c, &bundle, &classifier, &data, &metrics, &oracle, o)?;
                println!("{}", serde_json::to_string_pretty(&report)?);
                Ok(())
            })?;
        }
        Command::BiasExperiment { common } => {
            let cfg = config(&common, &[])?;
            let out = out_dir(&common, "bias-experiment");
            commands::for_each_run(&cfg, &out, |c, o| {
                let (cmp, _) = commands::bias_experiment(c, o)?;
                print!("{}", cmp.table());
                Ok(())
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    log::debug!("output root from {OUTPUT_ROOT_ENV}: {:?}", std::env::var_os(OUTPUT_ROOT_ENV));
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
