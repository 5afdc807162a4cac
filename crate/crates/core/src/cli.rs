//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{DataSpec, Generator, RunConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{
    ablation_csv, evaluate, export_adjacency, export_embeddings, export_prototypes, run_ablation, run_seed, Checkpoint,
    Variant,
};

#[derive(Parser, Debug)]
#[command(name = "manifold-ssl", version, about = "Semi-supervised classification with learned prototype graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as CSV.
    GenData {
        #[arg(long, default_value = "two_moons")]
        generator: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 3.0)]
        spread: f64,
        /// Comma-separated ring radii.
        #[arg(long, default_value = "1,2")]
        radii: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep only this many labels (others written as -1).
        #[arg(long)]
        n_labeled: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one seed; settings may be overridden with --section.key=value.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint and print metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fully labeled CSV; defaults to the held-out set of the run.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Encoder-only inference, as during warm-up.
        #[arg(long)]
        no_graph: bool,
    },
    /// Write a diagnostic CSV from a checkpoint.
    Export {
        #[arg(long, value_enum)]
        kind: ExportKind,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV; defaults to the training set of the run.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Row whose graph is exported (adjacency only).
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ablation table over seeds 0..k.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seeds: u64,
        /// Comma-separated variant names; all five by default.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExportKind {
    Adjacency,
    Embeddings,
    Prototypes,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Split `--section.key=value` overrides from the remaining arguments.
fn extract_overrides(args: Vec<OsString>) -> std::result::Result<(Vec<OsString>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let Some(s) = a.to_str().and_then(|s| s.strip_prefix("--")) else {
            rest.push(a);
            continue;
        };
        let name = s.split('=').next().unwrap_or("");
        if !name.contains('.') {
            rest.push(a);
            continue;
        }
        match s.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => return Err(format!("override --{name} needs the form --{name}=value")),
        }
    }
    Ok((rest, overrides))
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Run the command line `args` (program name first) and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let (rest, overrides) = match extract_overrides(args) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let takes_overrides = matches!(cli.command, Command::Train { .. } | Command::Ablate { .. });
    if !overrides.is_empty() && !takes_overrides {
        eprintln!("error: config overrides are only accepted by train and ablate");
        return 1;
    }
    match dispatch(cli.command, &overrides) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command, overrides: &[(String, String)]) -> std::result::Result<(), Failure> {
    match command {
        Command::GenData {
            generator,
            n,
            classes,
            noise,
            spread,
            radii,
            seed,
            n_labeled,
            out,
        } => {
            let mut spec = DataSpec::default();
            let usage = |e: Error| Failure::Usage(e.to_string());
            spec.generator = Generator::parse(&generator).map_err(usage)?;
            if spec.generator == Generator::Csv {
                return Err(Failure::Usage("gen-data needs a synthetic generator".into()));
            }
            spec.n = n;
            spec.classes = classes;
            spec.noise = noise;
            spec.spread = spread;
            spec.seed = seed;
            let mut cfg = RunConfig::default();
            cfg.set("data.radii", &radii).map_err(usage)?;
            spec.radii = cfg.data.radii;
            let ds = match n_labeled {
                Some(k) => {
                    spec.n_labeled = k;
                    spec.train_set()?
                }
                None => spec.full()?,
            };
            emit(out.as_deref(), &ds.to_csv())?;
        }
        Command::Train { config, seed, out_dir } => {
            let cfg = load_config(config.as_deref(), overrides)?;
            let result = run_seed(&cfg, seed)?;
            std::fs::create_dir_all(&out_dir).map_err(Error::from)?;
            Checkpoint::new(&cfg, &result.model, &result.optimizer, seed).save(out_dir.join("checkpoint.json"))?;
            std::fs::write(out_dir.join("report.csv"), result.report.to_csv()).map_err(Error::from)?;
            let metrics = result.metrics_report(&cfg);
            let json = serde_json::to_string_pretty(&metrics).map_err(Error::from)?;
            std::fs::write(out_dir.join("metrics.json"), json + "\n").map_err(Error::from)?;
            println!(
                "seed {seed}: test error {:.4} after {} iterations ({:.1}s)",
                metrics.error_rate, metrics.iters, metrics.wall_clock_s
            );
        }
        Command::Eval {
            checkpoint,
            data,
            no_graph,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.model()?;
            let ds = match data {
                Some(p) => Dataset::load_csv(p)?,
                None => ck.run_config()?.test_set_for(ck.seed)?,
            };
            let m = evaluate(&model, &ds, !no_graph)?;
            println!("{}", serde_json::to_string_pretty(&m).map_err(Error::from)?);
        }
        Command::Export {
            kind,
            checkpoint,
            data,
            index,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.model()?;
            let dataset = || -> Result<Dataset> {
                match &data {
                    Some(p) => Dataset::load_csv(p),
                    None => ck.run_config()?.train_set_for(ck.seed),
                }
            };
            let text = match kind {
                ExportKind::Prototypes => export_prototypes(&model)?,
                ExportKind::Embeddings => export_embeddings(&model, &dataset()?)?,
                ExportKind::Adjacency => {
                    let ds = dataset()?;
                    if index >= ds.len() {
                        return Err(Failure::Usage(format!("--index {index} is out of range for {} rows", ds.len())));
                    }
                    export_adjacency(&model, ds.x.row(index))?
                }
            };
            emit(out.as_deref(), &text)?;
        }
        Command::Ablate {
            config,
            seeds,
            variants,
            out,
        } => {
            let cfg = load_config(config.as_deref(), overrides)?;
            let variants = match variants {
                Some(list) => list
                    .split(',')
                    .map(|s| Variant::parse(s.trim()))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Failure::Usage(e.to_string()))?,
                None => Variant::ALL.to_vec(),
            };
            if seeds < 2 {
                return Err(Failure::Usage("--seeds must be at least 2".into()));
            }
            let seeds: Vec<u64> = (0..seeds).collect();
            let rows = run_ablation(&cfg, &variants, &seeds)?;
            emit(out.as_deref(), &ablation_csv(&rows))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn overrides_are_split_off() {
        let (rest, ov) = extract_overrides(os(&["x", "train", "--seed", "3", "--train.iters=20", "--vat.eps=0.3"])).unwrap();
        assert_eq!(rest, os(&["x", "train", "--seed", "3"]));
        assert_eq!(ov, vec![("train.iters".into(), "20".into()), ("vat.eps".into(), "0.3".into())]);
        assert!(extract_overrides(os(&["x", "train", "--train.iters"])).is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["manifold-ssl", "train", "--bogus"]), 1);
        assert_eq!(run(["manifold-ssl", "frobnicate"]), 1);
        assert_eq!(run(["manifold-ssl", "train", "--model.nope=3"]), 1);
        assert_eq!(run(["manifold-ssl", "eval", "--checkpoint", "x", "--train.iters=3"]), 1);
        assert_eq!(run(["manifold-ssl", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_two() {
        assert_eq!(run(["manifold-ssl", "eval", "--checkpoint", "/nonexistent/checkpoint.json"]), 2);
    }
}
