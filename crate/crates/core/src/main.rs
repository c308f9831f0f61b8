use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pcrnet::commands::{
    checkpoint_config, cmd_eval, cmd_export_attention, cmd_gen, cmd_gradcheck, cmd_sweep, cmd_train, split_file,
    ExportSource, SweepAxis,
};
use pcrnet::config::RunConfig;
use pcrnet::data::Split;
use pcrnet::{Error, Result};

/// Pathology context recalibration networks: synthetic data, training,
/// evaluation, gradient checks, ablation sweeps and attention export.
#[derive(Debug, Parser)]
#[command(name = "pcrnet", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set net.gate=tanh`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (key `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training seed (key `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Arithmetic width, 32 or 64 (key `precision`).
    #[arg(long, global = true)]
    precision: Option<String>,
    /// Worker threads (key `workers`).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic train/val/test datasets and their class counts.
    Gen,
    /// Train on the datasets in `data.dir`.
    Train,
    /// Score a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Compare every gradient rule with central finite differences.
    Gradcheck {
        /// Flip the sign of the sigmoid gradient to exercise the checker.
        #[arg(long, hide = true)]
        inject_sigmoid_fault: bool,
    },
    /// Write P, E and G maps of one image with half-plane statistics.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample index into `--dataset`.
        #[arg(long, conflicts_with = "image")]
        index: Option<usize>,
        /// Dataset file, `<data.dir>/test.pcrd` by default.
        #[arg(long, conflicts_with = "image")]
        dataset: Option<PathBuf>,
        /// Tensor file holding one `[H,W]` image.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Train one run per value of an ablation axis.
    Sweep {
        /// einit, theta, gate, stages or lambda.
        #[arg(long)]
        axis: String,
    },
}

impl Common {
    /// Overrides in increasing precedence: file, `--set`, dedicated flags.
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let file = RunConfig::parse(&text)?;
            pairs.extend(
                file.entries()
                    .into_iter()
                    .filter(|(k, _)| file.is_set(k)),
            );
        }
        for s in &self.set {
            let Some((k, v)) = s.split_once('=') else {
                return Err(Error::Input(format!("--set expects key=value, got `{s}`")));
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(out) = &self.out {
            pairs.push(("out".into(), out.to_string_lossy().into_owned()));
        }
        if let Some(seed) = self.seed {
            pairs.push(("seed".into(), seed.to_string()));
        }
        if let Some(p) = &self.precision {
            pairs.push(("precision".into(), p.clone()));
        }
        if let Some(w) = self.workers {
            pairs.push(("workers".into(), w.to_string()));
        }
        Ok(pairs)
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::new();
        for (k, v) in self.overrides()? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen => {
            let cfg = cli.common.resolve()?;
            let splits = cmd_gen(&cfg)?;
            for split in Split::ALL {
                let d = splits.get(split);
                println!("{split}: {} samples, counts {:?}", d.len(), d.counts());
            }
            Ok(true)
        }
        Command::Train => {
            let cfg = cli.common.resolve()?;
            let summary = cmd_train(&cfg)?;
            match summary.best_epoch {
                Some(e) => println!("best_epoch={e}"),
                None => println!("best_epoch=none"),
            }
            if let Some(t) = &summary.test {
                print!("{}", t.to_text());
            }
            Ok(true)
        }
        Command::Eval { checkpoint, dataset } => {
            let (cfg, manifest) = checkpoint_config(&checkpoint, &cli.common.overrides()?)?;
            let report = cmd_eval(&cfg, &manifest, &checkpoint, &dataset)?;
            print!("{}", report.to_text());
            Ok(true)
        }
        Command::Gradcheck { inject_sigmoid_fault } => {
            let cfg = cli.common.resolve()?;
            pcrnet::tensor::set_sigmoid_gradient_fault(inject_sigmoid_fault);
            let results = cmd_gradcheck(&cfg)?;
            for r in &results {
                println!("{}", r.line());
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            println!("{} checks, {failed} failed", results.len());
            Ok(failed == 0)
        }
        Command::ExportAttention {
            checkpoint,
            index,
            dataset,
            image,
        } => {
            let (cfg, manifest) = checkpoint_config(&checkpoint, &cli.common.overrides()?)?;
            let source = match image {
                Some(path) => ExportSource::Image(path),
                None => ExportSource::Index {
                    dataset: dataset.unwrap_or_else(|| cfg.data_dir().join(split_file(Split::Test))),
                    index: index.unwrap_or(0),
                },
            };
            for s in cmd_export_attention(&cfg, &manifest, &checkpoint, &source)? {
                println!("{}", s.line());
            }
            Ok(true)
        }
        Command::Sweep { axis } => {
            let axis: SweepAxis = axis.parse()?;
            let cfg = cli.common.resolve()?;
            let rows = cmd_sweep(&cfg, axis)?;
            println!("{}", pcrnet::commands::SWEEP_HEADER);
            for r in &rows {
                println!("{}", r.csv(axis));
            }
            Ok(rows.iter().all(|r| r.outcome.is_ok()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
