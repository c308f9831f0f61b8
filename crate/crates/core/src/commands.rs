//! The work behind each command-line subcommand. Every command writes the
//! resolved configuration as `config.txt` into its output directory.

use std::fmt;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::checkpoint::{load_checkpoint, load_tensor, read_manifest, save_checkpoint, Manifest};
use crate::config::{Precision, RunConfig};
use crate::data::{generate_synthetic, load_binary_dataset, save_binary_dataset, Dataset, Split, Splits};
use crate::error::{Error, Result};
use crate::export::{export_attention, MapStats};
use crate::losses::ClassFrequencies;
use crate::pcr::Network;
use crate::tensor::{Real, Tensor};
use crate::train::{evaluate, train, EpochRecord, MetricsReport};
use crate::verify::{gradient_suite, CheckResult};

pub const CONFIG_FILE: &str = "config.txt";
pub const FREQUENCIES_FILE: &str = "frequencies.txt";
pub const HISTORY_FILE: &str = "history.txt";
pub const CHECKPOINT_DIR: &str = "checkpoint";
const MEAN_KEY: &str = "checkpoint.input_mean";

pub fn split_file(split: Split) -> String {
    format!("{split}.pcrd")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_text())
}

/// Generates the synthetic splits and writes them, the training class counts
/// and the configuration into `out`.
pub fn cmd_gen(cfg: &RunConfig) -> Result<Splits> {
    cfg.validate()?;
    let out = cfg.out_dir();
    let splits = generate_synthetic(&cfg.synthetic_spec()?)?;
    write_config(&out, cfg)?;
    for split in Split::ALL {
        save_binary_dataset(splits.get(split), &out.join(split_file(split)))?;
    }
    let freq = ClassFrequencies::from_counts(&splits.train.counts())?;
    write_file(&out.join(FREQUENCIES_FILE), freq.to_text()?)?;
    Ok(splits)
}

/// Datasets of one training run, before normalization.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
    pub frequencies: Option<ClassFrequencies>,
}

impl RunData {
    /// Reads the splits and, when present, `frequencies.txt` from `dir`. The
    /// test split is optional.
    pub fn load(dir: &Path) -> Result<Self> {
        let load = |split| load_binary_dataset(&dir.join(split_file(split)), split);
        let train = load(Split::Train)?;
        let val = load(Split::Val)?;
        let test_path = dir.join(split_file(Split::Test));
        let test = if test_path.exists() { Some(load(Split::Test)?) } else { None };
        let freq_path = dir.join(FREQUENCIES_FILE);
        let frequencies = if freq_path.exists() {
            Some(ClassFrequencies::load(&freq_path)?)
        } else {
            None
        };
        Ok(RunData {
            train,
            val,
            test,
            frequencies,
        })
    }

    pub fn from_splits(s: Splits) -> Self {
        RunData {
            train: s.train,
            val: s.val,
            test: Some(s.test),
            frequencies: None,
        }
    }
}

/// What a training run produced.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    /// Test metrics of the best network, when a test split was available.
    pub test: Option<MetricsReport>,
    /// Channel mean subtracted from every input, if any.
    pub input_mean: Option<Vec<f64>>,
}

impl RunSummary {
    /// Test metrics, or the validation metrics of the best epoch without a
    /// test split.
    pub fn headline(&self) -> Option<(&'static str, &MetricsReport)> {
        if let Some(t) = &self.test {
            return Some(("test", t));
        }
        let best = self.best_epoch?;
        self.history.get(best - 1).map(|r| ("val", &r.val))
    }
}

fn join_values(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

/// Input mean recorded in a checkpoint manifest.
pub fn manifest_mean(m: &Manifest) -> Result<Option<Vec<f64>>> {
    let Some((_, v)) = m.iter().find(|(k, _)| k == MEAN_KEY) else {
        return Ok(None);
    };
    if v == "none" {
        return Ok(None);
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Input(format!("bad {MEAN_KEY} entry `{s}`")))
        })
        .collect::<Result<Vec<f64>>>()
        .map(Some)
}

fn fit_typed<T: Real>(cfg: &RunConfig, data: &RunData, out: Option<&Path>) -> Result<RunSummary> {
    let settings = cfg.train_settings()?;
    let freq = if settings.loss.needs_frequencies() {
        match &data.frequencies {
            Some(f) => Some(f.clone()),
            None => Some(ClassFrequencies::from_counts(&data.train.counts())?),
        }
    } else {
        None
    };
    let (train_set, val_set, test_set, input_mean) = if cfg.normalize()? {
        let mean = data.train.channel_mean();
        let test = data.test.as_ref().map(|t| t.normalized(&mean)).transpose()?;
        (data.train.normalized(&mean)?, data.val.normalized(&mean)?, test, Some(mean))
    } else {
        (data.train.clone(), data.val.clone(), data.test.clone(), None)
    };
    let network = Network::<T>::new(cfg.network_config()?, cfg.seed()?)?;

    let mut history_file = match out {
        Some(dir) => {
            let path = dir.join(HISTORY_FILE);
            Some((File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut write_error = None;
    let outcome = train(network, &train_set, &val_set, freq.as_ref(), &settings, |r| {
        if let Some((f, path)) = history_file.as_mut() {
            if let Err(e) = writeln!(f, "{}", r.line()).and_then(|_| f.flush()) {
                write_error.get_or_insert(Error::io(path.clone(), e));
            }
        }
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }

    let test = match &test_set {
        Some(t) if !t.is_empty() => Some(evaluate(&outcome.best, t, settings.eval_batch, settings.workers, settings.averaging)?),
        _ => None,
    };
    if let Some(dir) = out {
        let mut manifest = cfg.entries();
        let best_epoch = outcome.best_epoch.map_or("none".to_string(), |e| e.to_string());
        manifest.push(("checkpoint.best_epoch".into(), best_epoch));
        manifest.push(("checkpoint.parameters".into(), outcome.best.parameter_count().to_string()));
        let mean = input_mean.as_deref().map_or("none".to_string(), join_values);
        manifest.push((MEAN_KEY.into(), mean));
        save_checkpoint(&dir.join(CHECKPOINT_DIR), &outcome.best, &manifest)?;
        if let Some(report) = &test {
            write_file(&dir.join("test_metrics.txt"), report.to_text())?;
            write_file(&dir.join("test_confusion.csv"), report.confusion.to_csv())?;
        }
    }
    Ok(RunSummary {
        best_epoch: outcome.best_epoch,
        history: outcome.history,
        test,
        input_mean,
    })
}

/// Trains on in-memory data. With `out`, also writes the history log, the
/// best checkpoint and the test metrics there.
pub fn fit(cfg: &RunConfig, data: &RunData, out: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    match cfg.precision()? {
        Precision::F32 => fit_typed::<f32>(cfg, data, out),
        Precision::F64 => fit_typed::<f64>(cfg, data, out),
    }
}

/// Trains on the splits in `data.dir`, writing into `out`.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let data = RunData::load(&cfg.data_dir())?;
    let out = cfg.out_dir();
    write_config(&out, cfg)?;
    fit(cfg, &data, Some(&out))
}

/// Configuration stored with a checkpoint, with `overrides` applied on top.
pub fn checkpoint_config(dir: &Path, overrides: &[(String, String)]) -> Result<(RunConfig, Manifest)> {
    let manifest = read_manifest(dir)?;
    let mut cfg = RunConfig::from_manifest(&manifest)?;
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    Ok((cfg, manifest))
}

fn load_network<T: Real>(cfg: &RunConfig, dir: &Path) -> Result<Network<T>> {
    let mut net = Network::<T>::new(cfg.network_config()?, 0)?;
    load_checkpoint(dir, &mut net)?;
    Ok(net)
}

fn load_eval_dataset(path: &Path) -> Result<Dataset> {
    let len = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    if len == 0 {
        return Err(Error::Input(format!("dataset file {} is empty", path.display())));
    }
    load_binary_dataset(path, Split::Test)
}

fn check_dataset(cfg: &RunConfig, d: &Dataset) -> Result<()> {
    let net = cfg.network_config()?;
    if d.classes() != net.classes {
        return Err(Error::config(
            "data.classes",
            format!("dataset has {} classes but the checkpoint network has {}", d.classes(), net.classes),
        ));
    }
    if (d.height(), d.width()) != (net.height, net.width) {
        return Err(Error::config(
            "data.height",
            format!(
                "dataset images are {}x{} but the checkpoint network expects {}x{}",
                d.height(),
                d.width(),
                net.height,
                net.width
            ),
        ));
    }
    Ok(())
}

/// Scores a checkpoint on a dataset file and writes `metrics.txt` and
/// `confusion.csv` into `out`.
pub fn cmd_eval(cfg: &RunConfig, manifest: &Manifest, checkpoint: &Path, dataset: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let mut data = load_eval_dataset(dataset)?;
    check_dataset(cfg, &data)?;
    if let Some(mean) = manifest_mean(manifest)? {
        data = data.normalized(&mean)?;
    }
    let settings = cfg.train_settings()?;
    let report = match cfg.precision()? {
        Precision::F32 => {
            let net = load_network::<f32>(cfg, checkpoint)?;
            evaluate(&net, &data, settings.eval_batch, settings.workers, settings.averaging)?
        }
        Precision::F64 => {
            let net = load_network::<f64>(cfg, checkpoint)?;
            evaluate(&net, &data, settings.eval_batch, settings.workers, settings.averaging)?
        }
    };
    let out = cfg.out_dir();
    write_config(&out, cfg)?;
    write_file(&out.join("metrics.txt"), report.to_text())?;
    write_file(&out.join("confusion.csv"), report.confusion.to_csv())?;
    Ok(report)
}

/// Runs the finite-difference suite on the 64-bit path and writes
/// `gradcheck.txt`.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Vec<CheckResult>> {
    let mut cfg = cfg.clone();
    cfg.set("precision", "64")?;
    cfg.validate()?;
    let results = gradient_suite(cfg.seed()?)?;
    let out = cfg.out_dir();
    write_config(&out, &cfg)?;
    let text: String = results.iter().map(|r| r.line() + "\n").collect();
    write_file(&out.join("gradcheck.txt"), text)?;
    Ok(results)
}

/// The image whose attention maps are exported.
#[derive(Clone, Debug)]
pub enum ExportSource {
    /// Sample of a dataset file.
    Index { dataset: PathBuf, index: usize },
    /// A raw tensor file of shape `[H,W]` or `[1,1,H,W]`.
    Image(PathBuf),
}

fn export_typed<T: Real>(cfg: &RunConfig, checkpoint: &Path, image: &Tensor<f64>, out: &Path) -> Result<Vec<MapStats>> {
    let net = load_network::<T>(cfg, checkpoint)?;
    export_attention(&net, image.cast(), out)
}

/// Writes the `P`, `E` and `G` maps of every recalibrated block for one
/// image, plus their half-plane statistics, into `out`.
pub fn cmd_export_attention(
    cfg: &RunConfig,
    manifest: &Manifest,
    checkpoint: &Path,
    source: &ExportSource,
) -> Result<Vec<MapStats>> {
    cfg.validate()?;
    let net = cfg.network_config()?;
    let (h, w) = (net.height, net.width);
    let raw: Vec<f64> = match source {
        ExportSource::Index { dataset, index } => {
            let data = load_eval_dataset(dataset)?;
            check_dataset(cfg, &data)?;
            if *index >= data.len() {
                return Err(Error::Input(format!(
                    "image index {index} out of range for {} samples",
                    data.len()
                )));
            }
            data.image(*index).to_vec()
        }
        ExportSource::Image(path) => {
            let t = load_tensor::<f64>(path)?;
            if t.len() != h * w || !(t.shape() == [h, w] || t.shape() == [1, 1, h, w]) {
                return Err(Error::Input(format!(
                    "image {} has shape {:?}, expected [{h},{w}] or [1,1,{h},{w}]",
                    path.display(),
                    t.shape()
                )));
            }
            t.into_data()
        }
    };
    let shift = manifest_mean(manifest)?.map_or(0.0, |m| m[0]);
    let image = Tensor::new(&[1, 1, h, w], raw.into_iter().map(|v| v - shift).collect())?;
    let out = cfg.out_dir();
    write_config(&out, cfg)?;
    match cfg.precision()? {
        Precision::F32 => export_typed::<f32>(cfg, checkpoint, &image, &out),
        Precision::F64 => export_typed::<f64>(cfg, checkpoint, &image, &out),
    }
}

/// Ablation axis of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Einit,
    Theta,
    Gate,
    Stages,
    Lambda,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "einit" => Ok(SweepAxis::Einit),
            "theta" => Ok(SweepAxis::Theta),
            "gate" => Ok(SweepAxis::Gate),
            "stages" => Ok(SweepAxis::Stages),
            "lambda" => Ok(SweepAxis::Lambda),
            other => Err(Error::Input(format!(
                "unknown sweep axis `{other}` (einit|theta|gate|stages|lambda)"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Einit => "einit",
            SweepAxis::Theta => "theta",
            SweepAxis::Gate => "gate",
            SweepAxis::Stages => "stages",
            SweepAxis::Lambda => "lambda",
        })
    }
}

impl SweepAxis {
    /// Values visited by the sweep. Stage placement visits every single
    /// stage of the configured network, then all of them.
    pub fn values(self, cfg: &RunConfig) -> Result<Vec<String>> {
        let list = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Ok(match self {
            SweepAxis::Einit => list(&["left", "right", "top", "bottom"]),
            SweepAxis::Theta => list(&["off", "25", "50", "75"]),
            SweepAxis::Gate => list(&["relu", "tanh", "softmax", "sigmoid"]),
            SweepAxis::Stages => {
                let stages = cfg.network_config()?.widths.len();
                let mut v: Vec<String> = (1..=stages).map(|s| s.to_string()).collect();
                v.push("all".into());
                v
            }
            SweepAxis::Lambda => list(&["0.2", "0.5", "0.8"]),
        })
    }

    /// Configuration of the run for `value`.
    pub fn apply(self, cfg: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut c = cfg.clone();
        match self {
            SweepAxis::Einit => c.set("net.einit", value)?,
            SweepAxis::Theta => c.set("net.theta", value)?,
            SweepAxis::Gate => c.set("net.gate", value)?,
            SweepAxis::Stages => c.set("net.pcr_stages", value)?,
            SweepAxis::Lambda => {
                c.set("loss.kind", "il")?;
                c.set("loss.lambda", value)?;
            }
        }
        Ok(c)
    }
}

/// One row of a sweep table.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: String,
    pub outcome: std::result::Result<(String, MetricsReport), String>,
}

pub const SWEEP_HEADER: &str = "axis,value,status,split,accuracy,sensitivity,f1,kappa";

impl SweepRow {
    pub fn csv(&self, axis: SweepAxis) -> String {
        match &self.outcome {
            Ok((split, m)) => format!(
                "{axis},{},ok,{split},{},{},{},{}",
                self.value, m.accuracy, m.sensitivity, m.f1, m.kappa
            ),
            Err(_) => format!("{axis},{},failed,,,,,", self.value),
        }
    }
}

/// Trains one run per axis value on the splits in `data.dir`, each in its own
/// subdirectory `<axis>_<value>` of `out`, and writes `sweep_<axis>.csv`.
/// A failed run is marked in the table and the sweep carries on.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let values = axis.values(cfg)?;
    let data = RunData::load(&cfg.data_dir())?;
    let out = cfg.out_dir();
    write_config(&out, cfg)?;
    let workers = cfg.workers()?.min(values.len()).max(1);

    let run = |value: &str| -> Result<(String, MetricsReport)> {
        let mut c = axis.apply(cfg, value)?;
        let dir = out.join(format!("{axis}_{value}"));
        c.set("out", &dir.to_string_lossy())?;
        if workers > 1 {
            c.set("workers", "1")?;
        }
        write_config(&dir, &c)?;
        let summary = fit(&c, &data, Some(&dir))?;
        let (split, report) = summary
            .headline()
            .ok_or_else(|| Error::Input("run finished without any evaluated epoch".into()))?;
        Ok((split.to_string(), report.clone()))
    };

    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; values.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(value) = values.get(i) else { break };
                log::info!("sweep {axis}={value}: starting");
                let outcome = run(value).map_err(|e| {
                    log::error!("sweep {axis}={value}: {e}");
                    e.to_string()
                });
                rows.lock().expect("sweep result lock")[i] = Some(SweepRow {
                    value: value.clone(),
                    outcome,
                });
            });
        }
    });
    let rows: Vec<SweepRow> = rows
        .into_inner()
        .expect("sweep result lock")
        .into_iter()
        .map(|r| r.expect("every sweep value visited"))
        .collect();

    let mut table = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        table.push_str(&r.csv(axis));
        table.push('\n');
    }
    write_file(&out.join(format!("sweep_{axis}.csv")), table)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theta_and_gate_axes_follow_the_ablation_rows() {
        let c = RunConfig::new();
        assert_eq!(SweepAxis::Theta.values(&c).unwrap(), ["off", "25", "50", "75"]);
        assert_eq!(SweepAxis::Gate.values(&c).unwrap(), ["relu", "tanh", "softmax", "sigmoid"]);
        assert_eq!(SweepAxis::Stages.values(&c).unwrap(), ["1", "2", "3", "all"]);
    }

    #[test]
    fn lambda_axis_switches_to_il() {
        let c = SweepAxis::Lambda.apply(&RunConfig::new(), "0.8").unwrap();
        assert_eq!(c.loss().unwrap(), crate::losses::LossConfig::Il { lambda: 0.8 });
    }

    #[test]
    fn mean_round_trips_through_manifest() {
        let m = vec![(MEAN_KEY.to_string(), join_values(&[0.1 + 0.2]))];
        assert_eq!(manifest_mean(&m).unwrap(), Some(vec![0.1 + 0.2]));
        let none = vec![(MEAN_KEY.to_string(), "none".to_string())];
        assert_eq!(manifest_mean(&none).unwrap(), None);
    }

    #[test]
    fn failed_row_keeps_its_columns() {
        let row = SweepRow {
            value: "4".into(),
            outcome: Err("bad".into()),
        };
        let line = row.csv(SweepAxis::Stages);
        assert_eq!(line.split(',').count(), SWEEP_HEADER.split(',').count());
        assert!(line.starts_with("stages,4,failed"));
    }
}
