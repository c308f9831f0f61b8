//! Flat `key = value` run configuration.
//!
//! Every key has a default. A configuration file lists overrides one per
//! line, `#` starts a comment, and unknown keys are rejected. The resolved
//! configuration is echoed with [`RunConfig::to_text`] and replaying that
//! text reproduces the run.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::Manifest;
use crate::data::{Augment, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind, DEFAULT_LAMBDA};
use crate::pcr::{EpgaSettings, NetworkConfig, PcrSettings};
use crate::train::{Schedule, TrainSettings};

/// Manifest keys with this prefix describe a checkpoint, not the run.
pub const CHECKPOINT_PREFIX: &str = "checkpoint.";

/// `(key, default, description)` for every recognised key, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "network initialisation, shuffling and augmentation seed"),
    ("precision", "32", "floating-point width of training and inference (32|64)"),
    ("workers", "1", "threads used for evaluation and sweeps"),
    ("out", "out", "output directory"),
    ("data.dir", "data", "directory holding train/val/test .pcrd files and frequencies.txt"),
    ("data.seed", "7", "seed of the synthetic generator"),
    ("data.height", "32", "image height"),
    ("data.width", "32", "image width"),
    ("data.classes", "4", "number of grades"),
    ("data.train_counts", "1000,1000,1000,1000", "training samples per class"),
    ("data.val_counts", "200,200,200,200", "validation samples per class"),
    ("data.test_counts", "200,200,200,200", "test samples per class"),
    ("data.region", "bottom", "half carrying the lesions (top|bottom|left|right)"),
    ("data.background", "0.2", "lowest background intensity"),
    ("data.noise", "0.2", "range of the background value noise"),
    ("data.noise_cell", "8", "lattice spacing of the value noise in pixels"),
    ("data.intensity", "0.55", "lesion peak of the highest grade"),
    ("data.intensity_jitter", "0.05", "uniform jitter of each lesion peak"),
    ("data.blobs_min", "1", "fewest lesions per positive image"),
    ("data.blobs_max", "3", "most lesions per positive image"),
    ("data.radius_min", "2", "smallest lesion radius in pixels"),
    ("data.radius_max", "4", "largest lesion radius in pixels"),
    ("net.widths", "16,32,64", "channel width of every stage"),
    ("net.blocks", "2", "residual blocks per stage"),
    ("net.pcr_stages", "all", "1-based stages with recalibration (all|none|comma list)"),
    ("net.compress", "cap", "cross-channel compression (cap|cmp|cap+cmp)"),
    ("net.prm_affine", "false", "learnable scale and shift after the PRM normalisation"),
    ("net.theta", "75", "percentile scaling the expert map, or off"),
    ("net.gate", "sigmoid", "attention gate (sigmoid|tanh|relu|softmax)"),
    ("net.qss_grad", "select", "gradient through the percentile (select|stop)"),
    ("net.einit", "bottom", "expert map initialisation (left|right|top|bottom|ones|zeros)"),
    ("net.midline", "exclude", "middle line of odd extents (exclude|include)"),
    ("net.e_learnable", "true", "whether the expert map is trained"),
    ("net.extra_conv", "off", "kernel of a conv before the gate (off|3|5|7)"),
    ("net.force_unit_gate", "false", "replace every attention map by 1"),
    ("loss.kind", "ce", "training loss (ce|bs|il)"),
    ("loss.lambda", "0.5", "weight of the balanced term, only with loss.kind=il"),
    ("train.epochs", "150", "number of epochs"),
    ("train.batch_size", "32", "mini-batch size"),
    ("train.lr", "0.0025", "initial learning rate"),
    ("train.lr_decay", "5", "divisor applied every lr_step epochs"),
    ("train.lr_step", "20", "epochs between learning-rate decays"),
    ("train.lr_floor", "0.00035", "learning rate from lr_floor_from on"),
    ("train.lr_floor_from", "100", "0-based epoch at which the floor starts"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.weight_decay", "0", "L2 weight decay"),
    ("train.flip_prob", "0.5", "probability of a horizontal flip"),
    ("train.crop_pad", "4", "zero padding of the random crop, 0 disables it"),
    ("train.normalize", "true", "subtract the training-set mean from every image"),
    ("eval.averaging", "macro", "averaging of sensitivity and F1 (macro|micro)"),
    ("eval.batch_size", "200", "inference batch size"),
];

/// Arithmetic used by a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" | "f32" => Ok(Precision::F32),
            "64" | "f64" => Ok(Precision::F64),
            other => Err(Error::config("precision", format!("`{other}` is not 32 or 64"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "32",
            Precision::F64 => "64",
        })
    }
}

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    overrides: HashMap<String, String>,
}

impl RunConfig {
    /// Every key at its default.
    pub fn new() -> Self {
        Self::default()
    }

    /// Annotated listing of every key with its default.
    pub fn defaults_text() -> String {
        KEYS.iter().map(|(k, d, doc)| format!("# {doc}\n{k}={d}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if default_of(key).is_none() {
            return Err(Error::config(key, "unknown key"));
        }
        self.overrides.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(Error::Input(format!("expected key=value, got `{pair}`")));
        };
        self.set(k, v)
    }

    /// Applies every assignment of a configuration text. A key may appear
    /// only once per text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Input(format!("config line {}: expected key=value, got `{line}`", no + 1)));
            };
            let k = k.trim();
            if seen.contains(&k) {
                return Err(Error::config(k, format!("assigned twice (line {})", no + 1)));
            }
            seen.push(k);
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::new();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Run configuration recorded in a checkpoint manifest.
    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let mut c = Self::new();
        for (k, v) in m.iter().filter(|(k, _)| !k.starts_with(CHECKPOINT_PREFIX)) {
            c.set(k, v)?;
        }
        Ok(c)
    }

    /// Current value of `key`.
    ///
    /// # Panics
    /// On a key missing from [`KEYS`].
    pub fn get(&self, key: &str) -> &str {
        match self.overrides.get(key) {
            Some(v) => v,
            None => default_of(key).unwrap_or_else(|| panic!("unknown configuration key `{key}`")),
        }
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.overrides.contains_key(key)
    }

    fn value<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| Error::config(key, format!("cannot parse `{raw}`")))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::config(key, format!("`{other}` is not true or false"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::config(key, format!("cannot parse list entry `{}`", s.trim())))
            })
            .collect()
    }

    /// Resolved `(key, value)` pairs in [`KEYS`] order. `loss.lambda` is left
    /// out unless the loss is IL.
    pub fn entries(&self) -> Vec<(String, String)> {
        let il = self.get("loss.kind").eq_ignore_ascii_case("il");
        KEYS.iter()
            .filter(|(k, _, _)| il || *k != "loss.lambda")
            .map(|(k, _, _)| (k.to_string(), self.get(k).to_string()))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parses every key and checks the cross-key rules.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.precision()?;
        self.workers()?;
        self.normalize()?;
        self.synthetic_spec()?.validate()?;
        self.network_config()?.validate()?;
        self.train_settings()?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.value("seed")
    }

    pub fn precision(&self) -> Result<Precision> {
        self.get("precision").parse()
    }

    pub fn workers(&self) -> Result<usize> {
        let w: usize = self.value("workers")?;
        if w == 0 {
            return Err(Error::config("workers", "must be positive"));
        }
        Ok(w)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(self.get("data.dir"))
    }

    pub fn normalize(&self) -> Result<bool> {
        self.flag("train.normalize")
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        Ok(SyntheticSpec {
            height: self.value("data.height")?,
            width: self.value("data.width")?,
            classes: self.value("data.classes")?,
            train_counts: self.list("data.train_counts")?,
            val_counts: self.list("data.val_counts")?,
            test_counts: self.list("data.test_counts")?,
            region: self.get("data.region").parse()?,
            background: self.value("data.background")?,
            noise: self.value("data.noise")?,
            noise_cell: self.value("data.noise_cell")?,
            intensity: self.value("data.intensity")?,
            intensity_jitter: self.value("data.intensity_jitter")?,
            blobs: (self.value("data.blobs_min")?, self.value("data.blobs_max")?),
            radius: (self.value("data.radius_min")?, self.value("data.radius_max")?),
            seed: self.value("data.seed")?,
        })
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let widths: Vec<usize> = self.list("net.widths")?;
        let pcr_stages = match self.get("net.pcr_stages") {
            "all" => (1..=widths.len()).collect(),
            "none" => Vec::new(),
            _ => self.list("net.pcr_stages")?,
        };
        let extra_conv = match self.get("net.extra_conv") {
            "off" => None,
            _ => Some(self.value("net.extra_conv")?),
        };
        let cfg = NetworkConfig {
            in_channels: 1,
            height: self.value("data.height")?,
            width: self.value("data.width")?,
            classes: self.value("data.classes")?,
            widths,
            blocks_per_stage: self.value("net.blocks")?,
            pcr_stages,
            pcr: PcrSettings {
                compress: self.get("net.compress").parse()?,
                prm_affine: self.flag("net.prm_affine")?,
                epga: EpgaSettings {
                    theta: self.get("net.theta").parse()?,
                    gate: self.get("net.gate").parse()?,
                    qss_grad: self.get("net.qss_grad").parse()?,
                },
                einit: self.get("net.einit").parse()?,
                midline: self.get("net.midline").parse()?,
                e_learnable: self.flag("net.e_learnable")?,
                extra_conv,
            },
            force_unit_gate: self.flag("net.force_unit_gate")?,
        };
        Ok(cfg)
    }

    pub fn loss(&self) -> Result<LossConfig> {
        let kind: LossKind = self.get("loss.kind").parse()?;
        if kind != LossKind::Il && self.is_set("loss.lambda") {
            return Err(Error::config("loss.lambda", "only applies to loss.kind=il"));
        }
        Ok(match kind {
            LossKind::Ce => LossConfig::Ce,
            LossKind::Bs => LossConfig::Bs,
            LossKind::Il if self.is_set("loss.lambda") => LossConfig::il(self.value("loss.lambda")?)?,
            LossKind::Il => LossConfig::il(DEFAULT_LAMBDA)?,
        })
    }

    pub fn train_settings(&self) -> Result<TrainSettings> {
        let schedule = Schedule {
            initial: self.value("train.lr")?,
            decay: self.value("train.lr_decay")?,
            step: self.value("train.lr_step")?,
            floor: self.value("train.lr_floor")?,
            floor_from: self.value("train.lr_floor_from")?,
            epochs: self.value("train.epochs")?,
            batch_size: self.value("train.batch_size")?,
        };
        schedule.validate()?;
        let flip_prob: f64 = self.value("train.flip_prob")?;
        if !(0.0..=1.0).contains(&flip_prob) {
            return Err(Error::config("train.flip_prob", format!("{flip_prob} is not a probability")));
        }
        let eval_batch: usize = self.value("eval.batch_size")?;
        if eval_batch == 0 {
            return Err(Error::config("eval.batch_size", "must be positive"));
        }
        Ok(TrainSettings {
            schedule,
            momentum: self.value("train.momentum")?,
            weight_decay: self.value("train.weight_decay")?,
            augment: Augment {
                flip_prob,
                crop_pad: self.value("train.crop_pad")?,
            },
            loss: self.loss()?,
            averaging: self.get("eval.averaging").parse()?,
            eval_batch,
            workers: self.workers()?,
            seed: self.seed()?,
        })
    }
}
