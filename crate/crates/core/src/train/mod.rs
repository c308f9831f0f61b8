//! Stochastic gradient descent with a step learning-rate schedule, the
//! training loop and evaluation.

mod metrics;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, Augment, Dataset};
use crate::error::{Error, Result};
use crate::losses::{ClassFrequencies, LossConfig};
use crate::nn::Mode;
use crate::pcr::{Network, Param};
use crate::tensor::{Real, Tape, Tensor};

pub use metrics::{argmax, Averaging, Confusion, MetricsReport};

/// Step schedule: `initial` divided by `decay` every `step` epochs, replaced
/// by `floor` from epoch `floor_from` on.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub initial: f64,
    pub decay: f64,
    pub step: usize,
    pub floor: f64,
    pub floor_from: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            initial: 0.0025,
            decay: 5.0,
            step: 20,
            floor: 0.00035,
            floor_from: 100,
            epochs: 150,
            batch_size: 32,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.floor > 0.0) {
            return Err(Error::config("train.lr", "learning rates must be positive"));
        }
        if self.decay.is_nan() || self.decay < 1.0 {
            return Err(Error::config("train.lr_decay", format!("decay factor {} below 1", self.decay)));
        }
        if self.step == 0 {
            return Err(Error::config("train.lr_step", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Learning rate of the 0-based `epoch`.
pub fn lr_at(epoch: usize, s: &Schedule) -> f64 {
    if epoch >= s.floor_from {
        return s.floor;
    }
    let steps = (epoch / s.step) as i32;
    s.initial / s.decay.powi(steps)
}

/// Momentum buffers, one per learnable parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Option<Tensor<T>>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[Param<T>], lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            velocity: params
                .iter()
                .map(|p| p.learnable.then(|| Tensor::zeros_like(&p.value)))
                .collect(),
            lr,
            momentum,
            weight_decay,
        }
    }
}

/// `v ← momentum·v + g + weight_decay·p`, then `p ← p - lr·v`, for every
/// learnable parameter. The gradients are zeroed afterwards.
pub fn sgd_step<T: Real>(
    params: &mut [Param<T>],
    grads: &mut [Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    let (lr, mu, wd) = (T::of(state.lr), T::of(state.momentum), T::of(state.weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads.iter_mut()).zip(&mut state.velocity) {
        if !p.learnable {
            continue;
        }
        let (Some(g), Some(v)) = (g.as_mut(), v.as_mut()) else {
            return Err(Error::Contract(format!("no gradient for parameter `{}`", p.name)));
        };
        if g.shape() != p.value.shape() {
            return Err(Error::Contract(format!(
                "gradient shape {:?} for parameter `{}` of shape {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
        for ((pv, gv), vv) in p.value.data_mut().iter_mut().zip(g.data_mut()).zip(v.data_mut()) {
            let step = *gv + wd * *pv;
            *vv = mu * *vv + step;
            *pv = *pv - lr * *vv;
            *gv = T::zero();
        }
    }
    Ok(())
}

/// Everything the training loop needs besides the network and data.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: Augment,
    pub loss: LossConfig,
    pub averaging: Averaging,
    pub eval_batch: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            schedule: Schedule::default(),
            momentum: 0.9,
            weight_decay: 0.0,
            augment: Augment::default(),
            loss: LossConfig::Ce,
            averaging: Averaging::Macro,
            eval_batch: 200,
            workers: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: MetricsReport,
}

impl EpochRecord {
    pub fn line(&self) -> String {
        format!(
            "epoch={} lr={} train_loss={} val_acc={} val_sen={} val_f1={} val_kappa={}",
            self.epoch, self.lr, self.train_loss, self.val.accuracy, self.val.sensitivity, self.val.f1, self.val.kappa
        )
    }
}

pub struct TrainOutcome<T> {
    /// Network of the epoch with the highest validation accuracy, the
    /// earliest on ties; the initial network when no epoch ran.
    pub best: Network<T>,
    pub best_epoch: Option<usize>,
    pub last: Network<T>,
    pub history: Vec<EpochRecord>,
}

fn check_compatible<T: Real>(net: &Network<T>, d: &Dataset) -> Result<()> {
    let c = net.config();
    if d.classes() != c.classes {
        return Err(Error::config(
            "data.classes",
            format!("{} split has {} classes but the network has {}", d.split(), d.classes(), c.classes),
        ));
    }
    if (d.height(), d.width()) != (c.height, c.width) || c.in_channels != 1 {
        return Err(Error::config(
            "data.height",
            format!(
                "{} split images are 1x{}x{} but the network expects {}x{}x{}",
                d.split(),
                d.height(),
                d.width(),
                c.in_channels,
                c.height,
                c.width
            ),
        ));
    }
    Ok(())
}

fn annotate(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

/// Trains `network` with shuffled, augmented mini-batches and evaluates on
/// `val` after every epoch. `on_epoch` sees each history record as it is made.
pub fn train<T: Real>(
    network: Network<T>,
    train: &Dataset,
    val: &Dataset,
    freq: Option<&ClassFrequencies>,
    s: &TrainSettings,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    s.schedule.validate()?;
    check_compatible(&network, train)?;
    check_compatible(&network, val)?;
    if s.loss.needs_frequencies() {
        match freq {
            None => return Err(Error::config("loss.kind", format!("{} loss needs class frequencies", s.loss))),
            Some(f) if f.classes() != train.classes() => {
                return Err(Error::config(
                    "data.classes",
                    format!("{} class frequencies for {} classes", f.classes(), train.classes()),
                ))
            }
            _ => {}
        }
    }
    let mut net = network;
    let mut best = net.clone();
    let mut best_epoch = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(s.schedule.epochs);
    let mut opt = OptimizerState::new(net.params(), s.schedule.initial, s.momentum, s.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(11);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..s.schedule.epochs {
        opt.lr = lr_at(epoch, &s.schedule);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(s.schedule.batch_size).enumerate() {
            let (images, labels) = train.batch::<T>(idx);
            let images = augment(&images, &mut rng, &s.augment)?;
            let mut tape = Tape::new();
            let x = tape.constant(images);
            let fwd = net.forward(&mut tape, x, Mode::Train).map_err(|e| annotate(e, epoch + 1, b))?;
            let loss = s
                .loss
                .apply(&mut tape, fwd.logits, &labels, freq)
                .map_err(|e| annotate(e, epoch + 1, b))?;
            let value = tape.value(loss).item().f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("epoch {}, batch {b}: loss is {value}", epoch + 1)));
            }
            loss_sum += value * idx.len() as f64;
            tape.backward(loss).map_err(|e| annotate(e, epoch + 1, b))?;
            let mut grads: Vec<Option<Tensor<T>>> = fwd
                .params
                .iter()
                .zip(net.params())
                .map(|(&v, p)| if p.learnable { tape.take_grad(v) } else { None })
                .collect();
            sgd_step(net.params_mut(), &mut grads, &mut opt)?;
        }
        let report = evaluate(&net, val, s.eval_batch, s.workers, s.averaging)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: opt.lr,
            train_loss: loss_sum / train.len() as f64,
            val: report,
        };
        log::info!("{}", record.line());
        if record.val.accuracy > best_acc {
            best_acc = record.val.accuracy;
            best_epoch = Some(epoch + 1);
            best = net.clone();
        }
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: net,
        history,
    })
}

/// Eval-mode logits of the listed samples, in order.
pub fn predict_logits<T: Real>(net: &Network<T>, data: &Dataset, indices: &[usize], batch: usize) -> Result<Vec<Vec<f64>>> {
    check_compatible(net, data)?;
    let mut net = net.clone();
    let mut out = Vec::with_capacity(indices.len());
    for idx in indices.chunks(batch.max(1)) {
        let (images, _) = data.batch::<T>(idx);
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let fwd = net.forward(&mut tape, x, Mode::Eval)?;
        let logits = tape.value(fwd.logits);
        let k = logits.shape()[1];
        out.extend(logits.data().chunks(k).map(|r| r.iter().map(|v| v.f64()).collect()));
    }
    Ok(out)
}

/// Argmax class of every sample, the dataset split into `workers`
/// contiguous ranges evaluated concurrently and merged in order.
pub fn predict<T: Real>(net: &Network<T>, data: &Dataset, batch: usize, workers: usize) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..data.len()).collect();
    let chunk = data.len().div_ceil(workers.max(1)).max(1);
    let parts: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = all
            .chunks(chunk)
            .map(|idx| scope.spawn(move || predict_logits(net, data, idx, batch)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for part in parts {
        out.extend(part?.iter().map(|r| argmax(r)));
    }
    Ok(out)
}

pub fn evaluate<T: Real>(
    net: &Network<T>,
    data: &Dataset,
    batch: usize,
    workers: usize,
    averaging: Averaging,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    let predicted = predict(net, data, batch, workers)?;
    MetricsReport::score(data.classes(), data.labels(), &predicted, averaging)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::pcr::NetworkConfig;

    fn scalar_param(v: f64) -> Vec<Param<f64>> {
        vec![Param {
            name: "w".into(),
            value: Tensor::scalar(v),
            learnable: true,
        }]
    }

    #[test]
    fn vanilla_step() {
        let mut p = scalar_param(1.0);
        let mut opt = OptimizerState::new(&p, 0.1, 0.0, 0.0);
        let mut g = vec![Some(Tensor::scalar(2.0))];
        sgd_step(&mut p, &mut g, &mut opt).unwrap();
        assert!((p[0].value.item() - 0.8).abs() < 1e-15);
        assert_eq!(g[0].as_ref().unwrap().item(), 0.0);
    }

    #[test]
    fn momentum_recursion() {
        let mut p = scalar_param(0.0);
        let mut opt = OptimizerState::new(&p, 0.1, 0.9, 0.0);
        for _ in 0..2 {
            let mut g = vec![Some(Tensor::scalar(1.0))];
            sgd_step(&mut p, &mut g, &mut opt).unwrap();
        }
        assert!((p[0].value.item() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar_param(0.7);
        let mut opt = OptimizerState::new(&p, 0.1, 0.9, 0.0);
        let mut g = vec![Some(Tensor::scalar(0.0))];
        sgd_step(&mut p, &mut g, &mut opt).unwrap();
        assert_eq!(p[0].value.item(), 0.7);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut p = scalar_param(0.0);
        let mut opt = OptimizerState::new(&p, 0.1, 0.9, 0.0);
        assert!(matches!(sgd_step(&mut p, &mut [None], &mut opt), Err(Error::Contract(_))));
    }

    #[test]
    fn schedule_values() {
        let s = Schedule::default();
        assert_eq!(lr_at(0, &s), 0.0025);
        assert_eq!(lr_at(19, &s), 0.0025);
        assert!((lr_at(20, &s) - 0.0005).abs() < 1e-18);
        assert!((lr_at(40, &s) - 0.0001).abs() < 1e-18);
        assert_eq!(lr_at(100, &s), 0.00035);
        assert_eq!(lr_at(149, &s), 0.00035);
        assert!((0..s.epochs).all(|e| lr_at(e, &s) > 0.0));
    }

    fn tiny_setup() -> (NetworkConfig, crate::data::Splits) {
        let spec = SyntheticSpec {
            height: 8,
            width: 8,
            train_counts: vec![6; 4],
            val_counts: vec![3; 4],
            test_counts: vec![3; 4],
            radius: (1.0, 1.5),
            noise_cell: 4,
            ..SyntheticSpec::balanced(3)
        };
        let cfg = NetworkConfig {
            height: 8,
            width: 8,
            widths: vec![4, 8],
            blocks_per_stage: 1,
            pcr_stages: vec![1, 2],
            ..NetworkConfig::tiny()
        };
        (cfg, generate_synthetic(&spec).unwrap())
    }

    #[test]
    fn zero_epochs_return_initial_network() {
        let (cfg, d) = tiny_setup();
        let net = Network::<f32>::new(cfg, 1).unwrap();
        let s = TrainSettings {
            schedule: Schedule {
                epochs: 0,
                ..Schedule::default()
            },
            ..TrainSettings::default()
        };
        let out = train(net.clone(), &d.train, &d.val, None, &s, |_| {}).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.best_epoch, None);
        assert_eq!(out.best.params(), net.params());
    }

    #[test]
    fn fixed_seed_gives_identical_history() {
        let (cfg, d) = tiny_setup();
        let s = TrainSettings {
            schedule: Schedule {
                epochs: 2,
                batch_size: 8,
                ..Schedule::default()
            },
            seed: 4,
            ..TrainSettings::default()
        };
        let run = || {
            let net = Network::<f32>::new(cfg.clone(), 4).unwrap();
            train(net, &d.train, &d.val, None, &s, |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.last.params(), b.last.params());
        assert_eq!(a.history.len(), 2);
        assert!(a.history[0].line().starts_with("epoch=1 lr=0.0025 train_loss="));
    }

    #[test]
    fn workers_do_not_change_predictions() {
        let (cfg, d) = tiny_setup();
        let net = Network::<f64>::new(cfg, 2).unwrap();
        assert_eq!(predict(&net, &d.val, 5, 1).unwrap(), predict(&net, &d.val, 5, 3).unwrap());
    }

    #[test]
    fn balanced_loss_without_frequencies_is_rejected() {
        let (cfg, d) = tiny_setup();
        let net = Network::<f32>::new(cfg, 1).unwrap();
        let s = TrainSettings {
            loss: LossConfig::Bs,
            ..TrainSettings::default()
        };
        assert!(matches!(
            train(net, &d.train, &d.val, None, &s, |_| {}),
            Err(Error::Config { .. })
        ));
    }
}
