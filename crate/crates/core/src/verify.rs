//! The gradient-check suite: every differentiable layer, the recalibration
//! modules, whole networks and the losses against central finite differences
//! on the 64-bit path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{bs_loss, ce_loss, il_loss, ClassFrequencies};
use crate::nn::{activation, batchnorm, conv2d, cross_channel_compress, linear, pool, Activation, BatchNormState, Compress, ConvGeometry, Mode, PoolKind};
use crate::pcr::{epga_forward, nearest_rank, percentile_index, prm_forward, recalibrate, EpgaSettings, Gate, Network, NetworkConfig, Theta};
use crate::tensor::gradcheck::{analytic_gradient, finite_diff_check, numeric_partial, relative_error};
use crate::tensor::{ReduceKind, Tape, Tensor, Var};

pub const STEP: f64 = 1e-6;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-6;
/// Least distance between a sampled percentile and its sorted neighbours at
/// a network check point.
pub const PERCENTILE_MARGIN: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{:<28} max_rel_err={:.3e} tol={:.0e} {}",
            self.name,
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Reduces any output to a scalar with fixed, position-dependent weights so
/// that no gradient cancels by symmetry.
fn probe(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let w = Tensor::from_fn(tape.shape(out), |i| (0.618 * i as f64 + 0.1).sin());
    let w = tape.constant(w);
    let y = tape.mul(out, w)?;
    tape.sum_all(y)
}

/// Worst error over every element of every input, each input checked with
/// the others held constant.
fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let g = |tape: &mut Tape<f64>, v: Var| {
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| if j == i { v } else { tape.constant(t.clone()) })
                .collect();
            let out = f(tape, &vars)?;
            probe(tape, out)
        };
        worst = worst.max(finite_diff_check(g, &inputs[i], STEP)?);
    }
    Ok(worst)
}

/// Smallest gap, over every sample of every recalibrated block, between the
/// sampled percentile of the coarse map and its neighbours in sorted order.
/// Infinite without sampled percentiles.
pub fn percentile_margin(cfg: &NetworkConfig, x: &Tensor<f64>, seed: u64) -> Result<f64> {
    let Theta::Percentile(theta) = cfg.pcr.epga.theta else {
        return Ok(f64::INFINITY);
    };
    let mut net = Network::<f64>::new(cfg.clone(), seed)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = net.forward(&mut tape, xv, Mode::Train)?;
    let mut margin = f64::INFINITY;
    for z in fwd.attention.iter().filter_map(|t| t.z) {
        let z = tape.value(z);
        let per_sample = z.shape()[2] * z.shape()[3];
        for map in z.data().chunks(per_sample) {
            let mut sorted = map.to_vec();
            sorted.sort_by(f64::total_cmp);
            let k = nearest_rank(theta, sorted.len()) - 1;
            if k > 0 {
                margin = margin.min(sorted[k] - sorted[k - 1]);
            }
            if k + 1 < sorted.len() {
                margin = margin.min(sorted[k + 1] - sorted[k]);
            }
        }
    }
    Ok(margin)
}

/// A uniform `[0,1)` input of the given shape at which every sampled
/// percentile of the network clears [`PERCENTILE_MARGIN`], so that no
/// central difference straddles a change of the selected element.
pub fn smooth_input(cfg: &NetworkConfig, shape: &[usize], seed: u64, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    const ATTEMPTS: usize = 64;
    for _ in 0..ATTEMPTS {
        let x = uniform(rng, shape, 0.0, 1.0);
        if percentile_margin(cfg, &x, seed)? >= PERCENTILE_MARGIN {
            return Ok(x);
        }
    }
    Err(Error::Numeric(format!(
        "no input among {ATTEMPTS} draws keeps every percentile {PERCENTILE_MARGIN} from a tie"
    )))
}

/// Flat index of the sampled percentile element of every coarse map of every
/// sample, with parameter `i` set to `value`.
fn selections(net: &mut Network<f64>, x: &Tensor<f64>, theta: f64, i: usize, value: Tensor<f64>) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = tape.param(value);
    let fwd = net.forward_with(&mut tape, xv, Mode::Train, Some((i, pv)))?;
    let mut out = Vec::new();
    for z in fwd.attention.iter().filter_map(|t| t.z) {
        let z = tape.value(z);
        let per_sample = z.shape()[2] * z.shape()[3];
        out.extend(z.data().chunks(per_sample).map(|m| percentile_index(m, theta)));
    }
    Ok(out)
}

/// Worst error over the learnable tensors of a network, `per_tensor`
/// evenly spaced elements of each (all of them when `None`).
///
/// A central difference is only meaningful where the function is smooth
/// across `±STEP`. An element whose perturbation changes which element of a
/// coarse map is the sampled percentile is passed over in favour of the next
/// one in its stretch of the tensor; a stretch without any such element is
/// reported and left unchecked.
pub fn network_check(cfg: &NetworkConfig, x: &Tensor<f64>, seed: u64, per_tensor: Option<usize>) -> Result<f64> {
    let mut net = Network::<f64>::new(cfg.clone(), seed)?;
    let mut scout = net.clone();
    let theta = match cfg.pcr.epga.theta {
        Theta::Percentile(t) => Some(t),
        Theta::Off => None,
    };
    let mut worst = 0.0f64;
    for i in 0..net.params().len() {
        if !net.params()[i].learnable {
            continue;
        }
        let value = net.params()[i].value.clone();
        let name = net.params()[i].name.clone();
        let mut smooth_at = |j: usize| -> Result<bool> {
            let Some(theta) = theta else { return Ok(true) };
            let at = selections(&mut scout, x, theta, i, value.clone())?;
            for delta in [STEP, -STEP] {
                let mut moved = value.clone();
                moved.data_mut()[j] += delta;
                if selections(&mut scout, x, theta, i, moved)? != at {
                    return Ok(false);
                }
            }
            Ok(true)
        };
        let stride = per_tensor.map_or(1, |k| (value.len() / k.max(1)).max(1));
        let mut chosen = Vec::new();
        for start in (0..value.len()).step_by(stride) {
            let mut found = None;
            for j in start..(start + stride).min(value.len()) {
                if smooth_at(j)? {
                    found = Some(j);
                    break;
                }
            }
            match found {
                Some(j) => chosen.push(j),
                None => log::warn!("{name}[{start}..{}]: every element sits on a percentile switch, unchecked", start + stride),
            }
        }
        let mut f = |tape: &mut Tape<f64>, v: Var| {
            let xv = tape.constant(x.clone());
            let out = net.forward_with(tape, xv, Mode::Train, Some((i, v)))?;
            probe(tape, out.logits)
        };
        let analytic = analytic_gradient(&mut f, &value)?;
        for j in chosen {
            let numeric = numeric_partial(&mut f, &value, j, STEP)?;
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Uniform values in `±[0.1, 1)`, away from the kink of relu.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Runs every check and returns one result per entry, in a fixed order.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64, tolerance: f64| {
        out.push(CheckResult {
            name: name.to_string(),
            max_rel_error: err,
            tolerance,
        })
    };
    let layer = LAYER_TOLERANCE;

    let a = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[1, 3, 1], -1.0, 1.0);
    let pair = [a.clone(), b];
    push("ew.add", check_inputs(&pair, |t, v| t.add(v[0], v[1]))?, layer);
    push("ew.sub", check_inputs(&pair, |t, v| t.sub(v[0], v[1]))?, layer);
    push("ew.mul", check_inputs(&pair, |t, v| t.mul(v[0], v[1]))?, layer);

    let m = [uniform(&mut rng, &[3, 4], -1.0, 1.0), uniform(&mut rng, &[4, 2], -1.0, 1.0)];
    push("matmul", check_inputs(&m, |t, v| t.matmul(v[0], v[1]))?, layer);

    let r = [a];
    push("reduce.sum", check_inputs(&r, |t, v| t.reduce(v[0], &[1], ReduceKind::Sum))?, layer);
    push("reduce.mean", check_inputs(&r, |t, v| t.reduce(v[0], &[0, 2], ReduceKind::Mean))?, layer);
    push("reduce.max", check_inputs(&r, |t, v| t.reduce(v[0], &[2], ReduceKind::Max))?, layer);

    let act = [off_zero(&mut rng, &[2, 1, 3, 3])];
    for (name, kind) in [
        ("activation.relu", Activation::Relu),
        ("activation.sigmoid", Activation::Sigmoid),
        ("activation.tanh", Activation::Tanh),
        ("activation.softmax_spatial", Activation::SoftmaxSpatial),
    ] {
        push(name, check_inputs(&act, |t, v| activation(t, v[0], kind))?, layer);
    }

    let conv = [
        uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0),
        uniform(&mut rng, &[4, 3, 3, 3], -0.5, 0.5),
        uniform(&mut rng, &[4], -0.5, 0.5),
    ];
    let err = check_inputs(&conv, |t, v| conv2d(t, v[0], v[1], Some(v[2]), ConvGeometry::new(1, 1)))?;
    push("conv2d", err, layer);
    let conv2 = [uniform(&mut rng, &[2, 3, 7, 7], -1.0, 1.0), uniform(&mut rng, &[4, 3, 3, 3], -0.5, 0.5)];
    let err = check_inputs(&conv2, |t, v| conv2d(t, v[0], v[1], None, ConvGeometry::new(2, 1)))?;
    push("conv2d.stride2", err, layer);

    let bn = [
        uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0),
        uniform(&mut rng, &[3], 0.5, 1.5),
        uniform(&mut rng, &[3], -0.5, 0.5),
    ];
    let err = check_inputs(&bn, |t, v| {
        let mut state = BatchNormState::new(3);
        batchnorm(t, v[0], &mut state, Some((v[1], v[2])), Mode::Train)
    })?;
    push("batchnorm", err, layer);

    let p = [uniform(&mut rng, &[2, 2, 4, 4], -1.0, 1.0)];
    let err = check_inputs(&p, |t, v| pool(t, v[0], PoolKind::MaxPool2d { kernel: 2, stride: 2 }))?;
    push("pool.max", err, layer);
    push("pool.global_avg", check_inputs(&p, |t, v| pool(t, v[0], PoolKind::GlobalAvg))?, layer);

    let cc = [uniform(&mut rng, &[2, 4, 5, 5], -1.0, 1.0)];
    push("compress.cap", check_inputs(&cc, |t, v| cross_channel_compress(t, v[0], Compress::Cap))?, layer);
    push("compress.cmp", check_inputs(&cc, |t, v| cross_channel_compress(t, v[0], Compress::Cmp))?, layer);

    let lin = [
        uniform(&mut rng, &[3, 5], -1.0, 1.0),
        uniform(&mut rng, &[5, 4], -1.0, 1.0),
        uniform(&mut rng, &[4], -1.0, 1.0),
    ];
    push("linear", check_inputs(&lin, |t, v| linear(t, v[0], v[1], v[2]))?, layer);

    let x = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let pmap = uniform(&mut rng, &[4, 4], 0.5, 1.5);
    let emap = uniform(&mut rng, &[4, 4], 0.0, 1.0);
    let prm = [x.clone(), pmap.clone()];
    let err = check_inputs(&prm, |t, v| {
        let mut state = BatchNormState::new(1);
        prm_forward(t, v[0], v[1], &mut state, None, Compress::Cap, Mode::Train)
    })?;
    push("prm", err, layer);

    let z = uniform(&mut rng, &[2, 1, 4, 4], -1.0, 1.0);
    for gate in Gate::ALL {
        let settings = EpgaSettings {
            gate,
            ..EpgaSettings::default()
        };
        let err = check_inputs(&[z.clone(), emap.clone()], |t, v| epga_forward(t, v[0], v[1], &settings, None))?;
        push(&format!("epga.{gate}"), err, layer);
    }

    let g = uniform(&mut rng, &[2, 1, 4, 4], 0.0, 1.0);
    push("recalibrate", check_inputs(&[x.clone(), g], |t, v| recalibrate(t, v[0], v[1]))?, layer);

    let chain = [x, pmap, emap];
    let err = check_inputs(&chain, |t, v| {
        let mut state = BatchNormState::new(1);
        let z = prm_forward(t, v[0], v[1], &mut state, None, Compress::Cap, Mode::Train)?;
        let g = epga_forward(t, z, v[2], &EpgaSettings::default(), None)?;
        recalibrate(t, v[0], g)
    })?;
    push("pcr_chain", err, layer);

    let block_cfg = NetworkConfig {
        height: 6,
        width: 6,
        classes: 3,
        widths: vec![3],
        blocks_per_stage: 1,
        pcr_stages: vec![1],
        ..NetworkConfig::tiny()
    };
    let xb = smooth_input(&block_cfg, &[2, 1, 6, 6], seed, &mut rng)?;
    push("res_pcr", network_check(&block_cfg, &xb, seed, None)?, layer);

    let tiny = NetworkConfig::tiny();
    let xt = smooth_input(&tiny, &[2, 1, 32, 32], seed, &mut rng)?;
    push("pcrnet_tiny", network_check(&tiny, &xt, seed, Some(4))?, layer);

    let logits = uniform(&mut rng, &[8, 4], -1.0, 1.0);
    let labels: Vec<usize> = (0..8).map(|_| rng.gen_range(0..4)).collect();
    let freq = ClassFrequencies::from_counts(&[1000, 1000, 1000, 100])?;
    let err = finite_diff_check(|t, v| ce_loss(t, v, &labels), &logits, STEP)?;
    push("loss.ce", err, LOSS_TOLERANCE);
    let err = finite_diff_check(|t, v| bs_loss(t, v, &labels, &freq), &logits, STEP)?;
    push("loss.bs", err, LOSS_TOLERANCE);
    let err = finite_diff_check(|t, v| il_loss(t, v, &labels, &freq, 0.5), &logits, STEP)?;
    push("loss.il", err, LOSS_TOLERANCE);
    Ok(out)
}
