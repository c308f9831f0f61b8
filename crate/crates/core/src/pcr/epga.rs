use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{conv2d, ConvGeometry};
use crate::tensor::{BackwardCtx, GradFn, Real, Tape, Tensor, Var};

pub const DEFAULT_THETA: f64 = 75.0;

/// Gating operator turning the refined map into attention weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Gate {
    #[default]
    Sigmoid,
    Tanh,
    Relu,
    /// Softmax over the H×W positions of each sample.
    Softmax,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Relu, Gate::Tanh, Gate::Softmax, Gate::Sigmoid];
}

impl FromStr for Gate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Gate::Sigmoid),
            "tanh" => Ok(Gate::Tanh),
            "relu" => Ok(Gate::Relu),
            "softmax" => Ok(Gate::Softmax),
            other => Err(Error::config(
                "net.gate",
                format!("unknown gate `{other}` (sigmoid|tanh|relu|softmax)"),
            )),
        }
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gate::Sigmoid => "sigmoid",
            Gate::Tanh => "tanh",
            Gate::Relu => "relu",
            Gate::Softmax => "softmax",
        })
    }
}

/// Percentile used to scale the expert map. `Off` adds `E` unscaled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Theta {
    Percentile(f64),
    Off,
}

impl Default for Theta {
    fn default() -> Self {
        Theta::Percentile(DEFAULT_THETA)
    }
}

impl FromStr for Theta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "off" {
            return Ok(Theta::Off);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::config("net.theta", format!("`{s}` is not a number or `off`")))?;
        if !(v > 0.0 && v < 100.0) {
            return Err(Error::config("net.theta", format!("{v} is outside (0, 100)")));
        }
        Ok(Theta::Percentile(v))
    }
}

impl fmt::Display for Theta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Theta::Percentile(v) => write!(f, "{v}"),
            Theta::Off => f.write_str("off"),
        }
    }
}

/// Gradient treatment of the sampled percentile.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum QssGrad {
    /// The percentile is the value of one element of `Z`; its gradient goes there.
    #[default]
    Select,
    /// Treat the percentile as a constant.
    Stop,
}

impl FromStr for QssGrad {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "select" => Ok(QssGrad::Select),
            "stop" => Ok(QssGrad::Stop),
            other => Err(Error::config(
                "net.qss_grad",
                format!("unknown mode `{other}` (select|stop)"),
            )),
        }
    }
}

impl fmt::Display for QssGrad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QssGrad::Select => "select",
            QssGrad::Stop => "stop",
        })
    }
}

/// 1-indexed nearest rank `⌈θ/100 · n⌉`, clamped to `[1, n]`.
pub fn nearest_rank(theta: f64, n: usize) -> usize {
    let r = (theta * n as f64 / 100.0).ceil();
    (r.max(1.0) as usize).min(n)
}

/// Position (within `values`) of the nearest-rank `theta`-th percentile.
/// Ties in value are ordered by position.
pub fn percentile_index<T: Real>(values: &[T], theta: f64) -> usize {
    let rank = nearest_rank(theta, values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        values[*a]
            .partial_cmp(&values[*b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    let (_, nth, _) = order.select_nth_unstable_by(rank - 1, cmp);
    *nth
}

/// Per-sample nearest-rank percentile of `z: [N, ...]`.
pub fn qss<T: Real>(z: &Tensor<T>, theta: f64) -> Result<Tensor<T>> {
    if !(theta > 0.0 && theta < 100.0) {
        return Err(Error::Domain(format!("percentile {theta} outside (0, 100)")));
    }
    let n = z.shape().first().copied().unwrap_or(1);
    let per = z.len() / n;
    let data = z
        .data()
        .chunks(per)
        .map(|s| s[percentile_index(s, theta)])
        .collect();
    Tensor::new(&[n], data)
}

struct QssGradFn {
    selected: Vec<usize>,
}

impl<T: Real> GradFn<T> for QssGradFn {
    fn name(&self) -> &'static str {
        "qss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut gz = Tensor::zeros_like(ctx.input(0));
        for (o, &i) in self.selected.iter().enumerate() {
            gz.data_mut()[i] = g.data()[o];
        }
        Ok(vec![Some(gz)])
    }
}

/// Records the per-sample percentile of `z: [N,1,H,W]` as `[N,1,1,1]`.
pub fn qss_op<T: Real>(tape: &mut Tape<T>, z: Var, theta: f64, grad: QssGrad) -> Result<Var> {
    let zv = tape.value(z);
    if !(theta > 0.0 && theta < 100.0) {
        return Err(Error::Domain(format!("percentile {theta} outside (0, 100)")));
    }
    let n = zv.shape()[0];
    let per = zv.len() / n;
    let selected: Vec<usize> = zv
        .data()
        .chunks(per)
        .enumerate()
        .map(|(s, chunk)| s * per + percentile_index(chunk, theta))
        .collect();
    let mut shape = vec![1; zv.rank()];
    shape[0] = n;
    let value = Tensor::new(&shape, selected.iter().map(|&i| zv.data()[i]).collect())?;
    match grad {
        QssGrad::Stop => Ok(tape.constant(value)),
        QssGrad::Select => tape.push(value, vec![z], Box::new(QssGradFn { selected })),
    }
}

/// Settings of one expert-guidance adapter.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpgaSettings {
    pub theta: Theta,
    pub gate: Gate,
    pub qss_grad: QssGrad,
}

/// Attention map `G = gate(μ·E + Z)` with `μ` the per-sample percentile of `Z`.
///
/// `z` is `[N,1,H,W]`, `e` is `[H,W]`. `local_conv`, when given, is a
/// `[1,1,k,k]` kernel applied (same padding) to the refined map before gating.
pub fn epga_forward<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    e: Var,
    settings: &EpgaSettings,
    local_conv: Option<Var>,
) -> Result<Var> {
    let zs = tape.shape(z).to_vec();
    let es = tape.shape(e).to_vec();
    if zs.len() != 4 || zs[1] != 1 || es.len() != 2 || zs[2..] != es[..] {
        return Err(Error::Shape(format!(
            "expert map {es:?} does not match coarse map {zs:?}"
        )));
    }
    let e4 = tape.reshape(e, &[1, 1, es[0], es[1]])?;
    let bias = match settings.theta {
        Theta::Percentile(theta) => {
            let mu = qss_op(tape, z, theta, settings.qss_grad)?;
            tape.mul(mu, e4)?
        }
        Theta::Off => e4,
    };
    let mut refined = tape.add(z, bias)?;
    if let Some(k) = local_conv {
        let pad = tape.shape(k)[2] / 2;
        refined = conv2d(tape, refined, k, None, ConvGeometry::new(1, pad))?;
    }
    match settings.gate {
        Gate::Sigmoid => tape.sigmoid(refined),
        Gate::Tanh => tape.tanh(refined),
        Gate::Relu => tape.relu(refined),
        Gate::Softmax => tape.softmax_spatial(refined),
    }
}

/// `x̂(n,c,i,j) = x(n,c,i,j) · g(n,i,j)` for `x: [N,C,H,W]`, `g: [N,1,H,W]`.
pub fn recalibrate<T: Real>(tape: &mut Tape<T>, x: Var, g: Var) -> Result<Var> {
    let xs = tape.shape(x);
    let gs = tape.shape(g);
    if xs.len() != 4 || gs.len() != 4 || gs[1] != 1 || xs[0] != gs[0] || xs[2..] != gs[2..] {
        return Err(Error::Shape(format!(
            "attention map {gs:?} does not match features {xs:?}"
        )));
    }
    tape.mul(x, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcr::expert::{init_expert_map, InitMode, Midline};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sorted_oracle(values: &[f64], theta: u32) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        let rank = (theta as usize * n).div_ceil(100).clamp(1, n);
        v[rank - 1]
    }

    #[test]
    fn hand_percentiles() {
        let t = Tensor::new(&[1, 4], vec![4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(qss(&t, 75.0).unwrap().data(), &[3.0]);
        let t = Tensor::new(&[1, 2], vec![20.0, 10.0]).unwrap();
        assert_eq!(qss(&t, 50.0).unwrap().data(), &[10.0]);
        let c = Tensor::full(&[2, 3, 3], 0.4);
        assert_eq!(qss(&c, 13.0).unwrap().data(), &[0.4, 0.4]);
    }

    #[test]
    fn nearest_rank_is_exact_on_integer_products() {
        for n in 1..=256 {
            for theta in 1..100usize {
                assert_eq!(nearest_rank(theta as f64, n), ((theta * n).div_ceil(100)).max(1));
            }
        }
    }

    #[test]
    fn theta_outside_open_interval_rejected() {
        let t = Tensor::<f64>::zeros(&[1, 4]);
        assert!(qss(&t, 0.0).is_err());
        assert!(qss(&t, 100.0).is_err());
        assert!("100".parse::<Theta>().is_err());
        assert_eq!("off".parse::<Theta>().unwrap(), Theta::Off);
    }

    proptest! {
        #[test]
        fn qss_matches_sort_oracle(h in 1usize..17, w in 1usize..17, theta in 1u32..100, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Tensor::from_fn(&[2, h * w], |_| rng.gen_range(-3.0..3.0));
            let got = qss(&z, theta as f64).unwrap();
            for s in 0..2 {
                prop_assert_eq!(got.data()[s], sorted_oracle(&z.data()[s * h * w..(s + 1) * h * w], theta));
            }
        }

        #[test]
        fn qss_positively_homogeneous(theta in 1u32..100, c in 0.01f64..100.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // powers of two keep the scaled values exact
            let scale = 2f64.powi((c.log2().round()) as i32);
            let z = Tensor::from_fn(&[1, 36], |_| rng.gen_range(-3.0..3.0));
            let zs = z.map(|v| v * scale);
            prop_assert_eq!(qss(&zs, theta as f64).unwrap().item(), scale * qss(&z, theta as f64).unwrap().item());
        }
    }

    fn gate_map(z: Tensor<f64>, e: Tensor<f64>, gate: Gate) -> Tensor<f64> {
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let ev = tape.constant(e);
        let s = EpgaSettings { gate, ..Default::default() };
        let g = epga_forward(&mut tape, zv, ev, &s, None).unwrap();
        tape.value(g).clone()
    }

    #[test]
    fn zero_expert_map_gives_plain_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::from_fn(&[2, 1, 3, 3], |_| rng.gen_range(-2.0..2.0));
        let g = gate_map(z.clone(), Tensor::zeros(&[3, 3]), Gate::Sigmoid);
        for (a, b) in g.data().iter().zip(z.data()) {
            assert_eq!(*a, 1.0 / (1.0 + (-b).exp()));
        }
    }

    #[test]
    fn zero_coarse_map_gives_half() {
        let g = gate_map(Tensor::zeros(&[1, 1, 4, 4]), Tensor::ones(&[4, 4]), Gate::Sigmoid);
        assert!(g.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn bottom_expert_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, w) = (6, 5);
        let z = Tensor::from_fn(&[3, 1, h, w], |_| rng.gen_range(-2.0..2.0));
        let e: Tensor<f64> = init_expert_map(InitMode::Bottom, h, w, Midline::Exclude).unwrap();
        let g = gate_map(z.clone(), e.clone(), Gate::Sigmoid);
        for s in 0..3 {
            let zs = &z.data()[s * h * w..(s + 1) * h * w];
            let mu = sorted_oracle(zs, 75);
            for (i, (&zv, &ev)) in zs.iter().zip(e.data()).enumerate() {
                let expect = 1.0 / (1.0 + (-(zv + mu * ev)).exp());
                let got = g.data()[s * h * w + i];
                assert_eq!(got, expect);
                assert!(got > 0.0 && got < 1.0);
            }
        }
    }

    #[test]
    fn recalibration_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.gen_range(-2.0..2.0));
        let run = |g: Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let gv = tape.constant(g);
            let y = recalibrate(&mut tape, xv, gv).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(Tensor::ones(&[2, 1, 4, 4])), x);
        assert!(run(Tensor::zeros(&[2, 1, 4, 4])).data().iter().all(|&v| v == 0.0));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let gv = tape.constant(Tensor::ones(&[2, 1, 4, 3]));
        assert!(matches!(recalibrate(&mut tape, xv, gv), Err(Error::Shape(_))));
    }

    #[test]
    fn sigmoid_recalibration_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x: Tensor<f64> = Tensor::from_fn(&[2, 3, 5, 5], |_| rng.gen_range(-2.0..2.0));
        let z = Tensor::from_fn(&[2, 1, 5, 5], |_| rng.gen_range(-3.0..3.0));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let zv = tape.constant(z);
        let ev = tape.constant(Tensor::ones(&[5, 5]));
        let g = epga_forward(&mut tape, zv, ev, &EpgaSettings::default(), None).unwrap();
        let y = recalibrate(&mut tape, xv, g).unwrap();
        for (&a, &b) in tape.value(y).data().iter().zip(x.data()) {
            if b != 0.0 {
                assert!(a.abs() < b.abs());
            }
        }
    }

    #[test]
    fn gate_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::from_fn(&[3, 1, 4, 4], |_| rng.gen_range(-4.0..4.0));
        let e = Tensor::from_fn(&[4, 4], |_| rng.gen_range(-1.0..1.0));
        let s = gate_map(z.clone(), e.clone(), Gate::Sigmoid);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let t = gate_map(z.clone(), e.clone(), Gate::Tanh);
        assert!(t.data().iter().all(|&v| v > -1.0 && v < 1.0));
        let r = gate_map(z.clone(), e.clone(), Gate::Relu);
        assert!(r.data().iter().all(|&v| v >= 0.0));
        let m = gate_map(z, e, Gate::Softmax);
        for chunk in m.data().chunks(16) {
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn stop_gradient_blocks_percentile_path() {
        let z = Tensor::new(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let e = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let grads = |mode: QssGrad| {
            let mut tape = Tape::new();
            let zv = tape.param(z.clone());
            let ev = tape.constant(e.clone());
            let mu = qss_op(&mut tape, zv, 50.0, mode).unwrap();
            let b = tape.reshape(ev, &[1, 1, 1, 2]).unwrap();
            let y = tape.mul(mu, b).unwrap();
            let s = tape.sum_all(y).unwrap();
            tape.backward(s).unwrap();
            tape.grad(zv).unwrap().data().to_vec()
        };
        // μ = 1.0 (rank 1 of 2) scales both entries of E
        assert_eq!(grads(QssGrad::Select), vec![2.0, 0.0]);
        assert_eq!(grads(QssGrad::Stop), vec![0.0, 0.0]);
    }
}
