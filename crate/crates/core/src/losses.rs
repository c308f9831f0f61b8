//! Classification losses over raw logits: cross-entropy, Balanced Softmax and
//! the Integrated Loss that mixes them, plus closed-form gradient references.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Training label frequencies `π_j = count_j / total`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassFrequencies {
    pi: Vec<f64>,
    counts: Option<Vec<u64>>,
}

impl ClassFrequencies {
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::Domain(format!(
                "class frequencies need at least 2 classes, got {}",
                counts.len()
            )));
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Domain(format!("class {k} has no training samples")));
        }
        let total: u64 = counts.iter().sum();
        Ok(ClassFrequencies {
            pi: counts.iter().map(|&c| c as f64 / total as f64).collect(),
            counts: Some(counts.to_vec()),
        })
    }

    pub fn from_pi(pi: &[f64]) -> Result<Self> {
        if pi.len() < 2 {
            return Err(Error::Domain(format!(
                "class frequencies need at least 2 classes, got {}",
                pi.len()
            )));
        }
        if pi.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::Domain(format!("frequencies must be positive, got {pi:?}")));
        }
        let sum: f64 = pi.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("frequencies sum to {sum}, not 1")));
        }
        Ok(ClassFrequencies {
            pi: pi.to_vec(),
            counts: None,
        })
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        Self::from_counts(&vec![1; classes])
    }

    pub fn classes(&self) -> usize {
        self.pi.len()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn counts(&self) -> Option<&[u64]> {
        self.counts.as_deref()
    }

    pub fn min(&self) -> f64 {
        self.pi.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.pi.iter().copied().fold(0.0, f64::max)
    }

    /// Parses `class_index count` lines. Blank lines and `#` comments are
    /// skipped; every class from 0 to K-1 must appear exactly once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Input(format!("line {}: expected `class_index count`, got `{line}`", no + 1));
            let mut parts = line.split_whitespace();
            let (Some(k), Some(c), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad());
            };
            let k: usize = k.parse().map_err(|_| bad())?;
            let c: u64 = c.parse().map_err(|_| bad())?;
            entries.push((k, c));
        }
        let mut counts = vec![None; entries.len()];
        for &(k, c) in &entries {
            match counts.get_mut(k) {
                Some(slot @ None) => *slot = Some(c),
                Some(Some(_)) => return Err(Error::Input(format!("class {k} listed twice"))),
                None => return Err(Error::Input(format!("class index {k} leaves a gap"))),
            }
        }
        let counts: Vec<u64> = counts.into_iter().map(|c| c.unwrap_or(0)).collect();
        Self::from_counts(&counts)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Text form; only frequencies built from counts can be written.
    pub fn to_text(&self) -> Result<String> {
        let counts = self
            .counts
            .as_ref()
            .ok_or_else(|| Error::Contract("frequencies without counts cannot be serialized".into()))?;
        Ok(counts
            .iter()
            .enumerate()
            .map(|(k, c)| format!("{k} {c}\n"))
            .collect())
    }
}

/// Which loss drives training. `lambda` weights the Balanced Softmax half of IL.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossConfig {
    Ce,
    Bs,
    Il { lambda: f64 },
}

pub const DEFAULT_LAMBDA: f64 = 0.5;

impl LossConfig {
    pub fn il(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(LossConfig::Il { lambda })
    }

    pub fn lambda(&self) -> Option<f64> {
        match *self {
            LossConfig::Il { lambda } => Some(lambda),
            _ => None,
        }
    }

    pub fn needs_frequencies(&self) -> bool {
        !matches!(self, LossConfig::Ce)
    }

    /// Records the configured loss on `tape`.
    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        logits: Var,
        labels: &[usize],
        freq: Option<&ClassFrequencies>,
    ) -> Result<Var> {
        let need = || Error::config("loss.kind", "balanced losses need class frequencies");
        match *self {
            LossConfig::Ce => ce_loss(tape, logits, labels),
            LossConfig::Bs => bs_loss(tape, logits, labels, freq.ok_or_else(need)?),
            LossConfig::Il { lambda } => il_loss(tape, logits, labels, freq.ok_or_else(need)?, lambda),
        }
    }
}

impl fmt::Display for LossConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossConfig::Ce => "ce",
            LossConfig::Bs => "bs",
            LossConfig::Il { .. } => "il",
        })
    }
}

/// Loss kind names as they appear in configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Ce,
    Bs,
    Il,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(LossKind::Ce),
            "bs" => Ok(LossKind::Bs),
            "il" => Ok(LossKind::Il),
            other => Err(Error::config("loss.kind", format!("unknown loss `{other}` (ce|bs|il)"))),
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("loss.lambda", format!("lambda must lie in [0,1], got {lambda}")));
    }
    Ok(())
}

fn check_logits<T: Real>(tape: &Tape<T>, logits: Var, labels: &[usize]) -> Result<usize> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "logits must be [N,K] with N = {} labels, got {shape:?}",
            labels.len()
        )));
    }
    let k = shape[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
    }
    Ok(k)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn ce_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    check_logits(tape, logits, labels)?;
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick(logp, labels)?;
    let mean = tape.mean_all(picked)?;
    tape.scale(mean, -T::one())
}

/// Balanced Softmax: cross-entropy on `logits + ln π`.
pub fn bs_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    freq: &ClassFrequencies,
) -> Result<Var> {
    let k = check_logits(tape, logits, labels)?;
    if freq.classes() != k {
        return Err(Error::Shape(format!(
            "{} class frequencies for {k} logits per row",
            freq.classes()
        )));
    }
    let shift = Tensor::new(&[1, k], freq.pi().iter().map(|&p| T::of(p.ln())).collect())?;
    let shift = tape.constant(shift);
    let shifted = tape.add(logits, shift)?;
    ce_loss(tape, shifted, labels)
}

/// Integrated Loss `(1-λ)·CE + λ·BS`.
pub fn il_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    freq: &ClassFrequencies,
    lambda: f64,
) -> Result<Var> {
    check_lambda(lambda)?;
    let ce = ce_loss(tape, logits, labels)?;
    let bs = bs_loss(tape, logits, labels, freq)?;
    let ce = tape.scale(ce, T::of(1.0 - lambda))?;
    let bs = tape.scale(bs, T::of(lambda))?;
    tape.add(ce, bs)
}

/// Row softmax of `z` with optional per-class prior weights, stabilized by the
/// row maximum.
fn weighted_softmax(z: &[f64], weights: Option<&[f64]>) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(j, &v)| (v - m).exp() * weights.map_or(1.0, |w| w[j]))
        .collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn rows(logits: &Tensor<f64>, freq: &ClassFrequencies) -> Result<usize> {
    if logits.rank() != 2 {
        return Err(Error::Shape(format!("logits must be [N,K], got {:?}", logits.shape())));
    }
    let k = logits.shape()[1];
    if k != freq.classes() {
        return Err(Error::Shape(format!(
            "{} class frequencies for {k} logits per row",
            freq.classes()
        )));
    }
    Ok(k)
}

/// Re-balancing term `R_ij = π_j e^{z_ij} / Σ_k π_k e^{z_ik} - e^{z_ij} / Σ_k e^{z_ik}`
/// together with the softmax it perturbs, for one row.
fn rebalancing_row(z: &[f64], pi: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let soft = weighted_softmax(z, None);
    let balanced = weighted_softmax(z, Some(pi));
    let r = balanced.iter().zip(&soft).map(|(b, s)| b - s).collect();
    (soft, balanced, r)
}

/// Gradient of the Integrated Loss with respect to the logits, assembled from
/// its decomposition `p̃_ij = softmax_ij + λ·R_ij`, minus one at the label,
/// scaled by `1/N`. Pure `f64`, independent of the tape.
pub fn il_gradient_oracle(
    logits: &Tensor<f64>,
    labels: &[usize],
    freq: &ClassFrequencies,
    lambda: f64,
) -> Result<Tensor<f64>> {
    check_lambda(lambda)?;
    let k = rows(logits, freq)?;
    let n = logits.shape()[0];
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
    }
    let mut out = Vec::with_capacity(n * k);
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let (soft, _, r) = rebalancing_row(row, freq.pi());
        for j in 0..k {
            let p = soft[j] + lambda * r[j];
            let target = if j == y { 1.0 } else { 0.0 };
            out.push((p - target) / n as f64);
        }
    }
    Tensor::new(&[n, k], out)
}

/// Evaluates `R_ij` against its frequency bounds
///
/// `(π_j - π_max) e^{z_ij} / (π_max Σ e^{z_ik}) ≤ R_ij ≤ (π_j - π_min) e^{z_ij} / (π_min Σ e^{z_ik})`
///
/// and returns the violation mask, `true` where an element falls outside.
/// Each comparison allows `64·ε` relative to the magnitudes that formed `R_ij`.
pub fn rebalancing_bounds_check(logits: &Tensor<f64>, freq: &ClassFrequencies) -> Result<Vec<bool>> {
    let k = rows(logits, freq)?;
    let (lo_pi, hi_pi) = (freq.min(), freq.max());
    let mut mask = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let (soft, balanced, r) = rebalancing_row(row, freq.pi());
        for j in 0..k {
            let pj = freq.pi()[j];
            let lower = (pj - hi_pi) * soft[j] / hi_pi;
            let upper = (pj - lo_pi) * soft[j] / lo_pi;
            let slack = 64.0 * f64::EPSILON * (soft[j] + balanced[j] + lower.abs() + upper.abs());
            mask.push(r[j] < lower - slack || r[j] > upper + slack);
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(f: impl FnOnce(&mut Tape<f64>, Var) -> Result<Var>, logits: &[f64], k: usize) -> f64 {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(&[logits.len() / k, k], logits.to_vec()).unwrap());
        let out = f(&mut tape, z).unwrap();
        tape.value(out).item()
    }

    #[test]
    fn ce_uniform_two_class() {
        let v = eval(|t, z| ce_loss(t, z, &[0]), &[0.0, 0.0], 2);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ce_saturated_is_stable() {
        let v = eval(|t, z| ce_loss(t, z, &[0]), &[100.0, 0.0], 2);
        assert!(v.is_finite() && v.abs() < 1e-40, "{v}");
    }

    #[test]
    fn bs_hand_value() {
        let freq = ClassFrequencies::from_pi(&[0.9, 0.1]).unwrap();
        let v = eval(|t, z| bs_loss(t, z, &[1], &freq), &[0.0, 0.0], 2);
        assert!((v - 10f64.ln()).abs() < 1e-12, "{v}");
        let il = eval(|t, z| il_loss(t, z, &[1], &freq, 0.5), &[0.0, 0.0], 2);
        assert!((il - 1.497866).abs() < 1e-6, "{il}");
    }

    #[test]
    fn ce_matches_unstabilized_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, k) = (8, 4);
        let z: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let v = eval(|t, zv| ce_loss(t, zv, &y), &z, k);
        let mut expect = 0.0;
        for (row, &label) in z.chunks(k).zip(&y) {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[label].exp() / total).ln();
        }
        expect /= n as f64;
        assert!((v - expect).abs() < 1e-10);
    }

    #[test]
    fn losses_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let freq = ClassFrequencies::from_counts(&[50, 30, 15, 5]).unwrap();
        let x = Tensor::from_fn(&[6, 4], |_| rng.gen_range(-2.0..2.0));
        let y = [0, 3, 1, 2, 3, 0];
        let ce = finite_diff_check(|t, z| ce_loss(t, z, &y), &x, 1e-6).unwrap();
        let bs = finite_diff_check(|t, z| bs_loss(t, z, &y, &freq), &x, 1e-6).unwrap();
        let il = finite_diff_check(|t, z| il_loss(t, z, &y, &freq, 0.3), &x, 1e-6).unwrap();
        assert!(ce < 1e-6 && bs < 1e-6 && il < 1e-6, "{ce} {bs} {il}");
    }

    #[test]
    fn oracle_at_zero_lambda_is_ce_gradient() {
        let freq = ClassFrequencies::from_counts(&[7, 2, 1]).unwrap();
        let z = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 0.3, -0.7]).unwrap();
        let g = il_gradient_oracle(&z, &[2, 0], &freq, 0.0).unwrap();
        for (n, row) in z.data().chunks(3).enumerate() {
            let soft = weighted_softmax(row, None);
            for (j, s) in soft.iter().enumerate() {
                let hot = if j == [2, 0][n] { 1.0 } else { 0.0 };
                assert_eq!(g.data()[n * 3 + j], (s - hot) / 2.0);
            }
        }
    }

    #[test]
    fn uniform_frequencies_cancel_rebalancing() {
        let freq = ClassFrequencies::uniform(4).unwrap();
        let z = Tensor::new(&[1, 4], vec![0.1, 2.0, -1.0, 0.7]).unwrap();
        let mask = rebalancing_bounds_check(&z, &freq).unwrap();
        assert!(mask.iter().all(|&v| !v));
        let (_, _, r) = rebalancing_row(z.data(), freq.pi());
        assert!(r.iter().all(|v| v.abs() < 1e-15), "{r:?}");
    }

    #[test]
    fn bounds_hold_on_skewed_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let freq = ClassFrequencies::from_pi(&[0.7, 0.2, 0.1]).unwrap();
        let z = Tensor::from_fn(&[1000, 3], |_| rng.gen_range(-8.0..8.0));
        let mask = rebalancing_bounds_check(&z, &freq).unwrap();
        assert_eq!(mask.iter().filter(|&&v| v).count(), 0);
    }

    #[test]
    fn frequencies_validate_domain() {
        assert!(matches!(ClassFrequencies::from_counts(&[10]), Err(Error::Domain(_))));
        assert!(ClassFrequencies::from_counts(&[3, 0]).is_err());
        assert!(ClassFrequencies::from_pi(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn frequencies_text_round_trip() {
        let f = ClassFrequencies::from_counts(&[1000, 1000, 1000, 100]).unwrap();
        let text = f.to_text().unwrap();
        assert_eq!(text, "0 1000\n1 1000\n2 1000\n3 100\n");
        assert_eq!(ClassFrequencies::parse(&text).unwrap(), f);
        assert!(ClassFrequencies::parse("0 4\n2 5\n").is_err());
        assert!(ClassFrequencies::parse("0 4 extra\n1 2\n").is_err());
    }

    #[test]
    fn lambda_outside_unit_interval_is_config_error() {
        let freq = ClassFrequencies::uniform(2).unwrap();
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            il_loss(&mut tape, z, &[0], &freq, 1.5),
            Err(Error::Config { .. })
        ));
        assert!(LossConfig::il(-0.1).is_err());
    }

    #[test]
    fn out_of_range_label_is_input_error() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(ce_loss(&mut tape, z, &[2]), Err(Error::Input(_))));
    }
}
