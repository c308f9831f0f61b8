use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, GradFn, Real, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-normalization layer. The affine `gamma` and
/// `beta`, when enabled, are ordinary learnable parameters owned elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Per-channel sums of `term(ch, i)` over the flat indices `i` of an
/// `[N,C,S]` layout. Each channel is summed strictly in index order; several
/// channels are interleaved so their chains overlap.
fn channel_sums<T: Real>(n: usize, c: usize, s: usize, term: impl Fn(usize, usize) -> T) -> Vec<T> {
    const LANES: usize = 8;
    let mut out = vec![T::zero(); c];
    for g0 in (0..c).step_by(LANES) {
        let width = LANES.min(c - g0);
        let mut acc = [T::zero(); LANES];
        for b in 0..n {
            // surplus lanes repeat the last channel and are discarded
            let lane_ch: [usize; LANES] = std::array::from_fn(|l| g0 + l.min(width - 1));
            let bases: [usize; LANES] = std::array::from_fn(|l| (b * c + lane_ch[l]) * s);
            for i in 0..s {
                for l in 0..LANES {
                    acc[l] = acc[l] + term(lane_ch[l], bases[l] + i);
                }
            }
        }
        out[g0..g0 + width].copy_from_slice(&acc[..width]);
    }
    out
}

struct Normalize<T> {
    channels: usize,
    spatial: usize,
    inv_std: Vec<T>,
    /// Normalized input; the node output differs from it when affine.
    xhat: Option<Tensor<T>>,
    train: bool,
}

impl<T: Real> GradFn<T> for Normalize<T> {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (c, s) = (self.channels, self.spatial);
        let n = g.len() / (c * s);
        let m = T::of((n * s) as f64);
        let gd = g.data();
        let xhat = self.xhat.as_ref().unwrap_or_else(|| ctx.output()).data();
        let gamma = self.xhat.is_some().then(|| ctx.input(1).data());
        let mut gx = Tensor::zeros_like(g);
        let sums_g = channel_sums(n, c, s, |_, i| gd[i]);
        let sums_gx = channel_sums(n, c, s, |_, i| gd[i] * xhat[i]);
        let out = gx.data_mut();
        for ch in 0..c {
            let scale = gamma.map_or(T::one(), |gm| gm[ch]);
            let inv = self.inv_std[ch] * scale;
            let (sum_g, sum_gx) = (sums_g[ch], sums_gx[ch]);
            for b in 0..n {
                let base = (b * c + ch) * s;
                if self.train {
                    for i in base..base + s {
                        out[i] = inv / m * (m * gd[i] - sum_g - xhat[i] * sum_gx);
                    }
                } else {
                    for i in base..base + s {
                        out[i] = gd[i] * inv;
                    }
                }
            }
        }
        let (ggamma, gbeta) = (sums_gx, sums_g);
        let mut grads = vec![ctx.needs(0).then_some(gx)];
        if self.xhat.is_some() {
            grads.push(Some(Tensor::new(&[c], ggamma)?));
            grads.push(Some(Tensor::new(&[c], gbeta)?));
        }
        Ok(grads)
    }
}

/// Per-channel normalization over every axis except axis 1, followed by the
/// optional affine map `gamma·x̂ + beta` (`gamma`, `beta` of shape `[C]`).
///
/// Train mode normalizes with the biased batch statistics and folds them into
/// the running averages; eval mode uses the running statistics only.
pub fn batchnorm<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    state: &mut BatchNormState<T>,
    affine: Option<(Var, Var)>,
    mode: Mode,
) -> Result<Var> {
    let xv = tape.value(x);
    let shape = xv.shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "batchnorm needs a channel axis, got {shape:?}"
        )));
    }
    let c = shape[1];
    if c != state.channels() {
        return Err(Error::Shape(format!(
            "batchnorm configured for {} channels, input has {c}",
            state.channels()
        )));
    }
    if let Some((gamma, beta)) = affine {
        if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "affine parameters must be [{c}], got {:?} and {:?}",
                tape.shape(gamma),
                tape.shape(beta)
            )));
        }
    }
    let n = shape[0];
    let s: usize = shape[2..].iter().product();
    let xd = xv.data();
    let eps = T::of(state.eps);
    let mut out = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); c];
    let count = T::of((n * s) as f64);
    let (mean, var) = match mode {
        Mode::Train => {
            let sums = channel_sums(n, c, s, |_, i| xd[i]);
            let rough: Vec<T> = sums.iter().map(|&v| v / count).collect();
            let residual = channel_sums(n, c, s, |ch, i| xd[i] - rough[ch]);
            let mean: Vec<T> = rough.iter().zip(&residual).map(|(&r, &d)| r + d / count).collect();
            let sq = channel_sums(n, c, s, |ch, i| (xd[i] - mean[ch]) * (xd[i] - mean[ch]));
            let var: Vec<T> = sq.iter().map(|&v| v / count).collect();
            let mom = T::of(state.momentum);
            for ch in 0..c {
                state.running_mean[ch] = (T::one() - mom) * state.running_mean[ch] + mom * mean[ch];
                state.running_var[ch] = (T::one() - mom) * state.running_var[ch] + mom * var[ch];
            }
            (mean, var)
        }
        Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
    };
    for ch in 0..c {
        let inv = T::one() / (var[ch] + eps).sqrt();
        inv_std[ch] = inv;
        for b in 0..n {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                out[i] = (xd[i] - mean[ch]) * inv;
            }
        }
    }
    let xhat = Tensor::new(&shape, out)?;
    let grad = |xhat| Normalize {
        channels: c,
        spatial: s,
        inv_std,
        xhat,
        train: mode == Mode::Train,
    };
    match affine {
        None => tape.push(xhat, vec![x], Box::new(grad(None))),
        Some((gamma, beta)) => {
            let (gd, bd) = (tape.value(gamma).data(), tape.value(beta).data());
            let mut y = Tensor::zeros(&shape);
            for (k, (dst, src)) in y.data_mut().chunks_mut(s).zip(xhat.data().chunks(s)).enumerate() {
                let (gm, bt) = (gd[k % c], bd[k % c]);
                for (v, &h) in dst.iter_mut().zip(src) {
                    *v = h * gm + bt;
                }
            }
            tape.push(y, vec![x, gamma, beta], Box::new(grad(Some(xhat))))
        }
    }
}
