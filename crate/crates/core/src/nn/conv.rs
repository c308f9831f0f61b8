use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_rows, BackwardCtx, GradFn, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry { stride, padding }
    }
}

/// `floor((input + 2·pad − k)/stride) + 1`, or a shape error when the window
/// does not fit.
pub fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Shape(format!(
            "kernel {kernel} and stride {stride} must be positive"
        )));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "window {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Dims {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Dims {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Geometry of the input-gradient correlation, available for unit stride
    /// with square kernels and `pad < k`.
    fn transposed(&self, cout: usize) -> Option<Dims> {
        (self.stride == 1 && self.kh == self.kw && self.pad < self.kh).then(|| Dims {
            c: cout,
            h: self.oh,
            w: self.ow,
            kh: self.kh,
            kw: self.kw,
            oh: self.h,
            ow: self.w,
            stride: 1,
            pad: self.kh - 1 - self.pad,
        })
    }
}

/// Output columns `[lo, hi)` whose window tap `k` lands inside `0..extent`.
fn valid_range(k: usize, stride: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one sample `[C,H,W]` into `[C·kh·kw, oh·ow]`, zero where the window
/// overlaps the padding.
fn im2col<T: Real>(x: &[T], d: &Dims, cols: &mut [T]) {
    let p = d.positions();
    for c in 0..d.c {
        for ki in 0..d.kh {
            let (ylo, yhi) = valid_range(ki, d.stride, d.pad, d.h, d.oh);
            for kj in 0..d.kw {
                let (xlo, xhi) = valid_range(kj, d.stride, d.pad, d.w, d.ow);
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                dst[..ylo * d.ow].fill(T::zero());
                dst[yhi * d.ow..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * d.stride + ki - d.pad;
                    let src = &x[(c * d.h + iy) * d.w..(c * d.h + iy + 1) * d.w];
                    let line = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    let first = xlo * d.stride + kj - d.pad;
                    if d.stride == 1 {
                        line[xlo..xhi].copy_from_slice(&src[first..first + (xhi - xlo)]);
                    } else {
                        for (t, v) in line[xlo..xhi].iter_mut().enumerate() {
                            *v = src[first + t * d.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `[C,H,W]`.
fn col2im<T: Real>(cols: &[T], d: &Dims, x: &mut [T]) {
    let p = d.positions();
    for c in 0..d.c {
        for ki in 0..d.kh {
            let (ylo, yhi) = valid_range(ki, d.stride, d.pad, d.h, d.oh);
            for kj in 0..d.kw {
                let (xlo, xhi) = valid_range(kj, d.stride, d.pad, d.w, d.ow);
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let iy = oy * d.stride + ki - d.pad;
                    let line = &mut x[(c * d.h + iy) * d.w..(c * d.h + iy + 1) * d.w];
                    let first = xlo * d.stride + kj - d.pad;
                    let grads = &src[oy * d.ow + xlo..oy * d.ow + xhi];
                    if d.stride == 1 {
                        for (v, &g) in line[first..first + grads.len()].iter_mut().zip(grads) {
                            *v = *v + g;
                        }
                    } else {
                        for (v, &g) in line[first..].iter_mut().step_by(d.stride).zip(grads) {
                            *v = *v + g;
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded copy of one `[C,H,W]` sample with row pitch `W + 2·pad`, so
/// each window tap of a unit-stride correlation is a contiguous shift.
struct Shifted<T> {
    padded: Vec<T>,
    /// Offset of tap `(c, ki, kj)`, in that order.
    taps: Vec<usize>,
    pitch: usize,
}

impl<T: Real> Shifted<T> {
    fn new(d: &Dims) -> Self {
        let (hp, wp) = (d.h + 2 * d.pad, d.w + 2 * d.pad);
        let mut taps = Vec::with_capacity(d.rows());
        for c in 0..d.c {
            for ki in 0..d.kh {
                for kj in 0..d.kw {
                    taps.push(c * hp * wp + ki * wp + kj);
                }
            }
        }
        Shifted {
            padded: vec![T::zero(); d.c * hp * wp + d.kw],
            taps,
            pitch: wp,
        }
    }

    /// Positions covered by a shifted row: every output row at full pitch.
    fn span(&self, d: &Dims) -> usize {
        d.oh * self.pitch
    }

    fn load(&mut self, x: &[T], d: &Dims) {
        let wp = self.pitch;
        let plane = (d.h + 2 * d.pad) * wp;
        for c in 0..d.c {
            for y in 0..d.h {
                let dst = c * plane + (y + d.pad) * wp + d.pad;
                self.padded[dst..dst + d.w].copy_from_slice(&x[(c * d.h + y) * d.w..(c * d.h + y + 1) * d.w]);
            }
        }
    }
}

/// Unit-stride correlation of one sample with `weight: [O, C·kh·kw]` into
/// `out: [O, oh, ow]`.
fn correlate_unit<T: Real>(x: &[T], d: &Dims, weight: &[T], o: usize, sh: &mut Shifted<T>, tmp: &mut Vec<T>, out: &mut [T]) {
    sh.load(x, d);
    let span = sh.span(d);
    tmp.resize(o * span, T::zero());
    let w_rows: Vec<usize> = (0..o).map(|i| i * d.rows()).collect();
    gemm_rows(span, weight, &w_rows, &sh.padded, &sh.taps, tmp);
    for co in 0..o {
        for oy in 0..d.oh {
            let src = co * span + oy * sh.pitch;
            let dst = (co * d.oh + oy) * d.ow;
            out[dst..dst + d.ow].copy_from_slice(&tmp[src..src + d.ow]);
        }
    }
}

fn transpose<T: Real>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    const TILE: usize = 16;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

struct Conv2dGrad {
    dims: Dims,
    has_bias: bool,
}

impl<T: Real> GradFn<T> for Conv2dGrad {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let d = self.dims;
        let x = ctx.input(0);
        let w = ctx.input(1);
        let n = x.shape()[0];
        let cout = w.shape()[0];
        let (rows, p) = (d.rows(), d.positions());
        let in_len = d.c * d.h * d.w;
        let out_len = cout * p;

        let mut gx = ctx.needs(0).then(|| Tensor::zeros_like(x));
        let mut gw = ctx.needs(1).then(|| Tensor::zeros_like(w));
        let mut gb = (self.has_bias && ctx.needs(2)).then(|| Tensor::<T>::zeros(&[cout]));

        if let Some(gb) = gb.as_mut() {
            for s in 0..n {
                let gs = &g.data()[s * out_len..(s + 1) * out_len];
                for (co, b) in gb.data_mut().iter_mut().enumerate() {
                    *b = *b + gs[co * p..(co + 1) * p].iter().copied().sum::<T>();
                }
            }
        }
        if let Some(gw) = gw.as_mut() {
            // dWᵀ = Σ_s cols_s · g_sᵀ
            let mut acc = vec![T::zero(); rows * cout];
            let mut partial = vec![T::zero(); rows * cout];
            if d.stride == 1 {
                let mut sh = Shifted::new(&d);
                let span = sh.span(&d);
                let mut gs_t = vec![T::zero(); span * cout];
                let g_rows: Vec<usize> = (0..span).map(|q| q * cout).collect();
                for s in 0..n {
                    sh.load(&x.data()[s * in_len..(s + 1) * in_len], &d);
                    let gs = &g.data()[s * out_len..(s + 1) * out_len];
                    for co in 0..cout {
                        for oy in 0..d.oh {
                            let src = &gs[(co * d.oh + oy) * d.ow..(co * d.oh + oy + 1) * d.ow];
                            for (ox, &v) in src.iter().enumerate() {
                                gs_t[(oy * sh.pitch + ox) * cout + co] = v;
                            }
                        }
                    }
                    gemm_rows(cout, &sh.padded, &sh.taps, &gs_t, &g_rows, &mut partial);
                    for (a, &b) in acc.iter_mut().zip(&partial) {
                        *a = *a + b;
                    }
                }
            } else {
                let mut cols = vec![T::zero(); rows * p];
                let mut gs_t = vec![T::zero(); p * cout];
                for s in 0..n {
                    im2col(&x.data()[s * in_len..(s + 1) * in_len], &d, &mut cols);
                    transpose(cout, p, &g.data()[s * out_len..(s + 1) * out_len], &mut gs_t);
                    gemm(rows, p, cout, &cols, &gs_t, &mut partial);
                    for (a, &b) in acc.iter_mut().zip(&partial) {
                        *a = *a + b;
                    }
                }
            }
            transpose(rows, cout, &acc, gw.data_mut());
        }
        if let Some(gx) = gx.as_mut() {
            let gxd = gx.data_mut();
            if let Some(td) = d.transposed(cout) {
                // stride 1: the input gradient is a correlation of the output
                // gradient with the spatially flipped, channel-swapped kernel
                let flipped = flip_kernel(w.data(), cout, d.c, d.kh, d.kw);
                let mut sh = Shifted::new(&td);
                let mut tmp = Vec::new();
                for s in 0..n {
                    let gs = &g.data()[s * out_len..(s + 1) * out_len];
                    correlate_unit(gs, &td, &flipped, d.c, &mut sh, &mut tmp, &mut gxd[s * in_len..(s + 1) * in_len]);
                }
            } else {
                let mut wt = vec![T::zero(); cout * rows];
                transpose(cout, rows, w.data(), &mut wt);
                let mut dcols = vec![T::zero(); rows * p];
                for s in 0..n {
                    gemm(rows, cout, p, &wt, &g.data()[s * out_len..(s + 1) * out_len], &mut dcols);
                    col2im(&dcols, &d, &mut gxd[s * in_len..(s + 1) * in_len]);
                }
            }
        }
        let mut out = vec![gx, gw];
        if self.has_bias {
            out.push(gb);
        }
        Ok(out)
    }
}

/// `[O,C,kh,kw] → [C, O·kh·kw]` with both spatial axes reversed.
fn flip_kernel<T: Real>(w: &[T], o: usize, c: usize, kh: usize, kw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for co in 0..o {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let src = ((co * c + ci) * kh + ki) * kw + kj;
                    let dst = ((ci * o + co) * kh + (kh - 1 - ki)) * kw + (kw - 1 - kj);
                    out[dst] = w[src];
                }
            }
        }
    }
    out
}

/// 2-D cross-correlation of `x: [N,C,H,W]` with `weight: [O,C,kh,kw]`, zero
/// padding, optional `bias: [O]`.
///
/// Each output is accumulated from zero over `(c, ki, kj)` in increasing order
/// and the bias is added last.
pub fn conv2d<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeometry,
) -> Result<Var> {
    let (xv, wv) = (tape.value(x), tape.value(weight));
    if xv.rank() != 4 || wv.rank() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects 4-axis input and weight, got {:?} and {:?}",
            xv.shape(),
            wv.shape()
        )));
    }
    let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
    let [cout, cin, kh, kw] = [wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]];
    if cin != c {
        return Err(Error::Shape(format!(
            "conv2d weight expects {cin} input channels, input has {c}"
        )));
    }
    let oh = output_extent(h, kh, geom.stride, geom.padding)?;
    let ow = output_extent(w, kw, geom.stride, geom.padding)?;
    let d = Dims {
        c,
        h,
        w,
        kh,
        kw,
        oh,
        ow,
        stride: geom.stride,
        pad: geom.padding,
    };
    if let Some(b) = bias {
        if tape.shape(b) != [cout] {
            return Err(Error::Shape(format!(
                "conv2d bias must be [{cout}], got {:?}",
                tape.shape(b)
            )));
        }
    }
    let (rows, p) = (d.rows(), d.positions());
    let in_len = c * h * w;
    let mut out = vec![T::zero(); n * cout * p];
    if d.stride == 1 {
        let mut sh = Shifted::new(&d);
        let mut tmp = Vec::new();
        for s in 0..n {
            let xs = &xv.data()[s * in_len..(s + 1) * in_len];
            correlate_unit(xs, &d, wv.data(), cout, &mut sh, &mut tmp, &mut out[s * cout * p..(s + 1) * cout * p]);
        }
    } else {
        let mut cols = vec![T::zero(); rows * p];
        for s in 0..n {
            im2col(&xv.data()[s * in_len..(s + 1) * in_len], &d, &mut cols);
            gemm(cout, rows, p, wv.data(), &cols, &mut out[s * cout * p..(s + 1) * cout * p]);
        }
    }
    if let Some(b) = bias {
        let bd = tape.value(b).data();
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v + bd[(i / p) % cout];
        }
    }
    let value = Tensor::new(&[n, cout, oh, ow], out)?;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    tape.push(
        value,
        inputs,
        Box::new(Conv2dGrad {
            dims: d,
            has_bias: bias.is_some(),
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct six-nested-loop cross-correlation.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: Option<&Tensor<f64>>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for s in 0..n {
            for co in 0..o {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0f64;
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (y * stride + ki) as isize - pad as isize;
                                    let ix = (xo * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((s * c + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((co * c + ci) * kh + ki) * kw + kj];
                                    acc = wv.madd(xv, acc);
                                }
                            }
                        }
                        if let Some(b) = b {
                            acc += b.data()[co];
                        }
                        out.data_mut()[((s * o + co) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn run(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, g: ConvGeometry) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let bv = b.map(|b| tape.constant(b.clone()));
        let y = conv2d(&mut tape, xv, wv, bv, g).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn one_by_one_unit_kernel_is_identity() {
        let x = Tensor::from_fn(&[2, 1, 3, 4], |i| i as f64 * 0.5 - 3.0);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        assert_eq!(run(&x, &w, Some(&b), ConvGeometry::new(1, 0)), x);
    }

    #[test]
    fn all_ones_center_sums_nine() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = run(&x, &w, None, ConvGeometry::new(1, 1));
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[3, 1, 3, 3]));
        assert!(matches!(
            conv2d(&mut tape, x, w, None, ConvGeometry::new(1, 1)),
            Err(Error::Shape(_))
        ));
        let w = tape.constant(Tensor::zeros(&[3, 2, 7, 7]));
        assert!(matches!(
            conv2d(&mut tape, x, w, None, ConvGeometry::new(1, 1)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matches_loop_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..30 {
            let n = 1 + trial % 2;
            let c = 1 + trial % 4;
            let h = 3 + trial % 7;
            let w = 3 + (trial * 3) % 7;
            let o = 1 + trial % 5;
            let k = if trial % 3 == 0 { 1 } else { 3 };
            let stride = 1 + trial % 2;
            let pad = if k == 3 { trial % 2 } else { 0 };
            let x = random(&[n, c, h, w], &mut rng);
            let wt = random(&[o, c, k, k], &mut rng);
            let b = random(&[o], &mut rng);
            let g = ConvGeometry::new(stride, pad);
            let got = run(&x, &wt, Some(&b), g);
            assert_eq!(got, conv_oracle(&x, &wt, Some(&b), stride, pad), "trial {trial}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let r = random(&[2, 4, 8, 8], &mut rng);
        let g = ConvGeometry::new(1, 1);
        let objective = |tape: &mut Tape<f64>, y: Var| {
            let rv = tape.constant(r.clone());
            let y = tape.mul(y, rv)?;
            tape.sum_all(y)
        };
        let ex = finite_diff_check(
            |tape, xv| {
                let wv = tape.constant(w.clone());
                let bv = tape.constant(b.clone());
                let y = conv2d(tape, xv, wv, Some(bv), g)?;
                objective(tape, y)
            },
            &x,
            1e-6,
        )
        .unwrap();
        let ew = finite_diff_check(
            |tape, wv| {
                let xv = tape.constant(x.clone());
                let bv = tape.constant(b.clone());
                let y = conv2d(tape, xv, wv, Some(bv), g)?;
                objective(tape, y)
            },
            &w,
            1e-6,
        )
        .unwrap();
        let eb = finite_diff_check(
            |tape, bv| {
                let xv = tape.constant(x.clone());
                let wv = tape.constant(w.clone());
                let y = conv2d(tape, xv, wv, Some(bv), g)?;
                objective(tape, y)
            },
            &b,
            1e-6,
        )
        .unwrap();
        assert!(ex < 1e-4 && ew < 1e-4 && eb < 1e-4, "{ex} {ew} {eb}");
    }

    #[test]
    fn strided_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 2, 7, 7], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let r = random(&[2, 3, 4, 4], &mut rng);
        let g = ConvGeometry::new(2, 1);
        let e = finite_diff_check(
            |tape, xv| {
                let wv = tape.constant(w.clone());
                let y = conv2d(tape, xv, wv, None, g)?;
                let rv = tape.constant(r.clone());
                let y = tape.mul(y, rv)?;
                tape.sum_all(y)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }
}
