use super::conv::output_extent;
use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, GradFn, ReduceKind, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    MaxPool2d { kernel: usize, stride: usize },
    GlobalAvg,
}

struct MaxPoolGrad {
    argmax: Vec<usize>,
}

impl<T: Real> GradFn<T> for MaxPoolGrad {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut gx = Tensor::zeros_like(ctx.input(0));
        for (o, &i) in self.argmax.iter().enumerate() {
            gx.data_mut()[i] = gx.data()[i] + g.data()[o];
        }
        Ok(vec![Some(gx)])
    }
}

fn maxpool2d<T: Real>(tape: &mut Tape<T>, x: Var, kernel: usize, stride: usize) -> Result<Var> {
    let xv = tape.value(x);
    let [n, c, h, w] = dims4(xv.shape())?;
    let oh = output_extent(h, kernel, stride, 0)?;
    let ow = output_extent(w, kernel, stride, 0)?;
    let xd = xv.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let i = base + (oy * stride + ki) * w + ox * stride + kj;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    let value = Tensor::new(&[n, c, oh, ow], out)?;
    tape.push(value, vec![x], Box::new(MaxPoolGrad { argmax }))
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    shape
        .try_into()
        .map_err(|_| Error::Shape(format!("expected [N,C,H,W], got {shape:?}")))
}

/// Max pooling (no padding; first maximum wins) or global average pooling,
/// which maps `[N,C,H,W]` to `[N,C]`.
pub fn pool<T: Real>(tape: &mut Tape<T>, x: Var, kind: PoolKind) -> Result<Var> {
    match kind {
        PoolKind::MaxPool2d { kernel, stride } => maxpool2d(tape, x, kernel, stride),
        PoolKind::GlobalAvg => {
            dims4(tape.shape(x))?;
            tape.reduce(x, &[2, 3], ReduceKind::Mean)
        }
    }
}
