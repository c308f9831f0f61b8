//! Layers used by the backbone and by the recalibration modules.

mod batchnorm;
mod conv;
mod pool;

pub use batchnorm::{batchnorm, BatchNormState, Mode, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use conv::{conv2d, output_extent, ConvGeometry};
pub use pool::{pool, PoolKind};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{ReduceKind, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// Normalizes over the flattened H×W positions of each sample.
    SoftmaxSpatial,
}

pub fn activation<T: Real>(tape: &mut Tape<T>, x: Var, kind: Activation) -> Result<Var> {
    match kind {
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Tanh => tape.tanh(x),
        Activation::SoftmaxSpatial => tape.softmax_spatial(x),
    }
}

/// Cross-channel statistic of each spatial position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Compress {
    /// Cross-channel average pooling.
    Cap,
    /// Cross-channel max pooling.
    Cmp,
    /// Sum of the two maps.
    CapCmp,
}

impl FromStr for Compress {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cap" => Ok(Compress::Cap),
            "cmp" => Ok(Compress::Cmp),
            "cap+cmp" => Ok(Compress::CapCmp),
            other => Err(Error::config("net.compress", format!("unknown compression `{other}` (cap|cmp|cap+cmp)"))),
        }
    }
}

impl fmt::Display for Compress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Compress::Cap => "cap",
            Compress::Cmp => "cmp",
            Compress::CapCmp => "cap+cmp",
        })
    }
}

/// `[N,C,H,W] → [N,1,H,W]`.
pub fn cross_channel_compress<T: Real>(tape: &mut Tape<T>, x: Var, kind: Compress) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("expected [N,C,H,W], got {shape:?}")));
    }
    let keep = [shape[0], 1, shape[2], shape[3]];
    let one = |tape: &mut Tape<T>, k: ReduceKind| -> Result<Var> {
        let r = tape.reduce(x, &[1], k)?;
        tape.reshape(r, &keep)
    };
    match kind {
        Compress::Cap => one(tape, ReduceKind::Mean),
        Compress::Cmp => one(tape, ReduceKind::Max),
        Compress::CapCmp => {
            let a = one(tape, ReduceKind::Mean)?;
            let m = one(tape, ReduceKind::Max)?;
            tape.add(a, m)
        }
    }
}

/// `x · weight + bias` for `x: [N,F]`, `weight: [F,K]`, `bias: [K]`.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    let k = tape.shape(bias).to_vec();
    let b = tape.reshape(bias, &[1, k.iter().product()])?;
    tape.add(y, b)
}
