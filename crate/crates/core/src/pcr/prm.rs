use crate::error::{Error, Result};
use crate::nn::{batchnorm, cross_channel_compress, BatchNormState, Compress, Mode};
use crate::tensor::{Real, Tape, Var};

/// Coarse pathology map `Z = P ⊙ BN(F)`, where `F` is the cross-channel
/// compression of `x: [N,C,H,W]` and `p: [H,W]` is the pathology map.
///
/// The normalization treats the compressed map as a single channel. `Z` is
/// returned as `[N,1,H,W]` so it broadcasts straight back over channels.
pub fn prm_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: Var,
    bn: &mut BatchNormState<T>,
    bn_affine: Option<(Var, Var)>,
    compress: Compress,
    mode: Mode,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ps = tape.shape(p).to_vec();
    if xs.len() != 4 || ps.len() != 2 || xs[2..] != ps[..] {
        return Err(Error::Shape(format!(
            "pathology map {ps:?} does not match feature map {xs:?}"
        )));
    }
    let f = cross_channel_compress(tape, x, compress)?;
    let f = batchnorm(tape, f, bn, bn_affine, mode)?;
    let p4 = tape.reshape(p, &[1, 1, ps[0], ps[1]])?;
    tape.mul(f, p4)
}
