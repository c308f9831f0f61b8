use super::Real;

const MR: usize = 4;

/// `c = a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Every output element is accumulated from zero over `k` in increasing order
/// through [`Real::madd`], so the result is bit-identical to the naive triple
/// loop written with the same primitive.
pub(crate) fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let a_rows: Vec<usize> = (0..m).map(|i| i * k).collect();
    let b_rows: Vec<usize> = (0..k).map(|kk| kk * n).collect();
    gemm_rows(n, a, &a_rows, b, &b_rows, c);
}

/// Product of matrices given by row offsets: row `i` of the left operand is
/// `a[a_rows[i]..][..k]` and row `kk` of the right operand is
/// `b[b_rows[kk]..][..n]`, with `k = b_rows.len()`. Writes the dense `m×n`
/// result into `c`. Accumulation order matches [`gemm`].
pub(crate) fn gemm_rows<T: Real>(n: usize, a: &[T], a_rows: &[usize], b: &[T], b_rows: &[usize], c: &mut [T]) {
    let (m, k) = (a_rows.len(), b_rows.len());
    debug_assert_eq!(c.len(), m * n);
    if k == 0 {
        c.fill(T::zero());
        return;
    }
    if n <= 16 {
        panels::<T, 16>(n, a, a_rows, b, b_rows, c);
    } else {
        panels::<T, 32>(n, a, a_rows, b, b_rows, c);
    }
}

fn panels<T: Real, const NR: usize>(n: usize, a: &[T], a_rows: &[usize], b: &[T], b_rows: &[usize], c: &mut [T]) {
    let k = b_rows.len();
    let mut j0 = 0;
    while j0 + NR <= n {
        let cols: Vec<usize> = b_rows.iter().map(|&off| off + j0).collect();
        stripe::<T, NR>(a, a_rows, b, &cols, c, n, j0, NR);
        j0 += NR;
    }
    if j0 < n {
        // ragged edge: copy into a zero-filled panel
        let nr = n - j0;
        let mut panel = vec![T::zero(); k * NR];
        for (dst, &off) in panel.chunks_exact_mut(NR).zip(b_rows) {
            dst[..nr].copy_from_slice(&b[off + j0..off + j0 + nr]);
        }
        let cols: Vec<usize> = (0..k).map(|kk| kk * NR).collect();
        stripe::<T, NR>(a, a_rows, &panel, &cols, c, n, j0, nr);
    }
}

/// Output columns `j0..j0 + nr` for every row; `b[cols[kk]..][..NR]` holds
/// row `kk` of the right operand restricted to those columns.
#[allow(clippy::too_many_arguments)]
fn stripe<T: Real, const NR: usize>(
    a: &[T],
    a_rows: &[usize],
    b: &[T],
    cols: &[usize],
    c: &mut [T],
    ldc: usize,
    j0: usize,
    nr: usize,
) {
    let (m, k) = (a_rows.len(), cols.len());
    let mut i0 = 0;
    while i0 + MR <= m {
        let rows: [&[T]; MR] = std::array::from_fn(|r| &a[a_rows[i0 + r]..a_rows[i0 + r] + k]);
        block::<T, NR>(rows, b, cols, c, ldc, i0, j0, nr);
        i0 += MR;
    }
    while i0 < m {
        row::<T, NR>(&a[a_rows[i0]..a_rows[i0] + k], b, cols, c, ldc, i0, j0, nr);
        i0 += 1;
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn block<T: Real, const NR: usize>(
    a: [&[T]; MR],
    b: &[T],
    cols: &[usize],
    c: &mut [T],
    ldc: usize,
    i0: usize,
    j0: usize,
    nr: usize,
) {
    let [a0, a1, a2, a3] = a;
    let k = cols.len();
    let (a0, a1, a2, a3) = (&a0[..k], &a1[..k], &a2[..k], &a3[..k]);
    let mut c0 = [T::zero(); NR];
    let mut c1 = [T::zero(); NR];
    let mut c2 = [T::zero(); NR];
    let mut c3 = [T::zero(); NR];
    for (kk, &off) in cols.iter().enumerate() {
        let b: &[T; NR] = b[off..off + NR].try_into().unwrap();
        let (x0, x1, x2, x3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
        for j in 0..NR {
            c0[j] = x0.madd(b[j], c0[j]);
            c1[j] = x1.madd(b[j], c1[j]);
            c2[j] = x2.madd(b[j], c2[j]);
            c3[j] = x3.madd(b[j], c3[j]);
        }
    }
    for (r, acc_row) in [c0, c1, c2, c3].iter().enumerate() {
        let base = (i0 + r) * ldc + j0;
        c[base..base + nr].copy_from_slice(&acc_row[..nr]);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn row<T: Real, const NR: usize>(
    a: &[T],
    b: &[T],
    cols: &[usize],
    c: &mut [T],
    ldc: usize,
    i0: usize,
    j0: usize,
    nr: usize,
) {
    let a = &a[..cols.len()];
    let mut acc = [T::zero(); NR];
    for (kk, &off) in cols.iter().enumerate() {
        let b: &[T; NR] = b[off..off + NR].try_into().unwrap();
        let av = a[kk];
        for j in 0..NR {
            acc[j] = av.madd(b[j], acc[j]);
        }
    }
    let base = i0 * ldc + j0;
    c[base..base + nr].copy_from_slice(&acc[..nr]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc = a[i * k + p].madd(b[p * n + j], acc);
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn matches_naive_bit_exactly_on_ragged_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (4, 9, 32), (9, 17, 70), (16, 144, 33), (144, 64, 16), (7, 5, 3), (33, 20, 17)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut c = vec![f64::NAN; m * n];
            gemm(m, k, n, &a, &b, &mut c);
            assert_eq!(c, naive(m, k, n, &a, &b), "{m}x{k}x{n}");
        }
    }
}
