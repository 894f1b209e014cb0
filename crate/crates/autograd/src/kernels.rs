//! Dense f64 matrix kernels. Each output entry sums over the inner index in
//! order, and each band of rows belongs to one task, so results do not depend
//! on thread count.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 18;
const MR: usize = 4;
const NR: usize = 4;

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 {
        return;
    }
    let band = |(blk, c_band): (usize, &mut [f64])| {
        let i0 = blk * MR;
        let rows = c_band.len() / n;
        let mut j0 = 0;
        while j0 < n {
            let w = NR.min(n - j0);
            if rows == MR && w == NR {
                tile(a, b, c_band, i0, j0, k, n);
            } else {
                edge(a, b, c_band, i0, j0, rows, w, k, n);
            }
            j0 += NR;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > MR {
        c.par_chunks_mut(MR * n).enumerate().for_each(band);
    } else {
        c.chunks_mut(MR * n).enumerate().for_each(band);
    }
}

/// Full `MR x NR` block held in registers; every entry sums over `p` in order.
#[inline(always)]
fn tile(a: &[f64], b: &[f64], c_band: &mut [f64], i0: usize, j0: usize, k: usize, n: usize) {
    let mut acc = [[0.0f64; NR]; MR];
    let a_rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
    for p in 0..k {
        let bp: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("tile width");
        for r in 0..MR {
            let av = a_rows[r][p];
            for q in 0..NR {
                acc[r][q] += av * bp[q];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        for (q, v) in row.iter().enumerate() {
            c_band[r * n + j0 + q] += v;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn edge(a: &[f64], b: &[f64], c_band: &mut [f64], i0: usize, j0: usize, rows: usize, w: usize, k: usize, n: usize) {
    for r in 0..rows {
        let a_row = &a[(i0 + r) * k..(i0 + r + 1) * k];
        for q in 0..w {
            let mut s = 0.0;
            for (p, &av) in a_row.iter().enumerate() {
                s += av * b[p * n + j0 + q];
            }
            c_band[r * n + j0 + q] += s;
        }
    }
}

fn transposed(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for (i, row) in x.chunks_exact(cols).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[j * rows + i] = v;
        }
    }
    out
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_nn(a, &transposed(b, n, k), c, m, k, n);
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_nn(&transposed(a, m, k), b, c, k, m, n);
}

/// Dot product with four interleaved accumulators combined in a fixed order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        out
    }

    #[test]
    fn kernels_agree_with_naive() {
        for (m, k, n) in [(5, 7, 3), (9, 13, 10), (4, 1, 4), (1, 6, 1)] {
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = transpose(&b, k, n);
        let mut c = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // a^T with a stored as [k, m]
        let at = transpose(&a, m, k);
        let mut c = vec![0.0; m * n];
        gemm_tn(&at, &b, &mut c, k, m, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        }
    }
}
