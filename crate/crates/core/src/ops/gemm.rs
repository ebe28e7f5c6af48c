//! Small dense matrix multiply, `C += A · B`, row-major.
//!
//! Register-tiled over 4×16 output blocks. Every output element accumulates
//! its `k` terms in ascending order regardless of tiling, so results are
//! identical to the naive triple loop up to that fixed ordering.

const MR: usize = 4;
const NR: usize = 16;

#[inline(always)]
fn fma_row(acc: &mut [f64; NR], av: f64, b: &[f64; NR]) {
    for l in 0..NR {
        acc[l] += av * b[l];
    }
}

#[inline(always)]
fn tile4(a: &[f64], b: &[f64], c: &mut [f64], i0: usize, j0: usize, k: usize, n: usize) {
    let load = |c: &[f64], r: usize| -> [f64; NR] { c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].try_into().unwrap() };
    let (mut c0, mut c1, mut c2, mut c3) = (load(c, 0), load(c, 1), load(c, 2), load(c, 3));
    let a0 = &a[i0 * k..(i0 + 1) * k];
    let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
    let a2 = &a[(i0 + 2) * k..(i0 + 3) * k];
    let a3 = &a[(i0 + 3) * k..(i0 + 4) * k];
    for p in 0..k {
        let brow: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
        fma_row(&mut c0, a0[p], brow);
        fma_row(&mut c1, a1[p], brow);
        fma_row(&mut c2, a2[p], brow);
        fma_row(&mut c3, a3[p], brow);
    }
    for (r, row) in [c0, c1, c2, c3].iter().enumerate() {
        c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
    }
}

fn edge(a: &[f64], b: &[f64], c: &mut [f64], rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, k: usize, n: usize) {
    for i in rows {
        for j in cols.clone() {
            let mut s = c[i * n + j];
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let n_full = n - n % NR;
    let mut i0 = 0;
    while i0 + MR <= m {
        for j0 in (0..n_full).step_by(NR) {
            tile4(a, b, c, i0, j0, k, n);
        }
        i0 += MR;
    }
    // leftover rows: stream B once per row; same ascending-k order per element
    for i in i0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    let m = i0;
    if n_full < n {
        edge(a, b, c, 0..m, n_full..n, k, n);
    }
}

#[inline(always)]
fn lanes_sum(acc: &[f64; 8]) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Four dot products of `a` against `b0..b3`, each with eight lane
/// accumulators combined in a fixed order (same order as [`super::dot`]).
#[inline(always)]
fn dot4(a: &[f64], b: [&[f64]; 4]) -> [f64; 4] {
    let k = a.len();
    let full = k - k % 8;
    let mut acc = [[0.0_f64; 8]; 4];
    let mut p = 0;
    while p < full {
        let av: &[f64; 8] = a[p..p + 8].try_into().unwrap();
        for (acc_r, br) in acc.iter_mut().zip(b) {
            let bv: &[f64; 8] = br[p..p + 8].try_into().unwrap();
            for l in 0..8 {
                acc_r[l] += av[l] * bv[l];
            }
        }
        p += 8;
    }
    let mut out = [0.0; 4];
    for r in 0..4 {
        let mut tail = 0.0;
        for q in full..k {
            tail += a[q] * b[r][q];
        }
        out[r] = lanes_sum(&acc[r]) + tail;
    }
    out
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`, i.e. `c[i][j] += dot(a_i, b_j)`.
pub fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let n4 = n - n % 4;
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in (0..n4).step_by(4) {
            let rows = [
                &b[j * k..(j + 1) * k],
                &b[(j + 1) * k..(j + 2) * k],
                &b[(j + 2) * k..(j + 3) * k],
                &b[(j + 3) * k..(j + 4) * k],
            ];
            let d = dot4(ai, rows);
            for r in 0..4 {
                c[i * n + j + r] += d[r];
            }
        }
        for j in n4..n {
            c[i * n + j] += super::dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Row-major transpose of an `rows × cols` matrix.
pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
