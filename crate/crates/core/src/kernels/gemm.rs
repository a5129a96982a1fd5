use super::{par_row_chunks, square_edge, Tensor};
use crate::error::{Error, Result};

/// Cache blocking for [`gemm_f32_opt`]. Zero or oversized values are clamped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileParams {
    /// Rows of C per block.
    pub mc: usize,
    /// Depth of the reduction per block.
    pub kc: usize,
    /// Columns of C per block.
    pub nc: usize,
}

impl Default for TileParams {
    fn default() -> Self {
        TileParams {
            mc: 64,
            kc: 256,
            nc: 256,
        }
    }
}

impl TileParams {
    fn clamped(self, m: usize, k: usize, n: usize) -> Self {
        TileParams {
            mc: self.mc.clamp(1, m.max(1)),
            kc: self.kc.clamp(1, k.max(1)),
            nc: self.nc.clamp(1, n.max(1)),
        }
    }
}

fn check_pair<T>(a: &Tensor<T>, b: &Tensor<T>) -> Result<usize> {
    let n = square_edge(a, "a")?;
    let m = square_edge(b, "b")?;
    if n != m {
        return Err(Error::Shape(format!("a is {n}x{n} but b is {m}x{m}")));
    }
    Ok(n)
}

/// Triple loop, reduction index ascending.
pub fn gemm_f32_naive(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = check_pair(a, b)?;
    let (a, b) = (a.data(), b.data());
    let mut c = vec![0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0f32;
            for k in 0..n {
                acc += a[i * n + k] * b[k * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    Tensor::matrix(n, n, c)
}

/// Cache-blocked, register-tiled GEMM with output rows split across `workers`.
pub fn gemm_f32_opt(
    a: &Tensor<f32>,
    b: &Tensor<f32>,
    workers: usize,
    tile: TileParams,
) -> Result<Tensor<f32>> {
    let n = check_pair(a, b)?;
    let mut c = vec![0f32; n * n];
    sgemm(a.data(), b.data(), &mut c, n, n, n, workers, tile);
    Tensor::matrix(n, n, c)
}

const MR: usize = 4;
const NR: usize = 16;

/// `c[m x n] += a[m x k] * b[k x n]`, all row-major.
///
/// Each element's reduction is summed per `kc` block, so results do not depend
/// on `workers`, `mc` or `nc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
    workers: usize,
    tile: TileParams,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let tile = tile.clamped(m, k, n);
    par_row_chunks(c, n, workers, |row0, chunk| {
        sgemm_rows(a, b, chunk, row0, k, n, tile)
    });
}

fn sgemm_rows(a: &[f32], b: &[f32], c: &mut [f32], row0: usize, k: usize, n: usize, tile: TileParams) {
    let rows = c.len() / n;
    for kb in (0..k).step_by(tile.kc) {
        let ke = (kb + tile.kc).min(k);
        for jb in (0..n).step_by(tile.nc) {
            let je = (jb + tile.nc).min(n);
            for ib in (0..rows).step_by(tile.mc) {
                let ie = (ib + tile.mc).min(rows);
                let mut i = ib;
                while i + MR <= ie {
                    let mut j = jb;
                    while j + NR <= je {
                        micro_kernel(a, b, c, row0 + i, i, j, kb..ke, k, n);
                        j += NR;
                    }
                    edge_kernel(a, b, c, row0, i..i + MR, j..je, kb..ke, k, n);
                    i += MR;
                }
                edge_kernel(a, b, c, row0, i..ie, jb..je, kb..ke, k, n);
            }
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn micro_kernel(
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    a_row: usize,
    c_row: usize,
    col: usize,
    depth: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    let mut acc = [[0f32; NR]; MR];
    for p in depth {
        let brow: &[f32; NR] = b[p * n + col..p * n + col + NR].try_into().unwrap();
        for (r, acc_row) in acc.iter_mut().enumerate() {
            let av = a[(a_row + r) * k + p];
            for (acc_v, &bv) in acc_row.iter_mut().zip(brow) {
                *acc_v += av * bv;
            }
        }
    }
    for (r, acc_row) in acc.iter().enumerate() {
        let crow = &mut c[(c_row + r) * n + col..(c_row + r) * n + col + NR];
        for (cv, &av) in crow.iter_mut().zip(acc_row) {
            *cv += av;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn edge_kernel(
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    row0: usize,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    depth: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    for i in rows {
        for j in cols.clone() {
            let mut acc = 0f32;
            for p in depth.clone() {
                acc += a[(row0 + i) * k + p] * b[p * n + j];
            }
            c[i * n + j] += acc;
        }
    }
}

/// Exact int8 GEMM with int32 accumulation.
pub fn gemm_i8(a: &Tensor<i8>, b: &Tensor<i8>, workers: usize) -> Result<Tensor<i32>> {
    let n = check_pair(a, b)?;
    if n > 1 << 16 {
        return Err(Error::Shape(format!(
            "int8 GEMM of size {n} may overflow int32 accumulators"
        )));
    }
    let mut c = vec![0i32; n * n];
    igemm(a.data(), b.data(), &mut c, n, n, n, workers);
    Tensor::matrix(n, n, c)
}

/// `c[m x n] += a[m x k] * b[k x n]` over int8 inputs.
pub(crate) fn igemm(a: &[i8], b: &[i8], c: &mut [i32], m: usize, k: usize, n: usize, workers: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    par_row_chunks(c, n, workers, |row0, chunk| {
        for (r, crow) in chunk.chunks_mut(n).enumerate() {
            let arow = &a[(row0 + r) * k..(row0 + r + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0 {
                    continue;
                }
                let av = av as i32;
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv as i32;
                }
            }
        }
    });
}
