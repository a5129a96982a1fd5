//! Bit-serial operators over bit-plane packed operands.
//!
//! A `b`-bit operand is split into `b` planes; plane `i` holds bit `i` of every
//! element, packed along the reduction (innermost) dimension into 64-bit words.
//! Element 0 of a row is the least-significant bit of the row's first word and
//! bits past the row length are zero.
//!
//! A dot product is a weighted sum over plane pairs:
//!
//! * unipolar (digits 0/1): `sum 2^(i+j) * popcount(a_i & w_j)`
//! * bipolar (digits -1/+1, code bit 1 = +1): `sum 2^(i+j) * (2 * popcount(!(a_i ^ w_j)) - n)`
//!
//! A multi-bit bipolar code `c` therefore has the value `2c - (2^b - 1)`.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::conv::{check_input, check_weight, source_index};
use crate::kernels::{par_row_chunks, Layout, Tensor};
use crate::model::{ConvShape, Encoding};

pub const WORD_BITS: usize = 64;

/// Work performed by a bit-serial kernel, in 64-bit word operations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub popcount_blocks: u64,
    pub logic_blocks: u64,
}

impl std::ops::AddAssign for OpCounter {
    fn add_assign(&mut self, rhs: Self) {
        self.popcount_blocks += rhs.popcount_blocks;
        self.logic_blocks += rhs.logic_blocks;
    }
}

/// Signed value of an unsigned code.
pub fn decode(code: u8, bits: u8, encoding: Encoding) -> i32 {
    match encoding {
        Encoding::Unipolar => code as i32,
        Encoding::Bipolar => 2 * code as i32 - ((1i32 << bits) - 1),
    }
}

/// Bit-plane packed 2-D view of a tensor (outer dims flattened into rows).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedTensor {
    logical_dims: Vec<usize>,
    layout: Layout,
    rows: usize,
    cols: usize,
    bits: u8,
    encoding: Encoding,
    words_per_row: usize,
    /// `[bits][rows][words_per_row]`
    planes: Vec<u64>,
    /// Optional `[rows][words_per_row]` mask of positions that take part in
    /// the reduction; used for zero padding under the bipolar encoding.
    valid: Option<Vec<u64>>,
    valid_counts: Option<Vec<u32>>,
}

impl PackedTensor {
    pub fn logical_dims(&self) -> &[usize] {
        &self.logical_dims
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Reduction length.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn plane_count(&self) -> usize {
        self.bits as usize
    }

    /// Words of one plane (all rows).
    pub fn plane(&self, plane: usize) -> &[u64] {
        let len = self.rows * self.words_per_row;
        &self.planes[plane * len..(plane + 1) * len]
    }

    pub fn plane_row(&self, plane: usize, row: usize) -> &[u64] {
        let start = (plane * self.rows + row) * self.words_per_row;
        &self.planes[start..start + self.words_per_row]
    }

    pub fn plane_row_mut(&mut self, plane: usize, row: usize) -> &mut [u64] {
        let start = (plane * self.rows + row) * self.words_per_row;
        &mut self.planes[start..start + self.words_per_row]
    }

    /// Bits of the last word of each row that hold elements.
    pub fn tail_mask(&self) -> u64 {
        tail_mask(self.cols)
    }

    pub fn has_mask(&self) -> bool {
        self.valid.is_some()
    }
}

fn tail_mask(cols: usize) -> u64 {
    match cols % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

#[allow(clippy::too_many_arguments)]
fn pack_rows(
    codes: &[u8],
    valid: Option<&[bool]>,
    rows: usize,
    cols: usize,
    bits: u8,
    encoding: Encoding,
    logical_dims: Vec<usize>,
    layout: Layout,
) -> Result<PackedTensor> {
    if !(1..=8).contains(&bits) {
        return Err(Error::invalid(format!("bit width must be 1..=8, got {bits}")));
    }
    if cols == 0 {
        return Err(Error::invalid("cannot pack an empty reduction dimension"));
    }
    let limit = 1u16 << bits;
    if let Some(pos) = codes.iter().position(|&c| c as u16 >= limit) {
        return Err(Error::invalid(format!(
            "element {pos} = {} does not fit in {bits} bits",
            codes[pos]
        )));
    }
    let wpr = cols.div_ceil(WORD_BITS);
    let mut planes = vec![0u64; bits as usize * rows * wpr];
    let mut mask = valid.map(|_| vec![0u64; rows * wpr]);
    for r in 0..rows {
        let row = &codes[r * cols..(r + 1) * cols];
        for (c, &code) in row.iter().enumerate() {
            let (word, bit) = (c / WORD_BITS, c % WORD_BITS);
            if let (Some(mask), Some(valid)) = (mask.as_mut(), valid) {
                if !valid[r * cols + c] {
                    continue;
                }
                mask[r * wpr + word] |= 1 << bit;
            }
            for p in 0..bits as usize {
                planes[(p * rows + r) * wpr + word] |= (((code >> p) & 1) as u64) << bit;
            }
        }
    }
    let valid_counts = mask.as_ref().map(|m| {
        m.chunks(wpr)
            .map(|row| row.iter().map(|w| w.count_ones()).sum())
            .collect()
    });
    Ok(PackedTensor {
        logical_dims,
        layout,
        rows,
        cols,
        bits,
        encoding,
        words_per_row: wpr,
        planes,
        valid: mask,
        valid_counts,
    })
}

/// Pack a tensor of codes along its innermost dimension.
pub fn bitpack(x: &Tensor<u8>, bits: u8, encoding: Encoding) -> Result<PackedTensor> {
    let cols = *x.dims().last().unwrap_or(&0);
    let rows = x.len().checked_div(cols).unwrap_or(0);
    pack_rows(
        x.data(),
        None,
        rows,
        cols,
        bits,
        encoding,
        x.dims().to_vec(),
        x.layout(),
    )
}

/// Inverse of [`bitpack`]. Masked-out positions come back as code 0.
pub fn unpack(p: &PackedTensor) -> Tensor<u8> {
    let mut data = vec![0u8; p.rows * p.cols];
    for r in 0..p.rows {
        for c in 0..p.cols {
            let (word, bit) = (c / WORD_BITS, c % WORD_BITS);
            let mut code = 0u8;
            for plane in 0..p.bits as usize {
                code |= (((p.plane_row(plane, r)[word] >> bit) & 1) as u8) << plane;
            }
            data[r * p.cols + c] = code;
        }
    }
    Tensor::new(p.logical_dims.clone(), p.layout, data).expect("packed dims are consistent")
}

fn check_compatible(a: &PackedTensor, w: &PackedTensor) -> Result<()> {
    if a.cols != w.cols || a.words_per_row != w.words_per_row {
        return Err(Error::Shape(format!(
            "reduction lengths differ: {} vs {}",
            a.cols, w.cols
        )));
    }
    if a.encoding != w.encoding {
        return Err(Error::Shape(format!(
            "encodings differ: {:?} vs {:?}",
            a.encoding, w.encoding
        )));
    }
    Ok(())
}

/// Dot product of row `a_row` of `a` with row `w_row` of `w`.
pub fn dot_bitserial(
    a: &PackedTensor,
    a_row: usize,
    w: &PackedTensor,
    w_row: usize,
    counter: &mut OpCounter,
) -> Result<i64> {
    check_compatible(a, w)?;
    if a_row >= a.rows || w_row >= w.rows {
        return Err(Error::Shape(format!(
            "row {a_row}/{w_row} out of range ({}/{})",
            a.rows, w.rows
        )));
    }
    Ok(dot_unchecked(a, a_row, w, w_row, counter))
}

#[inline]
fn row_mask(t: &PackedTensor, row: usize) -> Option<&[u64]> {
    t.valid
        .as_deref()
        .map(|m| &m[row * t.words_per_row..(row + 1) * t.words_per_row])
}

fn dot_unchecked(a: &PackedTensor, ar: usize, w: &PackedTensor, wr: usize, counter: &mut OpCounter) -> i64 {
    let wpr = a.words_per_row;
    let blocks = (wpr * a.bits as usize * w.bits as usize) as u64;
    counter.popcount_blocks += blocks;
    counter.logic_blocks += blocks;

    let masks = (row_mask(a, ar), row_mask(w, wr));
    let tail = tail_mask(a.cols);
    let mask_word = |k: usize| -> u64 {
        let m = if k + 1 == wpr { tail } else { u64::MAX };
        match masks {
            (Some(x), Some(y)) => m & x[k] & y[k],
            (Some(x), None) | (None, Some(x)) => m & x[k],
            (None, None) => m,
        }
    };
    let n_eff = match (masks, &a.valid_counts, &w.valid_counts) {
        ((None, None), _, _) => a.cols as i64,
        ((Some(_), None), Some(c), _) => c[ar] as i64,
        ((None, Some(_)), _, Some(c)) => c[wr] as i64,
        _ => (0..wpr).map(|k| mask_word(k).count_ones() as i64).sum(),
    };
    let masked = masks.0.is_some() || masks.1.is_some();

    let mut acc = 0i64;
    for i in 0..a.bits as usize {
        let ap = a.plane_row(i, ar);
        for j in 0..w.bits as usize {
            let wp = w.plane_row(j, wr);
            let pc: u32 = match (a.encoding, masked) {
                (Encoding::Unipolar, false) => {
                    let body: u32 = ap[..wpr - 1]
                        .iter()
                        .zip(&wp[..wpr - 1])
                        .map(|(x, y)| (x & y).count_ones())
                        .sum();
                    body + (ap[wpr - 1] & wp[wpr - 1] & tail).count_ones()
                }
                (Encoding::Bipolar, false) => {
                    let body: u32 = ap[..wpr - 1]
                        .iter()
                        .zip(&wp[..wpr - 1])
                        .map(|(x, y)| (!(x ^ y)).count_ones())
                        .sum();
                    body + (!(ap[wpr - 1] ^ wp[wpr - 1]) & tail).count_ones()
                }
                (Encoding::Unipolar, true) => (0..wpr)
                    .map(|k| (ap[k] & wp[k] & mask_word(k)).count_ones())
                    .sum(),
                (Encoding::Bipolar, true) => (0..wpr)
                    .map(|k| (!(ap[k] ^ wp[k]) & mask_word(k)).count_ones())
                    .sum(),
            };
            let term = match a.encoding {
                Encoding::Unipolar => pc as i64,
                Encoding::Bipolar => 2 * pc as i64 - n_eff,
            };
            acc += term << (i + j);
        }
    }
    acc
}

/// `out[i][j] = dot(a row i, w row j)`; `w` holds one packed row per output column.
pub fn gemm_bitserial(a: &PackedTensor, w: &PackedTensor, workers: usize) -> Result<(Tensor<i32>, OpCounter)> {
    check_compatible(a, w)?;
    let max_term = ((1u64 << a.bits) - 1) * ((1u64 << w.bits) - 1) * a.cols as u64;
    if max_term > i32::MAX as u64 {
        return Err(Error::Shape(format!(
            "reduction of {} elements at {}x{} bits may overflow int32",
            a.cols, a.bits, w.bits
        )));
    }
    let (m, n) = (a.rows, w.rows);
    let mut out = vec![0i32; m * n];
    let popcounts = AtomicU64::new(0);
    let logic = AtomicU64::new(0);
    par_row_chunks(&mut out, n, workers, |row0, chunk| {
        let mut local = OpCounter::default();
        for (r, orow) in chunk.chunks_mut(n).enumerate() {
            for (j, o) in orow.iter_mut().enumerate() {
                *o = dot_unchecked(a, row0 + r, w, j, &mut local) as i32;
            }
        }
        popcounts.fetch_add(local.popcount_blocks, Ordering::Relaxed);
        logic.fetch_add(local.logic_blocks, Ordering::Relaxed);
    });
    let counter = OpCounter {
        popcount_blocks: popcounts.into_inner(),
        logic_blocks: logic.into_inner(),
    };
    Ok((Tensor::matrix(m, n, out)?, counter))
}

/// im2col of an NCHW code tensor in pixel-major order, packed.
///
/// Row `(bi*h_out + oy)*w_out + ox`, column `(ci*k_h + ky)*k_w + kx`. Padding
/// taps carry code 0; under the bipolar encoding they are also masked out of
/// the reduction so they contribute nothing.
pub fn pack_conv_activations(
    input: &Tensor<u8>,
    shape: &ConvShape,
    bits: u8,
    encoding: Encoding,
) -> Result<PackedTensor> {
    let (h_out, w_out) = check_input(input, shape)?;
    let s = *shape;
    let rows = s.b * h_out * w_out;
    let cols = s.reduction_len();
    let in_plane = s.h_in * s.w_in;
    let x = input.data();
    let mut codes = vec![0u8; rows * cols];
    let mut valid = vec![false; rows * cols];
    for bi in 0..s.b {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let r = (bi * h_out + oy) * w_out + ox;
                for ci in 0..s.c_in {
                    let src = &x[(bi * s.c_in + ci) * in_plane..(bi * s.c_in + ci + 1) * in_plane];
                    for ky in 0..s.k_h {
                        let Some(iy) = source_index(oy, ky, s.stride, s.pad, s.h_in) else {
                            continue;
                        };
                        for kx in 0..s.k_w {
                            let Some(ix) = source_index(ox, kx, s.stride, s.pad, s.w_in) else {
                                continue;
                            };
                            let c = (ci * s.k_h + ky) * s.k_w + kx;
                            codes[r * cols + c] = src[iy * s.w_in + ix];
                            valid[r * cols + c] = true;
                        }
                    }
                }
            }
        }
    }
    let needs_mask = encoding == Encoding::Bipolar && valid.iter().any(|v| !v);
    pack_rows(
        &codes,
        needs_mask.then_some(valid.as_slice()),
        rows,
        cols,
        bits,
        encoding,
        vec![rows, cols],
        Layout::RowMajor2d,
    )
}

/// OIHW weights as `c_out` packed rows of length `c_in*k_h*k_w`.
pub fn pack_conv_weights(weight: &Tensor<u8>, shape: &ConvShape, bits: u8, encoding: Encoding) -> Result<PackedTensor> {
    check_weight(weight, shape)?;
    pack_rows(
        weight.data(),
        None,
        shape.c_out,
        shape.reduction_len(),
        bits,
        encoding,
        weight.dims().to_vec(),
        Layout::Oihw,
    )
}

/// Convolution over pre-packed operands; returns NCHW int32 output.
pub fn conv2d_bitserial_packed(
    activations: &PackedTensor,
    weights: &PackedTensor,
    shape: &ConvShape,
    workers: usize,
) -> Result<(Tensor<i32>, OpCounter)> {
    let (h_out, w_out) = crate::model::conv_output_dims(shape, crate::model::OutputConvention::Standard)?;
    let plane = h_out * w_out;
    if activations.rows != shape.b * plane || weights.rows != shape.c_out {
        return Err(Error::Shape(format!(
            "packed operands ({} x {}) do not match {shape:?}",
            activations.rows, weights.rows
        )));
    }
    let (mat, counter) = gemm_bitserial(activations, weights, workers)?;
    let mat = mat.data();
    let mut out = vec![0i32; shape.b * shape.c_out * plane];
    for bi in 0..shape.b {
        for pix in 0..plane {
            let src = &mat[(bi * plane + pix) * shape.c_out..(bi * plane + pix + 1) * shape.c_out];
            for (o, &v) in src.iter().enumerate() {
                out[(bi * shape.c_out + o) * plane + pix] = v;
            }
        }
    }
    Ok((
        Tensor::new(vec![shape.b, shape.c_out, h_out, w_out], Layout::Nchw, out)?,
        counter,
    ))
}

/// Pack both operands and convolve.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bitserial(
    input: &Tensor<u8>,
    weight: &Tensor<u8>,
    shape: &ConvShape,
    activation_bits: u8,
    weight_bits: u8,
    encoding: Encoding,
    workers: usize,
) -> Result<(Tensor<i32>, OpCounter)> {
    let acts = pack_conv_activations(input, shape, activation_bits, encoding)?;
    let wts = pack_conv_weights(weight, shape, weight_bits, encoding)?;
    conv2d_bitserial_packed(&acts, &wts, shape, workers)
}
