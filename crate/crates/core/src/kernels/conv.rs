use super::{igemm, par_row_chunks, sgemm, Layout, Tensor, TileParams};
use crate::error::{Error, Result};
use crate::model::{conv_output_dims, ConvShape, OutputConvention};

pub(crate) fn check_input<T>(input: &Tensor<T>, shape: &ConvShape) -> Result<(usize, usize)> {
    shape.validate()?;
    let expect = [shape.b, shape.c_in, shape.h_in, shape.w_in];
    if input.layout() != Layout::Nchw || input.dims() != expect {
        return Err(Error::Shape(format!(
            "input must be NCHW {:?}, got {:?} {:?}",
            expect,
            input.layout(),
            input.dims()
        )));
    }
    conv_output_dims(shape, OutputConvention::Standard)
}

pub(crate) fn check_weight<T>(weight: &Tensor<T>, shape: &ConvShape) -> Result<()> {
    let expect = [shape.c_out, shape.c_in, shape.k_h, shape.k_w];
    if weight.layout() != Layout::Oihw || weight.dims() != expect {
        return Err(Error::Shape(format!(
            "weight must be OIHW {:?}, got {:?} {:?}",
            expect,
            weight.layout(),
            weight.dims()
        )));
    }
    Ok(())
}

/// Input row/column for output position `out` and kernel tap `tap`, or None
/// when the tap lands in the zero padding.
#[inline]
pub(crate) fn source_index(out: usize, tap: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    (out * stride + tap)
        .checked_sub(pad)
        .filter(|&v| v < extent)
}

/// Direct zero-padded convolution; output channels are split across workers.
pub fn conv2d_f32(
    input: &Tensor<f32>,
    weight: &Tensor<f32>,
    shape: &ConvShape,
    workers: usize,
) -> Result<Tensor<f32>> {
    let (h_out, w_out) = check_input(input, shape)?;
    check_weight(weight, shape)?;
    let s = *shape;
    let plane = h_out * w_out;
    let in_plane = s.h_in * s.w_in;
    let (x, w) = (input.data(), weight.data());
    let mut out = vec![0f32; s.b * s.c_out * plane];
    for (bi, out_b) in out.chunks_mut(s.c_out * plane).enumerate() {
        let x_b = &x[bi * s.c_in * in_plane..(bi + 1) * s.c_in * in_plane];
        par_row_chunks(out_b, plane, workers, |o0, chunk| {
            for (oi, out_o) in chunk.chunks_mut(plane).enumerate() {
                let w_o = &w[(o0 + oi) * s.reduction_len()..(o0 + oi + 1) * s.reduction_len()];
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = 0f32;
                        for ci in 0..s.c_in {
                            for ky in 0..s.k_h {
                                let Some(iy) = source_index(oy, ky, s.stride, s.pad, s.h_in) else {
                                    continue;
                                };
                                for kx in 0..s.k_w {
                                    let Some(ix) = source_index(ox, kx, s.stride, s.pad, s.w_in) else {
                                        continue;
                                    };
                                    acc += x_b[ci * in_plane + iy * s.w_in + ix]
                                        * w_o[(ci * s.k_h + ky) * s.k_w + kx];
                                }
                            }
                        }
                        out_o[oy * w_out + ox] = acc;
                    }
                }
            }
        });
    }
    Tensor::new(vec![s.b, s.c_out, h_out, w_out], Layout::Nchw, out)
}

/// Unfold input windows into a `(c_in*k_h*k_w) x (b*h_out*w_out)` matrix.
///
/// Row `(ci*k_h + ky)*k_w + kx`, column `(bi*h_out + oy)*w_out + ox`; taps in
/// the padding are zero.
pub fn im2col<T: Copy + Default>(input: &Tensor<T>, shape: &ConvShape) -> Result<Tensor<T>> {
    let (h_out, w_out) = check_input(input, shape)?;
    let s = *shape;
    let cols = s.b * h_out * w_out;
    let rows = s.reduction_len();
    let in_plane = s.h_in * s.w_in;
    let x = input.data();
    let mut out = vec![T::default(); rows * cols];
    for ci in 0..s.c_in {
        for ky in 0..s.k_h {
            for kx in 0..s.k_w {
                let row = (ci * s.k_h + ky) * s.k_w + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for bi in 0..s.b {
                    let src = &x[(bi * s.c_in + ci) * in_plane..(bi * s.c_in + ci + 1) * in_plane];
                    for oy in 0..h_out {
                        let Some(iy) = source_index(oy, ky, s.stride, s.pad, s.h_in) else {
                            continue;
                        };
                        let base = (bi * h_out + oy) * w_out;
                        for ox in 0..w_out {
                            if let Some(ix) = source_index(ox, kx, s.stride, s.pad, s.w_in) {
                                dst[base + ox] = src[iy * s.w_in + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// `[c_out x b*hw]` GEMM result back to NCHW.
fn to_nchw<T: Copy + Default>(mat: &[T], b: usize, c_out: usize, plane: usize) -> Vec<T> {
    if b == 1 {
        return mat.to_vec();
    }
    let mut out = vec![T::default(); mat.len()];
    for o in 0..c_out {
        for bi in 0..b {
            let src = &mat[o * b * plane + bi * plane..o * b * plane + (bi + 1) * plane];
            out[(bi * c_out + o) * plane..(bi * c_out + o + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// Convolution as the blocked GEMM of the OIHW weight matrix with [`im2col`].
pub fn conv2d_f32_im2col(
    input: &Tensor<f32>,
    weight: &Tensor<f32>,
    shape: &ConvShape,
    workers: usize,
    tile: TileParams,
) -> Result<Tensor<f32>> {
    check_weight(weight, shape)?;
    let cols = im2col(input, shape)?;
    let (h_out, w_out) = conv_output_dims(shape, OutputConvention::Standard)?;
    let k = shape.reduction_len();
    let p = cols.dims()[1];
    let mut mat = vec![0f32; shape.c_out * p];
    sgemm(weight.data(), cols.data(), &mut mat, shape.c_out, k, p, workers, tile);
    Tensor::new(
        vec![shape.b, shape.c_out, h_out, w_out],
        Layout::Nchw,
        to_nchw(&mat, shape.b, shape.c_out, h_out * w_out),
    )
}

/// Exact int8 convolution (im2col + int32-accumulating GEMM).
pub fn conv2d_i8(
    input: &Tensor<i8>,
    weight: &Tensor<i8>,
    shape: &ConvShape,
    workers: usize,
) -> Result<Tensor<i32>> {
    check_weight(weight, shape)?;
    let cols = im2col(input, shape)?;
    let (h_out, w_out) = conv_output_dims(shape, OutputConvention::Standard)?;
    let p = cols.dims()[1];
    let mut mat = vec![0i32; shape.c_out * p];
    igemm(
        weight.data(),
        cols.data(),
        &mut mat,
        shape.c_out,
        shape.reduction_len(),
        p,
        workers,
    );
    Tensor::new(
        vec![shape.b, shape.c_out, h_out, w_out],
        Layout::Nchw,
        to_nchw(&mat, shape.b, shape.c_out, h_out * w_out),
    )
}
