//! Reference operators: float32 and int8 GEMM and 2-D convolution.

pub(crate) mod conv;
mod gemm;
mod quant;

pub use conv::{conv2d_f32, conv2d_f32_im2col, conv2d_i8, im2col};
pub use gemm::{gemm_f32_naive, gemm_f32_opt, gemm_i8, TileParams};
pub use quant::{dequantize, quantize_signed, quantize_unsigned};

pub(crate) use gemm::{igemm, sgemm};

use crate::error::{Error, Result};

/// Dimension order of a tensor's buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layout {
    RowMajor2d,
    /// Batch, channel, height, width.
    Nchw,
    /// Output channel, input channel, kernel height, kernel width.
    Oihw,
}

impl Layout {
    pub fn arity(self) -> usize {
        match self {
            Layout::RowMajor2d => 2,
            Layout::Nchw | Layout::Oihw => 4,
        }
    }
}

/// Dense row-major buffer with explicit dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    layout: Layout,
    data: Vec<T>,
}

impl<T> Tensor<T> {
    pub fn new(dims: Vec<usize>, layout: Layout, data: Vec<T>) -> Result<Self> {
        if dims.len() != layout.arity() {
            return Err(Error::Shape(format!(
                "{layout:?} needs {} dims, got {}",
                layout.arity(),
                dims.len()
            )));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {len} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, layout, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], Layout::RowMajor2d, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            layout: self.layout,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Copy + Default> Tensor<T> {
    pub fn zeros(dims: Vec<usize>, layout: Layout) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, layout, vec![T::default(); len])
    }
}

impl<T: Copy + Default + From<bool>> Tensor<T> {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![T::default(); n * n];
        for i in 0..n {
            data[i * n + i] = T::from(true);
        }
        Tensor {
            dims: vec![n, n],
            layout: Layout::RowMajor2d,
            data,
        }
    }
}

/// Edge length of a square row-major matrix.
pub(crate) fn square_edge<T>(t: &Tensor<T>, what: &str) -> Result<usize> {
    match (t.layout, t.dims.as_slice()) {
        (Layout::RowMajor2d, &[r, c]) if r == c => Ok(r),
        _ => Err(Error::Shape(format!(
            "{what} must be a square row-major matrix, got {:?} {:?}",
            t.layout, t.dims
        ))),
    }
}

/// Run `f(first_row, chunk)` over contiguous row chunks of `out` on up to
/// `workers` scoped threads. The partition depends only on `rows` and `workers`.
pub(crate) fn par_row_chunks<T, F>(out: &mut [T], row_len: usize, workers: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    if row_len == 0 || out.is_empty() {
        return;
    }
    let rows = out.len() / row_len;
    let workers = workers.clamp(1, rows.max(1));
    if workers == 1 {
        f(0, out);
        return;
    }
    let rows_per = rows.div_ceil(workers);
    std::thread::scope(|s| {
        for (idx, chunk) in out.chunks_mut(rows_per * row_len).enumerate() {
            let f = &f;
            s.spawn(move || f(idx * rows_per, chunk));
        }
    });
}
