use super::Tensor;
use crate::error::{Error, Result};

/// Symmetric signed quantization: `scale = max|x| / (2^(bits-1) - 1)`.
///
/// An all-zero input gets scale 1.0.
pub fn quantize_signed(x: &Tensor<f32>, bits: u32) -> Result<(Tensor<i8>, f32)> {
    if !(2..=8).contains(&bits) {
        return Err(Error::invalid(format!(
            "signed quantization needs 2..=8 bits, got {bits}"
        )));
    }
    let qmax = ((1i32 << (bits - 1)) - 1) as f32;
    check_finite(x)?;
    let max_abs = x.data().iter().fold(0f32, |m, v| m.max(v.abs()));
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / qmax };
    let q = x.map(|&v| (v / scale).round().clamp(-qmax, qmax) as i8);
    Ok((q, scale))
}

/// Unsigned quantization: `scale = max(x) / (2^bits - 1)`; negatives clamp to 0.
pub fn quantize_unsigned(x: &Tensor<f32>, bits: u32) -> Result<(Tensor<u8>, f32)> {
    if !(1..=8).contains(&bits) {
        return Err(Error::invalid(format!(
            "unsigned quantization needs 1..=8 bits, got {bits}"
        )));
    }
    let qmax = ((1u32 << bits) - 1) as f32;
    check_finite(x)?;
    let max = x.data().iter().fold(0f32, |m, &v| m.max(v));
    let scale = if max == 0.0 { 1.0 } else { max / qmax };
    let q = x.map(|&v| (v / scale).round().clamp(0.0, qmax) as u8);
    Ok((q, scale))
}

fn check_finite(x: &Tensor<f32>) -> Result<()> {
    if x.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid("cannot quantize non-finite values"))
    }
}

pub fn dequantize<T: Copy + Into<f32>>(q: &Tensor<T>, scale: f32) -> Tensor<f32> {
    q.map(|&v| v.into() * scale)
}
