//! Analytical performance model: theoretical peak, MAC counts, the
//! one-operand-read-per-MAC cache bound and the bandwidth a measured
//! performance would require.
//!
//! Everything here is a pure function of its arguments. Bandwidths are held in
//! bytes per second; MiB/GiB conversion happens only when presenting values.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes in one MiB (RAMspeed-style binary megabyte).
pub const MIB: f64 = 1_048_576.0;
/// Bytes in one GiB.
pub const GIB: f64 = 1_073_741_824.0;

/// One level of the memory hierarchy as characterized by a block-size probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryLevel {
    pub label: String,
    /// Capacity in bytes.
    pub capacity: u64,
    /// Block size in bytes used to probe this level.
    pub probe_block: u64,
    /// Read bandwidth, bytes/s.
    pub read_bw: f64,
    /// Write bandwidth, bytes/s.
    pub write_bw: f64,
}

impl MemoryLevel {
    pub fn new(label: impl Into<String>, capacity: u64, probe_block: u64) -> Self {
        MemoryLevel {
            label: label.into(),
            capacity,
            probe_block,
            read_bw: 0.0,
            write_bw: 0.0,
        }
    }

    pub fn with_bandwidth(mut self, read_bw: f64, write_bw: f64) -> Self {
        self.read_bw = read_bw;
        self.write_bw = write_bw;
        self
    }
}

/// CPU identity plus its measured memory hierarchy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineSpec {
    pub name: String,
    /// Clock frequency per core in Hz.
    pub frequency: f64,
    pub cores: u32,
    /// FLOPs per vector instruction (2 for a MAC).
    pub flops_per_instr: u32,
    pub instr_per_cycle: u32,
    pub simd_width_bits: u32,
    /// Fastest level first.
    pub memory_levels: Vec<MemoryLevel>,
    /// Peak measured by the register-resident MAC benchmark, FLOP/s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_peak: Option<f64>,
    /// Consistency warnings recorded while probing.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MachineSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency.is_finite() && self.frequency > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "{}: frequency must be positive",
                self.name
            )));
        }
        for (what, v) in [
            ("cores", self.cores),
            ("flops_per_instr", self.flops_per_instr),
            ("instr_per_cycle", self.instr_per_cycle),
            ("simd_width_bits", self.simd_width_bits),
        ] {
            if v == 0 {
                return Err(Error::InvalidSpec(format!(
                    "{}: {what} must be positive",
                    self.name
                )));
            }
        }
        if self.memory_levels.is_empty() {
            return Err(Error::InvalidSpec(format!(
                "{}: no memory levels",
                self.name
            )));
        }
        for level in &self.memory_levels {
            if level.probe_block > level.capacity {
                return Err(Error::InvalidSpec(format!(
                    "{}: probe block {} B exceeds capacity {} B",
                    level.label, level.probe_block, level.capacity
                )));
            }
            if !(level.read_bw >= 0.0 && level.write_bw >= 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "{}: negative or NaN bandwidth",
                    level.label
                )));
            }
        }
        Ok(())
    }

    /// False when a slower level reports a higher read bandwidth than a faster one.
    pub fn read_bandwidth_monotone(&self) -> bool {
        self.memory_levels
            .windows(2)
            .all(|w| w[0].read_bw >= w[1].read_bw)
    }

    pub fn level(&self, label: &str) -> Option<&MemoryLevel> {
        self.memory_levels.iter().find(|l| l.label == label)
    }
}

/// Square GEMM workload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GemmShape {
    pub n: usize,
}

impl GemmShape {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("GEMM size must be at least 1"));
        }
        Ok(GemmShape { n })
    }
}

/// 2-D convolution workload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvShape {
    pub b: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: usize,
        c_in: usize,
        c_out: usize,
        h_in: usize,
        w_in: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let shape = ConvShape {
            b,
            c_in,
            c_out,
            h_in,
            w_in,
            k_h,
            k_w,
            stride,
            pad,
        };
        shape.validate()?;
        Ok(shape)
    }

    /// Square-kernel, single-batch shorthand.
    pub fn square(c_in: usize, c_out: usize, hw: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Self::new(1, c_in, c_out, hw, hw, k, k, stride, pad)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("b", self.b),
            ("c_in", self.c_in),
            ("c_out", self.c_out),
            ("h_in", self.h_in),
            ("w_in", self.w_in),
            ("k_h", self.k_h),
            ("k_w", self.k_w),
            ("stride", self.stride),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::invalid(format!("conv {name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Length of the reduction (c_in * k_h * k_w).
    pub fn reduction_len(&self) -> usize {
        self.c_in * self.k_h * self.k_w
    }
}

/// How convolution output sizes are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputConvention {
    /// `(h_in + 2p) / s`, the form the ResNet-18 MAC table is built on.
    Paper,
    /// `(h_in + 2p - k) / s + 1`, what a sliding-window kernel actually produces.
    #[default]
    Standard,
}

impl FromStr for OutputConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(OutputConvention::Paper),
            "standard" => Ok(OutputConvention::Standard),
            other => Err(Error::invalid(format!(
                "unknown convention `{other}` (expected paper or standard)"
            ))),
        }
    }
}

impl fmt::Display for OutputConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputConvention::Paper => "paper",
            OutputConvention::Standard => "standard",
        })
    }
}

/// Value alphabet of a bit-serial operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Encoding {
    /// Digits in {0, 1}.
    Unipolar,
    /// Digits in {-1, +1}.
    Bipolar,
}

impl Encoding {
    fn suffix(self) -> char {
        match self {
            Encoding::Unipolar => 'u',
            Encoding::Bipolar => 'b',
        }
    }
}

/// Element encoding of an operator run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Precision {
    F32,
    I8,
    BitSerial {
        activation_bits: u8,
        weight_bits: u8,
        encoding: Encoding,
    },
}

impl Precision {
    pub fn bitserial(activation_bits: u8, weight_bits: u8, encoding: Encoding) -> Result<Self> {
        for bits in [activation_bits, weight_bits] {
            if !(1..=8).contains(&bits) {
                return Err(Error::invalid(format!(
                    "bit-serial widths must be 1..=8, got {bits}"
                )));
            }
        }
        Ok(Precision::BitSerial {
            activation_bits,
            weight_bits,
            encoding,
        })
    }

    /// Bits read from memory per MAC: the activation operand for bit-serial.
    pub fn bits_per_operand(&self) -> u32 {
        match *self {
            Precision::F32 => 32,
            Precision::I8 => 8,
            Precision::BitSerial {
                activation_bits, ..
            } => activation_bits as u32,
        }
    }

    pub fn bytes_per_operand(&self) -> f64 {
        self.bits_per_operand() as f64 / 8.0
    }

    /// Element width fed to the peak formula.
    pub fn element_bits(&self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::I8 => 8,
            Precision::BitSerial { .. } => 1,
        }
    }

    pub fn is_bitserial(&self) -> bool {
        matches!(self, Precision::BitSerial { .. })
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Precision::F32 => f.write_str("f32"),
            Precision::I8 => f.write_str("i8"),
            Precision::BitSerial {
                activation_bits,
                weight_bits,
                encoding,
            } => write!(
                f,
                "bs{activation_bits}x{weight_bits}{}",
                encoding.suffix()
            ),
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::invalid(format!(
                "bad precision `{s}` (expected f32, i8, bs<a>x<w>u or bs<a>x<w>b)"
            ))
        };
        match s {
            "f32" => return Ok(Precision::F32),
            "i8" => return Ok(Precision::I8),
            _ => {}
        }
        let body = s.strip_prefix("bs").ok_or_else(bad)?;
        let encoding = match body.chars().last() {
            Some('u') => Encoding::Unipolar,
            Some('b') => Encoding::Bipolar,
            _ => return Err(bad()),
        };
        let (a, w) = body[..body.len() - 1].split_once('x').ok_or_else(bad)?;
        let a: u8 = a.parse().map_err(|_| bad())?;
        let w: u8 = w.parse().map_err(|_| bad())?;
        Precision::bitserial(a, w, encoding)
    }
}

impl Serialize for Precision {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Precision {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Time one memory level needs to deliver the operand volume.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTime {
    pub label: String,
    pub seconds: f64,
}

/// Model-predicted lower-bound times for one workload.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundEstimate {
    pub macs: u64,
    /// Bytes read under the one-operand-per-MAC assumption.
    pub bytes: f64,
    pub compute_time: f64,
    /// One entry per memory level, fastest first.
    pub read_times: Vec<LevelTime>,
    pub limiting_label: String,
    pub limiting_time: f64,
}

pub const COMPUTE_LABEL: &str = "compute";

impl BoundEstimate {
    pub fn read_time(&self, label: &str) -> Option<f64> {
        self.read_times
            .iter()
            .find(|t| t.label == label)
            .map(|t| t.seconds)
    }

    /// All bounds in tie-break order: memory levels fastest first, then compute.
    pub fn bounds(&self) -> impl Iterator<Item = (&str, f64)> {
        self.read_times
            .iter()
            .map(|t| (t.label.as_str(), t.seconds))
            .chain(std::iter::once((COMPUTE_LABEL, self.compute_time)))
    }
}

/// Theoretical peak in FLOP/s for elements of `element_bits` width.
pub fn peak_performance(spec: &MachineSpec, element_bits: u32) -> Result<f64> {
    if element_bits == 0 || !spec.simd_width_bits.is_multiple_of(element_bits) {
        return Err(Error::invalid(format!(
            "element width {element_bits} does not divide SIMD width {}",
            spec.simd_width_bits
        )));
    }
    let lanes = (spec.simd_width_bits / element_bits) as f64;
    Ok(spec.frequency
        * spec.cores as f64
        * spec.flops_per_instr as f64
        * spec.instr_per_cycle as f64
        * lanes)
}

/// Peak op rate assumed for a bit-serial operator.
///
/// One popcount block covers `simd_width_bits` one-bit MACs. A multi-bit MAC
/// needs `activation_bits * weight_bits` plane pairs, and unipolar operands pay
/// one more popcount and subtract per block, doubling the block cost.
pub fn bitserial_peak(spec: &MachineSpec, precision: &Precision) -> Result<f64> {
    match *precision {
        Precision::BitSerial {
            activation_bits,
            weight_bits,
            encoding,
        } => {
            let block_cost = match encoding {
                Encoding::Bipolar => 1.0,
                Encoding::Unipolar => 2.0,
            };
            let binary_peak = peak_performance(spec, 1)?;
            Ok(binary_peak / (activation_bits as f64 * weight_bits as f64 * block_cost))
        }
        _ => Err(Error::invalid(format!("{precision} is not bit-serial"))),
    }
}

/// Peak used as the compute bound for `precision`.
pub fn compute_peak(spec: &MachineSpec, precision: &Precision) -> Result<f64> {
    if precision.is_bitserial() {
        bitserial_peak(spec, precision)
    } else {
        peak_performance(spec, precision.element_bits())
    }
}

pub fn gemm_macs(shape: GemmShape) -> u64 {
    let n = shape.n as u64;
    n * n * n
}

/// FLOP/s achieved by `macs` multiply-accumulates in `seconds`.
pub fn performance_from_time(macs: u64, seconds: f64) -> Result<f64> {
    if !(seconds > 0.0) {
        return Err(Error::invalid(format!(
            "execution time must be positive, got {seconds}"
        )));
    }
    Ok(2.0 * macs as f64 / seconds)
}

/// Output height and width of a convolution.
pub fn conv_output_dims(shape: &ConvShape, conv: OutputConvention) -> Result<(usize, usize)> {
    shape.validate()?;
    let extent_h = shape.h_in + 2 * shape.pad;
    let extent_w = shape.w_in + 2 * shape.pad;
    match conv {
        OutputConvention::Paper => Ok((extent_h / shape.stride, extent_w / shape.stride)),
        OutputConvention::Standard => {
            if extent_h < shape.k_h || extent_w < shape.k_w {
                return Err(Error::invalid(format!(
                    "kernel {}x{} larger than padded input {}x{}",
                    shape.k_h, shape.k_w, extent_h, extent_w
                )));
            }
            Ok((
                (extent_h - shape.k_h) / shape.stride + 1,
                (extent_w - shape.k_w) / shape.stride + 1,
            ))
        }
    }
}

pub fn conv_macs(shape: &ConvShape, conv: OutputConvention) -> Result<u64> {
    let (h_out, w_out) = conv_output_dims(shape, conv)?;
    Ok([
        shape.b,
        h_out,
        w_out,
        shape.c_in,
        shape.c_out,
        shape.k_h,
        shape.k_w,
    ]
    .iter()
    .map(|&v| v as u64)
    .product())
}

/// Bandwidth (bytes/s) needed to sustain `performance` FLOP/s with one
/// `bytes_per_read`-byte read per MAC.
pub fn required_bandwidth(performance: f64, bytes_per_read: f64) -> Result<f64> {
    if !(bytes_per_read > 0.0) {
        return Err(Error::invalid(format!(
            "bytes per read must be positive, got {bytes_per_read}"
        )));
    }
    if !(performance >= 0.0) {
        return Err(Error::invalid(format!(
            "performance must be non-negative, got {performance}"
        )));
    }
    Ok(performance * bytes_per_read / 2.0)
}

/// Compute and per-level read bounds for `macs` MACs at `precision`.
///
/// The limiting bound is the largest time. Ties go to the memory level listed
/// first, then to compute.
pub fn bound_estimate(macs: u64, precision: &Precision, spec: &MachineSpec) -> Result<BoundEstimate> {
    if macs == 0 {
        return Err(Error::invalid("bound estimate needs at least one MAC"));
    }
    if spec.memory_levels.is_empty() {
        return Err(Error::InvalidSpec(format!("{}: no memory levels", spec.name)));
    }
    let bytes = macs as f64 * precision.bytes_per_operand();
    let mut read_times = Vec::with_capacity(spec.memory_levels.len());
    for level in &spec.memory_levels {
        if !(level.read_bw.is_finite() && level.read_bw > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "{}: level {} has no read bandwidth",
                spec.name, level.label
            )));
        }
        read_times.push(LevelTime {
            label: level.label.clone(),
            seconds: bytes / level.read_bw,
        });
    }
    let compute_time = 2.0 * macs as f64 / compute_peak(spec, precision)?;

    let mut estimate = BoundEstimate {
        macs,
        bytes,
        compute_time,
        read_times,
        limiting_label: String::new(),
        limiting_time: f64::NEG_INFINITY,
    };
    let (label, time) = estimate
        .bounds()
        .fold((COMPUTE_LABEL, f64::NEG_INFINITY), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        });
    estimate.limiting_label = label.to_string();
    estimate.limiting_time = time;
    Ok(estimate)
}
