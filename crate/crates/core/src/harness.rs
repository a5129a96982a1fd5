//! Operator timing over workload suites and JSON persistence of machine specs
//! and result sets.

use std::fmt;
use std::fs;
use std::hint::black_box;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitserial::{
    bitpack, conv2d_bitserial_packed, gemm_bitserial, pack_conv_activations, pack_conv_weights,
};
use crate::error::{Error, Result};
use crate::kernels::{
    conv2d_f32, conv2d_f32_im2col, conv2d_i8, gemm_f32_naive, gemm_f32_opt, gemm_i8,
    quantize_signed, Layout, Tensor, TileParams,
};
use crate::microbench::{Clock, MonotonicClock};
use crate::model::{ConvShape, MachineSpec, OutputConvention, Precision};
use crate::workloads::{Shape, WorkloadItem, WorkloadSuite};

/// Version written into every JSON document. Readers accept any minor version
/// of the same major.
pub const SCHEMA_VERSION: &str = "1.0";

pub fn median(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub reps: usize,
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
    /// Sample standard deviation; 0 for a single rep.
    pub stddev: f64,
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("no timing samples"));
        }
        if samples.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::invalid("timing samples must be finite and non-negative"));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let stddev = if samples.len() > 1 {
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(TimingStats {
            reps: samples.len(),
            min: samples.iter().copied().fold(f64::INFINITY, f64::min),
            median: median(samples),
            mean,
            max: samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            stddev,
        })
    }
}

/// One timed operator run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub workload_label: String,
    pub shape: Shape,
    pub precision: Precision,
    pub kernel_id: String,
    pub stats: TimingStats,
    /// Raw per-rep kernel times in seconds.
    pub samples: Vec<f64>,
    /// MACs actually executed (standard output-size convention).
    pub macs_standard: u64,
    /// Median activation packing time; 0 unless bit-serial.
    pub packing_time: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub packing_samples: Vec<f64>,
    /// `2 * macs_standard / stats.median`, FLOP/s.
    pub derived_performance: f64,
}

impl Measurement {
    /// Build from raw samples, deriving statistics and performance.
    pub fn from_samples(
        item: &WorkloadItem,
        precision: Precision,
        kernel_id: impl Into<String>,
        samples: Vec<f64>,
        packing_samples: Vec<f64>,
    ) -> Result<Self> {
        let stats = TimingStats::from_samples(&samples)?;
        let macs_standard = item.shape.macs(OutputConvention::Standard)?;
        let packing_time = if packing_samples.is_empty() {
            0.0
        } else {
            median(&packing_samples)
        };
        let derived_performance = if stats.median > 0.0 {
            2.0 * macs_standard as f64 / stats.median
        } else {
            f64::INFINITY
        };
        Ok(Measurement {
            workload_label: item.label.clone(),
            shape: item.shape,
            precision,
            kernel_id: kernel_id.into(),
            stats,
            samples,
            macs_standard,
            packing_time,
            packing_samples,
            derived_performance,
        })
    }

    pub fn macs_paper(&self) -> Result<u64> {
        self.shape.macs(OutputConvention::Paper)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub workload_label: String,
    pub precision: Precision,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub schema_version: String,
    pub machine: MachineSpec,
    pub measurements: Vec<Measurement>,
    #[serde(default)]
    pub skipped: Vec<Skipped>,
    pub created_at: DateTime<Utc>,
    pub tool_version: String,
}

impl ResultSet {
    pub fn new(machine: MachineSpec, measurements: Vec<Measurement>) -> Self {
        ResultSet {
            schema_version: SCHEMA_VERSION.to_string(),
            machine,
            measurements,
            skipped: Vec::new(),
            created_at: Utc::now(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Labels of measurements that are not part of `suite`.
    pub fn unresolved_labels(&self, suite: &WorkloadSuite) -> Vec<&str> {
        self.measurements
            .iter()
            .filter(|m| suite.get(&m.workload_label).is_none())
            .map(|m| m.workload_label.as_str())
            .collect()
    }
}

/// Executable operator implementations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelId {
    GemmF32Naive,
    GemmF32Opt,
    GemmI8,
    GemmBitserial,
    Conv2dF32Direct,
    Conv2dF32Im2col,
    Conv2dI8,
    Conv2dBitserial,
}

impl KernelId {
    pub const ALL: [KernelId; 8] = [
        KernelId::GemmF32Naive,
        KernelId::GemmF32Opt,
        KernelId::GemmI8,
        KernelId::GemmBitserial,
        KernelId::Conv2dF32Direct,
        KernelId::Conv2dF32Im2col,
        KernelId::Conv2dI8,
        KernelId::Conv2dBitserial,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KernelId::GemmF32Naive => "gemm_f32_naive",
            KernelId::GemmF32Opt => "gemm_f32_opt",
            KernelId::GemmI8 => "gemm_i8",
            KernelId::GemmBitserial => "gemm_bitserial",
            KernelId::Conv2dF32Direct => "conv2d_f32_direct",
            KernelId::Conv2dF32Im2col => "conv2d_f32_im2col",
            KernelId::Conv2dI8 => "conv2d_i8",
            KernelId::Conv2dBitserial => "conv2d_bitserial",
        }
    }

    /// Kernel used for a workload kind and precision when none is requested.
    pub fn default_for(shape: &Shape, precision: &Precision) -> KernelId {
        match (shape, precision) {
            (Shape::Gemm(_), Precision::F32) => KernelId::GemmF32Opt,
            (Shape::Gemm(_), Precision::I8) => KernelId::GemmI8,
            (Shape::Gemm(_), Precision::BitSerial { .. }) => KernelId::GemmBitserial,
            (Shape::Conv(_), Precision::F32) => KernelId::Conv2dF32Im2col,
            (Shape::Conv(_), Precision::I8) => KernelId::Conv2dI8,
            (Shape::Conv(_), Precision::BitSerial { .. }) => KernelId::Conv2dBitserial,
        }
    }

    fn supports(self, shape: &Shape, precision: &Precision) -> bool {
        use KernelId::*;
        matches!(
            (self, shape, precision),
            (GemmF32Naive | GemmF32Opt, Shape::Gemm(_), Precision::F32)
                | (GemmI8, Shape::Gemm(_), Precision::I8)
                | (GemmBitserial, Shape::Gemm(_), Precision::BitSerial { .. })
                | (Conv2dF32Direct | Conv2dF32Im2col, Shape::Conv(_), Precision::F32)
                | (Conv2dI8, Shape::Conv(_), Precision::I8)
                | (Conv2dBitserial, Shape::Conv(_), Precision::BitSerial { .. })
        )
    }
}

impl fmt::Display for KernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelId::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown kernel `{s}`")))
    }
}

#[derive(Clone)]
pub struct TimingConfig {
    pub warmup: usize,
    pub reps: usize,
    pub workers: usize,
    /// Keep adding reps until this many seconds have been timed.
    pub min_total_time: f64,
    pub max_reps: usize,
    pub tile: TileParams,
    pub clock: Arc<dyn Clock>,
}

impl fmt::Debug for TimingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TimingConfig")
            .field("warmup", &self.warmup)
            .field("reps", &self.reps)
            .field("workers", &self.workers)
            .field("min_total_time", &self.min_total_time)
            .field("max_reps", &self.max_reps)
            .field("tile", &self.tile)
            .finish_non_exhaustive()
    }
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            warmup: 2,
            reps: 10,
            workers: crate::microbench::default_workers(),
            min_total_time: 0.2,
            max_reps: 10_000,
            tile: TileParams::default(),
            clock: Arc::new(MonotonicClock::default()),
        }
    }
}

impl TimingConfig {
    fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(Error::invalid(format!("need at least 3 reps, got {}", self.reps)));
        }
        if self.warmup < 1 {
            return Err(Error::invalid("need at least 1 warmup run"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        Ok(())
    }
}

/// FNV-1a, so input seeds are stable across builds and platforms.
fn input_seed(label: &str, precision: &Precision) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes().chain(*b"|").chain(precision.to_string().bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn random_f32(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

fn random_codes(rng: &mut ChaCha8Rng, len: usize, bits: u8) -> Vec<u8> {
    (0..len).map(|_| rng.gen_range(0..(1u16 << bits)) as u8).collect()
}

fn random_i8(rng: &mut ChaCha8Rng, dims: Vec<usize>, layout: Layout) -> Result<Tensor<i8>> {
    let len = dims.iter().product();
    let x = Tensor::new(dims, layout, random_f32(rng, len))?;
    Ok(quantize_signed(&x, 8)?.0)
}

fn conv_tensors<T>(
    s: &ConvShape,
    mut gen: impl FnMut(usize) -> Vec<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let x_dims = vec![s.b, s.c_in, s.h_in, s.w_in];
    let w_dims = vec![s.c_out, s.c_in, s.k_h, s.k_w];
    let x = gen(x_dims.iter().product());
    let w = gen(w_dims.iter().product());
    Ok((
        Tensor::new(x_dims, Layout::Nchw, x)?,
        Tensor::new(w_dims, Layout::Oihw, w)?,
    ))
}

/// A prepared operator: one call runs the timed section(s) and returns
/// `(packing_seconds, kernel_seconds)`.
type Runner<'a> = Box<dyn FnMut() -> Result<(f64, f64)> + 'a>;

fn elapsed(clock: &dyn Clock, start: Duration) -> f64 {
    (clock.now() - start).as_secs_f64()
}

fn prepare<'a>(
    kernel: KernelId,
    item: &WorkloadItem,
    precision: Precision,
    cfg: &'a TimingConfig,
) -> Result<Runner<'a>> {
    if !kernel.supports(&item.shape, &precision) {
        return Err(Error::Unsupported(format!(
            "kernel {kernel} cannot run {} workload `{}` at {precision}",
            item.shape.kind(),
            item.label
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(input_seed(&item.label, &precision));
    let clock = cfg.clock.as_ref();
    let workers = cfg.workers;

    // Times one kernel call with no packing phase.
    macro_rules! plain {
        ($body:expr) => {
            Box::new(move || {
                let start = clock.now();
                black_box($body?);
                Ok((0.0, elapsed(clock, start)))
            })
        };
    }

    let runner: Runner<'a> = match (item.shape, precision) {
        (Shape::Gemm(g), Precision::F32) => {
            let n = g.n;
            let a = Tensor::matrix(n, n, random_f32(&mut rng, n * n))?;
            let b = Tensor::matrix(n, n, random_f32(&mut rng, n * n))?;
            let tile = cfg.tile;
            if kernel == KernelId::GemmF32Naive {
                plain!(gemm_f32_naive(&a, &b))
            } else {
                plain!(gemm_f32_opt(&a, &b, workers, tile))
            }
        }
        (Shape::Gemm(g), Precision::I8) => {
            let n = g.n;
            let a = random_i8(&mut rng, vec![n, n], Layout::RowMajor2d)?;
            let b = random_i8(&mut rng, vec![n, n], Layout::RowMajor2d)?;
            plain!(gemm_i8(&a, &b, workers))
        }
        (
            Shape::Gemm(g),
            Precision::BitSerial {
                activation_bits,
                weight_bits,
                encoding,
            },
        ) => {
            let n = g.n;
            let a = Tensor::matrix(n, n, random_codes(&mut rng, n * n, activation_bits))?;
            // Weight rows are the columns of B, packed once up front.
            let w = Tensor::matrix(n, n, random_codes(&mut rng, n * n, weight_bits))?;
            let w_packed = bitpack(&w, weight_bits, encoding)?;
            check_bitserial_range(n, activation_bits, weight_bits)?;
            Box::new(move || {
                let start = clock.now();
                let a_packed = bitpack(&a, activation_bits, encoding)?;
                let packing = elapsed(clock, start);
                let start = clock.now();
                black_box(gemm_bitserial(&a_packed, &w_packed, workers)?);
                Ok((packing, elapsed(clock, start)))
            })
        }
        (Shape::Conv(s), Precision::F32) => {
            let (x, w) = conv_tensors(&s, |len| random_f32(&mut rng, len))?;
            let tile = cfg.tile;
            if kernel == KernelId::Conv2dF32Direct {
                plain!(conv2d_f32(&x, &w, &s, workers))
            } else {
                plain!(conv2d_f32_im2col(&x, &w, &s, workers, tile))
            }
        }
        (Shape::Conv(s), Precision::I8) => {
            let x = random_i8(&mut rng, vec![s.b, s.c_in, s.h_in, s.w_in], Layout::Nchw)?;
            let w = random_i8(&mut rng, vec![s.c_out, s.c_in, s.k_h, s.k_w], Layout::Oihw)?;
            plain!(conv2d_i8(&x, &w, &s, workers))
        }
        (
            Shape::Conv(s),
            Precision::BitSerial {
                activation_bits,
                weight_bits,
                encoding,
            },
        ) => {
            let x_dims = vec![s.b, s.c_in, s.h_in, s.w_in];
            let x_len = x_dims.iter().product();
            let x = Tensor::new(x_dims, Layout::Nchw, random_codes(&mut rng, x_len, activation_bits))?;
            let w_dims = vec![s.c_out, s.c_in, s.k_h, s.k_w];
            let w_len = w_dims.iter().product();
            let w = Tensor::new(w_dims, Layout::Oihw, random_codes(&mut rng, w_len, weight_bits))?;
            let w_packed = pack_conv_weights(&w, &s, weight_bits, encoding)?;
            check_bitserial_range(s.reduction_len(), activation_bits, weight_bits)?;
            Box::new(move || {
                let start = clock.now();
                let a_packed = pack_conv_activations(&x, &s, activation_bits, encoding)?;
                let packing = elapsed(clock, start);
                let start = clock.now();
                black_box(conv2d_bitserial_packed(&a_packed, &w_packed, &s, workers)?);
                Ok((packing, elapsed(clock, start)))
            })
        }
    };
    Ok(runner)
}

fn check_bitserial_range(reduction: usize, a_bits: u8, w_bits: u8) -> Result<()> {
    let max = ((1u64 << a_bits) - 1) * ((1u64 << w_bits) - 1) * reduction as u64;
    if max > i32::MAX as u64 {
        return Err(Error::Unsupported(format!(
            "reduction of {reduction} at {a_bits}x{w_bits} bits may overflow int32"
        )));
    }
    Ok(())
}

/// Time `kernel` on `item`: warmup runs unrecorded, then at least `reps` timed
/// runs, extended until `min_total_time` seconds have been timed. Inputs are
/// generated once from a seed derived from the label and precision and are
/// never mutated, so every rep sees identical data.
pub fn time_kernel(
    kernel: KernelId,
    item: &WorkloadItem,
    precision: Precision,
    cfg: &TimingConfig,
) -> Result<Measurement> {
    cfg.validate()?;
    item.shape.macs(OutputConvention::Standard)?;
    let mut run = prepare(kernel, item, precision, cfg)?;
    for _ in 0..cfg.warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(cfg.reps);
    let mut packing = Vec::new();
    let mut total = 0.0;
    while samples.len() < cfg.reps || (total < cfg.min_total_time && samples.len() < cfg.max_reps) {
        let (pack, t) = run()?;
        total += pack + t;
        samples.push(t);
        if precision.is_bitserial() {
            packing.push(pack);
        }
    }
    Measurement::from_samples(item, precision, kernel.as_str(), samples, packing)
}

/// Time every workload at every precision with its default kernel. Combinations
/// that cannot run are recorded in `skipped`.
pub fn run_suite(
    suite: &WorkloadSuite,
    precisions: &[Precision],
    cfg: &TimingConfig,
    machine: MachineSpec,
) -> Result<ResultSet> {
    if precisions.is_empty() {
        return Err(Error::invalid("no precisions requested"));
    }
    let mut set = ResultSet::new(machine, Vec::new());
    for item in suite.items() {
        for &precision in precisions {
            let kernel = KernelId::default_for(&item.shape, &precision);
            match time_kernel(kernel, item, precision, cfg) {
                Ok(m) => set.measurements.push(m),
                Err(e) => set.skipped.push(Skipped {
                    workload_label: item.label.clone(),
                    precision,
                    reason: e.to_string(),
                }),
            }
        }
    }
    Ok(set)
}

#[derive(Serialize, Deserialize)]
struct SpecDocument {
    schema_version: String,
    machine: MachineSpec,
}

fn check_version(doc: &serde_json::Value) -> Result<()> {
    let found = doc
        .get("schema_version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Schema("missing schema_version".into()))?;
    let major = |v: &str| v.split('.').next().unwrap_or("").to_string();
    if major(found) != major(SCHEMA_VERSION) {
        return Err(Error::SchemaVersion {
            found: found.to_string(),
            expected: SCHEMA_VERSION.to_string(),
        });
    }
    Ok(())
}

fn parse_document<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Schema(format!("{what} is not valid JSON: {e}")))?;
    check_version(&value)?;
    serde_json::from_value(value).map_err(|e| Error::Schema(format!("{what}: {e}")))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("documents serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn spec_to_json(spec: &MachineSpec) -> String {
    let mut text = serde_json::to_string_pretty(&SpecDocument {
        schema_version: SCHEMA_VERSION.to_string(),
        machine: spec.clone(),
    })
    .expect("documents serialize");
    text.push('\n');
    text
}

pub fn spec_from_json(text: &str) -> Result<MachineSpec> {
    let doc: SpecDocument = parse_document(text, "machine spec")?;
    doc.machine.validate()?;
    Ok(doc.machine)
}

pub fn save_spec(spec: &MachineSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, spec_to_json(spec)).map_err(|e| Error::io(path, e))
}

pub fn load_spec(path: impl AsRef<Path>) -> Result<MachineSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    spec_from_json(&text)
}

pub fn results_from_json(text: &str) -> Result<ResultSet> {
    parse_document(text, "result set")
}

pub fn save_results(results: &ResultSet, path: impl AsRef<Path>) -> Result<()> {
    write_json(results, path.as_ref())
}

pub fn load_results(path: impl AsRef<Path>) -> Result<ResultSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    results_from_json(&text)
}
