//! Machine-limit microbenchmarks: register-resident MAC throughput and
//! block-size bandwidth probes, timed through an injectable clock.

use std::fmt;
use std::hint::black_box;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::harness::median;
use crate::model::{peak_performance, MachineSpec, MemoryLevel};

/// Monotonic time source.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

/// Wall clock backed by [`Instant`].
#[derive(Debug)]
pub struct MonotonicClock {
    origin: Instant,
}

impl Default for MonotonicClock {
    fn default() -> Self {
        MonotonicClock {
            origin: Instant::now(),
        }
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Deterministic clock that advances by `step` on every read.
#[derive(Debug)]
pub struct StepClock {
    step: Duration,
    ticks: AtomicU64,
}

impl StepClock {
    pub fn new(step: Duration) -> Self {
        StepClock {
            step,
            ticks: AtomicU64::new(0),
        }
    }
}

impl Clock for StepClock {
    fn now(&self) -> Duration {
        let t = self.ticks.fetch_add(1, Ordering::SeqCst);
        self.step * t as u32
    }
}

#[derive(Clone)]
pub struct BenchConfig {
    pub workers: usize,
    pub repetitions: usize,
    /// Bytes each worker moves per repetition of a bandwidth probe.
    pub per_pass_bytes: u64,
    /// MACs per repetition of the peak benchmark, summed over workers.
    pub macs_total: u64,
    pub clock: Arc<dyn Clock>,
}

impl fmt::Debug for BenchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BenchConfig")
            .field("workers", &self.workers)
            .field("repetitions", &self.repetitions)
            .field("per_pass_bytes", &self.per_pass_bytes)
            .field("macs_total", &self.macs_total)
            .finish_non_exhaustive()
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            workers: default_workers(),
            repetitions: 5,
            per_pass_bytes: 1 << 30,
            macs_total: 20_000_000_000,
            clock: Arc::new(MonotonicClock::default()),
        }
    }
}

impl BenchConfig {
    fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        if self.repetitions < 3 {
            return Err(Error::invalid(format!(
                "need at least 3 repetitions, got {}",
                self.repetitions
            )));
        }
        Ok(())
    }
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Run `work(worker_index)` on `workers` threads for `reps` repetitions,
/// timing each repetition between a start and an end barrier. Exactly two
/// clock reads happen per repetition.
fn timed_reps<R, F>(cfg: &BenchConfig, work: F) -> (Vec<f64>, Vec<R>)
where
    R: Send,
    F: Fn(usize, usize) -> R + Sync,
{
    let barrier = Barrier::new(cfg.workers + 1);
    let mut times = Vec::with_capacity(cfg.repetitions);
    let results = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.workers)
            .map(|w| {
                let (barrier, work) = (&barrier, &work);
                s.spawn(move || {
                    let mut last = None;
                    for rep in 0..cfg.repetitions {
                        barrier.wait();
                        last = Some(work(w, rep));
                        barrier.wait();
                    }
                    last.expect("at least one repetition")
                })
            })
            .collect();
        for _ in 0..cfg.repetitions {
            barrier.wait();
            let start = cfg.clock.now();
            barrier.wait();
            times.push((cfg.clock.now() - start).as_secs_f64());
        }
        handles
            .into_iter()
            .map(|h| h.join().expect("benchmark worker panicked"))
            .collect()
    });
    (times, results)
}

/// MACs issued per iteration of every MAC loop variant.
pub const MACS_PER_ITER: u64 = 80;

#[derive(Clone, Debug, PartialEq)]
pub struct PeakResult {
    /// FLOP/s, median over repetitions.
    pub flops: f64,
    pub macs_executed: u64,
    /// Sum of all accumulators; finite and non-zero for a valid run.
    pub checksum: f64,
    pub samples: Vec<f64>,
}

/// Register-resident multiply-accumulate throughput.
///
/// Each worker runs `macs_total / workers` MACs (rounded up to whole loop
/// iterations) on independent vector accumulators with no memory traffic in
/// the loop body.
pub fn measure_peak_mac(cfg: &BenchConfig, element_bits: u32) -> Result<PeakResult> {
    cfg.validate()?;
    if cfg.macs_total == 0 {
        return Err(Error::invalid("macs_total must be positive"));
    }
    let per_worker = cfg.macs_total.div_ceil(cfg.workers as u64);
    let iters = per_worker.div_ceil(MACS_PER_ITER);
    let macs_executed = iters * MACS_PER_ITER * cfg.workers as u64;
    let run: fn(u64, f64) -> f64 = match element_bits {
        32 => mac_loop_f32,
        64 => mac_loop_generic::<f64>,
        other => {
            return Err(Error::invalid(format!(
                "peak MAC benchmark supports 32- or 64-bit elements, got {other}"
            )))
        }
    };
    let (samples, sums) = timed_reps(cfg, |w, rep| run(iters, 1.0 + (w + rep) as f64 * 1e-3));
    let checksum: f64 = sums.iter().sum();
    if !checksum.is_finite() || checksum == 0.0 {
        return Err(Error::BenchmarkInvalid(format!(
            "MAC loop checksum is {checksum}"
        )));
    }
    let elapsed = median(&samples);
    if !(elapsed > 0.0) {
        return Err(Error::BenchmarkInvalid("zero elapsed time".into()));
    }
    Ok(PeakResult {
        flops: 2.0 * macs_executed as f64 / elapsed,
        macs_executed,
        checksum,
        samples,
    })
}

// acc <- acc * MUL + ADD converges to ADD / (1 - MUL) and stays finite.
const MUL: f64 = 0.999_999;
const ADD: f64 = 1e-6;

fn mac_loop_f32(iters: u64, seed: f64) -> f64 {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx") && is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were just detected.
            return unsafe { x86::mac_loop_fma(iters, seed as f32) } as f64;
        }
    }
    #[cfg(target_arch = "aarch64")]
    {
        // SAFETY: NEON is mandatory on aarch64.
        return unsafe { arm::mac_loop_neon(iters, seed as f32) } as f64;
    }
    #[allow(unreachable_code)]
    mac_loop_generic::<f32>(iters, seed)
}

trait Lane: Copy + std::ops::Mul<Output = Self> + std::ops::Add<Output = Self> + Default {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Lane for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Lane for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

fn mac_loop_generic<T: Lane>(iters: u64, seed: f64) -> f64 {
    const LANES: usize = 8;
    const ACCS: usize = (MACS_PER_ITER as usize) / LANES;
    let mul = T::from_f64(black_box(MUL));
    let add = T::from_f64(black_box(ADD));
    let mut acc = [[T::default(); LANES]; ACCS];
    for (i, row) in acc.iter_mut().enumerate() {
        for (l, v) in row.iter_mut().enumerate() {
            *v = T::from_f64(black_box(seed) + (i * LANES + l) as f64 * 1e-3);
        }
    }
    for _ in 0..iters {
        for row in acc.iter_mut() {
            for v in row.iter_mut() {
                *v = *v * mul + add;
            }
        }
    }
    acc.iter().flatten().map(|v| v.to_f64()).sum()
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::{ADD, MUL};
    use std::arch::x86_64::*;

    /// 10 chains of 8-lane FMAs = 80 MACs per iteration.
    #[target_feature(enable = "avx,fma")]
    pub(super) unsafe fn mac_loop_fma(iters: u64, seed: f32) -> f32 {
        let mul = _mm256_set1_ps(std::hint::black_box(MUL as f32));
        let add = _mm256_set1_ps(std::hint::black_box(ADD as f32));
        let mut a: [__m256; 10] = [_mm256_setzero_ps(); 10];
        for (i, v) in a.iter_mut().enumerate() {
            *v = _mm256_set1_ps(seed + i as f32 * 1e-3);
        }
        let [mut a0, mut a1, mut a2, mut a3, mut a4, mut a5, mut a6, mut a7, mut a8, mut a9] = a;
        for _ in 0..iters {
            a0 = _mm256_fmadd_ps(a0, mul, add);
            a1 = _mm256_fmadd_ps(a1, mul, add);
            a2 = _mm256_fmadd_ps(a2, mul, add);
            a3 = _mm256_fmadd_ps(a3, mul, add);
            a4 = _mm256_fmadd_ps(a4, mul, add);
            a5 = _mm256_fmadd_ps(a5, mul, add);
            a6 = _mm256_fmadd_ps(a6, mul, add);
            a7 = _mm256_fmadd_ps(a7, mul, add);
            a8 = _mm256_fmadd_ps(a8, mul, add);
            a9 = _mm256_fmadd_ps(a9, mul, add);
        }
        a = [a0, a1, a2, a3, a4, a5, a6, a7, a8, a9];
        let mut out = [0f32; 8];
        let mut sum = 0f32;
        for v in a {
            _mm256_storeu_ps(out.as_mut_ptr(), v);
            sum += out.iter().sum::<f32>();
        }
        sum
    }
}

#[cfg(target_arch = "aarch64")]
mod arm {
    use super::{ADD, MUL};
    use std::arch::aarch64::*;

    /// 20 chains of 4-lane FMAs = 80 MACs per iteration.
    #[target_feature(enable = "neon")]
    pub(super) unsafe fn mac_loop_neon(iters: u64, seed: f32) -> f32 {
        let mul = vdupq_n_f32(std::hint::black_box(MUL as f32));
        let add = vdupq_n_f32(std::hint::black_box(ADD as f32));
        let mut a = [vdupq_n_f32(0.0); 20];
        for (i, v) in a.iter_mut().enumerate() {
            *v = vdupq_n_f32(seed + i as f32 * 1e-3);
        }
        for _ in 0..iters {
            for v in a.iter_mut() {
                *v = vfmaq_f32(add, *v, mul);
            }
        }
        a.iter().map(|&v| vaddvq_f32(v)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessMode {
    Read,
    Write,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandwidthResult {
    /// Bytes/s, median over repetitions.
    pub bandwidth: f64,
    pub checksum: u64,
    pub samples: Vec<f64>,
}

/// Stream over a private `block`-byte buffer per worker until
/// `per_pass_bytes` have been moved, once per repetition.
pub fn measure_bandwidth(cfg: &BenchConfig, block: u64, mode: AccessMode) -> Result<BandwidthResult> {
    cfg.validate()?;
    if block < 64 {
        return Err(Error::invalid(format!("block must be at least 64 B, got {block}")));
    }
    if cfg.per_pass_bytes == 0 {
        return Err(Error::invalid("pass size must be positive"));
    }
    if cfg.per_pass_bytes < 16 * block {
        return Err(Error::invalid(format!(
            "pass of {} B is smaller than 16 blocks of {block} B",
            cfg.per_pass_bytes
        )));
    }
    let words = (block / 8) as usize;
    let sweeps = cfg.per_pass_bytes / block;
    let bytes_per_rep = sweeps * block * cfg.workers as u64;

    let buffers: Vec<std::sync::Mutex<Vec<u64>>> = (0..cfg.workers)
        .map(|w| std::sync::Mutex::new((0..words as u64).map(|i| i ^ (w as u64) << 32).collect()))
        .collect();
    let (samples, sums) = timed_reps(cfg, |w, rep| {
        let mut buf = buffers[w].lock().expect("private buffer");
        match mode {
            AccessMode::Read => {
                let mut sum = 0u64;
                for _ in 0..sweeps {
                    sum = sum.wrapping_add(read_sweep(black_box(&buf[..])));
                }
                sum
            }
            AccessMode::Write => {
                for s in 0..sweeps {
                    buf.fill(black_box(s ^ rep as u64));
                    black_box(&mut buf[..]);
                }
                buf[words - 1]
            }
        }
    });
    let checksum = sums.iter().fold(0u64, |a, &b| a.wrapping_add(b));
    let rates: Vec<f64> = samples
        .iter()
        .map(|&t| if t > 0.0 { bytes_per_rep as f64 / t } else { f64::INFINITY })
        .collect();
    let bandwidth = median(&rates);
    if !bandwidth.is_finite() {
        return Err(Error::BenchmarkInvalid("zero elapsed time".into()));
    }
    Ok(BandwidthResult {
        bandwidth,
        checksum,
        samples,
    })
}

#[inline]
fn read_sweep(buf: &[u64]) -> u64 {
    let mut acc = [0u64; 8];
    let mut chunks = buf.chunks_exact(8);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = a.wrapping_add(v);
        }
    }
    let tail: u64 = chunks.remainder().iter().fold(0, |a, &v| a.wrapping_add(v));
    acc.iter().fold(tail, |a, &v| a.wrapping_add(v))
}

/// Fill in measured bandwidths and peak for the levels declared in `template`.
///
/// Declared frequency, core count and SIMD parameters are kept as given. The
/// per-level pass size is raised to 16 blocks when `cfg.per_pass_bytes` is
/// smaller.
pub fn probe_machine(cfg: &BenchConfig, template: &MachineSpec) -> Result<MachineSpec> {
    template.validate()?;
    let mut spec = template.clone();
    spec.warnings.clear();
    for level in spec.memory_levels.iter_mut() {
        let mut level_cfg = cfg.clone();
        level_cfg.per_pass_bytes = cfg.per_pass_bytes.max(16 * level.probe_block);
        level.read_bw = measure_bandwidth(&level_cfg, level.probe_block, AccessMode::Read)?.bandwidth;
        level.write_bw = measure_bandwidth(&level_cfg, level.probe_block, AccessMode::Write)?.bandwidth;
    }
    let peak = measure_peak_mac(cfg, 32)?;
    spec.measured_peak = Some(peak.flops);
    let theoretical = peak_performance(&spec, 32)?;
    if peak.flops > theoretical {
        spec.warnings.push(format!(
            "measured peak {:.2} GFLOP/s exceeds theoretical {:.2} GFLOP/s (check declared frequency/SIMD width)",
            peak.flops / 1e9,
            theoretical / 1e9
        ));
    }
    if !spec.read_bandwidth_monotone() {
        spec.warnings
            .push("read bandwidth does not decrease from faster to slower levels".into());
    }
    Ok(spec)
}

/// Levels probed by default: 4 KB, 256 KB and 16 MB blocks.
pub const DEFAULT_BLOCKS: [(&str, u64); 3] = [("L1", 4 << 10), ("L2", 256 << 10), ("RAM", 16 << 20)];

/// Best-effort description of the running machine with unmeasured levels.
pub fn host_template() -> MachineSpec {
    let sys_cache = |index: u32| -> Option<u64> {
        let raw = std::fs::read_to_string(format!(
            "/sys/devices/system/cpu/cpu0/cache/index{index}/size"
        ))
        .ok()?;
        let raw = raw.trim();
        let (num, mult) = match raw.strip_suffix('K') {
            Some(n) => (n, 1 << 10),
            None => match raw.strip_suffix('M') {
                Some(n) => (n, 1 << 20),
                None => (raw, 1),
            },
        };
        num.parse::<u64>().ok().map(|v| v * mult)
    };
    let ram = std::fs::read_to_string("/proc/meminfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("MemTotal:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|v| v.parse::<u64>().ok())
        })
        .map(|kib| kib << 10);
    let frequency = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("cpu MHz"))
                .and_then(|l| l.split(':').nth(1))
                .and_then(|v| v.trim().parse::<f64>().ok())
        })
        .map(|mhz| mhz * 1e6)
        .unwrap_or(1e9);
    // index0 is usually L1d, index2 the unified L2.
    let capacities = [sys_cache(0), sys_cache(2), ram];
    let fallback = [32u64 << 10, 1 << 20, 1 << 30];
    let memory_levels = DEFAULT_BLOCKS
        .iter()
        .zip(capacities.iter().zip(fallback))
        .map(|(&(label, block), (&cap, fb))| {
            MemoryLevel::new(label, cap.unwrap_or(fb).max(block), block)
        })
        .collect();
    MachineSpec {
        name: "host".into(),
        frequency,
        cores: default_workers() as u32,
        flops_per_instr: 2,
        instr_per_cycle: 1,
        simd_width_bits: detect_simd_bits(),
        memory_levels,
        measured_peak: None,
        warnings: vec![],
    }
}

fn detect_simd_bits() -> u32 {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            return 512;
        }
        if is_x86_feature_detected!("avx") {
            return 256;
        }
    }
    128
}
