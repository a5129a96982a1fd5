//! Reference machines and result sets from published Raspberry Pi measurements.
//!
//! These are regression inputs for the analysis pipeline, not something a
//! desk machine can reproduce.

use chrono::{TimeZone, Utc};

use crate::error::Result;
use crate::harness::{Measurement, ResultSet, SCHEMA_VERSION};
use crate::model::{Encoding, GemmShape, MachineSpec, MemoryLevel, Precision, GIB, MIB};
use crate::workloads::{Shape, WorkloadItem};

const KIB: u64 = 1 << 10;
const MIB_U: u64 = 1 << 20;

/// GEMM sizes of the tuned measurements.
pub const GEMM_SIZES: [usize; 5] = [32, 128, 256, 512, 1024];

/// Tuned GEMM float32 performance on the Cortex-A53, GFLOP/s.
pub const A53_TUNED_GFLOPS: [f64; 5] = [4.43, 6.58, 6.93, 5.06, 5.01];
/// Tuned GEMM float32 performance on the Cortex-A72, GFLOP/s.
pub const A72_TUNED_GFLOPS: [f64; 5] = [9.20, 16.72, 17.24, 17.99, 15.75];

/// Illustrative bit-serial GEMM rates at N=1024 (unipolar, equal widths),
/// GOP/s. Chosen in the range the published plots show, not read off them.
pub const BITSERIAL_GOPS: [(u8, f64); 4] = [(1, 14.0), (2, 8.0), (4, 3.5), (8, 1.0)];

/// Kernel id stamped on fixture rows.
pub const FIXTURE_KERNEL: &str = "tvm_tuned";

fn levels(
    l1: u64,
    l2: u64,
    ram: u64,
    bw: [(f64, f64); 3],
) -> Vec<MemoryLevel> {
    let caps = [("L1", l1, 4 * KIB), ("L2", l2, 256 * KIB), ("RAM", ram, 16 * MIB_U)];
    caps.iter()
        .zip(bw)
        .map(|(&(label, cap, block), (r, w))| {
            MemoryLevel::new(label, cap, block).with_bandwidth(r * MIB, w * MIB)
        })
        .collect()
}

/// Raspberry Pi 3B: 4x Cortex-A53 at 1.2 GHz, 128-bit NEON.
pub fn a53_spec() -> MachineSpec {
    MachineSpec {
        name: "cortex-a53".into(),
        frequency: 1.2e9,
        cores: 4,
        flops_per_instr: 2,
        instr_per_cycle: 1,
        simd_width_bits: 128,
        memory_levels: levels(
            16 * KIB,
            512 * KIB,
            GIB as u64,
            [(14363.0, 23703.0), (7039.0, 3467.0), (2040.0, 1600.0)],
        ),
        measured_peak: Some(38.18e9),
        warnings: Vec::new(),
    }
}

/// Raspberry Pi 4B: 4x Cortex-A72 at 1.5 GHz, 128-bit NEON.
pub fn a72_spec() -> MachineSpec {
    MachineSpec {
        name: "cortex-a72".into(),
        frequency: 1.5e9,
        cores: 4,
        flops_per_instr: 2,
        instr_per_cycle: 1,
        simd_width_bits: 128,
        memory_levels: levels(
            32 * KIB,
            1024 * KIB,
            8 * GIB as u64,
            [(45733.0, 30423.0), (12934.0, 7407.0), (3661.0, 2984.0)],
        ),
        measured_peak: Some(47.93e9),
        warnings: Vec::new(),
    }
}

fn gemm_row(n: usize, precision: Precision, ops_per_s: f64) -> Result<Measurement> {
    let item = WorkloadItem {
        label: format!("N{n}"),
        shape: Shape::Gemm(GemmShape::new(n)?),
    };
    let t = 2.0 * (n as f64).powi(3) / ops_per_s;
    Measurement::from_samples(&item, precision, FIXTURE_KERNEL, vec![t; 3], Vec::new())
}

fn result_set(machine: MachineSpec, gflops: &[f64; 5]) -> Result<ResultSet> {
    let mut rows = Vec::new();
    for (&n, &g) in GEMM_SIZES.iter().zip(gflops) {
        rows.push(gemm_row(n, Precision::F32, g * 1e9)?);
    }
    for (bits, gops) in BITSERIAL_GOPS {
        let p = Precision::bitserial(bits, bits, Encoding::Unipolar)?;
        rows.push(gemm_row(1024, p, gops * 1e9)?);
    }
    Ok(ResultSet {
        schema_version: SCHEMA_VERSION.to_string(),
        machine,
        measurements: rows,
        skipped: Vec::new(),
        // Fixed so emitted fixtures are byte-stable.
        created_at: Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

pub fn a53_results() -> ResultSet {
    result_set(a53_spec(), &A53_TUNED_GFLOPS).expect("fixture rows are valid")
}

pub fn a72_results() -> ResultSet {
    result_set(a72_spec(), &A72_TUNED_GFLOPS).expect("fixture rows are valid")
}

/// Fixture machine by name: `a53` or `a72`.
pub fn by_name(name: &str) -> Option<(MachineSpec, ResultSet)> {
    match name {
        "a53" => Some((a53_spec(), a53_results())),
        "a72" => Some((a72_spec(), a72_results())),
        _ => None,
    }
}
