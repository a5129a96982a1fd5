//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line regardless of output capture.

use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use cachebound::bitserial::{
    bitpack, conv2d_bitserial, conv2d_bitserial_packed, decode, gemm_bitserial, pack_conv_activations,
    pack_conv_weights, unpack, PackedTensor,
};
use cachebound::fixtures::{a53_results, a53_spec, a72_results, a72_spec};
use cachebound::kernels::{
    conv2d_f32, conv2d_f32_im2col, conv2d_i8, gemm_f32_naive, gemm_f32_opt, gemm_i8, im2col, Layout, Tensor,
    TileParams,
};
use cachebound::microbench::{
    self, measure_bandwidth, measure_peak_mac, AccessMode, BenchConfig, StepClock,
};
use cachebound::model::{
    bound_estimate, conv_macs, conv_output_dims, peak_performance, ConvShape, Encoding, MachineSpec, OutputConvention, Precision, GIB,
};
use cachebound::report::{classify, required_bandwidth_table, Band, RooflineTable, Verdict};
use cachebound::workloads::resnet18_suite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TABLE3: [(&str, u64); 10] = [
    ("C2", 124_010_496),
    ("C3", 62_005_248),
    ("C4", 6_422_528),
    ("C5", 132_710_400),
    ("C6", 66_355_200),
    ("C7", 6_422_528),
    ("C8", 150_994_944),
    ("C9", 75_497_472),
    ("C10", 6_422_528),
    ("C11", 191_102_976),
];

fn within(actual: f64, expected: f64, rel: f64) -> bool {
    ((actual - expected) / expected).abs() <= rel
}

fn table3_macs() {
    let start = Instant::now();
    let suite = resnet18_suite();
    assert_eq!(suite.len(), 10);
    for (label, macs) in TABLE3 {
        let item = suite.get(label).unwrap_or_else(|| panic!("{label} missing"));
        let cachebound::workloads::Shape::Conv(shape) = item.shape else {
            panic!("{label} is not a convolution");
        };
        assert_eq!(conv_macs(&shape, OutputConvention::Paper).unwrap(), macs, "{label}");
    }
    assert!(start.elapsed() < Duration::from_secs(1));
}

fn peak_formula() {
    let a53 = peak_performance(&a53_spec(), 32).unwrap();
    let a72 = peak_performance(&a72_spec(), 32).unwrap();
    assert!(within(a53, 38.4e9, 1e-9), "{a53}");
    assert!(within(a72, 48.0e9, 1e-9), "{a72}");
}

fn fixture_classification() {
    let start = Instant::now();
    for (results, spec) in [(a53_results(), a53_spec()), (a72_results(), a72_spec())] {
        let mut checked = 0;
        for m in results.measurements.iter().filter(|m| m.precision == Precision::F32) {
            let c = classify(m, &spec, Band::default()).unwrap();
            if m.macs_standard < 128 * 128 * 128 {
                continue;
            }
            assert_eq!(c.limiting_label, "L1", "{} {}", spec.name, m.workload_label);
            assert!((0.5..=2.0).contains(&c.ratio), "{} {} ratio {}", spec.name, m.workload_label, c.ratio);
            assert_eq!(c.verdict, Verdict::ConsistentWithBound);
            checked += 1;
        }
        assert_eq!(checked, 4);
    }
    let est = bound_estimate(1 << 30, &Precision::F32, &a53_spec()).unwrap();
    let l1 = est.read_time("L1").unwrap();
    assert!(within(l1, 0.2852, 0.005), "L1 bound {l1}");
    assert!(within(est.compute_time, 0.0559, 0.005), "compute bound {}", est.compute_time);
    assert!(start.elapsed() < Duration::from_secs(1));
}

fn bitserial_bandwidth_below_l1() {
    for (results, spec) in [(a53_results(), a53_spec()), (a72_results(), a72_spec())] {
        let rows = required_bandwidth_table(&results, &spec).unwrap();
        let bitserial: Vec<_> = rows.iter().filter(|r| r.precision.is_bitserial()).collect();
        assert!(!bitserial.is_empty());
        for r in bitserial {
            assert_eq!(r.below("L1"), Some(true), "{} {} {}", spec.name, r.workload_label, r.precision);
        }
    }
}

// ---- float64 and wide-integer oracles ----

fn gemm_oracle_f64(a: &[f32], b: &[f32], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut exact = vec![0f64; n * n];
    let mut scale = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let t = a[i * n + k] as f64 * b[k * n + j] as f64;
                exact[i * n + j] += t;
                scale[i * n + j] += t.abs();
            }
        }
    }
    (exact, scale)
}

/// Direct convolution; `f(x, w)` returns the product and padded taps are skipped.
fn conv_oracle<T: Copy>(s: &ConvShape, x: &[T], w: &[T], mut f: impl FnMut(T, T) -> (f64, f64)) -> (Vec<f64>, Vec<f64>) {
    let h_out = (s.h_in + 2 * s.pad - s.k_h) / s.stride + 1;
    let w_out = (s.w_in + 2 * s.pad - s.k_w) / s.stride + 1;
    let len = s.b * s.c_out * h_out * w_out;
    let (mut exact, mut scale) = (vec![0f64; len], vec![0f64; len]);
    for b in 0..s.b {
        for o in 0..s.c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let idx = ((b * s.c_out + o) * h_out + oy) * w_out + ox;
                    for c in 0..s.c_in {
                        for ky in 0..s.k_h {
                            for kx in 0..s.k_w {
                                let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                                let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h_in as isize || ix >= s.w_in as isize {
                                    continue;
                                }
                                let xv = x[((b * s.c_in + c) * s.h_in + iy as usize) * s.w_in + ix as usize];
                                let wv = w[((o * s.c_in + c) * s.k_h + ky) * s.k_w + kx];
                                let (t, m) = f(xv, wv);
                                exact[idx] += t;
                                scale[idx] += m;
                            }
                        }
                    }
                }
            }
        }
    }
    (exact, scale)
}

fn assert_close_f32(got: &[f32], exact: &[f64], scale: &[f64], what: &str) {
    assert_eq!(got.len(), exact.len(), "{what}: length");
    for (i, ((&g, &e), &s)) in got.iter().zip(exact).zip(scale).enumerate() {
        let tol = 1e-5 * s.max(f64::MIN_POSITIVE);
        assert!((g as f64 - e).abs() <= tol, "{what}[{i}]: {g} vs {e} (scale {s})");
    }
}

fn random_conv_shape(rng: &mut ChaCha8Rng, max_hw: usize) -> ConvShape {
    loop {
        let k = [1, 2, 3, 5][rng.gen_range(0..4)];
        let pad = rng.gen_range(0..=k / 2 + 1);
        let h = rng.gen_range(1..=max_hw);
        let w = rng.gen_range(1..=max_hw);
        let b = rng.gen_range(1..=2);
        let c_in = rng.gen_range(1..=6);
        let c_out = rng.gen_range(1..=6);
        let stride = rng.gen_range(1..=3);
        if let Ok(s) = ConvShape::new(b, c_in, c_out, h, w, k, k, stride, pad) {
            if conv_output_dims(&s, OutputConvention::Standard).is_ok() {
                return s;
            }
        }
    }
}

fn conv_tensors<T: Clone>(s: &ConvShape, x: Vec<T>, w: Vec<T>) -> (Tensor<T>, Tensor<T>) {
    (
        Tensor::new(vec![s.b, s.c_in, s.h_in, s.w_in], Layout::Nchw, x).unwrap(),
        Tensor::new(vec![s.c_out, s.c_in, s.k_h, s.k_w], Layout::Oihw, w).unwrap(),
    )
}

fn exact_i32(got: &[i32], exact: &[f64], what: &str) {
    assert_eq!(got.len(), exact.len(), "{what}: length");
    for (i, (&g, &e)) in got.iter().zip(exact).enumerate() {
        assert_eq!(g as f64, e, "{what}[{i}]");
    }
}

fn kernel_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
    let mut instances = 0;

    // float32 GEMM, both implementations.
    for _ in 0..20 {
        let n = rng.gen_range(1..=64);
        let a: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (exact, scale) = gemm_oracle_f64(&a, &b, n);
        let (ta, tb) = (Tensor::matrix(n, n, a).unwrap(), Tensor::matrix(n, n, b).unwrap());
        let tile = TileParams {
            mc: rng.gen_range(1..=80),
            kc: rng.gen_range(1..=80),
            nc: rng.gen_range(1..=80),
        };
        assert_close_f32(gemm_f32_naive(&ta, &tb).unwrap().data(), &exact, &scale, "gemm_f32_naive");
        let workers = rng.gen_range(1..=4);
        assert_close_f32(gemm_f32_opt(&ta, &tb, workers, tile).unwrap().data(), &exact, &scale, "gemm_f32_opt");
        instances += 1;
    }

    // float32 convolution, direct and im2col, plus their mutual agreement.
    for _ in 0..20 {
        let s = random_conv_shape(&mut rng, 64);
        let x: Vec<f32> = (0..s.b * s.c_in * s.h_in * s.w_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..s.c_out * s.reduction_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (exact, scale) = conv_oracle(&s, &x, &w, |a, b| {
            let t = a as f64 * b as f64;
            (t, t.abs())
        });
        let (tx, tw) = conv_tensors(&s, x, w);
        let workers = rng.gen_range(1..=4);
        let direct = conv2d_f32(&tx, &tw, &s, workers).unwrap();
        let lowered = conv2d_f32_im2col(&tx, &tw, &s, workers, TileParams::default()).unwrap();
        assert_close_f32(direct.data(), &exact, &scale, &format!("conv2d_f32 {s:?}"));
        assert_close_f32(lowered.data(), &exact, &scale, &format!("conv2d_f32_im2col {s:?}"));
        assert_eq!(direct.dims(), lowered.dims());
        let tol = direct
            .data()
            .iter()
            .zip(lowered.data())
            .zip(&scale)
            .all(|((d, l), s)| ((d - l) as f64).abs() <= 2e-5 * s.max(f64::MIN_POSITIVE));
        assert!(tol, "im2col and direct disagree on {s:?}");
        // The lowered matrix itself reproduces the oracle through a plain GEMM.
        if s.b == 1 {
            let cols = im2col(&tx, &s).unwrap();
            let (kdim, pix) = (cols.dims()[0], cols.dims()[1]);
            let mut via = vec![0f64; s.c_out * pix];
            for o in 0..s.c_out {
                for k in 0..kdim {
                    let wv = tw.data()[o * kdim + k] as f64;
                    for p in 0..pix {
                        via[o * pix + p] += wv * cols.data()[k * pix + p] as f64;
                    }
                }
            }
            for (v, e) in via.iter().zip(&exact) {
                assert!((v - e).abs() <= 1e-9 * (1.0 + e.abs()));
            }
        }
        instances += 1;
    }

    // int8 GEMM and convolution, exact.
    for _ in 0..10 {
        let n = rng.gen_range(1..=64);
        let a: Vec<i8> = (0..n * n).map(|_| rng.gen()).collect();
        let b: Vec<i8> = (0..n * n).map(|_| rng.gen()).collect();
        let mut exact = vec![0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                exact[i * n + j] = (0..n).map(|k| a[i * n + k] as i64 * b[k * n + j] as i64).sum::<i64>() as f64;
            }
        }
        let got = gemm_i8(&Tensor::matrix(n, n, a).unwrap(), &Tensor::matrix(n, n, b).unwrap(), rng.gen_range(1..=4)).unwrap();
        exact_i32(got.data(), &exact, "gemm_i8");
        instances += 1;
    }
    for _ in 0..10 {
        let s = random_conv_shape(&mut rng, 64);
        let x: Vec<i8> = (0..s.b * s.c_in * s.h_in * s.w_in).map(|_| rng.gen()).collect();
        let w: Vec<i8> = (0..s.c_out * s.reduction_len()).map(|_| rng.gen()).collect();
        let (exact, _) = conv_oracle(&s, &x, &w, |a, b| ((a as i64 * b as i64) as f64, 0.0));
        let (tx, tw) = conv_tensors(&s, x, w);
        exact_i32(conv2d_i8(&tx, &tw, &s, rng.gen_range(1..=4)).unwrap().data(), &exact, &format!("conv2d_i8 {s:?}"));
        instances += 1;
    }

    // Bit-serial GEMM at every width pair and both encodings.
    for enc in [Encoding::Unipolar, Encoding::Bipolar] {
        for a_bits in 1..=8u8 {
            for w_bits in 1..=8u8 {
                let m = rng.gen_range(1..=64);
                let n = rng.gen_range(1..=64);
                let k = rng.gen_range(1..=64);
                let a: Vec<u8> = (0..m * k).map(|_| rng.gen_range(0..(1u16 << a_bits)) as u8).collect();
                let w: Vec<u8> = (0..n * k).map(|_| rng.gen_range(0..(1u16 << w_bits)) as u8).collect();
                let mut exact = vec![0f64; m * n];
                for i in 0..m {
                    for j in 0..n {
                        exact[i * n + j] = (0..k)
                            .map(|t| decode(a[i * k + t], a_bits, enc) as i64 * decode(w[j * k + t], w_bits, enc) as i64)
                            .sum::<i64>() as f64;
                    }
                }
                let pa = bitpack(&Tensor::matrix(m, k, a).unwrap(), a_bits, enc).unwrap();
                let pw = bitpack(&Tensor::matrix(n, k, w).unwrap(), w_bits, enc).unwrap();
                let (got, _) = gemm_bitserial(&pa, &pw, rng.gen_range(1..=4)).unwrap();
                exact_i32(got.data(), &exact, &format!("gemm_bitserial {a_bits}x{w_bits} {enc:?}"));
                instances += 1;
            }
        }
    }

    // Bit-serial convolution: every width on each operand, both encodings.
    for enc in [Encoding::Unipolar, Encoding::Bipolar] {
        for bits in 1..=8u8 {
            let w_bits = rng.gen_range(1..=8u8);
            let s = random_conv_shape(&mut rng, 32);
            let x: Vec<u8> = (0..s.b * s.c_in * s.h_in * s.w_in).map(|_| rng.gen_range(0..(1u16 << bits)) as u8).collect();
            let w: Vec<u8> = (0..s.c_out * s.reduction_len()).map(|_| rng.gen_range(0..(1u16 << w_bits)) as u8).collect();
            let (exact, _) = conv_oracle(&s, &x, &w, |a, b| {
                ((decode(a, bits, enc) as i64 * decode(b, w_bits, enc) as i64) as f64, 0.0)
            });
            let (tx, tw) = conv_tensors(&s, x, w);
            let (got, _) = conv2d_bitserial(&tx, &tw, &s, bits, w_bits, enc, rng.gen_range(1..=4)).unwrap();
            exact_i32(got.data(), &exact, &format!("conv2d_bitserial {bits}x{w_bits} {enc:?} {s:?}"));
            instances += 1;
        }
    }

    assert!(instances >= 100, "only {instances} instances");
    assert!(start.elapsed() < Duration::from_secs(120), "took {:?}", start.elapsed());
}

fn poison(p: &mut PackedTensor) {
    let pad = !p.tail_mask();
    let last = p.words_per_row() - 1;
    for plane in 0..p.plane_count() {
        for row in 0..p.rows() {
            p.plane_row_mut(plane, row)[last] |= pad;
        }
    }
}

fn bitpack_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0006);
    for enc in [Encoding::Unipolar, Encoding::Bipolar] {
        for bits in 1..=8u8 {
            for _ in 0..4 {
                let rows = rng.gen_range(1..=8);
                let cols = rng.gen_range(1..=200);
                let codes: Vec<u8> = (0..rows * cols).map(|_| rng.gen_range(0..(1u16 << bits)) as u8).collect();
                let t = Tensor::matrix(rows, cols, codes).unwrap();
                assert_eq!(unpack(&bitpack(&t, bits, enc).unwrap()), t, "{bits} bits {enc:?}");
            }
        }
    }

    // Set every padding bit in every plane; no result may change.
    for enc in [Encoding::Unipolar, Encoding::Bipolar] {
        for bits in 1..=8u8 {
            let (m, n) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
            let k = 64 * rng.gen_range(0..=2) + rng.gen_range(1..64);
            let a: Vec<u8> = (0..m * k).map(|_| rng.gen_range(0..(1u16 << bits)) as u8).collect();
            let w: Vec<u8> = (0..n * k).map(|_| rng.gen_range(0..(1u16 << bits)) as u8).collect();
            let pa = bitpack(&Tensor::matrix(m, k, a).unwrap(), bits, enc).unwrap();
            let pw = bitpack(&Tensor::matrix(n, k, w).unwrap(), bits, enc).unwrap();
            let clean = gemm_bitserial(&pa, &pw, 2).unwrap().0;
            let (mut qa, mut qw) = (pa.clone(), pw.clone());
            poison(&mut qa);
            poison(&mut qw);
            assert_ne!(qa, pa);
            assert_eq!(gemm_bitserial(&qa, &qw, 2).unwrap().0, clean, "gemm {bits} bits {enc:?} k={k}");

            // Padded convolution, where bipolar operands also carry a validity mask.
            let s = ConvShape::new(1, 3, 4, 9, 7, 3, 3, 1, 1).unwrap();
            let x: Vec<u8> = (0..3 * 9 * 7).map(|_| rng.gen_range(0..(1u16 << bits)) as u8).collect();
            let wt: Vec<u8> = (0..4 * 27).map(|_| rng.gen_range(0..(1u16 << bits)) as u8).collect();
            let (tx, tw) = conv_tensors(&s, x, wt);
            let acts = pack_conv_activations(&tx, &s, bits, enc).unwrap();
            let wts = pack_conv_weights(&tw, &s, bits, enc).unwrap();
            assert_eq!(acts.has_mask(), enc == Encoding::Bipolar);
            let clean = conv2d_bitserial_packed(&acts, &wts, &s, 2).unwrap().0;
            let (mut pacts, mut pwts) = (acts.clone(), wts.clone());
            poison(&mut pacts);
            poison(&mut pwts);
            assert_eq!(conv2d_bitserial_packed(&pacts, &pwts, &s, 2).unwrap().0, clean, "conv {bits} bits {enc:?}");
        }
    }
}

fn quadratic_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0007);
    let (m, n, k) = (12, 10, 150);
    let widths = [1u8, 2, 4, 8];
    for enc in [Encoding::Unipolar, Encoding::Bipolar] {
        let count = |a_bits: u8, w_bits: u8, rng: &mut ChaCha8Rng| {
            let a: Vec<u8> = (0..m * k).map(|_| rng.gen_range(0..(1u16 << a_bits)) as u8).collect();
            let w: Vec<u8> = (0..n * k).map(|_| rng.gen_range(0..(1u16 << w_bits)) as u8).collect();
            let pa = bitpack(&Tensor::matrix(m, k, a).unwrap(), a_bits, enc).unwrap();
            let pw = bitpack(&Tensor::matrix(n, k, w).unwrap(), w_bits, enc).unwrap();
            gemm_bitserial(&pa, &pw, 3).unwrap().1.popcount_blocks
        };
        let base = count(1, 1, &mut rng);
        assert!(base > 0);
        for a in widths {
            for w in widths {
                assert_eq!(count(a, w, &mut rng), a as u64 * w as u64 * base, "{a}x{w} {enc:?}");
            }
        }
    }
}

fn microbench_determinism() {
    let cfg = BenchConfig {
        workers: 1,
        repetitions: 3,
        per_pass_bytes: 1 << 30,
        macs_total: 1_000_000_000,
        clock: Arc::new(StepClock::new(Duration::from_secs(1))),
    };
    let bw = measure_bandwidth(&cfg, 4096, AccessMode::Read).unwrap();
    assert_eq!(bw.bandwidth, GIB);
    let peak = measure_peak_mac(&cfg, 32).unwrap();
    assert_eq!(peak.flops, 2.0e9);
}

/// Non-gating: checks plausibility on the host and returns warnings.
fn hardware_smoke() -> Vec<String> {
    let template = microbench::host_template();
    let cfg = BenchConfig {
        repetitions: 3,
        per_pass_bytes: 256 << 20,
        macs_total: 4_000_000_000,
        ..BenchConfig::default()
    };
    let spec: MachineSpec = microbench::probe_machine(&cfg, &template).unwrap();
    let mut warnings = Vec::new();
    let theoretical = peak_performance(&spec, 32).unwrap();
    let measured = spec.measured_peak.unwrap();
    if measured > theoretical {
        warnings.push(format!(
            "measured peak {:.1} GFLOP/s above theoretical {:.1} GFLOP/s",
            measured / 1e9,
            theoretical / 1e9
        ));
    }
    for pair in spec.memory_levels.windows(2) {
        if pair[1].read_bw > pair[0].read_bw {
            warnings.push(format!(
                "read bandwidth rises from {} ({:.0} MiB/s) to {} ({:.0} MiB/s)",
                pair[0].label,
                pair[0].read_bw / 1048576.0,
                pair[1].label,
                pair[1].read_bw / 1048576.0
            ));
        }
    }
    warnings
}

fn csv_stability() {
    for (results, spec) in [(a53_results(), a53_spec()), (a72_results(), a72_spec())] {
        let table = RooflineTable::build(&results, &spec, Band::default()).unwrap();
        let first = table.to_csv().unwrap();
        let second = RooflineTable::parse(&first).unwrap().to_csv().unwrap();
        assert_eq!(first, second);
        assert!(first.ends_with('\n') && !first.contains('\r'));
    }
}

fn run(id: usize, name: &str, f: fn()) -> bool {
    let start = Instant::now();
    let ok = panic::catch_unwind(AssertUnwindSafe(f)).is_ok();
    println!(
        "criterion {id:>2} {name}: {} ({:.2?})",
        if ok { "PASS" } else { "FAIL" },
        start.elapsed()
    );
    ok
}

fn main() {
    let gating: [(usize, &str, fn()); 9] = [
        (1, "conv MACs match the ResNet-18 table", table3_macs),
        (2, "theoretical peak for A53 and A72", peak_formula),
        (3, "tuned GEMM fixtures attribute to L1", fixture_classification),
        (4, "bit-serial bandwidth stays below L1", bitserial_bandwidth_below_l1),
        (5, "kernels match float64 and integer oracles", kernel_correctness),
        (6, "bit-pack roundtrip and pad-word poisoning", bitpack_properties),
        (7, "popcount work scales with a*w", quadratic_scaling),
        (8, "microbench exact under injected clock", microbench_determinism),
        (10, "roofline CSV emit-parse-emit is stable", csv_stability),
    ];
    let mut failed = 0;
    for (id, name, f) in gating {
        if id == 10 {
            smoke();
        }
        if !run(id, name, f) {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn smoke() {
    let start = Instant::now();
    match panic::catch_unwind(hardware_smoke) {
        Ok(w) if w.is_empty() => println!("criterion  9 host hardware smoke (non-gating): PASS ({:.2?})", start.elapsed()),
        Ok(w) => {
            println!("criterion  9 host hardware smoke (non-gating): WARN ({:.2?})", start.elapsed());
            for line in w {
                println!("    warning: {line}");
            }
        }
        Err(_) => println!("criterion  9 host hardware smoke (non-gating): WARN (probe failed)"),
    }
}
