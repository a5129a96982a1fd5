//! Measurement-versus-bound classification and the tables built on it.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::{Measurement, ResultSet};
use crate::model::{bound_estimate, required_bandwidth, BoundEstimate, MachineSpec, Precision};

/// Accepted range of `measured / bound` for a run to count as explained by
/// that bound. The default factor-of-two band is a chosen operationalization
/// of "correlates with", not a derived quantity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub low: f64,
    pub high: f64,
}

impl Default for Band {
    fn default() -> Self {
        Band { low: 0.5, high: 2.0 }
    }
}

impl Band {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low.is_finite() && high.is_finite() && low > 0.0 && low <= high) {
            return Err(Error::invalid(format!("invalid band [{low}, {high}]")));
        }
        Ok(Band { low, high })
    }
}

impl FromStr for Band {
    type Err = Error;

    /// `low,high`, e.g. `0.5,2.0`.
    fn from_str(s: &str) -> Result<Self> {
        let (low, high) = s
            .split_once(',')
            .ok_or_else(|| Error::invalid(format!("band `{s}` is not `low,high`")))?;
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("band bound `{v}` is not a number")))
        };
        Band::new(num(low)?, num(high)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    ConsistentWithBound,
    /// Slower than the band allows: something besides the bound costs time.
    AboveBound,
    /// Faster than the band allows: the model under-predicts what is possible.
    SubBoundAnomaly,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::ConsistentWithBound => "consistent-with-bound",
            Verdict::AboveBound => "above-bound",
            Verdict::SubBoundAnomaly => "sub-bound-anomaly",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Verdict::ConsistentWithBound,
            Verdict::AboveBound,
            Verdict::SubBoundAnomaly,
        ]
        .into_iter()
        .find(|v| v.as_str() == s)
        .ok_or_else(|| Error::invalid(format!("unknown verdict `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub workload_label: String,
    pub precision: Precision,
    pub limiting_label: String,
    pub limiting_time: f64,
    /// Measured median over the limiting bound time.
    pub ratio: f64,
    pub verdict: Verdict,
    /// Bit-serial rows: the one-read-per-MAC model ignores packing and
    /// plane traffic, so the attribution is weaker.
    pub model_limited: bool,
    pub estimate: BoundEstimate,
}

/// Attribute a measurement to one bound.
///
/// The limiting bound is the slowest bound the measurement does not beat: the
/// largest bound time that is at most the measured median. When the run beats
/// every bound, the fastest bound is used and the ratio falls below one. Equal
/// bound times resolve to the faster memory level, then compute.
pub fn classify(m: &Measurement, spec: &MachineSpec, band: Band) -> Result<Classification> {
    let estimate = bound_estimate(m.macs_standard, &m.precision, spec)?;
    let measured = m.stats.median;
    let mut under: Option<(&str, f64)> = None;
    let mut fastest: Option<(&str, f64)> = None;
    for (label, t) in estimate.bounds() {
        if t <= measured && under.is_none_or(|(_, best)| t > best) {
            under = Some((label, t));
        }
        if fastest.is_none_or(|(_, best)| t < best) {
            fastest = Some((label, t));
        }
    }
    let (label, limiting_time) = under.or(fastest).expect("at least one bound");
    let ratio = measured / limiting_time;
    let verdict = if ratio < band.low {
        Verdict::SubBoundAnomaly
    } else if ratio > band.high {
        Verdict::AboveBound
    } else {
        Verdict::ConsistentWithBound
    };
    Ok(Classification {
        workload_label: m.workload_label.clone(),
        precision: m.precision,
        limiting_label: label.to_string(),
        limiting_time,
        ratio,
        verdict,
        model_limited: m.precision.is_bitserial(),
        estimate,
    })
}

/// Compare labels with embedded numbers by value, so `C2 < C10` and `N32 < N128`.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    fn chunks(s: &str) -> Vec<(bool, &str)> {
        let mut out = Vec::new();
        let mut start = 0;
        let bytes = s.as_bytes();
        for i in 1..=bytes.len() {
            if i == bytes.len() || bytes[i].is_ascii_digit() != bytes[start].is_ascii_digit() {
                out.push((bytes[start].is_ascii_digit(), &s[start..i]));
                start = i;
            }
        }
        out
    }
    let (ca, cb) = (chunks(a), chunks(b));
    for ((da, xa), (db, xb)) in ca.iter().zip(&cb) {
        let ord = if *da && *db {
            let (ta, tb) = (xa.trim_start_matches('0'), xb.trim_start_matches('0'));
            ta.len().cmp(&tb.len()).then(ta.cmp(tb)).then(xa.len().cmp(&xb.len()))
        } else {
            xa.cmp(xb)
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    ca.len().cmp(&cb.len())
}

fn row_order(a: &Measurement, b: &Measurement) -> Ordering {
    natural_cmp(&a.workload_label, &b.workload_label).then(a.precision.cmp(&b.precision))
}

fn sorted(results: &ResultSet) -> Vec<&Measurement> {
    let mut rows: Vec<&Measurement> = results.measurements.iter().collect();
    rows.sort_by(|a, b| row_order(a, b));
    rows
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedupRow {
    pub workload_label: String,
    pub precision: Precision,
    /// Baseline median over this run's median plus activation packing.
    /// `None` when the label has no baseline measurement.
    pub with_packing: Option<f64>,
    /// Baseline median over this run's kernel median alone.
    pub without_packing: Option<f64>,
}

/// Speedup of every measurement over the `baseline` precision on the same label.
pub fn speedup_table(results: &ResultSet, baseline: Precision) -> Vec<SpeedupRow> {
    sorted(results)
        .into_iter()
        .map(|m| {
            let base = results
                .measurements
                .iter()
                .find(|b| b.precision == baseline && b.workload_label == m.workload_label)
                .map(|b| b.stats.median);
            SpeedupRow {
                workload_label: m.workload_label.clone(),
                precision: m.precision,
                with_packing: base.map(|b| b / (m.stats.median + m.packing_time)),
                without_packing: base.map(|b| b / m.stats.median),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelComparison {
    pub label: String,
    pub read_bw: f64,
    /// Requirement strictly below this level's read bandwidth.
    pub below: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandwidthRow {
    pub workload_label: String,
    pub precision: Precision,
    pub performance: f64,
    /// Bytes/s needed to sustain `performance` with one operand read per MAC.
    pub required: f64,
    pub levels: Vec<LevelComparison>,
}

impl BandwidthRow {
    pub fn below(&self, level: &str) -> Option<bool> {
        self.levels.iter().find(|l| l.label == level).map(|l| l.below)
    }
}

pub fn required_bandwidth_table(results: &ResultSet, spec: &MachineSpec) -> Result<Vec<BandwidthRow>> {
    sorted(results)
        .into_iter()
        .map(|m| {
            let required = required_bandwidth(m.derived_performance, m.precision.bytes_per_operand())?;
            Ok(BandwidthRow {
                workload_label: m.workload_label.clone(),
                precision: m.precision,
                performance: m.derived_performance,
                required,
                levels: spec
                    .memory_levels
                    .iter()
                    .map(|l| LevelComparison {
                        label: l.label.clone(),
                        read_bw: l.read_bw,
                        below: required < l.read_bw,
                    })
                    .collect(),
            })
        })
        .collect()
}

/// One parsed row of the roofline CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct RooflineRow {
    pub label: String,
    pub precision: Precision,
    pub macs_standard: u64,
    pub macs_paper: u64,
    pub bytes_model: f64,
    pub t_measured: f64,
    pub t_compute: f64,
    /// Parallel to `RooflineTable::levels`.
    pub t_levels: Vec<f64>,
    pub limiting: String,
    pub ratio: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RooflineTable {
    pub levels: Vec<String>,
    pub rows: Vec<RooflineRow>,
}

const FIXED_HEAD: [&str; 7] = [
    "label",
    "precision",
    "macs_standard",
    "macs_paper",
    "bytes_model",
    "t_measured_s",
    "t_compute_s",
];
const FIXED_TAIL: [&str; 3] = ["limiting", "ratio", "verdict"];

impl RooflineTable {
    pub fn build(results: &ResultSet, spec: &MachineSpec, band: Band) -> Result<Self> {
        let levels: Vec<String> = spec.memory_levels.iter().map(|l| l.label.clone()).collect();
        let mut rows = Vec::with_capacity(results.measurements.len());
        for m in sorted(results) {
            let c = classify(m, spec, band)?;
            rows.push(RooflineRow {
                label: m.workload_label.clone(),
                precision: m.precision,
                macs_standard: m.macs_standard,
                macs_paper: m.macs_paper()?,
                bytes_model: c.estimate.bytes,
                t_measured: m.stats.median,
                t_compute: c.estimate.compute_time,
                t_levels: c.estimate.read_times.iter().map(|t| t.seconds).collect(),
                limiting: c.limiting_label,
                ratio: c.ratio,
                verdict: c.verdict,
            });
        }
        Ok(RooflineTable { levels, rows })
    }

    pub fn header(&self) -> Vec<String> {
        FIXED_HEAD
            .iter()
            .map(|s| s.to_string())
            .chain(self.levels.iter().map(|l| format!("t_{l}_s")))
            .chain(FIXED_TAIL.iter().map(|s| s.to_string()))
            .collect()
    }

    /// Canonical CSV: fixed decimals (times 9, bytes 3, ratio 6), `\n` line ends.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![
                r.label.clone(),
                r.precision.to_string(),
                r.macs_standard.to_string(),
                r.macs_paper.to_string(),
                format!("{:.3}", r.bytes_model),
                format!("{:.9}", r.t_measured),
                format!("{:.9}", r.t_compute),
            ];
            rec.extend(r.t_levels.iter().map(|t| format!("{t:.9}")));
            rec.push(r.limiting.clone());
            rec.push(format!("{:.6}", r.ratio));
            rec.push(r.verdict.to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let n = header.len();
        let bad = |line: usize, msg: String| Error::Parse {
            path: "<csv>".into(),
            line,
            message: msg,
        };
        if n < FIXED_HEAD.len() + FIXED_TAIL.len()
            || header[..FIXED_HEAD.len()] != FIXED_HEAD
            || header[n - FIXED_TAIL.len()..] != FIXED_TAIL
        {
            return Err(bad(1, format!("unexpected header {header:?}")));
        }
        let levels = header[FIXED_HEAD.len()..n - FIXED_TAIL.len()]
            .iter()
            .map(|h| {
                h.strip_prefix("t_")
                    .and_then(|s| s.strip_suffix("_s"))
                    .map(str::to_string)
                    .ok_or_else(|| bad(1, format!("bad level column `{h}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let field = |k: usize| rec.get(k).ok_or_else(|| bad(line, "short row".into()));
            let num = |k: usize| -> Result<f64> {
                field(k)?
                    .parse()
                    .map_err(|_| bad(line, format!("`{}` is not a number", header[k])))
            };
            let int = |k: usize| -> Result<u64> {
                field(k)?
                    .parse()
                    .map_err(|_| bad(line, format!("`{}` is not an integer", header[k])))
            };
            let lvl0 = FIXED_HEAD.len();
            rows.push(RooflineRow {
                label: field(0)?.to_string(),
                precision: field(1)?.parse().map_err(|e: Error| bad(line, e.to_string()))?,
                macs_standard: int(2)?,
                macs_paper: int(3)?,
                bytes_model: num(4)?,
                t_measured: num(5)?,
                t_compute: num(6)?,
                t_levels: (0..levels.len()).map(|k| num(lvl0 + k)).collect::<Result<_>>()?,
                limiting: field(n - 3)?.to_string(),
                ratio: num(n - 2)?,
                verdict: field(n - 1)?.parse().map_err(|e: Error| bad(line, e.to_string()))?,
            });
        }
        Ok(RooflineTable { levels, rows })
    }
}

pub fn roofline_csv(results: &ResultSet, spec: &MachineSpec, band: Band) -> Result<String> {
    RooflineTable::build(results, spec, band)?.to_csv()
}

pub fn emit_roofline_csv(results: &ResultSet, spec: &MachineSpec, band: Band, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = roofline_csv(results, spec, band)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gap(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Plain-text rendering of classification, bandwidth and speedup tables.
pub fn render_text(results: &ResultSet, spec: &MachineSpec, band: Band, baseline: Precision) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "machine: {}", spec.name);
    let _ = writeln!(
        s,
        "band: measured/bound in [{}, {}] counts as consistent (an operational threshold, not a derived one)",
        band.low, band.high
    );
    let _ = writeln!(s, "volume model: one operand read per MAC\n");

    let _ = writeln!(
        s,
        "{:<10} {:<8} {:>14} {:>10} {:>8}  verdict",
        "label", "prec", "measured_s", "limiting", "ratio"
    );
    let mut footnote = false;
    for m in sorted(results) {
        let c = classify(m, spec, band)?;
        let mark = if c.model_limited { "*" } else { "" };
        footnote |= c.model_limited;
        let _ = writeln!(
            s,
            "{:<10} {:<8} {:>14.6} {:>10} {:>8.3}  {}{mark}",
            c.workload_label,
            c.precision.to_string(),
            m.stats.median,
            c.limiting_label,
            c.ratio,
            c.verdict
        );
    }
    if footnote {
        let _ = writeln!(
            s,
            "* bit-serial: the model ignores packing and bit-plane traffic; other effects may dominate"
        );
    }

    let _ = writeln!(s, "\nrequired read bandwidth (GB/s)");
    for r in required_bandwidth_table(results, spec)? {
        let flags: Vec<String> = r
            .levels
            .iter()
            .map(|l| format!("{} {}", if l.below { "below" } else { "above" }, l.label))
            .collect();
        let _ = writeln!(
            s,
            "{:<10} {:<8} {:>10.3}  {}",
            r.workload_label,
            r.precision.to_string(),
            r.required / 1e9,
            flags.join(", ")
        );
    }

    let _ = writeln!(s, "\nspeedup over {baseline} (with / without activation packing)");
    for r in speedup_table(results, baseline) {
        let _ = writeln!(
            s,
            "{:<10} {:<8} {:>8} {:>8}",
            r.workload_label,
            r.precision.to_string(),
            gap(r.with_packing),
            gap(r.without_packing)
        );
    }
    Ok(s)
}
