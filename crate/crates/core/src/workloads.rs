//! Workload suites: the ResNet-18 convolution layers, square GEMM sweeps, and
//! a line-oriented suite file format.
//!
//! ```text
//! # suite: resnet18
//! gemm N256 256
//! conv C2 1 64 64 56 56 3 3 1 1
//! ```
//! Conv fields are `b c_in c_out h_in w_in k_h k_w stride pad`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{conv_macs, gemm_macs, ConvShape, GemmShape, OutputConvention};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Gemm(GemmShape),
    Conv(ConvShape),
}

impl Shape {
    pub fn macs(&self, conv: OutputConvention) -> Result<u64> {
        match self {
            Shape::Gemm(g) => Ok(gemm_macs(*g)),
            Shape::Conv(c) => conv_macs(c, conv),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Shape::Gemm(_) => "gemm",
            Shape::Conv(_) => "conv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadItem {
    pub label: String,
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkloadSuite {
    name: String,
    items: Vec<WorkloadItem>,
}

impl WorkloadSuite {
    pub fn new(name: impl Into<String>, items: Vec<WorkloadItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("workload suite is empty"));
        }
        let mut seen = HashSet::new();
        for item in &items {
            check_label(&item.label)?;
            if !seen.insert(item.label.as_str()) {
                return Err(Error::invalid(format!("duplicate label `{}`", item.label)));
            }
        }
        Ok(WorkloadSuite {
            name: name.into(),
            items,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn items(&self) -> &[WorkloadItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<&WorkloadItem> {
        self.items.iter().find(|i| i.label == label)
    }
}

fn check_label(label: &str) -> Result<()> {
    if label.is_empty()
        || label
            .chars()
            .any(|c| c.is_whitespace() || c == ',' || c == '"' || c == '#')
    {
        return Err(Error::invalid(format!(
            "label `{label}` must be non-empty without whitespace, commas, quotes or `#`"
        )));
    }
    Ok(())
}

const RESNET18: [(&str, [usize; 6]); 10] = [
    // c_in, c_out, h=w, k, s, p
    ("C2", [64, 64, 56, 3, 1, 1]),
    ("C3", [64, 128, 56, 3, 2, 1]),
    ("C4", [64, 128, 56, 1, 2, 0]),
    ("C5", [128, 128, 28, 3, 1, 1]),
    ("C6", [128, 256, 28, 3, 2, 1]),
    ("C7", [128, 256, 28, 1, 2, 0]),
    ("C8", [256, 256, 14, 3, 1, 1]),
    ("C9", [256, 512, 14, 3, 2, 1]),
    ("C10", [256, 512, 14, 1, 2, 0]),
    ("C11", [512, 512, 7, 3, 1, 1]),
];

/// ResNet-18 convolution layers C2..C11 (the input layer is left out).
pub fn resnet18_suite() -> WorkloadSuite {
    let items = RESNET18
        .iter()
        .map(|&(label, [c_in, c_out, hw, k, s, p])| WorkloadItem {
            label: label.to_string(),
            shape: Shape::Conv(ConvShape {
                b: 1,
                c_in,
                c_out,
                h_in: hw,
                w_in: hw,
                k_h: k,
                k_w: k,
                stride: s,
                pad: p,
            }),
        })
        .collect();
    WorkloadSuite::new("resnet18", items).expect("builtin suite is valid")
}

/// Square GEMMs labelled `N<size>`.
pub fn gemm_sweep(sizes: &[usize]) -> Result<WorkloadSuite> {
    if sizes.is_empty() {
        return Err(Error::invalid("GEMM sweep needs at least one size"));
    }
    let items = sizes
        .iter()
        .map(|&n| {
            Ok(WorkloadItem {
                label: format!("N{n}"),
                shape: Shape::Gemm(GemmShape::new(n)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let name = format!(
        "gemm:{}",
        sizes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
    );
    WorkloadSuite::new(name, items)
}

/// Resolve `resnet18`, `gemm:<n>[,<n>...]` or a suite file path.
pub fn resolve_suite(selector: &str) -> Result<WorkloadSuite> {
    if selector == "resnet18" {
        return Ok(resnet18_suite());
    }
    if let Some(list) = selector.strip_prefix("gemm:") {
        let sizes = list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad GEMM size `{s}` in `{selector}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        return gemm_sweep(&sizes);
    }
    load_suite(selector)
}

const NAME_DIRECTIVE: &str = "# suite:";

pub fn parse_suite(text: &str, origin: &str, default_name: &str) -> Result<WorkloadSuite> {
    let mut name = default_name.to_string();
    let mut items = Vec::new();
    let mut labels = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: line_no,
            message,
        };
        if let Some(rest) = raw.trim().strip_prefix(NAME_DIRECTIVE) {
            let rest = rest.trim();
            if !rest.is_empty() {
                name = rest.to_string();
            }
            continue;
        }
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let nums = |expected: usize| -> Result<Vec<usize>> {
            if fields.len() != expected + 2 {
                return Err(err(format!(
                    "`{}` expects {} fields after the label, found {}",
                    fields[0],
                    expected,
                    fields.len().saturating_sub(2)
                )));
            }
            fields[2..]
                .iter()
                .map(|f| {
                    f.parse::<usize>()
                        .map_err(|_| err(format!("`{f}` is not a non-negative integer")))
                })
                .collect()
        };
        let shape = match fields[0] {
            "gemm" => {
                let v = nums(1)?;
                Shape::Gemm(GemmShape::new(v[0]).map_err(|e| err(e.to_string()))?)
            }
            "conv" => {
                let v = nums(9)?;
                Shape::Conv(
                    ConvShape::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
                        .map_err(|e| err(e.to_string()))?,
                )
            }
            other => return Err(err(format!("unknown record kind `{other}`"))),
        };
        let label = fields
            .get(1)
            .ok_or_else(|| err("missing label".into()))?
            .to_string();
        check_label(&label).map_err(|e| err(e.to_string()))?;
        if !labels.insert(label.clone()) {
            return Err(err(format!("duplicate label `{label}`")));
        }
        items.push(WorkloadItem { label, shape });
    }
    if items.is_empty() {
        return Err(Error::Parse {
            path: origin.to_string(),
            line: 0,
            message: "suite has no workloads".into(),
        });
    }
    WorkloadSuite::new(name, items)
}

pub fn load_suite(path: impl AsRef<Path>) -> Result<WorkloadSuite> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("suite");
    parse_suite(&text, &path.display().to_string(), stem)
}

pub fn format_suite(suite: &WorkloadSuite) -> String {
    let mut out = format!("{NAME_DIRECTIVE} {}\n", suite.name);
    for item in &suite.items {
        match item.shape {
            Shape::Gemm(g) => {
                let _ = writeln!(out, "gemm {} {}", item.label, g.n);
            }
            Shape::Conv(c) => {
                let _ = writeln!(
                    out,
                    "conv {} {} {} {} {} {} {} {} {} {}",
                    item.label, c.b, c.c_in, c.c_out, c.h_in, c.w_in, c.k_h, c.k_w, c.stride, c.pad
                );
            }
        }
    }
    out
}

pub fn save_suite(suite: &WorkloadSuite, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_suite(suite)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TABLE3_MACS: [(&str, u64); 10] = [
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

    #[test]
    fn resnet18_rows() {
        let suite = resnet18_suite();
        assert_eq!(suite.len(), 10);
        assert_eq!(
            suite.get("C2").unwrap().shape,
            Shape::Conv(ConvShape::new(1, 64, 64, 56, 56, 3, 3, 1, 1).unwrap())
        );
        assert_eq!(
            suite.get("C10").unwrap().shape,
            Shape::Conv(ConvShape::new(1, 256, 512, 14, 14, 1, 1, 2, 0).unwrap())
        );
        assert!(suite.get("C1").is_none());
    }

    #[test]
    fn resnet18_macs_match_table() {
        let suite = resnet18_suite();
        for (label, macs) in TABLE3_MACS {
            let item = suite.get(label).unwrap();
            assert_eq!(item.shape.macs(OutputConvention::Paper).unwrap(), macs, "{label}");
        }
    }

    #[test]
    fn shipped_suite_file_matches_builtin() {
        let text = include_str!("../data/resnet18.suite");
        assert_eq!(parse_suite(text, "resnet18.suite", "x").unwrap(), resnet18_suite());
    }

    #[test]
    fn sweeps() {
        let s = gemm_sweep(&[32, 128, 256, 512, 1024]).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.items()[0].label, "N32");
        let s = gemm_sweep(&[1]).unwrap();
        assert_eq!(s.items()[0].shape, Shape::Gemm(GemmShape { n: 1 }));
        let s = gemm_sweep(&[8192]).unwrap();
        assert_eq!(s.items()[0].shape, Shape::Gemm(GemmShape { n: 8192 }));
        assert!(gemm_sweep(&[]).is_err());
        assert!(gemm_sweep(&[0]).is_err());
        assert!(gemm_sweep(&[4, 4]).is_err());
    }

    #[test]
    fn selectors() {
        assert_eq!(resolve_suite("resnet18").unwrap(), resnet18_suite());
        assert_eq!(resolve_suite("gemm:1").unwrap().len(), 1);
        assert_eq!(resolve_suite("gemm:32,64").unwrap().len(), 2);
        assert!(resolve_suite("gemm:").is_err());
        assert!(resolve_suite("gemm:x").is_err());
    }

    #[test]
    fn parse_single_gemm() {
        let s = parse_suite("gemm N64 64\n", "t", "t").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.items()[0].shape, Shape::Gemm(GemmShape { n: 64 }));
    }

    #[test]
    fn parse_errors_carry_line() {
        let text = "# header\ngemm A 4\ngemm A 8\n";
        match parse_suite(text, "dup.suite", "dup") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        for (text, line) in [
            ("conv X 1 2 3\n", 1),
            ("\n\nmatmul X 4\n", 3),
            ("gemm X -4\n", 1),
            ("gemm X 0\n", 1),
            ("gemm\n", 1),
            ("conv X 1 1 1 4 4 3 3 0 1\n", 1),
        ] {
            match parse_suite(text, "bad", "bad") {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(parse_suite("# nothing\n", "e", "e").is_err());
    }

    #[test]
    fn comments_and_trailing_comments() {
        let s = parse_suite("gemm A 4 # small\n  # indented\n\ngemm B 8\n", "c", "c").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.name(), "c");
    }

    fn arb_item() -> impl Strategy<Value = Shape> {
        prop_oneof![
            (1usize..5000).prop_map(|n| Shape::Gemm(GemmShape { n })),
            (1usize..4, 1usize..600, 1usize..600, 1usize..300, 1usize..300, 1usize..8, 1usize..8, 1usize..4, 0usize..4)
                .prop_map(|(b, ci, co, h, w, kh, kw, s, p)| Shape::Conv(
                    ConvShape::new(b, ci, co, h, w, kh, kw, s, p).unwrap()
                )),
        ]
    }

    proptest! {
        #[test]
        fn format_parse_roundtrip(shapes in proptest::collection::vec(arb_item(), 1..12)) {
            let items = shapes
                .into_iter()
                .enumerate()
                .map(|(i, shape)| WorkloadItem { label: format!("w{i}"), shape })
                .collect();
            let suite = WorkloadSuite::new("prop", items).unwrap();
            let text = format_suite(&suite);
            prop_assert_eq!(parse_suite(&text, "mem", "other").unwrap(), suite);
        }
    }
}
