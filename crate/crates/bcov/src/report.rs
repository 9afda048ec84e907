//! Coverage reconstruction from a dump and report rendering.

use std::fmt::Write as _;

use bcov_core::{CoverageArray, CoverageHeader, Policy};
use serde::{Deserialize, Serialize};

use crate::analysis::ModuleAnalysis;
use crate::elf::ElfModuleView;
use crate::patch::PatchPlan;

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("dump was recorded with the {dump} policy, report requested {requested}")]
    PolicyMismatch { dump: &'static str, requested: &'static str },
    #[error("dump belongs to a different build (hash {dump:#018x}, module {module:#018x})")]
    HashMismatch { dump: u64, module: u64 },
    #[error("dump has {dump} probes, analysis planned {planned}")]
    ProbeCountMismatch { dump: u32, planned: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionCoverage {
    pub name: String,
    #[serde(with = "hex_addr")]
    pub address: u64,
    pub total_blocks: usize,
    pub covered_blocks: usize,
    #[serde(with = "hex_addrs")]
    pub covered: Vec<u64>,
}

impl FunctionCoverage {
    pub fn percent(&self) -> f64 {
        percent(self.covered_blocks, self.total_blocks)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub schema: u32,
    pub module: String,
    #[serde(with = "policy_name")]
    pub policy: Policy,
    /// Leaf-node reports are a lower bound on the executed blocks.
    pub approximate: bool,
    pub total_blocks: usize,
    pub covered_blocks: usize,
    pub functions: Vec<FunctionCoverage>,
}

impl CoverageReport {
    pub fn percent(&self) -> f64 {
        percent(self.covered_blocks, self.total_blocks)
    }

    /// Covered block addresses across all functions, ascending.
    pub fn covered_addresses(&self) -> Vec<u64> {
        let mut all: Vec<u64> = self.functions.iter().flat_map(|f| f.covered.iter().copied()).collect();
        all.sort_unstable();
        all
    }
}

fn percent(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

/// Maps the dump's hit bytes back to blocks through the plan's probe map.
pub fn infer_coverage(
    view: &ElfModuleView,
    analysis: &ModuleAnalysis,
    plan: &PatchPlan,
    header: &CoverageHeader,
    array: &CoverageArray,
) -> Result<CoverageReport, ReportError> {
    if header.policy != plan.policy {
        return Err(ReportError::PolicyMismatch {
            dump: header.policy.as_str(),
            requested: plan.policy.as_str(),
        });
    }
    if header.build_hash != view.build_hash {
        return Err(ReportError::HashMismatch {
            dump: header.build_hash,
            module: view.build_hash,
        });
    }
    if header.probe_count as usize != plan.probes.len() || array.len() != plan.probes.len() {
        return Err(ReportError::ProbeCountMismatch {
            dump: header.probe_count,
            planned: plan.probes.len(),
        });
    }
    let mut hits: Vec<Vec<usize>> = vec![Vec::new(); analysis.functions.len()];
    for i in array.hits() {
        let p = &plan.probes[i];
        hits[p.function].push(p.superblock);
    }
    let mut functions = Vec::new();
    for &fi in &plan.functions {
        let f = &analysis.functions[fi];
        let Ok(a) = &f.result else { continue };
        let blocks = a
            .sbg
            .reconstruct(hits[fi].iter().copied())
            .expect("probe map refers to known superblocks");
        let mut covered: Vec<u64> = blocks.into_iter().map(|b| a.cfg.blocks[b].addr).collect();
        covered.sort_unstable();
        functions.push(FunctionCoverage {
            name: f.function.display_name(),
            address: f.function.start,
            total_blocks: a.cfg.blocks.len(),
            covered_blocks: covered.len(),
            covered,
        });
    }
    Ok(CoverageReport {
        schema: REPORT_SCHEMA,
        module: view
            .path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        policy: plan.policy,
        approximate: plan.policy == Policy::LeafNode,
        total_blocks: functions.iter().map(|f| f.total_blocks).sum(),
        covered_blocks: functions.iter().map(|f| f.covered_blocks).sum(),
        functions,
    })
}

pub fn render_text(report: &CoverageReport) -> String {
    let mut out = String::new();
    let width = report
        .functions
        .iter()
        .map(|f| f.name.len())
        .max()
        .unwrap_or(0)
        .max("function".len());
    let _ = writeln!(out, "{:<width$}  {:>18}  {:>7}  {:>7}  {:>7}", "function", "address", "blocks", "covered", "percent");
    for f in &report.functions {
        let _ = writeln!(
            out,
            "{:<width$}  {:#018x}  {:>7}  {:>7}  {:>6.1}%",
            f.name,
            f.address,
            f.total_blocks,
            f.covered_blocks,
            f.percent()
        );
    }
    let _ = writeln!(
        out,
        "{:<width$}  {:>18}  {:>7}  {:>7}  {:>6.1}%",
        "total",
        "",
        report.total_blocks,
        report.covered_blocks,
        report.percent()
    );
    if report.approximate {
        let _ = writeln!(out, "note: leaf-node policy, covered counts are a lower bound");
    }
    out
}

pub fn render_json(report: &CoverageReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

mod hex_addr {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#x}"))
    }

    pub fn parse(s: &str) -> Option<u64> {
        u64::from_str_radix(s.strip_prefix("0x")?, 16).ok()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).ok_or_else(|| D::Error::custom(format!("bad hex address {s:?}")))
    }
}

mod hex_addrs {
    use serde::{de::Error, ser::SerializeSeq, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for a in v {
            seq.serialize_element(&format!("{a:#x}"))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u64>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| super::hex_addr::parse(s).ok_or_else(|| D::Error::custom(format!("bad hex address {s:?}"))))
            .collect()
    }
}

mod policy_name {
    use bcov_core::Policy;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Policy, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(p.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Policy, D::Error> {
        match String::deserialize(d)?.as_str() {
            "leaf" => Ok(Policy::LeafNode),
            "any" => Ok(Policy::AnyNode),
            other => Err(D::Error::custom(format!("unknown policy {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CoverageReport {
        CoverageReport {
            schema: REPORT_SCHEMA,
            module: "m".into(),
            policy: Policy::AnyNode,
            approximate: false,
            total_blocks: 4,
            covered_blocks: 3,
            functions: vec![FunctionCoverage {
                name: "f".into(),
                address: 0x1130,
                total_blocks: 4,
                covered_blocks: 3,
                covered: vec![0x1130, 0x1138, 0x1140],
            }],
        }
    }

    #[test]
    fn text_row_shows_percentage() {
        let text = render_text(&sample());
        assert!(text.lines().nth(1).unwrap().ends_with("75.0%"), "{text}");
    }

    #[test]
    fn json_uses_hex_and_round_trips() {
        let r = sample();
        let json = render_json(&r);
        assert!(json.contains("\"0x1138\""));
        let back: CoverageReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn empty_report_is_header_and_total() {
        let r = CoverageReport {
            functions: vec![],
            total_blocks: 0,
            covered_blocks: 0,
            ..sample()
        };
        assert_eq!(render_text(&r).lines().count(), 2);
    }
}
