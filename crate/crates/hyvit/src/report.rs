//! Machine-readable reports. Every JSON document carries `schema`; CSV
//! files hold one flat row per layer, pair or comparison.

use std::fs;
use std::path::{Path, PathBuf};

use hyvit_core::cost::{NetworkCost, DataflowPolicy};
use hyvit_core::fusion::FusionReport;
use hyvit_core::{ArchConfig, CostBreakdown, LayerKind, Level, NetworkGraph};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::netsim::{LayerSim, NetworkSim};

pub const REPORT_SCHEMA: &str = "hyvit.report.v1";

/// Environment variable naming the default report directory.
pub const REPORT_DIR_ENV: &str = "HYVIT_REPORT_DIR";

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct CostRow {
    pub name: String,
    pub kind: String,
    pub tag: String,
    pub fused_with: String,
    pub mapping: String,
    pub macs: u64,
    pub ideal_cycles: u64,
    pub spatial_underutilization_cycles: u64,
    pub temporal_stall_cycles: u64,
    pub total_cycles: u64,
    pub onload_cycles: u64,
    pub offload_cycles: u64,
    pub utilization: f64,
    pub energy_dram_pj: f64,
    pub energy_sram_pj: f64,
    pub energy_input_mem_pj: f64,
    pub energy_weight_reg_pj: f64,
    pub energy_output_rf_pj: f64,
    pub energy_mac_pj: f64,
    pub energy_total_pj: f64,
    pub dram_bytes: u64,
}

impl CostRow {
    pub fn new(name: &str, kind: &str, tag: &str, fused_with: &str, mapping: String, c: &CostBreakdown, arch: &ArchConfig) -> Self {
        CostRow {
            name: name.into(),
            kind: kind.into(),
            tag: tag.into(),
            fused_with: fused_with.into(),
            mapping,
            macs: c.macs,
            ideal_cycles: c.ideal_cycles,
            spatial_underutilization_cycles: c.spatial_underutilization_cycles,
            temporal_stall_cycles: c.temporal_stall_cycles,
            total_cycles: c.total_cycles(),
            onload_cycles: c.onload_cycles,
            offload_cycles: c.offload_cycles,
            utilization: c.utilization(arch),
            energy_dram_pj: c.energy_at(Level::Dram),
            energy_sram_pj: c.energy_at(Level::Sram),
            energy_input_mem_pj: c.energy_at(Level::InputMem),
            energy_weight_reg_pj: c.energy_at(Level::WeightReg),
            energy_output_rf_pj: c.energy_at(Level::OutputRf),
            energy_mac_pj: c.mac_energy_pj,
            energy_total_pj: c.total_energy_pj(),
            dram_bytes: c.dram_bytes(),
        }
    }
}

/// Per-layer rows of a mapped network.
pub fn cost_rows(net: &NetworkGraph, cost: &NetworkCost, arch: &ArchConfig) -> Vec<CostRow> {
    cost.layers
        .iter()
        .map(|l| {
            let n = &net.nodes[l.node];
            let fused = l.fused_with.map(|j| net.nodes[j].layer.name.clone()).unwrap_or_default();
            let mapping = l.mapping.as_ref().map(|m| m.to_string()).unwrap_or_default();
            CostRow::new(&l.name, n.layer.kind.name(), n.tag.name(), &fused, mapping, &l.cost, arch)
        })
        .collect()
}

/// Network total as a single row.
pub fn total_row(name: &str, cost: &NetworkCost, arch: &ArchConfig) -> CostRow {
    CostRow::new(name, "network", "", "", String::new(), &cost.total, arch)
}

/// Sum of the depthwise layers of a mapped network.
pub fn dw_total(net: &NetworkGraph, cost: &NetworkCost) -> CostBreakdown {
    let mut c = CostBreakdown::default();
    for l in cost.layers.iter().filter(|l| net.nodes[l.node].layer.kind == LayerKind::DWConv2D) {
        c.accumulate(&l.cost);
    }
    c
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Comparison {
    pub network: String,
    pub objective: String,
    pub fixed_cycles: u64,
    pub reconfigurable_cycles: u64,
    /// `1 - reconfigurable / fixed` of network cycles.
    pub latency_saving: f64,
    pub fixed_dw_cycles: u64,
    pub reconfigurable_dw_cycles: u64,
    pub dw_speedup: f64,
    pub fixed_energy_pj: f64,
    pub reconfigurable_energy_pj: f64,
}

impl Comparison {
    pub fn new(net: &NetworkGraph, objective: &str, fixed: &NetworkCost, reconf: &NetworkCost) -> Self {
        let (f, r) = (fixed.total.total_cycles(), reconf.total.total_cycles());
        let (fd, rd) = (dw_total(net, fixed).total_cycles(), dw_total(net, reconf).total_cycles());
        Comparison {
            network: net.name.clone(),
            objective: objective.into(),
            fixed_cycles: f,
            reconfigurable_cycles: r,
            latency_saving: 1.0 - r as f64 / f as f64,
            fixed_dw_cycles: fd,
            reconfigurable_dw_cycles: rd,
            dw_speedup: if rd == 0 { 1.0 } else { fd as f64 / rd as f64 },
            fixed_energy_pj: fixed.total.total_energy_pj(),
            reconfigurable_energy_pj: reconf.total.total_energy_pj(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExploreReport {
    pub schema: &'static str,
    pub network: String,
    pub objective: String,
    pub dataflow: String,
    pub comparison: Comparison,
    pub total: CostRow,
    pub layers: Vec<CostRow>,
}

pub fn policy_name(p: DataflowPolicy) -> &'static str {
    match p {
        DataflowPolicy::Fixed => "fixed",
        DataflowPolicy::Reconfigurable => "reconfigurable",
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct IbRow {
    pub expand: String,
    pub project: String,
    pub t_bytes: u64,
    pub feasible: bool,
    /// Plan in its text form, or why the pair falls back to sequential layers.
    pub plan: String,
    pub fallback_reason: String,
    pub unfused_dram_bytes: u64,
    pub fused_dram_bytes: u64,
    pub dram_bytes_saved: i64,
    pub unfused_energy_pj: f64,
    pub fused_energy_pj: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct FuseSummary {
    pub network: String,
    pub dram_pj_per_byte: f64,
    pub ibs: usize,
    pub feasible: usize,
    pub fallback: usize,
    pub unfused_dram_bytes: u64,
    pub fused_dram_bytes: u64,
    pub ib_dram_share: f64,
    pub dram_bytes_saved: i64,
    pub unfused_energy_pj: f64,
    pub fused_energy_pj: f64,
    pub energy_saved_pj: f64,
    pub energy_reduction: f64,
    pub unfused_dram_energy_share: f64,
    pub unfused_cycles: u64,
    pub fused_cycles: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FuseReport {
    pub schema: &'static str,
    pub summary: FuseSummary,
    pub ibs: Vec<IbRow>,
}

impl FuseReport {
    pub fn new(r: &FusionReport) -> Self {
        let ibs: Vec<IbRow> = r
            .ibs
            .iter()
            .map(|i| IbRow {
                expand: i.expand.clone(),
                project: i.project.clone(),
                t_bytes: i.t_bytes,
                feasible: i.plan.is_some(),
                plan: i.plan.as_ref().map(|p| p.to_string()).unwrap_or_default(),
                fallback_reason: i.reason.clone().unwrap_or_default(),
                unfused_dram_bytes: i.unfused_dram_bytes,
                fused_dram_bytes: i.fused_dram_bytes,
                dram_bytes_saved: i.unfused_dram_bytes as i64 - i.fused_dram_bytes as i64,
                unfused_energy_pj: i.unfused_energy_pj,
                fused_energy_pj: i.fused_energy_pj,
            })
            .collect();
        let (u, f) = (&r.unfused.total, &r.fused.total);
        let feasible = ibs.iter().filter(|i| i.feasible).count();
        let summary = FuseSummary {
            network: r.network.clone(),
            dram_pj_per_byte: r.dram_pj_per_byte,
            ibs: ibs.len(),
            feasible,
            fallback: ibs.len() - feasible,
            unfused_dram_bytes: u.dram_bytes(),
            fused_dram_bytes: f.dram_bytes(),
            ib_dram_share: r.ib_dram_share(),
            dram_bytes_saved: r.dram_bytes_saved(),
            unfused_energy_pj: u.total_energy_pj(),
            fused_energy_pj: f.total_energy_pj(),
            energy_saved_pj: r.energy_saved_pj(),
            energy_reduction: r.energy_reduction(),
            unfused_dram_energy_share: if u.total_energy_pj() > 0.0 { u.energy_at(Level::Dram) / u.total_energy_pj() } else { 0.0 },
            unfused_cycles: u.total_cycles(),
            fused_cycles: f.total_cycles(),
        };
        FuseReport { schema: REPORT_SCHEMA, summary, ibs }
    }

    /// One line per pair: `EXPAND PLAN` or `EXPAND fallback: REASON`.
    pub fn plans_text(&self) -> String {
        let mut s = String::new();
        for i in &self.ibs {
            if i.feasible {
                s += &format!("{} {}\n", i.expand, i.plan);
            } else {
                s += &format!("{} fallback: {}\n", i.expand, i.fallback_reason);
            }
        }
        s
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SimRow {
    pub name: String,
    pub fused_with: String,
    pub macs: u64,
    pub cycles: u64,
    pub model_cycles: u64,
    pub model_latency_cycles: u64,
    pub energy_pj: f64,
    pub dram_bytes: u64,
    pub sram_bytes: u64,
    pub instructions: usize,
    /// `pass`, `fail` or empty when unchecked.
    pub golden: String,
}

impl From<&LayerSim> for SimRow {
    fn from(l: &LayerSim) -> Self {
        SimRow {
            name: l.name.clone(),
            fused_with: l.fused_with.clone().unwrap_or_default(),
            macs: l.macs,
            cycles: l.cycles,
            model_cycles: l.model_cycles,
            model_latency_cycles: l.model_latency,
            energy_pj: l.energy_pj,
            dram_bytes: l.dram_bytes,
            sram_bytes: l.sram_bytes,
            instructions: l.instructions,
            golden: match l.golden {
                Some(true) => "pass".into(),
                Some(false) => "fail".into(),
                None => String::new(),
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SimSummary {
    pub schema: &'static str,
    pub network: String,
    pub fusion: bool,
    pub seed: u64,
    pub clock_hz: u64,
    pub cycles: u64,
    pub model_cycles: u64,
    pub macs: u64,
    pub energy_pj: f64,
    pub fps: f64,
    pub power_w: f64,
    pub fps_per_w: f64,
    pub golden_checked: usize,
    pub golden_failed: usize,
    pub layers: Vec<SimRow>,
}

impl From<&NetworkSim> for SimSummary {
    fn from(s: &NetworkSim) -> Self {
        SimSummary {
            schema: REPORT_SCHEMA,
            network: s.network.clone(),
            fusion: s.fusion,
            seed: s.seed,
            clock_hz: s.clock_hz,
            cycles: s.cycles,
            model_cycles: s.model_cycles,
            macs: s.macs,
            energy_pj: s.energy_pj,
            fps: s.fps(),
            power_w: s.power_w(),
            fps_per_w: s.fps_per_w(),
            golden_checked: s.layers.iter().filter(|l| l.golden.is_some()).count(),
            golden_failed: s.layers.iter().filter(|l| l.golden == Some(false)).count(),
            layers: s.layers.iter().map(SimRow::from).collect(),
        }
    }
}

/// Output directory for a command's reports, created on demand.
pub struct ReportDir(pub PathBuf);

impl ReportDir {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let p = path.into();
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(ReportDir(p))
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.0.join(file)
    }

    pub fn json<T: Serialize>(&self, file: &str, v: &T) -> Result<PathBuf> {
        let p = self.path(file);
        let text = serde_json::to_string_pretty(v)?;
        write_text(&p, &(text + "\n"))?;
        Ok(p)
    }

    pub fn csv<T: Serialize>(&self, file: &str, rows: &[T]) -> Result<PathBuf> {
        let p = self.path(file);
        write_csv(&p, rows)?;
        Ok(p)
    }

    pub fn text(&self, file: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(file);
        write_text(&p, text)?;
        Ok(p)
    }
}

pub fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

pub fn write_csv<T: Serialize>(p: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(p)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(p, e))
}
