//! Depth-first execution of inverted-bottleneck (PW expand -> PW project)
//! pairs: the expanded tensor T is tiled along the flattened pixel axis and
//! its channels, each slice is produced into a small SRAM buffer and
//! immediately accumulated into the project layer's 32-bit partial outputs.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::arch::{ArchConfig, Level};
use crate::cost::{
    evaluate_network, map_network, tile_input_reads, CostBreakdown, DataflowPolicy, NetworkCost, Objective, Traffic, UnitBusy,
};
use crate::error::{Error, Result};
use crate::mapping::{norm_param_bytes, tile_waves, weight_slots, writeback_pieces, Dataflow};
use crate::math::{beats, ceil_div};
use crate::workload::{layer_macs, ActKind, Dims, IbPair, LayerKind, LayerSpec, NetworkGraph, Operand, PostOp, TensorShape};

/// An expand -> activation -> project pair and its intermediate tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertedBottleneck {
    pub pw_expand: LayerSpec,
    pub activation: ActKind,
    pub pw_project: LayerSpec,
    /// Intermediate tensor `{X, Y, C_t}`.
    pub t: TensorShape,
}

impl InvertedBottleneck {
    pub fn new(pw_expand: LayerSpec, pw_project: LayerSpec) -> Result<Self> {
        let bad = |what: String| Err(Error::Invariant { layer: pw_expand.name.clone(), what });
        if pw_expand.kind != LayerKind::PWConv || pw_project.kind != LayerKind::PWConv {
            return bad("both layers of an inverted bottleneck must be pointwise".into());
        }
        let (e, p) = (&pw_expand.dims, &pw_project.dims);
        if e.k != p.c {
            return bad(format!("expand width {} does not match project input {}", e.k, p.c));
        }
        if (e.ox, e.oy, e.b) != (p.ox, p.oy, p.b) || e.b != 1 || pw_expand.stride != (1, 1) || pw_project.stride != (1, 1) {
            return bad("expand and project must share one unstrided, unbatched pixel plane".into());
        }
        let Some(activation) = pw_expand.post_ops.iter().find_map(|o| match o {
            PostOp::Activation(a) => Some(*a),
            _ => None,
        }) else {
            return bad("expand layer must carry the activation".into());
        };
        if pw_expand.output_bytes_per_element() != 1 {
            return bad("expand layer must requantize its output to 8 bits".into());
        }
        let t = TensorShape::new(1, e.ox, e.oy, e.k);
        Ok(InvertedBottleneck { pw_expand, activation, pw_project, t })
    }

    pub fn from_pair(net: &NetworkGraph, pair: IbPair) -> Result<Self> {
        let get = |i: usize| {
            net.nodes.get(i).map(|n| n.layer.clone()).ok_or_else(|| Error::Shape(format!("node {i} outside the graph")))
        };
        Self::new(get(pair.expand)?, get(pair.project)?)
    }

    pub fn pixels(&self) -> u32 {
        self.t.x * self.t.y
    }

    pub fn t_bytes(&self) -> u64 {
        self.t.elements()
    }

    pub fn weight_bytes(&self) -> u64 {
        self.pw_expand.weight_elements() + self.pw_project.weight_elements()
    }

    pub fn macs(&self) -> u64 {
        layer_macs(&self.pw_expand) + layer_macs(&self.pw_project)
    }

    /// Output rectangle `(x0, ox, y0, oy)` of the `n`-pixel tile starting at
    /// flattened pixel `p0`. Tiles are partial rows or whole rows.
    pub fn pixel_rect(&self, p0: u32, n: u32) -> (u32, u32, u32, u32) {
        let y = self.t.y;
        if n <= y {
            (p0 / y, 1, p0 % y, n)
        } else {
            (p0 / y, n / y, 0, y)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    /// Expand a slice of T into the SRAM buffer.
    Produce,
    /// Accumulate a buffered slice into the project layer's partial outputs.
    Consume,
}

/// One schedule step over the slice `pixels x channels` of T.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionStep {
    pub kind: StepKind,
    /// `(first pixel, count)` on the flattened `[x][y]` axis.
    pub pixels: (u32, u32),
    /// `(first channel, count)` of T.
    pub channels: (u32, u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionPlan {
    /// Pixels per tile along the flattened spatial axis.
    pub tile_x: u32,
    /// Channels of T per slice.
    pub tile_c: u32,
    /// Produce/consume steps, software-pipelined one slice deep.
    pub schedule: Vec<FusionStep>,
    /// SRAM held by the pair: cached weights plus two T slices.
    pub peak_buffer_bytes: u64,
    pub dram_bytes_saved: u64,
    /// Weights are staged once in SRAM and re-read per pixel tile.
    pub weights_cached: bool,
}

/// Why an `(n, tc)` tiling cannot run: `Ok` when it fits.
fn fit(ib: &InvertedBottleneck, n: u32, tc: u32, arch: &ArchConfig) -> core::result::Result<(), String> {
    let (c, k, ct) = (ib.pw_expand.dims.c as u64, ib.pw_project.dims.k as u64, ib.t.c);
    let (n64, tc64) = (n as u64, tc as u64);
    let p = ib.pixels();
    if n == 0 || !p.is_multiple_of(n) || !(ib.t.y.is_multiple_of(n) || n.is_multiple_of(ib.t.y)) {
        return Err(format!("tile of {n} pixels does not tile the {}x{} plane in rows", ib.t.x, ib.t.y));
    }
    if tc == 0 || ct % tc != 0 {
        return Err(format!("slice of {tc} channels does not divide {ct}"));
    }
    if tc != ct && ib.pw_expand.post_ops.iter().any(|o| o.needs_statistics()) {
        return Err("expand post-processing needs every T channel of a pixel".into());
    }
    if 2 * n64 * (c + tc64) > arch.input_mem_bytes as u64 {
        return Err("input and T slices overflow the input memory".into());
    }
    if 2 * n64 * (k + tc64) > arch.rf_entries() as u64 {
        return Err("partial outputs and T slices overflow the register file".into());
    }
    let quarter = arch.pes() as u64 * arch.weight_reg_bytes as u64 / 4;
    let slots = arch.weight_tile_slots() as u64 / 2;
    let (_, ox, _, oy) = ib.pixel_rect(0, n);
    let de = Dims { b: 1, k: tc, c: c as u32, ox, oy, fx: 1, fy: 1 };
    let dp = Dims { b: 1, k: k as u32, c: tc, ox, oy, fx: 1, fy: 1 };
    if tc64 * c > quarter || k * tc64 > quarter {
        return Err("weight slices overflow a weight-register quarter".into());
    }
    if weight_slots(&ib.pw_expand, Dataflow::CK, &de, arch) > slots || weight_slots(&ib.pw_project, Dataflow::CK, &dp, arch) > slots {
        return Err("weight slices need more PE slots than a quarter provides".into());
    }
    Ok(())
}

impl FusionPlan {
    /// Plan with fixed tile sizes, checked against the array memories and
    /// the SRAM budget.
    pub fn with_tiles(ib: &InvertedBottleneck, tile_x: u32, tile_c: u32, arch: &ArchConfig, sram_budget: u64) -> Result<FusionPlan> {
        fit(ib, tile_x, tile_c, arch).map_err(|why| Error::Infeasible(format!("`{}`: {why}", ib.pw_expand.name)))?;
        let weights_cached = ib.pixels() / tile_x > 1;
        let peak = if weights_cached { ib.weight_bytes() } else { 0 } + 2 * tile_x as u64 * tile_c as u64;
        if peak > sram_budget {
            return Err(Error::Infeasible(format!("`{}`: fused pair needs {peak} B of SRAM, budget is {sram_budget} B", ib.pw_expand.name)));
        }
        let mut slices = Vec::new();
        for p0 in (0..ib.pixels()).step_by(tile_x as usize) {
            for c0 in (0..ib.t.c).step_by(tile_c as usize) {
                slices.push(((p0, tile_x), (c0, tile_c)));
            }
        }
        let mut schedule = Vec::with_capacity(2 * slices.len());
        for (s, &(pixels, channels)) in slices.iter().enumerate() {
            schedule.push(FusionStep { kind: StepKind::Produce, pixels, channels });
            if s > 0 {
                let (pixels, channels) = slices[s - 1];
                schedule.push(FusionStep { kind: StepKind::Consume, pixels, channels });
            }
        }
        if let Some(&(pixels, channels)) = slices.last() {
            schedule.push(FusionStep { kind: StepKind::Consume, pixels, channels });
        }
        Ok(FusionPlan { tile_x, tile_c, schedule, peak_buffer_bytes: peak, dram_bytes_saved: 2 * ib.t_bytes(), weights_cached })
    }

    pub fn x_tiles(&self, ib: &InvertedBottleneck) -> u32 {
        ib.pixels() / self.tile_x
    }

    pub fn c_tiles(&self, ib: &InvertedBottleneck) -> u32 {
        ib.t.c / self.tile_c
    }

    /// SRAM occupancy after each schedule step.
    pub fn buffer_trace(&self, ib: &InvertedBottleneck) -> Vec<u64> {
        let base = if self.weights_cached { ib.weight_bytes() } else { 0 };
        let mut live = base;
        self.schedule
            .iter()
            .map(|s| {
                let bytes = s.pixels.1 as u64 * s.channels.1 as u64;
                match s.kind {
                    StepKind::Produce => live += bytes,
                    StepKind::Consume => live -= bytes,
                }
                live
            })
            .collect()
    }

    /// Rebuild a plan from its text form.
    pub fn parse(text: &str, ib: &InvertedBottleneck, arch: &ArchConfig, sram_budget: u64) -> Result<FusionPlan> {
        let mut tx = None;
        let mut tc = None;
        for field in text.split_whitespace() {
            let (key, val) = field.split_once('=').ok_or_else(|| Error::Config(format!("fusion field `{field}` is not key=value")))?;
            let num = || val.parse::<u64>().map_err(|_| Error::Config(format!("fusion field `{field}` is not a number")));
            match key {
                "tile_x" => tx = Some(num()? as u32),
                "tile_c" => tc = Some(num()? as u32),
                "cached" | "peak" | "saved" => {}
                _ => return Err(Error::Config(format!("unknown fusion field `{key}`"))),
            }
        }
        match (tx, tc) {
            (Some(x), Some(c)) => FusionPlan::with_tiles(ib, x, c, arch, sram_budget),
            _ => Err(Error::Config("fusion plan needs tile_x and tile_c".into())),
        }
    }
}

impl fmt::Display for FusionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tile_x={} tile_c={} cached={} peak={} saved={}",
            self.tile_x, self.tile_c, self.weights_cached, self.peak_buffer_bytes, self.dram_bytes_saved
        )
    }
}

/// Cheapest feasible tiling by total access energy (operands assumed in
/// SRAM), ties to fewer cycles, then wider slices.
pub fn plan_fusion(ib: &InvertedBottleneck, arch: &ArchConfig, sram_budget: u64) -> Result<FusionPlan> {
    if sram_budget == 0 {
        return Err(Error::Infeasible(format!("`{}`: zero SRAM budget", ib.pw_expand.name)));
    }
    let p = ib.pixels();
    let mut best: Option<(f64, u64, FusionPlan)> = None;
    for n in (1..=p).filter(|n| p.is_multiple_of(*n)) {
        for tc in (1..=ib.t.c).filter(|c| ib.t.c.is_multiple_of(*c)) {
            let plan = match FusionPlan::with_tiles(ib, n, tc, arch, sram_budget) {
                Ok(pl) => pl,
                Err(_) => continue,
            };
            let c = fused_cost(ib, &plan, Level::Sram, Level::Sram, arch)?;
            let key = (c.total_energy_pj(), c.total_cycles());
            let better = match &best {
                None => true,
                Some((e, t, b)) => key.0 < *e || (key.0 == *e && (key.1 < *t || (key.1 == *t && tc > b.tile_c))),
            };
            if better {
                best = Some((key.0, key.1, plan));
            }
        }
    }
    // The one-pixel, one-channel tiling is the loosest on every array memory,
    // so its failure names the binding limit.
    best.map(|b| b.2).ok_or_else(|| FusionPlan::with_tiles(ib, 1, 1, arch, sram_budget).err().unwrap_or_else(|| Error::Infeasible(format!("`{}`: no tiling fits", ib.pw_expand.name))))
}

/// Where one weight slice comes from.
fn weight_fetch(tr: &mut Traffic, busy: &mut UnitBusy, bytes: u64, cached: bool, first_tile: bool, arch: &ArchConfig) -> (u64, u64) {
    tr.write(Level::WeightReg, Operand::W, bytes);
    if cached {
        let mut bus = 0;
        if first_tile {
            tr.read(Level::Dram, Operand::W, bytes);
            tr.write(Level::Sram, Operand::W, bytes);
            bus = beats(bytes, arch.dram_bus_bits);
        }
        tr.read(Level::Sram, Operand::W, bytes);
        let port = beats(bytes, arch.sram_port_bits);
        busy.bus += bus;
        busy.port += port;
        (bus, port)
    } else {
        tr.read(Level::Dram, Operand::W, bytes);
        let bus = beats(bytes, arch.dram_bus_bits);
        busy.bus += bus;
        (bus, 0)
    }
}

/// Cost of running a pair depth-first under `plan`, reading the expand input
/// from `input` and writing the project output to `output`.
pub fn fused_cost(ib: &InvertedBottleneck, plan: &FusionPlan, input: Level, output: Level, arch: &ArchConfig) -> Result<CostBreakdown> {
    let (e, p) = (&ib.pw_expand, &ib.pw_project);
    let (c, k) = (e.dims.c, p.dims.k);
    let (n, tc) = (plan.tile_x, plan.tile_c);
    let (_, ox, _, oy) = ib.pixel_rect(0, n);
    let lanes = arch.ppe_lanes as u64;
    let lb = arch.line_buffer_entries;
    let width = |l: Level| if l == Level::Dram { arch.dram_bus_bits } else { arch.sram_port_bits };
    let mut tr = Traffic::default();
    // The post-processor holds LayerNorm tables after their first read.
    tr.read(Level::Sram, Operand::W, norm_param_bytes(e) + norm_param_bytes(p));
    let mut busy = UnitBusy::default();
    let charge = |busy: &mut UnitBusy, l: Level, b: u64| {
        if l == Level::Dram {
            busy.bus += b;
        } else {
            busy.port += b;
        }
    };
    let de = Dims { b: 1, k: tc, c, ox, oy, fx: 1, fy: 1 };
    let dp = Dims { b: 1, k, c: tc, ox, oy, fx: 1, fy: 1 };
    let (we, wp) = (tile_waves(e, Dataflow::CK, &de, arch), tile_waves(p, Dataflow::CK, &dp, arch));
    let (re, rp) = (tile_input_reads(e, Dataflow::CK, &de, arch), tile_input_reads(p, Dataflow::CK, &dp, arch));
    let (me, mp) = (n as u64 * c as u64 * tc as u64, n as u64 * tc as u64 * k as u64);
    let t_pieces = writeback_pieces(ox, oy, tc, lb);
    let o_pieces = writeback_pieces(ox, oy, k, lb);
    let ob = p.output_bytes_per_element() as u64;
    let (nx, nc) = (plan.x_tiles(ib), plan.c_tiles(ib));
    let mut waves = 0u64;
    let mut macs = 0u64;
    let mut onload = 0u64;
    let mut first_w = (0u64, 0u64);
    let mut first_i = 0u64;
    for i in 0..nx {
        let ib_bytes = n as u64 * c as u64;
        tr.read(input, Operand::I, ib_bytes);
        tr.write(Level::InputMem, Operand::I, ib_bytes);
        let b = beats(ib_bytes, width(input));
        charge(&mut busy, input, b);
        if i == 0 {
            first_i = b;
        }
        for j in 0..nc {
            // Produce.
            let w1 = weight_fetch(&mut tr, &mut busy, tc as u64 * c as u64, plan.weights_cached, i == 0, arch);
            if i == 0 && j == 0 {
                first_w = w1;
            }
            waves += we;
            macs += me;
            tr.read(Level::InputMem, Operand::I, re);
            tr.read(Level::WeightReg, Operand::W, me);
            tr.write(Level::OutputRf, Operand::O, 4 * n as u64 * tc as u64);
            for &(_, xn, _, yn, _, kn) in &t_pieces {
                let m = xn as u64 * yn as u64 * kn as u64;
                tr.read(Level::OutputRf, Operand::O, 4 * m);
                tr.write(Level::Sram, Operand::O, m);
                busy.ppe += ceil_div(m, lanes);
                busy.port += beats(m, arch.sram_port_bits);
            }
            // Consume.
            let tb = n as u64 * tc as u64;
            tr.read(Level::Sram, Operand::I, tb);
            tr.write(Level::InputMem, Operand::I, tb);
            busy.port += beats(tb, arch.sram_port_bits);
            weight_fetch(&mut tr, &mut busy, k as u64 * tc as u64, plan.weights_cached, i == 0, arch);
            waves += wp;
            macs += mp;
            tr.read(Level::InputMem, Operand::I, rp);
            tr.read(Level::WeightReg, Operand::W, mp);
            tr.write(Level::OutputRf, Operand::O, 4 * n as u64 * k as u64);
            if j > 0 {
                tr.read(Level::OutputRf, Operand::O, 4 * n as u64 * k as u64);
            }
        }
        // Project results of the tile leave through the post-processor.
        if p.post_ops.is_empty() {
            let m = n as u64 * k as u64;
            tr.read(Level::OutputRf, Operand::O, 4 * m);
            tr.write(output, Operand::O, m * ob);
            charge(&mut busy, output, beats(m * ob, width(output)));
        } else {
            for &(_, xn, _, yn, _, kn) in &o_pieces {
                let m = xn as u64 * yn as u64 * kn as u64;
                tr.read(Level::OutputRf, Operand::O, 4 * m);
                tr.write(output, Operand::O, m * ob);
                busy.ppe += ceil_div(m, lanes);
                charge(&mut busy, output, beats(m * ob, width(output)));
            }
        }
    }
    debug_assert_eq!(macs, ib.macs());
    busy.array = waves;
    onload += first_i.max(first_w.0 + first_w.1);
    let (last_ppe, last_store) = if p.post_ops.is_empty() {
        (0, beats(n as u64 * k as u64 * ob, width(output)))
    } else {
        let &(_, xn, _, yn, _, kn) = o_pieces.last().unwrap();
        let m = xn as u64 * yn as u64 * kn as u64;
        (ceil_div(m, lanes), beats(m * ob, width(output)))
    };
    let mut steady = busy;
    if input == Level::Dram {
        steady.bus = steady.bus.saturating_sub(first_i);
    } else {
        steady.port = steady.port.saturating_sub(first_i);
    }
    steady.bus = steady.bus.saturating_sub(first_w.0);
    steady.port = steady.port.saturating_sub(first_w.1);
    steady.ppe -= last_ppe;
    if output == Level::Dram {
        steady.bus = steady.bus.saturating_sub(last_store);
    } else {
        steady.port = steady.port.saturating_sub(last_store);
    }
    Ok(CostBreakdown::finish(macs, waves, steady, onload, last_ppe + last_store, busy, tr, arch))
}

/// A planned pair inside a network.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedPair {
    pub pair: IbPair,
    pub ib: InvertedBottleneck,
    pub plan: FusionPlan,
}

/// One inverted bottleneck of a fusion analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct IbReport {
    pub expand: String,
    pub project: String,
    pub t_bytes: u64,
    /// `None` when no tiling fits; the pair then runs unfused.
    pub plan: Option<FusionPlan>,
    pub reason: Option<String>,
    /// DRAM bytes of both layers without and with fusion.
    pub unfused_dram_bytes: u64,
    pub fused_dram_bytes: u64,
    pub unfused_energy_pj: f64,
    pub fused_energy_pj: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport {
    pub network: String,
    pub ibs: Vec<IbReport>,
    pub unfused: NetworkCost,
    pub fused: NetworkCost,
    /// Feasible pairs, as evaluated in `fused`.
    pub pairs: Vec<FusedPair>,
    pub dram_pj_per_byte: f64,
}

impl FusionReport {
    /// Share of unfused DRAM traffic moved by inverted-bottleneck layers.
    pub fn ib_dram_share(&self) -> f64 {
        let total = self.unfused.total.dram_bytes();
        if total == 0 {
            return 0.0;
        }
        self.ibs.iter().map(|r| r.unfused_dram_bytes).sum::<u64>() as f64 / total as f64
    }

    pub fn dram_bytes_saved(&self) -> i64 {
        self.unfused.total.dram_bytes() as i64 - self.fused.total.dram_bytes() as i64
    }

    pub fn energy_saved_pj(&self) -> f64 {
        self.unfused.total.total_energy_pj() - self.fused.total.total_energy_pj()
    }

    /// Relative drop in total network energy.
    pub fn energy_reduction(&self) -> f64 {
        let u = self.unfused.total.total_energy_pj();
        if u == 0.0 {
            0.0
        } else {
            self.energy_saved_pj() / u
        }
    }

    pub fn feasible(&self) -> usize {
        self.ibs.iter().filter(|r| r.plan.is_some()).count()
    }
}

/// Search settings for a fusion analysis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionSearch {
    pub policy: DataflowPolicy,
    pub objective: Objective,
    pub budget: usize,
    /// SRAM bytes granted to each fused pair.
    pub sram_budget: u64,
}

impl FusionSearch {
    pub fn defaults(arch: &ArchConfig) -> Self {
        FusionSearch { policy: DataflowPolicy::Reconfigurable, objective: Objective::Edp, budget: 2000, sram_budget: arch.sram_weight_bytes as u64 }
    }
}

/// Plan every inverted bottleneck of `net`; infeasible pairs are reported
/// and left unfused.
pub fn plan_network(net: &NetworkGraph, arch: &ArchConfig, sram_budget: u64) -> Result<(Vec<FusedPair>, Vec<(IbPair, InvertedBottleneck, Result<FusionPlan>)>)> {
    let mut fused = Vec::new();
    let mut all = Vec::new();
    for pair in net.ib_pairs() {
        let ib = InvertedBottleneck::from_pair(net, pair)?;
        let plan = plan_fusion(&ib, arch, sram_budget);
        if let Ok(pl) = &plan {
            fused.push(FusedPair { pair, ib: ib.clone(), plan: pl.clone() });
        }
        all.push((pair, ib, plan));
    }
    Ok((fused, all))
}

/// DRAM and energy of every inverted bottleneck with and without fusion,
/// each network mapped for its own tensor placement.
pub fn network_fusion_analysis_with(net: &NetworkGraph, arch: &ArchConfig, s: &FusionSearch) -> Result<FusionReport> {
    let (fused_pairs, all) = plan_network(net, arch, s.sram_budget)?;
    let m0 = map_network(net, arch, s.policy, s.objective, s.budget, &[])?;
    let unfused = evaluate_network(net, &m0, arch, &[])?;
    let fe: Vec<usize> = fused_pairs.iter().map(|f| f.pair.expand).collect();
    let m1 = map_network(net, arch, s.policy, s.objective, s.budget, &fe)?;
    let fused = evaluate_network(net, &m1, arch, &fused_pairs)?;
    let pair_sum = |nc: &NetworkCost, pr: IbPair| {
        let mut c = CostBreakdown::default();
        for l in nc.layers.iter().filter(|l| l.node == pr.expand || l.node == pr.project) {
            c.accumulate(&l.cost);
        }
        c
    };
    let ibs = all
        .into_iter()
        .map(|(pair, ib, plan)| {
            let (u, f) = (pair_sum(&unfused, pair), pair_sum(&fused, pair));
            let (plan, reason) = match plan {
                Ok(p) => (Some(p), None),
                Err(e) => (None, Some(format!("{e}"))),
            };
            IbReport {
                expand: ib.pw_expand.name.clone(),
                project: ib.pw_project.name.clone(),
                t_bytes: ib.t_bytes(),
                plan,
                reason,
                unfused_dram_bytes: u.dram_bytes(),
                fused_dram_bytes: f.dram_bytes(),
                unfused_energy_pj: u.total_energy_pj(),
                fused_energy_pj: f.total_energy_pj(),
            }
        })
        .collect();
    Ok(FusionReport { network: net.name.clone(), ibs, unfused, fused, pairs: fused_pairs, dram_pj_per_byte: arch.energy.dram })
}

/// Fusion analysis with the default search and the weight region as budget.
pub fn network_fusion_analysis(net: &NetworkGraph, arch: &ArchConfig) -> Result<FusionReport> {
    network_fusion_analysis_with(net, arch, &FusionSearch::defaults(arch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{build_edgenext_s, EDGENEXT_S_CHANNELS};

    fn ib(c: u32, ct: u32, x: u32) -> InvertedBottleneck {
        let mut e = LayerSpec::pw("e", c, ct, x, x);
        e.post_ops = alloc::vec![PostOp::Requantize(crate::workload::Requant { mult: 1, shift: 6 }), PostOp::Activation(ActKind::Gelu)];
        let mut p = LayerSpec::pw("p", ct, c, x, x);
        p.post_ops = alloc::vec![PostOp::Requantize(crate::workload::Requant { mult: 1, shift: 8 })];
        InvertedBottleneck::new(e, p).unwrap()
    }

    #[test]
    fn intermediate_of_the_reference_pair() {
        let arch = ArchConfig::default();
        let b = ib(96, 384, 14);
        assert_eq!(2 * b.t_bytes(), 150_528);
        let plan = plan_fusion(&b, &arch, arch.sram_weight_bytes as u64).unwrap();
        assert_eq!(plan.dram_bytes_saved, 150_528);
        let c = fused_cost(&b, &plan, Level::Sram, Level::Sram, &arch).unwrap();
        // Only the weights cross DRAM, once each.
        assert_eq!(c.dram_bytes(), b.weight_bytes());
        assert_eq!(c.macs, b.macs());
    }

    #[test]
    fn one_byte_budget_is_infeasible() {
        let arch = ArchConfig::default();
        assert!(matches!(plan_fusion(&ib(96, 384, 14), &arch, 1), Err(Error::Infeasible(_))));
        assert!(plan_fusion(&ib(96, 384, 14), &arch, 0).is_err());
    }

    #[test]
    fn single_tile_degenerates_to_sequential_layers() {
        let arch = ArchConfig::default();
        let b = ib(16, 32, 4);
        let plan = FusionPlan::with_tiles(&b, 16, 32, &arch, 1 << 20).unwrap();
        assert!(!plan.weights_cached);
        let kinds: Vec<StepKind> = plan.schedule.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, [StepKind::Produce, StepKind::Consume]);
        let c = fused_cost(&b, &plan, Level::Dram, Level::Dram, &arch).unwrap();
        // Input, both weight sets and the output cross DRAM once; T never does.
        assert_eq!(c.dram_bytes(), 16 * 16 + b.weight_bytes() + 16 * 16);
    }

    #[test]
    fn schedule_produces_and_consumes_every_slice_once() {
        let arch = ArchConfig::default();
        let b = ib(48, 192, 16);
        let plan = plan_fusion(&b, &arch, arch.sram_weight_bytes as u64).unwrap();
        let mut produced = alloc::collections::BTreeSet::new();
        for s in &plan.schedule {
            let key = (s.pixels.0, s.channels.0);
            match s.kind {
                StepKind::Produce => assert!(produced.insert(key)),
                StepKind::Consume => assert!(produced.remove(&key), "consumed before produced"),
            }
        }
        assert!(produced.is_empty());
        let cover: u64 = plan.schedule.iter().filter(|s| s.kind == StepKind::Produce).map(|s| s.pixels.1 as u64 * s.channels.1 as u64).sum();
        assert_eq!(cover, b.t_bytes());
        let trace = plan.buffer_trace(&b);
        assert!(trace.iter().all(|&o| o <= plan.peak_buffer_bytes));
        assert!(plan.peak_buffer_bytes <= arch.sram_weight_bytes as u64);
    }

    #[test]
    fn plan_text_round_trips() {
        let arch = ArchConfig::default();
        let b = ib(48, 192, 16);
        let plan = plan_fusion(&b, &arch, arch.sram_weight_bytes as u64).unwrap();
        assert_eq!(FusionPlan::parse(&plan.to_string(), &b, &arch, arch.sram_weight_bytes as u64).unwrap(), plan);
        assert!(FusionPlan::parse("tile_x=3", &b, &arch, 1 << 20).is_err());
    }

    #[test]
    fn network_without_bottlenecks_saves_nothing() {
        let arch = ArchConfig::default();
        let mut g = NetworkGraph::new("plain");
        g.add(LayerSpec::pw("a", 16, 16, 8, 8), crate::workload::BlockTag::CNN);
        let r = network_fusion_analysis(&g, &arch).unwrap();
        assert!(r.ibs.is_empty());
        assert_eq!(r.dram_bytes_saved(), 0);
        assert_eq!(r.energy_saved_pj(), 0.0);
        assert_eq!(r.ib_dram_share(), 0.0);
    }

    #[test]
    fn fused_bottlenecks_move_no_intermediate() {
        let arch = ArchConfig::default();
        let net = build_edgenext_s(256, &EDGENEXT_S_CHANNELS).unwrap().fuse_normalization();
        let r = network_fusion_analysis(&net, &arch).unwrap();
        assert!(r.feasible() > 0);
        assert_eq!(r.unfused.total.macs, r.fused.total.macs);
        for ibr in &r.ibs {
            if ibr.plan.is_some() {
                assert!(ibr.fused_dram_bytes <= ibr.unfused_dram_bytes);
            }
        }
        let tiny = network_fusion_analysis_with(&net, &arch, &FusionSearch { sram_budget: 1, ..FusionSearch::defaults(&arch) }).unwrap();
        assert_eq!(tiny.feasible(), 0);
        assert_eq!(tiny.dram_bytes_saved(), 0);
    }
}
