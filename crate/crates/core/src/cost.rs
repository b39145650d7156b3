//! Analytical latency / energy model and mapping search.
//!
//! Access counts follow tile-reuse arithmetic over the loop nest: an operand
//! tile is fetched once per visit at its level, outputs revisited by outer
//! reduction loops spill 32-bit partial sums. Cycles are the busiest of the
//! array, the SRAM port, the DRAM bus and the post-processing engine once the
//! first tile is on chip; that one-time onload and the final drain are
//! reported separately.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::arch::{ArchConfig, Level};
use crate::error::{Error, Result};
use crate::mapping::{
    check_spatial, check_temporal, clipped_window, enumerate_temporal_mappings, fetch_stats, loop_dims,
    norm_param_bytes, output_revisits, relevant, slab_row_bytes, slab_rows, tile_waves, weight_cached, writeback_pieces,
    Dataflow, Homes, LayerMapping, SpatialMapping, TemporalMapping,
};
use crate::math::{beats, ceil_div, tile_classes};
use crate::workload::{layer_macs, Dim, Dims, LayerKind, LayerSpec, NetworkGraph, Operand, PostOp, Requant};

const RD: usize = 0;
const WR: usize = 1;

/// Bytes moved per (level, operand, direction). Register-file traffic counts
/// four bytes per 32-bit entry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Traffic {
    pub bytes: [[[u64; 2]; 3]; 5],
}

impl Traffic {
    pub fn read(&mut self, lv: Level, op: Operand, n: u64) {
        self.bytes[lv.index()][op.index()][RD] += n;
    }

    pub fn write(&mut self, lv: Level, op: Operand, n: u64) {
        self.bytes[lv.index()][op.index()][WR] += n;
    }

    pub fn reads(&self, lv: Level, op: Operand) -> u64 {
        self.bytes[lv.index()][op.index()][RD]
    }

    pub fn writes(&self, lv: Level, op: Operand) -> u64 {
        self.bytes[lv.index()][op.index()][WR]
    }

    /// Reads plus writes of every operand at `lv`.
    pub fn level(&self, lv: Level) -> u64 {
        if lv == Level::Writeback {
            return 0;
        }
        self.bytes[lv.index()].iter().map(|o| o[RD] + o[WR]).sum()
    }

    pub fn add(&mut self, o: &Traffic) {
        for l in 0..5 {
            for op in 0..3 {
                for d in 0..2 {
                    self.bytes[l][op][d] += o.bytes[l][op][d];
                }
            }
        }
    }
}

/// Busy cycles per execution unit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UnitBusy {
    pub array: u64,
    pub port: u64,
    pub bus: u64,
    pub ppe: u64,
}

impl UnitBusy {
    fn add(&mut self, o: &UnitBusy) {
        self.array += o.array;
        self.port += o.port;
        self.bus += o.bus;
        self.ppe += o.ppe;
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostBreakdown {
    pub macs: u64,
    pub ideal_cycles: u64,
    pub spatial_underutilization_cycles: u64,
    pub temporal_stall_cycles: u64,
    /// First tile brought on chip before the array can start.
    pub onload_cycles: u64,
    /// Post-processing and write-back of the last output block.
    pub offload_cycles: u64,
    pub busy: UnitBusy,
    pub traffic: Traffic,
    pub energy_pj: [f64; 5],
    pub mac_energy_pj: f64,
}

impl CostBreakdown {
    pub fn total_cycles(&self) -> u64 {
        self.ideal_cycles + self.spatial_underutilization_cycles + self.temporal_stall_cycles
    }

    /// Total plus the one-time onload and drain.
    pub fn latency_cycles(&self) -> u64 {
        self.total_cycles() + self.onload_cycles + self.offload_cycles
    }

    pub fn total_energy_pj(&self) -> f64 {
        self.energy_pj.iter().sum::<f64>() + self.mac_energy_pj
    }

    pub fn energy_at(&self, lv: Level) -> f64 {
        if lv == Level::Writeback {
            0.0
        } else {
            self.energy_pj[lv.index()]
        }
    }

    pub fn dram_bytes(&self) -> u64 {
        self.traffic.level(Level::Dram)
    }

    /// Energy-delay product in pJ x cycles.
    pub fn edp(&self) -> f64 {
        self.total_energy_pj() * self.total_cycles() as f64
    }

    pub fn utilization(&self, arch: &ArchConfig) -> f64 {
        let t = self.total_cycles();
        if t == 0 {
            0.0
        } else {
            self.macs as f64 / (t as f64 * arch.pes() as f64)
        }
    }

    pub fn accumulate(&mut self, o: &CostBreakdown) {
        self.macs += o.macs;
        self.ideal_cycles += o.ideal_cycles;
        self.spatial_underutilization_cycles += o.spatial_underutilization_cycles;
        self.temporal_stall_cycles += o.temporal_stall_cycles;
        self.onload_cycles += o.onload_cycles;
        self.offload_cycles += o.offload_cycles;
        self.busy.add(&o.busy);
        self.traffic.add(&o.traffic);
        for i in 0..5 {
            self.energy_pj[i] += o.energy_pj[i];
        }
        self.mac_energy_pj += o.mac_energy_pj;
    }

    /// Fill in cycle categories and energies from raw counts.
    pub(crate) fn finish(
        macs: u64,
        waves: u64,
        steady: UnitBusy,
        onload: u64,
        offload: u64,
        busy: UnitBusy,
        traffic: Traffic,
        arch: &ArchConfig,
    ) -> CostBreakdown {
        let ideal = ceil_div(macs, arch.pes() as u64);
        let total = waves.max(steady.port).max(steady.bus).max(steady.ppe);
        let e = &arch.energy;
        let mut energy_pj = [0.0; 5];
        for lv in Level::ENERGY {
            energy_pj[lv.index()] = traffic.level(lv) as f64 * e.per_byte(lv);
        }
        CostBreakdown {
            macs,
            ideal_cycles: ideal,
            spatial_underutilization_cycles: waves - ideal,
            temporal_stall_cycles: total - waves,
            onload_cycles: onload,
            offload_cycles: offload,
            busy,
            traffic,
            energy_pj,
            mac_energy_pj: macs as f64 * e.mac,
        }
    }
}

/// Input-memory bytes read by the array for one tile.
pub(crate) fn tile_input_reads(layer: &LayerSpec, df: Dataflow, e: &Dims, arch: &ArchConfig) -> u64 {
    let g = |n: u32| n as u64;
    let px = g(e.b) * g(e.ox) * g(e.oy);
    match (df, layer.is_dw()) {
        (Dataflow::CK, false) => px * g(e.fx) * g(e.fy) * g(e.c) * ceil_div(g(e.k), arch.cols as u64),
        (Dataflow::CK, true) => px * g(e.fx) * g(e.fy) * g(e.c),
        (Dataflow::OxC, false) => px * g(e.fx) * g(e.fy) * g(e.c) * g(e.k),
        (Dataflow::OxC, true) => px * g(e.fx) * g(e.fy) * g(e.c),
        (Dataflow::CFx, _) => px * g(e.fy) * g(e.c) * g(layer.stride.0) * ceil_div(g(e.fx), arch.cols as u64),
    }
}

/// MACs of one tile.
pub(crate) fn tile_macs(layer: &LayerSpec, e: &Dims) -> u64 {
    let g = |n: u32| n as u64;
    let m = g(e.b) * g(e.c) * g(e.ox) * g(e.oy) * g(e.fx) * g(e.fy);
    if layer.is_dw() {
        m
    } else {
        m * g(e.k)
    }
}

/// Weight bytes of one tile.
pub(crate) fn weight_tile_bytes(layer: &LayerSpec, e: &Dims) -> u64 {
    let g = |n: u32| n as u64;
    let b = if layer.dynamic_weights { g(e.b) } else { 1 };
    let f = g(e.c) * g(e.fx) * g(e.fy) * b;
    if layer.is_dw() {
        f
    } else {
        f * g(e.k)
    }
}

/// `(extent, count)` classes of every tile of `d`, or the full bound when
/// `full` is set.
fn classes(layer: &LayerSpec, tm: &TemporalMapping, d: Dim, full: bool) -> Vec<(u32, u64)> {
    let n = layer.loop_bound(d);
    if full {
        return vec![(n, 1)];
    }
    tile_classes(n, tm.tile(d)).into_iter().filter(|c| c.1 > 0).map(|(e, c)| (e, c as u64)).collect()
}

/// Sum `f(extents) * count` over the Cartesian product of per-dimension classes.
fn sum_classes(per: &[Vec<(u32, u64)>; 7], mut f: impl FnMut(&Dims, u64)) {
    let mut idx = [0usize; 7];
    loop {
        let mut e = Dims::default();
        let mut cnt = 1u64;
        for (i, d) in Dim::ALL.iter().enumerate() {
            let (x, c) = per[i][idx[i]];
            e.set(*d, x);
            cnt *= c;
        }
        f(&e, cnt);
        let mut i = 7;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            idx[i] += 1;
            if idx[i] < per[i].len() {
                break;
            }
            idx[i] = 0;
        }
    }
}

/// Histogram of clipped input window extents along one axis over all
/// (output tile, kernel tile) pairs.
fn window_hist(layer: &LayerSpec, tm: &TemporalMapping, x_axis: bool) -> Vec<(u32, u64)> {
    let (od, fd) = if x_axis { (Dim::OX, Dim::FX) } else { (Dim::OY, Dim::FY) };
    let (px, py) = layer.padding();
    let ins = layer.input_shape();
    let (s, p, ext) = if x_axis { (layer.stride.0, px, ins.x) } else { (layer.stride.1, py, ins.y) };
    let mut h: Vec<(u32, u64)> = Vec::new();
    for (o0, on) in crate::mapping::tile_list(layer.loop_bound(od), tm.tile(od)) {
        for (f0, fnn) in crate::mapping::tile_list(layer.loop_bound(fd), tm.tile(fd)) {
            let (_, len) = clipped_window(o0, on, f0, fnn, s, p, ext);
            match h.iter_mut().find(|x| x.0 == len) {
                Some(x) => x.1 += 1,
                None => h.push((len, 1)),
            }
        }
    }
    h
}

/// Cost of a MAC layer under a legal mapping.
pub fn evaluate_layer(layer: &LayerSpec, sm: &SpatialMapping, tm: &TemporalMapping, arch: &ArchConfig) -> Result<CostBreakdown> {
    check_spatial(layer, sm, arch)?;
    check_temporal(layer, sm, tm, arch)?;
    let df = sm.dataflow;
    let port = arch.sram_port_bits;
    let bus = arch.dram_bus_bits;
    let lanes = arch.ppe_lanes as u64;
    let d = loop_dims(layer);
    let mut tr = Traffic::default();

    // Per-step work over the whole nest.
    let all: [Vec<(u32, u64)>; 7] = core::array::from_fn(|i| classes(layer, tm, Dim::ALL[i], false));
    let mut waves = 0u64;
    let mut in_reads = 0u64;
    let mut macs = 0u64;
    sum_classes(&all, |e, c| {
        waves += tile_waves(layer, df, e, arch) * c;
        in_reads += tile_input_reads(layer, df, e, arch) * c;
        macs += tile_macs(layer, e) * c;
    });
    debug_assert_eq!(macs, layer_macs(layer));

    // Input tiles.
    let (_, r_i) = fetch_stats(layer, tm, Operand::I);
    let hx = window_hist(layer, tm, true);
    let hy = window_hist(layer, tm, false);
    let cc = classes(layer, tm, Dim::C, false);
    let b = d.b as u64;
    let mut i_bytes = 0u64;
    let mut i_beats = 0u64;
    for &(c, nc) in &cc {
        for &(x, nx) in &hx {
            for &(y, ny) in &hy {
                let n = nc * nx * ny * b * r_i;
                let bytes = c as u64 * x as u64 * y as u64;
                i_bytes += bytes * n;
                i_beats += beats(bytes, port) * n;
            }
        }
    }
    tr.write(Level::InputMem, Operand::I, i_bytes);
    tr.read(Level::InputMem, Operand::I, in_reads);
    tr.read(Level::Sram, Operand::I, i_bytes);
    let (px, _) = layer.padding();
    let first_i = {
        let (_, wx) = clipped_window(0, tm.tile(Dim::OX), 0, tm.tile(Dim::FX), layer.stride.0, px, layer.input_shape().x);
        let (_, wy) = clipped_window(
            0,
            tm.tile(Dim::OY),
            0,
            tm.tile(Dim::FY),
            layer.stride.1,
            layer.padding().1,
            layer.input_shape().y,
        );
        beats(wx as u64 * wy as u64 * tm.tile(Dim::C) as u64, port)
    };
    let mut slab_bus = 0u64;
    let mut slab_port = 0u64;
    let mut first_slab = 0u64;
    if tm.homes.input == Level::Dram {
        let rb = slab_row_bytes(layer);
        let rows = slab_rows(layer, tm);
        let mut prev: Option<(u32, u32)> = None;
        for (i, &(lo, len)) in rows.iter().enumerate() {
            let (new, ov) = match prev {
                Some((plo, plen)) => {
                    let ov = (plo + plen).saturating_sub(lo).min(len);
                    (len - ov, ov)
                }
                None => (len, 0),
            };
            tr.read(Level::Dram, Operand::I, new as u64 * rb * b);
            tr.write(Level::Sram, Operand::I, new as u64 * rb * b);
            tr.read(Level::Sram, Operand::I, ov as u64 * rb * b);
            tr.write(Level::Sram, Operand::I, ov as u64 * rb * b);
            slab_bus += beats(new as u64 * rb, bus) * b;
            slab_port += beats(ov as u64 * rb, port) * b;
            if i == 0 {
                first_slab = beats(new as u64 * rb, bus);
            }
            prev = Some((lo, len));
        }
    }

    // Weight tiles.
    let (_, r_w) = fetch_stats(layer, tm, Operand::W);
    let wdims: [Vec<(u32, u64)>; 7] = core::array::from_fn(|i| {
        let dd = Dim::ALL[i];
        if relevant(layer, Operand::W, dd) {
            classes(layer, tm, dd, false)
        } else {
            vec![(1, 1)]
        }
    });
    let mut w_beats_distinct = 0u64;
    let mut w_bus_distinct = 0u64;
    let mut w_distinct_bytes = 0u64;
    sum_classes(&wdims, |e, c| {
        let bytes = weight_tile_bytes(layer, e);
        w_distinct_bytes += bytes * c;
        w_beats_distinct += beats(bytes, port) * c;
        w_bus_distinct += beats(bytes, bus) * c;
    });
    debug_assert_eq!(w_distinct_bytes, layer.weight_elements());
    let w_fill = w_distinct_bytes * r_w;
    tr.write(Level::WeightReg, Operand::W, w_fill);
    tr.read(Level::WeightReg, Operand::W, macs);
    let first_w_tile = weight_tile_bytes(layer, &tm.tiles());
    let (mut w_port, mut w_bus, mut first_w, mut first_w_bus) = (0, 0, 0, 0);
    match (tm.homes.weight, weight_cached(layer, tm, arch)) {
        (Level::Dram, true) => {
            tr.read(Level::Dram, Operand::W, w_distinct_bytes);
            tr.write(Level::Sram, Operand::W, w_distinct_bytes);
            tr.read(Level::Sram, Operand::W, w_fill);
            w_bus = w_bus_distinct;
            w_port = w_beats_distinct * r_w;
            first_w_bus = beats(first_w_tile, bus);
            first_w = beats(first_w_tile, port);
        }
        (Level::Dram, false) => {
            // Streamed once, straight into the weight registers.
            tr.read(Level::Dram, Operand::W, w_fill);
            w_bus = w_bus_distinct * r_w;
            first_w_bus = beats(first_w_tile, bus);
        }
        _ => {
            tr.read(Level::Sram, Operand::W, w_fill);
            w_port = w_beats_distinct * r_w;
            first_w = beats(first_w_tile, port);
        }
    }

    // Output blocks.
    let o_elems = layer.output_shape().elements();
    let ob = layer.output_bytes_per_element() as u64;
    let red_trips: u64 = Dim::ALL
        .iter()
        .filter(|&&x| crate::mapping::is_reduction(layer, x))
        .map(|&x| tm.trips(layer, x) as u64)
        .product();
    let revisits = output_revisits(layer, tm);
    let ent = 4 * o_elems;
    tr.write(Level::OutputRf, Operand::O, ent * red_trips + ent * (revisits - 1));
    tr.read(Level::OutputRf, Operand::O, ent * (red_trips - 1) + ent * (revisits - 1) + ent);
    tr.write(Level::Sram, Operand::O, ent * (revisits - 1));
    tr.read(Level::Sram, Operand::O, ent * (revisits - 1));
    tr.write(tm.homes.output, Operand::O, o_elems * ob);
    let odims: [Vec<(u32, u64)>; 7] = core::array::from_fn(|i| {
        let dd = Dim::ALL[i];
        if relevant(layer, Operand::O, dd) {
            classes(layer, tm, dd, tm.position(dd) >= tm.rf_scope)
        } else {
            vec![(1, 1)]
        }
    });
    let mut store_beats = 0u64;
    let mut spill_beats = 0u64;
    let mut ppe = 0u64;
    let mut pieces = 0u64;
    let out_w = if tm.homes.output == Level::Dram { bus } else { port };
    let post = !layer.post_ops.is_empty();
    let lb = arch.line_buffer_entries;
    let mut last_piece = 0u64;
    sum_classes(&odims, |e, c| {
        let bk = if layer.is_dw() { e.c } else { e.k };
        let n = e.b as u64 * e.ox as u64 * e.oy as u64 * bk as u64;
        spill_beats += 2 * (revisits - 1) * beats(n * 4, port) * c;
        if post {
            for (_, xn, _, yn, _, kn) in writeback_pieces(e.ox, e.oy, bk, lb) {
                let m = xn as u64 * yn as u64 * kn as u64;
                store_beats += beats(m * ob, out_w) * c * e.b as u64;
                ppe += ceil_div(m, lanes) * c * e.b as u64;
                pieces += c * e.b as u64;
            }
        } else {
            store_beats += beats(n * ob, out_w) * c;
        }
    });
    // The post-processor holds LayerNorm tables after their first read.
    if pieces > 0 {
        tr.read(Level::Sram, Operand::W, norm_param_bytes(layer));
    }
    let last = {
        let mut ext = [1u32; 3];
        for (i, dd) in [Dim::OX, Dim::OY, crate::mapping::out_channel_dim(layer)].into_iter().enumerate() {
            let bound = layer.loop_bound(dd);
            let t = tm.block_extent(layer, dd);
            ext[i] = bound - (bound.div_ceil(t) - 1) * t;
        }
        if post {
            let (_, xn, _, yn, _, kn) = *writeback_pieces(ext[0], ext[1], ext[2], lb).last().unwrap();
            last_piece = xn as u64 * yn as u64 * kn as u64;
        }
        let bb = layer.loop_bound(Dim::B);
        let tb = tm.block_extent(layer, Dim::B);
        ext.iter().map(|&v| v as u64).product::<u64>() * (bb - (bb.div_ceil(tb) - 1) * tb) as u64
    };
    let last_ppe = ceil_div(last_piece, lanes);
    let last_store = beats(if post { last_piece } else { last } * ob, out_w);

    let mut busy = UnitBusy { array: waves, port: i_beats + w_port + spill_beats + slab_port, bus: slab_bus + w_bus, ppe };
    if tm.homes.output == Level::Dram {
        busy.bus += store_beats;
    } else {
        busy.port += store_beats;
    }
    let onload = first_slab + first_i.max(first_w_bus + first_w);
    let offload = last_ppe + last_store;
    let mut steady = busy;
    steady.port = steady.port.saturating_sub(first_i + first_w);
    steady.bus = steady.bus.saturating_sub(first_slab + first_w_bus);
    steady.ppe -= last_ppe;
    if tm.homes.output == Level::Dram {
        steady.bus = steady.bus.saturating_sub(last_store);
    } else {
        steady.port = steady.port.saturating_sub(last_store);
    }
    Ok(CostBreakdown::finish(macs, waves, steady, onload, offload, busy, tr, arch))
}

/// Pixels per register-file chunk of a vector layer.
pub fn vector_chunk_pixels(layer: &LayerSpec, arch: &ArchConfig) -> Result<u64> {
    let c = layer.dims.c as u64;
    if layer.has_fused_statistics() && layer.dims.c > arch.line_buffer_entries {
        return Err(Error::LineBufferOverflow { needed: layer.dims.c as usize, capacity: arch.line_buffer_entries as usize });
    }
    if c > arch.rf_block_entries() as u64 {
        return Err(Error::Infeasible(format!("`{}`: {} channels exceed a register-file block", layer.name, c)));
    }
    let px = layer.dims.b as u64 * layer.dims.ox as u64 * layer.dims.oy as u64;
    Ok((arch.rf_block_entries() as u64 / c).min(px).max(1))
}

/// Number of streamed operands of a vector layer.
pub fn vector_operands(layer: &LayerSpec) -> usize {
    if layer.kind == LayerKind::ElementwiseAdd {
        2
    } else {
        1
    }
}

/// Cost of a vector layer streaming through the register file and the
/// post-processing engine. `inputs` holds the home of each operand.
pub fn evaluate_vector(layer: &LayerSpec, inputs: &[Level], output: Level, arch: &ArchConfig) -> Result<CostBreakdown> {
    if layer.kind.is_mac() {
        return Err(Error::NotMappable(format!("`{}` is a MAC layer", layer.name)));
    }
    if inputs.len() != vector_operands(layer) {
        return Err(Error::Shape(format!("`{}` expects {} inputs, got {}", layer.name, vector_operands(layer), inputs.len())));
    }
    let chunk = vector_chunk_pixels(layer, arch)?;
    let c = layer.dims.c as u64;
    let px = layer.dims.b as u64 * layer.dims.ox as u64 * layer.dims.oy as u64;
    let n = px * c;
    let port = arch.sram_port_bits;
    let bus = arch.dram_bus_bits;
    let lanes = arch.ppe_lanes as u64;
    let mut tr = Traffic::default();
    let mut busy = UnitBusy::default();
    let full = px / chunk;
    let rem = px % chunk;
    let per_chunk = |f: &dyn Fn(u64) -> u64| f(chunk * c) * full + if rem > 0 { f(rem * c) } else { 0 };
    let mut first = 0u64;
    for (i, &h) in inputs.iter().enumerate() {
        if h == Level::Dram {
            tr.read(Level::Dram, Operand::I, n);
            tr.write(Level::Sram, Operand::I, n);
            busy.bus += per_chunk(&|e| beats(e, bus));
            if i == 0 {
                first += beats(chunk * c, bus);
            }
        }
        tr.read(Level::Sram, Operand::I, n);
        tr.write(Level::OutputRf, Operand::I, 4 * n);
        if i > 0 {
            tr.read(Level::OutputRf, Operand::I, 4 * n);
        }
        busy.port += per_chunk(&|e| beats(e, port));
        if i == 0 {
            first += beats(chunk * c, port);
        }
    }
    tr.read(Level::OutputRf, Operand::O, 4 * n);
    tr.write(output, Operand::O, n);
    let out_w = if output == Level::Dram { bus } else { port };
    let lb = arch.line_buffer_entries;
    // Write-back pieces of one chunk: (ppe cycles, store beats, pieces, last piece entries).
    let drain = |pn: u64| {
        let mut a = (0u64, 0u64, 0u64, 0u64);
        for (_, _, _, yn, _, kn) in writeback_pieces(1, pn as u32, c as u32, lb) {
            let m = yn as u64 * kn as u64;
            a.0 += ceil_div(m, lanes);
            a.1 += beats(m, out_w);
            a.2 += 1;
            a.3 = m;
        }
        a
    };
    let (fp, fs, fc, _) = drain(chunk);
    let (rp, rs, rc, _) = if rem > 0 { drain(rem) } else { (0, 0, 0, 0) };
    busy.ppe = fp * full + rp;
    let store = fs * full + rs;
    if fc * full + rc > 0 {
        tr.read(Level::Sram, Operand::W, norm_param_bytes(layer));
    }
    if output == Level::Dram {
        busy.bus += store;
    } else {
        busy.port += store;
    }
    let last = drain(if rem > 0 { rem } else { chunk }).3;
    let offload = ceil_div(last, lanes) + beats(last, out_w);
    let mut steady = busy;
    steady.ppe -= ceil_div(last, lanes);
    if output == Level::Dram {
        steady.bus = steady.bus.saturating_sub(beats(last, out_w));
    } else {
        steady.port = steady.port.saturating_sub(beats(last, out_w));
    }
    if inputs[0] == Level::Dram {
        steady.bus = steady.bus.saturating_sub(beats(chunk * c, bus));
    }
    steady.port = steady.port.saturating_sub(beats(chunk * c, port));
    Ok(CostBreakdown::finish(0, 0, steady, first, offload, busy, tr, arch))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Energy,
    Latency,
    Edp,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Energy => "energy",
            Objective::Latency => "latency",
            Objective::Edp => "edp",
        }
    }

    pub fn parse(s: &str) -> Option<Objective> {
        [Objective::Energy, Objective::Latency, Objective::Edp].into_iter().find(|o| o.name().eq_ignore_ascii_case(s))
    }

    pub fn score(self, c: &CostBreakdown) -> f64 {
        match self {
            Objective::Energy => c.total_energy_pj(),
            Objective::Latency => c.total_cycles() as f64,
            Objective::Edp => c.edp(),
        }
    }
}

/// Best (mapping, cost) for `layer` over the given dataflows. Ties break on
/// the serialized mapping text.
pub fn search_mapping_in(
    layer: &LayerSpec,
    arch: &ArchConfig,
    objective: Objective,
    budget: usize,
    homes: Homes,
    dataflows: &[Dataflow],
) -> Result<(LayerMapping, CostBreakdown)> {
    if !layer.kind.is_mac() {
        return Err(Error::NotMappable(format!("`{}` has no MACs", layer.name)));
    }
    let mut best: Option<(f64, String, LayerMapping, CostBreakdown)> = None;
    let mut last_err = None;
    for &df in dataflows {
        if !df.supports(layer, arch) {
            continue;
        }
        let sm = SpatialMapping::new(df, layer, arch);
        let tms = match enumerate_temporal_mappings(layer, &sm, arch, homes, budget) {
            Ok(t) => t,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        for tm in tms {
            let cost = evaluate_layer(layer, &sm, &tm, arch)?;
            let score = objective.score(&cost);
            let m = LayerMapping { spatial: sm, temporal: tm };
            let better = match &best {
                None => true,
                Some((s, txt, _, _)) => match score.partial_cmp(s).unwrap_or(Ordering::Equal) {
                    Ordering::Less => true,
                    Ordering::Greater => false,
                    Ordering::Equal => format!("{m}") < *txt,
                },
            };
            if better {
                best = Some((score, format!("{m}"), m, cost));
            }
        }
    }
    match best {
        Some((_, _, m, c)) => Ok((m, c)),
        None => Err(last_err.unwrap_or_else(|| Error::Infeasible(format!("no dataflow can execute `{}`", layer.name)))),
    }
}

/// Best mapping over every supported dataflow with SRAM-resident activations
/// and DRAM-resident weights.
pub fn search_mapping(layer: &LayerSpec, arch: &ArchConfig, objective: Objective, budget: usize) -> Result<(LayerMapping, CostBreakdown)> {
    search_mapping_in(layer, arch, objective, budget, Homes::default(), &Dataflow::ALL)
}

/// Which dataflows a network mapping pass may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataflowPolicy {
    /// Baseline array: `OX|C` only.
    Fixed,
    /// Reconfigurable array: `C|K`, plus `C|FX` for depthwise layers.
    Reconfigurable,
}

impl DataflowPolicy {
    pub fn dataflows(self, layer: &LayerSpec) -> Vec<Dataflow> {
        match self {
            DataflowPolicy::Fixed => vec![Dataflow::OxC],
            DataflowPolicy::Reconfigurable if layer.is_dw() => vec![Dataflow::CFx, Dataflow::CK],
            DataflowPolicy::Reconfigurable => vec![Dataflow::CK],
        }
    }
}

/// Where each node's operands live.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeHomes {
    /// One home per streamed input operand.
    pub inputs: Vec<Level>,
    pub weight: Level,
    pub output: Level,
}

impl NodeHomes {
    pub fn mac_homes(&self) -> Homes {
        Homes { input: self.inputs[0], weight: self.weight, output: self.output }
    }
}

/// Greedy SRAM residency: a node's output stays in the activation part of
/// the SRAM when it fits next to every tensor still awaiting a consumer,
/// otherwise it goes to DRAM. Network inputs and outputs live in DRAM.
/// Intermediates of fused pairs (`fused` expand nodes) never materialize.
pub fn place_tensors(net: &NetworkGraph, arch: &ArchConfig, fused: &[usize]) -> Vec<NodeHomes> {
    let n = net.nodes.len();
    let mut last_use = vec![0usize; n];
    let mut has_consumer = vec![false; n];
    for e in &net.edges {
        last_use[e.from] = last_use[e.from].max(e.to);
        has_consumer[e.from] = true;
    }
    let budget = arch.sram_activation_bytes() as u64;
    let mut out_home = vec![Level::Dram; n];
    let mut resident: Vec<(usize, u64)> = Vec::new();
    for i in 0..n {
        resident.retain(|&(p, _)| last_use[p] >= i);
        let l = &net.nodes[i].layer;
        if fused.contains(&i) {
            out_home[i] = Level::Sram;
            continue;
        }
        let bytes = l.output_shape().elements() * l.output_bytes_per_element() as u64;
        let used: u64 = resident.iter().map(|r| r.1).sum();
        if has_consumer[i] && used + bytes <= budget {
            out_home[i] = Level::Sram;
            resident.push((i, bytes));
        }
    }
    (0..n)
        .map(|i| {
            let l = &net.nodes[i].layer;
            let slots = if l.kind.is_mac() { 1 } else { vector_operands(l) };
            let ins: Vec<&crate::workload::Edge> = net.producers(i).filter(|e| e.operand == Operand::I).collect();
            let inputs = if ins.is_empty() {
                vec![Level::Dram; slots]
            } else if slots == ins.len() {
                ins.iter().map(|e| out_home[e.from]).collect()
            } else {
                let h = if ins.iter().any(|e| out_home[e.from] == Level::Dram) { Level::Dram } else { Level::Sram };
                vec![h; slots]
            };
            let weight = if l.dynamic_weights {
                let ws: Vec<&crate::workload::Edge> = net.producers(i).filter(|e| e.operand == Operand::W).collect();
                if ws.iter().any(|e| out_home[e.from] == Level::Dram) {
                    Level::Dram
                } else {
                    Level::Sram
                }
            } else {
                Level::Dram
            };
            NodeHomes { inputs, weight, output: out_home[i] }
        })
        .collect()
}

/// One row of a network evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub node: usize,
    pub name: String,
    pub mapping: Option<LayerMapping>,
    /// Set when the node runs as part of a fused pair (cost sits on the expand row).
    pub fused_with: Option<usize>,
    pub cost: CostBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkCost {
    pub layers: Vec<LayerCost>,
    pub total: CostBreakdown,
    pub homes: Vec<NodeHomes>,
}

/// Sum per-layer costs over a mapped network. `fusion` lists planned
/// inverted-bottleneck pairs; their combined cost replaces the two layers.
pub fn evaluate_network(
    net: &NetworkGraph,
    mappings: &[Option<LayerMapping>],
    arch: &ArchConfig,
    fusion: &[crate::fusion::FusedPair],
) -> Result<NetworkCost> {
    if mappings.len() != net.nodes.len() {
        return Err(Error::Shape(format!("{} mappings for {} nodes", mappings.len(), net.nodes.len())));
    }
    let fused_expand: Vec<usize> = fusion.iter().map(|f| f.pair.expand).collect();
    let homes = place_tensors(net, arch, &fused_expand);
    let mut layers = Vec::new();
    let mut total = CostBreakdown::default();
    for (i, node) in net.nodes.iter().enumerate() {
        let l = &node.layer;
        let h = &homes[i];
        if let Some(f) = fusion.iter().find(|f| f.pair.expand == i || f.pair.project == i) {
            let cost = if f.pair.expand == i {
                crate::fusion::fused_cost(&f.ib, &f.plan, h.inputs[0], homes[f.pair.project].output, arch)?
            } else {
                CostBreakdown::default()
            };
            total.accumulate(&cost);
            let other = if f.pair.expand == i { f.pair.project } else { f.pair.expand };
            layers.push(LayerCost { node: i, name: l.name.clone(), mapping: None, fused_with: Some(other), cost });
            continue;
        }
        let (mapping, cost) = if l.kind.is_mac() {
            let m = mappings[i].clone().ok_or_else(|| Error::Unmapped(l.name.clone()))?;
            let mut tm = m.temporal.clone();
            tm.homes = h.mac_homes();
            let c = evaluate_layer(l, &m.spatial, &tm, arch)?;
            (Some(LayerMapping { spatial: m.spatial, temporal: tm }), c)
        } else {
            (None, evaluate_vector(l, &h.inputs, h.output, arch)?)
        };
        total.accumulate(&cost);
        layers.push(LayerCost { node: i, name: l.name.clone(), mapping, fused_with: None, cost });
    }
    Ok(NetworkCost { layers, total, homes })
}

/// Search a mapping for every MAC layer given the network's tensor placement.
pub fn map_network(
    net: &NetworkGraph,
    arch: &ArchConfig,
    policy: DataflowPolicy,
    objective: Objective,
    budget: usize,
    fused_expand: &[usize],
) -> Result<Vec<Option<LayerMapping>>> {
    let homes = place_tensors(net, arch, fused_expand);
    let mut out = Vec::with_capacity(net.nodes.len());
    for (i, node) in net.nodes.iter().enumerate() {
        let l = &node.layer;
        if !l.kind.is_mac() {
            out.push(None);
            continue;
        }
        let (m, _) = search_mapping_in(l, arch, objective, budget, homes[i].mac_homes(), &policy.dataflows(l))?;
        out.push(Some(m));
    }
    Ok(out)
}

/// Saturating pointwise layer used to pin peak efficiency. It narrows its
/// output to INT8 like every deployed layer.
pub fn peak_reference_layer() -> LayerSpec {
    LayerSpec::pw("peak.pw", 64, 64, 32, 32).with_post_ops(vec![PostOp::Requantize(Requant { mult: 1, shift: 8 })])
}

/// Homes for the peak reference: operands pre-staged on chip.
pub const PEAK_HOMES: Homes = Homes { input: Level::Sram, weight: Level::Sram, output: Level::Sram };

/// Best energy mapping of the peak layer and its cost.
pub fn peak_layer_cost(arch: &ArchConfig) -> Result<(LayerMapping, CostBreakdown)> {
    search_mapping_in(&peak_reference_layer(), arch, Objective::Energy, 20_000, PEAK_HOMES, &[Dataflow::CK])
}

/// Modeled efficiency in TOPS/W (two ops per MAC).
pub fn tops_per_watt(c: &CostBreakdown) -> f64 {
    2.0 * c.macs as f64 / c.total_energy_pj()
}

/// Scale the on-chip energies (fixed ratios) so the peak reference layer
/// reaches `tops_per_w`. DRAM cost is untouched.
pub fn calibrate_energy(arch: &ArchConfig, tops_per_w: f64) -> Result<ArchConfig> {
    if !(tops_per_w.is_finite() && tops_per_w > 0.0) {
        return Err(Error::Calibration(format!("target {tops_per_w} TOPS/W is not reachable with non-negative energies")));
    }
    let (_, c) = peak_layer_cost(arch)?;
    let dram = c.energy_at(Level::Dram);
    let on_chip = c.total_energy_pj() - dram;
    let target = 2.0 * c.macs as f64 / tops_per_w;
    let s = (target - dram) / on_chip;
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::Calibration(format!(
            "target {tops_per_w} TOPS/W needs {target:.1} pJ but DRAM alone costs {dram:.1} pJ"
        )));
    }
    let mut out = *arch;
    out.energy = arch.energy.scale_on_chip(s);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::EnergyTable;
    use crate::mapping::{select_dataflow, Loop};

    fn arch() -> ArchConfig {
        ArchConfig::default()
    }

    #[test]
    fn single_wave_saturation() {
        let a = arch();
        let l = LayerSpec::pw("pw", 16, 16, 1, 1);
        let sm = select_dataflow(&l, &a, true).unwrap();
        let tm = enumerate_temporal_mappings(&l, &sm, &a, Homes::default(), 10).unwrap().remove(0);
        let c = evaluate_layer(&l, &sm, &tm, &a).unwrap();
        assert_eq!(c.ideal_cycles, 1);
        assert_eq!(c.spatial_underutilization_cycles, 0);
        assert_eq!(c.temporal_stall_cycles, 0);
        assert_eq!(c.total_cycles(), 1);
    }

    #[test]
    fn mac_only_energy_is_linear() {
        let mut a = arch();
        a.energy = EnergyTable { mac: 0.7, weight_reg: 0.0, input_mem: 0.0, output_rf: 0.0, sram: 0.0, dram: 0.0 };
        let l = LayerSpec::conv("c", 20, 24, 3, 9, 7);
        let (_, c) = search_mapping(&l, &a, Objective::Latency, 200).unwrap();
        assert!((c.total_energy_pj() - layer_macs(&l) as f64 * 0.7).abs() < 1e-6);
    }

    #[test]
    fn totals_decompose() {
        let a = arch();
        let l = LayerSpec::dw("dw", 96, 3, 28, 28);
        let (_, c) = search_mapping(&l, &a, Objective::Edp, 500).unwrap();
        assert_eq!(c.total_cycles(), c.ideal_cycles + c.spatial_underutilization_cycles + c.temporal_stall_cycles);
        assert!((c.edp() - c.total_energy_pj() * c.total_cycles() as f64).abs() < 1e-3 * c.edp());
    }

    #[test]
    fn depthwise_picks_row_propagation_for_latency() {
        let a = arch();
        let l = LayerSpec::dw("dw", 96, 3, 28, 28);
        let (m, _) = search_mapping(&l, &a, Objective::Latency, 2000).unwrap();
        assert_eq!(m.spatial.dataflow, Dataflow::CFx);
    }

    #[test]
    fn budget_one_returns_the_single_candidate() {
        let a = arch();
        let l = LayerSpec::pw("pw", 32, 32, 8, 8);
        let (m, _) = search_mapping_in(&l, &a, Objective::Energy, 1, Homes::default(), &[Dataflow::CK]).unwrap();
        let sm = SpatialMapping::new(Dataflow::CK, &l, &a);
        let only = enumerate_temporal_mappings(&l, &sm, &a, Homes::default(), 1).unwrap();
        assert_eq!(m.temporal, only[0]);
    }

    #[test]
    fn spill_traffic_counts_partial_sums() {
        let a = arch();
        let l = LayerSpec::pw("pw", 64, 32, 4, 4);
        let sm = SpatialMapping::new(Dataflow::CK, &l, &a);
        // C outermost, pixels inside: every output block is revisited 4 times.
        let loops = [(Dim::C, 16), (Dim::OX, 1), (Dim::OY, 4), (Dim::K, 32), (Dim::B, 1), (Dim::FX, 1), (Dim::FY, 1)]
            .into_iter()
            .map(|(dim, tile)| Loop { dim, tile })
            .collect();
        let tm = TemporalMapping { loops, rf_scope: 7, homes: Homes::default() };
        let c = evaluate_layer(&l, &sm, &tm, &a).unwrap();
        let o = 4 * 4 * 32 * 4;
        assert_eq!(c.traffic.writes(Level::Sram, Operand::O), 3 * o + o);
        assert_eq!(c.traffic.reads(Level::Sram, Operand::O), 3 * o);
    }

    #[test]
    fn calibration_hits_target() {
        let a = calibrate_energy(&arch(), 1.39).unwrap();
        let (_, c) = peak_layer_cost(&a).unwrap();
        assert!((tops_per_watt(&c) - 1.39).abs() / 1.39 < 1e-3);
        assert_eq!(a.energy.dram, 100.0);
        assert!(calibrate_energy(&arch(), f64::INFINITY).is_err());
    }
}
