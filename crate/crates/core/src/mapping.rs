//! Spatial dataflows, temporal loop orders and the mapping-space enumerator.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::arch::{ArchConfig, Level};
use crate::error::{Error, Result};
use crate::math::{ceil_div, tile_candidates};
use crate::workload::{layer_macs, Dim, Dims, LayerSpec, Operand};

/// Spatial unrollings supported by the array. `C` always sits on the rows
/// (the adder-tree axis); the second dimension spans the columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dataflow {
    /// Baseline output-pixel by input-channel unrolling.
    OxC,
    /// Input channels reduced down columns, output channels across them.
    CK,
    /// Depthwise: channels on rows, kernel columns propagated along the row.
    CFx,
}

/// How partial products combine inside the array.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArrayMode {
    AdderTree,
    RowPropagate,
}

impl Dataflow {
    pub const ALL: [Dataflow; 3] = [Dataflow::OxC, Dataflow::CK, Dataflow::CFx];

    pub fn name(self) -> &'static str {
        match self {
            Dataflow::OxC => "OX|C",
            Dataflow::CK => "C|K",
            Dataflow::CFx => "C|FX",
        }
    }

    pub fn parse(s: &str) -> Option<Dataflow> {
        Dataflow::ALL.into_iter().find(|d| d.name().eq_ignore_ascii_case(s))
    }

    pub fn mode(self) -> ArrayMode {
        match self {
            Dataflow::CFx => ArrayMode::RowPropagate,
            _ => ArrayMode::AdderTree,
        }
    }

    /// Dimension spread across the array columns.
    pub fn col_dim(self) -> Dim {
        match self {
            Dataflow::OxC => Dim::OX,
            Dataflow::CK => Dim::K,
            Dataflow::CFx => Dim::FX,
        }
    }

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(c: u32) -> Option<Dataflow> {
        Dataflow::ALL.get(c as usize).copied()
    }

    /// Whether this unrolling can execute `layer` at all.
    pub fn supports(self, layer: &LayerSpec, arch: &ArchConfig) -> bool {
        if !layer.kind.is_mac() {
            return false;
        }
        match self {
            Dataflow::OxC | Dataflow::CK => true,
            Dataflow::CFx => layer.is_dw() && layer.dims.fx <= arch.cols,
        }
    }
}

impl fmt::Display for Dataflow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Spatial unrolling in the `X|Y` notation: `x` and `y` are `(dim, factor)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SpatialMapping {
    pub dataflow: Dataflow,
    pub x: (Dim, u32),
    pub y: (Dim, u32),
}

impl SpatialMapping {
    pub fn new(dataflow: Dataflow, layer: &LayerSpec, arch: &ArchConfig) -> Self {
        let d = &layer.dims;
        let rows = d.c.min(arch.rows);
        let cols = match dataflow {
            Dataflow::OxC => {
                let px = if d.fx == 1 && d.fy == 1 { d.ox * d.oy } else { d.ox };
                px.min(arch.cols)
            }
            Dataflow::CK => d.k.min(arch.cols),
            Dataflow::CFx => d.fx.min(arch.cols),
        };
        let col = (dataflow.col_dim(), cols);
        let row = (Dim::C, rows);
        match dataflow {
            Dataflow::OxC => SpatialMapping { dataflow, x: col, y: row },
            _ => SpatialMapping { dataflow, x: row, y: col },
        }
    }

    pub fn mode(&self) -> ArrayMode {
        self.dataflow.mode()
    }
}

/// Pick the spatial unrolling for a MAC layer. A non-reconfigurable array
/// only offers the baseline `OX|C` unrolling.
pub fn select_dataflow(layer: &LayerSpec, arch: &ArchConfig, reconfigurable: bool) -> Result<SpatialMapping> {
    if !layer.kind.is_mac() {
        return Err(Error::NotMappable(format!("{} layer `{}` has no MACs", layer.kind.name(), layer.name)));
    }
    let df = if !reconfigurable {
        Dataflow::OxC
    } else if layer.is_dw() && Dataflow::CFx.supports(layer, arch) {
        Dataflow::CFx
    } else {
        Dataflow::CK
    };
    Ok(SpatialMapping::new(df, layer, arch))
}

pub fn check_spatial(layer: &LayerSpec, sm: &SpatialMapping, arch: &ArchConfig) -> Result<()> {
    if !layer.kind.is_mac() {
        return Err(Error::NotMappable(format!("layer `{}` has no MACs", layer.name)));
    }
    if !sm.dataflow.supports(layer, arch) {
        return Err(Error::IllegalMapping(format!("{} cannot execute {} layer `{}`", sm.dataflow, layer.kind.name(), layer.name)));
    }
    let exp = SpatialMapping::new(sm.dataflow, layer, arch);
    if exp != *sm {
        return Err(Error::IllegalMapping(format!(
            "unrolling {}:{} {}:{} does not match {} on this layer",
            sm.x.0, sm.x.1, sm.y.0, sm.y.1, sm.dataflow
        )));
    }
    Ok(())
}

/// Array waves needed to execute one tile with loop extents `e`.
pub fn tile_waves(layer: &LayerSpec, df: Dataflow, e: &Dims, arch: &ArchConfig) -> u64 {
    let r = arch.rows as u64;
    let c = arch.cols as u64;
    let g = |n: u32| n as u64;
    let dw = layer.is_dw();
    // Pointwise-style layers flatten the pixel plane onto the OX lanes.
    let flat = e.fx == 1 && e.fy == 1;
    let cgroups = ceil_div(g(e.c), r);
    match (df, dw) {
        (Dataflow::OxC, false) => {
            let px = if flat { ceil_div(g(e.ox) * g(e.oy), c) } else { ceil_div(g(e.ox), c) * g(e.oy) };
            g(e.b) * g(e.k) * g(e.fx) * g(e.fy) * px * cgroups
        }
        (Dataflow::OxC, true) => {
            let px = if flat { ceil_div(g(e.ox) * g(e.oy), c) } else { ceil_div(g(e.ox), c) * g(e.oy) };
            g(e.b) * g(e.c) * g(e.fx) * g(e.fy) * px
        }
        (Dataflow::CK, false) => g(e.b) * g(e.ox) * g(e.oy) * g(e.fx) * g(e.fy) * cgroups * ceil_div(g(e.k), c),
        (Dataflow::CK, true) => g(e.b) * g(e.ox) * g(e.oy) * g(e.fx) * g(e.fy) * cgroups,
        (Dataflow::CFx, _) => g(e.b) * g(e.ox) * g(e.oy) * g(e.fy) * cgroups * ceil_div(g(e.fx), c),
    }
}

/// Full loop bounds of `layer` as seen by the nest.
pub fn loop_dims(layer: &LayerSpec) -> Dims {
    let mut d = layer.dims;
    d.k = layer.loop_bound(Dim::K);
    d
}

/// Fraction of PE-cycles doing useful MACs, from the spatial unrolling alone.
pub fn spatial_utilization(layer: &LayerSpec, sm: &SpatialMapping, arch: &ArchConfig) -> f64 {
    let waves = tile_waves(layer, sm.dataflow, &loop_dims(layer), arch);
    if waves == 0 {
        return 0.0;
    }
    layer_macs(layer) as f64 / (waves as f64 * arch.pes() as f64)
}

/// Home memory of each operand. Tiles always pass through the array-side
/// memories (input memory, weight registers, output register file).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Homes {
    pub input: Level,
    pub weight: Level,
    pub output: Level,
}

impl Default for Homes {
    fn default() -> Self {
        Homes { input: Level::Sram, weight: Level::Dram, output: Level::Sram }
    }
}

impl Homes {
    pub fn get(&self, op: Operand) -> Level {
        match op {
            Operand::I => self.input,
            Operand::W => self.weight,
            Operand::O => self.output,
        }
    }

    /// Array-side level holding each operand's tile.
    pub fn tile_level(op: Operand) -> Level {
        match op {
            Operand::I => Level::InputMem,
            Operand::W => Level::WeightReg,
            Operand::O => Level::OutputRf,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Loop {
    pub dim: Dim,
    /// Extent of the tile below this loop; the loop trips `ceil(bound / tile)`.
    pub tile: u32,
}

/// Temporal mapping: the seven loops ordered outermost first. The innermost
/// tile runs as one array COMPUTE. Loops at positions `rf_scope..` belong to
/// the output block kept resident in the register file.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TemporalMapping {
    pub loops: Vec<Loop>,
    pub rf_scope: usize,
    pub homes: Homes,
}

impl TemporalMapping {
    pub fn position(&self, d: Dim) -> usize {
        self.loops.iter().position(|l| l.dim == d).unwrap_or(usize::MAX)
    }

    pub fn tile(&self, d: Dim) -> u32 {
        self.loops.iter().find(|l| l.dim == d).map(|l| l.tile).unwrap_or(1)
    }

    pub fn tiles(&self) -> Dims {
        let mut t = Dims::default();
        for l in &self.loops {
            t.set(l.dim, l.tile);
        }
        t
    }

    pub fn trips(&self, layer: &LayerSpec, d: Dim) -> u32 {
        layer.loop_bound(d).div_ceil(self.tile(d).max(1))
    }

    /// Extent of the register-file output block along `d`.
    pub fn block_extent(&self, layer: &LayerSpec, d: Dim) -> u32 {
        if self.position(d) >= self.rf_scope {
            layer.loop_bound(d)
        } else {
            self.tile(d)
        }
    }

    pub fn block_entries(&self, layer: &LayerSpec) -> u64 {
        [Dim::B, Dim::K, Dim::C, Dim::OX, Dim::OY]
            .into_iter()
            .filter(|&d| relevant(layer, Operand::O, d))
            .map(|d| self.block_extent(layer, d) as u64)
            .product()
    }
}

/// Whether loop dimension `d` indexes operand `op`.
pub fn relevant(layer: &LayerSpec, op: Operand, d: Dim) -> bool {
    let dw = layer.is_dw();
    match op {
        Operand::I => d != Dim::K,
        Operand::W => match d {
            Dim::K | Dim::C | Dim::FX | Dim::FY => true,
            Dim::B => layer.dynamic_weights,
            _ => false,
        },
        Operand::O => match d {
            Dim::B | Dim::OX | Dim::OY => true,
            Dim::K => !dw,
            Dim::C => dw,
            _ => false,
        },
    }
}

/// Reduction dimensions (accumulated into an output).
pub fn is_reduction(layer: &LayerSpec, d: Dim) -> bool {
    matches!(d, Dim::FX | Dim::FY) || (d == Dim::C && !layer.is_dw())
}

/// Input window extent along one axis for an output extent `o` and kernel extent `f`.
pub fn window(o: u32, f: u32, stride: u32) -> u32 {
    (o - 1) * stride + f
}

/// Clipped input range `(lo, len)` along one axis for outputs `o0..o0+on`
/// and kernel taps `f0..f0+fnn`. `len` is 0 when the window lies in padding.
pub fn clipped_window(o0: u32, on: u32, f0: u32, fnn: u32, stride: u32, pad: u32, extent: u32) -> (u32, u32) {
    let start = (o0 * stride + f0) as i64 - pad as i64;
    let end = start + window(on, fnn, stride) as i64;
    let lo = start.max(0);
    let hi = end.min(extent as i64);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as u32, (hi - lo) as u32)
    }
}

/// `(origin, extent)` of every tile of a loop with bound `n` split by `tile`.
pub fn tile_list(n: u32, tile: u32) -> impl Iterator<Item = (u32, u32)> {
    (0..n.div_ceil(tile)).map(move |i| (i * tile, tile.min(n - i * tile)))
}

/// Tile fetches of operand `op` over the whole nest and how many times each
/// distinct tile is fetched.
pub fn fetch_stats(layer: &LayerSpec, tm: &TemporalMapping, op: Operand) -> (u64, u64) {
    let trips: Vec<u64> = tm.loops.iter().map(|l| tm.trips(layer, l.dim) as u64).collect();
    let j = (0..tm.loops.len()).rev().find(|&p| trips[p] > 1 && relevant(layer, op, tm.loops[p].dim));
    match j {
        None => (1, 1),
        Some(j) => {
            let fetches = trips[..=j].iter().product();
            let refetch = (0..=j).filter(|&p| !relevant(layer, op, tm.loops[p].dim)).map(|p| trips[p]).product();
            (fetches, refetch)
        }
    }
}

/// Visits of each register-file output block. Above one, partial sums spill.
pub fn output_revisits(layer: &LayerSpec, tm: &TemporalMapping) -> u64 {
    let trips = |p: usize| tm.trips(layer, tm.loops[p].dim) as u64;
    let j = (0..tm.rf_scope.min(tm.loops.len()))
        .rev()
        .find(|&p| trips(p) > 1 && relevant(layer, Operand::O, tm.loops[p].dim));
    match j {
        None => 1,
        Some(j) => (0..j).filter(|&p| is_reduction(layer, tm.loops[p].dim)).map(trips).product(),
    }
}

/// Input rows (along X) staged for each OX tile when the input streams from
/// DRAM, as `(lo, len)` covering every kernel column.
pub fn slab_rows(layer: &LayerSpec, tm: &TemporalMapping) -> Vec<(u32, u32)> {
    let (px, _) = layer.padding();
    let ix = layer.input_shape().x;
    tile_list(layer.dims.ox, tm.tile(Dim::OX))
        .map(|(o0, on)| clipped_window(o0, on, 0, layer.dims.fx, layer.stride.0, px, ix))
        .collect()
}

/// Bytes of one staged input row: every Y position and channel of one X.
pub fn slab_row_bytes(layer: &LayerSpec) -> u64 {
    let s = layer.input_shape();
    s.y as u64 * s.c as u64
}

pub fn max_slab_bytes(layer: &LayerSpec, tm: &TemporalMapping) -> u64 {
    if tm.homes.input != Level::Dram {
        return 0;
    }
    slab_rows(layer, tm).iter().map(|r| r.1 as u64).max().unwrap_or(0) * slab_row_bytes(layer)
}

/// SRAM bytes of LayerNorm parameter tables (gamma and beta, i16 each) the
/// post-processing engine reads.
pub fn norm_param_bytes(layer: &LayerSpec) -> u64 {
    let n = layer.post_ops.iter().filter(|p| matches!(p, crate::workload::PostOp::LayerNorm(_))).count() as u64;
    4 * n * layer.out_channels() as u64
}

/// Whether DRAM-resident weights are kept whole in the SRAM weight region.
/// Only weights fetched more than once are worth caching; the rest stream
/// straight into the weight registers.
pub fn weight_cached(layer: &LayerSpec, tm: &TemporalMapping, arch: &ArchConfig) -> bool {
    tm.homes.weight == Level::Dram
        && fetch_stats(layer, tm, Operand::W).1 > 1
        && layer.weight_elements() + 2 * max_slab_bytes(layer, tm) + norm_param_bytes(layer) <= arch.sram_weight_bytes as u64
}

/// Bytes of one input tile with extents `e` (halo included, unclipped).
pub fn input_tile_bytes(layer: &LayerSpec, e: &Dims) -> u64 {
    let wx = window(e.ox, e.fx, layer.stride.0) as u64;
    let wy = window(e.oy, e.fy, layer.stride.1) as u64;
    e.b as u64 * wx * wy * e.c as u64
}

/// Weight-register slots each PE needs for one tile with extents `e`.
pub fn weight_slots(layer: &LayerSpec, df: Dataflow, e: &Dims, arch: &ArchConfig) -> u64 {
    let r = arch.rows as u64;
    let c = arch.cols as u64;
    let g = |n: u32| n as u64;
    let f = g(e.fx) * g(e.fy);
    match (df, layer.is_dw()) {
        (Dataflow::OxC, false) => g(e.k) * ceil_div(g(e.c), r) * f,
        (Dataflow::OxC, true) => g(e.c) * f,
        (Dataflow::CK, false) => ceil_div(g(e.k), c) * ceil_div(g(e.c), r) * f,
        (Dataflow::CK, true) => ceil_div(g(e.c), r) * f,
        (Dataflow::CFx, _) => ceil_div(g(e.c), r) * g(e.fy) * ceil_div(g(e.fx), c),
    }
}

/// One write-back piece of an output block laid out `[x][y][k]`: a sub-box
/// `(x0, xn, y0, yn, k0, kn)` of at most `capacity` entries. Pieces are
/// whole-`y` row groups when a row fits, single-`x` column runs when a
/// channel vector fits, channel chunks of one pixel otherwise.
pub type Piece = (u32, u32, u32, u32, u32, u32);

pub fn writeback_pieces(bx: u32, by: u32, bk: u32, capacity: u32) -> Vec<Piece> {
    let mut out = Vec::new();
    if bk > capacity {
        for x in 0..bx {
            for y in 0..by {
                for (k0, kn) in tile_list(bk, capacity) {
                    out.push((x, 1, y, 1, k0, kn));
                }
            }
        }
    } else if by * bk > capacity {
        let py = capacity / bk;
        for x in 0..bx {
            for (y0, yn) in tile_list(by, py) {
                out.push((x, 1, y0, yn, 0, bk));
            }
        }
    } else {
        let px = capacity / (by * bk);
        for (x0, xn) in tile_list(bx, px) {
            out.push((x0, xn, 0, by, 0, bk));
        }
    }
    out
}

/// Full legality check of a (spatial, temporal) pair.
pub fn check_temporal(layer: &LayerSpec, sm: &SpatialMapping, tm: &TemporalMapping, arch: &ArchConfig) -> Result<()> {
    let bad = |m: String| Err(Error::IllegalMapping(format!("layer `{}`: {m}", layer.name)));
    if tm.loops.len() != 7 {
        return bad(format!("expected 7 loops, got {}", tm.loops.len()));
    }
    for d in Dim::ALL {
        let n = tm.loops.iter().filter(|l| l.dim == d).count();
        if n != 1 {
            return bad(format!("dimension {d} appears {n} times"));
        }
        let t = tm.tile(d);
        if t == 0 || t > layer.loop_bound(d) {
            return bad(format!("tile {t} of {d} outside 1..={}", layer.loop_bound(d)));
        }
    }
    if tm.tile(Dim::B) != 1 {
        return bad("batch tile must be 1".into());
    }
    if sm.dataflow == Dataflow::CFx && tm.tile(Dim::FX) != layer.dims.fx {
        return bad("C|FX needs the whole kernel row in one tile".into());
    }
    if tm.rf_scope > 7 {
        return bad(format!("rf scope {} past the innermost loop", tm.rf_scope));
    }
    for (op, lv) in [(Operand::I, tm.homes.input), (Operand::W, tm.homes.weight), (Operand::O, tm.homes.output)] {
        if !matches!(lv, Level::Sram | Level::Dram) {
            return bad(format!("operand {} cannot live in {lv}", op.name()));
        }
    }
    let e = tm.tiles();
    let ib = input_tile_bytes(layer, &e);
    if ib > arch.input_tile_bytes() as u64 {
        return bad(format!("input tile {ib} B exceeds {} B", arch.input_tile_bytes()));
    }
    let ws = weight_slots(layer, sm.dataflow, &e, arch);
    if ws > arch.weight_tile_slots() as u64 {
        return bad(format!("{ws} weight slots per PE exceed {}", arch.weight_tile_slots()));
    }
    let be = tm.block_entries(layer);
    if be > arch.rf_block_entries() as u64 {
        return bad(format!("output block of {be} entries exceeds {}", arch.rf_block_entries()));
    }
    let revisits = output_revisits(layer, tm);
    if revisits > 1 {
        if tm.homes.output == Level::Dram {
            return bad("DRAM-resident outputs are written once; partial sums cannot spill".into());
        }
        let psum = 4 * layer.output_shape().elements();
        if psum > arch.sram_activation_bytes() as u64 {
            return bad(format!("partial-sum spill buffer of {psum} B exceeds SRAM"));
        }
    }
    if tm.homes.input == Level::Dram {
        // Staging rows follow (batch, X tile); any other tiled loop outside
        // them would stage the same rows twice.
        let trip = |d: Dim| tm.trips(layer, d) > 1;
        let stage = [Dim::B, Dim::OX].into_iter().filter(|&d| trip(d)).map(|d| tm.position(d)).max();
        if let Some(j) = stage {
            if tm.loops[..j].iter().any(|l| !matches!(l.dim, Dim::B | Dim::OX) && trip(l.dim)) {
                return bad("DRAM-resident inputs stream in X order; X must be the outermost tiled loop".into());
            }
        }
        if trip(Dim::B) && trip(Dim::OX) && tm.position(Dim::B) > tm.position(Dim::OX) {
            return bad("DRAM-resident inputs stream one batch at a time; B must sit outside X".into());
        }
        if 2 * max_slab_bytes(layer, tm) + norm_param_bytes(layer) > arch.sram_weight_bytes as u64 {
            return bad("input staging rows exceed the SRAM staging region".into());
        }
    }
    if tm.homes.weight == Level::Dram && !weight_cached(layer, tm, arch) && fetch_stats(layer, tm, Operand::W).1 > 1 {
        return bad("weights too large to cache must be fetched from DRAM once".into());
    }
    if layer.has_fused_statistics() {
        let oc = layer.out_channels();
        if oc > arch.line_buffer_entries {
            return Err(Error::LineBufferOverflow { needed: oc as usize, capacity: arch.line_buffer_entries as usize });
        }
        let cd = out_channel_dim(layer);
        if tm.block_extent(layer, cd) != layer.loop_bound(cd) {
            return bad("statistics need the full channel vector inside the register-file block".into());
        }
    }
    Ok(())
}

/// Loop dimension carrying the output channels.
pub fn out_channel_dim(layer: &LayerSpec) -> Dim {
    if layer.is_dw() {
        Dim::C
    } else {
        Dim::K
    }
}

fn largest_fit(bound: u32, step: u32, ok: impl Fn(u32) -> bool) -> u32 {
    let mut cands: Vec<u32> = tile_candidates(bound).into_iter().filter(|t| t % step == 0 || *t == bound).collect();
    cands.reverse();
    cands.into_iter().find(|&t| ok(t)).unwrap_or(1)
}

/// Canonical pixelwise schedule: one output pixel at a time, the full
/// output-channel vector resident so statistics can be fused.
pub fn pixelwise_order(layer: &LayerSpec, sm: &SpatialMapping, arch: &ArchConfig, homes: Homes) -> Result<TemporalMapping> {
    check_spatial(layer, sm, arch)?;
    let oc = layer.out_channels();
    if oc > arch.line_buffer_entries {
        return Err(Error::LineBufferOverflow { needed: oc as usize, capacity: arch.line_buffer_entries as usize });
    }
    let d = loop_dims(layer);
    let cd = out_channel_dim(layer);
    let mut e = Dims { b: 1, k: 1, c: 1, ox: 1, oy: 1, fx: d.fx, fy: d.fy };
    let fits = |e: &Dims| {
        weight_slots(layer, sm.dataflow, e, arch) <= arch.weight_tile_slots() as u64
            && input_tile_bytes(layer, e) <= arch.input_tile_bytes() as u64
    };
    if !fits(&e) {
        e.fy = largest_fit(d.fy, 1, |t| fits(&Dims { fy: t, ..e }));
        if sm.dataflow != Dataflow::CFx {
            e.fx = largest_fit(d.fx, 1, |t| fits(&Dims { fx: t, ..e }));
        }
    }
    if layer.is_dw() {
        e.c = largest_fit(d.c, arch.rows, |t| fits(&Dims { c: t, ..e }));
    } else {
        e.k = largest_fit(d.k, arch.cols, |t| fits(&Dims { k: t, ..e }));
        e.c = largest_fit(d.c, arch.rows, |t| fits(&Dims { c: t, ..e }));
    }
    let mut order = alloc::vec![Dim::B, Dim::OX, Dim::OY, cd];
    for x in [Dim::C, Dim::K, Dim::FY, Dim::FX] {
        if !order.contains(&x) {
            order.push(x);
        }
    }
    let loops = order.iter().map(|&dim| Loop { dim, tile: e.get(dim) }).collect();
    let tm = TemporalMapping { loops, rf_scope: 3, homes };
    check_temporal(layer, sm, &tm, arch)?;
    Ok(tm)
}

fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Tile-size candidates per dimension, largest first.
fn dim_candidates(layer: &LayerSpec, sm: &SpatialMapping, arch: &ArchConfig, d: Dim) -> Vec<u32> {
    let n = layer.loop_bound(d);
    let mut c: Vec<u32> = match d {
        Dim::B => alloc::vec![1],
        Dim::FX if sm.dataflow == Dataflow::CFx => alloc::vec![n],
        Dim::C => tile_candidates(n).into_iter().filter(|t| t % arch.rows == 0 || *t == n).collect(),
        Dim::K if sm.dataflow == Dataflow::CK => {
            tile_candidates(n).into_iter().filter(|t| t % arch.cols == 0 || *t == n).collect()
        }
        _ => tile_candidates(n),
    };
    c.reverse();
    c
}

/// Enumerate legal temporal mappings, at most `budget` of them. Only loops
/// tripping more than once are permuted; single-trip loops sit innermost in
/// canonical order. Layers with fused statistics only get orderings whose
/// register-file block spans the whole channel vector.
pub fn enumerate_temporal_mappings(
    layer: &LayerSpec,
    sm: &SpatialMapping,
    arch: &ArchConfig,
    homes: Homes,
    budget: usize,
) -> Result<Vec<TemporalMapping>> {
    check_spatial(layer, sm, arch)?;
    if layer.has_fused_statistics() && layer.out_channels() > arch.line_buffer_entries {
        return Err(Error::LineBufferOverflow {
            needed: layer.out_channels() as usize,
            capacity: arch.line_buffer_entries as usize,
        });
    }
    let cands: Vec<Vec<u32>> = Dim::ALL.iter().map(|&d| dim_candidates(layer, sm, arch, d)).collect();
    let mut out: Vec<TemporalMapping> = Vec::new();
    let mut idx = [0usize; 7];
    let stats = layer.has_fused_statistics();
    let cd = out_channel_dim(layer);
    'combos: loop {
        let mut e = Dims::default();
        for (i, &d) in Dim::ALL.iter().enumerate() {
            e.set(d, cands[i][idx[i]]);
        }
        let cheap_ok = input_tile_bytes(layer, &e) <= arch.input_tile_bytes() as u64
            && weight_slots(layer, sm.dataflow, &e, arch) <= arch.weight_tile_slots() as u64;
        if cheap_ok {
            let multi: Vec<Dim> = Dim::ALL.iter().copied().filter(|&d| layer.loop_bound(d).div_ceil(e.get(d)) > 1).collect();
            let single: Vec<Dim> = Dim::ALL.iter().copied().filter(|d| !multi.contains(d)).collect();
            let mut perm: Vec<usize> = (0..multi.len()).collect();
            loop {
                let order: Vec<Dim> = perm.iter().map(|&i| multi[i]).chain(single.iter().copied()).collect();
                let rf_scope = if stats && multi.contains(&cd) {
                    order.iter().position(|&d| d == cd).unwrap()
                } else {
                    7
                };
                let tm = TemporalMapping {
                    loops: order.iter().map(|&dim| Loop { dim, tile: e.get(dim) }).collect(),
                    rf_scope,
                    homes,
                };
                if check_temporal(layer, sm, &tm, arch).is_ok() {
                    out.push(tm);
                    if out.len() >= budget {
                        break 'combos;
                    }
                }
                if !next_permutation(&mut perm) {
                    break;
                }
            }
        }
        // Odometer advance, last dimension fastest.
        let mut i = 7;
        loop {
            if i == 0 {
                break 'combos;
            }
            i -= 1;
            idx[i] += 1;
            if idx[i] < cands[i].len() {
                break;
            }
            idx[i] = 0;
        }
    }
    if out.is_empty() {
        return Err(Error::Infeasible(format!("no temporal mapping of `{}` fits on {}", layer.name, sm.dataflow)));
    }
    Ok(out)
}

/// A complete layer mapping with its one-line text form.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayerMapping {
    pub spatial: SpatialMapping,
    pub temporal: TemporalMapping,
}

impl fmt::Display for LayerMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.spatial;
        write!(f, "dataflow={} x={}:{} y={}:{} loops=", s.dataflow, s.x.0, s.x.1, s.y.0, s.y.1)?;
        for (i, l) in self.temporal.loops.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}:{}", l.dim, l.tile)?;
        }
        let h = &self.temporal.homes;
        write!(f, " rf={} I={} W={} O={}", self.temporal.rf_scope, h.input, h.weight, h.output)
    }
}

impl FromStr for LayerMapping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: String| Error::IllegalMapping(format!("cannot parse mapping: {m}"));
        let mut dataflow = None;
        let mut x = None;
        let mut y = None;
        let mut loops = None;
        let mut rf = None;
        let mut homes = Homes::default();
        let pair = |v: &str| -> Result<(Dim, u32)> {
            let (d, n) = v.split_once(':').ok_or_else(|| bad(format!("expected DIM:N, got `{v}`")))?;
            let d = Dim::parse(d).ok_or_else(|| bad(format!("unknown dimension `{d}`")))?;
            let n = n.parse().map_err(|_| bad(format!("bad number `{n}`")))?;
            Ok((d, n))
        };
        let level = |v: &str| Level::parse(v).ok_or_else(|| bad(format!("unknown level `{v}`")));
        for tok in s.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad(format!("expected key=value, got `{tok}`")))?;
            match k {
                "dataflow" => dataflow = Some(Dataflow::parse(v).ok_or_else(|| bad(format!("unknown dataflow `{v}`")))?),
                "x" => x = Some(pair(v)?),
                "y" => y = Some(pair(v)?),
                "loops" => {
                    let mut ls = Vec::new();
                    for p in v.split(',') {
                        let (dim, tile) = pair(p)?;
                        ls.push(Loop { dim, tile });
                    }
                    loops = Some(ls);
                }
                "rf" => rf = Some(v.parse().map_err(|_| bad(format!("bad rf scope `{v}`")))?),
                "I" => homes.input = level(v)?,
                "W" => homes.weight = level(v)?,
                "O" => homes.output = level(v)?,
                _ => return Err(bad(format!("unknown key `{k}`"))),
            }
        }
        let missing = |n: &str| bad(format!("missing `{n}`"));
        let loops: Vec<Loop> = loops.ok_or_else(|| missing("loops"))?;
        Ok(LayerMapping {
            spatial: SpatialMapping {
                dataflow: dataflow.ok_or_else(|| missing("dataflow"))?,
                x: x.ok_or_else(|| missing("x"))?,
                y: y.ok_or_else(|| missing("y"))?,
            },
            temporal: TemporalMapping { rf_scope: rf.unwrap_or(loops.len()), loops, homes },
        })
    }
}
