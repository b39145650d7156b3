//! Lowering of mapped layers to instruction streams, and helpers that stage
//! one layer's operands, run it and read the result back.
//!
//! Tensors sit in canonical layouts: activations `[b][x][y][c]`, weights
//! `[k][c][fy][fx]` (depthwise `[c][fy][fx]`, dynamic GeMM `[b][k][c]`),
//! partial sums as 32-bit `[b][x][y][k]`. Array-side memories are split in
//! two halves that successive tiles alternate between. A final pass slices
//! each fetch and spreads the slices over the computes it may overlap, so a
//! large, rarely changing tile streams in behind the tiles that precede it.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::arch::{ArchConfig, Level};
use crate::cost::{vector_chunk_pixels, vector_operands, NodeHomes};
use crate::error::{Error, Result};
use crate::fusion::{FusionPlan, InvertedBottleneck, StepKind};
use crate::golden::QTensor;
use crate::mapping::{
    check_spatial, check_temporal, clipped_window, is_reduction, max_slab_bytes, norm_param_bytes, output_revisits,
    slab_row_bytes, slab_rows, weight_cached, writeback_pieces, Dataflow, LayerMapping,
};
use crate::workload::{Dim, LayerKind, LayerSpec, Operand, PostOp, TensorShape};

use super::isa::{ComputeOp, Instr, PostProcOp, PpOp, Transfer};
use super::machine::{footprint, run_program, MemImage, RunResult};

/// A tensor's home: level and base byte address.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Loc {
    pub level: Level,
    pub addr: u32,
}

/// Addresses of everything one layer touches outside the array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placement {
    pub inputs: Vec<Loc>,
    /// Weights, or the second GeMM operand. Unused by vector layers.
    pub weight: Loc,
    pub output: Loc,
    /// SRAM address of each LayerNorm parameter table, in chain order.
    pub norm: Vec<u32>,
    /// Partial-sum spill buffer in SRAM.
    pub spill: u32,
    /// Weight cache in the SRAM weight region (cached layers only).
    pub wcache: u32,
    /// Input staging rows for DRAM-resident inputs.
    pub slabs: [u32; 2],
    /// Operand staging for DRAM-resident vector inputs.
    pub staging: u32,
}

fn align(v: u64, a: u64) -> u64 {
    v.div_ceil(a) * a
}

struct Region {
    next: u64,
    end: u64,
    what: &'static str,
}

impl Region {
    fn take(&mut self, bytes: u64, layer: &LayerSpec) -> Result<u32> {
        let at = self.next;
        self.next = align(at + bytes, 64);
        if at + bytes > self.end {
            return Err(Error::Infeasible(format!(
                "`{}`: {} needs {} B, {} B available",
                layer.name,
                self.what,
                at + bytes,
                self.end
            )));
        }
        Ok(at as u32)
    }
}

fn input_bytes(layer: &LayerSpec) -> u64 {
    layer.input_shape().elements()
}

fn output_bytes(layer: &LayerSpec) -> u64 {
    layer.output_shape().elements() * layer.output_bytes_per_element() as u64
}

/// Lay out one layer's operands. MAC layers need their mapping to size the
/// spill buffer, the weight cache and the input staging rows.
pub fn place_layer(layer: &LayerSpec, homes: &NodeHomes, mapping: Option<&LayerMapping>, arch: &ArchConfig) -> Result<Placement> {
    let want = if layer.kind.is_mac() { 1 } else { vector_operands(layer) };
    if homes.inputs.len() != want {
        return Err(Error::Shape(format!("`{}` takes {want} inputs, placement has {}", layer.name, homes.inputs.len())));
    }
    for &l in homes.inputs.iter().chain([&homes.weight, &homes.output]) {
        if !matches!(l, Level::Dram | Level::Sram) {
            return Err(Error::IllegalMapping(format!("`{}`: tensors live in DRAM or SRAM, not {l}", layer.name)));
        }
    }
    let mut act = Region { next: 0, end: arch.sram_activation_bytes() as u64, what: "resident activations" };
    let wbase = arch.sram_activation_bytes() as u64;
    let norm_bytes = norm_param_bytes(layer);
    let mut wreg = Region { next: wbase, end: arch.sram_bytes as u64 - norm_bytes, what: "weight region" };
    let mut dram = Region { next: 0, end: u32::MAX as u64, what: "DRAM" };
    let mut inputs = Vec::new();
    for &h in &homes.inputs {
        let r = if h == Level::Sram { &mut act } else { &mut dram };
        inputs.push(Loc { level: h, addr: r.take(input_bytes(layer), layer)? });
    }
    let wbytes = if layer.kind.is_mac() { layer.weight_elements() } else { 0 };
    let weight = match homes.weight {
        Level::Sram => Loc { level: Level::Sram, addr: act.take(wbytes, layer)? },
        _ => Loc { level: Level::Dram, addr: dram.take(wbytes, layer)? },
    };
    let output = match homes.output {
        Level::Sram => Loc { level: Level::Sram, addr: act.take(output_bytes(layer), layer)? },
        _ => Loc { level: Level::Dram, addr: dram.take(output_bytes(layer), layer)? },
    };
    let mut p = Placement { inputs, weight, output, norm: Vec::new(), spill: 0, wcache: 0, slabs: [0, 0], staging: 0 };
    if let Some(m) = mapping {
        let mut tm = m.temporal.clone();
        tm.homes = homes.mac_homes();
        if output_revisits(layer, &tm) > 1 {
            p.spill = act.take(4 * layer.output_shape().elements(), layer)?;
        }
        if weight_cached(layer, &tm, arch) {
            p.wcache = wreg.take(layer.weight_elements(), layer)?;
        }
        let slab = max_slab_bytes(layer, &tm);
        p.slabs = [wreg.take(slab, layer)?, wreg.take(slab, layer)?];
    } else if !layer.kind.is_mac() {
        let chunk = vector_chunk_pixels(layer, arch)? * layer.dims.c as u64;
        p.staging = wreg.take(2 * chunk * homes.inputs.len() as u64, layer)?;
    }
    let mut at = arch.sram_bytes - norm_bytes as u32;
    for op in &layer.post_ops {
        if matches!(op, PostOp::LayerNorm(_)) {
            p.norm.push(at);
            at += 4 * layer.out_channels();
        }
    }
    Ok(p)
}

/// Post-op chain in instruction form.
pub fn pp_ops(layer: &LayerSpec, norm: &[u32]) -> Result<Vec<PpOp>> {
    let mut tabs = norm.iter();
    layer
        .post_ops
        .iter()
        .map(|op| {
            Ok(match op {
                PostOp::Requantize(r) => PpOp::Requant { mult: r.mult, shift: r.shift },
                PostOp::Activation(a) => PpOp::Act(*a),
                PostOp::Softmax(s) => PpOp::Softmax { mult: s.mult, shift: s.shift },
                PostOp::LayerNorm(_) => PpOp::LayerNorm {
                    params: *tabs.next().ok_or_else(|| Error::Shape(format!("`{}`: no LayerNorm table placed", layer.name)))?,
                },
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn xfer(op: Operand, src: Level, sa: u64, dst: Level, da: u64, width: u8, counts: [u32; 4], ss: [u32; 3], ds: [u32; 3]) -> Transfer {
    Transfer {
        operand: op,
        src,
        dst,
        src_addr: sa as u32,
        dst_addr: da as u32,
        width,
        acc: false,
        counts,
        src_strides: ss,
        dst_strides: ds,
    }
}

/// Strides of a canonical `[b][x][y][c]` tensor for counts `(c, y, x, b)`.
fn act_strides(s: &TensorShape) -> [u32; 3] {
    [s.c, s.y * s.c, s.x * s.y * s.c]
}

fn act_offset(s: &TensorShape, b: u32, x: u32, y: u32, c: u32) -> u64 {
    (((b as u64 * s.x as u64 + x as u64) * s.y as u64 + y as u64) * s.c as u64) + c as u64
}

/// Output block resident in one register-file half, `[b][x][y][k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Block {
    b: (u32, u32),
    x: (u32, u32),
    y: (u32, u32),
    k: (u32, u32),
}

impl Block {
    fn entries(&self) -> u32 {
        self.b.1 * self.x.1 * self.y.1 * self.k.1
    }
}

/// Emits the store side shared by every lowering: spills, reloads and the
/// final post-process / write-back of an output block.
struct Drain<'a> {
    arch: &'a ArchConfig,
    out_shape: TensorShape,
    ops: Vec<PpOp>,
    width: u8,
    wb_half: u32,
}

impl Drain<'_> {
    /// Move a block between a register-file half and a 32-bit SRAM image.
    fn spill(&self, blk: &Block, rf: u32, sram: u32, reload: bool) -> Instr {
        let s = &self.out_shape;
        let counts = [blk.k.1, blk.y.1, blk.x.1, blk.b.1];
        let dense = Transfer::dense_strides(counts);
        let at = sram as u64 + 4 * act_offset(s, blk.b.0, blk.x.0, blk.y.0, blk.k.0);
        if reload {
            Instr::Load(xfer(Operand::O, Level::Sram, at, Level::OutputRf, rf as u64, 4, counts, act_strides(s), dense))
        } else {
            Instr::Store(xfer(Operand::O, Level::OutputRf, rf as u64, Level::Sram, at, 4, counts, dense, act_strides(s)))
        }
    }

    /// Final results of a block to their home.
    fn flush(&mut self, blk: &Block, rf: u32, dst: Loc, out: &mut Vec<Instr>) {
        let s = self.out_shape;
        let w = self.width as u64;
        if self.ops.is_empty() {
            let counts = [blk.k.1, blk.y.1, blk.x.1, blk.b.1];
            let at = dst.addr as u64 + w * act_offset(&s, blk.b.0, blk.x.0, blk.y.0, blk.k.0);
            out.push(Instr::Store(xfer(Operand::O, Level::OutputRf, rf as u64, dst.level, at, self.width, counts, Transfer::dense_strides(counts), act_strides(&s))));
            return;
        }
        let lb = self.arch.line_buffer_entries;
        let (bx, by, bk) = (blk.x.1, blk.y.1, blk.k.1);
        for bi in 0..blk.b.1 {
            for (x0, xn, y0, yn, k0, kn) in writeback_pieces(bx, by, bk, lb) {
                let src = rf + ((bi * bx + x0) * by + y0) * bk + k0;
                let wb = self.wb_half * lb;
                self.wb_half ^= 1;
                out.push(Instr::PostProc(PostProcOp {
                    src,
                    dst: wb,
                    len: kn,
                    count: xn * yn,
                    src_stride: bk,
                    dst_stride: kn,
                    ops: self.ops.clone(),
                }));
                let counts = [kn, yn, xn, 1];
                let at = dst.addr as u64 + w * act_offset(&s, blk.b.0 + bi, blk.x.0 + x0, blk.y.0 + y0, blk.k.0 + k0);
                out.push(Instr::Store(xfer(
                    Operand::O,
                    Level::Writeback,
                    wb as u64,
                    dst.level,
                    at,
                    self.width,
                    counts,
                    Transfer::dense_strides(counts),
                    act_strides(&s),
                )));
            }
        }
    }
}

/// Tile indices along each dimension, and the tile's origin and extent.
struct Nest<'a> {
    layer: &'a LayerSpec,
    tiles: [u32; 7],
    pos: [usize; 7],
    trips: [u32; 7],
}

impl Nest<'_> {
    fn span(&self, idx: &[u32; 7], d: Dim) -> (u32, u32) {
        let i = d.index();
        let o = idx[self.pos[i]] * self.tiles[i];
        (o, self.tiles[i].min(self.layer.loop_bound(d) - o))
    }
}

/// How far back a fetch may be hoisted, in instructions.
const HOIST_WINDOW: usize = 512;
/// Smallest fetch slice, in bytes moved.
const MIN_SLICE_BYTES: u64 = 256;

fn conflicts(a: &[(Level, u64, u64, bool)], b: &[(Level, u64, u64, bool)]) -> bool {
    a.iter().any(|&(la, lo, hi, wa)| b.iter().any(|&(lb, l2, h2, wb)| la == lb && lo < h2 && l2 < hi && (wa || wb)))
}

/// Element offset unit of one transfer side.
fn side_unit(l: Level, width: u8) -> u64 {
    if matches!(l, Level::OutputRf | Level::Writeback) {
        1
    } else {
        width as u64
    }
}

/// Cut a transfer into at most `parts` slices along its outermost dimension
/// that can hold them.
fn slice(t: &Transfer, parts: u32) -> Vec<Transfer> {
    let dim = (0..4).rev().find(|&d| t.counts[d] >= parts).unwrap_or_else(|| (0..4).max_by_key(|&d| t.counts[d]).unwrap());
    let n = t.counts[dim];
    let parts = parts.min(n);
    let stride = |s: &[u32; 3]| if dim == 0 { 1 } else { s[dim - 1] as u64 };
    let (su, du) = (side_unit(t.src, t.width), side_unit(t.dst, t.width));
    (0..parts)
        .map(|i| {
            let lo = n * i / parts;
            let hi = n * (i + 1) / parts;
            let mut p = *t;
            p.counts[dim] = hi - lo;
            p.src_addr = (t.src_addr as u64 + lo as u64 * stride(&t.src_strides) * su) as u32;
            p.dst_addr = (t.dst_addr as u64 + lo as u64 * stride(&t.dst_strides) * du) as u32;
            p
        })
        .collect()
}

/// Hoist every array-side or staging fetch as early as its hazards allow
/// and spread its slices over the computes in that window, one slice just
/// after each step's own fetches.
fn spread_fetches(program: Vec<Instr>) -> Vec<Instr> {
    let mut out: Vec<Instr> = Vec::with_capacity(program.len());
    for ins in program {
        let t = match ins {
            Instr::Load(t) if !matches!(t.dst, Level::OutputRf | Level::Writeback) => t,
            other => {
                out.push(other);
                continue;
            }
        };
        let fp = footprint(&ins);
        let floor = out.len().saturating_sub(HOIST_WINDOW);
        let mut e = out.len();
        while e > floor && !matches!(out[e - 1], Instr::Sync | Instr::Halt) && !conflicts(&fp, &footprint(&out[e - 1])) {
            e -= 1;
        }
        let computes: Vec<usize> = (e..out.len()).filter(|&i| matches!(out[i], Instr::Compute(_))).collect();
        let bytes = t.elements() * t.width as u64;
        if computes.is_empty() {
            out.push(ins);
            continue;
        }
        let parts = (computes.len() as u64).min(bytes / MIN_SLICE_BYTES).max(1) as u32;
        let slices = slice(&t, parts);
        // Each slice lands ahead of the drain bundled in front of its compute,
        // so it queues behind that step's fetches only. Later positions first
        // keep earlier indices valid.
        let step = computes.len() / slices.len();
        for (j, piece) in slices.into_iter().enumerate().rev() {
            let mut at = computes[j * step];
            while at > e && matches!(out[at - 1], Instr::PostProc(_) | Instr::Store(_)) {
                at -= 1;
            }
            out.insert(at, Instr::Load(piece));
        }
    }
    out
}

/// Lower a MAC layer under `mapping` (its temporal homes are ignored; the
/// placement decides where tensors live).
pub fn lower_layer(layer: &LayerSpec, mapping: &LayerMapping, place: &Placement, arch: &ArchConfig) -> Result<Vec<Instr>> {
    let sm = &mapping.spatial;
    let mut tm = mapping.temporal.clone();
    tm.homes.input = place.inputs[0].level;
    tm.homes.weight = place.weight.level;
    tm.homes.output = place.output.level;
    check_spatial(layer, sm, arch)?;
    check_temporal(layer, sm, &tm, arch)?;
    let d = layer.dims;
    let dw = layer.is_dw();
    let ins = layer.input_shape();
    let outs = layer.output_shape();
    let (px, py) = layer.padding();
    let cd = if dw { Dim::C } else { Dim::K };
    let nest = Nest {
        layer,
        tiles: core::array::from_fn(|i| tm.tile(Dim::ALL[i])),
        pos: core::array::from_fn(|i| tm.position(Dim::ALL[i])),
        trips: core::array::from_fn(|i| tm.trips(layer, Dim::ALL[i])),
    };
    let trips: Vec<u32> = tm.loops.iter().map(|l| tm.trips(layer, l.dim)).collect();
    let red_trips: u32 = Dim::ALL.iter().filter(|&&x| is_reduction(layer, x)).map(|&x| nest.trips[x.index()]).product();
    let o_dims = [Dim::B, Dim::OX, Dim::OY, cd];
    let tiles_per_block: u32 = o_dims.iter().filter(|&&x| nest.pos[x.index()] >= tm.rf_scope).map(|&x| nest.trips[x.index()]).product();
    let cached = weight_cached(layer, &tm, arch);
    let w_src = if cached { Loc { level: Level::Sram, addr: place.wcache } } else { place.weight };
    let in_half = arch.input_tile_bytes();
    let w_half = arch.pes() * arch.weight_reg_bytes / 2;
    let rf_half = arch.rf_block_entries();
    let rb = slab_row_bytes(layer);
    let slab_list = slab_rows(layer, &tm);

    let mut out: Vec<Instr> = Vec::new();
    let mut drain = Drain {
        arch,
        out_shape: outs,
        ops: pp_ops(layer, &place.norm)?,
        width: layer.output_bytes_per_element() as u8,
        wb_half: 0,
    };
    let mut idx = [0u32; 7];
    let mut i_key: Option<[u32; 6]> = None;
    let mut i_half = 1u32;
    let mut slab_key: Option<(u32, u32)> = None;
    let mut slab_prev: Option<(u32, u32)> = None;
    let mut slab_buf = 1usize;
    let mut w_key: Option<[u32; 5]> = None;
    let mut w_hf = 1u32;
    let mut w_seen: BTreeSet<[u32; 5]> = BTreeSet::new();
    let mut blk_cur: Option<(Block, u32)> = None;
    let mut blk_touch: BTreeMap<[u32; 4], u32> = BTreeMap::new();
    let mut o_touch: BTreeMap<[u32; 4], u32> = BTreeMap::new();
    let mut rf_hf = 1u32;

    let end_visit = |blk: &Block, rf: u32, touch: u32, drain: &mut Drain<'_>, out: &mut Vec<Instr>| {
        let tiles = tiles_per_block;
        if touch == red_trips * tiles {
            drain.flush(blk, rf, place.output, out);
        } else {
            out.push(drain.spill(blk, rf, place.spill, false));
        }
    };

    loop {
        let sp = |dd: Dim| nest.span(&idx, dd);
        let (b0, _) = sp(Dim::B);
        let (k0, kn) = sp(Dim::K);
        let (c0, cn) = sp(Dim::C);
        let (ox0, oxn) = sp(Dim::OX);
        let (oy0, oyn) = sp(Dim::OY);
        let (fx0, fxn) = sp(Dim::FX);
        let (fy0, fyn) = sp(Dim::FY);

        // Output block.
        let bspan = |dd: Dim| -> (u32, u32) {
            if nest.pos[dd.index()] >= tm.rf_scope {
                (0, layer.loop_bound(dd))
            } else {
                sp(dd)
            }
        };
        let blk = Block { b: bspan(Dim::B), x: bspan(Dim::OX), y: bspan(Dim::OY), k: bspan(cd) };
        let bkey = [blk.b.0, blk.x.0, blk.y.0, blk.k.0];
        // The previous block drains after this step's fetches are queued so
        // the fetches overlap its compute.
        let mut pending = Vec::new();
        if blk_cur.map(|(c, _)| c) != Some(blk) {
            if let Some((pb, rf)) = blk_cur {
                let t = blk_touch[&[pb.b.0, pb.x.0, pb.y.0, pb.k.0]];
                end_visit(&pb, rf, t, &mut drain, &mut pending);
            }
            rf_hf ^= 1;
            let rf = rf_hf * rf_half;
            debug_assert!(blk.entries() <= rf_half);
            if blk_touch.get(&bkey).copied().unwrap_or(0) > 0 {
                out.push(drain.spill(&blk, rf, place.spill, true));
            }
            blk_cur = Some((blk, rf));
        }
        let rf_base = blk_cur.unwrap().1;

        // Input staging rows for DRAM-resident inputs.
        let inp = place.inputs[0];
        let mut i_src = (inp.level, inp.addr as u64, b0, 0u32);
        if inp.level == Level::Dram {
            let oxt = idx[nest.pos[Dim::OX.index()]];
            if slab_key != Some((b0, oxt)) {
                let (lo, len) = slab_list[oxt as usize];
                let ov = match slab_prev {
                    Some((plo, plen)) if slab_key.map(|k| k.0) == Some(b0) => (plo + plen).saturating_sub(lo).min(len),
                    _ => 0,
                };
                let old = place.slabs[slab_buf] as u64;
                slab_buf ^= 1;
                let buf = place.slabs[slab_buf] as u64;
                let st = [ins.c, ins.y * ins.c, 0];
                if ov > 0 {
                    let (plo, _) = slab_prev.unwrap();
                    out.push(Instr::Load(xfer(Operand::I, Level::Sram, old + (lo - plo) as u64 * rb, Level::Sram, buf, 1, [ins.c, ins.y, ov, 1], st, st)));
                }
                if len > ov {
                    let at = inp.addr as u64 + act_offset(&ins, b0, lo + ov, 0, 0);
                    out.push(Instr::Load(xfer(Operand::I, Level::Dram, at, Level::Sram, buf + ov as u64 * rb, 1, [ins.c, ins.y, len - ov, 1], st, st)));
                }
                slab_key = Some((b0, oxt));
                slab_prev = Some((lo, len));
            }
            i_src = (Level::Sram, place.slabs[slab_buf] as u64, 0, slab_prev.unwrap().0);
        }

        // Input tile.
        let (gx, tx) = clipped_window(ox0, oxn, fx0, fxn, layer.stride.0, px, ins.x);
        let (gy, ty) = clipped_window(oy0, oyn, fy0, fyn, layer.stride.1, py, ins.y);
        let ikey = [b0, c0, ox0, oy0, fx0, fy0];
        if i_key != Some(ikey) {
            i_key = Some(ikey);
            i_half ^= 1;
            if tx > 0 && ty > 0 {
                let (lv, base, bb, row0) = i_src;
                let src_shape = if lv == inp.level { ins } else { TensorShape { x: slab_prev.unwrap().1, ..ins } };
                let at = base + act_offset(&src_shape, bb, gx - row0, gy, c0);
                let counts = [cn, ty, tx, 1];
                out.push(Instr::Load(xfer(
                    Operand::I,
                    lv,
                    at,
                    Level::InputMem,
                    (i_half * in_half) as u64,
                    1,
                    counts,
                    [ins.c, ins.y * ins.c, 0],
                    Transfer::dense_strides(counts),
                )));
            }
        }

        // Weight tile.
        let wb = if layer.dynamic_weights { b0 } else { 0 };
        let wkey = [k0, c0, fx0, fy0, wb];
        if w_key != Some(wkey) {
            w_key = Some(wkey);
            w_hf ^= 1;
            let (ks, kcount) = if dw { (0, 1) } else { (k0, kn) };
            let off = wb as u64 * d.k as u64 * d.c as u64 + (((ks as u64 * d.c as u64 + c0 as u64) * d.fy as u64 + fy0 as u64) * d.fx as u64 + fx0 as u64);
            let ss = [d.fx, d.fy * d.fx, if dw { 0 } else { d.c * d.fy * d.fx }];
            let counts = [fxn, fyn, cn, kcount];
            if cached && w_seen.insert(wkey) {
                out.push(Instr::Load(xfer(Operand::W, Level::Dram, place.weight.addr as u64 + off, Level::Sram, w_src.addr as u64 + off, 1, counts, ss, ss)));
            }
            out.push(Instr::Load(xfer(
                Operand::W,
                w_src.level,
                w_src.addr as u64 + off,
                Level::WeightReg,
                (w_hf * w_half) as u64,
                1,
                counts,
                ss,
                Transfer::dense_strides(counts),
            )));
        }

        out.append(&mut pending);

        // Compute.
        let okey = [b0, ox0, oy0, if dw { c0 } else { k0 }];
        let t = o_touch.entry(okey).or_insert(0);
        let acc = *t > 0;
        *t += 1;
        *blk_touch.entry(bkey).or_insert(0) += 1;
        let (bl, xl, yl) = (b0 - blk.b.0, ox0 - blk.x.0, oy0 - blk.y.0);
        let kl = if dw { c0 } else { k0 } - blk.k.0;
        let (bx, by, bk) = (blk.x.1, blk.y.1, blk.k.1);
        out.push(Instr::Compute(ComputeOp {
            dataflow: sm.dataflow,
            acc,
            dw,
            stride: layer.stride,
            pad: (px, py),
            k: if dw { 1 } else { kn },
            c: cn,
            ox: oxn,
            oy: oyn,
            fx: fxn,
            fy: fyn,
            f0: (fx0, fy0),
            o0: (ox0, oy0),
            g0: (gx as i32, gy as i32),
            t: (tx, ty),
            input_addr: i_half * in_half,
            weight_addr: w_hf * w_half,
            rf_addr: rf_base + ((bl * bx + xl) * by + yl) * bk + kl,
            rf_strides: (by * bk, bk),
        }));

        // Odometer, innermost loop fastest.
        let mut p = 7;
        loop {
            if p == 0 {
                if let Some((pb, rf)) = blk_cur {
                    let t = blk_touch[&[pb.b.0, pb.x.0, pb.y.0, pb.k.0]];
                    end_visit(&pb, rf, t, &mut drain, &mut out);
                }
                out.push(Instr::Halt);
                return Ok(spread_fetches(out));
            }
            p -= 1;
            idx[p] += 1;
            if idx[p] < trips[p] {
                break;
            }
            idx[p] = 0;
        }
    }
}

/// Lower a vector layer: operands stream through the register file in
/// chunks of whole pixels, the post-processing engine applies the layer's op.
pub fn lower_vector(layer: &LayerSpec, place: &Placement, arch: &ArchConfig) -> Result<Vec<Instr>> {
    if layer.kind.is_mac() {
        return Err(Error::NotMappable(format!("`{}` is a MAC layer", layer.name)));
    }
    layer.validate()?;
    let chunk = vector_chunk_pixels(layer, arch)? as u32;
    let c = layer.dims.c;
    let px = layer.dims.b * layer.dims.ox * layer.dims.oy;
    let rf_half = arch.rf_block_entries();
    let mut ops = pp_ops(layer, &place.norm)?;
    if ops.is_empty() {
        ops.push(PpOp::Requant { mult: 1, shift: 0 });
    }
    let flat = TensorShape::new(1, 1, px, c);
    let mut drain = Drain { arch, out_shape: flat, ops, width: 1, wb_half: 0 };
    let mut out = Vec::new();
    let mut pending: Vec<Instr> = Vec::new();
    for (n, (p0, pn)) in crate::mapping::tile_list(px, chunk).enumerate() {
        let rf = (n as u32 & 1) * rf_half;
        let counts = [c, pn, 1, 1];
        let st = [c, 0, 0];
        for (i, loc) in place.inputs.iter().enumerate() {
            let mut src = (loc.level, loc.addr as u64 + p0 as u64 * c as u64);
            if loc.level == Level::Dram {
                let stage = place.staging as u64 + ((2 * i + (n & 1)) as u64) * (chunk * c) as u64;
                out.push(Instr::Load(xfer(Operand::I, Level::Dram, src.1, Level::Sram, stage, 1, counts, st, st)));
                src = (Level::Sram, stage);
            }
            let mut t = xfer(Operand::I, src.0, src.1, Level::OutputRf, rf as u64, 1, counts, st, st);
            t.acc = i > 0;
            out.push(Instr::Load(t));
        }
        // Drain the previous chunk behind this chunk's fetches.
        out.append(&mut pending);
        let blk = Block { b: (0, 1), x: (0, 1), y: (p0, pn), k: (0, c) };
        drain.flush(&blk, rf, place.output, &mut pending);
    }
    out.append(&mut pending);
    out.push(Instr::Halt);
    Ok(spread_fetches(out))
}

/// Layer operands for a staged run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerData {
    pub inputs: Vec<QTensor>,
    /// Weights or the second GeMM operand in canonical order; empty for vector layers.
    pub weights: Vec<i8>,
}

fn put(buf: &mut Vec<u8>, at: u32, bytes: &[u8]) {
    let end = at as usize + bytes.len();
    if buf.len() < end {
        buf.resize(end, 0);
    }
    buf[at as usize..end].copy_from_slice(bytes);
}

/// Memory image holding every operand at its placement.
pub fn stage_image(layer: &LayerSpec, place: &Placement, data: &LayerData) -> Result<MemImage> {
    if data.inputs.len() != place.inputs.len() {
        return Err(Error::Shape(format!("`{}`: {} inputs for {} slots", layer.name, data.inputs.len(), place.inputs.len())));
    }
    let mut img = MemImage::default();
    let mut write = |loc: Loc, bytes: &[u8]| match loc.level {
        Level::Dram => put(&mut img.dram, loc.addr, bytes),
        _ => put(&mut img.sram, loc.addr, bytes),
    };
    for (t, &loc) in data.inputs.iter().zip(&place.inputs) {
        if t.shape != layer.input_shape() || t.bits != 8 {
            return Err(Error::Shape(format!("`{}`: input must be 8-bit {:?}", layer.name, layer.input_shape())));
        }
        write(loc, &t.to_bytes());
    }
    if layer.kind.is_mac() {
        if data.weights.len() as u64 != layer.weight_elements() {
            return Err(Error::Shape(format!("`{}`: {} weights, expected {}", layer.name, data.weights.len(), layer.weight_elements())));
        }
        let w: Vec<u8> = data.weights.iter().map(|&v| v as u8).collect();
        write(place.weight, &w);
    }
    for (at, raw) in norm_tables(layer, &place.norm)? {
        write(Loc { level: Level::Sram, addr: at }, &raw);
    }
    Ok(img)
}

/// LayerNorm parameter tables of `layer` (gammas then betas, i16 LE) and
/// their SRAM addresses.
fn norm_tables(layer: &LayerSpec, addrs: &[u32]) -> Result<Vec<(u32, Vec<u8>)>> {
    let k = layer.out_channels() as usize;
    let mut tabs = addrs.iter();
    let mut out = Vec::new();
    for op in &layer.post_ops {
        if let PostOp::LayerNorm(p) = op {
            let at = *tabs.next().ok_or_else(|| Error::Shape("missing LayerNorm table".into()))?;
            let mut raw = Vec::with_capacity(4 * k);
            for i in 0..k {
                raw.extend_from_slice(&p.gamma_at(i).to_le_bytes());
            }
            for i in 0..k {
                raw.extend_from_slice(&p.beta_at(i).to_le_bytes());
            }
            out.push((at, raw));
        }
    }
    Ok(out)
}

/// Read a layer's output tensor back from a finished run.
pub fn read_output(layer: &LayerSpec, place: &Placement, run: &RunResult) -> Result<QTensor> {
    read_tensor(layer, place.output, run)
}

fn read_tensor(layer: &LayerSpec, loc: Loc, run: &RunResult) -> Result<QTensor> {
    let shape = layer.output_shape();
    let ob = layer.output_bytes_per_element() as usize;
    let n = shape.elements() as usize;
    let mem = if loc.level == Level::Dram { &run.dram } else { &run.sram };
    let at = loc.addr as usize;
    let raw = mem.get(at..at + n * ob).ok_or(Error::OutOfRange { level: loc.level.name(), addr: at as u64, len: (n * ob) as u64 })?;
    let data = if ob == 1 { raw.iter().map(|&b| b as i8 as i32).collect() } else { raw.chunks(4).map(|w| i32::from_le_bytes([w[0], w[1], w[2], w[3]])).collect() };
    QTensor::new(shape, if ob == 1 { 8 } else { 32 }, data)
}

/// A finished single-layer run.
#[derive(Clone, Debug)]
pub struct LayerRun {
    pub output: QTensor,
    pub result: RunResult,
    pub program: Vec<Instr>,
    pub placement: Placement,
}

/// Place, lower, stage and execute one layer.
pub fn simulate_layer(
    layer: &LayerSpec,
    mapping: Option<&LayerMapping>,
    homes: &NodeHomes,
    data: &LayerData,
    arch: &ArchConfig,
) -> Result<LayerRun> {
    let placement = place_layer(layer, homes, mapping, arch)?;
    let program = match (layer.kind.is_mac(), mapping) {
        (true, Some(m)) => lower_layer(layer, m, &placement, arch)?,
        (true, None) => return Err(Error::Unmapped(layer.name.clone())),
        (false, _) => lower_vector(layer, &placement, arch)?,
    };
    let image = stage_image(layer, &placement, data)?;
    let result = run_program(&program, image, arch)?;
    let output = read_output(layer, &placement, &result)?;
    Ok(LayerRun { output, result, program, placement })
}

/// Addresses for a depth-first inverted bottleneck.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusedPlacement {
    pub input: Loc,
    pub w_expand: Loc,
    pub w_project: Loc,
    pub output: Loc,
    /// SRAM copies of the expand and project weights (cached plans only).
    pub wcache: [u32; 2],
    /// Double-buffered slices of the intermediate tensor.
    pub tbuf: [u32; 2],
    pub norm_expand: Vec<u32>,
    pub norm_project: Vec<u32>,
}

pub fn place_fused(ib: &InvertedBottleneck, plan: &FusionPlan, input: Level, output: Level, arch: &ArchConfig) -> Result<FusedPlacement> {
    let (e, p) = (&ib.pw_expand, &ib.pw_project);
    for l in [input, output] {
        if !matches!(l, Level::Dram | Level::Sram) {
            return Err(Error::IllegalMapping(format!("`{}`: tensors live in DRAM or SRAM, not {l}", e.name)));
        }
    }
    let (ne, np) = (norm_param_bytes(e), norm_param_bytes(p));
    let mut act = Region { next: 0, end: arch.sram_activation_bytes() as u64, what: "resident activations" };
    let mut wreg = Region { next: arch.sram_activation_bytes() as u64, end: (arch.sram_bytes as u64) - ne - np, what: "weight region" };
    let mut dram = Region { next: 0, end: u32::MAX as u64, what: "DRAM" };
    let home = |l: Level, bytes: u64, r: &mut Region, d: &mut Region| -> Result<Loc> {
        Ok(Loc { level: l, addr: if l == Level::Sram { r.take(bytes, e)? } else { d.take(bytes, e)? } })
    };
    let input = home(input, input_bytes(e), &mut act, &mut dram)?;
    let output = home(output, output_bytes(p), &mut act, &mut dram)?;
    let w_expand = Loc { level: Level::Dram, addr: dram.take(e.weight_elements(), e)? };
    let w_project = Loc { level: Level::Dram, addr: dram.take(p.weight_elements(), e)? };
    let mut wcache = [0, 0];
    if plan.weights_cached {
        wcache = [wreg.take(e.weight_elements(), e)?, wreg.take(p.weight_elements(), e)?];
    }
    let slice = plan.tile_x as u64 * plan.tile_c as u64;
    let tbuf = [wreg.take(slice, e)?, wreg.take(slice, e)?];
    let mut at = arch.sram_bytes - (ne + np) as u32;
    let mut tables = |l: &LayerSpec| {
        let mut v = Vec::new();
        for op in &l.post_ops {
            if matches!(op, PostOp::LayerNorm(_)) {
                v.push(at);
                at += 4 * l.out_channels();
            }
        }
        v
    };
    let norm_expand = tables(e);
    let norm_project = tables(p);
    Ok(FusedPlacement { input, w_expand, w_project, output, wcache, tbuf, norm_expand, norm_project })
}

/// Lower a fused pair: slices of T are expanded into the register file,
/// post-processed into an SRAM slice buffer, streamed back through the input
/// memory and accumulated by the project layer, one slice ahead.
pub fn lower_fused(ib: &InvertedBottleneck, plan: &FusionPlan, place: &FusedPlacement, arch: &ArchConfig) -> Result<Vec<Instr>> {
    let (e, p) = (&ib.pw_expand, &ib.pw_project);
    let (c, k, ct) = (e.dims.c, p.dims.k, ib.t.c);
    let (n, tc) = (plan.tile_x, plan.tile_c);
    let (_, ox, _, oy) = ib.pixel_rect(0, n);
    let islot = [0, n * c];
    let tslot = [2 * n * c, 2 * n * c + n * tc];
    let quarter = arch.pes() * arch.weight_reg_bytes / 4;
    let oblk = [0, n * k];
    let tblk = [2 * n * k, 2 * n * k + n * tc];
    let nc = plan.c_tiles(ib);
    let mut de = Drain { arch, out_shape: TensorShape::new(1, ox, oy, tc), ops: pp_ops(e, &place.norm_expand)?, width: 1, wb_half: 0 };
    let mut dp = Drain {
        arch,
        out_shape: p.output_shape(),
        ops: pp_ops(p, &place.norm_project)?,
        width: p.output_bytes_per_element() as u8,
        wb_half: 0,
    };
    let pw = |df_k: u32, df_c: u32, acc: bool, x0: u32, y0: u32, input_addr: u32, weight_addr: u32, rf_addr: u32| {
        Instr::Compute(ComputeOp {
            dataflow: Dataflow::CK,
            acc,
            dw: false,
            stride: (1, 1),
            pad: (0, 0),
            k: df_k,
            c: df_c,
            ox,
            oy,
            fx: 1,
            fy: 1,
            f0: (0, 0),
            o0: (x0, y0),
            g0: (x0 as i32, y0 as i32),
            t: (ox, oy),
            input_addr,
            weight_addr,
            rf_addr,
            rf_strides: (oy * df_k, df_k),
        })
    };
    // Weight slice fetch, filling the SRAM copy on the first pixel tile.
    let fetch_w = |out: &mut Vec<Instr>, home: Loc, cache: u32, off: u64, counts: [u32; 4], ss: [u32; 3], dst: u32, first: bool| {
        let src = if plan.weights_cached {
            if first {
                out.push(Instr::Load(xfer(Operand::W, home.level, home.addr as u64 + off, Level::Sram, cache as u64 + off, 1, counts, ss, ss)));
            }
            Loc { level: Level::Sram, addr: cache }
        } else {
            home
        };
        out.push(Instr::Load(xfer(Operand::W, src.level, src.addr as u64 + off, Level::WeightReg, dst as u64, 1, counts, ss, Transfer::dense_strides(counts))));
    };
    let mut out = Vec::new();
    for step in &plan.schedule {
        let (p0, c0) = (step.pixels.0, step.channels.0);
        let (i, j) = (p0 / n, c0 / tc);
        let s = (i * nc + j) as usize % 2;
        let first = i == 0;
        let (x0, _, y0, _) = ib.pixel_rect(p0, n);
        match step.kind {
            StepKind::Produce => {
                if j == 0 {
                    let counts = [c, oy, ox, 1];
                    let d = Transfer::dense_strides(counts);
                    let at = place.input.addr as u64 + p0 as u64 * c as u64;
                    out.push(Instr::Load(xfer(Operand::I, place.input.level, at, Level::InputMem, islot[i as usize % 2] as u64, 1, counts, d, d)));
                }
                let counts = [c, tc, 1, 1];
                fetch_w(&mut out, place.w_expand, place.wcache[0], c0 as u64 * c as u64, counts, Transfer::dense_strides(counts), quarter * s as u32, first);
                out.push(pw(tc, c, false, x0, y0, islot[i as usize % 2], quarter * s as u32, tblk[s]));
                de.wb_half = dp.wb_half;
                let blk = Block { b: (0, 1), x: (0, ox), y: (0, oy), k: (0, tc) };
                de.flush(&blk, tblk[s], Loc { level: Level::Sram, addr: place.tbuf[s] }, &mut out);
                dp.wb_half = de.wb_half;
            }
            StepKind::Consume => {
                let counts = [tc, oy, ox, 1];
                let d = Transfer::dense_strides(counts);
                out.push(Instr::Load(xfer(Operand::I, Level::Sram, place.tbuf[s] as u64, Level::InputMem, tslot[s] as u64, 1, counts, d, d)));
                let counts = [tc, k, 1, 1];
                fetch_w(&mut out, place.w_project, place.wcache[1], c0 as u64, counts, [ct, ct * k, 0], quarter * (2 + s as u32), first);
                out.push(pw(k, tc, j > 0, x0, y0, tslot[s], quarter * (2 + s as u32), oblk[i as usize % 2]));
                if j + 1 == nc {
                    let blk = Block { b: (0, 1), x: (x0, ox), y: (y0, oy), k: (0, k) };
                    dp.wb_half = de.wb_half;
                    dp.flush(&blk, oblk[i as usize % 2], place.output, &mut out);
                    de.wb_half = dp.wb_half;
                }
            }
        }
    }
    out.push(Instr::Halt);
    Ok(spread_fetches(out))
}

/// Operands of a fused pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedData {
    pub input: QTensor,
    pub w_expand: Vec<i8>,
    pub w_project: Vec<i8>,
}

#[derive(Clone, Debug)]
pub struct FusedRun {
    pub output: QTensor,
    pub result: RunResult,
    pub program: Vec<Instr>,
    pub placement: FusedPlacement,
}

/// Place, lower, stage and execute a fused pair.
pub fn simulate_fused(
    ib: &InvertedBottleneck,
    plan: &FusionPlan,
    input: Level,
    output: Level,
    data: &FusedData,
    arch: &ArchConfig,
) -> Result<FusedRun> {
    let (e, p) = (&ib.pw_expand, &ib.pw_project);
    if data.input.shape != e.input_shape() || data.input.bits != 8 {
        return Err(Error::Shape(format!("`{}`: input must be 8-bit {:?}", e.name, e.input_shape())));
    }
    if data.w_expand.len() as u64 != e.weight_elements() || data.w_project.len() as u64 != p.weight_elements() {
        return Err(Error::Shape(format!("`{}`: weight counts do not match the pair", e.name)));
    }
    let placement = place_fused(ib, plan, input, output, arch)?;
    let program = lower_fused(ib, plan, &placement, arch)?;
    let mut img = MemImage::default();
    let mut write = |loc: Loc, bytes: &[u8]| match loc.level {
        Level::Dram => put(&mut img.dram, loc.addr, bytes),
        _ => put(&mut img.sram, loc.addr, bytes),
    };
    write(placement.input, &data.input.to_bytes());
    write(placement.w_expand, &data.w_expand.iter().map(|&v| v as u8).collect::<Vec<_>>());
    write(placement.w_project, &data.w_project.iter().map(|&v| v as u8).collect::<Vec<_>>());
    for (at, raw) in norm_tables(e, &placement.norm_expand)?.into_iter().chain(norm_tables(p, &placement.norm_project)?) {
        write(Loc { level: Level::Sram, addr: at }, &raw);
    }
    let result = run_program(&program, img, arch)?;
    let output = read_tensor(p, placement.output, &result)?;
    Ok(FusedRun { output, result, program, placement })
}

/// Homes with every operand on chip.
pub fn sram_homes(layer: &LayerSpec) -> NodeHomes {
    let n = if layer.kind.is_mac() { 1 } else { vector_operands(layer) };
    NodeHomes { inputs: vec![Level::Sram; n], weight: Level::Sram, output: Level::Sram }
}

/// Whether `layer` can run with `df` at all, for callers choosing modes.
pub fn mode_supported(layer: &LayerSpec, df: Dataflow, arch: &ArchConfig) -> bool {
    df.supports(layer, arch) && !(layer.kind == LayerKind::GeMM && df == Dataflow::CFx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::search_mapping_in;
    use crate::golden::ref_layer;
    use crate::mapping::{enumerate_temporal_mappings, Homes, SpatialMapping};
    use crate::workload::{NormParams, Requant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(layer: &LayerSpec, r: &mut ChaCha8Rng) -> LayerData {
        let n = vector_operands(layer).max(1);
        let inputs = (0..if layer.kind.is_mac() { 1 } else { n })
            .map(|_| {
                let s = layer.input_shape();
                QTensor::from_i8(s, &(0..s.elements()).map(|_| r.gen::<i8>()).collect::<Vec<_>>()).unwrap()
            })
            .collect();
        let weights = if layer.kind.is_mac() { (0..layer.weight_elements()).map(|_| r.gen::<i8>()).collect() } else { vec![] };
        LayerData { inputs, weights }
    }

    fn golden(layer: &LayerSpec, d: &LayerData) -> QTensor {
        let ins: Vec<&QTensor> = d.inputs.iter().collect();
        ref_layer(layer, &ins, if layer.kind.is_mac() { Some(&d.weights) } else { None }).unwrap()
    }

    #[test]
    fn single_tile_pointwise_is_four_instructions() {
        let a = ArchConfig::default();
        let l = LayerSpec::pw("pw", 16, 16, 1, 1);
        let (m, _) = search_mapping_in(&l, &a, crate::cost::Objective::Latency, 10, Homes::default(), &[Dataflow::CK]).unwrap();
        let homes = NodeHomes { inputs: vec![Level::Sram], weight: Level::Dram, output: Level::Sram };
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let d = data(&l, &mut r);
        let run = simulate_layer(&l, Some(&m), &homes, &d, &a).unwrap();
        let kinds: Vec<&str> = run
            .program
            .iter()
            .map(|i| match i {
                Instr::Load(_) => "load",
                Instr::Store(_) => "store",
                Instr::Compute(_) => "compute",
                Instr::PostProc(_) => "pp",
                _ => "other",
            })
            .collect();
        assert_eq!(kinds, ["load", "load", "compute", "store", "other"]);
        assert_eq!(run.output, golden(&l, &d));
    }

    #[test]
    fn every_enumerated_mapping_is_bit_exact() {
        let a = ArchConfig::default();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let layers = [
            LayerSpec::conv("c", 5, 7, 3, 6, 5),
            LayerSpec::dw("d", 20, 5, 7, 6),
            LayerSpec::pw("p", 33, 18, 4, 5).with_post_ops(vec![PostOp::Requantize(Requant { mult: 3, shift: 9 })]),
            LayerSpec::conv("s", 3, 8, 4, 3, 3).with_stride(2),
            LayerSpec::gemm("g", 2, 5, 20, 9),
        ];
        for l in layers {
            let d = data(&l, &mut r);
            let want = golden(&l, &d);
            for df in Dataflow::ALL {
                if !df.supports(&l, &a) {
                    continue;
                }
                let sm = SpatialMapping::new(df, &l, &a);
                for homes in [
                    Homes { input: Level::Sram, weight: Level::Dram, output: Level::Sram },
                    Homes { input: Level::Dram, weight: Level::Dram, output: Level::Dram },
                ] {
                    for tm in enumerate_temporal_mappings(&l, &sm, &a, homes, 60).unwrap() {
                        let m = LayerMapping { spatial: sm, temporal: tm };
                        let nh = NodeHomes { inputs: vec![homes.input], weight: homes.weight, output: homes.output };
                        let run = simulate_layer(&l, Some(&m), &nh, &d, &a).unwrap_or_else(|e| panic!("{m}: {e}"));
                        assert_eq!(run.output, want, "{} under {m}", l.name);
                    }
                }
            }
        }
    }

    #[test]
    fn fused_layernorm_matches_reference() {
        let a = ArchConfig::default();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let k = 40;
        let norm = NormParams { gamma: (0..k).map(|_| r.gen_range(-600..600)).collect(), beta: (0..k).map(|_| r.gen_range(-20..20)).collect() };
        let l = LayerSpec::pw("pw", 24, k as u32, 6, 7).with_post_ops(vec![PostOp::LayerNorm(norm)]);
        let d = data(&l, &mut r);
        let (m, _) = search_mapping_in(&l, &a, crate::cost::Objective::Energy, 200, Homes::default(), &[Dataflow::CK]).unwrap();
        let run = simulate_layer(&l, Some(&m), &sram_homes(&l), &d, &a).unwrap();
        assert_eq!(run.output, golden(&l, &d));
    }

    #[test]
    fn vector_layers_match_reference() {
        let a = ArchConfig::default();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut add = LayerSpec::vector("add", LayerKind::ElementwiseAdd, 30, 9, 7);
        add.post_ops = vec![PostOp::Requantize(Requant { mult: 1, shift: 1 })];
        let mut ln = LayerSpec::vector("ln", LayerKind::LayerNorm, 300, 4, 4);
        ln.post_ops = vec![PostOp::LayerNorm(NormParams::default())];
        for l in [add, ln] {
            let d = data(&l, &mut r);
            for h in [Level::Sram, Level::Dram] {
                let homes = NodeHomes { inputs: vec![h; vector_operands(&l)], weight: Level::Dram, output: h };
                let run = simulate_layer(&l, None, &homes, &d, &a).unwrap();
                assert_eq!(run.output, golden(&l, &d), "{}", l.name);
            }
        }
    }

    #[test]
    fn traffic_matches_the_cost_model() {
        let a = ArchConfig::default();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let norm = NormParams::default();
        let layers = [
            LayerSpec::conv("c", 5, 7, 3, 6, 5),
            LayerSpec::dw("d", 40, 3, 9, 8),
            LayerSpec::pw("p", 40, 36, 6, 5).with_post_ops(vec![PostOp::Requantize(Requant { mult: 3, shift: 9 })]),
            LayerSpec::pw("n", 24, 20, 5, 5).with_post_ops(vec![PostOp::LayerNorm(norm)]),
            LayerSpec::conv("s", 3, 8, 4, 3, 3).with_stride(2),
            LayerSpec::gemm("g", 2, 5, 20, 9),
        ];
        let mut worst: f64 = 0.0;
        for l in layers {
            let d = data(&l, &mut r);
            for df in Dataflow::ALL {
                if !df.supports(&l, &a) {
                    continue;
                }
                let sm = SpatialMapping::new(df, &l, &a);
                for homes in [
                    Homes { input: Level::Sram, weight: Level::Sram, output: Level::Sram },
                    Homes { input: Level::Sram, weight: Level::Dram, output: Level::Sram },
                    Homes { input: Level::Dram, weight: Level::Dram, output: Level::Dram },
                ] {
                    for tm in enumerate_temporal_mappings(&l, &sm, &a, homes, 40).unwrap() {
                        let cost = crate::cost::evaluate_layer(&l, &sm, &tm, &a).unwrap();
                        let m = LayerMapping { spatial: sm, temporal: tm };
                        let nh = NodeHomes { inputs: vec![homes.input], weight: homes.weight, output: homes.output };
                        let run = simulate_layer(&l, Some(&m), &nh, &d, &a).unwrap();
                        assert_eq!(run.result.traffic, cost.traffic, "{} under {m}", l.name);
                        assert_eq!(run.result.busy.array, cost.busy.array, "{} under {m}", l.name);
                        let ratio = cost.latency_cycles() as f64 / run.result.cycles as f64;
                        worst = worst.max((ratio - 1.0).abs());
                    }
                }
            }
        }
        std::println!("worst latency deviation {worst:.3}");
    }

    fn fused_ib(c: u32, ct: u32, x: u32, y: u32, norm: bool) -> InvertedBottleneck {
        let mut e = LayerSpec::pw("e", c, ct, x, y);
        e.post_ops = vec![PostOp::Requantize(Requant { mult: 3, shift: 9 }), PostOp::Activation(crate::workload::ActKind::Gelu)];
        if norm {
            e.post_ops.insert(0, PostOp::LayerNorm(NormParams::default()));
        }
        let p = LayerSpec::pw("p", ct, c, x, y).with_post_ops(vec![PostOp::Requantize(Requant { mult: 5, shift: 10 })]);
        InvertedBottleneck::new(e, p).unwrap()
    }

    #[test]
    fn fused_pairs_match_sequential_layers() {
        let a = ArchConfig::default();
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let cases = [(16, 32, 4, 4, false), (20, 48, 6, 5, true), (24, 64, 8, 8, false), (8, 24, 3, 7, false)];
        let mut worst: f64 = 0.0;
        for (c, ct, x, y, norm) in cases {
            let ib = fused_ib(c, ct, x, y, norm);
            let di = data(&ib.pw_expand, &mut r);
            let dp = data(&ib.pw_project, &mut r);
            let t = golden(&ib.pw_expand, &di);
            let want = golden(&ib.pw_project, &LayerData { inputs: vec![t], weights: dp.weights.clone() });
            let fd = FusedData { input: di.inputs[0].clone(), w_expand: di.weights, w_project: dp.weights };
            let n = ib.pixels();
            for tx in (1..=n).filter(|t| y % t == 0 || t % y == 0 && n.is_multiple_of(*t)) {
                for tc in (1..=ct).filter(|t| ct % t == 0) {
                    let Ok(plan) = FusionPlan::with_tiles(&ib, tx, tc, &a, u64::MAX) else { continue };
                    for (inp, outp) in [(Level::Sram, Level::Sram), (Level::Dram, Level::Dram)] {
                        let run = simulate_fused(&ib, &plan, inp, outp, &fd, &a).unwrap();
                        assert_eq!(run.output, want, "{c}/{ct} {x}x{y} plan {plan}");
                        let cost = crate::fusion::fused_cost(&ib, &plan, inp, outp, &a).unwrap();
                        assert_eq!(run.result.traffic, cost.traffic, "{c}/{ct} {x}x{y} plan {plan}");
                        assert_eq!(run.result.traffic.level(Level::Dram), cost.traffic.level(Level::Dram));
                        let ratio = cost.latency_cycles() as f64 / run.result.cycles as f64;
                        worst = worst.max((ratio - 1.0).abs());
                    }
                    // Through DRAM only the pair's input, output and weights move.
                    let run = simulate_fused(&ib, &plan, Level::Sram, Level::Sram, &fd, &a).unwrap();
                    let w = ib.weight_bytes();
                    assert_eq!(run.result.traffic.level(Level::Dram), w);
                }
            }
        }
        std::println!("worst fused latency deviation {worst:.3}");
    }
}
