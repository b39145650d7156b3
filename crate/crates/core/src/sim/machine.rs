//! Functional and timing model of the accelerator.
//!
//! Instructions execute functionally in program order. Timing follows a
//! decoupled-issue controller: instructions dispatch in order into one
//! in-order queue per unit (DRAM bus, SRAM port, PE array, post-processing
//! engine) and start once their unit is free and every earlier access to an
//! overlapping address range has finished.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::arch::{ArchConfig, Level};
use crate::cost::{Traffic, UnitBusy};
use crate::error::{Error, Result};
use crate::mapping::Dataflow;
use crate::workload::Operand;

use super::isa::{decode, ComputeOp, Instr, PostProcOp, PpOp, Transfer};
use super::postproc::{postprocess, NormTable};

/// Pending instructions a unit queue can hold before dispatch stalls.
pub const QUEUE_DEPTH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Unit {
    Bus,
    Port,
    Array,
    Ppe,
}

impl Unit {
    pub fn name(self) -> &'static str {
        match self {
            Unit::Bus => "bus",
            Unit::Port => "port",
            Unit::Array => "array",
            Unit::Ppe => "ppe",
        }
    }
}

/// One access: `bytes` read from or written to `level` by an instruction
/// starting at `cycle`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub cycle: u64,
    pub unit: Unit,
    pub event: &'static str,
    pub level: Level,
    pub operand: Operand,
    pub write: bool,
    pub bytes: u64,
    /// Lowest byte (or entry) address touched.
    pub addr: u64,
}

/// Initial contents of the off-array memories.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemImage {
    pub dram: Vec<u8>,
    /// Shorter than the SRAM is fine; the rest reads as zero.
    pub sram: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub dram: Vec<u8>,
    pub sram: Vec<u8>,
    pub cycles: u64,
    pub busy: UnitBusy,
    pub macs: u64,
    pub traffic: Traffic,
    pub trace: Vec<TraceEvent>,
    pub instructions: usize,
}

impl RunResult {
    pub fn energy_pj(&self, arch: &ArchConfig) -> f64 {
        let e = &arch.energy;
        Level::ENERGY.iter().map(|&l| self.traffic.level(l) as f64 * e.per_byte(l)).sum::<f64>() + self.macs as f64 * e.mac
    }

    pub fn compute_cycles(&self) -> u64 {
        self.busy.array
    }
}

#[derive(Clone, Copy)]
struct Access {
    lo: u64,
    hi: u64,
    end: u64,
    write: bool,
}

struct Timing {
    free: [u64; 4],
    queued: [VecDeque<u64>; 4],
    dispatch: u64,
    last_end: u64,
    hazards: [Vec<Access>; 6],
}

impl Timing {
    fn new() -> Self {
        Timing { free: [0; 4], queued: Default::default(), dispatch: 0, last_end: 0, hazards: Default::default() }
    }

    /// Schedule an instruction touching `ranges` = (level, lo, hi, write).
    fn issue(&mut self, unit: Unit, dur: u64, ranges: &[(Level, u64, u64, bool)]) -> u64 {
        let u = unit as usize;
        if self.queued[u].len() == QUEUE_DEPTH {
            let oldest = self.queued[u].pop_front().unwrap();
            self.dispatch = self.dispatch.max(oldest);
        }
        let mut start = self.dispatch.max(self.free[u]);
        for &(lv, lo, hi, write) in ranges {
            for a in &self.hazards[lv.index()] {
                if a.lo < hi && lo < a.hi && (write || a.write) {
                    start = start.max(a.end);
                }
            }
        }
        let end = start + dur;
        self.free[u] = end;
        self.queued[u].push_back(start);
        self.last_end = self.last_end.max(end);
        let d = self.dispatch;
        for &(lv, lo, hi, write) in ranges {
            let h = &mut self.hazards[lv.index()];
            h.retain(|a| a.end > d);
            h.push(Access { lo, hi, end, write });
        }
        start
    }

    fn sync(&mut self) {
        self.dispatch = self.dispatch.max(self.last_end);
    }
}

/// LayerNorm tables the post-processor keeps after first use.
const PPE_TABLES: usize = 4;

struct Mem {
    /// `[lo, hi)` SRAM ranges of the held tables; an SRAM write over one
    /// drops it.
    tables: Vec<(u64, u64)>,
    input: Vec<u8>,
    wreg: Vec<u8>,
    rf: Vec<i32>,
    wb: Vec<i32>,
    sram: Vec<u8>,
    dram: Vec<u8>,
}

fn oob(level: Level, addr: u64, len: u64) -> Error {
    Error::OutOfRange { level: level.name(), addr, len }
}

impl Mem {
    fn entry_level(l: Level) -> bool {
        matches!(l, Level::OutputRf | Level::Writeback)
    }

    fn bytes_mut(&mut self, l: Level) -> &mut Vec<u8> {
        match l {
            Level::Dram => &mut self.dram,
            Level::Sram => &mut self.sram,
            Level::InputMem => &mut self.input,
            Level::WeightReg => &mut self.wreg,
            _ => unreachable!(),
        }
    }

    fn bytes(&self, l: Level) -> &Vec<u8> {
        match l {
            Level::Dram => &self.dram,
            Level::Sram => &self.sram,
            Level::InputMem => &self.input,
            Level::WeightReg => &self.wreg,
            _ => unreachable!(),
        }
    }

    /// Check `[lo, hi)` of `l` (bytes or entries).
    fn check(&mut self, l: Level, lo: u64, hi: u64, write: bool) -> Result<()> {
        if write && l == Level::Sram {
            self.tables.retain(|&(a, b)| !(a < hi && lo < b));
        }
        let cap = match l {
            Level::OutputRf => self.rf.len() as u64,
            Level::Writeback => self.wb.len() as u64,
            Level::Dram => {
                if write {
                    if hi > self.dram.len() as u64 {
                        self.dram.resize(hi as usize, 0);
                    }
                    return Ok(());
                }
                self.dram.len() as u64
            }
            _ => self.bytes(l).len() as u64,
        };
        if hi > cap {
            return Err(oob(l, lo, hi - lo));
        }
        Ok(())
    }

    fn read(&self, l: Level, at: u64, width: u8) -> i32 {
        match l {
            Level::OutputRf => self.rf[at as usize],
            Level::Writeback => self.wb[at as usize],
            _ => {
                let m = self.bytes(l);
                let a = at as usize;
                if width == 1 {
                    m[a] as i8 as i32
                } else {
                    i32::from_le_bytes([m[a], m[a + 1], m[a + 2], m[a + 3]])
                }
            }
        }
    }

    fn write(&mut self, l: Level, at: u64, width: u8, v: i32, acc: bool) {
        match l {
            Level::OutputRf | Level::Writeback => {
                let m = if l == Level::OutputRf { &mut self.rf } else { &mut self.wb };
                let e = &mut m[at as usize];
                *e = if acc { e.saturating_add(v) } else { v };
            }
            _ => {
                let m = self.bytes_mut(l);
                let a = at as usize;
                if width == 1 {
                    // Narrowing stores saturate.
                    m[a] = v.clamp(-128, 127) as i8 as u8;
                } else {
                    m[a..a + 4].copy_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
}

/// Elements spanned by a strided pattern from its first to its last element.
/// Ranges an instruction reads and writes, as (level, lo, hi, write). Byte
/// levels count bytes, the register file and write-back buffer count entries.
pub(crate) fn footprint(ins: &Instr) -> Vec<(Level, u64, u64, bool)> {
    match ins {
        Instr::Load(t) | Instr::Store(t) => {
            let unit_of = |l: Level| if Mem::entry_level(l) { 1 } else { t.width as u64 };
            let s = t.src_addr as u64;
            let d = t.dst_addr as u64;
            let sh = s + extent(&t.counts, &t.src_strides) * unit_of(t.src);
            let dh = d + extent(&t.counts, &t.dst_strides) * unit_of(t.dst);
            let mut r = vec![(t.src, s, sh, false), (t.dst, d, dh, true)];
            if t.acc {
                r.push((t.dst, d, dh, false));
            }
            r
        }
        Instr::Compute(c) => {
            let outs_k = if c.dw { c.c } else { c.k } as u64;
            let in_len = c.t.0 as u64 * c.t.1 as u64 * c.c as u64;
            let w_len = if c.dw { 1 } else { c.k as u64 } * c.c as u64 * c.fx as u64 * c.fy as u64;
            let rf_hi = c.rf_addr as u64 + (c.ox as u64 - 1) * c.rf_strides.0 as u64 + (c.oy as u64 - 1) * c.rf_strides.1 as u64 + outs_k;
            let mut r = vec![
                (Level::InputMem, c.input_addr as u64, c.input_addr as u64 + in_len, false),
                (Level::WeightReg, c.weight_addr as u64, c.weight_addr as u64 + w_len, false),
                (Level::OutputRf, c.rf_addr as u64, rf_hi, true),
            ];
            if c.acc {
                r.push((Level::OutputRf, c.rf_addr as u64, rf_hi, false));
            }
            r
        }
        Instr::PostProc(p) => {
            let src_hi = p.src as u64 + (p.count as u64 - 1) * p.src_stride as u64 + p.len as u64;
            let dst_hi = p.dst as u64 + (p.count as u64 - 1) * p.dst_stride as u64 + p.len as u64;
            let mut r = vec![(Level::OutputRf, p.src as u64, src_hi, false), (Level::Writeback, p.dst as u64, dst_hi, true)];
            for op in &p.ops {
                if let PpOp::LayerNorm { params } = op {
                    r.push((Level::Sram, *params as u64, *params as u64 + 4 * p.len as u64, false));
                }
            }
            r
        }
        Instr::Sync | Instr::Halt => Vec::new(),
    }
}

fn extent(counts: &[u32; 4], strides: &[u32; 3]) -> u64 {
    let mut hi = counts[0] as u64 - 1;
    for i in 0..3 {
        hi += (counts[i + 1] as u64 - 1) * strides[i] as u64;
    }
    hi + 1
}

fn ceil(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

pub struct Machine {
    arch: ArchConfig,
    mem: Mem,
    time: Timing,
    busy: UnitBusy,
    macs: u64,
    traffic: Traffic,
    trace: Vec<TraceEvent>,
}

impl Machine {
    pub fn new(arch: &ArchConfig, image: MemImage) -> Result<Self> {
        arch.validate()?;
        let mut sram = image.sram;
        if sram.len() > arch.sram_bytes as usize {
            return Err(oob(Level::Sram, 0, sram.len() as u64));
        }
        sram.resize(arch.sram_bytes as usize, 0);
        Ok(Machine {
            arch: *arch,
            mem: Mem {
                tables: Vec::new(),
                input: vec![0; arch.input_mem_bytes as usize],
                wreg: vec![0; (arch.pes() * arch.weight_reg_bytes) as usize],
                rf: vec![0; arch.rf_entries() as usize],
                wb: vec![0; 2 * arch.line_buffer_entries as usize],
                sram,
                dram: image.dram,
            },
            time: Timing::new(),
            busy: UnitBusy::default(),
            macs: 0,
            traffic: Traffic::default(),
            trace: Vec::new(),
        })
    }

    fn account(&mut self, busy_unit: Unit, dur: u64) {
        match busy_unit {
            Unit::Bus => self.busy.bus += dur,
            Unit::Port => self.busy.port += dur,
            Unit::Array => self.busy.array += dur,
            Unit::Ppe => self.busy.ppe += dur,
        }
    }

    fn log(&mut self, start: u64, unit: Unit, event: &'static str, level: Level, op: Operand, write: bool, bytes: u64, addr: u64) {
        if bytes == 0 {
            return;
        }
        if level != Level::Writeback {
            if write {
                self.traffic.write(level, op, bytes);
            } else {
                self.traffic.read(level, op, bytes);
            }
        }
        self.trace.push(TraceEvent { cycle: start, unit, event, level, operand: op, write, bytes, addr });
    }

    fn transfer(&mut self, t: &Transfer, event: &'static str) -> Result<()> {
        let n = t.elements();
        let side_bytes = |l: Level| if Mem::entry_level(l) { 4 * n } else { n * t.width as u64 };
        let unit_of = |l: Level| if Mem::entry_level(l) { 1 } else { t.width as u64 };
        let (su, du) = (unit_of(t.src), unit_of(t.dst));
        let sb_lo = t.src_addr as u64;
        let sb_hi = sb_lo + extent(&t.counts, &t.src_strides) * su;
        let db_lo = t.dst_addr as u64;
        let db_hi = db_lo + extent(&t.counts, &t.dst_strides) * du;
        self.mem.check(t.src, sb_lo, sb_hi, false)?;
        self.mem.check(t.dst, db_lo, db_hi, true)?;
        if t.acc && t.dst != Level::OutputRf {
            return Err(Error::Assembly { line: 0, msg: format!("accumulating transfer into {}", t.dst) });
        }
        let [c0, c1, c2, c3] = t.counts;
        let [s1, s2, s3] = t.src_strides;
        let [d1, d2, d3] = t.dst_strides;
        for i3 in 0..c3 as u64 {
            for i2 in 0..c2 as u64 {
                for i1 in 0..c1 as u64 {
                    let sb = t.src_addr as u64 + (i1 * s1 as u64 + i2 * s2 as u64 + i3 * s3 as u64) * su;
                    let db = t.dst_addr as u64 + (i1 * d1 as u64 + i2 * d2 as u64 + i3 * d3 as u64) * du;
                    for i0 in 0..c0 as u64 {
                        let v = self.mem.read(t.src, sb + i0 * su, t.width);
                        self.mem.write(t.dst, db + i0 * du, t.width, v, t.acc);
                    }
                }
            }
        }
        let unit = if t.src == Level::Dram || t.dst == Level::Dram { Unit::Bus } else { Unit::Port };
        let wide = if unit == Unit::Bus { self.arch.dram_bus_bits } else { self.arch.sram_port_bits } as u64 / 8;
        let moved = if Mem::entry_level(t.src) && Mem::entry_level(t.dst) { 4 * n } else { n * t.width as u64 };
        let dur = ceil(moved, wide).max(1);
        let start = self.time.issue(unit, dur, &footprint(&Instr::Load(*t)));
        self.account(unit, dur);
        self.log(start, unit, event, t.src, t.operand, false, side_bytes(t.src), sb_lo);
        self.log(start, unit, event, t.dst, t.operand, true, side_bytes(t.dst), db_lo);
        if t.acc {
            self.log(start, unit, event, t.dst, t.operand, false, side_bytes(t.dst), db_lo);
        }
        Ok(())
    }

    fn waves(&self, c: &ComputeOp) -> u64 {
        let r = self.arch.rows as u64;
        let cl = self.arch.cols as u64;
        let g = |v: u32| v as u64;
        let crow = ceil(g(c.c), r);
        let lanes = if c.fx == 1 && c.fy == 1 { ceil(g(c.ox) * g(c.oy), cl) } else { ceil(g(c.ox), cl) * g(c.oy) };
        match (c.dataflow, c.dw) {
            (Dataflow::OxC, false) => g(c.k) * g(c.fx) * g(c.fy) * crow * lanes,
            (Dataflow::OxC, true) => g(c.c) * g(c.fx) * g(c.fy) * lanes,
            (Dataflow::CK, false) => g(c.ox) * g(c.oy) * g(c.fx) * g(c.fy) * crow * ceil(g(c.k), cl),
            (Dataflow::CK, true) => g(c.ox) * g(c.oy) * g(c.fx) * g(c.fy) * crow,
            (Dataflow::CFx, _) => g(c.ox) * g(c.oy) * g(c.fy) * crow * ceil(g(c.fx), cl),
        }
    }

    fn input_reads(c: &ComputeOp, cols: u64) -> u64 {
        let g = |v: u32| v as u64;
        let px = g(c.ox) * g(c.oy);
        match (c.dataflow, c.dw) {
            (Dataflow::CK, false) => px * g(c.fx) * g(c.fy) * g(c.c) * ceil(g(c.k), cols),
            (Dataflow::CK, true) => px * g(c.fx) * g(c.fy) * g(c.c),
            (Dataflow::OxC, false) => px * g(c.fx) * g(c.fy) * g(c.c) * g(c.k),
            (Dataflow::OxC, true) => px * g(c.fx) * g(c.fy) * g(c.c),
            (Dataflow::CFx, _) => px * g(c.fy) * g(c.c) * g(c.stride.0) * ceil(g(c.fx), cols),
        }
    }

    fn compute(&mut self, c: &ComputeOp) -> Result<()> {
        let outs_k = if c.dw { c.c } else { c.k } as u64;
        let in_len = c.t.0 as u64 * c.t.1 as u64 * c.c as u64;
        let w_len = if c.dw { 1 } else { c.k as u64 } * c.c as u64 * c.fx as u64 * c.fy as u64;
        let rf_hi = c.rf_addr as u64
            + (c.ox as u64 - 1) * c.rf_strides.0 as u64
            + (c.oy as u64 - 1) * c.rf_strides.1 as u64
            + outs_k;
        self.mem.check(Level::InputMem, c.input_addr as u64, c.input_addr as u64 + in_len, false)?;
        self.mem.check(Level::WeightReg, c.weight_addr as u64, c.weight_addr as u64 + w_len, false)?;
        self.mem.check(Level::OutputRf, c.rf_addr as u64, rf_hi, true)?;
        let in_at = |m: &Mem, gx: i64, gy: i64, ch: u32| -> i64 {
            let lx = gx - c.g0.0 as i64;
            let ly = gy - c.g0.1 as i64;
            if lx < 0 || ly < 0 || lx >= c.t.0 as i64 || ly >= c.t.1 as i64 {
                return 0;
            }
            let a = c.input_addr as u64 + ((lx as u64 * c.t.1 as u64 + ly as u64) * c.c as u64) + ch as u64;
            m.input[a as usize] as i8 as i64
        };
        let w_at = |m: &Mem, k: u32, ch: u32, fy: u32, fx: u32| -> i64 {
            let i = if c.dw { (ch * c.fy + fy) * c.fx + fx } else { ((k * c.c + ch) * c.fy + fy) * c.fx + fx };
            m.wreg[c.weight_addr as usize + i as usize] as i8 as i64
        };
        let gx = |xo: u32, fx: u32| ((c.o0.0 + xo) * c.stride.0 + c.f0.0 + fx) as i64 - c.pad.0 as i64;
        let gy = |yo: u32, fy: u32| ((c.o0.1 + yo) * c.stride.1 + c.f0.1 + fy) as i64 - c.pad.1 as i64;
        for xo in 0..c.ox {
            for yo in 0..c.oy {
                let base = c.rf_addr as usize + (xo * c.rf_strides.0 + yo * c.rf_strides.1) as usize;
                for k in 0..outs_k as u32 {
                    let mut sum: i64 = 0;
                    if c.dataflow == Dataflow::CFx {
                        // Row accumulators: each kernel row forms one partial sum across its taps.
                        for fy in 0..c.fy {
                            let mut row = 0i64;
                            for fx in 0..c.fx {
                                let ch = if c.dw { k } else { 0 };
                                let chs = if c.dw { ch..ch + 1 } else { 0..c.c };
                                for ch in chs {
                                    row += in_at(&self.mem, gx(xo, fx), gy(yo, fy), ch) * w_at(&self.mem, k, ch, fy, fx);
                                }
                            }
                            sum += row;
                        }
                    } else {
                        // Column adder trees: one reduction over the channel rows per tap.
                        for fy in 0..c.fy {
                            for fx in 0..c.fx {
                                let chs = if c.dw { k..k + 1 } else { 0..c.c };
                                let mut col = 0i64;
                                for ch in chs {
                                    col += in_at(&self.mem, gx(xo, fx), gy(yo, fy), ch) * w_at(&self.mem, k, ch, fy, fx);
                                }
                                sum += col;
                            }
                        }
                    }
                    let v = sum.clamp(i32::MIN as i64, i32::MAX as i64) as i32;
                    let e = &mut self.mem.rf[base + k as usize];
                    *e = if c.acc { e.saturating_add(v) } else { v };
                }
            }
        }
        let dur = self.waves(c);
        let macs = c.ox as u64 * c.oy as u64 * c.fx as u64 * c.fy as u64 * c.c as u64 * if c.dw { 1 } else { c.k as u64 };
        let outs = c.ox as u64 * c.oy as u64 * outs_k;
        let start = self.time.issue(Unit::Array, dur, &footprint(&Instr::Compute(*c)));
        self.account(Unit::Array, dur);
        self.macs += macs;
        let reads = Self::input_reads(c, self.arch.cols as u64);
        self.log(start, Unit::Array, "COMPUTE", Level::InputMem, Operand::I, false, reads, c.input_addr as u64);
        self.log(start, Unit::Array, "COMPUTE", Level::WeightReg, Operand::W, false, macs, c.weight_addr as u64);
        self.log(start, Unit::Array, "COMPUTE", Level::OutputRf, Operand::O, true, 4 * outs, c.rf_addr as u64);
        if c.acc {
            self.log(start, Unit::Array, "COMPUTE", Level::OutputRf, Operand::O, false, 4 * outs, c.rf_addr as u64);
        }
        Ok(())
    }

    fn postproc(&mut self, p: &PostProcOp) -> Result<()> {
        let stats = p.ops.iter().any(|o| matches!(o, PpOp::LayerNorm { .. } | PpOp::Softmax { .. }));
        if stats && p.len > self.arch.line_buffer_entries {
            return Err(Error::LineBufferOverflow { needed: p.len as usize, capacity: self.arch.line_buffer_entries as usize });
        }
        let src_hi = p.src as u64 + (p.count as u64 - 1) * p.src_stride as u64 + p.len as u64;
        let dst_hi = p.dst as u64 + (p.count as u64 - 1) * p.dst_stride as u64 + p.len as u64;
        self.mem.check(Level::OutputRf, p.src as u64, src_hi, false)?;
        self.mem.check(Level::Writeback, p.dst as u64, dst_hi, true)?;
        let mut tables: Vec<Vec<i16>> = Vec::new();
        let mut param_reads = Vec::new();
        for op in &p.ops {
            if let PpOp::LayerNorm { params } = op {
                let lo = *params as u64;
                let hi = lo + 4 * p.len as u64;
                self.mem.check(Level::Sram, lo, hi, false)?;
                let raw = &self.mem.sram[lo as usize..hi as usize];
                tables.push(raw.chunks(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect());
                if !self.mem.tables.contains(&(lo, hi)) {
                    if self.mem.tables.len() == PPE_TABLES {
                        self.mem.tables.remove(0);
                    }
                    self.mem.tables.push((lo, hi));
                    param_reads.push(lo);
                }
            }
        }
        let norm: Vec<NormTable<'_>> = tables.iter().map(|t| NormTable { raw: t }).collect();
        for i in 0..p.count as usize {
            let s = p.src as usize + i * p.src_stride as usize;
            let v = postprocess(&self.mem.rf[s..s + p.len as usize], &p.ops, &norm)?;
            let d = p.dst as usize + i * p.dst_stride as usize;
            self.mem.wb[d..d + p.len as usize].copy_from_slice(&v);
        }
        let n = p.len as u64 * p.count as u64;
        let dur = ceil(n, self.arch.ppe_lanes as u64);
        let start = self.time.issue(Unit::Ppe, dur, &footprint(&Instr::PostProc(p.clone())));
        self.account(Unit::Ppe, dur);
        self.log(start, Unit::Ppe, "POSTPROC", Level::OutputRf, Operand::O, false, 4 * n, p.src as u64);
        self.log(start, Unit::Ppe, "POSTPROC", Level::Writeback, Operand::O, true, 4 * n, p.dst as u64);
        for lo in param_reads {
            self.log(start, Unit::Ppe, "POSTPROC", Level::Sram, Operand::W, false, 4 * p.len as u64, lo);
        }
        Ok(())
    }

    /// Execute decoded instructions until HALT.
    pub fn execute(&mut self, program: &[Instr]) -> Result<usize> {
        for (n, ins) in program.iter().enumerate() {
            ins.validate()?;
            match ins {
                Instr::Load(t) => self.transfer(t, "LOAD")?,
                Instr::Store(t) => self.transfer(t, "STORE")?,
                Instr::Compute(c) => self.compute(c)?,
                Instr::PostProc(p) => self.postproc(p)?,
                Instr::Sync => self.time.sync(),
                Instr::Halt => return Ok(n + 1),
            }
            if self.time.last_end > self.arch.watchdog_cycles {
                return Err(Error::Watchdog(self.arch.watchdog_cycles));
            }
        }
        if program.is_empty() {
            return Ok(0);
        }
        Err(Error::Decode { word: program.len(), msg: "program ends without HALT".into() })
    }

    pub fn finish(self, instructions: usize) -> RunResult {
        RunResult {
            dram: self.mem.dram,
            sram: self.mem.sram,
            cycles: self.time.last_end,
            busy: self.busy,
            macs: self.macs,
            traffic: self.traffic,
            trace: self.trace,
            instructions,
        }
    }
}

/// Run a binary program against a DRAM image.
pub fn run(words: &[u32], dram: Vec<u8>, arch: &ArchConfig) -> Result<RunResult> {
    run_image(words, MemImage { dram, sram: Vec::new() }, arch)
}

/// Run a binary program against DRAM and SRAM images.
pub fn run_image(words: &[u32], image: MemImage, arch: &ArchConfig) -> Result<RunResult> {
    let program = decode(words)?;
    run_program(&program, image, arch)
}

pub fn run_program(program: &[Instr], image: MemImage, arch: &ArchConfig) -> Result<RunResult> {
    let mut m = Machine::new(arch, image)?;
    let n = m.execute(program)?;
    Ok(m.finish(n))
}
