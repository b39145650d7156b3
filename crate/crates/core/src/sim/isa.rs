//! Controller instruction set: 32-bit words, multi-word instructions.
//!
//! Word 0 of every instruction carries the opcode in bits 31..28.
//!
//! | op | words | layout |
//! |----|-------|--------|
//! | LOAD / STORE = 1 / 2 | 11 | w0: src 27..25, dst 24..22, operand 21..20, wide 19, acc 18; w1 src addr; w2 dst addr; w3 n0:n1; w4 n2:n3; w5..7 src strides; w8..10 dst strides |
//! | COMPUTE = 3 | 10 | w0: dataflow 27..26, acc 25, dw 24, sx 23..20, sy 19..16, px 15..12, py 11..8; w1 k:c; w2 ox:oy; w3 fx:fy:fx0:fy0 (8 bit each); w4 ox0:oy0; w5 gx0:gy0 (signed); w6 tx:ty; w7 in:wreg; w8 rf:rf_sx; w9 rf_sy:0 |
//! | POSTPROC = 4 | 4 + 2n | w0: n ops 27..25; w1 src:dst; w2 len:count; w3 src stride:dst stride; per op: (kind 31..28, sub 27..24, shift 23..16), (mult or address) |
//! | SYNC = 5, HALT = 15 | 1 | |
//!
//! `a:b` packs two 16-bit fields, `a` in the high half.
//!
//! Assembly: one instruction per line, `key=value` operands, `#` starts a comment.
//! ```text
//! LOAD op=I src=SRAM@0 dst=INPUT@0 w=1 acc=0 n=16,1,1,1 ss=16,16,16 ds=16,16,16
//! COMPUTE df=C|K acc=0 dw=0 s=1,1 p=0,0 k=16 c=16 ox=1 oy=1 fx=1 fy=1 f0=0,0 o0=0,0 g0=0,0 t=1,1 in=0 w=0 rf=0 rfs=16,16
//! POSTPROC src=0 dst=0 len=16 count=1 ss=16 ds=16 ops=requant:1:6,gelu
//! STORE op=O src=WB@0 dst=SRAM@256 w=1 acc=0 n=16,1,1,1 ss=16,16,16 ds=16,16,16
//! HALT
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use crate::arch::Level;
use crate::error::{Error, Result};
use crate::mapping::Dataflow;
use crate::workload::{ActKind, Operand};

const OP_LOAD: u32 = 1;
const OP_STORE: u32 = 2;
const OP_COMPUTE: u32 = 3;
const OP_POSTPROC: u32 = 4;
const OP_SYNC: u32 = 5;
const OP_HALT: u32 = 15;

/// Strided block move of up to four nested dimensions. Element `(i0..i3)`
/// sits `i0 + i1*s1 + i2*s2 + i3*s3` elements past `addr`. Byte levels take
/// `addr` in bytes and elements `width` bytes wide; RF and WB count both in
/// 32-bit entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transfer {
    pub operand: Operand,
    pub src: Level,
    pub dst: Level,
    pub src_addr: u32,
    pub dst_addr: u32,
    /// Bytes per element on byte-addressed sides: 1 or 4.
    pub width: u8,
    /// Accumulate into the register file instead of overwriting.
    pub acc: bool,
    pub counts: [u32; 4],
    pub src_strides: [u32; 3],
    pub dst_strides: [u32; 3],
}

impl Transfer {
    pub fn elements(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).product()
    }

    /// Dense `counts` block with contiguous layout on both sides.
    pub fn dense_strides(counts: [u32; 4]) -> [u32; 3] {
        [counts[0], counts[0] * counts[1], counts[0] * counts[1] * counts[2]]
    }
}

/// One array pass over a tile. Outputs land at
/// `rf + xo*rf_sx + yo*rf_sy + k`; the input window holds
/// `[gx0, gx0+tx) x [gy0, gy0+ty)` with `c` channels, dense `[x][y][c]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComputeOp {
    pub dataflow: Dataflow,
    pub acc: bool,
    pub dw: bool,
    pub stride: (u32, u32),
    pub pad: (u32, u32),
    pub k: u32,
    pub c: u32,
    pub ox: u32,
    pub oy: u32,
    pub fx: u32,
    pub fy: u32,
    pub f0: (u32, u32),
    pub o0: (u32, u32),
    pub g0: (i32, i32),
    pub t: (u32, u32),
    pub input_addr: u32,
    pub weight_addr: u32,
    pub rf_addr: u32,
    pub rf_strides: (u32, u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PpOp {
    Requant { mult: i32, shift: u8 },
    Act(ActKind),
    /// Q8 gamma then beta, `len` little-endian i16 each, at an SRAM address.
    LayerNorm { params: u32 },
    Softmax { mult: i32, shift: u8 },
}

/// Post-process `count` vectors of `len` RF entries into the write-back buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PostProcOp {
    pub src: u32,
    pub dst: u32,
    pub len: u32,
    pub count: u32,
    pub src_stride: u32,
    pub dst_stride: u32,
    pub ops: Vec<PpOp>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Instr {
    Load(Transfer),
    Store(Transfer),
    Compute(ComputeOp),
    PostProc(PostProcOp),
    Sync,
    Halt,
}

const fn pack(hi: u32, lo: u32) -> u32 {
    (hi << 16) | (lo & 0xffff)
}

fn level_code(l: Level) -> u32 {
    l.index() as u32
}

fn operand_code(o: Operand) -> u32 {
    o.index() as u32
}

fn operand_from(c: u32) -> Option<Operand> {
    [Operand::I, Operand::W, Operand::O].get(c as usize).copied()
}

fn fits(v: u64, bits: u32, what: &str) -> Result<()> {
    if v >= 1u64 << bits {
        return Err(Error::Assembly { line: 0, msg: format!("{what} = {v} does not fit {bits} bits") });
    }
    Ok(())
}

fn positive16(v: u32, what: &str) -> Result<()> {
    if v == 0 {
        return Err(Error::Assembly { line: 0, msg: format!("{what} must be at least 1") });
    }
    fits(v as u64, 16, what)
}

impl Instr {
    /// Field range checks shared by the encoder and the assembler.
    pub fn validate(&self) -> Result<()> {
        match self {
            Instr::Load(t) | Instr::Store(t) => {
                for (i, &c) in t.counts.iter().enumerate() {
                    positive16(c, &format!("n{i}"))?;
                }
                if !matches!(t.width, 1 | 4) {
                    return Err(Error::Assembly { line: 0, msg: format!("width {} is not 1 or 4", t.width) });
                }
                if t.src == t.dst && t.src != Level::Sram {
                    return Err(Error::Assembly { line: 0, msg: format!("{} to itself", t.src) });
                }
                Ok(())
            }
            Instr::Compute(c) => {
                for (v, n) in [(c.k, "k"), (c.c, "c"), (c.ox, "ox"), (c.oy, "oy")] {
                    positive16(v, n)?;
                }
                for (v, n) in [(c.fx, "fx"), (c.fy, "fy")] {
                    if v == 0 {
                        return Err(Error::Assembly { line: 0, msg: format!("{n} must be at least 1") });
                    }
                    fits(v as u64, 8, n)?;
                }
                fits(c.f0.0 as u64, 8, "fx0")?;
                fits(c.f0.1 as u64, 8, "fy0")?;
                for (v, n) in [(c.stride.0, "sx"), (c.stride.1, "sy")] {
                    if v == 0 {
                        return Err(Error::Assembly { line: 0, msg: format!("{n} must be at least 1") });
                    }
                    fits(v as u64, 4, n)?;
                }
                fits(c.pad.0 as u64, 4, "px")?;
                fits(c.pad.1 as u64, 4, "py")?;
                for (v, n) in [
                    (c.o0.0, "ox0"),
                    (c.o0.1, "oy0"),
                    (c.t.0, "tx"),
                    (c.t.1, "ty"),
                    (c.input_addr, "in"),
                    (c.weight_addr, "w"),
                    (c.rf_addr, "rf"),
                    (c.rf_strides.0, "rf_sx"),
                    (c.rf_strides.1, "rf_sy"),
                ] {
                    fits(v as u64, 16, n)?;
                }
                for (v, n) in [(c.g0.0, "gx0"), (c.g0.1, "gy0")] {
                    if !(i16::MIN as i32..=i16::MAX as i32).contains(&v) {
                        return Err(Error::Assembly { line: 0, msg: format!("{n} = {v} does not fit 16 bits") });
                    }
                }
                Ok(())
            }
            Instr::PostProc(p) => {
                positive16(p.len, "len")?;
                positive16(p.count, "count")?;
                for (v, n) in [(p.src, "src"), (p.dst, "dst"), (p.src_stride, "ss"), (p.dst_stride, "ds")] {
                    fits(v as u64, 16, n)?;
                }
                if p.ops.is_empty() || p.ops.len() > 7 {
                    return Err(Error::Assembly { line: 0, msg: format!("{} post-ops (1..=7 allowed)", p.ops.len()) });
                }
                for op in &p.ops {
                    if let PpOp::Requant { shift, .. } | PpOp::Softmax { shift, .. } = op {
                        if *shift > 31 {
                            return Err(Error::Assembly { line: 0, msg: format!("shift {shift} outside 0..=31") });
                        }
                    }
                }
                Ok(())
            }
            Instr::Sync | Instr::Halt => Ok(()),
        }
    }

    pub fn encode(&self, out: &mut Vec<u32>) -> Result<()> {
        self.validate()?;
        match self {
            Instr::Load(t) | Instr::Store(t) => {
                let op = if matches!(self, Instr::Load(_)) { OP_LOAD } else { OP_STORE };
                out.push(
                    op << 28
                        | level_code(t.src) << 25
                        | level_code(t.dst) << 22
                        | operand_code(t.operand) << 20
                        | ((t.width == 4) as u32) << 19
                        | (t.acc as u32) << 18,
                );
                out.extend_from_slice(&[
                    t.src_addr,
                    t.dst_addr,
                    pack(t.counts[0], t.counts[1]),
                    pack(t.counts[2], t.counts[3]),
                ]);
                out.extend_from_slice(&t.src_strides);
                out.extend_from_slice(&t.dst_strides);
            }
            Instr::Compute(c) => {
                out.push(
                    OP_COMPUTE << 28
                        | c.dataflow.code() << 26
                        | (c.acc as u32) << 25
                        | (c.dw as u32) << 24
                        | c.stride.0 << 20
                        | c.stride.1 << 16
                        | c.pad.0 << 12
                        | c.pad.1 << 8,
                );
                out.extend_from_slice(&[
                    pack(c.k, c.c),
                    pack(c.ox, c.oy),
                    c.fx << 24 | c.fy << 16 | c.f0.0 << 8 | c.f0.1,
                    pack(c.o0.0, c.o0.1),
                    pack(c.g0.0 as u16 as u32, c.g0.1 as u16 as u32),
                    pack(c.t.0, c.t.1),
                    pack(c.input_addr, c.weight_addr),
                    pack(c.rf_addr, c.rf_strides.0),
                    pack(c.rf_strides.1, 0),
                ]);
            }
            Instr::PostProc(p) => {
                out.push(OP_POSTPROC << 28 | (p.ops.len() as u32) << 25);
                out.extend_from_slice(&[pack(p.src, p.dst), pack(p.len, p.count), pack(p.src_stride, p.dst_stride)]);
                for op in &p.ops {
                    let (kind, sub, shift, arg) = match *op {
                        PpOp::Requant { mult, shift } => (1, 0, shift, mult as u32),
                        PpOp::Act(a) => (2, a as u32, 0, 0),
                        PpOp::LayerNorm { params } => (3, 0, 0, params),
                        PpOp::Softmax { mult, shift } => (4, 0, shift, mult as u32),
                    };
                    out.push(kind << 28 | sub << 24 | (shift as u32) << 16);
                    out.push(arg);
                }
            }
            Instr::Sync => out.push(OP_SYNC << 28),
            Instr::Halt => out.push(OP_HALT << 28),
        }
        Ok(())
    }

    /// Decode one instruction at `words[at..]`; returns it and its length.
    pub fn decode(words: &[u32], at: usize) -> Result<(Instr, usize)> {
        let bad = |msg: String| Error::Decode { word: at, msg };
        let w0 = *words.get(at).ok_or_else(|| bad("past end of stream".into()))?;
        let need = |n: usize| -> Result<&[u32]> {
            words.get(at..at + n).ok_or_else(|| Error::Decode { word: at, msg: format!("truncated, needs {n} words") })
        };
        let hi = |w: u32| w >> 16;
        let lo = |w: u32| w & 0xffff;
        let level = |c: u32| Level::from_code(c).ok_or_else(|| Error::Decode { word: at, msg: format!("bad level {c}") });
        let instr = match w0 >> 28 {
            OP_LOAD | OP_STORE => {
                let w = need(11)?;
                let t = Transfer {
                    src: level((w0 >> 25) & 7)?,
                    dst: level((w0 >> 22) & 7)?,
                    operand: operand_from((w0 >> 20) & 3).ok_or_else(|| bad("bad operand".into()))?,
                    width: if (w0 >> 19) & 1 == 1 { 4 } else { 1 },
                    acc: (w0 >> 18) & 1 == 1,
                    src_addr: w[1],
                    dst_addr: w[2],
                    counts: [hi(w[3]), lo(w[3]), hi(w[4]), lo(w[4])],
                    src_strides: [w[5], w[6], w[7]],
                    dst_strides: [w[8], w[9], w[10]],
                };
                (if w0 >> 28 == OP_LOAD { Instr::Load(t) } else { Instr::Store(t) }, 11)
            }
            OP_COMPUTE => {
                let w = need(10)?;
                let c = ComputeOp {
                    dataflow: Dataflow::from_code((w0 >> 26) & 3).ok_or_else(|| bad("bad dataflow".into()))?,
                    acc: (w0 >> 25) & 1 == 1,
                    dw: (w0 >> 24) & 1 == 1,
                    stride: ((w0 >> 20) & 15, (w0 >> 16) & 15),
                    pad: ((w0 >> 12) & 15, (w0 >> 8) & 15),
                    k: hi(w[1]),
                    c: lo(w[1]),
                    ox: hi(w[2]),
                    oy: lo(w[2]),
                    fx: w[3] >> 24,
                    fy: (w[3] >> 16) & 255,
                    f0: ((w[3] >> 8) & 255, w[3] & 255),
                    o0: (hi(w[4]), lo(w[4])),
                    g0: (hi(w[5]) as u16 as i16 as i32, lo(w[5]) as u16 as i16 as i32),
                    t: (hi(w[6]), lo(w[6])),
                    input_addr: hi(w[7]),
                    weight_addr: lo(w[7]),
                    rf_addr: hi(w[8]),
                    rf_strides: (lo(w[8]), hi(w[9])),
                };
                (Instr::Compute(c), 10)
            }
            OP_POSTPROC => {
                let n = ((w0 >> 25) & 7) as usize;
                let w = need(4 + 2 * n)?;
                let mut ops = Vec::with_capacity(n);
                for i in 0..n {
                    let (h, a) = (w[4 + 2 * i], w[5 + 2 * i]);
                    let shift = ((h >> 16) & 255) as u8;
                    ops.push(match h >> 28 {
                        1 => PpOp::Requant { mult: a as i32, shift },
                        2 => PpOp::Act(match (h >> 24) & 15 {
                            0 => ActKind::Relu,
                            1 => ActKind::Gelu,
                            s => return Err(bad(format!("bad activation {s}"))),
                        }),
                        3 => PpOp::LayerNorm { params: a },
                        4 => PpOp::Softmax { mult: a as i32, shift },
                        k => return Err(bad(format!("bad post-op kind {k}"))),
                    });
                }
                let p = PostProcOp {
                    src: hi(w[1]),
                    dst: lo(w[1]),
                    len: hi(w[2]),
                    count: lo(w[2]),
                    src_stride: hi(w[3]),
                    dst_stride: lo(w[3]),
                    ops,
                };
                (Instr::PostProc(p), 4 + 2 * n)
            }
            OP_SYNC => (Instr::Sync, 1),
            OP_HALT => (Instr::Halt, 1),
            op => return Err(bad(format!("unknown opcode {op}"))),
        };
        instr.0.validate().map_err(|e| bad(e.to_string()))?;
        Ok(instr)
    }
}

pub fn encode(program: &[Instr]) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for i in program {
        i.encode(&mut out)?;
    }
    Ok(out)
}

pub fn decode(words: &[u32]) -> Result<Vec<Instr>> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < words.len() {
        let (i, n) = Instr::decode(words, at)?;
        out.push(i);
        at += n;
    }
    Ok(out)
}

fn list<T: core::fmt::Display>(v: &[T]) -> String {
    let mut s = String::new();
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{x}");
    }
    s
}

impl core::fmt::Display for Instr {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Instr::Load(t) | Instr::Store(t) => write!(
                f,
                "{} op={} src={}@{} dst={}@{} w={} acc={} n={} ss={} ds={}",
                if matches!(self, Instr::Load(_)) { "LOAD" } else { "STORE" },
                t.operand.name(),
                t.src,
                t.src_addr,
                t.dst,
                t.dst_addr,
                t.width,
                t.acc as u8,
                list(&t.counts),
                list(&t.src_strides),
                list(&t.dst_strides)
            ),
            Instr::Compute(c) => write!(
                f,
                "COMPUTE df={} acc={} dw={} s={},{} p={},{} k={} c={} ox={} oy={} fx={} fy={} f0={},{} o0={},{} g0={},{} t={},{} in={} w={} rf={} rfs={},{}",
                c.dataflow.name(),
                c.acc as u8,
                c.dw as u8,
                c.stride.0,
                c.stride.1,
                c.pad.0,
                c.pad.1,
                c.k,
                c.c,
                c.ox,
                c.oy,
                c.fx,
                c.fy,
                c.f0.0,
                c.f0.1,
                c.o0.0,
                c.o0.1,
                c.g0.0,
                c.g0.1,
                c.t.0,
                c.t.1,
                c.input_addr,
                c.weight_addr,
                c.rf_addr,
                c.rf_strides.0,
                c.rf_strides.1
            ),
            Instr::PostProc(p) => {
                write!(
                    f,
                    "POSTPROC src={} dst={} len={} count={} ss={} ds={} ops=",
                    p.src, p.dst, p.len, p.count, p.src_stride, p.dst_stride
                )?;
                for (i, op) in p.ops.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    match op {
                        PpOp::Requant { mult, shift } => write!(f, "requant:{mult}:{shift}")?,
                        PpOp::Act(a) => f.write_str(a.name())?,
                        PpOp::LayerNorm { params } => write!(f, "ln@{params}")?,
                        PpOp::Softmax { mult, shift } => write!(f, "softmax:{mult}:{shift}")?,
                    }
                }
                Ok(())
            }
            Instr::Sync => f.write_str("SYNC"),
            Instr::Halt => f.write_str("HALT"),
        }
    }
}

/// Canonical assembly text of a program, one instruction per line.
pub fn disassemble(program: &[Instr]) -> String {
    let mut s = String::new();
    for i in program {
        let _ = writeln!(s, "{i}");
    }
    s
}

struct Fields<'a> {
    line: usize,
    kv: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn err(&self, msg: String) -> Error {
        Error::Assembly { line: self.line, msg }
    }

    fn raw(&self, key: &str) -> Result<&'a str> {
        self.kv.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).ok_or_else(|| self.err(format!("missing `{key}=`")))
    }

    fn num<T: core::str::FromStr>(&self, s: &str, key: &str) -> Result<T> {
        let v = if let Some(h) = s.strip_prefix("0x") {
            i64::from_str_radix(h, 16).ok().map(|v| v.to_string())
        } else {
            Some(s.to_string())
        };
        v.and_then(|v| v.parse().ok()).ok_or_else(|| self.err(format!("`{key}`: bad number `{s}`")))
    }

    fn get<T: core::str::FromStr>(&self, key: &str) -> Result<T> {
        let s = self.raw(key)?;
        self.num(s, key)
    }

    fn opt<T: core::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.kv.iter().find(|(k, _)| *k == key) {
            Some((_, v)) => self.num(v, key),
            None => Ok(default),
        }
    }

    fn pair<T: core::str::FromStr + Copy>(&self, key: &str, default: (T, T)) -> Result<(T, T)> {
        match self.kv.iter().find(|(k, _)| *k == key) {
            None => Ok(default),
            Some((_, v)) => {
                let p: Vec<&str> = v.split(',').collect();
                if p.len() != 2 {
                    return Err(self.err(format!("`{key}` needs two values")));
                }
                Ok((self.num(p[0], key)?, self.num(p[1], key)?))
            }
        }
    }

    fn array<const N: usize>(&self, key: &str, default: u32) -> Result<[u32; N]> {
        let mut out = [default; N];
        if let Some((_, v)) = self.kv.iter().find(|(k, _)| *k == key) {
            let p: Vec<&str> = v.split(',').collect();
            if p.len() > N {
                return Err(self.err(format!("`{key}` takes at most {N} values")));
            }
            for (i, s) in p.iter().enumerate() {
                out[i] = self.num(s, key)?;
            }
        }
        Ok(out)
    }

    fn located(&self, key: &str) -> Result<(Level, u32)> {
        let s = self.raw(key)?;
        let (l, a) = s.split_once('@').ok_or_else(|| self.err(format!("`{key}` must be LEVEL@ADDR")))?;
        let lv = Level::parse(l).ok_or_else(|| self.err(format!("unknown level `{l}`")))?;
        Ok((lv, self.num(a, key)?))
    }
}

fn parse_line(line: usize, text: &str) -> Result<Option<Instr>> {
    let text = text.split('#').next().unwrap_or("").trim();
    if text.is_empty() {
        return Ok(None);
    }
    let mut parts = text.split_whitespace();
    let mnemonic = parts.next().unwrap_or("").to_ascii_uppercase();
    let mut kv = Vec::new();
    for p in parts {
        let (k, v) = p.split_once('=').ok_or_else(|| Error::Assembly { line, msg: format!("expected key=value, got `{p}`") })?;
        kv.push((k, v));
    }
    let f = Fields { line, kv };
    let instr = match mnemonic.as_str() {
        "LOAD" | "STORE" => {
            let (src, src_addr) = f.located("src")?;
            let (dst, dst_addr) = f.located("dst")?;
            let op = f.raw("op")?;
            let operand = match op {
                "I" => Operand::I,
                "W" => Operand::W,
                "O" => Operand::O,
                _ => return Err(f.err(format!("unknown operand `{op}`"))),
            };
            let counts = f.array::<4>("n", 1)?;
            let t = Transfer {
                operand,
                src,
                dst,
                src_addr,
                dst_addr,
                width: f.opt("w", 1u8)?,
                acc: f.opt("acc", 0u8)? != 0,
                counts,
                src_strides: match f.kv.iter().any(|(k, _)| *k == "ss") {
                    true => f.array::<3>("ss", 0)?,
                    false => Transfer::dense_strides(counts),
                },
                dst_strides: match f.kv.iter().any(|(k, _)| *k == "ds") {
                    true => f.array::<3>("ds", 0)?,
                    false => Transfer::dense_strides(counts),
                },
            };
            if mnemonic == "LOAD" {
                Instr::Load(t)
            } else {
                Instr::Store(t)
            }
        }
        "COMPUTE" => {
            let df = f.raw("df")?;
            let c = ComputeOp {
                dataflow: Dataflow::parse(df).ok_or_else(|| f.err(format!("unknown dataflow `{df}`")))?,
                acc: f.opt("acc", 0u8)? != 0,
                dw: f.opt("dw", 0u8)? != 0,
                stride: f.pair("s", (1, 1))?,
                pad: f.pair("p", (0, 0))?,
                k: f.get("k")?,
                c: f.get("c")?,
                ox: f.get("ox")?,
                oy: f.opt("oy", 1)?,
                fx: f.opt("fx", 1)?,
                fy: f.opt("fy", 1)?,
                f0: f.pair("f0", (0, 0))?,
                o0: f.pair("o0", (0, 0))?,
                g0: f.pair("g0", (0, 0))?,
                t: f.pair("t", (0, 0))?,
                input_addr: f.opt("in", 0)?,
                weight_addr: f.opt("w", 0)?,
                rf_addr: f.opt("rf", 0)?,
                rf_strides: f.pair("rfs", (0, 0))?,
            };
            Instr::Compute(c)
        }
        "POSTPROC" => {
            let mut ops = Vec::new();
            for o in f.raw("ops")?.split(',') {
                let p: Vec<&str> = o.split(':').collect();
                let arg = |i: usize| -> Result<&str> { p.get(i).copied().ok_or_else(|| f.err(format!("`{o}` is missing fields"))) };
                ops.push(if let Some(addr) = o.strip_prefix("ln@") {
                    PpOp::LayerNorm { params: f.num(addr, "ln")? }
                } else {
                    match p[0] {
                        "requant" => PpOp::Requant { mult: f.num(arg(1)?, "requant")?, shift: f.num(arg(2)?, "requant")? },
                        "softmax" => PpOp::Softmax { mult: f.num(arg(1)?, "softmax")?, shift: f.num(arg(2)?, "softmax")? },
                        a => PpOp::Act(ActKind::parse(a).ok_or_else(|| f.err(format!("unknown post-op `{a}`")))?),
                    }
                });
            }
            let len = f.get("len")?;
            Instr::PostProc(PostProcOp {
                src: f.opt("src", 0)?,
                dst: f.opt("dst", 0)?,
                len,
                count: f.opt("count", 1)?,
                src_stride: f.opt("ss", len)?,
                dst_stride: f.opt("ds", len)?,
                ops,
            })
        }
        "SYNC" => Instr::Sync,
        "HALT" => Instr::Halt,
        m => return Err(Error::Assembly { line, msg: format!("unknown mnemonic `{m}`") }),
    };
    instr.validate().map_err(|e| match e {
        Error::Assembly { msg, .. } => Error::Assembly { line, msg },
        e => e,
    })?;
    Ok(Some(instr))
}

/// Parse assembly text into instructions.
pub fn parse(text: &str) -> Result<Vec<Instr>> {
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        if let Some(ins) = parse_line(i + 1, l)? {
            out.push(ins);
        }
    }
    Ok(out)
}

/// Assemble text straight to the binary word stream.
pub fn assemble(text: &str) -> Result<Vec<u32>> {
    encode(&parse(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halt_is_one_word() {
        assert_eq!(assemble("HALT").unwrap(), vec![0xf000_0000]);
    }

    #[test]
    fn zero_bound_is_rejected() {
        let e = assemble("COMPUTE df=C|K k=0 c=16 ox=1").unwrap_err();
        assert!(matches!(e, Error::Assembly { line: 1, .. }), "{e}");
    }

    #[test]
    fn roundtrip_normalizes() {
        let text = "  load op=I src=SRAM@0x10 dst=INPUT@0 n=16   # comment\n\
                    COMPUTE df=C|FX dw=1 k=1 c=16 ox=4 oy=4 fx=3 fy=3 p=1,1 g0=-1,-1 t=5,5 rfs=64,16\n\
                    POSTPROC len=16 count=4 ops=requant:3:7,gelu,ln@4096,softmax:12:2\n\
                    STORE op=O src=WB@0 dst=DRAM@100 w=1 n=16,4 ss=16,64,64 ds=96,96,96\nSYNC\nHALT\n";
        let words = assemble(text).unwrap();
        let prog = decode(&words).unwrap();
        let norm = disassemble(&prog);
        assert_eq!(assemble(&norm).unwrap(), words);
        assert_eq!(disassemble(&parse(&norm).unwrap()), norm);
        assert!(norm.starts_with("LOAD op=I src=SRAM@16 dst=INPUT@0 w=1 acc=0 n=16,1,1,1"));
    }

    #[test]
    fn bad_lines_report_position() {
        let e = parse("HALT\nFROB x=1").unwrap_err();
        assert!(matches!(e, Error::Assembly { line: 2, .. }));
        let e = parse("LOAD op=I src=SRAM@0 dst=INPUT@0 n=70000").unwrap_err();
        assert!(matches!(e, Error::Assembly { line: 1, .. }));
    }

    #[test]
    fn truncated_stream_fails_to_decode() {
        let mut w = assemble("LOAD op=I src=SRAM@0 dst=INPUT@0 n=4").unwrap();
        w.pop();
        assert!(matches!(decode(&w), Err(Error::Decode { .. })));
        assert!(decode(&[0]).is_err());
    }
}
