//! Binary artifacts: flat memory images and tensors, each with a JSON
//! sidecar at `<file>.json`, plus access traces.

use std::fs;
use std::path::{Path, PathBuf};

use hyvit_core::golden::QTensor;
use hyvit_core::sim::{RunResult, TraceEvent};
use hyvit_core::workload::TensorShape;
use hyvit_core::{ArchConfig, Level};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::REPORT_SCHEMA;

pub const IMAGE_SCHEMA: &str = "hyvit.image.v1";

/// A named tensor inside a memory image.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorPlacement {
    pub name: String,
    /// `dram` or `sram`.
    pub level: String,
    pub addr: u64,
    /// `[B, X, Y, C]`.
    pub shape: [u32; 4],
    pub bits: u32,
}

impl TensorPlacement {
    pub fn bytes(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product::<u64>() * self.bits as u64 / 8
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Sidecar {
    pub schema: String,
    pub bytes: u64,
    pub tensors: Vec<TensorPlacement>,
}

pub fn sidecar_path(bin: &Path) -> PathBuf {
    let mut s = bin.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read(p: &Path) -> Result<Vec<u8>> {
    fs::read(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, b: &[u8]) -> Result<()> {
    fs::write(p, b).map_err(|e| Error::io(p, e))
}

/// Write `bytes` to `bin` and the placement list next to it.
pub fn write_image(bin: &Path, bytes: &[u8], tensors: Vec<TensorPlacement>) -> Result<()> {
    for t in &tensors {
        if t.level == "dram" && t.addr + t.bytes() > bytes.len() as u64 {
            return Err(Error::Model(hyvit_core::Error::OutOfRange { level: "DRAM", addr: t.addr, len: t.bytes() }));
        }
    }
    write(bin, bytes)?;
    let side = Sidecar { schema: IMAGE_SCHEMA.into(), bytes: bytes.len() as u64, tensors };
    write(&sidecar_path(bin), serde_json::to_string_pretty(&side)?.as_bytes())
}

/// Read an image and its sidecar; a missing sidecar means no named tensors.
pub fn read_image(bin: &Path) -> Result<(Vec<u8>, Sidecar)> {
    let bytes = read(bin)?;
    let sp = sidecar_path(bin);
    let side = if sp.exists() {
        let s: Sidecar = serde_json::from_slice(&read(&sp)?)?;
        if s.schema != IMAGE_SCHEMA || s.bytes != bytes.len() as u64 {
            return Err(Error::parse(1, format!("{}: sidecar does not describe this image", sp.display())));
        }
        s
    } else {
        Sidecar { schema: IMAGE_SCHEMA.into(), bytes: bytes.len() as u64, tensors: Vec::new() }
    };
    Ok((bytes, side))
}

/// Store a tensor as a flat file (bytes or little-endian words).
pub fn write_tensor(bin: &Path, name: &str, t: &QTensor) -> Result<()> {
    let s = t.shape;
    let p = TensorPlacement { name: name.into(), level: "dram".into(), addr: 0, shape: [s.b, s.x, s.y, s.c], bits: t.bits as u32 };
    write_image(bin, &t.to_bytes(), vec![p])
}

pub fn read_tensor(bin: &Path) -> Result<QTensor> {
    let (bytes, side) = read_image(bin)?;
    let [p] = &side.tensors[..] else {
        return Err(Error::parse(1, format!("{}: expected exactly one tensor", bin.display())));
    };
    tensor_at(&bytes, p)
}

/// Decode the tensor `p` from a flat image.
pub fn tensor_at(bytes: &[u8], p: &TensorPlacement) -> Result<QTensor> {
    let [b, x, y, c] = p.shape;
    let shape = TensorShape::new(b, x, y, c);
    let (at, n) = (p.addr as usize, p.bytes() as usize);
    let raw = bytes.get(at..at + n).ok_or(Error::Model(hyvit_core::Error::OutOfRange { level: "DRAM", addr: p.addr, len: p.bytes() }))?;
    let data = match p.bits {
        8 => raw.iter().map(|&v| v as i8 as i32).collect(),
        32 => raw.chunks_exact(4).map(|w| i32::from_le_bytes([w[0], w[1], w[2], w[3]])).collect(),
        b => return Err(Error::parse(1, format!("`{}`: unsupported element width {b}", p.name))),
    };
    Ok(QTensor::new(shape, p.bits as u8, data)?)
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct TraceRow<'a> {
    pub cycle: u64,
    pub unit: &'a str,
    pub event: &'a str,
    pub level: &'a str,
    pub operand: &'a str,
    pub dir: &'a str,
    pub bytes: u64,
    pub addr: u64,
}

/// Access-trace CSV writer; `offset` shifts cycles of back-to-back programs.
pub struct TraceWriter {
    w: csv::Writer<fs::File>,
    path: PathBuf,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(TraceWriter { w: csv::Writer::from_path(path)?, path: path.to_path_buf() })
    }

    pub fn write(&mut self, events: &[TraceEvent], offset: u64) -> Result<()> {
        for e in events {
            self.w.serialize(TraceRow {
                cycle: e.cycle + offset,
                unit: e.unit.name(),
                event: e.event,
                level: e.level.name(),
                operand: e.operand.name(),
                dir: if e.write { "w" } else { "r" },
                bytes: e.bytes,
                addr: e.addr,
            })?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct LevelSummary {
    pub level: &'static str,
    pub read_bytes: u64,
    pub write_bytes: u64,
    pub energy_pj: f64,
}

/// JSON summary of one program run.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RunSummary {
    pub schema: &'static str,
    pub cycles: u64,
    pub macs: u64,
    pub instructions: usize,
    pub levels: Vec<LevelSummary>,
    pub mac_energy_pj: f64,
    pub energy_pj: f64,
}

impl RunSummary {
    pub fn new(r: &RunResult, arch: &ArchConfig) -> Self {
        let ops = hyvit_core::workload::Operand::ALL;
        let levels = Level::ENERGY
            .iter()
            .map(|&l| {
                let rd: u64 = ops.iter().map(|&o| r.traffic.reads(l, o)).sum();
                let wr: u64 = ops.iter().map(|&o| r.traffic.writes(l, o)).sum();
                LevelSummary { level: l.name(), read_bytes: rd, write_bytes: wr, energy_pj: (rd + wr) as f64 * arch.energy.per_byte(l) }
            })
            .collect();
        RunSummary {
            schema: REPORT_SCHEMA,
            cycles: r.cycles,
            macs: r.macs,
            instructions: r.instructions,
            levels,
            mac_energy_pj: r.macs as f64 * arch.energy.mac,
            energy_pj: r.energy_pj(arch),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensors_round_trip_through_files() {
        let d = tempfile::tempdir().unwrap();
        let s = TensorShape::new(1, 2, 3, 4);
        for t in [
            QTensor::from_i8(s, &(0..24).map(|v| (v * 11 - 128) as i8).collect::<Vec<_>>()).unwrap(),
            QTensor::new(s, 32, (0..24).map(|v| v * 100_003 - 1_000_000).collect()).unwrap(),
        ] {
            let p = d.path().join(format!("t{}.bin", t.bits));
            write_tensor(&p, "t", &t).unwrap();
            assert_eq!(read_tensor(&p).unwrap(), t);
        }
    }

    #[test]
    fn sidecar_must_match_the_image() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("img.bin");
        write_image(&p, &[1, 2, 3, 4], vec![]).unwrap();
        fs::write(&p, [1, 2, 3]).unwrap();
        assert!(read_image(&p).is_err());
        let t = TensorPlacement { name: "x".into(), level: "dram".into(), addr: 2, shape: [1, 1, 1, 4], bits: 8 };
        assert!(write_image(&p, &[0; 4], vec![t]).is_err());
    }
}
