//! Instruction-driven model of the accelerator: ISA, machine and lowering.

pub mod isa;
pub mod lower;
pub mod machine;
pub mod postproc;

pub use isa::{assemble, decode, disassemble, encode, ComputeOp, Instr, PostProcOp, PpOp, Transfer};
pub use machine::{run, run_image, run_program, MemImage, RunResult, TraceEvent, Unit};
