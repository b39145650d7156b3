use alloc::string::String;
use core::fmt;

/// Errors raised across the model, planner and simulator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Invalid builder or architecture parameters.
    Config(String),
    /// A layer or graph invariant does not hold.
    Invariant { layer: String, what: String },
    /// Layer kind has no spatial mapping (vector ops).
    NotMappable(String),
    /// Mapping violates coverage or capacity rules.
    IllegalMapping(String),
    /// No candidate fits the memory hierarchy.
    Infeasible(String),
    /// Pixelwise ordering needs more line-buffer entries than available.
    LineBufferOverflow { needed: usize, capacity: usize },
    /// Assembly syntax or field range error.
    Assembly { line: usize, msg: String },
    /// Malformed binary instruction stream.
    Decode { word: usize, msg: String },
    /// Memory access outside a level's address space.
    OutOfRange { level: &'static str, addr: u64, len: u64 },
    /// Cycle cap hit before HALT.
    Watchdog(u64),
    /// Shapes of operands do not agree.
    Shape(String),
    /// Post-processing parameter out of range.
    PostProc(String),
    /// Energy calibration target unreachable.
    Calibration(String),
    /// A MAC layer has no mapping assigned.
    Unmapped(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Invariant { layer, what } => write!(f, "layer `{layer}`: invariant violated: {what}"),
            Error::NotMappable(m) => write!(f, "not mappable: {m}"),
            Error::IllegalMapping(m) => write!(f, "illegal mapping: {m}"),
            Error::Infeasible(m) => write!(f, "infeasible: {m}"),
            Error::LineBufferOverflow { needed, capacity } => write!(
                f,
                "pixelwise ordering needs {needed} line-buffer entries, capacity is {capacity}; use tiled statistics"
            ),
            Error::Assembly { line, msg } => write!(f, "line {line}: {msg}"),
            Error::Decode { word, msg } => write!(f, "word {word}: {msg}"),
            Error::OutOfRange { level, addr, len } => {
                write!(f, "{level} access [{addr:#x}, +{len}) out of range")
            }
            Error::Watchdog(c) => write!(f, "watchdog: no HALT after {c} cycles"),
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::PostProc(m) => write!(f, "post-processing: {m}"),
            Error::Calibration(m) => write!(f, "calibration: {m}"),
            Error::Unmapped(m) => write!(f, "layer `{m}` has no mapping"),
        }
    }
}

impl core::error::Error for Error {}
