//! Accelerator template: PE array geometry, memory hierarchy and access energies.

use core::fmt;

/// Memory levels, outermost first. `Writeback` carries no access energy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Dram,
    Sram,
    InputMem,
    WeightReg,
    OutputRf,
    Writeback,
}

impl Level {
    /// Levels that carry an access energy, in report order.
    pub const ENERGY: [Level; 5] = [Level::Dram, Level::Sram, Level::InputMem, Level::WeightReg, Level::OutputRf];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Dram => "DRAM",
            Level::Sram => "SRAM",
            Level::InputMem => "INPUT",
            Level::WeightReg => "WREG",
            Level::OutputRf => "RF",
            Level::Writeback => "WB",
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        [Level::Dram, Level::Sram, Level::InputMem, Level::WeightReg, Level::OutputRf, Level::Writeback]
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
    }

    pub fn from_code(c: u32) -> Option<Level> {
        [Level::Dram, Level::Sram, Level::InputMem, Level::WeightReg, Level::OutputRf, Level::Writeback]
            .get(c as usize)
            .copied()
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Access energies in pJ per byte, MAC energy in pJ per MAC.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyTable {
    pub mac: f64,
    pub weight_reg: f64,
    pub input_mem: f64,
    pub output_rf: f64,
    pub sram: f64,
    pub dram: f64,
}

/// DRAM access cost, pJ per byte.
pub const DRAM_PJ_PER_BYTE: f64 = 100.0;

impl EnergyTable {
    /// Uncalibrated ladder. On-chip ratios reg:input:rf:sram = 1:2:2:10 with
    /// an 8-bit MAC at twice a register access.
    pub fn ladder(unit: f64) -> Self {
        EnergyTable {
            mac: 2.0 * unit,
            weight_reg: unit,
            input_mem: 2.0 * unit,
            output_rf: 2.0 * unit,
            sram: 10.0 * unit,
            dram: DRAM_PJ_PER_BYTE,
        }
    }

    pub fn per_byte(&self, level: Level) -> f64 {
        match level {
            Level::Dram => self.dram,
            Level::Sram => self.sram,
            Level::InputMem => self.input_mem,
            Level::WeightReg => self.weight_reg,
            Level::OutputRf => self.output_rf,
            Level::Writeback => 0.0,
        }
    }

    /// Scale every on-chip cost (MAC included) by `s`; DRAM is untouched.
    pub fn scale_on_chip(&self, s: f64) -> Self {
        EnergyTable {
            mac: self.mac * s,
            weight_reg: self.weight_reg * s,
            input_mem: self.input_mem * s,
            output_rf: self.output_rf * s,
            sram: self.sram * s,
            dram: self.dram,
        }
    }
}

impl Default for EnergyTable {
    fn default() -> Self {
        EnergyTable::ladder(0.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchConfig {
    pub rows: u32,
    pub cols: u32,
    pub clock_hz: u64,
    pub input_mem_bytes: u32,
    /// Output register file, 32-bit entries.
    pub output_rf_bytes: u32,
    /// Weight register depth per PE.
    pub weight_reg_bytes: u32,
    pub sram_bytes: u32,
    /// Part of the SRAM reserved for staging layer weights.
    pub sram_weight_bytes: u32,
    pub dram_bus_bits: u32,
    /// SRAM port toward the array-side memories.
    pub sram_port_bits: u32,
    pub line_buffer_entries: u32,
    /// Post-processing engine lanes (elements per cycle).
    pub ppe_lanes: u32,
    pub energy: EnergyTable,
    pub watchdog_cycles: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            rows: 16,
            cols: 16,
            clock_hz: 100_000_000,
            input_mem_bytes: 8 * 1024,
            output_rf_bytes: 24 * 1024,
            weight_reg_bytes: 64,
            sram_bytes: 512 * 1024,
            sram_weight_bytes: 128 * 1024,
            dram_bus_bits: 128,
            sram_port_bits: 128,
            line_buffer_entries: 1216,
            ppe_lanes: 16,
            energy: EnergyTable::default(),
            watchdog_cycles: 1 << 40,
        }
    }
}

impl ArchConfig {
    pub fn pes(&self) -> u32 {
        self.rows * self.cols
    }

    pub fn peak_macs_per_cycle(&self) -> u32 {
        self.pes()
    }

    pub fn peak_macs_per_second(&self) -> f64 {
        self.pes() as f64 * self.clock_hz as f64
    }

    pub fn rf_entries(&self) -> u32 {
        self.output_rf_bytes / 4
    }

    /// Input tile budget: the input memory is double-buffered.
    pub fn input_tile_bytes(&self) -> u32 {
        self.input_mem_bytes / 2
    }

    /// Output block budget in entries: the register file is double-buffered.
    pub fn rf_block_entries(&self) -> u32 {
        self.rf_entries() / 2
    }

    /// Weight slots usable by one tile: the registers are double-buffered.
    pub fn weight_tile_slots(&self) -> u32 {
        self.weight_reg_bytes / 2
    }

    /// SRAM left for resident activations.
    pub fn sram_activation_bytes(&self) -> u32 {
        self.sram_bytes - self.sram_weight_bytes
    }

    pub fn validate(&self) -> crate::Result<()> {
        let caps = [
            ("rows", self.rows as u64),
            ("cols", self.cols as u64),
            ("clock", self.clock_hz),
            ("input_mem", self.input_mem_bytes as u64),
            ("output_rf", self.output_rf_bytes as u64),
            ("weight_reg", self.weight_reg_bytes as u64),
            ("sram", self.sram_bytes as u64),
            ("dram_bus", self.dram_bus_bits as u64),
            ("sram_port", self.sram_port_bits as u64),
            ("line_buffer", self.line_buffer_entries as u64),
            ("ppe_lanes", self.ppe_lanes as u64),
        ];
        for (n, v) in caps {
            if v == 0 {
                return Err(crate::Error::Config(alloc::format!("{n} must be > 0")));
            }
        }
        if self.sram_weight_bytes >= self.sram_bytes {
            return Err(crate::Error::Config("weight staging must leave SRAM for activations".into()));
        }
        if !self.dram_bus_bits.is_multiple_of(8) || !self.sram_port_bits.is_multiple_of(8) {
            return Err(crate::Error::Config("bus widths must be whole bytes".into()));
        }
        let e = &self.energy;
        if [e.mac, e.weight_reg, e.input_mem, e.output_rf, e.sram, e.dram].iter().any(|v| !(*v >= 0.0)) {
            return Err(crate::Error::Config("energies must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_template() {
        let a = ArchConfig::default();
        assert_eq!(a.peak_macs_per_cycle(), 256);
        assert!((a.peak_macs_per_second() - 25.6e9).abs() < 1.0);
        assert_eq!(a.energy.dram, 100.0);
        assert_eq!(a.rf_entries(), 6144);
        a.validate().unwrap();
    }

    #[test]
    fn ladder_ratios() {
        let e = EnergyTable::ladder(1.0);
        assert_eq!((e.weight_reg, e.input_mem, e.output_rf, e.sram), (1.0, 2.0, 2.0, 10.0));
        let s = e.scale_on_chip(3.0);
        assert_eq!(s.sram, 30.0);
        assert_eq!(s.dram, 100.0);
    }
}
