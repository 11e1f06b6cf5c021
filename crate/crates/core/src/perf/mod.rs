//! FPGA performance and energy model.
//!
//! Latency comes either straight from the synthesis report's `forward` row
//! ([`Mode::Table`]) or from composing its per-module rows over the kernel's
//! schedule ([`Mode::Compose`]). Energy per token is average power times
//! per-token latency.

pub mod compose;
pub mod cycles;
pub mod energy;

pub use compose::{
    analytic_matmul_cycles, calibrate_head_multiplicity, compose_forward_cycles, compose_mean_cycles, MatmulModel,
    PipelineParams,
};
pub use cycles::{CycleRow, CycleTable};
pub use energy::{
    efficiency_report, energy_per_token_mwh, throughput_toks_per_s, Device, DeviceRun, EfficiencyReport, EnergyProfile,
};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Table,
    Compose,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Mode::Table),
            "compose" => Ok(Mode::Compose),
            _ => Err(Error::Config(format!("unknown estimate mode `{s}` (expected table or compose)"))),
        }
    }
}

/// Mean per-token FPGA latency in milliseconds for a run of `tokens` tokens.
pub fn fpga_latency_ms(config: &ModelConfig, table: &CycleTable, mode: Mode, tokens: usize) -> Result<f64> {
    match mode {
        Mode::Table => Ok(table.table_forward_latency_ms()),
        Mode::Compose => {
            let m = calibrate_head_multiplicity(config, table)?;
            Ok(table.cycles_to_ms(compose_mean_cycles(config, table, tokens, m)?))
        }
    }
}
