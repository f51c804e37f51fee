//! Bundled inputs: the default chip and the two reference control schedules.

use crate::controller::TargetSchedule;
use crate::error::Result;
use crate::simulator::ChipParams;

pub const CHIP_PARAMS: &str = include_str!("../assets/chip_params.toml");
/// X13, H13, X12 and H13 again over 300 ms.
pub const SCHEDULE_CLASSICAL: &str = include_str!("../assets/schedule_classical.toml");
/// X13, RX13(pi/4) and RZ13(0.1) over 280 ms.
pub const SCHEDULE_QUANTUM: &str = include_str!("../assets/schedule_quantum.toml");

pub fn chip_params() -> Result<ChipParams> {
    ChipParams::from_toml_str(CHIP_PARAMS)
}

pub fn schedule_classical() -> Result<TargetSchedule> {
    TargetSchedule::from_toml_str(SCHEDULE_CLASSICAL)
}

pub fn schedule_quantum() -> Result<TargetSchedule> {
    TargetSchedule::from_toml_str(SCHEDULE_QUANTUM)
}
