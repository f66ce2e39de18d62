//! Built-in nominal parameters, loaded from the bundled TOML file.

use serde::{Deserialize, Serialize};

use crate::dynamics::{FwavParams, VerticalParams};

pub const DEFAULT_PARAMS_TOML: &str = include_str!("../data/default_params.toml");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub version: u32,
    pub full: FwavParams,
    pub vertical: VerticalParams,
}

pub fn param_set() -> ParamSet {
    toml::from_str(DEFAULT_PARAMS_TOML).expect("bundled parameter file is valid")
}

pub fn fwav_params() -> FwavParams {
    param_set().full
}

pub fn vertical_params() -> VerticalParams {
    param_set().vertical
}
