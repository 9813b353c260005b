//! Entry points for the fuzz targets. Both must return errors, never panic.

use crate::config::RunConfig;
use crate::scenario::{build_scenario, initial_condition};

/// Parses and validates a config, then builds its scenario and initial law.
pub fn parse_config(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else {
        return false;
    };
    let Ok((cfg, _)) = RunConfig::from_json(text) else {
        return false;
    };
    match &cfg.scenario {
        Some(sc) => match build_scenario(sc) {
            Ok(s) => initial_condition(cfg.initial.as_ref(), s.model.d_x()).is_ok(),
            Err(_) => false,
        },
        None => true,
    }
}

/// Reads an observation CSV as written by `simulate`.
pub fn parse_observation_csv(data: &[u8]) -> bool {
    enkbf_core::sde_sim::ObservationRecord::read_csv(data, 0).is_ok()
}
