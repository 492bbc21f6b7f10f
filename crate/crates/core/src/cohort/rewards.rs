//! Clinical reward functions.
//!
//! Both cohorts reward improvement in a severity marker between consecutive
//! timesteps. The sepsis reward combines three parts driven by the SOFA
//! organ-failure score and the lactate level; the hypotension reward is a
//! piecewise-linear penalty on mean arterial pressure (MAP) with a urine
//! override. Stored episode rewards must recompute exactly from the stored
//! marker columns via these functions (see the io module).

use crate::error::{Error, Result};

/// Three-part sepsis reward for the step arriving at the current values
/// from the previous ones:
///  - a small penalty when a positive SOFA score fails to improve,
///  - a linear penalty on the SOFA change,
///  - a saturating penalty on the lactate change.
pub fn sepsis_reward(
    sofa: f64,
    sofa_prev: f64,
    lactate: f64,
    lactate_prev: f64,
) -> Result<f64> {
    for (label, v) in [("sofa", sofa), ("previous sofa", sofa_prev)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::contract(format!(
                "{label} must be finite and non-negative, got {v}"
            )));
        }
    }
    for (label, v) in [("lactate", lactate), ("previous lactate", lactate_prev)] {
        if !v.is_finite() {
            return Err(Error::contract(format!("{label} must be finite, got {v}")));
        }
    }
    let r1 = if sofa == sofa_prev && sofa > 0.0 { -0.025 } else { 0.0 };
    let r2 = -0.125 * (sofa - sofa_prev);
    let r3 = -2.0 * (lactate - lactate_prev).tanh();
    Ok(r1 + r2 + r3)
}

/// Piecewise MAP penalty: zero above 65 mmHg, then three linear segments
/// with slopes chosen to be continuous at the 65 / 60 / 55 breakpoints
/// (values 0, -0.05, -0.15). A measured urine output above 30 mL overrides
/// the penalty to zero as long as MAP is above 55.
pub fn hypotension_reward(map: f64, urine: f64, urine_measured: bool) -> Result<f64> {
    if !map.is_finite() || map <= 0.0 {
        return Err(Error::contract(format!(
            "map must be finite and positive, got {map}"
        )));
    }
    if !urine.is_finite() {
        return Err(Error::contract(format!("urine must be finite, got {urine}")));
    }
    if urine_measured && urine > 30.0 && map > 55.0 {
        return Ok(0.0);
    }
    let r = if map > 65.0 {
        0.0
    } else if map > 60.0 {
        -0.05 * (65.0 - map) / 5.0
    } else if map > 55.0 {
        -0.1 * (60.0 - map) / 5.0 - 0.05
    } else {
        -0.85 * (55.0 - map) / 15.0 - 0.15
    };
    Ok(r)
}
