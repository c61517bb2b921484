use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("{quantity} must be a finite non-negative number, got {value}")]
    Domain { quantity: &'static str, value: f64 },
}

fn check(quantity: &'static str, value: f64) -> Result<f64, EnergyError> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(EnergyError::Domain { quantity, value })
    }
}

/// Energy in joules drawn at a constant `current` (A) and `voltage` (V) for
/// `duration` seconds.
pub fn compute_energy(current: f64, voltage: f64, duration: f64) -> Result<f64, EnergyError> {
    let current = check("current", current)?;
    let voltage = check("voltage", voltage)?;
    let duration = check("duration", duration)?;
    Ok(voltage * current * duration)
}
