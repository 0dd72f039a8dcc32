use rand::Rng as _;

use crate::error::{invalid_config, Result};
use crate::seed;

/// Radial magnetometers on a spherical helmet shell.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorArray {
    pub positions: Vec<[f64; 3]>,
    pub orientations: Vec<[f64; 3]>,
    pub layout_id: String,
    pub shell_radius_mm: f64,
}

impl SensorArray {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Quasi-uniform (Fibonacci) points on the upper hemisphere of the shell,
/// rotated and jittered deterministically per `(layout_id, seed)`.
pub fn build_sensor_array(
    layout_id: &str,
    n_sensors: usize,
    shell_radius_mm: f64,
    head_radius_mm: f64,
    seed: u64,
) -> Result<SensorArray> {
    if n_sensors < 16 {
        return Err(invalid_config(format!(
            "need at least 16 sensors, got {n_sensors}"
        )));
    }
    if shell_radius_mm <= head_radius_mm {
        return Err(invalid_config(format!(
            "sensor shell radius {shell_radius_mm}mm must exceed head radius {head_radius_mm}mm"
        )));
    }
    let mut rng = seed::rng(seed::derive(
        seed,
        &[seed::tag(layout_id), seed::tag("sensors")],
    ));
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let z_min = 0.02;
    let mut positions = Vec::with_capacity(n_sensors);
    let mut orientations = Vec::with_capacity(n_sensors);
    for i in 0..n_sensors {
        let t = (i as f64 + 0.5) / n_sensors as f64;
        let jitter = rng.random_range(-0.25..0.25) / n_sensors as f64;
        let z = (1.0 - (t + jitter).clamp(0.0, 1.0) * (1.0 - z_min)).clamp(z_min, 1.0);
        let rho = (1.0 - z * z).max(0.0).sqrt();
        let phi = phase + golden * i as f64;
        let u = [rho * phi.cos(), rho * phi.sin(), z];
        let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        let u = u.map(|x| x / n);
        positions.push(u.map(|x| x * shell_radius_mm));
        orientations.push(u);
    }
    Ok(SensorArray {
        positions,
        orientations,
        layout_id: layout_id.to_string(),
        shell_radius_mm,
    })
}
