use std::sync::Arc;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::anatomy::Anatomy;
use super::forward::LeadField;
use super::sensors::SensorArray;
use super::stimulus::StimulusTrack;
use crate::error::{invalid_config, invalid_input, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Std of the AR(1) background per source component (nA*m).
    pub background_std: f64,
    pub ar_coef: f64,
    /// White sensor noise std (fT).
    pub sensor_noise_std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            background_std: 1.0,
            ar_coef: 0.9,
            sensor_noise_std: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDrive {
    pub region: u32,
    /// Peak dipole moment per voxel (nA*m).
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseConfig {
    pub regions: Vec<RegionDrive>,
    /// Reference direction; each active voxel uses its tangential projection.
    pub direction: [f64; 3],
    /// Weight of the onset transient.
    pub onset_gain: f64,
    /// Weight of the sustained, speech-following component.
    pub sustained_gain: f64,
    pub peak_latency_s: f64,
    pub sustained_delay_s: f64,
    pub sustained_tau_s: f64,
}

impl Default for ResponseConfig {
    fn default() -> Self {
        Self {
            regions: Vec::new(),
            direction: [0.0, 1.0, 0.3],
            onset_gain: 1.0,
            sustained_gain: 0.5,
            peak_latency_s: 0.25,
            sustained_delay_s: 0.1,
            sustained_tau_s: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RecordingIds {
    pub dataset_id: String,
    pub subject_id: String,
    pub session_id: String,
}

#[derive(Debug, Clone)]
pub struct SensorRecording {
    /// channels x samples
    pub data: DMatrix<f64>,
    pub sampling_rate_hz: f64,
    pub ids: RecordingIds,
    pub stimulus: StimulusTrack,
    pub sensors: Arc<SensorArray>,
}

impl SensorRecording {
    pub fn new(
        data: DMatrix<f64>,
        sampling_rate_hz: f64,
        ids: RecordingIds,
        stimulus: StimulusTrack,
        sensors: Arc<SensorArray>,
    ) -> Result<Self> {
        if data.nrows() != sensors.len() {
            return Err(invalid_input(format!(
                "recording has {} channels but the array has {} sensors",
                data.nrows(),
                sensors.len()
            )));
        }
        if data.ncols() != stimulus.len() {
            return Err(invalid_input("stimulus length differs from sample count"));
        }
        Ok(Self {
            data,
            sampling_rate_hz,
            ids,
            stimulus,
            sensors,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn with_data(&self, data: DMatrix<f64>) -> Self {
        Self {
            data,
            ..self.clone()
        }
    }
}

/// Onset transient: gamma-shaped kernel with unit peak at `peak_s`.
pub fn evoked_kernel(t_s: f64, peak_s: f64) -> f64 {
    const SHAPE: f64 = 4.0;
    if t_s <= 0.0 {
        return 0.0;
    }
    let x = t_s / peak_s;
    x.powf(SHAPE) * (SHAPE * (1.0 - x)).exp()
}

/// Stimulus-locked drive waveform (dimensionless, ~[0, 1.5]).
pub fn response_waveform(stimulus: &StimulusTrack, cfg: &ResponseConfig) -> Vec<f64> {
    let n = stimulus.len();
    let fs = stimulus.sampling_rate_hz;
    let mut drive = vec![0.0; n];
    if cfg.onset_gain != 0.0 {
        let span = (cfg.peak_latency_s * 4.0 * fs).ceil() as usize;
        for &o in &stimulus.onsets {
            for k in 0..span.min(n - o) {
                drive[o + k] += cfg.onset_gain * evoked_kernel(k as f64 / fs, cfg.peak_latency_s);
            }
        }
    }
    if cfg.sustained_gain != 0.0 {
        let delay = (cfg.sustained_delay_s * fs).round() as usize;
        let alpha = 1.0 - (-1.0 / (cfg.sustained_tau_s * fs)).exp();
        let mut state = 0.0;
        for (t, d) in drive.iter_mut().enumerate() {
            let x = if t >= delay {
                stimulus.labels[t - delay] as f64
            } else {
                0.0
            };
            state += alpha * (x - state);
            *d += cfg.sustained_gain * state;
        }
    }
    drive
}

/// Fixed tangential moment direction for each active voxel, scaled by its region amplitude.
pub fn active_moments(anatomy: &Anatomy, cfg: &ResponseConfig) -> Result<Vec<(usize, [f64; 3])>> {
    let known = anatomy.region_ids();
    let mut out = Vec::new();
    for drive in &cfg.regions {
        if !known.contains(&drive.region) {
            return Err(invalid_config(format!(
                "response region {} is not in the atlas (known: {known:?})",
                drive.region
            )));
        }
        for v in anatomy.region_voxels(drive.region) {
            let c = anatomy.centers[v];
            let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            let r = c.map(|x| x / n);
            let d = cfg.direction;
            let dot = d[0] * r[0] + d[1] * r[1] + d[2] * r[2];
            let t = [d[0] - dot * r[0], d[1] - dot * r[1], d[2] - dot * r[2]];
            let tn = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
            if tn < 1e-9 {
                continue;
            }
            out.push((v, t.map(|x| x / tn * drive.amplitude)));
        }
    }
    Ok(out)
}

/// Source time courses, (3 * voxels) x samples.
pub fn simulate_sources(
    anatomy: &Anatomy,
    stimulus: &StimulusTrack,
    noise: &NoiseConfig,
    response: &ResponseConfig,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let n = stimulus.len();
    let rows = 3 * anatomy.n_voxels();
    let mut src = DMatrix::zeros(rows, n);
    if noise.background_std > 0.0 {
        if !(0.0..1.0).contains(&noise.ar_coef) {
            return Err(invalid_config("ar_coef must lie in [0, 1)"));
        }
        let mut rng = seed::rng(seed::derive(seed, &[seed::tag("background")]));
        let innov = noise.background_std * (1.0 - noise.ar_coef * noise.ar_coef).sqrt();
        let mut state: Vec<f64> = (0..rows)
            .map(|_| {
                noise.background_std * {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    e
                }
            })
            .collect();
        for t in 0..n {
            for (r, s) in state.iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *s = noise.ar_coef * *s + innov * e;
                src[(r, t)] = *s;
            }
        }
    }
    let moments = active_moments(anatomy, response)?;
    if !moments.is_empty() {
        let wave = response_waveform(stimulus, response);
        for (v, q) in moments {
            for (t, w) in wave.iter().enumerate() {
                for k in 0..3 {
                    src[(3 * v + k, t)] += q[k] * w;
                }
            }
        }
    }
    Ok(src)
}

/// Sensor data from source time courses.
pub fn forward_project(leadfield: &LeadField, sources: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if sources.nrows() != leadfield.matrix.ncols() {
        return Err(invalid_input("source rows do not match lead-field columns"));
    }
    Ok(&leadfield.matrix * sources)
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_recording(
    anatomy: &Anatomy,
    leadfield: &LeadField,
    sensors: &Arc<SensorArray>,
    stimulus: &StimulusTrack,
    noise: &NoiseConfig,
    response: &ResponseConfig,
    ids: RecordingIds,
    seed: u64,
) -> Result<SensorRecording> {
    if leadfield.n_voxels != anatomy.n_voxels() || leadfield.n_sensors() != sensors.len() {
        return Err(invalid_input("lead field does not match anatomy/sensors"));
    }
    let sources = simulate_sources(anatomy, stimulus, noise, response, seed)?;
    let mut data = forward_project(leadfield, &sources)?;
    if noise.sensor_noise_std > 0.0 {
        let mut rng = seed::rng(seed::derive(seed, &[seed::tag("sensor-noise")]));
        for x in data.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *x += noise.sensor_noise_std * e;
        }
    }
    SensorRecording::new(
        data,
        stimulus.sampling_rate_hz,
        ids,
        stimulus.clone(),
        sensors.clone(),
    )
}
