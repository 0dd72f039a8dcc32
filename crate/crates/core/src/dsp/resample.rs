use nalgebra::DMatrix;

use super::filter::{design_lowpass, filter_rows};
use crate::error::{invalid_config, Result};
use crate::sim::{SensorRecording, StimulusTrack};

/// Guard-filter transition as a fraction of the target rate.
const GUARD_TRANSITION: f64 = 0.1;

pub fn output_len(n: usize, current_hz: f64, target_hz: f64) -> usize {
    (n as f64 * target_hz / current_hz).round() as usize
}

/// Resamples rows of `data`. Integer ratios decimate exactly; other ratios
/// interpolate linearly on the guard-filtered signal.
pub fn resample_rows(data: &DMatrix<f64>, current_hz: f64, target_hz: f64) -> Result<DMatrix<f64>> {
    if target_hz > current_hz {
        return Err(invalid_config(format!(
            "resample target {target_hz}Hz exceeds current rate {current_hz}Hz"
        )));
    }
    if target_hz <= 0.0 {
        return Err(invalid_config("resample target must be positive"));
    }
    if target_hz == current_hz {
        return Ok(data.clone());
    }
    let tw = GUARD_TRANSITION * target_hz;
    let guard = design_lowpass(target_hz / 2.0 - tw / 2.0, current_hz, tw);
    let filtered = filter_rows(data, &guard);
    let n = data.ncols();
    let m = output_len(n, current_hz, target_hz);
    let ratio = current_hz / target_hz;
    let int_ratio = ratio.round();
    let out = if (ratio - int_ratio).abs() < 1e-12 {
        let step = int_ratio as usize;
        DMatrix::from_fn(data.nrows(), m, |r, j| filtered[(r, (j * step).min(n - 1))])
    } else {
        DMatrix::from_fn(data.nrows(), m, |r, j| {
            let pos = j as f64 * ratio;
            let i0 = (pos.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let frac = pos - i0 as f64;
            filtered[(r, i0)] * (1.0 - frac) + filtered[(r, i1)] * frac
        })
    };
    Ok(out)
}

/// Majority vote over the input samples covered by each output sample; ties go to speech.
pub fn resample_stimulus(track: &StimulusTrack, target_hz: f64) -> StimulusTrack {
    let current = track.sampling_rate_hz;
    if current == target_hz {
        return track.clone();
    }
    let n = track.len();
    let m = output_len(n, current, target_hz);
    let ratio = current / target_hz;
    let labels = (0..m)
        .map(|j| {
            let lo = ((j as f64 * ratio).floor() as usize).min(n.saturating_sub(1));
            let hi = (((j + 1) as f64 * ratio).floor() as usize).clamp(lo + 1, n);
            let ones = track.labels[lo..hi].iter().filter(|&&l| l == 1).count();
            (2 * ones >= hi - lo) as u8
        })
        .collect();
    StimulusTrack::from_labels(labels, target_hz)
}

pub fn resample(rec: &SensorRecording, target_hz: f64) -> Result<SensorRecording> {
    let data = resample_rows(&rec.data, rec.sampling_rate_hz, target_hz)?;
    let stimulus = resample_stimulus(&rec.stimulus, target_hz);
    SensorRecording::new(
        data,
        target_hz,
        rec.ids.clone(),
        stimulus,
        rec.sensors.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn length_arithmetic() {
        assert_eq!(output_len(6000, 600.0, 150.0), 1500);
        let d = DMatrix::from_fn(2, 6000, |r, c| (r + c) as f64);
        assert_eq!(resample_rows(&d, 600.0, 150.0).unwrap().ncols(), 1500);
    }

    #[test]
    fn same_rate_is_identity() {
        let d = DMatrix::from_fn(3, 500, |r, c| ((r * 31 + c * 17) % 13) as f64);
        let out = resample_rows(&d, 300.0, 300.0).unwrap();
        assert!((out - d).abs().max() < 1e-9);
    }

    #[test]
    fn upsampling_is_rejected() {
        let d = DMatrix::zeros(1, 10);
        assert!(resample_rows(&d, 150.0, 600.0).is_err());
    }

    #[test]
    fn sinusoid_survives_decimation() {
        let f = 20.0;
        let d = DMatrix::from_fn(1, 6000, |_, i| (2.0 * PI * f * i as f64 / 600.0).sin());
        let out = resample_rows(&d, 600.0, 150.0).unwrap();
        let exact: Vec<f64> = (0..out.ncols())
            .map(|j| (2.0 * PI * f * j as f64 / 150.0).sin())
            .collect();
        let got: Vec<f64> = out.row(0).iter().copied().collect();
        let corr = pearson(&got, &exact);
        assert!(corr >= 0.99, "{corr}");
    }

    #[test]
    fn non_integer_ratio_tracks_slow_sinusoid() {
        let f = 5.0;
        let d = DMatrix::from_fn(1, 5000, |_, i| (2.0 * PI * f * i as f64 / 500.0).sin());
        let out = resample_rows(&d, 500.0, 150.0).unwrap();
        let exact: Vec<f64> = (0..out.ncols())
            .map(|j| (2.0 * PI * f * j as f64 / 150.0).sin())
            .collect();
        let got: Vec<f64> = out.row(0).iter().copied().collect();
        assert!(pearson(&got, &exact) >= 0.99);
    }

    #[test]
    fn stimulus_majority_vote() {
        let t = StimulusTrack::from_labels(vec![0, 0, 0, 1, 1, 1, 1, 0, 1, 1, 0, 0], 600.0);
        let r = resample_stimulus(&t, 150.0);
        assert_eq!(r.labels, vec![0, 1, 1]);
        assert_eq!(r.onsets, vec![1]);
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }
}
