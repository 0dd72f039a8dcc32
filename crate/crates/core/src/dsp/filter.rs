//! Linear-phase windowed-sinc FIR filters applied forward-backward.
//!
//! Forward-backward application of a symmetric kernel `h` is the same as a
//! single centred convolution with `h * h`, so the squared kernel is built
//! once and applied with FFT convolution on a reflect-padded signal.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Result};
use crate::par;
use crate::sim::SensorRecording;

/// Hamming main-lobe constant: taps ~= 3.3 * fs / transition width.
const HAMMING_WIDTH: f64 = 3.3;
const HIGHPASS_MIN_TRANSITION_HZ: f64 = 0.05;
const NOTCH_HALF_WIDTH_HZ: f64 = 1.5;
const NOTCH_TRANSITION_HZ: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterSpec {
    pub highpass_hz: Option<f64>,
    pub lowpass_hz: Option<f64>,
    pub notch_hz: Option<f64>,
}

impl FilterSpec {
    pub fn validate(&self, sampling_rate_hz: f64) -> Result<()> {
        let nyq = sampling_rate_hz / 2.0;
        for (name, f) in [
            ("highpass", self.highpass_hz),
            ("lowpass", self.lowpass_hz),
            ("notch", self.notch_hz),
        ] {
            if let Some(f) = f {
                if f <= 0.0 {
                    return Err(invalid_config(format!(
                        "{name} frequency must be positive, got {f}"
                    )));
                }
                if f >= nyq {
                    return Err(invalid_config(format!(
                        "{name} frequency {f}Hz must be below Nyquist ({nyq}Hz)"
                    )));
                }
            }
        }
        if let (Some(h), Some(l)) = (self.highpass_hz, self.lowpass_hz) {
            if h >= l {
                return Err(invalid_config(format!(
                    "highpass {h}Hz must be below lowpass {l}Hz"
                )));
            }
        }
        Ok(())
    }
}

fn hamming(n: usize, len: usize) -> f64 {
    if len == 1 {
        return 1.0;
    }
    0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn odd_taps(fs: f64, transition_hz: f64) -> usize {
    let n = (HAMMING_WIDTH * fs / transition_hz).ceil() as usize;
    n | 1
}

/// Windowed-sinc lowpass, unit DC gain.
pub fn design_lowpass(cutoff_hz: f64, fs: f64, transition_hz: f64) -> Vec<f64> {
    let len = odd_taps(fs, transition_hz);
    let mid = (len / 2) as f64;
    let fc = cutoff_hz / fs;
    let mut h: Vec<f64> = (0..len)
        .map(|n| 2.0 * fc * sinc(2.0 * fc * (n as f64 - mid)) * hamming(n, len))
        .collect();
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|x| *x /= s);
    h
}

/// Spectral inversion of a lowpass.
pub fn design_highpass(cutoff_hz: f64, fs: f64, transition_hz: f64) -> Vec<f64> {
    let mut h = design_lowpass(cutoff_hz, fs, transition_hz);
    h.iter_mut().for_each(|x| *x = -*x);
    let mid = h.len() / 2;
    h[mid] += 1.0;
    h
}

pub fn design_bandstop(
    center_hz: f64,
    half_width_hz: f64,
    fs: f64,
    transition_hz: f64,
) -> Vec<f64> {
    let lo = design_lowpass(center_hz - half_width_hz, fs, transition_hz);
    let hi = design_lowpass(center_hz + half_width_hz, fs, transition_hz);
    // bandstop = lowpass(lo) + highpass(hi)
    let mut h: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| a - b).collect();
    let mid = h.len() / 2;
    h[mid] += 1.0;
    h
}

pub fn lowpass_transition(cutoff_hz: f64) -> f64 {
    0.25 * cutoff_hz
}

pub fn highpass_transition(cutoff_hz: f64) -> f64 {
    (0.25 * cutoff_hz).max(HIGHPASS_MIN_TRANSITION_HZ)
}

/// `h * h` for a symmetric `h`: the equivalent single-pass kernel of forward-backward filtering.
pub fn forward_backward_kernel(h: &[f64]) -> Vec<f64> {
    let n = h.len();
    let mut k = vec![0.0; 2 * n - 1];
    if n > 512 {
        return fft_full_convolution(h, h);
    }
    for i in 0..n {
        for j in 0..n {
            k[i + j] += h[i] * h[j];
        }
    }
    k
}

fn fft_full_convolution(a: &[f64], b: &[f64]) -> Vec<f64> {
    let out_len = a.len() + b.len() - 1;
    let size = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut fa = to_complex(a, size);
    let mut fb = to_complex(b, size);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= *y;
    }
    inv.process(&mut fa);
    fa[..out_len].iter().map(|c| c.re / size as f64).collect()
}

fn to_complex(x: &[f64], size: usize) -> Vec<Complex<f64>> {
    let mut v = vec![Complex::new(0.0, 0.0); size];
    for (c, &r) in v.iter_mut().zip(x) {
        c.re = r;
    }
    v
}

/// Mirror index without edge repetition, valid for any offset.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// A symmetric kernel prepared for repeated centred convolution.
pub struct PreparedKernel {
    kernel_len: usize,
    signal_len: usize,
    pad: usize,
    size: usize,
    spectrum: Vec<Complex<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl PreparedKernel {
    /// `kernel` must have odd length; padding is one kernel length per side.
    pub fn new(kernel: &[f64], signal_len: usize) -> Self {
        let pad = kernel.len();
        let size = (signal_len + 2 * pad + kernel.len()).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(size);
        let inv = planner.plan_fft_inverse(size);
        let mut spectrum = to_complex(kernel, size);
        fwd.process(&mut spectrum);
        Self {
            kernel_len: kernel.len(),
            signal_len,
            pad,
            size,
            spectrum,
            fwd,
            inv,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.signal_len);
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let padded_len = n + 2 * self.pad;
        let mut buf = vec![Complex::new(0.0, 0.0); self.size];
        for (j, c) in buf.iter_mut().take(padded_len).enumerate() {
            c.re = x[reflect(j as i64 - self.pad as i64, n)];
        }
        self.fwd.process(&mut buf);
        for (b, s) in buf.iter_mut().zip(&self.spectrum) {
            *b *= *s;
        }
        self.inv.process(&mut buf);
        let delay = self.kernel_len / 2;
        let scale = 1.0 / self.size as f64;
        (0..n)
            .map(|i| buf[i + self.pad + delay].re * scale)
            .collect()
    }
}

/// Zero-phase filtering of each row of a channels x samples matrix.
pub fn filter_rows(data: &DMatrix<f64>, h: &[f64]) -> DMatrix<f64> {
    let k = forward_backward_kernel(h);
    let n = data.ncols();
    let prepared = PreparedKernel::new(&k, n);
    let rows = par::map_range(data.nrows(), |r| {
        let x: Vec<f64> = data.row(r).iter().copied().collect();
        prepared.apply(&x)
    });
    DMatrix::from_fn(data.nrows(), n, |r, c| rows[r][c])
}

/// Zero-phase filtering of a single signal.
pub fn filtfilt(x: &[f64], h: &[f64]) -> Vec<f64> {
    let k = forward_backward_kernel(h);
    PreparedKernel::new(&k, x.len()).apply(x)
}

/// Highpass then lowpass, each zero-phase. Notch is applied separately.
pub fn bandpass_filter(rec: &SensorRecording, spec: &FilterSpec) -> Result<SensorRecording> {
    let fs = rec.sampling_rate_hz;
    spec.validate(fs)?;
    let mut data = rec.data.clone();
    if let Some(hp) = spec.highpass_hz {
        data = filter_rows(&data, &design_highpass(hp, fs, highpass_transition(hp)));
    }
    if let Some(lp) = spec.lowpass_hz {
        data = filter_rows(&data, &design_lowpass(lp, fs, lowpass_transition(lp)));
    }
    Ok(rec.with_data(data))
}

/// Band-stop at `freq_hz`; `None` leaves the recording unchanged.
pub fn notch_filter(rec: &SensorRecording, freq_hz: Option<f64>) -> Result<SensorRecording> {
    let Some(f0) = freq_hz else {
        return Ok(rec.clone());
    };
    let fs = rec.sampling_rate_hz;
    FilterSpec {
        notch_hz: Some(f0),
        ..Default::default()
    }
    .validate(fs)?;
    if f0 + NOTCH_HALF_WIDTH_HZ + NOTCH_TRANSITION_HZ / 2.0 >= fs / 2.0
        || f0 - NOTCH_HALF_WIDTH_HZ <= NOTCH_TRANSITION_HZ / 2.0
    {
        return Err(invalid_config(format!(
            "notch at {f0}Hz is too close to 0 or Nyquist"
        )));
    }
    let h = design_bandstop(f0, NOTCH_HALF_WIDTH_HZ, fs, NOTCH_TRANSITION_HZ);
    Ok(rec.with_data(filter_rows(&rec.data, &h)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, fs: f64, secs: f64) -> Vec<f64> {
        let n = (fs * secs) as usize;
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / fs).sin())
            .collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    /// Independent check: direct time-domain convolution, forward then backward.
    fn naive_filtfilt(x: &[f64], h: &[f64]) -> Vec<f64> {
        let n = x.len() as i64;
        let pad = (2 * h.len()) as i64;
        let ext: Vec<f64> = (-pad..n + pad).map(|i| x[reflect(i, x.len())]).collect();
        let half = (h.len() / 2) as i64;
        let conv = |s: &[f64]| -> Vec<f64> {
            (0..s.len() as i64)
                .map(|i| {
                    h.iter()
                        .enumerate()
                        .map(|(k, hk)| {
                            let j = i + half - k as i64;
                            if j >= 0 && (j as usize) < s.len() {
                                hk * s[j as usize]
                            } else {
                                0.0
                            }
                        })
                        .sum()
                })
                .collect()
        };
        let mut y = conv(&ext);
        y.reverse();
        let mut y = conv(&y);
        y.reverse();
        y[pad as usize..(pad + n) as usize].to_vec()
    }

    #[test]
    fn fft_path_matches_direct_forward_backward() {
        let x: Vec<f64> = (0..400)
            .map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5)
            .collect();
        let h = design_lowpass(20.0, 200.0, 10.0);
        let a = filtfilt(&x, &h);
        let b = naive_filtfilt(&x, &h);
        // interior agreement; edges differ only by the padding length
        for i in 2 * h.len()..x.len() - 2 * h.len() {
            assert!((a[i] - b[i]).abs() < 1e-10, "{i}: {} vs {}", a[i], b[i]);
        }
    }

    #[test]
    fn lowpass_rejects_60hz_and_passes_10hz() {
        let h = design_lowpass(48.0, 600.0, lowpass_transition(48.0));
        let x60 = tone(60.0, 600.0, 10.0);
        assert!(rms(&filtfilt(&x60, &h)) <= 0.1 * rms(&x60));
        let x10 = tone(10.0, 600.0, 10.0);
        let r = rms(&filtfilt(&x10, &h)) / rms(&x10);
        assert!((r - 1.0).abs() < 0.1, "{r}");
    }

    #[test]
    fn highpass_removes_dc() {
        let x = vec![3.0; 600 * 60];
        let h = design_highpass(0.1, 600.0, highpass_transition(0.1));
        assert!(rms(&filtfilt(&x, &h)) <= 0.1 * rms(&x));
    }

    #[test]
    fn bandstop_attenuation() {
        let h = design_bandstop(50.0, NOTCH_HALF_WIDTH_HZ, 600.0, NOTCH_TRANSITION_HZ);
        let x50 = tone(50.0, 600.0, 20.0);
        assert!(rms(&filtfilt(&x50, &h)) <= 0.1 * rms(&x50));
        for f in [45.0, 55.0, 40.0] {
            let x = tone(f, 600.0, 20.0);
            assert!(rms(&filtfilt(&x, &h)) >= 0.89 * rms(&x), "{f}");
        }
    }

    #[test]
    fn reflect_handles_long_pads() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-9, 5), 1);
        assert_eq!(reflect(13, 5), 3);
    }

    #[test]
    fn spec_validation() {
        let s = FilterSpec {
            highpass_hz: Some(0.1),
            lowpass_hz: Some(48.0),
            notch_hz: None,
        };
        assert!(s.validate(150.0).is_ok());
        assert!(s.validate(90.0).is_err());
        let bad = FilterSpec {
            highpass_hz: Some(50.0),
            lowpass_hz: Some(40.0),
            notch_hz: None,
        };
        assert!(bad.validate(600.0).is_err());
    }
}
