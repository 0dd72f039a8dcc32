use rand::Rng as _;
use rand_distr::{Distribution, Exp};

use crate::error::{invalid_config, Result};
use crate::seed;

/// Binary speech/silence labels per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusTrack {
    pub labels: Vec<u8>,
    pub sampling_rate_hz: f64,
    pub onsets: Vec<usize>,
}

impl StimulusTrack {
    pub fn from_labels(labels: Vec<u8>, sampling_rate_hz: f64) -> Self {
        let onsets = onsets_of(&labels);
        Self {
            labels,
            sampling_rate_hz,
            onsets,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn speech_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|&&l| l == 1).count() as f64 / self.labels.len() as f64
    }
}

/// Sample indices of 0 -> 1 transitions. A track starting in speech has no onset at 0.
pub fn onsets_of(labels: &[u8]) -> Vec<usize> {
    (1..labels.len())
        .filter(|&i| labels[i - 1] == 0 && labels[i] == 1)
        .collect()
}

/// Alternating silence/speech segments, starting with silence. Segment
/// lengths are a quarter of their mean plus an exponential remainder.
pub fn make_stimulus_track(
    duration_s: f64,
    rate_hz: f64,
    speech_fraction: f64,
    mean_segment_s: f64,
    seed: u64,
) -> Result<StimulusTrack> {
    if !(speech_fraction > 0.0 && speech_fraction < 1.0) {
        return Err(invalid_config(format!(
            "speech_fraction must lie in (0, 1), got {speech_fraction}"
        )));
    }
    if rate_hz <= 0.0 || mean_segment_s <= 0.0 || duration_s < 0.0 {
        return Err(invalid_config(
            "rate, mean segment and duration must be positive",
        ));
    }
    let n = (duration_s * rate_hz).round() as usize;
    let mut rng = seed::rng(seed::derive(seed, &[seed::tag("stimulus")]));
    let speech_mean = mean_segment_s;
    let silence_mean = mean_segment_s * (1.0 - speech_fraction) / speech_fraction;
    let mut labels = Vec::with_capacity(n);
    let mut speaking = false;
    while labels.len() < n {
        let mean = if speaking { speech_mean } else { silence_mean };
        let exp = Exp::new(1.0 / (0.75 * mean)).expect("positive rate");
        let dur_s = 0.25 * mean + exp.sample(&mut rng);
        let len = ((dur_s * rate_hz).round() as usize).max(1);
        let take = len.min(n - labels.len());
        labels.extend(std::iter::repeat_n(speaking as u8, take));
        speaking = !speaking;
        // one spare draw keeps segment boundaries from aligning across rates
        let _: f64 = rng.random();
    }
    Ok(StimulusTrack::from_labels(labels, rate_hz))
}
