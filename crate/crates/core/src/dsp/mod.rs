//! Sensor-space preprocessing: zero-phase FIR filtering, anti-aliased
//! resampling, channelwise standardization and epoch averaging.

pub mod epochs;
pub mod filter;
pub mod resample;
pub mod standardize;

pub use epochs::epoch_average;
pub use filter::{bandpass_filter, filtfilt, notch_filter, FilterSpec};
pub use resample::{resample, resample_rows, resample_stimulus};
pub use standardize::{standardize, ChannelStats};
