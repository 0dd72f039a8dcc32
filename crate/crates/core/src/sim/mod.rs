//! Synthetic multi-subject MEG ground truth: anatomies, sensor arrays,
//! lead fields, stimulus tracks and recordings.

pub mod anatomy;
pub mod forward;
pub mod recording;
pub mod sensors;
pub mod stimulus;

pub use anatomy::{
    build_template_anatomy, build_template_with_atlas, derive_subject_anatomy,
    random_subject_affine, subject_from_affine, Affine, Anatomy, Lattice,
};
pub use forward::{compute_lead_field, dipole_field, LeadField};
pub use recording::{
    active_moments, forward_project, response_waveform, simulate_recording, simulate_sources,
    NoiseConfig, RecordingIds, RegionDrive, ResponseConfig, SensorRecording,
};
pub use sensors::{build_sensor_array, SensorArray};
pub use stimulus::{make_stimulus_track, onsets_of, StimulusTrack};
