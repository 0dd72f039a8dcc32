//! Noise covariance, whitening and linear inverse operators.

pub mod covariance;
pub mod operator;

pub use covariance::{
    build_whitener, empirical_covariance, estimate_noise_covariance, CovForm, NoiseCovariance,
};
pub use operator::{
    apply_inverse, data_covariance, lambda2_from_snr, make_inverse_operator, min_norm_kernel,
    vec_to_mag, InverseInputs, InverseOperator, Method, PriorScaling, SourceEstimate, VoxelType,
};
