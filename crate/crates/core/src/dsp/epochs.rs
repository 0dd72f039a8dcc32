use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Mean of windows `[onset - pre, onset + post)` over onsets whose window fits.
/// Returns the evoked matrix and the number of onsets used.
pub fn epoch_average(
    data: &DMatrix<f64>,
    onsets: &[usize],
    sampling_rate_hz: f64,
    window_s: (f64, f64),
) -> Result<(DMatrix<f64>, usize)> {
    let pre = (window_s.0 * sampling_rate_hz).round() as usize;
    let post = (window_s.1 * sampling_rate_hz).round() as usize;
    let width = pre + post;
    let n = data.ncols();
    let usable: Vec<usize> = onsets
        .iter()
        .copied()
        .filter(|&o| o >= pre && o + post <= n)
        .collect();
    if usable.is_empty() || width == 0 {
        return Err(Error::EmptyResult(
            "no onset has a full epoch window inside the recording".into(),
        ));
    }
    let mut evoked = DMatrix::zeros(data.nrows(), width);
    for &o in &usable {
        evoked += data.columns(o - pre, width);
    }
    evoked /= usable.len() as f64;
    Ok((evoked, usable.len()))
}
