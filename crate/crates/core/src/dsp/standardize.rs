use nalgebra::DMatrix;

/// Channels with a std below this are treated as having unit std.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Per-row mean and population std, with the std floor applied.
    pub fn fit(data: &DMatrix<f64>) -> Self {
        let n = data.ncols() as f64;
        let mut mean = Vec::with_capacity(data.nrows());
        let mut std = Vec::with_capacity(data.nrows());
        for row in data.row_iter() {
            let m = row.iter().sum::<f64>() / n;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            let s = v.sqrt();
            mean.push(m);
            std.push(if s < STD_FLOOR { 1.0 } else { s });
        }
        Self { mean, std }
    }

    pub fn apply(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(data.nrows(), data.ncols(), |r, c| {
            (data[(r, c)] - self.mean[r]) / self.std[r]
        })
    }
}

/// Channelwise standardization; returns the statistics for reuse.
pub fn standardize(data: &DMatrix<f64>) -> (DMatrix<f64>, ChannelStats) {
    let stats = ChannelStats::fit(data);
    let out = stats.apply(data);
    // second pass removes the residual rounding in mean/std
    let fix = ChannelStats::fit(&out);
    let out = fix.apply(&out);
    (out, stats)
}
