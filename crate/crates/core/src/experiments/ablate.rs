//! One-axis ablations over preprocessing and source-reconstruction settings.

use std::str::FromStr;

use super::lab::Lab;
use super::report::{Report, Table};
use super::stat_cells;
use crate::config::Config;
use crate::data::{Cache, Representation};
use crate::error::{invalid_config, Error, Result};
use crate::nn::Family;
use crate::pipeline::Pipeline;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Highpass,
    Lowpass,
    Downsample,
    Notch,
    Snr,
    CovForm,
    Method,
    Structurals,
    VoxelSize,
    VoxelType,
    Dimred,
}

pub const ABLATION_AXES: [&str; 11] = [
    "highpass",
    "lowpass",
    "downsample",
    "notch",
    "snr",
    "cov_form",
    "method",
    "structurals",
    "voxel_size",
    "voxel_type",
    "dimred",
];

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        use AblationAxis::*;
        let all = [
            Highpass,
            Lowpass,
            Downsample,
            Notch,
            Snr,
            CovForm,
            Method,
            Structurals,
            VoxelSize,
            VoxelType,
            Dimred,
        ];
        ABLATION_AXES
            .iter()
            .position(|a| *a == s)
            .map(|i| all[i])
            .ok_or_else(|| {
                invalid_config(format!(
                    "unknown ablation axis `{s}`; expected one of {}",
                    ABLATION_AXES.join(", ")
                ))
            })
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        ABLATION_AXES[self as usize]
    }

    /// Config key the axis overrides.
    pub fn key(self) -> &'static str {
        match self {
            AblationAxis::Highpass => "preprocess.highpass_hz",
            AblationAxis::Lowpass => "preprocess.lowpass_hz",
            AblationAxis::Downsample => "preprocess.downsample_hz",
            AblationAxis::Notch => "preprocess.notch",
            AblationAxis::Snr => "source.snr",
            AblationAxis::CovForm => "source.cov_form",
            AblationAxis::Method => "source.method",
            AblationAxis::Structurals => "source.structurals",
            AblationAxis::VoxelSize => "source.voxel_size_mm",
            AblationAxis::VoxelType => "source.voxel_type",
            AblationAxis::Dimred => "source.dimred",
        }
    }

    /// Sensor preprocessing axes also affect sensor-space models.
    pub fn affects_sensor(self) -> bool {
        matches!(
            self,
            AblationAxis::Highpass
                | AblationAxis::Lowpass
                | AblationAxis::Downsample
                | AblationAxis::Notch
        )
    }
}

/// Runs the inter-subject MLP once per value of `axis`, all else fixed.
/// The row whose value reproduces `base` is marked as the default.
pub fn ablate(base: &Config, cache: &Cache, axis: &str, values: &[String]) -> Result<Report> {
    let axis: AblationAxis = axis.parse()?;
    if values.is_empty() {
        return Err(invalid_config("ablation needs at least one value"));
    }
    let reprs: &[Representation] = if axis.affects_sensor() {
        &[Representation::Sensor, Representation::Source]
    } else {
        &[Representation::Source]
    };
    let mut runs = Table::new(&["axis", "value", "representation", "seed", "bacc"]);
    let mut summary = Table::new(&[
        "axis",
        "value",
        "default",
        "representation",
        "mean",
        "std",
        "n",
        "mean ± std",
    ]);
    let base_text = base.to_toml();
    for v in values {
        let cfg = Config::from_toml_str(&base_text, &[format!("{}={v}", axis.key())])?;
        let is_default = cfg == *base;
        let p = Pipeline::new(cfg, cache.clone())?;
        let lab = Lab::new(&p);
        for &repr in reprs {
            let dom = lab.inter(repr)?;
            let accs = lab.test_runs(Family::Mlp, &dom)?;
            for (i, &acc) in accs.iter().enumerate() {
                runs.push(vec![
                    axis.name().into(),
                    v.clone(),
                    repr.to_string(),
                    i.to_string(),
                    format!("{acc:.6}"),
                ]);
            }
            let mark = if is_default { "*" } else { "" };
            summary.push(
                [
                    vec![axis.name().into(), v.clone(), mark.into(), repr.to_string()],
                    stat_cells(&accs),
                ]
                .concat(),
            );
        }
    }
    Report::new(&format!("ablate_{}", axis.name()), base, runs, summary)?
        .with_notes(vec!["`*` marks the configured default".into()])
}
