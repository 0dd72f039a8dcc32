//! Layered run configuration.
//!
//! A config is a TOML document, optionally naming a preset to start from
//! with `extends = "<preset>"`; `key.path=value` overrides apply last.
//! Unknown keys and missing fields are errors naming the field.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Representation, SplitKind};
use crate::error::{invalid_config, Error, Result};
use crate::inverse::{CovForm, Method, PriorScaling, VoxelType};
use crate::nn::Family;
use crate::sim::{NoiseConfig, RegionDrive};
use crate::train::{Hparams, SearchSpace};

pub const PRESETS: [(&str, &str); 3] = [
    ("paper_final", include_str!("../presets/paper_final.toml")),
    (
        "paper_search_space",
        include_str!("../presets/paper_search_space.toml"),
    ),
    ("desk", include_str!("../presets/desk.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub preprocess: PreprocessConfig,
    pub source: SourceConfig,
    pub scenario: ScenarioConfig,
    pub models: ModelsConfig,
    pub train: TrainConfig,
    pub hparams: BTreeMap<String, HparamsConfig>,
    pub search: SearchConfig,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub highpass_hz: f64,
    pub lowpass_hz: f64,
    pub downsample_hz: f64,
    pub notch: bool,
    pub notch_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub method: String,
    pub voxel_size_mm: f64,
    pub snr: f64,
    pub cov_form: String,
    pub voxel_type: String,
    /// `subject` (own anatomy) or `template` (template anatomy for every subject).
    pub structurals: String,
    /// `none`, `pca` or `parcels`.
    pub dimred: String,
    pub pca_components: usize,
    /// Source prior scaling: `trace` or `unit`.
    pub prior: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub head_radius_mm: f64,
    /// Grid the ground-truth sources live on; independent of the reconstruction grid.
    pub sim_voxel_size_mm: f64,
    pub sim_rate_hz: f64,
    pub session_duration_s: f64,
    pub speech_fraction: f64,
    pub mean_segment_s: f64,
    pub distortion: f64,
    /// Keep every n-th time slice after resampling.
    pub slice_stride: usize,
    pub datasets: Vec<DatasetConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub id: String,
    /// `by_subject` (inter-subject) or `by_session` (single-subject).
    pub split: String,
    pub n_subjects: usize,
    pub sessions_per_subject: usize,
    pub n_sensors: usize,
    pub shell_radius_mm: f64,
    pub noise: NoiseConfig,
    pub regions: Vec<RegionDrive>,
    pub direction: [f64; 3],
    pub sustained_gain: f64,
    pub onset_gain: f64,
    /// Subject names (by_subject) or session names (by_session) per split.
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub multi_subject_budget: usize,
    pub single_subject_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    /// Early-stopping minimum improvement in percent of balanced accuracy.
    pub min_delta_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HparamsConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub n_trials: usize,
    pub dropout: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub lr_log10: [f64; 2],
    pub weight_decay_log10: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: usize,
    pub base_seed: u64,
    /// Inter-subject dataset id.
    pub primary: String,
    /// Single-subject dataset id.
    pub secondary: String,
    pub region_buffer: usize,
    pub mixup_alphas: Vec<f64>,
    pub slice_dropout_ps: Vec<f64>,
    pub cube_mask_ps: Vec<f64>,
    /// Family used for region masking.
    pub masking_family: String,
    /// `subject/session` entries of the secondary dataset added to training
    /// in the combined experiment.
    pub combined_sessions: Vec<String>,
}

/// Deep-merges `top` into `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::Parse(format!("{origin}: {e}")))
}

/// Resolves `extends` chains into one table.
fn resolve(mut table: toml::Table, depth: usize) -> Result<toml::Table> {
    let Some(parent) = table.remove("extends") else {
        return Ok(table);
    };
    let name = parent
        .as_str()
        .ok_or_else(|| invalid_config("`extends` must be a preset name"))?;
    if depth > 8 {
        return Err(invalid_config("`extends` chain too deep"));
    }
    let text = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            invalid_config(format!(
                "unknown preset '{name}' (available: {})",
                preset_names().join(", ")
            ))
        })?;
    let mut base = resolve(parse_table(text, name)?, depth + 1)?;
    merge(&mut base, table);
    Ok(base)
}

/// Parses a `--set` value as a TOML literal, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| invalid_config(format!("override '{spec}' is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| invalid_config(format!("override '{key}': '{part}' is not a table")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), override_value(raw.trim()));
    Ok(())
}

/// Top-level aliases for the preprocessing axes.
fn expand_alias(spec: &str) -> String {
    const ALIASES: [(&str, &str); 10] = [
        ("highpass", "preprocess.highpass_hz"),
        ("lowpass", "preprocess.lowpass_hz"),
        ("downsample", "preprocess.downsample_hz"),
        ("notch", "preprocess.notch"),
        ("method", "source.method"),
        ("voxel_size", "source.voxel_size_mm"),
        ("snr", "source.snr"),
        ("cov_form", "source.cov_form"),
        ("voxel_type", "source.voxel_type"),
        ("structurals", "source.structurals"),
    ];
    if let Some((k, v)) = spec.split_once('=') {
        if let Some((_, full)) = ALIASES.iter().find(|(a, _)| *a == k.trim()) {
            return format!("{full}={v}");
        }
    }
    spec.to_string()
}

impl Config {
    pub fn preset(name: &str) -> Result<Self> {
        Self::from_toml_str(&format!("extends = \"{name}\""), &[])
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table = resolve(parse_table(text, "config")?, 0)?;
        for o in overrides {
            apply_override(&mut table, &expand_alias(o))?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| invalid_config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.method()?;
        self.cov_form()?;
        self.voxel_type()?;
        self.prior()?;
        match self.source.structurals.as_str() {
            "subject" | "template" => {}
            s => {
                return Err(invalid_config(format!(
                    "unknown structurals '{s}' (expected subject, template)"
                )))
            }
        }
        match self.source.dimred.as_str() {
            "none" | "pca" | "parcels" => {}
            s => {
                return Err(invalid_config(format!(
                    "unknown dimred '{s}' (expected none, pca, parcels)"
                )))
            }
        }
        if self.scenario.slice_stride == 0 {
            return Err(invalid_config("scenario.slice_stride must be >= 1"));
        }
        if self.preprocess.downsample_hz > self.scenario.sim_rate_hz {
            return Err(invalid_config(
                "preprocess.downsample_hz exceeds scenario.sim_rate_hz",
            ));
        }
        for d in &self.scenario.datasets {
            d.split_kind()?;
        }
        Family::from_str_checked(&self.experiment.masking_family)?;
        if !self.hparams.contains_key("default") {
            return Err(invalid_config("hparams.default is required"));
        }
        self.search_space().validate()
    }

    pub fn method(&self) -> Result<Method> {
        self.source.method.parse()
    }

    pub fn cov_form(&self) -> Result<CovForm> {
        self.source.cov_form.parse()
    }

    pub fn voxel_type(&self) -> Result<VoxelType> {
        self.source.voxel_type.parse()
    }

    pub fn prior(&self) -> Result<PriorScaling> {
        match self.source.prior.as_str() {
            "trace" => Ok(PriorScaling::Trace),
            "unit" => Ok(PriorScaling::Unit),
            s => Err(invalid_config(format!(
                "unknown prior '{s}' (expected trace, unit)"
            ))),
        }
    }

    pub fn dataset(&self, id: &str) -> Result<&DatasetConfig> {
        self.scenario
            .datasets
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| {
                let ids: Vec<&str> = self
                    .scenario
                    .datasets
                    .iter()
                    .map(|d| d.id.as_str())
                    .collect();
                invalid_config(format!(
                    "unknown dataset '{id}' (available: {})",
                    ids.join(", ")
                ))
            })
    }

    /// Hyperparameters for a model, most specific profile first:
    /// `<split>_<representation>_<family>`, `<representation>_<family>`, `<family>`, `default`.
    pub fn hparams_for(&self, split: SplitKind, repr: Representation, family: Family) -> Hparams {
        let split = match split {
            SplitKind::BySubject => "inter_subject",
            SplitKind::BySession => "single_subject",
        };
        let keys = [
            format!("{split}_{repr}_{family}"),
            format!("{repr}_{family}"),
            family.to_string(),
            "default".into(),
        ];
        let h = keys
            .iter()
            .find_map(|k| self.hparams.get(k))
            .expect("default validated");
        self.hparams_from(h)
    }

    pub fn hparams_named(&self, key: &str) -> Hparams {
        self.hparams_from(self.hparams.get(key).unwrap_or(&self.hparams["default"]))
    }

    fn hparams_from(&self, h: &HparamsConfig) -> Hparams {
        Hparams {
            lr: h.lr,
            weight_decay: h.weight_decay,
            batch_size: h.batch_size,
            dropout: h.dropout,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            min_delta: self.train.min_delta_percent / 100.0,
            ..Hparams::default()
        }
    }

    pub fn search_space(&self) -> SearchSpace {
        SearchSpace {
            dropout: self.search.dropout.clone(),
            batch_sizes: self.search.batch_sizes.clone(),
            lr_log10: (self.search.lr_log10[0], self.search.lr_log10[1]),
            weight_decay_log10: (
                self.search.weight_decay_log10[0],
                self.search.weight_decay_log10[1],
            ),
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            min_delta: self.train.min_delta_percent / 100.0,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 of the resolved config.
    pub fn content_hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

impl DatasetConfig {
    pub fn split_kind(&self) -> Result<SplitKind> {
        match self.split.as_str() {
            "by_subject" => Ok(SplitKind::BySubject),
            "by_session" => Ok(SplitKind::BySession),
            s => Err(invalid_config(format!(
                "dataset {}: unknown split '{s}' (expected by_subject, by_session)",
                self.id
            ))),
        }
    }

    pub fn subject_names(&self) -> Vec<String> {
        (0..self.n_subjects)
            .map(|i| format!("sub-{i:02}"))
            .collect()
    }

    pub fn session_names(&self) -> Vec<String> {
        (0..self.sessions_per_subject)
            .map(|i| format!("ses-{i}"))
            .collect()
    }
}

impl Family {
    fn from_str_checked(s: &str) -> Result<Family> {
        s.parse()
    }
}
