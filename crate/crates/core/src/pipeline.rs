//! Pipeline driver: scenario construction, then simulate, preprocess,
//! reconstruct and morph per session. Every stage output is cached under a
//! key holding all parameters that influence it.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::config::{Config, DatasetConfig};
use crate::data::{
    Cache, CacheKey, GridLayout, Representation, SessionData, SessionKey, Split, SplitKind,
    SplitPlan, Tensor,
};
use crate::dsp::{bandpass_filter, notch_filter, resample, standardize, FilterSpec};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::inverse::{
    apply_inverse, data_covariance, estimate_noise_covariance, make_inverse_operator,
    InverseInputs, SourceEstimate,
};
use crate::morph::{build_morph_map, MorphTarget};
use crate::par;
use crate::seed;
use crate::sim::{
    build_sensor_array, build_template_anatomy, compute_lead_field, make_stimulus_track,
    random_subject_affine, simulate_recording, subject_from_affine, Affine, Anatomy, LeadField,
    RecordingIds, ResponseConfig, SensorArray, SensorRecording, StimulusTrack,
};

/// Processing stages in their only valid order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Simulate,
    Bandpass,
    Notch,
    Resample,
    Reconstruct,
    Morph,
    Standardize,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Simulate => "simulate",
            Stage::Bandpass => "bandpass",
            Stage::Notch => "notch",
            Stage::Resample => "resample",
            Stage::Reconstruct => "reconstruct",
            Stage::Morph => "morph",
            Stage::Standardize => "standardize",
        })
    }
}

/// Accepts a stage list only if it is strictly ordered, contains the
/// mandatory stages, and morphs only reconstructed data.
pub fn validate_order(stages: &[Stage]) -> Result<()> {
    for w in stages.windows(2) {
        if w[0] >= w[1] {
            return Err(invalid_config(format!(
                "stage `{}` cannot run before `{}`",
                w[1], w[0]
            )));
        }
    }
    for required in [
        Stage::Simulate,
        Stage::Bandpass,
        Stage::Resample,
        Stage::Standardize,
    ] {
        if !stages.contains(&required) {
            return Err(invalid_config(format!(
                "pipeline is missing stage `{required}`"
            )));
        }
    }
    if stages.contains(&Stage::Morph) && !stages.contains(&Stage::Reconstruct) {
        return Err(invalid_config("`morph` needs `reconstruct`"));
    }
    Ok(())
}

/// The stage list a representation goes through under `cfg`.
pub fn plan_stages(cfg: &Config, repr: Representation) -> Vec<Stage> {
    let mut s = vec![Stage::Simulate, Stage::Bandpass];
    if cfg.preprocess.notch {
        s.push(Stage::Notch);
    }
    s.push(Stage::Resample);
    if repr == Representation::Source {
        s.extend([Stage::Reconstruct, Stage::Morph]);
    }
    s.push(Stage::Standardize);
    s
}

#[derive(Debug)]
pub struct SubjectWorld {
    pub name: String,
    /// Template-to-subject head transform; fixed per subject.
    pub affine: Affine,
    /// Anatomy on the simulation grid.
    pub sim_anatomy: Arc<Anatomy>,
    pub sim_leadfield: LeadField,
    /// Anatomy on the reconstruction grid.
    pub anatomy: Arc<Anatomy>,
}

#[derive(Debug)]
pub struct DatasetWorld {
    pub config: DatasetConfig,
    pub sensors: Arc<SensorArray>,
    pub subjects: Vec<SubjectWorld>,
}

impl DatasetWorld {
    pub fn subject(&self, name: &str) -> Result<&SubjectWorld> {
        self.subjects
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| {
                invalid_input(format!("dataset {} has no subject {name}", self.config.id))
            })
    }

    pub fn session_keys(&self) -> Vec<SessionKey> {
        let mut out = Vec::new();
        for s in &self.subjects {
            for ses in self.config.session_names() {
                out.push(SessionKey::new(&self.config.id, &s.name, &ses));
            }
        }
        out
    }

    /// Split plan from the dataset's train/val/test lists. Subject-split
    /// datasets list subjects; session-split datasets list sessions, which
    /// apply to every subject in `subjects`.
    pub fn split_plan(&self, subjects: &[&str]) -> Result<SplitPlan> {
        let kind = self.config.split_kind()?;
        let mut plan = SplitPlan::new(kind);
        let lists = [
            (Split::Train, &self.config.train),
            (Split::Val, &self.config.val),
            (Split::Test, &self.config.test),
        ];
        for (split, names) in lists {
            for name in names.iter() {
                match kind {
                    SplitKind::BySubject => {
                        self.subject(name)?;
                        for ses in self.config.session_names() {
                            plan = plan.assign(SessionKey::new(&self.config.id, name, &ses), split);
                        }
                    }
                    SplitKind::BySession => {
                        if !self.config.session_names().contains(name) {
                            return Err(invalid_config(format!(
                                "dataset {}: unknown session {name}",
                                self.config.id
                            )));
                        }
                        for sub in subjects {
                            plan = plan.assign(SessionKey::new(&self.config.id, sub, name), split);
                        }
                    }
                }
            }
        }
        plan.check_leakage()?;
        Ok(plan)
    }

    pub fn test_subjects(&self) -> Vec<String> {
        match self.config.split_kind() {
            Ok(SplitKind::BySubject) => self.config.test.clone(),
            _ => self.subjects.iter().map(|s| s.name.clone()).collect(),
        }
    }
}

/// Anatomies, sensors and lead fields of the whole scenario.
#[derive(Debug)]
pub struct World {
    pub sim_template: Arc<Anatomy>,
    pub template: Arc<Anatomy>,
    pub template_grid: Arc<GridLayout>,
    pub datasets: Vec<DatasetWorld>,
}

impl World {
    pub fn build(cfg: &Config) -> Result<Self> {
        let sc = &cfg.scenario;
        let sim_template = Arc::new(build_template_anatomy(
            sc.sim_voxel_size_mm,
            sc.head_radius_mm,
            sc.seed,
        )?);
        let template = if cfg.source.voxel_size_mm == sc.sim_voxel_size_mm {
            sim_template.clone()
        } else {
            Arc::new(build_template_anatomy(
                cfg.source.voxel_size_mm,
                sc.head_radius_mm,
                sc.seed,
            )?)
        };
        let mut datasets = Vec::new();
        for d in &sc.datasets {
            let sensors = Arc::new(build_sensor_array(
                &d.id,
                d.n_sensors,
                d.shell_radius_mm,
                sc.head_radius_mm,
                sc.seed,
            )?);
            let subjects = par::map_range(d.n_subjects, |i| -> Result<SubjectWorld> {
                let name = d.subject_names()[i].clone();
                let subject_seed = seed::derive(sc.seed, &[seed::tag(&d.id), seed::tag(&name)]);
                let affine =
                    random_subject_affine(sc.sim_voxel_size_mm, sc.distortion, subject_seed);
                let sim_anatomy = Arc::new(subject_from_affine(&sim_template, affine)?);
                let sim_leadfield = compute_lead_field(&sim_anatomy, &sensors)?;
                let anatomy = if Arc::ptr_eq(&sim_template, &template) {
                    sim_anatomy.clone()
                } else {
                    Arc::new(subject_from_affine(&template, affine)?)
                };
                Ok(SubjectWorld {
                    name,
                    affine,
                    sim_anatomy,
                    sim_leadfield,
                    anatomy,
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            datasets.push(DatasetWorld {
                config: d.clone(),
                sensors,
                subjects,
            });
        }
        let template_grid = Arc::new(GridLayout::from_anatomy(&template));
        Ok(Self {
            sim_template,
            template,
            template_grid,
            datasets,
        })
    }

    pub fn dataset(&self, id: &str) -> Result<&DatasetWorld> {
        self.datasets
            .iter()
            .find(|d| d.config.id == id)
            .ok_or_else(|| {
                let ids: Vec<&str> = self.datasets.iter().map(|d| d.config.id.as_str()).collect();
                invalid_config(format!(
                    "unknown dataset '{id}' (available: {})",
                    ids.join(", ")
                ))
            })
    }

    /// Anatomy a morph target resolves to. `Subject` names are `dataset/subject`.
    pub fn target_anatomy(
        &self,
        target: &MorphTarget,
        native: &Arc<Anatomy>,
    ) -> Result<Arc<Anatomy>> {
        match target {
            MorphTarget::Identity => Ok(native.clone()),
            MorphTarget::Template => Ok(self.template.clone()),
            MorphTarget::Subject(q) => {
                let (ds, sub) = q.split_once('/').ok_or_else(|| {
                    invalid_input(format!("subject target `{q}` is not dataset/subject"))
                })?;
                Ok(self.dataset(ds)?.subject(sub)?.anatomy.clone())
            }
        }
    }
}

/// A session's time series with per-sample labels.
#[derive(Debug, Clone)]
pub struct Recording {
    /// channels x samples
    pub data: DMatrix<f64>,
    pub labels: Vec<u8>,
    pub sampling_rate_hz: f64,
}

/// Which stages a pipeline may compute when their output is not cached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComputePolicy {
    All,
    /// Only the command that owns this stage; anything else must be cached.
    Only(Stage),
    /// Everything must be cached.
    Nothing,
}

/// CLI command that produces a stage's output.
pub fn command_for(stage: Stage) -> &'static str {
    match stage {
        Stage::Simulate => "simulate",
        Stage::Bandpass | Stage::Notch | Stage::Resample => "preprocess",
        Stage::Reconstruct => "reconstruct",
        Stage::Morph | Stage::Standardize => "assemble",
    }
}

#[derive(Debug, Default)]
pub struct CacheStats {
    pub hits: AtomicUsize,
    pub misses: AtomicUsize,
}

impl CacheStats {
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

pub struct Pipeline {
    pub config: Config,
    pub cache: Cache,
    /// Recompute and overwrite cached outputs.
    pub force: bool,
    pub policy: ComputePolicy,
    pub world: World,
    pub stats: CacheStats,
}

fn target_tag(t: &MorphTarget) -> String {
    match t {
        MorphTarget::Identity => "native".into(),
        MorphTarget::Template => "template".into(),
        MorphTarget::Subject(s) => format!("subject:{s}"),
    }
}

fn matrix_tensor(m: &DMatrix<f64>) -> Result<Tensor> {
    Tensor::f64(vec![m.nrows(), m.ncols()], m.as_slice().to_vec())
}

fn tensor_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    if t.shape.len() != 2 {
        return Err(invalid_input("cached matrix must be 2-D"));
    }
    Ok(DMatrix::from_column_slice(
        t.shape[0],
        t.shape[1],
        t.as_f64()?,
    ))
}

impl Pipeline {
    pub fn new(config: Config, cache: Cache) -> Result<Self> {
        for r in [Representation::Sensor, Representation::Source] {
            validate_order(&plan_stages(&config, r))?;
        }
        let world = World::build(&config)?;
        Ok(Self {
            config,
            cache,
            force: false,
            policy: ComputePolicy::All,
            world,
            stats: CacheStats::default(),
        })
    }

    pub fn with_force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn with_policy(mut self, policy: ComputePolicy) -> Self {
        self.policy = policy;
        self
    }

    fn may_compute(&self, stage: Stage) -> Result<()> {
        let ok = match self.policy {
            ComputePolicy::All => true,
            ComputePolicy::Only(s) => command_for(s) == command_for(stage),
            ComputePolicy::Nothing => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::MissingCache {
                stage: command_for(stage).into(),
            })
        }
    }

    fn dataset_of(&self, k: &SessionKey) -> Result<&DatasetWorld> {
        self.world.dataset(&k.dataset)
    }

    pub fn raw_key(&self, k: &SessionKey) -> Result<CacheKey> {
        let sc = &self.config.scenario;
        let d = &self.dataset_of(k)?.config;
        Ok(CacheKey::new(&k.dataset, &k.subject, &k.session)
            .with("stage", Stage::Simulate)
            .with("seed", sc.seed)
            .with("head_radius_mm", sc.head_radius_mm)
            .with("sim_voxel_size_mm", sc.sim_voxel_size_mm)
            .with("sim_rate_hz", sc.sim_rate_hz)
            .with("session_duration_s", sc.session_duration_s)
            .with("speech_fraction", sc.speech_fraction)
            .with("mean_segment_s", sc.mean_segment_s)
            .with("distortion", sc.distortion)
            .with(
                "dataset",
                serde_json::to_string(d).expect("dataset config serialises"),
            ))
    }

    pub fn preprocess_key(&self, k: &SessionKey) -> Result<CacheKey> {
        let p = &self.config.preprocess;
        let mut key = self
            .raw_key(k)?
            .with("stage", Stage::Resample)
            .with("highpass_hz", p.highpass_hz);
        key = key
            .with("lowpass_hz", p.lowpass_hz)
            .with("downsample_hz", p.downsample_hz)
            .with("notch", p.notch);
        if p.notch {
            key = key.with("notch_hz", p.notch_hz);
        }
        Ok(key)
    }

    pub fn reconstruct_key(&self, k: &SessionKey) -> Result<CacheKey> {
        let s = &self.config.source;
        Ok(self
            .preprocess_key(k)?
            .with("stage", Stage::Reconstruct)
            .with("method", &s.method)
            .with("voxel_size_mm", s.voxel_size_mm)
            .with("snr", s.snr)
            .with("cov_form", &s.cov_form)
            .with("voxel_type", &s.voxel_type)
            .with("structurals", &s.structurals)
            .with("prior", &s.prior)
            .with("slice_stride", self.config.scenario.slice_stride))
    }

    pub fn session_key(
        &self,
        k: &SessionKey,
        repr: Representation,
        target: &MorphTarget,
    ) -> Result<CacheKey> {
        Ok(match repr {
            Representation::Sensor => self
                .preprocess_key(k)?
                .with("stage", Stage::Standardize)
                .with("representation", repr)
                .with("slice_stride", self.config.scenario.slice_stride),
            Representation::Source => self
                .reconstruct_key(k)?
                .with("stage", Stage::Standardize)
                .with("representation", repr)
                .with("target", target_tag(target)),
        })
    }

    fn load_pair(&self, key: &CacheKey) -> Result<Option<(DMatrix<f64>, Vec<u8>)>> {
        if self.force {
            return Ok(None);
        }
        let data = self.cache.try_load(&key.clone().with("part", "data"))?;
        let labels = self.cache.try_load(&key.clone().with("part", "labels"))?;
        match (data, labels) {
            (Some(d), Some(l)) => {
                self.stats.hits.fetch_add(1, Ordering::Relaxed);
                Ok(Some((tensor_matrix(&d)?, l.as_u8()?.to_vec())))
            }
            _ => Ok(None),
        }
    }

    fn store_pair(&self, key: &CacheKey, data: &DMatrix<f64>, labels: &[u8]) -> Result<()> {
        self.stats.misses.fetch_add(1, Ordering::Relaxed);
        self.cache
            .store(&key.clone().with("part", "data"), &matrix_tensor(data)?)?;
        self.cache.store(
            &key.clone().with("part", "labels"),
            &Tensor::u8(vec![labels.len()], labels.to_vec())?,
        )?;
        Ok(())
    }

    /// Whether the output of `stage` for `k` is already cached.
    pub fn is_cached(&self, k: &SessionKey, stage: Stage) -> Result<bool> {
        let key = match stage {
            Stage::Simulate => self.raw_key(k)?,
            Stage::Bandpass | Stage::Notch | Stage::Resample => self.preprocess_key(k)?,
            _ => self.reconstruct_key(k)?,
        };
        Ok(self.cache.contains(&key.with("part", "data")))
    }

    fn sensor_recording(&self, k: &SessionKey, rec: Recording) -> Result<SensorRecording> {
        let d = self.dataset_of(k)?;
        let ids = RecordingIds {
            dataset_id: k.dataset.clone(),
            subject_id: k.subject.clone(),
            session_id: k.session.clone(),
        };
        let stim = StimulusTrack::from_labels(rec.labels, rec.sampling_rate_hz);
        SensorRecording::new(rec.data, rec.sampling_rate_hz, ids, stim, d.sensors.clone())
    }

    /// Raw simulated sensor data at the simulation rate.
    pub fn simulate(&self, k: &SessionKey) -> Result<Recording> {
        let sc = &self.config.scenario;
        let key = self.raw_key(k)?;
        if let Some((data, labels)) = self.load_pair(&key)? {
            return Ok(Recording {
                data,
                labels,
                sampling_rate_hz: sc.sim_rate_hz,
            });
        }
        self.may_compute(Stage::Simulate)?;
        let d = self.dataset_of(k)?;
        let sub = d.subject(&k.subject)?;
        if !d.config.session_names().contains(&k.session) {
            return Err(invalid_input(format!(
                "dataset {} has no session {}",
                k.dataset, k.session
            )));
        }
        let session_seed = seed::derive(
            sc.seed,
            &[
                seed::tag(&k.dataset),
                seed::tag(&k.subject),
                seed::tag(&k.session),
            ],
        );
        let stim = make_stimulus_track(
            sc.session_duration_s,
            sc.sim_rate_hz,
            sc.speech_fraction,
            sc.mean_segment_s,
            session_seed,
        )?;
        let response = ResponseConfig {
            regions: d.config.regions.clone(),
            direction: d.config.direction,
            onset_gain: d.config.onset_gain,
            sustained_gain: d.config.sustained_gain,
            ..ResponseConfig::default()
        };
        let ids = RecordingIds {
            dataset_id: k.dataset.clone(),
            subject_id: k.subject.clone(),
            session_id: k.session.clone(),
        };
        let rec = simulate_recording(
            &sub.sim_anatomy,
            &sub.sim_leadfield,
            &d.sensors,
            &stim,
            &d.config.noise,
            &response,
            ids,
            session_seed,
        )?;
        self.store_pair(&key, &rec.data, &rec.stimulus.labels)?;
        Ok(Recording {
            data: rec.data,
            labels: rec.stimulus.labels,
            sampling_rate_hz: sc.sim_rate_hz,
        })
    }

    /// Bandpass, optional notch, resample.
    pub fn preprocess(&self, k: &SessionKey) -> Result<Recording> {
        let p = &self.config.preprocess;
        let key = self.preprocess_key(k)?;
        if let Some((data, labels)) = self.load_pair(&key)? {
            return Ok(Recording {
                data,
                labels,
                sampling_rate_hz: p.downsample_hz,
            });
        }
        self.may_compute(Stage::Resample)?;
        let raw = self.simulate(k)?;
        let rec = self.sensor_recording(k, raw)?;
        let spec = FilterSpec {
            highpass_hz: Some(p.highpass_hz),
            lowpass_hz: Some(p.lowpass_hz),
            notch_hz: None,
        };
        let mut rec = bandpass_filter(&rec, &spec)?;
        if p.notch {
            rec = notch_filter(&rec, Some(p.notch_hz))?;
        }
        let rec = resample(&rec, p.downsample_hz)?;
        self.store_pair(&key, &rec.data, &rec.stimulus.labels)?;
        Ok(Recording {
            data: rec.data,
            labels: rec.stimulus.labels,
            sampling_rate_hz: p.downsample_hz,
        })
    }

    fn strided(&self, data: &DMatrix<f64>, labels: &[u8]) -> (DMatrix<f64>, Vec<u8>) {
        let stride = self.config.scenario.slice_stride;
        let cols: Vec<usize> = (0..data.ncols()).step_by(stride).collect();
        (
            data.select_columns(cols.iter()),
            cols.iter().map(|&c| labels[c]).collect(),
        )
    }

    /// Anatomy the inverse is computed on for subject `k`.
    pub fn reconstruction_anatomy(&self, k: &SessionKey) -> Result<Arc<Anatomy>> {
        let sub = self.dataset_of(k)?.subject(&k.subject)?;
        Ok(match self.config.source.structurals.as_str() {
            "template" => self.world.template.clone(),
            _ => sub.anatomy.clone(),
        })
    }

    /// Source estimate of the strided slices on the reconstruction anatomy.
    pub fn reconstruct(&self, k: &SessionKey) -> Result<SourceEstimate> {
        let cfg = &self.config;
        let key = self.reconstruct_key(k)?;
        let anatomy = self.reconstruction_anatomy(k)?;
        let voxel_type = cfg.voxel_type()?;
        let fs = cfg.preprocess.downsample_hz / cfg.scenario.slice_stride as f64;
        if let Some((data, _)) = self.load_pair(&key)? {
            return Ok(SourceEstimate {
                data,
                voxel_type,
                anatomy,
                sampling_rate_hz: fs,
            });
        }
        self.may_compute(Stage::Reconstruct)?;
        let pre = self.preprocess(k)?;
        let d = self.dataset_of(k)?;
        let leadfield = compute_lead_field(&anatomy, &d.sensors)?;
        let silence: Vec<bool> = pre.labels.iter().map(|&l| l == 0).collect();
        let noise_cov = estimate_noise_covariance(&pre.data, &silence, cfg.cov_form()?)?;
        let data_cov = data_covariance(&pre.data);
        let inputs = InverseInputs {
            leadfield: &leadfield,
            noise_cov: &noise_cov,
            snr: cfg.source.snr,
            method: cfg.method()?,
            prior: cfg.prior()?,
            data_cov: Some(&data_cov),
            subject_id: &k.subject,
        };
        let op = make_inverse_operator(&inputs)?;
        let (slices, labels) = self.strided(&pre.data, &pre.labels);
        let est = apply_inverse(&op, &slices, anatomy, fs, voxel_type)?;
        self.store_pair(&key, &est.data, &labels)?;
        Ok(est)
    }

    fn source_labels(&self, k: &SessionKey) -> Result<Vec<u8>> {
        let key = self.reconstruct_key(k)?.with("part", "labels");
        match self.cache.try_load(&key)? {
            Some(t) => Ok(t.as_u8()?.to_vec()),
            None => Err(Error::MissingCache {
                stage: "reconstruct".into(),
            }),
        }
    }

    /// Standardized per-session features ready for assembly.
    pub fn session(
        &self,
        k: &SessionKey,
        repr: Representation,
        target: &MorphTarget,
    ) -> Result<SessionData> {
        let key = self.session_key(k, repr, target)?;
        if let Some((features, labels)) = self.load_pair(&key)? {
            return Ok(SessionData {
                key: k.clone(),
                features,
                labels,
            });
        }
        self.may_compute(Stage::Standardize)?;
        let (raw, labels) = match repr {
            Representation::Sensor => {
                let pre = self.preprocess(k)?;
                self.strided(&pre.data, &pre.labels)
            }
            Representation::Source => {
                let est = self.reconstruct(k)?;
                let labels = self.source_labels(k)?;
                let to = self.world.target_anatomy(target, &est.anatomy)?;
                let data = if Arc::ptr_eq(&to, &est.anatomy) || *to == *est.anatomy {
                    est.data
                } else {
                    build_morph_map(&est.anatomy, &to)?.apply(&est.data, est.voxel_type)
                };
                (data, labels)
            }
        };
        let (features, _) = standardize(&raw);
        self.store_pair(&key, &features, &labels)?;
        Ok(SessionData {
            key: k.clone(),
            features,
            labels,
        })
    }

    /// Loads (or builds) many sessions, fanning out over workers.
    pub fn sessions(
        &self,
        keys: &[SessionKey],
        repr: Representation,
        target: &MorphTarget,
    ) -> Result<Vec<SessionData>> {
        par::map_slice(keys, |k| self.session(k, repr, target))
            .into_iter()
            .collect()
    }

    /// Runs `stage` for every session of every dataset.
    pub fn run_stage(&self, stage: Stage) -> Result<usize> {
        let keys: Vec<SessionKey> = self
            .world
            .datasets
            .iter()
            .flat_map(|d| d.session_keys())
            .collect();
        let done: Vec<Result<()>> = par::map_slice(&keys, |k| match stage {
            Stage::Simulate => self.simulate(k).map(|_| ()),
            Stage::Bandpass | Stage::Notch | Stage::Resample => self.preprocess(k).map(|_| ()),
            Stage::Reconstruct => self.reconstruct(k).map(|_| ()),
            Stage::Morph | Stage::Standardize => self.assemble_targets(k),
        });
        done.into_iter()
            .collect::<Result<Vec<_>>>()
            .map(|v| v.len())
    }

    /// Morph targets a session is needed on by the experiments: the template
    /// for everyone, the native grid for single-subject datasets, and each
    /// single-subject anatomy for inter-subject test sessions.
    pub fn targets_for(&self, k: &SessionKey) -> Result<Vec<MorphTarget>> {
        let d = self.dataset_of(k)?;
        let mut out = vec![MorphTarget::Template];
        match d.config.split_kind()? {
            SplitKind::BySession => out.push(MorphTarget::Identity),
            SplitKind::BySubject => {
                if d.config.test.contains(&k.subject) {
                    for other in &self.world.datasets {
                        if other.config.split_kind()? == SplitKind::BySession {
                            for s in &other.subjects {
                                out.push(MorphTarget::Subject(format!(
                                    "{}/{}",
                                    other.config.id, s.name
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn assemble_targets(&self, k: &SessionKey) -> Result<()> {
        self.session(k, Representation::Sensor, &MorphTarget::Identity)?;
        for t in self.targets_for(k)? {
            self.session(k, Representation::Source, &t)?;
        }
        Ok(())
    }
}
