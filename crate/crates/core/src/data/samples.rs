//! Per-time-slice samples and leakage-safe splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;

use super::grid::GridLayout;
use crate::error::{invalid_config, invalid_input, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Representation {
    Sensor,
    Source,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::Sensor => "sensor",
            Representation::Source => "source",
        })
    }
}

impl FromStr for Representation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sensor" => Ok(Self::Sensor),
            "source" => Ok(Self::Source),
            _ => Err(invalid_config(format!(
                "unknown representation '{s}' (expected sensor, source)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionKey {
    pub dataset: String,
    pub subject: String,
    pub session: String,
}

impl SessionKey {
    pub fn new(dataset: &str, subject: &str, session: &str) -> Self {
        Self {
            dataset: dataset.into(),
            subject: subject.into(),
            session: session.into(),
        }
    }

    /// Subject identity qualified by dataset.
    pub fn subject_key(&self) -> String {
        format!("{}/{}", self.dataset, self.subject)
    }
}

impl fmt::Display for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.dataset, self.subject, self.session)
    }
}

/// One preprocessed session: features x time slices, plus per-slice labels.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub key: SessionKey,
    pub features: DMatrix<f64>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    /// Sessions of the same subject may be spread over splits.
    BySession,
    /// Every subject lives in exactly one split.
    BySubject,
}

#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub assignments: Vec<(SessionKey, Split)>,
}

impl SplitPlan {
    pub fn new(kind: SplitKind) -> Self {
        Self {
            kind,
            assignments: Vec::new(),
        }
    }

    pub fn assign(mut self, key: SessionKey, split: Split) -> Self {
        self.assignments.push((key, split));
        self
    }

    pub fn split_of(&self, key: &SessionKey) -> Option<Split> {
        self.assignments
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, s)| *s)
    }

    /// Rejects any session (or, for subject plans, any subject) in more than one split.
    pub fn check_leakage(&self) -> Result<()> {
        let mut sessions: BTreeMap<&SessionKey, Split> = BTreeMap::new();
        let mut subjects: BTreeMap<String, Split> = BTreeMap::new();
        for (k, s) in &self.assignments {
            if let Some(prev) = sessions.insert(k, *s) {
                if prev != *s {
                    return Err(Error::Leakage(format!(
                        "session {k} assigned to both {prev} and {s}"
                    )));
                }
            }
            if self.kind == SplitKind::BySubject {
                if let Some(prev) = subjects.insert(k.subject_key(), *s) {
                    if prev != *s {
                        return Err(Error::Leakage(format!(
                            "subject {} assigned to both {prev} and {s}",
                            k.subject_key()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn sessions_in(&self, split: Split) -> Vec<&SessionKey> {
        self.assignments
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Supervised single-time-slice samples, row-major `n x dim`.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
    /// Index into `subjects`, the dataset-qualified subject table.
    pub subject_index: Vec<usize>,
    pub subjects: Vec<String>,
    pub representation: Representation,
    pub grid: Option<Arc<GridLayout>>,
    pub split: Split,
    pub sessions: Vec<SessionKey>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subject_name(&self, i: usize) -> &str {
        &self.subjects[self.subject_index[i]]
    }

    /// Dense 6-channel tensor for sample `i`.
    pub fn inscribe(&self, i: usize) -> Result<Vec<f64>> {
        match (&self.representation, &self.grid) {
            (Representation::Source, Some(g)) => Ok(g.inscribe(self.sample(i))),
            _ => Err(invalid_input(
                "inscription needs a source-space sample set with a grid",
            )),
        }
    }

    /// Keeps samples whose index satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> SampleSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in &idx {
            features.extend_from_slice(self.sample(i));
        }
        SampleSet {
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            subject_index: idx.iter().map(|&i| self.subject_index[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> SampleSet {
        SampleSet {
            dim: self.dim,
            features: Vec::new(),
            labels: Vec::new(),
            subject_index: Vec::new(),
            subjects: self.subjects.clone(),
            representation: self.representation,
            grid: self.grid.clone(),
            split: self.split,
            sessions: self.sessions.clone(),
        }
    }

    /// Fraction of positive labels.
    pub fn positive_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.labels.iter().sum::<f64>() / self.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct AssembleOptions {
    pub representation: Representation,
    pub grid: Option<Arc<GridLayout>>,
    /// Keep every `stride`-th time slice.
    pub stride: usize,
}

impl AssembleOptions {
    pub fn sensor() -> Self {
        Self {
            representation: Representation::Sensor,
            grid: None,
            stride: 1,
        }
    }

    pub fn source(grid: Arc<GridLayout>) -> Self {
        Self {
            representation: Representation::Source,
            grid: Some(grid),
            stride: 1,
        }
    }

    /// Source features that do not map onto the voxel grid.
    pub fn source_flat() -> Self {
        Self {
            representation: Representation::Source,
            grid: None,
            stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
}

#[derive(Debug, Clone)]
pub struct SplitSets {
    pub train: SampleSet,
    pub val: SampleSet,
    pub test: SampleSet,
}

impl SplitSets {
    pub fn get(&self, s: Split) -> &SampleSet {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Builds train/val/test sample sets. The subject table is shared across
/// splits and ordered by first appearance in the plan.
pub fn assemble(
    plan: &SplitPlan,
    sessions: &[SessionData],
    opts: &AssembleOptions,
) -> Result<SplitSets> {
    plan.check_leakage()?;
    if opts.stride == 0 {
        return Err(invalid_config("stride must be >= 1"));
    }
    let dim = sessions
        .first()
        .map(|s| s.features.nrows())
        .ok_or_else(|| invalid_input("no sessions"))?;
    // Reduced source features (magnitudes, PCA, parcels) assemble without a grid.
    if let Some(g) = &opts.grid {
        if opts.representation == Representation::Sensor {
            return Err(invalid_input("sensor assembly takes no grid"));
        }
        if 3 * g.n_voxels() != dim {
            return Err(invalid_input(format!(
                "source features have {dim} rows, grid expects {}",
                3 * g.n_voxels()
            )));
        }
    }
    let mut subjects: Vec<String> = Vec::new();
    for (k, _) in &plan.assignments {
        let sk = k.subject_key();
        if !subjects.contains(&sk) {
            subjects.push(sk);
        }
    }
    let mut seen = BTreeSet::new();
    let mut out: BTreeMap<Split, SampleSet> = BTreeMap::new();
    for split in Split::ALL {
        let mut set = SampleSet {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
            subject_index: Vec::new(),
            subjects: subjects.clone(),
            representation: opts.representation,
            grid: opts.grid.clone(),
            split,
            sessions: Vec::new(),
        };
        for key in plan.sessions_in(split) {
            let s = sessions
                .iter()
                .find(|s| &s.key == key)
                .ok_or_else(|| invalid_input(format!("session {key} in plan but not provided")))?;
            if !seen.insert(key.clone()) {
                continue;
            }
            if s.features.nrows() != dim || s.labels.len() != s.features.ncols() {
                return Err(invalid_input(format!(
                    "session {key} has inconsistent shape"
                )));
            }
            let si = subjects
                .iter()
                .position(|x| *x == key.subject_key())
                .expect("subject table covers plan");
            for t in (0..s.features.ncols()).step_by(opts.stride) {
                set.features.extend(s.features.column(t).iter());
                set.labels.push(f64::from(s.labels[t]));
                set.subject_index.push(si);
            }
            set.sessions.push(key.clone());
        }
        out.insert(split, set);
    }
    Ok(SplitSets {
        train: out.remove(&Split::Train).unwrap(),
        val: out.remove(&Split::Val).unwrap(),
        test: out.remove(&Split::Test).unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(sub: &str, ses: &str, len: usize) -> SessionData {
        SessionData {
            key: SessionKey::new("d", sub, ses),
            features: DMatrix::from_fn(4, len, |r, c| (r * 1000 + c) as f64),
            labels: (0..len).map(|t| (t % 2) as u8).collect(),
        }
    }

    #[test]
    fn single_subject_split_sizes_follow_session_lengths() {
        let mut plan = SplitPlan::new(SplitKind::BySession);
        let mut data = Vec::new();
        for i in 0..10 {
            let name = format!("s{i:03}");
            let split = match i {
                0..=7 => Split::Train,
                8 => Split::Val,
                _ => Split::Test,
            };
            plan = plan.assign(SessionKey::new("d", "a", &name), split);
            data.push(session("a", &name, 100 + 10 * i));
        }
        let sets = assemble(&plan, &data, &AssembleOptions::sensor()).unwrap();
        assert_eq!(
            sets.train.len(),
            (0..8).map(|i| 100 + 10 * i).sum::<usize>()
        );
        assert_eq!(sets.val.len(), 180);
        assert_eq!(sets.test.len(), 190);
        assert_eq!(sets.test.sample(1), &[1.0, 1001.0, 2001.0, 3001.0]);
        assert_eq!(sets.test.labels[1], 1.0);
    }

    #[test]
    fn inter_subject_sets_are_disjoint() {
        let mut plan = SplitPlan::new(SplitKind::BySubject);
        let mut data = Vec::new();
        for i in 0..9 {
            let sub = format!("A{}", 2002 + i);
            let split = match i {
                0 | 1 => Split::Val,
                2 | 3 => Split::Test,
                _ => Split::Train,
            };
            plan = plan.assign(SessionKey::new("d", &sub, "1"), split);
            data.push(session(&sub, "1", 10));
        }
        let sets = assemble(&plan, &data, &AssembleOptions::sensor()).unwrap();
        let subs = |s: &SampleSet| s.subject_index.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(subs(&sets.train).len(), 5);
        assert_eq!(subs(&sets.val).len(), 2);
        assert_eq!(subs(&sets.test).len(), 2);
        assert!(subs(&sets.train).is_disjoint(&subs(&sets.test)));
        assert!(subs(&sets.val).is_disjoint(&subs(&sets.test)));
    }

    #[test]
    fn overlapping_session_is_rejected() {
        let k = SessionKey::new("d", "a", "1");
        let plan = SplitPlan::new(SplitKind::BySession)
            .assign(k.clone(), Split::Train)
            .assign(k, Split::Val);
        let err = assemble(&plan, &[session("a", "1", 5)], &AssembleOptions::sensor()).unwrap_err();
        assert!(matches!(err, Error::Leakage(_)));
    }

    #[test]
    fn subject_in_two_splits_is_rejected_for_subject_plans() {
        let plan = SplitPlan::new(SplitKind::BySubject)
            .assign(SessionKey::new("d", "a", "1"), Split::Train)
            .assign(SessionKey::new("d", "a", "2"), Split::Test);
        assert!(matches!(plan.check_leakage(), Err(Error::Leakage(_))));
        let plan = SplitPlan {
            kind: SplitKind::BySession,
            ..plan
        };
        assert!(plan.check_leakage().is_ok());
    }

    #[test]
    fn stride_subsamples_slices() {
        let plan = SplitPlan::new(SplitKind::BySession)
            .assign(SessionKey::new("d", "a", "1"), Split::Train);
        let sets = assemble(
            &plan,
            &[session("a", "1", 10)],
            &AssembleOptions::sensor().with_stride(3),
        )
        .unwrap();
        assert_eq!(sets.train.len(), 4);
        assert_eq!(sets.train.sample(1)[0], 3.0);
    }

    #[test]
    fn sensor_samples_cannot_be_inscribed() {
        let plan = SplitPlan::new(SplitKind::BySession)
            .assign(SessionKey::new("d", "a", "1"), Split::Train);
        let sets = assemble(&plan, &[session("a", "1", 3)], &AssembleOptions::sensor()).unwrap();
        assert!(matches!(
            sets.train.inscribe(0),
            Err(Error::InvalidInput(_))
        ));
    }
}
