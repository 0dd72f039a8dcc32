//! Shared experiment plumbing: assembling train/val/test domains from the
//! pipeline, building budget-matched model specs and memoised training.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;

use crate::config::Config;
use crate::data::{
    assemble, AssembleOptions, GridLayout, Representation, SampleSet, SessionData, SessionKey,
    Split, SplitKind, SplitPlan, SplitSets,
};
use crate::dsp::standardize;
use crate::error::{invalid_config, Error, Result};
use crate::features::{parcel_features, VoxelPca};
use crate::inverse::VoxelType;
use crate::morph::MorphTarget;
use crate::nn::{sensor_graph, voxel_graph, Family, InputShape, ModelSpec};
use crate::par;
use crate::pipeline::{DatasetWorld, Pipeline};
use crate::seed;
use crate::sim::{Anatomy, SensorArray};
use crate::train::{evaluate, train_model, Hparams, TrainOutcome};

/// Assembled splits plus what is needed to build models on them.
#[derive(Clone)]
pub struct Domain {
    pub label: String,
    pub sets: SplitSets,
    pub representation: Representation,
    pub split_kind: SplitKind,
    /// Anatomy the source features live on.
    pub anatomy: Option<Arc<Anatomy>>,
    pub sensors: Arc<SensorArray>,
}

impl Domain {
    pub fn grid(&self) -> Option<&GridLayout> {
        self.sets.train.grid.as_deref()
    }

    /// Subjects with training samples, in subject-table order.
    pub fn train_subjects(&self) -> Vec<String> {
        let t = &self.sets.train;
        let mut seen = vec![false; t.subjects.len()];
        for &i in &t.subject_index {
            seen[i] = true;
        }
        t.subjects
            .iter()
            .zip(seen)
            .filter(|(_, s)| *s)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

pub struct Lab<'a> {
    pub p: &'a Pipeline,
    pub seeds: Vec<u64>,
    memo: Mutex<HashMap<String, Arc<TrainOutcome>>>,
}

/// Refusal for sensor-space models asked to evaluate on another dataset.
pub fn refuse_cross_dataset_sensor(from: &SensorArray, to: &SensorArray) -> Result<()> {
    let same = from.positions == to.positions && from.orientations == to.orientations;
    if same {
        return Ok(());
    }
    Err(Error::Refused(format!(
        "sensor layouts `{}` ({} sensors) and `{}` ({} sensors) differ, making cross-dataset sensor space \
         evaluation impossible for fixed-domain models",
        from.layout_id,
        from.len(),
        to.layout_id,
        to.len()
    )))
}

impl<'a> Lab<'a> {
    pub fn new(p: &'a Pipeline) -> Self {
        let e = &p.config.experiment;
        let seeds = (0..e.seeds as u64)
            .map(|i| seed::derive(e.base_seed, &[seed::tag("run"), i]))
            .collect();
        Self {
            p,
            seeds,
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &Config {
        &self.p.config
    }

    pub fn primary(&self) -> Result<&DatasetWorld> {
        self.p.world.dataset(&self.config().experiment.primary)
    }

    pub fn secondary(&self) -> Result<&DatasetWorld> {
        self.p.world.dataset(&self.config().experiment.secondary)
    }

    fn load(
        &self,
        keys: &[SessionKey],
        repr: Representation,
        target: &MorphTarget,
    ) -> Result<Vec<SessionData>> {
        self.p.sessions(keys, repr, target)
    }

    /// Reduces vec source sessions per the `dimred` / `voxel_type` settings.
    /// Returns whether the features still map onto the voxel grid.
    fn reduce(
        &self,
        sessions: &mut [SessionData],
        train: &[SessionKey],
        anatomy: &Anatomy,
    ) -> Result<bool> {
        let cfg = self.config();
        let vec = cfg.voxel_type()? == VoxelType::Vec;
        let restandardize = |m: DMatrix<f64>| standardize(&m).0;
        match cfg.source.dimred.as_str() {
            "none" => Ok(vec),
            _ if !vec => Err(invalid_config("dimensionality reduction needs vec voxels")),
            "pca" => {
                let fit: Vec<&DMatrix<f64>> = sessions
                    .iter()
                    .filter(|s| train.contains(&s.key))
                    .map(|s| &s.features)
                    .collect();
                let pca = VoxelPca::fit(&fit, cfg.source.pca_components)?;
                for s in sessions.iter_mut() {
                    s.features = restandardize(pca.transform(&s.features));
                }
                Ok(false)
            }
            "parcels" => {
                for s in sessions.iter_mut() {
                    s.features = restandardize(parcel_features(&s.features, anatomy)?.data);
                }
                Ok(false)
            }
            other => Err(invalid_config(format!("unknown dimred `{other}`"))),
        }
    }

    fn assemble_domain(
        &self,
        label: String,
        plan: &SplitPlan,
        repr: Representation,
        target: &MorphTarget,
        anatomy: Arc<Anatomy>,
        sensors: Arc<SensorArray>,
    ) -> Result<Domain> {
        let keys: Vec<SessionKey> = plan.assignments.iter().map(|(k, _)| k.clone()).collect();
        let mut sessions = self.load(&keys, repr, target)?;
        let opts = match repr {
            Representation::Sensor => AssembleOptions::sensor(),
            Representation::Source => {
                let train: Vec<SessionKey> = plan
                    .sessions_in(Split::Train)
                    .into_iter()
                    .cloned()
                    .collect();
                if self.reduce(&mut sessions, &train, &anatomy)? {
                    AssembleOptions::source(Arc::new(GridLayout::from_anatomy(&anatomy)))
                } else {
                    AssembleOptions::source_flat()
                }
            }
        };
        let sets = assemble(plan, &sessions, &opts)?;
        let anatomy = (repr == Representation::Source).then_some(anatomy);
        Ok(Domain {
            label,
            sets,
            representation: repr,
            split_kind: plan.kind,
            anatomy,
            sensors,
        })
    }

    /// Inter-subject domain of the primary dataset on the template grid.
    pub fn inter(&self, repr: Representation) -> Result<Domain> {
        let d = self.primary()?;
        let names: Vec<&str> = d.subjects.iter().map(|s| s.name.as_str()).collect();
        let plan = d.split_plan(&names)?;
        self.assemble_domain(
            format!("{}:{repr}", d.config.id),
            &plan,
            repr,
            &MorphTarget::Template,
            self.p.world.template.clone(),
            d.sensors.clone(),
        )
    }

    /// Single-subject domain of one secondary-dataset subject on its own grid.
    pub fn single(&self, subject: &str, repr: Representation) -> Result<Domain> {
        let d = self.secondary()?;
        let plan = d.split_plan(&[subject])?;
        let first = plan
            .assignments
            .first()
            .map(|(k, _)| k.clone())
            .ok_or_else(|| invalid_config("empty plan"))?;
        let anatomy = self.p.reconstruction_anatomy(&first)?;
        self.assemble_domain(
            format!("{}/{subject}:{repr}", d.config.id),
            &plan,
            repr,
            &MorphTarget::Identity,
            anatomy,
            d.sensors.clone(),
        )
    }

    /// Primary training/validation data plus extra training sessions from
    /// the secondary dataset, all on the template grid. The test split holds
    /// the secondary dataset's test sessions.
    pub fn combined(&self, extra: &[SessionKey]) -> Result<Domain> {
        let a = self.primary()?;
        let b = self.secondary()?;
        let names: Vec<&str> = a.subjects.iter().map(|s| s.name.as_str()).collect();
        let base = a.split_plan(&names)?;
        let mut plan = SplitPlan::new(SplitKind::BySession);
        for (k, s) in &base.assignments {
            if *s != Split::Test {
                plan = plan.assign(k.clone(), *s);
            }
        }
        for k in extra {
            plan = plan.assign(k.clone(), Split::Train);
        }
        for sub in &b.subjects {
            for ses in &b.config.test {
                plan = plan.assign(SessionKey::new(&b.config.id, &sub.name, ses), Split::Test);
            }
        }
        plan.check_leakage()?;
        self.assemble_domain(
            format!("{}+{}:source", a.config.id, b.config.id),
            &plan,
            Representation::Source,
            &MorphTarget::Template,
            self.p.world.template.clone(),
            a.sensors.clone(),
        )
    }

    /// Test sessions of `dataset` mapped onto `target`, as a sample set
    /// compatible with models trained on `like`.
    pub fn test_set(
        &self,
        dataset: &str,
        target: &MorphTarget,
        like: &Domain,
    ) -> Result<SampleSet> {
        let d = self.p.world.dataset(dataset)?;
        let mut plan = SplitPlan::new(SplitKind::BySession);
        match d.config.split_kind()? {
            SplitKind::BySubject => {
                for sub in &d.config.test {
                    for ses in d.config.session_names() {
                        plan = plan.assign(SessionKey::new(dataset, sub, &ses), Split::Test);
                    }
                }
            }
            SplitKind::BySession => {
                for sub in &d.subjects {
                    for ses in &d.config.test {
                        plan = plan.assign(SessionKey::new(dataset, &sub.name, ses), Split::Test);
                    }
                }
            }
        }
        if like.representation != Representation::Source {
            return Err(invalid_config(
                "cross-domain test sets are source space only",
            ));
        }
        if self.config().source.dimred != "none" || self.config().voxel_type()? != VoxelType::Vec {
            return Err(invalid_config(
                "cross-domain evaluation needs full vec voxel features",
            ));
        }
        let keys: Vec<SessionKey> = plan.assignments.iter().map(|(k, _)| k.clone()).collect();
        let sessions = self.load(&keys, Representation::Source, target)?;
        let grid = like
            .sets
            .train
            .grid
            .clone()
            .ok_or_else(|| invalid_config("training domain has no grid"))?;
        Ok(assemble(&plan, &sessions, &AssembleOptions::source(grid))?.test)
    }

    pub fn budget(&self, kind: SplitKind) -> usize {
        match kind {
            SplitKind::BySubject => self.config().models.multi_subject_budget,
            SplitKind::BySession => self.config().models.single_subject_budget,
        }
    }

    /// Model spec with the domain's input layout, sized to `budget` parameters.
    pub fn spec(&self, family: Family, dom: &Domain, budget: usize) -> Result<ModelSpec> {
        let dim = dom.sets.train.dim;
        let input = match family {
            Family::Logistic | Family::Mlp => InputShape::Flat { dim },
            Family::CnnSe => {
                let g = dom
                    .grid()
                    .ok_or_else(|| invalid_config("cnn_se needs vec voxel features on a grid"))?;
                InputShape::Dense { dims: g.dims }
            }
            Family::Gat => match dom.representation {
                Representation::Sensor => InputShape::Graph {
                    graph: Arc::new(sensor_graph(&dom.sensors)?),
                    values_per_node: 1,
                },
                Representation::Source => {
                    if dom.grid().is_none() {
                        return Err(invalid_config("gat needs vec voxel features"));
                    }
                    let anat = dom.anatomy.as_ref().expect("source domain has an anatomy");
                    InputShape::Graph {
                        graph: Arc::new(voxel_graph(anat)?),
                        values_per_node: 3,
                    }
                }
            },
        };
        ModelSpec::new(family, input, dom.train_subjects()).solve_width(budget)
    }

    pub fn hparams(&self, family: Family, dom: &Domain) -> Hparams {
        self.config()
            .hparams_for(dom.split_kind, dom.representation, family)
    }

    /// Trains (or reuses) a model; results are memoised on
    /// (domain, family, hyperparameters, budget, seed).
    pub fn fit(
        &self,
        family: Family,
        dom: &Domain,
        hp: &Hparams,
        budget: usize,
        seed: u64,
    ) -> Result<Arc<TrainOutcome>> {
        let key = format!("{}|{family}|{hp:?}|{budget}|{seed}", dom.label);
        if let Some(hit) = self.memo.lock().expect("memo lock").get(&key) {
            return Ok(hit.clone());
        }
        let spec = self.spec(family, dom, budget)?;
        log::info!(
            "training {family} on {} (seed {seed:x}, {} params)",
            dom.label,
            spec.param_count()
        );
        let out = Arc::new(train_model(spec, &dom.sets.train, &dom.sets.val, hp, seed)?);
        self.memo
            .lock()
            .expect("memo lock")
            .insert(key, out.clone());
        Ok(out)
    }

    /// Default-hyperparameter fit with the domain's budget.
    pub fn fit_default(
        &self,
        family: Family,
        dom: &Domain,
        seed: u64,
    ) -> Result<Arc<TrainOutcome>> {
        self.fit(
            family,
            dom,
            &self.hparams(family, dom),
            self.budget(dom.split_kind),
            seed,
        )
    }

    /// Test balanced accuracy per seed.
    pub fn test_runs(&self, family: Family, dom: &Domain) -> Result<Vec<f64>> {
        par::map_slice(&self.seeds, |&s| {
            evaluate(
                &self.fit_default(family, dom, s)?.model,
                &dom.sets.test,
                None,
            )
        })
        .into_iter()
        .collect()
    }
}
