//! Command implementations.

use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;

use anyhow::{bail, Context, Result};
use clap::Args;
use sourcespace::config::Config;
use sourcespace::data::{Cache, CacheKey, Representation, SampleSet, SplitKind, Tensor};
use sourcespace::error::Error;
use sourcespace::experiments::{
    ablate, refuse_cross_dataset_sensor, run_named, Domain, Lab, Report, Table,
};
use sourcespace::morph::MorphTarget;
use sourcespace::nn::{Family, Model};
use sourcespace::par;
use sourcespace::pipeline::{command_for, plan_stages, ComputePolicy, Pipeline, Stage};
use sourcespace::train::{evaluate, random_search};

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Model family: logistic, mlp, cnn_se, gat.
    #[arg(long, default_value = "mlp")]
    pub family: String,
    /// Representation: sensor or source.
    #[arg(long = "repr", default_value = "source")]
    pub representation: String,
    /// Train a single-subject model for this secondary-dataset subject
    /// instead of the inter-subject model.
    #[arg(long)]
    pub subject: Option<String>,
}

pub struct Ctx {
    pub cfg: Config,
    pub cache: Cache,
    pub force: bool,
    pub build: bool,
    pub out: PathBuf,
}

impl Ctx {
    fn pipeline(&self, policy: ComputePolicy) -> Result<Pipeline> {
        let policy = if self.build {
            ComputePolicy::All
        } else {
            policy
        };
        Ok(Pipeline::new(self.cfg.clone(), self.cache.clone())?
            .with_force(self.force)
            .with_policy(policy))
    }

    pub fn stage(&self, stage: Stage) -> Result<()> {
        let p = self.pipeline(ComputePolicy::Only(stage))?;
        let cfg = &self.cfg;
        println!("config {}", cfg.content_hash());
        match stage {
            Stage::Simulate => {
                for d in &cfg.scenario.datasets {
                    println!(
                        "dataset {}: {} subjects x {} sessions, {} sensors",
                        d.id, d.n_subjects, d.sessions_per_subject, d.n_sensors
                    );
                }
            }
            Stage::Reconstruct => println!(
                "inverse {} snr {} covariance {} voxels {} mm {} structurals {}",
                cfg.source.method,
                cfg.source.snr,
                cfg.source.cov_form,
                cfg.source.voxel_size_mm,
                cfg.source.voxel_type,
                cfg.source.structurals
            ),
            Stage::Morph | Stage::Standardize => {
                let plan: Vec<String> = plan_stages(cfg, Representation::Source)
                    .iter()
                    .map(|s| s.to_string())
                    .collect();
                println!("source stages: {}", plan.join(" -> "));
            }
            _ => {
                let pp = &cfg.preprocess;
                println!(
                    "bandpass {}-{} Hz, notch {}, resample to {} Hz",
                    pp.highpass_hz,
                    pp.lowpass_hz,
                    if pp.notch {
                        format!("{} Hz", pp.notch_hz)
                    } else {
                        "off".into()
                    },
                    pp.downsample_hz
                );
            }
        }
        let n = p.run_stage(stage)?;
        println!(
            "{}: {n} sessions ({} cached, {} computed)",
            command_for(stage),
            p.stats.hits.load(Ordering::Relaxed),
            p.stats.misses.load(Ordering::Relaxed)
        );
        Ok(())
    }

    fn domain(&self, lab: &Lab, m: &ModelArgs) -> Result<(Family, Domain)> {
        let family: Family = m.family.parse()?;
        let repr: Representation = m.representation.parse()?;
        let dom = match &m.subject {
            Some(s) => lab.single(s, repr)?,
            None => lab.inter(repr)?,
        };
        Ok((family, dom))
    }

    fn checkpoint_key(&self, family: Family, dom: &Domain, seed_index: usize) -> CacheKey {
        let slug: String = dom
            .label
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        CacheKey::new("models", &slug, &family.to_string())
            .with("config", self.cfg.content_hash())
            .with("seed", seed_index)
    }

    pub fn train(&self, m: &ModelArgs) -> Result<()> {
        let p = self.pipeline(ComputePolicy::Nothing)?;
        let lab = Lab::new(&p);
        let (family, dom) = self.domain(&lab, m)?;
        let outcomes = par::map_slice(&lab.seeds, |&s| lab.fit_default(family, &dom, s));
        let mut runs = Table::new(&["seed", "epoch", "train_loss", "val_bacc"]);
        let mut summary = Table::new(&[
            "seed",
            "params",
            "best_epoch",
            "epochs",
            "stop",
            "val_bacc",
            "test_bacc",
        ]);
        for (i, out) in outcomes.into_iter().enumerate() {
            let out = out?;
            for e in &out.history {
                runs.push(vec![
                    i.to_string(),
                    e.epoch.to_string(),
                    format!("{:.6}", e.train_loss),
                    format!("{:.6}", e.val_bacc),
                ]);
            }
            let test = evaluate(&out.model, &dom.sets.test, None)?;
            summary.push(vec![
                i.to_string(),
                out.model.n_params().to_string(),
                out.best_epoch.to_string(),
                out.history.len().to_string(),
                format!("{:?}", out.stop),
                format!("{:.6}", out.best_val),
                format!("{test:.6}"),
            ]);
            let key = self.checkpoint_key(family, &dom, i);
            let path = self.cache.store(
                &key,
                &Tensor::f64(vec![out.model.n_params()], out.model.params.values.clone())?,
            )?;
            let meta = serde_json::json!({
                "family": family.to_string(),
                "domain": dom.label,
                "width": out.model.spec.width,
                "params": out.model.n_params(),
                "seed_index": i,
                "config_hash": self.cfg.content_hash(),
            });
            std::fs::write(
                path.with_extension("json"),
                serde_json::to_string_pretty(&meta)?,
            )?;
        }
        let name = format!("train_{family}_{}", slug_of(&dom));
        let r = Report::new(&name, &self.cfg, runs, summary)?.with_notes(vec![format!(
            "checkpoints under {}",
            self.cache.root.join("models").display()
        )])?;
        self.emit(&r)
    }

    pub fn eval(&self, m: &ModelArgs, on: Option<&str>) -> Result<()> {
        let p = self.pipeline(ComputePolicy::Nothing)?;
        let lab = Lab::new(&p);
        let (family, dom) = self.domain(&lab, m)?;
        let (label, test): (String, SampleSet) = match on {
            None => ("in-domain".into(), dom.sets.test.clone()),
            Some(ds) => {
                let other = p.world.dataset(ds)?;
                if dom.representation == Representation::Sensor {
                    refuse_cross_dataset_sensor(&dom.sensors, &other.sensors)?;
                }
                let target = match (&m.subject, dom.split_kind) {
                    (Some(s), SplitKind::BySession) => {
                        MorphTarget::Subject(format!("{}/{s}", lab.secondary()?.config.id))
                    }
                    _ => MorphTarget::Template,
                };
                (format!("{ds} test"), lab.test_set(ds, &target, &dom)?)
            }
        };
        let spec = lab
            .spec(family, &dom, lab.budget(dom.split_kind))?
            .with_dropout(lab.hparams(family, &dom).dropout);
        let mut runs = Table::new(&["seed", "evaluated_on", "bacc"]);
        let mut accs = Vec::new();
        for i in 0..lab.seeds.len() {
            let key = self.checkpoint_key(family, &dom, i);
            let t = self.cache.try_load(&key)?.ok_or(Error::MissingCache {
                stage: "train".into(),
            })?;
            let mut model = Model::build(spec.clone(), 0)?;
            let values = t.as_f64()?;
            if values.len() != model.n_params() {
                bail!(
                    "checkpoint {} has {} parameters, model expects {}",
                    key.canonical(),
                    values.len(),
                    model.n_params()
                );
            }
            model.params.values.copy_from_slice(values);
            let acc = evaluate(&model, &test, None)?;
            accs.push(acc);
            runs.push(vec![i.to_string(), label.clone(), format!("{acc:.6}")]);
        }
        let mut summary = Table::new(&["evaluated_on", "mean", "std", "n", "mean ± std"]);
        summary.push([vec![label], sourcespace::experiments::stat_cells(&accs)].concat());
        let suffix = on.map(|d| format!("_on_{d}")).unwrap_or_default();
        let r = Report::new(
            &format!("eval_{family}_{}{suffix}", slug_of(&dom)),
            &self.cfg,
            runs,
            summary,
        )?;
        self.emit(&r)
    }

    pub fn search(&self, m: &ModelArgs, trials: Option<usize>) -> Result<()> {
        let p = self.pipeline(ComputePolicy::Nothing)?;
        let lab = Lab::new(&p);
        let (family, dom) = self.domain(&lab, m)?;
        let budget = lab.budget(dom.split_kind);
        let n = trials.unwrap_or(self.cfg.search.n_trials);
        let res = random_search(
            &self.cfg.search_space(),
            n,
            self.cfg.experiment.base_seed,
            |hp, s| Ok(lab.fit(family, &dom, hp, budget, s)?.best_val),
        )?;
        let cols = [
            "trial",
            "lr",
            "weight_decay",
            "batch_size",
            "dropout",
            "val_bacc",
        ];
        let row = |t: &sourcespace::train::Trial| {
            vec![
                t.index.to_string(),
                format!("{:.3e}", t.hparams.lr),
                format!("{:.3e}", t.hparams.weight_decay),
                t.hparams.batch_size.to_string(),
                t.hparams.dropout.to_string(),
                format!("{:.6}", t.val_bacc),
            ]
        };
        let mut runs = Table::new(&cols);
        for t in &res.trials {
            runs.push(row(t));
        }
        let mut summary = Table::new(&cols);
        let best = res.best_trial();
        summary.push(row(best));
        let h = &best.hparams;
        let r = Report::new(
            &format!("search_{family}_{}", slug_of(&dom)),
            &self.cfg,
            runs,
            summary,
        )?
        .with_notes(vec![format!(
            "best as config: lr = {:e}, weight_decay = {:e}, batch_size = {}, dropout = {}",
            h.lr, h.weight_decay, h.batch_size, h.dropout
        )])?;
        self.emit(&r)
    }

    pub fn experiment(&self, name: &str) -> Result<()> {
        let p = self.pipeline(ComputePolicy::Nothing)?;
        let r = run_named(&p, name)?;
        self.emit(&r)
    }

    pub fn ablate(&self, axis: &str, values: &[String]) -> Result<()> {
        let r = ablate(&self.cfg, &self.cache, axis, values)?;
        self.emit(&r)
    }

    /// Writes a report, re-reads it to check its hash, and prints it.
    fn emit(&self, r: &Report) -> Result<()> {
        let files = r.write(&self.out)?;
        Report::read(&self.out.join(format!("{}.json", r.name)))
            .context("re-reading written report")?;
        println!("{}", r.to_text());
        for f in files {
            eprintln!("wrote {}", f.display());
        }
        Ok(())
    }
}

fn slug_of(dom: &Domain) -> String {
    dom.label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

pub fn report(path: &Path) -> Result<()> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                name.ends_with(".json") && !name.ends_with("_plot.json")
            })
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        bail!("no reports found in {}", path.display());
    }
    for f in files {
        let r = Report::read(&f).with_context(|| format!("reading {}", f.display()))?;
        println!("{}\n", r.to_text());
    }
    Ok(())
}
