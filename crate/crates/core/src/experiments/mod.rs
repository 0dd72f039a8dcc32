//! Scripted experiments over the calibrated scenario: sensor vs source
//! decoding, inductive biases, augmentations, region masking, zero-shot
//! cross-dataset evaluation and combined-dataset training. Each returns a
//! [`Report`].

mod ablate;
mod lab;
mod report;

use std::str::FromStr;

use serde_json::json;

pub use ablate::{ablate, AblationAxis, ABLATION_AXES};
pub use lab::{refuse_cross_dataset_sensor, Domain, Lab};
pub use report::{pct, Report, Table};

use crate::data::{region_mask, RegionMask, Representation, SessionKey};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::morph::MorphTarget;
use crate::nn::Family;
use crate::par;
use crate::pipeline::Pipeline;
use crate::train::{evaluate, probability_of_improvement, report_stats, Augment, Hparams};

pub const EXPERIMENTS: [&str; 6] = [
    "compare_spaces",
    "inductive_bias",
    "augmentations",
    "region_masking",
    "cross_dataset",
    "combined",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    CompareSpaces,
    InductiveBias,
    Augmentations,
    RegionMasking,
    CrossDataset,
    Combined,
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "compare_spaces" => Experiment::CompareSpaces,
            "inductive_bias" => Experiment::InductiveBias,
            "augmentations" => Experiment::Augmentations,
            "region_masking" => Experiment::RegionMasking,
            "cross_dataset" => Experiment::CrossDataset,
            "combined" => Experiment::Combined,
            _ => {
                return Err(invalid_config(format!(
                    "unknown experiment `{s}`; expected one of {}",
                    EXPERIMENTS.join(", ")
                )))
            }
        })
    }
}

pub fn run_experiment(lab: &Lab, which: Experiment) -> Result<Report> {
    match which {
        Experiment::CompareSpaces => compare_spaces(lab),
        Experiment::InductiveBias => inductive_bias(lab),
        Experiment::Augmentations => augmentations(lab),
        Experiment::RegionMasking => region_masking(lab),
        Experiment::CrossDataset => cross_dataset(lab),
        Experiment::Combined => combined(lab),
    }
}

/// Builds a [`Lab`] on `p` and runs the named experiment.
pub fn run_named(p: &Pipeline, name: &str) -> Result<Report> {
    run_experiment(&Lab::new(p), name.parse()?)
}

pub fn stat_cells(runs: &[f64]) -> Vec<String> {
    let s = report_stats(&runs.iter().map(|r| 100.0 * r).collect::<Vec<_>>());
    vec![
        format!("{:.2}", s.mean),
        s.std
            .map(|d| format!("{d:.2}"))
            .unwrap_or_else(|| "n/a".into()),
        s.n.to_string(),
        s.to_string(),
    ]
}

const STAT_COLUMNS: [&str; 4] = ["mean", "std", "n", "mean ± std"];

fn columns(lead: &[&'static str]) -> Vec<&'static str> {
    lead.iter().copied().chain(STAT_COLUMNS).collect()
}

fn run_row(cells: &[&str], seed_index: usize, bacc: f64) -> Vec<String> {
    let mut r: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
    r.push(seed_index.to_string());
    r.push(format!("{bacc:.6}"));
    r
}

/// Sensor- vs source-space MLPs with matched budgets, for the inter-subject
/// dataset and per subject of the single-subject dataset.
pub fn compare_spaces(lab: &Lab) -> Result<Report> {
    let mut runs = Table::new(&["dataset", "representation", "subject", "seed", "bacc"]);
    let mut summary = Table::new(&columns(&["dataset", "representation"]));
    let mut notes = Vec::new();
    let a = lab.primary()?;
    let b = lab.secondary()?;
    for repr in [Representation::Sensor, Representation::Source] {
        let dom = lab.inter(repr)?;
        let accs = lab.test_runs(Family::Mlp, &dom)?;
        for (i, &acc) in accs.iter().enumerate() {
            runs.push(run_row(&[&a.config.id, &repr.to_string(), "all"], i, acc));
        }
        summary.push(
            [
                vec![a.config.id.clone(), repr.to_string()],
                stat_cells(&accs),
            ]
            .concat(),
        );
    }
    let mut by_repr: Vec<(Representation, Vec<f64>)> = Vec::new();
    for repr in [Representation::Sensor, Representation::Source] {
        let mut all = Vec::new();
        for sub in &b.subjects {
            let dom = lab.single(&sub.name, repr)?;
            let accs = lab.test_runs(Family::Mlp, &dom)?;
            for (i, &acc) in accs.iter().enumerate() {
                runs.push(run_row(
                    &[&b.config.id, &repr.to_string(), &sub.name],
                    i,
                    acc,
                ));
            }
            all.extend(accs);
        }
        summary.push(
            [
                vec![b.config.id.clone(), repr.to_string()],
                stat_cells(&all),
            ]
            .concat(),
        );
        by_repr.push((repr, all));
    }
    for id in [&a.config.id, &b.config.id] {
        let get = |r: &str| -> Vec<f64> {
            runs.rows_where("dataset", id)
                .iter()
                .filter(|x| x[1] == r)
                .map(|x| x[4].parse().unwrap())
                .collect()
        };
        let poi = probability_of_improvement(&get("source"), &get("sensor"));
        notes.push(format!("{id}: P(source > sensor) = {:.0}%", 100.0 * poi));
    }
    notes.push(format!(
        "{}: spread is over subjects and seeds",
        b.config.id
    ));
    Report::new("compare_spaces", lab.config(), runs, summary)?.with_notes(notes)
}

/// Source MLP/CNN/GAT and sensor MLP/GAT on the inter-subject dataset.
pub fn inductive_bias(lab: &Lab) -> Result<Report> {
    let mut runs = Table::new(&["representation", "model", "seed", "bacc"]);
    let mut summary = Table::new(&columns(&["representation", "model"]));
    let cells = [
        (Representation::Sensor, Family::Mlp),
        (Representation::Sensor, Family::Gat),
        (Representation::Source, Family::Mlp),
        (Representation::Source, Family::CnnSe),
        (Representation::Source, Family::Gat),
    ];
    let sensor = lab.inter(Representation::Sensor)?;
    let source = lab.inter(Representation::Source)?;
    for (repr, fam) in cells {
        let dom = if repr == Representation::Sensor {
            &sensor
        } else {
            &source
        };
        let accs = lab.test_runs(fam, dom)?;
        for (i, &acc) in accs.iter().enumerate() {
            runs.push(run_row(&[&repr.to_string(), &fam.to_string()], i, acc));
        }
        summary.push([vec![repr.to_string(), fam.to_string()], stat_cells(&accs)].concat());
    }
    Report::new("inductive_bias", lab.config(), runs, summary)
}

/// One augmentation row: label and training-split augmentation.
pub fn augmentation_rows(lab: &Lab) -> Vec<(String, Augment)> {
    let e = &lab.config().experiment;
    let mut rows = vec![("baseline".to_string(), Augment::default())];
    for &a in &e.mixup_alphas {
        rows.push((
            format!("mixup alpha={a}"),
            Augment {
                mixup_alpha: Some(a),
                ..Augment::default()
            },
        ));
    }
    for &p in &e.slice_dropout_ps {
        rows.push((
            format!("slice dropout p={p}"),
            Augment {
                slice_dropout: Some(p),
                ..Augment::default()
            },
        ));
    }
    for &p in &e.cube_mask_ps {
        rows.push((
            format!("cube masking p={p}"),
            Augment {
                cube_mask: Some(p),
                ..Augment::default()
            },
        ));
    }
    rows
}

/// Augmentation table: sensor MLP, source MLP and source CNN, with the
/// best augmentation's probability of improvement over baseline.
pub fn augmentations(lab: &Lab) -> Result<Report> {
    let models = [
        (Representation::Sensor, Family::Mlp),
        (Representation::Source, Family::Mlp),
        (Representation::Source, Family::CnnSe),
    ];
    let rows = augmentation_rows(lab);
    let mut runs = Table::new(&["model", "augmentation", "seed", "bacc"]);
    let mut summary = Table::new(&columns(&["model", "augmentation"]));
    let mut notes = vec!["augmentations are applied to the training split only".to_string()];
    let sensor = lab.inter(Representation::Sensor)?;
    let source = lab.inter(Representation::Source)?;
    for (repr, fam) in models {
        let dom = if repr == Representation::Sensor {
            &sensor
        } else {
            &source
        };
        let column = format!("{repr} {fam}");
        let mut results: Vec<(String, Vec<f64>)> = Vec::new();
        for (label, aug) in &rows {
            if repr == Representation::Sensor && aug.is_spatial() {
                continue;
            }
            let hp = Hparams {
                augment: *aug,
                ..lab.hparams(fam, dom)
            };
            let accs: Vec<f64> = par::map_slice(&lab.seeds, |&s| {
                evaluate(
                    &lab.fit(fam, dom, &hp, lab.budget(dom.split_kind), s)?.model,
                    &dom.sets.test,
                    None,
                )
            })
            .into_iter()
            .collect::<Result<_>>()?;
            for (i, &acc) in accs.iter().enumerate() {
                runs.push(run_row(&[&column, label], i, acc));
            }
            summary.push([vec![column.clone(), label.clone()], stat_cells(&accs)].concat());
            results.push((label.clone(), accs));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let base = results[0].1.clone();
        if let Some((best, accs)) = results[1..]
            .iter()
            .max_by(|x, y| mean(&x.1).total_cmp(&mean(&y.1)))
        {
            let poi = probability_of_improvement(accs, &base);
            notes.push(format!(
                "{column}: best augmentation `{best}`, P(best aug > baseline) = {:.0}%",
                100.0 * poi
            ));
        }
    }
    Report::new("augmentations", lab.config(), runs, summary)?.with_notes(notes)
}

/// Planted and control regions for masking: the planted regions of the
/// primary dataset and the assigned region farthest from all of them.
pub fn masking_roles(lab: &Lab) -> Result<(Vec<u32>, Option<u32>)> {
    let planted: Vec<u32> = lab
        .primary()?
        .config
        .regions
        .iter()
        .map(|r| r.region)
        .collect();
    let t = &lab.p.world.template;
    let dist = |a: [f64; 3], b: [f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
    let centroids: Vec<[f64; 3]> = planted
        .iter()
        .filter_map(|&r| t.region_centroid(r))
        .collect();
    let control = t
        .region_ids()
        .into_iter()
        .filter(|r| !planted.contains(r))
        .filter_map(|r| {
            let c = t.region_centroid(r)?;
            let d = centroids
                .iter()
                .map(|&p| dist(p, c))
                .fold(f64::INFINITY, f64::min);
            Some((r, d))
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(r, _)| r);
    Ok((planted, control))
}

/// Test accuracy while zeroing each atlas region (plus buffer) of the
/// inter-subject source models trained without augmentation.
pub fn region_masking(lab: &Lab) -> Result<Report> {
    let cfg = lab.config();
    let family: Family = cfg.experiment.masking_family.parse()?;
    let dom = lab.inter(Representation::Source)?;
    if dom.grid().is_none() {
        return Err(invalid_config(
            "region masking needs vec voxel features on the template grid",
        ));
    }
    let template = &lab.p.world.template;
    let (planted, control) = masking_roles(lab)?;
    let mut masks: Vec<(String, Option<Vec<usize>>)> = vec![("baseline".into(), None)];
    let mut notes = Vec::new();
    for r in template.region_ids() {
        match region_mask(template, r, cfg.experiment.region_buffer) {
            RegionMask::Voxels(v) => masks.push((r.to_string(), Some(v))),
            RegionMask::Rejected { region, voxels } => {
                notes.push(format!("region {region} skipped: {voxels} voxels (< 5)"));
            }
        }
    }
    let models: Vec<_> = par::map_slice(&lab.seeds, |&s| lab.fit_default(family, &dom, s))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut runs = Table::new(&["region", "seed", "bacc"]);
    let mut summary = Table::new(
        &columns(&["region", "role", "masked voxels"])
            .into_iter()
            .chain(["delta (points)"])
            .collect::<Vec<_>>(),
    );
    let mut baseline_mean = 0.0;
    let mut bars = Vec::new();
    for (label, voxels) in &masks {
        let accs: Vec<f64> = par::map_slice(&models, |m| {
            evaluate(&m.model, &dom.sets.test, voxels.as_deref())
        })
        .into_iter()
        .collect::<Result<_>>()?;
        for (i, &acc) in accs.iter().enumerate() {
            runs.push(run_row(&[label], i, acc));
        }
        let mean = 100.0 * accs.iter().sum::<f64>() / accs.len() as f64;
        if voxels.is_none() {
            baseline_mean = mean;
        }
        let role = match label.parse::<u32>() {
            Ok(r) if planted.contains(&r) => "planted",
            Ok(r) if Some(r) == control => "control",
            Ok(_) => "-",
            Err(_) => "baseline",
        };
        let n_vox = voxels.as_ref().map(|v| v.len()).unwrap_or(0);
        let delta = mean - baseline_mean;
        let mut row = vec![label.clone(), role.to_string(), n_vox.to_string()];
        row.extend(stat_cells(&accs));
        row.push(format!("{delta:+.2}"));
        summary.push(row);
        let std = report_stats(&accs.iter().map(|a| 100.0 * a).collect::<Vec<_>>()).std;
        bars.push(json!({"region": label, "role": role, "mean": mean, "std": std, "delta": delta, "masked_voxels": n_vox}));
    }
    let plot = json!({"kind": "bar", "x": "region", "y": "balanced accuracy (%)", "model": family.to_string(), "bars": bars});
    Report::new("region_masking", cfg, runs, summary)?
        .with_notes(notes)?
        .with_plot(plot)
}

/// Zero-shot cross-dataset evaluation in both directions; sensor-space
/// requests are refused.
pub fn cross_dataset(lab: &Lab) -> Result<Report> {
    let a = lab.primary()?;
    let b = lab.secondary()?;
    let families = [Family::Mlp, Family::CnnSe];
    let mut runs = Table::new(&[
        "trained on",
        "model",
        "evaluation",
        "evaluated on",
        "seed",
        "bacc",
    ]);
    let mut summary = Table::new(&columns(&[
        "trained on",
        "model",
        "evaluation",
        "evaluated on",
    ]));
    let mut notes = Vec::new();
    let push = |runs: &mut Table, summary: &mut Table, lead: [&str; 4], accs: &[f64]| {
        for (i, &acc) in accs.iter().enumerate() {
            runs.push(run_row(&lead, i, acc));
        }
        summary.push(
            [
                lead.iter().map(|s| s.to_string()).collect(),
                stat_cells(accs),
            ]
            .concat(),
        );
    };
    let a_dom = lab.inter(Representation::Source)?;
    let b_on_template = lab.test_set(&b.config.id, &MorphTarget::Template, &a_dom)?;
    for fam in families {
        let f = fam.to_string();
        let models: Vec<_> = par::map_slice(&lab.seeds, |&s| lab.fit_default(fam, &a_dom, s))
            .into_iter()
            .collect::<Result<_>>()?;
        let ind: Vec<f64> = models
            .iter()
            .map(|m| evaluate(&m.model, &a_dom.sets.test, None))
            .collect::<Result<_>>()?;
        push(
            &mut runs,
            &mut summary,
            [&a.config.id, &f, "in_domain", &a.config.id],
            &ind,
        );
        let cross: Vec<f64> = models
            .iter()
            .map(|m| evaluate(&m.model, &b_on_template, None))
            .collect::<Result<_>>()?;
        push(
            &mut runs,
            &mut summary,
            [&a.config.id, &f, "to_template", &b.config.id],
            &cross,
        );
    }
    for sub in &b.subjects {
        let dom = lab.single(&sub.name, Representation::Source)?;
        let target = MorphTarget::Subject(format!("{}/{}", b.config.id, sub.name));
        let a_on_sub = lab.test_set(&a.config.id, &target, &dom)?;
        let trained = format!("{}/{}", b.config.id, sub.name);
        for fam in families {
            let f = fam.to_string();
            let models: Vec<_> = par::map_slice(&lab.seeds, |&s| lab.fit_default(fam, &dom, s))
                .into_iter()
                .collect::<Result<_>>()?;
            let ind: Vec<f64> = models
                .iter()
                .map(|m| evaluate(&m.model, &dom.sets.test, None))
                .collect::<Result<_>>()?;
            push(
                &mut runs,
                &mut summary,
                [&trained, &f, "in_domain", &trained],
                &ind,
            );
            let cross: Vec<f64> = models
                .iter()
                .map(|m| evaluate(&m.model, &a_on_sub, None))
                .collect::<Result<_>>()?;
            push(
                &mut runs,
                &mut summary,
                [&trained, &f, "to_subject", &a.config.id],
                &cross,
            );
        }
    }
    if let Err(e) = refuse_cross_dataset_sensor(&a.sensors, &b.sensors) {
        notes.push(format!("sensor-space models excluded: {e}"));
    }
    notes.push("test sets are the in-domain test sets of the evaluated dataset".into());
    Report::new("cross_dataset", lab.config(), runs, summary)?.with_notes(notes)
}

/// Parses `subject/session` entries of the secondary dataset.
pub fn combined_sessions(lab: &Lab) -> Result<Vec<SessionKey>> {
    let b = lab.secondary()?;
    lab.config()
        .experiment
        .combined_sessions
        .iter()
        .map(|e| {
            let (sub, ses) = e.split_once('/').ok_or_else(|| {
                invalid_config(format!("combined session `{e}` is not subject/session"))
            })?;
            b.subject(sub)?;
            if b.config.test.iter().chain(&b.config.val).any(|s| s == ses) {
                return Err(invalid_input(format!(
                    "combined session `{e}` is a held-out session"
                )));
            }
            Ok(SessionKey::new(&b.config.id, sub, ses))
        })
        .collect()
}

/// Primary-only vs combined training, evaluated per secondary-dataset test subject.
pub fn combined(lab: &Lab) -> Result<Report> {
    let a = lab.primary()?;
    let b = lab.secondary()?;
    let extra = combined_sessions(lab)?;
    let comb = lab.combined(&extra)?;
    let a_dom = lab.inter(Representation::Source)?;
    let b_test = lab.test_set(&b.config.id, &MorphTarget::Template, &a_dom)?;
    let mut runs = Table::new(&["model", "training data", "subject", "seed", "bacc"]);
    let mut summary = Table::new(&columns(&["model", "training data", "subject"]));
    let mut notes = vec![format!(
        "combined training set: {} primary + {} secondary samples",
        a_dom.sets.train.len(),
        comb.sets.train.len() - a_dom.sets.train.len()
    )];
    let budget = lab.budget(a_dom.split_kind);
    for fam in [Family::Mlp, Family::CnnSe] {
        let f = fam.to_string();
        let hp_a = lab.hparams(fam, &a_dom);
        let hp_c = lab.config().hparams_named(&format!("combined_{fam}"));
        let base: Vec<_> = par::map_slice(&lab.seeds, |&s| lab.fit(fam, &a_dom, &hp_a, budget, s))
            .into_iter()
            .collect::<Result<_>>()?;
        let both: Vec<_> = par::map_slice(&lab.seeds, |&s| lab.fit(fam, &comb, &hp_c, budget, s))
            .into_iter()
            .collect::<Result<_>>()?;
        let mut pooled: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        let mut subjects: Vec<String> = b.subjects.iter().map(|s| s.name.clone()).collect();
        subjects.push("all".into());
        for sub in &subjects {
            let qualified = format!("{}/{sub}", b.config.id);
            let set = if sub == "all" {
                b_test.clone()
            } else {
                b_test.filter(|i| b_test.subject_name(i) == qualified)
            };
            let held_out = !extra.iter().any(|k| &k.subject == sub);
            let tag = if sub == "all" {
                "all".to_string()
            } else if held_out {
                format!("{sub} (held out)")
            } else {
                sub.clone()
            };
            let mut per: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            for (j, (label, models)) in [
                (format!("{} only", a.config.id), &base),
                ("combined".to_string(), &both),
            ]
            .iter()
            .enumerate()
            {
                let accs: Vec<f64> = models
                    .iter()
                    .map(|m| evaluate(&m.model, &set, None))
                    .collect::<Result<_>>()?;
                for (i, &acc) in accs.iter().enumerate() {
                    runs.push(run_row(&[&f, label, &tag], i, acc));
                }
                summary.push(
                    [
                        vec![f.clone(), label.clone(), tag.clone()],
                        stat_cells(&accs),
                    ]
                    .concat(),
                );
                per[j] = accs;
            }
            let poi = probability_of_improvement(&per[1], &per[0]);
            summary.push(vec![
                f.clone(),
                "P(combined > single)".into(),
                tag.clone(),
                format!("{:.2}", 100.0 * poi),
                "-".into(),
                format!("{}", per[0].len() * per[1].len()),
                format!("{:.0}%", 100.0 * poi),
            ]);
            if sub == "all" {
                pooled = per;
            }
        }
        let poi = probability_of_improvement(&pooled[1], &pooled[0]);
        notes.push(format!(
            "{f}: P(combined > {} only) on {} test = {:.0}%",
            a.config.id,
            b.config.id,
            100.0 * poi
        ));
    }
    for sub in &b.subjects {
        if !extra.iter().any(|k| k.subject == sub.name) {
            let leaked = comb
                .sets
                .train
                .sessions
                .iter()
                .any(|k| k.dataset == b.config.id && k.subject == sub.name);
            if leaked {
                return Err(Error::Leakage(format!(
                    "held-out subject {} has training data",
                    sub.name
                )));
            }
            notes.push(format!(
                "{}/{} is held out: none of its data is in training",
                b.config.id, sub.name
            ));
        }
    }
    Report::new("combined", lab.config(), runs, summary)?.with_notes(notes)
}
