//! Acceptance run: one PASS/FAIL line per criterion, each checked against an
//! oracle computed independently of the code under test where possible.
//! Runs without the libtest harness so the lines are always printed.

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::StandardNormal;

use sourcespace::config::Config;
use sourcespace::data::{
    mixup_with, BoxMask, Cache, CacheKey, PlaneMask, Representation, SessionKey, Split, SplitKind,
    SplitPlan, Tensor, DENSE_CHANNELS,
};
use sourcespace::dsp::filter::{design_lowpass, lowpass_transition};
use sourcespace::dsp::{filtfilt, resample_rows, standardize};
use sourcespace::error::Error;
use sourcespace::experiments::{self, refuse_cross_dataset_sensor, Lab};
use sourcespace::inverse::{
    build_whitener, lambda2_from_snr, make_inverse_operator, min_norm_kernel, CovForm,
    InverseInputs, Method, NoiseCovariance, PriorScaling,
};
use sourcespace::morph::MorphTarget;
use sourcespace::nn::{knn_graph, Family, InputShape, Model, ModelSpec};
use sourcespace::pipeline::Pipeline;
use sourcespace::seed;
use sourcespace::sim::{dipole_field, LeadField};
use sourcespace::train::{balanced_accuracy, evaluate, probability_of_improvement};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Outcome {
    id: usize,
    passed: bool,
}

fn run(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Check) -> Outcome {
    let t = Instant::now();
    let res = f();
    let dt = t.elapsed();
    let (passed, detail) = match res {
        Ok(d) if dt <= limit => (true, d),
        Ok(d) => (false, format!("{d}; too slow")),
        Err(e) => (false, e),
    };
    println!(
        "criterion {id:>2} {}: {name}: {detail} [{:.1}s / {}s]",
        if passed { "PASS" } else { "FAIL" },
        dt.as_secs_f64(),
        limit.as_secs()
    );
    Outcome { id, passed }
}

// 1. Inverse operators on a hand-sized problem.

fn toy_leadfield(m: DMatrix<f64>) -> LeadField {
    let n_voxels = m.ncols() / 3;
    LeadField {
        matrix: m,
        n_voxels,
        zeroed_voxels: vec![],
    }
}

fn identity_noise(n: usize) -> NoiseCovariance {
    NoiseCovariance {
        matrix: DMatrix::identity(n, n),
        form: CovForm::Regular,
    }
}

fn argmax_abs(v: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.enumerate() {
        if x.abs() > best.1 {
            best = (i, x.abs());
        }
    }
    best.0
}

fn criterion_1() -> Check {
    let lambda2 = lambda2_from_snr(3.0);
    ensure(
        (lambda2 - 1.0 / 9.0).abs() < 1e-15,
        format!("lambda2 at snr 3 is {lambda2}"),
    )?;

    // G = [[1,0],[0,1],[0,0]]: GG^T + I/9 = diag(10/9, 10/9, 1/9), so the
    // kernel is [[0.9, 0, 0], [0, 0.9, 0]].
    let g = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let hand = DMatrix::from_row_slice(2, 3, &[0.9, 0.0, 0.0, 0.0, 0.9, 0.0]);
    let k = min_norm_kernel(&g, lambda2).map_err(e2s)?;
    let err_hand = (&k - &hand).amax();
    ensure(
        err_hand < 1e-10,
        format!("diagonal toy off by {err_hand:e}"),
    )?;

    // General toy against an explicit inverse.
    let g = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, -2.0]);
    let closed = g.transpose()
        * (&g * g.transpose() + DMatrix::identity(3, 3) * lambda2)
            .try_inverse()
            .ok_or("singular gram")?;
    let err_closed = (min_norm_kernel(&g, lambda2).map_err(e2s)? - &closed).amax();
    ensure(
        err_closed < 1e-10,
        format!("closed form off by {err_closed:e}"),
    )?;

    // Full operators on a 3-sensor, 2-voxel lead field with identity noise.
    let l = DMatrix::from_row_slice(
        3,
        6,
        &[
            1.0, 0.2, -0.4, 0.7, -1.1, 0.3, 0.5, -0.9, 0.8, 0.1, 0.6, -0.2, -0.3, 0.4, 1.2, -0.8,
            0.2, 0.9,
        ],
    );
    let lf = toy_leadfield(l.clone());
    let noise = identity_noise(3);
    let mut rng = seed::rng(11);
    let data = DMatrix::from_fn(3, 200, |_, _| rng.sample::<f64, _>(StandardNormal));
    let data_cov = &data * data.transpose() / 200.0;
    let op = |method| {
        make_inverse_operator(&InverseInputs {
            leadfield: &lf,
            noise_cov: &noise,
            snr: 3.0,
            method,
            prior: PriorScaling::Unit,
            data_cov: Some(&data_cov),
            subject_id: "toy",
        })
        .map_err(e2s)
    };
    let mn = op(Method::MinNorm)?;
    let closed = l.transpose()
        * (&l * l.transpose() + DMatrix::identity(3, 3) * lambda2)
            .try_inverse()
            .unwrap();
    let err_mn = (&mn.weights - &closed).amax();
    ensure(
        err_mn < 1e-10,
        format!("min-norm operator off by {err_mn:e}"),
    )?;

    let lcmv = op(Method::Lcmv)?;
    let gain_err = (0..6)
        .map(|k| (lcmv.weights.row(k).transpose().dot(&l.column(k)) - 1.0).abs())
        .fold(0.0, f64::max);
    ensure(
        gain_err < 1e-10,
        format!("lcmv unit gain off by {gain_err:e}"),
    )?;

    let est_mn = &mn.weights * &data;
    for method in [Method::Dspm, Method::Sloreta] {
        let w = op(method)?.weights;
        for k in 0..6 {
            let ratio = w[(k, 0)] / mn.weights[(k, 0)];
            ensure(
                ratio > 0.0,
                format!("{method} row {k} is not a positive rescaling"),
            )?;
            let dev = (w.row(k) - mn.weights.row(k) * ratio).amax() / w.row(k).amax();
            ensure(
                dev < 1e-10,
                format!("{method} row {k} is not proportional ({dev:e})"),
            )?;
            let est = &w * &data;
            let a = argmax_abs(est.row(k).iter().copied());
            let b = argmax_abs(est_mn.row(k).iter().copied());
            ensure(
                a == b,
                format!("{method} row {k} peaks at {a}, min-norm at {b}"),
            )?;
        }
    }
    Ok(format!(
        "kernel err {:.1e}, lcmv gain err {gain_err:.1e}, dspm/sloreta proportional",
        err_hand.max(err_closed).max(err_mn)
    ))
}

// 2. Whitening of random covariances, including rank-deficient ones.

fn criterion_2() -> Check {
    let mut rng = seed::rng(2);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let n = 2 + i % 19;
        let rank = if i % 3 == 0 { (n / 2).max(1) } else { n };
        let a = DMatrix::from_fn(n, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = &a * a.transpose();
        let c = (&c + c.transpose()) * 0.5;
        let w = build_whitener(&NoiseCovariance {
            matrix: c.clone(),
            form: CovForm::Regular,
        })
        .map_err(e2s)?;
        let eig = SymmetricEigen::new(c.clone());
        let max = eig.eigenvalues.max();
        let mut proj = DMatrix::zeros(n, n);
        for (j, &l) in eig.eigenvalues.iter().enumerate() {
            if l > 1e-10 * max {
                let u = eig.eigenvectors.column(j);
                proj += u * u.transpose();
            }
        }
        let dev = (&w * &c * w.transpose() - proj).norm();
        worst = worst.max(dev);
    }
    ensure(worst < 1e-8, format!("max Frobenius deviation {worst:e}"))?;
    Ok(format!("100 covariances, max deviation {worst:.1e}"))
}

// 3. Forward-model symmetries.

fn criterion_3() -> Check {
    let mut rng = seed::rng(3);
    let mut sensors = Vec::new();
    for _ in 0..30 {
        let v: [f64; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.1..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let u = v.map(|x| x / n);
        sensors.push((u.map(|x| 110.0 * x), u));
    }
    for k in 0..3 {
        let mut q = [0.0; 3];
        q[k] = 1.0;
        for (r, o) in &sensors {
            let b = dipole_field([0.0; 3], q, *r, *o);
            ensure(b == 0.0, format!("centre dipole gives {b}"))?;
        }
    }
    let r0 = [12.0, -20.0, 35.0];
    let radial = r0.map(|x| x * 0.37);
    for (r, o) in &sensors {
        let b = dipole_field(r0, radial, *r, *o);
        ensure(b == 0.0, format!("radial dipole gives {b}"))?;
    }
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let q1: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let q2: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let mix: [f64; 3] = std::array::from_fn(|i| a * q1[i] + b * q2[i]);
        for (r, o) in sensors.iter().take(5) {
            let lhs = dipole_field(r0, mix, *r, *o);
            let rhs = a * dipole_field(r0, q1, *r, *o) + b * dipole_field(r0, q2, *r, *o);
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));
        }
    }
    ensure(worst < 1e-9, format!("linearity error {worst:e}"))?;
    Ok(format!(
        "centre and radial columns exactly zero, linearity error {worst:.1e}"
    ))
}

// 4. DSP.

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn criterion_4() -> Check {
    let fs = 600.0;
    let n = 6000;
    let tone = |f: f64| {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin())
            .collect::<Vec<_>>()
    };
    let h = design_lowpass(48.0, fs, lowpass_transition(48.0));
    let mid = n / 4..3 * n / 4;
    let x60 = tone(60.0);
    let y60 = filtfilt(&x60, &h);
    let att = rms(&y60[mid.clone()]) / rms(&x60[mid.clone()]);
    ensure(att <= 0.1, format!("60 Hz kept at {att:.3} of its RMS"))?;
    let x10 = tone(10.0);
    let y10 = filtfilt(&x10, &h);
    let pass = rms(&y10[mid.clone()]) / rms(&x10[mid.clone()]);
    ensure(
        (pass - 1.0).abs() <= 0.1,
        format!("10 Hz passed at {pass:.3}"),
    )?;

    let x = DMatrix::from_row_slice(1, n, &tone(7.0));
    let y = resample_rows(&x, 600.0, 150.0).map_err(e2s)?;
    ensure(
        y.ncols() * 4 == n,
        format!("resampled length {} from {n}", y.ncols()),
    )?;
    let reference: Vec<f64> = (0..y.ncols())
        .map(|i| (2.0 * std::f64::consts::PI * 7.0 * i as f64 / 150.0).sin())
        .collect();
    let yv: Vec<f64> = y.row(0).iter().copied().collect();
    let corr = pearson(&yv, &reference);
    ensure(
        corr >= 0.99,
        format!("resampled sinusoid correlation {corr:.4}"),
    )?;

    let mut rng = seed::rng(4);
    let raw = DMatrix::from_fn(8, 500, |r, _| {
        3.0 * r as f64 + (1.0 + r as f64) * rng.sample::<f64, _>(StandardNormal)
    });
    let (z, _) = standardize(&raw);
    let mut worst: f64 = 0.0;
    for r in 0..z.nrows() {
        let row: Vec<f64> = z.row(r).iter().copied().collect();
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64).sqrt();
        worst = worst.max(mean.abs()).max((sd - 1.0).abs());
    }
    ensure(
        worst < 1e-9,
        format!("standardized moments off by {worst:e}"),
    )?;
    Ok(format!(
        "60 Hz x{att:.3}, 10 Hz x{pass:.3}, resample corr {corr:.4}, moments {worst:.1e}"
    ))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

// 5. Gradients against central finite differences.

fn gradcheck(spec: ModelSpec, n: usize, seed_v: u64) -> Result<(f64, usize), String> {
    let mut m = Model::build(spec.with_dropout(0.0), seed_v).map_err(e2s)?;
    let mut rng = seed::rng(seed_v + 1);
    let len = m.sample_len();
    let x: Vec<f64> = (0..n * len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let n_subj = m.spec.subjects.len();
    let s: Vec<Option<usize>> = (0..n).map(|i| (n_subj > 0).then(|| i % n_subj)).collect();
    m.loss_and_grad(&x, &y, &s, 0).map_err(e2s)?;
    let g = m.params.grads.clone();
    let np = m.n_params();
    let k = np.min(150);
    let idx = sample_indices(&mut rng, np, k);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in idx.iter() {
        let v = m.params.values[i];
        m.params.values[i] = v + h;
        let lp = m.loss_and_grad(&x, &y, &s, 0).map_err(e2s)?;
        m.params.values[i] = v - h;
        let lm = m.loss_and_grad(&x, &y, &s, 0).map_err(e2s)?;
        m.params.values[i] = v;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6));
    }
    Ok((worst, k))
}

fn criterion_5() -> Check {
    let subjects = vec!["a".to_string(), "b".to_string()];
    let mut rng = seed::rng(5);
    let points: Vec<[f64; 3]> = (0..10)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let graph = Arc::new(knn_graph(&points, 3).map_err(e2s)?);
    let specs = [
        ModelSpec::new(Family::Logistic, InputShape::Flat { dim: 120 }, vec![]),
        ModelSpec::new(Family::Mlp, InputShape::Flat { dim: 7 }, subjects.clone()).with_width(5),
        ModelSpec::new(
            Family::CnnSe,
            InputShape::Dense { dims: [3, 2, 3] },
            subjects.clone(),
        )
        .with_width(4),
        ModelSpec::new(
            Family::Gat,
            InputShape::Graph {
                graph,
                values_per_node: 3,
            },
            subjects,
        )
        .with_width(4),
    ];
    let mut parts = Vec::new();
    for spec in specs {
        let fam = spec.family;
        let (err, k) = gradcheck(spec, 6, 50)?;
        ensure(k >= 100, format!("{fam}: only {k} parameters"))?;
        ensure(err < 1e-4, format!("{fam}: max relative error {err:e}"))?;
        parts.push(format!("{fam} {err:.1e}/{k}"));
    }
    Ok(parts.join(", "))
}

// 6. Augmentation counting.

fn criterion_6() -> Check {
    let dims = [4, 4, 4];
    let nc = 64;
    let sample: Vec<f64> = (0..DENSE_CHANNELS * nc).map(|i| 1.0 + i as f64).collect();
    let zeroed = |s: &[f64]| {
        (0..nc)
            .filter(|&c| (0..3).all(|k| s[k * nc + c] == 0.0))
            .count()
    };
    let positional_same =
        |s: &[f64]| (3 * nc..DENSE_CHANNELS * nc).all(|i| s[i].to_bits() == sample[i].to_bits());

    let mut planes = PlaneMask::none(dims);
    planes.planes[1][2] = true;
    let mut s = sample.clone();
    planes.apply(&mut s, dims);
    let n_plane = zeroed(&s);
    ensure(
        n_plane == 16,
        format!("forced plane zeroed {n_plane} cells"),
    )?;
    ensure(
        positional_same(&s),
        "slice dropout touched positional channels",
    )?;

    let mut s = sample.clone();
    BoxMask {
        a: [0, 0, 0],
        b: [1, 1, 1],
    }
    .apply(&mut s, dims);
    let n_box = zeroed(&s);
    ensure(n_box == 8, format!("unit cube zeroed {n_box} cells"))?;
    ensure(positional_same(&s), "cube mask touched positional channels")?;

    let mut x: Vec<f64> = (0..4 * 5).map(|i| (i as f64 * 0.7).sin()).collect();
    let mut y = vec![1.0, 0.0, 1.0, 0.0];
    let (x0, y0) = (x.clone(), y.clone());
    mixup_with(&mut x, &mut y, 5, &[1.0; 4], &[3, 2, 1, 0]);
    ensure(x == x0 && y == y0, "mixup with lambda 1 changed the batch")?;
    Ok("plane 16 cells, cube 8 cells, mixup(1) identity, positional channels untouched".into())
}

// 7. Statistics.

fn criterion_7() -> Check {
    let b = balanced_accuracy(&[true, false, false, false], &[true, true, false, false])
        .map_err(e2s)?;
    ensure(b == 0.75, format!("balanced accuracy {b}"))?;
    let mut rng = seed::rng(7);
    for _ in 0..1000 {
        let na = rng.random_range(1..6);
        let nb = rng.random_range(1..6);
        // Coarse values so ties occur.
        let a: Vec<f64> = (0..na).map(|_| rng.random_range(0..4) as f64).collect();
        let bb: Vec<f64> = (0..nb).map(|_| rng.random_range(0..4) as f64).collect();
        let s = probability_of_improvement(&a, &bb) + probability_of_improvement(&bb, &a);
        ensure(s == 1.0, format!("P(a>b) + P(b>a) = {s}"))?;
    }
    let labels: Vec<bool> = (0..100).map(|i| i < 80).collect();
    let c = balanced_accuracy(&[true; 100], &labels).map_err(e2s)?;
    ensure(c == 0.5, format!("constant predictor scores {c}"))?;
    Ok("0.75 oracle, complement identity on 1000 pairs, constant predictor 0.5".into())
}

// 8-11. Calibrated end-to-end scenario.

fn criterion_8(lab: &Lab) -> Check {
    let dom = lab.inter(Representation::Source).map_err(e2s)?;
    let mut parts = Vec::new();
    for fam in [Family::Mlp, Family::CnnSe] {
        let accs = lab.test_runs(fam, &dom).map_err(e2s)?;
        ensure(accs.len() >= 3, "fewer than 3 seeds")?;
        let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
        let txt: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
        ensure(min >= 0.70, format!("{fam} test bacc {}", txt.join("/")))?;
        parts.push(format!("{fam} {}", txt.join("/")));
    }
    Ok(parts.join(", "))
}

fn criterion_9(lab: &Lab) -> Check {
    let a = lab.primary().map_err(e2s)?;
    let b = lab.secondary().map_err(e2s)?;
    let dom = lab.inter(Representation::Source).map_err(e2s)?;
    let b_test = lab
        .test_set(&b.config.id, &MorphTarget::Template, &dom)
        .map_err(e2s)?;
    let mut accs = Vec::new();
    for &s in &lab.seeds {
        let m = lab.fit_default(Family::CnnSe, &dom, s).map_err(e2s)?;
        accs.push(evaluate(&m.model, &b_test, None).map_err(e2s)?);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    ensure(mean >= 0.55, format!("cross-dataset bacc {mean:.3}"))?;
    match refuse_cross_dataset_sensor(&a.sensors, &b.sensors) {
        Err(Error::Refused(_)) => {}
        other => return Err(format!("sensor cross-dataset not refused: {other:?}")),
    }
    Ok(format!(
        "CNN {} -> {} bacc {mean:.3}; sensor request refused",
        a.config.id, b.config.id
    ))
}

fn criterion_10(lab: &Lab) -> Check {
    let r = experiments::region_masking(lab).map_err(e2s)?;
    let col = |n: &str| r.summary.column(n).ok_or(format!("no column {n}"));
    let (role, delta) = (col("role")?, col("delta (points)")?);
    let get = |want: &str| -> Result<Vec<f64>, String> {
        r.summary
            .rows
            .iter()
            .filter(|row| row[role] == want)
            .map(|row| row[delta].parse::<f64>().map_err(e2s))
            .collect()
    };
    let planted = get("planted")?;
    let control = get("control")?;
    ensure(
        !planted.is_empty() && control.len() == 1,
        "missing planted or control region",
    )?;
    let drop = -planted.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(drop >= 5.0, format!("planted region drop {drop:.2} points"))?;
    ensure(
        control[0].abs() < 2.0,
        format!("control region change {:+.2} points", control[0]),
    )?;
    Ok(format!(
        "planted drop {drop:.2} points, control {:+.2} points",
        control[0]
    ))
}

fn criterion_11(lab: &Lab) -> Check {
    let b = lab.secondary().map_err(e2s)?;
    let extra = experiments::combined_sessions(lab).map_err(e2s)?;
    let comb = lab.combined(&extra).map_err(e2s)?;
    let a_dom = lab.inter(Representation::Source).map_err(e2s)?;
    let b_test = lab
        .test_set(&b.config.id, &MorphTarget::Template, &a_dom)
        .map_err(e2s)?;
    let budget = lab.budget(a_dom.split_kind);
    let hp_c = lab.config().hparams_named("combined_cnn_se");
    let mut single = Vec::new();
    let mut combined = Vec::new();
    for &s in &lab.seeds {
        let m = lab.fit_default(Family::CnnSe, &a_dom, s).map_err(e2s)?;
        single.push(evaluate(&m.model, &b_test, None).map_err(e2s)?);
        let m = lab
            .fit(Family::CnnSe, &comb, &hp_c, budget, s)
            .map_err(e2s)?;
        combined.push(evaluate(&m.model, &b_test, None).map_err(e2s)?);
    }
    let pairs = single.len() * combined.len();
    ensure(pairs >= 9, format!("only {pairs} seed pairs"))?;
    let poi = probability_of_improvement(&combined, &single);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    ensure(poi > 0.5, format!("P(combined > single) = {poi:.2}"))?;
    Ok(format!(
        "P(combined > single) = {poi:.2} over {pairs} pairs (bacc {:.3} -> {:.3})",
        mean(&single),
        mean(&combined)
    ))
}

// 12. Determinism, cache round trips, leakage guard.

fn criterion_12() -> Check {
    let cfg = Config::from_toml_str(
        "extends = \"desk\"",
        &[
            "scenario.session_duration_s=30".into(),
            "train.max_epochs=2".into(),
            "experiment.seeds=2".into(),
        ],
    )
    .map_err(e2s)?;
    let dirs = [
        tempfile::tempdir().map_err(e2s)?,
        tempfile::tempdir().map_err(e2s)?,
    ];
    let report = |dir: &std::path::Path| -> Result<String, String> {
        let p = Pipeline::new(cfg.clone(), Cache::new(dir)).map_err(e2s)?;
        let r = experiments::run_named(&p, "compare_spaces").map_err(e2s)?;
        serde_json::to_string(&r).map_err(e2s)
    };
    let first = report(dirs[0].path())?;
    let second = report(dirs[1].path())?;
    let cached = report(dirs[0].path())?;
    ensure(first == second, "fresh caches gave different reports")?;
    ensure(first == cached, "cached rerun gave a different report")?;

    let cache = Cache::new(dirs[1].path());
    let mut rng = seed::rng(12);
    let mut values: Vec<f64> = (0..997)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * 1e3)
        .collect();
    values.extend([0.0, -0.0, f64::MIN_POSITIVE / 3.0, f64::MAX, f64::EPSILON]);
    let key = CacheKey::new("roundtrip", "sub-00", "ses-0").with("kind", "f64");
    cache
        .store(
            &key,
            &Tensor::f64(vec![2, 501], values.clone()).map_err(e2s)?,
        )
        .map_err(e2s)?;
    let back = cache.load(&key).map_err(e2s)?;
    let same = back.shape == vec![2, 501]
        && back
            .as_f64()
            .map_err(e2s)?
            .iter()
            .zip(&values)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same, "f64 tensor changed in the cache")?;
    let bytes: Vec<u8> = (0..=255).collect();
    let key = key.with("kind", "u8");
    cache
        .store(&key, &Tensor::u8(vec![256], bytes.clone()).map_err(e2s)?)
        .map_err(e2s)?;
    ensure(
        cache.load(&key).map_err(e2s)?.as_u8().map_err(e2s)? == bytes.as_slice(),
        "u8 tensor changed",
    )?;

    let k = SessionKey::new("multi", "sub-00", "ses-0");
    let plan = SplitPlan::new(SplitKind::BySession)
        .assign(k.clone(), Split::Train)
        .assign(k, Split::Test);
    ensure(
        matches!(plan.check_leakage(), Err(Error::Leakage(_))),
        "overlapping sessions accepted",
    )?;
    let plan = SplitPlan::new(SplitKind::BySubject)
        .assign(SessionKey::new("multi", "sub-00", "ses-0"), Split::Train)
        .assign(SessionKey::new("multi", "sub-00", "ses-1"), Split::Val);
    ensure(
        matches!(plan.check_leakage(), Err(Error::Leakage(_))),
        "overlapping subjects accepted",
    )?;
    Ok(
        "reports bit-identical across fresh and cached runs, cache bitwise exact, leakage rejected"
            .into(),
    )
}

fn main() {
    // `cargo test -- --list` and filters: this target has a single entry.
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    // Positional arguments select criteria by number; none runs all twelve.
    let only: Vec<usize> = args.iter().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: usize| only.is_empty() || only.contains(&id);
    let s = Duration::from_secs;
    let quick: [(usize, &str, u64, fn() -> Check); 7] = [
        (1, "inverse-solver oracles", 1, criterion_1),
        (2, "whitening", 5, criterion_2),
        (3, "forward-model symmetries", 5, criterion_3),
        (4, "dsp", 10, criterion_4),
        (5, "gradient checks", 60, criterion_5),
        (6, "augmentation counting", 1, criterion_6),
        (7, "statistics oracles", 1, criterion_7),
    ];
    let mut out: Vec<Outcome> = quick
        .into_iter()
        .filter(|q| want(q.0))
        .map(|(id, name, limit, f)| run(id, name, s(limit), f))
        .collect();

    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = Config::preset("desk").expect("desk preset");
    let pipeline = Pipeline::new(cfg, Cache::new(dir.path())).expect("pipeline");
    let lab = Lab::new(&pipeline);
    let scenario: [(usize, &str, u64, fn(&Lab) -> Check); 4] = [
        (8, "end-to-end calibrated scenario", 600, criterion_8),
        (9, "cross-dataset zero-shot", 120, criterion_9),
        (10, "region masking", 120, criterion_10),
        (11, "combined-dataset training", 600, criterion_11),
    ];
    for (id, name, limit, f) in scenario {
        if want(id) {
            out.push(run(id, name, s(limit), || f(&lab)));
        }
    }
    if want(12) {
        out.push(run(12, "determinism and cache", s(60), criterion_12));
    }

    let failed: Vec<usize> = out.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!(
        "acceptance: {} passed, {} failed",
        out.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
