//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `ACCEPTANCE_ONLY=4,5` restricts the run.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::{
    brute_multi, brute_single, gram_schmidt_leverage, max_input_grad_error, max_param_grad_error,
    random_grad_case, random_rank_matrix, rng,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use trajknock::datagen::{feature_correlation_profile, standardize_columns};
use trajknock::ensemble::{leverage_scores, weighted_sample_without_replacement};
use trajknock::knockoff::{fit_gaussian_model, sample_knockoffs, sample_scit_knockoffs, sample_single_knockoffs};
use trajknock::linalg::sample_covariance;
use trajknock::metrics::{instability_profile, score_correlation};
use trajknock::model::{elu, Adam, Batch, RowMajor};
use trajknock::pipeline::{run_experiment, stability_experiment};
use trajknock::selection::{multiple_knockoff_stats, multiple_knockoff_threshold, single_knockoff_threshold};
use trajknock::{ExperimentConfig, KnockoffModel, Network, NetworkConfig, Profile, Task};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, mean: &[f64], sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let p = sigma.nrows();
    let l = sigma.clone().cholesky().expect("positive definite").l();
    let g = DMatrix::<f64>::from_fn(n, p, |_, _| rng.sample(rand_distr::StandardNormal));
    let mut x = g * l.transpose();
    for (j, m) in mean.iter().enumerate() {
        x.column_mut(j).add_scalar_mut(*m);
    }
    x
}

fn ar1(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

fn block(cov: &DMatrix<f64>, a: usize, b: usize, p: usize) -> DMatrix<f64> {
    cov.view((a * p, b * p), (p, p)).into_owned()
}

/// Max deviations of knockoff block moments: `(Cov(X̃ᵐ) − Cov(X),
/// Cov(X, X̃ᵐ) − (Σ − diag(s)))`, maximized over copies.
fn moment_deviation(xaug: &DMatrix<f64>, p: usize, model: &KnockoffModel, s: &DVector<f64>) -> (f64, f64) {
    let cov = sample_covariance(xaug);
    let cov_x = block(&cov, 0, 0, p);
    let target = &model.sigma - DMatrix::from_diagonal(s);
    let copies = xaug.ncols() / p - 1;
    let mut dev_self = 0.0f64;
    let mut dev_cross = 0.0f64;
    for m in 1..=copies {
        dev_self = dev_self.max((block(&cov, m, m, p) - &cov_x).amax());
        dev_cross = dev_cross.max((block(&cov, 0, m, p) - &target).amax());
    }
    (dev_self, dev_cross)
}

fn criterion_4() -> Verdict {
    let (n, p) = (20_000, 5);
    let mut r = rng(4);
    let sigma = ar1(p, 0.6);
    let x = gaussian(&mut r, n, &[1.0, -2.0, 0.0, 0.5, 3.0], &sigma);
    let single_model = fit_gaussian_model(&x, 1).unwrap();
    let single = sample_single_knockoffs(&x, &single_model, 41).unwrap();
    let (s_self, s_cross) = moment_deviation(&single.xaug, p, &single_model, &single_model.s);
    let scit_model = fit_gaussian_model(&x, 2).unwrap();
    let scit = sample_scit_knockoffs(&x, &scit_model, 42).unwrap();
    let (c_self, c_cross) = moment_deviation(&scit.xaug, p, &scit_model, &scit.effective_s);
    let (_, c_cross_equi) = moment_deviation(&scit.xaug, p, &scit_model, &scit_model.s);
    let pass = s_self < 0.1 && s_cross < 0.1 && c_self < 0.1 && c_cross < 0.1;
    Verdict::new(
        pass,
        format!(
            "single: self {s_self:.4}, cross {s_cross:.4}; SCIT M=2: self {c_self:.4}, cross {c_cross:.4} \
             against realized s (against equicorrelated s: {c_cross_equi:.4}); limit 0.1"
        ),
    )
}

fn criterion_5() -> Verdict {
    let mut r = rng(5);
    let mut single_bad = 0;
    let mut multi_bad = 0;
    for _ in 0..1000 {
        let p = r.random_range(1..=30);
        let q = r.random_range(0.01..0.99);
        let w: Vec<f64> = (0..p)
            .map(|_| {
                if r.random_bool(0.5) {
                    f64::from(r.random_range(-6i32..=6)) * 0.5
                } else {
                    r.random_range(-5.0..5.0)
                }
            })
            .collect();
        let sel = single_knockoff_threshold(&w, q);
        let (t, set) = brute_single(&w, q);
        if sel.threshold != t || sel.selected != set {
            single_bad += 1;
        }
    }
    for _ in 0..1000 {
        let p = r.random_range(1..=30);
        let m = r.random_range(2..=6);
        let q = r.random_range(0.01..0.99);
        let kappa: Vec<usize> = (0..p)
            .map(|_| if r.random_bool(0.6) { 0 } else { r.random_range(1..=m) })
            .collect();
        let tau: Vec<f64> = (0..p)
            .map(|_| {
                if r.random_bool(0.5) {
                    f64::from(r.random_range(0..8)) * 0.25
                } else {
                    r.random_range(0.0..3.0)
                }
            })
            .collect();
        let sel = multiple_knockoff_threshold(&kappa, &tau, m, q);
        let (t, set) = brute_multi(&kappa, &tau, m, q);
        if sel.threshold != t || sel.selected != set {
            multi_bad += 1;
        }
    }
    Verdict::new(
        single_bad == 0 && multi_bad == 0,
        format!("mismatches: single {single_bad}/1000, multiple {multi_bad}/1000"),
    )
}

fn criterion_6() -> Verdict {
    let mut r = rng(6);
    let mut worst_param = 0.0f64;
    let mut worst_input = 0.0f64;
    for index in 0..50 {
        let mut case = random_grad_case(&mut r, index);
        worst_param = worst_param.max(max_param_grad_error(&mut case));
        worst_input = worst_input.max(max_input_grad_error(&case));
    }
    Verdict::new(
        worst_param < 1e-5 && worst_input < 1e-5,
        format!("50 nets, max relative error: parameters {worst_param:.2e}, inputs {worst_input:.2e}; limit 1e-5"),
    )
}

fn criterion_7() -> Verdict {
    let mut r = rng(7);
    let mut worst_sum = 0.0f64;
    let mut worst_range = 0.0f64;
    let mut worst_scale = 0.0f64;
    let mut wide = 0;
    for i in 0..100 {
        let rows = r.random_range(1..=15);
        let cols = if i % 3 == 0 {
            rows + r.random_range(1..=10)
        } else {
            r.random_range(1..=15)
        };
        if cols > rows {
            wide += 1;
        }
        let rank = r.random_range(1..=rows.min(cols));
        let z = random_rank_matrix(&mut r, rows, cols, rank);
        let h = leverage_scores(&z).unwrap();
        worst_sum = worst_sum.max((h.iter().sum::<f64>() - rank as f64).abs());
        for v in &h {
            worst_range = worst_range.max(-v).max(v - 1.0);
        }
        let c = 10f64.powf(r.random_range(-3.0..3.0));
        let hc = leverage_scores(&(&z * c)).unwrap();
        for (a, b) in h.iter().zip(&hc) {
            worst_scale = worst_scale.max((a - b).abs());
        }
    }
    Verdict::new(
        worst_sum < 1e-8 && worst_range <= 1e-12 && worst_scale < 1e-9,
        format!(
            "100 matrices ({wide} with d > rows): |Σh − rank| ≤ {worst_sum:.1e}, range excess {worst_range:.1e}, \
             |h(cZ) − h(Z)| ≤ {worst_scale:.1e}"
        ),
    )
}

fn check(results: &mut Vec<String>, name: &str, ok: bool) {
    if !ok {
        results.push(name.to_string());
    }
}

fn criterion_8() -> Verdict {
    let mut failed = Vec::new();
    let mut total = 0;
    let mut run = |name: &str, ok: bool| {
        total += 1;
        check(&mut failed, name, ok);
    };

    // Standardization with ddof = 1.
    let mut col = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
    standardize_columns(&mut col, &["a".into()]).unwrap();
    run("standardize [1,2,3]", col.iter().zip([-1.0, 0.0, 1.0]).all(|(a, b)| (a - b).abs() < 1e-12));

    // Correlation profile of independent columns.
    let mut r = rng(8);
    let ind = DMatrix::<f64>::from_fn(1000, 5, |_, _| r.sample(rand_distr::StandardNormal));
    let prof = feature_correlation_profile(&ind).unwrap();
    run("independent correlation profile", prof.iter().all(|v| v.abs() < 0.2));

    // Equicorrelated s from data whose sample covariance is exactly Σ.
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
    let g = DMatrix::<f64>::from_fn(50, 2, |_, _| r.sample(rand_distr::StandardNormal));
    let centered = {
        let mut c = g.clone();
        for mut column in c.column_iter_mut() {
            let m = column.mean();
            column.add_scalar_mut(-m);
        }
        c
    };
    let whiten = sample_covariance(&centered).cholesky().unwrap().l().try_inverse().unwrap();
    let x = centered * whiten.transpose() * sigma.clone().cholesky().unwrap().l().transpose();
    let model = fit_gaussian_model(&x, 1).unwrap();
    run("equicorrelated rho=0.5 gives s=1", model.s.iter().all(|v| (v - 1.0).abs() < 1e-9));

    // Knockoff Monte Carlo moments.
    let x5 = gaussian(&mut r, 20_000, &[0.0; 5], &ar1(5, 0.5));
    let m5 = fit_gaussian_model(&x5, 1).unwrap();
    let k5 = sample_single_knockoffs(&x5, &m5, 3).unwrap();
    let (dev_self, dev_cross) = moment_deviation(&k5.xaug, 5, &m5, &m5.s);
    run("single knockoff moments", dev_self < 0.1 && dev_cross < 0.1);

    let x4 = gaussian(&mut r, 20_000, &[0.0; 4], &DMatrix::identity(4, 4));
    let m4 = fit_gaussian_model(&x4, 1).unwrap();
    let a = sample_single_knockoffs(&x4, &m4, 5).unwrap();
    let b = sample_scit_knockoffs(&x4, &m4, 6).unwrap();
    let diff = (sample_covariance(&a.xaug) - sample_covariance(&b.xaug)).amax();
    run("SCIT M=1 matches single sampler", diff < 0.1);

    let x1 = gaussian(&mut r, 20_000, &[0.0], &DMatrix::identity(1, 1));
    let m1 = fit_gaussian_model(&x1, 3).unwrap();
    let k1 = sample_knockoffs(&x1, &m1, 7).unwrap();
    let c1 = sample_covariance(&k1.xaug);
    let mut max_corr = 0.0f64;
    for i in 1..4 {
        for j in (i + 1)..4 {
            max_corr = max_corr.max((c1[(i, j)] / (c1[(i, i)] * c1[(j, j)]).sqrt()).abs());
        }
    }
    run("p=1, M=3 copies uncorrelated", max_corr < 0.05);

    // ELU closed form.
    run("ELU values", elu(0.0) == 0.0 && (elu(-1.0) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);

    // One Adam step by hand: m̂ = 1, v̂ = 1, update = −lr · 1 / (1 + ε).
    let mut adam = Adam::new(1);
    let mut w = [0.0];
    adam.step(&mut w, &[1.0], 0.001);
    run("Adam first step", (w[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);

    // Loss trend on a separable toy problem.
    let (p, n) = (4, 64);
    let xs = RowMajor::new((0..n * 2 * p).map(|_| r.random_range(-1.0..1.0)).collect(), n, 2 * p);
    let ys: Vec<f64> = (0..n)
        .map(|i| f64::from(u8::from(xs.row(i)[0] + xs.row(i)[1] > 0.0)))
        .collect();
    let mut net = Network::new(NetworkConfig {
        p,
        copies: 1,
        depth: 1,
        hidden: 8,
        lambda: 0.0,
        dropout_prob: 0.5,
        covariate_dim: 0,
        task: Task::Binary,
        seed: 3,
    })
    .unwrap();
    let losses: Vec<f64> = (0..50)
        .map(|_| net.train_step(&Batch::new(&xs, None), &ys, 0.01).unwrap())
        .collect();
    let first = losses[..10].iter().sum::<f64>() / 10.0;
    let last = losses[40..].iter().sum::<f64>() / 10.0;
    run("loss decreases on separable data", last < first);

    // Leverage examples.
    let h = leverage_scores(&DMatrix::from_row_slice(2, 1, &[1.0, 1.0])).unwrap();
    run("leverage of [[1],[1]]", h.iter().all(|v| (v - 0.5).abs() < 1e-12));
    let z = DMatrix::from_fn(10, 4, |_, _| r.random_range(-1.0..1.0));
    let (_, rank) = gram_schmidt_leverage(&z);
    let total_h: f64 = leverage_scores(&z).unwrap().iter().sum();
    run("Σh = rank on random 10×4", (total_h - rank as f64).abs() < 1e-9);

    // Zero-weight exclusion.
    let always = (0..200).all(|s| {
        let mut sr = rng(s);
        let mut picks = weighted_sample_without_replacement(&[0.5, 0.5, 0.0], 2, &mut sr).unwrap();
        picks.sort_unstable();
        picks == [0, 1]
    });
    run("weights (1,1,0)/2 with m=2", always);

    // κ/τ hand evaluation and thresholds.
    let stats = multiple_knockoff_stats(&[5.0, 1.0, 2.0, 3.0, 1.0, 0.5], 2).unwrap();
    run(
        "κ/τ/W example",
        stats.kappa.as_deref() == Some(&[0, 1][..])
            && stats.tau.as_deref() == Some(&[3.5, 2.25][..])
            && stats.w == [3.5, 0.0],
    );
    let s1 = single_knockoff_threshold(&[3.0, -1.0, 2.0, -2.0, 5.0], 0.5);
    run("single threshold example", s1.threshold == 3.0 && s1.selected == [0, 4]);
    let s20 = single_knockoff_threshold(&[10.0; 20], 0.2);
    run("twenty equal positives", s20.threshold == 10.0 && s20.selected.len() == 20);
    let mk = multiple_knockoff_threshold(&[0, 1], &[3.5, 2.25], 2, 0.5);
    run("multiple threshold example", mk.threshold == 3.5 && mk.selected == [0]);
    let mk20 = multiple_knockoff_threshold(&[0; 20], &[1.0; 20], 5, 0.2);
    run("twenty originals on top", mk20.selected.len() == 20);

    // Instability and correlation.
    let inst = instability_profile(&[vec![1.0], vec![3.0]]).unwrap();
    run("instability of (1,3)", (inst.instability[0] - 2f64.sqrt() / 2.0).abs() < 1e-12);
    let a: Vec<f64> = (0..1000).map(|_| r.sample(rand_distr::StandardNormal)).collect();
    let b: Vec<f64> = (0..1000).map(|_| r.sample(rand_distr::StandardNormal)).collect();
    run("independent score correlation", score_correlation(&a, &b).unwrap().abs() < 0.1);

    Verdict::new(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{total} worked examples reproduced")
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

fn desk() -> ExperimentConfig {
    ExperimentConfig::profile(Profile::Desk)
}

fn criteria_1_and_2() -> (Verdict, Verdict) {
    let mut cfg = desk();
    cfg.replicates = 30;
    let start = Instant::now();
    let res = run_experiment(&cfg).unwrap();
    let elapsed = start.elapsed();
    let mut fdr_ok = elapsed < Duration::from_secs(30 * 60);
    let mut parts = Vec::new();
    for s in &res.summary {
        let fdr = s.mean_fdp.unwrap();
        fdr_ok &= fdr <= 0.30;
        parts.push(format!("{} {:.3}", s.strategy, fdr));
    }
    let c1 = Verdict::new(
        fdr_ok,
        format!(
            "30 replicates, mean FDP: {}; limit 0.30; {:.1} min",
            parts.join(", "),
            elapsed.as_secs_f64() / 60.0
        ),
    );
    let power = |prefix: &str| {
        res.summary
            .iter()
            .find(|s| s.strategy.starts_with(prefix))
            .and_then(|s| s.mean_power)
            .unwrap()
    };
    let best = power("best");
    let top = power("top_m");
    let inf = power("m_influential");
    let c2 = Verdict::new(
        top >= best - 0.02 && inf >= best - 0.02,
        format!(
            "mean power: best {best:.3}, avg {:.3}, top_m {top:.3}, m_influential {inf:.3}",
            power("avg")
        ),
    );
    (c1, c2)
}

fn criterion_3() -> Verdict {
    let cfg = desk();
    let report = stability_experiment(&cfg, 5, false).unwrap();
    let best = report.strategy("best").unwrap().median_jaccard;
    let mut ok = true;
    let mut parts = Vec::new();
    for s in &report.strategies {
        parts.push(format!("{} {:.3}", s.strategy, s.median_jaccard));
        if s.strategy != "best" {
            ok &= s.median_jaccard >= best;
        }
    }
    Verdict::new(ok, format!("median pairwise Jaccard over 5 repeats: {}", parts.join(", ")))
}

fn criterion_9() -> Verdict {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let mut cfg = desk();
        cfg.seed = 7;
        cfg.out_dir = Some(d.path().to_path_buf());
        run_experiment(&cfg).unwrap();
    }
    let read = |dir: &Path, f: &str| std::fs::read(dir.join(f)).unwrap();
    let mut same = true;
    for f in ["results.csv", "summary.csv"] {
        same &= read(dirs[0].path(), f) == read(dirs[1].path(), f);
    }
    let detail = if same {
        "desk profile, seed 7, two runs: results.csv and summary.csv byte-identical"
    } else {
        "desk profile, seed 7, two runs: aggregate CSVs differ"
    };
    Verdict::new(same, detail)
}

const NAMES: [&str; 9] = [
    "FDR control",
    "ensemble power direction",
    "stability direction",
    "knockoff moment exchangeability",
    "filter oracle equivalence",
    "gradient correctness",
    "leverage identities",
    "worked examples",
    "determinism",
];

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |c: usize| only.as_ref().is_none_or(|o| o.contains(&c));

    let mut verdicts: Vec<(usize, Verdict)> = Vec::new();
    let fast: [(usize, fn() -> Verdict); 5] = [
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
    ];
    for (c, f) in fast {
        if wanted(c) {
            verdicts.push((c, f()));
        }
    }
    if wanted(1) || wanted(2) {
        let (c1, c2) = criteria_1_and_2();
        if wanted(1) {
            verdicts.push((1, c1));
        }
        if wanted(2) {
            verdicts.push((2, c2));
        }
    }
    if wanted(3) {
        verdicts.push((3, criterion_3()));
    }
    if wanted(9) {
        verdicts.push((9, criterion_9()));
    }
    verdicts.sort_by_key(|(c, _)| *c);

    let mut failures = 0;
    for (c, v) in &verdicts {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {c} [{tag}] {}: {}", NAMES[c - 1], v.detail);
        failures += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failures} failed", verdicts.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
