//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and exits non-zero if any criterion fails.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::time::{Duration, Instant};

use gereach::embedding::{embed, EmbedOptions, EmbeddedCloud};
use gereach::experiments::{
    run_convergence_study, run_estimator_study, run_fluctuation_study, run_oracle_study, simulate_chat, StudyConfig,
    StudyReport,
};
use gereach::kernel::TrigKernel;
use gereach::reach::{
    brute_force_reach_oracle, error_process_sup, geometric_ratio, global_reach, local_reach_geometric,
    reach_decomposition, theta_from_cot2,
};
use gereach::rng::substream;
use gereach::sampler::sample_kl;
use gereach::stats;
use gereach::theory::{chat_exact_mean, conditional_variance};
use gereach::ManifoldGrid;
use nalgebra::{dmatrix, DMatrix};
use rand::Rng;

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn two_freq() -> TrigKernel {
    TrigKernel::circle(&[(1, 0.5), (2, 0.5)]).unwrap()
}

fn cosine() -> TrigKernel {
    TrigKernel::circle(&[(1, 1.0)]).unwrap()
}

fn verdict_line(report: &StudyReport, name: &str) -> (bool, String) {
    match report.verdict(name) {
        Some(v) => (
            v.pass,
            format!(
                "{name}: observed {:.5e} target {:.5e} allowed {:.2e}",
                v.observed, v.target, v.allowed
            ),
        ),
        None => (false, format!("{name}: missing")),
    }
}

fn collect(parts: Vec<(bool, String)>) -> Outcome {
    let pass = parts.iter().all(|p| p.0);
    let detail = parts
        .into_iter()
        .map(|(p, s)| if p { s } else { format!("[fail] {s}") })
        .collect::<Vec<_>>()
        .join("; ");
    (pass, detail)
}

fn great_circle() -> Outcome {
    let grid = ManifoldGrid::uniform(1, 64).unwrap();
    let mut parts = Vec::new();
    for k in [16, 256] {
        let cloud = embed(&sample_kl(&cosine(), &grid, k, 1).unwrap()).unwrap();
        let rep = global_reach(&cloud, 2.0 * grid.spacing()).unwrap();
        let ok = rep.global_cot2 <= 1e-10 && (rep.theta_k - FRAC_PI_2).abs() <= 1e-5;
        parts.push((
            ok,
            format!("k={k} cot2 {:.1e} theta {:.8}", rep.global_cot2, rep.theta_k),
        ));
    }
    collect(parts)
}

fn dual_route() -> Outcome {
    let grid = ManifoldGrid::uniform(1, 32).unwrap();
    let kernel = TrigKernel::circle(&[(1, 0.35), (2, 0.4), (5, 0.25)]).unwrap();
    let diag = 2.0 * grid.spacing();
    let (mut pairs, mut agree, mut worst) = (0usize, 0usize, 0.0f64);
    for seed in 0..5u64 {
        let batch = sample_kl(&kernel, &grid, 128, 1000 + seed).unwrap();
        let cloud = embed(&batch).unwrap();
        for x in 0..grid.len() {
            for y in 0..grid.len() {
                if gereach::geometry::param_distance(grid.point(x), grid.point(y)) <= diag + 1e-9 * grid.spacing() {
                    continue;
                }
                let g = geometric_ratio(&cloud, x, y).unwrap();
                let d = reach_decomposition(&batch, &kernel, &cloud, x, y).unwrap().combined;
                let rel = (g - d).abs() / g.abs().max(f64::MIN_POSITIVE);
                worst = worst.max(rel);
                pairs += 1;
                agree += usize::from(rel <= 1e-8);
            }
        }
    }
    (
        agree == pairs,
        format!("{agree}/{pairs} pairs within 1e-8 relative, worst {worst:.2e}"),
    )
}

fn convergence() -> Outcome {
    let mut cfg = StudyConfig::new(two_freq());
    cfg.grid_size = 256;
    cfg.k_list = vec![64, 256, 1024, 4096];
    cfg.replicates = 20;
    cfg.seed = 2024;
    let rep = run_convergence_study(&cfg).unwrap();
    let sigma = rep.aggregate("theory").unwrap()["sigma_c2"];
    let meds: Vec<String> = cfg
        .k_list
        .iter()
        .map(|k| format!("{:.4}", rep.aggregate(&format!("k={k}")).unwrap()["median_err_global"]))
        .collect();
    collect(vec![
        ((sigma - 1.0).abs() < 1e-9, format!("sigma_c2 {sigma:.10}")),
        (
            rep.verdict("monotone_err_global").is_some_and(|v| v.pass),
            format!("medians [{}]", meds.join(", ")),
        ),
        verdict_line(&rep, "final_median_err_global"),
    ])
}

fn estimator() -> Outcome {
    let mut cfg = StudyConfig::new(two_freq());
    cfg.rho_list = vec![0.5];
    cfg.k_list = vec![50];
    cfg.replicates = 100_000;
    cfg.seed = 4;
    let rep = run_estimator_study(&cfg).unwrap();
    let mut parts = vec![
        verdict_line(&rep, "mean_exact[rho=0.5,k=50]"),
        verdict_line(&rep, "k_var[rho=0.5,k=50]"),
    ];
    // Diagnostic only: exact finite-k variance from
    // E r^2 = 1 - (1 - rho^2) (k - 1) / k 2F1(1, 1; k/2 + 1; rho^2).
    let second = 1.0 - 0.75 * 49.0 / 50.0 * gereach::special::hyp2f1(1.0, 1.0, 26.0, 0.25).unwrap();
    let exact_var = 50.0 * (second - chat_exact_mean(0.5, 50).unwrap().powi(2));
    let k_var = rep.verdict("k_var[rho=0.5,k=50]").unwrap();
    parts.push((
        true,
        format!(
            "note: exact finite-k k*Var {exact_var:.5}, Monte Carlo differs from it by {:.2} SE",
            (k_var.observed - exact_var).abs() / (k_var.allowed / 3.0)
        ),
    ));
    for (i, (rho, k)) in [(0.3, 10usize), (0.3, 100), (0.7, 10), (0.7, 100)]
        .into_iter()
        .enumerate()
    {
        let xs = simulate_chat(rho, k, 100_000, 40 + i as u64);
        let (m, se) = (stats::mean(&xs), stats::se_mean(&xs));
        let exact = chat_exact_mean(rho, k as u64).unwrap();
        parts.push((
            (m - exact).abs() <= 3.0 * se,
            format!("rho={rho},k={k} |mc-exact|/se {:.2}", (m - exact).abs() / se),
        ));
    }
    collect(parts)
}

fn fluctuation() -> Outcome {
    let mut cfg = StudyConfig::new(two_freq());
    cfg.k_list = vec![500];
    cfg.replicates = 10_000;
    cfg.seed = 5;
    let rep = run_fluctuation_study(&cfg).unwrap();
    let names = [
        "var_n_0",
        "var_zeta_0",
        "var_zeta_1",
        "var_zeta_2",
        "cov_zeta_tilde_0_1",
        "var_gamma_0",
    ];
    collect(names.iter().map(|n| verdict_line(&rep, n)).collect())
}

fn diagonal_limit() -> Outcome {
    let kernels: [(&[(u32, f64)], f64); 3] = [
        (&[(1, 0.5), (2, 0.5)], 0.36),
        (&[(1, 0.2), (3, 0.8)], 0.18699780861943024),
        (&[(1, 1.0 / 3.0), (2, 1.0 / 3.0), (3, 1.0 / 3.0)], 0.5),
    ];
    let mut parts = Vec::new();
    for (terms, reference) in kernels {
        let kernel = TrigKernel::circle(terms).unwrap();
        let lam: f64 = terms.iter().map(|(j, a)| a * (*j as f64).powi(2)).sum();
        let mu: f64 = terms.iter().map(|(j, a)| a * (*j as f64).powi(4)).sum();
        let want = mu / (lam * lam) - 1.0;
        let v = |u: f64| conditional_variance(&kernel, &[0.3], &[0.3 + u]).unwrap();
        let r1 = |u: f64| (4.0 * v(u / 2.0) - v(u)) / 3.0;
        let r2 = (16.0 * r1(0.05) - r1(0.1)) / 15.0;
        let ok = (r2 - want).abs() <= 1e-6 && (want - reference).abs() <= 1e-12;
        parts.push((ok, format!("extrapolated {r2:.9} closed form {want:.9}")));
    }
    collect(parts)
}

fn oracle() -> Outcome {
    let mut cfg = StudyConfig::new(two_freq());
    cfg.grid_size = 16;
    cfg.k_list = vec![8];
    cfg.replicates = 5;
    cfg.seed = 7;
    let rep = run_oracle_study(&cfg).unwrap();
    let values = dmatrix![1.0, 0.0; 0.0, 1.0; 0.0, 0.0];
    let fx = dmatrix![1.0, 0.0; 0.0, 0.0; 0.0, 1.0];
    let fy = dmatrix![0.0, 0.0; 1.0, 0.0; 0.0, 1.0];
    let cloud = EmbeddedCloud::from_parts(
        vec![vec![0.0], vec![PI]],
        1.0,
        values,
        vec![fx, fy],
        EmbedOptions::default(),
    )
    .unwrap();
    let (cot2, _) = local_reach_geometric(&cloud, 0, 1.0).unwrap();
    let projected = theta_from_cot2(cot2);
    let brute = brute_force_reach_oracle(&cloud, 0, 256, 1e-3, 1.0, 7).unwrap();
    let tol = 1e-3f64.max(0.05 * FRAC_PI_4);
    collect(vec![
        verdict_line(&rep, "oracle_agreement"),
        (
            (projected - FRAC_PI_4).abs() <= 1e-12 && (brute - FRAC_PI_4).abs() <= tol,
            format!("two-point projection route {projected:.6} oracle {brute:.6}"),
        ),
    ])
}

fn error_decay() -> Outcome {
    let kernel = two_freq();
    let grid = ManifoldGrid::uniform(1, 64).unwrap();
    let diag = 2.0 * grid.spacing();
    let ks = [64usize, 256, 1024, 4096];
    let mut medians = Vec::new();
    for &k in &ks {
        let sups: Vec<f64> = (0..8u64)
            .map(|s| {
                let batch = sample_kl(&kernel, &grid, k, 800 + s).unwrap();
                let cloud = embed(&batch).unwrap();
                error_process_sup(&batch, &kernel, &cloud, diag).unwrap()
            })
            .collect();
        medians.push(stats::median(&sups));
    }
    let kf: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    let slope = stats::loglog_slope(&kf, &medians).unwrap();
    let meds: Vec<String> = medians.iter().map(|m| format!("{m:.3e}")).collect();
    (
        (slope + 1.0).abs() <= 0.2,
        format!("slope {slope:.3}, medians [{}]", meds.join(", ")),
    )
}

fn frame_invariance() -> Outcome {
    let grid = ManifoldGrid::uniform(1, 32).unwrap();
    let diag = 2.0 * grid.spacing();
    let cloud = embed(&sample_kl(&two_freq(), &grid, 64, 9).unwrap()).unwrap();
    let base = global_reach(&cloud, diag).unwrap().local_cot2;
    let mut rng = substream(9, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let a = loop {
            let a = DMatrix::<f64>::from_fn(2, 2, |_, _| rng.random_range(-2.0..2.0));
            if a.determinant().abs() > 0.1 {
                break a;
            }
        };
        let mixed = cloud.with_frames(|_| a.clone()).unwrap();
        let other = global_reach(&mixed, diag).unwrap().local_cot2;
        for (p, q) in base.iter().zip(&other) {
            worst = worst.max((p - q).abs() / p.abs().max(f64::MIN_POSITIVE));
        }
    }
    (worst <= 1e-9, format!("20 trials, worst relative change {worst:.2e}"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 great-circle exactness", great_circle, Some(Duration::from_secs(5))),
        ("2 dual-route identity", dual_route, Some(Duration::from_secs(30))),
        ("3 strong-law convergence", convergence, Some(Duration::from_secs(600))),
        ("4 estimator moments", estimator, Some(Duration::from_secs(120))),
        ("5 fluctuation covariances", fluctuation, Some(Duration::from_secs(300))),
        ("6 diagonal limit", diagonal_limit, Some(Duration::from_secs(1))),
        ("7 definition-level oracle", oracle, Some(Duration::from_secs(60))),
        ("8 error-process decay", error_decay, Some(Duration::from_secs(300))),
        ("9 frame invariance", frame_invariance, None),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let (pass, detail) = run();
        let elapsed = start.elapsed();
        let in_time = budget.is_none_or(|b| elapsed <= b);
        let pass = pass && in_time;
        failed += usize::from(!pass);
        let timing = match budget {
            Some(b) => format!("{:.2}s of {}s", elapsed.as_secs_f64(), b.as_secs()),
            None => format!("{:.2}s", elapsed.as_secs_f64()),
        };
        println!(
            "{} criterion {name}: {detail} ({timing})",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
