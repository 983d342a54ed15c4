//! Acceptance criteria, one line per criterion. Exits nonzero if any fails.

use std::path::Path;
use std::process::Command as Proc;
use std::time::{Duration, Instant};

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use wiselab::density::{make_density, DensityModel, DensitySpec};
use wiselab::estimator::{make_schedule, projection_mean};
use wiselab::harness::{chaos_comparison, run_clt_experiment, run_lemma_suite, run_lil_trajectory, run_spectrum, ExperimentConfig, WaveletSpec};
use wiselab::ise::{e_n_sq, hn_eval, jbar_statistic, martingale_decompose, u_nn_second_moment, IseContext, IseRoute};
use wiselab::kernel::{quadruple_fast, KernelEvaluator, QuadSpec};
use wiselab::tails::moment_scaling_probe;
use wiselab::variance::{cov_kernels, spectrum};
use wiselab::wavelet::{basis_diagnostics, cascade, make_filter, Family, ScalingTable};
use wiselab::Result;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn haar(r: u32) -> ScalingTable {
    cascade(&make_filter(Family::Haar, 1).unwrap(), r).unwrap()
}

fn db2(r: u32) -> ScalingTable {
    cascade(&make_filter(Family::Daubechies, 2).unwrap(), r).unwrap()
}

fn uniform() -> DensityModel {
    make_density("uniform", &[0.0, 1.0]).unwrap()
}

fn gaussian() -> DensityModel {
    make_density("gaussian", &[0.0, 1.0]).unwrap()
}

fn haar_closed_forms() -> Result<Verdict> {
    let t = haar(12);
    let u = uniform();
    let ev = KernelEvaluator::new(&t);
    let mut worst: f64 = 0.0;
    // K(x, y) = 1{floor x = floor y}
    for a in 0..40 {
        for b in 0..40 {
            let (x, y) = (-2.0 + 0.1037 * a as f64, -2.0 + 0.1037 * b as f64);
            let expect = if x.floor() == y.floor() { 1.0 } else { 0.0 };
            worst = worst.max((ev.eval(x, y) - expect).abs());
        }
    }
    let quad = (quadruple_fast(&ev, 12) - 1.0).abs();
    worst = worst.max(quad);
    let mut hs: f64 = 0.0;
    for j in 1..=5u32 {
        let two_j = (j as f64).exp2();
        let cov = cov_kernels(&u, &t, j, 2.0, QuadSpec::exact(&t))?;
        hs = hs.max((two_j * cov.c_hs() - 1.0).abs());
        hs = hs.max((two_j * cov.r_hs() - (1.0 - 1.0 / two_j)).abs());
        let spec = spectrum(&cov)?;
        let k = (1usize << j) - 1;
        for (i, &l) in spec.eigenvalues.iter().enumerate() {
            let expect = if i < k { 1.0 / two_j } else { 0.0 };
            hs = hs.max((l - expect).abs());
        }
    }
    worst = worst.max(hs);
    let proj = projection_mean(&u, &t, 1, QuadSpec::exact(&t))?;
    let mut hn: f64 = 0.0;
    for &(x, y, expect) in &[(0.1, 0.2, 0.25), (0.1, 0.7, -0.25), (0.6, 0.9, 0.25), (0.8, 0.3, -0.25)] {
        hn = hn.max((hn_eval(&proj, &t, x, y) - expect).abs());
    }
    worst = worst.max(hn);
    verdict(worst <= 1e-10, format!("max deviation {worst:.2e} (quadruple {quad:.1e}, C/R/spectrum {hs:.1e}, H_n {hn:.1e})"))
}

fn db2_basis() -> Result<Verdict> {
    let b = basis_diagnostics(&db2(12));
    let pass = b.partition_residual <= 1e-9 && b.two_scale_residual <= 1e-10 && b.orthonormality_residual <= 5e-3;
    verdict(pass, format!("partition {:.1e}, two-scale {:.1e}, orthonormality {:.1e}", b.partition_residual, b.two_scale_residual, b.orthonormality_residual))
}

fn lemma_suite() -> Result<Verdict> {
    let rep = run_lemma_suite(&ExperimentConfig::default())?;
    let monotone = rep.rows.iter().filter(|r| r.check == "limit_deviation_monotone").collect::<Vec<_>>();
    let cells = rep.rows.iter().filter(|r| r.check == "c_hs_scaled").count();
    let failed = rep.failures();
    let mut detail = format!("{} rows over {cells} cells, {} monotone rows, {} asserted failures", rep.rows.len(), monotone.len(), failed.len());
    for f in failed.iter().take(3) {
        detail.push_str(&format!("; {} {} {:e}", f.scope, f.check, f.value));
    }
    verdict(rep.all_pass() && cells == 30 && monotone.len() == 6 && monotone.iter().all(|r| r.pass), detail)
}

fn centred_identity() -> Result<Verdict> {
    let j = make_schedule(0.2)?.level(1024);
    let mut worst = [0.0f64; 2];
    for (slot, (table, density)) in [(haar(12), uniform()), (db2(12), gaussian())].into_iter().enumerate() {
        let ctx = IseContext::new(&density, &table, j, QuadSpec::exact(&table))?;
        for r in 0..100 {
            let s = density.sample_stream(1024, 1, r)?;
            let b = jbar_statistic(&s.values, &density, j, &ctx, IseRoute::Quadrature)?;
            worst[slot] = worst[slot].max((b.j_n_stat - b.jbar).abs());
        }
    }
    verdict(worst[0] <= 1e-10 && worst[1] <= 1e-4, format!("j={j}: Haar/uniform {:.2e} (<=1e-10), DB2/gaussian {:.2e} (<=1e-4)", worst[0], worst[1]))
}

fn s_n_two_routes() -> Result<Verdict> {
    let (t, u) = (haar(12), uniform());
    let (n, j) = (512, 5);
    let proj = projection_mean(&u, &t, j, QuadSpec::exact(&t))?;
    let formula = n as f64 * (n as f64 - 1.0) / 2.0 * (-(3.0 * j as f64)).exp2() * e_n_sq(&proj);
    let (mc, se) = u_nn_second_moment(&u, &t, &proj, n, 2000, 1)?;
    let direct = martingale_decompose(&u.sample_stream(n, 1, 0)?.values, &u, &t, j, &proj)?.s_n_sq_direct;
    let rel = (mc - formula).abs() / formula;
    verdict(
        rel <= 0.05,
        format!("j={j}: formula {formula:.5e}, MC E U_nn^2 {mc:.5e} (se {:.1}%), gap {:.2}%; single-sample pair-square sum {direct:.5e}", 100.0 * se / formula, 100.0 * rel),
    )
}

fn clt() -> Result<Verdict> {
    let cfg = ExperimentConfig::default();
    let rep = run_clt_experiment(&cfg)?;
    let ks14 = rep.ks_at(1 << 14).unwrap_or(f64::NAN);
    let ks10 = rep.ks_at(1 << 10).unwrap_or(f64::NAN);
    let ks16 = rep.ks_at(1 << 16).unwrap_or(f64::NAN);
    let j = rep.rows.iter().find(|r| r.n == 1 << 14).map(|r| r.j_n).unwrap_or(0);
    // At fixed j the Haar/uniform statistic is (chi^2_{2^j - 1} - (2^j - 1)) / (2^{j/2} sqrt 2).
    let dof = ((1u64 << j) - 1) as f64;
    let chi = ChiSquared::new(dof).unwrap();
    let z = Normal::new(0.0, 1.0).unwrap();
    let scale = (j as f64 / 2.0).exp2() * 2f64.sqrt();
    let floor = (0..=20000).map(|i| -6.0 + 14.0 * i as f64 / 20000.0).map(|x| (chi.cdf(x * scale + dof) - z.cdf(x)).abs()).fold(0.0, f64::max);
    let pass = ks14 <= 0.08 && ks16 <= ks10 + 0.02;
    verdict(
        pass,
        format!("seed {}: ks(2^10)={ks10:.4}, ks(2^14)={ks14:.4} (<=0.08, j={j}), ks(2^16)={ks16:.4}; exact fixed-j law sits {floor:.4} from N(0,1)", cfg.seed),
    )
}

fn chaos() -> Result<Verdict> {
    let (t, u) = (haar(12), uniform());
    let n = 1 << 14;
    let j = make_schedule(0.2)?.level(n as u64);
    let c = chaos_comparison(&u, &t, j, 2.0, n, 10_000, 2000, 1)?;
    verdict(c.ks_distance <= 0.1, format!("n=2^14 j={j} M=2: two-sample ks {:.4}", c.ks_distance))
}

fn hs_identity() -> Result<Verdict> {
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for (w, d) in [
        (WaveletSpec::haar(), DensitySpec::Uniform { a: 0.0, b: 1.0 }),
        (WaveletSpec::daubechies(2), DensitySpec::Gaussian { mu: 0.0, sigma: 1.0 }),
        (WaveletSpec::daubechies(2), DensitySpec::Laplace { mu: 0.0, b: 1.0 }),
    ] {
        let mut cfg = ExperimentConfig { wavelet: w, density: d, ..ExperimentConfig::default() };
        cfg.spectrum.chaos_draws = 0;
        let run = run_spectrum(&cfg)?;
        for s in &run.spectra {
            worst = worst.max(s.hs_relative_gap());
            runs += 1;
        }
    }
    verdict(worst <= 1e-6, format!("{runs} spectra, max relative gap {worst:.2e}"))
}

fn moment_slopes() -> Result<Verdict> {
    let levels = [2, 3, 4, 5, 6];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, t, d) in [("haar/uniform", haar(12), uniform()), ("db2/gaussian", db2(12), gaussian())] {
        let r = moment_scaling_probe(&d, &t, &levels, 10_000, 1)?;
        pass &= (r.h4_slope + 5.0).abs() <= 0.5 && (r.g2_slope + 7.0).abs() <= 0.5;
        parts.push(format!("{name}: H^4 {:.3}, G^2 {:.3}", r.h4_slope, r.g2_slope));
    }
    verdict(pass, parts.join("; "))
}

fn lil() -> Result<Verdict> {
    let rep = run_lil_trajectory(&ExperimentConfig::default())?;
    let band = rep.summaries.iter().all(|s| s.within_band());
    let blocks = rep.summaries.iter().all(|s| s.boundary_violations == 0 && !s.level_changes.is_empty());
    let maxes: Vec<String> = rep.summaries.iter().map(|s| format!("seed {}: {:.3}", s.seed, s.max_abs_l)).collect();
    verdict(band && blocks && rep.summaries.len() == 3, format!("max |L_n| over [1e4, 1e6]: {}; level changes on block starts: {blocks}", maxes.join(", ")))
}

fn run_cli(dir: &Path, threads: usize) -> std::process::ExitStatus {
    Proc::new(env!("CARGO_BIN_EXE_wiselab"))
        .args(["clt", "--seed", "1", "--threads", &threads.to_string(), "--out-dir"])
        .arg(dir)
        .stdout(std::process::Stdio::null())
        .status()
        .expect("binary runs")
}

fn determinism() -> Result<Verdict> {
    let tmp = tempfile::tempdir()?;
    let (a, b) = (tmp.path().join("t1"), tmp.path().join("t8"));
    let (sa, sb) = (run_cli(&a, 1), run_cli(&b, 8));
    if !sa.success() || !sb.success() {
        return verdict(false, format!("clt exited with {sa} / {sb}"));
    }
    let mut names: Vec<String> = std::fs::read_dir(&a)?.map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned())).collect::<std::io::Result<_>>()?;
    names.sort();
    let mut differing = Vec::new();
    for name in &names {
        if std::fs::read(a.join(name))? != std::fs::read(b.join(name)).unwrap_or_default() {
            differing.push(name.clone());
        }
    }
    let count_b = std::fs::read_dir(&b)?.count();
    verdict(differing.is_empty() && count_b == names.len(), format!("{} files compared ({}), differing: {:?}", names.len(), names.join(", "), differing))
}

type Criterion = (&'static str, fn() -> Result<Verdict>, Option<Duration>);

fn main() {
    let criteria: [Criterion; 11] = [
        ("Haar closed-form oracles", haar_closed_forms, Some(Duration::from_secs(1))),
        ("Daubechies-2 basis", db2_basis, Some(Duration::from_secs(5))),
        ("covariance lemma suite", lemma_suite, Some(Duration::from_secs(120))),
        ("J_n = Jbar_n identity", centred_identity, None),
        ("s_n^2 two routes", s_n_two_routes, Some(Duration::from_secs(60))),
        ("CLT Kolmogorov distance", clt, Some(Duration::from_secs(600))),
        ("chaos approximation", chaos, None),
        ("Hilbert-Schmidt identity", hs_identity, None),
        ("moment-scaling slopes", moment_slopes, Some(Duration::from_secs(120))),
        ("LIL trajectory diagnostic", lil, Some(Duration::from_secs(300))),
        ("thread-count determinism", determinism, None),
    ];
    let mut failures = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error [{}]: {e}", e.code())),
        };
        let in_time = budget.is_none_or(|b| elapsed <= b);
        let ok = pass && in_time;
        if !ok {
            failures += 1;
        }
        let budget_note = match budget {
            Some(b) if !in_time => format!(", over budget {:.0?}", b),
            _ => String::new(),
        };
        println!("criterion {:>2} {} {name}: {detail} [{:.2?}{budget_note}]", i + 1, if ok { "PASS" } else { "FAIL" }, elapsed);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
