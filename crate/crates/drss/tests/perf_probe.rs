//! Manual timing probes for the penalized propensity solver; run with
//! `cargo test --test perf_probe -- --ignored --nocapture`.

use std::time::Instant;

use drss::data::RandomStream;
use drss::propensity::{fit_offset_logistic_lasso, select_lasso_penalty, OffsetLassoOptions};
use drss::sim::{DgpSpec, OutcomeDgp, PsDgp, ResolvedDgp};

fn generate(n: usize, p: usize, pi: f64, s_pi: usize, seed: u64) -> drss::SemiSupervisedSample {
    let spec = DgpSpec {
        ps_model: PsDgp::P2PrimeSparse { s_pi },
        outcome_model: OutcomeDgp::O1PrimeSparse { s_m: 3 },
        n,
        p,
        pi_n: pi,
    };
    let dgp = ResolvedDgp::resolve(&spec, 1).unwrap();
    dgp.generate(&RandomStream::new(seed, 0)).unwrap()
}

#[test]
#[ignore]
fn time_raw_passes() {
    use drss::propensity::{offset_loglik, offset_loglik_gradient};
    let sample = generate(40_000, 500, 0.01, 15, 3);
    let gamma = vec![0.01; 501];
    let t = Instant::now();
    let mut acc = 0.0;
    for _ in 0..10 {
        acc += offset_loglik(&gamma, 0.01, sample.x(), sample.r()).unwrap();
    }
    println!("10 loglik passes: {:?} (acc {acc:.3})", t.elapsed());
    let t = Instant::now();
    let mut acc = 0.0;
    for _ in 0..10 {
        acc += offset_loglik_gradient(&gamma, 0.01, sample.x(), sample.r()).unwrap()[0];
    }
    println!("10 gradient passes: {:?} (acc {acc:.3})", t.elapsed());
    let t = Instant::now();
    let sel = sample.x().select(ndarray::Axis(0), &(0..32_000).collect::<Vec<_>>());
    println!("row-select copy 32000x500: {:?} ({} rows)", t.elapsed(), sel.nrows());
}

#[test]
#[ignore]
fn time_single_fixed_lambda_fit() {
    let sample = generate(10_000, 500, 0.01, 15, 3);
    let pi = sample.n_labeled() as f64 / sample.n() as f64;
    let rate = (pi * 501f64.ln() / sample.n() as f64).sqrt();
    for mult in [4.0, 1.0, 0.25, 0.0625] {
        let t = Instant::now();
        let fit = fit_offset_logistic_lasso(
            sample.x(),
            sample.r(),
            &OffsetLassoOptions {
                lambda: Some(mult * rate),
                ..OffsetLassoOptions::default()
            },
        )
        .unwrap();
        let nz = fit.gamma.iter().filter(|g| **g != 0.0).count();
        println!(
            "lambda = {:>10.3e} ({mult:>7.4} x rate): {:>8.2?}  iters {:>6}  nonzero {nz}",
            mult * rate,
            t.elapsed(),
            fit.iterations
        );
    }
}

#[test]
#[ignore]
fn time_cv_selection() {
    for (n, seed) in [(10_000usize, 3u64), (50_000, 4)] {
        let sample = generate(n, 500, 0.01, 15, seed);
        let pi = sample.n_labeled() as f64 / n as f64;
        let rate = (pi * 501f64.ln() / n as f64).sqrt();
        let t = Instant::now();
        let lambda =
            select_lasso_penalty(sample.x(), sample.r(), &OffsetLassoOptions::default()).unwrap();
        let t_cv = t.elapsed();
        let t = Instant::now();
        let fit = fit_offset_logistic_lasso(
            sample.x(),
            sample.r(),
            &OffsetLassoOptions {
                lambda: Some(lambda),
                ..OffsetLassoOptions::default()
            },
        )
        .unwrap();
        println!(
            "N {n:>6}: cv {t_cv:>8.2?} fit {:>8.2?} lambda {lambda:.3e} ({:.3} x rate) nonzero {}",
            t.elapsed(),
            lambda / rate,
            fit.gamma.iter().filter(|g| **g != 0.0).count()
        );
    }
}
