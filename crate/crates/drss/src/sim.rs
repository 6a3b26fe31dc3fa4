//! Data-generating processes and the Monte Carlo harness: standard-normal
//! covariates, decaying labeling mechanisms (constant, offset logistic,
//! sparse offset logistic, stratified), polynomial outcome models, and a
//! campaign runner that aggregates bias, RMSE, interval length, coverage and
//! nuisance-error diagnostics over replications.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{make_folds, stream, RandomStream, SampleMode, SemiSupervisedSample};
use crate::error::{Error, Result};
use crate::estimators::{naive_labeled_mean, run_pipeline, OutcomeSpec, PsSpec, Truths};
use crate::inference::{
    adjusted_if_mcar, adjusted_if_offset_logistic, adjusted_if_stratified, adjusted_variance,
    confidence_interval, err_diagnostics,
};
use crate::propensity::{
    fit_mcar, fit_offset_logistic_mle, fit_stratified, select_lasso_penalty, sigmoid,
    OffsetLassoOptions,
};
use crate::validate_sample;

/// Labeling mechanism of a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum PsDgp {
    /// Constant labeling probability (MCAR).
    P1Constant,
    /// Offset logistic with unit slope on the first covariate.
    P2OffsetLogistic,
    /// Offset logistic with `s_pi` equal slopes scaled to unit norm.
    P2PrimeSparse { s_pi: usize },
    /// Stratified: `p_delta(x) = g(x_1)`, labeling rate `0.5 pi` in stratum 1
    /// and `1.5 pi` in stratum 0.
    P3Stratified,
}

/// Outcome model of a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeDgp {
    /// Linear with coefficients `(-0.5, 1, 1, 1, 0, ...)`.
    O1Linear,
    /// Linear plus squares of the first three covariates.
    O2Quadratic,
    /// Linear with `s_m` equal slopes scaled so the signal variance is 3.
    O1PrimeSparse { s_m: usize },
    /// Quadratic plus cubes of the first three covariates with weight 0.2.
    O3Cubic,
}

/// Declarative simulation configuration.
#[derive(Debug, Clone)]
pub struct DgpSpec {
    pub ps_model: PsDgp,
    pub outcome_model: OutcomeDgp,
    pub n: usize,
    pub p: usize,
    pub pi_n: f64,
}

/// Calibrate the offset-model intercept so that the mean labeling probability
/// equals `pi_n`: bisection on the intercept over `[-20, 20]` against a
/// common set of `mc_size` standard-normal draws of the linear predictor.
/// With all slopes zero the analytic value `-log(1 - pi_n)` is returned.
pub fn calibrate_gamma_intercept(
    pi_n: f64,
    gamma_slopes: &[f64],
    mc_size: usize,
    seed: u64,
) -> Result<f64> {
    if !(pi_n > 0.0 && pi_n < 1.0) {
        return Err(Error::InvalidSpec(format!("pi_n {pi_n} outside (0,1)")));
    }
    let norm: f64 = gamma_slopes.iter().map(|s| s * s).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(-(-pi_n).ln_1p());
    }
    // The linear predictor of a standard-normal design is N(0, |slopes|^2),
    // so a single univariate draw per replicate is exact.
    let mut rng = RandomStream::derived(seed, stream::CALIBRATION, 0).rng();
    let z: Vec<f64> = (0..mc_size)
        .map(|_| norm * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    let ln_pi = pi_n.ln();
    let h = |c: f64| -> f64 {
        z.iter().map(|&u| sigmoid(c + u + ln_pi)).sum::<f64>() / mc_size as f64 - pi_n
    };
    let (mut lo, mut hi) = (-20.0, 20.0);
    let (h_lo, h_hi) = (h(lo), h(hi));
    if h_lo > 0.0 || h_hi < 0.0 {
        return Err(Error::CalibrationNotBracketed { lo, hi });
    }
    let tol = 1e-3 * pi_n;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = h(mid);
        if v.abs() <= tol || hi - lo < 1e-12 {
            return Ok(mid);
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// A spec with its parameter vectors built and the offset intercept
/// calibrated; cheap to generate from repeatedly.
#[derive(Clone)]
pub struct ResolvedDgp {
    spec: DgpSpec,
    /// Linear coefficients on `(1, x)`.
    beta: Arc<Vec<f64>>,
    /// Quadratic coefficients on `(1, x)` entries squared.
    alpha: Arc<Vec<f64>>,
    /// Cubic coefficients.
    zeta: Arc<Vec<f64>>,
    /// Propensity coefficients on `(1, x)`; empty unless offset logistic.
    gamma: Arc<Vec<f64>>,
    theta0: f64,
}

impl ResolvedDgp {
    pub fn resolve(spec: &DgpSpec, calibration_seed: u64) -> Result<ResolvedDgp> {
        let p = spec.p;
        if p < 3 {
            return Err(Error::InvalidSpec("p must be at least 3".into()));
        }
        if !(spec.pi_n > 0.0 && spec.pi_n < 1.0) {
            return Err(Error::InvalidSpec(format!("pi_n {} outside (0,1)", spec.pi_n)));
        }
        let mut beta = vec![0.0; p + 1];
        let mut alpha = vec![0.0; p + 1];
        let mut zeta = vec![0.0; p + 1];
        let theta0 = match &spec.outcome_model {
            OutcomeDgp::O1Linear => {
                beta[0] = -0.5;
                beta[1] = 1.0;
                beta[2] = 1.0;
                beta[3] = 1.0;
                -0.5
            }
            OutcomeDgp::O2Quadratic => {
                beta[0] = -0.5;
                beta[1] = 1.0;
                beta[2] = 1.0;
                beta[3] = 1.0;
                alpha[1] = 1.0;
                alpha[2] = 1.0;
                alpha[3] = 1.0;
                // Each active square contributes E(X^2) = 1.
                2.5
            }
            OutcomeDgp::O1PrimeSparse { s_m } => {
                if *s_m == 0 || *s_m > p {
                    return Err(Error::InvalidSpec(format!("s_m {s_m} outside 1..=p")));
                }
                beta[0] = -0.5;
                let v = (3.0 / *s_m as f64).sqrt();
                for j in 1..=*s_m {
                    beta[j] = v;
                }
                -0.5
            }
            OutcomeDgp::O3Cubic => {
                beta[0] = -0.5;
                beta[1] = 1.0;
                beta[2] = 1.0;
                beta[3] = 1.0;
                alpha[1] = 1.0;
                alpha[2] = 1.0;
                alpha[3] = 1.0;
                zeta[1] = 0.2;
                zeta[2] = 0.2;
                zeta[3] = 0.2;
                // Odd moments of a standard normal vanish.
                2.5
            }
        };
        let gamma = match &spec.ps_model {
            PsDgp::P1Constant | PsDgp::P3Stratified => {
                if matches!(spec.ps_model, PsDgp::P3Stratified) && 1.5 * spec.pi_n > 1.0 {
                    return Err(Error::InvalidSpec(
                        "stratified labeling needs 1.5 * pi_n <= 1".into(),
                    ));
                }
                Vec::new()
            }
            PsDgp::P2OffsetLogistic => {
                let mut g = vec![0.0; p + 1];
                g[1] = 1.0;
                g[0] = calibrate_gamma_intercept(spec.pi_n, &g[1..], 1_000_000, calibration_seed)?;
                g
            }
            PsDgp::P2PrimeSparse { s_pi } => {
                if *s_pi == 0 || *s_pi > p {
                    return Err(Error::InvalidSpec(format!("s_pi {s_pi} outside 1..=p")));
                }
                let mut g = vec![0.0; p + 1];
                let v = (1.0 / *s_pi as f64).sqrt();
                for j in 1..=*s_pi {
                    g[j] = v;
                }
                g[0] = calibrate_gamma_intercept(spec.pi_n, &g[1..], 1_000_000, calibration_seed)?;
                g
            }
        };
        Ok(ResolvedDgp {
            spec: spec.clone(),
            beta: Arc::new(beta),
            alpha: Arc::new(alpha),
            zeta: Arc::new(zeta),
            gamma: Arc::new(gamma),
            theta0,
        })
    }

    pub fn theta0(&self) -> f64 {
        self.theta0
    }

    pub fn spec(&self) -> &DgpSpec {
        &self.spec
    }

    fn regression(beta: &[f64], alpha: &[f64], zeta: &[f64], x: &[f64]) -> f64 {
        let mut acc = beta[0] + alpha[0] + zeta[0];
        for (j, &v) in x.iter().enumerate() {
            acc += beta[j + 1] * v + alpha[j + 1] * v * v + zeta[j + 1] * v * v * v;
        }
        acc
    }

    fn propensity_value(&self, x: &[f64]) -> f64 {
        match &self.spec.ps_model {
            PsDgp::P1Constant => self.spec.pi_n,
            PsDgp::P2OffsetLogistic | PsDgp::P2PrimeSparse { .. } => {
                let mut u = self.gamma[0];
                for (j, &v) in x.iter().enumerate() {
                    u += self.gamma[j + 1] * v;
                }
                sigmoid(u + self.spec.pi_n.ln())
            }
            PsDgp::P3Stratified => {
                let pd = sigmoid(x[0]);
                0.5 * self.spec.pi_n * pd + 1.5 * self.spec.pi_n * (1.0 - pd)
            }
        }
    }

    /// True regression and propensity functions with the analytic mean.
    pub fn truths(&self) -> Truths {
        let beta = self.beta.clone();
        let alpha = self.alpha.clone();
        let zeta = self.zeta.clone();
        let me = self.clone();
        Truths {
            m: Arc::new(move |x: &[f64]| Self::regression(&beta, &alpha, &zeta, x)),
            pi: Arc::new(move |x: &[f64]| me.propensity_value(x)),
            theta0: self.theta0,
        }
    }

    /// Draw one dataset. Draw order is frozen: covariates, stratum
    /// indicators (stratified only), labels, then residuals.
    pub fn generate(&self, rng_stream: &RandomStream) -> Result<SemiSupervisedSample> {
        let (n, p) = (self.spec.n, self.spec.p);
        let mut rng = rng_stream.rng();
        let x = Array2::from_shape_fn((n, p), |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let delta: Option<Vec<u8>> = match self.spec.ps_model {
            PsDgp::P3Stratified => Some(
                x.rows()
                    .into_iter()
                    .map(|row| u8::from(rng.random::<f64>() < sigmoid(row[0])))
                    .collect(),
            ),
            _ => None,
        };
        let r: Vec<u8> = (0..n)
            .map(|i| {
                let pi = match (&self.spec.ps_model, &delta) {
                    (PsDgp::P3Stratified, Some(d)) => {
                        if d[i] == 1 {
                            0.5 * self.spec.pi_n
                        } else {
                            1.5 * self.spec.pi_n
                        }
                    }
                    _ => {
                        let row = x.row(i);
                        self.propensity_value(row.as_slice().expect("row contiguous"))
                    }
                };
                u8::from(rng.random::<f64>() < pi)
            })
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let eps: f64 =
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                let row = x.row(i);
                Self::regression(
                    &self.beta,
                    &self.alpha,
                    &self.zeta,
                    row.as_slice().expect("row contiguous"),
                ) + eps
            })
            .collect();
        validate_sample(x, r, y, delta, SampleMode::MissingData)
    }
}

/// Convenience: resolve and generate in one call.
pub fn generate(
    spec: &DgpSpec,
    rng_stream: &RandomStream,
) -> Result<(SemiSupervisedSample, Truths)> {
    let dgp = ResolvedDgp::resolve(spec, rng_stream.seed)?;
    let sample = dgp.generate(rng_stream)?;
    let truths = dgp.truths();
    Ok((sample, truths))
}

/// One estimator row of a simulation table.
#[derive(Debug, Clone, PartialEq)]
pub enum RowKind {
    /// Mean of the observed outcomes.
    Naive,
    /// Doubly robust estimate with the true nuisance functions plugged in.
    Oracle,
    /// Cross-fitted doubly robust estimate; with `adjusted` the interval uses
    /// the propensity-estimation correction.
    Cell {
        ps: PsSpec,
        m: OutcomeSpec,
        adjusted: bool,
    },
}

impl RowKind {
    fn labels(&self) -> (String, String) {
        match self {
            RowKind::Naive => ("naive".into(), "naive".into()),
            RowKind::Oracle => ("oracle".into(), "oracle".into()),
            RowKind::Cell { ps, m, adjusted } => {
                let ps_label = if *adjusted {
                    format!("{ps}(adj)")
                } else {
                    ps.to_string()
                };
                (ps_label, m.to_string())
            }
        }
    }
}

/// A DGP together with the estimator grid evaluated on it.
#[derive(Clone)]
pub struct CampaignSetting {
    pub name: String,
    pub dgp: DgpSpec,
    pub rows: Vec<RowKind>,
    /// Cross-fitting fold count.
    pub k: usize,
    /// Tune the penalized propensity model once per replication on the whole
    /// sample and reuse the penalty across folds (the per-fold fits remain on
    /// the training complements). Keeps large grids tractable; per-fold
    /// tuning is restored by setting this to false.
    pub ps_lambda_per_sample: bool,
}

impl CampaignSetting {
    pub fn new(name: impl Into<String>, dgp: DgpSpec, rows: Vec<RowKind>) -> Self {
        CampaignSetting {
            name: name.into(),
            dgp,
            rows,
            k: 5,
            ps_lambda_per_sample: true,
        }
    }
}

/// Aggregated metrics of one estimator row.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRow {
    pub estimator_ps: String,
    pub estimator_m: String,
    pub bias: f64,
    pub rmse: f64,
    pub length: f64,
    pub coverage: f64,
    pub esd: f64,
    pub asd: f64,
    pub err_m: Option<f64>,
    pub err_pi: Option<f64>,
}

/// Aggregated Monte Carlo results for one setting.
#[derive(Debug, Clone)]
pub struct SimTable {
    pub setting: String,
    pub n: usize,
    pub p: usize,
    pub pi_n: f64,
    pub reps: usize,
    pub theta0: f64,
    pub alpha: f64,
    pub rows: Vec<SimRow>,
}

struct RepOutcome {
    theta: f64,
    v_hat: f64,
    length: f64,
    covered: bool,
    err_m: Option<f64>,
    err_pi: Option<f64>,
}

fn eval_rows_on_sample(
    sample: &SemiSupervisedSample,
    plan_seed: u64,
    k: usize,
    truths: &Truths,
    rows: &[RowKind],
    alpha: f64,
    ps_lambda_per_sample: bool,
) -> Result<Vec<RepOutcome>> {
    let n = sample.n();
    let plan = make_folds(n, k, plan_seed)?;
    let theta0 = truths.theta0;
    let true_m = truths.m_values(sample);
    let true_pi = truths.pi_values(sample);
    // Tune the penalized propensity once per sample if requested.
    let mut shared_lambda: Option<f64> = None;
    let needs_lambda = rows.iter().any(|r| {
        matches!(
            r,
            RowKind::Cell {
                ps: PsSpec::OffsetLogisticLasso { lambda: None },
                ..
            }
        )
    });
    if ps_lambda_per_sample && needs_lambda {
        let opts = OffsetLassoOptions {
            seed: plan_seed,
            ..OffsetLassoOptions::default()
        };
        shared_lambda = Some(select_lasso_penalty(sample.x(), sample.r(), &opts)?);
    }

    let mut memo: HashMap<String, (crate::estimators::NuisancePredictions, crate::estimators::MeanEstimate)> =
        HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let outcome = match row {
            RowKind::Naive => {
                let est = naive_labeled_mean(sample)?;
                let v = est.psi.iter().map(|p| p * p).sum::<f64>() / n as f64;
                let ci = confidence_interval(est.theta, v, n, alpha)?;
                RepOutcome {
                    theta: est.theta,
                    v_hat: v,
                    length: ci.1 - ci.0,
                    covered: ci.0 <= theta0 && theta0 <= ci.1,
                    err_m: None,
                    err_pi: None,
                }
            }
            RowKind::Oracle => {
                let key = "oracle".to_string();
                if !memo.contains_key(&key) {
                    let res = run_pipeline(
                        sample,
                        &plan,
                        &OutcomeSpec::Oracle,
                        &PsSpec::Oracle,
                        Some(truths),
                    )?;
                    memo.insert(key.clone(), res);
                }
                let (_, est) = &memo[&key];
                let v = est.psi.iter().map(|p| p * p).sum::<f64>() / n as f64;
                let ci = confidence_interval(est.theta, v, n, alpha)?;
                RepOutcome {
                    theta: est.theta,
                    v_hat: v,
                    length: ci.1 - ci.0,
                    covered: ci.0 <= theta0 && theta0 <= ci.1,
                    err_m: None,
                    err_pi: None,
                }
            }
            RowKind::Cell { ps, m, adjusted } => {
                let ps = match (ps, shared_lambda) {
                    (PsSpec::OffsetLogisticLasso { lambda: None }, Some(l)) => {
                        PsSpec::OffsetLogisticLasso { lambda: Some(l) }
                    }
                    (other, _) => other.clone(),
                };
                let key = format!("{ps:?}|{m:?}");
                if !memo.contains_key(&key) {
                    let res = run_pipeline(sample, &plan, m, &ps, Some(truths))?;
                    memo.insert(key.clone(), res);
                }
                let (preds, est) = &memo[&key];
                let v = if *adjusted {
                    let if_pi = match &ps {
                        PsSpec::Mcar => {
                            let fit = fit_mcar(sample.r())?;
                            adjusted_if_mcar(preds.m_hat(), fit.pi_hat, sample.r(), sample.y())
                        }
                        PsSpec::OffsetLogisticMle => {
                            let fit = fit_offset_logistic_mle(sample.x(), sample.r())?;
                            adjusted_if_offset_logistic(sample, preds, &fit, preds.m_hat())?
                        }
                        PsSpec::Stratified { highdim } => {
                            let delta = sample.delta().ok_or_else(|| {
                                Error::InvalidSpec("stratified row without stratum data".into())
                            })?;
                            let fit = fit_stratified(
                                sample.x(),
                                sample.r(),
                                delta,
                                *highdim,
                                plan_seed,
                            )?;
                            adjusted_if_stratified(sample, preds, &fit, preds.m_hat())?
                        }
                        other => {
                            return Err(Error::InvalidSpec(format!(
                                "no adjusted interval available for propensity model {other}"
                            )))
                        }
                    };
                    adjusted_variance(&est.psi, &if_pi)
                } else {
                    est.psi.iter().map(|p| p * p).sum::<f64>() / n as f64
                };
                let ci = confidence_interval(est.theta, v, n, alpha)?;
                let (err_m, err_pi) = err_diagnostics(preds, Some(&true_m), Some(&true_pi));
                RepOutcome {
                    theta: est.theta,
                    v_hat: v,
                    length: ci.1 - ci.0,
                    covered: ci.0 <= theta0 && theta0 <= ci.1,
                    err_m,
                    err_pi,
                }
            }
        };
        out.push(outcome);
    }
    Ok(out)
}

/// Run each setting for `reps` replications and aggregate per-row metrics.
/// Replications use streams derived from `(seed, setting index, rep)`, so
/// the results are identical for any thread count.
pub fn run_campaign(
    settings: &[CampaignSetting],
    reps: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<SimTable>> {
    let mut tables = Vec::with_capacity(settings.len());
    for (si, setting) in settings.iter().enumerate() {
        let dgp = ResolvedDgp::resolve(
            &setting.dgp,
            RandomStream::derived(seed, stream::CALIBRATION, si as u64).stream_id,
        )?;
        let truths = dgp.truths();
        let per_rep: Vec<Result<Vec<RepOutcome>>> = (0..reps)
            .into_par_iter()
            .map(|rep| {
                let rep_stream = RandomStream::derived(
                    seed,
                    stream::REPLICATION,
                    (si as u64) << 32 | rep as u64,
                );
                let sample = dgp.generate(&rep_stream)?;
                eval_rows_on_sample(
                    &sample,
                    rep_stream.stream_id,
                    setting.k,
                    &truths,
                    &setting.rows,
                    alpha,
                    setting.ps_lambda_per_sample,
                )
                .map_err(|e| Error::Campaign {
                    rep,
                    cell: setting.name.clone(),
                    source: Box::new(e),
                })
            })
            .collect();

        let n_rows = setting.rows.len();
        let mut collected: Vec<Vec<RepOutcome>> = (0..n_rows).map(|_| Vec::with_capacity(reps)).collect();
        for rep_result in per_rep {
            let rep_rows = rep_result?;
            for (j, outcome) in rep_rows.into_iter().enumerate() {
                collected[j].push(outcome);
            }
        }
        let theta0 = dgp.theta0();
        let n = setting.dgp.n;
        let rows: Vec<SimRow> = setting
            .rows
            .iter()
            .zip(collected)
            .map(|(kind, outs)| {
                let rf = reps as f64;
                let mean_theta = outs.iter().map(|o| o.theta).sum::<f64>() / rf;
                let bias = mean_theta - theta0;
                let rmse = (outs.iter().map(|o| (o.theta - theta0).powi(2)).sum::<f64>() / rf).sqrt();
                let esd = if reps > 1 {
                    (outs.iter().map(|o| (o.theta - mean_theta).powi(2)).sum::<f64>() / (rf - 1.0))
                        .sqrt()
                } else {
                    0.0
                };
                let asd = outs.iter().map(|o| (o.v_hat / n as f64).sqrt()).sum::<f64>() / rf;
                let length = outs.iter().map(|o| o.length).sum::<f64>() / rf;
                let coverage = outs.iter().filter(|o| o.covered).count() as f64 / rf;
                let mean_opt = |f: &dyn Fn(&RepOutcome) -> Option<f64>| -> Option<f64> {
                    let vals: Vec<f64> = outs.iter().filter_map(|o| f(o)).collect();
                    if vals.len() == outs.len() && !vals.is_empty() {
                        Some(vals.iter().sum::<f64>() / vals.len() as f64)
                    } else {
                        None
                    }
                };
                let (ps_label, m_label) = kind.labels();
                SimRow {
                    estimator_ps: ps_label,
                    estimator_m: m_label,
                    bias,
                    rmse,
                    length,
                    coverage,
                    esd,
                    asd,
                    err_m: mean_opt(&|o| o.err_m),
                    err_pi: mean_opt(&|o| o.err_pi),
                }
            })
            .collect();
        tables.push(SimTable {
            setting: setting.name.clone(),
            n,
            p: setting.dgp.p,
            pi_n: setting.dgp.pi_n,
            reps,
            theta0,
            alpha,
            rows,
        });
    }
    Ok(tables)
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

impl SimTable {
    pub fn row(&self, ps: &str, m: &str) -> Option<&SimRow> {
        self.rows
            .iter()
            .find(|r| r.estimator_ps == ps && r.estimator_m == m)
    }

    /// CSV with the fixed column order; floats carry 17 significant digits so
    /// a read-back reproduces them exactly.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(
            "estimator_ps,estimator_m,bias,rmse,length,coverage,esd,asd,err_m,err_pi\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.estimator_ps,
                r.estimator_m,
                fmt17(r.bias),
                fmt17(r.rmse),
                fmt17(r.length),
                fmt17(r.coverage),
                fmt17(r.esd),
                fmt17(r.asd),
                r.err_m.map(fmt17).unwrap_or_default(),
                r.err_pi.map(fmt17).unwrap_or_default(),
            ));
        }
        out
    }

    /// Parse rows back from [`SimTable::to_csv_string`] output.
    pub fn rows_from_csv(text: &str) -> Result<Vec<SimRow>> {
        let mut rows = Vec::new();
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::ParseError("empty csv".into()))?;
        if header != "estimator_ps,estimator_m,bias,rmse,length,coverage,esd,asd,err_m,err_pi" {
            return Err(Error::ParseError(format!("unexpected header: {header}")));
        }
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(Error::ParseError(format!("line {}: {} fields", ln + 2, f.len())));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::ParseError(format!("line {}: {e}", ln + 2)))
            };
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    num(s).map(Some)
                }
            };
            rows.push(SimRow {
                estimator_ps: f[0].to_string(),
                estimator_m: f[1].to_string(),
                bias: num(f[2])?,
                rmse: num(f[3])?,
                length: num(f[4])?,
                coverage: num(f[5])?,
                esd: num(f[6])?,
                asd: num(f[7])?,
                err_m: opt(f[8])?,
                err_pi: opt(f[9])?,
            });
        }
        Ok(rows)
    }

    /// Aligned markdown rendering for terminals and reports.
    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "### {} (N={}, p={}, pi={}, reps={}, theta0={:.4})\n\n",
            self.setting, self.n, self.p, self.pi_n, self.reps, self.theta0
        );
        out.push_str(
            "| ps | m | bias | rmse | length | coverage | esd | asd | err_m | err_pi |\n",
        );
        out.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {} | {} |\n",
                r.estimator_ps,
                r.estimator_m,
                r.bias,
                r.rmse,
                r.length,
                r.coverage,
                r.esd,
                r.asd,
                r.err_m.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
                r.err_pi.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
            ));
        }
        out
    }
}
