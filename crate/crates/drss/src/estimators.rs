//! Point estimators for the mean response: the naive labeled average,
//! regression and inverse-probability-weighting estimators, and the doubly
//! robust estimator combining both nuisances, together with the cross-fitting
//! pipeline that produces out-of-fold nuisance predictions.

use std::sync::Arc;

use rayon::prelude::*;

use crate::data::{stream, CrossFitPlan, RandomStream, SemiSupervisedSample};
use crate::error::{Error, Result};
use crate::linear_models::{fit_kernel_ridge, fit_lasso, fit_least_squares};
use crate::propensity::{
    fit_mcar, fit_offset_logistic_lasso, fit_offset_logistic_mle, fit_stratified,
    OffsetLassoOptions,
};

/// Cross-fitted nuisance predictions for every row: the prediction for row
/// `i` comes from models trained without row `i`'s fold.
#[derive(Debug, Clone)]
pub struct NuisancePredictions {
    m_hat: Vec<f64>,
    pi_hat: Vec<f64>,
    fold_of: Vec<usize>,
}

impl NuisancePredictions {
    pub fn new(m_hat: Vec<f64>, pi_hat: Vec<f64>, fold_of: Vec<usize>) -> Result<Self> {
        if m_hat.len() != pi_hat.len() || m_hat.len() != fold_of.len() {
            return Err(Error::DimensionMismatch(format!(
                "m_hat {}, pi_hat {}, fold_of {}",
                m_hat.len(),
                pi_hat.len(),
                fold_of.len()
            )));
        }
        for (i, &m) in m_hat.iter().enumerate() {
            if !m.is_finite() {
                return Err(Error::DimensionMismatch(format!(
                    "non-finite outcome prediction at row {i}"
                )));
            }
        }
        for (i, &p) in pi_hat.iter().enumerate() {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::NonpositivePropensity { row: i, value: p });
            }
        }
        Ok(NuisancePredictions { m_hat, pi_hat, fold_of })
    }

    pub fn m_hat(&self) -> &[f64] {
        &self.m_hat
    }

    pub fn pi_hat(&self) -> &[f64] {
        &self.pi_hat
    }

    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    /// `(1/N) sum_i 1/pi_hat_i`, the plug-in for the inverse effective
    /// labeling fraction.
    pub fn a_hat_inv(&self) -> f64 {
        self.pi_hat.iter().map(|p| 1.0 / p).sum::<f64>() / self.pi_hat.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Naive,
    Reg,
    Ipw,
    DrKnownPs,
    Drss,
}

/// A point estimate with its per-observation influence values evaluated at
/// the plug-in nuisances; `mean(psi) == 0` by construction.
#[derive(Debug, Clone)]
pub struct MeanEstimate {
    pub theta: f64,
    pub psi: Vec<f64>,
    pub kind: EstimatorKind,
}

/// Mean of the observed outcomes. Its influence values are those of the
/// doubly robust estimator with a constant outcome model equal to the
/// estimate itself and the marginal labeled fraction as propensity, which
/// reproduces the classical labeled-sample-mean standard error.
pub fn naive_labeled_mean(sample: &SemiSupervisedSample) -> Result<MeanEstimate> {
    let n_lab = sample.n_labeled();
    if n_lab == 0 {
        return Err(Error::EmptyLabeledSet);
    }
    let n = sample.n();
    let sum: f64 = sample
        .r()
        .iter()
        .zip(sample.y())
        .filter(|(&r, _)| r == 1)
        .map(|(_, &y)| y)
        .sum();
    let theta = sum / n_lab as f64;
    let scale = n as f64 / n_lab as f64;
    let psi: Vec<f64> = sample
        .r()
        .iter()
        .zip(sample.y())
        .map(|(&r, &y)| if r == 1 { scale * (y - theta) } else { 0.0 })
        .collect();
    Ok(MeanEstimate {
        theta,
        psi,
        kind: EstimatorKind::Naive,
    })
}

/// Average of the outcome-model predictions.
pub fn estimate_reg(sample: &SemiSupervisedSample, m_hat: &[f64]) -> Result<MeanEstimate> {
    let n = sample.n();
    if m_hat.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} rows but {} predictions",
            n,
            m_hat.len()
        )));
    }
    let theta = m_hat.iter().sum::<f64>() / n as f64;
    let psi = m_hat.iter().map(|m| m - theta).collect();
    Ok(MeanEstimate {
        theta,
        psi,
        kind: EstimatorKind::Reg,
    })
}

/// Inverse-probability-weighted mean of the observed outcomes.
pub fn estimate_ipw(sample: &SemiSupervisedSample, pi_hat: &[f64]) -> Result<MeanEstimate> {
    let n = sample.n();
    if pi_hat.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} rows but {} propensities",
            n,
            pi_hat.len()
        )));
    }
    for (i, &p) in pi_hat.iter().enumerate() {
        if !(p > 0.0) {
            return Err(Error::NonpositivePropensity { row: i, value: p });
        }
    }
    let mut acc = 0.0;
    for i in 0..n {
        if sample.r()[i] == 1 {
            acc += sample.y()[i] / pi_hat[i];
        }
    }
    let theta = acc / n as f64;
    let psi: Vec<f64> = (0..n)
        .map(|i| {
            let w = if sample.r()[i] == 1 {
                sample.y()[i] / pi_hat[i]
            } else {
                0.0
            };
            w - theta
        })
        .collect();
    Ok(MeanEstimate {
        theta,
        psi,
        kind: EstimatorKind::Ipw,
    })
}

/// Doubly robust mean estimate
/// `(1/N) sum_i [ m_i + r_i / pi_i * (y_i - m_i) ]` with influence values
/// `psi_i = m_i + r_i/pi_i (y_i - m_i) - theta`.
pub fn estimate_dr(
    sample: &SemiSupervisedSample,
    m_hat: &[f64],
    pi_hat: &[f64],
    kind: EstimatorKind,
) -> Result<MeanEstimate> {
    let n = sample.n();
    if m_hat.len() != n || pi_hat.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} rows but {} outcome and {} propensity predictions",
            n,
            m_hat.len(),
            pi_hat.len()
        )));
    }
    for (i, &p) in pi_hat.iter().enumerate() {
        if !(p > 0.0) {
            return Err(Error::NonpositivePropensity { row: i, value: p });
        }
    }
    let mut contrib = vec![0.0; n];
    for i in 0..n {
        let mut v = m_hat[i];
        if sample.r()[i] == 1 {
            v += (sample.y()[i] - m_hat[i]) / pi_hat[i];
        }
        contrib[i] = v;
    }
    let theta = contrib.iter().sum::<f64>() / n as f64;
    let psi = contrib.iter().map(|c| c - theta).collect();
    Ok(MeanEstimate { theta, psi, kind })
}

/// True nuisance functions for oracle rows in simulation studies.
pub struct Truths {
    pub m: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub pi: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub theta0: f64,
}

impl Truths {
    pub fn m_values(&self, sample: &SemiSupervisedSample) -> Vec<f64> {
        sample
            .x()
            .rows()
            .into_iter()
            .map(|row| (self.m)(row.as_slice().expect("row contiguous")))
            .collect()
    }

    pub fn pi_values(&self, sample: &SemiSupervisedSample) -> Vec<f64> {
        sample
            .x()
            .rows()
            .into_iter()
            .map(|row| (self.pi)(row.as_slice().expect("row contiguous")))
            .collect()
    }
}

/// Outcome-model choice for the cross-fitting pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeSpec {
    LeastSquares { degree: usize },
    Lasso { degree: usize },
    KernelRidge { bandwidth: Option<f64> },
    Oracle,
}

impl std::fmt::Display for OutcomeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OutcomeSpec::LeastSquares { degree: 1 } => write!(f, "LS"),
            OutcomeSpec::LeastSquares { degree: 2 } => write!(f, "poly"),
            OutcomeSpec::LeastSquares { degree } => write!(f, "poly{degree}"),
            OutcomeSpec::Lasso { degree: 1 } => write!(f, "Lasso"),
            OutcomeSpec::Lasso { degree: 2 } => write!(f, "poly-Lasso"),
            OutcomeSpec::Lasso { degree } => write!(f, "poly{degree}-Lasso"),
            OutcomeSpec::KernelRidge { .. } => write!(f, "RKHS"),
            OutcomeSpec::Oracle => write!(f, "oracle"),
        }
    }
}

/// Propensity-model choice for the cross-fitting pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum PsSpec {
    Mcar,
    OffsetLogisticMle,
    OffsetLogisticLasso { lambda: Option<f64> },
    Stratified { highdim: bool },
    Oracle,
}

impl std::fmt::Display for PsSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PsSpec::Mcar => write!(f, "constant"),
            PsSpec::OffsetLogisticMle => write!(f, "logistic"),
            PsSpec::OffsetLogisticLasso { .. } => write!(f, "log-Lasso"),
            PsSpec::Stratified { .. } => write!(f, "stratified"),
            PsSpec::Oracle => write!(f, "oracle"),
        }
    }
}

pub(crate) fn fit_outcome_on(
    sample: &SemiSupervisedSample,
    rows: &[usize],
    eval_rows: &[usize],
    spec: &OutcomeSpec,
    truths: Option<&Truths>,
    seed: u64,
) -> Result<Vec<f64>> {
    let x_eval = sample.x().select(ndarray::Axis(0), eval_rows);
    if matches!(spec, OutcomeSpec::Oracle) {
        let truths = truths.ok_or_else(|| {
            Error::InvalidSpec("oracle outcome model requested without true functions".into())
        })?;
        return Ok(x_eval
            .rows()
            .into_iter()
            .map(|row| (truths.m)(row.as_slice().expect("row contiguous")))
            .collect());
    }
    if rows.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    let x_fit = sample.x().select(ndarray::Axis(0), rows);
    let y_fit: Vec<f64> = rows.iter().map(|&i| sample.y()[i]).collect();
    match spec {
        OutcomeSpec::LeastSquares { degree } => {
            fit_least_squares(x_fit.view(), &y_fit, *degree)?.predict(x_eval.view())
        }
        OutcomeSpec::Lasso { degree } => {
            fit_lasso(x_fit.view(), &y_fit, *degree, 5, seed)?.predict(x_eval.view())
        }
        OutcomeSpec::KernelRidge { bandwidth } => {
            fit_kernel_ridge(x_fit.view(), &y_fit, *bandwidth, None, 5, seed)?
                .predict(x_eval.view())
        }
        OutcomeSpec::Oracle => unreachable!(),
    }
}

pub(crate) fn fit_ps_on(
    sample: &SemiSupervisedSample,
    train: &[usize],
    eval_rows: &[usize],
    spec: &PsSpec,
    truths: Option<&Truths>,
    seed: u64,
) -> Result<Vec<f64>> {
    let x_eval = sample.x().select(ndarray::Axis(0), eval_rows);
    match spec {
        PsSpec::Oracle => {
            let truths = truths.ok_or_else(|| {
                Error::InvalidSpec("oracle propensity requested without true functions".into())
            })?;
            Ok(x_eval
                .rows()
                .into_iter()
                .map(|row| (truths.pi)(row.as_slice().expect("row contiguous")))
                .collect())
        }
        PsSpec::Mcar => {
            let r_train: Vec<u8> = train.iter().map(|&i| sample.r()[i]).collect();
            let fit = fit_mcar(&r_train)?;
            Ok(vec![fit.pi_hat; eval_rows.len()])
        }
        PsSpec::OffsetLogisticMle => {
            let x_train = sample.x().select(ndarray::Axis(0), train);
            let r_train: Vec<u8> = train.iter().map(|&i| sample.r()[i]).collect();
            let fit = fit_offset_logistic_mle(x_train.view(), &r_train)?;
            fit.predict(x_eval.view())
        }
        PsSpec::OffsetLogisticLasso { lambda } => {
            let x_train = sample.x().select(ndarray::Axis(0), train);
            let r_train: Vec<u8> = train.iter().map(|&i| sample.r()[i]).collect();
            let opts = OffsetLassoOptions {
                lambda: *lambda,
                seed,
                ..OffsetLassoOptions::default()
            };
            let fit = fit_offset_logistic_lasso(x_train.view(), &r_train, &opts)?;
            fit.predict(x_eval.view())
        }
        PsSpec::Stratified { highdim } => {
            let delta = sample.delta().ok_or_else(|| {
                Error::InvalidSpec("stratified propensity requires stratum indicators".into())
            })?;
            let x_train = sample.x().select(ndarray::Axis(0), train);
            let r_train: Vec<u8> = train.iter().map(|&i| sample.r()[i]).collect();
            let d_train: Vec<u8> = train.iter().map(|&i| delta[i]).collect();
            let fit = fit_stratified(x_train.view(), &r_train, &d_train, *highdim, seed)?;
            fit.predict(x_eval.view())
        }
    }
}

fn annotate(err: Error, fold: usize) -> Error {
    match err {
        Error::EmptyLabeledSet => Error::NoLabeledInTrainingFold { fold },
        e => e.in_fold(fold),
    }
}

/// Cross-fitting pipeline: for each fold, fit both nuisances on the training
/// complement (the outcome model on its labeled rows only) and predict on the
/// held-out fold; assemble the predictions and return the doubly robust
/// estimate. A training complement without labeled rows is an error, never a
/// silent fallback.
pub fn run_pipeline(
    sample: &SemiSupervisedSample,
    plan: &CrossFitPlan,
    outcome_spec: &OutcomeSpec,
    ps_spec: &PsSpec,
    truths: Option<&Truths>,
) -> Result<(NuisancePredictions, MeanEstimate)> {
    let n = sample.n();
    if plan.assignment().len() != n {
        return Err(Error::DimensionMismatch(format!(
            "plan covers {} rows, sample has {}",
            plan.assignment().len(),
            n
        )));
    }
    let k = plan.k();
    let fold_results: Vec<Result<(Vec<usize>, Vec<f64>, Vec<f64>)>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let train = plan.train_indices(fold);
            let eval = plan.eval_indices(fold);
            let labeled_train: Vec<usize> = train
                .iter()
                .copied()
                .filter(|&i| sample.r()[i] == 1)
                .collect();
            if labeled_train.is_empty() && !matches!(outcome_spec, OutcomeSpec::Oracle) {
                return Err(Error::NoLabeledInTrainingFold { fold });
            }
            let m_seed = RandomStream::derived(plan.seed(), stream::OUTCOME_CV, fold as u64).stream_id;
            let ps_seed = RandomStream::derived(plan.seed(), stream::PS_CV, fold as u64).stream_id;
            let m_pred = fit_outcome_on(sample, &labeled_train, &eval, outcome_spec, truths, m_seed)
                .map_err(|e| annotate(e, fold))?;
            let pi_pred = fit_ps_on(sample, &train, &eval, ps_spec, truths, ps_seed)
                .map_err(|e| annotate(e, fold))?;
            Ok((eval, m_pred, pi_pred))
        })
        .collect();

    let mut m_hat = vec![0.0; n];
    let mut pi_hat = vec![0.0; n];
    for fr in fold_results {
        let (eval, m_pred, pi_pred) = fr?;
        for (pos, &i) in eval.iter().enumerate() {
            m_hat[i] = m_pred[pos];
            pi_hat[i] = pi_pred[pos];
        }
    }
    let preds = NuisancePredictions::new(m_hat, pi_hat, plan.assignment().to_vec())?;
    let kind = if matches!(ps_spec, PsSpec::Oracle) {
        EstimatorKind::DrKnownPs
    } else {
        EstimatorKind::Drss
    };
    let estimate = estimate_dr(sample, preds.m_hat(), preds.pi_hat(), kind)?;
    Ok((preds, estimate))
}
