//! Average-treatment-effect estimation with extremely imbalanced arms:
//! per-arm doubly robust estimators, their difference, and repeated-split
//! median aggregation for real-data use.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_folds, stream, CrossFitPlan, RandomStream, SampleMode, SemiSupervisedSample};
use crate::error::{Error, Result};
use crate::estimators::{estimate_dr, fit_outcome_on, fit_ps_on, EstimatorKind, OutcomeSpec, PsSpec, Truths};
use crate::inference::confidence_interval;

/// Estimator choices for the two arms and the propensity model.
#[derive(Debug, Clone)]
pub struct AteSpecs {
    pub m1: OutcomeSpec,
    pub m0: OutcomeSpec,
    pub ps: PsSpec,
    pub alpha: f64,
    /// Floor `1 - pi_hat` at 1e-12 in the control-arm denominator instead of
    /// erroring; clips are counted and reported.
    pub floor_control_denominator: bool,
}

impl AteSpecs {
    pub fn new(m1: OutcomeSpec, m0: OutcomeSpec, ps: PsSpec) -> Self {
        AteSpecs {
            m1,
            m0,
            ps,
            alpha: 0.05,
            floor_control_denominator: false,
        }
    }
}

/// True nuisance functions for oracle rows in causal simulations.
pub struct AteTruths {
    pub m1: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub m0: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub pi: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub theta_ate: f64,
}

impl AteTruths {
    fn arm_truths(&self, arm: u8) -> Truths {
        Truths {
            m: if arm == 1 { self.m1.clone() } else { self.m0.clone() },
            pi: self.pi.clone(),
            theta0: 0.0,
        }
    }
}

/// Treated-arm mean `(1/N) sum_i [ m1_i + r_i/pi_i (y_i - m1_i) ]` with its
/// influence values; identical arithmetic to the doubly robust mean estimate.
pub fn estimate_theta1(
    sample: &SemiSupervisedSample,
    m1_hat: &[f64],
    pi_hat: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let est = estimate_dr(sample, m1_hat, pi_hat, EstimatorKind::Drss)?;
    Ok((est.theta, est.psi))
}

/// Control-arm mean `(1/N) sum_i [ m0_i + (1-r_i)/(1-pi_i) (y_i - m0_i) ]`.
/// Returns the estimate, its influence values, and the number of rows where
/// the control denominator was floored (always zero unless `floor` is set).
pub fn estimate_theta0(
    sample: &SemiSupervisedSample,
    m0_hat: &[f64],
    pi_hat: &[f64],
    floor: bool,
) -> Result<(f64, Vec<f64>, usize)> {
    let n = sample.n();
    if m0_hat.len() != n || pi_hat.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} rows but {} outcome and {} propensity predictions",
            n,
            m0_hat.len(),
            pi_hat.len()
        )));
    }
    let mut clipped = 0usize;
    let mut contrib = vec![0.0; n];
    for i in 0..n {
        let mut denom = 1.0 - pi_hat[i];
        if denom <= 0.0 {
            if floor {
                denom = 1e-12;
                clipped += 1;
            } else {
                return Err(Error::DegeneratePropensityOne { row: i });
            }
        }
        let mut v = m0_hat[i];
        if sample.r()[i] == 0 {
            v += (sample.y()[i] - m0_hat[i]) / denom;
        }
        contrib[i] = v;
    }
    let theta = contrib.iter().sum::<f64>() / n as f64;
    let psi = contrib.iter().map(|c| c - theta).collect();
    Ok((theta, psi, clipped))
}

/// Treatment-effect estimate with per-split detail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AteReport {
    pub theta1: f64,
    pub theta0: f64,
    pub theta_ate: f64,
    pub v_hat: f64,
    pub ci: (f64, f64),
    pub alpha: f64,
    pub n: usize,
    /// `(theta_ate_b, v_hat_b)` for each of the `b` splits.
    pub per_split: Vec<(f64, f64)>,
    pub b: usize,
    /// Rows where the control-arm denominator hit the floor, summed over
    /// folds and splits.
    pub clipped_rows: usize,
}

/// Cross-fitted doubly robust ATE estimate: per fold, the treated-arm
/// outcome model is fit on treated training rows, the control-arm model on
/// control training rows, and the propensity on all training rows.
pub fn estimate_ate(
    sample: &SemiSupervisedSample,
    plan: &CrossFitPlan,
    specs: &AteSpecs,
    truths: Option<&AteTruths>,
) -> Result<AteReport> {
    if sample.mode() != SampleMode::Causal {
        return Err(Error::InvalidSpec(
            "treatment-effect estimation requires a causal-mode sample".into(),
        ));
    }
    let n = sample.n();
    let k = plan.k();
    let truths1 = truths.map(|t| t.arm_truths(1));
    let truths0 = truths.map(|t| t.arm_truths(0));

    let fold_results: Vec<Result<(Vec<usize>, Vec<f64>, Vec<f64>, Vec<f64>)>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let train = plan.train_indices(fold);
            let eval = plan.eval_indices(fold);
            let treated: Vec<usize> = train.iter().copied().filter(|&i| sample.r()[i] == 1).collect();
            let control: Vec<usize> = train.iter().copied().filter(|&i| sample.r()[i] == 0).collect();
            if treated.is_empty() && !matches!(specs.m1, OutcomeSpec::Oracle) {
                return Err(Error::EmptyArmInTrainingFold { fold, arm: 1 });
            }
            if control.is_empty() && !matches!(specs.m0, OutcomeSpec::Oracle) {
                return Err(Error::EmptyArmInTrainingFold { fold, arm: 0 });
            }
            let s1 = RandomStream::derived(plan.seed(), stream::OUTCOME_CV, 2 * fold as u64).stream_id;
            let s0 =
                RandomStream::derived(plan.seed(), stream::OUTCOME_CV, 2 * fold as u64 + 1).stream_id;
            let sp = RandomStream::derived(plan.seed(), stream::PS_CV, fold as u64).stream_id;
            let m1 = fit_outcome_on(sample, &treated, &eval, &specs.m1, truths1.as_ref(), s1)
                .map_err(|e| e.in_fold(fold))?;
            let m0 = fit_outcome_on(sample, &control, &eval, &specs.m0, truths0.as_ref(), s0)
                .map_err(|e| e.in_fold(fold))?;
            let pi = fit_ps_on(sample, &train, &eval, &specs.ps, truths1.as_ref(), sp)
                .map_err(|e| e.in_fold(fold))?;
            Ok((eval, m1, m0, pi))
        })
        .collect();

    let mut m1_hat = vec![0.0; n];
    let mut m0_hat = vec![0.0; n];
    let mut pi_hat = vec![0.0; n];
    for fr in fold_results {
        let (eval, m1, m0, pi) = fr?;
        for (pos, &i) in eval.iter().enumerate() {
            m1_hat[i] = m1[pos];
            m0_hat[i] = m0[pos];
            pi_hat[i] = pi[pos];
        }
    }
    let (theta1, psi1) = estimate_theta1(sample, &m1_hat, &pi_hat)?;
    let (theta0, psi0, clipped) =
        estimate_theta0(sample, &m0_hat, &pi_hat, specs.floor_control_denominator)?;
    let theta_ate = theta1 - theta0;
    let v_hat = psi1
        .iter()
        .zip(&psi0)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64;
    let ci = confidence_interval(theta_ate, v_hat, n, specs.alpha)?;
    Ok(AteReport {
        theta1,
        theta0,
        theta_ate,
        v_hat,
        ci,
        alpha: specs.alpha,
        n,
        per_split: vec![(theta_ate, v_hat)],
        b: 1,
        clipped_rows: clipped,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let m = values.len();
    if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

/// Run [`estimate_ate`] over `b` independent fold splits and aggregate by
/// medians: the point estimate is the median of the split estimates and the
/// variance is `median_b (v_b + (theta_b - theta)^2)`, which folds split
/// variability into the reported uncertainty.
pub fn repeated_split_ate(
    sample: &SemiSupervisedSample,
    b: usize,
    k: usize,
    seed: u64,
    specs: &AteSpecs,
    truths: Option<&AteTruths>,
) -> Result<AteReport> {
    if b == 0 {
        return Err(Error::InvalidSpec("number of splits must be >= 1".into()));
    }
    let reports: Vec<Result<AteReport>> = (0..b)
        .into_par_iter()
        .map(|split| {
            let plan = make_folds(
                sample.n(),
                k,
                RandomStream::derived(seed, stream::SPLIT, split as u64).stream_id,
            )?;
            estimate_ate(sample, &plan, specs, truths)
        })
        .collect();
    let mut per_split = Vec::with_capacity(b);
    let mut theta1s = Vec::with_capacity(b);
    let mut theta0s = Vec::with_capacity(b);
    let mut clipped = 0usize;
    for rep in reports {
        let rep = rep?;
        per_split.push((rep.theta_ate, rep.v_hat));
        theta1s.push(rep.theta1);
        theta0s.push(rep.theta0);
        clipped += rep.clipped_rows;
    }
    let mut thetas: Vec<f64> = per_split.iter().map(|(t, _)| *t).collect();
    let theta_ate = median(&mut thetas);
    let mut vs: Vec<f64> = per_split
        .iter()
        .map(|(t, v)| v + (t - theta_ate) * (t - theta_ate))
        .collect();
    let v_hat = median(&mut vs);
    let ci = confidence_interval(theta_ate, v_hat, sample.n(), specs.alpha)?;
    Ok(AteReport {
        theta1: median(&mut theta1s),
        theta0: median(&mut theta0s),
        theta_ate,
        v_hat,
        ci,
        alpha: specs.alpha,
        n: sample.n(),
        per_split,
        b,
        clipped_rows: clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_sample;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::Rng;

    fn causal_sample() -> SemiSupervisedSample {
        let x = Array2::from_shape_vec((4, 1), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        validate_sample(
            x,
            vec![1, 0, 1, 0],
            vec![2.0, 5.0, 4.0, 7.0],
            None,
            SampleMode::Causal,
        )
        .unwrap()
    }

    #[test]
    fn theta1_hand_values() {
        let s = causal_sample();
        let (t1, psi1) = estimate_theta1(&s, &[1.0; 4], &[0.5; 4]).unwrap();
        assert_abs_diff_eq!(t1, 3.0, epsilon = 1e-15);
        let mean_psi: f64 = psi1.iter().sum::<f64>() / 4.0;
        assert!(mean_psi.abs() < 1e-14);
    }

    #[test]
    fn theta1_full_treatment_is_sample_mean() {
        let x = Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 2.0]).unwrap();
        let s = validate_sample(x, vec![1, 1, 1], vec![1.0, 2.0, 3.0], None, SampleMode::Causal)
            .unwrap();
        let (t1, _) = estimate_theta1(&s, &[9.0; 3], &[1.0; 3]).unwrap();
        assert_abs_diff_eq!(t1, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn theta1_ipw_collapse_to_treated_mean() {
        let s = causal_sample();
        let pi = vec![0.5; 4];
        let (t1, _) = estimate_theta1(&s, &[0.0; 4], &pi).unwrap();
        // Treated labeled mean is (2+4)/2 = 3.
        assert_abs_diff_eq!(t1, 3.0, epsilon = 1e-14);
    }

    #[test]
    fn theta0_hand_values() {
        let s = causal_sample();
        let (t0, _, clipped) = estimate_theta0(&s, &[6.0; 4], &[0.5; 4], false).unwrap();
        assert_abs_diff_eq!(t0, 6.0, epsilon = 1e-15);
        assert_eq!(clipped, 0);
    }

    #[test]
    fn theta0_all_control_is_sample_mean() {
        let x = Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 2.0]).unwrap();
        let s = validate_sample(x, vec![0, 0, 1], vec![1.0, 2.0, 6.0], None, SampleMode::Causal)
            .unwrap();
        // pi = 0 everywhere: every control row gets weight one.
        let (t0, _, _) = estimate_theta0(&s, &[4.0; 3], &[0.0; 3], false).unwrap();
        // (1 + 2 + 4)/3: the treated row contributes its model value only.
        assert_abs_diff_eq!(t0, 7.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn theta0_control_mean_collapse() {
        let s = causal_sample();
        let pi = vec![0.5; 4];
        let (t0, _, _) = estimate_theta0(&s, &[0.0; 4], &pi, false).unwrap();
        // Control mean is (5+7)/2 = 6.
        assert_abs_diff_eq!(t0, 6.0, epsilon = 1e-14);
    }

    #[test]
    fn theta0_degenerate_propensity() {
        let s = causal_sample();
        assert!(matches!(
            estimate_theta0(&s, &[0.0; 4], &[1.0, 0.5, 0.5, 0.5], false),
            Err(Error::DegeneratePropensityOne { row: 0 })
        ));
        let (_, _, clipped) = estimate_theta0(&s, &[0.0; 4], &[1.0, 0.5, 0.5, 0.5], true).unwrap();
        // Row 0 is treated so the floored weight never multiplies an outcome,
        // but the clip is still counted and surfaced.
        assert_eq!(clipped, 1);
    }

    fn random_causal(n: usize, seed: u64) -> SemiSupervisedSample {
        let mut rng = RandomStream::new(seed, 12).rng();
        let x = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
        let r: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.25)).collect();
        let y: Vec<f64> = x
            .rows()
            .into_iter()
            .zip(&r)
            .map(|(row, &ri)| row[0] + 2.0 * ri as f64 + 0.5 * rng.random::<f64>())
            .collect();
        validate_sample(x, r, y, None, SampleMode::Causal).unwrap()
    }

    #[test]
    fn ate_hand_pipeline_difference() {
        let s = causal_sample();
        let (t1, _) = estimate_theta1(&s, &[1.0; 4], &[0.5; 4]).unwrap();
        let (t0, _, _) = estimate_theta0(&s, &[6.0; 4], &[0.5; 4], false).unwrap();
        assert_abs_diff_eq!(t1 - t0, -3.0, epsilon = 1e-14);
    }

    #[test]
    fn arm_swap_antisymmetry() {
        let s = random_causal(240, 5);
        let plan = make_folds(s.n(), 3, 11).unwrap();
        let specs = AteSpecs::new(
            OutcomeSpec::LeastSquares { degree: 1 },
            OutcomeSpec::LeastSquares { degree: 1 },
            PsSpec::Mcar,
        );
        let rep = estimate_ate(&s, &plan, &specs, None).unwrap();
        assert_abs_diff_eq!(rep.theta_ate, rep.theta1 - rep.theta0, epsilon = 1e-15);

        let swapped = s.swap_arms().unwrap();
        let specs_sw = AteSpecs::new(specs.m0.clone(), specs.m1.clone(), specs.ps.clone());
        let rep_sw = estimate_ate(&swapped, &plan, &specs_sw, None).unwrap();
        assert!((rep.theta_ate + rep_sw.theta_ate).abs() < 1e-12);
    }

    #[test]
    fn outcome_shift_invariance() {
        let s = random_causal(200, 9);
        let plan = make_folds(s.n(), 4, 13).unwrap();
        let specs = AteSpecs::new(
            OutcomeSpec::LeastSquares { degree: 1 },
            OutcomeSpec::LeastSquares { degree: 1 },
            PsSpec::Mcar,
        );
        let rep = estimate_ate(&s, &plan, &specs, None).unwrap();

        let c = 17.5;
        let y_shift: Vec<f64> = s.y().iter().map(|v| v + c).collect();
        let s2 = validate_sample(
            s.x().to_owned(),
            s.r().to_vec(),
            y_shift,
            None,
            SampleMode::Causal,
        )
        .unwrap();
        let rep2 = estimate_ate(&s2, &plan, &specs, None).unwrap();
        assert!((rep2.theta1 - rep.theta1 - c).abs() < 1e-10);
        assert!((rep2.theta0 - rep.theta0 - c).abs() < 1e-10);
        assert!((rep2.theta_ate - rep.theta_ate).abs() < 1e-12);
    }

    #[test]
    fn repeated_split_single_split_matches_direct_call() {
        let s = random_causal(150, 21);
        let specs = AteSpecs::new(
            OutcomeSpec::LeastSquares { degree: 1 },
            OutcomeSpec::LeastSquares { degree: 1 },
            PsSpec::Mcar,
        );
        let rep_b1 = repeated_split_ate(&s, 1, 3, 42, &specs, None).unwrap();
        let plan = make_folds(s.n(), 3, RandomStream::derived(42, stream::SPLIT, 0).stream_id)
            .unwrap();
        let rep = estimate_ate(&s, &plan, &specs, None).unwrap();
        assert_eq!(rep_b1.theta_ate.to_bits(), rep.theta_ate.to_bits());
    }

    #[test]
    fn median_aggregation() {
        let mut vals = vec![10.0, 1.0, 2.0];
        assert_abs_diff_eq!(median(&mut vals), 2.0, epsilon = 1e-15);
        let mut vals = vec![4.0, 1.0, 2.0, 3.0];
        assert_abs_diff_eq!(median(&mut vals), 2.5, epsilon = 1e-15);
    }

    #[test]
    fn repeated_split_deterministic() {
        let s = random_causal(150, 33);
        let specs = AteSpecs::new(
            OutcomeSpec::LeastSquares { degree: 1 },
            OutcomeSpec::LeastSquares { degree: 1 },
            PsSpec::Mcar,
        );
        let a = repeated_split_ate(&s, 4, 3, 7, &specs, None).unwrap();
        let b = repeated_split_ate(&s, 4, 3, 7, &specs, None).unwrap();
        assert_eq!(a.theta_ate.to_bits(), b.theta_ate.to_bits());
        assert_eq!(a.v_hat.to_bits(), b.v_hat.to_bits());
    }
}
