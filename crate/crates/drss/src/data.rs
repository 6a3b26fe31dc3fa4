//! Validated dataset container, cross-fitting fold plans and seeded random
//! streams shared by every estimator in the crate.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How the label indicator is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// `r = 1` means the outcome is observed; outcomes with `r = 0` are absent.
    MissingData,
    /// `r` is a treatment indicator; outcomes are observed on every row.
    Causal,
}

/// An N x p covariate matrix with a binary label/treatment indicator and
/// (partially observed) outcomes.
///
/// Outcomes on rows where they are absent are stored as NaN so that any
/// accidental read poisons downstream results instead of silently passing.
#[derive(Debug, Clone)]
pub struct SemiSupervisedSample {
    x: Array2<f64>,
    r: Vec<u8>,
    y: Vec<f64>,
    delta: Option<Vec<u8>>,
    mode: SampleMode,
}

impl SemiSupervisedSample {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    /// Row-major contiguous covariate storage.
    pub fn x_slice(&self) -> &[f64] {
        self.x.as_slice().expect("covariates are standard layout")
    }

    pub fn r(&self) -> &[u8] {
        &self.r
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn delta(&self) -> Option<&[u8]> {
        self.delta.as_deref()
    }

    pub fn mode(&self) -> SampleMode {
        self.mode
    }

    pub fn n_labeled(&self) -> usize {
        self.r.iter().map(|&r| r as usize).sum()
    }

    /// Swap the roles of the two arms: `r -> 1 - r`. Only meaningful in causal
    /// mode where outcomes exist on every row.
    pub fn swap_arms(&self) -> Result<SemiSupervisedSample> {
        if self.mode != SampleMode::Causal {
            return Err(Error::InvalidSpec(
                "arm swap requires a causal-mode sample".into(),
            ));
        }
        let r: Vec<u8> = self.r.iter().map(|&r| 1 - r).collect();
        validate_sample(self.x.clone(), r, self.y.clone(), self.delta.clone(), self.mode)
    }
}

/// Validate raw arrays into a [`SemiSupervisedSample`]. Never repairs data:
/// any violation is reported as an error.
///
/// In missing-data mode, outcomes on unlabeled rows may be anything (NaN
/// included) and are replaced by NaN in the stored sample. In causal mode
/// every outcome must be finite.
pub fn validate_sample(
    x: Array2<f64>,
    r: Vec<u8>,
    y: Vec<f64>,
    delta: Option<Vec<u8>>,
    mode: SampleMode,
) -> Result<SemiSupervisedSample> {
    let n = x.nrows();
    if r.len() != n || y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "X has {} rows but r has {} and y has {}",
            n,
            r.len(),
            y.len()
        )));
    }
    if let Some(d) = &delta {
        if d.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "X has {} rows but delta has {}",
                n,
                d.len()
            )));
        }
        if let Some(bad) = d.iter().position(|&v| v > 1) {
            return Err(Error::SchemaViolation {
                row: bad,
                message: "stratum indicator must be 0 or 1".into(),
            });
        }
    }
    if let Some(bad) = r.iter().position(|&v| v > 1) {
        return Err(Error::SchemaViolation {
            row: bad,
            message: "label indicator must be 0 or 1".into(),
        });
    }
    for (i, row) in x.rows().into_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteCovariate { row: i, col: j });
            }
        }
    }
    let mut y = y;
    for i in 0..n {
        let observed = match mode {
            SampleMode::MissingData => r[i] == 1,
            SampleMode::Causal => true,
        };
        if observed {
            if !y[i].is_finite() {
                return Err(Error::MissingLabeledOutcome { row: i });
            }
        } else {
            y[i] = f64::NAN;
        }
    }
    if r.iter().all(|&v| v == 0) {
        return Err(Error::EmptyLabeledSet);
    }
    let x = if x.is_standard_layout() {
        x
    } else {
        x.as_standard_layout().into_owned()
    };
    Ok(SemiSupervisedSample { x, r, y, delta, mode })
}

/// A K-fold random partition of row indices, reproducible from `(N, K, seed)`.
#[derive(Debug, Clone)]
pub struct CrossFitPlan {
    k: usize,
    assignment: Vec<usize>,
    seed: u64,
}

impl CrossFitPlan {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Zero-based fold of row `i`.
    pub fn fold_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Rows belonging to fold `k`, in increasing order.
    pub fn eval_indices(&self, k: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == k)
            .collect()
    }

    /// Rows in the training complement of fold `k`, in increasing order.
    pub fn train_indices(&self, k: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != k)
            .collect()
    }
}

/// Shuffle indices with the stream derived from `seed`, then deal them
/// round-robin across folds, so fold sizes differ by at most one.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<CrossFitPlan> {
    if k < 2 || k > n {
        return Err(Error::InvalidFoldCount { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RandomStream::new(seed, stream::FOLDS).rng();
    order.shuffle(&mut rng);
    let mut assignment = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % k;
    }
    Ok(CrossFitPlan { k, assignment, seed })
}

/// A (seed, stream) pair addressing one reproducible random sequence.
///
/// Distinct stream ids on the same seed yield independent sequences, and the
/// generator is platform-independent, so any unit of work that derives its own
/// stream is immune to scheduling order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RandomStream { seed, stream_id }
    }

    /// Derive a sub-stream for `(tag, index)`; stable across platforms.
    pub fn derived(seed: u64, tag: u64, index: u64) -> Self {
        RandomStream {
            seed,
            stream_id: mix64(tag ^ mix64(index)),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Purpose tags for derived streams. Values are arbitrary but frozen.
pub mod stream {
    pub const FOLDS: u64 = 0x01;
    pub const OUTCOME_CV: u64 = 0x02;
    pub const PS_CV: u64 = 0x03;
    pub const REPLICATION: u64 = 0x04;
    pub const SPLIT: u64 = 0x05;
    pub const CALIBRATION: u64 = 0x06;
}

/// SplitMix64 finalizer; bijective on u64.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn validates_well_formed_input() {
        let x = array![[0.1, 1.0], [0.2, -1.0], [0.3, 2.0]];
        let s = validate_sample(
            x,
            vec![1, 0, 1],
            vec![2.0, f64::NAN, 4.0],
            None,
            SampleMode::MissingData,
        )
        .unwrap();
        assert_eq!(s.n(), 3);
        assert_eq!(s.p(), 2);
        assert_eq!(s.n_labeled(), 2);
        assert!(s.y()[1].is_nan());
    }

    #[test]
    fn rejects_nan_covariate() {
        let x = array![[0.1], [f64::NAN]];
        let err = validate_sample(x, vec![1, 0], vec![1.0, 0.0], None, SampleMode::MissingData)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteCovariate { row: 1, col: 0 }));
    }

    #[test]
    fn rejects_empty_labeled_set() {
        let x = array![[0.1], [0.2], [0.3]];
        let err = validate_sample(
            x,
            vec![0, 0, 0],
            vec![1.0, 2.0, 3.0],
            None,
            SampleMode::MissingData,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyLabeledSet));
    }

    #[test]
    fn rejects_missing_labeled_outcome() {
        let x = array![[0.1], [0.2]];
        let err = validate_sample(
            x,
            vec![1, 1],
            vec![1.0, f64::NAN],
            None,
            SampleMode::MissingData,
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingLabeledOutcome { row: 1 }));
    }

    #[test]
    fn folds_divisible_case() {
        let plan = make_folds(10, 5, 7).unwrap();
        for k in 0..5 {
            assert_eq!(plan.eval_indices(k).len(), 2);
        }
    }

    #[test]
    fn folds_remainder_spread() {
        let plan = make_folds(11, 5, 7).unwrap();
        let mut sizes: Vec<usize> = (0..5).map(|k| plan.eval_indices(k).len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn folds_deterministic() {
        let a = make_folds(4, 2, 1).unwrap();
        let b = make_folds(4, 2, 1).unwrap();
        assert_eq!(a.assignment(), b.assignment());
    }

    #[test]
    fn folds_partition_all_indices() {
        for seed in 0..5u64 {
            let n = 23;
            let plan = make_folds(n, 4, seed).unwrap();
            let mut seen = vec![false; n];
            for k in 0..4 {
                for i in plan.eval_indices(k) {
                    assert!(!seen[i]);
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn invalid_fold_count() {
        assert!(matches!(
            make_folds(5, 1, 0).unwrap_err(),
            Error::InvalidFoldCount { .. }
        ));
        assert!(matches!(
            make_folds(5, 6, 0).unwrap_err(),
            Error::InvalidFoldCount { .. }
        ));
    }

    #[test]
    fn streams_reproducible_and_distinct() {
        let a: Vec<f64> = {
            let mut rng = RandomStream::new(42, 1).rng();
            (0..8).map(|_| rng.random::<f64>()).collect()
        };
        let b: Vec<f64> = {
            let mut rng = RandomStream::new(42, 1).rng();
            (0..8).map(|_| rng.random::<f64>()).collect()
        };
        let c: Vec<f64> = {
            let mut rng = RandomStream::new(42, 2).rng();
            (0..8).map(|_| rng.random::<f64>()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
