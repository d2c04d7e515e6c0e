//! Minimal-set solvers, inlier selection and the refinement procedure.
//!
//! [`Estimator`] abstracts a model family (camera poses from 2D-3D
//! correspondences, or lines from 2D points) so that pool generation,
//! scoring, selection and the gradient machinery can be written once.

mod line;
mod p3p;
mod pnp;

pub use line::{fit_line_least_squares, solve_line_minimal, LineEstimator, LineModel, LinePoint};
pub use p3p::p3p;
pub use pnp::{solve_pnp_iterative, solve_pnp_iterative_traced, solve_pnp_minimal, PnpEstimator};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Ordered indices of the correspondences forming one minimal set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MinimalSet(pub Vec<usize>);

impl MinimalSet {
    pub fn new(indices: Vec<usize>, count: usize) -> Result<Self> {
        for (k, &i) in indices.iter().enumerate() {
            if i >= count {
                return Err(Error::DimensionMismatch {
                    expected: count,
                    got: i,
                });
            }
            if indices[..k].contains(&i) {
                return Err(Error::DegenerateConfiguration("repeated index in minimal set"));
            }
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Inlier threshold and stopping rules of the refinement loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementParams {
    /// Inlier threshold (px for poses).
    pub tau: f64,
    pub max_inliers: usize,
    /// Refinement stops and keeps the current model below this many inliers.
    pub min_inliers: usize,
    pub iterations: usize,
}

impl Default for RefinementParams {
    fn default() -> Self {
        Self {
            tau: 10.0,
            max_inliers: 100,
            min_inliers: 50,
            iterations: 8,
        }
    }
}

impl RefinementParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_inliers == 0 || self.min_inliers > self.max_inliers {
            return Err(Error::InvalidConfig(
                "refinement requires 0 < min_inliers <= max_inliers".into(),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("refinement needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// A model family fitted by sample consensus.
///
/// Data are kept in grid order; the position of a datum in the slice is its
/// grid index. Each datum carries a `coord_dim`-dimensional predicted
/// coordinate which is what the learned predictor outputs.
pub trait Estimator<T: Real>: Sync {
    type Model: Clone + Send + Sync + std::fmt::Debug;
    type Datum: Clone + Send + Sync;

    fn minimal_size(&self) -> usize;
    fn coord_dim(&self) -> usize;
    /// Length of the flat model parameter vector.
    fn model_dim(&self) -> usize;
    /// Saturation value of per-datum errors.
    fn cap(&self) -> T;

    fn coord<'a>(&self, d: &'a Self::Datum) -> &'a [T];
    fn coord_mut<'a>(&self, d: &'a mut Self::Datum) -> &'a mut [T];

    fn solve_minimal(&self, data: &[Self::Datum], set: &[usize]) -> Result<Self::Model>;
    /// The solution branch of [`Estimator::solve_minimal`] nearest to
    /// `near`, for data that moved only slightly since `near` was solved.
    /// Solvers with a cheaper local update override this.
    fn solve_minimal_local(&self, data: &[Self::Datum], set: &[usize], near: &Self::Model) -> Result<Self::Model> {
        let _ = near;
        self.solve_minimal(data, set)
    }
    /// Re-solves on a (usually larger) subset, starting from `init`.
    fn solve_refit(
        &self,
        data: &[Self::Datum],
        set: &[usize],
        init: &Self::Model,
    ) -> Result<Self::Model>;

    /// Error of every datum, each in `[0, cap]`.
    fn errors(&self, model: &Self::Model, data: &[Self::Datum]) -> Vec<T>;
    /// Errors plus the derivative of each error with respect to its own
    /// coordinate (flattened, `coord_dim` entries per datum); zero where the
    /// error is saturated.
    fn errors_with_coord_grads(&self, model: &Self::Model, data: &[Self::Datum]) -> (Vec<T>, Vec<T>);

    fn to_params(&self, model: &Self::Model) -> Vec<T>;
    fn from_params(&self, params: &[T]) -> Self::Model;
}

/// Indices with error below `tau`, keeping at most `max_inliers` of the
/// smallest errors (ties to the lower index). Returned in ascending order.
pub fn select_inliers<T: Real>(errors: &[T], params: &RefinementParams) -> Vec<usize> {
    let tau = T::lit(params.tau);
    let mut idx: Vec<usize> = (0..errors.len()).filter(|&i| errors[i] < tau).collect();
    if idx.len() > params.max_inliers {
        idx.sort_by(|&a, &b| {
            errors[a]
                .partial_cmp(&errors[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.truncate(params.max_inliers);
        idx.sort_unstable();
    }
    idx
}

/// Outcome of [`refine_traced`].
#[derive(Debug, Clone)]
pub struct Refinement<M> {
    pub model: M,
    /// Inlier set of the last completed round (empty if none was accepted).
    pub inliers: Vec<usize>,
    /// Union of the inlier sets of all completed rounds, ascending.
    pub support: Vec<usize>,
    pub rounds: usize,
    /// True when the loop stopped on the minimum-inlier rule.
    pub stopped_early: bool,
}

/// Iterated inlier selection and re-solving.
pub fn refine<T: Real, E: Estimator<T>>(
    estimator: &E,
    model: &E::Model,
    data: &[E::Datum],
    params: &RefinementParams,
) -> E::Model {
    refine_traced(estimator, model, data, params).model
}

pub fn refine_traced<T: Real, E: Estimator<T>>(
    estimator: &E,
    model: &E::Model,
    data: &[E::Datum],
    params: &RefinementParams,
) -> Refinement<E::Model> {
    let mut current = model.clone();
    let mut previous: Option<Vec<usize>> = None;
    let mut rounds = 0;
    let mut stopped_early = false;
    let mut support: Vec<usize> = Vec::new();
    for _ in 0..params.iterations {
        let inliers = select_inliers(&estimator.errors(&current, data), params);
        if inliers.len() < params.min_inliers {
            stopped_early = true;
            break;
        }
        if previous.as_ref() == Some(&inliers) {
            break;
        }
        match estimator.solve_refit(data, &inliers, &current) {
            Ok(m) => current = m,
            Err(_) => break,
        }
        rounds += 1;
        support.extend_from_slice(&inliers);
        previous = Some(inliers);
    }
    support.sort_unstable();
    support.dedup();
    Refinement {
        model: current,
        inliers: previous.unwrap_or_default(),
        support,
        rounds,
        stopped_early,
    }
}

/// Solves `A x = b` for a symmetric positive definite `A` (row-major,
/// `n x n`) by Cholesky. Returns `None` if `A` is not numerically SPD.
pub(crate) const SPD_MAX: usize = 6;

/// Cholesky solve of a small symmetric positive-definite system (`n <= 6`).
pub(crate) fn solve_spd<T: Real>(a: &[T], b: &[T], n: usize) -> Option<Vec<T>> {
    assert!(n <= SPD_MAX);
    let mut l = [T::zero(); SPD_MAX * SPD_MAX];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > T::zero()) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = [T::zero(); SPD_MAX];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}
