//! Derivatives of the selection step and finite-difference machinery for the
//! non-differentiable solvers.
//!
//! Per-hypothesis quantities are indexed by position in the score
//! distribution (`dist.support[k]` is the pool position). A [`Gradient`]
//! carries the predictor side in `d_w` and the scorer side in `d_v`; the
//! per-image pipeline fills `d_w` with derivatives in the predicted
//! coordinates and maps them to network parameters afterwards.

mod pipeline;

pub use pipeline::{
    differentiate_pose_pipeline, dsac_expected_loss, image_gradient, infer, infer_with, loss_param_grad, GradientNeeds,
    ImageGradient, Inference, PipelineConfig,
};

use std::collections::HashMap;

use rand::Rng;

use crate::consensus::ScoreDistribution;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    pub d_w: Vec<T>,
    pub d_v: Vec<T>,
}

impl<T: Real> Gradient<T> {
    pub fn zeros(nw: usize, nv: usize) -> Self {
        Self {
            d_w: vec![T::zero(); nw],
            d_v: vec![T::zero(); nv],
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: T, other: &Gradient<T>) {
        for (a, &b) in self.d_w.iter_mut().zip(&other.d_w) {
            *a += alpha * b;
        }
        for (a, &b) in self.d_v.iter_mut().zip(&other.d_v) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        self.d_w.iter_mut().chain(self.d_v.iter_mut()).for_each(|v| *v *= alpha);
    }

    /// `d_w` followed by `d_v`.
    pub fn flat(&self) -> Vec<T> {
        self.d_w.iter().chain(&self.d_v).copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.d_w.iter().chain(&self.d_v).all(|v| v.is_finite())
    }

    fn check_shape(&self, other: &Gradient<T>) -> Result<()> {
        if self.d_w.len() != other.d_w.len() {
            return Err(Error::DimensionMismatch {
                expected: self.d_w.len(),
                got: other.d_w.len(),
            });
        }
        if self.d_v.len() != other.d_v.len() {
            return Err(Error::DimensionMismatch {
                expected: self.d_v.len(),
                got: other.d_v.len(),
            });
        }
        Ok(())
    }
}

/// Dense row-major Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian<T> {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<T>,
}

impl<T: Real> Jacobian<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![T::zero(); rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.values[r * self.cols + c] = v;
    }

    /// `u^T J`.
    pub fn left_mul(&self, u: &[T]) -> Vec<T> {
        assert_eq!(u.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (r, &ur) in u.iter().enumerate() {
            if ur == T::zero() {
                continue;
            }
            let row = &self.values[r * self.cols..(r + 1) * self.cols];
            for (o, &j) in out.iter_mut().zip(row) {
                *o += ur * j;
            }
        }
        out
    }
}

/// A Jacobian over a subset of input coordinates: column `k` is the
/// derivative with respect to input `columns[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalJacobian<T> {
    pub columns: Vec<usize>,
    pub jacobian: Jacobian<T>,
}

impl<T: Real> LocalJacobian<T> {
    /// Adds `u^T J` into the matching entries of a full-length vector.
    pub fn left_mul_into(&self, u: &[T], alpha: T, out: &mut [T]) {
        let local = self.jacobian.left_mul(u);
        for (&c, v) in self.columns.iter().zip(local) {
            out[c] += alpha * v;
        }
    }
}

/// `∂P_J = P_J (∂s_J - Σ_J' P_J' ∂s_J')` for every hypothesis.
pub fn softmax_weight_grad<T: Real>(dist: &ScoreDistribution<T>, score_grads: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let mean = expected_score_grad(dist, score_grads)?;
    Ok(dist
        .probs
        .iter()
        .zip(score_grads)
        .map(|(&p, g)| g.iter().zip(&mean).map(|(&gi, &mi)| p * (gi - mi)).collect())
        .collect())
}

/// `∂ log P_J = ∂s_J - Σ_J' P_J' ∂s_J'`, `chosen` a position in `dist`.
pub fn log_prob_grad<T: Real>(dist: &ScoreDistribution<T>, score_grads: &[Vec<T>], chosen: usize) -> Result<Vec<T>> {
    let mean = expected_score_grad(dist, score_grads)?;
    let g = score_grads.get(chosen).ok_or(Error::DimensionMismatch {
        expected: score_grads.len(),
        got: chosen,
    })?;
    Ok(g.iter().zip(&mean).map(|(&a, &b)| a - b).collect())
}

fn expected_score_grad<T: Real>(dist: &ScoreDistribution<T>, score_grads: &[Vec<T>]) -> Result<Vec<T>> {
    if score_grads.len() != dist.len() {
        return Err(Error::DimensionMismatch {
            expected: dist.len(),
            got: score_grads.len(),
        });
    }
    let dim = score_grads.first().map_or(0, Vec::len);
    let mut mean = vec![T::zero(); dim];
    for (&p, g) in dist.probs.iter().zip(score_grads) {
        if g.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: g.len(),
            });
        }
        for (m, &gi) in mean.iter_mut().zip(g) {
            *m += p * gi;
        }
    }
    Ok(mean)
}

fn expected_gradient<T: Real>(dist: &ScoreDistribution<T>, score_grads: &[Gradient<T>]) -> Result<Gradient<T>> {
    if score_grads.len() != dist.len() || score_grads.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: dist.len(),
            got: score_grads.len(),
        });
    }
    let mut mean = Gradient::zeros(score_grads[0].d_w.len(), score_grads[0].d_v.len());
    for (&p, g) in dist.probs.iter().zip(score_grads) {
        mean.check_shape(g)?;
        mean.add_scaled(p, g);
    }
    Ok(mean)
}

/// Per-hypothesis loss and its pathwise derivative, as produced by the
/// caller's loss routine for a position in the distribution.
pub type LossTerm<T> = (T, Gradient<T>);

/// `Σ_J P_J [ℓ_J ∂log P_J + ∂ℓ_J]`, enumerating the whole support.
pub fn dsac_grad_exact<T, F>(
    dist: &ScoreDistribution<T>,
    score_grads: &[Gradient<T>],
    mut loss: F,
    limit: usize,
) -> Result<Gradient<T>>
where
    T: Real,
    F: FnMut(usize) -> Result<LossTerm<T>>,
{
    if dist.len() > limit {
        return Err(Error::PoolTooLarge {
            size: dist.len(),
            limit,
        });
    }
    let mean = expected_gradient(dist, score_grads)?;
    let mut total = Gradient::zeros(mean.d_w.len(), mean.d_v.len());
    for (k, &p) in dist.probs.iter().enumerate() {
        if p == T::zero() {
            continue;
        }
        let (l, dl) = loss(k)?;
        mean.check_shape(&dl)?;
        total.add_scaled(p * l, &score_grads[k]);
        total.add_scaled(-p * l, &mean);
        total.add_scaled(p, &dl);
    }
    Ok(total)
}

/// Monte-Carlo estimate of [`dsac_grad_exact`] from `k` draws. The loss
/// routine is called once per distinct drawn hypothesis.
pub fn dsac_grad_sampled<T, F, R>(
    dist: &ScoreDistribution<T>,
    score_grads: &[Gradient<T>],
    loss: F,
    k: usize,
    rng: &mut R,
) -> Result<Gradient<T>>
where
    T: Real,
    F: FnMut(usize) -> Result<LossTerm<T>>,
    R: Rng + ?Sized,
{
    dsac_grad_sampled_with_stats(dist, score_grads, loss, k, rng).map(|s| s.mean)
}

/// Sample mean and its per-parameter standard error.
#[derive(Debug, Clone)]
pub struct SampledGradient<T> {
    pub mean: Gradient<T>,
    pub std_err: Gradient<T>,
    /// Mean loss over the draws.
    pub mean_loss: T,
}

pub fn dsac_grad_sampled_with_stats<T, F, R>(
    dist: &ScoreDistribution<T>,
    score_grads: &[Gradient<T>],
    mut loss: F,
    k: usize,
    rng: &mut R,
) -> Result<SampledGradient<T>>
where
    T: Real,
    F: FnMut(usize) -> Result<LossTerm<T>>,
    R: Rng + ?Sized,
{
    if k == 0 {
        return Err(Error::InvalidConfig("at least one sample is needed".into()));
    }
    let mean_score = expected_gradient(dist, score_grads)?;
    let (nw, nv) = (mean_score.d_w.len(), mean_score.d_v.len());
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for _ in 0..k {
        *counts.entry(dist.sample(rng)).or_insert(0) += 1;
    }
    let mut drawn: Vec<(usize, usize)> = counts.into_iter().collect();
    drawn.sort_unstable();

    let kt = T::from_usize(k).unwrap();
    let mut terms = Vec::with_capacity(drawn.len());
    let mut sum = Gradient::zeros(nw, nv);
    let mut loss_sum = T::zero();
    for (j, count) in drawn {
        let (l, dl) = loss(j)?;
        mean_score.check_shape(&dl)?;
        // one draw's contribution: l (∂s_j - E∂s) + ∂l_j
        let mut term = dl;
        term.add_scaled(l, &score_grads[j]);
        term.add_scaled(-l, &mean_score);
        let c = T::from_usize(count).unwrap();
        sum.add_scaled(c, &term);
        loss_sum += c * l;
        terms.push((c, term));
    }
    sum.scale(T::one() / kt);
    // second pass about the mean, the one-pass form cancels badly
    let mut sq = Gradient::zeros(nw, nv);
    for (c, term) in &terms {
        for (s, (&t, &m)) in sq.d_w.iter_mut().zip(term.d_w.iter().zip(&sum.d_w)) {
            *s += *c * (t - m) * (t - m);
        }
        for (s, (&t, &m)) in sq.d_v.iter_mut().zip(term.d_v.iter().zip(&sum.d_v)) {
            *s += *c * (t - m) * (t - m);
        }
    }
    let se = |sq: &[T]| -> Vec<T> {
        sq.iter()
            .map(|&si| {
                if k < 2 {
                    T::zero()
                } else {
                    (si / (kt - T::one()) / kt).sqrt()
                }
            })
            .collect()
    };
    let std_err = Gradient {
        d_w: se(&sq.d_w),
        d_v: se(&sq.d_v),
    };
    Ok(SampledGradient {
        mean: sum,
        std_err,
        mean_loss: loss_sum / kt,
    })
}

/// Inputs of [`softam_grad`]. `models[k]` are the parameters of hypothesis
/// `k`, `model_jacobians[k]` its derivative in the predictor-side inputs,
/// `score_grads[k]` the derivatives of its score. `loss_grad` is `∂ℓ/∂ĥ` at
/// the refined average, `refine_wrt_model` is `∂R/∂h̄` and
/// `refine_wrt_inputs` is `∂R/∂Y` at fixed `h̄`.
pub struct SoftAmTerms<'a, T> {
    pub dist: &'a ScoreDistribution<T>,
    pub models: &'a [Vec<T>],
    pub model_jacobians: &'a [LocalJacobian<T>],
    pub score_grads: &'a [Gradient<T>],
    pub loss_grad: &'a [T],
    pub refine_wrt_model: &'a Jacobian<T>,
    pub refine_wrt_inputs: &'a LocalJacobian<T>,
}

/// Total derivative of `ℓ(R(h̄, Y))` with `h̄ = Σ_J P_J h_J`:
/// `∂ℓ/∂ĥ (∂R/∂h̄ ∂h̄ + ∂R/∂Y)` and
/// `∂h̄ = Σ_J (∂P_J h_J + P_J ∂h_J)`.
pub fn softam_grad<T: Real>(terms: &SoftAmTerms<'_, T>) -> Result<Gradient<T>> {
    let n = terms.dist.len();
    if terms.models.len() != n || terms.model_jacobians.len() != n || terms.score_grads.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: terms.models.len().min(terms.model_jacobians.len()).min(terms.score_grads.len()),
        });
    }
    let md = terms.loss_grad.len();
    let rm = terms.refine_wrt_model;
    if rm.rows != md || rm.cols != md || terms.refine_wrt_inputs.jacobian.rows != md {
        return Err(Error::DimensionMismatch {
            expected: md,
            got: rm.rows,
        });
    }
    // gradient arriving at the average hypothesis
    let g_avg = rm.left_mul(terms.loss_grad);
    let mean = expected_gradient(terms.dist, terms.score_grads)?;
    let mut out = Gradient::zeros(mean.d_w.len(), mean.d_v.len());

    // weights enter through ∂P_J = P_J (∂s_J - E∂s); with a_J = g·h_J this
    // is Σ_J P_J (a_J - ā) ∂s_J
    let a: Vec<T> = terms
        .models
        .iter()
        .map(|h| {
            if h.len() != md {
                return Err(Error::DimensionMismatch {
                    expected: md,
                    got: h.len(),
                });
            }
            Ok(h.iter().zip(&g_avg).map(|(&x, &y)| x * y).sum())
        })
        .collect::<Result<_>>()?;
    let a_bar: T = terms.dist.probs.iter().zip(&a).map(|(&p, &ak)| p * ak).sum();
    for k in 0..n {
        let p = terms.dist.probs[k];
        out.add_scaled(p * (a[k] - a_bar), &terms.score_grads[k]);
        let mj = &terms.model_jacobians[k];
        if mj.jacobian.rows != md {
            return Err(Error::DimensionMismatch {
                expected: md,
                got: mj.jacobian.rows,
            });
        }
        mj.left_mul_into(&g_avg, p, &mut out.d_w);
    }
    terms
        .refine_wrt_inputs
        .left_mul_into(terms.loss_grad, T::one(), &mut out.d_w);
    Ok(out)
}

/// Central-difference Jacobian of `f` at `x`. Each coordinate is included
/// independently with probability `fraction`; included columns are divided
/// by `fraction` so the estimate is unbiased, the rest stay zero. Columns
/// where `f` fails or returns non-finite values are skipped.
pub fn central_difference<T, F, R>(f: F, x: &[T], step: T, fraction: f64, rng: &mut R) -> Result<Jacobian<T>>
where
    T: Real,
    F: FnMut(&[T]) -> Result<Vec<T>>,
    R: Rng + ?Sized,
{
    let columns: Vec<usize> = (0..x.len()).collect();
    central_difference_columns(f, x, &columns, step, fraction, rng).map(|l| l.jacobian)
}

/// [`central_difference`] restricted to the listed input coordinates.
pub fn central_difference_columns<T, F, R>(
    mut f: F,
    x: &[T],
    columns: &[usize],
    step: T,
    fraction: f64,
    rng: &mut R,
) -> Result<LocalJacobian<T>>
where
    T: Real,
    F: FnMut(&[T]) -> Result<Vec<T>>,
    R: Rng + ?Sized,
{
    if !(step > T::zero()) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig("subsample fraction must lie in (0, 1]".into()));
    }
    let base = f(x)?;
    if base.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteOutput);
    }
    let rows = base.len();
    let mut jac = Jacobian::zeros(rows, columns.len());
    let scale = T::one() / (T::lit(2.0) * step * T::lit(fraction));
    let mut work = x.to_vec();
    for (k, &c) in columns.iter().enumerate() {
        if fraction < 1.0 && !rng.gen_bool(fraction) {
            continue;
        }
        let orig = work[c];
        work[c] = orig + step;
        let plus = f(&work);
        work[c] = orig - step;
        let minus = f(&work);
        work[c] = orig;
        match (plus, minus) {
            (Ok(p), Ok(m)) if p.len() == rows && m.len() == rows && p.iter().chain(&m).all(|v| v.is_finite()) => {
                for r in 0..rows {
                    jac.set(r, k, (p[r] - m[r]) * scale);
                }
            }
            _ => log::debug!("central difference: column {c} skipped ({})", Error::NonFiniteOutput),
        }
    }
    Ok(LocalJacobian {
        columns: columns.to_vec(),
        jacobian: jac,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::softmax;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
        num / den
    }

    /// Scores linear in a parameter vector: s_J = <A_J, θ>.
    fn linear_scores(a: &[Vec<f64>], theta: &[f64]) -> Vec<f64> {
        a.iter().map(|row| row.iter().zip(theta).map(|(x, y)| x * y).sum()).collect()
    }

    #[test]
    fn softmax_weight_grad_examples() {
        let dist = softmax(&[0.3, -1.0, 2.0]);
        let same = vec![vec![1.0f64, -2.0]; 3];
        for row in softmax_weight_grad(&dist, &same).unwrap() {
            assert!(row.iter().all(|v| v.abs() < 1e-15));
        }
        let peaked = softmax(&[10.0, 0.0, 0.0]);
        let bump_first = vec![vec![1.0], vec![0.0], vec![0.0]];
        assert!(softmax_weight_grad(&peaked, &bump_first).unwrap()[0][0] > 0.0);
        assert!(softmax_weight_grad(&dist, &same[..2]).is_err());
    }

    #[test]
    fn log_prob_grad_two_class_closed_form() {
        // s = (θ, 0): log P_0 = log sigmoid(θ), derivative 1 - sigmoid(θ)
        for theta in [-3.0, -0.5, 0.0, 1.2, 4.0] {
            let dist = softmax(&[theta, 0.0]);
            let g = log_prob_grad(&dist, &[vec![1.0], vec![0.0]], 0).unwrap();
            let sig = 1.0 / (1.0 + (-theta as f64).exp());
            assert_abs_diff_eq!(g[0], 1.0 - sig, epsilon = 1e-14);
        }
        let uniform = softmax(&[0.0, 0.0]);
        let g = log_prob_grad(&uniform, &[vec![1.0], vec![-1.0]], 0).unwrap();
        // symmetric gradients average to zero, leaving the own term
        assert_abs_diff_eq!(g[0], 1.0, epsilon = 1e-15);
        let sym = log_prob_grad(&uniform, &[vec![0.5], vec![0.5]], 1).unwrap();
        assert_eq!(sym, vec![0.0]);
    }

    #[test]
    fn dsac_exact_examples() {
        let dist = softmax(&[1.0]);
        let sg = vec![Gradient {
            d_w: vec![3.0],
            d_v: vec![4.0],
        }];
        let pathwise = Gradient {
            d_w: vec![0.5],
            d_v: vec![0.0],
        };
        let g = dsac_grad_exact(&dist, &sg, |_| Ok((7.0, pathwise.clone())), 10).unwrap();
        // one hypothesis: score-function term vanishes
        assert_eq!(g, pathwise);

        // two hypotheses by hand: P = (0.25, 0.75), ∂s = (1, 0), E∂s = 0.25
        let dist = softmax(&[0.0, 3f64.ln()]);
        let sg = vec![
            Gradient {
                d_w: vec![1.0],
                d_v: vec![],
            },
            Gradient {
                d_w: vec![0.0],
                d_v: vec![],
            },
        ];
        let losses = [2.0, 6.0];
        let paths = [0.1, -0.2];
        let g = dsac_grad_exact(
            &dist,
            &sg,
            |k| {
                Ok((
                    losses[k],
                    Gradient {
                        d_w: vec![paths[k]],
                        d_v: vec![],
                    },
                ))
            },
            10,
        )
        .unwrap();
        let hand = 0.25 * (2.0 * (1.0 - 0.25) + 0.1) + 0.75 * (6.0 * (0.0 - 0.25) - 0.2);
        assert_abs_diff_eq!(g.d_w[0], hand, epsilon = 1e-15);
        assert!(matches!(
            dsac_grad_exact(&dist, &sg, |_| Ok((0.0, Gradient::zeros(1, 0))), 1),
            Err(Error::PoolTooLarge { size: 2, limit: 1 })
        ));
    }

    #[test]
    fn dsac_exact_matches_finite_differences_on_linear_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = 7;
        let d = 4;
        let a: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let theta: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // loss_J(θ) = exp(<b_J, θ>)
        let expected = |th: &[f64]| -> f64 {
            let dist = softmax(&linear_scores(&a, th));
            dist.probs.iter().zip(linear_scores(&b, th)).map(|(p, z)| p * z.exp()).sum()
        };
        let dist = softmax(&linear_scores(&a, &theta));
        let sg: Vec<Gradient<f64>> = a.iter().map(|r| Gradient { d_w: r.clone(), d_v: vec![] }).collect();
        let bz = linear_scores(&b, &theta);
        let g = dsac_grad_exact(
            &dist,
            &sg,
            |k| {
                Ok((
                    bz[k].exp(),
                    Gradient {
                        d_w: b[k].iter().map(|x| x * bz[k].exp()).collect(),
                        d_v: vec![],
                    },
                ))
            },
            100,
        )
        .unwrap();
        let fd = central_difference(|t| Ok(vec![expected(t)]), &theta, 1e-5, 1.0, &mut rng).unwrap();
        assert!(rel(&g.d_w, &fd.values) < 1e-8);

        // and the sampled estimator is centred on it
        let stats = dsac_grad_sampled_with_stats(
            &dist,
            &sg,
            |k| {
                Ok((
                    bz[k].exp(),
                    Gradient {
                        d_w: b[k].iter().map(|x| x * bz[k].exp()).collect(),
                        d_v: vec![],
                    },
                ))
            },
            100_000,
            &mut rng,
        )
        .unwrap();
        for i in 0..d {
            assert!((stats.mean.d_w[i] - g.d_w[i]).abs() <= 4.0 * stats.std_err.d_w[i]);
        }
    }

    #[test]
    fn sampled_one_hot_is_pathwise_only() {
        let dist = softmax(&[0.0, -1e4]);
        let sg = vec![
            Gradient {
                d_w: vec![1.0],
                d_v: vec![2.0],
            },
            Gradient {
                d_w: vec![-1.0],
                d_v: vec![5.0],
            },
        ];
        let path = Gradient {
            d_w: vec![0.25],
            d_v: vec![0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = dsac_grad_sampled_with_stats(&dist, &sg, |_| Ok((3.0, path.clone())), 50, &mut rng).unwrap();
        assert_eq!(s.mean, path);
        assert!(s.std_err.flat().iter().all(|&v| v == 0.0));
        assert!(dsac_grad_sampled(&dist, &sg, |_| Ok((3.0, path.clone())), 0, &mut rng).is_err());
    }

    #[test]
    fn central_difference_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let j = central_difference(|x: &[f64]| Ok(vec![x[0] * x[0]]), &[3.0], 1e-4, 1.0, &mut rng).unwrap();
        assert_abs_diff_eq!(j.values[0], 6.0, epsilon = 1e-8);
        let lin = |x: &[f64]| Ok(vec![2.0 * x[0] - x[1], 0.5 * x[1]]);
        for step in [1e-3, 0.5, 10.0] {
            let j = central_difference(lin, &[1.0, -4.0], step, 1.0, &mut rng).unwrap();
            for (g, w) in j.values.iter().zip([2.0, -1.0, 0.0, 0.5]) {
                assert_abs_diff_eq!(*g, w, epsilon = 1e-12);
            }
        }
        assert!(central_difference(lin, &[1.0, 1.0], 0.0, 1.0, &mut rng).is_err());
        assert!(central_difference(lin, &[1.0, 1.0], 1e-3, 0.0, &mut rng).is_err());

        // a column whose perturbation fails is left at zero
        let picky = |x: &[f64]| {
            if x[1] > 1.0 {
                Err(Error::NonFiniteOutput)
            } else {
                Ok(vec![x[0] + x[1]])
            }
        };
        let j = central_difference(picky, &[1.0, 1.0], 0.1, 1.0, &mut rng).unwrap();
        assert_abs_diff_eq!(j.values[0], 1.0, epsilon = 1e-12);
        assert_eq!(j.values[1], 0.0);
    }

    #[test]
    fn central_difference_error_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // cubic term gives a truncation error of h^2 f'''/6
        let f = |x: &[f64]| Ok(vec![x[0].powi(3) + 2.0 * x[0] * x[0]]);
        let exact = 3.0 * 1.5f64.powi(2) + 4.0 * 1.5;
        let err = |h: f64, rng: &mut ChaCha8Rng| (central_difference(f, &[1.5], h, 1.0, rng).unwrap().values[0] - exact).abs();
        let ratio = err(0.1, &mut rng) / err(0.05, &mut rng);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn subsampled_columns_are_rescaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = |x: &[f64]| Ok(vec![x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v).sum()]);
        let x = vec![0.0; 50];
        let j = central_difference(f, &x, 1e-3, 0.5, &mut rng).unwrap();
        for (i, &v) in j.values.iter().enumerate() {
            assert!(v == 0.0 || (v - 2.0 * (i as f64 + 1.0)).abs() < 1e-9);
        }
        assert!(j.values.iter().any(|&v| v == 0.0) && j.values.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn softam_degenerate_cases() {
        let dist = softmax(&[0.0, -1e4]);
        let models = vec![vec![1.0, 2.0], vec![5.0, 5.0]];
        let mj = vec![
            LocalJacobian {
                columns: vec![0, 1],
                jacobian: Jacobian {
                    rows: 2,
                    cols: 2,
                    values: vec![1.0, 2.0, 3.0, 4.0],
                },
            },
            LocalJacobian {
                columns: vec![2],
                jacobian: Jacobian {
                    rows: 2,
                    cols: 1,
                    values: vec![9.0, 9.0],
                },
            },
        ];
        // frozen scorer: zero score gradients
        let sg = vec![Gradient::zeros(3, 2), Gradient::zeros(3, 2)];
        let eye = Jacobian {
            rows: 2,
            cols: 2,
            values: vec![1.0, 0.0, 0.0, 1.0],
        };
        let no_refine = LocalJacobian {
            columns: vec![],
            jacobian: Jacobian::zeros(2, 0),
        };
        let lg = [0.5, -1.0];
        let g = softam_grad(&SoftAmTerms {
            dist: &dist,
            models: &models,
            model_jacobians: &mj,
            score_grads: &sg,
            loss_grad: &lg,
            refine_wrt_model: &eye,
            refine_wrt_inputs: &no_refine,
        })
        .unwrap();
        // single hypothesis chain rule: lg^T J_0
        assert_abs_diff_eq!(g.d_w[0], 0.5 * 1.0 - 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.d_w[1], 0.5 * 2.0 - 4.0, epsilon = 1e-12);
        assert_eq!(g.d_w[2], 0.0);

        let zero = softam_grad(&SoftAmTerms {
            loss_grad: &[0.0, 0.0],
            dist: &dist,
            models: &models,
            model_jacobians: &mj,
            score_grads: &sg,
            refine_wrt_model: &eye,
            refine_wrt_inputs: &no_refine,
        })
        .unwrap();
        assert!(zero.flat().iter().all(|&v| v == 0.0));
        assert!(softam_grad(&SoftAmTerms {
            models: &models[..1],
            dist: &dist,
            model_jacobians: &mj,
            score_grads: &sg,
            loss_grad: &lg,
            refine_wrt_model: &eye,
            refine_wrt_inputs: &no_refine,
        })
        .is_err());
    }

    proptest! {
        #[test]
        fn softmax_derivatives_sum_to_zero(scores in prop::collection::vec(-5.0..5.0f64, 1..12),
                                           seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 3;
            let grads: Vec<Vec<f64>> = scores.iter().map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let dist = softmax(&scores);
            let dp = softmax_weight_grad(&dist, &grads).unwrap();
            for c in 0..d {
                let s: f64 = dp.iter().map(|r| r[c]).sum();
                prop_assert!(s.abs() < 1e-12);
            }
            // E[∂ log P] = 0 by enumeration
            for c in 0..d {
                let e: f64 = (0..scores.len())
                    .map(|k| dist.probs[k] * log_prob_grad(&dist, &grads, k).unwrap()[c])
                    .sum();
                prop_assert!(e.abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_and_log_prob_match_finite_differences(seed in 0u64..1000, m in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 3;
            let a: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let theta: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dist = softmax(&linear_scores(&a, &theta));
            let dp = softmax_weight_grad(&dist, &a).unwrap();
            let probs = |t: &[f64]| Ok(softmax(&linear_scores(&a, t)).probs);
            let fd = central_difference(probs, &theta, 1e-5, 1.0, &mut rng).unwrap();
            let flat: Vec<f64> = dp.concat();
            prop_assert!(rel(&flat, &fd.values) < 1e-6);
            let chosen = seed as usize % m;
            let lp = log_prob_grad(&dist, &a, chosen).unwrap();
            let logp = |t: &[f64]| Ok(vec![softmax(&linear_scores(&a, t)).log_probs[chosen]]);
            let fd = central_difference(logp, &theta, 1e-5, 1.0, &mut rng).unwrap();
            prop_assert!(rel(&lp, &fd.values) < 1e-6);
        }
    }
}
