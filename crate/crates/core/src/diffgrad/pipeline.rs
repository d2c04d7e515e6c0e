//! One image through hypothesise, score, select and refine, and the
//! derivative of its loss in the predicted coordinates and scorer weights.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{
    central_difference, central_difference_columns, dsac_grad_exact, dsac_grad_sampled_with_stats, softam_grad,
    Gradient, Jacobian, LocalJacobian, LossTerm, SoftAmTerms,
};
use crate::consensus::{
    build_pool, entropy, enumerate_pool, score_pool, select_argmax, select_probabilistic, select_soft_argmax,
    HypothesisPool, ScoreDistribution, Strategy,
};
use crate::error::{Error, Result};
use crate::models::{score_hypothesis, scorer_input, Mlp};
use crate::scalar::Real;
use crate::solvers::{refine_traced, Estimator, MinimalSet, Refinement, RefinementParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub strategy: Strategy,
    pub pool_size: usize,
    pub refinement: RefinementParams,
    /// Perturbation applied to predicted coordinates in central differences
    /// (scene units).
    pub coord_step: f64,
    /// Perturbation applied to model parameters in central differences.
    pub model_step: f64,
    /// Fraction of coordinate columns differentiated through refinement.
    pub fd_fraction: f64,
    /// Draws for the DSAC gradient estimate; 0 enumerates the pool.
    pub dsac_samples: usize,
    /// Use every minimal set as the pool instead of sampling `pool_size`.
    pub enumerate: bool,
    pub enumeration_limit: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Dsac,
            pool_size: 256,
            refinement: RefinementParams::default(),
            coord_step: 1.0,
            model_step: 1e-6,
            fd_fraction: 0.01,
            dsac_samples: 16,
            enumerate: false,
            enumeration_limit: 4096,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.refinement.validate()?;
        if self.pool_size == 0 && !self.enumerate {
            return Err(Error::InvalidConfig("pool size must be positive".into()));
        }
        if !(self.coord_step > 0.0 && self.model_step > 0.0) {
            return Err(Error::InvalidConfig("finite-difference steps must be positive".into()));
        }
        if !(self.fd_fraction > 0.0 && self.fd_fraction <= 1.0) {
            return Err(Error::InvalidConfig("fd_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Which parameter groups need derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradientNeeds {
    /// Derivatives in the predicted coordinates.
    pub w: bool,
    /// Derivatives in the scorer weights.
    pub v: bool,
}

impl GradientNeeds {
    pub const BOTH: GradientNeeds = GradientNeeds { w: true, v: true };
}

/// Forward pass of one image.
#[derive(Debug, Clone)]
pub struct Inference<T, M> {
    pub pool: HypothesisPool<T, M>,
    pub dist: ScoreDistribution<T>,
    /// Pool position of the chosen hypothesis (`None` for the soft average).
    pub selected: Option<usize>,
    /// Chosen or averaged hypothesis before refinement.
    pub hypothesis: M,
    pub refined: Refinement<M>,
    pub entropy: T,
}

fn make_pool<T, E, R>(est: &E, data: &[E::Datum], scorer: &Mlp<T>, cfg: &PipelineConfig, rng: &mut R) -> Result<HypothesisPool<T, E::Model>>
where
    T: Real,
    E: Estimator<T>,
    R: Rng + ?Sized,
{
    let mut pool = if cfg.enumerate {
        enumerate_pool(est, data, cfg.enumeration_limit)?
    } else {
        build_pool(est, data, cfg.pool_size, rng)?
    };
    let cap = est.cap();
    let mut failure = None;
    score_pool(est, &mut pool, data, |e| match score_hypothesis(&scorer_input(e, cap), scorer) {
        Ok(s) => s,
        Err(err) => {
            failure = Some(err);
            T::zero()
        }
    });
    match failure {
        Some(err) => Err(err),
        None => Ok(pool),
    }
}

/// Runs the pipeline on one image with `cfg.strategy`.
pub fn infer<T, E, R>(est: &E, data: &[E::Datum], scorer: &Mlp<T>, cfg: &PipelineConfig, rng: &mut R) -> Result<Inference<T, E::Model>>
where
    T: Real,
    E: Estimator<T>,
    R: Rng + ?Sized,
{
    infer_with(est, data, scorer, cfg.strategy, cfg, rng)
}

/// [`infer`] with the strategy given explicitly.
pub fn infer_with<T, E, R>(
    est: &E,
    data: &[E::Datum],
    scorer: &Mlp<T>,
    strategy: Strategy,
    cfg: &PipelineConfig,
    rng: &mut R,
) -> Result<Inference<T, E::Model>>
where
    T: Real,
    E: Estimator<T>,
    R: Rng + ?Sized,
{
    let pool = make_pool(est, data, scorer, cfg, rng)?;
    let dist = pool.distribution()?;
    let (selected, hypothesis) = match strategy {
        Strategy::Ransac => {
            let (m, _, i) = select_argmax(&pool)?;
            (Some(i), m.clone())
        }
        Strategy::Dsac => {
            let (m, _, i) = select_probabilistic(&pool, &dist, rng)?;
            (Some(i), m.clone())
        }
        Strategy::Softam => (None, select_soft_argmax(est, &pool, &dist)?),
    };
    let refined = refine_traced(est, &hypothesis, data, &cfg.refinement);
    let h = entropy(&dist);
    Ok(Inference {
        pool,
        dist,
        selected,
        hypothesis,
        refined,
        entropy: h,
    })
}

/// Result of [`image_gradient`].
#[derive(Debug, Clone)]
pub struct ImageGradient<T> {
    /// `d_w` in the flattened predicted coordinates, `d_v` in the scorer.
    pub gradient: Gradient<T>,
    /// SoftAM: loss of the refined average. DSAC: expected loss (exact) or
    /// the mean loss of the draws.
    pub loss: T,
    pub entropy: T,
    /// A pool position drawn from the score distribution (DSAC) or `None`.
    pub selected: Option<usize>,
    /// Per-parameter standard error of a sampled DSAC gradient.
    pub std_err: Option<Gradient<T>>,
}

/// Central-difference gradient of `loss` in the model parameters.
pub fn loss_param_grad<T, E, L>(est: &E, loss: &L, model: &E::Model, step: T) -> Vec<T>
where
    T: Real,
    E: Estimator<T>,
    L: Fn(&E::Model) -> T + ?Sized,
{
    let p = est.to_params(model);
    let mut work = p.clone();
    (0..p.len())
        .map(|i| {
            work[i] = p[i] + step;
            let a = loss(&est.from_params(&work));
            work[i] = p[i] - step;
            let b = loss(&est.from_params(&work));
            work[i] = p[i];
            let g = (a - b) / (T::lit(2.0) * step);
            if g.is_finite() {
                g
            } else {
                T::zero()
            }
        })
        .collect()
}

fn flat_coords<T: Real, E: Estimator<T>>(est: &E, data: &[E::Datum]) -> Vec<T> {
    data.iter().flat_map(|d| est.coord(d).iter().copied()).collect()
}

fn with_coords<T: Real, E: Estimator<T>>(est: &E, data: &[E::Datum], y: &[T]) -> Vec<E::Datum> {
    let cd = est.coord_dim();
    let mut out = data.to_vec();
    for (i, d) in out.iter_mut().enumerate() {
        est.coord_mut(d).copy_from_slice(&y[i * cd..(i + 1) * cd]);
    }
    out
}

fn coord_columns(cd: usize, data_indices: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut cols: Vec<usize> = data_indices.into_iter().flat_map(|i| (0..cd).map(move |c| i * cd + c)).collect();
    cols.sort_unstable();
    cols.dedup();
    cols
}

/// Jacobian of `Y -> R(H(Y_J), Y)` by central differences over the
/// coordinates of the minimal set and of every refinement inlier, each
/// kept with probability `fraction` (scaled by `1 / fraction`).
///
/// Works for any estimator; for camera poses this is the derivative of the
/// refined pose in the predicted scene coordinates.
pub fn differentiate_pose_pipeline<T, E, R>(
    est: &E,
    data: &[E::Datum],
    set: &MinimalSet,
    params: &RefinementParams,
    step: T,
    fraction: f64,
    rng: &mut R,
) -> Result<LocalJacobian<T>>
where
    T: Real,
    E: Estimator<T>,
    R: Rng + ?Sized,
{
    let h = est.solve_minimal(data, set.indices())?;
    let refined = refine_traced(est, &h, data, params);
    differentiate_refined(est, data, set, &h, &refined.support, params, step, fraction, rng)
}

#[allow(clippy::too_many_arguments)]
fn differentiate_refined<T, E, R>(
    est: &E,
    data: &[E::Datum],
    set: &MinimalSet,
    h: &E::Model,
    support: &[usize],
    params: &RefinementParams,
    step: T,
    fraction: f64,
    rng: &mut R,
) -> Result<LocalJacobian<T>>
where
    T: Real,
    E: Estimator<T>,
    R: Rng + ?Sized,
{
    let cd = est.coord_dim();
    let y0 = flat_coords(est, data);
    let set_cols = coord_columns(cd, set.indices().iter().copied());
    let columns = coord_columns(cd, set.indices().iter().copied().chain(support.iter().copied()));
    let f = |y: &[T]| -> Result<Vec<T>> {
        let d = with_coords(est, data, y);
        // the minimal model only moves when one of its own coordinates does
        let moved = set_cols.iter().any(|&c| y[c] != y0[c]);
        let start = if moved {
            est.solve_minimal_local(&d, set.indices(), h)?
        } else {
            h.clone()
        };
        Ok(est.to_params(&refine_traced(est, &start, &d, params).model))
    };
    central_difference_columns(f, &y0, &columns, step, fraction, rng)
}

/// Score of one hypothesis and its derivatives: `d_v` in the scorer
/// weights, `d_w` in the coordinates, both through the errors directly and
/// through the hypothesis itself. Also returns `∂h/∂Y_J`.
fn hypothesis_score_grad<T, E>(
    est: &E,
    data: &[E::Datum],
    model: &E::Model,
    set: &MinimalSet,
    scorer: &Mlp<T>,
    cfg: &PipelineConfig,
    needs: GradientNeeds,
) -> Result<(Gradient<T>, LocalJacobian<T>)>
where
    T: Real,
    E: Estimator<T>,
{
    let cap = est.cap();
    let cd = est.coord_dim();
    let md = est.model_dim();
    let (e, de_dy) = est.errors_with_coord_grads(model, data);
    let trace = scorer.forward_trace(&scorer_input(&e, cap))?;
    let mut dv = vec![T::zero(); scorer.params.len()];
    let dx = scorer.backward_into(&trace, &[T::one()], &mut dv);
    let mut dy = vec![T::zero(); data.len() * cd];
    let empty = LocalJacobian {
        columns: Vec::new(),
        jacobian: Jacobian::zeros(md, 0),
    };
    if !needs.w {
        return Ok((Gradient { d_w: dy, d_v: dv }, empty));
    }
    let ds_de: Vec<T> = dx.iter().map(|&g| g / cap).collect();
    let in_set: Vec<bool> = {
        let mut m = vec![false; data.len()];
        for &i in set.indices() {
            m[i] = true;
        }
        m
    };
    for i in (0..data.len()).filter(|&i| !in_set[i]) {
        for c in 0..cd {
            dy[i * cd + c] = ds_de[i] * de_dy[i * cd + c];
        }
    }
    // The minimal points sit on the kink of their own errors (the minimal
    // model fits them exactly), so their direct and through-model terms are
    // differentiated together: re-solve from the moved minimal set and
    // linearise the score in the errors, sum_i (∂s/∂e_i) e_i.
    let local: Vec<E::Datum> = set.indices().iter().map(|&i| data[i].clone()).collect();
    let local_set: Vec<usize> = (0..local.len()).collect();
    let y0 = flat_coords(est, &local);
    // capped errors stay capped under a small move of the hypothesis
    let active: Vec<usize> = (0..data.len())
        .filter(|&i| !in_set[i] && e[i] < cap && ds_de[i] != T::zero())
        .collect();
    let active_data: Vec<E::Datum> = active.iter().map(|&i| data[i].clone()).collect();
    let active_w: Vec<T> = active.iter().map(|&i| ds_de[i]).collect();
    let set_w: Vec<T> = set.indices().iter().map(|&i| ds_de[i]).collect();
    let f = |y: &[T]| -> Result<Vec<T>> {
        let moved = with_coords(est, &local, y);
        let h = est.solve_minimal_local(&moved, &local_set, model)?;
        let dot = |e: Vec<T>, w: &[T]| e.iter().zip(w).map(|(&a, &b)| a * b).fold(T::zero(), |s, v| s + v);
        let mut out = est.to_params(&h);
        out.push(dot(est.errors(&h, &active_data), &active_w) + dot(est.errors(&h, &moved), &set_w));
        Ok(out)
    };
    let columns: Vec<usize> = (0..y0.len()).collect();
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    let lj = central_difference_columns(f, &y0, &columns, T::lit(cfg.coord_step), 1.0, &mut unused)?;
    let global: Vec<usize> = set
        .indices()
        .iter()
        .flat_map(|&i| (0..cd).map(move |c| i * cd + c))
        .collect();
    for (k, &g) in global.iter().enumerate() {
        dy[g] += lj.jacobian.get(md, k);
    }
    let mut model_jac = Jacobian::zeros(md, global.len());
    model_jac.values.copy_from_slice(&lj.jacobian.values[..md * global.len()]);
    let mj = LocalJacobian {
        columns: global,
        jacobian: model_jac,
    };
    Ok((Gradient { d_w: dy, d_v: dv }, mj))
}

/// Expected refined loss `Σ_J P_J ℓ(R(h_J, Y))` over the pool built for
/// this image.
pub fn dsac_expected_loss<T, E, L, R>(
    est: &E,
    data: &[E::Datum],
    scorer: &Mlp<T>,
    loss: &L,
    cfg: &PipelineConfig,
    rng: &mut R,
) -> Result<T>
where
    T: Real,
    E: Estimator<T>,
    L: Fn(&E::Model) -> T + ?Sized,
    R: Rng + ?Sized,
{
    let pool = make_pool(est, data, scorer, cfg, rng)?;
    let dist = pool.distribution()?;
    let mut total = T::zero();
    for (&i, &p) in dist.support.iter().zip(&dist.probs) {
        let h = pool.model(i).ok_or(Error::AllInvalid)?;
        total += p * loss(&refine_traced(est, h, data, &cfg.refinement).model);
    }
    Ok(total)
}

/// Loss and gradient of one image under `cfg.strategy` (SoftAM or DSAC).
pub fn image_gradient<T, E, L, R>(
    est: &E,
    data: &[E::Datum],
    scorer: &Mlp<T>,
    loss: &L,
    cfg: &PipelineConfig,
    needs: GradientNeeds,
    rng: &mut R,
) -> Result<ImageGradient<T>>
where
    T: Real,
    E: Estimator<T>,
    L: Fn(&E::Model) -> T + ?Sized,
    R: Rng + ?Sized,
{
    if cfg.strategy == Strategy::Ransac {
        return Err(Error::InvalidConfig("argmax selection has no gradient".into()));
    }
    let pool = make_pool(est, data, scorer, cfg, rng)?;
    let dist = pool.distribution()?;
    let ent = entropy(&dist);
    let model_step = T::lit(cfg.model_step);
    let coord_step = T::lit(cfg.coord_step);
    let md = est.model_dim();

    let mut score_grads = Vec::with_capacity(dist.len());
    let mut model_jacs = Vec::with_capacity(dist.len());
    for &i in &dist.support {
        let entry = &pool.entries[i];
        let model = entry.model.as_ref().ok_or(Error::AllInvalid)?;
        let (g, mj) = hypothesis_score_grad(est, data, model, &entry.set, scorer, cfg, needs)?;
        score_grads.push(g);
        model_jacs.push(mj);
    }
    let ny = data.len() * est.coord_dim();
    let nv = scorer.params.len();

    match cfg.strategy {
        Strategy::Softam => {
            let models: Vec<Vec<T>> = dist
                .support
                .iter()
                .map(|&i| est.to_params(pool.model(i).expect("support is valid")))
                .collect();
            let h_bar = select_soft_argmax(est, &pool, &dist)?;
            let refined = refine_traced(est, &h_bar, data, &cfg.refinement);
            let l = loss(&refined.model);
            let lg = loss_param_grad(est, loss, &refined.model, model_step);
            let p_bar = est.to_params(&h_bar);
            let mut unused = rand::rngs::mock::StepRng::new(0, 0);
            let r_h = central_difference(
                |p: &[T]| Ok(est.to_params(&refine_traced(est, &est.from_params(p), data, &cfg.refinement).model)),
                &p_bar,
                model_step,
                1.0,
                &mut unused,
            )?;
            let r_y = if needs.w {
                let y0 = flat_coords(est, data);
                let cols = coord_columns(est.coord_dim(), refined.support.iter().copied());
                central_difference_columns(
                    |y: &[T]| {
                        let d = with_coords(est, data, y);
                        Ok(est.to_params(&refine_traced(est, &h_bar, &d, &cfg.refinement).model))
                    },
                    &y0,
                    &cols,
                    coord_step,
                    cfg.fd_fraction,
                    rng,
                )?
            } else {
                LocalJacobian {
                    columns: Vec::new(),
                    jacobian: Jacobian::zeros(md, 0),
                }
            };
            let gradient = softam_grad(&SoftAmTerms {
                dist: &dist,
                models: &models,
                model_jacobians: &model_jacs,
                score_grads: &score_grads,
                loss_grad: &lg,
                refine_wrt_model: &r_h,
                refine_wrt_inputs: &r_y,
            })?;
            Ok(ImageGradient {
                gradient,
                loss: l,
                entropy: ent,
                selected: None,
                std_err: None,
            })
        }
        Strategy::Dsac => {
            let mut losses: Vec<Option<T>> = vec![None; dist.len()];
            let mut fd_rng = rand_chacha::ChaCha8Rng::from_rng(&mut *rng).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let mut term = |k: usize| -> Result<LossTerm<T>> {
                let i = dist.support[k];
                let entry = &pool.entries[i];
                let h = entry.model.as_ref().ok_or(Error::AllInvalid)?;
                let refined = refine_traced(est, h, data, &cfg.refinement);
                let l = loss(&refined.model);
                losses[k] = Some(l);
                let mut g = Gradient::zeros(ny, nv);
                if needs.w {
                    let lg = loss_param_grad(est, loss, &refined.model, model_step);
                    let jac = differentiate_refined(
                        est,
                        data,
                        &entry.set,
                        h,
                        &refined.support,
                        &cfg.refinement,
                        coord_step,
                        cfg.fd_fraction,
                        &mut fd_rng,
                    )?;
                    jac.left_mul_into(&lg, T::one(), &mut g.d_w);
                }
                Ok((l, g))
            };
            let (gradient, l, std_err) = if cfg.dsac_samples == 0 {
                let g = dsac_grad_exact(&dist, &score_grads, &mut term, cfg.enumeration_limit)?;
                let expected = dist
                    .probs
                    .iter()
                    .zip(&losses)
                    .map(|(&p, l)| l.map_or(T::zero(), |l| p * l))
                    .sum();
                (g, expected, None)
            } else {
                let s = dsac_grad_sampled_with_stats(&dist, &score_grads, &mut term, cfg.dsac_samples, rng)?;
                (s.mean, s.mean_loss, Some(s.std_err))
            };
            let selected = Some(dist.support[dist.sample(rng)]);
            Ok(ImageGradient {
                gradient,
                loss: l,
                entropy: ent,
                selected,
                std_err,
            })
        }
        Strategy::Ransac => unreachable!("rejected above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::MlpSpec;
    use crate::solvers::{LineEstimator, LineModel, LinePoint};
    use rand_chacha::ChaCha8Rng;

    fn toy_line(seed: u64, n: usize) -> Vec<LinePoint<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let x = i as f64 - n as f64 / 2.0 + rng.gen_range(-0.3..0.3);
                let y = 0.7 * x + 1.0 + rng.gen_range(-0.2..0.2);
                LinePoint::new(x, if i % 3 == 2 { y + rng.gen_range(3.0..6.0) } else { y })
            })
            .collect()
    }

    #[test]
    fn ransac_has_no_gradient() {
        let est = LineEstimator { cap: 10.0 };
        let data = toy_line(1, 6);
        let scorer = Mlp::glorot(MlpSpec::scorer(6), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cfg = PipelineConfig {
            strategy: Strategy::Ransac,
            enumerate: true,
            ..Default::default()
        };
        let gt = LineModel { a: 0.7, b: 1.0 };
        let loss = |m: &LineModel<f64>| ((m.a - gt.a).powi(2) + (m.b - gt.b).powi(2)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(image_gradient(&est, &data, &scorer, &loss, &cfg, GradientNeeds::BOTH, &mut rng).is_err());
        let inf = infer(&est, &data, &scorer, &cfg, &mut rng).unwrap();
        assert_eq!(inf.pool.len(), 15);
        assert!(inf.selected.is_some());
    }

    #[test]
    fn minimal_set_coordinates_have_effect() {
        let est = LineEstimator { cap: 10.0 };
        let data = toy_line(2, 12);
        let params = RefinementParams {
            tau: 0.5,
            max_inliers: 100,
            min_inliers: 3,
            iterations: 8,
        };
        let set = MinimalSet(vec![0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let jac = differentiate_pose_pipeline(&est, &data, &set, &params, 1e-6, 1.0, &mut rng).unwrap();
        assert!(jac.jacobian.values.iter().any(|v| v.abs() > 1e-6));
        // outliers (every third point) never enter the column list
        assert!(jac.columns.iter().all(|&c| c % 3 != 2));
    }
}
