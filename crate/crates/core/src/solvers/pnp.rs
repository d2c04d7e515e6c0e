use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{p3p, solve_spd, Estimator};
use crate::error::{Error, Result};
use crate::geometry::{
    add, axis_angle_from_quat, cross, mat_vec, norm3, quat_from_axis_angle, quat_mul,
    reprojection_error_point_grad, reprojection_error_with_rotation, sub, Correspondence, Intrinsics,
    Pose, Vec3,
};
use crate::scalar::Real;

const MAX_LM_ITERATIONS: usize = 100;
const INIT_QUADS: usize = 10;
const POLISH_ITERATIONS: usize = 20;
/// Step tolerance of the local re-solve used inside finite differences.
const LOCAL_STEP_TOL: f64 = 1e-10;
const INIT_SEED: u64 = 0x5eed_9a7e;

/// Pose from exactly four correspondences: P3P on the first three, the
/// fourth picks among the candidates, then a Newton polish of the exact fit
/// to the first three.
pub fn solve_pnp_minimal<T: Real>(quad: &[Correspondence<T>], c: &Intrinsics<T>) -> Result<Pose<T>> {
    if quad.len() != 4 {
        return Err(Error::DimensionMismatch {
            expected: 4,
            got: quad.len(),
        });
    }
    let pts = [quad[0].y, quad[1].y, quad[2].y];
    let d12 = sub(pts[1], pts[0]);
    let d13 = sub(pts[2], pts[0]);
    let area = norm3(cross(d12, d13));
    if !(area > T::lit(1e-9) * norm3(d12) * norm3(d13)) {
        return Err(Error::DegenerateConfiguration("collinear scene points"));
    }
    let bearings = [0, 1, 2].map(|k| c.unproject(quad[k].p, T::one()));
    let candidates = p3p(&pts, &bearings);
    let best = candidates
        .into_iter()
        .map(|h| (squared_cost(c, &h, quad), h))
        .filter(|(cost, _)| cost.is_finite())
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(_, h)| h)
        .ok_or(Error::DegenerateConfiguration("no admissible P3P solution"))?;
    // the polish only ever lowers the cost on the three points
    Ok(lm_iterate(&quad[..3], c, best, POLISH_ITERATIONS, T::epsilon() * T::lit(16.0)).map_or(best, |(h, _, _)| h))
}

/// Levenberg-Marquardt minimisation of the summed squared reprojection error.
///
/// Without an initial pose the best minimal solution over a few fixed
/// pseudo-random quadruples is used.
pub fn solve_pnp_iterative<T: Real>(
    corrs: &[Correspondence<T>],
    c: &Intrinsics<T>,
    init: Option<&Pose<T>>,
) -> Result<Pose<T>> {
    solve_pnp_iterative_traced(corrs, c, init).map(|(h, _)| h)
}

/// Like [`solve_pnp_iterative`], also returning the objective after every
/// accepted iteration (first entry is the initial objective).
pub fn solve_pnp_iterative_traced<T: Real>(
    corrs: &[Correspondence<T>],
    c: &Intrinsics<T>,
    init: Option<&Pose<T>>,
) -> Result<(Pose<T>, Vec<T>)> {
    if corrs.len() < 4 {
        return Err(Error::TooFewCorrespondences {
            needed: 4,
            available: corrs.len(),
        });
    }
    let start = match init {
        Some(h) => *h,
        None => initial_guess(corrs, c)?,
    };
    levenberg_marquardt(corrs, c, start, MAX_LM_ITERATIONS)
}

fn initial_guess<T: Real>(corrs: &[Correspondence<T>], c: &Intrinsics<T>) -> Result<Pose<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(INIT_SEED);
    let mut best: Option<(T, Pose<T>)> = None;
    for _ in 0..INIT_QUADS {
        let idx = sample(&mut rng, corrs.len(), 4);
        let quad: Vec<_> = idx.iter().map(|i| corrs[i]).collect();
        if let Ok(h) = solve_pnp_minimal(&quad, c) {
            let cost = squared_cost(c, &h, corrs);
            if cost.is_finite() && best.as_ref().map_or(true, |(b, _)| cost < *b) {
                best = Some((cost, h));
            }
        }
    }
    best.map(|(_, h)| h)
        .ok_or(Error::DegenerateConfiguration("no minimal solution for initialisation"))
}

/// Sum of squared reprojection errors; infinite if a point is behind the camera.
fn squared_cost<T: Real>(c: &Intrinsics<T>, h: &Pose<T>, corrs: &[Correspondence<T>]) -> T {
    let r = h.rotation();
    let mut cost = T::zero();
    for corr in corrs {
        let x = add(mat_vec(&r, corr.y), h.t);
        match c.project_camera(x) {
            Ok(q) => {
                let du = q[0] - corr.p[0];
                let dv = q[1] - corr.p[1];
                cost += du * du + dv * dv;
            }
            Err(_) => return T::infinity(),
        }
    }
    cost
}

fn levenberg_marquardt<T: Real>(
    corrs: &[Correspondence<T>],
    c: &Intrinsics<T>,
    start: Pose<T>,
    max_iterations: usize,
) -> Result<(Pose<T>, Vec<T>)> {
    match lm_iterate(corrs, c, start, max_iterations, T::epsilon() * T::lit(16.0))? {
        (h, trace, true) => Ok((h, trace)),
        _ => Err(Error::DidNotConverge {
            iterations: max_iterations,
        }),
    }
}

/// LM iterations; the flag reports whether a stopping test was met within
/// `max_iterations` (the pose is the best one found either way).
fn lm_iterate<T: Real>(
    corrs: &[Correspondence<T>],
    c: &Intrinsics<T>,
    start: Pose<T>,
    max_iterations: usize,
    step_tol: T,
) -> Result<(Pose<T>, Vec<T>, bool)> {
    let mut pose = start;
    let mut cost = squared_cost(c, &pose, corrs);
    if !cost.is_finite() {
        return Err(Error::DegenerateConfiguration("initial pose puts points behind the camera"));
    }
    let mut trace = vec![cost];
    let mut lambda = T::lit(1e-3);
    let tiny = T::lit(1e-30);
    for _ in 0..max_iterations {
        if cost <= tiny {
            return Ok((pose, trace, true));
        }
        let (jtj, jtr) = normal_equations(corrs, c, &pose);
        let mut accepted = false;
        while lambda < T::lit(1e16) {
            let mut a = jtj;
            for k in 0..6 {
                a[k * 6 + k] += lambda * jtj[k * 6 + k].max(T::lit(1e-12));
            }
            let rhs = jtr.map(|v| -v);
            let Some(delta) = solve_spd(&a, &rhs, 6) else {
                lambda *= T::lit(10.0);
                continue;
            };
            if negligible_step(&pose, &delta, step_tol) {
                return Ok((pose, trace, true));
            }
            let cand = apply_update(&pose, &delta);
            let cand_cost = squared_cost(c, &cand, corrs);
            if cand_cost < cost {
                let rel = (cost - cand_cost) / cost.max(tiny);
                let step = delta.iter().map(|v| v.abs()).fold(T::zero(), T::max);
                pose = cand;
                cost = cand_cost;
                trace.push(cost);
                lambda = (lambda * T::lit(0.1)).max(T::lit(1e-12));
                accepted = true;
                if rel < T::epsilon() * T::lit(4.0) || step < T::epsilon() {
                    return Ok((pose, trace, true));
                }
                break;
            }
            lambda *= T::lit(10.0);
        }
        if !accepted {
            // no descent direction left at working precision
            return Ok((pose, trace, true));
        }
    }
    Ok((pose, trace, false))
}

/// Every step component below `tol` (translation relative to the pose).
fn negligible_step<T: Real>(pose: &Pose<T>, delta: &[T], tol: T) -> bool {
    let scale_t = pose.t.iter().fold(T::one(), |m, v| m.max(v.abs()));
    delta[..3].iter().all(|d| d.abs() <= tol) && delta[3..].iter().all(|d| d.abs() <= tol * scale_t)
}

/// `R <- exp(dw) R`, `t <- t + dt`.
fn apply_update<T: Real>(pose: &Pose<T>, delta: &[T]) -> Pose<T> {
    let dq = quat_from_axis_angle([delta[0], delta[1], delta[2]]);
    let q = quat_mul(dq, pose.quaternion());
    Pose {
        theta: axis_angle_from_quat(q),
        t: [pose.t[0] + delta[3], pose.t[1] + delta[4], pose.t[2] + delta[5]],
    }
}

fn normal_equations<T: Real>(corrs: &[Correspondence<T>], c: &Intrinsics<T>, pose: &Pose<T>) -> ([T; 36], [T; 6]) {
    let r = pose.rotation();
    let mut jtj = [T::zero(); 36];
    let mut jtr = [T::zero(); 6];
    for corr in corrs {
        let ry = mat_vec(&r, corr.y);
        let x = add(ry, pose.t);
        let iz = T::one() / x[2];
        let u = c.fx * x[0] * iz + c.cx - corr.p[0];
        let v = c.fy * x[1] * iz + c.cy - corr.p[1];
        // d(pi)/dx
        let du: Vec3<T> = [c.fx * iz, T::zero(), -c.fx * x[0] * iz * iz];
        let dv: Vec3<T> = [T::zero(), c.fy * iz, -c.fy * x[1] * iz * iz];
        // dx/dw = -[Ry]x, so d/dw (g . x) = (Ry x g)
        let ju = {
            let w = cross(ry, du);
            [w[0], w[1], w[2], du[0], du[1], du[2]]
        };
        let jv = {
            let w = cross(ry, dv);
            [w[0], w[1], w[2], dv[0], dv[1], dv[2]]
        };
        for i in 0..6 {
            jtr[i] += ju[i] * u + jv[i] * v;
            for j in 0..6 {
                jtj[i * 6 + j] += ju[i] * ju[j] + jv[i] * jv[j];
            }
        }
    }
    (jtj, jtr)
}

/// Camera localisation from 2D-3D correspondences.
#[derive(Debug, Clone, Copy)]
pub struct PnpEstimator<T> {
    pub intrinsics: Intrinsics<T>,
    pub cap: T,
}

impl<T: Real> PnpEstimator<T> {
    pub fn new(intrinsics: Intrinsics<T>, cap: T) -> Self {
        Self { intrinsics, cap }
    }
}

impl<T: Real> Estimator<T> for PnpEstimator<T> {
    type Model = Pose<T>;
    type Datum = Correspondence<T>;

    fn minimal_size(&self) -> usize {
        4
    }

    fn coord_dim(&self) -> usize {
        3
    }

    fn model_dim(&self) -> usize {
        6
    }

    fn cap(&self) -> T {
        self.cap
    }

    fn coord<'a>(&self, d: &'a Correspondence<T>) -> &'a [T] {
        &d.y
    }

    fn coord_mut<'a>(&self, d: &'a mut Correspondence<T>) -> &'a mut [T] {
        &mut d.y
    }

    fn solve_minimal(&self, data: &[Correspondence<T>], set: &[usize]) -> Result<Pose<T>> {
        let quad: Vec<_> = set.iter().map(|&i| data[i]).collect();
        solve_pnp_minimal(&quad, &self.intrinsics)
    }

    /// Re-runs the three-point polish from `near`, which stays on the same
    /// P3P branch as the full solver for small moves of the data.
    fn solve_minimal_local(&self, data: &[Correspondence<T>], set: &[usize], near: &Pose<T>) -> Result<Pose<T>> {
        if set.len() != 4 {
            return Err(Error::DimensionMismatch {
                expected: 4,
                got: set.len(),
            });
        }
        let triple: Vec<_> = set[..3].iter().map(|&i| data[i]).collect();
        lm_iterate(&triple, &self.intrinsics, *near, POLISH_ITERATIONS, T::lit(LOCAL_STEP_TOL)).map(|(h, _, _)| h)
    }

    fn solve_refit(&self, data: &[Correspondence<T>], set: &[usize], init: &Pose<T>) -> Result<Pose<T>> {
        let subset: Vec<_> = set.iter().map(|&i| data[i]).collect();
        solve_pnp_iterative(&subset, &self.intrinsics, Some(init))
    }

    fn errors(&self, model: &Pose<T>, data: &[Correspondence<T>]) -> Vec<T> {
        let r = model.rotation();
        data.iter()
            .map(|corr| reprojection_error_with_rotation(&self.intrinsics, &r, model.t, corr, self.cap))
            .collect()
    }

    fn errors_with_coord_grads(&self, model: &Pose<T>, data: &[Correspondence<T>]) -> (Vec<T>, Vec<T>) {
        let r = model.rotation();
        let mut e = Vec::with_capacity(data.len());
        let mut g = Vec::with_capacity(3 * data.len());
        for corr in data {
            let (err, grad) = reprojection_error_point_grad(&self.intrinsics, &r, model.t, corr, self.cap);
            e.push(err);
            g.extend_from_slice(&grad);
        }
        (e, g)
    }

    fn to_params(&self, m: &Pose<T>) -> Vec<T> {
        m.to_params().to_vec()
    }

    fn from_params(&self, p: &[T]) -> Pose<T> {
        Pose::from_params(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{invert_pose, pose_loss, project, reprojection_error};
    use rand::Rng;

    fn random_frame(rng: &mut ChaCha8Rng, n: usize, noise: f64) -> (Intrinsics<f64>, Pose<f64>, Vec<Correspondence<f64>>) {
        let c = Intrinsics::new(525.0, 525.0, 320.0, 240.0);
        let h = Pose::new(
            [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)],
        );
        let inv = invert_pose(&h);
        let corrs = (0..n)
            .map(|i| {
                let p = [rng.gen_range(20.0..620.0), rng.gen_range(20.0..460.0)];
                let x = c.unproject(p, rng.gen_range(100.0..400.0));
                let y = inv.transform(x);
                let p = [p[0] + noise * rng.gen_range(-1.0..1.0), p[1] + noise * rng.gen_range(-1.0..1.0)];
                Correspondence::new(p, y, i)
            })
            .collect();
        (c, h, corrs)
    }

    #[test]
    fn minimal_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (c, h, corrs) = random_frame(&mut rng, 4, 0.0);
            let est = solve_pnp_minimal(&corrs, &c).unwrap();
            assert!(pose_loss(&est, &h) < 1e-6);
            for corr in &corrs {
                let p = project(&c, &est, corr.y).unwrap();
                assert!((p[0] - corr.p[0]).hypot(p[1] - corr.p[1]) < 1e-6);
            }
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let c = Intrinsics::new(525.0, 525.0, 320.0, 240.0);
        let corrs: Vec<_> = (0..4)
            .map(|i| {
                let y = [i as f64, 2.0 * i as f64, 300.0];
                Correspondence::new(project(&c, &Pose::identity(), y).unwrap(), y, i)
            })
            .collect();
        assert!(matches!(
            solve_pnp_minimal(&corrs, &c),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn iterative_exact_and_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, h, corrs) = random_frame(&mut rng, 30, 0.0);
        let (est, trace) = solve_pnp_iterative_traced(&corrs, &c, None).unwrap();
        assert!(*trace.last().unwrap() < 1e-10);
        assert!(pose_loss(&est, &h) < 1e-6);
        let again = solve_pnp_iterative(&corrs, &c, Some(&est)).unwrap();
        assert!(pose_loss(&again, &est) < 1e-9);
        assert!(solve_pnp_iterative(&corrs[..3], &c, None).is_err());
    }

    #[test]
    fn iterative_objective_is_monotone_and_beats_minimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (c, h, corrs) = random_frame(&mut rng, 20, 2.0);
            let start = Pose::new(
                add(h.theta, [0.05, -0.03, 0.02]),
                add(h.t, [5.0, -3.0, 4.0]),
            );
            let (est, trace) = solve_pnp_iterative_traced(&corrs, &c, Some(&start)).unwrap();
            assert!(trace.windows(2).all(|w| w[1] <= w[0]));
            let final_cost = squared_cost(&c, &est, &corrs);
            for k in 0..5 {
                let quad: Vec<_> = corrs[4 * k..4 * k + 4].to_vec();
                if let Ok(m) = solve_pnp_minimal(&quad, &c) {
                    assert!(final_cost <= squared_cost(&c, &m, &corrs) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn noisy_minimal_fits_first_three_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut solved = 0;
        for _ in 0..20 {
            let (c, _, corrs) = random_frame(&mut rng, 4, 1.0);
            let Ok(est) = solve_pnp_minimal(&corrs, &c) else { continue };
            solved += 1;
            for corr in &corrs[..3] {
                assert!(reprojection_error(&c, &est, corr, 1e9) < 1e-6);
            }
        }
        assert!(solved > 10);
    }

    #[test]
    fn single_precision_minimal() {
        let c = Intrinsics::new(525.0f32, 525.0, 320.0, 240.0);
        let h = Pose::new([0.1f32, -0.2, 0.05], [3.0, -2.0, 10.0]);
        let inv = invert_pose(&h);
        let pix = [[100.0f32, 80.0], [500.0, 120.0], [320.0, 400.0], [200.0, 300.0]];
        let corrs: Vec<_> = pix
            .iter()
            .enumerate()
            .map(|(i, &p)| Correspondence::new(p, inv.transform(c.unproject(p, 200.0 + 10.0 * i as f32)), i))
            .collect();
        let est = solve_pnp_minimal(&corrs, &c).unwrap();
        assert!(pose_loss(&est, &h) < 0.5);
    }
}
