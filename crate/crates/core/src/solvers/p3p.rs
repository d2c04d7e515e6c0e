//! Three-point absolute pose via the lambda-twist formulation: the three
//! distance constraints are reduced to a cubic, a singular 3x3 eigenproblem
//! and two quadratics, yielding up to four candidate depth triplets.

use crate::geometry::{
    cross, dot3, mat_mul, mat_vec, norm3, scale, sub, Mat3, Pose, Vec3,
};
use crate::scalar::Real;

/// Candidate scene poses `x_cam = R y + t` for three scene points and their
/// (not necessarily normalised) bearing vectors.
pub fn p3p<T: Real>(points: &[Vec3<T>; 3], bearings: &[Vec3<T>; 3]) -> Vec<Pose<T>> {
    let two = T::lit(2.0);
    let one = T::one();

    let f = bearings.map(|b| scale(b, T::one() / norm3(b)));
    let [x1, x2, x3] = *points;

    let d12 = sub(x1, x2);
    let d13 = sub(x1, x3);
    let d23 = sub(x2, x3);
    let n = cross(d12, d13);

    let a12 = dot3(d12, d12);
    let a13 = dot3(d13, d13);
    let a23 = dot3(d23, d23);

    let c12 = dot3(f[0], f[1]);
    let c23 = dot3(f[1], f[2]);
    let c31 = dot3(f[2], f[0]);
    let blob = c12 * c23 * c31 - one;

    let s12 = one - c12 * c12;
    let s23 = one - c23 * c23;
    let s31 = one - c31 * c31;

    let b12 = -two * c12;
    let b13 = -two * c31;
    let b23 = -two * c23;

    let p3 = a13 * (a23 * s31 - a13 * s23);
    let p2 = two * blob * a23 * a13 + a13 * (two * a12 + a13) * s23 + a23 * (a23 - a12) * s31;
    let p1 = a23 * (a13 - a23) * s12 - a12 * a12 * s23 - two * a12 * (blob * a23 + a13 * s23);
    let p0 = a12 * (a12 * s23 - a23 * s12);

    if p3 == T::zero() || !p3.is_finite() {
        return Vec::new();
    }
    let g = sharpest_cubic_root(p2 / p3, p1 / p3, p0 / p3);

    let d0: Mat3<T> = [
        [a23 * (one - g), -(a23 * c12), a23 * c31 * g],
        [-(a23 * c12), a23 - a12 + a13 * g, -c23 * (a13 * g - a12)],
        [a23 * c31 * g, -c23 * (a13 * g - a12), g * (a13 - a23) - a12],
    ];
    let (e, sigma) = eigen_singular(&d0);
    let ratio = (-sigma[1] / sigma[0]).max(T::zero()).sqrt();

    let mut lambdas: Vec<Vec3<T>> = Vec::with_capacity(4);
    for s in [ratio, -ratio] {
        let w2 = one / (s * e[0][1] - e[0][0]);
        let w0 = (e[1][0] - s * e[1][1]) * w2;
        let w1 = (e[2][0] - s * e[2][1]) * w2;
        let a = one / ((a13 - a12) * w1 * w1 - a12 * b13 * w1 - a12);
        let b = (a13 * b12 * w1 - a12 * b13 * w0 - two * w0 * w1 * (a12 - a13)) * a;
        let c = ((a13 - a12) * w0 * w0 + a13 * b12 * w0 + a13) * a;
        let Some((tau1, tau2)) = real_quadratic_roots(b, c) else {
            continue;
        };
        for tau in [tau1, tau2] {
            if !(tau > T::zero()) {
                continue;
            }
            let d = a23 / (tau * (b23 + tau) + one);
            if !(d > T::zero()) {
                continue;
            }
            let l2 = d.sqrt();
            let l3 = tau * l2;
            let l1 = w0 * l2 + w1 * l3;
            if l1 >= T::zero() && l1.is_finite() {
                lambdas.push([l1, l2, l3]);
            }
        }
    }

    let Some(x_inv) = invert3(&columns(d12, d13, n)) else {
        return Vec::new();
    };
    lambdas
        .into_iter()
        .filter_map(|l| {
            let l = refine_depths(l, [a12, a13, a23], [b12, b13, b23]);
            let ry1 = scale(f[0], l[0]);
            let ry2 = scale(f[1], l[1]);
            let ry3 = scale(f[2], l[2]);
            let yd1 = sub(ry1, ry2);
            let yd2 = sub(ry1, ry3);
            let r = mat_mul(&columns(yd1, yd2, cross(yd1, yd2)), &x_inv);
            let t = sub(ry1, mat_vec(&r, x1));
            let pose = Pose::from_rotation_matrix(&r, t);
            pose.is_finite().then_some(pose)
        })
        .collect()
}

fn columns<T: Real>(a: Vec3<T>, b: Vec3<T>, c: Vec3<T>) -> Mat3<T> {
    [[a[0], b[0], c[0]], [a[1], b[1], c[1]], [a[2], b[2], c[2]]]
}

pub(crate) fn invert3<T: Real>(m: &Mat3<T>) -> Option<Mat3<T>> {
    let c0 = cross(row(m, 1), row(m, 2));
    let det = dot3(row(m, 0), c0);
    if det == T::zero() || !det.is_finite() {
        return None;
    }
    let c1 = cross(row(m, 2), row(m, 0));
    let c2 = cross(row(m, 0), row(m, 1));
    let inv_det = T::one() / det;
    // columns of the inverse are the cofactor rows
    Some([
        [c0[0] * inv_det, c1[0] * inv_det, c2[0] * inv_det],
        [c0[1] * inv_det, c1[1] * inv_det, c2[1] * inv_det],
        [c0[2] * inv_det, c1[2] * inv_det, c2[2] * inv_det],
    ])
}

fn row<T: Real>(m: &Mat3<T>, i: usize) -> Vec3<T> {
    m[i]
}

/// Real roots of `r^2 + b r + c`, computed without cancellation.
fn real_quadratic_roots<T: Real>(b: T, c: T) -> Option<(T, T)> {
    let disc = b * b - T::lit(4.0) * c;
    if !(disc >= T::zero()) {
        return None;
    }
    let y = disc.sqrt();
    let half = T::lit(0.5);
    if b < T::zero() {
        Some((half * (-b + y), half * (-b - y)))
    } else {
        let two = T::lit(2.0);
        Some((two * c / (-b + y), two * c / (-b - y)))
    }
}

/// A root of `r^3 + b r^2 + c r + d` chosen where the derivative is large,
/// polished by Newton iterations.
fn sharpest_cubic_root<T: Real>(b: T, c: T, d: T) -> T {
    let three = T::lit(3.0);
    let h = |r: T| ((r + b) * r + c) * r + d;
    let dh = |r: T| (three * r + T::lit(2.0) * b) * r + c;
    let mut r0;
    if b * b >= three * c {
        let v = (b * b - three * c).sqrt();
        let t1 = (-b - v) / three;
        let k = h(t1);
        if k > T::zero() {
            r0 = t1 - (-k / (three * t1 + b)).sqrt();
        } else {
            let t2 = (-b + v) / three;
            let k = h(t2);
            r0 = t2 + (-k / (three * t2 + b)).sqrt();
        }
    } else {
        r0 = -b / three;
        if dh(r0).abs() < T::lit(1e-4) {
            r0 += T::one();
        }
    }
    for i in 0..50 {
        let fx = h(r0);
        if i >= 7 && fx.abs() < T::lit(1e-13) {
            break;
        }
        let step = fx / dh(r0);
        if !step.is_finite() {
            break;
        }
        r0 -= step;
    }
    r0
}

/// Eigenvectors (as columns) and the two non-zero eigenvalues of a singular
/// symmetric 3x3 matrix, larger magnitude first.
fn eigen_singular<T: Real>(x: &Mat3<T>) -> (Mat3<T>, [T; 2]) {
    let v3 = {
        let v = cross(x[0], x[1]);
        let n = norm3(v);
        if n > T::zero() {
            scale(v, T::one() / n)
        } else {
            [T::zero(), T::zero(), T::one()]
        }
    };
    let (m11, m12, m13) = (x[0][0], x[0][1], x[0][2]);
    let (m22, m23, m33) = (x[1][1], x[1][2], x[2][2]);
    let b = -m11 - m22 - m33;
    let c = -m12 * m12 - m13 * m13 - m23 * m23 + m11 * (m22 + m33) + m22 * m33;
    let (mut e1, mut e2) = match real_quadratic_roots(b, c) {
        Some(r) => r,
        None => (T::lit(0.5) * -b, T::lit(0.5) * -b),
    };
    if e1.abs() < e2.abs() {
        std::mem::swap(&mut e1, &mut e2);
    }
    let mx0011 = -m11 * m22;
    let prec0 = m12 * m23 - m13 * m22;
    let prec1 = m12 * m13 - m11 * m23;
    let vec_for = |e: T| {
        let tmp = T::one() / (e * (m11 + m22) + mx0011 - e * e + m12 * m12);
        let a1 = -(e * m13 + prec0) * tmp;
        let a2 = -(e * m23 + prec1) * tmp;
        let rn = T::one() / (a1 * a1 + a2 * a2 + T::one()).sqrt();
        [a1 * rn, a2 * rn, rn]
    };
    let v1 = vec_for(e1);
    let v2 = vec_for(e2);
    (columns(v1, v2, v3), [e1, e2])
}

/// Gauss-Newton on the three squared-distance constraints.
fn refine_depths<T: Real>(l: Vec3<T>, a: [T; 3], b: [T; 3]) -> Vec3<T> {
    let [a12, a13, a23] = a;
    let [b12, b13, b23] = b;
    let residual = |l: Vec3<T>| {
        [
            l[0] * l[0] + l[1] * l[1] + b12 * l[0] * l[1] - a12,
            l[0] * l[0] + l[2] * l[2] + b13 * l[0] * l[2] - a13,
            l[1] * l[1] + l[2] * l[2] + b23 * l[1] * l[2] - a23,
        ]
    };
    let l1norm = |r: Vec3<T>| r[0].abs() + r[1].abs() + r[2].abs();
    let two = T::lit(2.0);
    let mut l = l;
    let mut r = residual(l);
    for _ in 0..5 {
        if l1norm(r) < T::lit(1e-10) {
            break;
        }
        let j: Mat3<T> = [
            [two * l[0] + b12 * l[1], two * l[1] + b12 * l[0], T::zero()],
            [two * l[0] + b13 * l[2], T::zero(), two * l[2] + b13 * l[0]],
            [T::zero(), two * l[1] + b23 * l[2], two * l[2] + b23 * l[1]],
        ];
        let Some(ji) = invert3(&j) else { break };
        let step = mat_vec(&ji, r);
        let cand = sub(l, step);
        let rc = residual(cand);
        if !(l1norm(rc) < l1norm(r)) {
            break;
        }
        l = cand;
        r = rc;
    }
    l
}
