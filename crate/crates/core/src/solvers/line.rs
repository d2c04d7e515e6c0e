use serde::{Deserialize, Serialize};

use super::{solve_spd, Estimator};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// `y = a x + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineModel<T> {
    pub a: T,
    pub b: T,
}

impl<T: Real> LineModel<T> {
    pub fn eval(&self, x: T) -> T {
        self.a * x + self.b
    }
}

/// Observed abscissa with a predicted ordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinePoint<T> {
    pub x: T,
    pub y: [T; 1],
}

impl<T: Real> LinePoint<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y: [y] }
    }
}

pub fn solve_line_minimal<T: Real>(p: &LinePoint<T>, q: &LinePoint<T>) -> Result<LineModel<T>> {
    let dx = q.x - p.x;
    let scale = p.x.abs().max(q.x.abs()).max(T::one());
    if dx.abs() <= T::epsilon() * scale * T::lit(16.0) {
        return Err(Error::VerticalLine);
    }
    let a = (q.y[0] - p.y[0]) / dx;
    Ok(LineModel {
        a,
        b: p.y[0] - a * p.x,
    })
}

/// Ordinary least squares on the given points.
pub fn fit_line_least_squares<T: Real>(points: &[LinePoint<T>]) -> Result<LineModel<T>> {
    if points.len() < 2 {
        return Err(Error::TooFewCorrespondences {
            needed: 2,
            available: points.len(),
        });
    }
    let n = T::from_usize(points.len()).unwrap();
    let (mut sx, mut sxx, mut sy, mut sxy) = (T::zero(), T::zero(), T::zero(), T::zero());
    for p in points {
        sx += p.x;
        sxx += p.x * p.x;
        sy += p.y[0];
        sxy += p.x * p.y[0];
    }
    // centred normal equations are better conditioned
    let mx = sx / n;
    let my = sy / n;
    let vxx = sxx - n * mx * mx;
    let vxy = sxy - n * mx * my;
    let sol = solve_spd(&[vxx], &[vxy], 1).ok_or(Error::VerticalLine)?;
    let a = sol[0];
    Ok(LineModel { a, b: my - a * mx })
}

/// Line fitting with vertical residuals saturated at `cap`.
#[derive(Debug, Clone, Copy)]
pub struct LineEstimator<T> {
    pub cap: T,
}

impl<T: Real> Estimator<T> for LineEstimator<T> {
    type Model = LineModel<T>;
    type Datum = LinePoint<T>;

    fn minimal_size(&self) -> usize {
        2
    }

    fn coord_dim(&self) -> usize {
        1
    }

    fn model_dim(&self) -> usize {
        2
    }

    fn cap(&self) -> T {
        self.cap
    }

    fn coord<'a>(&self, d: &'a LinePoint<T>) -> &'a [T] {
        &d.y
    }

    fn coord_mut<'a>(&self, d: &'a mut LinePoint<T>) -> &'a mut [T] {
        &mut d.y
    }

    fn solve_minimal(&self, data: &[LinePoint<T>], set: &[usize]) -> Result<LineModel<T>> {
        if set.len() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: set.len(),
            });
        }
        solve_line_minimal(&data[set[0]], &data[set[1]])
    }

    fn solve_refit(
        &self,
        data: &[LinePoint<T>],
        set: &[usize],
        _init: &LineModel<T>,
    ) -> Result<LineModel<T>> {
        let pts: Vec<LinePoint<T>> = set.iter().map(|&i| data[i]).collect();
        fit_line_least_squares(&pts)
    }

    fn errors(&self, model: &LineModel<T>, data: &[LinePoint<T>]) -> Vec<T> {
        data.iter()
            .map(|p| {
                let r = (p.y[0] - model.eval(p.x)).abs();
                if r.is_finite() {
                    r.min(self.cap)
                } else {
                    self.cap
                }
            })
            .collect()
    }

    fn errors_with_coord_grads(&self, model: &LineModel<T>, data: &[LinePoint<T>]) -> (Vec<T>, Vec<T>) {
        let mut e = Vec::with_capacity(data.len());
        let mut g = Vec::with_capacity(data.len());
        for p in data {
            let r = p.y[0] - model.eval(p.x);
            if !(r.abs() < self.cap) {
                e.push(self.cap);
                g.push(T::zero());
            } else {
                e.push(r.abs());
                g.push(if r > T::zero() {
                    T::one()
                } else if r < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                });
            }
        }
        (e, g)
    }

    fn to_params(&self, m: &LineModel<T>) -> Vec<T> {
        vec![m.a, m.b]
    }

    fn from_params(&self, p: &[T]) -> LineModel<T> {
        LineModel { a: p[0], b: p[1] }
    }
}
