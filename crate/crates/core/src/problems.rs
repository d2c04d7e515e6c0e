//! Synthetic problem generators: noisy 2D lines with outliers, and a camera
//! localisation task on a textured room with predicted scene coordinates.
//!
//! Units for the camera task: scene coordinates and translations in cm,
//! pixels in px, angles in degrees at the interfaces.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    cross, norm3, pose_loss, project, scale, sub, transpose, Correspondence, Intrinsics, Mat3, Pose, Vec3,
    DEFAULT_ERROR_CAP,
};
use crate::solvers::{Estimator, LineEstimator, LineModel, LinePoint, PnpEstimator};

pub const DATASET_VERSION: u32 = 1;

/// Default radius for counting a predicted scene coordinate as an inlier (cm).
pub const INLIER_RADIUS_CM: f64 = 10.0;

/// One image worth of data: the correspondence template (its coordinates
/// are replaced by predictions), per-datum features, ground-truth
/// coordinates flattened in datum order, and the ground-truth model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame<D, M> {
    pub data: Vec<D>,
    pub features: Vec<Vec<f64>>,
    pub gt_coords: Vec<f64>,
    pub gt_model: M,
}

pub type ModelOf<P> = <<P as Problem>::Est as Estimator<f64>>::Model;
pub type DatumOf<P> = <<P as Problem>::Est as Estimator<f64>>::Datum;
pub type FrameOf<P> = Frame<DatumOf<P>, ModelOf<P>>;

/// A family of frames with a task loss, as consumed by the training loops.
pub trait Problem: Sync {
    type Est: Estimator<f64>;

    fn estimator(&self) -> &Self::Est;
    fn feature_dim(&self) -> usize;
    fn train_frames(&self) -> &[FrameOf<Self>];
    fn test_frames(&self) -> &[FrameOf<Self>];
    fn task_loss(&self, h: &ModelOf<Self>, gt: &ModelOf<Self>) -> f64;
    /// Task loss separating "good" from "bad" hypotheses.
    fn loss_threshold(&self) -> f64;
    /// Random model near `gt`, with task loss below the threshold when
    /// `close` and above it otherwise.
    fn perturb(&self, gt: &ModelOf<Self>, close: bool, rng: &mut dyn rand::RngCore) -> ModelOf<Self>;
    /// Coordinate units per predictor output unit.
    fn output_scale(&self) -> f64 {
        1.0
    }
}

/// Fraction of predictions within `radius` of their ground truth.
pub fn inlier_ratio(pred: &[Vec3<f64>], gt: &[Vec3<f64>], radius: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if gt.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| norm3(sub(**a, **b)) < radius).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Distance between two lines in (slope, intercept) space.
pub fn line_loss(h: &LineModel<f64>, gt: &LineModel<f64>) -> f64 {
    ((h.a - gt.a).powi(2) + (h.b - gt.b).powi(2)).sqrt()
}

// ---------------------------------------------------------------- lines

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSample {
    pub x: f64,
    pub y: f64,
    /// `(x, y + noise)`.
    pub features: [f64; 2],
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineDataset {
    pub line: LineModel<f64>,
    pub noise_sigma: f64,
    pub points: Vec<LineSample>,
}

impl LineDataset {
    pub fn outlier_count(&self) -> usize {
        self.points.iter().filter(|p| p.outlier).count()
    }

    pub fn to_frame(&self) -> Frame<LinePoint<f64>, LineModel<f64>> {
        Frame {
            data: self.points.iter().map(|p| LinePoint::new(p.x, p.y)).collect(),
            features: self.points.iter().map(|p| p.features.to_vec()).collect(),
            gt_coords: self.points.iter().map(|p| p.y).collect(),
            gt_model: self.line,
        }
    }
}

const LINE_X_RANGE: f64 = 5.0;
/// Outliers sit this far beyond the 3-sigma band, at most.
const LINE_OUTLIER_SPAN: f64 = 5.0;
const LINE_OUTLIER_MARGIN: f64 = 0.5;

/// Points on a random line `y = a x + b`, `x` uniform in [-5, 5]. Inliers
/// carry Gaussian noise truncated to 3 sigma; each point independently
/// becomes an outlier with probability `outlier_ratio`, displaced to
/// between 0.5 and 5.5 units beyond the band.
pub fn generate_line_dataset(n_points: usize, outlier_ratio: f64, noise_sigma: f64, seed: u64) -> Result<LineDataset> {
    if !(0.0..1.0).contains(&outlier_ratio) {
        return Err(Error::InvalidConfig(format!("outlier ratio {outlier_ratio} outside [0, 1)")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise sigma {noise_sigma} must be non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let line = LineModel {
        a: rng.gen_range(-1.0..1.0),
        b: rng.gen_range(-2.0..2.0),
    };
    let band = 3.0 * noise_sigma;
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let draw_noise = |rng: &mut ChaCha8Rng| {
        if noise_sigma == 0.0 {
            return 0.0;
        }
        loop {
            let n: f64 = normal.sample(rng);
            if n.abs() <= band {
                return n;
            }
        }
    };
    let points = (0..n_points)
        .map(|_| {
            let x = rng.gen_range(-LINE_X_RANGE..LINE_X_RANGE);
            let outlier = rng.gen_bool(outlier_ratio);
            let y = if outlier {
                let off = band + rng.gen_range(LINE_OUTLIER_MARGIN..LINE_OUTLIER_MARGIN + LINE_OUTLIER_SPAN);
                line.eval(x) + if rng.gen_bool(0.5) { off } else { -off }
            } else {
                line.eval(x) + draw_noise(&mut rng)
            };
            let fy = y + draw_noise(&mut rng);
            LineSample {
                x,
                y,
                features: [x, fy],
                outlier,
            }
        })
        .collect();
    Ok(LineDataset {
        line,
        noise_sigma,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineProblemConfig {
    pub train_instances: usize,
    pub test_instances: usize,
    pub points: usize,
    pub outlier_ratio: f64,
    pub noise_sigma: f64,
    pub cap: f64,
    pub seed: u64,
}

impl Default for LineProblemConfig {
    fn default() -> Self {
        Self {
            train_instances: 64,
            test_instances: 32,
            points: 6,
            outlier_ratio: 0.3,
            noise_sigma: 0.1,
            cap: 10.0,
            seed: 0,
        }
    }
}

/// Many independent line instances.
#[derive(Debug, Clone)]
pub struct LineProblem {
    pub estimator: LineEstimator<f64>,
    pub train: Vec<Frame<LinePoint<f64>, LineModel<f64>>>,
    pub test: Vec<Frame<LinePoint<f64>, LineModel<f64>>>,
}

impl LineProblem {
    pub fn generate(cfg: &LineProblemConfig) -> Result<Self> {
        let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut make = |n: usize| -> Result<Vec<_>> {
            (0..n)
                .map(|_| generate_line_dataset(cfg.points, cfg.outlier_ratio, cfg.noise_sigma, seeds.gen()).map(|d| d.to_frame()))
                .collect()
        };
        let train = make(cfg.train_instances)?;
        let test = make(cfg.test_instances)?;
        Ok(Self {
            estimator: LineEstimator { cap: cfg.cap },
            train,
            test,
        })
    }
}

/// Line perturbations: a random direction in (a, b) with length uniform in
/// [0, 0.5) (close) or [0.5, 3) (far).
const LINE_THRESHOLD: f64 = 0.5;

impl Problem for LineProblem {
    type Est = LineEstimator<f64>;

    fn estimator(&self) -> &Self::Est {
        &self.estimator
    }

    fn feature_dim(&self) -> usize {
        2
    }

    fn train_frames(&self) -> &[FrameOf<Self>] {
        &self.train
    }

    fn test_frames(&self) -> &[FrameOf<Self>] {
        &self.test
    }

    fn task_loss(&self, h: &LineModel<f64>, gt: &LineModel<f64>) -> f64 {
        line_loss(h, gt)
    }

    fn loss_threshold(&self) -> f64 {
        LINE_THRESHOLD
    }

    fn perturb(&self, gt: &LineModel<f64>, close: bool, rng: &mut dyn rand::RngCore) -> LineModel<f64> {
        let r = if close {
            rng.gen_range(0.0..LINE_THRESHOLD)
        } else {
            rng.gen_range(LINE_THRESHOLD..6.0 * LINE_THRESHOLD)
        };
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        LineModel {
            a: gt.a + r * phi.cos(),
            b: gt.b + r * phi.sin(),
        }
    }
}

// ---------------------------------------------------------------- scenes

/// Camera placement: centres on a circle of `radius` (cm) around the room
/// centre, looking outwards with yaw/pitch jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrbitParams {
    pub radius: f64,
    pub radius_jitter: f64,
    pub height_jitter: f64,
    pub yaw_jitter_deg: f64,
    pub pitch_jitter_deg: f64,
}

impl Default for OrbitParams {
    fn default() -> Self {
        Self {
            radius: 100.0,
            radius_jitter: 20.0,
            height_jitter: 20.0,
            yaw_jitter_deg: 30.0,
            pitch_jitter_deg: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub train_frames: usize,
    pub test_frames: usize,
    /// Cells per side of the prediction grid.
    pub grid: usize,
    /// Edge length of the room (cm); the room height is half of it.
    pub scene_extent: f64,
    pub orbit: OrbitParams,
    pub image_width: f64,
    pub image_height: f64,
    pub focal: f64,
    /// Standard deviation of the coordinate noise in the features (cm).
    pub feature_noise: f64,
    /// Per-frame structured-outlier fraction `lo + (hi - lo) * u^outlier_power`
    /// with `u` uniform in [0, 1).
    pub outlier_range: [f64; 2],
    /// Values above 1 favour low outlier fractions. With a uniform draw
    /// over [0.1, 0.9] half of all training cells are outliers, where the
    /// coordinate regression breaks down.
    pub outlier_power: f64,
    /// Depth relief of the wall texture (cm).
    pub relief: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            train_frames: 200,
            test_frames: 100,
            grid: 20,
            scene_extent: 600.0,
            orbit: OrbitParams::default(),
            image_width: 640.0,
            image_height: 480.0,
            focal: 525.0,
            feature_noise: 0.5,
            outlier_range: [0.1, 0.9],
            outlier_power: 3.0,
            relief: 20.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn intrinsics(&self) -> Intrinsics<f64> {
        Intrinsics::new(self.focal, self.focal, self.image_width / 2.0, self.image_height / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 8 {
            return Err(Error::InvalidConfig(format!("grid {} below 8x8", self.grid)));
        }
        let [lo, hi] = self.outlier_range;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(Error::InvalidConfig("outlier range must satisfy 0 <= lo <= hi < 1".into()));
        }
        if !(self.outlier_power > 0.0) {
            return Err(Error::InvalidConfig("outlier power must be positive".into()));
        }
        let half = self.scene_extent / 4.0;
        if self.orbit.radius + self.orbit.radius_jitter >= self.scene_extent / 2.0 - self.relief
            || self.orbit.height_jitter >= half - self.relief
        {
            return Err(Error::InvalidConfig("camera orbit leaves the room".into()));
        }
        if !(self.feature_noise >= 0.0 && self.focal > 0.0 && self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(Error::InvalidConfig("noise, focal length and image size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    /// Ground-truth scene-to-camera pose.
    pub pose: Pose<f64>,
    /// Pixel of each grid cell in row-major grid order (px).
    pub pixels: Vec<[f64; 2]>,
    /// Ground-truth scene coordinate of each cell (cm).
    pub coords: Vec<Vec3<f64>>,
    /// Predictor input per cell.
    pub features: Vec<Vec<f64>>,
    /// Cells whose features encode a coordinate from elsewhere.
    pub outlier: Vec<bool>,
}

/// Scale of the coordinate encoding: features hold metres, the scene cm.
pub const FEATURE_SCALE: f64 = 100.0;
pub const SCENE_FEATURE_DIM: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDataset {
    pub version: u32,
    pub config: SceneConfig,
    pub intrinsics: Intrinsics<f64>,
    pub train: Vec<SceneFrame>,
    pub test: Vec<SceneFrame>,
}

/// Camera looking along `forward` (scene z is up); returns the
/// scene-to-camera pose for centre `c`.
fn look_pose(c: Vec3<f64>, forward: Vec3<f64>) -> Pose<f64> {
    let f = scale(forward, 1.0 / norm3(forward));
    let right = cross(f, [0.0, 0.0, 1.0]);
    let right = scale(right, 1.0 / norm3(right));
    let down = cross(f, right);
    // rows of the scene-to-camera rotation are the camera axes in scene frame
    let r: Mat3<f64> = [right, down, f];
    let t = scale(crate::geometry::mat_vec(&r, c), -1.0);
    Pose::from_rotation_matrix(&r, t)
}

fn wall_texture(p: Vec3<f64>, relief: f64) -> f64 {
    relief * 0.5 * ((p[0] * 0.031 + p[2] * 0.017).sin() * (p[1] * 0.023 - p[2] * 0.029).cos() + (p[0] * 0.011 - p[1] * 0.013).sin())
}

/// First intersection of the ray `c + s d` with the room walls, pushed
/// along the ray by the wall texture.
fn cast(c: Vec3<f64>, d: Vec3<f64>, half: Vec3<f64>, relief: f64) -> Vec3<f64> {
    let mut s = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() > 1e-12 {
            let bound = if d[k] > 0.0 { half[k] } else { -half[k] };
            s = s.min((bound - c[k]) / d[k]);
        }
    }
    let hit = crate::geometry::add(c, scale(d, s));
    let s = s - relief - wall_texture(hit, relief);
    crate::geometry::add(c, scale(d, s))
}

fn encode(y: Vec3<f64>, p: [f64; 2], cfg: &SceneConfig) -> Vec<f64> {
    vec![
        y[0] / FEATURE_SCALE,
        y[1] / FEATURE_SCALE,
        y[2] / FEATURE_SCALE,
        p[0] / cfg.image_width - 0.5,
        p[1] / cfg.image_height - 0.5,
    ]
}

fn generate_scene_frame(cfg: &SceneConfig, c: &Intrinsics<f64>, index: usize, count: usize, rng: &mut ChaCha8Rng) -> SceneFrame {
    let o = &cfg.orbit;
    let azimuth = std::f64::consts::TAU * (index as f64 + rng.gen_range(0.0..0.5)) / count.max(1) as f64;
    let radius = o.radius + rng.gen_range(-1.0..=1.0) * o.radius_jitter;
    let centre = [radius * azimuth.cos(), radius * azimuth.sin(), rng.gen_range(-1.0..=1.0) * o.height_jitter];
    let yaw = azimuth + rng.gen_range(-1.0..=1.0) * o.yaw_jitter_deg.to_radians();
    let pitch = rng.gen_range(-1.0..=1.0) * o.pitch_jitter_deg.to_radians();
    let pose = look_pose(centre, [yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin()]);
    let r_cw = transpose(&pose.rotation());
    let half = [cfg.scene_extent / 2.0, cfg.scene_extent / 2.0, cfg.scene_extent / 4.0];

    let g = cfg.grid;
    let mut pixels = Vec::with_capacity(g * g);
    let mut coords = Vec::with_capacity(g * g);
    for row in 0..g {
        for col in 0..g {
            let cell = [
                (col as f64 + rng.gen_range(0.25..0.75)) * cfg.image_width / g as f64,
                (row as f64 + rng.gen_range(0.25..0.75)) * cfg.image_height / g as f64,
            ];
            let ray = crate::geometry::mat_vec(&r_cw, c.unproject(cell, 1.0));
            let y = cast(centre, ray, half, cfg.relief);
            // re-project so the pixel is exactly the image of y
            let p = project(c, &pose, y).expect("scene point in front of camera");
            pixels.push(p);
            coords.push(y);
        }
    }

    let noise = Normal::new(0.0, cfg.feature_noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let [lo, hi] = cfg.outlier_range;
    let fraction = if hi > lo {
        lo + (hi - lo) * rng.gen::<f64>().powf(cfg.outlier_power)
    } else {
        lo
    };
    let n = g * g;
    let n_out = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut outlier = vec![false; n];
    for &i in &order[..n_out] {
        outlier[i] = true;
    }
    let features = (0..n)
        .map(|i| {
            let mut y = coords[i];
            if outlier[i] {
                // a coordinate seen elsewhere in the image
                loop {
                    let j = rng.gen_range(0..n);
                    if norm3(sub(coords[j], coords[i])) > 4.0 * INLIER_RADIUS_CM {
                        y = coords[j];
                        break;
                    }
                }
            }
            if cfg.feature_noise > 0.0 {
                for v in &mut y {
                    *v += noise.sample(rng);
                }
            }
            encode(y, pixels[i], cfg)
        })
        .collect();
    SceneFrame {
        pose,
        pixels,
        coords,
        features,
        outlier,
    }
}

/// Frames are generated independently from per-frame seeds drawn from
/// `cfg.seed`; train frames are spread along one orbit, test frames along
/// a second one.
pub fn generate_scene_dataset(cfg: &SceneConfig) -> Result<SceneDataset> {
    cfg.validate()?;
    let c = cfg.intrinsics();
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut make = |count: usize| -> Vec<SceneFrame> {
        (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds.gen());
                generate_scene_frame(cfg, &c, i, count, &mut rng)
            })
            .collect()
    };
    let train = make(cfg.train_frames);
    let test = make(cfg.test_frames);
    Ok(SceneDataset {
        version: DATASET_VERSION,
        config: cfg.clone(),
        intrinsics: c,
        train,
        test,
    })
}

impl SceneDataset {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: SceneDataset = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        if d.version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {}", d.version)));
        }
        Ok(d)
    }

    /// Splits off the last `fraction` of the training frames (consecutive
    /// along the orbit) as a validation set.
    pub fn validation_split(&self, fraction: f64) -> (&[SceneFrame], &[SceneFrame]) {
        let n = self.train.len();
        let k = ((n as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
        self.train.split_at(n - k)
    }

    pub fn into_problem(self, cap: f64) -> SceneProblem {
        let to_frame = |f: SceneFrame| Frame {
            data: f
                .pixels
                .iter()
                .enumerate()
                .map(|(i, &p)| Correspondence::new(p, [0.0; 3], i))
                .collect(),
            features: f.features,
            gt_coords: f.coords.iter().flatten().copied().collect(),
            gt_model: f.pose,
        };
        SceneProblem {
            estimator: PnpEstimator::new(self.intrinsics, cap),
            train: self.train.into_iter().map(to_frame).collect(),
            test: self.test.into_iter().map(to_frame).collect(),
        }
    }
}

/// Angle (deg) and distance (cm) ranges for pose perturbations, below and
/// above the 5 deg / 5 cm threshold.
pub const CLOSE_RANGE: ([f64; 2], [f64; 2]) = ([0.0, 5.0], [0.0, 5.0]);
pub const FAR_RANGE: ([f64; 2], [f64; 2]) = ([5.0, 30.0], [5.0, 50.0]);
pub const POSE_THRESHOLD: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct SceneProblem {
    pub estimator: PnpEstimator<f64>,
    pub train: Vec<Frame<Correspondence<f64>, Pose<f64>>>,
    pub test: Vec<Frame<Correspondence<f64>, Pose<f64>>>,
}

impl SceneProblem {
    pub fn new(dataset: SceneDataset) -> Self {
        dataset.into_problem(DEFAULT_ERROR_CAP)
    }
}

impl Problem for SceneProblem {
    type Est = PnpEstimator<f64>;

    fn estimator(&self) -> &Self::Est {
        &self.estimator
    }

    fn feature_dim(&self) -> usize {
        SCENE_FEATURE_DIM
    }

    fn train_frames(&self) -> &[FrameOf<Self>] {
        &self.train
    }

    fn test_frames(&self) -> &[FrameOf<Self>] {
        &self.test
    }

    fn task_loss(&self, h: &Pose<f64>, gt: &Pose<f64>) -> f64 {
        pose_loss(h, gt)
    }

    fn loss_threshold(&self) -> f64 {
        POSE_THRESHOLD
    }

    fn perturb(&self, gt: &Pose<f64>, close: bool, rng: &mut dyn rand::RngCore) -> Pose<f64> {
        let (angles, dists) = if close { CLOSE_RANGE } else { FAR_RANGE };
        let angle = rng.gen_range(angles[0]..angles[1]);
        let dist = rng.gen_range(dists[0]..dists[1]);
        perturb_pose(gt, angle, dist, rng)
    }

    /// The predictor works in metres, like the features.
    fn output_scale(&self) -> f64 {
        FEATURE_SCALE
    }
}

/// Rotates the camera about a random axis through its centre by
/// `angle_deg` and moves the centre by `dist_cm` in a random direction.
/// The two components are independent, so `pose_loss(result, h)` equals
/// `max(angle_deg, dist_cm)`.
pub fn perturb_pose(h: &Pose<f64>, angle_deg: f64, dist_cm: f64, rng: &mut dyn rand::RngCore) -> Pose<f64> {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let delta = Pose::new(scale(axis, angle_deg.to_radians()), [0.0; 3]);
    // rotate in the camera frame, then re-anchor at the moved centre
    let rotated = delta.compose(h);
    let centre = crate::geometry::add(h.camera_center(), scale(dir, dist_cm));
    let r = rotated.rotation();
    let t = scale(crate::geometry::mat_vec(&r, centre), -1.0);
    Pose::new(rotated.theta, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_errors, rotation_angle};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    #[test]
    fn line_examples() {
        let d = generate_line_dataset(50, 0.0, 0.0, 3).unwrap();
        for p in &d.points {
            assert_abs_diff_eq!(p.y, d.line.eval(p.x), epsilon = 1e-12);
            assert_eq!(p.features, [p.x, p.y]);
        }
        assert_eq!(generate_line_dataset(50, 0.4, 0.2, 9).unwrap(), generate_line_dataset(50, 0.4, 0.2, 9).unwrap());
        assert!(generate_line_dataset(5, 1.0, 0.1, 0).is_err());
        assert!(generate_line_dataset(5, 0.1, -1.0, 0).is_err());
    }

    #[test]
    fn line_band_invariant() {
        for seed in 0..50 {
            let d = generate_line_dataset(40, 0.4, 0.3, seed).unwrap();
            for p in &d.points {
                let r = (p.y - d.line.eval(p.x)).abs();
                if p.outlier {
                    assert!(r > 3.0 * d.noise_sigma);
                } else {
                    assert!(r <= 3.0 * d.noise_sigma);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_line_points_respect_the_band(n in 2usize..80, ratio in 0.0f64..0.9, sigma in 0.0f64..0.5, seed in any::<u64>()) {
            let d = generate_line_dataset(n, ratio, sigma, seed).unwrap();
            prop_assert_eq!(d.points.len(), n);
            for p in &d.points {
                let r = (p.y - d.line.eval(p.x)).abs();
                prop_assert_eq!(p.outlier, r > 3.0 * sigma);
            }
        }

        #[test]
        fn prop_scene_pixels_are_projections(seed in any::<u64>(), grid in 8usize..14, power in 0.5f64..4.0) {
            let cfg = SceneConfig { grid, outlier_power: power, train_frames: 1, test_frames: 1, seed, ..Default::default() };
            let d = generate_scene_dataset(&cfg).unwrap();
            for f in d.train.iter().chain(&d.test) {
                let outliers = f.outlier.iter().filter(|&&o| o).count() as f64 / (grid * grid) as f64;
                prop_assert!(outliers >= 0.1 - 0.5 / (grid * grid) as f64 && outliers <= 0.9 + 0.5 / (grid * grid) as f64);
                for (p, y) in f.pixels.iter().zip(&f.coords) {
                    let q = project(&d.intrinsics, &f.pose, *y).unwrap();
                    prop_assert!((q[0] - p[0]).abs() < 1e-9 && (q[1] - p[1]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn line_outlier_frequency() {
        // mean of 200 Binomial(100, 0.4) counts: sd of the mean ~ 0.35
        let total: usize = (0..200).map(|s| generate_line_dataset(100, 0.4, 0.1, s).unwrap().outlier_count()).sum();
        let mean = total as f64 / 200.0;
        assert!((mean - 40.0).abs() < 1.5, "{mean}");
    }

    #[test]
    fn inlier_ratio_examples() {
        let gt: Vec<Vec3<f64>> = (0..10).map(|i| [i as f64, 0.0, 100.0]).collect();
        assert_eq!(inlier_ratio(&gt, &gt, 10.0).unwrap(), 1.0);
        let far: Vec<Vec3<f64>> = gt.iter().map(|y| [y[0] + 20.0, y[1], y[2]]).collect();
        assert_eq!(inlier_ratio(&far, &gt, 10.0).unwrap(), 0.0);
        let half: Vec<Vec3<f64>> = gt.iter().enumerate().map(|(i, y)| if i % 2 == 0 { *y } else { far[i] }).collect();
        assert_eq!(inlier_ratio(&half, &gt, 10.0).unwrap(), 0.5);
        assert!(inlier_ratio(&gt[..3], &gt, 10.0).is_err());
    }

    fn small_scene(seed: u64) -> SceneConfig {
        SceneConfig {
            train_frames: 6,
            test_frames: 3,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn scene_projection_identity() {
        let d = generate_scene_dataset(&small_scene(1)).unwrap();
        for f in d.train.iter().chain(&d.test) {
            assert_eq!(f.pixels.len(), 400);
            for (p, y) in f.pixels.iter().zip(&f.coords) {
                let q = project(&d.intrinsics, &f.pose, *y).unwrap();
                assert!((q[0] - p[0]).abs() < 1e-9 && (q[1] - p[1]).abs() < 1e-9);
                assert!(p[0] >= 0.0 && p[0] <= 640.0 && p[1] >= 0.0 && p[1] <= 480.0);
            }
        }
    }

    #[test]
    fn scene_is_reproducible_and_serializes() {
        let a = generate_scene_dataset(&small_scene(4)).unwrap();
        let b = generate_scene_dataset(&small_scene(4)).unwrap();
        assert_eq!(a, b);
        let back = SceneDataset::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, back);
        assert!(generate_scene_dataset(&SceneConfig { grid: 6, ..small_scene(0) }).is_err());
    }

    #[test]
    fn perturbation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Pose::new([0.3, -0.2, 0.1], [10.0, -20.0, 200.0]);
        assert_abs_diff_eq!(pose_loss(&perturb_pose(&h, 0.0, 0.0, &mut rng), &h), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(pose_loss(&perturb_pose(&h, 5.0, 0.0, &mut rng), &h), 5.0, epsilon = 1e-6);
        assert_abs_diff_eq!(pose_loss(&perturb_pose(&h, 3.0, 7.0, &mut rng), &h), 7.0, epsilon = 1e-6);
        for _ in 0..100 {
            let a = rng.gen_range(0.0..30.0);
            let d = rng.gen_range(0.0..50.0);
            let p = perturb_pose(&h, a, d, &mut rng);
            let (ea, ed) = pose_errors(&p, &h);
            assert_abs_diff_eq!(ea, a, epsilon = 1e-6);
            assert_abs_diff_eq!(ed, d, epsilon = 1e-6);
            assert_abs_diff_eq!(rotation_angle(p.theta, h.theta), a, epsilon = 1e-6);
        }
    }
}
