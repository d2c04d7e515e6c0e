use dsac_core::consensus::Strategy;
use dsac_core::diffgrad::{infer_with, PipelineConfig};
use dsac_core::geometry::pose_errors;
use dsac_core::models::Mlp;
use dsac_core::problems::{Problem, SceneProblem};
use dsac_core::solvers::refine_traced;
use dsac_core::training::predict_data;
use dsac_core::Error;
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Rotation (degrees) and translation (cm) bounds of an accurate pose.
pub const ACCURACY_DEG: f64 = 5.0;
pub const ACCURACY_CM: f64 = 5.0;

/// Which frames to evaluate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Outcome of one frame. Error fields are `None` when the pool had no
/// valid hypothesis; such frames count as failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    pub rotation_deg: Option<f64>,
    pub translation_cm: Option<f64>,
    /// `max(rotation_deg, translation_cm)`.
    pub pose_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub selected: Option<usize>,
    /// DSAC only: probability mass of hypotheses whose refined pose is
    /// accurate.
    pub accurate_mass: Option<f64>,
}

impl FrameResult {
    pub fn degenerate(&self) -> bool {
        self.pose_loss.is_none()
    }

    pub fn accurate(&self) -> bool {
        matches!((self.rotation_deg, self.translation_cm), (Some(r), Some(t)) if r < ACCURACY_DEG && t < ACCURACY_CM)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub frames: Vec<FrameResult>,
    /// Fraction of frames with rotation below 5 degrees and translation
    /// below 5 cm.
    pub accuracy: f64,
    /// DSAC only: mean accurate mass, the accuracy averaged over the
    /// selection draw.
    pub expected_accuracy: Option<f64>,
    /// `None` when more than half of the frames are degenerate.
    pub median_rotation_deg: Option<f64>,
    pub median_translation_cm: Option<f64>,
    /// Over the non-degenerate frames.
    pub mean_entropy: f64,
    pub degenerate_frames: usize,
}

impl EvalReport {
    /// Summarises per-frame results; every statistic is derived from
    /// `frames`.
    pub fn from_frames(strategy: Strategy, seed: u64, frames: Vec<FrameResult>) -> Self {
        let n = frames.len().max(1) as f64;
        let accuracy = frames.iter().filter(|f| f.accurate()).count() as f64 / n;
        let expected_accuracy = if strategy == Strategy::Dsac {
            Some(frames.iter().map(|f| f.accurate_mass.unwrap_or(0.0)).sum::<f64>() / n)
        } else {
            None
        };
        let entropies: Vec<f64> = frames.iter().filter_map(|f| f.entropy).collect();
        let mean_entropy = if entropies.is_empty() {
            0.0
        } else {
            entropies.iter().sum::<f64>() / entropies.len() as f64
        };
        Self {
            strategy,
            seed,
            accuracy,
            expected_accuracy,
            median_rotation_deg: median_with_failures(frames.iter().map(|f| f.rotation_deg)),
            median_translation_cm: median_with_failures(frames.iter().map(|f| f.translation_cm)),
            mean_entropy,
            degenerate_frames: frames.iter().filter(|f| f.degenerate()).count(),
            frames,
        }
    }

    /// Accuracy of the strategy's own selection: the expected accuracy for
    /// DSAC, the plain accuracy otherwise.
    pub fn native_accuracy(&self) -> f64 {
        self.expected_accuracy.unwrap_or(self.accuracy)
    }
}

/// Median where missing values rank above everything else.
fn median_with_failures(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut v: Vec<f64> = values.map(|x| x.unwrap_or(f64::INFINITY)).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    };
    m.is_finite().then_some(m)
}

/// Runs the full pipeline on every frame of `split` with `strategy`.
pub fn evaluate<R: Rng>(
    problem: &SceneProblem,
    split: Split,
    w: &Mlp<f64>,
    v: &Mlp<f64>,
    strategy: Strategy,
    pipeline: &PipelineConfig,
    seed: u64,
    rng: &mut R,
) -> dsac_core::Result<EvalReport> {
    let frames = match split {
        Split::Train => problem.train_frames(),
        Split::Test => problem.test_frames(),
    };
    let est = problem.estimator();
    // one generator per frame, so equal `rng` states give equal pools
    // whatever the networks and strategy
    let base: u64 = rng.gen();
    let mut results = Vec::with_capacity(frames.len());
    for (k, frame) in frames.iter().enumerate() {
        let data = predict_data(problem, frame, w)?;
        let mut frame_rng = ChaCha8Rng::seed_from_u64(base);
        frame_rng.set_stream(k as u64);
        let inference = match infer_with(est, &data, v, strategy, pipeline, &mut frame_rng) {
            Ok(inf) => inf,
            Err(Error::AllDegenerate { .. }) | Err(Error::AllInvalid) => {
                warn!("frame {k}: no valid hypothesis, counted as a failure");
                results.push(FrameResult {
                    frame: k,
                    rotation_deg: None,
                    translation_cm: None,
                    pose_loss: None,
                    entropy: None,
                    selected: None,
                    accurate_mass: (strategy == Strategy::Dsac).then_some(0.0),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let (rot, trans) = pose_errors(&inference.refined.model, &frame.gt_model);
        let accurate_mass = (strategy == Strategy::Dsac).then(|| {
            inference
                .dist
                .support
                .iter()
                .zip(&inference.dist.probs)
                .filter(|&(&i, _)| {
                    let h = inference.pool.model(i).expect("support entries are valid");
                    let (r, t) = pose_errors(&refine_traced(est, h, &data, &pipeline.refinement).model, &frame.gt_model);
                    r < ACCURACY_DEG && t < ACCURACY_CM
                })
                .map(|(_, &p)| p)
                .sum()
        });
        results.push(FrameResult {
            frame: k,
            rotation_deg: Some(rot),
            translation_cm: Some(trans),
            pose_loss: Some(rot.max(trans)),
            entropy: Some(inference.entropy),
            selected: inference.selected,
            accurate_mass,
        });
    }
    Ok(EvalReport::from_frames(strategy, seed, results))
}
