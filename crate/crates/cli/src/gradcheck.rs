use std::time::Instant;

use dsac_core::consensus::Strategy;
use dsac_core::diffgrad::{dsac_expected_loss, image_gradient, infer, GradientNeeds, PipelineConfig};
use dsac_core::models::{Mlp, MlpSpec};
use dsac_core::problems::{line_loss, LineProblem, LineProblemConfig};
use dsac_core::solvers::{LineModel, RefinementParams};
use dsac_core::training::{frame_gradient, predict_data};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Points per line instance: 15 minimal sets, all enumerated.
pub const GRADCHECK_POINTS: usize = 6;

/// Analytic versus finite-difference gradient of one toy instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub seed: u64,
    pub strategy: Strategy,
    pub loss: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `|analytic - numeric| / |numeric|` over both networks.
    pub relative_error: f64,
    pub seconds: f64,
}

/// Line instance with small networks whose biases are drawn away from
/// zero; zero biases put exact ReLU kinks on the data.
pub struct LineInstance {
    pub problem: LineProblem,
    pub w: Mlp<f64>,
    pub v: Mlp<f64>,
    pub pipeline: PipelineConfig,
}

impl LineInstance {
    pub fn new(seed: u64, strategy: Strategy) -> dsac_core::Result<Self> {
        let cfg = LineProblemConfig {
            train_instances: 1,
            test_instances: 0,
            points: GRADCHECK_POINTS,
            outlier_ratio: 0.3,
            noise_sigma: 0.1,
            cap: 10.0,
            seed,
        };
        let problem = LineProblem::generate(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Mlp::glorot(MlpSpec::relu_net(vec![2, 8, 8, 1]), &mut rng)?;
        let mut v = Mlp::glorot(MlpSpec::scorer(GRADCHECK_POINTS), &mut rng)?;
        v.scale_output(3.0);
        for net in [&mut w, &mut v] {
            for l in net.params.layout.clone() {
                for b in &mut net.params.values[l.bias] {
                    *b = rng.gen_range(-0.1..0.1);
                }
            }
        }
        let pipeline = PipelineConfig {
            strategy,
            enumerate: true,
            dsac_samples: 0,
            coord_step: 1e-6,
            model_step: 1e-6,
            fd_fraction: 1.0,
            refinement: RefinementParams {
                tau: 1.0,
                max_inliers: 100,
                min_inliers: 3,
                iterations: 8,
            },
            ..Default::default()
        };
        Ok(Self { problem, w, v, pipeline })
    }

    /// Loss of the whole pipeline: the expected loss for DSAC, the loss of
    /// the refined soft average for SoftAM.
    pub fn loss(&self, w: &Mlp<f64>, v: &Mlp<f64>) -> dsac_core::Result<f64> {
        let frame = &self.problem.train[0];
        let data = predict_data(&self.problem, frame, w)?;
        let gt = frame.gt_model;
        let loss = |h: &LineModel<f64>| line_loss(h, &gt);
        // enumerated pools draw nothing from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match self.pipeline.strategy {
            Strategy::Dsac => dsac_expected_loss(&self.problem.estimator, &data, v, &loss, &self.pipeline, &mut rng),
            _ => infer(&self.problem.estimator, &data, v, &self.pipeline, &mut rng).map(|inf| loss(&inf.refined.model)),
        }
    }
}

fn central<F: Fn(&Mlp<f64>) -> dsac_core::Result<f64>>(net: &Mlp<f64>, f: F, step: f64) -> dsac_core::Result<Vec<f64>> {
    (0..net.params.len())
        .map(|i| {
            let mut a = net.clone();
            a.params.values[i] += step;
            let mut b = net.clone();
            b.params.values[i] -= step;
            Ok((f(&a)? - f(&b)?) / (2.0 * step))
        })
        .collect()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Compares the pipeline gradient of a line instance with central
/// differences of the pipeline loss in every network parameter.
pub fn line_gradcheck(seed: u64, strategy: Strategy, step: f64) -> dsac_core::Result<GradCheck> {
    let start = Instant::now();
    let inst = LineInstance::new(seed, strategy)?;
    let frame = &inst.problem.train[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = frame_gradient(&inst.problem, frame, &inst.w, &inst.v, &inst.pipeline, GradientNeeds::BOTH, &mut rng)?;
    let mut numeric = central(&inst.w, |w| inst.loss(w, &inst.v), step)?;
    numeric.extend(central(&inst.v, |v| inst.loss(&inst.w, v), step)?);
    let mut analytic = g.d_w;
    analytic.extend(g.d_v);
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let numeric_norm = norm(&numeric);
    Ok(GradCheck {
        seed,
        strategy,
        loss: g.loss,
        analytic_norm: norm(&analytic),
        numeric_norm,
        relative_error: norm(&diff) / numeric_norm.max(f64::MIN_POSITIVE),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Sampled DSAC gradient against the exact one on the same pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledCheck {
    pub seed: u64,
    pub samples: usize,
    /// Parameters whose difference exceeds three standard errors.
    pub violations: usize,
    pub max_z: f64,
    pub relative_error: f64,
    pub seconds: f64,
}

/// Compares the `samples`-draw DSAC estimate with the exact expectation in
/// the predicted coordinates and the scorer parameters. Differences are
/// reduced by a rounding allowance of `1e-9 * max|exact|` before dividing
/// by the standard error: parameters whose per-hypothesis terms coincide
/// have a standard error far below the rounding of either estimate.
pub fn sampled_vs_exact(seed: u64, samples: usize) -> dsac_core::Result<SampledCheck> {
    let start = Instant::now();
    let inst = LineInstance::new(seed, Strategy::Dsac)?;
    let frame = &inst.problem.train[0];
    let data = predict_data(&inst.problem, frame, &inst.w)?;
    let gt = frame.gt_model;
    let loss = |h: &LineModel<f64>| line_loss(h, &gt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let est = &inst.problem.estimator;
    let exact = image_gradient(est, &data, &inst.v, &loss, &inst.pipeline, GradientNeeds::BOTH, &mut rng)?;
    let sampled_cfg = PipelineConfig {
        dsac_samples: samples,
        ..inst.pipeline.clone()
    };
    let sampled = image_gradient(est, &data, &inst.v, &loss, &sampled_cfg, GradientNeeds::BOTH, &mut rng)?;
    let e = exact.gradient.flat();
    let a = sampled.gradient.flat();
    let se = sampled.std_err.expect("sampled estimates carry standard errors").flat();
    let floor = 1e-9 * e.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut violations = 0;
    let mut max_z = 0.0f64;
    for i in 0..e.len() {
        let d = ((a[i] - e[i]).abs() - floor).max(0.0);
        if se[i] > 0.0 {
            let z = d / se[i];
            max_z = max_z.max(z);
            if z > 3.0 {
                violations += 1;
            }
        } else if d > 0.0 {
            violations += 1;
        }
    }
    let diff: Vec<f64> = a.iter().zip(&e).map(|(x, y)| x - y).collect();
    Ok(SampledCheck {
        seed,
        samples,
        violations,
        max_z,
        relative_error: norm(&diff) / norm(&e).max(f64::MIN_POSITIVE),
        seconds: start.elapsed().as_secs_f64(),
    })
}
