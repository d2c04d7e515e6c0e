use dsac_core::consensus::Strategy;
use dsac_core::diffgrad::{dsac_expected_loss, PipelineConfig};
use dsac_core::models::{Mlp, MlpSpec};
use dsac_core::problems::{
    generate_scene_dataset, line_loss, LineProblem, LineProblemConfig, Problem, SceneConfig, SceneProblem,
    SCENE_FEATURE_DIM,
};
use dsac_core::solvers::{LineModel, RefinementParams};
use dsac_core::training::{
    generate_score_training_data, predict_data, spearman, train_componentwise, train_coordinate_componentwise,
    train_end_to_end, train_end_to_end_with, train_score_componentwise, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn line_problem(seed: u64, outlier_ratio: f64, noise_sigma: f64) -> LineProblem {
    LineProblem::generate(&LineProblemConfig {
        train_instances: 24,
        test_instances: 0,
        outlier_ratio,
        noise_sigma,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn small_scene(seed: u64) -> SceneProblem {
    SceneProblem::new(
        generate_scene_dataset(&SceneConfig {
            train_frames: 20,
            test_frames: 0,
            seed,
            ..Default::default()
        })
        .unwrap(),
    )
}

/// Enumerated pools, exact DSAC gradient, full finite differences.
fn line_pipeline(strategy: Strategy) -> PipelineConfig {
    PipelineConfig {
        strategy,
        enumerate: true,
        dsac_samples: 0,
        coord_step: 1e-4,
        model_step: 1e-6,
        fd_fraction: 1.0,
        refinement: RefinementParams {
            tau: 0.5,
            max_inliers: 100,
            min_inliers: 3,
            iterations: 8,
        },
        ..Default::default()
    }
}

fn line_config(seed: u64, updates: usize) -> TrainConfig {
    TrainConfig {
        seed,
        pipeline: line_pipeline(Strategy::Dsac),
        lr_coord: 1e-3,
        lr_score: 1e-3,
        lr_w: 1e-3,
        lr_v: 1e-3,
        coord_updates: 300,
        score_updates: 300,
        score_samples: 512,
        e2e_updates: updates,
        hidden: [8, 8],
        scorer_hidden: [8, 8],
        ..Default::default()
    }
}

fn mean_expected_loss(problem: &LineProblem, w: &Mlp<f64>, v: &Mlp<f64>, cfg: &PipelineConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let total: f64 = problem
        .train_frames()
        .iter()
        .map(|f| {
            let data = predict_data(problem, f, w).unwrap();
            let gt = f.gt_model;
            let loss = |h: &LineModel<f64>| line_loss(h, &gt);
            dsac_expected_loss(&problem.estimator, &data, v, &loss, cfg, &mut rng).unwrap()
        })
        .sum();
    total / problem.train_frames().len() as f64
}

#[test]
fn coordinate_training_fits_noise_free_linear_data() {
    // noise-free inliers: the target y equals the second feature exactly
    let problem = line_problem(0, 0.0, 0.0);
    let cfg = TrainConfig {
        lr_coord: 1e-3,
        coord_updates: 3000,
        hidden: [16, 16],
        ..Default::default()
    };
    let (w, history) = train_coordinate_componentwise(&problem, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(history.len(), 3000);
    let mut total = 0.0;
    let mut count = 0.0;
    for f in problem.train_frames() {
        for (x, &y) in f.features.iter().zip(&f.gt_coords) {
            total += (w.forward(x).unwrap()[0] - y).abs();
            count += 1.0;
        }
    }
    // targets span several units; Adam's step size keeps the fit jittering
    // at a few thousandths
    assert!(total / count < 1e-2, "mean coordinate loss {}", total / count);
}

#[test]
fn zero_updates_return_the_initial_networks() {
    let problem = line_problem(1, 0.3, 0.1);
    let cfg = line_config(1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w0 = Mlp::glorot(cfg.predictor_spec(2, 1), &mut rng).unwrap();
    let v0 = Mlp::glorot(MlpSpec::scorer(6), &mut rng).unwrap();
    let (w, v, log) = train_end_to_end(&problem, &w0, &v0, &cfg).unwrap();
    assert_eq!(w.params.values, w0.params.values);
    assert_eq!(v.params.values, v0.params.values);
    assert!(log.is_empty());
}

#[test]
fn score_data_is_balanced_around_the_threshold() {
    let problem = small_scene(3);
    let w = Mlp::passthrough(SCENE_FEATURE_DIM, 3).unwrap();
    let samples = generate_score_training_data(&problem, &w, 4000, 10.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let close = samples.iter().filter(|s| s.loss < problem.loss_threshold()).count() as f64 / samples.len() as f64;
    assert!((close - 0.5).abs() <= 0.05, "close fraction {close}");
    for s in &samples {
        assert_eq!(s.input.len(), 400);
        assert!((s.target + 10.0 * s.loss).abs() < 1e-9);
        assert!(s.input.iter().all(|&e| (0.0..=1.0).contains(&e)));
    }
}

#[test]
fn trained_scorer_ranks_held_out_poses() {
    let problem = small_scene(5);
    let w = Mlp::passthrough(SCENE_FEATURE_DIM, 3).unwrap();
    let cfg = TrainConfig {
        lr_score: 1e-3,
        score_updates: 1500,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let train = generate_score_training_data(&problem, &w, 2048, cfg.beta, &mut rng).unwrap();
    let (v, _) = train_score_componentwise(&train, &cfg, &mut rng).unwrap();
    let held_out = generate_score_training_data(&problem, &w, 500, cfg.beta, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let scores: Vec<f64> = held_out.iter().map(|s| v.forward(&s.input).unwrap()[0]).collect();
    let losses: Vec<f64> = held_out.iter().map(|s| s.loss).collect();
    let rho = spearman(&scores, &losses);
    assert!(rho <= -0.8, "spearman {rho}");
}

#[test]
fn componentwise_training_is_bit_reproducible() {
    let problem = line_problem(8, 0.3, 0.1);
    let cfg = line_config(8, 0);
    let (w1, v1) = train_componentwise(&problem, &cfg).unwrap();
    let (w2, v2) = train_componentwise(&problem, &cfg).unwrap();
    assert_eq!(w1.params.values, w2.params.values);
    assert_eq!(v1.params.values, v2.params.values);
}

#[test]
fn end_to_end_training_is_bit_reproducible() {
    let problem = line_problem(9, 0.3, 0.1);
    let cfg = line_config(9, 20);
    let (w0, v0) = train_componentwise(&problem, &cfg).unwrap();
    let (w1, v1, l1) = train_end_to_end(&problem, &w0, &v0, &cfg).unwrap();
    let (w2, v2, l2) = train_end_to_end(&problem, &w0, &v0, &cfg).unwrap();
    assert_eq!(w1.params.values, w2.params.values);
    assert_eq!(v1.params.values, v2.params.values);
    assert_eq!(l1, l2);
}

#[test]
fn frozen_networks_stay_bit_identical() {
    let problem = line_problem(10, 0.3, 0.1);
    let base = line_config(10, 30);
    let (w0, v0) = train_componentwise(&problem, &base).unwrap();
    let (w, v, _) = train_end_to_end(&problem, &w0, &v0, &TrainConfig { freeze_w: true, ..base.clone() }).unwrap();
    assert_eq!(w.params.values, w0.params.values);
    assert_ne!(v.params.values, v0.params.values);
    let (w, v, _) = train_end_to_end(&problem, &w0, &v0, &TrainConfig { freeze_v: true, ..base }).unwrap();
    assert_eq!(v.params.values, v0.params.values);
    assert_ne!(w.params.values, w0.params.values);
}

#[test]
fn argmax_selection_cannot_be_trained_end_to_end() {
    let problem = line_problem(11, 0.3, 0.1);
    let mut cfg = line_config(11, 5);
    cfg.pipeline.strategy = Strategy::Ransac;
    let (w0, v0) = train_componentwise(&problem, &cfg).unwrap();
    assert!(train_end_to_end(&problem, &w0, &v0, &cfg).is_err());
}

/// Expected loss on the training instances every 200 updates over 2000
/// updates of exact-gradient DSAC, for five seeds.
#[test]
fn dsac_training_decreases_the_expected_line_loss() {
    let mut decreasing = 0;
    let mut windows = 0;
    for seed in 0..5 {
        let problem = line_problem(100 + seed, 0.3, 0.1);
        let cfg = line_config(seed, 2000);
        let (w0, v0) = train_componentwise(&problem, &cfg).unwrap();
        let mut curve = vec![mean_expected_loss(&problem, &w0, &v0, &cfg.pipeline)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        train_end_to_end_with(&problem, &w0, &v0, &cfg, &mut rng, |k, w, v| {
            if (k + 1) % 200 == 0 {
                curve.push(mean_expected_loss(&problem, w, v, &cfg.pipeline));
            }
            Ok(())
        })
        .unwrap();
        assert!(curve.last().unwrap() < &curve[0], "seed {seed}: {curve:?}");
        windows += curve.len() - 1;
        decreasing += curve.windows(2).filter(|p| p[1] < p[0]).count();
    }
    let rate = decreasing as f64 / windows as f64;
    assert!(rate >= 0.9, "{decreasing} of {windows} windows decreased");
}
