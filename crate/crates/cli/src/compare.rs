use std::io::Write;

use anyhow::{Context, Result};
use dsac_core::consensus::Strategy;
use dsac_core::diffgrad::PipelineConfig;
use dsac_core::models::Mlp;
use dsac_core::problems::{generate_scene_dataset, SceneProblem};
use dsac_core::training::{train_componentwise, train_end_to_end_with, LogRecord};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{evaluate, EvalReport, Split};
use crate::experiment::ExperimentConfig;

/// How a parameter set was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Training {
    Componentwise,
    #[serde(rename = "end-to-end")]
    EndToEnd,
}

impl Training {
    pub fn name(self) -> &'static str {
        match self {
            Training::Componentwise => "componentwise",
            Training::EndToEnd => "end-to-end",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedParams {
    pub strategy: Strategy,
    pub training: Training,
    pub w: Mlp<f64>,
    pub v: Mlp<f64>,
}

/// Accuracy of one parameter set under its own selection and under argmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationEntry {
    pub trained_with: Strategy,
    pub native: EvalReport,
    pub argmax: EvalReport,
}

impl RestorationEntry {
    /// `argmax - native` accuracy; negative when argmax selection hurts.
    pub fn delta(&self) -> f64 {
        self.argmax.accuracy - self.native.native_accuracy()
    }
}

/// Everything produced for one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    /// Componentwise parameters under each strategy, in [`Strategy::ALL`]
    /// order.
    pub componentwise: Vec<EvalReport>,
    /// End-to-end trained parameters under their own strategy; RANSAC is
    /// not trainable end-to-end and repeats its componentwise report.
    pub end_to_end: Vec<EvalReport>,
    pub restoration: Vec<RestorationEntry>,
    #[serde(skip)]
    pub logs: Vec<LogRecord>,
    #[serde(skip)]
    pub params: Vec<TrainedParams>,
}

impl SeedRun {
    pub fn report(&self, training: Training, strategy: Strategy) -> &EvalReport {
        let reports = match training {
            Training::Componentwise => &self.componentwise,
            Training::EndToEnd => &self.end_to_end,
        };
        reports
            .iter()
            .find(|r| r.strategy == strategy)
            .expect("every strategy is evaluated")
    }

    pub fn restoration(&self, strategy: Strategy) -> &RestorationEntry {
        self.restoration
            .iter()
            .find(|r| r.trained_with == strategy)
            .expect("every strategy is restored")
    }

    /// Mean entropy of the componentwise score distribution. The scorer is
    /// shared by all strategies, so the pools differ only by sampling.
    pub fn init_entropy(&self) -> f64 {
        self.report(Training::Componentwise, Strategy::Dsac).mean_entropy
    }
}

/// Generator for one seed and purpose. Evaluations share stream 0 so
/// that all parameter sets and strategies are compared on the same pools.
pub fn eval_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream + 1);
    rng
}

/// Evaluates trained parameters under argmax selection and under their own
/// strategy. `native` reuses an existing evaluation of the own strategy.
pub fn argmax_restoration(
    problem: &SceneProblem,
    params: &TrainedParams,
    native: Option<EvalReport>,
    pipeline: &PipelineConfig,
    seed: u64,
) -> dsac_core::Result<RestorationEntry> {
    let native = match native {
        Some(r) => r,
        None => evaluate(
            problem,
            Split::Test,
            &params.w,
            &params.v,
            params.strategy,
            pipeline,
            seed,
            &mut eval_rng(seed, 0),
        )?,
    };
    let argmax = if params.strategy == Strategy::Ransac {
        native.clone()
    } else {
        evaluate(
            problem,
            Split::Test,
            &params.w,
            &params.v,
            Strategy::Ransac,
            pipeline,
            seed,
            &mut eval_rng(seed, 0),
        )?
    };
    Ok(RestorationEntry {
        trained_with: params.strategy,
        native,
        argmax,
    })
}

/// Componentwise training, end-to-end training with SoftAM and DSAC, and
/// the evaluations of one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let (scene_cfg, train_cfg) = cfg.for_seed(seed);
    let dataset = generate_scene_dataset(&scene_cfg).context("generating scene")?;
    let problem = dataset.into_problem(cfg.cap);
    let pipeline = &train_cfg.pipeline;

    info!("seed {seed}: componentwise training");
    let (w0, v0) = train_componentwise(&problem, &train_cfg)?;
    let mut componentwise = Vec::new();
    for strategy in Strategy::ALL {
        let report = evaluate(&problem, Split::Test, &w0, &v0, strategy, pipeline, seed, &mut eval_rng(seed, 0))?;
        info!("seed {seed}: componentwise {strategy} accuracy {:.3}", report.native_accuracy());
        componentwise.push(report);
    }

    let init = TrainedParams {
        strategy: Strategy::Ransac,
        training: Training::Componentwise,
        w: w0.clone(),
        v: v0.clone(),
    };
    let mut params = vec![init.clone()];
    let mut end_to_end = vec![componentwise[0].clone()];
    let mut restoration = vec![argmax_restoration(&problem, &init, Some(componentwise[0].clone()), pipeline, seed)?];
    let mut logs = Vec::new();
    for (k, strategy) in [Strategy::Softam, Strategy::Dsac].into_iter().enumerate() {
        info!("seed {seed}: end-to-end training with {strategy}");
        let mut tc = train_cfg.clone();
        tc.pipeline.strategy = strategy;
        let mut rng = eval_rng(seed, 32 + k as u64);
        let (w, v, log) = train_end_to_end_with(&problem, &w0, &v0, &tc, &mut rng, |_, _, _| Ok(()))?;
        logs.extend(log);
        let report = evaluate(&problem, Split::Test, &w, &v, strategy, pipeline, seed, &mut eval_rng(seed, 0))?;
        info!("seed {seed}: end-to-end {strategy} accuracy {:.3}", report.native_accuracy());
        let trained = TrainedParams {
            strategy,
            training: Training::EndToEnd,
            w,
            v,
        };
        restoration.push(argmax_restoration(&problem, &trained, Some(report.clone()), pipeline, seed)?);
        end_to_end.push(report);
        params.push(trained);
    }
    Ok(SeedRun {
        seed,
        componentwise,
        end_to_end,
        restoration,
        logs,
        params,
    })
}

/// Runs every configured seed; `on_seed` sees each run as it completes.
pub fn compare_strategies(cfg: &ExperimentConfig, mut on_seed: impl FnMut(&SeedRun) -> Result<()>) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run = run_seed(cfg, seed)?;
        on_seed(&run)?;
        runs.push(run);
    }
    Ok(runs)
}

/// Mean and standard error of the mean; the error is `None` below two
/// values.
pub fn mean_se(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

fn mean_of_options(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean_se(&v).0)
}

/// One row of the strategy comparison. Accuracies are fractions; the
/// DSAC rows use the expected accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub training: Training,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_se: Option<f64>,
    pub median_rotation_deg: Option<f64>,
    pub median_translation_cm: Option<f64>,
    pub entropy_mean: f64,
    pub entropy_se: Option<f64>,
    /// End-to-end minus componentwise accuracy, end-to-end rows only.
    pub delta_mean: Option<f64>,
    pub delta_se: Option<f64>,
}

pub const COMPARISON_HEADER: &str = "strategy,training,seeds,accuracy_mean,accuracy_se,median_rotation_deg,\
median_translation_cm,entropy_mean,entropy_se,delta_mean,delta_se";

/// Six rows: every strategy, componentwise then end-to-end.
pub fn comparison_table(runs: &[SeedRun]) -> Vec<ComparisonRow> {
    let mut rows = Vec::with_capacity(6);
    for strategy in Strategy::ALL {
        for training in [Training::Componentwise, Training::EndToEnd] {
            let reports: Vec<&EvalReport> = runs.iter().map(|r| r.report(training, strategy)).collect();
            let acc: Vec<f64> = reports.iter().map(|r| r.native_accuracy()).collect();
            let ent: Vec<f64> = reports.iter().map(|r| r.mean_entropy).collect();
            let (accuracy_mean, accuracy_se) = mean_se(&acc);
            let (entropy_mean, entropy_se) = mean_se(&ent);
            let (delta_mean, delta_se) = match training {
                Training::Componentwise => (None, None),
                Training::EndToEnd => {
                    let d: Vec<f64> = runs
                        .iter()
                        .map(|r| {
                            r.report(Training::EndToEnd, strategy).native_accuracy()
                                - r.report(Training::Componentwise, strategy).native_accuracy()
                        })
                        .collect();
                    let (m, se) = mean_se(&d);
                    (Some(m), se)
                }
            };
            rows.push(ComparisonRow {
                strategy,
                training,
                seeds: runs.len(),
                accuracy_mean,
                accuracy_se,
                median_rotation_deg: mean_of_options(reports.iter().map(|r| r.median_rotation_deg)),
                median_translation_cm: mean_of_options(reports.iter().map(|r| r.median_translation_cm)),
                entropy_mean,
                entropy_se,
                delta_mean,
                delta_se,
            });
        }
    }
    rows
}

/// Argmax restoration summary for one training strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationRow {
    pub trained_with: Strategy,
    pub seeds: usize,
    pub native_accuracy_mean: f64,
    pub native_accuracy_se: Option<f64>,
    pub argmax_accuracy_mean: f64,
    pub argmax_accuracy_se: Option<f64>,
    /// Argmax minus native accuracy.
    pub delta_mean: f64,
    pub delta_se: Option<f64>,
}

pub const RESTORATION_HEADER: &str = "trained_with,seeds,native_accuracy_mean,native_accuracy_se,\
argmax_accuracy_mean,argmax_accuracy_se,delta_mean,delta_se";

pub fn argmax_restoration_report(runs: &[SeedRun]) -> Vec<RestorationRow> {
    Strategy::ALL
        .into_iter()
        .map(|strategy| {
            let entries: Vec<&RestorationEntry> = runs.iter().map(|r| r.restoration(strategy)).collect();
            let native: Vec<f64> = entries.iter().map(|e| e.native.native_accuracy()).collect();
            let argmax: Vec<f64> = entries.iter().map(|e| e.argmax.accuracy).collect();
            let delta: Vec<f64> = entries.iter().map(|e| e.delta()).collect();
            let (native_accuracy_mean, native_accuracy_se) = mean_se(&native);
            let (argmax_accuracy_mean, argmax_accuracy_se) = mean_se(&argmax);
            let (delta_mean, delta_se) = mean_se(&delta);
            RestorationRow {
                trained_with: strategy,
                seeds: runs.len(),
                native_accuracy_mean,
                native_accuracy_se,
                argmax_accuracy_mean,
                argmax_accuracy_se,
                delta_mean,
                delta_se,
            }
        })
        .collect()
}

/// Writes rows as CSV with a header line.
pub fn write_csv<S: Serialize, W: Write>(rows: &[S], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
