use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dsac_core::consensus::Strategy;
use dsac_core::problems::{generate_scene_dataset, SceneDataset, SceneProblem};
use dsac_core::training::{train_componentwise, train_end_to_end_with};
use log::info;

use dsac_cli::compare::{
    argmax_restoration, argmax_restoration_report, compare_strategies, comparison_table, eval_rng, Training,
    TrainedParams,
};
use dsac_cli::eval::{evaluate, EvalReport, Split};
use dsac_cli::experiment::{ExperimentConfig, Overrides};
use dsac_cli::gradcheck::line_gradcheck;
use dsac_cli::output::{read_params, RunDir, LOG_NDJSON, REPORT_CSV, REPORT_JSON};

#[derive(Parser)]
#[command(name = "dsac", version, about = "Differentiable sample consensus experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML); missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Results directory.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Hypotheses per image [default: 256].
    #[arg(long)]
    pool_size: Option<usize>,
    /// Inlier threshold in pixels [default: 10].
    #[arg(long)]
    tau: Option<f64>,
    /// Score target scale [default: 10].
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scene of a seed and write it as JSON.
    Generate(Common),
    /// Train predictor and scorer separately, then evaluate.
    TrainComponentwise(Common),
    /// Train end-to-end from componentwise initialization, then evaluate.
    TrainE2e {
        #[command(flatten)]
        common: Common,
        /// Directory with initial checkpoints; trains componentwise when absent.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate checkpoints on the test frames.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory with w.ckpt and v.ckpt.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// All strategies, componentwise and end-to-end, over the configured seeds.
    Compare(Common),
    /// Evaluate checkpoints under argmax and under the strategy they were trained with.
    RestoreArgmax {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoints: PathBuf,
    },
    /// Check pipeline gradients against finite differences on toy line instances.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-7)]
        step: f64,
        #[arg(long, default_value_t = 10)]
        instances: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: dsac_core::Error| e.to_string())
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            strategy: self.strategy,
            pool_size: self.pool_size,
            tau: self.tau,
            beta: self.beta,
        })?;
        Ok(cfg)
    }

    fn strategy_or(&self, default: Strategy) -> Strategy {
        self.strategy.unwrap_or(default)
    }
}

/// The scene of the first configured seed.
fn scene(cfg: &ExperimentConfig) -> Result<(u64, SceneDataset)> {
    let seed = cfg.seeds[0];
    let (scene_cfg, _) = cfg.for_seed(seed);
    Ok((seed, generate_scene_dataset(&scene_cfg).context("generating scene")?))
}

fn single_report(dir: &RunDir, report: &EvalReport) -> Result<()> {
    dir.write_csv(REPORT_CSV, &report.frames)?;
    dir.write_json(REPORT_JSON, report)?;
    info!(
        "{} seed {}: accuracy {:.3}, mean entropy {:.3}, {} degenerate frames",
        report.strategy,
        report.seed,
        report.native_accuracy(),
        report.mean_entropy,
        report.degenerate_frames
    );
    Ok(())
}

fn evaluate_test(problem: &SceneProblem, params: &TrainedParams, cfg: &ExperimentConfig, seed: u64) -> Result<EvalReport> {
    let pipeline = &cfg.for_seed(seed).1.pipeline;
    Ok(evaluate(
        problem,
        Split::Test,
        &params.w,
        &params.v,
        params.strategy,
        pipeline,
        seed,
        &mut eval_rng(seed, 0),
    )?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = common.config()?;
            let dir = RunDir::create(&common.out)?;
            dir.write_config(&cfg)?;
            let (seed, dataset) = scene(&cfg)?;
            dir.write_text("scene.json", &dataset.to_json()?)?;
            info!("seed {seed}: {} train and {} test frames", dataset.train.len(), dataset.test.len());
        }
        Command::TrainComponentwise(common) => {
            let cfg = common.config()?;
            let dir = RunDir::create(&common.out)?;
            dir.write_config(&cfg)?;
            let (seed, dataset) = scene(&cfg)?;
            let problem = dataset.into_problem(cfg.cap);
            let (w, v) = train_componentwise(&problem, &cfg.for_seed(seed).1)?;
            dir.write_params(&w, &v)?;
            let params = TrainedParams {
                strategy: common.strategy_or(Strategy::Ransac),
                training: Training::Componentwise,
                w,
                v,
            };
            single_report(&dir, &evaluate_test(&problem, &params, &cfg, seed)?)?;
        }
        Command::TrainE2e { common, init } => {
            let cfg = common.config()?;
            let strategy = common.strategy_or(Strategy::Dsac);
            if strategy == Strategy::Ransac {
                bail!("end-to-end training needs --strategy softam or dsac");
            }
            let dir = RunDir::create(&common.out)?;
            dir.write_config(&cfg)?;
            let (seed, dataset) = scene(&cfg)?;
            let problem = dataset.into_problem(cfg.cap);
            let mut train_cfg = cfg.for_seed(seed).1;
            train_cfg.pipeline.strategy = strategy;
            let (w0, v0) = match init {
                Some(path) => read_params(&path)?,
                None => {
                    let (w, v) = train_componentwise(&problem, &train_cfg)?;
                    dir.subdir("init")?.write_params(&w, &v)?;
                    (w, v)
                }
            };
            let mut rng = eval_rng(seed, 32);
            let (w, v, log) = train_end_to_end_with(&problem, &w0, &v0, &train_cfg, &mut rng, |k, _, _| {
                if (k + 1) % 100 == 0 {
                    info!("update {}", k + 1);
                }
                Ok(())
            })?;
            dir.write_ndjson(LOG_NDJSON, &log)?;
            dir.write_params(&w, &v)?;
            let params = TrainedParams {
                strategy,
                training: Training::EndToEnd,
                w,
                v,
            };
            single_report(&dir, &evaluate_test(&problem, &params, &cfg, seed)?)?;
        }
        Command::Evaluate {
            common,
            checkpoints,
            split,
        } => {
            let cfg = common.config()?;
            let dir = RunDir::create(&common.out)?;
            dir.write_config(&cfg)?;
            let (seed, dataset) = scene(&cfg)?;
            let problem = dataset.into_problem(cfg.cap);
            let (w, v) = read_params(&checkpoints)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let (_, train_cfg) = cfg.for_seed(seed);
            let strategy = common.strategy_or(train_cfg.pipeline.strategy);
            let report = evaluate(&problem, split, &w, &v, strategy, &train_cfg.pipeline, seed, &mut eval_rng(seed, 0))?;
            single_report(&dir, &report)?;
        }
        Command::Compare(common) => {
            let cfg = common.config()?;
            let dir = RunDir::create(&common.out)?;
            dir.write_config(&cfg)?;
            let runs = compare_strategies(&cfg, |run| {
                let sub = dir.subdir(&format!("seed-{}", run.seed))?;
                for p in &run.params {
                    let name = match p.training {
                        Training::Componentwise => "componentwise".to_string(),
                        Training::EndToEnd => format!("e2e-{}", p.strategy),
                    };
                    sub.subdir(&name)?.write_params(&p.w, &p.v)?;
                }
                sub.write_json(REPORT_JSON, run)
            })?;
            let table = comparison_table(&runs);
            let restoration = argmax_restoration_report(&runs);
            dir.write_csv(REPORT_CSV, &table)?;
            dir.write_csv("restoration.csv", &restoration)?;
            dir.write_ndjson(LOG_NDJSON, runs.iter().flat_map(|r| &r.logs))?;
            dir.write_json(
                REPORT_JSON,
                &serde_json::json!({ "table": table, "restoration": restoration, "runs": runs }),
            )?;
            for row in &table {
                info!(
                    "{:>6} {:<13} accuracy {:.3} entropy {:.3} delta {:?}",
                    row.strategy,
                    row.training.name(),
                    row.accuracy_mean,
                    row.entropy_mean,
                    row.delta_mean
                );
            }
        }
        Command::RestoreArgmax { common, checkpoints } => {
            let cfg = common.config()?;
            let dir = RunDir::create(&common.out)?;
            dir.write_config(&cfg)?;
            let (seed, dataset) = scene(&cfg)?;
            let problem = dataset.into_problem(cfg.cap);
            let (w, v) = read_params(&checkpoints)?;
            let params = TrainedParams {
                strategy: common.strategy_or(Strategy::Dsac),
                training: Training::EndToEnd,
                w,
                v,
            };
            let entry = argmax_restoration(&problem, &params, None, &cfg.for_seed(seed).1.pipeline, seed)?;
            info!(
                "{}: native accuracy {:.3}, argmax accuracy {:.3}",
                params.strategy,
                entry.native.native_accuracy(),
                entry.argmax.accuracy
            );
            let summary = serde_json::json!({
                "trained_with": entry.trained_with,
                "native_accuracy": entry.native.native_accuracy(),
                "argmax_accuracy": entry.argmax.accuracy,
                "delta": entry.delta(),
            });
            dir.write_csv(REPORT_CSV, &[&summary])?;
            dir.write_json(REPORT_JSON, &entry)?;
        }
        Command::Gradcheck {
            common,
            step,
            instances,
        } => {
            let dir = RunDir::create(&common.out)?;
            let strategy = common.strategy_or(Strategy::Dsac);
            let first = common.seed.unwrap_or(0);
            let mut checks = Vec::new();
            for seed in first..first + instances {
                let c = line_gradcheck(seed, strategy, step)?;
                info!("{strategy} seed {seed}: relative error {:.3e}", c.relative_error);
                checks.push(c);
            }
            dir.write_csv(REPORT_CSV, &checks)?;
            dir.write_json(REPORT_JSON, &checks)?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}
