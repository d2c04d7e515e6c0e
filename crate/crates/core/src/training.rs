//! Componentwise training of the coordinate predictor and the scorer,
//! score-training data synthesis, and end-to-end training through the
//! SoftAM and DSAC pipelines.

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::Strategy;
use crate::diffgrad::{image_gradient, GradientNeeds, PipelineConfig};
use crate::error::{Error, Result};
use crate::models::{coord_loss, score_target, scorer_input, ForwardTrace, Mlp, MlpSpec};
use crate::problems::{DatumOf, FrameOf, ModelOf, Problem};
use crate::solvers::Estimator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

/// Per-parameter optimizer buffers and the learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Halve the learning rate after every this many steps.
    pub halve_every: Option<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    /// First moment (Adam) or velocity (SGD).
    pub m: Vec<f64>,
    /// Second moment (Adam only).
    pub v: Vec<f64>,
    pub step: u64,
}

/// Paper schedule for componentwise training.
pub const ADAM_HALVE_EVERY: u64 = 50_000;

impl OptimizerState {
    pub fn adam(n: usize, lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            halve_every: Some(ADAM_HALVE_EVERY),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn sgd_momentum(n: usize, lr: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            lr,
            halve_every: None,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            momentum,
            m: vec![0.0; n],
            v: Vec::new(),
            step: 0,
        }
    }

    /// Learning rate for the next step.
    pub fn current_lr(&self) -> f64 {
        match self.halve_every {
            Some(k) if k > 0 => self.lr * 0.5f64.powi((self.step / k).min(1000) as i32),
            _ => self.lr,
        }
    }

    fn check(&self, kind: OptimizerKind, params: &[f64], grad: &[f64]) -> Result<()> {
        if self.kind != kind {
            return Err(Error::InvalidConfig(format!("optimizer is {:?}, not {:?}", self.kind, kind)));
        }
        for len in [params.len(), grad.len()] {
            if len != self.m.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.m.len(),
                    got: len,
                });
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam step.
pub fn adam_step(state: &mut OptimizerState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    state.check(OptimizerKind::Adam, params, grad)?;
    let lr = state.current_lr();
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// SGD with momentum on gradients clamped elementwise to `[-clamp, clamp]`.
pub fn sgd_momentum_step(state: &mut OptimizerState, params: &mut [f64], grad: &[f64], clamp: f64) -> Result<()> {
    state.check(OptimizerKind::SgdMomentum, params, grad)?;
    if !(clamp > 0.0) {
        return Err(Error::InvalidConfig(format!("clamp {clamp} must be positive")));
    }
    let lr = state.current_lr();
    state.step += 1;
    for i in 0..params.len() {
        let g = if grad[i].is_nan() { 0.0 } else { grad[i].clamp(-clamp, clamp) };
        state.m[i] = state.momentum * state.m[i] + g;
        params[i] -= lr * state.m[i];
    }
    Ok(())
}

/// Training hyperparameters. Deserializes from TOML with every field
/// optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Strategy, pool size, refinement, finite differences and DSAC draws.
    pub pipeline: PipelineConfig,
    /// Score scale in `s* = -beta * loss`.
    pub beta: f64,
    /// Adam learning rate, coordinate predictor.
    pub lr_coord: f64,
    /// Adam learning rate, scorer.
    pub lr_score: f64,
    /// End-to-end SGD learning rate, coordinate predictor.
    pub lr_w: f64,
    /// End-to-end SGD learning rate, scorer.
    pub lr_v: f64,
    pub momentum: f64,
    /// Gradients are clamped to `[-clamp, clamp]` end-to-end.
    pub clamp: f64,
    pub batch_size: usize,
    pub coord_updates: usize,
    pub score_updates: usize,
    /// Number of synthesized (error vector, target) pairs.
    pub score_samples: usize,
    pub e2e_updates: usize,
    pub freeze_w: bool,
    pub freeze_v: bool,
    /// Recent updates inspected for all-degenerate pools.
    pub abort_window: usize,
    pub hidden: [usize; 2],
    pub scorer_hidden: [usize; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pipeline: PipelineConfig::default(),
            beta: 10.0,
            lr_coord: 1e-4,
            lr_score: 1e-4,
            lr_w: 1e-5,
            lr_v: 1e-7,
            momentum: 0.9,
            clamp: 0.1,
            batch_size: 64,
            coord_updates: 20_000,
            score_updates: 2_000,
            score_samples: 4_096,
            e2e_updates: 2_000,
            freeze_w: false,
            freeze_v: false,
            abort_window: 10,
            hidden: [64, 64],
            scorer_hidden: [64, 32],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        let rates = [self.lr_coord, self.lr_score, self.lr_w, self.lr_v];
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if !(self.clamp > 0.0) {
            return Err(Error::InvalidConfig("clamp range must be a positive half-width".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.abort_window == 0 {
            return Err(Error::InvalidConfig("batch size and abort window must be positive".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidConfig("beta must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn predictor_spec(&self, features: usize, out: usize) -> MlpSpec {
        MlpSpec::relu_net(vec![features, self.hidden[0], self.hidden[1], out])
    }

    pub fn scorer_spec(&self, errors: usize) -> MlpSpec {
        MlpSpec::relu_net(vec![errors, self.scorer_hidden[0], self.scorer_hidden[1], 1])
    }
}

/// Predicted coordinates of a frame written into its correspondence
/// template.
pub fn predict_data<P: Problem>(problem: &P, frame: &FrameOf<P>, w: &Mlp<f64>) -> Result<Vec<DatumOf<P>>> {
    let est = problem.estimator();
    let mut data = frame.data.clone();
    let scale = problem.output_scale();
    for (d, f) in data.iter_mut().zip(&frame.features) {
        let y = w.forward(f)?;
        for (c, v) in est.coord_mut(d).iter_mut().zip(&y) {
            *c = scale * v;
        }
    }
    Ok(data)
}

fn predict_traced<P: Problem>(
    problem: &P,
    frame: &FrameOf<P>,
    w: &Mlp<f64>,
) -> Result<(Vec<DatumOf<P>>, Vec<ForwardTrace<f64>>)> {
    let est = problem.estimator();
    let mut data = frame.data.clone();
    let mut traces = Vec::with_capacity(data.len());
    let scale = problem.output_scale();
    for (d, f) in data.iter_mut().zip(&frame.features) {
        let t = w.forward_trace(f)?;
        for (c, v) in est.coord_mut(d).iter_mut().zip(&t.output) {
            *c = scale * v;
        }
        traces.push(t);
    }
    Ok((data, traces))
}

fn check_frames<P: Problem>(problem: &P) -> Result<&[FrameOf<P>]> {
    let frames = problem.train_frames();
    if frames.is_empty() || frames.iter().any(|f| f.data.is_empty()) {
        return Err(Error::EmptyInput);
    }
    Ok(frames)
}

/// Fits a fresh predictor to the ground-truth coordinates with Adam on
/// mini-batches of cells drawn uniformly from all training frames. Returns
/// the predictor and the mean batch loss of every update.
pub fn train_coordinate_componentwise<P: Problem, R: Rng + ?Sized>(
    problem: &P,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Mlp<f64>, Vec<f64>)> {
    cfg.validate()?;
    let frames = check_frames(problem)?;
    let cd = problem.estimator().coord_dim();
    let mut w = Mlp::glorot(cfg.predictor_spec(problem.feature_dim(), cd), rng)?;
    let mut opt = OptimizerState::adam(w.params.len(), cfg.lr_coord);
    let mut grad = vec![0.0; w.params.len()];
    let mut history = Vec::with_capacity(cfg.coord_updates);
    let scale = problem.output_scale();
    for _ in 0..cfg.coord_updates {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let frame = &frames[rng.gen_range(0..frames.len())];
            let i = rng.gen_range(0..frame.data.len());
            let trace = w.forward_trace(&frame.features[i])?;
            let y: Vec<f64> = trace.output.iter().map(|v| scale * v).collect();
            let (l, dl) = coord_loss(&y, &frame.gt_coords[i * cd..(i + 1) * cd]);
            total += l;
            let dl: Vec<f64> = dl.iter().map(|g| scale * g).collect();
            w.backward_into(&trace, &dl, &mut grad);
        }
        let n = cfg.batch_size as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        adam_step(&mut opt, &mut w.params.values, &grad)?;
        history.push(total / n);
    }
    Ok((w, history))
}

/// Scorer input and regression target for one perturbed model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    /// Errors divided by the cap.
    pub input: Vec<f64>,
    pub target: f64,
    /// Task loss of the perturbed model.
    pub loss: f64,
}

/// Perturbs ground-truth models of random training frames, half below and
/// half above the problem's loss threshold (one fair coin per sample), and
/// records the errors of the predicted coordinates under the perturbed
/// model with target `-beta * loss`.
pub fn generate_score_training_data<P: Problem, R: Rng>(
    problem: &P,
    w: &Mlp<f64>,
    count: usize,
    beta: f64,
    rng: &mut R,
) -> Result<Vec<ScoreSample>> {
    let frames = check_frames(problem)?;
    let est = problem.estimator();
    let mut cache: Vec<Option<Vec<DatumOf<P>>>> = vec![None; frames.len()];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let k = rng.gen_range(0..frames.len());
        let frame = &frames[k];
        if cache[k].is_none() {
            cache[k] = Some(predict_data(problem, frame, w)?);
        }
        let data = cache[k].as_ref().expect("filled above");
        let close = rng.gen_bool(0.5);
        let h = problem.perturb(&frame.gt_model, close, rng);
        let loss = problem.task_loss(&h, &frame.gt_model);
        out.push(ScoreSample {
            input: scorer_input(&est.errors(&h, data), est.cap()),
            target: score_target(loss, beta),
            loss,
        });
    }
    Ok(out)
}

/// Fits a fresh scorer to `|s - s*|` with Adam on mini-batches drawn from
/// `samples`. Returns the scorer and the mean batch loss per update.
pub fn train_score_componentwise<R: Rng + ?Sized>(
    samples: &[ScoreSample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Mlp<f64>, Vec<f64>)> {
    cfg.validate()?;
    let first = samples.first().ok_or(Error::EmptyInput)?;
    let mut v = Mlp::glorot(cfg.scorer_spec(first.input.len()), rng)?;
    let mut opt = OptimizerState::adam(v.params.len(), cfg.lr_score);
    let mut grad = vec![0.0; v.params.len()];
    let mut history = Vec::with_capacity(cfg.score_updates);
    for _ in 0..cfg.score_updates {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let s = &samples[rng.gen_range(0..samples.len())];
            let trace = v.forward_trace(&s.input)?;
            let diff = trace.output[0] - s.target;
            total += diff.abs();
            v.backward_into(&trace, &[crate::models::score_loss_grad(trace.output[0], s.target)], &mut grad);
        }
        let n = cfg.batch_size as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        adam_step(&mut opt, &mut v.params.values, &grad)?;
        history.push(total / n);
    }
    Ok((v, history))
}

/// Loss and parameter gradient of one frame: the pipeline gradient in the
/// predicted coordinates pulled back through the predictor.
#[derive(Debug, Clone)]
pub struct FrameGradient {
    pub d_w: Vec<f64>,
    pub d_v: Vec<f64>,
    pub loss: f64,
    pub entropy: f64,
    pub selected: Option<usize>,
}

pub fn frame_gradient<P: Problem, R: Rng + ?Sized>(
    problem: &P,
    frame: &FrameOf<P>,
    w: &Mlp<f64>,
    v: &Mlp<f64>,
    pipeline: &PipelineConfig,
    needs: GradientNeeds,
    rng: &mut R,
) -> Result<FrameGradient> {
    let cd = problem.estimator().coord_dim();
    let (data, traces) = predict_traced(problem, frame, w)?;
    let gt = &frame.gt_model;
    let loss = |h: &ModelOf<P>| problem.task_loss(h, gt);
    let g = image_gradient(problem.estimator(), &data, v, &loss, pipeline, needs, rng)?;
    let mut d_w = vec![0.0; w.params.len()];
    if needs.w {
        let scale = problem.output_scale();
        for (i, t) in traces.iter().enumerate() {
            let up: Vec<f64> = g.gradient.d_w[i * cd..(i + 1) * cd].iter().map(|u| scale * u).collect();
            if up.iter().any(|&u| u != 0.0) {
                w.backward_into(t, &up, &mut d_w);
            }
        }
    }
    Ok(FrameGradient {
        d_w,
        d_v: g.gradient.d_v,
        loss: g.loss,
        entropy: g.entropy,
        selected: g.selected,
    })
}

/// One line of the end-to-end training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub update: usize,
    /// `None` when the frame's pool was all-degenerate and the update skipped.
    pub loss: Option<f64>,
    pub entropy: Option<f64>,
    pub strategy: Strategy,
    pub seed: u64,
    pub frame: usize,
    pub selected: Option<usize>,
}

/// Trains `(w, v)` end-to-end, one training frame per update, with clamped
/// SGD + momentum. SoftAM and DSAC only.
pub fn train_end_to_end<P: Problem>(
    problem: &P,
    w0: &Mlp<f64>,
    v0: &Mlp<f64>,
    cfg: &TrainConfig,
) -> Result<(Mlp<f64>, Mlp<f64>, Vec<LogRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    train_end_to_end_with(problem, w0, v0, cfg, &mut rng, |_, _, _| Ok(()))
}

/// [`train_end_to_end`] with an explicit generator and a callback invoked
/// after every update with the update index and the current parameters.
pub fn train_end_to_end_with<P, R, F>(
    problem: &P,
    w0: &Mlp<f64>,
    v0: &Mlp<f64>,
    cfg: &TrainConfig,
    rng: &mut R,
    mut after_update: F,
) -> Result<(Mlp<f64>, Mlp<f64>, Vec<LogRecord>)>
where
    P: Problem,
    R: Rng,
    F: FnMut(usize, &Mlp<f64>, &Mlp<f64>) -> Result<()>,
{
    cfg.validate()?;
    let strategy = cfg.pipeline.strategy;
    if strategy == Strategy::Ransac {
        return Err(Error::InvalidConfig("end-to-end training needs softam or dsac".into()));
    }
    let frames = check_frames(problem)?;
    let needs = GradientNeeds {
        w: !cfg.freeze_w,
        v: !cfg.freeze_v,
    };
    let mut w = w0.clone();
    let mut v = v0.clone();
    let mut opt_w = OptimizerState::sgd_momentum(w.params.len(), cfg.lr_w, cfg.momentum);
    let mut opt_v = OptimizerState::sgd_momentum(v.params.len(), cfg.lr_v, cfg.momentum);
    let mut log = Vec::with_capacity(cfg.e2e_updates);
    let mut degenerate = std::collections::VecDeque::with_capacity(cfg.abort_window);

    for update in 0..cfg.e2e_updates {
        let k = rng.gen_range(0..frames.len());
        let frame = &frames[k];
        let outcome = frame_gradient(problem, frame, &w, &v, &cfg.pipeline, needs, rng);
        let failed = matches!(outcome, Err(Error::AllDegenerate { .. }) | Err(Error::AllInvalid));
        if degenerate.len() == cfg.abort_window {
            degenerate.pop_front();
        }
        degenerate.push_back(failed);
        let bad = degenerate.iter().filter(|&&b| b).count();
        if degenerate.len() == cfg.abort_window && 2 * bad >= cfg.abort_window {
            return Err(Error::AbortedRun {
                degenerate: bad,
                window: cfg.abort_window,
            });
        }
        let record = match outcome {
            Ok(g) => {
                if needs.w {
                    sgd_momentum_step(&mut opt_w, &mut w.params.values, &g.d_w, cfg.clamp)?;
                }
                if needs.v {
                    sgd_momentum_step(&mut opt_v, &mut v.params.values, &g.d_v, cfg.clamp)?;
                }
                LogRecord {
                    update,
                    loss: Some(g.loss),
                    entropy: Some(g.entropy),
                    strategy,
                    seed: cfg.seed,
                    frame: k,
                    selected: g.selected,
                }
            }
            Err(Error::AllDegenerate { .. }) | Err(Error::AllInvalid) => {
                warn!("update {update}: frame {k} produced no valid hypothesis, skipped");
                LogRecord {
                    update,
                    loss: None,
                    entropy: None,
                    strategy,
                    seed: cfg.seed,
                    frame: k,
                    selected: None,
                }
            }
            Err(e) => return Err(e),
        };
        debug!("update {update}: loss {:?} entropy {:?}", record.loss, record.entropy);
        log.push(record);
        after_update(update, &w, &v)?;
    }
    Ok((w, v, log))
}

/// Componentwise initialization: predictor, then score data from it, then
/// the scorer. The three stages draw from one generator seeded with
/// `cfg.seed`.
pub fn train_componentwise<P: Problem>(problem: &P, cfg: &TrainConfig) -> Result<(Mlp<f64>, Mlp<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, _) = train_coordinate_componentwise(problem, cfg, &mut rng)?;
    let samples = generate_score_training_data(problem, &w, cfg.score_samples, cfg.beta, &mut rng)?;
    let (v, _) = train_score_componentwise(&samples, cfg, &mut rng)?;
    Ok((w, v))
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut s = 0;
        while s < idx.len() {
            let mut e = s;
            while e + 1 < idx.len() && x[idx[e + 1]] == x[idx[s]] {
                e += 1;
            }
            let avg = (s + e) as f64 / 2.0;
            for &i in &idx[s..=e] {
                r[i] = avg;
            }
            s = e + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Shuffled copy of `0..n` (used to pick held-out items reproducibly).
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
