//! Small fully connected networks for the coordinate predictor and the
//! hypothesis scorer, with hand-written reverse mode.

use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_loss, Pose};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Identity),
            _ => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }
}

/// Layer widths `[in, hidden.., out]` and one activation per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        let spec = Self { widths, activations };
        spec.validate()?;
        Ok(spec)
    }

    /// Rectified hidden layers and a linear output layer.
    pub fn relu_net(widths: Vec<usize>) -> Self {
        let layers = widths.len().saturating_sub(1);
        let mut activations = vec![Activation::Relu; layers];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        Self { widths, activations }
    }

    /// `[features, 64, 64, out]`.
    pub fn coordinate_predictor(features: usize, out: usize) -> Self {
        Self::relu_net(vec![features, 64, 64, out])
    }

    /// `[errors, 64, 32, 1]`.
    pub fn scorer(errors: usize) -> Self {
        Self::relu_net(vec![errors, 64, 32, 1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.activations.len() != self.widths.len() - 1 {
            return Err(Error::InvalidConfig(
                "an MLP needs at least two widths and one activation per layer".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidConfig("MLP widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layout(&self) -> Vec<LayerSlice> {
        let mut offset = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                let weights = offset..offset + rows * cols;
                let bias = weights.end..weights.end + rows;
                offset = bias.end;
                LayerSlice {
                    rows,
                    cols,
                    weights,
                    bias,
                }
            })
            .collect()
    }
}

/// Where one layer lives inside the flat parameter vector. Weights are
/// row-major `rows x cols` (output x input).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlice {
    pub rows: usize,
    pub cols: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

/// Flat parameters with a gradient accumulator of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    pub values: Vec<T>,
    pub grad: Vec<T>,
    pub layout: Vec<LayerSlice>,
}

impl<T: Real> ParamVector<T> {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let n = spec.param_count();
        Self {
            values: vec![T::zero(); n],
            grad: vec![T::zero(); n],
            layout: spec.layout(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Cached forward pass: `inputs[l]` is the input of layer `l`, the last
/// entry of `outputs` is the network output.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    pub output: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub spec: MlpSpec,
    pub params: ParamVector<T>,
}

impl<T: Real> Mlp<T> {
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let params = ParamVector::zeros(&spec);
        Ok(Self { spec, params })
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn glorot<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(spec)?;
        for layer in mlp.params.layout.clone() {
            let limit = (6.0 / (layer.rows + layer.cols) as f64).sqrt();
            for v in &mut mlp.params.values[layer.weights] {
                *v = T::lit(rng.gen_range(-limit..limit));
            }
        }
        Ok(mlp)
    }

    /// Copies the first `out` inputs to the output exactly, as
    /// `relu(x) - relu(-x)` through one hidden layer.
    pub fn passthrough(input: usize, out: usize) -> Result<Self> {
        if out > input {
            return Err(Error::DimensionMismatch {
                expected: input,
                got: out,
            });
        }
        let spec = MlpSpec::new(vec![input, 2 * out, out], vec![Activation::Relu, Activation::Identity])?;
        let mut mlp = Self::zeros(spec)?;
        let l0 = mlp.params.layout[0].clone();
        let l1 = mlp.params.layout[1].clone();
        let w = &mut mlp.params.values;
        for k in 0..out {
            w[l0.weights.start + k * input + k] = T::one();
            w[l0.weights.start + (out + k) * input + k] = -T::one();
            w[l1.weights.start + k * 2 * out + k] = T::one();
            w[l1.weights.start + k * 2 * out + out + k] = -T::one();
        }
        Ok(mlp)
    }

    /// Multiplies the last layer (weights and bias) by `factor`.
    pub fn scale_output(&mut self, factor: T) {
        let last = self.params.layout.last().expect("validated spec has a layer").clone();
        for v in &mut self.params.values[last.weights.start..last.bias.end] {
            *v *= factor;
        }
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.forward_trace(x).map(|t| t.output)
    }

    pub fn forward_trace(&self, x: &[T]) -> Result<ForwardTrace<T>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let p = &self.params.values;
        let mut inputs = Vec::with_capacity(self.params.layout.len());
        let mut pre = Vec::with_capacity(self.params.layout.len());
        let mut cur = x.to_vec();
        for (layer, act) in self.params.layout.iter().zip(&self.spec.activations) {
            let w = &p[layer.weights.clone()];
            let b = &p[layer.bias.clone()];
            let z: Vec<T> = (0..layer.rows)
                .map(|r| {
                    let row = &w[r * layer.cols..(r + 1) * layer.cols];
                    row.iter().zip(&cur).fold(b[r], |acc, (&wi, &xi)| acc + wi * xi)
                })
                .collect();
            let a = match act {
                Activation::Relu => z.iter().map(|&v| v.max(T::zero())).collect(),
                Activation::Identity => z.clone(),
            };
            inputs.push(std::mem::replace(&mut cur, a));
            pre.push(z);
        }
        Ok(ForwardTrace {
            inputs,
            pre,
            output: cur,
        })
    }

    /// Adds `upstream · ∂output/∂params` into `grad` and returns
    /// `upstream · ∂output/∂input`.
    pub fn backward_into(&self, trace: &ForwardTrace<T>, upstream: &[T], grad: &mut [T]) -> Vec<T> {
        assert_eq!(upstream.len(), self.output_dim());
        assert_eq!(grad.len(), self.params.len());
        let p = &self.params.values;
        let mut delta = upstream.to_vec();
        for l in (0..self.params.layout.len()).rev() {
            let layer = &self.params.layout[l];
            if self.spec.activations[l] == Activation::Relu {
                for (d, &z) in delta.iter_mut().zip(&trace.pre[l]) {
                    if z <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            let x = &trace.inputs[l];
            let w = &p[layer.weights.clone()];
            let mut next = vec![T::zero(); layer.cols];
            for r in 0..layer.rows {
                let d = delta[r];
                if d == T::zero() {
                    continue;
                }
                grad[layer.bias.start + r] += d;
                let g = &mut grad[layer.weights.start + r * layer.cols..layer.weights.start + (r + 1) * layer.cols];
                for (gi, &xi) in g.iter_mut().zip(x) {
                    *gi += d * xi;
                }
                let row = &w[r * layer.cols..(r + 1) * layer.cols];
                for (ni, &wi) in next.iter_mut().zip(row) {
                    *ni += d * wi;
                }
            }
            delta = next;
        }
        delta
    }

    /// `(∂/∂params, ∂/∂input)` of `upstream · output` at `x`.
    pub fn backward(&self, x: &[T], upstream: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let trace = self.forward_trace(x)?;
        let mut grad = vec![T::zero(); self.params.len()];
        let dx = self.backward_into(&trace, upstream, &mut grad);
        Ok((grad, dx))
    }
}

pub fn predict_coordinate<T: Real>(features: &[T], w: &Mlp<T>) -> Result<Vec<T>> {
    w.forward(features)
}

/// Returns `(∂loss/∂w, ∂loss/∂features)` for `∂loss/∂output = upstream`.
pub fn coordinate_backward<T: Real>(features: &[T], w: &Mlp<T>, upstream: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    w.backward(features, upstream)
}

/// Errors divided by the cap, the form the scorer consumes.
pub fn scorer_input<T: Real>(errors: &[T], cap: T) -> Vec<T> {
    errors.iter().map(|&e| e / cap).collect()
}

pub fn score_hypothesis<T: Real>(errors: &[T], v: &Mlp<T>) -> Result<T> {
    if v.output_dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: v.output_dim(),
        });
    }
    Ok(v.forward(errors)?[0])
}

/// Returns `(∂/∂v, ∂/∂errors)` of `upstream · score`.
pub fn score_backward<T: Real>(errors: &[T], v: &Mlp<T>, upstream: T) -> Result<(Vec<T>, Vec<T>)> {
    v.backward(errors, &[upstream])
}

/// Euclidean distance, with its gradient in `y` (zero at coincidence).
pub fn coord_loss<T: Real>(y: &[T], y_gt: &[T]) -> (T, Vec<T>) {
    let diff: Vec<T> = y.iter().zip(y_gt).map(|(&a, &b)| a - b).collect();
    let d = diff.iter().map(|&v| v * v).sum::<T>().sqrt();
    if d == T::zero() {
        return (d, vec![T::zero(); y.len()]);
    }
    (d, diff.into_iter().map(|v| v / d).collect())
}

/// `|s + beta * pose_loss(h, h_gt)|`.
pub fn score_loss<T: Real>(s: T, h: &Pose<T>, h_gt: &Pose<T>, beta: T) -> T {
    (s - score_target(pose_loss(h, h_gt), beta)).abs()
}

/// `-beta * loss`.
pub fn score_target<T: Real>(loss: T, beta: T) -> T {
    -beta * loss
}

/// Derivative of `|s - target|` in `s`.
pub fn score_loss_grad<T: Real>(s: T, target: T) -> T {
    let d = s - target;
    if d > T::zero() {
        T::one()
    } else if d < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DSACMLP\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes the checkpoint format: magic `DSACMLP\0`, `u32` version, `u32`
/// layer count L, `L + 1` `u32` widths, L activation bytes (0 relu,
/// 1 identity), `u64` value count, then the values as `f64`. All integers
/// and floats little-endian.
pub fn write_checkpoint<T: Real, W: Write>(mlp: &Mlp<T>, mut out: W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(mlp.spec.activations.len() as u32).to_le_bytes())?;
    for &w in &mlp.spec.widths {
        out.write_all(&(w as u32).to_le_bytes())?;
    }
    for a in &mlp.spec.activations {
        out.write_all(&[a.code()])?;
    }
    out.write_all(&(mlp.params.len() as u64).to_le_bytes())?;
    for v in &mlp.params.values {
        out.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Real, R: Read>(mut input: R) -> Result<Mlp<T>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an MLP checkpoint".into()));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let layers = read_u32(&mut input)? as usize;
    let widths = (0..=layers)
        .map(|_| read_u32(&mut input).map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut codes = vec![0u8; layers];
    input.read_exact(&mut codes)?;
    let activations = codes.into_iter().map(Activation::from_code).collect::<Result<Vec<_>>>()?;
    let spec = MlpSpec::new(widths, activations)?;
    let mut count = [0u8; 8];
    input.read_exact(&mut count)?;
    let count = u64::from_le_bytes(count) as usize;
    if count != spec.param_count() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} values, layout needs {}",
            spec.param_count()
        )));
    }
    let mut mlp = Mlp::zeros(spec)?;
    let mut buf = [0u8; 8];
    for v in &mut mlp.params.values {
        input.read_exact(&mut buf)?;
        *v = T::lit(f64::from_le_bytes(buf));
    }
    Ok(mlp)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
