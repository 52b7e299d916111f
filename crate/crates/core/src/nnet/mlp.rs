//! Conditional noise-prediction MLP.
//!
//! The network input is the data point concatenated with a learned embedding
//! of the diffusion step and a learned embedding of the condition label. It
//! has two evaluation paths: a direct numeric path with a hand-written
//! backward pass (used for training), and a [`Tape`] path (used as the
//! automatic-differentiation reference in gradient checks).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{self, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => tape::silu(x),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => tape::silu_derivative(x),
            Activation::Tanh => {
                let y = x.tanh();
                1.0 - y * y
            }
        }
    }

    fn apply_var(self, v: Var<'_>) -> Var<'_> {
        match self {
            Activation::Silu => v.silu(),
            Activation::Tanh => v.tanh(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    /// Largest diffusion step; the time embedding has `time_steps + 1` rows.
    pub time_steps: usize,
    pub num_conditions: usize,
    pub time_embedding_dim: usize,
    pub condition_embedding_dim: usize,
    pub activation: Activation,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_widths: vec![64, 64],
            time_steps: 50,
            num_conditions: 8,
            time_embedding_dim: 8,
            condition_embedding_dim: 4,
            activation: Activation::Silu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayerShape {
    fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    weight: usize,
    bias: usize,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug)]
struct Offsets {
    time_embedding: usize,
    condition_embedding: usize,
    dense: Vec<Dense>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_conditions == 0 {
            return Err(Error::Config(
                "input_dim and num_conditions must be positive".into(),
            ));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        self.input_dim + self.time_embedding_dim + self.condition_embedding_dim
    }

    pub fn layout(&self) -> Vec<LayerShape> {
        let mut layout = vec![
            LayerShape::new(
                "time_embedding",
                &[self.time_steps + 1, self.time_embedding_dim],
            ),
            LayerShape::new(
                "condition_embedding",
                &[self.num_conditions, self.condition_embedding_dim],
            ),
        ];
        let mut fan_in = self.input_width();
        for (i, &w) in self.hidden_widths.iter().enumerate() {
            layout.push(LayerShape::new(format!("hidden{i}.weight"), &[w, fan_in]));
            layout.push(LayerShape::new(format!("hidden{i}.bias"), &[w]));
            fan_in = w;
        }
        layout.push(LayerShape::new("output.weight", &[self.input_dim, fan_in]));
        layout.push(LayerShape::new("output.bias", &[self.input_dim]));
        layout
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(LayerShape::numel).sum()
    }

    fn offsets(&self) -> Offsets {
        let time_embedding = 0;
        let condition_embedding = (self.time_steps + 1) * self.time_embedding_dim;
        let mut cursor = condition_embedding + self.num_conditions * self.condition_embedding_dim;
        let mut dense = Vec::new();
        let mut fan_in = self.input_width();
        for &rows in self
            .hidden_widths
            .iter()
            .chain(std::iter::once(&self.input_dim))
        {
            let weight = cursor;
            let bias = weight + rows * fan_in;
            dense.push(Dense {
                weight,
                bias,
                rows,
                cols: fan_in,
            });
            cursor = bias + rows;
            fan_in = rows;
        }
        Offsets {
            time_embedding,
            condition_embedding,
            dense,
        }
    }

    /// Glorot-uniform initialisation with a zeroed output layer, so the
    /// untrained network predicts zero noise everywhere.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet {
        let layout = self.layout();
        let mut values = Vec::with_capacity(self.param_count());
        let last = layout.len() - 2;
        for (i, layer) in layout.iter().enumerate() {
            if i >= last {
                values.extend(std::iter::repeat_n(0.0, layer.numel()));
                continue;
            }
            let (fan_out, fan_in) = match layer.shape.as_slice() {
                [rows, cols] => (*rows, *cols),
                [n] => {
                    // biases start at zero
                    values.extend(std::iter::repeat_n(0.0, *n));
                    continue;
                }
                _ => unreachable!("layout only holds rank-1 and rank-2 tensors"),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            values.extend((0..layer.numel()).map(|_| rng.gen_range(-limit..limit)));
        }
        ParameterSet { values, layout }
    }

    fn check_inputs(&self, x_len: usize, t: usize, c: usize) -> Result<()> {
        if x_len != self.input_dim {
            return Err(Error::Config(format!(
                "point has dimension {x_len}, network expects {}",
                self.input_dim
            )));
        }
        if t > self.time_steps {
            return Err(Error::Config(format!(
                "step {t} outside 0..={}",
                self.time_steps
            )));
        }
        if c >= self.num_conditions {
            return Err(Error::Config(format!(
                "condition {c} outside 0..{}",
                self.num_conditions
            )));
        }
        Ok(())
    }
}

/// Flat parameter vector with a named layer layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    values: Vec<f64>,
    layout: Vec<LayerShape>,
}

impl ParameterSet {
    pub fn new(values: Vec<f64>, layout: Vec<LayerShape>) -> Result<Self> {
        let expected: usize = layout.iter().map(LayerShape::numel).sum();
        if values.len() != expected {
            return Err(Error::Format(format!(
                "layout describes {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i}")));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
            layout: spec.layout(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[LayerShape] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same layout, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.layout.clone())
    }

    /// The slice backing layer `name`.
    pub fn view(&self, name: &str) -> Option<&[f64]> {
        let mut offset = 0;
        for layer in &self.layout {
            let n = layer.numel();
            if layer.name == name {
                return Some(&self.values[offset..offset + n]);
            }
            offset += n;
        }
        None
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn matches(&self, spec: &NetworkSpec) -> bool {
        self.layout == spec.layout()
    }
}

fn check_params(params: &ParameterSet, spec: &NetworkSpec) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::Config(format!(
            "parameter set has {} values, network needs {}",
            params.len(),
            spec.param_count()
        )));
    }
    Ok(())
}

/// Primal values saved by [`forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    t: usize,
    c: usize,
    input: Vec<f64>,
    pre_activations: Vec<Vec<f64>>,
    activations: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

fn dense_forward(w: &[f64], b: &[f64], input: &[f64], out: &mut Vec<f64>) {
    let cols = input.len();
    out.clear();
    out.extend(b.iter().enumerate().map(|(r, &bias)| {
        let row = &w[r * cols..(r + 1) * cols];
        row.iter().zip(input).fold(bias, |acc, (a, b)| acc + a * b)
    }));
}

/// Evaluates ε_θ(x, t, c) and keeps what the backward pass needs.
pub fn forward(
    params: &ParameterSet,
    spec: &NetworkSpec,
    x: &[f64],
    t: usize,
    c: usize,
) -> Result<ForwardCache> {
    spec.check_inputs(x.len(), t, c)?;
    check_params(params, spec)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network input".into()));
    }
    let off = spec.offsets();
    let p = params.values();
    let te = off.time_embedding + t * spec.time_embedding_dim;
    let ce = off.condition_embedding + c * spec.condition_embedding_dim;
    let mut input = Vec::with_capacity(spec.input_width());
    input.extend_from_slice(x);
    input.extend_from_slice(&p[te..te + spec.time_embedding_dim]);
    input.extend_from_slice(&p[ce..ce + spec.condition_embedding_dim]);

    let hidden = spec.hidden_widths.len();
    let mut pre_activations = Vec::with_capacity(hidden);
    let mut activations = Vec::with_capacity(hidden);
    let mut output = Vec::new();
    for (i, d) in off.dense.iter().enumerate() {
        let w = &p[d.weight..d.weight + d.rows * d.cols];
        let b = &p[d.bias..d.bias + d.rows];
        let layer_in = if i == 0 { &input } else { &activations[i - 1] };
        let mut pre = Vec::with_capacity(d.rows);
        dense_forward(w, b, layer_in, &mut pre);
        if i < hidden {
            let act = pre.iter().map(|&z| spec.activation.apply(z)).collect();
            pre_activations.push(pre);
            activations.push(act);
        } else {
            output = pre;
        }
    }
    Ok(ForwardCache {
        t,
        c,
        input,
        pre_activations,
        activations,
        output,
    })
}

/// Predicted noise ε_θ(x, t, c).
pub fn predict_noise(
    params: &ParameterSet,
    spec: &NetworkSpec,
    x: &[f64],
    t: usize,
    c: usize,
) -> Result<Vec<f64>> {
    forward(params, spec, x, t, c).map(|cache| cache.output)
}

/// Vector-Jacobian product through a cached forward pass.
///
/// Adds `output_adjointᵀ · ∂ε/∂θ` into `param_grad` and returns
/// `output_adjointᵀ · ∂ε/∂x`.
pub fn backward(
    params: &ParameterSet,
    spec: &NetworkSpec,
    cache: &ForwardCache,
    output_adjoint: &[f64],
    param_grad: &mut [f64],
) -> Vec<f64> {
    assert_eq!(
        param_grad.len(),
        params.len(),
        "gradient buffer must match parameters"
    );
    backward_impl(params, spec, cache, output_adjoint, Some(param_grad))
}

/// `output_adjointᵀ · ∂ε/∂x` only.
pub fn input_vjp(
    params: &ParameterSet,
    spec: &NetworkSpec,
    cache: &ForwardCache,
    output_adjoint: &[f64],
) -> Vec<f64> {
    backward_impl(params, spec, cache, output_adjoint, None)
}

fn backward_impl(
    params: &ParameterSet,
    spec: &NetworkSpec,
    cache: &ForwardCache,
    output_adjoint: &[f64],
    mut param_grad: Option<&mut [f64]>,
) -> Vec<f64> {
    assert_eq!(
        output_adjoint.len(),
        spec.input_dim,
        "adjoint must match output dimension"
    );
    let off = spec.offsets();
    let p = params.values();
    let hidden = spec.hidden_widths.len();
    let mut upstream = output_adjoint.to_vec();
    for i in (0..=hidden).rev() {
        let d = off.dense[i];
        let layer_in = if i == 0 {
            &cache.input
        } else {
            &cache.activations[i - 1]
        };
        let mut delta = upstream;
        if i < hidden {
            for (g, &z) in delta.iter_mut().zip(&cache.pre_activations[i]) {
                *g *= spec.activation.derivative(z);
            }
        }
        let mut next = vec![0.0; d.cols];
        for (r, &g) in delta.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = d.weight + r * d.cols;
            let w = &p[row..row + d.cols];
            if let Some(pg) = param_grad.as_deref_mut() {
                pg[d.bias + r] += g;
                for (gw, &a) in pg[row..row + d.cols].iter_mut().zip(layer_in) {
                    *gw += g * a;
                }
            }
            for (&wv, n) in w.iter().zip(&mut next) {
                *n += g * wv;
            }
        }
        upstream = next;
    }
    // `upstream` now holds the adjoint of the concatenated input vector.
    let dim = spec.input_dim;
    let te = off.time_embedding + cache.t * spec.time_embedding_dim;
    let ce = off.condition_embedding + cache.c * spec.condition_embedding_dim;
    if let Some(pg) = param_grad {
        for k in 0..spec.time_embedding_dim {
            pg[te + k] += upstream[dim + k];
        }
        for k in 0..spec.condition_embedding_dim {
            pg[ce + k] += upstream[dim + spec.time_embedding_dim + k];
        }
    }
    upstream.truncate(dim);
    upstream
}

/// Builds ε_θ(x, t, c) on a tape, with parameters and input as tape vars.
pub fn predict_noise_on_tape<'t>(
    _tape: &'t Tape,
    spec: &NetworkSpec,
    params: &[Var<'t>],
    x: &[Var<'t>],
    t: usize,
    c: usize,
) -> Result<Vec<Var<'t>>> {
    spec.check_inputs(x.len(), t, c)?;
    if params.len() != spec.param_count() {
        return Err(Error::Config("parameter vars do not match network".into()));
    }
    let off = spec.offsets();
    let te = off.time_embedding + t * spec.time_embedding_dim;
    let ce = off.condition_embedding + c * spec.condition_embedding_dim;
    let mut input: Vec<Var<'t>> = x.to_vec();
    input.extend_from_slice(&params[te..te + spec.time_embedding_dim]);
    input.extend_from_slice(&params[ce..ce + spec.condition_embedding_dim]);

    let hidden = spec.hidden_widths.len();
    let mut h = input;
    for (i, d) in off.dense.iter().enumerate() {
        let mut out = Vec::with_capacity(d.rows);
        for r in 0..d.rows {
            let row = d.weight + r * d.cols;
            let acc = h
                .iter()
                .enumerate()
                .fold(params[d.bias + r], |acc, (j, &a)| acc + params[row + j] * a);
            out.push(if i < hidden {
                spec.activation.apply_var(acc)
            } else {
                acc
            });
        }
        h = out;
    }
    Ok(h)
}
