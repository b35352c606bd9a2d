//! Fully-connected networks with hand-written backpropagation.
//!
//! Samples are rows. Layer `l` maps its input `h` (`n×d_in`) to `σ(h Wᵀ + b)`.
//! The per-sample loss is `ℓ_i = ½‖f(x_i) − y_i‖²` and the training objective is
//! `Σ w_i ℓ_i + (λ/2)‖θ‖²` with sample weights `w` summing to one (uniform `1/n`
//! unless given).

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Divergence, Error, Result};
use crate::symlinalg::{self, cosine_sim, pearson_corr, psd_power, symmetrized_sqrt, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Activation {
    Relu,
    Quadratic,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Quadratic => z * z,
            Activation::Identity => z,
        }
    }

    /// Derivative; ReLU uses 0 at the kink.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Quadratic => 2.0 * z,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `d_out × d_in`.
    pub weight: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
    pub activation: Activation,
}

/// A stack of dense layers whose last layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct MlpModel {
    layers: Vec<Layer>,
}

/// JSON checkpoint layout; weights are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct Checkpoint {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    weights: Vec<Vec<f64>>,
    #[serde(default)]
    biases: Vec<Option<Vec<f64>>>,
}

impl From<MlpModel> for Checkpoint {
    fn from(m: MlpModel) -> Self {
        let mut dims = vec![m.input_dim()];
        dims.extend(m.layers.iter().map(|l| l.weight.nrows()));
        Checkpoint {
            dims,
            activations: m.layers.iter().map(|l| l.activation).collect(),
            weights: m.layers.iter().map(|l| l.weight.transpose().as_slice().to_vec()).collect(),
            biases: m.layers.iter().map(|l| l.bias.as_ref().map(|b| b.as_slice().to_vec())).collect(),
        }
    }
}

impl TryFrom<Checkpoint> for MlpModel {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        let depth = c.activations.len();
        if c.dims.len() != depth + 1 || c.weights.len() != depth {
            return Err(Error::ShapeError("checkpoint dims, activations and weights disagree".into()));
        }
        if !c.biases.is_empty() && c.biases.len() != depth {
            return Err(Error::ShapeError("checkpoint has the wrong number of bias entries".into()));
        }
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let (d_in, d_out) = (c.dims[l], c.dims[l + 1]);
            if c.weights[l].len() != d_in * d_out {
                return Err(Error::ShapeError(format!("layer {l}: expected {} weights", d_in * d_out)));
            }
            let bias = match c.biases.get(l).cloned().flatten() {
                Some(b) if b.len() != d_out => return Err(Error::ShapeError(format!("layer {l}: bad bias length"))),
                other => other.map(DVector::from_vec),
            };
            layers.push(Layer {
                weight: DMatrix::from_row_slice(d_out, d_in, &c.weights[l]),
                bias,
                activation: c.activations[l],
            });
        }
        MlpModel::new(layers)
    }
}

impl MlpModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].weight.ncols() != pair[0].weight.nrows() {
                return Err(Error::ShapeError(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    l,
                    pair[0].weight.nrows(),
                    l + 1,
                    pair[1].weight.ncols()
                )));
            }
        }
        for (l, layer) in layers.iter().enumerate() {
            if let Some(b) = &layer.bias {
                if b.len() != layer.weight.nrows() {
                    return Err(Error::ShapeError(format!("layer {l}: bias length mismatch")));
                }
            }
            if layer.weight.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMatrix(format!("layer {l}: non-finite weight")));
            }
        }
        if layers.last().unwrap().activation != Activation::Identity {
            return Err(Error::InvalidConfig("output layer must be linear".into()));
        }
        Ok(MlpModel { layers })
    }

    /// `dims = [d, h₁, …, c]` with `U(−1/√fan_in, 1/√fan_in)` entries.
    pub fn init(dims: &[usize], hidden: Activation, bias: bool, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig("need at least input and output dims, all positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = dims.len() - 1;
        let layers = (0..depth)
            .map(|l| {
                let bound = 1.0 / (dims[l] as f64).sqrt();
                let weight = DMatrix::from_fn(dims[l + 1], dims[l], |_, _| rng.random_range(-bound..bound));
                let bias = bias.then(|| DVector::from_fn(dims[l + 1], |_, _| rng.random_range(-bound..bound)));
                let activation = if l + 1 == depth { Activation::Identity } else { hidden };
                Layer { weight, bias, activation }
            })
            .collect();
        MlpModel::new(layers)
    }

    /// `f(x) = aᵀσ(Wx)` with `W` of shape `m×d`.
    pub fn two_layer(w: DMatrix<f64>, a: DVector<f64>, activation: Activation) -> Result<Self> {
        let head = DMatrix::from_row_slice(1, a.len(), a.as_slice());
        MlpModel::new(vec![
            Layer { weight: w, bias: None, activation },
            Layer { weight: head, bias: None, activation: Activation::Identity },
        ])
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn weight(&self, layer: usize) -> &DMatrix<f64> {
        &self.layers[layer].weight
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.as_ref().map_or(0, |b| b.len()))
            .sum()
    }

    /// All parameters flattened layer by layer (weights column-major, then bias).
    pub fn params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            if let Some(b) = &l.bias {
                out.extend_from_slice(b.as_slice());
            }
        }
        DVector::from_vec(out)
    }

    pub fn set_params(&mut self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::ShapeError("parameter vector has the wrong length".into()));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let k = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&theta.as_slice()[at..at + k]);
            at += k;
            if let Some(b) = &mut l.bias {
                let k = b.len();
                b.as_mut_slice().copy_from_slice(&theta.as_slice()[at..at + k]);
                at += k;
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        self.forward_from(0, x)
    }

    /// Runs layers `layer..` on `h`, the input of `layer`.
    pub fn forward_from(&self, layer: usize, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let wh = h * self.layers[layer].weight.transpose();
        self.forward_from_pre(layer, &wh)
    }

    /// Runs the network from `W_l h` (before bias and activation) of `layer`.
    pub fn forward_from_pre(&self, layer: usize, wh: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = self.finish_layer(layer, wh.clone());
        for l in layer + 1..self.depth() {
            out = self.finish_layer(l, out * self.layers[l].weight.transpose());
        }
        check_activations(&out)?;
        Ok(out)
    }

    fn finish_layer(&self, l: usize, mut z: DMatrix<f64>) -> DMatrix<f64> {
        let layer = &self.layers[l];
        if let Some(b) = &layer.bias {
            for mut row in z.row_iter_mut() {
                row += b.transpose();
            }
        }
        if layer.activation != Activation::Identity {
            z.apply(|v| *v = layer.activation.apply(*v));
        }
        z
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeError(format!(
                "model expects {} input features, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn forward_cache(&self, x: &DMatrix<f64>) -> Result<Cache> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.depth());
        let mut linear = Vec::with_capacity(self.depth());
        let mut pre = Vec::with_capacity(self.depth());
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let wh = &h * layer.weight.transpose();
            let mut z = wh.clone();
            if let Some(b) = &layer.bias {
                for mut row in z.row_iter_mut() {
                    row += b.transpose();
                }
            }
            let next = z.map(|v| layer.activation.apply(v));
            check_activations(&next).map_err(|e| match e {
                Error::NumericOverflow(m) => Error::NumericOverflow(format!("layer {l}: {m}")),
                other => other,
            })?;
            inputs.push(h);
            linear.push(wh);
            pre.push(z);
            h = next;
        }
        Ok(Cache { inputs, linear, pre, output: h })
    }

    /// Per-layer `(∂/∂(Wh), ∂/∂h)` of a per-sample scalar whose output gradient is `delta_out`.
    fn backprop(&self, cache: &Cache, delta_out: DMatrix<f64>) -> Vec<(DMatrix<f64>, DMatrix<f64>)> {
        let mut out = Vec::with_capacity(self.depth());
        let mut d_act = delta_out;
        for l in (0..self.depth()).rev() {
            let layer = &self.layers[l];
            let dz = if layer.activation == Activation::Identity {
                d_act
            } else {
                d_act.zip_map(&cache.pre[l], |g, z| g * layer.activation.derivative(z))
            };
            let dh = &dz * &layer.weight;
            d_act = dh.clone();
            out.push((dz, dh));
        }
        out.reverse();
        out
    }

    fn weight_norm_sq(&self) -> (f64, f64) {
        let w = self.layers.iter().map(|l| l.weight.norm_squared()).sum();
        let b = self.layers.iter().filter_map(|l| l.bias.as_ref()).map(|b| b.norm_squared()).sum();
        (w, b)
    }
}

fn check_activations(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow("non-finite activation".into()));
    }
    Ok(())
}

struct Cache {
    inputs: Vec<DMatrix<f64>>,
    linear: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

/// L2 penalties: weights use `weight_decay`, biases their own coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularization {
    pub weight_decay: f64,
    pub bias_weight_decay: f64,
}

impl Regularization {
    pub fn new(weight_decay: f64) -> Self {
        Regularization {
            weight_decay,
            bias_weight_decay: weight_decay,
        }
    }
}

/// Parameter gradients, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<Option<DVector<f64>>>,
}

impl Gradients {
    /// Flattened in the same order as [`MlpModel::params`].
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            if let Some(b) = b {
                out.extend_from_slice(b.as_slice());
            }
        }
        DVector::from_vec(out)
    }

    pub fn norm(&self) -> f64 {
        let w: f64 = self.weights.iter().map(|g| g.norm_squared()).sum();
        let b: f64 = self.biases.iter().flatten().map(|g| g.norm_squared()).sum();
        (w + b).sqrt()
    }
}

/// Everything recorded at one layer, one row per sample.
#[derive(Debug, Clone)]
pub struct LayerBundle {
    /// Layer input `h(x_i)`, `n×d_in`.
    pub h: DMatrix<f64>,
    /// `W h(x_i)`, `n×d_out` (bias excluded).
    pub wh: DMatrix<f64>,
    /// `∇_h ℓ_i`, `n×d_in`.
    pub dl_dh: DMatrix<f64>,
    /// `∇_{Wh} ℓ_i`, `n×d_out`.
    pub dl_dwh: DMatrix<f64>,
    /// `∂f_k/∂h` for each output channel `k`, each `n×d_in`.
    pub df_dh: Vec<DMatrix<f64>>,
    /// `∂f_k/∂(Wh)` for each output channel `k`, each `n×d_out`.
    pub df_dwh: Vec<DMatrix<f64>>,
}

impl LayerBundle {
    /// `∇_h f` at sample `i` as a `d_in×c` matrix.
    pub fn jacobian_h(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.h.ncols(), self.df_dh.len(), |a, k| self.df_dh[k][(i, a)])
    }

    /// `∇_{Wh} f` at sample `i` as a `d_out×c` matrix.
    pub fn jacobian_wh(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.wh.ncols(), self.df_dwh.len(), |a, k| self.df_dwh[k][(i, a)])
    }
}

#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub layers: Vec<LayerBundle>,
    /// Normalized sample weights used for every average.
    pub sample_weights: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardBackward {
    /// `Σ w_i ℓ_i`.
    pub loss: f64,
    /// Loss plus the L2 penalty.
    pub objective: f64,
    pub gradients: Gradients,
    pub bundle: GradientBundle,
}

pub(crate) fn normalized_weights(n: usize, weights: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    match weights {
        None => Ok(DVector::from_element(n, 1.0 / n as f64)),
        Some(w) => {
            if w.len() != n {
                return Err(Error::ShapeError(format!("{} weights for {n} samples", w.len())));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidConfig("sample weights must be finite and non-negative".into()));
            }
            let total = w.sum();
            if total <= 0.0 {
                return Err(Error::InvalidConfig("sample weights sum to zero".into()));
            }
            Ok(w / total)
        }
    }
}

fn scale_rows(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= w[i];
    }
    out
}

fn check_targets(model: &MlpModel, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if y.nrows() != x.nrows() || y.ncols() != model.output_dim() {
        return Err(Error::ShapeError(format!(
            "targets are {}x{}, expected {}x{}",
            y.nrows(),
            y.ncols(),
            x.nrows(),
            model.output_dim()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::ShapeError("empty batch".into()));
    }
    Ok(())
}

/// Loss, objective and parameter gradients without the per-layer bundle.
pub fn loss_and_gradients(
    model: &MlpModel,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    weights: Option<&DVector<f64>>,
    reg: Regularization,
) -> Result<(f64, f64, Gradients)> {
    check_targets(model, x, y)?;
    let w = normalized_weights(x.nrows(), weights)?;
    let cache = model.forward_cache(x)?;
    let (loss, objective, grads, _) = gradients_from_cache(model, &cache, y, &w, reg);
    Ok((loss, objective, grads))
}

type Deltas = Vec<(DMatrix<f64>, DMatrix<f64>)>;

fn gradients_from_cache(
    model: &MlpModel,
    cache: &Cache,
    y: &DMatrix<f64>,
    w: &DVector<f64>,
    reg: Regularization,
) -> (f64, f64, Gradients, Deltas) {
    let resid = &cache.output - y;
    let loss: f64 = resid.row_iter().zip(w.iter()).map(|(r, wi)| 0.5 * wi * r.norm_squared()).sum();
    let (wn, bn) = model.weight_norm_sq();
    let objective = loss + 0.5 * reg.weight_decay * wn + 0.5 * reg.bias_weight_decay * bn;
    let deltas = model.backprop(cache, resid);
    let mut gw = Vec::with_capacity(model.depth());
    let mut gb = Vec::with_capacity(model.depth());
    for (l, layer) in model.layers.iter().enumerate() {
        let dz_w = scale_rows(&deltas[l].0, w);
        gw.push(dz_w.transpose() * &cache.inputs[l] + &layer.weight * reg.weight_decay);
        gb.push(layer.bias.as_ref().map(|b| dz_w.row_sum().transpose() + b * reg.bias_weight_decay));
    }
    (loss, objective, Gradients { weights: gw, biases: gb }, deltas)
}

/// Exact gradients of `Σ w_i ℓ_i + (λ/2)‖θ‖²` plus the per-layer bundle, including
/// model Jacobians from one extra backward pass per output channel.
pub fn forward_backward(
    model: &MlpModel,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    weights: Option<&DVector<f64>>,
    reg: Regularization,
) -> Result<ForwardBackward> {
    check_targets(model, x, y)?;
    let w = normalized_weights(x.nrows(), weights)?;
    let cache = model.forward_cache(x)?;
    let (loss, objective, gradients, deltas) = gradients_from_cache(model, &cache, y, &w, reg);
    let n = x.nrows();
    let c = model.output_dim();
    let channel: Vec<Deltas> = (0..c)
        .map(|k| {
            let mut seed = DMatrix::zeros(n, c);
            seed.column_mut(k).fill(1.0);
            model.backprop(&cache, seed)
        })
        .collect();
    let layers = deltas
        .into_iter()
        .enumerate()
        .map(|(l, (dz, dh))| LayerBundle {
            h: cache.inputs[l].clone(),
            wh: cache.linear[l].clone(),
            dl_dh: dh,
            dl_dwh: dz,
            df_dh: channel.iter().map(|d| d[l].1.clone()).collect(),
            df_dwh: channel.iter().map(|d| d[l].0.clone()).collect(),
        })
        .collect();
    Ok(ForwardBackward {
        loss,
        objective,
        gradients,
        bundle: GradientBundle {
            layers,
            sample_weights: w,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimateKind {
    #[serde(rename = "FACT")]
    Fact,
    #[serde(rename = "bFACT")]
    BFact,
    #[serde(rename = "AGOP")]
    Agop,
    #[serde(rename = "bAGOP")]
    BAgop,
    #[serde(rename = "eNFA")]
    ENfa,
    #[serde(rename = "beNFA")]
    BeNfa,
}

impl EstimateKind {
    pub const ALL: [EstimateKind; 6] = [
        EstimateKind::Fact,
        EstimateKind::BFact,
        EstimateKind::Agop,
        EstimateKind::BAgop,
        EstimateKind::ENfa,
        EstimateKind::BeNfa,
    ];

    /// Backward kinds live on the output side of the layer and predict `WWᵀ`.
    pub fn is_backward(self) -> bool {
        matches!(self, EstimateKind::BFact | EstimateKind::BAgop | EstimateKind::BeNfa)
    }

    pub fn needs_weight_decay(self) -> bool {
        matches!(self, EstimateKind::Fact | EstimateKind::BFact)
    }

    pub fn name(self) -> &'static str {
        match self {
            EstimateKind::Fact => "FACT",
            EstimateKind::BFact => "bFACT",
            EstimateKind::Agop => "AGOP",
            EstimateKind::BAgop => "bAGOP",
            EstimateKind::ENfa => "eNFA",
            EstimateKind::BeNfa => "beNFA",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEstimate {
    pub kind: EstimateKind,
    pub layer: usize,
    /// FACT kinds are general square matrices; the rest are symmetric.
    pub matrix: DMatrix<f64>,
    pub eval_set_size: usize,
    pub weight_decay: Option<f64>,
}

/// `Σ_i w_i a_iᵀ b_i` for row-stacked `a`, `b`.
fn weighted_cross(a: &DMatrix<f64>, b: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    scale_rows(a, w).transpose() * b
}

/// One estimate from a precomputed bundle.
pub fn estimate_from_bundle(bundle: &GradientBundle, kind: EstimateKind, layer: usize, lambda: f64) -> Result<FeatureEstimate> {
    let lb = bundle
        .layers
        .get(layer)
        .ok_or_else(|| Error::InvalidConfig(format!("no layer {layer}")))?;
    if kind.needs_weight_decay() && !(lambda > 0.0) {
        return Err(Error::FactUndefined);
    }
    let w = &bundle.sample_weights;
    let sum_channels = |jac: &[DMatrix<f64>]| {
        let side = jac[0].ncols();
        jac.iter().fold(DMatrix::zeros(side, side), |acc, j| acc + weighted_cross(j, j, w))
    };
    let matrix = match kind {
        EstimateKind::Fact => weighted_cross(&lb.dl_dh, &lb.h, w) * (-1.0 / lambda),
        EstimateKind::BFact => weighted_cross(&lb.wh, &lb.dl_dwh, w) * (-1.0 / lambda),
        EstimateKind::Agop => sum_channels(&lb.df_dh),
        EstimateKind::BAgop => sum_channels(&lb.df_dwh),
        EstimateKind::ENfa => weighted_cross(&lb.dl_dh, &lb.dl_dh, w),
        EstimateKind::BeNfa => weighted_cross(&lb.dl_dwh, &lb.dl_dwh, w),
    };
    Ok(FeatureEstimate {
        kind,
        layer,
        matrix,
        eval_set_size: w.len(),
        weight_decay: kind.needs_weight_decay().then_some(lambda),
    })
}

/// All six estimates at `layer`, evaluated on `(x, y)`.
pub fn feature_estimates(
    model: &MlpModel,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    weights: Option<&DVector<f64>>,
    lambda: f64,
    layer: usize,
) -> Result<Vec<FeatureEstimate>> {
    if !(lambda > 0.0) {
        return Err(Error::FactUndefined);
    }
    if layer >= model.depth() {
        return Err(Error::InvalidConfig(format!("model has {} layers, asked for {layer}", model.depth())));
    }
    let fb = forward_backward(model, x, y, weights, Regularization::new(lambda))?;
    EstimateKind::ALL
        .iter()
        .map(|&k| estimate_from_bundle(&fb.bundle, k, layer, lambda))
        .collect()
}

/// `WᵀW` for forward kinds, `WWᵀ` for backward kinds.
pub fn feature_target(model: &MlpModel, layer: usize, backward: bool) -> DMatrix<f64> {
    let w = model.weight(layer);
    if backward {
        w * w.transpose()
    } else {
        w.transpose() * w
    }
}

/// The square-root form compared in tables: `√(E·Eᵀ)` for FACT kinds, `E^{1/2}` otherwise.
pub fn sqrt_variant(estimate: &FeatureEstimate) -> Result<SymMatrix> {
    if estimate.kind.needs_weight_decay() {
        symmetrized_sqrt(&estimate.matrix)
    } else {
        psd_power(&SymMatrix::from_symmetrized(estimate.matrix.clone())?, 0.5, symlinalg::DEFAULT_CLAMP_TOL)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CorrelationRow {
    pub kind: EstimateKind,
    pub layer: usize,
    /// `"WtW"` or `"WWt"`.
    pub target: String,
    pub pearson: Option<f64>,
    pub cosine: Option<f64>,
    pub sqrt_pearson: Option<f64>,
    pub sqrt_cosine: Option<f64>,
}

/// Raw and square-root comparisons of each estimate with its matching feature matrix.
/// Degenerate comparisons (zero or constant matrices) are reported as `None`.
pub fn correlation_report(model: &MlpModel, estimates: &[FeatureEstimate]) -> Vec<CorrelationRow> {
    estimates
        .iter()
        .map(|e| {
            let backward = e.kind.is_backward();
            let target = feature_target(model, e.layer, backward);
            let root = sqrt_variant(e).ok().map(SymMatrix::into_inner);
            CorrelationRow {
                kind: e.kind,
                layer: e.layer,
                target: if backward { "WWt" } else { "WtW" }.into(),
                pearson: pearson_corr(&e.matrix, &target).ok(),
                cosine: cosine_sim(&e.matrix, &target).ok(),
                sqrt_pearson: root.as_ref().and_then(|r| pearson_corr(r, &target).ok()),
                sqrt_cosine: root.as_ref().and_then(|r| cosine_sim(r, &target).ok()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Optimizer {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub weight_decay: f64,
    /// Defaults to `weight_decay`.
    #[serde(default)]
    pub bias_weight_decay: Option<f64>,
    #[serde(default)]
    pub schedule: Schedule,
    /// `None` trains full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub epochs: usize,
    /// Stop once a batch's data loss falls to this value.
    #[serde(default)]
    pub loss_target: Option<f64>,
    /// Stop once the full objective gradient norm falls to this value.
    #[serde(default)]
    pub grad_norm_target: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Record the full-data loss every this many epochs.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_log_every() -> usize {
    1
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

pub const DEFAULT_LOSS_TARGET: f64 = 1e-3;
pub const DEFAULT_GRAD_NORM_TARGET: f64 = 1e-6;

impl TrainConfig {
    pub fn sgd(learning_rate: f64, weight_decay: f64, epochs: usize) -> Self {
        TrainConfig {
            optimizer: Optimizer::SgdMomentum,
            learning_rate,
            momentum: default_momentum(),
            weight_decay,
            bias_weight_decay: None,
            schedule: Schedule::Constant,
            batch_size: None,
            epochs,
            loss_target: Some(DEFAULT_LOSS_TARGET),
            grad_norm_target: Some(DEFAULT_GRAD_NORM_TARGET),
            seed: 0,
            log_every: default_log_every(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
        }
    }

    pub fn adam(learning_rate: f64, weight_decay: f64, epochs: usize) -> Self {
        TrainConfig {
            optimizer: Optimizer::Adam,
            ..TrainConfig::sgd(learning_rate, weight_decay, epochs)
        }
    }

    pub fn regularization(&self) -> Regularization {
        Regularization {
            weight_decay: self.weight_decay,
            bias_weight_decay: self.bias_weight_decay.unwrap_or(self.weight_decay),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learningRate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weightDecay must be non-negative");
        }
        if self.bias_weight_decay.is_some_and(|b| !(b >= 0.0)) {
            return bad("biasWeightDecay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0,1)");
        }
        if self.batch_size == Some(0) {
            return bad("batchSize must be positive");
        }
        if self.log_every == 0 {
            return bad("logEvery must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam hyperparameters");
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CurvePoint {
    pub epoch: usize,
    pub step: usize,
    pub learning_rate: f64,
    /// Full-data `Σ w_i ℓ_i`.
    pub loss: f64,
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum StopReason {
    Epochs,
    LossTarget,
    GradNorm,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: MlpModel,
    pub curve: Vec<CurvePoint>,
    pub stop: StopReason,
    pub steps: usize,
    /// Full-data loss, objective and gradient norm of the returned model.
    pub final_loss: f64,
    pub final_objective: f64,
    pub final_grad_norm: f64,
}

impl TrainResult {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,step,learningRate,loss,objective,gradNorm\n");
        for p in &self.curve {
            s.push_str(&format!(
                "{},{},{:?},{:?},{:?},{:?}\n",
                p.epoch, p.step, p.learning_rate, p.loss, p.objective, p.grad_norm
            ));
        }
        s
    }
}

enum OptState {
    Sgd { velocity: DVector<f64> },
    Adam { m: DVector<f64>, v: DVector<f64>, t: i32 },
}

/// Trains a copy of `model` on `(x, y)`; deterministic for a fixed seed.
pub fn train(
    model: MlpModel,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    weights: Option<&DVector<f64>>,
    config: &TrainConfig,
) -> Result<TrainResult> {
    train_observed(model, x, y, weights, config, &mut |_, _| {})
}

/// [`train`], calling `observer` with the model snapshot at every recorded curve point.
pub fn train_observed(
    model: MlpModel,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    weights: Option<&DVector<f64>>,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&CurvePoint, &MlpModel),
) -> Result<TrainResult> {
    config.validate()?;
    check_targets(&model, x, y)?;
    let n = x.nrows();
    let full_w = normalized_weights(n, weights)?;
    let reg = config.regularization();
    let mut model = model;
    let mut theta = model.params();
    let p = theta.len();
    let mut state = match config.optimizer {
        Optimizer::SgdMomentum => OptState::Sgd {
            velocity: DVector::zeros(p),
        },
        Optimizer::Adam => OptState::Adam {
            m: DVector::zeros(p),
            v: DVector::zeros(p),
            t: 0,
        },
    };
    let batch = config.batch_size.map_or(n, |b| b.min(n));
    let full_batch = batch == n;
    let batches_per_epoch = n.div_ceil(batch);
    let total_steps = batches_per_epoch * config.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::new();
    let mut step = 0usize;
    let mut stop = StopReason::Epochs;

    let diverged = |step: usize, reason: String, curve: &[CurvePoint]| {
        Error::Diverged(Box::new(Divergence {
            step,
            reason,
            loss_curve: curve.iter().map(|c| c.objective).collect(),
            rfm_trace: None,
        }))
    };

    'outer: for epoch in 0..config.epochs {
        if !full_batch {
            order.shuffle(&mut rng);
        }
        for b in 0..batches_per_epoch {
            let lr = config.lr_at(step, total_steps);
            let (loss, objective, grads) = if full_batch {
                loss_and_gradients(&model, x, y, Some(&full_w), reg)
            } else {
                let rows = &order[b * batch..((b + 1) * batch).min(n)];
                let xb = crate::datasets::select_rows(x, rows);
                let yb = crate::datasets::select_rows(y, rows);
                let wb = DVector::from_iterator(rows.len(), rows.iter().map(|&i| full_w[i]));
                loss_and_gradients(&model, &xb, &yb, Some(&wb), reg)
            }
            .map_err(|e| match e {
                Error::NumericOverflow(m) => diverged(step, m, &curve),
                other => other,
            })?;
            if !loss.is_finite() || !objective.is_finite() {
                return Err(diverged(step, "loss is not finite".into(), &curve));
            }
            let g = grads.flatten();
            let gnorm = g.norm();
            if full_batch && epoch % config.log_every == 0 {
                let point = CurvePoint {
                    epoch,
                    step,
                    learning_rate: lr,
                    loss,
                    objective,
                    grad_norm: gnorm,
                };
                observer(&point, &model);
                curve.push(point);
            }
            if config.loss_target.is_some_and(|t| loss <= t) {
                stop = StopReason::LossTarget;
                break 'outer;
            }
            if full_batch && config.grad_norm_target.is_some_and(|t| gnorm <= t) {
                stop = StopReason::GradNorm;
                break 'outer;
            }
            match &mut state {
                OptState::Sgd { velocity } => {
                    *velocity *= config.momentum;
                    *velocity += &g;
                    theta.axpy(-lr, velocity, 1.0);
                }
                OptState::Adam { m, v, t } => {
                    *t += 1;
                    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
                    let c1 = 1.0 - b1.powi(*t);
                    let c2 = 1.0 - b2.powi(*t);
                    for j in 0..p {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        theta[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + config.adam_eps);
                    }
                }
            }
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(diverged(step, "parameters are not finite".into(), &curve));
            }
            model.set_params(&theta)?;
            step += 1;
        }
        if !full_batch && (epoch + 1) % config.log_every == 0 {
            let (loss, objective, grads) = loss_and_gradients(&model, x, y, Some(&full_w), reg)?;
            let gnorm = grads.norm();
            if !objective.is_finite() {
                return Err(diverged(step, "loss is not finite".into(), &curve));
            }
            let point = CurvePoint {
                epoch,
                step,
                learning_rate: config.lr_at(step, total_steps),
                loss,
                objective,
                grad_norm: gnorm,
            };
            observer(&point, &model);
            curve.push(point);
            if config.grad_norm_target.is_some_and(|t| gnorm <= t) {
                stop = StopReason::GradNorm;
                break;
            }
        }
    }
    let (final_loss, final_objective, grads) = loss_and_gradients(&model, x, y, Some(&full_w), reg)
        .map_err(|e| diverged(step, e.to_string(), &curve))?;
    Ok(TrainResult {
        model,
        curve,
        stop,
        steps: step,
        final_loss,
        final_objective,
        final_grad_norm: grads.norm(),
    })
}
