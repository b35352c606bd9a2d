//! Oracles and analysis tools: finite differences, the minimum-norm quadratic
//! network, the separation and deep-linear experiments, and structure scores for
//! learned feature matrices.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::{gen_deep_linear, gen_separation, SeparationConfig};
use crate::error::{Error, Result};
use crate::kernels::{FeatureMatrix, KernelSpec};
use crate::nn::{self, Activation, CurvePoint, EstimateKind, Layer, MlpModel, Regularization, TrainConfig};
use crate::symlinalg::{self, cosine_sim, pearson_corr, psd_power, sym_eig, SymMatrix};

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |j, _| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(floor)
}

/// A two-layer quadratic network `f(x) = Σ a_i (w_iᵀx)²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MinNormSolution {
    pub a: Vec<f64>,
    /// `m×d`, row `i` is `w_i`.
    pub w: Vec<Vec<f64>>,
    /// `‖a‖² + ‖W‖²_F`.
    pub cost: f64,
    pub active_neurons: usize,
}

impl MinNormSolution {
    pub fn weight_matrix(&self) -> DMatrix<f64> {
        let d = self.w.first().map_or(0, Vec::len);
        DMatrix::from_fn(self.w.len(), d, |i, j| self.w[i][j])
    }

    pub fn evaluate(&self, x: &DVector<f64>) -> f64 {
        quadratic_net_value(&DVector::from_column_slice(&self.a), &self.weight_matrix(), x)
    }

    pub fn to_model(&self) -> Result<MlpModel> {
        MlpModel::two_layer(self.weight_matrix(), DVector::from_column_slice(&self.a), Activation::Quadratic)
    }
}

pub fn quadratic_net_value(a: &DVector<f64>, w: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (w * x).iter().zip(a.iter()).map(|(z, ai)| ai * z * z).sum()
}

/// `‖a‖² + ‖W‖²_F`.
pub fn representation_cost(a: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    a.norm_squared() + w.norm_squared()
}

/// Eigen-based construction `a_i = sgn(λ_i)|λ_i|^{1/3}`, `w_i = |λ_i|^{1/3} v_i`,
/// padded with zero neurons up to width `m`.
pub fn min_norm_quadratic(q: &SymMatrix, m: usize) -> Result<MinNormSolution> {
    let d = q.dim();
    if m < d {
        return Err(Error::InvalidConfig(format!("width {m} is smaller than the input dimension {d}")));
    }
    let eig = sym_eig(q)?;
    let scale = symlinalg::max_abs(q.as_matrix());
    let mut a = vec![0.0; m];
    let mut w = vec![vec![0.0; d]; m];
    let mut active = 0;
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        // Exact zeros of Q give exactly zero neurons; round-off eigenvalues are dropped too.
        if lambda.abs() <= 1e-14 * scale || lambda == 0.0 {
            continue;
        }
        let r = lambda.abs().cbrt();
        a[i] = lambda.signum() * r;
        for j in 0..d {
            w[i][j] = r * eig.eigenvectors[(j, i)];
        }
        active += 1;
    }
    let cost = 2.0 * eig.eigenvalues.iter().map(|l| l.abs().powf(2.0 / 3.0)).sum::<f64>();
    Ok(MinNormSolution {
        a,
        w,
        cost,
        active_neurons: active,
    })
}

fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

/// Another exact representation of `xᵀQx` by a quadratic network of width `2d`, in
/// the balanced parameterization `a_i² = ‖w_i‖²` of the eigen construction.
///
/// `Q = P − N` with `P, N ⪰ 0`; the columns `b_j` of `P^{1/2}R` and `N^{1/2}R'`
/// (random rotations `R, R'`) give `P = Σ b_j b_jᵀ`, and each term `μ u uᵀ` becomes
/// the neuron `a = ±μ^{1/3}`, `w = μ^{1/3} u`.
pub fn alternative_representation(q: &SymMatrix, seed: u64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = q.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eig = sym_eig(q)?;
    let pos = eig.reconstruct_with(|l| l.max(0.0).sqrt());
    let neg = eig.reconstruct_with(|l| (-l).max(0.0).sqrt());
    let mut a = DVector::zeros(2 * d);
    let mut w = DMatrix::zeros(2 * d, d);
    for (block, (root, sign)) in [(pos, 1.0), (neg, -1.0)].into_iter().enumerate() {
        let b = root * random_orthogonal(d, &mut rng);
        for j in 0..d {
            let col = b.column(j);
            let mu = col.norm_squared();
            if mu == 0.0 {
                continue;
            }
            let r = mu.cbrt();
            let row = block * d + j;
            a[row] = sign * r;
            for k in 0..d {
                w[(row, k)] = r * col[k] / mu.sqrt();
            }
        }
    }
    Ok((a, w))
}

/// Rescales every neuron `(a_i, w_i) → (a_i/c_i², c_i w_i)`, which leaves the
/// represented quadratic unchanged.
pub fn rescale_neurons(a: &DVector<f64>, w: &DMatrix<f64>, c: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let mut a2 = a.clone();
    let mut w2 = w.clone();
    for (i, &ci) in c.iter().enumerate() {
        a2[i] /= ci * ci;
        w2.row_mut(i).scale_mut(ci);
    }
    (a2, w2)
}

/// Largest `|xᵀQx − f(x)|` over `{−1, 0, 1, 2}^d` (capped at 4096 points by striding).
pub fn representation_error(q: &SymMatrix, a: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    let d = q.dim();
    let total = 4usize.pow(d as u32);
    let stride = total.div_ceil(4096).max(1);
    let mut worst: f64 = 0.0;
    let mut code = 0;
    while code < total {
        let mut rem = code;
        let x = DVector::from_fn(d, |_, _| {
            let v = (rem % 4) as f64 - 1.0;
            rem /= 4;
            v
        });
        let exact = (x.transpose() * q.as_matrix() * &x)[(0, 0)];
        worst = worst.max((exact - quadratic_net_value(a, w, &x)).abs());
        code += stride;
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimilaritySnapshot {
    pub step: usize,
    pub objective: f64,
    pub cos_fact: Option<f64>,
    pub cos_agop: Option<f64>,
    pub corr_fact: Option<f64>,
    pub corr_agop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SeparationReport {
    pub config: SeparationConfig,
    pub width: usize,
    pub nfa_power: f64,
    pub final_snapshot: SimilaritySnapshot,
    /// The recorded snapshot with the highest `cos_fact`.
    pub best_snapshot: SimilaritySnapshot,
    pub history: Vec<SimilaritySnapshot>,
    /// Weighted population loss `E[½(f − y)²]` of the final model.
    pub final_loss: f64,
    pub final_objective: f64,
    pub final_grad_norm: f64,
    /// `169·λ`.
    pub loss_bound: f64,
    /// Set when `WᵀW` or an estimate vanished so a similarity is undefined.
    pub degenerate: bool,
    pub steps: usize,
    pub model: MlpModel,
}

fn snapshot(model: &MlpModel, x: &DMatrix<f64>, y: &DMatrix<f64>, w: &DVector<f64>, lambda: f64, nfa_power: f64, point: &CurvePoint) -> SimilaritySnapshot {
    let target = nn::feature_target(model, 0, false);
    let (fact, agop) = match nn::forward_backward(model, x, y, Some(w), Regularization::new(lambda)) {
        Ok(fb) => (
            nn::estimate_from_bundle(&fb.bundle, EstimateKind::Fact, 0, lambda).ok(),
            nn::estimate_from_bundle(&fb.bundle, EstimateKind::Agop, 0, lambda).ok(),
        ),
        Err(_) => (None, None),
    };
    let agop_s = agop
        .and_then(|e| SymMatrix::from_symmetrized(e.matrix).ok())
        .and_then(|m| psd_power(&m, nfa_power, symlinalg::DEFAULT_CLAMP_TOL).ok())
        .map(SymMatrix::into_inner);
    let fact = fact.map(|e| e.matrix);
    SimilaritySnapshot {
        step: point.step,
        objective: point.objective,
        cos_fact: fact.as_ref().and_then(|f| cosine_sim(f, &target).ok()),
        cos_agop: agop_s.as_ref().and_then(|g| cosine_sim(g, &target).ok()),
        corr_fact: fact.as_ref().and_then(|f| pearson_corr(f, &target).ok()),
        corr_agop: agop_s.as_ref().and_then(|g| pearson_corr(g, &target).ok()),
    }
}

/// Trains `aᵀσ(Wx)` with quadratic `σ` on the exact weighted population loss of the
/// separation distribution and compares `FACT` and `AGOP^s` with `WᵀW`.
/// `train.log_every` sets how often snapshots are taken.
pub fn run_separation_experiment(
    config: &SeparationConfig,
    width: usize,
    train: &TrainConfig,
    nfa_power: f64,
    init_seed: u64,
) -> Result<SeparationReport> {
    if width < 7 {
        return Err(Error::InvalidConfig(format!("width must be at least 7, got {width}")));
    }
    let data = gen_separation(config)?;
    let weights = data.weights.clone().expect("separation data is weighted");
    let mut train = train.clone();
    train.weight_decay = config.weight_decay;
    train.batch_size = None;
    let model = MlpModel::init(&[4, width, 1], Activation::Quadratic, false, init_seed)?;
    let lambda = config.weight_decay;
    let mut history = Vec::new();
    let result = nn::train_observed(model, &data.x, &data.y, Some(&weights), &train, &mut |point, m| {
        history.push(snapshot(m, &data.x, &data.y, &weights, lambda, nfa_power, point));
    })?;
    let last_point = CurvePoint {
        epoch: train.epochs,
        step: result.steps,
        learning_rate: 0.0,
        loss: result.final_loss,
        objective: result.final_objective,
        grad_norm: result.final_grad_norm,
    };
    let final_snapshot = snapshot(&result.model, &data.x, &data.y, &weights, lambda, nfa_power, &last_point);
    history.push(final_snapshot);
    let best_snapshot = *history
        .iter()
        .filter(|s| s.cos_fact.is_some())
        .max_by(|a, b| a.cos_fact.unwrap().total_cmp(&b.cos_fact.unwrap()))
        .unwrap_or(&final_snapshot);
    let degenerate = final_snapshot.cos_fact.is_none() || final_snapshot.cos_agop.is_none();
    Ok(SeparationReport {
        config: *config,
        width,
        nfa_power,
        final_snapshot,
        best_snapshot,
        history,
        final_loss: result.final_loss,
        final_objective: result.final_objective,
        final_grad_norm: result.final_grad_norm,
        loss_bound: 169.0 * lambda,
        degenerate,
        steps: result.steps,
        model: result.model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DeepLinearConfig {
    pub depths: Vec<usize>,
    #[serde(default = "default_dl_d")]
    pub input_dim: usize,
    #[serde(default = "default_dl_c")]
    pub output_dim: usize,
    #[serde(default = "default_dl_h")]
    pub hidden: usize,
    #[serde(default = "default_dl_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_dl_d() -> usize {
    10
}
fn default_dl_c() -> usize {
    5
}
fn default_dl_h() -> usize {
    64
}
fn default_dl_n() -> usize {
    2000
}

impl Default for DeepLinearConfig {
    fn default() -> Self {
        DeepLinearConfig {
            depths: vec![2, 3, 4],
            input_dim: default_dl_d(),
            output_dim: default_dl_c(),
            hidden: default_dl_h(),
            n: default_dl_n(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeepLinearRow {
    pub depth: usize,
    pub cos_agop_inv_depth: f64,
    pub cos_agop_half: f64,
    pub cos_fact: f64,
    pub fact_relative_error: f64,
    pub balancedness: f64,
    /// Leading singular values of every layer, top `min` rank first.
    pub singular_values: Vec<Vec<f64>>,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub steps: usize,
}

/// `W = YᵀX (XᵀX + nλI)⁻¹`, the minimizer of `(1/n)Σ½‖Wx_i − y_i‖² + (λ/2)‖W‖²`.
pub fn ridge_closed_form(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let n = x.nrows() as f64;
    let gram = x.transpose() * x + DMatrix::identity(x.ncols(), x.ncols()) * (n * lambda);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::InvalidMatrix("ridge normal equations are not positive definite".into()))?;
    // W (XᵀX + nλI) = YᵀX  ⇔  (XᵀX + nλI) Wᵀ = XᵀY.
    Ok(chol.solve(&(x.transpose() * y)).transpose())
}

/// Largest relative spread `(max − min)/max` of the `k`-th singular value across
/// layers, over the leading `rank` singular values.
pub fn balancedness(model: &MlpModel, rank: usize) -> (f64, Vec<Vec<f64>>) {
    let svs: Vec<Vec<f64>> = model
        .layers()
        .iter()
        .map(|l| {
            let mut s: Vec<f64> = l.weight.singular_values().iter().copied().collect();
            s.sort_by(|a, b| b.total_cmp(a));
            s.truncate(rank);
            s
        })
        .collect();
    let mut worst: f64 = 0.0;
    for k in 0..rank {
        let vals: Vec<f64> = svs.iter().filter_map(|s| s.get(k).copied()).collect();
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        if hi > 0.0 {
            worst = worst.max((hi - lo) / hi);
        }
    }
    (worst, svs)
}

fn deep_linear_row(model: &MlpModel, x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64, steps: usize) -> Result<DeepLinearRow> {
    let depth = model.depth();
    let fb = nn::forward_backward(model, x, y, None, Regularization::new(lambda))?;
    let fact = nn::estimate_from_bundle(&fb.bundle, EstimateKind::Fact, 0, lambda)?.matrix;
    let agop = SymMatrix::from_symmetrized(nn::estimate_from_bundle(&fb.bundle, EstimateKind::Agop, 0, lambda)?.matrix)?;
    let target = nn::feature_target(model, 0, false);
    let pow = |s: f64| psd_power(&agop, s, symlinalg::DEFAULT_CLAMP_TOL).map(SymMatrix::into_inner);
    let (bal, svs) = balancedness(model, model.output_dim());
    Ok(DeepLinearRow {
        depth,
        cos_agop_inv_depth: cosine_sim(&pow(1.0 / depth as f64)?, &target)?,
        cos_agop_half: cosine_sim(&pow(0.5)?, &target)?,
        cos_fact: cosine_sim(&fact, &target)?,
        fact_relative_error: (&target - &fact).norm() / target.norm(),
        balancedness: bal,
        singular_values: svs,
        final_loss: fb.loss,
        final_grad_norm: fb.gradients.norm(),
        steps,
    })
}

/// Trains a deep linear network of each depth on teacher data and reports how well
/// `AGOP^{1/L}`, `AGOP^{1/2}` and `FACT` match `W₁ᵀW₁`. Depth 1 uses the closed-form
/// ridge optimum instead of training.
pub fn run_deep_linear_sweep(config: &DeepLinearConfig, train: &TrainConfig) -> Result<Vec<DeepLinearRow>> {
    if config.depths.is_empty() || config.depths.contains(&0) {
        return Err(Error::InvalidConfig("depths must be a non-empty list of positive integers".into()));
    }
    if !(train.weight_decay > 0.0) {
        return Err(Error::FactUndefined);
    }
    let (data, _teacher) = gen_deep_linear(config.n, config.input_dim, config.output_dim, config.seed)?;
    let lambda = train.weight_decay;
    config
        .depths
        .iter()
        .map(|&depth| {
            if depth == 1 {
                let w = ridge_closed_form(&data.x, &data.y, lambda)?;
                let model = MlpModel::new(vec![Layer {
                    weight: w,
                    bias: None,
                    activation: Activation::Identity,
                }])?;
                return deep_linear_row(&model, &data.x, &data.y, lambda, 0);
            }
            let mut dims = vec![config.input_dim];
            dims.extend(std::iter::repeat_n(config.hidden, depth - 1));
            dims.push(config.output_dim);
            let model = MlpModel::init(&dims, Activation::Identity, false, config.seed.wrapping_add(depth as u64))?;
            let out = nn::train(model, &data.x, &data.y, None, train)?;
            deep_linear_row(&out.model, &data.x, &data.y, lambda, out.steps)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TauPair {
    pub i: usize,
    pub j: usize,
    pub kprime: f64,
    pub tau: f64,
    /// `α_iᵀα_j`, the weight the pair carries in both updates.
    pub alpha_dot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TauReport {
    pub pairs: Vec<TauPair>,
    /// Least-squares slope of `τ ≈ slope · k′` through the origin.
    pub slope: f64,
    /// `None` when `τ` is constant over the pairs.
    pub r_squared: Option<f64>,
}

impl TauReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kprime,tau\n");
        for p in &self.pairs {
            s.push_str(&format!("{:?},{:?}\n", p.kprime, p.tau));
        }
        s
    }
}

/// Pairs `(k′(x_iᵀMx_j), τ(x_i,M,x_j))` with `τ = (1/n)Σ_l k′(x_lᵀMx_i)k′(x_lᵀMx_j)`,
/// over `i ≤ j`, randomly subsampled to `max_pairs` when given.
pub fn tau_vs_kprime(
    x: &DMatrix<f64>,
    m: &FeatureMatrix,
    alpha: &DMatrix<f64>,
    spec: &KernelSpec,
    max_pairs: Option<usize>,
    seed: u64,
) -> Result<TauReport> {
    let KernelSpec::InnerProduct { scalar_fn } = spec else {
        return Err(Error::UnsupportedKernel("tau_vs_kprime needs an inner-product kernel".into()));
    };
    let n = x.nrows();
    if m.dim() != x.ncols() || alpha.nrows() != n {
        return Err(Error::ShapeError("x, M and alpha disagree".into()));
    }
    let q = x * m.as_matrix() * x.transpose();
    let kp = q.map(|t| scalar_fn.derivative(t));
    let tau = kp.transpose() * &kp / n as f64;
    let total = n * (n + 1) / 2;
    let chosen: Vec<usize> = match max_pairs {
        Some(k) if k < total => {
            let mut v = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), total, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..total).collect(),
    };
    // Linear index over the upper triangle, row by row.
    let mut pairs = Vec::with_capacity(chosen.len());
    let mut it = chosen.into_iter().peekable();
    let mut offset = 0;
    'rows: for i in 0..n {
        let row_len = n - i;
        while let Some(&code) = it.peek() {
            if code >= offset + row_len {
                break;
            }
            let j = i + (code - offset);
            pairs.push(TauPair {
                i,
                j,
                kprime: kp[(i, j)],
                tau: tau[(i, j)],
                alpha_dot: alpha.row(i).dot(&alpha.row(j)),
            });
            it.next();
        }
        offset += row_len;
        if it.peek().is_none() {
            break 'rows;
        }
    }
    let sxx: f64 = pairs.iter().map(|p| p.kprime * p.kprime).sum();
    let sxy: f64 = pairs.iter().map(|p| p.kprime * p.tau).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateInput("k' vanishes on every pair".into()));
    }
    let slope = sxy / sxx;
    let mean_tau = pairs.iter().map(|p| p.tau).sum::<f64>() / pairs.len() as f64;
    let ss_tot: f64 = pairs.iter().map(|p| (p.tau - mean_tau).powi(2)).sum();
    let ss_res: f64 = pairs.iter().map(|p| (p.tau - slope * p.kprime).powi(2)).sum();
    let r_squared = (ss_tot > 1e-14 * mean_tau.abs().max(1e-300) * pairs.len() as f64 && ss_tot > 0.0)
        .then(|| 1.0 - ss_res / ss_tot);
    Ok(TauReport { pairs, slope, r_squared })
}

/// `‖M_SS‖²_F / ‖M‖²_F` for the support block `S`.
pub fn support_concentration(m: &FeatureMatrix, support: &[usize]) -> Result<f64> {
    if support.is_empty() {
        return Err(Error::InvalidConfig("support must be nonempty".into()));
    }
    let d = m.dim();
    if let Some(&bad) = support.iter().find(|&&s| s >= d) {
        return Err(Error::InvalidConfig(format!("support index {bad} out of range for dimension {d}")));
    }
    let mat = m.as_matrix();
    let total = mat.norm_squared();
    if total == 0.0 {
        return Err(Error::DegenerateInput("zero feature matrix".into()));
    }
    let block: f64 = support
        .iter()
        .flat_map(|&i| support.iter().map(move |&j| mat[(i, j)].powi(2)))
        .sum();
    Ok(block / total)
}

fn variance(vals: &[f64]) -> f64 {
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
}

/// `1 − mean within-class variance / total variance`, classes given by `class(i, j)`.
fn diagonal_class_score(block: &DMatrix<f64>, class: impl Fn(usize, usize) -> usize) -> f64 {
    let p = block.nrows();
    let total = variance(block.as_slice());
    if total <= 1e-300 || total <= 1e-24 * block.amax().powi(2) {
        return 1.0;
    }
    let mut groups = vec![Vec::with_capacity(p); p];
    for i in 0..p {
        for j in 0..p {
            groups[class(i, j)].push(block[(i, j)]);
        }
    }
    let within = groups.iter().map(|g| variance(g)).sum::<f64>() / p as f64;
    1.0 - within / total
}

/// Average over `p×p` blocks of how well each block is constant along cyclic
/// diagonals (`j − i mod p`) or cyclic anti-diagonals (`i + j mod p`), whichever fits
/// better. Constant blocks score 1.
pub fn circulant_score(m: &FeatureMatrix, block: usize) -> Result<f64> {
    block_circulant_score(m.as_matrix(), block)
}

/// [`circulant_score`] for any square matrix.
pub fn block_circulant_score(mat: &DMatrix<f64>, block: usize) -> Result<f64> {
    if !mat.is_square() {
        return Err(Error::ShapeError("circulant score needs a square matrix".into()));
    }
    let d = mat.nrows();
    if block == 0 || d % block != 0 {
        return Err(Error::InvalidConfig(format!("dimension {d} is not a multiple of block size {block}")));
    }
    let p = block;
    let blocks = d / p;
    let mut sum = 0.0;
    for bi in 0..blocks {
        for bj in 0..blocks {
            let sub = mat.view((bi * p, bj * p), (p, p)).clone_owned();
            let circ = diagonal_class_score(&sub, |i, j| (j + p - i) % p);
            let hank = diagonal_class_score(&sub, |i, j| (i + j) % p);
            sum += circ.max(hank);
        }
    }
    Ok(sum / (blocks * blocks) as f64)
}

/// Mean and standard deviation of [`circulant_score`] on symmetric matrices with
/// i.i.d. Gaussian entries, the reference level for an unstructured matrix.
pub fn circulant_baseline(dim: usize, block: usize, trials: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..trials.max(1))
        .map(|_| {
            let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            block_circulant_score(&((&g + g.transpose()) * 0.5), block)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((mean, variance(&scores).sqrt()))
}
