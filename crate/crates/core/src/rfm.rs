//! Recursive Feature Machines: kernel ridge regression alternated with a
//! feature-matrix update driven either by the AGOP (NFA rule) or by the FACT
//! matrix (plain or geometrically averaged).
//!
//! `M = WᵀW` is tracked directly; `W` is never materialised.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Divergence, Error, Result};
use crate::kernels::{self, FeatureMatrix, GramParts, KernelSpec};
use crate::symlinalg::{self, SymMatrix, DEFAULT_CLAMP_TOL};

/// Kernel representer coefficients `α = (K + nλI)⁻¹ Y`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualSolution {
    pub alpha: DMatrix<f64>,
    pub ridge: f64,
    /// `‖(K + nλI)α − Y‖_F / ‖Y‖_F`.
    pub fit_residual: f64,
}

pub fn solve_krr(k: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<DualSolution> {
    let n = k.nrows();
    if !k.is_square() || y.nrows() != n {
        return Err(Error::ShapeError(format!(
            "kernel {}x{} with targets {}x{}",
            k.nrows(),
            k.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidConfig(format!("ridge must be non-negative, got {ridge}")));
    }
    symlinalg::check_finite(k)?;
    let mut system = k.clone();
    for i in 0..n {
        system[(i, i)] += n as f64 * ridge;
    }
    let mut alpha = match system.clone().cholesky() {
        Some(chol) => chol.solve(y),
        None => {
            let lu = system.clone().lu();
            lu.solve(y).ok_or(Error::SingularKernel)?
        }
    };
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularKernel);
    }
    let y_norm = y.norm().max(f64::MIN_POSITIVE);
    let mut residual = &system * &alpha - y;
    // One round of iterative refinement for badly conditioned systems.
    if residual.norm() > 1e-12 * y_norm {
        if let Some(correction) = system.clone().lu().solve(&residual) {
            let refined = &alpha - correction;
            let r2 = &system * &refined - y;
            if r2.norm() < residual.norm() {
                alpha = refined;
                residual = r2;
            }
        }
    }
    let fit_residual = residual.norm() / y_norm;
    if ridge == 0.0 && fit_residual > 1e-6 {
        return Err(Error::SingularKernel);
    }
    Ok(DualSolution {
        alpha,
        ridge,
        fit_residual,
    })
}

/// `K_M(X_query, X_train) · α`.
pub fn predict(
    spec: &KernelSpec,
    m: &FeatureMatrix,
    x_train: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    x_query: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if alpha.nrows() != x_train.nrows() {
        return Err(Error::ShapeError(format!(
            "alpha has {} rows for {} training points",
            alpha.nrows(),
            x_train.nrows()
        )));
    }
    let k = kernels::gram(spec, m, x_query, x_train)?;
    Ok(k * alpha)
}

fn check_alpha(x: &DMatrix<f64>, alpha: &DMatrix<f64>, m: &FeatureMatrix) -> Result<()> {
    if alpha.nrows() != x.nrows() {
        return Err(Error::ShapeError(format!(
            "alpha has {} rows for {} training points",
            alpha.nrows(),
            x.nrows()
        )));
    }
    if x.ncols() != m.dim() {
        return Err(Error::ShapeError(format!("inputs have {} columns, M is {}", x.ncols(), m.dim())));
    }
    Ok(())
}

/// Per-sample input gradients of the predictor `f̂(z) = K_M(z, X)α` at every row of
/// `x_eval`, each as a `d×c` matrix (column `ch` is `∇f̂_ch`).
pub fn predictor_gradients(
    spec: &KernelSpec,
    m: &FeatureMatrix,
    x: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    x_eval: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    check_alpha(x, alpha, m)?;
    let parts = kernels::gram_parts(spec, m, x_eval, x)?;
    let a = pre_gradients(spec, &parts, x, alpha, x_eval);
    let mm = m.as_matrix();
    let sign = if spec.is_inner_product() { 1.0 } else { -1.0 };
    Ok(a.into_iter().map(|ai| mm * ai * sign).collect())
}

/// `Aᵢ` with `∇f̂(zᵢ) = ±M Aᵢ`:
/// distance kernels `Aᵢ = Σⱼ Φᵢⱼ (zᵢ − xⱼ) αⱼᵀ`, inner-product `Aᵢ = Σⱼ Φᵢⱼ xⱼ αⱼᵀ`.
fn pre_gradients(
    spec: &KernelSpec,
    parts: &GramParts,
    x: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    x_eval: &DMatrix<f64>,
) -> Vec<DMatrix<f64>> {
    let (n, d) = x.shape();
    let c = alpha.ncols();
    // R[j, k*c + ch] = x_jk α_j,ch
    let r = DMatrix::from_fn(n, d * c, |j, col| x[(j, col / c)] * alpha[(j, col % c)]);
    let p = &parts.grad_weight * r;
    let u = &parts.grad_weight * alpha;
    let distance = !spec.is_inner_product();
    (0..x_eval.nrows())
        .map(|i| {
            DMatrix::from_fn(d, c, |k, ch| {
                let s = p[(i, k * c + ch)];
                if distance {
                    x_eval[(i, k)] * u[(i, ch)] - s
                } else {
                    s
                }
            })
        })
        .collect()
}

/// Average gradient outer product of the kernel predictor over `x_eval`,
/// summed over output channels.
pub fn compute_agop(
    spec: &KernelSpec,
    m: &FeatureMatrix,
    x: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    x_eval: &DMatrix<f64>,
) -> Result<SymMatrix> {
    check_alpha(x, alpha, m)?;
    if x_eval.ncols() != m.dim() {
        return Err(Error::ShapeError("evaluation inputs do not match M".into()));
    }
    let n_eval = x_eval.nrows();
    if n_eval == 0 {
        return Err(Error::ShapeError("empty evaluation set".into()));
    }
    let parts = kernels::gram_parts(spec, m, x_eval, x)?;
    let (n, d) = x.shape();
    let c = alpha.ncols();
    // Two equivalent assemblies of Σᵢ AᵢAᵢᵀ; pick the cheaper one.
    let inner = if d * c <= n {
        let a = pre_gradients(spec, &parts, x, alpha, x_eval);
        let mut stacked = DMatrix::zeros(d, n_eval * c);
        for (i, ai) in a.iter().enumerate() {
            stacked.columns_mut(i * c, c).copy_from(ai);
        }
        &stacked * stacked.transpose()
    } else {
        let phi = &parts.grad_weight;
        let aat = alpha * alpha.transpose();
        let gram_phi = phi.transpose() * phi;
        let mut out = x.transpose() * gram_phi.component_mul(&aat) * x;
        if !spec.is_inner_product() {
            let u = phi * alpha;
            let norms = DVector::from_iterator(n_eval, u.row_iter().map(|r| r.norm_squared()));
            let weighted = DMatrix::from_fn(n_eval, d, |i, k| x_eval[(i, k)] * norms[i]);
            let cross = x_eval.transpose() * phi.component_mul(&(&u * alpha.transpose())) * x;
            out += x_eval.transpose() * weighted - &cross - cross.transpose();
        }
        out
    };
    let mm = m.as_matrix();
    SymMatrix::from_symmetrized(mm * inner * mm / n_eval as f64)
}

/// `FACT = Σᵢⱼ (∂/∂x K_M(x, xⱼ)|_{x=xᵢ}) αⱼᵀαᵢ xᵢᵀ` for a kernel machine fit with ridge `λ > 0`.
pub fn compute_fact(
    spec: &KernelSpec,
    m: &FeatureMatrix,
    x: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    if !(ridge > 0.0) {
        return Err(Error::FactUndefined);
    }
    check_alpha(x, alpha, m)?;
    let parts = kernels::gram_parts(spec, m, x, x)?;
    let s = parts.grad_weight.component_mul(&(alpha * alpha.transpose()));
    let mm = m.as_matrix();
    let xt_st_x = x.transpose() * s.transpose() * x;
    let fact = if spec.is_inner_product() {
        mm * xt_st_x
    } else {
        let row_sums = s.column_sum();
        let weighted = DMatrix::from_fn(x.nrows(), x.ncols(), |i, k| x[(i, k)] * row_sums[i]);
        -(mm * (x.transpose() * weighted - xt_st_x))
    };
    symlinalg::check_finite(&fact)?;
    Ok(fact)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateRule {
    /// `M ← AGOP^s`.
    Nfa,
    /// `M ← (FACT·FACTᵀ)^{1/2}`.
    FactPlain,
    /// `M ← (FACT·M·M·FACTᵀ)^{1/4}`.
    FactGeom,
}

impl UpdateRule {
    pub fn uses_fact(self) -> bool {
        !matches!(self, UpdateRule::Nfa)
    }
}

/// Next feature matrix from the current one and the rule's estimate
/// (AGOP for [`UpdateRule::Nfa`], FACT otherwise).
pub fn update_feature_matrix(
    rule: UpdateRule,
    current: &FeatureMatrix,
    estimate: &DMatrix<f64>,
    nfa_power: f64,
) -> Result<FeatureMatrix> {
    symlinalg::check_finite(estimate)?;
    let d = current.dim();
    if estimate.shape() != (d, d) {
        return Err(Error::ShapeError(format!(
            "estimate is {}x{}, feature matrix is {d}x{d}",
            estimate.nrows(),
            estimate.ncols()
        )));
    }
    let next = match rule {
        UpdateRule::Nfa => {
            let agop = SymMatrix::from_symmetrized(estimate.clone())?;
            symlinalg::psd_power(&agop, nfa_power, DEFAULT_CLAMP_TOL)?
        }
        UpdateRule::FactPlain => symlinalg::symmetrized_sqrt(estimate)?,
        UpdateRule::FactGeom => {
            // (B Bᵀ)^{1/4} with B = FACT·M, taken as a square root of √(B Bᵀ).
            let b = estimate * current.as_matrix();
            let root = symlinalg::symmetrized_sqrt(&b)?;
            symlinalg::psd_power(&root, 0.5, DEFAULT_CLAMP_TOL)?
        }
    };
    FeatureMatrix::new(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EvalSet {
    #[default]
    Train,
    Test,
}

fn default_nfa_power() -> f64 {
    0.5
}

fn default_cap() -> f64 {
    1e12
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RfmConfig {
    pub update_rule: UpdateRule,
    #[serde(default = "default_nfa_power")]
    pub nfa_power: f64,
    pub iterations: usize,
    pub ridge: f64,
    pub kernel: KernelSpec,
    #[serde(default)]
    pub early_stop_on_test_acc: Option<f64>,
    /// Permits `ridge = 0` (NFA rule only).
    #[serde(default)]
    pub allow_zero_ridge: bool,
    /// Divergence guard on `‖M‖_F`.
    #[serde(default = "default_cap")]
    pub divergence_cap: f64,
    #[serde(default)]
    pub agop_eval: EvalSet,
    /// Decision threshold for single-output targets.
    #[serde(default = "default_threshold")]
    pub classification_threshold: f64,
}

impl RfmConfig {
    pub fn new(update_rule: UpdateRule, kernel: KernelSpec, iterations: usize, ridge: f64) -> Self {
        RfmConfig {
            update_rule,
            nfa_power: default_nfa_power(),
            iterations,
            ridge,
            kernel,
            early_stop_on_test_acc: None,
            allow_zero_ridge: false,
            divergence_cap: default_cap(),
            agop_eval: EvalSet::Train,
            classification_threshold: default_threshold(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.nfa_power > 0.0) {
            return Err(Error::InvalidConfig("nfaPower must be positive".into()));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::InvalidConfig("ridge must be non-negative".into()));
        }
        if self.ridge == 0.0 {
            if !self.allow_zero_ridge {
                return Err(Error::InvalidConfig("ridge = 0 requires allowZeroRidge".into()));
            }
            if self.update_rule.uses_fact() {
                return Err(Error::FactUndefined);
            }
        }
        if !(self.divergence_cap > 0.0) {
            return Err(Error::InvalidConfig("divergenceCap must be positive".into()));
        }
        Ok(())
    }
}

/// Diagnostics for one completed iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IterationRecord {
    pub iteration: usize,
    pub feature_matrix: FeatureMatrix,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Eigenvalue range of the symmetric part of the update estimate (FACT or AGOP).
    pub estimate_min_eig: Option<f64>,
    pub estimate_max_eig: Option<f64>,
    /// Pearson correlation between the symmetrised estimate and the current `M`.
    pub estimate_corr: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RfmTrace {
    pub records: Vec<IterationRecord>,
}

impl RfmTrace {
    /// CSV with one row per iteration.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,trainLoss,trainAcc,testLoss,testAcc,factMinEig,factMaxEig,corrDiagnostics\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        for r in &self.records {
            out.push_str(&format!(
                "{},{:?},{:?},{},{},{},{},{}\n",
                r.iteration,
                r.train_loss,
                r.train_accuracy,
                opt(r.test_loss),
                opt(r.test_accuracy),
                opt(r.estimate_min_eig),
                opt(r.estimate_max_eig),
                opt(r.estimate_corr)
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RfmFit {
    pub feature_matrix: FeatureMatrix,
    pub dual: DualSolution,
    pub trace: RfmTrace,
}

impl RfmFit {
    pub fn final_record(&self) -> &IterationRecord {
        self.trace.records.last().expect("a fit always has at least one record")
    }
}

/// Mean over samples of `‖ŷᵢ − yᵢ‖²`.
pub fn mean_squared_error(pred: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    (pred - y).norm_squared() / y.nrows().max(1) as f64
}

/// Accuracy of thresholded (one output) or arg-max (several outputs) predictions.
pub fn classification_accuracy(pred: &DMatrix<f64>, y: &DMatrix<f64>, threshold: f64) -> f64 {
    let n = y.nrows();
    if n == 0 {
        return 0.0;
    }
    let correct = (0..n)
        .filter(|&i| {
            if y.ncols() == 1 {
                (pred[(i, 0)] > threshold) == (y[(i, 0)] > threshold)
            } else {
                argmax(pred.row(i).iter()) == argmax(y.row(i).iter())
            }
        })
        .count();
    correct as f64 / n as f64
}

fn argmax<'a>(it: impl Iterator<Item = &'a f64>) -> usize {
    it.enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Runs the recursive feature machine starting from `M₀ = I`.
///
/// `iterations = T` performs `T` feature updates; the returned predictor uses `M_T`,
/// so `T = 0` is plain kernel ridge regression.
pub fn rfm_fit(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    test: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
    config: &RfmConfig,
) -> Result<RfmFit> {
    config.validate()?;
    if x.nrows() != y.nrows() || x.nrows() == 0 {
        return Err(Error::ShapeError(format!("{} inputs vs {} targets", x.nrows(), y.nrows())));
    }
    if let Some((xt, yt)) = test {
        if xt.ncols() != x.ncols() || yt.ncols() != y.ncols() || xt.nrows() != yt.nrows() {
            return Err(Error::ShapeError("test split does not match training shapes".into()));
        }
    }
    let spec = &config.kernel;
    let mut m = FeatureMatrix::identity(x.ncols());
    let mut trace = RfmTrace::default();

    for t in 0..=config.iterations {
        let k = kernels::gram(spec, &m, x, x)?;
        let dual = solve_krr(&k, y, config.ridge)?;
        let train_pred = &k * &dual.alpha;
        let (test_loss, test_accuracy) = match test {
            Some((xt, yt)) => {
                let p = predict(spec, &m, x, &dual.alpha, xt)?;
                (
                    Some(mean_squared_error(&p, yt)),
                    Some(classification_accuracy(&p, yt, config.classification_threshold)),
                )
            }
            None => (None, None),
        };
        let mut record = IterationRecord {
            iteration: t,
            feature_matrix: m.clone(),
            train_loss: mean_squared_error(&train_pred, y),
            train_accuracy: classification_accuracy(&train_pred, y, config.classification_threshold),
            test_loss,
            test_accuracy,
            estimate_min_eig: None,
            estimate_max_eig: None,
            estimate_corr: None,
        };
        let stop_early = matches!(
            (config.early_stop_on_test_acc, test_accuracy),
            (Some(target), Some(acc)) if acc >= target
        );
        if t == config.iterations || stop_early {
            trace.records.push(record);
            return Ok(RfmFit {
                feature_matrix: m,
                dual,
                trace,
            });
        }

        let estimate = match config.update_rule {
            UpdateRule::Nfa => {
                let eval = match (config.agop_eval, test) {
                    (EvalSet::Test, Some((xt, _))) => xt,
                    _ => x,
                };
                compute_agop(spec, &m, x, &dual.alpha, eval)?.into_inner()
            }
            UpdateRule::FactPlain | UpdateRule::FactGeom => compute_fact(spec, &m, x, &dual.alpha, config.ridge)?,
        };
        let sym_part = SymMatrix::from_symmetrized(estimate.clone())?;
        if let Ok(eig) = symlinalg::sym_eig(&sym_part) {
            record.estimate_min_eig = Some(eig.min_eigenvalue());
            record.estimate_max_eig = Some(eig.max_eigenvalue());
        }
        record.estimate_corr = symlinalg::pearson_corr(sym_part.as_matrix(), m.as_matrix()).ok();
        trace.records.push(record);

        let next = update_feature_matrix(config.update_rule, &m, &estimate, config.nfa_power);
        match next {
            Ok(next) if next.as_matrix().norm() <= config.divergence_cap => m = next,
            Ok(next) => return Err(diverged(t, format!("‖M‖_F = {:e} exceeds cap", next.as_matrix().norm()), trace)),
            Err(Error::InvalidMatrix(msg)) => return Err(diverged(t, msg, trace)),
            Err(e) => return Err(e),
        }
    }
    unreachable!("loop returns on its final iteration")
}

fn diverged(step: usize, reason: String, trace: RfmTrace) -> Error {
    Error::Diverged(Box::new(Divergence {
        step,
        reason,
        loss_curve: trace.records.iter().map(|r| r.train_loss).collect(),
        rfm_trace: Some(trace),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{kernel_grad, ScalarFn};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_feature(rng: &mut impl Rng, d: usize) -> FeatureMatrix {
        let b = random_matrix(rng, d, d);
        let m = &b * b.transpose() / d as f64 + DMatrix::identity(d, d) * 0.1;
        FeatureMatrix::new(SymMatrix::from_symmetrized(m).unwrap()).unwrap()
    }

    /// Gaussian elimination with partial pivoting, kept independent of nalgebra's solvers.
    fn gauss_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).collect()).collect();
        let mut b: Vec<Vec<f64>> = (0..n).map(|i| (0..b.ncols()).map(|j| b[(i, j)]).collect()).collect();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in (col + 1)..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                for k in 0..b[row].len() {
                    b[row][k] -= f * b[col][k];
                }
            }
        }
        let c = b[0].len();
        let mut x = vec![vec![0.0; c]; n];
        for row in (0..n).rev() {
            for k in 0..c {
                let mut s = b[row][k];
                for j in (row + 1)..n {
                    s -= a[row][j] * x[j][k];
                }
                x[row][k] = s / a[row][row];
            }
        }
        DMatrix::from_fn(n, c, |i, j| x[i][j])
    }

    #[test]
    fn solve_krr_examples() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 3.0, 0.5]);
        let s = solve_krr(&DMatrix::identity(2, 2), &y, 0.0).unwrap();
        assert_abs_diff_eq!(s.alpha, y, epsilon = 1e-15);
        let s = solve_krr(&DMatrix::identity(2, 2), &y, 1.0).unwrap();
        assert_abs_diff_eq!(s.alpha, &y / 3.0, epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = random_matrix(&mut rng, 5, 5);
        let k = &b * b.transpose();
        let y = random_matrix(&mut rng, 5, 2);
        let s = solve_krr(&k, &y, 1e-3).unwrap();
        let mut sys = k.clone();
        for i in 0..5 {
            sys[(i, i)] += 5.0 * 1e-3;
        }
        let oracle = gauss_solve(&sys, &y);
        assert!((s.alpha - oracle).amax() <= 1e-10);
        assert!(s.fit_residual <= 1e-8);
    }

    #[test]
    fn solve_krr_singular_at_zero_ridge() {
        let k = DMatrix::from_element(3, 3, 1.0);
        let y = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert!(matches!(solve_krr(&k, &y, 0.0), Err(Error::SingularKernel)));
    }

    #[test]
    fn predict_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_matrix(&mut rng, 1, 3);
        let q = random_matrix(&mut rng, 4, 3);
        let alpha = DMatrix::from_element(1, 1, 2.5);
        let spec = KernelSpec::inner_product(ScalarFn::Identity);
        let p = predict(&spec, &FeatureMatrix::identity(3), &x, &alpha, &q).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(p[(i, 0)], q.row(i).dot(&x.row(0)) * 2.5, epsilon = 1e-14);
        }

        let spec = KernelSpec::laplace(1.3);
        let m = random_feature(&mut rng, 3);
        let x = random_matrix(&mut rng, 6, 3);
        let alpha = random_matrix(&mut rng, 6, 2);
        let q = random_matrix(&mut rng, 3, 3);
        let p = predict(&spec, &m, &x, &alpha, &q).unwrap();
        for i in 0..3 {
            for ch in 0..2 {
                let mut s = 0.0;
                for j in 0..6 {
                    s += kernels::kernel_value(&spec, &m, &q.row(i).transpose(), &x.row(j).transpose()).unwrap()
                        * alpha[(j, ch)];
                }
                assert_abs_diff_eq!(p[(i, ch)], s, epsilon = 1e-12);
            }
        }
        assert!(predict(&spec, &m, &x, &DMatrix::zeros(5, 1), &q).is_err());
    }

    #[test]
    fn zero_alpha_gives_zero_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_matrix(&mut rng, 8, 3);
        let alpha = DMatrix::zeros(8, 2);
        let m = FeatureMatrix::identity(3);
        let spec = KernelSpec::gaussian(1.0);
        assert_eq!(compute_agop(&spec, &m, &x, &alpha, &x).unwrap().into_inner(), DMatrix::zeros(3, 3));
        assert_eq!(compute_fact(&spec, &m, &x, &alpha, 0.1).unwrap(), DMatrix::zeros(3, 3));
        assert!(matches!(compute_fact(&spec, &m, &x, &alpha, 0.0), Err(Error::FactUndefined)));
    }

    /// AGOP by an explicit loop over `kernel_grad`.
    fn agop_loop(spec: &KernelSpec, m: &FeatureMatrix, x: &DMatrix<f64>, alpha: &DMatrix<f64>, ev: &DMatrix<f64>) -> DMatrix<f64> {
        let d = x.ncols();
        let mut out = DMatrix::zeros(d, d);
        for i in 0..ev.nrows() {
            let zi = ev.row(i).transpose();
            let mut g = DMatrix::zeros(d, alpha.ncols());
            for j in 0..x.nrows() {
                let gk = kernel_grad(spec, m, &zi, &x.row(j).transpose()).unwrap();
                g += &gk * alpha.row(j);
            }
            out += &g * g.transpose();
        }
        out / ev.nrows() as f64
    }

    #[test]
    fn agop_routes_agree_with_kernel_grad_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let specs = [
            KernelSpec::gaussian(1.1),
            KernelSpec::laplace(1.4),
            KernelSpec::inner_product(ScalarFn::Exp),
            KernelSpec::inner_product(ScalarFn::Square),
        ];
        // (n, d, c): d*c <= n takes the stacked-gradient route, otherwise the Gram route.
        for &(n, d, c) in &[(12, 3, 2), (5, 4, 3)] {
            for spec in &specs {
                let m = random_feature(&mut rng, d);
                let x = random_matrix(&mut rng, n, d);
                let ev = random_matrix(&mut rng, 7, d);
                let alpha = random_matrix(&mut rng, n, c);
                for eval in [&x, &ev] {
                    let fast = compute_agop(spec, &m, &x, &alpha, eval).unwrap();
                    let slow = agop_loop(spec, &m, &x, &alpha, eval);
                    let err = (fast.as_matrix() - &slow).norm() / slow.norm();
                    assert!(err < 1e-12, "{spec:?} n={n}: {err}");
                }
            }
        }
    }

    #[test]
    fn fact_matches_kernel_grad_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for spec in [KernelSpec::gaussian(0.8), KernelSpec::laplace(1.2), KernelSpec::inner_product(ScalarFn::Exp)] {
            let m = random_feature(&mut rng, 3);
            let x = random_matrix(&mut rng, 9, 3);
            let alpha = random_matrix(&mut rng, 9, 2);
            let fact = compute_fact(&spec, &m, &x, &alpha, 1e-2).unwrap();
            let mut oracle = DMatrix::zeros(3, 3);
            for i in 0..9 {
                for j in 0..9 {
                    let g = kernel_grad(&spec, &m, &x.row(i).transpose(), &x.row(j).transpose()).unwrap();
                    let w = alpha.row(j).dot(&alpha.row(i));
                    oracle += g * x.row(i) * w;
                }
            }
            assert!((&fact - &oracle).norm() <= 1e-12 * oracle.norm());
        }
    }

    #[test]
    fn update_rule_examples() {
        let agop = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let m = update_feature_matrix(UpdateRule::Nfa, &FeatureMatrix::identity(2), &agop, 1.0).unwrap();
        assert_abs_diff_eq!(m.as_matrix(), &agop, epsilon = 1e-12);

        let neg = -DMatrix::<f64>::identity(3, 3);
        let m = update_feature_matrix(UpdateRule::FactPlain, &FeatureMatrix::identity(3), &neg, 0.5).unwrap();
        assert_abs_diff_eq!(m.into_sym().into_inner(), DMatrix::identity(3, 3), epsilon = 1e-12);

        let bad = DMatrix::from_element(2, 2, f64::NAN);
        assert!(matches!(
            update_feature_matrix(UpdateRule::FactGeom, &FeatureMatrix::identity(2), &bad, 0.5),
            Err(Error::InvalidMatrix(_))
        ));
    }

    #[test]
    fn geometric_update_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..10 {
            let m = random_feature(&mut rng, 5);
            let next = update_feature_matrix(UpdateRule::FactGeom, &m, m.as_matrix(), 0.5).unwrap();
            assert!((next.as_matrix() - m.as_matrix()).norm() <= 1e-8 * m.as_matrix().norm());
        }
    }

    #[test]
    fn zero_iterations_is_plain_kernel_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random_matrix(&mut rng, 20, 3);
        let y = random_matrix(&mut rng, 20, 1);
        let spec = KernelSpec::laplace(2.0);
        let fit = rfm_fit(&x, &y, None, &RfmConfig::new(UpdateRule::FactGeom, spec, 0, 1e-3)).unwrap();
        assert_eq!(fit.trace.records.len(), 1);
        assert_eq!(fit.feature_matrix, FeatureMatrix::identity(3));
        let k = kernels::gram(&spec, &FeatureMatrix::identity(3), &x, &x).unwrap();
        let plain = solve_krr(&k, &y, 1e-3).unwrap();
        assert_abs_diff_eq!(fit.dual.alpha, plain.alpha, epsilon = 1e-14);
    }

    #[test]
    fn config_validation() {
        let spec = KernelSpec::gaussian(1.0);
        let mut cfg = RfmConfig::new(UpdateRule::FactGeom, spec, 2, 0.0);
        assert!(cfg.validate().is_err());
        cfg.allow_zero_ridge = true;
        assert!(matches!(cfg.validate(), Err(Error::FactUndefined)));
        cfg.update_rule = UpdateRule::Nfa;
        assert!(cfg.validate().is_ok());
        let json = serde_json::to_string(&RfmConfig::new(UpdateRule::FactGeom, spec, 5, 1e-3)).unwrap();
        assert!(json.contains("\"updateRule\":\"fact-geom\""));
        let back: RfmConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.iterations, 5);
    }

    #[test]
    fn accuracy_rules() {
        let pred = DMatrix::from_column_slice(4, 1, &[0.9, 0.2, 0.6, 0.4]);
        let y = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(classification_accuracy(&pred, &y, 0.5), 0.75);
        let pred = DMatrix::from_row_slice(2, 3, &[0.1, 0.7, 0.2, 0.5, 0.1, 0.4]);
        let y = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(classification_accuracy(&pred, &y, 0.5), 0.5);
    }
}
