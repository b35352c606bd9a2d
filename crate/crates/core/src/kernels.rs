//! Kernels `K_M(x, x′)` parameterised by a p.s.d. feature matrix `M`, their Gram
//! matrices and exact input gradients.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::symlinalg::{self, SymMatrix};

/// Scalar function `k` of an inner-product kernel `k(xᵀMx′)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ScalarFn {
    Exp,
    Square,
    Identity,
}

impl ScalarFn {
    pub fn value(self, t: f64) -> f64 {
        match self {
            ScalarFn::Exp => t.exp(),
            ScalarFn::Square => t * t,
            ScalarFn::Identity => t,
        }
    }

    pub fn derivative(self, t: f64) -> f64 {
        match self {
            ScalarFn::Exp => t.exp(),
            ScalarFn::Square => 2.0 * t,
            ScalarFn::Identity => 1.0,
        }
    }
}

/// Kernel family plus its hyper-parameters.
///
/// JSON form: `{"family": "gaussian", "bandwidth": 5.0}`, `{"family": "laplace", ...}`
/// or `{"family": "innerProduct", "scalarFn": "square"}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "camelCase", deny_unknown_fields)]
pub enum KernelSpec {
    /// `exp(−q/(2L²))` with `q = (x−x′)ᵀM(x−x′)`.
    #[serde(rename = "gaussian")]
    MahalanobisGaussian { bandwidth: f64 },
    /// `exp(−√q/L)`.
    #[serde(rename = "laplace")]
    MahalanobisLaplace { bandwidth: f64 },
    /// `k(xᵀMx′)`.
    #[serde(rename = "innerProduct", rename_all = "camelCase")]
    InnerProduct { scalar_fn: ScalarFn },
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Self {
        KernelSpec::MahalanobisGaussian { bandwidth }
    }

    pub fn laplace(bandwidth: f64) -> Self {
        KernelSpec::MahalanobisLaplace { bandwidth }
    }

    pub fn inner_product(scalar_fn: ScalarFn) -> Self {
        KernelSpec::InnerProduct { scalar_fn }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::MahalanobisGaussian { bandwidth } | KernelSpec::MahalanobisLaplace { bandwidth } => {
                if bandwidth > 0.0 && bandwidth.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig(format!("bandwidth must be positive, got {bandwidth}")))
                }
            }
            KernelSpec::InnerProduct { .. } => Ok(()),
        }
    }

    pub fn is_inner_product(&self) -> bool {
        matches!(self, KernelSpec::InnerProduct { .. })
    }
}

/// Tolerance for accepting a feature matrix as p.s.d.
pub const FEATURE_PSD_TOL: f64 = 1e-8;

/// A symmetric p.s.d. feature matrix `M = WᵀW`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(SymMatrix);

impl FeatureMatrix {
    pub fn new(m: SymMatrix) -> Result<Self> {
        let eig = symlinalg::sym_eig(&m)?;
        symlinalg::check_psd_spectrum(&eig, FEATURE_PSD_TOL)?;
        Ok(FeatureMatrix(m))
    }

    pub fn identity(dim: usize) -> Self {
        FeatureMatrix(SymMatrix::identity(dim))
    }

    pub fn zeros(dim: usize) -> Self {
        FeatureMatrix(SymMatrix::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn as_sym(&self) -> &SymMatrix {
        &self.0
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        self.0.as_matrix()
    }

    pub fn into_sym(self) -> SymMatrix {
        self.0
    }

    /// `M^{1/2}`, i.e. one valid choice of `W` with `WᵀW = M`.
    pub fn sqrt(&self) -> Result<SymMatrix> {
        symlinalg::psd_power(&self.0, 0.5, FEATURE_PSD_TOL)
    }
}

impl Serialize for FeatureMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FeatureMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let sym = SymMatrix::deserialize(deserializer)?;
        FeatureMatrix::new(sym).map_err(serde::de::Error::custom)
    }
}

/// Gram matrix together with the per-pair factor that appears in the input gradient.
///
/// For the distance families `∇ₓK(xᵢ,x′ⱼ) = −grad_weight[i,j] · M(xᵢ − x′ⱼ)`;
/// for inner-product kernels `∇ₓK(xᵢ,x′ⱼ) = grad_weight[i,j] · M x′ⱼ`, i.e.
/// `grad_weight = k′(xᵢᵀMx′ⱼ)`.
#[derive(Debug, Clone)]
pub(crate) struct GramParts {
    pub values: DMatrix<f64>,
    pub grad_weight: DMatrix<f64>,
}

fn check_dims(m: &FeatureMatrix, x: &DMatrix<f64>, xp: &DMatrix<f64>) -> Result<()> {
    let d = m.dim();
    if x.ncols() != d || xp.ncols() != d {
        return Err(Error::ShapeError(format!(
            "inputs have {} and {} columns but M is {d}x{d}",
            x.ncols(),
            xp.ncols()
        )));
    }
    Ok(())
}

/// Mahalanobis squared distances `q[i,j] = (xᵢ−x′ⱼ)ᵀM(xᵢ−x′ⱼ)`, clamped at zero.
pub(crate) fn mahalanobis_sq(m: &DMatrix<f64>, x: &DMatrix<f64>, xp: &DMatrix<f64>) -> DMatrix<f64> {
    let xm = x * m;
    let xpm = xp * m;
    let a: Vec<f64> = (0..x.nrows()).map(|i| xm.row(i).dot(&x.row(i))).collect();
    let b: Vec<f64> = (0..xp.nrows()).map(|j| xpm.row(j).dot(&xp.row(j))).collect();
    let mut q = &xm * xp.transpose();
    for j in 0..xp.nrows() {
        for i in 0..x.nrows() {
            let raw = a[i] + b[j] - 2.0 * q[(i, j)];
            // Cancellation makes the expanded form useless for (near-)coincident
            // points; recompute those directly so identical points give exactly 0.
            q[(i, j)] = if raw <= 1e-9 * (a[i] + b[j]) {
                let diff = x.row(i) - xp.row(j);
                let v = (&diff * m).dot(&diff);
                v.max(0.0)
            } else {
                raw
            };
        }
    }
    q
}

pub(crate) fn gram_parts(
    spec: &KernelSpec,
    m: &FeatureMatrix,
    x: &DMatrix<f64>,
    xp: &DMatrix<f64>,
) -> Result<GramParts> {
    spec.validate()?;
    check_dims(m, x, xp)?;
    let rows = x.nrows();
    let (mut values, mut grad_weight) = match *spec {
        KernelSpec::MahalanobisGaussian { .. } | KernelSpec::MahalanobisLaplace { .. } => {
            let q = mahalanobis_sq(m.as_matrix(), x, xp);
            (q.clone(), q)
        }
        KernelSpec::InnerProduct { .. } => {
            let t = x * m.as_matrix() * xp.transpose();
            (t.clone(), t)
        }
    };
    // Column-major storage: each chunk is one column of the Gram matrix.
    values
        .as_mut_slice()
        .par_chunks_mut(rows.max(1))
        .zip(grad_weight.as_mut_slice().par_chunks_mut(rows.max(1)))
        .for_each(|(vcol, gcol)| {
            for (v, g) in vcol.iter_mut().zip(gcol.iter_mut()) {
                let (kv, gw) = kernel_scalar(spec, *v);
                *v = kv;
                *g = gw;
            }
        });
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow("non-finite kernel value".into()));
    }
    Ok(GramParts { values, grad_weight })
}

/// Kernel value and gradient weight from the pairwise statistic (q or xᵀMx′).
fn kernel_scalar(spec: &KernelSpec, stat: f64) -> (f64, f64) {
    match *spec {
        KernelSpec::MahalanobisGaussian { bandwidth } => {
            let l2 = bandwidth * bandwidth;
            let k = (-stat / (2.0 * l2)).exp();
            (k, k / l2)
        }
        KernelSpec::MahalanobisLaplace { bandwidth } => {
            let r = stat.sqrt();
            let k = (-r / bandwidth).exp();
            let w = if r > 0.0 { k / (bandwidth * r) } else { 0.0 };
            (k, w)
        }
        KernelSpec::InnerProduct { scalar_fn } => (scalar_fn.value(stat), scalar_fn.derivative(stat)),
    }
}

/// `n×m` Gram matrix with entries `K_M(xᵢ, x′ⱼ)`.
pub fn gram(spec: &KernelSpec, m: &FeatureMatrix, x: &DMatrix<f64>, xp: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(gram_parts(spec, m, x, xp)?.values)
}

/// Single kernel evaluation.
pub fn kernel_value(spec: &KernelSpec, m: &FeatureMatrix, x: &DVector<f64>, xj: &DVector<f64>) -> Result<f64> {
    spec.validate()?;
    check_vec_dims(m, x, xj)?;
    let stat = match spec {
        KernelSpec::InnerProduct { .. } => (m.as_matrix() * xj).dot(x),
        _ => {
            let diff = x - xj;
            (m.as_matrix() * &diff).dot(&diff).max(0.0)
        }
    };
    Ok(kernel_scalar(spec, stat).0)
}

fn check_vec_dims(m: &FeatureMatrix, x: &DVector<f64>, xj: &DVector<f64>) -> Result<()> {
    if x.len() != m.dim() || xj.len() != m.dim() {
        return Err(Error::ShapeError(format!(
            "vectors of length {} and {} against a {}x{} feature matrix",
            x.len(),
            xj.len(),
            m.dim(),
            m.dim()
        )));
    }
    Ok(())
}

/// Exact gradient `∂/∂x K_M(x, xⱼ)`.
///
/// The Laplace kernel is not differentiable at `x = xⱼ`; the gradient there is zero.
pub fn kernel_grad(spec: &KernelSpec, m: &FeatureMatrix, x: &DVector<f64>, xj: &DVector<f64>) -> Result<DVector<f64>> {
    spec.validate()?;
    check_vec_dims(m, x, xj)?;
    let mm = m.as_matrix();
    match *spec {
        KernelSpec::InnerProduct { scalar_fn } => {
            let mxj = mm * xj;
            let t = mxj.dot(x);
            Ok(mxj * scalar_fn.derivative(t))
        }
        KernelSpec::MahalanobisGaussian { bandwidth } => {
            let diff = x - xj;
            let mdiff = mm * &diff;
            let q = mdiff.dot(&diff).max(0.0);
            let k = (-q / (2.0 * bandwidth * bandwidth)).exp();
            Ok(mdiff * (-k / (bandwidth * bandwidth)))
        }
        KernelSpec::MahalanobisLaplace { bandwidth } => {
            let diff = x - xj;
            let mdiff = mm * &diff;
            let q = mdiff.dot(&diff).max(0.0);
            if q == 0.0 {
                return Ok(DVector::zeros(x.len()));
            }
            let r = q.sqrt();
            let k = (-r / bandwidth).exp();
            Ok(mdiff * (-k / (bandwidth * r)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
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

    fn all_specs() -> Vec<KernelSpec> {
        vec![
            KernelSpec::gaussian(1.3),
            KernelSpec::laplace(0.9),
            KernelSpec::inner_product(ScalarFn::Exp),
            KernelSpec::inner_product(ScalarFn::Square),
            KernelSpec::inner_product(ScalarFn::Identity),
        ]
    }

    #[test]
    fn gaussian_diagonal_is_one_and_zero_metric_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 6, 3);
        let k = gram(&KernelSpec::gaussian(2.0), &FeatureMatrix::identity(3), &x, &x).unwrap();
        for i in 0..6 {
            assert_eq!(k[(i, i)], 1.0);
        }
        let y = random_matrix(&mut rng, 4, 3);
        let k = gram(&KernelSpec::gaussian(2.0), &FeatureMatrix::zeros(3), &x, &y).unwrap();
        assert_eq!(k, DMatrix::from_element(6, 4, 1.0));
    }

    #[test]
    fn identity_inner_product_is_plain_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 5, 3);
        let y = random_matrix(&mut rng, 2, 3);
        let k = gram(&KernelSpec::inner_product(ScalarFn::Identity), &FeatureMatrix::identity(3), &x, &y).unwrap();
        assert_abs_diff_eq!(k, &x * y.transpose(), epsilon = 1e-14);
    }

    #[test]
    fn gram_rejects_shape_mismatch_and_bad_bandwidth() {
        let x = DMatrix::zeros(2, 3);
        let y = DMatrix::zeros(2, 4);
        let m = FeatureMatrix::identity(3);
        assert!(matches!(gram(&KernelSpec::gaussian(1.0), &m, &x, &y), Err(Error::ShapeError(_))));
        assert!(matches!(gram(&KernelSpec::gaussian(0.0), &m, &x, &x), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn grad_examples() {
        let m = FeatureMatrix::identity(3);
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let xj = DVector::from_vec(vec![1.0, 0.5, -0.25]);
        let g = kernel_grad(&KernelSpec::inner_product(ScalarFn::Identity), &m, &x, &xj).unwrap();
        assert_abs_diff_eq!(g, xj, epsilon = 1e-15);
        let g = kernel_grad(&KernelSpec::laplace(1.0), &m, &x, &x).unwrap();
        assert_eq!(g, DVector::zeros(3));
    }

    fn fd_grad(spec: &KernelSpec, m: &FeatureMatrix, x: &DVector<f64>, xj: &DVector<f64>, h: f64) -> DVector<f64> {
        DVector::from_fn(x.len(), |k, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            (kernel_value(spec, m, &xp, xj).unwrap() - kernel_value(spec, m, &xm, xj).unwrap()) / (2.0 * h)
        })
    }

    #[test]
    fn gaussian_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = KernelSpec::gaussian(1.5);
        for _ in 0..20 {
            let m = random_feature(&mut rng, 3);
            let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let xj = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let g = kernel_grad(&spec, &m, &x, &xj).unwrap();
            let fd = fd_grad(&spec, &m, &x, &xj, 1e-5);
            assert!((&g - &fd).norm() <= 1e-5 * g.norm().max(1e-12));
        }
    }

    #[test]
    fn kernel_spec_json() {
        let s = serde_json::to_string(&KernelSpec::gaussian(5.0)).unwrap();
        assert_eq!(s, r#"{"family":"gaussian","bandwidth":5.0}"#);
        let s = serde_json::to_string(&KernelSpec::inner_product(ScalarFn::Exp)).unwrap();
        assert_eq!(s, r#"{"family":"innerProduct","scalarFn":"exp"}"#);
        let back: KernelSpec = serde_json::from_str(r#"{"family":"laplace","bandwidth":2}"#).unwrap();
        assert_eq!(back, KernelSpec::laplace(2.0));
        assert!(serde_json::from_str::<KernelSpec>(r#"{"family":"laplace"}"#).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn gram_is_symmetric_psd(seed in any::<u64>(), which in 0usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = all_specs()[which];
            let m = random_feature(&mut rng, 4);
            let x = random_matrix(&mut rng, 50, 4) * 0.5;
            let k = gram(&spec, &m, &x, &x).unwrap();
            let sym = SymMatrix::new(k).unwrap();
            let e = symlinalg::sym_eig(&sym).unwrap();
            prop_assert!(e.min_eigenvalue() >= -1e-6 * e.max_eigenvalue());
        }

        #[test]
        fn grad_matches_finite_differences(seed in any::<u64>(), which in 0usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = all_specs()[which];
            let m = random_feature(&mut rng, 3);
            let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let xj = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let g = kernel_grad(&spec, &m, &x, &xj).unwrap();
            let fd = fd_grad(&spec, &m, &x, &xj, 1e-5);
            prop_assert!((&g - &fd).norm() <= 1e-5 * g.norm().max(1e-8), "{g} vs {fd}");
        }

        #[test]
        fn metric_equals_transformed_inputs(seed in any::<u64>(), laplace in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = if laplace { KernelSpec::laplace(0.7) } else { KernelSpec::gaussian(0.7) };
            let m = random_feature(&mut rng, 4);
            let root = m.sqrt().unwrap();
            let x = random_matrix(&mut rng, 7, 4);
            let y = random_matrix(&mut rng, 5, 4);
            let k_m = gram(&spec, &m, &x, &y).unwrap();
            let xr = &x * root.as_matrix().transpose();
            let yr = &y * root.as_matrix().transpose();
            let k_i = gram(&spec, &FeatureMatrix::identity(4), &xr, &yr).unwrap();
            prop_assert!((k_m - k_i).amax() <= 1e-10);
        }
    }
}
