//! Loop-based reference computations shared by the integration tests.
#![allow(dead_code)]

use factrfm::kernels::{gram, kernel_grad, FeatureMatrix, KernelSpec, ScalarFn};
use factrfm::symlinalg::SymMatrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `AAᵀ/d + 0.1·I`, a well-conditioned p.s.d. matrix.
pub fn random_psd(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
    let a = gaussian_matrix(rng, d, d, 1.0);
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.1
}

pub fn feature(m: DMatrix<f64>) -> FeatureMatrix {
    FeatureMatrix::new(SymMatrix::new(m).unwrap()).unwrap()
}

pub fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn row(x: &DMatrix<f64>, i: usize) -> DVector<f64> {
    x.row(i).transpose()
}

/// A random kernel-regression instance: inputs, targets and a metric.
pub struct Instance {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub m: FeatureMatrix,
    pub ridge: f64,
}

pub fn instance(seed: u64, n: usize, d: usize, c: usize) -> Instance {
    let mut r = rng(seed);
    let x = gaussian_matrix(&mut r, n, d, 1.0 / (d as f64).sqrt());
    let y = gaussian_matrix(&mut r, n, c, 1.0);
    let m = feature(random_psd(&mut r, d));
    let ridge = 10f64.powf(r.random_range(-3.0..-1.0));
    Instance { x, y, m, ridge }
}

/// `α` by dense Gaussian elimination with partial pivoting on `(K + nλI)α = Y`.
pub fn alpha_by_elimination(k: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let n = k.nrows();
    let mut a = k + DMatrix::identity(n, n) * (n as f64 * ridge);
    let mut b = y.clone();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs())).unwrap();
        a.swap_rows(col, piv);
        b.swap_rows(col, piv);
        for r in col + 1..n {
            let f = a[(r, col)] / a[(col, col)];
            for c in col..n {
                a[(r, c)] -= f * a[(col, c)];
            }
            for c in 0..b.ncols() {
                b[(r, c)] -= f * b[(col, c)];
            }
        }
    }
    let mut out = DMatrix::zeros(n, b.ncols());
    for r in (0..n).rev() {
        for c in 0..b.ncols() {
            let mut s = b[(r, c)];
            for k in r + 1..n {
                s -= a[(r, k)] * out[(k, c)];
            }
            out[(r, c)] = s / a[(r, r)];
        }
    }
    out
}

/// Solves `A X = B` by elimination.
pub fn solve_dense(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    alpha_by_elimination(a, b, 0.0)
}

/// Stationary point of `(1/n)Σ½‖Wx − y‖² + (λ/2)‖W‖²`: `Wᵀ = (XᵀX + nλI)⁻¹XᵀY`.
pub fn ridge_optimum(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let a = x.transpose() * x + DMatrix::identity(d, d) * (n as f64 * lambda);
    solve_dense(&a, &(x.transpose() * y)).transpose()
}

/// `Σᵢⱼ k′(xᵢᵀMxⱼ)·M xᵢ (αᵢ·αⱼ) xⱼᵀ Mᵀ`.
pub fn fact_m_double_sum(f: ScalarFn, m: &DMatrix<f64>, x: &DMatrix<f64>, alpha: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let mut out = DMatrix::zeros(d, d);
    for i in 0..n {
        let mxi = m * row(x, i);
        for j in 0..n {
            let xj = row(x, j);
            let w = f.derivative(row(x, i).dot(&(m * &xj))) * alpha.row(i).dot(&alpha.row(j));
            out += &mxi * (m * xj).transpose() * w;
        }
    }
    out
}

/// `−(1/nλ) Σᵢ ∇ₓℓᵢ xᵢᵀ` with `∇ₓℓᵢ = Σⱼ ∇ₓK(xᵢ, xⱼ) αⱼᵀ (f̂ᵢ − yᵢ)`, residuals from the fitted predictor.
pub fn fact_gradient_route(spec: &KernelSpec, m: &FeatureMatrix, x: &DMatrix<f64>, y: &DMatrix<f64>, alpha: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let k = gram(spec, m, x, x).unwrap();
    let residual = &k * alpha - y;
    let mut out = DMatrix::zeros(d, d);
    for i in 0..n {
        let xi = row(x, i);
        let mut grad = DVector::zeros(d);
        for j in 0..n {
            let g = kernel_grad(spec, m, &xi, &row(x, j)).unwrap();
            grad += g * alpha.row(j).dot(&residual.row(i));
        }
        out += grad * xi.transpose();
    }
    out * (-1.0 / (n as f64 * ridge))
}

/// `Σᵢⱼ τ(xᵢ,M,xⱼ)·M xᵢ (αᵢ·αⱼ) xⱼᵀ M` with `τᵢⱼ = (1/n)Σₗ k′(xₗᵀMxᵢ)k′(xₗᵀMxⱼ)`.
pub fn agop_tau_double_sum(f: ScalarFn, m: &DMatrix<f64>, x: &DMatrix<f64>, alpha: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let kp = DMatrix::from_fn(n, n, |l, i| f.derivative(row(x, l).dot(&(m * row(x, i)))));
    let mut out = DMatrix::zeros(d, d);
    for i in 0..n {
        for j in 0..n {
            let tau: f64 = (0..n).map(|l| kp[(l, i)] * kp[(l, j)]).sum::<f64>() / n as f64;
            let w = tau * alpha.row(i).dot(&alpha.row(j));
            out += (m * row(x, i)) * (m * row(x, j)).transpose() * w;
        }
    }
    out
}

/// `(1/n) Σₗ ∇f̂(xₗ)∇f̂(xₗ)ᵀ` with `∇f̂(xₗ) = Σⱼ ∇ₓK(xₗ, xⱼ) αⱼᵀ`.
pub fn agop_gradient_route(spec: &KernelSpec, m: &FeatureMatrix, x: &DMatrix<f64>, alpha: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let mut out = DMatrix::zeros(d, d);
    for l in 0..n {
        let xl = row(x, l);
        let mut jac = DMatrix::zeros(d, alpha.ncols());
        for j in 0..n {
            jac += kernel_grad(spec, m, &xl, &row(x, j)).unwrap() * alpha.row(j);
        }
        out += &jac * jac.transpose();
    }
    out / n as f64
}

/// Symmetric matrix functions through a Jacobi eigen-solver.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off < 1e-30 * a.norm_squared().max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    (a.diagonal(), v)
}

pub fn jacobi_power(a: &DMatrix<f64>, p: f64) -> DMatrix<f64> {
    let (vals, vecs) = jacobi_eigen(a);
    let d = DMatrix::from_diagonal(&vals.map(|l| l.max(0.0).powf(p)));
    &vecs * d * vecs.transpose()
}

pub fn cosine(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b) / (a.norm() * b.norm())
}

pub fn pearson(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// `(BBᵀ)^{1/2}` through the independent eigen-solver.
pub fn sym_sqrt_of(b: &DMatrix<f64>) -> DMatrix<f64> {
    jacobi_power(&(b * b.transpose()), 0.5)
}

/// One PASS/FAIL line in the acceptance log.
pub fn report(id: &str, pass: bool, detail: &str) -> bool {
    println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}
