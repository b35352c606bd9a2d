//! Dense symmetric matrix functions and matrix-comparison metrics.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`. [`SymMatrix`] is a thin
//! newtype that guarantees symmetry so that eigen-based matrix functions are
//! well defined.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Relative tolerance used when validating symmetry on construction.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Default relative tolerance below which negative eigenvalues are treated as round-off.
pub const DEFAULT_CLAMP_TOL: f64 = 1e-8;

const EIG_EPS: f64 = 1e-15;
const EIG_MAX_ITER: usize = 10_000;

/// A square symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps `m`, checking that it is square, finite and symmetric.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_finite(&m)?;
        if !m.is_square() {
            return Err(Error::ShapeError(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidMatrix("empty matrix".into()));
        }
        let scale = max_abs(&m).max(1.0);
        let n = m.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidMatrix(format!(
                        "not symmetric at ({i},{j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        Ok(SymMatrix(m))
    }

    /// Builds `(m + mᵀ)/2`. Used for products that are symmetric in exact arithmetic.
    pub fn from_symmetrized(m: DMatrix<f64>) -> Result<Self> {
        check_finite(&m)?;
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::ShapeError(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let sym = (&m + m.transpose()) * 0.5;
        Ok(SymMatrix(sym))
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }
}

impl AsRef<DMatrix<f64>> for SymMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

#[derive(Serialize, Deserialize)]
struct SymMatrixRepr {
    dim: usize,
    entries: Vec<Vec<f64>>,
}

impl Serialize for SymMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        SymMatrixRepr {
            dim: self.dim(),
            entries: rows_of(&self.0),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SymMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = SymMatrixRepr::deserialize(deserializer)?;
        if repr.entries.len() != repr.dim || repr.entries.iter().any(|r| r.len() != repr.dim) {
            return Err(serde::de::Error::custom("entries do not match dim"));
        }
        let m = DMatrix::from_fn(repr.dim, repr.dim, |i, j| repr.entries[i][j]);
        SymMatrix::new(m).map_err(serde::de::Error::custom)
    }
}

/// Eigen-decomposition `A = V Λ Vᵀ` with eigenvalues sorted in descending order.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl EigenDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.reconstruct_with(|l| l)
    }

    /// `V f(Λ) Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        let mut scaled = v.clone();
        for (j, &l) in self.eigenvalues.iter().enumerate() {
            let fl = f(l);
            scaled.column_mut(j).scale_mut(fl);
        }
        scaled * v.transpose()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }
}

pub fn sym_eig(a: &SymMatrix) -> Result<EigenDecomposition> {
    check_finite(a.as_matrix())?;
    let eig = SymmetricEigen::try_new(a.as_matrix().clone(), EIG_EPS, EIG_MAX_ITER)
        .ok_or_else(|| Error::InvalidMatrix("symmetric eigensolver did not converge".into()))?;
    let n = a.dim();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// `V max(Λ,0)^p Vᵀ` for a p.s.d. `A`.
///
/// Negative eigenvalues no larger in magnitude than `clamp_tol · λ_max` are clamped
/// to zero; anything more negative yields [`Error::NotPsd`].
pub fn psd_power(a: &SymMatrix, p: f64, clamp_tol: f64) -> Result<SymMatrix> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::InvalidConfig(format!("power must be positive, got {p}")));
    }
    let eig = sym_eig(a)?;
    check_psd_spectrum(&eig, clamp_tol)?;
    let out = eig.reconstruct_with(|l| if l > 0.0 { l.powf(p) } else { 0.0 });
    SymMatrix::from_symmetrized(out)
}

pub(crate) fn check_psd_spectrum(eig: &EigenDecomposition, clamp_tol: f64) -> Result<()> {
    let max_eig = eig.max_eigenvalue();
    let min_eig = eig.min_eigenvalue();
    if min_eig < 0.0 && min_eig < -clamp_tol * max_eig.max(0.0) {
        return Err(Error::NotPsd { min_eig, max_eig });
    }
    Ok(())
}

/// `√(B Bᵀ) = U Σ Uᵀ` where `B = U Σ Vᵀ`.
pub fn symmetrized_sqrt(b: &DMatrix<f64>) -> Result<SymMatrix> {
    check_finite(b)?;
    if !b.is_square() || b.nrows() == 0 {
        return Err(Error::ShapeError(format!(
            "symmetrized_sqrt expects a non-empty square matrix, got {}x{}",
            b.nrows(),
            b.ncols()
        )));
    }
    let svd = SVD::try_new(b.clone(), true, false, EIG_EPS, EIG_MAX_ITER)
        .ok_or_else(|| Error::InvalidMatrix("SVD did not converge".into()))?;
    let u = svd.u.expect("u requested");
    let mut scaled = u.clone();
    for (j, &s) in svd.singular_values.iter().enumerate() {
        scaled.column_mut(j).scale_mut(s);
    }
    SymMatrix::from_symmetrized(scaled * u.transpose())
}

/// Frobenius inner product `⟨A,B⟩ = Σ A_ij B_ij`.
pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x * y).sum())
}

/// `⟨A,B⟩ / (‖A‖_F ‖B‖_F)`.
pub fn cosine_sim(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("zero-norm matrix in cosine similarity".into()));
    }
    let c = frobenius_inner(a, b)? / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

/// Pearson correlation of the flattened entries (diagonal included).
pub fn pearson_corr(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    same_shape(a, b)?;
    if a.len() < 2 {
        return Err(Error::DegenerateInput("need at least two entries".into()));
    }
    let ca = a.add_scalar(-a.mean());
    let cb = b.add_scalar(-b.mean());
    let sa = ca.norm();
    let sb = cb.norm();
    // Entries equal up to round-off of the mean count as constant.
    let tol = 1e-14;
    if sa <= tol * max_abs(a) || sb <= tol * max_abs(b) || sa == 0.0 || sb == 0.0 {
        return Err(Error::DegenerateInput("constant matrix in Pearson correlation".into()));
    }
    let c = frobenius_inner(&ca, &cb)? / (sa * sb);
    Ok(c.clamp(-1.0, 1.0))
}

fn same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeError(format!(
            "{}x{} vs {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidMatrix("non-finite entry".into()))
    }
}

pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Row-major CSV without a header, full `f64` round-trip precision.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::with_capacity(m.len() * 12);
    for row in m.row_iter() {
        let mut first = true;
        for x in row.iter() {
            if !first {
                out.push(',');
            }
            first = false;
            write!(out, "{x:?}").expect("writing to a String cannot fail");
        }
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .enumerate()
            .map(|(col, cell)| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::ParseError(format!("line {}, column {}: {cell:?}", lineno + 1, col + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::ParseError(format!(
                    "line {}: expected {} columns, found {}",
                    lineno + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    std::fs::write(path, matrix_to_csv(m))?;
    Ok(())
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    matrix_from_csv(&std::fs::read_to_string(path)?)
}
