//! Small dense linear-algebra helpers: PSD factorizations, quadrature rules
//! and least-squares line fits.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// How a PSD factor was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorMethod {
    Cholesky { jitter_level: u8 },
    EigenClip,
}

/// Returns `F` with `F Fᵀ ≈ cov`. Tries Cholesky with jitter `j`, `10j`,
/// `100j` (relative to the mean diagonal), then clips negative eigenvalues.
pub fn psd_factor(cov: &DMatrix<f64>, jitter: f64, layer: usize) -> Result<(DMatrix<f64>, FactorMethod)> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::Shape("covariance must be square".into()));
    }
    if cov.iter().any(|x| !x.is_finite()) {
        return Err(Error::Factorization {
            layer,
            msg: "covariance has non-finite entries".into(),
        });
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let scale = (sym.trace() / n.max(1) as f64).abs().max(1e-300);
    for (level, mult) in [1.0, 10.0, 100.0].into_iter().enumerate() {
        let mut m = sym.clone();
        for i in 0..n {
            m[(i, i)] += jitter * mult * scale;
        }
        if let Some(ch) = m.cholesky() {
            return Ok((ch.l(), FactorMethod::Cholesky { jitter_level: level as u8 }));
        }
    }
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.amax();
    let lmin = eig.eigenvalues.min();
    if !lmin.is_finite() || lmin < -1e-6 * lmax.max(1.0) {
        return Err(Error::Factorization {
            layer,
            msg: format!("covariance indefinite: min eigenvalue {lmin:.3e}, max {lmax:.3e}"),
        });
    }
    let mut f = eig.eigenvectors;
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    Ok((f, FactorMethod::EigenClip))
}

/// Greedy pivoted Cholesky: `F` (`n × r`) with `F Fᵀ ≈ cov`, stopping once
/// the largest remaining diagonal drops below `rel_tol · max diag`.
pub fn pivoted_cholesky(cov: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = cov.nrows();
    let mut diag: Vec<f64> = (0..n).map(|i| cov[(i, i)]).collect();
    let top = diag.iter().cloned().fold(0.0, f64::max);
    let mut cols: Vec<DVector<f64>> = Vec::new();
    if top <= 0.0 {
        return DMatrix::zeros(n, 0);
    }
    let stop = rel_tol * top;
    while cols.len() < n {
        let (piv, &dmax) = diag
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        if dmax <= stop {
            break;
        }
        let mut col = cov.column(piv).into_owned();
        for c in &cols {
            col.axpy(-c[piv], c, 1.0);
        }
        col /= dmax.sqrt();
        for i in 0..n {
            diag[i] -= col[i] * col[i];
        }
        diag[piv] = 0.0;
        cols.push(col);
    }
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

pub fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    let s = (sym + sym.transpose()) * 0.5;
    SymmetricEigen::new(s).eigenvalues.min()
}

/// Nodes and weights for `∫ f(x) e^{-x²/2} dx / √(2π)` (probabilists'
/// Gauss-Hermite), via the Golub-Welsch eigenproblem.
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    let jac = DMatrix::from_fn(order, order, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    golub_welsch(jac, 1.0)
}

/// Nodes and weights for `∫_{-1}^{1} f(x) dx` (Gauss-Legendre).
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let jac = DMatrix::from_fn(order, order, |i, j| {
        if i + 1 == j || j + 1 == i {
            let k = i.max(j) as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        } else {
            0.0
        }
    });
    golub_welsch(jac, 2.0)
}

fn golub_welsch(jacobi: DMatrix<f64>, mass: f64) -> (Vec<f64>, Vec<f64>) {
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(j, &x)| (x, mass * eig.eigenvectors[(0, j)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return Err(Error::Domain("line fit needs >= 2 paired points".into()));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("line fit needs distinct abscissae".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = if n > 2 {
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| (b - intercept - slope * a).powi(2))
            .sum();
        (rss / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit {
        slope,
        intercept,
        slope_stderr,
    })
}

/// Log-log OLS fit; all values must be positive.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Domain("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    ols(&lx, &ly)
}

/// `a·b` computed over fixed row blocks of `a` in parallel. The block
/// layout does not depend on the thread count, so results are reproducible.
pub fn par_mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    const BLOCK: usize = 64;
    let n = a.nrows();
    if n <= BLOCK {
        return a * b;
    }
    let parts: Vec<DMatrix<f64>> = (0..n)
        .step_by(BLOCK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|i0| a.rows(i0, BLOCK.min(n - i0)) * b)
        .collect();
    let mut out = DMatrix::zeros(n, b.ncols());
    let mut i0 = 0;
    for part in parts {
        out.rows_mut(i0, part.nrows()).copy_from(&part);
        i0 += part.nrows();
    }
    out
}
