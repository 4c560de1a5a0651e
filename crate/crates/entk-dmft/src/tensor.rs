//! Dense two-time tensors `X_{μν}(t, s)` on a `P × T` grid.
//!
//! Storage is a single `(P·T) × (P·T)` matrix with time-major flat index
//! `k·P + μ`, so that a causal time block `[0, k)` is a contiguous leading
//! range of rows or columns. The public accessors and the JSON export use
//! the `(μ, t, ν, s)` order.

use nalgebra::DMatrix;
use serde::ser::{Serialize, SerializeStruct, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TwoTime {
    p: usize,
    t: usize,
    data: DMatrix<f64>,
}

impl TwoTime {
    pub fn zeros(p: usize, t: usize) -> Self {
        TwoTime {
            p,
            t,
            data: DMatrix::zeros(p * t, p * t),
        }
    }

    pub fn ones(p: usize, t: usize) -> Self {
        TwoTime {
            p,
            t,
            data: DMatrix::from_element(p * t, p * t, 1.0),
        }
    }

    /// Time-constant tensor `X(t, s) = base` for all `t, s`.
    pub fn tiled(base: &DMatrix<f64>, t: usize) -> Self {
        let p = base.nrows();
        assert_eq!(base.ncols(), p, "tiled: base must be square");
        let n = p * t;
        let data = DMatrix::from_fn(n, n, |i, j| base[(i % p, j % p)]);
        TwoTime { p, t, data }
    }

    pub fn from_flat(p: usize, t: usize, data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() != p * t || data.ncols() != p * t {
            return Err(Error::Shape(format!(
                "flat matrix is {}x{}, expected {}x{}",
                data.nrows(),
                data.ncols(),
                p * t,
                p * t
            )));
        }
        Ok(TwoTime { p, t, data })
    }

    #[inline]
    pub fn samples(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.t
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.p * self.t
    }

    #[inline]
    pub fn flat(&self) -> &DMatrix<f64> {
        &self.data
    }

    #[inline]
    pub fn flat_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.data
    }

    pub fn into_flat(self) -> DMatrix<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, mu: usize, t: usize, nu: usize, s: usize) -> f64 {
        self.data[(t * self.p + mu, s * self.p + nu)]
    }

    #[inline]
    pub fn set(&mut self, mu: usize, t: usize, nu: usize, s: usize, v: f64) {
        self.data[(t * self.p + mu, s * self.p + nu)] = v;
    }

    /// `P × P` block `X(t, s)`.
    pub fn block(&self, t: usize, s: usize) -> DMatrix<f64> {
        self.data
            .view((t * self.p, s * self.p), (self.p, self.p))
            .into_owned()
    }

    pub fn equal_time(&self, t: usize) -> DMatrix<f64> {
        self.block(t, t)
    }

    /// Zero every entry with `s ≥ t`.
    pub fn make_causal(&mut self) {
        let p = self.p;
        for k in 0..self.t {
            for j in k..self.t {
                self.data
                    .view_mut((k * p, j * p), (p, p))
                    .fill(0.0);
            }
        }
    }

    pub fn is_causal(&self) -> bool {
        let p = self.p;
        (0..self.t).all(|k| {
            (k..self.t).all(|j| self.data.view((k * p, j * p), (p, p)).iter().all(|&x| x == 0.0))
        })
    }

    /// Largest `|X_{μν}(t,s) − X_{νμ}(s,t)|`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        for j in 0..n {
            for i in j + 1..n {
                worst = worst.max((self.data[(i, j)] - self.data[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn frobenius(&self) -> f64 {
        self.data.norm()
    }

    /// `‖self − prev‖_F / max(‖self‖_F, tiny)`.
    pub fn relative_change(&self, prev: &TwoTime) -> f64 {
        let diff = (&self.data - &prev.data).norm();
        let scale = self.data.norm().max(prev.data.norm());
        if scale < 1e-300 {
            0.0
        } else {
            diff / scale
        }
    }

    pub fn hadamard(&self, other: &TwoTime) -> Result<TwoTime> {
        self.check_same(other)?;
        Ok(TwoTime {
            p: self.p,
            t: self.t,
            data: self.data.component_mul(&other.data),
        })
    }

    pub fn check_same(&self, other: &TwoTime) -> Result<()> {
        if self.p != other.p || self.t != other.t {
            return Err(Error::Shape(format!(
                "two-time grids differ: ({}, {}) vs ({}, {})",
                self.p, self.t, other.p, other.t
            )));
        }
        Ok(())
    }

    /// `(1 − β)·self + β·new`, in place.
    pub fn damp_toward(&mut self, new: &TwoTime, beta: f64) {
        self.data
            .zip_apply(&new.data, |a, b| *a = (1.0 - beta) * *a + beta * b);
    }

    /// Nested `[μ][t][ν][s]` arrays.
    pub fn to_nested(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        (0..self.p)
            .map(|mu| {
                (0..self.t)
                    .map(|t| {
                        (0..self.p)
                            .map(|nu| (0..self.t).map(|s| self.get(mu, t, nu, s)).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }
}

impl Serialize for TwoTime {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = serializer.serialize_struct("TwoTime", 2)?;
        st.serialize_field("shape", &[self.p, self.t, self.p, self.t])?;
        st.serialize_field("data", &self.to_nested())?;
        st.end()
    }
}

/// Matrix with explicit shape header, for JSON export of `P × P` kernels.
pub fn matrix_json(m: &DMatrix<f64>) -> serde_json::Value {
    let rows: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect();
    serde_json::json!({ "shape": [m.nrows(), m.ncols()], "data": rows })
}
