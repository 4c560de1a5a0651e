//! Shared domain types, the eNTK contraction and alignment metrics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::tensor::TwoTime;

/// Training inputs `X` (`P × D`), targets `y` and the input kernel `XXᵀ/D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    targets: DVector<f64>,
    input_kernel: DMatrix<f64>,
    whitened: bool,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, targets: DVector<f64>, whitened: bool) -> Result<Self> {
        let (p, d) = inputs.shape();
        if p == 0 || d == 0 {
            return Err(Error::Shape("dataset needs P >= 1 and D >= 1".into()));
        }
        if targets.len() != p {
            return Err(Error::Shape(format!(
                "{} targets for {} inputs",
                targets.len(),
                p
            )));
        }
        if inputs.iter().chain(targets.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Domain("dataset contains non-finite values".into()));
        }
        let input_kernel = &inputs * inputs.transpose() / d as f64;
        if whitened {
            let dev = (&input_kernel - DMatrix::identity(p, p)).amax();
            if dev > 1e-10 {
                return Err(Error::Domain(format!(
                    "dataset flagged whitened but |K^x - I|_max = {dev:.2e}"
                )));
            }
        }
        Ok(Dataset {
            inputs,
            targets,
            input_kernel,
            whitened,
        })
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }
    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }
    pub fn input_kernel(&self) -> &DMatrix<f64> {
        &self.input_kernel
    }
    pub fn whitened(&self) -> bool {
        self.whitened
    }
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of hidden layers `L`.
    pub depth: usize,
    /// Hidden width `N`.
    #[serde(default = "default_width")]
    pub width: usize,
    pub gamma0: f64,
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

fn default_width() -> usize {
    1000
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::config("network.depth", "must be >= 1"));
        }
        if self.width < 1 {
            return Err(Error::config("network.width", "must be >= 1"));
        }
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            return Err(Error::config("network.gamma0", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Learning rule descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case", deny_unknown_fields)]
pub enum Rule {
    Gd,
    RhoFa { rho: f64 },
    Dfa,
    Gln,
    Hebb,
    NodePerturb { count: usize, scale: f64 },
}

impl Rule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Rule::RhoFa { rho } if !(0.0..=1.0).contains(&rho) => {
                Err(Error::config("rule.rho", "must lie in [0, 1]"))
            }
            Rule::NodePerturb { count, .. } if count < 1 => {
                Err(Error::config("rule.count", "must be >= 1"))
            }
            Rule::NodePerturb { scale, .. } if !(scale > 0.0 && scale.is_finite()) => {
                Err(Error::config("rule.scale", "must be finite and > 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Rule::Gd => "gd",
            Rule::RhoFa { .. } => "rho_fa",
            Rule::Dfa => "dfa",
            Rule::Gln => "gln",
            Rule::Hebb => "hebb",
            Rule::NodePerturb { .. } => "node_perturb",
        }
    }

    /// Human readable label including parameters.
    pub fn label(&self) -> String {
        match self {
            Rule::RhoFa { rho } => format!("rho_fa_{rho}"),
            Rule::NodePerturb { count, scale } => format!("node_perturb_{count}_{scale}"),
            r => r.name().to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    /// Number of grid points; `t_k = k·dt` for `k < steps`.
    pub steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(steps: usize, dt: f64) -> Result<Self> {
        let g = TimeGrid { steps, dt };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("grid.steps", "must be >= 1"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("grid.dt", "must be finite and > 0"));
        }
        Ok(())
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.steps - 1)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.steps).map(|k| self.time(k)).collect()
    }
}

/// Two-time kernels for hidden layers `1..=L` (index `ℓ-1`). The boundaries
/// `Φ⁰ = K^x` (time-constant) and `G^{L+1} = G̃^{L+1} = 1` are implicit.
#[derive(Clone, Debug, Serialize)]
pub struct KernelSet {
    #[serde(skip)]
    pub input_kernel: DMatrix<f64>,
    pub phi: Vec<TwoTime>,
    pub g: Vec<TwoTime>,
    pub gtilde: Vec<TwoTime>,
    pub gtildetilde: Vec<TwoTime>,
}

impl KernelSet {
    pub fn depth(&self) -> usize {
        self.phi.len()
    }

    pub fn check(&self) -> Result<(usize, usize)> {
        let l = self.phi.len();
        if l == 0 || self.g.len() != l || self.gtilde.len() != l || self.gtildetilde.len() != l {
            return Err(Error::Shape(format!(
                "layer counts phi={} g={} gtilde={} gtildetilde={}",
                self.phi.len(),
                self.g.len(),
                self.gtilde.len(),
                self.gtildetilde.len()
            )));
        }
        let first = &self.phi[0];
        for x in self
            .phi
            .iter()
            .chain(&self.g)
            .chain(&self.gtilde)
            .chain(&self.gtildetilde)
        {
            first.check_same(x)?;
        }
        if self.input_kernel.nrows() != first.samples() || self.input_kernel.ncols() != first.samples() {
            return Err(Error::Shape("input kernel does not match sample count".into()));
        }
        Ok((first.samples(), first.steps()))
    }

    /// All tensors in a fixed order, for residual computations.
    pub fn tensors(&self) -> impl Iterator<Item = &TwoTime> {
        self.phi
            .iter()
            .chain(&self.g)
            .chain(&self.gtilde)
            .chain(&self.gtildetilde)
    }

    pub fn max_relative_change(&self, prev: &KernelSet) -> f64 {
        self.tensors()
            .zip(prev.tensors())
            .map(|(a, b)| a.relative_change(b))
            .fold(0.0, f64::max)
    }

    pub fn damp_toward(&mut self, new: &KernelSet, beta: f64) {
        let pairs = self
            .phi
            .iter_mut()
            .zip(&new.phi)
            .chain(self.g.iter_mut().zip(&new.g))
            .chain(self.gtilde.iter_mut().zip(&new.gtilde))
            .chain(self.gtildetilde.iter_mut().zip(&new.gtildetilde));
        for (a, b) in pairs {
            a.damp_toward(b, beta);
        }
    }
}

/// Causal response functions for layers `1..=L` (index `ℓ-1`).
///
/// `b_local` and `d_local` (`P × T`) hold the equal-time parts
/// `⟨∂g^{ℓ+1}_μ(t)/∂u^{ℓ+1}_μ(t)⟩` and `⟨∂g̃^{ℓ+1}_μ(t)/∂u^{ℓ+1}_μ(t)⟩`,
/// which enter the pre-gradient field as `b_local(t)·φ(h(t))` without the
/// `γ₀·dt` weight of the memory sum. They vanish for linear, ReLU and gated
/// networks and keep `B`, `D` strictly causal.
#[derive(Clone, Debug, Serialize)]
pub struct ResponseSet {
    pub a: Vec<TwoTime>,
    pub b: Vec<TwoTime>,
    pub c: Vec<TwoTime>,
    pub d: Vec<TwoTime>,
    #[serde(serialize_with = "ser_matrices")]
    pub b_local: Vec<DMatrix<f64>>,
    #[serde(serialize_with = "ser_matrices")]
    pub d_local: Vec<DMatrix<f64>>,
}

fn ser_matrices<S: serde::Serializer>(m: &[DMatrix<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
    let v: Vec<_> = m.iter().map(crate::tensor::matrix_json).collect();
    v.serialize(s)
}

impl ResponseSet {
    pub fn zeros(depth: usize, p: usize, t: usize) -> Self {
        let z = || vec![TwoTime::zeros(p, t); depth];
        let zl = || vec![DMatrix::zeros(p, t); depth];
        ResponseSet {
            a: z(),
            b: z(),
            c: z(),
            d: z(),
            b_local: zl(),
            d_local: zl(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &TwoTime> {
        self.a.iter().chain(&self.b).chain(&self.c).chain(&self.d)
    }

    pub fn is_causal(&self) -> bool {
        self.tensors().all(TwoTime::is_causal)
    }

    pub fn damp_toward(&mut self, new: &ResponseSet, beta: f64) {
        let pairs = self
            .a
            .iter_mut()
            .zip(&new.a)
            .chain(self.b.iter_mut().zip(&new.b))
            .chain(self.c.iter_mut().zip(&new.c))
            .chain(self.d.iter_mut().zip(&new.d));
        for (x, y) in pairs {
            x.damp_toward(y, beta);
        }
        let locals = self
            .b_local
            .iter_mut()
            .zip(&new.b_local)
            .chain(self.d_local.iter_mut().zip(&new.d_local));
        for (x, y) in locals {
            x.zip_apply(y, |a, b| *a = (1.0 - beta) * *a + beta * b);
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DmftState {
    pub kernels: KernelSet,
    pub responses: ResponseSet,
    /// `P × T` predictions.
    #[serde(serialize_with = "ser_matrix")]
    pub predictions: DMatrix<f64>,
    /// `P × T` errors `y − f`.
    #[serde(serialize_with = "ser_matrix")]
    pub errors: DMatrix<f64>,
    pub entk: TwoTime,
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    crate::tensor::matrix_json(m).serialize(s)
}

impl DmftState {
    /// `½ Σ_μ Δ_μ(t)²` per grid point.
    pub fn loss(&self) -> Vec<f64> {
        (0..self.errors.ncols())
            .map(|k| 0.5 * self.errors.column(k).norm_squared())
            .collect()
    }
}

/// `K = Σ_{ℓ=0}^{L} G̃^{ℓ+1} ⊙ Φ^ℓ` with `Φ⁰ = K^x` and `G̃^{L+1} = 1`.
pub fn entk_contract(kernels: &KernelSet) -> Result<TwoTime> {
    let (p, t) = kernels.check()?;
    let l = kernels.depth();
    let mut k = TwoTime::tiled(&kernels.input_kernel, t).hadamard(&kernels.gtilde[0])?;
    for layer in 1..l {
        let term = kernels.gtilde[layer].flat().component_mul(kernels.phi[layer - 1].flat());
        *k.flat_mut() += term;
    }
    *k.flat_mut() += kernels.phi[l - 1].flat();
    debug_assert_eq!(k.samples(), p);
    Ok(k)
}

/// Equal-time eNTK block at step `k` without forming the full tensor.
pub fn entk_equal_time(kernels: &KernelSet, k: usize) -> DMatrix<f64> {
    let l = kernels.depth();
    let mut out = kernels.gtilde[0].block(k, k).component_mul(&kernels.input_kernel);
    for layer in 1..l {
        out += kernels.gtilde[layer]
            .block(k, k)
            .component_mul(&kernels.phi[layer - 1].block(k, k));
    }
    out += kernels.phi[l - 1].block(k, k);
    out
}

/// Same contraction on `P × P` measured kernels (`phi[ℓ-1]`, `gtilde[ℓ-1]`).
pub fn entk_from_layers(
    input_kernel: &DMatrix<f64>,
    phi: &[DMatrix<f64>],
    gtilde: &[DMatrix<f64>],
) -> Result<DMatrix<f64>> {
    let l = phi.len();
    if l == 0 || gtilde.len() != l {
        return Err(Error::Shape(format!(
            "entk needs matching layer counts, got phi={} gtilde={}",
            phi.len(),
            gtilde.len()
        )));
    }
    let shape = input_kernel.shape();
    if phi.iter().chain(gtilde).any(|m| m.shape() != shape) {
        return Err(Error::Shape("kernel shapes differ".into()));
    }
    let mut out = gtilde[0].component_mul(input_kernel);
    for layer in 1..l {
        out += gtilde[layer].component_mul(&phi[layer - 1]);
    }
    out += &phi[l - 1];
    Ok(out)
}

/// `yᵀKy / (‖K‖_F ‖y‖²)`.
pub fn kernel_task_alignment(k: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    if k.nrows() != y.len() || k.ncols() != y.len() {
        return Err(Error::Shape(format!(
            "kernel {}x{} vs targets {}",
            k.nrows(),
            k.ncols(),
            y.len()
        )));
    }
    let kn = k.norm();
    let yn = y.norm_squared();
    if kn == 0.0 || yn == 0.0 {
        return Err(Error::Domain("alignment undefined for zero-norm input".into()));
    }
    Ok(y.dot(&(k * y)) / (kn * yn))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CorrelationReport {
    /// Mean cosine similarity over the pairs that were used.
    pub mean: f64,
    pub used: usize,
    /// Pairs dropped because one of the vectors had zero norm.
    pub skipped: usize,
}

/// Mean cosine similarity of `g^ℓ_μ` and `g̃^ℓ_μ` over layers and samples.
/// Each layer is an `N × P` matrix with one column per sample.
pub fn grad_pseudograd_correlation(
    g: &[DMatrix<f64>],
    gtilde: &[DMatrix<f64>],
) -> Result<CorrelationReport> {
    if g.len() != gtilde.len() {
        return Err(Error::Shape("layer counts differ".into()));
    }
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for (a, b) in g.iter().zip(gtilde) {
        if a.shape() != b.shape() {
            return Err(Error::Shape("gradient shapes differ".into()));
        }
        for (ca, cb) in a.column_iter().zip(b.column_iter()) {
            let (na, nb) = (ca.norm(), cb.norm());
            if na == 0.0 || nb == 0.0 {
                skipped += 1;
            } else {
                sum += ca.dot(&cb) / (na * nb);
                used += 1;
            }
        }
    }
    let mean = if used > 0 { sum / used as f64 } else { f64::NAN };
    Ok(CorrelationReport { mean, used, skipped })
}
