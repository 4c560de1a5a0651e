//! Static kernels of the small-richness limit: NNGP and gradient
//! recursions, per-rule initial eNTKs, kernel-regression predictions and the
//! two-point angle sweep.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::linalg::{gauss_hermite, gauss_legendre, min_eigenvalue};
use crate::model::{KernelSet, Rule, TimeGrid};
use crate::tensor::TwoTime;

const HERMITE_ORDER: usize = 40;

/// `⟨f(u) g(v)⟩` for `(u, v)` centered Gaussian with variances `q1, q2` and
/// covariance `c12`, on a tensor Gauss-Hermite grid.
pub fn gaussian_pair_expectation(
    q1: f64,
    q2: f64,
    c12: f64,
    f: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
    order: usize,
) -> f64 {
    let (x, w) = gauss_hermite(order);
    let (s1, s2) = (q1.max(0.0).sqrt(), q2.max(0.0).sqrt());
    let corr = if s1 > 0.0 && s2 > 0.0 {
        (c12 / (s1 * s2)).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let perp = (1.0 - corr * corr).max(0.0).sqrt();
    let mut acc = 0.0;
    for (xi, wi) in x.iter().zip(&w) {
        let fu = f(s1 * xi);
        if fu == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for (xj, wj) in x.iter().zip(&w) {
            inner += wj * g(s2 * (corr * xi + perp * xj));
        }
        acc += wi * fu * inner;
    }
    acc
}

/// Closed-form √2-ReLU arccos kernels for one pair: `(Φ, Φ̇)`.
pub fn relu_pair(q1: f64, q2: f64, c12: f64) -> (f64, f64) {
    if q1 <= 0.0 || q2 <= 0.0 {
        return (0.0, 0.0);
    }
    let s = (q1 * q2).sqrt();
    let c = (c12 / s).clamp(-1.0, 1.0);
    let theta = c.acos();
    let phi = s * (theta.sin() + (PI - theta) * c) / PI;
    let dphi = (PI - theta) / PI;
    (phi, dphi)
}

/// Same pair kernels by quadrature split at the ReLU kinks: the outer
/// variable is integrated over `u > 0` and the inner one over `v > 0`, so
/// each panel sees a smooth integrand.
pub fn relu_pair_quadrature(q1: f64, q2: f64, c12: f64) -> (f64, f64) {
    if q1 <= 0.0 || q2 <= 0.0 {
        return (0.0, 0.0);
    }
    const CUT: f64 = 12.0;
    let (xg, wg) = gauss_legendre(96);
    let map = |a: f64, b: f64| {
        let (half, mid) = (0.5 * (b - a), 0.5 * (b + a));
        xg.iter()
            .zip(&wg)
            .map(move |(x, w)| (mid + half * x, half * w))
    };
    let dens = |x: f64| (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    let (s1, s2) = (q1.sqrt(), q2.sqrt());
    let corr = (c12 / (s1 * s2)).clamp(-1.0, 1.0);
    let perp = (1.0 - corr * corr).sqrt();
    let (mut phi, mut dphi) = (0.0, 0.0);
    for (x, wx) in map(0.0, CUT) {
        let (mut ip, mut id) = (0.0, 0.0);
        if perp < 1e-12 {
            if corr > 0.0 {
                ip = corr * x;
                id = 1.0;
            }
        } else {
            let lo = (-corr * x / perp).max(-CUT);
            if lo < CUT {
                for (w, ww) in map(lo, CUT) {
                    let v = corr * x + perp * w;
                    ip += ww * dens(w) * v;
                    id += ww * dens(w);
                }
            }
        }
        phi += wx * dens(x) * x * ip;
        dphi += wx * dens(x) * id;
    }
    (2.0 * s1 * s2 * phi, 2.0 * dphi)
}

fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape("kernel must be square".into()));
    }
    let lmin = min_eigenvalue(m);
    if !(lmin >= -1e-8) {
        return Err(Error::Domain(format!(
            "kernel is not PSD (min eigenvalue {lmin:.3e})"
        )));
    }
    Ok(())
}

/// One NNGP step: `Φ = ⟨φ(u)φ(u)ᵀ⟩`, `Φ̇ = ⟨φ̇(u)φ̇(u)ᵀ⟩` for `u ~ N(0, prev)`.
pub fn nngp_layer(prev: &DMatrix<f64>, act: Activation) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_psd(prev)?;
    let p = prev.nrows();
    match act {
        Activation::Linear => Ok((prev.clone(), DMatrix::from_element(p, p, 1.0))),
        Activation::Relu => Ok(pairwise(prev, |q1, q2, c| relu_pair(q1, q2, c))),
        Activation::Tanh => Ok(pairwise(prev, |q1, q2, c| {
            (
                gaussian_pair_expectation(q1, q2, c, f64::tanh, f64::tanh, HERMITE_ORDER),
                gaussian_pair_expectation(
                    q1,
                    q2,
                    c,
                    |u| act.dphi(u),
                    |v| act.dphi(v),
                    HERMITE_ORDER,
                ),
            )
        })),
    }
}

/// ReLU NNGP step by kink-split quadrature (cross-check path).
pub fn nngp_layer_relu_quadrature(prev: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_psd(prev)?;
    Ok(pairwise(prev, relu_pair_quadrature))
}

fn pairwise(prev: &DMatrix<f64>, f: impl Fn(f64, f64, f64) -> (f64, f64)) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = prev.nrows();
    let mut phi = DMatrix::zeros(p, p);
    let mut dphi = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..=i {
            let (a, b) = f(prev[(i, i)], prev[(j, j)], prev[(i, j)]);
            phi[(i, j)] = a;
            phi[(j, i)] = a;
            dphi[(i, j)] = b;
            dphi[(j, i)] = b;
        }
    }
    (phi, dphi)
}

/// `G^ℓ = G^{ℓ+1} ⊙ Φ̇^ℓ`.
pub fn gradient_layer(next: &DMatrix<f64>, phidot: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if next.shape() != phidot.shape() {
        return Err(Error::Shape(format!(
            "gradient_layer: {:?} vs {:?}",
            next.shape(),
            phidot.shape()
        )));
    }
    Ok(next.component_mul(phidot))
}

/// Static kernels of an MLP at initialization.
#[derive(Clone, Debug, Serialize)]
pub struct LazyKernelStack {
    pub activation: Activation,
    /// `Φ^ℓ` for `ℓ = 0..=L` (`Φ⁰ = K^x`).
    #[serde(skip)]
    pub phi: Vec<DMatrix<f64>>,
    /// `Φ̇^ℓ` for `ℓ = 1..=L` (index `ℓ-1`).
    #[serde(skip)]
    pub phidot: Vec<DMatrix<f64>>,
    /// `G^ℓ` for `ℓ = 1..=L+1` (index `ℓ-1`; last entry all-ones).
    #[serde(skip)]
    pub g: Vec<DMatrix<f64>>,
}

impl LazyKernelStack {
    pub fn depth(&self) -> usize {
        self.phidot.len()
    }

    /// `Φ^L`.
    pub fn nngp(&self) -> &DMatrix<f64> {
        self.phi.last().unwrap()
    }

    /// `⟨φ̇(m)φ̇(m)ᵀ⟩` for gates `m ~ N(0, K^x)`; equals `Φ̇¹`.
    pub fn gate_kernel(&self) -> &DMatrix<f64> {
        &self.phidot[0]
    }
}

pub fn lazy_stack(input_kernel: &DMatrix<f64>, depth: usize, act: Activation) -> Result<LazyKernelStack> {
    if depth < 1 {
        return Err(Error::Domain("depth must be >= 1".into()));
    }
    let p = input_kernel.nrows();
    let mut phi = vec![input_kernel.clone()];
    let mut phidot = Vec::with_capacity(depth);
    for l in 0..depth {
        let (a, b) = nngp_layer(&phi[l], act)?;
        phi.push(a);
        phidot.push(b);
    }
    let mut g = vec![DMatrix::from_element(p, p, 1.0); depth + 1];
    for l in (0..depth).rev() {
        g[l] = gradient_layer(&g[l + 1], &phidot[l])?;
    }
    Ok(LazyKernelStack {
        activation: act,
        phi,
        phidot,
        g,
    })
}

/// Initial eNTK per rule.
pub fn lazy_entk(rule: &Rule, stack: &LazyKernelStack) -> Result<DMatrix<f64>> {
    rule.validate()?;
    let l = stack.depth();
    let term = |layer: usize| stack.g[layer].component_mul(&stack.phi[layer]);
    match *rule {
        Rule::Gd => Ok((0..=l).map(term).fold(DMatrix::zeros(stack.phi[0].nrows(), stack.phi[0].ncols()), |a, b| a + b)),
        Rule::RhoFa { rho } => Ok((0..=l)
            .map(|layer| term(layer) * rho.powi((l - layer) as i32))
            .fold(DMatrix::zeros(stack.phi[0].nrows(), stack.phi[0].ncols()), |a, b| a + b)),
        Rule::Dfa | Rule::Hebb => Ok(stack.nngp().clone()),
        Rule::Gln => {
            // every layer contributes Ġ^{∘L} ⊙ K^x
            let gate = stack.gate_kernel();
            let mut pow = DMatrix::from_element(gate.nrows(), gate.ncols(), 1.0);
            for _ in 0..l {
                pow.component_mul_assign(gate);
            }
            Ok(pow.component_mul(&stack.phi[0]) * (l + 1) as f64)
        }
        Rule::NodePerturb { .. } => Err(Error::Domain(
            "node perturbation has no infinite-width kernel".into(),
        )),
    }
}

/// Feature and gradient kernels at initialization for a rule, as
/// `(Φ^ℓ, G^ℓ, G̃^ℓ, G̃̃^ℓ)` for `ℓ = 1..=L`.
pub fn lazy_layer_kernels(
    input_kernel: &DMatrix<f64>,
    depth: usize,
    act: Activation,
    rule: &Rule,
) -> Result<Vec<[DMatrix<f64>; 4]>> {
    rule.validate()?;
    let p = input_kernel.nrows();
    let zeros = DMatrix::zeros(p, p);
    let stack = lazy_stack(input_kernel, depth, act)?;
    if let Rule::Gln = rule {
        let gate = stack.gate_kernel().clone();
        let mut phi = vec![input_kernel.clone()];
        for l in 0..depth {
            phi.push(gate.component_mul(&phi[l]));
        }
        let mut g = vec![DMatrix::from_element(p, p, 1.0); depth + 1];
        for l in (0..depth).rev() {
            g[l] = g[l + 1].component_mul(&gate);
        }
        return Ok((0..depth)
            .map(|l| [phi[l + 1].clone(), g[l].clone(), g[l].clone(), g[l].clone()])
            .collect());
    }
    (0..depth)
        .map(|l| {
            let phi = stack.phi[l + 1].clone();
            let g = stack.g[l].clone();
            let (gt, gtt) = match *rule {
                Rule::Gd => (g.clone(), g.clone()),
                Rule::RhoFa { rho } => (&g * rho.powi((depth - l) as i32), g.clone()),
                Rule::Dfa => (zeros.clone(), stack.phidot[l].clone()),
                Rule::Hebb => (zeros.clone(), zeros.clone()),
                Rule::Gln => unreachable!(),
                Rule::NodePerturb { .. } => {
                    return Err(Error::Domain(
                        "node perturbation has no infinite-width kernel".into(),
                    ))
                }
            };
            Ok([phi, g, gt, gtt])
        })
        .collect()
}

/// Lazy kernels broadcast over the two-time grid.
pub fn lazy_kernel_set(
    input_kernel: &DMatrix<f64>,
    depth: usize,
    act: Activation,
    rule: &Rule,
    steps: usize,
) -> Result<KernelSet> {
    let layers = lazy_layer_kernels(input_kernel, depth, act, rule)?;
    let mut ks = KernelSet {
        input_kernel: input_kernel.clone(),
        phi: Vec::new(),
        g: Vec::new(),
        gtilde: Vec::new(),
        gtildetilde: Vec::new(),
    };
    for [phi, g, gt, gtt] in layers {
        ks.phi.push(TwoTime::tiled(&phi, steps));
        ks.g.push(TwoTime::tiled(&g, steps));
        ks.gtilde.push(TwoTime::tiled(&gt, steps));
        ks.gtildetilde.push(TwoTime::tiled(&gtt, steps));
    }
    Ok(ks)
}

#[derive(Clone, Debug, Serialize)]
pub struct LazyPrediction {
    /// `P × T` predictions.
    #[serde(skip)]
    pub f: DMatrix<f64>,
    /// True when the spectral path failed and explicit Euler was used.
    pub euler_fallback: bool,
}

/// `f(t) = (I − e^{−Kt}) y` from `f(0) = 0`.
pub fn lazy_predict(k: &DMatrix<f64>, y: &DVector<f64>, grid: &TimeGrid) -> Result<LazyPrediction> {
    grid.validate()?;
    let p = y.len();
    if k.shape() != (p, p) {
        return Err(Error::Shape("eNTK and targets disagree".into()));
    }
    let asym = (k - k.transpose()).amax();
    let spectral = if asym <= 1e-12 * k.amax().max(1.0) {
        let eig = SymmetricEigen::new(k.clone());
        if eig.eigenvalues.iter().chain(eig.eigenvectors.iter()).all(|x| x.is_finite()) {
            Some(eig)
        } else {
            None
        }
    } else {
        None
    };
    let mut f = DMatrix::zeros(p, grid.steps);
    match spectral {
        Some(eig) => {
            let proj = eig.eigenvectors.transpose() * y;
            for step in 0..grid.steps {
                let t = grid.time(step);
                let coeff = DVector::from_fn(p, |i, _| -(-eig.eigenvalues[i] * t).exp_m1() * proj[i]);
                f.set_column(step, &(&eig.eigenvectors * coeff));
            }
            Ok(LazyPrediction {
                f,
                euler_fallback: false,
            })
        }
        None => {
            for step in 1..grid.steps {
                let prev = f.column(step - 1).into_owned();
                let next = &prev + k * (y - &prev) * grid.dt;
                f.set_column(step, &next);
            }
            Ok(LazyPrediction {
                f,
                euler_fallback: true,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AnglePoint {
    pub theta: f64,
    pub diagonal: f64,
    pub off_diagonal: f64,
    /// `K₁₂(θ) / K₁₂(0)`; equals `K₁₂/K₁₁` for unit-norm inputs.
    pub normalized: f64,
}

pub fn angle_pair_kernel(theta: f64) -> DMatrix<f64> {
    let c = theta.cos();
    DMatrix::from_row_slice(2, 2, &[1.0, c, c, 1.0])
}

/// Off-diagonal initial eNTK for two unit-norm inputs at angle `θ`.
pub fn angle_sweep(rule: &Rule, depth: usize, act: Activation, thetas: &[f64]) -> Result<Vec<AnglePoint>> {
    thetas
        .iter()
        .map(|&theta| {
            let stack = lazy_stack(&angle_pair_kernel(theta), depth, act)?;
            let k = lazy_entk(rule, &stack)?;
            Ok(AnglePoint {
                theta,
                diagonal: k[(0, 0)],
                off_diagonal: k[(0, 1)],
                normalized: k[(0, 1)] / k[(0, 0)],
            })
        })
        .collect()
}
