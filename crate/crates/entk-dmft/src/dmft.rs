//! Alternating Monte Carlo solver for the infinite-width field equations.
//!
//! Each iteration predicts `f(t)` from the current eNTK, draws Gaussian
//! sources from the current kernels, integrates the single-site fields of
//! every layer on the `(P·T)` grid, re-estimates kernels (and, for `L ≥ 2`,
//! response functions) and damps toward the estimate.
//!
//! Fields of one layer for all paths are `n × S` matrices with the
//! time-major row index `k·P + μ` used by [`TwoTime`]. Memory integrals are
//! left Riemann sums over `j < k`, matching the explicit Euler scheme of the
//! finite-width trainer step for step.
//!
//! Standard normals are drawn once per `(seed, layer, source kind)` and
//! reused across iterations (common random numbers), so the map being
//! iterated is deterministic and the residual measures convergence rather
//! than sampling noise. `resample` draws fresh normals every iteration.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::lazy::lazy_kernel_set;
use crate::linalg::psd_factor;
use crate::model::{entk_contract, entk_equal_time, Dataset, DmftState, KernelSet, NetworkConfig, ResponseSet, Rule, TimeGrid};
use crate::rng::{self, tag};
use crate::tensor::TwoTime;

/// Paths per parallel work item. Fixed so results do not depend on the
/// number of threads.
const CHUNK: usize = 128;
const RESPONSE_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
    /// Center and whiten the standard normals of each layer so their
    /// sample covariance is exactly the identity.
    #[serde(default = "default_true")]
    pub moment_match: bool,
    /// Fresh standard normals every iteration instead of reusing them.
    #[serde(default)]
    pub resample: bool,
    /// Number of paths used for response estimates (all if absent).
    #[serde(default)]
    pub response_paths: Option<usize>,
}

fn default_samples() -> usize {
    1000
}
fn default_beta() -> f64 {
    0.6
}
fn default_max_iters() -> usize {
    50
}
fn default_tol() -> f64 {
    1e-3
}
fn default_jitter() -> f64 {
    1e-10
}
fn default_true() -> bool {
    true
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            samples: default_samples(),
            beta: default_beta(),
            max_iters: default_max_iters(),
            tol: default_tol(),
            jitter: default_jitter(),
            seed: 0,
            moment_match: true,
            resample: false,
            response_paths: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::config("solver.samples", "must be >= 2"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config("solver.beta", "must lie in (0, 1]"));
        }
        if self.max_iters < 1 {
            return Err(Error::config("solver.max_iters", "must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("solver.tol", "must be > 0"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::config("solver.jitter", "must be finite and >= 0"));
        }
        if self.response_paths == Some(0) {
            return Err(Error::config("solver.response_paths", "must be >= 1"));
        }
        Ok(())
    }
}

/// Source kinds, used as stream tags.
mod kind {
    pub const U: u64 = 0;
    pub const R: u64 = 1;
    pub const RV: u64 = 2;
    pub const ZETA: u64 = 3;
    pub const STATIC: u64 = 4;
    pub const GATE: u64 = 5;
}

/// Covariance of a source on the `n`-point grid.
enum Cov<'a> {
    /// Time-constant `base` (`P × P`).
    Tiled(&'a DMatrix<f64>),
    /// All-ones covariance of dimension `n`: one shared scalar.
    Ones(usize),
    Dense(DMatrix<f64>),
}

fn factor(cov: Cov<'_>, t: usize, jitter: f64, layer: usize) -> Result<DMatrix<f64>> {
    match cov {
        Cov::Tiled(base) => {
            let (f, _) = psd_factor(base, jitter, layer)?;
            let p = base.nrows();
            Ok(DMatrix::from_fn(p * t, f.ncols(), |i, j| f[(i % p, j)]))
        }
        Cov::Ones(n) => Ok(DMatrix::from_element(n, 1, 1.0)),
        Cov::Dense(c) => Ok(psd_factor(&c, jitter, layer)?.0),
    }
}

/// Standard normals per `(layer, kind)`, reused across iterations unless
/// `resample` is set.
pub struct NormalBank {
    seed: u64,
    samples: usize,
    moment_match: bool,
    resample: bool,
    cache: HashMap<usize, (Vec<(u64, usize)>, Vec<DMatrix<f64>>)>,
    /// False once any layer could not be whitened (too few paths).
    pub matched: bool,
}

impl NormalBank {
    pub fn new(seed: u64, samples: usize, moment_match: bool, resample: bool) -> Self {
        NormalBank {
            seed,
            samples,
            moment_match,
            resample,
            cache: HashMap::new(),
            matched: moment_match,
        }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// One `rows × S` block per requested `(kind, rows)`.
    fn layer(&mut self, layer: usize, dims: &[(u64, usize)], iteration: usize) -> &[DMatrix<f64>] {
        let fresh = self.resample
            || self
                .cache
                .get(&layer)
                .map(|(d, _)| d.as_slice() != dims)
                .unwrap_or(true);
        if fresh {
            let round = if self.resample { iteration as u64 } else { 0 };
            let mut blocks: Vec<DMatrix<f64>> = dims
                .iter()
                .map(|&(k, rows)| {
                    let mut r = rng::stream(self.seed, &[tag::SOURCES, layer as u64, k, round]);
                    let mut m = DMatrix::zeros(rows, self.samples);
                    rng::fill_normal(&mut r, m.as_mut_slice());
                    m
                })
                .collect();
            if self.moment_match && !whiten_jointly(&mut blocks) {
                self.matched = false;
            }
            self.cache.insert(layer, (dims.to_vec(), blocks));
        }
        &self.cache[&layer].1
    }
}

/// Centers the rows of the stacked blocks and maps their sample covariance
/// to the identity. Returns false (leaving the blocks untouched) when there
/// are too few columns.
fn whiten_jointly(blocks: &mut [DMatrix<f64>]) -> bool {
    let s = blocks[0].ncols();
    let m: usize = blocks.iter().map(|b| b.nrows()).sum();
    if m + 1 >= s {
        return false;
    }
    let mut x = DMatrix::zeros(m, s);
    let mut r0 = 0;
    for b in blocks.iter() {
        x.rows_mut(r0, b.nrows()).copy_from(b);
        r0 += b.nrows();
    }
    for mut row in x.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let cov = &x * x.transpose() / s as f64;
    let Some(ch) = cov.cholesky() else {
        return false;
    };
    let Some(w) = ch.l().solve_lower_triangular(&x) else {
        return false;
    };
    let mut r0 = 0;
    for b in blocks.iter_mut() {
        let rows = b.nrows();
        b.copy_from(&w.rows(r0, rows));
        r0 += rows;
    }
    true
}

/// Gaussian sources of one layer, each `n × S` unless noted.
#[derive(Clone, Debug)]
pub struct LayerSources {
    pub u: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// ρ-FA source correlated with `r` through `G̃^{ℓ+1}`.
    pub v: Option<DMatrix<f64>>,
    /// ρ-FA independent feedback source with covariance `G̃̃^{ℓ+1}`.
    pub zeta: Option<DMatrix<f64>>,
    /// DFA static feedback value per path.
    pub feedback: Option<DVector<f64>>,
    /// GLN gate preactivations `m_μ`, `P × S`.
    pub gates: Option<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
pub struct Sources {
    pub layers: Vec<LayerSources>,
}

/// Draws sources from the current kernels. Layer 1 uses the tiled input
/// kernel and layer `L` the all-ones boundary, so only interior layers need
/// dense factorizations.
pub fn sample_sources(
    kernels: &KernelSet,
    rule: &Rule,
    bank: &mut NormalBank,
    iteration: usize,
    jitter: f64,
) -> Result<Sources> {
    let (p, t) = kernels.check()?;
    let n = p * t;
    let l = kernels.depth();
    let kx = &kernels.input_kernel;
    let mut layers = Vec::with_capacity(l);
    for layer in 1..=l {
        let i = layer - 1;
        let top = layer == l;
        let mut plan: Vec<(u64, DMatrix<f64>)> = Vec::new();
        let u_cov = if layer == 1 {
            Cov::Tiled(kx)
        } else {
            Cov::Dense(kernels.phi[i - 1].flat().clone())
        };
        plan.push((kind::U, factor(u_cov, t, jitter, layer)?));
        let dense_or_ones = |m: &TwoTime| if top { Cov::Ones(n) } else { Cov::Dense(m.flat().clone()) };
        match *rule {
            Rule::RhoFa { rho } if rho > 0.0 => {
                let joint = if top {
                    Cov::Ones(2 * n)
                } else {
                    let mut j = DMatrix::zeros(2 * n, 2 * n);
                    let gt = kernels.gtilde[i + 1].flat();
                    j.view_mut((0, 0), (n, n)).copy_from(kernels.g[i + 1].flat());
                    j.view_mut((0, n), (n, n)).copy_from(gt);
                    j.view_mut((n, 0), (n, n)).copy_from(&gt.transpose());
                    j.view_mut((n, n), (n, n)).copy_from(kernels.gtildetilde[i + 1].flat());
                    Cov::Dense(j)
                };
                plan.push((kind::RV, factor(joint, t, jitter, layer)?));
                if rho < 1.0 {
                    let c = if top { Cov::Ones(n) } else { Cov::Dense(kernels.gtildetilde[i + 1].flat().clone()) };
                    plan.push((kind::ZETA, factor(c, t, jitter, layer)?));
                }
            }
            _ => {
                let c = if top { Cov::Ones(n) } else { dense_or_ones(&kernels.g[i + 1]) };
                plan.push((kind::R, factor(c, t, jitter, layer)?));
                match rule {
                    Rule::RhoFa { .. } => {
                        let c = if top { Cov::Ones(n) } else { Cov::Dense(kernels.gtildetilde[i + 1].flat().clone()) };
                        plan.push((kind::ZETA, factor(c, t, jitter, layer)?));
                    }
                    Rule::Dfa => plan.push((kind::STATIC, DMatrix::from_element(1, 1, 1.0))),
                    Rule::Gln => plan.push((kind::GATE, psd_factor(kx, jitter, layer)?.0)),
                    _ => {}
                }
            }
        }
        let dims: Vec<(u64, usize)> = plan.iter().map(|(k, f)| (*k, f.ncols())).collect();
        let normals = bank.layer(layer, &dims, iteration);
        let mut src = LayerSources {
            u: DMatrix::zeros(0, 0),
            r: DMatrix::zeros(0, 0),
            v: None,
            zeta: None,
            feedback: None,
            gates: None,
        };
        for ((k, f), xi) in plan.iter().zip(normals) {
            let x = f * xi;
            match *k {
                kind::U => src.u = x,
                kind::R => src.r = x,
                kind::RV => {
                    src.r = x.rows(0, n).into_owned();
                    src.v = Some(x.rows(n, n).into_owned());
                }
                kind::ZETA => src.zeta = Some(x),
                kind::STATIC => src.feedback = Some(x.row(0).transpose()),
                kind::GATE => src.gates = Some(x),
                _ => unreachable!(),
            }
        }
        layers.push(src);
    }
    Ok(Sources { layers })
}

/// Fields of one layer for all paths, each `n × S`.
#[derive(Clone, Debug)]
pub struct LayerFields {
    pub h: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// `φ(h)`, or `φ̇(m)·h` for GLN.
    pub phi: DMatrix<f64>,
    /// `∂phi/∂h`.
    pub slope: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub gtilde: DMatrix<f64>,
    /// ρ-FA feedback field `z̃`.
    pub ztilde: Option<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
pub struct Fields {
    pub layers: Vec<LayerFields>,
}

impl Fields {
    pub fn samples(&self) -> usize {
        self.layers[0].h.ncols()
    }
}

/// Memory kernels of one layer, already multiplied by `γ₀·dt`.
pub(crate) struct LayerPlan {
    pub(crate) p: usize,
    pub(crate) t: usize,
    /// Multiplies `g` in the `h` equation (includes `Φ⊙Δ` when `g̃ = g`).
    pub(crate) mem_g: Option<DMatrix<f64>>,
    /// Multiplies `g̃` in the `h` equation.
    pub(crate) mem_gt: Option<DMatrix<f64>>,
    /// Multiplies `φ(h)` in the `z` equation.
    pub(crate) mem_z: DMatrix<f64>,
    /// Multiplies `φ(h)` in the ρ-FA `z̃` equation (includes `ρ`).
    pub(crate) mem_zt: Option<DMatrix<f64>>,
    pub(crate) b_local: DMatrix<f64>,
    /// Includes `ρ`.
    pub(crate) d_local: DMatrix<f64>,
}

fn scale_columns_by_errors(m: &mut DMatrix<f64>, delta: &DMatrix<f64>) {
    for (mut col, d) in m.column_iter_mut().zip(delta.as_slice()) {
        col *= *d;
    }
}

pub(crate) fn layer_plans(
    kernels: &KernelSet,
    responses: &ResponseSet,
    delta: &DMatrix<f64>,
    rule: &Rule,
    gamma0: f64,
    dt: f64,
) -> Result<Vec<LayerPlan>> {
    let (p, t) = kernels.check()?;
    if delta.shape() != (p, t) {
        return Err(Error::Shape(format!(
            "errors are {:?}, grid is ({p}, {t})",
            delta.shape()
        )));
    }
    let l = kernels.depth();
    let w = gamma0 * dt;
    let backprop_is_true = matches!(rule, Rule::Gd | Rule::Gln);
    let mut plans = Vec::with_capacity(l);
    for layer in 1..=l {
        let i = layer - 1;
        let mut phi_prev = if layer == 1 {
            TwoTime::tiled(&kernels.input_kernel, t).into_flat()
        } else {
            kernels.phi[i - 1].flat().clone()
        };
        scale_columns_by_errors(&mut phi_prev, delta);
        let a_prev = (layer > 1).then(|| responses.a[i - 1].flat());
        let c_prev = (layer > 1).then(|| responses.c[i - 1].flat());
        let (mem_g, mem_gt) = if backprop_is_true {
            let mut m = phi_prev;
            if let Some(a) = a_prev {
                m += a;
            }
            (Some(m * w), None)
        } else {
            let mut m = phi_prev;
            if let (Rule::RhoFa { .. }, Some(c)) = (rule, c_prev) {
                m += c;
            }
            (None, Some(m * w))
        };
        let mut mem_z = if layer == l {
            DMatrix::from_element(p * t, p * t, 1.0)
        } else {
            kernels.gtilde[i + 1].flat().clone()
        };
        scale_columns_by_errors(&mut mem_z, delta);
        mem_z += responses.b[i].flat();
        mem_z *= w;
        let (mem_zt, d_local) = match *rule {
            Rule::RhoFa { rho } => (
                Some(responses.d[i].flat() * (w * rho)),
                &responses.d_local[i] * rho,
            ),
            _ => (None, DMatrix::zeros(p, t)),
        };
        plans.push(LayerPlan {
            p,
            t,
            mem_g,
            mem_gt,
            mem_z,
            mem_zt,
            b_local: responses.b_local[i].clone(),
            d_local,
        });
    }
    Ok(plans)
}

/// Adds `mem[block k, ..kP] · x[..kP, :]` to `out`.
fn add_memory(out: &mut DMatrix<f64>, mem: &DMatrix<f64>, x: &DMatrix<f64>, k: usize, p: usize) {
    if k == 0 {
        return;
    }
    let r0 = k * p;
    out.gemm(1.0, &mem.view((r0, 0), (p, r0)), &x.rows(0, r0), 1.0);
}

fn scale_rows(m: &mut DMatrix<f64>, s: &[f64]) {
    for (mut row, v) in m.row_iter_mut().zip(s) {
        row *= *v;
    }
}

fn check_finite(m: &DMatrix<f64>, layer: usize, step: usize) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer, step })
    }
}

#[allow(clippy::too_many_arguments)]
fn integrate_chunk(
    plan: &LayerPlan,
    src: &LayerSources,
    rule: &Rule,
    act: Activation,
    delta: &DMatrix<f64>,
    layer: usize,
    c0: usize,
    w: usize,
) -> Result<LayerFields> {
    let (p, t) = (plan.p, plan.t);
    let n = p * t;
    let z0 = || DMatrix::zeros(n, w);
    let (mut h, mut z, mut phi, mut slope, mut g, mut gt) = (z0(), z0(), z0(), z0(), z0(), z0());
    let mut zt = matches!(rule, Rule::RhoFa { .. }).then(z0);
    let gate = src
        .gates
        .as_ref()
        .map(|m| m.view((0, c0), (p, w)).map(|x| act.dphi(x)));

    for k in 0..t {
        let r0 = k * p;
        let mut hb = src.u.view((r0, c0), (p, w)).into_owned();
        if let Some(m) = &plan.mem_g {
            add_memory(&mut hb, m, &g, k, p);
        }
        if let Some(m) = &plan.mem_gt {
            add_memory(&mut hb, m, &gt, k, p);
        }
        check_finite(&hb, layer, k)?;
        let (fb, sb) = match &gate {
            Some(gm) => (hb.component_mul(gm), gm.clone()),
            None => (hb.map(|x| act.phi(x)), hb.map(|x| act.dphi(x))),
        };
        let mut zb = src.r.view((r0, c0), (p, w)).into_owned();
        add_memory(&mut zb, &plan.mem_z, &phi, k, p);
        let mut local = fb.clone();
        scale_rows(&mut local, plan.b_local.column(k).as_slice());
        zb += local;
        check_finite(&zb, layer, k)?;
        let gb = sb.component_mul(&zb);
        let gtb = match *rule {
            Rule::Gd | Rule::Gln => gb.clone(),
            Rule::RhoFa { rho } => {
                let mut ztb = DMatrix::zeros(p, w);
                if let Some(v) = &src.v {
                    ztb += v.view((r0, c0), (p, w)) * rho;
                }
                if let Some(zeta) = &src.zeta {
                    ztb += zeta.view((r0, c0), (p, w)) * (1.0 - rho * rho).sqrt();
                }
                if let Some(m) = &plan.mem_zt {
                    add_memory(&mut ztb, m, &phi, k, p);
                }
                let mut local = fb.clone();
                scale_rows(&mut local, plan.d_local.column(k).as_slice());
                ztb += local;
                let out = sb.component_mul(&ztb);
                zt.as_mut().unwrap().rows_mut(r0, p).copy_from(&ztb);
                out
            }
            Rule::Dfa => {
                let fbk = src.feedback.as_ref().expect("DFA sources carry feedback");
                let mut out = sb.clone();
                for (j, mut col) in out.column_iter_mut().enumerate() {
                    col *= fbk[c0 + j];
                }
                out
            }
            Rule::Hebb => {
                let mut out = fb.clone();
                scale_rows(&mut out, delta.column(k).as_slice());
                out
            }
            Rule::NodePerturb { .. } => unreachable!("rejected before integration"),
        };
        h.rows_mut(r0, p).copy_from(&hb);
        z.rows_mut(r0, p).copy_from(&zb);
        phi.rows_mut(r0, p).copy_from(&fb);
        slope.rows_mut(r0, p).copy_from(&sb);
        g.rows_mut(r0, p).copy_from(&gb);
        gt.rows_mut(r0, p).copy_from(&gtb);
    }
    Ok(LayerFields {
        h,
        z,
        phi,
        slope,
        g,
        gtilde: gt,
        ztilde: zt,
    })
}

fn chunks(s: usize) -> Vec<(usize, usize)> {
    (0..s).step_by(CHUNK).map(|c0| (c0, CHUNK.min(s - c0))).collect()
}

fn hstack(parts: Vec<DMatrix<f64>>) -> DMatrix<f64> {
    let rows = parts[0].nrows();
    let cols = parts.iter().map(|m| m.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c0 = 0;
    for m in parts {
        out.columns_mut(c0, m.ncols()).copy_from(&m);
        c0 += m.ncols();
    }
    out
}

pub(crate) fn reject_node_perturb(rule: &Rule) -> Result<()> {
    if let Rule::NodePerturb { .. } = rule {
        return Err(Error::Domain(
            "node perturbation has no infinite-width mean-field limit".into(),
        ));
    }
    Ok(())
}

/// Integrates all layers' fields for every path. `delta` is `P × T`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_fields(
    sources: &Sources,
    kernels: &KernelSet,
    responses: &ResponseSet,
    delta: &DMatrix<f64>,
    rule: &Rule,
    act: Activation,
    gamma0: f64,
    dt: f64,
) -> Result<Fields> {
    reject_node_perturb(rule)?;
    let plans = layer_plans(kernels, responses, delta, rule, gamma0, dt)?;
    let mut layers = Vec::with_capacity(plans.len());
    for (i, (plan, src)) in plans.iter().zip(&sources.layers).enumerate() {
        let s = src.u.ncols();
        let parts: Vec<LayerFields> = chunks(s)
            .into_par_iter()
            .map(|(c0, w)| integrate_chunk(plan, src, rule, act, delta, i + 1, c0, w))
            .collect::<Result<_>>()?;
        let take = |f: fn(&LayerFields) -> &DMatrix<f64>| hstack(parts.iter().map(|x| f(x).clone()).collect());
        let ztilde = parts[0]
            .ztilde
            .is_some()
            .then(|| hstack(parts.iter().map(|x| x.ztilde.clone().unwrap()).collect()));
        layers.push(LayerFields {
            h: take(|x| &x.h),
            z: take(|x| &x.z),
            phi: take(|x| &x.phi),
            slope: take(|x| &x.slope),
            g: take(|x| &x.g),
            gtilde: take(|x| &x.gtilde),
            ztilde,
        });
    }
    Ok(Fields { layers })
}

/// `a·bᵀ / S` for `n × S` path matrices, computed in fixed column blocks.
fn path_average(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, s) = a.shape();
    let block = 64;
    let parts: Vec<DMatrix<f64>> = (0..n)
        .step_by(block)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|j0| {
            let w = block.min(n - j0);
            a * b.rows(j0, w).transpose()
        })
        .collect();
    hstack(parts) / s as f64
}

fn symmetrized(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Monte Carlo kernel estimates `⟨φφ⟩, ⟨gg⟩, ⟨gg̃⟩, ⟨g̃g̃⟩` per layer.
pub fn estimate_kernels(fields: &Fields, input_kernel: &DMatrix<f64>, rule: &Rule) -> Result<KernelSet> {
    let p = input_kernel.nrows();
    let n = fields.layers[0].h.nrows();
    if p == 0 || n % p != 0 {
        return Err(Error::Shape("field rows are not a multiple of the sample count".into()));
    }
    let t = n / p;
    let mut ks = KernelSet {
        input_kernel: input_kernel.clone(),
        phi: Vec::new(),
        g: Vec::new(),
        gtilde: Vec::new(),
        gtildetilde: Vec::new(),
    };
    let same = matches!(rule, Rule::Gd | Rule::Gln);
    for lf in &fields.layers {
        let phi = symmetrized(path_average(&lf.phi, &lf.phi));
        let g = symmetrized(path_average(&lf.g, &lf.g));
        let (gt, gtt) = if same {
            (g.clone(), g.clone())
        } else {
            (
                path_average(&lf.g, &lf.gtilde),
                symmetrized(path_average(&lf.gtilde, &lf.gtilde)),
            )
        };
        ks.phi.push(TwoTime::from_flat(p, t, phi)?);
        ks.g.push(TwoTime::from_flat(p, t, g)?);
        ks.gtilde.push(TwoTime::from_flat(p, t, gt)?);
        ks.gtildetilde.push(TwoTime::from_flat(p, t, gtt)?);
    }
    Ok(ks)
}

/// Which source of a layer is perturbed.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Perturb {
    U,
    R,
    V,
}

struct Tangents {
    phi: DMatrix<f64>,
    g: DMatrix<f64>,
    gt: DMatrix<f64>,
}

/// Pathwise derivatives of one path's fields with respect to every grid
/// entry of one source, from the linearized field equations. Rows index the
/// output `(μ, t)`, columns the perturbed `(ν, s)`.
#[allow(clippy::too_many_arguments)]
fn path_tangents(
    plan: &LayerPlan,
    lf: &LayerFields,
    src: &LayerSources,
    rule: &Rule,
    act: Activation,
    delta: &DMatrix<f64>,
    path: usize,
    which: Perturb,
) -> Tangents {
    let (p, t) = (plan.p, plan.t);
    let n = p * t;
    let gated = src.gates.is_some();
    let h = lf.h.column(path);
    let z = lf.z.column(path);
    let slope = lf.slope.column(path);
    let ddphi: DVector<f64> = if gated {
        DVector::zeros(n)
    } else {
        h.map(|x| act.ddphi(x))
    };
    let curv = ddphi.component_mul(&z);
    let curv_t: DVector<f64> = match (rule, &lf.ztilde, &src.feedback) {
        (Rule::RhoFa { .. }, Some(zt), _) => ddphi.component_mul(&zt.column(path)),
        (Rule::Dfa, _, Some(fb)) => &ddphi * fb[path],
        _ => DVector::zeros(n),
    };
    let rho = match *rule {
        Rule::RhoFa { rho } => rho,
        _ => 0.0,
    };

    let mut dh = DMatrix::zeros(n, n);
    let mut dz = DMatrix::zeros(n, n);
    let mut dphi = DMatrix::zeros(n, n);
    let mut dg = DMatrix::zeros(n, n);
    let mut dgt = DMatrix::zeros(n, n);
    for k in 0..t {
        let r0 = k * p;
        let cols = r0 + p;
        let mut hb = DMatrix::zeros(p, cols);
        if which == Perturb::U {
            for mu in 0..p {
                hb[(mu, r0 + mu)] = 1.0;
            }
        }
        if k > 0 {
            if let Some(m) = &plan.mem_g {
                hb.gemm(1.0, &m.view((r0, 0), (p, r0)), &dg.view((0, 0), (r0, cols)), 1.0);
            }
            if let Some(m) = &plan.mem_gt {
                hb.gemm(1.0, &m.view((r0, 0), (p, r0)), &dgt.view((0, 0), (r0, cols)), 1.0);
            }
        }
        let sl = slope.rows(r0, p);
        let mut fb = hb.clone();
        scale_rows(&mut fb, sl.as_slice());
        let mut zb = DMatrix::zeros(p, cols);
        if which == Perturb::R {
            for mu in 0..p {
                zb[(mu, r0 + mu)] = 1.0;
            }
        }
        if k > 0 {
            zb.gemm(1.0, &plan.mem_z.view((r0, 0), (p, r0)), &dphi.view((0, 0), (r0, cols)), 1.0);
        }
        let mut local = fb.clone();
        scale_rows(&mut local, plan.b_local.column(k).as_slice());
        zb += local;
        let mut gb = hb.clone();
        scale_rows(&mut gb, curv.rows(r0, p).as_slice());
        let mut tmp = zb.clone();
        scale_rows(&mut tmp, sl.as_slice());
        gb += tmp;
        let gtb = match rule {
            Rule::Gd | Rule::Gln => gb.clone(),
            Rule::RhoFa { .. } => {
                let mut ztb = DMatrix::zeros(p, cols);
                if which == Perturb::V {
                    for mu in 0..p {
                        ztb[(mu, r0 + mu)] = rho;
                    }
                }
                if let (Some(m), true) = (&plan.mem_zt, k > 0) {
                    ztb.gemm(1.0, &m.view((r0, 0), (p, r0)), &dphi.view((0, 0), (r0, cols)), 1.0);
                }
                let mut local = fb.clone();
                scale_rows(&mut local, plan.d_local.column(k).as_slice());
                ztb += local;
                scale_rows(&mut ztb, sl.as_slice());
                let mut out = hb.clone();
                scale_rows(&mut out, curv_t.rows(r0, p).as_slice());
                out + ztb
            }
            Rule::Dfa => {
                let mut out = hb.clone();
                scale_rows(&mut out, curv_t.rows(r0, p).as_slice());
                out
            }
            Rule::Hebb => {
                let mut out = fb.clone();
                scale_rows(&mut out, delta.column(k).as_slice());
                out
            }
            Rule::NodePerturb { .. } => unreachable!(),
        };
        dh.view_mut((r0, 0), (p, cols)).copy_from(&hb);
        dz.view_mut((r0, 0), (p, cols)).copy_from(&zb);
        dphi.view_mut((r0, 0), (p, cols)).copy_from(&fb);
        dg.view_mut((r0, 0), (p, cols)).copy_from(&gb);
        dgt.view_mut((r0, 0), (p, cols)).copy_from(&gtb);
    }
    Tangents {
        phi: dphi,
        g: dg,
        gt: dgt,
    }
}

/// Path average of tangents over the first `paths` paths, in fixed chunks.
#[allow(clippy::too_many_arguments)]
fn mean_tangents(
    plan: &LayerPlan,
    lf: &LayerFields,
    src: &LayerSources,
    rule: &Rule,
    act: Activation,
    delta: &DMatrix<f64>,
    paths: usize,
    which: Perturb,
) -> Tangents {
    let n = plan.p * plan.t;
    let starts: Vec<usize> = (0..paths).step_by(RESPONSE_CHUNK).collect();
    let parts: Vec<Tangents> = starts
        .into_par_iter()
        .map(|c0| {
            let mut acc = Tangents {
                phi: DMatrix::zeros(n, n),
                g: DMatrix::zeros(n, n),
                gt: DMatrix::zeros(n, n),
            };
            for path in c0..(c0 + RESPONSE_CHUNK).min(paths) {
                let tg = path_tangents(plan, lf, src, rule, act, delta, path, which);
                acc.phi += tg.phi;
                acc.g += tg.g;
                acc.gt += tg.gt;
            }
            acc
        })
        .collect();
    let mut total = Tangents {
        phi: DMatrix::zeros(n, n),
        g: DMatrix::zeros(n, n),
        gt: DMatrix::zeros(n, n),
    };
    for part in parts {
        total.phi += part.phi;
        total.g += part.g;
        total.gt += part.gt;
    }
    let inv = 1.0 / paths as f64;
    total.phi *= inv;
    total.g *= inv;
    total.gt *= inv;
    total
}

fn causal_response(m: &DMatrix<f64>, p: usize, t: usize, scale: f64) -> Result<TwoTime> {
    let mut x = TwoTime::from_flat(p, t, m * scale)?;
    x.make_causal();
    Ok(x)
}

fn equal_time_diagonal(m: &DMatrix<f64>, p: usize, t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, t, |mu, k| m[(k * p + mu, k * p + mu)])
}

/// True when the rule's field equations at this depth use any response.
pub fn needs_responses(depth: usize) -> bool {
    depth >= 2
}

/// Response functions from pathwise tangents:
/// `A^ℓ = ⟨∂φ(h^ℓ)/∂r^ℓ⟩`, `C^ℓ = ⟨∂φ(h^ℓ)/∂v^ℓ⟩`,
/// `B^ℓ = ⟨∂g^{ℓ+1}/∂u^{ℓ+1}⟩`, `D^ℓ = ⟨∂g̃^{ℓ+1}/∂u^{ℓ+1}⟩`, each divided
/// by `γ₀·dt` and restricted to `s < t`; equal-time parts go to the
/// `*_local` fields. Which responses are populated depends on the rule:
/// `A` for GD and GLN, `C` and `D` for ρ-FA with `ρ > 0`, `B` for all.
#[allow(clippy::too_many_arguments)]
pub fn estimate_responses(
    fields: &Fields,
    sources: &Sources,
    kernels: &KernelSet,
    responses: &ResponseSet,
    delta: &DMatrix<f64>,
    rule: &Rule,
    act: Activation,
    gamma0: f64,
    dt: f64,
    paths: Option<usize>,
) -> Result<ResponseSet> {
    reject_node_perturb(rule)?;
    let (p, t) = kernels.check()?;
    let l = kernels.depth();
    let mut out = ResponseSet::zeros(l, p, t);
    if l < 2 || gamma0 == 0.0 {
        return Ok(out);
    }
    let plans = layer_plans(kernels, responses, delta, rule, gamma0, dt)?;
    let paths = paths.unwrap_or(usize::MAX).min(fields.samples());
    let scale = 1.0 / (gamma0 * dt);
    let rho = match *rule {
        Rule::RhoFa { rho } => rho,
        _ => 0.0,
    };
    for layer in 1..=l {
        let i = layer - 1;
        let (plan, lf, src) = (&plans[i], &fields.layers[i], &sources.layers[i]);
        if layer < l {
            match rule {
                Rule::Gd | Rule::Gln => {
                    let tg = mean_tangents(plan, lf, src, rule, act, delta, paths, Perturb::R);
                    out.a[i] = causal_response(&tg.phi, p, t, scale)?;
                }
                Rule::RhoFa { .. } if rho > 0.0 => {
                    let tg = mean_tangents(plan, lf, src, rule, act, delta, paths, Perturb::V);
                    // The source enters z̃ with weight ρ; C is per unit of v.
                    out.c[i] = causal_response(&tg.phi, p, t, scale)?;
                }
                _ => {}
            }
        }
        if layer >= 2 {
            let tg = mean_tangents(plan, lf, src, rule, act, delta, paths, Perturb::U);
            out.b[i - 1] = causal_response(&tg.g, p, t, scale)?;
            out.b_local[i - 1] = equal_time_diagonal(&tg.g, p, t);
            match rule {
                Rule::Gd => {
                    out.d[i - 1] = out.b[i - 1].clone();
                    out.d_local[i - 1] = out.b_local[i - 1].clone();
                }
                Rule::RhoFa { .. } if rho > 0.0 => {
                    out.d[i - 1] = causal_response(&tg.gt, p, t, scale)?;
                    out.d_local[i - 1] = equal_time_diagonal(&tg.gt, p, t);
                }
                _ => {}
            }
        }
    }
    Ok(out)
}

/// Explicit Euler prediction `f(k+1) = f(k) + dt·K(k,k)·Δ(k)` from `f(0) = 0`.
/// Returns `(f, Δ)`, both `P × T`.
pub fn predict(kernels: &KernelSet, targets: &DVector<f64>, grid: &TimeGrid) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (p, t) = kernels.check()?;
    if targets.len() != p || grid.steps != t {
        return Err(Error::Shape("targets or grid do not match the kernels".into()));
    }
    let mut f = DMatrix::zeros(p, t);
    let mut d = DMatrix::zeros(p, t);
    let mut cur = DVector::zeros(p);
    for k in 0..t {
        let delta = targets - &cur;
        f.set_column(k, &cur);
        d.set_column(k, &delta);
        if k + 1 < t {
            cur += entk_equal_time(kernels, k) * &delta * grid.dt;
        }
    }
    Ok((f, d))
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationLog {
    pub iter: usize,
    pub residual: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub iterations: usize,
    pub log: Vec<IterationLog>,
    /// Undamped updates with fewer paths than the kernel dimension: the
    /// kernel estimates cannot reach full rank.
    pub rank_warning: bool,
    pub moment_matched: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DmftSolution {
    pub state: DmftState,
    pub report: ConvergenceReport,
}

/// Runs the damped fixed-point iteration from the lazy kernels. The
/// returned state is the last kernel estimate with predictions recomputed
/// from it. Non-convergence is reported, not raised.
pub fn solve(
    data: &Dataset,
    net: &NetworkConfig,
    rule: &Rule,
    grid: &TimeGrid,
    cfg: &SolverConfig,
) -> Result<DmftSolution> {
    net.validate()?;
    rule.validate()?;
    grid.validate()?;
    cfg.validate()?;
    reject_node_perturb(rule)?;
    let (p, t, l) = (data.len(), grid.steps, net.depth);
    let y = data.targets();
    let mut kernels = lazy_kernel_set(data.input_kernel(), l, net.activation, rule, t)?;
    let mut responses = ResponseSet::zeros(l, p, t);
    let mut bank = NormalBank::new(cfg.seed, cfg.samples, cfg.moment_match, cfg.resample);
    let mut last: Option<(KernelSet, ResponseSet)> = None;
    let mut log = Vec::new();
    let mut converged = false;

    for iter in 0..cfg.max_iters {
        let (_, delta) = predict(&kernels, y, grid)?;
        let sources = sample_sources(&kernels, rule, &mut bank, iter, cfg.jitter)?;
        let fields = integrate_fields(&sources, &kernels, &responses, &delta, rule, net.activation, net.gamma0, grid.dt)?;
        let new_k = estimate_kernels(&fields, data.input_kernel(), rule)?;
        let new_r = if needs_responses(l) {
            estimate_responses(
                &fields,
                &sources,
                &kernels,
                &responses,
                &delta,
                rule,
                net.activation,
                net.gamma0,
                grid.dt,
                cfg.response_paths,
            )?
        } else {
            ResponseSet::zeros(l, p, t)
        };
        let reference = last.as_ref().map(|(k, _)| k).unwrap_or(&kernels);
        let residual = new_k.max_relative_change(reference);
        kernels.damp_toward(&new_k, cfg.beta);
        responses.damp_toward(&new_r, cfg.beta);
        let final_loss = 0.5 * delta.column(t - 1).norm_squared();
        log.push(IterationLog {
            iter,
            residual,
            final_loss,
        });
        last = Some((new_k, new_r));
        if residual < cfg.tol {
            converged = true;
            break;
        }
    }

    let (kernels, responses) = last.expect("at least one iteration");
    let (predictions, errors) = predict(&kernels, y, grid)?;
    let entk = entk_contract(&kernels)?;
    let report = ConvergenceReport {
        converged,
        iterations: log.len(),
        log,
        rank_warning: cfg.beta >= 1.0 && cfg.samples < p * t,
        moment_matched: bank.matched,
    };
    Ok(DmftSolution {
        state: DmftState {
            kernels,
            responses,
            predictions,
            errors,
            entk,
        },
        report,
    })
}
