//! Width-N MLP trained by explicit Euler steps of the weight flow under any
//! learning rule, with kernels, eNTK and metrics measured at every step.
//!
//! Conventions: `h¹ = W⁰x/√D`, `h^{ℓ+1} = W^ℓ φ(h^ℓ)/√N`,
//! `f = w·φ(h^L)/(γ₀N)`, and the update of `W^ℓ` is
//! `dt·(γ₀/√N) Σ_μ Δ_μ g̃^{ℓ+1}_μ φ(h^ℓ_μ)ᵀ`. Per-layer matrices hold one
//! column per sample (`N × P`).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::model::{
    entk_from_layers, grad_pseudograd_correlation, kernel_task_alignment, CorrelationReport, Dataset,
    KernelSet, NetworkConfig, Rule, TimeGrid,
};
use crate::rng::{self, tag};
use crate::tensor::TwoTime;

/// Frozen rule-specific weights.
#[derive(Clone, Debug, PartialEq)]
pub enum Feedback {
    None,
    /// Effective backward weights `ρW(0) + √(1−ρ²)W̃` for the hidden
    /// matrices and for the readout.
    RhoFa {
        hidden: Vec<DMatrix<f64>>,
        readout: DVector<f64>,
    },
    /// One fixed vector per hidden layer, shared by all samples.
    Dfa { vectors: Vec<DVector<f64>> },
    /// Gate matrices `M^ℓ` (`N × D`), one per hidden layer.
    Gln { gates: Vec<DMatrix<f64>> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub rule: Rule,
    pub activation: Activation,
    pub gamma0: f64,
    pub seed: u64,
    /// `W⁰`, `N × D`.
    pub input: DMatrix<f64>,
    /// `W¹ … W^{L−1}`, each `N × N`.
    pub hidden: Vec<DMatrix<f64>>,
    /// `w^L`.
    pub readout: DVector<f64>,
    pub feedback: Feedback,
}

impl Params {
    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn width(&self) -> usize {
        self.input.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.input.ncols()
    }
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    rng::fill_normal(rng, m.as_mut_slice());
    m
}

fn gaussian_vector<R: Rng>(rng: &mut R, len: usize) -> DVector<f64> {
    let mut v = DVector::zeros(len);
    rng::fill_normal(rng, v.as_mut_slice());
    v
}

/// I.i.d. standard normal weights plus the rule's frozen feedback. Each kind
/// of weight has its own stream, so e.g. the forward weights do not depend
/// on the rule.
pub fn init_network(config: &NetworkConfig, rule: &Rule, input_dim: usize) -> Result<Params> {
    config.validate()?;
    rule.validate()?;
    if input_dim == 0 {
        return Err(Error::Shape("input dimension must be >= 1".into()));
    }
    let (n, l) = (config.width, config.depth);
    let mut init = rng::stream(config.seed, &[tag::INIT]);
    let input = gaussian_matrix(&mut init, n, input_dim);
    let hidden: Vec<_> = (1..l).map(|_| gaussian_matrix(&mut init, n, n)).collect();
    let readout = gaussian_vector(&mut init, n);

    let feedback = match *rule {
        Rule::RhoFa { rho } => {
            let mut fb = rng::stream(config.seed, &[tag::FEEDBACK]);
            let s = (1.0 - rho * rho).sqrt();
            let hidden_fb = hidden
                .iter()
                .map(|w| w * rho + gaussian_matrix(&mut fb, n, n) * s)
                .collect();
            let readout_fb = &readout * rho + gaussian_vector(&mut fb, n) * s;
            Feedback::RhoFa {
                hidden: hidden_fb,
                readout: readout_fb,
            }
        }
        Rule::Dfa => {
            let mut fb = rng::stream(config.seed, &[tag::FEEDBACK]);
            Feedback::Dfa {
                vectors: (0..l).map(|_| gaussian_vector(&mut fb, n)).collect(),
            }
        }
        Rule::Gln => {
            let mut gs = rng::stream(config.seed, &[tag::GATES]);
            Feedback::Gln {
                gates: (0..l).map(|_| gaussian_matrix(&mut gs, n, input_dim)).collect(),
            }
        }
        _ => Feedback::None,
    };

    Ok(Params {
        rule: *rule,
        activation: config.activation,
        gamma0: config.gamma0,
        seed: config.seed,
        input,
        hidden,
        readout,
        feedback,
    })
}

/// Per-layer forward quantities, index `ℓ−1`.
#[derive(Clone, Debug)]
pub struct ForwardState {
    /// Preactivations `h^ℓ`.
    pub pre: Vec<DMatrix<f64>>,
    /// `φ(h^ℓ)`, or `φ̇(m^ℓ) ⊙ h^ℓ` for GLN.
    pub features: Vec<DMatrix<f64>>,
    /// `∂features/∂h`: `φ̇(h^ℓ)`, or the gate `φ̇(m^ℓ)` for GLN.
    pub slopes: Vec<DMatrix<f64>>,
    pub output: DVector<f64>,
}

/// Forward pass on the rows of `inputs` (`P × D`).
pub fn forward(params: &Params, inputs: &DMatrix<f64>) -> Result<ForwardState> {
    let (n, d) = params.input.shape();
    if inputs.ncols() != d {
        return Err(Error::Shape(format!(
            "inputs have dimension {}, network expects {}",
            inputs.ncols(),
            d
        )));
    }
    let act = params.activation;
    let l = params.depth();
    let xt = inputs.transpose();
    let sd = (d as f64).sqrt();
    let sn = (n as f64).sqrt();

    let mut pre = Vec::with_capacity(l);
    let mut features = Vec::with_capacity(l);
    let mut slopes = Vec::with_capacity(l);
    let mut h = &params.input * &xt / sd;
    for layer in 0..l {
        let (feat, slope) = match &params.feedback {
            Feedback::Gln { gates } => {
                let gate = (&gates[layer] * &xt / sd).map(|m| act.dphi(m));
                (h.component_mul(&gate), gate)
            }
            _ => (h.map(|v| act.phi(v)), h.map(|v| act.dphi(v))),
        };
        let next = if layer + 1 < l {
            Some(&params.hidden[layer] * &feat / sn)
        } else {
            None
        };
        pre.push(h);
        features.push(feat);
        slopes.push(slope);
        if let Some(next) = next {
            h = next;
        } else {
            break;
        }
    }
    let output = features[l - 1].tr_mul(&params.readout) / (params.gamma0 * n as f64);
    Ok(ForwardState {
        pre,
        features,
        slopes,
        output,
    })
}

/// Output of sample `sample` when layer `layer` (0-based) has preactivation
/// `h` and everything above is recomputed. GLN gates are taken from `fwd`.
pub fn output_from_layer(params: &Params, fwd: &ForwardState, layer: usize, sample: usize, h: &DVector<f64>) -> f64 {
    let l = params.depth();
    let n = h.len() as f64;
    let gated = matches!(params.feedback, Feedback::Gln { .. });
    let act = params.activation;
    let mut cur = h.clone();
    for i in layer..l {
        let feat = if gated {
            cur.component_mul(&fwd.slopes[i].column(sample))
        } else {
            cur.map(|v| act.phi(v))
        };
        if i + 1 == l {
            return params.readout.dot(&feat) / (params.gamma0 * n);
        }
        cur = &params.hidden[i] * feat / n.sqrt();
    }
    unreachable!("layer index beyond depth")
}

/// Backward recursion through `w` and the hidden matrices, writing each
/// layer as `slope ⊙ (next-layer signal)`.
fn backpropagate(
    slopes: &[DMatrix<f64>],
    top: &DVector<f64>,
    mats: &[DMatrix<f64>],
) -> Vec<DMatrix<f64>> {
    let l = slopes.len();
    let (n, p) = slopes[0].shape();
    let sn = (n as f64).sqrt();
    let mut out = vec![DMatrix::zeros(0, 0); l];
    out[l - 1] = DMatrix::from_fn(n, p, |i, mu| slopes[l - 1][(i, mu)] * top[i]);
    for i in (0..l - 1).rev() {
        out[i] = (mats[i].tr_mul(&out[i + 1]) / sn).component_mul(&slopes[i]);
    }
    out
}

/// True gradient signals `g^ℓ = γ₀N ∂f/∂h^ℓ`.
pub fn backward_true(params: &Params, fwd: &ForwardState) -> Vec<DMatrix<f64>> {
    backpropagate(&fwd.slopes, &params.readout, &params.hidden)
}

/// Rule-specific pseudo-gradients `g̃^ℓ`. Node perturbation is handled by
/// [`node_perturb_estimate`].
pub fn pseudo_gradients(
    params: &Params,
    fwd: &ForwardState,
    g: &[DMatrix<f64>],
    delta: &DVector<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    match (&params.rule, &params.feedback) {
        (Rule::Gd, _) | (Rule::Gln, _) => Ok(g.to_vec()),
        (Rule::RhoFa { .. }, Feedback::RhoFa { hidden, readout }) => {
            Ok(backpropagate(&fwd.slopes, readout, hidden))
        }
        (Rule::Dfa, Feedback::Dfa { vectors }) => Ok(fwd
            .slopes
            .iter()
            .zip(vectors)
            .map(|(s, z)| DMatrix::from_fn(s.nrows(), s.ncols(), |i, mu| s[(i, mu)] * z[i]))
            .collect()),
        (Rule::Hebb, _) => {
            if delta.len() != fwd.output.len() {
                return Err(Error::Shape("error vector length differs from sample count".into()));
            }
            Ok(fwd
                .features
                .iter()
                .map(|f| {
                    let mut out = f.clone();
                    for (mut col, d) in out.column_iter_mut().zip(delta.iter()) {
                        col *= *d;
                    }
                    out
                })
                .collect())
        }
        (Rule::NodePerturb { .. }, _) => Err(Error::Domain(
            "node perturbation pseudo-gradients come from node_perturb_estimate".into(),
        )),
        (rule, _) => Err(Error::Domain(format!(
            "parameters were not initialized for rule {}",
            rule.name()
        ))),
    }
}

/// Central-difference node-perturbation estimate of `g^ℓ` for every layer:
/// `ĝ = γ₀N/(σK) Σ_k ξ_k (f(h+σξ_k) − f(h−σξ_k))/2` with `ξ_k ~ N(0, I)`.
pub fn node_perturb_estimate<R: Rng>(
    params: &Params,
    fwd: &ForwardState,
    count: usize,
    scale: f64,
    rng: &mut R,
) -> Result<Vec<DMatrix<f64>>> {
    if count == 0 || !(scale > 0.0) {
        return Err(Error::Domain("node perturbation needs K >= 1 and sigma > 0".into()));
    }
    let (n, p) = fwd.pre[0].shape();
    let norm = params.gamma0 * n as f64 / (scale * count as f64);
    let mut xi = DVector::zeros(n);
    let mut out = Vec::with_capacity(fwd.pre.len());
    for (layer, h) in fwd.pre.iter().enumerate() {
        let mut est = DMatrix::zeros(n, p);
        for mu in 0..p {
            let base = h.column(mu).into_owned();
            let mut col = DVector::zeros(n);
            for _ in 0..count {
                rng::fill_normal(rng, xi.as_mut_slice());
                let plus = output_from_layer(params, fwd, layer, mu, &(&base + &xi * scale));
                let minus = output_from_layer(params, fwd, layer, mu, &(&base - &xi * scale));
                col.axpy(0.5 * (plus - minus), &xi, 1.0);
            }
            est.set_column(mu, &(col * norm));
        }
        out.push(est);
    }
    Ok(out)
}

/// One explicit Euler step of all trainable weights.
fn apply_update(
    params: &mut Params,
    fwd: &ForwardState,
    gtilde: &[DMatrix<f64>],
    delta: &DVector<f64>,
    inputs: &DMatrix<f64>,
    dt: f64,
) {
    let l = params.depth();
    let (n, d) = params.input.shape();
    let gamma = params.gamma0;
    let scaled = |m: &DMatrix<f64>| {
        let mut out = m.clone();
        for (mut col, dl) in out.column_iter_mut().zip(delta.iter()) {
            col *= *dl;
        }
        out
    };
    let readout_step = &fwd.features[l - 1] * delta;
    params.readout.axpy(dt * gamma, &readout_step, 1.0);
    for i in 0..l - 1 {
        let left = scaled(&gtilde[i + 1]);
        params.hidden[i].gemm(gamma * dt / (n as f64).sqrt(), &left, &fwd.features[i].transpose(), 1.0);
    }
    let left = scaled(&gtilde[0]);
    params.input.gemm(gamma * dt / (d as f64).sqrt(), &left, inputs, 1.0);
}

/// Equal-time kernels measured at one step, index `ℓ−1`.
#[derive(Clone, Debug)]
pub struct MeasuredKernels {
    pub phi: Vec<DMatrix<f64>>,
    pub g: Vec<DMatrix<f64>>,
    pub gtilde: Vec<DMatrix<f64>>,
    pub entk: DMatrix<f64>,
}

/// `(1/N) AᵀB` for `N × P` matrices.
fn overlap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.tr_mul(b) / a.nrows() as f64
}

pub fn measure_kernels(
    input_kernel: &DMatrix<f64>,
    fwd: &ForwardState,
    g: &[DMatrix<f64>],
    gtilde: &[DMatrix<f64>],
) -> Result<MeasuredKernels> {
    let phi: Vec<_> = fwd.features.iter().map(|f| overlap(f, f)).collect();
    let gg: Vec<_> = g.iter().map(|x| overlap(x, x)).collect();
    let gt: Vec<_> = g.iter().zip(gtilde).map(|(a, b)| overlap(a, b)).collect();
    let entk = entk_from_layers(input_kernel, &phi, &gt)?;
    Ok(MeasuredKernels {
        phi,
        g: gg,
        gtilde: gt,
        entk,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    /// Subtract each sample's initial output so that `f(0) = 0`, as in the
    /// infinite-width limit. Gradients and kernels are unaffected.
    #[serde(default = "default_center")]
    pub center_output: bool,
    /// Keep every step's fields and build full two-time kernels.
    #[serde(default)]
    pub two_time: bool,
    /// Abort once the loss exceeds this value.
    #[serde(default = "default_divergence_limit")]
    pub divergence_limit: f64,
}

fn default_center() -> bool {
    true
}

fn default_divergence_limit() -> f64 {
    1e6
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            center_output: true,
            two_time: false,
            divergence_limit: 1e6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainTrace {
    pub rule: Rule,
    pub times: Vec<f64>,
    pub targets: DVector<f64>,
    /// `P × T`.
    pub predictions: DMatrix<f64>,
    /// `P × T`, `y − f`.
    pub errors: DMatrix<f64>,
    /// Equal-time kernels at every grid point.
    pub kernels: Vec<MeasuredKernels>,
    pub alignment: Vec<f64>,
    pub correlation: Vec<CorrelationReport>,
    /// Two-time kernels over the whole grid, if requested.
    pub two_time: Option<KernelSet>,
    /// Preactivations `h^ℓ` after the last step.
    pub final_preactivations: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub time: f64,
    pub loss: f64,
    pub alignment: f64,
    pub corr_g_gtilde: f64,
}

impl TrainTrace {
    pub fn loss(&self) -> Vec<f64> {
        self.errors
            .column_iter()
            .map(|c| 0.5 * c.norm_squared())
            .collect()
    }

    pub fn rows(&self) -> Vec<TraceRow> {
        self.loss()
            .into_iter()
            .enumerate()
            .map(|(k, loss)| TraceRow {
                step: k,
                time: self.times[k],
                loss,
                alignment: self.alignment[k],
                corr_g_gtilde: self.correlation[k].mean,
            })
            .collect()
    }

    /// `y·Φ^ℓ(t,t)·y / |y|²` per step, for layer `layer` (1-based).
    pub fn projected_phi(&self, layer: usize) -> Vec<f64> {
        let y = &self.targets;
        let yy = y.norm_squared();
        self.kernels
            .iter()
            .map(|k| y.dot(&(&k.phi[layer - 1] * y)) / yy)
            .collect()
    }

    /// Same projection for `G̃^ℓ(t,t)`.
    pub fn projected_gtilde(&self, layer: usize) -> Vec<f64> {
        let y = &self.targets;
        let yy = y.norm_squared();
        self.kernels
            .iter()
            .map(|k| y.dot(&(&k.gtilde[layer - 1] * y)) / yy)
            .collect()
    }
}

/// Stacks per-step `N × P` fields into `N × (P·T)` with time-major columns.
struct FieldHistory {
    phi: Vec<DMatrix<f64>>,
    g: Vec<DMatrix<f64>>,
    gtilde: Vec<DMatrix<f64>>,
}

impl FieldHistory {
    fn new(l: usize, n: usize, p: usize, t: usize) -> Self {
        let z = || vec![DMatrix::zeros(n, p * t); l];
        FieldHistory {
            phi: z(),
            g: z(),
            gtilde: z(),
        }
    }

    fn record(&mut self, k: usize, fwd: &ForwardState, g: &[DMatrix<f64>], gt: &[DMatrix<f64>]) {
        let p = fwd.output.len();
        for i in 0..self.phi.len() {
            self.phi[i].columns_mut(k * p, p).copy_from(&fwd.features[i]);
            self.g[i].columns_mut(k * p, p).copy_from(&g[i]);
            self.gtilde[i].columns_mut(k * p, p).copy_from(&gt[i]);
        }
    }

    fn kernels(&self, input_kernel: &DMatrix<f64>, p: usize, t: usize) -> Result<KernelSet> {
        let two = |a: &DMatrix<f64>, b: &DMatrix<f64>| TwoTime::from_flat(p, t, overlap(a, b));
        let mut ks = KernelSet {
            input_kernel: input_kernel.clone(),
            phi: Vec::new(),
            g: Vec::new(),
            gtilde: Vec::new(),
            gtildetilde: Vec::new(),
        };
        for i in 0..self.phi.len() {
            ks.phi.push(two(&self.phi[i], &self.phi[i])?);
            ks.g.push(two(&self.g[i], &self.g[i])?);
            ks.gtilde.push(two(&self.g[i], &self.gtilde[i])?);
            ks.gtildetilde.push(two(&self.gtilde[i], &self.gtilde[i])?);
        }
        Ok(ks)
    }
}

/// Trains `params` in place on `data` over `grid.steps` grid points
/// (`steps − 1` Euler updates). Node-perturbation noise is drawn from the
/// stream `(seed, NODE_PERTURB, step)`.
pub fn train(params: &mut Params, data: &Dataset, grid: &TimeGrid, opts: &TrainOptions) -> Result<TrainTrace> {
    grid.validate()?;
    let x = data.inputs();
    let y = data.targets();
    let (p, t) = (data.len(), grid.steps);
    let l = params.depth();
    let n = params.width();

    let offset = if opts.center_output {
        forward(params, x)?.output
    } else {
        DVector::zeros(p)
    };
    let mut predictions = DMatrix::zeros(p, t);
    let mut errors = DMatrix::zeros(p, t);
    let mut kernels = Vec::with_capacity(t);
    let mut alignment = Vec::with_capacity(t);
    let mut correlation = Vec::with_capacity(t);
    let mut history = opts.two_time.then(|| FieldHistory::new(l, n, p, t));
    let mut final_pre = Vec::new();

    for k in 0..t {
        let fwd = forward(params, x)?;
        let f = &fwd.output - &offset;
        let delta = y - &f;
        let loss = 0.5 * delta.norm_squared();
        if !loss.is_finite() || loss > opts.divergence_limit {
            return Err(Error::Diverged { step: k, loss });
        }
        let g = backward_true(params, &fwd);
        let gt = match params.rule {
            Rule::NodePerturb { count, scale } => {
                let mut r = rng::stream(params.seed, &[tag::NODE_PERTURB, k as u64]);
                node_perturb_estimate(params, &fwd, count, scale, &mut r)?
            }
            _ => pseudo_gradients(params, &fwd, &g, &delta)?,
        };
        let measured = measure_kernels(data.input_kernel(), &fwd, &g, &gt)?;
        alignment.push(kernel_task_alignment(&measured.entk, y).unwrap_or(f64::NAN));
        correlation.push(grad_pseudograd_correlation(&g, &gt)?);
        kernels.push(measured);
        predictions.set_column(k, &f);
        errors.set_column(k, &delta);
        if let Some(h) = history.as_mut() {
            h.record(k, &fwd, &g, &gt);
        }
        if k + 1 < t {
            apply_update(params, &fwd, &gt, &delta, x, grid.dt);
        } else {
            final_pre = fwd.pre;
        }
    }

    let two_time = match history {
        Some(h) => Some(h.kernels(data.input_kernel(), p, t)?),
        None => None,
    };
    Ok(TrainTrace {
        rule: params.rule,
        times: grid.times(),
        targets: y.clone(),
        predictions,
        errors,
        kernels,
        alignment,
        correlation,
        two_time,
        final_preactivations: final_pre,
    })
}

#[derive(Clone, Debug)]
pub struct NodePerturbReport {
    pub gradient: Vec<DMatrix<f64>>,
    pub estimate: Vec<DMatrix<f64>>,
    /// `‖g^ℓ‖ / ‖ĝ^ℓ − g^ℓ‖` per layer, over all samples.
    pub snr: Vec<f64>,
}

/// Single node-perturbation training step with `Δ = y − f` (uncentered).
pub fn node_perturb_step<R: Rng>(
    params: &mut Params,
    data: &Dataset,
    count: usize,
    scale: f64,
    dt: f64,
    rng: &mut R,
) -> Result<NodePerturbReport> {
    let fwd = forward(params, data.inputs())?;
    let delta = data.targets() - &fwd.output;
    let gradient = backward_true(params, &fwd);
    let estimate = node_perturb_estimate(params, &fwd, count, scale, rng)?;
    let snr = gradient
        .iter()
        .zip(&estimate)
        .map(|(g, e)| g.norm() / (e - g).norm())
        .collect();
    apply_update(params, &fwd, &estimate, &delta, data.inputs(), dt);
    Ok(NodePerturbReport {
        gradient,
        estimate,
        snr,
    })
}

/// Seed of replicate `r` under a master seed.
pub fn replicate_seed(seed: u64, r: u64) -> u64 {
    rng::stream(seed, &[tag::ENSEMBLE, r]).random()
}

/// Independent networks trained in parallel; replicate `r` uses
/// [`replicate_seed`]`(config.seed, r)`. Output order follows `r`.
pub fn train_ensemble(
    config: &NetworkConfig,
    rule: &Rule,
    data: &Dataset,
    grid: &TimeGrid,
    opts: &TrainOptions,
    replicates: usize,
) -> Result<Vec<TrainTrace>> {
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut cfg = config.clone();
            cfg.seed = replicate_seed(config.seed, r as u64);
            let mut params = init_network(&cfg, rule, data.input_dim())?;
            train(&mut params, data, grid, opts)
        })
        .collect()
}
