//! O(1/N) fluctuations of kernels across random initializations.
//!
//! For a single input with `K^x = 1`, the layer kernels `Φ^ℓ` perform a
//! random walk in depth: `Cov(Φ^ℓ, Φ^ℓ') = V_φ min(ℓ, ℓ')/N`, and the gradient
//! kernels walk backwards, `Cov(G^ℓ, G^ℓ') = V_g min(L+1−ℓ, L+1−ℓ')/N`. The
//! ensemble estimators here measure those covariances on actual networks,
//! and the width sweeps measure how finite-width eNTKs approach their
//! infinite-width references.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::finite_width::{backward_true, forward, init_network, train, TrainOptions};
use crate::lazy::{lazy_entk, lazy_stack};
use crate::linalg::{loglog_fit, LineFit};
use crate::model::{entk_equal_time, Dataset, KernelSet, NetworkConfig, Rule, TimeGrid};
use crate::rng::{self, tag};
use rand::Rng;

/// `(V_φ, V_g)` for the single-sample `K^x = 1` case.
pub fn nlo_constants(act: Activation) -> Result<(f64, f64)> {
    match act {
        // ⟨h⁴⟩ − 1 with h ~ N(0,1)
        Activation::Linear => Ok((2.0, 2.0)),
        // ⟨φ⁴⟩ − 1 = 4·3/2 − 1 for φ = √2·max(h,0)
        Activation::Relu => Ok((5.0, 5.0)),
        Activation::Tanh => Err(Error::Domain(
            "closed-form fluctuation constants exist only for linear and relu".into(),
        )),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NloPrediction {
    pub v_phi: f64,
    pub v_g: f64,
    /// `L × L`, index `ℓ−1`.
    #[serde(serialize_with = "ser_matrix")]
    pub cov_phi: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub cov_g: DMatrix<f64>,
    pub width: usize,
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    crate::tensor::matrix_json(m).serialize(s)
}

pub fn nlo_prediction(act: Activation, depth: usize, width: usize) -> Result<NloPrediction> {
    if depth == 0 || width == 0 {
        return Err(Error::Domain("depth and width must be >= 1".into()));
    }
    let (v_phi, v_g) = nlo_constants(act)?;
    let n = width as f64;
    let top = depth + 1;
    Ok(NloPrediction {
        v_phi,
        v_g,
        cov_phi: DMatrix::from_fn(depth, depth, |i, j| v_phi * (i.min(j) + 1) as f64 / n),
        cov_g: DMatrix::from_fn(depth, depth, |i, j| v_g * (top - 1 - i.max(j)) as f64 / n),
        width,
    })
}

/// Scalar per-layer kernels `Φ^ℓ`, `G^ℓ` of one network at initialization.
#[derive(Clone, Debug)]
pub struct KernelSample {
    pub phi: DVector<f64>,
    pub g: DVector<f64>,
}

/// Measures `R` independently initialized networks on the single input
/// `x = [1]`. Replicate `r` draws its weights from
/// `replicate_seed(config.seed, r)`.
pub fn ensemble_samples(config: &NetworkConfig, replicates: usize) -> Result<Vec<KernelSample>> {
    config.validate()?;
    let x = DMatrix::from_element(1, 1, 1.0);
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut cfg = config.clone();
            cfg.seed = crate::finite_width::replicate_seed(config.seed, r as u64);
            let params = init_network(&cfg, &Rule::Gd, 1)?;
            let fwd = forward(&params, &x)?;
            let g = backward_true(&params, &fwd);
            let n = cfg.width as f64;
            Ok(KernelSample {
                phi: DVector::from_iterator(
                    fwd.features.len(),
                    fwd.features.iter().map(|f| f.norm_squared() / n),
                ),
                g: DVector::from_iterator(g.len(), g.iter().map(|v| v.norm_squared() / n)),
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct EnsembleCovariance {
    #[serde(serialize_with = "ser_matrix")]
    pub cov_phi: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub cov_g: DMatrix<f64>,
    /// Standard errors of the entries, from the spread of the centered
    /// products.
    #[serde(serialize_with = "ser_matrix")]
    pub se_phi: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub se_g: DMatrix<f64>,
    pub replicates: usize,
    pub width: usize,
}

/// `R × L` sample matrix to (sample covariance, standard errors).
fn covariance_with_errors(rows: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let r = rows.nrows();
    let l = rows.ncols();
    let rf = r as f64;
    let mean = rows.row_mean();
    let centered = DMatrix::from_fn(r, l, |i, j| rows[(i, j)] - mean[j]);
    let cov = centered.tr_mul(&centered) / (rf - 1.0);
    let se = DMatrix::from_fn(l, l, |a, b| {
        let prods = centered.column(a).component_mul(&centered.column(b));
        let m = prods.sum() / rf;
        let var = prods.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (rf - 1.0);
        (var / rf).sqrt()
    });
    (cov, se)
}

fn stack_rows(samples: &[KernelSample], pick: impl Fn(&KernelSample) -> &DVector<f64>) -> DMatrix<f64> {
    let l = pick(&samples[0]).len();
    DMatrix::from_fn(samples.len(), l, |i, j| pick(&samples[i])[j])
}

pub fn covariance_from_samples(samples: &[KernelSample], width: usize) -> Result<EnsembleCovariance> {
    if samples.len() < 2 {
        return Err(Error::Domain("covariance needs at least 2 replicates".into()));
    }
    let (cov_phi, se_phi) = covariance_with_errors(&stack_rows(samples, |s| &s.phi));
    let (cov_g, se_g) = covariance_with_errors(&stack_rows(samples, |s| &s.g));
    Ok(EnsembleCovariance {
        cov_phi,
        cov_g,
        se_phi,
        se_g,
        replicates: samples.len(),
        width,
    })
}

pub fn ensemble_kernel_covariance(config: &NetworkConfig, replicates: usize) -> Result<EnsembleCovariance> {
    if replicates < 2 {
        return Err(Error::Domain("covariance needs at least 2 replicates".into()));
    }
    let samples = ensemble_samples(config, replicates)?;
    covariance_from_samples(&samples, config.width)
}

/// Relative Frobenius distance between an ensemble estimate and the
/// prediction, over both covariance matrices.
pub fn nlo_discrepancy(est: &EnsembleCovariance, pred: &NloPrediction) -> f64 {
    let num = (&est.cov_phi - &pred.cov_phi).norm_squared() + (&est.cov_g - &pred.cov_g).norm_squared();
    let den = pred.cov_phi.norm_squared() + pred.cov_g.norm_squared();
    (num / den).sqrt()
}

#[derive(Clone, Debug, Serialize)]
pub struct BrownianTest {
    pub statistic: f64,
    pub dof: usize,
    /// Upper 5% point of χ²(dof).
    pub critical: f64,
    pub consistent: bool,
}

/// Upper 5% quantile of χ²(k), Wilson-Hilferty approximation.
pub fn chi2_upper_5pct(k: usize) -> f64 {
    let k = k as f64;
    let a = 2.0 / (9.0 * k);
    k * (1.0 - a + 1.644_853_626_951_472_2 * a.sqrt()).powi(3)
}

/// Tests that `Cov(Φ^ℓ, Φ^ℓ')` does not change along a row once `ℓ' ≥ ℓ`.
/// The statistic is the Mahalanobis norm of all row increments
/// `Cov(Φ^ℓ, Φ^{ℓ'+1}) − Cov(Φ^ℓ, Φ^ℓ')`, using the joint covariance of
/// their per-replicate estimators.
pub fn brownian_consistency(samples: &[KernelSample]) -> Result<BrownianTest> {
    let rows = stack_rows(samples, |s| &s.phi);
    let (r, l) = rows.shape();
    if l < 2 {
        return Err(Error::Domain("row structure needs depth >= 2".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..l).flat_map(|a| (a..l - 1).map(move |b| (a, b))).collect();
    if r <= pairs.len() + 1 {
        return Err(Error::Domain(format!(
            "need more than {} replicates for depth {l}",
            pairs.len() + 1
        )));
    }
    let mean = rows.row_mean();
    let contrib = DMatrix::from_fn(r, pairs.len(), |i, k| {
        let (a, b) = pairs[k];
        (rows[(i, a)] - mean[a]) * (rows[(i, b + 1)] - rows[(i, b)] - mean[b + 1] + mean[b])
    });
    let m = contrib.row_mean();
    let centered = DMatrix::from_fn(r, pairs.len(), |i, k| contrib[(i, k)] - m[k]);
    let cov_of_mean = centered.tr_mul(&centered) / ((r - 1) as f64 * r as f64);
    let ch = cov_of_mean
        .cholesky()
        .ok_or_else(|| Error::Domain("increment covariance is singular".into()))?;
    let mt = m.transpose();
    let statistic = mt.dot(&ch.solve(&mt));
    let dof = pairs.len();
    let critical = chi2_upper_5pct(dof);
    Ok(BrownianTest {
        statistic,
        dof,
        critical,
        consistent: statistic <= critical,
    })
}

/// Log-log slope of `errors` against `widths`. Requires at least 4 widths
/// spanning a factor of 8 or more.
pub fn width_scaling_fit(widths: &[f64], errors: &[f64]) -> Result<LineFit> {
    if widths.len() != errors.len() {
        return Err(Error::Shape("widths and errors differ in length".into()));
    }
    if widths.len() < 4 {
        return Err(Error::Domain("width fit needs at least 4 widths".into()));
    }
    let lo = widths.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = widths.iter().cloned().fold(0.0, f64::max);
    if !(lo > 0.0) || hi < 8.0 * lo {
        return Err(Error::Domain("widths must be positive and span at least 8x".into()));
    }
    loglog_fit(widths, errors)
}

#[derive(Clone, Debug, Serialize)]
pub struct WidthPoint {
    pub width: usize,
    /// Mean over replicates of the relative squared eNTK error.
    pub mean_sq_error: f64,
    pub stderr: f64,
    pub replicates: usize,
}

fn sweep_seed(seed: u64, width: usize, r: usize) -> u64 {
    rng::stream(seed, &[tag::ENSEMBLE, width as u64, r as u64]).random()
}

fn summarize(width: usize, errs: Vec<f64>) -> WidthPoint {
    let r = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / r;
    let var = if errs.len() > 1 {
        errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (r - 1.0)
    } else {
        0.0
    };
    WidthPoint {
        width,
        mean_sq_error: mean,
        stderr: (var / r).sqrt(),
        replicates: errs.len(),
    }
}

fn check_sweep(widths: &[usize], replicates: usize) -> Result<()> {
    if widths.is_empty() || replicates == 0 {
        return Err(Error::Domain("sweep needs at least one width and one replicate".into()));
    }
    Ok(())
}

/// `|K_N(0) − K_∞|²_F / |K_∞|²_F` at initialization, averaged over replicates,
/// per width. `template` supplies depth, activation, γ₀ and master seed.
pub fn lazy_width_sweep(
    data: &Dataset,
    template: &NetworkConfig,
    rule: &Rule,
    widths: &[usize],
    replicates: usize,
) -> Result<Vec<WidthPoint>> {
    check_sweep(widths, replicates)?;
    let stack = lazy_stack(data.input_kernel(), template.depth, template.activation)?;
    let reference = lazy_entk(rule, &stack)?;
    let scale = reference.norm_squared();
    let grid = TimeGrid::new(1, 1.0)?;
    let opts = TrainOptions::default();
    widths
        .iter()
        .map(|&n| {
            let errs = (0..replicates)
                .into_par_iter()
                .map(|r| {
                    let cfg = NetworkConfig {
                        width: n,
                        seed: sweep_seed(template.seed, n, r),
                        ..template.clone()
                    };
                    let mut params = init_network(&cfg, rule, data.input_dim())?;
                    let trace = train(&mut params, data, &grid, &opts)?;
                    Ok((&trace.kernels[0].entk - &reference).norm_squared() / scale)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(summarize(n, errs))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerErrorRow {
    pub width: usize,
    pub layer: usize,
    /// Replicate mean of `|Φ^ℓ_N − Φ^ℓ_∞|²_F / |Φ^ℓ_∞|²_F`.
    pub phi_error: f64,
    pub g_error: f64,
}

/// Per-layer relative squared errors of the initial `Φ^ℓ` and `G^ℓ` of
/// width-N networks against their infinite-width values.
pub fn lazy_layer_error_sweep(
    data: &Dataset,
    template: &NetworkConfig,
    widths: &[usize],
    replicates: usize,
) -> Result<Vec<LayerErrorRow>> {
    check_sweep(widths, replicates)?;
    let l = template.depth;
    let stack = lazy_stack(data.input_kernel(), l, template.activation)?;
    let grid = TimeGrid::new(1, 1.0)?;
    let opts = TrainOptions::default();
    let mut rows = Vec::with_capacity(widths.len() * l);
    for &n in widths {
        let per_rep = (0..replicates)
            .into_par_iter()
            .map(|r| {
                let cfg = NetworkConfig {
                    width: n,
                    seed: sweep_seed(template.seed, n, r),
                    ..template.clone()
                };
                let mut params = init_network(&cfg, &Rule::Gd, data.input_dim())?;
                let k = train(&mut params, data, &grid, &opts)?.kernels.swap_remove(0);
                Ok((0..l)
                    .map(|i| {
                        let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).norm_squared() / b.norm_squared();
                        (rel(&k.phi[i], &stack.phi[i + 1]), rel(&k.g[i], &stack.g[i]))
                    })
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        for i in 0..l {
            let rf = replicates as f64;
            rows.push(LayerErrorRow {
                width: n,
                layer: i + 1,
                phi_error: per_rep.iter().map(|v| v[i].0).sum::<f64>() / rf,
                g_error: per_rep.iter().map(|v| v[i].1).sum::<f64>() / rf,
            });
        }
    }
    Ok(rows)
}

/// Dynamical eNTK deviation `⟨|K_N(t) − K_∞(t)|²⟩_t / ⟨|K_∞(t)|²⟩_t` along
/// training, against a mean-field reference on the same grid.
pub fn rich_width_sweep(
    data: &Dataset,
    template: &NetworkConfig,
    rule: &Rule,
    grid: &TimeGrid,
    reference: &KernelSet,
    widths: &[usize],
    replicates: usize,
) -> Result<Vec<WidthPoint>> {
    check_sweep(widths, replicates)?;
    let (p, t) = reference.check()?;
    if p != data.len() || t != grid.steps {
        return Err(Error::Shape("reference kernels do not match data and grid".into()));
    }
    let ref_k: Vec<DMatrix<f64>> = (0..t).map(|k| entk_equal_time(reference, k)).collect();
    let scale = ref_k.iter().map(|k| k.norm_squared()).sum::<f64>();
    let opts = TrainOptions::default();
    widths
        .iter()
        .map(|&n| {
            let errs = (0..replicates)
                .into_par_iter()
                .map(|r| {
                    let cfg = NetworkConfig {
                        width: n,
                        seed: sweep_seed(template.seed, n, r),
                        ..template.clone()
                    };
                    let mut params = init_network(&cfg, rule, data.input_dim())?;
                    let trace = train(&mut params, data, grid, &opts)?;
                    let num: f64 = trace
                        .kernels
                        .iter()
                        .zip(&ref_k)
                        .map(|(m, k)| (&m.entk - k).norm_squared())
                        .sum();
                    Ok(num / scale)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(summarize(n, errs))
        })
        .collect()
}

/// Convenience: fit of a sweep's mean squared errors.
pub fn sweep_fit(points: &[WidthPoint]) -> Result<LineFit> {
    let w: Vec<f64> = points.iter().map(|p| p.width as f64).collect();
    let e: Vec<f64> = points.iter().map(|p| p.mean_sq_error).collect();
    width_scaling_fit(&w, &e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(depth: usize, width: usize, act: Activation, seed: u64) -> NetworkConfig {
        NetworkConfig {
            depth,
            width,
            gamma0: 1.0,
            activation: act,
            seed,
        }
    }

    #[test]
    fn constants() {
        assert_eq!(nlo_constants(Activation::Linear).unwrap(), (2.0, 2.0));
        assert_eq!(nlo_constants(Activation::Relu).unwrap(), (5.0, 5.0));
        assert!(matches!(nlo_constants(Activation::Tanh), Err(Error::Domain(_))));
    }

    #[test]
    fn relu_fourth_moment_by_monte_carlo() {
        let mut g = rng::stream(3, &[tag::ORACLE]);
        let n = 10_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += Activation::Relu.phi(rng::normal(&mut g)).powi(4);
        }
        let v = acc / n as f64 - 1.0;
        assert!((v - 5.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn prediction_has_brownian_structure() {
        let p = nlo_prediction(Activation::Linear, 3, 100).unwrap();
        assert!((p.cov_phi[(2, 2)] - 0.06).abs() < 1e-15);
        assert!((p.cov_phi[(0, 2)] - 0.02).abs() < 1e-15);
        assert!((p.cov_g[(2, 2)] - 0.02).abs() < 1e-15);
        assert!((p.cov_g[(0, 0)] - 0.06).abs() < 1e-15);
        assert_eq!(p.cov_phi, p.cov_phi.transpose());
        assert_eq!(p.cov_g, p.cov_g.transpose());
    }

    #[test]
    fn too_few_replicates_rejected() {
        let c = net(2, 8, Activation::Relu, 1);
        assert!(matches!(ensemble_kernel_covariance(&c, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn linear_depth_three_variance() {
        let c = net(3, 256, Activation::Linear, 11);
        let est = ensemble_kernel_covariance(&c, 2000).unwrap();
        let pred = nlo_prediction(Activation::Linear, 3, 256).unwrap();
        let v = est.cov_phi[(2, 2)];
        // 6/N plus O(1/N²)
        assert!((v - pred.cov_phi[(2, 2)]).abs() < 3.0 * est.se_phi[(2, 2)] + 0.05 * v, "{v}");
        assert_eq!(est.cov_phi, est.cov_phi.transpose());
        for l in 1..3 {
            assert!(est.cov_phi[(l, l)] >= est.cov_phi[(l - 1, l - 1)]);
            assert!(est.cov_g[(l, l)] <= est.cov_g[(l - 1, l - 1)]);
        }
    }

    #[test]
    fn relu_rows_pass_brownian_test() {
        let c = net(4, 128, Activation::Relu, 5);
        let samples = ensemble_samples(&c, 1000).unwrap();
        let t = brownian_consistency(&samples).unwrap();
        assert_eq!(t.dof, 6);
        assert!(t.consistent, "{t:?}");
    }

    #[test]
    fn chi2_quantile_matches_tables() {
        assert!((chi2_upper_5pct(10) - 18.307).abs() < 0.05);
        assert!((chi2_upper_5pct(45) - 61.656).abs() < 0.05);
    }

    #[test]
    fn width_fit_preconditions() {
        let w = [64.0, 128.0, 256.0, 512.0];
        let e: Vec<f64> = w.iter().map(|n| 2.5 / n).collect();
        let f = width_scaling_fit(&w, &e).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-6);
        assert!(width_scaling_fit(&w[..3], &e[..3]).is_err());
        assert!(width_scaling_fit(&[64.0, 128.0, 256.0, 500.0], &e).is_err());
        assert!(width_scaling_fit(&w, &[1.0, -1.0, 1.0, 1.0]).is_err());
    }
}
