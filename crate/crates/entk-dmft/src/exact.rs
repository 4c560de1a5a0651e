//! Two-layer linear network on whitened data: reduced ODEs for GD, ρ-FA and
//! error-modulated Hebb, their fixed points and richness scaling.
//!
//! Quantities are projected on the target direction: `Δ = ŷ·Δ`,
//! `H_y = yᵀHy/|y|²`, and `a = γ₀∫Δ dt` is the overlap of the pseudo-gradient
//! with the hidden field.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{kernel_task_alignment, TimeGrid};

/// Time constant of the GD error ODE `dΔ/dt = −c·H_y·Δ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GdOdeForm {
    /// `c = 2`: both layers contribute `H_y` to the projected eNTK.
    #[default]
    TwoLayer,
    /// `c = 1`: the single-`H_y` form.
    SingleKernel,
}

impl GdOdeForm {
    pub fn factor(self) -> f64 {
        match self {
            GdOdeForm::TwoLayer => 2.0,
            GdOdeForm::SingleKernel => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TwoLayerTrajectory {
    pub times: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub h_y: Vec<f64>,
    pub gtilde: Vec<f64>,
}

impl TwoLayerTrajectory {
    fn with_capacity(n: usize) -> Self {
        TwoLayerTrajectory {
            times: Vec::with_capacity(n),
            delta: Vec::with_capacity(n),
            a: Vec::with_capacity(n),
            h_y: Vec::with_capacity(n),
            gtilde: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_h_y(&self) -> f64 {
        *self.h_y.last().unwrap()
    }
}

/// Classic fixed-step RK4 step for an autonomous system.
fn rk4_step<const D: usize>(x: [f64; D], h: f64, f: &impl Fn(&[f64; D]) -> [f64; D]) -> [f64; D] {
    let add = |a: &[f64; D], b: &[f64; D], s: f64| -> [f64; D] {
        let mut o = *a;
        for i in 0..D {
            o[i] += s * b[i];
        }
        o
    };
    let k1 = f(&x);
    let k2 = f(&add(&x, &k1, 0.5 * h));
    let k3 = f(&add(&x, &k2, 0.5 * h));
    let k4 = f(&add(&x, &k3, h));
    let mut o = x;
    for i in 0..D {
        o[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    o
}

/// Integrate over the grid, splitting each interval so that `h·rate ≤ 0.1`
/// for the local stiffness estimate `rate(x)`.
fn integrate<const D: usize>(
    x0: [f64; D],
    grid: &TimeGrid,
    f: impl Fn(&[f64; D]) -> [f64; D],
    rate: impl Fn(&[f64; D]) -> f64,
    mut record: impl FnMut(usize, &[f64; D]),
) -> Result<()> {
    grid.validate()?;
    let mut x = x0;
    record(0, &x);
    for k in 1..grid.steps {
        let sub = ((grid.dt * rate(&x).abs()) / 0.1).ceil().max(1.0) as usize;
        let h = grid.dt / sub as f64;
        for _ in 0..sub {
            x = rk4_step(x, h, &f);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: 1, step: k });
        }
        record(k, &x);
    }
    Ok(())
}

fn check_gamma(gamma0: f64) -> Result<()> {
    if !(gamma0 > 0.0 && gamma0.is_finite()) {
        return Err(Error::Domain("gamma0 must be finite and > 0".into()));
    }
    Ok(())
}

/// `H_y(∞) = √(1 + γ₀²y²)`.
pub fn gd_fixed_point(gamma0: f64, y: f64) -> f64 {
    (1.0 + gamma0 * gamma0 * y * y).sqrt()
}

/// GD: `dΔ/dt = −c·√(1+γ₀²(y−Δ)²)·Δ`, `H_y = G̃ = √(1+γ₀²(y−Δ)²)`.
pub fn solve_gd(gamma0: f64, y: f64, grid: &TimeGrid, form: GdOdeForm) -> Result<TwoLayerTrajectory> {
    check_gamma(gamma0)?;
    let c = form.factor();
    let hy = move |d: f64| (1.0 + gamma0 * gamma0 * (y - d).powi(2)).sqrt();
    let mut out = TwoLayerTrajectory::with_capacity(grid.steps);
    integrate(
        [y, 0.0],
        grid,
        |x| [-c * hy(x[0]) * x[0], gamma0 * x[0]],
        |x| c * hy(x[0]),
        |k, x| {
            out.times.push(grid.time(k));
            out.delta.push(x[0]);
            out.a.push(x[1]);
            out.h_y.push(hy(x[0]));
            out.gtilde.push(hy(x[0]));
        },
    )?;
    Ok(out)
}

/// Unreduced GD system `dΔ/dt = −cHΔ`, `dH/dt = cγ₀²(y−Δ)Δ`; returns
/// `(Δ, H)` on the grid. Used to check the conservation law
/// `H² − γ₀²(y−Δ)² = 1`.
pub fn solve_gd_unreduced(gamma0: f64, y: f64, grid: &TimeGrid, form: GdOdeForm) -> Result<(Vec<f64>, Vec<f64>)> {
    check_gamma(gamma0)?;
    let c = form.factor();
    let mut d = Vec::with_capacity(grid.steps);
    let mut h = Vec::with_capacity(grid.steps);
    integrate(
        [y, 1.0],
        grid,
        |x| [-c * x[1] * x[0], c * gamma0 * gamma0 * (y - x[0]) * x[0]],
        |x| c * x[1],
        |_, x| {
            d.push(x[0]);
            h.push(x[1]);
        },
    )?;
    Ok((d, h))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FaSolution {
    pub trajectory: TwoLayerTrajectory,
    /// Fixed point of `da/dt = γ₀y − ½a³ − (1+ρ)a`.
    pub a_star: f64,
    pub h_y_inf: f64,
    pub gtilde_inf: f64,
}

/// Root of `½a³ + (1+ρ)a = γ₀y` with the sign of `y`. Newton from the
/// linear guess, falling back to bisection on `[0, (2γ₀|y|)^{1/3} + γ₀|y|]`.
pub fn fa_fixed_point(gamma0: f64, rho: f64, y: f64) -> f64 {
    let target = gamma0 * y.abs();
    if target == 0.0 {
        return 0.0;
    }
    let f = |a: f64| 0.5 * a * a * a + (1.0 + rho) * a - target;
    let df = |a: f64| 1.5 * a * a + 1.0 + rho;
    let hi = (2.0 * target).cbrt() + target;
    let mut a = (target / (1.0 + rho)).min((2.0 * target).cbrt());
    let mut ok = false;
    for _ in 0..100 {
        let step = f(a) / df(a);
        a -= step;
        if !(0.0..=hi).contains(&a) || !a.is_finite() {
            break;
        }
        if step.abs() <= 1e-15 * a.abs().max(1e-300) {
            ok = true;
            break;
        }
    }
    if !ok || f(a).abs() > 1e-12 * target.max(1.0) {
        let (mut lo, mut up) = (0.0, hi);
        for _ in 0..200 {
            let mid = 0.5 * (lo + up);
            if f(mid) > 0.0 {
                up = mid;
            } else {
                lo = mid;
            }
        }
        a = 0.5 * (lo + up);
    }
    a.copysign(y)
}

/// ρ-FA: `da/dt = γ₀y − ½a³ − (1+ρ)a`, `Δ = y − (½a³ + (1+ρ)a)/γ₀`,
/// `H_y = 1 + a²`, `G̃ = ρ + ½a²`.
pub fn solve_rho_fa(gamma0: f64, rho: f64, y: f64, grid: &TimeGrid) -> Result<FaSolution> {
    check_gamma(gamma0)?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Domain("rho must lie in [0, 1]".into()));
    }
    let mut out = TwoLayerTrajectory::with_capacity(grid.steps);
    integrate(
        [0.0],
        grid,
        |x| [gamma0 * y - 0.5 * x[0].powi(3) - (1.0 + rho) * x[0]],
        |x| 1.5 * x[0] * x[0] + 1.0 + rho,
        |k, x| {
            let a = x[0];
            out.times.push(grid.time(k));
            out.delta.push(y - (0.5 * a.powi(3) + (1.0 + rho) * a) / gamma0);
            out.a.push(a);
            out.h_y.push(1.0 + a * a);
            out.gtilde.push(rho + 0.5 * a * a);
        },
    )?;
    let a_star = fa_fixed_point(gamma0, rho, y);
    Ok(FaSolution {
        trajectory: out,
        a_star,
        h_y_inf: 1.0 + a_star * a_star,
        gtilde_inf: rho + 0.5 * a_star * a_star,
    })
}

/// Unreduced ρ-FA system in `(H, a, G̃, Δ)`; returns the four trajectories.
pub fn solve_rho_fa_unreduced(gamma0: f64, rho: f64, y: f64, grid: &TimeGrid) -> Result<[Vec<f64>; 4]> {
    check_gamma(gamma0)?;
    let mut out: [Vec<f64>; 4] = Default::default();
    integrate(
        [1.0, 0.0, rho, y],
        grid,
        |x| {
            let [h, a, gt, d] = *x;
            [2.0 * gamma0 * a * d, gamma0 * d, gamma0 * d * a, -(h + gt) * d]
        },
        |x| x[0] + x[2],
        |_, x| {
            for i in 0..4 {
                out[i].push(x[i]);
            }
        },
    )?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HebbTrajectory {
    pub times: Vec<f64>,
    pub targets: Vec<f64>,
    /// `P × T` per-sample errors.
    #[serde(skip)]
    pub delta: DMatrix<f64>,
    /// `P × T` diagonal feature kernel entries `H_μμ`.
    #[serde(skip)]
    pub h_diag: DMatrix<f64>,
    pub gamma0: f64,
}

impl HebbTrajectory {
    /// Task-projected summary in the common `(Δ, a, H_y, G̃)` format.
    pub fn projected(&self) -> TwoLayerTrajectory {
        let y = DVector::from_vec(self.targets.clone());
        let yn = y.norm();
        let y2 = y.norm_squared();
        let mut out = TwoLayerTrajectory::with_capacity(self.times.len());
        let mut a = 0.0;
        for (k, &t) in self.times.iter().enumerate() {
            let d = self.delta.column(k);
            let dproj = if yn > 0.0 { y.dot(&d) / yn } else { 0.0 };
            if k > 0 {
                let dprev = self.delta.column(k - 1);
                let prev = if yn > 0.0 { y.dot(&dprev) / yn } else { 0.0 };
                a += 0.5 * self.gamma0 * (dproj + prev) * (t - self.times[k - 1]);
            }
            let (hy, gt) = if y2 > 0.0 {
                let hy = (0..y.len()).map(|m| y[m] * y[m] * self.h_diag[(m, k)]).sum::<f64>() / y2;
                let gt = (0..y.len())
                    .map(|m| y[m] * y[m] * self.gamma0 * (y[m] - d[m]) * d[m])
                    .sum::<f64>()
                    / y2;
                (hy, gt)
            } else {
                (1.0, 0.0)
            };
            out.times.push(t);
            out.delta.push(dproj);
            out.a.push(a);
            out.h_y.push(hy);
            out.gtilde.push(gt);
        }
        out
    }

    /// `A(H(t), yyᵀ)` with `H = diag(H_μμ)`.
    pub fn alignment(&self, k: usize) -> Result<f64> {
        let h = DMatrix::from_diagonal(&self.h_diag.column(k).into_owned());
        kernel_task_alignment(&h, &DVector::from_vec(self.targets.clone()))
    }
}

/// Hebb decouples over samples:
/// `dH_μμ/dt = 2γ₀Δ_μ²H_μμ`, `dΔ_μ/dt = −[H_μμ + γ₀Δ_μ(y_μ−Δ_μ)]Δ_μ`.
pub fn solve_hebb(gamma0: f64, y: &DVector<f64>, grid: &TimeGrid) -> Result<HebbTrajectory> {
    check_gamma(gamma0)?;
    let p = y.len();
    let mut delta = DMatrix::zeros(p, grid.steps);
    let mut h_diag = DMatrix::zeros(p, grid.steps);
    for mu in 0..p {
        let ym = y[mu];
        integrate(
            [ym, 1.0],
            grid,
            |x| {
                let [d, h] = *x;
                [-(h + gamma0 * d * (ym - d)) * d, 2.0 * gamma0 * d * d * h]
            },
            |x| (x[1] + gamma0 * x[0] * (ym - x[0])).abs() + 2.0 * gamma0 * x[0] * x[0],
            |k, x| {
                delta[(mu, k)] = x[0];
                h_diag[(mu, k)] = x[1];
            },
        )?;
    }
    Ok(HebbTrajectory {
        times: grid.times(),
        targets: y.iter().copied().collect(),
        delta,
        h_diag,
        gamma0,
    })
}

/// Rules with an exact two-layer reduction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExactRule {
    Gd {
        #[serde(default)]
        form: GdOdeForm,
    },
    RhoFa {
        rho: f64,
    },
    Hebb,
}

/// `ΔH_y = H_y(∞) − 1` for each richness value. GD and ρ-FA use their
/// closed-form fixed points; Hebb integrates until `|Δ| < 1e-12`.
pub fn delta_h_sweep(rule: ExactRule, y: f64, gammas: &[f64]) -> Result<Vec<(f64, f64)>> {
    gammas
        .iter()
        .map(|&g| {
            check_gamma(g)?;
            let dh = match rule {
                ExactRule::Gd { .. } => gd_fixed_point(g, y) - 1.0,
                ExactRule::RhoFa { rho } => fa_fixed_point(g, rho, y).powi(2),
                ExactRule::Hebb => hebb_final_h(g, y)? - 1.0,
            };
            Ok((g, dh))
        })
        .collect()
}

fn hebb_final_h(gamma0: f64, y: f64) -> Result<f64> {
    let yv = DVector::from_element(1, y);
    let mut horizon = 40.0;
    loop {
        let grid = TimeGrid::new(4001, horizon / 4000.0)?;
        let tr = solve_hebb(gamma0, &yv, &grid)?;
        let k = grid.steps - 1;
        if tr.delta[(0, k)].abs() < 1e-12 || horizon > 1e4 {
            return Ok(tr.h_diag[(0, k)]);
        }
        horizon *= 4.0;
    }
}
