use entk_dmft::dmft::{estimate_kernels, integrate_fields, sample_sources, solve, NormalBank, SolverConfig};
use entk_dmft::finite_size::{ensemble_kernel_covariance, nlo_discrepancy, nlo_prediction};
use entk_dmft::finite_width::{init_network, train, TrainOptions};
use entk_dmft::harness::{make_dataset, DatasetSpec};
use entk_dmft::lazy::{lazy_entk, lazy_predict, lazy_stack};
use entk_dmft::linear::{linear_closure, LinearConfig};
use entk_dmft::{Activation, Dataset, NetworkConfig, Rule, TimeGrid};

fn data(p: usize, d: usize, seed: u64) -> Dataset {
    let spec = DatasetSpec::RandomGaussian {
        p,
        d,
        seed: Some(seed),
        unit_norm: true,
        whitened: false,
        targets: None,
    };
    make_dataset(&spec, 0).unwrap()
}

fn net(depth: usize, width: usize, gamma0: f64, activation: Activation, seed: u64) -> NetworkConfig {
    NetworkConfig {
        depth,
        width,
        gamma0,
        activation,
        seed,
    }
}

#[test]
fn measured_entk_drives_the_outputs() {
    let d = data(4, 10, 1);
    let grid = TimeGrid::new(30, 1e-2).unwrap();
    let mut p = init_network(&net(1, 4000, 1.0, Activation::Relu, 2), &Rule::RhoFa { rho: 0.5 }, 10).unwrap();
    let tr = train(&mut p, &d, &grid, &TrainOptions::default()).unwrap();
    for k in 0..grid.steps - 1 {
        let delta = tr.errors.column(k).into_owned();
        let predicted = &tr.kernels[k].entk * &delta;
        let observed = (tr.predictions.column(k + 1) - tr.predictions.column(k)) / grid.dt;
        let rel = (&observed - &predicted).norm() / predicted.norm();
        assert!(rel < 0.05, "step {k}: {rel}");
    }
}

#[test]
fn tiny_richness_training_follows_the_lazy_predictor() {
    let d = data(4, 20, 3);
    // Euler's own O(dt·λ) error has to stay well under the tolerance
    let grid = TimeGrid::new(100, 0.01).unwrap();
    let cfg = net(1, 8192, 1e-3, Activation::Relu, 4);
    let mut p = init_network(&cfg, &Rule::Gd, 20).unwrap();
    let tr = train(&mut p, &d, &grid, &TrainOptions::default()).unwrap();
    let k = lazy_entk(&Rule::Gd, &lazy_stack(d.input_kernel(), 1, Activation::Relu).unwrap()).unwrap();
    let lazy = lazy_predict(&k, d.targets(), &grid).unwrap();
    for t in 1..grid.steps {
        let a = tr.predictions.column(t);
        let b = lazy.f.column(t);
        assert!((a - b).norm() / b.norm() < 0.03, "step {t}");
    }
}

/// Relative change of every kernel after one extra iteration with fresh
/// draws at the converged state, averaged over three fresh draws.
fn fresh_iteration_change(rule: &Rule, samples: usize) -> Vec<f64> {
    let d = data(3, 8, 5);
    let grid = TimeGrid::new(8, 0.1).unwrap();
    let cfg = net(2, 1, 1.0, Activation::Tanh, 0);
    let solver = SolverConfig {
        samples,
        ..SolverConfig::default()
    };
    let sol = solve(&d, &cfg, rule, &grid, &solver).unwrap();
    assert!(sol.report.converged, "{rule:?}");
    let state = &sol.state;
    let mut total = vec![0.0; 4 * cfg.depth];
    for seed in 99..102 {
        let mut bank = NormalBank::new(seed, samples, true, false);
        let sources = sample_sources(&state.kernels, rule, &mut bank, 0, solver.jitter).unwrap();
        let fields = integrate_fields(
            &sources,
            &state.kernels,
            &state.responses,
            &state.errors,
            rule,
            cfg.activation,
            cfg.gamma0,
            grid.dt,
        )
        .unwrap();
        let fresh = estimate_kernels(&fields, d.input_kernel(), rule).unwrap();
        for (t, (a, b)) in total.iter_mut().zip(fresh.tensors().zip(state.kernels.tensors())) {
            *t += a.relative_change(b) / 3.0;
        }
    }
    total
}

#[test]
fn converged_state_is_a_fixed_point_under_fresh_draws() {
    let samples = 4000;
    let bound = SolverConfig::default().tol + 3.0 / (samples as f64).sqrt();
    let change = fresh_iteration_change(&Rule::Gd, samples);
    assert!(change.iter().all(|&c| c < bound), "{change:?}");
    // Without weight transport G̃ is small next to its per-path spread
    // (zero at the start for DFA, damped by ρ powers for ρ-FA), so its
    // relative change is mostly sampling noise; Φ, G and G̃̃ are held to
    // the bound.
    let depth = 2;
    for rule in [Rule::Dfa, Rule::RhoFa { rho: 0.5 }] {
        let change = fresh_iteration_change(&rule, samples);
        for (i, &c) in change.iter().enumerate() {
            if i / depth != 2 {
                assert!(c < bound, "{rule:?} tensor {i}: {change:?}");
            }
        }
    }
}

#[test]
fn dfa_and_hebb_responses_without_feedback_paths_vanish() {
    let d = data(2, 6, 7);
    let grid = TimeGrid::new(6, 0.1).unwrap();
    let solver = SolverConfig {
        samples: 2000,
        ..SolverConfig::default()
    };
    let bound = 3.0 / (solver.samples as f64).sqrt();
    for rule in [Rule::Dfa, Rule::Hebb] {
        let sol = solve(&d, &net(2, 1, 1.0, Activation::Tanh, 0), &rule, &grid, &solver).unwrap();
        let r = &sol.state.responses;
        for t in r.a.iter().chain(&r.c) {
            assert!(t.flat().amax() < bound, "{rule:?}");
        }
    }
}

#[test]
fn sampled_solver_matches_linear_closure_on_linear_networks() {
    let d = data(3, 8, 9);
    let grid = TimeGrid::new(10, 0.1).unwrap();
    for rule in [Rule::Gd, Rule::RhoFa { rho: 0.5 }, Rule::Dfa] {
        let closure = linear_closure(&d, 2, 1.0, &rule, &grid, &LinearConfig::default()).unwrap();
        let sampled = solve(
            &d,
            &net(2, 1, 1.0, Activation::Linear, 0),
            &rule,
            &grid,
            &SolverConfig {
                samples: 4000,
                ..SolverConfig::default()
            },
        )
        .unwrap();
        for (a, b) in sampled.state.kernels.phi.iter().zip(&closure.state.kernels.phi) {
            let rel = a.relative_change(b);
            assert!(rel < 0.03, "{rule:?}: {rel}");
        }
        let la = sampled.state.loss();
        let lb = closure.state.loss();
        assert!((la[9] - lb[9]).abs() / lb[9] < 0.03, "{rule:?}");
    }
}

#[test]
fn ensemble_discrepancy_shrinks_with_replicates() {
    let pred = nlo_prediction(Activation::Relu, 4, 128).unwrap();
    // one ensemble's discrepancy is itself noisy, so average over seeds
    let disc: Vec<f64> = [100, 500, 2000]
        .iter()
        .map(|&r| {
            (0..6)
                .map(|s| {
                    let cfg = net(4, 128, 1.0, Activation::Relu, 100 + s);
                    nlo_discrepancy(&ensemble_kernel_covariance(&cfg, r).unwrap(), &pred)
                })
                .sum::<f64>()
                / 6.0
        })
        .collect();
    // 1/sqrt(R) predicts a 4.5x drop from 100 to 2000
    assert!(disc[2] < disc[0] / 2.0, "{disc:?}");
    assert!(disc[1] < disc[0], "{disc:?}");
}
