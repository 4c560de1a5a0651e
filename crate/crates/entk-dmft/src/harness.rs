//! JSON-configured experiment runner: builds datasets, dispatches to the
//! solvers, writes CSV/JSON results and a manifest of content hashes.
//!
//! All randomness is derived from one master seed: the dataset, network and
//! mean-field source streams each get their own sub-seed, so seed fields
//! inside the sub-configs are overwritten.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::activation::Activation;
use crate::dmft::{solve, ConvergenceReport, SolverConfig};
use crate::error::{Error, Result};
use crate::exact::{delta_h_sweep, solve_gd, solve_hebb, solve_rho_fa, ExactRule, GdOdeForm, TwoLayerTrajectory};
use crate::finite_size::{
    covariance_from_samples, ensemble_samples, lazy_layer_error_sweep, lazy_width_sweep, nlo_prediction,
    rich_width_sweep, sweep_fit, EnsembleCovariance, NloPrediction,
};
use crate::finite_width::{train_ensemble, TrainOptions, TrainTrace};
use crate::lazy::{angle_sweep, lazy_entk, lazy_layer_kernels, lazy_predict, lazy_stack};
use crate::linalg::loglog_fit;
use crate::linear::{linear_closure, LinearConfig, LinearSolution};
use crate::model::{entk_equal_time, kernel_task_alignment, Dataset, DmftState, NetworkConfig, Rule, TimeGrid};
use crate::rng::{self, tag};
use crate::tensor::matrix_json;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Lazy,
    Dmft,
    Linear,
    Exact2,
    FiniteSize,
    Figure,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Train,
        Mode::Lazy,
        Mode::Dmft,
        Mode::Linear,
        Mode::Exact2,
        Mode::FiniteSize,
        Mode::Figure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Lazy => "lazy",
            Mode::Dmft => "dmft",
            Mode::Linear => "linear",
            Mode::Exact2 => "exact2",
            Mode::FiniteSize => "finite-size",
            Mode::Figure => "figure",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let known: Vec<_> = Mode::ALL.iter().map(|m| m.name()).collect();
            Error::config("mode", format!("unknown mode `{s}`; expected one of {}", known.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// I.i.d. standard normal inputs.
    RandomGaussian {
        p: usize,
        d: usize,
        /// Explicit data seed; derived from the master seed when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        /// Rescale every input to `|x|² = D`.
        #[serde(default = "yes")]
        unit_norm: bool,
        /// Replace the inputs by an orthogonal set with `K^x = I`.
        #[serde(default)]
        whitened: bool,
        /// Explicit targets; alternating ±1 when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        targets: Option<Vec<f64>>,
    },
    /// Two unit-norm inputs at angle `theta`, targets `(1, −1)`.
    AnglePair {
        theta: f64,
        #[serde(default = "two")]
        d: usize,
    },
    /// Numeric CSV, one sample per row, target in the last column.
    Csv {
        path: PathBuf,
        #[serde(default = "yes")]
        has_header: bool,
        #[serde(default)]
        whitened: bool,
    },
}

fn yes() -> bool {
    true
}
fn two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExactSpec {
    /// Projected target `|y|`.
    #[serde(default = "one")]
    pub y: f64,
    #[serde(default)]
    pub form: GdOdeForm,
}

fn one() -> f64 {
    1.0
}

impl Default for ExactSpec {
    fn default() -> Self {
        ExactSpec {
            y: 1.0,
            form: GdOdeForm::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteSizeSpec {
    #[serde(default = "default_fs_replicates")]
    pub replicates: usize,
    /// Extra widths for a variance-versus-width table.
    #[serde(default)]
    pub widths: Vec<usize>,
}

fn default_fs_replicates() -> usize {
    500
}

impl Default for FiniteSizeSpec {
    fn default() -> Self {
        FiniteSizeSpec {
            replicates: 500,
            widths: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigureName {
    Fig1,
    Fig2,
    Fig3,
    Fig4,
    Fig5,
    Fig6,
}

impl FigureName {
    pub fn name(self) -> &'static str {
        match self {
            FigureName::Fig1 => "fig1",
            FigureName::Fig2 => "fig2",
            FigureName::Fig3 => "fig3",
            FigureName::Fig4 => "fig4",
            FigureName::Fig5 => "fig5",
            FigureName::Fig6 => "fig6",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; must agree with the command-line mode when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<TimeGrid>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub linear: LinearConfig,
    #[serde(default)]
    pub training: TrainOptions,
    /// Independent finite-width networks per run.
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Steps whose equal-time kernels are written; first and last if empty.
    #[serde(default)]
    pub snapshots: Vec<usize>,
    /// Also write full two-time kernel tensors.
    #[serde(default)]
    pub two_time_tensors: bool,
    /// Cap on `P·T` for two-time solvers.
    #[serde(default = "default_max_pt")]
    pub max_pt: usize,
    #[serde(default)]
    pub exact: ExactSpec,
    #[serde(default)]
    pub finite_size: FiniteSizeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub figure: Option<FigureName>,
    /// Run the long-horizon variants of figure recipes.
    #[serde(default)]
    pub extended: bool,
}

fn default_replicates() -> usize {
    1
}
fn default_max_pt() -> usize {
    1024
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: None,
            seed: 0,
            dataset: None,
            network: None,
            rule: None,
            grid: None,
            solver: SolverConfig::default(),
            linear: LinearConfig::default(),
            training: TrainOptions::default(),
            replicates: 1,
            out_dir: None,
            snapshots: Vec::new(),
            two_time_tensors: false,
            max_pt: 1024,
            exact: ExactSpec::default(),
            finite_size: FiniteSizeSpec::default(),
            figure: None,
            extended: false,
        }
    }
}

/// Parses a config, reporting schema violations with their field path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn derive_seed(master: u64, stream: u64) -> u64 {
    rng::stream(master, &[stream]).random()
}

fn alternating_targets(p: usize) -> DVector<f64> {
    DVector::from_fn(p, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 })
}

/// Builds the dataset described by `spec`; `master_seed` supplies the data
/// stream when `spec` carries no explicit seed.
pub fn make_dataset(spec: &DatasetSpec, master_seed: u64) -> Result<Dataset> {
    match spec {
        DatasetSpec::RandomGaussian {
            p,
            d,
            seed,
            unit_norm,
            whitened,
            targets,
        } => {
            let (p, d) = (*p, *d);
            if p == 0 || d == 0 {
                return Err(Error::Domain("dataset needs P >= 1 and D >= 1".into()));
            }
            if *whitened && p > d {
                return Err(Error::Domain(format!("cannot whiten P={p} inputs in D={d} dimensions")));
            }
            let mut g = rng::stream(seed.unwrap_or_else(|| derive_seed(master_seed, tag::DATA)), &[tag::DATA]);
            let mut x = DMatrix::zeros(p, d);
            for i in 0..p {
                for j in 0..d {
                    x[(i, j)] = rng::normal(&mut g);
                }
            }
            let df = d as f64;
            if *whitened {
                let q = x.transpose().qr().q();
                x = q.transpose() * df.sqrt();
            } else if *unit_norm {
                for mut row in x.row_iter_mut() {
                    let n = row.norm();
                    if n > 0.0 {
                        row *= df.sqrt() / n;
                    }
                }
            }
            let y = match targets {
                Some(v) if v.len() != p => {
                    return Err(Error::config(
                        "dataset.targets",
                        format!("{} targets for P={p}", v.len()),
                    ))
                }
                Some(v) => DVector::from_vec(v.clone()),
                None => alternating_targets(p),
            };
            Dataset::new(x, y, *whitened)
        }
        DatasetSpec::AnglePair { theta, d } => {
            if *d < 2 {
                return Err(Error::Domain("angle pair needs D >= 2".into()));
            }
            let s = (*d as f64).sqrt();
            let mut x = DMatrix::zeros(2, *d);
            x[(0, 0)] = s;
            x[(1, 0)] = s * theta.cos();
            x[(1, 1)] = s * theta.sin();
            Dataset::new(x, alternating_targets(2), false)
        }
        DatasetSpec::Csv {
            path,
            has_header,
            whitened,
        } => {
            let mut rdr = csv::ReaderBuilder::new().has_headers(*has_header).from_path(path)?;
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for (i, rec) in rdr.records().enumerate() {
                let rec = rec?;
                let vals = rec
                    .iter()
                    .map(|f| f.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::config("dataset.path", format!("row {}: {e}", i + 1)))?;
                rows.push(vals);
            }
            let cols = rows.first().map_or(0, |r| r.len());
            if rows.is_empty() || cols < 2 || rows.iter().any(|r| r.len() != cols) {
                return Err(Error::config(
                    "dataset.path",
                    "need a rectangular table with at least one input column and a target column",
                ));
            }
            let p = rows.len();
            let x = DMatrix::from_fn(p, cols - 1, |i, j| rows[i][j]);
            let y = DVector::from_fn(p, |i, _| rows[i][cols - 1]);
            Dataset::new(x, y, *whitened)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultManifest {
    pub mode: Mode,
    pub config_hash: String,
    pub seed: u64,
    pub outputs: Vec<OutputRecord>,
    /// Hash over the sorted `(file, sha256)` list.
    pub content_hash: String,
    pub wall_clock_seconds: f64,
    pub convergence: BTreeMap<String, bool>,
}

impl ResultManifest {
    pub fn all_converged(&self) -> bool {
        self.convergence.values().all(|&c| c)
    }

    /// 0 on success, 2 when some solver did not converge.
    pub fn exit_code(&self) -> i32 {
        if self.all_converged() {
            0
        } else {
            2
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Writer that records a hash for every file it produces.
pub struct OutputDir {
    root: PathBuf,
    records: Vec<OutputRecord>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            records: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.records.push(OutputRecord {
            file: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.write_bytes(name, &bytes)
    }

    /// CSV with a dynamic header.
    pub fn write_table(&mut self, name: &str, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.write_bytes(name, &bytes)
    }

    pub fn records(&self) -> &[OutputRecord] {
        &self.records
    }
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Thread count from the flag, else `ENTK_DMFT_THREADS`.
pub fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("ENTK_DMFT_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::config("ENTK_DMFT_THREADS", format!("not a positive integer: `{v}`"))),
        _ => Ok(None),
    }
}

/// Sizes the global worker pool. Results never depend on it.
pub fn configure_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::config("threads", "must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("threads", e.to_string()))?;
    }
    Ok(())
}

/// Parses the mode name and config file, runs, and writes the manifest.
pub fn run_file(mode: &str, config_path: &Path, opts: &RunOptions) -> Result<ResultManifest> {
    let mode: Mode = mode.parse()?;
    let mut cfg = load_config(config_path)?;
    // relative CSV paths may be given relative to the config file
    if let (Some(DatasetSpec::Csv { path, .. }), Some(dir)) = (cfg.dataset.as_mut(), config_path.parent()) {
        if path.is_relative() && !path.exists() && dir.join(&*path).exists() {
            *path = dir.join(&*path);
        }
    }
    run(mode, &cfg, opts)
}

fn need<'a, T>(v: &'a Option<T>, path: &str, mode: Mode) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::config(path, format!("required for mode `{mode}`")))
}

/// Effective configuration after overrides, with derived sub-seeds.
fn effective(mode: Mode, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentConfig> {
    if let Some(m) = cfg.mode {
        if m != mode {
            return Err(Error::config("mode", format!("config says `{m}` but `{mode}` was requested")));
        }
    }
    let mut c = cfg.clone();
    c.mode = Some(mode);
    if let Some(s) = opts.seed {
        c.seed = s;
    }
    if let Some(o) = &opts.out_dir {
        c.out_dir = Some(o.clone());
    }
    if let Some(net) = c.network.as_mut() {
        net.seed = derive_seed(c.seed, tag::INIT);
    }
    c.solver.seed = derive_seed(c.seed, tag::SOURCES);
    if let Some(DatasetSpec::Csv { path, .. }) = &c.dataset {
        if !path.exists() {
            return Err(Error::config("dataset.path", format!("{} does not exist", path.display())));
        }
    }
    if c.replicates == 0 {
        return Err(Error::config("replicates", "must be >= 1"));
    }
    Ok(c)
}

fn check_budget(cfg: &ExperimentConfig, data: &Dataset, grid: &TimeGrid) -> Result<()> {
    let pt = data.len() * grid.steps;
    if pt > cfg.max_pt {
        return Err(Error::config(
            "grid.steps",
            format!("P·T = {pt} exceeds max_pt = {} (raise max_pt to override)", cfg.max_pt),
        ));
    }
    Ok(())
}

/// Runs `mode` and writes outputs plus `manifest.json` under the output
/// directory (`results` by default).
pub fn run(mode: Mode, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ResultManifest> {
    let start = Instant::now();
    let cfg = effective(mode, cfg, opts)?;
    let root = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("results"));
    // the output location is not part of the experiment's identity
    let config_hash = sha256_hex(&serde_json::to_vec(&ExperimentConfig { out_dir: None, ..cfg.clone() })?);
    let mut out = OutputDir::create(&root)?;
    let mut conv = BTreeMap::new();
    match mode {
        Mode::Train => run_train(&cfg, &mut out)?,
        Mode::Lazy => run_lazy(&cfg, &mut out)?,
        Mode::Dmft => run_dmft(&cfg, &mut out, &mut conv)?,
        Mode::Linear => run_linear(&cfg, &mut out, &mut conv)?,
        Mode::Exact2 => run_exact2(&cfg, &mut out)?,
        Mode::FiniteSize => run_finite_size(&cfg, &mut out)?,
        Mode::Figure => {
            let fig = *need(&cfg.figure, "figure", mode)?;
            run_figure(fig, &cfg, &mut out, &mut conv)?
        }
    }
    let mut records = out.records().to_vec();
    records.sort_by(|a, b| a.file.cmp(&b.file));
    let listing: String = records.iter().map(|r| format!("{}\0{}\n", r.file, r.sha256)).collect();
    let manifest = ResultManifest {
        mode,
        config_hash,
        seed: cfg.seed,
        content_hash: sha256_hex(listing.as_bytes()),
        outputs: records,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        convergence: conv,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    std::fs::write(root.join("manifest.json"), bytes)?;
    Ok(manifest)
}

fn snapshot_steps(cfg: &ExperimentConfig, steps: usize) -> Result<Vec<usize>> {
    if cfg.snapshots.is_empty() {
        let mut v = vec![0];
        if steps > 1 {
            v.push(steps - 1);
        }
        return Ok(v);
    }
    if let Some(&bad) = cfg.snapshots.iter().find(|&&k| k >= steps) {
        return Err(Error::config("snapshots", format!("step {bad} outside grid of {steps} points")));
    }
    Ok(cfg.snapshots.clone())
}

fn kernel_snapshot(step: usize, time: f64, phi: &[DMatrix<f64>], g: &[DMatrix<f64>], gtilde: &[DMatrix<f64>], entk: &DMatrix<f64>) -> Value {
    let m = |v: &[DMatrix<f64>]| v.iter().map(matrix_json).collect::<Vec<_>>();
    json!({
        "step": step,
        "time": time,
        "phi": m(phi),
        "g": m(g),
        "gtilde": m(gtilde),
        "entk": matrix_json(entk),
    })
}

fn state_snapshot(state: &DmftState, grid: &TimeGrid, k: usize) -> Value {
    let ks = &state.kernels;
    let eq = |v: &[crate::TwoTime]| v.iter().map(|x| x.block(k, k)).collect::<Vec<_>>();
    kernel_snapshot(k, grid.time(k), &eq(&ks.phi), &eq(&ks.g), &eq(&ks.gtilde), &entk_equal_time(ks, k))
}

fn projected(m: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    y.dot(&(m * y)) / y.norm_squared()
}

/// Per-step table for a mean-field state: loss, eNTK alignment and the
/// task projections of `Φ^ℓ`, `G̃^ℓ`.
fn state_table(state: &DmftState, grid: &TimeGrid, y: &DVector<f64>) -> (Vec<String>, Vec<Vec<f64>>) {
    let l = state.kernels.depth();
    let mut header = vec!["step".to_string(), "time".into(), "loss".into(), "alignment".into()];
    for i in 1..=l {
        header.push(format!("phi_y_{i}"));
    }
    for i in 1..=l {
        header.push(format!("gtilde_y_{i}"));
    }
    let loss = state.loss();
    let rows = (0..grid.steps)
        .map(|k| {
            let mut r = vec![k as f64, grid.time(k), loss[k]];
            r.push(kernel_task_alignment(&entk_equal_time(&state.kernels, k), y).unwrap_or(f64::NAN));
            for t in &state.kernels.phi {
                r.push(projected(&t.block(k, k), y));
            }
            for t in &state.kernels.gtilde {
                r.push(projected(&t.block(k, k), y));
            }
            r
        })
        .collect();
    (header, rows)
}

fn predictions_table(f: &DMatrix<f64>, grid: &TimeGrid) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut header = vec!["step".to_string(), "time".into()];
    header.extend((0..f.nrows()).map(|mu| format!("f_{mu}")));
    let rows = (0..f.ncols())
        .map(|k| {
            let mut r = vec![k as f64, grid.time(k)];
            r.extend(f.column(k).iter());
            r
        })
        .collect();
    (header, rows)
}

fn write_state(cfg: &ExperimentConfig, out: &mut OutputDir, prefix: &str, state: &DmftState, grid: &TimeGrid, y: &DVector<f64>) -> Result<()> {
    let (h, rows) = state_table(state, grid, y);
    out.write_table(&format!("{prefix}trace.csv"), &h, &rows)?;
    let (h, rows) = predictions_table(&state.predictions, grid);
    out.write_table(&format!("{prefix}predictions.csv"), &h, &rows)?;
    for k in snapshot_steps(cfg, grid.steps)? {
        out.write_json(&format!("{prefix}kernels_step{k}.json"), &state_snapshot(state, grid, k))?;
    }
    if cfg.two_time_tensors {
        out.write_json(&format!("{prefix}kernels_two_time.json"), &state.kernels)?;
        out.write_json(&format!("{prefix}responses_two_time.json"), &state.responses)?;
    }
    Ok(())
}

fn report_json(report: &ConvergenceReport) -> Value {
    json!({
        "converged": report.converged,
        "iterations": report.iterations,
        "rank_warning": report.rank_warning,
        "moment_matched": report.moment_matched,
        "log": report.log,
    })
}

fn setup(cfg: &ExperimentConfig, mode: Mode) -> Result<(Dataset, NetworkConfig, Rule, TimeGrid)> {
    let data = make_dataset(need(&cfg.dataset, "dataset", mode)?, cfg.seed)?;
    let net = need(&cfg.network, "network", mode)?.clone();
    let rule = *need(&cfg.rule, "rule", mode)?;
    let grid = *need(&cfg.grid, "grid", mode)?;
    net.validate()?;
    rule.validate()?;
    grid.validate()?;
    Ok((data, net, rule, grid))
}

fn train_mean_table(traces: &[TrainTrace]) -> (Vec<String>, Vec<Vec<f64>>) {
    let header = ["step", "time", "loss", "alignment", "corr_g_gtilde"].map(String::from).to_vec();
    let r = traces.len() as f64;
    let rows: Vec<Vec<f64>> = (0..traces[0].times.len())
        .map(|k| {
            let rows: Vec<_> = traces.iter().map(|t| t.rows().swap_remove(k)).collect();
            vec![
                k as f64,
                traces[0].times[k],
                rows.iter().map(|x| x.loss).sum::<f64>() / r,
                rows.iter().map(|x| x.alignment).sum::<f64>() / r,
                rows.iter().map(|x| x.corr_g_gtilde).sum::<f64>() / r,
            ]
        })
        .collect();
    (header, rows)
}

fn run_train(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    let (data, net, rule, grid) = setup(cfg, Mode::Train)?;
    if cfg.training.two_time {
        check_budget(cfg, &data, &grid)?;
    }
    let traces = train_ensemble(&net, &rule, &data, &grid, &cfg.training, cfg.replicates)?;
    for (r, t) in traces.iter().enumerate() {
        out.write_csv(&format!("train_r{r}.csv"), &t.rows())?;
    }
    let (h, rows) = train_mean_table(&traces);
    out.write_table("train_mean.csv", &h, &rows)?;
    let first = &traces[0];
    let (h, rows) = predictions_table(&first.predictions, &grid);
    out.write_table("predictions_r0.csv", &h, &rows)?;
    for k in snapshot_steps(cfg, grid.steps)? {
        let m = &first.kernels[k];
        out.write_json(
            &format!("kernels_step{k}.json"),
            &kernel_snapshot(k, grid.time(k), &m.phi, &m.g, &m.gtilde, &m.entk),
        )?;
    }
    if let Some(tt) = &first.two_time {
        out.write_json("kernels_two_time_r0.json", tt)?;
    }
    Ok(())
}

fn run_lazy(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    let mode = Mode::Lazy;
    let data = make_dataset(need(&cfg.dataset, "dataset", mode)?, cfg.seed)?;
    let net = need(&cfg.network, "network", mode)?;
    let rule = need(&cfg.rule, "rule", mode)?;
    let stack = lazy_stack(data.input_kernel(), net.depth, net.activation)?;
    let k = lazy_entk(rule, &stack)?;
    out.write_json("entk.json", &matrix_json(&k))?;
    let layers = lazy_layer_kernels(data.input_kernel(), net.depth, net.activation, rule)?;
    let layer_json: Vec<Value> = layers
        .iter()
        .enumerate()
        .map(|(i, [phi, g, gt, gtt])| {
            json!({
                "layer": i + 1,
                "phi": matrix_json(phi),
                "g": matrix_json(g),
                "gtilde": matrix_json(gt),
                "gtildetilde": matrix_json(gtt),
            })
        })
        .collect();
    out.write_json("layer_kernels.json", &layer_json)?;
    if let Some(grid) = &cfg.grid {
        let pred = lazy_predict(&k, data.targets(), grid)?;
        let (h, rows) = predictions_table(&pred.f, grid);
        out.write_table("predictions.csv", &h, &rows)?;
    }
    Ok(())
}

fn run_dmft(cfg: &ExperimentConfig, out: &mut OutputDir, conv: &mut BTreeMap<String, bool>) -> Result<()> {
    let (data, net, rule, grid) = setup(cfg, Mode::Dmft)?;
    check_budget(cfg, &data, &grid)?;
    let sol = solve(&data, &net, &rule, &grid, &cfg.solver)?;
    write_state(cfg, out, "", &sol.state, &grid, data.targets())?;
    out.write_json("convergence.json", &report_json(&sol.report))?;
    conv.insert("dmft".into(), sol.report.converged);
    Ok(())
}

fn linear_tables(sol: &LinearSolution, grid: &TimeGrid, y: &DVector<f64>) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let l = sol.closure.h.len();
    let mut header = vec!["step".to_string(), "time".into(), "loss".into()];
    for i in 1..=l {
        header.push(format!("h_overlap_{i}"));
    }
    let loss = sol.state.loss();
    let rows = (0..grid.steps)
        .map(|k| {
            let mut r = vec![k as f64, grid.time(k), loss[k]];
            for i in 1..=l {
                r.push(sol.task_overlap(i, k, y)?);
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, rows))
}

fn run_linear(cfg: &ExperimentConfig, out: &mut OutputDir, conv: &mut BTreeMap<String, bool>) -> Result<()> {
    let (data, net, rule, grid) = setup(cfg, Mode::Linear)?;
    if net.activation != Activation::Linear {
        return Err(Error::config("network.activation", "linear mode needs a linear network"));
    }
    check_budget(cfg, &data, &grid)?;
    let sol = linear_closure(&data, net.depth, net.gamma0, &rule, &grid, &cfg.linear)?;
    write_state(cfg, out, "", &sol.state, &grid, data.targets())?;
    let (h, rows) = linear_tables(&sol, &grid, data.targets())?;
    out.write_table("overlap.csv", &h, &rows)?;
    out.write_json("convergence.json", &report_json(&sol.report))?;
    conv.insert("linear".into(), sol.report.converged);
    Ok(())
}

fn trajectory_table(tr: &TwoLayerTrajectory) -> (Vec<String>, Vec<Vec<f64>>) {
    let header = ["time", "delta", "a", "h_y", "gtilde"].map(String::from).to_vec();
    let rows = (0..tr.len())
        .map(|k| vec![tr.times[k], tr.delta[k], tr.a[k], tr.h_y[k], tr.gtilde[k]])
        .collect();
    (header, rows)
}

fn run_exact2(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    let mode = Mode::Exact2;
    let net = need(&cfg.network, "network", mode)?;
    let rule = need(&cfg.rule, "rule", mode)?;
    let grid = need(&cfg.grid, "grid", mode)?;
    let y = cfg.exact.y;
    let g0 = net.gamma0;
    let tr = match *rule {
        Rule::Gd => solve_gd(g0, y, grid, cfg.exact.form)?,
        Rule::RhoFa { rho } => {
            let sol = solve_rho_fa(g0, rho, y, grid)?;
            out.write_json(
                "fixed_point.json",
                &json!({ "a_star": sol.a_star, "h_y_inf": sol.h_y_inf, "gtilde_inf": sol.gtilde_inf }),
            )?;
            sol.trajectory
        }
        Rule::Hebb => solve_hebb(g0, &DVector::from_element(1, y), grid)?.projected(),
        other => {
            return Err(Error::config(
                "rule",
                format!("exact2 supports gd, rho_fa and hebb, not {}", other.name()),
            ))
        }
    };
    let (h, rows) = trajectory_table(&tr);
    out.write_table("trajectory.csv", &h, &rows)
}

#[derive(Serialize)]
struct CovRow {
    layer: usize,
    layer2: usize,
    empirical: f64,
    stderr: f64,
    predicted: f64,
}

fn cov_rows(emp: &DMatrix<f64>, se: &DMatrix<f64>, pred: &DMatrix<f64>) -> Vec<CovRow> {
    let l = emp.nrows();
    (0..l)
        .flat_map(|i| (0..l).map(move |j| (i, j)))
        .map(|(i, j)| CovRow {
            layer: i + 1,
            layer2: j + 1,
            empirical: emp[(i, j)],
            stderr: se[(i, j)],
            predicted: pred[(i, j)],
        })
        .collect()
}

#[derive(Serialize)]
struct VarianceRow {
    width: usize,
    layer: usize,
    var_phi: f64,
    predicted_phi: f64,
    var_g: f64,
    predicted_g: f64,
}

fn write_covariance(out: &mut OutputDir, prefix: &str, est: &EnsembleCovariance, pred: &NloPrediction) -> Result<()> {
    out.write_csv(&format!("{prefix}cov_phi.csv"), &cov_rows(&est.cov_phi, &est.se_phi, &pred.cov_phi))?;
    out.write_csv(&format!("{prefix}cov_g.csv"), &cov_rows(&est.cov_g, &est.se_g, &pred.cov_g))?;
    out.write_json(&format!("{prefix}covariance.json"), &json!({ "empirical": est, "predicted": pred }))
}

fn variance_rows(net: &NetworkConfig, widths: &[usize], replicates: usize) -> Result<Vec<VarianceRow>> {
    let mut rows = Vec::new();
    for &n in widths {
        let c = NetworkConfig { width: n, ..net.clone() };
        let est = covariance_from_samples(&ensemble_samples(&c, replicates)?, n)?;
        let pred = nlo_prediction(net.activation, net.depth, n)?;
        for i in 0..net.depth {
            rows.push(VarianceRow {
                width: n,
                layer: i + 1,
                var_phi: est.cov_phi[(i, i)],
                predicted_phi: pred.cov_phi[(i, i)],
                var_g: est.cov_g[(i, i)],
                predicted_g: pred.cov_g[(i, i)],
            });
        }
    }
    Ok(rows)
}

fn run_finite_size(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    let net = need(&cfg.network, "network", Mode::FiniteSize)?;
    let r = cfg.finite_size.replicates;
    let samples = ensemble_samples(net, r)?;
    let est = covariance_from_samples(&samples, net.width)?;
    let pred = nlo_prediction(net.activation, net.depth, net.width)?;
    write_covariance(out, "", &est, &pred)?;
    if !cfg.finite_size.widths.is_empty() {
        out.write_csv("variance_vs_width.csv", &variance_rows(net, &cfg.finite_size.widths, r)?)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- figures

fn gaussian_spec(p: usize, d: usize) -> DatasetSpec {
    DatasetSpec::RandomGaussian {
        p,
        d,
        seed: None,
        unit_norm: true,
        whitened: false,
        targets: None,
    }
}

fn figure_net(cfg: &ExperimentConfig, depth: usize, width: usize, gamma0: f64, act: Activation) -> NetworkConfig {
    NetworkConfig {
        depth,
        width,
        gamma0,
        activation: act,
        seed: derive_seed(cfg.seed, tag::INIT),
    }
}

fn run_figure(fig: FigureName, cfg: &ExperimentConfig, out: &mut OutputDir, conv: &mut BTreeMap<String, bool>) -> Result<()> {
    let notes = match fig {
        FigureName::Fig1 => figure1(cfg, out, conv)?,
        FigureName::Fig2 => figure2(cfg, out)?,
        FigureName::Fig3 => figure3(cfg, out, conv)?,
        FigureName::Fig4 => figure4(cfg, out, conv)?,
        FigureName::Fig5 => figure5(out)?,
        FigureName::Fig6 => figure6(cfg, out)?,
    };
    out.write_bytes("README.txt", notes.as_bytes())
}

fn histogram(values: &[f64], bins: usize) -> Vec<[f64; 2]> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(1e-12);
    let mut counts = vec![0usize; bins];
    for v in values {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let total = values.len() as f64 * width;
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| [lo + (i as f64 + 0.5) * width, c as f64 / total])
        .collect()
}

fn rule_slug(rule: &Rule) -> String {
    match rule {
        Rule::RhoFa { rho } => format!("fa_rho{rho}"),
        r => r.name().to_string(),
    }
}

/// Two-layer ReLU, P=10 random inputs in D=50, γ₀=2: finite width against
/// the mean-field solution for GD, ρ=0 FA, GLN and Hebb.
pub fn figure1(cfg: &ExperimentConfig, out: &mut OutputDir, conv: &mut BTreeMap<String, bool>) -> Result<String> {
    let data = make_dataset(&gaussian_spec(10, 50), cfg.seed)?;
    let net = figure_net(cfg, 1, 2000, 2.0, Activation::Relu);
    let grid = TimeGrid::new(40, 0.025)?;
    let mut solver = cfg.solver.clone();
    solver.seed = derive_seed(cfg.seed, tag::SOURCES);
    for rule in [Rule::Gd, Rule::RhoFa { rho: 0.0 }, Rule::Gln, Rule::Hebb] {
        let slug = rule_slug(&rule);
        let traces = train_ensemble(&net, &rule, &data, &grid, &cfg.training, cfg.replicates)?;
        let (mut h, mut rows) = train_mean_table(&traces);
        h.push("gtilde_y_1".into());
        for (k, row) in rows.iter_mut().enumerate() {
            row.push(traces.iter().map(|t| t.projected_gtilde(1)[k]).sum::<f64>() / traces.len() as f64);
        }
        out.write_table(&format!("{slug}_width.csv"), &h, &rows)?;
        let last = grid.steps - 1;
        let m = &traces[0].kernels[last];
        out.write_json(
            &format!("{slug}_width_final_kernels.json"),
            &kernel_snapshot(last, grid.time(last), &m.phi, &m.g, &m.gtilde, &m.entk),
        )?;
        let pre: Vec<f64> = traces[0].final_preactivations[0].iter().copied().collect();
        let hist: Vec<Vec<f64>> = histogram(&pre, 60).iter().map(|b| b.to_vec()).collect();
        out.write_table(&format!("{slug}_preactivations.csv"), &["h".into(), "density".into()], &hist)?;

        let sol = solve(&data, &net, &rule, &grid, &solver)?;
        let (h, rows) = state_table(&sol.state, &grid, data.targets());
        out.write_table(&format!("{slug}_dmft.csv"), &h, &rows)?;
        out.write_json(&format!("{slug}_dmft_final_kernels.json"), &state_snapshot(&sol.state, &grid, last))?;
        out.write_json(&format!("{slug}_dmft_convergence.json"), &report_json(&sol.report))?;
        conv.insert(format!("fig1_{slug}"), sol.report.converged);
    }
    Ok("fig1: two-layer ReLU, P=10, D=50, N=2000, gamma0=2, dt=0.025, T=40.
Expected: finite-width (*_width.csv) and mean-field (*_dmft.csv) loss curves overlap for every rule.
Task alignment grows for all rules; FA starts lowest and ends above GD.
FA starts with gtilde_y_1 = 0 and it grows to a positive value.
Final preactivation histograms are non-Gaussian for GD and FA and close to Gaussian for GLN.
*_final_kernels.json hold the final Phi and Gtilde kernels from both descriptions.
"
    .to_string())
}

#[derive(Serialize)]
struct AngleRow {
    series: String,
    rho: Option<f64>,
    depth: usize,
    theta: f64,
    diagonal: f64,
    off_diagonal: f64,
    normalized: f64,
}

#[derive(Serialize)]
struct SweepRow {
    series: String,
    rho: Option<f64>,
    depth: usize,
    gamma0: f64,
    width: usize,
    mean_sq_error: f64,
    stderr: f64,
}

/// Lazy eNTKs over input angle for ρ-FA and GLN, and finite-width errors
/// of the initial kernels.
pub fn figure2(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<String> {
    let thetas: Vec<f64> = (0..=32).map(|i| std::f64::consts::PI * i as f64 / 32.0).collect();
    let mut rows = Vec::new();
    let mut push = |series: &str, rho: Option<f64>, depth: usize, rule: Rule| -> Result<()> {
        for p in angle_sweep(&rule, depth, Activation::Relu, &thetas)? {
            rows.push(AngleRow {
                series: series.into(),
                rho,
                depth,
                theta: p.theta,
                diagonal: p.diagonal,
                off_diagonal: p.off_diagonal,
                normalized: p.normalized,
            });
        }
        Ok(())
    };
    for rho in [0.0, 0.25, 0.5, 0.75, 1.0] {
        push("fa_rho", Some(rho), 2, Rule::RhoFa { rho })?;
    }
    for depth in 1..=4 {
        push("fa_depth", Some(0.5), depth, Rule::RhoFa { rho: 0.5 })?;
        push("gln_depth", None, depth, Rule::Gln)?;
    }
    out.write_csv("angle_sweeps.csv", &rows)?;

    let data = make_dataset(&gaussian_spec(4, 20), cfg.seed)?;
    let widths = [128, 256, 512, 1024];
    let reps = cfg.replicates.max(8);
    let net3 = figure_net(cfg, 3, 1, 1.0, Activation::Relu);
    out.write_csv("layer_errors.csv", &lazy_layer_error_sweep(&data, &net3, &widths, reps)?)?;
    let mut sweep = Vec::new();
    for depth in 1..=3 {
        for rho in [0.0, 0.5, 1.0] {
            let net = figure_net(cfg, depth, 1, 1.0, Activation::Relu);
            for p in lazy_width_sweep(&data, &net, &Rule::RhoFa { rho }, &widths, reps)? {
                sweep.push(SweepRow {
                    series: "lazy_entk".into(),
                    rho: Some(rho),
                    depth,
                    gamma0: 0.0,
                    width: p.width,
                    mean_sq_error: p.mean_sq_error,
                    stderr: p.stderr,
                });
            }
        }
    }
    out.write_csv("entk_width_errors.csv", &sweep)?;
    Ok("fig2: lazy eNTKs of ReLU networks for two unit inputs at angle theta.
angle_sweeps.csv: series fa_rho (L=2, rho in 0..1), fa_depth (rho=0.5, L=1..4), gln_depth (L=1..4).
Expected: larger rho gives a sharper peak at theta=0; rho=0 recovers the NNGP kernel Phi^L and rho=1 the NTK.
The GLN kernel sharpens with depth.
layer_errors.csv: relative squared errors of Phi^l and G^l at width N for L=3; late Phi and early G layers have the largest errors.
entk_width_errors.csv: relative squared eNTK error against width; all series fall as 1/N, larger for small rho and large L.
"
    .to_string())
}

/// Depth-4 tanh DFA at N=1000 for γ₀ ∈ {0.5, 2}, plus the width scaling of
/// the dynamical eNTK error against a mean-field reference.
pub fn figure3(cfg: &ExperimentConfig, out: &mut OutputDir, conv: &mut BTreeMap<String, bool>) -> Result<String> {
    let data = make_dataset(&gaussian_spec(10, 50), cfg.seed)?;
    let (width, gammas): (usize, Vec<f64>) = if cfg.extended {
        (4000, vec![0.25, 0.5, 1.0, 2.0, 4.0])
    } else {
        (1000, vec![0.5, 2.0])
    };
    let grid = TimeGrid::new(101, 0.05)?;
    let y = data.targets();
    let mut header = vec!["gamma0".to_string(), "step".into(), "time".into(), "loss".into(), "phi_alignment".into(), "corr_g_gtilde".into()];
    header.push("entk_alignment".into());
    let mut rows = Vec::new();
    let mut final_kernels = Vec::new();
    for &g0 in &gammas {
        let net = figure_net(cfg, 3, width, g0, Activation::Tanh);
        let traces = train_ensemble(&net, &Rule::Dfa, &data, &grid, &cfg.training, cfg.replicates)?;
        let r = traces.len() as f64;
        for k in 0..grid.steps {
            let mean = |f: &dyn Fn(&TrainTrace) -> f64| traces.iter().map(f).sum::<f64>() / r;
            rows.push(vec![
                g0,
                k as f64,
                grid.time(k),
                mean(&|t| t.loss()[k]),
                mean(&|t| kernel_task_alignment(&t.kernels[k].phi[2], y).unwrap_or(f64::NAN)),
                mean(&|t| t.correlation[k].mean),
                mean(&|t| t.alignment[k]),
            ]);
        }
        final_kernels.push(json!({ "gamma0": g0, "entk": matrix_json(&traces[0].kernels[grid.steps - 1].entk) }));
    }
    out.write_table("dfa_depth4.csv", &header, &rows)?;
    out.write_json("dfa_depth4_final_entk.json", &final_kernels)?;

    let small = make_dataset(&gaussian_spec(4, 20), cfg.seed)?;
    let sgrid = TimeGrid::new(20, 0.1)?;
    let mut solver = cfg.solver.clone();
    solver.seed = derive_seed(cfg.seed, tag::SOURCES);
    solver.samples = solver.samples.max(20_000);
    let mut sweep = Vec::new();
    let mut fits = Vec::new();
    for g0 in [1.0, 2.0] {
        let net = figure_net(cfg, 1, 1, g0, Activation::Tanh);
        let sol = solve(&small, &net, &Rule::Dfa, &sgrid, &solver)?;
        conv.insert(format!("fig3_reference_gamma{g0}"), sol.report.converged);
        let pts = rich_width_sweep(&small, &net, &Rule::Dfa, &sgrid, &sol.state.kernels, &[128, 256, 512, 1024, 2048], cfg.replicates.max(16))?;
        fits.push(json!({ "gamma0": g0, "fit": sweep_fit(&pts)? }));
        for p in pts {
            sweep.push(SweepRow {
                series: "rich_entk".into(),
                rho: None,
                depth: 1,
                gamma0: g0,
                width: p.width,
                mean_sq_error: p.mean_sq_error,
                stderr: p.stderr,
            });
        }
    }
    out.write_csv("entk_width_errors.csv", &sweep)?;
    out.write_json("entk_width_fits.json", &fits)?;
    Ok("fig3: depth-4 (L=3) tanh network trained with DFA on P=10 random inputs, N=1000 (4000 when extended).
dfa_depth4.csv: per gamma0 the loss, alignment of Phi^L with yy^T, corr(g, gtilde) and eNTK alignment.
Expected: larger gamma0 trains faster, reaches higher Phi^L alignment and higher corr(g, gtilde).
entk_width_errors.csv: time-averaged relative squared eNTK error of width-N two-layer tanh DFA networks against the mean-field solution, gamma0 in {1, 2}.
Expected: slope -1 in log-log (entk_width_fits.json) with a smaller intercept for larger gamma0.
"
    .to_string())
}

/// Result of the depth-4 linear ρ-FA sweep.
#[derive(Clone, Debug, Serialize)]
pub struct RhoSweepPoint {
    pub rho: f64,
    pub initial_decay_rate: f64,
    /// Final `A(H^ℓ, yyᵀ)` per layer.
    pub final_overlap: Vec<f64>,
    pub converged: bool,
}

pub fn fig4_dataset(seed: u64) -> Result<Dataset> {
    make_dataset(&gaussian_spec(4, 20), seed)
}

pub fn fig4_grid() -> TimeGrid {
    TimeGrid {
        steps: 60,
        dt: 0.05,
    }
}

/// Linear closure of a depth-4 linear network under ρ-FA, γ₀ = 1.
pub fn fig4_solution(data: &Dataset, rho: f64, cfg: &LinearConfig) -> Result<LinearSolution> {
    linear_closure(data, 3, 1.0, &Rule::RhoFa { rho }, &fig4_grid(), cfg)
}

pub fn figure4(cfg: &ExperimentConfig, out: &mut OutputDir, conv: &mut BTreeMap<String, bool>) -> Result<String> {
    let data = fig4_dataset(cfg.seed)?;
    let grid = fig4_grid();
    let y = data.targets();
    let mut summary = Vec::new();
    let mut header = vec!["rho".to_string(), "step".into(), "time".into(), "loss".into(), "entk_alignment".into()];
    for i in 1..=3 {
        header.push(format!("gtilde_y_{i}"));
    }
    for i in 1..=3 {
        header.push(format!("h_overlap_{i}"));
    }
    let mut rows = Vec::new();
    for rho in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let sol = fig4_solution(&data, rho, &cfg.linear)?;
        conv.insert(format!("fig4_rho{rho}"), sol.report.converged);
        let loss = sol.state.loss();
        for k in 0..grid.steps {
            let mut r = vec![rho, k as f64, grid.time(k), loss[k]];
            r.push(kernel_task_alignment(&entk_equal_time(&sol.state.kernels, k), y).unwrap_or(f64::NAN));
            for t in &sol.state.kernels.gtilde {
                r.push(projected(&t.block(k, k), y));
            }
            for i in 1..=3 {
                r.push(sol.task_overlap(i, k, y)?);
            }
            rows.push(r);
        }
        summary.push(RhoSweepPoint {
            rho,
            initial_decay_rate: sol.initial_decay_rate(),
            final_overlap: (1..=3).map(|i| sol.task_overlap(i, grid.steps - 1, y)).collect::<Result<_>>()?,
            converged: sol.report.converged,
        });
    }
    out.write_table("rho_fa_linear.csv", &header, &rows)?;
    out.write_json("rho_fa_summary.json", &summary)?;
    Ok("fig4: depth-4 (L=3) linear network under rho-FA, gamma0=1, P=4 random inputs, linear closure.
Expected: larger rho decays the loss faster initially (rho_fa_summary.json initial_decay_rate increases with rho).
Larger rho gives larger gtilde_y_l.
Smaller rho gives higher eNTK task alignment and larger final h_overlap_l.
"
    .to_string())
}

/// Exactly solvable two-layer linear network: loss and alignment for GD,
/// FA (ρ = 0, 1) and Hebb, and the richness scaling of `ΔH_y`.
pub fn figure5(out: &mut OutputDir) -> Result<String> {
    let p = 4usize;
    let g0 = 1.0;
    let ynorm = (p as f64).sqrt();
    let grid = TimeGrid::new(401, 0.025)?;
    let yv = alternating_targets(p);
    let mut series: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let gd_like = |tr: &TwoLayerTrajectory| -> (Vec<f64>, Vec<f64>) {
        let loss = tr.delta.iter().map(|d| 0.5 * d * d).collect();
        let pf = p as f64;
        let align = tr.h_y.iter().map(|h| h / (pf - 1.0 + h * h).sqrt()).collect();
        (loss, align)
    };
    let gd = solve_gd(g0, ynorm, &grid, GdOdeForm::TwoLayer)?;
    let (l, a) = gd_like(&gd);
    series.push(("gd".into(), l, a));
    for rho in [0.0, 1.0] {
        let fa = solve_rho_fa(g0, rho, ynorm, &grid)?;
        let (l, a) = gd_like(&fa.trajectory);
        series.push((format!("fa_rho{rho}"), l, a));
    }
    let hebb = solve_hebb(g0, &yv, &grid)?;
    let hl = (0..grid.steps).map(|k| 0.5 * hebb.delta.column(k).norm_squared()).collect();
    let ha = (0..grid.steps).map(|k| hebb.alignment(k)).collect::<Result<Vec<_>>>()?;
    series.push(("hebb".into(), hl, ha));

    let mut header = vec!["time".to_string()];
    header.extend(series.iter().map(|s| s.0.clone()));
    let table = |pick: fn(&(String, Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<Vec<f64>> {
        (0..grid.steps)
            .map(|k| {
                let mut r = vec![grid.time(k)];
                r.extend(series.iter().map(|s| pick(s)[k]));
                r
            })
            .collect()
    };
    out.write_table("loss.csv", &header, &table(|s| &s.1))?;
    out.write_table("alignment.csv", &header, &table(|s| &s.2))?;

    let gammas: Vec<f64> = (0..=28).map(|i| 10f64.powf(-3.0 + 0.25 * i as f64)).collect();
    let rules = [
        ("gd", ExactRule::Gd { form: GdOdeForm::TwoLayer }),
        ("fa_rho0", ExactRule::RhoFa { rho: 0.0 }),
        ("fa_rho1", ExactRule::RhoFa { rho: 1.0 }),
    ];
    let mut dh_rows = Vec::new();
    let mut fits = serde_json::Map::new();
    for (name, rule) in rules {
        let sweep = delta_h_sweep(rule, 1.0, &gammas)?;
        let branch = |lo: f64, hi: f64| {
            let (x, y): (Vec<f64>, Vec<f64>) = sweep.iter().filter(|(g, _)| *g >= lo && *g <= hi).cloned().unzip();
            loglog_fit(&x, &y)
        };
        fits.insert(
            name.into(),
            json!({ "small_gamma": branch(1e-3, 1e-2)?, "large_gamma": branch(1e2, 1e4)? }),
        );
        for (g, dh) in sweep {
            dh_rows.push(json!({ "rule": name, "gamma0": g, "delta_h_y": dh }));
        }
    }
    let hebb_gammas: Vec<f64> = gammas.iter().cloned().filter(|&g| g <= 10.0).collect();
    for (g, dh) in delta_h_sweep(ExactRule::Hebb, 1.0, &hebb_gammas)? {
        dh_rows.push(json!({ "rule": "hebb", "gamma0": g, "delta_h_y": dh }));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rule", "gamma0", "delta_h_y"])?;
    for r in &dh_rows {
        w.write_record([
            r["rule"].as_str().unwrap_or_default().to_string(),
            format!("{:e}", r["gamma0"].as_f64().unwrap_or(f64::NAN)),
            format!("{:e}", r["delta_h_y"].as_f64().unwrap_or(f64::NAN)),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    out.write_bytes("delta_h_vs_gamma.csv", &bytes)?;
    out.write_json("delta_h_fits.json", &Value::Object(fits))?;
    Ok("fig5: two-layer linear network on P=4 whitened inputs with targets +-1, gamma0=1.
loss.csv: rho=0 FA and Hebb share early dynamics, as do rho=1 FA and GD; all differ late.
alignment.csv: alignment rises for GD and FA but not for Hebb.
delta_h_vs_gamma.csv / delta_h_fits.json: Delta H_y ~ gamma0^2 at small gamma0 for GD and FA (Hebb, gamma0 <= 10, is listed but not fitted),
~ gamma0 for GD and ~ gamma0^(2/3) for FA at large gamma0; rho=1 FA stays below rho=0 FA.
"
    .to_string())
}

/// Kernel covariances of a depth-10 ReLU network at initialization.
pub fn figure6(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<String> {
    let net = figure_net(cfg, 10, 1024, 1.0, Activation::Relu);
    let r = cfg.finite_size.replicates;
    let est = covariance_from_samples(&ensemble_samples(&net, r)?, net.width)?;
    let pred = nlo_prediction(Activation::Relu, 10, 1024)?;
    write_covariance(out, "", &est, &pred)?;
    let widths = if cfg.finite_size.widths.is_empty() {
        vec![128, 256, 512, 1024]
    } else {
        cfg.finite_size.widths.clone()
    };
    out.write_csv("variance_vs_width.csv", &variance_rows(&net, &widths, r.min(200))?)?;
    Ok("fig6: L=10 ReLU MLP, single unit input, N=1024, ensemble of independently initialized networks.
cov_phi.csv / cov_g.csv: empirical covariance, standard error and the prediction 5 min(l,l')/N
(5 min(L+1-l, L+1-l')/N for G). Var(Phi^l) grows with l; Var(G^l) is largest for small l.
variance_vs_width.csv: every layer's variance scales as 1/N.
"
    .to_string())
}
