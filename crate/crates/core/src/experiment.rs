//! Configuration and orchestration of the Monte Carlo grid over
//! `(skip, T, replicate)`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    path_overlay, path_risk, quotients_mse, slice_profile, summarize, write_diagnostics_csv, write_metrics_csv,
    write_summary_csv, CellSummary, MetricsRecord, MetricsRows,
};
use crate::nn::ReluNetwork;
use crate::sde::{benchmark_model, BenchmarkModel, BenchmarkParams};
use crate::seed::{derive_seed, StreamRole};
use crate::simulate::{make_regression_set, subsample, SampledPath, Simulator};
use crate::train::{init_network, train, TrainConfig, TrainReport};

/// Slice export over all replicates of one cell. Indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceRequest {
    pub skip: usize,
    pub t: f64,
    pub component: usize,
    pub fixed_index: usize,
    pub fixed_value: f64,
    pub grid_size: usize,
    pub band_multiplier: f64,
}

impl Default for SliceRequest {
    fn default() -> Self {
        SliceRequest {
            skip: 20,
            t: 100.0,
            component: 2,
            fixed_index: 2,
            fixed_value: 0.5,
            grid_size: 101,
            band_multiplier: 2.0,
        }
    }
}

/// Overlay of the replicate-0 network of one cell on its test path.
/// `component` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlayRequest {
    pub skip: usize,
    pub t: f64,
    pub component: usize,
}

impl Default for OverlayRequest {
    fn default() -> Self {
        OverlayRequest {
            skip: 20,
            t: 100.0,
            component: 1,
        }
    }
}

/// Settings of the irreducible-error table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrreducibleRequest {
    pub horizon: f64,
    pub n_mc: usize,
}

impl Default for IrreducibleRequest {
    fn default() -> Self {
        IrreducibleRequest {
            horizon: 100.0,
            n_mc: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Fine simulation step `Δ`.
    pub mesh: f64,
    pub skip_list: Vec<usize>,
    pub t_list: Vec<f64>,
    pub n_mc: usize,
    pub initial_state: Vec<f64>,
    pub widths: Vec<usize>,
    /// Write every trained network as JSON under `networks/`.
    pub save_networks: bool,
    pub model: BenchmarkParams,
    pub train: TrainConfig,
    pub irreducible: IrreducibleRequest,
    pub slices: Vec<SliceRequest>,
    pub overlays: Vec<OverlayRequest>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 0,
            output_dir: PathBuf::from("out"),
            mesh: 1e-3,
            skip_list: vec![200, 100, 50, 20, 10],
            t_list: vec![10.0, 25.0, 50.0, 100.0],
            n_mc: 50,
            initial_state: vec![0.0, 0.0],
            widths: vec![2, 32, 32, 2],
            save_networks: false,
            model: BenchmarkParams::default(),
            train: TrainConfig::default(),
            irreducible: IrreducibleRequest::default(),
            slices: Vec::new(),
            overlays: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mesh > 0.0 && self.mesh.is_finite()) {
            return Err(Error::invalid(format!("mesh must be positive, got {}", self.mesh)));
        }
        if self.skip_list.is_empty() || self.skip_list.contains(&0) {
            return Err(Error::invalid("skip_list must be nonempty with positive entries"));
        }
        if self.t_list.is_empty() || self.t_list.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::invalid("t_list must be nonempty with positive entries"));
        }
        if self.n_mc == 0 {
            return Err(Error::invalid("n_mc must be at least 1"));
        }
        let max_skip = *self.skip_list.iter().max().unwrap_or(&0);
        let min_t = self.t_list.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(self.mesh * (max_skip as f64) < min_t) {
            return Err(Error::invalid(format!(
                "need mesh·max(skip) < min(T), got {} ≥ {min_t}",
                self.mesh * max_skip as f64
            )));
        }
        if self.widths.len() < 2 {
            return Err(Error::invalid("widths needs at least input and output"));
        }
        let d = self.initial_state.len();
        if d != 2 || self.widths[0] != d || *self.widths.last().unwrap() != d {
            return Err(Error::invalid(format!(
                "the benchmark is 2-d: initial_state has {d} entries, widths {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("widths must be positive"));
        }
        self.model.validate()?;
        self.train.validate()?;
        if !(self.irreducible.horizon > 0.0) || self.irreducible.n_mc == 0 {
            return Err(Error::invalid("irreducible needs horizon > 0 and n_mc ≥ 1"));
        }
        for s in &self.slices {
            self.check_cell(s.skip, s.t)?;
            check_index(s.component, d, "slice component")?;
            check_index(s.fixed_index, d, "slice fixed_index")?;
            if !(0.0..=1.0).contains(&s.fixed_value) || s.grid_size < 2 || !(s.band_multiplier >= 0.0) {
                return Err(Error::invalid("slice needs fixed_value in [0,1], grid_size ≥ 2, band_multiplier ≥ 0"));
            }
            if self.n_mc < 2 {
                return Err(Error::invalid("slices need n_mc ≥ 2"));
            }
        }
        for o in &self.overlays {
            self.check_cell(o.skip, o.t)?;
            check_index(o.component, d, "overlay component")?;
        }
        Ok(())
    }

    fn check_cell(&self, skip: usize, t: f64) -> Result<()> {
        if !self.skip_list.contains(&skip) || !self.t_list.contains(&t) {
            return Err(Error::invalid(format!("cell skip={skip}, T={t} is not in the grid")));
        }
        Ok(())
    }

    fn wants_networks(&self, skip: usize, t: f64) -> bool {
        self.slices.iter().any(|s| s.skip == skip && s.t == t)
            || self.overlays.iter().any(|o| o.skip == skip && o.t == t)
    }
}

fn check_index(i: usize, d: usize, what: &str) -> Result<()> {
    if i == 0 || i > d {
        return Err(Error::invalid(format!("{what} must be in 1..={d}, got {i}")));
    }
    Ok(())
}

/// Everything one replicate produces.
#[derive(Debug, Clone)]
pub struct ReplicateOutput {
    pub record: MetricsRecord,
    pub network: ReluNetwork,
    pub report: TrainReport,
    pub test_path: SampledPath,
}

/// The subsampled training or test path of one replicate.
pub fn cell_path(
    config: &ExperimentConfig,
    model: &BenchmarkModel,
    skip: usize,
    horizon: f64,
    replicate: usize,
    role: StreamRole,
) -> Result<SampledPath> {
    let seed = derive_seed(config.master_seed, skip, horizon, replicate, role);
    let traj = Simulator::new(config.mesh).simulate(model, horizon, &config.initial_state, seed)?;
    subsample(&traj, skip)
}

/// Simulates the training and test paths, trains from a fresh initialization
/// and evaluates. Streams derive from `(master_seed, skip, T, replicate)`.
pub fn run_replicate(
    config: &ExperimentConfig,
    model: &BenchmarkModel,
    skip: usize,
    horizon: f64,
    replicate: usize,
) -> Result<ReplicateOutput> {
    let seed = |role| derive_seed(config.master_seed, skip, horizon, replicate, role);
    let train_path = cell_path(config, model, skip, horizon, replicate, StreamRole::TrainPath)?;
    let regset = make_regression_set(&train_path)?;

    let init = init_network(&config.widths, seed(StreamRole::Init))?;
    let mut train_config = config.train.clone();
    train_config.seed = seed(StreamRole::Shuffle);
    let (network, report) = train(&init, &regset, &train_config)?;

    let test_path = cell_path(config, model, skip, horizon, replicate, StreamRole::TestPath)?;

    let test = path_risk(&network, &test_path, model)?;
    let train_fit = path_risk(&network, &train_path, model)?;
    let quotients = quotients_mse(&network, &regset, config.train.in_box_only)?;
    Ok(ReplicateOutput {
        record: MetricsRecord {
            skip,
            horizon,
            replicate,
            test_mse: test.literal,
            train_mse: train_fit.literal,
            quotients_mse: quotients,
            test_mse_in_box: test.in_box,
            test_in_box_fraction: test.in_box_fraction,
        },
        network,
        report,
        test_path,
    })
}

/// A replicate that did not produce a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub skip: usize,
    pub horizon: f64,
    pub replicate: usize,
    pub error: String,
    pub divergence: bool,
}

/// How the grid ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridStatus {
    /// Every cell has at least one successful replicate.
    Complete,
    /// Some cell has none, and not all failures were divergences.
    PartialFailure,
    /// No cell succeeded and every failure was a divergence.
    Diverged,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    /// Sorted by grid order, then replicate.
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<ReplicateFailure>,
    pub summary: Vec<CellSummary>,
    pub empty_cells: Vec<(usize, f64)>,
    pub files: Vec<PathBuf>,
}

impl ExperimentOutcome {
    pub fn status(&self) -> GridStatus {
        if self.empty_cells.is_empty() {
            GridStatus::Complete
        } else if self.records.is_empty() && self.failures.iter().all(|f| f.divergence) {
            GridStatus::Diverged
        } else {
            GridStatus::PartialFailure
        }
    }
}

/// Runs the full grid on a pool of `workers` threads and writes
/// `metrics.csv`, `metrics_heads.csv`, `metrics_diagnostics.csv`,
/// `summary.csv`, any requested slices and overlays, and `manifest.json`
/// into `config.output_dir`.
///
/// Tasks are collected in grid order, so the output does not depend on the
/// number of workers. With `deterministic` the records are additionally
/// sorted by `(skip, T, replicate)` before aggregation.
pub fn run_experiment(config: &ExperimentConfig, workers: usize, deterministic: bool) -> Result<ExperimentOutcome> {
    config.validate()?;
    let model = benchmark_model(config.model)?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;

    let tasks: Vec<(usize, f64, usize)> = config
        .skip_list
        .iter()
        .flat_map(|&s| config.t_list.iter().map(move |&t| (s, t)))
        .flat_map(|(s, t)| (0..config.n_mc).map(move |r| (s, t, r)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<ReplicateOutput>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(s, t, r)| {
                run_replicate(config, &model, s, t, r).map(|mut o| {
                    if !config.wants_networks(s, t) {
                        o.test_path.states = ndarray::Array2::zeros((0, o.test_path.dim()));
                    }
                    o
                })
            })
            .collect()
    });

    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    for (&(skip, horizon, replicate), res) in tasks.iter().zip(results) {
        match res {
            Ok(o) => outputs.push(o),
            Err(e) => failures.push(ReplicateFailure {
                skip,
                horizon,
                replicate,
                divergence: e.is_divergence(),
                error: e.to_string(),
            }),
        }
    }
    if deterministic {
        outputs.sort_by(|a, b| {
            let key = |o: &ReplicateOutput| (o.record.skip, o.record.horizon.to_bits(), o.record.replicate);
            key(a).cmp(&key(b))
        });
    }
    let records: Vec<MetricsRecord> = outputs.iter().map(|o| o.record.clone()).collect();
    let summary = summarize(&records);
    let empty_cells: Vec<(usize, f64)> = config
        .skip_list
        .iter()
        .flat_map(|&s| config.t_list.iter().map(move |&t| (s, t)))
        .filter(|&(s, t)| !records.iter().any(|r| r.skip == s && r.horizon == t))
        .collect();

    let mut files = Vec::new();
    let mut create = |name: String| -> Result<BufWriter<File>> {
        let path = out.join(&name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        files.push(PathBuf::from(name));
        Ok(BufWriter::new(File::create(path)?))
    };
    write_metrics_csv(create("metrics.csv".into())?, &records, MetricsRows::Averaged)?;
    write_metrics_csv(create("metrics_heads.csv".into())?, &records, MetricsRows::PerHead)?;
    write_diagnostics_csv(create("metrics_diagnostics.csv".into())?, &records)?;
    write_summary_csv(create("summary.csv".into())?, &summary)?;

    if config.save_networks {
        for o in &outputs {
            let r = &o.record;
            let mut w = create(format!("networks/skip{}_T{}_rep{}.json", r.skip, r.horizon, r.replicate))?;
            std::io::Write::write_all(&mut w, o.network.to_json()?.as_bytes())?;
        }
    }

    for s in &config.slices {
        let nets: Vec<&ReluNetwork> = outputs
            .iter()
            .filter(|o| o.record.skip == s.skip && o.record.horizon == s.t)
            .map(|o| &o.network)
            .collect();
        if nets.len() < 2 {
            continue;
        }
        let profile = slice_profile(
            &nets,
            &model,
            s.component - 1,
            s.fixed_index - 1,
            s.fixed_value,
            s.grid_size,
            s.band_multiplier,
        )?;
        profile.write_csv(create(format!(
            "slice_skip{}_T{}_c{}_fix{}.csv",
            s.skip, s.t, s.component, s.fixed_index
        ))?)?;
    }
    for req in &config.overlays {
        let Some(o) = outputs
            .iter()
            .find(|o| o.record.skip == req.skip && o.record.horizon == req.t)
        else {
            continue;
        };
        let overlay = path_overlay(&o.network, &o.test_path, &model, req.component - 1)?;
        overlay.write_csv(create(format!(
            "overlay_skip{}_T{}_c{}_rep{}.csv",
            req.skip, req.t, req.component, o.record.replicate
        ))?)?;
    }

    let outcome = ExperimentOutcome {
        records,
        failures,
        summary,
        empty_cells,
        files,
    };
    let extra = serde_json::json!({
        "workers": workers.max(1),
        "deterministic": deterministic,
        "status": outcome.status(),
        "failures": outcome.failures,
        "empty_cells": outcome.empty_cells,
    });
    write_manifest(out, "experiment", config, &outcome.files, extra)?;
    Ok(outcome)
}

/// Writes `manifest.json` with the resolved configuration, the master seed,
/// the produced files and any command-specific fields.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    config: &ExperimentConfig,
    files: &[PathBuf],
    extra: serde_json::Value,
) -> Result<()> {
    let manifest = serde_json::json!({
        "command": command,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "master_seed": config.master_seed,
        "config": config,
        "files": files,
        "details": extra,
    });
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
