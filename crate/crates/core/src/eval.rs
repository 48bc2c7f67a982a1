//! Risk estimates along sampled paths, Monte Carlo aggregation, the
//! irreducible-error estimator, the complexity-term diagnostic, and the
//! slice/overlay exports.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Predictor, ReluNetwork};
use crate::sde::SdeModel;
use crate::seed::{mix, StreamRole};
use crate::simulate::{in_unit_box, make_regression_set, subsample, SampledPath, Simulator};
use crate::train::{empirical_loss, LossBreakdown};

/// Evaluates the drift of a model as a predictor, so that the true
/// coefficient can stand in for a fitted network.
pub struct DriftPredictor<'a, M: ?Sized>(pub &'a M);

impl<M: SdeModel + ?Sized> Predictor for DriftPredictor<'_, M> {
    fn input_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn output_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn predict(&self, x: &[f64], out: &mut [f64]) {
        self.0.drift(x, out)
    }
}

/// Mean squared distance between a predictor and the box-restricted drift
/// along a path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRisk {
    /// Divisor is the number of path points `N` (out-of-box points count as 0).
    pub literal: LossBreakdown,
    /// Divisor is the number of in-box points. Diagnostic.
    pub in_box: LossBreakdown,
    pub in_box_fraction: f64,
}

/// `(1/N) Σ_{k<N} (f̂(X_kδ) − f₀(X_kδ))²` per head, where `N = rows − 1`, both
/// functions are restricted to the closed unit box and `f₀` is the drift.
pub fn path_risk<P, M>(pred: &P, path: &SampledPath, model: &M) -> Result<PathRisk>
where
    P: Predictor + ?Sized,
    M: SdeModel + ?Sized,
{
    let d = model.state_dim();
    if pred.input_dim() != d || pred.output_dim() != d {
        return Err(Error::invalid(format!(
            "predictor maps {}→{}, model state dimension is {d}",
            pred.input_dim(),
            pred.output_dim()
        )));
    }
    if path.len() < 2 {
        return Err(Error::invalid("risk needs a path with at least 2 rows"));
    }
    let n = path.len() - 1;
    let mut sums = vec![0.0; d];
    let mut inside = 0usize;
    let mut fhat = vec![0.0; d];
    let mut f0 = vec![0.0; d];
    for row in path.states.rows().into_iter().take(n) {
        let x = row.to_vec();
        if !in_unit_box(&x) {
            continue;
        }
        inside += 1;
        pred.predict(&x, &mut fhat);
        model.drift(&x, &mut f0);
        for h in 0..d {
            let r = fhat[h] - f0[h];
            sums[h] += r * r;
        }
    }
    let literal = per_head(&sums, n);
    let in_box = per_head(&sums, inside.max(1));
    Ok(PathRisk {
        literal,
        in_box,
        in_box_fraction: inside as f64 / n as f64,
    })
}

fn per_head(sums: &[f64], n: usize) -> LossBreakdown {
    let per_head: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
    let mean = per_head.iter().sum::<f64>() / per_head.len() as f64;
    LossBreakdown { per_head, mean }
}

/// Generalization risk for one drift component on an independent test path.
pub fn risk_estimate<P, M>(pred: &P, test_path: &SampledPath, model: &M, component: usize) -> Result<f64>
where
    P: Predictor + ?Sized,
    M: SdeModel + ?Sized,
{
    check_component(component, model.state_dim())?;
    Ok(path_risk(pred, test_path, model)?.literal.per_head[component])
}

/// Same formula as [`risk_estimate`], evaluated on the training path.
pub fn train_risk<P, M>(pred: &P, train_path: &SampledPath, model: &M, component: usize) -> Result<f64>
where
    P: Predictor + ?Sized,
    M: SdeModel + ?Sized,
{
    risk_estimate(pred, train_path, model, component)
}

fn check_component(component: usize, d: usize) -> Result<()> {
    if component >= d {
        return Err(Error::invalid(format!("component {component} out of range for dimension {d}")));
    }
    Ok(())
}

/// Loss on the training difference quotients at the fitted network.
pub fn quotients_mse(net: &ReluNetwork, regset: &crate::simulate::RegressionSet, in_box_only: bool) -> Result<LossBreakdown> {
    empirical_loss(net, regset, in_box_only)
}

/// One Monte Carlo replicate of one `(skip, T)` cell. Values are unscaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub skip: usize,
    pub horizon: f64,
    pub replicate: usize,
    pub test_mse: LossBreakdown,
    pub train_mse: LossBreakdown,
    pub quotients_mse: LossBreakdown,
    /// Test risk normalized by in-box points only.
    pub test_mse_in_box: LossBreakdown,
    /// Share of test points inside the unit box.
    pub test_in_box_fraction: f64,
}

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub std_error: f64,
}

impl MeanSe {
    /// Two-pass mean and sample variance with compensated sums. The standard
    /// error is 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanSe {
                mean: f64::NAN,
                std_error: f64::NAN,
            };
        }
        let mean = neumaier_sum(values.iter().copied()) / n as f64;
        if n == 1 {
            return MeanSe { mean, std_error: 0.0 };
        }
        let var = neumaier_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1) as f64;
        MeanSe {
            mean,
            std_error: (var / n as f64).sqrt(),
        }
    }
}

/// Kahan–Neumaier compensated summation.
pub fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Aggregate of one `(skip, T)` cell over its replicates (head-averaged values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub skip: usize,
    pub horizon: f64,
    pub replicates: usize,
    pub test: MeanSe,
    pub train: MeanSe,
    pub quotients: MeanSe,
}

/// Groups records by `(skip, T)` in order of first appearance.
pub fn summarize(records: &[MetricsRecord]) -> Vec<CellSummary> {
    let mut keys: Vec<(usize, f64)> = Vec::new();
    for r in records {
        if !keys.iter().any(|&(s, t)| s == r.skip && t == r.horizon) {
            keys.push((r.skip, r.horizon));
        }
    }
    keys.into_iter()
        .map(|(skip, horizon)| {
            let cell: Vec<&MetricsRecord> = records
                .iter()
                .filter(|r| r.skip == skip && r.horizon == horizon)
                .collect();
            let pick = |f: fn(&MetricsRecord) -> f64| MeanSe::of(&cell.iter().map(|r| f(r)).collect::<Vec<_>>());
            CellSummary {
                skip,
                horizon,
                replicates: cell.len(),
                test: pick(|r| r.test_mse.mean),
                train: pick(|r| r.train_mse.mean),
                quotients: pick(|r| r.quotients_mse.mean),
            }
        })
        .collect()
}

/// Row layout of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsRows {
    /// One row per replicate, `head = avg`.
    Averaged,
    /// One row per replicate and head, heads numbered from 1.
    PerHead,
}

/// `skip,T,replicate,head,test_mse,train_mse,quotients_mse` (unscaled).
pub fn write_metrics_csv<W: Write>(mut w: W, records: &[MetricsRecord], rows: MetricsRows) -> Result<()> {
    writeln!(w, "skip,T,replicate,head,test_mse,train_mse,quotients_mse")?;
    for r in records {
        match rows {
            MetricsRows::Averaged => writeln!(
                w,
                "{},{},{},avg,{:.16e},{:.16e},{:.16e}",
                r.skip, r.horizon, r.replicate, r.test_mse.mean, r.train_mse.mean, r.quotients_mse.mean
            )?,
            MetricsRows::PerHead => {
                for h in 0..r.test_mse.per_head.len() {
                    writeln!(
                        w,
                        "{},{},{},{},{:.16e},{:.16e},{:.16e}",
                        r.skip,
                        r.horizon,
                        r.replicate,
                        h + 1,
                        r.test_mse.per_head[h],
                        r.train_mse.per_head[h],
                        r.quotients_mse.per_head[h]
                    )?
                }
            }
        }
    }
    Ok(())
}

/// Table layout: means and standard errors scaled by 10³.
pub fn write_summary_csv<W: Write>(mut w: W, cells: &[CellSummary]) -> Result<()> {
    writeln!(
        w,
        "skip,T,replicates,test_mse_x1e3,test_se_x1e3,train_mse_x1e3,train_se_x1e3,quotients_mse_x1e3,quotients_se_x1e3"
    )?;
    for c in cells {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            c.skip,
            c.horizon,
            c.replicates,
            1e3 * c.test.mean,
            1e3 * c.test.std_error,
            1e3 * c.train.mean,
            1e3 * c.train.std_error,
            1e3 * c.quotients.mean,
            1e3 * c.quotients.std_error
        )?;
    }
    Ok(())
}

/// In-box diagnostics per replicate:
/// `skip,T,replicate,test_mse_in_box,test_in_box_fraction`.
pub fn write_diagnostics_csv<W: Write>(mut w: W, records: &[MetricsRecord]) -> Result<()> {
    writeln!(w, "skip,T,replicate,test_mse_in_box,test_in_box_fraction")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{:.16e},{:.16e}",
            r.skip, r.horizon, r.replicate, r.test_mse_in_box.mean, r.test_in_box_fraction
        )?;
    }
    Ok(())
}

/// Monte Carlo estimate of the loss of the true drift on the difference
/// quotients, averaged over components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrreducibleEstimate {
    pub skip: usize,
    pub delta: f64,
    pub value: MeanSe,
    /// Per-component means over replicates.
    pub per_head: Vec<f64>,
}

/// Irreducible error at several skips, sharing the same `n_mc` fine paths
/// across skips. Each replicate seeds its own stream from `seed`.
pub fn irreducible_error_grid<M: SdeModel + ?Sized>(
    model: &M,
    skips: &[usize],
    horizon: f64,
    mesh: f64,
    n_mc: usize,
    initial_state: &[f64],
    seed: u64,
) -> Result<Vec<IrreducibleEstimate>> {
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be at least 1"));
    }
    if skips.is_empty() {
        return Err(Error::invalid("need at least one skip"));
    }
    let d = model.state_dim();
    let sim = Simulator::new(mesh);
    // per replicate: per skip, per head
    let per_rep: Vec<Vec<Vec<f64>>> = (0..n_mc)
        .into_par_iter()
        .map(|r| {
            let path_seed = mix(seed, &[r as u64, StreamRole::Irreducible.tag()]);
            let traj = sim.simulate(model, horizon, initial_state, path_seed)?;
            skips
                .iter()
                .map(|&skip| {
                    let set = make_regression_set(&subsample(&traj, skip)?)?;
                    let mut sums = vec![0.0; d];
                    let mut b = vec![0.0; d];
                    for (x, y) in set.inputs.rows().into_iter().zip(set.responses.rows()) {
                        model.drift(&x.to_vec(), &mut b);
                        for h in 0..d {
                            sums[h] += (y[h] - b[h]).powi(2);
                        }
                    }
                    Ok(sums.into_iter().map(|s| s / set.len() as f64).collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()
        })
        .collect::<Result<_>>()?;

    Ok(skips
        .iter()
        .enumerate()
        .map(|(si, &skip)| {
            let averaged: Vec<f64> = per_rep
                .iter()
                .map(|rep| rep[si].iter().sum::<f64>() / d as f64)
                .collect();
            let per_head = (0..d)
                .map(|h| neumaier_sum(per_rep.iter().map(|rep| rep[si][h])) / n_mc as f64)
                .collect();
            IrreducibleEstimate {
                skip,
                delta: skip as f64 * mesh,
                value: MeanSe::of(&averaged),
                per_head,
            }
        })
        .collect())
}

/// Irreducible error at a single skip.
pub fn irreducible_error<M: SdeModel + ?Sized>(
    model: &M,
    skip: usize,
    horizon: f64,
    mesh: f64,
    n_mc: usize,
    initial_state: &[f64],
    seed: u64,
) -> Result<IrreducibleEstimate> {
    Ok(irreducible_error_grid(model, &[skip], horizon, mesh, n_mc, initial_state, seed)?.remove(0))
}

/// `skip,delta,irreducible_x1e3,se_x1e3,head1_x1e3,...`
pub fn write_irreducible_csv<W: Write>(mut w: W, estimates: &[IrreducibleEstimate]) -> Result<()> {
    let heads = estimates.first().map_or(0, |e| e.per_head.len());
    write!(w, "skip,delta,irreducible_x1e3,se_x1e3")?;
    for h in 1..=heads {
        write!(w, ",head{h}_x1e3")?;
    }
    writeln!(w)?;
    for e in estimates {
        write!(
            w,
            "{},{},{:.6},{:.6}",
            e.skip,
            e.delta,
            1e3 * e.value.mean,
            1e3 * e.value.std_error
        )?;
        for v in &e.per_head {
            write!(w, ",{:.6}", 1e3 * v)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Shape of the variance term of the risk inequality with unit constants,
/// `F² (s(L ln s + ln(Nδ)) ln(Nδ) / (Nδ) + δ)`. A diagnostic, not a bound.
pub fn bound_diagnostic(s: usize, depth: usize, n: usize, delta: f64, sup: f64) -> Result<f64> {
    let horizon = n as f64 * delta;
    if !(horizon > 1.0) {
        return Err(Error::invalid(format!("need Nδ > 1, got {horizon}")));
    }
    if s < 2 {
        return Err(Error::invalid(format!("need s ≥ 2, got {s}")));
    }
    if !(delta > 0.0) || !sup.is_finite() {
        return Err(Error::invalid("need δ > 0 and finite F"));
    }
    let s = s as f64;
    let log_t = horizon.ln();
    let first = s * (depth as f64 * s.ln() + log_t) * log_t / horizon;
    Ok(sup * sup * (first + delta))
}

/// Replicate statistics of a fitted component along a one-dimensional slice
/// of the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceProfile {
    pub grid: Vec<f64>,
    pub fixed_index: usize,
    pub fixed_value: f64,
    pub component: usize,
    pub mean_prediction: Vec<f64>,
    pub band_low: Vec<f64>,
    pub band_high: Vec<f64>,
    pub true_drift: Vec<f64>,
}

impl SliceProfile {
    /// Grid points where the band misses the true drift.
    pub fn uncovered(&self) -> Vec<bool> {
        self.true_drift
            .iter()
            .zip(self.band_low.iter().zip(&self.band_high))
            .map(|(t, (lo, hi))| t < lo || t > hi)
            .collect()
    }

    pub fn uncovered_fraction(&self) -> f64 {
        let u = self.uncovered();
        u.iter().filter(|&&b| b).count() as f64 / u.len() as f64
    }

    /// `x,mean,lo,hi,true`
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,mean,lo,hi,true")?;
        for i in 0..self.grid.len() {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.grid[i], self.mean_prediction[i], self.band_low[i], self.band_high[i], self.true_drift[i]
            )?;
        }
        Ok(())
    }
}

/// Pointwise mean of the box-clipped predictions of `preds` along
/// `x[fixed_index] = fixed_value`, the free coordinate running over an even
/// grid of `[0, 1]`. Bands are `mean ± band_multiplier · sd` with the sample
/// standard deviation across replicates.
pub fn slice_profile<P, M>(
    preds: &[P],
    model: &M,
    component: usize,
    fixed_index: usize,
    fixed_value: f64,
    grid_size: usize,
    band_multiplier: f64,
) -> Result<SliceProfile>
where
    P: Predictor,
    M: SdeModel + ?Sized,
{
    let d = model.state_dim();
    if preds.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 replicates, got {}", preds.len())));
    }
    if d != 2 {
        return Err(Error::invalid("slices are defined for 2-d models"));
    }
    check_component(component, d)?;
    check_component(fixed_index, d)?;
    if !(0.0..=1.0).contains(&fixed_value) {
        return Err(Error::invalid(format!("fixed value {fixed_value} outside [0, 1]")));
    }
    if grid_size < 2 {
        return Err(Error::invalid("grid_size must be at least 2"));
    }
    if !(band_multiplier >= 0.0) {
        return Err(Error::invalid("band multiplier must be nonnegative"));
    }
    let free = 1 - fixed_index;
    let grid: Vec<f64> = (0..grid_size).map(|i| i as f64 / (grid_size - 1) as f64).collect();
    let n = preds.len() as f64;
    let mut out = vec![0.0; d];
    let mut profile = SliceProfile {
        grid: grid.clone(),
        fixed_index,
        fixed_value,
        component,
        mean_prediction: Vec::with_capacity(grid_size),
        band_low: Vec::with_capacity(grid_size),
        band_high: Vec::with_capacity(grid_size),
        true_drift: Vec::with_capacity(grid_size),
    };
    for &g in &grid {
        let mut x = vec![0.0; d];
        x[fixed_index] = fixed_value;
        x[free] = g;
        let values: Vec<f64> = preds
            .iter()
            .map(|p| {
                p.predict_clipped(&x, &mut out);
                out[component]
            })
            .collect();
        // offset from the first value keeps identical replicates exact
        let mean = values[0] + values.iter().map(|v| v - values[0]).sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let half = band_multiplier * var.sqrt();
        model.drift(&x, &mut out);
        profile.mean_prediction.push(mean);
        profile.band_low.push(mean - half);
        profile.band_high.push(mean + half);
        profile.true_drift.push(out[component]);
    }
    Ok(profile)
}

/// True and fitted drift component along a path, one entry per retained point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub t: Vec<f64>,
    pub truth: Vec<f64>,
    pub predicted: Vec<f64>,
}

impl Overlay {
    pub fn mean_squared_gap(&self) -> f64 {
        let n = self.t.len().max(1) as f64;
        self.truth
            .iter()
            .zip(&self.predicted)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n
    }

    /// `t,true,predicted`
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,true,predicted")?;
        for i in 0..self.t.len() {
            writeln!(w, "{:.16e},{:.16e},{:.16e}", self.t[i], self.truth[i], self.predicted[i])?;
        }
        Ok(())
    }
}

/// Box-restricted drift component and clipped prediction at every point of
/// `path`.
pub fn path_overlay<P, M>(pred: &P, path: &SampledPath, model: &M, component: usize) -> Result<Overlay>
where
    P: Predictor + ?Sized,
    M: SdeModel + ?Sized,
{
    let d = model.state_dim();
    check_component(component, d)?;
    if path.is_empty() {
        return Err(Error::invalid("overlay needs a nonempty path"));
    }
    let mut fhat = vec![0.0; d];
    let mut f0 = vec![0.0; d];
    let mut overlay = Overlay {
        t: Vec::with_capacity(path.len()),
        truth: Vec::with_capacity(path.len()),
        predicted: Vec::with_capacity(path.len()),
    };
    for (k, row) in path.states.rows().into_iter().enumerate() {
        let x = row.to_vec();
        pred.predict_clipped(&x, &mut fhat);
        if in_unit_box(&x) {
            model.drift(&x, &mut f0);
        } else {
            f0.fill(0.0);
        }
        overlay.t.push(k as f64 * path.delta);
        overlay.truth.push(f0[component]);
        overlay.predicted.push(fhat[component]);
    }
    Ok(overlay)
}
