//! Mini-batch Adam on the quadratic difference-quotient loss with the row
//! norm constraint `‖W_l[j,·]‖₂ ≤ √p_l`, `‖v_l‖₂ ≤ √p_l` restored by rescaling
//! after every update.

use std::io::Write;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, ArrayViewMut1, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{row_norm, Gradients, ReluNetwork};
use crate::simulate::{in_unit_box, RegressionSet};

/// Slack allowed when checking the row norm constraint.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Per-layer radii `r_0..r_L`; `√p_l` when absent.
    pub projection_radii: Option<Vec<f64>>,
    /// Seeds the epoch shuffles.
    pub seed: u64,
    /// Train only on pairs whose input lies in the unit box.
    pub in_box_only: bool,
    /// Check the constraint after every update and count violations.
    pub check_feasibility: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            projection_radii: None,
            seed: 0,
            in_box_only: true,
            check_feasibility: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0) {
            return Err(Error::invalid("adam_beta1 must lie in (0, 1)"));
        }
        if !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return Err(Error::invalid("adam_beta2 must lie in (0, 1)"));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::invalid("adam_epsilon must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if let Some(r) = &self.projection_radii {
            if r.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::invalid("projection radii must be positive"));
            }
        }
        Ok(())
    }

    fn radii_for(&self, net: &ReluNetwork) -> Result<Vec<f64>> {
        match &self.projection_radii {
            Some(r) if r.len() != net.depth() + 1 => Err(Error::invalid(format!(
                "{} projection radii given for a network with {} weight matrices",
                r.len(),
                net.depth() + 1
            ))),
            Some(r) => Ok(r.clone()),
            None => Ok(default_radii(net.widths())),
        }
    }
}

/// `√p_l` for `l = 0..=L`: the radius for the rows of `W_l` and for `v_l`.
pub fn default_radii(widths: &[usize]) -> Vec<f64> {
    widths[..widths.len() - 1].iter().map(|&p| (p as f64).sqrt()).collect()
}

/// Mean squared error per output head and its average over heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_head: Vec<f64>,
    pub mean: f64,
}

impl LossBreakdown {
    fn from_sums(sums: Vec<f64>, n: usize) -> Self {
        let per_head: Vec<f64> = sums.into_iter().map(|s| s / n as f64).collect();
        let mean = per_head.iter().sum::<f64>() / per_head.len() as f64;
        LossBreakdown { per_head, mean }
    }

    fn is_finite(&self) -> bool {
        self.mean.is_finite() && self.per_head.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Full-data loss after every epoch.
    pub loss_by_epoch: Vec<LossBreakdown>,
    pub final_loss: LossBreakdown,
    pub projection_event_count: usize,
    /// Updates after which some norm exceeded its radius; only counted when
    /// `check_feasibility` is set.
    pub feasibility_violations: usize,
    pub updates: usize,
    pub wall_time: f64,
}

impl TrainReport {
    /// `epoch,loss_head1,…,loss_headk,loss_avg`, epochs counted from 1.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let heads = self.final_loss.per_head.len();
        let mut header = vec!["epoch".to_string()];
        header.extend((1..=heads).map(|i| format!("loss_head{i}")));
        header.push("loss_avg".to_string());
        writeln!(w, "{}", header.join(","))?;
        for (e, loss) in self.loss_by_epoch.iter().enumerate() {
            write!(w, "{}", e + 1)?;
            for v in &loss.per_head {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w, ",{:.16e}", loss.mean)?;
        }
        Ok(())
    }
}

/// `(1/N) Σ_k (Y_k − f(X_k))²` per head with `f` clipped to the unit box.
/// With `in_box_only` the sum and `N` run over in-box pairs only.
pub fn empirical_loss(net: &ReluNetwork, regset: &RegressionSet, in_box_only: bool) -> Result<LossBreakdown> {
    check_heads(net, regset)?;
    let keep: Vec<usize> = (0..regset.len())
        .filter(|&k| !in_box_only || regset.in_box_mask[k])
        .collect();
    if keep.is_empty() {
        return Err(Error::invalid("empty effective training set"));
    }
    let inputs = regset.inputs.select(Axis(0), &keep);
    let responses = regset.responses.select(Axis(0), &keep);
    let mut pred = net.forward_batch(inputs.view());
    zero_out_of_box(&mut pred, inputs.view());
    let mut sums = vec![0.0; net.out_dim()];
    for (p, y) in pred.rows().into_iter().zip(responses.rows()) {
        for h in 0..sums.len() {
            let r = y[h] - p[h];
            sums[h] += r * r;
        }
    }
    Ok(LossBreakdown::from_sums(sums, keep.len()))
}

fn check_heads(net: &ReluNetwork, regset: &RegressionSet) -> Result<()> {
    if net.in_dim() != regset.inputs.ncols() || net.out_dim() != regset.responses.ncols() {
        return Err(Error::invalid(format!(
            "network maps {}→{}, data is {}→{}",
            net.in_dim(),
            net.out_dim(),
            regset.inputs.ncols(),
            regset.responses.ncols()
        )));
    }
    Ok(())
}

fn zero_out_of_box(pred: &mut Array2<f64>, inputs: ArrayView2<'_, f64>) {
    for (mut p, x) in pred.rows_mut().into_iter().zip(inputs.rows()) {
        if !x.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            p.fill(0.0);
        }
    }
}

/// Rescales every row of every `W_l` and every `v_l` whose norm exceeds
/// `radii[l]` back onto the sphere. Returns the number of rescaled blocks.
pub fn project_rows_in_place(net: &mut ReluNetwork, radii: &[f64]) -> usize {
    let (weights, shifts) = net.params_mut();
    assert_eq!(radii.len(), weights.len(), "one radius per weight matrix");
    let mut events = 0;
    for (w, &r) in weights.iter_mut().zip(radii) {
        for row in w.rows_mut() {
            events += usize::from(shrink_onto_ball(row, r));
        }
    }
    for (l, v) in shifts.iter_mut().enumerate() {
        events += usize::from(shrink_onto_ball(v.view_mut(), radii[l + 1]));
    }
    events
}

/// Scales `x` onto the ball of radius `r` if it lies outside. The result has
/// norm `≤ r` as computed, so a second call is a no-op.
fn shrink_onto_ball(mut x: ArrayViewMut1<'_, f64>, r: f64) -> bool {
    let n = row_norm(x.view());
    if n <= r {
        return false;
    }
    let mut k = r / n;
    loop {
        let scaled = x.mapv(|v| v * k);
        if row_norm(scaled.view()) <= r {
            x.assign(&scaled);
            return true;
        }
        k *= 1.0 - f64::EPSILON;
    }
}

/// Projection onto the per-row ℓ² balls; feasible blocks are untouched.
pub fn project_rows(net: &ReluNetwork, radii: &[f64]) -> ReluNetwork {
    let mut out = net.clone();
    project_rows_in_place(&mut out, radii);
    out
}

/// Largest excess of a block norm over its radius (≤ 0 when feasible).
pub fn max_constraint_excess(net: &ReluNetwork, radii: &[f64]) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for (w, &r) in net.weights().iter().zip(radii) {
        for row in w.rows() {
            worst = worst.max(row_norm(row) - r);
        }
    }
    for (l, v) in net.shifts().iter().enumerate() {
        worst = worst.max(row_norm(v.view()) - radii[l + 1]);
    }
    worst
}

/// He-normal weights `N(0, 2/fan_in)`, zero shifts, then projected onto the
/// constraint set.
pub fn init_network(widths: &[usize], seed: u64) -> Result<ReluNetwork> {
    let zeros = ReluNetwork::zeros(widths)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = zeros
        .weights()
        .iter()
        .map(|w| {
            let std = (2.0 / w.ncols() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_simple_fn(w.raw_dim(), || normal.sample(&mut rng))
        })
        .collect();
    let shifts = zeros.shifts().to_vec();
    let mut net = ReluNetwork::new(weights, shifts)?;
    project_rows_in_place(&mut net, &default_radii(widths));
    Ok(net)
}

struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    lr: f64,
    step: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    fn new(net: &ReluNetwork, cfg: &TrainConfig) -> Self {
        Adam {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            epsilon: cfg.adam_epsilon,
            lr: cfg.learning_rate,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    fn update(&mut self, net: &mut ReluNetwork, grads: &Gradients) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = self.lr;
        let (weights, shifts) = net.params_mut();
        for l in 0..weights.len() {
            Zip::from(&mut weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .and(&grads.weights[l])
                .for_each(|p, m, v, &g| adam_entry(p, m, v, g, b1, b2, c1, c2, lr, eps));
        }
        for l in 0..shifts.len() {
            Zip::from(&mut shifts[l])
                .and(&mut self.m.shifts[l])
                .and(&mut self.v.shifts[l])
                .and(&grads.shifts[l])
                .for_each(|p, m, v, &g| adam_entry(p, m, v, g, b1, b2, c1, c2, lr, eps));
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn adam_entry(p: &mut f64, m: &mut f64, v: &mut f64, g: f64, b1: f64, b2: f64, c1: f64, c2: f64, lr: f64, eps: f64) {
    *m = b1 * *m + (1.0 - b1) * g;
    *v = b2 * *v + (1.0 - b2) * g * g;
    let m_hat = *m / c1;
    let v_hat = *v / c2;
    *p -= lr * m_hat / (v_hat.sqrt() + eps);
}

/// Runs `epochs × ⌈N/batch⌉` Adam updates on the mean squared error over
/// batch and heads, projecting after every update. Returns the last iterate.
pub fn train(net: &ReluNetwork, regset: &RegressionSet, config: &TrainConfig) -> Result<(ReluNetwork, TrainReport)> {
    config.validate()?;
    check_heads(net, regset)?;
    let start = Instant::now();
    let radii = config.radii_for(net)?;
    let data = if config.in_box_only {
        regset.in_box()
    } else {
        regset.clone()
    };
    if data.is_empty() {
        return Err(Error::invalid("empty effective training set"));
    }
    let in_box: Vec<bool> = data
        .inputs
        .rows()
        .into_iter()
        .map(|r| in_unit_box(r.as_slice().expect("row-major inputs")))
        .collect();

    let mut net = net.clone();
    let mut adam = Adam::new(&net, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = data.len();
    let heads = net.out_dim();
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport {
        loss_by_epoch: Vec::with_capacity(config.epochs),
        final_loss: LossBreakdown {
            per_head: vec![],
            mean: 0.0,
        },
        projection_event_count: 0,
        feasibility_violations: 0,
        updates: 0,
        wall_time: 0.0,
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let x = data.inputs.select(Axis(0), batch);
            let y = data.responses.select(Axis(0), batch);
            let cache = net.forward_cached(x.view());
            let scale = 2.0 / (batch.len() * heads) as f64;
            let mut grad_out = (&cache.output - &y) * scale;
            for (mut g, &k) in grad_out.rows_mut().into_iter().zip(batch) {
                if !in_box[k] {
                    g.fill(0.0);
                }
            }
            let grads = net.backward_from_cache(&cache, grad_out.view());
            adam.update(&mut net, &grads);
            report.projection_event_count += project_rows_in_place(&mut net, &radii);
            report.updates += 1;
            if config.check_feasibility && max_constraint_excess(&net, &radii) > FEASIBILITY_TOLERANCE {
                report.feasibility_violations += 1;
            }
            debug_assert!(max_constraint_excess(&net, &radii) <= FEASIBILITY_TOLERANCE);
        }
        let loss = empirical_loss(&net, &data, false)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDivergence { epoch });
        }
        report.loss_by_epoch.push(loss);
    }

    report.final_loss = match report.loss_by_epoch.last() {
        Some(l) => l.clone(),
        None => empirical_loss(&net, &data, false)?,
    };
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((net, report))
}

/// Sum over samples of parameter gradients of `½ Σ_heads (f − y)²`, exposed
/// for gradient checks.
pub fn squared_loss_gradients(net: &ReluNetwork, inputs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Gradients {
    let cache = net.forward_cached(inputs);
    let residual = &cache.output - &targets;
    net.backward_from_cache(&cache, residual.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array};
    use rand::Rng;

    fn synthetic(inputs: Array2<f64>, f: impl Fn(&[f64]) -> Vec<f64>) -> RegressionSet {
        let outs: Vec<Vec<f64>> = inputs.rows().into_iter().map(|r| f(&r.to_vec())).collect();
        let k = outs[0].len();
        let responses = Array2::from_shape_fn((inputs.nrows(), k), |(i, j)| outs[i][j]);
        let in_box_mask = inputs.rows().into_iter().map(|r| in_unit_box(&r.to_vec())).collect();
        RegressionSet {
            inputs,
            responses,
            delta: 0.01,
            in_box_mask,
        }
    }

    fn uniform_inputs(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn((n, d), || rng.random_range(0.0..1.0))
    }

    #[test]
    fn loss_zero_when_net_reproduces_responses() {
        let net = init_network(&[2, 8, 8, 2], 3).unwrap();
        let set = synthetic(uniform_inputs(50, 2, 1), |x| net.forward(x));
        let loss = empirical_loss(&net, &set, true).unwrap();
        // batch and pointwise evaluation may differ in the last bits
        assert!(loss.mean < 1e-25, "{}", loss.mean);
    }

    #[test]
    fn loss_of_zero_net_on_unit_responses() {
        let net = ReluNetwork::zeros(&[2, 4, 2]).unwrap();
        let set = synthetic(uniform_inputs(40, 2, 2), |_| vec![1.0, 1.0]);
        let loss = empirical_loss(&net, &set, true).unwrap();
        assert_relative_eq!(loss.mean, 1.0);
        assert_eq!(loss.per_head, vec![1.0, 1.0]);
    }

    #[test]
    fn loss_errors_on_empty_effective_set() {
        let net = ReluNetwork::zeros(&[2, 4, 2]).unwrap();
        let set = synthetic(array![[2.0, 2.0], [3.0, -1.0]], |_| vec![1.0, 1.0]);
        assert!(empirical_loss(&net, &set, true).is_err());
        // literal convention: clipped prediction 0, response 1
        assert_relative_eq!(empirical_loss(&net, &set, false).unwrap().mean, 1.0);
    }

    #[test]
    fn projection_scales_long_rows_only() {
        let p = 4.0f64;
        let r = p.sqrt();
        let long = array![2.0 * r, 0.0, 0.0, 0.0];
        let short = array![0.5, 0.5, 0.5, 0.5];
        let w0 = Array2::from_shape_fn((2, 4), |(i, j)| if i == 0 { long[j] } else { short[j] });
        let net = ReluNetwork::new(vec![array![[1.0, 1.0, 1.0, 1.0]].reversed_axes(), w0], vec![array![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let radii = vec![1.0, r];
        let projected = project_rows(&net, &radii);
        let w = &projected.weights()[1];
        assert_relative_eq!(row_norm(w.row(0)), r, max_relative = 1e-12);
        assert_eq!(w.row(1), net.weights()[1].row(1));
        // the 4×1 first layer has unit rows already
        assert_eq!(projected.weights()[0], net.weights()[0]);
    }

    #[test]
    fn feasible_network_is_bit_identical_after_projection() {
        let net = init_network(&[2, 32, 32, 2], 7).unwrap();
        let radii = default_radii(net.widths());
        assert_eq!(project_rows(&net, &radii), net);
    }

    #[test]
    fn projection_is_nearest_point_of_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let radius = 3f64.sqrt();
        for _ in 0..1000 {
            let row: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= radius {
                continue;
            }
            let w = Array2::from_shape_vec((1, 3), row.clone()).unwrap();
            let net = ReluNetwork::new(vec![w], vec![]).unwrap();
            let proj = project_rows(&net, &[radius]);
            let p: Vec<f64> = proj.weights()[0].iter().copied().collect();
            let dist = |a: &[f64]| a.iter().zip(&row).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let best = dist(&p);
            for _ in 0..20 {
                let c: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let cn = c.iter().map(|x| x * x).sum::<f64>().sqrt();
                let s = radius * rng.random_range(0.0..1.0f64) / cn;
                let cand: Vec<f64> = c.iter().map(|x| x * s).collect();
                assert!(dist(&cand) >= best - 1e-12);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_feasible() {
        let a = init_network(&[2, 32, 32, 2], 5).unwrap();
        let b = init_network(&[2, 32, 32, 2], 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_network(&[2, 32, 32, 2], 6).unwrap());
        assert!(max_constraint_excess(&a, &default_radii(a.widths())) <= FEASIBILITY_TOLERANCE);
        assert!(a.shifts().iter().all(|v| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn zero_epochs_returns_input() {
        let net = init_network(&[2, 8, 2], 1).unwrap();
        let set = synthetic(uniform_inputs(30, 2, 3), |x| vec![x[0], x[1]]);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (out, report) = train(&net, &set, &cfg).unwrap();
        assert_eq!(out, net);
        assert!(report.loss_by_epoch.is_empty());
        assert_eq!(report.final_loss, empirical_loss(&net, &set, true).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let net = init_network(&[2, 16, 16, 2], 9).unwrap();
        let set = synthetic(uniform_inputs(300, 2, 4), |x| vec![(3.0 * x[0]).sin(), x[0] * x[1]]);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 5e-3,
            check_feasibility: true,
            ..Default::default()
        };
        let (a, ra) = train(&net, &set, &cfg).unwrap();
        let (b, _) = train(&net, &set, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.feasibility_violations, 0);
        assert_eq!(ra.updates, 30 * 10);
        assert!(ra.final_loss.mean < empirical_loss(&net, &set, true).unwrap().mean);
        assert_eq!(&ra.final_loss, ra.loss_by_epoch.last().unwrap());
    }

    #[test]
    fn config_validation() {
        for bad in [
            TrainConfig { adam_beta1: 1.0, ..Default::default() },
            TrainConfig { adam_beta2: 0.0, ..Default::default() },
            TrainConfig { adam_epsilon: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { learning_rate: -1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn report_csv_layout() {
        let net = init_network(&[2, 4, 2], 1).unwrap();
        let set = synthetic(uniform_inputs(20, 2, 3), |x| vec![x[0], x[1]]);
        let cfg = TrainConfig { epochs: 3, ..Default::default() };
        let (_, report) = train(&net, &set, &cfg).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "epoch,loss_head1,loss_head2,loss_avg");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("3,"));
    }
}
