//! Fine-mesh path simulation, skip-subsampling and difference-quotient
//! regression sets.
//!
//! Brownian increments are `√Δ · Z` with `Z` drawn from `StandardNormal`
//! (ziggurat) on a `ChaCha8Rng` seeded with the path seed. Paths are
//! bit-reproducible within one build.

use std::io::Write;

use ndarray::{s, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::sde::SdeModel;

/// Paths whose coordinates exceed this magnitude are treated as divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Default cap on the number of fine-mesh steps of one path.
pub const DEFAULT_STEP_BUDGET: usize = 100_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Scheme {
    /// Strong order 1 for diagonal noise.
    #[default]
    Milstein,
    /// Strong order 1/2; accepts any noise structure.
    EulerMaruyama,
}

/// One Milstein step for diagonal noise:
/// `yᵢ + bᵢΔ + σᵢᵢ dWᵢ + ½ σᵢᵢ ∂ᵢσᵢᵢ (dWᵢ² − Δ)`.
pub fn milstein_step<M: SdeModel + ?Sized>(
    model: &M,
    y: &[f64],
    dt: f64,
    dw: &[f64],
) -> Result<Vec<f64>> {
    if !model.diagonal_noise() {
        return Err(Error::Unsupported(
            "Milstein requires diagonal noise; use Scheme::EulerMaruyama".to_string(),
        ));
    }
    let d = model.state_dim();
    let mut ws = Workspace::new(d, model.noise_dim());
    let mut out = vec![0.0; d];
    ws.milstein(model, y, dt, dw, &mut out);
    Ok(out)
}

/// One Euler–Maruyama step `y + bΔ + σ dW` for a general `d×m` diffusion.
pub fn euler_maruyama_step<M: SdeModel + ?Sized>(model: &M, y: &[f64], dt: f64, dw: &[f64]) -> Vec<f64> {
    let d = model.state_dim();
    let mut ws = Workspace::new(d, model.noise_dim());
    let mut out = vec![0.0; d];
    ws.euler(model, y, dt, dw, &mut out);
    out
}

struct Workspace {
    drift: Vec<f64>,
    sigma: Vec<f64>,
    slope: Vec<f64>,
}

impl Workspace {
    fn new(d: usize, m: usize) -> Self {
        Workspace {
            drift: vec![0.0; d],
            sigma: vec![0.0; d * m],
            slope: vec![0.0; d],
        }
    }

    fn milstein<M: SdeModel + ?Sized>(&mut self, model: &M, y: &[f64], dt: f64, dw: &[f64], out: &mut [f64]) {
        model.drift(y, &mut self.drift);
        model.diffusion_diagonal(y, &mut self.sigma[..y.len()]);
        model.diffusion_diagonal_slope(y, &mut self.slope);
        for i in 0..y.len() {
            let s = self.sigma[i];
            out[i] = y[i] + self.drift[i] * dt + s * dw[i] + 0.5 * s * self.slope[i] * (dw[i] * dw[i] - dt);
        }
    }

    fn euler<M: SdeModel + ?Sized>(&mut self, model: &M, y: &[f64], dt: f64, dw: &[f64], out: &mut [f64]) {
        let m = dw.len();
        model.drift(y, &mut self.drift);
        model.diffusion(y, &mut self.sigma);
        for i in 0..y.len() {
            let noise: f64 = self.sigma[i * m..(i + 1) * m].iter().zip(dw).map(|(s, w)| s * w).sum();
            out[i] = y[i] + self.drift[i] * dt + noise;
        }
    }
}

/// Fine-mesh approximation of one sample path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub mesh: f64,
    pub initial_state: Vec<f64>,
    /// `(steps + 1) × d`, row 0 is the initial state.
    pub states: Array2<f64>,
    pub seed: u64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.nrows() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.steps() as f64 * self.mesh
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_states_csv(w, &self.states, self.mesh)
    }
}

/// Every `skip`-th row of a [`Trajectory`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    /// Sampling interval, `skip · mesh`.
    pub delta: f64,
    pub mesh: f64,
    pub skip: usize,
    pub states: Array2<f64>,
    pub source_seed: u64,
}

impl SampledPath {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_states_csv(w, &self.states, self.delta)
    }
}

/// Pairs `(X_kδ, Y_kδ)` with `Y_kδ = (X_{(k+1)δ} − X_kδ) / δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSet {
    pub inputs: Array2<f64>,
    pub responses: Array2<f64>,
    pub delta: f64,
    pub in_box_mask: Vec<bool>,
}

impl RegressionSet {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn in_box_count(&self) -> usize {
        self.in_box_mask.iter().filter(|&&b| b).count()
    }

    /// The pairs whose input lies in the closed unit box.
    pub fn in_box(&self) -> RegressionSet {
        let keep: Vec<usize> = (0..self.len()).filter(|&k| self.in_box_mask[k]).collect();
        RegressionSet {
            inputs: self.inputs.select(Axis(0), &keep),
            responses: self.responses.select(Axis(0), &keep),
            delta: self.delta,
            in_box_mask: vec![true; keep.len()],
        }
    }
}

/// True iff every coordinate lies in `[0, 1]` (closed box).
pub fn in_unit_box(x: &[f64]) -> bool {
    x.iter().all(|&v| (0.0..=1.0).contains(&v))
}

fn in_unit_box_view(x: ArrayView1<'_, f64>) -> bool {
    x.iter().all(|&v| (0.0..=1.0).contains(&v))
}

/// Number of fine steps covering `horizon`, ignoring floating-point dust in
/// `horizon / mesh`.
pub fn step_count(horizon: f64, mesh: f64) -> usize {
    let ratio = horizon / mesh;
    let rounded = ratio.round();
    if (ratio - rounded).abs() <= 1e-9 * rounded.max(1.0) {
        rounded as usize
    } else {
        ratio.ceil() as usize
    }
}

/// Fixed-mesh path simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Simulator {
    pub mesh: f64,
    pub scheme: Scheme,
    pub step_budget: usize,
}

impl Simulator {
    pub fn new(mesh: f64) -> Self {
        Simulator {
            mesh,
            scheme: Scheme::Milstein,
            step_budget: DEFAULT_STEP_BUDGET,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// Simulates `⌈horizon / mesh⌉` steps from `initial_state`.
    pub fn simulate<M: SdeModel + ?Sized>(
        &self,
        model: &M,
        horizon: f64,
        initial_state: &[f64],
        seed: u64,
    ) -> Result<Trajectory> {
        let d = model.state_dim();
        let m = model.noise_dim();
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if !(self.mesh > 0.0 && self.mesh.is_finite()) {
            return Err(Error::invalid(format!("mesh must be positive, got {}", self.mesh)));
        }
        if initial_state.len() != d {
            return Err(Error::invalid(format!(
                "initial state has length {}, model dimension is {d}",
                initial_state.len()
            )));
        }
        let steps = step_count(horizon, self.mesh);
        if steps > self.step_budget {
            return Err(Error::invalid(format!(
                "{steps} steps exceed the step budget {}",
                self.step_budget
            )));
        }
        if self.scheme == Scheme::Milstein && !model.diagonal_noise() {
            return Err(Error::Unsupported(
                "Milstein requires diagonal noise; use Scheme::EulerMaruyama".to_string(),
            ));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sqrt_dt = self.mesh.sqrt();
        let mut states = Array2::zeros((steps + 1, d));
        states.row_mut(0).assign(&ArrayView1::from(initial_state));
        let mut ws = Workspace::new(d, m);
        let mut y = initial_state.to_vec();
        let mut next = vec![0.0; d];
        let mut dw = vec![0.0; m];
        for step in 1..=steps {
            for w in dw.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = sqrt_dt * z;
            }
            match self.scheme {
                Scheme::Milstein => ws.milstein(model, &y, self.mesh, &dw, &mut next),
                Scheme::EulerMaruyama => ws.euler(model, &y, self.mesh, &dw, &mut next),
            }
            if let Some(v) = next.iter().find(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
                return Err(Error::PathDivergence {
                    step,
                    reason: format!("state coordinate {v} outside ±{DIVERGENCE_LIMIT:e}"),
                });
            }
            std::mem::swap(&mut y, &mut next);
            states.row_mut(step).assign(&ArrayView1::from(&y[..]));
        }
        Ok(Trajectory {
            mesh: self.mesh,
            initial_state: initial_state.to_vec(),
            states,
            seed,
        })
    }
}

/// Milstein path with the default step budget.
pub fn simulate_path<M: SdeModel + ?Sized>(
    model: &M,
    horizon: f64,
    mesh: f64,
    initial_state: &[f64],
    seed: u64,
) -> Result<Trajectory> {
    Simulator::new(mesh).simulate(model, horizon, initial_state, seed)
}

/// Keeps rows `0, skip, 2·skip, …`; a trailing remainder is dropped.
pub fn subsample(traj: &Trajectory, skip: usize) -> Result<SampledPath> {
    if skip == 0 {
        return Err(Error::invalid("skip must be at least 1"));
    }
    let steps = traj.steps();
    if skip > steps {
        return Err(Error::invalid(format!(
            "skip {skip} exceeds the path length of {steps} steps"
        )));
    }
    let kept = steps / skip;
    let states = traj.states.slice(s![..=kept * skip;skip, ..]).to_owned();
    Ok(SampledPath {
        delta: skip as f64 * traj.mesh,
        mesh: traj.mesh,
        skip,
        states,
        source_seed: traj.seed,
    })
}

/// Builds the difference-quotient regression set of a sampled path.
pub fn make_regression_set(path: &SampledPath) -> Result<RegressionSet> {
    let rows = path.len();
    if rows < 2 {
        return Err(Error::invalid(format!(
            "a regression set needs at least 2 sampled rows, got {rows}"
        )));
    }
    let inputs = path.states.slice(s![..rows - 1, ..]).to_owned();
    let next = path.states.slice(s![1.., ..]);
    let responses = (&next - &inputs) / path.delta;
    let in_box_mask = inputs.rows().into_iter().map(in_unit_box_view).collect();
    Ok(RegressionSet {
        inputs,
        responses,
        delta: path.delta,
        in_box_mask,
    })
}

fn write_states_csv<W: Write>(mut w: W, states: &Array2<f64>, dt: f64) -> Result<()> {
    let d = states.ncols();
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=d).map(|i| format!("x{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (k, row) in states.rows().into_iter().enumerate() {
        write!(w, "{:.16e}", k as f64 * dt)?;
        for v in row {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{benchmark_model, BenchmarkParams, DiagonalSde};
    use approx::assert_relative_eq;

    #[test]
    fn milstein_zero_model_is_fixed_point() {
        let model = DiagonalSde::zero(2);
        let y = milstein_step(&model, &[0.3, -1.2], 0.01, &[0.5, -0.1]).unwrap();
        assert_eq!(y, vec![0.3, -1.2]);
    }

    #[test]
    fn milstein_constant_drift_is_euler() {
        let model = DiagonalSde::constant(vec![1.5, -2.0], vec![0.0, 0.0]);
        let y = milstein_step(&model, &[1.0, 1.0], 0.1, &[0.3, 0.3]).unwrap();
        assert_relative_eq!(y[0], 1.15, epsilon = 1e-15);
        assert_relative_eq!(y[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn milstein_multiplicative_noise_hand_expansion() {
        // 1 + 0.2 + ½·1·1·(0.04 − 0.01)
        let model = DiagonalSde::geometric_brownian(0.0, 1.0);
        let y = milstein_step(&model, &[1.0], 0.01, &[0.2]).unwrap();
        assert_relative_eq!(y[0], 1.215, epsilon = 1e-14);
    }

    struct Coupled;
    impl SdeModel for Coupled {
        fn state_dim(&self) -> usize {
            2
        }
        fn noise_dim(&self) -> usize {
            2
        }
        fn drift(&self, _: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
        fn diffusion(&self, _: &[f64], out: &mut [f64]) {
            out.copy_from_slice(&[1.0, 0.5, 0.0, 1.0]);
        }
        fn diffusion_partial(&self, _: &[f64], _: usize, out: &mut [f64]) {
            out.fill(0.0);
        }
    }

    #[test]
    fn non_diagonal_needs_euler() {
        assert!(matches!(
            milstein_step(&Coupled, &[0.0, 0.0], 0.1, &[0.1, 0.1]),
            Err(Error::Unsupported(_))
        ));
        let y = euler_maruyama_step(&Coupled, &[0.0, 0.0], 0.1, &[0.2, 0.4]);
        assert_relative_eq!(y[0], 0.4, epsilon = 1e-15);
        assert_relative_eq!(y[1], 0.4, epsilon = 1e-15);
        let traj = Simulator::new(0.01)
            .with_scheme(Scheme::EulerMaruyama)
            .simulate(&Coupled, 0.1, &[0.0, 0.0], 1)
            .unwrap();
        assert_eq!(traj.states.nrows(), 11);
    }

    #[test]
    fn step_count_and_rows() {
        let model = DiagonalSde::zero(2);
        let traj = simulate_path(&model, 0.01, 0.001, &[0.1, 0.2], 3).unwrap();
        assert_eq!(traj.states.nrows(), 11);
        for row in traj.states.rows() {
            assert_eq!(row.to_vec(), vec![0.1, 0.2]);
        }
        assert_eq!(step_count(100.0, 1e-3), 100_000);
        assert_eq!(step_count(0.0105, 1e-3), 11);
    }

    #[test]
    fn simulate_rejects_bad_inputs() {
        let model = DiagonalSde::zero(1);
        assert!(simulate_path(&model, 0.0, 0.1, &[0.0], 1).is_err());
        assert!(simulate_path(&model, 1.0, -0.1, &[0.0], 1).is_err());
        assert!(simulate_path(&model, 1.0, 0.1, &[0.0, 1.0], 1).is_err());
        let mut sim = Simulator::new(0.1);
        sim.step_budget = 5;
        assert!(sim.simulate(&model, 1.0, &[0.0], 1).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let model = DiagonalSde::scalar(|x| 10.0 * x, |_| 0.0, |_| 0.0);
        let err = simulate_path(&model, 100.0, 0.1, &[1.0], 1).unwrap_err();
        match err {
            Error::PathDivergence { step, .. } => assert!(step > 1 && step < 1000),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_path() {
        let model = benchmark_model(BenchmarkParams::default()).unwrap();
        let a = simulate_path(&model, 1.0, 1e-3, &[0.0, 0.0], 42).unwrap();
        let b = simulate_path(&model, 1.0, 1e-3, &[0.0, 0.0], 42).unwrap();
        let c = simulate_path(&model, 1.0, 1e-3, &[0.0, 0.0], 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.states, c.states);
    }

    fn ramp(rows: usize) -> Trajectory {
        let states = Array2::from_shape_fn((rows, 1), |(k, _)| k as f64);
        Trajectory {
            mesh: 1e-3,
            initial_state: vec![0.0],
            states,
            seed: 9,
        }
    }

    #[test]
    fn subsample_identity_and_stride() {
        let traj = ramp(101);
        let same = subsample(&traj, 1).unwrap();
        assert_eq!(same.states, traj.states);

        let p = subsample(&traj, 20).unwrap();
        assert_eq!(p.states.column(0).to_vec(), vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0]);
        assert_relative_eq!(p.delta, 0.02, epsilon = 1e-15);

        let p = subsample(&ramp(106), 20).unwrap();
        assert_eq!(p.len(), 6);

        assert!(subsample(&traj, 0).is_err());
        assert!(subsample(&traj, 101).is_err());
    }

    #[test]
    fn default_skips_give_expected_deltas() {
        let traj = ramp(1001);
        for (skip, delta) in [(200, 0.2), (100, 0.1), (50, 0.05), (20, 0.02), (10, 0.01)] {
            assert_relative_eq!(subsample(&traj, skip).unwrap().delta, delta, epsilon = 1e-15);
        }
    }

    fn path(values: &[f64], delta: f64) -> SampledPath {
        SampledPath {
            delta,
            mesh: delta,
            skip: 1,
            states: Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap(),
            source_seed: 0,
        }
    }

    #[test]
    fn single_difference_quotient() {
        let set = make_regression_set(&path(&[0.0, 0.02], 0.02)).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.inputs[[0, 0]], 0.0);
        assert_relative_eq!(set.responses[[0, 0]], 1.0, epsilon = 1e-15);
        assert!(set.in_box_mask[0]);
    }

    #[test]
    fn linear_path_constant_response() {
        let delta = 0.05;
        let values: Vec<f64> = (0..40).map(|k| k as f64 * delta * 0.7).collect();
        let set = make_regression_set(&path(&values, delta)).unwrap();
        for y in set.responses.iter() {
            assert_relative_eq!(*y, 0.7, epsilon = 1e-12);
        }
        // only the first few points are inside [0, 1]
        assert_eq!(set.in_box_count(), values.iter().take(39).filter(|v| **v <= 1.0).count());
    }

    #[test]
    fn regression_set_needs_two_rows() {
        assert!(make_regression_set(&path(&[0.5], 0.1)).is_err());
    }

    #[test]
    fn csv_header_and_precision() {
        let mut buf = Vec::new();
        path(&[0.1, 1.0 / 3.0], 0.5).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x1");
        let x: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(x, 1.0 / 3.0);
    }
}
