//! ReLU networks with the shift inside the activation,
//!
//! ```text
//! f(x) = W_L ρ_{v_L} W_{L-1} ⋯ W_1 ρ_{v_1} W_0 x,    ρ_v(y)_i = max(0, y_i − v_i),
//! ```
//!
//! together with the bookkeeping of the bounded-weight sparse hypothesis
//! class: nonzero count, largest absolute parameter, and a certified sup-norm
//! bound on the unit box.

mod convert;

pub use convert::{convert_to_unit_weights, ClassCertificate};

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulate::in_unit_box;

/// Anything that maps `ℝ^d` to `ℝ^k` pointwise.
pub trait Predictor: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn predict(&self, x: &[f64], out: &mut [f64]);

    /// `predict` on the closed unit box, zero outside it.
    fn predict_clipped(&self, x: &[f64], out: &mut [f64]) {
        if in_unit_box(x) {
            self.predict(x, out);
        } else {
            out.fill(0.0);
        }
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }
    fn predict(&self, x: &[f64], out: &mut [f64]) {
        (**self).predict(x, out)
    }
}

/// A feed-forward ReLU network `(L, p, {W_l}, {v_l})`.
///
/// `weights[l]` is `W_l` with shape `p_{l+1} × p_l` for `l = 0..=L`;
/// `shifts[l - 1]` is `v_l` of length `p_l` for `l = 1..=L`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluNetwork {
    widths: Vec<usize>,
    weights: Vec<Array2<f64>>,
    shifts: Vec<Array1<f64>>,
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub shifts: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &ReluNetwork) -> Self {
        Gradients {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            shifts: net.shifts.iter().map(|v| Array1::zeros(v.raw_dim())).collect(),
        }
    }

    /// Elementwise sum; gradients of batch shards combine this way.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.shifts.iter_mut().zip(&other.shifts) {
            *a += b;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.shifts.iter().flat_map(|v| v.iter()))
    }
}

/// Intermediate activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `z_0 = X`, then the post-activation of every hidden layer.
    activations: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl ReluNetwork {
    /// Builds a network after checking the shape chain.
    pub fn new(weights: Vec<Array2<f64>>, shifts: Vec<Array1<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("a network needs at least one weight matrix"));
        }
        if shifts.len() + 1 != weights.len() {
            return Err(Error::invalid(format!(
                "{} weight matrices need {} shift vectors, got {}",
                weights.len(),
                weights.len() - 1,
                shifts.len()
            )));
        }
        let mut widths = vec![weights[0].ncols()];
        for (l, w) in weights.iter().enumerate() {
            if w.ncols() != widths[l] {
                return Err(Error::invalid(format!(
                    "W_{l} has {} columns, expected {}",
                    w.ncols(),
                    widths[l]
                )));
            }
            if w.nrows() == 0 || w.ncols() == 0 {
                return Err(Error::invalid(format!("W_{l} is empty")));
            }
            widths.push(w.nrows());
        }
        for (l, v) in shifts.iter().enumerate() {
            if v.len() != widths[l + 1] {
                return Err(Error::invalid(format!(
                    "v_{} has length {}, expected {}",
                    l + 1,
                    v.len(),
                    widths[l + 1]
                )));
            }
        }
        let all_finite = weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && shifts.iter().all(|v| v.iter().all(|x| x.is_finite()));
        if !all_finite {
            return Err(Error::invalid("network parameters must be finite"));
        }
        Ok(ReluNetwork {
            widths,
            weights,
            shifts,
        })
    }

    /// All-zero network with the given widths `(p_0, …, p_{L+1})`.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("invalid widths {widths:?}")));
        }
        let weights = widths.windows(2).map(|w| Array2::zeros((w[1], w[0]))).collect();
        let shifts = widths[1..widths.len() - 1].iter().map(|&p| Array1::zeros(p)).collect();
        ReluNetwork::new(weights, shifts)
    }

    /// Number of hidden activation layers `L`.
    pub fn depth(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(0)
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn shifts(&self) -> &[Array1<f64>] {
        &self.shifts
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [Array2<f64>], &mut [Array1<f64>]) {
        (&mut self.weights, &mut self.shifts)
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Exact count of nonzero entries over all `W_l` and `v_l`.
    pub fn sparsity(&self) -> usize {
        self.all_params().filter(|&&x| x != 0.0).count()
    }

    /// Largest absolute entry over all `W_l` and `v_l`.
    pub fn max_weight(&self) -> f64 {
        self.all_params().fold(0.0, |m: f64, x| m.max(x.abs()))
    }

    /// Nonzero count ignoring entries with `|x| ≤ threshold`. Diagnostic only.
    pub fn sparsity_above(&self, threshold: f64) -> usize {
        self.all_params().filter(|x| x.abs() > threshold).count()
    }

    fn all_params(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.shifts.iter().flat_map(|v| v.iter()))
    }

    /// Evaluates the network at one point.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim(), "input dimension mismatch");
        let mut z = x.to_vec();
        for (l, w) in self.weights.iter().enumerate() {
            let mut h: Vec<f64> = w
                .rows()
                .into_iter()
                .map(|row| row.iter().zip(&z).map(|(a, b)| a * b).sum())
                .collect();
            if l < self.depth() {
                for (hi, vi) in h.iter_mut().zip(self.shifts[l].iter()) {
                    *hi = (*hi - vi).max(0.0);
                }
            }
            z = h;
        }
        z
    }

    /// `forward` on the closed unit box, zero vector outside.
    pub fn forward_clipped(&self, x: &[f64]) -> Vec<f64> {
        if in_unit_box(x) {
            self.forward(x)
        } else {
            vec![0.0; self.out_dim()]
        }
    }

    /// Batched forward pass over the rows of `inputs`, keeping activations.
    pub fn forward_cached(&self, inputs: ArrayView2<'_, f64>) -> ForwardCache {
        assert_eq!(inputs.ncols(), self.in_dim(), "input dimension mismatch");
        let mut activations = Vec::with_capacity(self.weights.len());
        activations.push(inputs.to_owned());
        for l in 0..self.depth() {
            let mut h = activations[l].dot(&self.weights[l].t());
            let v = &self.shifts[l];
            for mut row in h.rows_mut() {
                Zip::from(&mut row).and(v).for_each(|a, &s| *a = (*a - s).max(0.0));
            }
            activations.push(h);
        }
        let output = activations[self.depth()].dot(&self.weights[self.depth()].t());
        ForwardCache {
            activations,
            output,
        }
    }

    /// Batched forward pass; row `k` of the result is `f(inputs[k])`.
    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward_cached(inputs).output
    }

    /// Reverse-mode gradients of `Σ_k ⟨output_grads[k], f(inputs[k])⟩`.
    pub fn backward(&self, inputs: ArrayView2<'_, f64>, output_grads: ArrayView2<'_, f64>) -> Gradients {
        let cache = self.forward_cached(inputs);
        self.backward_from_cache(&cache, output_grads)
    }

    /// As [`backward`](Self::backward), reusing a forward pass. The ReLU
    /// derivative at the kink is taken as 0.
    pub fn backward_from_cache(&self, cache: &ForwardCache, output_grads: ArrayView2<'_, f64>) -> Gradients {
        assert_eq!(output_grads.dim(), cache.output.dim(), "output gradient shape mismatch");
        let depth = self.depth();
        let mut grads = Gradients::zeros_like(self);
        let mut g = output_grads.to_owned();
        for l in (0..=depth).rev() {
            grads.weights[l] = g.t().dot(&cache.activations[l]);
            if l == 0 {
                break;
            }
            let mut ga = g.dot(&self.weights[l]);
            Zip::from(&mut ga)
                .and(&cache.activations[l])
                .for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
            grads.shifts[l - 1] = -ga.sum_axis(Axis(0));
            g = ga;
        }
        grads
    }

    /// Sound bound `F ≥ sup_{x ∈ [0,1]^d} |f(x)_i|` for every output `i`.
    ///
    /// Norm propagation: `a_0 = √d` bounds `‖x‖₂` on the box. For each hidden
    /// layer, unit `i` satisfies `0 ≤ z_i ≤ u_i := max(0, ‖W_l[i,·]‖₂ a_l − v_i)`
    /// by Cauchy–Schwarz, and `a_{l+1} = ‖u‖₂`. The output bound is
    /// `max_i ‖W_L[i,·]‖₂ a_L`.
    pub fn sup_bound(&self) -> f64 {
        let mut a = (self.in_dim() as f64).sqrt();
        for l in 0..self.depth() {
            let u2: f64 = self.weights[l]
                .rows()
                .into_iter()
                .zip(self.shifts[l].iter())
                .map(|(row, &v)| {
                    let u = (row_norm(row) * a - v).max(0.0);
                    u * u
                })
                .sum();
            a = u2.sqrt();
        }
        self.weights[self.depth()]
            .rows()
            .into_iter()
            .map(|row| row_norm(row) * a)
            .fold(0.0, f64::max)
    }

    /// The scalar network computing output coordinate `i`.
    pub fn head(&self, i: usize) -> Result<ReluNetwork> {
        if i >= self.out_dim() {
            return Err(Error::invalid(format!(
                "head {i} out of range for {} outputs",
                self.out_dim()
            )));
        }
        let mut weights = self.weights.clone();
        let last = weights.last_mut().unwrap();
        *last = last.select(Axis(0), &[i]);
        ReluNetwork::new(weights, self.shifts.clone())
    }

    /// Splits a two-output network into its two heads sharing the trunk.
    pub fn split_heads(&self) -> Result<(ReluNetwork, ReluNetwork)> {
        if self.out_dim() != 2 {
            return Err(Error::invalid(format!(
                "split_heads needs exactly 2 outputs, network has {}",
                self.out_dim()
            )));
        }
        Ok((self.head(0)?, self.head(1)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&NetworkDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetworkDoc = serde_json::from_str(text)?;
        doc.into_network()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn row_norm(row: ndarray::ArrayView1<'_, f64>) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Predictor for ReluNetwork {
    fn input_dim(&self) -> usize {
        self.in_dim()
    }
    fn output_dim(&self) -> usize {
        self.out_dim()
    }
    fn predict(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.forward(x));
    }
}

/// On-disk form: `widths`, row-major nested `weights`, and `shifts`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    widths: Vec<usize>,
    weights: Vec<Vec<Vec<f64>>>,
    shifts: Vec<Vec<f64>>,
}

impl From<&ReluNetwork> for NetworkDoc {
    fn from(net: &ReluNetwork) -> Self {
        NetworkDoc {
            widths: net.widths.clone(),
            weights: net
                .weights
                .iter()
                .map(|w| w.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            shifts: net.shifts.iter().map(|v| v.to_vec()).collect(),
        }
    }
}

impl NetworkDoc {
    fn into_network(self) -> Result<ReluNetwork> {
        let mut weights = Vec::with_capacity(self.weights.len());
        for (l, rows) in self.weights.into_iter().enumerate() {
            let nrows = rows.len();
            let ncols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != ncols) {
                return Err(Error::invalid(format!("weights[{l}] is ragged")));
            }
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            weights.push(
                Array2::from_shape_vec((nrows, ncols), flat)
                    .map_err(|e| Error::invalid(format!("weights[{l}]: {e}")))?,
            );
        }
        let shifts = self.shifts.into_iter().map(Array1::from).collect();
        let net = ReluNetwork::new(weights, shifts)?;
        if net.widths != self.widths {
            return Err(Error::invalid(format!(
                "declared widths {:?} disagree with weight shapes {:?}",
                self.widths, net.widths
            )));
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_net(widths: &[usize], scale: f64, seed: u64) -> ReluNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = widths
            .windows(2)
            .map(|w| Array::from_shape_fn((w[1], w[0]), |_| scale * rng.random_range(-1.0..1.0)))
            .collect();
        let shifts = widths[1..widths.len() - 1]
            .iter()
            .map(|&p| Array::from_shape_fn(p, |_| scale * rng.random_range(-0.5..0.5)))
            .collect();
        ReluNetwork::new(weights, shifts).unwrap()
    }

    /// Straight-line re-evaluation of the network formula, independent of
    /// `forward`.
    fn naive_eval(net: &ReluNetwork, x: &[f64]) -> Vec<f64> {
        let mut z = x.to_vec();
        let depth = net.depth();
        for l in 0..=depth {
            let w = &net.weights()[l];
            let mut next = vec![0.0; w.nrows()];
            for i in 0..w.nrows() {
                let mut acc = 0.0;
                for j in 0..w.ncols() {
                    acc += w[[i, j]] * z[j];
                }
                next[i] = acc;
            }
            if l < depth {
                for i in 0..next.len() {
                    let shifted = next[i] - net.shifts()[l][i];
                    next[i] = if shifted > 0.0 { shifted } else { 0.0 };
                }
            }
            z = next;
        }
        z
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = ReluNetwork::zeros(&[2, 5, 5, 2]).unwrap();
        assert_eq!(net.forward(&[0.3, -7.0]), vec![0.0, 0.0]);
        assert_eq!(net.sparsity(), 0);
        assert_eq!(net.max_weight(), 0.0);
        assert_eq!(net.sup_bound(), 0.0);
    }

    #[test]
    fn single_relu() {
        let net = ReluNetwork::new(vec![array![[1.0]], array![[1.0]]], vec![array![0.0]]).unwrap();
        for x in [-2.0, -0.1, 0.0, 0.4, 3.0] {
            assert_eq!(net.forward(&[x]), vec![f64::max(0.0, x)]);
        }
        assert_eq!(net.sparsity(), 2);
        assert_eq!(net.max_weight(), 1.0);
    }

    #[test]
    fn shift_sits_inside_activation() {
        let net = ReluNetwork::new(vec![array![[1.0]], array![[2.0]]], vec![array![0.5]]).unwrap();
        assert_eq!(net.forward(&[1.0]), vec![1.0]);
        assert_eq!(net.forward(&[0.25]), vec![0.0]);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let net = random_net(&[2, 32, 32, 2], 0.6, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let a = net.forward(&x);
            let b = naive_eval(&net, &x);
            for (a, b) in a.iter().zip(&b) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn batch_forward_matches_pointwise() {
        let net = random_net(&[2, 8, 8, 2], 1.0, 3);
        let inputs = Array::from_shape_fn((17, 2), |(i, j)| (i as f64 * 0.13 + j as f64 * 0.7).sin());
        let out = net.forward_batch(inputs.view());
        for (k, row) in inputs.rows().into_iter().enumerate() {
            let p = net.forward(&row.to_vec());
            assert_relative_eq!(out[[k, 0]], p[0], epsilon = 1e-13);
            assert_relative_eq!(out[[k, 1]], p[1], epsilon = 1e-13);
        }
    }

    #[test]
    fn clipping_uses_closed_box() {
        let net = random_net(&[2, 6, 2], 1.0, 5);
        assert_eq!(net.forward_clipped(&[0.5, 0.5]), net.forward(&[0.5, 0.5]));
        assert_eq!(net.forward_clipped(&[1.5, 0.5]), vec![0.0, 0.0]);
        assert_eq!(net.forward_clipped(&[1.0, 1.0]), net.forward(&[1.0, 1.0]));
        assert_eq!(net.forward_clipped(&[0.0, -1e-12]), vec![0.0, 0.0]);
    }

    #[test]
    fn dense_sparsity_count() {
        let net = random_net(&[2, 32, 32, 2], 1.0, 8);
        assert_eq!(net.sparsity(), 2 * 32 + 32 + 32 * 32 + 32 + 32 * 2);
        let manual = net
            .weights()
            .iter()
            .flat_map(|w| w.iter())
            .chain(net.shifts().iter().flat_map(|v| v.iter()))
            .fold(0.0, |m: f64, x| m.max(x.abs()));
        assert_eq!(net.max_weight(), manual);
    }

    #[test]
    fn shape_errors_at_construction() {
        assert!(ReluNetwork::new(vec![Array2::zeros((3, 2)), Array2::zeros((1, 4))], vec![Array1::zeros(3)]).is_err());
        assert!(ReluNetwork::new(vec![Array2::zeros((3, 2)), Array2::zeros((1, 3))], vec![Array1::zeros(2)]).is_err());
        assert!(ReluNetwork::new(vec![Array2::zeros((3, 2)), Array2::zeros((1, 3))], vec![]).is_err());
        assert!(ReluNetwork::new(vec![array![[f64::NAN]]], vec![]).is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let net = random_net(&[2, 8, 8, 2], 1.0, 21);
        let x = Array::from_shape_fn((10, 2), |(i, j)| i as f64 * 0.1 - j as f64 * 0.2);
        let g = net.backward(x.view(), Array2::zeros((10, 2)).view());
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_least_squares_gradient() {
        // f(x) = W x, loss = ½ Σ_k ‖W x_k − y_k‖², ∇_W = Σ_k (W x_k − y_k) x_kᵀ
        let w = array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.7]];
        let net = ReluNetwork::new(vec![w.clone()], vec![]).unwrap();
        let x = Array::from_shape_fn((9, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).cos());
        let y = Array::from_shape_fn((9, 2), |(i, j)| (i as f64 - j as f64) * 0.1);
        let residual = x.dot(&w.t()) - &y;
        let expected = residual.t().dot(&x);
        let g = net.backward(x.view(), residual.view());
        for (a, b) in g.weights[0].iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn sup_bound_single_layer_cauchy_schwarz() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let net = ReluNetwork::new(vec![array![[1.0, 0.0], [s, s]]], vec![]).unwrap();
        let f = net.sup_bound();
        assert!(f >= 2f64.sqrt() - 1e-15);
        for i in 0..=100 {
            for j in 0..=100 {
                let y = net.forward(&[i as f64 / 100.0, j as f64 / 100.0]);
                assert!(y.iter().all(|v| v.abs() <= f));
            }
        }
    }

    #[test]
    fn split_heads_slices_last_layer() {
        let net = random_net(&[2, 16, 16, 2], 1.0, 33);
        let (h1, h2) = net.split_heads().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = [rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0)];
            let y = net.forward(&x);
            assert_eq!(h1.forward(&x)[0], y[0]);
            assert_eq!(h2.forward(&x)[0], y[1]);
        }
        assert!(h1.sparsity() <= net.sparsity() && h2.sparsity() <= net.sparsity());
        assert!(ReluNetwork::zeros(&[2, 3, 1]).unwrap().split_heads().is_err());
    }

    #[test]
    fn zero_last_layer_heads_vanish() {
        let mut net = random_net(&[2, 6, 2], 1.0, 4);
        net.params_mut().0[1].fill(0.0);
        let (h1, h2) = net.split_heads().unwrap();
        assert_eq!(h1.forward(&[0.2, 0.9]), vec![0.0]);
        assert_eq!(h2.forward(&[0.7, 0.1]), vec![0.0]);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let net = random_net(&[2, 5, 3, 2], 1.7, 99);
        let back = ReluNetwork::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn json_rejects_inconsistent_documents() {
        let bad = r#"{"widths":[2,1],"weights":[[[1.0,2.0],[3.0]]],"shifts":[]}"#;
        assert!(ReluNetwork::from_json(bad).is_err());
        let bad = r#"{"widths":[3,1],"weights":[[[1.0,2.0]]],"shifts":[]}"#;
        assert!(ReluNetwork::from_json(bad).is_err());
        let bad = r#"{"widths":[2,1],"weights":[[[1.0,2.0]]],"shifts":[],"extra":1}"#;
        assert!(ReluNetwork::from_json(bad).is_err());
    }
}
