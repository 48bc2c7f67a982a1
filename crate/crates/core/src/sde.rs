//! SDE models `dX = b(X) dt + σ(X) dW` described by their coefficient
//! evaluators, the two-dimensional benchmark model, affine rescaling, and a
//! sampled check of the dissipativity condition `xᵀb(x) ≤ -r‖x‖^α`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constants of the dissipativity condition `xᵀb(x) ≤ -r‖x‖₂^α` for `‖x‖₂ ≥ m0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dissipativity {
    pub r: f64,
    pub alpha: f64,
    pub m0: f64,
}

impl Default for Dissipativity {
    fn default() -> Self {
        Dissipativity {
            r: 0.5,
            alpha: 1.0,
            m0: 4.0,
        }
    }
}

/// Coefficient evaluators of an Itô SDE on `ℝ^d` driven by `m` Brownian motions.
///
/// Matrices are written row-major into caller-provided buffers: the
/// diffusion is `d×m` and `diffusion_partial(x, j, ..)` writes `∂σ/∂x_j`,
/// also `d×m`. Evaluators must be pure and total on `ℝ^d`.
pub trait SdeModel: Send + Sync {
    fn state_dim(&self) -> usize;

    fn noise_dim(&self) -> usize;

    fn drift(&self, x: &[f64], out: &mut [f64]);

    fn diffusion(&self, x: &[f64], out: &mut [f64]);

    fn diffusion_partial(&self, x: &[f64], j: usize, out: &mut [f64]);

    /// Whether `σ` is square with identically zero off-diagonal entries.
    fn diagonal_noise(&self) -> bool {
        false
    }

    /// Diagonal entries `σ_ii(x)`. Only meaningful when [`diagonal_noise`](Self::diagonal_noise) holds.
    fn diffusion_diagonal(&self, x: &[f64], out: &mut [f64]) {
        let d = self.state_dim();
        let m = self.noise_dim();
        let mut full = vec![0.0; d * m];
        self.diffusion(x, &mut full);
        for (i, o) in out.iter_mut().enumerate().take(d.min(m)) {
            *o = full[i * m + i];
        }
    }

    /// `∂σ_ii/∂x_i` for every `i`, the term the Milstein correction needs.
    fn diffusion_diagonal_slope(&self, x: &[f64], out: &mut [f64]) {
        let d = self.state_dim();
        let m = self.noise_dim();
        let mut full = vec![0.0; d * m];
        for (i, o) in out.iter_mut().enumerate().take(d.min(m)) {
            self.diffusion_partial(x, i, &mut full);
            *o = full[i * m + i];
        }
    }

    fn dissipativity(&self) -> Option<Dissipativity> {
        None
    }
}

impl<M: SdeModel + ?Sized> SdeModel for Arc<M> {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn noise_dim(&self) -> usize {
        (**self).noise_dim()
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        (**self).drift(x, out)
    }
    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        (**self).diffusion(x, out)
    }
    fn diffusion_partial(&self, x: &[f64], j: usize, out: &mut [f64]) {
        (**self).diffusion_partial(x, j, out)
    }
    fn diagonal_noise(&self) -> bool {
        (**self).diagonal_noise()
    }
    fn diffusion_diagonal(&self, x: &[f64], out: &mut [f64]) {
        (**self).diffusion_diagonal(x, out)
    }
    fn diffusion_diagonal_slope(&self, x: &[f64], out: &mut [f64]) {
        (**self).diffusion_diagonal_slope(x, out)
    }
    fn dissipativity(&self) -> Option<Dissipativity> {
        (**self).dissipativity()
    }
}

type VecFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type PartialFn = Arc<dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync>;

/// A diagonal-noise model assembled from closures.
///
/// `sigma` writes the `d` diagonal entries, `sigma_partial(x, j, out)` writes
/// `∂σ_ii/∂x_j` for every `i`.
#[derive(Clone)]
pub struct DiagonalSde {
    dim: usize,
    drift: VecFn,
    sigma: VecFn,
    sigma_partial: PartialFn,
    dissipativity: Option<Dissipativity>,
}

impl std::fmt::Debug for DiagonalSde {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiagonalSde")
            .field("dim", &self.dim)
            .field("dissipativity", &self.dissipativity)
            .finish_non_exhaustive()
    }
}

impl DiagonalSde {
    pub fn new(
        dim: usize,
        drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        sigma: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        sigma_partial: impl Fn(&[f64], usize, &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("state dimension must be at least 1"));
        }
        Ok(DiagonalSde {
            dim,
            drift: Arc::new(drift),
            sigma: Arc::new(sigma),
            sigma_partial: Arc::new(sigma_partial),
            dissipativity: None,
        })
    }

    pub fn with_dissipativity(mut self, meta: Dissipativity) -> Self {
        self.dissipativity = Some(meta);
        self
    }

    /// Scalar model `dX = b(X) dt + s(X) dW` with `ds = s'`.
    pub fn scalar(
        b: impl Fn(f64) -> f64 + Send + Sync + 'static,
        s: impl Fn(f64) -> f64 + Send + Sync + 'static,
        ds: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        DiagonalSde {
            dim: 1,
            drift: Arc::new(move |x, out| out[0] = b(x[0])),
            sigma: Arc::new(move |x, out| out[0] = s(x[0])),
            sigma_partial: Arc::new(move |x, _, out| out[0] = ds(x[0])),
            dissipativity: None,
        }
    }

    /// Geometric Brownian motion `dX = aX dt + θX dW`.
    pub fn geometric_brownian(a: f64, theta: f64) -> Self {
        Self::scalar(move |x| a * x, move |x| theta * x, move |_| theta)
    }

    /// The model with every coefficient identically zero.
    pub fn zero(dim: usize) -> Self {
        Self::constant(vec![0.0; dim], vec![0.0; dim])
    }

    /// Constant drift and constant diagonal diffusion.
    pub fn constant(drift: Vec<f64>, sigma: Vec<f64>) -> Self {
        assert_eq!(drift.len(), sigma.len(), "drift/sigma length mismatch");
        DiagonalSde {
            dim: drift.len(),
            drift: Arc::new(move |_, out| out.copy_from_slice(&drift)),
            sigma: Arc::new(move |_, out| out.copy_from_slice(&sigma)),
            sigma_partial: Arc::new(|_, _, out| out.fill(0.0)),
            dissipativity: None,
        }
    }
}

impl SdeModel for DiagonalSde {
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn noise_dim(&self) -> usize {
        self.dim
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }
    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut diag = vec![0.0; d];
        (self.sigma)(x, &mut diag);
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = diag[i];
        }
    }
    fn diffusion_partial(&self, x: &[f64], j: usize, out: &mut [f64]) {
        let d = self.dim;
        let mut diag = vec![0.0; d];
        (self.sigma_partial)(x, j, &mut diag);
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = diag[i];
        }
    }
    fn diagonal_noise(&self) -> bool {
        true
    }
    fn diffusion_diagonal(&self, x: &[f64], out: &mut [f64]) {
        (self.sigma)(x, out)
    }
    fn diffusion_diagonal_slope(&self, x: &[f64], out: &mut [f64]) {
        let mut buf = vec![0.0; self.dim];
        for i in 0..self.dim {
            (self.sigma_partial)(x, i, &mut buf);
            out[i] = buf[i];
        }
    }
    fn dissipativity(&self) -> Option<Dissipativity> {
        self.dissipativity
    }
}

/// Shape function `s(·)` of the benchmark diffusion. Every variant is
/// nonnegative with infimum 0 and globally Lipschitz.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionShape {
    /// `1 / (1 + e^{-u})`
    #[default]
    Sigmoid,
    /// `sin²(u)`
    SinSquared,
    /// `|sin(u)|`
    AbsSin,
    /// `(1 + sin u) / 2`
    ShiftedSin,
}

impl DiffusionShape {
    pub fn value(self, u: f64) -> f64 {
        match self {
            DiffusionShape::Sigmoid => sigmoid(u),
            DiffusionShape::SinSquared => u.sin().powi(2),
            DiffusionShape::AbsSin => u.sin().abs(),
            DiffusionShape::ShiftedSin => 0.5 * (1.0 + u.sin()),
        }
    }

    pub fn derivative(self, u: f64) -> f64 {
        match self {
            DiffusionShape::Sigmoid => {
                let s = sigmoid(u);
                s * (1.0 - s)
            }
            DiffusionShape::SinSquared => (2.0 * u).sin(),
            DiffusionShape::AbsSin => {
                let s = u.sin();
                if s > 0.0 {
                    u.cos()
                } else if s < 0.0 {
                    -u.cos()
                } else {
                    0.0
                }
            }
            DiffusionShape::ShiftedSin => 0.5 * u.cos(),
        }
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn default_diffusion_scale() -> f64 {
    1.0
}

/// Parameters of the two-dimensional benchmark model
///
/// ```text
/// dY₁ = [-α₁Y₁ + c₁α₂(sin(Y₂/c₂) + 2)] dt + [β₁c₁ s(Y₁/c₁) + c₁β₃] dW₁
/// dY₂ = [c₂α₃(cos(Y₁/c₁) + 2) - α₄Y₂] dt + [β₂c₂ s(Y₂/c₂) + c₂β₃] dW₂
/// ```
///
/// `diffusion_scale` multiplies both diffusion entries (1 by default).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub c1: f64,
    pub c2: f64,
    #[serde(default)]
    pub s_shape: DiffusionShape,
    #[serde(default = "default_diffusion_scale")]
    pub diffusion_scale: f64,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        BenchmarkParams {
            alpha1: 1.0,
            alpha2: 2.0,
            alpha3: 2.0,
            alpha4: 1.0,
            beta1: 0.5,
            beta2: 0.5,
            beta3: 0.1,
            c1: 1.0 / 6.0,
            c2: 1.0 / 5.0,
            s_shape: DiffusionShape::Sigmoid,
            diffusion_scale: 1.0,
        }
    }
}

impl BenchmarkParams {
    /// The same model without box rescaling (`c₁ = c₂ = 1`).
    pub fn unscaled(self) -> Self {
        BenchmarkParams {
            c1: 1.0,
            c2: 1.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha1,
            self.alpha2,
            self.alpha3,
            self.alpha4,
            self.beta1,
            self.beta2,
            self.beta3,
            self.c1,
            self.c2,
            self.diffusion_scale,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("benchmark parameters must be finite"));
        }
        for (name, v) in [
            ("alpha1 > 0", self.alpha1),
            ("alpha4 > 0", self.alpha4),
            ("beta3 > 0", self.beta3),
            ("c1 > 0", self.c1),
            ("c2 > 0", self.c2),
            ("diffusion_scale > 0", self.diffusion_scale),
        ] {
            if v <= 0.0 {
                return Err(Error::invalid(format!("violated {name} (got {v})")));
            }
        }
        // Diagonal diffusion bounded away from zero on a grid of [-3, 3]².
        let model = BenchmarkModel::from_params_unchecked(*self);
        let n = 61;
        let mut diag = [0.0; 2];
        for a in 0..n {
            for b in 0..n {
                let y = [
                    -3.0 + 6.0 * a as f64 / (n - 1) as f64,
                    -3.0 + 6.0 * b as f64 / (n - 1) as f64,
                ];
                model.diffusion_diagonal(&y, &mut diag);
                if diag.iter().any(|&s| s <= 0.0) {
                    return Err(Error::invalid(format!(
                        "violated diffusion bounded away from zero: σ = {diag:?} at {y:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Global Lipschitz constant of the drift from its Jacobian:
    /// `max(α₁, α₄) + max(α₂c₁/c₂, α₃c₂/c₁)`.
    pub fn drift_lipschitz_bound(&self) -> f64 {
        self.alpha1.abs().max(self.alpha4.abs())
            + (self.alpha2 * self.c1 / self.c2)
                .abs()
                .max((self.alpha3 * self.c2 / self.c1).abs())
    }
}

/// The benchmark model built from [`BenchmarkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkModel {
    params: BenchmarkParams,
    dissipativity: Option<Dissipativity>,
}

/// Builds the benchmark model after validating `params`.
pub fn benchmark_model(params: BenchmarkParams) -> Result<BenchmarkModel> {
    params.validate()?;
    Ok(BenchmarkModel::from_params_unchecked(params))
}

impl BenchmarkModel {
    /// Skips validation. Used by diagnostics that probe deliberately broken
    /// parameterizations.
    pub fn from_params_unchecked(params: BenchmarkParams) -> Self {
        BenchmarkModel {
            params,
            dissipativity: Some(Dissipativity::default()),
        }
    }

    pub fn params(&self) -> &BenchmarkParams {
        &self.params
    }

    pub fn with_dissipativity(mut self, meta: Option<Dissipativity>) -> Self {
        self.dissipativity = meta;
        self
    }
}

impl SdeModel for BenchmarkModel {
    fn state_dim(&self) -> usize {
        2
    }

    fn noise_dim(&self) -> usize {
        2
    }

    fn drift(&self, y: &[f64], out: &mut [f64]) {
        let p = &self.params;
        out[0] = -p.alpha1 * y[0] + p.c1 * p.alpha2 * ((y[1] / p.c2).sin() + 2.0);
        out[1] = p.c2 * p.alpha3 * ((y[0] / p.c1).cos() + 2.0) - p.alpha4 * y[1];
    }

    fn diffusion(&self, y: &[f64], out: &mut [f64]) {
        let mut diag = [0.0; 2];
        self.diffusion_diagonal(y, &mut diag);
        out[0] = diag[0];
        out[1] = 0.0;
        out[2] = 0.0;
        out[3] = diag[1];
    }

    fn diffusion_partial(&self, y: &[f64], j: usize, out: &mut [f64]) {
        let p = &self.params;
        out.fill(0.0);
        match j {
            0 => out[0] = p.diffusion_scale * p.beta1 * p.s_shape.derivative(y[0] / p.c1),
            1 => out[3] = p.diffusion_scale * p.beta2 * p.s_shape.derivative(y[1] / p.c2),
            _ => panic!("coordinate {j} out of range for a 2-d model"),
        }
    }

    fn diagonal_noise(&self) -> bool {
        true
    }

    fn diffusion_diagonal(&self, y: &[f64], out: &mut [f64]) {
        let p = &self.params;
        let k = p.diffusion_scale;
        out[0] = k * (p.beta1 * p.c1 * p.s_shape.value(y[0] / p.c1) + p.c1 * p.beta3);
        out[1] = k * (p.beta2 * p.c2 * p.s_shape.value(y[1] / p.c2) + p.c2 * p.beta3);
    }

    fn diffusion_diagonal_slope(&self, y: &[f64], out: &mut [f64]) {
        let p = &self.params;
        let k = p.diffusion_scale;
        out[0] = k * p.beta1 * p.s_shape.derivative(y[0] / p.c1);
        out[1] = k * p.beta2 * p.s_shape.derivative(y[1] / p.c2);
    }

    fn dissipativity(&self) -> Option<Dissipativity> {
        self.dissipativity
    }
}

/// The model of `Z = scale ⊙ X + shift` for a diagonal affine map.
#[derive(Debug, Clone)]
pub struct Rescaled<M> {
    inner: M,
    scale: Vec<f64>,
    shift: Vec<f64>,
}

/// Transforms `model` into the model of `Z = scale ⊙ X + shift`:
/// `b_Z(z) = scale ⊙ b(x)`, `σ_Z(z) = diag(scale) σ(x)` with `x = (z - shift) / scale`.
pub fn rescale_model<M: SdeModel>(model: M, scale: &[f64], shift: &[f64]) -> Result<Rescaled<M>> {
    let d = model.state_dim();
    if scale.len() != d || shift.len() != d {
        return Err(Error::invalid(format!(
            "scale/shift must have length {d}, got {}/{}",
            scale.len(),
            shift.len()
        )));
    }
    if let Some(i) = scale.iter().position(|&a| a == 0.0 || !a.is_finite()) {
        return Err(Error::invalid(format!("scale[{i}] must be finite and nonzero")));
    }
    if shift.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("shift must be finite"));
    }
    Ok(Rescaled {
        inner: model,
        scale: scale.to_vec(),
        shift: shift.to_vec(),
    })
}

impl<M: SdeModel> Rescaled<M> {
    fn source_point(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.scale)
            .zip(&self.shift)
            .map(|((z, a), c)| (z - c) / a)
            .collect()
    }

    fn is_identity(&self) -> bool {
        self.scale.iter().all(|&a| a == 1.0) && self.shift.iter().all(|&c| c == 0.0)
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: SdeModel> SdeModel for Rescaled<M> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn noise_dim(&self) -> usize {
        self.inner.noise_dim()
    }

    fn drift(&self, z: &[f64], out: &mut [f64]) {
        let x = self.source_point(z);
        self.inner.drift(&x, out);
        for (o, a) in out.iter_mut().zip(&self.scale) {
            *o *= a;
        }
    }

    fn diffusion(&self, z: &[f64], out: &mut [f64]) {
        let x = self.source_point(z);
        self.inner.diffusion(&x, out);
        let m = self.noise_dim();
        for (row, a) in out.chunks_mut(m).zip(&self.scale) {
            row.iter_mut().for_each(|v| *v *= a);
        }
    }

    fn diffusion_partial(&self, z: &[f64], j: usize, out: &mut [f64]) {
        let x = self.source_point(z);
        self.inner.diffusion_partial(&x, j, out);
        let m = self.noise_dim();
        let inv = 1.0 / self.scale[j];
        for (row, a) in out.chunks_mut(m).zip(&self.scale) {
            row.iter_mut().for_each(|v| *v *= a * inv);
        }
    }

    fn diagonal_noise(&self) -> bool {
        self.inner.diagonal_noise()
    }

    fn diffusion_diagonal(&self, z: &[f64], out: &mut [f64]) {
        let x = self.source_point(z);
        self.inner.diffusion_diagonal(&x, out);
        for (o, a) in out.iter_mut().zip(&self.scale) {
            *o *= a;
        }
    }

    fn diffusion_diagonal_slope(&self, z: &[f64], out: &mut [f64]) {
        // a_i ∂σ_ii/∂x_i · (1/a_i): the slope is invariant.
        let x = self.source_point(z);
        self.inner.diffusion_diagonal_slope(&x, out);
    }

    fn dissipativity(&self) -> Option<Dissipativity> {
        if self.is_identity() {
            self.inner.dissipativity()
        } else {
            None
        }
    }
}

/// Outcome of [`dissipativity_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DissipativityReport {
    /// All sampled margins are `≤ 0`.
    pub holds: bool,
    /// Largest sampled value of `xᵀb(x) + r‖x‖₂^α`.
    pub worst_margin: f64,
}

/// Evaluates `xᵀb(x) + r‖x‖₂^α` on `directions_per_radius` directions at each
/// radius. Directions are evenly spaced angles in 2-d, `±1` in 1-d and
/// seeded Gaussian directions otherwise.
pub fn dissipativity_check<M: SdeModel + ?Sized>(
    model: &M,
    radii: &[f64],
    directions_per_radius: usize,
) -> Result<DissipativityReport> {
    let meta = model.dissipativity().ok_or_else(|| {
        Error::Unsupported("model carries no dissipativity metadata".to_string())
    })?;
    if radii.is_empty() || directions_per_radius == 0 {
        return Err(Error::invalid("need at least one radius and one direction"));
    }
    if let Some(r) = radii.iter().find(|&&r| !(r > meta.m0)) {
        return Err(Error::invalid(format!(
            "radius {r} must exceed M0 = {}",
            meta.m0
        )));
    }
    let d = model.state_dim();
    let directions = unit_directions(d, directions_per_radius);
    let mut worst = f64::NEG_INFINITY;
    let mut b = vec![0.0; d];
    for &radius in radii {
        for dir in &directions {
            let x: Vec<f64> = dir.iter().map(|u| u * radius).collect();
            model.drift(&x, &mut b);
            let inner: f64 = x.iter().zip(&b).map(|(x, b)| x * b).sum();
            let margin = inner + meta.r * radius.powf(meta.alpha);
            worst = worst.max(margin);
        }
    }
    Ok(DissipativityReport {
        holds: worst <= 0.0,
        worst_margin: worst,
    })
}

fn unit_directions(d: usize, count: usize) -> Vec<Vec<f64>> {
    match d {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..count)
            .map(|k| {
                let theta = 2.0 * PI * k as f64 / count as f64;
                vec![theta.cos(), theta.sin()]
            })
            .collect(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_d15c);
            (0..count)
                .map(|_| {
                    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let n = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn default_model() -> BenchmarkModel {
        benchmark_model(BenchmarkParams::default()).unwrap()
    }

    #[test]
    fn drift_at_origin() {
        let mut b = [0.0; 2];
        default_model().drift(&[0.0, 0.0], &mut b);
        assert_relative_eq!(b[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(b[1], 6.0 / 5.0, epsilon = 1e-15);
    }

    #[test]
    fn drift_second_component_at_cos_minus_one() {
        let mut b = [0.0; 2];
        default_model().drift(&[PI / 6.0, 0.0], &mut b);
        assert_relative_eq!(b[1], 0.4, epsilon = 1e-14);
    }

    #[test]
    fn sigmoid_diffusion_at_zero() {
        let mut s = [0.0; 2];
        default_model().diffusion_diagonal(&[0.0, 0.0], &mut s);
        assert_relative_eq!(s[0], 0.35 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(s[1], 0.35 / 5.0, epsilon = 1e-15);
    }

    #[test]
    fn validation_names_invariant() {
        let bad = BenchmarkParams {
            alpha1: -1.0,
            ..Default::default()
        };
        let err = benchmark_model(bad).unwrap_err().to_string();
        assert!(err.contains("alpha1"), "{err}");

        let bad = BenchmarkParams {
            beta1: -1.0,
            ..Default::default()
        };
        let err = benchmark_model(bad).unwrap_err().to_string();
        assert!(err.contains("bounded away from zero"), "{err}");
    }

    #[test]
    fn shapes_are_nonnegative_with_zero_infimum() {
        for shape in [
            DiffusionShape::Sigmoid,
            DiffusionShape::SinSquared,
            DiffusionShape::AbsSin,
            DiffusionShape::ShiftedSin,
        ] {
            let mut min = f64::INFINITY;
            for k in -4000..=4000 {
                let v = shape.value(k as f64 * 0.01);
                assert!(v >= 0.0);
                min = min.min(v);
            }
            let far = shape.value(-50.0);
            assert!(min.min(far) < 1e-3, "{shape:?}");
        }
    }

    #[test]
    fn dissipativity_holds_for_benchmark() {
        let report = dissipativity_check(&default_model(), &[5.0, 10.0, 50.0], 1000).unwrap();
        assert!(report.holds, "{report:?}");
    }

    #[test]
    fn dissipativity_fails_for_explosive_drift() {
        let model = DiagonalSde::new(
            2,
            |x, out| out.copy_from_slice(x),
            |_, out| out.fill(1.0),
            |_, _, out| out.fill(0.0),
        )
        .unwrap()
        .with_dissipativity(Dissipativity::default());
        let report = dissipativity_check(&model, &[5.0, 10.0], 64).unwrap();
        assert!(!report.holds);
        assert!(report.worst_margin > 0.0);
    }

    #[test]
    fn dissipativity_fails_when_alpha1_flipped() {
        let params = BenchmarkParams {
            alpha1: -1.0,
            ..Default::default()
        };
        let model = BenchmarkModel::from_params_unchecked(params);
        let report = dissipativity_check(&model, &[5.0, 10.0, 50.0], 1000).unwrap();
        assert!(!report.holds);
    }

    #[test]
    fn dissipativity_requires_metadata_and_large_radii() {
        let model = DiagonalSde::zero(2);
        assert!(matches!(
            dissipativity_check(&model, &[5.0], 8),
            Err(Error::Unsupported(_))
        ));
        assert!(dissipativity_check(&default_model(), &[3.0], 8).is_err());
    }

    #[test]
    fn rescale_rejects_zero_scale() {
        assert!(rescale_model(default_model(), &[1.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn rescale_one_dim_ode() {
        let model = DiagonalSde::scalar(|x| x * x + 1.0, |_| 0.0, |_| 0.0);
        let z = rescale_model(model, &[2.0], &[0.0]).unwrap();
        let mut out = [0.0];
        for &p in &[-1.5, 0.0, 0.7, 3.0] {
            z.drift(&[p], &mut out);
            let x = p / 2.0;
            assert_relative_eq!(out[0], 2.0 * (x * x + 1.0), epsilon = 1e-14);
        }
    }

    #[test]
    fn lipschitz_bound_for_defaults() {
        let p = BenchmarkParams::default();
        // max(1,1) + max(2·(1/6)/(1/5), 2·(1/5)/(1/6)) = 1 + 2.4
        assert_relative_eq!(p.drift_lipschitz_bound(), 3.4, epsilon = 1e-14);
    }
}
