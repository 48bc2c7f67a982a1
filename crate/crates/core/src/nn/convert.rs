//! Conversion of a ReLU network with parameters bounded by `B` into an
//! equivalent network with every parameter in `[-1, 1]`.
//!
//! Layer `l` is divided by `λ_l ≥ 1` and shift `v_l` by `Λ_l = λ_0⋯λ_{l-1}`.
//! Positive homogeneity, `ρ_{v/λ}(y/λ) = ρ_v(y)/λ`, makes the rescaled trunk
//! compute `g/F` with `F = Λ_{L+1}`. The magnitude is recovered after the
//! trunk: the old output row becomes a hidden layer emitting copies of
//! `P = ρ(c·y)` and `N = ρ(−c·y)`, and each following unit-weight layer doubles
//! both parts. With four channels `(P, P, N, N)` the two parts never mix. When
//! the original width is below 4, three channels start from `(N, P, P)`. A
//! first layer gives `P` on `(0, 2, 2)` and `N` on `(1, 0, 1)`, a repeated layer
//! doubles both while keeping those supports, and a last layer moves `P` to
//! channel 3 and `N` to channels 1 and 2 so that the readout `(−1, −1, 1)`
//! collects twice the remaining factor. `P` and `N` never overlap on an input,
//! so the ReLU acts on each part separately.

use ndarray::{array, Array1, Array2};
use serde::{Deserialize, Serialize};

use super::ReluNetwork;
use crate::error::{Error, Result};

/// Hypothesis-class bookkeeping for a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCertificate {
    /// Hidden activation layers `L′`.
    pub depth: usize,
    pub widths: Vec<usize>,
    /// Exact nonzero parameter count.
    pub sparsity: usize,
    /// Largest absolute parameter.
    pub max_weight: f64,
    /// Certified bound on `|f|` over `[0,1]^d`.
    pub sup_bound: f64,
    /// `max_weight ≤ 1`.
    pub member_of_unit_class: bool,
    /// Conversion guarantees for a source network with depth `L`, max width
    /// `p`, sparsity `s` and bound `B`: `⌈(ln B + 5)L⌉`, `max{3, p}` and
    /// `2s + 12L′`. `None` when no conversion took place.
    pub depth_bound: Option<usize>,
    pub width_bound: Option<usize>,
    pub sparsity_bound: Option<usize>,
    pub within_bounds: bool,
    /// Base of the logarithm in `depth_bound`.
    pub log_base: String,
}

impl ClassCertificate {
    /// Certificate for `net` as it stands.
    pub fn of(net: &ReluNetwork) -> Self {
        let max_weight = net.max_weight();
        ClassCertificate {
            depth: net.depth(),
            widths: net.widths().to_vec(),
            sparsity: net.sparsity(),
            max_weight,
            sup_bound: net.sup_bound(),
            member_of_unit_class: max_weight <= 1.0,
            depth_bound: None,
            width_bound: None,
            sparsity_bound: None,
            within_bounds: true,
            log_base: "e".to_string(),
        }
    }
}

/// Returns `φ` with `max_weight(φ) ≤ 1` and `φ(x) = g(x)` on all of `ℝ^d`,
/// plus its certificate.
///
/// Networks with `B ≤ 1` (including `B = 0`) are returned unchanged. Otherwise
/// the network must have a single output.
pub fn convert_to_unit_weights(net: &ReluNetwork) -> Result<(ReluNetwork, ClassCertificate)> {
    let bound = net.max_weight();
    if !bound.is_finite() {
        return Err(Error::invalid("parameters must be finite"));
    }
    if bound <= 1.0 {
        return Ok((net.clone(), ClassCertificate::of(net)));
    }
    if net.out_dim() != 1 {
        return Err(Error::invalid(format!(
            "conversion needs a scalar-output network, got {} outputs; split the heads first",
            net.out_dim()
        )));
    }

    let depth = net.depth();
    let weights = net.weights();
    let shifts = net.shifts();

    // λ_l: enough to bring W_l into [-1, 1] and the next shift under Λ_{l+1}.
    let mut lambdas = Vec::with_capacity(depth + 1);
    let mut cumulative = 1.0;
    for l in 0..=depth {
        let mut lambda = max_abs(weights[l].iter()).max(1.0);
        if l < depth {
            lambda = lambda.max(max_abs(shifts[l].iter()) / cumulative);
        }
        cumulative *= lambda;
        lambdas.push(lambda);
    }
    let total = cumulative;

    let mut new_weights: Vec<Array2<f64>> = Vec::new();
    let mut new_shifts: Vec<Array1<f64>> = Vec::new();
    let mut prefix = 1.0;
    for l in 0..depth {
        new_weights.push(&weights[l] / lambdas[l]);
        prefix *= lambdas[l];
        new_shifts.push(&shifts[l] / prefix);
    }
    let last_row = weights[depth].row(0).to_owned() / lambdas[depth];

    let wide = net.max_width() >= 4;
    let plan = RecoveryPlan::new(total, wide);
    let c = total / plan.gain;
    let row = &last_row * c;
    let neg = -&row;

    if wide {
        new_weights.push(stack_rows(&[&row, &row, &neg, &neg]));
        new_shifts.push(Array1::zeros(4));
        let double = array![
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 1.0],
            [0.0, 0.0, 1.0, 1.0]
        ];
        for _ in 0..plan.layers {
            new_weights.push(double.clone());
            new_shifts.push(Array1::zeros(4));
        }
        new_weights.push(array![[1.0, 1.0, -1.0, -1.0]]);
    } else {
        new_weights.push(stack_rows(&[&neg, &row, &row]));
        new_shifts.push(Array1::zeros(3));
        let first = array![[1.0, -1.0, -1.0], [-1.0, 1.0, 1.0], [1.0, 1.0, 1.0]];
        let double = array![[1.0, -1.0, 1.0], [-1.0, 1.0, 1.0], [1.0, 1.0, 1.0]];
        let last = array![[1.0, -1.0, 1.0], [1.0, -1.0, 1.0], [-1.0, 1.0, 1.0]];
        if plan.layers > 1 {
            new_weights.push(first);
            new_shifts.push(Array1::zeros(3));
            for _ in 2..plan.layers {
                new_weights.push(double.clone());
                new_shifts.push(Array1::zeros(3));
            }
        }
        new_weights.push(last);
        new_shifts.push(Array1::zeros(3));
        new_weights.push(array![[-1.0, -1.0, 1.0]]);
    }

    let converted = ReluNetwork::new(new_weights, new_shifts)?;

    let mut cert = ClassCertificate::of(&converted);
    cert.sup_bound = cert.sup_bound.min(net.sup_bound());
    let depth_bound = ((bound.ln() + 5.0) * depth as f64).ceil() as usize;
    let width_bound = net.max_width().max(3);
    let sparsity_bound = 2 * net.sparsity() + 12 * cert.depth;
    cert.within_bounds = cert.depth <= depth_bound
        && cert.widths.iter().all(|&w| w <= width_bound)
        && cert.sparsity <= sparsity_bound;
    cert.depth_bound = Some(depth_bound);
    cert.width_bound = Some(width_bound);
    cert.sparsity_bound = Some(sparsity_bound);
    Ok((converted, cert))
}

/// Number of recovery layers after the split layer and the gain they give
/// together with the readout.
struct RecoveryPlan {
    layers: usize,
    gain: f64,
}

impl RecoveryPlan {
    fn new(total: f64, wide: bool) -> Self {
        // Smallest k ≥ 1 with 2^k ≥ total.
        let mut k = 1usize;
        while 2f64.powi(k as i32) < total {
            k += 1;
        }
        let gain = 2f64.powi(k as i32);
        let layers = if wide { k - 1 } else { k };
        RecoveryPlan { layers, gain }
    }
}

fn max_abs<'a>(it: impl Iterator<Item = &'a f64>) -> f64 {
    it.fold(0.0, |m: f64, x| m.max(x.abs()))
}

fn stack_rows(rows: &[&Array1<f64>]) -> Array2<f64> {
    let cols = rows[0].len();
    Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j])
}
