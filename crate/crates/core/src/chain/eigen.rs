//! Principal eigenpair of the kernel e^{I(x,y)} against pi, represented on
//! an ensemble of anchors drawn from pi.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::{PathIncrement, PathKernel};
use crate::quadrature::pairwise_sum;
use crate::rng::Stream;
use crate::stats::{variance, Estimate};

/// Eigenpair (rho, Psi) on an anchor ensemble, with the Nystrom extension
/// to arbitrary increments.
///
/// The anchor ensemble is antithetic: the second half is the reflection of
/// the first, so the represented kernel keeps the flip symmetry of I.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenPair {
    pub rho: f64,
    pub anchors: Vec<PathIncrement>,
    /// Right eigenvector at the anchors, ensemble mean 1.
    pub psi_values: Vec<f64>,
    /// Left eigenvector at the anchors, scaled so that mean(phi * psi) = 1.
    pub phi_values: Vec<f64>,
    /// Phi Psi / N at the anchors, normalized to sum 1: the invariant law of
    /// the chain as importance weights on the anchor sample.
    pub invariant_weights: Vec<f64>,
    /// Bound on the interaction used by all certified constants.
    pub i_sup: f64,
    /// Attained maximum of the discretized interaction, used as the
    /// rejection envelope of the samplers.
    pub i_max: f64,
    pub lambda: f64,
    pub iterations: usize,
    /// max |K v - rho v| / max |v| at convergence.
    pub residual: f64,
    #[serde(skip)]
    kernel: Option<PathKernel>,
    /// Row-major e^{I(anchor_i, anchor_j)}.
    #[serde(skip)]
    weights: Vec<f64>,
}

impl EigenPair {
    /// True when lambda = 0 and the pair is exactly (1, 1).
    pub fn is_trivial(&self) -> bool {
        self.lambda == 0.0
    }

    pub fn size(&self) -> usize {
        self.anchors.len()
    }

    pub fn path_kernel(&self) -> &PathKernel {
        self.kernel.as_ref().expect("eigenpair built with a path kernel")
    }

    /// e^{I(x, anchor_j)} for every anchor.
    pub fn kernel_row(&self, x: &PathIncrement) -> Vec<f64> {
        if self.is_trivial() {
            return vec![1.0; self.size()];
        }
        let pk = self.path_kernel();
        self.anchors.iter().map(|a| pk.interaction(x, a).exp()).collect()
    }

    /// Nystrom extension Psi(x) = (1 / (rho N)) sum_j e^{I(x, a_j)} Psi_j.
    pub fn evaluate(&self, x: &PathIncrement) -> f64 {
        if self.is_trivial() {
            return 1.0;
        }
        self.evaluate_row(&self.kernel_row(x))
    }

    /// Unbiased estimate of rho Psi(x) from one uniformly chosen anchor:
    /// e^{I(x, a_J)} Psi_J.
    pub fn rho_psi_sample<R: Rng>(&self, x: &PathIncrement, rng: &mut R) -> f64 {
        if self.is_trivial() {
            return 1.0;
        }
        let j = rng.random_range(0..self.size());
        self.path_kernel().interaction(x, &self.anchors[j]).exp() * self.psi_values[j]
    }

    /// Unbiased estimate of rho Phi(y), with Phi the Nystrom extension of
    /// the left eigenvector: e^{I(a_J, y)} Phi_J.
    pub fn rho_phi_sample<R: Rng>(&self, y: &PathIncrement, rng: &mut R) -> f64 {
        if self.is_trivial() {
            return 1.0;
        }
        let j = rng.random_range(0..self.size());
        self.path_kernel().interaction(&self.anchors[j], y).exp() * self.phi_values[j]
    }

    /// Psi(x) from `m` anchors drawn uniformly with replacement.
    pub fn evaluate_sampled<R: Rng>(&self, x: &PathIncrement, m: usize, rng: &mut R) -> f64 {
        if self.is_trivial() {
            return 1.0;
        }
        let total: f64 = (0..m).map(|_| self.rho_psi_sample(x, rng)).sum();
        total / (m as f64 * self.rho)
    }

    pub fn evaluate_row(&self, row: &[f64]) -> f64 {
        let terms: Vec<f64> = row.iter().zip(&self.psi_values).map(|(w, p)| w * p).collect();
        pairwise_sum(&terms) / (self.rho * self.size() as f64)
    }

    /// Nystrom evaluation with the eigenfunction bounds asserted.
    pub fn evaluate_checked(&self, x: &PathIncrement) -> Result<f64> {
        let v = self.evaluate(x);
        let (lo, hi) = self.psi_bounds();
        if v < lo * (1.0 - 1e-12) || v > hi * (1.0 + 1e-12) {
            return Err(Error::Discretization(format!(
                "Psi evaluation {v} outside [{lo}, {hi}]; increase the ensemble size or n_substeps"
            )));
        }
        Ok(v)
    }

    /// [e^{-i_sup}, e^{i_sup}].
    pub fn rho_bounds(&self) -> (f64, f64) {
        ((-self.i_sup).exp(), self.i_sup.exp())
    }

    /// [e^{-2 i_sup}, e^{2 i_sup}].
    pub fn psi_bounds(&self) -> (f64, f64) {
        ((-2.0 * self.i_sup).exp(), (2.0 * self.i_sup).exp())
    }

    pub fn psi_max(&self) -> f64 {
        self.psi_values.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn psi_min(&self) -> f64 {
        self.psi_values.iter().copied().fold(f64::MAX, f64::min)
    }

    pub fn phi_max(&self) -> f64 {
        self.phi_values.iter().copied().fold(f64::MIN, f64::max)
    }

    /// log rho with the standard error implied by the anchor sample.
    ///
    /// The influence of one anchor z on rho is rho (m(z) - 1) with m the
    /// invariant density against pi; antithetic pairs count once.
    pub fn log_rho(&self) -> Estimate {
        if self.is_trivial() {
            return Estimate::exact(0.0);
        }
        let m: Vec<f64> = self.invariant_weights.iter().map(|w| w * self.size() as f64).collect();
        let pairs = self.size() / 2;
        Estimate { value: self.rho.ln(), stderr: (variance(&m[..pairs]) / pairs as f64).sqrt(), n: pairs }
    }

    /// E[1 / Psi(X)] under the invariant law of the chain.
    pub fn psi_inverse_mean(&self) -> Estimate {
        if self.is_trivial() {
            return Estimate::exact(1.0);
        }
        let p = self.size() as f64;
        let terms: Vec<f64> = self.invariant_weights.iter().zip(&self.psi_values).map(|(w, s)| w / s).collect();
        let value = pairwise_sum(&terms);
        let pairs = self.size() / 2;
        let scaled: Vec<f64> = terms[..pairs].iter().map(|t| t * p).collect();
        Estimate { value, stderr: (variance(&scaled) / pairs as f64).sqrt(), n: pairs }
    }

    /// max_i |(K v)_i - rho v_i| / max |v| for the stored eigenvector.
    pub fn direct_residual(&self) -> f64 {
        if self.is_trivial() {
            return 0.0;
        }
        let p = self.size();
        let kv = apply(&self.weights, &self.psi_values, p);
        let vmax = self.psi_max();
        kv.iter().zip(&self.psi_values).map(|(a, v)| (a - self.rho * v).abs()).fold(0.0, f64::max) / vmax
    }
}

/// (K v)_i = (1/N) sum_j W_ij v_j.
fn apply(w: &[f64], v: &[f64], p: usize) -> Vec<f64> {
    w.par_chunks(p)
        .map(|row| {
            let t: Vec<f64> = row.iter().zip(v).map(|(a, b)| a * b).collect();
            pairwise_sum(&t) / p as f64
        })
        .collect()
}

/// (K^T u)_j = (1/N) sum_i W_ij u_i.
fn apply_transpose(w: &[f64], u: &[f64], p: usize) -> Vec<f64> {
    let mut out = vec![0.0; p];
    for (i, row) in w.chunks(p).enumerate() {
        let ui = u[i];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * ui;
        }
    }
    out.iter_mut().for_each(|o| *o /= p as f64);
    out
}

/// Normalized power iteration; returns (eigenvalue, vector with mean 1,
/// iterations, converged).
fn power_iterate(op: impl Fn(&[f64]) -> Vec<f64>, p: usize, max_iters: usize, tol: f64) -> (f64, Vec<f64>, usize, bool) {
    let mut v = vec![1.0; p];
    let mut rho = 0.0;
    for it in 1..=max_iters {
        let w = op(&v);
        let new_rho = pairwise_sum(&w) / p as f64;
        let new_v: Vec<f64> = w.iter().map(|x| x / new_rho).collect();
        let vmax = new_v.iter().copied().fold(0.0, f64::max);
        let dv = new_v.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / vmax;
        let drho = if rho > 0.0 { (new_rho - rho).abs() / new_rho } else { f64::INFINITY };
        v = new_v;
        rho = new_rho;
        if drho.max(dv) < tol {
            return (rho, v, it, true);
        }
    }
    (rho, v, max_iters, false)
}

/// Solve the eigenproblem by power iteration on the anchor matrix
/// W_ij = e^{I(a_i, a_j)} / N with anchors drawn from pi.
pub fn solve_eigenpair(pk: &PathKernel, ensemble_size: usize, max_iters: usize, tol: f64, rng: &mut Stream) -> Result<EigenPair> {
    if ensemble_size < 256 || ensemble_size % 2 != 0 {
        return Err(Error::Config(format!("ensemble size must be even and at least 256, got {ensemble_size}")));
    }
    let half = ensemble_size / 2;
    let mut anchors: Vec<PathIncrement> = (0..half).map(|_| pk.sample_pi(rng)).collect();
    let reflected: Vec<PathIncrement> = anchors.iter().map(|a| a.negated()).collect();
    anchors.extend(reflected);
    let i_sup = pk.i_sup();
    let p = ensemble_size;
    if pk.lambda == 0.0 {
        return Ok(EigenPair {
            rho: 1.0,
            anchors,
            psi_values: vec![1.0; p],
            phi_values: vec![1.0; p],
            invariant_weights: vec![1.0 / p as f64; p],
            i_sup,
            i_max: 0.0,
            lambda: 0.0,
            iterations: 0,
            residual: 0.0,
            kernel: Some(pk.clone()),
            weights: Vec::new(),
        });
    }
    let weights: Vec<f64> = anchors
        .par_iter()
        .flat_map_iter(|x| anchors.iter().map(move |y| pk.interaction(x, y).exp()))
        .collect();
    let (rho, psi, iterations, converged) = power_iterate(|v| apply(&weights, v, p), p, max_iters, tol);
    if !converged {
        return Err(Error::Discretization(format!("power iteration did not converge in {max_iters} iterations")));
    }
    let (rho_left, phi, _, _) = power_iterate(|u| apply_transpose(&weights, u, p), p, max_iters, tol);
    if (rho_left - rho).abs() > 1e3 * tol * rho {
        return Err(Error::EigenInconsistency(format!("left and right eigenvalues differ: {rho_left} vs {rho}")));
    }
    let prod: Vec<f64> = phi.iter().zip(&psi).map(|(a, b)| a * b).collect();
    let mean_prod = pairwise_sum(&prod) / p as f64;
    let phi: Vec<f64> = phi.iter().map(|a| a / mean_prod).collect();
    let invariant_weights: Vec<f64> = phi.iter().zip(&psi).map(|(a, b)| a * b / p as f64).collect();
    let mut ep = EigenPair {
        rho,
        anchors,
        psi_values: psi,
        phi_values: phi,
        invariant_weights,
        i_sup,
        i_max: pk.interaction_max(),
        lambda: pk.lambda,
        iterations,
        residual: 0.0,
        kernel: Some(pk.clone()),
        weights,
    };
    ep.residual = ep.direct_residual();
    let (rlo, rhi) = ep.rho_bounds();
    let (plo, phi_hi) = ep.psi_bounds();
    if rho < rlo || rho > rhi || ep.psi_min() < plo || ep.psi_max() > phi_hi {
        return Err(Error::Discretization(format!(
            "eigenpair violates its a priori bounds (rho = {rho}, Psi in [{}, {}])",
            ep.psi_min(),
            ep.psi_max()
        )));
    }
    Ok(ep)
}
