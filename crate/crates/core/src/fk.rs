//! Quenched Feynman-Kac solver on sampled fields, the homogenized-mean
//! check, and the Edwards-Wilkinson fluctuation experiment.
//!
//! Micro-scale solutions of d_t u = (1/2) Lap u + lambda V u are written as
//! u(t, y) = E[u0(y + B_t) exp{lambda int_0^t V(t - s, y + B_s) ds}]; the
//! macro solution is u_eps(t, x) = u(t / eps^2, x / eps).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{tilted_expectation, AEffEstimate, TiltedChain, TiltedEstimate};
use crate::error::{Error, Result};
use crate::field::{sample_field, FieldBox, FieldRealization};
use crate::mollifier::MollifierPair;
use crate::pde::{ew_variance, solve_heat, ScalarField};
use crate::rng::{Streams, Tag};
use crate::stats::{self, bootstrap, jarque_bera, mean, quantile, variance, Estimate};

/// Initial conditions and test functions used by the experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    /// amplitude * exp(-|x - center|^2 / (2 variance)).
    Gaussian { center: Vec<f64>, variance: f64, amplitude: f64 },
    Constant { value: f64 },
}

impl TestFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Gaussian { center, variance, amplitude } => {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
                amplitude * (-r2 / (2.0 * variance)).exp()
            }
            TestFunction::Constant { value } => *value,
        }
    }

    pub fn to_field(&self, n: usize, dim: usize, half_width: f64) -> Result<ScalarField> {
        if let TestFunction::Gaussian { center, .. } = self {
            if center.len() != dim {
                return Err(Error::Config(format!("profile centre has {} coordinates, expected {dim}", center.len())));
            }
        }
        ScalarField::from_fn(n, dim, half_width, |x| self.eval(x))
    }

    pub fn is_positive(&self) -> bool {
        match self {
            TestFunction::Gaussian { amplitude, .. } => *amplitude > 0.0,
            TestFunction::Constant { value } => *value > 0.0,
        }
    }
}

/// Feynman-Kac estimate of u(t, x) on one field realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FkEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_walkers: usize,
    pub field_seed: u64,
    pub t: f64,
    pub x: Vec<f64>,
    /// Fraction of walkers that left the spatial box.
    pub exit_fraction: f64,
    pub box_warning: bool,
}

/// Largest exit fraction tolerated without a box warning.
pub const EXIT_WARNING: f64 = 0.01;

/// Per-walker values u0(y + B_t) e^{lambda int V ds}, with the time integral
/// by the trapezoid rule on the field steps, and an exit flag.
fn walker_values(field: &FieldRealization, u0: &(dyn Fn(&[f64]) -> f64 + Sync), lambda: f64, t: f64, x: &[f64], n_walkers: usize, streams: &Streams) -> Result<Vec<(f64, bool)>> {
    let d = field.dim;
    if x.len() != d {
        return Err(Error::Contract(format!("evaluation point has {} coordinates, expected {d}", x.len())));
    }
    let steps_f = t / field.dt;
    let steps = steps_f.round() as usize;
    if (steps_f - steps as f64).abs() > 1e-6 {
        return Err(Error::Config(format!("time {t} is not a multiple of the field step {}", field.dt)));
    }
    if field.bx.t_lo > 1e-12 || field.bx.t_hi < t - 1e-12 {
        return Err(Error::Config(format!("field time range [{}, {}] does not cover [0, {t}]", field.bx.t_lo, field.bx.t_hi)));
    }
    if !field.contains(x) {
        return Err(Error::Config("evaluation point lies outside the field box".into()));
    }
    let sd = field.dt.sqrt();
    Ok((0..n_walkers)
        .into_par_iter()
        .map(|w| {
            let mut rng = streams.stream(Tag::Walkers, w as u64);
            let mut pos = x.to_vec();
            let mut exponent = 0.0;
            let mut exited = false;
            let mut prev = if lambda != 0.0 { field.interpolate(t, &pos) } else { 0.0 };
            for i in 0..steps {
                for p in pos.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *p += sd * z;
                }
                if lambda != 0.0 {
                    let next = field.interpolate(t - (i + 1) as f64 * field.dt, &pos);
                    exponent += 0.5 * (prev + next) * field.dt;
                    prev = next;
                }
                if !exited && !field.contains(&pos) {
                    exited = true;
                }
            }
            (u0(&pos) * (lambda * exponent).exp(), exited)
        })
        .collect())
}

/// Quenched solution at (t, x) by `n_walkers` Brownian walkers with the
/// field's time step; walker `w` uses stream `(Walkers, w)`.
pub fn fk_solve(field: &FieldRealization, u0: &(dyn Fn(&[f64]) -> f64 + Sync), lambda: f64, t: f64, x: &[f64], n_walkers: usize, streams: &Streams) -> Result<FkEstimate> {
    if n_walkers < 2 {
        return Err(Error::Config("fk_solve needs at least two walkers".into()));
    }
    let vals = walker_values(field, u0, lambda, t, x, n_walkers, streams)?;
    let v: Vec<f64> = vals.iter().map(|p| p.0).collect();
    let e = stats::mean_estimate(&v);
    let exit_fraction = vals.iter().filter(|p| p.1).count() as f64 / n_walkers as f64;
    let box_warning = exit_fraction > EXIT_WARNING;
    if box_warning {
        log::warn!("{:.2}% of walkers left the field box", 100.0 * exit_fraction);
    }
    Ok(FkEstimate { value: e.value, stderr: e.stderr, n_walkers, field_seed: field.seed, t, x: x.to_vec(), exit_fraction, box_warning })
}

/// Grid on which the effective equation is solved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeGrid {
    pub n: usize,
    pub half_width: f64,
}

/// Outcome of the homogenized-mean comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCheckReport {
    pub eps: f64,
    pub t: f64,
    pub x: Vec<f64>,
    /// Micro time t / eps^2.
    pub chain_time: f64,
    pub annealed: TiltedEstimate,
    /// u_bar(t, x) from the effective equation with a_eff.
    pub pde: Estimate,
    pub relative_gap: f64,
    pub combined_sigma: f64,
    /// |gap| <= 5% of the PDE value + 3 combined sigma.
    pub pass: bool,
}

/// Relative tolerance of the homogenized-mean comparison.
pub const MEAN_CHECK_RELATIVE: f64 = 0.05;

/// Compare the renormalized annealed mean, computed as the tilted
/// expectation of u0(x + eps B_{t / eps^2}), with u_bar(t, x) from the
/// effective equation driven by the estimated a_eff. The PDE error is
/// propagated from the a_eff standard errors by finite differences.
#[allow(clippy::too_many_arguments)]
pub fn homogenized_mean_check(
    chain: &TiltedChain,
    a_eff: &AEffEstimate,
    u0: &TestFunction,
    eps: f64,
    t: f64,
    x: &[f64],
    n_paths: usize,
    grid: PdeGrid,
    streams: &Streams,
) -> Result<MeanCheckReport> {
    let d = chain.dim();
    if !(eps > 0.0 && t > 0.0) || x.len() != d {
        return Err(Error::Config("mean check needs eps > 0, t > 0 and a point of the chain dimension".into()));
    }
    let chain_time = t / (eps * eps);
    if chain_time > 2000.0 {
        return Err(Error::Config(format!("t / eps^2 = {chain_time} exceeds the chain budget of 2000")));
    }
    let f = |p: &crate::path::AssembledPath| {
        let y: Vec<f64> = x.iter().zip(p.endpoint()).map(|(a, b)| a + eps * b).collect();
        u0.eval(&y)
    };
    let annealed = tilted_expectation(chain, f, chain_time, 1.0, n_paths, 8, &streams.child(Tag::Tilted, 0))?;
    let field0 = u0.to_field(grid.n, d, grid.half_width)?;
    let value_at = |a: &[Vec<f64>]| -> Result<f64> { Ok(solve_heat(a, &field0, t)?.value_at(x)) };
    let base = value_at(&a_eff.matrix)?;
    let mut var = 0.0;
    for i in 0..d {
        for j in i..d {
            let se = a_eff.stderr[i][j];
            if se == 0.0 {
                continue;
            }
            let h = 1e-3 * a_eff.matrix[i][i].abs().max(1e-3);
            let mut plus = a_eff.matrix.clone();
            let mut minus = a_eff.matrix.clone();
            plus[i][j] += h;
            minus[i][j] -= h;
            if i != j {
                plus[j][i] += h;
                minus[j][i] -= h;
            }
            let deriv = (value_at(&plus)? - value_at(&minus)?) / (2.0 * h);
            var += (deriv * se).powi(2);
        }
    }
    let pde = Estimate { value: base, stderr: var.sqrt(), n: a_eff.n_blocks };
    let gap = annealed.value - base;
    let combined_sigma = annealed.stderr.hypot(pde.stderr);
    Ok(MeanCheckReport {
        eps,
        t,
        x: x.to_vec(),
        chain_time,
        relative_gap: gap / base,
        combined_sigma,
        pass: gap.abs() <= MEAN_CHECK_RELATIVE * base.abs() + 3.0 * combined_sigma,
        annealed,
        pde,
    })
}

/// Parameters of the fluctuation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluctuationConfig {
    pub lambda: f64,
    pub eps: f64,
    pub t: f64,
    pub n_realizations: usize,
    pub n_walkers: usize,
    /// Spatial quadrature nodes per axis for int u_eps g dx.
    pub quad_nodes: usize,
    /// Half width of the macro quadrature box.
    pub quad_half_width: f64,
    pub dt: f64,
    pub dx: f64,
    pub u0: TestFunction,
    pub g: TestFunction,
    pub pde_grid: PdeGrid,
    pub n_time_nodes: usize,
}

/// Estimated quantities feeding the fluctuation prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationInputs {
    pub a_eff: Vec<Vec<f64>>,
    pub nu_eff2: Estimate,
    pub c1: f64,
    pub c2: f64,
}

/// One field realization of the fluctuation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationRecord {
    pub realization: usize,
    pub field_seed: u64,
    pub eps: f64,
    pub lambda: f64,
    /// int u_eps g dx from each half of the walkers.
    pub integral_a: f64,
    pub integral_b: f64,
    /// FK variance of the combined integral.
    pub fk_variance: f64,
    pub exit_fraction: f64,
    /// eps^{-(d/2 - 1)} (integral - mean) e^{-zeta}.
    pub xi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationReport {
    pub config: FluctuationConfig,
    pub inputs: FluctuationInputs,
    pub records: Vec<FluctuationRecord>,
    pub xi_mean: Estimate,
    pub xi_variance: f64,
    pub xi_variance_ci: (f64, f64),
    pub normality_p_value: f64,
    /// lambda^2 nu_eff^2 int_0^t int |g_bar u_bar|^2.
    pub target: f64,
    pub ratio: f64,
    /// Variance of the integrals across realizations.
    pub total_variance: f64,
    /// Field-to-field variance from the covariance of the walker halves.
    pub field_variance: f64,
    /// Mean FK variance within a realization.
    pub fk_variance: f64,
    /// |total - (field + fk)| / total.
    pub decomposition_mismatch: f64,
    /// FK noise is at least half of the total variance.
    pub inconclusive: bool,
    pub max_exit_fraction: f64,
}

impl FluctuationReport {
    /// Whether the empirical variance lies within `band` (relative) of the target.
    pub fn within(&self, band: f64) -> bool {
        (self.xi_variance - self.target).abs() <= band * self.target.abs()
    }
}

fn quadrature_nodes(cfg: &FluctuationConfig, d: usize) -> (Vec<Vec<f64>>, f64) {
    let m = cfg.quad_nodes;
    let h = 2.0 * cfg.quad_half_width / m as f64;
    let nodes = (0..m.pow(d as u32))
        .map(|idx| {
            let mut r = idx;
            let mut x = vec![0.0; d];
            for k in (0..d).rev() {
                x[k] = -cfg.quad_half_width + (r % m) as f64 * h + 0.5 * h;
                r /= m;
            }
            x
        })
        .collect();
    (nodes, h.powi(d as i32))
}

/// Micro field box for the experiment: time [0, t / eps^2], spatial half
/// width covering the quadrature box plus four walker standard deviations.
pub fn fluctuation_box(cfg: &FluctuationConfig) -> Result<FieldBox> {
    let t_micro = cfg.t / (cfg.eps * cfg.eps);
    let steps = (t_micro / cfg.dt).round();
    if ((t_micro / cfg.dt) - steps).abs() > 1e-6 {
        return Err(Error::Config(format!("t / eps^2 = {t_micro} is not a multiple of dt = {}", cfg.dt)));
    }
    let reach = cfg.quad_half_width / cfg.eps + 4.0 * t_micro.sqrt() + 1.0;
    let half_width = (reach / cfg.dx).ceil() * cfg.dx;
    Ok(FieldBox { t_lo: 0.0, t_hi: t_micro.max(1.0), half_width })
}

/// Run the fluctuation experiment: realization `r` uses field seed and
/// walker streams from the child `(Realization, r)` of `streams`.
pub fn fluctuation_experiment(m: &MollifierPair, cfg: &FluctuationConfig, inputs: &FluctuationInputs, streams: &Streams) -> Result<FluctuationReport> {
    let d = m.dimension;
    if cfg.n_realizations < 4 || cfg.n_walkers < 4 || cfg.quad_nodes == 0 {
        return Err(Error::Config("fluctuation experiment needs >= 4 realizations, >= 4 walkers and quadrature nodes".into()));
    }
    let bx = fluctuation_box(cfg)?;
    let t_micro = cfg.t / (cfg.eps * cfg.eps);
    let (nodes, w) = quadrature_nodes(cfg, d);
    let eps = cfg.eps;
    let u0 = cfg.u0.clone();
    let micro_u0 = move |y: &[f64]| {
        let x: Vec<f64> = y.iter().map(|v| eps * v).collect();
        u0.eval(&x)
    };
    let half = cfg.n_walkers / 2;
    let mut raw = Vec::with_capacity(cfg.n_realizations);
    for r in 0..cfg.n_realizations {
        let rs = streams.child(Tag::Realization, r as u64);
        let seed = rs.stream(Tag::Field, 0).random::<u64>();
        let field = sample_field(m, bx, cfg.dt, cfg.dx, seed)?;
        let (mut ia, mut ib, mut fk_var, mut exit) = (0.0, 0.0, 0.0, 0.0f64);
        for (q, x) in nodes.iter().enumerate() {
            let gq = cfg.g.eval(x);
            if gq == 0.0 {
                continue;
            }
            let y: Vec<f64> = x.iter().map(|v| v / eps).collect();
            let vals = walker_values(&field, &micro_u0, cfg.lambda, t_micro, &y, 2 * half, &rs.child(Tag::Walkers, q as u64))?;
            let v: Vec<f64> = vals.iter().map(|p| p.0).collect();
            let wq = w * gq;
            ia += wq * mean(&v[..half]);
            ib += wq * mean(&v[half..]);
            fk_var += wq * wq * variance(&v) / v.len() as f64;
            exit = exit.max(vals.iter().filter(|p| p.1).count() as f64 / v.len() as f64);
        }
        raw.push((r, seed, ia, ib, fk_var, exit));
    }
    let integrals: Vec<f64> = raw.iter().map(|p| 0.5 * (p.2 + p.3)).collect();
    let center = mean(&integrals);
    let scale = eps.powf(-(d as f64 / 2.0 - 1.0)) * (-(inputs.c1 * t_micro + inputs.c2)).exp();
    let records: Vec<FluctuationRecord> = raw
        .iter()
        .zip(&integrals)
        .map(|(p, i)| FluctuationRecord {
            realization: p.0,
            field_seed: p.1,
            eps,
            lambda: cfg.lambda,
            integral_a: p.2,
            integral_b: p.3,
            fk_variance: p.4,
            exit_fraction: p.5,
            xi: scale * (i - center),
        })
        .collect();
    let xi: Vec<f64> = records.iter().map(|r| r.xi).collect();
    let xi_variance = variance(&xi);
    let mut boot_rng = streams.stream(Tag::Bootstrap, 1);
    let reps = bootstrap(&xi, 1000, &mut boot_rng, |s| {
        let v: Vec<f64> = s.iter().map(|x| **x).collect();
        variance(&v)
    });
    let total_variance = variance(&integrals);
    let a: Vec<f64> = raw.iter().map(|p| p.2).collect();
    let b: Vec<f64> = raw.iter().map(|p| p.3).collect();
    let (ma, mb) = (mean(&a), mean(&b));
    let field_variance = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64;
    let fk_variance = mean(&raw.iter().map(|p| p.4).collect::<Vec<_>>());
    let decomposition_mismatch = if total_variance > 0.0 { (total_variance - field_variance - fk_variance).abs() / total_variance } else { 0.0 };
    let a_eff = &inputs.a_eff;
    let u0_field = cfg.u0.to_field(cfg.pde_grid.n, d, cfg.pde_grid.half_width)?;
    let g_field = cfg.g.to_field(cfg.pde_grid.n, d, cfg.pde_grid.half_width)?;
    let target = ew_variance(a_eff, inputs.nu_eff2.value, cfg.lambda, &u0_field, &g_field, cfg.t, cfg.n_time_nodes)?;
    Ok(FluctuationReport {
        config: cfg.clone(),
        inputs: inputs.clone(),
        xi_mean: stats::mean_estimate(&xi),
        xi_variance,
        xi_variance_ci: (quantile(&reps, 0.025), quantile(&reps, 0.975)),
        normality_p_value: jarque_bera(&xi).p_value,
        target,
        ratio: if target > 0.0 { xi_variance / target } else { f64::NAN },
        total_variance,
        field_variance,
        fk_variance,
        decomposition_mismatch,
        inconclusive: fk_variance >= 0.5 * total_variance,
        max_exit_fraction: records.iter().map(|r| r.exit_fraction).fold(0.0, f64::max),
        records,
    })
}
