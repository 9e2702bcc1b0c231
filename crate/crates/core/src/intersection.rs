//! Two-component chain, nearby-time statistics, and the effective-variance
//! estimators.
//!
//! A two-component run starts from the pieces (X_0, Y_0) placed on [0, 1]
//! and appends X_k, Y_k on [k, k + 1] by independent transitions. Positions
//! are tracked at the cell midpoints of the path grid, so every time
//! integral below is a midpoint rule with step 1/n.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::TiltedChain;
use crate::error::{Error, Result};
use crate::mollifier::{phi_sampler, psi_sampler, CovarianceKernel};
use crate::path::PathIncrement;
use crate::rng::{Stream, Streams, Tag};
use crate::stats::{self, mean_estimate, Estimate, TailFit};

/// Exponent above which a functional is flagged as approaching the
/// integrability boundary.
pub const EXPONENT_THRESHOLD: f64 = 50.0;

/// The pair (X_k, Y_k) of a two-component chain.
#[derive(Debug, Clone)]
pub struct TwoComponentState {
    pub x: PathIncrement,
    pub y: PathIncrement,
}

impl TwoComponentState {
    pub fn new(x: PathIncrement, y: PathIncrement) -> Self {
        Self { x, y }
    }

    /// Independent transitions of both components, X first.
    pub fn step<R: Rng>(&mut self, chain: &TiltedChain, rng: &mut R) -> Result<()> {
        self.x = chain.transition(&self.x, rng)?;
        self.y = chain.transition(&self.y, rng)?;
        Ok(())
    }
}

/// Cell-midpoint tracks of both components over `pieces` unit increments,
/// piece 0 being the starting state. Row-major (pieces * n) x d.
struct Tracks {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Increments X_1 and Y_1, kept for evaluations inside [1, 2].
    x1: PathIncrement,
    y1: PathIncrement,
    /// Node positions omega(1) at the start of X_1 and Y_1.
    x_base: Vec<f64>,
    y_base: Vec<f64>,
}

fn append_piece(track: &mut Vec<f64>, offset: &mut [f64], p: &PathIncrement) {
    let d = p.dim;
    for m in p.mids().chunks_exact(d) {
        track.extend(m.iter().zip(offset.iter()).map(|(a, b)| a + b));
    }
    offset.iter_mut().zip(p.endpoint()).for_each(|(o, e)| *o += e);
}

fn two_component_tracks<R: Rng>(chain: &TiltedChain, x0: &PathIncrement, y0: &PathIncrement, pieces: usize, rng: &mut R) -> Result<Tracks> {
    let d = chain.dim();
    let n = chain.n_substeps();
    let mut state = TwoComponentState::new(x0.clone(), y0.clone());
    let mut x = Vec::with_capacity(pieces * n * d);
    let mut y = Vec::with_capacity(pieces * n * d);
    let mut ox = vec![0.0; d];
    let mut oy = vec![0.0; d];
    append_piece(&mut x, &mut ox, &state.x);
    append_piece(&mut y, &mut oy, &state.y);
    let (x_base, y_base) = (ox.clone(), oy.clone());
    let mut firsts = None;
    for _ in 1..pieces.max(2) {
        state.step(chain, rng)?;
        let (px, py) = (&state.x, &state.y);
        if firsts.is_none() {
            firsts = Some((px.clone(), py.clone()));
        }
        append_piece(&mut x, &mut ox, px);
        append_piece(&mut y, &mut oy, py);
    }
    let (x1, y1) = firsts.expect("at least one step");
    Ok(Tracks { x, y, x1, y1, x_base, y_base })
}

/// Nearby time of two paths over a finite horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearbyTimeSample {
    pub ell: f64,
    pub horizon: f64,
    /// x_off - y_off.
    pub offset: Vec<f64>,
}

/// Time in [0, horizon] during which |x_off + omega_X(s) - y_off - omega_Y(s)| <= 1.
#[allow(clippy::too_many_arguments)]
pub fn nearby_time<R: Rng>(
    x_off: &[f64],
    y_off: &[f64],
    x0: &PathIncrement,
    y0: &PathIncrement,
    horizon: f64,
    chain: &TiltedChain,
    rng: &mut R,
) -> Result<NearbyTimeSample> {
    let d = chain.dim();
    if x_off.len() != d || y_off.len() != d {
        return Err(Error::Contract("offset dimension mismatch".into()));
    }
    if !(horizon > 0.0) {
        return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
    }
    let n = chain.n_substeps();
    let cells = (horizon * n as f64).round() as usize;
    let pieces = cells.div_ceil(n);
    let tr = two_component_tracks(chain, x0, y0, pieces, rng)?;
    let offset: Vec<f64> = x_off.iter().zip(y_off).map(|(a, b)| a - b).collect();
    let mut inside = 0usize;
    for c in 0..cells {
        let r2: f64 = (0..d)
            .map(|k| {
                let v = offset[k] + tr.x[c * d + k] - tr.y[c * d + k];
                v * v
            })
            .sum();
        if r2 <= 1.0 {
            inside += 1;
        }
    }
    Ok(NearbyTimeSample { ell: inside as f64 / n as f64, horizon, offset })
}

/// Nearby-time samples from zero offsets and invariant starting pieces;
/// sample `i` uses stream `(Nearby, i)`.
pub fn sample_nearby_times(chain: &TiltedChain, n_samples: usize, horizon: f64, streams: &Streams) -> Result<Vec<NearbyTimeSample>> {
    if chain.dim() < 3 {
        log::warn!("nearby-time tails are only expected to be exponential in dimension >= 3");
    }
    let zero = vec![0.0; chain.dim()];
    (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = streams.stream(Tag::Nearby, i as u64);
            let x0 = chain.draw_invariant(&mut rng)?;
            let y0 = chain.draw_invariant(&mut rng)?;
            nearby_time(&zero, &zero, &x0, &y0, horizon, chain, &mut rng)
        })
        .collect()
}

/// Tail analysis of a set of nearby times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearbyTailReport {
    pub mean: Estimate,
    pub fit: TailFit,
    pub fit_first_half: TailFit,
    pub fit_second_half: TailFit,
    /// |rate_1 - rate_2| / rate of the full fit.
    pub split_discrepancy: f64,
    /// Fraction of samples whose nearby time reached the horizon.
    pub saturated_fraction: f64,
}

/// Quantile window of the log-survival fit.
pub const TAIL_QUANTILES: (f64, f64) = (0.5, 0.995);

pub fn nearby_tail_report(samples: &[NearbyTimeSample]) -> Result<NearbyTailReport> {
    if samples.len() < 100 {
        return Err(Error::Statistical(format!("{} nearby-time samples are too few for a tail fit", samples.len())));
    }
    let ell: Vec<f64> = samples.iter().map(|s| s.ell).collect();
    let half = ell.len() / 2;
    let (lo, hi) = TAIL_QUANTILES;
    let fit = stats::exponential_tail_fit(&ell, lo, hi);
    let fit_first_half = stats::exponential_tail_fit(&ell[..half], lo, hi);
    let fit_second_half = stats::exponential_tail_fit(&ell[half..], lo, hi);
    let split_discrepancy = (fit_first_half.rate - fit_second_half.rate).abs() / fit.rate.abs();
    let saturated = samples.iter().filter(|s| s.ell >= s.horizon - 1e-12).count();
    Ok(NearbyTailReport {
        mean: mean_estimate(&ell),
        fit,
        fit_first_half,
        fit_second_half,
        split_discrepancy,
        saturated_fraction: saturated as f64 / samples.len() as f64,
    })
}

/// Quadrature weights lambda^2 h^2 R_phi(u1, u2) on the cells of [-1, inf)^2.
///
/// Cells with both times in [0, inf) see A_phi of the lag; the corner where
/// one time is negative is tabulated directly.
#[derive(Debug, Clone)]
pub struct VarianceWeights {
    pub n: usize,
    pub lambda: f64,
    lag: Vec<f64>,
    corner: Vec<f64>,
}

impl VarianceWeights {
    pub fn new(kernel: &CovarianceKernel, lambda: f64, n: usize) -> Self {
        let h = 1.0 / n as f64;
        let l2h2 = lambda * lambda * h * h;
        let phi = &kernel.mollifiers.phi;
        let lag = (0..n).map(|k| l2h2 * CovarianceKernel::a_phi_direct(phi, k as f64 * h)).collect();
        let u = |j: usize| -1.0 + (j as f64 + 0.5) * h;
        let mut corner = vec![0.0; 4 * n * n];
        for j1 in 0..2 * n {
            for j2 in 0..2 * n {
                if j1 < n || j2 < n {
                    corner[j1 * 2 * n + j2] = l2h2 * kernel.r_phi(u(j1), u(j2));
                }
            }
        }
        Self { n, lambda, lag, corner }
    }

    #[inline]
    fn weight(&self, j1: usize, j2: usize) -> f64 {
        let n = self.n;
        if j1 < n || j2 < n {
            if j1 < 2 * n && j2 < 2 * n {
                self.corner[j1 * 2 * n + j2]
            } else {
                0.0
            }
        } else {
            let lag = j1.abs_diff(j2);
            if lag < n {
                self.lag[lag]
            } else {
                0.0
            }
        }
    }
}

/// Relative displacements D(j) = omega(2 + u_j) - omega(2 - s) on the
/// cells u_j of [-1, M].
fn displacements(track: &[f64], first: &PathIncrement, base: &[f64], s: f64, n: usize, cells: usize) -> Vec<f64> {
    let d = first.dim;
    let mut at = vec![0.0; d];
    first.at(1.0 - s, &mut at);
    let reference: Vec<f64> = at.iter().zip(base).map(|(a, b)| a + b).collect();
    let mut out = Vec::with_capacity(cells * d);
    for c in 0..cells {
        let row = &track[(n + c) * d..(n + c + 1) * d];
        out.extend(row.iter().zip(&reference).map(|(a, b)| a - b));
    }
    out
}

/// Banded double sum sum_{j1 < c1, j2 < c2} w(j1, j2) R_psi(shift + dx(j1) - dy(j2)),
/// accumulated into buckets by max(j1, j2) / n.
fn banded_exponent(dx: &[f64], dy: &[f64], shift: &[f64], c1: usize, c2: usize, w: &VarianceWeights, kernel: &CovarianceKernel) -> Vec<f64> {
    let d = shift.len();
    let n = w.n;
    let mut buckets = vec![0.0; c1.max(c2).div_ceil(n)];
    for j1 in 0..c1 {
        let lo = j1.saturating_sub(n - 1);
        let hi = if j1 < n { (2 * n).min(c2) } else { (j1 + n).min(c2) };
        let x = &dx[j1 * d..(j1 + 1) * d];
        for j2 in lo..hi {
            let wt = w.weight(j1, j2);
            if wt == 0.0 {
                continue;
            }
            let y = &dy[j2 * d..(j2 + 1) * d];
            let mut r2 = 0.0;
            for k in 0..d {
                let v = shift[k] + x[k] - y[k];
                r2 += v * v;
            }
            if r2 < 1.0 {
                buckets[j1.max(j2) / n] += wt * kernel.r_psi_sq_fast(r2);
            }
        }
    }
    buckets
}

/// Result of an inner estimate of H.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
    pub max_exponent: f64,
    pub overflow: bool,
}

/// Inputs of H besides the chain: starting pieces, spatial points x1, x2,
/// and times s1, s2 in [0, 1].
#[derive(Debug, Clone)]
pub struct HArguments<'a> {
    pub x0: &'a PathIncrement,
    pub y0: &'a PathIncrement,
    pub x1: &'a [f64],
    pub x2: &'a [f64],
    pub s1: f64,
    pub s2: f64,
}

fn cells_for_horizon(m: f64, n: usize) -> usize {
    ((m + 1.0) * n as f64).round() as usize
}

/// Exponents J(M_i) for several truncations on one two-component run.
fn exponents<R: Rng>(chain: &TiltedChain, w: &VarianceWeights, args: &HArguments, m1: &[f64], m2: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let n = chain.n_substeps();
    let pk = chain.ep.path_kernel();
    let mmax = m1.iter().chain(m2).fold(0.0f64, |a, &b| a.max(b));
    let cells = cells_for_horizon(mmax, n);
    let pieces = cells.div_ceil(n) + 1;
    let tr = two_component_tracks(chain, args.x0, args.y0, pieces, rng)?;
    let dx = displacements(&tr.x, &tr.x1, &tr.x_base, args.s1, n, cells);
    let dy = displacements(&tr.y, &tr.y1, &tr.y_base, args.s2, n, cells);
    let shift: Vec<f64> = args.x1.iter().zip(args.x2).map(|(a, b)| a - b).collect();
    let square = m1 == m2;
    if square {
        let buckets = banded_exponent(&dx, &dy, &shift, cells, cells, w, &pk.kernel);
        Ok(m1
            .iter()
            .map(|&m| {
                let full = cells_for_horizon(m, n) / n;
                buckets[..full.min(buckets.len())].iter().sum()
            })
            .collect())
    } else {
        Ok(m1
            .iter()
            .zip(m2)
            .map(|(&a, &b)| {
                banded_exponent(&dx, &dy, &shift, cells_for_horizon(a, n), cells_for_horizon(b, n), w, &pk.kernel)
                    .iter()
                    .sum()
            })
            .collect())
    }
}

fn validate_horizons(m1: f64, m2: f64) -> Result<()> {
    for m in [m1, m2] {
        if !(m >= 0.0) || m.fract() != 0.0 {
            return Err(Error::Config(format!("truncation horizons must be non-negative integers, got {m}")));
        }
    }
    Ok(())
}

/// Monte Carlo estimate of H_{M1,M2} given the starting pieces, from `n`
/// independent two-component runs.
pub fn h_functional<R: Rng>(chain: &TiltedChain, w: &VarianceWeights, args: &HArguments, m1: f64, m2: f64, n: usize, rng: &mut R) -> Result<HEstimate> {
    validate_horizons(m1, m2)?;
    if chain.ep.is_trivial() || w.lambda == 0.0 {
        return Ok(HEstimate { value: 1.0, stderr: 0.0, n, max_exponent: 0.0, overflow: false });
    }
    let mut values = Vec::with_capacity(n);
    let mut max_exponent: f64 = 0.0;
    for _ in 0..n {
        let j = exponents(chain, w, args, &[m1], &[m2], rng)?[0];
        max_exponent = max_exponent.max(j);
        values.push(j.exp());
    }
    let e = mean_estimate(&values);
    Ok(HEstimate { value: e.value, stderr: e.stderr, n, max_exponent, overflow: max_exponent > EXPONENT_THRESHOLD })
}

/// Effective-variance estimate at truncation M, with the 2M value computed
/// on the same runs as a saturation diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuEffEstimate {
    pub value: f64,
    pub stderr: f64,
    pub value_2m: f64,
    pub stderr_2m: f64,
    /// Paired estimate of value_2m - value.
    pub increment: Estimate,
    pub m: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    pub overflow_count: usize,
    pub max_exponent: f64,
    /// (int phi)^2 (int psi)^2, the value without disorder.
    pub baseline: f64,
}

impl NuEffEstimate {
    /// Whether the M and 2M values agree within three combined standard errors.
    pub fn saturated(&self) -> bool {
        (self.value_2m - self.value).abs() <= 3.0 * self.stderr.hypot(self.stderr_2m)
    }

    pub fn estimate(&self) -> Estimate {
        Estimate { value: self.value, stderr: self.stderr, n: self.n_outer }
    }
}

/// nu_eff^2 by outer sampling of s_i ~ phi, x_i ~ psi, and invariant
/// starting pieces, with `n_inner` runs per outer sample. Outer sample `i`
/// uses stream `(NuEff, i)`, so estimates at different lambda share
/// random numbers.
pub fn estimate_nu_eff(chain: &TiltedChain, m: f64, n_outer: usize, n_inner: usize, streams: &Streams) -> Result<NuEffEstimate> {
    validate_horizons(m, m)?;
    if n_outer < 2 || n_inner == 0 {
        return Err(Error::Config("estimate_nu_eff needs n_outer >= 2 and n_inner >= 1".into()));
    }
    let pk = chain.ep.path_kernel();
    let moll = &pk.kernel.mollifiers;
    let baseline = (moll.phi.grid_integral() * moll.psi.grid_integral()).powi(2);
    let trivial = chain.ep.is_trivial() || pk.lambda == 0.0;
    let w = VarianceWeights::new(&pk.kernel, pk.lambda, chain.n_substeps());
    let s_sampler = phi_sampler(&moll.phi);
    let x_sampler = psi_sampler(&moll.psi);
    let horizons = [m, 2.0 * m];
    let per_outer: Vec<(f64, f64, usize, f64)> = (0..n_outer)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64, usize, f64)> {
            let mut rng = streams.stream(Tag::NuEff, i as u64);
            let s1 = s_sampler.sample(&mut rng);
            let s2 = s_sampler.sample(&mut rng);
            let x1 = x_sampler.sample(&mut rng);
            let x2 = x_sampler.sample(&mut rng);
            if trivial {
                return Ok((1.0, 1.0, 0, 0.0));
            }
            let x0 = chain.draw_invariant(&mut rng)?;
            let y0 = chain.draw_invariant(&mut rng)?;
            let args = HArguments { x0: &x0, y0: &y0, x1: &x1, x2: &x2, s1, s2 };
            let (mut a, mut b, mut over, mut jmax) = (0.0, 0.0, 0usize, 0.0f64);
            for _ in 0..n_inner {
                let j = exponents(chain, &w, &args, &horizons, &horizons, &mut rng)?;
                jmax = jmax.max(j[1]);
                if j[1] > EXPONENT_THRESHOLD {
                    over += 1;
                }
                a += j[0].exp();
                b += j[1].exp();
            }
            Ok((a / n_inner as f64, b / n_inner as f64, over, jmax))
        })
        .collect::<Result<_>>()?;
    let hm: Vec<f64> = per_outer.iter().map(|p| p.0 * baseline).collect();
    let h2m: Vec<f64> = per_outer.iter().map(|p| p.1 * baseline).collect();
    let diff: Vec<f64> = hm.iter().zip(&h2m).map(|(a, b)| b - a).collect();
    let em = mean_estimate(&hm);
    let e2m = mean_estimate(&h2m);
    Ok(NuEffEstimate {
        value: em.value,
        stderr: em.stderr,
        value_2m: e2m.value,
        stderr_2m: e2m.stderr,
        increment: mean_estimate(&diff),
        m,
        n_outer,
        n_inner,
        overflow_count: per_outer.iter().map(|p| p.2).sum(),
        max_exponent: per_outer.iter().map(|p| p.3).fold(0.0, f64::max),
        baseline,
    })
}

/// White-in-time effective variance at two horizons (H and 2H, same paths).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteNuEffEstimate {
    pub value: f64,
    pub stderr: f64,
    pub value_2h: f64,
    pub stderr_2h: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub max_exponent: f64,
}

impl WhiteNuEffEstimate {
    pub fn saturated(&self) -> bool {
        (self.value_2h - self.value).abs() <= 3.0 * self.stderr.hypot(self.stderr_2h)
    }
}

fn unit_ball_volume(d: usize) -> f64 {
    std::f64::consts::PI.powf(d as f64 / 2.0) / statrs::function::gamma::gamma(d as f64 / 2.0 + 1.0)
}

/// int R_psi(x) E_B[exp{(lambda^2 / 2) int_0^inf R_psi(x + B_s) ds}] dx with
/// x uniform on the unit ball (the support of R_psi), standard Brownian
/// paths with `n` steps per unit time, and the time integral truncated at
/// `horizon` (and at 2 horizon for the saturation diagnostic). Path `i`
/// uses stream `(WhiteNoise, i)`.
pub fn white_time_nu_eff(kernel: &CovarianceKernel, lambda: f64, n_paths: usize, horizon: f64, n: usize, streams: &Streams) -> Result<WhiteNuEffEstimate> {
    let d = kernel.dimension;
    if d < 3 {
        log::warn!("the white-in-time effective variance is finite only in dimension >= 3");
    }
    if !(horizon > 0.0) || n == 0 || n_paths < 2 {
        return Err(Error::Config("white_time_nu_eff needs horizon > 0, n >= 1, n_paths >= 2".into()));
    }
    let volume = unit_ball_volume(d);
    let h = 1.0 / n as f64;
    let cells = (horizon * n as f64).round() as usize;
    let half_l2 = 0.5 * lambda * lambda;
    let per_path: Vec<(f64, f64, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng: Stream = streams.stream(Tag::WhiteNoise, i as u64);
            let x = loop {
                let p: Vec<f64> = (0..d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
                if p.iter().map(|v| v * v).sum::<f64>() < 1.0 {
                    break p;
                }
            };
            let weight = volume * kernel.r_psi(&x);
            if lambda == 0.0 {
                return (weight, weight, 0.0);
            }
            let sd = h.sqrt();
            let mut pos = x.clone();
            let mut integral = [0.0, 0.0];
            for c in 0..2 * cells {
                let step: Vec<f64> = (0..d).map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sd * z
                }).collect();
                let r2: f64 = pos.iter().zip(&step).map(|(p, s)| (p + 0.5 * s).powi(2)).sum();
                integral[usize::from(c >= cells)] += h * kernel.r_psi_sq(r2);
                pos.iter_mut().zip(&step).for_each(|(p, s)| *p += s);
            }
            let j1 = half_l2 * integral[0];
            let j2 = j1 + half_l2 * integral[1];
            (weight * j1.exp(), weight * j2.exp(), j2)
        })
        .collect();
    let a: Vec<f64> = per_path.iter().map(|p| p.0).collect();
    let b: Vec<f64> = per_path.iter().map(|p| p.1).collect();
    let (ea, eb) = (mean_estimate(&a), mean_estimate(&b));
    Ok(WhiteNuEffEstimate {
        value: ea.value,
        stderr: ea.stderr,
        value_2h: eb.value,
        stderr_2h: eb.stderr,
        horizon,
        n_paths,
        max_exponent: per_path.iter().map(|p| p.2).fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_ball_volumes() {
        assert!((unit_ball_volume(1) - 2.0).abs() < 1e-12);
        assert!((unit_ball_volume(2) - std::f64::consts::PI).abs() < 1e-12);
        assert!((unit_ball_volume(3) - 4.0 / 3.0 * std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn horizons_must_be_integers() {
        assert!(validate_horizons(16.0, 32.0).is_ok());
        assert!(validate_horizons(1.5, 2.0).is_err());
        assert!(validate_horizons(-1.0, 2.0).is_err());
    }
}
