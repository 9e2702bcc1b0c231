//! Estimators built on the chain: a_eff from regeneration blocks, the
//! renormalization constants, and tilted path expectations.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sampler::{run_chain, TiltedChain};
use crate::error::{Error, Result};
use crate::path::{cells_for_length, sample_wiener_increment, AssembledPath, PathIncrement, PathKernel};
use crate::quadrature::pairwise_sum;
use crate::rng::{Streams, Tag};
use crate::stats::{effective_sample_size, ratio_estimate, variance, weighted_line_fit, Estimate};

/// One regeneration block drawn from its stationary law: start from the
/// regeneration measure Psi pi and move until the next coin fires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSample {
    pub length: usize,
    pub displacement: Vec<f64>,
    /// Largest sup-norm of an increment in the block.
    pub max_excursion: f64,
    /// Sum over the block of the increment sup-norms.
    pub excursion_sum: f64,
}

/// Draw `n_blocks` independent blocks; block b uses stream (Blocks, b).
pub fn sample_blocks(chain: &TiltedChain, n_blocks: usize, streams: &Streams) -> Result<Vec<BlockSample>> {
    (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = streams.stream(Tag::Blocks, b as u64);
            let mut state = chain.draw_psi_pi(&mut rng)?;
            let mut out = BlockSample { length: 0, displacement: vec![0.0; chain.dim()], max_excursion: 0.0, excursion_sum: 0.0 };
            loop {
                let p = &state;
                out.length += 1;
                out.displacement.iter_mut().zip(p.endpoint()).for_each(|(a, b)| *a += b);
                let s = p.sup_norm();
                out.max_excursion = out.max_excursion.max(s);
                out.excursion_sum += s;
                let (next, eta) = chain.coupled_step(&state, &mut rng)?;
                if eta {
                    break;
                }
                state = next;
            }
            Ok(out)
        })
        .collect()
}

/// Estimate of the effective diffusivity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AEffEstimate {
    pub matrix: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub n_blocks: usize,
    pub gamma: f64,
    /// Mean block length (expected 1 / gamma).
    pub mean_block_length: f64,
}

impl AEffEstimate {
    /// Entry (i, j) as an estimate.
    pub fn entry(&self, i: usize, j: usize) -> Estimate {
        Estimate { value: self.matrix[i][j], stderr: self.stderr[i][j], n: self.n_blocks }
    }

    /// Mean of the diagonal with its standard error (entries treated as
    /// independent, which is conservative for isotropic models).
    pub fn scalar(&self) -> Estimate {
        let d = self.matrix.len() as f64;
        let v = (0..self.matrix.len()).map(|i| self.matrix[i][i]).sum::<f64>() / d;
        let se = (0..self.matrix.len()).map(|i| self.stderr[i][i].powi(2)).sum::<f64>().sqrt() / d;
        Estimate { value: v, stderr: se, n: self.n_blocks }
    }
}

/// gamma times the mean of X X^T over blocks, with bootstrap standard errors.
pub fn estimate_a_eff(chain: &TiltedChain, n_blocks: usize, streams: &Streams) -> Result<(AEffEstimate, Vec<BlockSample>)> {
    if n_blocks < 1000 {
        return Err(Error::Statistical(format!("a_eff needs at least 1000 blocks, got {n_blocks}")));
    }
    let blocks = sample_blocks(chain, n_blocks, streams)?;
    Ok((a_eff_from_blocks(&blocks, chain.gamma, streams), blocks))
}

/// a_eff from already drawn blocks.
pub fn a_eff_from_blocks(blocks: &[BlockSample], gamma: f64, streams: &Streams) -> AEffEstimate {
    let d = blocks[0].displacement.len();
    let second_moment = |bs: &[&BlockSample], i: usize, j: usize| {
        let t: Vec<f64> = bs.iter().map(|b| b.displacement[i] * b.displacement[j]).collect();
        gamma * pairwise_sum(&t) / t.len() as f64
    };
    let refs: Vec<&BlockSample> = blocks.iter().collect();
    let mut matrix = vec![vec![0.0; d]; d];
    let mut stderr = vec![vec![0.0; d]; d];
    let mut rng = streams.stream(Tag::Bootstrap, 0);
    let reps = 200;
    // Bootstrap all entries on shared resamples.
    let mut resampled: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); d * d];
    let n = blocks.len();
    for _ in 0..reps {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let bs: Vec<&BlockSample> = idx.iter().map(|&k| &blocks[k]).collect();
        for i in 0..d {
            for j in 0..d {
                resampled[i * d + j].push(second_moment(&bs, i, j));
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            matrix[i][j] = second_moment(&refs, i, j);
            stderr[i][j] = variance(&resampled[i * d + j]).sqrt();
        }
    }
    let mean_len = blocks.iter().map(|b| b.length as f64).sum::<f64>() / n as f64;
    AEffEstimate { matrix, stderr, n_blocks: n, gamma, mean_block_length: mean_len }
}

/// Estimate of the renormalization constant zeta_T.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZetaEstimate {
    pub t: f64,
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
    pub ess: f64,
    /// Set when the weight ESS falls below 1% of the sample size.
    pub degenerate: bool,
}

const ZETA_CHUNK: usize = 256;

/// zeta_T = log E[exp(self-tilt)] over Wiener paths of length T.
///
/// Integer T uses the unit-block grid and the block decomposition of the
/// self-tilt; other T use a uniform grid of ceil(T n) cells.
pub fn estimate_zeta(pk: &PathKernel, t: f64, n_samples: usize, streams: &Streams) -> ZetaEstimate {
    if pk.lambda == 0.0 {
        return ZetaEstimate { t, value: 0.0, stderr: 0.0, n: n_samples, ess: n_samples as f64, degenerate: false };
    }
    let integer = (t - t.round()).abs() < 1e-12 && t >= 1.0;
    let streams = streams.child(Tag::Zeta, t.to_bits());
    let chunks = n_samples.div_ceil(ZETA_CHUNK);
    let exponents: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = streams.stream(Tag::Zeta, c as u64);
            let count = ZETA_CHUNK.min(n_samples - c * ZETA_CHUNK);
            (0..count)
                .map(|_| {
                    if integer {
                        let blocks: Vec<PathIncrement> =
                            (0..t.round() as usize).map(|_| sample_wiener_increment(1.0, pk.n, pk.dim, &mut rng)).collect();
                        pk.self_tilt_blocks(&blocks)
                    } else {
                        let p = sample_wiener_increment(t, cells_for_length(t, pk.n), pk.dim, &mut rng);
                        crate::path::self_tilt_exponent(&p, &pk.kernel, pk.lambda)
                    }
                })
                .collect::<Vec<f64>>()
        })
        .collect();
    let shift = exponents.iter().copied().fold(f64::MIN, f64::max);
    let w: Vec<f64> = exponents.iter().map(|s| (s - shift).exp()).collect();
    let mean = pairwise_sum(&w) / w.len() as f64;
    let se = (variance(&w) / w.len() as f64).sqrt() / mean;
    let ess = effective_sample_size(&w);
    let degenerate = ess < 0.01 * n_samples as f64;
    if degenerate {
        log::warn!("zeta_{t}: weight degeneracy, ESS = {ess:.1} of {n_samples}");
    }
    ZetaEstimate { t, value: shift + mean.ln(), stderr: se, n: n_samples, ess, degenerate }
}

/// (T, zeta_T, stderr) triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZetaPoint {
    pub t: f64,
    pub value: f64,
    pub stderr: f64,
}

impl From<ZetaEstimate> for ZetaPoint {
    fn from(z: ZetaEstimate) -> Self {
        Self { t: z.t, value: z.value, stderr: z.stderr }
    }
}

/// Fitted and closed-form renormalization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenormalizationFit {
    pub c1_fit: Estimate,
    pub c2_fit: Estimate,
    pub c1_closed: Estimate,
    pub c2_closed: Estimate,
    /// |fit - closed| in combined standard errors.
    pub c1_discrepancy: f64,
    pub c2_discrepancy: f64,
    /// zeta_T - (c1 T + c2) for each point.
    pub residuals: Vec<f64>,
    pub standardized_residuals: Vec<f64>,
    /// Set when some residual exceeds 5 stated errors.
    pub nonlinear: bool,
}

/// Weighted straight-line fit of zeta_T against T, compared with
/// c1 = zeta_1 + log rho and c2 = -log rho + log E_inv[1/Psi].
pub fn fit_renormalization(points: &[ZetaPoint], zeta_1: Estimate, log_rho: Estimate, psi_inverse_mean: Estimate) -> Result<RenormalizationFit> {
    let mut ts: Vec<f64> = points.iter().map(|p| p.t).collect();
    ts.sort_by(|a, b| a.total_cmp(b));
    ts.dedup();
    if ts.len() < 4 || ts[0] < 2.0 {
        return Err(Error::Config("renormalization fit needs at least 4 distinct T >= 2".into()));
    }
    let x: Vec<f64> = points.iter().map(|p| p.t).collect();
    let y: Vec<f64> = points.iter().map(|p| p.value).collect();
    let exact = points.iter().all(|p| p.stderr == 0.0);
    let sigma: Vec<f64> = points.iter().map(|p| if exact { 1.0 } else { p.stderr }).collect();
    let fit = weighted_line_fit(&x, &y, &sigma);
    let scale = if exact { 0.0 } else { 1.0 };
    let c1_fit = Estimate { value: fit.slope, stderr: scale * fit.slope_stderr, n: points.len() };
    let c2_fit = Estimate { value: fit.intercept, stderr: scale * fit.intercept_stderr, n: points.len() };
    let c1_closed = Estimate {
        value: zeta_1.value + log_rho.value,
        stderr: (zeta_1.stderr.powi(2) + log_rho.stderr.powi(2)).sqrt(),
        n: zeta_1.n,
    };
    let c2_closed = Estimate {
        value: -log_rho.value + psi_inverse_mean.value.ln(),
        stderr: (log_rho.stderr.powi(2) + (psi_inverse_mean.stderr / psi_inverse_mean.value).powi(2)).sqrt(),
        n: log_rho.n,
    };
    let standardized: Vec<f64> = if exact { vec![0.0; points.len()] } else { fit.standardized_residuals.clone() };
    let nonlinear = standardized.iter().any(|r| r.abs() > 5.0) || (exact && fit.residuals.iter().any(|r| r.abs() > 1e-12));
    Ok(RenormalizationFit {
        c1_discrepancy: c1_fit.z_distance(&c1_closed),
        c2_discrepancy: c2_fit.z_distance(&c2_closed),
        c1_fit,
        c2_fit,
        c1_closed,
        c2_closed,
        residuals: fit.residuals,
        standardized_residuals: standardized,
        nonlinear,
    })
}

/// Ratio estimate of a tilted path expectation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltedEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_paths: usize,
    /// Smallest inner ESS over all runs.
    pub min_inner_ess: f64,
    /// Mean of the run weights.
    pub mean_weight: f64,
}

/// E_hat_{B,T}[F(B)] = E[F(B) G] / E[G] over chain runs; run r uses stream
/// (Tilted, r).
pub fn tilted_expectation<F>(chain: &TiltedChain, f: F, t_total: f64, tau: f64, n_paths: usize, n_inner: usize, streams: &Streams) -> Result<TiltedEstimate>
where
    F: Fn(&AssembledPath) -> f64 + Sync,
{
    let runs: Vec<(f64, f64, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|r| {
            let mut rng = streams.stream(Tag::Tilted, r as u64);
            let run = run_chain(chain, t_total, tau, n_inner, &mut rng)?;
            let path = run.assemble()?;
            Ok((f(&path), run.weight, run.inner_ess))
        })
        .collect::<Result<_>>()?;
    let num: Vec<f64> = runs.iter().map(|(v, w, _)| v * w).collect();
    let den: Vec<f64> = runs.iter().map(|(_, w, _)| *w).collect();
    let est = ratio_estimate(&num, &den);
    let min_ess = runs.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    if min_ess < 2.0 && n_inner > 2 {
        log::warn!("tilted expectation: inner importance ESS down to {min_ess:.2}");
    }
    Ok(TiltedEstimate {
        value: est.value,
        stderr: est.stderr,
        n_paths,
        min_inner_ess: min_ess,
        mean_weight: pairwise_sum(&den) / n_paths as f64,
    })
}

