//! Transition kernel, regeneration coupling, and full chain runs.
//!
//! States are increments drawn fresh from pi. Every acceptance test needs
//! Psi or Phi only through unbiased one-anchor estimates of their Nystrom
//! extensions, which keeps each test exact for the Nystrom eigenpair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::doeblin_gamma;
use super::eigen::EigenPair;
use crate::error::{Error, Result};
use crate::path::{assemble, interaction_first, interaction_last, sample_wiener_increment, AssembledPath, PathIncrement};
use crate::rng::Stream;

/// Anchors used for the terminal weight 1 / Psi(X_N).
pub const TERMINAL_ANCHORS: usize = 128;

/// The increment chain driven by an eigenpair, with coupling parameter gamma.
#[derive(Debug, Clone, Copy)]
pub struct TiltedChain<'a> {
    pub ep: &'a EigenPair,
    pub gamma: f64,
}

impl<'a> TiltedChain<'a> {
    /// `gamma = None` selects the certified e^{-6 i_sup}; a larger value than
    /// the certified one is rejected.
    pub fn new(ep: &'a EigenPair, gamma: Option<f64>) -> Result<Self> {
        let certified = if ep.is_trivial() { 1.0 } else { doeblin_gamma(ep.i_sup) };
        let gamma = gamma.unwrap_or(certified);
        if !(gamma > 0.0 && gamma <= certified * (1.0 + 1e-12)) {
            return Err(Error::Config(format!("gamma {gamma} exceeds the certified minorization constant {certified}")));
        }
        if !ep.is_trivial() && gamma * ep.i_max.exp() * ep.psi_max() > 1.0 {
            return Err(Error::EigenInconsistency(format!("gamma {gamma} is not dominated by the anchor eigenvector")));
        }
        Ok(Self { ep, gamma })
    }

    pub fn dim(&self) -> usize {
        self.ep.path_kernel().dim
    }

    pub fn n_substeps(&self) -> usize {
        self.ep.path_kernel().n
    }

    fn fresh_unit<R: Rng>(&self, rng: &mut R) -> PathIncrement {
        sample_wiener_increment(1.0, self.n_substeps(), self.dim(), rng)
    }

    /// Draw from pi.
    pub fn draw_pi<R: Rng>(&self, rng: &mut R) -> PathIncrement {
        if self.ep.is_trivial() {
            return self.fresh_unit(rng);
        }
        self.ep.path_kernel().sample_pi(rng)
    }

    /// Rejection from pi: accept y with probability `accept(y) / envelope`.
    fn reject<R: Rng>(&self, envelope: f64, rng: &mut R, accept: impl Fn(&PathIncrement, &mut R) -> f64) -> Result<PathIncrement> {
        loop {
            let y = self.draw_pi(rng);
            let a = accept(&y, rng);
            if a > envelope * (1.0 + 1e-9) {
                return Err(Error::EigenInconsistency(format!("acceptance weight {a} exceeds envelope {envelope}")));
            }
            if rng.random::<f64>() * envelope < a {
                return Ok(y);
            }
        }
    }

    /// Draw from Psi pi.
    pub fn draw_psi_pi<R: Rng>(&self, rng: &mut R) -> Result<PathIncrement> {
        if self.ep.is_trivial() {
            return Ok(self.fresh_unit(rng));
        }
        let ep = self.ep;
        self.reject(ep.i_max.exp() * ep.psi_max(), rng, |y, r| ep.rho_psi_sample(y, r))
    }

    /// Draw from the invariant law Phi Psi pi of the transition kernel.
    pub fn draw_invariant<R: Rng>(&self, rng: &mut R) -> Result<PathIncrement> {
        if self.ep.is_trivial() {
            return Ok(self.fresh_unit(rng));
        }
        let ep = self.ep;
        let envelope = (2.0 * ep.i_max).exp() * ep.psi_max() * ep.phi_max();
        self.reject(envelope, rng, |y, r| ep.rho_phi_sample(y, r) * ep.rho_psi_sample(y, r))
    }

    /// One step of the transition kernel
    /// pi_hat(x, dy) = e^{I(x, y)} Psi(y) pi(dy) / (rho Psi(x)).
    pub fn transition<R: Rng>(&self, x: &PathIncrement, rng: &mut R) -> Result<PathIncrement> {
        if self.ep.is_trivial() {
            return Ok(self.fresh_unit(rng));
        }
        let ep = self.ep;
        let pk = ep.path_kernel();
        let envelope = (2.0 * ep.i_max).exp() * ep.psi_max();
        self.reject(envelope, rng, |y, r| pk.interaction(x, y).exp() * ep.rho_psi_sample(y, r))
    }

    /// Regeneration coin for the move x -> y: fires with probability
    /// gamma rho Psi(x) e^{-I(x, y)}, so that given a firing y is
    /// distributed as Psi pi independently of the past.
    pub fn regenerates<R: Rng>(&self, x: &PathIncrement, y: &PathIncrement, rng: &mut R) -> bool {
        if self.ep.is_trivial() {
            return rng.random::<f64>() < self.gamma;
        }
        let pk = self.ep.path_kernel();
        let p = self.gamma * self.ep.rho_psi_sample(x, rng) * (-pk.interaction(x, y)).exp();
        rng.random::<f64>() < p
    }

    /// Coupled step: a transition together with its regeneration coin.
    pub fn coupled_step<R: Rng>(&self, x: &PathIncrement, rng: &mut R) -> Result<(PathIncrement, bool)> {
        let y = self.transition(x, rng)?;
        let eta = self.regenerates(x, &y, rng);
        Ok((y, eta))
    }

    /// pi_hat(x, dy) / pi(dy) with the full Nystrom sums.
    pub fn kernel_ratio(&self, x: &PathIncrement, y: &PathIncrement) -> f64 {
        if self.ep.is_trivial() {
            return 1.0;
        }
        let pk = self.ep.path_kernel();
        pk.interaction(x, y).exp() * self.ep.evaluate(y) / (self.ep.rho * self.ep.evaluate(x))
    }
}

/// Draw y from pi_hat(x, .) for a unit increment x.
pub fn sample_transition(x: &PathIncrement, chain: &TiltedChain, rng: &mut Stream) -> Result<PathIncrement> {
    chain.transition(x, rng)
}

/// Regeneration block: increments with indices in [start, end).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegenerationBlock {
    pub start_index: usize,
    pub end_index: usize,
    pub displacement: Vec<f64>,
    pub max_excursion: f64,
}

/// One run of the chain over [0, T].
#[derive(Debug, Clone)]
pub struct ChainRun {
    pub tau: f64,
    pub total_length: f64,
    /// X_0, ..., X_N (X_0 has length tau).
    pub states: Vec<PathIncrement>,
    /// Final fragment X_{N+1}, absent when it has length zero.
    pub fragment: Option<PathIncrement>,
    /// Indices k >= 1 with eta_k = 1.
    pub regeneration_times: Vec<usize>,
    /// Weight making chain averages unbiased for the tilted path measure,
    /// up to the common normalization: f_{N,N+1}(X_N) / Psi(X_N), times the
    /// first-piece weight when tau < 1.
    pub weight: f64,
    /// Smallest effective sample size among the inner importance draws.
    pub inner_ess: f64,
}

impl ChainRun {
    pub fn endpoint(&self) -> Vec<f64> {
        let d = self.states[0].dim;
        let mut e = vec![0.0; d];
        for p in self.states.iter().chain(&self.fragment) {
            e.iter_mut().zip(p.endpoint()).for_each(|(a, b)| *a += b);
        }
        e
    }

    pub fn assemble(&self) -> Result<AssembledPath> {
        let incs: Vec<PathIncrement> = self.states.iter().chain(&self.fragment).cloned().collect();
        assemble(self.tau, incs)
    }

    /// Blocks between consecutive regeneration times (the first block starts
    /// at index 0; the last one ends at N + 1).
    pub fn blocks(&self) -> Vec<RegenerationBlock> {
        let d = self.states[0].dim;
        let mut bounds = vec![0];
        bounds.extend(self.regeneration_times.iter().copied());
        bounds.push(self.states.len());
        bounds
            .windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| {
                let mut disp = vec![0.0; d];
                let mut max_exc: f64 = 0.0;
                for p in &self.states[w[0]..w[1]] {
                    disp.iter_mut().zip(p.endpoint()).for_each(|(a, b)| *a += b);
                    max_exc = max_exc.max(p.sup_norm());
                }
                RegenerationBlock { start_index: w[0], end_index: w[1], displacement: disp, max_excursion: max_exc }
            })
            .collect()
    }
}

/// Index drawn with probability proportional to `w`.
fn pick_weighted<R: Rng>(w: &[f64], rng: &mut R) -> usize {
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}

fn ess(w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    total * total / w.iter().map(|x| x * x).sum::<f64>()
}

/// Importance draw of a tilted piece of length `len` following `prev`,
/// weighted by e^{I_cross(prev, .)}: returns (selected piece, mean weight, ESS).
fn weighted_fragment<R: Rng>(chain: &TiltedChain, prev: &PathIncrement, len: f64, n_inner: usize, rng: &mut R) -> (PathIncrement, f64, f64) {
    let pk = chain.ep.path_kernel();
    let mut cands: Vec<PathIncrement> = (0..n_inner).map(|_| pk.sample_tilted(len, rng).0).collect();
    if chain.ep.is_trivial() {
        let pick = rng.random_range(0..n_inner);
        return (cands.swap_remove(pick), 1.0, n_inner as f64);
    }
    let w: Vec<f64> =
        cands.iter().map(|c| interaction_last(prev, c, &pk.kernel, pk.lambda).expect("unit increment").exp()).collect();
    let pick = pick_weighted(&w, rng);
    (cands.swap_remove(pick), w.iter().sum::<f64>() / n_inner as f64, ess(&w))
}

/// First piece of length tau < 1 and the increment after it.
///
/// X_0 is an importance draw from the tilted measure of length tau with
/// weight f_{0,1}(c) = (1/N) sum_j e^{I_01(c, a_j)} Psi_j; X_1 is drawn from
/// e^{I_01(X_0, .)} Psi pi by rejection. Returns (X_0, X_1, mean weight, ESS).
fn first_pieces<R: Rng>(chain: &TiltedChain, tau: f64, n_inner: usize, rng: &mut R) -> Result<(PathIncrement, PathIncrement, f64, f64)> {
    let ep = chain.ep;
    let pk = ep.path_kernel();
    let mut cands: Vec<PathIncrement> = (0..n_inner).map(|_| pk.sample_tilted(tau, rng).0).collect();
    if ep.is_trivial() {
        let pick = rng.random_range(0..n_inner);
        return Ok((cands.swap_remove(pick), chain.draw_pi(rng), 1.0, n_inner as f64));
    }
    let f01: Vec<f64> = cands
        .iter()
        .map(|c| {
            let terms: f64 = ep
                .anchors
                .iter()
                .zip(&ep.psi_values)
                .map(|(a, p)| interaction_first(c, a, &pk.kernel, pk.lambda).expect("valid lengths").exp() * p)
                .sum();
            terms / ep.size() as f64
        })
        .collect();
    let pick = pick_weighted(&f01, rng);
    let x0 = cands.swap_remove(pick);
    let envelope = (2.0 * ep.i_max).exp() * ep.psi_max();
    let x1 = chain.reject(envelope, rng, |y, r| {
        interaction_first(&x0, y, &pk.kernel, pk.lambda).expect("valid lengths").exp() * ep.rho_psi_sample(y, r)
    })?;
    Ok((x0, x1, f01.iter().sum::<f64>() / n_inner as f64, ess(&f01)))
}

/// Run the chain over [0, T] with first piece of length `tau`.
///
/// With tau = 1 the first increment is drawn from Psi pi; for tau < 1 see
/// `first_pieces`. Increments with index k >= 1 (k >= 2 when tau < 1) use
/// the regeneration coupling. The final fragment and its weight f_{N,N+1}
/// come from `n_inner` importance draws; 1 / Psi(X_N) uses
/// `TERMINAL_ANCHORS` anchors.
pub fn run_chain(chain: &TiltedChain, t_total: f64, tau: f64, n_inner: usize, rng: &mut Stream) -> Result<ChainRun> {
    let tau = if tau == 0.0 { 1.0 } else { tau };
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
    }
    if t_total < 1.0 + tau {
        return Err(Error::Config(format!("T = {t_total} too short for tau = {tau}")));
    }
    let n_inner = n_inner.max(1);
    let span = t_total - tau;
    let mut big_n = (span + 1e-9).floor() as usize;
    let mut frag_len = span - big_n as f64;
    if frag_len < 1e-9 {
        frag_len = 0.0;
    }
    if big_n as f64 > span {
        big_n -= 1;
        frag_len = span - big_n as f64;
    }
    let mut weight = 1.0;
    let mut inner_ess = f64::INFINITY;
    let mut states = Vec::with_capacity(big_n + 1);
    let mut regen = Vec::new();
    let first_coupled;
    if tau == 1.0 {
        states.push(chain.draw_psi_pi(rng)?);
        first_coupled = 1;
    } else {
        let (x0, x1, w, e) = first_pieces(chain, tau, n_inner, rng)?;
        weight *= w;
        inner_ess = inner_ess.min(e);
        states.push(x0);
        if big_n >= 1 {
            states.push(x1);
        }
        first_coupled = 2;
    }
    for k in first_coupled..=big_n {
        let (next, eta) = chain.coupled_step(&states[k - 1], rng)?;
        if eta {
            regen.push(k);
        }
        states.push(next);
    }
    let last = states.last().expect("at least one state");
    let fragment = if frag_len > 0.0 {
        if last.len != 1.0 {
            return Err(Error::Config("final fragment must follow a unit increment".into()));
        }
        let (frag, f_mean, e) = weighted_fragment(chain, last, frag_len, n_inner, rng);
        weight *= f_mean;
        inner_ess = inner_ess.min(e);
        Some(frag)
    } else {
        None
    };
    weight /= chain.ep.evaluate_sampled(last, TERMINAL_ANCHORS, rng);
    Ok(ChainRun { tau, total_length: t_total, states, fragment, regeneration_times: regen, weight, inner_ess })
}
