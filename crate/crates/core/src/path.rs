//! Discretized path increments, the Wiener sampler, and the tilt and
//! interaction functionals.
//!
//! Double time integrals use the midpoint rule on the cells of the path
//! grid: a cell of width `w` centred at time `t` carries the position
//! average of its two end nodes.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::mollifier::CovarianceKernel;

/// Path on [0, len] sampled at n + 1 uniform nodes, starting at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathIncrement {
    /// Row-major (n + 1) x d node positions.
    pub positions: Vec<f64>,
    pub len: f64,
    pub n: usize,
    pub dim: usize,
    /// Row-major n x d cell midpoints.
    mids: Vec<f64>,
}

impl PathIncrement {
    pub fn from_positions(positions: Vec<f64>, len: f64, dim: usize) -> Result<Self> {
        if dim == 0 || positions.len() % dim != 0 || positions.len() / dim < 2 {
            return contract("path needs at least two nodes of matching dimension");
        }
        if positions[..dim].iter().any(|&v| v != 0.0) {
            return contract("path must start at the origin");
        }
        let n = positions.len() / dim - 1;
        let mids = (0..n * dim).map(|i| 0.5 * (positions[i] + positions[i + dim])).collect();
        Ok(Self { positions, len, n, dim, mids })
    }

    /// Constant path at the origin.
    pub fn flat(len: f64, n: usize, dim: usize) -> Self {
        Self::from_positions(vec![0.0; (n + 1) * dim], len, dim).expect("valid flat path")
    }

    /// Path given by a function of time.
    pub fn from_fn(len: f64, n: usize, dim: usize, f: impl Fn(f64) -> Vec<f64>) -> Self {
        let mut pos = Vec::with_capacity((n + 1) * dim);
        let origin = f(0.0);
        for i in 0..=n {
            let p = f(len * i as f64 / n as f64);
            pos.extend(p.iter().zip(&origin).map(|(a, b)| a - b));
        }
        Self::from_positions(pos, len, dim).expect("valid path")
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mid(&self, j: usize) -> &[f64] {
        &self.mids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn mids(&self) -> &[f64] {
        &self.mids
    }

    pub fn endpoint(&self) -> &[f64] {
        self.node(self.n)
    }

    pub fn step(&self) -> f64 {
        self.len / self.n as f64
    }

    /// Position at time `s` in [0, len] by linear interpolation.
    pub fn at(&self, s: f64, out: &mut [f64]) {
        let pos = (s / self.step()).clamp(0.0, self.n as f64);
        let i = (pos as usize).min(self.n - 1);
        let f = pos - i as f64;
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.positions[i * self.dim + k] * (1.0 - f) + self.positions[(i + 1) * self.dim + k] * f;
        }
    }

    /// The reflected path x -> -x.
    pub fn negated(&self) -> Self {
        Self {
            positions: self.positions.iter().map(|v| -v).collect(),
            len: self.len,
            n: self.n,
            dim: self.dim,
            mids: self.mids.iter().map(|v| -v).collect(),
        }
    }

    /// max over nodes of the Euclidean norm.
    pub fn sup_norm(&self) -> f64 {
        self.positions
            .chunks(self.dim)
            .map(|p| p.iter().map(|v| v * v).sum::<f64>())
            .fold(0.0, f64::max)
            .sqrt()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_nodes_csv(path, self.dim, (0..=self.n).map(|i| (i as f64 * self.step(), self.node(i))))
    }
}

fn write_nodes_csv<'a>(path: &Path, dim: usize, rows: impl Iterator<Item = (f64, &'a [f64])>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["time".to_string()];
    header.extend((0..dim).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    for (t, p) in rows {
        let mut rec = vec![t.to_string()];
        rec.extend(p.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Scaled random walk approximation of Brownian motion on [0, len].
pub fn sample_wiener_increment<R: Rng>(len: f64, n: usize, dim: usize, rng: &mut R) -> PathIncrement {
    let sd = (len / n as f64).sqrt();
    let mut pos = vec![0.0; (n + 1) * dim];
    for i in 1..=n {
        for k in 0..dim {
            let z: f64 = StandardNormal.sample(rng);
            pos[i * dim + k] = pos[(i - 1) * dim + k] + sd * z;
        }
    }
    PathIncrement::from_positions(pos, len, dim).expect("valid sampled path")
}

/// Number of grid cells used for a piece of length `len` at `n` cells per
/// unit time.
pub fn cells_for_length(len: f64, n: usize) -> usize {
    ((len * n as f64).ceil() as usize).max(8)
}

/// Midpoint cells of a piece placed at `offset_time` and shifted by `offset_pos`.
struct Cells {
    times: Vec<f64>,
    widths: Vec<f64>,
    mids: Vec<f64>,
}

impl Cells {
    fn of(p: &PathIncrement, offset_time: f64, offset_pos: &[f64]) -> Self {
        let h = p.step();
        let times = (0..p.n).map(|j| offset_time + (j as f64 + 0.5) * h).collect();
        let mids = p
            .mids
            .chunks(p.dim)
            .flat_map(|m| m.iter().zip(offset_pos).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect();
        Self { times, widths: vec![h; p.n], mids }
    }

    fn extend(&mut self, other: Cells) {
        self.times.extend(other.times);
        self.widths.extend(other.widths);
        self.mids.extend(other.mids);
    }
}

/// sum over cell pairs (i in a, j in b) of w_i w_j R(t_j - t_i, m_j - m_i).
fn cross_sum(k: &CovarianceKernel, a: &Cells, b: &Cells, dim: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..a.times.len() {
        let mi = &a.mids[i * dim..(i + 1) * dim];
        for j in 0..b.times.len() {
            let lag = b.times[j] - a.times[i];
            let at = k.a_phi(lag);
            if at == 0.0 {
                continue;
            }
            let mj = &b.mids[j * dim..(j + 1) * dim];
            let r2: f64 = mi.iter().zip(mj).map(|(x, y)| (y - x) * (y - x)).sum();
            total += a.widths[i] * b.widths[j] * at * k.r_psi_sq(r2);
        }
    }
    total
}

/// (lambda^2 / 2) times the double integral of R(s - u, w(s) - w(u)) over
/// [0, len]^2, by the midpoint rule on the path cells.
pub fn self_tilt_exponent(p: &PathIncrement, k: &CovarianceKernel, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let c = Cells::of(p, 0.0, &vec![0.0; p.dim]);
    0.5 * lambda * lambda * band_self_sum(k, &c, p.dim)
}

/// Symmetric double sum over cells sorted by time, restricted to |lag| < 1.
fn band_self_sum(k: &CovarianceKernel, c: &Cells, dim: usize) -> f64 {
    let n = c.times.len();
    let mut total = 0.0;
    for i in 0..n {
        total += c.widths[i] * c.widths[i] * k.a_phi(0.0) * k.r_psi_sq(0.0);
        let mi = &c.mids[i * dim..(i + 1) * dim];
        for j in (i + 1)..n {
            let at = k.a_phi(c.times[j] - c.times[i]);
            if at == 0.0 {
                break;
            }
            let mj = &c.mids[j * dim..(j + 1) * dim];
            let r2: f64 = mi.iter().zip(mj).map(|(x, y)| (y - x) * (y - x)).sum();
            total += 2.0 * c.widths[i] * c.widths[j] * at * k.r_psi_sq(r2);
        }
    }
    total
}

/// Interaction I(x, y) between consecutive unit increments.
pub fn interaction_i(x: &PathIncrement, y: &PathIncrement, k: &CovarianceKernel, lambda: f64) -> Result<f64> {
    if x.len != 1.0 || y.len != 1.0 {
        return contract(format!("interaction needs unit increments, got lengths {} and {}", x.len, y.len));
    }
    Ok(cross_interaction(x, y, k, lambda))
}

/// lambda^2 times the double integral of R(s + |x| - u, y(s) + x(|x|) - x(u))
/// over u in [0, |x|], s in [0, |y|]: the interaction of a piece with the
/// piece that follows it.
fn cross_interaction(x: &PathIncrement, y: &PathIncrement, k: &CovarianceKernel, lambda: f64) -> f64 {
    if lambda == 0.0 || y.len == 0.0 {
        return 0.0;
    }
    let a = Cells::of(x, 0.0, &vec![0.0; x.dim]);
    let b = Cells::of(y, x.len, x.endpoint());
    lambda * lambda * cross_sum(k, &a, &b, x.dim)
}

/// Interaction between the first piece (length tau) and the first unit increment.
pub fn interaction_first(first: &PathIncrement, second: &PathIncrement, k: &CovarianceKernel, lambda: f64) -> Result<f64> {
    if second.len != 1.0 || first.len <= 0.0 || first.len > 1.0 {
        return contract("first-boundary interaction needs a piece of length in (0, 1] and a unit increment");
    }
    Ok(cross_interaction(first, second, k, lambda))
}

/// Interaction between the last unit increment and the final fragment.
pub fn interaction_last(last: &PathIncrement, fragment: &PathIncrement, k: &CovarianceKernel, lambda: f64) -> Result<f64> {
    if last.len != 1.0 || fragment.len < 0.0 || fragment.len > 1.0 {
        return contract("terminal interaction needs a unit increment and a fragment of length in [0, 1]");
    }
    Ok(cross_interaction(last, fragment, k, lambda))
}

/// Rigorous bound on the interaction: lambda^2 sup R times the area 1/2 of
/// the active band.
pub fn i_sup_bound(k: &CovarianceKernel, lambda: f64) -> f64 {
    0.5 * lambda * lambda * k.sup_r
}

/// Area of {(s, u) in [0, len]^2 : |s - u| < 1}.
pub fn band_area(len: f64) -> f64 {
    if len <= 1.0 {
        len * len
    } else {
        2.0 * len - 1.0
    }
}

/// Precomputed weights for unit increments on a fixed grid of `n` cells.
///
/// This is the evaluator used on the hot paths of the chain; on unit
/// increments with `n` cells it agrees with the generic functionals up to
/// the interpolation of the temporal table.
#[derive(Debug, Clone)]
pub struct PathKernel {
    pub kernel: CovarianceKernel,
    pub lambda: f64,
    pub n: usize,
    pub dim: usize,
    /// lambda^2 h^2 A(1 - k h) for k = 0..n.
    cross_weights: Vec<f64>,
    /// lambda^2 h^2 A(k h) for k = 0..n.
    self_weights: Vec<f64>,
    r_psi_zero: f64,
}

impl PathKernel {
    pub fn new(kernel: &CovarianceKernel, lambda: f64, n: usize) -> Self {
        let h = 1.0 / n as f64;
        let l2 = lambda * lambda;
        let phi = &kernel.mollifiers.phi;
        let cross_weights = (0..=n)
            .map(|k| l2 * h * h * CovarianceKernel::a_phi_direct(phi, 1.0 - k as f64 * h))
            .collect();
        let self_weights = (0..=n).map(|k| l2 * h * h * CovarianceKernel::a_phi_direct(phi, k as f64 * h)).collect();
        Self {
            kernel: kernel.clone(),
            lambda,
            n,
            dim: kernel.dimension,
            cross_weights,
            self_weights,
            r_psi_zero: kernel.r_psi_sq(0.0),
        }
    }

    pub fn i_sup(&self) -> f64 {
        i_sup_bound(&self.kernel, self.lambda)
    }

    /// Largest value of the discretized interaction, attained when both
    /// paths stay at the origin (R_psi peaks at 0 and the weights are
    /// non-negative). Inflated by 1e-6 to cover the difference between the
    /// hot-path and generic evaluators.
    pub fn interaction_max(&self) -> f64 {
        let flat = PathIncrement::flat(1.0, self.n, self.dim);
        self.interaction(&flat, &flat) * (1.0 + 1e-6)
    }

    /// I(x, y) for unit increments on this grid.
    #[inline]
    pub fn interaction(&self, x: &PathIncrement, y: &PathIncrement) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        assert!(x.n == self.n && y.n == self.n && x.dim == self.dim && y.dim == self.dim);
        match self.dim {
            1 => self.interaction_dim::<1>(x, y),
            2 => self.interaction_dim::<2>(x, y),
            3 => self.interaction_dim::<3>(x, y),
            4 => self.interaction_dim::<4>(x, y),
            _ => self.interaction_any(x, y),
        }
    }

    fn interaction_dim<const D: usize>(&self, x: &PathIncrement, y: &PathIncrement) -> f64 {
        let mut end = [0.0; D];
        end.copy_from_slice(x.endpoint());
        let xm = &x.mids()[..self.n * D];
        let ym = &y.mids()[..self.n * D];
        let w = &self.cross_weights[..=self.n];
        let mut total = 0.0;
        for i in 1..self.n {
            let mut shift = [0.0; D];
            for c in 0..D {
                shift[c] = end[c] - xm[i * D + c];
            }
            for j in 0..i {
                let mut r2 = 0.0;
                for c in 0..D {
                    let v = ym[j * D + c] + shift[c];
                    r2 += v * v;
                }
                total += w[i - j] * self.kernel.r_psi_sq_fast(r2);
            }
        }
        total
    }

    fn interaction_any(&self, x: &PathIncrement, y: &PathIncrement) -> f64 {
        let d = self.dim;
        let end = x.endpoint();
        let (xm, ym) = (x.mids(), y.mids());
        let mut total = 0.0;
        for i in 1..self.n {
            for j in 0..i {
                let r2: f64 = (0..d)
                    .map(|c| {
                        let v = ym[j * d + c] + end[c] - xm[i * d + c];
                        v * v
                    })
                    .sum();
                if r2 < 1.0 {
                    total += self.cross_weights[i - j] * self.kernel.r_psi_sq(r2);
                }
            }
        }
        total
    }

    /// Self-tilt exponent of a unit increment on this grid.
    pub fn self_tilt(&self, x: &PathIncrement) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        let d = self.dim;
        let m = x.mids();
        let mut off = 0.0;
        for i in 1..self.n {
            for j in 0..i {
                let mut r2 = 0.0;
                for c in 0..d {
                    let v = m[i * d + c] - m[j * d + c];
                    r2 += v * v;
                }
                if r2 < 1.0 {
                    off += self.self_weights[i - j] * self.kernel.r_psi_sq(r2);
                }
            }
        }
        0.5 * (self.n as f64 * self.self_weights[0] * self.r_psi_zero) + off
    }

    /// Upper bound of the self-tilt exponent of a piece of length `len`.
    pub fn self_tilt_bound(&self, len: f64) -> f64 {
        0.5 * self.lambda * self.lambda * self.kernel.sup_r * band_area(len)
    }

    /// Draw from the tilted measure on paths of length `len` by rejection
    /// from the Wiener sampler. Returns the path and the number of proposals.
    pub fn sample_tilted<R: Rng>(&self, len: f64, rng: &mut R) -> (PathIncrement, usize) {
        let cells = if len == 1.0 { self.n } else { cells_for_length(len, self.n) };
        let bound = self.self_tilt_bound(len);
        let mut tries = 0;
        loop {
            tries += 1;
            let p = sample_wiener_increment(len, cells, self.dim, rng);
            if self.lambda == 0.0 {
                return (p, tries);
            }
            let s = if len == 1.0 { self.self_tilt(&p) } else { self_tilt_exponent(&p, &self.kernel, self.lambda) };
            if rng.random::<f64>() < (s - bound).exp() {
                return (p, tries);
            }
        }
    }

    /// Draw from the tilted unit-length measure pi.
    pub fn sample_pi<R: Rng>(&self, rng: &mut R) -> PathIncrement {
        self.sample_tilted(1.0, rng).0
    }

    /// Self-tilt exponent of a unit-grid path of integer length via the
    /// block decomposition: sum of block self-tilts plus consecutive
    /// interactions.
    pub fn self_tilt_blocks(&self, blocks: &[PathIncrement]) -> f64 {
        let mut s: f64 = blocks.iter().map(|b| self.self_tilt(b)).sum();
        for w in blocks.windows(2) {
            s += self.interaction(&w[0], &w[1]);
        }
        s
    }
}

/// Draw from pi with the generic evaluator (acceptance uses the band bound).
pub fn sample_pi<R: Rng>(k: &CovarianceKernel, lambda: f64, n: usize, rng: &mut R) -> PathIncrement {
    PathKernel::new(k, lambda, n).sample_pi(rng)
}

/// Concatenation of a first piece of length tau, unit increments, and an
/// optional final fragment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssembledPath {
    pub increments: Vec<PathIncrement>,
    pub tau: f64,
    pub total_length: f64,
    /// Node times of the concatenation (junction nodes appear once).
    pub times: Vec<f64>,
    /// Row-major node positions matching `times`.
    pub nodes: Vec<f64>,
    pub dim: usize,
}

/// Stitch increments into a continuous path.
pub fn assemble(tau: f64, increments: Vec<PathIncrement>) -> Result<AssembledPath> {
    let tau = if tau == 0.0 { 1.0 } else { tau };
    if increments.is_empty() {
        return contract("no increments to assemble");
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return contract(format!("tau must lie in (0, 1], got {tau}"));
    }
    if (increments[0].len - tau).abs() > 1e-12 {
        return contract(format!("first increment has length {}, expected tau = {tau}", increments[0].len));
    }
    let m = increments.len();
    for (i, inc) in increments.iter().enumerate().skip(1) {
        let last = i == m - 1;
        if (!last && inc.len != 1.0) || (last && !(inc.len > 0.0 && inc.len <= 1.0)) {
            return contract(format!("increment {i} has length {}", inc.len));
        }
    }
    let dim = increments[0].dim;
    if increments.iter().any(|p| p.dim != dim) {
        return contract("increments of different dimensions");
    }
    let mut times = vec![0.0];
    let mut nodes = vec![0.0; dim];
    let mut t0 = 0.0;
    let mut origin = vec![0.0; dim];
    for inc in &increments {
        let h = inc.step();
        for i in 1..=inc.n {
            times.push(t0 + i as f64 * h);
            nodes.extend(inc.node(i).iter().zip(&origin).map(|(a, b)| a + b));
        }
        t0 += inc.len;
        let n0 = nodes.len() - dim;
        origin.copy_from_slice(&nodes[n0..]);
    }
    Ok(AssembledPath { increments, tau, total_length: t0, times, nodes, dim })
}

impl AssembledPath {
    pub fn endpoint(&self) -> &[f64] {
        &self.nodes[self.nodes.len() - self.dim..]
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    /// Position at time `s` by linear interpolation between nodes.
    pub fn at(&self, s: f64, out: &mut [f64]) {
        let i = self.times.partition_point(|&t| t <= s).clamp(1, self.times.len() - 1);
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let f = if t1 > t0 { ((s - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 0.0 };
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.nodes[(i - 1) * self.dim + k] * (1.0 - f) + self.nodes[i * self.dim + k] * f;
        }
    }

    /// Self-tilt exponent of the whole path with the generic midpoint evaluator.
    pub fn self_tilt(&self, k: &CovarianceKernel, lambda: f64) -> f64 {
        if lambda == 0.0 {
            return 0.0;
        }
        let mut cells = Cells { times: vec![], widths: vec![], mids: vec![] };
        let mut t0 = 0.0;
        let mut origin = vec![0.0; self.dim];
        for inc in &self.increments {
            cells.extend(Cells::of(inc, t0, &origin));
            t0 += inc.len;
            origin.iter_mut().zip(inc.endpoint()).for_each(|(o, e)| *o += e);
        }
        0.5 * lambda * lambda * band_self_sum(k, &cells, self.dim)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_nodes_csv(path, self.dim, self.times.iter().enumerate().map(|(i, &t)| (t, self.node(i))))
    }
}
