//! Mollifiers, their covariance kernels, and tabulated sampling densities.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::quadrature::{gauss_legendre, gauss_legendre_on, simpson, sphere_area, trapezoid};

/// Shape of a bump on the normalized coordinate `u` in (-1, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    /// exp(-4 / (1 - u^2)), smooth with all derivatives vanishing at |u| = 1.
    Bump,
    /// (1 - u^2)^power.
    Polynomial { power: u32 },
}

impl Profile {
    pub fn eval(&self, u: f64) -> f64 {
        let q = 1.0 - u * u;
        if q <= 0.0 {
            return 0.0;
        }
        match *self {
            Profile::Bump => (-4.0 / q).exp(),
            Profile::Polynomial { power } => q.powi(power as i32),
        }
    }
}

/// Which variable a mollifier acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Supported on [0, 1] in time.
    Time,
    /// Radial, supported on the ball of radius 1/2 in `dimension` space dimensions.
    Space { dimension: usize },
}

/// A non-negative compactly supported bump, stored both analytically and on
/// a uniform grid.
///
/// For the temporal mollifier the grid covers [0, 1]; for the spatial one it
/// covers the diameter [-1/2, 1/2] and values depend on |x| only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mollifier {
    pub grid_values: Vec<f64>,
    pub support_radius: f64,
    pub grid_step: f64,
    /// Integral of the function (over time, or over R^d for the spatial one).
    pub normalization: f64,
    pub axis: Axis,
    pub profile: Profile,
    /// Multiplier applied to the profile.
    pub scale: f64,
}

impl Mollifier {
    fn build(axis: Axis, profile: Profile, grid_points: usize) -> Result<Self> {
        if grid_points < 16 {
            return config(format!("mollifier grid needs at least 16 points, got {grid_points}"));
        }
        let grid_points = grid_points + grid_points % 2;
        let step = 1.0 / grid_points as f64;
        let mut m = Mollifier {
            grid_values: Vec::new(),
            support_radius: 0.5,
            grid_step: step,
            normalization: 1.0,
            axis,
            profile,
            scale: 1.0,
        };
        m.grid_values = (0..=grid_points).map(|i| m.eval_unscaled(m.node(i))).collect();
        let mass = m.grid_integral();
        m.scale = 1.0 / mass;
        m.grid_values.iter_mut().for_each(|v| *v /= mass);
        m.normalization = m.grid_integral();
        Ok(m)
    }

    /// Coordinate of grid node `i`.
    pub fn node(&self, i: usize) -> f64 {
        match self.axis {
            Axis::Time => i as f64 * self.grid_step,
            Axis::Space { .. } => -0.5 + i as f64 * self.grid_step,
        }
    }

    fn eval_unscaled(&self, x: f64) -> f64 {
        match self.axis {
            Axis::Time => self.profile.eval(2.0 * x - 1.0),
            Axis::Space { .. } => self.profile.eval(2.0 * x.abs()),
        }
    }

    /// Value at `x` (a time for the temporal mollifier, |x| for the spatial one).
    pub fn eval(&self, x: f64) -> f64 {
        self.scale * self.eval_unscaled(x)
    }

    /// Trapezoid integral: over the time grid, or for the spatial mollifier
    /// over the Cartesian lattice of step `grid_step` in R^d (lattice points
    /// outside the support carry zero value).
    pub fn grid_integral(&self) -> f64 {
        match self.axis {
            Axis::Time => trapezoid(&self.grid_values, self.grid_step),
            Axis::Space { dimension } => {
                let h = self.grid_step;
                let counts = lattice_shell_counts(dimension, (0.5 / h).ceil() as usize);
                let sum: f64 = counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(k, &c)| c as f64 * self.eval(h * (k as f64).sqrt()))
                    .sum();
                sum * h.powi(dimension as i32)
            }
        }
    }

    /// Copy multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut m = self.clone();
        m.scale *= factor;
        m.normalization *= factor;
        m.grid_values.iter_mut().for_each(|v| *v *= factor);
        m
    }

    pub fn dimension(&self) -> usize {
        match self.axis {
            Axis::Time => 1,
            Axis::Space { dimension } => dimension,
        }
    }
}

/// Number of points of Z^d with |m|^2 = k, for k <= radius^2.
fn lattice_shell_counts(dimension: usize, radius: usize) -> Vec<u64> {
    let kmax = radius * radius;
    let mut counts = vec![0u64; kmax + 1];
    counts[0] = 1;
    for _ in 0..dimension {
        let mut next = vec![0u64; kmax + 1];
        for (k, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let mut m = 0usize;
            while k + m * m <= kmax {
                next[k + m * m] += if m == 0 { c } else { 2 * c };
                m += 1;
            }
        }
        counts = next;
    }
    counts
}

/// Temporal and spatial mollifier of one model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MollifierPair {
    pub phi: Mollifier,
    pub psi: Mollifier,
    pub dimension: usize,
}

/// Standard exp(-1/.) bumps with unit mass.
pub fn make_bump_mollifiers(dimension: usize, grid_points: usize) -> Result<MollifierPair> {
    make_mollifiers(dimension, grid_points, Profile::Bump, Profile::Bump)
}

/// Unit-mass mollifiers with arbitrary profiles.
pub fn make_mollifiers(dimension: usize, grid_points: usize, phi: Profile, psi: Profile) -> Result<MollifierPair> {
    if dimension == 0 {
        return config("dimension must be at least 1");
    }
    Ok(MollifierPair {
        phi: Mollifier::build(Axis::Time, phi, grid_points)?,
        psi: Mollifier::build(Axis::Space { dimension }, psi, grid_points)?,
        dimension,
    })
}

impl MollifierPair {
    pub fn with_phi_scale(&self, factor: f64) -> Self {
        Self { phi: self.phi.scaled(factor), ..self.clone() }
    }

    pub fn with_psi_scale(&self, factor: f64) -> Self {
        Self { psi: self.psi.scaled(factor), ..self.clone() }
    }
}

const A_PHI_INTERVALS: usize = 8192;
const R_PSI_COARSE: usize = 1024;
const R_PSI_INTERVALS: usize = 16 * R_PSI_COARSE;

/// Covariance kernel R(t, x) = A_phi(t) R_psi(x) and its building blocks.
///
/// A_phi(t) = int phi(s) phi(s + t) ds is tabulated on a fine lag grid over
/// [0, 1]; R_psi is tabulated in r = |x|^2 over [0, 1]. Both are evaluated by
/// linear interpolation and vanish outside their supports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceKernel {
    pub mollifiers: MollifierPair,
    pub dimension: usize,
    a_phi_table: Vec<f64>,
    r_psi_table: Vec<f64>,
    pub sup_r: f64,
    /// int A_phi over the real line.
    pub a_phi_integral: f64,
    /// int R_psi over R^d.
    pub r_psi_integral: f64,
}

/// Composite Gauss-Legendre rule: `panels` equal panels of the base rule.
struct Composite {
    rule: (Vec<f64>, Vec<f64>),
    panels: usize,
}

impl Composite {
    fn new(order: usize, panels: usize) -> Self {
        Self { rule: gauss_legendre(order), panels }
    }

    fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let w = (b - a) / self.panels as f64;
        let mut total = 0.0;
        for p in 0..self.panels {
            let lo = a + p as f64 * w;
            total += gauss_legendre_on(lo, lo + w, &self.rule).map(|(x, wt)| wt * f(x)).sum::<f64>();
        }
        total
    }
}

impl CovarianceKernel {
    /// Temporal autocorrelation evaluated by trapezoid over the phi grid
    /// with the shifted factor evaluated analytically.
    pub fn a_phi_direct(phi: &Mollifier, t: f64) -> f64 {
        let t = t.abs();
        if t >= 1.0 {
            return 0.0;
        }
        let vals: Vec<f64> = phi
            .grid_values
            .iter()
            .enumerate()
            .map(|(i, v)| v * phi.eval(phi.node(i) + t))
            .collect();
        trapezoid(&vals, phi.grid_step)
    }

    /// Spatial autocorrelation int psi(y) psi(y + x) dy at |x| = r by
    /// composite Gauss-Legendre in cylindrical coordinates around the axis of x.
    pub fn r_psi_direct(psi: &Mollifier, r: f64) -> f64 {
        let r = r.abs();
        if r >= 1.0 {
            return 0.0;
        }
        let d = psi.dimension();
        let gl = Composite::new(16, 8);
        if d == 1 {
            return gl.integrate(-0.5, 0.5 - r, |y| psi.eval(y) * psi.eval(y + r));
        }
        let area = sphere_area(d - 2);
        let inner = |y1: f64| {
            let rho_max2 = (0.25 - y1 * y1).min(0.25 - (y1 + r) * (y1 + r));
            if rho_max2 <= 0.0 {
                return 0.0;
            }
            gl.integrate(0.0, rho_max2.sqrt(), |rho| {
                let a = (y1 * y1 + rho * rho).sqrt();
                let b = ((y1 + r) * (y1 + r) + rho * rho).sqrt();
                area * rho.powi(d as i32 - 2) * psi.eval(a) * psi.eval(b)
            })
        };
        gl.integrate(-0.5, -0.5 * r, inner) + gl.integrate(-0.5 * r, 0.5 - r, inner)
    }

    /// A_phi at lag t (even in t, zero for |t| >= 1).
    #[inline]
    pub fn a_phi(&self, t: f64) -> f64 {
        let t = t.abs();
        if t >= 1.0 {
            return 0.0;
        }
        let pos = t * A_PHI_INTERVALS as f64;
        let i = pos as usize;
        let f = pos - i as f64;
        self.a_phi_table[i] * (1.0 - f) + self.a_phi_table[i + 1] * f
    }

    /// R_psi as a function of the squared distance.
    #[inline]
    pub fn r_psi_sq(&self, r2: f64) -> f64 {
        if r2 >= 1.0 {
            return 0.0;
        }
        let pos = r2 * R_PSI_INTERVALS as f64;
        let i = pos as usize;
        let f = pos - i as f64;
        self.r_psi_table[i] * (1.0 - f) + self.r_psi_table[i + 1] * f
    }

    /// Branch-free variant of `r_psi_sq` for inner loops.
    #[inline(always)]
    pub fn r_psi_sq_fast(&self, r2: f64) -> f64 {
        let pos = r2.min(1.0) * R_PSI_INTERVALS as f64;
        let i = pos as usize;
        let f = pos - i as f64;
        let t = &self.r_psi_table[i..i + 2];
        t[0] + (t[1] - t[0]) * f
    }

    pub fn r_psi(&self, x: &[f64]) -> f64 {
        self.r_psi_sq(x.iter().map(|v| v * v).sum())
    }

    pub fn r(&self, t: f64, x: &[f64]) -> f64 {
        let a = self.a_phi(t);
        if a == 0.0 {
            return 0.0;
        }
        a * self.r_psi(x)
    }

    /// R_phi(t1, t2) = int_0^inf phi(s - t1) phi(s - t2) ds.
    pub fn r_phi(&self, t1: f64, t2: f64) -> f64 {
        if t1 < -1.0 || t2 < -1.0 || (t1 - t2).abs() >= 1.0 {
            return 0.0;
        }
        if t1 >= 0.0 && t2 >= 0.0 {
            return self.a_phi(t1 - t2);
        }
        let lo = t1.max(t2).max(0.0);
        let hi = t1.min(t2) + 1.0;
        let phi = &self.mollifiers.phi;
        Composite::new(16, 4).integrate(lo, hi, |s| phi.eval(s - t1) * phi.eval(s - t2))
    }

    pub fn a_phi_at_zero(&self) -> f64 {
        self.a_phi_table[0]
    }

    pub fn r_psi_at_zero(&self) -> f64 {
        self.r_psi_table[0]
    }

    /// Export the tabulated A_phi and R_psi as CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["table", "argument", "value"])?;
        for (i, v) in self.a_phi_table.iter().enumerate() {
            w.write_record(["a_phi", &(i as f64 / A_PHI_INTERVALS as f64).to_string(), &v.to_string()])?;
        }
        for (i, v) in self.r_psi_table.iter().enumerate() {
            let r = (i as f64 / R_PSI_INTERVALS as f64).sqrt();
            w.write_record(["r_psi", &r.to_string(), &v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Export a (t, |x|) grid of R as CSV.
    pub fn write_r_grid_csv(&self, path: &Path, points: usize) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "t,r,value")?;
        for i in 0..=points {
            let t = -1.0 + 2.0 * i as f64 / points as f64;
            for j in 0..=points {
                let r = j as f64 / points as f64;
                writeln!(f, "{t},{r},{}", self.a_phi(t) * self.r_psi_sq(r * r))?;
            }
        }
        Ok(())
    }
}

/// Tabulate the covariance kernels of a mollifier pair.
pub fn build_kernels(m: &MollifierPair) -> CovarianceKernel {
    let a_phi_table: Vec<f64> = (0..=A_PHI_INTERVALS)
        .map(|i| CovarianceKernel::a_phi_direct(&m.phi, i as f64 / A_PHI_INTERVALS as f64))
        .collect();
    let coarse: Vec<f64> = (0..=R_PSI_COARSE)
        .map(|i| CovarianceKernel::r_psi_direct(&m.psi, (i as f64 / R_PSI_COARSE as f64).sqrt()))
        .collect();
    let mut r_psi_table = refine_cubic(&coarse, R_PSI_INTERVALS / R_PSI_COARSE);
    // Zero padding so the branch-free lookup at r^2 = 1 stays in bounds.
    r_psi_table.push(0.0);
    let sup_r = a_phi_table[0] * r_psi_table[0];
    let d = m.dimension;
    let a_phi_integral = 2.0 * simpson(&a_phi_table, 1.0 / A_PHI_INTERVALS as f64);
    // Radial integral of R_psi; substituting q = r^2 turns r^(d-1) dr into
    // q^(d/2 - 1) dq / 2, which is smooth for even d and integrable otherwise.
    let radial_points = 4096;
    let h = 1.0 / radial_points as f64;
    let radial: Vec<f64> = (0..=radial_points)
        .map(|k| {
            let r = k as f64 * h;
            let v = r_psi_table_interp(&r_psi_table, r * r);
            v * r.powi(d as i32 - 1)
        })
        .collect();
    let factor = if d == 1 { 2.0 } else { sphere_area(d - 1) };
    let r_psi_integral = factor * simpson(&radial, h);
    CovarianceKernel {
        mollifiers: m.clone(),
        dimension: d,
        a_phi_table,
        r_psi_table,
        sup_r,
        a_phi_integral,
        r_psi_integral,
    }
}

/// Upsample a table by `factor` with four-point Lagrange interpolation
/// (one-sided stencils at the ends).
fn refine_cubic(coarse: &[f64], factor: usize) -> Vec<f64> {
    let n = coarse.len() - 1;
    let mut fine = Vec::with_capacity(n * factor + 1);
    for i in 0..n {
        let base = i.saturating_sub(1).min(n - 3);
        let nodes = [base, base + 1, base + 2, base + 3];
        for j in 0..factor {
            let x = i as f64 + j as f64 / factor as f64;
            let mut v = 0.0;
            for (a, &na) in nodes.iter().enumerate() {
                let mut w = 1.0;
                for (b, &nb) in nodes.iter().enumerate() {
                    if a != b {
                        w *= (x - nb as f64) / (na as f64 - nb as f64);
                    }
                }
                v += w * coarse[na];
            }
            fine.push(v.max(0.0));
        }
    }
    fine.push(coarse[n]);
    fine
}

fn r_psi_table_interp(table: &[f64], r2: f64) -> f64 {
    if r2 >= 1.0 {
        return 0.0;
    }
    let pos = r2 * R_PSI_INTERVALS as f64;
    let i = pos as usize;
    let f = pos - i as f64;
    table[i] * (1.0 - f) + table[i + 1] * f
}

/// int R(s, y) ds dy, the effective variance without disorder.
pub fn naive_variance_nu0(k: &CovarianceKernel) -> f64 {
    k.a_phi_integral * k.r_psi_integral
}

/// Piecewise-linear density on a grid, sampled by inverting its CDF.
#[derive(Debug, Clone)]
pub struct InverseCdf {
    nodes: Vec<f64>,
    cdf: Vec<f64>,
}

impl InverseCdf {
    /// `density` at `nodes` (increasing); need not be normalized.
    pub fn new(nodes: Vec<f64>, density: &[f64]) -> Self {
        let mut cdf = vec![0.0; nodes.len()];
        for i in 1..nodes.len() {
            cdf[i] = cdf[i - 1] + 0.5 * (density[i] + density[i - 1]) * (nodes[i] - nodes[i - 1]);
        }
        let total = *cdf.last().expect("non-empty grid");
        cdf.iter_mut().for_each(|c| *c /= total);
        Self { nodes, cdf }
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let f = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        self.nodes[i - 1] + f * (self.nodes[i] - self.nodes[i - 1])
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.random::<f64>())
    }
}

/// Sampler for s ~ phi / int phi.
pub fn phi_sampler(phi: &Mollifier) -> InverseCdf {
    let n = 4096;
    let nodes: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let dens: Vec<f64> = nodes.iter().map(|&t| phi.eval(t)).collect();
    InverseCdf::new(nodes, &dens)
}

/// Sampler for points in R^d with a radial density `f(|x|)` supported in
/// the ball of radius `r_max`.
#[derive(Debug, Clone)]
pub struct RadialSampler {
    radius: InverseCdf,
    dimension: usize,
}

impl RadialSampler {
    pub fn new(dimension: usize, r_max: f64, f: impl Fn(f64) -> f64) -> Self {
        let n = 4096;
        let nodes: Vec<f64> = (0..=n).map(|i| r_max * i as f64 / n as f64).collect();
        let dens: Vec<f64> = nodes.iter().map(|&r| f(r) * r.powi(dimension as i32 - 1)).collect();
        Self { radius: InverseCdf::new(nodes, &dens), dimension }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let r = self.radius.sample(rng);
        let mut dir = random_direction(self.dimension, rng);
        dir.iter_mut().for_each(|v| *v *= r);
        dir
    }
}

/// Uniform point on the unit sphere in R^d (a random sign when d = 1).
pub fn random_direction<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Sampler for x ~ psi / int psi.
pub fn psi_sampler(psi: &Mollifier) -> RadialSampler {
    RadialSampler::new(psi.dimension(), 0.5, |r| psi.eval(r))
}

/// Sampler for x ~ R_psi / int R_psi.
pub fn r_psi_sampler(k: &CovarianceKernel) -> RadialSampler {
    RadialSampler::new(k.dimension, 1.0, |r| k.r_psi_sq(r * r))
}
