//! Constant-coefficient heat propagation on periodic grids and the
//! Edwards-Wilkinson variance integral.
//!
//! Grids cover [-L, L)^d with nodes x_k = -L + k * 2L / n. Propagation by
//! time t multiplies every Fourier mode by exp(-t k^T a k / 2), i.e.
//! convolves with the Gaussian of covariance a t on the periodic extension.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{pairwise_sum, simpson};

/// Values on a uniform periodic grid over [-L, L)^d, row-major with the
/// last coordinate fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    pub values: Vec<f64>,
    /// Nodes per axis.
    pub n: usize,
    pub dim: usize,
    pub half_width: f64,
    pub time: f64,
}

/// Metadata written next to a flat binary field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSidecar {
    pub n: usize,
    pub dim: usize,
    pub half_width: f64,
    pub time: f64,
    pub dtype: String,
    pub order: String,
}

impl ScalarField {
    pub fn new(values: Vec<f64>, n: usize, dim: usize, half_width: f64, time: f64) -> Result<Self> {
        if dim == 0 || n < 2 || values.len() != n.pow(dim as u32) {
            return Err(Error::Contract(format!("field of {} values does not match n = {n}, d = {dim}", values.len())));
        }
        if !(half_width > 0.0) {
            return Err(Error::Config(format!("half width must be positive, got {half_width}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("field values must be finite".into()));
        }
        Ok(Self { values, n, dim, half_width, time })
    }

    /// Samples `f` at the grid nodes.
    pub fn from_fn(n: usize, dim: usize, half_width: f64, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let total = n.checked_pow(dim as u32).ok_or_else(|| Error::Config("grid too large".into()))?;
        let step = 2.0 * half_width / n as f64;
        let mut x = vec![0.0; dim];
        let values = (0..total)
            .map(|idx| {
                let mut r = idx;
                for k in (0..dim).rev() {
                    x[k] = -half_width + (r % n) as f64 * step;
                    r /= n;
                }
                f(&x)
            })
            .collect();
        Self::new(values, n, dim, half_width, 0.0)
    }

    /// Gaussian density with the given centre and isotropic variance.
    pub fn gaussian(n: usize, dim: usize, half_width: f64, center: &[f64], variance: f64) -> Result<Self> {
        let norm = (2.0 * std::f64::consts::PI * variance).powf(-(dim as f64) / 2.0);
        Self::from_fn(n, dim, half_width, |x| {
            let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
            norm * (-r2 / (2.0 * variance)).exp()
        })
    }

    pub fn step(&self) -> f64 {
        2.0 * self.half_width / self.n as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.step().powi(self.dim as i32)
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        let mut r = idx;
        for k in (0..self.dim).rev() {
            x[k] = -self.half_width + (r % self.n) as f64 * self.step();
            r /= self.n;
        }
        x
    }

    /// int field dx by the periodic trapezoid rule.
    pub fn integral(&self) -> f64 {
        pairwise_sum(&self.values) * self.cell_volume()
    }

    /// int (self * other) dx.
    pub fn inner(&self, other: &ScalarField) -> Result<f64> {
        self.check_same_grid(other)?;
        let prod: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect();
        Ok(pairwise_sum(&prod) * self.cell_volume())
    }

    fn check_same_grid(&self, other: &ScalarField) -> Result<()> {
        if self.n != other.n || self.dim != other.dim || (self.half_width - other.half_width).abs() > 1e-12 * self.half_width {
            return Err(Error::Contract("fields live on different grids".into()));
        }
        Ok(())
    }

    /// Multilinear interpolation on the periodic grid.
    pub fn value_at(&self, x: &[f64]) -> f64 {
        let (n, d, h) = (self.n, self.dim, self.step());
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for k in 0..d {
            let p = (x[k] + self.half_width) / h;
            let f = p.floor();
            base[k] = (f as i64).rem_euclid(n as i64) as usize;
            frac[k] = p - f;
        }
        let mut total = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0;
            for k in 0..d {
                let bit = (corner >> k) & 1;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                idx = idx * n + (base[k] + bit) % n;
            }
            total += w * self.values[idx];
        }
        total
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Flat little-endian f64 binary plus a JSON sidecar at `path.json`.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &self.values {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        let sidecar = FieldSidecar {
            n: self.n,
            dim: self.dim,
            half_width: self.half_width,
            time: self.time,
            dtype: "f64-le".into(),
            order: "row-major, last axis fastest".into(),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let sidecar: FieldSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let bytes = std::fs::read(path)?;
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Self::new(values, sidecar.n, sidecar.dim, sidecar.half_width, sidecar.time)
    }
}

pub(crate) fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Validated symmetric positive semidefinite matrix.
fn checked_matrix(a: &[Vec<f64>], dim: usize) -> Result<(DMatrix<f64>, f64)> {
    if a.len() != dim || a.iter().any(|r| r.len() != dim) {
        return Err(Error::Contract(format!("diffusion matrix must be {dim} x {dim}")));
    }
    let m = DMatrix::from_fn(dim, dim, |i, j| a[i][j]);
    let scale = m.abs().max().max(f64::MIN_POSITIVE);
    for i in 0..dim {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::Contract("diffusion matrix is not symmetric".into()));
            }
        }
    }
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if lo < -1e-10 * scale {
        return Err(Error::Contract(format!("diffusion matrix is not positive semidefinite (eigenvalue {lo})")));
    }
    Ok((m, hi.max(0.0)))
}

/// Kernel width sqrt(t ||a||) of the propagation.
pub fn kernel_width(a: &[Vec<f64>], t: f64) -> Result<f64> {
    let (_, norm) = checked_matrix(a, a.len())?;
    Ok((t * norm).sqrt())
}

fn fft_axes(data: &mut [Complex<f64>], n: usize, dim: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    let total = data.len();
    let mut line = vec![Complex::new(0.0, 0.0); n];
    for axis in 0..dim {
        let stride = n.pow((dim - 1 - axis) as u32);
        for start in 0..total {
            if (start / stride) % n != 0 {
                continue;
            }
            for (k, v) in line.iter_mut().enumerate() {
                *v = data[start + k * stride];
            }
            fft.process(&mut line);
            for (k, v) in line.iter().enumerate() {
                data[start + k * stride] = *v;
            }
        }
    }
}

/// Propagation without resolution checks; only the domain condition is
/// enforced.
pub(crate) fn propagate(a: &DMatrix<f64>, norm: f64, f0: &ScalarField, t: f64) -> Result<ScalarField> {
    let width = (t * norm).sqrt();
    if width > f0.half_width / 4.0 {
        return Err(Error::Domain(format!("kernel width {width} exceeds a quarter of the half width {}", f0.half_width)));
    }
    if t == 0.0 {
        return Ok(ScalarField { time: f0.time, ..f0.clone() });
    }
    let (n, d) = (f0.n, f0.dim);
    let mut data: Vec<Complex<f64>> = f0.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft_axes(&mut data, n, d, false);
    let dk = std::f64::consts::PI / f0.half_width;
    let freq = |m: usize| {
        let m = if m >= n.div_ceil(2) { m as f64 - n as f64 } else { m as f64 };
        m * dk
    };
    let mut k = vec![0.0; d];
    for (idx, v) in data.iter_mut().enumerate() {
        let mut r = idx;
        for axis in (0..d).rev() {
            k[axis] = freq(r % n);
            r /= n;
        }
        let mut q = 0.0;
        for i in 0..d {
            for j in 0..d {
                q += k[i] * a[(i, j)] * k[j];
            }
        }
        *v *= (-0.5 * t * q).exp();
    }
    fft_axes(&mut data, n, d, true);
    let scale = 1.0 / data.len() as f64;
    Ok(ScalarField {
        values: data.iter().map(|c| c.re * scale).collect(),
        n,
        dim: d,
        half_width: f0.half_width,
        time: f0.time + t,
    })
}

/// Solution at time t of d_t f = (1/2) div(a grad f) with initial value f0.
pub fn solve_heat(a: &[Vec<f64>], f0: &ScalarField, t: f64) -> Result<ScalarField> {
    if !(t >= 0.0) {
        return Err(Error::Contract(format!("propagation time must be non-negative, got {t}")));
    }
    let (m, norm) = checked_matrix(a, f0.dim)?;
    let width = (t * norm).sqrt();
    if width > 0.0 && width < 2.0 * f0.step() {
        return Err(Error::Resolution(format!("kernel width {width} is under two grid steps ({})", f0.step())));
    }
    propagate(&m, norm, f0, t)
}

/// lambda^2 nu_eff^2 int_0^t int |g_bar(t - s, x) u_bar(s, x)|^2 dx ds, with
/// Simpson's rule on `n_time_nodes` nodes in s (rounded up to odd).
pub fn ew_variance(a: &[Vec<f64>], nu_eff2: f64, lambda: f64, u0: &ScalarField, g: &ScalarField, t: f64, n_time_nodes: usize) -> Result<f64> {
    u0.check_same_grid(g)?;
    if !(t >= 0.0) {
        return Err(Error::Contract(format!("time must be non-negative, got {t}")));
    }
    if t == 0.0 || lambda == 0.0 || nu_eff2 == 0.0 {
        return Ok(0.0);
    }
    let (m, norm) = checked_matrix(a, u0.dim)?;
    let width = (t * norm).sqrt();
    if width < 2.0 * u0.step() {
        return Err(Error::Resolution(format!("kernel width {width} at the final time is under two grid steps")));
    }
    let nodes = (n_time_nodes.max(3) / 2) * 2 + 1;
    let ds = t / (nodes - 1) as f64;
    let integrand = (0..nodes)
        .map(|i| {
            let s = i as f64 * ds;
            let ub = propagate(&m, norm, u0, s)?;
            let gb = propagate(&m, norm, g, t - s)?;
            let sq: Vec<f64> = ub.values.iter().zip(&gb.values).map(|(u, g)| (u * g).powi(2)).collect();
            Ok(pairwise_sum(&sq) * u0.cell_volume())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(lambda * lambda * nu_eff2 * simpson(&integrand, ds))
}
