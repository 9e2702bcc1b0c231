//! Lattice realizations of the smoothed Gaussian potential
//! V(t, x) = int phi(t - s) psi(x - y) W(ds, dy).
//!
//! White noise lives on the nodes of a lattice extended by the mollifier
//! supports (one unit back in time, half a unit on each spatial side) with
//! variance 1 / (dt dx^d) per node. Each noise time slice is smoothed in
//! space with the psi stencil by FFT, then slices are combined with the phi
//! stencil.

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mollifier::MollifierPair;
use crate::pde::sidecar_path;
use crate::rng::{Streams, Tag};

/// Space-time box [t_lo, t_hi] x [-L, L]^d.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldBox {
    pub t_lo: f64,
    pub t_hi: f64,
    pub half_width: f64,
}

/// V sampled at the nodes t_lo + i dt, -L + j dx of a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRealization {
    /// Row-major [time][x_1]...[x_d].
    pub values: Vec<f64>,
    pub bx: FieldBox,
    pub dim: usize,
    pub dt: f64,
    pub dx: f64,
    /// Time nodes.
    pub n_t: usize,
    /// Spatial nodes per axis.
    pub n_x: usize,
    pub seed: u64,
}

/// Sidecar metadata of a binary field export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRealizationSidecar {
    pub bx: FieldBox,
    pub dim: usize,
    pub dt: f64,
    pub dx: f64,
    pub n_t: usize,
    pub n_x: usize,
    pub seed: u64,
    pub dtype: String,
    pub order: String,
}

fn node_count(span: f64, step: f64, what: &str) -> Result<usize> {
    let cells = span / step;
    let rounded = cells.round();
    if (cells - rounded).abs() > 1e-6 {
        return Err(Error::Config(format!("{what} span {span} is not a multiple of the step {step}")));
    }
    Ok(rounded as usize + 1)
}

fn fft_axes(data: &mut [Complex<f64>], n: usize, dim: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
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

/// Sample V on the lattice of `bx` with steps `dt`, `dx`. Noise time slice
/// `m` is drawn from stream `(Field, m)` of the seed, so the result does not
/// depend on the worker count.
pub fn sample_field(m: &MollifierPair, bx: FieldBox, dt: f64, dx: f64, seed: u64) -> Result<FieldRealization> {
    let d = m.dimension;
    if !(dt > 0.0 && dt <= 0.25 && dx > 0.0 && dx <= 0.25) {
        return Err(Error::Config(format!("lattice steps dt = {dt}, dx = {dx} must lie in (0, 1/4] to resolve the mollifiers")));
    }
    if !(bx.t_hi - bx.t_lo >= 1.0 && 2.0 * bx.half_width >= 1.0) {
        return Err(Error::Config("field box is smaller than the mollifier support".into()));
    }
    let n_t = node_count(bx.t_hi - bx.t_lo, dt, "time")?;
    let n_x = node_count(2.0 * bx.half_width, dx, "space")?;
    let lag_t = (1.0 / dt).ceil() as usize;
    let pad = (0.5 / dx).ceil() as usize;
    let noise_x = n_x + 2 * pad;
    let noise_t = n_t + lag_t;
    let slice_len = noise_x.pow(d as u32);
    let field_slice = n_x.pow(d as u32);

    // Spectrum of the psi stencil on the padded periodic grid, scaled by dx^d.
    let cell = dx.powi(d as i32);
    let mut stencil = vec![Complex::new(0.0, 0.0); slice_len];
    for (idx, s) in stencil.iter_mut().enumerate() {
        let mut r = idx;
        let mut r2 = 0.0;
        for _ in 0..d {
            let k = r % noise_x;
            r /= noise_x;
            let k = if k > noise_x / 2 { k as f64 - noise_x as f64 } else { k as f64 };
            r2 += (k * dx).powi(2);
        }
        *s = Complex::new(m.psi.eval(r2.sqrt()) * cell, 0.0);
    }
    let mut planner = FftPlanner::new();
    fft_axes(&mut stencil, noise_x, d, false, &mut planner);

    let sd = 1.0 / (dt * cell).sqrt();
    let streams = Streams::new(seed);
    let smoothed: Vec<Vec<f64>> = (0..noise_t)
        .into_par_iter()
        .map(|slice| {
            let mut rng = streams.stream(Tag::Field, slice as u64);
            let mut data: Vec<Complex<f64>> = (0..slice_len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    Complex::new(sd * z, 0.0)
                })
                .collect();
            let mut planner = FftPlanner::new();
            fft_axes(&mut data, noise_x, d, false, &mut planner);
            data.iter_mut().zip(&stencil).for_each(|(a, b)| *a *= b);
            fft_axes(&mut data, noise_x, d, true, &mut planner);
            let scale = 1.0 / slice_len as f64;
            // Keep the interior nodes that coincide with field nodes.
            let mut out = Vec::with_capacity(field_slice);
            for idx in 0..field_slice {
                let mut r = idx;
                let mut src = 0;
                let mut mult = 1;
                for _ in 0..d {
                    src += (r % n_x + pad) * mult;
                    r /= n_x;
                    mult *= noise_x;
                }
                out.push(data[src].re * scale);
            }
            out
        })
        .collect();

    // Temporal stencil: field node i sees noise slices m with
    // t_i - s_m = (i + lag_t - m) dt in [0, 1].
    let taps: Vec<f64> = (0..=lag_t).map(|k| m.phi.eval(k as f64 * dt) * dt).collect();
    let mut values = vec![0.0; n_t * field_slice];
    values.par_chunks_mut(field_slice).enumerate().for_each(|(i, out)| {
        for (k, &w) in taps.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let src = &smoothed[i + lag_t - k];
            out.iter_mut().zip(src).for_each(|(o, s)| *o += w * s);
        }
    });
    Ok(FieldRealization { values, bx, dim: d, dt, dx, n_t, n_x, seed })
}

impl FieldRealization {
    pub fn slice_len(&self) -> usize {
        self.n_x.pow(self.dim as u32)
    }

    /// Value at time node `i` and spatial node multi-index `j`.
    pub fn at_node(&self, i: usize, j: &[usize]) -> f64 {
        let mut idx = 0;
        for &jk in j {
            idx = idx * self.n_x + jk;
        }
        self.values[i * self.slice_len() + idx]
    }

    pub fn time_of(&self, i: usize) -> f64 {
        self.bx.t_lo + i as f64 * self.dt
    }

    pub fn position_of(&self, j: usize) -> f64 {
        -self.bx.half_width + j as f64 * self.dx
    }

    /// Whether x lies in the spatial box.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().all(|&v| v.abs() <= self.bx.half_width)
    }

    /// Multilinear interpolation in space and time, zero outside the box.
    pub fn interpolate(&self, t: f64, x: &[f64]) -> f64 {
        let pt = (t - self.bx.t_lo) / self.dt;
        if !(pt >= 0.0 && pt <= (self.n_t - 1) as f64) || !self.contains(x) {
            return 0.0;
        }
        let i0 = (pt as usize).min(self.n_t - 2);
        let ft = pt - i0 as f64;
        let v0 = self.interpolate_slice(i0, x);
        if ft == 0.0 {
            return v0;
        }
        v0 * (1.0 - ft) + self.interpolate_slice(i0 + 1, x) * ft
    }

    /// Multilinear interpolation within time slice `i`; `x` must be inside.
    pub fn interpolate_slice(&self, i: usize, x: &[f64]) -> f64 {
        let d = self.dim;
        let n = self.n_x;
        let slice = &self.values[i * self.slice_len()..(i + 1) * self.slice_len()];
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        for k in 0..d {
            let p = (x[k] + self.bx.half_width) / self.dx;
            let b = (p as usize).min(n - 2);
            base[k] = b;
            frac[k] = p - b as f64;
        }
        let mut total = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0;
            for k in 0..d {
                let bit = (corner >> k) & 1;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                idx = idx * n + base[k] + bit;
            }
            if w != 0.0 {
                total += w * slice[idx];
            }
        }
        total
    }

    /// A copy with every value set to zero.
    pub fn zeroed(&self) -> Self {
        Self { values: vec![0.0; self.values.len()], ..self.clone() }
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &self.values {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        let sidecar = FieldRealizationSidecar {
            bx: self.bx,
            dim: self.dim,
            dt: self.dt,
            dx: self.dx,
            n_t: self.n_t,
            n_x: self.n_x,
            seed: self.seed,
            dtype: "f64-le".into(),
            order: "row-major [t][x_1]..[x_d], last axis fastest".into(),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let s: FieldRealizationSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let bytes = std::fs::read(path)?;
        let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if values.len() != s.n_t * s.n_x.pow(s.dim as u32) {
            return Err(Error::Contract("binary field size does not match its sidecar".into()));
        }
        Ok(Self { values, bx: s.bx, dim: s.dim, dt: s.dt, dx: s.dx, n_t: s.n_t, n_x: s.n_x, seed: s.seed })
    }
}
