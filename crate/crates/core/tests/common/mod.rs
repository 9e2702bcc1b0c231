#![allow(dead_code)]

use std::sync::OnceLock;

use ewhomog::chain::{solve_eigenpair, EigenPair};
use ewhomog::mollifier::{build_kernels, make_bump_mollifiers, CovarianceKernel};
use ewhomog::path::PathKernel;
use ewhomog::{Streams, Tag};

pub const SEED: u64 = 20_240_601;
pub const N_SUBSTEPS: usize = 32;
pub const ENSEMBLE: usize = 1024;

static KERNELS: [OnceLock<CovarianceKernel>; 4] = [OnceLock::new(), OnceLock::new(), OnceLock::new(), OnceLock::new()];

/// Default bump kernels in dimension 1..=3 (index 0 unused).
pub fn kernels(d: usize) -> &'static CovarianceKernel {
    KERNELS[d].get_or_init(|| build_kernels(&make_bump_mollifiers(d, 64).unwrap()))
}

pub fn path_kernel(lambda: f64) -> PathKernel {
    PathKernel::new(kernels(3), lambda, N_SUBSTEPS)
}

static EIGEN: [OnceLock<EigenPair>; 4] = [OnceLock::new(), OnceLock::new(), OnceLock::new(), OnceLock::new()];

/// Eigenpairs in d = 3 for lambda = 0, 0.1, 0.2, 0.3.
pub fn eigenpair(lambda: f64) -> &'static EigenPair {
    let i = (lambda * 10.0).round() as usize;
    assert!((i as f64 / 10.0 - lambda).abs() < 1e-12 && i < 4, "no cached eigenpair for lambda {lambda}");
    EIGEN[i].get_or_init(|| {
        let mut rng = Streams::new(SEED).stream(Tag::Anchors, 0);
        solve_eigenpair(&path_kernel(lambda), ENSEMBLE, 200, 1e-12, &mut rng).unwrap()
    })
}

pub fn streams() -> Streams {
    Streams::new(SEED)
}

/// |a - b| <= k * sqrt(sa^2 + sb^2).
pub fn within_sigma(a: f64, sa: f64, b: f64, sb: f64, k: f64) -> bool {
    (a - b).abs() <= k * sa.hypot(sb)
}
