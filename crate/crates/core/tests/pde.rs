use ewhomog::pde::{ew_variance, solve_heat, ScalarField};
use ewhomog::quadrature::simpson;
use ewhomog::Error;
use proptest::prelude::*;

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

fn max_diff(a: &ScalarField, b: &ScalarField) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Density of N(0, c) in two dimensions.
fn gaussian_2d(x: &[f64], c: [[f64; 2]; 2]) -> f64 {
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    let q = (c[1][1] * x[0] * x[0] - 2.0 * c[0][1] * x[0] * x[1] + c[0][0] * x[1] * x[1]) / det;
    (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
}

#[test]
fn gaussian_data_spreads_by_the_closed_form() {
    let a = vec![vec![1.0, 0.3], vec![0.3, 0.8]];
    let (v0, t) = (0.5, 1.5);
    let f0 = ScalarField::gaussian(128, 2, 10.0, &[0.0, 0.0], v0).unwrap();
    let f = solve_heat(&a, &f0, t).unwrap();
    let c = [[v0 + a[0][0] * t, a[0][1] * t], [a[1][0] * t, v0 + a[1][1] * t]];
    let exact = ScalarField::from_fn(128, 2, 10.0, |x| gaussian_2d(x, c)).unwrap();
    assert!(max_diff(&f, &exact) < 1e-6, "{}", max_diff(&f, &exact));
    assert_eq!(f.time, t);
}

#[test]
fn propagation_is_a_semigroup() {
    let a = vec![vec![0.9, -0.2, 0.1], vec![-0.2, 1.1, 0.0], vec![0.1, 0.0, 0.7]];
    let f0 = ScalarField::from_fn(64, 3, 8.0, |x| (-(x[0] - 0.5).powi(2) - x[1].powi(2) - 0.5 * (x[2] + 0.3).powi(2)).exp() * (1.0 + 0.3 * x[1])).unwrap();
    let direct = solve_heat(&a, &f0, 1.0).unwrap();
    let split = solve_heat(&a, &solve_heat(&a, &f0, 0.4).unwrap(), 0.6).unwrap();
    assert!(max_diff(&direct, &split) < 1e-8);
}

#[test]
fn explicit_finite_differences_agree_for_a_general_matrix() {
    let a = [[1.0, 0.4], [0.4, 0.6]];
    let (n, l, t) = (128usize, 4.0, 0.5);
    let f0 = ScalarField::gaussian(n, 2, l, &[0.2, -0.1], 0.3).unwrap();
    let spectral = solve_heat(&[a[0].to_vec(), a[1].to_vec()], &f0, t).unwrap();

    let h = 2.0 * l / n as f64;
    let steps = (t / (0.1 * h * h)).ceil() as usize;
    let dt = t / steps as f64;
    let at = |f: &[f64], i: usize, j: usize| f[(i % n) * n + (j % n)];
    let mut f = f0.values.clone();
    let mut next = f.clone();
    for _ in 0..steps {
        for i in 0..n {
            for j in 0..n {
                let (ip, im, jp, jm) = (i + 1, i + n - 1, j + 1, j + n - 1);
                let c = at(&f, i, j);
                let fxx = (at(&f, ip, j) - 2.0 * c + at(&f, im, j)) / (h * h);
                let fyy = (at(&f, i, jp) - 2.0 * c + at(&f, i, jm)) / (h * h);
                let fxy = (at(&f, ip, jp) - at(&f, ip, jm) - at(&f, im, jp) + at(&f, im, jm)) / (4.0 * h * h);
                next[i * n + j] = c + 0.5 * dt * (a[0][0] * fxx + 2.0 * a[0][1] * fxy + a[1][1] * fyy);
            }
        }
        std::mem::swap(&mut f, &mut next);
    }
    let peak = spectral.max_abs();
    let err = spectral.values.iter().zip(&f).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(err < 1e-3 * peak, "{err} vs peak {peak}");
}

#[test]
fn isotropic_propagation_commutes_with_rotations() {
    let f0 = ScalarField::from_fn(64, 2, 6.0, |x| (-(x[0] - 1.0).powi(2) - 2.0 * x[1].powi(2)).exp()).unwrap();
    let rotated = ScalarField::from_fn(64, 2, 6.0, |x| (-(x[1] - 1.0).powi(2) - 2.0 * x[0].powi(2)).exp()).unwrap();
    let a = vec![vec![0.7, 0.0], vec![0.0, 0.7]];
    let f = solve_heat(&a, &f0, 1.0).unwrap();
    let g = solve_heat(&a, &rotated, 1.0).unwrap();
    for x in [[0.5, 0.25], [-1.0, 2.0], [1.5, -0.75]] {
        assert!((f.value_at(&x) - g.value_at(&[x[1], x[0]])).abs() < 1e-10);
    }
}

#[test]
fn peak_decays_monotonically() {
    let f0 = ScalarField::gaussian(64, 2, 8.0, &[0.0, 0.0], 0.5).unwrap();
    let mut last = f0.value_at(&[0.0, 0.0]);
    for t in [0.5, 1.0, 2.0, 3.0] {
        let v = solve_heat(&identity(2), &f0, t).unwrap().value_at(&[0.0, 0.0]);
        assert!(v < last);
        last = v;
    }
}

/// lambda^2 nu^2 int_0^t int (N(x; vu + s) N(x; vg + t - s))^2 dx ds for unit
/// Gaussian densities and a = I, by the product formula for Gaussians.
fn ew_closed_form(d: usize, vu: f64, vg: f64, t: f64, lambda: f64, nu2: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let m = 4000;
    let ds = t / m as f64;
    let vals: Vec<f64> = (0..=m)
        .map(|i| {
            let s = i as f64 * ds;
            let (v1, v2) = (vu + s, vg + t - s);
            let w = v1 * v2 / (v1 + v2);
            (tau * (v1 + v2)).powf(-(d as f64)) * (2.0 * tau * w).powf(-(d as f64) / 2.0)
        })
        .collect();
    lambda * lambda * nu2 * simpson(&vals, ds)
}

#[test]
fn ew_variance_matches_the_gaussian_product_formula() {
    let u0 = ScalarField::gaussian(64, 2, 8.0, &[0.0, 0.0], 0.5).unwrap();
    let g = ScalarField::gaussian(64, 2, 8.0, &[0.0, 0.0], 0.8).unwrap();
    let v = ew_variance(&identity(2), 1.3, 0.2, &u0, &g, 1.0, 41).unwrap();
    let exact = ew_closed_form(2, 0.5, 0.8, 1.0, 0.2, 1.3);
    assert!((v / exact - 1.0).abs() < 1e-5, "{v} vs {exact}");
}

#[test]
fn ew_variance_refines() {
    let a = vec![vec![0.95, 0.05, 0.0], vec![0.05, 1.0, 0.0], vec![0.0, 0.0, 1.02]];
    let run = |n: usize, nodes: usize| {
        let u0 = ScalarField::gaussian(n, 3, 6.0, &[0.0; 3], 0.6).unwrap();
        let g = ScalarField::from_fn(n, 3, 6.0, |x| (-x.iter().map(|v| v * v).sum::<f64>() / 2.0).exp()).unwrap();
        ew_variance(&a, 1.1, 0.3, &u0, &g, 1.0, nodes).unwrap()
    };
    let (coarse, fine) = (run(24, 11), run(48, 21));
    assert!((coarse / fine - 1.0).abs() < 0.01, "{coarse} vs {fine}");
}

#[test]
fn ew_variance_is_linear_in_the_effective_variance() {
    let u0 = ScalarField::gaussian(32, 2, 6.0, &[0.0, 0.0], 0.5).unwrap();
    let g = ScalarField::gaussian(32, 2, 6.0, &[0.3, 0.0], 0.5).unwrap();
    let a = identity(2);
    assert_eq!(ew_variance(&a, 1.0, 0.0, &u0, &g, 1.0, 21).unwrap(), 0.0);
    let one = ew_variance(&a, 1.0, 0.2, &u0, &g, 1.0, 21).unwrap();
    let three = ew_variance(&a, 3.0, 0.2, &u0, &g, 1.0, 21).unwrap();
    assert!((three / one - 3.0).abs() < 1e-12);
    let other = ScalarField::gaussian(16, 2, 6.0, &[0.0, 0.0], 0.5).unwrap();
    assert!(matches!(ew_variance(&a, 1.0, 0.2, &u0, &other, 1.0, 21), Err(Error::Contract(_))));
    assert!(ew_variance(&a, 1.0, 0.2, &u0, &g, -1.0, 21).is_err());
}

#[test]
fn binary_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let f = ScalarField::gaussian(16, 2, 4.0, &[0.1, 0.0], 0.7).unwrap();
    let path = dir.path().join("u.bin");
    f.write_binary(&path).unwrap();
    assert_eq!(ScalarField::read_binary(&path).unwrap(), f);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mass_and_positivity_are_preserved(l00 in 0.6f64..1.5, l10 in -0.5f64..0.5, l11 in 0.6f64..1.5, t in 0.5f64..1.5) {
        let a = vec![vec![l00 * l00, l00 * l10], vec![l00 * l10, l10 * l10 + l11 * l11]];
        let f0 = ScalarField::gaussian(128, 2, 12.0, &[0.5, -0.5], 0.6).unwrap();
        let f = solve_heat(&a, &f0, t).unwrap();
        prop_assert!((f.integral() - f0.integral()).abs() < 1e-10);
        prop_assert!(f.values.iter().all(|&v| v > -1e-12));
    }
}
