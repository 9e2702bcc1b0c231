mod common;

use ewhomog::field::{sample_field, FieldBox, FieldRealization};
use ewhomog::stats::{mean, mean_estimate};

fn box_2d() -> FieldBox {
    FieldBox { t_lo: 0.0, t_hi: 8.0, half_width: 8.0 }
}

/// Sample covariance of V at node lag (li, lj, lk) over all node pairs in the box.
fn lag_covariance(f: &FieldRealization, li: usize, lj: usize, lk: usize) -> f64 {
    let n = f.n_x;
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..f.n_t - li {
        for j in 0..n - lj {
            for k in 0..n - lk {
                acc += f.at_node(i, &[j, k]) * f.at_node(i + li, &[j + lj, k + lk]);
                count += 1;
            }
        }
    }
    acc / count as f64
}

#[test]
fn field_is_centred_with_the_kernel_variance() {
    let k = common::kernels(3);
    let bx = FieldBox { t_lo: 0.0, t_hi: 4.0, half_width: 4.0 };
    let f = sample_field(&k.mollifiers, bx, 0.125, 0.125, 11).unwrap();
    assert!(f.values.len() > 100_000);
    let r00 = k.r(0.0, &[0.0; 3]);
    let var = f.values.iter().map(|v| v * v).sum::<f64>() / f.values.len() as f64;
    assert!((var - r00).abs() / r00 < 0.05, "{var} vs {r00}");
}

#[test]
fn field_covariance_matches_the_kernel() {
    let k = common::kernels(2);
    let lags = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (2, 2, 0), (4, 0, 1), (0, 3, 3)];
    let mut cov = vec![Vec::new(); lags.len()];
    let mut means = Vec::new();
    for r in 0..8 {
        let f = sample_field(&k.mollifiers, box_2d(), 0.125, 0.125, 100 + r).unwrap();
        means.push(mean(&f.values));
        for (c, &(li, lj, lk)) in cov.iter_mut().zip(&lags) {
            c.push(lag_covariance(&f, li, lj, lk));
        }
    }
    let m = mean_estimate(&means);
    assert!(m.value.abs() < 4.0 * m.stderr, "mean {} +- {}", m.value, m.stderr);
    for (c, &(li, lj, lk)) in cov.iter().zip(&lags) {
        let e = mean_estimate(c);
        let oracle = k.r(li as f64 * 0.125, &[lj as f64 * 0.125, lk as f64 * 0.125]);
        assert!((e.value - oracle).abs() < 5.0 * e.stderr, "lag {:?}: {} +- {} vs {oracle}", (li, lj, lk), e.value, e.stderr);
    }
}

#[test]
fn identical_seeds_give_identical_fields() {
    let k = common::kernels(2);
    let bx = FieldBox { t_lo: 0.0, t_hi: 2.0, half_width: 2.0 };
    let a = sample_field(&k.mollifiers, bx, 0.25, 0.125, 5).unwrap();
    let b = sample_field(&k.mollifiers, bx, 0.25, 0.125, 5).unwrap();
    let c = sample_field(&k.mollifiers, bx, 0.25, 0.125, 6).unwrap();
    assert_eq!(a.values, b.values);
    assert_ne!(a.values, c.values);
}

#[test]
fn lattice_node_counts_follow_the_box() {
    let k = common::kernels(1);
    let a = sample_field(&k.mollifiers, FieldBox { t_lo: 0.0, t_hi: 2.0, half_width: 2.0 }, 0.125, 0.125, 9).unwrap();
    let b = sample_field(&k.mollifiers, FieldBox { t_lo: 0.0, t_hi: 2.0, half_width: 2.0 }, 0.125, 0.125, 9).unwrap();
    assert_eq!(a.at_node(3, &[7]), b.at_node(3, &[7]));
    assert_eq!(a.n_t, 17);
    assert_eq!(a.n_x, 33);
}

#[test]
fn field_round_trips_through_binary_files() {
    let k = common::kernels(2);
    let bx = FieldBox { t_lo: 0.0, t_hi: 1.0, half_width: 1.0 };
    let f = sample_field(&k.mollifiers, bx, 0.25, 0.25, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.bin");
    f.write_binary(&path).unwrap();
    let g = FieldRealization::read_binary(&path).unwrap();
    assert_eq!(f.values, g.values);
    assert_eq!(f.seed, g.seed);
    assert_eq!(f.n_x, g.n_x);
}

#[test]
fn spans_must_be_multiples_of_the_steps() {
    let k = common::kernels(1);
    let bx = FieldBox { t_lo: 0.0, t_hi: 1.1, half_width: 1.0 };
    assert!(sample_field(&k.mollifiers, bx, 0.25, 0.25, 1).is_err());
}
