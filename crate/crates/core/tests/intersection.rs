mod common;

use ewhomog::chain::TiltedChain;
use ewhomog::intersection::{
    estimate_nu_eff, h_functional, nearby_tail_report, nearby_time, sample_nearby_times, white_time_nu_eff, HArguments,
    VarianceWeights,
};
use ewhomog::stats::mean_estimate;
use ewhomog::Tag;

#[test]
fn distant_paths_are_never_nearby() {
    let chain = TiltedChain::new(common::eigenpair(0.2), None).unwrap();
    let mut rng = common::streams().stream(Tag::Validation, 30);
    let x0 = chain.draw_invariant(&mut rng).unwrap();
    let y0 = chain.draw_invariant(&mut rng).unwrap();
    let s = nearby_time(&[1000.0, 0.0, 0.0], &[0.0; 3], &x0, &y0, 10.0, &chain, &mut rng).unwrap();
    assert_eq!(s.ell, 0.0);
    let s = nearby_time(&[0.0; 3], &[0.0; 3], &x0, &y0, 10.0, &chain, &mut rng).unwrap();
    assert!(s.ell > 0.0 && s.ell <= 10.0);
    assert!(nearby_time(&[0.0; 2], &[0.0; 3], &x0, &y0, 10.0, &chain, &mut rng).is_err());
}

#[test]
fn nearby_time_saturates_in_the_horizon() {
    let chain = TiltedChain::new(common::eigenpair(0.2), None).unwrap();
    let streams = common::streams();
    let short = sample_nearby_times(&chain, 400, 20.0, &streams).unwrap();
    let long = sample_nearby_times(&chain, 400, 40.0, &streams).unwrap();
    for (a, b) in short.iter().zip(&long) {
        assert!(b.ell >= a.ell);
        assert!(a.ell <= 20.0 && b.ell <= 40.0);
    }
    let ea = mean_estimate(&short.iter().map(|s| s.ell).collect::<Vec<_>>());
    let eb = mean_estimate(&long.iter().map(|s| s.ell).collect::<Vec<_>>());
    assert!(eb.value - ea.value < 2.0 * eb.stderr, "{} vs {}", ea.value, eb.value);
    let report = nearby_tail_report(&long).unwrap();
    assert!(report.fit.rate > 0.0);
    assert!(nearby_tail_report(&long[..50]).is_err());
}

#[test]
fn h_functional_is_trivial_without_coupling() {
    let ep = common::eigenpair(0.0);
    let chain = TiltedChain::new(ep, None).unwrap();
    let w = VarianceWeights::new(common::kernels(3), 0.0, common::N_SUBSTEPS);
    let mut rng = common::streams().stream(Tag::Validation, 31);
    let x0 = chain.draw_invariant(&mut rng).unwrap();
    let args = HArguments { x0: &x0, y0: &x0, x1: &[0.1, 0.0, 0.0], x2: &[0.0; 3], s1: 0.3, s2: 0.6 };
    let h = h_functional(&chain, &w, &args, 16.0, 16.0, 10, &mut rng).unwrap();
    assert_eq!(h.value, 1.0);
    assert_eq!(h.stderr, 0.0);
    assert!(h_functional(&chain, &w, &args, 1.5, 16.0, 10, &mut rng).is_err());
}

#[test]
fn h_functional_grows_with_the_horizon_and_saturates() {
    let chain = TiltedChain::new(common::eigenpair(0.2), None).unwrap();
    let w = VarianceWeights::new(common::kernels(3), 0.2, common::N_SUBSTEPS);
    let streams = common::streams();
    let mut rng = streams.stream(Tag::Validation, 32);
    let x0 = chain.draw_invariant(&mut rng).unwrap();
    let y0 = chain.draw_invariant(&mut rng).unwrap();
    let args = HArguments { x0: &x0, y0: &y0, x1: &[0.1, -0.05, 0.0], x2: &[0.0, 0.1, 0.0], s1: 0.4, s2: 0.5 };
    let run = |m: f64| h_functional(&chain, &w, &args, m, m, 400, &mut streams.stream(Tag::Validation, 33)).unwrap();
    let (a, b, c) = (run(4.0), run(8.0), run(16.0));
    assert!(a.value > 1.0);
    assert!(a.value <= c.value + 3.0 * a.stderr.hypot(c.stderr), "{} vs {}", a.value, c.value);
    assert!(!c.overflow);
    assert!(common::within_sigma(b.value, b.stderr, c.value, c.stderr, 3.0), "{} vs {}", b.value, c.value);
}

#[test]
fn h_functional_is_exchangeable() {
    let chain = TiltedChain::new(common::eigenpair(0.2), None).unwrap();
    let w = VarianceWeights::new(common::kernels(3), 0.2, common::N_SUBSTEPS);
    let streams = common::streams();
    let mut rng = streams.stream(Tag::Validation, 34);
    let x0 = chain.draw_invariant(&mut rng).unwrap();
    let y0 = chain.draw_invariant(&mut rng).unwrap();
    let (x1, x2) = ([0.2, 0.0, 0.1], [-0.1, 0.05, 0.0]);
    let a = HArguments { x0: &x0, y0: &y0, x1: &x1, x2: &x2, s1: 0.2, s2: 0.7 };
    let b = HArguments { x0: &y0, y0: &x0, x1: &x2, x2: &x1, s1: 0.7, s2: 0.2 };
    let ha = h_functional(&chain, &w, &a, 8.0, 8.0, 400, &mut streams.stream(Tag::Validation, 35)).unwrap();
    let hb = h_functional(&chain, &w, &b, 8.0, 8.0, 400, &mut streams.stream(Tag::Validation, 36)).unwrap();
    assert!(common::within_sigma(ha.value, ha.stderr, hb.value, hb.stderr, 3.0), "{} vs {}", ha.value, hb.value);
}

#[test]
fn effective_variance_baselines() {
    let chain = TiltedChain::new(common::eigenpair(0.0), None).unwrap();
    let e = estimate_nu_eff(&chain, 8.0, 10, 1, &common::streams()).unwrap();
    assert!((e.value - 1.0).abs() < 1e-6);
    assert_eq!(e.stderr, 0.0);
    assert!(estimate_nu_eff(&chain, 8.5, 10, 1, &common::streams()).is_err());

    let k = common::kernels(3);
    let white = white_time_nu_eff(k, 0.0, 20_000, 10.0, 16, &common::streams()).unwrap();
    assert!((white.value - 1.0).abs() < 3.0 * white.stderr, "{} +- {}", white.value, white.stderr);
}

#[test]
fn effective_variance_is_reproducible_across_seeds() {
    let chain = TiltedChain::new(common::eigenpair(0.2), None).unwrap();
    let a = estimate_nu_eff(&chain, 8.0, 600, 1, &common::streams()).unwrap();
    let b = estimate_nu_eff(&chain, 8.0, 600, 1, &common::streams().child(Tag::Validation, 2)).unwrap();
    assert!(common::within_sigma(a.value, a.stderr, b.value, b.stderr, 3.0), "{} vs {}", a.value, b.value);
    assert!(a.value >= 1.0 - 2.0 * a.stderr);
    assert!(a.value_2m >= a.value);
    assert_eq!(a.overflow_count, 0);
}

#[test]
fn white_time_variance_is_monotone() {
    let k = common::kernels(3);
    let streams = common::streams();
    let a = white_time_nu_eff(k, 0.1, 2000, 10.0, 16, &streams).unwrap();
    let b = white_time_nu_eff(k, 0.3, 2000, 10.0, 16, &streams).unwrap();
    assert!(b.value >= a.value);
    assert!(a.value_2h >= a.value);
    assert!(b.saturated());
}
