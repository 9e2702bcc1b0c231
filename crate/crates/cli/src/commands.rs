//! Subcommand pipelines. Each returns a JSON report, scalar records, the
//! diagnostic flags it raised and the extra files it wrote.

use std::path::Path;

use anyhow::Context as _;
use ewhomog::chain::{
    estimate_a_eff, estimate_zeta, fit_renormalization, solve_eigenpair, AEffEstimate, EigenPair, RenormalizationFit, TiltedChain, ZetaPoint,
};
use ewhomog::field::{sample_field, FieldBox};
use ewhomog::fk::{fluctuation_experiment, homogenized_mean_check, FluctuationConfig, FluctuationInputs, EXIT_WARNING};
use ewhomog::intersection::{estimate_nu_eff, nearby_tail_report, sample_nearby_times, white_time_nu_eff, NuEffEstimate};
use ewhomog::mollifier::{build_kernels, make_bump_mollifiers, naive_variance_nu0, CovarianceKernel};
use ewhomog::path::PathKernel;
use ewhomog::report::{write_csv, Record};
use ewhomog::{Estimate, Streams, Tag};
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;

pub struct Output {
    pub report: Value,
    pub records: Vec<Record>,
    pub flags: Vec<String>,
    pub artifacts: Vec<String>,
}

pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub hash: &'a str,
    pub out: &'a Path,
}

impl Context<'_> {
    fn streams(&self) -> Streams {
        Streams::new(self.cfg.master_seed)
    }

    fn record(&self, name: &str, e: Estimate) -> Record {
        Record::new(name, e, self.cfg.master_seed, self.hash)
    }

    fn kernels(&self) -> anyhow::Result<CovarianceKernel> {
        Ok(build_kernels(&make_bump_mollifiers(self.cfg.dimension, self.cfg.mollifier_grid)?))
    }

    fn eigenpair(&self, k: &CovarianceKernel, lambda: f64) -> anyhow::Result<EigenPair> {
        let pk = PathKernel::new(k, lambda, self.cfg.n_substeps);
        let mut rng = self.streams().stream(Tag::Anchors, 0);
        Ok(solve_eigenpair(&pk, self.cfg.ensemble_size, self.cfg.eigen_max_iters, self.cfg.eigen_tol, &mut rng)?)
    }

    fn chain<'e>(&self, ep: &'e EigenPair) -> anyhow::Result<TiltedChain<'e>> {
        Ok(TiltedChain::new(ep, self.cfg.gamma)?)
    }

    fn a_eff(&self, chain: &TiltedChain) -> anyhow::Result<AEffEstimate> {
        Ok(estimate_a_eff(chain, self.cfg.diffusivity.blocks, &self.streams())?.0)
    }

    fn zeta_fit(&self, k: &CovarianceKernel, ep: &EigenPair) -> anyhow::Result<(RenormalizationFit, Vec<ZetaPoint>)> {
        let pk = PathKernel::new(k, self.cfg.lambda, self.cfg.n_substeps);
        let n = self.cfg.zeta_fit.samples;
        let streams = self.streams();
        let points: Vec<ZetaPoint> = self.cfg.zeta_fit.times.iter().map(|&t| estimate_zeta(&pk, t, n, &streams).into()).collect();
        let z1 = estimate_zeta(&pk, 1.0, n, &streams);
        let zeta_1 = Estimate { value: z1.value, stderr: z1.stderr, n };
        Ok((fit_renormalization(&points, zeta_1, ep.log_rho(), ep.psi_inverse_mean())?, points))
    }

    fn nu_eff(&self, chain: &TiltedChain) -> anyhow::Result<NuEffEstimate> {
        let s = &self.cfg.nu_eff;
        Ok(estimate_nu_eff(chain, s.m, s.n_outer, s.n_inner, &self.streams())?)
    }

    fn csv<T: Serialize>(&self, name: &str, rows: &[T], artifacts: &mut Vec<String>) -> anyhow::Result<()> {
        write_csv(&self.out.join(name), rows).with_context(|| format!("writing {name}"))?;
        artifacts.push(name.into());
        Ok(())
    }
}

fn matrix_rows(m: &[Vec<f64>], s: &[Vec<f64>]) -> Vec<MatrixEntry> {
    let mut rows = Vec::new();
    for (i, (mr, sr)) in m.iter().zip(s).enumerate() {
        for (j, (v, e)) in mr.iter().zip(sr).enumerate() {
            rows.push(MatrixEntry { i, j, value: *v, stderr: *e });
        }
    }
    rows
}

#[derive(Serialize)]
struct MatrixEntry {
    i: usize,
    j: usize,
    value: f64,
    stderr: f64,
}

pub fn kernels(cx: &Context) -> anyhow::Result<Output> {
    let k = cx.kernels()?;
    k.write_csv(&cx.out.join("kernel_tables.csv"))?;
    k.write_r_grid_csv(&cx.out.join("r_grid.csv"), cx.cfg.kernels.r_grid_points)?;
    let nu0 = naive_variance_nu0(&k);
    Ok(Output {
        report: json!({ "r00": k.r(0.0, &vec![0.0; cx.cfg.dimension]), "sup_r": k.sup_r, "nu0_squared": nu0 }),
        records: vec![cx.record("nu0_squared", Estimate::exact(nu0))],
        flags: vec![],
        artifacts: vec!["kernel_tables.csv".into(), "r_grid.csv".into()],
    })
}

pub fn sample_field_cmd(cx: &Context) -> anyhow::Result<Output> {
    let f = &cx.cfg.field;
    let m = make_bump_mollifiers(cx.cfg.dimension, cx.cfg.mollifier_grid)?;
    let seed = cx.streams().stream(Tag::Field, f.realization).random::<u64>();
    let field = sample_field(&m, FieldBox { t_lo: f.t_lo, t_hi: f.t_hi, half_width: f.half_width }, f.dt, f.dx, seed)?;
    field.write_binary(&cx.out.join("field.bin"))?;
    let n = field.values.len() as f64;
    let mean = field.values.iter().sum::<f64>() / n;
    let var = field.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Output {
        report: json!({ "seed": seed, "n_t": field.n_t, "n_x": field.n_x, "sample_mean": mean, "sample_variance": var }),
        records: vec![cx.record("field_sample_variance", Estimate { value: var, stderr: f64::NAN, n: field.values.len() })],
        flags: vec![],
        artifacts: vec!["field.bin".into(), "field.bin.json".into()],
    })
}

pub fn eigenpair(cx: &Context) -> anyhow::Result<Output> {
    let k = cx.kernels()?;
    let ep = cx.eigenpair(&k, cx.cfg.lambda)?;
    let (rlo, rhi) = ep.rho_bounds();
    let (plo, phi) = ep.psi_bounds();
    let mut flags = Vec::new();
    if !(ep.rho >= rlo && ep.rho <= rhi) {
        flags.push(format!("rho {} outside [{rlo}, {rhi}]", ep.rho));
    }
    if ep.psi_min() < plo || ep.psi_max() > phi {
        flags.push(format!("psi range [{}, {}] outside [{plo}, {phi}]", ep.psi_min(), ep.psi_max()));
    }
    #[derive(Serialize)]
    struct Anchor {
        index: usize,
        psi: f64,
        phi: f64,
        invariant_weight: f64,
        sup_norm: f64,
    }
    let rows: Vec<Anchor> = (0..ep.size())
        .map(|i| Anchor { index: i, psi: ep.psi_values[i], phi: ep.phi_values[i], invariant_weight: ep.invariant_weights[i], sup_norm: ep.anchors[i].sup_norm() })
        .collect();
    let mut artifacts = Vec::new();
    cx.csv("anchors.csv", &rows, &mut artifacts)?;
    let log_rho = ep.log_rho();
    Ok(Output {
        report: json!({
            "rho": ep.rho, "log_rho": log_rho, "rho_bounds": [rlo, rhi], "psi_bounds": [plo, phi],
            "psi_range": [ep.psi_min(), ep.psi_max()], "i_sup": ep.i_sup, "i_max": ep.i_max,
            "iterations": ep.iterations, "residual": ep.residual, "psi_inverse_mean": ep.psi_inverse_mean(),
        }),
        records: vec![cx.record("log_rho", log_rho), cx.record("psi_inverse_mean", ep.psi_inverse_mean())],
        flags,
        artifacts,
    })
}

pub fn diffusivity(cx: &Context) -> anyhow::Result<Output> {
    let k = cx.kernels()?;
    let ep = cx.eigenpair(&k, cx.cfg.lambda)?;
    let chain = cx.chain(&ep)?;
    let (a, blocks) = estimate_a_eff(&chain, cx.cfg.diffusivity.blocks, &cx.streams())?;
    let mut artifacts = Vec::new();
    cx.csv("a_eff.csv", &matrix_rows(&a.matrix, &a.stderr), &mut artifacts)?;
    #[derive(Serialize)]
    struct BlockRow {
        length: usize,
        displacement_norm: f64,
        max_excursion: f64,
        excursion_sum: f64,
    }
    let rows: Vec<BlockRow> = blocks
        .iter()
        .map(|b| BlockRow {
            length: b.length,
            displacement_norm: b.displacement.iter().map(|v| v * v).sum::<f64>().sqrt(),
            max_excursion: b.max_excursion,
            excursion_sum: b.excursion_sum,
        })
        .collect();
    cx.csv("blocks.csv", &rows, &mut artifacts)?;
    let mut flags = Vec::new();
    let expected = 1.0 / a.gamma;
    if (a.mean_block_length - expected).abs() > 0.1 * expected {
        flags.push(format!("mean block length {} is far from 1 / gamma = {expected}", a.mean_block_length));
    }
    let mut records = vec![cx.record("a_eff_scalar", a.scalar())];
    for i in 0..a.matrix.len() {
        for j in i..a.matrix.len() {
            records.push(cx.record(&format!("a_eff_{i}{j}"), a.entry(i, j)));
        }
    }
    Ok(Output { report: json!({ "a_eff": a, "lambda": cx.cfg.lambda }), records, flags, artifacts })
}

pub fn zeta_fit(cx: &Context) -> anyhow::Result<Output> {
    let k = cx.kernels()?;
    let ep = cx.eigenpair(&k, cx.cfg.lambda)?;
    let (fit, points) = cx.zeta_fit(&k, &ep)?;
    let mut flags = Vec::new();
    if fit.nonlinear {
        flags.push("zeta_T departs from a straight line by more than 5 stated errors".into());
    }
    if fit.c1_discrepancy > 3.0 {
        flags.push(format!("fitted c1 differs from the closed form by {:.2} sigma", fit.c1_discrepancy));
    }
    let mut artifacts = Vec::new();
    cx.csv("zeta.csv", &points, &mut artifacts)?;
    Ok(Output {
        report: json!({ "fit": fit, "points": points }),
        records: vec![cx.record("c1_fit", fit.c1_fit), cx.record("c1_closed", fit.c1_closed), cx.record("c2_fit", fit.c2_fit), cx.record("c2_closed", fit.c2_closed)],
        flags,
        artifacts,
    })
}

pub fn nu_eff(cx: &Context) -> anyhow::Result<Output> {
    let k = cx.kernels()?;
    let ep = cx.eigenpair(&k, cx.cfg.lambda)?;
    let chain = cx.chain(&ep)?;
    let e = cx.nu_eff(&chain)?;
    let mut flags = Vec::new();
    if !e.saturated() {
        flags.push(format!("M = {} and 2M disagree: {} vs {}", e.m, e.value, e.value_2m));
    }
    if e.overflow_count > 0 {
        flags.push(format!("{} exponents above the overflow threshold", e.overflow_count));
    }
    let nu0 = naive_variance_nu0(&k);
    if e.value < nu0 - 2.0 * e.stderr - 1e-6 {
        flags.push(format!("nu_eff^2 = {} below nu_0^2 = {nu0}", e.value));
    }
    Ok(Output {
        records: vec![cx.record("nu_eff_squared", e.estimate()), cx.record("nu_eff_squared_2m", Estimate { value: e.value_2m, stderr: e.stderr_2m, n: e.n_outer })],
        report: json!({ "nu_eff": e, "nu0_squared": nu0 }),
        flags,
        artifacts: vec![],
    })
}

pub fn nu_eff_white(cx: &Context) -> anyhow::Result<Output> {
    let k = cx.kernels()?;
    let s = &cx.cfg.nu_eff_white;
    let e = white_time_nu_eff(&k, cx.cfg.lambda, s.n_paths, s.horizon, cx.cfg.n_substeps, &cx.streams())?;
    let flags = if e.saturated() { vec![] } else { vec![format!("horizon {} and its double disagree", e.horizon)] };
    Ok(Output {
        records: vec![cx.record("white_nu_eff_squared", Estimate { value: e.value, stderr: e.stderr, n: e.n_paths })],
        report: json!({ "white_nu_eff": e }),
        flags,
        artifacts: vec![],
    })
}

pub fn nearby_tail(cx: &Context) -> anyhow::Result<Output> {
    let k = cx.kernels()?;
    let ep = cx.eigenpair(&k, cx.cfg.lambda)?;
    let chain = cx.chain(&ep)?;
    let s = &cx.cfg.nearby_tail;
    let samples = sample_nearby_times(&chain, s.samples, s.horizon, &cx.streams())?;
    let report = nearby_tail_report(&samples)?;
    let mut flags = Vec::new();
    if report.fit.rate <= 0.0 {
        flags.push("nearby-time tail does not decay".into());
    }
    if report.split_discrepancy > 0.3 {
        flags.push(format!("split-half rates differ by {:.0}%", 100.0 * report.split_discrepancy));
    }
    #[derive(Serialize)]
    struct Row {
        ell: f64,
        horizon: f64,
    }
    let rows: Vec<Row> = samples.iter().map(|s| Row { ell: s.ell, horizon: s.horizon }).collect();
    let mut artifacts = Vec::new();
    cx.csv("nearby_times.csv", &rows, &mut artifacts)?;
    Ok(Output {
        records: vec![cx.record("nearby_time_mean", report.mean), cx.record("tail_rate", Estimate { value: report.fit.rate, stderr: f64::NAN, n: samples.len() })],
        report: json!({ "tail": report }),
        flags,
        artifacts,
    })
}

pub fn mean_check(cx: &Context) -> anyhow::Result<Output> {
    let k = cx.kernels()?;
    let ep = cx.eigenpair(&k, cx.cfg.lambda)?;
    let chain = cx.chain(&ep)?;
    let a = cx.a_eff(&chain)?;
    let s = &cx.cfg.mean_check;
    let x = s.x.clone().unwrap_or_else(|| vec![0.0; cx.cfg.dimension]);
    let r = homogenized_mean_check(&chain, &a, &s.u0, s.eps, s.t, &x, s.n_paths, s.pde_grid, &cx.streams())?;
    let flags = if r.pass { vec![] } else { vec![format!("annealed mean and effective equation differ by {:.2}%", 100.0 * r.relative_gap)] };
    Ok(Output {
        records: vec![cx.record("annealed_mean", Estimate { value: r.annealed.value, stderr: r.annealed.stderr, n: r.annealed.n_paths }), cx.record("effective_mean", r.pde)],
        report: json!({ "mean_check": r, "a_eff": a }),
        flags,
        artifacts: vec![],
    })
}

pub fn ew_experiment(cx: &Context) -> anyhow::Result<Output> {
    let k = cx.kernels()?;
    let ep = cx.eigenpair(&k, cx.cfg.lambda)?;
    let chain = cx.chain(&ep)?;
    let a = cx.a_eff(&chain)?;
    let nu = cx.nu_eff(&chain)?;
    let (fit, _) = cx.zeta_fit(&k, &ep)?;
    let s = &cx.cfg.ew_experiment;
    let fcfg = FluctuationConfig {
        lambda: cx.cfg.lambda,
        eps: s.eps,
        t: s.t,
        n_realizations: s.n_realizations,
        n_walkers: s.n_walkers,
        quad_nodes: s.quad_nodes,
        quad_half_width: s.quad_half_width,
        dt: s.dt,
        dx: s.dx,
        u0: s.u0.clone(),
        g: s.g.clone(),
        pde_grid: s.pde_grid,
        n_time_nodes: s.n_time_nodes,
    };
    let inputs = FluctuationInputs { a_eff: a.matrix.clone(), nu_eff2: nu.estimate(), c1: fit.c1_fit.value, c2: fit.c2_fit.value };
    let r = fluctuation_experiment(&k.mollifiers, &fcfg, &inputs, &cx.streams())?;
    let mut flags = Vec::new();
    if r.inconclusive {
        flags.push("walker noise is at least half of the total variance".into());
    }
    if r.normality_p_value <= 0.01 {
        flags.push(format!("normality rejected, p = {:.4}", r.normality_p_value));
    }
    if r.max_exit_fraction > EXIT_WARNING {
        flags.push(format!("{:.2}% of walkers left the field box", 100.0 * r.max_exit_fraction));
    }
    if !nu.saturated() {
        flags.push("nu_eff^2 not saturated in M".into());
    }
    let mut artifacts = Vec::new();
    cx.csv("xi.csv", &r.records, &mut artifacts)?;
    Ok(Output {
        records: vec![
            cx.record("xi_variance", Estimate { value: r.xi_variance, stderr: f64::NAN, n: r.records.len() }),
            cx.record("ew_target", Estimate::exact(r.target)),
        ],
        report: json!({ "experiment": r }),
        flags,
        artifacts,
    })
}

/// Paths for the white-time baseline; at lambda = 0 no path is simulated.
const SELFTEST_WHITE_PATHS: usize = 400_000;

/// The lambda = 0 baselines, whatever lambda the configuration carries.
pub fn selftest(cx: &Context) -> anyhow::Result<Output> {
    let k = cx.kernels()?;
    let ep = cx.eigenpair(&k, 0.0)?;
    let chain = TiltedChain::new(&ep, None)?;
    let streams = cx.streams();
    let mut rng = streams.stream(Tag::Validation, 0);
    let mut checks = Vec::new();
    let mut check = |name: &str, ok: bool, detail: String| checks.push(json!({ "check": name, "pass": ok, "detail": detail }));

    check("rho", (ep.rho - 1.0).abs() <= 1e-10, format!("rho = {}", ep.rho));
    let fresh: Vec<f64> = (0..100).map(|_| ep.evaluate(&chain.draw_pi(&mut rng))).collect();
    let psi_ok = ep.psi_values.iter().chain(&fresh).all(|v| (v - 1.0).abs() <= 1e-10);
    check("psi", psi_ok, "anchor and fresh evaluations".into());
    let pk = PathKernel::new(&k, 0.0, cx.cfg.n_substeps);
    let zeta_ok = [1.0, 2.0, 5.5].iter().all(|&t| estimate_zeta(&pk, t, 100, &streams).value == 0.0);
    check("zeta", zeta_ok, "zeta_T = 0 for T = 1, 2, 5.5".into());
    let nu = estimate_nu_eff(&chain, cx.cfg.nu_eff.m, 100, 1, &streams)?;
    check("nu_eff", (nu.value - 1.0).abs() <= 0.02, format!("nu_eff^2 = {}", nu.value));
    let white = white_time_nu_eff(&k, 0.0, SELFTEST_WHITE_PATHS, cx.cfg.nu_eff_white.horizon, cx.cfg.n_substeps, &streams)?;
    check("nu_eff_white", (white.value - 1.0).abs() <= 0.02, format!("{} +- {}", white.value, white.stderr));
    let (a, _) = estimate_a_eff(&chain, cx.cfg.diffusivity.blocks, &streams)?;
    let d = cx.cfg.dimension;
    let worst = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| (a.matrix[i][j] - f64::from(u8::from(i == j))).abs() / a.stderr[i][j])
        .fold(0.0, f64::max);
    check("a_eff", worst <= 3.0, format!("largest deviation from the identity {worst:.2} sigma"));

    let flags = checks.iter().filter(|c| c["pass"] == false).map(|c| format!("selftest {} failed: {}", c["check"], c["detail"])).collect();
    Ok(Output {
        records: vec![cx.record("selftest_nu_eff_white", Estimate { value: white.value, stderr: white.stderr, n: white.n_paths }), cx.record("selftest_a_eff_scalar", a.scalar())],
        report: json!({ "checks": checks }),
        flags,
        artifacts: vec![],
    })
}
