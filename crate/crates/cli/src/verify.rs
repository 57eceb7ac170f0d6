//! Invariant suites run by `verify`, one record per measured quantity.

use anyhow::Result;
use num_complex::Complex64;
use rmldp_core::cumulant::{build_model, CumulantModel};
use rmldp_core::ensemble::MatrixEnsemble;
use rmldp_core::montecarlo::{cocycle_defect, exhaustive, exhaustive_tilted, Functional, TiltedKernel, ENUMERATION_GUARD};
use rmldp_core::projective::SphereDirection;
use rmldp_core::smoothing::{build_kernel, envelopes, linspace, verify_sandwich, KernelGrid, Psi};
use rmldp_core::spectral::{build_grid, cross_check_rs, default_chart};
use rmldp_core::Error;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::pipeline::{spectral_stage, SpectralStage};

#[derive(Debug, Clone, Serialize)]
pub struct InvariantResult {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    /// Set when the invariant does not apply (e.g. zero variance).
    pub skipped: Option<String>,
}

impl InvariantResult {
    fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, pass: value <= threshold, skipped: None }
    }

    fn skip(name: impl Into<String>, why: impl Into<String>) -> Self {
        Self { name: name.into(), value: f64::NAN, threshold: f64::NAN, pass: true, skipped: Some(why.into()) }
    }
}

pub struct VerifyOptions {
    /// Include the smoothing-kernel suite (a few seconds).
    pub smoothing: bool,
    pub workers: usize,
}

pub fn run_suite(cfg: &ExperimentConfig, e: &MatrixEnsemble, opts: &VerifyOptions) -> Result<Vec<InvariantResult>> {
    let mut out = Vec::new();
    let st = spectral_stage(cfg, e)?;
    spectral_suite(e, &st, &mut out)?;
    let mut mopts = cfg.model_options();
    mopts.workers = opts.workers;
    match build_model(&st.problem, &mopts) {
        Ok(model) => cumulant_suite(cfg, &model, &mut out),
        Err(err) => out.push(InvariantResult::skip("cumulant_model", err.to_string())),
    }
    measure_suite(e, &st, &mut out)?;
    if opts.smoothing {
        smoothing_suite(&mut out)?;
    }
    Ok(out)
}

pub fn spectral_suite(e: &MatrixEnsemble, st: &SpectralStage, out: &mut Vec<InvariantResult>) -> Result<()> {
    let scalar = e.dim() == 1;
    for sol in &st.solutions {
        let s = sol.s;
        out.push(InvariantResult::at_most(format!("eigen_residual[s={s}]"), sol.residual, 1e-8));
        if scalar {
            out.push(InvariantResult::skip(format!("cross_check_rs[s={s}]"), "d = 1"));
        } else {
            out.push(InvariantResult::at_most(format!("cross_check_rs[s={s}]"), cross_check_rs(sol), 5e-3));
        }
        let q = {
            let h = 1e-4;
            (st.problem.kappa(s + h)?.ln() - st.problem.kappa(s - h)?.ln()) / (2.0 * h)
        };
        let tol = if scalar { 1e-6 } else { 5e-4 };
        for z in [-0.1, -0.05, 0.05, 0.1] {
            let lam = st.problem.dominant_eigenvalue(sol, Complex64::new(z, 0.0), q)?;
            let want = (-q * z).exp() * st.problem.kappa(s + z)? / sol.kappa;
            out.push(InvariantResult::at_most(format!("lambda_identity[s={s},z={z}]"), (lam.lambda_sz - want).norm(), tol));
        }
        let k = TiltedKernel::new(e, sol)?;
        out.push(InvariantResult::at_most(format!("tilted_stochasticity[s={s}]"), k.node_stochasticity()?, 1e-10));
    }
    Ok(())
}

pub fn cumulant_suite(cfg: &ExperimentConfig, m: &CumulantModel, out: &mut Vec<InvariantResult>) {
    match m.legendre(m.q(0.0)) {
        Ok(v) => out.push(InvariantResult::at_most("rate_at_lyapunov", v.abs(), 1e-9)),
        // flat Λ has no Newton root; the sup form is still defined
        Err(_) => out.push(InvariantResult::at_most("rate_at_lyapunov[sup]", m.legendre_sup(m.q(0.0)).abs(), 1e-9)),
    }
    for &s in &cfg.s_values {
        let delta = m.default_delta(s);
        for frac in [-0.5, -0.1, 0.1, 0.5] {
            let l = frac * delta;
            match m.h_s(s, l, Some(delta)) {
                Ok(h) => out.push(InvariantResult::at_most(format!("h_two_route[s={s},l={l:.3e}]"), (h.series - h.direct).abs(), h.tolerance)),
                Err(Error::DegenerateVariance(v)) => {
                    out.push(InvariantResult::skip(format!("h_two_route[s={s}]"), format!("variance {v:e}")));
                    break;
                }
                Err(err) => out.push(InvariantResult { pass: false, ..InvariantResult::skip(format!("h_two_route[s={s},l={l:.3e}]"), err.to_string()) }),
            }
            if let Ok(sp) = m.saddle(s, l, Some(delta)) {
                out.push(InvariantResult::at_most(format!("saddle_residual[s={s},l={l:.3e}]"), sp.residual, 1e-12));
                out.push(InvariantResult::at_most(format!("saddle_postcondition[s={s},l={l:.3e}]"), sp.postcondition_gap, 1e-9));
            }
        }
    }
}

pub fn measure_suite(e: &MatrixEnsemble, st: &SpectralStage, out: &mut Vec<InvariantResult>) -> Result<()> {
    let x = SphereDirection::new(vec![1.0; e.dim()], default_chart(e))?;
    for sol in &st.solutions {
        let k = TiltedKernel::new(e, sol)?;
        let s = sol.s;
        let mut worst = 0.0f64;
        for n in 1..=8usize {
            if (e.len() as f64).powi(n as i32) > ENUMERATION_GUARD as f64 {
                break;
            }
            for f in [Functional::UpperTail { level: 0.3 * n as f64 }, Functional::Window { lo: 0.0, hi: 0.5 * n as f64 }] {
                let a = exhaustive(e, &x, n, &f)?;
                let b = exhaustive_tilted(&k, &x, n, &f)?;
                worst = worst.max((a.value - b.value).abs());
            }
        }
        out.push(InvariantResult::at_most(format!("enumeration_identity[s={s}]"), worst, 1e-12));
        out.push(InvariantResult::at_most(format!("cocycle_identity[s={s}]"), cocycle_defect(&k, 100, 1)?, 1e-12));
    }
    Ok(())
}

pub fn smoothing_suite(out: &mut Vec<InvariantResult>) -> Result<()> {
    let grid = linspace(-5.0, 20.0, 1001);
    let mut prev_c = f64::INFINITY;
    for eps in [0.2, 0.1, 0.05] {
        let k = build_kernel(eps, &KernelGrid::default())?;
        out.push(InvariantResult::at_most(format!("kernel_mass[eps={eps}]"), (k.normalization - 1.0).abs(), 1e-6));
        let neg = k.rho_values.iter().fold(0.0f64, |a, &r| a.max(-r));
        out.push(InvariantResult::at_most(format!("kernel_negativity[eps={eps}]"), neg, 0.0));
        let leak = [1.0, 1.5, 3.0].iter().map(|t| k.transform_from_samples(t / (eps * eps)).abs()).fold(0.0f64, f64::max);
        out.push(InvariantResult::at_most(format!("kernel_support_leak[eps={eps}]"), leak, 1e-10));
        for (tag, psi, s) in [("upper", Psi::upper_tail(), 1.0), ("window", Psi::window(0.0, 1.0), 1.0), ("lower", Psi::lower_tail(), -0.5)] {
            let env = envelopes(&psi, s, eps, &grid);
            let rep = verify_sandwich(&env, &k, 0);
            out.push(InvariantResult::at_most(format!("sandwich_violation[{tag},eps={eps}]"), rep.max_violation, 1e-8));
        }
        out.push(InvariantResult {
            name: format!("c_rho_decreasing[eps={eps}]"),
            value: k.c_rho_eps,
            threshold: prev_c,
            pass: k.c_rho_eps < prev_c,
            skipped: None,
        });
        prev_c = k.c_rho_eps;
    }
    Ok(())
}

/// Grid sanity used by `verify --dry-run`: the config's grid can be built.
pub fn grid_ok(cfg: &ExperimentConfig, e: &MatrixEnsemble) -> Result<()> {
    build_grid(e.dim(), default_chart(e), cfg.resolution)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rmldp_core::ensemble::MatrixEnsemble;

    #[test]
    fn scalar_suite_passes_without_smoothing() {
        let cfg = ExperimentConfig::from_json(
            r#"{"name":"t","ensemble":"e.json","s_values":[1.0],"n_values":[10],"targets":[{"kind":"upper_tail"}],"resolution":16}"#,
        )
        .unwrap();
        let e = MatrixEnsemble::scalar(&[1f64.exp(), 0.25, 1.5], &[0.2, 0.5, 0.3]).unwrap();
        let res = run_suite(&cfg, &e, &VerifyOptions { smoothing: false, workers: 1 }).unwrap();
        assert!(res.iter().all(|r| r.pass), "{res:?}");
        assert!(res.iter().any(|r| r.name == "rate_at_lyapunov" && r.skipped.is_none()));
        assert!(res.iter().any(|r| r.name.starts_with("cross_check_rs") && r.skipped.is_some()));
        assert!(!res.iter().any(|r| r.name.starts_with("kernel_")));
    }
}
