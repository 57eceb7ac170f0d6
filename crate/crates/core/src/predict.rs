//! Closed-form asymptotic predictors for tail, target, lower-tail and
//! local-limit probabilities, each carrying its factor breakdown.
//!
//! Every predictor is the target form
//! `r̄_s(x) · exp(−nΛ*(q+l)) / (σ_s √(2πn)) · ν_s(φ) · ∫e^{−sy}ψ(y)dy`
//! with a particular `(φ, ψ)`, so the specializations agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::cumulant::CumulantModel;
use crate::montecarlo::Phi;
use crate::numeric::fmt_f64;
use crate::projective::SphereDirection;
use crate::smoothing::Psi;
use crate::spectral::SpectralSolution;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    UpperTail,
    Target,
    LowerTail,
    LocalLimit,
}

impl Predictor {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::UpperTail => "upper_tail",
            Predictor::Target => "target",
            Predictor::LowerTail => "lower_tail",
            Predictor::LocalLimit => "local_limit",
        }
    }
}

/// Natural logarithms of the factors; the prediction is their product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    /// `ln r̄_s(x)`.
    pub rbar: f64,
    /// `−nΛ*(q+l)`.
    pub rate: f64,
    /// `−ln(σ_s √(2πn))`.
    pub gauss: f64,
    /// `ln |ν_s(φ)|`.
    pub nu_phi: f64,
    /// `ln |∫e^{−sy}ψ(y)dy|`.
    pub psi_integral: f64,
}

impl Factors {
    pub fn log_product(&self) -> f64 {
        self.rbar + self.rate + self.gauss + self.nu_phi + self.psi_integral
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub predictor: Predictor,
    pub s: f64,
    pub n: usize,
    pub l: f64,
    /// Window start and width for the local-limit form.
    pub a: Option<f64>,
    pub delta: Option<f64>,
    pub value: f64,
    pub log_value: f64,
    /// Sign of `ν_s(φ) ∫e^{−sy}ψ`.
    pub sign: f64,
    pub factors: Factors,
    /// `Λ*(q+l)`.
    pub rate_function: f64,
    pub sigma_s: f64,
}

impl Prediction {
    /// `|ln value − Σ ln factors|`.
    pub fn recombination_error(&self) -> f64 {
        (self.log_value - self.factors.log_product()).abs()
    }

    /// Natural-scale factors in the order rbar, rate, gauss, nu_phi, psi_integral.
    pub fn natural_factors(&self) -> [f64; 5] {
        let f = &self.factors;
        [f.rbar.exp(), f.rate.exp(), f.gauss.exp(), f.nu_phi.exp(), f.psi_integral.exp()]
    }
}

fn nu_of_phi(sol: &SpectralSolution, phi: &Phi) -> Result<f64> {
    match phi {
        // ν_s is a probability measure
        Phi::Constant(c) => Ok(*c),
        Phi::Nodes { grid, values } => {
            if values.len() != sol.nu_s.len() || grid.nodes != sol.grid.nodes {
                return Err(Error::OutOfDomain("φ must be given on the spectral grid".into()));
            }
            Ok(sol.nu_of(values))
        }
    }
}

fn check_model(sol: &SpectralSolution, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::OutOfDomain("n must be positive".into()));
    }
    if !sol.s.is_finite() {
        return Err(Error::OutOfDomain("spectral solution has non-finite s".into()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    predictor: Predictor,
    sol: &SpectralSolution,
    model: &CumulantModel,
    x: &SphereDirection,
    n: usize,
    l: f64,
    nu: f64,
    psi_int: f64,
    window: Option<(f64, f64)>,
) -> Result<Prediction> {
    check_model(sol, n)?;
    let s = sol.s;
    let rp = model.rate_point(s)?;
    let rate_function = model.shifted_rate(s, l)?;
    let rbar = sol.r_at(x.coords()).ln() - sol.nu_of(&sol.r_s).ln();
    let nn = n as f64;
    let factors = Factors {
        rbar,
        rate: -nn * rate_function,
        gauss: -(rp.sigma_s * (2.0 * std::f64::consts::PI * nn).sqrt()).ln(),
        nu_phi: nu.abs().ln(),
        psi_integral: psi_int.abs().ln(),
    };
    let sign = (nu * psi_int).signum();
    let log_value = factors.log_product();
    Ok(Prediction {
        predictor,
        s,
        n,
        l,
        a: window.map(|w| w.0),
        delta: window.map(|w| w.1),
        value: sign * log_value.exp(),
        log_value,
        sign,
        factors,
        rate_function,
        sigma_s: rp.sigma_s,
    })
}

/// `E[φ(X_n) ψ(log|G_n x| − n(q+l))]`.
pub fn target_pred(
    sol: &SpectralSolution,
    model: &CumulantModel,
    x: &SphereDirection,
    n: usize,
    l: f64,
    phi: &Phi,
    psi: &Psi,
) -> Result<Prediction> {
    let nu = nu_of_phi(sol, phi)?;
    let integral = psi.weighted_integral(sol.s)?;
    assemble(Predictor::Target, sol, model, x, n, l, nu, integral, None)
}

/// `P(log|G_n x| ≥ n(q+l))` for `s > 0`.
pub fn upper_tail_pred(sol: &SpectralSolution, model: &CumulantModel, x: &SphereDirection, n: usize, l: f64) -> Result<Prediction> {
    if sol.s <= 0.0 {
        return Err(Error::OutOfDomain(format!("upper tail needs s > 0 (got {}); use lower_tail_pred", sol.s)));
    }
    let mut p = target_pred(sol, model, x, n, l, &Phi::Constant(1.0), &Psi::upper_tail())?;
    p.predictor = Predictor::UpperTail;
    Ok(p)
}

/// `P(log|G_n x| ≤ n(q+l))` for `s < 0`.
pub fn lower_tail_pred(sol: &SpectralSolution, model: &CumulantModel, x: &SphereDirection, n: usize, l: f64) -> Result<Prediction> {
    if sol.s >= 0.0 {
        return Err(Error::OutOfDomain(format!("lower tail needs s < 0 (got {})", sol.s)));
    }
    let mut p = target_pred(sol, model, x, n, l, &Phi::Constant(1.0), &Psi::lower_tail())?;
    p.predictor = Predictor::LowerTail;
    Ok(p)
}

/// `P(log|G_n x| − n(q+l) ∈ [a, a+Δ))`.
#[allow(clippy::too_many_arguments)]
pub fn llt_pred(
    sol: &SpectralSolution,
    model: &CumulantModel,
    x: &SphereDirection,
    n: usize,
    l: f64,
    a: f64,
    delta: f64,
) -> Result<Prediction> {
    if !(delta > 0.0) {
        return Err(Error::OutOfDomain(format!("window width must be positive (got {delta})")));
    }
    let psi = Psi::window(a, delta);
    let integral = psi.weighted_integral(sol.s)?;
    assemble(Predictor::LocalLimit, sol, model, x, n, l, 1.0, integral, Some((a, delta)))
}

/// `−Λ*(Λ'(s))`, the exponential rate of the norm and vector tails.
pub fn ldp_rate_pred(model: &CumulantModel, s: f64) -> Result<f64> {
    let q = model.q(s);
    Ok(-(s * q - model.lambda(s)))
}

pub const CSV_HEADER: &str =
    "theorem,s,n,l,x_id,value,log_value,factor_rbar,factor_rate,factor_gauss,factor_nu_phi,factor_psi_integral,log_factor_rate\n";

pub fn csv_row(p: &Prediction, x_id: &str) -> String {
    let f = p.natural_factors();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        p.predictor.name(),
        fmt_f64(p.s),
        p.n,
        fmt_f64(p.l),
        x_id,
        fmt_f64(p.value),
        fmt_f64(p.log_value),
        fmt_f64(f[0]),
        fmt_f64(f[1]),
        fmt_f64(f[2]),
        fmt_f64(f[3]),
        fmt_f64(f[4]),
        fmt_f64(p.factors.rate)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cumulant::{build_model, ModelOptions};
    use crate::ensemble::{MatrixEnsemble, MatrixKind};
    use crate::numeric::CompositeGauss;
    use crate::spectral::{build_grid, default_chart, SpectralProblem};
    use nalgebra::DMatrix;

    struct Setup {
        sol: SpectralSolution,
        model: CumulantModel,
        x: SphereDirection,
    }

    fn setup(e: &MatrixEnsemble, s: f64, res: usize) -> Setup {
        let grid = build_grid(e.dim(), default_chart(e), res).unwrap();
        let problem = SpectralProblem::new(e, &grid).unwrap();
        let sol = problem.solve(s).unwrap();
        let model = build_model(&problem, &ModelOptions::default()).unwrap();
        let x = SphereDirection::new(vec![1.0; e.dim()], default_chart(e)).unwrap();
        Setup { sol, model, x }
    }

    fn scalar() -> MatrixEnsemble {
        MatrixEnsemble::scalar(&[1f64.exp(), (-(2f64.sqrt())).exp()], &[0.5, 0.5]).unwrap()
    }

    fn positive2() -> MatrixEnsemble {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 1.5, 2.0]);
        MatrixEnsemble::new(MatrixKind::Positive, vec![a, b], vec![0.5, 0.5]).unwrap()
    }

    /// Classical scalar form with closed-form Λ.
    fn scalar_oracle(s: f64, n: usize, tail_sign: f64) -> f64 {
        let (a, b) = (1.0f64, -(2f64.sqrt()));
        let (ea, eb) = ((s * a).exp(), (s * b).exp());
        let q = (a * ea + b * eb) / (ea + eb);
        let m2 = (a * a * ea + b * b * eb) / (ea + eb);
        let sigma = (m2 - q * q).sqrt();
        let rate = s * q - (0.5 * (ea + eb)).ln();
        (-(n as f64) * rate).exp() / (tail_sign * s * sigma * (2.0 * std::f64::consts::PI * n as f64).sqrt())
    }

    #[test]
    fn scalar_upper_tail_is_classical_form() {
        let st = setup(&scalar(), 1.0, 64);
        let p = upper_tail_pred(&st.sol, &st.model, &st.x, 100, 0.0).unwrap();
        assert_eq!(p.factors.rbar, 0.0);
        let want = scalar_oracle(1.0, 100, 1.0);
        assert!((p.value / want - 1.0).abs() < 1e-8, "{} vs {want}", p.value);
        assert!(p.recombination_error() <= 1e-12);
    }

    #[test]
    fn scalar_lower_tail_is_classical_form() {
        let st = setup(&scalar(), -0.3, 64);
        let p = lower_tail_pred(&st.sol, &st.model, &st.x, 200, 0.0).unwrap();
        assert!(p.value > 0.0);
        let want = scalar_oracle(-0.3, 200, -1.0);
        assert!((p.value / want - 1.0).abs() < 1e-8, "{} vs {want}", p.value);
        assert!(upper_tail_pred(&st.sol, &st.model, &st.x, 200, 0.0).is_err());
    }

    #[test]
    fn specializations_are_bitwise() {
        let st = setup(&positive2(), 1.0, 256);
        let (n, l) = (100, 2e-4);
        let up = upper_tail_pred(&st.sol, &st.model, &st.x, n, l).unwrap();
        let tg = target_pred(&st.sol, &st.model, &st.x, n, l, &Phi::Constant(1.0), &Psi::upper_tail()).unwrap();
        assert_eq!(up.value, tg.value);
        assert_eq!(up.factors, tg.factors);
        let llt = llt_pred(&st.sol, &st.model, &st.x, n, l, 0.3, 0.7).unwrap();
        let tw = target_pred(&st.sol, &st.model, &st.x, n, l, &Phi::Constant(1.0), &Psi::window(0.3, 0.7)).unwrap();
        assert_eq!(llt.value, tw.value);
        assert!(up.value.is_finite() && up.value > 0.0);
        assert!(up.recombination_error() <= 1e-12);
    }

    #[test]
    fn llt_additivity_and_limit() {
        let st = setup(&scalar(), 1.0, 64);
        let n = 400;
        let p = |a: f64, d: f64| llt_pred(&st.sol, &st.model, &st.x, n, 0.0, a, d).unwrap().value;
        let lhs = p(0.2, 0.5) + p(0.7, 1.3);
        let rhs = p(0.2, 1.8);
        // exp of a log near −170 costs ~170 ulp; the window factors themselves add to a few ulp
        assert!((lhs - rhs).abs() <= 1e-13 * rhs, "{lhs} {rhs}");
        let w = |a: f64, d: f64| Psi::window(a, d).weighted_integral(1.0).unwrap();
        assert!((w(0.2, 0.5) + w(0.7, 1.3) - w(0.2, 1.8)).abs() <= 4.0 * f64::EPSILON);
        // Δ → ∞ at a = 0 recovers the tail
        let tail = upper_tail_pred(&st.sol, &st.model, &st.x, n, 0.0).unwrap().value;
        assert!((p(0.0, 60.0) / tail - 1.0).abs() < 1e-15);
        assert!(llt_pred(&st.sol, &st.model, &st.x, n, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn target_with_table_psi() {
        let st = setup(&scalar(), 1.0, 64);
        let ys: Vec<f64> = (0..=200).map(|k| k as f64 * 0.02).collect();
        let vs: Vec<f64> = ys.iter().map(|y| (1.0 + y).recip()).collect();
        let psi = Psi::Table { y: ys, v: vs };
        let p = target_pred(&st.sol, &st.model, &st.x, 100, 0.0, &Phi::Constant(2.0), &psi).unwrap();
        let tail = upper_tail_pred(&st.sol, &st.model, &st.x, 100, 0.0).unwrap();
        // oracle: the piecewise-linear ψ integrated on a much finer rule
        let rule = CompositeGauss::new(8);
        let integral = rule.integrate(0.0, 4.0, 4000, |y| (-y).exp() * psi.eval(y));
        // at s = 1 the tail carries ∫e^{-y}𝟙 = 1
        let want = tail.value * 2.0 * integral;
        assert!((p.value / want - 1.0).abs() < 1e-10);
    }

    #[test]
    fn target_with_node_phi() {
        let st = setup(&positive2(), 1.0, 128);
        let phi = Phi::Nodes { grid: st.sol.grid.clone(), values: st.sol.r_s.clone() };
        let p = target_pred(&st.sol, &st.model, &st.x, 50, 0.0, &phi, &Psi::upper_tail()).unwrap();
        let want = st.sol.nu_of(&st.sol.r_s);
        assert!((p.factors.nu_phi - want.ln()).abs() < 1e-15);
        let other = build_grid(2, default_chart(&positive2()), 64).unwrap();
        let bad = Phi::Nodes { grid: other, values: vec![1.0; 64] };
        assert!(target_pred(&st.sol, &st.model, &st.x, 50, 0.0, &bad, &Psi::upper_tail()).is_err());
    }

    #[test]
    fn slope_in_l_is_minus_s_n() {
        let st = setup(&scalar(), 1.0, 64);
        for n in [100usize, 400, 1600] {
            let h = 1e-5;
            let lp = |l: f64| upper_tail_pred(&st.sol, &st.model, &st.x, n, l).unwrap().log_value;
            let slope = (lp(h) - lp(-h)) / (2.0 * h);
            assert!((slope + n as f64).abs() < (n as f64).sqrt(), "n={n}: {slope}");
        }
    }

    #[test]
    fn ldp_rate() {
        let st = setup(&scalar(), 1.0, 64);
        assert!(ldp_rate_pred(&st.model, 0.0).unwrap().abs() < 1e-12);
        let p = upper_tail_pred(&st.sol, &st.model, &st.x, 100, 0.0).unwrap();
        let r = ldp_rate_pred(&st.model, 1.0).unwrap();
        assert!((p.factors.rate / 100.0 - r).abs() < 1e-12);
    }

    #[test]
    fn csv_columns() {
        let st = setup(&scalar(), 1.0, 64);
        let p = upper_tail_pred(&st.sol, &st.model, &st.x, 5000, 0.0).unwrap();
        let row = csv_row(&p, "e1");
        assert_eq!(row.trim_end().split(',').count(), CSV_HEADER.trim_end().split(',').count());
        // underflowed natural value still has a finite log
        assert!(p.log_value.is_finite());
    }
}
