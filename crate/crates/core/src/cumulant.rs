//! `Λ = log κ` on an interval, its Legendre transform, the Cramér series,
//! `h_s(l)` and the saddle point of `K_s(z) = −qz + Λ(s+z) − Λ(s)`.

use serde::{Deserialize, Serialize};

use crate::numeric::{fmt_f64, golden_max, ChebSeries};
use crate::spectral::SpectralProblem;
use crate::{par, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub s_min: f64,
    pub s_max: f64,
    pub n_cheb: usize,
    /// Largest admissible `|s_min|` for negative `s`.
    pub eta0: f64,
    pub workers: usize,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self { s_min: -0.5, s_max: 3.0, n_cheb: 33, eta0: 0.5, workers: 0 }
    }
}

/// `Λ″` at or below this is treated as zero variance.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Highest derivative of Λ kept by the model.
pub const MAX_DERIVATIVE: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CumulantModel {
    pub s_min: f64,
    pub s_max: f64,
    pub s_grid: Vec<f64>,
    pub kappa_values: Vec<f64>,
    /// `series[k]` interpolates `Λ^{(k)}`.
    series: Vec<ChebSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulantDocument {
    pub s_grid: Vec<f64>,
    pub kappa_values: Vec<f64>,
    pub range: [f64; 2],
}

/// Λ from the spectral solver at Chebyshev–Lobatto nodes.
pub fn build_model(problem: &SpectralProblem, opts: &ModelOptions) -> Result<CumulantModel> {
    check_range(opts)?;
    let nodes = ChebSeries::lobatto_points(opts.s_min, opts.s_max, opts.n_cheb);
    let kappas = par::map_indexed(nodes.len(), opts.workers, |k| problem.kappa(nodes[k]));
    let kappas = kappas.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(CumulantModel::from_values(opts.s_min, opts.s_max, nodes, kappas))
}

fn check_range(opts: &ModelOptions) -> Result<()> {
    if opts.s_min < -opts.eta0 {
        return Err(Error::OutOfDomain(format!(
            "s_min = {} is below the admissible negative limit -{}",
            opts.s_min, opts.eta0
        )));
    }
    if !(opts.s_max > opts.s_min) || opts.n_cheb < 3 {
        return Err(Error::OutOfDomain("empty s-range or fewer than 3 Chebyshev nodes".into()));
    }
    Ok(())
}

impl CumulantModel {
    /// Model from any κ evaluator, e.g. a closed form.
    pub fn from_kappa_fn<F: Fn(f64) -> f64>(opts: &ModelOptions, kappa: F) -> Result<Self> {
        check_range(opts)?;
        let nodes = ChebSeries::lobatto_points(opts.s_min, opts.s_max, opts.n_cheb);
        let kappas = nodes.iter().map(|&s| kappa(s)).collect();
        Ok(Self::from_values(opts.s_min, opts.s_max, nodes, kappas))
    }

    fn from_values(s_min: f64, s_max: f64, s_grid: Vec<f64>, kappa_values: Vec<f64>) -> Self {
        let logs: Vec<f64> = kappa_values.iter().map(|k| k.ln()).collect();
        let mut series = vec![ChebSeries::fit_lobatto(s_min, s_max, &logs)];
        for k in 0..MAX_DERIVATIVE {
            let d = series[k].derivative();
            series.push(d);
        }
        Self { s_min, s_max, s_grid, kappa_values, series }
    }

    pub fn range(&self) -> (f64, f64) {
        (self.s_min, self.s_max)
    }

    /// `Λ^{(k)}(s)`, `k ≤ 5`.
    pub fn derivative(&self, k: usize, s: f64) -> f64 {
        self.series[k].eval(s)
    }

    pub fn lambda(&self, s: f64) -> f64 {
        self.derivative(0, s)
    }

    pub fn q(&self, s: f64) -> f64 {
        self.derivative(1, s)
    }

    pub fn sigma2(&self, s: f64) -> f64 {
        self.derivative(2, s)
    }

    fn check_interior(&self, s: f64) -> Result<()> {
        if !(s > self.s_min && s < self.s_max) {
            return Err(Error::OutOfDomain(format!(
                "s = {s} is not interior to [{}, {}]",
                self.s_min, self.s_max
            )));
        }
        Ok(())
    }

    /// Default expansion radius `0.25 σ_s² · dist(s, range edge)`.
    pub fn default_delta(&self, s: f64) -> f64 {
        0.25 * self.sigma2(s) * (s - self.s_min).min(self.s_max - s)
    }

    /// Solves `Λ′(t) = target` for `t` in the model range (safeguarded Newton).
    pub fn invert_derivative(&self, target: f64, guess: f64) -> Result<f64> {
        let (mut lo, mut hi) = (self.s_min, self.s_max);
        let f = |t: f64| self.q(t) - target;
        if f(lo) > 0.0 || f(hi) < 0.0 {
            return Err(Error::NewtonDivergence(format!(
                "Λ′ = {target} is outside Λ′([{lo}, {hi}])"
            )));
        }
        let mut t = guess.clamp(lo, hi);
        for _ in 0..200 {
            let ft = f(t);
            if ft == 0.0 {
                return Ok(t);
            }
            if ft > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let d = self.sigma2(t);
            let mut next = if d > 0.0 { t - ft / d } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() <= 1e-15 * (1.0 + t.abs()) || hi - lo <= 1e-15 * (1.0 + t.abs()) {
                return Ok(next);
            }
            t = next;
        }
        Err(Error::NewtonDivergence(format!("no convergence for Λ′ = {target}")))
    }

    /// `Λ*(q) = sup_s {sq − Λ(s)}` through the maximizer `Λ′(s) = q`.
    pub fn legendre(&self, q: f64) -> Result<f64> {
        let t = self.invert_derivative(q, 0.5 * (self.s_min + self.s_max))?;
        Ok(t * q - self.lambda(t))
    }

    /// `sup_s {sq − Λ(s)}` by a grid scan and golden-section refinement.
    pub fn legendre_sup(&self, q: f64) -> f64 {
        let m = 2000;
        let h = (self.s_max - self.s_min) / m as f64;
        let obj = |t: f64| t * q - self.lambda(t);
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for k in 0..=m {
            let v = obj(self.s_min + k as f64 * h);
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        let lo = self.s_min + (best.max(1) - 1) as f64 * h;
        let hi = (self.s_min + (best + 1) as f64 * h).min(self.s_max);
        let (_, v) = golden_max(lo, hi, 1e-12, obj);
        v.max(best_v)
    }

    pub fn cramer_coeffs(&self, s: f64) -> [f64; 3] {
        let g2 = self.derivative(2, s);
        let g3 = self.derivative(3, s);
        let g4 = self.derivative(4, s);
        let g5 = self.derivative(5, s);
        cramer_from_cumulants(g2, g3, g4, g5)
    }

    /// Truncated Cramér series `ζ_s(t)` with `order` coefficients.
    pub fn cramer_series(&self, s: f64, t: f64, order: usize) -> Result<f64> {
        if order > 3 {
            return Err(Error::Unsupported(format!("Cramér series order {order} > 3")));
        }
        if !(self.sigma2(s) > 0.0) {
            return Err(Error::DegenerateVariance(self.sigma2(s)));
        }
        let c = self.cramer_coeffs(s);
        Ok(c.iter().take(order).rev().fold(0.0, |acc, &ck| acc * t + ck))
    }

    pub fn rate_point(&self, s: f64) -> Result<RatePoint> {
        self.check_interior(s)?;
        let var = self.sigma2(s);
        if !(var > VARIANCE_FLOOR) {
            return Err(Error::DegenerateVariance(var));
        }
        let q = self.q(s);
        let lambda_star = s * q - self.lambda(s);
        let sup = self.legendre_sup(q);
        Ok(RatePoint {
            s,
            q,
            lambda_star,
            sigma_s: var.sqrt(),
            cramer_coeffs: self.cramer_coeffs(s),
            sup_discrepancy: (sup - lambda_star).abs(),
        })
    }

    /// Both routes for `h_s(l)`, with `|l| ≤ δ` (default radius when `None`).
    pub fn h_s(&self, s: f64, l: f64, delta: Option<f64>) -> Result<HsValue> {
        let rp = self.rate_point(s)?;
        let delta = delta.unwrap_or_else(|| self.default_delta(s));
        if l.abs() > delta {
            return Err(Error::OutOfDomain(format!("|l| = {} exceeds δ = {delta}", l.abs())));
        }
        let sigma = rp.sigma_s;
        let series = l * l / (2.0 * sigma * sigma) - (l / sigma).powi(3) * self.cramer_series(s, l / sigma, 3)?;
        let u = if l == 0.0 {
            0.0
        } else {
            self.invert_derivative(rp.q + l, s + l / (sigma * sigma))? - s
        };
        let direct = self.tilted_gain(s, rp.q, l, u);
        Ok(HsValue { l, series, direct, tolerance: two_route_tolerance(l) })
    }

    /// `u (q + l) − (Λ(s+u) − Λ(s))`.
    fn tilted_gain(&self, s: f64, q: f64, l: f64, u: f64) -> f64 {
        if u == 0.0 {
            return 0.0;
        }
        u * (q + l) - (self.lambda(s + u) - self.lambda(s))
    }

    /// `Λ*(q+l)` written as `Λ*(q) + s l + h_s(l)` (direct route).
    pub fn shifted_rate(&self, s: f64, l: f64) -> Result<f64> {
        let rp = self.rate_point(s)?;
        if l == 0.0 {
            return Ok(rp.lambda_star);
        }
        let u = self.invert_derivative(rp.q + l, s + l / rp.sigma_s.powi(2))? - s;
        Ok(rp.lambda_star + s * l + self.tilted_gain(s, rp.q, l, u))
    }

    /// `K_s(z) = −qz + Λ(s+z) − Λ(s)`.
    pub fn k_s(&self, s: f64, z: f64) -> f64 {
        -self.q(s) * z + self.lambda(s + z) - self.lambda(s)
    }

    pub fn saddle(&self, s: f64, l: f64, delta: Option<f64>) -> Result<SaddlePoint> {
        let rp = self.rate_point(s)?;
        let delta = delta.unwrap_or_else(|| self.default_delta(s));
        if l.abs() > delta {
            return Err(Error::OutOfDomain(format!("|l| = {} exceeds δ = {delta}", l.abs())));
        }
        let q = rp.q;
        let g2 = self.derivative(2, s);
        let g3 = self.derivative(3, s);
        let mut z = l / g2 - g3 * l * l / (2.0 * g2.powi(3));
        let reach = (s - self.s_min).min(self.s_max - s);
        let mut iters = 0;
        let mut resid = (self.q(s + z) - q - l).abs();
        while resid > 1e-13 && iters < 100 {
            let d = self.sigma2(s + z);
            if !(d > 0.0) {
                return Err(Error::DegenerateVariance(d));
            }
            let step = (self.q(s + z) - q - l) / d;
            z -= step;
            iters += 1;
            if z.abs() >= reach {
                return Err(Error::OutOfDomain(format!("saddle point z = {z} leaves the model range")));
            }
            let next = (self.q(s + z) - q - l).abs();
            if step.abs() < 1e-17 || next >= resid && next < 1e-12 {
                resid = next;
                break;
            }
            resid = next;
        }
        if l == 0.0 {
            z = 0.0;
            resid = 0.0;
        }
        let h = self.h_s(s, l, Some(delta))?;
        let post = self.k_s(s, z) - z * l;
        Ok(SaddlePoint {
            l,
            z0: z,
            newton_iters: iters,
            residual: resid,
            k_minus_zl: post,
            postcondition_gap: (post + h.direct).abs(),
        })
    }

    pub fn document(&self) -> CumulantDocument {
        CumulantDocument {
            s_grid: self.s_grid.clone(),
            kappa_values: self.kappa_values.clone(),
            range: [self.s_min, self.s_max],
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.document())?)
    }

    pub fn from_document(doc: &CumulantDocument) -> Self {
        Self::from_values(doc.range[0], doc.range[1], doc.s_grid.clone(), doc.kappa_values.clone())
    }

    /// CSV of `(s, Λ, Λ′, Λ″, Λ‴, Λ*)` at the given points.
    pub fn csv_table(&self, points: &[f64]) -> String {
        let mut out = String::from("s,Lambda,dLambda,d2Lambda,d3Lambda,Lambda_star\n");
        for &s in points {
            let q = self.q(s);
            let row = [s, self.lambda(s), q, self.sigma2(s), self.derivative(3, s), s * q - self.lambda(s)];
            out.push_str(&row.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}

/// Two-route agreement tolerance for `h_s(l)`.
pub fn two_route_tolerance(l: f64) -> f64 {
    1e-8f64.max(l.powi(4))
}

pub fn cramer_from_cumulants(g2: f64, g3: f64, g4: f64, g5: f64) -> [f64; 3] {
    [
        g3 / (6.0 * g2.powf(1.5)),
        (g4 * g2 - 3.0 * g3 * g3) / (24.0 * g2.powi(3)),
        (g5 * g2 * g2 - 10.0 * g4 * g3 * g2 + 15.0 * g3.powi(3)) / (120.0 * g2.powf(4.5)),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub s: f64,
    pub q: f64,
    pub lambda_star: f64,
    pub sigma_s: f64,
    pub cramer_coeffs: [f64; 3],
    /// `|sup-form − closed-form|` of `Λ*(q)`.
    pub sup_discrepancy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsValue {
    pub l: f64,
    pub series: f64,
    pub direct: f64,
    pub tolerance: f64,
}

impl HsValue {
    pub fn agree(&self) -> bool {
        (self.series - self.direct).abs() <= self.tolerance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaddlePoint {
    pub l: f64,
    pub z0: f64,
    pub newton_iters: usize,
    /// `|K_s′(z₀) − l|`.
    pub residual: f64,
    /// `K_s(z₀) − z₀ l`.
    pub k_minus_zl: f64,
    /// `|K_s(z₀) − z₀ l + h_s(l)|` with `h_s` from the direct route.
    pub postcondition_gap: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{MatrixEnsemble, MatrixKind};
    use crate::projective::Chart;
    use crate::spectral::build_grid;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const R2: f64 = std::f64::consts::SQRT_2;

    /// Tilted cumulants of `log a` under weights `p_i a_i^s`: the exact Λ^{(k)}(s).
    fn scalar_cumulants(logs: &[f64], probs: &[f64], s: f64) -> [f64; 6] {
        let w: Vec<f64> = logs.iter().zip(probs).map(|(l, p)| p * (s * l).exp()).collect();
        let z: f64 = w.iter().sum();
        let mean: f64 = logs.iter().zip(&w).map(|(l, w)| l * w).sum::<f64>() / z;
        let mu = |k: i32| logs.iter().zip(&w).map(|(l, w)| (l - mean).powi(k) * w).sum::<f64>() / z;
        let (m2, m3, m4, m5) = (mu(2), mu(3), mu(4), mu(5));
        [z.ln(), mean, m2, m3, m4 - 3.0 * m2 * m2, m5 - 10.0 * m3 * m2]
    }

    fn scalar_problem() -> SpectralProblem {
        let e = MatrixEnsemble::scalar(&[1f64.exp(), (-R2).exp()], &[0.5, 0.5]).unwrap();
        SpectralProblem::new(&e, &build_grid(1, Chart::PositiveQuadrant, 16).unwrap()).unwrap()
    }

    fn scalar_model() -> CumulantModel {
        build_model(&scalar_problem(), &ModelOptions::default()).unwrap()
    }

    fn positive_problem() -> SpectralProblem {
        let e = MatrixEnsemble::new(
            MatrixKind::Positive,
            vec![
                DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]),
                DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]),
            ],
            vec![0.5, 0.5],
        )
        .unwrap();
        SpectralProblem::new(&e, &build_grid(2, Chart::PositiveQuadrant, 256).unwrap()).unwrap()
    }

    #[test]
    fn scalar_model_reproduces_closed_forms() {
        let m = scalar_model();
        let q1 = (1f64.exp() - R2 * (-R2).exp()) / (1f64.exp() + (-R2).exp());
        assert!((m.q(1.0) - q1).abs() < 1e-10);
        assert!((q1 - 0.80180).abs() < 1e-5);
        for s in [-0.4, -0.1, 0.0, 0.5, 1.0, 2.0, 2.9] {
            let exact = scalar_cumulants(&[1.0, -R2], &[0.5, 0.5], s);
            for k in 0..3 {
                assert!((m.derivative(k, s) - exact[k]).abs() < 1e-7, "k={k} s={s}");
            }
        }
        assert!(m.lambda(0.0).abs() < 1e-9);
    }

    #[test]
    fn identity_has_zero_lambda() {
        let e = MatrixEnsemble::new(
            MatrixKind::Positive,
            vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
            vec![0.5, 0.5],
        )
        .unwrap();
        let p = SpectralProblem::new(&e, &build_grid(2, Chart::PositiveQuadrant, 32).unwrap()).unwrap();
        let m = build_model(&p, &ModelOptions { n_cheb: 9, ..Default::default() }).unwrap();
        for s in [-0.3, 0.0, 1.0, 2.5] {
            assert!(m.lambda(s).abs() < 1e-12);
        }
        assert!(matches!(m.rate_point(1.0), Err(Error::DegenerateVariance(_))));
    }

    #[test]
    fn derivative_matches_finite_differences_of_kappa() {
        let p = positive_problem();
        let m = build_model(&p, &ModelOptions::default()).unwrap();
        let h = 1e-4;
        for k in 0..10 {
            let s = -0.4 + 0.33 * k as f64;
            let fd = (p.kappa(s + h).unwrap().ln() - p.kappa(s - h).unwrap().ln()) / (2.0 * h);
            assert!((m.q(s) - fd).abs() < 1e-7, "s={s}: {} vs {fd}", m.q(s));
        }
    }

    #[test]
    fn model_rejects_too_negative_range() {
        let opts = ModelOptions { s_min: -0.8, ..Default::default() };
        assert!(matches!(build_model(&scalar_problem(), &opts), Err(Error::OutOfDomain(_))));
    }

    #[test]
    fn rate_point_examples() {
        let m = scalar_model();
        let rp0 = m.rate_point(0.0).unwrap();
        assert!(rp0.lambda_star.abs() < 1e-9);
        let rp = m.rate_point(1.0).unwrap();
        let exact = scalar_cumulants(&[1.0, -R2], &[0.5, 0.5], 1.0);
        assert!((rp.lambda_star - (exact[1] - exact[0])).abs() < 1e-9);
        assert!(rp.lambda_star >= 0.0);
        assert!(rp.sup_discrepancy < 1e-8);
        assert!(m.rate_point(3.0).is_err());
    }

    #[test]
    fn legendre_involution_on_random_levels() {
        let m = build_model(&positive_problem(), &ModelOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (qa, qb) = (m.q(-0.45), m.q(2.95));
        for _ in 0..50 {
            let q = rng.random_range(qa..qb);
            let closed = m.legendre(q).unwrap();
            let sup = m.legendre_sup(q);
            assert!((closed - sup).abs() < 1e-8, "q={q}");
        }
    }

    #[test]
    fn q_increases_with_s() {
        let m = build_model(&positive_problem(), &ModelOptions::default()).unwrap();
        let qs: Vec<f64> = (0..100).map(|k| m.q(-0.49 + 0.035 * k as f64)).collect();
        assert!(qs.windows(2).all(|w| w[1] > w[0]));
        assert!((0..100).all(|k| m.sigma2(-0.49 + 0.035 * k as f64) >= 0.0));
    }

    #[test]
    fn cramer_series_examples() {
        let sym = MatrixEnsemble::scalar(&[2.0, 0.5], &[0.5, 0.5]).unwrap();
        let p = SpectralProblem::new(&sym, &build_grid(1, Chart::PositiveQuadrant, 16).unwrap()).unwrap();
        let m = build_model(&p, &ModelOptions::default()).unwrap();
        assert!(m.cramer_series(0.0, 0.0, 3).unwrap().abs() < 1e-10);
        let sm = scalar_model();
        let c = sm.cramer_coeffs(1.0);
        assert_eq!(sm.cramer_series(1.0, 0.0, 3).unwrap(), c[0]);
        assert!(sm.cramer_series(1.0, 0.1, 4).is_err());
    }

    #[test]
    fn cramer_coefficients_match_exact_cumulants() {
        let m = CumulantModel::from_kappa_fn(&ModelOptions { n_cheb: 65, ..Default::default() }, |s| {
            0.5 * (s.exp() + (-R2 * s).exp())
        })
        .unwrap();
        for s in [0.5, 1.0, 1.5] {
            let g = scalar_cumulants(&[1.0, -R2], &[0.5, 0.5], s);
            let exact = cramer_from_cumulants(g[2], g[3], g[4], g[5]);
            let got = m.cramer_coeffs(s);
            for k in 0..3 {
                assert!((got[k] - exact[k]).abs() < 1e-6, "s={s} k={k}: {} vs {}", got[k], exact[k]);
            }
        }
    }

    #[test]
    fn h_s_two_routes_agree() {
        for m in [scalar_model(), build_model(&positive_problem(), &ModelOptions::default()).unwrap()] {
            for s in [0.5, 1.0] {
                let sigma2 = m.sigma2(s);
                let delta = m.default_delta(s);
                assert_eq!(m.h_s(s, 0.0, None).unwrap().series, 0.0);
                assert_eq!(m.h_s(s, 0.0, None).unwrap().direct, 0.0);
                for l in [1e-2f64, -1e-2, 1e-3, -1e-3, 1e-4, -1e-4] {
                    if l.abs() > delta {
                        assert!(matches!(m.h_s(s, l, None), Err(Error::OutOfDomain(_))));
                        continue;
                    }
                    let h = m.h_s(s, l, None).unwrap();
                    assert!(h.agree(), "s={s} l={l}: {h:?}");
                    assert!(h.direct > 0.0 && h.series > 0.0);
                    if l.abs() <= 1e-3 {
                        let ratio = h.series / (l * l / (2.0 * sigma2));
                        assert!((ratio - 1.0).abs() < 10.0 * l.abs(), "{ratio}");
                    }
                }
            }
        }
    }

    #[test]
    fn saddle_point_properties() {
        let m = scalar_model();
        let s = 1.0;
        let sp = m.saddle(s, 0.0, None).unwrap();
        assert_eq!(sp.z0, 0.0);
        for l in [0.01, 0.003, -0.003, -0.01] {
            let sp = m.saddle(s, l, None).unwrap();
            assert_eq!(sp.z0.signum(), l.signum());
            // Closed-form K_s′ for the scalar law.
            let exact = scalar_cumulants(&[1.0, -R2], &[0.5, 0.5], s + sp.z0)[1] - scalar_cumulants(&[1.0, -R2], &[0.5, 0.5], s)[1];
            assert!((exact - l).abs() < 1e-9);
            assert!(sp.residual <= 1e-12, "{sp:?}");
            assert!(sp.postcondition_gap <= 1e-9, "{sp:?}");
        }
        assert!(matches!(m.saddle(s, 1.0, None), Err(Error::OutOfDomain(_))));
    }

    #[test]
    fn model_is_worker_independent_and_serializes() {
        let p = positive_problem();
        let a = build_model(&p, &ModelOptions { workers: 1, ..Default::default() }).unwrap();
        let b = build_model(&p, &ModelOptions { workers: 4, ..Default::default() }).unwrap();
        assert_eq!(a, b);
        let doc: CumulantDocument = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        assert_eq!(CumulantModel::from_document(&doc), a);
        let csv = a.csv_table(&[0.0, 1.0]);
        assert!(csv.starts_with("s,Lambda,dLambda,d2Lambda,d3Lambda,Lambda_star\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}
