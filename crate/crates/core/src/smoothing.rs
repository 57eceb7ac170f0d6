//! Compactly band-limited smoothing density and the `ψ^±` envelopes.
//!
//! `ς̂(t) = exp(−1/(1−t²))` on (−1, 1). With `ρ₀ = 2π ς²`, the transform
//! `ρ̂₀ = ς̂ * ς̂` lives on [−2, 2]; after `ρ(y) = ρ₀(y/2)/(2ρ̂₀(0))` it lives
//! on [−1, 1] and `∫ρ = 1`. The kernel handed to the sandwich at envelope
//! radius `ε` is `ρ_{ε²}(y) = ρ(y/ε²)/ε²`.
//!
//! `ρ` is tabulated once in its own units (`v = y/ε²`) and interpolated.

use std::f64::consts::PI;
use std::sync::OnceLock;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::numeric::{fmt_f64, gauss_legendre, CompensatedSum, CompositeGauss};
use crate::{par, Error, Result};

/// `ς̂(t)`.
pub fn varsigma_hat(t: f64) -> f64 {
    if t.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - t * t)).exp()
    }
}

const VARSIGMA_POINTS: usize = 4000;

/// `ς(x) = (1/π) ∫₀¹ ς̂(t) cos(tx) dt`, trapezoid on the flat-ended bump.
pub fn varsigma(x: f64) -> f64 {
    let h = 1.0 / VARSIGMA_POINTS as f64;
    let mut acc = CompensatedSum::new();
    acc.add(0.5 * varsigma_hat(0.0));
    for k in 1..VARSIGMA_POINTS {
        let t = k as f64 * h;
        acc.add(varsigma_hat(t) * (t * x).cos());
    }
    acc.value() * h / PI
}

/// `ρ̂₀(τ) = ∫ ς̂(u) ς̂(τ − u) du`.
pub fn rho0_hat(tau: f64) -> f64 {
    let a = (-1.0f64).max(tau - 1.0);
    let b = 1.0f64.min(tau + 1.0);
    if b <= a {
        return 0.0;
    }
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    let (x, w) = RULE.get_or_init(|| gauss_legendre(24));
    let panels = 32;
    let h = (b - a) / panels as f64;
    let mut acc = CompensatedSum::new();
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for (xi, wi) in x.iter().zip(w) {
            let u = mid + 0.5 * h * xi;
            acc.add(wi * varsigma_hat(u) * varsigma_hat(tau - u));
        }
    }
    0.5 * h * acc.value()
}

fn rho0_hat_zero() -> f64 {
    static V: OnceLock<f64> = OnceLock::new();
    *V.get_or_init(|| rho0_hat(0.0))
}

/// `ρ̂(t) = ρ̂₀(2t)/ρ̂₀(0)`, supported on [−1, 1].
pub fn rho_hat(t: f64) -> f64 {
    rho0_hat(2.0 * t) / rho0_hat_zero()
}

/// `ρ(v) = 2π ς(v/2)² / (2ρ̂₀(0))`, evaluated directly.
pub fn rho_exact(v: f64) -> f64 {
    let s = varsigma(0.5 * v);
    PI * s * s / rho0_hat_zero()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelGrid {
    /// Table step for `ρ` in its own units.
    pub v_step: f64,
    /// Table half-width for `ρ` in its own units.
    pub v_max: f64,
    /// Fourier grid is `[−t_extent/ε², t_extent/ε²]`.
    pub t_extent: f64,
    pub t_points: usize,
}

impl Default for KernelGrid {
    fn default() -> Self {
        Self { v_step: 0.05, v_max: 256.0, t_extent: 4.0, t_points: 1 << 14 }
    }
}

/// `ρ` sampled at `v_k = k·step`, `k ≥ 0` (it is even).
#[derive(Debug, Clone, PartialEq)]
struct RhoTable {
    step: f64,
    v_max: f64,
    values: Vec<f64>,
}

impl RhoTable {
    fn build(step: f64, v_max: f64) -> Self {
        let n = (v_max / step).round() as usize;
        // A few points past the end keep the interpolation stencil in range.
        let values = par::map_indexed(n + 8, 0, |k| rho_exact(k as f64 * step));
        Self { step, v_max, values }
    }

    fn standard() -> &'static RhoTable {
        static T: OnceLock<RhoTable> = OnceLock::new();
        let g = KernelGrid::default();
        T.get_or_init(|| RhoTable::build(g.v_step, g.v_max))
    }

    fn for_grid(grid: &KernelGrid) -> RhoTable {
        let d = KernelGrid::default();
        if grid.v_step == d.v_step && grid.v_max == d.v_max {
            Self::standard().clone()
        } else {
            Self::build(grid.v_step, grid.v_max)
        }
    }

    /// Eight-point Lagrange interpolation (barycentric form); zero beyond the table.
    fn eval(&self, v: f64) -> f64 {
        // 1 / Π_{j≠m} (m − j) for nodes m = −3..=4
        const B: [f64; 8] = [
            -1.0 / 5040.0,
            1.0 / 720.0,
            -1.0 / 240.0,
            1.0 / 144.0,
            -1.0 / 144.0,
            1.0 / 240.0,
            -1.0 / 720.0,
            1.0 / 5040.0,
        ];
        let a = v.abs();
        if a > self.v_max {
            return 0.0;
        }
        let u = a / self.step;
        let k = u.floor();
        let f = u - k;
        let k = k as usize;
        let mut prod = 1.0;
        let mut acc = 0.0;
        for m in 0..8 {
            let d = f - (m as f64 - 3.0);
            let val = self.values[(k as isize + m as isize - 3).unsigned_abs()];
            if d == 0.0 {
                return val.max(0.0);
            }
            prod *= d;
            acc += B[m] * val / d;
        }
        (prod * acc).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingKernel {
    pub epsilon: f64,
    /// Scale of the stored density: `ρ_{scale}` with `scale = ε²`.
    pub scale: f64,
    pub y_grid: Vec<f64>,
    pub rho_values: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub rho_hat_values: Vec<f64>,
    /// `∫ρ` measured by trapezoid on the table.
    pub normalization: f64,
    /// `1 / ∫_{|y|<ε} ρ_{ε²} − 1`.
    pub c_rho_eps: f64,
    table: RhoTable,
}

pub fn build_kernel(epsilon: f64, grid: &KernelGrid) -> Result<SmoothingKernel> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::OutOfDomain(format!("epsilon = {epsilon} not in (0, 1]")));
    }
    let table = RhoTable::for_grid(grid);
    let scale = epsilon * epsilon;
    // Trapezoid over the symmetric table.
    let n = (table.v_max / table.step).round() as usize;
    let mut acc = CompensatedSum::new();
    acc.add(table.values[0]);
    for k in 1..=n {
        let w = if k == n { 1.0 } else { 2.0 };
        acc.add(w * table.values[k]);
    }
    let normalization = acc.value() * table.step;
    if (normalization - 1.0).abs() > 1e-4 {
        return Err(Error::Quadrature(format!("∫ρ = {normalization}")));
    }
    let y_grid: Vec<f64> = (0..=2 * n).map(|k| (k as f64 - n as f64) * table.step * scale).collect();
    let rho_values: Vec<f64> = (0..=2 * n).map(|k| table.values[(k as isize - n as isize).unsigned_abs()] / scale).collect();
    let tmax = grid.t_extent / scale;
    let m = grid.t_points;
    let t_grid: Vec<f64> = (0..m).map(|k| -tmax + 2.0 * tmax * k as f64 / (m - 1) as f64).collect();
    let rho_hat_values = par::map_indexed(m, 0, |k| rho_hat(scale * t_grid[k]));
    let inner = integrate_table(&table, -1.0 / epsilon, 1.0 / epsilon);
    let c_rho_eps = 1.0 / inner - 1.0;
    Ok(SmoothingKernel { epsilon, scale, y_grid, rho_values, t_grid, rho_hat_values, normalization, c_rho_eps, table })
}

fn integrate_table(table: &RhoTable, a: f64, b: f64) -> f64 {
    let rule = CompositeGauss::new(8);
    let panels = ((b - a) / 0.5).ceil().max(1.0) as usize;
    rule.integrate(a, b, panels, |v| table.eval(v))
}

impl SmoothingKernel {
    /// `ρ_{ε²}(y)`.
    pub fn density(&self, y: f64) -> f64 {
        self.table.eval(y / self.scale) / self.scale
    }

    /// `ρ̂_{ε²}(t) = ρ̂(ε² t)`.
    pub fn transform(&self, t: f64) -> f64 {
        rho_hat(self.scale * t)
    }

    /// `ρ̂` by trapezoid quadrature of the sampled density (independent of the convolution route).
    pub fn transform_from_samples(&self, t: f64) -> f64 {
        let n = (self.table.v_max / self.table.step).round() as usize;
        let tv = self.scale * t;
        let mut acc = CompensatedSum::new();
        acc.add(self.table.values[0]);
        for k in 1..=n {
            let w = if k == n { 1.0 } else { 2.0 };
            acc.add(w * self.table.values[k] * (tv * k as f64 * self.table.step).cos());
        }
        acc.value() * self.table.step
    }

    /// `(∫ f(y − u) ρ_{ε²}(u) du, part with |u| ≥ ε)` by composite Gauss–Legendre,
    /// split at the breakpoints of `f`.
    pub fn convolve(&self, f: &EnvFn, y: f64) -> (f64, f64) {
        let vmax = self.table.v_max;
        let cut = self.epsilon / self.scale;
        let mut pts = vec![-vmax, vmax, -cut, cut];
        for b in f.breakpoints() {
            let v = (y - b) / self.scale;
            if v > -vmax && v < vmax {
                pts.push(v);
            }
        }
        pts.sort_by(|a, b| a.total_cmp(b));
        pts.dedup();
        let rule = conv_rule();
        let mut total = CompensatedSum::new();
        let mut tail = CompensatedSum::new();
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let panels = (b - a).ceil() as usize;
            let val = rule.integrate(a, b, panels, |v| f.eval(y - self.scale * v) * self.table.eval(v));
            total.add(val);
            if 0.5 * (a + b) <= -cut || 0.5 * (a + b) >= cut {
                tail.add(val);
            }
        }
        (total.value(), tail.value())
    }

    /// Same convolution through `(1/2π) ∫ f̂(t) ρ̂_{ε²}(t) e^{ity} dt`, trapezoid on
    /// the kernel's t-grid. `None` when `f` has no closed-form transform.
    pub fn convolve_fourier(&self, f: &EnvFn, y: f64) -> Option<f64> {
        let pieces = match f {
            EnvFn::Pieces(p) => p,
            EnvFn::Samples { .. } => return None,
        };
        let h = self.t_grid[1] - self.t_grid[0];
        let mut acc = CompensatedSum::new();
        for (&t, &rh) in self.t_grid.iter().zip(&self.rho_hat_values) {
            if rh == 0.0 {
                continue;
            }
            let ft = pieces_transform(pieces, t);
            let e = Complex64::new(0.0, t * y).exp();
            acc.add((ft * e).re * rh);
        }
        Some(acc.value() * h / (2.0 * PI))
    }

    pub fn csv_density(&self) -> String {
        let mut out = String::from("y,rho\n");
        for (y, r) in self.y_grid.iter().zip(&self.rho_values) {
            out.push_str(&format!("{},{}\n", fmt_f64(*y), fmt_f64(*r)));
        }
        out
    }

    pub fn csv_transform(&self) -> String {
        let mut out = String::from("t,rho_hat\n");
        for (t, r) in self.t_grid.iter().zip(&self.rho_hat_values) {
            out.push_str(&format!("{},{}\n", fmt_f64(*t), fmt_f64(*r)));
        }
        out
    }
}

fn conv_rule() -> &'static CompositeGauss {
    static R: OnceLock<CompositeGauss> = OnceLock::new();
    R.get_or_init(|| CompositeGauss::new(8))
}

/// Target functions ψ. Bounds given as `None` are infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Psi {
    /// `𝟙{lo ≤ y < hi}`.
    Indicator { lo: Option<f64>, hi: Option<f64> },
    /// Piecewise-linear table, zero outside `[y[0], y[last]]`.
    Table { y: Vec<f64>, v: Vec<f64> },
}

impl Psi {
    pub fn upper_tail() -> Self {
        Psi::Indicator { lo: Some(0.0), hi: None }
    }

    pub fn lower_tail() -> Self {
        Psi::Indicator { lo: None, hi: Some(0.0) }
    }

    pub fn window(a: f64, delta: f64) -> Self {
        Psi::Indicator { lo: Some(a), hi: Some(a + delta) }
    }

    pub fn zero() -> Self {
        Psi::Indicator { lo: Some(0.0), hi: Some(0.0) }
    }

    fn bounds(lo: &Option<f64>, hi: &Option<f64>) -> (f64, f64) {
        (lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY))
    }

    pub fn eval(&self, y: f64) -> f64 {
        match self {
            Psi::Indicator { lo, hi } => {
                let (a, b) = Self::bounds(lo, hi);
                if y >= a && y < b {
                    1.0
                } else {
                    0.0
                }
            }
            Psi::Table { y: ys, v } => table_eval(ys, v, y),
        }
    }

    /// `∫ e^{−sy} ψ(y) dy`; closed form for indicators.
    pub fn weighted_integral(&self, s: f64) -> Result<f64> {
        match self {
            Psi::Indicator { lo, hi } => {
                let (a, b) = Self::bounds(lo, hi);
                if b <= a {
                    return Ok(0.0);
                }
                let diverges = (s >= 0.0 && a == f64::NEG_INFINITY) || (s <= 0.0 && b == f64::INFINITY);
                if diverges {
                    return Err(Error::OutOfDomain(format!("∫e^(-sy)ψ diverges at s = {s}")));
                }
                if s == 0.0 {
                    return Ok(b - a);
                }
                Ok(exp_integral(s, a, b))
            }
            Psi::Table { y, v } => {
                let rule = CompositeGauss::new(8);
                let mut acc = CompensatedSum::new();
                for k in 0..y.len().saturating_sub(1) {
                    acc.add(rule.integrate(y[k], y[k + 1], 1, |t| (-s * t).exp() * table_eval(y, v, t)));
                }
                Ok(acc.value())
            }
        }
    }

    /// The same integral written as `e^{−sa}(1 − e^{−sΔ})` times `1/s`, for windows.
    pub fn window_factor(s: f64, a: f64, delta: f64) -> f64 {
        (-s * a).exp() * (1.0 - (-s * delta).exp())
    }
}

/// `∫_a^b e^{−sy} dy` for `s ≠ 0`, allowing infinite ends where convergent.
fn exp_integral(s: f64, a: f64, b: f64) -> f64 {
    let ea = if a == f64::NEG_INFINITY { 0.0 } else { (-s * a).exp() };
    let eb = if b == f64::INFINITY { 0.0 } else { (-s * b).exp() };
    (ea - eb) / s
}

fn table_eval(ys: &[f64], v: &[f64], y: f64) -> f64 {
    if ys.is_empty() || y < ys[0] || y > ys[ys.len() - 1] {
        return 0.0;
    }
    let k = ys.partition_point(|&t| t <= y).min(ys.len() - 1).max(1);
    let (y0, y1) = (ys[k - 1], ys[k]);
    if y1 == y0 {
        return v[k];
    }
    let f = (y - y0) / (y1 - y0);
    v[k - 1] * (1.0 - f) + v[k] * f
}

/// `c e^{−k y}` on `[a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpPiece {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub k: f64,
}

impl ExpPiece {
    fn eval(&self, y: f64) -> f64 {
        if y >= self.a && y < self.b {
            self.c * (-self.k * y).exp()
        } else {
            0.0
        }
    }
}

/// A function of `y`, either exact exponential pieces or grid samples.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvFn {
    Pieces(Vec<ExpPiece>),
    Samples { y: Vec<f64>, v: Vec<f64> },
}

impl EnvFn {
    pub fn eval(&self, y: f64) -> f64 {
        match self {
            EnvFn::Pieces(p) => p.iter().map(|q| q.eval(y)).sum(),
            EnvFn::Samples { y: ys, v } => table_eval(ys, v, y),
        }
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            EnvFn::Pieces(p) => p
                .iter()
                .flat_map(|q| [q.a, q.b])
                .filter(|v| v.is_finite())
                .collect(),
            EnvFn::Samples { y, .. } => {
                if y.is_empty() {
                    vec![]
                } else {
                    vec![y[0], y[y.len() - 1]]
                }
            }
        }
    }

    pub fn integral(&self) -> f64 {
        match self {
            EnvFn::Pieces(p) => p
                .iter()
                .map(|q| if q.k == 0.0 { q.c * (q.b - q.a) } else { q.c * exp_integral(q.k, q.a, q.b) })
                .sum(),
            EnvFn::Samples { y, v } => {
                let mut acc = CompensatedSum::new();
                for k in 1..y.len() {
                    acc.add(0.5 * (v[k] + v[k - 1]) * (y[k] - y[k - 1]));
                }
                acc.value()
            }
        }
    }
}

/// `∫ f(y) e^{−ity} dy` for exponential pieces.
fn pieces_transform(pieces: &[ExpPiece], t: f64) -> Complex64 {
    let mut out = Complex64::default();
    for p in pieces {
        let k = Complex64::new(p.k, t);
        if k.norm() < 1e-300 {
            out += p.c * (p.b - p.a);
            continue;
        }
        let ea = if p.a == f64::NEG_INFINITY { Complex64::default() } else { (-k * p.a).exp() };
        let eb = if p.b == f64::INFINITY { Complex64::default() } else { (-k * p.b).exp() };
        out += p.c * (ea - eb) / k;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub base: Psi,
    pub s: f64,
    pub epsilon: f64,
    /// `y ↦ e^{−sy} ψ(y)`.
    pub base_fn: EnvFn,
    pub plus: EnvFn,
    pub minus: EnvFn,
    pub y_grid: Vec<f64>,
    pub base_values: Vec<f64>,
    pub plus_values: Vec<f64>,
    pub minus_values: Vec<f64>,
}

/// Sup/inf envelopes of `y ↦ e^{−sy} ψ(y)` over balls of radius `ε`.
pub fn envelopes(psi: &Psi, s: f64, epsilon: f64, y_grid: &[f64]) -> Envelope {
    let (base_fn, plus, minus) = match psi {
        Psi::Indicator { lo, hi } => {
            let (a, b) = Psi::bounds(lo, hi);
            indicator_envelopes(s, epsilon, a, b)
        }
        Psi::Table { y, v } => table_envelopes(y, v, s, epsilon, y_grid),
    };
    let base_values = y_grid.iter().map(|&y| base_fn.eval(y)).collect();
    let plus_values = y_grid.iter().map(|&y| plus.eval(y)).collect();
    let minus_values = y_grid.iter().map(|&y| minus.eval(y)).collect();
    Envelope {
        base: psi.clone(),
        s,
        epsilon,
        base_fn,
        plus,
        minus,
        y_grid: y_grid.to_vec(),
        base_values,
        plus_values,
        minus_values,
    }
}

fn indicator_envelopes(s: f64, e: f64, a: f64, b: f64) -> (EnvFn, EnvFn, EnvFn) {
    if b <= a {
        return (EnvFn::Pieces(vec![]), EnvFn::Pieces(vec![]), EnvFn::Pieces(vec![]));
    }
    let base = vec![ExpPiece { a, b, c: 1.0, k: s }];
    let mut plus = Vec::new();
    if s > 0.0 {
        // sup at the left end of the reachable part of [a, b)
        plus.push(ExpPiece { a: a - e, b: (a + e).min(b + e), c: (-s * a).exp(), k: 0.0 });
        if a + e < b + e {
            plus.push(ExpPiece { a: a + e, b: b + e, c: (s * e).exp(), k: s });
        }
    } else if s < 0.0 {
        if a - e < b - e {
            plus.push(ExpPiece { a: a - e, b: b - e, c: (-s * e).exp(), k: s });
        }
        plus.push(ExpPiece { a: (b - e).max(a - e), b: b + e, c: (-s * b).exp(), k: 0.0 });
    } else {
        plus.push(ExpPiece { a: a - e, b: b + e, c: 1.0, k: 0.0 });
    }
    let mut minus = Vec::new();
    if a + e < b - e {
        let c = if s > 0.0 {
            (-s * e).exp()
        } else if s < 0.0 {
            (s * e).exp()
        } else {
            1.0
        };
        minus.push(ExpPiece { a: a + e, b: b - e, c, k: s });
    }
    (EnvFn::Pieces(base), EnvFn::Pieces(plus), EnvFn::Pieces(minus))
}

fn table_envelopes(ys: &[f64], vs: &[f64], s: f64, e: f64, grid: &[f64]) -> (EnvFn, EnvFn, EnvFn) {
    let f = |t: f64| (-s * t).exp() * table_eval(ys, vs, t);
    let lo = ys.first().copied().unwrap_or(0.0);
    let hi = ys.last().copied().unwrap_or(0.0);
    let mut plus = Vec::with_capacity(grid.len());
    let mut minus = Vec::with_capacity(grid.len());
    let mut base = Vec::with_capacity(grid.len());
    for &y in grid {
        let (l, r) = (y - e, y + e);
        let mut cands = vec![f(l), f(r), f(y)];
        let start = ys.partition_point(|&t| t < l);
        for &t in ys[start..].iter().take_while(|&&t| t <= r) {
            cands.push(f(t));
            // one-sided limits at the table ends
            if t == lo || t == hi {
                cands.push(0.0);
            }
        }
        if l < lo || r > hi {
            cands.push(0.0);
        }
        plus.push(cands.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        minus.push(cands.iter().copied().fold(f64::INFINITY, f64::min));
        base.push(f(y));
    }
    (
        EnvFn::Samples { y: grid.to_vec(), v: base },
        EnvFn::Samples { y: grid.to_vec(), v: plus },
        EnvFn::Samples { y: grid.to_vec(), v: minus },
    )
}

impl Envelope {
    pub fn csv(&self) -> String {
        let mut out = String::from("y,base,plus,minus\n");
        for k in 0..self.y_grid.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                fmt_f64(self.y_grid[k]),
                fmt_f64(self.base_values[k]),
                fmt_f64(self.plus_values[k]),
                fmt_f64(self.minus_values[k])
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub epsilon: f64,
    pub points: usize,
    /// `max(ψ^− * ρ − tail − ψ)⁺`.
    pub lower_violation: f64,
    /// `max(ψ − (1 + C) ψ^+ * ρ)⁺`.
    pub upper_violation: f64,
    pub max_violation: f64,
    pub c_rho_eps: f64,
    /// Smallest `C` making the upper inequality hold on this family and grid.
    pub c_required: f64,
}

impl SandwichReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.max_violation <= tol
    }
}

/// Pointwise check of `ψ^− * ρ − tail ≤ ψ ≤ (1 + C) ψ^+ * ρ` on the envelope grid.
pub fn verify_sandwich(env: &Envelope, kernel: &SmoothingKernel, workers: usize) -> SandwichReport {
    let rows = par::map_indexed(env.y_grid.len(), workers, |k| {
        let y = env.y_grid[k];
        let psi = env.base_values[k];
        let (minus_conv, minus_tail) = kernel.convolve(&env.minus, y);
        let (plus_conv, _) = kernel.convolve(&env.plus, y);
        let lower = minus_conv - minus_tail;
        let lv = (lower - psi).max(0.0);
        let uv = (psi - (1.0 + kernel.c_rho_eps) * plus_conv).max(0.0);
        let ratio = if plus_conv > 0.0 { psi / plus_conv } else if psi > 0.0 { f64::INFINITY } else { 0.0 };
        (lv, uv, ratio)
    });
    let lower_violation = rows.iter().fold(0.0f64, |a, r| a.max(r.0));
    let upper_violation = rows.iter().fold(0.0f64, |a, r| a.max(r.1));
    let max_ratio = rows.iter().fold(0.0f64, |a, r| a.max(r.2));
    SandwichReport {
        epsilon: env.epsilon,
        points: env.y_grid.len(),
        lower_violation,
        upper_violation,
        max_violation: lower_violation.max(upper_violation),
        c_rho_eps: kernel.c_rho_eps,
        c_required: (max_ratio - 1.0).max(0.0),
    }
}

/// Uniform grid helper.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}
