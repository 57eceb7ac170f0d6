//! Grid discretization of the transfer operators and their eigen-objects.
//!
//! Functions on the sphere are node values. The image `g·x_j` of a node is
//! generally off the grid, so every operator row mixes the values at a small
//! interpolation stencil around it. The resulting node matrix is sparse.

use std::f64::consts::PI;
use std::ops::{Add, Mul};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ensemble::{MatrixEnsemble, MatrixKind};
use crate::numeric::{compensated_sum, normal_quantile, radical_inverse, CompensatedSum, PRIMES};
use crate::projective::{canonicalize, mat_vec, norm, Chart, SphereDirection, MIN_ACTION_NORM};
use crate::{par, Error, Result};

pub const MAX_ITERATIONS: usize = 100_000;
pub const EIGEN_REL_TOL: f64 = 1e-12;
const MAX_STENCIL: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpRule {
    /// One projective point (d = 1): every image lands on node 0.
    Single,
    /// d = 2, whole sphere: periodic piecewise-linear in the angle mod π.
    PeriodicAngle,
    /// d = 2, positive quadrant: piecewise-linear in the angle on [0, π/2].
    QuadrantAngle,
    /// d ≥ 3: inverse-distance weights over the `k` nearest nodes.
    NearestNodes { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereGrid {
    pub dim: usize,
    pub chart: Chart,
    pub nodes: Vec<SphereDirection>,
    pub weights: Vec<f64>,
    pub interp: InterpRule,
}

/// Interpolation stencil: `f(y) ≈ Σ w[m] f(x_{idx[m]})`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Stencil {
    pub len: usize,
    pub idx: [usize; MAX_STENCIL],
    pub w: [f64; MAX_STENCIL],
}

impl Stencil {
    fn one(k: usize) -> Self {
        let mut s = Self { len: 1, ..Default::default() };
        s.idx[0] = k;
        s.w[0] = 1.0;
        s
    }

    fn pair(k0: usize, k1: usize, f: f64) -> Self {
        let mut s = Self { len: 2, ..Default::default() };
        s.idx[0] = k0;
        s.idx[1] = k1;
        s.w[0] = 1.0 - f;
        s.w[1] = f;
        s
    }

    pub fn apply(&self, values: &[f64]) -> f64 {
        (0..self.len).map(|m| self.w[m] * values[self.idx[m]]).sum()
    }
}

/// Grid with `resolution` nodes (ignored for d = 1).
pub fn build_grid(dim: usize, chart: Chart, resolution: usize) -> Result<SphereGrid> {
    if dim == 0 {
        return Err(Error::UnsupportedGrid("dimension 0".into()));
    }
    if dim == 1 {
        let (nodes, weights) = match chart {
            Chart::Full => (
                vec![
                    SphereDirection::from_unit(vec![1.0], chart),
                    SphereDirection::from_unit(vec![-1.0], chart),
                ],
                vec![0.5, 0.5],
            ),
            Chart::PositiveQuadrant => (vec![SphereDirection::from_unit(vec![1.0], chart)], vec![1.0]),
        };
        return Ok(SphereGrid { dim, chart, nodes, weights, interp: InterpRule::Single });
    }
    if resolution < 16 {
        return Err(Error::UnsupportedGrid(format!("resolution {resolution} < 16")));
    }
    if dim == 2 {
        return Ok(match chart {
            Chart::Full => {
                let h = PI / resolution as f64;
                let nodes = (0..resolution)
                    .map(|k| {
                        let t = -0.5 * PI + k as f64 * h;
                        let mut v = vec![t.cos(), t.sin()];
                        canonicalize(&mut v);
                        SphereDirection::from_unit(v, chart)
                    })
                    .collect();
                let weights = vec![1.0 / resolution as f64; resolution];
                SphereGrid { dim, chart, nodes, weights, interp: InterpRule::PeriodicAngle }
            }
            Chart::PositiveQuadrant => {
                let h = 0.5 * PI / (resolution - 1) as f64;
                let nodes = (0..resolution)
                    .map(|k| {
                        let t = k as f64 * h;
                        let v = if k == resolution - 1 { vec![0.0, 1.0] } else { vec![t.cos(), t.sin()] };
                        SphereDirection::from_unit(v, chart)
                    })
                    .collect();
                let m = (resolution - 1) as f64;
                let weights = (0..resolution)
                    .map(|k| if k == 0 || k == resolution - 1 { 0.5 / m } else { 1.0 / m })
                    .collect();
                SphereGrid { dim, chart, nodes, weights, interp: InterpRule::QuadrantAngle }
            }
        });
    }
    if dim > PRIMES.len() {
        return Err(Error::UnsupportedGrid(format!("dimension {dim} > {}", PRIMES.len())));
    }
    let mut nodes = Vec::with_capacity(resolution);
    for i in 1..=resolution as u64 {
        let mut v: Vec<f64> = (0..dim)
            .map(|j| normal_quantile(radical_inverse(i, PRIMES[j]).clamp(1e-12, 1.0 - 1e-12)))
            .collect();
        match chart {
            Chart::Full => canonicalize(&mut v),
            Chart::PositiveQuadrant => v.iter_mut().for_each(|c| *c = c.abs()),
        }
        let n = norm(&v);
        v.iter_mut().for_each(|c| *c /= n);
        nodes.push(SphereDirection::from_unit(v, chart));
    }
    let weights = vec![1.0 / resolution as f64; resolution];
    Ok(SphereGrid { dim, chart, nodes, weights, interp: InterpRule::NearestNodes { k: dim.min(MAX_STENCIL) } })
}

/// Chart matching the ensemble kind.
pub fn default_chart(ensemble: &MatrixEnsemble) -> Chart {
    match ensemble.kind() {
        MatrixKind::Positive => Chart::PositiveQuadrant,
        MatrixKind::Invertible => Chart::Full,
    }
}

impl SphereGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Stencil for an arbitrary (not necessarily unit or canonical) direction `y`.
    pub fn stencil(&self, y: &[f64]) -> Stencil {
        let r = self.nodes.len();
        match self.interp {
            InterpRule::Single => Stencil::one(0),
            InterpRule::PeriodicAngle => {
                let mut t = y[1].atan2(y[0]);
                if t >= 0.5 * PI {
                    t -= PI;
                } else if t < -0.5 * PI {
                    t += PI;
                }
                let u = (t + 0.5 * PI) * r as f64 / PI;
                let k = u.floor();
                let f = u - k;
                let k0 = (k as isize).rem_euclid(r as isize) as usize;
                Stencil::pair(k0, (k0 + 1) % r, f)
            }
            InterpRule::QuadrantAngle => {
                let t = y[1].max(0.0).atan2(y[0].max(0.0));
                let u = t * (r - 1) as f64 / (0.5 * PI);
                let k = (u.floor().max(0.0) as usize).min(r - 2);
                let f = (u - k as f64).clamp(0.0, 1.0);
                Stencil::pair(k, k + 1, f)
            }
            InterpRule::NearestNodes { k } => self.nearest_stencil(y, k),
        }
    }

    fn nearest_stencil(&self, y: &[f64], k: usize) -> Stencil {
        let ny = norm(y);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for (j, node) in self.nodes.iter().enumerate() {
            let dot: f64 = node.coords().iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / ny;
            let c = match self.chart {
                Chart::Full => dot.abs(),
                Chart::PositiveQuadrant => dot,
            };
            let dist = (1.0 - c.min(1.0)).max(0.0).sqrt();
            if best.len() < k || dist < best[best.len() - 1].0 {
                let pos = best.partition_point(|&(d, _)| d <= dist);
                best.insert(pos, (dist, j));
                best.truncate(k);
            }
        }
        let mut s = Stencil::default();
        if best[0].0 < 1e-14 {
            return Stencil::one(best[0].1);
        }
        let total: f64 = best.iter().map(|(d, _)| 1.0 / d).sum();
        s.len = best.len();
        for (m, (d, j)) in best.iter().enumerate() {
            s.idx[m] = *j;
            s.w[m] = (1.0 / d) / total;
        }
        s
    }

    pub fn interpolate(&self, values: &[f64], y: &[f64]) -> f64 {
        self.stencil(y).apply(values)
    }

    /// Quadrature of node values against the grid weights.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        compensated_sum(self.weights.iter().zip(values).map(|(w, v)| w * v))
    }
}

pub trait Scalar: Copy + Send + Sync + Default + Add<Output = Self> + Mul<Output = Self> {
    fn from_real(x: f64) -> Self;
}

impl Scalar for f64 {
    fn from_real(x: f64) -> Self {
        x
    }
}

impl Scalar for Complex64 {
    fn from_real(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
}

/// Compressed sparse rows.
#[derive(Debug, Clone)]
pub struct Csr<T> {
    pub nrows: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<T>,
}

impl<T: Scalar> Csr<T> {
    pub fn mul_vec(&self, x: &[T], out: &mut [T]) {
        par::map_rows(out, |j| {
            let mut acc = T::default();
            for e in self.row_ptr[j]..self.row_ptr[j + 1] {
                acc = acc + self.vals[e] * x[self.cols[e]];
            }
            acc
        });
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.nrows + 1];
        for &c in &self.cols {
            counts[c + 1] += 1;
        }
        for k in 0..self.nrows {
            counts[k + 1] += counts[k];
        }
        let mut fill = counts.clone();
        let mut cols = vec![0usize; self.cols.len()];
        let mut vals = vec![T::default(); self.vals.len()];
        for j in 0..self.nrows {
            for e in self.row_ptr[j]..self.row_ptr[j + 1] {
                let c = self.cols[e];
                cols[fill[c]] = j;
                vals[fill[c]] = self.vals[e];
                fill[c] += 1;
            }
        }
        Self { nrows: self.nrows, row_ptr: counts, cols, vals }
    }
}

impl Csr<f64> {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.nrows);
        for j in 0..self.nrows {
            for e in self.row_ptr[j]..self.row_ptr[j + 1] {
                m[(j, self.cols[e])] += self.vals[e];
            }
        }
        m
    }
}

/// Per (node, atom) geometry of one ensemble on one grid; independent of `s`.
#[derive(Debug, Clone)]
pub struct Discretization {
    grid: SphereGrid,
    probs: Vec<f64>,
    atoms: usize,
    lognorms: Vec<f64>,
    stencils: Vec<Stencil>,
}

impl Discretization {
    pub fn new(ensemble: &MatrixEnsemble, grid: &SphereGrid) -> Result<Self> {
        if ensemble.dim() != grid.dim {
            return Err(Error::UnsupportedGrid(format!(
                "ensemble dimension {} but grid dimension {}",
                ensemble.dim(),
                grid.dim
            )));
        }
        let m = ensemble.len();
        let d = grid.dim;
        let mut lognorms = Vec::with_capacity(grid.len() * m);
        let mut stencils = Vec::with_capacity(grid.len() * m);
        let mut buf = vec![0.0; d];
        for node in &grid.nodes {
            for g in ensemble.atoms() {
                mat_vec(g, node.coords(), &mut buf);
                let n = norm(&buf);
                if !(n > MIN_ACTION_NORM) {
                    return Err(Error::DegenerateAction { norm: n });
                }
                lognorms.push(n.ln());
                stencils.push(grid.stencil(&buf));
            }
        }
        Ok(Self { grid: grid.clone(), probs: ensemble.probs().to_vec(), atoms: m, lognorms, stencils })
    }

    pub fn grid(&self) -> &SphereGrid {
        &self.grid
    }

    /// `log|g_i x_j|`.
    pub fn lognorm(&self, j: usize, i: usize) -> f64 {
        self.lognorms[j * self.atoms + i]
    }

    pub fn stencil_of(&self, j: usize, i: usize) -> &Stencil {
        &self.stencils[j * self.atoms + i]
    }

    fn build<T: Scalar, F: Fn(usize, usize) -> T>(&self, entry: F) -> Csr<T> {
        let r = self.grid.len();
        let mut row_ptr = Vec::with_capacity(r + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for j in 0..r {
            for i in 0..self.atoms {
                let base = entry(j, i);
                let st = self.stencil_of(j, i);
                for m in 0..st.len {
                    cols.push(st.idx[m]);
                    vals.push(base * T::from_real(st.w[m]));
                }
            }
            row_ptr.push(cols.len());
        }
        Csr { nrows: r, row_ptr, cols, vals }
    }

    /// Node matrix of `P_s`.
    pub fn transfer_matrix(&self, s: f64) -> Csr<f64> {
        self.build(|j, i| self.probs[i] * (s * self.lognorm(j, i)).exp())
    }

    pub fn apply_transfer(&self, s: f64, phi: &[f64]) -> Vec<f64> {
        let m = self.transfer_matrix(s);
        let mut out = vec![0.0; phi.len()];
        m.mul_vec(phi, &mut out);
        out
    }

    /// Node matrix of `R_{s,z}` built on `(κ, r)`; equals `D⁻¹ M_{s+z} D e^{-qz}/κ`
    /// with `D = diag(r)`.
    pub fn perturbed_matrix(&self, s: f64, z: Complex64, q: f64, kappa: f64, r: &[f64]) -> Csr<Complex64> {
        let r_len = self.grid.len();
        let mut row_ptr = Vec::with_capacity(r_len + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for j in 0..r_len {
            for i in 0..self.atoms {
                let ln = self.lognorm(j, i);
                let base = self.probs[i] * (s * ln).exp() / (kappa * r[j]);
                let tilt = (z * (ln - q)).exp() * base;
                let st = self.stencil_of(j, i);
                for m in 0..st.len {
                    cols.push(st.idx[m]);
                    vals.push(tilt * (st.w[m] * r[st.idx[m]]));
                }
            }
            row_ptr.push(cols.len());
        }
        Csr { nrows: r_len, row_ptr, cols, vals }
    }
}

/// `P_s φ` at the nodes.
pub fn apply_transfer(ensemble: &MatrixEnsemble, s: f64, grid: &SphereGrid, phi: &[f64]) -> Result<Vec<f64>> {
    Ok(Discretization::new(ensemble, grid)?.apply_transfer(s, phi))
}

#[derive(Debug, Clone)]
struct PowerResult {
    value: f64,
    vector: Vec<f64>,
    residual: f64,
    iterations: usize,
    rate: f64,
}

/// Power iteration for the Perron root of a nonnegative matrix.
/// `l1` selects the normalization: L1 mass (measures) or sup norm (functions).
fn power_iteration(m: &Csr<f64>, l1: bool) -> Result<PowerResult> {
    let r = m.nrows;
    let size = |v: &[f64]| -> f64 {
        if l1 {
            compensated_sum(v.iter().map(|x| x.abs()))
        } else {
            v.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
        }
    };
    let mut v = vec![1.0; r];
    let n0 = size(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut w = vec![0.0; r];
    let mut prev = f64::NAN;
    let mut best_resid = f64::INFINITY;
    let mut since_best = 0usize;
    let mut prev_resid = f64::NAN;
    let mut rate = 0.0;
    for it in 1..=MAX_ITERATIONS {
        m.mul_vec(&v, &mut w);
        let lam = size(&w);
        if !(lam > 0.0) || !lam.is_finite() {
            return Err(Error::NonConvergence { iterations: it, gap: f64::NAN });
        }
        let vnorm = v.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let resid = w.iter().zip(&v).fold(0.0f64, |a, (wi, vi)| a.max((wi - lam * vi).abs())) / (lam * vnorm);
        if prev_resid.is_finite() && prev_resid > 0.0 && resid > 0.0 {
            rate = (resid / prev_resid).min(1.0);
        }
        prev_resid = resid;
        if resid < best_resid * 0.5 {
            best_resid = resid;
            since_best = 0;
        } else {
            since_best += 1;
        }
        let rel = ((lam - prev) / lam).abs();
        let eigen_done = rel < EIGEN_REL_TOL;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / lam;
        }
        if eigen_done && (resid < 1e-14 || since_best > 200) {
            // Report the residual of the returned vector.
            m.mul_vec(&v, &mut w);
            let lam2 = size(&w);
            let vn = v.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            let res = w.iter().zip(&v).fold(0.0f64, |a, (wi, vi)| a.max((wi - lam2 * vi).abs())) / (lam2 * vn);
            return Ok(PowerResult { value: lam2, vector: v, residual: res, iterations: it, rate });
        }
        prev = lam;
    }
    Err(Error::NonConvergence { iterations: MAX_ITERATIONS, gap: 1.0 - rate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSolution {
    pub s: f64,
    pub kappa: f64,
    pub residual: f64,
    pub grid: SphereGrid,
    pub r_s: Vec<f64>,
    pub nu_s: Vec<f64>,
    pub kappa_star: f64,
    pub r_s_star: Vec<f64>,
    pub nu_s_star: Vec<f64>,
    pub residual_left: f64,
    pub residual_star: f64,
    pub iterations: usize,
    /// Observed asymptotic contraction rate of the power iteration (≈ |λ₂/λ₁|).
    pub convergence_rate: f64,
}

/// The serialized form shared with the CLI and golden files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDocument {
    pub s: f64,
    pub kappa: f64,
    pub residual: f64,
    pub nodes: Vec<Vec<f64>>,
    pub r_s: Vec<f64>,
    pub nu_s: Vec<f64>,
    pub r_s_star: Vec<f64>,
    pub nu_s_star: Vec<f64>,
}

impl SpectralSolution {
    /// `r̄_s = r_s / ν_s(r_s)`; equal to `r_s` under the stored normalization.
    pub fn rbar_s(&self) -> &[f64] {
        &self.r_s
    }

    /// `r_s` interpolated at an arbitrary direction.
    pub fn r_at(&self, x: &[f64]) -> f64 {
        self.grid.interpolate(&self.r_s, x)
    }

    pub fn nu_of(&self, phi: &[f64]) -> f64 {
        compensated_sum(self.nu_s.iter().zip(phi).map(|(a, b)| a * b))
    }

    pub fn document(&self) -> SpectralDocument {
        SpectralDocument {
            s: self.s,
            kappa: self.kappa,
            residual: self.residual,
            nodes: self.grid.nodes.iter().map(|n| n.coords().to_vec()).collect(),
            r_s: self.r_s.clone(),
            nu_s: self.nu_s.clone(),
            r_s_star: self.r_s_star.clone(),
            nu_s_star: self.nu_s_star.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.document())?)
    }
}

/// Forward and adjoint discretizations of one ensemble on one grid.
#[derive(Debug, Clone)]
pub struct SpectralProblem {
    forward: Discretization,
    adjoint: Discretization,
}

impl SpectralProblem {
    pub fn new(ensemble: &MatrixEnsemble, grid: &SphereGrid) -> Result<Self> {
        Ok(Self {
            forward: Discretization::new(ensemble, grid)?,
            adjoint: Discretization::new(&ensemble.transposed(), grid)?,
        })
    }

    pub fn forward(&self) -> &Discretization {
        &self.forward
    }

    pub fn adjoint(&self) -> &Discretization {
        &self.adjoint
    }

    pub fn grid(&self) -> &SphereGrid {
        self.forward.grid()
    }

    /// κ(s) only (right Perron root).
    pub fn kappa(&self, s: f64) -> Result<f64> {
        Ok(power_iteration(&self.forward.transfer_matrix(s), false)?.value)
    }

    /// κ(s) from a dense eigen-decomposition; only for small grids.
    pub fn dense_kappa(&self, s: f64) -> Result<f64> {
        if self.grid().len() > 1024 {
            return Err(Error::Unsupported("dense cross-check above 1024 nodes".into()));
        }
        let dense = self.forward.transfer_matrix(s).to_dense();
        Ok(dense.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max))
    }

    pub fn solve(&self, s: f64) -> Result<SpectralSolution> {
        let m = self.forward.transfer_matrix(s);
        let right = power_iteration(&m, false)?;
        let left = power_iteration(&m.transpose(), true)?;
        let m_star = self.adjoint.transfer_matrix(s);
        let right_star = power_iteration(&m_star, false)?;
        let left_star = power_iteration(&m_star.transpose(), true)?;

        let (r_s, nu_s) = normalize_pair(right.vector, left.vector);
        let (r_s_star, nu_s_star) = normalize_pair(right_star.vector, left_star.vector);
        let kappa = right.value;
        let rel_mismatch = ((left.value - kappa) / kappa).abs();
        if rel_mismatch > 1e-9 {
            log::warn!("left and right Perron roots differ by {rel_mismatch:e} at s = {s}");
        }
        let star_mismatch = ((right_star.value - kappa) / kappa).abs();
        if star_mismatch > 1e-6 {
            log::warn!("adjoint Perron root differs by {star_mismatch:e} at s = {s}");
        }
        Ok(SpectralSolution {
            s,
            kappa,
            residual: right.residual,
            grid: self.grid().clone(),
            r_s,
            nu_s,
            kappa_star: right_star.value,
            r_s_star,
            nu_s_star,
            residual_left: left.residual,
            residual_star: right_star.residual.max(left_star.residual),
            iterations: right.iterations,
            convergence_rate: right.rate,
        })
    }

    /// `R_{s,z} φ` at the nodes.
    pub fn apply_perturbed(&self, sol: &SpectralSolution, z: Complex64, q: f64, phi: &[Complex64]) -> Vec<Complex64> {
        let m = self.forward.perturbed_matrix(sol.s, z, q, sol.kappa, &sol.r_s);
        let mut out = vec![Complex64::default(); phi.len()];
        m.mul_vec(phi, &mut out);
        out
    }

    /// Dominant eigenvalue of `R_{s,z}` and the modulus ratio of the next one.
    pub fn dominant_eigenvalue(&self, sol: &SpectralSolution, z: Complex64, q: f64) -> Result<PerturbedSpectrum> {
        let m = self.forward.perturbed_matrix(sol.s, z, q, sol.kappa, &sol.r_s);
        let pi: Vec<f64> = sol.nu_s.iter().zip(&sol.r_s).map(|(a, b)| a * b).collect();
        let (lambda, right, iterations) = complex_power(&m, &pi)?;
        let mt = m.transpose();
        let (_, left, _) = complex_power(&mt, &sol.r_s.iter().map(|_| 1.0).collect::<Vec<_>>())?;
        let second = deflated_modulus(&m, &right, &left);
        let gap = if lambda.norm() > 0.0 { second / lambda.norm() } else { f64::NAN };
        let degenerate = !(gap < 1.0 - 1e-3);
        if degenerate {
            log::warn!("spectral gap of R_(s,z) is degenerate: |lambda2/lambda1| = {gap}");
        }
        Ok(PerturbedSpectrum { s: sol.s, z, lambda_sz: lambda, gap, iterations, degenerate })
    }
}

fn normalize_pair(mut r: Vec<f64>, mut nu: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let mass = compensated_sum(nu.iter().copied());
    nu.iter_mut().for_each(|v| *v = (*v / mass).max(0.0));
    let pair = compensated_sum(nu.iter().zip(&r).map(|(a, b)| a * b));
    r.iter_mut().for_each(|v| *v /= pair);
    (r, nu)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbedSpectrum {
    pub s: f64,
    pub z: Complex64,
    pub lambda_sz: Complex64,
    /// `|λ₂| / |λ₁|` of the node matrix.
    pub gap: f64,
    pub iterations: usize,
    pub degenerate: bool,
}

fn max_abs(v: &[Complex64]) -> f64 {
    v.iter().fold(0.0f64, |a, b| a.max(b.norm()))
}

fn pairing(a: &[f64], v: &[Complex64]) -> Complex64 {
    let mut re = CompensatedSum::new();
    let mut im = CompensatedSum::new();
    for (x, y) in a.iter().zip(v) {
        re.add(x * y.re);
        im.add(x * y.im);
    }
    Complex64::new(re.value(), im.value())
}

/// Complex power iteration; the eigenvalue is read off through the pairing
/// `⟨a, Av⟩ / ⟨a, v⟩`.
fn complex_power(m: &Csr<Complex64>, a: &[f64]) -> Result<(Complex64, Vec<Complex64>, usize)> {
    let r = m.nrows;
    let mut v = vec![Complex64::new(1.0, 0.0); r];
    let mut w = vec![Complex64::default(); r];
    let mut prev = Complex64::new(f64::NAN, 0.0);
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    for it in 1..=MAX_ITERATIONS {
        m.mul_vec(&v, &mut w);
        let den = pairing(a, &v);
        let lam = if den.norm() > 1e-300 { pairing(a, &w) / den } else { Complex64::new(max_abs(&w), 0.0) };
        let vn = max_abs(&v);
        let resid = w.iter().zip(&v).fold(0.0f64, |acc, (wi, vi)| acc.max((wi - lam * vi).norm()))
            / (lam.norm().max(1e-300) * vn);
        if resid < 0.5 * best {
            best = resid;
            since_best = 0;
        } else {
            since_best += 1;
        }
        let rel = (lam - prev).norm() / lam.norm().max(1e-300);
        let scale = max_abs(&w);
        if !(scale > 0.0) || !scale.is_finite() {
            return Ok((lam, v, it));
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / scale;
        }
        if rel < 1e-14 && (resid < 1e-13 || since_best > 200) {
            return Ok((lam, v, it));
        }
        prev = lam;
    }
    Err(Error::NonConvergence { iterations: MAX_ITERATIONS, gap: best })
}

/// Growth rate of `A` restricted to the complement of the dominant pair
/// `(u, w)`, by power iteration.
fn deflated_modulus(m: &Csr<Complex64>, u: &[Complex64], w: &[Complex64]) -> f64 {
    let r = m.nrows;
    let wu: Complex64 = w.iter().zip(u).map(|(a, b)| a * b).sum();
    if wu.norm() == 0.0 {
        return f64::NAN;
    }
    let project = |v: &mut [Complex64]| {
        let c: Complex64 = w.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<Complex64>() / wu;
        for (vi, ui) in v.iter_mut().zip(u) {
            *vi -= c * ui;
        }
    };
    let mut v: Vec<Complex64> = (0..r).map(|j| Complex64::new((1.0 + j as f64).cos(), (0.5 * j as f64).sin())).collect();
    project(&mut v);
    let mut out = vec![Complex64::default(); r];
    let mut growth = 0.0;
    let mut prev = f64::NAN;
    for it in 0..2000 {
        let n = max_abs(&v);
        if n < 1e-290 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= n);
        m.mul_vec(&v, &mut out);
        project(&mut out);
        let g = max_abs(&out);
        // Two-step geometric mean damps oscillation between conjugate pairs.
        growth = if it > 0 { (g * prev).sqrt() } else { g };
        if it > 50 && ((growth - g).abs() < 1e-8 * growth.max(1e-300)) {
            break;
        }
        prev = g;
        std::mem::swap(&mut v, &mut out);
    }
    growth
}

/// Convenience wrapper: build both discretizations and solve at `s`.
pub fn solve_eigen(ensemble: &MatrixEnsemble, s: f64, grid: &SphereGrid) -> Result<SpectralSolution> {
    SpectralProblem::new(ensemble, grid)?.solve(s)
}

/// Sup-norm relative discrepancy between `r_s` and `∫|⟨x,y⟩|^s ν_s*(dy)`.
pub fn cross_check_rs(sol: &SpectralSolution) -> f64 {
    let grid = &sol.grid;
    let rebuilt: Vec<f64> = grid
        .nodes
        .iter()
        .map(|x| {
            compensated_sum(grid.nodes.iter().zip(&sol.nu_s_star).map(|(y, w)| {
                let dot: f64 = x.coords().iter().zip(y.coords()).map(|(a, b)| a * b).sum();
                w * dot.abs().powf(sol.s)
            }))
        })
        .collect();
    let scale = sol.nu_of(&rebuilt);
    let rmax = sol.r_s.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    rebuilt
        .iter()
        .zip(&sol.r_s)
        .fold(0.0f64, |a, (x, r)| a.max((x / scale - r).abs()))
        / rmax
}

/// `π_s(φ) = ν_s(φ r_s) / ν_s(r_s)`.
pub fn stationary_pi(sol: &SpectralSolution, phi: &[f64]) -> f64 {
    let num = compensated_sum(sol.nu_s.iter().zip(&sol.r_s).zip(phi).map(|((n, r), p)| n * r * p));
    let den = compensated_sum(sol.nu_s.iter().zip(&sol.r_s).map(|(n, r)| n * r));
    num / den
}
