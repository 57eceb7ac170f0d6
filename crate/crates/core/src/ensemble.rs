//! Finitely supported matrix laws μ and desk-scale condition checks.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::is_near_rational;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Invertible,
    Positive,
}

/// On-disk form of an ensemble; field names are part of the CLI contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub dim: usize,
    pub kind: MatrixKind,
    pub atoms: Vec<Vec<Vec<f64>>>,
    pub probs: Vec<f64>,
}

/// A law μ = Σ p_i δ_{g_i} on d×d real matrices.
#[derive(Debug, Clone)]
pub struct MatrixEnsemble {
    dim: usize,
    kind: MatrixKind,
    atoms: Vec<DMatrix<f64>>,
    probs: Vec<f64>,
    sampler: WeightedIndex<f64>,
}

const PROB_TOL: f64 = 1e-12;
const SINGULAR_TOL: f64 = 1e-14;

impl MatrixEnsemble {
    pub fn new(kind: MatrixKind, atoms: Vec<DMatrix<f64>>, probs: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidEnsemble("no atoms".into()));
        }
        if atoms.len() != probs.len() {
            return Err(Error::InvalidEnsemble(format!(
                "{} atoms but {} probabilities",
                atoms.len(),
                probs.len()
            )));
        }
        let dim = atoms[0].nrows();
        if dim == 0 {
            return Err(Error::InvalidEnsemble("dimension must be at least 1".into()));
        }
        for (i, g) in atoms.iter().enumerate() {
            if g.nrows() != dim || g.ncols() != dim {
                return Err(Error::InvalidEnsemble(format!(
                    "atom {i} is {}x{}, expected {dim}x{dim}",
                    g.nrows(),
                    g.ncols()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidEnsemble(format!("atom {i} has a non-finite entry")));
            }
            match kind {
                MatrixKind::Invertible => {
                    let det = g.determinant();
                    if det.abs() < SINGULAR_TOL {
                        return Err(Error::Singular { det });
                    }
                }
                MatrixKind::Positive => {
                    if g.iter().any(|&v| v < 0.0) {
                        return Err(Error::InvalidEnsemble(format!(
                            "atom {i} has a negative entry"
                        )));
                    }
                    if !is_allowable(g) {
                        return Err(Error::InvalidEnsemble(format!(
                            "atom {i} is not allowable (a row or column has no positive entry)"
                        )));
                    }
                }
            }
        }
        if probs.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::InvalidEnsemble("probabilities must be strictly positive".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidEnsemble(format!("probabilities sum to {total}, not 1")));
        }
        let sampler = WeightedIndex::new(&probs)
            .map_err(|e| Error::InvalidEnsemble(format!("bad probabilities: {e}")))?;
        Ok(Self { dim, kind, atoms, probs, sampler })
    }

    pub fn from_config(cfg: &EnsembleConfig) -> Result<Self> {
        let mut atoms = Vec::with_capacity(cfg.atoms.len());
        for (i, rows) in cfg.atoms.iter().enumerate() {
            if rows.len() != cfg.dim || rows.iter().any(|r| r.len() != cfg.dim) {
                return Err(Error::InvalidEnsemble(format!(
                    "atom {i} is not a {d}x{d} matrix",
                    d = cfg.dim
                )));
            }
            atoms.push(DMatrix::from_fn(cfg.dim, cfg.dim, |r, c| rows[r][c]));
        }
        Self::new(cfg.kind, atoms, cfg.probs.clone())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: EnsembleConfig = serde_json::from_str(text)?;
        Self::from_config(&cfg)
    }

    pub fn to_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            dim: self.dim,
            kind: self.kind,
            atoms: self
                .atoms
                .iter()
                .map(|g| (0..self.dim).map(|r| (0..self.dim).map(|c| g[(r, c)]).collect()).collect())
                .collect(),
            probs: self.probs.clone(),
        }
    }

    /// Scalar law on positive reals: atoms `[[a_i]]`.
    pub fn scalar(values: &[f64], probs: &[f64]) -> Result<Self> {
        let atoms = values.iter().map(|&a| DMatrix::from_element(1, 1, a)).collect();
        let kind = if values.iter().all(|&a| a > 0.0) {
            MatrixKind::Positive
        } else {
            MatrixKind::Invertible
        };
        Self::new(kind, atoms, probs.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn atoms(&self) -> &[DMatrix<f64>] {
        &self.atoms
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Ensemble of transposed atoms (the law of g^T), used by `P_s*`.
    pub fn transposed(&self) -> Self {
        let atoms = self.atoms.iter().map(|g| g.transpose()).collect();
        Self::new(self.kind, atoms, self.probs.clone()).expect("transpose preserves validity")
    }

    /// Draws an atom index with probability `p_i`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sampler.sample(rng)
    }

    /// Scalar logs `log a_i` when `d = 1`.
    pub fn scalar_logs(&self) -> Option<Vec<f64>> {
        (self.dim == 1).then(|| self.atoms.iter().map(|g| g[(0, 0)].abs().ln()).collect())
    }
}

pub fn is_allowable(g: &DMatrix<f64>) -> bool {
    let rows_ok = (0..g.nrows()).all(|r| (0..g.ncols()).any(|c| g[(r, c)] > 0.0));
    let cols_ok = (0..g.ncols()).all(|c| (0..g.nrows()).any(|r| g[(r, c)] > 0.0));
    rows_ok && cols_ok
}

/// Operator norm ‖g‖ (largest singular value).
pub fn operator_norm(g: &DMatrix<f64>) -> f64 {
    if g.nrows() == 1 {
        return g[(0, 0)].abs();
    }
    g.clone().singular_values().max()
}

/// ι(g) = inf over the chart of |gx|.
///
/// Invertible: the smallest singular value. Positive: a dense grid over the
/// positive quadrant refined by projected descent, because the minimizer can
/// sit on the boundary or in the interior.
pub fn iota(g: &DMatrix<f64>, kind: MatrixKind) -> Result<f64> {
    let d = g.nrows();
    if d == 1 {
        let v = g[(0, 0)].abs();
        if kind == MatrixKind::Invertible && v < SINGULAR_TOL {
            return Err(Error::Singular { det: g[(0, 0)] });
        }
        return Ok(v);
    }
    match kind {
        MatrixKind::Invertible => {
            let det = g.determinant();
            if det.abs() < SINGULAR_TOL {
                return Err(Error::Singular { det });
            }
            Ok(g.clone().singular_values().min())
        }
        MatrixKind::Positive => Ok(positive_iota(g)),
    }
}

fn norm_of(g: &DMatrix<f64>, x: &[f64]) -> f64 {
    let d = g.nrows();
    (0..d)
        .map(|r| {
            let v: f64 = (0..d).map(|c| g[(r, c)] * x[c]).sum();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

fn positive_iota(g: &DMatrix<f64>) -> f64 {
    let d = g.nrows();
    if d == 2 {
        let f = |t: f64| norm_of(g, &[t.cos(), t.sin()]);
        let m = 4096;
        let h = std::f64::consts::FRAC_PI_2 / m as f64;
        let (mut best_k, mut best) = (0, f64::INFINITY);
        for k in 0..=m {
            let v = f(k as f64 * h);
            if v < best {
                best = v;
                best_k = k;
            }
        }
        let lo = (best_k as f64 - 1.0).max(0.0) * h;
        let hi = ((best_k + 1) as f64 * h).min(std::f64::consts::FRAC_PI_2);
        let (_, neg) = crate::numeric::golden_max(lo, hi, 1e-12, |t| -f(t));
        return best.min(-neg);
    }
    // d ≥ 3: low-discrepancy start points, then projected gradient descent on
    // |gx|^2 over the positive part of the sphere.
    let gtg = g.transpose() * g;
    let quad = |x: &[f64]| -> f64 {
        let mut acc = 0.0;
        for r in 0..d {
            for c in 0..d {
                acc += x[r] * gtg[(r, c)] * x[c];
            }
        }
        acc
    };
    let project = |x: &mut Vec<f64>| {
        for v in x.iter_mut() {
            *v = v.max(0.0);
        }
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            for v in x.iter_mut() {
                *v /= n;
            }
        }
    };
    let mut starts: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            e
        })
        .collect();
    for k in 1..=4000u64 {
        let mut x: Vec<f64> = (0..d)
            .map(|j| {
                let u = crate::numeric::radical_inverse(k, crate::numeric::PRIMES[j % 16]);
                crate::numeric::normal_quantile(u.clamp(1e-12, 1.0 - 1e-12)).abs()
            })
            .collect();
        project(&mut x);
        starts.push(x);
    }
    starts.sort_by(|a, b| quad(a).total_cmp(&quad(b)));
    let mut best = f64::INFINITY;
    for start in starts.into_iter().take(8) {
        let mut x = start;
        let mut fx = quad(&x);
        let mut step = 0.1;
        while step > 1e-14 {
            let grad: Vec<f64> = (0..d)
                .map(|r| 2.0 * (0..d).map(|c| gtg[(r, c)] * x[c]).sum::<f64>())
                .collect();
            let mut y: Vec<f64> = x.iter().zip(&grad).map(|(a, b)| a - step * b).collect();
            project(&mut y);
            let fy = quad(&y);
            if fy < fx - 1e-18 {
                x = y;
                fx = fy;
                step *= 1.5;
            } else {
                step *= 0.5;
            }
        }
        best = best.min(fx.sqrt());
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub allowable: bool,
    pub strictly_positive_product_found: bool,
    pub strictly_positive_depth: Option<usize>,
    pub proximal_product_found: bool,
    pub proximal_depth: Option<usize>,
    pub nonarithmetic_heuristic: bool,
    /// For d = 1: the span h when all log|a_i| lie in a single coset a + hZ.
    pub scalar_lattice_span: Option<f64>,
    pub depth_searched: usize,
    pub products_examined: usize,
    pub i_mu_note: String,
}

#[derive(Debug, Clone, Copy)]
pub struct ValidateOptions {
    pub depth: usize,
    pub proximal_gap: f64,
    pub max_products: usize,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self { depth: 6, proximal_gap: 1e-6, max_products: 1 << 14 }
    }
}

/// Heuristic certificates for the standing conditions, searched over products
/// of atoms up to `opts.depth`. Flags read "found at depth k", never "holds".
pub fn validate(ensemble: &MatrixEnsemble, opts: &ValidateOptions) -> ConditionReport {
    let d = ensemble.dim();
    let allowable = ensemble.atoms().iter().all(is_allowable);
    let mut sp_depth = None;
    let mut prox_depth = None;
    let mut prox_logs: Vec<f64> = Vec::new();
    let mut examined = 0usize;
    let mut frontier: Vec<DMatrix<f64>> = vec![DMatrix::identity(d, d)];
    for depth in 1..=opts.depth {
        let mut next = Vec::new();
        'outer: for prefix in &frontier {
            for g in ensemble.atoms() {
                if examined >= opts.max_products {
                    break 'outer;
                }
                let p = g * prefix;
                examined += 1;
                if sp_depth.is_none() && p.iter().all(|&v| v > 0.0) {
                    sp_depth = Some(depth);
                }
                if let Some(log_lambda) = proximal_log_eigenvalue(&p, opts.proximal_gap) {
                    prox_depth.get_or_insert(depth);
                    if prox_logs.len() < 256 {
                        prox_logs.push(log_lambda);
                    }
                }
                next.push(normalize_by_norm(p));
            }
        }
        frontier = next;
        if examined >= opts.max_products {
            break;
        }
    }
    let nonarithmetic = has_irrational_ratio(&prox_logs);
    let scalar_lattice_span = ensemble.scalar_logs().and_then(|logs| scalar_lattice(&logs));
    ConditionReport {
        allowable,
        strictly_positive_product_found: sp_depth.is_some(),
        strictly_positive_depth: sp_depth,
        proximal_product_found: prox_depth.is_some(),
        proximal_depth: prox_depth,
        nonarithmetic_heuristic: nonarithmetic,
        scalar_lattice_span,
        depth_searched: opts.depth,
        products_examined: examined,
        i_mu_note: "finite support: every moment is finite, I_mu = [0, inf)".into(),
    }
}

fn normalize_by_norm(p: DMatrix<f64>) -> DMatrix<f64> {
    // Products are only inspected through eigenvalue ratios and signs, so a
    // positive rescaling keeps them comparable without overflow.
    let n = p.amax();
    if n > 0.0 {
        p / n
    } else {
        p
    }
}

/// log of the dominant eigenvalue modulus of `g` when it is algebraically simple
/// and separated from the next modulus by at least `rel_gap`.
fn proximal_log_eigenvalue(g: &DMatrix<f64>, rel_gap: f64) -> Option<f64> {
    let d = g.nrows();
    if d == 1 {
        let v = g[(0, 0)].abs();
        return (v > 0.0).then(|| v.ln());
    }
    let eig = g.clone().complex_eigenvalues();
    let mut mods: Vec<f64> = eig.iter().map(|c| c.norm()).collect();
    mods.sort_by(|a, b| b.total_cmp(a));
    let top = mods[0];
    if top <= 0.0 {
        return None;
    }
    ((top - mods[1]) / top > rel_gap).then(|| top.ln())
}

fn has_irrational_ratio(logs: &[f64]) -> bool {
    // Products are rescaled during the search, so compare raw atom-level
    // logs only through ratios of nonzero values.
    let nz: Vec<f64> = logs.iter().copied().filter(|v| v.abs() > 1e-12).collect();
    for i in 0..nz.len() {
        for j in (i + 1)..nz.len() {
            let r = nz[j] / nz[i];
            if !is_near_rational(r, 64, 1e-9) {
                return true;
            }
        }
    }
    false
}

/// For scalar laws: if every difference log a_i - log a_0 is an integer multiple
/// of one span (within tolerance), the walk is lattice; returns that span.
fn scalar_lattice(logs: &[f64]) -> Option<f64> {
    let base = logs[0];
    let diffs: Vec<f64> = logs.iter().map(|v| v - base).filter(|v| v.abs() > 1e-12).collect();
    if diffs.is_empty() {
        return Some(0.0);
    }
    let h0 = diffs[0];
    if diffs.iter().all(|&v| is_near_rational(v / h0, 64, 1e-9)) {
        // span = h0 / lcm of denominators
        let mut den = 1u64;
        for &v in &diffs {
            let r = v / h0;
            let q = (1..=64u64)
                .find(|&q| ((r * q as f64).round() / q as f64 - r).abs() < 1e-9)
                .unwrap_or(1);
            den = lcm(den, q);
        }
        return Some(h0.abs() / den as f64);
    }
    None
}

fn lcm(a: u64, b: u64) -> u64 {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}
