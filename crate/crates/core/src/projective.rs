//! Projective action of matrices on the unit sphere and the norm cocycle.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::MatrixEnsemble;
use crate::numeric::CompensatedSum;
use crate::{Error, Result};

/// Smallest |gx| accepted by [`act`].
pub const MIN_ACTION_NORM: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chart {
    /// The whole sphere with `x ~ -x`.
    Full,
    /// Unit vectors with nonnegative coordinates.
    PositiveQuadrant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereDirection {
    coords: Vec<f64>,
    chart: Chart,
}

impl SphereDirection {
    /// Normalizes `v`; under [`Chart::Full`] the sign is fixed so the first
    /// nonzero coordinate is positive.
    pub fn new(v: Vec<f64>, chart: Chart) -> Result<Self> {
        let n = norm(&v);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateAction { norm: n });
        }
        let mut coords: Vec<f64> = v.into_iter().map(|c| c / n).collect();
        match chart {
            Chart::Full => canonicalize(&mut coords),
            Chart::PositiveQuadrant => {
                if coords.iter().any(|&c| c < -1e-12) {
                    return Err(Error::OutOfDomain(
                        "direction has a negative coordinate but the chart is the positive quadrant".into(),
                    ));
                }
                for c in &mut coords {
                    *c = c.max(0.0);
                }
            }
        }
        Ok(Self { coords, chart })
    }

    /// Unit basis vector `e_i`.
    pub fn basis(dim: usize, i: usize, chart: Chart) -> Self {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Self { coords: v, chart }
    }

    pub(crate) fn from_unit(coords: Vec<f64>, chart: Chart) -> Self {
        Self { coords, chart }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn chart(&self) -> Chart {
        self.chart
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    // Scaled to stay finite for large entries.
    let m = v.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    m * v.iter().map(|&c| (c / m) * (c / m)).sum::<f64>().sqrt()
}

pub(crate) fn canonicalize(v: &mut [f64]) {
    if let Some(&first) = v.iter().find(|&&c| c != 0.0) {
        if first < 0.0 {
            for c in v.iter_mut() {
                *c = -*c;
            }
        }
    }
}

/// `out = g x`.
#[inline]
pub(crate) fn mat_vec(g: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for c in 0..d {
            acc += g[(r, c)] * x[c];
        }
        *o = acc;
    }
}

/// In-place action on a raw unit vector; returns `log|gx|`.
#[inline]
pub(crate) fn act_in_place(g: &DMatrix<f64>, x: &mut [f64], buf: &mut [f64], chart: Chart) -> Result<f64> {
    mat_vec(g, x, buf);
    let n = norm(buf);
    if !(n > MIN_ACTION_NORM) {
        return Err(Error::DegenerateAction { norm: n });
    }
    for (xi, bi) in x.iter_mut().zip(buf.iter()) {
        *xi = bi / n;
    }
    match chart {
        Chart::Full => canonicalize(x),
        Chart::PositiveQuadrant => {
            for c in x.iter_mut() {
                *c = c.max(0.0);
            }
        }
    }
    Ok(n.ln())
}

/// `(g·x, log|gx|)`.
pub fn act(g: &DMatrix<f64>, x: &SphereDirection) -> Result<(SphereDirection, f64)> {
    let mut y = x.coords.clone();
    let mut buf = vec![0.0; y.len()];
    let inc = act_in_place(g, &mut y, &mut buf, x.chart)?;
    Ok((SphereDirection { coords: y, chart: x.chart }, inc))
}

/// `|sin θ(x, y)|`, via the norm of the component of `y` orthogonal to `x`.
pub fn angular_distance(x: &SphereDirection, y: &SphereDirection) -> f64 {
    let a = x.coords();
    let b = y.coords();
    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
    let resid: Vec<f64> = b.iter().zip(a).map(|(q, p)| q - dot * p).collect();
    norm(&resid).min(1.0)
}

/// `m(x, y) = sup{λ > 0 : λ y ≤ x}`.
fn hilbert_m(x: &[f64], y: &[f64]) -> f64 {
    let mut m = f64::INFINITY;
    for (&xi, &yi) in x.iter().zip(y) {
        if yi > 0.0 {
            m = m.min(xi / yi);
        }
    }
    if m.is_finite() {
        m
    } else {
        0.0
    }
}

/// Hilbert cross-ratio distance on the positive quadrant, valued in [0, 1].
pub fn hilbert_distance(x: &SphereDirection, y: &SphereDirection) -> f64 {
    let p = hilbert_m(x.coords(), y.coords()) * hilbert_m(y.coords(), x.coords());
    ((1.0 - p) / (1.0 + p)).clamp(0.0, 1.0)
}

/// One realization of `X_k = G_k·x` and `log|G_k x|`, `k = 1..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkPath {
    pub start: SphereDirection,
    pub directions: Vec<SphereDirection>,
    pub loggains: Vec<f64>,
    pub atoms: Vec<usize>,
}

impl WalkPath {
    pub fn final_loggain(&self) -> f64 {
        self.loggains.last().copied().unwrap_or(0.0)
    }

    pub fn final_direction(&self) -> &SphereDirection {
        self.directions.last().unwrap_or(&self.start)
    }
}

/// Walks along a fixed atom sequence, applying `g_{atoms[0]}` first.
pub fn walk_indices(ensemble: &MatrixEnsemble, x: &SphereDirection, atoms: &[usize]) -> Result<WalkPath> {
    let mut cur = x.clone();
    let mut acc = CompensatedSum::new();
    let mut directions = Vec::with_capacity(atoms.len());
    let mut loggains = Vec::with_capacity(atoms.len());
    for &i in atoms {
        let (next, inc) = act(&ensemble.atoms()[i], &cur)?;
        acc.add(inc);
        loggains.push(acc.value());
        directions.push(next.clone());
        cur = next;
    }
    Ok(WalkPath { start: x.clone(), directions, loggains, atoms: atoms.to_vec() })
}

/// Samples `g_1, …, g_n` from μ and records the walk.
pub fn walk<R: Rng + ?Sized>(ensemble: &MatrixEnsemble, x: &SphereDirection, n: usize, rng: &mut R) -> Result<WalkPath> {
    if n == 0 {
        return Err(Error::OutOfDomain("walk length must be at least 1".into()));
    }
    let atoms: Vec<usize> = (0..n).map(|_| ensemble.sample(rng)).collect();
    walk_indices(ensemble, x, &atoms)
}

/// `log|g_{atoms[n-1]} ⋯ g_{atoms[0]} x|` from the explicit matrix product,
/// rescaled at each step so long products stay finite.
pub fn full_product_loggain(ensemble: &MatrixEnsemble, x: &SphereDirection, atoms: &[usize]) -> f64 {
    let d = ensemble.dim();
    let mut prod = DMatrix::<f64>::identity(d, d);
    let mut log_scale = 0.0;
    for &i in atoms {
        prod = &ensemble.atoms()[i] * prod;
        let m = prod.amax();
        prod /= m;
        log_scale += m.ln();
    }
    let mut out = vec![0.0; d];
    mat_vec(&prod, x.coords(), &mut out);
    log_scale + norm(&out).ln()
}

/// Running product `G_k` with a separate log scale, for norm events.
#[derive(Debug, Clone)]
pub(crate) struct ScaledProduct {
    pub mat: DMatrix<f64>,
    pub log_scale: f64,
}

impl ScaledProduct {
    pub fn identity(d: usize) -> Self {
        Self { mat: DMatrix::identity(d, d), log_scale: 0.0 }
    }

    pub fn push(&mut self, g: &DMatrix<f64>) {
        self.mat = g * &self.mat;
        let m = self.mat.amax();
        if m > 0.0 {
            self.mat /= m;
            self.log_scale += m.ln();
        }
    }

    pub fn log_norm(&self) -> f64 {
        self.log_scale + crate::ensemble::operator_norm(&self.mat).ln()
    }

    /// `log|G e_i|` for each basis vector.
    pub fn log_columns(&self) -> Vec<f64> {
        (0..self.mat.ncols())
            .map(|c| self.log_scale + self.mat.column(c).norm().ln())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::MatrixKind;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pos_example() -> MatrixEnsemble {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]);
        MatrixEnsemble::new(MatrixKind::Positive, vec![a, b], vec![0.5, 0.5]).unwrap()
    }

    fn dir(v: &[f64], chart: Chart) -> SphereDirection {
        SphereDirection::new(v.to_vec(), chart).unwrap()
    }

    #[test]
    fn act_examples() {
        let x = dir(&[0.6, 0.8], Chart::Full);
        let (y, inc) = act(&DMatrix::identity(2, 2), &x).unwrap();
        assert_eq!(inc, 0.0);
        assert!(angular_distance(&x, &y) < 1e-15);
        let (y, inc) = act(&(DMatrix::identity(2, 2) * 2.0), &x).unwrap();
        assert!((inc - 2f64.ln()).abs() < 1e-15);
        assert!(angular_distance(&x, &y) < 1e-15);
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        let (y, inc) = act(&g, &dir(&[1.0, 0.0], Chart::PositiveQuadrant)).unwrap();
        assert!((inc - 0.5 * 5f64.ln()).abs() < 1e-15);
        assert!((y.coords()[0] - 2.0 / 5f64.sqrt()).abs() < 1e-15);
        assert!((y.coords()[1] - 1.0 / 5f64.sqrt()).abs() < 1e-15);
        let z = DMatrix::zeros(2, 2);
        assert!(matches!(act(&z, &x), Err(Error::DegenerateAction { .. })));
    }

    #[test]
    fn metric_examples() {
        let e1 = dir(&[1.0, 0.0], Chart::PositiveQuadrant);
        let e2 = dir(&[0.0, 1.0], Chart::PositiveQuadrant);
        let d11 = dir(&[1.0, 1.0], Chart::PositiveQuadrant);
        assert_eq!(angular_distance(&e1, &e1), 0.0);
        assert!((angular_distance(&e1, &e2) - 1.0).abs() < 1e-15);
        assert!((angular_distance(&e1, &d11) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(hilbert_distance(&d11, &d11), 0.0);
        assert_eq!(hilbert_distance(&e1, &e2), 1.0);
        let a = dir(&[2.0, 1.0], Chart::PositiveQuadrant);
        let b = dir(&[1.0, 2.0], Chart::PositiveQuadrant);
        assert!((hilbert_distance(&a, &b) - 0.6).abs() < 1e-15);
        // x and -x are the same projective point.
        let p = dir(&[0.3, -0.4], Chart::Full);
        let q = dir(&[-0.3, 0.4], Chart::Full);
        assert_eq!(p, q);
        assert!(angular_distance(&p, &q) < 1e-15);
    }

    #[test]
    fn walk_examples() {
        let id = MatrixEnsemble::new(
            MatrixKind::Invertible,
            vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
            vec![0.5, 0.5],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = dir(&[1.0, 2.0], Chart::Full);
        let w = walk(&id, &x, 5, &mut rng).unwrap();
        assert_eq!(w.loggains, vec![0.0; 5]);

        let sc = MatrixEnsemble::scalar(&[1f64.exp(), (-(2f64.sqrt())).exp()], &[0.5, 0.5]).unwrap();
        let one = dir(&[1.0], Chart::PositiveQuadrant);
        let w = walk(&sc, &one, 40, &mut rng).unwrap();
        let k = w.atoms.iter().filter(|&&i| i == 0).count() as f64;
        let expect = k - (40.0 - k) * 2f64.sqrt();
        assert!((w.final_loggain() - expect).abs() < 1e-12);
        assert!(walk(&sc, &one, 0, &mut rng).is_err());
    }

    #[test]
    fn summed_increments_match_full_product() {
        let e = pos_example();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [1usize, 7, 25, 50] {
            let x = dir(&[0.3, 0.7], Chart::PositiveQuadrant);
            let w = walk(&e, &x, n, &mut rng).unwrap();
            let full = full_product_loggain(&e, &x, &w.atoms);
            assert!((full - w.final_loggain()).abs() < 1e-9, "n={n}");
        }
    }

    proptest! {
        #[test]
        fn cocycle_additivity(seed in 0u64..1000, n in 1usize..30, m in 1usize..30) {
            let e = pos_example();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = dir(&[1.0, 0.5], Chart::PositiveQuadrant);
            let first = walk(&e, &x, n, &mut rng).unwrap();
            let second = walk(&e, first.final_direction(), m, &mut rng).unwrap();
            let mut all = first.atoms.clone();
            all.extend(&second.atoms);
            let joined = walk_indices(&e, &x, &all).unwrap();
            let split = first.final_loggain() + second.final_loggain();
            prop_assert!((joined.final_loggain() - split).abs() < 1e-12 * (1.0 + split.abs()));
        }

        #[test]
        fn positive_action_stays_in_quadrant(a in 0.0f64..1.0, b in 0.0f64..1.0, seed in 0u64..100) {
            prop_assume!(a + b > 1e-3);
            let e = pos_example();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = walk(&e, &dir(&[a, b], Chart::PositiveQuadrant), 10, &mut rng).unwrap();
            for d in &w.directions {
                prop_assert!(d.coords().iter().all(|&c| c >= 0.0));
                prop_assert!((norm(d.coords()) - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn metrics_symmetric_and_bounded(a in 0.01f64..1.0, b in 0.01f64..1.0, c in 0.01f64..1.0, d in 0.01f64..1.0) {
            let x = dir(&[a, b], Chart::PositiveQuadrant);
            let y = dir(&[c, d], Chart::PositiveQuadrant);
            let (ad, ad2) = (angular_distance(&x, &y), angular_distance(&y, &x));
            let (hd, hd2) = (hilbert_distance(&x, &y), hilbert_distance(&y, &x));
            prop_assert!((ad - ad2).abs() < 1e-14 && (0.0..=1.0).contains(&ad));
            prop_assert!((hd - hd2).abs() < 1e-14 && (0.0..=1.0).contains(&hd));
            prop_assert!(angular_distance(&x, &x) < 1e-7 && hilbert_distance(&x, &x) < 1e-12);
        }
    }
}
