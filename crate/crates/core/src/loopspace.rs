//! Truncated real Fourier representation of loops `T -> R^n`, `T = R/Z`.
//!
//! A loop of degree `K` is stored as
//!
//! ```text
//! u(t) = a_0 + sum_{k=1..K} a_k cos(2 pi k t) + b_k sin(2 pi k t),   a_k, b_k in R^n
//! ```
//!
//! with coefficients laid out as `[a_0 | a_1 b_1 | a_2 b_2 | ...]`, each block of
//! length `n`. Norms are normalized so that `||u||_0` is the L^2 norm on `[0, 1]`:
//! the constant mode has weight 1 and every cosine/sine coefficient of a mode
//! `k >= 1` has weight 1/2 (the basis-normalization weight `w = 2`). This is the
//! only place where that convention is fixed; everything else goes through
//! [`sobolev_weight`] and [`metric_weight`].
//!
//! Two families of weights are used:
//!
//! * [`sobolev_weight`] `(1 + k)^{2r}` defines the norms `||.||_r` in which all
//!   estimates and operator norms are reported.
//! * [`metric_weight`] `(2 pi k)^{2r}` (and 1 on constants) is the equivalent
//!   homogeneous weight used for the mixed Riemannian metric on phase space.
//!   With it the symplectic operator `L` is self-adjoint with spectrum
//!   `{-1, 0, 1}` and `<L z, z> / 2` is exactly the Liouville pairing.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A fractional Sobolev exponent.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SobolevExponent(f64);

impl SobolevExponent {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(invalid("sobolev exponent", format!("{value} is not finite")));
        }
        Ok(Self(value))
    }

    /// Exponent `s` of the base component for the action functional, `s in (1/2, 3/4)`.
    pub fn for_action(value: f64) -> Result<Self> {
        Self::in_open_interval(value, 0.5, 0.75)
    }

    /// Exponent `s` admissible for the structural operators, `s in (1/2, 1)`.
    pub fn for_operators(value: f64) -> Result<Self> {
        Self::in_open_interval(value, 0.5, 1.0)
    }

    pub fn in_open_interval(value: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(value > lo && value < hi) {
            return Err(invalid(
                "sobolev exponent",
                format!("{value} outside the open interval ({lo}, {hi})"),
            ));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The fiber exponent `1 - s`.
    pub fn dual(self) -> f64 {
        1.0 - self.0
    }
}

/// Which trigonometric function a coefficient multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Cos,
    Sin,
}

/// Number of stored coefficients of an `R^n`-valued loop of degree `k`.
pub fn coeff_len(n: usize, k: usize) -> usize {
    n * (2 * k + 1)
}

/// Position of coefficient `(mode, part, comp)` in the flat layout.
///
/// Mode 0 only has a cosine part (the mean).
pub fn coeff_index(n: usize, mode: usize, part: Part, comp: usize) -> usize {
    debug_assert!(comp < n);
    if mode == 0 {
        debug_assert_eq!(part, Part::Cos);
        return comp;
    }
    let base = n + (mode - 1) * 2 * n;
    match part {
        Part::Cos => base + comp,
        Part::Sin => base + n + comp,
    }
}

/// Inverse of [`coeff_index`].
pub fn index_mode(n: usize, idx: usize) -> (usize, Part, usize) {
    if idx < n {
        return (0, Part::Cos, idx);
    }
    let rel = idx - n;
    let mode = rel / (2 * n) + 1;
    let within = rel % (2 * n);
    if within < n {
        (mode, Part::Cos, within)
    } else {
        (mode, Part::Sin, within - n)
    }
}

/// Per-coefficient weight of the `H^r` norm: `(1 + k)^{2r}`, times the basis normalization.
pub fn sobolev_weight(mode: usize, r: f64) -> f64 {
    if mode == 0 {
        1.0
    } else {
        0.5 * (1.0 + mode as f64).powf(2.0 * r)
    }
}

/// Per-coefficient weight of the homogeneous metric: `(2 pi k)^{2r}` on `k >= 1`, 1 on constants.
pub fn metric_weight(mode: usize, r: f64) -> f64 {
    if mode == 0 {
        1.0
    } else {
        0.5 * (TAU * mode as f64).powf(2.0 * r)
    }
}

/// L^2 weight of each coefficient (the `r = 0` case of both families).
pub fn l2_weight(mode: usize) -> f64 {
    if mode == 0 {
        1.0
    } else {
        0.5
    }
}

fn weights_by(n: usize, k: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    (0..coeff_len(n, k)).map(|i| f(index_mode(n, i).0)).collect()
}

pub fn sobolev_weights(n: usize, k: usize, r: f64) -> Vec<f64> {
    weights_by(n, k, |m| sobolev_weight(m, r))
}

pub fn metric_weights(n: usize, k: usize, r: f64) -> Vec<f64> {
    weights_by(n, k, |m| metric_weight(m, r))
}

pub fn l2_weights(n: usize, k: usize) -> Vec<f64> {
    weights_by(n, k, l2_weight)
}

/// Metric weights of the mixed space `H^s x H^{1-s}`, `q` block first.
pub fn mixed_metric_weights(n: usize, k: usize, s: f64) -> Vec<f64> {
    let mut w = metric_weights(n, k, s);
    w.extend(metric_weights(n, k, 1.0 - s));
    w
}

/// Truncated Fourier series of a loop `T -> R^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierLoop {
    n: usize,
    k: usize,
    coeffs: Vec<f64>,
}

impl FourierLoop {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self {
            n,
            k,
            coeffs: vec![0.0; coeff_len(n, k)],
        }
    }

    pub fn from_coeffs(n: usize, k: usize, coeffs: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(invalid("n", "dimension must be positive"));
        }
        if coeffs.len() != coeff_len(n, k) {
            return Err(Error::DimensionMismatch(format!(
                "expected {} coefficients for n = {n}, K = {k}, got {}",
                coeff_len(n, k),
                coeffs.len()
            )));
        }
        Ok(Self { n, k, coeffs })
    }

    pub fn constant(value: &[f64], k: usize) -> Self {
        let mut u = Self::zeros(value.len(), k);
        u.coeffs[..value.len()].copy_from_slice(value);
        u
    }

    /// A single basis function `amplitude * cos/sin(2 pi mode t) e_comp`.
    pub fn basis(n: usize, k: usize, mode: usize, part: Part, comp: usize, amplitude: f64) -> Self {
        let mut u = Self::zeros(n, k);
        u.coeffs[coeff_index(n, mode, part, comp)] = amplitude;
        u
    }

    /// Random trigonometric loop with Gaussian coefficients damped by `(1 + k)^{-decay}`.
    pub fn random<R: Rng + ?Sized>(n: usize, k: usize, decay: f64, rng: &mut R) -> Self {
        let coeffs = (0..coeff_len(n, k))
            .map(|i| {
                let mode = index_mode(n, i).0;
                let g: f64 = rng.sample(StandardNormal);
                g * (1.0 + mode as f64).powf(-decay)
            })
            .collect();
        Self { n, k, coeffs }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Truncation degree `K`.
    pub fn degree(&self) -> usize {
        self.k
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn coeff(&self, mode: usize, part: Part, comp: usize) -> f64 {
        self.coeffs[coeff_index(self.n, mode, part, comp)]
    }

    /// Mean value `a_0`.
    pub fn mean(&self) -> &[f64] {
        &self.coeffs[..self.n]
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = self.mean().to_vec();
        for mode in 1..=self.k {
            let (s, c) = (TAU * mode as f64 * t).sin_cos();
            for comp in 0..self.n {
                out[comp] += c * self.coeff(mode, Part::Cos, comp) + s * self.coeff(mode, Part::Sin, comp);
            }
        }
        out
    }

    pub fn sobolev_norm_sq(&self, r: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| sobolev_weight(index_mode(self.n, i).0, r) * c * c)
            .sum()
    }

    /// `||u||_r` with weights `(1 + |k|)^{2r}`.
    pub fn sobolev_norm(&self, r: f64) -> f64 {
        self.sobolev_norm_sq(r).sqrt()
    }

    /// L^2 pairing `int_0^1 u . v dt`.
    pub fn l2_inner(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.coeffs.len(), other.coeffs.len());
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .enumerate()
            .map(|(i, (a, b))| l2_weight(index_mode(self.n, i).0) * a * b)
            .sum()
    }

    fn map_modes(&self, f: impl Fn(usize) -> f64) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c * f(index_mode(self.n, i).0))
            .collect();
        Self {
            n: self.n,
            k: self.k,
            coeffs,
        }
    }

    /// `Delta^sigma u`: multiplier `(2 pi k)^{2 sigma}` on `k != 0`, zero on the mean.
    pub fn delta_power(&self, sigma: f64) -> Self {
        self.map_modes(|m| delta_multiplier(m, sigma))
    }

    /// `d/dt`: `(a_k, b_k) -> (2 pi k b_k, -2 pi k a_k)`.
    pub fn derivative(&self) -> Self {
        let mut out = Self::zeros(self.n, self.k);
        for mode in 1..=self.k {
            let w = TAU * mode as f64;
            for comp in 0..self.n {
                let a = self.coeff(mode, Part::Cos, comp);
                let b = self.coeff(mode, Part::Sin, comp);
                out.coeffs[coeff_index(self.n, mode, Part::Cos, comp)] = w * b;
                out.coeffs[coeff_index(self.n, mode, Part::Sin, comp)] = -w * a;
            }
        }
        out
    }

    /// Zero-pad or truncate to degree `k`.
    pub fn with_degree(&self, k: usize) -> Self {
        let mut out = Self::zeros(self.n, k);
        let len = coeff_len(self.n, k.min(self.k));
        out.coeffs[..len].copy_from_slice(&self.coeffs[..len]);
        out
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map_modes(|_| factor)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(
            (self.n, self.k),
            (other.n, other.k),
            "loops must share dimension and degree"
        );
        Self {
            n: self.n,
            k: self.k,
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// Scalar component `comp` as a loop in `R^1`.
    pub fn component(&self, comp: usize) -> Self {
        let coeffs = (0..coeff_len(1, self.k))
            .map(|i| {
                let (mode, part, _) = index_mode(1, i);
                self.coeff(mode, part, comp)
            })
            .collect();
        Self {
            n: 1,
            k: self.k,
            coeffs,
        }
    }

    pub fn to_record(&self, winding: &WindingVector) -> LoopRecord {
        LoopRecord {
            n: self.n,
            k: self.k,
            winding: winding.0.clone(),
            coeffs: self.coeffs.clone(),
        }
    }
}

/// Fourier multiplier of `Delta^sigma` on mode `k`.
pub fn delta_multiplier(mode: usize, sigma: f64) -> f64 {
    if mode == 0 {
        0.0
    } else {
        (TAU * mode as f64).powf(2.0 * sigma)
    }
}

/// JSON form of a loop: `{n, K, winding, coeffs}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub winding: Vec<i64>,
    pub coeffs: Vec<f64>,
}

impl LoopRecord {
    pub fn to_loop(&self) -> Result<(FourierLoop, WindingVector)> {
        if self.winding.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "winding has {} entries for n = {}",
                self.winding.len(),
                self.n
            )));
        }
        Ok((
            FourierLoop::from_coeffs(self.n, self.k, self.coeffs.clone())?,
            WindingVector(self.winding.clone()),
        ))
    }
}

/// Homotopy class of a base loop in `T^n`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WindingVector(pub Vec<i64>);

impl WindingVector {
    pub fn zero(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&m| m as f64).collect()
    }
}

/// Uniform sampling grid `t_j = j / N` used for pseudo-spectral evaluation.
#[derive(Clone, Debug)]
pub struct Grid {
    k: usize,
    samples: usize,
    // cos/sin(2 pi m t_j) for m = 1..=k, row-major by sample
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Grid {
    /// Grid resolving degree-`k` series exactly; requires `samples >= 2k + 1`.
    pub fn new(k: usize, samples: usize) -> Result<Self> {
        let required = 2 * k + 1;
        if samples < required {
            return Err(Error::GridTooCoarse {
                samples,
                degree: k,
                required,
            });
        }
        let mut cos = Vec::with_capacity(samples * k);
        let mut sin = Vec::with_capacity(samples * k);
        for j in 0..samples {
            let t = j as f64 / samples as f64;
            for m in 1..=k {
                let (s, c) = (TAU * m as f64 * t).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Ok(Self { k, samples, cos, sin })
    }

    /// Grid on which products of two degree-`k` series are alias-free (`4k + 1` samples).
    pub fn dealiased(k: usize) -> Self {
        Self::new(k, 4 * k + 1).expect("4k+1 >= 2k+1")
    }

    pub fn degree(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples == 0
    }

    pub fn time(&self, j: usize) -> f64 {
        j as f64 / self.samples as f64
    }

    /// Quadrature weight (uniform).
    pub fn weight(&self) -> f64 {
        1.0 / self.samples as f64
    }

    /// Value of the scalar basis function `(mode, part)` at sample `j`.
    #[inline]
    pub fn basis_value(&self, j: usize, mode: usize, part: Part) -> f64 {
        if mode == 0 {
            return 1.0;
        }
        let idx = j * self.k + mode - 1;
        match part {
            Part::Cos => self.cos[idx],
            Part::Sin => self.sin[idx],
        }
    }

    /// Samples `u(t_j)` as a row-major `samples x n` array.
    pub fn evaluate(&self, u: &FourierLoop) -> Vec<f64> {
        let n = u.dim();
        let kk = u.degree().min(self.k);
        assert!(u.degree() <= self.k, "loop degree exceeds grid degree");
        let mut out = vec![0.0; self.samples * n];
        for j in 0..self.samples {
            let row = &mut out[j * n..(j + 1) * n];
            row.copy_from_slice(u.mean());
            for m in 1..=kk {
                let c = self.cos[j * self.k + m - 1];
                let s = self.sin[j * self.k + m - 1];
                for (comp, value) in row.iter_mut().enumerate() {
                    *value += c * u.coeff(m, Part::Cos, comp) + s * u.coeff(m, Part::Sin, comp);
                }
            }
        }
        out
    }

    /// Discrete projection of samples onto degree `degree <= K` (exact inverse of
    /// [`Grid::evaluate`] on degree-`K` series).
    pub fn project(&self, values: &[f64], n: usize, degree: usize) -> Result<FourierLoop> {
        if values.len() != self.samples * n {
            return Err(Error::DimensionMismatch(format!(
                "expected {} samples of dimension {n}, got {} values",
                self.samples,
                values.len()
            )));
        }
        if degree > self.k {
            return Err(Error::GridTooCoarse {
                samples: self.samples,
                degree,
                required: 2 * degree + 1,
            });
        }
        let mut u = FourierLoop::zeros(n, degree);
        let inv = 1.0 / self.samples as f64;
        for j in 0..self.samples {
            let row = &values[j * n..(j + 1) * n];
            for (comp, v) in row.iter().enumerate() {
                u.coeffs[comp] += inv * v;
            }
            for m in 1..=degree {
                let c = self.cos[j * self.k + m - 1];
                let s = self.sin[j * self.k + m - 1];
                for (comp, v) in row.iter().enumerate() {
                    u.coeffs[coeff_index(n, m, Part::Cos, comp)] += 2.0 * inv * c * v;
                    u.coeffs[coeff_index(n, m, Part::Sin, comp)] += 2.0 * inv * s * v;
                }
            }
        }
        Ok(u)
    }
}

/// Samples of a loop on a uniform grid.
#[derive(Clone, Debug)]
pub struct GridSamples {
    pub n: usize,
    pub samples: usize,
    /// Row-major `samples x n`.
    pub values: Vec<f64>,
}

/// Sample `u` at `samples` uniform points; fails unless `samples >= 2K + 1`.
pub fn grid_transform(u: &FourierLoop, samples: usize) -> Result<GridSamples> {
    let grid = Grid::new(u.degree(), samples)?;
    Ok(GridSamples {
        n: u.dim(),
        samples,
        values: grid.evaluate(u),
    })
}

impl GridSamples {
    /// Project back onto degree `k`; fails unless `samples >= 2k + 1`.
    pub fn to_loop(&self, k: usize) -> Result<FourierLoop> {
        Grid::new(k, self.samples)?.project(&self.values, self.n, k)
    }
}

/// Accumulate the exact product of two scalar trigonometric series into `out`
/// (a scalar series), keeping only modes `<= out.degree()`.
///
/// Inputs are given as `(cos, sin)` coefficient pairs by mode with `sin[0] = 0`.
fn accumulate_product(out: &mut [f64], kout: usize, a: &[(f64, f64)], b: &[(f64, f64)], scale: f64) {
    let mut add_cos = |mode: i64, v: f64| {
        let m = mode.unsigned_abs() as usize;
        if m <= kout {
            out[coeff_index(1, m, Part::Cos, 0)] += v;
        }
    };
    let mut sin_terms: Vec<(i64, f64)> = Vec::new();
    for (m, &(am, bm)) in a.iter().enumerate() {
        if am == 0.0 && bm == 0.0 {
            continue;
        }
        for (h, &(ah, bh)) in b.iter().enumerate() {
            if ah == 0.0 && bh == 0.0 {
                continue;
            }
            let (m, h) = (m as i64, h as i64);
            // products of cos/sin pairs via angle-sum identities
            let half = 0.5 * scale;
            add_cos(m - h, half * (am * ah + bm * bh));
            add_cos(m + h, half * (am * ah - bm * bh));
            sin_terms.push((m + h, half * (am * bh + bm * ah)));
            sin_terms.push((m - h, half * (bm * ah - am * bh)));
        }
    }
    for (mode, v) in sin_terms {
        let m = mode.unsigned_abs() as usize;
        if m == 0 || m > kout {
            continue;
        }
        let sign = if mode < 0 { -1.0 } else { 1.0 };
        out[coeff_index(1, m, Part::Sin, 0)] += sign * v;
    }
}

fn scalar_pairs(u: &FourierLoop, comp: usize) -> Vec<(f64, f64)> {
    let mut pairs = Vec::with_capacity(u.degree() + 1);
    pairs.push((u.coeff(0, Part::Cos, comp), 0.0));
    for m in 1..=u.degree() {
        pairs.push((u.coeff(m, Part::Cos, comp), u.coeff(m, Part::Sin, comp)));
    }
    pairs
}

/// A loop of `n x n` matrices, stored entrywise as scalar Fourier series.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixLoop {
    n: usize,
    k: usize,
    entries: Vec<FourierLoop>,
}

impl MatrixLoop {
    pub fn from_entries(n: usize, entries: Vec<FourierLoop>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {n}x{n} matrix loop",
                entries.len()
            )));
        }
        let k = entries[0].degree();
        if entries.iter().any(|e| e.dim() != 1 || e.degree() != k) {
            return Err(Error::DimensionMismatch(
                "matrix loop entries must be scalar loops of equal degree".into(),
            ));
        }
        Ok(Self { n, k, entries })
    }

    pub fn constant(m: &DMatrix<f64>, k: usize) -> Self {
        let n = m.nrows();
        let entries = (0..n * n).map(|idx| FourierLoop::constant(&[m[(idx / n, idx % n)]], k)).collect();
        Self { n, k, entries }
    }

    pub fn identity(n: usize, k: usize) -> Self {
        Self::constant(&DMatrix::identity(n, n), k)
    }

    /// Project a matrix-valued function onto degree `k` using `samples` grid points.
    pub fn from_fn(n: usize, k: usize, samples: usize, f: impl Fn(f64) -> DMatrix<f64>) -> Result<Self> {
        let grid = Grid::new(k, samples)?;
        let values: Vec<DMatrix<f64>> = (0..samples).map(|j| f(grid.time(j))).collect();
        let mut entries = Vec::with_capacity(n * n);
        for idx in 0..n * n {
            let (i, j) = (idx / n, idx % n);
            let scalar: Vec<f64> = values.iter().map(|m| m[(i, j)]).collect();
            entries.push(grid.project(&scalar, 1, k)?);
        }
        Ok(Self { n, k, entries })
    }

    /// Random matrix loop with entries from [`FourierLoop::random`].
    pub fn random<R: Rng + ?Sized>(n: usize, k: usize, decay: f64, rng: &mut R) -> Self {
        let entries = (0..n * n).map(|_| FourierLoop::random(1, k, decay, rng)).collect();
        Self { n, k, entries }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn degree(&self) -> usize {
        self.k
    }

    pub fn entry(&self, i: usize, j: usize) -> &FourierLoop {
        &self.entries[i * self.n + j]
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.entry(i, j).eval(t)[0])
    }

    /// `||A||_r` using the Frobenius norm on coefficient matrices.
    pub fn sobolev_norm(&self, r: f64) -> f64 {
        self.entries.iter().map(|e| e.sobolev_norm_sq(r)).sum::<f64>().sqrt()
    }

    pub fn derivative(&self) -> Self {
        Self {
            n: self.n,
            k: self.k,
            entries: self.entries.iter().map(FourierLoop::derivative).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let entries = (0..n * n).map(|idx| self.entries[(idx % n) * n + idx / n].clone()).collect();
        Self { n, k: self.k, entries }
    }

    pub fn is_constant(&self) -> bool {
        self.entries.iter().all(|e| e.coeffs()[1..].iter().all(|c| *c == 0.0))
    }

    /// Galerkin product `P_K (A u)`: the exact pointwise product truncated to degree `kout`.
    pub fn apply(&self, u: &FourierLoop, kout: usize) -> FourierLoop {
        assert_eq!(u.dim(), self.n, "dimension mismatch in matrix-loop product");
        let n = self.n;
        let mut out = FourierLoop::zeros(n, kout);
        let u_pairs: Vec<Vec<(f64, f64)>> = (0..n).map(|c| scalar_pairs(u, c)).collect();
        let mut scratch = vec![0.0; coeff_len(1, kout)];
        for i in 0..n {
            scratch.iter_mut().for_each(|x| *x = 0.0);
            for j in 0..n {
                let a_pairs = scalar_pairs(self.entry(i, j), 0);
                accumulate_product(&mut scratch, kout, &a_pairs, &u_pairs[j], 1.0);
            }
            for (idx, v) in scratch.iter().enumerate() {
                let (mode, part, _) = index_mode(1, idx);
                out.coeffs[coeff_index(n, mode, part, i)] = *v;
            }
        }
        out
    }
}

/// A point `(q, p)` of the truncated mixed space `H^s(T, T^n) x H^{1-s}(T, R^n)`.
///
/// `q` is the zero-winding lift: the base loop is `m t + q(t)` mod `Z^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint {
    pub q: FourierLoop,
    pub winding: WindingVector,
    pub p: FourierLoop,
    pub s: SobolevExponent,
}

impl PhasePoint {
    pub fn new(q: FourierLoop, winding: WindingVector, p: FourierLoop, s: SobolevExponent) -> Result<Self> {
        if q.dim() != p.dim() || q.degree() != p.degree() || winding.0.len() != q.dim() {
            return Err(Error::DimensionMismatch(format!(
                "q: (n={}, K={}), p: (n={}, K={}), winding of length {}",
                q.dim(),
                q.degree(),
                p.dim(),
                p.degree(),
                winding.0.len()
            )));
        }
        Ok(Self { q, winding, p, s })
    }

    /// Constant loop `(q0, p0)` with zero winding.
    pub fn constant(q0: &[f64], p0: &[f64], k: usize, s: SobolevExponent) -> Self {
        Self {
            q: FourierLoop::constant(q0, k),
            winding: WindingVector::zero(q0.len()),
            p: FourierLoop::constant(p0, k),
            s,
        }
    }

    pub fn dim(&self) -> usize {
        self.q.dim()
    }

    pub fn degree(&self) -> usize {
        self.q.degree()
    }

    /// Length of the flat coordinate vector, `2 n (2K + 1)`.
    pub fn len(&self) -> usize {
        2 * coeff_len(self.dim(), self.degree())
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat coordinates `[q coeffs | p coeffs]`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.q.coeffs().to_vec();
        v.extend_from_slice(self.p.coeffs());
        v
    }

    pub fn from_vector(
        n: usize,
        k: usize,
        winding: WindingVector,
        s: SobolevExponent,
        v: &[f64],
    ) -> Result<Self> {
        let half = coeff_len(n, k);
        if v.len() != 2 * half {
            return Err(Error::DimensionMismatch(format!(
                "phase vector of length {} for n = {n}, K = {k}",
                v.len()
            )));
        }
        Self::new(
            FourierLoop::from_coeffs(n, k, v[..half].to_vec())?,
            winding,
            FourierLoop::from_coeffs(n, k, v[half..].to_vec())?,
            s,
        )
    }

    /// Same winding and exponent, new coordinates.
    pub fn with_vector(&self, v: &[f64]) -> Self {
        Self::from_vector(self.dim(), self.degree(), self.winding.clone(), self.s, v)
            .expect("vector length matches the phase point")
    }

    pub fn with_degree(&self, k: usize) -> Self {
        Self {
            q: self.q.with_degree(k),
            winding: self.winding.clone(),
            p: self.p.with_degree(k),
            s: self.s,
        }
    }

    /// Mixed Sobolev norm `(||q||_s^2 + ||p||_{1-s}^2)^{1/2}`.
    pub fn mixed_sobolev_norm(&self) -> f64 {
        (self.q.sobolev_norm_sq(self.s.value()) + self.p.sobolev_norm_sq(self.s.dual())).sqrt()
    }

    /// Norm in the mixed metric (homogeneous weights).
    pub fn metric_norm(&self) -> f64 {
        let w = mixed_metric_weights(self.dim(), self.degree(), self.s.value());
        self.to_vector().iter().zip(&w).map(|(x, w)| w * x * x).sum::<f64>().sqrt()
    }

    pub fn to_record(&self) -> PhasePointRecord {
        PhasePointRecord {
            n: self.dim(),
            k: self.degree(),
            s: self.s.value(),
            winding: self.winding.0.clone(),
            q: self.q.coeffs().to_vec(),
            p: self.p.coeffs().to_vec(),
        }
    }
}

/// JSON form of a phase point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePointRecord {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub s: f64,
    pub winding: Vec<i64>,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhasePointRecord {
    pub fn to_point(&self) -> Result<PhasePoint> {
        PhasePoint::new(
            FourierLoop::from_coeffs(self.n, self.k, self.q.clone())?,
            WindingVector(self.winding.clone()),
            FourierLoop::from_coeffs(self.n, self.k, self.p.clone())?,
            SobolevExponent::new(self.s)?,
        )
    }
}

/// Weighted inner product with diagonal weights.
pub fn weighted_dot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Complex exponential coefficients `u_k`, `k = -K..K`, of component `comp`.
    fn complex_coeffs(u: &FourierLoop, comp: usize) -> Vec<(i64, Complex64)> {
        let mut out = vec![(0, Complex64::new(u.coeff(0, Part::Cos, comp), 0.0))];
        for m in 1..=u.degree() {
            let a = u.coeff(m, Part::Cos, comp);
            let b = u.coeff(m, Part::Sin, comp);
            out.push((m as i64, Complex64::new(a / 2.0, -b / 2.0)));
            out.push((-(m as i64), Complex64::new(a / 2.0, b / 2.0)));
        }
        out
    }

    #[test]
    fn index_layout_roundtrip() {
        for n in 1..4 {
            for idx in 0..coeff_len(n, 5) {
                let (m, part, c) = index_mode(n, idx);
                assert_eq!(coeff_index(n, m, part, c), idx);
            }
        }
    }

    #[test]
    fn constant_loop_norm_is_its_modulus() {
        let u = FourierLoop::constant(&[3.0, -4.0], 6);
        for r in [-0.7, 0.0, 0.3, 1.0, 2.5] {
            assert!((u.sobolev_norm(r) - 5.0).abs() < 1e-14);
        }
    }

    #[test]
    fn single_mode_norm_ratio() {
        let u = FourierLoop::basis(1, 4, 1, Part::Cos, 0, 1.0);
        let ratio = u.sobolev_norm_sq(1.0) / u.sobolev_norm_sq(0.0);
        assert!((ratio - 4.0).abs() < 1e-14);
    }

    #[test]
    fn norm_matches_complex_oracle() {
        let u = FourierLoop::random(3, 16, 0.5, &mut rng());
        let r = 0.6;
        let oracle: f64 = (0..3)
            .flat_map(|c| complex_coeffs(&u, c))
            .map(|(k, z)| (1.0 + k.unsigned_abs() as f64).powf(2.0 * r) * z.norm_sqr())
            .sum();
        let ours = u.sobolev_norm_sq(r);
        assert!((ours - oracle).abs() / oracle < 1e-12);
    }

    #[test]
    fn delta_power_examples() {
        let u = FourierLoop::basis(1, 3, 1, Part::Cos, 0, 1.0);
        let v = u.delta_power(0.5);
        assert!((v.coeff(1, Part::Cos, 0) - TAU).abs() < 1e-14);

        let w = FourierLoop::random(2, 8, 0.0, &mut rng());
        let z = w.delta_power(0.0);
        assert_eq!(z.mean(), &[0.0, 0.0]);
        assert_eq!(&z.coeffs()[2..], &w.coeffs()[2..]);

        let back = w.delta_power(0.3).delta_power(-0.3);
        let centered = w.sub(&FourierLoop::constant(w.mean(), 8));
        let err = back
            .coeffs()
            .iter()
            .zip(centered.coeffs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn derivative_examples() {
        let c = FourierLoop::constant(&[1.5], 4);
        assert!(c.derivative().coeffs().iter().all(|x| *x == 0.0));

        let u = FourierLoop::basis(1, 4, 1, Part::Cos, 0, 1.0);
        let du = u.derivative();
        assert!((du.coeff(1, Part::Sin, 0) + TAU).abs() < 1e-14);
        assert_eq!(du.coeff(1, Part::Cos, 0), 0.0);

        // -Delta^{-1} u'' = u - mean(u)
        let w = FourierLoop::random(2, 10, 0.3, &mut rng());
        let w = w.sub(&FourierLoop::constant(w.mean(), 10));
        let back = w.derivative().derivative().delta_power(-1.0).scaled(-1.0);
        let err = back.sub(&w).coeffs().iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn grid_roundtrip_and_errors() {
        let u = FourierLoop::random(2, 4, 0.0, &mut rng());
        let samples = grid_transform(&u, 17).unwrap();
        let back = samples.to_loop(4).unwrap();
        let err = back.sub(&u).coeffs().iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);

        assert!(matches!(
            grid_transform(&u, 8),
            Err(Error::GridTooCoarse { required: 9, .. })
        ));

        let c = FourierLoop::constant(&[2.0, -1.0], 4);
        let s = grid_transform(&c, 9).unwrap();
        for row in s.values.chunks(2) {
            assert!((row[0] - 2.0).abs() < 1e-14 && (row[1] + 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn dealiased_product_matches_convolution() {
        let mut r = rng();
        let a = FourierLoop::random(1, 4, 0.0, &mut r);
        let b = FourierLoop::random(1, 4, 0.0, &mut r);
        let grid = Grid::new(4, 17).unwrap();
        let (va, vb) = (grid.evaluate(&a), grid.evaluate(&b));
        let prod: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| x * y).collect();
        let projected = grid.project(&prod, 1, 4).unwrap();

        // complex convolution oracle, truncated to |k| <= 4
        let ca = complex_coeffs(&a, 0);
        let cb = complex_coeffs(&b, 0);
        for m in 0..=4i64 {
            let mut d = Complex64::new(0.0, 0.0);
            for (k1, z1) in &ca {
                for (k2, z2) in &cb {
                    if k1 + k2 == m {
                        d += z1 * z2;
                    }
                }
            }
            let (ea, eb) = if m == 0 { (d.re, 0.0) } else { (2.0 * d.re, -2.0 * d.im) };
            let m = m as usize;
            assert!((projected.coeff(m, Part::Cos, 0) - ea).abs() < 1e-12);
            if m > 0 {
                assert!((projected.coeff(m, Part::Sin, 0) - eb).abs() < 1e-12);
            }
        }

        // the exact Galerkin product agrees as well
        let ml = MatrixLoop::from_entries(1, vec![a.clone()]).unwrap();
        let exact = ml.apply(&b, 4);
        let err = exact.sub(&projected).coeffs().iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn parseval_against_samples() {
        let u = FourierLoop::random(2, 7, 0.2, &mut rng());
        let s = grid_transform(&u, 15).unwrap();
        let ms: f64 = s.values.iter().map(|x| x * x).sum::<f64>() / 15.0;
        assert!((u.sobolev_norm_sq(0.0) - ms).abs() < 1e-10);
    }

    #[test]
    fn duality_of_negative_norms() {
        // sup_{||v||_r = 1} <u, v>_{L2} = ||u||_{-r}
        let u = FourierLoop::random(2, 9, 0.0, &mut rng());
        let r = 0.4;
        // maximizer has coefficients u_i w_i^{L2} / w_i^{r}
        let n = 2;
        let v_coeffs: Vec<f64> = u
            .coeffs()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let m = index_mode(n, i).0;
                c * l2_weight(m) / sobolev_weight(m, r)
            })
            .collect();
        let v = FourierLoop::from_coeffs(2, 9, v_coeffs).unwrap();
        let v = v.scaled(1.0 / v.sobolev_norm(r));
        let sup = u.l2_inner(&v);
        assert!((sup - u.sobolev_norm(-r)).abs() < 1e-8);
        // and random unit vectors never beat it
        let mut g = rng();
        for _ in 0..50 {
            let w = FourierLoop::random(2, 9, 0.0, &mut g);
            let w = w.scaled(1.0 / w.sobolev_norm(r));
            assert!(u.l2_inner(&w) <= sup + 1e-12);
        }
    }

    #[test]
    fn record_roundtrip_at_full_precision() {
        let u = FourierLoop::random(2, 3, 0.0, &mut rng());
        let rec = u.to_record(&WindingVector(vec![1, -2]));
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"K\":3"));
        let back: LoopRecord = serde_json::from_str(&json).unwrap();
        let (v, w) = back.to_loop().unwrap();
        assert_eq!(v, u);
        assert_eq!(w.0, vec![1, -2]);
    }

    #[test]
    fn matrix_loop_frobenius_norm() {
        let id = MatrixLoop::identity(3, 5);
        assert!((id.sobolev_norm(0.6) - 3f64.sqrt()).abs() < 1e-14);
        let u = FourierLoop::random(3, 5, 0.0, &mut rng());
        assert_eq!(id.apply(&u, 5), u);
    }

    proptest::proptest! {
        #[test]
        fn norm_monotone_in_exponent(seed in 0u64..500, r1 in -1.0f64..1.0, dr in 0.0f64..1.0) {
            let u = FourierLoop::random(2, 6, 0.0, &mut ChaCha8Rng::seed_from_u64(seed));
            proptest::prop_assert!(u.sobolev_norm(r1) <= u.sobolev_norm(r1 + dr) + 1e-12);
        }

        #[test]
        fn grid_roundtrip_property(seed in 0u64..500, k in 1usize..8, extra in 0usize..6) {
            let u = FourierLoop::random(1, k, 0.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let s = grid_transform(&u, 2 * k + 1 + extra).unwrap();
            let back = s.to_loop(k).unwrap();
            let err = back.sub(&u).coeffs().iter().map(|x| x.abs()).fold(0.0, f64::max);
            proptest::prop_assert!(err < 1e-11);
        }
    }
}
