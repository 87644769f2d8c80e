//! Structural operators as dense matrices on truncated coefficient spaces.
//!
//! Every [`LinearOperatorMatrix`] carries the weighting of its source and target
//! space. Norms and singular values are always taken after conjugating by the
//! square roots of the diagonal weights, so a Euclidean SVD of
//! [`LinearOperatorMatrix::weighted`] is the SVD in the declared norms.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::loopspace::{
    coeff_index, coeff_len, delta_multiplier, index_mode, metric_weights, mixed_metric_weights,
    sobolev_weights, FourierLoop, Grid, MatrixLoop, Part, PhasePoint,
};
use crate::par;

/// Which weighted inner product a truncated coefficient space carries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Space {
    /// `H^r(T, R^n)` with weights `(1 + k)^{2r}`.
    Sobolev { n: usize, k: usize, r: f64 },
    /// `H^r(T, R^n)` with homogeneous weights `(2 pi k)^{2r}`.
    Homogeneous { n: usize, k: usize, r: f64 },
    /// `H^s x H^{1-s}` with the homogeneous mixed metric.
    Mixed { n: usize, k: usize, s: f64 },
    /// `H^s x H^{1-s}` with `(1 + k)` weights.
    MixedSobolev { n: usize, k: usize, s: f64 },
}

impl Space {
    pub fn dim(&self) -> usize {
        match *self {
            Space::Sobolev { n, k, .. } | Space::Homogeneous { n, k, .. } => coeff_len(n, k),
            Space::Mixed { n, k, .. } | Space::MixedSobolev { n, k, .. } => 2 * coeff_len(n, k),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        match *self {
            Space::Sobolev { n, k, r } => sobolev_weights(n, k, r),
            Space::Homogeneous { n, k, r } => metric_weights(n, k, r),
            Space::Mixed { n, k, s } => mixed_metric_weights(n, k, s),
            Space::MixedSobolev { n, k, s } => {
                let mut w = sobolev_weights(n, k, s);
                w.extend(sobolev_weights(n, k, 1.0 - s));
                w
            }
        }
    }

    /// The Sobolev exponent (for mixed spaces, that of the base component).
    pub fn exponent(&self) -> f64 {
        match *self {
            Space::Sobolev { r, .. } | Space::Homogeneous { r, .. } => r,
            Space::Mixed { s, .. } | Space::MixedSobolev { s, .. } => s,
        }
    }
}

/// Dense matrix of a linear operator between truncated weighted spaces.
#[derive(Clone, Debug)]
pub struct LinearOperatorMatrix {
    pub matrix: DMatrix<f64>,
    pub source: Space,
    pub target: Space,
}

impl LinearOperatorMatrix {
    pub fn new(matrix: DMatrix<f64>, source: Space, target: Space) -> Result<Self> {
        if matrix.ncols() != source.dim() || matrix.nrows() != target.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} matrix for spaces of dimension {} -> {}",
                matrix.nrows(),
                matrix.ncols(),
                source.dim(),
                target.dim()
            )));
        }
        Ok(Self { matrix, source, target })
    }

    pub fn source_dim(&self) -> usize {
        self.source.dim()
    }

    pub fn target_dim(&self) -> usize {
        self.target.dim()
    }

    /// Same matrix, measured in different norms.
    pub fn reweighted(&self, source: Space, target: Space) -> Result<Self> {
        Self::new(self.matrix.clone(), source, target)
    }

    /// `W_target^{1/2} M W_source^{-1/2}`.
    pub fn weighted(&self) -> DMatrix<f64> {
        let wt: Vec<f64> = self.target.weights().iter().map(|w| w.sqrt()).collect();
        let ws: Vec<f64> = self.source.weights().iter().map(|w| 1.0 / w.sqrt()).collect();
        let mut m = self.matrix.clone();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                m[(i, j)] *= wt[i] * ws[j];
            }
        }
        m
    }

    /// Singular values in the declared norms, descending.
    pub fn singular_values(&self) -> Vec<f64> {
        let mut sv: Vec<f64> = self.weighted().singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }

    pub fn operator_norm(&self) -> f64 {
        self.singular_values().first().copied().unwrap_or(0.0)
    }

    /// Largest `|<M x, y> - <x, M y>|` entry of the weighted form (zero iff self-adjoint).
    pub fn symmetry_defect(&self) -> f64 {
        let m = self.weighted();
        (&m - m.transpose()).amax()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(x)).as_slice().to_vec()
    }

    pub fn compose(&self, inner: &Self) -> Result<Self> {
        if inner.target.dim() != self.source.dim() {
            return Err(Error::DimensionMismatch("composition of incompatible operators".into()));
        }
        Self::new(&self.matrix * &inner.matrix, inner.source, self.target)
    }
}

fn diag_loop_operator(n: usize, k: usize, f: impl Fn(usize) -> f64) -> DMatrix<f64> {
    let d = coeff_len(n, k);
    DMatrix::from_fn(d, d, |i, j| if i == j { f(index_mode(n, i).0) } else { 0.0 })
}

/// `d/dt` on `n(2K+1)` coefficients.
pub fn derivative_matrix(n: usize, k: usize) -> DMatrix<f64> {
    let d = coeff_len(n, k);
    let mut m = DMatrix::zeros(d, d);
    for mode in 1..=k {
        let w = TAU * mode as f64;
        for c in 0..n {
            let a = coeff_index(n, mode, Part::Cos, c);
            let b = coeff_index(n, mode, Part::Sin, c);
            m[(a, b)] = w;
            m[(b, a)] = -w;
        }
    }
    m
}

/// `Delta^sigma` on `n(2K+1)` coefficients.
pub fn delta_matrix(n: usize, k: usize, sigma: f64) -> DMatrix<f64> {
    diag_loop_operator(n, k, |m| delta_multiplier(m, sigma))
}

/// The operator `L(q, p) = (-Delta^{-s} p', Delta^{s-1} q')`, self-adjoint in the mixed metric,
/// with `<L z, z> / 2 = int p . q' dt`. Its negative eigenspace is
/// `H^- = {(q, -Delta^{s-1} q')}`, the negative space of the Liouville form.
pub fn assemble_l(n: usize, k: usize, s: f64) -> Result<LinearOperatorMatrix> {
    if !(s > 0.5 && s < 1.0) {
        return Err(invalid("s", format!("{s} outside (1/2, 1)")));
    }
    let half = coeff_len(n, k);
    let d = derivative_matrix(n, k);
    let top = -(delta_matrix(n, k, -s) * &d);
    let bottom = delta_matrix(n, k, s - 1.0) * &d;
    let mut m = DMatrix::zeros(2 * half, 2 * half);
    m.view_mut((0, half), (half, half)).copy_from(&top);
    m.view_mut((half, 0), (half, half)).copy_from(&bottom);
    let space = Space::Mixed { n, k, s };
    LinearOperatorMatrix::new(m, space, space)
}

/// Orthonormal basis (in a diagonal-weighted inner product) of a subspace.
#[derive(Clone, Debug)]
pub struct SubspaceBasis {
    /// Columns are orthonormal in the weighted inner product.
    pub vectors: DMatrix<f64>,
    pub weights: Vec<f64>,
}

impl SubspaceBasis {
    /// Orthonormalize the columns of `spanning` (which must be linearly independent).
    pub fn new(spanning: DMatrix<f64>, weights: Vec<f64>) -> Result<Self> {
        if spanning.nrows() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for vectors of length {}",
                weights.len(),
                spanning.nrows()
            )));
        }
        if spanning.ncols() == 0 {
            return Ok(Self {
                vectors: DMatrix::zeros(weights.len(), 0),
                weights,
            });
        }
        let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
        let mut scaled = spanning;
        for (i, sw) in sqrt_w.iter().enumerate() {
            scaled.row_mut(i).scale_mut(*sw);
        }
        let qr = scaled.clone().qr();
        let r = qr.r();
        let rmax = r.diagonal().amax();
        if r.diagonal().iter().any(|d| d.abs() <= 1e-12 * rmax) {
            return Err(Error::Singular("spanning vectors are linearly dependent".into()));
        }
        let mut q = qr.q();
        for (i, sw) in sqrt_w.iter().enumerate() {
            q.row_mut(i).scale_mut(1.0 / sw);
        }
        Ok(Self { vectors: q, weights })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.vectors.nrows()
    }

    /// Largest deviation of the weighted Gram matrix from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.gram_with(self);
        (g - DMatrix::identity(self.dim(), self.dim())).amax()
    }

    /// Cross-Gram matrix `V^T G W`.
    pub fn gram_with(&self, other: &Self) -> DMatrix<f64> {
        let mut gv = self.vectors.clone();
        for (i, w) in self.weights.iter().enumerate() {
            gv.row_mut(i).scale_mut(*w);
        }
        gv.transpose() * &other.vectors
    }
}

/// Rank tolerance for [`relative_dimension`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RankTolerance {
    /// Singular values below `zero * sigma_1` count as zero.
    pub zero: f64,
    /// Ratios in `[ambiguous, zero]` are rejected.
    pub ambiguous: f64,
}

impl Default for RankTolerance {
    fn default() -> Self {
        Self {
            zero: 1e-7,
            ambiguous: 1e-9,
        }
    }
}

/// Rank of a matrix with a declared relative threshold and ambiguity band.
pub fn numerical_rank(m: &DMatrix<f64>, tol: RankTolerance) -> Result<usize> {
    numerical_rank_scaled(m, tol, 0.0)
}

/// As [`numerical_rank`], measuring singular values against `max(sigma_1, scale)`.
pub fn numerical_rank_scaled(m: &DMatrix<f64>, tol: RankTolerance, scale: f64) -> Result<usize> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(0);
    }
    let sv = m.singular_values();
    let s1 = sv.max().max(scale);
    if s1 <= f64::MIN_POSITIVE {
        return Ok(0);
    }
    let mut rank = 0;
    for &s in sv.iter() {
        let ratio = s / s1;
        if ratio >= tol.zero {
            rank += 1;
        } else if ratio >= tol.ambiguous {
            return Err(Error::AmbiguousRank {
                ratio,
                lower: tol.ambiguous,
                upper: tol.zero,
            });
        }
    }
    Ok(rank)
}

/// The two parts of a relative dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelativeDimension {
    /// `dim(V cap W^perp)`
    pub v_perp_w: usize,
    /// `dim(V^perp cap W)`
    pub w_perp_v: usize,
}

impl RelativeDimension {
    pub fn value(&self) -> i64 {
        self.v_perp_w as i64 - self.w_perp_v as i64
    }
}

/// `dim(V, W) = dim(V cap W^perp) - dim(V^perp cap W)`, from the rank of `V^T G W`.
pub fn relative_dimension_parts(
    v: &SubspaceBasis,
    w: &SubspaceBasis,
    tol: RankTolerance,
) -> Result<RelativeDimension> {
    if v.ambient_dim() != w.ambient_dim() || v.weights != w.weights {
        return Err(Error::DimensionMismatch(
            "subspaces live in different ambient spaces".into(),
        ));
    }
    // singular values of the cross-Gram matrix are cosines of principal angles, at most 1
    let rank = numerical_rank_scaled(&v.gram_with(w), tol, 1.0)?;
    Ok(RelativeDimension {
        v_perp_w: v.dim() - rank,
        w_perp_v: w.dim() - rank,
    })
}

pub fn relative_dimension(v: &SubspaceBasis, w: &SubspaceBasis) -> Result<i64> {
    relative_dimension_parts(v, w, RankTolerance::default()).map(|r| r.value())
}

/// Spectral projectors of an operator that is self-adjoint in its (common) source/target space.
#[derive(Clone, Debug)]
pub struct SpectralProjectors {
    pub minus: LinearOperatorMatrix,
    pub zero: LinearOperatorMatrix,
    pub plus: LinearOperatorMatrix,
    pub minus_basis: SubspaceBasis,
    pub zero_basis: SubspaceBasis,
    pub plus_basis: SubspaceBasis,
    /// Eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
}

/// Eigen-decomposition of a self-adjoint operator in its weighted inner product.
///
/// Returns ascending eigenvalues and eigenvectors that are orthonormal in the weighted
/// product (as columns in raw coordinates).
pub fn weighted_eigen(op: &LinearOperatorMatrix) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if op.source != op.target {
        return Err(invalid("operator", "source and target spaces differ"));
    }
    let sym = op.weighted();
    let sym = (&sym + sym.transpose()) * 0.5;
    Ok(sorted_eigen(sym, &op.source.weights()))
}

fn sorted_eigen(sym: DMatrix<f64>, weights: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = eig.eigenvectors.select_columns(&order);
    for (i, w) in weights.iter().enumerate() {
        vectors.row_mut(i).scale_mut(1.0 / w.sqrt());
    }
    (values, vectors)
}

/// Eigenvalues of a symmetric bilinear form `S` relative to diagonal metric weights `G`,
/// i.e. of `G^{-1} S`, ascending, with `G`-orthonormal eigenvectors.
pub fn form_eigen(form: &DMatrix<f64>, weights: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let inv_sqrt: Vec<f64> = weights.iter().map(|w| 1.0 / w.sqrt()).collect();
    let mut m = form.clone();
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            m[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    let m = (&m + m.transpose()) * 0.5;
    sorted_eigen(m, weights)
}

/// Split the spectrum into `(-inf, -band)`, `[-band, band]`, `(band, inf)`.
pub fn spectral_projectors_with(op: &LinearOperatorMatrix, band: f64, margin: f64) -> Result<SpectralProjectors> {
    let (values, vectors) = weighted_eigen(op)?;
    for &v in &values {
        for boundary in [-band, band] {
            if (v - boundary).abs() < margin {
                return Err(Error::AmbiguousSpectrum {
                    value: v,
                    boundary,
                    margin,
                });
            }
        }
    }
    let weights = op.source.weights();
    let pick = |pred: &dyn Fn(f64) -> bool| -> Vec<usize> {
        values.iter().enumerate().filter(|(_, v)| pred(**v)).map(|(i, _)| i).collect()
    };
    let groups = [
        pick(&|v| v < -band),
        pick(&|v| v.abs() <= band),
        pick(&|v| v > band),
    ];
    let mut projectors = Vec::new();
    let mut bases = Vec::new();
    for idx in &groups {
        let basis = vectors.select_columns(idx);
        // P = V V^T G
        let mut vg = basis.transpose();
        for (j, w) in weights.iter().enumerate() {
            vg.column_mut(j).scale_mut(*w);
        }
        projectors.push(LinearOperatorMatrix::new(&basis * vg, op.source, op.target)?);
        bases.push(SubspaceBasis {
            vectors: basis,
            weights: weights.clone(),
        });
    }
    let plus_basis = bases.pop().expect("three groups");
    let zero_basis = bases.pop().expect("three groups");
    let minus_basis = bases.pop().expect("three groups");
    let plus = projectors.pop().expect("three groups");
    let zero = projectors.pop().expect("three groups");
    let minus = projectors.pop().expect("three groups");
    Ok(SpectralProjectors {
        minus,
        zero,
        plus,
        minus_basis,
        zero_basis,
        plus_basis,
        eigenvalues: values,
    })
}

/// Projectors onto the negative, null and positive eigenspaces of `L`.
pub fn spectral_projectors(l: &LinearOperatorMatrix) -> Result<SpectralProjectors> {
    spectral_projectors_with(l, 0.5, 1e-6)
}

/// Basis of the truncated `H^- = {(q, -Delta^{s-1} q') : q zero-mean}`.
pub fn h_minus_basis(n: usize, k: usize, s: f64) -> Result<SubspaceBasis> {
    Ok(spectral_projectors(&assemble_l(n, k, s)?)?.minus_basis)
}

/// Galerkin multiplication operator `u -> P_K(A u)`, `H^{r_in} -> H^{r_out}`.
pub fn multiplication_operator(a: &MatrixLoop, r_in: f64, r_out: f64, k: usize) -> LinearOperatorMatrix {
    let n = a.dim();
    let d = coeff_len(n, k);
    let columns = par::map_range(d, |j| {
        let (mode, part, comp) = index_mode(n, j);
        a.apply(&FourierLoop::basis(n, k, mode, part, comp, 1.0), k).into_coeffs()
    });
    let m = DMatrix::from_fn(d, d, |i, j| columns[j][i]);
    LinearOperatorMatrix::new(m, Space::Sobolev { n, k, r: r_in }, Space::Sobolev { n, k, r: r_out })
        .expect("square operator on matching spaces")
}

/// Which form of the commutator with `Delta^{s-1} d/dt` to assemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommutatorVariant {
    /// `[A, Delta^{s-1} d/dt]`
    V1,
    /// `[A, Delta^{s-1}] d/dt`
    V2,
}

/// Commutator operator as a map `H^r -> H^{1-s}`.
pub fn commutator_operator(
    a: &MatrixLoop,
    s: f64,
    r: f64,
    k: usize,
    variant: CommutatorVariant,
) -> Result<LinearOperatorMatrix> {
    if !(s > 0.5 && s < 1.0) {
        return Err(invalid("s", format!("{s} outside (1/2, 1)")));
    }
    let n = a.dim();
    let m = multiplication_operator(a, r, r, k).matrix;
    let delta = delta_matrix(n, k, s - 1.0);
    let d = derivative_matrix(n, k);
    let c = match variant {
        CommutatorVariant::V1 => {
            let e = &delta * &d;
            &m * &e - &e * &m
        }
        CommutatorVariant::V2 => (&m * &delta - &delta * &m) * &d,
    };
    LinearOperatorMatrix::new(c, Space::Sobolev { n, k, r }, Space::Sobolev { n, k, r: 1.0 - s })
}

/// A smooth map `tau(t, .) : R^n -> R^n` commuting with integer translations.
pub trait Diffeo: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, t: f64, q: &[f64]) -> Vec<f64>;
    fn jacobian(&self, t: f64, q: &[f64]) -> DMatrix<f64>;
    /// `d/dq_l` of the Jacobian.
    fn jacobian_derivative(&self, t: f64, q: &[f64], l: usize) -> DMatrix<f64>;
}

/// One term `amplitude * cos|sin(2 pi (time_mode t + q_modes . q))` of component `component`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTerm {
    pub component: usize,
    pub amplitude: f64,
    #[serde(default)]
    pub time_mode: i64,
    pub q_modes: Vec<i64>,
    #[serde(default)]
    pub sine: bool,
}

impl TrigTerm {
    fn phase(&self, t: f64, q: &[f64]) -> f64 {
        TAU * (self.time_mode as f64 * t
            + self.q_modes.iter().zip(q).map(|(k, x)| *k as f64 * x).sum::<f64>())
    }

    /// Value and the derivative of the phase function up to order 2: `(f, f', f'')` in
    /// the argument, to be multiplied by `2 pi k_l` factors.
    fn value_and_derivatives(&self, t: f64, q: &[f64]) -> (f64, f64, f64) {
        let (s, c) = self.phase(t, q).sin_cos();
        let a = self.amplitude;
        if self.sine {
            (a * s, a * c, -a * s)
        } else {
            (a * c, -a * s, -a * c)
        }
    }
}

/// A vector-valued trigonometric polynomial in `(t, q)`, periodic in both.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigField {
    pub dim: usize,
    pub terms: Vec<TrigTerm>,
}

impl TrigField {
    pub fn zero(dim: usize) -> Self {
        Self { dim, terms: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        for term in &self.terms {
            if term.component >= self.dim || term.q_modes.len() != self.dim {
                return Err(invalid(
                    "trig term",
                    format!("component {} / modes {:?} for dimension {}", term.component, term.q_modes, self.dim),
                ));
            }
        }
        Ok(())
    }

    pub fn value(&self, t: f64, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for term in &self.terms {
            out[term.component] += term.value_and_derivatives(t, q).0;
        }
        out
    }

    /// `d theta_i / d q_j`.
    pub fn jacobian(&self, t: f64, q: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for term in &self.terms {
            let (_, d1, _) = term.value_and_derivatives(t, q);
            for (j, kj) in term.q_modes.iter().enumerate() {
                m[(term.component, j)] += d1 * TAU * *kj as f64;
            }
        }
        m
    }

    /// `d^2 theta_i / d q_j d q_l` for fixed `l`.
    pub fn jacobian_derivative(&self, t: f64, q: &[f64], l: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for term in &self.terms {
            let (_, _, d2) = term.value_and_derivatives(t, q);
            let kl = TAU * term.q_modes[l] as f64;
            for (j, kj) in term.q_modes.iter().enumerate() {
                m[(term.component, j)] += d2 * TAU * *kj as f64 * kl;
            }
        }
        m
    }

    /// `sup |theta|` over a `samples^(n+1)`-point grid in `(t, q)` (Euclidean norm of the vector).
    pub fn grid_sup(&self, samples: usize) -> f64 {
        grid_max(self.dim, samples, self.terms.iter().any(|t| t.time_mode != 0), |t, q| {
            self.value(t, q).iter().map(|x| x * x).sum::<f64>().sqrt()
        })
    }
}

/// Maximize `f(t, q)` over a uniform grid in `[0,1) x [0,1)^n`, then refine by pattern search.
pub fn grid_max(n: usize, samples: usize, time_dependent: bool, f: impl Fn(f64, &[f64]) -> f64) -> f64 {
    let t_samples = if time_dependent { samples } else { 1 };
    let total = t_samples * samples.pow(n as u32);
    let mut best = (f64::NEG_INFINITY, 0.0, vec![0.0; n]);
    let mut q = vec![0.0; n];
    for idx in 0..total {
        let mut rest = idx;
        let t = (rest % t_samples) as f64 / t_samples as f64;
        rest /= t_samples;
        for x in q.iter_mut() {
            *x = (rest % samples) as f64 / samples as f64;
            rest /= samples;
        }
        let v = f(t, &q);
        if v > best.0 {
            best = (v, t, q.clone());
        }
    }
    // compass search from the best grid point
    let (mut value, mut t, mut q) = best;
    let mut step = 1.0 / samples as f64;
    while step > 1e-12 {
        let mut improved = false;
        let dims = if time_dependent { n + 1 } else { n };
        for d in 0..dims {
            for sign in [-1.0, 1.0] {
                let (mut t2, mut q2) = (t, q.clone());
                if d < n {
                    q2[d] += sign * step;
                } else {
                    t2 += sign * step;
                }
                let v = f(t2, &q2);
                if v > value {
                    value = v;
                    t = t2;
                    q = q2;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    value
}

/// `tau(t, q) = q + theta(t, q)` with `theta` a trigonometric field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigDiffeo {
    pub theta: TrigField,
}

impl TrigDiffeo {
    pub fn new(theta: TrigField) -> Result<Self> {
        theta.validate()?;
        Ok(Self { theta })
    }

    pub fn identity(n: usize) -> Self {
        Self { theta: TrigField::zero(n) }
    }
}

impl Diffeo for TrigDiffeo {
    fn dim(&self) -> usize {
        self.theta.dim
    }

    fn value(&self, t: f64, q: &[f64]) -> Vec<f64> {
        let th = self.theta.value(t, q);
        q.iter().zip(th).map(|(a, b)| a + b).collect()
    }

    fn jacobian(&self, t: f64, q: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) + self.theta.jacobian(t, q)
    }

    fn jacobian_derivative(&self, t: f64, q: &[f64], l: usize) -> DMatrix<f64> {
        self.theta.jacobian_derivative(t, q, l)
    }
}

/// Inverse of a diffeomorphism, evaluated pointwise by Newton's method.
pub struct Inverse<D: Diffeo>(pub D);

impl<D: Diffeo> Inverse<D> {
    fn preimage(&self, t: f64, q: &[f64]) -> Vec<f64> {
        let mut x = q.to_vec();
        for _ in 0..100 {
            let fx = self.0.value(t, &x);
            let r = DVector::from_iterator(x.len(), fx.iter().zip(q).map(|(a, b)| a - b));
            if r.amax() < 1e-15 {
                break;
            }
            let step = self
                .0
                .jacobian(t, &x)
                .lu()
                .solve(&r)
                .expect("Jacobian of a diffeomorphism is invertible");
            for (xi, si) in x.iter_mut().zip(step.iter()) {
                *xi -= si;
            }
            if step.amax() < 1e-16 {
                break;
            }
        }
        x
    }
}

impl<D: Diffeo> Diffeo for Inverse<D> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn value(&self, t: f64, q: &[f64]) -> Vec<f64> {
        self.preimage(t, q)
    }

    fn jacobian(&self, t: f64, q: &[f64]) -> DMatrix<f64> {
        let x = self.preimage(t, q);
        self.0.jacobian(t, &x).try_inverse().expect("invertible Jacobian")
    }

    fn jacobian_derivative(&self, t: f64, q: &[f64], l: usize) -> DMatrix<f64> {
        let x = self.preimage(t, q);
        let inv = self.0.jacobian(t, &x).try_inverse().expect("invertible Jacobian");
        let mut dj = DMatrix::zeros(self.dim(), self.dim());
        for m in 0..self.dim() {
            dj += self.0.jacobian_derivative(t, &x, m) * inv[(m, l)];
        }
        -(&inv * dj * &inv)
    }
}

/// `outer o inner`.
pub struct Compose<A: Diffeo, B: Diffeo> {
    pub outer: A,
    pub inner: B,
}

impl<A: Diffeo, B: Diffeo> Diffeo for Compose<A, B> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, t: f64, q: &[f64]) -> Vec<f64> {
        self.outer.value(t, &self.inner.value(t, q))
    }

    fn jacobian(&self, t: f64, q: &[f64]) -> DMatrix<f64> {
        self.outer.jacobian(t, &self.inner.value(t, q)) * self.inner.jacobian(t, q)
    }

    fn jacobian_derivative(&self, t: f64, q: &[f64], l: usize) -> DMatrix<f64> {
        let y = self.inner.value(t, q);
        let jb = self.inner.jacobian(t, q);
        let mut d_outer = DMatrix::zeros(self.dim(), self.dim());
        for m in 0..self.dim() {
            d_outer += self.outer.jacobian_derivative(t, &y, m) * jb[(m, l)];
        }
        d_outer * &jb + self.outer.jacobian(t, &y) * self.inner.jacobian_derivative(t, q, l)
    }
}

/// Samples of the base loop `m t + q(t)` and the fiber loop `p(t)`.
pub(crate) fn sample_phase_point(z: &PhasePoint, grid: &Grid) -> (Vec<f64>, Vec<f64>) {
    let n = z.dim();
    let mut q = grid.evaluate(&z.q.with_degree(grid.degree()));
    let p = grid.evaluate(&z.p.with_degree(grid.degree()));
    let winding = z.winding.as_f64();
    for j in 0..grid.len() {
        let t = grid.time(j);
        for c in 0..n {
            q[j * n + c] += winding[c] * t;
        }
    }
    (q, p)
}

/// Galerkin matrix of the pointwise map `u(t) -> M(t) u(t)` given on a grid, degree `k` in and out.
fn pointwise_matrix(grid: &Grid, n: usize, k: usize, mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d = coeff_len(n, k);
    let columns = par::map_range(d, |col| {
        let (mode, part, comp) = index_mode(n, col);
        let mut values = vec![0.0; grid.len() * n];
        for j in 0..grid.len() {
            let b = grid.basis_value(j, mode, part);
            for i in 0..n {
                values[j * n + i] = mats[j][(i, comp)] * b;
            }
        }
        grid.project(&values, n, k).expect("grid resolves degree k").into_coeffs()
    });
    DMatrix::from_fn(d, d, |i, j| columns[j][i])
}

/// Pointwise data of the lifted chart transition along `z`.
struct ChartData {
    grid: Grid,
    jac: Vec<DMatrix<f64>>,
    jac_inv_t: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
}

fn chart_data(tau: &dyn Diffeo, z: &PhasePoint, k: usize) -> Result<ChartData> {
    let n = z.dim();
    if tau.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "diffeomorphism of dimension {} at a phase point of dimension {n}",
            tau.dim()
        )));
    }
    let grid = Grid::new(k, 4 * k.max(z.degree()) + 1)?;
    let (q, p) = sample_phase_point(z, &grid);
    let mut jac = Vec::with_capacity(grid.len());
    let mut jac_inv_t = Vec::with_capacity(grid.len());
    let mut b = Vec::with_capacity(grid.len());
    for j in 0..grid.len() {
        let t = grid.time(j);
        let qj = &q[j * n..(j + 1) * n];
        let pj = DVector::from_column_slice(&p[j * n..(j + 1) * n]);
        let a = tau.jacobian(t, qj);
        let det = a.determinant();
        if det.is_nan() || det <= 0.0 {
            return Err(Error::NotDiffeomorphism {
                t,
                q: qj.to_vec(),
                det,
            });
        }
        let ait = a.clone().try_inverse().expect("positive determinant").transpose();
        let eta = &ait * &pj;
        let mut bj = DMatrix::zeros(n, n);
        for l in 0..n {
            let col = -(&ait * tau.jacobian_derivative(t, qj, l).transpose() * &eta);
            bj.set_column(l, &col);
        }
        jac.push(a);
        jac_inv_t.push(ait);
        b.push(bj);
    }
    Ok(ChartData { grid, jac, jac_inv_t, b })
}

/// Differential of the cotangent lift `(q, p) -> (tau(q), dtau(q)^{-T} p)` at `z`:
/// `[h, k] -> (dtau h, B h + dtau^{-T} k)`, assembled pseudo-spectrally at degree `k`.
pub fn chart_transition_differential(tau: &dyn Diffeo, z: &PhasePoint, k: usize) -> Result<LinearOperatorMatrix> {
    let n = z.dim();
    let data = chart_data(tau, z, k)?;
    let half = coeff_len(n, k);
    let mut m = DMatrix::zeros(2 * half, 2 * half);
    m.view_mut((0, 0), (half, half))
        .copy_from(&pointwise_matrix(&data.grid, n, k, &data.jac));
    m.view_mut((half, 0), (half, half))
        .copy_from(&pointwise_matrix(&data.grid, n, k, &data.b));
    m.view_mut((half, half), (half, half))
        .copy_from(&pointwise_matrix(&data.grid, n, k, &data.jac_inv_t));
    let space = Space::MixedSobolev { n, k, s: z.s.value() };
    LinearOperatorMatrix::new(m, space, space)
}

/// Graph difference `h -> B A h + A^{-1} Delta^{s-1} (A h)' - Delta^{s-1} h'`, `H^s -> H^{1-s}`,
/// with `A = dtau` along `z`.
pub fn graph_difference_operator(tau: &dyn Diffeo, z: &PhasePoint, k: usize) -> Result<LinearOperatorMatrix> {
    let n = z.dim();
    let s = z.s.value();
    let data = chart_data(tau, z, k)?;
    let a = pointwise_matrix(&data.grid, n, k, &data.jac);
    let inv: Vec<DMatrix<f64>> = data
        .jac
        .iter()
        .map(|m| m.clone().try_inverse().expect("positive determinant"))
        .collect();
    let a_inv = pointwise_matrix(&data.grid, n, k, &inv);
    let ba: Vec<DMatrix<f64>> = data.b.iter().zip(&data.jac).map(|(b, a)| b * a).collect();
    let ba = pointwise_matrix(&data.grid, n, k, &ba);
    let e = delta_matrix(n, k, s - 1.0) * derivative_matrix(n, k);
    let m = ba + a_inv * &e * a - e;
    LinearOperatorMatrix::new(m, Space::Sobolev { n, k, r: s }, Space::Sobolev { n, k, r: 1.0 - s })
}

/// Exported spectrum summary of an operator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumReport {
    #[serde(rename = "K")]
    pub k: usize,
    pub s: f64,
    pub r: f64,
    pub top_singular_values: Vec<f64>,
    /// Log-log slope of `sigma_j` against `j` over the reported head.
    pub fitted_tail_exponent: f64,
}

/// Least-squares slope of `log y` against `log x`, with the RMS residual.
pub fn loglog_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let m = pts.len() as f64;
    if pts.len() < 2 {
        return (f64::NAN, f64::NAN);
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / m).sqrt();
    (slope, rms)
}

pub fn spectrum_report(op: &LinearOperatorMatrix, k: usize, s: f64, top: usize) -> SpectrumReport {
    let sv = op.singular_values();
    let head: Vec<f64> = sv.iter().take(top).copied().collect();
    let pts: Vec<(f64, f64)> = head.iter().enumerate().map(|(j, v)| ((j + 1) as f64, *v)).collect();
    SpectrumReport {
        k,
        s,
        r: op.source.exponent(),
        fitted_tail_exponent: loglog_fit(&pts).0,
        top_singular_values: head,
    }
}

/// Two-part compactness diagnostic: head stability across truncations and tail decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompactnessSignature {
    /// `(K, sigma_1)` per truncation.
    pub head: Vec<(usize, f64)>,
    /// `max |sigma_1(K) / sigma_1(K_max) - 1|`.
    pub head_variation: f64,
    /// `sigma_j / sigma_1` at the finest truncation.
    pub tail_ratio: f64,
    pub tail_index: usize,
    pub head_tolerance: f64,
    pub tail_tolerance: f64,
    pub passed: bool,
}

/// Evaluate the compactness signature from per-`K` singular values (descending).
pub fn compactness_signature(
    spectra: &[(usize, Vec<f64>)],
    tail_index: usize,
    head_tolerance: f64,
    tail_tolerance: f64,
) -> CompactnessSignature {
    let head: Vec<(usize, f64)> = spectra
        .iter()
        .map(|(k, sv)| (*k, sv.first().copied().unwrap_or(0.0)))
        .collect();
    let (_, finest) = spectra.iter().max_by_key(|(k, _)| *k).expect("at least one truncation");
    let s1 = finest.first().copied().unwrap_or(0.0);
    let head_variation = head
        .iter()
        .map(|(_, v)| if s1 > 0.0 { (v / s1 - 1.0).abs() } else { 0.0 })
        .fold(0.0, f64::max);
    let tail_ratio = if s1 > 0.0 {
        finest.get(tail_index - 1).copied().unwrap_or(0.0) / s1
    } else {
        0.0
    };
    CompactnessSignature {
        head,
        head_variation,
        tail_ratio,
        tail_index,
        head_tolerance,
        tail_tolerance,
        passed: head_variation < head_tolerance && tail_ratio < tail_tolerance,
    }
}

/// `A(t) = exp(J alpha sin 2 pi t)` in `R^{2x2}` (`J` the rotation generator), projected to degree `k`.
pub fn rotation_loop(alpha: f64, k: usize) -> MatrixLoop {
    MatrixLoop::from_fn(2, k, 4 * k + 1, |t| {
        let (s, c) = (alpha * (TAU * t).sin()).sin_cos();
        DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
    })
    .expect("4k+1 samples resolve degree k")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loopspace::{SobolevExponent, WindingVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_vector(len: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
        FourierLoop::random(1, len / 2, 0.0, r).into_coeffs()[..len].to_vec()
    }

    fn mixed_dot(n: usize, k: usize, s: f64, a: &[f64], b: &[f64]) -> f64 {
        crate::loopspace::weighted_dot(&mixed_metric_weights(n, k, s), a, b)
    }

    #[test]
    fn l_spectrum_is_plus_minus_one_and_kernel() {
        for (n, k, s) in [(1, 8, 0.6), (2, 5, 0.55), (1, 4, 0.9)] {
            let l = assemble_l(n, k, s).unwrap();
            let (ev, _) = weighted_eigen(&l).unwrap();
            let neg = ev.iter().filter(|v| (**v + 1.0).abs() < 1e-10).count();
            let zero = ev.iter().filter(|v| v.abs() < 1e-10).count();
            let pos = ev.iter().filter(|v| (**v - 1.0).abs() < 1e-10).count();
            assert_eq!((neg, zero, pos), (2 * k * n, 2 * n, 2 * k * n));
        }
    }

    #[test]
    fn l_is_self_adjoint_in_mixed_metric() {
        let (n, k, s) = (2, 6, 0.62);
        let l = assemble_l(n, k, s).unwrap();
        assert!(l.symmetry_defect() < 1e-12);
        let mut r = rng();
        let w = mixed_metric_weights(n, k, s);
        for _ in 0..10 {
            let mut z = random_vector(w.len(), &mut r);
            let mut y = random_vector(w.len(), &mut r);
            for v in [&mut z, &mut y] {
                let norm = mixed_dot(n, k, s, v, v).sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
            }
            let lhs = mixed_dot(n, k, s, &l.apply(&z), &y);
            let rhs = mixed_dot(n, k, s, &z, &l.apply(&y));
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn l_quadratic_form_is_liouville_pairing() {
        let (n, k, s) = (1, 4, 0.6);
        let l = assemble_l(n, k, s).unwrap();
        let q = FourierLoop::basis(1, k, 1, Part::Sin, 0, 1.0);
        let p = FourierLoop::basis(1, k, 1, Part::Cos, 0, 1.0);
        let mut z = q.coeffs().to_vec();
        z.extend_from_slice(p.coeffs());
        let form = 0.5 * mixed_dot(n, k, s, &l.apply(&z), &z);
        assert!((form - std::f64::consts::PI).abs() < 1e-12);

        // against quadrature of int p . q' for random loops
        let mut r = rng();
        let q = FourierLoop::random(2, 5, 0.0, &mut r);
        let p = FourierLoop::random(2, 5, 0.0, &mut r);
        let grid = Grid::new(5, 21).unwrap();
        let qd = grid.evaluate(&q.derivative());
        let pv = grid.evaluate(&p);
        let quad: f64 = qd.iter().zip(&pv).map(|(a, b)| a * b).sum::<f64>() / 21.0;
        let l = assemble_l(2, 5, 0.7).unwrap();
        let mut z = q.coeffs().to_vec();
        z.extend_from_slice(p.coeffs());
        let form = 0.5 * mixed_dot(2, 5, 0.7, &l.apply(&z), &z);
        assert!((form - quad).abs() < 1e-10);
    }

    #[test]
    fn h_minus_eigenvector() {
        let (n, k, s) = (2, 6, 0.65);
        let l = assemble_l(n, k, s).unwrap();
        let q = FourierLoop::random(n, k, 0.0, &mut rng());
        let q = q.sub(&FourierLoop::constant(q.mean(), k));
        // L z = -z for z = (q, -Delta^{s-1} q') and L z = z for z = (q, Delta^{s-1} q')
        for sign in [-1.0, 1.0] {
            let p = q.derivative().delta_power(s - 1.0).scaled(sign);
            let mut z = q.coeffs().to_vec();
            z.extend_from_slice(p.coeffs());
            let lz = l.apply(&z);
            let err = lz.iter().zip(&z).map(|(a, b)| (a - sign * b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10);
        }
    }

    #[test]
    fn projector_algebra() {
        let (n, k, s) = (1, 8, 0.6);
        let l = assemble_l(n, k, s).unwrap();
        let pr = spectral_projectors(&l).unwrap();
        assert_eq!(pr.minus_basis.dim(), 16);
        let id = DMatrix::<f64>::identity(l.source_dim(), l.source_dim());
        let sum = &pr.minus.matrix + &pr.zero.matrix + &pr.plus.matrix;
        assert!((sum - &id).amax() < 1e-10);
        for p in [&pr.minus, &pr.zero, &pr.plus] {
            assert!((&p.matrix * &p.matrix - &p.matrix).amax() < 1e-12);
            assert!(p.symmetry_defect() < 1e-10);
        }
        assert!(pr.minus_basis.orthonormality_defect() < 1e-10);
        let z = PhasePoint::constant(&[0.3], &[-1.2], k, SobolevExponent::for_action(0.6).unwrap());
        let pz = pr.zero.apply(&z.to_vector());
        let err = pz.iter().zip(z.to_vector()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn ambiguous_spectrum_is_rejected() {
        let space = Space::Sobolev { n: 1, k: 0, r: 0.0 };
        let op = LinearOperatorMatrix::new(DMatrix::from_element(1, 1, 0.5 + 1e-8), space, space).unwrap();
        assert!(matches!(spectral_projectors(&op), Err(Error::AmbiguousSpectrum { .. })));
    }

    #[test]
    fn identity_multiplication() {
        let k = 6;
        let id = MatrixLoop::identity(2, k);
        let op = multiplication_operator(&id, 0.3, 0.3, k);
        assert!((op.matrix.clone() - DMatrix::identity(op.source_dim(), op.source_dim())).amax() == 0.0);
        let u = FourierLoop::random(2, k, 0.0, &mut rng());
        let au = FourierLoop::from_coeffs(2, k, op.apply(u.coeffs())).unwrap();
        assert_eq!(au.sobolev_norm(0.3), u.sobolev_norm(0.3));
    }

    #[test]
    fn multiplication_matches_exact_product_for_low_degree() {
        let k = 8;
        let mut r = rng();
        let a = MatrixLoop::random(2, 4, 0.0, &mut r).entry(0, 0).clone();
        let entries = (0..4)
            .map(|_| FourierLoop::random(1, 4, 0.0, &mut r).with_degree(k))
            .collect();
        let a_loop = MatrixLoop::from_entries(2, entries).unwrap();
        let _ = a;
        let u = FourierLoop::random(2, 4, 0.0, &mut r).with_degree(k);
        let op = multiplication_operator(&a_loop, 0.0, 0.0, k);
        let au = op.apply(u.coeffs());
        // oracle: sample the product pointwise and project
        let grid = Grid::new(k, 2 * k + 1).unwrap();
        let uv = grid.evaluate(&u);
        let mut prod = vec![0.0; uv.len()];
        for j in 0..grid.len() {
            let m = a_loop.eval(grid.time(j));
            for i in 0..2 {
                prod[j * 2 + i] = m[(i, 0)] * uv[j * 2] + m[(i, 1)] * uv[j * 2 + 1];
            }
        }
        let oracle = grid.project(&prod, 2, k).unwrap();
        let err = au.iter().zip(oracle.coeffs()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn constant_matrix_commutes() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 3.0]);
        let a = MatrixLoop::constant(&m, 6);
        for v in [CommutatorVariant::V1, CommutatorVariant::V2] {
            let c = commutator_operator(&a, 0.6, 0.5, 6, v).unwrap();
            assert!(c.matrix.amax() < 1e-12);
        }
    }

    #[test]
    fn commutator_chain_rule_identity() {
        let (k, s) = (10, 0.6);
        let a = MatrixLoop::random(2, 5, 0.5, &mut rng());
        let entries = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| a.entry(i, j).with_degree(k))
            .collect();
        let a = MatrixLoop::from_entries(2, entries).unwrap();
        let v1 = commutator_operator(&a, s, 0.5, k, CommutatorVariant::V1).unwrap();
        let v2 = commutator_operator(&a, s, 0.5, k, CommutatorVariant::V2).unwrap();
        let ad = multiplication_operator(&a.derivative(), 0.5, 0.5, k);
        let rhs = v2.matrix - delta_matrix(2, k, s - 1.0) * ad.matrix;
        assert!((v1.matrix - rhs).amax() < 1e-10);
    }

    #[test]
    fn relative_dimension_examples() {
        let w = vec![1.0; 6];
        let e = |idx: &[usize]| {
            let mut m = DMatrix::zeros(6, idx.len());
            for (c, i) in idx.iter().enumerate() {
                m[(*i, c)] = 1.0;
            }
            SubspaceBasis::new(m, w.clone()).unwrap()
        };
        let v = e(&[0, 1]);
        assert_eq!(relative_dimension(&v, &v).unwrap(), 0);
        let bigger = e(&[0, 1, 4]);
        assert_eq!(relative_dimension(&bigger, &v).unwrap(), 1);
        assert_eq!(relative_dimension(&v, &bigger).unwrap(), -1);
        let parts = relative_dimension_parts(&e(&[0, 1]), &e(&[2, 3, 4]), RankTolerance::default()).unwrap();
        assert_eq!(parts, RelativeDimension { v_perp_w: 2, w_perp_v: 3 });
    }

    #[test]
    fn ambiguous_rank_is_rejected() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-8]));
        assert!(matches!(
            numerical_rank(&m, RankTolerance::default()),
            Err(Error::AmbiguousRank { .. })
        ));
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-12]));
        assert_eq!(numerical_rank(&m, RankTolerance::default()).unwrap(), 1);
    }

    fn sine_diffeo(amplitude: f64) -> TrigDiffeo {
        TrigDiffeo::new(TrigField {
            dim: 1,
            terms: vec![TrigTerm {
                component: 0,
                amplitude,
                time_mode: 0,
                q_modes: vec![1],
                sine: true,
            }],
        })
        .unwrap()
    }

    fn winding_point(k: usize, p: f64) -> PhasePoint {
        let s = SobolevExponent::for_action(0.6).unwrap();
        PhasePoint::new(
            FourierLoop::basis(1, k, 1, Part::Sin, 0, 0.05),
            WindingVector(vec![1]),
            FourierLoop::constant(&[p], k),
            s,
        )
        .unwrap()
    }

    #[test]
    fn identity_chart_transition() {
        let z = winding_point(6, 0.4);
        let d = chart_transition_differential(&TrigDiffeo::identity(1), &z, 6).unwrap();
        assert!((d.matrix - DMatrix::identity(26, 26)).amax() < 1e-12);
    }

    #[test]
    fn non_diffeomorphism_reports_grid_point() {
        let z = winding_point(6, 0.0);
        match chart_transition_differential(&sine_diffeo(0.2), &z, 6) {
            Err(Error::NotDiffeomorphism { det, .. }) => assert!(det <= 0.0),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn composition_with_inverse_is_identity() {
        let z = winding_point(6, 0.7);
        let tau = Compose {
            outer: sine_diffeo(0.1),
            inner: Inverse(sine_diffeo(0.1)),
        };
        let d = chart_transition_differential(&tau, &z, 6).unwrap();
        assert!((d.matrix - DMatrix::identity(26, 26)).amax() < 1e-8);
    }

    #[test]
    fn diffeo_derivatives_match_finite_differences() {
        let theta = TrigField {
            dim: 2,
            terms: vec![
                TrigTerm { component: 0, amplitude: 0.05, time_mode: 1, q_modes: vec![1, -1], sine: true },
                TrigTerm { component: 1, amplitude: 0.03, time_mode: 0, q_modes: vec![2, 1], sine: false },
            ],
        };
        let tau = Compose {
            outer: TrigDiffeo::new(theta.clone()).unwrap(),
            inner: Inverse(TrigDiffeo::new(theta).unwrap()),
        };
        let q = [0.3, -0.2];
        let h = 1e-6;
        let j = tau.jacobian(0.4, &q);
        for l in 0..2 {
            let mut qp = q;
            let mut qm = q;
            qp[l] += h;
            qm[l] -= h;
            let fd = (tau.value(0.4, &qp)[0] - tau.value(0.4, &qm)[0]) / (2.0 * h);
            assert!((fd - j[(0, l)]).abs() < 1e-8);
            let djfd = (tau.jacobian(0.4, &qp) - tau.jacobian(0.4, &qm)) / (2.0 * h);
            assert!((djfd - tau.jacobian_derivative(0.4, &q, l)).amax() < 1e-7);
        }
    }

    #[test]
    fn loglog_fit_recovers_power() {
        let pts: Vec<(f64, f64)> = (1..20).map(|k| (k as f64, 3.0 * (k as f64).powf(-1.7))).collect();
        let (slope, res) = loglog_fit(&pts);
        assert!((slope + 1.7).abs() < 1e-12 && res < 1e-12);
    }
}
