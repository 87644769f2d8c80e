//! The Hamiltonian action on truncated loops in `T*T^n`.
//!
//! For `H(t, q, p) = |p - theta(t, q)|^2 / 2 + U(t, q)` and a phase point with
//! base loop `m t + q(t)`,
//!
//! ```text
//! A_H(q, p) = int p . (m + q') dt - int H(t, m t + q, p) dt.
//! ```
//!
//! The Liouville term is evaluated exactly on coefficients, the Hamiltonian term by
//! the uniform quadrature on `4K + 1` points. Differential and Hessian are exact
//! derivatives of this discrete functional.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::loopspace::{
    coeff_len, index_mode, l2_weights, mixed_metric_weights, Grid, PhasePoint,
    PhasePointRecord, SobolevExponent, WindingVector,
};
use crate::operators::{derivative_matrix, form_eigen, grid_max, sample_phase_point, TrigField};
use crate::par;

/// One term `amplitude * cos|sin(2 pi (time_mode t + q_modes . q))` of a scalar potential.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialTerm {
    pub amplitude: f64,
    #[serde(default)]
    pub time_mode: i64,
    pub q_modes: Vec<i64>,
    #[serde(default)]
    pub sine: bool,
}

/// A scalar trigonometric polynomial `U(t, q)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigPotential {
    pub dim: usize,
    pub terms: Vec<PotentialTerm>,
}

impl TrigPotential {
    pub fn zero(dim: usize) -> Self {
        Self { dim, terms: Vec::new() }
    }

    /// `eps * cos(2 pi q)` in one dimension.
    pub fn pendulum(eps: f64) -> Self {
        Self {
            dim: 1,
            terms: vec![PotentialTerm {
                amplitude: eps,
                time_mode: 0,
                q_modes: vec![1],
                sine: false,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.iter().any(|t| t.q_modes.len() != self.dim) {
            return Err(invalid("potential", format!("every term needs {} q-modes", self.dim)));
        }
        Ok(())
    }

    /// Value, gradient and Hessian in `q`.
    pub fn jet(&self, t: f64, q: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let n = self.dim;
        let mut v = 0.0;
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for term in &self.terms {
            let phase = std::f64::consts::TAU
                * (term.time_mode as f64 * t
                    + term.q_modes.iter().zip(q).map(|(k, x)| *k as f64 * x).sum::<f64>());
            let (s, c) = phase.sin_cos();
            let a = term.amplitude;
            let (f0, f1, f2) = if term.sine { (a * s, a * c, -a * s) } else { (a * c, -a * s, -a * c) };
            v += f0;
            for i in 0..n {
                let ki = std::f64::consts::TAU * term.q_modes[i] as f64;
                g[i] += f1 * ki;
                for j in 0..n {
                    h[(i, j)] += f2 * ki * std::f64::consts::TAU * term.q_modes[j] as f64;
                }
            }
        }
        (v, g, h)
    }

    pub fn value(&self, t: f64, q: &[f64]) -> f64 {
        self.jet(t, q).0
    }

    fn time_dependent(&self) -> bool {
        self.terms.iter().any(|t| t.time_mode != 0)
    }
}

/// `H(t, q, p) = |p - theta(t, q)|^2 / 2 + U(t, q)` on `T*T^n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianSpec {
    pub n: usize,
    pub theta: TrigField,
    pub potential: TrigPotential,
    /// Constant added to `H`; shifts every action value by `-shift`.
    #[serde(default)]
    pub shift: f64,
    #[serde(default)]
    pub note: String,
}

impl HamiltonianSpec {
    pub fn new(theta: TrigField, potential: TrigPotential) -> Result<Self> {
        let spec = Self {
            n: potential.dim,
            theta,
            potential,
            shift: 0.0,
            note: String::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.theta.dim != self.n || self.potential.dim != self.n {
            return Err(invalid(
                "hamiltonian",
                format!(
                    "dimensions n = {}, theta = {}, U = {} must agree and be positive",
                    self.n, self.theta.dim, self.potential.dim
                ),
            ));
        }
        self.theta.validate()?;
        self.potential.validate()
    }

    /// `p^2 / 2` in dimension `n`.
    pub fn free(n: usize) -> Self {
        Self {
            n,
            theta: TrigField::zero(n),
            potential: TrigPotential::zero(n),
            shift: 0.0,
            note: "free".into(),
        }
    }

    /// `p^2 / 2 + eps cos(2 pi q)`.
    pub fn pendulum(eps: f64) -> Self {
        Self {
            n: 1,
            theta: TrigField::zero(1),
            potential: TrigPotential::pendulum(eps),
            shift: 0.0,
            note: format!("pendulum eps = {eps}"),
        }
    }

    pub fn with_shift(mut self, shift: f64) -> Self {
        self.shift = shift;
        self
    }

    pub fn is_autonomous(&self) -> bool {
        !self.potential.time_dependent() && self.theta.terms.iter().all(|t| t.time_mode == 0)
    }

    pub fn value(&self, t: f64, q: &[f64], p: &[f64]) -> f64 {
        let th = self.theta.value(t, q);
        let kin: f64 = p.iter().zip(&th).map(|(a, b)| (a - b).powi(2)).sum();
        0.5 * kin + self.potential.value(t, q) + self.shift
    }
}

/// Samples per dimension of the `(t, q)` grid for sup-norm maximization.
fn sup_samples(n: usize, time_dependent: bool) -> usize {
    let dims = n as u32 + u32::from(time_dependent);
    // about 10^6 points in total
    ((1e6f64).powf(1.0 / dims as f64) as usize).clamp(8, 256)
}

/// `c = max(||U||_inf, ||theta||_inf)` and the bound `-c^2/2 - 3c` on critical values.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ActionLowerBound {
    pub c: f64,
    pub sup_potential: f64,
    pub sup_theta: f64,
    pub bound: f64,
}

/// Lower bound on critical values, with `c` found by grid maximization plus refinement.
///
/// A constant shift of `H` moves critical values by `-shift`, so the bound does too.
pub fn action_lower_bound(h: &HamiltonianSpec) -> ActionLowerBound {
    let td = !h.is_autonomous();
    let samples = sup_samples(h.n, td);
    let pot = &h.potential;
    let sup_u = grid_max(h.n, samples, td, |t, q| pot.value(t, q).abs());
    let sup_theta = if h.theta.terms.is_empty() { 0.0 } else { h.theta.grid_sup(samples) };
    let c = sup_u.max(sup_theta);
    ActionLowerBound {
        c,
        sup_potential: sup_u,
        sup_theta,
        bound: -0.5 * c * c - 3.0 * c - h.shift,
    }
}

/// The discretized action functional at truncation `K`.
#[derive(Clone, Debug)]
pub struct Action {
    pub h: HamiltonianSpec,
    pub k: usize,
    pub s: SobolevExponent,
    grid: Grid,
    /// Basis samples: row `j n + c`, column = coefficient index.
    phi: DMatrix<f64>,
    l2: Vec<f64>,
    metric: Vec<f64>,
}

/// Pointwise second derivatives of `-H` at one sample.
struct PointHessian {
    qq: DMatrix<f64>,
    pq: DMatrix<f64>,
}

impl Action {
    pub fn new(h: HamiltonianSpec, k: usize, s: SobolevExponent) -> Result<Self> {
        h.validate()?;
        let n = h.n;
        let grid = Grid::dealiased(k);
        let d = coeff_len(n, k);
        let mut phi = DMatrix::zeros(grid.len() * n, d);
        for col in 0..d {
            let (mode, part, comp) = index_mode(n, col);
            for j in 0..grid.len() {
                phi[(j * n + comp, col)] = grid.basis_value(j, mode, part);
            }
        }
        Ok(Self {
            l2: l2_weights(n, k),
            metric: mixed_metric_weights(n, k, s.value()),
            h,
            k,
            s,
            grid,
            phi,
        })
    }

    pub fn n(&self) -> usize {
        self.h.n
    }

    /// Length of the phase-point coordinate vector.
    pub fn dim(&self) -> usize {
        2 * coeff_len(self.n(), self.k)
    }

    /// Diagonal of the mixed metric on raw coordinates.
    pub fn metric_weights(&self) -> &[f64] {
        &self.metric
    }

    fn check(&self, z: &PhasePoint) -> Result<()> {
        if z.dim() != self.n() || z.degree() != self.k {
            return Err(Error::DimensionMismatch(format!(
                "phase point (n = {}, K = {}) for an action at (n = {}, K = {})",
                z.dim(),
                z.degree(),
                self.n(),
                self.k
            )));
        }
        Ok(())
    }

    /// Point with this action's truncation and exponent.
    pub fn point(&self, winding: WindingVector, v: &[f64]) -> PhasePoint {
        PhasePoint::from_vector(self.n(), self.k, winding, self.s, v).expect("coordinate vector of matching length")
    }

    pub fn value(&self, z: &PhasePoint) -> Result<f64> {
        self.check(z)?;
        let n = self.n();
        let m = z.winding.as_f64();
        let liouville = m.iter().zip(z.p.mean()).map(|(a, b)| a * b).sum::<f64>() + z.p.l2_inner(&z.q.derivative());
        let (q, p) = sample_phase_point(z, &self.grid);
        let mut ham = 0.0;
        for j in 0..self.grid.len() {
            let t = self.grid.time(j);
            ham += self.h.value(t, &q[j * n..(j + 1) * n], &p[j * n..(j + 1) * n]);
        }
        Ok(liouville - ham * self.grid.weight())
    }

    /// Differential `dA(z)` as a covector on raw coordinates: `dA[w] = c . w`.
    pub fn differential(&self, z: &PhasePoint) -> Result<Vec<f64>> {
        self.check(z)?;
        let n = self.n();
        let (q, p) = sample_phase_point(z, &self.grid);
        let len = self.grid.len();
        let mut gq = vec![0.0; len * n];
        let mut gp = vec![0.0; len * n];
        for j in 0..len {
            let t = self.grid.time(j);
            let qj = &q[j * n..(j + 1) * n];
            let th = self.h.theta.value(t, qj);
            let dth = self.h.theta.jacobian(t, qj);
            let (_, du, _) = self.h.potential.jet(t, qj);
            let rel = DVector::from_iterator(n, p[j * n..(j + 1) * n].iter().zip(&th).map(|(a, b)| a - b));
            let dq = dth.transpose() * &rel - du;
            for c in 0..n {
                gq[j * n + c] = dq[c];
                gp[j * n + c] = -rel[c];
            }
        }
        let gq = self.grid.project(&gq, n, self.k)?;
        let gp = self.grid.project(&gp, n, self.k)?;
        let pdot = z.p.derivative();
        let qdot = z.q.derivative();
        let half = coeff_len(n, self.k);
        let mut c = vec![0.0; 2 * half];
        for i in 0..half {
            c[i] = self.l2[i] * (gq.coeffs()[i] - pdot.coeffs()[i]);
            c[half + i] = self.l2[i] * (gp.coeffs()[i] + qdot.coeffs()[i]);
        }
        for (ci, mi) in c[half..half + n].iter_mut().zip(z.winding.as_f64()) {
            *ci += mi;
        }
        Ok(c)
    }

    /// Mixed-metric gradient: the differential divided by the metric weights.
    pub fn gradient(&self, z: &PhasePoint) -> Result<Vec<f64>> {
        Ok(self.differential(z)?.iter().zip(&self.metric).map(|(c, w)| c / w).collect())
    }

    /// Mixed-metric norm of the gradient, `(sum c_i^2 / g_i)^{1/2}`.
    pub fn residual_of(&self, covector: &[f64]) -> f64 {
        covector.iter().zip(&self.metric).map(|(c, w)| c * c / w).sum::<f64>().sqrt()
    }

    pub fn residual(&self, z: &PhasePoint) -> Result<f64> {
        Ok(self.residual_of(&self.differential(z)?))
    }

    fn point_hessian(&self, t: f64, q: &[f64], p: &[f64]) -> PointHessian {
        let n = self.n();
        let th = self.h.theta.value(t, q);
        let dth = self.h.theta.jacobian(t, q);
        let (_, _, d2u) = self.h.potential.jet(t, q);
        let rel = DVector::from_iterator(n, p.iter().zip(&th).map(|(a, b)| a - b));
        let mut qq = -(dth.transpose() * &dth) - d2u;
        if !self.h.theta.terms.is_empty() {
            for l in 0..n {
                let col = self.h.theta.jacobian_derivative(t, q, l).transpose() * &rel;
                for j in 0..n {
                    qq[(j, l)] += col[j];
                }
            }
        }
        PointHessian { qq, pq: dth }
    }

    /// `Phi^T blockdiag(F_j) Phi / N`.
    fn grid_form(&self, mats: &[DMatrix<f64>]) -> DMatrix<f64> {
        let n = self.n();
        let mut wphi = self.phi.clone();
        for (j, f) in mats.iter().enumerate() {
            let rows = self.phi.rows(j * n, n);
            let block = f * rows;
            wphi.rows_mut(j * n, n).copy_from(&block);
        }
        self.phi.transpose() * wphi * self.grid.weight()
    }

    /// Symmetric matrix `S` of the Hessian form: `d^2 A(z)[v, w] = v^T S w`.
    pub fn hessian_form(&self, z: &PhasePoint) -> Result<DMatrix<f64>> {
        self.check(z)?;
        let n = self.n();
        let half = coeff_len(n, self.k);
        let (q, p) = sample_phase_point(z, &self.grid);
        let pts: Vec<PointHessian> = (0..self.grid.len())
            .map(|j| self.point_hessian(self.grid.time(j), &q[j * n..(j + 1) * n], &p[j * n..(j + 1) * n]))
            .collect();
        let qq: Vec<DMatrix<f64>> = pts.iter().map(|h| h.qq.clone()).collect();
        let pq: Vec<DMatrix<f64>> = pts.iter().map(|h| h.pq.clone()).collect();
        let mut s = DMatrix::zeros(2 * half, 2 * half);
        s.view_mut((0, 0), (half, half)).copy_from(&self.grid_form(&qq));
        let spq = self.grid_form(&pq);
        // Liouville part: int k . h' + int k' ... as p-row / q-column entries l2_i D_ij
        let mut lio = derivative_matrix(n, self.k);
        for (i, w) in self.l2.iter().enumerate() {
            lio.row_mut(i).scale_mut(*w);
        }
        let off = spq + lio;
        s.view_mut((half, 0), (half, half)).copy_from(&off);
        s.view_mut((0, half), (half, half)).copy_from(&off.transpose());
        for i in 0..half {
            s[(half + i, half + i)] = -self.l2[i];
        }
        Ok(s)
    }

    /// Metric representation `G^{-1} S` of the Hessian.
    pub fn hessian_metric(&self, z: &PhasePoint) -> Result<DMatrix<f64>> {
        let mut s = self.hessian_form(z)?;
        for (i, w) in self.metric.iter().enumerate() {
            s.row_mut(i).scale_mut(1.0 / w);
        }
        Ok(s)
    }

    /// Eigenvalues of the metric Hessian, ascending.
    pub fn hessian_spectrum(&self, z: &PhasePoint) -> Result<Vec<f64>> {
        Ok(form_eigen(&self.hessian_form(z)?, &self.metric).0)
    }

    /// Dimension of the truncated reference space `H^- + (constant fiber directions)`.
    pub fn reference_dimension(&self) -> usize {
        2 * self.k * self.n() + self.n()
    }
}

/// Hyperbolicity gap and relative index from the metric Hessian spectrum.
pub fn index_from_spectrum(spectrum: &[f64], reference_dimension: usize) -> (f64, i64) {
    let gap = spectrum.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    let negatives = spectrum.iter().filter(|v| **v < 0.0).count();
    (gap, negatives as i64 - reference_dimension as i64)
}

/// A critical point with its diagnostics.
#[derive(Clone, Debug)]
pub struct CriticalPoint {
    pub z: PhasePoint,
    pub action: f64,
    pub residual: f64,
    pub hyperbolicity_gap: f64,
    pub relative_index: i64,
    pub degenerate: bool,
    pub k_used: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriticalPointRecord {
    pub id: usize,
    pub z: PhasePointRecord,
    pub action: f64,
    pub residual: f64,
    pub hyperbolicity_gap: f64,
    pub relative_index: i64,
    pub degenerate: bool,
    #[serde(rename = "K_used")]
    pub k_used: usize,
}

impl CriticalPoint {
    pub fn to_record(&self, id: usize) -> CriticalPointRecord {
        CriticalPointRecord {
            id,
            z: self.z.to_record(),
            action: self.action,
            residual: self.residual,
            hyperbolicity_gap: self.hyperbolicity_gap,
            relative_index: self.relative_index,
            degenerate: self.degenerate,
            k_used: self.k_used,
        }
    }
}

/// Newton and dedup tolerances.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iterations: usize,
    pub dedup_tol: f64,
    pub hyperbolicity_threshold: f64,
    /// Residual above which an iterate counts as diverged.
    pub divergence: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iterations: 60,
            dedup_tol: 1e-6,
            hyperbolicity_threshold: 1e-6,
            divergence: 1e8,
        }
    }
}

/// Seeds for the critical point search: constant loops on a grid in `T^n`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    /// Points per dimension of the `q` grid.
    pub q_grid: usize,
    pub windings: Vec<Vec<i64>>,
    /// Constant fiber values tried at every `q` (the winding itself is always tried).
    #[serde(default)]
    pub p_offsets: Vec<Vec<f64>>,
}

impl SeedSpec {
    pub fn constants(n: usize, q_grid: usize) -> Self {
        Self {
            q_grid,
            windings: vec![vec![0; n]],
            p_offsets: Vec::new(),
        }
    }

    pub fn seeds(&self, n: usize, k: usize, s: SobolevExponent) -> Vec<PhasePoint> {
        let mut out = Vec::new();
        let total = self.q_grid.pow(n as u32);
        for m in &self.windings {
            let mut ps: Vec<Vec<f64>> = vec![m.iter().map(|x| *x as f64).collect()];
            for off in &self.p_offsets {
                ps.push(off.iter().zip(m).map(|(o, x)| o + *x as f64).collect());
            }
            for idx in 0..total {
                let mut rest = idx;
                let q: Vec<f64> = (0..n)
                    .map(|_| {
                        let v = (rest % self.q_grid) as f64 / self.q_grid as f64;
                        rest /= self.q_grid;
                        v
                    })
                    .collect();
                for p in &ps {
                    let mut z = PhasePoint::constant(&q, p, k, s);
                    z.winding = WindingVector(m.clone());
                    out.push(z);
                }
            }
        }
        out
    }
}

/// Why a seed did not produce a critical point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedFailure {
    Diverged { residual: f64 },
    MaxIterations { residual: f64 },
    SingularHessian { residual: f64 },
}

#[derive(Clone, Debug)]
pub struct FinderReport {
    /// Deduplicated, sorted by `(action, coefficients)`.
    pub points: Vec<CriticalPoint>,
    pub failures: Vec<(usize, SeedFailure)>,
    pub seeds: usize,
}

impl FinderReport {
    pub fn hyperbolic(&self) -> impl Iterator<Item = &CriticalPoint> {
        self.points.iter().filter(|c| !c.degenerate)
    }

    pub fn all_hyperbolic(&self) -> bool {
        self.points.iter().all(|c| !c.degenerate)
    }
}

/// Newton's method on `dA = 0` from `z0`, with backtracking on the residual.
pub fn newton(action: &Action, z0: &PhasePoint, opts: &NewtonOptions) -> std::result::Result<PhasePoint, SeedFailure> {
    let mut z = z0.clone();
    let mut c = action.differential(&z).expect("phase point matches the action");
    let mut res = action.residual_of(&c);
    for _ in 0..opts.max_iterations {
        if res < opts.tol {
            return Ok(z);
        }
        if !res.is_finite() || res > opts.divergence {
            return Err(SeedFailure::Diverged { residual: res });
        }
        let s = action.hessian_form(&z).expect("phase point matches the action");
        let rhs = -DVector::from_column_slice(&c);
        let step = match s.lu().solve(&rhs) {
            Some(step) if step.iter().all(|x| x.is_finite()) => step,
            _ => return Err(SeedFailure::SingularHessian { residual: res }),
        };
        let x = z.to_vector();
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + alpha * b).collect();
            let zt = z.with_vector(&trial);
            let ct = action.differential(&zt).expect("matching point");
            let rt = action.residual_of(&ct);
            if rt.is_finite() && rt < res {
                z = zt;
                c = ct;
                res = rt;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            if res < 10.0 * opts.tol {
                return Ok(z);
            }
            return Err(SeedFailure::MaxIterations { residual: res });
        }
    }
    if res < opts.tol {
        Ok(z)
    } else {
        Err(SeedFailure::MaxIterations { residual: res })
    }
}

/// Shift the mean of `q` into `[0, 1)^n` (snapping values just below 1 to 0).
pub fn normalize_lift(z: &PhasePoint) -> PhasePoint {
    let mut v = z.to_vector();
    for x in v.iter_mut().take(z.dim()) {
        let mut y = x.rem_euclid(1.0);
        if y > 1.0 - 1e-9 {
            y -= 1.0;
        }
        *x = y;
    }
    z.with_vector(&v)
}

/// Mixed-metric distance minimized over integer shifts of the `q` mean.
pub fn lift_distance(a: &PhasePoint, b: &PhasePoint) -> f64 {
    if a.winding != b.winding {
        return f64::INFINITY;
    }
    let w = mixed_metric_weights(a.dim(), a.degree(), a.s.value());
    let (va, vb) = (a.to_vector(), b.to_vector());
    let n = a.dim();
    let mut diff: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| x - y).collect();
    for x in diff.iter_mut().take(n) {
        *x -= x.round();
    }
    diff.iter().zip(&w).map(|(d, w)| w * d * d).sum::<f64>().sqrt()
}

fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

/// Diagnose a converged point.
pub fn classify(action: &Action, z: PhasePoint, opts: &NewtonOptions) -> Result<CriticalPoint> {
    let spectrum = action.hessian_spectrum(&z)?;
    let (gap, index) = index_from_spectrum(&spectrum, action.reference_dimension());
    Ok(CriticalPoint {
        action: action.value(&z)?,
        residual: action.residual(&z)?,
        hyperbolicity_gap: gap,
        relative_index: index,
        degenerate: gap <= opts.hyperbolicity_threshold,
        k_used: action.k,
        z,
    })
}

/// Run Newton from every seed, deduplicate modulo lifts and sort by `(action, coefficients)`.
pub fn find_critical_points(action: &Action, seeds: &[PhasePoint], opts: &NewtonOptions) -> Result<FinderReport> {
    for z in seeds {
        action.check(z)?;
    }
    let results = par::map_range(seeds.len(), |i| newton(action, &seeds[i], opts).map(|z| normalize_lift(&z)));
    let mut converged = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(z) => converged.push(z),
            Err(f) => failures.push((i, f)),
        }
    }
    let mut valued: Vec<(f64, PhasePoint)> = converged
        .into_iter()
        .map(|z| action.value(&z).map(|a| (a, z)))
        .collect::<Result<_>>()?;
    valued.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| lexicographic(&a.1.to_vector(), &b.1.to_vector())));
    let mut unique: Vec<PhasePoint> = Vec::new();
    for (_, z) in valued {
        if unique.iter().all(|u| lift_distance(u, &z) >= opts.dedup_tol) {
            unique.push(z);
        }
    }
    let points = par::map_range(unique.len(), |i| classify(action, unique[i].clone(), opts));
    let mut points: Vec<CriticalPoint> = points.into_iter().collect::<Result<_>>()?;
    points.sort_by(|a, b| {
        a.action
            .total_cmp(&b.action)
            .then_with(|| lexicographic(&a.z.to_vector(), &b.z.to_vector()))
    });
    Ok(FinderReport {
        points,
        failures,
        seeds: seeds.len(),
    })
}

/// Relative index of a critical point re-solved at each truncation level.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexSweep {
    /// `(K, index)`
    pub levels: Vec<(usize, i64)>,
    pub index: i64,
}

/// Re-solve `cp` at every `K` in `ks` and require the top two levels to agree.
pub fn relative_index_sweep(
    h: &HamiltonianSpec,
    cp: &CriticalPoint,
    ks: &[usize],
    opts: &NewtonOptions,
) -> Result<IndexSweep> {
    if ks.is_empty() {
        return Err(invalid("K sweep", "empty"));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    let mut levels = Vec::new();
    for &k in &ks {
        let action = Action::new(h.clone(), k, cp.z.s)?;
        let z0 = cp.z.with_degree(k);
        let z = newton(&action, &z0, opts).map_err(|f| Error::Singular(format!("re-solve at K = {k} failed: {f:?}")))?;
        let (_, index) = index_from_spectrum(&action.hessian_spectrum(&z)?, action.reference_dimension());
        levels.push((k, index));
    }
    let top = &levels[levels.len().saturating_sub(2)..];
    if top.iter().any(|l| l.1 != top[0].1) {
        return Err(Error::IndexUnstable { levels });
    }
    let index = top[0].1;
    Ok(IndexSweep { levels, index })
}

/// Convenience: `A_H` of an arbitrary point.
pub fn eval_action(h: &HamiltonianSpec, z: &PhasePoint) -> Result<f64> {
    Action::new(h.clone(), z.degree(), z.s)?.value(z)
}

/// Constant phase point helper in one dimension.
pub fn constant_point(q: f64, p: f64, k: usize, s: f64) -> Result<PhasePoint> {
    Ok(PhasePoint::constant(&[q], &[p], k, SobolevExponent::for_action(s)?))
}
