//! Connecting orbits between critical points and their mod-2 counts.
//!
//! A connection `x -> y` is computed on `[-T, T]` by trapezoidal collocation. Boundary
//! conditions put `u(-T) - x` in the unstable space at `x` and `u(T) - y` in the stable space
//! at `y`. For index gap one, a level-set condition `A(u(0)) = (A(x) + A(y)) / 2` removes the
//! time-shift family. The resulting banded system is solved by Newton's method.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::action::{Action, CriticalPoint};
use crate::band::BandMatrix;
use crate::complex::CountTable;
use crate::error::{invalid, Error, Result};
use crate::flow::{FlowIntegrator, FlowOptions};
use crate::loopspace::{coeff_len, index_mode, PhasePoint};
use crate::operators::{assemble_l, form_eigen, spectral_projectors};
use crate::par;

/// A vector field on the truncated phase space together with the action it decreases.
pub trait VectorFieldModel: Send + Sync {
    fn action(&self) -> &Action;
    fn eval(&self, z: &PhasePoint) -> Result<DVector<f64>>;
    fn jacobian(&self, z: &PhasePoint) -> Result<DMatrix<f64>>;
}

pub type FieldRef = Arc<dyn VectorFieldModel>;

/// `-grad A_H` in the mixed metric.
#[derive(Clone, Debug)]
pub struct GradientField {
    pub action: Action,
}

impl GradientField {
    pub fn new(action: Action) -> Self {
        Self { action }
    }

    pub fn shared(action: Action) -> FieldRef {
        Arc::new(Self::new(action))
    }
}

impl VectorFieldModel for GradientField {
    fn action(&self) -> &Action {
        &self.action
    }

    fn eval(&self, z: &PhasePoint) -> Result<DVector<f64>> {
        Ok(-DVector::from_vec(self.action.gradient(z)?))
    }

    fn jacobian(&self, z: &PhasePoint) -> Result<DMatrix<f64>> {
        Ok(-self.action.hessian_metric(z)?)
    }
}

fn metric_norm(w: &[f64], v: &[f64]) -> f64 {
    v.iter().zip(w).map(|(a, g)| g * a * a).sum::<f64>().sqrt()
}

/// `v - c` with the `q` mean of the difference reduced modulo integers.
fn lift_difference(n: usize, v: &[f64], c: &[f64]) -> Vec<f64> {
    let mut d: Vec<f64> = v.iter().zip(c).map(|(a, b)| a - b).collect();
    for x in d.iter_mut().take(n) {
        *x -= x.round();
    }
    d
}

/// `C^1` ramp: 0 below 0, 1 above 1.
fn smoothstep(x: f64) -> (f64, f64) {
    if x <= 0.0 {
        (0.0, 0.0)
    } else if x >= 1.0 {
        (1.0, 0.0)
    } else {
        (x * x * (3.0 - 2.0 * x), 6.0 * x * (1.0 - x))
    }
}

/// Options for [`perturb_field`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbOptions {
    /// The perturbation vanishes within this metric distance of the critical set.
    pub radius: f64,
    /// Highest Fourier mode in the perturbation direction.
    pub modes: usize,
    /// Random loops added to the constant-loop grid for the Lyapunov samples.
    pub samples: usize,
    /// Points per dimension of the constant-loop sample grid.
    pub q_grid: usize,
}

impl Default for PerturbOptions {
    fn default() -> Self {
        Self {
            radius: 0.05,
            modes: 2,
            samples: 64,
            q_grid: 32,
        }
    }
}

/// `F + X` with `X(z) = amplitude * chi * psi(dist(z, Crit) / radius - 1) * v`.
///
/// `v` is a fixed metric-unit direction in low modes; `chi` is half the smallest value of
/// `-dA[F] = |grad A|^2` over the sample shell.
#[derive(Clone, Debug)]
pub struct PerturbedField {
    pub base: Action,
    pub amplitude: f64,
    pub chi: f64,
    pub radius: f64,
    pub direction: DVector<f64>,
    crit: Vec<Vec<f64>>,
}

impl PerturbedField {
    /// `(psi, grad psi)` at coordinates `v`.
    fn cutoff(&self, v: &[f64]) -> (f64, DVector<f64>) {
        let n = self.base.n();
        let w = self.base.metric_weights();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for c in &self.crit {
            let d = lift_difference(n, v, c);
            let dist = metric_norm(w, &d);
            if best.as_ref().is_none_or(|b| dist < b.0) {
                best = Some((dist, d));
            }
        }
        let Some((dist, diff)) = best else {
            return (1.0, DVector::zeros(v.len()));
        };
        let (psi, dpsi) = smoothstep(dist / self.radius - 1.0);
        if dpsi == 0.0 || dist == 0.0 {
            return (psi, DVector::zeros(v.len()));
        }
        let grad = DVector::from_iterator(v.len(), diff.iter().zip(w).map(|(d, g)| dpsi * g * d / (dist * self.radius)));
        (psi, grad)
    }

    pub fn perturbation(&self, z: &PhasePoint) -> DVector<f64> {
        let (psi, _) = self.cutoff(&z.to_vector());
        &self.direction * (self.amplitude * self.chi * psi)
    }
}

impl VectorFieldModel for PerturbedField {
    fn action(&self) -> &Action {
        &self.base
    }

    fn eval(&self, z: &PhasePoint) -> Result<DVector<f64>> {
        Ok(-DVector::from_vec(self.base.gradient(z)?) + self.perturbation(z))
    }

    fn jacobian(&self, z: &PhasePoint) -> Result<DMatrix<f64>> {
        let mut j = -self.base.hessian_metric(z)?;
        let (_, grad) = self.cutoff(&z.to_vector());
        j += &self.direction * grad.transpose() * (self.amplitude * self.chi);
        Ok(j)
    }
}

/// Random metric-unit direction supported on modes `<= modes` in both `q` and `p`.
fn low_mode_direction(action: &Action, modes: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let n = action.n();
    let half = coeff_len(n, action.k);
    let mut v = DVector::zeros(2 * half);
    for i in 0..2 * half {
        if index_mode(n, i % half).0 <= modes {
            v[i] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let norm = metric_norm(action.metric_weights(), v.as_slice());
    v / norm
}

/// Perturb `-grad A_H` away from the critical set, keeping the action a Lyapunov function.
pub fn perturb_field(action: &Action, crit: &[CriticalPoint], seed: u64, amplitude: f64, opts: &PerturbOptions) -> Result<PerturbedField> {
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return Err(invalid("amplitude", format!("{amplitude} must be finite and non-negative")));
    }
    let n = action.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = low_mode_direction(action, opts.modes, &mut rng);
    let mut field = PerturbedField {
        base: action.clone(),
        amplitude,
        chi: 0.0,
        radius: opts.radius,
        direction,
        crit: crit.iter().map(|c| c.z.with_degree(action.k).to_vector()).collect(),
    };
    // sample shell: constant loops on a grid, plus random low-mode loops
    let mut samples = Vec::new();
    let total = opts.q_grid.pow(n as u32);
    for idx in 0..total {
        let mut rest = idx;
        let q: Vec<f64> = (0..n)
            .map(|_| {
                let v = (rest % opts.q_grid) as f64 / opts.q_grid as f64;
                rest /= opts.q_grid;
                v
            })
            .collect();
        let mut v = vec![0.0; action.dim()];
        v[..n].copy_from_slice(&q);
        samples.push(v);
    }
    for _ in 0..opts.samples {
        let dir = low_mode_direction(action, opts.modes, &mut rng);
        let scale = rng.random_range(0.02..0.2);
        let mut v: Vec<f64> = dir.iter().map(|x| x * scale).collect();
        for x in v.iter_mut().take(n) {
            *x += rng.random_range(0.0..1.0);
        }
        samples.push(v);
    }
    let winding = crit.first().map(|c| c.z.winding.clone()).unwrap_or_else(|| crate::loopspace::WindingVector::zero(n));
    let shell: Vec<(PhasePoint, f64)> = samples
        .into_iter()
        .map(|v| {
            let psi = field.cutoff(&v).0;
            (action.point(winding.clone(), &v), psi)
        })
        .filter(|(_, psi)| *psi > 0.0)
        .collect();
    let grads: Vec<(Vec<f64>, Vec<f64>)> = shell
        .iter()
        .map(|(z, _)| Ok((action.differential(z)?, action.gradient(z)?)))
        .collect::<Result<_>>()?;
    let min_rate = grads
        .iter()
        .map(|(c, g)| c.iter().zip(g).map(|(a, b)| a * b).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    field.chi = if min_rate.is_finite() { 0.5 * min_rate } else { 0.0 };
    for (i, ((_, psi), (c, g))) in shell.iter().zip(&grads).enumerate() {
        let rate = c.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
        let push: f64 = c.iter().zip(field.direction.iter()).map(|(a, b)| a * b).sum();
        let value = -rate + amplitude * field.chi * psi * push;
        if value >= 0.0 && rate > 0.0 {
            return Err(Error::LyapunovViolation { sample: i, value });
        }
    }
    Ok(field)
}

/// Newton's method on `F(z) = 0` for a general field.
pub fn field_zero(field: &dyn VectorFieldModel, z0: &PhasePoint, tol: f64, max_iterations: usize) -> Option<PhasePoint> {
    let w = field.action().metric_weights().to_vec();
    let mut z = z0.clone();
    for _ in 0..max_iterations {
        let f = field.eval(&z).ok()?;
        if metric_norm(&w, f.as_slice()) < tol {
            return Some(z);
        }
        let step = field.jacobian(&z).ok()?.lu().solve(&(-f))?;
        let x = DVector::from_vec(z.to_vector()) + step;
        z = z.with_vector(x.as_slice());
    }
    let f = field.eval(&z).ok()?;
    (metric_norm(&w, f.as_slice()) < tol).then_some(z)
}

/// Solver and multistart parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionOptions {
    /// Half-length `T` of the time interval `[-T, T]`.
    pub t_bvp: f64,
    /// Mesh width; the number of intervals is rounded to an even number.
    pub mesh_h: f64,
    pub newton_tol: f64,
    pub max_iterations: usize,
    /// Allowed metric distance of the path ends from the endpoints.
    pub defect_tol: f64,
    pub dedup_tol: f64,
    /// Distances in `[dedup_tol, ambiguity_factor * dedup_tol)` are ambiguous.
    pub ambiguity_factor: f64,
    /// Shooting seeds on the sphere of leading unstable directions.
    pub multistart: usize,
    /// Homotopy seeds per lift of the target.
    pub homotopy_seeds: usize,
    pub homotopy_amplitude: f64,
    /// Relative growth of the shooting offset between rounds of seeds.
    pub perturbation: f64,
    pub shoot_delta: f64,
    pub shoot_time: f64,
    pub capture_tol: f64,
    /// Lifts `y + m` with `|m_i| <= lift_range` are tried by homotopy seeds.
    pub lift_range: i64,
    pub coverage_min: f64,
    /// Largest acceptable pivot ratio of the collocation Jacobian at a solution.
    pub condition_max: f64,
    pub seed: u64,
}

impl Default for ConnectionOptions {
    fn default() -> Self {
        Self {
            t_bvp: 12.0,
            mesh_h: 0.1,
            newton_tol: 1e-10,
            max_iterations: 30,
            defect_tol: 1e-6,
            dedup_tol: 1e-4,
            ambiguity_factor: 10.0,
            multistart: 4,
            homotopy_seeds: 2,
            homotopy_amplitude: 0.05,
            perturbation: 0.5,
            shoot_delta: 1e-4,
            shoot_time: 200.0,
            capture_tol: 1e-3,
            lift_range: 1,
            coverage_min: 0.9,
            condition_max: 1e12,
            seed: 0,
        }
    }
}

impl ConnectionOptions {
    pub fn intervals(&self) -> usize {
        let m = (2.0 * self.t_bvp / self.mesh_h).round() as usize;
        (m + m % 2).max(2)
    }
}

/// A boundary value problem for one connection.
#[derive(Clone)]
pub struct ConnectionProblem {
    pub x: PhasePoint,
    /// Target, already lifted.
    pub y: PhasePoint,
    pub left: FieldRef,
    /// Field on `t > 0`; equal to `left` unless `hybrid`.
    pub right: FieldRef,
    pub hybrid: bool,
    pub t_bvp: f64,
    /// Number of mesh intervals (even).
    pub mesh: usize,
    /// Integer shift already applied to the target's `q` mean.
    pub lift: Vec<i64>,
}

impl ConnectionProblem {
    pub fn autonomous(x: PhasePoint, y: PhasePoint, field: FieldRef, t_bvp: f64, mesh: usize) -> Self {
        let n = field.action().n();
        Self {
            x,
            y,
            left: field.clone(),
            right: field,
            hybrid: false,
            t_bvp,
            mesh: mesh + mesh % 2,
            lift: vec![0; n],
        }
    }

    pub fn times(&self) -> Vec<f64> {
        let h = 2.0 * self.t_bvp / self.mesh as f64;
        (0..=self.mesh).map(|i| -self.t_bvp + i as f64 * h).collect()
    }
}

/// Why a solve did not yield an accepted connection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ConnectionFailure {
    Diverged { residual: f64 },
    MaxIterations { residual: f64 },
    EndpointConstant,
    BoundaryDefect { left: f64, right: f64 },
    SingularJacobian { pivot_ratio: f64 },
    NotDecreasing { max_increase: f64 },
    /// A shooting seed ended near a critical point that is not a lift of the target.
    ShotElsewhere { distance: f64 },
    Dimension { equations: usize, unknowns: usize },
}

#[derive(Clone, Debug)]
pub struct ConnectionSolution {
    pub times: Vec<f64>,
    pub path: Vec<PhasePoint>,
    pub actions: Vec<f64>,
    pub residual: f64,
    pub left_defect: f64,
    pub right_defect: f64,
    pub pivot_ratio: f64,
    pub iterations: usize,
    /// Integer shift of the target's `q` mean.
    pub lift: Vec<i64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RepresentativeRecord {
    pub lift: Vec<i64>,
    pub residual: f64,
    pub left_defect: f64,
    pub right_defect: f64,
    pub pivot_ratio: f64,
    pub action_start: f64,
    pub action_end: f64,
    /// `q` mean at `t = 0`.
    pub midpoint_mean: Vec<f64>,
}

impl ConnectionSolution {
    pub fn record(&self) -> RepresentativeRecord {
        RepresentativeRecord {
            lift: self.lift.clone(),
            residual: self.residual,
            left_defect: self.left_defect,
            right_defect: self.right_defect,
            pivot_ratio: self.pivot_ratio,
            action_start: self.actions[0],
            action_end: *self.actions.last().expect("nonempty path"),
            midpoint_mean: self.path[self.path.len() / 2].q.mean().to_vec(),
        }
    }
}

/// Rows `(G v)^T` for eigenvectors `v` of the linearization at `z`, stable ones if `stable`.
fn boundary_rows(field: &dyn VectorFieldModel, z: &PhasePoint, stable: bool) -> Result<DMatrix<f64>> {
    let w = field.action().metric_weights();
    let j = field.jacobian(z)?;
    // S = -G J is symmetric for gradient fields; symmetrize against roundoff
    let mut s = -j;
    for (i, wi) in w.iter().enumerate() {
        s.row_mut(i).scale_mut(*wi);
    }
    let s = (&s + s.transpose()) * 0.5;
    let (values, vectors) = form_eigen(&s, w);
    let picked: Vec<usize> = (0..values.len()).filter(|&i| if stable { values[i] > 0.0 } else { values[i] < 0.0 }).collect();
    let d = w.len();
    Ok(DMatrix::from_fn(picked.len(), d, |r, c| w[c] * vectors[(c, picked[r])]))
}

struct Layout {
    d: usize,
    mesh: usize,
    left: usize,
    right: usize,
    phase: bool,
}

impl Layout {
    fn unknowns(&self) -> usize {
        (self.mesh + 1) * self.d
    }

    fn colloc_row(&self, i: usize) -> usize {
        self.left + i * self.d + usize::from(self.phase && i >= self.mesh / 2)
    }

    fn phase_row(&self) -> usize {
        self.left + (self.mesh / 2) * self.d
    }

    fn right_row(&self) -> usize {
        self.left + self.mesh * self.d + usize::from(self.phase)
    }

    /// `(kl, ku)` of the Jacobian.
    fn bandwidths(&self) -> (usize, usize) {
        let d = self.d;
        let mut kl = 0usize;
        let mut ku = d.saturating_sub(1);
        for i in 0..self.mesh {
            let r = self.colloc_row(i);
            kl = kl.max(r + d - 1 - i * d);
            ku = ku.max(((i + 2) * d - 1).saturating_sub(r));
        }
        if self.phase {
            let r = self.phase_row();
            let c0 = (self.mesh / 2) * d;
            kl = kl.max(r - c0);
            ku = ku.max((c0 + d - 1).saturating_sub(r));
        }
        if self.right > 0 {
            let r = self.right_row();
            kl = kl.max(r + self.right - 1 - self.mesh * d);
        }
        (kl, ku)
    }
}

/// Newton on the collocated system from `guess` (one coordinate vector per mesh node).
pub fn solve_connection(prob: &ConnectionProblem, guess: &[Vec<f64>], opts: &ConnectionOptions) -> std::result::Result<ConnectionSolution, ConnectionFailure> {
    let d = prob.x.len();
    let m = prob.mesh;
    assert_eq!(guess.len(), m + 1, "one guess vector per mesh node");
    let lrows = boundary_rows(prob.left.as_ref(), &prob.x, true).map_err(|_| ConnectionFailure::Dimension { equations: 0, unknowns: d })?;
    let rrows = boundary_rows(prob.right.as_ref(), &prob.y, false).map_err(|_| ConnectionFailure::Dimension { equations: 0, unknowns: d })?;
    let bc = lrows.nrows() + rrows.nrows();
    let phase = !prob.hybrid && bc + 1 == d;
    let layout = Layout {
        d,
        mesh: m,
        left: lrows.nrows(),
        right: rrows.nrows(),
        phase,
    };
    let equations = bc + usize::from(phase) + m * d;
    if equations != layout.unknowns() {
        return Err(ConnectionFailure::Dimension {
            equations,
            unknowns: layout.unknowns(),
        });
    }
    let h = 2.0 * prob.t_bvp / m as f64;
    let half = m / 2;
    let xv = DVector::from_vec(prob.x.to_vector());
    let yv = DVector::from_vec(prob.y.to_vector());
    let action_x = prob.left.action().value(&prob.x).map_err(|_| ConnectionFailure::Diverged { residual: f64::NAN })?;
    let action_y = prob.right.action().value(&prob.y).map_err(|_| ConnectionFailure::Diverged { residual: f64::NAN })?;
    let level = 0.5 * (action_x + action_y);
    let point = |v: &DVector<f64>| prob.x.with_vector(v.as_slice());

    // field on interval i; node `half` belongs to both sides when hybrid
    let field_of = |interval: usize| if prob.hybrid && interval < half { &prob.left } else if prob.hybrid { &prob.right } else { &prob.left };

    struct NodeEval {
        f: DVector<f64>,
        f_left: Option<DVector<f64>>,
        j: Option<DMatrix<f64>>,
        j_left: Option<DMatrix<f64>>,
    }

    let evaluate = |u: &[DVector<f64>], with_jac: bool| -> Result<Vec<NodeEval>> {
        par::map_range(m + 1, |i| -> Result<NodeEval> {
            let z = point(&u[i]);
            let main = if i < half { field_of(i) } else { field_of(i.min(m - 1)) };
            let f = main.eval(&z)?;
            let j = if with_jac { Some(main.jacobian(&z)?) } else { None };
            let (f_left, j_left) = if prob.hybrid && i == half {
                let l = &prob.left;
                (Some(l.eval(&z)?), if with_jac { Some(l.jacobian(&z)?) } else { None })
            } else {
                (None, None)
            };
            Ok(NodeEval { f, f_left, j, j_left })
        })
        .into_iter()
        .collect()
    };

    let residual = |u: &[DVector<f64>], ev: &[NodeEval]| -> Result<DVector<f64>> {
        let mut r = DVector::zeros(layout.unknowns());
        let l = &lrows * (&u[0] - &xv);
        r.rows_mut(0, layout.left).copy_from(&l);
        for i in 0..m {
            let fi = &ev[i].f;
            // at the switch node, the interval to its left uses the left field
            let fi1 = if prob.hybrid && i + 1 == half { ev[i + 1].f_left.as_ref().expect("switch node") } else { &ev[i + 1].f };
            let c = &u[i + 1] - &u[i] - (fi + fi1) * (0.5 * h);
            r.rows_mut(layout.colloc_row(i), d).copy_from(&c);
        }
        if phase {
            r[layout.phase_row()] = prob.left.action().value(&point(&u[half]))? - level;
        }
        let rr = &rrows * (&u[m] - &yv);
        r.rows_mut(layout.right_row(), layout.right).copy_from(&rr);
        Ok(r)
    };

    let (kl, ku) = layout.bandwidths();
    let jacobian = |u: &[DVector<f64>], ev: &[NodeEval]| -> Result<BandMatrix> {
        let mut a = BandMatrix::zeros(layout.unknowns(), kl, ku);
        for r in 0..layout.left {
            for c in 0..d {
                a.set(r, c, lrows[(r, c)]);
            }
        }
        for i in 0..m {
            let row = layout.colloc_row(i);
            let ji = ev[i].j.as_ref().expect("jacobian requested");
            let ji1 = if prob.hybrid && i + 1 == half { ev[i + 1].j_left.as_ref().expect("switch node") } else { ev[i + 1].j.as_ref().expect("jacobian requested") };
            for p in 0..d {
                for q in 0..d {
                    let eye = if p == q { 1.0 } else { 0.0 };
                    a.set(row + p, i * d + q, -eye - 0.5 * h * ji[(p, q)]);
                    a.set(row + p, (i + 1) * d + q, eye - 0.5 * h * ji1[(p, q)]);
                }
            }
        }
        if phase {
            let c = prob.left.action().differential(&point(&u[half]))?;
            for (q, cq) in c.iter().enumerate() {
                a.set(layout.phase_row(), half * d + q, *cq);
            }
        }
        let r0 = layout.right_row();
        for r in 0..layout.right {
            for c in 0..d {
                a.set(r0 + r, m * d + c, rrows[(r, c)]);
            }
        }
        Ok(a)
    };

    let diverged = |res: f64| ConnectionFailure::Diverged { residual: res };
    let mut u: Vec<DVector<f64>> = guess.iter().map(|g| DVector::from_column_slice(g)).collect();
    let mut ev = evaluate(&u, true).map_err(|_| diverged(f64::NAN))?;
    let mut r = residual(&u, &ev).map_err(|_| diverged(f64::NAN))?;
    let mut res = r.amax();
    let mut iterations = 0;
    let pivot_ratio = loop {
        if !res.is_finite() || res > 1e8 {
            return Err(diverged(res));
        }
        let a = jacobian(&u, &ev).map_err(|_| diverged(res))?;
        let lu = a.lu().map_err(|_| ConnectionFailure::SingularJacobian { pivot_ratio: f64::INFINITY })?;
        if res < opts.newton_tol {
            break lu.pivot_ratio;
        }
        if iterations >= opts.max_iterations {
            return Err(ConnectionFailure::MaxIterations { residual: res });
        }
        iterations += 1;
        let step = lu.solve(r.as_slice());
        let norm0 = r.norm();
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let trial: Vec<DVector<f64>> = (0..=m)
                .map(|i| &u[i] - DVector::from_column_slice(&step[i * d..(i + 1) * d]) * alpha)
                .collect();
            let Ok(ev_t) = evaluate(&trial, false) else {
                alpha *= 0.5;
                continue;
            };
            let Ok(r_t) = residual(&trial, &ev_t) else {
                alpha *= 0.5;
                continue;
            };
            if r_t.norm() < (1.0 - 1e-4 * alpha) * norm0 || r_t.amax() < opts.newton_tol {
                u = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(ConnectionFailure::MaxIterations { residual: res });
        }
        ev = evaluate(&u, true).map_err(|_| diverged(res))?;
        r = residual(&u, &ev).map_err(|_| diverged(res))?;
        res = r.amax();
    };
    if pivot_ratio > opts.condition_max {
        return Err(ConnectionFailure::SingularJacobian { pivot_ratio });
    }
    let w = prob.left.action().metric_weights();
    let left_defect = metric_norm(w, (&u[0] - &xv).as_slice());
    let right_defect = metric_norm(w, (&u[m] - &yv).as_slice());
    let path: Vec<PhasePoint> = u.iter().map(&point).collect();
    let actions: Vec<f64> = path
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let f = if prob.hybrid && i >= half { &prob.right } else { &prob.left };
            f.action().value(z).unwrap_or(f64::NAN)
        })
        .collect();
    if !prob.hybrid {
        let near = |c: &DVector<f64>| u.iter().map(|v| metric_norm(w, (v - c).as_slice())).fold(0.0, f64::max) < 1e-6;
        if near(&xv) || near(&yv) {
            return Err(ConnectionFailure::EndpointConstant);
        }
    }
    if left_defect > opts.defect_tol || right_defect > opts.defect_tol {
        return Err(ConnectionFailure::BoundaryDefect {
            left: left_defect,
            right: right_defect,
        });
    }
    if !prob.hybrid {
        let scale = action_x.abs().max(action_y.abs()).max(1.0);
        let max_increase = actions.windows(2).map(|p| p[1] - p[0]).fold(f64::NEG_INFINITY, f64::max);
        if max_increase > 1e-13 * scale || actions[0] <= actions[m] {
            return Err(ConnectionFailure::NotDecreasing { max_increase });
        }
    }
    let lift = prob.lift.clone();
    Ok(ConnectionSolution {
        times: prob.times(),
        path,
        actions,
        residual: res,
        left_defect,
        right_defect,
        pivot_ratio,
        iterations,
        lift,
    })
}

/// `y` with its `q` mean shifted by the integer vector `m`.
pub fn lifted(y: &PhasePoint, m: &[i64]) -> PhasePoint {
    let mut v = y.to_vector();
    for (x, s) in v.iter_mut().zip(m) {
        *x += *s as f64;
    }
    y.with_vector(&v)
}

/// `x + (y - x)(1 + tanh t)/2 + amplitude sech(t) w` on the mesh.
pub fn tanh_guess(x: &PhasePoint, y: &PhasePoint, times: &[f64], bump: Option<(f64, &DVector<f64>)>) -> Vec<Vec<f64>> {
    let xv = DVector::from_vec(x.to_vector());
    let yv = DVector::from_vec(y.to_vector());
    times
        .iter()
        .map(|&t| {
            let mut v = &xv + (&yv - &xv) * (0.5 * (1.0 + t.tanh()));
            if let Some((a, w)) = bump {
                v += w * (a / t.cosh());
            }
            v.as_slice().to_vec()
        })
        .collect()
}

/// Resample a shooting trajectory so that the action crosses `level` at `t = 0`.
fn shooting_guess(traj: &crate::flow::Trajectory, level: f64, times: &[f64]) -> Vec<Vec<f64>> {
    let k = traj.actions.iter().position(|a| *a <= level).unwrap_or(traj.actions.len() - 1).max(1);
    let (a0, a1) = (traj.actions[k - 1], traj.actions[k]);
    let frac = if a0 > a1 { ((a0 - level) / (a0 - a1)).clamp(0.0, 1.0) } else { 0.0 };
    let t_star = traj.times[k - 1] + frac * (traj.times[k] - traj.times[k - 1]);
    let vecs: Vec<Vec<f64>> = traj.points.iter().map(|p| p.to_vector()).collect();
    times
        .iter()
        .map(|&t| {
            let s = (t_star + t).clamp(traj.times[0], traj.final_time());
            let j = traj.times.partition_point(|x| *x <= s).clamp(1, traj.times.len() - 1);
            let (t0, t1) = (traj.times[j - 1], traj.times[j]);
            let f = if t1 > t0 { (s - t0) / (t1 - t0) } else { 0.0 };
            vecs[j - 1].iter().zip(&vecs[j]).map(|(a, b)| a + f * (b - a)).collect()
        })
        .collect()
}

/// Unstable directions at `z` outside the reference space `H^- + (constant p)`,
/// metric-unit, most excess first.
pub fn leading_unstable_directions(action: &Action, z: &PhasePoint) -> Result<Vec<DVector<f64>>> {
    let n = action.n();
    let w = action.metric_weights();
    let (values, vectors) = form_eigen(&action.hessian_form(z)?, w);
    let minus = spectral_projectors(&assemble_l(n, action.k, action.s.value())?)?.minus.matrix;
    let half = coeff_len(n, action.k);
    let mut scored: Vec<(f64, DVector<f64>)> = Vec::new();
    for (j, v) in values.iter().enumerate() {
        if *v >= 0.0 {
            continue;
        }
        let col = vectors.column(j).into_owned();
        let mut rest = &col - &minus * &col;
        for c in 0..n {
            rest[half + c] = 0.0;
        }
        scored.push((metric_norm(w, rest.as_slice()), col));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let lead: Vec<DVector<f64>> = scored.iter().filter(|s| s.0 > 0.5).map(|s| s.1.clone()).take(3).collect();
    if lead.is_empty() {
        return Ok(scored.into_iter().take(1).map(|s| s.1).collect());
    }
    Ok(lead)
}

/// RMS metric distance of two paths on the same mesh, minimized over index shifts `|j| <= max_shift`.
pub fn path_distance(a: &ConnectionSolution, b: &ConnectionSolution, w: &[f64], max_shift: usize) -> f64 {
    if a.lift != b.lift || a.path.len() != b.path.len() {
        return f64::INFINITY;
    }
    let len = a.path.len();
    let va: Vec<Vec<f64>> = a.path.iter().map(|p| p.to_vector()).collect();
    let vb: Vec<Vec<f64>> = b.path.iter().map(|p| p.to_vector()).collect();
    let mut best = f64::INFINITY;
    for shift in -(max_shift as i64)..=max_shift as i64 {
        let mut acc = 0.0;
        let mut count = 0;
        for i in 0..len {
            let j = i as i64 + shift;
            if j < 0 || j >= len as i64 {
                continue;
            }
            let diff: Vec<f64> = va[i].iter().zip(&vb[j as usize]).map(|(x, y)| x - y).collect();
            acc += metric_norm(w, &diff).powi(2);
            count += 1;
        }
        if count > 0 {
            best = best.min((acc / count as f64).sqrt());
        }
    }
    best
}

/// Result of a multistart count for one pair.
#[derive(Clone, Debug)]
pub struct ConnectionCount {
    pub raw_count: usize,
    pub sigma: u8,
    pub representatives: Vec<ConnectionSolution>,
    /// Fraction of seeds aimed at a lift with a solution that converged to a representative.
    pub coverage: f64,
    pub reliable: bool,
    pub seeds: usize,
    pub failures: Vec<(usize, ConnectionFailure)>,
    pub note: String,
}

impl ConnectionCount {
    fn trivial(note: impl Into<String>) -> Self {
        Self {
            raw_count: 0,
            sigma: 0,
            representatives: Vec::new(),
            coverage: 1.0,
            reliable: true,
            seeds: 0,
            failures: Vec::new(),
            note: note.into(),
        }
    }
}

enum Seed {
    Guess { lift: Vec<i64>, guess: Vec<Vec<f64>> },
    Failed(ConnectionFailure),
}

fn lift_set(n: usize, range: i64) -> Vec<Vec<i64>> {
    let side = (2 * range + 1) as usize;
    (0..side.pow(n as u32))
        .map(|mut idx| {
            (0..n)
                .map(|_| {
                    let v = (idx % side) as i64 - range;
                    idx /= side;
                    v
                })
                .collect()
        })
        .collect()
}

fn homotopy_seeds(
    x: &PhasePoint,
    y: &PhasePoint,
    action: &Action,
    times: &[f64],
    opts: &ConnectionOptions,
    rng: &mut ChaCha8Rng,
) -> Vec<Seed> {
    let mut seeds = Vec::new();
    for lift in lift_set(action.n(), opts.lift_range) {
        let target = lifted(y, &lift);
        for j in 0..opts.homotopy_seeds {
            let guess = if j == 0 {
                tanh_guess(x, &target, times, None)
            } else {
                let w = low_mode_direction(action, 1, rng);
                let a = opts.homotopy_amplitude * rng.random_range(0.5..1.0);
                tanh_guess(x, &target, times, Some((a, &w)))
            };
            seeds.push(Seed::Guess { lift: lift.clone(), guess });
        }
    }
    seeds
}

fn shooting_seeds(action: &Action, x: &PhasePoint, y: &PhasePoint, times: &[f64], opts: &ConnectionOptions, rng: &mut ChaCha8Rng) -> Result<Vec<Seed>> {
    let lead = leading_unstable_directions(action, x)?;
    let w = action.metric_weights().to_vec();
    let n = action.n();
    // Forward flow amplifies any component in the infinitely many unstable directions of the
    // reference space, so seeds stay in the leading subspace and vary in sign and offset.
    let mut starts = Vec::new();
    for j in 0..opts.multistart {
        let v = if j < 2 * lead.len() {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            &lead[j / 2] * sign
        } else {
            lead.iter().fold(DVector::zeros(x.len()), |acc, l| acc + l * rng.sample::<f64, _>(StandardNormal))
        };
        let vn = metric_norm(&w, v.as_slice());
        let round = (j / (2 * lead.len())) as i32;
        let delta = opts.shoot_delta * (1.0 + opts.perturbation).powi(round);
        starts.push(v * (delta / vn));
    }
    let level = 0.5 * (action.value(x)? + action.value(y)?);
    let flow_opts = FlowOptions { eps_crit: 1e-8, ..Default::default() };
    let seeds = par::map_slice(&starts, |offset| {
        let start = DVector::from_vec(x.to_vector()) + offset;
        let mut integ = match FlowIntegrator::new(action.clone()) {
            Ok(i) => i,
            Err(_) => return Seed::Failed(ConnectionFailure::Diverged { residual: f64::NAN }),
        };
        let traj = match integ.integrate(&x.with_vector(start.as_slice()), opts.shoot_time, &flow_opts) {
            Ok(t) => t,
            Err(_) => return Seed::Failed(ConnectionFailure::Diverged { residual: f64::NAN }),
        };
        let end = traj.end().to_vector();
        let yv = y.to_vector();
        let lift: Vec<i64> = (0..n).map(|i| (end[i] - yv[i]).round() as i64).collect();
        let target = lifted(y, &lift).to_vector();
        let diff: Vec<f64> = end.iter().zip(&target).map(|(a, b)| a - b).collect();
        let dist = metric_norm(&w, &diff);
        if dist > opts.capture_tol {
            return Seed::Failed(ConnectionFailure::ShotElsewhere { distance: dist });
        }
        Seed::Guess {
            lift,
            guess: shooting_guess(&traj, level, times),
        }
    });
    Ok(seeds)
}

/// Solve every seed, deduplicate per lift and compute the coverage.
fn run_seeds(
    seeds: Vec<Seed>,
    x: &PhasePoint,
    y: &PhasePoint,
    left: &FieldRef,
    right: &FieldRef,
    hybrid: bool,
    opts: &ConnectionOptions,
) -> Result<ConnectionCount> {
    let mesh = opts.intervals();
    let outcomes: Vec<(Option<Vec<i64>>, std::result::Result<ConnectionSolution, ConnectionFailure>)> = par::map_slice(&seeds, |s| match s {
        Seed::Failed(f) => (None, Err(f.clone())),
        Seed::Guess { lift, guess } => {
            let prob = ConnectionProblem {
                x: x.clone(),
                y: lifted(y, lift),
                left: left.clone(),
                right: right.clone(),
                hybrid,
                t_bvp: opts.t_bvp,
                mesh,
                lift: lift.clone(),
            };
            (Some(lift.clone()), solve_connection(&prob, guess, opts))
        }
    });
    let w = left.action().metric_weights().to_vec();
    let mut solved: Vec<(usize, ConnectionSolution)> = Vec::new();
    let mut failures = Vec::new();
    for (i, (_, o)) in outcomes.iter().enumerate() {
        match o {
            Ok(s) => solved.push((i, s.clone())),
            Err(f) => failures.push((i, f.clone())),
        }
    }
    solved.sort_by(|a, b| {
        a.1.lift.cmp(&b.1.lift).then_with(|| {
            let ma = a.1.path[a.1.path.len() / 2].to_vector();
            let mb = b.1.path[b.1.path.len() / 2].to_vector();
            ma.iter().zip(&mb).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let max_shift = (mesh / 20).max(1);
    let mut reps: Vec<ConnectionSolution> = Vec::new();
    let mut covered = vec![false; seeds.len()];
    for (i, s) in solved {
        let mut duplicate = false;
        for r in &reps {
            let dist = path_distance(r, &s, &w, max_shift);
            if dist < opts.dedup_tol {
                duplicate = true;
                break;
            }
            if dist < opts.ambiguity_factor * opts.dedup_tol {
                return Err(Error::DedupAmbiguous {
                    distance: dist,
                    tolerance: opts.dedup_tol,
                });
            }
        }
        covered[i] = true;
        if !duplicate {
            reps.push(s);
        }
    }
    let solved_lifts: Vec<Vec<i64>> = reps.iter().map(|r| r.lift.clone()).collect();
    let aimed: Vec<usize> = outcomes
        .iter()
        .enumerate()
        .filter(|(_, (lift, _))| lift.as_ref().is_some_and(|l| solved_lifts.contains(l)))
        .map(|(i, _)| i)
        .collect();
    let coverage = if aimed.is_empty() {
        1.0
    } else {
        aimed.iter().filter(|&&i| covered[i]).count() as f64 / aimed.len() as f64
    };
    let raw = reps.len();
    Ok(ConnectionCount {
        raw_count: raw,
        sigma: (raw % 2) as u8,
        representatives: reps,
        coverage,
        reliable: coverage >= opts.coverage_min,
        seeds: seeds.len(),
        failures,
        note: String::new(),
    })
}

/// Count connections `x -> y` of the field (index gap one) by multistart.
pub fn count_connections(x: &CriticalPoint, y: &CriticalPoint, field: &FieldRef, opts: &ConnectionOptions) -> Result<ConnectionCount> {
    let gap = x.relative_index - y.relative_index;
    if gap != 1 {
        return Ok(ConnectionCount::trivial(format!("index gap {gap}: no connections are counted")));
    }
    if x.action <= y.action {
        return Ok(ConnectionCount::trivial("action does not decrease from x to y"));
    }
    let action = field.action();
    let times = ConnectionProblem::autonomous(x.z.clone(), y.z.clone(), field.clone(), opts.t_bvp, opts.intervals()).times();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut seeds = shooting_seeds(action, &x.z, &y.z, &times, opts, &mut rng)?;
    seeds.extend(homotopy_seeds(&x.z, &y.z, action, &times, opts, &mut rng));
    run_seeds(seeds, &x.z, &y.z, field, field, false, opts)
}

/// Count solutions of the hybrid problem (`left` on `t < 0`, `right` on `t > 0`) between
/// equal-index points.
pub fn count_hybrid(x: &CriticalPoint, y: &CriticalPoint, left: &FieldRef, right: &FieldRef, opts: &ConnectionOptions) -> Result<ConnectionCount> {
    if x.relative_index != y.relative_index {
        return Ok(ConnectionCount::trivial("hybrid counts are taken between equal indices"));
    }
    let times = ConnectionProblem::autonomous(x.z.clone(), y.z.clone(), left.clone(), opts.t_bvp, opts.intervals()).times();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let seeds = homotopy_seeds(&x.z, &y.z, left.action(), &times, opts, &mut rng);
    run_seeds(seeds, &x.z, &y.z, left, right, true, opts)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepEntry {
    pub label: String,
    pub t_bvp: f64,
    pub mesh_h: f64,
    pub multistart: usize,
    pub raw_count: usize,
    pub sigma: u8,
    pub coverage: f64,
}

#[derive(Clone, Debug)]
pub struct StabilityReport {
    pub base: ConnectionCount,
    pub entries: Vec<SweepEntry>,
    pub stable: bool,
}

/// JSON form of one pair's count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConnectionReport {
    pub x_id: usize,
    pub y_id: usize,
    pub raw_count: usize,
    pub sigma: u8,
    pub representatives: Vec<RepresentativeRecord>,
    pub stability_sweep: Vec<SweepEntry>,
    pub coverage: f64,
    pub reliable: bool,
    pub stable: bool,
    pub failures: Vec<ConnectionFailure>,
    pub note: String,
}

impl StabilityReport {
    pub fn report(&self, x_id: usize, y_id: usize) -> ConnectionReport {
        ConnectionReport {
            x_id,
            y_id,
            raw_count: self.base.raw_count,
            sigma: self.base.sigma,
            representatives: self.base.representatives.iter().map(|r| r.record()).collect(),
            stability_sweep: self.entries.clone(),
            coverage: self.base.coverage,
            reliable: self.base.reliable,
            stable: self.stable,
            failures: self.base.failures.iter().map(|f| f.1.clone()).collect(),
            note: self.base.note.clone(),
        }
    }
}

/// Count at the base options, with doubled `T`, halved mesh width and doubled seeds.
pub fn stability_sweep(count: impl Fn(&ConnectionOptions) -> Result<ConnectionCount>, opts: &ConnectionOptions) -> Result<StabilityReport> {
    let variants = [
        ("base", *opts),
        ("double-T", ConnectionOptions { t_bvp: 2.0 * opts.t_bvp, ..*opts }),
        ("half-h", ConnectionOptions { mesh_h: 0.5 * opts.mesh_h, ..*opts }),
        (
            "double-seeds",
            ConnectionOptions {
                multistart: 2 * opts.multistart,
                homotopy_seeds: 2 * opts.homotopy_seeds,
                seed: opts.seed.wrapping_add(1),
                ..*opts
            },
        ),
    ];
    let mut entries = Vec::new();
    let mut base = None;
    for (label, o) in variants {
        let c = count(&o)?;
        entries.push(SweepEntry {
            label: label.into(),
            t_bvp: o.t_bvp,
            mesh_h: o.mesh_h,
            multistart: o.multistart,
            raw_count: c.raw_count,
            sigma: c.sigma,
            coverage: c.coverage,
        });
        if base.is_none() {
            base = Some(c);
        }
    }
    let base = base.expect("at least one variant");
    let stable = entries.iter().all(|e| e.raw_count == base.raw_count) && entries.iter().all(|e| e.coverage >= opts.coverage_min);
    Ok(StabilityReport { base, entries, stable })
}

/// Swept counts for every index-gap-one pair; only stable, reliable counts enter the table.
pub fn morse_counts(crit: &[CriticalPoint], field: &FieldRef, opts: &ConnectionOptions, sweep: bool) -> Result<(CountTable, Vec<ConnectionReport>)> {
    let mut table = CountTable::new();
    let mut reports = Vec::new();
    for (i, x) in crit.iter().enumerate() {
        for (j, y) in crit.iter().enumerate() {
            if x.relative_index != y.relative_index + 1 {
                continue;
            }
            let report = if sweep {
                stability_sweep(|o| count_connections(x, y, field, o), opts)?
            } else {
                let base = count_connections(x, y, field, opts)?;
                StabilityReport { entries: Vec::new(), stable: base.reliable, base }
            };
            if report.stable && report.base.reliable {
                table.insert((i, j), report.base.sigma);
            }
            reports.push(report.report(i, j));
        }
    }
    Ok((table, reports))
}

/// Hybrid counts between equal-index points of two critical sets, keyed by `(id in crit0, id in crit1)`.
pub fn continuation_counts(
    crit0: &[CriticalPoint],
    crit1: &[CriticalPoint],
    f0: &FieldRef,
    f1: &FieldRef,
    opts: &ConnectionOptions,
) -> Result<(CountTable, Vec<ConnectionReport>)> {
    let mut table = CountTable::new();
    let mut reports = Vec::new();
    for (i, x) in crit0.iter().enumerate() {
        for (j, y) in crit1.iter().enumerate() {
            if x.relative_index != y.relative_index {
                continue;
            }
            let base = count_hybrid(x, y, f0, f1, opts)?;
            let report = StabilityReport { entries: Vec::new(), stable: base.reliable, base };
            if report.base.reliable {
                table.insert((i, j), report.base.sigma);
            }
            reports.push(report.report(i, j));
        }
    }
    Ok((table, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{find_critical_points, HamiltonianSpec, NewtonOptions, PotentialTerm, SeedSpec, TrigPotential};
    use crate::loopspace::SobolevExponent;
    use crate::operators::TrigField;

    fn s() -> SobolevExponent {
        SobolevExponent::for_action(0.6).unwrap()
    }

    fn setup(h: HamiltonianSpec, k: usize) -> (Action, Vec<CriticalPoint>) {
        let a = Action::new(h, k, s()).unwrap();
        let crit = find_critical_points(&a, &SeedSpec::constants(1, 16).seeds(1, k, s()), &NewtonOptions::default())
            .unwrap()
            .points;
        (a, crit)
    }

    fn fast() -> ConnectionOptions {
        ConnectionOptions { t_bvp: 8.0, mesh_h: 0.2, ..Default::default() }
    }

    #[test]
    fn pendulum_pair() {
        let (a, crit) = setup(HamiltonianSpec::pendulum(0.05), 4);
        assert_eq!(crit.len(), 2);
        let (y, x) = (&crit[0], &crit[1]);
        let field = GradientField::shared(a);
        let c = count_connections(x, y, &field, &fast()).unwrap();
        assert_eq!(c.raw_count, 2, "{:?}", c.failures);
        assert_eq!(c.sigma, 0);
        assert!(c.reliable, "{} {:?}", c.coverage, c.failures);
        let mut lifts: Vec<Vec<i64>> = c.representatives.iter().map(|r| r.lift.clone()).collect();
        lifts.sort();
        assert_eq!(lifts, vec![vec![0], vec![1]]);
        for r in &c.representatives {
            assert!(r.residual < 1e-8);
            assert!(r.actions.windows(2).all(|w| w[1] <= w[0] + 1e-13));
            // the pair is exchanged by q -> 1 - q
            let mid = r.path[r.path.len() / 2].q.mean()[0];
            assert!((mid - 0.25).abs() < 0.1 || (mid - 0.75).abs() < 0.1, "{mid}");
        }
        let m0 = c.representatives[0].path[c.representatives[0].path.len() / 2].q.mean()[0];
        let m1 = c.representatives[1].path[c.representatives[1].path.len() / 2].q.mean()[0];
        assert!((m0 + m1 - 1.0).abs() < 1e-6, "{m0} {m1}");
    }

    #[test]
    fn constant_path_is_rejected() {
        let (a, crit) = setup(HamiltonianSpec::pendulum(0.05), 4);
        let x = &crit[1];
        let field = GradientField::shared(a);
        let prob = ConnectionProblem::autonomous(x.z.clone(), x.z.clone(), field, 4.0, 40);
        let guess = vec![x.z.to_vector(); 41];
        assert!(matches!(solve_connection(&prob, &guess, &fast()), Err(ConnectionFailure::EndpointConstant)));
    }

    #[test]
    fn short_horizon_fails_defect() {
        let (a, crit) = setup(HamiltonianSpec::pendulum(0.05), 4);
        let (y, x) = (&crit[0], &crit[1]);
        let field = GradientField::shared(a);
        let prob = ConnectionProblem::autonomous(x.z.clone(), y.z.clone(), field, 1.0, 20);
        let guess = tanh_guess(&x.z, &y.z, &prob.times(), None);
        match solve_connection(&prob, &guess, &fast()) {
            Err(ConnectionFailure::BoundaryDefect { left, right }) => assert!(left.max(right) > 1e-6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_gap_is_trivial() {
        let (a, crit) = setup(HamiltonianSpec::pendulum(0.05), 4);
        let field = GradientField::shared(a);
        let c = count_connections(&crit[0], &crit[0], &field, &fast()).unwrap();
        assert_eq!(c.raw_count, 0);
        let c = count_connections(&crit[0], &crit[1], &field, &fast()).unwrap();
        assert_eq!(c.raw_count, 0);
    }

    #[test]
    fn symmetry_breaking_keeps_count() {
        let h = HamiltonianSpec::new(
            TrigField::zero(1),
            TrigPotential {
                dim: 1,
                terms: vec![
                    PotentialTerm { amplitude: 0.05, time_mode: 0, q_modes: vec![1], sine: false },
                    PotentialTerm { amplitude: 0.01, time_mode: 0, q_modes: vec![2], sine: true },
                ],
            },
        )
        .unwrap();
        let (a, crit) = setup(h, 4);
        assert_eq!(crit.len(), 2);
        let (y, x) = (&crit[0], &crit[1]);
        assert_eq!((x.relative_index, y.relative_index), (1, 0));
        let c = count_connections(x, y, &GradientField::shared(a), &fast()).unwrap();
        assert_eq!((c.raw_count, c.sigma), (2, 0));
    }

    #[test]
    fn perturbation_keeps_rest_points_and_count() {
        let (a, crit) = setup(HamiltonianSpec::pendulum(0.05), 4);
        let zero = perturb_field(&a, &crit, 7, 0.0, &PerturbOptions::default()).unwrap();
        let z = crit[1].z.with_vector(&crit[1].z.to_vector().iter().map(|v| v + 0.1).collect::<Vec<_>>());
        assert_eq!(zero.eval(&z).unwrap(), GradientField::new(a.clone()).eval(&z).unwrap());
        let p = perturb_field(&a, &crit, 7, 0.01, &PerturbOptions::default()).unwrap();
        assert!(p.chi > 0.0);
        for c in &crit {
            let found = field_zero(&p, &c.z, 1e-12, 20).unwrap();
            let d: f64 = found.to_vector().iter().zip(c.z.to_vector()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-10);
        }
        // Jacobian against finite differences away from the critical set
        let x: Vec<f64> = crit[1].z.to_vector().iter().enumerate().map(|(i, v)| v + if i == 0 { -0.07 } else { 0.01 }).collect();
        let z = crit[1].z.with_vector(&x);
        let j = p.jacobian(&z).unwrap();
        for col in [0usize, 3] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += 1e-6;
            xm[col] -= 1e-6;
            let fd = (p.eval(&z.with_vector(&xp)).unwrap() - p.eval(&z.with_vector(&xm)).unwrap()) / 2e-6;
            assert!((fd - j.column(col)).amax() < 1e-6);
        }
        let field: FieldRef = Arc::new(p);
        let c = count_connections(&crit[1], &crit[0], &field, &fast()).unwrap();
        assert_eq!((c.raw_count, c.sigma), (2, 0));
        assert!(matches!(
            perturb_field(&a, &crit, 7, 1e5, &PerturbOptions::default()),
            Err(Error::LyapunovViolation { .. })
        ));
    }

    #[test]
    fn hybrid_same_field_is_identity() {
        let (a, crit) = setup(HamiltonianSpec::pendulum(0.05), 4);
        let b = Action::new(HamiltonianSpec::pendulum(0.05).with_shift(0.3), 4, s()).unwrap();
        let (f0, f1) = (GradientField::shared(a), GradientField::shared(b));
        for c in &crit {
            let n = count_hybrid(c, c, &f0, &f1, &fast()).unwrap();
            assert_eq!(n.raw_count, 1, "{:?}", n.failures);
            let x = c.z.to_vector();
            let dev = n.representatives[0]
                .path
                .iter()
                .flat_map(|p| p.to_vector().into_iter().zip(x.clone()).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            assert!(dev < 1e-10, "{dev}");
        }
    }

    #[test]
    fn pendulum_count_is_stable() {
        let (a, crit) = setup(HamiltonianSpec::pendulum(0.05), 4);
        let field = GradientField::shared(a);
        let (counts, reports) = morse_counts(&crit, &field, &fast(), true).unwrap();
        assert_eq!(counts, CountTable::from([((1, 0), 0)]));
        assert_eq!(reports.len(), 1);
        let r = &reports[0];
        assert!(r.stable);
        assert_eq!(r.stability_sweep.len(), 4);
        assert!(r.stability_sweep.iter().all(|e| e.raw_count == 2));
        let json = serde_json::to_value(r).unwrap();
        for key in ["x_id", "y_id", "raw_count", "sigma", "representatives", "stability_sweep"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn dedup_distance() {
        let (a, crit) = setup(HamiltonianSpec::pendulum(0.05), 4);
        let (y, x) = (&crit[0], &crit[1]);
        let field = GradientField::shared(a.clone());
        let prob = ConnectionProblem::autonomous(x.z.clone(), y.z.clone(), field, 8.0, 80);
        let sol = solve_connection(&prob, &tanh_guess(&x.z, &y.z, &prob.times(), None), &fast()).unwrap();
        assert_eq!(path_distance(&sol, &sol, a.metric_weights(), 3), 0.0);
        let mut other = sol.clone();
        other.lift = vec![1];
        assert_eq!(path_distance(&sol, &other, a.metric_weights(), 3), f64::INFINITY);
    }
}
