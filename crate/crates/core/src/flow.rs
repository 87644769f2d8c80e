//! Negative mixed-gradient flow of the action, switched-field homogenization,
//! tail diagnostics for essentially vertical clouds and broken flow lines.
//!
//! The flow `z' = -grad A_H(z)` is split as `Lambda z + N(z)`, where `Lambda` comes from the
//! free action (Liouville pairing minus fiber mass) and is block diagonal in Fourier modes.
//! Steps use the second-order exponential Runge-Kutta scheme with `Lambda` advanced exactly.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::action::{lift_distance, Action, CriticalPoint, HamiltonianSpec};
use crate::error::{invalid, Error, Result};
use crate::loopspace::{coeff_index, coeff_len, index_mode, Part, PhasePoint};
use crate::operators::{assemble_l, compactness_signature, spectral_projectors, CompactnessSignature, TrigField};
use crate::par;

/// Step control for [`integrate`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowOptions {
    pub h0: f64,
    pub h_min: f64,
    /// Stop once the gradient norm drops below this.
    pub eps_crit: f64,
    /// Allowed action increase per unit step length.
    pub monotone_tol: f64,
    pub max_steps: usize,
    /// Record every `record_every`-th accepted step (the endpoint is always recorded).
    pub record_every: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            h0: 0.05,
            h_min: 1e-9,
            eps_crit: 1e-9,
            monotone_tol: 1e-10,
            max_steps: 200_000,
            record_every: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    EndTime,
    MaxSteps,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub points: Vec<PhasePoint>,
    pub actions: Vec<f64>,
    pub gradient_norms: Vec<f64>,
    /// Accepted step sizes, in order.
    pub steps: Vec<f64>,
    pub rejected_steps: usize,
    pub stop: StopReason,
}

/// One CSV row of an exported trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub action: f64,
    pub gradient_norm: f64,
    pub tail_energy: f64,
}

impl Trajectory {
    pub fn start(&self) -> &PhasePoint {
        &self.points[0]
    }

    pub fn end(&self) -> &PhasePoint {
        self.points.last().expect("trajectories are never empty")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectories are never empty")
    }

    /// Largest increase of the action between consecutive samples.
    pub fn max_action_increase(&self) -> f64 {
        self.actions.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Action non-increasing up to `tol` times the elapsed time between samples.
    pub fn is_monotone(&self, tol: f64) -> bool {
        self.actions
            .windows(2)
            .zip(self.times.windows(2))
            .all(|(a, t)| a[1] - a[0] <= tol * (t[1] - t[0]).max(0.0) + 1e-15 * a[0].abs().max(1.0))
    }

    pub fn winding_constant(&self) -> bool {
        self.points.iter().all(|z| z.winding == self.points[0].winding)
    }

    /// Append `other`, which must start where `self` ends; times are shifted.
    pub fn concat(mut self, other: &Trajectory) -> Self {
        let t0 = self.final_time();
        for i in 1..other.points.len() {
            self.times.push(t0 + other.times[i] - other.times[0]);
            self.points.push(other.points[i].clone());
            self.actions.push(other.actions[i]);
            self.gradient_norms.push(other.gradient_norms[i]);
        }
        self.steps.extend_from_slice(&other.steps);
        self.rejected_steps += other.rejected_steps;
        self.stop = other.stop;
        self
    }

    pub fn rows(&self, tail: impl Fn(&PhasePoint) -> f64) -> Vec<TrajectoryRow> {
        (0..self.points.len())
            .map(|i| TrajectoryRow {
                t: self.times[i],
                action: self.actions[i],
                gradient_norm: self.gradient_norms[i],
                tail_energy: tail(&self.points[i]),
            })
            .collect()
    }
}

/// Index sets of the mode blocks of `Lambda`: `(q, p)` constants and `(q cos, q sin, p cos, p sin)`.
fn mode_blocks(n: usize, k: usize) -> Vec<Vec<usize>> {
    let half = coeff_len(n, k);
    let mut blocks = Vec::new();
    for c in 0..n {
        let i = coeff_index(n, 0, Part::Cos, c);
        blocks.push(vec![i, half + i]);
    }
    for m in 1..=k {
        for c in 0..n {
            let a = coeff_index(n, m, Part::Cos, c);
            let b = coeff_index(n, m, Part::Sin, c);
            blocks.push(vec![a, b, half + a, half + b]);
        }
    }
    blocks
}

/// `e^X`, `phi_1(X)`, `phi_2(X)` from one exponential of an augmented matrix.
fn phi_functions(x: &DMatrix<f64>) -> [DMatrix<f64>; 3] {
    let b = x.nrows();
    let mut aug = DMatrix::zeros(3 * b, 3 * b);
    aug.view_mut((0, 0), (b, b)).copy_from(x);
    for i in 0..b {
        aug[(i, b + i)] = 1.0;
        aug[(b + i, 2 * b + i)] = 1.0;
    }
    let e = aug.exp();
    [
        e.view((0, 0), (b, b)).into_owned(),
        e.view((0, b), (b, b)).into_owned(),
        e.view((0, 2 * b), (b, b)).into_owned(),
    ]
}

struct BlockExp {
    exp: DMatrix<f64>,
    phi1: DMatrix<f64>,
    phi2: DMatrix<f64>,
}

/// Exponential integrator for the negative gradient flow of one action.
pub struct FlowIntegrator {
    pub action: Action,
    lambda: DMatrix<f64>,
    /// Free Hessian form `S_0`, so that `N(z) = -G^{-1}(dA(z) - S_0 z)`.
    s0: DMatrix<f64>,
    blocks: Vec<Vec<usize>>,
    cache: HashMap<u64, Vec<BlockExp>>,
}

impl FlowIntegrator {
    pub fn new(action: Action) -> Result<Self> {
        let n = action.n();
        let k = action.k;
        let free = Action::new(HamiltonianSpec::free(n), k, action.s)?;
        let zero = free.point(crate::loopspace::WindingVector::zero(n), &vec![0.0; free.dim()]);
        let s0 = free.hessian_form(&zero)?;
        let mut lambda = -s0.clone();
        for (i, w) in action.metric_weights().iter().enumerate() {
            lambda.row_mut(i).scale_mut(1.0 / w);
        }
        Ok(Self {
            blocks: mode_blocks(n, k),
            action,
            lambda,
            s0,
            cache: HashMap::new(),
        })
    }

    /// Linear part `Lambda = -G^{-1} S_0`.
    pub fn linear_part(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    /// The vector field `-grad A_H`.
    pub fn field(&self, z: &PhasePoint) -> Result<Vec<f64>> {
        Ok(self.action.gradient(z)?.into_iter().map(|g| -g).collect())
    }

    fn remainder(&self, z: &PhasePoint) -> Result<DVector<f64>> {
        let c = DVector::from_vec(self.action.differential(z)?);
        let x = DVector::from_vec(z.to_vector());
        let mut r = -(c - &self.s0 * x);
        for (ri, w) in r.iter_mut().zip(self.action.metric_weights()) {
            *ri /= w;
        }
        Ok(r)
    }

    fn exponentials(&mut self, h: f64) -> &Vec<BlockExp> {
        let lambda = &self.lambda;
        let blocks = &self.blocks;
        self.cache.entry(h.to_bits()).or_insert_with(|| {
            blocks
                .iter()
                .map(|idx| {
                    let x = DMatrix::from_fn(idx.len(), idx.len(), |i, j| h * lambda[(idx[i], idx[j])]);
                    let [exp, phi1, phi2] = phi_functions(&x);
                    BlockExp { exp, phi1, phi2 }
                })
                .collect()
        })
    }

    /// `sum_b M_b(h) v_b` for the block operator selected by `pick`.
    fn apply_blocks(&mut self, h: f64, v: &DVector<f64>, pick: fn(&BlockExp) -> &DMatrix<f64>) -> DVector<f64> {
        let blocks = self.blocks.clone();
        let exps = self.exponentials(h);
        let mut out = DVector::zeros(v.len());
        for (idx, e) in blocks.iter().zip(exps) {
            let m = pick(e);
            for (i, &ii) in idx.iter().enumerate() {
                out[ii] = idx.iter().enumerate().map(|(j, &jj)| m[(i, j)] * v[jj]).sum();
            }
        }
        out
    }

    /// One exponential Runge-Kutta step of length `h`.
    pub fn step(&mut self, z: &PhasePoint, h: f64) -> Result<PhasePoint> {
        let x = DVector::from_vec(z.to_vector());
        let nz = self.remainder(z)?;
        let a = self.apply_blocks(h, &x, |e| &e.exp) + self.apply_blocks(h, &nz, |e| &e.phi1) * h;
        let za = z.with_vector(a.as_slice());
        let na = self.remainder(&za)?;
        let next = a + self.apply_blocks(h, &(na - nz), |e| &e.phi2) * h;
        Ok(z.with_vector(next.as_slice()))
    }

    /// Integrate from `z0` until `t_end` or until the gradient norm drops below `eps_crit`.
    pub fn integrate(&mut self, z0: &PhasePoint, t_end: f64, opts: &FlowOptions) -> Result<Trajectory> {
        if !(opts.h0 > 0.0 && opts.h_min > 0.0 && opts.h_min <= opts.h0) {
            return Err(invalid("flow step", "need 0 < h_min <= h0"));
        }
        let mut z = z0.clone();
        let mut t = 0.0;
        let mut a = self.action.value(&z)?;
        let mut g = self.action.residual(&z)?;
        let mut traj = Trajectory {
            times: vec![0.0],
            points: vec![z.clone()],
            actions: vec![a],
            gradient_norms: vec![g],
            steps: Vec::new(),
            rejected_steps: 0,
            stop: StopReason::EndTime,
        };
        let mut h_cur = opts.h0;
        let mut streak = 0;
        let mut accepted = 0usize;
        loop {
            if g < opts.eps_crit {
                traj.stop = StopReason::Converged;
                break;
            }
            if t >= t_end - 1e-14 {
                traj.stop = StopReason::EndTime;
                break;
            }
            if accepted >= opts.max_steps {
                traj.stop = StopReason::MaxSteps;
                break;
            }
            let h = h_cur.min(t_end - t);
            let z1 = self.step(&z, h)?;
            let a1 = self.action.value(&z1)?;
            if !(a1.is_finite() && a1 <= a + opts.monotone_tol * h) {
                traj.rejected_steps += 1;
                streak = 0;
                h_cur *= 0.5;
                if h_cur < opts.h_min {
                    return Err(Error::StepCollapse {
                        t,
                        min_step: opts.h_min,
                        action: a,
                        gradient_norm: g,
                    });
                }
                continue;
            }
            t += h;
            z = z1;
            a = a1;
            g = self.action.residual(&z)?;
            accepted += 1;
            traj.steps.push(h);
            streak += 1;
            if streak >= 4 && h_cur < opts.h0 {
                h_cur = (2.0 * h_cur).min(opts.h0);
                streak = 0;
            }
            if accepted % opts.record_every.max(1) == 0 {
                traj.times.push(t);
                traj.points.push(z.clone());
                traj.actions.push(a);
                traj.gradient_norms.push(g);
            }
        }
        if *traj.times.last().expect("nonempty") != t {
            traj.times.push(t);
            traj.points.push(z);
            traj.actions.push(a);
            traj.gradient_norms.push(g);
        }
        Ok(traj)
    }
}

/// Convenience wrapper: build an integrator and run it.
pub fn integrate(action: &Action, z0: &PhasePoint, t_end: f64, opts: &FlowOptions) -> Result<Trajectory> {
    FlowIntegrator::new(action.clone())?.integrate(z0, t_end, opts)
}

/// Unit eigenvector (metric-normalized) of the Hessian at `cp` for its most negative
/// eigenvalue whose direction is dominated by the constant `q` block, i.e. the unstable
/// direction not accounted for by the reference space.
pub fn unstable_direction(action: &Action, z: &PhasePoint) -> Result<Vec<f64>> {
    let s = action.hessian_form(z)?;
    let (values, vectors) = crate::operators::form_eigen(&s, action.metric_weights());
    let n = action.n();
    let mut best: Option<(f64, usize)> = None;
    for (j, v) in values.iter().enumerate() {
        if *v >= 0.0 {
            continue;
        }
        let col = vectors.column(j);
        let w = (0..n).map(|i| col[i] * col[i]).sum::<f64>();
        if best.is_none_or(|b| w > b.0) {
            best = Some((w, j));
        }
    }
    let (_, j) = best.ok_or_else(|| Error::Singular("no negative Hessian direction".into()))?;
    Ok(vectors.column(j).iter().copied().collect())
}

// ---------------------------------------------------------------------------
// Homogenization

/// A time-independent vector field on `R^D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PlaneField {
    /// `x -> A x`, rows of `A`.
    Linear { rows: Vec<Vec<f64>> },
    /// Trigonometric field evaluated at `t = 0`.
    Trig { field: TrigField },
}

impl PlaneField {
    pub fn linear(m: &DMatrix<f64>) -> Self {
        Self::Linear {
            rows: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Linear { rows } => rows.len(),
            Self::Trig { field } => field.dim,
        }
    }

    pub fn matrix(&self) -> Option<DMatrix<f64>> {
        match self {
            Self::Linear { rows } => {
                let d = rows.len();
                Some(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
            }
            Self::Trig { .. } => None,
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Linear { rows } => DVector::from_iterator(
                rows.len(),
                rows.iter().map(|r| r.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>()),
            ),
            Self::Trig { field } => DVector::from_vec(field.value(0.0, x.as_slice())),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::Linear { rows } => {
                if rows.is_empty() || rows.iter().any(|r| r.len() != rows.len()) {
                    return Err(invalid("field", "linear field needs a square matrix"));
                }
                Ok(())
            }
            Self::Trig { field } => field.validate(),
        }
    }
}

/// `Z_n(t, x) = X(x)` on `[2k/n, (2k+1)/n)` and `Y(x)` otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchedFieldSpec {
    pub x: PlaneField,
    pub y: PlaneField,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HomogenizationRow {
    pub n: usize,
    pub sup_error: f64,
}

/// Evaluation points per switching interval.
const SUBSAMPLES: usize = 8;
/// RK4 substeps per evaluation interval for nonlinear fields.
const RK_SUBSTEPS: usize = 16;

fn rk4(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (0.5 * h)));
    let k3 = f(&(x + &k2 * (0.5 * h)));
    let k4 = f(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn advance(field: &PlaneField, x: &DVector<f64>, tau: f64) -> DVector<f64> {
    match field.matrix() {
        Some(m) => (m * tau).exp() * x,
        None => {
            let h = tau / RK_SUBSTEPS as f64;
            (0..RK_SUBSTEPS).fold(x.clone(), |y, _| rk4(|v| field.eval(v), &y, h))
        }
    }
}

fn averaged(spec: &SwitchedFieldSpec) -> PlaneField {
    match (spec.x.matrix(), spec.y.matrix()) {
        (Some(a), Some(b)) => PlaneField::linear(&((a + b) * 0.5)),
        _ => {
            let (PlaneField::Trig { field: fx }, PlaneField::Trig { field: fy }) = (&spec.x, &spec.y) else {
                unreachable!("mixed field kinds are rejected by validation")
            };
            let mut terms: Vec<_> = fx.terms.iter().chain(&fy.terms).cloned().collect();
            for t in &mut terms {
                t.amplitude *= 0.5;
            }
            PlaneField::Trig {
                field: TrigField { dim: fx.dim, terms },
            }
        }
    }
}

/// Sup distance over `[0, t_end]` and the initial points between the switched flow of `Z_n`
/// and the flow of `(X + Y) / 2`, for each `n` in `n_list`.
///
/// Steps are aligned with the switching times, so no switching error enters.
pub fn homogenize_compare(
    spec: &SwitchedFieldSpec,
    t_end: f64,
    n_list: &[usize],
    initial: &[DVector<f64>],
) -> Result<Vec<HomogenizationRow>> {
    spec.x.validate()?;
    spec.y.validate()?;
    if spec.x.dim() != spec.y.dim() || spec.x.matrix().is_some() != spec.y.matrix().is_some() {
        return Err(invalid("switched field", "X and Y must have the same kind and dimension"));
    }
    if !(t_end > 0.0) || n_list.contains(&0) {
        return Err(invalid("homogenization", "need T > 0 and n >= 1"));
    }
    let avg = averaged(spec);
    let rows = par::map_slice(n_list, |&n| {
        let width = 1.0 / n as f64;
        let intervals = (t_end * n as f64).ceil() as usize;
        let mut sup: f64 = 0.0;
        for x0 in initial {
            let mut xs = x0.clone();
            let mut xa = x0.clone();
            let mut t = 0.0;
            'outer: for i in 0..intervals {
                let field = if i % 2 == 0 { &spec.x } else { &spec.y };
                let stop = ((i + 1) as f64 * width).min(t_end);
                let tau = (stop - t) / SUBSAMPLES as f64;
                for _ in 0..SUBSAMPLES {
                    xs = advance(field, &xs, tau);
                    xa = advance(&avg, &xa, tau);
                    t += tau;
                    sup = sup.max((&xs - &xa).norm());
                }
                if stop >= t_end {
                    break 'outer;
                }
            }
        }
        HomogenizationRow { n, sup_error: sup }
    });
    Ok(rows)
}

/// `k` unit vectors evenly spaced on the unit circle of the first two coordinates.
pub fn circle_points(dim: usize, count: usize) -> Vec<DVector<f64>> {
    (0..count)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / count as f64;
            let mut v = DVector::zeros(dim);
            v[0] = a.cos();
            if dim > 1 {
                v[1] = a.sin();
            }
            v
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Tail diagnostics

/// Mixed-metric energy of `Q z` above mode `k0`, against the total energy, where
/// `Q = I - P^-` is the metric-orthogonal projector with kernel `H^-`.
pub struct TailFunctional {
    q: DMatrix<f64>,
    weights: Vec<f64>,
    modes: Vec<usize>,
}

impl TailFunctional {
    pub fn new(n: usize, k: usize, s: f64) -> Result<Self> {
        let proj = spectral_projectors(&assemble_l(n, k, s)?)?;
        let half = coeff_len(n, k);
        let modes = (0..2 * half).map(|i| index_mode(n, i % half).0).collect();
        let d = 2 * half;
        Ok(Self {
            weights: proj.minus.target.weights(),
            q: DMatrix::identity(d, d) - proj.minus.matrix,
            modes,
        })
    }

    /// `(tail energy above k0, total energy)`.
    pub fn energies(&self, z: &PhasePoint, k0: usize) -> (f64, f64) {
        let x = DVector::from_vec(z.to_vector());
        let px = &self.q * &x;
        let mut tail = 0.0;
        let mut total = 0.0;
        for i in 0..x.len() {
            total += self.weights[i] * x[i] * x[i];
            if self.modes[i] > k0 {
                tail += self.weights[i] * px[i] * px[i];
            }
        }
        (tail, total)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailRow {
    pub t: f64,
    pub k0: usize,
    pub max_tail: f64,
    pub max_relative_tail: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailReport {
    pub rows: Vec<TailRow>,
}

impl TailReport {
    pub fn max_relative(&self, k0: usize) -> f64 {
        self.rows.iter().filter(|r| r.k0 == k0).map(|r| r.max_relative_tail).fold(0.0, f64::max)
    }

    /// Tail series for one `k0`, in time order.
    pub fn series(&self, k0: usize) -> Vec<(f64, f64)> {
        self.rows.iter().filter(|r| r.k0 == k0).map(|r| (r.t, r.max_tail)).collect()
    }
}

/// Flow every point of `cloud` to `t_end` and report, at `checkpoints` equally spaced times,
/// the largest `Q` tail energy above each `k0`.
pub fn vertical_tail_diagnostic(
    action: &Action,
    cloud: &[PhasePoint],
    t_end: f64,
    checkpoints: usize,
    k0_list: &[usize],
    opts: &FlowOptions,
) -> Result<TailReport> {
    let tails = TailFunctional::new(action.n(), action.k, action.s.value())?;
    let checkpoints = checkpoints.max(1);
    let dt = t_end / checkpoints as f64;
    let per_point = par::map_slice(cloud, |z0| -> Result<Vec<PhasePoint>> {
        let mut integ = FlowIntegrator::new(action.clone())?;
        let mut z = z0.clone();
        let mut out = vec![z.clone()];
        let no_stop = FlowOptions { eps_crit: 0.0, ..*opts };
        for _ in 0..checkpoints {
            z = integ.integrate(&z, dt, &no_stop)?.end().clone();
            out.push(z.clone());
        }
        Ok(out)
    });
    let per_point: Vec<Vec<PhasePoint>> = per_point.into_iter().collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for c in 0..=checkpoints {
        for &k0 in k0_list {
            let mut max_tail: f64 = 0.0;
            let mut max_rel: f64 = 0.0;
            for pts in &per_point {
                let (tail, total) = tails.energies(&pts[c], k0);
                max_tail = max_tail.max(tail);
                if total > 0.0 {
                    max_rel = max_rel.max(tail / total);
                }
            }
            rows.push(TailRow {
                t: c as f64 * dt,
                k0,
                max_tail,
                max_relative_tail: max_rel,
            });
        }
    }
    Ok(TailReport { rows })
}

// ---------------------------------------------------------------------------
// Linearized flow

/// `(z(t), D phi_t(z) V)` by RK4 on the flow and its variational equation.
pub fn linearized_flow(action: &Action, z: &PhasePoint, v: &DMatrix<f64>, t: f64, steps: usize) -> Result<(PhasePoint, DMatrix<f64>)> {
    let steps = steps.max(1);
    let h = t / steps as f64;
    let w = action.metric_weights().to_vec();
    let rhs = |z: &PhasePoint, m: &DMatrix<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let f = DVector::from_vec(action.gradient(z)?) * -1.0;
        let mut s = action.hessian_form(z)?;
        for (i, wi) in w.iter().enumerate() {
            s.row_mut(i).scale_mut(-1.0 / wi);
        }
        Ok((f, s * m))
    };
    let mut zc = z.clone();
    let mut m = v.clone();
    for _ in 0..steps {
        let x = DVector::from_vec(zc.to_vector());
        let (f1, m1) = rhs(&zc, &m)?;
        let z2 = zc.with_vector((&x + &f1 * (0.5 * h)).as_slice());
        let (f2, m2) = rhs(&z2, &(&m + &m1 * (0.5 * h)))?;
        let z3 = zc.with_vector((&x + &f2 * (0.5 * h)).as_slice());
        let (f3, m3) = rhs(&z3, &(&m + &m2 * (0.5 * h)))?;
        let z4 = zc.with_vector((&x + &f3 * h).as_slice());
        let (f4, m4) = rhs(&z4, &(&m + &m3 * h))?;
        let xn = x + (f1 + f2 * 2.0 + f3 * 2.0 + f4) * (h / 6.0);
        m += (m1 + m2 * 2.0 + m3 * 2.0 + m4) * (h / 6.0);
        zc = zc.with_vector(xn.as_slice());
    }
    Ok((zc, m))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvarianceReport {
    #[serde(rename = "K")]
    pub k: usize,
    pub t: f64,
    /// Mixed-metric singular values of `(I - P) D phi_t P`, descending.
    pub singular_values: Vec<f64>,
}

/// Singular values of `(I - P) D phi_t(z) P` with `P` the projector onto truncated `H^-`.
pub fn invariance_indicator(action: &Action, z: &PhasePoint, t: f64, steps: usize) -> Result<InvarianceReport> {
    let proj = spectral_projectors(&assemble_l(action.n(), action.k, action.s.value())?)?;
    let basis = proj.minus_basis.vectors.clone();
    let (_, dphi) = linearized_flow(action, z, &basis, t, steps)?;
    let d = dphi.nrows();
    let comp = DMatrix::<f64>::identity(d, d) - &proj.minus.matrix;
    let m = comp * dphi;
    // basis columns are metric-orthonormal; measure the image in the metric
    let w = action.metric_weights();
    let mut wm = m;
    for (i, wi) in w.iter().enumerate() {
        wm.row_mut(i).scale_mut(wi.sqrt());
    }
    let mut sv: Vec<f64> = wm.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(InvarianceReport {
        k: action.k,
        t,
        singular_values: sv,
    })
}

/// Compactness signature of the invariance indicator across truncations.
pub fn invariance_signature(reports: &[InvarianceReport], tail_index: usize, head_tol: f64, tail_tol: f64) -> CompactnessSignature {
    let spectra: Vec<(usize, Vec<f64>)> = reports.iter().map(|r| (r.k, r.singular_values.clone())).collect();
    compactness_signature(&spectra, tail_index, head_tol, tail_tol)
}

// ---------------------------------------------------------------------------
// Broken flow lines

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BrokenLine {
    /// Indices into the critical-point list, in the order visited.
    pub chain: Vec<usize>,
    pub actions: Vec<f64>,
    pub indices: Vec<i64>,
    /// Chain of every trajectory of the family, in input order.
    pub per_trajectory: Vec<Vec<usize>>,
    pub strictly_decreasing: bool,
}

/// Critical points approached within `tol`, ordered by time of closest approach.
pub fn rest_point_chain(traj: &Trajectory, crit: &[CriticalPoint], tol: f64) -> Vec<usize> {
    let mut hits: Vec<(usize, usize)> = Vec::new();
    for (ci, cp) in crit.iter().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for (j, z) in traj.points.iter().enumerate() {
            let zz = if z.degree() == cp.z.degree() { z.clone() } else { z.with_degree(cp.z.degree()) };
            let d = lift_distance(&zz, &cp.z);
            if d < best.0 {
                best = (d, j);
            }
        }
        if best.0 < tol {
            hits.push((best.1, ci));
        }
    }
    hits.sort();
    hits.into_iter().map(|h| h.1).collect()
}

/// Rest-point chain of a family of connecting trajectories with increasing transition times.
///
/// The reported chain is the longest one seen, ties broken by the later trajectory.
pub fn detect_breaking(family: &[Trajectory], crit: &[CriticalPoint], tol: f64) -> BrokenLine {
    let per: Vec<Vec<usize>> = family.iter().map(|t| rest_point_chain(t, crit, tol)).collect();
    let chain = per
        .iter()
        .enumerate()
        .max_by_key(|(i, c)| (c.len(), *i))
        .map(|(_, c)| c.clone())
        .unwrap_or_default();
    let actions: Vec<f64> = chain.iter().map(|&i| crit[i].action).collect();
    let indices: Vec<i64> = chain.iter().map(|&i| crit[i].relative_index).collect();
    let strictly_decreasing = actions.windows(2).all(|w| w[1] < w[0]) && indices.windows(2).all(|w| w[1] < w[0]);
    BrokenLine {
        chain,
        actions,
        indices,
        per_trajectory: per,
        strictly_decreasing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{find_critical_points, NewtonOptions, PotentialTerm, SeedSpec, TrigPotential};
    use crate::loopspace::{SobolevExponent, WindingVector};

    fn s() -> SobolevExponent {
        SobolevExponent::for_action(0.6).unwrap()
    }

    /// Closed form `exp(t M)` of a real 2x2 matrix.
    fn exp2(m: [[f64; 2]; 2], t: f64) -> [[f64; 2]; 2] {
        let tr = m[0][0] + m[1][1];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let disc = tr * tr / 4.0 - det;
        let (c, sh) = if disc >= 0.0 {
            let d = disc.sqrt();
            ((t * d).cosh(), if d > 0.0 { (t * d).sinh() / d } else { t })
        } else {
            let d = (-disc).sqrt();
            ((t * d).cos(), (t * d).sin() / d)
        };
        let e = (t * tr / 2.0).exp();
        [
            [e * (c + sh * (m[0][0] - tr / 2.0)), e * sh * m[0][1]],
            [e * sh * m[1][0], e * (c + sh * (m[1][1] - tr / 2.0))],
        ]
    }

    /// Free flow by mode-wise closed forms: pairs `(a_q, b_p)` and `(b_q, a_p)`, and constants.
    fn free_flow_oracle(n: usize, k: usize, sv: f64, x: &[f64], winding: &[f64], t: f64) -> Vec<f64> {
        let half = coeff_len(n, k);
        let mut y = x.to_vec();
        for c in 0..n {
            let i = coeff_index(n, 0, Part::Cos, c);
            y[half + i] = winding[c] + (x[half + i] - winding[c]) * t.exp();
        }
        for m in 1..=k {
            let w = std::f64::consts::TAU * m as f64;
            let (u, v, r) = (w.powf(1.0 - 2.0 * sv), w.powf(2.0 * sv - 1.0), w.powf(2.0 * sv - 2.0));
            let e1 = exp2([[0.0, u], [v, r]], t);
            let e2 = exp2([[0.0, -u], [-v, r]], t);
            for c in 0..n {
                let a = coeff_index(n, m, Part::Cos, c);
                let b = coeff_index(n, m, Part::Sin, c);
                let (aq, bq, ap, bp) = (x[a], x[b], x[half + a], x[half + b]);
                y[a] = e1[0][0] * aq + e1[0][1] * bp;
                y[half + b] = e1[1][0] * aq + e1[1][1] * bp;
                y[b] = e2[0][0] * bq + e2[0][1] * ap;
                y[half + a] = e2[1][0] * bq + e2[1][1] * ap;
            }
        }
        y
    }

    fn random_vec(len: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| r.random_range(-0.2..0.2)).collect()
    }

    #[test]
    fn phi_functions_scalar() {
        let x = DMatrix::from_element(1, 1, -0.7);
        let [e, p1, p2] = phi_functions(&x);
        let v: f64 = -0.7;
        assert!((e[(0, 0)] - v.exp()).abs() < 1e-14);
        assert!((p1[(0, 0)] - (v.exp() - 1.0) / v).abs() < 1e-14);
        assert!((p2[(0, 0)] - (v.exp() - 1.0 - v) / (v * v)).abs() < 1e-14);
    }

    #[test]
    fn free_flow_matches_closed_form() {
        let (n, k) = (2, 6);
        let action = Action::new(HamiltonianSpec::free(n), k, s()).unwrap();
        let x0 = random_vec(action.dim(), 3);
        let z0 = action.point(WindingVector(vec![1, 0]), &x0);
        let opts = FlowOptions { eps_crit: 0.0, monotone_tol: f64::INFINITY, ..Default::default() };
        let traj = integrate(&action, &z0, 1.3, &opts).unwrap();
        let oracle = free_flow_oracle(n, k, 0.6, &x0, &[1.0, 0.0], traj.final_time());
        let got = traj.end().to_vector();
        let err = got.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn critical_point_is_fixed() {
        let action = Action::new(HamiltonianSpec::pendulum(0.05), 8, s()).unwrap();
        let z = PhasePoint::constant(&[0.5], &[0.0], 8, s());
        let opts = FlowOptions { eps_crit: 0.0, ..Default::default() };
        let traj = integrate(&action, &z, 2.0, &opts).unwrap();
        let d = traj
            .points
            .iter()
            .map(|p| p.to_vector().iter().zip(z.to_vector()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        assert!(d < 1e-12, "{d}");
    }

    fn pendulum_setup(k: usize) -> (Action, Vec<CriticalPoint>) {
        let action = Action::new(HamiltonianSpec::pendulum(0.05), k, s()).unwrap();
        let rep = find_critical_points(&action, &SeedSpec::constants(1, 8).seeds(1, k, s()), &NewtonOptions::default()).unwrap();
        (action, rep.points)
    }

    #[test]
    fn pendulum_unstable_flow_reaches_index_zero() {
        let (action, crit) = pendulum_setup(8);
        let top = crit.iter().find(|c| c.relative_index == 1).unwrap();
        let dir = unstable_direction(&action, &top.z).unwrap();
        let x: Vec<f64> = top.z.to_vector().iter().zip(&dir).map(|(a, d)| a + 1e-4 * d).collect();
        let traj = integrate(&action, &top.z.with_vector(&x), 60.0, &FlowOptions::default()).unwrap();
        assert_eq!(traj.stop, StopReason::Converged);
        assert!(traj.is_monotone(1e-10) && traj.winding_constant());
        assert!(traj
            .actions
            .windows(2)
            .zip(&traj.gradient_norms)
            .all(|(w, g)| *g < 1e-6 || w[1] < w[0]));
        let line = detect_breaking(std::slice::from_ref(&traj), &crit, 1e-3);
        assert_eq!(line.chain.len(), 2);
        assert_eq!(line.indices, vec![1, 0]);
        assert!(line.strictly_decreasing);
        let constant = integrate(&action, &top.z, 1.0, &FlowOptions { eps_crit: 0.0, ..Default::default() }).unwrap();
        assert_eq!(detect_breaking(&[constant], &crit, 1e-3).chain.len(), 1);
    }

    #[test]
    fn three_point_chain() {
        let (e1, e2) = (0.04, 0.07);
        let h = HamiltonianSpec::new(
            TrigField::zero(2),
            TrigPotential {
                dim: 2,
                terms: vec![
                    PotentialTerm { amplitude: e1, time_mode: 0, q_modes: vec![1, 0], sine: false },
                    PotentialTerm { amplitude: e2, time_mode: 0, q_modes: vec![0, 1], sine: false },
                ],
            },
        )
        .unwrap();
        let k = 4;
        let action = Action::new(h, k, s()).unwrap();
        let crit = find_critical_points(&action, &SeedSpec::constants(2, 4).seeds(2, k, s()), &NewtonOptions::default())
            .unwrap()
            .points;
        assert_eq!(crit.len(), 4);
        let opts = FlowOptions::default();
        let top = PhasePoint::constant(&[0.5 - 1e-4, 0.5], &[0.0, 0.0], k, s());
        let first = integrate(&action, &top, 60.0, &opts).unwrap();
        let mid = first.end().clone();
        assert!((mid.q.mean()[0].rem_euclid(1.0) - 0.0).abs() < 1e-6 || (mid.q.mean()[0] - 1.0).abs() < 1e-6);
        let mut x = mid.to_vector();
        x[1] -= 1e-4;
        let second = integrate(&action, &mid.with_vector(&x), 60.0, &opts).unwrap();
        let joined = first.concat(&second);
        assert!(joined.is_monotone(1e-10) && joined.winding_constant());
        let line = detect_breaking(&[joined], &crit, 1e-3);
        assert_eq!(line.chain.len(), 3);
        assert!(line.strictly_decreasing);
        assert_eq!(line.indices, vec![2, 1, 0]);
    }

    fn rot_pair() -> SwitchedFieldSpec {
        SwitchedFieldSpec {
            x: PlaneField::linear(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])),
            y: PlaneField::linear(&DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0])),
        }
    }

    #[test]
    fn homogenization_identical_fields() {
        let a = PlaneField::linear(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]));
        let spec = SwitchedFieldSpec { x: a.clone(), y: a };
        let rows = homogenize_compare(&spec, 1.0, &[4, 16], &circle_points(2, 8)).unwrap();
        assert!(rows.iter().all(|r| r.sup_error < 1e-12));
    }

    #[test]
    fn homogenization_rotation_damping() {
        let rows = homogenize_compare(&rot_pair(), 1.0, &[4, 8, 16, 32, 64], &circle_points(2, 16)).unwrap();
        assert!(rows[4].sup_error < 0.2 * rows[0].sup_error);
        for w in rows.windows(2) {
            assert!(w[1].sup_error < 1.05 * w[0].sup_error);
        }
    }

    #[test]
    fn homogenization_commuting_rate() {
        let spec = SwitchedFieldSpec {
            x: PlaneField::linear(&DMatrix::identity(2, 2)),
            y: PlaneField::linear(&(DMatrix::identity(2, 2) * 2.0)),
        };
        let ns = [4, 8, 16, 32, 64, 128];
        let rows = homogenize_compare(&spec, 1.0, &ns, &circle_points(2, 4)).unwrap();
        // int a - 1.5 t is a sawtooth with minimum -1/(2n) at the ends of X-intervals
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.sup_error)).collect();
        let (slope, _) = crate::operators::loglog_fit(&pts);
        assert!((slope + 1.0).abs() < 0.2, "{slope}");
        let n = 4.0;
        let expected = (1.5f64 * (1.0 - 1.0 / n)).exp() * (1.0 - (-0.5 / n as f64).exp());
        assert!((rows[0].sup_error / expected - 1.0).abs() < 1e-9, "{} vs {expected}", rows[0].sup_error);
    }

    #[test]
    fn homogenization_trig_fields() {
        use crate::operators::TrigTerm;
        let f = |amp: f64, comp: usize| TrigField {
            dim: 2,
            terms: vec![TrigTerm { component: comp, amplitude: amp, time_mode: 0, q_modes: vec![1, 1], sine: true }],
        };
        let spec = SwitchedFieldSpec { x: PlaneField::Trig { field: f(0.5, 0) }, y: PlaneField::Trig { field: f(0.5, 1) } };
        let rows = homogenize_compare(&spec, 1.0, &[4, 64], &circle_points(2, 4)).unwrap();
        assert!(rows[1].sup_error < 0.2 * rows[0].sup_error);
    }

    #[test]
    fn free_tail_matches_closed_form() {
        let (n, k, k0) = (1, 8, 3);
        let action = Action::new(HamiltonianSpec::free(n), k, s()).unwrap();
        let tails = TailFunctional::new(n, k, 0.6).unwrap();
        let x0 = random_vec(action.dim(), 10);
        let z0 = action.point(WindingVector::zero(n), &x0);
        let rep = vertical_tail_diagnostic(&action, &[z0], 3.0, 6, &[k0], &FlowOptions::default()).unwrap();
        let series = rep.series(k0);
        for (t, tail) in &series {
            let zt = action.point(WindingVector::zero(n), &free_flow_oracle(n, k, 0.6, &x0, &[0.0], *t));
            let expected = tails.energies(&zt, k0).0;
            assert!((tail - expected).abs() < 1e-8 * expected.max(1.0), "{t}: {tail} vs {expected}");
        }
        // decay while the stable part dominates
        assert!(series[..4].windows(2).all(|w| w[1].1 < w[0].1), "{series:?}");
        // critical points: tails constant
        let z = PhasePoint::constant(&[0.3], &[0.0], k, s());
        let rep = vertical_tail_diagnostic(&action, &[z.clone()], 1.0, 2, &[0], &FlowOptions::default()).unwrap();
        assert!(rep.rows.iter().all(|r| r.max_tail == tails.energies(&z, 0).0));
    }

    #[test]
    fn pendulum_tail_stays_small() {
        let (k, k0) = (16, 8);
        let action = Action::new(HamiltonianSpec::pendulum(0.05), k, s()).unwrap();
        let cloud: Vec<PhasePoint> = (0..4)
            .map(|i| {
                let mut x = random_vec(action.dim(), 40 + i);
                let half = coeff_len(1, k);
                for j in 0..2 * half {
                    if index_mode(1, j % half).0 > k0 {
                        x[j] = 0.0;
                    }
                }
                x[0] += 0.5;
                action.point(WindingVector::zero(1), &x)
            })
            .collect();
        let rep = vertical_tail_diagnostic(&action, &cloud, 10.0, 10, &[k0], &FlowOptions::default()).unwrap();
        assert!(rep.rows[0].max_tail < 1e-20);
        assert!(rep.max_relative(k0) < 1e-3, "{}", rep.max_relative(k0));
    }

    #[test]
    fn invariance_indicator_at_zero_time() {
        let action = Action::new(HamiltonianSpec::pendulum(0.05), 6, s()).unwrap();
        let z = PhasePoint::constant(&[0.5], &[0.0], 6, s());
        let rep = invariance_indicator(&action, &z, 0.0, 1).unwrap();
        assert!(rep.singular_values[0] < 1e-12);
    }

    #[test]
    fn invariance_indicator_free_oracle() {
        let (n, k, t) = (1, 5, 0.8);
        let action = Action::new(HamiltonianSpec::free(n), k, s()).unwrap();
        let z = PhasePoint::constant(&[0.2], &[0.0], k, s());
        let proj = spectral_projectors(&assemble_l(n, k, 0.6).unwrap()).unwrap();
        let basis = proj.minus_basis.vectors.clone();
        let (_, dphi) = linearized_flow(&action, &z, &basis, t, 200).unwrap();
        for j in 0..basis.ncols() {
            let col: Vec<f64> = basis.column(j).iter().copied().collect();
            let oracle = free_flow_oracle(n, k, 0.6, &col, &[0.0], t);
            let err = dphi.column(j).iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "{err}");
        }
    }

    #[test]
    fn pendulum_invariance_signature() {
        let s = s();
        let reports: Vec<InvarianceReport> = [16, 32]
            .iter()
            .map(|&k| {
                let a = Action::new(HamiltonianSpec::pendulum(0.05), k, s).unwrap();
                invariance_indicator(&a, &PhasePoint::constant(&[0.0], &[0.0], k, s), 1.0, 50).unwrap()
            })
            .collect();
        let sig = invariance_signature(&reports, 10, 0.15, 0.25);
        assert!(sig.head_variation < 0.15, "{sig:?}");
        // mode-wise coupling decays like k^{-2(1-s)}: sigma_10 / sigma_1 is about 0.21
        assert!(sig.tail_ratio < 0.25 && sig.passed, "{sig:?}");
        let sv = &reports[1].singular_values;
        assert!(sv[19] < 0.6 * sv[9]);
    }

    #[test]
    fn step_collapse_reported() {
        let action = Action::new(HamiltonianSpec::pendulum(0.05), 4, s()).unwrap();
        let z = PhasePoint::constant(&[0.3], &[0.0], 4, s());
        let opts = FlowOptions { monotone_tol: -1.0, h_min: 1e-3, ..Default::default() };
        assert!(matches!(integrate(&action, &z, 1.0, &opts), Err(Error::StepCollapse { .. })));
    }
}
