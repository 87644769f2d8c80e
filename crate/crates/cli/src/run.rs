use std::collections::BTreeMap;
use std::sync::Arc;

use anyhow::Result;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use loopmorse::action::{action_lower_bound, find_critical_points, relative_index_sweep, Action, FinderReport, HamiltonianSpec};
use loopmorse::complex::{build_complex, continuation_map, monotone_check, ChainComplex, CountTable};
use loopmorse::connections::{continuation_counts, morse_counts, perturb_field, ConnectionReport, FieldRef, GradientField};
use loopmorse::estimates::{fit_f, fit_lemma_g, geometric_grid, verify_norm_inequality, MatrixChoice};
use loopmorse::flow::{circle_points, detect_breaking, homogenize_compare, integrate, invariance_indicator, vertical_tail_diagnostic, TailFunctional};
use loopmorse::loopspace::{mixed_metric_weights, PhasePoint, WindingVector};
use loopmorse::operators::{
    assemble_l, commutator_operator, compactness_signature, delta_matrix, derivative_matrix, relative_dimension_parts, rotation_loop, spectral_projectors,
    weighted_eigen, CommutatorVariant, SubspaceBasis,
};
use loopmorse::Error;

use crate::config::ExperimentConfig;
use crate::report::{Section, Table};

pub const COMMANDS: [&str; 8] = ["estimates", "operators", "critical-points", "flow", "connections", "complex", "continuation", "homogenize"];

const HYPERBOLICITY: &str = "hyperbolicity assumption violated";

fn num(x: f64) -> String {
    x.to_string()
}

fn joined<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// Critical points of one Hamiltonian at the configured truncation.
struct CritStage {
    action: Action,
    report: FinderReport,
}

impl CritStage {
    fn degenerate(&self) -> Vec<usize> {
        self.report.points.iter().enumerate().filter(|(_, c)| c.degenerate).map(|(i, _)| i).collect()
    }
}

/// Connection counts and the Morse complex built from them.
struct MorseStage {
    field: Option<FieldRef>,
    counts: CountTable,
    reports: Vec<ConnectionReport>,
    complex: Option<ChainComplex>,
    /// Failures of the counting step.
    count_failures: Vec<String>,
    /// Failures of the complex construction.
    complex_failures: Vec<String>,
}

/// Runs subcommands, sharing critical points and counts between them.
pub struct Runner {
    pub cfg: ExperimentConfig,
    base: Option<CritStage>,
    target: Option<CritStage>,
    morse: Option<MorseStage>,
}

impl Runner {
    pub fn new(cfg: ExperimentConfig) -> Self {
        Self {
            cfg,
            base: None,
            target: None,
            morse: None,
        }
    }

    pub fn run(&mut self, command: &str) -> Result<Section> {
        match command {
            "estimates" => self.estimates(),
            "operators" => self.operators(),
            "critical-points" => self.critical_points(),
            "flow" => self.flow(),
            "connections" => self.connections(),
            "complex" => self.complex(),
            "continuation" => self.continuation(),
            "homogenize" => self.homogenize(),
            other => anyhow::bail!("unknown subcommand `{other}`"),
        }
    }

    fn solve(&self, h: &HamiltonianSpec) -> Result<CritStage> {
        let s = self.cfg.sobolev();
        let action = Action::new(h.clone(), self.cfg.k, s)?;
        let seeds = self.cfg.seeds.seeds(h.n, self.cfg.k, s);
        let report = find_critical_points(&action, &seeds, &self.cfg.newton())?;
        Ok(CritStage { action, report })
    }

    fn base(&mut self) -> Result<&CritStage> {
        if self.base.is_none() {
            self.base = Some(self.solve(&self.cfg.hamiltonian)?);
        }
        Ok(self.base.as_ref().expect("just set"))
    }

    fn morse_of(&self, stage: &CritStage) -> Result<MorseStage> {
        let mut m = MorseStage {
            field: None,
            counts: CountTable::new(),
            reports: Vec::new(),
            complex: None,
            count_failures: Vec::new(),
            complex_failures: Vec::new(),
        };
        let crit = &stage.report.points;
        let degenerate = stage.degenerate();
        if crit.is_empty() || !degenerate.is_empty() {
            let why = if crit.is_empty() {
                "no critical points found".to_string()
            } else {
                format!("{HYPERBOLICITY}: degenerate critical points {degenerate:?}")
            };
            m.count_failures.push(why.clone());
            m.complex_failures.push(why);
            return Ok(m);
        }
        let amplitude = self.cfg.perturbation.amplitude;
        let field: FieldRef = if amplitude > 0.0 {
            match perturb_field(&stage.action, crit, self.cfg.seed, amplitude, &self.cfg.perturb_options()) {
                Ok(p) => Arc::new(p),
                Err(e) => {
                    m.count_failures.push(e.to_string());
                    m.complex_failures.push(format!("no admissible field: {e}"));
                    return Ok(m);
                }
            }
        } else {
            GradientField::shared(stage.action.clone())
        };
        m.field = Some(field.clone());
        match morse_counts(crit, &field, &self.cfg.connections, self.cfg.stability_sweep) {
            Ok((counts, reports)) => {
                for r in &reports {
                    if !r.reliable || !r.stable {
                        m.count_failures.push(format!(
                            "connection {} -> {}: reliable {}, stable {} (coverage {:.2}, sweep {:?})",
                            r.x_id,
                            r.y_id,
                            r.reliable,
                            r.stable,
                            r.coverage,
                            r.stability_sweep.iter().map(|e| e.raw_count).collect::<Vec<_>>()
                        ));
                    }
                }
                m.counts = counts;
                m.reports = reports;
            }
            Err(e) => {
                m.count_failures.push(e.to_string());
                m.complex_failures.push(format!("counting failed: {e}"));
                return Ok(m);
            }
        }
        match build_complex(crit, &m.counts) {
            Ok(cx) => m.complex = Some(cx),
            Err(e @ (Error::BoundarySquare { .. } | Error::MissingCount(..) | Error::Hypothesis(_))) => m.complex_failures.push(e.to_string()),
            Err(e) => return Err(e.into()),
        }
        Ok(m)
    }

    fn morse(&mut self) -> Result<&MorseStage> {
        if self.morse.is_none() {
            self.base()?;
            let m = self.morse_of(self.base.as_ref().expect("computed"))?;
            self.morse = Some(m);
        }
        Ok(self.morse.as_ref().expect("just set"))
    }

    fn critical_points(&mut self) -> Result<Section> {
        let mut sec = Section::new("critical-points");
        let cfg = self.cfg.clone();
        let stage = self.base()?;
        let crit = &stage.report.points;
        let n = cfg.hamiltonian.n;
        let mut points = Table::new("points", &["id", "winding", "q_mean", "action", "residual", "hyperbolicity_gap", "relative_index", "degenerate"]);
        let mut sweep_table = Table::new("index_sweep", &["id", "K", "relative_index"]);
        let mut sweeps = Vec::new();
        if crit.is_empty() {
            sec.failures.push("no critical points found".into());
        }
        for (id, c) in crit.iter().enumerate() {
            points.push(vec![
                id.to_string(),
                joined(&c.z.winding.0),
                joined(&c.z.q.coeffs()[..n]),
                num(c.action),
                num(c.residual),
                num(c.hyperbolicity_gap),
                c.relative_index.to_string(),
                c.degenerate.to_string(),
            ]);
            if c.degenerate {
                sec.failures.push(format!("{HYPERBOLICITY}: critical point {id} is degenerate (hyperbolicity gap {:.2e})", c.hyperbolicity_gap));
                sweeps.push(json!({"id": id, "skipped": "degenerate"}));
                continue;
            }
            match relative_index_sweep(&cfg.hamiltonian, c, &cfg.k_sweep, &cfg.newton()) {
                Ok(sw) => {
                    for (k, index) in &sw.levels {
                        sweep_table.push(vec![id.to_string(), k.to_string(), index.to_string()]);
                    }
                    if sw.index != c.relative_index {
                        sec.failures.push(format!("critical point {id}: index {} at K = {} but {} across the sweep", c.relative_index, cfg.k, sw.index));
                    }
                    sweeps.push(json!({"id": id, "sweep": sw}));
                }
                Err(e) => {
                    sec.failures.push(format!("critical point {id}: {e}"));
                    sweeps.push(json!({"id": id, "error": e.to_string()}));
                }
            }
        }
        let bound = action_lower_bound(&cfg.hamiltonian);
        let min_action = crit.iter().map(|c| c.action).fold(f64::INFINITY, f64::min);
        if !crit.is_empty() && min_action < bound.bound {
            sec.failures.push(format!("minimal action {min_action} below the lower bound {}", bound.bound));
        }
        sec.result = json!({
            "K": cfg.k,
            "seeds": stage.report.seeds,
            "seed_failures": stage.report.failures.iter().map(|(i, f)| json!({"seed": i, "failure": f})).collect::<Vec<_>>(),
            "points": crit.iter().enumerate().map(|(i, c)| c.to_record(i)).collect::<Vec<_>>(),
            "index_sweeps": sweeps,
            "action_lower_bound": bound,
            "min_action": if crit.is_empty() { Value::Null } else { json!(min_action) },
            "all_hyperbolic": stage.report.all_hyperbolic(),
        });
        sec.tables = vec![points, sweep_table];
        Ok(sec)
    }

    fn connections(&mut self) -> Result<Section> {
        let mut sec = Section::new("connections");
        let perturbed = self.cfg.perturbation.amplitude > 0.0;
        let m = self.morse()?;
        let mut pairs = Table::new("pairs", &["x_id", "y_id", "raw_count", "sigma", "coverage", "reliable", "stable", "representatives"]);
        let mut sweep = Table::new("sweep", &["x_id", "y_id", "label", "t_bvp", "mesh_h", "multistart", "raw_count", "sigma", "coverage"]);
        let mut reps = Table::new("representatives", &["x_id", "y_id", "lift", "action_start", "action_end", "residual", "left_defect", "right_defect", "pivot_ratio"]);
        for r in &m.reports {
            pairs.push(vec![
                r.x_id.to_string(),
                r.y_id.to_string(),
                r.raw_count.to_string(),
                r.sigma.to_string(),
                num(r.coverage),
                r.reliable.to_string(),
                r.stable.to_string(),
                r.representatives.len().to_string(),
            ]);
            for e in &r.stability_sweep {
                sweep.push(vec![
                    r.x_id.to_string(),
                    r.y_id.to_string(),
                    e.label.clone(),
                    num(e.t_bvp),
                    num(e.mesh_h),
                    e.multistart.to_string(),
                    e.raw_count.to_string(),
                    e.sigma.to_string(),
                    num(e.coverage),
                ]);
            }
            for p in &r.representatives {
                reps.push(vec![
                    r.x_id.to_string(),
                    r.y_id.to_string(),
                    joined(&p.lift),
                    num(p.action_start),
                    num(p.action_end),
                    num(p.residual),
                    num(p.left_defect),
                    num(p.right_defect),
                    num(p.pivot_ratio),
                ]);
            }
        }
        sec.failures = m.count_failures.clone();
        sec.result = json!({
            "field": if m.field.is_none() { Value::Null } else if perturbed { json!("perturbed") } else { json!("gradient") },
            "pairs": m.reports,
            "counts": m.counts.iter().map(|((x, y), c)| json!({"x_id": x, "y_id": y, "sigma": c})).collect::<Vec<_>>(),
        });
        sec.tables = vec![pairs, sweep, reps];
        Ok(sec)
    }

    fn complex(&mut self) -> Result<Section> {
        let mut sec = Section::new("complex");
        let m = self.morse()?;
        sec.failures = m.complex_failures.clone();
        let mut homology = Table::new("homology", &["degree", "generators", "homology_rank"]);
        match &m.complex {
            Some(cx) => {
                let ranks = cx.homology_ranks();
                for (k, gens) in &cx.generators {
                    homology.push(vec![k.to_string(), gens.len().to_string(), ranks.get(k).copied().unwrap_or(0).to_string()]);
                }
                let mut cx = cx.clone();
                cx.provenance = json!({"counts": m.counts.iter().map(|((x, y), c)| json!([x, y, c])).collect::<Vec<_>>()});
                sec.result = json!({"complex": cx, "homology_ranks": ranks, "boundary_squares_to_zero": true});
            }
            None => sec.result = json!({"complex": Value::Null}),
        }
        sec.tables = vec![homology];
        Ok(sec)
    }

    fn continuation(&mut self) -> Result<Section> {
        let mut sec = Section::new("continuation");
        let cfg = self.cfg.clone();
        let mono = monotone_check(&cfg.hamiltonian, &cfg.continuation.target, cfg.continuation.grid, cfg.continuation.p_box)?;
        self.morse()?;
        if self.target.is_none() {
            self.target = Some(self.solve(&cfg.continuation.target)?);
        }
        let base = self.base.as_ref().expect("computed");
        let target = self.target.as_ref().expect("computed");
        let m0 = self.morse.as_ref().expect("computed");
        let m1 = self.morse_of(target)?;
        let mut result = json!({"monotone": mono});
        match (&m0.complex, &m1.complex, &m0.field, &m1.field) {
            (Some(cx0), Some(cx1), Some(f0), Some(f1)) => {
                let (counts, reports) = continuation_counts(&base.report.points, &target.report.points, f0, f1, &cfg.connections)?;
                for r in &reports {
                    if !r.reliable || !r.stable {
                        sec.failures.push(format!("continuation count {} -> {}: reliable {}, stable {}", r.x_id, r.y_id, r.reliable, r.stable));
                    }
                }
                result["pairs"] = json!(reports);
                result["homology_ranks"] = json!({"start": cx0.homology_ranks(), "end": cx1.homology_ranks()});
                match continuation_map(cx0, cx1, &counts) {
                    Ok(map) => {
                        if !map.homology_isomorphism || cx0.homology_ranks() != cx1.homology_ranks() {
                            sec.failures.push("continuation map is not an isomorphism on homology".into());
                        }
                        if mono.monotone && !map.unitriangular {
                            sec.failures.push("monotone homotopy but the continuation map is not unitriangular".into());
                        }
                        result["map"] = json!(map);
                    }
                    Err(e) => sec.failures.push(e.to_string()),
                }
            }
            _ => {
                sec.failures.extend(m0.complex_failures.iter().map(|f| format!("start: {f}")));
                sec.failures.extend(m1.complex_failures.iter().map(|f| format!("end: {f}")));
            }
        }
        sec.result = result;
        Ok(sec)
    }

    fn flow(&mut self) -> Result<Section> {
        let mut sec = Section::new("flow");
        let cfg = self.cfg.clone();
        let fc = &cfg.flow;
        let s = cfg.sobolev();
        let n = cfg.hamiltonian.n;
        let stage = self.base()?;
        let action = &stage.action;
        let crit = &stage.report.points;
        let half = action.dim() / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let k0 = fc.tail_k0.first().copied().unwrap_or(cfg.k / 2);
        let tails = TailFunctional::new(n, cfg.k, cfg.s)?;

        let mut traj_table = Table::new("trajectories", &["trajectory", "winding", "t", "action", "gradient_norm", "tail_energy"]);
        let mut family = Vec::new();
        let mut summaries = Vec::new();
        for winding in &cfg.seeds.windings {
            for _ in 0..fc.trajectories {
                let q0: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                let p0: Vec<f64> = winding.iter().map(|&w| w as f64).collect();
                let mut v = PhasePoint::constant(&q0, &p0, cfg.k, s).to_vector();
                for x in v.iter_mut().take(half).skip(n) {
                    *x += rng.random_range(-fc.kick..fc.kick);
                }
                let start = action.point(WindingVector(winding.clone()), &v);
                let id = family.len();
                match integrate(action, &start, fc.t_end, &fc.integrator) {
                    Ok(traj) => {
                        let monotone = traj.is_monotone(fc.integrator.monotone_tol);
                        let winding_ok = traj.winding_constant();
                        if !monotone || !winding_ok {
                            sec.failures.push(format!("trajectory {id}: monotone {monotone}, winding constant {winding_ok}"));
                        }
                        for row in traj.rows(|z| tails.energies(z, k0).0) {
                            traj_table.push(vec![id.to_string(), joined(winding), num(row.t), num(row.action), num(row.gradient_norm), num(row.tail_energy)]);
                        }
                        summaries.push(json!({
                            "id": id,
                            "winding": winding,
                            "stop": traj.stop,
                            "final_time": traj.final_time(),
                            "action_start": traj.actions.first(),
                            "action_end": traj.actions.last(),
                            "max_action_increase": traj.max_action_increase(),
                            "rejected_steps": traj.rejected_steps,
                            "monotone": monotone,
                            "winding_constant": winding_ok,
                        }));
                        family.push(traj);
                    }
                    Err(e) => sec.failures.push(format!("trajectory {id}: {e}")),
                }
            }
        }
        let broken = if crit.is_empty() { Value::Null } else { json!(detect_breaking(&family, crit, fc.rest_tol)) };

        let centre = match crit.first() {
            Some(c) => c.z.clone(),
            None => PhasePoint::constant(&vec![0.0; n], &vec![0.0; n], cfg.k, s),
        };
        let cloud: Vec<PhasePoint> = (0..fc.tail_cloud)
            .map(|_| {
                let mut v = centre.to_vector();
                for x in v.iter_mut() {
                    *x += rng.random_range(-fc.tail_radius..fc.tail_radius);
                }
                centre.with_vector(&v)
            })
            .collect();
        let mut tail_table = Table::new("tails", &["t", "k0", "max_tail", "max_relative_tail"]);
        let tail = vertical_tail_diagnostic(action, &cloud, fc.tail_t_end, fc.tail_checkpoints, &fc.tail_k0, &fc.integrator)?;
        for r in &tail.rows {
            tail_table.push(vec![num(r.t), r.k0.to_string(), num(r.max_tail), num(r.max_relative_tail)]);
        }

        let mut inv_table = Table::new("invariance", &["K", "j", "singular_value"]);
        let mut invariance = Vec::new();
        for &k in &fc.invariance_k {
            let a = Action::new(cfg.hamiltonian.clone(), k, s)?;
            let report = invariance_indicator(&a, &centre.with_degree(k), fc.invariance_t, fc.invariance_steps)?;
            for (j, sv) in report.singular_values.iter().enumerate() {
                inv_table.push(vec![k.to_string(), (j + 1).to_string(), num(*sv)]);
            }
            invariance.push(json!({"K": k, "t": report.t, "sigma_1": report.singular_values.first(), "singular_values": report.singular_values}));
        }

        sec.result = json!({
            "trajectories": summaries,
            "broken_line": broken,
            "tail": tail,
            "invariance": invariance,
        });
        sec.tables = vec![traj_table, tail_table, inv_table];
        Ok(sec)
    }

    fn estimates(&mut self) -> Result<Section> {
        let mut sec = Section::new("estimates");
        let e = &self.cfg.estimates;
        let mut slopes = Table::new("slopes", &["series", "s", "r", "alpha", "beta", "gamma", "slope", "target", "residual", "passed"]);
        let mut samples = Table::new("samples", &["series", "k", "value"]);
        let mut fits = Vec::new();
        for &s in &e.s_list {
            let r = s + e.r_offset;
            let fit = fit_f(s, r, &geometric_grid(e.f_grid[0], e.f_grid[1]))?;
            let target = -2.0 * (1.0 - s);
            let passed = (fit.slope - target).abs() <= e.f_slope_tol && fit.residual < e.residual_max;
            let label = format!("F(s={s})");
            if !passed {
                sec.failures.push(format!("{label}: slope {} vs {target}, residual {}", fit.slope, fit.residual));
            }
            slopes.push(vec![label.clone(), num(s), num(r), String::new(), String::new(), String::new(), num(fit.slope), num(target), num(fit.residual), passed.to_string()]);
            for (k, v) in &fit.points {
                samples.push(vec![label.clone(), num(*k), num(*v)]);
            }
            fits.push(json!({"series": label, "s": s, "r": r, "target": target, "passed": passed, "fit": fit}));
        }
        for g in &e.lemma_g {
            let p = g.params();
            let fit = fit_lemma_g(p, &geometric_grid(g.grid[0], g.grid[1]))?;
            let target = -p.gamma;
            let passed = (fit.slope - target).abs() <= e.g_slope_tol && fit.residual < e.residual_max;
            let label = format!("G({},{},{})", p.alpha, p.beta, p.gamma);
            if !passed {
                sec.failures.push(format!("{label}: slope {} vs {target}, residual {}", fit.slope, fit.residual));
            }
            slopes.push(vec![label.clone(), String::new(), String::new(), num(p.alpha), num(p.beta), num(p.gamma), num(fit.slope), num(target), num(fit.residual), passed.to_string()]);
            for (k, v) in &fit.points {
                samples.push(vec![label.clone(), num(*k), num(*v)]);
            }
            fits.push(json!({"series": label, "params": p, "target": target, "passed": passed, "fit": fit}));
        }
        let mut ratios = Table::new("inequalities", &["kind", "K", "max_ratio"]);
        let mut inequalities = Vec::new();
        for q in &e.inequalities {
            let report = verify_norm_inequality(q.kind, q.s, q.r, q.n, &MatrixChoice::Random { decay: q.decay }, q.samples, &q.ks, self.cfg.seed, q.tolerance)?;
            let kind = serde_json::to_value(q.kind)?.as_str().unwrap_or_default().to_string();
            if !report.stabilized {
                sec.failures.push(format!("{kind}: ratio variation {} exceeds {}", report.variation, q.tolerance));
            }
            for l in &report.levels {
                ratios.push(vec![kind.clone(), l.k.to_string(), num(l.max_ratio)]);
            }
            inequalities.push(report);
        }
        sec.result = json!({"fits": fits, "inequalities": inequalities});
        sec.tables = vec![slopes, samples, ratios];
        Ok(sec)
    }

    fn operators(&mut self) -> Result<Section> {
        let mut sec = Section::new("operators");
        let o = &self.cfg.operators;
        let rank = self.cfg.rank();
        let mut spectrum = Table::new("l_spectrum", &["n", "K", "s", "minus", "zero", "plus", "max_distance", "h_minus_v_perp_w", "h_minus_w_perp_v"]);
        let mut levels = Vec::new();
        for &n in &o.n_list {
            for &k in &o.k_list {
                for &s in &o.s_list {
                    let l = assemble_l(n, k, s)?;
                    let (ev, _) = weighted_eigen(&l)?;
                    let near = |c: f64| ev.iter().filter(|v| (**v - c).abs() < o.eigen_tol).count();
                    let counts = (near(-1.0), near(0.0), near(1.0));
                    let dist = ev
                        .iter()
                        .map(|v| [-1.0, 0.0, 1.0].iter().map(|c| (v - c).abs()).fold(f64::INFINITY, f64::min))
                        .fold(0.0, f64::max);
                    // H^- as the graph {(q, -Delta^{s-1} q')} over nonconstant q, against the negative eigenspace
                    let d = derivative_matrix(n, k);
                    let nonconstant: Vec<usize> = (0..d.ncols()).filter(|&j| d.column(j).amax() > 0.0).collect();
                    let half = d.nrows();
                    let graph_p = -(delta_matrix(n, k, s - 1.0) * &d);
                    let mut spanning = DMatrix::zeros(2 * half, nonconstant.len());
                    for (c, &j) in nonconstant.iter().enumerate() {
                        spanning[(j, c)] = 1.0;
                        spanning.view_mut((half, c), (half, 1)).copy_from(&graph_p.column(j));
                    }
                    let graph = SubspaceBasis::new(spanning, mixed_metric_weights(n, k, s))?;
                    let minus = spectral_projectors(&l)?.minus_basis;
                    let parts = relative_dimension_parts(&graph, &minus, rank)?;
                    let passed = counts == (2 * k * n, 2 * n, 2 * k * n) && dist < o.eigen_tol && parts.v_perp_w == 0 && parts.w_perp_v == 0;
                    if !passed {
                        sec.failures.push(format!("L at n={n} K={k} s={s}: multiplicities {counts:?}, distance {dist:e}, H^- parts {parts:?}"));
                    }
                    spectrum.push(vec![
                        n.to_string(),
                        k.to_string(),
                        num(s),
                        counts.0.to_string(),
                        counts.1.to_string(),
                        counts.2.to_string(),
                        num(dist),
                        parts.v_perp_w.to_string(),
                        parts.w_perp_v.to_string(),
                    ]);
                    levels.push(json!({"n": n, "K": k, "s": s, "multiplicities": [counts.0, counts.1, counts.2], "max_distance": dist, "h_minus": parts, "passed": passed}));
                }
            }
        }
        let mut commutator = Table::new("commutator", &["K", "j", "singular_value"]);
        let mut spectra = Vec::new();
        for &k in &o.commutator_k {
            let op = commutator_operator(&rotation_loop(o.commutator_alpha, k), o.commutator_s, o.commutator_r, k, CommutatorVariant::V1)?;
            let sv = op.singular_values();
            for (j, v) in sv.iter().enumerate().take(4 * o.tail_index.max(1)) {
                commutator.push(vec![k.to_string(), (j + 1).to_string(), num(*v)]);
            }
            spectra.push((k, sv));
        }
        let signature = compactness_signature(&spectra, o.tail_index, o.head_tol, o.tail_tol);
        if !signature.passed {
            sec.failures.push(format!(
                "commutator compactness: head variation {} (< {}), tail ratio {} (< {})",
                signature.head_variation, o.head_tol, signature.tail_ratio, o.tail_tol
            ));
        }
        sec.result = json!({"l_levels": levels, "commutator": signature});
        sec.tables = vec![spectrum, commutator];
        Ok(sec)
    }

    fn homogenize(&mut self) -> Result<Section> {
        let mut sec = Section::new("homogenize");
        let h = &self.cfg.homogenize;
        let rows = homogenize_compare(&h.spec(), h.t_end, &h.n_list, &circle_points(h.x.dim(), h.points))?;
        let mut table = Table::new("errors", &["n", "sup_error"]);
        for r in &rows {
            table.push(vec![r.n.to_string(), num(r.sup_error)]);
        }
        let ratio = match (rows.first(), rows.last()) {
            (Some(a), Some(b)) if rows.len() > 1 && a.sup_error > 0.0 => b.sup_error / a.sup_error,
            _ => f64::NAN,
        };
        if !(ratio < h.ratio_max) {
            sec.failures.push(format!("error ratio {ratio} between n = {} and n = {} is not below {}", h.n_list.first().unwrap_or(&0), h.n_list.last().unwrap_or(&0), h.ratio_max));
        }
        sec.result = json!({"rows": rows, "ratio": if ratio.is_finite() { json!(ratio) } else { Value::Null }});
        sec.tables = vec![table];
        Ok(sec)
    }
}

/// Sections of `all` in run order.
pub fn all_commands() -> &'static [&'static str] {
    &COMMANDS
}

/// Summary of a multi-section run.
pub fn summary(sections: &[Section]) -> Value {
    let per: BTreeMap<&str, Value> = sections.iter().map(|s| (s.command, json!({"passed": s.passed(), "failures": s.failures}))).collect();
    json!({"passed": sections.iter().all(|s| s.passed()), "sections": per})
}
