//! WebAssembly bindings for the static page in `www/`.
//!
//! Each export returns a JSON string; the plain functions behind them are
//! tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use loopmorse::action::{find_critical_points, Action, HamiltonianSpec, NewtonOptions, SeedSpec};
use loopmorse::flow::{integrate, FlowOptions};
use loopmorse::loopspace::{PhasePoint, SobolevExponent, WindingVector};
use loopmorse::operators::{assemble_l, weighted_eigen};

const S: f64 = 0.6;

#[derive(Debug, Serialize)]
pub struct PointView {
    pub q: f64,
    pub action: f64,
    pub relative_index: i64,
    pub residual: f64,
}

#[derive(Debug, Serialize)]
pub struct FlowView {
    pub t: Vec<f64>,
    pub action: Vec<f64>,
    pub gradient_norm: Vec<f64>,
    pub monotone: bool,
}

#[derive(Debug, Serialize)]
pub struct SpectrumView {
    pub eigenvalues: Vec<f64>,
    pub minus: usize,
    pub zero: usize,
    pub plus: usize,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn pendulum(eps: f64, k: usize) -> Result<Action, String> {
    let s = SobolevExponent::for_action(S).map_err(err)?;
    if !(1..=32).contains(&k) {
        return Err(format!("K = {k} outside 1..=32"));
    }
    Action::new(HamiltonianSpec::pendulum(eps), k, s).map_err(err)
}

/// Critical points of `p^2/2 + eps cos(2 pi q)` found from constant seeds.
pub fn pendulum_points(eps: f64, k: usize) -> Result<Vec<PointView>, String> {
    let action = pendulum(eps, k)?;
    let seeds = SeedSpec::constants(1, 16).seeds(1, k, action.s);
    let report = find_critical_points(&action, &seeds, &NewtonOptions::default()).map_err(err)?;
    Ok(report
        .points
        .iter()
        .map(|c| PointView {
            q: c.z.q.coeffs()[0],
            action: c.action,
            relative_index: c.relative_index,
            residual: c.residual,
        })
        .collect())
}

/// Gradient flow line from the constant loop at `q0` with `kick` added to the first cosine mode.
pub fn flow_line(eps: f64, k: usize, q0: f64, kick: f64, t_end: f64) -> Result<FlowView, String> {
    let action = pendulum(eps, k)?;
    if !(t_end > 0.0 && t_end <= 200.0) {
        return Err(format!("t_end = {t_end} outside (0, 200]"));
    }
    let mut v = PhasePoint::constant(&[q0], &[0.0], k, action.s).to_vector();
    v[1] += kick;
    let z = action.point(WindingVector(vec![0]), &v);
    let opts = FlowOptions {
        record_every: 4,
        ..FlowOptions::default()
    };
    let traj = integrate(&action, &z, t_end, &opts).map_err(err)?;
    Ok(FlowView {
        monotone: traj.is_monotone(opts.monotone_tol),
        t: traj.times.clone(),
        action: traj.actions.clone(),
        gradient_norm: traj.gradient_norms,
    })
}

/// Spectrum of `L` in the mixed metric.
pub fn l_spectrum(n: usize, k: usize, s: f64) -> Result<SpectrumView, String> {
    if !(1..=3).contains(&n) || !(1..=32).contains(&k) {
        return Err(format!("n = {n}, K = {k} outside the demo range"));
    }
    let (eigenvalues, _) = weighted_eigen(&assemble_l(n, k, s).map_err(err)?).map_err(err)?;
    let near = |c: f64| eigenvalues.iter().filter(|v| (**v - c).abs() < 1e-10).count();
    Ok(SpectrumView {
        minus: near(-1.0),
        zero: near(0.0),
        plus: near(1.0),
        eigenvalues,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(err)).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = pendulumPoints)]
pub fn pendulum_points_js(eps: f64, k: usize) -> Result<String, JsValue> {
    to_js(pendulum_points(eps, k))
}

#[wasm_bindgen(js_name = flowLine)]
pub fn flow_line_js(eps: f64, k: usize, q0: f64, kick: f64, t_end: f64) -> Result<String, JsValue> {
    to_js(flow_line(eps, k, q0, kick, t_end))
}

#[wasm_bindgen(js_name = lSpectrum)]
pub fn l_spectrum_js(n: usize, k: usize, s: f64) -> Result<String, JsValue> {
    to_js(l_spectrum(n, k, s))
}
