use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use loopmorse::action::{HamiltonianSpec, NewtonOptions, SeedSpec};
use loopmorse::connections::{ConnectionOptions, PerturbOptions};
use loopmorse::estimates::{InequalityKind, LemmaGParams};
use loopmorse::flow::{FlowOptions, PlaneField, SwitchedFieldSpec};
use loopmorse::loopspace::SobolevExponent;
use loopmorse::operators::RankTolerance;

pub const DEFAULTS: &str = include_str!("../../../configs/defaults.toml");

/// A malformed or inadmissible configuration.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub s: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub k_sweep: Vec<usize>,
    pub seed: u64,
    pub out: PathBuf,
    pub stability_sweep: bool,
    pub hamiltonian: HamiltonianSpec,
    pub tolerances: Tolerances,
    pub seeds: SeedSpec,
    pub connections: ConnectionOptions,
    pub perturbation: Perturbation,
    pub flow: FlowConfig,
    pub estimates: EstimatesConfig,
    pub operators: OperatorsConfig,
    pub continuation: ContinuationConfig,
    pub homogenize: HomogenizeConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub newton: f64,
    pub newton_max_iterations: usize,
    pub dedup: f64,
    pub rank: f64,
    pub rank_ambiguous: f64,
    pub hyperbolicity: f64,
    pub divergence: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub amplitude: f64,
    pub radius: f64,
    pub modes: usize,
    pub samples: usize,
    pub q_grid: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub t_end: f64,
    pub trajectories: usize,
    pub kick: f64,
    pub tail_cloud: usize,
    pub tail_radius: f64,
    pub tail_t_end: f64,
    pub tail_checkpoints: usize,
    pub tail_k0: Vec<usize>,
    pub invariance_k: Vec<usize>,
    pub invariance_t: f64,
    pub invariance_steps: usize,
    pub rest_tol: f64,
    pub integrator: FlowOptions,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaGEntry {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Exponents `[lo, hi]` of the grid `k = 2^lo .. 2^hi`.
    pub grid: [u32; 2],
}

impl LemmaGEntry {
    pub fn params(&self) -> LemmaGParams {
        LemmaGParams {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InequalityEntry {
    pub kind: InequalityKind,
    pub s: f64,
    pub r: f64,
    pub n: usize,
    pub decay: f64,
    pub samples: usize,
    pub ks: Vec<usize>,
    pub tolerance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatesConfig {
    pub s_list: Vec<f64>,
    pub r_offset: f64,
    pub f_grid: [u32; 2],
    pub f_slope_tol: f64,
    pub g_slope_tol: f64,
    pub residual_max: f64,
    pub lemma_g: Vec<LemmaGEntry>,
    pub inequalities: Vec<InequalityEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorsConfig {
    pub n_list: Vec<usize>,
    pub k_list: Vec<usize>,
    pub s_list: Vec<f64>,
    pub eigen_tol: f64,
    pub commutator_alpha: f64,
    pub commutator_s: f64,
    pub commutator_r: f64,
    pub commutator_k: Vec<usize>,
    pub tail_index: usize,
    pub head_tol: f64,
    pub tail_tol: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuationConfig {
    pub grid: usize,
    pub p_box: f64,
    pub target: HamiltonianSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomogenizeConfig {
    pub t_end: f64,
    pub n_list: Vec<usize>,
    pub points: usize,
    pub ratio_max: f64,
    pub x: PlaneField,
    pub y: PlaneField,
}

impl HomogenizeConfig {
    pub fn spec(&self) -> SwitchedFieldSpec {
        SwitchedFieldSpec {
            x: self.x.clone(),
            y: self.y.clone(),
        }
    }
}

/// Command-line overrides applied after merging.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub k_sweep: Option<Vec<usize>>,
}

/// Recursively overlay `top` onto `base`. Tables merge key by key, everything else is replaced.
pub fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (key, value) in t {
                match b.get_mut(&key) {
                    Some(existing) => merge(existing, value),
                    None => {
                        b.insert(key, value);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn parse(text: &str, origin: &str) -> Result<toml::Value, ConfigError> {
    text.parse::<toml::Table>()
        .map(toml::Value::Table)
        .map_err(|e| ConfigError(format!("{origin}: {e}")))
}

/// Defaults merged with the file at `path` (if any) and the overrides, then validated.
pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let mut merged = parse(DEFAULTS, "configs/defaults.toml")?;
    let origin = path.map(|p| p.display().to_string()).unwrap_or_else(|| "configs/defaults.toml".into());
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{origin}: {e}")))?;
        merge(&mut merged, parse(&text, &origin)?);
    }
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let field = e.path().to_string();
        ConfigError(format!("{origin}: field `{field}`: {}", e.inner()))
    })?;
    if let Some(out) = &overrides.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(ks) = &overrides.k_sweep {
        cfg.k_sweep = ks.clone();
    }
    cfg.connections.seed = cfg.seed;
    cfg.validate().map_err(|e| ConfigError(format!("{origin}: {e}")))?;
    Ok(cfg)
}

/// Parse `"8,16,32"`.
pub fn parse_k_sweep(text: &str) -> Result<Vec<usize>, String> {
    text.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("`{t}` in --k-sweep: {e}")))
        .collect()
}

fn positive(field: &str, value: f64) -> Result<(), String> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(format!("field `{field}`: must be positive, got {value}"))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), String> {
        SobolevExponent::for_action(self.s).map_err(|e| format!("field `s`: {e}"))?;
        self.hamiltonian.validate().map_err(|e| format!("field `hamiltonian`: {e}"))?;
        self.continuation
            .target
            .validate()
            .map_err(|e| format!("field `continuation.target`: {e}"))?;
        if self.continuation.target.n != self.hamiltonian.n {
            return Err("field `continuation.target.n`: must equal `hamiltonian.n`".into());
        }
        if self.k == 0 {
            return Err("field `K`: must be positive".into());
        }
        if self.k_sweep.is_empty() || self.k_sweep.contains(&0) {
            return Err("field `k_sweep`: needs at least one positive truncation".into());
        }
        if self.seeds.windings.iter().any(|w| w.len() != self.hamiltonian.n) {
            return Err("field `seeds.windings`: every winding needs n entries".into());
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("tolerances.newton", t.newton),
            ("tolerances.dedup", t.dedup),
            ("tolerances.rank", t.rank),
            ("tolerances.rank_ambiguous", t.rank_ambiguous),
            ("tolerances.hyperbolicity", t.hyperbolicity),
            ("tolerances.divergence", t.divergence),
            ("connections.t_bvp", self.connections.t_bvp),
            ("connections.mesh_h", self.connections.mesh_h),
            ("connections.newton_tol", self.connections.newton_tol),
            ("connections.defect_tol", self.connections.defect_tol),
            ("connections.dedup_tol", self.connections.dedup_tol),
            ("connections.capture_tol", self.connections.capture_tol),
            ("connections.condition_max", self.connections.condition_max),
            ("perturbation.radius", self.perturbation.radius),
            ("flow.t_end", self.flow.t_end),
            ("flow.rest_tol", self.flow.rest_tol),
            ("flow.integrator.h0", self.flow.integrator.h0),
            ("flow.integrator.h_min", self.flow.integrator.h_min),
            ("flow.integrator.eps_crit", self.flow.integrator.eps_crit),
            ("flow.integrator.monotone_tol", self.flow.integrator.monotone_tol),
            ("estimates.f_slope_tol", self.estimates.f_slope_tol),
            ("estimates.g_slope_tol", self.estimates.g_slope_tol),
            ("estimates.residual_max", self.estimates.residual_max),
            ("operators.eigen_tol", self.operators.eigen_tol),
            ("operators.head_tol", self.operators.head_tol),
            ("operators.tail_tol", self.operators.tail_tol),
            ("homogenize.t_end", self.homogenize.t_end),
            ("homogenize.ratio_max", self.homogenize.ratio_max),
        ] {
            positive(name, v)?;
        }
        if t.rank_ambiguous >= t.rank {
            return Err("field `tolerances.rank_ambiguous`: must be below `tolerances.rank`".into());
        }
        if !(self.perturbation.amplitude >= 0.0) {
            return Err("field `perturbation.amplitude`: must be non-negative".into());
        }
        Ok(())
    }

    pub fn sobolev(&self) -> SobolevExponent {
        SobolevExponent::for_action(self.s).expect("validated")
    }

    pub fn newton(&self) -> NewtonOptions {
        let t = &self.tolerances;
        NewtonOptions {
            tol: t.newton,
            max_iterations: t.newton_max_iterations,
            dedup_tol: t.dedup,
            hyperbolicity_threshold: t.hyperbolicity,
            divergence: t.divergence,
        }
    }

    pub fn rank(&self) -> RankTolerance {
        RankTolerance {
            zero: self.tolerances.rank,
            ambiguous: self.tolerances.rank_ambiguous,
        }
    }

    pub fn perturb_options(&self) -> PerturbOptions {
        let p = &self.perturbation;
        PerturbOptions {
            radius: p.radius,
            modes: p.modes,
            samples: p.samples,
            q_grid: p.q_grid,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = load(None, &Overrides::default()).unwrap();
        assert_eq!(cfg.k, 8);
        assert_eq!(cfg.hamiltonian, HamiltonianSpec::pendulum(0.05));
    }

    #[test]
    fn merge_keeps_untouched_keys() {
        let mut base = parse("a = 1\n[t]\nx = 1\ny = 2\n", "base").unwrap();
        merge(&mut base, parse("[t]\ny = 3\n", "top").unwrap());
        assert_eq!(base["a"].as_integer(), Some(1));
        assert_eq!(base["t"]["x"].as_integer(), Some(1));
        assert_eq!(base["t"]["y"].as_integer(), Some(3));
    }

    #[test]
    fn unknown_field_is_named() {
        let mut merged = parse(DEFAULTS, "defaults").unwrap();
        merge(&mut merged, parse("[connections]\nt_bpv = 3.0\n", "top").unwrap());
        let err = serde_path_to_error::deserialize::<_, ExperimentConfig>(merged).unwrap_err();
        assert_eq!(err.path().to_string(), "connections.t_bpv");
    }

    #[test]
    fn k_sweep_flag() {
        assert_eq!(parse_k_sweep("8, 16,32").unwrap(), vec![8, 16, 32]);
        assert!(parse_k_sweep("8,x").is_err());
    }
}
