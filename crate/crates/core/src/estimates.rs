//! Numerical checks of the series lemmas and the multiplication/commutator bounds.
//!
//! Infinite sums are truncated at `H` and completed by an integral-comparison tail
//! estimate; both the partial sum and the tail are reported.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loopspace::{FourierLoop, MatrixLoop};
use crate::operators::loglog_fit;
use crate::par;

/// A truncated series with its tail estimate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SeriesValue {
    /// `partial + tail`
    pub value: f64,
    pub partial: f64,
    pub tail: f64,
    pub h_max: u64,
}

/// Parameters of `G(k) = sum_{h >= 1} 1 / (h^alpha (k + h)^beta)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaGParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LemmaGParams {
    pub fn check(&self) -> Result<()> {
        let LemmaGParams { alpha, beta, gamma } = *self;
        if !(alpha >= 0.0 && beta >= 0.0 && gamma >= 0.0) {
            return Err(Error::Hypothesis(format!(
                "alpha, beta, gamma >= 0 fails for ({alpha}, {beta}, {gamma})"
            )));
        }
        if alpha + beta <= 1.0 {
            return Err(Error::Hypothesis(format!("alpha + beta > 1 fails: {alpha} + {beta}")));
        }
        if gamma > beta {
            return Err(Error::Hypothesis(format!("gamma <= beta fails: {gamma} > {beta}")));
        }
        if gamma >= alpha + beta - 1.0 {
            return Err(Error::Hypothesis(format!(
                "gamma < alpha + beta - 1 fails: {gamma} >= {}",
                alpha + beta - 1.0
            )));
        }
        Ok(())
    }
}

/// Default truncation for `G(k)`: far enough that `k / H` is small.
fn default_h_g(k: u64) -> u64 {
    (64 * k).max(1 << 14)
}

/// `int_X^inf x^{-alpha} (k + x)^{-beta} dx` for `X > k`, by binomial expansion in `k / x`.
fn g_tail_integral(alpha: f64, beta: f64, k: f64, x: f64) -> f64 {
    let mut total = 0.0;
    let mut binom = 1.0; // binom(-beta, j)
    let ratio = k / x;
    let lead = x.powf(1.0 - alpha - beta);
    let mut power = 1.0;
    for j in 0..200 {
        let e = alpha + beta + j as f64 - 1.0;
        let term = binom * power * lead / e;
        total += term;
        if term.abs() < 1e-18 * total.abs() {
            break;
        }
        binom *= (-beta - j as f64) / (j as f64 + 1.0);
        power *= ratio;
    }
    total
}

/// `G(k)` truncated at `h_max` (adaptive if `None`) plus its integral tail.
pub fn lemma_sum_g(params: LemmaGParams, k: u64, h_max: Option<u64>) -> Result<SeriesValue> {
    params.check()?;
    if k == 0 {
        return Err(Error::Hypothesis("k must be positive".into()));
    }
    let h_max = h_max.unwrap_or_else(|| default_h_g(k));
    let (a, b, kf) = (params.alpha, params.beta, k as f64);
    // sum small terms first
    let partial: f64 = (1..=h_max)
        .rev()
        .map(|h| {
            let h = h as f64;
            1.0 / (h.powf(a) * (kf + h).powf(b))
        })
        .sum();
    let x = h_max as f64 + 0.5;
    let tail = if x > 2.0 * kf {
        g_tail_integral(a, b, kf, x)
    } else {
        // crude bound when the truncation is not far past k
        x.powf(1.0 - a - b) / (a + b - 1.0)
    };
    Ok(SeriesValue {
        value: partial + tail,
        partial,
        tail,
        h_max,
    })
}

/// Term of `F(k)` at `h`.
fn f_term(s: f64, r: f64, k: f64, h: f64) -> f64 {
    let phi = |x: f64| if x == 0.0 { 0.0 } else { x.abs().powf(2.0 * (s - 1.0)) * x };
    let num = (phi(k) - phi(h)).powi(2);
    num / ((1.0 + (k - h).abs()).powf(2.0 * s) * (1.0 + h.abs()).powf(2.0 * r))
}

fn default_h_f(k: u64) -> u64 {
    (1024 * k).max(1 << 21)
}

/// `F(k) = sum_h | |k|^{2(s-1)} k - |h|^{2(s-1)} h |^2 / ((1 + |k - h|)^{2s} (1 + |h|)^{2r})`
/// over `|h| <= h_max`, plus the leading-order tail.
pub fn f_of_k(s: f64, r: f64, k: i64, h_max: Option<u64>) -> Result<SeriesValue> {
    if !(s > 0.5 && s < 1.0) {
        return Err(Error::Hypothesis(format!("s in (1/2, 1) fails: s = {s}")));
    }
    if r <= 0.5 {
        return Err(Error::Hypothesis(format!("r > 1/2 fails: r = {r}")));
    }
    let h_max = h_max.unwrap_or_else(|| default_h_f(k.unsigned_abs()));
    let kf = k as f64;
    let mut partial = f_term(s, r, kf, 0.0);
    for h in (1..=h_max).rev() {
        let h = h as f64;
        partial += f_term(s, r, kf, h) + f_term(s, r, kf, -h);
    }
    // for |h| >> |k| the term behaves like |h|^{2s - 2 - 2r}
    let x = h_max as f64 + 0.5;
    let e = 2.0 * r + 1.0 - 2.0 * s;
    let tail = 2.0 * x.powf(-e) / e;
    Ok(SeriesValue {
        value: partial + tail,
        partial,
        tail,
        h_max,
    })
}

/// Least-squares log-log fit of sampled values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayFit {
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    /// RMS residual in natural-log units.
    pub residual: f64,
    pub k_min: f64,
    pub k_max: f64,
}

impl DecayFit {
    pub fn from_points(points: Vec<(f64, f64)>) -> Self {
        let (slope, residual) = loglog_fit(&points);
        let k_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let k_max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        Self {
            points,
            slope,
            residual,
            k_min,
            k_max,
        }
    }
}

/// `2^lo, 2^{lo+1}, ..., 2^hi`.
pub fn geometric_grid(lo: u32, hi: u32) -> Vec<u64> {
    (lo..=hi).map(|e| 1u64 << e).collect()
}

pub fn fit_lemma_g(params: LemmaGParams, ks: &[u64]) -> Result<DecayFit> {
    params.check()?;
    let values = par::map_range(ks.len(), |i| lemma_sum_g(params, ks[i], None).map(|v| (ks[i] as f64, v.value)));
    Ok(DecayFit::from_points(values.into_iter().collect::<Result<_>>()?))
}

pub fn fit_f(s: f64, r: f64, ks: &[u64]) -> Result<DecayFit> {
    let values = par::map_range(ks.len(), |i| f_of_k(s, r, ks[i] as i64, None).map(|v| (ks[i] as f64, v.value)));
    Ok(DecayFit::from_points(values.into_iter().collect::<Result<_>>()?))
}

/// Which bounded bilinear operation to test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InequalityKind {
    Multiplication,
    CommutatorV1,
    CommutatorV2,
}

/// Source of the matrix loop `A`.
#[derive(Clone, Debug)]
pub enum MatrixChoice {
    /// Random trigonometric `A` of degree `K/2` with coefficients damped by `(1+k)^{-decay}`.
    Random { decay: f64 },
    /// A fixed `t`-independent matrix.
    Constant(DMatrix<f64>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InequalityLevel {
    #[serde(rename = "K")]
    pub k: usize,
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InequalityReport {
    pub kind: InequalityKind,
    pub s: f64,
    pub r: f64,
    pub levels: Vec<InequalityLevel>,
    /// `max_K max_ratio / min_K max_ratio - 1`.
    pub variation: f64,
    pub stabilized: bool,
}

/// Loop with independent seeded stream per `(sample, slot)`, so truncations at
/// different `K` are nested.
fn seeded_loop(seed: u64, sample: u64, slot: u64, n: usize, k: usize, decay: f64) -> FourierLoop {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sample.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(slot);
    FourierLoop::random(n, k, decay, &mut rng)
}

/// Apply the chosen operation to `u` at truncation `k`.
pub fn apply_operation(kind: InequalityKind, a: &MatrixLoop, u: &FourierLoop, s: f64, k: usize) -> FourierLoop {
    match kind {
        InequalityKind::Multiplication => a.apply(u, k),
        InequalityKind::CommutatorV1 => {
            let e = |v: &FourierLoop| v.derivative().delta_power(s - 1.0);
            a.apply(&e(u), k).sub(&e(&a.apply(u, k)))
        }
        InequalityKind::CommutatorV2 => {
            let du = u.derivative();
            a.apply(&du.delta_power(s - 1.0), k).sub(&a.apply(&du, k).delta_power(s - 1.0))
        }
    }
}

/// Observed `||Op(u)|| / (||A||_s ||u||_r)` over random samples for each `K`.
///
/// The target norm is `r` for multiplication and `1 - s` for the commutators.
#[allow(clippy::too_many_arguments)]
pub fn verify_norm_inequality(
    kind: InequalityKind,
    s: f64,
    r: f64,
    n: usize,
    a_choice: &MatrixChoice,
    sample_count: usize,
    ks: &[usize],
    seed: u64,
    tolerance: f64,
) -> Result<InequalityReport> {
    if !(s > 0.5 && s < 1.0) {
        return Err(Error::Hypothesis(format!("s in (1/2, 1) fails: s = {s}")));
    }
    let target = match kind {
        InequalityKind::Multiplication => r,
        _ => 1.0 - s,
    };
    let mut levels = Vec::new();
    for &k in ks {
        let half = k / 2;
        let ratios = par::map_range(sample_count, |j| {
            let j = j as u64;
            let a = match a_choice {
                MatrixChoice::Random { decay } => {
                    let entries = (0..n * n)
                        .map(|e| seeded_loop(seed, j, 1 + e as u64, 1, half, *decay).with_degree(k))
                        .collect();
                    MatrixLoop::from_entries(n, entries).expect("n*n scalar entries")
                }
                MatrixChoice::Constant(m) => MatrixLoop::constant(m, k),
            };
            let u = seeded_loop(seed, j, 0, n, half, r + 1.0).with_degree(k);
            let out = apply_operation(kind, &a, &u, s, k);
            out.sobolev_norm(target) / (a.sobolev_norm(s) * u.sobolev_norm(r))
        });
        let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
        levels.push(InequalityLevel { k, ratios, max_ratio });
    }
    let hi = levels.iter().map(|l| l.max_ratio).fold(0.0, f64::max);
    let lo = levels.iter().map(|l| l.max_ratio).fold(f64::INFINITY, f64::min);
    let variation = if lo > 0.0 { hi / lo - 1.0 } else if hi == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(InequalityReport {
        kind,
        s,
        r,
        levels,
        variation,
        stabilized: variation < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lemma_g_closed_form() {
        // sum 1/(h^2 (1+h)^2) = pi^2/3 - 3
        let p = LemmaGParams { alpha: 2.0, beta: 2.0, gamma: 0.5 };
        let v = lemma_sum_g(p, 1, Some(1_000_000)).unwrap();
        let exact = std::f64::consts::PI.powi(2) / 3.0 - 3.0;
        assert!((v.value - exact).abs() < 1e-12, "{}", v.value - exact);
        assert!((v.partial - exact).abs() < 1e-15 + v.tail * 1.01);
    }

    #[test]
    fn lemma_g_hypotheses() {
        let bad = [
            (0.3, 0.5, 0.1),
            (2.0, 1.0, 1.5),
            (1.2, 0.5, 0.6),
            (-1.0, 3.0, 0.0),
        ];
        for (alpha, beta, gamma) in bad {
            assert!(matches!(
                lemma_sum_g(LemmaGParams { alpha, beta, gamma }, 4, None),
                Err(Error::Hypothesis(_))
            ));
        }
    }

    #[test]
    fn tail_integral_matches_direct_quadrature() {
        let (a, b, k, x) = (2.0, 1.5, 10.0, 70.0);
        // composite Simpson in u = 1/x on (0, 1/x]
        let f = |u: f64| if u == 0.0 { 0.0 } else { (1.0 / u).powf(-a) * (k + 1.0 / u).powf(-b) / (u * u) };
        let m = 20000;
        let hstep = (1.0 / x) / m as f64;
        let mut acc = f(0.0) + f(1.0 / x);
        for i in 1..m {
            acc += f(i as f64 * hstep) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let quad = acc * hstep / 3.0;
        let ours = g_tail_integral(a, b, k, x);
        assert!((ours - quad).abs() / quad < 1e-6, "{ours} vs {quad}");
    }

    #[test]
    fn doubling_truncation_is_stable() {
        let p = LemmaGParams { alpha: 1.5, beta: 0.8, gamma: 0.8 };
        for k in [16u64, 256] {
            let a = lemma_sum_g(p, k, None).unwrap();
            let b = lemma_sum_g(p, k, Some(2 * a.h_max)).unwrap();
            assert!((a.value / b.value - 1.0).abs() < 5e-3);
        }
        for k in [16i64, 512] {
            let a = f_of_k(0.6, 0.65, k, Some(1 << 18)).unwrap();
            let b = f_of_k(0.6, 0.65, k, Some(1 << 19)).unwrap();
            assert!((a.value / b.value - 1.0).abs() < 5e-3);
        }
    }

    #[test]
    fn f_is_even() {
        for k in [1i64, 3, 17, 100] {
            let a = f_of_k(0.6, 0.7, k, Some(1 << 16)).unwrap().value;
            let b = f_of_k(0.6, 0.7, -k, Some(1 << 16)).unwrap().value;
            assert!((a - b).abs() < 1e-12 * a.abs());
        }
    }

    #[test]
    fn f_parameter_checks() {
        assert!(f_of_k(0.4, 0.7, 3, None).is_err());
        assert!(f_of_k(0.6, 0.5, 3, None).is_err());
    }

    #[test]
    fn gamma_zero_is_bounded() {
        let p = LemmaGParams { alpha: 2.0, beta: 0.0, gamma: 0.0 };
        let fit = fit_lemma_g(p, &geometric_grid(4, 10)).unwrap();
        assert!(fit.slope.abs() < 0.05);
    }

    #[test]
    fn identity_multiplication_ratio() {
        let s = 0.6;
        let rep = verify_norm_inequality(
            InequalityKind::Multiplication,
            s,
            0.3,
            2,
            &MatrixChoice::Constant(DMatrix::identity(2, 2)),
            5,
            &[16],
            3,
            0.1,
        )
        .unwrap();
        let expected = 1.0 / 2f64.sqrt();
        for r in &rep.levels[0].ratios {
            assert!((r - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_commutator_ratio_zero() {
        let m = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, -2.0, 0.1]);
        let rep = verify_norm_inequality(
            InequalityKind::CommutatorV1,
            0.6,
            0.55,
            2,
            &MatrixChoice::Constant(m),
            4,
            &[16],
            3,
            0.1,
        )
        .unwrap();
        assert!(rep.levels[0].ratios.iter().all(|r| *r < 1e-14));
    }

    #[test]
    fn operation_matches_assembled_matrix() {
        use crate::operators::{commutator_operator, CommutatorVariant};
        let k = 8;
        let a = MatrixLoop::from_entries(
            2,
            (0..4).map(|e| seeded_loop(1, 0, e, 1, 4, 1.0).with_degree(k)).collect(),
        )
        .unwrap();
        let u = seeded_loop(1, 0, 9, 2, k, 0.0);
        for (kind, variant) in [
            (InequalityKind::CommutatorV1, CommutatorVariant::V1),
            (InequalityKind::CommutatorV2, CommutatorVariant::V2),
        ] {
            let direct = apply_operation(kind, &a, &u, 0.6, k);
            let op = commutator_operator(&a, 0.6, 0.5, k, variant).unwrap();
            let via = op.apply(u.coeffs());
            let err = direct.coeffs().iter().zip(&via).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10);
        }
    }

    proptest::proptest! {
        #[test]
        fn lemma_g_is_decreasing_in_k(alpha in 1.05f64..3.0, beta in 0.1f64..2.0, k in 1u64..200) {
            let gamma = 0.0;
            let p = LemmaGParams { alpha, beta, gamma };
            let a = lemma_sum_g(p, k, Some(4096)).unwrap().value;
            let b = lemma_sum_g(p, k + 1, Some(4096)).unwrap().value;
            proptest::prop_assert!(b <= a);
        }
    }
}
