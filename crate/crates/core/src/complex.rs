//! Mod-2 Morse complex, homology ranks and continuation maps.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::action::{CriticalPoint, HamiltonianSpec};
use crate::error::{invalid, Error, Result};

/// Dense matrix over GF(2), rows packed into `u64` words.
#[derive(Clone, PartialEq, Eq)]
pub struct Gf2Matrix {
    rows: usize,
    cols: usize,
    words: usize,
    data: Vec<u64>,
}

impl fmt::Debug for Gf2Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Gf2Matrix{:?}", self.to_bitstrings())
    }
}

impl Gf2Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words = cols.div_ceil(64);
        Self {
            rows,
            cols,
            words,
            data: vec![0; rows * words],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    /// Rows given as strings of `0` and `1`.
    pub fn from_bitstrings(rows: &[&str]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut m = Self::zeros(rows.len(), cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(invalid("bitstring", "rows differ in length"));
            }
            for (j, c) in r.chars().enumerate() {
                match c {
                    '0' => {}
                    '1' => m.set(i, j, true),
                    _ => return Err(invalid("bitstring", format!("unexpected character {c:?}"))),
                }
            }
        }
        Ok(m)
    }

    pub fn to_bitstrings(&self) -> Vec<String> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| if self.get(i, j) { '1' } else { '0' }).collect())
            .collect()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        assert!(i < self.rows && j < self.cols);
        self.data[i * self.words + j / 64] >> (j % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        assert!(i < self.rows && j < self.cols);
        let w = &mut self.data[i * self.words + j / 64];
        if v {
            *w |= 1 << (j % 64);
        } else {
            *w &= !(1 << (j % 64));
        }
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.data[i * self.words..(i + 1) * self.words]
    }

    fn xor_row_into(&mut self, src: usize, dst: usize) {
        for w in 0..self.words {
            let v = self.data[src * self.words + w];
            self.data[dst * self.words + w] ^= v;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|w| *w == 0)
    }

    /// Product over GF(2).
    pub fn mul(&self, other: &Gf2Matrix) -> Gf2Matrix {
        assert_eq!(self.cols, other.rows, "shape mismatch in GF(2) product");
        let mut out = Gf2Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                if self.get(i, k) {
                    for w in 0..out.words {
                        out.data[i * out.words + w] ^= other.row(k)[w];
                    }
                }
            }
        }
        out
    }

    /// First differing entry, if any.
    pub fn first_difference(&self, other: &Gf2Matrix) -> Option<(usize, usize)> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        (0..self.rows).flat_map(|i| (0..self.cols).map(move |j| (i, j))).find(|&(i, j)| self.get(i, j) != other.get(i, j))
    }

    pub fn rank(&self) -> usize {
        let mut m = self.clone();
        let mut rank = 0;
        for col in 0..m.cols {
            let Some(p) = (rank..m.rows).find(|&r| m.get(r, col)) else {
                continue;
            };
            if p != rank {
                for w in 0..m.words {
                    m.data.swap(p * m.words + w, rank * m.words + w);
                }
            }
            for r in 0..m.rows {
                if r != rank && m.get(r, col) {
                    m.xor_row_into(rank, r);
                }
            }
            rank += 1;
        }
        rank
    }

    pub fn is_upper_unitriangular(&self) -> bool {
        self.rows == self.cols && (0..self.rows).all(|i| self.get(i, i) && (0..i).all(|j| !self.get(i, j)))
    }

    /// Inverse of an upper unitriangular matrix by back substitution:
    /// `inv x_l = x_l - sum_{j<l} m_{jl} inv x_j`.
    pub fn unitriangular_inverse(&self) -> Option<Gf2Matrix> {
        if !self.is_upper_unitriangular() {
            return None;
        }
        let n = self.rows;
        let mut inv = Gf2Matrix::identity(n);
        for l in 0..n {
            for j in 0..l {
                if self.get(j, l) {
                    // column l of inv gains column j of inv
                    for i in 0..=j {
                        if inv.get(i, j) {
                            let v = inv.get(i, l);
                            inv.set(i, l, !v);
                        }
                    }
                }
            }
        }
        Some(inv)
    }
}

impl Serialize for Gf2Matrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr {
            rows: usize,
            cols: usize,
            bits: Vec<String>,
        }
        Repr {
            rows: self.rows,
            cols: self.cols,
            bits: self.to_bitstrings(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Gf2Matrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            rows: usize,
            cols: usize,
            bits: Vec<String>,
        }
        let r = Repr::deserialize(d)?;
        let refs: Vec<&str> = r.bits.iter().map(String::as_str).collect();
        let m = if r.rows == 0 {
            Gf2Matrix::zeros(0, r.cols)
        } else {
            Gf2Matrix::from_bitstrings(&refs).map_err(serde::de::Error::custom)?
        };
        if m.rows != r.rows || m.cols != r.cols {
            return Err(serde::de::Error::custom("bit rows do not match the declared shape"));
        }
        Ok(m)
    }
}

/// A chain generator: a hyperbolic critical point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub id: usize,
    pub action: f64,
    pub degree: i64,
}

/// Mod-2 Morse complex graded by relative index. Generators in each degree are sorted by
/// increasing action; `boundaries[k]` maps degree `k` to `k - 1`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainComplex {
    pub generators: BTreeMap<i64, Vec<Generator>>,
    pub boundaries: BTreeMap<i64, Gf2Matrix>,
    pub index_convention: String,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

pub const INDEX_CONVENTION: &str = "degree = relative index #neg(Hessian) - (2Kn + n), unshifted";

/// Connection counts mod 2, keyed by `(x_id, y_id)`.
pub type CountTable = BTreeMap<(usize, usize), u8>;

fn sort_generators(crit: &[(usize, &CriticalPoint)]) -> BTreeMap<i64, Vec<Generator>> {
    let mut out: BTreeMap<i64, Vec<Generator>> = BTreeMap::new();
    for (id, c) in crit {
        out.entry(c.relative_index).or_default().push(Generator {
            id: *id,
            action: c.action,
            degree: c.relative_index,
        });
    }
    for g in out.values_mut() {
        g.sort_by(|a, b| a.action.total_cmp(&b.action).then(a.id.cmp(&b.id)));
    }
    out
}

/// Assemble the complex from critical points (ids are slice positions) and mod-2 counts.
pub fn build_complex(crit: &[CriticalPoint], counts: &CountTable) -> Result<ChainComplex> {
    if let Some((i, _)) = crit.iter().enumerate().find(|(_, c)| c.degenerate) {
        return Err(Error::Hypothesis(format!("critical point {i} is degenerate and cannot be a generator")));
    }
    let indexed: Vec<(usize, &CriticalPoint)> = crit.iter().enumerate().collect();
    let generators = sort_generators(&indexed);
    let mut boundaries = BTreeMap::new();
    for (&k, upper) in &generators {
        let Some(lower) = generators.get(&(k - 1)) else {
            continue;
        };
        let mut m = Gf2Matrix::zeros(lower.len(), upper.len());
        for (c, x) in upper.iter().enumerate() {
            for (r, y) in lower.iter().enumerate() {
                let sigma = counts.get(&(x.id, y.id)).ok_or(Error::MissingCount(x.id, y.id))?;
                m.set(r, c, sigma % 2 == 1);
            }
        }
        boundaries.insert(k, m);
    }
    let cx = ChainComplex {
        generators,
        boundaries,
        index_convention: INDEX_CONVENTION.into(),
        provenance: serde_json::Value::Null,
    };
    cx.check_square()?;
    Ok(cx)
}

impl ChainComplex {
    pub fn empty() -> Self {
        Self {
            generators: BTreeMap::new(),
            boundaries: BTreeMap::new(),
            index_convention: INDEX_CONVENTION.into(),
            provenance: serde_json::Value::Null,
        }
    }

    /// Hand-built complex from boundary matrices; generators are numbered per degree.
    pub fn from_boundaries(sizes: &BTreeMap<i64, usize>, boundaries: BTreeMap<i64, Gf2Matrix>) -> Result<Self> {
        let mut next = 0;
        let mut generators = BTreeMap::new();
        for (&k, &len) in sizes {
            let g: Vec<Generator> = (0..len)
                .map(|i| Generator {
                    id: next + i,
                    action: i as f64,
                    degree: k,
                })
                .collect();
            next += len;
            generators.insert(k, g);
        }
        for (&k, m) in &boundaries {
            let rows = sizes.get(&(k - 1)).copied().unwrap_or(0);
            let cols = sizes.get(&k).copied().unwrap_or(0);
            if (m.rows(), m.cols()) != (rows, cols) {
                return Err(Error::DimensionMismatch(format!("boundary in degree {k} has shape {}x{}, expected {rows}x{cols}", m.rows(), m.cols())));
            }
        }
        let cx = Self {
            generators,
            boundaries,
            index_convention: INDEX_CONVENTION.into(),
            provenance: serde_json::Value::Null,
        };
        cx.check_square()?;
        Ok(cx)
    }

    pub fn rank_of(&self, degree: i64) -> usize {
        self.generators.get(&degree).map_or(0, Vec::len)
    }

    fn boundary(&self, degree: i64) -> Gf2Matrix {
        self.boundaries
            .get(&degree)
            .cloned()
            .unwrap_or_else(|| Gf2Matrix::zeros(self.rank_of(degree - 1), self.rank_of(degree)))
    }

    /// `d_{k-1} d_k = 0` for every `k`; reports the first nonzero entry otherwise.
    pub fn check_square(&self) -> Result<()> {
        for &k in self.generators.keys() {
            let sq = self.boundary(k - 1).mul(&self.boundary(k));
            if let Some((r, c)) = sq.first_difference(&Gf2Matrix::zeros(sq.rows(), sq.cols())) {
                return Err(Error::BoundarySquare {
                    degree: k,
                    upper: self.generators[&k][c].id,
                    lower: self.generators[&(k - 2)][r].id,
                });
            }
        }
        Ok(())
    }

    /// Homology ranks over GF(2), by degree.
    pub fn homology_ranks(&self) -> BTreeMap<i64, usize> {
        self.generators
            .keys()
            .map(|&k| {
                let kernel = self.rank_of(k) - self.boundary(k).rank();
                (k, kernel - self.boundary(k + 1).rank())
            })
            .collect()
    }
}

/// Free function form of [`ChainComplex::homology_ranks`].
pub fn homology_ranks(cx: &ChainComplex) -> BTreeMap<i64, usize> {
    cx.homology_ranks()
}

/// The cone cutoff `2r^3 - 3r^2 + 1` and its derivative.
pub fn cone_cutoff(r: f64) -> (f64, f64) {
    (2.0 * r.powi(3) - 3.0 * r * r + 1.0, 6.0 * r * r - 6.0 * r)
}

/// Result of comparing two Hamiltonians on a sample grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonotoneCheck {
    /// Smallest sampled `H1 - H0`.
    pub min_difference: f64,
    pub max_difference: f64,
    pub monotone: bool,
    /// `H1 - H0` is constant on the samples.
    pub constant_shift: bool,
}

/// Sample `H1 - H0` over `t`, `q` in a grid and `p` in `[-p_box, p_box]^n`.
pub fn monotone_check(h0: &HamiltonianSpec, h1: &HamiltonianSpec, grid: usize, p_box: f64) -> Result<MonotoneCheck> {
    if h0.n != h1.n {
        return Err(Error::DimensionMismatch("Hamiltonians on different tori".into()));
    }
    let n = h0.n;
    let pgrid = 5usize;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for it in 0..grid {
        let t = it as f64 / grid as f64;
        for iq in 0..grid.pow(n as u32) {
            let mut r = iq;
            let q: Vec<f64> = (0..n)
                .map(|_| {
                    let v = (r % grid) as f64 / grid as f64;
                    r /= grid;
                    v
                })
                .collect();
            for ip in 0..pgrid.pow(n as u32) {
                let mut r = ip;
                let p: Vec<f64> = (0..n)
                    .map(|_| {
                        let v = -p_box + 2.0 * p_box * (r % pgrid) as f64 / (pgrid - 1) as f64;
                        r /= pgrid;
                        v
                    })
                    .collect();
                let d = h1.value(t, &q, &p) - h0.value(t, &q, &p);
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
    }
    let tol = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
    Ok(MonotoneCheck {
        min_difference: lo,
        max_difference: hi,
        monotone: lo >= -tol,
        constant_shift: hi - lo <= tol,
    })
}

/// Per-degree matrices `Psi_k : C_k(P0) -> C_k(P1)`, rows and columns in action order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContinuationMap {
    pub degrees: BTreeMap<i64, Gf2Matrix>,
    /// `Psi_k` is upper unitriangular in every degree.
    pub unitriangular: bool,
    /// Inverse from back substitution, when unitriangular.
    pub inverse: Option<BTreeMap<i64, Gf2Matrix>>,
    /// `Psi` is invertible with a chain-map inverse, so it induces an isomorphism on homology.
    pub homology_isomorphism: bool,
    pub identity: bool,
}

/// Assemble `Psi` from hybrid counts keyed by `(x_id in P0, y_id in P1)` and verify
/// `d1 Psi = Psi d0` over GF(2).
pub fn continuation_map(cx0: &ChainComplex, cx1: &ChainComplex, counts: &CountTable) -> Result<ContinuationMap> {
    let mut degrees = BTreeMap::new();
    let all: std::collections::BTreeSet<i64> = cx0.generators.keys().chain(cx1.generators.keys()).copied().collect();
    for &k in &all {
        let src = cx0.generators.get(&k).cloned().unwrap_or_default();
        let dst = cx1.generators.get(&k).cloned().unwrap_or_default();
        let mut m = Gf2Matrix::zeros(dst.len(), src.len());
        for (c, x) in src.iter().enumerate() {
            for (r, y) in dst.iter().enumerate() {
                let sigma = counts.get(&(x.id, y.id)).ok_or(Error::MissingCount(x.id, y.id))?;
                m.set(r, c, sigma % 2 == 1);
            }
        }
        degrees.insert(k, m);
    }
    let psi = |k: i64| degrees.get(&k).cloned().unwrap_or_else(|| Gf2Matrix::zeros(cx1.rank_of(k), cx0.rank_of(k)));
    for &k in &all {
        let lhs = cx1.boundary(k).mul(&psi(k));
        let rhs = psi(k - 1).mul(&cx0.boundary(k));
        if let Some((row, col)) = lhs.first_difference(&rhs) {
            return Err(Error::ChainMap { degree: k, row, col });
        }
    }
    let unitriangular = degrees.values().all(Gf2Matrix::is_upper_unitriangular);
    let inverse: Option<BTreeMap<i64, Gf2Matrix>> = if unitriangular {
        degrees.iter().map(|(k, m)| m.unitriangular_inverse().map(|i| (*k, i))).collect()
    } else {
        None
    };
    let homology_isomorphism = match &inverse {
        Some(inv) => {
            let inv_of = |k: i64| inv.get(&k).cloned().unwrap_or_else(|| Gf2Matrix::zeros(cx0.rank_of(k), cx1.rank_of(k)));
            let products_identity = degrees.iter().all(|(k, m)| m.mul(&inv[k]) == Gf2Matrix::identity(m.rows()) && inv[k].mul(m) == Gf2Matrix::identity(m.cols()));
            let chain = all.iter().all(|&k| cx0.boundary(k).mul(&inv_of(k)) == inv_of(k - 1).mul(&cx1.boundary(k)));
            products_identity && chain
        }
        None => false,
    };
    let identity = degrees.values().all(|m| *m == Gf2Matrix::identity(m.rows()) && m.rows() == m.cols());
    Ok(ContinuationMap {
        degrees,
        unitriangular,
        inverse,
        homology_isomorphism,
        identity,
    })
}
