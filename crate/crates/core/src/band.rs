//! Banded LU with partial pivoting.

/// Square matrix with `kl` sub- and `ku` superdiagonals, stored by rows with room for
/// `kl` extra superdiagonals of pivoting fill.
#[derive(Clone, Debug)]
pub(crate) struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

/// Factorization failure: zero pivot in column `col`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ZeroPivot {
    #[allow(dead_code)]
    pub col: usize,
}

pub(crate) struct BandLu {
    m: BandMatrix,
    /// Row exchanged with row `k` at elimination step `k`.
    pivots: Vec<usize>,
    /// `max |u_ii| / min |u_ii|`, a cheap conditioning indicator.
    pub pivot_ratio: f64,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.ku + self.kl, "({i}, {j}) outside the band");
        i * self.width + (j + self.kl - i)
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            j + self.kl >= i && j <= i + self.ku,
            "entry ({i}, {j}) outside bandwidths ({}, {})",
            self.kl,
            self.ku
        );
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl < i || j > i + self.ku + self.kl {
            return 0.0;
        }
        self.data[self.slot(i, j)]
    }

    #[cfg(test)]
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.kl);
                let hi = (i + self.ku + self.kl).min(self.n - 1);
                (lo..=hi).map(|j| self.get(i, j) * x[j]).sum()
            })
            .collect()
    }

    pub fn lu(mut self) -> Result<BandLu, ZeroPivot> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let mut pivots = Vec::with_capacity(n);
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let (mut umax, mut umin) = (0.0f64, f64::INFINITY);
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.get(k, k).abs();
            for i in k + 1..=last {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= 1e-300 || best < 1e-15 * scale {
                return Err(ZeroPivot { col: k });
            }
            umax = umax.max(best);
            umin = umin.min(best);
            let jmax = (k + kl + ku).min(n - 1);
            pivots.push(p);
            if p != k {
                for j in k..=jmax {
                    let (a, b) = (self.slot(k, j), self.slot(p, j));
                    self.data.swap(a, b);
                }
            }
            let piv = self.get(k, k);
            for i in k + 1..=last {
                let si = self.slot(i, k);
                let l = self.data[si] / piv;
                if l == 0.0 {
                    continue;
                }
                self.data[si] = l;
                for j in k + 1..=jmax {
                    let ukj = self.data[self.slot(k, j)];
                    if ukj != 0.0 {
                        let s = self.slot(i, j);
                        self.data[s] -= l * ukj;
                    }
                }
            }
        }
        Ok(BandLu {
            m: self,
            pivots,
            pivot_ratio: umax / umin,
        })
    }
}

impl BandLu {
    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let m = &self.m;
        let n = m.n;
        let mut y = b.to_vec();
        // interchanges interleaved with the Gauss transforms, as they were applied
        for k in 0..n {
            y.swap(k, self.pivots[k]);
            let last = (k + m.kl).min(n - 1);
            let yk = y[k];
            if yk != 0.0 {
                for i in k + 1..=last {
                    y[i] -= m.get(i, k) * yk;
                }
            }
        }
        for i in (0..n).rev() {
            let jmax = (i + m.kl + m.ku).min(n - 1);
            let mut acc = y[i];
            for j in i + 1..=jmax {
                acc -= m.get(i, j) * y[j];
            }
            y[i] = acc / m.get(i, i);
        }
        y
    }
}
