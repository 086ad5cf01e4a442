//! Symmetric banded matrices and their Cholesky factorization.

use nalgebra::DVector;

/// Lower band of a symmetric `n × n` matrix with half-bandwidth `p`.
#[derive(Debug, Clone)]
pub struct Banded {
    n: usize,
    p: usize,
    /// Row-major: entry `(i, j)`, `i − p ≤ j ≤ i`, at `i·(p+1) + (j + p − i)`.
    data: Vec<f64>,
}

impl Banded {
    pub fn zeros(n: usize, p: usize) -> Self {
        Self {
            n,
            p,
            data: vec![0.0; n * (p + 1)],
        }
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.p);
        i * (self.p + 1) + (j + self.p - i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.p {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` to entry `(i, j)` (and implicitly `(j, i)`).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// In-place Cholesky `A = L Lᵀ`; `None` if a pivot is not positive.
    pub fn cholesky(mut self) -> Option<BandedCholesky> {
        let (n, p) = (self.n, self.p);
        for j in 0..n {
            let lo = j.saturating_sub(p);
            let mut d = self.data[self.idx(j, j)];
            for k in lo..j {
                let l = self.data[self.idx(j, k)];
                d -= l * l;
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let d = d.sqrt();
            let jj = self.idx(j, j);
            self.data[jj] = d;
            for i in j + 1..(j + p + 1).min(n) {
                let lo = i.saturating_sub(p);
                let mut s = self.data[self.idx(i, j)];
                for k in lo..j {
                    s -= self.data[self.idx(i, k)] * self.data[self.idx(j, k)];
                }
                let ij = self.idx(i, j);
                self.data[ij] = s / d;
            }
        }
        Some(BandedCholesky { l: self })
    }
}

#[derive(Debug, Clone)]
pub struct BandedCholesky {
    l: Banded,
}

impl BandedCholesky {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let (n, p) = (self.l.n, self.l.p);
        let l = &self.l;
        let mut y = b.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(p)..i {
                s -= l.data[l.idx(i, k)] * y[k];
            }
            y[i] = s / l.data[l.idx(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + p + 1).min(n) {
                s -= l.data[l.idx(k, i)] * y[k];
            }
            y[i] = s / l.data[l.idx(i, i)];
        }
        y
    }
}
