//! Small dense helpers: banded LU without pivoting and vector norms.

use crate::error::{Error, Result};

/// Band matrix with equal lower and upper bandwidth, factorized in place.
///
/// Intended for diagonally dominant matrices, where elimination without
/// pivoting is stable.
#[derive(Debug, Clone)]
pub(crate) struct BandedLu {
    n: usize,
    bw: usize,
    data: Vec<f64>,
    factored: bool,
}

impl BandedLu {
    pub(crate) fn zeros(n: usize, bw: usize) -> Self {
        BandedLu {
            n,
            bw,
            data: vec![0.0; n * (2 * bw + 1)],
            factored: false,
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.bw >= i && j <= i + self.bw);
        i * (2 * self.bw + 1) + j + self.bw - i
    }

    pub(crate) fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub(crate) fn factor(&mut self) -> Result<()> {
        let (n, bw) = (self.n, self.bw);
        for k in 0..n {
            let pivot = self.data[self.idx(k, k)];
            if pivot.abs() < 1e-300 || !pivot.is_finite() {
                return Err(Error::Internal(format!("zero pivot at row {k} of band matrix")));
            }
            let end = n.min(k + bw + 1);
            for i in k + 1..end {
                let ik = self.idx(i, k);
                if self.data[ik] == 0.0 {
                    continue;
                }
                let l = self.data[ik] / pivot;
                self.data[ik] = l;
                for j in k + 1..end {
                    let kj = self.idx(k, j);
                    let ij = self.idx(i, j);
                    self.data[ij] -= l * self.data[kj];
                }
            }
        }
        self.factored = true;
        Ok(())
    }

    /// Overwrite `b` with `A⁻¹ b`.
    pub(crate) fn solve(&self, b: &mut [f64]) {
        debug_assert!(self.factored);
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = b[i];
            for j in lo..i {
                s -= self.data[self.idx(i, j)] * b[j];
            }
            b[i] = s;
        }
        for i in (0..n).rev() {
            let hi = n.min(i + bw + 1);
            let mut s = b[i];
            for j in i + 1..hi {
                s -= self.data[self.idx(i, j)] * b[j];
            }
            b[i] = s / self.data[self.idx(i, i)];
        }
    }
}

pub(crate) fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
