//! Dense square complex matrices, sized for per-subcarrier covariance work.

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    n: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![Complex64::new(0.0, 0.0); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(n: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::shape(format!(
                "{} entries for a {n}x{n} matrix",
                data.len()
            )));
        }
        Ok(Self { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn conj_transpose(&self) -> Self {
        let mut out = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out[(j, i)] = self[(i, j)].conj();
            }
        }
        out
    }

    /// `(A + A^H) / 2`.
    pub fn hermitian_part(&self) -> Self {
        let h = self.conj_transpose();
        let data = self
            .data
            .iter()
            .zip(&h.data)
            .map(|(a, b)| (a + b) * 0.5)
            .collect();
        Self { n: self.n, data }
    }

    /// Accumulate `v v^H`.
    pub fn add_outer(&mut self, v: &[Complex64]) {
        debug_assert_eq!(v.len(), self.n);
        for i in 0..self.n {
            let vi = v[i];
            let row = &mut self.data[i * self.n..(i + 1) * self.n];
            for (r, vj) in row.iter_mut().zip(v) {
                *r += vi * vj.conj();
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add_diagonal(&mut self, d: f64) {
        for i in 0..self.n {
            self[(i, i)] += d;
        }
    }

    pub fn matvec(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.data
            .chunks_exact(self.n)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self[(i, k)];
                if a == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let src = &other.data[k * n..(k + 1) * n];
                let dst = &mut out.data[i * n..(i + 1) * n];
                for (d, b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// Gauss-Jordan inverse with partial pivoting.
    pub fn inverse(&self) -> Result<Self> {
        let n = self.n;
        let mut a = self.clone();
        let mut inv = Self::identity(n);
        let scale = self.data.iter().map(|x| x.norm()).fold(0.0, f64::max);
        let tol = scale.max(f64::MIN_POSITIVE) * n as f64 * f64::EPSILON;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[(i, col)].norm().total_cmp(&a[(j, col)].norm()))
                .expect("non-empty range");
            let p = a[(pivot, col)];
            if !(p.norm() > tol) {
                return Err(Error::Numeric(format!(
                    "matrix is singular to working precision (pivot {:e} at column {col})",
                    p.norm()
                )));
            }
            if pivot != col {
                a.swap_rows(pivot, col);
                inv.swap_rows(pivot, col);
            }
            let recip = p.inv();
            for j in 0..n {
                a[(col, j)] *= recip;
                inv[(col, j)] *= recip;
            }
            for i in 0..n {
                if i == col {
                    continue;
                }
                let f = a[(i, col)];
                if f == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..n {
                    let (ac, ic) = (a[(col, j)], inv[(col, j)]);
                    a[(i, j)] -= f * ac;
                    inv[(i, j)] -= f * ic;
                }
            }
        }
        Ok(inv)
    }

    fn swap_rows(&mut self, i: usize, j: usize) {
        for k in 0..self.n {
            self.data.swap(i * self.n + k, j * self.n + k);
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for CMatrix {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.n + j]
    }
}
