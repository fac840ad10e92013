//! Small dense vector and matrix helpers.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{self, Purpose};

/// A model parameter or gradient in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &[f64]) {
        for (a, b) in self.0.iter_mut().zip(x) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.0 {
            *a *= alpha;
        }
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &[f64]) -> Result<ParamVector> {
        check_dim(self.dim(), other.len())?;
        Ok(ParamVector(
            self.0.iter().zip(other).map(|(a, b)| a - b).collect(),
        ))
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symmetric `d x d` matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        SymMatrix {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    /// `(1/m) * sum_i x_i x_i^T` over the given rows.
    pub fn scaled_gram<'a, I>(dim: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut g = SymMatrix::zeros(dim);
        let mut count = 0usize;
        for x in rows {
            count += 1;
            for i in 0..dim {
                for j in i..dim {
                    g.data[i * dim + j] += x[i] * x[j];
                }
            }
        }
        let inv = if count == 0 { 0.0 } else { 1.0 / count as f64 };
        for i in 0..dim {
            for j in i..dim {
                let v = g.data[i * dim + j] * inv;
                g.data[i * dim + j] = v;
                g.data[j * dim + i] = v;
            }
        }
        g
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] += v;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks(self.dim)
            .map(|row| dot(row, x))
            .collect()
    }

    /// Largest eigenvalue of a positive semidefinite matrix by power iteration.
    ///
    /// Stops when the eigen-residual `||A v - lambda v||` drops below
    /// `rel_tol * lambda`. The starting vector is drawn from a fixed stream so
    /// the result is reproducible.
    pub fn largest_eigenvalue(&self, rel_tol: f64, max_iter: usize) -> Result<f64> {
        let d = self.dim;
        if d == 0 {
            return Ok(0.0);
        }
        let mut rng = rng::stream(0, Purpose::PowerIteration, d as u64, 0);
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut v);
        for _ in 0..max_iter {
            let av = self.mul_vec(&v);
            let lambda = dot(&v, &av);
            let av_norm = dot(&av, &av).sqrt();
            if av_norm == 0.0 {
                return Ok(0.0);
            }
            let residual = av
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - lambda * b).powi(2))
                .sum::<f64>()
                .sqrt();
            if residual <= rel_tol * lambda.abs() {
                return Ok(lambda);
            }
            v = av.into_iter().map(|a| a / av_norm).collect();
        }
        Err(Error::Numerical(format!(
            "power iteration did not converge within {max_iter} steps"
        )))
    }

    /// Solves `A x = b` for symmetric positive definite `A` by Cholesky.
    pub fn solve_spd(&self, b: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        check_dim(d, b.len())?;
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l[i * d + k] * l[j * d + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::Numerical(
                            "matrix is not positive definite".into(),
                        ));
                    }
                    l[i * d + i] = s.sqrt();
                } else {
                    l[i * d + j] = s / l[j * d + j];
                }
            }
        }
        let mut y = vec![0.0; d];
        for i in 0..d {
            let s: f64 = (0..i).map(|k| l[i * d + k] * y[k]).sum();
            y[i] = (b[i] - s) / l[i * d + i];
        }
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            let s: f64 = (i + 1..d).map(|k| l[k * d + i] * x[k]).sum();
            x[i] = (y[i] - s) / l[i * d + i];
        }
        Ok(x)
    }
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}
