//! Householder QR that skips linearly dependent columns.
//!
//! Columns are visited in their original order, so earlier columns always win
//! over later ones when a dependency is found. A column is declared dependent
//! when the norm of its part orthogonal to the retained columns falls below
//! `RANK_TOL` times the larger of the largest pivot so far and the column's
//! own norm.

use nalgebra::{DMatrix, DVector};

pub(crate) const RANK_TOL: f64 = 1e-10;

struct Reflector {
    start: usize,
    v: Vec<f64>,
    beta: f64,
}

impl Reflector {
    fn apply(&self, x: &mut [f64]) {
        let tail = &mut x[self.start..];
        let dot: f64 = self.v.iter().zip(tail.iter()).map(|(a, b)| a * b).sum();
        let s = self.beta * dot;
        for (t, v) in tail.iter_mut().zip(self.v.iter()) {
            *t -= s * v;
        }
    }
}

pub(crate) struct Qr {
    nrows: usize,
    reflectors: Vec<Reflector>,
    /// Upper triangular factor restricted to the retained columns.
    r: DMatrix<f64>,
    pub retained: Vec<usize>,
    pub dropped: Vec<usize>,
}

impl Qr {
    pub fn new(a: &DMatrix<f64>) -> Qr {
        let (n, k) = a.shape();
        let mut cols: Vec<Vec<f64>> = (0..k).map(|j| a.column(j).iter().copied().collect()).collect();
        let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
        let mut reflectors: Vec<Reflector> = Vec::new();
        let mut retained = Vec::new();
        let mut dropped = Vec::new();
        let mut max_pivot: f64 = 0.0;

        for j in 0..k {
            let rank = reflectors.len();
            if rank >= n {
                dropped.push(j);
                continue;
            }
            // earlier reflectors were already applied eagerly to every later column
            let tail_norm = norm(&cols[j][rank..]);
            let tol = RANK_TOL * max_pivot.max(norms[j]);
            if tail_norm <= tol || tail_norm == 0.0 {
                dropped.push(j);
                continue;
            }
            let x0 = cols[j][rank];
            let alpha = if x0 >= 0.0 { -tail_norm } else { tail_norm };
            let mut v: Vec<f64> = cols[j][rank..].to_vec();
            v[0] -= alpha;
            let vtv: f64 = v.iter().map(|x| x * x).sum();
            let refl = Reflector { start: rank, v, beta: 2.0 / vtv };
            for col in cols.iter_mut().skip(j) {
                refl.apply(col);
            }
            max_pivot = max_pivot.max(tail_norm);
            reflectors.push(refl);
            retained.push(j);
        }

        let p = retained.len();
        let mut r = DMatrix::zeros(p, p);
        for (cc, &j) in retained.iter().enumerate() {
            for rr in 0..=cc {
                r[(rr, cc)] = cols[j][rr];
            }
        }
        Qr { nrows: n, reflectors, r, retained, dropped }
    }

    pub fn rank(&self) -> usize {
        self.retained.len()
    }

    /// Q'y.
    pub fn qt_mul(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.nrows);
        let mut out = y.to_vec();
        for refl in &self.reflectors {
            refl.apply(&mut out);
        }
        out
    }

    /// Least-squares coefficients on the retained columns.
    pub fn solve(&self, y: &[f64]) -> DVector<f64> {
        let qty = self.qt_mul(y);
        let p = self.rank();
        let rhs = DVector::from_column_slice(&qty[..p]);
        self.r
            .solve_upper_triangular(&rhs)
            .expect("retained pivots are nonzero")
    }

    /// (R'R)^{-1} = (X'X)^{-1} on the retained columns.
    pub fn bread(&self) -> DMatrix<f64> {
        let p = self.rank();
        let rinv = self
            .r
            .solve_upper_triangular(&DMatrix::identity(p, p))
            .expect("retained pivots are nonzero");
        &rinv * rinv.transpose()
    }
}

fn norm(x: &[f64]) -> f64 {
    // scaled to avoid overflow on large interaction columns
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let s: f64 = x.iter().map(|v| (v / scale).powi(2)).sum();
    scale * s.sqrt()
}
