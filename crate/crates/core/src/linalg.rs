//! Spectral norms by two independent routes: a full singular value
//! decomposition and power iteration on `AᵀA` with Rayleigh-Ritz extraction
//! over the span of the iterates (Lanczos, fully reorthogonalized).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const POWER_MAX_ITER: usize = 5000;
pub const POWER_TOL: f64 = 1e-12;
const RESTART_SEED: u64 = 0x5eed_2b0b;
/// A new Lanczos direction this small relative to the Ritz value marks an
/// invariant subspace reached through rounding.
const BREAKDOWN_TOL: f64 = 1e-8;

/// Largest singular value from the full decomposition.
pub fn spectral_norm_svd(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerResult {
    pub norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restarted: bool,
    /// Unit right singular vector estimate.
    #[serde(skip)]
    pub vector: DVector<f64>,
}

struct Run {
    result: PowerResult,
    /// The iterates spanned an invariant subspace smaller than the space.
    stagnant: bool,
}

/// Top Ritz pair of the tridiagonal `(alpha, beta)`.
fn top_ritz(alpha: &[f64], beta: &[f64]) -> (f64, DVector<f64>) {
    let k = alpha.len();
    let t = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    let e = SymmetricEigen::new(t);
    let top = e.eigenvalues.imax();
    (e.eigenvalues[top], e.eigenvectors.column(top).into_owned())
}

fn run(a: &DMatrix<f64>, v: DVector<f64>, max_iter: usize) -> Run {
    let n = a.ncols();
    let vn = v.norm();
    if vn == 0.0 {
        let result = PowerResult { norm: 0.0, iterations: 0, converged: false, restarted: false, vector: v };
        return Run { result, stagnant: true };
    }
    let mut basis: Vec<DVector<f64>> = vec![v / vn];
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    let mut iterations = 0;
    let mut converged = false;
    let mut stagnant = false;
    let (mut theta, mut s) = (0.0, DVector::zeros(0));
    while iterations < max_iter.min(n) {
        iterations += 1;
        let q = basis.last().expect("nonempty basis");
        let mut w = a.tr_mul(&(a * q));
        alpha.push(q.dot(&w));
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        (theta, s) = top_ritz(&alpha, &beta);
        let b = w.norm();
        let residual = b * s[s.len() - 1].abs();
        if residual <= POWER_TOL * theta.abs() || b <= BREAKDOWN_TOL * theta.abs() {
            converged = true;
            stagnant = b <= BREAKDOWN_TOL * theta.abs() && basis.len() < n;
            break;
        }
        if basis.len() == n {
            converged = true;
            break;
        }
        beta.push(b);
        basis.push(w / b);
    }
    let mut vector = DVector::zeros(n);
    for (b, c) in basis.iter().zip(s.iter()) {
        vector.axpy(*c, b, 1.0);
    }
    let vn = vector.norm();
    if vn > 0.0 {
        vector /= vn;
    }
    let norm = (a * &vector).norm().max(theta.max(0.0).sqrt());
    let result = PowerResult { norm, iterations, converged, restarted: false, vector };
    Run { result, stagnant: stagnant || norm == 0.0 }
}

/// Power iteration on `AᵀA` from the all-ones vector and again from a seeded
/// random vector; the larger estimate wins. Symmetric inputs often leave the
/// all-ones iterates inside an invariant subspace that misses the top
/// direction, which no convergence test on that subspace can detect.
/// `restarted` reports that the second start won or the first stalled.
pub fn spectral_norm_power(a: &DMatrix<f64>) -> PowerResult {
    spectral_norm_power_with(a, POWER_MAX_ITER)
}

pub fn spectral_norm_power_with(a: &DMatrix<f64>, max_iter: usize) -> PowerResult {
    let cols = a.ncols();
    if a.is_empty() {
        return PowerResult {
            norm: 0.0,
            iterations: 0,
            converged: true,
            restarted: false,
            vector: DVector::zeros(cols),
        };
    }
    let Run { result: first, stagnant } = run(a, DVector::from_element(cols, 1.0), max_iter);
    let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
    let start = DVector::from_fn(cols, |_, _| rng.gen_range(-1.0..1.0));
    let second = run(a, start, max_iter).result;
    let iterations = first.iterations + second.iterations;
    let converged = first.converged && second.converged;
    let restarted = stagnant || second.norm > first.norm;
    let best = if first.norm >= second.norm { first } else { second };
    PowerResult { iterations, converged, restarted, ..best }
}

/// Both routes side by side.
#[derive(Debug, Clone, Serialize)]
pub struct NormPair {
    pub svd: f64,
    pub power: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restarted: bool,
    pub rows: usize,
    pub cols: usize,
}

impl NormPair {
    pub fn of(a: &DMatrix<f64>) -> Self {
        let p = spectral_norm_power(a);
        Self {
            svd: spectral_norm_svd(a),
            power: p.norm,
            iterations: p.iterations,
            converged: p.converged,
            restarted: p.restarted,
            rows: a.nrows(),
            cols: a.ncols(),
        }
    }

    pub fn relative_gap(&self) -> f64 {
        let scale = self.svd.abs().max(self.power.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.svd - self.power).abs() / scale
        }
    }
}
