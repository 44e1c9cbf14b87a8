//! Two-dimensional Gaussian mixtures fitted by EM.

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_EIG_FLOOR: f64 = 1e-3;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GmmError {
    #[error("need k >= 1 (got {0})")]
    ZeroComponents(usize),
    #[error("{k} components requested but only {distinct} distinct points")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("component {0} lost all responsibility twice")]
    EmptyComponent(usize),
    #[error("non-finite sample")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: [f64; 2],
    /// Row-major, symmetric.
    pub cov: [[f64; 2]; 2],
}

impl Component {
    fn mean_v(&self) -> Vector2<f64> {
        Vector2::new(self.mean[0], self.mean[1])
    }

    fn cov_m(&self) -> Matrix2<f64> {
        Matrix2::new(self.cov[0][0], self.cov[0][1], self.cov[1][0], self.cov[1][1])
    }

    pub fn log_pdf(&self, x: &[f64; 2]) -> f64 {
        let c = self.cov;
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        let dx = x[0] - self.mean[0];
        let dy = x[1] - self.mean[1];
        // inverse of a 2×2 symmetric matrix
        let q = (c[1][1] * dx * dx - 2.0 * c[0][1] * dx * dy + c[0][0] * dy * dy) / det;
        -LN_2PI - 0.5 * det.ln() - 0.5 * q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm2D {
    pub components: Vec<Component>,
    /// Log-likelihood of the data after initialisation and after every M-step.
    pub log_likelihood_trace: Vec<f64>,
    pub eig_floor: f64,
    pub n_samples: usize,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Clip the eigenvalues of a symmetric matrix from below. This is also the constrained
/// maximiser of the Gaussian likelihood, so EM stays monotone.
pub fn floor_covariance(c: &Matrix2<f64>, floor: f64) -> Matrix2<f64> {
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return sym;
    }
    let l = eig.eigenvalues.map(|l| l.max(floor));
    let v = eig.eigenvectors;
    let out = v * Matrix2::from_diagonal(&l) * v.transpose();
    (out + out.transpose()) * 0.5
}

impl Gmm2D {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn log_pdf(&self, x: &[f64; 2]) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + c.log_pdf(x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn pdf(&self, x: &[f64; 2]) -> f64 {
        self.components.iter().map(|c| c.weight * c.log_pdf(x).exp()).sum()
    }

    pub fn log_likelihood(&self, rows: &[[f64; 2]]) -> f64 {
        rows.iter().map(|x| self.log_pdf(x)).sum()
    }

    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihood_trace.last().unwrap_or(&f64::NAN)
    }

    /// Free parameters: k−1 weights, 2k means, 3k covariance entries.
    pub fn num_params(&self) -> usize {
        6 * self.k() - 1
    }

    pub fn bic(&self) -> f64 {
        -2.0 * self.final_log_likelihood() + self.num_params() as f64 * (self.n_samples as f64).ln()
    }

    /// Fixed-point iteration `x ← (Σ rₖ Σₖ⁻¹)⁻¹ Σ rₖ Σₖ⁻¹ μₖ` that climbs to a nearby mode.
    pub fn climb(&self, start: [f64; 2], iters: usize) -> [f64; 2] {
        let inv: Vec<Matrix2<f64>> = self
            .components
            .iter()
            .map(|c| c.cov_m().try_inverse().unwrap_or_else(Matrix2::identity))
            .collect();
        let mut x = start;
        for _ in 0..iters {
            let logs: Vec<f64> = self.components.iter().map(|c| c.weight.ln() + c.log_pdf(&x)).collect();
            let norm = log_sum_exp(&logs);
            if !norm.is_finite() {
                break;
            }
            let mut a = Matrix2::zeros();
            let mut b = Vector2::zeros();
            for (k, c) in self.components.iter().enumerate() {
                let r = (logs[k] - norm).exp();
                a += inv[k] * r;
                b += inv[k] * c.mean_v() * r;
            }
            let Some(ai) = a.try_inverse() else { break };
            let next = ai * b;
            let step = (next[0] - x[0]).abs() + (next[1] - x[1]).abs();
            x = [next[0], next[1]];
            if step < 1e-12 {
                break;
            }
        }
        x
    }
}

fn distinct_count(rows: &[[f64; 2]]) -> usize {
    let mut v: Vec<(u64, u64)> = rows.iter().map(|r| (r[0].to_bits(), r[1].to_bits())).collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// k-means++ seeding: first centre uniform, then proportional to squared distance.
fn seed_centers(rows: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let d2 = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut centers = vec![rows[rng.random_range(0..rows.len())]];
    let mut best: Vec<f64> = rows.iter().map(|r| d2(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = best.iter().sum();
        let mut pick = rng.random_range(0.0..total);
        let mut idx = rows.len() - 1;
        for (i, &b) in best.iter().enumerate() {
            if pick < b {
                idx = i;
                break;
            }
            pick -= b;
        }
        // a zero-weight draw can only come from rounding; skip to any unused point
        if best[idx] == 0.0 {
            idx = best.iter().position(|&b| b > 0.0).expect("enough distinct points");
        }
        let c = rows[idx];
        for (i, r) in rows.iter().enumerate() {
            best[i] = best[i].min(d2(r, &c));
        }
        centers.push(c);
    }
    centers
}

/// Weighted mean and covariance from responsibilities `resp[i]`.
fn weighted_moments(rows: &[[f64; 2]], resp: impl Fn(usize) -> f64) -> (f64, Vector2<f64>, Matrix2<f64>) {
    let mut nk = 0.0;
    let mut s = Vector2::zeros();
    for (i, r) in rows.iter().enumerate() {
        let w = resp(i);
        nk += w;
        s += Vector2::new(r[0], r[1]) * w;
    }
    let mean = s / nk;
    let mut c = Matrix2::zeros();
    for (i, r) in rows.iter().enumerate() {
        let d = Vector2::new(r[0], r[1]) - mean;
        c += d * d.transpose() * resp(i);
    }
    (nk, mean, c / nk)
}

fn component(weight: f64, mean: Vector2<f64>, cov: Matrix2<f64>) -> Component {
    Component {
        weight,
        mean: [mean[0], mean[1]],
        cov: [[cov[(0, 0)], cov[(0, 1)]], [cov[(1, 0)], cov[(1, 1)]]],
    }
}

/// Responsibilities (row-major n×k) and total log-likelihood.
fn e_step(gmm: &[Component], rows: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let k = gmm.len();
    let mut resp = vec![0.0; rows.len() * k];
    let mut ll = 0.0;
    let mut logs = vec![0.0; k];
    for (i, x) in rows.iter().enumerate() {
        for (j, c) in gmm.iter().enumerate() {
            logs[j] = c.weight.ln() + c.log_pdf(x);
        }
        let norm = log_sum_exp(&logs);
        ll += norm;
        for j in 0..k {
            resp[i * k + j] = (logs[j] - norm).exp();
        }
    }
    (resp, ll)
}

/// Fit a `k`-component mixture by EM. Stops when an iteration gains less than `tol`
/// log-likelihood or after `max_iter` M-steps.
pub fn fit_gmm(rows: &[[f64; 2]], k: usize, tol: f64, max_iter: usize, seed: u64) -> Result<Gmm2D, GmmError> {
    fit_gmm_with_floor(rows, k, tol, max_iter, seed, DEFAULT_EIG_FLOOR)
}

pub fn fit_gmm_with_floor(
    rows: &[[f64; 2]],
    k: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
    eig_floor: f64,
) -> Result<Gmm2D, GmmError> {
    if k == 0 {
        return Err(GmmError::ZeroComponents(k));
    }
    if rows.iter().any(|r| !(r[0].is_finite() && r[1].is_finite())) {
        return Err(GmmError::NonFinite);
    }
    let distinct = distinct_count(rows);
    if k > distinct {
        return Err(GmmError::TooFewDistinct { k, distinct });
    }
    let n = rows.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = seed_centers(rows, k, &mut rng);
    let (_, _, global_cov) = weighted_moments(rows, |_| 1.0);
    let global_cov = floor_covariance(&global_cov, eig_floor);

    // hard assignment to the nearest seed gives the starting parameters
    let nearest: Vec<usize> = rows
        .iter()
        .map(|r| {
            (0..k)
                .min_by(|&a, &b| {
                    let da = (r[0] - centers[a][0]).powi(2) + (r[1] - centers[a][1]).powi(2);
                    let db = (r[0] - centers[b][0]).powi(2) + (r[1] - centers[b][1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap()
        })
        .collect();
    let mut comps: Vec<Component> = (0..k)
        .map(|j| {
            let (nk, mean, cov) = weighted_moments(rows, |i| if nearest[i] == j { 1.0 } else { 0.0 });
            component(nk / n, mean, floor_covariance(&cov, eig_floor))
        })
        .collect();

    let (mut resp, mut ll) = e_step(&comps, rows);
    let mut trace = vec![ll];
    let mut reseeded = vec![false; k];
    for _ in 0..max_iter {
        let mut next = Vec::with_capacity(k);
        for j in 0..k {
            let (nk, mean, cov) = weighted_moments(rows, |i| resp[i * k + j]);
            if !(nk > 1e-10 * n) || !mean.iter().all(|v| v.is_finite()) {
                if reseeded[j] {
                    return Err(GmmError::EmptyComponent(j));
                }
                reseeded[j] = true;
                // restart on the worst-explained point with the global spread
                let worst = (0..rows.len())
                    .min_by(|&a, &b| {
                        let la: f64 = (0..k).map(|m| resp[a * k + m]).fold(0.0, f64::max);
                        let lb: f64 = (0..k).map(|m| resp[b * k + m]).fold(0.0, f64::max);
                        la.total_cmp(&lb)
                    })
                    .unwrap();
                let r = rows[worst];
                next.push(component(1.0 / k as f64, Vector2::new(r[0], r[1]), global_cov));
                continue;
            }
            next.push(component(nk / n, mean, floor_covariance(&cov, eig_floor)));
        }
        let total: f64 = next.iter().map(|c| c.weight).sum();
        for c in &mut next {
            c.weight /= total;
        }
        let (r, new_ll) = e_step(&next, rows);
        comps = next;
        resp = r;
        trace.push(new_ll);
        let gain = new_ll - ll;
        ll = new_ll;
        if gain < tol {
            break;
        }
    }
    Ok(Gmm2D {
        components: comps,
        log_likelihood_trace: trace,
        eig_floor,
        n_samples: rows.len(),
    })
}

/// BIC for each candidate `k`; entries whose fit fails are skipped.
pub fn bic_sweep(rows: &[[f64; 2]], ks: &[usize], tol: f64, max_iter: usize, seed: u64) -> Vec<(usize, f64)> {
    ks.iter()
        .filter_map(|&k| fit_gmm(rows, k, tol, max_iter, seed).ok().map(|g| (k, g.bic())))
        .collect()
}
