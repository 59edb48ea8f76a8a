//! Test-only oracles: Gauss-Hermite quadrature and a grid-searched optimal
//! Gaussian ELBO for one-dimensional latent states. Independent of the
//! library's Monte-Carlo and EM code paths.

#![allow(dead_code)]

use latent_reco::model::ModelParams;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Mutex;

/// Nodes and weights for `E[f(z)]`, `z ~ N(0, 1)` (probabilists' Hermite),
/// via the Golub-Welsch eigenvalue method. Weights sum to one.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    static CACHE: Mutex<Vec<(usize, Vec<f64>, Vec<f64>)>> = Mutex::new(Vec::new());
    let mut cache = CACHE.lock().unwrap();
    if let Some((_, x, w)) = cache.iter().find(|c| c.0 == n) {
        return (x.clone(), w.clone());
    }
    let (x, w) = golub_welsch(n);
    cache.push((n, x.clone(), w.clone()));
    (x, w)
}

fn golub_welsch(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64).sqrt();
        jacobi[(i, i - 1)] = b;
        jacobi[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `E[f(mu + sigma z)]` for scalar `z ~ N(0, 1)`.
pub fn expect_1d(mu: f64, sigma: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let (x, w) = gauss_hermite(n);
    x.iter().zip(&w).map(|(xi, wi)| wi * f(mu + sigma * xi)).sum()
}

/// `E[f(omega)]` for `omega ~ N(mu, diag(sd^2))` in two dimensions.
pub fn expect_2d(mu: [f64; 2], sd: [f64; 2], n: usize, f: impl Fn([f64; 2]) -> f64) -> f64 {
    let (x, w) = gauss_hermite(n);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += w[i] * w[j] * f([mu[0] + sd[0] * x[i], mu[1] + sd[1] * x[j]]);
        }
    }
    total
}

pub fn naive_lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn logits(params: &ModelParams, omega: &[f64]) -> Vec<f64> {
    (0..params.num_items())
        .map(|p| (0..omega.len()).map(|k| params.psi[(p, k)] * omega[k]).sum::<f64>() + params.rho[p])
        .collect()
}

/// True Gaussian-q ELBO by quadrature, K = 1.
pub fn elbo_quadrature_1d(params: &ModelParams, views: &[usize], mu: f64, sigma: f64) -> f64 {
    let t = views.len() as f64;
    let data: f64 = views.iter().map(|&v| params.psi[(v, 0)] * mu + params.rho[v]).sum();
    let e_lse = expect_1d(mu, sigma, 80, |w| naive_lse(&logits(params, &[w])));
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    data - t * e_lse - 0.5 * ln2pi - 0.5 * (mu * mu + sigma * sigma) + 0.5 * (ln2pi + 1.0 + 2.0 * sigma.ln())
}

/// True Gaussian-q ELBO by quadrature, K = 2, diagonal covariance.
pub fn elbo_quadrature_2d(params: &ModelParams, views: &[usize], mu: [f64; 2], sd: [f64; 2]) -> f64 {
    let t = views.len() as f64;
    let data: f64 = views
        .iter()
        .map(|&v| params.psi[(v, 0)] * mu[0] + params.psi[(v, 1)] * mu[1] + params.rho[v])
        .sum();
    let e_lse = expect_2d(mu, sd, 40, |w| naive_lse(&logits(params, &w)));
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    data - t * e_lse - ln2pi - 0.5 * (mu[0] * mu[0] + mu[1] * mu[1] + sd[0] * sd[0] + sd[1] * sd[1])
        + 0.5 * (2.0 * (ln2pi + 1.0) + 2.0 * (sd[0].ln() + sd[1].ln()))
}

/// `log p(views)` by quadrature over the prior, K = 1.
pub fn log_marginal_quadrature_1d(params: &ModelParams, views: &[usize]) -> f64 {
    // integrate in log space around the posterior mode for accuracy
    let log_joint = |w: f64| {
        let l = logits(params, &[w]);
        let lse = naive_lse(&l);
        views.iter().map(|&v| l[v] - lse).sum::<f64>() - 0.5 * w * w - 0.5 * (2.0 * std::f64::consts::PI).ln()
    };
    // trapezoid on a wide, fine grid
    let (lo, hi, n) = (-12.0, 12.0, 24_001);
    let h = (hi - lo) / (n - 1) as f64;
    let vals: Vec<f64> = (0..n).map(|i| log_joint(lo + i as f64 * h)).collect();
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = vals
        .iter()
        .enumerate()
        .map(|(i, v)| if i == 0 || i == n - 1 { 0.5 } else { 1.0 } * (v - m).exp())
        .sum();
    m + (s * h).ln()
}

/// `E[softmax(psi * omega + rho)]` under `N(mu, sigma^2)`, K = 1.
pub fn predictive_quadrature_1d(params: &ModelParams, mu: f64, sigma: f64) -> Vec<f64> {
    (0..params.num_items())
        .map(|p| {
            expect_1d(mu, sigma, 100, |w| {
                let l = logits(params, &[w]);
                (l[p] - naive_lse(&l)).exp()
            })
        })
        .collect()
}

/// Maximizes the quadrature ELBO over `(mu, sigma)` by a dense grid that is
/// repeatedly zoomed around its best cell. Returns `(elbo, mu, sigma)`.
pub fn optimal_elbo_1d(params: &ModelParams, views: &[usize]) -> (f64, f64, f64) {
    let (mut mu_lo, mut mu_hi) = (-6.0, 6.0);
    let (mut ls_lo, mut ls_hi) = (-6.0f64, 1.0f64);
    let mut best = (f64::NEG_INFINITY, 0.0, 1.0);
    for _ in 0..12 {
        let n = 41;
        for i in 0..n {
            let mu = mu_lo + (mu_hi - mu_lo) * i as f64 / (n - 1) as f64;
            for j in 0..n {
                let sigma = (ls_lo + (ls_hi - ls_lo) * j as f64 / (n - 1) as f64).exp();
                let v = elbo_quadrature_1d(params, views, mu, sigma);
                if v > best.0 {
                    best = (v, mu, sigma);
                }
            }
        }
        let mu_w = (mu_hi - mu_lo) / 8.0;
        let ls_w = (ls_hi - ls_lo) / 8.0;
        let ls = best.2.ln();
        (mu_lo, mu_hi) = (best.1 - mu_w, best.1 + mu_w);
        (ls_lo, ls_hi) = (ls - ls_w, ls + ls_w);
    }
    best
}

/// Random model with entries uniform in `(-scale, scale)` and random views.
pub fn random_instance(seed: u64, p: usize, k: usize, t: usize, scale: f64) -> (ModelParams, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::new(
        DMatrix::from_fn(p, k, |_, _| rng.random_range(-scale..scale)),
        DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0)),
    )
    .unwrap();
    let views = (0..t).map(|_| rng.random_range(0..p)).collect();
    (params, views)
}

