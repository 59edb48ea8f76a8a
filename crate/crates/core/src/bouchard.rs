//! Analytic lower bound on the Gaussian-posterior ELBO using Bouchard's
//! majorization of the softmax normalizer, and the variational EM
//! iteration that tightens it for fixed item parameters.
//!
//! The bound replaces `log sum_p exp(x_p)` by
//! `a + sum_p log(1 + exp(x_p - a))` and each logistic term by its
//! Jaakkola-Jordan quadratic upper bound with width `xi_p`. Every update
//! below is the exact maximizer of the bound in its own block, so cycling
//! them never decreases the bound.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ModelParams, Posterior};
use crate::numeric::{sigmoid, softplus};

/// Default number of EM cycles used during evaluation.
pub const DEFAULT_EM_ITERS: usize = 100;

const LAMBDA_TAYLOR_CUTOFF: f64 = 1e-6;
const LAMBDA_PRIME_TAYLOR_CUTOFF: f64 = 1e-3;

/// Jaakkola-Jordan coefficient `(sigmoid(xi) - 1/2) / (2 xi)`, extended
/// continuously by its limit `1/8` at zero. Even in `xi`, values in `(0, 1/8]`.
pub fn lambda_jj(xi: f64) -> f64 {
    let x = xi.abs();
    if x < LAMBDA_TAYLOR_CUTOFF {
        0.125 - x * x / 96.0
    } else {
        // tanh(x/2)/2 == sigmoid(x) - 1/2, without the cancellation
        (0.5 * x).tanh() / (4.0 * x)
    }
}

/// Derivative of [`lambda_jj`].
pub fn lambda_jj_prime(xi: f64) -> f64 {
    if xi.abs() < LAMBDA_PRIME_TAYLOR_CUTOFF {
        -xi / 48.0 + xi.powi(3) / 240.0
    } else {
        let s = sigmoid(xi);
        s * (1.0 - s) / (2.0 * xi) - lambda_jj(xi) / xi
    }
}

/// Auxiliary variational parameters of the bound: the shift `a` and one
/// non-negative width per item.
#[derive(Debug, Clone, PartialEq)]
pub struct BouchardState {
    pub a: f64,
    pub xi: DVector<f64>,
}

impl BouchardState {
    pub fn new(a: f64, xi: DVector<f64>) -> Result<Self> {
        if !a.is_finite() || xi.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::numeric("Bouchard parameters must be finite with xi >= 0"));
        }
        Ok(Self { a, xi })
    }

    /// EM starting point: `a = 0`, every width 1.
    pub fn initial(num_items: usize) -> Self {
        Self {
            a: 0.0,
            xi: DVector::from_element(num_items, 1.0),
        }
    }
}

fn check_shapes(params: &ModelParams, q: Option<&Posterior>, b: Option<&BouchardState>) -> Result<()> {
    if let Some(q) = q {
        if q.dim() != params.dim() {
            return Err(Error::arg(format!(
                "posterior dimension {} does not match model dimension {}",
                q.dim(),
                params.dim()
            )));
        }
    }
    if let Some(b) = b {
        if b.xi.len() != params.num_items() {
            return Err(Error::arg(format!(
                "{} widths supplied for {} items",
                b.xi.len(),
                params.num_items()
            )));
        }
    }
    Ok(())
}

/// `psi_p Sigma psi_p^T` for every item.
fn item_variances(params: &ModelParams, q: &Posterior) -> Vec<f64> {
    (0..params.num_items())
        .map(|p| {
            let row: Vec<f64> = params.psi.row(p).iter().copied().collect();
            q.quad_form(&row)
        })
        .collect()
}

/// The Bouchard lower bound on the session ELBO at `(q, b)`.
pub fn bouchard_bound(params: &ModelParams, views: &[usize], q: &Posterior, b: &BouchardState) -> Result<f64> {
    check_shapes(params, Some(q), Some(b))?;
    params.check_views(views)?;
    let prior_entropy = q.prior_entropy_terms()?;

    let t = views.len() as f64;
    let x = &params.psi * &q.mu + &params.rho;
    let data: f64 = views.iter().map(|&v| x[v]).sum();
    let var = item_variances(params, q);

    let mut majorizer = b.a;
    for p in 0..params.num_items() {
        let xi = b.xi[p];
        let d = x[p] - b.a;
        majorizer += 0.5 * (d - xi) + lambda_jj(xi) * (d * d + var[p] - xi * xi) + softplus(xi);
    }
    let bound = data - t * majorizer + prior_entropy;
    if !bound.is_finite() {
        return Err(Error::numeric("Bouchard bound is not finite"));
    }
    Ok(bound)
}

/// Covariance update: the inverse of `I + 2T sum_p lambda(xi_p) psi_p^T psi_p`.
pub fn em_update_sigma(params: &ModelParams, session_len: usize, b: &BouchardState) -> Result<DMatrix<f64>> {
    check_shapes(params, None, Some(b))?;
    let k = params.dim();
    let scale = 2.0 * session_len as f64;
    let weights = b.xi.map(lambda_jj) * scale;
    let mut weighted = params.psi.clone();
    for (mut row, w) in weighted.row_iter_mut().zip(weights.iter()) {
        row *= *w;
    }
    let precision = DMatrix::identity(k, k) + params.psi.transpose() * weighted;
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::numeric("posterior precision is not positive definite"))?;
    let sigma = chol.inverse();
    Ok((&sigma + sigma.transpose()) * 0.5)
}

/// Mean update:
/// `Sigma (sum_t psi_{v_t}^T - T sum_p {1/2 + 2 (rho_p - a) lambda(xi_p)} psi_p^T)`.
pub fn em_update_mu(
    params: &ModelParams,
    views: &[usize],
    sigma: &DMatrix<f64>,
    b: &BouchardState,
) -> Result<DVector<f64>> {
    check_shapes(params, None, Some(b))?;
    params.check_views(views)?;
    let k = params.dim();
    if sigma.nrows() != k || sigma.ncols() != k {
        return Err(Error::arg("covariance shape does not match model dimension"));
    }
    let t = views.len() as f64;
    let mut rhs = DVector::zeros(k);
    for &v in views {
        rhs += params.psi.row(v).transpose();
    }
    for p in 0..params.num_items() {
        let coeff = 0.5 + 2.0 * (params.rho[p] - b.a) * lambda_jj(b.xi[p]);
        rhs -= params.psi.row(p).transpose() * (t * coeff);
    }
    Ok(sigma * rhs)
}

/// Shift update:
/// `(-1 + P/2 + 2 sum_p lambda(xi_p)(psi_p mu + rho_p)) / (2 sum_p lambda(xi_p))`.
pub fn em_update_a(params: &ModelParams, q: &Posterior, b: &BouchardState) -> Result<f64> {
    check_shapes(params, Some(q), Some(b))?;
    let x = &params.psi * &q.mu + &params.rho;
    let lambdas = b.xi.map(lambda_jj);
    let numer = -1.0 + 0.5 * params.num_items() as f64 + 2.0 * lambdas.dot(&x);
    let denom = 2.0 * lambdas.sum();
    Ok(numer / denom)
}

/// Width update: `xi_p = sqrt(psi_p Sigma psi_p^T + (psi_p mu + rho_p - a)^2)`.
pub fn em_update_xi(params: &ModelParams, q: &Posterior, a: f64) -> Result<DVector<f64>> {
    check_shapes(params, Some(q), None)?;
    let x = &params.psi * &q.mu + &params.rho;
    let var = item_variances(params, q);
    let mut xi = DVector::zeros(params.num_items());
    for p in 0..params.num_items() {
        // round-off can push a PSD quadratic form a hair below zero
        let v = if var[p] < 0.0 && var[p] > -1e-12 { 0.0 } else { var[p] };
        let radicand = v + (x[p] - a).powi(2);
        if !(radicand >= 0.0) {
            return Err(Error::numeric(format!(
                "negative radicand {radicand} in width update for item {p}"
            )));
        }
        xi[p] = radicand.sqrt();
    }
    Ok(xi)
}

/// Output of [`em_infer`].
#[derive(Debug, Clone)]
pub struct EmResult {
    pub posterior: Posterior,
    pub state: BouchardState,
    /// Bound value after each cycle.
    pub trace: Vec<f64>,
}

impl EmResult {
    pub fn final_bound(&self) -> f64 {
        *self.trace.last().expect("trace has at least one entry")
    }
}

/// Runs exactly `iters` EM cycles, each updating `xi`, then `Sigma`, then
/// `mu`, then `a`. Without `init` it starts from `mu = 0`, `Sigma = I`,
/// `a = 0`, `xi = 1`. An empty history is allowed and yields the prior.
pub fn em_infer(
    params: &ModelParams,
    views: &[usize],
    iters: usize,
    init: Option<(Posterior, BouchardState)>,
) -> Result<EmResult> {
    if iters == 0 {
        return Err(Error::arg("EM needs at least one iteration"));
    }
    params.check_views(views)?;
    let (mut q, mut b) =
        init.unwrap_or_else(|| (Posterior::prior(params.dim()), BouchardState::initial(params.num_items())));
    check_shapes(params, Some(&q), Some(&b))?;

    let at = |i: usize| move |e: Error| match e {
        Error::Numeric(msg) => Error::Numeric(format!("EM iteration {i}: {msg}")),
        other => other,
    };

    let mut trace = Vec::with_capacity(iters);
    for i in 0..iters {
        b.xi = em_update_xi(params, &q, b.a).map_err(at(i))?;
        let sigma = em_update_sigma(params, views.len(), &b).map_err(at(i))?;
        let mu = em_update_mu(params, views, &sigma, &b).map_err(at(i))?;
        q = Posterior::full(mu, sigma)?;
        b.a = em_update_a(params, &q, &b).map_err(at(i))?;
        trace.push(bouchard_bound(params, views, &q, &b).map_err(at(i))?);
    }
    Ok(EmResult {
        posterior: q,
        state: b,
        trace,
    })
}
