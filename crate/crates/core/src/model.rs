//! Model parameters, Gaussian posteriors and the exact probabilistic
//! quantities of the latent session model: the item softmax, the log-joint
//! of a session and its latent state, a Monte-Carlo ELBO and an
//! importance-sampled log marginal.
//!
//! A session's views are i.i.d. draws from `softmax(psi * omega + rho)` with
//! the latent state `omega ~ N(0, I_K)` shared across the session.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, standard_normal_matrix, LN_2PI};

/// Item embeddings (`psi`, one row per item) and per-item popularity shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub psi: DMatrix<f64>,
    pub rho: DVector<f64>,
}

impl ModelParams {
    pub fn new(psi: DMatrix<f64>, rho: DVector<f64>) -> Result<Self> {
        if psi.nrows() == 0 || psi.ncols() == 0 {
            return Err(Error::arg("embedding matrix must be at least 1x1"));
        }
        if psi.nrows() != rho.len() {
            return Err(Error::arg(format!(
                "embedding has {} rows but popularity shift has {} entries",
                psi.nrows(),
                rho.len()
            )));
        }
        if psi.iter().chain(rho.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric("model parameters must be finite"));
        }
        Ok(Self { psi, rho })
    }

    pub fn zeros(num_items: usize, dim: usize) -> Result<Self> {
        Self::new(DMatrix::zeros(num_items, dim), DVector::zeros(num_items))
    }

    pub fn num_items(&self) -> usize {
        self.psi.nrows()
    }

    pub fn dim(&self) -> usize {
        self.psi.ncols()
    }

    /// `psi * omega + rho`.
    pub fn logits(&self, omega: &DVector<f64>) -> Result<DVector<f64>> {
        if omega.len() != self.dim() {
            return Err(Error::arg(format!(
                "latent state has dimension {}, model expects {}",
                omega.len(),
                self.dim()
            )));
        }
        Ok(&self.psi * omega + &self.rho)
    }

    pub fn check_views(&self, views: &[usize]) -> Result<()> {
        for &v in views {
            if v >= self.num_items() {
                return Err(Error::Bounds {
                    item: v,
                    num_items: self.num_items(),
                });
            }
        }
        Ok(())
    }

    /// Plain-text form: a `P K` header, then one row per item holding the
    /// K embedding values followed by the popularity shift.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.num_items(), self.dim());
        for p in 0..self.num_items() {
            for k in 0..self.dim() {
                let _ = write!(out, "{} ", self.psi[(p, k)]);
            }
            let _ = writeln!(out, "{}", self.rho[p]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing `P K` header".into(),
        })?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: 1,
                msg: format!("bad header {header:?}"),
            })?;
        let &[p, k] = dims.as_slice() else {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header must be `P K`, got {header:?}"),
            });
        };

        let mut psi = DMatrix::zeros(p, k);
        let mut rho = DVector::zeros(p);
        for row in 0..p {
            let (idx, line) = lines.next().ok_or(Error::Parse {
                line: row + 2,
                msg: format!("expected {p} item rows, found {row}"),
            })?;
            let values: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: idx + 1,
                    msg: format!("{e}"),
                })?;
            if values.len() != k + 1 {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("expected {} values, found {}", k + 1, values.len()),
                });
            }
            for c in 0..k {
                psi[(row, c)] = values[c];
            }
            rho[row] = values[k];
        }
        if let Some((idx, _)) = lines.next() {
            return Err(Error::Parse {
                line: idx + 1,
                msg: "trailing data after item rows".into(),
            });
        }
        Self::new(psi, rho)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ParamsJson {
            num_items: self.num_items(),
            dim: self.dim(),
            psi: (0..self.num_items())
                .map(|p| self.psi.row(p).iter().copied().collect())
                .collect(),
            rho: self.rho.iter().copied().collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ParamsJson = serde_json::from_str(text)?;
        if doc.psi.len() != doc.num_items || doc.psi.iter().any(|r| r.len() != doc.dim) {
            return Err(Error::arg("embedding rows disagree with declared shape"));
        }
        let psi = DMatrix::from_fn(doc.num_items, doc.dim, |r, c| doc.psi[r][c]);
        Self::new(psi, DVector::from_vec(doc.rho))
    }

    /// Saves as JSON when the path ends in `.json`, plain text otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = if path.extension().is_some_and(|e| e == "json") {
            self.to_json()?
        } else {
            self.to_text()
        };
        fs::write(path, body)?;
        Ok(())
    }

    /// Loads either format, sniffing JSON by a leading `{`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        if text.trim_start().starts_with('{') {
            Self::from_json(&text)
        } else {
            Self::from_text(&text)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsJson {
    num_items: usize,
    dim: usize,
    psi: Vec<Vec<f64>>,
    rho: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Full(DMatrix<f64>),
    Diagonal(DVector<f64>),
}

/// Gaussian variational posterior over the latent state.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mu: DVector<f64>,
    pub cov: Covariance,
}

/// Cholesky factor of a posterior covariance plus its log-determinant.
#[derive(Debug, Clone)]
pub struct CovFactor {
    pub lower: DMatrix<f64>,
    pub log_det: f64,
}

impl Posterior {
    pub fn prior(dim: usize) -> Self {
        Self {
            mu: DVector::zeros(dim),
            cov: Covariance::Full(DMatrix::identity(dim, dim)),
        }
    }

    pub fn full(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        if sigma.nrows() != mu.len() || sigma.ncols() != mu.len() {
            return Err(Error::arg("covariance shape does not match mean"));
        }
        Ok(Self {
            mu,
            cov: Covariance::Full(sigma),
        })
    }

    pub fn diagonal(mu: DVector<f64>, variances: DVector<f64>) -> Result<Self> {
        if variances.len() != mu.len() {
            return Err(Error::arg("variance length does not match mean"));
        }
        Ok(Self {
            mu,
            cov: Covariance::Diagonal(variances),
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.cov, Covariance::Diagonal(_))
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        match &self.cov {
            Covariance::Full(s) => s.clone(),
            Covariance::Diagonal(d) => DMatrix::from_diagonal(d),
        }
    }

    pub fn cov_diagonal(&self) -> DVector<f64> {
        match &self.cov {
            Covariance::Full(s) => s.diagonal(),
            Covariance::Diagonal(d) => d.clone(),
        }
    }

    pub fn trace(&self) -> f64 {
        self.cov_diagonal().sum()
    }

    /// `v^T Sigma v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        match &self.cov {
            Covariance::Full(s) => {
                let v = DVector::from_column_slice(v);
                v.dot(&(s * &v))
            }
            Covariance::Diagonal(d) => v.iter().zip(d.iter()).map(|(x, s)| x * x * s).sum(),
        }
    }

    /// Cholesky factor for full covariance, element-wise square root for
    /// diagonal covariance.
    pub fn factor(&self) -> Result<CovFactor> {
        if !self.mu.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("posterior mean is not finite"));
        }
        match &self.cov {
            Covariance::Full(s) => {
                let chol = s
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::numeric("covariance is not positive definite"))?;
                let lower = chol.l();
                let log_det = 2.0 * lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
                if !log_det.is_finite() {
                    return Err(Error::numeric("covariance is degenerate"));
                }
                Ok(CovFactor { lower, log_det })
            }
            Covariance::Diagonal(d) => {
                if d.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    return Err(Error::numeric("diagonal covariance must be strictly positive"));
                }
                Ok(CovFactor {
                    lower: DMatrix::from_diagonal(&d.map(f64::sqrt)),
                    log_det: d.iter().map(|v| v.ln()).sum(),
                })
            }
        }
    }

    /// Prior and entropy part of the Gaussian ELBO:
    /// `-K/2 log 2pi - (mu'mu + tr Sigma)/2 + log|2 pi e Sigma|/2`.
    pub fn prior_entropy_terms(&self) -> Result<f64> {
        let k = self.dim() as f64;
        let f = self.factor()?;
        Ok(-0.5 * k * LN_2PI - 0.5 * (self.mu.dot(&self.mu) + self.trace())
            + 0.5 * (k * (LN_2PI + 1.0) + f.log_det))
    }
}

/// Log of the item distribution `softmax(psi * omega + rho)`.
pub fn log_softmax_probs(params: &ModelParams, omega: &DVector<f64>) -> Result<DVector<f64>> {
    let logits = params.logits(omega)?;
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite logits"));
    }
    let lse = log_sum_exp(logits.as_slice());
    Ok(logits.add_scalar(-lse))
}

/// Log-density of N(0, I) at `omega`.
pub fn standard_normal_log_density(omega: &DVector<f64>) -> f64 {
    -0.5 * omega.len() as f64 * LN_2PI - 0.5 * omega.dot(omega)
}

/// `log p(views, omega)`: the views' softmax log-likelihood plus the
/// standard normal log-prior of `omega`.
pub fn log_joint(params: &ModelParams, views: &[usize], omega: &DVector<f64>) -> Result<f64> {
    params.check_views(views)?;
    let logp = log_softmax_probs(params, omega)?;
    let data: f64 = views.iter().map(|&v| logp[v]).sum();
    Ok(data + standard_normal_log_density(omega))
}

/// Mean of a Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    fn from_samples(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_err: (var / n).sqrt(),
        }
    }
}

/// Per-draw values of `log p(views, omega_s) - log q(omega_s)` where
/// `omega_s = mu + L eps_s` and row `s` of `eps` is a standard normal draw.
pub fn elbo_mc_samples(
    params: &ModelParams,
    views: &[usize],
    q: &Posterior,
    eps: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    if eps.nrows() == 0 {
        return Err(Error::arg("need at least one noise draw"));
    }
    if eps.ncols() != q.dim() || q.dim() != params.dim() {
        return Err(Error::arg("noise, posterior and model dimensions disagree"));
    }
    let factor = q.factor()?;
    let k = q.dim() as f64;
    let log_q_const = -0.5 * k * LN_2PI - 0.5 * factor.log_det;
    (0..eps.nrows())
        .map(|s| {
            let e = eps.row(s).transpose();
            let omega = &q.mu + &factor.lower * &e;
            let log_q = log_q_const - 0.5 * e.dot(&e);
            Ok(log_joint(params, views, &omega)? - log_q)
        })
        .collect()
}

/// Monte-Carlo ELBO: the mean of [`elbo_mc_samples`].
pub fn elbo_mc(params: &ModelParams, views: &[usize], q: &Posterior, eps: &DMatrix<f64>) -> Result<f64> {
    Ok(elbo_mc_stats(params, views, q, eps)?.mean)
}

pub fn elbo_mc_stats(
    params: &ModelParams,
    views: &[usize],
    q: &Posterior,
    eps: &DMatrix<f64>,
) -> Result<McEstimate> {
    let values = elbo_mc_samples(params, views, q, eps)?;
    Ok(McEstimate::from_samples(&values))
}

/// Importance-sampling estimate of `log p(views)` with `q` as proposal.
///
/// The standard error is the delta-method error of the log of the mean
/// importance weight.
pub fn log_marginal_is(
    params: &ModelParams,
    views: &[usize],
    q: &Posterior,
    n: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n == 0 {
        return Err(Error::arg("need at least one importance sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = standard_normal_matrix(n, q.dim(), &mut rng);
    let log_w = elbo_mc_samples(params, views, q, &eps)?;
    let lme = log_sum_exp(&log_w) - (n as f64).ln();
    let rel: Vec<f64> = log_w.iter().map(|lw| (lw - lme).exp()).collect();
    let var = rel.iter().map(|r| (r - 1.0).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
    Ok(McEstimate {
        mean: lme,
        std_err: (var / n as f64).sqrt(),
    })
}
