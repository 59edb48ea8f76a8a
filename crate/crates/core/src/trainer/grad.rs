//! Per-session training objectives and their exact gradients.
//!
//! Both objectives take the encoder's diagonal posterior for the session:
//! the Bouchard mode evaluates the analytic bound at the encoder's
//! `(mu, Sigma, a, xi)`, the reparameterized mode averages the noisy bound
//! over the supplied standard-normal draws with `omega = mu + sqrt(var) * eps`.
//! Gradients are accumulated in reverse through the bound expressions and
//! then through the encoder layers.

use nalgebra::{DMatrix, DVector};

use super::{BoundKind, TrainConfig};
use crate::bouchard::{lambda_jj, lambda_jj_prime};
use crate::data::{to_counts, Session};
use crate::encoder::{Encoder, HeadOutput, LayerGrad};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numeric::{log_sum_exp, sigmoid, softplus, LN_2PI};

/// Gradient of a session objective with respect to every trainable block.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub psi: DMatrix<f64>,
    pub rho: DVector<f64>,
    pub encoder: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros(params: &ModelParams, encoder: &Encoder) -> Self {
        Self {
            psi: DMatrix::zeros(params.num_items(), params.dim()),
            rho: DVector::zeros(params.num_items()),
            encoder: encoder
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    weights: DMatrix::zeros(l.weights.nrows(), l.weights.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.psi += &other.psi;
        self.rho += &other.rho;
        for (a, b) in self.encoder.iter_mut().zip(&other.encoder) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.psi *= factor;
        self.rho *= factor;
        for g in &mut self.encoder {
            g.weights *= factor;
            g.bias *= factor;
        }
    }

    /// Flat views in the order `psi, rho, (weights, bias) per layer`.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.psi.as_slice(), self.rho.as_slice()];
        for g in &self.encoder {
            out.push(g.weights.as_slice());
            out.push(g.bias.as_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Mutable flat views of the trainable parameters, in [`Gradients::blocks`] order.
pub fn parameter_blocks<'a>(params: &'a mut ModelParams, encoder: &'a mut Encoder) -> Vec<&'a mut [f64]> {
    let mut out: Vec<&mut [f64]> = vec![params.psi.as_mut_slice(), params.rho.as_mut_slice()];
    for layer in encoder.layers_mut() {
        out.push(layer.weights.as_mut_slice());
        out.push(layer.bias.as_mut_slice());
    }
    out
}

struct HeadGrad {
    mu: DVector<f64>,
    log_var: DVector<f64>,
    xi_pre: Option<DVector<f64>>,
    a: Option<f64>,
}

impl HeadGrad {
    fn into_vector(self, dim: usize, num_items: usize) -> DVector<f64> {
        let bouchard = self.xi_pre.is_some();
        let width = if bouchard { 2 * dim + num_items + 1 } else { 2 * dim };
        let mut out = DVector::zeros(width);
        out.rows_mut(0, dim).copy_from(&self.mu);
        out.rows_mut(dim, dim).copy_from(&self.log_var);
        if let (Some(xi), Some(a)) = (self.xi_pre, self.a) {
            out.rows_mut(2 * dim, num_items).copy_from(&xi);
            out[2 * dim + num_items] = a;
        }
        out
    }
}

/// Prior and entropy terms for a diagonal Gaussian in log-variance form,
/// with the gradient on the log-variances.
fn prior_entropy(mu: &DVector<f64>, log_var: &DVector<f64>) -> (f64, DVector<f64>) {
    let k = mu.len() as f64;
    let var_sum: f64 = log_var.iter().map(|l| l.exp()).sum();
    let value = -0.5 * k * LN_2PI - 0.5 * (mu.dot(mu) + var_sum)
        + 0.5 * (k * (LN_2PI + 1.0) + log_var.sum());
    let grad = log_var.map(|l| 0.5 - 0.5 * l.exp());
    (value, grad)
}

fn bouchard_head(
    params: &ModelParams,
    counts: &[f64],
    head: &HeadOutput,
) -> Result<(f64, HeadGrad, DMatrix<f64>, DVector<f64>)> {
    let (Some(xi_pre), Some(a)) = (&head.xi_pre, head.a) else {
        return Err(Error::arg("Bouchard objective needs an encoder with a Bouchard head"));
    };
    let p_items = params.num_items();
    let k = params.dim();
    let t: f64 = counts.iter().sum();
    let var = head.variances();
    let x = &params.psi * &head.mu + &params.rho;

    let mut value = 0.0;
    let mut majorizer = a;
    let mut g_x = DVector::zeros(p_items);
    let mut g_a = -t;
    let mut g_xi_pre = DVector::zeros(p_items);
    let mut g_var = DVector::zeros(k);
    let mut g_psi = DMatrix::zeros(p_items, k);

    for p in 0..p_items {
        let xi = softplus(xi_pre[p]);
        let lam = lambda_jj(xi);
        let d = x[p] - a;
        let row = params.psi.row(p);
        let v: f64 = row.iter().zip(var.iter()).map(|(w, s)| w * w * s).sum();
        let gap = d * d + v - xi * xi;

        value += counts[p] * x[p];
        majorizer += 0.5 * (d - xi) + lam * gap + softplus(xi);

        let slope = 0.5 + 2.0 * lam * d;
        g_x[p] = counts[p] - t * slope;
        g_a += t * slope;
        let g_xi = -t * (-0.5 + lambda_jj_prime(xi) * gap - 2.0 * lam * xi + sigmoid(xi));
        g_xi_pre[p] = g_xi * sigmoid(xi_pre[p]);
        let g_v = -t * lam;
        for c in 0..k {
            g_var[c] += g_v * row[c] * row[c];
            g_psi[(p, c)] = g_x[p] * head.mu[c] + 2.0 * g_v * row[c] * var[c];
        }
    }
    value -= t * majorizer;

    let (pe, g_log_var_pe) = prior_entropy(&head.mu, &head.log_var);
    value += pe;
    let g_mu = params.psi.tr_mul(&g_x) - &head.mu;
    let g_log_var = g_var.component_mul(&var) + g_log_var_pe;

    Ok((
        value,
        HeadGrad {
            mu: g_mu,
            log_var: g_log_var,
            xi_pre: Some(g_xi_pre),
            a: Some(g_a),
        },
        g_psi,
        g_x,
    ))
}

fn reparam_head(
    params: &ModelParams,
    counts: &[f64],
    head: &HeadOutput,
    noise: &DMatrix<f64>,
    samples: usize,
) -> Result<(f64, HeadGrad, DMatrix<f64>, DVector<f64>)> {
    let k = params.dim();
    if noise.nrows() < samples || noise.ncols() != k {
        return Err(Error::arg(format!(
            "need a {samples}x{k} noise matrix, got {}x{}",
            noise.nrows(),
            noise.ncols()
        )));
    }
    let t: f64 = counts.iter().sum();
    let c = DVector::from_column_slice(counts);
    let std = head.log_var.map(|l| (0.5 * l).exp());
    let x_mean = &params.psi * &head.mu + &params.rho;

    let mut value = c.dot(&x_mean);
    let mut g_rho = c.clone();
    let mut g_psi = &c * head.mu.transpose();
    let mut g_mu = params.psi.tr_mul(&c);
    let mut g_std = DVector::zeros(k);

    let weight = t / samples as f64;
    for s in 0..samples {
        let eps = noise.row(s).transpose();
        let omega = &head.mu + std.component_mul(&eps);
        let mut probs = &params.psi * &omega + &params.rho;
        let lse = log_sum_exp(probs.as_slice());
        value -= weight * lse;
        probs.apply(|z| *z = (*z - lse).exp());
        let g_z = probs * (-weight);
        let g_omega = params.psi.tr_mul(&g_z);
        g_rho += &g_z;
        g_psi += &g_z * omega.transpose();
        g_mu += &g_omega;
        g_std += g_omega.component_mul(&eps);
    }

    let (pe, g_log_var_pe) = prior_entropy(&head.mu, &head.log_var);
    value += pe;
    g_mu -= &head.mu;
    let g_log_var = g_std.component_mul(&std) * 0.5 + g_log_var_pe;

    Ok((
        value,
        HeadGrad {
            mu: g_mu,
            log_var: g_log_var,
            xi_pre: head.xi_pre.as_ref().map(|x| DVector::zeros(x.len())),
            a: head.a.map(|_| 0.0),
        },
        g_psi,
        g_rho,
    ))
}

/// Objective value and, when `with_grad` is set, its gradient.
pub fn objective_and_gradients(
    params: &ModelParams,
    encoder: &Encoder,
    session: &Session,
    cfg: &TrainConfig,
    noise: &DMatrix<f64>,
    with_grad: bool,
) -> Result<(f64, Option<Gradients>)> {
    if session.is_empty() {
        return Err(Error::arg(format!("session {:?} is empty", session.id)));
    }
    if encoder.num_items() != params.num_items() || encoder.dim() != params.dim() {
        return Err(Error::arg("encoder and model shapes disagree"));
    }
    let counts = to_counts(&session.views, params.num_items())?.as_f64();
    let input = DVector::from_column_slice(&counts);
    let (head, cache) = encoder.forward(&input)?;

    let (bound, head_grad, mut g_psi, g_rho) = match cfg.bound {
        BoundKind::Bouchard => bouchard_head(params, &counts, &head)?,
        BoundKind::Reparam => reparam_head(params, &counts, &head, noise, cfg.mc_samples)?,
    };
    let penalty = cfg.l2 * (params.psi.norm_squared() + encoder.weight_norm_sq());
    let value = bound - penalty;
    if !value.is_finite() {
        return Err(Error::numeric(format!(
            "objective for session {:?} is not finite",
            session.id
        )));
    }
    if !with_grad {
        return Ok((value, None));
    }

    g_psi -= &params.psi * (2.0 * cfg.l2);
    let mut enc_grads = encoder.backward(&cache, &head_grad.into_vector(params.dim(), params.num_items()));
    for (g, layer) in enc_grads.iter_mut().zip(encoder.layers()) {
        g.weights -= &layer.weights * (2.0 * cfg.l2);
    }
    let grads = Gradients {
        psi: g_psi,
        rho: g_rho,
        encoder: enc_grads,
    };
    if !grads.is_finite() {
        return Err(Error::numeric(format!(
            "gradient for session {:?} is not finite",
            session.id
        )));
    }
    Ok((value, Some(grads)))
}

/// Per-session training objective: the selected bound at the encoder's
/// output minus `l2 * (|psi|^2 + |encoder weights|^2)`.
pub fn session_objective(
    params: &ModelParams,
    encoder: &Encoder,
    session: &Session,
    cfg: &TrainConfig,
    noise: &DMatrix<f64>,
) -> Result<f64> {
    Ok(objective_and_gradients(params, encoder, session, cfg, noise, false)?.0)
}

pub fn gradients(
    params: &ModelParams,
    encoder: &Encoder,
    session: &Session,
    cfg: &TrainConfig,
    noise: &DMatrix<f64>,
) -> Result<Gradients> {
    let (_, g) = objective_and_gradients(params, encoder, session, cfg, noise, true)?;
    Ok(g.expect("gradient requested"))
}
