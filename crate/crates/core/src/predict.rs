//! Next-item predictive distributions from a Gaussian posterior.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{ModelParams, Posterior};
use crate::numeric::softmax_in_place;

/// Monte-Carlo samples used at evaluation time.
pub const DEFAULT_MC_SAMPLES: usize = 100;

fn check_dims(params: &ModelParams, q: &Posterior) -> Result<()> {
    if q.dim() != params.dim() {
        return Err(Error::arg(format!(
            "posterior dimension {} does not match model dimension {}",
            q.dim(),
            params.dim()
        )));
    }
    Ok(())
}

fn softmax_at(params: &ModelParams, omega: &DVector<f64>) -> Result<DVector<f64>> {
    let mut z = params.logits(omega)?;
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite logits"));
    }
    softmax_in_place(z.as_mut_slice());
    Ok(z)
}

/// Per-item mean and standard error of the Monte-Carlo predictive.
#[derive(Debug, Clone)]
pub struct McPrediction {
    pub probs: DVector<f64>,
    pub std_err: DVector<f64>,
}

/// Average of `softmax(psi * omega_s + rho)` over `samples` posterior draws
/// taken from `rng`, with per-item standard errors.
pub fn predict_mc_stats<R: Rng + ?Sized>(
    params: &ModelParams,
    q: &Posterior,
    samples: usize,
    rng: &mut R,
) -> Result<McPrediction> {
    if samples == 0 {
        return Err(Error::arg("need at least one sample"));
    }
    check_dims(params, q)?;
    let factor = q.factor()?;
    let p = params.num_items();
    let mut sum = DVector::zeros(p);
    let mut sum_sq = DVector::zeros(p);
    for _ in 0..samples {
        let eps = DVector::from_fn(q.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let omega = &q.mu + &factor.lower * eps;
        let probs = softmax_at(params, &omega)?;
        sum_sq += probs.component_mul(&probs);
        sum += probs;
    }
    let n = samples as f64;
    let probs = &sum / n;
    let std_err = if samples > 1 {
        DVector::from_fn(p, |i, _| {
            let var = ((sum_sq[i] - n * probs[i] * probs[i]) / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        })
    } else {
        DVector::zeros(p)
    };
    Ok(McPrediction { probs, std_err })
}

pub fn predict_mc_with_rng<R: Rng + ?Sized>(
    params: &ModelParams,
    q: &Posterior,
    samples: usize,
    rng: &mut R,
) -> Result<DVector<f64>> {
    Ok(predict_mc_stats(params, q, samples, rng)?.probs)
}

/// Monte-Carlo predictive with a fresh generator seeded by `seed`.
pub fn predict_mc(params: &ModelParams, q: &Posterior, samples: usize, seed: u64) -> Result<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    predict_mc_with_rng(params, q, samples, &mut rng)
}

/// `softmax(psi * mu + rho)`: the predictive with the posterior collapsed
/// onto its mean.
pub fn predict_mean(params: &ModelParams, q: &Posterior) -> Result<DVector<f64>> {
    check_dims(params, q)?;
    softmax_at(params, &q.mu)
}

/// Ids of the `k` largest scores, descending, ties broken by ascending id.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::arg(format!(
            "k must lie in 1..={}, got {k}",
            scores.len()
        )));
    }
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    if k < ids.len() {
        ids.select_nth_unstable_by(k - 1, cmp);
        ids.truncate(k);
    }
    ids.sort_by(cmp);
    Ok(ids)
}
