//! Leave-last-out evaluation: every test session's final view is predicted
//! from the views before it and scored with RC@K and DCG@K.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bouchard::{em_infer, DEFAULT_EM_ITERS};
use crate::data::{to_counts, SessionSet};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Posterior};
use crate::predict::{predict_mc_with_rng, predict_mean, top_k, DEFAULT_MC_SAMPLES};

pub const DEFAULT_METRIC_K: usize = 5;

/// Anything that turns a view history into a next-item score vector.
/// Randomized predictors draw only from the supplied generator.
pub trait NextItemPredictor: Sync {
    fn predict_next(&self, history: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
}

/// 1 if `truth` is among `predicted`, else 0.
pub fn recall_at_k(predicted: &[usize], truth: usize) -> f64 {
    if predicted.contains(&truth) {
        1.0
    } else {
        0.0
    }
}

/// Binary-gain DCG: `1 / log2(rank + 1)` at the truth's 1-based rank, 0 if absent.
pub fn dcg_at_k(predicted: &[usize], truth: usize) -> f64 {
    match predicted.iter().position(|&p| p == truth) {
        Some(i) => 1.0 / ((i + 2) as f64).log2(),
        None => 0.0,
    }
}

/// The literal reading of the DCG display:
/// `sum_i (2^(r_i * hit) - 1) / log2(i + 1)` where `r_i` is the predicted
/// probability of the item at rank `i` and `hit` flags whether the truth
/// made the list at all.
pub fn dcg_literal_at_k(predicted: &[usize], probs: &[f64], truth: usize) -> f64 {
    let hit = recall_at_k(predicted, truth);
    predicted
        .iter()
        .enumerate()
        .map(|(i, &item)| ((probs[item] * hit).exp2() - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcgMode {
    #[default]
    Binary,
    Literal,
}

impl std::str::FromStr for DcgMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(DcgMode::Binary),
            "literal" => Ok(DcgMode::Literal),
            other => Err(Error::arg(format!("unknown DCG mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub dcg: DcgMode,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_METRIC_K,
            dcg: DcgMode::Binary,
            seed: 0,
            deterministic: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub rc_at_k: f64,
    pub dcg_at_k: f64,
    pub evaluated: usize,
    /// Sessions shorter than two views.
    pub skipped: usize,
}

/// Scores of one session.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionScore {
    pub recall: f64,
    pub dcg: f64,
}

/// Per-session scores, in test-set order, for sessions with at least two
/// views. Session `i` draws randomness from stream `i` of `cfg.seed`.
pub fn score_sessions<P: NextItemPredictor + ?Sized>(
    predictor: &P,
    test: &SessionSet,
    cfg: &EvalConfig,
) -> Result<Vec<SessionScore>> {
    if cfg.k == 0 || cfg.k > test.num_items() {
        return Err(Error::arg(format!(
            "metric cut-off must lie in 1..={}, got {}",
            test.num_items(),
            cfg.k
        )));
    }
    let eligible: Vec<(usize, &[usize], usize)> = test
        .sessions()
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.split_last().map(|(h, t)| (i, h, t)))
        .filter(|(_, h, _)| !h.is_empty())
        .collect();

    let score = |&(i, history, truth): &(usize, &[usize], usize)| -> Result<SessionScore> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let probs = predictor.predict_next(history, &mut rng)?;
        if probs.len() != test.num_items() {
            return Err(Error::arg("predictor returned a vector of the wrong length"));
        }
        let ranked = top_k(&probs, cfg.k)?;
        let dcg = match cfg.dcg {
            DcgMode::Binary => dcg_at_k(&ranked, truth),
            DcgMode::Literal => dcg_literal_at_k(&ranked, &probs, truth),
        };
        Ok(SessionScore {
            recall: recall_at_k(&ranked, truth),
            dcg,
        })
    };

    if cfg.deterministic {
        eligible.iter().map(score).collect()
    } else {
        eligible.par_iter().map(score).collect()
    }
}

/// Mean RC@K and DCG@K over all test sessions with at least two views.
pub fn evaluate<P: NextItemPredictor + ?Sized>(
    predictor: &P,
    test: &SessionSet,
    cfg: &EvalConfig,
) -> Result<EvalSummary> {
    let scores = score_sessions(predictor, test, cfg)?;
    let evaluated = scores.len();
    let skipped = test.len() - evaluated;
    let n = evaluated.max(1) as f64;
    Ok(EvalSummary {
        rc_at_k: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        dcg_at_k: scores.iter().map(|s| s.dcg).sum::<f64>() / n,
        evaluated,
        skipped,
    })
}

/// How the posterior of a test prefix is obtained.
#[derive(Debug, Clone)]
pub enum OnlineLatent {
    Em { iters: usize },
    Encoder(Encoder),
}

impl OnlineLatent {
    pub fn label(&self) -> &'static str {
        match self {
            OnlineLatent::Em { .. } => "EM",
            OnlineLatent::Encoder(_) => "AE",
        }
    }
}

impl Default for OnlineLatent {
    fn default() -> Self {
        OnlineLatent::Em {
            iters: DEFAULT_EM_ITERS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextItemMethod {
    MonteCarlo { samples: usize },
    Mean,
}

impl NextItemMethod {
    pub fn label(&self) -> &'static str {
        match self {
            NextItemMethod::MonteCarlo { .. } => "MC",
            NextItemMethod::Mean => "mean",
        }
    }
}

impl Default for NextItemMethod {
    fn default() -> Self {
        NextItemMethod::MonteCarlo {
            samples: DEFAULT_MC_SAMPLES,
        }
    }
}

/// A trained latent model paired with an inference and a prediction method.
#[derive(Debug, Clone)]
pub struct LatentPredictor<'a> {
    pub params: &'a ModelParams,
    pub latent: OnlineLatent,
    pub next: NextItemMethod,
}

impl LatentPredictor<'_> {
    pub fn posterior(&self, history: &[usize]) -> Result<Posterior> {
        match &self.latent {
            OnlineLatent::Em { iters } => Ok(em_infer(self.params, history, *iters, None)?.posterior),
            OnlineLatent::Encoder(enc) => {
                let counts = to_counts(history, self.params.num_items())?;
                Ok(enc.encode(&counts)?.0)
            }
        }
    }
}

impl NextItemPredictor for LatentPredictor<'_> {
    fn predict_next(&self, history: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let q = self.posterior(history)?;
        let probs = match self.next {
            NextItemMethod::MonteCarlo { samples } => predict_mc_with_rng(self.params, &q, samples, rng)?,
            NextItemMethod::Mean => predict_mean(self.params, &q)?,
        };
        Ok(probs.iter().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub train_algorithm: String,
    pub online_latent: String,
    pub online_next_item: String,
    pub rc_at_k: f64,
    pub dcg_at_k: f64,
}

/// Table of evaluation results, one row per method combination.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub k: usize,
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: &str = "train_algorithm,online_latent,online_next_item,rc_at_k,dcg_at_k";

impl MetricsReport {
    pub fn new(k: usize) -> Self {
        Self { k, rows: Vec::new() }
    }

    pub fn push(&mut self, train: &str, latent: &str, next: &str, summary: &EvalSummary) {
        self.rows.push(ReportRow {
            train_algorithm: train.to_string(),
            online_latent: latent.to_string(),
            online_next_item: next.to_string(),
            rc_at_k: summary.rc_at_k,
            dcg_at_k: summary.dcg_at_k,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6}",
                r.train_algorithm, r.online_latent, r.online_next_item, r.rc_at_k, r.dcg_at_k
            );
        }
        out
    }

    pub fn render_text(&self) -> String {
        let rc = format!("RC@{}", self.k);
        let dcg = format!("DCG@{}", self.k);
        let mut out = format!(
            "{:<14} {:<13} {:<16} {:>8} {:>8}\n",
            "Train", "Online latent", "Online next item", rc, dcg
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:<13} {:<16} {:>8.3} {:>8.3}",
                r.train_algorithm, r.online_latent, r.online_next_item, r.rc_at_k, r.dcg_at_k
            );
        }
        out
    }
}

/// Evaluates a latent model over the {AE, EM} x {MC, mean} grid; the AE
/// rows are included only when an encoder is supplied.
pub fn evaluate_latent_grid(
    params: &ModelParams,
    encoder: Option<&Encoder>,
    train_label: &str,
    test: &SessionSet,
    em_iters: usize,
    mc_samples: usize,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let mut latents = Vec::new();
    if let Some(enc) = encoder {
        latents.push(OnlineLatent::Encoder(enc.clone()));
    }
    latents.push(OnlineLatent::Em { iters: em_iters });

    let mut report = MetricsReport::new(cfg.k);
    for latent in latents {
        for next in [NextItemMethod::MonteCarlo { samples: mc_samples }, NextItemMethod::Mean] {
            let predictor = LatentPredictor {
                params,
                latent: latent.clone(),
                next,
            };
            let summary = evaluate(&predictor, test, cfg)?;
            report.push(train_label, latent.label(), next.label(), &summary);
        }
    }
    Ok(report)
}
