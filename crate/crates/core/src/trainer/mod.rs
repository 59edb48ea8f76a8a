//! Stochastic training of item parameters and encoder weights by RMSProp
//! ascent on per-session bounds.

mod grad;
mod optim;

pub use grad::{gradients, objective_and_gradients, parameter_blocks, session_objective, Gradients};
pub use optim::{RmsProp, DEFAULT_DECAY, DEFAULT_EPSILON};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SessionSet;
use crate::encoder::{init_encoder, Encoder, EncoderKind};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numeric::standard_normal_matrix;

pub const DEFAULT_LEARNING_RATE: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Bouchard,
    Reparam,
}

impl std::str::FromStr for BoundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bouchard" => Ok(BoundKind::Bouchard),
            "reparam" => Ok(BoundKind::Reparam),
            other => Err(Error::arg(format!("unknown bound {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub bound: BoundKind,
    pub encoder: EncoderKind,
    pub k: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub decay: f64,
    pub epsilon: f64,
    /// Evaluate sessions of a batch sequentially instead of in parallel.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            bound: BoundKind::Bouchard,
            encoder: EncoderKind::LinearBouchard,
            k: 10,
            epochs: 100,
            learning_rate: DEFAULT_LEARNING_RATE,
            l2: 0.0,
            batch_size: 32,
            mc_samples: 1,
            seed: 0,
            decay: DEFAULT_DECAY,
            epsilon: DEFAULT_EPSILON,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::arg("embedding dimension must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning rate must be positive"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::arg("l2 must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be at least 1"));
        }
        if self.bound == BoundKind::Reparam && self.mc_samples == 0 {
            return Err(Error::arg("reparameterized training needs at least one sample"));
        }
        if self.bound == BoundKind::Bouchard && self.encoder != EncoderKind::LinearBouchard {
            return Err(Error::arg("the Bouchard bound requires the linear_bouchard encoder"));
        }
        Ok(())
    }

    /// Noise rows drawn per session.
    pub fn noise_rows(&self) -> usize {
        match self.bound {
            BoundKind::Bouchard => 0,
            BoundKind::Reparam => self.mc_samples,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub encoder: Encoder,
    /// Mean session objective of every epoch.
    pub loss_curve: Vec<f64>,
}

/// Starting point of training: `psi ~ N(0, 0.01^2)`, `rho` the log of
/// add-one smoothed item frequencies, and a freshly initialized encoder.
pub fn initial_state(data: &SessionSet, cfg: &TrainConfig) -> Result<(ModelParams, Encoder)> {
    let p = data.num_items();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    let psi = DMatrix::from_fn(p, cfg.k, |_, _| normal.sample(&mut rng));
    let counts = data.item_counts();
    let total = counts.iter().sum::<u64>() as f64 + p as f64;
    let rho = DVector::from_fn(p, |i, _| ((counts[i] as f64 + 1.0) / total).ln());
    let params = ModelParams::new(psi, rho)?;
    let encoder = init_encoder(cfg.encoder, p, cfg.k, cfg.seed.wrapping_add(1))?;
    Ok((params, encoder))
}

/// Trains from [`initial_state`].
pub fn train(data: &SessionSet, cfg: &TrainConfig) -> Result<TrainOutput> {
    let (params, encoder) = initial_state(data, cfg)?;
    train_from(data, cfg, params, encoder)
}

/// Runs `cfg.epochs` passes of shuffled mini-batch RMSProp ascent starting
/// from the given parameters. Deterministic for a fixed configuration.
pub fn train_from(
    data: &SessionSet,
    cfg: &TrainConfig,
    mut params: ModelParams,
    mut encoder: Encoder,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    if let Some(s) = data.sessions().iter().find(|s| s.is_empty()) {
        return Err(Error::arg(format!("training session {:?} is empty", s.id)));
    }
    if params.num_items() != data.num_items() || params.dim() != cfg.k {
        return Err(Error::arg("initial parameters do not match data and config"));
    }

    let block_sizes: Vec<usize> = Gradients::zeros(&params, &encoder)
        .blocks()
        .iter()
        .map(|b| b.len())
        .collect();
    let mut optimizer = RmsProp::new(cfg.learning_rate, cfg.decay, cfg.epsilon, &block_sizes)?;
    // stream 0 feeds initialization; shuffling and noise use their own stream
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let noises: Vec<DMatrix<f64>> = batch
                .iter()
                .map(|_| standard_normal_matrix(cfg.noise_rows(), cfg.k, &mut rng))
                .collect();
            let eval = |(&i, noise): (&usize, &DMatrix<f64>)| {
                objective_and_gradients(&params, &encoder, &data.sessions()[i], cfg, noise, true)
            };
            let results: Vec<Result<(f64, Option<Gradients>)>> = if cfg.deterministic {
                batch.iter().zip(&noises).map(eval).collect()
            } else {
                batch.par_iter().zip(noises.par_iter()).map(eval).collect()
            };

            let mut total = Gradients::zeros(&params, &encoder);
            let mut batch_sum = 0.0;
            for r in results {
                let (value, g) = r.map_err(|e| Error::Training {
                    epoch,
                    batch: batch_idx,
                    msg: e.to_string(),
                })?;
                batch_sum += value;
                total.add_assign(&g.expect("gradient requested"));
            }
            total.scale(1.0 / batch.len() as f64);
            epoch_sum += batch_sum;

            let grads = total.blocks();
            let mut blocks = parameter_blocks(&mut params, &mut encoder);
            optimizer.step(&mut blocks, &grads)?;
            if blocks.iter().any(|b| b.iter().any(|v| !v.is_finite())) {
                return Err(Error::Training {
                    epoch,
                    batch: batch_idx,
                    msg: "parameters became non-finite".into(),
                });
            }
        }
        loss_curve.push(epoch_sum / data.len() as f64);
    }
    Ok(TrainOutput {
        params,
        encoder,
        loss_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ItemCatalog, Session};

    fn tiny_data() -> SessionSet {
        let sessions = (0..12)
            .map(|i| Session::new(format!("s{i}"), vec![i % 4, (i + 1) % 4, i % 4]))
            .collect();
        SessionSet::new(sessions, ItemCatalog::new(5).unwrap()).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = tiny_data();
        let cfg = TrainConfig {
            k: 2,
            epochs: 0,
            ..TrainConfig::default()
        };
        let (p0, e0) = initial_state(&data, &cfg).unwrap();
        let out = train(&data, &cfg).unwrap();
        assert_eq!(out.params, p0);
        assert_eq!(out.encoder, e0);
        assert!(out.loss_curve.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data();
        for (bound, encoder) in [
            (BoundKind::Bouchard, EncoderKind::LinearBouchard),
            (BoundKind::Reparam, EncoderKind::DeepGaussian),
        ] {
            let cfg = TrainConfig {
                bound,
                encoder,
                k: 2,
                epochs: 5,
                batch_size: 4,
                seed: 3,
                ..TrainConfig::default()
            };
            let a = train(&data, &cfg).unwrap();
            let b = train(&data, &TrainConfig { deterministic: true, ..cfg.clone() }).unwrap();
            assert_eq!(a.params, b.params);
            assert_eq!(a.loss_curve, b.loss_curve);
        }
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            bound: BoundKind::Bouchard,
            encoder: EncoderKind::DeepGaussian,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig {
            bound: BoundKind::Reparam,
            encoder: EncoderKind::LinearGaussian,
            mc_samples: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn rejects_empty_training_sessions() {
        let data = SessionSet::new(vec![Session::new("a", vec![])], ItemCatalog::new(2).unwrap()).unwrap();
        let cfg = TrainConfig { k: 1, epochs: 1, ..TrainConfig::default() };
        assert!(train(&data, &cfg).is_err());
    }

    #[test]
    fn config_json_fills_defaults() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"bound":"reparam","encoder":"deep_gaussian","k":4}"#).unwrap();
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.k, 4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr":0.1}"#).is_err());
    }
}
