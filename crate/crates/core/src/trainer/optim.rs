//! RMSProp ascent on flat parameter buffers.

use crate::error::{Error, Result};

pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Squared-gradient accumulators, one buffer per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    accumulators: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(learning_rate: f64, decay: f64, epsilon: f64, block_sizes: &[usize]) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::arg("learning rate must be positive"));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::arg("RMSProp decay must lie in (0, 1)"));
        }
        if !(epsilon > 0.0) {
            return Err(Error::arg("RMSProp epsilon must be positive"));
        }
        Ok(Self {
            learning_rate,
            decay,
            epsilon,
            accumulators: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.accumulators
    }

    /// One ascent step: the accumulator is refreshed with the current
    /// gradient first, then `theta += lr * g / (sqrt(acc) + eps)`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.accumulators.len() || grads.len() != self.accumulators.len() {
            return Err(Error::arg("parameter blocks do not match optimizer state"));
        }
        for ((theta, g), acc) in params.iter_mut().zip(grads).zip(&mut self.accumulators) {
            if theta.len() != acc.len() || g.len() != acc.len() {
                return Err(Error::arg("parameter block size changed"));
            }
            for ((t, &gi), a) in theta.iter_mut().zip(g.iter()).zip(acc.iter_mut()) {
                *a = self.decay * *a + (1.0 - self.decay) * gi * gi;
                *t += self.learning_rate * gi / (a.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
