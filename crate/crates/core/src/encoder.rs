//! Amortized inference networks mapping a session's count vector to a
//! diagonal Gaussian posterior and, for the Bouchard variant, to the bound's
//! auxiliary parameters.
//!
//! Head layout of the final layer: `[mu (K), log-variance (K)]`, followed by
//! `[xi pre-activation (P), a (1)]` for [`EncoderKind::LinearBouchard`].

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bouchard::BouchardState;
use crate::data::CountVector;
use crate::error::{Error, Result};
use crate::model::Posterior;
use crate::numeric::softplus;

const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    LinearBouchard,
    LinearGaussian,
    DeepGaussian,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::LinearBouchard => "linear_bouchard",
            EncoderKind::LinearGaussian => "linear_gaussian",
            EncoderKind::DeepGaussian => "deep_gaussian",
        }
    }

    /// Row label used in evaluation tables.
    pub fn train_label(self) -> &'static str {
        match self {
            EncoderKind::LinearBouchard => "Bouch/AE",
            EncoderKind::LinearGaussian => "RT/AE",
            EncoderKind::DeepGaussian => "RT/Deep AE",
        }
    }

    pub fn has_bouchard_head(self) -> bool {
        self == EncoderKind::LinearBouchard
    }

    fn head_width(self, num_items: usize, dim: usize) -> usize {
        if self.has_bouchard_head() {
            2 * dim + num_items + 1
        } else {
            2 * dim
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_bouchard" => Ok(EncoderKind::LinearBouchard),
            "linear_gaussian" => Ok(EncoderKind::LinearGaussian),
            "deep_gaussian" => Ok(EncoderKind::DeepGaussian),
            other => Err(Error::arg(format!("unknown encoder kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Affine map `act(W^T h + b)` with `W` stored as `inputs x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Layer {
    fn pre_activation(&self, input: &DVector<f64>) -> DVector<f64> {
        self.weights.tr_mul(input) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    kind: EncoderKind,
    num_items: usize,
    dim: usize,
    layers: Vec<Layer>,
}

/// Raw head values of one forward pass.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub mu: DVector<f64>,
    pub log_var: DVector<f64>,
    pub xi_pre: Option<DVector<f64>>,
    pub a: Option<f64>,
}

impl HeadOutput {
    pub fn variances(&self) -> DVector<f64> {
        self.log_var.map(f64::exp)
    }

    pub fn posterior(&self) -> Result<Posterior> {
        Posterior::diagonal(self.mu.clone(), self.variances())
    }

    pub fn bouchard_state(&self) -> Option<BouchardState> {
        match (&self.xi_pre, self.a) {
            (Some(xi_pre), Some(a)) => Some(BouchardState {
                a,
                xi: xi_pre.map(softplus),
            }),
            _ => None,
        }
    }
}

/// Activations retained for backpropagation: the input to every layer and
/// every layer's pre-activation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<DVector<f64>>,
    pre: Vec<DVector<f64>>,
}

/// Gradient of one layer's weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Encoder {
    /// Builds an encoder from explicit layers, checking that the shapes chain
    /// from `num_items` inputs to the kind's head width.
    pub fn from_layers(kind: EncoderKind, num_items: usize, dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if num_items == 0 || dim == 0 {
            return Err(Error::arg("encoder needs P >= 1 and K >= 1"));
        }
        let expected_layers = match kind {
            EncoderKind::DeepGaussian => 4,
            _ => 1,
        };
        if layers.len() != expected_layers {
            return Err(Error::arg(format!(
                "{} encoder needs {expected_layers} layers, got {}",
                kind.name(),
                layers.len()
            )));
        }
        let mut width = num_items;
        for (i, layer) in layers.iter().enumerate() {
            if layer.weights.nrows() != width || layer.bias.len() != layer.weights.ncols() {
                return Err(Error::arg(format!("layer {i} shape does not chain")));
            }
            width = layer.weights.ncols();
        }
        if width != kind.head_width(num_items, dim) {
            return Err(Error::arg(format!(
                "head width {width} does not match {} output {}",
                kind.name(),
                kind.head_width(num_items, dim)
            )));
        }
        Ok(Self {
            kind,
            num_items,
            dim,
            layers,
        })
    }

    /// All-zero weights and biases: every input maps to the prior.
    pub fn zeros(kind: EncoderKind, num_items: usize, dim: usize) -> Result<Self> {
        let layers = Self::layer_shapes(kind, num_items, dim)
            .into_iter()
            .map(|(rows, cols, activation)| Layer {
                weights: DMatrix::zeros(rows, cols),
                bias: DVector::zeros(cols),
                activation,
            })
            .collect();
        Self::from_layers(kind, num_items, dim, layers)
    }

    fn layer_shapes(kind: EncoderKind, num_items: usize, dim: usize) -> Vec<(usize, usize, Activation)> {
        let head = kind.head_width(num_items, dim);
        match kind {
            EncoderKind::DeepGaussian => vec![
                (num_items, dim, Activation::Relu),
                (dim, dim, Activation::Relu),
                (dim, dim, Activation::Relu),
                (dim, head, Activation::Identity),
            ],
            _ => vec![(num_items, head, Activation::Identity)],
        }
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// `(rows, cols)` of every weight matrix.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weights.shape()).collect()
    }

    /// Sum of squared weight-matrix entries (biases excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.norm_squared()).sum()
    }

    fn check_input(&self, input: &DVector<f64>) -> Result<()> {
        if input.len() != self.num_items {
            return Err(Error::arg(format!(
                "count vector has {} entries, encoder expects {}",
                input.len(),
                self.num_items
            )));
        }
        Ok(())
    }

    fn split_head(&self, out: &DVector<f64>) -> HeadOutput {
        let k = self.dim;
        let (xi_pre, a) = if self.kind.has_bouchard_head() {
            (
                Some(out.rows(2 * k, self.num_items).into_owned()),
                Some(out[2 * k + self.num_items]),
            )
        } else {
            (None, None)
        };
        HeadOutput {
            mu: out.rows(0, k).into_owned(),
            log_var: out.rows(k, k).into_owned(),
            xi_pre,
            a,
        }
    }

    pub fn forward(&self, input: &DVector<f64>) -> Result<(HeadOutput, ForwardCache)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = input.clone();
        for layer in &self.layers {
            let z = layer.pre_activation(&h);
            let next = z.map(|v| layer.activation.apply(v));
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok((self.split_head(&h), ForwardCache { inputs, pre }))
    }

    pub fn head(&self, counts: &CountVector) -> Result<HeadOutput> {
        let input = DVector::from_vec(counts.as_f64());
        Ok(self.forward(&input)?.0)
    }

    /// Diagonal posterior and, for the Bouchard kind, the auxiliary state.
    pub fn encode(&self, counts: &CountVector) -> Result<(Posterior, Option<BouchardState>)> {
        let head = self.head(counts)?;
        Ok((head.posterior()?, head.bouchard_state()))
    }

    /// Backpropagates a gradient on the head values (laid out like the head)
    /// into per-layer weight and bias gradients.
    pub fn backward(&self, cache: &ForwardCache, head_grad: &DVector<f64>) -> Vec<LayerGrad> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g_out = head_grad.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let g_pre = g_out.zip_map(&cache.pre[i], |g, z| g * layer.activation.derivative(z));
            grads.push(LayerGrad {
                weights: &cache.inputs[i] * g_pre.transpose(),
                bias: g_pre.clone(),
            });
            g_out = &layer.weights * g_pre;
        }
        grads.reverse();
        grads
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = EncoderJson {
            kind: self.kind,
            num_items: self.num_items,
            dim: self.dim,
            layer_shapes: self.shapes(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerJson {
                    activation: l.activation,
                    weights: l.weights.transpose().iter().copied().collect(),
                    bias: l.bias.iter().copied().collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: EncoderJson = serde_json::from_str(text)?;
        if doc.layer_shapes.len() != doc.layers.len() {
            return Err(Error::arg("layer shape list does not match layer list"));
        }
        let layers = doc
            .layers
            .into_iter()
            .zip(doc.layer_shapes)
            .map(|(l, (rows, cols))| {
                if l.weights.len() != rows * cols || l.bias.len() != cols {
                    return Err(Error::arg("layer data does not match its declared shape"));
                }
                Ok(Layer {
                    weights: DMatrix::from_row_slice(rows, cols, &l.weights),
                    bias: DVector::from_vec(l.bias),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(doc.kind, doc.num_items, doc.dim, layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    activation: Activation,
    /// Row-major `inputs x outputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EncoderJson {
    kind: EncoderKind,
    num_items: usize,
    dim: usize,
    layer_shapes: Vec<(usize, usize)>,
    layers: Vec<LayerJson>,
}

/// Random encoder with every weight and bias drawn from `N(0, 0.01^2)`,
/// except the log-variance head bias which starts at zero.
pub fn init_encoder(kind: EncoderKind, num_items: usize, dim: usize, seed: u64) -> Result<Encoder> {
    let mut enc = Encoder::zeros(kind, num_items, dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let last = enc.layers.len() - 1;
    for (i, layer) in enc.layers.iter_mut().enumerate() {
        for w in layer.weights.iter_mut() {
            *w = normal.sample(&mut rng);
        }
        for (j, b) in layer.bias.iter_mut().enumerate() {
            let log_var_head = i == last && (dim..2 * dim).contains(&j);
            let draw = normal.sample(&mut rng);
            *b = if log_var_head { 0.0 } else { draw };
        }
    }
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::to_counts;

    #[test]
    fn zero_encoder_outputs_prior() {
        for kind in [EncoderKind::LinearBouchard, EncoderKind::LinearGaussian, EncoderKind::DeepGaussian] {
            let enc = Encoder::zeros(kind, 6, 3).unwrap();
            let (q, b) = enc.encode(&to_counts(&[0, 5, 5], 6).unwrap()).unwrap();
            assert_eq!(q.mu, DVector::zeros(3));
            assert_eq!(q.cov_diagonal(), DVector::from_element(3, 1.0));
            assert_eq!(b.is_some(), kind == EncoderKind::LinearBouchard);
        }
    }

    #[test]
    fn bouchard_head_has_nonnegative_widths() {
        let mut enc = init_encoder(EncoderKind::LinearBouchard, 5, 2, 3).unwrap();
        enc.layers_mut()[0].bias.fill(-40.0);
        let (_, b) = enc.encode(&to_counts(&[1, 2], 5).unwrap()).unwrap();
        assert!(b.unwrap().xi.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn encode_is_permutation_invariant_and_deterministic() {
        let enc = init_encoder(EncoderKind::DeepGaussian, 8, 4, 1).unwrap();
        let a = enc.encode(&to_counts(&[3, 1, 1, 7], 8).unwrap()).unwrap();
        let b = enc.encode(&to_counts(&[1, 7, 3, 1], 8).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn initialized_encoder_starts_near_prior() {
        for kind in [EncoderKind::LinearBouchard, EncoderKind::LinearGaussian, EncoderKind::DeepGaussian] {
            let enc = init_encoder(kind, 30, 5, 9).unwrap();
            let (q, _) = enc.encode(&to_counts(&[], 30).unwrap()).unwrap();
            assert!(q.mu.iter().all(|m| m.abs() < 0.1));
            assert!(q.cov_diagonal().iter().all(|&v| (0.8..=1.25).contains(&v)));
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = init_encoder(EncoderKind::LinearGaussian, 10, 3, 5).unwrap();
        let b = init_encoder(EncoderKind::LinearGaussian, 10, 3, 5).unwrap();
        let c = init_encoder(EncoderKind::LinearGaussian, 10, 3, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn deep_layer_shapes() {
        let enc = init_encoder(EncoderKind::DeepGaussian, 100, 10, 0).unwrap();
        assert_eq!(enc.shapes(), vec![(100, 10), (10, 10), (10, 10), (10, 20)]);
        let enc = init_encoder(EncoderKind::LinearBouchard, 100, 10, 0).unwrap();
        assert_eq!(enc.shapes(), vec![(100, 2 * 10 + 100 + 1)]);
    }

    #[test]
    fn rejects_wrong_input_length() {
        let enc = Encoder::zeros(EncoderKind::LinearGaussian, 4, 2).unwrap();
        assert!(enc.encode(&to_counts(&[0], 3).unwrap()).is_err());
    }

    #[test]
    fn json_round_trip() {
        for kind in [EncoderKind::LinearBouchard, EncoderKind::DeepGaussian] {
            let enc = init_encoder(kind, 7, 3, 2).unwrap();
            assert_eq!(Encoder::from_json(&enc.to_json().unwrap()).unwrap(), enc);
        }
    }

    #[test]
    fn backward_matches_differences() {
        // gradient of sum(head * c) for a fixed weighting c
        let mut enc = init_encoder(EncoderKind::DeepGaussian, 4, 3, 17).unwrap();
        for layer in enc.layers_mut() {
            layer.weights.iter_mut().for_each(|w| *w *= 50.0);
        }
        let x = DVector::from_vec(vec![1.0, 0.0, 2.0, 1.0]);
        let c = DVector::from_fn(6, |i, _| (i as f64 * 0.7).cos());
        let f = |e: &Encoder| {
            let (h, _) = e.forward(&x).unwrap();
            h.mu.dot(&c.rows(0, 3)) + h.log_var.dot(&c.rows(3, 3))
        };
        let (_, cache) = enc.forward(&x).unwrap();
        let grads = enc.backward(&cache, &c);
        let step = 1e-6;
        for l in 0..enc.layers().len() {
            for idx in 0..enc.layers()[l].weights.len() {
                let mut plus = enc.clone();
                plus.layers_mut()[l].weights[idx] += step;
                let mut minus = enc.clone();
                minus.layers_mut()[l].weights[idx] -= step;
                let fd = (f(&plus) - f(&minus)) / (2.0 * step);
                assert!((fd - grads[l].weights[idx]).abs() < 1e-6);
            }
        }
    }
}
