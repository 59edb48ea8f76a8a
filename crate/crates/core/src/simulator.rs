//! Synthetic sessions drawn from the latent session model itself, and the
//! seven-product case-study fixture.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ItemCatalog, Session, SessionSet};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numeric::softmax_in_place;

/// Parameters sessions are generated from, plus the generation seed.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub params: ModelParams,
    pub seed: u64,
}

impl GroundTruth {
    /// Random ground truth: embedding entries `N(0, psi_scale^2)` and
    /// popularity shifts `N(0, rho_scale^2)`.
    pub fn random(num_items: usize, dim: usize, psi_scale: f64, rho_scale: f64, seed: u64) -> Result<Self> {
        if !(psi_scale >= 0.0 && rho_scale >= 0.0) {
            return Err(Error::arg("scales must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi_dist = Normal::new(0.0, psi_scale).map_err(|e| Error::arg(e.to_string()))?;
        let rho_dist = Normal::new(0.0, rho_scale).map_err(|e| Error::arg(e.to_string()))?;
        let psi = DMatrix::from_fn(num_items, dim, |_, _| psi_dist.sample(&mut rng));
        let rho = DVector::from_fn(num_items, |_, _| rho_dist.sample(&mut rng));
        Ok(Self {
            params: ModelParams::new(psi, rho)?,
            seed,
        })
    }
}

/// Session length law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthSpec {
    Fixed(usize),
    /// `Poisson(lambda) + 1`.
    PoissonPlusOne(f64),
}

impl LengthSpec {
    fn validate(&self) -> Result<()> {
        match *self {
            LengthSpec::Fixed(0) => Err(Error::arg("fixed session length must be at least 1")),
            LengthSpec::PoissonPlusOne(l) if !(l > 0.0 && l.is_finite()) => {
                Err(Error::arg("Poisson rate must be positive and finite"))
            }
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        match *self {
            LengthSpec::Fixed(n) => n,
            LengthSpec::PoissonPlusOne(l) => {
                let draw: f64 = Poisson::new(l).expect("validated rate").sample(rng);
                draw as usize + 1
            }
        }
    }
}

impl std::str::FromStr for LengthSpec {
    type Err = Error;

    /// `N` for a fixed length or `poisson:LAMBDA`.
    fn from_str(s: &str) -> Result<Self> {
        let spec = if let Some(rate) = s.strip_prefix("poisson:") {
            LengthSpec::PoissonPlusOne(
                rate.parse()
                    .map_err(|_| Error::arg(format!("bad Poisson rate {rate:?}")))?,
            )
        } else {
            LengthSpec::Fixed(
                s.parse()
                    .map_err(|_| Error::arg(format!("bad session length {s:?}")))?,
            )
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// One session: its latent state and its views.
pub fn simulate_session(params: &ModelParams, length: usize, rng: &mut ChaCha8Rng) -> Result<(DVector<f64>, Vec<usize>)> {
    let omega = DVector::from_fn(params.dim(), |_, _| StandardNormal.sample(rng));
    let mut probs = params.logits(&omega)?;
    softmax_in_place(probs.as_mut_slice());
    let dist = WeightedIndex::new(probs.iter()).map_err(|e| Error::numeric(e.to_string()))?;
    let views = (0..length).map(|_| dist.sample(rng)).collect();
    Ok((omega, views))
}

/// Draws `num_sessions` sessions. Session `i` uses stream `i` of the
/// ground-truth seed, so output does not depend on generation order.
pub fn simulate(gt: &GroundTruth, num_sessions: usize, length: LengthSpec) -> Result<SessionSet> {
    simulate_with_states(gt, num_sessions, length).map(|(set, _)| set)
}

/// Like [`simulate`], also returning each session's latent state.
pub fn simulate_with_states(
    gt: &GroundTruth,
    num_sessions: usize,
    length: LengthSpec,
) -> Result<(SessionSet, Vec<DVector<f64>>)> {
    if num_sessions == 0 {
        return Err(Error::arg("need at least one session"));
    }
    length.validate()?;
    let width = (num_sessions - 1).to_string().len();
    let mut sessions = Vec::with_capacity(num_sessions);
    let mut states = Vec::with_capacity(num_sessions);
    for i in 0..num_sessions {
        let mut rng = ChaCha8Rng::seed_from_u64(gt.seed);
        // stream 0 is left to ground-truth generation
        rng.set_stream(i as u64 + 1);
        let t = length.sample(&mut rng);
        let (omega, views) = simulate_session(&gt.params, t, &mut rng)?;
        sessions.push(Session::new(format!("{i:0width$}"), views));
        states.push(omega);
    }
    let set = SessionSet::new(sessions, ItemCatalog::new(gt.params.num_items())?)?;
    Ok((set, states))
}

pub const SLEEK_PHONE: usize = 0;
pub const CITY_PHONE: usize = 1;
pub const WOMENS_SHIRT: usize = 5;
pub const MENS_SHIRT: usize = 6;

/// The seven-product example: two phones, two grains, beer and a pair of
/// anti-correlated shirts over five interest components (phones, grains,
/// drinks, women's clothes, men's clothes), with zero popularity shift.
pub fn case_study_fixture() -> (GroundTruth, ItemCatalog) {
    #[rustfmt::skip]
    let psi = DMatrix::from_row_slice(7, 5, &[
        0.9, 0.05, 0.0, 0.05, 0.0,
        1.0, 0.0,  0.0, 0.0,  0.0,
        0.0, 0.95, 0.0, 0.1,  0.0,
        0.0, 1.0,  0.0, 0.0,  0.0,
        0.0, 0.2,  0.7, 0.0,  0.0,
        0.0, 0.0,  0.0, 1.0, -1.0,
        0.0, 0.0,  0.0, -1.0, 1.0,
    ]);
    let labels = [
        "Sleek Phone",
        "City Phone",
        "Couscous",
        "Rice",
        "Beer",
        "Women's shirt",
        "Men's shirt",
    ];
    let params = ModelParams::new(psi, DVector::zeros(7)).expect("fixture is valid");
    let catalog =
        ItemCatalog::with_labels(labels.iter().map(|s| s.to_string()).collect()).expect("seven labels");
    (GroundTruth { params, seed: 0 }, catalog)
}

/// One history of the case study.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub history: Vec<usize>,
}

/// The four histories examined in the case study.
pub fn case_study_scenarios() -> Vec<Scenario> {
    vec![
        Scenario {
            name: "one sleek phone",
            history: vec![SLEEK_PHONE],
        },
        Scenario {
            name: "one sleek phone, two city phones",
            history: vec![SLEEK_PHONE, CITY_PHONE, CITY_PHONE],
        },
        Scenario {
            name: "one sleek phone, twenty city phones",
            history: std::iter::once(SLEEK_PHONE)
                .chain(std::iter::repeat_n(CITY_PHONE, 20))
                .collect(),
        },
        Scenario {
            name: "two women's shirts, one sleek phone",
            history: vec![WOMENS_SHIRT, WOMENS_SHIRT, SLEEK_PHONE],
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_matches_published_values() {
        let (gt, catalog) = case_study_fixture();
        assert_eq!(gt.params.num_items(), 7);
        assert_eq!(gt.params.dim(), 5);
        assert_eq!(gt.params.psi.row(6).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, -1.0, 1.0]);
        assert_eq!(gt.params.psi.row(0).iter().copied().collect::<Vec<_>>(), vec![0.9, 0.05, 0.0, 0.05, 0.0]);
        assert!(gt.params.rho.iter().all(|&r| r == 0.0));
        assert_eq!(catalog.label(SLEEK_PHONE), "Sleek Phone");
        assert_eq!(catalog.label(MENS_SHIRT), "Men's shirt");
    }

    #[test]
    fn length_spec_parsing() {
        assert_eq!("10".parse::<LengthSpec>().unwrap(), LengthSpec::Fixed(10));
        assert_eq!("poisson:4.5".parse::<LengthSpec>().unwrap(), LengthSpec::PoissonPlusOne(4.5));
        assert!("0".parse::<LengthSpec>().is_err());
        assert!("poisson:-1".parse::<LengthSpec>().is_err());
        assert!("ten".parse::<LengthSpec>().is_err());
    }

    #[test]
    fn same_seed_same_sessions() {
        let gt = GroundTruth::random(8, 3, 1.0, 1.0, 5).unwrap();
        let a = simulate(&gt, 20, LengthSpec::PoissonPlusOne(3.0)).unwrap();
        let b = simulate(&gt, 20, LengthSpec::PoissonPlusOne(3.0)).unwrap();
        assert_eq!(a, b);
        assert!(a.sessions().iter().all(|s| !s.is_empty()));
    }

    #[test]
    fn rejects_bad_arguments() {
        let gt = GroundTruth::random(3, 2, 1.0, 1.0, 0).unwrap();
        assert!(simulate(&gt, 0, LengthSpec::Fixed(3)).is_err());
        assert!(simulate(&gt, 3, LengthSpec::Fixed(0)).is_err());
    }

    #[test]
    fn flat_model_gives_uniform_frequencies() {
        let gt = GroundTruth {
            params: ModelParams::zeros(5, 2).unwrap(),
            seed: 11,
        };
        let data = simulate(&gt, 400, LengthSpec::Fixed(10)).unwrap();
        let n = data.num_events() as f64;
        let sd = (n * 0.2 * 0.8).sqrt();
        for c in data.item_counts() {
            assert!((c as f64 - 0.2 * n).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn popularity_shift_sets_frequencies() {
        let gt = GroundTruth {
            params: ModelParams::new(DMatrix::zeros(2, 1), DVector::from_vec(vec![3f64.ln(), 0.0])).unwrap(),
            seed: 2,
        };
        let data = simulate(&gt, 500, LengthSpec::Fixed(8)).unwrap();
        let n = data.num_events() as f64;
        let freq = data.item_counts()[0] as f64 / n;
        let sd = (0.75 * 0.25 / n).sqrt();
        assert!((freq - 0.75).abs() < 4.0 * sd, "{freq}");
    }
}
