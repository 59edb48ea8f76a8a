//! Training behavior on simulated data and round trips through files.

use latent_reco::bouchard::em_infer;
use latent_reco::data::{load_sessions, save_sessions, split_by_session};
use latent_reco::encoder::{Encoder, EncoderKind};
use latent_reco::model::ModelParams;
use latent_reco::simulator::{simulate, GroundTruth, LengthSpec};
use latent_reco::trainer::{train, BoundKind, TrainConfig};

fn small_data() -> latent_reco::data::SessionSet {
    let gt = GroundTruth::random(20, 5, 1.0, 0.5, 31).unwrap();
    simulate(&gt, 120, LengthSpec::Fixed(10)).unwrap()
}

fn config(bound: BoundKind, encoder: EncoderKind) -> TrainConfig {
    TrainConfig {
        bound,
        encoder,
        k: 5,
        epochs: 150,
        learning_rate: 0.003,
        batch_size: 10,
        mc_samples: 2,
        seed: 2,
        ..TrainConfig::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn objective_improves_in_every_mode() {
    let data = small_data();
    for (bound, encoder) in [
        (BoundKind::Bouchard, EncoderKind::LinearBouchard),
        (BoundKind::Reparam, EncoderKind::LinearGaussian),
        (BoundKind::Reparam, EncoderKind::DeepGaussian),
    ] {
        let out = train(&data, &config(bound, encoder)).unwrap();
        let c = &out.loss_curve;
        assert_eq!(c.len(), 150);
        let (head, tail) = (mean(&c[..10]), mean(&c[c.len() - 10..]));
        assert!(tail > head, "{bound:?}/{encoder:?}: {head} -> {tail}");
    }
}

#[test]
fn trained_model_explains_held_out_sessions_better_than_initialization() {
    let data = small_data();
    let (train_set, test_set) = split_by_session(&data, 0.25, 4).unwrap();
    let cfg = config(BoundKind::Bouchard, EncoderKind::LinearBouchard);
    let init = train(&train_set, &TrainConfig { epochs: 0, ..cfg.clone() }).unwrap();
    let out = train(&train_set, &cfg).unwrap();
    let held_out = |p: &ModelParams| -> f64 {
        test_set
            .sessions()
            .iter()
            .map(|s| em_infer(p, &s.views, 50, None).unwrap().final_bound())
            .sum()
    };
    assert!(held_out(&out.params) > held_out(&init.params));
}

#[test]
fn strong_l2_keeps_weights_small() {
    let data = small_data();
    let cfg = config(BoundKind::Reparam, EncoderKind::LinearGaussian);
    let free = train(&data, &cfg).unwrap();
    let tied = train(&data, &TrainConfig { l2: 1.0, ..cfg }).unwrap();
    assert!(tied.params.psi.norm() < free.params.psi.norm());
    assert!(tied.encoder.weight_norm_sq() < free.encoder.weight_norm_sq());
    assert!(tied.params.psi.iter().all(|v| v.is_finite()));
}

#[test]
fn artifacts_survive_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data();
    let csv = dir.path().join("sessions.csv");
    save_sessions(&data, &csv).unwrap();
    let reread = load_sessions(&csv, Some(20)).unwrap();
    assert_eq!(reread.sessions(), data.sessions());

    let out = train(&reread, &TrainConfig { epochs: 3, ..config(BoundKind::Reparam, EncoderKind::DeepGaussian) }).unwrap();
    for name in ["model.txt", "model.json"] {
        let path = dir.path().join(name);
        out.params.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), out.params);
    }
    let enc = dir.path().join("encoder.json");
    out.encoder.save(&enc).unwrap();
    assert_eq!(Encoder::load(&enc).unwrap(), out.encoder);
}
