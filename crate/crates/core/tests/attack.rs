mod common;

use tricon_core::attack::{self, AttackConfig};
use tricon_core::model::{self, Activation, Tensor2D};
use tricon_core::shuffle::DefenseConfig;

use common::mlp;

fn victim(seed: u64) -> (tricon_core::model::LayeredParams, Tensor2D) {
    let p = model::init_params(&mlp(64, vec![32], 4, Activation::Tanh), seed).unwrap();
    let x = Tensor2D::new(1, 64, attack::synthetic_image(8, seed)).unwrap();
    (p, x)
}

#[test]
fn unprotected_attack_beats_a_random_guess() {
    let (p, x) = victim(21);
    let cfg = AttackConfig {
        steps: 2000,
        seed: 21,
        ..AttackConfig::default()
    };
    let res = attack::attack_sample(&p, &x, &[1], &cfg, 0).unwrap();
    let random = attack::random_guess_mse(&x, 21);
    assert!(res.input_mse.unwrap() <= 0.2 * random, "{} vs {random}", res.input_mse.unwrap());
    let y = res.label_distribution.row(0);
    assert!(y.iter().all(|v| *v >= 0.0));
    assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
}

#[test]
fn noop_defense_leaves_the_attack_unchanged() {
    let (p, x) = victim(22);
    let cfg = AttackConfig {
        steps: 300,
        seed: 22,
        ..AttackConfig::default()
    };
    let noop = DefenseConfig {
        clip_norm: 1e300,
        noise_sigma: 0.0,
        perm_seed: 0,
        enabled: true,
        permute: false,
    };
    let pair = attack::paired_attack(&p, &x, &[2], &cfg, &noop, 0).unwrap();
    let (u, q) = (pair.unprotected.input_mse.unwrap(), pair.protected.input_mse.unwrap());
    assert!((u - q).abs() <= 1e-9 * (1.0 + u), "{u} vs {q}");
}

#[test]
fn defense_raises_reconstruction_error() {
    let (p, x) = victim(23);
    let cfg = AttackConfig {
        steps: 500,
        seed: 23,
        ..AttackConfig::default()
    };
    let pair = attack::paired_attack(&p, &x, &[0], &cfg, &DefenseConfig::default(), 23).unwrap();
    assert!(pair.ratio > 1.0, "{}", pair.ratio);
    let json = serde_json::to_value(&pair).unwrap();
    for key in ["protected", "unprotected", "ratio"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn invalid_settings_rejected() {
    let (p, _) = victim(0);
    let g = tricon_core::model::Gradients::zeros_like(&p);
    for cfg in [
        AttackConfig { steps: 0, ..AttackConfig::default() },
        AttackConfig { restarts: 0, ..AttackConfig::default() },
        AttackConfig { attack_lr: 0.0, ..AttackConfig::default() },
    ] {
        assert!(matches!(attack::invert_gradient(&g, &p, &cfg), Err(tricon_core::Error::Config(_))));
    }
}
