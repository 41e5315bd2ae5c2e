#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use tricon_core::data::{self, ClientShard};
use tricon_core::model::{self, Activation, LayeredParams, MlpConfig, Tensor2D};
use tricon_core::pipeline::{self, Federation, RunConfig};
use tricon_core::shuffle::{self, DefenseConfig};
use tricon_core::Error;

pub type Check = std::result::Result<(), TestCaseError>;

/// Maximum relative error between analytic and central-difference gradients.
pub fn gradient_check(params: &LayeredParams, x: &Tensor2D, y: &[usize], h: f64) -> f64 {
    let (_, g) = model::loss_and_grad(params, x, y).unwrap();
    let analytic = g.flatten();
    let base = params.flatten();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut flat = base.clone();
        flat[i] += h;
        probe.assign_flat(&flat).unwrap();
        let up = model::loss_and_grad(&probe, x, y).unwrap().0;
        flat[i] -= 2.0 * h;
        probe.assign_flat(&flat).unwrap();
        let down = model::loss_and_grad(&probe, x, y).unwrap().0;
        let numeric = (up - down) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

pub fn mlp(input_dim: usize, hidden: Vec<usize>, n_classes: usize, activation: Activation) -> MlpConfig {
    MlpConfig {
        input_dim,
        hidden_dims: hidden,
        n_classes,
        activation,
    }
}

/// Random batch with values in `[-1, 1]` and labels in range.
pub fn random_batch(rows: usize, dim: usize, classes: usize, seed: u64) -> (Tensor2D, Vec<usize>) {
    use rand::Rng;
    let mut r = tricon_core::rng::stream(seed, "test-batch", &[]);
    let x: Vec<f64> = (0..rows * dim).map(|_| r.random_range(-1.0..1.0)).collect();
    let y: Vec<usize> = (0..rows).map(|_| r.random_range(0..classes)).collect();
    (Tensor2D::new(rows, dim, x).unwrap(), y)
}

/// Small federation on synthetic data.
pub fn tiny_federation(n_clients: usize, beta: f64, seed: u64) -> (RunConfig, Federation) {
    let mut cfg = RunConfig::new(n_clients, mlp(4, vec![6], 3, Activation::Relu));
    cfg.beta = beta;
    cfg.seed = seed;
    cfg.rounds = 2;
    cfg.k = 2;
    cfg.s_min = 2;
    cfg.batch_size = 8;
    let d = data::generate_synthetic(3, 4, 12 * n_clients, 0.5, seed).unwrap();
    let fed = Federation::build(&cfg, &d).unwrap();
    (cfg, fed)
}

pub fn clip_bound(z: Vec<f64>, clip: f64, perm_seed: u64, stream: u64) -> Check {
    let cfg = DefenseConfig {
        clip_norm: clip,
        noise_sigma: 0.0,
        perm_seed,
        enabled: true,
        permute: true,
    };
    let out = shuffle::shuffle_clip_noise(&z, &cfg, stream);
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    let orig = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    prop_assert!(norm <= clip * (1.0 + 1e-12), "norm {norm} > {clip}");
    // inside the ball only the order changes
    if orig <= clip {
        prop_assert!((norm - orig).abs() <= 1e-12 * (1.0 + orig));
    }
    Ok(())
}

pub fn permutation_bijective(len: usize, perm_seed: u64, client: usize) -> Check {
    let cfg = DefenseConfig {
        perm_seed,
        ..DefenseConfig::default()
    };
    let p = shuffle::client_permutation(&cfg, client, len);
    let mut seen = vec![false; len];
    for &j in &p {
        prop_assert!(j < len && !seen[j], "not a permutation: {p:?}");
        seen[j] = true;
    }
    prop_assert_eq!(p, shuffle::client_permutation(&cfg, client, len));
    Ok(())
}

pub fn segment_laws(len: usize, k: usize, s_min: usize, seed: u64) -> Check {
    let shard = ClientShard {
        client_id: (seed % 7) as usize,
        indices: (0..len).map(|i| 3 * i + 1).collect(),
        segments: Vec::new(),
    };
    match data::segment(&shard, k, s_min, seed) {
        Ok(s) => {
            prop_assert!(len >= k * s_min);
            prop_assert_eq!(s.segments.len(), k);
            let mut all: Vec<usize> = s.segments.iter().flatten().copied().collect();
            all.sort_unstable();
            let mut want = shard.indices.clone();
            want.sort_unstable();
            prop_assert_eq!(all, want);
            for g in &s.segments {
                prop_assert!(g.len() >= s_min);
                prop_assert!(g.len() == len / k || g.len() == len / k + 1);
            }
        }
        Err(Error::Segmentation { required, .. }) => {
            prop_assert!(len < k * s_min);
            prop_assert_eq!(required, k * s_min);
        }
        Err(e) => return Err(TestCaseError::fail(e.to_string())),
    }
    Ok(())
}

/// The perturbation is applied exactly once, before round 1, and the first
/// round starts from exactly those parameters.
pub fn single_initialization(seed: u64, sigma: f64, rounds: usize) -> Check {
    let (mut cfg, fed) = tiny_federation(3, 1.0, seed);
    cfg.sigma = sigma;
    cfg.rounds = rounds;
    let h = pipeline::run_tricon(&cfg, &fed).unwrap();
    prop_assert_eq!(h.perturbation_count, 1);
    let (init, layers) = cfg.initial_params().unwrap();
    prop_assert_eq!(&h.initial_params, &init);
    prop_assert_eq!(&h.perturbed_layers, &layers);
    Ok(())
}

pub fn frozen_layers_immutable(seed: u64, rounds: usize, fedavg: bool) -> Check {
    let (mut cfg, fed) = tiny_federation(3, 0.5, seed);
    cfg.rounds = rounds;
    cfg.sigma = 0.1;
    let h = if fedavg {
        pipeline::run_fedavg(&cfg, &fed).unwrap()
    } else {
        pipeline::run_tricon(&cfg, &fed).unwrap()
    };
    let mask = h.initial_params.freeze_mask().to_vec();
    prop_assert!(mask.iter().any(|f| *f));
    for (l, frozen) in mask.iter().enumerate() {
        let same = h.initial_params.layers()[l] == h.final_params.layers()[l];
        if *frozen {
            prop_assert!(same, "frozen layer {l} changed");
        }
    }
    Ok(())
}

pub fn bit_determinism(seed: u64, beta: f64) -> Check {
    let (cfg, fed) = tiny_federation(3, beta, seed);
    let (cfg2, fed2) = tiny_federation(3, beta, seed);
    let a = pipeline::run_tricon(&cfg, &fed).unwrap();
    let b = pipeline::run_tricon(&cfg2, &fed2).unwrap();
    let bytes = |h: &pipeline::RunHistory| {
        let mut v = Vec::new();
        h.write_jsonl(&mut v).unwrap();
        h.ledger.write_csv(&mut v).unwrap();
        v.extend(h.final_params.flatten().iter().flat_map(|x| x.to_bits().to_le_bytes()));
        v
    };
    prop_assert_eq!(bytes(&a), bytes(&b));
    Ok(())
}
