mod common;

use tricon_core::comms::{self, ChannelParams};
use tricon_core::data::{self, Dataset};
use tricon_core::model::{self, Activation};
use tricon_core::pipeline::{self, AdversaryKind, Federation, RunConfig};

use common::mlp;

fn separable(seed: u64) -> Dataset {
    data::generate_synthetic(4, 10, 150, 0.5, seed).unwrap()
}

fn config(n: usize, beta: f64, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(n, mlp(10, vec![16], 4, Activation::Relu));
    cfg.beta = beta;
    cfg.seed = seed;
    cfg
}

#[test]
fn near_iid_serial_training_reaches_high_accuracy() {
    for seed in 0..3 {
        let mut cfg = config(5, 10.0, seed);
        cfg.rounds = 40;
        let fed = Federation::build(&cfg, &separable(seed)).unwrap();
        let h = pipeline::run_tricon(&cfg, &fed).unwrap();
        let acc = h.final_accuracy().unwrap();
        assert!(acc >= 0.95, "seed {seed}: {acc}");
    }
}

#[test]
fn fedavg_degrades_under_label_skew() {
    let (mut skewed, mut iid) = (0.0, 0.0);
    for seed in 0..5 {
        for (beta, acc) in [(0.5, &mut skewed), (10.0, &mut iid)] {
            let mut cfg = RunConfig::new(10, mlp(20, vec![32], 10, Activation::Relu));
            cfg.beta = beta;
            cfg.seed = seed;
            cfg.rounds = 10;
            let d = data::generate_synthetic(10, 20, 200, 1.0, seed).unwrap();
            let fed = Federation::build(&cfg, &d).unwrap();
            *acc += pipeline::run_fedavg(&cfg, &fed).unwrap().final_accuracy().unwrap();
        }
    }
    assert!(skewed < iid, "beta=0.5 {skewed} vs beta=10 {iid}");
}

#[test]
fn hand_off_preserves_parameters_bit_for_bit() {
    let mut cfg = config(4, 1.0, 3);
    cfg.sigma = 0.2;
    cfg.rounds = 3;
    let mut fed = Federation::build(&cfg, &separable(3)).unwrap();
    for c in 0..4 {
        pipeline::inject_adversary(&mut fed, AdversaryKind::FreeRider, c).unwrap();
    }
    let h = pipeline::run_tricon(&cfg, &fed).unwrap();
    assert_eq!(h.final_params, h.initial_params);
    assert_eq!(h.ledger.len(), 12);
}

#[test]
fn ledger_totals_match_formulas_and_timing() {
    let mut cfg = config(3, 1.0, 4);
    cfg.rounds = 4;
    let rates = [1e6, 2e6, 4e6];
    cfg.channels = Some(
        rates
            .iter()
            .map(|&r| ChannelParams {
                bandwidth: r,
                power: 1.0,
                gain: 1.0,
                noise: 1.0,
            })
            .collect(),
    );
    let fed = Federation::build(&cfg, &separable(4)).unwrap();
    let h = pipeline::run_tricon(&cfg, &fed).unwrap();
    let (serial, _) = comms::cost_totals(4, 3, h.model_bits);
    assert_eq!(h.ledger.total_bits(), serial);
    assert_eq!(h.ledger.total_bits(), h.ledger.transmissions().iter().map(|t| t.bits).sum::<u64>());
    let bits = h.model_bits as f64;
    let per_round = bits / 1e6 + bits / 2e6 + bits / 4e6;
    for t in h.ledger.round_times() {
        assert!((t - per_round).abs() <= 1e-9 * per_round);
    }
    assert_eq!(h.model_bits, model::init_params(&cfg.model, 0).unwrap().num_params() as u64 * 32);
}

#[test]
fn round_time_grows_with_bits_and_clients() {
    let ch = vec![ChannelParams::default(); 6];
    let mut last = 0.0;
    for n in 1..=6 {
        let order: Vec<usize> = (0..n).collect();
        let t = comms::round_time(&order, &ch, 1000).unwrap();
        assert!(t > last);
        assert!(comms::round_time(&order, &ch, 1001).unwrap() > t);
        last = t;
    }
}

#[test]
fn every_class_split_eight_one_one() {
    let d = data::generate_synthetic(2, 3, 50, 1.0, 9).unwrap();
    let (tr, va, te) = data::stratified_split(&d, &data::SplitSpec::default(), 9).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
    assert_eq!(tr.class_counts(), vec![40, 40]);
    assert_eq!(va.class_counts(), vec![5, 5]);
    assert_eq!(te.class_counts(), vec![5, 5]);
}

#[test]
fn skew_is_larger_at_small_beta_over_twenty_seeds() {
    let d = data::generate_synthetic(5, 2, 100, 1.0, 0).unwrap();
    let (mut lo, mut hi) = (0.0, 0.0);
    for seed in 0..20 {
        lo += data::mean_label_skew(&d, &data::dirichlet_partition(&d, 10, 0.5, seed).unwrap());
        hi += data::mean_label_skew(&d, &data::dirichlet_partition(&d, 10, 10.0, seed).unwrap());
    }
    assert!(lo > hi, "{lo} vs {hi}");
}
