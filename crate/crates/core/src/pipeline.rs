//! Serial triple-shuffle training and the FedAvg parallel baseline.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comms::{self, ChannelParams, CommLedger, Endpoint, Transmission};
use crate::data::{self, ClientShard, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{self, FeatureTransform, LayeredParams, MlpConfig};
use crate::rng::{self, StreamRng};
use crate::shuffle::{self, DefenseConfig, FeatureDefense, RoundPlan};

/// Training run settings shared by both methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n_clients: usize,
    /// Segments per client.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Minimum segment size.
    #[serde(default = "default_s_min")]
    pub s_min: usize,
    pub rounds: usize,
    /// Local SGD steps per client visit; `None` means one pass over the
    /// selected data, `ceil(len / batch_size)` steps.
    #[serde(default)]
    pub tau: Option<usize>,
    pub lr: f64,
    pub beta: f64,
    /// Std of the initial layer perturbation.
    #[serde(default)]
    pub sigma: f64,
    /// Fraction of layers receiving the initial perturbation.
    #[serde(default = "default_fraction")]
    pub perturb_fraction: f64,
    /// Re-apply the layer perturbation at the start of every round.
    #[serde(default)]
    pub perturb_every_round: bool,
    #[serde(default)]
    pub defense: DefenseConfig,
    pub model: MlpConfig,
    /// Per-layer freeze mask; defaults to freezing the first layer.
    #[serde(default)]
    pub freeze_mask: Option<Vec<bool>>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_target")]
    pub target_accuracy: f64,
    /// Per-client channels; homogeneous defaults when absent.
    #[serde(default)]
    pub channels: Option<Vec<ChannelParams>>,
}

fn default_k() -> usize {
    2
}
fn default_s_min() -> usize {
    4
}
fn default_fraction() -> f64 {
    0.5
}
fn default_batch() -> usize {
    32
}
fn default_target() -> f64 {
    0.9
}

impl RunConfig {
    /// A small configuration suitable for synthetic experiments.
    pub fn new(n_clients: usize, model: MlpConfig) -> Self {
        Self {
            n_clients,
            k: default_k(),
            s_min: default_s_min(),
            rounds: 20,
            tau: None,
            lr: 0.1,
            beta: 1.0,
            sigma: 0.0,
            perturb_fraction: default_fraction(),
            perturb_every_round: false,
            defense: DefenseConfig::default(),
            model,
            freeze_mask: None,
            batch_size: default_batch(),
            seed: 0,
            target_accuracy: default_target(),
            channels: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_clients == 0 {
            return bad("n_clients must be >= 1".into());
        }
        if self.k == 0 || self.s_min == 0 {
            return bad("k and s_min must be >= 1".into());
        }
        if self.tau == Some(0) {
            return bad("tau must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.perturb_fraction) {
            return bad("perturb_fraction must be in [0, 1]".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return bad("target_accuracy must be in [0, 1]".into());
        }
        self.model.validate()?;
        self.defense.validate()?;
        if self.defense.enabled && self.model.hidden_dims.is_empty() {
            return bad("the feature defense needs at least one hidden layer".into());
        }
        if let Some(m) = &self.freeze_mask {
            if m.len() != self.model.hidden_dims.len() + 1 {
                return bad(format!(
                    "freeze_mask has {} entries for {} layers",
                    m.len(),
                    self.model.hidden_dims.len() + 1
                ));
            }
        }
        if let Some(ch) = &self.channels {
            if ch.len() != self.n_clients {
                return bad(format!("{} channels for {} clients", ch.len(), self.n_clients));
            }
            for c in ch {
                c.validate()?;
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> Vec<ChannelParams> {
        self.channels
            .clone()
            .unwrap_or_else(|| vec![ChannelParams::default(); self.n_clients])
    }

    /// Freshly initialized parameters with the configured freeze mask.
    pub fn init_params(&self) -> Result<LayeredParams> {
        let mut p = model::init_params(&self.model, self.seed)?;
        if let Some(m) = &self.freeze_mask {
            p.set_freeze_mask(m.clone())?;
        }
        Ok(p)
    }

    /// Initialization followed by the one-time layer perturbation.
    pub fn initial_params(&self) -> Result<(LayeredParams, Vec<usize>)> {
        shuffle::perturb_layers(
            &self.init_params()?,
            self.sigma,
            self.perturb_fraction,
            rng::derive_seed(self.seed, "perturb", &[0]),
        )
    }
}

/// How a client treats the model it receives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientBehavior {
    Honest,
    /// Returns the received parameters unchanged.
    FreeRider,
    /// Trains on labels mapped `y -> C - 1 - y`.
    LabelFlipper,
    /// Trains honestly, then adds `N(0, sigma^2)` to its trainable layers.
    NoiseInjector { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryKind {
    FreeRider,
    LabelFlipper,
    NoiseInjector,
}

/// Noise scale used by [`AdversaryKind::NoiseInjector`].
pub const INJECTED_NOISE_STD: f64 = 0.5;

/// Training and evaluation data for a federation of clients.
#[derive(Clone, Debug)]
pub struct Federation {
    /// Pool the shard indices point into.
    pub train: Dataset,
    /// Held-out set used for every accuracy measurement.
    pub val: Dataset,
    pub test: Dataset,
    pub shards: Vec<ClientShard>,
    pub behaviors: Vec<ClientBehavior>,
}

impl Federation {
    /// Stratified 8:1:1 split, Dirichlet partition of the training part and
    /// per-client segmentation. The partition is re-drawn until every client
    /// satisfies `|D_i| >= k * s_min`.
    pub fn build(config: &RunConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let (train, val, test) = data::stratified_split(dataset, &SplitSpec::default(), config.seed)?;
        let required = config.k * config.s_min;
        let shards = data::dirichlet_partition_min(&train, config.n_clients, config.beta, config.seed, required)
            .map_err(|e| match e {
                Error::Partition(m) => Error::Config(format!(
                    "cannot satisfy min_i |D_i| >= k * s_min = {} * {} = {required}: {m}",
                    config.k, config.s_min
                )),
                other => other,
            })?;
        Self::from_shards(config, train, val, test, shards)
    }

    /// Segment caller-provided shards of `train`.
    pub fn from_shards(
        config: &RunConfig,
        train: Dataset,
        val: Dataset,
        test: Dataset,
        shards: Vec<ClientShard>,
    ) -> Result<Self> {
        if shards.len() != config.n_clients {
            return Err(Error::Config(format!(
                "{} shards for {} clients",
                shards.len(),
                config.n_clients
            )));
        }
        let segmented = shards
            .iter()
            .map(|s| data::segment(s, config.k, config.s_min, config.seed))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Config(e.to_string()))?;
        let n = segmented.len();
        Ok(Self {
            train,
            val,
            test,
            shards: segmented,
            behaviors: vec![ClientBehavior::Honest; n],
        })
    }

    pub fn n_clients(&self) -> usize {
        self.shards.len()
    }

    fn check_segments(&self, config: &RunConfig) -> Result<()> {
        for s in &self.shards {
            if s.segments.len() != config.k || s.segments.iter().any(|g| g.len() < config.s_min) {
                return Err(Error::Config(format!(
                    "client {} is not segmented into k = {} parts of at least s_min = {}",
                    s.client_id, config.k, config.s_min
                )));
            }
        }
        Ok(())
    }
}

/// Replace a client's behavior with the given adversary.
pub fn inject_adversary(fed: &mut Federation, kind: AdversaryKind, client: usize) -> Result<ClientBehavior> {
    let slot = fed
        .behaviors
        .get_mut(client)
        .ok_or_else(|| Error::Config(format!("adversary client {client} out of range")))?;
    *slot = match kind {
        AdversaryKind::FreeRider => ClientBehavior::FreeRider,
        AdversaryKind::LabelFlipper => ClientBehavior::LabelFlipper,
        AdversaryKind::NoiseInjector => ClientBehavior::NoiseInjector {
            sigma: INJECTED_NOISE_STD,
        },
    };
    Ok(*slot)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub val_acc: f64,
    pub val_loss: f64,
    /// Cumulative model transmissions.
    pub tx_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<RoundRecord>,
    /// Parameters after initialization and perturbation.
    pub initial_params: LayeredParams,
    pub final_params: LayeredParams,
    pub perturbed_layers: Vec<usize>,
    /// Number of times the layer perturbation was applied.
    pub perturbation_count: usize,
    pub ledger: CommLedger,
    pub model_bits: u64,
}

impl RunHistory {
    /// One JSON object per round: `{"round", "val_acc", "val_loss", "tx_count"}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.val_acc)
    }
}

/// First (1-based) round whose validation accuracy reaches `target`.
pub fn rounds_to_target(history: &RunHistory, target: f64) -> Option<usize> {
    rounds_to_target_in(&history.records, target)
}

pub fn rounds_to_target_in(records: &[RoundRecord], target: f64) -> Option<usize> {
    records.iter().find(|r| r.val_acc >= target).map(|r| r.round)
}

/// Number of local steps for a client visit over `len` samples.
pub fn local_steps(config: &RunConfig, len: usize) -> usize {
    config.tau.unwrap_or_else(|| len.div_ceil(config.batch_size.min(len).max(1)))
}

/// Mini-batch SGD on `indices` of `data`. Batches of `min(batch_size, len)`
/// are drawn without replacement from a shuffled order that is reshuffled
/// once exhausted; rows inside a batch are taken in ascending index order.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    params: &LayeredParams,
    data: &Dataset,
    indices: &[usize],
    steps: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut StreamRng,
    flip_labels: bool,
    mut transform: Option<&mut dyn FeatureTransform>,
) -> Result<LayeredParams> {
    if indices.is_empty() {
        return Err(Error::Precondition("local training on an empty index set".into()));
    }
    let b = batch_size.min(indices.len()).max(1);
    let c = data.n_classes();
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut pos = 0;
    let mut p = params.clone();
    for _ in 0..steps {
        if pos >= order.len() {
            order.shuffle(rng);
            pos = 0;
        }
        let end = (pos + b).min(order.len());
        let mut batch = order[pos..end].to_vec();
        pos = end;
        batch.sort_unstable();
        let x = data.features().select_rows(&batch);
        let y: Vec<usize> = batch
            .iter()
            .map(|&i| {
                let y = data.labels()[i];
                if flip_labels {
                    c - 1 - y
                } else {
                    y
                }
            })
            .collect();
        let (loss, g) = model::loss_and_grad_with(&p, &x, &y, transform.as_mut().map(|t| &mut **t as &mut dyn FeatureTransform))?;
        if !loss.is_finite() || !g.is_finite() {
            return Err(Error::Divergence("non-finite loss during local training".into()));
        }
        p = model::sgd_step(&p, &g, lr)?;
    }
    Ok(p)
}

/// One client's update on `indices`, honoring its behavior and the defense.
fn client_update(
    config: &RunConfig,
    fed: &Federation,
    params: &LayeredParams,
    client: usize,
    indices: &[usize],
    round: usize,
) -> Result<LayeredParams> {
    let behavior = fed.behaviors[client];
    if behavior == ClientBehavior::FreeRider {
        return Ok(params.clone());
    }
    let mut r = rng::stream(config.seed, "batches", &[round as u64, client as u64]);
    let steps = local_steps(config, indices.len());
    let mut defense = config.defense.enabled.then(|| {
        FeatureDefense::for_client(
            &config.defense,
            client,
            config.model.hidden_dims[0],
            rng::derive_seed(config.seed, "defense-noise", &[round as u64, client as u64]),
        )
    });
    let mut out = local_train(
        params,
        &fed.train,
        indices,
        steps,
        config.batch_size,
        config.lr,
        &mut r,
        behavior == ClientBehavior::LabelFlipper,
        defense.as_mut().map(|d| d as &mut dyn FeatureTransform),
    )?;
    if let ClientBehavior::NoiseInjector { sigma } = behavior {
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            let mut nr = rng::stream(config.seed, "adversary-noise", &[round as u64, client as u64]);
            let mask = out.freeze_mask().to_vec();
            for (layer, frozen) in out.layers_mut().iter_mut().zip(mask) {
                if !frozen {
                    layer.values_mut().for_each(|v| *v += normal.sample(&mut nr));
                }
            }
        }
    }
    Ok(out)
}

/// Client visiting order within a serial round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderPolicy {
    /// Fresh random permutation every round.
    Shuffled,
    /// Ascending client index.
    Canonical,
}

/// Serial triple-shuffle training over all clients.
pub fn run_tricon(config: &RunConfig, fed: &Federation) -> Result<RunHistory> {
    let all: Vec<usize> = (0..fed.n_clients()).collect();
    run_serial(config, fed, &all, OrderPolicy::Shuffled, config.rounds)
}

/// Serial training restricted to `members`.
pub fn run_serial(
    config: &RunConfig,
    fed: &Federation,
    members: &[usize],
    order: OrderPolicy,
    rounds: usize,
) -> Result<RunHistory> {
    config.validate()?;
    fed.check_segments(config)?;
    if let Some(&bad) = members.iter().find(|&&c| c >= fed.n_clients()) {
        return Err(Error::Config(format!("client {bad} out of range")));
    }
    let channels = config.channels();
    let (initial, perturbed_layers) = config.initial_params()?;
    let bits = comms::model_bits(&initial);
    let mut perturbation_count = 1;
    let mut params = initial.clone();
    let mut ledger = CommLedger::new();
    let mut records = Vec::with_capacity(rounds);
    let mut holder = Endpoint::Server;
    let k_per_client: Vec<usize> = fed.shards.iter().map(|s| s.segments.len()).collect();

    for t in 1..=rounds {
        if config.perturb_every_round && t > 1 {
            params = shuffle::perturb_layers(
                &params,
                config.sigma,
                config.perturb_fraction,
                rng::derive_seed(config.seed, "perturb", &[t as u64]),
            )?
            .0;
            perturbation_count += 1;
        }
        let plan = RoundPlan::sample(t, &k_per_client, config.seed);
        let visit: Vec<usize> = match order {
            OrderPolicy::Shuffled => plan.client_order.iter().copied().filter(|c| members.contains(c)).collect(),
            OrderPolicy::Canonical => {
                let mut m = members.to_vec();
                m.sort_unstable();
                m.dedup();
                m
            }
        };
        for c in visit {
            let seconds = comms::transmission_time(bits, comms::rate(&channels[c]), &format!("client {c}"))?;
            ledger.record(Transmission {
                round: t,
                from: holder,
                to: Endpoint::Client(c),
                bits,
                seconds,
            })?;
            holder = Endpoint::Client(c);
            let segment = &fed.shards[c].segments[plan.segment_choice[c]];
            params = client_update(config, fed, &params, c, segment, t)?;
        }
        let (val_acc, val_loss) = model::evaluate(&params, fed.val.features(), fed.val.labels())?;
        records.push(RoundRecord {
            round: t,
            val_acc,
            val_loss,
            tx_count: ledger.len(),
        });
        log::debug!("serial round {t}: val_acc {val_acc:.4}");
    }
    Ok(RunHistory {
        records,
        initial_params: initial,
        final_params: params,
        perturbed_layers,
        perturbation_count,
        ledger,
        model_bits: bits,
    })
}

/// FedAvg: every client trains from the global model on its full shard; the
/// server averages the results weighted by shard size. Frozen layers are
/// carried over from the global model unchanged.
pub fn run_fedavg(config: &RunConfig, fed: &Federation) -> Result<RunHistory> {
    config.validate()?;
    if fed.shards.is_empty() || fed.shards.iter().any(ClientShard::is_empty) {
        return Err(Error::Config("FedAvg needs non-empty shards".into()));
    }
    let channels = config.channels();
    let initial = config.init_params()?;
    let bits = comms::model_bits(&initial);
    let mut global = initial.clone();
    let mut ledger = CommLedger::new();
    let mut records = Vec::with_capacity(config.rounds);
    let total: f64 = fed.shards.iter().map(|s| s.len() as f64).sum();

    for t in 1..=config.rounds {
        let updates = (0..fed.n_clients())
            .into_par_iter()
            .map(|c| client_update(config, fed, &global, c, &fed.shards[c].indices, t))
            .collect::<Result<Vec<_>>>()?;
        for c in 0..fed.n_clients() {
            let seconds = comms::transmission_time(bits, comms::rate(&channels[c]), &format!("client {c}"))?;
            ledger.record(Transmission {
                round: t,
                from: Endpoint::Server,
                to: Endpoint::Client(c),
                bits,
                seconds,
            })?;
            ledger.record(Transmission {
                round: t,
                from: Endpoint::Client(c),
                to: Endpoint::Server,
                bits,
                seconds,
            })?;
        }
        global = weighted_average(&global, &updates, &fed.shards, total);
        let (val_acc, val_loss) = model::evaluate(&global, fed.val.features(), fed.val.labels())?;
        records.push(RoundRecord {
            round: t,
            val_acc,
            val_loss,
            tx_count: ledger.len(),
        });
        log::debug!("fedavg round {t}: val_acc {val_acc:.4}");
    }
    Ok(RunHistory {
        records,
        initial_params: initial,
        final_params: global,
        perturbed_layers: Vec::new(),
        perturbation_count: 0,
        ledger,
        model_bits: bits,
    })
}

fn weighted_average(global: &LayeredParams, updates: &[LayeredParams], shards: &[ClientShard], total: f64) -> LayeredParams {
    let mut out = global.clone();
    let mask = global.freeze_mask().to_vec();
    for (l, frozen) in mask.into_iter().enumerate() {
        if frozen {
            continue;
        }
        let layer = &mut out.layers_mut()[l];
        layer.values_mut().for_each(|v| *v = 0.0);
        for (u, s) in updates.iter().zip(shards) {
            let w = s.len() as f64 / total;
            for (dst, src) in layer.values_mut().zip(u.layers()[l].values()) {
                *dst += w * src;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    fn mlp(dim: usize, classes: usize) -> MlpConfig {
        MlpConfig {
            input_dim: dim,
            hidden_dims: vec![16],
            n_classes: classes,
            activation: Activation::Relu,
        }
    }

    fn setup(n: usize, beta: f64, seed: u64) -> (RunConfig, Federation) {
        let mut cfg = RunConfig::new(n, mlp(4, 3));
        cfg.beta = beta;
        cfg.seed = seed;
        cfg.rounds = 5;
        let d = data::generate_synthetic(3, 4, 60, 0.5, seed).unwrap();
        let fed = Federation::build(&cfg, &d).unwrap();
        (cfg, fed)
    }

    #[test]
    fn zero_rounds_returns_initial_params() {
        let (mut cfg, fed) = setup(3, 1.0, 1);
        cfg.rounds = 0;
        cfg.sigma = 0.3;
        let h = run_tricon(&cfg, &fed).unwrap();
        assert!(h.records.is_empty());
        assert_eq!(h.final_params, h.initial_params);
        assert_eq!(h.final_params, cfg.initial_params().unwrap().0);
        assert_eq!(h.perturbation_count, 1);
    }

    #[test]
    fn serial_transmission_count() {
        let (cfg, fed) = setup(4, 1.0, 2);
        let h = run_tricon(&cfg, &fed).unwrap();
        assert_eq!(h.ledger.len(), cfg.rounds * 4);
        assert_eq!(h.records.last().unwrap().tx_count, cfg.rounds * 4);
        // each round's first hop comes from the previous holder
        assert_eq!(h.ledger.transmissions()[0].from, Endpoint::Server);
        for w in h.ledger.transmissions().windows(2) {
            assert_eq!(Endpoint::Client(match w[0].to {
                Endpoint::Client(c) => c,
                Endpoint::Server => unreachable!(),
            }), w[1].from);
        }
    }

    #[test]
    fn fedavg_transmission_count() {
        let (cfg, fed) = setup(4, 1.0, 2);
        let h = run_fedavg(&cfg, &fed).unwrap();
        assert_eq!(h.ledger.len(), cfg.rounds * 8);
    }

    #[test]
    fn runs_are_deterministic() {
        let (cfg, fed) = setup(3, 0.5, 3);
        assert_eq!(run_tricon(&cfg, &fed).unwrap(), run_tricon(&cfg, &fed).unwrap());
        assert_eq!(run_fedavg(&cfg, &fed).unwrap(), run_fedavg(&cfg, &fed).unwrap());
    }

    #[test]
    fn frozen_layer_never_moves() {
        let (mut cfg, fed) = setup(3, 1.0, 4);
        cfg.sigma = 0.2;
        cfg.perturb_fraction = 1.0;
        let h = run_tricon(&cfg, &fed).unwrap();
        assert_eq!(h.final_params.layers()[0], h.initial_params.layers()[0]);
        assert_ne!(h.final_params.layers()[1], h.initial_params.layers()[1]);
        let f = run_fedavg(&cfg, &fed).unwrap();
        assert_eq!(f.final_params.layers()[0], f.initial_params.layers()[0]);
    }

    #[test]
    fn single_client_serial_equals_centralized_sgd() {
        let mut cfg = RunConfig::new(1, mlp(4, 3));
        cfg.k = 1;
        cfg.rounds = 3;
        cfg.seed = 8;
        let d = data::generate_synthetic(3, 4, 30, 0.5, 8).unwrap();
        let fed = Federation::build(&cfg, &d).unwrap();
        let h = run_tricon(&cfg, &fed).unwrap();

        let all = &fed.shards[0].segments[0];
        let mut p = cfg.init_params().unwrap();
        for t in 1..=3u64 {
            let mut r = rng::stream(8, "batches", &[t, 0]);
            p = local_train(&p, &fed.train, all, local_steps(&cfg, all.len()), 32, cfg.lr, &mut r, false, None).unwrap();
        }
        assert_eq!(h.final_params, p);

        let f = run_fedavg(&cfg, &fed).unwrap();
        let mut q = cfg.init_params().unwrap();
        for t in 1..=3u64 {
            let mut r = rng::stream(8, "batches", &[t, 0]);
            let idx = &fed.shards[0].indices;
            q = local_train(&q, &fed.train, idx, local_steps(&cfg, idx.len()), 32, cfg.lr, &mut r, false, None).unwrap();
        }
        assert_eq!(f.final_params, q);
    }

    #[test]
    fn identical_clients_average_to_either() {
        let mut cfg = RunConfig::new(2, mlp(4, 3));
        cfg.rounds = 1;
        cfg.k = 1;
        cfg.tau = Some(1);
        cfg.batch_size = 64;
        let d = data::generate_synthetic(3, 4, 30, 0.5, 1).unwrap();
        let (train, val, test) = data::stratified_split(&d, &SplitSpec::default(), 0).unwrap();
        let idx: Vec<usize> = (0..20).collect();
        let shards = (0..2)
            .map(|c| ClientShard {
                client_id: c,
                indices: idx.clone(),
                segments: vec![],
            })
            .collect();
        let fed = Federation::from_shards(&cfg, train, val, test, shards).unwrap();
        let h = run_fedavg(&cfg, &fed).unwrap();
        let g = cfg.init_params().unwrap();
        let solo = client_update(&cfg, &fed, &g, 0, &idx, 1).unwrap();
        assert_eq!(h.final_params, solo);
    }

    #[test]
    fn rounds_to_target_lookup() {
        let (cfg, fed) = setup(2, 1.0, 0);
        let mut h = run_tricon(&cfg, &fed).unwrap();
        h.records = [0.5, 0.7, 0.9]
            .iter()
            .enumerate()
            .map(|(i, &a)| RoundRecord {
                round: i + 1,
                val_acc: a,
                val_loss: 0.0,
                tx_count: 0,
            })
            .collect();
        assert_eq!(rounds_to_target(&h, 0.0), Some(1));
        assert_eq!(rounds_to_target(&h, 0.7), Some(2));
        assert_eq!(rounds_to_target(&h, 1.01), None);
    }

    #[test]
    fn free_rider_returns_params_unchanged() {
        let (cfg, mut fed) = setup(3, 1.0, 5);
        inject_adversary(&mut fed, AdversaryKind::FreeRider, 1).unwrap();
        let p = cfg.init_params().unwrap();
        let idx = fed.shards[1].indices.clone();
        assert_eq!(client_update(&cfg, &fed, &p, 1, &idx, 1).unwrap(), p);
        assert!(inject_adversary(&mut fed, AdversaryKind::FreeRider, 3).is_err());
    }

    #[test]
    fn label_flipper_trains_on_inverted_labels() {
        let mut cfg = RunConfig::new(2, mlp(4, 2));
        cfg.seed = 2;
        let d = data::generate_synthetic(2, 4, 40, 0.5, 2).unwrap();
        let mut fed = Federation::build(&cfg, &d).unwrap();
        let p = cfg.init_params().unwrap();
        let idx = fed.shards[0].indices.clone();
        inject_adversary(&mut fed, AdversaryKind::LabelFlipper, 0).unwrap();
        let flipped = client_update(&cfg, &fed, &p, 0, &idx, 1).unwrap();

        let inverted: Vec<usize> = fed.train.labels().iter().map(|&y| 1 - y).collect();
        let inv_data = Dataset::new(fed.train.features().clone(), inverted, 2).unwrap();
        let mut r = rng::stream(2, "batches", &[1, 0]);
        let manual = local_train(&p, &inv_data, &idx, local_steps(&cfg, idx.len()), 32, cfg.lr, &mut r, false, None).unwrap();
        assert_eq!(flipped, manual);
    }

    #[test]
    fn zero_noise_injector_is_honest() {
        let (cfg, mut fed) = setup(3, 1.0, 6);
        let p = cfg.init_params().unwrap();
        let idx = fed.shards[2].indices.clone();
        let honest = client_update(&cfg, &fed, &p, 2, &idx, 1).unwrap();
        fed.behaviors[2] = ClientBehavior::NoiseInjector { sigma: 0.0 };
        assert_eq!(client_update(&cfg, &fed, &p, 2, &idx, 1).unwrap(), honest);
        inject_adversary(&mut fed, AdversaryKind::NoiseInjector, 2).unwrap();
        let noisy = client_update(&cfg, &fed, &p, 2, &idx, 1).unwrap();
        assert_ne!(noisy, honest);
        assert_eq!(noisy.layers()[0], honest.layers()[0]);
    }

    #[test]
    fn unsegmented_federation_rejected() {
        let (cfg, mut fed) = setup(2, 1.0, 0);
        fed.shards[0].segments.pop();
        assert!(matches!(run_tricon(&cfg, &fed), Err(Error::Config(_))));
    }

    #[test]
    fn infeasible_segmentation_is_config_error() {
        let mut cfg = RunConfig::new(3, mlp(4, 3));
        cfg.k = 50;
        cfg.s_min = 10;
        let d = data::generate_synthetic(3, 4, 20, 0.5, 0).unwrap();
        match Federation::build(&cfg, &d) {
            Err(Error::Config(m)) => assert!(m.contains("k * s_min")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_schema() {
        let (cfg, fed) = setup(2, 1.0, 0);
        let h = run_tricon(&cfg, &fed).unwrap();
        let mut buf = Vec::new();
        h.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), cfg.rounds);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 4);
        for k in ["round", "val_acc", "val_loss", "tx_count"] {
            assert!(keys.contains(&k));
        }
    }
}
