//! Randomization mechanisms: initial layer perturbation, per-round client
//! order, per-client segment selection, and the permute/clip/noise defense
//! applied to intermediate features.
//!
//! The data-segment shuffle lives in [`crate::data::segment`].

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeatureTransform, LayeredParams, Tensor2D};
use crate::rng::{self, StreamRng};

/// Client order and segment choices for one training round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: usize,
    pub client_order: Vec<usize>,
    pub segment_choice: Vec<usize>,
}

impl RoundPlan {
    /// Plan round `round` for clients holding `segments_per_client[i]` segments each.
    pub fn sample(round: usize, segments_per_client: &[usize], master_seed: u64) -> RoundPlan {
        let n = segments_per_client.len();
        RoundPlan {
            round,
            client_order: sample_client_order(n, round, master_seed),
            segment_choice: segments_per_client
                .iter()
                .enumerate()
                .map(|(c, &k)| select_segment(c, round, k, master_seed))
                .collect(),
        }
    }
}

/// Feature defense settings: permutation, L2 clip radius and Gaussian noise scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    #[serde(default = "one")]
    pub clip_norm: f64,
    #[serde(default = "one")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub perm_seed: u64,
    #[serde(default)]
    pub enabled: bool,
    /// When false the permutation step is the identity.
    #[serde(default = "yes")]
    pub permute: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            noise_sigma: 1.0,
            perm_seed: 0,
            enabled: false,
            permute: true,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("defense clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "defense noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Add `N(0, sigma^2)` noise to a seeded random subset of `ceil(fraction * L)`
/// layers. Returns the new parameters and the perturbed layer indices (ascending).
pub fn perturb_layers(
    params: &LayeredParams,
    sigma: f64,
    fraction: f64,
    seed: u64,
) -> Result<(LayeredParams, Vec<usize>)> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Precondition(format!("sigma must be >= 0, got {sigma}")));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Precondition(format!("fraction must be in [0, 1], got {fraction}")));
    }
    let n_layers = params.n_layers();
    let count = ((fraction * n_layers as f64).ceil() as usize).min(n_layers);
    let mut chosen = index::sample(&mut rng::stream(seed, "perturb-subset", &[]), n_layers, count).into_vec();
    chosen.sort_unstable();
    let mut out = params.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("valid normal");
        for &l in &chosen {
            let mut r = rng::stream(seed, "perturb-noise", &[l as u64]);
            for v in out.layers_mut()[l].values_mut() {
                *v += normal.sample(&mut r);
            }
        }
    }
    Ok((out, chosen))
}

/// Uniform random permutation of `0..n`, fixed per `(master_seed, round)`.
pub fn sample_client_order(n_clients: usize, round: usize, master_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_clients).collect();
    order.shuffle(&mut rng::stream(master_seed, "client-order", &[round as u64]));
    order
}

/// Uniform segment index in `0..k`, fixed per `(master_seed, round, client)`.
pub fn select_segment(client: usize, round: usize, k: usize, master_seed: u64) -> usize {
    if k <= 1 {
        return 0;
    }
    rng::stream(master_seed, "segment-choice", &[round as u64, client as u64]).random_range(0..k)
}

/// Client-specific feature permutation of length `len`.
pub fn client_permutation(cfg: &DefenseConfig, client: usize, len: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    if cfg.permute {
        perm.shuffle(&mut rng::stream(cfg.perm_seed, "defense-perm", &[client as u64]));
    }
    perm
}

/// Permute, clip to an L2 ball of radius `c`, then add `N(0, sigma^2)`.
/// Keeps the per-row state needed to backpropagate through the clip.
pub struct FeatureDefense {
    perm: Vec<usize>,
    clip_norm: f64,
    noise: Option<Normal<f64>>,
    rng: StreamRng,
    rows: Vec<ClipState>,
}

struct ClipState {
    permuted: Vec<f64>,
    norm: f64,
    scale: f64,
}

impl FeatureDefense {
    pub fn new(cfg: &DefenseConfig, perm: Vec<usize>, noise_seed: u64) -> Self {
        let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("valid normal"));
        Self {
            perm,
            clip_norm: cfg.clip_norm,
            noise,
            rng: rng::seeded(noise_seed),
            rows: Vec::new(),
        }
    }

    pub fn for_client(cfg: &DefenseConfig, client: usize, width: usize, noise_seed: u64) -> Self {
        Self::new(cfg, client_permutation(cfg, client, width), noise_seed)
    }

    fn transform_row(&mut self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.perm.len(), "feature width does not match permutation");
        let permuted: Vec<f64> = self.perm.iter().map(|&j| z[j]).collect();
        let norm = permuted.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        let mut out: Vec<f64> = permuted.iter().map(|v| v * scale).collect();
        if let Some(noise) = &self.noise {
            for v in &mut out {
                *v += noise.sample(&mut self.rng);
            }
        }
        self.rows.push(ClipState { permuted, norm, scale });
        out
    }
}

impl FeatureTransform for FeatureDefense {
    fn forward(&mut self, z: &Tensor2D) -> Tensor2D {
        self.rows.clear();
        let mut out = Tensor2D::zeros(z.rows(), z.cols());
        for r in 0..z.rows() {
            let t = self.transform_row(z.row(r));
            out.row_mut(r).copy_from_slice(&t);
        }
        out
    }

    fn backward(&self, grad: &Tensor2D) -> Tensor2D {
        let mut out = Tensor2D::zeros(grad.rows(), grad.cols());
        for (r, st) in self.rows.iter().enumerate() {
            let g = grad.row(r);
            let g_perm: Vec<f64> = if st.scale < 1.0 {
                // d(c u/|u|)/du = (c/|u|) (I - u u^T / |u|^2)
                let proj = crate::model::dot(&st.permuted, g) / (st.norm * st.norm);
                g.iter().zip(&st.permuted).map(|(gi, ui)| st.scale * (gi - ui * proj)).collect()
            } else {
                g.to_vec()
            };
            let row = out.row_mut(r);
            for (j, &src) in self.perm.iter().enumerate() {
                row[src] = g_perm[j];
            }
        }
        out
    }
}

/// Apply the defense to a single feature vector; the identity when disabled.
pub fn shuffle_clip_noise(z: &[f64], cfg: &DefenseConfig, stream_seed: u64) -> Vec<f64> {
    if !cfg.enabled {
        return z.to_vec();
    }
    let mut d = FeatureDefense::for_client(cfg, 0, z.len(), stream_seed);
    d.transform_row(z)
}
