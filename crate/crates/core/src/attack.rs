//! Gradient-inversion attack and reconstruction scoring.
//!
//! The attacker holds the model parameters and a victim's shared gradient and
//! optimizes a dummy input `x'` and soft label `y' = softmax(l')` so the dummy
//! gradient matches the observed one in squared L2 distance. The label part of
//! the objective is differentiated analytically (the parameter gradient is
//! linear in the output error); the input part uses central differences.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{self, FeatureTransform, Gradients, LayeredParams, Tensor2D};
use crate::rng;
use crate::shuffle::{DefenseConfig, FeatureDefense};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub attack_lr: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defense applied by the victim when computing its gradient.
    #[serde(default)]
    pub defense: DefenseConfig,
    /// Dummy batch size; scored attacks use a single sample.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Central-difference step for the dummy-input gradient.
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    /// Seed the single-sample label from the sign of the output-bias gradient.
    #[serde(default = "default_true")]
    pub infer_label: bool,
}

fn default_true() -> bool {
    true
}

fn default_steps() -> usize {
    2000
}
fn default_lr() -> f64 {
    0.1
}
fn default_restarts() -> usize {
    2
}
fn default_batch() -> usize {
    1
}
fn default_fd_step() -> f64 {
    1e-5
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            attack_lr: default_lr(),
            restarts: default_restarts(),
            seed: 0,
            defense: DefenseConfig::default(),
            batch_size: default_batch(),
            fd_step: default_fd_step(),
            infer_label: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.restarts == 0 || self.batch_size == 0 {
            return Err(Error::Config("attack steps, restarts and batch_size must be >= 1".into()));
        }
        if !(self.attack_lr > 0.0 && self.attack_lr.is_finite()) {
            return Err(Error::Config(format!("attack_lr must be > 0, got {}", self.attack_lr)));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::Config("fd_step must be > 0".into()));
        }
        self.defense.validate()
    }
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReconstructionError {
    pub mse: f64,
    /// `+inf` (serialized as `"inf"`) for a perfect reconstruction.
    #[serde(serialize_with = "ser_psnr")]
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackResult {
    pub reconstruction: Tensor2D,
    /// Inferred soft label per dummy row.
    pub label_distribution: Tensor2D,
    pub match_loss: f64,
    /// Filled in when the true input is known.
    pub input_mse: Option<f64>,
    pub psnr: Option<ReconstructionError>,
    pub restart: usize,
    /// Best-so-far gradient-match loss after each iteration of the chosen restart.
    #[serde(skip)]
    pub loss_trace: Vec<f64>,
}

/// Gradient shared by the victim for `(x, y)`. With the defense enabled, the
/// first hidden activation goes through permute/clip/noise during the
/// forward pass and the gradient is taken through that path.
pub fn true_gradient(
    params: &LayeredParams,
    x: &Tensor2D,
    y: &[usize],
    defense: &DefenseConfig,
    noise_seed: u64,
) -> Result<Gradients> {
    if !defense.enabled {
        return Ok(model::loss_and_grad(params, x, y)?.1);
    }
    defense.validate()?;
    if params.n_layers() < 2 {
        return Err(Error::Config("the feature defense needs at least one hidden layer".into()));
    }
    let width = params.layers()[0].fan_out();
    let mut d = FeatureDefense::for_client(defense, 0, width, noise_seed);
    Ok(model::loss_and_grad_with(params, x, y, Some(&mut d as &mut dyn FeatureTransform))?.1)
}

struct Objective<'a> {
    params: &'a LayeredParams,
    target: &'a Gradients,
}

impl Objective<'_> {
    fn labels(logits: &Tensor2D) -> Tensor2D {
        model::softmax(logits)
    }

    fn loss(&self, x: &Tensor2D, label_logits: &Tensor2D) -> Result<f64> {
        let (_, g) = model::loss_and_grad_soft(self.params, x, &Self::labels(label_logits))?;
        Ok(g.distance_sq(self.target))
    }

    /// Loss and its gradient with respect to the dummy input and label logits.
    fn loss_and_grad(&self, x: &Tensor2D, label_logits: &Tensor2D, h: f64) -> Result<(f64, Tensor2D, Tensor2D)> {
        let y = Self::labels(label_logits);
        let cache = model::forward_cached(self.params, x, None)?;
        let (_, err) = model::cross_entropy(cache.logits(), &y);
        let g = model::backward(self.params, &cache, &err, None);
        let loss = g.distance_sq(self.target);

        // residual r = G - T; dD/dy[r][c] = 2 <r, dG/dy[r][c]> and
        // dG/dy[r][c] = backward(-e_rc / B) because G is linear in the error
        let mut residual = g.clone();
        for (rl, tl) in residual.layers.iter_mut().zip(&self.target.layers) {
            for (a, b) in rl.values_mut().zip(tl.values()) {
                *a -= b;
            }
        }
        let b = x.rows() as f64;
        let c = y.cols();
        let mut g_labels = Tensor2D::zeros(y.rows(), c);
        for r in 0..y.rows() {
            let mut dy = vec![0.0; c];
            for (k, d) in dy.iter_mut().enumerate() {
                let mut unit = Tensor2D::zeros(y.rows(), c);
                unit.set(r, k, -1.0 / b);
                *d = 2.0 * model::backward(self.params, &cache, &unit, None).dot(&residual);
            }
            // softmax chain rule
            let yr = y.row(r);
            let inner = model::dot(yr, &dy);
            for k in 0..c {
                g_labels.set(r, k, yr[k] * (dy[k] - inner));
            }
        }

        let mut g_x = Tensor2D::zeros(x.rows(), x.cols());
        let mut probe = x.clone();
        for i in 0..x.data().len() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = self.loss(&probe, label_logits)?;
            probe.data_mut()[i] = orig - h;
            let down = self.loss(&probe, label_logits)?;
            probe.data_mut()[i] = orig;
            g_x.data_mut()[i] = (up - down) / (2.0 * h);
        }
        Ok((loss, g_x, g_labels))
    }
}

/// Class whose output-bias gradient is negative; for one sample that gradient
/// is `p - y`, so only the true class can be below zero.
pub fn infer_label(target: &Gradients) -> usize {
    let row = &target.layers.last().expect("at least one layer").bias;
    (0..row.len()).min_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0)
}

/// Initial dummy input (uniform in `[0, 1]`) and label logits (standard
/// normal, shifted towards the inferred class when enabled) for a restart.
pub fn dummy_init(params: &LayeredParams, target: &Gradients, cfg: &AttackConfig, restart: usize) -> (Tensor2D, Tensor2D) {
    let mut r = rng::stream(cfg.seed, "attack-init", &[restart as u64]);
    let d = params.input_dim();
    let c = params.n_classes();
    let b = cfg.batch_size;
    let x: Vec<f64> = (0..b * d).map(|_| r.random::<f64>()).collect();
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut l: Vec<f64> = (0..b * c).map(|_| normal.sample(&mut r)).collect();
    if cfg.infer_label && b == 1 {
        l[infer_label(target)] += 4.0;
    }
    (
        Tensor2D::new(b, d, x).expect("finite init"),
        Tensor2D::new(b, c, l).expect("finite init"),
    )
}

fn step(a: &Tensor2D, g: &Tensor2D, lr: f64) -> Tensor2D {
    let mut out = a.clone();
    for (v, d) in out.data_mut().iter_mut().zip(g.data()) {
        *v -= lr * d;
    }
    out
}

fn run_restart(obj: &Objective<'_>, params: &LayeredParams, cfg: &AttackConfig, restart: usize) -> Result<AttackResult> {
    let (mut x, mut l) = dummy_init(params, obj.target, cfg, restart);
    let mut lr = cfg.attack_lr;
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut loss = obj.loss(&x, &l)?;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("restart {restart}: non-finite initial loss")));
    }
    for _ in 0..cfg.steps {
        if loss == 0.0 {
            trace.push(loss);
            continue;
        }
        let (_, gx, gl) = obj.loss_and_grad(&x, &l, cfg.fd_step)?;
        if !gx.data().iter().chain(gl.data()).all(|v| v.is_finite()) {
            return Err(Error::Divergence(format!("restart {restart}: non-finite gradient")));
        }
        // backtracking: accept only strict improvements
        let mut accepted = false;
        for _ in 0..30 {
            let nx = step(&x, &gx, lr);
            let nl = step(&l, &gl, lr);
            let trial = obj.loss(&nx, &nl)?;
            if trial.is_finite() && trial < loss {
                x = nx;
                l = nl;
                loss = trial;
                lr *= 1.25;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            lr = cfg.attack_lr;
        }
        trace.push(loss);
    }
    Ok(AttackResult {
        reconstruction: x,
        label_distribution: model::softmax(&l),
        match_loss: loss,
        input_mse: None,
        psnr: None,
        restart,
        loss_trace: trace,
    })
}

/// Gradient-matching inversion; returns the restart with the lowest final
/// match loss (ties go to the lowest restart index).
pub fn invert_gradient(target: &Gradients, params: &LayeredParams, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    if !target.matches_params(params) {
        return Err(Error::Shape("target gradient does not match the model".into()));
    }
    let obj = Objective { params, target };
    let results = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| run_restart(&obj, params, cfg, r))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<AttackResult> = None;
    for r in results {
        if best.as_ref().is_none_or(|b| r.match_loss < b.match_loss) {
            best = Some(r);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// Mean squared error and PSNR, with the dynamic range taken from `x_true`.
pub fn reconstruction_error(x_true: &Tensor2D, x_rec: &Tensor2D) -> Result<ReconstructionError> {
    if x_true.rows() != x_rec.rows() || x_true.cols() != x_rec.cols() {
        return Err(Error::Shape("reconstruction shape differs from the original".into()));
    }
    let n = x_true.data().len().max(1) as f64;
    let mse = x_true
        .data()
        .iter()
        .zip(x_rec.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let (lo, hi) = x_true
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (range * range / mse).log10()
    };
    Ok(ReconstructionError { mse, psnr })
}

/// Compute the victim's gradient, invert it and score against the true input.
pub fn attack_sample(
    params: &LayeredParams,
    x: &Tensor2D,
    y: &[usize],
    cfg: &AttackConfig,
    noise_seed: u64,
) -> Result<AttackResult> {
    let g = true_gradient(params, x, y, &cfg.defense, noise_seed)?;
    let mut res = invert_gradient(&g, params, cfg)?;
    let err = reconstruction_error(x, &res.reconstruction)?;
    res.input_mse = Some(err.mse);
    res.psnr = Some(err);
    Ok(res)
}

/// The same victim sample attacked without and with the defense.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedAttack {
    pub unprotected: AttackResult,
    pub protected: AttackResult,
    /// `protected_mse / unprotected_mse`
    pub ratio: f64,
    /// MSE of a uniform random guess, for reference.
    pub random_guess_mse: f64,
}

pub fn paired_attack(
    params: &LayeredParams,
    x: &Tensor2D,
    y: &[usize],
    cfg: &AttackConfig,
    defense: &DefenseConfig,
    noise_seed: u64,
) -> Result<PairedAttack> {
    let mut off = cfg.clone();
    off.defense.enabled = false;
    let mut on = cfg.clone();
    on.defense = DefenseConfig { enabled: true, ..*defense };
    let unprotected = attack_sample(params, x, y, &off, noise_seed)?;
    let protected = attack_sample(params, x, y, &on, noise_seed)?;
    let u = unprotected.input_mse.expect("scored");
    let p = protected.input_mse.expect("scored");
    Ok(PairedAttack {
        ratio: if u > 0.0 { p / u } else { f64::INFINITY },
        unprotected,
        protected,
        random_guess_mse: random_guess_mse(x, cfg.seed),
    })
}

/// MSE of a uniform `[0, 1]` guess of the same shape.
pub fn random_guess_mse(x_true: &Tensor2D, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "random-guess", &[]);
    let guess: Vec<f64> = (0..x_true.data().len()).map(|_| r.random::<f64>()).collect();
    let guess = Tensor2D::new(x_true.rows(), x_true.cols(), guess).expect("finite");
    reconstruction_error(x_true, &guess).expect("same shape").mse
}

/// Smooth grayscale `side x side` image in `[0, 1]`, flattened row-major:
/// a sum of a few Gaussian blobs rescaled to the unit range.
pub fn synthetic_image(side: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "image", &[]);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                r.random_range(0.0..side as f64),
                r.random_range(0.0..side as f64),
                r.random_range(0.8..2.5),
                r.random_range(0.3..1.0),
            )
        })
        .collect();
    let mut img: Vec<f64> = (0..side * side)
        .map(|p| {
            let (i, j) = ((p / side) as f64, (p % side) as f64);
            blobs
                .iter()
                .map(|&(ci, cj, w, a)| a * (-((i - ci).powi(2) + (j - cj).powi(2)) / (2.0 * w * w)).exp())
                .sum()
        })
        .collect();
    let (lo, hi) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    img.iter_mut().for_each(|v| *v = (*v - lo) / span);
    img
}

/// Plain (P2) PGM dump of a `[0, 1]` grayscale image.
pub fn write_pgm(path: &Path, pixels: &[f64], width: usize) -> Result<()> {
    if width == 0 || !pixels.len().is_multiple_of(width) {
        return Err(Error::Shape("pixel count is not a multiple of the width".into()));
    }
    let height = pixels.len() / width;
    let mut s = format!("P2\n{width} {height}\n255\n");
    for row in pixels.chunks(width) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}
