//! Coalition utilities, exact and Monte Carlo Shapley values, and
//! threshold-based honesty classification.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model;
use crate::pipeline::{self, Federation, OrderPolicy, RunConfig};
use crate::rng;

/// Largest client count accepted by [`shapley_exact`].
pub const MAX_EXACT_CLIENTS: usize = 8;

/// A set of client indices, stored as a bit mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coalition(u64);

impl Coalition {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn full(n: usize) -> Self {
        assert!(n <= 64, "at most 64 clients");
        Self(if n == 64 { u64::MAX } else { (1u64 << n) - 1 })
    }

    pub fn from_mask(mask: u64) -> Self {
        Self(mask)
    }

    pub fn from_members(members: &[usize]) -> Self {
        Self(members.iter().fold(0, |m, &i| m | (1u64 << i)))
    }

    pub fn mask(self) -> u64 {
        self.0
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    pub fn with(self, i: usize) -> Self {
        Self(self.0 | (1u64 << i))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Members in ascending order.
    pub fn members(self) -> Vec<usize> {
        (0..64).filter(|&i| self.contains(i)).collect()
    }
}

/// Characteristic function of the cooperative game.
pub trait Utility: Sync {
    fn value(&self, coalition: Coalition) -> Result<f64>;
}

impl<F> Utility for F
where
    F: Fn(Coalition) -> f64 + Sync,
{
    fn value(&self, coalition: Coalition) -> Result<f64> {
        Ok(self(coalition))
    }
}

/// Utility given by a table indexed by coalition mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabulatedUtility {
    pub values: Vec<f64>,
}

impl TabulatedUtility {
    /// Checks that `values` holds one finite entry per coalition of `n_clients`.
    pub fn new(n_clients: usize, values: Vec<f64>) -> Result<Self> {
        if n_clients >= 64 || values.len() != 1usize << n_clients {
            return Err(Error::Config(format!(
                "{} tabulated values for {n_clients} clients, expected 2^{n_clients}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("tabulated utility values must be finite".into()));
        }
        Ok(Self { values })
    }
}

impl Utility for TabulatedUtility {
    fn value(&self, coalition: Coalition) -> Result<f64> {
        self.values
            .get(coalition.0 as usize)
            .copied()
            .ok_or_else(|| Error::Precondition(format!("no tabulated value for coalition {:#b}", coalition.0)))
    }
}

/// Memoizes an inner utility. Each coalition is computed at most once even
/// under concurrent lookups.
pub struct CachedUtility<U> {
    inner: U,
    cells: Mutex<HashMap<Coalition, Arc<OnceLock<std::result::Result<f64, String>>>>>,
}

impl<U: Utility> CachedUtility<U> {
    pub fn new(inner: U) -> Self {
        Self {
            inner,
            cells: Mutex::new(HashMap::new()),
        }
    }

    /// Number of distinct coalitions evaluated so far.
    pub fn evaluations(&self) -> usize {
        self.cells.lock().expect("cache lock").values().filter(|c| c.get().is_some()).count()
    }
}

impl<U: Utility> Utility for CachedUtility<U> {
    fn value(&self, coalition: Coalition) -> Result<f64> {
        let cell = {
            let mut map = self.cells.lock().expect("cache lock");
            Arc::clone(map.entry(coalition).or_default())
        };
        cell.get_or_init(|| self.inner.value(coalition).map_err(|e| e.to_string()))
            .clone()
            .map_err(Error::Utility)
    }
}

/// Validation accuracy after serial training restricted to a coalition.
///
/// Members train in ascending index order for `rounds` rounds with the run's
/// fixed seed; the empty coalition scores the initial (perturbed) model.
pub struct TrainingUtility<'a> {
    config: RunConfig,
    fed: &'a Federation,
    rounds: usize,
}

impl<'a> TrainingUtility<'a> {
    pub fn new(config: &RunConfig, fed: &'a Federation, rounds: usize) -> Result<Self> {
        config.validate()?;
        if fed.n_clients() > 64 {
            return Err(Error::Config("contribution audits support at most 64 clients".into()));
        }
        Ok(Self {
            config: config.clone(),
            fed,
            rounds,
        })
    }
}

impl Utility for TrainingUtility<'_> {
    fn value(&self, coalition: Coalition) -> Result<f64> {
        let eval = &self.fed.val;
        if coalition.is_empty() {
            let (p, _) = self.config.initial_params()?;
            return Ok(model::evaluate(&p, eval.features(), eval.labels())?.0);
        }
        let h = pipeline::run_serial(&self.config, self.fed, &coalition.members(), OrderPolicy::Canonical, self.rounds)?;
        Ok(model::evaluate(&h.final_params, eval.features(), eval.labels())?.0)
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Exact Shapley values by enumerating all `2^n` coalitions.
pub fn shapley_exact<U: Utility + ?Sized>(n_clients: usize, utility: &U) -> Result<Vec<f64>> {
    if n_clients > MAX_EXACT_CLIENTS {
        return Err(Error::TooManyClients {
            n: n_clients,
            max: MAX_EXACT_CLIENTS,
        });
    }
    let size = 1usize << n_clients;
    let values = (0..size as u64)
        .into_par_iter()
        .map(|m| utility.value(Coalition(m)))
        .collect::<Result<Vec<f64>>>()?;
    let nf = factorial(n_clients);
    let weights: Vec<f64> = (0..n_clients)
        .map(|s| factorial(s) * factorial(n_clients - s - 1) / nf)
        .collect();
    Ok((0..n_clients)
        .map(|i| {
            (0..size)
                .filter(|m| m >> i & 1 == 0)
                .map(|m| weights[m.count_ones() as usize] * (values[m | 1 << i] - values[m]))
                .sum()
        })
        .collect())
}

/// Monte Carlo Shapley estimate with per-client standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub phi: Vec<f64>,
    pub std_err: Vec<f64>,
    pub permutations: usize,
}

/// Average marginal contributions over the given client orderings. Each
/// ordering walks its prefixes, costing `n + 1` utility lookups.
pub fn shapley_over_permutations<U: Utility + ?Sized>(
    n_clients: usize,
    utility: &U,
    permutations: &[Vec<usize>],
) -> Result<McEstimate> {
    if permutations.is_empty() {
        return Err(Error::Precondition("at least one permutation is required".into()));
    }
    let marginals = permutations
        .par_iter()
        .map(|perm| {
            if perm.len() != n_clients {
                return Err(Error::Precondition("permutation length differs from client count".into()));
            }
            let mut out = vec![0.0; n_clients];
            let mut prefix = Coalition::empty();
            let mut prev = utility.value(prefix)?;
            for &i in perm {
                prefix = prefix.with(i);
                let cur = utility.value(prefix)?;
                out[i] = cur - prev;
                prev = cur;
            }
            Ok(out)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let m = marginals.len() as f64;
    let mut phi = vec![0.0; n_clients];
    for row in &marginals {
        for (p, v) in phi.iter_mut().zip(row) {
            *p += v;
        }
    }
    phi.iter_mut().for_each(|p| *p /= m);
    let std_err = (0..n_clients)
        .map(|i| {
            if marginals.len() < 2 {
                return 0.0;
            }
            let var = marginals.iter().map(|r| (r[i] - phi[i]).powi(2)).sum::<f64>() / (m - 1.0);
            (var / m).sqrt()
        })
        .collect();
    Ok(McEstimate {
        phi,
        std_err,
        permutations: marginals.len(),
    })
}

/// The `j`-th sampled permutation of the Monte Carlo estimator.
pub fn sampled_permutation(n_clients: usize, seed: u64, j: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n_clients).collect();
    p.shuffle(&mut rng::stream(seed, "shapley-mc", &[j as u64]));
    p
}

/// Permutation-sampling Shapley estimate over `m` seeded permutations.
pub fn shapley_mc<U: Utility + ?Sized>(n_clients: usize, utility: &U, m: usize, seed: u64) -> Result<McEstimate> {
    if m == 0 {
        return Err(Error::Config("the number of permutations m must be >= 1".into()));
    }
    let perms: Vec<Vec<usize>> = (0..m).map(|j| sampled_permutation(n_clients, seed, j)).collect();
    shapley_over_permutations(n_clients, utility, &perms)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Honest,
    Flagged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub phi: Vec<f64>,
    pub m: usize,
    pub phi_min: f64,
    pub status: Vec<Status>,
}

impl ContributionReport {
    pub fn flagged(&self) -> Vec<usize> {
        self.status
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Status::Flagged)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Honest iff `phi_i >= phi_min`.
pub fn classify(phi: &[f64], phi_min: f64) -> ContributionReport {
    ContributionReport {
        phi: phi.to_vec(),
        m: 0,
        phi_min,
        status: phi
            .iter()
            .map(|&p| if p >= phi_min { Status::Honest } else { Status::Flagged })
            .collect(),
    }
}

/// Half the median of the estimates.
pub fn default_threshold(phi: &[f64]) -> f64 {
    if phi.is_empty() {
        return 0.0;
    }
    let mut v = phi.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    0.5 * median
}

/// Train-and-evaluate Shapley audit of every client in the federation.
pub fn audit(config: &RunConfig, fed: &Federation, m: usize, util_rounds: usize, seed: u64) -> Result<ContributionReport> {
    let utility = CachedUtility::new(TrainingUtility::new(config, fed, util_rounds)?);
    let est = shapley_mc(fed.n_clients(), &utility, m, seed)?;
    log::info!(
        "shapley audit: {} permutations, {} distinct coalitions trained",
        m,
        utility.evaluations()
    );
    let mut report = classify(&est.phi, default_threshold(&est.phi));
    report.m = m;
    Ok(report)
}
