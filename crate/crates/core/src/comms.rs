//! Channel-rate model and communication accounting for serial and parallel FL.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayeredParams;

/// Bits used to transmit one parameter.
pub const BITS_PER_PARAM: u64 = 32;

/// Wireless link parameters of one client.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    /// Bandwidth in Hz.
    pub bandwidth: f64,
    /// Transmit power in watts.
    pub power: f64,
    pub gain: f64,
    /// Noise power spectral density in W/Hz.
    pub noise: f64,
}

impl Default for ChannelParams {
    /// 1 MHz at SNR 1023, i.e. 10 Mbit/s.
    fn default() -> Self {
        Self {
            bandwidth: 1e6,
            power: 1023.0,
            gain: 1.0,
            noise: 1.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.bandwidth >= 0.0 && self.power >= 0.0 && self.gain >= 0.0 && self.noise > 0.0;
        if !ok || ![self.bandwidth, self.power, self.gain, self.noise].iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("invalid channel parameters {self:?}")));
        }
        Ok(())
    }

    pub fn snr(&self) -> f64 {
        self.power * self.gain / self.noise
    }
}

/// Shannon-Hartley capacity `B log2(1 + rho h / N0)` in bits per second.
pub fn rate(ch: &ChannelParams) -> f64 {
    ch.bandwidth * (1.0 + ch.snr()).log2()
}

pub fn transmission_time(bits: u64, rate: f64, who: &str) -> Result<f64> {
    if !(rate > 0.0) {
        return Err(Error::ZeroRate(who.to_string()));
    }
    Ok(bits as f64 / rate)
}

/// Time for one serial round: one hop per client along `order`, each at the
/// rate of the client it is charged to.
pub fn round_time(order: &[usize], channels: &[ChannelParams], model_bits: u64) -> Result<f64> {
    order.iter().try_fold(0.0, |acc, &c| {
        let ch = channels
            .get(c)
            .ok_or_else(|| Error::Config(format!("no channel parameters for client {c}")))?;
        Ok(acc + transmission_time(model_bits, rate(ch), &format!("client {c}"))?)
    })
}

/// Total bits for `rounds` rounds with `n` clients: serial FL sends the model
/// once per client per round, parallel FL downloads and uploads it.
pub fn cost_totals(rounds: u64, n: u64, model_bits: u64) -> (u64, u64) {
    let serial = rounds * n * model_bits;
    (serial, 2 * serial)
}

/// Size of a full model hand-off in bits, frozen layers included.
pub fn model_bits(params: &LayeredParams) -> u64 {
    params.num_params() as u64 * BITS_PER_PARAM
}

/// Rounds-to-target and total cost of a method; `None` when it never converged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodCost {
    pub rounds: Option<f64>,
    pub cost: Option<f64>,
}

impl MethodCost {
    pub fn new(rounds: f64, cost: f64) -> Self {
        Self {
            rounds: Some(rounds),
            cost: Some(cost),
        }
    }

    pub fn not_reached() -> Self {
        Self {
            rounds: None,
            cost: None,
        }
    }
}

/// `baseline / method` ratios for rounds and cost; `None` propagates "N/A".
pub fn improvement_rates(baseline: MethodCost, method: MethodCost) -> Result<(Option<f64>, Option<f64>)> {
    let ratio = |b: Option<f64>, m: Option<f64>| -> Result<Option<f64>> {
        match (b, m) {
            (Some(b), Some(m)) => {
                if !(m > 0.0) {
                    return Err(Error::Precondition(format!("method value must be > 0, got {m}")));
                }
                Ok(Some(b / m))
            }
            _ => Ok(None),
        }
    };
    Ok((ratio(baseline.rounds, method.rounds)?, ratio(baseline.cost, method.cost)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Endpoint {
    Server,
    Client(usize),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Server => f.write_str("server"),
            Endpoint::Client(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transmission {
    pub round: usize,
    pub from: Endpoint,
    pub to: Endpoint,
    pub bits: u64,
    pub seconds: f64,
}

/// Append-only log of model transmissions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    transmissions: Vec<Transmission>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, t: Transmission) -> Result<()> {
        if t.bits == 0 {
            return Err(Error::Precondition("transmissions must carry > 0 bits".into()));
        }
        self.transmissions.push(t);
        Ok(())
    }

    pub fn transmissions(&self) -> &[Transmission] {
        &self.transmissions
    }

    pub fn len(&self) -> usize {
        self.transmissions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transmissions.is_empty()
    }

    pub fn total_bits(&self) -> u64 {
        self.transmissions.iter().map(|t| t.bits).sum()
    }

    pub fn total_seconds(&self) -> f64 {
        self.transmissions.iter().map(|t| t.seconds).sum()
    }

    /// Bits sent in rounds `1..=rounds`.
    pub fn bits_through(&self, rounds: usize) -> u64 {
        self.transmissions.iter().filter(|t| t.round <= rounds).map(|t| t.bits).sum()
    }

    /// Communication time per round, indexed from round 1.
    pub fn round_times(&self) -> Vec<f64> {
        let last = self.transmissions.iter().map(|t| t.round).max().unwrap_or(0);
        let mut out = vec![0.0; last];
        for t in &self.transmissions {
            out[t.round - 1] += t.seconds;
        }
        out
    }

    /// CSV with header `round,from,to,bits,seconds`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["round", "from", "to", "bits", "seconds"])?;
        for t in &self.transmissions {
            w.write_record([
                t.round.to_string(),
                t.from.to_string(),
                t.to.to_string(),
                t.bits.to_string(),
                t.seconds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Per-method communication summary as written to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommSummary {
    pub method: String,
    #[serde(rename = "R#")]
    pub rounds: Option<usize>,
    #[serde(rename = "C#")]
    pub cost_bits: Option<u64>,
    #[serde(rename = "R_up")]
    pub rounds_up: Option<f64>,
    #[serde(rename = "C_up")]
    pub cost_up: Option<f64>,
}
