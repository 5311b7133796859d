//! Latency metrics in packet units.
//!
//! With `g(t)` the packets read before target token `t`, `|x|` the source
//! length and `|y|` the hypothesis length (EOS excluded), `λ = |y| / |x|`:
//!
//! * AL  = 1/τ · Σ_{t≤τ} (g(t) − (t−1)/λ), τ = first t with g(t) = |x|
//! * AP  = Σ_t g(t) / (|x|·|y|)
//! * DAL = 1/|y| · Σ_t (g′(t) − (t−1)/λ), g′(1) = g(1),
//!   g′(t) = max(g(t), g′(t−1) + 1/λ)

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

use super::MetricError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyInput {
    g: Vec<usize>,
    src_len: usize,
}

impl LatencyInput {
    pub fn new(g: Vec<usize>, src_len: usize) -> Result<Self, MetricError> {
        if g.is_empty() {
            return Err(MetricError::UndefinedLatency("empty hypothesis".into()));
        }
        if src_len == 0 {
            return Err(MetricError::UndefinedLatency("empty source".into()));
        }
        if g.iter().any(|&v| v == 0 || v > src_len) {
            return Err(MetricError::UndefinedLatency(format!(
                "delays must lie in 1..={src_len}"
            )));
        }
        if g.windows(2).any(|w| w[0] > w[1]) {
            return Err(MetricError::UndefinedLatency("delays must be non-decreasing".into()));
        }
        Ok(Self { g, src_len })
    }

    pub fn delays(&self) -> &[usize] {
        &self.g
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }

    pub fn tgt_len(&self) -> usize {
        self.g.len()
    }

    /// Whether the writer ever caught up with the whole source.
    pub fn reaches_source_end(&self) -> bool {
        self.g.last() == Some(&self.src_len)
    }

    fn rate<T: Real>(&self) -> T {
        T::from_count(self.tgt_len()) / T::from_count(self.src_len)
    }
}

pub fn average_lagging<T: Real>(inp: &LatencyInput) -> T {
    let lambda: T = inp.rate();
    let tau = match inp.g.iter().position(|&v| v == inp.src_len) {
        Some(i) => i + 1,
        None => {
            log::debug!("delays never reach the source length; AL averages over all tokens");
            inp.tgt_len()
        }
    };
    let sum: T = inp.g[..tau]
        .iter()
        .enumerate()
        .map(|(t, &g)| T::from_count(g) - T::from_count(t) / lambda)
        .sum();
    sum / T::from_count(tau)
}

pub fn average_proportion<T: Real>(inp: &LatencyInput) -> T {
    let total: usize = inp.g.iter().sum();
    T::from_count(total) / (T::from_count(inp.src_len) * T::from_count(inp.tgt_len()))
}

/// The monotonically corrected delays g′ used by DAL.
pub fn smoothed_delays<T: Real>(inp: &LatencyInput) -> Vec<T> {
    let step = T::one() / inp.rate::<T>();
    let mut out: Vec<T> = Vec::with_capacity(inp.tgt_len());
    for &g in &inp.g {
        let g = T::from_count(g);
        let next = match out.last() {
            Some(&prev) => g.max(prev + step),
            None => g,
        };
        out.push(next);
    }
    out
}

pub fn differentiable_average_lagging<T: Real>(inp: &LatencyInput) -> T {
    let lambda: T = inp.rate();
    let sum: T = smoothed_delays::<T>(inp)
        .into_iter()
        .enumerate()
        .map(|(t, g)| g - T::from_count(t) / lambda)
        .sum();
    sum / T::from_count(inp.tgt_len())
}
