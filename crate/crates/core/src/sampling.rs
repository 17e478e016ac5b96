//! Lot construction: Poisson subsampling or per-epoch shuffling.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream, RngState, Stream};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplingError {
    #[error("lot size {lot_size} must be in 1..={n}")]
    LotSize { lot_size: usize, n: usize },
    #[error("physical batch must be at least 1")]
    PhysicalBatch,
    #[error("unknown iteration method {0:?} (expected poisson or shuffle)")]
    UnknownMethod(String),
    #[error("sampler state is inconsistent: {0}")]
    BadState(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Poisson,
    Shuffle,
}

impl FromStr for Method {
    type Err = SamplingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "poisson" => Ok(Method::Poisson),
            "shuffle" => Ok(Method::Shuffle),
            other => Err(SamplingError::UnknownMethod(other.to_string())),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Poisson => "poisson",
            Method::Shuffle => "shuffle",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: Method,
    pub n: usize,
    pub lot_size: usize,
    pub physical_batch: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.lot_size == 0 || self.lot_size > self.n {
            return Err(SamplingError::LotSize {
                lot_size: self.lot_size,
                n: self.n,
            });
        }
        if self.physical_batch == 0 {
            return Err(SamplingError::PhysicalBatch);
        }
        Ok(())
    }

    pub fn sampling_rate(&self) -> f64 {
        self.lot_size as f64 / self.n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lot {
    pub indices: Vec<usize>,
    pub step: u64,
}

/// Everything needed to continue a sampler exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplerState {
    pub step: u64,
    pub rng: RngState,
    /// Current epoch's permutation (shuffle mode; empty otherwise).
    pub permutation: Vec<usize>,
    pub cursor: usize,
}

pub struct Sampler {
    config: SamplerConfig,
    rng: ChaCha8Rng,
    step: u64,
    permutation: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Result<Self, SamplingError> {
        config.validate()?;
        Ok(Self {
            rng: stream(config.seed, Stream::Sampling),
            config,
            step: 0,
            permutation: Vec::new(),
            cursor: 0,
        })
    }

    pub fn restore(config: SamplerConfig, state: SamplerState) -> Result<Self, SamplingError> {
        config.validate()?;
        let perm_ok = match config.method {
            Method::Poisson => state.permutation.is_empty() && state.cursor == 0,
            Method::Shuffle => {
                let mut seen = vec![false; config.n];
                (state.permutation.is_empty() || state.permutation.len() == config.n)
                    && state.permutation.iter().all(|&i| i < config.n && !std::mem::replace(&mut seen[i], true))
                    && state.cursor <= config.n
            }
        };
        if !perm_ok {
            return Err(SamplingError::BadState(format!(
                "permutation of length {} with cursor {} for {} examples",
                state.permutation.len(),
                state.cursor,
                config.n
            )));
        }
        Ok(Self {
            config,
            rng: state.rng.restore(),
            step: state.step,
            permutation: state.permutation,
            cursor: state.cursor,
        })
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            step: self.step,
            rng: RngState::capture(&self.rng),
            permutation: self.permutation.clone(),
            cursor: self.cursor,
        }
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn next_lot(&mut self) -> Lot {
        match self.config.method {
            Method::Poisson => self.next_lot_poisson(),
            Method::Shuffle => self.next_lot_shuffle(),
        }
    }

    /// Includes every index independently with probability `L / N`. The lot
    /// may be empty.
    pub fn next_lot_poisson(&mut self) -> Lot {
        let q = self.config.sampling_rate();
        let indices = (0..self.config.n).filter(|_| self.rng.random::<f64>() < q).collect();
        self.advance(indices)
    }

    /// Next slice of the current epoch's permutation, reshuffling at epoch
    /// boundaries. The last lot of an epoch keeps the remainder.
    pub fn next_lot_shuffle(&mut self) -> Lot {
        if self.permutation.is_empty() || self.cursor >= self.config.n {
            self.permutation = (0..self.config.n).collect();
            self.permutation.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.config.lot_size).min(self.config.n);
        let indices = self.permutation[self.cursor..end].to_vec();
        self.cursor = end;
        self.advance(indices)
    }

    fn advance(&mut self, indices: Vec<usize>) -> Lot {
        let lot = Lot {
            indices,
            step: self.step,
        };
        self.step += 1;
        lot
    }
}

pub fn lots_per_epoch(n: usize, lot_size: usize) -> usize {
    assert!(n >= 1 && lot_size >= 1, "lots_per_epoch needs positive sizes");
    n.div_ceil(lot_size)
}

pub fn micro_batches(lot: &[usize], physical_batch: usize) -> Vec<&[usize]> {
    assert!(physical_batch >= 1, "physical batch must be at least 1");
    lot.chunks(physical_batch).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(method: Method, n: usize, lot_size: usize) -> SamplerConfig {
        SamplerConfig {
            method,
            n,
            lot_size,
            physical_batch: 4,
            seed: 11,
        }
    }

    #[test]
    fn epoch_counts() {
        assert_eq!(lots_per_epoch(1065, 256), 5);
        assert_eq!(lots_per_epoch(6, 2), 3);
        assert_eq!(lots_per_epoch(1, 1_000_000), 1);
    }

    #[test]
    fn chunking() {
        let lot = [9, 8, 7, 6, 5];
        let sizes: Vec<usize> = micro_batches(&lot, 2).iter().map(|c| c.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert!(micro_batches(&[], 3).is_empty());
        assert_eq!(micro_batches(&lot, 2).concat(), lot);
    }

    #[test]
    fn full_rate_poisson_takes_everything() {
        let mut s = Sampler::new(config(Method::Poisson, 7, 7)).unwrap();
        for _ in 0..5 {
            assert_eq!(s.next_lot().indices, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn shuffle_keeps_the_remainder() {
        let mut s = Sampler::new(config(Method::Shuffle, 5, 2)).unwrap();
        let sizes: Vec<usize> = (0..3).map(|_| s.next_lot().indices.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn shuffle_reshuffles_each_epoch() {
        let mut s = Sampler::new(config(Method::Shuffle, 20, 20)).unwrap();
        let a = s.next_lot().indices;
        let b = s.next_lot().indices;
        assert_ne!(a, b);
        let mut sorted = b.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_configs() {
        assert!(Sampler::new(config(Method::Poisson, 5, 0)).is_err());
        assert!(Sampler::new(config(Method::Poisson, 5, 6)).is_err());
        let mut c = config(Method::Shuffle, 5, 2);
        c.physical_batch = 0;
        assert_eq!(Sampler::new(c).err(), Some(SamplingError::PhysicalBatch));
        assert!("uniform".parse::<Method>().is_err());
    }

    #[test]
    fn restore_continues_identically() {
        for method in [Method::Poisson, Method::Shuffle] {
            let mut a = Sampler::new(config(method, 13, 4)).unwrap();
            for _ in 0..5 {
                a.next_lot();
            }
            let mut b = Sampler::restore(*a.config(), a.state()).unwrap();
            for _ in 0..10 {
                assert_eq!(a.next_lot(), b.next_lot());
            }
        }
    }

    #[test]
    fn restore_rejects_a_broken_permutation() {
        let mut s = Sampler::new(config(Method::Shuffle, 4, 2)).unwrap();
        s.next_lot();
        let mut state = s.state();
        state.permutation[0] = state.permutation[1];
        assert!(Sampler::restore(*s.config(), state).is_err());
    }
}
