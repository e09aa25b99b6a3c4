//! Run configuration: defaults, TOML config files, and derivation of the
//! per-component parameter structs. Precedence is command-line flags over
//! config file over defaults; the CLI applies flags on top of the loaded
//! struct.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metric::MarginConfig;
use crate::ncp::DbscanConfig;
use crate::network::NetworkConfig;
use crate::owc::TrainHyper;
use crate::stream::EngineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Known-class ratio for stream simulation.
    pub r: f64,
    pub initial_per_class: usize,
    pub max_stream_len: Option<usize>,

    pub hidden_units: usize,
    pub embed_dim: usize,
    pub conv_layers: usize,
    /// Output channels of the first conv stage; the second stage, when
    /// present, widens it fourfold.
    pub conv_channels: usize,

    pub buffer_capacity: usize,
    pub storage_capacity: usize,
    pub update_threshold: usize,
    pub store_confidence: f64,

    pub gamma: f64,
    pub beta: f64,
    pub alpha: f64,
    pub mini_batch: usize,
    pub epochs: usize,
    pub learning_rate: f64,

    pub eps: f64,
    pub min_pts: usize,
    pub window: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 0,
            r: 0.3,
            initial_per_class: 1000,
            max_stream_len: None,
            hidden_units: 200,
            embed_dim: 64,
            conv_layers: 1,
            conv_channels: 6,
            buffer_capacity: 1000,
            storage_capacity: 200,
            update_threshold: 100,
            store_confidence: 0.99,
            gamma: 1.0,
            beta: 0.02,
            alpha: 0.45,
            mini_batch: 64,
            epochs: 10,
            learning_rate: 5.0,
            eps: 0.22,
            min_pts: 2,
            window: 1000,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
    }

    pub fn network(&self, h: usize, w: usize, channels: usize) -> NetworkConfig {
        let mut net = NetworkConfig::with_input(h, w);
        net.input_channels = channels;
        net.conv_layers = self.conv_layers;
        net.conv_channels = match self.conv_layers {
            0 => vec![],
            1 => vec![self.conv_channels],
            // second stage widens fourfold so added depth buys real capacity
            _ => vec![self.conv_channels, self.conv_channels * 4],
        };
        net.hidden_units = self.hidden_units;
        net.embed_dim = self.embed_dim;
        net
    }

    pub fn hyper(&self, seed: u64) -> TrainHyper {
        TrainHyper {
            mini_batch: self.mini_batch,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            margin: MarginConfig {
                gamma: self.gamma,
                beta: self.beta,
            },
            seed,
        }
    }

    pub fn engine(&self, net: NetworkConfig, train_seed: u64) -> EngineConfig {
        EngineConfig {
            buffer_capacity: self.buffer_capacity,
            storage_capacity: self.storage_capacity,
            update_threshold: self.update_threshold,
            store_confidence: self.store_confidence,
            alpha: self.alpha,
            dbscan: DbscanConfig {
                eps: self.eps,
                min_pts: self.min_pts,
            },
            net,
            hyper: self.hyper(train_seed),
            window: self.window,
        }
    }
}

/// Named sub-seed derived from the run seed, so each random component is
/// independently reproducible.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, folded into the run seed
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    seed.wrapping_add(h).rotate_left(17) ^ h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_documented_values() {
        let c = RunConfig::default();
        assert_eq!(c.hidden_units, 200);
        assert_eq!(c.buffer_capacity, 1000);
        assert_eq!(c.storage_capacity, 200);
        assert_eq!(c.update_threshold, 100);
        assert_eq!(c.store_confidence, 0.99);
        assert_eq!(c.gamma, 1.0);
        assert_eq!(c.mini_batch, 64);
        assert_eq!(c.epochs, 10);
        assert_eq!(c.embed_dim, 64);
        assert_eq!(c.eps, 0.22);
        assert_eq!(c.min_pts, 2);
        let net = c.network(28, 28, 1);
        assert_eq!(net.kernel, 5);
        assert_eq!(net.conv_stride, 1);
        assert_eq!(net.pool, 2);
        assert_eq!(net.pool_stride, 2);
    }

    #[test]
    fn file_values_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 7\nbuffer_capacity = 50\ngamma = 1.5\n").unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.buffer_capacity, 50);
        assert_eq!(c.gamma, 1.5);
        assert_eq!(c.epochs, 10);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "no_such_option = 1\n").unwrap();
        assert!(RunConfig::load(&p).is_err());
    }

    #[test]
    fn conv_variants_shape_the_network() {
        let mut c = RunConfig::default();
        c.conv_layers = 0;
        assert!(c.network(28, 28, 1).conv_channels.is_empty());
        c.conv_layers = 2;
        assert_eq!(c.network(28, 28, 1).conv_channels, vec![6, 24]);
    }

    #[test]
    fn sub_seeds_differ_by_tag_and_seed() {
        assert_ne!(sub_seed(0, "train"), sub_seed(0, "stream"));
        assert_ne!(sub_seed(0, "train"), sub_seed(1, "train"));
        assert_eq!(sub_seed(5, "train"), sub_seed(5, "train"));
    }
}
