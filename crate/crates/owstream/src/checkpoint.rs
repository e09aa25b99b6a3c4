//! Versioned model checkpoints: the embedding network, heads, class list,
//! and threshold table as one JSON document. Values round-trip exactly
//! (serde_json preserves f64 bit patterns for finite values).

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dscu::DataStorage;
use crate::error::{Error, Result};
use crate::owc::{ConvOwcModel, ThresholdTable};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ConvOwcModel,
    pub thresholds: ThresholdTable,
}

impl Checkpoint {
    pub fn new(model: ConvOwcModel, thresholds: ThresholdTable) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model,
            thresholds,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let cp: Checkpoint = serde_json::from_reader(f)?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} unsupported (expected {})",
                cp.version, CHECKPOINT_VERSION
            )));
        }
        Ok(cp)
    }
}

/// Post-mortem dump of the per-class storage buffers.
pub fn save_storage(storage: &DataStorage, path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(f, storage)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::owc::{compute_thresholds, ConvOwcModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_value_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut cfg = NetworkConfig::with_input(8, 8);
        cfg.conv_channels = vec![2];
        cfg.hidden_units = 8;
        cfg.embed_dim = 4;
        let mut model = ConvOwcModel::init(cfg, vec![0, 1], &mut rng).unwrap();
        for h in &mut model.heads {
            for w in &mut h.weights {
                *w = rng.gen_range(-1.0..1.0);
            }
        }
        let data: Vec<(i32, Vec<Vec<f64>>)> = vec![0, 1]
            .into_iter()
            .map(|c| {
                (
                    c,
                    (0..4)
                        .map(|_| (0..64).map(|_| rng.gen_range(0.0..1.0)).collect())
                        .collect(),
                )
            })
            .collect();
        let thresholds = compute_thresholds(&model, &data, 0.05).unwrap();
        let cp = Checkpoint::new(model, thresholds);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        cp.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(cp, back);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = NetworkConfig::with_input(8, 8);
        cfg.conv_channels = vec![2];
        cfg.hidden_units = 4;
        cfg.embed_dim = 4;
        let model = ConvOwcModel::init(cfg, vec![0, 1], &mut rng).unwrap();
        let mut cp = Checkpoint::new(model, ThresholdTable { entries: vec![] });
        cp.version = 99;
        cp.save(&p).unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
