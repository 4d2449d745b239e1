//! Model artifact directory: `config.json`, `vocab.json` and `weights.bin`
//! (little-endian f32 in tensor order, then a little-endian CRC-64/XZ of the
//! float bytes).

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig};
use super::network::{Network, TensorSpec};
use super::vocab::Vocab;
use super::{Model, ModelError};

pub const FORMAT_VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactConfig {
    format_version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    vocab_size: usize,
    tensors: Vec<TensorSpec>,
}

pub fn weights_checksum(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

fn weight_bytes(model: &Model) -> Vec<u8> {
    let params = model.network.params();
    let mut bytes = Vec::with_capacity(params.len() * 4 + 8);
    for p in params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    bytes
}

/// Hex CRC of the weights; equals the checksum stored in `weights.bin`.
pub fn model_version(model: &Model) -> String {
    format!("{:016x}", weights_checksum(&weight_bytes(model)))
}

pub fn save_model(model: &Model, dir: impl AsRef<Path>) -> Result<(), ModelError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let config = ArtifactConfig {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        train: model.train_config.clone(),
        vocab_size: model.vocab.len(),
        tensors: model.network.layout().specs().to_vec(),
    };
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config)? + "\n")?;
    fs::write(dir.join("vocab.json"), model.vocab.to_json()? + "\n")?;

    let mut bytes = weight_bytes(model);
    let crc = weights_checksum(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    fs::write(dir.join("weights.bin"), bytes)?;
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Model, ModelError> {
    let dir = dir.as_ref();
    let raw: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| ModelError::Format("config.json lacks format_version".into()))? as u32;
    if found > FORMAT_VERSION {
        return Err(ModelError::FormatVersionMismatch { found, supported: FORMAT_VERSION });
    }
    let config: ArtifactConfig = serde_json::from_value(raw)?;
    let vocab = Vocab::from_json(&fs::read_to_string(dir.join("vocab.json"))?)?;
    if vocab.len() != config.vocab_size {
        return Err(ModelError::Format(format!(
            "vocab.json has {} entries, config says {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let expected = Network::<f32>::zeros(config.model.clone(), config.vocab_size)?;
    let specs = expected.layout().specs();
    let listed_ok = specs.len() == config.tensors.len()
        && specs.iter().zip(&config.tensors).all(|(a, b)| a.name == b.name && a.shape == b.shape);
    if !listed_ok {
        return Err(ModelError::Format("tensor list does not match the configured shape".into()));
    }

    let bytes = fs::read(dir.join("weights.bin"))?;
    let n = expected.layout().total();
    if bytes.len() != n * 4 + 8 {
        return Err(ModelError::ChecksumMismatch);
    }
    let (data, tail) = bytes.split_at(n * 4);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if stored != weights_checksum(data) {
        return Err(ModelError::ChecksumMismatch);
    }
    let params: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let network = Network::from_params(config.model, config.vocab_size, params)?;
    Ok(Model { network, vocab, train_config: config.train })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let vocab = Vocab::from_spellings(
            ["<PAD>", "<UNK>", "SEX:F", "C:a", "C:b", "SEP"].map(String::from),
        )
        .unwrap();
        let cfg = ModelConfig { n_layers: 1, n_heads: 2, embedding_dim: 4, context_len: 8, feedforward_dim: 8, dropout: 0.0 };
        Model::new(cfg, vocab, 17).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = model();
        m.train_config = Some(TrainConfig::default());
        save_model(&m, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        let a: Vec<u32> = m.network.params().iter().map(|f| f.to_bits()).collect();
        let b: Vec<u32> = back.network.params().iter().map(|f| f.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.vocab, m.vocab);
        assert_eq!(back.config(), m.config());
        assert_eq!(back.train_config, m.train_config);
    }

    #[test]
    fn truncated_weights_fail_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&model(), dir.path()).unwrap();
        let path = dir.path().join("weights.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_model(dir.path()), Err(ModelError::ChecksumMismatch)));

        let mut flipped = bytes.clone();
        flipped[3] ^= 0x40;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(load_model(dir.path()), Err(ModelError::ChecksumMismatch)));
    }

    #[test]
    fn newer_format_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&model(), dir.path()).unwrap();
        let path = dir.path().join("config.json");
        let mut cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        cfg["format_version"] = serde_json::json!(FORMAT_VERSION + 1);
        fs::write(&path, cfg.to_string()).unwrap();
        assert!(matches!(
            load_model(dir.path()),
            Err(ModelError::FormatVersionMismatch { found, .. }) if found == FORMAT_VERSION + 1
        ));
    }
}
