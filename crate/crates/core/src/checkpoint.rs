//! Checkpoint files: `BVAE1` magic, a little-endian `u64` header length, a JSON header
//! (model config, normalization, slice indices, latent table and weight manifest), then
//! the concatenated little-endian `f32` weight blobs in manifest order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merl_io::MerlBrdf;
use crate::preprocess::{expand_slices, NetworkInput, NormConfig, SliceTable};
use crate::training::{stack_batch, Sample};
use crate::vae_model::{LatentCode, LatentStats, ModelConfig, Vae};

pub const MAGIC: &[u8; 5] = b"BVAE1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    norm: NormConfig,
    slice_indices: Vec<usize>,
    latent_table: BTreeMap<String, LatentStats>,
    parameter_count: usize,
    weights: Vec<WeightEntry>,
}

/// Trained weights plus everything needed to encode, decode and edit materials.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Vae<f32>,
    pub norm: NormConfig,
    pub slice_indices: Vec<usize>,
    pub latent_table: BTreeMap<String, LatentStats>,
}

impl Checkpoint {
    /// An untrained checkpoint (random weights, empty latent table).
    pub fn untrained(model: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Checkpoint {
            model: Vae::new(model, seed)?,
            norm: NormConfig::default(),
            slice_indices: crate::preprocess::select_slices(),
            latent_table: BTreeMap::new(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.model.config.latent_dim
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut weights = Vec::new();
        let mut offset = 0u64;
        for p in self.model.params() {
            weights.push(WeightEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset,
                trainable: p.trainable,
            });
            offset += 4 * p.value.len() as u64;
        }
        let header = Header {
            model: self.model.config.clone(),
            norm: self.norm,
            slice_indices: self.slice_indices.clone(),
            latent_table: self.latent_table.clone(),
            parameter_count: self.model.parameter_count(),
            weights,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        for p in self.model.params() {
            for v in &p.value {
                w.write_f32::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a BVAE1 checkpoint".into()));
        }
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut model = Vae::<f32>::new(header.model.clone(), 0)?;
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        {
            let mut params = model.params_mut();
            if params.len() != header.weights.len() {
                return Err(Error::Format(format!(
                    "manifest lists {} tensors, model has {}",
                    header.weights.len(),
                    params.len()
                )));
            }
            for (p, entry) in params.iter_mut().zip(&header.weights) {
                if p.name != entry.name || p.shape != entry.shape {
                    return Err(Error::Format(format!(
                        "weight {} {:?} does not match model tensor {} {:?}",
                        entry.name, entry.shape, p.name, p.shape
                    )));
                }
                let start = entry.offset as usize;
                let end = start + 4 * p.value.len();
                let bytes = blob.get(start..end).ok_or_else(|| {
                    Error::Format(format!("weight blob for {} is truncated", entry.name))
                })?;
                for (v, chunk) in p.value.iter_mut().zip(bytes.chunks_exact(4)) {
                    *v = f32::from_le_bytes(chunk.try_into().unwrap());
                }
            }
        }
        for (name, stats) in &header.latent_table {
            if stats.mu.len() != header.model.latent_dim
                || stats.logvar.len() != header.model.latent_dim
            {
                return Err(Error::Format(format!(
                    "latent entry {name} does not have length {}",
                    header.model.latent_dim
                )));
            }
        }
        header.norm.validate()?;
        Ok(Checkpoint {
            model,
            norm: header.norm,
            slice_indices: header.slice_indices,
            latent_table: header.latent_table,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn encode(&self, input: &NetworkInput) -> Result<LatentStats> {
        let sample = Sample::from_input(input);
        let x = stack_batch(&[&sample], &self.model.config);
        Ok(self.model.encode(&x)?.remove(0))
    }

    /// Decoder output in the normalized network domain.
    pub fn decode_normalized(&self, code: &LatentCode) -> Result<Vec<f32>> {
        Ok(self.model.decode(std::slice::from_ref(code))?.data)
    }

    /// Decoded reflectance on the 21 retained slices (denormalized, clamped at 0).
    pub fn decode_slices(&self, code: &LatentCode) -> Result<SliceTable> {
        SliceTable::from_network(&self.decode_normalized(code)?, &self.norm)
    }

    /// Decoded full MERL table (slices re-expanded by linear interpolation).
    pub fn decode_brdf(&self, code: &LatentCode, name: &str) -> Result<MerlBrdf> {
        expand_slices(&self.decode_slices(code)?, name)
    }

    /// Looks up a material's stored mean code.
    pub fn material_code(&self, name: &str) -> Option<LatentCode> {
        self.latent_table.get(name).map(LatentStats::mean_code)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            latent_dim: 3,
            in_channels: 3,
            in_size: 12,
            encoder_channels: vec![4, 4, 4],
            encoder_fc: vec![8],
            decoder_fc: vec![8],
            residual_blocks_encoder: 1,
            residual_blocks_decoder: 1,
            leaky_slope: 0.2,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut ck = Checkpoint::untrained(small(), 9).unwrap();
        ck.latent_table.insert(
            "a".into(),
            LatentStats {
                mu: vec![0.1, 0.2, 0.3],
                logvar: vec![-1.0, 0.0, 1.0],
            },
        );
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..5], MAGIC);
        let back = Checkpoint::read_from(&bytes[..]).unwrap();
        for (a, b) in ck.model.params().iter().zip(back.model.params()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.iter().zip(&b.value).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.latent_table, ck.latent_table);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(
            Checkpoint::read_from(&b"XXXXX\0\0\0\0\0\0\0\0"[..]),
            Err(Error::Format(_))
        ));
        let ck = Checkpoint::untrained(small(), 1).unwrap();
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(Checkpoint::read_from(&bytes[..]).is_err());
    }
}
