//! Binary model file: `"STEM"`, format version, architecture, parameters as
//! little-endian `f32`, then a 64-bit content hash.
//!
//! The hash is the first eight bytes (little-endian) of the SHA-256 digest of
//! every preceding byte. Containers record it so that decoding with a
//! different model is refused.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Activation, ArchitectureConfig, Backend, ModelParams};
use crate::bytes::{ByteReader, ByteWriter};
use crate::entropy_model::{EntropyConfig, FactorizedModel};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"STEM";
pub const MODEL_VERSION: u8 = 1;

/// A complete codec: architecture, parameters at storage precision, and the
/// hash of their serialized form.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ArchitectureConfig,
    pub params: ModelParams,
    hash: u64,
}

impl Model {
    /// Rounds parameters to `f32`, so a model built in memory behaves exactly
    /// like the same model read back from disk.
    pub fn new(config: ArchitectureConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        let params = params.rounded_to_f32();
        let bytes = encode_parts(&config, &params);
        let hash = content_hash(&bytes);
        Ok(Self { config, params, hash })
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn entropy_model(&self) -> FactorizedModel {
        FactorizedModel::new(
            self.config.entropy.clone(),
            self.config.latent_channels,
            self.params.entropy.clone(),
        )
        .expect("validated at construction")
    }
}

fn content_hash(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

fn encode_parts(config: &ArchitectureConfig, params: &ModelParams) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MODEL_MAGIC);
    w.u8(MODEL_VERSION);
    write_config(&mut w, config);
    w.u32(params.version);
    for block in [&params.analysis, &params.synthesis, &params.entropy] {
        w.u32(block.len() as u32);
    }
    for v in params.flatten() {
        w.f32(v as f32);
    }
    w.into_inner()
}

pub(crate) fn write_config(w: &mut ByteWriter, c: &ArchitectureConfig) {
    w.u8(match c.backend {
        Backend::Linear => 0,
        Backend::Convolutional => 1,
    });
    w.u8(match c.activation {
        Activation::Identity => 0,
        Activation::SmoothLeaky => 1,
    });
    w.u8(c.units as u8);
    w.u8(c.image_channels as u8);
    w.u16(c.latent_channels as u16);
    w.u16(c.unit_channels as u16);
    w.u8(c.kernel_size as u8);
    w.u8(c.entropy.stages as u8);
    w.u8(c.entropy.width as u8);
    w.i16(c.entropy.center_min as i16);
    w.i16(c.entropy.center_max as i16);
}

pub(crate) fn read_config(r: &mut ByteReader<'_>) -> Result<ArchitectureConfig> {
    let backend = match r.u8()? {
        0 => Backend::Linear,
        1 => Backend::Convolutional,
        b => return Err(Error::Config(format!("unknown backend tag {b}"))),
    };
    let activation = match r.u8()? {
        0 => Activation::Identity,
        1 => Activation::SmoothLeaky,
        a => return Err(Error::Config(format!("unknown activation tag {a}"))),
    };
    let cfg = ArchitectureConfig {
        backend,
        activation,
        units: r.u8()? as usize,
        image_channels: r.u8()? as usize,
        latent_channels: r.u16()? as usize,
        unit_channels: r.u16()? as usize,
        kernel_size: r.u8()? as usize,
        entropy: EntropyConfig {
            stages: r.u8()? as usize,
            width: r.u8()? as usize,
            center_min: i32::from(r.i16()?),
            center_max: i32::from(r.i16()?),
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut bytes = encode_parts(&model.config, &model.params);
    bytes.extend_from_slice(&model.hash.to_le_bytes());
    bytes
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = ByteReader::new(bytes, "model file");
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::BadMagic { expected: "STEM" });
    }
    let version = r.u8()?;
    if version != MODEL_VERSION {
        return Err(Error::Version(version));
    }
    let config = read_config(&mut r)?;
    let param_version = r.u32()?;
    let counts = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let total: usize = counts.iter().sum();
    if total.saturating_mul(4) > r.remaining() {
        return Err(Error::Truncated(format!(
            "model file declares {total} parameters but holds {} bytes",
            r.remaining()
        )));
    }
    let mut read_block = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| r.f32().map(f64::from)).collect() };
    let params = ModelParams {
        analysis: read_block(counts[0])?,
        synthesis: read_block(counts[1])?,
        entropy: read_block(counts[2])?,
        version: param_version,
    };
    let body_end = r.position();
    let stored = r.u64()?;
    if r.remaining() != 0 {
        return Err(Error::Invalid(format!("{} trailing bytes after model hash", r.remaining())));
    }
    let actual = content_hash(&bytes[..body_end]);
    if stored != actual {
        return Err(Error::Checksum("model file"));
    }
    params.check(&config)?;
    Ok(Model {
        config,
        params,
        hash: actual,
    })
}

pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_model() -> Model {
        let cfg = ArchitectureConfig {
            unit_channels: 4,
            ..ArchitectureConfig::default()
        };
        let params = ModelParams::init(&cfg, 17).unwrap();
        Model::new(cfg, params).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let m = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stem");
        save_model(&path, &m).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }

    #[test]
    fn hash_depends_on_parameters_and_architecture() {
        let m = sample_model();
        let mut p = m.params.clone();
        p.synthesis[0] += 0.5;
        assert_ne!(Model::new(m.config.clone(), p).unwrap().hash(), m.hash());
        let mut cfg = m.config.clone();
        cfg.entropy.stages = 3;
        cfg.activation = Activation::Identity;
        assert_ne!(Model::new(cfg, m.params.clone()).unwrap().hash(), m.hash());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_model(&sample_model());
        assert!(matches!(decode_model(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x10;
        assert!(decode_model(&flipped).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_model(&magic), Err(Error::BadMagic { .. })));
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(decode_model(&version), Err(Error::Version(9))));
    }
}
