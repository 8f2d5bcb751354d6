//! Binary model checkpoints.
//!
//! Layout: magic `RARU`, version u32, length-prefixed header JSON (arch
//! config plus training metadata), parameter count u32, then per parameter:
//! name length u16, name bytes, rank u8, dims u32 x rank, 32-bit values.
//! All integers and floats little-endian; parameters appear in the
//! set's lexicographic name order, so save -> load -> save is byte-identical.

use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Shape, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"RARU";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub arch: ArchConfig,
    pub epoch: usize,
    pub val_dice: f64,
    pub seed: u64,
}

pub fn save_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    params: &ParamSet<f32>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_string(header)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(4u8);
        for d in [tensor.shape.n, tensor.shape.c, tensor.shape.h, tensor.shape.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&out)?;
    Ok(())
}

/// Exact byte size of a checkpoint for the given header and parameters.
pub fn checkpoint_size(header: &CheckpointHeader, params: &ParamSet<f32>) -> Result<usize> {
    let json = serde_json::to_string(header)?;
    let mut size = 4 + 4 + 4 + json.len() + 4;
    for (name, tensor) in params.iter() {
        size += 2 + name.len() + 1 + 4 * 4 + 4 * tensor.numel();
    }
    Ok(size)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointCorrupt(format!(
                "unexpected end of file at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamSet<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::CheckpointBadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointBadVersion(version));
    }
    let json_len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(json_len)?)?;
    header.arch.validate()?;
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::CheckpointCorrupt("non-utf8 parameter name".into()))?;
        let rank = r.take(1)?[0];
        if rank != 4 {
            return Err(Error::CheckpointCorrupt(format!(
                "parameter {name} has rank {rank}, expected 4"
            )));
        }
        let dims = [
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        ];
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
        let raw = r.take(4 * shape.numel())?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::CheckpointCorrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    validate_against_config(&header.arch, &params)?;
    Ok((header, params))
}

/// Stored parameters must match the freshly wired graph for the stored
/// config, name for name and shape for shape.
fn validate_against_config(config: &ArchConfig, params: &ParamSet<f32>) -> Result<()> {
    let reference: crate::arch::Model<f32> = crate::arch::build_model(config, 0)?;
    if reference.params.len() != params.len() {
        return Err(Error::CheckpointShapeMismatch(format!(
            "expected {} parameters, found {}",
            reference.params.len(),
            params.len()
        )));
    }
    for (name, t) in reference.params.iter() {
        match params.get(name) {
            None => {
                return Err(Error::CheckpointShapeMismatch(format!(
                    "missing parameter {name}"
                )))
            }
            Some(stored) if stored.shape != t.shape => {
                return Err(Error::CheckpointShapeMismatch(format!(
                    "parameter {name}: shape {} does not match config ({})",
                    stored.shape, t.shape
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_model, Model};

    fn toy() -> (CheckpointHeader, ParamSet<f32>) {
        let arch = ArchConfig {
            base_channels: 2,
            ..ArchConfig::default()
        };
        let model: Model<f32> = build_model(&arch, 7).unwrap();
        (
            CheckpointHeader {
                arch,
                epoch: 3,
                val_dice: 0.75,
                seed: 7,
            },
            model.params,
        )
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (header, params) = toy();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save_checkpoint(&p1, &header, &params).unwrap();
        let (h2, params2) = load_checkpoint(&p1).unwrap();
        assert_eq!(h2, header);
        save_checkpoint(&p2, &h2, &params2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap()
        );
    }

    #[test]
    fn file_size_matches_closed_form() {
        let (header, params) = toy();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        save_checkpoint(&p, &header, &params).unwrap();
        assert_eq!(
            std::fs::metadata(&p).unwrap().len() as usize,
            checkpoint_size(&header, &params).unwrap()
        );
    }

    #[test]
    fn corrupted_magic_is_rejected_by_name() {
        let (header, params) = toy();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        save_checkpoint(&p, &header, &params).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(Error::CheckpointBadMagic)
        ));
    }

    #[test]
    fn wrong_version_and_trailing_bytes_rejected() {
        let (header, params) = toy();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        save_checkpoint(&p, &header, &params).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(Error::CheckpointBadVersion(9))
        ));

        let mut padded = good.clone();
        padded.push(0);
        std::fs::write(&p, &padded).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(Error::CheckpointCorrupt(_))
        ));
    }

    #[test]
    fn shape_config_mismatch_is_detected() {
        let (mut header, params) = toy();
        // Store with a config that wires different widths.
        header.arch.base_channels = 4;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        save_checkpoint(&p, &header, &params).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(Error::CheckpointShapeMismatch(_))
        ));
    }
}
