//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "STYLNET1"  u32 version (=1)
//! u32 config length, canonical ArchConfig text (UTF-8)
//! u32 parameter count
//! per parameter: u16 name length, name (UTF-8), u8 rank, rank × u32 dims,
//!                row-major f32 values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::models::{param_specs, ArchConfig, Model, ParamStore, Variant};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STYLNET1";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config().to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn utf8(&mut self, n: usize, what: &'static str) -> Result<&'a str, CheckpointError> {
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r
        .take(MAGIC.len(), "magic")
        .map_err(|_| CheckpointError::BadMagic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = r.utf8(cfg_len, "config")?;
    let config = ArchConfig::parse(cfg_text)
        .map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    let specs = param_specs(&config);
    let count = r.u32("parameter count")? as usize;
    if count != specs.len() {
        return Err(CheckpointError::Malformed(format!(
            "{count} parameters, architecture defines {}",
            specs.len()
        ))
        .into());
    }
    let mut params = ParamStore::<f32>::from_specs(&specs, config.seed);
    for spec in &specs {
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes"));
        let name = r.utf8(name_len as usize, "parameter name")?;
        if name != spec.name {
            return Err(CheckpointError::Malformed(format!(
                "expected parameter `{}`, found `{name}`",
                spec.name
            ))
            .into());
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        if shape != spec.shape {
            return Err(CheckpointError::ShapeMismatch {
                name: spec.name.clone(),
                expected: spec.shape.clone(),
                found: shape,
            }
            .into());
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.set(&spec.name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(
            CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)).into(),
        );
    }
    Model::from_parts(config, params)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Load and require a specific architecture variant.
pub fn load_variant(path: &Path, variant: Variant) -> Result<Model<f32>> {
    let model = load(path)?;
    if model.config().variant != variant {
        return Err(CheckpointError::VariantMismatch {
            expected: variant.to_string(),
            found: model.config().variant.to_string(),
        }
        .into());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err(bytes: &[u8]) -> CheckpointError {
        match from_bytes(bytes) {
            Err(Error::Checkpoint(e)) => e,
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn roundtrip_and_distinct_errors() {
        let mut cfg = ArchConfig::new(Variant::MultiPatch).with_seed(3);
        cfg.input_size = 32;
        cfg.branches.truncate(3);
        let model = Model::<f32>::build(&ArchConfig {
            branches: vec![
                vec![crate::models::BranchLayer::new(2, 2, 4)],
                vec![crate::models::BranchLayer::new(2, 2, 4); 2],
                vec![crate::models::BranchLayer::new(2, 2, 4); 3],
            ],
            ..cfg
        })
        .unwrap();
        let bytes = to_bytes(&model);
        assert_eq!(&bytes[..8], MAGIC);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(to_bytes(&back), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(err(&bad), CheckpointError::BadMagic);
        assert_eq!(err(&bytes[..4]), CheckpointError::BadMagic);
        assert!(matches!(
            err(&bytes[..bytes.len() - 3]),
            CheckpointError::Truncated(_)
        ));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert_eq!(err(&v2), CheckpointError::UnsupportedVersion(2));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(err(&extra), CheckpointError::Malformed(_)));
    }
}
