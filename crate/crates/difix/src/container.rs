//! Single-file parameter container shared by scene checkpoints, fixer
//! checkpoints, and optional pretrained feature-extractor weights.
//!
//! Layout: 8-byte magic, u32 little-endian JSON header length, the JSON
//! header, then the raw parameter blocks as little-endian f32 in header
//! order. The header carries a `kind` string and arbitrary `meta` JSON so
//! each producer can stash its own config echo.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"DIFIXCK1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic bytes; not a parameter container")]
    BadMagic,
    #[error("header decode failed: {0}")]
    Header(#[from] serde_json::Error),
    #[error("block {name} length {got} does not match shape product {want}")]
    BlockLength { name: String, got: usize, want: usize },
    #[error("missing block {0}")]
    MissingBlock(String),
    #[error("container kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    blocks: Vec<BlockHeader>,
}

/// A named f32 parameter block with its logical shape.
#[derive(Debug, Clone)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// In-memory form of the on-disk container.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub blocks: Vec<Block>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self { kind: kind.to_string(), meta, blocks: Vec::new() }
    }

    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "block {name} shape mismatch");
        self.blocks.push(Block {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: data.iter().map(|&v| v as f32).collect(),
        });
    }

    pub fn block(&self, name: &str) -> Result<&Block, ContainerError> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| ContainerError::MissingBlock(name.to_string()))
    }

    pub fn block_f64(&self, name: &str) -> Result<Vec<f64>, ContainerError> {
        Ok(self.block(name)?.data.iter().map(|&v| v as f64).collect())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), ContainerError> {
        if self.kind != kind {
            return Err(ContainerError::KindMismatch {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockHeader { name: b.name.clone(), shape: b.shape.clone() })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let io_err = |source| ContainerError::Io { path: path.display().to_string(), source };
        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        let io_err = |source| ContainerError::Io { path: path.display().to_string(), source };
        file.write_all(MAGIC).map_err(io_err)?;
        let io_err = |source| ContainerError::Io { path: path.display().to_string(), source };
        file.write_all(&(header_json.len() as u32).to_le_bytes()).map_err(io_err)?;
        let io_err = |source| ContainerError::Io { path: path.display().to_string(), source };
        file.write_all(&header_json).map_err(io_err)?;
        for block in &self.blocks {
            let mut bytes = Vec::with_capacity(block.data.len() * 4);
            for v in &block.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let io_err = |source| ContainerError::Io { path: path.display().to_string(), source };
            file.write_all(&bytes).map_err(io_err)?;
        }
        let io_err = |source| ContainerError::Io { path: path.display().to_string(), source };
        file.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Container, ContainerError> {
        let io_err = |source| ContainerError::Io { path: path.display().to_string(), source };
        let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 8];
        let io_err = |source| ContainerError::Io { path: path.display().to_string(), source };
        file.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let mut len_bytes = [0u8; 4];
        let io_err = |source| ContainerError::Io { path: path.display().to_string(), source };
        file.read_exact(&mut len_bytes).map_err(io_err)?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        let io_err = |source| ContainerError::Io { path: path.display().to_string(), source };
        file.read_exact(&mut header_bytes).map_err(io_err)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;

        let mut blocks = Vec::with_capacity(header.blocks.len());
        for bh in header.blocks {
            let want = bh.shape.iter().product::<usize>();
            let mut bytes = vec![0u8; want * 4];
            let io_err = |source| ContainerError::Io { path: path.display().to_string(), source };
            file.read_exact(&mut bytes).map_err(io_err)?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            if data.len() != want {
                return Err(ContainerError::BlockLength { name: bh.name, got: data.len(), want });
            }
            blocks.push(Block { name: bh.name, shape: bh.shape, data });
        }
        Ok(Container { kind: header.kind, meta: header.meta, blocks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut c = Container::new("test", serde_json::json!({"n": 3}));
        c.push_f64("a.w", &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        c.push_f64("b", &[1], &[-0.5]);
        c.save(&path).unwrap();
        let back = Container::load(&path).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.meta["n"], 3);
        assert_eq!(back.block("a.w").unwrap().shape, vec![2, 3]);
        assert_eq!(back.block_f64("b").unwrap(), vec![-0.5]);
        assert!(back.block("missing").is_err());
    }

    #[test]
    fn f32_quantization_is_stable_across_round_trips() {
        // A second save/load of already-quantized data is bit-identical.
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let mut c = Container::new("q", serde_json::Value::Null);
        c.push_f64("x", &[3], &[std::f64::consts::PI, 1.0 / 3.0, -2.7182818]);
        c.save(&p1).unwrap();
        let once = Container::load(&p1).unwrap();
        once.save(&p2).unwrap();
        let twice = Container::load(&p2).unwrap();
        assert_eq!(once.block("x").unwrap().data, twice.block("x").unwrap().data);
    }
}
