//! Model checkpoints: the network description plus every parameter tensor,
//! normalization running statistics included.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic        b"BSCK"
//! version      u32 (1)
//! header_len   u32
//! header       UTF-8 TOML: role, iterations, tensor lengths, [spec]
//! tensors      f64 × Σ lengths, in the model's parameter visit order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ModelSpec, Network};
use crate::nn::Parameterized;

const MAGIC: &[u8; 4] = b"BSCK";
const VERSION: u32 = 1;

/// What a checkpointed network was trained as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// Label-map autoencoder (phase one).
    Encoder,
    /// Image segmenter (phase two or baseline).
    Segmenter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    role: Role,
    iterations: usize,
    tensors: Vec<usize>,
    spec: ModelSpec,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub role: Role,
    /// Optimizer steps the parameters have seen.
    pub iterations: usize,
    pub network: Network,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors = Vec::new();
        self.network.visit_params(&mut |p| tensors.push(p.len()));
        let header = Header {
            role: self.role,
            iterations: self.iterations,
            tensors,
            spec: self.network.spec(),
        };
        let text = toml::to_string(&header)?;
        let mut f = BufWriter::new(File::create(path.as_ref())?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(text.len() as u32).to_le_bytes())?;
        f.write_all(text.as_bytes())?;
        let mut err = None;
        self.network.visit_params(&mut |p| {
            for v in &p.value {
                if let Err(e) = f.write_all(&v.to_le_bytes()) {
                    err.get_or_insert(e);
                }
            }
        });
        if let Some(e) = err {
            return Err(e.into());
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |reason: &str| Error::format(path, reason);
        let mut r = BufReader::new(File::open(path)?);
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated checkpoint"))?;
        if &word != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        r.read_exact(&mut word).map_err(|_| bad("truncated checkpoint"))?;
        if u32::from_le_bytes(word) != VERSION {
            return Err(bad("unsupported checkpoint version"));
        }
        r.read_exact(&mut word).map_err(|_| bad("truncated checkpoint"))?;
        let mut text = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut text).map_err(|_| bad("truncated checkpoint"))?;
        let text = String::from_utf8(text).map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        header.spec.validate()?;
        let mut network = header.spec.build(0)?;
        let mut lengths = Vec::new();
        network.visit_params(&mut |p| lengths.push(p.len()));
        if lengths != header.tensors {
            return Err(bad("tensor lengths do not match the embedded network description"));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let total: usize = lengths.iter().sum();
        if bytes.len() != 8 * total {
            return Err(Error::format(
                path,
                format!("expected {} parameter bytes, found {}", 8 * total, bytes.len()),
            ));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
        network.visit_params_mut(&mut |p| {
            for v in p.value.iter_mut() {
                *v = values.next().expect("length checked");
            }
        });
        Ok(Checkpoint {
            role: header.role,
            iterations: header.iterations,
            network,
        })
    }
}
