//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `SRDLCKPT`, a little-endian `u32` format
//! version, a `u64` header length, the JSON header, then every parameter
//! tensor as raw little-endian `f64` in header order, followed by the Adam
//! first and second moments in the same order when present.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::Parameters;
use crate::optim::Adam;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SRDLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config_digest: String,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Number of completed optimizer steps.
    pub step: u64,
    pub data_seed: u64,
    pub categories: Vec<String>,
    pub tensors: Vec<(String, usize)>,
    pub adam_step: Option<u64>,
}

/// Adam `(first, second)` moments, one vector per tensor.
pub type Moments = (Vec<Vec<f64>>, Vec<Vec<f64>>);

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub parameters: Vec<Vec<f64>>,
    pub moments: Option<Moments>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn capture<P: Parameters>(
        params: &P,
        optimizer: Option<&Adam>,
        config_digest: &str,
        epoch: usize,
        step: u64,
        data_seed: u64,
        categories: &[String],
    ) -> Self {
        let tensors = params.tensors();
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                config_digest: config_digest.to_owned(),
                epoch,
                step,
                data_seed,
                categories: categories.to_vec(),
                tensors: tensors.iter().map(|(n, t)| (n.clone(), t.len())).collect(),
                adam_step: optimizer.map(|a| a.step),
            },
            parameters: tensors.iter().map(|(_, t)| t.to_vec()).collect(),
            moments: optimizer.map(|a| (a.first.clone(), a.second.clone())),
        }
    }

    /// Refuses checkpoints written under a different configuration.
    pub fn check_digest(&self, digest: &str) -> Result<()> {
        if self.header.config_digest != digest {
            return Err(Error::Checkpoint(format!(
                "config digest mismatch: checkpoint {}, config {digest}",
                self.header.config_digest
            )));
        }
        Ok(())
    }

    /// Copies the stored tensors into `params`, which must have the same layout.
    pub fn restore<P: Parameters>(&self, params: &mut P) -> Result<()> {
        let mut targets = params.tensors_mut();
        if targets.len() != self.header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} tensors, checkpoint {}",
                targets.len(),
                self.header.tensors.len()
            )));
        }
        for ((name, dst), ((stored, len), src)) in targets
            .iter_mut()
            .zip(self.header.tensors.iter().zip(&self.parameters))
        {
            if name != stored || dst.len() != *len {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` ({}) does not match stored `{stored}` ({len})",
                    dst.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, adam: &mut Adam) -> Result<()> {
        let (first, second) = self
            .moments
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("no optimizer state stored".into()))?;
        adam.step = self.header.adam_step.unwrap_or(0);
        adam.first.clone_from(first);
        adam.second.clone_from(second);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(header.len() + 20 + 8 * self.value_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut push = |vs: &[Vec<f64>]| {
            for v in vs.iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(&self.parameters);
        if let Some((m, v)) = &self.moments {
            push(m);
            push(v);
        }
        out
    }

    fn value_count(&self) -> usize {
        let n: usize = self.parameters.iter().map(Vec::len).sum();
        if self.moments.is_some() {
            3 * n
        } else {
            n
        }
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        bytes.read_exact(&mut word).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut long = [0u8; 8];
        bytes.read_exact(&mut long).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(long) as usize;
        if bytes.len() < len {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..len]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        bytes = &bytes[len..];
        let read_block = |bytes: &mut &[u8]| -> Result<Vec<Vec<f64>>> {
            header
                .tensors
                .iter()
                .map(|(_, n)| {
                    let need = n * 8;
                    if bytes.len() < need {
                        return Err(bad("truncated tensor data"));
                    }
                    let (head, rest) = bytes.split_at(need);
                    *bytes = rest;
                    Ok(head
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect())
                })
                .collect()
        };
        let parameters = read_block(&mut bytes)?;
        let moments = match header.adam_step {
            Some(_) => Some((read_block(&mut bytes)?, read_block(&mut bytes)?)),
            None => None,
        };
        if !bytes.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            header,
            parameters,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
