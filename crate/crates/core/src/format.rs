//! Binary container for datasets and checkpoints.
//!
//! Layout: `b"CODA"`, version byte, `u32` little-endian header length, UTF-8
//! JSON header, then `f64` little-endian payload blocks (row-major) in the
//! order listed by the header's `blocks` array. Offsets are in bytes from the
//! start of the payload.

use crate::adaptation::AdaptationResult;
use crate::error::{CodaError, Result};
use crate::hypernet::{HyperParams, PenaltyConfig};
use crate::model::ModelConfig;
use crate::numeric::Tensor;
use crate::systems::{Environment, EnvironmentDataset, Split, SystemSpec, Trajectory};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"CODA";
pub const VERSION: u8 = 1;

/// Header entry describing one payload block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl BlockInfo {
    fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Writes a container whose header is `meta` plus a `blocks` array.
pub fn write_container(
    out: &mut impl Write,
    meta: serde_json::Map<String, serde_json::Value>,
    blocks: &[(String, Vec<usize>, &[f64])],
) -> Result<()> {
    let mut infos = Vec::with_capacity(blocks.len());
    let mut offset = 0u64;
    for (name, shape, data) in blocks {
        if shape.iter().product::<usize>() != data.len() {
            return Err(CodaError::Shape(format!(
                "block {name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        infos.push(BlockInfo {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += 8 * data.len() as u64;
    }
    let mut header = meta;
    header.insert("blocks".into(), serde_json::to_value(&infos)?);
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| CodaError::Format("header exceeds 4 GiB".into()))?;
    out.write_all(&MAGIC)?;
    out.write_all(&[VERSION])?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for (_, _, data) in blocks {
        for v in data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Parsed container: header (without `blocks`) and named payloads.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: serde_json::Map<String, serde_json::Value>,
    pub blocks: Vec<(BlockInfo, Vec<f64>)>,
}

impl Container {
    pub fn block(&self, name: &str) -> Result<&(BlockInfo, Vec<f64>)> {
        self.blocks
            .iter()
            .find(|(b, _)| b.name == name)
            .ok_or_else(|| CodaError::Format(format!("missing block '{name}'")))
    }

    fn field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .header
            .get(key)
            .ok_or_else(|| CodaError::Format(format!("header lacks '{key}'")))?;
        serde_json::from_value(v.clone()).map_err(|e| CodaError::Format(format!("header field '{key}': {e}")))
    }

    fn kind(&self) -> Result<String> {
        self.field("kind")
    }
}

pub fn read_container(input: &mut impl Read) -> Result<Container> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_container(&bytes)
}

pub fn parse_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 9 || bytes[..4] != MAGIC {
        return Err(CodaError::Format("not a CODA container".into()));
    }
    if bytes[4] != VERSION {
        return Err(CodaError::Version {
            found: bytes[4],
            expected: VERSION,
        });
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let end = 9usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CodaError::Format("truncated header".into()))?;
    let mut header: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&bytes[9..end]).map_err(|e| CodaError::Format(format!("header: {e}")))?;
    let infos: Vec<BlockInfo> = serde_json::from_value(
        header
            .remove("blocks")
            .ok_or_else(|| CodaError::Format("header lacks 'blocks'".into()))?,
    )
    .map_err(|e| CodaError::Format(format!("blocks: {e}")))?;
    let payload = &bytes[end..];
    let mut expected = 0u64;
    let mut blocks = Vec::with_capacity(infos.len());
    for info in infos {
        if info.offset != expected {
            return Err(CodaError::Format(format!("block {} is not contiguous", info.name)));
        }
        let n = info.elements();
        let start = info.offset as usize;
        let stop = start + 8 * n;
        if stop > payload.len() {
            return Err(CodaError::Format(format!("block {} is truncated", info.name)));
        }
        let data = payload[start..stop]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        expected = stop as u64;
        blocks.push((info, data));
    }
    if expected as usize != payload.len() {
        return Err(CodaError::Format("trailing bytes after payload".into()));
    }
    Ok(Container { header, blocks })
}

/// All environments of one split of a family.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub system: SystemSpec,
    pub seed: u64,
    pub split: Split,
    pub datasets: Vec<EnvironmentDataset>,
}

#[derive(Serialize, Deserialize)]
struct EnvEntry {
    id: u32,
    params: Vec<f64>,
    trajectories: usize,
    split: Split,
}

impl DatasetFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = serde_json::Map::new();
        meta.insert("kind".into(), "dataset".into());
        meta.insert("system".into(), serde_json::to_value(&self.system)?);
        meta.insert("seed".into(), self.seed.into());
        meta.insert("split".into(), serde_json::to_value(self.split)?);
        let envs: Vec<EnvEntry> = self
            .datasets
            .iter()
            .map(|d| EnvEntry {
                id: d.environment.id,
                params: d.environment.params.clone(),
                trajectories: d.len(),
                split: d.split,
            })
            .collect();
        meta.insert("environments".into(), serde_json::to_value(envs)?);
        let mut blocks = Vec::new();
        for d in &self.datasets {
            for (i, t) in d.trajectories.iter().enumerate() {
                blocks.push((
                    format!("env{}/traj{i}", d.environment.id),
                    t.states.shape().to_vec(),
                    t.states.data(),
                ));
            }
        }
        let mut out = Vec::new();
        write_container(&mut out, meta, &blocks)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = parse_container(bytes)?;
        if c.kind()? != "dataset" {
            return Err(CodaError::Format(format!("expected a dataset, found '{}'", c.kind()?)));
        }
        let system: SystemSpec = c.field("system")?;
        let envs: Vec<EnvEntry> = c.field("environments")?;
        let seed: u64 = c.field("seed")?;
        let split: Split = c.field("split")?;
        let mut blocks = c.blocks.into_iter();
        let mut datasets = Vec::with_capacity(envs.len());
        for e in envs {
            let mut trajectories = Vec::with_capacity(e.trajectories);
            for i in 0..e.trajectories {
                let (info, data) = blocks
                    .next()
                    .ok_or_else(|| CodaError::Format(format!("env {} lacks trajectory {i}", e.id)))?;
                if info.name != format!("env{}/traj{i}", e.id) {
                    return Err(CodaError::Format(format!("unexpected block {}", info.name)));
                }
                trajectories.push(Trajectory {
                    env_id: e.id,
                    dt: system.dt,
                    states: Tensor::new(info.shape, data).map_err(|e| CodaError::Format(e.to_string()))?,
                });
            }
            datasets.push(EnvironmentDataset {
                environment: Environment {
                    id: e.id,
                    params: e.params,
                },
                split: e.split,
                state_shape: system.state_shape.clone(),
                trajectories,
            });
        }
        if blocks.next().is_some() {
            return Err(CodaError::Format("unreferenced payload blocks".into()));
        }
        Ok(Self {
            system,
            seed,
            split,
            datasets,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Trained model state, optionally with adapted contexts.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub system: SystemSpec,
    pub model: ModelConfig,
    pub penalty: PenaltyConfig,
    /// `true` for the single-parameter baseline; `W` is then all zero.
    pub erm: bool,
    pub params: HyperParams,
    pub adapted: Vec<AdaptationResult>,
}

#[derive(Serialize, Deserialize)]
struct AdaptEntry {
    env_id: u32,
    loss: f64,
    iterations: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let hp = &self.params;
        let mut meta = serde_json::Map::new();
        meta.insert("kind".into(), "checkpoint".into());
        meta.insert("system".into(), serde_json::to_value(&self.system)?);
        meta.insert("model".into(), serde_json::to_value(&self.model)?);
        meta.insert("penalty".into(), serde_json::to_value(self.penalty)?);
        meta.insert("erm".into(), self.erm.into());
        meta.insert("context_dim".into(), hp.context_dim.into());
        let ids: Vec<u32> = hp.contexts.keys().copied().collect();
        meta.insert("train_envs".into(), serde_json::to_value(&ids)?);
        let adapted: Vec<AdaptEntry> = self
            .adapted
            .iter()
            .map(|a| AdaptEntry {
                env_id: a.env_id,
                loss: a.loss,
                iterations: a.iterations,
            })
            .collect();
        meta.insert("adapt".into(), serde_json::to_value(adapted)?);
        let dt = hp.param_dim();
        let dx = hp.context_dim;
        let mut blocks: Vec<(String, Vec<usize>, &[f64])> =
            vec![("theta_c".into(), vec![dt], &hp.theta_c), ("w".into(), vec![dt, dx], &hp.w)];
        for (id, xi) in &hp.contexts {
            blocks.push((format!("xi/{id}"), vec![dx], xi));
        }
        for a in &self.adapted {
            blocks.push((format!("adapt/{}", a.env_id), vec![a.xi.len()], &a.xi));
        }
        let mut out = Vec::new();
        write_container(&mut out, meta, &blocks)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = parse_container(bytes)?;
        if c.kind()? != "checkpoint" {
            return Err(CodaError::Format(format!("expected a checkpoint, found '{}'", c.kind()?)));
        }
        let ids: Vec<u32> = c.field("train_envs")?;
        let mut contexts = BTreeMap::new();
        for id in ids {
            contexts.insert(id, c.block(&format!("xi/{id}"))?.1.clone());
        }
        let params = HyperParams {
            theta_c: c.block("theta_c")?.1.clone(),
            w: c.block("w")?.1.clone(),
            context_dim: c.field("context_dim")?,
            contexts,
        };
        params.validate().map_err(|e| CodaError::Format(e.to_string()))?;
        let entries: Vec<AdaptEntry> = c.field("adapt")?;
        let adapted = entries
            .into_iter()
            .map(|e| {
                Ok(AdaptationResult {
                    env_id: e.env_id,
                    xi: c.block(&format!("adapt/{}", e.env_id))?.1.clone(),
                    loss: e.loss,
                    iterations: e.iterations,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            system: c.field("system")?,
            model: c.field("model")?,
            penalty: c.field("penalty")?,
            erm: c.field("erm")?,
            params,
            adapted,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip_and_errors() {
        let mut meta = serde_json::Map::new();
        meta.insert("kind".into(), "test".into());
        let a = [1.0, -0.0, f64::MIN_POSITIVE];
        let mut bytes = Vec::new();
        write_container(&mut bytes, meta, &[("a".into(), vec![3], &a)]).unwrap();
        let c = parse_container(&bytes).unwrap();
        assert_eq!(c.block("a").unwrap().1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(parse_container(&bad), Err(CodaError::Version { found: 2, expected: 1 })));
        bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_container(&bad), Err(CodaError::Format(_))));
        assert!(matches!(parse_container(&bytes[..bytes.len() - 1]), Err(CodaError::Format(_))));
    }
}
