//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `FTRCKPT\0`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header, then every parameter block
//! followed by every accumulator as little-endian `f64`s in header order.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::adafactor::{AdafactorState, Moment, NamedMoment};
use super::blocks::{Block, Blocks};
use super::config::ModelConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FTRCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            other => Err(Error::InvalidInput(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub step: u64,
    pub train_loss: f64,
    pub config: ModelConfig,
    pub config_hash: String,
    pub params: Blocks,
    pub optimizer: AdafactorState,
}

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum MomentHeader {
    Factored { name: String, rows: usize, cols: usize },
    Full { name: String, len: usize },
}

#[derive(Serialize, Deserialize)]
struct Header {
    phase: Phase,
    step: u64,
    train_loss: f64,
    config: ModelConfig,
    config_hash: String,
    optimizer_step: u64,
    blocks: Vec<BlockHeader>,
    moments: Vec<MomentHeader>,
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    for &x in xs {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            phase: self.phase,
            step: self.step,
            train_loss: self.train_loss,
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            optimizer_step: self.optimizer.step,
            blocks: self
                .params
                .iter()
                .map(|b| BlockHeader {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                })
                .collect(),
            moments: self
                .optimizer
                .moments
                .iter()
                .map(|m| match &m.moment {
                    Moment::Factored { row, col } => MomentHeader::Factored {
                        name: m.name.clone(),
                        rows: row.len(),
                        cols: col.len(),
                    },
                    Moment::Full { v } => MomentHeader::Full {
                        name: m.name.clone(),
                        len: v.len(),
                    },
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let mut body = || -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            w.write_u32::<LittleEndian>(VERSION)?;
            w.write_u64::<LittleEndian>(json.len() as u64)?;
            w.write_all(&json)?;
            for b in self.params.iter() {
                write_f64s(&mut w, &b.data)?;
            }
            for m in &self.optimizer.moments {
                match &m.moment {
                    Moment::Factored { row, col } => {
                        write_f64s(&mut w, row)?;
                        write_f64s(&mut w, col)?;
                    }
                    Moment::Full { v } => write_f64s(&mut w, v)?,
                }
            }
            w.flush()
        };
        body().map_err(io)
    }

    /// Reads a checkpoint, refusing it when `expected_hash` is given and
    /// differs from the stored config hash.
    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io)?;
        let header: Header = serde_json::from_slice(&json)?;
        if let Some(expected) = expected_hash {
            if expected != header.config_hash {
                return Err(Error::ConfigHashMismatch {
                    expected: expected.to_string(),
                    found: header.config_hash,
                });
            }
        }
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for b in header.blocks {
            let n = b.shape.iter().product();
            let data = read_f64s(&mut r, n).map_err(io)?;
            blocks.push(Block {
                name: b.name,
                shape: b.shape,
                data,
            });
        }
        let mut moments = Vec::with_capacity(header.moments.len());
        for m in header.moments {
            moments.push(match m {
                MomentHeader::Factored { name, rows, cols } => NamedMoment {
                    name,
                    moment: Moment::Factored {
                        row: read_f64s(&mut r, rows).map_err(io)?,
                        col: read_f64s(&mut r, cols).map_err(io)?,
                    },
                },
                MomentHeader::Full { name, len } => NamedMoment {
                    name,
                    moment: Moment::Full {
                        v: read_f64s(&mut r, len).map_err(io)?,
                    },
                },
            });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes in {}", rest.len(), path.display())));
        }
        let params = Blocks::new(blocks);
        let optimizer = AdafactorState {
            step: header.optimizer_step,
            moments,
        };
        optimizer.check(&params)?;
        Ok(Checkpoint {
            phase: header.phase,
            step: header.step,
            train_loss: header.train_loss,
            config: header.config,
            config_hash: header.config_hash,
            params,
            optimizer,
        })
    }
}
