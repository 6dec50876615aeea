//! Checkpoint files: an 8-byte magic, a little-endian `u32` format version,
//! a `u64` header length, a JSON header, then raw little-endian `f64`
//! blobs (for each tensor in header order: values, first moments, second
//! moments).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::models::{Architecture, ModelBundle, ModelConfig};
use crate::optim::{AdamState, Moments};
use crate::params::{Param, ParameterSet, Partition};
use crate::trainer::{TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"SCGNCKPT";
const VERSION: u32 = 1;

pub fn file_name(iteration: u64) -> String {
    format!("ckpt_{iteration}.scgn")
}

/// Iteration encoded in a `ckpt_<t>.scgn` file name.
pub fn iteration_of(path: &Path) -> Option<u64> {
    path.file_name()?
        .to_str()?
        .strip_prefix("ckpt_")?
        .strip_suffix(".scgn")?
        .parse()
        .ok()
}

/// Checkpoints in `dir`, sorted by iteration.
pub fn list(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out: Vec<(u64, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| iteration_of(&e.path()).map(|t| (t, e.path())))
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    partition: Partition,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    iteration: u64,
    adam_steps: BTreeMap<Partition, u64>,
    rng: RngState,
    tensors: Vec<TensorEntry>,
    history: Vec<LossReport>,
}

/// A bundle together with its training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub state: TrainState,
    pub train: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn capture(bundle: &ModelBundle, state: &TrainState, train: Option<&TrainConfig>) -> Self {
        Self {
            bundle: bundle.clone(),
            state: state.clone(),
            train: train.cloned(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let p = &self.bundle.params;
        self.state.adam.check(p)?;
        let header = Header {
            model: self.bundle.config.clone(),
            train: self.train.clone(),
            iteration: self.state.iteration,
            adam_steps: self.state.adam.steps.clone(),
            rng: RngState {
                seed: self.state.rng.get_seed(),
                stream: self.state.rng.get_stream(),
                word_pos: self.state.rng.get_word_pos().to_string(),
            },
            tensors: p
                .entries
                .iter()
                .map(|(n, e)| TensorEntry {
                    name: n.clone(),
                    partition: e.partition,
                    shape: e.shape.clone(),
                })
                .collect(),
            history: self.state.history.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("scgn.tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for (name, e) in &p.entries {
                let m = &self.state.adam.moments[name];
                for blob in [&e.data, &m.m, &m.v] {
                    for v in blob.iter() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        let mut r = bytes.as_slice();
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(|_| bad("truncated"))?;
        let version = u32::from_le_bytes(u32b);
        if version != VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(|_| bad("truncated"))?;
        let len = u64::from_le_bytes(u64b) as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        r = &r[len..];

        let arch = Architecture::build(&header.model.arch)?;
        let mut params = ParameterSet::default();
        let mut moments = BTreeMap::new();
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let mut take = || -> Result<Vec<f64>> {
                if r.len() < n * 8 {
                    return Err(bad("truncated tensor data"));
                }
                let (head, rest) = r.split_at(n * 8);
                r = rest;
                Ok(head
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect())
            };
            let data = take()?;
            let m = take()?;
            let v = take()?;
            params.entries.insert(
                t.name.clone(),
                Param {
                    partition: t.partition,
                    shape: t.shape.clone(),
                    data,
                },
            );
            moments.insert(t.name.clone(), Moments { m, v });
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let bundle = ModelBundle {
            config: header.model,
            arch,
            params,
        };
        bundle.check_params()?;
        let mut rng = ChaCha8Rng::from_seed(header.rng.seed);
        rng.set_stream(header.rng.stream);
        rng.set_word_pos(header.rng.word_pos.parse().map_err(|_| bad("bad rng position"))?);
        let state = TrainState {
            iteration: header.iteration,
            adam: AdamState {
                moments,
                steps: header.adam_steps,
            },
            rng,
            history: header.history,
        };
        Ok(Self {
            bundle,
            state,
            train: header.train,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names() {
        assert_eq!(file_name(2000), "ckpt_2000.scgn");
        assert_eq!(iteration_of(Path::new("/x/ckpt_17.scgn")), Some(17));
        assert_eq!(iteration_of(Path::new("ckpt_x.scgn")), None);
        assert_eq!(iteration_of(Path::new("run.json")), None);
    }
}
