//! Checkpoint container: a JSON manifest followed by named little-endian
//! float32 arrays.
//!
//! Layout:
//!
//! ```text
//! XCKPT1\n
//! <manifest byte length as u64 LE>
//! <manifest JSON>
//! <array payloads, f32 LE, in manifest order>
//! ```
//!
//! The manifest carries the training config, epoch counter, per-epoch loss
//! history, RNG stream position, and the shape of every array. Training
//! state is quantized to f32 at epoch boundaries, so a save/load round trip
//! through this format is lossless and resume is bit-compatible with an
//! uninterrupted run.

use crate::error::{Error, Result};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8] = b"XCKPT1\n";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position split into two u64 halves (JSON has no u128).
    pub word_pos_lo: u64,
    pub word_pos_hi: u64,
}

impl RngState {
    pub fn from_parts(seed: u64, word_pos: u128) -> Self {
        RngState {
            seed,
            word_pos_lo: word_pos as u64,
            word_pos_hi: (word_pos >> 64) as u64,
        }
    }

    pub fn word_pos(&self) -> u128 {
        (self.word_pos_hi as u128) << 64 | self.word_pos_lo as u128
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CkptManifest {
    pub format_version: u32,
    /// Which trainer produced this: "cyclegan", "qsattn", "seg2d", "seg3d".
    pub kind: String,
    pub epoch: usize,
    /// One entry per completed epoch; named scalar losses.
    pub loss_history: Vec<BTreeMap<String, f64>>,
    pub config_json: serde_json::Value,
    pub rng: RngState,
    pub arrays: Vec<ArrayEntry>,
    /// Small named scalars that are not arrays (e.g. pool fill counts).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CkptManifest,
    arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config_json: serde_json::Value, rng: RngState) -> Self {
        Checkpoint {
            manifest: CkptManifest {
                format_version: 1,
                kind: kind.to_string(),
                epoch: 0,
                loss_history: Vec::new(),
                config_json,
                rng,
                arrays: Vec::new(),
                extra: BTreeMap::new(),
            },
            arrays: BTreeMap::new(),
        }
    }

    /// Store an f64 array as f32 (values are f32-exact at epoch boundaries).
    pub fn put_array(&mut self, name: &str, arr: &ArrayD<f64>) {
        let shape = arr.shape().to_vec();
        let data: Vec<f32> = arr.iter().map(|&v| v as f32).collect();
        self.arrays.insert(name.to_string(), (shape, data));
    }

    pub fn get_array(&self, name: &str) -> Result<ArrayD<f64>> {
        let (shape, data) = self.arrays.get(name).ok_or_else(|| {
            Error::IncompatibleCheckpoint(format!("missing array {name:?}"))
        })?;
        let values: Vec<f64> = data.iter().map(|&v| v as f64).collect();
        ArrayD::from_shape_vec(ndarray::IxDyn(shape), values)
            .map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))
    }

    pub fn has_array(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn array_names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(|s| s.as_str())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut manifest = self.manifest.clone();
        manifest.arrays = self
            .arrays
            .iter()
            .map(|(name, (shape, _))| ArrayEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect();
        let json = serde_json::to_vec(&manifest)
            .map_err(|e| Error::IoFailure(format!("manifest encode: {e}")))?;
        let mut f = std::fs::File::create(path.as_ref())?;
        f.write_all(MAGIC)?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        for entry in &manifest.arrays {
            let (_, data) = &self.arrays[&entry.name];
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for &v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 7];
        f.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{}: bad magic",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)?;
        let json_len = u64::from_le_bytes(len_bytes) as usize;
        let mut json = vec![0u8; json_len];
        f.read_exact(&mut json)?;
        let manifest: CkptManifest = serde_json::from_slice(&json)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("manifest decode: {e}")))?;
        let mut arrays = BTreeMap::new();
        for entry in &manifest.arrays {
            let n: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            f.read_exact(&mut bytes).map_err(|e| {
                Error::IncompatibleCheckpoint(format!("array {:?}: {e}", entry.name))
            })?;
            let mut data = Vec::with_capacity(n);
            for chunk in bytes.chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            arrays.insert(entry.name.clone(), (entry.shape.clone(), data));
        }
        Ok(Checkpoint { manifest, arrays })
    }
}
