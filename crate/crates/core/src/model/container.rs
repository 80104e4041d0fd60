// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk model directory.
//!
//! ```text
//! model_dir/
//!   manifest.toml   format_version, optional weights_sha256, [config], [[tensor]]
//!   weights.bin     little-endian f32, row-major, 64-byte aligned offsets
//!   vocab.json      token -> id
//!   merges.txt      one `a b` merge rule per line
//!   fixtures/       optional logits_*.bin reference dumps
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::tokenizer::Tokenizer;
use super::weights::{tensor_layout, Weights};
use super::Model;
use crate::error::{Result, UnpackError};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MERGES_FILE: &str = "merges.txt";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGNMENT: u64 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_sha256: Option<String>,
    pub config: ModelConfig,
    #[serde(rename = "tensor")]
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| UnpackError::Manifest(e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(UnpackError::Manifest(format!(
                "format_version {} not supported (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }

    /// Checks every tensor against the config and the blob length, and
    /// returns the entries in layout order.
    pub fn validate(&self, blob_len: u64) -> Result<Vec<&TensorEntry>> {
        self.config.validate()?;
        let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
        for t in &self.tensors {
            if by_name.insert(t.name.as_str(), t).is_some() {
                return Err(UnpackError::Manifest(format!("duplicate tensor `{}`", t.name)));
            }
        }
        let layout = tensor_layout(&self.config);
        let mut ordered = Vec::with_capacity(layout.len());
        for (name, expected) in &layout {
            let t = by_name
                .remove(name.as_str())
                .ok_or_else(|| UnpackError::MissingTensor(name.clone()))?;
            if t.dtype != "f32" {
                return Err(UnpackError::Unsupported {
                    name: name.clone(),
                    what: "dtype",
                    value: t.dtype.clone(),
                });
            }
            if &t.shape != expected {
                return Err(UnpackError::ShapeMismatch {
                    name: name.clone(),
                    expected: expected.clone(),
                    found: t.shape.clone(),
                });
            }
            let bytes = 4 * expected.iter().product::<usize>() as u64;
            if t.offset % ALIGNMENT != 0 || t.offset.checked_add(bytes).is_none_or(|e| e > blob_len)
            {
                return Err(UnpackError::BadOffset {
                    name: name.clone(),
                    offset: t.offset,
                });
            }
            ordered.push(t);
        }
        if let Some(name) = by_name.keys().min() {
            return Err(UnpackError::UnexpectedTensor((*name).to_string()));
        }
        Ok(ordered)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads a model directory. Nothing is returned unless every tensor and the
/// tokenizer validate.
pub fn load_model(dir: &Path) -> Result<Model> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| UnpackError::io(&manifest_path, e))?;
    let manifest = Manifest::parse(&text)?;
    let blob_path = dir.join(WEIGHTS_FILE);
    let blob = std::fs::read(&blob_path).map_err(|e| UnpackError::io(&blob_path, e))?;
    if let Some(expected) = &manifest.weights_sha256 {
        let found = sha256_hex(&blob);
        if !found.eq_ignore_ascii_case(expected) {
            return Err(UnpackError::Checksum {
                expected: expected.clone(),
                found,
            });
        }
    }
    let entries = manifest.validate(blob.len() as u64)?;
    let tensors: Vec<Vec<f32>> = entries
        .iter()
        .map(|t| {
            let start = t.offset as usize;
            let len = t.shape.iter().product::<usize>();
            blob[start..start + 4 * len]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        })
        .collect();
    for (t, data) in entries.iter().zip(&tensors) {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(UnpackError::Unsupported {
                name: t.name.clone(),
                what: "non-finite value",
                value: "NaN/inf".into(),
            });
        }
    }
    let tokenizer = Tokenizer::from_files(&dir.join(VOCAB_FILE), &dir.join(MERGES_FILE))?;
    if tokenizer.vocab_len() > manifest.config.vocab_size {
        return Err(UnpackError::Tokenizer(format!(
            "tokenizer has {} ids but the model vocabulary is {}",
            tokenizer.vocab_len(),
            manifest.config.vocab_size
        )));
    }
    let weights = Weights::from_flat(&manifest.config, tensors);
    Model::new(manifest.config, weights, Some(tokenizer))
}

/// Writes a model directory. The tokenizer files are written when the model
/// carries a tokenizer.
pub fn save_model(model: &Model, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| UnpackError::io(dir, e))?;
    let layout = tensor_layout(&model.config);
    let flat = model.weights.flat_tensors();
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), data) in layout.into_iter().zip(flat) {
        while blob.len() as u64 % ALIGNMENT != 0 {
            blob.push(0);
        }
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f32".into(),
            offset: blob.len() as u64,
        });
        for x in data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        weights_sha256: Some(sha256_hex(&blob)),
        config: model.config.clone(),
        tensors,
    };
    let text = toml::to_string(&manifest).map_err(|e| UnpackError::Manifest(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| UnpackError::io(&path, e))?;
    let path = dir.join(WEIGHTS_FILE);
    std::fs::write(&path, &blob).map_err(|e| UnpackError::io(&path, e))?;
    if let Some(tok) = &model.tokenizer {
        tok.write_files(dir)?;
    }
    Ok(())
}

/// A reference logit dump: final-position logits for one prompt.
///
/// Layout: `b"ULOG"`, then little-endian u32 `n_tokens`, u32 `vocab`,
/// `n_tokens` u32 ids, `vocab` f32 logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitFixture {
    pub token_ids: Vec<u32>,
    pub logits: Vec<f32>,
}

impl LogitFixture {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = b"ULOG".to_vec();
        out.extend_from_slice(&(self.token_ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.logits.len() as u32).to_le_bytes());
        for id in &self.token_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for x in &self.logits {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| UnpackError::Fixture(format!("logit dump: {m}"));
        if bytes.len() < 12 || &bytes[..4] != b"ULOG" {
            return Err(bad("bad header"));
        }
        let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let n = word(4) as usize;
        let v = word(8) as usize;
        if bytes.len() != 12 + 4 * (n + v) {
            return Err(bad("length does not match header"));
        }
        let token_ids = (0..n).map(|i| word(12 + 4 * i)).collect();
        let logits = (0..v)
            .map(|i| f32::from_bits(word(12 + 4 * (n + i))))
            .collect();
        Ok(Self { token_ids, logits })
    }
}

/// Reads every `fixtures/logits_*.bin` in a model directory, sorted by name.
pub fn load_logit_fixtures(dir: &Path) -> Result<Vec<(String, LogitFixture)>> {
    let fdir = dir.join("fixtures");
    if !fdir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&fdir).map_err(|e| UnpackError::io(&fdir, e))? {
        let path = entry.map_err(|e| UnpackError::io(&fdir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name.starts_with("logits_") && name.ends_with(".bin") {
            let bytes = std::fs::read(&path).map_err(|e| UnpackError::io(&path, e))?;
            out.push((name, LogitFixture::from_bytes(&bytes)?));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}
