//! On-disk activation dumps.
//!
//! A dump directory holds a `manifest.json` and one headerless shard per
//! (checkpoint, layer), named `act_<c>_<l>.f32`. Each shard is row-major
//! `[row, hidden_dim]` little-endian f32, where rows are prompt-major over
//! the recorded token positions: row `i * P + p` is prompt `i` at
//! `token_positions[p]`.

use std::collections::HashSet;
use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
    Unpaired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endianness {
    Little,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model_id: String,
    /// Ordered by training progress.
    pub checkpoint_labels: Vec<String>,
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// Number of prompts; each contributes one row per token position.
    pub num_samples: usize,
    pub token_positions: Vec<i64>,
    pub polarity: Polarity,
    pub dtype: Dtype,
    pub endianness: Endianness,
    pub concept: String,
    pub seed: u64,
}

impl Manifest {
    /// A manifest with format defaults and a single `-1` token position.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model_id: impl Into<String>,
        checkpoint_labels: Vec<String>,
        num_layers: usize,
        hidden_dim: usize,
        num_samples: usize,
        polarity: Polarity,
        concept: impl Into<String>,
        seed: u64,
    ) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            model_id: model_id.into(),
            checkpoint_labels,
            num_layers,
            hidden_dim,
            num_samples,
            token_positions: vec![-1],
            polarity,
            dtype: Dtype::F32,
            endianness: Endianness::Little,
            concept: concept.into(),
            seed,
        }
    }

    pub fn num_checkpoints(&self) -> usize {
        self.checkpoint_labels.len()
    }

    pub fn rows_per_shard(&self) -> usize {
        self.num_samples * self.token_positions.len()
    }

    pub fn shard_len(&self) -> usize {
        self.rows_per_shard() * self.hidden_dim
    }

    /// Index into `token_positions` used for concept fitting: `-1` when
    /// recorded, otherwise the last listed position.
    pub fn primary_position(&self) -> usize {
        self.token_positions
            .iter()
            .position(|&p| p == -1)
            .unwrap_or(self.token_positions.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if self.checkpoint_labels.is_empty() {
            return Err(Error::Shape("manifest has no checkpoints".into()));
        }
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_samples == 0 {
            return Err(Error::Shape(format!(
                "num_layers={}, hidden_dim={}, num_samples={} must all be >= 1",
                self.num_layers, self.hidden_dim, self.num_samples
            )));
        }
        let mut seen = HashSet::new();
        for label in &self.checkpoint_labels {
            if !seen.insert(label.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate checkpoint label `{label}`"
                )));
            }
        }
        if self.token_positions.is_empty() {
            return Err(Error::Shape("token_positions is empty".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        sorted_json(self)
    }
}

/// Serializes with lexicographically sorted object keys.
pub fn sorted_json<T: Serialize>(value: &T) -> Result<String> {
    // `serde_json::Map` is a BTreeMap unless `preserve_order` is enabled.
    let value = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    Ok(text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    manifest: Manifest,
    /// Flattened `[checkpoint, layer, row, hidden_dim]`.
    data: Vec<f32>,
}

impl ActivationDump {
    pub fn new(manifest: Manifest, data: Vec<f32>) -> Result<Self> {
        manifest.validate()?;
        let expected = manifest.num_checkpoints() * manifest.num_layers * manifest.shard_len();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "dump data has {} values, manifest implies {expected}",
                data.len()
            )));
        }
        check_finite(&data, "activation dump")?;
        Ok(ActivationDump { manifest, data })
    }

    /// Builds a dump by evaluating `fill(checkpoint, layer)` for every shard.
    pub fn from_shards<F>(manifest: Manifest, mut fill: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Result<Vec<f32>>,
    {
        manifest.validate()?;
        let mut data = Vec::with_capacity(
            manifest.num_checkpoints() * manifest.num_layers * manifest.shard_len(),
        );
        for c in 0..manifest.num_checkpoints() {
            for l in 0..manifest.num_layers {
                let shard = fill(c, l)?;
                if shard.len() != manifest.shard_len() {
                    return Err(Error::Shape(format!(
                        "shard ({c}, {l}) has {} values, expected {}",
                        shard.len(),
                        manifest.shard_len()
                    )));
                }
                data.extend_from_slice(&shard);
            }
        }
        Self::new(manifest, data)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shard(&self, checkpoint: usize, layer: usize) -> &[f32] {
        let m = &self.manifest;
        assert!(checkpoint < m.num_checkpoints() && layer < m.num_layers);
        let len = m.shard_len();
        let start = (checkpoint * m.num_layers + layer) * len;
        &self.data[start..start + len]
    }

    pub fn shard_view(&self, checkpoint: usize, layer: usize) -> ArrayView2<'_, f32> {
        let m = &self.manifest;
        ArrayView2::from_shape((m.rows_per_shard(), m.hidden_dim), self.shard(checkpoint, layer))
            .expect("shard length matches manifest")
    }

    /// Hidden state of prompt `sample` at `token_positions[position]`.
    pub fn row(&self, checkpoint: usize, layer: usize, sample: usize, position: usize) -> &[f32] {
        let m = &self.manifest;
        let row = sample * m.token_positions.len() + position;
        let shard = self.shard(checkpoint, layer);
        &shard[row * m.hidden_dim..(row + 1) * m.hidden_dim]
    }
}

pub fn shard_file_name(checkpoint: usize, layer: usize) -> String {
    format!("act_{checkpoint}_{layer}.f32")
}

pub fn write_dump(dump: &ActivationDump, root: &Path) -> Result<()> {
    check_finite(&dump.data, "activation dump")?;
    fs::create_dir_all(root)?;
    let m = dump.manifest();
    for c in 0..m.num_checkpoints() {
        for l in 0..m.num_layers {
            write_f32_shard(&root.join(shard_file_name(c, l)), dump.shard(c, l))?;
        }
    }
    fs::write(root.join(MANIFEST_FILE), m.to_json()?)?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| missing_or_io(e, &path))?;
    // Version is checked before the full schema so old files report cleanly.
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(v) = raw.get("format_version").and_then(|v| v.as_u64()) {
        if v != u64::from(FORMAT_VERSION) {
            return Err(Error::Version {
                found: v as u32,
                expected: FORMAT_VERSION,
            });
        }
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn read_dump(root: &Path) -> Result<ActivationDump> {
    let manifest = read_manifest(root)?;
    let len = manifest.shard_len();
    ActivationDump::from_shards(manifest, |c, l| {
        let shard = read_f32_shard(&root.join(shard_file_name(c, l)), len)?;
        check_finite(&shard, &format!("shard ({c}, {l})"))?;
        Ok(shard)
    })
}

/// Checks that two dumps can be treated as index-aligned contrastive pairs.
pub fn validate_pairing(pos: &ActivationDump, neg: &ActivationDump) -> Result<()> {
    validate_manifest_pairing(pos.manifest(), neg.manifest())
}

pub fn validate_manifest_pairing(pos: &Manifest, neg: &Manifest) -> Result<()> {
    if pos.checkpoint_labels != neg.checkpoint_labels {
        return Err(Error::Pairing {
            field: "checkpoint_labels",
        });
    }
    if pos.num_layers != neg.num_layers {
        return Err(Error::Pairing { field: "num_layers" });
    }
    if pos.hidden_dim != neg.hidden_dim {
        return Err(Error::Pairing { field: "hidden_dim" });
    }
    if pos.num_samples != neg.num_samples {
        return Err(Error::Pairing {
            field: "num_samples",
        });
    }
    if pos.token_positions != neg.token_positions {
        return Err(Error::Pairing {
            field: "token_positions",
        });
    }
    Ok(())
}

pub(crate) fn check_finite(values: &[f32], context: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::RejectNonFinite {
            context: context.to_string(),
        })
    }
}

fn missing_or_io(e: std::io::Error, path: &Path) -> Error {
    if e.kind() == ErrorKind::NotFound {
        Error::MissingShard {
            path: path.to_path_buf(),
        }
    } else {
        Error::Io(e)
    }
}

/// Writes raw little-endian f32 values with no header.
pub fn write_f32_shard(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a headerless f32 shard, requiring exactly `expected_len` values.
pub fn read_f32_shard(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| missing_or_io(e, path))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::Shape(format!(
            "{} has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected_len * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{}%", (i + 1) * 100 / n)).collect()
    }

    fn sample_dump(ckpts: usize, layers: usize, samples: usize, dim: usize) -> ActivationDump {
        let m = Manifest::new("toy", labels(ckpts), layers, dim, samples, Polarity::Positive, "joy", 3);
        let n = ckpts * layers * samples * dim;
        let data = (0..n).map(|i| (i as f32 * 0.37).sin()).collect();
        ActivationDump::new(m, data).unwrap()
    }

    #[test]
    fn shard_sizes_follow_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let dump = sample_dump(2, 3, 4, 8);
        write_dump(&dump, dir.path()).unwrap();
        let shards: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".f32"))
            .collect();
        assert_eq!(shards.len(), 6);
        for s in shards {
            assert_eq!(s.metadata().unwrap().len(), 128);
        }
    }

    #[test]
    fn paper_scale_shard_length() {
        let m = Manifest::new("m", labels(1), 32, 4096, 256, Polarity::Positive, "c", 0);
        assert_eq!(m.shard_len() * 4, 256 * 4096 * 4);
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let dump = sample_dump(2, 3, 4, 8);
        write_dump(&dump, dir.path()).unwrap();
        let back = read_dump(dir.path()).unwrap();
        assert_eq!(back.manifest(), dump.manifest());
        let a: Vec<u32> = dump.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_layer_file() {
        let dir = tempfile::tempdir().unwrap();
        write_dump(&sample_dump(1, 3, 4, 8), dir.path()).unwrap();
        fs::remove_file(dir.path().join(shard_file_name(0, 2))).unwrap();
        assert!(matches!(read_dump(dir.path()), Err(Error::MissingShard { .. })));
    }

    #[test]
    fn truncated_shard() {
        let dir = tempfile::tempdir().unwrap();
        write_dump(&sample_dump(1, 2, 4, 8), dir.path()).unwrap();
        let p = dir.path().join(shard_file_name(0, 1));
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_dump(dir.path()), Err(Error::Shape(_))));
    }

    #[test]
    fn nan_in_shard_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dump(&sample_dump(1, 1, 2, 2), dir.path()).unwrap();
        let p = dir.path().join(shard_file_name(0, 0));
        write_f32_shard(&p, &[0.0, f32::NAN, 1.0, 2.0]).unwrap();
        assert!(matches!(read_dump(dir.path()), Err(Error::RejectNonFinite { .. })));
    }

    #[test]
    fn non_finite_write_rejected() {
        let m = Manifest::new("m", labels(1), 1, 2, 1, Polarity::Positive, "c", 0);
        assert!(matches!(
            ActivationDump::new(m, vec![1.0, f32::INFINITY]),
            Err(Error::RejectNonFinite { .. })
        ));
    }

    #[test]
    fn unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        write_dump(&sample_dump(1, 1, 2, 2), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_dump(dir.path()), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn manifest_keys_sorted() {
        let m = Manifest::new("m", labels(2), 1, 2, 1, Polarity::Negative, "c", 0);
        let text = m.to_json().unwrap();
        let keys: Vec<&str> = text
            .lines()
            .filter_map(|l| l.trim().strip_prefix('"'))
            .filter_map(|l| l.split('"').next())
            .filter(|k| !k.contains('%'))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn pairing_checks() {
        let pos = sample_dump(2, 2, 4, 3);
        let mut neg_m = pos.manifest().clone();
        neg_m.polarity = Polarity::Negative;
        let neg = ActivationDump::new(neg_m.clone(), pos.data().to_vec()).unwrap();
        validate_pairing(&pos, &neg).unwrap();

        let mut m = neg_m.clone();
        m.num_samples = 3;
        assert!(matches!(
            validate_manifest_pairing(pos.manifest(), &m),
            Err(Error::Pairing { field: "num_samples" })
        ));

        let mut m = neg_m.clone();
        m.checkpoint_labels.reverse();
        assert!(matches!(
            validate_manifest_pairing(pos.manifest(), &m),
            Err(Error::Pairing { field: "checkpoint_labels" })
        ));
    }

    #[test]
    fn multi_position_rows() {
        let mut m = Manifest::new("m", labels(1), 1, 2, 2, Polarity::Positive, "c", 0);
        m.token_positions = vec![-2, -1];
        let dump = ActivationDump::new(m, vec![0., 1., 2., 3., 4., 5., 6., 7.]).unwrap();
        assert_eq!(dump.row(0, 0, 1, 0), &[4., 5.]);
        assert_eq!(dump.manifest().primary_position(), 1);
    }
}
