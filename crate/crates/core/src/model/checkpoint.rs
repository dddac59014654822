//! On-disk tensor blobs.
//!
//! A checkpoint directory holds pairs of files per blob: `{stem}.manifest`
//! (text: magic header, then one `name\tdims` line per tensor, in order) and
//! `{stem}.bin` (magic, little-endian u64 element count, then every tensor's
//! elements as little-endian f32, concatenated in manifest order). Values
//! are stored as f32 regardless of the in-memory scalar type.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"REALLM01";

#[derive(Debug, Clone)]
pub struct BlobEntry<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

pub fn write_blob<S: Scalar>(
    dir: &Path,
    stem: &str,
    entries: &[(String, &[usize], &[S])],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(format!("{stem}.manifest"));
    let bin_path = dir.join(format!("{stem}.bin"));

    let mut manifest = String::new();
    manifest.push_str(&format!("{} {}\n", std::str::from_utf8(MAGIC).unwrap(), entries.len()));
    let mut total = 0usize;
    for (name, shape, data) in entries {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {shape:?} does not hold {} elements",
                data.len()
            )));
        }
        total += numel;
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name}\t{}\n", dims.join(",")));
    }
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;

    let mut bin = Vec::with_capacity(16 + total * 4);
    bin.extend_from_slice(MAGIC);
    bin.extend_from_slice(&(total as u64).to_le_bytes());
    for (_, _, data) in entries {
        for v in *data {
            bin.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    let mut f = fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    f.write_all(&bin).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

pub fn read_blob<S: Scalar>(dir: &Path, stem: &str) -> Result<Vec<BlobEntry<S>>> {
    let manifest_path = dir.join(format!("{stem}.manifest"));
    let bin_path = dir.join(format!("{stem}.bin"));
    let manifest =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;

    let mut lines = manifest.lines();
    let header = lines.next().unwrap_or_default();
    let mut head = header.split_whitespace();
    let magic = head.next().unwrap_or_default();
    if magic.as_bytes() != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}",
            manifest_path.display()
        )));
    }
    let count: usize = head
        .next()
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("{}: bad header", manifest_path.display())))?;

    let mut entries: Vec<(String, Vec<usize>)> = Vec::with_capacity(count);
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let (name, dims) = line.split_once('\t').ok_or_else(|| {
            Error::Checkpoint(format!("{}: bad line {line:?}", manifest_path.display()))
        })?;
        let shape = dims
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| {
                Error::Checkpoint(format!("{}: bad dims {dims:?}", manifest_path.display()))
            })?;
        entries.push((name.to_string(), shape));
    }
    if entries.len() != count {
        return Err(Error::Checkpoint(format!(
            "{}: header says {count} tensors, found {}",
            manifest_path.display(),
            entries.len()
        )));
    }

    let mut f = fs::File::open(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut bin = Vec::new();
    f.read_to_end(&mut bin).map_err(|e| Error::io(&bin_path, e))?;
    if bin.len() < 16 || &bin[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", bin_path.display())));
    }
    let total = u64::from_le_bytes(bin[8..16].try_into().unwrap()) as usize;
    let expect: usize = entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if total != expect || bin.len() != 16 + total * 4 {
        return Err(Error::Checkpoint(format!(
            "{}: holds {} elements in {} bytes, manifest expects {expect}",
            bin_path.display(),
            total,
            bin.len()
        )));
    }

    let mut out = Vec::with_capacity(entries.len());
    let mut off = 16;
    for (name, shape) in entries {
        let numel: usize = shape.iter().product();
        let data = bin[off..off + numel * 4]
            .chunks_exact(4)
            .map(|b| S::from_f32(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        off += numel * 4;
        out.push(BlobEntry { name, shape, data });
    }
    Ok(out)
}

impl<S: Scalar> Model<S> {
    /// Writes parameters as the `model` blob under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let named = self.params.named();
        let entries: Vec<(String, &[usize], &[S])> = named
            .iter()
            .map(|(n, t)| (n.clone(), &t.shape[..], &t.data[..]))
            .collect();
        write_blob(dir, "model", &entries)
    }

    /// Rebuilds a model from `dir`, validating every tensor name and shape
    /// against what `config` implies.
    pub fn load(config: ModelConfig, dir: &Path) -> Result<Model<S>> {
        let mut model = Model::new(config)?;
        let mut by_name: HashMap<String, BlobEntry<S>> = read_blob(dir, "model")?
            .into_iter()
            .map(|e| (e.name.clone(), e))
            .collect();
        let mut problems = Vec::new();
        model.params.visit_mut(|name, t| match by_name.remove(&name) {
            None => problems.push(format!("missing tensor {name}")),
            Some(e) if e.shape != t.shape => {
                problems.push(format!("{name}: stored {:?}, config needs {:?}", e.shape, t.shape))
            }
            Some(e) => t.data = e.data,
        });
        for name in by_name.keys() {
            problems.push(format!("unexpected tensor {name}"));
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!(
                "{}: {}",
                dir.display(),
                problems.join("; ")
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            decoder_layers: 1,
            decoder_dim: 8,
            decoder_heads: 2,
            decoder_ffn_dim: 16,
            encoder_layers: 1,
            encoder_dim: 8,
            raw_frame_dim: 3,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn save_load_round_trips_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f32>::new(config()).unwrap();
        m.save(dir.path()).unwrap();
        let loaded = Model::<f32>::load(config(), dir.path()).unwrap();
        for ((na, ta), (nb, tb)) in m.params.named().iter().zip(loaded.params.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape, tb.shape);
            assert_eq!(ta.data, tb.data, "{na}");
        }
    }

    #[test]
    fn load_rejects_mismatched_config() {
        let dir = tempfile::tempdir().unwrap();
        Model::<f32>::new(config()).unwrap().save(dir.path()).unwrap();
        let mut wider = config();
        wider.decoder_ffn_dim = 32;
        let err = Model::<f32>::load(wider, dir.path()).unwrap_err();
        assert!(err.to_string().contains("w_gate"), "{err}");

        let mut deeper = config();
        deeper.decoder_layers = 2;
        let err = Model::<f32>::load(deeper, dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing tensor dec.1"), "{err}");
    }

    #[test]
    fn corrupt_files_are_reported_by_path() {
        let dir = tempfile::tempdir().unwrap();
        Model::<f32>::new(config()).unwrap().save(dir.path()).unwrap();

        let bin = dir.path().join("model.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&bin, &bytes).unwrap();
        let err = Model::<f32>::load(config(), dir.path()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");

        let err = Model::<f32>::load(config(), &dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn blob_api_round_trips_arbitrary_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let a = vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![-0.5f32];
        let entries = vec![
            ("first.m".to_string(), &[2usize, 3][..], &a[..]),
            ("second.v".to_string(), &[1usize][..], &b[..]),
        ];
        write_blob(dir.path(), "optim", &entries).unwrap();
        let back = read_blob::<f32>(dir.path(), "optim").unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].name, "first.m");
        assert_eq!(back[0].shape, vec![2, 3]);
        assert_eq!(back[0].data, a);
        assert_eq!(back[1].data, b);
    }
}
