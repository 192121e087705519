//! Dataset directories: `manifest.json` plus one `sample_NNNNNN.bin` per
//! scene.
//!
//! Blob layout (little-endian): `"RCMS"`, version u32, size u32, the image
//! as `3·H·W` f32, a label flag u8, and when set: semseg, parts, edge and
//! saliency as `H·W` u8 each, normals as `2·H·W` f32, depth as `H·W` f32 and
//! the class label u8.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{Labels, MultiTaskSample, SceneConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLOB_MAGIC: &[u8; 4] = b"RCMS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: SceneConfig,
    pub count: usize,
}

pub fn blob_name(index: usize) -> String {
    format!("sample_{index:06}.bin")
}

pub fn encode_sample(s: &MultiTaskSample) -> Vec<u8> {
    let n = s.size();
    let mut out = Vec::with_capacity(16 + 12 * n * n);
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for v in s.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match &s.labels {
        None => out.push(0),
        Some(l) => {
            out.push(1);
            for m in [&l.semseg, &l.parts, &l.edge, &l.saliency] {
                out.extend_from_slice(m);
            }
            for v in l.normals.iter().chain(&l.depth) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(l.class_label);
        }
    }
    out
}

pub fn decode_sample(bytes: &[u8]) -> Result<MultiTaskSample> {
    let bad = |m: &str| Error::invalid(format!("sample blob: {m}"));
    let mut pos = 0usize;
    let mut take = |k: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + k).ok_or_else(|| bad("truncated"))?;
        pos += k;
        Ok(s)
    };
    if take(4)? != BLOB_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(bad("unsupported version"));
    }
    let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let hw = n * n;
    let floats = |b: &[u8]| -> Vec<f32> {
        b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let image = Tensor::new([3, n, n], floats(take(12 * hw)?))?;
    let labels = match take(1)?[0] {
        0 => None,
        1 => {
            let semseg = take(hw)?.to_vec();
            let parts = take(hw)?.to_vec();
            let edge = take(hw)?.to_vec();
            let saliency = take(hw)?.to_vec();
            let normals = floats(take(8 * hw)?);
            let depth = floats(take(4 * hw)?);
            let class_label = take(1)?[0];
            Some(Labels {
                semseg,
                parts,
                edge,
                saliency,
                normals,
                depth,
                class_label,
            })
        }
        _ => return Err(bad("bad label flag")),
    };
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(MultiTaskSample { image, labels })
}

/// Write a dataset directory. Refuses to overwrite an existing manifest
/// unless `force`.
pub fn export_dataset(dir: &Path, config: &SceneConfig, samples: &[MultiTaskSample], force: bool) -> Result<()> {
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() && !force {
        return Err(Error::invalid(format!(
            "{} exists; pass --force to overwrite",
            manifest_path.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let p = dir.join(blob_name(i));
        fs::write(&p, encode_sample(s)).map_err(|e| Error::io(&p, e))?;
    }
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        seed: config.seed,
        config: config.clone(),
        count: samples.len(),
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<MultiTaskSample>)> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version != DATASET_VERSION {
        return Err(Error::invalid(format!(
            "dataset format version {} unsupported",
            manifest.format_version
        )));
    }
    let samples = (0..manifest.count)
        .map(|i| {
            let p = dir.join(blob_name(i));
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            decode_sample(&bytes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    #[test]
    fn blob_round_trip() {
        let cfg = SceneConfig {
            size: 16,
            ..SceneConfig::default()
        };
        let mut samples = generate_dataset(&cfg, 2).unwrap();
        samples[1].labels = None;
        for s in &samples {
            assert_eq!(&decode_sample(&encode_sample(s)).unwrap(), s);
        }
        let bytes = encode_sample(&samples[0]);
        assert!(decode_sample(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            size: 16,
            seed: 4,
            ..SceneConfig::default()
        };
        let samples = generate_dataset(&cfg, 3).unwrap();
        export_dataset(dir.path(), &cfg, &samples, false).unwrap();
        assert!(export_dataset(dir.path(), &cfg, &samples, false).is_err());
        let (m, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(m.count, 3);
        assert_eq!(m.seed, 4);
        assert_eq!(back, samples);
    }
}
