//! On-disk datasets and probability dumps.

use std::path::{Path, PathBuf};

use anyhow::Context;
use cfsg_core::imaging::{load_image, load_mask, save_image, save_mask, write_atomic};
use cfsg_core::tensor::{Shape, Tensor};
use cfsg_core::training::Sample;
use cfsg_core::Error;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

pub fn image_name(i: usize) -> String {
    format!("img_{i:05}.png")
}

pub fn mask_name(i: usize) -> String {
    format!("mask_{i:05}.png")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub scene_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub base_seed: u64,
    /// Distinct seeds of the rendered scenes.
    pub scene_seeds: Vec<u64>,
    pub entries: Vec<ManifestEntry>,
    pub config: serde_json::Value,
}

pub fn write_dataset(dir: &Path, samples: &[Sample], manifest: &Manifest) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, s) in samples.iter().enumerate() {
        save_image(&s.image, &dir.join(image_name(i)))?;
        save_mask(&s.mask, &dir.join(mask_name(i)))?;
    }
    let json = serde_json::to_vec_pretty(manifest)?;
    write_atomic(&dir.join(MANIFEST), &json)?;
    Ok(())
}

/// Image files of a dataset directory, sorted by name.
pub fn list_images(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?;
    for e in entries {
        let path = e?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("img_") && name.ends_with(".png") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// The mask that pairs with `image` inside `dir`.
pub fn mask_for(image: &Path, dir: &Path) -> PathBuf {
    let name = image.file_name().and_then(|n| n.to_str()).unwrap_or("");
    dir.join(name.replacen("img_", "mask_", 1))
}

pub fn load_dataset(dir: &Path) -> anyhow::Result<Vec<Sample>> {
    let images = list_images(dir)?;
    if images.is_empty() {
        return Err(Error::Data(format!("no img_*.png files in {}", dir.display())).into());
    }
    images
        .iter()
        .map(|p| {
            let m = mask_for(p, dir);
            if !m.exists() {
                return Err(Error::Data(format!("missing mask {}", m.display())).into());
            }
            Ok(Sample {
                image: load_image(p)?,
                mask: load_mask(&m)?,
            })
        })
        .collect()
}

const PROB_MAGIC: &[u8; 4] = b"CFSP";

/// Raw probability tensor: magic, four u32 dims (n, c, h, w), f32 payload, all little-endian.
pub fn encode_probabilities(t: &Tensor) -> Vec<u8> {
    let s = t.shape();
    let mut out = Vec::with_capacity(20 + 4 * t.len());
    out.extend_from_slice(PROB_MAGIC);
    for d in s.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_probabilities(bytes: &[u8]) -> anyhow::Result<Tensor> {
    if bytes.len() < 20 || &bytes[..4] != PROB_MAGIC {
        return Err(Error::Data("not a probability dump".into()).into());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let shape = Shape::new(dim(0), dim(1), dim(2), dim(3));
    let payload = &bytes[20..];
    if payload.len() != 4 * shape.len() {
        return Err(Error::Data("probability dump is truncated".into()).into());
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::from_vec(shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probability_dump_round_trip() {
        let t = Tensor::from_fn(Shape::new(1, 3, 2, 5), |_, c, y, x| (c * 10 + y * 5 + x) as f32 / 7.0);
        let bytes = encode_probabilities(&t);
        assert_eq!(decode_probabilities(&bytes).unwrap(), t);
        assert!(decode_probabilities(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_probabilities(b"XXXX0000000000000000").is_err());
    }

    #[test]
    fn missing_mask_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = cfsg_core::imaging::ImageRgb::new(32, 32);
        save_image(&img, &dir.path().join(image_name(0))).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err.downcast_ref::<Error>(), Some(Error::Data(_))));
        let empty = tempfile::tempdir().unwrap();
        assert!(load_dataset(empty.path()).is_err());
    }
}
