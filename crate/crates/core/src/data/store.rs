use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST: &str = "manifest.csv";

/// Supplies the pixels of a sample as a `[3, H, W]` tensor scaled to
/// `[-1, 1]`.
pub trait ImageSource: Sync {
    fn image(&self, sample_id: &str) -> Result<Tensor<f32>>;
}

/// Interleaved 8-bit RGB to a channel-major tensor in `[-1, 1]`.
pub fn image_tensor(rgb: &[u8], width: usize, height: usize) -> Result<Tensor<f32>> {
    let n = width * height;
    if rgb.len() != 3 * n {
        return Err(Error::dim("rgb buffer", 3 * n, rgb.len()));
    }
    let mut data = vec![0f32; 3 * n];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * n + i] = px[ch] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::new([3, height, width], data)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub sample_id: String,
    pub file: String,
    pub width: usize,
    pub height: usize,
}

/// A directory of raw RGB files indexed by a manifest.
#[derive(Debug, Clone)]
pub struct PixelStore {
    root: PathBuf,
    entries: HashMap<String, StoreEntry>,
}

impl PixelStore {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            entries: HashMap::new(),
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let manifest = root.join(MANIFEST);
        let mut reader = csv::Reader::from_path(&manifest)?;
        let mut entries = HashMap::new();
        for rec in reader.deserialize::<StoreEntry>() {
            let e = rec.map_err(|e| Error::Format {
                path: manifest.display().to_string(),
                reason: e.to_string(),
            })?;
            entries.insert(e.sample_id.clone(), e);
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes one image and returns its file name relative to the store.
    pub fn put(&mut self, sample_id: &str, rgb: &[u8], width: usize, height: usize) -> Result<String> {
        if rgb.len() != 3 * width * height {
            return Err(Error::dim("rgb buffer", 3 * width * height, rgb.len()));
        }
        let file = format!("{sample_id}.rgb");
        fs::write(self.root.join(&file), rgb)?;
        self.entries.insert(
            sample_id.to_string(),
            StoreEntry {
                sample_id: sample_id.to_string(),
                file: file.clone(),
                width,
                height,
            },
        );
        Ok(file)
    }

    pub fn write_manifest(&self) -> Result<()> {
        let mut entries: Vec<_> = self.entries.values().collect();
        entries.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let mut w = csv::Writer::from_path(self.root.join(MANIFEST))?;
        for e in entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn rgb(&self, sample_id: &str) -> Result<(Vec<u8>, usize, usize)> {
        let e = self
            .entries
            .get(sample_id)
            .ok_or_else(|| Error::Invalid(format!("sample {sample_id} not in pixel store")))?;
        let path = self.root.join(&e.file);
        let bytes = fs::read(&path)?;
        if bytes.len() != 3 * e.width * e.height {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("{} bytes for a {}x{} image", bytes.len(), e.width, e.height),
            });
        }
        Ok((bytes, e.width, e.height))
    }
}

impl ImageSource for PixelStore {
    fn image(&self, sample_id: &str) -> Result<Tensor<f32>> {
        let (rgb, w, h) = self.rgb(sample_id)?;
        image_tensor(&rgb, w, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = PixelStore::create(dir.path()).unwrap();
        let rgb: Vec<u8> = (0..48).collect();
        store.put("a", &rgb, 4, 4).unwrap();
        store.write_manifest().unwrap();
        let back = PixelStore::open(dir.path()).unwrap();
        assert_eq!(back.rgb("a").unwrap(), (rgb, 4, 4));
        let t = back.image("a").unwrap();
        assert_eq!(t.shape(), [3, 4, 4]);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[16], 1.0 / 127.5 - 1.0);
    }

    #[test]
    fn short_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = PixelStore::create(dir.path()).unwrap();
        store.put("a", &[0; 12], 2, 2).unwrap();
        store.write_manifest().unwrap();
        fs::write(dir.path().join("a.rgb"), [0u8; 5]).unwrap();
        assert!(PixelStore::open(dir.path()).unwrap().rgb("a").is_err());
        assert!(store.image("missing").is_err());
    }
}
