//! Array-directory format: one directory per volume holding `image.raw`
//! (little-endian f32, C order), optional `labels.raw` (little-endian i32,
//! same shape) and `meta.json` describing them.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Volume;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub id: String,
    /// `[depth, height, width]`
    pub shape: [usize; 3],
    pub dtype: String,
    pub image: String,
    pub labels: Option<String>,
    pub labels_dtype: Option<String>,
}

pub fn write_volume_dir(dir: &Path, v: &Volume) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (d, h, w) = v.voxels.dim();
    let meta = VolumeMeta {
        id: v.id.clone(),
        shape: [d, h, w],
        dtype: "float32".into(),
        image: "image.raw".into(),
        labels: v.labels.as_ref().map(|_| "labels.raw".into()),
        labels_dtype: v.labels.as_ref().map(|_| "int32".into()),
    };
    let image: Vec<u8> = v.voxels.iter().flat_map(|x| x.to_le_bytes()).collect();
    write(&dir.join("image.raw"), &image)?;
    if let Some(l) = &v.labels {
        let bytes: Vec<u8> = l.iter().flat_map(|x| x.to_le_bytes()).collect();
        write(&dir.join("labels.raw"), &bytes)?;
    }
    write(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?.as_bytes())
}

pub fn read_volume_dir(dir: &Path) -> Result<Volume> {
    let meta_path = dir.join("meta.json");
    let meta: VolumeMeta = serde_json::from_slice(&read(&meta_path)?)?;
    if meta.dtype != "float32" {
        return Err(Error::Data(format!("{}: unsupported image dtype {}", meta_path.display(), meta.dtype)));
    }
    let [d, h, w] = meta.shape;
    let n = d * h * w;
    let image = read(&dir.join(&meta.image))?;
    if image.len() != 4 * n {
        return Err(Error::Data(format!(
            "{}: expected {} bytes for shape {:?}, found {}",
            dir.join(&meta.image).display(),
            4 * n,
            meta.shape,
            image.len()
        )));
    }
    let voxels: Vec<f32> = image.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let labels = match &meta.labels {
        None => None,
        Some(name) => {
            if let Some(dt) = &meta.labels_dtype {
                if dt != "int32" {
                    return Err(Error::Data(format!("{}: unsupported labels dtype {dt}", meta_path.display())));
                }
            }
            let bytes = read(&dir.join(name))?;
            if bytes.len() != 4 * n {
                return Err(Error::Data(format!("{}: label size mismatch", dir.join(name).display())));
            }
            let l: Vec<i32> = bytes.chunks_exact(4).map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            Some(Array3::from_shape_vec((d, h, w), l).map_err(|e| Error::Shape(e.to_string()))?)
        }
    };
    let voxels = Array3::from_shape_vec((d, h, w), voxels).map_err(|e| Error::Shape(e.to_string()))?;
    Volume::new(meta.id, voxels, labels)
}

pub fn write_corpus_dir(root: &Path, corpus: &[Volume]) -> Result<()> {
    for v in corpus {
        write_volume_dir(&root.join(&v.id), v)?;
    }
    Ok(())
}

/// Reads every volume directory under `root`, in directory-name order.
pub fn read_corpus_dir(root: &Path) -> Result<Vec<Volume>> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no volume directories found under {}", root.display())));
    }
    dirs.iter().map(|d| read_volume_dir(d)).collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let vox = Array3::from_shape_fn((2, 3, 4), |(z, y, x)| (z as f32 - 0.3) * 1e-3 + (y * x) as f32 + f32::EPSILON);
        let lab = Array3::from_shape_fn((2, 3, 4), |(z, y, x)| ((z + y + x) % 4) as i32);
        let v = Volume::new("case01", vox, Some(lab)).unwrap();
        write_corpus_dir(dir.path(), std::slice::from_ref(&v)).unwrap();
        let back = read_corpus_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].voxels.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                   v.voxels.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(back[0], v);
    }

    #[test]
    fn unlabeled_volume_and_size_errors() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new("u", Array3::zeros((1, 2, 2)), None).unwrap();
        write_volume_dir(&dir.path().join("u"), &v).unwrap();
        assert_eq!(read_volume_dir(&dir.path().join("u")).unwrap(), v);
        fs::write(dir.path().join("u/image.raw"), [0u8; 7]).unwrap();
        assert!(read_volume_dir(&dir.path().join("u")).is_err());
    }
}
