//! File-backed dataset sources: IDX archives, PNG fixture trees, and the
//! local tensor cache.

use super::{resize::resize_bilinear, DatasetSpec, LoadedDataset, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Read;
use std::path::Path;

fn finish_images<F: Scalar>(
    spec: &DatasetSpec,
    raw: Vec<(Array3<F>, usize)>,
    skipped: usize,
) -> Result<LoadedDataset<F>> {
    let (h, w, _) = spec.resolution;
    let n = raw.len();
    let mut images = Array4::<F>::zeros((n, 3, h, w));
    let mut labels = Vec::with_capacity(n);
    for (i, (img, y)) in raw.into_iter().enumerate() {
        if y >= spec.num_classes {
            return Err(Error::Dataset(format!(
                "label {y} out of range for '{}'",
                spec.name
            )));
        }
        let img = super::to_three_channels(&img);
        let img = if img.dim().1 == h && img.dim().2 == w {
            img
        } else {
            resize_bilinear(&img, h, w)
        };
        images.index_axis_mut(Axis(0), i).assign(&img);
        labels.push(y);
    }
    Ok(LoadedDataset::from_parts(spec.clone(), images, labels, skipped))
}

fn read_idx_file(path: &Path, want_magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut f = fs::File::open(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    let mut head = [0u8; 4];
    f.read_exact(&mut head)?;
    let magic = u32::from_be_bytes(head);
    if magic != want_magic {
        return Err(Error::Dataset(format!(
            "{}: bad magic {magic:#x}",
            path.display()
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        f.read_exact(&mut head)?;
        dims.push(u32::from_be_bytes(head) as usize);
    }
    let mut data = Vec::new();
    f.read_to_end(&mut data)?;
    let expect: usize = dims.iter().product();
    if data.len() != expect {
        return Err(Error::Dataset(format!(
            "{}: {} bytes, expected {expect}",
            path.display(),
            data.len()
        )));
    }
    Ok((dims, data))
}

/// Load an MNIST-style IDX archive directory (train-*/t10k-* file names).
pub fn load_idx<F: Scalar>(
    spec: &DatasetSpec,
    split: Split,
    dir: &Path,
) -> Result<LoadedDataset<F>> {
    let stem = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let (idims, ibytes) = read_idx_file(&dir.join(format!("{stem}-images-idx3-ubyte")), 0x0803)?;
    let (ldims, lbytes) = read_idx_file(&dir.join(format!("{stem}-labels-idx1-ubyte")), 0x0801)?;
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    if ldims[0] != n {
        return Err(Error::Dataset(format!(
            "idx image/label count mismatch: {n} vs {}",
            ldims[0]
        )));
    }
    let limit = spec.split_size(split);
    let take = if limit > 0 { limit.min(n) } else { n };
    let inv = F::from_f64_(1.0 / 255.0);
    let mut raw = Vec::with_capacity(take);
    for i in 0..take {
        let mut img = Array3::<F>::zeros((1, h, w));
        for y in 0..h {
            for x in 0..w {
                img[[0, y, x]] = F::from_f64_(ibytes[i * h * w + y * w + x] as f64) * inv;
            }
        }
        raw.push((img, lbytes[i] as usize));
    }
    finish_images(spec, raw, 0)
}

/// Load a PNG fixture tree: `<dir>/<split>/<class index>/*.png`.
/// Undecodable files are skipped and counted.
pub fn load_pngdir<F: Scalar>(
    spec: &DatasetSpec,
    split: Split,
    dir: &Path,
) -> Result<LoadedDataset<F>> {
    let split_dir = dir.join(split.as_str());
    if !split_dir.is_dir() {
        return Err(Error::MissingArtifact(split_dir.display().to_string()));
    }
    let mut raw = Vec::new();
    let mut skipped = 0usize;
    for class in 0..spec.num_classes {
        let class_dir = split_dir.join(class.to_string());
        if !class_dir.is_dir() {
            continue;
        }
        let mut files: Vec<_> = fs::read_dir(&class_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        files.sort();
        for path in files {
            match image::open(&path) {
                Ok(decoded) => {
                    let rgb = decoded.to_rgb8();
                    let (pw, ph) = rgb.dimensions();
                    let mut img = Array3::<F>::zeros((3, ph as usize, pw as usize));
                    for (x, y, px) in rgb.enumerate_pixels() {
                        for c in 0..3 {
                            img[[c, y as usize, x as usize]] =
                                F::from_f64_(px.0[c] as f64 / 255.0);
                        }
                    }
                    raw.push((img, class));
                }
                Err(e) => {
                    log::warn!("skipping corrupt record {}: {e}", path.display());
                    skipped += 1;
                }
            }
        }
    }
    finish_images(spec, raw, skipped)
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheManifest {
    name: String,
    classes: usize,
    resolution: (usize, usize, usize),
    counts: usize,
    content_hash: String,
}

fn hex_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Persist a loaded split under `<root>/<name>/<split>/` with a manifest.
pub fn save_to_cache<F: Scalar>(ds: &LoadedDataset<F>, root: &Path, split: Split) -> Result<()> {
    let dir = root.join(&ds.spec.name).join(split.as_str());
    fs::create_dir_all(&dir)?;
    let mut bytes = Vec::with_capacity(ds.images.len() * 4);
    for v in ds.images.iter() {
        bytes.extend_from_slice(&v.to_f32_().to_le_bytes());
    }
    fs::write(dir.join("images.bin"), &bytes)?;
    fs::write(dir.join("labels.json"), serde_json::to_vec(&ds.labels)?)?;
    let manifest = CacheManifest {
        name: ds.spec.name.clone(),
        classes: ds.spec.num_classes,
        resolution: ds.spec.resolution,
        counts: ds.len(),
        content_hash: hex_sha256(&bytes),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Load a split from the tensor cache, verifying the manifest hash.
pub fn load_cache<F: Scalar>(
    spec: &DatasetSpec,
    split: Split,
    root: &Path,
) -> Result<LoadedDataset<F>> {
    let dir = root.join(&spec.name).join(split.as_str());
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(Error::MissingArtifact(manifest_path.display().to_string()));
    }
    let manifest: CacheManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    let bytes = fs::read(dir.join("images.bin"))?;
    let got = hex_sha256(&bytes);
    if got != manifest.content_hash {
        return Err(Error::HashMismatch {
            field: format!("{}/{}/images.bin", spec.name, split.as_str()),
            expected: manifest.content_hash,
            got,
        });
    }
    let labels: Vec<usize> = serde_json::from_slice(&fs::read(dir.join("labels.json"))?)?;
    let (h, w, _) = manifest.resolution;
    let n = manifest.counts;
    if bytes.len() != n * 3 * h * w * 4 {
        return Err(Error::Dataset(format!(
            "cache payload size mismatch for '{}'",
            spec.name
        )));
    }
    let mut images = Array4::<F>::zeros((n, 3, h, w));
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        images.as_slice_mut().unwrap()[i] = F::from_f32_(v);
    }
    finish_images(
        spec,
        images
            .axis_iter(Axis(0))
            .zip(labels)
            .map(|(img, y)| (img.to_owned(), y))
            .collect(),
        0,
    )
}
