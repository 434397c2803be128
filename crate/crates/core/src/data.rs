//! Image datasets: directory loading, PNG export and sample grids.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, shape_err, Error, Result};
use crate::real::Real;
use crate::synth::Attributes;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSource {
    Directory { path: PathBuf, files: Vec<String> },
    Synthetic { description: String },
    InMemory,
}

/// Images (N, 3, R, R) in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub images: Tensor<f32>,
    pub resolution: usize,
    pub source: DatasetSource,
    /// Generating attributes, for synthetic sets.
    pub labels: Option<Vec<Attributes>>,
}

impl ImageDataset {
    pub fn from_tensor(images: Tensor<f32>, source: DatasetSource) -> Result<Self> {
        let shape = images.shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] || shape[0] == 0 {
            return Err(shape_err!("dataset must be (N>=1, 3, R, R), got {:?}", shape));
        }
        Ok(Self { resolution: shape[2], images, source, labels: None })
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `indices` as a batch.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        self.images.select_rows(indices).cast()
    }

    /// `n` images drawn uniformly with replacement.
    pub fn sample_batch<T: Real, R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor<T> {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        self.batch(&idx)
    }

    /// Split off the first `n` images.
    pub fn split(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        let part = |idx: &[usize]| Self {
            images: self.images.select_rows(idx),
            resolution: self.resolution,
            source: self.source.clone(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i].clone()).collect()),
        };
        (part(&head), part(&tail))
    }

    /// Write one PNG per image as `00000.png`, `00001.png`, ...
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        for i in 0..self.len() {
            let img = to_rgb_image(self.images.row(i), self.resolution);
            let path = dir.join(format!("{i:05}.png"));
            img.save(&path).map_err(|e| Error::Io { path, source: std::io::Error::other(e) })?;
        }
        Ok(())
    }
}

fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn to_rgb_image(chw: &[f32], r: usize) -> RgbImage {
    let plane = r * r;
    RgbImage::from_fn(r as u32, r as u32, |x, y| {
        let p = y as usize * r + x as usize;
        Rgb([to_byte(chw[p]), to_byte(chw[plane + p]), to_byte(chw[2 * plane + p])])
    })
}

/// Load every decodable PNG/JPEG in `dir` (sorted by name), bilinearly resized to `resolution`.
pub fn load_image_dir(dir: &Path, resolution: usize) -> Result<ImageDataset> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    entries.sort();
    let mut data = Vec::new();
    let mut files = Vec::new();
    for path in entries {
        let img = match image::open(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {}", path.display(), e);
                continue;
            }
        };
        let rgb = image::imageops::resize(&img.to_rgb8(), resolution as u32, resolution as u32, FilterType::Triangle);
        for c in 0..3 {
            for y in 0..resolution as u32 {
                for x in 0..resolution as u32 {
                    data.push(rgb.get_pixel(x, y)[c] as f32 / 127.5 - 1.0);
                }
            }
        }
        files.push(path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default());
    }
    if files.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    let images = Tensor::new(vec![files.len(), 3, resolution, resolution], data)?;
    Ok(ImageDataset {
        images,
        resolution,
        source: DatasetSource::Directory { path: dir.to_path_buf(), files },
        labels: None,
    })
}

/// Tile images (N, 3, R, R) into a PNG grid with `cols` columns and a 2-pixel gutter.
pub fn save_grid<T: Real>(images: &Tensor<T>, cols: usize, path: &Path) -> Result<()> {
    let (n, r) = (images.batch(), images.shape()[2]);
    let cols = cols.max(1).min(n.max(1));
    let rows = n.div_ceil(cols);
    let gap = 2;
    let (w, h) = (cols * (r + gap) + gap, rows * (r + gap) + gap);
    let mut canvas = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    let f: Tensor<f32> = images.cast();
    for i in 0..n {
        let tile = to_rgb_image(f.row(i), r);
        let (ox, oy) = ((i % cols) * (r + gap) + gap, (i / cols) * (r + gap) + gap);
        image::imageops::replace(&mut canvas, &tile, ox as i64, oy as i64);
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    canvas.save(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dir_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_image_dir(dir.path(), 32).unwrap_err();
        assert!(err.to_string().contains(&dir.path().display().to_string()));
    }

    #[test]
    fn mixed_sizes_are_resized_and_junk_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        for (i, s) in [20u32, 32, 50, 64, 33, 17, 40, 32, 90, 12].iter().enumerate() {
            RgbImage::from_pixel(*s, *s + 3, Rgb([10 * i as u8, 100, 200])).save(dir.path().join(format!("{i}.png"))).unwrap();
        }
        std::fs::write(dir.path().join("broken.png"), b"not an image").unwrap();
        let ds = load_image_dir(dir.path(), 32).unwrap();
        assert_eq!(ds.images.shape(), &[10, 3, 32, 32]);
        assert!(ds.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn save_then_reload_is_within_quantization() {
        let n = 3 * 32 * 32;
        let data: Vec<f32> = (0..2 * n).map(|i| ((i * 7919) % 2001) as f32 / 1000.0 - 1.0).collect();
        let ds = ImageDataset::from_tensor(Tensor::new(vec![2, 3, 32, 32], data).unwrap(), DatasetSource::InMemory).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save_dir(dir.path()).unwrap();
        let back = load_image_dir(dir.path(), 32).unwrap();
        for (a, b) in ds.images.data().iter().zip(back.images.data()) {
            assert!((a - b).abs() <= 1.0 / 127.5 + 1e-6);
        }
    }
}
