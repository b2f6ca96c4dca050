//! Image directories: loading, PNG output and the procedural desk dataset.

use std::path::{Path, PathBuf};

use djscc_autodiff::Tensor;
use djscc_core::{rng, synth, CoreError, ImageSet};
use image::RgbImage;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

/// Optional per-image label file, one integer id per line in filename order.
pub const LABELS_FILE: &str = "labels.txt";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    /// Every image must already be `size x size`.
    #[default]
    None,
    Center,
    /// Seeded crop position per image index.
    Random,
}

/// Loaded images plus whether a label file was present. Unlabeled sets use
/// the null text label downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub set: ImageSet,
    pub labeled: bool,
}

/// `p / 127.5 - 1`.
pub fn pixel_to_unit(p: u8) -> f32 {
    f32::from(p) / 127.5 - 1.0
}

pub fn unit_to_pixel(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if path.is_file() && name != LABELS_FILE && !name.starts_with('.') {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn crop(img: RgbImage, size: usize, mode: CropMode, seed: u64, index: usize, path: &Path) -> Result<RgbImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == size && h == size {
        return Ok(img);
    }
    if mode == CropMode::None || w < size || h < size {
        return Err(HarnessError::Dataset(format!(
            "{} is {w}x{h}, expected {size}x{size}{}",
            path.display(),
            if mode == CropMode::None { " (no crop mode set)" } else { "" }
        )));
    }
    let (x, y) = match mode {
        CropMode::Random => {
            let mut r = rng::stream(seed, index as u64, "dataset/crop");
            (r.gen_range(0..=w - size), r.gen_range(0..=h - size))
        }
        _ => ((w - size) / 2, (h - size) / 2),
    };
    Ok(image::imageops::crop_imm(&img, x as u32, y as u32, size as u32, size as u32).to_image())
}

fn read_labels(dir: &Path, n: usize) -> Result<Option<Vec<usize>>> {
    let path = dir.join(LABELS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let labels = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<usize>()
                .map_err(|_| HarnessError::Dataset(format!("{}: bad label {l:?}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != n {
        return Err(HarnessError::Dataset(format!(
            "{} has {} labels for {n} images",
            path.display(),
            labels.len()
        )));
    }
    Ok(Some(labels))
}

/// Loads every image in `dir` (lexicographic filename order) as
/// `[N, 3, size, size]` in `[-1, 1]`.
pub fn load_dataset(dir: &Path, size: usize, mode: CropMode, seed: u64) -> Result<Dataset> {
    let files = image_files(dir)?;
    if files.is_empty() {
        return Err(CoreError::EmptyDataset.into());
    }
    let plane = size * size;
    let mut data = Vec::with_capacity(files.len() * 3 * plane);
    let mut ids = Vec::with_capacity(files.len());
    for (i, path) in files.iter().enumerate() {
        let img = image::open(path)
            .map_err(|e| HarnessError::Decode {
                path: path.clone(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let img = crop(img, size, mode, seed, i, path)?;
        for c in 0..3 {
            data.extend(img.pixels().map(|p| pixel_to_unit(p[c])));
        }
        ids.push(path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string());
    }
    let n = files.len();
    let labels = read_labels(dir, n)?;
    let labeled = labels.is_some();
    let images = Tensor::from_vec(&[n, 3, size, size], data).map_err(CoreError::from)?;
    let set = ImageSet::new(images, labels.unwrap_or_else(|| vec![0; n]), ids)?;
    Ok(Dataset { set, labeled })
}

/// Writes one `[3, H, W]` (or `[1, 3, H, W]`) image in `[-1, 1]` as PNG.
pub fn write_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    let (h, w) = match s {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        _ => return Err(HarnessError::Dataset(format!("cannot write image of shape {s:?}"))),
    };
    let d = image.data();
    let plane = h * w;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([unit_to_pixel(d[i]), unit_to_pixel(d[plane + i]), unit_to_pixel(d[2 * plane + i])])
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    img.save(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

/// Writes a set as `<id>.png` files plus a label file.
pub fn write_set(dir: &Path, set: &ImageSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, id) in set.ids.iter().enumerate() {
        write_png(&dir.join(format!("{id}.png")), &set.images.slice_outer(i, i + 1).map_err(CoreError::from)?)?;
    }
    let labels: String = set.labels.iter().map(|l| format!("{l}\n")).collect();
    let path = dir.join(LABELS_FILE);
    std::fs::write(&path, labels).map_err(io_err(&path))
}

/// Procedural desk dataset: `out/train` and `out/test` with disjoint item
/// indices.
pub fn generate_dataset(out: &Path, train: usize, test: usize, size: usize, seed: u64) -> Result<()> {
    let n_train = train as u64;
    write_set(&out.join("train"), &synth::generate_range(0..n_train, size, seed, "train")?)?;
    write_set(
        &out.join("test"),
        &synth::generate_range(n_train..n_train + test as u64, size, seed, "test")?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_endpoints() {
        assert_eq!(pixel_to_unit(0), -1.0);
        assert_eq!(pixel_to_unit(255), 1.0);
        assert_eq!(pixel_to_unit(128), 128.0 / 127.5 - 1.0);
        for p in 0..=255u8 {
            assert_eq!(unit_to_pixel(pixel_to_unit(p)), p);
        }
    }
}
