use djscc_autodiff::Tensor;

use crate::error::{CoreError, Result};

/// Images in `[-1, 1]` as `[N, 3, H, W]` with per-image class labels and ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl ImageSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, ids: Vec<String>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(CoreError::Shape(format!("expected [N, 3, H, W] images, got {s:?}")));
        }
        if s[0] == 0 {
            return Err(CoreError::EmptyDataset);
        }
        if labels.len() != s[0] || ids.len() != s[0] {
            return Err(CoreError::Shape(format!(
                "{} images with {} labels and {} ids",
                s[0],
                labels.len(),
                ids.len()
            )));
        }
        Ok(Self { images, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W)`.
    pub fn resolution(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[2], s[3])
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let x = self.images.select_outer(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, labels))
    }

    /// The first `n` items (all of them when `n` exceeds the size).
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Ok(Self {
            images: self.images.slice_outer(0, n)?,
            labels: self.labels[..n].to_vec(),
            ids: self.ids[..n].to_vec(),
        })
    }
}
