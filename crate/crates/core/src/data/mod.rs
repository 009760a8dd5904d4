//! Labeled image datasets and their on-disk formats.

mod io;

pub use io::{
    dataset_by_id, encode_png, load_cifar10_dir, load_idx, load_png, mnist, mnist_vendored, quantize, save_png, DATASET_IDS, DATA_DIR_ENV,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const MNIST: ImageShape = ImageShape {
        height: 28,
        width: 28,
        channels: 1,
    };

    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[n, C, H, W]`
    pub fn nchw(&self, n: usize) -> Vec<usize> {
        vec![n, self.channels, self.height, self.width]
    }
}

/// Ordered `(image, label)` pairs. Images are stored row-major H×W×C with
/// values nominally in `[0, 1]`; index `i` is a stable identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    shape: ImageShape,
    class_count: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn empty(shape: ImageShape, class_count: usize) -> Self {
        assert!(class_count > 0, "class_count must be positive");
        Self {
            shape,
            class_count,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_parts(
        shape: ImageShape,
        class_count: usize,
        pixels: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::Invalid("class_count must be positive".into()));
        }
        if pixels.len() != labels.len() * shape.len() {
            return Err(Error::Invalid(format!(
                "{} pixels do not form {} images of {:?}",
                pixels.len(),
                labels.len(),
                shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Invalid(format!("label {bad} >= class_count {class_count}")));
        }
        Ok(Self {
            shape,
            class_count,
            pixels,
            labels,
        })
    }

    pub fn push(&mut self, image: &[f32], label: usize) {
        assert_eq!(image.len(), self.shape.len(), "image size mismatch");
        assert!(label < self.class_count, "label {label} out of range");
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.shape.len();
        &mut self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn set_label(&mut self, i: usize, label: usize) {
        assert!(label < self.class_count);
        self.labels[i] = label;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f32], usize)> + '_ {
        self.pixels
            .chunks_exact(self.shape.len().max(1))
            .zip(self.labels.iter().copied())
    }

    /// Indices of samples with the given label, in dataset order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut out = LabeledDataset::empty(self.shape, self.class_count);
        out.pixels.reserve(indices.len() * self.shape.len());
        for &i in indices {
            out.push(self.image(i), self.labels[i]);
        }
        out
    }

    /// Same samples with labels passed through `map` into a new label space.
    pub fn relabel(&self, class_count: usize, map: impl Fn(usize) -> usize) -> Result<LabeledDataset> {
        let labels = self.labels.iter().map(|&l| map(l)).collect();
        LabeledDataset::from_parts(self.shape, class_count, self.pixels.clone(), labels)
    }

    pub fn extend(&mut self, other: &LabeledDataset) {
        assert_eq!(self.shape, other.shape, "dataset shape mismatch");
        assert!(other.labels.iter().all(|&l| l < self.class_count));
        self.pixels.extend_from_slice(&other.pixels);
        self.labels.extend_from_slice(&other.labels);
    }

    /// Images `indices` as an NCHW tensor.
    pub fn batch_nchw(&self, indices: &[usize]) -> Tensor {
        let ImageShape {
            height: h,
            width: w,
            channels: c,
        } = self.shape;
        let mut out = vec![0.0f32; indices.len() * self.shape.len()];
        for (b, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            let dst = &mut out[b * self.shape.len()..(b + 1) * self.shape.len()];
            if c == 1 {
                dst.copy_from_slice(img);
            } else {
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            dst[(ch * h + y) * w + x] = img[(y * w + x) * c + ch];
                        }
                    }
                }
            }
        }
        Tensor::new(self.shape.nchw(indices.len()), out)
    }

    pub fn all_nchw(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch_nchw(&idx)
    }

    /// Inverse of [`batch_nchw`](Self::batch_nchw).
    pub fn from_nchw(
        batch: &Tensor,
        labels: &[usize],
        class_count: usize,
    ) -> Result<LabeledDataset> {
        let s = batch.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::Invalid(format!(
                "expected [{}, C, H, W] batch, got {:?}",
                labels.len(),
                s
            )));
        }
        let shape = ImageShape::new(s[2], s[3], s[1]);
        let mut ds = LabeledDataset::empty(shape, class_count);
        let (c, h, w) = (s[1], s[2], s[3]);
        let plane = shape.len();
        let mut img = vec![0.0f32; plane];
        for (b, &label) in labels.iter().enumerate() {
            if label >= class_count {
                return Err(Error::Invalid(format!("label {label} >= class_count {class_count}")));
            }
            let src = &batch.data()[b * plane..(b + 1) * plane];
            if c == 1 {
                img.copy_from_slice(src);
            } else {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            img[(y * w + x) * c + ch] = src[(ch * h + y) * w + x];
                        }
                    }
                }
            }
            ds.push(&img, label);
        }
        Ok(ds)
    }

    /// SHA-256 over shape, class count, labels and raw pixel bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in [
            self.shape.height,
            self.shape.width,
            self.shape.channels,
            self.class_count,
            self.len(),
        ] {
            h.update((v as u64).to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
        for &p in &self.pixels {
            h.update(p.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Mean image (H×W×C).
    pub fn mean_image(&self) -> Vec<f32> {
        let n = self.shape.len();
        let mut acc = vec![0.0f64; n];
        for (img, _) in self.iter() {
            for (a, &v) in acc.iter_mut().zip(img) {
                *a += v as f64;
            }
        }
        let k = self.len().max(1) as f64;
        acc.into_iter().map(|a| (a / k) as f32).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb_toy() -> LabeledDataset {
        let shape = ImageShape::new(2, 3, 3);
        let pixels: Vec<f32> = (0..2 * shape.len()).map(|i| i as f32 / 40.0).collect();
        LabeledDataset::from_parts(shape, 4, pixels, vec![1, 3]).unwrap()
    }

    #[test]
    fn nchw_round_trip_preserves_samples() {
        let ds = rgb_toy();
        let t = ds.all_nchw();
        assert_eq!(t.shape(), &[2, 3, 2, 3]);
        // channel 1 of pixel (0, 1) of image 0 lives at HWC offset (0*3+1)*3+1
        assert_eq!(t.data()[(1 * 2) * 3 + 1], ds.image(0)[4]);
        let back = LabeledDataset::from_nchw(&t, ds.labels(), 4).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rejects_out_of_range_labels_and_ragged_pixels() {
        let shape = ImageShape::new(1, 1, 1);
        assert!(LabeledDataset::from_parts(shape, 2, vec![0.0], vec![2]).is_err());
        assert!(LabeledDataset::from_parts(shape, 2, vec![0.0, 1.0], vec![0]).is_err());
    }

    #[test]
    fn subset_and_hash() {
        let ds = rgb_toy();
        let s = ds.subset(&[1, 1]);
        assert_eq!(s.labels(), &[3, 3]);
        assert_eq!(s.image(0), ds.image(1));
        assert_ne!(ds.content_hash(), s.content_hash());
        assert_eq!(ds.content_hash(), ds.clone().content_hash());
    }
}
