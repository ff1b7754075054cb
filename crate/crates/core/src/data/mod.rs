//! Datasets, synthetic generation, manifest ingestion and the three-stream
//! batch sampler.

mod manifest;
mod sampler;
mod synthetic;

pub use manifest::{
    load_manifest, load_labeled_manifest, load_triplet_manifest, load_unlabeled_manifest,
    write_labeled_manifest, write_triplet_manifest, write_unlabeled_manifest, Dataset,
    ManifestKind,
};
pub use sampler::{BatchSizes, Draw, StreamSampler, StreamState, SamplerState};
pub use synthetic::{
    gen_synthetic_labeled, gen_synthetic_triplets, Rendering, SyntheticWorld, PROTOTYPE_SEED,
};

pub use crate::losses::SimilarPair;

use crate::error::{FeverError, Result};
use crate::ndgrad::Array;

pub const NUM_CLASSES: usize = 8;

/// `(channels, height, width)`.
pub type ImageShape = [usize; 3];

fn image_len(shape: &ImageShape) -> usize {
    shape.iter().product()
}

/// Images with class labels in `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub image_shape: ImageShape,
    pub num_classes: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

/// Image triplets, each annotated with its most similar pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletDataset {
    pub image_shape: ImageShape,
    /// Three consecutive images per triplet.
    pub pixels: Vec<f32>,
    pub pairs: Vec<SimilarPair>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledDataset {
    pub image_shape: ImageShape,
    pub pixels: Vec<f32>,
}

impl LabeledDataset {
    pub fn new(image_shape: ImageShape, num_classes: usize, pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if pixels.len() != labels.len() * image_len(&image_shape) {
            return Err(FeverError::Data(format!(
                "{} pixels do not match {} images of shape {:?}",
                pixels.len(),
                labels.len(),
                image_shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(FeverError::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledDataset {
            image_shape,
            num_classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let w = image_len(&self.image_shape);
        &self.pixels[i * w..(i + 1) * w]
    }

    /// `[n, c, h, w]` batch of the selected images.
    pub fn images(&self, idx: &[usize]) -> Array<f32> {
        gather_images(&self.pixels, &self.image_shape, idx)
    }

    pub fn all_images(&self) -> Array<f32> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.images(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Keeps only samples whose label is in `classes`, relabelled to `0..classes.len()`.
    pub fn filter_classes(&self, classes: &[usize]) -> Result<Self> {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..self.len() {
            if let Some(pos) = classes.iter().position(|&c| c == self.labels[i]) {
                pixels.extend_from_slice(self.image(i));
                labels.push(pos);
            }
        }
        LabeledDataset::new(self.image_shape, classes.len(), pixels, labels)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(idx.len() * image_len(&self.image_shape));
        for &i in idx {
            pixels.extend_from_slice(self.image(i));
        }
        LabeledDataset {
            image_shape: self.image_shape,
            num_classes: self.num_classes,
            pixels,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

impl TripletDataset {
    pub fn new(image_shape: ImageShape, pixels: Vec<f32>, pairs: Vec<SimilarPair>) -> Result<Self> {
        if pixels.len() != 3 * pairs.len() * image_len(&image_shape) {
            return Err(FeverError::Data(format!(
                "{} pixels do not match {} triplets of shape {:?}",
                pixels.len(),
                pairs.len(),
                image_shape
            )));
        }
        Ok(TripletDataset {
            image_shape,
            pixels,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Image `k` (0..3) of triplet `t`.
    pub fn image(&self, t: usize, k: usize) -> &[f32] {
        let w = image_len(&self.image_shape);
        let i = 3 * t + k;
        &self.pixels[i * w..(i + 1) * w]
    }

    /// `[3n, c, h, w]` batch, three consecutive rows per selected triplet.
    pub fn images(&self, idx: &[usize]) -> Array<f32> {
        let rows: Vec<usize> = idx.iter().flat_map(|&t| [3 * t, 3 * t + 1, 3 * t + 2]).collect();
        gather_images(&self.pixels, &self.image_shape, &rows)
    }

    pub fn all_images(&self) -> Array<f32> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.images(&idx)
    }
}

impl UnlabeledDataset {
    pub fn new(image_shape: ImageShape, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() % image_len(&image_shape) != 0 {
            return Err(FeverError::Data("pixel buffer is not a whole number of images".into()));
        }
        Ok(UnlabeledDataset { image_shape, pixels })
    }

    pub fn empty(image_shape: ImageShape) -> Self {
        UnlabeledDataset {
            image_shape,
            pixels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / image_len(&self.image_shape)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let w = image_len(&self.image_shape);
        &self.pixels[i * w..(i + 1) * w]
    }

    pub fn images(&self, idx: &[usize]) -> Array<f32> {
        gather_images(&self.pixels, &self.image_shape, idx)
    }

    pub fn all_images(&self) -> Array<f32> {
        let [c, h, w] = self.image_shape;
        Array::new(&[self.len(), c, h, w], self.pixels.clone()).expect("validated image buffer")
    }
}

fn gather_images(pixels: &[f32], shape: &ImageShape, idx: &[usize]) -> Array<f32> {
    let w = image_len(shape);
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(&pixels[i * w..(i + 1) * w]);
    }
    Array::new(&[idx.len(), shape[0], shape[1], shape[2]], data).expect("image batch shape")
}

#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub images: Array<f32>,
    pub pairs: Vec<SimilarPair>,
}

#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub images: Array<f32>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct UnlabeledBatch {
    pub images: Array<f32>,
}

/// The data a training run draws from.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub triplets: TripletDataset,
    pub labeled: LabeledDataset,
    pub unlabeled: UnlabeledDataset,
}

impl TrainingData {
    pub fn image_shape(&self) -> ImageShape {
        self.triplets.image_shape
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.triplets.image_shape;
        if self.labeled.image_shape != s || (!self.unlabeled.is_empty() && self.unlabeled.image_shape != s) {
            return Err(FeverError::Data(format!(
                "image shapes differ across streams: triplets {:?}, labeled {:?}, unlabeled {:?}",
                s, self.labeled.image_shape, self.unlabeled.image_shape
            )));
        }
        if self.triplets.is_empty() || self.labeled.is_empty() {
            return Err(FeverError::Data("triplet and labeled streams must be non-empty".into()));
        }
        Ok(())
    }
}
