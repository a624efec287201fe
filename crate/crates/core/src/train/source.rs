use crate::augment::{apply_pipeline, preprocess, DegradationSpec, ImageBuffer, Normalization};
use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Random-access labelled images.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> usize;
    fn image(&self, i: usize) -> Result<ImageBuffer>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct MemorySource {
    images: Vec<ImageBuffer>,
    labels: Vec<usize>,
}

impl MemorySource {
    pub fn new(images: Vec<ImageBuffer>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Domain(format!("{} images vs {} labels", images.len(), labels.len())));
        }
        Ok(Self { images, labels })
    }
}

impl ImageSource for MemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn image(&self, i: usize) -> Result<ImageBuffer> {
        Ok(self.images[i].clone())
    }
}

/// Images decoded from disk on demand.
pub struct DiskSource {
    pub index: DatasetIndex,
}

impl ImageSource for DiskSource {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn label(&self, i: usize) -> usize {
        self.index.entries[i].label
    }

    fn image(&self, i: usize) -> Result<ImageBuffer> {
        ImageBuffer::load(&self.index.abs_path(i))
    }
}

/// View of selected positions of another source.
pub struct Subset<'a> {
    inner: &'a dyn ImageSource,
    ids: Vec<usize>,
}

impl<'a> Subset<'a> {
    pub fn new(inner: &'a dyn ImageSource, ids: Vec<usize>) -> Self {
        Self { inner, ids }
    }
}

impl ImageSource for Subset<'_> {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn label(&self, i: usize) -> usize {
        self.inner.label(self.ids[i])
    }

    fn image(&self, i: usize) -> Result<ImageBuffer> {
        self.inner.image(self.ids[i])
    }
}

/// Fixed degraded copy of another source: item `i` always receives the
/// pipeline draw for sample id `i` under `seed`.
pub struct Degraded<'a> {
    inner: &'a dyn ImageSource,
    spec: DegradationSpec,
    seed: u64,
}

impl<'a> Degraded<'a> {
    pub fn new(inner: &'a dyn ImageSource, spec: DegradationSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self { inner, spec, seed })
    }
}

impl ImageSource for Degraded<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn label(&self, i: usize) -> usize {
        self.inner.label(i)
    }

    fn image(&self, i: usize) -> Result<ImageBuffer> {
        Ok(apply_pipeline(&self.inner.image(i)?, &self.spec, self.seed, i as u64)?.image)
    }
}

pub struct Batch {
    /// `[B, 3, hw, hw]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Samples that went through the degradation pipeline.
    pub augmented: usize,
}

/// Loads, optionally degrades and preprocesses `ids`. With augmentation
/// `(spec, seed, first_draw)`, sample `j` of the batch uses substream
/// `first_draw + j`, so results do not depend on thread count.
pub fn load_batch(
    source: &dyn ImageSource,
    ids: &[usize],
    augmentation: Option<(&DegradationSpec, u64, u64)>,
    input_hw: usize,
    norm: &Normalization,
) -> Result<Batch> {
    let tensors: Vec<Tensor<f32>> = ids
        .par_iter()
        .enumerate()
        .map(|(j, &i)| {
            let img = source.image(i)?;
            let img = match augmentation {
                Some((spec, seed, first)) => apply_pipeline(&img, spec, seed, first + j as u64)?.image,
                None => img,
            };
            preprocess(&img, input_hw, norm)
        })
        .collect::<Result<_>>()?;
    Ok(Batch {
        images: Tensor::stack(&tensors)?,
        labels: ids.iter().map(|&i| source.label(i)).collect(),
        augmented: if augmentation.is_some() { ids.len() } else { 0 },
    })
}
