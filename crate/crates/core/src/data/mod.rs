//! Samples, batches and the datasets they come from.

pub mod augment;
pub mod disk;
pub mod scene;
pub mod splits;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::IGNORE;
use crate::numerics::{NdArray, Scalar};

pub use augment::{augment, AugmentConfig};
pub use scene::{generate_scene, SceneSpec};
pub use splits::{make_splits, DatasetSplit};

/// One RGB-D image: `rgb` is `[3, H, W]`, `depth` is `[1, H, W]`, both in
/// `[0, 1]`; `label` is `[H, W]` with 255 marking ignored pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub label: Option<Vec<u8>>,
}

impl Sample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let px = self.height * self.width;
        if px == 0 || self.rgb.len() != 3 * px || self.depth.len() != px {
            return Err(Error::Dataset(format!(
                "sample maps disagree with size {}x{}",
                self.height, self.width
            )));
        }
        if let Some(l) = &self.label {
            if l.len() != px {
                return Err(Error::Dataset("label map size differs from image size".into()));
            }
            if let Some(&bad) = l.iter().find(|&&v| v != IGNORE && v as usize >= num_classes) {
                return Err(Error::LabelOutOfRange {
                    label: bad as usize,
                    classes: num_classes,
                });
            }
        }
        Ok(())
    }
}

/// Samples of equal size stacked along a leading batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    /// Ignore-filled for samples without labels.
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn stack(samples: &[Sample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack an empty batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut b = Batch {
            size: samples.len(),
            height: h,
            width: w,
            rgb: Vec::with_capacity(samples.len() * 3 * h * w),
            depth: Vec::with_capacity(samples.len() * h * w),
            labels: Vec::with_capacity(samples.len() * h * w),
        };
        for s in samples {
            if (s.height, s.width) != (h, w) {
                return Err(Error::shape("batch", "samples differ in size"));
            }
            b.rgb.extend_from_slice(&s.rgb);
            b.depth.extend_from_slice(&s.depth);
            match &s.label {
                Some(l) => b.labels.extend_from_slice(l),
                None => b.labels.extend(std::iter::repeat(IGNORE).take(h * w)),
            }
        }
        Ok(b)
    }

    pub fn rgb_array<T: Scalar>(&self) -> NdArray<T> {
        let data = self.rgb.iter().map(|&v| T::from_f64(v as f64)).collect();
        NdArray::from_vec([self.size, 3, self.height, self.width], data).expect("batch shape")
    }

    pub fn depth_array<T: Scalar>(&self) -> NdArray<T> {
        let data = self.depth.iter().map(|&v| T::from_f64(v as f64)).collect();
        NdArray::from_vec([self.size, 1, self.height, self.width], data).expect("batch shape")
    }

    /// Concatenate two batches of equal spatial size.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape("batch", "batches differ in size"));
        }
        let join = |a: &[f32], b: &[f32]| [a, b].concat();
        Ok(Batch {
            size: self.size + other.size,
            height: self.height,
            width: self.width,
            rgb: join(&self.rgb, &other.rgb),
            depth: join(&self.depth, &other.depth),
            labels: [self.labels.as_slice(), other.labels.as_slice()].concat(),
        })
    }
}

/// Where the benchmark data comes from and how it is split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub labeled_fraction: f64,
    /// Load a dataset written in the on-disk layout instead of generating one.
    pub root: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            train_size: 600,
            val_size: 64,
            test_size: 128,
            labeled_fraction: 0.1,
            root: None,
        }
    }
}

enum Source {
    Memory(Vec<Sample>),
    Disk(disk::DiskSource),
}

pub struct Dataset {
    source: Source,
    pub split: DatasetSplit,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

impl Dataset {
    /// Generate the synthetic benchmark. Unlabeled training samples carry no
    /// label map.
    pub fn synthetic(spec: &SceneSpec, cfg: &DataConfig) -> Result<Self> {
        spec.validate()?;
        let split = make_splits(cfg.train_size, cfg.labeled_fraction, cfg.val_size, cfg.test_size, cfg.seed)?;
        let total = cfg.train_size + cfg.val_size + cfg.test_size;
        let mut samples: Vec<Sample> = (0..total as u64).map(|i| generate_scene(spec, cfg.seed, i)).collect();
        for &i in &split.unlabeled {
            samples[i].label = None;
        }
        Ok(Dataset {
            source: Source::Memory(samples),
            split,
            num_classes: spec.num_classes,
            class_names: spec.class_names(),
        })
    }

    pub fn from_samples(samples: Vec<Sample>, split: DatasetSplit, num_classes: usize) -> Result<Self> {
        for s in &samples {
            s.validate(num_classes)?;
        }
        Ok(Dataset {
            source: Source::Memory(samples),
            split,
            num_classes,
            class_names: (0..num_classes).map(|c| format!("class{c}")).collect(),
        })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let (source, split, meta) = disk::DiskSource::open(root)?;
        Ok(Dataset {
            source: Source::Disk(source),
            split,
            num_classes: meta.num_classes,
            class_names: meta.class_names,
        })
    }

    pub fn len(&self) -> usize {
        match &self.source {
            Source::Memory(v) => v.len(),
            Source::Disk(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> Result<Sample> {
        let s = match &self.source {
            Source::Memory(v) => v
                .get(index)
                .cloned()
                .ok_or_else(|| Error::Dataset(format!("no sample {index}")))?,
            Source::Disk(d) => d.load(index)?,
        };
        s.validate(self.num_classes)?;
        Ok(s)
    }

    /// Replace a sample in an in-memory dataset.
    pub fn set(&mut self, index: usize, sample: Sample) -> Result<()> {
        sample.validate(self.num_classes)?;
        match &mut self.source {
            Source::Memory(v) if index < v.len() => {
                v[index] = sample;
                Ok(())
            }
            _ => Err(Error::Dataset(format!("cannot replace sample {index}"))),
        }
    }

    /// Ready to train on: at least one labeled sample and non-empty val/test.
    pub fn check_trainable(&self) -> Result<()> {
        if self.split.labeled.is_empty() {
            return Err(Error::Dataset("dataset has no labeled training samples".into()));
        }
        if self.split.val.is_empty() {
            return Err(Error::Dataset("dataset has no validation samples".into()));
        }
        Ok(())
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        disk::write_dataset(self, root)
    }
}
