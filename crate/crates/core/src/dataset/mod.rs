//! Labeled image datasets: in-memory container, named splits, synthetic
//! generation, and the "MXDS" binary format.

mod io;
mod synthetic;

pub use io::{import_csv, load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use synthetic::{gen_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Borrowed view of aligned samples and labels, the unit most consumers take.
#[derive(Debug, Clone, Copy)]
pub struct SampleSet<'a> {
    samples: &'a [Tensor],
    labels: &'a [usize],
}

impl<'a> SampleSet<'a> {
    pub fn new(samples: &'a [Tensor], labels: &'a [usize]) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "sample set",
                expected: vec![samples.len()],
                found: vec![labels.len()],
            });
        }
        Ok(SampleSet { samples, labels })
    }

    pub fn samples(&self) -> &'a [Tensor] {
        self.samples
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a Tensor, usize)> + '_ {
        self.samples.iter().zip(self.labels.iter().copied())
    }
}

/// Contiguous index ranges dividing a dataset into train/holdout/test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: std::ops::Range<usize>,
    pub holdout: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

impl Splits {
    /// Standard front-to-back split by fractions; the remainder is the test
    /// split. Ranges are disjoint by construction.
    pub fn contiguous(n: usize, train_fraction: f64, holdout_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_fraction)
            || !(0.0..=1.0).contains(&holdout_fraction)
            || train_fraction + holdout_fraction > 1.0
        {
            return Err(Error::InvalidDataset(format!(
                "bad split fractions: train {train_fraction}, holdout {holdout_fraction}"
            )));
        }
        let n_train = (n as f64 * train_fraction).floor() as usize;
        let n_holdout = (n as f64 * holdout_fraction).floor() as usize;
        Ok(Splits {
            train: 0..n_train,
            holdout: n_train..n_train + n_holdout,
            test: n_train + n_holdout..n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Holdout,
    Test,
}

/// An in-memory dataset: samples with values in `[0, 1]`, labels in
/// `0..num_classes`, and named splits over a canonical sample order.
#[derive(Debug, Clone)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    num_classes: usize,
    samples: Vec<Tensor>,
    labels: Vec<usize>,
    splits: Splits,
}

impl Dataset {
    pub fn new(
        sample_shape: Vec<usize>,
        num_classes: usize,
        samples: Vec<Tensor>,
        labels: Vec<usize>,
        splits: Splits,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidDataset("need at least two classes".into()));
        }
        if samples.len() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} samples vs {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if splits.test.end != samples.len()
            || splits.train.end != splits.holdout.start
            || splits.holdout.end != splits.test.start
        {
            return Err(Error::InvalidDataset("splits must tile the sample range".into()));
        }
        for t in &samples {
            if t.shape() != sample_shape.as_slice() {
                return Err(Error::InvalidDataset(format!(
                    "sample shape {:?} differs from dataset shape {:?}",
                    t.shape(),
                    sample_shape
                )));
            }
            if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidDataset("sample values outside [0, 1]".into()));
            }
        }
        for &y in &labels {
            if y >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    num_classes,
                });
            }
        }
        Ok(Dataset {
            sample_shape,
            num_classes,
            samples,
            labels,
            splits,
        })
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    /// Replaces the split boundaries (e.g. after loading from disk, where
    /// boundaries are supplied by configuration rather than the file).
    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        if splits.test.end != self.samples.len() {
            return Err(Error::InvalidDataset("splits do not cover the dataset".into()));
        }
        self.splits = splits;
        Ok(self)
    }

    pub fn split(&self, which: Split) -> SampleSet<'_> {
        let range = match which {
            Split::Train => self.splits.train.clone(),
            Split::Holdout => self.splits.holdout.clone(),
            Split::Test => self.splits.test.clone(),
        };
        SampleSet {
            samples: &self.samples[range.clone()],
            labels: &self.labels[range],
        }
    }

    /// All samples with a given label inside one split.
    pub fn class_members(&self, which: Split, class: usize) -> (Vec<Tensor>, Vec<usize>) {
        let set = self.split(which);
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for (x, y) in set.iter() {
            if y == class {
                samples.push(x.clone());
                labels.push(y);
            }
        }
        (samples, labels)
    }
}
