//! Image classification datasets: the in-memory [`Dataset`], the synthetic
//! pathology generator, the `PCRD` file format and training-time augmentation.

mod augment;
mod pcrd;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use augment::{augment, crop_padded, hflip, Augment, DEFAULT_CROP_PAD};
pub use pcrd::{decode_dataset, encode_dataset, load_binary_dataset, save_binary_dataset};
pub use synthetic::{generate_synthetic, Region, Splits, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split `{other}` (train|val|test)"))),
        }
    }
}

/// Single-channel labelled images `[N,1,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f64>,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f64>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Shape(format!("images must be [N,1,H,W], got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::Domain(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn images(&self) -> &Tensor<f64> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let s = self.height() * self.width();
        &self.images.data()[i * s..(i + 1) * s]
    }

    /// Per-class sample counts.
    pub fn counts(&self) -> Vec<u64> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Gathers the listed samples into an `[B,1,H,W]` batch and its labels.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let s = self.height() * self.width();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::of(v)));
        }
        let shape = [indices.len(), 1, self.height(), self.width()];
        let images = Tensor::new(&shape, data).expect("batch of existing samples");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Mean over every pixel of the single channel, refined by a second pass
    /// over the residuals.
    pub fn channel_mean(&self) -> Vec<f64> {
        let d = self.images.data();
        let n = d.len() as f64;
        let rough = d.iter().sum::<f64>() / n;
        vec![rough + d.iter().map(|v| v - rough).sum::<f64>() / n]
    }

    /// Copy with `mean[c]` subtracted from channel `c`.
    pub fn normalized(&self, mean: &[f64]) -> Result<Self> {
        if mean.len() != 1 {
            return Err(Error::Shape(format!("1 channel but {} means", mean.len())));
        }
        let m = mean[0];
        Ok(Dataset {
            images: self.images.map(|v| v - m),
            ..self.clone()
        })
    }

    /// Copy whose labels are a seeded permutation of the originals, breaking
    /// the image-label association while keeping the class counts.
    pub fn shuffle_labels(&self, seed: u64) -> Self {
        let mut labels = self.labels.clone();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Dataset {
            labels,
            ..self.clone()
        }
    }
}

/// Centers every split on the training split's channel mean.
pub fn normalize(splits: &Splits) -> Result<(Splits, Vec<f64>)> {
    let mean = splits.train.channel_mean();
    Ok((
        Splits {
            train: splits.train.normalized(&mean)?,
            val: splits.val.normalized(&mean)?,
            test: splits.test.normalized(&mean)?,
        },
        mean,
    ))
}
