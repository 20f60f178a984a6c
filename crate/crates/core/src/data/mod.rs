//! Images, masks and the sample pipeline: PNM I/O, dihedral augmentation,
//! padding to the network's size grid, and a procedural vessel generator.

mod augment;
mod dataset;
mod pad;
pub mod pnm;
mod synth;

pub use augment::{augment_dihedral, Dihedral};
pub use dataset::{downsample_sample, load_dir, save_dir, Dataset};
pub use pad::{pad_sample, padded_size, PadRecord};
pub use synth::{synth_generate, SynthSpec};

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("pnm parse error at byte {offset}: {reason}")]
    Pnm { offset: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Planar image with 1 or 3 channels and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(DataError::Invalid(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(DataError::Invalid(format!("{channels} channels, expected 1 or 3")));
        }
        if data.len() != width * height * channels {
            return Err(DataError::Invalid(format!(
                "buffer of {} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    /// Whether every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// `1×C×H×W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone()).expect("validated dims")
    }

    /// Inverse of [`Image::to_tensor`] for sample `n` of a batch; values are
    /// clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let [batch, c, h, w] = t
            .dims4("image")
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        if n >= batch {
            return Err(DataError::Invalid(format!("sample {n} of a batch of {batch}")));
        }
        let len = c * h * w;
        let data = t.data()[n * len..(n + 1) * len]
            .iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Self::new(w, h, c, data)
    }

    /// Grayscale image that is 1 inside the mask.
    pub fn from_mask(mask: &FovMask) -> Self {
        let data = mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Self::new(mask.width, mask.height, 1, data).expect("mask dims are valid")
    }

    /// Reinterprets a binary grayscale image as a mask (1 = inside).
    pub fn to_mask(&self) -> Result<FovMask> {
        if self.channels != 1 || !self.is_binary() {
            return Err(DataError::Invalid("mask images must be single-channel and binary".into()));
        }
        FovMask::new(self.width, self.height, self.data.iter().map(|&v| v == 1.0).collect())
    }
}

/// Field-of-view mask; `true` marks pixels that count in metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct FovMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl FovMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height || data.is_empty() {
            return Err(DataError::Invalid(format!(
                "mask buffer of {} for {width}x{height}",
                data.len()
            )));
        }
        if !data.iter().any(|&b| b) {
            return Err(DataError::Invalid("mask has no pixel inside the field of view".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn full(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![true; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// One aligned (fundus, ground truth, mask) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub gt: Image,
    pub mask: FovMask,
}

impl Sample {
    /// Checks alignment: RGB image, binary single-channel gt, matching dims.
    pub fn new(image: Image, gt: Image, mask: FovMask) -> Result<Self> {
        let dims = (image.width, image.height);
        if image.channels != 3 {
            return Err(DataError::Invalid("fundus images must be RGB".into()));
        }
        if gt.channels != 1 || !gt.is_binary() {
            return Err(DataError::Invalid("ground truth must be a binary grayscale map".into()));
        }
        if (gt.width, gt.height) != dims || (mask.width, mask.height) != dims {
            return Err(DataError::Invalid(format!(
                "misaligned sample: image {}x{}, gt {}x{}, mask {}x{}",
                image.width, image.height, gt.width, gt.height, mask.width, mask.height
            )));
        }
        Ok(Self { image, gt, mask })
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}
