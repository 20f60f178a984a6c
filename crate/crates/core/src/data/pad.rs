use super::{DataError, FovMask, Image, Result, Sample};
use crate::model::SPATIAL_DIVISOR;

/// Where the original content sits inside a padded sample. Padding is
/// anchored top-left, so the offsets are always zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadRecord {
    pub width: usize,
    pub height: usize,
    pub padded_width: usize,
    pub padded_height: usize,
}

/// Smallest dims `≥ (w, h)` that are multiples of the network divisor.
pub fn padded_size(w: usize, h: usize) -> (usize, usize) {
    let up = |v: usize| v.div_ceil(SPATIAL_DIVISOR) * SPATIAL_DIVISOR;
    (up(w), up(h))
}

impl PadRecord {
    pub fn new(width: usize, height: usize, padded_width: usize, padded_height: usize) -> Result<Self> {
        if padded_width < width || padded_height < height {
            return Err(DataError::Invalid(format!(
                "pad target {padded_width}x{padded_height} is smaller than {width}x{height}"
            )));
        }
        if !padded_width.is_multiple_of(SPATIAL_DIVISOR) || !padded_height.is_multiple_of(SPATIAL_DIVISOR) {
            return Err(DataError::Invalid(format!(
                "pad target {padded_width}x{padded_height} is not a multiple of {SPATIAL_DIVISOR}"
            )));
        }
        Ok(Self {
            width,
            height,
            padded_width,
            padded_height,
        })
    }

    fn pad_plane<T: Copy>(&self, src: &[T], fill: T) -> Vec<T> {
        let mut out = vec![fill; self.padded_width * self.padded_height];
        for (y, row) in src.chunks(self.width).enumerate() {
            let start = y * self.padded_width;
            out[start..start + self.width].copy_from_slice(row);
        }
        out
    }

    fn unpad_plane<T: Copy>(&self, src: &[T]) -> Vec<T> {
        src.chunks(self.padded_width)
            .take(self.height)
            .flat_map(|row| row[..self.width].iter().copied())
            .collect()
    }

    fn check(&self, w: usize, h: usize, expect_padded: bool) -> Result<()> {
        let want = if expect_padded {
            (self.padded_width, self.padded_height)
        } else {
            (self.width, self.height)
        };
        if (w, h) != want {
            return Err(DataError::Invalid(format!(
                "expected a {}x{} image, got {w}x{h}",
                want.0, want.1
            )));
        }
        Ok(())
    }

    pub fn pad_image(&self, img: &Image) -> Result<Image> {
        self.check(img.width(), img.height(), false)?;
        let data = (0..img.channels())
            .flat_map(|c| self.pad_plane(img.plane(c), 0.0))
            .collect();
        Image::new(self.padded_width, self.padded_height, img.channels(), data)
    }

    pub fn unpad_image(&self, img: &Image) -> Result<Image> {
        self.check(img.width(), img.height(), true)?;
        let data = (0..img.channels())
            .flat_map(|c| self.unpad_plane(img.plane(c)))
            .collect();
        Image::new(self.width, self.height, img.channels(), data)
    }

    pub fn pad_mask(&self, mask: &FovMask) -> Result<FovMask> {
        self.check(mask.width(), mask.height(), false)?;
        FovMask::new(self.padded_width, self.padded_height, self.pad_plane(mask.data(), false))
    }

    pub fn unpad_mask(&self, mask: &FovMask) -> Result<FovMask> {
        self.check(mask.width(), mask.height(), true)?;
        FovMask::new(self.width, self.height, self.unpad_plane(mask.data()))
    }

    /// Crops a `padded_height × padded_width` row-major plane.
    pub fn unpad_values(&self, plane: &[f64]) -> Vec<f64> {
        self.unpad_plane(plane)
    }
}

/// Zero-pads image and gt on the right and bottom; padded mask pixels are
/// outside the field of view.
pub fn pad_sample(sample: &Sample, target_w: usize, target_h: usize) -> Result<(Sample, PadRecord)> {
    let rec = PadRecord::new(sample.width(), sample.height(), target_w, target_h)?;
    let padded = Sample {
        image: rec.pad_image(&sample.image)?,
        gt: rec.pad_image(&sample.gt)?,
        mask: rec.pad_mask(&sample.mask)?,
    };
    Ok((padded, rec))
}
