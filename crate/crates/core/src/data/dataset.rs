//! Directory layout: flat `<name>_image.ppm`, `<name>_gt.pgm`,
//! `<name>_mask.pgm` triples, or one subdirectory per sample holding
//! `image.ppm`, `gt.pgm` and `mask.pgm`.

use std::path::{Path, PathBuf};

use super::{pnm, DataError, FovMask, Image, Result, Sample};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(names: Vec<String>, samples: Vec<Sample>) -> Self {
        assert_eq!(names.len(), samples.len());
        Self { names, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_triple(image: &Path, gt: &Path, mask: &Path) -> Result<Sample> {
    fn wrap(p: &Path) -> impl FnOnce(DataError) -> DataError + '_ {
        move |e| DataError::Invalid(format!("{}: {e}", p.display()))
    }
    Sample::new(
        pnm::load(image).map_err(wrap(image))?,
        pnm::load(gt).map_err(wrap(gt))?,
        pnm::load_mask(mask).map_err(wrap(mask))?,
    )
    .map_err(wrap(image))
}

/// Loads every sample under `dir`, sorted by name.
pub fn load_dir(dir: &Path) -> Result<Dataset> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io(dir)))
        .collect::<Result<_>>()?;
    entries.sort();

    let mut names = Vec::new();
    let mut samples = Vec::new();
    for path in &entries {
        let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if path.is_dir() {
            let image = path.join("image.ppm");
            if image.is_file() {
                samples.push(load_triple(&image, &path.join("gt.pgm"), &path.join("mask.pgm"))?);
                names.push(file_name.to_string());
            }
        } else if let Some(stem) = file_name.strip_suffix("_image.ppm") {
            samples.push(load_triple(
                path,
                &dir.join(format!("{stem}_gt.pgm")),
                &dir.join(format!("{stem}_mask.pgm")),
            )?);
            names.push(stem.to_string());
        }
    }
    if samples.is_empty() {
        return Err(DataError::Invalid(format!("no samples found in {}", dir.display())));
    }
    Ok(Dataset { names, samples })
}

/// Writes `sample_000_image.ppm` etc. and returns the paths written.
pub fn save_dir(dir: &Path, samples: &[Sample]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::with_capacity(3 * samples.len());
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("sample_{i:03}");
        for (suffix, img) in [
            ("image.ppm", s.image.clone()),
            ("gt.pgm", s.gt.clone()),
            ("mask.pgm", Image::from_mask(&s.mask)),
        ] {
            let path = dir.join(format!("{stem}_{suffix}"));
            pnm::save(&img, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Integer-factor mean-pool downsampling. Binary maps (gt and mask) are
/// re-binarized with a majority rule: a block is on when at least half of
/// its pixels are.
pub fn downsample_sample(s: &Sample, factor: usize) -> Result<Sample> {
    if factor == 0 || !s.width().is_multiple_of(factor) || !s.height().is_multiple_of(factor) {
        return Err(DataError::Invalid(format!(
            "cannot downsample {}x{} by {factor}",
            s.width(),
            s.height()
        )));
    }
    let (w, h) = (s.width() / factor, s.height() / factor);
    let pool = |plane: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for (i, o) in out.iter_mut().enumerate() {
            let (bx, by) = (i % w, i / w);
            let mut acc = 0.0;
            for y in by * factor..(by + 1) * factor {
                for x in bx * factor..(bx + 1) * factor {
                    acc += plane[y * s.width() + x];
                }
            }
            *o = acc / (factor * factor) as f64;
        }
        out
    };
    let majority = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|m| if m >= 0.5 { 1.0 } else { 0.0 }).collect() };

    let image: Vec<f64> = (0..3).flat_map(|c| pool(s.image.plane(c))).collect();
    let gt = majority(pool(s.gt.plane(0)));
    let mask = majority(pool(Image::from_mask(&s.mask).plane(0)));
    Sample::new(
        Image::new(w, h, 3, image)?,
        Image::new(w, h, 1, gt)?,
        FovMask::new(w, h, mask.iter().map(|&v| v == 1.0).collect())?,
    )
}
