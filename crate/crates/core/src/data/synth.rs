//! Procedural fundus-like images with an exact vessel stencil.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, FovMask, Image, Result, Sample};
use crate::model::SPATIAL_DIVISOR;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub branch_count: usize,
    /// Vessel diameter in pixels at the thin end.
    pub thickness_min: f64,
    /// Upper bound of the diameter at the thick end.
    pub thickness_max: f64,
    /// Added to the background on vessel pixels (negative = darker).
    pub contrast: f64,
    pub noise_sigma: f64,
    pub blur_radius: usize,
    pub background: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 64,
            height: 64,
            branch_count: 6,
            thickness_min: 1.0,
            thickness_max: 3.5,
            contrast: -0.3,
            noise_sigma: 0.03,
            blur_radius: 1,
            background: [0.8, 0.5, 0.3],
        }
    }
}

impl SynthSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.width == 0 || self.height == 0 {
            problems.push(format!("size {}x{} is empty", self.width, self.height));
        }
        if !self.width.is_multiple_of(SPATIAL_DIVISOR) || !self.height.is_multiple_of(SPATIAL_DIVISOR) {
            problems.push(format!(
                "size {}x{} is not a multiple of {SPATIAL_DIVISOR}",
                self.width, self.height
            ));
        }
        if !(self.thickness_min >= 1.0 && self.thickness_max >= self.thickness_min) {
            problems.push(format!(
                "thickness range [{}, {}] must satisfy 1 <= min <= max",
                self.thickness_min, self.thickness_max
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            problems.push(format!("noise sigma {} must be finite and nonnegative", self.noise_sigma));
        }
        if !self.background.iter().all(|b| (0.0..=1.0).contains(b)) {
            problems.push("background must lie in [0, 1]".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DataError::Invalid(problems.join("; ")))
        }
    }
}

#[derive(Clone, Copy)]
struct Curve {
    p0: (f64, f64),
    p1: (f64, f64),
    p2: (f64, f64),
    t0: f64,
    t1: f64,
}

impl Curve {
    fn at(&self, t: f64) -> (f64, f64) {
        let u = 1.0 - t;
        (
            u * u * self.p0.0 + 2.0 * u * t * self.p1.0 + t * t * self.p2.0,
            u * u * self.p0.1 + 2.0 * u * t * self.p1.1 + t * t * self.p2.1,
        )
    }

    fn thickness(&self, t: f64) -> f64 {
        self.t0 + (self.t1 - self.t0) * t
    }
}

/// Generates one (RGB image, binary gt, disc mask) triple, fully determined
/// by `spec`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Sample> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let radius = w.min(h) as f64 / 2.0;
    let inside = |x: f64, y: f64| (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius;
    let mask: Vec<bool> = (0..w * h).map(|i| inside((i % w) as f64, (i / w) as f64)).collect();

    let point_in_disc = |rng: &mut ChaCha8Rng, scale: f64| loop {
        let x = cx + rng.random_range(-1.0..1.0) * radius * scale;
        let y = cy + rng.random_range(-1.0..1.0) * radius * scale;
        if inside(x, y) {
            break (x, y);
        }
    };

    let mut curves: Vec<Curve> = Vec::with_capacity(spec.branch_count);
    for i in 0..spec.branch_count {
        // Later branches sprout from a random point of an earlier one.
        let (p0, t0) = if i == 0 {
            (point_in_disc(&mut rng, 0.9), spec.thickness_max)
        } else {
            let parent = curves[rng.random_range(0..curves.len())];
            let t = rng.random_range(0.1..0.9);
            let tp = parent.thickness(t);
            (parent.at(t), rng.random_range(spec.thickness_min..=tp.max(spec.thickness_min)))
        };
        let p2 = point_in_disc(&mut rng, 0.95);
        let p1 = point_in_disc(&mut rng, 0.8);
        curves.push(Curve {
            p0,
            p1,
            p2,
            t0,
            t1: spec.thickness_min,
        });
    }

    let mut stencil = vec![false; w * h];
    for c in &curves {
        let chord = ((c.p0.0 - c.p1.0).hypot(c.p0.1 - c.p1.1)) + ((c.p1.0 - c.p2.0).hypot(c.p1.1 - c.p2.1));
        let steps = (chord * 4.0).ceil() as usize + 1;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let (px, py) = c.at(t);
            let r = (c.thickness(t) / 2.0).max(0.5);
            let x_lo = (px - r).floor().max(0.0) as usize;
            let y_lo = (py - r).floor().max(0.0) as usize;
            let x_hi = ((px + r).ceil() as usize).min(w - 1);
            let y_hi = ((py + r).ceil() as usize).min(h - 1);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    if (x as f64 - px).powi(2) + (y as f64 - py).powi(2) <= r * r {
                        stencil[y * w + x] = true;
                    }
                }
            }
        }
    }

    let gt: Vec<f64> = stencil
        .iter()
        .zip(&mask)
        .map(|(&s, &m)| if s && m { 1.0 } else { 0.0 })
        .collect();

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| DataError::Invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(3 * w * h);
    for bg in spec.background {
        let plane: Vec<f64> = stencil
            .iter()
            .map(|&s| if s { bg + spec.contrast } else { bg })
            .collect();
        let plane = box_blur(&plane, w, h, spec.blur_radius);
        for (i, v) in plane.into_iter().enumerate() {
            let n: f64 = noise.sample(&mut rng);
            data.push(if mask[i] { (v + n).clamp(0.0, 1.0) } else { 0.0 });
        }
    }

    Sample::new(
        Image::new(w, h, 3, data)?,
        Image::new(w, h, 1, gt)?,
        FovMask::new(w, h, mask)?,
    )
}

/// Separable box blur; windows are truncated at the border.
fn box_blur(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return src.to_vec();
    }
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if horizontal { (x, w) } else { (y, h) };
                let lo = pos.saturating_sub(r);
                let hi = (pos + r).min(len - 1);
                let mut acc = 0.0;
                for q in lo..=hi {
                    acc += if horizontal { src[y * w + q] } else { src[q * w + x] };
                }
                out[y * w + x] = acc / (hi - lo + 1) as f64;
            }
        }
        out
    };
    let tmp = pass(src, true);
    pass(&tmp, false)
}
