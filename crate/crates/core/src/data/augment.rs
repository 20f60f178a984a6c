use super::{FovMask, Image, Sample};

/// One of the eight symmetries of the square: `rotations` quarter turns
/// clockwise, then an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dihedral {
    pub rotations: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = {
        let mut all = [Dihedral {
            rotations: 0,
            flip: false,
        }; 8];
        let mut i = 0;
        while i < 8 {
            all[i] = Dihedral {
                rotations: (i % 4) as u8,
                flip: i >= 4,
            };
            i += 1;
        }
        all
    };

    /// Output dimensions for a `w×h` input.
    pub fn dims(self, w: usize, h: usize) -> (usize, usize) {
        if self.rotations % 2 == 1 {
            (h, w)
        } else {
            (w, h)
        }
    }

    /// Applies the transform to a row-major `w×h` plane.
    pub fn apply_plane<T: Copy>(self, src: &[T], w: usize, h: usize) -> Vec<T> {
        let mut cur = src.to_vec();
        let (mut cw, mut ch) = (w, h);
        for _ in 0..self.rotations % 4 {
            // Clockwise: out[y][x] = in[ch-1-x][y], output is ch wide.
            let mut out = Vec::with_capacity(cur.len());
            for y in 0..cw {
                for x in 0..ch {
                    out.push(cur[(ch - 1 - x) * cw + y]);
                }
            }
            cur = out;
            (cw, ch) = (ch, cw);
        }
        if self.flip {
            for row in cur.chunks_mut(cw) {
                row.reverse();
            }
        }
        cur
    }

    pub fn apply_image(self, img: &Image) -> Image {
        let (w, h) = (img.width(), img.height());
        let data = (0..img.channels())
            .flat_map(|c| self.apply_plane(img.plane(c), w, h))
            .collect();
        let (nw, nh) = self.dims(w, h);
        Image::new(nw, nh, img.channels(), data).expect("permutation keeps validity")
    }

    pub fn apply_mask(self, mask: &FovMask) -> FovMask {
        let (nw, nh) = self.dims(mask.width(), mask.height());
        let data = self.apply_plane(mask.data(), mask.width(), mask.height());
        FovMask::new(nw, nh, data).expect("permutation keeps validity")
    }

    pub fn apply(self, s: &Sample) -> Sample {
        Sample {
            image: self.apply_image(&s.image),
            gt: self.apply_image(&s.gt),
            mask: self.apply_mask(&s.mask),
        }
    }
}

/// The eight dihedral variants of a sample, identity first.
pub fn augment_dihedral(sample: &Sample) -> Vec<Sample> {
    Dihedral::ALL.iter().map(|t| t.apply(sample)).collect()
}
