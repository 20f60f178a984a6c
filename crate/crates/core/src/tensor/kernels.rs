//! Raw NCHW kernels. No shape validation here; the tape ops check first.

use matrixmultiply::dgemm;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Output pixels per image.
    fn p(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds every receptive field into a column: `K × (N·P)`, batch-major columns.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo, p) = (g.out_h(), g.out_w(), g.p());
    let np = g.n * p;
    let mut col = vec![0.0; g.k() * np];
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut col[row * np..(row + 1) * np];
                for b in 0..g.n {
                    let src = &x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[b * p..(b + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an NCHW buffer.
fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo, p) = (g.out_h(), g.out_w(), g.p());
    let np = g.n * p;
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &col[row * np..(row + 1) * np];
                for b in 0..g.n {
                    let dst = &mut dx[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[b * p..(b + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let np = g.n * p;
    let col = im2col(x, g);
    let mut out_mat = vec![0.0; g.cout * np];
    // SAFETY: all slices are sized for the row-major strides passed in.
    unsafe {
        dgemm(
            g.cout,
            k,
            np,
            1.0,
            w.as_ptr(),
            k as isize,
            1,
            col.as_ptr(),
            np as isize,
            1,
            0.0,
            out_mat.as_mut_ptr(),
            np as isize,
            1,
        );
    }
    let mut y = vec![0.0; g.n * g.cout * p];
    for bi in 0..g.n {
        for o in 0..g.cout {
            let src = &out_mat[o * np + bi * p..][..p];
            let dst = &mut y[(bi * g.cout + o) * p..][..p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b[o];
            }
        }
    }
    y
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads {
    let (k, p) = (g.k(), g.p());
    let np = g.n * p;
    let mut dy_mat = vec![0.0; g.cout * np];
    for bi in 0..g.n {
        for o in 0..g.cout {
            dy_mat[o * np + bi * p..][..p].copy_from_slice(&dy[(bi * g.cout + o) * p..][..p]);
        }
    }

    let dw = need[1].then(|| {
        let col = im2col(x, g);
        let mut dw = vec![0.0; g.cout * k];
        // SAFETY: col is K×NP row-major, read transposed via swapped strides.
        unsafe {
            dgemm(
                g.cout,
                np,
                k,
                1.0,
                dy_mat.as_ptr(),
                np as isize,
                1,
                col.as_ptr(),
                1,
                np as isize,
                0.0,
                dw.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        dw
    });

    let db = need[2].then(|| {
        (0..g.cout)
            .map(|o| dy_mat[o * np..(o + 1) * np].iter().sum())
            .collect()
    });

    let dx = need[0].then(|| {
        let mut dcol = vec![0.0; k * np];
        // SAFETY: w is Cout×K row-major, read transposed via swapped strides.
        unsafe {
            dgemm(
                k,
                g.cout,
                np,
                1.0,
                w.as_ptr(),
                1,
                k as isize,
                dy_mat.as_ptr(),
                np as isize,
                1,
                0.0,
                dcol.as_mut_ptr(),
                np as isize,
                1,
            );
        }
        let mut dx = vec![0.0; x.len()];
        col2im(&dcol, g, &mut dx);
        dx
    });

    ConvGrads { dx, dw, db }
}

/// 2×2/stride-2 max pooling. Returns the output and, per output element, the
/// flat input index of the first row-major maximizer.
pub(crate) fn maxpool2x(x: &[f64], [n, c, h, w]: [usize; 4]) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_i = base + 2 * oy * w + 2 * ox;
                let mut best = x[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > best {
                        best = x[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2x(x: &[f64], [n, c, h, w]: [usize; 4]) -> Vec<f64> {
    let wo = 2 * w;
    let mut out = vec![0.0; n * c * 4 * h * w];
    for plane in 0..n * c {
        let src = &x[plane * h * w..][..h * w];
        let dst = &mut out[plane * 4 * h * w..][..4 * h * w];
        for y in 0..2 * h {
            for xo in 0..wo {
                dst[y * wo + xo] = src[(y / 2) * w + xo / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(dy: &[f64], [n, c, h, w]: [usize; 4]) -> Vec<f64> {
    let wo = 2 * w;
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &dy[plane * 4 * h * w..][..4 * h * w];
        let dst = &mut dx[plane * h * w..][..h * w];
        for y in 0..h {
            for xi in 0..w {
                let r0 = 2 * y * wo + 2 * xi;
                let r1 = r0 + wo;
                dst[y * w + xi] = src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1];
            }
        }
    }
    dx
}

/// Non-overlapping `f×f` mean pooling.
pub(crate) fn avgpool(x: &[f64], [n, c, h, w]: [usize; 4], f: usize) -> Vec<f64> {
    let (ho, wo) = (h / f, w / f);
    let scale = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x[plane * h * w..][..h * w];
        let dst = &mut out[plane * ho * wo..][..ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for y in oy * f..(oy + 1) * f {
                    for xi in ox * f..(ox + 1) * f {
                        acc += src[y * w + xi];
                    }
                }
                dst[oy * wo + ox] = acc * scale;
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward(dy: &[f64], [n, c, h, w]: [usize; 4], f: usize) -> Vec<f64> {
    let (ho, wo) = (h / f, w / f);
    let scale = 1.0 / (f * f) as f64;
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &dy[plane * ho * wo..][..ho * wo];
        let dst = &mut dx[plane * h * w..][..h * w];
        for y in 0..h {
            for xi in 0..w {
                dst[y * w + xi] = src[(y / f) * wo + xi / f] * scale;
            }
        }
    }
    dx
}
