//! Dense kernels shared by the forward and backward passes.

use super::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source_index(&self, out: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (out * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds one `C×H×W` item into a `(C·kh·kw) × (oh·ow)` patch matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, col: &mut [T]) {
    let ohw = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oi in 0..g.out_h {
                    let line = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    match g.source_index(oi, ki, g.stride.0, g.pad.0, g.height) {
                        None => line.fill(T::zero()),
                        Some(ii) => {
                            let src = &plane[ii * g.width..(ii + 1) * g.width];
                            for (oj, v) in line.iter_mut().enumerate() {
                                *v = match g.source_index(oj, kj, g.stride.1, g.pad.1, g.width) {
                                    Some(jj) => src[jj],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the item.
pub fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let ohw = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &col[row * ohw..(row + 1) * ohw];
                for oi in 0..g.out_h {
                    let Some(ii) = g.source_index(oi, ki, g.stride.0, g.pad.0, g.height) else {
                        continue;
                    };
                    let line = &src[oi * g.out_w..(oi + 1) * g.out_w];
                    let dst = &mut plane[ii * g.width..(ii + 1) * g.width];
                    for (oj, &v) in line.iter().enumerate() {
                        if let Some(jj) = g.source_index(oj, kj, g.stride.1, g.pad.1, g.width) {
                            dst[jj] = dst[jj] + v;
                        }
                    }
                }
            }
        }
    }
}

pub fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
