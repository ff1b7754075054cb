//! im2col lowering for 2-D convolution in NCHW layout.

use super::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on each side; output is `ceil(in / stride)` for odd kernels.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Option<ConvGeom> {
        if x_shape.len() != 4 || w_shape.len() != 4 || x_shape[1] != w_shape[1] || stride == 0 {
            return None;
        }
        let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (o, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
        let (pad_h, pad_w) = match padding {
            Padding::Same => (kh / 2, kw / 2),
            Padding::Valid => (0, 0),
        };
        if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
            return None;
        }
        let oh = (h + 2 * pad_h - kh) / stride + 1;
        let ow = (w + 2 * pad_w - kw) / stride + 1;
        Some(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            oh,
            ow,
        })
    }

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_spatial(&self) -> usize {
        self.oh * self.ow
    }

    pub fn cols(&self) -> usize {
        self.n * self.out_spatial()
    }

    /// Maps output coordinate + kernel offset to an input coordinate, if inside.
    #[inline]
    fn src(&self, out: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - pad as isize;
        if pos >= 0 && (pos as usize) < limit {
            Some(pos as usize)
        } else {
            None
        }
    }
}

/// Lowers `x` to a `[c*kh*kw, n*oh*ow]` matrix.
pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let mut cols = vec![T::zero(); g.patch() * ncols];
    let osp = g.out_spatial();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for ni in 0..g.n {
                    let plane = &x[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    for oi in 0..g.oh {
                        let Some(yi) = g.src(oi, ki, g.pad_h, g.h) else {
                            continue;
                        };
                        let base = ni * osp + oi * g.ow;
                        for oj in 0..g.ow {
                            if let Some(xj) = g.src(oj, kj, g.pad_w, g.w) {
                                dst[base + oj] = plane[yi * g.w + xj];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back onto an input-shaped buffer.
pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    let osp = g.out_spatial();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for ni in 0..g.n {
                    let off = (ni * g.c + ci) * g.h * g.w;
                    for oi in 0..g.oh {
                        let Some(yi) = g.src(oi, ki, g.pad_h, g.h) else {
                            continue;
                        };
                        let base = ni * osp + oi * g.ow;
                        for oj in 0..g.ow {
                            if let Some(xj) = g.src(oj, kj, g.pad_w, g.w) {
                                x[off + yi * g.w + xj] += src[base + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_halves_with_stride_two() {
        let g = ConvGeom::new(&[2, 3, 32, 32], &[16, 3, 3, 3], 2, Padding::Same).unwrap();
        assert_eq!((g.oh, g.ow), (16, 16));
        let g = ConvGeom::new(&[1, 3, 7, 7], &[4, 3, 3, 3], 1, Padding::Valid).unwrap();
        assert_eq!((g.oh, g.ow), (5, 5));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::new(&[2, 2, 5, 4], &[3, 2, 3, 3], 2, Padding::Same).unwrap();
        let x: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.patch() * g.cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&col2im(&c, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
