//! 2-D cross-correlation through im2col + GEMM, forward and backward.

use crate::error::{shape_err, Result};
use crate::tensor::{gemm, numel, Element, Mat, Tensor};

/// Stride, symmetric zero padding and dilation of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dSpec {
    /// Stride 1 with the padding that keeps spatial extents unchanged for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: (kernel.saturating_sub(1)) / 2,
            dilation: 1,
        }
    }

    /// `floor((n + 2p − d·(k−1) − 1)/s) + 1`, or `None` when that is not positive.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if kernel == 0 || self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: Conv2dSpec,
}

impl Geometry {
    pub fn new<T: Element>(x: &Tensor<T>, w: &Tensor<T>, spec: Conv2dSpec) -> Result<Self> {
        let [n, cin, h, wd] = x.dims();
        let [cout, wcin, kh, kw] = w.dims();
        if spec.stride == 0 || spec.dilation == 0 || kh == 0 || kw == 0 {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} with {spec:?}"),
            ));
        }
        if wcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("input has {cin} channels, kernel expects {wcin}"),
            ));
        }
        let (oh, ow) = match (spec.output_extent(h, kh), spec.output_extent(wd, kw)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("non-positive output extent for input {h}x{wd}, kernel {kh}x{kw}, {spec:?}"),
                ))
            }
        };
        numel([n, cout, oh, ow])?;
        Ok(Self {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            oh,
            ow,
            spec,
        })
    }

    pub fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1, stride 1, unpadded kernel reads the input as its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    /// Output positions `[lo, hi)` along one axis whose tap at `offset` lands inside `0..extent`.
    fn valid_range(&self, offset: isize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.spec.stride as isize;
        let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
        let hi = if (extent as isize) <= offset {
            0
        } else {
            (extent as isize - offset + s - 1) / s
        };
        let lo = (lo as usize).min(out);
        let hi = (hi as usize).min(out).max(lo);
        (lo, hi)
    }

    fn tap_offsets(&self, ky: usize, kx: usize) -> (isize, isize) {
        let d = self.spec.dilation as isize;
        let p = self.spec.padding as isize;
        (ky as isize * d - p, kx as isize * d - p)
    }
}

/// Unrolls one batch element (`cin×h×w`) into a `rows × positions` matrix.
pub(crate) fn im2col<T: Element>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let s = g.spec.stride;
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (oy, ox) = g.tap_offsets(ky, kx);
                let (y_lo, y_hi) = g.valid_range(oy, g.h, g.oh);
                let (x_lo, x_hi) = g.valid_range(ox, g.w, g.ow);
                for out_y in 0..g.oh {
                    let line = &mut dst[out_y * g.ow..(out_y + 1) * g.ow];
                    if out_y < y_lo || out_y >= y_hi || x_lo >= x_hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = (out_y * s) as isize + oy;
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..x_lo].fill(T::zero());
                    line[x_hi..].fill(T::zero());
                    let ix0 = (x_lo * s) as isize + ox;
                    if s == 1 {
                        let start = ix0 as usize;
                        line[x_lo..x_hi].copy_from_slice(&src[start..start + (x_hi - x_lo)]);
                    } else {
                        for (j, v) in line[x_lo..x_hi].iter_mut().enumerate() {
                            *v = src[ix0 as usize + j * s];
                        }
                    }
                }
            }
        }
    }
}

/// Scatters a column matrix back onto one batch element, accumulating into `dx`.
pub(crate) fn col2im<T: Element>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let s = g.spec.stride;
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (oy, ox) = g.tap_offsets(ky, kx);
                let (y_lo, y_hi) = g.valid_range(oy, g.h, g.oh);
                let (x_lo, x_hi) = g.valid_range(ox, g.w, g.ow);
                if x_lo >= x_hi {
                    continue;
                }
                for out_y in y_lo..y_hi {
                    let iy = ((out_y * s) as isize + oy) as usize;
                    let line = &src[out_y * g.ow..(out_y + 1) * g.ow];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let ix0 = ((x_lo * s) as isize + ox) as usize;
                    for (j, &v) in line[x_lo..x_hi].iter().enumerate() {
                        dst[ix0 + j * s] = dst[ix0 + j * s] + v;
                    }
                }
            }
        }
    }
}

/// Forward pass. Returns the output and, unless the kernel is pointwise, the
/// column matrices of every batch element (needed again by [`backward`]).
pub(crate) fn forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<(Tensor<T>, Option<Vec<T>>, Geometry)> {
    let g = Geometry::new(x, w, spec)?;
    if let Some(b) = b {
        if b.len() != g.cout {
            return Err(shape_err(
                "conv2d",
                format!("bias has {} entries for {} output channels", b.len(), g.cout),
            ));
        }
    }
    let (r, p) = (g.rows(), g.positions());
    let in_block = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let wmat = Mat::new(w.data(), g.cout, r);
    let saved = if g.is_pointwise() {
        for i in 0..g.n {
            let xs = &x.data()[i * in_block..(i + 1) * in_block];
            gemm(wmat, Mat::new(xs, r, p), T::zero(), &mut out[i * g.cout * p..(i + 1) * g.cout * p]);
        }
        None
    } else {
        let mut cols = vec![T::zero(); g.n * r * p];
        for i in 0..g.n {
            let c = &mut cols[i * r * p..(i + 1) * r * p];
            im2col(&x.data()[i * in_block..(i + 1) * in_block], &g, c);
            gemm(wmat, Mat::new(c, r, p), T::zero(), &mut out[i * g.cout * p..(i + 1) * g.cout * p]);
        }
        Some(cols)
    };
    if let Some(b) = b {
        for (plane, &bias) in out
            .chunks_exact_mut(p.max(1))
            .zip(b.data().iter().cycle())
            .take(g.n * g.cout)
        {
            plane.iter_mut().for_each(|v| *v = *v + bias);
        }
    }
    let y = Tensor::from_vec([g.n, g.cout, g.oh, g.ow], out)?;
    Ok((y, saved, g))
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

/// Gradients of a convolution given the upstream gradient `dy`. `cols` is what
/// [`forward`] saved; pointwise kernels read `x` directly.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Element>(
    g: &Geometry,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b_dims: Option<[usize; 4]>,
    cols: Option<&[T]>,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let (r, p) = (g.rows(), g.positions());
    let in_block = g.cin * g.h * g.w;
    let out_block = g.cout * p;
    let col_of = |i: usize| -> &[T] {
        match cols {
            Some(c) => &c[i * r * p..(i + 1) * r * p],
            None => &x.data()[i * in_block..(i + 1) * in_block],
        }
    };

    let dw = if need[1] {
        let mut dw = vec![T::zero(); g.cout * r];
        for i in 0..g.n {
            let dyi = &dy.data()[i * out_block..(i + 1) * out_block];
            gemm(Mat::new(dyi, g.cout, p), Mat::new(col_of(i), r, p).t(), T::one(), &mut dw);
        }
        Some(Tensor::from_vec(w.dims(), dw)?)
    } else {
        None
    };

    let db = match (need[2], b_dims) {
        (true, Some(dims)) => {
            let mut db = vec![T::zero(); g.cout];
            for i in 0..g.n {
                for (c, acc) in db.iter_mut().enumerate() {
                    let start = i * out_block + c * p;
                    *acc = *acc + dy.data()[start..start + p].iter().copied().sum::<T>();
                }
            }
            Some(Tensor::from_vec(dims, db)?)
        }
        _ => None,
    };

    let dx = if need[0] {
        let mut dx = vec![T::zero(); g.n * in_block];
        let wmat = Mat::new(w.data(), g.cout, r);
        let mut dcols = vec![T::zero(); r * p];
        for i in 0..g.n {
            let dyi = &dy.data()[i * out_block..(i + 1) * out_block];
            let dxi = &mut dx[i * in_block..(i + 1) * in_block];
            if g.is_pointwise() {
                gemm(wmat.t(), Mat::new(dyi, g.cout, p), T::zero(), dxi);
            } else {
                gemm(wmat.t(), Mat::new(dyi, g.cout, p), T::zero(), &mut dcols);
                col2im(&dcols, g, dxi);
            }
        }
        Some(Tensor::from_vec(x.dims(), dx)?)
    } else {
        None
    };

    Ok(ConvGrads { dx, dw, db })
}

/// Plain convolution without graph recording.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    forward(x, w, b, spec).map(|(y, _, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    /// Direct seven-loop convolution used as the reference.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, spec: Conv2dSpec) -> Tensor<f64> {
        let [n, cin, h, wd] = x.dims();
        let [cout, _, kh, kw] = w.dims();
        let oh = spec.output_extent(h, kh).unwrap();
        let ow = spec.output_extent(wd, kw).unwrap();
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        let ow_ = ow;
        for b in 0..n {
            for co in 0..cout {
                for y in 0..oh {
                    for x_ in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                    let ix = (x_ * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(b, ci, iy as usize, ix as usize) * w.at(co, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * oh + y) * ow_ + x_] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f32>::new([1, 1, 4, 4], Init::Normal { std: 1.0, seed: 4 }).unwrap();
        let w = Tensor::full([1, 1, 1, 1], 1.0f32);
        let y = conv2d(&x, &w, Some(&Tensor::zeros([1, 1, 1, 1])), Conv2dSpec::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn window_sums_of_ones() {
        let x = Tensor::full([1, 1, 3, 3], 1.0f32);
        let w = Tensor::full([1, 1, 3, 3], 1.0f32);
        let spec = Conv2dSpec { stride: 1, padding: 1, dilation: 1 };
        let y = conv2d(&x, &w, None, spec).unwrap();
        assert_eq!(y.dims(), [1, 1, 3, 3]);
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(0, 0, r, c), 4.0);
        }
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn dilated_shape_law() {
        let x = Tensor::<f32>::zeros([1, 1, 8, 8]);
        let w = Tensor::<f32>::zeros([1, 1, 3, 3]);
        let spec = Conv2dSpec { stride: 1, padding: 2, dilation: 2 };
        assert_eq!(conv2d(&x, &w, None, spec).unwrap().dims(), [1, 1, 8, 8]);
    }

    #[test]
    fn rejects_bad_geometry() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 3, 3, 3]);
        assert!(conv2d(&x, &w, None, Conv2dSpec::default()).is_err());
        let w = Tensor::<f32>::zeros([1, 2, 5, 5]);
        assert!(conv2d(&x, &w, None, Conv2dSpec::default()).is_err());
    }

    #[test]
    fn matches_naive_over_geometries() {
        let specs = [
            (3, Conv2dSpec { stride: 1, padding: 1, dilation: 1 }),
            (3, Conv2dSpec { stride: 2, padding: 1, dilation: 1 }),
            (3, Conv2dSpec { stride: 2, padding: 2, dilation: 2 }),
            (1, Conv2dSpec::default()),
            (2, Conv2dSpec { stride: 3, padding: 0, dilation: 1 }),
            (3, Conv2dSpec { stride: 1, padding: 3, dilation: 3 }),
        ];
        for (seed, (k, spec)) in specs.into_iter().enumerate() {
            let x = Tensor::<f64>::new([2, 3, 7, 6], Init::Normal { std: 1.0, seed: seed as u64 }).unwrap();
            let w = Tensor::<f64>::new([4, 3, k, k], Init::Normal { std: 1.0, seed: 100 + seed as u64 }).unwrap();
            let got = conv2d(&x, &w, None, spec).unwrap();
            let want = naive(&x, &w, spec);
            assert_eq!(got.dims(), want.dims());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{spec:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for every geometry.
        let x = Tensor::<f64>::new([1, 2, 5, 7], Init::Normal { std: 1.0, seed: 1 }).unwrap();
        let w = Tensor::<f64>::zeros([1, 2, 3, 3]);
        for spec in [
            Conv2dSpec { stride: 2, padding: 1, dilation: 1 },
            Conv2dSpec { stride: 1, padding: 2, dilation: 2 },
        ] {
            let g = Geometry::new(&x, &w, spec).unwrap();
            let mut cols = vec![0.0; g.rows() * g.positions()];
            im2col(x.data(), &g, &mut cols);
            let c = Tensor::<f64>::new([1, 1, 1, cols.len()], Init::Normal { std: 1.0, seed: 2 }).unwrap();
            let lhs: f64 = cols.iter().zip(c.data()).map(|(a, b)| a * b).sum();
            let mut back = vec![0.0; x.len()];
            col2im(c.data(), &g, &mut back);
            let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
