//! CPU kernels for 2-D convolution and nearest-neighbour upsampling.
//!
//! Convolution is patch extraction followed by a matrix product. Patch
//! extraction and its adjoint (patch scatter-add) are custom ops whose
//! backward passes are each other; the product runs through the matmul
//! kernel, whose gradient is also a matmul. Upsampling and its adjoint
//! (block sums) are paired the same way.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Rows of the patch matrix: one per (channel, ky, kx).
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Columns of the patch matrix: one per (batch, oy, ox).
    fn cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    /// Valid output range along one axis for kernel offset `k`: output
    /// positions whose tap `o * stride + k - pad` lands inside `0..size`.
    fn valid_range(&self, k: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(k).div_ceil(s);
        let hi = if size + self.pad > k { ((size + self.pad - k - 1) / s + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Calls `f(dst_offset, src_offset, len)` for every run of in-bounds taps
    /// sharing one patch row and output line. Within a run, patch columns are
    /// consecutive and input columns advance by `stride`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let n = self.cols();
        for c in 0..self.channels {
            for ky in 0..self.kh {
                let (y_lo, y_hi) = self.valid_range(ky, self.height, oh);
                for kx in 0..self.kw {
                    let (x_lo, x_hi) = self.valid_range(kx, self.width, ow);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for b in 0..self.batch {
                        let plane = (b * self.channels + c) * self.height * self.width;
                        for oy in y_lo..y_hi {
                            let iy = oy * self.stride + ky - self.pad;
                            let dst = row * n + (b * oh + oy) * ow + x_lo;
                            let src = plane + iy * self.width + x_lo * self.stride + kx - self.pad;
                            f(dst, src, x_hi - x_lo);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T: WithDType>(data: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::RequiresContiguous { op: "patches" }),
    }
}

struct Patches(Geometry);

impl CustomOp1 for Patches {
    fn name(&self) -> &'static str {
        "patches"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        fn run<T: WithDType>(g: Geometry, src: &[T]) -> Vec<T> {
            let mut out = vec![T::zero(); g.rows() * g.cols()];
            let st = g.stride;
            g.for_each_run(|d, s, len| {
                if st == 1 {
                    out[d..d + len].copy_from_slice(&src[s..s + len]);
                } else {
                    for (o, i) in out[d..d + len].iter_mut().zip(src[s..].iter().step_by(st)) {
                        *o = *i;
                    }
                }
            });
            out
        }
        let shape = Shape::from((g.rows(), g.cols()));
        Ok(match s {
            CpuStorage::F32(v) => (CpuStorage::F32(run(g, contiguous(v, l)?)), shape),
            CpuStorage::F64(v) => (CpuStorage::F64(run(g, contiguous(v, l)?)), shape),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(
                    candle_core::backend::BackendStorage::dtype(other),
                    "patches",
                ))
            }
        })
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&ScatterPatches(self.0))?))
    }
}

/// Adjoint of [`Patches`]: sums patch entries back onto the input grid.
struct ScatterPatches(Geometry);

impl CustomOp1 for ScatterPatches {
    fn name(&self) -> &'static str {
        "scatter-patches"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        fn run<T: WithDType>(g: Geometry, src: &[T]) -> Vec<T> {
            let mut out = vec![T::zero(); g.batch * g.channels * g.height * g.width];
            let st = g.stride;
            g.for_each_run(|d, s, len| {
                if st == 1 {
                    for (o, i) in out[s..s + len].iter_mut().zip(&src[d..d + len]) {
                        *o += *i;
                    }
                } else {
                    for (k, i) in src[d..d + len].iter().enumerate() {
                        out[s + k * st] += *i;
                    }
                }
            });
            out
        }
        let shape = Shape::from((g.batch, g.channels, g.height, g.width));
        Ok(match s {
            CpuStorage::F32(v) => (CpuStorage::F32(run(g, contiguous(v, l)?)), shape),
            CpuStorage::F64(v) => (CpuStorage::F64(run(g, contiguous(v, l)?)), shape),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(
                    candle_core::backend::BackendStorage::dtype(other),
                    "scatter-patches",
                ))
            }
        })
    }
}

/// `x: (B, C, H, W)`, `w: (O, C, kh, kw)` to `(B, O, H', W')`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (out_ch, in_ch, kh, kw) = w.dims4()?;
    if in_ch != channels {
        return Err(Error::Shape(format!("conv expects {in_ch} input channels, got {channels}")));
    }
    if stride == 0 || height + 2 * pad < kh || width + 2 * pad < kw {
        return Err(Error::Shape(format!("conv {kh}x{kw}/{stride} does not fit {height}x{width}")));
    }
    if !matches!(x.dtype(), DType::F32 | DType::F64) {
        return Err(Error::Shape(format!("conv on {:?}", x.dtype())));
    }
    let g = Geometry {
        batch,
        channels,
        height,
        width,
        kh,
        kw,
        stride,
        pad,
    };
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = x.contiguous()?.apply_op1(Patches(g))?;
    let y = w.reshape((out_ch, g.rows()))?.matmul(&cols)?;
    Ok(y.reshape((out_ch, batch, oh, ow))?.transpose(0, 1)?.contiguous()?)
}

/// Nearest-neighbour 2x upsampling of a contiguous `(B, C, H, W)` tensor.
struct Upsample2 {
    planes: usize,
    height: usize,
    width: usize,
}

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (h, w) = (self.height, self.width);
        fn run<T: WithDType>(planes: usize, h: usize, w: usize, src: &[T]) -> Vec<T> {
            let mut out = vec![T::zero(); planes * 4 * h * w];
            for (p, plane) in src.chunks_exact(h * w).enumerate().take(planes) {
                let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
                for (r, row) in plane.chunks_exact(w).enumerate() {
                    let line = &mut dst[2 * r * 2 * w..(2 * r + 1) * 2 * w];
                    for (pair, v) in line.chunks_exact_mut(2).zip(row) {
                        pair[0] = *v;
                        pair[1] = *v;
                    }
                    dst.copy_within(2 * r * 2 * w..(2 * r + 1) * 2 * w, (2 * r + 1) * 2 * w);
                }
            }
            out
        }
        let dims = l.shape().dims();
        let shape = Shape::from((dims[0], dims[1], 2 * h, 2 * w));
        Ok(match s {
            CpuStorage::F32(v) => (CpuStorage::F32(run(self.planes, h, w, contiguous(v, l)?)), shape),
            CpuStorage::F64(v) => (CpuStorage::F64(run(self.planes, h, w, contiguous(v, l)?)), shape),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(
                    candle_core::backend::BackendStorage::dtype(other),
                    "upsample2",
                ))
            }
        })
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let sum = BlockSum2 {
            planes: self.planes,
            height: self.height,
            width: self.width,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&sum)?))
    }
}

/// Adjoint of [`Upsample2`]: sums each 2x2 block.
struct BlockSum2 {
    planes: usize,
    height: usize,
    width: usize,
}

impl CustomOp1 for BlockSum2 {
    fn name(&self) -> &'static str {
        "block-sum2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (h, w) = (self.height, self.width);
        fn run<T: WithDType>(planes: usize, h: usize, w: usize, src: &[T]) -> Vec<T> {
            let mut out = vec![T::zero(); planes * h * w];
            for (p, plane) in out.chunks_exact_mut(h * w).enumerate() {
                let big = &src[p * 4 * h * w..(p + 1) * 4 * h * w];
                for (r, row) in plane.chunks_exact_mut(w).enumerate() {
                    let top = &big[2 * r * 2 * w..(2 * r + 1) * 2 * w];
                    let bottom = &big[(2 * r + 1) * 2 * w..(2 * r + 2) * 2 * w];
                    for (c, o) in row.iter_mut().enumerate() {
                        *o = top[2 * c] + top[2 * c + 1] + bottom[2 * c] + bottom[2 * c + 1];
                    }
                }
            }
            out
        }
        let dims = l.shape().dims();
        let shape = Shape::from((dims[0], dims[1], h, w));
        Ok(match s {
            CpuStorage::F32(v) => (CpuStorage::F32(run(self.planes, h, w, contiguous(v, l)?)), shape),
            CpuStorage::F64(v) => (CpuStorage::F64(run(self.planes, h, w, contiguous(v, l)?)), shape),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(
                    candle_core::backend::BackendStorage::dtype(other),
                    "block-sum2",
                ))
            }
        })
    }
}

/// `(B, C, H, W)` to `(B, C, 2H, 2W)` by pixel repetition.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, height, width) = x.dims4()?;
    if !matches!(x.dtype(), DType::F32 | DType::F64) {
        return Err(Error::Shape(format!("upsample on {:?}", x.dtype())));
    }
    let op = Upsample2 {
        planes: b * c,
        height,
        width,
    };
    Ok(x.contiguous()?.apply_op1(op)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed;
        let v: Vec<f64> = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_reference_convolution_and_gradients() {
        for &(b, c, o, h, w, k, s, p) in &[
            (2usize, 3usize, 4usize, 7usize, 6usize, 3usize, 1usize, 1usize),
            (1, 2, 3, 8, 8, 4, 2, 1),
            (3, 1, 2, 5, 5, 1, 1, 0),
            (1, 2, 2, 7, 9, 3, 2, 0),
        ] {
            let x = Var::from_tensor(&rand(&[b, c, h, w], 1)).unwrap();
            let k_ = Var::from_tensor(&rand(&[o, c, k, k], 2)).unwrap();
            let ours = conv2d(x.as_tensor(), k_.as_tensor(), s, p).unwrap();
            let reference = x.as_tensor().conv2d(k_.as_tensor(), p, s, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_diff(&ours, &reference) < 1e-12);
            let probe = rand(ours.dims(), 3);
            let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &k_] {
                let a = g1.get(v.as_tensor()).unwrap();
                let r = g2.get(v.as_tensor()).unwrap();
                assert!(max_diff(a, r) < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_matches_reference_and_gradient() {
        let x = Var::from_tensor(&rand(&[2, 3, 4, 5], 4)).unwrap();
        let ours = upsample2(x.as_tensor()).unwrap();
        let reference = x.as_tensor().upsample_nearest2d(8, 10).unwrap();
        assert_eq!(max_diff(&ours, &reference), 0.0);
        let probe = rand(&[2, 3, 8, 10], 5);
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_diff(g1.get(x.as_tensor()).unwrap(), g2.get(x.as_tensor()).unwrap()) < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = rand(&[1, 2, 4, 4], 1);
        let w = rand(&[1, 3, 3, 3], 2);
        assert!(matches!(conv2d(&x, &w, 1, 1), Err(Error::Shape(_))));
    }
}
