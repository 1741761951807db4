//! 3D convolution (cross-correlation, no kernel flip) over `[N, C, T, H, W]`.
//!
//! The default path lowers each sample to a column matrix and runs a GEMM;
//! pointwise stride-1 kernels skip the lowering entirely. A plain loop
//! implementation is kept alongside for comparison.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{BackwardRule, Tape, Tensor, Var};

/// Kernel, stride, and padding along (T, H, W).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        ConvGeometry { kernel, stride, padding }
    }

    /// Pointwise kernel with unit stride and no padding.
    pub fn pointwise() -> Self {
        ConvGeometry::new([1, 1, 1], [1, 1, 1], [0, 0, 0])
    }

    fn is_trivial_pointwise(&self) -> bool {
        *self == Self::pointwise()
    }

    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        conv3d_output_shape(input, self.kernel, self.stride, self.padding)
    }
}

/// Per-dimension `floor((in + 2p - k) / s) + 1`.
pub fn conv3d_output_shape(
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for d in 0..3 {
        if kernel[d] == 0 || stride[d] == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel {kernel:?} and stride {stride:?} must be positive"
            )));
        }
        let padded = input[d] + 2 * padding[d];
        if padded < kernel[d] {
            return Err(Error::InvalidShape(format!(
                "kernel {kernel:?} larger than padded input {input:?} (padding {padding:?})"
            )));
        }
        out[d] = (padded - kernel[d]) / stride[d] + 1;
    }
    Ok(out)
}

/// Validated extents of one convolution call.
#[derive(Clone, Copy, Debug)]
struct ConvDims {
    n: usize,
    c: usize,
    o: usize,
    input: [usize; 3],
    output: [usize; 3],
    geom: ConvGeometry,
}

impl ConvDims {
    fn resolve(x: &[usize], w: &[usize], geom: ConvGeometry) -> Result<Self> {
        if x.len() != 5 || w.len() != 5 {
            return Err(Error::ShapeMismatch { op: "conv3d", lhs: x.to_vec(), rhs: w.to_vec() });
        }
        if x[1] != w[1] || w[2..] != geom.kernel {
            return Err(Error::ShapeMismatch { op: "conv3d", lhs: x.to_vec(), rhs: w.to_vec() });
        }
        let input = [x[2], x[3], x[4]];
        let output = geom.output_extent(input)?;
        Ok(ConvDims { n: x[0], c: x[1], o: w[0], input, output, geom })
    }

    fn in_len(&self) -> usize {
        self.c * self.input.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn patch(&self) -> usize {
        self.c * self.geom.kernel.iter().product::<usize>()
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.output[0], self.output[1], self.output[2]]
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`, i.e.
/// the outputs whose source coordinate `o * s + k - p` lies in `[0, len)`.
#[inline]
fn valid_range(len: usize, out: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    // o * s + k >= p  <=>  o >= ceil((p - k) / s)
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    // o * s + k - p < len  <=>  o * s < len + p - k
    let lim = len + p;
    let hi = if lim <= k { 0 } else { (lim - k).div_ceil(s) };
    (lo.min(out), hi.min(out))
}

/// Lowers one sample `[C, T, H, W]` into `[C*kT*kH*kW, T'*H'*W']`.
fn im2col<S: Scalar>(x: &[S], d: &ConvDims, cols: &mut [S]) {
    let [it, ih, iw] = d.input;
    let [ot, oh, ow] = d.output;
    let [kt, kh, kw] = d.geom.kernel;
    let [st, sh, sw] = d.geom.stride;
    let [pt, ph, pw] = d.geom.padding;
    let p = d.positions();
    let mut row = 0;
    for c in 0..d.c {
        let xc = &x[c * it * ih * iw..(c + 1) * it * ih * iw];
        for a in 0..kt {
            let (t0, t1) = valid_range(it, ot, st, a, pt);
            for b in 0..kh {
                let (h0, h1) = valid_range(ih, oh, sh, b, ph);
                for e in 0..kw {
                    let (w0, w1) = valid_range(iw, ow, sw, e, pw);
                    let dst = &mut cols[row * p..(row + 1) * p];
                    dst.fill(S::zero());
                    for o_t in t0..t1 {
                        let src_t = o_t * st + a - pt;
                        for o_h in h0..h1 {
                            let src_h = o_h * sh + b - ph;
                            let base = (src_t * ih + src_h) * iw;
                            let out_base = (o_t * oh + o_h) * ow;
                            for o_w in w0..w1 {
                                dst[out_base + o_w] = xc[base + o_w * sw + e - pw];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto one sample.
fn col2im<S: Scalar>(cols: &[S], d: &ConvDims, dx: &mut [S]) {
    let [it, ih, iw] = d.input;
    let [ot, oh, ow] = d.output;
    let [kt, kh, kw] = d.geom.kernel;
    let [st, sh, sw] = d.geom.stride;
    let [pt, ph, pw] = d.geom.padding;
    let p = d.positions();
    let mut row = 0;
    for c in 0..d.c {
        let dxc = &mut dx[c * it * ih * iw..(c + 1) * it * ih * iw];
        for a in 0..kt {
            let (t0, t1) = valid_range(it, ot, st, a, pt);
            for b in 0..kh {
                let (h0, h1) = valid_range(ih, oh, sh, b, ph);
                for e in 0..kw {
                    let (w0, w1) = valid_range(iw, ow, sw, e, pw);
                    let src = &cols[row * p..(row + 1) * p];
                    for o_t in t0..t1 {
                        let dst_t = o_t * st + a - pt;
                        for o_h in h0..h1 {
                            let dst_h = o_h * sh + b - ph;
                            let base = (dst_t * ih + dst_h) * iw;
                            let in_base = (o_t * oh + o_h) * ow;
                            for o_w in w0..w1 {
                                dxc[base + o_w * sw + e - pw] += src[in_base + o_w];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn check_bias<S: Scalar>(bias: Option<&Tensor<S>>, o: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [o] => {
            Err(Error::ShapeMismatch { op: "conv3d bias", lhs: b.shape().to_vec(), rhs: vec![o] })
        }
        _ => Ok(()),
    }
}

/// Forward convolution through column lowering and GEMM.
pub fn conv3d_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: ConvGeometry,
) -> Result<Tensor<S>> {
    let d = ConvDims::resolve(x.shape(), weight.shape(), geom)?;
    check_bias(bias, d.o)?;
    let (p, patch, in_len) = (d.positions(), d.patch(), d.in_len());
    let wmat = MatRef::row_major(weight.data(), d.o, patch);
    let mut out = vec![S::zero(); d.n * d.o * p];
    out.par_chunks_mut(d.o * p).zip(x.data().par_chunks(in_len)).for_each(|(out_n, x_n)| {
        if geom.is_trivial_pointwise() {
            gemm(wmat, MatRef::row_major(x_n, patch, p), S::zero(), out_n);
        } else {
            let mut cols = vec![S::zero(); patch * p];
            im2col(x_n, &d, &mut cols);
            gemm(wmat, MatRef::row_major(&cols, patch, p), S::zero(), out_n);
        }
        if let Some(b) = bias {
            for (row, &bv) in out_n.chunks_mut(p).zip(b.data()) {
                for v in row {
                    *v += bv;
                }
            }
        }
    });
    Ok(Tensor::from_parts(d.out_shape(), out))
}

/// Forward convolution by direct accumulation, without lowering.
pub fn conv3d_direct<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: ConvGeometry,
) -> Result<Tensor<S>> {
    let d = ConvDims::resolve(x.shape(), weight.shape(), geom)?;
    check_bias(bias, d.o)?;
    let [it, ih, iw] = d.input;
    let [ot, oh, ow] = d.output;
    let [kt, kh, kw] = geom.kernel;
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.padding;
    let p = d.positions();
    let mut out = vec![S::zero(); d.n * d.o * p];
    let (xd, wd) = (x.data(), weight.data());
    out.par_chunks_mut(p).enumerate().for_each(|(no, plane)| {
        let (n, o) = (no / d.o, no % d.o);
        let b0 = bias.map_or(S::zero(), |b| b.data()[o]);
        plane.fill(b0);
        for c in 0..d.c {
            let xc = &xd[(n * d.c + c) * it * ih * iw..][..it * ih * iw];
            let wc = &wd[(o * d.c + c) * kt * kh * kw..][..kt * kh * kw];
            for a in 0..kt {
                let (t0, t1) = valid_range(it, ot, st, a, pt);
                for b in 0..kh {
                    let (h0, h1) = valid_range(ih, oh, sh, b, ph);
                    for e in 0..kw {
                        let (w0, w1) = valid_range(iw, ow, sw, e, pw);
                        let wv = wc[(a * kh + b) * kw + e];
                        for o_t in t0..t1 {
                            let src_t = o_t * st + a - pt;
                            for o_h in h0..h1 {
                                let src_h = o_h * sh + b - ph;
                                let base = (src_t * ih + src_h) * iw;
                                let dst = (o_t * oh + o_h) * ow;
                                for o_w in w0..w1 {
                                    plane[dst + o_w] += wv * xc[base + o_w * sw + e - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(d.out_shape(), out))
}

struct Conv3dBackward {
    geom: ConvGeometry,
    has_bias: bool,
}

impl<S: Scalar> BackwardRule<S> for Conv3dBackward {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let d = ConvDims::resolve(x.shape(), w.shape(), self.geom)?;
        let (p, patch, in_len) = (d.positions(), d.patch(), d.in_len());
        let pointwise = self.geom.is_trivial_pointwise();
        let (need_x, need_w) = (needs[0], needs[1]);
        let wmat = MatRef::row_major(w.data(), d.o, patch);

        let mut dx = need_x.then(|| vec![S::zero(); x.numel()]);
        let per_sample: Vec<Option<Vec<S>>> = {
            let work = |(n, dx_n): (usize, Option<&mut [S]>)| -> Option<Vec<S>> {
                let x_n = &x.data()[n * in_len..(n + 1) * in_len];
                let g_n = &grad.data()[n * d.o * p..(n + 1) * d.o * p];
                let gmat = MatRef::row_major(g_n, d.o, p);
                let lowered;
                let cols: &[S] = if pointwise {
                    x_n
                } else if need_w {
                    let mut buf = vec![S::zero(); patch * p];
                    im2col(x_n, &d, &mut buf);
                    lowered = buf;
                    &lowered
                } else {
                    &[]
                };
                if let Some(dx_n) = dx_n {
                    if pointwise {
                        gemm(wmat.t(), gmat, S::zero(), dx_n);
                    } else {
                        let mut dcols = vec![S::zero(); patch * p];
                        gemm(wmat.t(), gmat, S::zero(), &mut dcols);
                        col2im(&dcols, &d, dx_n);
                    }
                }
                need_w.then(|| {
                    let mut dw_n = vec![S::zero(); d.o * patch];
                    gemm(gmat, MatRef::row_major(cols, patch, p).t(), S::zero(), &mut dw_n);
                    dw_n
                })
            };
            match dx.as_mut() {
                Some(dx) => dx
                    .par_chunks_mut(in_len)
                    .enumerate()
                    .map(|(n, chunk)| work((n, Some(chunk))))
                    .collect(),
                None => (0..d.n).into_par_iter().map(|n| work((n, None))).collect(),
            }
        };

        let dw = need_w.then(|| {
            let mut acc = vec![S::zero(); w.numel()];
            for part in per_sample.iter().flatten() {
                for (a, &b) in acc.iter_mut().zip(part) {
                    *a += b;
                }
            }
            Tensor::from_parts(w.shape().to_vec(), acc)
        });

        let mut grads = vec![dx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)), dw];
        if self.has_bias {
            let db = needs[2].then(|| {
                let mut acc = vec![S::zero(); d.o];
                for g_n in grad.data().chunks(d.o * p) {
                    for (a, row) in acc.iter_mut().zip(g_n.chunks(p)) {
                        *a += row.iter().copied().sum::<S>();
                    }
                }
                Tensor::from_parts(vec![d.o], acc)
            });
            grads.push(db);
        }
        Ok(grads)
    }
}

impl<S: Scalar> Tape<S> {
    /// Differentiable 3D convolution of `x: [N, C, T, H, W]` with
    /// `weight: [O, C, kT, kH, kW]` and optional `bias: [O]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let w = self.try_value(weight)?;
        if w.rank() != 5 {
            return Err(Error::InvalidShape(format!("conv3d weight shape {:?}", w.shape())));
        }
        let kernel = [w.shape()[2], w.shape()[3], w.shape()[4]];
        let geom = ConvGeometry { kernel, stride, padding };
        let b = bias.map(|b| self.try_value(b)).transpose()?;
        let out = conv3d_forward(self.try_value(x)?, w, b, geom)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.record(out, &inputs, Conv3dBackward { geom, has_bias: bias.is_some() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shape_examples() {
        let k = [1, 7, 7];
        assert_eq!(conv3d_output_shape([8, 244, 244], k, [1, 2, 2], [0, 3, 3]).unwrap(), [8, 122, 122]);
        assert_eq!(
            conv3d_output_shape([8, 122, 122], [1, 3, 3], [1, 2, 2], [0, 1, 1]).unwrap(),
            [8, 61, 61]
        );
        assert_eq!(conv3d_output_shape([5, 9, 11], [1; 3], [1; 3], [0; 3]).unwrap(), [5, 9, 11]);
        assert!(conv3d_output_shape([2, 4, 4], [3, 3, 3], [1; 3], [0; 3]).is_err());
    }

    #[test]
    fn sum_of_ones_kernel() {
        let x = Tensor::<f32>::ones(&[1, 1, 1, 3, 3]);
        let w = Tensor::<f32>::ones(&[1, 1, 1, 3, 3]);
        let y = conv3d_forward(&x, &w, None, ConvGeometry::new([1, 3, 3], [1; 3], [0; 3])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f32>::randn(&[2, 1, 3, 4, 5], 1.0, &mut rng);
        let w = Tensor::<f32>::ones(&[1, 1, 1, 1, 1]);
        let y = conv3d_forward(&x, &w, None, ConvGeometry::pointwise()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn lowered_and_direct_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::<f32>::randn(&[2, 3, 4, 6, 6], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[5, 3, 3, 3, 3], 0.3, &mut rng);
        let b = Tensor::<f32>::randn(&[5], 0.3, &mut rng);
        let g = ConvGeometry::new([3, 3, 3], [1, 2, 2], [1, 1, 1]);
        let y1 = conv3d_forward(&x, &w, Some(&b), g).unwrap();
        let y2 = conv3d_direct(&x, &w, Some(&b), g).unwrap();
        assert_eq!(y1.shape(), &[2, 5, 4, 3, 3]);
        assert!(y1.max_abs_diff(&y2).unwrap() < 1e-4);
    }

    #[test]
    fn channel_mismatch_errors() {
        let x = Tensor::<f32>::ones(&[1, 2, 1, 3, 3]);
        let w = Tensor::<f32>::ones(&[1, 3, 1, 1, 1]);
        assert!(matches!(
            conv3d_forward(&x, &w, None, ConvGeometry::pointwise()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn same_padding_preserves_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in [1usize, 3, 5] {
            let x = Tensor::<f32>::randn(&[1, 2, 5, 6, 7], 1.0, &mut rng);
            let w = Tensor::<f32>::randn(&[3, 2, k, k, k], 1.0, &mut rng);
            let y = conv3d_forward(&x, &w, None, ConvGeometry::new([k; 3], [1; 3], [k / 2; 3])).unwrap();
            assert_eq!(&y.shape()[2..], &[5, 6, 7]);
        }
    }
}
