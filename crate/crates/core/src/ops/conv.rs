//! 2-D cross-correlation via patch gathering (im2col) and a matrix multiply.
//!
//! All variants route through one grouped kernel: a dense convolution is
//! `groups = 1`, a depthwise one is `groups = channels`. Kernels are laid out
//! `[out_channels, in_channels / groups, kh, kw]`.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Spatial output extent for one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new<T: Scalar>(
        op: &'static str,
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let [batch, in_c, h, w] = input.dims4(op)?;
        let [out_c, cin_g, kh, kw] = kernel.dims4(op)?;
        if stride == 0 {
            return Err(Error::Validation(format!("{op}: stride must be >= 1")));
        }
        if groups == 0 || in_c % groups != 0 || out_c % groups != 0 {
            return Err(Error::shape(
                op,
                "channels/groups",
                format!("in {in_c} and out {out_c} channels must divide into {groups} groups"),
            ));
        }
        if cin_g != in_c / groups {
            return Err(Error::shape(
                op,
                "input channels (input axis 1 vs kernel axis 1)",
                format!(
                    "input has {in_c} channels over {groups} group(s), kernel expects {cin_g} per group"
                ),
            ));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(
                op,
                "spatial (kernel axes 2,3 vs padded input axes 2,3)",
                format!(
                    "kernel {kh}x{kw} exceeds padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        }
        Ok(ConvGeometry {
            batch,
            in_c,
            h,
            w,
            out_c,
            kh,
            kw,
            stride,
            padding,
            groups,
            oh: conv_output_size(h, kh, stride, padding),
            ow: conv_output_size(w, kw, stride, padding),
        })
    }

    fn cin_g(&self) -> usize {
        self.in_c / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_c / self.groups
    }

    fn patch_len(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1x1, stride-1, unpadded conv reads its input directly as the patch matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_c, self.oh, self.ow]
    }
}

/// Gather the receptive fields of `channels` (a `cin_g x h x w` slab) into
/// a `patch_len x positions` matrix.
fn im2col<T: Scalar>(g: &ConvGeometry, channels: &[T], col: &mut [T]) {
    let p = g.positions();
    let pad = g.padding as isize;
    for c in 0..g.cin_g() {
        let plane = &channels[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch matrix back onto a `cin_g x h x w` slab.
fn col2im_add<T: Scalar>(g: &ConvGeometry, col: &[T], channels: &mut [T]) {
    let p = g.positions();
    let pad = g.padding as isize;
    for c in 0..g.cin_g() {
        let plane = &mut channels[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward_geom<T: Scalar>(
    g: &ConvGeometry,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Tensor<T> {
    let (cin_g, cout_g, pl, p) = (g.cin_g(), g.cout_g(), g.patch_len(), g.positions());
    let in_slab = cin_g * g.h * g.w;
    let mut out = Tensor::zeros(&g.output_shape());
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); pl * p] };
    let x = input.data();
    let k = kernel.data();
    let o = out.data_mut();
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let slab_at = (b * g.in_c + grp * cin_g) * g.h * g.w;
            let slab = &x[slab_at..slab_at + in_slab];
            let patches: &[T] = if g.is_pointwise() {
                slab
            } else {
                im2col(g, slab, &mut col);
                &col
            };
            let w = &k[grp * cout_g * pl..(grp + 1) * cout_g * pl];
            let out_at = (b * g.out_c + grp * cout_g) * p;
            gemm(
                MatRef::new(w, cout_g, pl),
                MatRef::new(patches, pl, p),
                T::zero(),
                &mut o[out_at..out_at + cout_g * p],
            );
        }
    }
    out
}

pub fn conv_backward_geom<T: Scalar>(
    g: &ConvGeometry,
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (cin_g, cout_g, pl, p) = (g.cin_g(), g.cout_g(), g.patch_len(), g.positions());
    let in_slab = cin_g * g.h * g.w;
    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_k = Tensor::zeros(kernel.shape());
    let mut col = vec![T::zero(); pl * p];
    let mut dcol = vec![T::zero(); pl * p];
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let slab_at = (b * g.in_c + grp * cin_g) * g.h * g.w;
            let slab = &x[slab_at..slab_at + in_slab];
            let patches: &[T] = if g.is_pointwise() {
                slab
            } else {
                im2col(g, slab, &mut col);
                &col
            };
            let out_at = (b * g.out_c + grp * cout_g) * p;
            let gout = MatRef::new(&go[out_at..out_at + cout_g * p], cout_g, p);
            let wk = grp * cout_g * pl..(grp + 1) * cout_g * pl;

            // dK_g += dY (cout_g x P) * patches^T (P x pl)
            gemm(
                gout,
                MatRef::new(patches, pl, p).t(),
                T::one(),
                &mut grad_k.data_mut()[wk.clone()],
            );

            // dpatches = K_g^T (pl x cout_g) * dY (cout_g x P)
            let gi = &mut grad_in.data_mut()[slab_at..slab_at + in_slab];
            if g.is_pointwise() {
                gemm(MatRef::new(&k[wk], cout_g, pl).t(), gout, T::one(), gi);
            } else {
                gemm(MatRef::new(&k[wk], cout_g, pl).t(), gout, T::zero(), &mut dcol);
                col2im_add(g, &dcol, gi);
            }
        }
    }
    (grad_in, grad_k)
}

fn check_grad_out<T: Scalar>(op: &'static str, g: &ConvGeometry, grad_out: &Tensor<T>) -> Result<()> {
    let want = g.output_shape();
    if grad_out.shape() != want {
        return Err(Error::shape(
            op,
            "grad_out (all axes)",
            format!("expected {:?}, got {:?}", want, grad_out.shape()),
        ));
    }
    Ok(())
}

/// Grouped cross-correlation. `kernel` is `[Cout, Cin/groups, kh, kw]`.
pub fn grouped_conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new("grouped_conv2d_forward", input, kernel, stride, padding, groups)?;
    Ok(conv_forward_geom(&g, input, kernel))
}

/// Returns `(grad_input, grad_kernel)`.
pub fn grouped_conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let op = "grouped_conv2d_backward";
    let g = ConvGeometry::new(op, input, kernel, stride, padding, groups)?;
    check_grad_out(op, &g, grad_out)?;
    Ok(conv_backward_geom(&g, grad_out, input, kernel))
}

/// `input [B,Cin,H,W]`, `kernel [Cout,Cin,kh,kw]` -> `[B,Cout,H',W']`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new("conv2d_forward", input, kernel, stride, padding, 1)?;
    Ok(conv_forward_geom(&g, input, kernel))
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let op = "conv2d_backward";
    let g = ConvGeometry::new(op, input, kernel, stride, padding, 1)?;
    check_grad_out(op, &g, grad_out)?;
    Ok(conv_backward_geom(&g, grad_out, input, kernel))
}

fn depthwise_groups<T: Scalar>(op: &'static str, input: &Tensor<T>, kernel: &Tensor<T>) -> Result<usize> {
    let [_, c, _, _] = input.dims4(op)?;
    let [kc, one, _, _] = kernel.dims4(op)?;
    if kc != c || one != 1 {
        return Err(Error::shape(
            op,
            "kernel axes 0,1",
            format!("depthwise kernel must be [{c}, 1, kh, kw], got {:?}", kernel.shape()),
        ));
    }
    Ok(c)
}

/// Channel-separable convolution: `kernel [C,1,kh,kw]`, output channel `c`
/// reads only input channel `c`.
pub fn depthwise_conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let op = "depthwise_conv2d_forward";
    let groups = depthwise_groups(op, input, kernel)?;
    let g = ConvGeometry::new(op, input, kernel, stride, padding, groups)?;
    Ok(conv_forward_geom(&g, input, kernel))
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let op = "depthwise_conv2d_backward";
    let groups = depthwise_groups(op, input, kernel)?;
    let g = ConvGeometry::new(op, input, kernel, stride, padding, groups)?;
    check_grad_out(op, &g, grad_out)?;
    Ok(conv_backward_geom(&g, grad_out, input, kernel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y[0], 9.0);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = Rng::new(3);
        let x: Tensor<f64> = rng.uniform_tensor(&[2, 1, 4, 5], -1.0, 1.0);
        let k = Tensor::<f64>::full(&[1, 1, 1, 1], 1.0);
        assert!(conv2d_forward(&x, &k, 1, 0).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn output_size_follows_stride_arithmetic() {
        let x = Tensor::<f32>::zeros(&[1, 2, 7, 8]);
        let k = Tensor::<f32>::zeros(&[3, 2, 3, 3]);
        let y = conv2d_forward(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
    }

    #[test]
    fn channel_mismatch_names_axes() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[3, 5, 3, 3]);
        let err = conv2d_forward(&x, &k, 1, 1).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let k = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        assert!(conv2d_forward(&x, &k, 1, 1).is_err());
        assert!(conv2d_forward(&x, &k, 1, 0).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = Rng::new(5);
        let x: Tensor<f64> = rng.uniform_tensor(&[2, 3, 5, 5], -1.0, 1.0);
        let k: Tensor<f64> = rng.uniform_tensor(&[4, 3, 3, 3], -1.0, 1.0);
        let go = Tensor::zeros(&[2, 4, 5, 5]);
        let (gi, gk) = conv2d_backward(&go, &x, &k, 1, 1).unwrap();
        assert_eq!(gi.max_abs(), 0.0);
        assert_eq!(gk.max_abs(), 0.0);
    }

    #[test]
    fn single_pixel_grad_routes_through_identity() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let k = Tensor::<f64>::full(&[1, 1, 1, 1], 1.0);
        let mut go = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        go[5] = 2.5;
        let (gi, _) = conv2d_backward(&go, &x, &k, 1, 0).unwrap();
        assert!(gi.bitwise_eq(&go));
    }

    #[test]
    fn depthwise_identity_and_ones() {
        let mut rng = Rng::new(9);
        let x: Tensor<f64> = rng.uniform_tensor(&[1, 2, 4, 4], 0.0, 1.0);
        let mut k = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
        k[4] = 1.0;
        k[9 + 4] = 1.0;
        assert!(depthwise_conv2d_forward(&x, &k, 1, 1).unwrap().bitwise_eq(&x));

        let ones = Tensor::<f64>::full(&[1, 2, 3, 3], 1.0);
        let k1 = Tensor::<f64>::full(&[2, 1, 3, 3], 1.0);
        let y = depthwise_conv2d_forward(&ones, &k1, 1, 0).unwrap();
        assert_eq!(y.data(), &[9.0, 9.0]);
    }

    #[test]
    fn depthwise_rejects_full_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        assert!(depthwise_conv2d_forward(&x, &k, 1, 1).is_err());
    }
}
