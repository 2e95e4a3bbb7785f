//! 2-D convolution in cross-correlation orientation:
//!
//! ```text
//! out[m][y][x] = bias[m] + Σ_n Σ_ky Σ_kx k[m][n][ky][kx] · in[n][y·s + ky − p][x·s + kx − p]
//! ```
//!
//! with zero padding `p` and stride `s`. The kernel is never flipped.

use super::Tensor;
use crate::error::{Error, Result};

/// Output length of a convolution along one axis, or `None` when the kernel
/// does not fit inside the padded input.
pub fn conv_output_extent(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct Geometry {
    in_maps: usize,
    in_h: usize,
    in_w: usize,
    out_maps: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input: &[usize], kernels: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let [in_maps, in_h, in_w] = *input else {
            return Err(Error::shape(format!(
                "convolution input must be maps × height × width, got {input:?}"
            )));
        };
        let [out_maps, k_in, kh, kw] = *kernels.shape() else {
            return Err(Error::shape(format!(
                "kernel bank must be out × in × kh × kw, got {:?}",
                kernels.shape()
            )));
        };
        if k_in != in_maps {
            return Err(Error::shape(format!(
                "kernel bank expects {k_in} input maps, input has {in_maps}"
            )));
        }
        let (Some(out_h), Some(out_w)) = (
            conv_output_extent(in_h, kh, stride, pad),
            conv_output_extent(in_w, kw, stride, pad),
        ) else {
            return Err(Error::shape(format!(
                "{kh}×{kw} kernel (stride {stride}, pad {pad}) does not fit a {in_h}×{in_w} input"
            )));
        };
        Ok(Geometry {
            in_maps,
            in_h,
            in_w,
            out_maps,
            kh,
            kw,
            out_h,
            out_w,
            stride,
            pad,
        })
    }

    /// Output indices `o` with `0 ≤ o·stride + k − pad < len`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> std::ops::Range<usize> {
        let s = self.stride as isize;
        let offset = k as isize - self.pad as isize;
        let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
        let hi = (len as isize - offset + s - 1).div_euclid(s);
        let lo = lo.clamp(0, out_len as isize) as usize;
        let hi = hi.clamp(0, out_len as isize) as usize;
        lo..hi.max(lo)
    }

    fn in_index(&self, o: usize, k: usize) -> usize {
        o * self.stride + k - self.pad
    }
}

/// Convolves `input` with `kernels` and adds `bias` per output map.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = Geometry::new(input.shape(), kernels, stride, pad)?;
    if bias.len() != g.out_maps {
        return Err(Error::shape(format!(
            "bias has {} entries for {} output maps",
            bias.len(),
            g.out_maps
        )));
    }
    let mut out = Tensor::zeros(&[g.out_maps, g.out_h, g.out_w]);
    conv2d_accumulate(input, kernels, stride, pad, &mut out)?;
    let plane = g.out_h * g.out_w;
    for (m, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let b = bias.data()[m];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

/// Adds the bias-free convolution of `input` with `kernels` into `out`.
pub fn conv2d_accumulate(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    pad: usize,
    out: &mut Tensor,
) -> Result<()> {
    let g = Geometry::new(input.shape(), kernels, stride, pad)?;
    if out.shape() != [g.out_maps, g.out_h, g.out_w] {
        return Err(Error::shape(format!(
            "convolution output buffer is {:?}, expected {:?}",
            out.shape(),
            [g.out_maps, g.out_h, g.out_w]
        )));
    }
    let x = input.data();
    let k = kernels.data();
    let o = out.data_mut();
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    for m in 0..g.out_maps {
        let out_m = &mut o[m * out_plane..(m + 1) * out_plane];
        for n in 0..g.in_maps {
            let in_n = &x[n * in_plane..(n + 1) * in_plane];
            for ky in 0..g.kh {
                let rows = g.valid(ky, g.in_h, g.out_h);
                for kx in 0..g.kw {
                    let w = k[((m * g.in_maps + n) * g.kh + ky) * g.kw + kx];
                    let cols = g.valid(kx, g.in_w, g.out_w);
                    for oy in rows.clone() {
                        let iy = g.in_index(oy, ky);
                        let out_row = &mut out_m[oy * g.out_w..(oy + 1) * g.out_w];
                        let in_row = &in_n[iy * g.in_w..(iy + 1) * g.in_w];
                        if g.stride == 1 {
                            let ix0 = g.in_index(cols.start, kx);
                            let src = &in_row[ix0..ix0 + cols.len()];
                            for (dst, &v) in out_row[cols.clone()].iter_mut().zip(src) {
                                *dst += w * v;
                            }
                        } else {
                            for ox in cols.clone() {
                                out_row[ox] += w * in_row[g.in_index(ox, kx)];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Adds `∂L/∂input` into `grad_input` given `∂L/∂output`.
pub fn conv2d_backward_input(
    grad_output: &Tensor,
    kernels: &Tensor,
    stride: usize,
    pad: usize,
    grad_input: &mut Tensor,
) -> Result<()> {
    let g = Geometry::new(grad_input.shape(), kernels, stride, pad)?;
    if grad_output.shape() != [g.out_maps, g.out_h, g.out_w] {
        return Err(Error::shape(format!(
            "output gradient is {:?}, expected {:?}",
            grad_output.shape(),
            [g.out_maps, g.out_h, g.out_w]
        )));
    }
    let go = grad_output.data();
    let k = kernels.data();
    let gi = grad_input.data_mut();
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    for m in 0..g.out_maps {
        let go_m = &go[m * out_plane..(m + 1) * out_plane];
        for n in 0..g.in_maps {
            let gi_n = &mut gi[n * in_plane..(n + 1) * in_plane];
            for ky in 0..g.kh {
                let rows = g.valid(ky, g.in_h, g.out_h);
                for kx in 0..g.kw {
                    let w = k[((m * g.in_maps + n) * g.kh + ky) * g.kw + kx];
                    let cols = g.valid(kx, g.in_w, g.out_w);
                    for oy in rows.clone() {
                        let iy = g.in_index(oy, ky);
                        let go_row = &go_m[oy * g.out_w..(oy + 1) * g.out_w];
                        let gi_row = &mut gi_n[iy * g.in_w..(iy + 1) * g.in_w];
                        for ox in cols.clone() {
                            gi_row[g.in_index(ox, kx)] += w * go_row[ox];
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Adds `∂L/∂kernels` into `grad_kernels` given the forward input and `∂L/∂output`.
pub fn conv2d_backward_kernels(
    input: &Tensor,
    grad_output: &Tensor,
    stride: usize,
    pad: usize,
    grad_kernels: &mut Tensor,
) -> Result<()> {
    let g = Geometry::new(input.shape(), grad_kernels, stride, pad)?;
    if grad_output.shape() != [g.out_maps, g.out_h, g.out_w] {
        return Err(Error::shape(format!(
            "output gradient is {:?}, expected {:?}",
            grad_output.shape(),
            [g.out_maps, g.out_h, g.out_w]
        )));
    }
    let x = input.data();
    let go = grad_output.data();
    let gk = grad_kernels.data_mut();
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    for m in 0..g.out_maps {
        let go_m = &go[m * out_plane..(m + 1) * out_plane];
        for n in 0..g.in_maps {
            let in_n = &x[n * in_plane..(n + 1) * in_plane];
            for ky in 0..g.kh {
                let rows = g.valid(ky, g.in_h, g.out_h);
                for kx in 0..g.kw {
                    let cols = g.valid(kx, g.in_w, g.out_w);
                    let mut acc = 0.0;
                    for oy in rows.clone() {
                        let iy = g.in_index(oy, ky);
                        let go_row = &go_m[oy * g.out_w..(oy + 1) * g.out_w];
                        let in_row = &in_n[iy * g.in_w..(iy + 1) * g.in_w];
                        for ox in cols.clone() {
                            acc += go_row[ox] * in_row[g.in_index(ox, kx)];
                        }
                    }
                    gk[((m * g.in_maps + n) * g.kh + ky) * g.kw + kx] += acc;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;
    use proptest::prelude::*;

    /// Five nested loops straight off the definition, zero padding by bounds test.
    fn naive_conv(input: &Tensor, k: &Tensor, bias: &Tensor, s: usize, p: usize) -> Tensor {
        let (n_in, h, w) = input.dims3().unwrap();
        let [m_out, _, kh, kw] = *k.shape() else {
            unreachable!()
        };
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (w + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(&[m_out, oh, ow]);
        for m in 0..m_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[m];
                    for n in 0..n_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += k.data()[((m * n_in + n) * kh + ky) * kw + kx]
                                    * input.data()[(n * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out.data_mut()[(m * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let input = Tensor::from_vec(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let out = conv2d(&input, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn constant_field_sums_window() {
        let input = Tensor::full(&[1, 4, 4], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&input, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = SeededRng::new(11);
        let input = random(&mut rng, &[2, 5, 5]);
        let k = random(&mut rng, &[3, 2, 3, 3]);
        let b = random(&mut rng, &[3]);
        for (s, p) in [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)] {
            let fast = conv2d(&input, &k, &b, s, p).unwrap();
            let slow = naive_conv(&input, &k, &b, s, p);
            assert!(fast.max_abs_diff(&slow) <= 1e-12, "stride {s} pad {p}");
        }
    }

    #[test]
    fn rejects_map_mismatch() {
        let err = conv2d(
            &Tensor::zeros(&[2, 4, 4]),
            &Tensor::zeros(&[1, 3, 3, 3]),
            &Tensor::zeros(&[1]),
            1,
            0,
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn rejects_oversized_kernel() {
        let err = conv2d(
            &Tensor::zeros(&[1, 2, 2]),
            &Tensor::zeros(&[1, 1, 3, 3]),
            &Tensor::zeros(&[1]),
            1,
            0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn backward_passes_are_adjoint_to_forward() {
        // <conv(x), g> = <x, convᵀ(g)> and = <k, ∂/∂k>.
        let mut rng = SeededRng::new(5);
        for (s, p) in [(1, 0), (1, 1), (2, 1), (3, 0)] {
            let x = random(&mut rng, &[2, 7, 6]);
            let k = random(&mut rng, &[3, 2, 3, 2]);
            let y = conv2d(&x, &k, &Tensor::zeros(&[3]), s, p).unwrap();
            let g = random(&mut rng, y.shape());
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();

            let mut gx = Tensor::zeros(x.shape());
            conv2d_backward_input(&g, &k, s, p, &mut gx).unwrap();
            let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);

            let mut gk = Tensor::zeros(k.shape());
            conv2d_backward_kernels(&x, &g, s, p, &mut gk).unwrap();
            let rhs: f64 = k.data().iter().zip(gk.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn output_extent_closed_form(
            h in 1usize..12, w in 1usize..12, kh in 1usize..5, kw in 1usize..5,
            s in 1usize..4, p in 0usize..3,
        ) {
            let fits = kh <= h + 2 * p && kw <= w + 2 * p;
            let out = conv2d(
                &Tensor::zeros(&[1, h, w]),
                &Tensor::zeros(&[2, 1, kh, kw]),
                &Tensor::zeros(&[2]),
                s,
                p,
            );
            prop_assert_eq!(out.is_ok(), fits);
            if let Ok(out) = out {
                prop_assert_eq!(
                    out.shape(),
                    &[2, (h + 2 * p - kh) / s + 1, (w + 2 * p - kw) / s + 1]
                );
            }
        }

        #[test]
        fn convolution_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = SeededRng::new(seed);
            let x = random(&mut rng, &[2, 6, 5]);
            let y = random(&mut rng, &[2, 6, 5]);
            let k = random(&mut rng, &[2, 2, 3, 3]);
            let zero = Tensor::zeros(&[2]);
            let mut mix = x.clone();
            mix.scale(a);
            mix.add_scaled(&y, b).unwrap();
            let lhs = conv2d(&mix, &k, &zero, 1, 1).unwrap();
            let mut rhs = conv2d(&x, &k, &zero, 1, 1).unwrap();
            rhs.scale(a);
            rhs.add_scaled(&conv2d(&y, &k, &zero, 1, 1).unwrap(), b).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
        }
    }
}
