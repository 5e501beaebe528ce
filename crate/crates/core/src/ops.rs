//! Dense CPU kernels for NCHW feature maps: dilated same-padded convolution
//! (im2col + GEMM), ReLU, 2x2 max pooling, nearest upsampling, channel
//! concatenation and the per-pixel softmax, each with its backward pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayView4, Axis, Zip};

use crate::error::{Error, Result};

/// Spatial padding that keeps H and W unchanged for an odd kernel.
fn same_padding(kernel: usize, dilation: usize) -> usize {
    dilation * (kernel - 1) / 2
}

/// Unfolds one image (C, H, W) into a (C*kh*kw, H*W) patch matrix.
///
/// Row `(c*kh + i)*kw + j` holds the input sample under kernel tap (i, j) of
/// channel c for every output pixel, which matches the row-major reshape of a
/// (c_out, c_in, kh, kw) weight into (c_out, c_in*kh*kw).
pub fn im2col(x: ArrayView3<f64>, kh: usize, kw: usize, dilation: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ph = same_padding(kh, dilation) as isize;
    let pw = same_padding(kw, dilation) as isize;
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = Array2::<f64>::zeros((c * kh * kw, h * w));
    let dst = cols.as_slice_mut().expect("fresh array");
    let hw = h * w;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for i in 0..kh {
            let dy = (i * dilation) as isize - ph;
            for j in 0..kw {
                let dx = (j * dilation) as isize - pw;
                let row = (ci * kh + i) * kw + j;
                let out = &mut dst[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let src_row = sy as usize * w;
                    let s0 = (src_row as isize + x_lo as isize + dx) as usize;
                    let len = x_hi - x_lo;
                    out[y * w + x_lo..y * w + x_hi].copy_from_slice(&plane[s0..s0 + len]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds a patch-matrix gradient back onto the image.
pub fn col2im(
    cols: ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dilation: usize,
) -> ndarray::Array3<f64> {
    let ph = same_padding(kh, dilation) as isize;
    let pw = same_padding(kw, dilation) as isize;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut img = ndarray::Array3::<f64>::zeros((c, h, w));
    let dst = img.as_slice_mut().expect("fresh array");
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for i in 0..kh {
            let dy = (i * dilation) as isize - ph;
            for j in 0..kw {
                let dx = (j * dilation) as isize - pw;
                let row = (ci * kh + i) * kw + j;
                let col = &src[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let d0 = (sy as usize * w) as isize + x_lo as isize + dx;
                    let d0 = d0 as usize;
                    let len = x_hi - x_lo;
                    for (d, s) in plane[d0..d0 + len]
                        .iter_mut()
                        .zip(&col[y * w + x_lo..y * w + x_hi])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
    img
}

fn check_conv_shapes(x: &ArrayView4<f64>, weight: &ArrayView4<f64>) -> Result<()> {
    let (_, c_in, _, _) = x.dim();
    let (_, wc_in, kh, kw) = weight.dim();
    if c_in != wc_in {
        return Err(Error::Shape(format!(
            "conv input has {c_in} channels, kernel expects {wc_in}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!(
            "same padding needs odd kernels, got {kh}x{kw}"
        )));
    }
    Ok(())
}

/// Stride-1, same-padded, dilated 2-D convolution (cross-correlation).
pub fn conv2d(
    x: ArrayView4<f64>,
    weight: ArrayView4<f64>,
    bias: Option<&Array1<f64>>,
    dilation: usize,
) -> Result<Array4<f64>> {
    check_conv_shapes(&x, &weight)?;
    let (n, _, h, w) = x.dim();
    let (c_out, c_in, kh, kw) = weight.dim();
    let wmat = weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c_out, c_in * kh * kw))
        .expect("contiguous kernel");
    let mut out = Array4::<f64>::zeros((n, c_out, h, w));
    for (b, mut out_b) in out.outer_iter_mut().enumerate() {
        let cols = im2col(x.index_axis(Axis(0), b), kh, kw, dilation);
        let mut out_mat = out_b
            .view_mut()
            .into_shape_with_order((c_out, h * w))
            .expect("contiguous output");
        general_mat_mul(1.0, &wmat, &cols, 0.0, &mut out_mat);
        if let Some(bias) = bias {
            for (mut row, &bv) in out_mat.outer_iter_mut().zip(bias.iter()) {
                row += bv;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input, kernel and bias.
#[derive(Debug)]
pub struct ConvGrads {
    pub input: Option<Array4<f64>>,
    pub weight: Option<Array4<f64>>,
    pub bias: Option<Array1<f64>>,
}

/// Backward pass of [`conv2d`]. Only the requested gradients are computed.
pub fn conv2d_backward(
    x: ArrayView4<f64>,
    weight: ArrayView4<f64>,
    grad_out: ArrayView4<f64>,
    dilation: usize,
    want_input: bool,
    want_params: bool,
) -> Result<ConvGrads> {
    check_conv_shapes(&x, &weight)?;
    let (n, _, h, w) = x.dim();
    let (c_out, c_in, kh, kw) = weight.dim();
    if grad_out.dim() != (n, c_out, h, w) {
        return Err(Error::Shape(format!(
            "conv output gradient {:?} does not match {:?}",
            grad_out.dim(),
            (n, c_out, h, w)
        )));
    }
    let wmat = weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c_out, c_in * kh * kw))
        .expect("contiguous kernel");
    let mut dw = want_params.then(|| Array2::<f64>::zeros((c_out, c_in * kh * kw)));
    let mut db = want_params.then(|| Array1::<f64>::zeros(c_out));
    let mut dx = want_input.then(|| Array4::<f64>::zeros((n, c_in, h, w)));
    if !want_input && !want_params {
        return Ok(ConvGrads {
            input: None,
            weight: None,
            bias: None,
        });
    }
    for b in 0..n {
        let gy = grad_out.index_axis(Axis(0), b);
        let gy = gy.as_standard_layout();
        let gmat = gy
            .view()
            .into_shape_with_order((c_out, h * w))
            .expect("contiguous gradient");
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            let cols = im2col(x.index_axis(Axis(0), b), kh, kw, dilation);
            general_mat_mul(1.0, &gmat, &cols.t(), 1.0, dw);
            *db += &gmat.sum_axis(Axis(1));
        }
        if let Some(dx) = dx.as_mut() {
            let mut dcols = Array2::<f64>::zeros((c_in * kh * kw, h * w));
            general_mat_mul(1.0, &wmat.t(), &gmat, 0.0, &mut dcols);
            let img = col2im(dcols.view(), c_in, h, w, kh, kw, dilation);
            dx.index_axis_mut(Axis(0), b).assign(&img);
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw.map(|m| {
            m.into_shape_with_order((c_out, c_in, kh, kw))
                .expect("kernel reshape")
        }),
        bias: db,
    })
}

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward of ReLU given its *output*.
pub fn relu_backward(out: &Array4<f64>, grad: &Array4<f64>) -> Array4<f64> {
    let mut g = grad.clone();
    Zip::from(&mut g).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    g
}

/// 2x2 max pooling with stride 2. Returns the pooled map and, per output
/// cell, the flat offset (0..4) of the winning input. Ties go to the first.
pub fn maxpool2(x: &Array4<f64>) -> Result<(Array4<f64>, Array4<u8>)> {
    let (n, c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array4::<f64>::zeros((n, c, ho, wo));
    let mut arg = Array4::<u8>::zeros((n, c, ho, wo));
    for b in 0..n {
        for ch in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0u8;
                    for k in 0..4u8 {
                        let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                        let v = x[[b, ch, 2 * y + dy, 2 * xo + dx]];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    out[[b, ch, y, xo]] = best;
                    arg[[b, ch, y, xo]] = best_k;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward(arg: &Array4<u8>, grad: &Array4<f64>) -> Array4<f64> {
    let (n, c, ho, wo) = grad.dim();
    let mut dx = Array4::<f64>::zeros((n, c, ho * 2, wo * 2));
    for ((b, ch, y, xo), &g) in grad.indexed_iter() {
        let k = arg[[b, ch, y, xo]];
        let (dy, dx_) = ((k / 2) as usize, (k % 2) as usize);
        dx[[b, ch, 2 * y + dy, 2 * xo + dx_]] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
    for ((b, ch, y, xo), v) in out.indexed_iter_mut() {
        *v = x[[b, ch, y / 2, xo / 2]];
    }
    out
}

pub fn upsample2_backward(grad: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = grad.dim();
    let mut dx = Array4::<f64>::zeros((n, c, h / 2, w / 2));
    for ((b, ch, y, xo), &g) in grad.indexed_iter() {
        dx[[b, ch, y / 2, xo / 2]] += g;
    }
    dx
}

/// Concatenates two maps along the channel axis.
pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Result<Array4<f64>> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()])
        .map_err(|e| Error::Shape(format!("channel concat: {e}")))
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(grad: &Array4<f64>, first: usize) -> (Array4<f64>, Array4<f64>) {
    (
        grad.slice(s![.., ..first, .., ..]).to_owned(),
        grad.slice(s![.., first.., .., ..]).to_owned(),
    )
}

/// Softmax over the channel axis, independently for every pixel.
pub fn softmax_channels(logits: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = logits.dim();
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut max = f64::NEG_INFINITY;
                for k in 0..c {
                    max = max.max(logits[[b, k, y, x]]);
                }
                let mut sum = 0.0;
                for k in 0..c {
                    let e = (logits[[b, k, y, x]] - max).exp();
                    out[[b, k, y, x]] = e;
                    sum += e;
                }
                for k in 0..c {
                    out[[b, k, y, x]] /= sum;
                }
            }
        }
    }
    out
}

/// Backward of [`softmax_channels`] given its output probabilities.
pub fn softmax_backward(probs: &Array4<f64>, grad: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = probs.dim();
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut dot = 0.0;
                for k in 0..c {
                    dot += probs[[b, k, y, x]] * grad[[b, k, y, x]];
                }
                for k in 0..c {
                    out[[b, k, y, x]] = probs[[b, k, y, x]] * (grad[[b, k, y, x]] - dot);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random4(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    // Direct definition of a same-padded dilated cross-correlation.
    fn conv_reference(x: &Array4<f64>, w: &Array4<f64>, d: usize) -> Array4<f64> {
        let (n, ci, h, wd) = x.dim();
        let (co, _, kh, kw) = w.dim();
        let (ph, pw) = ((d * (kh - 1) / 2) as isize, (d * (kw - 1) / 2) as isize);
        Array4::from_shape_fn((n, co, h, wd), |(b, o, y, xx)| {
            let mut acc = 0.0;
            for i in 0..ci {
                for u in 0..kh {
                    for v in 0..kw {
                        let sy = y as isize + (u * d) as isize - ph;
                        let sx = xx as isize + (v * d) as isize - pw;
                        if sy >= 0 && sx >= 0 && sy < h as isize && sx < wd as isize {
                            acc += w[[o, i, u, v]] * x[[b, i, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(d, k) in &[(1, 3), (2, 3), (4, 3), (1, 1)] {
            let x = random4((2, 3, 9, 7), &mut rng);
            let w = random4((4, 3, k, k), &mut rng);
            let got = conv2d(x.view(), w.view(), None, d).unwrap();
            let want = conv_reference(&x, &w, d);
            let err = (&got - &want).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-12, "dilation {d} kernel {k}: err {err}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> must equal <x, dx> and <w, dw> by linearity.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random4((2, 3, 8, 8), &mut rng);
        let w = random4((2, 3, 3, 3), &mut rng);
        let g = random4((2, 2, 8, 8), &mut rng);
        let y = conv2d(x.view(), w.view(), None, 2).unwrap();
        let lhs = (&y * &g).sum();
        let grads = conv2d_backward(x.view(), w.view(), g.view(), 2, true, true).unwrap();
        let via_x = (&x * grads.input.as_ref().unwrap()).sum();
        let via_w = (&w * grads.weight.as_ref().unwrap()).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
        let db = grads.bias.unwrap();
        assert!((db[0] - g.index_axis(Axis(1), 0).sum()).abs() < 1e-12);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernels() {
        let x = Array4::<f64>::zeros((1, 2, 4, 4));
        assert!(conv2d(x.view(), Array4::zeros((1, 3, 3, 3)).view(), None, 1).is_err());
        assert!(conv2d(x.view(), Array4::zeros((1, 2, 2, 2)).view(), None, 1).is_err());
    }

    #[test]
    fn pool_and_upsample_round_trip_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random4((1, 2, 4, 6), &mut rng);
        let (p, arg) = maxpool2(&x).unwrap();
        assert_eq!(p.dim(), (1, 2, 2, 3));
        let g = Array4::<f64>::ones(p.dim());
        let dx = maxpool2_backward(&arg, &g);
        assert_eq!(dx.sum(), g.sum());
        let up = upsample2(&p);
        assert_eq!(up.dim(), x.dim());
        let back = upsample2_backward(&Array4::ones(up.dim()));
        assert!(back.iter().all(|&v| v == 4.0));
        assert!(maxpool2(&Array4::zeros((1, 1, 3, 4))).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random4((2, 3, 4, 4), &mut rng) * 30.0;
        let p = softmax_channels(&z);
        for s in p.sum_axis(Axis(1)).iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
