//! Spatial operators of the weight-prediction network.

use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Average pooling with window and stride `s`. Windows at the far edge may be
/// partial and average only the pixels they cover.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let [n, h, w, c] = x.dims4("avg_pool input")?;
    if s == 0 {
        return Err(config_err!("pool window must be positive"));
    }
    if s == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
    let mut out = Tensor::zeros(&[n, oh, ow, c]);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let src = &x.data()[((b * h + i) * w + j) * c..((b * h + i) * w + j + 1) * c];
                let o = ((b * oh + i / s) * ow + j / s) * c;
                for (d, &v) in out.data_mut()[o..o + c].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
    }
    for b in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let count = (s.min(h - oi * s) * s.min(w - oj * s)) as f64;
                let inv = T::cast(1.0 / count);
                let o = ((b * oh + oi) * ow + oj) * c;
                out.data_mut()[o..o + c].iter_mut().for_each(|v| *v *= inv);
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward<T: Scalar>(input_shape: &[usize], s: usize, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    if s == 1 {
        grad_out.expect_shape(input_shape, "avg_pool grad_out")?;
        return Ok(grad_out.clone());
    }
    let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
    grad_out.expect_shape(&[n, oh, ow, c], "avg_pool grad_out")?;
    Ok(Tensor::from_fn(input_shape, |idx| {
        let (b, i, j, ch) = (idx / (h * w * c), (idx / (w * c)) % h, (idx / c) % w, idx % c);
        let (oi, oj) = (i / s, j / s);
        let count = (s.min(h - oi * s) * s.min(w - oj * s)) as f64;
        grad_out.data()[((b * oh + oi) * ow + oj) * c + ch] * T::cast(1.0 / count)
    }))
}

/// Depthwise 3×3 convolution with the given dilation and zero padding.
/// `filters` is `3×3×C`, `bias` is `C`.
pub fn depthwise_conv<T: Scalar>(
    x: &Tensor<T>,
    filters: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let [n, h, w, c] = x.dims4("depthwise input")?;
    filters.expect_shape(&[3, 3, c], "depthwise filters")?;
    bias.expect_shape(&[c], "depthwise bias")?;
    let mut out = Tensor::from_fn(&[n, h, w, c], |i| bias.data()[i % c]);
    for_each_tap(n, h, w, dilation, |dst, src, tap| {
        let f = &filters.data()[tap * c..(tap + 1) * c];
        for ch in 0..c {
            out.data_mut()[dst * c + ch] += f[ch] * x.data()[src * c + ch];
        }
    });
    Ok(out)
}

/// Returns `(grad_input, grad_filters, grad_bias)`.
pub fn depthwise_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    filters: &Tensor<T>,
    dilation: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, h, w, c] = x.dims4("depthwise input")?;
    grad_out.expect_shape(x.shape(), "depthwise grad_out")?;
    let mut gi = Tensor::zeros(x.shape());
    let mut gf = Tensor::zeros(&[3, 3, c]);
    let mut gb = Tensor::zeros(&[c]);
    for px in grad_out.data().chunks_exact(c) {
        for (g, &v) in gb.data_mut().iter_mut().zip(px) {
            *g += v;
        }
    }
    for_each_tap(n, h, w, dilation, |dst, src, tap| {
        for ch in 0..c {
            let g = grad_out.data()[dst * c + ch];
            gf.data_mut()[tap * c + ch] += g * x.data()[src * c + ch];
            gi.data_mut()[src * c + ch] += g * filters.data()[tap * c + ch];
        }
    });
    Ok((gi, gf, gb))
}

/// Calls `f(dst_pixel, src_pixel, tap)` for every in-bounds tap of a dilated 3×3 stencil.
fn for_each_tap(n: usize, h: usize, w: usize, d: usize, mut f: impl FnMut(usize, usize, usize)) {
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for ti in 0..3 {
                    let r = i as isize + (ti as isize - 1) * d as isize;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    for tj in 0..3 {
                        let cc = j as isize + (tj as isize - 1) * d as isize;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        f((b * h + i) * w + j, (b * h + r as usize) * w + cc as usize, ti * 3 + tj);
                    }
                }
            }
        }
    }
}

/// Source index pair and blend factor for one output coordinate (align-corners false).
fn taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to `th×tw` with half-pixel centres and edge clamping.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, th: usize, tw: usize) -> Result<Tensor<T>> {
    let [n, h, w, c] = x.dims4("resize input")?;
    if th == 0 || tw == 0 {
        return Err(config_err!("resize target must be positive, got {}x{}", th, tw));
    }
    if h == 0 || w == 0 {
        return Err(shape_err!("cannot resize an empty {}x{} map", h, w));
    }
    if (h, w) == (th, tw) {
        return Ok(x.clone());
    }
    let (rt, ct) = (taps(th, h), taps(tw, w));
    let mut out = Tensor::zeros(&[n, th, tw, c]);
    let at = |b: usize, i: usize, j: usize| ((b * h + i) * w + j) * c;
    for b in 0..n {
        for (oi, &(r0, r1, ly)) in rt.iter().enumerate() {
            let ly = T::cast(ly);
            for (oj, &(c0, c1, lx)) in ct.iter().enumerate() {
                let lx = T::cast(lx);
                let o = ((b * th + oi) * tw + oj) * c;
                for ch in 0..c {
                    let v00 = x.data()[at(b, r0, c0) + ch];
                    let v01 = x.data()[at(b, r0, c1) + ch];
                    let v10 = x.data()[at(b, r1, c0) + ch];
                    let v11 = x.data()[at(b, r1, c1) + ch];
                    let top = v00 + (v01 - v00) * lx;
                    let bot = v10 + (v11 - v10) * lx;
                    out.data_mut()[o + ch] = top + (bot - top) * ly;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`].
pub fn bilinear_resize_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let [gn, th, tw, gc] = grad_out.dims4("resize grad_out")?;
    if (gn, gc) != (n, c) {
        return Err(shape_err!("resize grad_out {:?} for input {:?}", grad_out.shape(), input_shape));
    }
    if (h, w) == (th, tw) {
        return Ok(grad_out.clone());
    }
    let (rt, ct) = (taps(th, h), taps(tw, w));
    let mut gi = Tensor::zeros(input_shape);
    let at = |b: usize, i: usize, j: usize| ((b * h + i) * w + j) * c;
    for b in 0..n {
        for (oi, &(r0, r1, ly)) in rt.iter().enumerate() {
            for (oj, &(c0, c1, lx)) in ct.iter().enumerate() {
                let o = ((b * th + oi) * tw + oj) * c;
                let wts = [
                    (at(b, r0, c0), (1.0 - ly) * (1.0 - lx)),
                    (at(b, r0, c1), (1.0 - ly) * lx),
                    (at(b, r1, c0), ly * (1.0 - lx)),
                    (at(b, r1, c1), ly * lx),
                ];
                for (base, wt) in wts {
                    let wt = T::cast(wt);
                    for ch in 0..c {
                        gi.data_mut()[base + ch] += wt * grad_out.data()[o + ch];
                    }
                }
            }
        }
    }
    Ok(gi)
}
