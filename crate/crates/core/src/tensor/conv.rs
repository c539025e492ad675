//! im2col / col2im lowering used by the convolution op.

use super::Real;

pub(crate) fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Valid output-column range `[lo, hi)` whose input column `ox*stride + k - pad`
/// lies inside `[0, len)`.
#[inline]
fn valid_range(len: usize, k: usize, stride: usize, pad: usize, out: usize) -> (usize, usize) {
    // ox*stride + k >= pad  and  ox*stride + k - pad < len
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad <= k {
        0
    } else {
        ((len + pad - k - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Fills `cols` (`[cin*kh*kw, ho*wo]`) from one image `x` (`[cin, h, w]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<R: Real>(
    x: &[R],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [R],
) {
    let plane = ho * wo;
    for ci in 0..cin {
        let img = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            let (ylo, yhi) = valid_range(h, ki, stride, pad, ho);
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (xlo, xhi) = valid_range(w, kj, stride, pad, wo);
                for oy in 0..ho {
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if oy < ylo || oy >= yhi || xlo >= xhi {
                        line.fill(R::zero());
                        continue;
                    }
                    let iy = oy * stride + ki - pad;
                    let src = &img[iy * w..(iy + 1) * w];
                    line[..xlo].fill(R::zero());
                    line[xhi..].fill(R::zero());
                    if stride == 1 {
                        let ix0 = xlo + kj - pad;
                        line[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for (ox, v) in line.iter_mut().enumerate().take(xhi).skip(xlo) {
                            *v = src[ox * stride + kj - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back into `x`, overwriting it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<R: Real>(
    cols: &[R],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [R],
) {
    x.fill(R::zero());
    let plane = ho * wo;
    for ci in 0..cin {
        let img = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            let (ylo, yhi) = valid_range(h, ki, stride, pad, ho);
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (xlo, xhi) = valid_range(w, kj, stride, pad, wo);
                if xlo >= xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * stride + ki - pad;
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut img[iy * w..(iy + 1) * w];
                    if stride == 1 {
                        let ix0 = xlo + kj - pad;
                        for (d, &v) in dst[ix0..ix0 + (xhi - xlo)].iter_mut().zip(&line[xlo..xhi]) {
                            *d += v;
                        }
                    } else {
                        for ox in xlo..xhi {
                            dst[ox * stride + kj - pad] += line[ox];
                        }
                    }
                }
            }
        }
    }
}
