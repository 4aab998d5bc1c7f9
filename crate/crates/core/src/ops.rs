//! Raw numeric kernels shared by the ground-truth operators and the
//! gradient engine: reflect-padded convolutions, pooling, and the
//! blockwise DCT.
//!
//! All convolutions here are cross-correlations centred on each output
//! pixel with "same" output size and reflect padding (`dcb|abcd|cba`).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reflect an out-of-range index back into `0..n` (edge sample not repeated).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn check_pad(k: usize, h: usize, w: usize) -> Result<usize> {
    if k % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd, got {k}"
        )));
    }
    let pad = k / 2;
    if pad >= h || pad >= w {
        return Err(Error::InvalidArgument(format!(
            "kernel {k}x{k} larger than image {h}x{w} allows for reflect padding"
        )));
    }
    Ok(pad)
}

/// Reflect-pads every channel of a `(C, H, W)` buffer by `pad` pixels.
fn pad_reflect(x: &[f64], c: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ph * pw..(ch + 1) * ph * pw];
        for py in 0..ph {
            let sy = reflect(py as isize - pad as isize, h);
            for px in 0..pw {
                let sx = reflect(px as isize - pad as isize, w);
                dst[py * pw + px] = src[sy * w + sx];
            }
        }
    }
    out
}

/// Adjoint of [`pad_reflect`]: folds padded gradients back onto the source.
fn unpad_reflect_add(gp: &[f64], c: usize, h: usize, w: usize, pad: usize, out: &mut [f64]) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    for ch in 0..c {
        let src = &gp[ch * ph * pw..(ch + 1) * ph * pw];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for py in 0..ph {
            let sy = reflect(py as isize - pad as isize, h);
            for px in 0..pw {
                let sx = reflect(px as isize - pad as isize, w);
                dst[sy * w + sx] += src[py * pw + px];
            }
        }
    }
}

/// Square kernel size of a `(k, k)` tensor.
pub fn kernel_size(kernel: &Tensor) -> Result<usize> {
    match kernel.shape() {
        [a, b] if a == b => Ok(*a),
        s => Err(Error::InvalidArgument(format!(
            "kernel must be square (k, k), got {s:?}"
        ))),
    }
}

/// Applies one `(k, k)` kernel to every channel independently.
pub fn blur(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let k = kernel_size(kernel)?;
    let pad = check_pad(k, h, w)?;
    let pw = w + 2 * pad;
    let ph = h + 2 * pad;
    let xp = pad_reflect(x.data(), c, h, w, pad);
    let kd = kernel.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &xp[ch * ph * pw..(ch + 1) * ph * pw];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let wv = kd[ky * k + kx];
                if wv == 0.0 {
                    continue;
                }
                for y in 0..h {
                    let row = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                    let o = &mut dst[y * w..(y + 1) * w];
                    for (a, b) in o.iter_mut().zip(row) {
                        *a += wv * b;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Vector-Jacobian product of [`blur`]: returns `(d input, d kernel)`.
pub fn blur_vjp(x: &Tensor, kernel: &Tensor, gout: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = x.dims3()?;
    let k = kernel_size(kernel)?;
    let pad = check_pad(k, h, w)?;
    gout.ensure_shape(x.shape())?;
    let pw = w + 2 * pad;
    let ph = h + 2 * pad;
    let xp = pad_reflect(x.data(), c, h, w, pad);
    let kd = kernel.data();
    let g = gout.data();
    let mut gk = vec![0.0; k * k];
    let mut gxp = vec![0.0; c * ph * pw];
    for ch in 0..c {
        let src = &xp[ch * ph * pw..(ch + 1) * ph * pw];
        let gsrc = &mut gxp[ch * ph * pw..(ch + 1) * ph * pw];
        let gplane = &g[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let wv = kd[ky * k + kx];
                let mut acc = 0.0;
                for y in 0..h {
                    let off = (y + ky) * pw + kx;
                    let grow = &gplane[y * w..(y + 1) * w];
                    let row = &src[off..off + w];
                    acc += row.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                    let gr = &mut gsrc[off..off + w];
                    for (a, b) in gr.iter_mut().zip(grow) {
                        *a += wv * b;
                    }
                }
                gk[ky * k + kx] += acc;
            }
        }
    }
    let mut gx = vec![0.0; c * h * w];
    unpad_reflect_add(&gxp, c, h, w, pad, &mut gx);
    Ok((
        Tensor::new(vec![c, h, w], gx)?,
        Tensor::new(vec![k, k], gk)?,
    ))
}

/// Dense multi-channel convolution. `weight` is `(Cout, Cin, k, k)`,
/// `bias` is `(Cout)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (cin, h, w) = x.dims3()?;
    let (cout, wcin, k) = conv_weight_dims(weight)?;
    if wcin != cin {
        return Err(Error::shape(&[cout, cin, k, k], weight.shape()));
    }
    bias.ensure_shape(&[cout])?;
    let pad = check_pad(k, h, w)?;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let xp = if pad > 0 {
        pad_reflect(x.data(), cin, h, w, pad)
    } else {
        x.data().to_vec()
    };
    let wd = weight.data();
    let mut out = vec![0.0; cout * h * w];
    for co in 0..cout {
        let dst = &mut out[co * h * w..(co + 1) * h * w];
        dst.fill(bias.data()[co]);
        for ci in 0..cin {
            let src = &xp[ci * ph * pw..(ci + 1) * ph * pw];
            let wbase = (co * cin + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[wbase + ky * k + kx];
                    for y in 0..h {
                        let off = (y + ky) * pw + kx;
                        let row = &src[off..off + w];
                        let o = &mut dst[y * w..(y + 1) * w];
                        for (a, b) in o.iter_mut().zip(row) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, h, w], out)
}

fn conv_weight_dims(weight: &Tensor) -> Result<(usize, usize, usize)> {
    match weight.shape() {
        [co, ci, a, b] if a == b => Ok((*co, *ci, *a)),
        s => Err(Error::InvalidArgument(format!(
            "conv weight must be (Cout, Cin, k, k), got {s:?}"
        ))),
    }
}

/// Vector-Jacobian product of [`conv2d`]: `(d input, d weight, d bias)`.
pub fn conv2d_vjp(
    x: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (cin, h, w) = x.dims3()?;
    let (cout, _, k) = conv_weight_dims(weight)?;
    gout.ensure_shape(&[cout, h, w])?;
    let pad = check_pad(k, h, w)?;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let xp = if pad > 0 {
        pad_reflect(x.data(), cin, h, w, pad)
    } else {
        x.data().to_vec()
    };
    let wd = weight.data();
    let g = gout.data();
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; cout];
    let mut gxp = vec![0.0; cin * ph * pw];
    for co in 0..cout {
        let gplane = &g[co * h * w..(co + 1) * h * w];
        gb[co] = gplane.iter().sum();
        for ci in 0..cin {
            let src = &xp[ci * ph * pw..(ci + 1) * ph * pw];
            let gsrc = &mut gxp[ci * ph * pw..(ci + 1) * ph * pw];
            let wbase = (co * cin + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[wbase + ky * k + kx];
                    let mut acc = 0.0;
                    for y in 0..h {
                        let off = (y + ky) * pw + kx;
                        let grow = &gplane[y * w..(y + 1) * w];
                        let row = &src[off..off + w];
                        let gr = &mut gsrc[off..off + w];
                        for ((a, b), gg) in row.iter().zip(grow).zip(gr.iter_mut()) {
                            acc += a * b;
                            *gg += wv * b;
                        }
                    }
                    gw[wbase + ky * k + kx] += acc;
                }
            }
        }
    }
    let gx = if pad > 0 {
        let mut gx = vec![0.0; cin * h * w];
        unpad_reflect_add(&gxp, cin, h, w, pad, &mut gx);
        gx
    } else {
        gxp
    };
    Ok((
        Tensor::new(vec![cin, h, w], gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        Tensor::new(vec![cout], gb)?,
    ))
}

/// 2x2 average pooling; `H` and `W` must be even.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "avg_pool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let b = ch * h * w + 2 * y * w + 2 * xx;
                out[ch * oh * ow + y * ow + xx] = 0.25 * (d[b] + d[b + 1] + d[b + w] + d[b + w + 1]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Adjoint of [`avg_pool2`].
pub fn avg_pool2_vjp(in_shape: &[usize], gout: &Tensor) -> Result<Tensor> {
    let (c, oh, ow) = gout.dims3()?;
    let (h, w) = (2 * oh, 2 * ow);
    let mut gx = Tensor::zeros(in_shape);
    gx.ensure_shape(&[c, h, w])?;
    let g = gout.data();
    let d = gx.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let v = 0.25 * g[ch * oh * ow + y * ow + xx];
                let b = ch * h * w + 2 * y * w + 2 * xx;
                d[b] += v;
                d[b + 1] += v;
                d[b + w] += v;
                d[b + w + 1] += v;
            }
        }
    }
    Ok(gx)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = (2 * h, 2 * w);
    let d = x.data();
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let ch = i / (oh * ow);
        let r = i % (oh * ow);
        let (y, xx) = (r / ow, r % ow);
        d[ch * h * w + (y / 2) * w + xx / 2]
    }))
}

/// Adjoint of [`upsample2`].
pub fn upsample2_vjp(gout: &Tensor) -> Result<Tensor> {
    let (c, oh, ow) = gout.dims3()?;
    let (h, w) = (oh / 2, ow / 2);
    let g = gout.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[ch * h * w + (y / 2) * w + xx / 2] += g[ch * oh * ow + y * ow + xx];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Box-average downsampling by an integer factor.
pub fn downsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "downsample factor {factor} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let d = x.data();
    let norm = 1.0 / (factor * factor) as f64;
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let ch = i / (oh * ow);
        let r = i % (oh * ow);
        let (y, xx) = (r / ow, r % ow);
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += d[ch * h * w + (y * factor + dy) * w + xx * factor + dx];
            }
        }
        s * norm
    }))
}

pub const DCT_BLOCK: usize = 8;

/// Orthonormal 8-point DCT-II basis, `basis[u * 8 + x]`.
pub fn dct_basis() -> [f64; 64] {
    let mut b = [0.0; 64];
    let n = DCT_BLOCK as f64;
    for u in 0..DCT_BLOCK {
        let a = if u == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for x in 0..DCT_BLOCK {
            b[u * DCT_BLOCK + x] =
                a * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / (2.0 * n)).cos();
        }
    }
    b
}

/// Forward 2-D DCT of one 8x8 block (row-major).
pub fn dct8x8(block: &[f64; 64], basis: &[f64; 64]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    // rows: tmp[y][u] = sum_x B[u][x] * blk[y][x]
    for y in 0..8 {
        for u in 0..8 {
            let mut s = 0.0;
            for x in 0..8 {
                s += basis[u * 8 + x] * block[y * 8 + x];
            }
            tmp[y * 8 + u] = s;
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            let mut s = 0.0;
            for y in 0..8 {
                s += basis[v * 8 + y] * tmp[y * 8 + u];
            }
            out[v * 8 + u] = s;
        }
    }
    out
}

/// Inverse of [`dct8x8`].
pub fn idct8x8(coef: &[f64; 64], basis: &[f64; 64]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            let mut s = 0.0;
            for v in 0..8 {
                s += basis[v * 8 + y] * coef[v * 8 + u];
            }
            tmp[y * 8 + u] = s;
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            let mut s = 0.0;
            for u in 0..8 {
                s += basis[u * 8 + x] * tmp[y * 8 + u];
            }
            out[y * 8 + x] = s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct per-pixel evaluation, independent of the row-sliced loops.
    fn blur_naive(x: &Tensor, k: &Tensor) -> Tensor {
        let (c, h, w) = x.dims3().unwrap();
        let ks = k.shape()[0];
        let r = (ks / 2) as isize;
        Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / (h * w);
            let y = ((i % (h * w)) / w) as isize;
            let xx = (i % w) as isize;
            let mut s = 0.0;
            for a in 0..ks as isize {
                for b in 0..ks as isize {
                    let sy = reflect(y + a - r, h);
                    let sx = reflect(xx + b - r, w);
                    s += k.data()[(a * ks as isize + b) as usize] * x.data()[ch * h * w + sy * w + sx];
                }
            }
            s
        })
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
    }

    #[test]
    fn blur_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 7, 6], &mut rng);
        let k = Tensor::randn(&[5, 5], &mut rng);
        let a = blur(&x, &k).unwrap();
        let b = blur_naive(&x, &k);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_vjp_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 8, 9], &mut rng);
        let k = Tensor::randn(&[3, 3], &mut rng);
        let u = Tensor::randn(&[2, 8, 9], &mut rng);
        let (gx, gk) = blur_vjp(&x, &k, &u).unwrap();
        // <blur(x, k), u> is bilinear, so it equals <x, gx> and <k, gk>.
        let lhs = blur(&x, &k).unwrap().dot(&u).unwrap();
        assert!((lhs - x.dot(&gx).unwrap()).abs() < 1e-9);
        assert!((lhs - k.dot(&gk).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn conv2d_with_diagonal_weight_matches_blur() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 6, 6], &mut rng);
        let k = Tensor::randn(&[3, 3], &mut rng);
        let mut w = Tensor::zeros(&[2, 2, 3, 3]);
        for c in 0..2 {
            let base = (c * 2 + c) * 9;
            w.data_mut()[base..base + 9].copy_from_slice(k.data());
        }
        let a = conv2d(&x, &w, &Tensor::zeros(&[2])).unwrap();
        let b = blur(&x, &k).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_vjp_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[3, 6, 8], &mut rng);
        let w = Tensor::randn(&[2, 3, 3, 3], &mut rng);
        let b = Tensor::randn(&[2], &mut rng);
        let u = Tensor::randn(&[2, 6, 8], &mut rng);
        let (gx, gw, gb) = conv2d_vjp(&x, &w, &u).unwrap();
        let y0 = conv2d(&x, &w, &Tensor::zeros(&[2])).unwrap().dot(&u).unwrap();
        assert!((y0 - x.dot(&gx).unwrap()).abs() < 1e-9);
        assert!((y0 - w.dot(&gw).unwrap()).abs() < 1e-9);
        let yb = conv2d(&Tensor::zeros(&[3, 6, 8]), &w, &b).unwrap().dot(&u).unwrap();
        assert!((yb - b.dot(&gb).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[2, 4, 6], &mut rng);
        let u = Tensor::randn(&[2, 2, 3], &mut rng);
        let lhs = avg_pool2(&x).unwrap().dot(&u).unwrap();
        let rhs = x.dot(&avg_pool2_vjp(x.shape(), &u).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
        let v = Tensor::randn(&[2, 8, 12], &mut rng);
        let lhs = upsample2(&x).unwrap().dot(&v).unwrap();
        let rhs = x.dot(&upsample2_vjp(&v).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn dct_round_trip_and_orthonormality() {
        let basis = dct_basis();
        let mut blk = [0.0; 64];
        for (i, b) in blk.iter_mut().enumerate() {
            *b = ((i * 37) % 11) as f64 - 5.0;
        }
        let c = dct8x8(&blk, &basis);
        let back = idct8x8(&c, &basis);
        for (a, b) in blk.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let e_in: f64 = blk.iter().map(|v| v * v).sum();
        let e_out: f64 = c.iter().map(|v| v * v).sum();
        assert!((e_in - e_out).abs() < 1e-9);
    }

    #[test]
    fn oversize_kernel_rejected() {
        let x = Tensor::zeros(&[1, 4, 4]);
        assert!(blur(&x, &Tensor::zeros(&[9, 9])).is_err());
        assert!(blur(&x, &Tensor::zeros(&[2, 2])).is_err());
    }
}
