//! Convolution and transposed convolution on NCHW buffers.
//!
//! Both directions lower to im2col/col2im plus a GEMM. The transposed
//! convolution with parameters (k, s, p) is exactly the input-gradient map of
//! the convolution with the same parameters, so the two share their index
//! arithmetic; the adjointness test in the property suite pins this down.
//!
//! Work is parallelized over images:每 image's column buffer and output
//! slice are private, so results are bit-identical for any thread count.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{Element, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;

/// floor((h + 2p - k)/s) + 1, validating the preconditions.
pub fn conv_out_dim(h: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if s < 1 {
        return Err(Error::Dim(format!("stride must be >= 1, got {s}")));
    }
    if h + 2 * p < k {
        return Err(Error::Dim(format!(
            "kernel {k} larger than padded input {h}+2*{p}"
        )));
    }
    Ok((h + 2 * p - k) / s + 1)
}

/// (h - 1)*s - 2p + k, validating positivity.
pub fn convt_out_dim(h: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if s < 1 {
        return Err(Error::Dim(format!("stride must be >= 1, got {s}")));
    }
    let raw = (h - 1) * s + k;
    if raw <= 2 * p {
        return Err(Error::Dim(format!(
            "transposed conv output size ({h}-1)*{s} - 2*{p} + {k} is not positive"
        )));
    }
    Ok(raw - 2 * p)
}

struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

/// Gather one image into columns: cols[(c*k*k + ki*k + kj), (oh*ow_len + ow)].
fn im2col<E: Element>(img: &[E], g: &Geom, cols: &mut [E]) {
    let l = g.oh * g.ow;
    debug_assert_eq!(img.len(), g.c * g.h * g.w);
    debug_assert_eq!(cols.len(), g.c * g.k * g.k * l);
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &mut cols[((c * g.k + ki) * g.k + kj) * l..][..l];
                for oh in 0..g.oh {
                    let ih = (oh * g.s + ki) as isize - g.p as isize;
                    let dst = &mut row[oh * g.ow..(oh + 1) * g.ow];
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(E::ZERO);
                        continue;
                    }
                    let src_row = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    if g.s == 1 {
                        // iw = ow - p + kj; contiguous copy over the valid span
                        let shift = kj as isize - g.p as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((g.w as isize - shift).min(g.ow as isize)).max(0) as usize;
                        dst[..lo].fill(E::ZERO);
                        dst[hi..].fill(E::ZERO);
                        if hi > lo {
                            let src0 = (lo as isize + shift) as usize;
                            dst[lo..hi].copy_from_slice(&src_row[src0..src0 + (hi - lo)]);
                        }
                    } else {
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * g.s + kj) as isize - g.p as isize;
                            *d = if iw >= 0 && iw < g.w as isize {
                                src_row[iw as usize]
                            } else {
                                E::ZERO
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into one image; exact adjoint of [`im2col`].
fn col2im<E: Element>(cols: &[E], g: &Geom, img: &mut [E]) {
    let l = g.oh * g.ow;
    debug_assert_eq!(img.len(), g.c * g.h * g.w);
    debug_assert_eq!(cols.len(), g.c * g.k * g.k * l);
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &cols[((c * g.k + ki) * g.k + kj) * l..][..l];
                for oh in 0..g.oh {
                    let ih = (oh * g.s + ki) as isize - g.p as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let src = &row[oh * g.ow..(oh + 1) * g.ow];
                    if g.s == 1 {
                        let shift = kj as isize - g.p as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((g.w as isize - shift).min(g.ow as isize)).max(0) as usize;
                        for ow in lo..hi {
                            dst_row[(ow as isize + shift) as usize] += src[ow];
                        }
                    } else {
                        for (ow, &v) in src.iter().enumerate() {
                            let iw = (ow * g.s + kj) as isize - g.p as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst_row[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    transposed: bool,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let [n, cin, h, hw] = x.dims4()?;
    let ws = w.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::Dim(format!("kernel must be [*, *, k, k], got {ws:?}")));
    }
    let (w_cin, cout) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
    if w_cin != cin {
        return Err(Error::Dim(format!(
            "input channels {cin} (input shape {:?}) do not match kernel channels {w_cin} (kernel shape {ws:?})",
            x.shape()
        )));
    }
    Ok((n, cin, h, hw, cout, ws[2]))
}

/// conv2d: x[N,Cin,H,W] * w[Cout,Cin,K,K] (+ bias[Cout]) -> [N,Cout,H',W'].
pub fn conv2d_fwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&[E]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (n, cin, h, wd, cout, k) = check_conv_shapes(x, w, false)?;
    let oh = conv_out_dim(h, k, stride, pad)?;
    let ow = conv_out_dim(wd, k, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::Dim(format!("bias len {} != out channels {cout}", b.len())));
        }
    }
    let g = Geom { c: cin, h, w: wd, k, s: stride, p: pad, oh, ow };
    let ckk = cin * k * k;
    let l = oh * ow;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let in_img = cin * h * wd;
    let out_img = cout * l;
    let x_data = x.data();
    let w_data = w.data();

    out.data_mut().par_chunks_mut(out_img).enumerate().for_each(|(img, out_slice)| {
        let mut cols = vec![E::ZERO; ckk * l];
        im2col(&x_data[img * in_img..(img + 1) * in_img], &g, &mut cols);
        gemm_nn(cout, ckk, l, w_data, &cols, out_slice, false);
        if let Some(b) = bias {
            for co in 0..cout {
                let bv = b[co];
                for v in &mut out_slice[co * l..(co + 1) * l] {
                    *v += bv;
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of conv2d. Returns (dx, dw, db); dx/dw only when requested.
pub fn conv2d_bwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dout: &Tensor<E>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<E>>, Option<Tensor<E>>, Vec<E>)> {
    let (n, cin, h, wd, cout, k) = check_conv_shapes(x, w, false)?;
    let [dn, dcout, oh, ow] = dout.dims4()?;
    debug_assert!(dn == n && dcout == cout);
    let g = Geom { c: cin, h, w: wd, k, s: stride, p: pad, oh, ow };
    let ckk = cin * k * k;
    let l = oh * ow;
    let in_img = cin * h * wd;
    let out_img = cout * l;
    let x_data = x.data();
    let w_data = w.data();
    let dout_data = dout.data();

    let mut db = vec![E::ZERO; cout];
    for img in 0..n {
        for co in 0..cout {
            let mut acc = E::ZERO;
            for &v in &dout_data[img * out_img + co * l..][..l] {
                acc += v;
            }
            db[co] += acc;
        }
    }

    let dx = if need_dx {
        let mut dx = Tensor::zeros(x.shape());
        dx.data_mut().par_chunks_mut(in_img).enumerate().for_each(|(img, dx_slice)| {
            let mut dcols = vec![E::ZERO; ckk * l];
            // dcols = W^T(ckk,cout) * dOut(cout,l)
            gemm_tn(ckk, cout, l, w_data, &dout_data[img * out_img..(img + 1) * out_img], &mut dcols, false);
            col2im(&dcols, &g, dx_slice);
        });
        Some(dx)
    } else {
        None
    };

    let dw = if need_dw {
        // Per-image partials reduced in fixed image order.
        let partials: Vec<Vec<E>> = (0..n)
            .into_par_iter()
            .map(|img| {
                let mut cols = vec![E::ZERO; ckk * l];
                im2col(&x_data[img * in_img..(img + 1) * in_img], &g, &mut cols);
                let mut dw_img = vec![E::ZERO; cout * ckk];
                // dW = dOut(cout,l) * cols^T(l,ckk)
                gemm_nt(cout, l, ckk, &dout_data[img * out_img..(img + 1) * out_img], &cols, &mut dw_img, false);
                dw_img
            })
            .collect();
        let mut dw = Tensor::zeros(w.shape());
        for part in partials {
            for (d, s) in dw.data_mut().iter_mut().zip(&part) {
                *d += *s;
            }
        }
        Some(dw)
    } else {
        None
    };

    Ok((dx, dw, db))
}

/// conv_transpose2d: x[N,Cin,H,W] * w[Cin,Cout,K,K] (+ bias) -> [N,Cout,H',W'].
pub fn convt2d_fwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&[E]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (n, cin, h, wd, cout, k) = check_conv_shapes(x, w, true)?;
    let oh = convt_out_dim(h, k, stride, pad)?;
    let ow = convt_out_dim(wd, k, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::Dim(format!("bias len {} != out channels {cout}", b.len())));
        }
    }
    // Geometry of the adjoint convolution: its input is our output.
    let g = Geom { c: cout, h: oh, w: ow, k, s: stride, p: pad, oh: h, ow: wd };
    let ckk = cout * k * k;
    let l = h * wd;
    let in_img = cin * l;
    let out_img = cout * oh * ow;
    let x_data = x.data();
    let w_data = w.data();
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);

    out.data_mut().par_chunks_mut(out_img).enumerate().for_each(|(img, out_slice)| {
        let mut cols = vec![E::ZERO; ckk * l];
        // cols = W^T(ckk,cin) * x(cin,l); w viewed as (cin, ckk)
        gemm_tn(ckk, cin, l, w_data, &x_data[img * in_img..(img + 1) * in_img], &mut cols, false);
        col2im(&cols, &g, out_slice);
        if let Some(b) = bias {
            for co in 0..cout {
                let bv = b[co];
                for v in &mut out_slice[co * oh * ow..(co + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of conv_transpose2d.
pub fn convt2d_bwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dout: &Tensor<E>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<E>>, Option<Tensor<E>>, Vec<E>)> {
    let (n, cin, h, wd, cout, k) = check_conv_shapes(x, w, true)?;
    let [_, _, oh, ow] = dout.dims4()?;
    let g = Geom { c: cout, h: oh, w: ow, k, s: stride, p: pad, oh: h, ow: wd };
    let ckk = cout * k * k;
    let l = h * wd;
    let in_img = cin * l;
    let out_img = cout * oh * ow;
    let x_data = x.data();
    let w_data = w.data();
    let dout_data = dout.data();

    let mut db = vec![E::ZERO; cout];
    for img in 0..n {
        for co in 0..cout {
            let mut acc = E::ZERO;
            for &v in &dout_data[img * out_img + co * oh * ow..][..oh * ow] {
                acc += v;
            }
            db[co] += acc;
        }
    }

    let dx = if need_dx {
        let mut dx = Tensor::zeros(x.shape());
        dx.data_mut().par_chunks_mut(in_img).enumerate().for_each(|(img, dx_slice)| {
            let mut cols = vec![E::ZERO; ckk * l];
            im2col(&dout_data[img * out_img..(img + 1) * out_img], &g, &mut cols);
            // dX = W(cin,ckk) * cols(ckk,l)
            gemm_nn(cin, ckk, l, w_data, &cols, dx_slice, false);
        });
        Some(dx)
    } else {
        None
    };

    let dw = if need_dw {
        let partials: Vec<Vec<E>> = (0..n)
            .into_par_iter()
            .map(|img| {
                let mut cols = vec![E::ZERO; ckk * l];
                im2col(&dout_data[img * out_img..(img + 1) * out_img], &g, &mut cols);
                let mut dw_img = vec![E::ZERO; cin * ckk];
                // dW = x(cin,l) * cols^T(l,ckk)
                gemm_nt(cin, l, ckk, &x_data[img * in_img..(img + 1) * in_img], &cols, &mut dw_img, false);
                dw_img
            })
            .collect();
        let mut dw = Tensor::zeros(w.shape());
        for part in partials {
            for (d, s) in dw.data_mut().iter_mut().zip(&part) {
                *d += *s;
            }
        }
        Some(dw)
    } else {
        None
    };

    Ok((dx, dw, db))
}

/// Six-nested-loop reference convolution (test oracle).
pub fn conv2d_naive<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&[E]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (n, cin, h, wd, cout, k) = check_conv_shapes(x, w, false)?;
    let oh = conv_out_dim(h, k, stride, pad)?;
    let ow = conv_out_dim(wd, k, stride, pad)?;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let xd = x.data();
    let wd_ = w.data();
    let od = out.data_mut();
    for img in 0..n {
        for co in 0..cout {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(E::ZERO, |b| b[co]);
                    for ci in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ih = (y * stride + ki) as isize - pad as isize;
                                let iw = (xo * stride + kj) as isize - pad as isize;
                                if ih >= 0 && ih < h as isize && iw >= 0 && iw < wd as isize {
                                    acc += xd[((img * cin + ci) * h + ih as usize) * wd + iw as usize]
                                        * wd_[((co * cin + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    od[((img * cout + co) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Reference transposed convolution by direct scatter (test oracle).
pub fn convt2d_naive<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&[E]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (n, cin, h, wd, cout, k) = check_conv_shapes(x, w, true)?;
    let oh = convt_out_dim(h, k, stride, pad)?;
    let ow = convt_out_dim(wd, k, stride, pad)?;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let xd = x.data();
    let wdt = w.data();
    let od = out.data_mut();
    for img in 0..n {
        for ci in 0..cin {
            for ih in 0..h {
                for iw in 0..wd {
                    let v = xd[((img * cin + ci) * h + ih) * wd + iw];
                    for co in 0..cout {
                        let wk = &wdt[((ci * cout + co) * k) * k..][..k * k];
                        for ki in 0..k {
                            let y = (ih * stride + ki) as isize - pad as isize;
                            if y < 0 || y >= oh as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let xo = (iw * stride + kj) as isize - pad as isize;
                                if xo >= 0 && xo < ow as isize {
                                    od[((img * cout + co) * oh + y as usize) * ow + xo as usize] +=
                                        v * wk[ki * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        for img in 0..n {
            for co in 0..cout {
                for v in &mut od[(img * cout + co) * oh * ow..][..oh * ow] {
                    *v += b[co];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
    }

    #[test]
    fn conv_shape_examples() {
        // Conv(1, 64, 5, 1, 2) keeps 28x28
        assert_eq!(conv_out_dim(28, 5, 1, 2).unwrap(), 28);
        // Conv(64, 64, 5, 2, 0): 28 -> 12
        assert_eq!(conv_out_dim(28, 5, 2, 0).unwrap(), 12);
        // ConvT(256, 128, 4, 2, 1): 4 -> 8
        assert_eq!(convt_out_dim(4, 4, 2, 1).unwrap(), 8);
        // ConvT(64, 64, 4, 2, 3): 16 -> 28
        assert_eq!(convt_out_dim(16, 4, 2, 3).unwrap(), 28);
        assert!(conv_out_dim(3, 5, 1, 0).is_err());
        assert!(convt_out_dim(1, 2, 1, 1).is_err());
    }

    #[test]
    fn all_ones_3x3_sums_to_nine() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_fwd(&x, &w, Some(&[0.0]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = Rng::new(5);
        for &(cin, cout, h, k, s, p) in
            &[(2, 3, 5, 3, 1, 0), (1, 4, 7, 5, 2, 2), (3, 2, 6, 4, 2, 3), (2, 2, 5, 1, 1, 0)]
        {
            let x = rand_tensor(&mut rng, &[2, cin, h, h]);
            let w = rand_tensor(&mut rng, &[cout, cin, k, k]);
            let b: Vec<f32> = (0..cout).map(|_| rng.normal() as f32).collect();
            let fast = conv2d_fwd(&x, &w, Some(&b), s, p).unwrap();
            let slow = conv2d_naive(&x, &w, Some(&b), s, p).unwrap();
            assert!(fast.max_abs_diff(&slow) < 1e-5, "cfg ({cin},{cout},{h},{k},{s},{p})");
        }
    }

    #[test]
    fn convt_matches_naive() {
        let mut rng = Rng::new(6);
        for &(cin, cout, h, k, s, p) in &[(3, 2, 4, 4, 2, 1), (2, 2, 5, 5, 1, 2), (4, 3, 3, 4, 2, 3)] {
            let x = rand_tensor(&mut rng, &[2, cin, h, h]);
            let w = rand_tensor(&mut rng, &[cin, cout, k, k]);
            let b: Vec<f32> = (0..cout).map(|_| rng.normal() as f32).collect();
            let fast = convt2d_fwd(&x, &w, Some(&b), s, p).unwrap();
            let slow = convt2d_naive(&x, &w, Some(&b), s, p).unwrap();
            assert!(fast.max_abs_diff(&slow) < 1e-5, "cfg ({cin},{cout},{h},{k},{s},{p})");
        }
    }

    #[test]
    fn channel_mismatch_reports_both_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 3, 5, 5]);
        let w = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        let err = conv2d_fwd(&x, &w, None, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 5, 5]") && msg.contains("[4, 2, 3, 3]"), "{msg}");
    }

    /// <conv(u), v> == <u, conv_backward_data(v)>: the gradient map really is
    /// the adjoint, and convT shares its implementation.
    #[test]
    fn conv_adjointness() {
        let mut rng = Rng::new(7);
        for &(cin, cout, h, k, s, p) in &[(2, 3, 6, 3, 1, 1), (1, 2, 8, 4, 2, 1), (2, 2, 7, 5, 2, 3)] {
            let u = rand_tensor(&mut rng, &[1, cin, h, h]);
            let w = rand_tensor(&mut rng, &[cout, cin, k, k]);
            let cu = conv2d_fwd(&u, &w, None, s, p).unwrap();
            let v = rand_tensor(&mut rng, cu.shape());
            let (dx, _, _) = conv2d_bwd(&u, &w, &v, s, p, true, false).unwrap();
            let dx = dx.unwrap();
            let lhs: f64 =
                cu.data().iter().zip(v.data()).map(|(&a, &b)| (a as f64) * (b as f64)).sum();
            let rhs: f64 =
                u.data().iter().zip(dx.data()).map(|(&a, &b)| (a as f64) * (b as f64)).sum();
            assert!((lhs - rhs).abs() < 1e-2 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }
}
