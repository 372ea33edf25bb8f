//! Raw numeric kernels shared by the tape ops and the gradient-free
//! teacher forward pass. All tensors are dense row-major; image batches
//! are `B x C x H x W`.
//!
//! Reductions accumulate over eight independent lanes so the compiler can
//! vectorize them without reassociating floating-point math; the lane sum
//! order is fixed, keeping results bit-deterministic.

use crate::tensor::Real;

pub const LANES: usize = 8;

/// Fixed-order lane-parallel dot product.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::ZERO; LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let pa = &a[i * LANES..(i + 1) * LANES];
        let pb = &b[i * LANES..(i + 1) * LANES];
        for j in 0..LANES {
            lanes[j] = pa[j].mul_add(pb[j], lanes[j]);
        }
    }
    let mut acc = T::ZERO;
    for v in lanes {
        acc += v;
    }
    for i in chunks * LANES..a.len() {
        acc = a[i].mul_add(b[i], acc);
    }
    acc
}

/// Fixed-order lane-parallel sum.
#[inline]
pub fn sum<T: Real>(a: &[T]) -> T {
    let mut lanes = [T::ZERO; LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let pa = &a[i * LANES..(i + 1) * LANES];
        for j in 0..LANES {
            lanes[j] += pa[j];
        }
    }
    let mut acc = T::ZERO;
    for v in lanes {
        acc += v;
    }
    for i in chunks * LANES..a.len() {
        acc += a[i];
    }
    acc
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..y.len() {
        y[i] = x[i].mul_add(alpha, y[i]);
    }
}

pub fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Direct 2-D convolution. `x` is `b x cin x h x w`, `wgt` is
/// `cout x cin x kh x kw`, `out` is `b x cout x oh x ow` and is fully
/// overwritten. Zero padding. The 3x3 pad-1 and 1x1 cases take fast paths;
/// everything else falls back to the generic loop.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Real>(
    x: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[T],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    if kh == 3 && kw == 3 && pad == 1 && (stride == 1 || stride == 2) {
        return conv3::fwd(x, b, cin, h, w, wgt, cout, stride, out);
    }
    if kh == 1 && kw == 1 && pad == 0 && stride == 1 {
        return conv1x1_fwd(x, b, cin, h * w, wgt, cout, out);
    }
    conv2d_fwd_generic(x, b, cin, h, w, wgt, cout, kh, kw, stride, pad, out)
}

fn conv1x1_fwd<T: Real>(x: &[T], b: usize, cin: usize, plane: usize, wgt: &[T], cout: usize, out: &mut [T]) {
    out.fill(T::ZERO);
    for bi in 0..b {
        let xb = &x[bi * cin * plane..(bi + 1) * cin * plane];
        let ob = &mut out[bi * cout * plane..(bi + 1) * cout * plane];
        for co in 0..cout {
            let oplane = &mut ob[co * plane..(co + 1) * plane];
            for ci in 0..cin {
                axpy(wgt[co * cin + ci], &xb[ci * plane..(ci + 1) * plane], oplane);
            }
        }
    }
}

/// Reference implementation; also the fallback for unusual kernel shapes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_fwd_generic<T: Real>(
    x: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[T],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    debug_assert_eq!(x.len(), b * cin * h * w);
    debug_assert_eq!(wgt.len(), cout * cin * kh * kw);
    debug_assert_eq!(out.len(), b * cout * oh * ow);
    out.fill(T::ZERO);

    for bi in 0..b {
        let xb = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
        let ob = &mut out[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
        for co in 0..cout {
            let oplane = &mut ob[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..cin {
                let xplane = &xb[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wgt[((co * cin + ci) * kh + ky) * kw + kx];
                        // Output ranges whose input taps land inside the image.
                        let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, pad);
                        let (ox_lo, ox_hi) = valid_range(ow, w, kx, stride, pad);
                        if oy_lo > oy_hi || ox_lo > ox_hi {
                            continue;
                        }
                        let n = ox_hi - ox_lo + 1;
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - pad;
                            let ix0 = ox_lo * stride + kx - pad;
                            let dst = &mut oplane[oy * ow + ox_lo..oy * ow + ox_lo + n];
                            if stride == 1 {
                                let src = &xplane[iy * w + ix0..iy * w + ix0 + n];
                                for i in 0..n {
                                    dst[i] = src[i].mul_add(wv, dst[i]);
                                }
                            } else {
                                let src = &xplane[iy * w..(iy + 1) * w];
                                for i in 0..n {
                                    dst[i] = src[ix0 + i * stride].mul_add(wv, dst[i]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output index range [lo, hi] for which `o*stride + k - pad` lies in
/// `[0, in_size)`. May be empty (lo > hi).
#[inline]
fn valid_range(out_size: usize, in_size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + k - pad >= 0  =>  o >= ceil((pad - k) / stride)
    let lo = if pad > k { (pad - k + stride - 1) / stride } else { 0 };
    // o*stride + k - pad <= in_size - 1
    let hi_raw = (in_size - 1 + pad).saturating_sub(k) / stride;
    let hi = hi_raw.min(out_size.saturating_sub(1));
    if lo >= out_size {
        (1, 0)
    } else {
        (lo, hi)
    }
}

/// Gradient of `conv2d_fwd` with respect to the input. `gin` is
/// accumulated into (caller zeroes it).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_input<T: Real>(
    gout: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[T],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gin: &mut [T],
) {
    if kh == 3 && kw == 3 && pad == 1 && (stride == 1 || stride == 2) {
        return conv3::bwd_input(gout, b, cin, h, w, wgt, cout, stride, gin);
    }
    if kh == 1 && kw == 1 && pad == 0 && stride == 1 {
        let plane = h * w;
        for bi in 0..b {
            let gb = &gout[bi * cout * plane..(bi + 1) * cout * plane];
            let ib = &mut gin[bi * cin * plane..(bi + 1) * cin * plane];
            for ci in 0..cin {
                let iplane = &mut ib[ci * plane..(ci + 1) * plane];
                for co in 0..cout {
                    axpy(wgt[co * cin + ci], &gb[co * plane..(co + 1) * plane], iplane);
                }
            }
        }
        return;
    }
    conv2d_bwd_input_generic(gout, b, cin, h, w, wgt, cout, kh, kw, stride, pad, gin)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_bwd_input_generic<T: Real>(
    gout: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[T],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gin: &mut [T],
) {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    for bi in 0..b {
        let gb = &gout[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
        let ib = &mut gin[bi * cin * h * w..(bi + 1) * cin * h * w];
        for ci in 0..cin {
            let iplane = &mut ib[ci * h * w..(ci + 1) * h * w];
            for co in 0..cout {
                let gplane = &gb[co * oh * ow..(co + 1) * oh * ow];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wgt[((co * cin + ci) * kh + ky) * kw + kx];
                        let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, pad);
                        let (ox_lo, ox_hi) = valid_range(ow, w, kx, stride, pad);
                        if oy_lo > oy_hi || ox_lo > ox_hi {
                            continue;
                        }
                        let n = ox_hi - ox_lo + 1;
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - pad;
                            let ix0 = ox_lo * stride + kx - pad;
                            let src = &gplane[oy * ow + ox_lo..oy * ow + ox_lo + n];
                            if stride == 1 {
                                let dst = &mut iplane[iy * w + ix0..iy * w + ix0 + n];
                                for i in 0..n {
                                    dst[i] = src[i].mul_add(wv, dst[i]);
                                }
                            } else {
                                let dst = &mut iplane[iy * w..(iy + 1) * w];
                                for i in 0..n {
                                    dst[ix0 + i * stride] = src[i].mul_add(wv, dst[ix0 + i * stride]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of `conv2d_fwd` with respect to the weights, accumulated into
/// `gwgt` (caller zeroes it).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_weight<T: Real>(
    gout: &[T],
    x: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gwgt: &mut [T],
) {
    if kh == 3 && kw == 3 && pad == 1 && (stride == 1 || stride == 2) {
        return conv3::bwd_weight(gout, x, b, cin, h, w, cout, stride, gwgt);
    }
    if kh == 1 && kw == 1 && pad == 0 && stride == 1 {
        let plane = h * w;
        for bi in 0..b {
            let gb = &gout[bi * cout * plane..(bi + 1) * cout * plane];
            let xb = &x[bi * cin * plane..(bi + 1) * cin * plane];
            for co in 0..cout {
                let gplane = &gb[co * plane..(co + 1) * plane];
                for ci in 0..cin {
                    gwgt[co * cin + ci] += dot(gplane, &xb[ci * plane..(ci + 1) * plane]);
                }
            }
        }
        return;
    }
    conv2d_bwd_weight_generic(gout, x, b, cin, h, w, cout, kh, kw, stride, pad, gwgt)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_bwd_weight_generic<T: Real>(
    gout: &[T],
    x: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gwgt: &mut [T],
) {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    for bi in 0..b {
        let xb = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
        let gb = &gout[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
        for co in 0..cout {
            let gplane = &gb[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..cin {
                let xplane = &xb[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, pad);
                        let (ox_lo, ox_hi) = valid_range(ow, w, kx, stride, pad);
                        if oy_lo > oy_hi || ox_lo > ox_hi {
                            continue;
                        }
                        let n = ox_hi - ox_lo + 1;
                        let mut lanes = [T::ZERO; LANES];
                        let mut tail = T::ZERO;
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - pad;
                            let ix0 = ox_lo * stride + kx - pad;
                            let g = &gplane[oy * ow + ox_lo..oy * ow + ox_lo + n];
                            if stride == 1 {
                                let s = &xplane[iy * w + ix0..iy * w + ix0 + n];
                                let chunks = n / LANES;
                                for c in 0..chunks {
                                    let pg = &g[c * LANES..(c + 1) * LANES];
                                    let ps = &s[c * LANES..(c + 1) * LANES];
                                    for j in 0..LANES {
                                        lanes[j] = pg[j].mul_add(ps[j], lanes[j]);
                                    }
                                }
                                for i in chunks * LANES..n {
                                    tail = g[i].mul_add(s[i], tail);
                                }
                            } else {
                                let s = &xplane[iy * w..(iy + 1) * w];
                                for i in 0..n {
                                    tail = g[i].mul_add(s[ix0 + i * stride], tail);
                                }
                            }
                        }
                        let mut acc = tail;
                        for v in lanes {
                            acc += v;
                        }
                        gwgt[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Specialized 3x3 pad-1 convolution paths. Input planes are copied once
/// into zero-padded scratch, which makes every inner loop branch-free; the
/// stride-2 paths additionally deinterleave padded rows into even/odd
/// halves so taps read contiguous memory.
pub(crate) mod conv3 {
    use super::{conv_out_size, Real, LANES};

    /// Zero-pad every `h x w` plane of one image into `(h+2) x (w+2)`.
    fn pad_planes<T: Real>(x: &[T], cin: usize, h: usize, w: usize, scratch: &mut Vec<T>) {
        let (ph, pw) = (h + 2, w + 2);
        scratch.clear();
        scratch.resize(cin * ph * pw, T::ZERO);
        for ci in 0..cin {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            let dst = &mut scratch[ci * ph * pw..(ci + 1) * ph * pw];
            for y in 0..h {
                dst[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }

    /// Split padded planes into even/odd column halves:
    /// `even[r][i] = P[r][2i]`, `odd[r][i] = P[r][2i+1]`.
    fn deinterleave<T: Real>(padded: &[T], cin: usize, ph: usize, pw: usize, even: &mut Vec<T>, odd: &mut Vec<T>) {
        let we = pw.div_ceil(2);
        even.clear();
        even.resize(cin * ph * we, T::ZERO);
        odd.clear();
        odd.resize(cin * ph * we, T::ZERO);
        for ci in 0..cin {
            for r in 0..ph {
                let row = &padded[(ci * ph + r) * pw..(ci * ph + r + 1) * pw];
                let e = &mut even[(ci * ph + r) * we..(ci * ph + r + 1) * we];
                let o = &mut odd[(ci * ph + r) * we..(ci * ph + r + 1) * we];
                for i in 0..pw / 2 {
                    e[i] = row[2 * i];
                    o[i] = row[2 * i + 1];
                }
                if pw % 2 == 1 {
                    e[pw / 2] = row[pw - 1];
                }
            }
        }
    }

    /// 9-tap row kernel: acc over three padded source rows, three
    /// independent fma chains per element.
    #[inline]
    fn row9<T: Real>(acc: &mut [T], r0: &[T], r1: &[T], r2: &[T], k: &[T]) {
        let n = acc.len();
        for i in 0..n {
            let a0 = r0[i + 2].mul_add(k[2], r0[i + 1].mul_add(k[1], r0[i] * k[0]));
            let a1 = r1[i + 2].mul_add(k[5], r1[i + 1].mul_add(k[4], r1[i] * k[3]));
            let a2 = r2[i + 2].mul_add(k[8], r2[i + 1].mul_add(k[7], r2[i] * k[6]));
            acc[i] += a0 + a1 + a2;
        }
    }

    /// Stride-2 row kernel on deinterleaved rows: taps 0 and 2 hit the
    /// even half (offset by one), tap 1 the odd half.
    #[inline]
    fn row9_s2<T: Real>(acc: &mut [T], rows: [(&[T], &[T]); 3], k: &[T]) {
        let n = acc.len();
        for i in 0..n {
            let (e0, o0) = rows[0];
            let (e1, o1) = rows[1];
            let (e2, o2) = rows[2];
            let a0 = e0[i + 1].mul_add(k[2], o0[i].mul_add(k[1], e0[i] * k[0]));
            let a1 = e1[i + 1].mul_add(k[5], o1[i].mul_add(k[4], e1[i] * k[3]));
            let a2 = e2[i + 1].mul_add(k[8], o2[i].mul_add(k[7], e2[i] * k[6]));
            acc[i] += a0 + a1 + a2;
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn fwd<T: Real>(
        x: &[T],
        b: usize,
        cin: usize,
        h: usize,
        w: usize,
        wgt: &[T],
        cout: usize,
        stride: usize,
        out: &mut [T],
    ) {
        fwd_impl(x, b, cin, h, w, wgt, cout, stride, out, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn fwd_impl<T: Real>(
        x: &[T],
        b: usize,
        cin: usize,
        h: usize,
        w: usize,
        wgt: &[T],
        cout: usize,
        stride: usize,
        out: &mut [T],
        accumulate: bool,
    ) {
        let oh = conv_out_size(h, 3, stride, 1);
        let ow = conv_out_size(w, 3, stride, 1);
        debug_assert_eq!(out.len(), b * cout * oh * ow);
        let (ph, pw) = (h + 2, w + 2);
        let we = pw.div_ceil(2);
        let mut padded = Vec::new();
        let mut even = Vec::new();
        let mut odd = Vec::new();
        let mut acc = vec![T::ZERO; ow];

        for bi in 0..b {
            pad_planes(&x[bi * cin * h * w..(bi + 1) * cin * h * w], cin, h, w, &mut padded);
            if stride == 2 {
                deinterleave(&padded, cin, ph, pw, &mut even, &mut odd);
            }
            let ob = &mut out[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
            for co in 0..cout {
                for oy in 0..oh {
                    acc.fill(T::ZERO);
                    for ci in 0..cin {
                        let k = &wgt[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                        if stride == 1 {
                            let base = (ci * ph + oy) * pw;
                            row9(
                                &mut acc,
                                &padded[base..base + pw],
                                &padded[base + pw..base + 2 * pw],
                                &padded[base + 2 * pw..base + 3 * pw],
                                k,
                            );
                        } else {
                            let r = 2 * oy;
                            let row = |rr: usize| (ci * ph + rr) * we..(ci * ph + rr + 1) * we;
                            row9_s2(
                                &mut acc,
                                [
                                    (&even[row(r)], &odd[row(r)]),
                                    (&even[row(r + 1)], &odd[row(r + 1)]),
                                    (&even[row(r + 2)], &odd[row(r + 2)]),
                                ],
                                k,
                            );
                        }
                    }
                    let dst = &mut ob[co * oh * ow + oy * ow..co * oh * ow + (oy + 1) * ow];
                    if accumulate {
                        for i in 0..ow {
                            dst[i] += acc[i];
                        }
                    } else {
                        dst.copy_from_slice(&acc);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn bwd_input<T: Real>(
        gout: &[T],
        b: usize,
        cin: usize,
        h: usize,
        w: usize,
        wgt: &[T],
        cout: usize,
        stride: usize,
        gin: &mut [T],
    ) {
        if stride == 1 {
            // Full correlation: convolve gout with channel-transposed,
            // spatially flipped kernels.
            let mut wf = vec![T::ZERO; cin * cout * 9];
            for co in 0..cout {
                for ci in 0..cin {
                    for t in 0..9 {
                        wf[(ci * cout + co) * 9 + t] = wgt[(co * cin + ci) * 9 + 8 - t];
                    }
                }
            }
            let oh = conv_out_size(h, 3, 1, 1);
            let ow = conv_out_size(w, 3, 1, 1);
            debug_assert_eq!((oh, ow), (h, w));
            fwd_impl(gout, b, cout, h, w, &wf, cin, 1, gin, true);
            return;
        }

        // stride 2: scatter gout into even/odd padded-column accumulators
        // per input row, then write the interior back.
        let oh = conv_out_size(h, 3, 2, 1);
        let ow = conv_out_size(w, 3, 2, 1);
        let we = (w + 2).div_ceil(2) + 1;
        let mut evec = vec![T::ZERO; we];
        let mut ovec = vec![T::ZERO; we];
        for bi in 0..b {
            let gb = &gout[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
            let ib = &mut gin[bi * cin * h * w..(bi + 1) * cin * h * w];
            for ci in 0..cin {
                for iy in 0..h {
                    evec.fill(T::ZERO);
                    ovec.fill(T::ZERO);
                    for co in 0..cout {
                        let gplane = &gb[co * oh * ow..(co + 1) * oh * ow];
                        for ky in 0..3usize {
                            // padded row iy+1 receives from oy with 2*oy + ky = iy + 1
                            let num = iy + 1;
                            if num < ky || (num - ky) % 2 != 0 {
                                continue;
                            }
                            let oy = (num - ky) / 2;
                            if oy >= oh {
                                continue;
                            }
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let kbase = (co * cin + ci) * 9 + ky * 3;
                            let (k0, k1, k2) = (wgt[kbase], wgt[kbase + 1], wgt[kbase + 2]);
                            for ox in 0..ow {
                                evec[ox] = grow[ox].mul_add(k0, evec[ox]);
                                ovec[ox] = grow[ox].mul_add(k1, ovec[ox]);
                                evec[ox + 1] = grow[ox].mul_add(k2, evec[ox + 1]);
                            }
                        }
                    }
                    // padded col 2i -> input col 2i-1; padded col 2i+1 -> input col 2i
                    let irow = &mut ib[ci * h * w + iy * w..ci * h * w + (iy + 1) * w];
                    for i in 1..we {
                        let ix = 2 * i - 1;
                        if ix < w {
                            irow[ix] += evec[i];
                        }
                    }
                    for i in 0..we {
                        let ix = 2 * i;
                        if ix < w {
                            irow[ix] += ovec[i];
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn bwd_weight<T: Real>(
        gout: &[T],
        x: &[T],
        b: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        stride: usize,
        gwgt: &mut [T],
    ) {
        let oh = conv_out_size(h, 3, stride, 1);
        let ow = conv_out_size(w, 3, stride, 1);
        let (ph, pw) = (h + 2, w + 2);
        let we = pw.div_ceil(2);
        let mut padded = Vec::new();
        let mut even = Vec::new();
        let mut odd = Vec::new();

        for bi in 0..b {
            pad_planes(&x[bi * cin * h * w..(bi + 1) * cin * h * w], cin, h, w, &mut padded);
            if stride == 2 {
                deinterleave(&padded, cin, ph, pw, &mut even, &mut odd);
            }
            let gb = &gout[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
            for co in 0..cout {
                let gplane = &gb[co * oh * ow..(co + 1) * oh * ow];
                for ci in 0..cin {
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let mut lanes = [T::ZERO; LANES];
                            let mut tail = T::ZERO;
                            for oy in 0..oh {
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                let srow: &[T] = if stride == 1 {
                                    let base = (ci * ph + oy + ky) * pw + kx;
                                    &padded[base..base + ow]
                                } else {
                                    let r = 2 * oy + ky;
                                    match kx {
                                        0 => &even[(ci * ph + r) * we..(ci * ph + r) * we + ow],
                                        1 => &odd[(ci * ph + r) * we..(ci * ph + r) * we + ow],
                                        _ => &even[(ci * ph + r) * we + 1..(ci * ph + r) * we + 1 + ow],
                                    }
                                };
                                let chunks = ow / LANES;
                                for c in 0..chunks {
                                    let pg = &grow[c * LANES..(c + 1) * LANES];
                                    let ps = &srow[c * LANES..(c + 1) * LANES];
                                    for j in 0..LANES {
                                        lanes[j] = pg[j].mul_add(ps[j], lanes[j]);
                                    }
                                }
                                for i in chunks * LANES..ow {
                                    tail = grow[i].mul_add(srow[i], tail);
                                }
                            }
                            let mut acc = tail;
                            for v in lanes {
                                acc += v;
                            }
                            gwgt[(co * cin + ci) * 9 + ky * 3 + kx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel bias over `b x c x h x w`.
pub fn bias_add_fwd<T: Real>(x: &[T], bias: &[T], c: usize, plane: usize, out: &mut [T]) {
    let imgs = x.len() / (c * plane);
    for bi in 0..imgs {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            let bv = bias[ci];
            for i in 0..plane {
                out[off + i] = x[off + i] + bv;
            }
        }
    }
}

pub fn bias_add_bwd<T: Real>(gout: &[T], c: usize, plane: usize, gbias: &mut [T]) {
    let imgs = gout.len() / (c * plane);
    for bi in 0..imgs {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            gbias[ci] += sum(&gout[off..off + plane]);
        }
    }
}

/// Nearest-neighbor 2x upsampling of `b x c x h x w`.
pub fn upsample2x_fwd<T: Real>(x: &[T], planes: usize, h: usize, w: usize, out: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for x_ in 0..w {
                let v = xp[y * w + x_];
                let base = 2 * y * ow + 2 * x_;
                op[base] = v;
                op[base + 1] = v;
                op[base + ow] = v;
                op[base + ow + 1] = v;
            }
        }
    }
}

pub fn upsample2x_bwd<T: Real>(gout: &[T], planes: usize, h: usize, w: usize, gin: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    debug_assert_eq!(gout.len(), planes * oh * ow);
    for p in 0..planes {
        let gp = &gout[p * oh * ow..(p + 1) * oh * ow];
        let ip = &mut gin[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let base = 2 * y * ow + 2 * x_;
                ip[y * w + x_] += gp[base] + gp[base + 1] + gp[base + ow] + gp[base + ow + 1];
            }
        }
    }
}

/// Channel softmax over axis 1 of `b x c x h x w` (also used for `b x c`
/// with `plane == 1`).
pub fn softmax_channels_fwd<T: Real>(x: &[T], b: usize, c: usize, plane: usize, out: &mut [T]) {
    for bi in 0..b {
        let base = bi * c * plane;
        for i in 0..plane {
            let mut m = x[base + i];
            for ci in 1..c {
                m = m.max(x[base + ci * plane + i]);
            }
            let mut z = T::ZERO;
            for ci in 0..c {
                let e = (x[base + ci * plane + i] - m).exp();
                out[base + ci * plane + i] = e;
                z += e;
            }
            for ci in 0..c {
                out[base + ci * plane + i] = out[base + ci * plane + i] / z;
            }
        }
    }
}

/// Softmax backward: `gin = y * (g - sum_c(g * y))`, accumulated.
pub fn softmax_channels_bwd<T: Real>(y: &[T], gout: &[T], b: usize, c: usize, plane: usize, gin: &mut [T]) {
    for bi in 0..b {
        let base = bi * c * plane;
        for i in 0..plane {
            let mut s = T::ZERO;
            for ci in 0..c {
                let k = base + ci * plane + i;
                s = gout[k].mul_add(y[k], s);
            }
            for ci in 0..c {
                let k = base + ci * plane + i;
                gin[k] += y[k] * (gout[k] - s);
            }
        }
    }
}

/// Mean cross-entropy from logits against integer targets, with a stable
/// log-softmax. `x` is `b x c x plane`, `targets` has `b * plane` entries.
/// Returns the scalar loss (natural log).
pub fn cross_entropy_fwd<T: Real>(x: &[T], b: usize, c: usize, plane: usize, targets: &[u32]) -> T {
    debug_assert_eq!(targets.len(), b * plane);
    let mut lanes = [T::ZERO; LANES];
    let mut li = 0usize;
    for bi in 0..b {
        let base = bi * c * plane;
        for i in 0..plane {
            let mut m = x[base + i];
            for ci in 1..c {
                m = m.max(x[base + ci * plane + i]);
            }
            let mut z = T::ZERO;
            for ci in 0..c {
                z += (x[base + ci * plane + i] - m).exp();
            }
            let t = targets[bi * plane + i] as usize;
            let logp = x[base + t * plane + i] - m - z.ln();
            lanes[li % LANES] -= logp;
            li += 1;
        }
    }
    let mut acc = T::ZERO;
    for v in lanes {
        acc += v;
    }
    acc / T::from_f64((b * plane) as f64)
}

/// Cross-entropy backward: `gin += g * (softmax(x) - onehot) / (b * plane)`.
pub fn cross_entropy_bwd<T: Real>(
    x: &[T],
    b: usize,
    c: usize,
    plane: usize,
    targets: &[u32],
    gscalar: T,
    gin: &mut [T],
) {
    let scale = gscalar / T::from_f64((b * plane) as f64);
    for bi in 0..b {
        let base = bi * c * plane;
        for i in 0..plane {
            let mut m = x[base + i];
            for ci in 1..c {
                m = m.max(x[base + ci * plane + i]);
            }
            let mut z = T::ZERO;
            for ci in 0..c {
                z += (x[base + ci * plane + i] - m).exp();
            }
            let t = targets[bi * plane + i] as usize;
            for ci in 0..c {
                let k = base + ci * plane + i;
                let p = (x[k] - m).exp() / z;
                let y = if ci == t { T::ONE } else { T::ZERO };
                gin[k] += scale * (p - y);
            }
        }
    }
}

/// Global average pool `b x c x h x w -> b x c`.
pub fn gap_fwd<T: Real>(x: &[T], planes: usize, plane: usize, out: &mut [T]) {
    let inv = T::ONE / T::from_f64(plane as f64);
    for p in 0..planes {
        out[p] = sum(&x[p * plane..(p + 1) * plane]) * inv;
    }
}

pub fn gap_bwd<T: Real>(gout: &[T], planes: usize, plane: usize, gin: &mut [T]) {
    let inv = T::ONE / T::from_f64(plane as f64);
    for p in 0..planes {
        let g = gout[p] * inv;
        for v in &mut gin[p * plane..(p + 1) * plane] {
            *v += g;
        }
    }
}

/// `m x k` times `k x n`, overwriting `out`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(T::ZERO);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] = brow[j].mul_add(av, orow[j]);
            }
        }
    }
}

/// Per-column standardization of a `b x d` matrix: subtract the column
/// mean, divide by `max(std, eps)` where std uses the biased (1/b)
/// variance. The max keeps degenerate constant columns finite while
/// leaving well-conditioned columns as exact z-scores.
pub fn standardize_fwd<T: Real>(x: &[T], b: usize, d: usize, eps: T, out: &mut [T]) {
    let inv_b = T::ONE / T::from_f64(b as f64);
    for j in 0..d {
        let mut mean = T::ZERO;
        for i in 0..b {
            mean += x[i * d + j];
        }
        mean *= inv_b;
        let mut var = T::ZERO;
        for i in 0..b {
            let c = x[i * d + j] - mean;
            var = c.mul_add(c, var);
        }
        var *= inv_b;
        let denom = var.sqrt().max(eps);
        for i in 0..b {
            out[i * d + j] = (x[i * d + j] - mean) / denom;
        }
    }
}

/// Standardization backward. For the non-clamped branch this is the usual
/// batch-norm gradient with biased variance:
/// `gin = (g - mean(g) - z * mean(g .* z)) / s`; when the denominator was
/// clamped at eps the variance term drops out.
pub fn standardize_bwd<T: Real>(x: &[T], y: &[T], gout: &[T], b: usize, d: usize, eps: T, gin: &mut [T]) {
    let inv_b = T::ONE / T::from_f64(b as f64);
    for j in 0..d {
        let mut mean = T::ZERO;
        for i in 0..b {
            mean += x[i * d + j];
        }
        mean *= inv_b;
        let mut var = T::ZERO;
        for i in 0..b {
            let c = x[i * d + j] - mean;
            var = c.mul_add(c, var);
        }
        var *= inv_b;
        let std = var.sqrt();
        let clamped = std <= eps;
        let denom = std.max(eps);

        let mut gmean = T::ZERO;
        let mut gz = T::ZERO;
        for i in 0..b {
            gmean += gout[i * d + j];
            gz = gout[i * d + j].mul_add(y[i * d + j], gz);
        }
        gmean *= inv_b;
        gz *= inv_b;
        for i in 0..b {
            let g = gout[i * d + j];
            let term = if clamped { g - gmean } else { g - gmean - y[i * d + j] * gz };
            gin[i * d + j] += term / denom;
        }
    }
}

pub fn relu_fwd<T: Real>(x: &[T], out: &mut [T]) {
    for i in 0..x.len() {
        out[i] = x[i].max(T::ZERO);
    }
}

pub fn relu_bwd<T: Real>(x: &[T], gout: &[T], gin: &mut [T]) {
    for i in 0..x.len() {
        if x[i] > T::ZERO {
            gin[i] += gout[i];
        }
    }
}
