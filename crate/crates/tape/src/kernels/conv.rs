//! Stride-1 "same" 2D convolution through im2col and dense matrix products.

use crate::Tensor;

/// `C = A·B + beta·C` where `A` is `m×k` and `B` is `k×n`, both row-major unless
/// the respective transpose flag says the buffer holds the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], channels: usize, h: usize, w: usize, ksize: usize, cols: &mut [f64]) {
    let pad = (ksize / 2) as isize;
    let hw = h * w;
    for c in 0..channels {
        let plane = &x[c * hw..(c + 1) * hw];
        for ki in 0..ksize {
            for kj in 0..ksize {
                let row = (c * ksize + ki) * ksize + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    let out_row = &mut dst[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[si as usize * w..(si as usize + 1) * w];
                    let j_lo = (-dj).clamp(0, w as isize) as usize;
                    let j_hi = (w as isize - dj).clamp(j_lo as isize, w as isize) as usize;
                    out_row[..j_lo].fill(0.0);
                    out_row[j_hi..].fill(0.0);
                    let s_lo = (j_lo as isize + dj) as usize;
                    out_row[j_lo..j_hi].copy_from_slice(&src_row[s_lo..s_lo + (j_hi - j_lo)]);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], channels: usize, h: usize, w: usize, ksize: usize, x: &mut [f64]) {
    let pad = (ksize / 2) as isize;
    let hw = h * w;
    for c in 0..channels {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ki in 0..ksize {
            for kj in 0..ksize {
                let row = (c * ksize + ki) * ksize + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[si as usize * w..(si as usize + 1) * w];
                    let src_row = &src[i * w..(i + 1) * w];
                    let j_lo = (-dj).max(0) as usize;
                    let j_hi = (w as isize - dj).min(w as isize).max(0) as usize;
                    for j in j_lo..j_hi {
                        dst_row[(j as isize + dj) as usize] += src_row[j];
                    }
                }
            }
        }
    }
}

/// `x: [N, Cin, H, W]`, `weight: [Cout, Cin, K, K]` with odd `K`, zero padding `K/2`.
pub(crate) fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (n, cin, h, w) = x.dims4();
    let (cout, wcin, kh, kw) = weight.dims4();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    assert!(kh == kw && kh % 2 == 1, "conv2d expects an odd square kernel");
    let hw = h * w;
    let kdim = cin * kh * kw;
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    let mut cols = if kh == 1 { Vec::new() } else { vec![0.0; kdim * hw] };
    for b in 0..n {
        let xb = x.batch_item(b);
        let ob = &mut out.data_mut()[b * cout * hw..(b + 1) * cout * hw];
        if let Some(bias) = bias {
            for (c, &bv) in bias.data().iter().enumerate() {
                ob[c * hw..(c + 1) * hw].fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if kh == 1 {
            gemm(cout, kdim, hw, weight.data(), false, xb, false, beta, ob);
        } else {
            im2col(xb, cin, h, w, kh, &mut cols);
            gemm(cout, kdim, hw, weight.data(), false, &cols, false, beta, ob);
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub x: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads {
    let (n, cin, h, w) = x.dims4();
    let (cout, _, k, _) = weight.dims4();
    let hw = h * w;
    let kdim = cin * k * k;
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_w.then(|| Tensor::zeros(weight.shape()));
    let mut gb = need_b.then(|| Tensor::zeros(&[cout]));
    let mut cols = vec![0.0; kdim * hw];
    for b in 0..n {
        let gob = grad_out.batch_item(b);
        if let Some(gb) = gb.as_mut() {
            for (c, g) in gb.data_mut().iter_mut().enumerate() {
                *g += gob[c * hw..(c + 1) * hw].iter().sum::<f64>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let xb = x.batch_item(b);
            let src: &[f64] = if k == 1 {
                xb
            } else {
                im2col(xb, cin, h, w, k, &mut cols);
                &cols
            };
            // gW[Cout, Kdim] += gout[Cout, HW] · colsᵀ
            gemm(cout, hw, kdim, gob, false, src, true, 1.0, gw.data_mut());
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx.data_mut()[b * cin * hw..(b + 1) * cin * hw];
            if k == 1 {
                gemm(kdim, cout, hw, weight.data(), true, gob, false, 0.0, gxb);
            } else {
                gemm(kdim, cout, hw, weight.data(), true, gob, false, 0.0, &mut cols);
                col2im_add(&cols, cin, h, w, k, gxb);
            }
        }
    }
    ConvGrads {
        x: gx,
        weight: gw,
        bias: gb,
    }
}
