//! Factor-2 resampling: box/nearest pairs and a learnable separable 4-tap FIR pair.
//!
//! The FIR kernel is the outer product `K[a][b] = f[a]·f[b]`. Downsampling reads
//! `x[2i+a-1, 2j+b-1]`; upsampling is the transpose scaled by 4 so that a filter
//! with unit sum has unit DC gain in both directions.

use crate::Tensor;

pub(crate) const FIR_TAPS: usize = 4;

pub(crate) fn avg_pool2_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let src = x.data();
    for (p, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let a = plane[2 * i * w + 2 * j] + plane[2 * i * w + 2 * j + 1];
                let b = plane[(2 * i + 1) * w + 2 * j] + plane[(2 * i + 1) * w + 2 * j + 1];
                dst[i * wo + j] = 0.25 * (a + b);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(grad_out: &Tensor, in_shape: &[usize]) -> Tensor {
    let mut gx = Tensor::zeros(in_shape);
    let (_, _, h, w) = gx.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let g = grad_out.data();
    for (p, dst) in gx.data_mut().chunks_mut(h * w).enumerate() {
        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = 0.25 * gp[(i / 2) * wo + j / 2];
            }
        }
    }
    gx
}

pub(crate) fn up_nearest2_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let src = x.data();
    for (p, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                dst[i * wo + j] = plane[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub(crate) fn up_nearest2_backward(grad_out: &Tensor, in_shape: &[usize]) -> Tensor {
    let mut gx = Tensor::zeros(in_shape);
    let (_, _, h, w) = gx.dims4();
    let wo = 2 * w;
    let g = grad_out.data();
    for (p, dst) in gx.data_mut().chunks_mut(h * w).enumerate() {
        let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = gp[2 * i * wo + 2 * j]
                    + gp[2 * i * wo + 2 * j + 1]
                    + gp[(2 * i + 1) * wo + 2 * j]
                    + gp[(2 * i + 1) * wo + 2 * j + 1];
            }
        }
    }
    gx
}

fn kernel(taps: &Tensor) -> [[f64; FIR_TAPS]; FIR_TAPS] {
    assert_eq!(taps.len(), FIR_TAPS, "FIR filter needs {FIR_TAPS} taps");
    let f = taps.data();
    let mut k = [[0.0; FIR_TAPS]; FIR_TAPS];
    for a in 0..FIR_TAPS {
        for b in 0..FIR_TAPS {
            k[a][b] = f[a] * f[b];
        }
    }
    k
}

fn taps_grad(taps: &Tensor, gk: &[[f64; FIR_TAPS]; FIR_TAPS]) -> Tensor {
    let f = taps.data();
    let mut g = vec![0.0; FIR_TAPS];
    for a in 0..FIR_TAPS {
        for b in 0..FIR_TAPS {
            g[a] += (gk[a][b] + gk[b][a]) * f[b];
        }
    }
    Tensor::from_vec(&[FIR_TAPS], g)
}

/// Visits every (small-grid, large-grid) index pair coupled by the FIR stencil.
#[inline]
fn for_each_tap(hs: usize, ws: usize, hl: usize, wl: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    for i in 0..hs {
        for a in 0..FIR_TAPS {
            let li = 2 * i as isize + a as isize - 1;
            if li < 0 || li >= hl as isize {
                continue;
            }
            for j in 0..ws {
                for b in 0..FIR_TAPS {
                    let lj = 2 * j as isize + b as isize - 1;
                    if lj < 0 || lj >= wl as isize {
                        continue;
                    }
                    f(i * ws + j, li as usize * wl + lj as usize, a, b);
                }
            }
        }
    }
}

pub(crate) fn fir_down_forward(x: &Tensor, taps: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "fir_down needs even spatial dims");
    let k = kernel(taps);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let src = x.data();
    for (p, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for_each_tap(ho, wo, h, w, |s, l, a, b| dst[s] += k[a][b] * plane[l]);
    }
    out
}

pub(crate) fn fir_down_backward(
    x: &Tensor,
    taps: &Tensor,
    grad_out: &Tensor,
    need_x: bool,
    need_taps: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (_, _, h, w) = x.dims4();
    let k = kernel(taps);
    let (ho, wo) = (h / 2, w / 2);
    let g = grad_out.data();
    let gx = need_x.then(|| {
        let mut gx = Tensor::zeros(x.shape());
        for (p, dst) in gx.data_mut().chunks_mut(h * w).enumerate() {
            let gp = &g[p * ho * wo..(p + 1) * ho * wo];
            for_each_tap(ho, wo, h, w, |s, l, a, b| dst[l] += k[a][b] * gp[s]);
        }
        gx
    });
    let gt = need_taps.then(|| {
        let mut gk = [[0.0; FIR_TAPS]; FIR_TAPS];
        for (p, plane) in x.data().chunks(h * w).enumerate() {
            let gp = &g[p * ho * wo..(p + 1) * ho * wo];
            for_each_tap(ho, wo, h, w, |s, l, a, b| gk[a][b] += gp[s] * plane[l]);
        }
        taps_grad(taps, &gk)
    });
    (gx, gt)
}

pub(crate) fn fir_up_forward(x: &Tensor, taps: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let k = kernel(taps);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let src = x.data();
    for (p, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for_each_tap(h, w, ho, wo, |s, l, a, b| dst[l] += 4.0 * k[a][b] * plane[s]);
    }
    out
}

pub(crate) fn fir_up_backward(
    x: &Tensor,
    taps: &Tensor,
    grad_out: &Tensor,
    need_x: bool,
    need_taps: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (_, _, h, w) = x.dims4();
    let k = kernel(taps);
    let (ho, wo) = (2 * h, 2 * w);
    let g = grad_out.data();
    let gx = need_x.then(|| {
        let mut gx = Tensor::zeros(x.shape());
        for (p, dst) in gx.data_mut().chunks_mut(h * w).enumerate() {
            let gp = &g[p * ho * wo..(p + 1) * ho * wo];
            for_each_tap(h, w, ho, wo, |s, l, a, b| dst[s] += 4.0 * k[a][b] * gp[l]);
        }
        gx
    });
    let gt = need_taps.then(|| {
        let mut gk = [[0.0; FIR_TAPS]; FIR_TAPS];
        for (p, plane) in x.data().chunks(h * w).enumerate() {
            let gp = &g[p * ho * wo..(p + 1) * ho * wo];
            for_each_tap(h, w, ho, wo, |s, l, a, b| gk[a][b] += 4.0 * gp[l] * plane[s]);
        }
        taps_grad(taps, &gk)
    });
    (gx, gt)
}
