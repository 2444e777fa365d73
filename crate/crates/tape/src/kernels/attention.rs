//! Single-head spatial self-attention over a packed `[N, 3C, H, W]` query/key/value tensor.

use super::conv::gemm;
use crate::Tensor;

pub(crate) fn attention_forward(qkv: &Tensor) -> (Tensor, Vec<f64>) {
    let (n, c3, h, w) = qkv.dims4();
    assert_eq!(c3 % 3, 0, "attention input channels must be a multiple of 3");
    let c = c3 / 3;
    let l = h * w;
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let mut probs = vec![0.0; n * l * l];
    for b in 0..n {
        let item = qkv.batch_item(b);
        let (q, rest) = item.split_at(c * l);
        let (k, v) = rest.split_at(c * l);
        let p = &mut probs[b * l * l..(b + 1) * l * l];
        gemm(l, c, l, q, true, k, false, 0.0, p);
        for row in p.chunks_mut(l) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s * scale - max).exp();
                total += *s;
            }
            for s in row.iter_mut() {
                *s /= total;
            }
        }
        let ob = &mut out.data_mut()[b * c * l..(b + 1) * c * l];
        gemm(c, l, l, v, false, p, true, 0.0, ob);
    }
    (out, probs)
}

pub(crate) fn attention_backward(qkv: &Tensor, probs: &[f64], grad_out: &Tensor) -> Tensor {
    let (n, c3, h, w) = qkv.dims4();
    let c = c3 / 3;
    let l = h * w;
    let scale = 1.0 / (c as f64).sqrt();
    let mut grad = Tensor::zeros(qkv.shape());
    let mut g_scores = vec![0.0; l * l];
    for b in 0..n {
        let item = qkv.batch_item(b);
        let (q, rest) = item.split_at(c * l);
        let (k, v) = rest.split_at(c * l);
        let p = &probs[b * l * l..(b + 1) * l * l];
        let gout = grad_out.batch_item(b);
        let gb = &mut grad.data_mut()[b * c3 * l..(b + 1) * c3 * l];
        let (gq, grest) = gb.split_at_mut(c * l);
        let (gk, gv) = grest.split_at_mut(c * l);

        gemm(c, l, l, gout, false, p, false, 0.0, gv);
        gemm(l, c, l, gout, true, v, false, 0.0, &mut g_scores);
        for (grow, prow) in g_scores.chunks_mut(l).zip(p.chunks(l)) {
            let dot: f64 = grow.iter().zip(prow).map(|(g, p)| g * p).sum();
            for (g, &pv) in grow.iter_mut().zip(prow) {
                *g = pv * (*g - dot) * scale;
            }
        }
        gemm(c, l, l, k, false, &g_scores, true, 0.0, gq);
        gemm(c, l, l, q, false, &g_scores, false, 0.0, gk);
    }
    grad
}
