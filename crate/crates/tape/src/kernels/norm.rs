use crate::Tensor;

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization without affine terms. Returns the output plus the
/// per-(sample, group) mean and reciprocal standard deviation.
pub(crate) fn group_norm_forward(x: &Tensor, groups: usize) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = x.dims4();
    assert!(groups > 0 && c % groups == 0, "channels {c} not divisible by {groups} groups");
    let span = (c / groups) * h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut means = Vec::with_capacity(n * groups);
    let mut rstds = Vec::with_capacity(n * groups);
    for (chunk, dst) in x.data().chunks(span).zip(out.data_mut().chunks_mut(span)) {
        let mean = chunk.iter().sum::<f64>() / span as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / span as f64;
        let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        for (o, v) in dst.iter_mut().zip(chunk) {
            *o = (v - mean) * rstd;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

pub(crate) fn group_norm_backward(
    x: &Tensor,
    grad_out: &Tensor,
    groups: usize,
    means: &[f64],
    rstds: &[f64],
) -> Tensor {
    let (_, c, h, w) = x.dims4();
    let span = (c / groups) * h * w;
    let m = span as f64;
    let mut gx = Tensor::zeros(x.shape());
    for (idx, ((xs, gs), dst)) in x
        .data()
        .chunks(span)
        .zip(grad_out.data().chunks(span))
        .zip(gx.data_mut().chunks_mut(span))
        .enumerate()
    {
        let (mean, rstd) = (means[idx], rstds[idx]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for (xv, gv) in xs.iter().zip(gs) {
            sum_g += gv;
            sum_gx += gv * (xv - mean) * rstd;
        }
        for ((d, xv), gv) in dst.iter_mut().zip(xs).zip(gs) {
            let xhat = (xv - mean) * rstd;
            *d = rstd * (gv - sum_g / m - xhat * sum_gx / m);
        }
    }
    gx
}
