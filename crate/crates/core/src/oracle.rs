//! Independent nested-loop reference implementations used by unit tests.

/// Direct cross-correlation over `[n,c,h,w]` input and `[o,c,k,k]` weights.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    bias: Option<&[f64]>,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                    for ic in 0..c {
                        for di in 0..k {
                            for dj in 0..k {
                                let yi = (i * stride + di) as isize - pad as isize;
                                let xj = (j * stride + dj) as isize - pad as isize;
                                if yi < 0 || xj < 0 || yi >= h as isize || xj >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + yi as usize) * w + xj as usize];
                                let wv = wt[((oc * c + ic) * k + di) * k + dj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn max_pool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for p in 0..planes {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let at = |di: usize, dj: usize| x[(p * h + 2 * i + di) * w + 2 * j + dj];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    out
}

pub fn global_avg_pool(x: &[f64], planes: usize, hw: usize) -> Vec<f64> {
    (0..planes)
        .map(|p| x[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

/// `[n,d] · [o,d]ᵀ + b`.
pub fn linear(x: &[f64], n: usize, d: usize, w: &[f64], b: &[f64], o: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        for k in 0..o {
            out[r * o + k] = b[k] + (0..d).map(|i| x[r * d + i] * w[k * d + i]).sum::<f64>();
        }
    }
    out
}
