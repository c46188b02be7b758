//! Direct, loop-based reference implementations. They favour obviousness
//! over speed and share no code with `abn-core`.

use abn_core::editing::BubbleAnnotation;

/// Cross-correlation with zero padding, `[N, C, H, W] * [F, C, kH, kW]`.
pub fn conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [f, wc, kh, kw] = ws;
    assert_eq!(c, wc);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * ho * wo];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((fi * c + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * f + fi) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [n, f, ho, wo])
}

pub fn global_average_pool(x: &[f64], xs: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let mut out = vec![0.0; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x[((ni * c + ci) * h + y) * w + xx];
                }
            }
            out[ni * c + ci] = s / (h * w) as f64;
        }
    }
    out
}

/// `x[N, D] @ W[D, C] + b[C]`.
pub fn linear(x: &[f64], n: usize, d: usize, w: &[f64], c: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..c {
            let mut s = b[j];
            for k in 0..d {
                s += x[i * d + k] * w[k * c + j];
            }
            out[i * c + j] = s;
        }
    }
    out
}

/// Mean over rows of `-ln(exp(z_label) / sum(exp(z)))`, written without
/// max-subtraction; callers keep logits small.
pub fn softmax_cross_entropy(logits: &[f64], n: usize, c: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[labels[i]].exp() / z).ln();
    }
    total / n as f64
}

/// Mean over the leading axis of the per-sample Euclidean distance.
pub fn l2_norm(a: &[f64], b: &[f64], n: usize) -> f64 {
    let per = a.len() / n;
    let mut total = 0.0;
    for i in 0..n {
        let mut sq = 0.0;
        for k in 0..per {
            let d = a[i * per + k] - b[i * per + k];
            sq += d * d;
        }
        total += sq.sqrt();
    }
    total / n as f64
}

/// A `[N, 1, H, W]` map times `[N, C, H, W]` features, channel by channel.
pub fn channel_mul(map: &[f64], features: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * hw];
    for i in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                out[(i * c + ch) * hw + p] = map[i * hw + p] * features[(i * c + ch) * hw + p];
            }
        }
    }
    out
}

/// Per-cell sum of isotropic 2-D normal densities, cell `(i, j)` sampled at
/// `((j + 0.5) / w, (i + 0.5) / h)`.
pub fn gaussian_sum(bubbles: &[BubbleAnnotation], h: usize, w: usize, bandwidth: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (x, y) = ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64);
            let mut s = 0.0;
            for b in bubbles {
                let sigma = bandwidth * b.radius;
                let d2 = (x - b.center.0).powi(2) + (y - b.center.1).powi(2);
                s += (-d2 / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma);
            }
            out.push(s);
        }
    }
    out
}

pub fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Pixel ranking by an explicit `(descending value, ascending index)` key.
pub fn deletion_order(values: &[f32]) -> Vec<usize> {
    let mut keyed: Vec<(f32, usize)> = values.iter().cloned().zip(0..).collect();
    keyed.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Mean of squared differences.
pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s / a.len() as f64
}
