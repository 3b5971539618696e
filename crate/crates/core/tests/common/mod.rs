//! Naive reference implementations and finite-difference helpers shared by
//! the integration tests. Nothing here calls into the library's numerics.

#![allow(dead_code)]

use crowd_budget::counternet::{CounterParams, HEAD_GAIN};
use crowd_budget::grid::Tensor3;
use rand::Rng;

pub fn random_tensor(rng: &mut impl Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor3 {
    Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Parameters with every entry drawn at random, including nonzero biases.
pub fn random_params(rng: &mut impl Rng, c_in: usize, features: usize) -> CounterParams {
    let mut p = CounterParams::zeros(c_in, features);
    let n = p.len();
    let mut flat: Vec<f64> = (0..n).map(|_| rng.random_range(-0.6..0.6)).collect();
    flat[n - 1] = rng.random_range(0.1..0.9);
    p = CounterParams::from_flat(c_in, features, &flat).unwrap();
    p
}

/// Same-padded 3x3 cross-correlation, written as the textbook quadruple loop.
pub fn ref_conv3x3(x: &[f64], c_in: usize, h: usize, w: usize, wt: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = b[o];
                for i in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = xx as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += wt[((o * c_in + i) * 3 + ky) * 3 + kx]
                                * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

pub struct RefForward {
    /// Feature map after the second ReLU, `features x h x w`.
    pub features: Vec<f64>,
    /// Head input after optional CAP fusion.
    pub head_in: Vec<f64>,
    pub prediction: Vec<f64>,
    /// Smallest |pre-activation| over every ReLU, the distance to a kink.
    pub kink_margin: f64,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `gamma * sum_j s_ij u_j + (1 - gamma) l_i` with `s` from the channel
/// softmax of `x + eps` and a row softmax of dot products. Rows are positions.
pub fn ref_cap(l: &[Vec<f64>], u: &[Vec<f64>], gamma: f64, eps: f64) -> Vec<Vec<f64>> {
    let norm = |v: &Vec<f64>| softmax(&v.iter().map(|x| x + eps).collect::<Vec<_>>());
    let nl: Vec<Vec<f64>> = l.iter().map(norm).collect();
    let nu: Vec<Vec<f64>> = u.iter().map(norm).collect();
    l.iter()
        .zip(&nl)
        .map(|(li, nli)| {
            let logits: Vec<f64> = nu
                .iter()
                .map(|nuj| nli.iter().zip(nuj).map(|(a, b)| a * b).sum())
                .collect();
            let s = softmax(&logits);
            (0..li.len())
                .map(|k| {
                    let agg: f64 = s.iter().zip(u).map(|(sj, uj)| sj * uj[k]).sum();
                    gamma * agg + (1.0 - gamma) * li[k]
                })
                .collect()
        })
        .collect()
}

/// Reference forward pass. With `cap = Some((selected, eps))`, features at
/// selected cells are fused with those at unselected cells before the head.
pub fn ref_forward(p: &CounterParams, x: &Tensor3, cap: Option<(&[bool], f64)>) -> RefForward {
    let (h, w) = (x.height, x.width);
    let f = p.features;
    let pre1 = ref_conv3x3(&x.data, p.in_channels, h, w, &p.conv1_w, &p.conv1_b, f);
    let act1: Vec<f64> = pre1.iter().map(|v| v.max(0.0)).collect();
    let pre2 = ref_conv3x3(&act1, f, h, w, &p.conv2_w, &p.conv2_b, f);
    let act2: Vec<f64> = pre2.iter().map(|v| v.max(0.0)).collect();
    let n = h * w;
    let mut head_in = act2.clone();
    if let Some((selected, eps)) = cap {
        let column = |pos: usize| (0..f).map(|k| act2[k * n + pos]).collect::<Vec<f64>>();
        let lab: Vec<usize> = (0..n).filter(|&q| selected[q]).collect();
        let unl: Vec<usize> = (0..n).filter(|&q| !selected[q]).collect();
        if !lab.is_empty() && !unl.is_empty() {
            let l: Vec<Vec<f64>> = lab.iter().map(|&q| column(q)).collect();
            let u: Vec<Vec<f64>> = unl.iter().map(|&q| column(q)).collect();
            for (fused, &q) in ref_cap(&l, &u, p.gamma, eps).iter().zip(&lab) {
                for k in 0..f {
                    head_in[k * n + q] = fused[k];
                }
            }
        }
    }
    let head_pre: Vec<f64> = (0..n)
        .map(|q| {
            let z: f64 = p.head_b + (0..f).map(|k| p.head_w[k] * head_in[k * n + q]).sum::<f64>();
            z * HEAD_GAIN
        })
        .collect();
    let kink_margin = pre1
        .iter()
        .chain(&pre2)
        .chain(&head_pre)
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    RefForward {
        features: act2,
        head_in,
        prediction: head_pre.iter().map(|v| v.max(0.0)).collect(),
        kink_margin,
    }
}

/// `0.5 * mean over selected cells of (pred - gt)^2`.
pub fn ref_masked_loss(pred: &[f64], gt: &[f64], selected: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for ((p, g), &s) in pred.iter().zip(gt).zip(selected) {
        if s {
            total += (p - g) * (p - g);
            n += 1;
        }
    }
    0.5 * total / n as f64
}

/// Central differences of `f` at `x` with step `h`, one coordinate at a time.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)`. Central differences with step
/// 1e-5 carry an absolute rounding error near `1e-16 * |f| / 1e-5`, which for
/// entries below about 1e-5 of the largest one exceeds 1e-6 relative. The
/// floor, 1e-4 of the largest entry, therefore judges such entries by an
/// absolute error of at most 1e-10 of the gradient scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (scale * 1e-4).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
