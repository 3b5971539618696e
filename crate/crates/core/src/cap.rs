//! Crowd affinity propagation.
//!
//! Labeled-region features are blended with an affinity-weighted average of
//! the unlabeled-region features of the same scene:
//!
//! ```text
//! n = softmax_channels(f + eps)
//! s_ij = softmax_j(n_l[i] . n_u[j])
//! f_l[i]+ = gamma * sum_j s_ij f_u[j] + (1 - gamma) * f_l[i]
//! ```
//!
//! Affinities are measured on the channel-normalized features while the blend
//! acts on the features themselves, so the fused vectors stay in the space the
//! counting head sees at inference time. The module only runs during
//! training; inference never calls into it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::counternet::{FeatureMap, FeatureOrigin, FEATURE_CHANNELS};
use crate::error::{Error, Result};
use crate::grid::Tensor3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapConfig {
    pub eps: f64,
    pub gamma_init: f64,
}

impl Default for CapConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            gamma_init: 0.2,
        }
    }
}

impl CapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 1e-3) {
            return Err(Error::InvalidConfig(format!("CAP eps {} outside (0, 1e-3]", self.eps)));
        }
        if !(0.0..=1.0).contains(&self.gamma_init) {
            return Err(Error::InvalidConfig(format!(
                "gamma_init {} outside [0, 1]",
                self.gamma_init
            )));
        }
        Ok(())
    }
}

/// Row-stochastic `n_labeled x n_unlabeled` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub weights: Vec<f64>,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
}

impl AffinityMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n_unlabeled..(i + 1) * self.n_unlabeled]
    }
}

/// Position-major copy: `positions x channels`.
fn to_rows(f: &FeatureMap) -> Vec<f64> {
    let c = f.channels();
    let n = f.positions();
    let mut rows = vec![0.0; n * c];
    for ch in 0..c {
        for (p, &v) in f.values.channel(ch).iter().enumerate() {
            rows[p * c + ch] = v;
        }
    }
    rows
}

fn from_rows(rows: &[f64], channels: usize, like: &FeatureMap, origin: FeatureOrigin) -> FeatureMap {
    let mut t = Tensor3::zeros(channels, like.values.height, like.values.width);
    let n = like.positions();
    for ch in 0..channels {
        let plane = t.channel_mut(ch);
        for p in 0..n {
            plane[p] = rows[p * channels + ch];
        }
    }
    FeatureMap { values: t, origin }
}

fn softmax_rows(rows: &[f64], channels: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows.len()];
    for (src, dst) in rows.chunks_exact(channels).zip(out.chunks_exact_mut(channels)) {
        let max = src.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v + eps));
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s + eps - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

fn check_finite(f: &FeatureMap, what: &'static str) -> Result<()> {
    if f.values.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Channel softmax of `features + eps` at every position.
pub fn cap_normalize(features: &FeatureMap, eps: f64) -> Result<FeatureMap> {
    if features.channels() == 0 {
        return Err(Error::ShapeMismatch("feature map without channels".into()));
    }
    check_finite(features, "CAP features")?;
    let c = features.channels();
    let rows = softmax_rows(&to_rows(features), c, eps);
    Ok(from_rows(&rows, c, features, features.origin))
}

/// Row-wise softmax of dot products, stabilized by max subtraction. Row `i`
/// lives in `out[i * n_u..]`.
fn affinity_rows(nl: &[f64], nu: &[f64], c: usize, out: &mut [f64]) {
    if c == FEATURE_CHANNELS {
        affinity_rows_impl(nl, nu, FEATURE_CHANNELS, out)
    } else {
        affinity_rows_impl(nl, nu, c, out)
    }
}

// Inlined into call sites with a constant `c` so the channel loops unroll.
#[inline(always)]
fn affinity_rows_impl(nl: &[f64], nu: &[f64], c: usize, out: &mut [f64]) {
    let n_u = nu.len() / c;
    for (li, row) in nl.chunks_exact(c).zip(out.chunks_exact_mut(n_u)) {
        let mut max = f64::NEG_INFINITY;
        for (r, uj) in row.iter_mut().zip(nu.chunks_exact(c)) {
            let mut z = 0.0;
            for k in 0..c {
                z += li[k] * uj[k];
            }
            *r = z;
            max = max.max(z);
        }
        let mut total = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            total += *r;
        }
        let inv = 1.0 / total;
        row.iter_mut().for_each(|r| *r *= inv);
    }
}

/// Affinities between normalized labeled and unlabeled features.
pub fn cap_similarity(f_l: &FeatureMap, f_u: &FeatureMap) -> Result<AffinityMatrix> {
    let c = f_l.channels();
    if c != f_u.channels() {
        return Err(Error::ShapeMismatch(format!(
            "labeled features have {c} channels, unlabeled {}",
            f_u.channels()
        )));
    }
    if f_u.positions() == 0 {
        return Err(Error::EmptyInput("no unlabeled positions"));
    }
    let (n_l, n_u) = (f_l.positions(), f_u.positions());
    let mut weights = vec![0.0; n_l * n_u];
    affinity_rows(&to_rows(f_l), &to_rows(f_u), c, &mut weights);
    Ok(AffinityMatrix {
        weights,
        n_labeled: n_l,
        n_unlabeled: n_u,
    })
}

/// Per labeled row: `sum_j s_ij u_j`.
fn aggregate(affinity: &[f64], u: &[f64], n_l: usize, c: usize) -> Vec<f64> {
    if c == FEATURE_CHANNELS {
        aggregate_impl(affinity, u, n_l, FEATURE_CHANNELS)
    } else {
        aggregate_impl(affinity, u, n_l, c)
    }
}

#[inline(always)]
fn aggregate_impl(affinity: &[f64], u: &[f64], n_l: usize, c: usize) -> Vec<f64> {
    let n_u = u.len() / c;
    let mut agg = vec![0.0; n_l * c];
    for (row, acc) in affinity.chunks_exact(n_u).zip(agg.chunks_exact_mut(c)) {
        for (&s, uj) in row.iter().zip(u.chunks_exact(c)) {
            for k in 0..c {
                acc[k] += s * uj[k];
            }
        }
    }
    agg
}

fn blend(agg: &[f64], l: &[f64], gamma: f64) -> Vec<f64> {
    agg.iter()
        .zip(l)
        .map(|(&a, &x)| gamma * a + (1.0 - gamma) * x)
        .collect()
}

/// `gamma * sum_j s_ij f_u[j] + (1 - gamma) * f_l[i]`.
pub fn cap_propagate(
    f_l: &FeatureMap,
    f_u: &FeatureMap,
    affinity: &AffinityMatrix,
    gamma: f64,
) -> Result<FeatureMap> {
    let c = f_l.channels();
    if c != f_u.channels()
        || affinity.n_labeled != f_l.positions()
        || affinity.n_unlabeled != f_u.positions()
    {
        return Err(Error::ShapeMismatch(format!(
            "affinity {}x{} for {} labeled and {} unlabeled positions ({} vs {} channels)",
            affinity.n_labeled,
            affinity.n_unlabeled,
            f_l.positions(),
            f_u.positions(),
            c,
            f_u.channels()
        )));
    }
    let l = to_rows(f_l);
    let agg = aggregate(&affinity.weights, &to_rows(f_u), f_l.positions(), c);
    Ok(from_rows(&blend(&agg, &l, gamma), c, f_l, FeatureOrigin::LabeledRegion))
}

struct CapCache {
    channels: usize,
    gamma: f64,
    l: Vec<f64>,
    u: Vec<f64>,
    nl: Vec<f64>,
    nu: Vec<f64>,
    affinity: Vec<f64>,
    agg: Vec<f64>,
    labeled_like: FeatureMap,
    unlabeled_like: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct CapGradients {
    pub f_l: FeatureMap,
    pub f_u: FeatureMap,
    pub gamma: f64,
}

/// Forward/backward pair that caches the intermediates of one pass.
pub struct CapLayer {
    eps: f64,
    cache: Option<CapCache>,
}

impl CapLayer {
    pub fn new(config: &CapConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            eps: config.eps,
            cache: None,
        })
    }

    pub fn forward(&mut self, f_l: &FeatureMap, f_u: &FeatureMap, gamma: f64) -> Result<FeatureMap> {
        let c = f_l.channels();
        if c != f_u.channels() {
            return Err(Error::ShapeMismatch(format!(
                "labeled features have {c} channels, unlabeled {}",
                f_u.channels()
            )));
        }
        if f_u.positions() == 0 {
            return Err(Error::EmptyInput("no unlabeled positions"));
        }
        check_finite(f_l, "CAP labeled features")?;
        check_finite(f_u, "CAP unlabeled features")?;
        let (n_l, n_u) = (f_l.positions(), f_u.positions());
        let l = to_rows(f_l);
        let u = to_rows(f_u);
        let nl = softmax_rows(&l, c, self.eps);
        let nu = softmax_rows(&u, c, self.eps);
        let mut affinity = vec![0.0; n_l * n_u];
        affinity_rows(&nl, &nu, c, &mut affinity);
        let agg = aggregate(&affinity, &u, n_l, c);
        let out = blend(&agg, &l, gamma);
        let fused = from_rows(&out, c, f_l, FeatureOrigin::LabeledRegion);
        self.cache = Some(CapCache {
            channels: c,
            gamma,
            l,
            u,
            nl,
            nu,
            affinity,
            agg,
            labeled_like: f_l.clone(),
            unlabeled_like: f_u.clone(),
        });
        Ok(fused)
    }

    pub fn affinity(&self) -> Option<AffinityMatrix> {
        self.cache.as_ref().map(|c| AffinityMatrix {
            weights: c.affinity.clone(),
            n_labeled: c.l.len() / c.channels,
            n_unlabeled: c.u.len() / c.channels,
        })
    }

    /// Gradients of the cached forward pass given the gradient on its output.
    pub fn backward(&self, upstream: &FeatureMap) -> Result<CapGradients> {
        let cache = self.cache.as_ref().ok_or(Error::MissingForward)?;
        let c = cache.channels;
        let n_l = cache.l.len() / c;
        let n_u = cache.u.len() / c;
        if upstream.channels() != c || upstream.positions() != n_l {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient {}x{} for a {c}x{n_l} output",
                upstream.channels(),
                upstream.positions()
            )));
        }
        let g = to_rows(upstream);

        let mut grads = BackwardBuffers {
            d_gamma: 0.0,
            dl: vec![0.0; n_l * c],
            du: vec![0.0; n_u * c],
            dnl: vec![0.0; n_l * c],
            dnu: vec![0.0; n_u * c],
        };
        if c == FEATURE_CHANNELS {
            backward_rows(cache, &g, FEATURE_CHANNELS, &mut grads);
        } else {
            backward_rows(cache, &g, c, &mut grads);
        }
        let BackwardBuffers {
            d_gamma,
            mut dl,
            mut du,
            dnl,
            dnu,
        } = grads;

        channel_softmax_backward(&cache.nl, &dnl, &mut dl, c);
        channel_softmax_backward(&cache.nu, &dnu, &mut du, c);

        Ok(CapGradients {
            f_l: from_rows(&dl, c, &cache.labeled_like, FeatureOrigin::LabeledRegion),
            f_u: from_rows(&du, c, &cache.unlabeled_like, FeatureOrigin::UnlabeledRegion),
            gamma: d_gamma,
        })
    }
}

struct BackwardBuffers {
    d_gamma: f64,
    dl: Vec<f64>,
    du: Vec<f64>,
    dnl: Vec<f64>,
    dnu: Vec<f64>,
}

/// Gradients through the blend and the affinity softmax for every labeled
/// row; the channel softmax Jacobians are applied by the caller.
#[inline(always)]
fn backward_rows(cache: &CapCache, g: &[f64], c: usize, b: &mut BackwardBuffers) {
    let n_l = cache.l.len() / c;
    let n_u = cache.u.len() / c;
    let gamma = cache.gamma;
    let mut ds = vec![0.0; n_u];
    let mut dagg = vec![0.0; c];
        for i in 0..n_l {
            let gi = &g[i * c..(i + 1) * c];
            let li = &cache.l[i * c..(i + 1) * c];
            let ai = &cache.agg[i * c..(i + 1) * c];
            for k in 0..c {
                b.d_gamma += gi[k] * (ai[k] - li[k]);
                b.dl[i * c + k] = (1.0 - gamma) * gi[k];
                dagg[k] = gamma * gi[k];
            }
            let row = &cache.affinity[i * n_u..(i + 1) * n_u];
            // d s_ij and the direct path into f_u
            let mut weighted = 0.0;
            for j in 0..n_u {
                let uj = &cache.u[j * c..(j + 1) * c];
                let duj = &mut b.du[j * c..(j + 1) * c];
                let mut d = 0.0;
                for k in 0..c {
                    d += dagg[k] * uj[k];
                    duj[k] += row[j] * dagg[k];
                }
                ds[j] = d;
                weighted += row[j] * d;
            }
            // row softmax Jacobian, then the dot-product logits
            let nli = &cache.nl[i * c..(i + 1) * c];
            let dnli = &mut b.dnl[i * c..(i + 1) * c];
            for j in 0..n_u {
                let dz = row[j] * (ds[j] - weighted);
                let nuj = &cache.nu[j * c..(j + 1) * c];
                let dnuj = &mut b.dnu[j * c..(j + 1) * c];
                for k in 0..c {
                    dnli[k] += dz * nuj[k];
                    dnuj[k] += dz * nli[k];
                }
            }
        }

}

/// Accumulates `n * (dn - <n, dn>)` into `dx` for each position.
fn channel_softmax_backward(n: &[f64], dn: &[f64], dx: &mut [f64], c: usize) {
    for ((ni, dni), dxi) in n
        .chunks_exact(c)
        .zip(dn.chunks_exact(c))
        .zip(dx.chunks_exact_mut(c))
    {
        let dot: f64 = ni.iter().zip(dni).map(|(a, b)| a * b).sum();
        for k in 0..c {
            dxi[k] += ni[k] * (dni[k] - dot);
        }
    }
}

/// Writes selected affinity rows as CSV, one line per (labeled, unlabeled)
/// pair.
pub fn write_affinity_csv(
    path: &Path,
    affinity: &AffinityMatrix,
    labeled_cells: &[(usize, usize)],
    unlabeled_cells: &[(usize, usize)],
    rows: &[usize],
) -> Result<()> {
    let mut out = String::from("labeled_index,labeled_row,labeled_col,unlabeled_row,unlabeled_col,weight\n");
    for &i in rows {
        if i >= affinity.n_labeled {
            return Err(Error::InvalidConfig(format!(
                "labeled position {i} out of range (have {})",
                affinity.n_labeled
            )));
        }
        let (lr, lc) = labeled_cells[i];
        for (j, &w) in affinity.row(i).iter().enumerate() {
            let (ur, uc) = unlabeled_cells[j];
            out.push_str(&format!("{i},{lr},{lc},{ur},{uc},{w:.16e}\n"));
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fmap(channels: usize, rows: &[&[f64]]) -> FeatureMap {
        // rows are positions; build a channels x 1 x n map
        let n = rows.len();
        let mut t = Tensor3::zeros(channels, 1, n);
        for (p, r) in rows.iter().enumerate() {
            for ch in 0..channels {
                t.channel_mut(ch)[p] = r[ch];
            }
        }
        FeatureMap {
            values: t,
            origin: FeatureOrigin::Full,
        }
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, n: usize) -> FeatureMap {
        let data = (0..c * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        FeatureMap {
            values: Tensor3::from_vec(c, 1, n, data).unwrap(),
            origin: FeatureOrigin::Full,
        }
    }

    #[test]
    fn normalize_cases() {
        let f = fmap(4, &[&[3.0, 3.0, 3.0, 3.0]]);
        let n = cap_normalize(&f, 1e-6).unwrap();
        for ch in 0..4 {
            assert!((n.values.channel(ch)[0] - 0.25).abs() < 1e-15);
        }
        let two = cap_normalize(&fmap(2, &[&[0.0, 3f64.ln()]]), 1e-6).unwrap();
        assert!((two.values.channel(0)[0] - 0.25).abs() < 1e-12);
        assert!((two.values.channel(1)[0] - 0.75).abs() < 1e-12);

        let a = cap_normalize(&fmap(3, &[&[0.1, -0.4, 2.0]]), 1e-6).unwrap();
        let b = cap_normalize(&fmap(3, &[&[5.1, 4.6, 7.0]]), 1e-6).unwrap();
        for ch in 0..3 {
            assert!((a.values.channel(ch)[0] - b.values.channel(ch)[0]).abs() < 1e-12);
        }
        assert!(cap_normalize(&fmap(2, &[&[f64::NAN, 0.0]]), 1e-6).is_err());
    }

    #[test]
    fn similarity_cases() {
        let l = fmap(2, &[&[1.0, 0.0], &[0.3, 0.7]]);
        let same = fmap(2, &[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]);
        let s = cap_similarity(&l, &same).unwrap();
        assert!(s.weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));

        let single = cap_similarity(&l, &fmap(2, &[&[0.9, 0.1]])).unwrap();
        assert!(single.weights.iter().all(|&w| w == 1.0));

        let one = fmap(2, &[&[1.0, 0.0]]);
        let u = fmap(2, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = cap_similarity(&one, &u).unwrap();
        let e = std::f64::consts::E;
        assert!((s.row(0)[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((s.row(0)[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((s.row(0)[0] - 0.7311).abs() < 1e-4);

        assert!(cap_similarity(&one, &fmap(3, &[&[1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn propagate_cases() {
        let l = fmap(2, &[&[0.2, 0.8], &[0.9, 0.1]]);
        let u = fmap(2, &[&[0.6, 0.4], &[0.1, 0.9], &[0.3, 0.3]]);
        let s = cap_similarity(&l, &u).unwrap();
        assert_eq!(cap_propagate(&l, &u, &s, 0.0).unwrap().values, l.values);

        let v = fmap(2, &[&[0.7, 0.3], &[0.7, 0.3]]);
        let sv = cap_similarity(&l, &v).unwrap();
        let out = cap_propagate(&l, &v, &sv, 1.0).unwrap();
        for p in 0..2 {
            assert!((out.values.channel(0)[p] - 0.7).abs() < 1e-15);
            assert!((out.values.channel(1)[p] - 0.3).abs() < 1e-15);
        }

        let l1 = fmap(2, &[&[0.2, 0.8]]);
        let u1 = fmap(2, &[&[0.6, 0.4]]);
        let s1 = cap_similarity(&l1, &u1).unwrap();
        let out = cap_propagate(&l1, &u1, &s1, 0.5).unwrap();
        assert!((out.values.channel(0)[0] - 0.4).abs() < 1e-15);
        assert!((out.values.channel(1)[0] - 0.6).abs() < 1e-15);

        assert!(cap_propagate(&l1, &u, &s1, 0.5).is_err());
    }

    #[test]
    fn backward_needs_forward() {
        let layer = CapLayer::new(&CapConfig::default()).unwrap();
        let g = fmap(2, &[&[1.0, 0.0]]);
        assert!(matches!(layer.backward(&g), Err(Error::MissingForward)));
    }

    #[test]
    fn zero_gamma_blocks_unlabeled_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = random_map(&mut rng, 3, 4);
        let u = random_map(&mut rng, 3, 6);
        let g = random_map(&mut rng, 3, 4);
        let mut layer = CapLayer::new(&CapConfig::default()).unwrap();
        layer.forward(&l, &u, 0.0).unwrap();
        let grads = layer.backward(&g).unwrap();
        assert!(grads.f_u.values.data.iter().all(|&v| v == 0.0));

        layer.forward(&l, &u, 0.3).unwrap();
        let grads = layer.backward(&g).unwrap();
        assert!(grads.f_u.values.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(CapConfig { eps: 0.0, gamma_init: 0.2 }.validate().is_err());
        assert!(CapConfig { eps: 1e-2, gamma_init: 0.2 }.validate().is_err());
        assert!(CapConfig { eps: 1e-6, gamma_init: 1.5 }.validate().is_err());
        assert!(CapConfig::default().validate().is_ok());
    }
}
