//! Diagonal-covariance Gaussian mixtures fitted by expectation-maximization.
//!
//! All densities are evaluated in log space. Variances are floored at
//! `EmConfig::variance_floor`; since the expected complete-data
//! log-likelihood is unimodal in each variance, clamping the M-step optimum
//! keeps every iteration monotone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub n_components: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Diagonal of each component covariance.
    pub covariances: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the log-likelihood improves by less than this.
    pub tol: f64,
    pub variance_floor: f64,
    pub seed: u64,
    pub n_restarts: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-8,
            variance_floor: 1e-6,
            seed: 0,
            n_restarts: 4,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iters < 1 || self.n_restarts < 1 {
            return Err(Error::InvalidConfig(format!(
                "EM needs tol > 0, max_iters >= 1 and n_restarts >= 1 (got {}, {}, {})",
                self.tol, self.max_iters, self.n_restarts
            )));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::InvalidConfig("variance floor must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// `n_points x n_components` posteriors.
    pub responsibilities: Vec<Vec<f64>>,
    pub tags: Vec<usize>,
    pub final_log_likelihood: f64,
    /// Log-likelihood before the first M-step and after each iteration.
    pub log_likelihood_trace: Vec<f64>,
}

/// Audit record for a fitted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmRecord {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
    pub seed: u64,
    pub final_log_likelihood: f64,
}

impl GmmRecord {
    pub fn new(model: &GmmModel, seed: u64, final_log_likelihood: f64) -> Self {
        Self {
            weights: model.weights.clone(),
            means: model.means.clone(),
            covariances: model.covariances.clone(),
            seed,
            final_log_likelihood,
        }
    }
}

impl GmmModel {
    fn component_log_density(&self, n: usize, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((&xi, &mu), &var) in x.iter().zip(&self.means[n]).zip(&self.covariances[n]) {
            let d = xi - mu;
            acc += LN_2PI + var.ln() + d * d / var;
        }
        -0.5 * acc
    }

    /// `ln(alpha_n) + ln N(x; mu_n, Sigma_n)` for every component.
    pub fn weighted_log_densities(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_components)
            .map(|n| {
                let w = self.weights[n];
                if w > 0.0 {
                    w.ln() + self.component_log_density(n, x)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "point of dimension {} for a {}-dimensional mixture",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture input"));
        }
        Ok(())
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights into a probability vector.
pub fn softmax_log(log_weights: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_weights);
    log_weights.iter().map(|v| (v - lse).exp()).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn log_likelihood(model: &GmmModel, points: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for x in points {
        model.check_point(x)?;
        total += log_sum_exp(&model.weighted_log_densities(x));
    }
    Ok(total)
}

pub fn posterior(model: &GmmModel, point: &[f64]) -> Result<Vec<f64>> {
    model.check_point(point)?;
    Ok(softmax_log(&model.weighted_log_densities(point)))
}

fn validate_points(points: &[Vec<f64>], n_components: usize) -> Result<usize> {
    if n_components == 0 {
        return Err(Error::InvalidConfig("at least one component is required".into()));
    }
    if points.len() < n_components {
        return Err(Error::TooFewPoints {
            points: points.len(),
            components: n_components,
        });
    }
    let dim = points[0].len();
    if dim == 0 {
        return Err(Error::ShapeMismatch("zero-dimensional points".into()));
    }
    for p in points {
        if p.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "mixed point dimensions {} and {}",
                dim,
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture input"));
        }
    }
    Ok(dim)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-dimension variance of the whole point set, floored.
fn pooled_variance(points: &[Vec<f64>], floor: f64) -> Vec<f64> {
    let n = points.len() as f64;
    let dim = points[0].len();
    (0..dim)
        .map(|d| {
            let mean = points.iter().map(|p| p[d]).sum::<f64>() / n;
            let var = points.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / n;
            var.max(floor)
        })
        .collect()
}

/// k-means++ seeding of the means, uniform weights and pooled variances.
pub fn seed_model(
    points: &[Vec<f64>],
    n_components: usize,
    variance_floor: f64,
    rng: &mut impl Rng,
) -> Result<GmmModel> {
    let dim = validate_points(points, n_components)?;
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &points[chosen[0]]))
        .collect();
    while chosen.len() < n_components {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total implies a positive entry")
        } else {
            // every remaining point duplicates a chosen one
            let free: Vec<usize> = (0..points.len()).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &points[next]));
        }
    }
    let variance = pooled_variance(points, variance_floor);
    Ok(GmmModel {
        n_components,
        dim,
        weights: vec![1.0 / n_components as f64; n_components],
        means: chosen.iter().map(|&i| points[i].clone()).collect(),
        covariances: vec![variance; n_components],
    })
}

fn e_step(model: &GmmModel, points: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let mut ll = 0.0;
    let resp = points
        .iter()
        .map(|x| {
            let logs = model.weighted_log_densities(x);
            let lse = log_sum_exp(&logs);
            ll += lse;
            logs.iter().map(|v| (v - lse).exp()).collect()
        })
        .collect();
    (resp, ll)
}

fn m_step(prev: &GmmModel, points: &[Vec<f64>], resp: &[Vec<f64>], floor: f64) -> GmmModel {
    let n_points = points.len() as f64;
    let mut next = prev.clone();
    for k in 0..prev.n_components {
        let nk: f64 = resp.iter().map(|r| r[k]).sum();
        next.weights[k] = nk / n_points;
        if nk <= 0.0 {
            continue;
        }
        let mut mean = vec![0.0; prev.dim];
        for (x, r) in points.iter().zip(resp) {
            for (m, &xi) in mean.iter_mut().zip(x) {
                *m += r[k] * xi;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nk);
        let mut var = vec![0.0; prev.dim];
        for (x, r) in points.iter().zip(resp) {
            for ((v, &xi), &m) in var.iter_mut().zip(x).zip(&mean) {
                *v += r[k] * (xi - m) * (xi - m);
            }
        }
        var.iter_mut().for_each(|v| *v = (*v / nk).max(floor));
        next.means[k] = mean;
        next.covariances[k] = var;
    }
    let total: f64 = next.weights.iter().sum();
    next.weights.iter_mut().for_each(|w| *w /= total);
    next
}

fn assignment(resp: Vec<Vec<f64>>, ll: f64, trace: Vec<f64>) -> ClusterAssignment {
    let tags = resp.iter().map(|r| argmax(r)).collect();
    ClusterAssignment {
        responsibilities: resp,
        tags,
        final_log_likelihood: ll,
        log_likelihood_trace: trace,
    }
}

/// Runs EM from a caller-supplied starting model.
pub fn em_fit_from(
    points: &[Vec<f64>],
    init: GmmModel,
    config: &EmConfig,
) -> Result<(GmmModel, ClusterAssignment)> {
    config.validate()?;
    let dim = validate_points(points, init.n_components)?;
    if dim != init.dim {
        return Err(Error::ShapeMismatch(format!(
            "{dim}-dimensional points for a {}-dimensional initial model",
            init.dim
        )));
    }
    let mut model = init;
    let (mut resp, mut ll) = e_step(&model, points);
    let mut trace = vec![ll];
    for _ in 0..config.max_iters {
        model = m_step(&model, points, &resp, config.variance_floor);
        let (next_resp, next_ll) = e_step(&model, points);
        trace.push(next_ll);
        let improvement = next_ll - ll;
        resp = next_resp;
        ll = next_ll;
        if improvement < config.tol {
            break;
        }
    }
    if !ll.is_finite() {
        return Err(Error::NonFinite("EM log-likelihood"));
    }
    Ok((model, assignment(resp, ll, trace)))
}

/// Fits `n_components` components with `config.n_restarts` seeded restarts
/// and keeps the one with the highest final log-likelihood.
pub fn em_fit(
    points: &[Vec<f64>],
    n_components: usize,
    config: &EmConfig,
) -> Result<(GmmModel, ClusterAssignment)> {
    config.validate()?;
    validate_points(points, n_components)?;
    let mut best: Option<(GmmModel, ClusterAssignment)> = None;
    for restart in 0..config.n_restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(restart as u64);
        let init = seed_model(points, n_components, config.variance_floor, &mut rng)?;
        let fit = em_fit_from(points, init, config)?;
        let better = match &best {
            None => true,
            Some((_, a)) => fit.1.final_log_likelihood > a.final_log_likelihood,
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}
