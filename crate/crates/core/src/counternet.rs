//! A three-layer density counter (3x3 conv, 3x3 conv, 1x1 head, each followed
//! by ReLU) with hand-derived gradients and a masked training loop.
//!
//! CAP attaches between the second convolution and the head during training.
//! [`infer`] runs the plain forward pass and never consults CAP state.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cap::{CapConfig, CapLayer};
use crate::densitymap::{evaluate, masked_loss_and_grad, DensityMap};
use crate::error::{Error, Result};
use crate::grid::{read_f64_le, write_f64_le, Grid, Tensor3};
use crate::regionselect::LabelMask;

/// Feature width of both convolutions.
pub const FEATURE_CHANNELS: usize = 8;

/// Fixed scale on the 1x1 head, so freshly initialised weights already emit
/// densities of the order of a few heads per hundred cells.
pub const HEAD_GAIN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureOrigin {
    LabeledRegion,
    UnlabeledRegion,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor3,
    pub origin: FeatureOrigin,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.channels
    }

    pub fn positions(&self) -> usize {
        self.values.plane_len()
    }

    /// Columns of the feature map at the given flat positions, as a
    /// `channels x 1 x positions.len()` map.
    pub fn gather(&self, positions: &[usize], origin: FeatureOrigin) -> FeatureMap {
        let c = self.channels();
        let mut t = Tensor3::zeros(c, 1, positions.len());
        for ch in 0..c {
            let src = self.values.channel(ch);
            let dst = t.channel_mut(ch);
            for (d, &p) in dst.iter_mut().zip(positions) {
                *d = src[p];
            }
        }
        FeatureMap { values: t, origin }
    }
}

fn scatter(dst: &mut Tensor3, src: &FeatureMap, positions: &[usize]) {
    for ch in 0..dst.channels {
        let s = src.values.channel(ch);
        let d = dst.channel_mut(ch);
        for (&v, &p) in s.iter().zip(positions) {
            d[p] = v;
        }
    }
}

fn scatter_add(dst: &mut Tensor3, src: &FeatureMap, positions: &[usize]) {
    for ch in 0..dst.channels {
        let s = src.values.channel(ch);
        let d = dst.channel_mut(ch);
        for (&v, &p) in s.iter().zip(positions) {
            d[p] += v;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterParams {
    pub in_channels: usize,
    pub features: usize,
    /// `[features][in_channels][3][3]`
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    /// `[features][features][3][3]`
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: f64,
    /// CAP fusion weight; trained jointly, unused at inference.
    pub gamma: f64,
}

impl CounterParams {
    pub fn zeros(in_channels: usize, features: usize) -> Self {
        Self {
            in_channels,
            features,
            conv1_w: vec![0.0; features * in_channels * 9],
            conv1_b: vec![0.0; features],
            conv2_w: vec![0.0; features * features * 9],
            conv2_b: vec![0.0; features],
            head_w: vec![0.0; features],
            head_b: 0.0,
            gamma: 0.0,
        }
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init(in_channels: usize, features: usize, gamma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(in_channels, features);
        let mut fill = |w: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        };
        fill(&mut p.conv1_w, in_channels * 9);
        fill(&mut p.conv2_w, features * 9);
        fill(&mut p.head_w, features);
        p.gamma = gamma;
        p
    }

    /// Copy with the CAP fusion weight removed.
    pub fn strip_cap(&self) -> Self {
        Self {
            gamma: 0.0,
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.conv1_w.len() + self.conv1_b.len() + self.conv2_w.len() + self.conv2_b.len()
            + self.head_w.len()
            + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.conv1_w);
        v.extend_from_slice(&self.conv1_b);
        v.extend_from_slice(&self.conv2_w);
        v.extend_from_slice(&self.conv2_b);
        v.extend_from_slice(&self.head_w);
        v.push(self.head_b);
        v.push(self.gamma);
        v
    }

    pub fn from_flat(in_channels: usize, features: usize, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(in_channels, features);
        if flat.len() != p.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a counter expecting {}",
                flat.len(),
                p.len()
            )));
        }
        let mut rest = flat;
        for dst in [
            &mut p.conv1_w,
            &mut p.conv1_b,
            &mut p.conv2_w,
            &mut p.conv2_b,
            &mut p.head_w,
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        p.head_b = rest[0];
        p.gamma = rest[1];
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    fn check_input(&self, input: &Tensor3) -> Result<()> {
        if input.channels != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "input has {} channels, counter expects {}",
                input.channels, self.in_channels
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsHeader {
    in_channels: usize,
    features: usize,
    layout: Vec<(String, usize)>,
    total: usize,
}

/// Writes `params.bin` (little-endian f64) and a JSON shape header.
pub fn save_params(params: &CounterParams, bin_path: &Path, json_path: &Path) -> Result<()> {
    let header = ParamsHeader {
        in_channels: params.in_channels,
        features: params.features,
        layout: vec![
            ("conv1_w".into(), params.conv1_w.len()),
            ("conv1_b".into(), params.conv1_b.len()),
            ("conv2_w".into(), params.conv2_w.len()),
            ("conv2_b".into(), params.conv2_b.len()),
            ("head_w".into(), params.head_w.len()),
            ("head_b".into(), 1),
            ("gamma".into(), 1),
        ],
        total: params.len(),
    };
    let json = serde_json::to_vec_pretty(&header)?;
    std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
    write_f64_le(bin_path, &params.to_flat())
}

pub fn load_params(bin_path: &Path, json_path: &Path) -> Result<CounterParams> {
    let bytes = std::fs::read(json_path).map_err(|e| Error::io(json_path, e))?;
    let header: ParamsHeader = serde_json::from_slice(&bytes)?;
    let flat = read_f64_le(bin_path, header.total)?;
    CounterParams::from_flat(header.in_channels, header.features, &flat)
}

fn conv3x3_forward(input: &Tensor3, w: &[f64], b: &[f64], c_out: usize) -> Tensor3 {
    let (c_in, h, wd) = (input.channels, input.height, input.width);
    let mut out = Tensor3::zeros(c_out, h, wd);
    for o in 0..c_out {
        let plane = out.channel_mut(o);
        plane.fill(b[o]);
        for i in 0..c_in {
            let src = input.channel(i);
            for ky in 0..3 {
                for kx in 0..3 {
                    let wt = w[((o * c_in + i) * 3 + ky) * 3 + kx];
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (wd as isize - dx).min(wd as isize) as usize;
                    for y in 0..h {
                        let yy = y as isize + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let yy = yy as usize;
                        let dst = &mut plane[y * wd + x0..y * wd + x1];
                        let s0 = (yy * wd) as isize + x0 as isize + dx;
                        let s = &src[s0 as usize..s0 as usize + (x1 - x0)];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += wt * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns weight and bias gradients, plus the input gradient when asked.
fn conv3x3_backward(
    input: &Tensor3,
    w: &[f64],
    d_out: &Tensor3,
    want_input: bool,
) -> (Vec<f64>, Vec<f64>, Option<Tensor3>) {
    let (c_in, h, wd) = (input.channels, input.height, input.width);
    let c_out = d_out.channels;
    let mut dw = vec![0.0; c_out * c_in * 9];
    let db: Vec<f64> = (0..c_out).map(|o| d_out.channel(o).iter().sum()).collect();
    let mut d_in = want_input.then(|| Tensor3::zeros(c_in, h, wd));
    for o in 0..c_out {
        let g = d_out.channel(o);
        for i in 0..c_in {
            let src = input.channel(i);
            for ky in 0..3 {
                for kx in 0..3 {
                    let idx = ((o * c_in + i) * 3 + ky) * 3 + kx;
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (wd as isize - dx).min(wd as isize) as usize;
                    let mut acc = 0.0;
                    for y in 0..h {
                        let yy = y as isize + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let gy = &g[y * wd + x0..y * wd + x1];
                        let s0 = (yy as usize * wd) as isize + x0 as isize + dx;
                        let s = &src[s0 as usize..s0 as usize + (x1 - x0)];
                        acc += gy.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dw[idx] = acc;
                    if let Some(d_in) = d_in.as_mut() {
                        let wt = w[idx];
                        let dst_plane = d_in.channel_mut(i);
                        for y in 0..h {
                            let yy = y as isize + dy;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            let gy = &g[y * wd + x0..y * wd + x1];
                            let s0 = (yy as usize * wd) as isize + x0 as isize + dx;
                            let dst = &mut dst_plane[s0 as usize..s0 as usize + (x1 - x0)];
                            for (d, &v) in dst.iter_mut().zip(gy) {
                                *d += wt * v;
                            }
                        }
                    }
                }
            }
        }
    }
    (dw, db, d_in)
}

fn relu_in_place(t: &mut Tensor3) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the pre-activation was not positive.
fn relu_backward(pre: &Tensor3, grad: &mut Tensor3) {
    for (g, &p) in grad.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

struct TrunkCache {
    input: Tensor3,
    pre1: Tensor3,
    act1: Tensor3,
    pre2: Tensor3,
    act2: Tensor3,
}

fn trunk_forward(params: &CounterParams, input: &Tensor3) -> TrunkCache {
    let f = params.features;
    let pre1 = conv3x3_forward(input, &params.conv1_w, &params.conv1_b, f);
    let mut act1 = pre1.clone();
    relu_in_place(&mut act1);
    let pre2 = conv3x3_forward(&act1, &params.conv2_w, &params.conv2_b, f);
    let mut act2 = pre2.clone();
    relu_in_place(&mut act2);
    TrunkCache {
        input: input.clone(),
        pre1,
        act1,
        pre2,
        act2,
    }
}

/// Head pre-activations for a feature tensor.
fn head_forward(params: &CounterParams, features: &Tensor3) -> Grid {
    let mut pre = Grid::from_vec(
        features.height,
        features.width,
        vec![params.head_b; features.plane_len()],
    )
    .expect("plane sized");
    for (k, &w) in params.head_w.iter().enumerate() {
        for (p, &v) in pre.data.iter_mut().zip(features.channel(k)) {
            *p += w * v;
        }
    }
    pre.data.iter_mut().for_each(|p| *p *= HEAD_GAIN);
    pre
}

fn relu_grid(pre: &Grid) -> Grid {
    Grid {
        height: pre.height,
        width: pre.width,
        data: pre.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// Gradients with respect to every parameter and, optionally, the input.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: CounterParams,
    pub input: Option<Tensor3>,
}

fn trunk_backward(
    params: &CounterParams,
    cache: &TrunkCache,
    mut d_features: Tensor3,
    grads: &mut CounterParams,
    want_input: bool,
) -> Option<Tensor3> {
    relu_backward(&cache.pre2, &mut d_features);
    let (dw2, db2, d_act1) = conv3x3_backward(&cache.act1, &params.conv2_w, &d_features, true);
    let mut d_act1 = d_act1.expect("requested");
    relu_backward(&cache.pre1, &mut d_act1);
    let (dw1, db1, d_input) = conv3x3_backward(&cache.input, &params.conv1_w, &d_act1, want_input);
    grads.conv1_w = dw1;
    grads.conv1_b = db1;
    grads.conv2_w = dw2;
    grads.conv2_b = db2;
    d_input
}

/// Returns `(d_features, d_head_w, d_head_b)` for a gradient on the head output.
fn head_backward(
    params: &CounterParams,
    head_in: &Tensor3,
    head_pre: &Grid,
    d_pred: &Grid,
) -> (Tensor3, Vec<f64>, f64) {
    let d_pre: Vec<f64> = d_pred
        .data
        .iter()
        .zip(&head_pre.data)
        .map(|(&g, &p)| if p > 0.0 { g * HEAD_GAIN } else { 0.0 })
        .collect();
    let c = params.features;
    let mut d_feat = Tensor3::zeros(c, head_in.height, head_in.width);
    let mut d_w = vec![0.0; c];
    for k in 0..c {
        let w = params.head_w[k];
        let plane = d_feat.channel_mut(k);
        for (d, &g) in plane.iter_mut().zip(&d_pre) {
            *d = w * g;
        }
        d_w[k] = head_in.channel(k).iter().zip(&d_pre).map(|(a, b)| a * b).sum();
    }
    (d_feat, d_w, d_pre.iter().sum())
}

/// Feature map and predicted density for one input.
pub fn forward(params: &CounterParams, input: &Tensor3) -> Result<(FeatureMap, DensityMap)> {
    params.check_input(input)?;
    let cache = trunk_forward(params, input);
    let pred = relu_grid(&head_forward(params, &cache.act2));
    Ok((
        FeatureMap {
            values: cache.act2,
            origin: FeatureOrigin::Full,
        },
        DensityMap::predicted(pred),
    ))
}

/// Back-propagates a gradient on the predicted density map through the plain
/// (CAP-free) forward pass.
pub fn backward(params: &CounterParams, input: &Tensor3, upstream: &Grid) -> Result<Gradients> {
    params.check_input(input)?;
    if upstream.shape() != (input.height, input.width) {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} for a {}x{} input",
            upstream.shape(),
            input.height,
            input.width
        )));
    }
    let cache = trunk_forward(params, input);
    let head_pre = head_forward(params, &cache.act2);
    let mut grads = CounterParams::zeros(params.in_channels, params.features);
    let (d_feat, d_hw, d_hb) = head_backward(params, &cache.act2, &head_pre, upstream);
    grads.head_w = d_hw;
    grads.head_b = d_hb;
    let d_input = trunk_backward(params, &cache, d_feat, &mut grads, true);
    Ok(Gradients {
        params: grads,
        input: d_input,
    })
}

/// Masked Euclidean loss of one scene and its exact gradient. With `cap`, the
/// labeled positions' features are fused with the unlabeled ones before the
/// head.
pub fn loss_and_grad(
    params: &CounterParams,
    input: &Tensor3,
    gt: &DensityMap,
    mask: &LabelMask,
    cap: Option<&CapConfig>,
    want_input: bool,
) -> Result<(f64, Gradients)> {
    params.check_input(input)?;
    let cache = trunk_forward(params, input);
    let labeled: Vec<usize> = (0..mask.selected.len()).filter(|&p| mask.selected[p]).collect();
    let unlabeled: Vec<usize> = (0..mask.selected.len()).filter(|&p| !mask.selected[p]).collect();

    let mut cap_layer = None;
    let head_in = match cap {
        Some(cfg) if !unlabeled.is_empty() && !labeled.is_empty() => {
            let full = FeatureMap {
                values: cache.act2.clone(),
                origin: FeatureOrigin::Full,
            };
            let f_l = full.gather(&labeled, FeatureOrigin::LabeledRegion);
            let f_u = full.gather(&unlabeled, FeatureOrigin::UnlabeledRegion);
            let mut layer = CapLayer::new(cfg)?;
            let fused = layer.forward(&f_l, &f_u, params.gamma)?;
            let mut head_in = cache.act2.clone();
            scatter(&mut head_in, &fused, &labeled);
            cap_layer = Some(layer);
            head_in
        }
        _ => cache.act2.clone(),
    };

    let head_pre = head_forward(params, &head_in);
    let pred = DensityMap::predicted(relu_grid(&head_pre));
    let (loss, d_pred) = masked_loss_and_grad(&pred, gt, mask)?;

    let mut grads = CounterParams::zeros(params.in_channels, params.features);
    let (d_head_in, d_hw, d_hb) = head_backward(params, &head_in, &head_pre, &d_pred);
    grads.head_w = d_hw;
    grads.head_b = d_hb;

    let d_features = match &cap_layer {
        Some(layer) => {
            let d_head = FeatureMap {
                values: d_head_in,
                origin: FeatureOrigin::Full,
            };
            let upstream = d_head.gather(&labeled, FeatureOrigin::LabeledRegion);
            let cap_grads = layer.backward(&upstream)?;
            grads.gamma = cap_grads.gamma;
            // unlabeled cells receive no direct loss gradient
            let mut d = d_head.values;
            scatter(&mut d, &cap_grads.f_l, &labeled);
            scatter_add(&mut d, &cap_grads.f_u, &unlabeled);
            d
        }
        None => d_head_in,
    };
    let d_input = trunk_backward(params, &cache, d_features, &mut grads, want_input);
    Ok((
        loss,
        Gradients {
            params: grads,
            input: d_input,
        },
    ))
}

/// Predicted density map. CAP never participates here.
pub fn infer(params: &CounterParams, input: &Tensor3) -> Result<DensityMap> {
    forward(params, input).map(|(_, d)| d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub cap_enabled: bool,
    pub cap: CapConfig,
    /// Random horizontal flips of (input, target, mask).
    pub flip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 30,
            schedule: LrSchedule::Cosine,
            cap_enabled: false,
            cap: CapConfig::default(),
            flip: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("Adam epsilon must be > 0".into()));
        }
        self.cap.validate()
    }
}

/// Per-epoch learning-rate multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `0.5 * (1 + cos(pi * epoch / epochs))`: full rate in the first epoch,
    /// decaying towards zero in the last.
    Cosine,
}

impl LrSchedule {
    pub fn factor(&self, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
            }
        }
    }
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(config: &TrainConfig, n_params: usize) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// One supervised scene: input grid, ground-truth map and annotated cells.
#[derive(Clone, Copy, Debug)]
pub struct TrainExample<'a> {
    pub input: &'a Tensor3,
    pub gt: &'a DensityMap,
    pub mask: &'a LabelMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_mae: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_mae\n");
        for r in &self.epochs {
            let val = r.val_mae.map(|v| format!("{v:.16e}")).unwrap_or_default();
            out.push_str(&format!("{},{:.16e},{}\n", r.epoch, r.loss, val));
        }
        out
    }
}

/// Validation inputs and their ground truth.
pub type ValidationSet<'a> = (&'a [&'a Tensor3], &'a [&'a DensityMap]);

/// Trains on `examples` with batch size 1, visiting scenes in a seeded random
/// order each epoch. Starts from `init` when given, else from
/// [`CounterParams::init`] with the config seed.
pub fn train(
    examples: &[TrainExample<'_>],
    config: &TrainConfig,
    init: Option<CounterParams>,
    validation: Option<ValidationSet<'_>>,
) -> Result<(CounterParams, TrainingLog)> {
    config.validate()?;
    let first = examples.first().ok_or(Error::EmptyInput("no training scenes"))?;
    let in_channels = first.input.channels;
    for ex in examples {
        if ex.mask.n_selected() == 0 {
            return Err(Error::EmptyMask);
        }
    }
    let mut params = init.unwrap_or_else(|| {
        CounterParams::init(in_channels, FEATURE_CHANNELS, config.cap.gamma_init, config.seed)
    });
    let flipped: Vec<(Tensor3, DensityMap, LabelMask)> = if config.flip {
        examples
            .iter()
            .map(|e| (e.input.flip_horizontal(), e.gt.flip_horizontal(), e.mask.flip_horizontal()))
            .collect()
    } else {
        Vec::new()
    };
    let cap = config.cap_enabled.then_some(&config.cap);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(config, params.len());
    let mut flat = params.to_flat();
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        adam.set_learning_rate(config.learning_rate * config.schedule.factor(epoch, config.epochs));
        let mut total = 0.0;
        for &i in &order {
            let flip = config.flip && rng.random_bool(0.5);
            let (input, gt, mask) = if flip {
                let f = &flipped[i];
                (&f.0, &f.1, &f.2)
            } else {
                (examples[i].input, examples[i].gt, examples[i].mask)
            };
            let (loss, grads) = loss_and_grad(&params, input, gt, mask, cap, false)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    scene: i,
                    loss,
                });
            }
            total += loss;
            adam.step(&mut flat, &grads.params.to_flat());
            flat[params.len() - 1] = flat[params.len() - 1].clamp(0.0, 1.0);
            params = CounterParams::from_flat(params.in_channels, params.features, &flat)?;
        }
        let val_mae = match validation {
            Some((inputs, gts)) => {
                let preds = inputs
                    .iter()
                    .map(|x| infer(&params, x))
                    .collect::<Result<Vec<_>>>()?;
                let gts: Vec<DensityMap> = gts.iter().map(|g| (*g).clone()).collect();
                Some(evaluate(&preds, &gts)?.mae)
            }
            None => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            loss: total / examples.len() as f64,
            val_mae,
        });
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("trained parameters"));
    }
    Ok((params, log))
}
