//! Ground-truth density maps, the masked pixel-wise Euclidean loss and count
//! metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::regionselect::LabelMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    GroundTruth,
    Predicted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    pub values: Grid,
    pub source: MapSource,
}

impl DensityMap {
    pub fn predicted(values: Grid) -> Self {
        Self {
            values,
            source: MapSource::Predicted,
        }
    }

    pub fn count(&self) -> f64 {
        self.values.sum()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            values: self.values.flip_horizontal(),
            source: self.source,
        }
    }
}

/// Gaussian kernel with a fixed bandwidth, cut off at `truncation_radius`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub sigma: f64,
    pub truncation_radius: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            sigma: 4.0,
            truncation_radius: 16.0,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma {} must be > 0", self.sigma)));
        }
        if !(self.truncation_radius >= 2.0 * self.sigma) {
            return Err(Error::InvalidConfig(format!(
                "truncation radius {} below 2*sigma",
                self.truncation_radius
            )));
        }
        Ok(())
    }
}

/// Places one unit of mass per head, spread by a truncated Gaussian centred on
/// the head. Each contribution is renormalized after truncation and clipping
/// at the borders, so the map sums to the head count.
pub fn generate_density_map(
    heads: &[(f64, f64)],
    shape: (usize, usize),
    kernel: &KernelConfig,
) -> Result<DensityMap> {
    kernel.validate()?;
    let (h, w) = shape;
    let mut grid = Grid::zeros(h, w);
    let radius = kernel.truncation_radius;
    let inv_two_var = 1.0 / (2.0 * kernel.sigma * kernel.sigma);
    let mut weights = Vec::new();
    for &(r, c) in heads {
        if !(r >= 0.0 && r < h as f64 && c >= 0.0 && c < w as f64) {
            return Err(Error::HeadOutOfBounds {
                row: r,
                col: c,
                height: h,
                width: w,
            });
        }
        let r0 = (r - radius).floor().max(0.0) as usize;
        let r1 = ((r + radius).ceil() as usize).min(h);
        let c0 = (c - radius).floor().max(0.0) as usize;
        let c1 = ((c + radius).ceil() as usize).min(w);
        weights.clear();
        let mut total = 0.0;
        for i in r0..r1 {
            let dr = i as f64 + 0.5 - r;
            for j in c0..c1 {
                let dc = j as f64 + 0.5 - c;
                let d2 = dr * dr + dc * dc;
                if d2 <= radius * radius {
                    let v = (-d2 * inv_two_var).exp();
                    weights.push((i, j, v));
                    total += v;
                }
            }
        }
        if total > 0.0 {
            for &(i, j, v) in &weights {
                *grid.get_mut(i, j) += v / total;
            }
        } else {
            *grid.get_mut(r as usize, c as usize) += 1.0;
        }
    }
    Ok(DensityMap {
        values: grid,
        source: MapSource::GroundTruth,
    })
}

fn check_same_shape(pred: &Grid, gt: &Grid, mask: &LabelMask) -> Result<()> {
    if pred.shape() != gt.shape() || pred.shape() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?}, ground truth {:?}, mask {:?}",
            pred.shape(),
            gt.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

/// Half the mean squared error over the cells selected by `mask`.
pub fn masked_euclidean_loss(pred: &DensityMap, gt: &DensityMap, mask: &LabelMask) -> Result<f64> {
    masked_loss_and_grad(pred, gt, mask).map(|(loss, _)| loss)
}

/// Loss together with its gradient with respect to the prediction.
pub fn masked_loss_and_grad(
    pred: &DensityMap,
    gt: &DensityMap,
    mask: &LabelMask,
) -> Result<(f64, Grid)> {
    check_same_shape(&pred.values, &gt.values, mask)?;
    let n = mask.n_selected();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let inv_n = 1.0 / n as f64;
    let (h, w) = pred.shape();
    let mut grad = Grid::zeros(h, w);
    let mut sum_sq = 0.0;
    for (k, &sel) in mask.selected.iter().enumerate() {
        if sel {
            let d = pred.values.data[k] - gt.values.data[k];
            sum_sq += d * d;
            grad.data[k] = d * inv_n;
        }
    }
    Ok((0.5 * sum_sq * inv_n, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Predicted minus ground-truth count, per sample.
    pub per_sample_errors: Vec<f64>,
}

impl CountMetrics {
    pub fn from_errors(errors: Vec<f64>) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::EmptyInput("no samples to evaluate"));
        }
        let s = errors.len() as f64;
        let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / s;
        let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / s).sqrt();
        Ok(Self {
            mae,
            rmse,
            per_sample_errors: errors,
        })
    }
}

pub fn evaluate(preds: &[DensityMap], gts: &[DensityMap]) -> Result<CountMetrics> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} ground-truth maps",
            preds.len(),
            gts.len()
        )));
    }
    let errors = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "prediction {:?} vs ground truth {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            Ok(p.count() - g.count())
        })
        .collect::<Result<Vec<_>>>()?;
    CountMetrics::from_errors(errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regionselect::LabelMask;
    use proptest::prelude::*;

    fn map_from(values: Vec<f64>, h: usize, w: usize) -> DensityMap {
        DensityMap::predicted(Grid::from_vec(h, w, values).unwrap())
    }

    #[test]
    fn empty_head_list_is_zero() {
        let m = generate_density_map(&[], (16, 16), &KernelConfig::default()).unwrap();
        assert!(m.values.data.iter().all(|&v| v == 0.0));
        assert_eq!(m.source, MapSource::GroundTruth);
    }

    #[test]
    fn centre_and_corner_heads_have_unit_mass() {
        let k = KernelConfig::default();
        let centre = generate_density_map(&[(32.0, 32.0)], (64, 64), &k).unwrap();
        assert!((centre.count() - 1.0).abs() <= 1e-6);
        let corner = generate_density_map(&[(0.0, 0.0)], (64, 64), &k).unwrap();
        assert!((corner.count() - 1.0).abs() <= 1e-6);
        assert!(corner.values.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn out_of_bounds_head_is_rejected() {
        let k = KernelConfig::default();
        assert!(matches!(
            generate_density_map(&[(16.0, 3.0)], (16, 16), &k),
            Err(Error::HeadOutOfBounds { .. })
        ));
        assert!(generate_density_map(&[(-0.1, 3.0)], (16, 16), &k).is_err());
    }

    #[test]
    fn kernel_radius_must_cover_two_sigma() {
        let k = KernelConfig {
            sigma: 4.0,
            truncation_radius: 7.9,
        };
        assert!(generate_density_map(&[], (8, 8), &k).is_err());
    }

    #[test]
    fn masked_loss_cases() {
        let gt = map_from(vec![0.5; 16], 4, 4);
        let full = LabelMask::full(4, 4);
        assert_eq!(masked_euclidean_loss(&gt, &gt, &full).unwrap(), 0.0);

        let shifted = map_from(vec![1.5; 16], 4, 4);
        assert!((masked_euclidean_loss(&shifted, &gt, &full).unwrap() - 0.5).abs() < 1e-15);

        // error only outside the left half
        let half = LabelMask::from_columns(4, 4, &[(0, 2)]);
        let mut v = vec![0.5; 16];
        for r in 0..4 {
            v[r * 4 + 2] = 9.0;
            v[r * 4 + 3] = -3.0;
        }
        let pred = map_from(v, 4, 4);
        assert_eq!(masked_euclidean_loss(&pred, &gt, &half).unwrap(), 0.0);

        let empty = LabelMask::from_columns(4, 4, &[]);
        assert!(matches!(
            masked_euclidean_loss(&pred, &gt, &empty),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn metrics_hand_values() {
        let m = CountMetrics::from_errors(vec![10.0 - 12.0, 20.0 - 16.0]).unwrap();
        assert!((m.mae - 3.0).abs() < 1e-15);
        assert!((m.rmse - 10f64.sqrt()).abs() < 1e-15);

        let single = CountMetrics::from_errors(vec![-2.5]).unwrap();
        assert_eq!(single.mae, single.rmse);

        assert!(evaluate(&[], &[]).is_err());
    }

    #[test]
    fn evaluate_identity_is_zero() {
        let k = KernelConfig::default();
        let a = generate_density_map(&[(3.0, 4.0), (10.0, 10.0)], (16, 16), &k).unwrap();
        let b = generate_density_map(&[(1.0, 1.0)], (16, 16), &k).unwrap();
        let m = evaluate(&[a.clone(), b.clone()], &[a, b]).unwrap();
        assert_eq!((m.mae, m.rmse), (0.0, 0.0));
    }

    fn heads_strategy(h: f64, w: f64) -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((0.0..h, 0.0..w), 0..40)
    }

    proptest! {
        #[test]
        fn mass_equals_count(heads in heads_strategy(24.0, 20.0)) {
            let m = generate_density_map(&heads, (24, 20), &KernelConfig::default()).unwrap();
            let n = heads.len() as f64;
            prop_assert!((m.count() - n).abs() <= 1e-6 * n.max(1.0));
            prop_assert!(m.values.data.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn maps_are_linear_in_heads(a in heads_strategy(16.0, 16.0), b in heads_strategy(16.0, 16.0)) {
            let k = KernelConfig::default();
            let joint: Vec<_> = a.iter().chain(&b).cloned().collect();
            let ma = generate_density_map(&a, (16, 16), &k).unwrap();
            let mb = generate_density_map(&b, (16, 16), &k).unwrap();
            let mab = generate_density_map(&joint, (16, 16), &k).unwrap();
            for i in 0..256 {
                prop_assert!((mab.values.data[i] - ma.values.data[i] - mb.values.data[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn rmse_dominates_mae(errors in prop::collection::vec(-100.0..100.0f64, 1..30)) {
            let m = CountMetrics::from_errors(errors).unwrap();
            prop_assert!(m.rmse + 1e-12 >= m.mae && m.mae >= 0.0);
        }

        #[test]
        fn full_mask_matches_unmasked_loss(vals in prop::collection::vec(0.0..1.0f64, 32)) {
            let pred = map_from(vals.clone(), 4, 8);
            let gt = map_from(vals.iter().map(|v| v * 0.5).collect(), 4, 8);
            let direct = 0.5 * vals.iter().map(|v| (v * 0.5).powi(2)).sum::<f64>() / 32.0;
            let masked = masked_euclidean_loss(&pred, &gt, &LabelMask::full(4, 8)).unwrap();
            prop_assert!((masked - direct).abs() <= 1e-15);
        }
    }
}
