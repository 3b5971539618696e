//! Vertical strip partitions and the strategies that choose which strips of a
//! scene get annotated.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::densitymap::DensityMap;
use crate::error::{Error, Result};
use crate::gmm::{em_fit, ClusterAssignment, EmConfig, GmmModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripPartition {
    pub height: usize,
    pub width: usize,
    pub n_strips: usize,
    /// Half-open column intervals `[start, end)`, ordered left to right.
    pub strip_bounds: Vec<(usize, usize)>,
    pub strip_width_fraction: f64,
}

impl StripPartition {
    pub fn strip_width(&self, strip: usize) -> usize {
        let (a, b) = self.strip_bounds[strip];
        b - a
    }

    /// Number of strips that a per-image budget buys, at least one.
    pub fn strips_for_budget(&self, budget_fraction: f64) -> Result<usize> {
        check_budget(budget_fraction)?;
        let n = (budget_fraction * self.n_strips as f64).round() as usize;
        if n == 0 {
            return Err(Error::InvalidConfig(format!(
                "budget {budget_fraction} is too small to select one of {} strips",
                self.n_strips
            )));
        }
        Ok(n.min(self.n_strips))
    }

    pub fn strip_masses(&self, map: &DensityMap) -> Vec<f64> {
        self.strip_bounds
            .iter()
            .map(|&(a, b)| map.values.block_sum(0, self.height, a, b))
            .collect()
    }
}

fn check_budget(budget_fraction: f64) -> Result<()> {
    if !(budget_fraction > 0.0 && budget_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "budget fraction {budget_fraction} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Splits the width into `round(1 / fraction)` equal strips; the last strip
/// takes the remainder columns.
pub fn partition_strips(shape: (usize, usize), strip_width_fraction: f64) -> Result<StripPartition> {
    let (height, width) = shape;
    if !(strip_width_fraction > 0.0 && strip_width_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "strip width fraction {strip_width_fraction} outside (0, 1]"
        )));
    }
    let n_strips = (1.0 / strip_width_fraction).round() as usize;
    let base = width / n_strips;
    if base == 0 || height == 0 {
        return Err(Error::InvalidConfig(format!(
            "{n_strips} strips over width {width} would be empty"
        )));
    }
    let strip_bounds = (0..n_strips)
        .map(|s| {
            let end = if s + 1 == n_strips { width } else { (s + 1) * base };
            (s * base, end)
        })
        .collect();
    Ok(StripPartition {
        height,
        width,
        n_strips,
        strip_bounds,
        strip_width_fraction,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }
}

/// Cells of a scene that receive annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub selected: Vec<bool>,
    /// Sorted strip indices; empty when the mask is not strip based.
    pub selected_strips: Vec<usize>,
    /// Maximal runs of adjacent selected strips as `[first, last + 1)`.
    pub merged_runs: Vec<(usize, usize)>,
    /// Rectangles whose union is `selected`.
    pub rects: Vec<Rect>,
}

impl LabelMask {
    pub fn from_rects(height: usize, width: usize, rects: Vec<Rect>) -> Self {
        let mut selected = vec![false; height * width];
        for r in &rects {
            for row in r.row0..r.row1 {
                selected[row * width + r.col0..row * width + r.col1].fill(true);
            }
        }
        Self {
            height,
            width,
            selected,
            selected_strips: Vec::new(),
            merged_runs: Vec::new(),
            rects,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::from_rects(
            height,
            width,
            vec![Rect {
                row0: 0,
                row1: height,
                col0: 0,
                col1: width,
            }],
        )
    }

    /// Full-height column bands.
    pub fn from_columns(height: usize, width: usize, bands: &[(usize, usize)]) -> Self {
        let rects = bands
            .iter()
            .map(|&(col0, col1)| Rect {
                row0: 0,
                row1: height,
                col0,
                col1,
            })
            .collect();
        Self::from_rects(height, width, rects)
    }

    pub fn from_strips(partition: &StripPartition, strips: &[usize]) -> Self {
        let mut strips = strips.to_vec();
        strips.sort_unstable();
        strips.dedup();
        let bands: Vec<_> = strips.iter().map(|&s| partition.strip_bounds[s]).collect();
        let mut mask = Self::from_columns(partition.height, partition.width, &bands);
        mask.merged_runs = merge_runs(&strips);
        mask.selected_strips = strips;
        mask
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn n_selected(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    #[inline]
    pub fn is_selected(&self, row: usize, col: usize) -> bool {
        self.selected[row * self.width + col]
    }

    /// Mirrored cell selection; strip bookkeeping is dropped because strip
    /// widths are not symmetric.
    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        let rects = self
            .rects
            .iter()
            .map(|r| Rect {
                col0: w - r.col1,
                col1: w - r.col0,
                ..*r
            })
            .collect();
        Self::from_rects(self.height, self.width, rects)
    }
}

/// Groups sorted strip indices into maximal runs of neighbours.
pub fn merge_runs(sorted: &[usize]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &s in sorted {
        match runs.last_mut() {
            Some(run) if run.1 == s => run.1 = s + 1,
            _ => runs.push((s, s + 1)),
        }
    }
    runs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    NoneOrAll,
    RandomStrips,
    MaxStrips,
    Mdc,
    RatioRect,
}

impl Strategy {
    pub fn tag(&self) -> &'static str {
        match self {
            Strategy::NoneOrAll => "none_or_all",
            Strategy::RandomStrips => "random_strips",
            Strategy::MaxStrips => "max_strips",
            Strategy::Mdc => "mdc",
            Strategy::RatioRect => "ratio_rect",
        }
    }

    pub fn needs_warmup(&self) -> bool {
        matches!(self, Strategy::MaxStrips | Strategy::Mdc)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none_or_all" | "none-or-all" => Strategy::NoneOrAll,
            "random_strips" | "random" => Strategy::RandomStrips,
            "max_strips" | "max" => Strategy::MaxStrips,
            "mdc" => Strategy::Mdc,
            "ratio_rect" | "ratio" => Strategy::RatioRect,
            other => return Err(Error::Parse(format!("unknown strategy '{other}'"))),
        })
    }
}

/// Vertical:horizontal aspect of a labeled rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum AspectRatio {
    /// Full image height.
    FullHeight,
    /// Full image width.
    FullWidth,
    Finite { vertical: u32, horizontal: u32 },
}

impl AspectRatio {
    /// The seven ratios compared in the spatial-ratio ablation.
    pub fn sweep() -> Vec<AspectRatio> {
        use AspectRatio::*;
        vec![
            FullWidth,
            Finite { vertical: 1, horizontal: 4 },
            Finite { vertical: 1, horizontal: 2 },
            Finite { vertical: 1, horizontal: 1 },
            Finite { vertical: 2, horizontal: 1 },
            Finite { vertical: 4, horizontal: 1 },
            FullHeight,
        ]
    }
}

impl fmt::Display for AspectRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AspectRatio::FullHeight => f.write_str("inf:1"),
            AspectRatio::FullWidth => f.write_str("1:inf"),
            AspectRatio::Finite {
                vertical,
                horizontal,
            } => write!(f, "{vertical}:{horizontal}"),
        }
    }
}

impl FromStr for AspectRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("aspect ratio '{s}' is not of the form v:h"));
        let (v, h) = s.split_once(':').ok_or_else(bad)?;
        let is_inf = |t: &str| matches!(t.trim(), "inf" | "∞");
        match (is_inf(v), is_inf(h)) {
            (true, false) if h.trim() == "1" => Ok(AspectRatio::FullHeight),
            (false, true) if v.trim() == "1" => Ok(AspectRatio::FullWidth),
            (false, false) => {
                let vertical: u32 = v.trim().parse().map_err(|_| bad())?;
                let horizontal: u32 = h.trim().parse().map_err(|_| bad())?;
                if vertical == 0 || horizontal == 0 {
                    return Err(bad());
                }
                Ok(AspectRatio::Finite {
                    vertical,
                    horizontal,
                })
            }
            _ => Err(bad()),
        }
    }
}

impl From<AspectRatio> for String {
    fn from(r: AspectRatio) -> Self {
        r.to_string()
    }
}

impl TryFrom<String> for AspectRatio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiLevelDensityVector {
    pub levels: usize,
    pub entries: Vec<f64>,
    pub strip_index: usize,
}

/// Row-block sums of one strip at granularities `1..=levels`. Level `k` splits
/// the rows into `k` blocks of `height / k` rows (the last block keeps the
/// remainder) and scales each block sum by `k / levels`.
pub fn multilevel_density_vector(
    map: &DensityMap,
    partition: &StripPartition,
    strip_index: usize,
    levels: usize,
) -> Result<MultiLevelDensityVector> {
    let (h, w) = map.shape();
    if (h, w) != (partition.height, partition.width) {
        return Err(Error::ShapeMismatch(format!(
            "map {h}x{w} vs partition {}x{}",
            partition.height, partition.width
        )));
    }
    if levels == 0 || levels > h {
        return Err(Error::InvalidConfig(format!(
            "levels must lie in 1..={h}, got {levels}"
        )));
    }
    let (c0, c1) = *partition
        .strip_bounds
        .get(strip_index)
        .ok_or_else(|| Error::InvalidConfig(format!("no strip {strip_index}")))?;
    let mut entries = Vec::with_capacity(levels * (levels + 1) / 2);
    for k in 1..=levels {
        let block = h / k;
        let scale = k as f64 / levels as f64;
        for b in 0..k {
            let r0 = b * block;
            let r1 = if b + 1 == k { h } else { r0 + block };
            entries.push(map.values.block_sum(r0, r1, c0, c1) * scale);
        }
    }
    Ok(MultiLevelDensityVector {
        levels,
        entries,
        strip_index,
    })
}

pub fn strip_density_vectors(
    map: &DensityMap,
    partition: &StripPartition,
    levels: usize,
) -> Result<Vec<MultiLevelDensityVector>> {
    (0..partition.n_strips)
        .map(|s| multilevel_density_vector(map, partition, s, levels))
        .collect()
}

fn check_count(partition: &StripPartition, n_select: usize) -> Result<()> {
    if n_select == 0 || n_select > partition.n_strips {
        return Err(Error::SelectionOutOfRange {
            requested: n_select,
            available: partition.n_strips,
        });
    }
    Ok(())
}

pub fn select_random(
    partition: &StripPartition,
    n_select: usize,
    rng: &mut impl Rng,
) -> Result<LabelMask> {
    check_count(partition, n_select)?;
    let strips = sample(rng, partition.n_strips, n_select).into_vec();
    Ok(LabelMask::from_strips(partition, &strips))
}

fn is_all_zero(map: &DensityMap) -> bool {
    map.values.data.iter().all(|&v| v == 0.0)
}

/// Strips with the largest predicted mass; ties go to the lower index. Falls
/// back to a random draw when the prediction is identically zero.
pub fn select_max(
    partition: &StripPartition,
    predicted: &DensityMap,
    n_select: usize,
    rng: &mut impl Rng,
) -> Result<LabelMask> {
    check_count(partition, n_select)?;
    if is_all_zero(predicted) {
        log::warn!("MAX selection on an all-zero prediction, drawing strips at random");
        return select_random(partition, n_select, rng);
    }
    let masses = partition.strip_masses(predicted);
    let mut order: Vec<usize> = (0..partition.n_strips).collect();
    order.sort_by(|&a, &b| masses[b].total_cmp(&masses[a]).then(a.cmp(&b)));
    Ok(LabelMask::from_strips(partition, &order[..n_select]))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// One representative per non-empty cluster (the member closest to the
/// component mean), then farthest-point backfill until `n_select` strips are
/// chosen. Returns sorted strip indices.
pub fn pick_representatives(
    vectors: &[Vec<f64>],
    model: &GmmModel,
    tags: &[usize],
    n_select: usize,
) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(n_select);
    for (n, mean) in model.means.iter().enumerate() {
        let best = tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == n)
            .map(|(j, _)| (j, euclidean(&vectors[j], mean)))
            .fold(None, |acc: Option<(usize, f64)>, (j, d)| match acc {
                Some((_, bd)) if bd <= d => acc,
                _ => Some((j, d)),
            });
        if let Some((j, _)) = best {
            chosen.push(j);
        }
    }
    while chosen.len() < n_select.min(vectors.len()) {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..vectors.len()).filter(|j| !chosen.contains(j)) {
            let d = chosen
                .iter()
                .map(|&c| euclidean(&vectors[j], &vectors[c]))
                .fold(f64::INFINITY, f64::min);
            if best.map_or(true, |(_, bd)| d > bd) {
                best = Some((j, d));
            }
        }
        chosen.push(best.expect("an unselected strip remains").0);
    }
    chosen.sort_unstable();
    chosen
}

#[derive(Clone, Debug)]
pub struct MdcSelection {
    pub mask: LabelMask,
    pub vectors: Vec<MultiLevelDensityVector>,
    /// `None` when the prediction was all zero and strips were drawn at random.
    pub fit: Option<(GmmModel, ClusterAssignment)>,
}

/// Multi-level density-aware clustering: fits an `n_select`-component mixture
/// to the strips' density vectors and annotates one representative strip per
/// cluster.
pub fn select_mdc(
    partition: &StripPartition,
    predicted: &DensityMap,
    levels: usize,
    n_select: usize,
    em_config: &EmConfig,
    rng: &mut impl Rng,
) -> Result<MdcSelection> {
    check_count(partition, n_select)?;
    let vectors = strip_density_vectors(predicted, partition, levels)?;
    if is_all_zero(predicted) {
        log::warn!("MDC selection on an all-zero prediction, drawing strips at random");
        return Ok(MdcSelection {
            mask: select_random(partition, n_select, rng)?,
            vectors,
            fit: None,
        });
    }
    let points: Vec<Vec<f64>> = vectors.iter().map(|v| v.entries.clone()).collect();
    let (model, assignment) = em_fit(&points, n_select, em_config)?;
    let strips = pick_representatives(&points, &model, &assignment.tags, n_select);
    Ok(MdcSelection {
        mask: LabelMask::from_strips(partition, &strips),
        vectors,
        fit: Some((model, assignment)),
    })
}

/// Rectangle dimensions `(rows, cols)` for a budget and aspect ratio.
pub fn ratio_rect_size(
    shape: (usize, usize),
    budget_fraction: f64,
    ratio: AspectRatio,
) -> Result<(usize, usize)> {
    check_budget(budget_fraction)?;
    let (h, w) = shape;
    if budget_fraction >= 1.0 {
        return Ok((h, w));
    }
    let area = budget_fraction * (h * w) as f64;
    let (rows, cols) = match ratio {
        AspectRatio::FullHeight => (h, (area / h as f64).round() as usize),
        AspectRatio::FullWidth => ((area / w as f64).round() as usize, w),
        AspectRatio::Finite {
            vertical,
            horizontal,
        } => {
            let aspect = vertical as f64 / horizontal as f64;
            (
                (area * aspect).sqrt().round() as usize,
                (area / aspect).sqrt().round() as usize,
            )
        }
    };
    let (rows, cols) = (rows.max(1), cols.max(1));
    if rows > h || cols > w {
        return Err(Error::InvalidConfig(format!(
            "a {ratio} rectangle of {rows}x{cols} does not fit a {h}x{w} image"
        )));
    }
    Ok((rows, cols))
}

/// A randomly placed rectangle covering `budget_fraction` of the image.
pub fn select_ratio_rect(
    shape: (usize, usize),
    budget_fraction: f64,
    ratio: AspectRatio,
    rng: &mut impl Rng,
) -> Result<LabelMask> {
    let (h, w) = shape;
    let (rows, cols) = ratio_rect_size(shape, budget_fraction, ratio)?;
    let row0 = rng.random_range(0..=h - rows);
    let col0 = rng.random_range(0..=w - cols);
    Ok(LabelMask::from_rects(
        h,
        w,
        vec![Rect {
            row0,
            row1: row0 + rows,
            col0,
            col1: col0 + cols,
        }],
    ))
}

/// JSON form of a mask together with how it was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub strategy: Strategy,
    pub budget_fraction: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub strips: Vec<usize>,
    pub merged_runs: Vec<(usize, usize)>,
    pub rects: Vec<Rect>,
}

impl MaskRecord {
    pub fn new(mask: &LabelMask, strategy: Strategy, budget_fraction: f64, seed: u64) -> Self {
        Self {
            strategy,
            budget_fraction,
            seed,
            height: mask.height,
            width: mask.width,
            strips: mask.selected_strips.clone(),
            merged_runs: mask.merged_runs.clone(),
            rects: mask.rects.clone(),
        }
    }

    pub fn to_mask(&self) -> Result<LabelMask> {
        for r in &self.rects {
            if r.row0 >= r.row1 || r.col0 >= r.col1 || r.row1 > self.height || r.col1 > self.width {
                return Err(Error::Validation(format!("rectangle {r:?} outside the image")));
            }
        }
        let mut mask = LabelMask::from_rects(self.height, self.width, self.rects.clone());
        mask.selected_strips = self.strips.clone();
        mask.merged_runs = self.merged_runs.clone();
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> DensityMap {
        let mut g = Grid::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                *g.get_mut(r, c) = f(r, c);
            }
        }
        DensityMap::predicted(g)
    }

    #[test]
    fn partition_examples() {
        let p = partition_strips((64, 64), 0.10).unwrap();
        let widths: Vec<_> = (0..p.n_strips).map(|s| p.strip_width(s)).collect();
        assert_eq!(widths, vec![6, 6, 6, 6, 6, 6, 6, 6, 6, 10]);
        assert_eq!(p.strip_bounds.last(), Some(&(54, 64)));

        let whole = partition_strips((5, 7), 1.0).unwrap();
        assert_eq!(whole.strip_bounds, vec![(0, 7)]);

        let halves = partition_strips((4, 10), 0.5).unwrap();
        assert_eq!(halves.strip_bounds, vec![(0, 5), (5, 10)]);

        assert!(partition_strips((8, 8), 0.05).is_err());
        assert!(partition_strips((8, 8), 0.0).is_err());
        assert!(partition_strips((8, 8), 1.5).is_err());
    }

    #[test]
    fn density_vector_examples() {
        let p = partition_strips((4, 4), 1.0).unwrap();
        let ones = map(4, 4, |_, _| 1.0);
        let v = multilevel_density_vector(&ones, &p, 0, 2).unwrap();
        assert_eq!(v.entries, vec![8.0, 8.0, 8.0]);

        let zero = map(4, 4, |_, _| 0.0);
        assert_eq!(multilevel_density_vector(&zero, &p, 0, 3).unwrap().entries, vec![0.0; 6]);

        let one_level = multilevel_density_vector(&ones, &p, 0, 1).unwrap();
        assert_eq!(one_level.entries, vec![16.0]);

        assert!(multilevel_density_vector(&ones, &p, 0, 5).is_err());
        assert!(multilevel_density_vector(&ones, &p, 0, 0).is_err());
    }

    #[test]
    fn remainder_rows_are_counted_once_per_level() {
        let p = partition_strips((7, 4), 0.5).unwrap();
        let m = map(7, 4, |r, c| (r * 4 + c) as f64);
        let v = multilevel_density_vector(&m, &p, 1, 4).unwrap();
        let mass = m.values.block_sum(0, 7, 2, 4);
        let mut offset = 0;
        for k in 1..=4 {
            let level: f64 = v.entries[offset..offset + k].iter().sum();
            assert!((level * 4.0 / k as f64 - mass).abs() < 1e-9);
            offset += k;
        }
    }

    #[test]
    fn max_selection_rules() {
        let p = partition_strips((2, 3), 1.0 / 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let masses = [1.0, 5.0, 3.0];
        let m = map(2, 3, |_, c| masses[c] / 2.0);
        assert_eq!(select_max(&p, &m, 1, &mut rng).unwrap().selected_strips, vec![1]);
        assert_eq!(select_max(&p, &m, 2, &mut rng).unwrap().selected_strips, vec![1, 2]);
        let tie = map(2, 3, |_, c| [2.0, 2.0, 0.0][c]);
        assert_eq!(select_max(&p, &tie, 1, &mut rng).unwrap().selected_strips, vec![0]);
        assert!(select_max(&p, &m, 4, &mut rng).is_err());
        assert!(select_max(&p, &m, 0, &mut rng).is_err());
    }

    #[test]
    fn random_selection_rules() {
        let p = partition_strips((8, 40), 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let all = select_random(&p, 10, &mut rng).unwrap();
        assert_eq!(all.selected_strips, (0..10).collect::<Vec<_>>());
        assert_eq!(all.merged_runs, vec![(0, 10)]);
        assert!(all.selected.iter().all(|&s| s));

        let a = select_random(&p, 1, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = select_random(&p, 1, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            select_random(&p, 11, &mut rng),
            Err(Error::SelectionOutOfRange { .. })
        ));
    }

    #[test]
    fn mdc_selects_every_strip_when_budget_is_exhaustive() {
        let p = partition_strips((16, 40), 0.2).unwrap();
        let m = map(16, 40, |r, c| ((r + 1) * (c % 7 + 1)) as f64 * 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sel = select_mdc(&p, &m, 4, 5, &EmConfig::default(), &mut rng).unwrap();
        assert_eq!(sel.mask.selected_strips, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn mdc_identical_strips_pick_lowest_index() {
        let p = partition_strips((16, 40), 0.1).unwrap();
        let m = map(16, 40, |r, _| (r + 1) as f64 * 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sel = select_mdc(&p, &m, 4, 1, &EmConfig::default(), &mut rng).unwrap();
        // the wider last strip carries more mass, the nine others tie
        assert_eq!(sel.mask.selected_strips, vec![0]);
    }

    #[test]
    fn mdc_planted_groups_yield_one_strip_each() {
        let p = partition_strips((16, 60), 0.1).unwrap();
        // strips 0..5 are sparse at the top, strips 5..10 dense at the bottom
        let m = map(16, 60, |r, c| {
            let strip = (c / 6).min(9);
            if strip < 5 {
                if r < 8 { 0.2 } else { 0.0 }
            } else if r >= 8 {
                3.0
            } else {
                0.0
            }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sel = select_mdc(&p, &m, 4, 2, &EmConfig::default(), &mut rng).unwrap();
        let s = &sel.mask.selected_strips;
        assert_eq!(s.len(), 2);
        assert!(s[0] < 5 && s[1] >= 5, "got {s:?}");
    }

    #[test]
    fn all_zero_prediction_falls_back_to_random() {
        let p = partition_strips((8, 40), 0.1).unwrap();
        let zero = map(8, 40, |_, _| 0.0);
        let sel = select_mdc(&p, &zero, 4, 2, &EmConfig::default(), &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        assert!(sel.fit.is_none());
        let expected = select_random(&p, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(sel.mask, expected);
    }

    #[test]
    fn backfill_takes_the_farthest_strip() {
        let vectors = vec![vec![0.0], vec![1.0], vec![10.0], vec![4.0]];
        let model = GmmModel {
            n_components: 2,
            dim: 1,
            weights: vec![0.5, 0.5],
            means: vec![vec![0.8], vec![50.0]],
            covariances: vec![vec![1.0]; 2],
        };
        // every vector tagged to component 0; component 1 is empty
        let picked = pick_representatives(&vectors, &model, &[0, 0, 0, 0], 2);
        assert_eq!(picked, vec![1, 2]);
    }

    #[test]
    fn ratio_rect_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tall = select_ratio_rect((64, 64), 0.10, AspectRatio::FullHeight, &mut rng).unwrap();
        let r = tall.rects[0];
        assert_eq!((r.row0, r.row1), (0, 64));
        assert!((6..=7).contains(&(r.col1 - r.col0)));

        let whole = select_ratio_rect((64, 64), 1.0, AspectRatio::FullWidth, &mut rng).unwrap();
        assert_eq!(whole.n_selected(), 64 * 64);

        let square: AspectRatio = "1:1".parse().unwrap();
        let sq = select_ratio_rect((64, 64), 0.25, square, &mut rng).unwrap();
        assert_eq!(ratio_rect_size((64, 64), 0.25, square).unwrap(), (32, 32));
        assert_eq!(sq.n_selected(), 32 * 32);

        let wide = AspectRatio::Finite {
            vertical: 1,
            horizontal: 64,
        };
        assert!(select_ratio_rect((64, 64), 0.5, wide, &mut rng).is_err());
    }

    #[test]
    fn aspect_ratio_tags_round_trip() {
        for r in AspectRatio::sweep() {
            assert_eq!(r.to_string().parse::<AspectRatio>().unwrap(), r);
        }
        assert!("0:1".parse::<AspectRatio>().is_err());
        assert!("inf:inf".parse::<AspectRatio>().is_err());
    }

    #[test]
    fn mask_record_round_trip() {
        let p = partition_strips((8, 40), 0.1).unwrap();
        let mask = LabelMask::from_strips(&p, &[7, 2, 3]);
        assert_eq!(mask.merged_runs, vec![(2, 4), (7, 8)]);
        let rec = MaskRecord::new(&mask, Strategy::Mdc, 0.3, 17);
        let json = serde_json::to_string(&rec).unwrap();
        let back: MaskRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_mask().unwrap(), mask);
    }

    #[test]
    fn flip_mirrors_mask_columns() {
        let p = partition_strips((4, 20), 0.1).unwrap();
        let mask = LabelMask::from_strips(&p, &[0]);
        let flipped = mask.flip_horizontal();
        assert!(flipped.is_selected(0, 19) && flipped.is_selected(3, 18));
        assert!(!flipped.is_selected(0, 0));
        assert_eq!(flipped.n_selected(), mask.n_selected());
    }
}
