//! Parametric crowd scenes.
//!
//! Head positions follow an inhomogeneous point process whose intensity grows
//! toward the bottom of the frame (camera perspective) and is scaled per
//! horizontal zone (scene composition changes left to right). Each scene is a
//! pure function of `(spec, index)`: the generator is ChaCha8 seeded with
//! `spec.seed` on stream `index`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::densitymap::{generate_density_map, KernelConfig};
use crate::error::{Error, Result};
use crate::grid::{decode_f64_le, read_bytes, write_f64_le, Tensor3};

pub const FORMAT_VERSION: u32 = 1;

/// Appearance blur applied to head indicators in input channel 0.
const APPEARANCE_KERNEL: KernelConfig = KernelConfig {
    sigma: 3.0,
    truncation_radius: 9.0,
};

/// Rescales the unit-mass blur so an isolated head peaks near 1.
const APPEARANCE_GAIN: f64 = 2.0 * std::f64::consts::PI * 9.0;

/// Half-width of the horizontal box filter that softens zone encodings.
const ZONE_SMOOTHING: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Inclusive `[lo, hi]` range for the per-scene head count.
    pub n_heads_range: (usize, usize),
    pub perspective_gain: f64,
    pub n_horizontal_zones: usize,
    /// Intensity multiplier of each zone id; length `n_horizontal_zones`.
    pub zone_multipliers: Vec<f64>,
    /// Occlusion strength: channel 0 shows `(1 - exp(-s*b)) / s` of the blurred
    /// head indicator `b`; 0 keeps it linear.
    pub occlusion: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 3,
            n_heads_range: (20, 200),
            perspective_gain: 3.0,
            n_horizontal_zones: 3,
            zone_multipliers: default_zone_multipliers(3),
            occlusion: 0.25,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

/// Evenly spaced multipliers from 0.25 to 2.0.
pub fn default_zone_multipliers(zones: usize) -> Vec<f64> {
    if zones <= 1 {
        return vec![1.0; zones];
    }
    (0..zones)
        .map(|z| 0.25 + 1.75 * z as f64 / (zones - 1) as f64)
        .collect()
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.height < 8 || self.width < 8 {
            return bad(format!(
                "grid must be at least 8x8, got {}x{}",
                self.height, self.width
            ));
        }
        if self.channels < 1 {
            return bad("at least one input channel is required".into());
        }
        let (lo, hi) = self.n_heads_range;
        if lo > hi {
            return bad(format!("head range [{lo}, {hi}] is empty"));
        }
        if !(self.perspective_gain >= 0.0 && self.perspective_gain.is_finite()) {
            return bad(format!("perspective_gain {} must be >= 0", self.perspective_gain));
        }
        if self.n_horizontal_zones < 1 || self.n_horizontal_zones > self.width {
            return bad(format!(
                "n_horizontal_zones {} must lie in 1..={}",
                self.n_horizontal_zones, self.width
            ));
        }
        if self.zone_multipliers.len() != self.n_horizontal_zones {
            return bad(format!(
                "{} zone multipliers for {} zones",
                self.zone_multipliers.len(),
                self.n_horizontal_zones
            ));
        }
        if self
            .zone_multipliers
            .iter()
            .any(|m| !(m.is_finite() && *m > 0.0))
        {
            return bad("zone multipliers must be positive and finite".into());
        }
        if !(self.occlusion >= 0.0 && self.occlusion.is_finite()) {
            return bad(format!("occlusion {} must be >= 0", self.occlusion));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be >= 0", self.noise_std));
        }
        Ok(())
    }

    fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrowdScene {
    pub spec: SceneSpec,
    pub index: usize,
    /// `(row, col)` head centres in continuous grid coordinates.
    pub heads: Vec<(f64, f64)>,
    pub zone_of_column: Vec<usize>,
    pub input_grid: Tensor3,
}

impl CrowdScene {
    pub fn shape(&self) -> (usize, usize) {
        (self.spec.height, self.spec.width)
    }

    pub fn count(&self) -> usize {
        self.heads.len()
    }

    /// Mirror image of the scene about its vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let w = self.spec.width as f64;
        let mut zones = self.zone_of_column.clone();
        zones.reverse();
        Self {
            spec: self.spec.clone(),
            index: self.index,
            heads: self
                .heads
                .iter()
                .map(|&(r, c)| (r, (w - c).min(w - 1e-9)))
                .collect(),
            zone_of_column: zones,
            input_grid: self.input_grid.flip_horizontal(),
        }
    }
}

pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<CrowdScene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = spec.rng_for(index);

    let zone_of_column = draw_zone_layout(spec, &mut rng);

    let (lo, hi) = spec.n_heads_range;
    let n_heads = rng.random_range(lo..=hi);
    let max_mult = spec
        .zone_multipliers
        .iter()
        .cloned()
        .fold(f64::MIN, f64::max);
    let max_intensity = (1.0 + spec.perspective_gain) * max_mult;
    let mut heads = Vec::with_capacity(n_heads);
    while heads.len() < n_heads {
        let row = rng.random::<f64>() * h as f64;
        let col = rng.random::<f64>() * w as f64;
        let zone = zone_of_column[(col as usize).min(w - 1)];
        let intensity =
            (1.0 + spec.perspective_gain * row / h as f64) * spec.zone_multipliers[zone];
        if rng.random::<f64>() * max_intensity < intensity {
            heads.push((row, col));
        }
    }

    let mut input = Tensor3::zeros(spec.channels, h, w);
    let indicator = generate_density_map(&heads, (h, w), &APPEARANCE_KERNEL)?;
    let s = spec.occlusion;
    for (dst, &raw) in input.channel_mut(0).iter_mut().zip(&indicator.values.data) {
        let b = APPEARANCE_GAIN * raw;
        *dst = if s > 0.0 { -(-s * b).exp_m1() / s } else { b };
    }
    if spec.channels > 1 {
        let codes = zone_codes(spec.n_horizontal_zones, spec.channels - 1);
        for ch in 1..spec.channels {
            let raw: Vec<f64> = zone_of_column
                .iter()
                .map(|&z| codes[z][ch - 1])
                .collect();
            let smooth = box_smooth(&raw, ZONE_SMOOTHING);
            let plane = input.channel_mut(ch);
            for r in 0..h {
                plane[r * w..(r + 1) * w].copy_from_slice(&smooth);
            }
        }
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
        for v in input.data.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    Ok(CrowdScene {
        spec: spec.clone(),
        index,
        heads,
        zone_of_column,
        input_grid: input,
    })
}

/// Splits the width into `k` jittered bands and assigns zone ids to bands in a
/// random order.
fn draw_zone_layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (w, k) = (spec.width, spec.n_horizontal_zones);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let mut cuts = Vec::with_capacity(k + 1);
    cuts.push(0usize);
    for b in 1..k {
        let nominal = (b * w) as f64 / k as f64;
        let jitter = (rng.random::<f64>() - 0.5) * 0.5 * w as f64 / k as f64;
        let prev = *cuts.last().expect("non-empty");
        cuts.push(((nominal + jitter).round() as usize).clamp(prev + 1, w - (k - b)));
    }
    cuts.push(w);
    let mut zones = vec![0; w];
    for b in 0..k {
        for z in &mut zones[cuts[b]..cuts[b + 1]] {
            *z = order[b];
        }
    }
    zones
}

/// Binary code of `zone + 1` over `bits` channels, so every zone has a
/// non-zero encoding when `bits` is large enough.
fn zone_codes(zones: usize, bits: usize) -> Vec<Vec<f64>> {
    (0..zones)
        .map(|z| {
            (0..bits)
                .map(|b| if ((z + 1) >> b) & 1 == 1 { 1.0 } else { 0.0 })
                .collect()
        })
        .collect()
}

fn box_smooth(values: &[f64], radius: usize) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius + 1).min(n);
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub index: usize,
    pub grid_file: String,
    pub heads_file: String,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: SceneSpec,
    pub n_scenes: usize,
    pub scenes: Vec<SceneEntry>,
}

impl Manifest {
    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<CrowdScene>,
    pub manifest: Manifest,
}

#[derive(Serialize, Deserialize)]
struct HeadsFile {
    heads: Vec<(f64, f64)>,
    zone_of_column: Vec<usize>,
}

fn encode_scene(scene: &CrowdScene) -> (Vec<u8>, Vec<u8>) {
    let mut grid = Vec::with_capacity(scene.input_grid.data.len() * 8);
    for v in &scene.input_grid.data {
        grid.extend_from_slice(&v.to_le_bytes());
    }
    let heads = serde_json::to_vec(&HeadsFile {
        heads: scene.heads.clone(),
        zone_of_column: scene.zone_of_column.clone(),
    })
    .expect("heads serialize");
    (grid, heads)
}

fn scene_checksum(grid: &[u8], heads: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(grid);
    hasher.update(heads);
    hex::encode(hasher.finalize())
}

pub fn generate_dataset(spec: &SceneSpec, n_scenes: usize) -> Result<Dataset> {
    spec.validate()?;
    if n_scenes == 0 {
        return Err(Error::InvalidConfig("n_scenes must be >= 1".into()));
    }
    let scenes = (0..n_scenes)
        .map(|i| generate_scene(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let entries = scenes
        .iter()
        .map(|s| {
            let (grid, heads) = encode_scene(s);
            SceneEntry {
                index: s.index,
                grid_file: format!("scene_{:04}.grid.bin", s.index),
                heads_file: format!("scene_{:04}.heads.json", s.index),
                checksum: scene_checksum(&grid, &heads),
            }
        })
        .collect();
    Ok(Dataset {
        scenes,
        manifest: Manifest {
            format_version: FORMAT_VERSION,
            spec: spec.clone(),
            n_scenes,
            scenes: entries,
        },
    })
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (scene, entry) in dataset.scenes.iter().zip(&dataset.manifest.scenes) {
        let (grid, heads) = encode_scene(scene);
        let grid_path = dir.join(&entry.grid_file);
        std::fs::write(&grid_path, &grid).map_err(|e| Error::io(&grid_path, e))?;
        let heads_path = dir.join(&entry.heads_file);
        std::fs::write(&heads_path, &heads).map_err(|e| Error::io(&heads_path, e))?;
    }
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&dataset.manifest)?;
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&read_bytes(&manifest_path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    manifest.spec.validate()?;
    if manifest.n_scenes != manifest.scenes.len() || manifest.n_scenes == 0 {
        return Err(Error::Validation(format!(
            "manifest declares {} scenes but lists {}",
            manifest.n_scenes,
            manifest.scenes.len()
        )));
    }
    let spec = &manifest.spec;
    let n_values = spec.channels * spec.height * spec.width;
    let mut scenes = Vec::with_capacity(manifest.n_scenes);
    for (pos, entry) in manifest.scenes.iter().enumerate() {
        if entry.index != pos {
            return Err(Error::Validation(format!(
                "scene entry {pos} carries index {}",
                entry.index
            )));
        }
        let grid_path = dir.join(&entry.grid_file);
        let grid_bytes = read_bytes(&grid_path)?;
        let values = decode_f64_le(&grid_bytes, n_values)
            .map_err(|msg| Error::ShapeMismatch(format!("{}: {msg}", grid_path.display())))?;
        let heads_path = dir.join(&entry.heads_file);
        let heads_bytes = read_bytes(&heads_path)?;
        if scene_checksum(&grid_bytes, &heads_bytes) != entry.checksum {
            return Err(Error::Checksum(grid_path));
        }
        let parsed: HeadsFile = serde_json::from_slice(&heads_bytes)?;
        if parsed.zone_of_column.len() != spec.width {
            return Err(Error::ShapeMismatch(format!(
                "{}: {} zone ids for width {}",
                heads_path.display(),
                parsed.zone_of_column.len(),
                spec.width
            )));
        }
        for &(r, c) in &parsed.heads {
            if !(r >= 0.0 && r < spec.height as f64 && c >= 0.0 && c < spec.width as f64) {
                return Err(Error::HeadOutOfBounds {
                    row: r,
                    col: c,
                    height: spec.height,
                    width: spec.width,
                });
            }
        }
        scenes.push(CrowdScene {
            spec: spec.clone(),
            index: pos,
            heads: parsed.heads,
            zone_of_column: parsed.zone_of_column,
            input_grid: Tensor3::from_vec(spec.channels, spec.height, spec.width, values)?,
        });
    }
    Ok(Dataset { scenes, manifest })
}

/// Writes a single grid in the dataset's binary layout.
pub fn save_grid(path: &Path, values: &[f64]) -> Result<()> {
    write_f64_le(path, values)
}
