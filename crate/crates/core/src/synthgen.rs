//! Seeded synthetic data: class-specific skeleton motion, multi-scale
//! mixture heatmaps rendered from it, and stand-in video feature vectors.
//!
//! Coordinates are `(x = column, y = row)` with the origin at the top-left and
//! integers at pixel centres. Ground-truth poses live in the frame of the
//! largest scale; scale `s` sees `x · w_s / w_0`, `y · h_s / h_0`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_dir_atomically, write_json};
use crate::numerics::hpt::{read_hpt, write_hpt};
use crate::numerics::tensor::Tensor;
use crate::seed::{rng_for, stable_hash};
use crate::topology::SkeletonGraph;

/// One heatmap resolution, `(h, w, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scale(pub usize, pub usize, pub usize);

impl Scale {
    pub fn h(&self) -> usize {
        self.0
    }
    pub fn w(&self) -> usize {
        self.1
    }
    pub fn c(&self) -> usize {
        self.2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub frames: usize,
    pub joints: usize,
    pub scales: Vec<Scale>,
    /// Gaussian width in pixels of the largest scale.
    pub gaussian_sigma: f64,
    /// Per-pixel heatmap noise.
    pub noise_std: f64,
    /// Length of the stand-in video feature.
    pub video_dim: usize,
    /// Per-dimension noise on the video feature.
    pub video_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            samples_per_class: 30,
            frames: 16,
            joints: 17,
            scales: vec![Scale(64, 48, 32), Scale(32, 24, 96), Scale(16, 12, 192)],
            gaussian_sigma: 6.0,
            noise_std: 0.02,
            video_dim: 64,
            video_noise: 0.4,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str| format!("synth.{name}");
        if self.num_classes < 1 {
            return Err(Error::config(field("num_classes"), "must be at least 1"));
        }
        if self.samples_per_class < 1 {
            return Err(Error::config(field("samples_per_class"), "must be at least 1"));
        }
        if self.frames < 2 {
            return Err(Error::config(field("frames"), "must be at least 2"));
        }
        if self.joints < 2 {
            return Err(Error::config(field("joints"), "must be at least 2"));
        }
        if self.scales.is_empty() {
            return Err(Error::config(field("scales"), "needs at least one scale"));
        }
        for (i, s) in self.scales.iter().enumerate() {
            if s.h() == 0 || s.w() == 0 || s.c() == 0 {
                return Err(Error::config(format!("synth.scales[{i}]"), "dimensions must be positive"));
            }
            if s.c() < self.joints {
                return Err(Error::config(
                    format!("synth.scales[{i}]"),
                    format!("{} channels cannot hold a dominant channel for each of {} joints", s.c(), self.joints),
                ));
            }
        }
        let big = self.largest_scale();
        if big.h() < 3 || big.w() < 3 {
            return Err(Error::config(field("scales"), "largest scale must be at least 3x3"));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::config(field("gaussian_sigma"), "must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config(field("noise_std"), "must be non-negative"));
        }
        if self.video_dim < 1 {
            return Err(Error::config(field("video_dim"), "must be at least 1"));
        }
        if !(self.video_noise >= 0.0) {
            return Err(Error::config(field("video_noise"), "must be non-negative"));
        }
        Ok(())
    }

    /// Index of the scale with the most pixels (first on ties).
    pub fn largest_scale_index(&self) -> usize {
        let mut best = 0;
        for (i, s) in self.scales.iter().enumerate() {
            if s.h() * s.w() > self.scales[best].h() * self.scales[best].w() {
                best = i;
            }
        }
        best
    }

    pub fn largest_scale(&self) -> Scale {
        self.scales[self.largest_scale_index()]
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("synthetic action {c:02}")).collect()
    }
}

/// Skeleton used by the generator: COCO-17 for 17 joints, a chain otherwise.
pub fn synth_skeleton(joints: usize) -> SkeletonGraph {
    if joints == 17 {
        SkeletonGraph::coco17()
    } else {
        SkeletonGraph::new(joints, (1..joints).map(|j| (j - 1, j)).collect()).expect("chain is valid")
    }
}

/// Per-frame joint coordinates, `[T, n, 2]` holding `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    coords: Tensor<f32>,
}

impl PoseSequence {
    pub fn new(coords: Tensor<f32>) -> Result<Self> {
        let (_, _, two) = coords.dims3("pose_sequence")?;
        if two != 2 {
            return Err(Error::shape("pose_sequence", format!("last axis must be 2, got {two}")));
        }
        Ok(Self { coords })
    }

    pub fn frames(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn xy(&self, t: usize, j: usize) -> (f32, f32) {
        (self.coords.get(&[t, j, 0]), self.coords.get(&[t, j, 1]))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.coords
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.coords
    }
}

/// The scales of one frame, each `[c, h, w]`.
pub type HeatmapStack = Vec<Tensor<f32>>;

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub id: String,
    pub label: usize,
    pub gt_poses: PoseSequence,
    pub heatmaps: Vec<HeatmapStack>,
    pub video_feature: Tensor<f32>,
}

/// Rest pose in normalised `(x / w, y / h)` units.
fn rest_pose(joints: usize) -> Vec<(f64, f64)> {
    if joints == 17 {
        vec![
            (0.50, 0.16),
            (0.46, 0.13),
            (0.54, 0.13),
            (0.42, 0.15),
            (0.58, 0.15),
            (0.38, 0.28),
            (0.62, 0.28),
            (0.33, 0.42),
            (0.67, 0.42),
            (0.31, 0.55),
            (0.69, 0.55),
            (0.43, 0.56),
            (0.57, 0.56),
            (0.43, 0.72),
            (0.57, 0.72),
            (0.43, 0.88),
            (0.57, 0.88),
        ]
    } else {
        (0..joints)
            .map(|j| {
                let side = if j % 2 == 0 { -0.08 } else { 0.08 };
                (0.5 + side, 0.1 + 0.8 * j as f64 / (joints - 1) as f64)
            })
            .collect()
    }
}

/// Moving joints of a motion group: `(joint, dx, dy, weight)`; a negative
/// weight moves in anti-phase.
fn motion_group(group: usize, joints: usize) -> Vec<(usize, f64, f64, f64)> {
    if joints == 17 {
        match group {
            0 => vec![(7, -0.5, -1.0, 0.5), (9, -0.6, -1.0, 1.0)],
            1 => vec![(8, 0.5, -1.0, 0.5), (10, 0.6, -1.0, 1.0)],
            2 => vec![(7, 1.0, 0.0, 0.4), (9, 1.0, 0.0, 1.0), (8, -1.0, 0.0, 0.4), (10, -1.0, 0.0, 1.0)],
            3 => vec![
                (13, 0.0, -1.0, 0.5),
                (15, 0.0, -1.0, 1.0),
                (14, 0.0, -1.0, -0.5),
                (16, 0.0, -1.0, -1.0),
            ],
            _ => (0..7).map(|j| (j, 1.0, 0.0, 0.6)).collect(),
        }
    } else {
        (0..joints)
            .filter(|j| j % MOTION_GROUPS == group)
            .map(|j| (j, 1.0, 0.5, 1.0))
            .collect()
    }
}

const MOTION_GROUPS: usize = 5;
const BASE_AMPLITUDE: f64 = 0.08;
const FRAME_JITTER: f64 = 0.003;

/// Class-specific periodic motion on the rest skeleton plus seeded jitter.
pub fn generate_motion(class_id: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<PoseSequence> {
    if class_id >= cfg.num_classes {
        return Err(Error::invalid(format!(
            "class {class_id} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let (t_len, n) = (cfg.frames, cfg.joints);
    let big = cfg.largest_scale();
    let (w, h) = (big.w() as f64, big.h() as f64);

    let groups = MOTION_GROUPS.min(n);
    let group = class_id % groups;
    let freq_count = (t_len / 2).saturating_sub(1).max(1);
    let freq = 1 + class_id % freq_count;
    let amplitude = BASE_AMPLITUDE * (1.0 + 0.35 * ((class_id / groups) % 3) as f64);
    let class_phase = rng_for(cfg.seed, &["class-phase", &class_id.to_string()]).random_range(0.0..2.0 * PI);

    let amp_scale = rng.random_range(0.8..1.2);
    let phase = class_phase + rng.random_range(-0.3..0.3);
    let shift = (rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
    let jitter = Normal::new(0.0, FRAME_JITTER).expect("positive std");

    let rest = rest_pose(n);
    let movers = motion_group(group, n);
    let mut coords = Vec::with_capacity(t_len * n * 2);
    for t in 0..t_len {
        let wave = (2.0 * PI * freq as f64 * t as f64 / t_len as f64 + phase).sin();
        for (j, &(u, v)) in rest.iter().enumerate() {
            let (mut u, mut v) = (u + shift.0, v + shift.1);
            for &(_, dx, dy, weight) in movers.iter().filter(|m| m.0 == j) {
                let d = amplitude * amp_scale * weight * wave;
                u += dx * d;
                v += dy * d;
            }
            u += jitter.sample(rng);
            v += jitter.sample(rng);
            let x = (u * w).clamp(1.0, w - 2.0);
            let y = (v * h).clamp(1.0, h - 2.0);
            coords.push(x as f32);
            coords.push(y as f32);
        }
    }
    PoseSequence::new(Tensor::new([t_len, n, 2], coords)?)
}

/// Seeded non-negative, row-normalised `[c, n]` mixing matrices, one per scale.
///
/// `n` channels are near-pure copies of one joint each (placed at random
/// channel positions); the rest are dense mixtures whose entries stay below
/// the pure channels' dominant weight.
pub fn mixing_matrices(cfg: &SynthConfig) -> Vec<Tensor<f32>> {
    let n = cfg.joints;
    cfg.scales
        .iter()
        .enumerate()
        .map(|(s, scale)| {
            let mut rng = rng_for(cfg.seed, &["mixing", &s.to_string()]);
            let c = scale.c();
            let mut order: Vec<usize> = (0..c).collect();
            order.shuffle(&mut rng);
            let mut m = vec![0.0f64; c * n];
            for (rank, &k) in order.iter().enumerate() {
                let row = &mut m[k * n..(k + 1) * n];
                if rank < n {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = if j == rank {
                            1.0
                        } else if rng.random_bool(0.2) {
                            rng.random_range(0.0..0.03)
                        } else {
                            0.0
                        };
                    }
                } else {
                    for v in row.iter_mut() {
                        *v = rng.random_range(0.05..1.0);
                    }
                }
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= total);
            }
            Tensor::new([c, n], m.into_iter().map(|v| v as f32).collect()).expect("shape matches")
        })
        .collect()
}

/// Channel with the largest mixing weight for each joint (lowest index on ties).
pub fn joint_channels(mixing: &Tensor<f32>) -> Vec<usize> {
    let (c, n) = (mixing.shape()[0], mixing.shape()[1]);
    (0..n)
        .map(|j| {
            let mut best = 0;
            for k in 1..c {
                if mixing.get(&[k, j]) > mixing.get(&[best, j]) {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Renders one `[c, h, w]` map: channel `k` is `Σ_j M[k,j] · Gauss(pose_j)` plus
/// truncated Gaussian noise, floored at zero.
pub fn render_frame(
    joints_xy: &[(f32, f32)],
    scale: Scale,
    sigma: f64,
    mixing: &Tensor<f32>,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let (h, w, c) = (scale.h(), scale.w(), scale.c());
    let n = joints_xy.len();
    if mixing.shape() != [c, n] {
        return Err(Error::shape(
            "render_heatmaps",
            format!("mixing {:?} for {c} channels and {n} joints", mixing.shape()),
        ));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let gauss: Vec<(Vec<f32>, Vec<f32>)> = joints_xy
        .iter()
        .map(|&(x, y)| {
            let gx = (0..w).map(|i| (-(i as f64 - x as f64).powi(2) * inv).exp() as f32).collect();
            let gy = (0..h).map(|r| (-(r as f64 - y as f64).powi(2) * inv).exp() as f32).collect();
            (gx, gy)
        })
        .collect();
    let mut data = vec![0.0f32; c * h * w];
    for k in 0..c {
        let plane = &mut data[k * h * w..(k + 1) * h * w];
        for (j, (gx, gy)) in gauss.iter().enumerate() {
            let m = mixing.get(&[k, j]);
            if m == 0.0 {
                continue;
            }
            for (r, &yv) in gy.iter().enumerate() {
                let a = m * yv;
                for (p, &xv) in plane[r * w..(r + 1) * w].iter_mut().zip(gx) {
                    *p += a * xv;
                }
            }
        }
    }
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("positive std");
        let bound = 3.0 * noise_std;
        for v in data.iter_mut() {
            let e = normal.sample(rng).clamp(-bound, bound);
            *v = (*v as f64 + e).max(0.0) as f32;
        }
    }
    Tensor::new([c, h, w], data)
}

/// Per-frame multi-scale heatmaps for a pose sequence.
pub fn render_heatmaps(poses: &PoseSequence, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<HeatmapStack>> {
    let mixing = mixing_matrices(cfg);
    render_heatmaps_with(poses, cfg, &mixing, rng)
}

pub fn render_heatmaps_with(
    poses: &PoseSequence,
    cfg: &SynthConfig,
    mixing: &[Tensor<f32>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<HeatmapStack>> {
    let big = cfg.largest_scale();
    (0..poses.frames())
        .map(|t| {
            cfg.scales
                .iter()
                .zip(mixing)
                .map(|(&scale, m)| {
                    let rx = scale.w() as f32 / big.w() as f32;
                    let ry = scale.h() as f32 / big.h() as f32;
                    let xy: Vec<(f32, f32)> = (0..poses.joints())
                        .map(|j| {
                            let (x, y) = poses.xy(t, j);
                            (x * rx, y * ry)
                        })
                        .collect();
                    let sigma = cfg.gaussian_sigma * scale.w() as f64 / big.w() as f64;
                    render_frame(&xy, scale, sigma, m, cfg.noise_std, rng)
                })
                .collect()
        })
        .collect()
}

/// Stand-in video feature: a class direction, a projection of per-joint
/// motion spread, and noise.
pub fn make_video_feature(
    poses: &PoseSequence,
    label: usize,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let d = cfg.video_dim;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut class_rng = rng_for(cfg.seed, &["video-class", &label.to_string()]);
    let mut direction: Vec<f64> = (0..d).map(|_| unit.sample(&mut class_rng)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|v| *v /= norm);

    let (t_len, n) = (poses.frames(), poses.joints());
    let big = cfg.largest_scale();
    let mut stats = Vec::with_capacity(2 * n);
    for j in 0..n {
        for (axis, extent) in [(0usize, big.w() as f64), (1, big.h() as f64)] {
            let vals: Vec<f64> = (0..t_len)
                .map(|t| poses.tensor().get(&[t, j, axis]) as f64 / extent)
                .collect();
            let mean = vals.iter().sum::<f64>() / t_len as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t_len as f64;
            stats.push(var.sqrt() / BASE_AMPLITUDE);
        }
    }
    let mut proj_rng = rng_for(cfg.seed, &["video-projection"]);
    let scale = 0.5 / (2.0 * n as f64).sqrt();
    let noise = if cfg.video_noise > 0.0 {
        Some(Normal::new(0.0, cfg.video_noise).expect("positive std"))
    } else {
        None
    };
    let data = (0..d)
        .map(|k| {
            let motion: f64 = stats.iter().map(|s| s * unit.sample(&mut proj_rng)).sum::<f64>() * scale;
            let e = noise.map(|nz| nz.sample(rng)).unwrap_or(0.0);
            (direction[k] + motion + e) as f32
        })
        .collect();
    Tensor::new([d], data)
}

pub fn sample_id(label: usize, index: usize) -> String {
    format!("c{label:02}_s{index:03}")
}

/// Generates one sample; every random draw is seeded from `(cfg.seed, id)`.
pub fn generate_sample(cfg: &SynthConfig, mixing: &[Tensor<f32>], label: usize, index: usize) -> Result<SynthSample> {
    let id = sample_id(label, index);
    let gt_poses = generate_motion(label, cfg, &mut rng_for(cfg.seed, &["motion", &id]))?;
    let heatmaps = render_heatmaps_with(&gt_poses, cfg, mixing, &mut rng_for(cfg.seed, &["heatmap", &id]))?;
    let video_feature = make_video_feature(&gt_poses, label, cfg, &mut rng_for(cfg.seed, &["video", &id]))?;
    Ok(SynthSample {
        id,
        label,
        gt_poses,
        heatmaps,
        video_feature,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per class, ids ranked by a stable hash; the first two thirds train.
pub fn assign_splits(entries: &[(String, usize)]) -> Vec<Split> {
    let mut out = vec![Split::Test; entries.len()];
    let max_label = entries.iter().map(|e| e.1).max().unwrap_or(0);
    for label in 0..=max_label {
        let mut members: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].1 == label).collect();
        members.sort_by_key(|&i| (stable_hash(&entries[i].0), entries[i].0.clone()));
        let train = (2 * members.len() + 1) / 3;
        for &i in &members[..train] {
            out[i] = Split::Train;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub label: usize,
    pub split: Split,
    /// `heatmaps[t][s]`, relative to the manifest.
    pub heatmaps: Vec<Vec<String>>,
    pub video_feature: String,
    pub gt_poses: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: SynthConfig,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let manifest: Manifest = read_json(path)?;
        manifest.config.validate()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, base))
    }

    pub fn entries(&self, split: Option<Split>) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| split.is_none_or(|s| e.split == s))
    }
}

impl ManifestEntry {
    pub fn load_heatmaps(&self, base: &Path) -> Result<Vec<HeatmapStack>> {
        self.heatmaps
            .iter()
            .map(|frame| frame.iter().map(|p| read_hpt(base.join(p))).collect())
            .collect()
    }

    pub fn load_video_feature(&self, base: &Path) -> Result<Tensor<f32>> {
        read_hpt(base.join(&self.video_feature))
    }

    pub fn load_gt_poses(&self, base: &Path) -> Result<PoseSequence> {
        PoseSequence::new(read_hpt(base.join(&self.gt_poses))?)
    }
}

fn write_sample(dir: &Path, sample: &SynthSample, split: Split) -> Result<ManifestEntry> {
    let rel = format!("samples/{}", sample.id);
    let abs = dir.join(&rel);
    fs::create_dir_all(&abs).map_err(|e| Error::io(&abs, e))?;
    let mut heatmaps = Vec::with_capacity(sample.heatmaps.len());
    for (t, stack) in sample.heatmaps.iter().enumerate() {
        let mut paths = Vec::with_capacity(stack.len());
        for (s, map) in stack.iter().enumerate() {
            let name = format!("{rel}/heatmap_t{t:03}_s{s}.hpt");
            write_hpt(dir.join(&name), map)?;
            paths.push(name);
        }
        heatmaps.push(paths);
    }
    let video_feature = format!("{rel}/video_feature.hpt");
    write_hpt(dir.join(&video_feature), &sample.video_feature)?;
    let gt_poses = format!("{rel}/gt_poses.hpt");
    write_hpt(dir.join(&gt_poses), sample.gt_poses.tensor())?;
    Ok(ManifestEntry {
        id: sample.id.clone(),
        label: sample.label,
        split,
        heatmaps,
        video_feature,
        gt_poses,
    })
}

/// All `(label, index)` pairs in manifest order.
pub fn sample_keys(cfg: &SynthConfig) -> Vec<(usize, usize)> {
    (0..cfg.num_classes)
        .flat_map(|c| (0..cfg.samples_per_class).map(move |i| (c, i)))
        .collect()
}

/// Split assignment for every sample of a config, in manifest order.
pub fn dataset_splits(cfg: &SynthConfig) -> Vec<Split> {
    let keys: Vec<(String, usize)> = sample_keys(cfg)
        .into_iter()
        .map(|(c, i)| (sample_id(c, i), c))
        .collect();
    assign_splits(&keys)
}

/// Writes every sample as `.hpt` files plus `manifest.json` into `out_dir`.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mixing = mixing_matrices(cfg);
    let keys = sample_keys(cfg);
    let splits = dataset_splits(cfg);
    write_dir_atomically(out_dir, |dir| {
        let samples = keys
            .par_iter()
            .zip(splits.par_iter())
            .map(|(&(label, index), &split)| {
                let sample = generate_sample(cfg, &mixing, label, index)?;
                write_sample(dir, &sample, split)
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            config: cfg.clone(),
            samples,
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            samples_per_class: 4,
            frames: 8,
            scales: vec![Scale(32, 24, 20), Scale(16, 12, 24)],
            gaussian_sigma: 1.5,
            ..SynthConfig::default()
        }
    }

    fn argmax(plane: &[f32]) -> usize {
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn default_geometry() {
        let cfg = SynthConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.scales[1], Scale(32, 24, 96));
        assert_eq!(cfg.joints, 17);
        assert_eq!(cfg.largest_scale_index(), 0);
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = SynthConfig { frames: 1, ..SynthConfig::default() };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "synth.frames"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn motion_is_deterministic_and_in_bounds() {
        let cfg = SynthConfig { noise_std: 0.0, ..SynthConfig::default() };
        let a = generate_motion(2, &cfg, &mut rng_for(1, &["m"])).unwrap();
        let b = generate_motion(2, &cfg, &mut rng_for(1, &["m"])).unwrap();
        assert_eq!(a, b);
        let big = cfg.largest_scale();
        for t in 0..a.frames() {
            for j in 0..a.joints() {
                let (x, y) = a.xy(t, j);
                assert!(x > 0.0 && x < (big.w() - 1) as f32);
                assert!(y > 0.0 && y < (big.h() - 1) as f32);
            }
        }
        assert!(generate_motion(5, &cfg, &mut rng_for(1, &["m"])).is_err());
    }

    /// Dominant DFT bin of a trajectory after removing its mean.
    fn dominant_frequency(v: &[f64]) -> usize {
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        (1..n / 2 + 1)
            .max_by(|&a, &b| {
                let power = |k: usize| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (t, x) in v.iter().enumerate() {
                        let ang = 2.0 * PI * (k * t) as f64 / n as f64;
                        re += (x - mean) * ang.cos();
                        im -= (x - mean) * ang.sin();
                    }
                    re * re + im * im
                };
                power(a).partial_cmp(&power(b)).unwrap()
            })
            .unwrap()
    }

    #[test]
    fn classes_differ_in_dominant_frequency() {
        let cfg = SynthConfig::default();
        let a = generate_motion(0, &cfg, &mut rng_for(3, &["m"])).unwrap();
        let b = generate_motion(1, &cfg, &mut rng_for(3, &["m"])).unwrap();
        let differs = (0..cfg.joints).any(|j| {
            (0..2).any(|axis| {
                let ta: Vec<f64> = (0..cfg.frames).map(|t| a.tensor().get(&[t, j, axis]) as f64).collect();
                let tb: Vec<f64> = (0..cfg.frames).map(|t| b.tensor().get(&[t, j, axis]) as f64).collect();
                let spread = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
                (spread(&ta) > 0.5 || spread(&tb) > 0.5) && dominant_frequency(&ta) != dominant_frequency(&tb)
            })
        });
        assert!(differs);
    }

    #[test]
    fn single_gaussian_peaks_at_rounded_centre() {
        let scale = Scale(15, 11, 1);
        let m = Tensor::new([1, 1], vec![1.0f32]).unwrap();
        let map = render_frame(&[(5.0, 7.0)], scale, 1.5, &m, 0.0, &mut rng_for(0, &[])).unwrap();
        assert_eq!(argmax(map.data()), 7 * 11 + 5);
        assert_eq!(map.get(&[0, 7, 5]), 1.0);
    }

    #[test]
    fn default_middle_stack_shape() {
        let cfg = SynthConfig { frames: 2, ..SynthConfig::default() };
        let poses = generate_motion(0, &cfg, &mut rng_for(0, &["m"])).unwrap();
        let stacks = render_heatmaps(&poses, &cfg, &mut rng_for(0, &["h"])).unwrap();
        assert_eq!(stacks.len(), 2);
        assert_eq!(stacks[0][1].shape(), &[96, 32, 24]);
        assert_eq!(stacks[0][0].shape(), &[32, 64, 48]);
        assert_eq!(stacks[0][2].shape(), &[192, 16, 12]);
    }

    #[test]
    fn mixing_is_row_stochastic_with_dominant_pure_channels() {
        let cfg = SynthConfig::default();
        for m in mixing_matrices(&cfg) {
            let (c, n) = (m.shape()[0], m.shape()[1]);
            for k in 0..c {
                let row = &m.data()[k * n..(k + 1) * n];
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
            }
            let channels = joint_channels(&m);
            for (j, &k) in channels.iter().enumerate() {
                let row = &m.data()[k * n..(k + 1) * n];
                assert_eq!(argmax(row), j);
                assert!(row[j] > 0.6);
            }
        }
    }

    #[test]
    fn dominant_channel_peaks_near_joint_without_noise() {
        let cfg = SynthConfig { noise_std: 0.0, frames: 6, ..SynthConfig::default() };
        let mixing = mixing_matrices(&cfg);
        for label in 0..cfg.num_classes {
            let sample = generate_sample(&cfg, &mixing, label, 0).unwrap();
            for (s, scale) in cfg.scales.iter().enumerate() {
                let channels = joint_channels(&mixing[s]);
                let rx = scale.w() as f32 / 48.0;
                let ry = scale.h() as f32 / 64.0;
                for t in 0..cfg.frames {
                    let map = &sample.heatmaps[t][s];
                    let hw = scale.h() * scale.w();
                    for (j, &k) in channels.iter().enumerate() {
                        let plane = &map.data()[k * hw..(k + 1) * hw];
                        let peak = argmax(plane);
                        let (px, py) = ((peak % scale.w()) as f32, (peak / scale.w()) as f32);
                        let (x, y) = sample.gt_poses.xy(t, j);
                        assert!(
                            (px - x * rx).abs() <= 1.0 && (py - y * ry).abs() <= 1.0,
                            "scale {s} joint {j} frame {t}: peak ({px},{py}) vs ({},{})",
                            x * rx,
                            y * ry
                        );
                        assert!(plane.iter().all(|&v| (0.0..=1.0).contains(&v)));
                    }
                }
            }
        }
    }

    #[test]
    fn noisy_heatmaps_stay_in_bounds() {
        let cfg = SynthConfig { noise_std: 0.1, ..small_cfg() };
        let mixing = mixing_matrices(&cfg);
        let sample = generate_sample(&cfg, &mixing, 1, 0).unwrap();
        for stack in &sample.heatmaps {
            for map in stack {
                assert!(map.data().iter().all(|&v| (0.0..=1.0 + 0.3 + 1e-6).contains(&v)));
            }
        }
    }

    #[test]
    fn samples_are_deterministic() {
        let cfg = small_cfg();
        let mixing = mixing_matrices(&cfg);
        let a = generate_sample(&cfg, &mixing, 3, 1).unwrap();
        let b = generate_sample(&cfg, &mixing, 3, 1).unwrap();
        assert_eq!(a.gt_poses, b.gt_poses);
        assert_eq!(a.heatmaps, b.heatmaps);
        assert_eq!(a.video_feature, b.video_feature);
        assert_eq!(a.video_feature.shape(), &[cfg.video_dim]);
    }

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn video_features_cluster_by_class() {
        let cfg = SynthConfig { samples_per_class: 20, ..SynthConfig::default() };
        let mut feats = Vec::new();
        for (label, index) in sample_keys(&cfg) {
            let id = sample_id(label, index);
            let poses = generate_motion(label, &cfg, &mut rng_for(cfg.seed, &["motion", &id])).unwrap();
            let f = make_video_feature(&poses, label, &cfg, &mut rng_for(cfg.seed, &["video", &id])).unwrap();
            feats.push((label, f));
        }
        assert_eq!(feats.len(), 100);
        let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                let c = cosine(feats[i].1.data(), feats[j].1.data());
                if feats[i].0 == feats[j].0 {
                    intra = (intra.0 + c, intra.1 + 1);
                } else {
                    inter = (inter.0 + c, inter.1 + 1);
                }
            }
        }
        assert!(inter.0 / (inter.1 as f64) < intra.0 / (intra.1 as f64));
    }

    #[test]
    fn default_split_is_two_to_one_per_class() {
        let cfg = SynthConfig::default();
        let splits = dataset_splits(&cfg);
        assert_eq!(splits.len(), 150);
        for (c, chunk) in splits.chunks(cfg.samples_per_class).enumerate() {
            let train = chunk.iter().filter(|&&s| s == Split::Train).count();
            assert!((train as i64 - 20).abs() <= 1, "class {c}: {train}");
        }
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let cfg = SynthConfig { num_classes: 2, samples_per_class: 3, frames: 3, ..small_cfg() };
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        let manifest = generate_dataset(&cfg, &a).unwrap();
        generate_dataset(&cfg, &b).unwrap();
        assert_eq!(manifest.samples.len(), 6);
        for entry in &manifest.samples {
            for frame in &entry.heatmaps {
                for p in frame {
                    assert_eq!(fs::read(a.join(p)).unwrap(), fs::read(b.join(p)).unwrap());
                }
            }
        }
        assert_eq!(fs::read(a.join(MANIFEST_FILE)).unwrap(), fs::read(b.join(MANIFEST_FILE)).unwrap());
        let (loaded, base) = Manifest::load(&a.join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, manifest);
        let mixing = mixing_matrices(&cfg);
        let direct = generate_sample(&cfg, &mixing, 1, 2).unwrap();
        let entry = loaded.samples.iter().find(|e| e.id == direct.id).unwrap();
        assert_eq!(entry.load_heatmaps(&base).unwrap(), direct.heatmaps);
        assert_eq!(entry.load_gt_poses(&base).unwrap(), direct.gt_poses);
        // regenerating into an existing output replaces it
        generate_dataset(&cfg, &a).unwrap();
    }
}
