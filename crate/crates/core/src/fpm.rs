//! Feedback pooling: decode joint coordinates from heatmaps by argmax, then pool
//! every heatmap channel in a window around each decoded joint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::synthgen::HeatmapStack;

/// Integer joint coordinates `(x, y)` on some heatmap grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pose2D {
    pub joints: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reducer {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    /// Side of the square pooling window; odd.
    pub region: usize,
    pub reducer: Reducer,
    /// Scale on which joints are decoded.
    pub reference_scale_index: usize,
    /// Scale that is pooled.
    pub pool_scale_index: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            region: 1,
            reducer: Reducer::Mean,
            reference_scale_index: 1,
            pool_scale_index: 1,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self, num_scales: usize) -> Result<()> {
        if self.region == 0 || self.region.is_multiple_of(2) {
            return Err(Error::config("pool.region", format!("must be a positive odd integer, got {}", self.region)));
        }
        if self.reference_scale_index >= num_scales {
            return Err(Error::config("pool.reference_scale_index", format!("only {num_scales} scales")));
        }
        if self.pool_scale_index >= num_scales {
            return Err(Error::config("pool.pool_scale_index", format!("only {num_scales} scales")));
        }
        Ok(())
    }
}

/// Argmax of each listed channel; ties go to the smallest row-major index.
pub fn extract_pose(heatmap: &Tensor<f32>, joint_channels: &[usize]) -> Result<Pose2D> {
    let (c, h, w) = heatmap.dims3("extract_pose")?;
    if joint_channels.is_empty() {
        return Err(Error::invalid("extract_pose needs at least one joint channel"));
    }
    let joints = joint_channels
        .iter()
        .map(|&k| {
            if k >= c {
                return Err(Error::invalid(format!("joint channel {k} out of range for {c} channels")));
            }
            let plane = &heatmap.data()[k * h * w..(k + 1) * h * w];
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            Ok((best % w, best / w))
        })
        .collect::<Result<_>>()?;
    Ok(Pose2D { joints })
}

/// `round(v · to / from)` with halves rounded up, in exact integer arithmetic.
fn rescale_coord(v: usize, from: usize, to: usize) -> usize {
    let scaled = (2 * v * to + from) / (2 * from);
    scaled.min(to - 1)
}

/// Maps integer coordinates between grids by the width and height ratios.
pub fn rescale_pose(pose: &Pose2D, from: (usize, usize), to: (usize, usize)) -> Result<Pose2D> {
    let ((fh, fw), (th, tw)) = (from, to);
    if fh == 0 || fw == 0 || th == 0 || tw == 0 {
        return Err(Error::invalid(format!("cannot rescale between {from:?} and {to:?}")));
    }
    Ok(Pose2D {
        joints: pose
            .joints
            .iter()
            .map(|&(x, y)| (rescale_coord(x, fw, tw), rescale_coord(y, fh, th)))
            .collect(),
    })
}

/// `[n, c]` pooled features: for each joint, every channel reduced over the
/// `R×R` window centred on the joint, clipped to the image.
pub fn feedback_pool(heatmap: &Tensor<f32>, pose: &Pose2D, cfg: &PoolConfig) -> Result<Tensor<f32>> {
    let (c, h, w) = heatmap.dims3("feedback_pool")?;
    if cfg.region == 0 || cfg.region.is_multiple_of(2) {
        return Err(Error::invalid(format!("pooling region must be odd, got {}", cfg.region)));
    }
    let n = pose.joints.len();
    if n == 0 {
        return Err(Error::invalid("feedback_pool needs at least one joint"));
    }
    let half = cfg.region / 2;
    let data = heatmap.data();
    let mut out = Vec::with_capacity(n * c);
    for &(x, y) in &pose.joints {
        if x >= w || y >= h {
            return Err(Error::invalid(format!("joint ({x}, {y}) outside {h}x{w} heatmap")));
        }
        let (r0, r1) = (y.saturating_sub(half), (y + half).min(h - 1));
        let (c0, c1) = (x.saturating_sub(half), (x + half).min(w - 1));
        let count = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        for k in 0..c {
            let plane = &data[k * h * w..(k + 1) * h * w];
            let value = match cfg.reducer {
                Reducer::Mean => {
                    let mut acc = 0.0f64;
                    for r in r0..=r1 {
                        for &v in &plane[r * w + c0..=r * w + c1] {
                            acc += v as f64;
                        }
                    }
                    (acc / count) as f32
                }
                Reducer::Max => {
                    let mut best = f32::NEG_INFINITY;
                    for r in r0..=r1 {
                        for &v in &plane[r * w + c0..=r * w + c1] {
                            best = best.max(v);
                        }
                    }
                    best
                }
            };
            out.push(value);
        }
    }
    Tensor::new([n, c], out)?.ensure_finite("feedback_pool")
}

/// Pooled features `[T, n, c]` and the decoded poses `[T, n, 2]` (reference grid).
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSequence {
    pub features: Tensor<f32>,
    pub poses: Tensor<f32>,
}

/// Per frame: decode on the reference scale, move the pose to the pooled
/// scale, pool there.
pub fn pool_sequence(
    stacks: &[HeatmapStack],
    cfg: &PoolConfig,
    joint_channels: &[usize],
) -> Result<PooledSequence> {
    let first = stacks.first().ok_or_else(|| Error::invalid("empty heatmap sequence"))?;
    cfg.validate(first.len())?;
    let geometry: Vec<&[usize]> = first.iter().map(|t| t.shape()).collect();
    for (t, stack) in stacks.iter().enumerate() {
        if stack.len() != first.len() || stack.iter().zip(&geometry).any(|(m, g)| m.shape() != *g) {
            return Err(Error::shape("pool_sequence", format!("frame {t} geometry differs from frame 0")));
        }
    }
    let (_, rh, rw) = first[cfg.reference_scale_index].dims3("pool_sequence")?;
    let (c, ph, pw) = first[cfg.pool_scale_index].dims3("pool_sequence")?;
    let n = joint_channels.len();
    let mut features = Vec::with_capacity(stacks.len() * n * c);
    let mut poses = Vec::with_capacity(stacks.len() * n * 2);
    for stack in stacks {
        let pose = extract_pose(&stack[cfg.reference_scale_index], joint_channels)?;
        let moved = rescale_pose(&pose, (rh, rw), (ph, pw))?;
        features.extend_from_slice(feedback_pool(&stack[cfg.pool_scale_index], &moved, cfg)?.data());
        for &(x, y) in &pose.joints {
            poses.push(x as f32);
            poses.push(y as f32);
        }
    }
    Ok(PooledSequence {
        features: Tensor::new([stacks.len(), n, c], features)?,
        poses: Tensor::new([stacks.len(), n, 2], poses)?,
    })
}
