//! Turning generated samples into model inputs.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fpm::{pool_sequence, PoolConfig, PooledSequence};
use crate::model::{InputKind, Sample};
use crate::numerics::tensor::Tensor;
use crate::synthgen::{
    dataset_splits, generate_sample, joint_channels, mixing_matrices, sample_keys, HeatmapStack, Manifest, Split,
    SynthConfig,
};

/// Scales decoded coordinates on an `h × w` grid to `[-1, 1]`.
pub fn normalize_poses(poses: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (t, n, two) = poses.dims3("normalize_poses")?;
    if two != 2 {
        return Err(Error::shape("normalize_poses", format!("last axis is {two}, expected 2")));
    }
    let span = |extent: usize| (extent.max(2) - 1) as f32;
    let (sx, sy) = (span(w), span(h));
    Tensor::new(
        [t, n, 2],
        poses
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| 2.0 * v / if i % 2 == 0 { sx } else { sy } - 1.0)
            .collect(),
    )
}

/// Pools one sample's heatmaps and selects the requested input.
pub fn build_input(
    stacks: &[HeatmapStack],
    pool: &PoolConfig,
    channels: &[usize],
    input: InputKind,
) -> Result<(Tensor<f32>, PooledSequence)> {
    let pooled = pool_sequence(stacks, pool, channels)?;
    let x = match input {
        InputKind::Pooled => pooled.features.clone(),
        InputKind::Pose => {
            let (_, h, w) = stacks[0][pool.reference_scale_index].dims3("build_input")?;
            normalize_poses(&pooled.poses, h, w)?
        }
    };
    Ok((x, pooled))
}

/// Dominant channel of each joint on the reference scale.
pub fn reference_channels(cfg: &SynthConfig, pool: &PoolConfig) -> Result<Vec<usize>> {
    pool.validate(cfg.scales.len())?;
    Ok(joint_channels(&mixing_matrices(cfg)[pool.reference_scale_index]))
}

/// Loads, pools and prepares every manifest sample in `split`, in manifest order.
pub fn load_samples(
    manifest: &Manifest,
    base: &Path,
    split: Option<Split>,
    pool: &PoolConfig,
    input: InputKind,
) -> Result<Vec<Sample>> {
    let channels = reference_channels(&manifest.config, pool)?;
    let entries: Vec<_> = manifest.entries(split).collect();
    entries
        .par_iter()
        .map(|e| {
            let (x, _) = build_input(&e.load_heatmaps(base)?, pool, &channels, input)?;
            Ok(Sample {
                id: e.id.clone(),
                label: e.label,
                input: x,
                video: e.load_video_feature(base)?.into_data(),
            })
        })
        .collect()
}

/// Train and test samples generated in memory, identical to what
/// `generate_dataset` followed by [`load_samples`] yields.
pub fn generate_samples(cfg: &SynthConfig, pool: &PoolConfig, input: InputKind) -> Result<(Vec<Sample>, Vec<Sample>)> {
    cfg.validate()?;
    let mixing = mixing_matrices(cfg);
    let channels = reference_channels(cfg, pool)?;
    let keys = sample_keys(cfg);
    let splits = dataset_splits(cfg);
    let all: Vec<(Sample, Split)> = keys
        .par_iter()
        .zip(splits.par_iter())
        .map(|(&(label, index), &split)| {
            let s = generate_sample(cfg, &mixing, label, index)?;
            let (x, _) = build_input(&s.heatmaps, pool, &channels, input)?;
            Ok((
                Sample {
                    id: s.id,
                    label,
                    input: x,
                    video: s.video_feature.into_data(),
                },
                split,
            ))
        })
        .collect::<Result<_>>()?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, split) in all {
        match split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    Ok((train, test))
}
