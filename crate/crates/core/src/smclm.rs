//! Spatial-motion co-learning: bone and motion streams derived from pooled
//! features, one independent graph model per stream, features concatenated.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::topology::{gcn_backward, gcn_features, GcnCache, GcnParams, SkeletonGraph};

/// Input modality of one topological model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    /// Pooled features as-is.
    Joint,
    /// Child minus parent along the skeleton.
    Bone,
    /// Next frame minus current frame.
    JointMotion,
    /// Temporal difference of bones.
    BoneMotion,
}

impl StreamKind {
    pub const ALL: [StreamKind; 4] = [
        StreamKind::Joint,
        StreamKind::Bone,
        StreamKind::JointMotion,
        StreamKind::BoneMotion,
    ];

    pub fn short(&self) -> &'static str {
        match self {
            StreamKind::Joint => "p",
            StreamKind::Bone => "s",
            StreamKind::JointMotion => "m",
            StreamKind::BoneMotion => "bm",
        }
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamKind::Joint => "joint",
            StreamKind::Bone => "bone",
            StreamKind::JointMotion => "joint_motion",
            StreamKind::BoneMotion => "bone_motion",
        })
    }
}

impl FromStr for StreamKind {
    type Err = Error;

    /// Accepts the short codes `p`, `s`, `m`, `bm` as well as full names.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "p" | "joint" | "j" => StreamKind::Joint,
            "s" | "bone" | "b" => StreamKind::Bone,
            "m" | "joint_motion" | "jm" => StreamKind::JointMotion,
            "bm" | "bone_motion" => StreamKind::BoneMotion,
            other => return Err(Error::invalid(format!("unknown stream `{other}`"))),
        })
    }
}

/// `F_s[t, j] = F_p[t, j] − F_p[t, parent(j)]`; roots are zero.
pub fn spatial_transform<S: Scalar>(fp: &Tensor<S>, g: &SkeletonGraph) -> Result<Tensor<S>> {
    let (t, n, c) = fp.dims3("spatial_transform")?;
    if n != g.num_joints() {
        return Err(Error::shape(
            "spatial_transform",
            format!("{n} joints in features, {} in skeleton", g.num_joints()),
        ));
    }
    let d = fp.data();
    let mut out = vec![S::zero(); t * n * c];
    for f in 0..t {
        for j in 0..n {
            let p = g.parent(j);
            if p == j {
                continue;
            }
            let (dst, a, b) = ((f * n + j) * c, (f * n + j) * c, (f * n + p) * c);
            for k in 0..c {
                out[dst + k] = d[a + k] - d[b + k];
            }
        }
    }
    Tensor::new([t, n, c], out)
}

/// `F_m[t] = F_p[t + 1] − F_p[t]`; the last frame is zero.
pub fn motion_transform<S: Scalar>(fp: &Tensor<S>) -> Result<Tensor<S>> {
    let (t, n, c) = fp.dims3("motion_transform")?;
    let stride = n * c;
    let d = fp.data();
    let mut out = vec![S::zero(); t * stride];
    for f in 0..t.saturating_sub(1) {
        for i in 0..stride {
            out[f * stride + i] = d[(f + 1) * stride + i] - d[f * stride + i];
        }
    }
    Tensor::new([t, n, c], out)
}

/// Input tensor for the given stream.
pub fn stream_input<S: Scalar>(kind: StreamKind, fp: &Tensor<S>, g: &SkeletonGraph) -> Result<Tensor<S>> {
    match kind {
        StreamKind::Joint => Ok(fp.clone()),
        StreamKind::Bone => spatial_transform(fp, g),
        StreamKind::JointMotion => motion_transform(fp),
        StreamKind::BoneMotion => motion_transform(&spatial_transform(fp, g)?),
    }
}

/// Fixed per-(joint, channel) standardisation of a stream's input, fit on
/// training data and frozen afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNorm<S = f32> {
    /// `[n, c]`.
    pub mean: Tensor<S>,
    /// `[n, c]`, strictly positive.
    pub scale: Tensor<S>,
}

impl<S: Scalar> ChannelNorm<S> {
    /// Mean and standard deviation over every frame of every sequence;
    /// constant channels get scale 1.
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a Tensor<S>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut shape = None;
        let mut count = 0usize;
        for seq in seqs {
            let (t, n, c) = seq.dims3("channel_norm")?;
            match shape {
                None => {
                    shape = Some((n, c));
                    sum = vec![0.0; n * c];
                    sq = vec![0.0; n * c];
                }
                Some(s) if s != (n, c) => {
                    return Err(Error::shape("channel_norm", format!("{:?} after {:?}", (n, c), s)));
                }
                _ => {}
            }
            for f in 0..t {
                for (i, &v) in seq.data()[f * n * c..(f + 1) * n * c].iter().enumerate() {
                    let v = v.to_f64();
                    sum[i] += v;
                    sq[i] += v * v;
                }
            }
            count += t;
        }
        let (n, c) = shape.ok_or_else(|| Error::invalid("no sequences to fit a normalisation on"))?;
        let k = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / k).collect();
        let scale: Vec<S> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / k - m * m).max(0.0).sqrt();
                S::from_f64(if sd > 1e-6 { sd } else { 1.0 })
            })
            .collect();
        Ok(Self {
            mean: Tensor::new([n, c], mean.into_iter().map(S::from_f64).collect())?,
            scale: Tensor::new([n, c], scale)?,
        })
    }

    pub fn identity(n: usize, c: usize) -> Self {
        Self {
            mean: Tensor::zeros([n, c]),
            scale: Tensor::filled([n, c], S::one()),
        }
    }

    pub fn apply(&self, seq: &Tensor<S>) -> Result<Tensor<S>> {
        let (t, n, c) = seq.dims3("channel_norm")?;
        if self.mean.shape() != [n, c] {
            return Err(Error::shape(
                "channel_norm",
                format!("statistics {:?} for input {:?}", self.mean.shape(), seq.shape()),
            ));
        }
        let stride = n * c;
        let (m, s) = (self.mean.data(), self.scale.data());
        Tensor::new(
            [t, n, c],
            seq.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| (v - m[i % stride]) / s[i % stride])
                .collect(),
        )
    }

    pub fn cast<T: Scalar>(&self) -> ChannelNorm<T> {
        ChannelNorm {
            mean: self.mean.cast(),
            scale: self.scale.cast(),
        }
    }
}

/// Per-stream outputs of [`co_learn`].
#[derive(Debug, Clone)]
pub struct StreamBundle<S> {
    pub kinds: Vec<StreamKind>,
    /// Pre-head feature of each stream.
    pub features: Vec<Vec<S>>,
    /// Concatenation of `features` in stream order.
    pub concatenated: Vec<S>,
    /// Head output of each stream, for the auxiliary losses.
    pub logits: Vec<Vec<S>>,
    caches: Vec<GcnCache<S>>,
}

/// Runs one independent graph model per stream and concatenates their features.
///
/// `norms`, when given, standardises each stream's input before its model.
pub fn co_learn<S: Scalar>(
    fp: &Tensor<S>,
    g: &SkeletonGraph,
    adj: &Tensor<S>,
    streams: &[(StreamKind, &GcnParams<S>)],
    norms: Option<&[ChannelNorm<S>]>,
) -> Result<StreamBundle<S>> {
    if streams.is_empty() {
        return Err(Error::invalid("co_learn needs at least one stream"));
    }
    if norms.is_some_and(|n| n.len() != streams.len()) {
        return Err(Error::shape("co_learn", "one normalisation per stream expected"));
    }
    let mut bundle = StreamBundle {
        kinds: Vec::with_capacity(streams.len()),
        features: Vec::with_capacity(streams.len()),
        concatenated: Vec::new(),
        logits: Vec::with_capacity(streams.len()),
        caches: Vec::with_capacity(streams.len()),
    };
    for (i, &(kind, params)) in streams.iter().enumerate() {
        let mut input = stream_input(kind, fp, g)?;
        if let Some(norms) = norms {
            input = norms[i].apply(&input)?;
        }
        let (feature, cache) = gcn_features(&input, adj, params)?;
        bundle.logits.push(params.head.forward(&feature)?);
        bundle.concatenated.extend_from_slice(&feature);
        bundle.features.push(feature);
        bundle.kinds.push(kind);
        bundle.caches.push(cache);
    }
    Ok(bundle)
}

/// Parameter gradients of each stream model given gradients at the
/// concatenated feature and at each stream's logits.
pub fn co_learn_backward<S: Scalar>(
    bundle: &StreamBundle<S>,
    adj: &Tensor<S>,
    streams: &[(StreamKind, &GcnParams<S>)],
    d_concat: Option<&[S]>,
    d_logits: &[Vec<S>],
) -> Result<Vec<GcnParams<S>>> {
    if d_logits.len() != streams.len() || streams.len() != bundle.caches.len() {
        return Err(Error::shape("co_learn_backward", "stream count mismatch"));
    }
    if let Some(d) = d_concat {
        if d.len() != bundle.concatenated.len() {
            return Err(Error::shape(
                "co_learn_backward",
                format!("concat gradient {} vs {}", d.len(), bundle.concatenated.len()),
            ));
        }
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(streams.len());
    for (i, &(_, params)) in streams.iter().enumerate() {
        let width = bundle.features[i].len();
        let d_feature = d_concat.map(|d| &d[offset..offset + width]);
        offset += width;
        out.push(gcn_backward(&bundle.caches[i], adj, params, &d_logits[i], d_feature)?.params);
    }
    Ok(out)
}
