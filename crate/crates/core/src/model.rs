//! The assembled network: per-stream graph models, text refinement and score
//! fusion, or a single stream with its own head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse_backward, fuse_scores, total_loss, FusionCache, LossWeights};
use crate::numerics::ops::{cross_entropy_with_grad, onehot};
use crate::numerics::params::{nested, ParamTree};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::seed::rng_for;
use crate::smclm::{co_learn, co_learn_backward, stream_input, ChannelNorm, StreamBundle, StreamKind};
use crate::topology::{normalize_adjacency, GcnParams, SkeletonGraph};
use crate::trmm::{trmm_backward, trmm_forward, TrmmCache, TrmmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Co-learned streams, text refinement and fused scores.
    Full,
    /// One stream classified by its own head.
    Single,
}

/// What the graph models see for each joint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Full-channel heatmap features from feedback pooling.
    Pooled,
    /// Decoded 2-D coordinates only, scaled to `[-1, 1]`.
    Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input: InputKind,
    pub streams: Vec<StreamKind>,
    /// Output widths of the graph-conv layers; the input width comes from the data.
    pub gcn_widths: Vec<usize>,
    /// Text feature width `C`.
    pub text_dim: usize,
    pub trmm_hidden: usize,
    /// Seed of the stand-in label encoder.
    pub label_seed: u64,
    /// Standardise each stream's input with statistics of the training split.
    pub normalize_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Full,
            input: InputKind::Pooled,
            streams: vec![StreamKind::Joint, StreamKind::Bone, StreamKind::JointMotion],
            gcn_widths: vec![96, 128, 128],
            text_dim: 64,
            trmm_hidden: 64,
            label_seed: 0,
            normalize_input: true,
        }
    }
}

impl ModelConfig {
    /// Single-stream model on `kind`, other settings unchanged.
    pub fn single(&self, kind: StreamKind) -> Self {
        Self {
            kind: ModelKind::Single,
            streams: vec![kind],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ModelKind::Single if self.streams.len() != 1 => {
                return Err(Error::config("model.streams", "a single-stream model takes exactly one stream"))
            }
            ModelKind::Full if self.streams.is_empty() || self.streams.len() > 3 => {
                return Err(Error::config("model.streams", "the full model takes one to three streams"))
            }
            _ => {}
        }
        if self.gcn_widths.is_empty() || self.gcn_widths.contains(&0) {
            return Err(Error::config("model.gcn_widths", "needs at least one positive width"));
        }
        if self.text_dim == 0 {
            return Err(Error::config("model.text_dim", "must be positive"));
        }
        if self.trmm_hidden == 0 {
            return Err(Error::config("model.trmm_hidden", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Score temperature τ (fixed, not learned).
    pub tau: f64,
    /// Video feature width `C_u`; must match the dataset.
    pub video_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { tau: 0.1, video_dim: 64 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("fusion.tau", "must be a positive number"));
        }
        if self.video_dim == 0 {
            return Err(Error::config("fusion.video_dim", "must be positive"));
        }
        Ok(())
    }
}

/// All trainable parameters. Text embeddings are frozen and live in [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct HpNetParams<S = f32> {
    pub streams: Vec<GcnParams<S>>,
    pub trmm: Option<TrmmParams<S>>,
    /// Video alignment map `[C, C_u]`.
    pub align: Option<Tensor<S>>,
}

impl<S: Scalar> HpNetParams<S> {
    /// Seeded initialisation; each part draws from its own stream so adding
    /// a component never shifts the others.
    pub fn init(cfg: &ModelConfig, fusion: &FusionConfig, input_width: usize, classes: usize, seed: u64) -> Self {
        let mut widths = vec![input_width];
        widths.extend_from_slice(&cfg.gcn_widths);
        let streams = cfg
            .streams
            .iter()
            .enumerate()
            .map(|(i, k)| GcnParams::init(&widths, classes, &mut rng_for(seed, &["gcn", &i.to_string(), &k.to_string()])))
            .collect();
        let (trmm, align) = match cfg.kind {
            ModelKind::Single => (None, None),
            ModelKind::Full => {
                let feature = cfg.gcn_widths[cfg.gcn_widths.len() - 1] * cfg.streams.len();
                let trmm = TrmmParams::init(feature, cfg.text_dim, cfg.trmm_hidden, &mut rng_for(seed, &["trmm"]));
                let std = (1.0 / fusion.video_dim as f64).sqrt();
                let align = crate::numerics::mlp::Linear::<S>::random(
                    fusion.video_dim,
                    cfg.text_dim,
                    std,
                    &mut rng_for(seed, &["align"]),
                )
                .weight;
                (Some(trmm), Some(align))
            }
        };
        Self { streams, trmm, align }
    }

    /// Same structure with values taken from a flat vector in [`ParamTree`] order.
    pub fn with_flat(&self, flat: &[S]) -> Result<Self> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape(
                "load_params",
                format!("{} values for {} parameters", flat.len(), self.num_scalars()),
            ));
        }
        let mut out = self.clone();
        let mut at = 0;
        for t in out.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(out)
    }

    pub fn cast<T: Scalar>(&self) -> HpNetParams<T> {
        let flat: Vec<T> = self.flatten().into_iter().map(|v| T::from_f64(v.to_f64())).collect();
        let mut out = HpNetParams::<T> {
            streams: self
                .streams
                .iter()
                .map(|g| GcnParams {
                    layers: g.layers.iter().map(Tensor::cast).collect(),
                    head: crate::numerics::mlp::Linear {
                        weight: g.head.weight.cast(),
                        bias: g.head.bias.cast(),
                    },
                })
                .collect(),
            trmm: None,
            align: self.align.as_ref().map(Tensor::cast),
        };
        if let Some(t) = &self.trmm {
            let mut z = TrmmParams::<T>::zeros(t.feature_dim(), t.text_dim(), t.p1.layers[0].out_dim());
            for (dst, (_, src)) in z.tensors_mut().into_iter().zip(t.tensors()) {
                *dst = src.cast();
            }
            out.trmm = Some(z);
        }
        out.with_flat(&flat).expect("same structure")
    }
}

impl<S: Scalar> ParamTree for HpNetParams<S> {
    type Elem = S;

    fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, g) in self.streams.iter().enumerate() {
            out.extend(nested(&format!("streams.{i}"), g.tensors()));
        }
        if let Some(t) = &self.trmm {
            out.extend(nested("trmm", t.tensors()));
        }
        if let Some(a) = &self.align {
            out.push(("align".into(), a));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for g in &mut self.streams {
            out.extend(g.tensors_mut());
        }
        if let Some(t) = &mut self.trmm {
            out.extend(t.tensors_mut());
        }
        if let Some(a) = &mut self.align {
            out.push(a);
        }
        out
    }
}

/// One prepared example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<S = f32> {
    pub id: String,
    pub label: usize,
    /// `[T, n, c]` pooled features or `[T, n, 2]` scaled poses.
    pub input: Tensor<S>,
    pub video: Vec<S>,
}

impl Sample<f32> {
    pub fn cast<T: Scalar>(&self) -> Sample<T> {
        Sample {
            id: self.id.clone(),
            label: self.label,
            input: self.input.cast(),
            video: self.video.iter().map(|&v| T::from_f64(v as f64)).collect(),
        }
    }
}

/// Everything fixed about a model: configuration, skeleton and frozen text.
#[derive(Debug, Clone)]
pub struct Network<S = f32> {
    pub config: ModelConfig,
    pub tau: S,
    pub graph: SkeletonGraph,
    adj: Tensor<S>,
    /// Frozen `[N, C]` label embeddings (unused by single-stream models).
    pub text: Tensor<S>,
    /// Frozen input standardisation, one per stream.
    pub norms: Option<Vec<ChannelNorm<S>>>,
}

/// Outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward<S> {
    /// Classification logits: fused scores, or the head of a single stream.
    pub logits: Vec<S>,
    /// Auxiliary head outputs, one per stream.
    pub stream_logits: Vec<Vec<S>>,
    /// Concatenated stream features `F_c`.
    pub features: Vec<S>,
    bundle: StreamBundle<S>,
    trmm: Option<(TrmmCache<S>, FusionCache<S>)>,
}

impl<S: Scalar> Network<S> {
    pub fn new(config: ModelConfig, fusion: &FusionConfig, graph: SkeletonGraph, text: Tensor<S>) -> Result<Self> {
        config.validate()?;
        fusion.validate()?;
        let (_, c) = text.dims2("network")?;
        if c != config.text_dim {
            return Err(Error::shape("network", format!("text width {c}, model.text_dim {}", config.text_dim)));
        }
        Ok(Self {
            adj: normalize_adjacency(&graph)?,
            tau: S::from_f64(fusion.tau),
            config,
            graph,
            text,
            norms: None,
        })
    }

    /// Fits the input standardisation on `samples` when the config asks for it.
    pub fn fit_norms(&mut self, samples: &[Sample<S>]) -> Result<()> {
        if !self.config.normalize_input {
            self.norms = None;
            return Ok(());
        }
        let mut norms = Vec::with_capacity(self.config.streams.len());
        for &kind in &self.config.streams {
            let inputs = samples
                .iter()
                .map(|x| stream_input(kind, &x.input, &self.graph))
                .collect::<Result<Vec<_>>>()?;
            norms.push(ChannelNorm::fit(&inputs)?);
        }
        self.norms = Some(norms);
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        Network {
            config: self.config.clone(),
            tau: T::from_f64(self.tau.to_f64()),
            graph: self.graph.clone(),
            adj: self.adj.cast(),
            text: self.text.cast(),
            norms: self.norms.as_ref().map(|v| v.iter().map(ChannelNorm::cast).collect()),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.text.shape()[0]
    }

    fn stream_refs<'a>(&self, p: &'a HpNetParams<S>) -> Result<Vec<(StreamKind, &'a GcnParams<S>)>> {
        if p.streams.len() != self.config.streams.len() {
            return Err(Error::shape(
                "network",
                format!("{} stream models for {} streams", p.streams.len(), self.config.streams.len()),
            ));
        }
        Ok(self.config.streams.iter().copied().zip(p.streams.iter()).collect())
    }

    pub fn forward(&self, p: &HpNetParams<S>, x: &Sample<S>) -> Result<Forward<S>> {
        let streams = self.stream_refs(p)?;
        let bundle = co_learn(&x.input, &self.graph, &self.adj, &streams, self.norms.as_deref())?;
        let stream_logits = bundle.logits.clone();
        let features = bundle.concatenated.clone();
        match self.config.kind {
            ModelKind::Single => Ok(Forward {
                logits: stream_logits[0].clone(),
                stream_logits,
                features,
                bundle,
                trmm: None,
            }),
            ModelKind::Full => {
                let (trmm, align) = full_parts(p)?;
                let (refined, tc) = trmm_forward(&features, &self.text, trmm)?;
                let (scores, fc) = fuse_scores(&refined, &x.video, align, self.tau)?;
                Ok(Forward {
                    logits: scores.logits,
                    stream_logits,
                    features,
                    bundle,
                    trmm: Some((tc, fc)),
                })
            }
        }
    }

    /// Training loss of one sample.
    pub fn loss(&self, p: &HpNetParams<S>, x: &Sample<S>, w: &LossWeights) -> Result<S> {
        Ok(self.loss_and_grad_inner(p, x, w, false)?.0)
    }

    /// Loss and its gradient with respect to every trainable parameter.
    pub fn loss_and_grad(&self, p: &HpNetParams<S>, x: &Sample<S>, w: &LossWeights) -> Result<(S, HpNetParams<S>)> {
        let (loss, grad) = self.loss_and_grad_inner(p, x, w, true)?;
        Ok((loss, grad.expect("requested")))
    }

    fn loss_and_grad_inner(
        &self,
        p: &HpNetParams<S>,
        x: &Sample<S>,
        w: &LossWeights,
        want_grad: bool,
    ) -> Result<(S, Option<HpNetParams<S>>)> {
        let n = self.num_classes();
        if x.label >= n {
            return Err(Error::invalid(format!("label {} outside {n} classes", x.label)));
        }
        let y: Vec<S> = onehot(x.label, n);
        let fwd = self.forward(p, x)?;
        let streams = self.stream_refs(p)?;
        match self.config.kind {
            ModelKind::Single => {
                let (loss, d) = cross_entropy_with_grad(&fwd.logits, &y)?;
                if !want_grad {
                    return Ok((loss, None));
                }
                let g = co_learn_backward(&fwd.bundle, &self.adj, &streams, None, &[d])?;
                Ok((
                    loss,
                    Some(HpNetParams {
                        streams: g,
                        trmm: None,
                        align: None,
                    }),
                ))
            }
            ModelKind::Full => {
                let lg = total_loss(&fwd.logits, &fwd.stream_logits, &y, w)?;
                if !want_grad {
                    return Ok((lg.loss, None));
                }
                let (trmm, align) = full_parts(p)?;
                let (tc, fc) = fwd.trmm.as_ref().expect("full forward keeps caches");
                let mut d_align = Tensor::zeros(align.shape().to_vec());
                let d_text = fuse_backward(fc, self.tau, &lg.d_scores, &mut d_align)?;
                let mut d_trmm = trmm.zeros_like();
                let d_fc = trmm_backward(tc, &self.text, trmm, &d_text, &mut d_trmm)?;
                let g = co_learn_backward(&fwd.bundle, &self.adj, &streams, Some(&d_fc), &lg.d_streams)?;
                Ok((
                    lg.loss,
                    Some(HpNetParams {
                        streams: g,
                        trmm: Some(d_trmm),
                        align: Some(d_align),
                    }),
                ))
            }
        }
    }
}

fn full_parts<S: Scalar>(p: &HpNetParams<S>) -> Result<(&TrmmParams<S>, &Tensor<S>)> {
    match (&p.trmm, &p.align) {
        (Some(t), Some(a)) => Ok((t, a)),
        _ => Err(Error::invalid("full model parameters lack the text refinement or alignment part")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{compare, finite_diff_grad_at, DEFAULT_EPS_F64};
    use crate::trmm::encode_labels;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(kind: ModelKind) -> (Network<f64>, HpNetParams<f64>, FusionConfig) {
        let cfg = ModelConfig {
            kind,
            streams: if kind == ModelKind::Full {
                vec![StreamKind::Joint, StreamKind::Bone, StreamKind::JointMotion]
            } else {
                vec![StreamKind::Bone]
            },
            gcn_widths: vec![5, 4],
            text_dim: 6,
            trmm_hidden: 5,
            ..ModelConfig::default()
        };
        let fusion = FusionConfig { tau: 0.5, video_dim: 7 };
        let labels: Vec<String> = (0..4).map(|i| format!("a{i}")).collect();
        let text = encode_labels(&labels, 6, 1).unwrap().matrix.cast();
        let g = SkeletonGraph::new(5, vec![(0, 1), (1, 2), (0, 3), (3, 4)]).unwrap();
        let net = Network::new(cfg.clone(), &fusion, g, text).unwrap();
        let p = HpNetParams::init(&cfg, &fusion, 3, 4, 9);
        (net, p, fusion)
    }

    fn sample(rng: &mut ChaCha8Rng) -> Sample<f64> {
        Sample {
            id: "x".into(),
            label: rng.random_range(0..4),
            input: Tensor::from_fn([4, 5, 3], |_| rng.random_range(-1.0..1.0)),
            video: (0..7).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn paths_cover_every_component() {
        let (_, p, _) = small(ModelKind::Full);
        let paths = p.paths();
        for prefix in ["streams.0.layers.0", "streams.2.head.weight", "trmm.bridge.weight", "trmm.p4.layers.1.bias", "align"] {
            assert!(paths.iter().any(|q| q.starts_with(prefix)), "{prefix}");
        }
        assert_eq!(p.flatten().len(), p.num_scalars());
        assert_eq!(p.with_flat(&p.flatten()).unwrap(), p);
        assert_eq!(p.cast::<f32>().cast::<f64>().paths(), paths);
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let (mut net, mut p, _) = small(ModelKind::Full);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fit: Vec<_> = (0..4).map(|_| sample(&mut rng)).collect();
        net.fit_norms(&fit).unwrap();
        assert!(net.norms.is_some());
        // Move the projections away from their tiny initial scale.
        for t in p.trmm.as_mut().unwrap().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let w = LossWeights { lambda1: 0.7, lambda2: 1.3, lambda3: 0.4 };
        for _ in 0..3 {
            let x = sample(&mut rng);
            let (_, grad) = net.loss_and_grad(&p, &x, &w).unwrap();
            let all: Vec<usize> = (0..p.num_scalars()).collect();
            let numeric = finite_diff_grad_at(|q| net.loss(q, &x, &w), &p, DEFAULT_EPS_F64, all.clone()).unwrap();
            let report = compare(&grad, &all, &numeric);
            assert!(report.passes(1e-3), "{report:?}");
        }
    }

    #[test]
    fn single_gradient_matches_finite_differences() {
        let (net, p, _) = small(ModelKind::Single);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = sample(&mut rng);
        let (_, grad) = net.loss_and_grad(&p, &x, &LossWeights::default()).unwrap();
        let all: Vec<usize> = (0..p.num_scalars()).collect();
        let numeric = finite_diff_grad_at(|q| net.loss(q, &x, &LossWeights::default()), &p, DEFAULT_EPS_F64, all.clone()).unwrap();
        assert!(compare(&grad, &all, &numeric).passes(1e-3));
    }

    #[test]
    fn zero_lambdas_leave_only_the_fused_loss() {
        let (net, p, _) = small(ModelKind::Full);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = sample(&mut rng);
        let fwd = net.forward(&p, &x).unwrap();
        let y = onehot(x.label, 4);
        let alone = cross_entropy_with_grad(&fwd.logits, &y).unwrap().0;
        assert_eq!(net.loss(&p, &x, &LossWeights::ZERO).unwrap(), alone);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.validate().unwrap();
        cfg.kind = ModelKind::Single;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().single(StreamKind::Bone).validate().is_ok());
        assert!(FusionConfig { tau: 0.0, video_dim: 3 }.validate().is_err());
    }
}
