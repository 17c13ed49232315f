//! AdamW training with seeded shuffling and a fixed gradient reduction order.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_json};
use crate::fusion::LossWeights;
use crate::model::{FusionConfig, HpNetParams, ModelConfig, Network, Sample};
use crate::numerics::hpt::{read_hpt, write_hpt};
use crate::numerics::params::ParamTree;
use crate::numerics::tensor::{Scalar, Tensor};
use crate::seed::rng_for;
use crate::smclm::ChannelNorm;
use crate::topology::SkeletonGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        for (name, v) in [("lr", self.lr), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("train.{name}"), "must be a finite non-negative number"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("train.{name}"), "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<P: ParamTree> {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: i32,
    m: P,
    v: P,
}

impl<P: ParamTree> AdamW<P> {
    pub fn new(params: &P, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            betas: (cfg.beta1, cfg.beta2),
            eps: cfg.adam_eps,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// `p ← p − lr·wd·p − lr·m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut P, grad: &P) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let grads = grad.tensors();
        let tensors = params.tensors_mut().into_iter();
        let moments = self.m.tensors_mut().into_iter().zip(self.v.tensors_mut());
        for ((p, (m, v)), (_, g)) in tensors.zip(moments).zip(grads) {
            for i in 0..p.len() {
                let gi = g.data()[i].to_f64();
                let mi = b1 * m.data()[i].to_f64() + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i].to_f64() + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = P::Elem::from_f64(mi);
                v.data_mut()[i] = P::Elem::from_f64(vi);
                let pi = p.data()[i].to_f64();
                let update = self.lr * self.weight_decay * pi + self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p.data_mut()[i] = P::Elem::from_f64(pi - update);
            }
        }
    }
}

/// Sums per-sample gradients (computed in parallel) in sample order and
/// divides by the batch size. Returns the mean loss too.
pub fn batch_gradient<S: Scalar>(
    net: &Network<S>,
    params: &HpNetParams<S>,
    batch: &[&Sample<S>],
    w: &LossWeights,
) -> Result<(f64, HpNetParams<S>)> {
    let per_sample: Vec<(S, HpNetParams<S>)> = batch
        .par_iter()
        .map(|x| net.loss_and_grad(params, x, w))
        .collect::<Result<_>>()?;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (sample, (l, g)) in batch.iter().zip(&per_sample) {
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("training loss on sample {}", sample.id)));
        }
        loss += Scalar::to_f64(*l);
        total.accumulate(g);
    }
    let k = batch.len() as f64;
    total.scale_all(S::from_f64(1.0 / k));
    Ok((loss / k, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

/// Sample order for one epoch, a function of `(seed, epoch)` only.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &["shuffle", &epoch.to_string()]));
    order
}

/// Trains `params` in place and returns one log line per epoch.
pub fn train(
    net: &Network,
    params: &mut HpNetParams,
    data: &[Sample],
    cfg: &TrainConfig,
    w: &LossWeights,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    w.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let mut opt = AdamW::new(params, cfg);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grad) = batch_gradient(net, params, &batch, w)?;
            loss_sum += loss * batch.len() as f64;
            opt.step(params, &grad);
        }
        if params.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let train_accuracy = accuracy(net, params, data)?;
        log.push(EpochLog {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_accuracy,
        });
    }
    Ok(log)
}

/// Logits for every sample, in input order.
pub fn predict_all(net: &Network, params: &HpNetParams, data: &[Sample]) -> Result<Vec<Vec<f32>>> {
    data.par_iter().map(|x| Ok(net.forward(params, x)?.logits)).collect()
}

fn accuracy(net: &Network, params: &HpNetParams, data: &[Sample]) -> Result<f64> {
    let logits = predict_all(net, params, data)?;
    let hits = logits
        .iter()
        .zip(data)
        .filter(|(l, x)| crate::eval::argmax(l) == x.label)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Everything needed to rebuild a trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub pool: crate::fpm::PoolConfig,
    pub labels: Vec<String>,
    pub input_width: usize,
    pub skeleton_edges: Vec<(usize, usize)>,
    pub joints: usize,
}

pub const META_FILE: &str = "model.json";
pub const PARAMS_FILE: &str = "params.hpt";
pub const TEXT_FILE: &str = "text.hpt";
pub const LOG_FILE: &str = "train_log.json";
pub const NORMS_FILE: &str = "norms.hpt";

/// A trained network and its parameters.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub meta: ModelMeta,
    pub net: Network,
    pub params: HpNetParams,
}

impl TrainedModel {
    /// Writes the model files into an existing directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(META_FILE), &self.meta)?;
        let flat = self.params.flatten();
        write_hpt(dir.join(PARAMS_FILE), &Tensor::new([flat.len()], flat)?)?;
        write_hpt(dir.join(TEXT_FILE), &self.net.text)?;
        if let Some(norms) = &self.net.norms {
            let (n, c) = norms[0].mean.dims2("save_norms")?;
            let mut data = Vec::with_capacity(norms.len() * 2 * n * c);
            for norm in norms {
                data.extend_from_slice(norm.mean.data());
                data.extend_from_slice(norm.scale.data());
            }
            write_hpt(dir.join(NORMS_FILE), &Tensor::new([norms.len(), 2, n, c], data)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ModelMeta = read_json(&dir.join(META_FILE))?;
        let graph = SkeletonGraph::new(meta.joints, meta.skeleton_edges.clone())?;
        let text = read_hpt(dir.join(TEXT_FILE))?;
        if text.shape()[0] != meta.labels.len() {
            return Err(Error::invalid("text embeddings do not match the label list"));
        }
        let mut net = Network::new(meta.model.clone(), &meta.fusion, graph, text)?;
        let norms_path = dir.join(NORMS_FILE);
        if norms_path.exists() {
            let t = read_hpt(&norms_path)?;
            let shape = t.shape().to_vec();
            if shape.len() != 4 || shape[0] != meta.model.streams.len() || shape[1] != 2 {
                return Err(Error::shape("load_norms", format!("{shape:?} for {} streams", meta.model.streams.len())));
            }
            let (n, c) = (shape[2], shape[3]);
            let norms = t
                .data()
                .chunks(2 * n * c)
                .map(|chunk| {
                    Ok(ChannelNorm {
                        mean: Tensor::new([n, c], chunk[..n * c].to_vec())?,
                        scale: Tensor::new([n, c], chunk[n * c..].to_vec())?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            net.norms = Some(norms);
        }
        let skeleton = HpNetParams::init(&meta.model, &meta.fusion, meta.input_width, meta.labels.len(), 0);
        let flat = read_hpt(dir.join(PARAMS_FILE))?;
        let params = skeleton.with_flat(flat.data())?;
        Ok(Self { meta, net, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;
    use crate::smclm::StreamKind;
    use crate::trmm::encode_labels;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(kind: ModelKind) -> (Network, HpNetParams, Vec<Sample>) {
        let cfg = ModelConfig {
            kind,
            streams: if kind == ModelKind::Single { vec![StreamKind::Joint] } else { ModelConfig::default().streams },
            gcn_widths: vec![6],
            text_dim: 8,
            trmm_hidden: 8,
            ..ModelConfig::default()
        };
        let fusion = FusionConfig { tau: 0.1, video_dim: 5 };
        let labels: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        let graph = SkeletonGraph::new(4, vec![(0, 1), (1, 2), (1, 3)]).unwrap();
        let net = Network::new(cfg.clone(), &fusion, graph, encode_labels(&labels, 8, 0).unwrap().matrix).unwrap();
        let params = HpNetParams::init(&cfg, &fusion, 3, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = (0..8)
            .map(|i| Sample {
                id: format!("s{i}"),
                label: i % 3,
                input: Tensor::from_fn([3, 4, 3], |_| rng.random_range(-1.0..1.0)),
                video: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        (net, params, data)
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let (net, mut p, data) = setup(ModelKind::Full);
        let before = p.clone();
        let cfg = TrainConfig { lr: 0.0, weight_decay: 0.0, epochs: 3, ..TrainConfig::default() };
        train(&net, &mut p, &data, &cfg, &LossWeights::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_gradient_and_decay_is_a_fixed_point() {
        let (_, p, _) = setup(ModelKind::Full);
        let mut q = p.clone();
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut opt = AdamW::new(&q, &cfg);
        for _ in 0..5 {
            opt.step(&mut q, &p.zeros_like());
        }
        assert_eq!(q, p);
    }

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        // With bias correction the first Adam step is lr·sign(g) (up to ε).
        let (_, p, _) = setup(ModelKind::Single);
        let mut q = p.clone();
        let mut g = p.zeros_like();
        g.streams[0].head.bias.data_mut().copy_from_slice(&[2.0, -0.5, 0.0]);
        let cfg = TrainConfig { lr: 0.01, weight_decay: 0.0, ..TrainConfig::default() };
        AdamW::new(&q, &cfg).step(&mut q, &g);
        let b = q.streams[0].head.bias.data();
        assert!((b[0] + 0.01).abs() < 1e-6 && (b[1] - 0.01).abs() < 1e-6 && b[2] == 0.0);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let (_, p, _) = setup(ModelKind::Single);
        let mut q = p.clone();
        let cfg = TrainConfig { lr: 0.1, weight_decay: 0.5, ..TrainConfig::default() };
        AdamW::new(&q, &cfg).step(&mut q, &p.zeros_like());
        for (a, b) in q.flatten().iter().zip(p.flatten()) {
            assert!((a - b * 0.95).abs() <= 1e-6 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (net, p0, data) = setup(ModelKind::Full);
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let (mut a, mut b) = (p0.clone(), p0.clone());
        let la = train(&net, &mut a, &data, &cfg, &LossWeights::default()).unwrap();
        let lb = train(&net, &mut b, &data, &cfg, &LossWeights::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_ne!(a, p0);
    }

    #[test]
    fn training_reduces_the_loss() {
        let (net, mut p, data) = setup(ModelKind::Full);
        let cfg = TrainConfig { epochs: 40, lr: 5e-3, ..TrainConfig::default() };
        let log = train(&net, &mut p, &data, &cfg, &LossWeights::default()).unwrap();
        assert!(log.last().unwrap().loss < 0.6 * log[0].loss, "{log:?}");
    }

    #[test]
    fn shuffles_depend_on_seed_and_epoch_only() {
        assert_eq!(epoch_order(20, 3, 1), epoch_order(20, 3, 1));
        assert_ne!(epoch_order(20, 3, 1), epoch_order(20, 3, 2));
        let mut sorted = epoch_order(20, 3, 1);
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn save_and_load_round_trip() {
        let (mut net, params, data) = setup(ModelKind::Full);
        net.fit_norms(&data).unwrap();
        let meta = ModelMeta {
            model: net.config.clone(),
            fusion: FusionConfig { tau: 0.1, video_dim: 5 },
            pool: Default::default(),
            labels: (0..3).map(|i| format!("c{i}")).collect(),
            input_width: 3,
            skeleton_edges: net.graph.edges().to_vec(),
            joints: 4,
        };
        let dir = tempfile::tempdir().unwrap();
        TrainedModel { meta: meta.clone(), net: net.clone(), params: params.clone() }.save(dir.path()).unwrap();
        let back = TrainedModel::load(dir.path()).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.meta, meta);
        assert_eq!(back.net.text, net.text);
        assert_eq!(back.net.norms, net.norms);
    }
}
