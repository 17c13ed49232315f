//! Finite-difference verification of the full training loss.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::fusion::LossWeights;
use crate::model::{FusionConfig, HpNetParams, ModelConfig, ModelKind, Network, Sample};
use crate::numerics::gradcheck::{compare, finite_diff_grad_at, GradCheckReport, DEFAULT_EPS_F64};
use crate::numerics::params::ParamTree;
use crate::numerics::tensor::Tensor;
use crate::seed::rng_for;
use crate::smclm::StreamKind;
use crate::topology::SkeletonGraph;
use crate::trmm::encode_labels;

/// Worst relative error per component over all instances.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub instances: usize,
    pub tolerance: f64,
    pub components: BTreeMap<String, ComponentReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentReport {
    pub max_rel_error: f64,
    pub worst_path: String,
    pub checked: usize,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.components.values().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        !self.components.is_empty() && self.components.values().all(|c| c.max_rel_error <= self.tolerance)
    }
}

/// Component a parameter path belongs to.
pub fn component_of(path: &str) -> String {
    let parts: Vec<&str> = path.split('.').collect();
    match parts.as_slice() {
        ["streams", _, "layers", ..] => "graph_conv".into(),
        ["streams", _, "head", ..] => "stream_heads".into(),
        ["trmm", "bridge", ..] => "trmm.bridge".into(),
        ["trmm", p, ..] => format!("trmm.{p}"),
        ["align"] => "fusion_align".into(),
        _ => path.into(),
    }
}

/// One random small full model and sample, all in `f64`.
struct Instance {
    net: Network<f64>,
    params: HpNetParams<f64>,
    sample: Sample<f64>,
    weights: LossWeights,
}

fn instance(seed: u64, index: usize) -> Result<Instance> {
    let mut rng = rng_for(seed, &["gradcheck", &index.to_string()]);
    let joints = rng.random_range(3..7);
    let edges = (1..joints).map(|j| (rng.random_range(0..j), j)).collect();
    let graph = SkeletonGraph::new(joints, edges)?;
    let classes = rng.random_range(2..6);
    let text_dim = rng.random_range(3..8);
    let c_in = rng.random_range(1..5);
    let video_dim = rng.random_range(2..7);
    let depth = rng.random_range(1..3);
    let streams = [StreamKind::Joint, StreamKind::Bone, StreamKind::JointMotion];
    let cfg = ModelConfig {
        kind: ModelKind::Full,
        streams: streams.to_vec(),
        gcn_widths: (0..depth).map(|_| rng.random_range(2..6)).collect(),
        text_dim,
        trmm_hidden: rng.random_range(2..7),
        ..ModelConfig::default()
    };
    let fusion = FusionConfig {
        tau: rng.random_range(0.1..1.0),
        video_dim,
    };
    let labels: Vec<String> = (0..classes).map(|i| format!("class {i}")).collect();
    let text = encode_labels(&labels, text_dim, seed)?.matrix.cast();
    let mut net = Network::new(cfg.clone(), &fusion, graph, text)?;
    let frames = rng.random_range(2..5);
    let make_sample = |rng: &mut rand_chacha::ChaCha8Rng| Sample {
        id: format!("g{index}"),
        label: rng.random_range(0..classes),
        input: Tensor::from_fn([frames, joints, c_in], |_| rng.random_range(-1.0..1.0)),
        video: (0..video_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let fit: Vec<Sample<f64>> = (0..3).map(|_| make_sample(&mut rng)).collect();
    net.fit_norms(&fit)?;
    let x = make_sample(&mut rng);
    let mut p = HpNetParams::<f64>::init(&cfg, &fusion, c_in, classes, seed ^ index as u64);
    // Widen the projections beyond their near-identity initial scale so every
    // branch of the module carries gradient.
    if let Some(t) = p.trmm.as_mut() {
        for w in t.tensors_mut().into_iter().skip(2) {
            w.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.6..0.6));
        }
    }
    let w = LossWeights {
        lambda1: rng.random_range(0.1..2.0),
        lambda2: rng.random_range(0.1..2.0),
        lambda3: rng.random_range(0.1..2.0),
    };
    Ok(Instance {
        net,
        params: p,
        sample: x,
        weights: w,
    })
}

/// Checks the analytic gradient of the full loss against central
/// differences on `instances` random models.
pub fn gradcheck_suite(instances: usize, seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let mut components: BTreeMap<String, GradCheckReport> = BTreeMap::new();
    for i in 0..instances {
        let Instance {
            net,
            params: p,
            sample: x,
            weights: w,
        } = instance(seed, i)?;
        let (_, grad) = net.loss_and_grad(&p, &x, &w)?;
        let all: Vec<usize> = (0..p.num_scalars()).collect();
        let numeric = finite_diff_grad_at(|q| net.loss(q, &x, &w), &p, DEFAULT_EPS_F64, all.iter().copied())?;
        let paths = p.paths();
        let sizes: Vec<usize> = p.tensors().iter().map(|(_, t)| t.len()).collect();
        let mut start = 0;
        for (path, size) in paths.iter().zip(sizes) {
            let idx: Vec<usize> = (start..start + size).collect();
            let mut r = compare(&grad, &idx, &numeric[start..start + size]);
            if r.checked > 0 && r.worst_path.is_empty() {
                r.worst_path = path.clone();
            }
            components.entry(component_of(path)).or_insert_with(GradCheckReport::empty).merge(r);
            start += size;
        }
    }
    Ok(SuiteReport {
        instances,
        tolerance,
        components: components
            .into_iter()
            .map(|(k, r)| {
                (
                    k,
                    ComponentReport {
                        max_rel_error: r.max_rel_error,
                        worst_path: r.worst_path,
                        checked: r.checked,
                    },
                )
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_are_grouped() {
        assert_eq!(component_of("streams.1.layers.0"), "graph_conv");
        assert_eq!(component_of("streams.0.head.bias"), "stream_heads");
        assert_eq!(component_of("trmm.p3.layers.1.weight"), "trmm.p3");
        assert_eq!(component_of("align"), "fusion_align");
    }

    #[test]
    fn small_suite_passes() {
        let r = gradcheck_suite(4, 1, 1e-3).unwrap();
        assert!(r.passes(), "{r:?}");
        for c in ["graph_conv", "stream_heads", "trmm.bridge", "trmm.p1", "trmm.p2", "trmm.p3", "trmm.p4", "fusion_align"] {
            assert!(r.components[c].checked > 0, "{c}");
        }
    }
}
