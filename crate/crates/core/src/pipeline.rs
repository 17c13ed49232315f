//! End-to-end steps shared by the command line and the test suites.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{metrics_of, Metrics, ScoreRecord};
use crate::model::{HpNetParams, ModelKind, Network, Sample};
use crate::numerics::tensor::Tensor;
use crate::synthgen::synth_skeleton;
use crate::train::{train, EpochLog, ModelMeta, TrainedModel};
use crate::trmm::{encode_labels, LabelEmbeddings};

/// Label embeddings from `paths` when configured, the stand-in encoder otherwise.
pub fn label_embeddings(run: &RunConfig, class_names: &[String]) -> Result<LabelEmbeddings> {
    match (&run.paths.label_embeddings, &run.paths.label_list) {
        (Some(t), Some(l)) => {
            let e = LabelEmbeddings::load(t, l)?;
            e.check_order(class_names)?;
            if e.dim() != run.model.text_dim {
                return Err(Error::config(
                    "model.text_dim",
                    format!("{} but the embedding file has width {}", run.model.text_dim, e.dim()),
                ));
            }
            Ok(e)
        }
        _ => encode_labels(class_names, run.model.text_dim, run.model.label_seed),
    }
}

/// An untrained network for `train_set` with its input normalisation fitted.
pub fn build_model(
    run: &RunConfig,
    class_names: &[String],
    joints: usize,
    train_set: &[Sample],
) -> Result<TrainedModel> {
    run.validate()?;
    let first = train_set.first().ok_or_else(|| Error::invalid("empty training split"))?;
    let (_, n, width) = first.input.dims3("build_model")?;
    if n != joints {
        return Err(Error::shape("build_model", format!("{n} joints in data, {joints} expected")));
    }
    if run.model.kind == ModelKind::Full && first.video.len() != run.fusion.video_dim {
        return Err(Error::config(
            "fusion.video_dim",
            format!("{} but the data has video features of width {}", run.fusion.video_dim, first.video.len()),
        ));
    }
    let text = label_embeddings(run, class_names)?;
    let graph = synth_skeleton(joints);
    let mut net = Network::new(run.model.clone(), &run.fusion, graph.clone(), text.matrix)?;
    net.fit_norms(train_set)?;
    let params = HpNetParams::init(&run.model, &run.fusion, width, class_names.len(), run.train.seed);
    let meta = ModelMeta {
        model: run.model.clone(),
        fusion: run.fusion,
        pool: run.pool.clone(),
        labels: class_names.to_vec(),
        input_width: width,
        skeleton_edges: graph.edges().to_vec(),
        joints,
    };
    Ok(TrainedModel { meta, net, params })
}

/// [`build_model`] followed by training on `train_set`.
pub fn train_model(
    run: &RunConfig,
    class_names: &[String],
    joints: usize,
    train_set: &[Sample],
) -> Result<(TrainedModel, Vec<EpochLog>)> {
    let mut model = build_model(run, class_names, joints, train_set)?;
    let log = train(&model.net, &mut model.params, train_set, &run.train, &run.loss)?;
    Ok((model, log))
}

/// Score records (logits) for `samples`, in order.
pub fn score(model: &TrainedModel, samples: &[Sample]) -> Result<Vec<ScoreRecord>> {
    samples
        .par_iter()
        .map(|x| {
            Ok(ScoreRecord {
                id: x.id.clone(),
                label: x.label,
                scores: model.net.forward(&model.params, x)?.logits,
            })
        })
        .collect()
}

pub fn evaluate(model: &TrainedModel, samples: &[Sample]) -> Result<(Vec<ScoreRecord>, Metrics)> {
    let records = score(model, samples)?;
    let metrics = metrics_of(&records)?;
    Ok((records, metrics))
}

/// Concatenated stream features `F_c`, one row per sample.
pub fn export_features(model: &TrainedModel, samples: &[Sample]) -> Result<Tensor<f32>> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to export"));
    }
    let rows: Vec<Vec<f32>> = samples
        .par_iter()
        .map(|x| Ok(model.net.forward(&model.params, x)?.features))
        .collect::<Result<_>>()?;
    let d = rows[0].len();
    Tensor::new([rows.len(), d], rows.concat())
}
