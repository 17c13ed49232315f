//! Accuracy metrics, per-sample score dumps and late-fusion ensembles.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_file_atomically;
use crate::numerics::ops::softmax;

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    /// Unweighted mean of `per_class` over classes present in the split.
    pub mean_per_class: f64,
    pub per_class: BTreeMap<usize, f64>,
}

pub fn compute_metrics(labels: &[usize], predictions: &[usize]) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot score an empty split"));
    }
    if labels.len() != predictions.len() {
        return Err(Error::shape(
            "metrics",
            format!("{} labels, {} predictions", labels.len(), predictions.len()),
        ));
    }
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut hits = 0;
    for (&y, &p) in labels.iter().zip(predictions) {
        let e = counts.entry(y).or_default();
        e.1 += 1;
        if y == p {
            e.0 += 1;
            hits += 1;
        }
    }
    let per_class: BTreeMap<usize, f64> = counts
        .into_iter()
        .map(|(c, (h, n))| (c, h as f64 / n as f64))
        .collect();
    let mean_per_class = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(Metrics {
        top1: hits as f64 / labels.len() as f64,
        mean_per_class,
        per_class,
    })
}

/// One line of a score dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub id: String,
    pub label: usize,
    pub scores: Vec<f32>,
}

pub fn metrics_of(records: &[ScoreRecord]) -> Result<Metrics> {
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let preds: Vec<usize> = records.iter().map(|r| argmax(&r.scores)).collect();
    compute_metrics(&labels, &preds)
}

/// Writes records as JSON lines.
pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::json(path, e))?);
        out.push('\n');
    }
    write_file_atomically(path, out.as_bytes())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

/// Per sample, `Σ_k w_k · softmax(scores_k)`. Dumps are matched by id; the
/// first dump fixes the order.
pub fn ensemble(dumps: &[Vec<ScoreRecord>], weights: &[f64]) -> Result<Vec<ScoreRecord>> {
    let first = dumps.first().ok_or_else(|| Error::invalid("no score dumps to ensemble"))?;
    if weights.len() != dumps.len() {
        return Err(Error::invalid(format!("{} weights for {} dumps", weights.len(), dumps.len())));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::invalid(format!("ensemble weight {w} is not finite")));
    }
    let mut indexed = Vec::with_capacity(dumps.len());
    for (k, d) in dumps.iter().enumerate() {
        let map: BTreeMap<&str, &ScoreRecord> = d.iter().map(|r| (r.id.as_str(), r)).collect();
        if map.len() != d.len() || d.len() != first.len() || first.iter().any(|r| !map.contains_key(r.id.as_str())) {
            return Err(Error::invalid(format!("dump {k} does not cover the same sample ids as dump 0")));
        }
        indexed.push(map);
    }
    first
        .iter()
        .map(|r| {
            let mut fused = vec![0.0f64; r.scores.len()];
            for (map, &w) in indexed.iter().zip(weights) {
                let other = map[r.id.as_str()];
                if other.label != r.label || other.scores.len() != fused.len() {
                    return Err(Error::invalid(format!("dumps disagree on sample {}", r.id)));
                }
                for (f, p) in fused.iter_mut().zip(softmax(&other.scores)?) {
                    *f += w * p as f64;
                }
            }
            Ok(ScoreRecord {
                id: r.id.clone(),
                label: r.label,
                scores: fused.into_iter().map(|v| v as f32).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, label: usize, scores: &[f32]) -> ScoreRecord {
        ScoreRecord {
            id: id.into(),
            label,
            scores: scores.to_vec(),
        }
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let labels: Vec<usize> = (0..25).map(|i| i % 5).collect();
        let m = compute_metrics(&labels, &labels).unwrap();
        assert_eq!(m.top1, 1.0);
        assert!(m.per_class.values().all(|&v| v == 1.0));
        let m = compute_metrics(&labels, &[3; 25]).unwrap();
        assert_eq!(m.top1, 0.2);
        assert_eq!(m.mean_per_class, 0.2);
        assert!(compute_metrics(&[], &[]).is_err());
    }

    #[test]
    fn mean_per_class_recount() {
        let labels = [0, 0, 0, 1, 2, 2];
        let preds = [0, 1, 0, 1, 0, 2];
        let m = compute_metrics(&labels, &preds).unwrap();
        assert_eq!(m.top1, 4.0 / 6.0);
        let recount = (2.0 / 3.0 + 1.0 + 0.5) / 3.0;
        assert!((m.mean_per_class - recount).abs() < 1e-15);
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let recs = vec![rec("a", 0, &[0.5, -1.25]), rec("b", 1, &[1e-7, 3.0])];
        write_scores(&path, &recs).unwrap();
        assert_eq!(read_scores(&path).unwrap(), recs);
    }

    #[test]
    fn single_dump_ensemble_keeps_metrics() {
        let recs = vec![rec("a", 0, &[2.0, 1.0, 0.0]), rec("b", 2, &[0.0, 3.0, 1.0]), rec("c", 1, &[0.1, 0.2, 0.0])];
        let fused = ensemble(std::slice::from_ref(&recs), &[1.0]).unwrap();
        assert_eq!(metrics_of(&fused).unwrap(), metrics_of(&recs).unwrap());
    }

    #[test]
    fn ids_are_matched_not_positions() {
        let a = vec![rec("x", 0, &[1.0, 0.0]), rec("y", 1, &[0.0, 1.0])];
        let b = vec![rec("y", 1, &[0.0, 5.0]), rec("x", 0, &[5.0, 0.0])];
        let fused = ensemble(&[a.clone(), b], &[1.0, 1.0]).unwrap();
        assert_eq!(fused.iter().map(|r| argmax(&r.scores)).collect::<Vec<_>>(), vec![0, 1]);
        let c = vec![rec("x", 0, &[1.0, 0.0]), rec("z", 1, &[0.0, 1.0])];
        assert!(ensemble(&[a.clone(), c], &[1.0, 1.0]).is_err());
        assert!(ensemble(&[], &[]).is_err());
        assert!(ensemble(&[a], &[f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn identical_dumps_keep_predictions(
            scores in proptest::collection::vec(proptest::collection::vec(-5.0f32..5.0, 4), 1..10),
            w1 in 0.01f64..10.0, w2 in 0.01f64..10.0,
        ) {
            let recs: Vec<_> = scores.iter().enumerate().map(|(i, s)| rec(&i.to_string(), 0, s)).collect();
            let fused = ensemble(&[recs.clone(), recs.clone()], &[w1, w2]).unwrap();
            let single = ensemble(std::slice::from_ref(&recs), &[1.0]).unwrap();
            for (f, s) in fused.iter().zip(&single) {
                prop_assert_eq!(argmax(&f.scores), argmax(&s.scores));
            }
        }

        #[test]
        fn one_hot_weights_select_a_stream(
            a in proptest::collection::vec(proptest::collection::vec(-5.0f32..5.0, 3), 1..8),
            seed in 0u64..1000,
        ) {
            let ra: Vec<_> = a.iter().enumerate().map(|(i, s)| rec(&i.to_string(), 0, s)).collect();
            let rb: Vec<_> = a.iter().enumerate()
                .map(|(i, s)| rec(&i.to_string(), 0, &s.iter().rev().map(|v| v + seed as f32 * 1e-3).collect::<Vec<_>>()))
                .collect();
            let fused = ensemble(&[ra.clone(), rb], &[1.0, 0.0]).unwrap();
            for (f, r) in fused.iter().zip(&ra) {
                prop_assert_eq!(argmax(&f.scores), argmax(&r.scores));
            }
        }
    }
}
