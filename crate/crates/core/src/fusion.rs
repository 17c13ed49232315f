//! Text–video score fusion and the composite training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{add_outer, cross_entropy_with_grad, l2_normalize, l2_normalize_backward, matvec};
use crate::numerics::tensor::{dot, Scalar, Tensor};

/// Per-class logits of the fused model.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores<S = f32> {
    pub logits: Vec<S>,
    pub tau: S,
}

/// Intermediate values of [`fuse_scores`].
#[derive(Debug, Clone)]
pub struct FusionCache<S> {
    video: Vec<S>,
    v: Vec<S>,
    v_norm: S,
    t: Vec<Vec<S>>,
    t_norms: Vec<S>,
}

/// `S_i = ⟨normalize(A·F_u), normalize(F'_text[i])⟩ / τ`.
///
/// `align` is `[C, C_u]` and has no bias, so scaling `F_u` by a positive
/// factor leaves the scores unchanged.
pub fn fuse_scores<S: Scalar>(
    text: &Tensor<S>,
    video: &[S],
    align: &Tensor<S>,
    tau: S,
) -> Result<(Scores<S>, FusionCache<S>)> {
    if !(tau > S::zero()) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let (n, c) = text.dims2("fuse_scores")?;
    let (ac, _) = align.dims2("fuse_scores")?;
    if ac != c {
        return Err(Error::shape("fuse_scores", format!("alignment maps to {ac}, text width {c}")));
    }
    let (v, v_norm) = l2_normalize(&matvec(align, video)?, "aligned video feature")?;
    let mut t = Vec::with_capacity(n);
    let mut t_norms = Vec::with_capacity(n);
    for i in 0..n {
        let (row, norm) = l2_normalize(text.row(i), "text feature")?;
        t.push(row);
        t_norms.push(norm);
    }
    let logits: Vec<S> = t.iter().map(|row| dot(&v, row) / tau).collect();
    if logits.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("fuse_scores".into()));
    }
    let cache = FusionCache {
        video: video.to_vec(),
        v,
        v_norm,
        t,
        t_norms,
    };
    Ok((Scores { logits, tau }, cache))
}

/// Accumulates `dL/dA` into `d_align` and returns `dL/dF'_text`.
pub fn fuse_backward<S: Scalar>(
    cache: &FusionCache<S>,
    tau: S,
    d_logits: &[S],
    d_align: &mut Tensor<S>,
) -> Result<Tensor<S>> {
    let n = cache.t.len();
    if d_logits.len() != n {
        return Err(Error::shape("fuse_backward", format!("{} gradients for {n} classes", d_logits.len())));
    }
    let c = cache.v.len();
    let mut dv = vec![S::zero(); c];
    let mut d_text = Vec::with_capacity(n * c);
    for i in 0..n {
        let g = d_logits[i] / tau;
        let dt: Vec<S> = cache.v.iter().map(|&v| v * g).collect();
        dv.iter_mut().zip(&cache.t[i]).for_each(|(a, &t)| *a = *a + t * g);
        d_text.extend(l2_normalize_backward(&cache.t[i], cache.t_norms[i], &dt));
    }
    let d_raw = l2_normalize_backward(&cache.v, cache.v_norm, &dv);
    add_outer(d_align, &d_raw, &cache.video);
    Tensor::new([n, c], d_text)
}

/// Weights of the auxiliary per-stream losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
    };

    pub fn as_array(&self) -> [f64; 3] {
        [self.lambda1, self.lambda2, self.lambda3]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("loss.{name}"), "must be a finite non-negative number"));
            }
        }
        Ok(())
    }
}

/// Loss value and the gradient at each of its inputs.
#[derive(Debug, Clone)]
pub struct LossGrads<S> {
    pub loss: S,
    pub d_scores: Vec<S>,
    pub d_streams: Vec<Vec<S>>,
}

/// `L = CE(S) + Σ_k λ_k · CE(stream_k)`; stream `k` uses `λ_{k+1}`.
pub fn total_loss<S: Scalar>(
    scores: &[S],
    stream_logits: &[Vec<S>],
    onehot: &[S],
    w: &LossWeights,
) -> Result<LossGrads<S>> {
    if stream_logits.len() > 3 {
        return Err(Error::invalid(format!("{} auxiliary streams, at most 3 are weighted", stream_logits.len())));
    }
    let (mut loss, d_scores) = cross_entropy_with_grad(scores, onehot)?;
    let mut d_streams = Vec::with_capacity(stream_logits.len());
    for (logits, lambda) in stream_logits.iter().zip(w.as_array()) {
        let lambda = S::from_f64(lambda);
        let (l, g) = cross_entropy_with_grad(logits, onehot)?;
        loss = loss + lambda * l;
        d_streams.push(g.into_iter().map(|v| v * lambda).collect());
    }
    Ok(LossGrads {
        loss,
        d_scores,
        d_streams,
    })
}
