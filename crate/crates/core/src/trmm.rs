//! Text refinement modulation: class-label embeddings conditioned on the
//! skeleton feature by a learned scale/shift and a pairwise-difference gate.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fsutil::read_json;
use crate::numerics::hpt::read_hpt;
use crate::numerics::mlp::{Linear, MlpCache, MlpParams};
use crate::numerics::ops::l2_normalize;
use crate::numerics::params::{nested, ParamTree};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::seed::rng_for;

/// One unit-norm text feature per class, frozen during training.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddings {
    pub labels: Vec<String>,
    /// `[N, C]`.
    pub matrix: Tensor<f32>,
}

impl LabelEmbeddings {
    /// Checks one finite, non-zero row per label.
    pub fn new(labels: Vec<String>, matrix: Tensor<f32>) -> Result<Self> {
        let (n, _) = matrix.dims2("label_embeddings")?;
        if n != labels.len() {
            return Err(Error::shape(
                "label_embeddings",
                format!("{n} rows for {} labels", labels.len()),
            ));
        }
        check_labels(&labels)?;
        let matrix = matrix.ensure_finite("label_embeddings")?;
        for i in 0..n {
            if matrix.row(i).iter().all(|&v| v == 0.0) {
                return Err(Error::invalid(format!("embedding of `{}` is zero", labels[i])));
            }
        }
        Ok(Self { labels, matrix })
    }

    /// Loads an `[N, C]` `.hpt` tensor and the JSON list giving its row order.
    pub fn load(tensor: &Path, labels: &Path) -> Result<Self> {
        let labels: Vec<String> = read_json(labels)?;
        Self::new(labels, read_hpt(tensor)?)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Fails unless the rows follow exactly `expected`, the dataset's class order.
    pub fn check_order(&self, expected: &[String]) -> Result<()> {
        if self.labels != expected {
            return Err(Error::invalid(format!(
                "label embeddings cover {:?}, dataset has {:?}",
                self.labels, expected
            )));
        }
        Ok(())
    }
}

fn check_labels(labels: &[String]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::invalid("no labels to encode"));
    }
    let mut seen = HashSet::new();
    for l in labels {
        if l.trim().is_empty() {
            return Err(Error::invalid("empty label"));
        }
        if !seen.insert(l.as_str()) {
            return Err(Error::invalid(format!("duplicate label `{l}`")));
        }
    }
    Ok(())
}

/// Deterministic stand-in text encoder: each row is a unit Gaussian direction
/// seeded by the label string.
pub fn encode_labels(labels: &[String], c: usize, seed: u64) -> Result<LabelEmbeddings> {
    check_labels(labels)?;
    if c == 0 {
        return Err(Error::invalid("embedding width must be positive"));
    }
    let mut data = Vec::with_capacity(labels.len() * c);
    for l in labels {
        let mut rng = rng_for(seed, &["label", l]);
        let raw: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (unit, _) = l2_normalize(&raw, "label embedding")?;
        data.extend(unit.into_iter().map(|v| v as f32));
    }
    let matrix = Tensor::new([labels.len(), c], data)?;
    for i in 0..labels.len() {
        for j in 0..i {
            if matrix.row(i) == matrix.row(j) {
                return Err(Error::invalid(format!(
                    "labels `{}` and `{}` collide",
                    labels[j], labels[i]
                )));
            }
        }
    }
    LabelEmbeddings::new(labels.to_vec(), matrix)
}

/// Bridge from the co-learned feature to the text width plus the four
/// independent projections (scale, shift, and the two gate branches).
#[derive(Debug, Clone, PartialEq)]
pub struct TrmmParams<S = f32> {
    pub bridge: Linear<S>,
    pub p1: MlpParams<S>,
    pub p2: MlpParams<S>,
    pub p3: MlpParams<S>,
    pub p4: MlpParams<S>,
}

const PROJ_STD: f64 = 0.02;

impl<S: Scalar> TrmmParams<S> {
    /// Small random weights and zero biases, so the module starts close to
    /// the residual identity.
    pub fn init(feature: usize, c: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            bridge: Linear::random(feature, c, (1.0 / feature as f64).sqrt(), rng),
            p1: MlpParams::two_layer(c, hidden, c, PROJ_STD, rng),
            p2: MlpParams::two_layer(c, hidden, c, PROJ_STD, rng),
            p3: MlpParams::two_layer(c, hidden, c, PROJ_STD, rng),
            p4: MlpParams::two_layer(c, hidden, c, PROJ_STD, rng),
        }
    }

    pub fn zeros(feature: usize, c: usize, hidden: usize) -> Self {
        let proj = || MlpParams {
            layers: vec![Linear::zeros(c, hidden), Linear::zeros(hidden, c)],
        };
        Self {
            bridge: Linear::zeros(feature, c),
            p1: proj(),
            p2: proj(),
            p3: proj(),
            p4: proj(),
        }
    }

    pub fn text_dim(&self) -> usize {
        self.bridge.out_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.bridge.in_dim()
    }

    fn validate(&self) -> Result<()> {
        let c = self.text_dim();
        for (name, p) in [("p1", &self.p1), ("p2", &self.p2), ("p3", &self.p3), ("p4", &self.p4)] {
            if p.in_dim() != c || p.out_dim() != c {
                return Err(Error::shape(
                    "trmm",
                    format!("{name} maps {}→{}, expected {c}→{c}", p.in_dim(), p.out_dim()),
                ));
            }
        }
        Ok(())
    }
}

impl<S: Scalar> ParamTree for TrmmParams<S> {
    type Elem = S;

    fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = nested("bridge", self.bridge.tensors());
        out.extend(nested("p1", self.p1.tensors()));
        out.extend(nested("p2", self.p2.tensors()));
        out.extend(nested("p3", self.p3.tensors()));
        out.extend(nested("p4", self.p4.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = self.bridge.tensors_mut();
        out.extend(self.p1.tensors_mut());
        out.extend(self.p2.tensors_mut());
        out.extend(self.p3.tensors_mut());
        out.extend(self.p4.tensors_mut());
        out
    }
}

/// `tanh` made exactly odd, so `gate[k][j] == -gate[j][k]` bit for bit.
fn odd_tanh<S: Scalar>(d: S) -> S {
    let t = d.abs().tanh();
    if d < S::zero() {
        -t
    } else {
        t
    }
}

/// Pairwise gate `G[k, j] = tanh(u_k − u_j)` as a `[C, C]` tensor.
pub fn gate<S: Scalar>(u: &[S]) -> Result<Tensor<S>> {
    let c = u.len();
    Tensor::new([c, c], (0..c * c).map(|i| odd_tanh(u[i / c] - u[i % c])).collect())
}

/// `ψ[i, k] = γ_k · text[i, k] + β_k`.
pub fn modulate_with<S: Scalar>(gamma: &[S], beta: &[S], text: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c) = text.dims2("modulate")?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "modulate",
            format!("γ {} and β {} against text width {c}", gamma.len(), beta.len()),
        ));
    }
    Tensor::new(
        [n, c],
        text.data()
            .iter()
            .enumerate()
            .map(|(i, &t)| gamma[i % c] * t + beta[i % c])
            .collect(),
    )
}

/// Scale/shift modulation of the text features by the bridged feature `x`.
pub fn modulate<S: Scalar>(x: &[S], text: &Tensor<S>, p: &TrmmParams<S>) -> Result<Tensor<S>> {
    modulate_with(&p.p1.forward(x)?, &p.p2.forward(x)?, text)
}

/// `η_k = (1/C) Σ_j G[k, j] · x_j`.
pub fn refine_with<S: Scalar>(u: &[S], x: &[S]) -> Result<Vec<S>> {
    let c = x.len();
    if u.len() != c {
        return Err(Error::shape("refine", format!("gate input {} vs feature {c}", u.len())));
    }
    let g = gate(u)?;
    let inv = S::one() / S::from_usize(c);
    Ok((0..c)
        .map(|k| g.row(k).iter().zip(x).fold(S::zero(), |a, (&gv, &xv)| a + gv * xv) * inv)
        .collect())
}

/// Gate branch `u = P₃(x) − P₄(x)` followed by the contracted pairwise gate.
pub fn refine<S: Scalar>(x: &[S], p: &TrmmParams<S>) -> Result<Vec<S>> {
    let u: Vec<S> = p.p3.forward(x)?
        .into_iter()
        .zip(p.p4.forward(x)?)
        .map(|(a, b)| a - b)
        .collect();
    refine_with(&u, x)
}

/// `F'_text = F_text + ψ + η`, `η` broadcast over rows.
pub fn aggregate<S: Scalar>(text: &Tensor<S>, psi: &Tensor<S>, eta: &[S]) -> Result<Tensor<S>> {
    let (_, c) = text.dims2("aggregate")?;
    if eta.len() != c {
        return Err(Error::shape("aggregate", format!("η {} vs width {c}", eta.len())));
    }
    text.zip_map(psi, "aggregate", |t, p| t + p)?
        .map_indexed(|i, v| v + eta[i % c])
        .ensure_finite("aggregate")
}

/// Values retained by [`trmm_forward`].
#[derive(Debug, Clone)]
pub struct TrmmCache<S> {
    fc: Vec<S>,
    x: Vec<S>,
    gate: Tensor<S>,
    c1: MlpCache<S>,
    c2: MlpCache<S>,
    c3: MlpCache<S>,
    c4: MlpCache<S>,
}

/// Full module: bridge, modulate, refine, aggregate.
pub fn trmm_forward<S: Scalar>(
    fc: &[S],
    text: &Tensor<S>,
    p: &TrmmParams<S>,
) -> Result<(Tensor<S>, TrmmCache<S>)> {
    p.validate()?;
    if text.dims2("trmm")?.1 != p.text_dim() {
        return Err(Error::shape(
            "trmm",
            format!("text width {} vs bridge output {}", text.shape()[1], p.text_dim()),
        ));
    }
    let x = p.bridge.forward(fc)?;
    let (gamma, c1) = p.p1.forward_cached(&x)?;
    let (beta, c2) = p.p2.forward_cached(&x)?;
    let (a, c3) = p.p3.forward_cached(&x)?;
    let (b, c4) = p.p4.forward_cached(&x)?;
    let u: Vec<S> = a.iter().zip(&b).map(|(&a, &b)| a - b).collect();
    let psi = modulate_with(&gamma, &beta, text)?;
    let eta = refine_with(&u, &x)?;
    let out = aggregate(text, &psi, &eta)?;
    let cache = TrmmCache {
        fc: fc.to_vec(),
        gate: gate(&u)?,
        x,
        c1,
        c2,
        c3,
        c4,
    };
    Ok((out, cache))
}

/// Accumulates parameter gradients into `grad` and returns `dL/dF_c`.
pub fn trmm_backward<S: Scalar>(
    cache: &TrmmCache<S>,
    text: &Tensor<S>,
    p: &TrmmParams<S>,
    d_out: &Tensor<S>,
    grad: &mut TrmmParams<S>,
) -> Result<Vec<S>> {
    let (n, c) = text.dims2("trmm_backward")?;
    text.expect_same_shape(d_out, "trmm_backward")?;
    let mut d_gamma = vec![S::zero(); c];
    let mut d_shared = vec![S::zero(); c];
    for i in 0..n {
        for k in 0..c {
            let d = d_out.data()[i * c + k];
            d_gamma[k] = d_gamma[k] + d * text.data()[i * c + k];
            d_shared[k] = d_shared[k] + d;
        }
    }
    // β and η both receive the row-summed gradient.
    let d_beta = &d_shared;
    let inv = S::one() / S::from_usize(c);
    let mut dx = vec![S::zero(); c];
    let mut du = vec![S::zero(); c];
    for k in 0..c {
        let de = d_shared[k] * inv;
        for j in 0..c {
            let g = cache.gate.data()[k * c + j];
            dx[j] = dx[j] + de * g;
            let dd = de * cache.x[j] * (S::one() - g * g);
            du[k] = du[k] + dd;
            du[j] = du[j] - dd;
        }
    }
    let neg_du: Vec<S> = du.iter().map(|&v| -v).collect();
    for (mlp, cache, dy, g) in [
        (&p.p1, &cache.c1, d_gamma.as_slice(), &mut grad.p1),
        (&p.p2, &cache.c2, d_beta.as_slice(), &mut grad.p2),
        (&p.p3, &cache.c3, du.as_slice(), &mut grad.p3),
        (&p.p4, &cache.c4, neg_du.as_slice(), &mut grad.p4),
    ] {
        let d = mlp.backward(cache, dy, g)?;
        dx.iter_mut().zip(d).for_each(|(a, b)| *a = *a + b);
    }
    p.bridge.backward(&cache.fc, &dx, &mut grad.bridge)
}
