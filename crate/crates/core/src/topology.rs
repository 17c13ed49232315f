//! Skeleton graph and the degree-normalised graph convolution stack
//! `σ(D^{-1/2} A D^{-1/2} F W)` with a linear classification head.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::mlp::Linear;
use crate::numerics::ops::{matmul, matmul_nt, matmul_tn, relu};
use crate::numerics::params::{nested, ParamTree};
use crate::numerics::tensor::{Scalar, Tensor};

/// COCO-17 joint names in keypoint order.
pub const COCO17_JOINTS: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// COCO-17 as a tree rooted at the nose, `(parent, child)`.
pub const COCO17_EDGES: [(usize, usize); 16] = [
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (0, 5),
    (0, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    parent: Vec<usize>,
}

impl SkeletonGraph {
    /// Builds a graph from directed `(parent, child)` edges. Every joint has at
    /// most one parent; joints without one are roots and are their own parent.
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("skeleton needs at least one joint"));
        }
        let mut parent: Vec<usize> = (0..n).collect();
        let mut has_parent = vec![false; n];
        for &(p, c) in &edges {
            if p >= n || c >= n {
                return Err(Error::invalid(format!("edge ({p}, {c}) outside {n} joints")));
            }
            if p == c {
                return Err(Error::invalid(format!("self edge on joint {p}")));
            }
            if std::mem::replace(&mut has_parent[c], true) {
                return Err(Error::invalid(format!("joint {c} has more than one parent")));
            }
            parent[c] = p;
        }
        Ok(Self { n, edges, parent })
    }

    pub fn coco17() -> Self {
        Self::new(17, COCO17_EDGES.to_vec()).expect("static skeleton is valid")
    }

    /// Reads a JSON list of `[parent, child]` pairs; the joint count is the
    /// largest index plus one.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let edges: Vec<(usize, usize)> =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let n = edges.iter().map(|&(p, c)| p.max(c) + 1).max().unwrap_or(1);
        Self::new(n, edges)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.edges).expect("edges serialise")
    }

    pub fn num_joints(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn parent(&self, j: usize) -> usize {
        self.parent[j]
    }

    pub fn parents(&self) -> &[usize] {
        &self.parent
    }

    /// True when the edges connect every joint into a single tree.
    pub fn is_connected_tree(&self) -> bool {
        if self.edges.len() + 1 != self.n {
            return false;
        }
        let roots = (0..self.n).filter(|&j| self.parent[j] == j).count();
        if roots != 1 {
            return false;
        }
        // every joint must reach the root without revisiting
        (0..self.n).all(|start| {
            let mut j = start;
            for _ in 0..self.n {
                if self.parent[j] == j {
                    return true;
                }
                j = self.parent[j];
            }
            false
        })
    }

    /// Symmetric 0/1 adjacency with self-loops.
    pub fn adjacency<S: Scalar>(&self) -> Tensor<S> {
        let mut a = Tensor::eye(self.n);
        for &(p, c) in &self.edges {
            a.set(&[p, c], S::one());
            a.set(&[c, p], S::one());
        }
        a
    }

    /// Applies a joint relabelling: joint `j` becomes `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let edges = self.edges.iter().map(|&(p, c)| (perm[p], perm[c])).collect();
        Self::new(self.n, edges)
    }
}

/// `D^{-1/2} A D^{-1/2}` for the graph's adjacency (self-loops included).
pub fn normalize_adjacency<S: Scalar>(g: &SkeletonGraph) -> Result<Tensor<S>> {
    normalize_matrix(&g.adjacency())
}

/// Symmetric degree normalisation of an arbitrary square adjacency matrix.
pub fn normalize_matrix<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, m) = a.dims2("normalize_adjacency")?;
    if n != m {
        return Err(Error::shape("normalize_adjacency", format!("{n}x{m} is not square")));
    }
    let degree: Vec<f64> = (0..n)
        .map(|i| {
            let d = a.row(i).iter().fold(0.0f64, |acc, &v| acc + v.to_f64());
            if d > 0.0 {
                Ok(d)
            } else {
                Err(Error::invalid(format!("joint {i} has zero degree")))
            }
        })
        .collect::<Result<_>>()?;
    // a_ij / sqrt(d_i d_j) keeps the result exactly symmetric
    Ok(Tensor::from_fn([n, n], |k| {
        let (i, j) = (k / n, k % n);
        S::from_f64(a.data()[k].to_f64() / (degree[i] * degree[j]).sqrt())
    }))
}

/// `out[n×c] = adj[n×n] · x[n×c]`, accumulated in f64 so the result does not
/// depend on neighbour order.
fn propagate<S: Scalar>(adj: &Tensor<S>, x: &[S], out: &mut [S], n: usize, c: usize) {
    let a = adj.data();
    let mut acc = vec![0.0f64; c];
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n {
            let w = a[i * n + j];
            if w == S::zero() {
                continue;
            }
            let w = w.to_f64();
            for (s, &xv) in acc.iter_mut().zip(&x[j * c..(j + 1) * c]) {
                *s += w * xv.to_f64();
            }
        }
        for (o, &s) in out[i * c..(i + 1) * c].iter_mut().zip(&acc) {
            *o = S::from_f64(s);
        }
    }
}

fn adjacency_transposed<S: Scalar>(adj: &Tensor<S>) -> Result<Tensor<S>> {
    adj.transpose()
}

/// One graph convolution `relu(Â · F · W)` on a single frame.
pub fn graph_conv<S: Scalar>(f: &Tensor<S>, adj: &Tensor<S>, w: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c_in) = f.dims2("graph_conv")?;
    let (an, am) = adj.dims2("graph_conv")?;
    let (w_in, c_out) = w.dims2("graph_conv")?;
    if an != n || am != n || w_in != c_in {
        return Err(Error::shape(
            "graph_conv",
            format!("F {:?}, Â {:?}, W {:?}", f.shape(), adj.shape(), w.shape()),
        ));
    }
    let y = matmul(f, w)?;
    let mut z = vec![S::zero(); n * c_out];
    propagate(adj, y.data(), &mut z, n, c_out);
    Tensor::new([n, c_out], z.into_iter().map(relu).collect())?.ensure_finite("graph_conv")
}

/// Graph convolution weights plus the classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams<S = f32> {
    /// `W_l` with shape `[c_l, c_{l+1}]`.
    pub layers: Vec<Tensor<S>>,
    /// Maps the pooled feature to class logits.
    pub head: Linear<S>,
}

impl<S: Scalar> GcnParams<S> {
    pub fn new(layers: Vec<Tensor<S>>, head: Linear<S>) -> Result<Self> {
        let mut width = None;
        for (l, w) in layers.iter().enumerate() {
            let (i, o) = w.dims2("gcn_params")?;
            if let Some(prev) = width {
                if prev != i {
                    return Err(Error::shape("gcn_params", format!("layer {l} takes {i}, previous gives {prev}")));
                }
            }
            width = Some(o);
        }
        if let Some(o) = width {
            if head.in_dim() != o {
                return Err(Error::shape("gcn_params", format!("head takes {}, stack gives {o}", head.in_dim())));
            }
        }
        Ok(Self { layers, head })
    }

    /// He-initialised stack over `widths = [c_0, c_1, …, c_L]` and a head to `classes`.
    pub fn init(widths: &[usize], classes: usize, rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
                Tensor::from_fn([w[0], w[1]], |_| S::from_f64(normal.sample(rng)))
            })
            .collect();
        let last = *widths.last().expect("at least the input width");
        let head = Linear::random(last, classes, (1.0 / last as f64).sqrt(), rng);
        Self { layers, head }
    }

    pub fn input_width(&self) -> usize {
        self.layers
            .first()
            .map(|w| w.shape()[0])
            .unwrap_or_else(|| self.head.in_dim())
    }

    pub fn feature_width(&self) -> usize {
        self.head.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_dim()
    }
}

impl<S: Scalar> ParamTree for GcnParams<S> {
    type Elem = S;

    fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<_> = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, w)| (format!("layers.{l}"), w))
            .collect();
        out.extend(nested("head", self.head.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<_> = self.layers.iter_mut().collect();
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

/// Activations retained by [`gcn_features`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GcnCache<S> {
    frames: usize,
    joints: usize,
    /// Input of each layer as `[T·n, c_l]`.
    inputs: Vec<Tensor<S>>,
    /// Pre-activation of each layer as `[T·n, c_{l+1}]`.
    pre: Vec<Tensor<S>>,
    feature: Vec<S>,
}

impl<S: Scalar> GcnCache<S> {
    pub fn feature(&self) -> &[S] {
        &self.feature
    }
}

/// Runs the stack on every frame of `seq[T×n×c]` and averages over frames and
/// joints, returning the pre-head feature.
pub fn gcn_features<S: Scalar>(
    seq: &Tensor<S>,
    adj: &Tensor<S>,
    p: &GcnParams<S>,
) -> Result<(Vec<S>, GcnCache<S>)> {
    let (t, n, c) = seq.dims3("gcn_forward")?;
    if adj.shape() != [n, n] {
        return Err(Error::shape("gcn_forward", format!("Â {:?} for {n} joints", adj.shape())));
    }
    if c != p.input_width() {
        return Err(Error::shape(
            "gcn_forward",
            format!("input has {c} channels, first layer takes {}", p.input_width()),
        ));
    }
    let mut h = seq.clone().reshape([t * n, c])?;
    let mut inputs = Vec::with_capacity(p.layers.len());
    let mut pre = Vec::with_capacity(p.layers.len());
    for w in &p.layers {
        let c_out = w.shape()[1];
        let y = matmul(&h, w)?;
        let mut z = vec![S::zero(); t * n * c_out];
        for f in 0..t {
            let span = f * n * c_out..(f + 1) * n * c_out;
            propagate(adj, &y.data()[span.clone()], &mut z[span], n, c_out);
        }
        let z = Tensor::new([t * n, c_out], z)?;
        inputs.push(std::mem::replace(&mut h, z.map(relu)));
        pre.push(z);
    }
    let width = h.shape()[1];
    let mut acc = vec![0.0f64; width];
    for r in 0..t * n {
        for (a, &v) in acc.iter_mut().zip(h.row(r)) {
            *a += v.to_f64();
        }
    }
    let count = (t * n) as f64;
    let feature: Vec<S> = acc.into_iter().map(|a| S::from_f64(a / count)).collect();
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gcn_forward".into()));
    }
    let cache = GcnCache {
        frames: t,
        joints: n,
        inputs,
        pre,
        feature: feature.clone(),
    };
    Ok((feature, cache))
}

/// Full forward: stack, global average, linear head.
pub fn gcn_forward<S: Scalar>(seq: &Tensor<S>, adj: &Tensor<S>, p: &GcnParams<S>) -> Result<Vec<S>> {
    let (feature, _) = gcn_features(seq, adj, p)?;
    p.head.forward(&feature)
}

/// Gradients of the stack with respect to its parameters and input sequence.
#[derive(Debug, Clone)]
pub struct GcnGrads<S> {
    pub params: GcnParams<S>,
    pub input: Tensor<S>,
}

/// Backward through head and stack.
///
/// `d_logits` is the upstream gradient at the head output; `d_feature` is any
/// additional gradient arriving directly at the pooled feature.
pub fn gcn_backward<S: Scalar>(
    cache: &GcnCache<S>,
    adj: &Tensor<S>,
    p: &GcnParams<S>,
    d_logits: &[S],
    d_feature: Option<&[S]>,
) -> Result<GcnGrads<S>> {
    let mut grads = p.zeros_like();
    let mut df = p.head.backward(&cache.feature, d_logits, &mut grads.head)?;
    if let Some(extra) = d_feature {
        if extra.len() != df.len() {
            return Err(Error::shape("gcn_backward", format!("feature gradient {} vs {}", extra.len(), df.len())));
        }
        df.iter_mut().zip(extra).for_each(|(a, &b)| *a = *a + b);
    }
    let (t, n) = (cache.frames, cache.joints);
    let rows = t * n;
    let scale = S::one() / S::from_usize(rows);
    let per_row: Vec<S> = df.iter().map(|&v| v * scale).collect();
    let mut dh = Tensor::from_fn([rows, per_row.len()], |k| per_row[k % per_row.len()]);
    let adj_t = adjacency_transposed(adj)?;
    for l in (0..p.layers.len()).rev() {
        let c_out = p.layers[l].shape()[1];
        let dz = dh.zip_map(&cache.pre[l], "gcn_backward", |g, z| if z > S::zero() { g } else { S::zero() })?;
        let mut dy = vec![S::zero(); rows * c_out];
        for f in 0..t {
            let span = f * n * c_out..(f + 1) * n * c_out;
            propagate(&adj_t, &dz.data()[span.clone()], &mut dy[span], n, c_out);
        }
        let dy = Tensor::new([rows, c_out], dy)?;
        grads.layers[l] = matmul_tn(&cache.inputs[l], &dy)?;
        dh = matmul_nt(&dy, &p.layers[l])?;
    }
    let c = dh.shape()[1];
    Ok(GcnGrads {
        params: grads,
        input: dh.reshape([t, n, c])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coco17_is_a_tree() {
        let g = SkeletonGraph::coco17();
        assert!(g.is_connected_tree());
        assert_eq!(g.parent(0), 0);
        assert_eq!(g.parent(9), 7);
        let a: Tensor<f32> = g.adjacency();
        for i in 0..17 {
            assert_eq!(a.get(&[i, i]), 1.0);
            for j in 0..17 {
                assert_eq!(a.get(&[i, j]), a.get(&[j, i]));
            }
        }
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(SkeletonGraph::new(3, vec![(0, 3)]).is_err());
        assert!(SkeletonGraph::new(3, vec![(0, 1), (2, 1)]).is_err());
        assert!(SkeletonGraph::new(3, vec![(1, 1)]).is_err());
        assert!(!SkeletonGraph::new(3, vec![(0, 1)]).unwrap().is_connected_tree());
    }

    #[test]
    fn isolated_joints_normalise_to_identity() {
        let g = SkeletonGraph::new(4, vec![]).unwrap();
        assert_eq!(normalize_adjacency::<f32>(&g).unwrap(), Tensor::eye(4));
    }

    #[test]
    fn single_edge_normalises_to_halves() {
        let g = SkeletonGraph::new(2, vec![(0, 1)]).unwrap();
        let a = normalize_adjacency::<f32>(&g).unwrap();
        assert_eq!(a.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn coco17_row_sums_match_scalar_oracle() {
        let g = SkeletonGraph::coco17();
        let a = normalize_adjacency::<f32>(&g).unwrap();
        let mut degree = [1.0f64; 17];
        let mut neighbours: Vec<Vec<usize>> = (0..17).map(|j| vec![j]).collect();
        for &(p, c) in COCO17_EDGES.iter() {
            degree[p] += 1.0;
            degree[c] += 1.0;
            neighbours[p].push(c);
            neighbours[c].push(p);
        }
        for i in 0..17 {
            let oracle: f64 = neighbours[i].iter().map(|&j| 1.0 / (degree[i] * degree[j]).sqrt()).sum();
            let got: f64 = a.row(i).iter().map(|&v| v as f64).sum();
            assert!((got - oracle).abs() <= 1e-6, "row {i}: {got} vs {oracle}");
        }
        for i in 0..17 {
            for j in 0..17 {
                assert!((a.get(&[i, j]) - a.get(&[j, i])).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn graph_conv_identity_and_zero() {
        let f = Tensor::new([3, 2], vec![0.5f32, 1.0, 2.0, 0.0, 3.5, 0.25]).unwrap();
        assert_eq!(graph_conv(&f, &Tensor::eye(3), &Tensor::eye(2)).unwrap(), f);
        let z = Tensor::<f32>::zeros([3, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::from_fn([2, 4], |_| rng.random_range(-1.0f32..1.0));
        assert!(graph_conv(&z, &Tensor::eye(3), &w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graph_conv_matches_scalar_oracle_on_path() {
        let g = SkeletonGraph::new(3, vec![(0, 1), (1, 2)]).unwrap();
        let a = normalize_adjacency::<f32>(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::from_fn([3, 4], |_| rng.random_range(-1.0f32..1.0));
        let w = Tensor::from_fn([4, 5], |_| rng.random_range(-1.0f32..1.0));
        let got = graph_conv(&f, &a, &w).unwrap();
        for i in 0..3 {
            for o in 0..5 {
                let mut acc = 0.0f64;
                for j in 0..3 {
                    for k in 0..4 {
                        acc += a.get(&[i, j]) as f64 * f.get(&[j, k]) as f64 * w.get(&[k, o]) as f64;
                    }
                }
                assert!((got.get(&[i, o]) as f64 - acc.max(0.0)).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn head_only_stack() {
        let head = Linear::new(
            Tensor::new([2, 3], vec![1.0f32, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap(),
            Tensor::vector(vec![0.1, -0.2]),
        )
        .unwrap();
        let p = GcnParams::new(vec![], head).unwrap();
        let seq = Tensor::new([1, 1, 3], vec![2.0f32, 4.0, 6.0]).unwrap();
        let logits = gcn_forward(&seq, &Tensor::eye(1), &p).unwrap();
        assert!((logits[0] - (2.0 - 6.0 + 0.1)).abs() < 1e-6);
        assert!((logits[1] - (6.0 - 0.2)).abs() < 1e-6);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = SkeletonGraph::coco17();
        let a = normalize_adjacency::<f64>(&g).unwrap();
        let p = GcnParams::<f64>::init(&[4, 6, 5], 3, &mut rng);
        let seq = Tensor::from_fn([2, 17, 4], |_| rng.random_range(-1.0..1.0));
        let (_, cache) = gcn_features(&seq, &a, &p).unwrap();
        let grads = gcn_backward(&cache, &a, &p, &[0.0; 3], None).unwrap();
        assert!(grads.params.flatten().iter().all(|&v| v == 0.0));
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_identity_adjacency_reduces_to_dense_backward() {
        // one frame, one joint, Â = I: feature = relu(xW), logits = H·feature + b
        let x = [0.5f64, -1.0];
        let w = Tensor::new([2, 2], vec![1.0, -0.5, 0.25, 0.75]).unwrap();
        let head = Linear::new(Tensor::new([1, 2], vec![2.0, -3.0]).unwrap(), Tensor::vector(vec![0.0])).unwrap();
        let p = GcnParams::new(vec![w.clone()], head).unwrap();
        let seq = Tensor::new([1, 1, 2], x.to_vec()).unwrap();
        let (feature, cache) = gcn_features(&seq, &Tensor::eye(1), &p).unwrap();
        let grads = gcn_backward(&cache, &Tensor::eye(1), &p, &[1.0], None).unwrap();
        // z = xW = [0.5 - 0.25, -0.25 - 0.75] = [0.25, -1.0]; relu -> [0.25, 0]
        assert_eq!(feature, vec![0.25, 0.0]);
        // dL/dz = head ⊙ relu'(z) = [2, 0]; dW = xᵀ dz
        assert_eq!(grads.params.layers[0].data(), &[1.0, 0.0, -2.0, 0.0]);
        assert_eq!(grads.params.head.weight.data(), &[0.25, 0.0]);
        // dx = W dz = [1·2, 0.25·2]
        assert_eq!(grads.input.data(), &[2.0, 0.5]);
    }
}
