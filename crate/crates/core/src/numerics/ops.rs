//! Linear algebra, activations and losses.
//!
//! Every reduction accumulates in ascending index order so results are
//! bit-identical across runs and thread counts.

use super::tensor::{dot, Scalar, Tensor};
use crate::error::{Error, Result};

/// `a[m×k] · b[k×n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![S::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new([m, n], out)?.ensure_finite("matmul")
}

/// Raw `out[m×n] += a[m×k] · b[k×n]` on row-major slices.
pub fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `aᵀ · b` for `a[k×m]`, `b[k×n]`.
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (k, m) = a.dims2("matmul_tn")?;
    let (k2, n) = b.dims2("matmul_tn")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul_tn",
            format!("{:?}ᵀ x {:?}", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::zero(); m * n];
    for p in 0..k {
        let b_row = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            if av == S::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new([m, n], out)?.ensure_finite("matmul_tn")
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul_nt",
            format!("{:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let out = (0..m * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            dot(&ad[i * k..(i + 1) * k], &bd[j * k..(j + 1) * k])
        })
        .collect();
    Tensor::new([m, n], out)?.ensure_finite("matmul_nt")
}

/// `w[m×k] · x[k]`.
pub fn matvec<S: Scalar>(w: &Tensor<S>, x: &[S]) -> Result<Vec<S>> {
    let (m, k) = w.dims2("matvec")?;
    if x.len() != k {
        return Err(Error::shape(
            "matvec",
            format!("{:?} x [{}]", w.shape(), x.len()),
        ));
    }
    Ok((0..m).map(|i| dot(w.row(i), x)).collect())
}

/// `w[m×k]ᵀ · y[m]`.
pub fn matvec_t<S: Scalar>(w: &Tensor<S>, y: &[S]) -> Result<Vec<S>> {
    let (m, k) = w.dims2("matvec_t")?;
    if y.len() != m {
        return Err(Error::shape(
            "matvec_t",
            format!("{:?}ᵀ x [{}]", w.shape(), y.len()),
        ));
    }
    let mut out = vec![S::zero(); k];
    for (i, &yv) in y.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o = *o + yv * wv;
        }
    }
    Ok(out)
}

/// Accumulates the outer product `y ⊗ x` into `g[m×k]`.
pub fn add_outer<S: Scalar>(g: &mut Tensor<S>, y: &[S], x: &[S]) {
    let k = x.len();
    let data = g.data_mut();
    for (i, &yv) in y.iter().enumerate() {
        for (o, &xv) in data[i * k..(i + 1) * k].iter_mut().zip(x) {
            *o = *o + yv * xv;
        }
    }
}

pub fn relu<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        v
    } else {
        S::zero()
    }
}

/// Numerically stabilised softmax (max subtracted before exponentiation).
pub fn softmax<S: Scalar>(logits: &[S]) -> Result<Vec<S>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of empty vector"));
    }
    let max = logits.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<S> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().fold(S::zero(), |a, &v| a + v);
    let out: Vec<S> = exps.into_iter().map(|e| e / total).collect();
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite("softmax".into()))
    }
}

/// Index of the single `1` in a one-hot vector.
pub fn onehot_class<S: Scalar>(onehot: &[S]) -> Result<usize> {
    let mut class = None;
    for (i, &v) in onehot.iter().enumerate() {
        if v == S::one() {
            if class.replace(i).is_some() {
                return Err(Error::invalid("one-hot vector has several ones"));
            }
        } else if v != S::zero() {
            return Err(Error::invalid(format!("one-hot entry {i} is {v}")));
        }
    }
    class.ok_or_else(|| Error::invalid("one-hot vector has no ones"))
}

pub fn onehot<S: Scalar>(class: usize, n: usize) -> Vec<S> {
    (0..n)
        .map(|i| if i == class { S::one() } else { S::zero() })
        .collect()
}

/// Cross-entropy of logits against a one-hot target; softmax applied internally.
pub fn cross_entropy<S: Scalar>(scores: &[S], onehot: &[S]) -> Result<S> {
    Ok(cross_entropy_with_grad(scores, onehot)?.0)
}

/// Loss and its gradient with respect to the logits, `softmax(s) − y`.
pub fn cross_entropy_with_grad<S: Scalar>(scores: &[S], onehot: &[S]) -> Result<(S, Vec<S>)> {
    if scores.is_empty() {
        return Err(Error::invalid("cross_entropy over zero classes"));
    }
    if scores.len() != onehot.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} scores vs {} targets", scores.len(), onehot.len()),
        ));
    }
    let class = onehot_class(onehot)?;
    let max = scores.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let total = scores
        .iter()
        .fold(S::zero(), |acc, &v| acc + (v - max).exp());
    let log_z = max + total.ln();
    let loss = log_z - scores[class];
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy".into()));
    }
    let grad = scores
        .iter()
        .zip(onehot)
        .map(|(&s, &y)| (s - log_z).exp() - y)
        .collect();
    Ok((loss, grad))
}

/// `x / ‖x‖` together with the norm; a zero vector is an error.
pub fn l2_normalize<S: Scalar>(x: &[S], what: &str) -> Result<(Vec<S>, S)> {
    let norm = dot(x, x).sqrt();
    if norm == S::zero() || !norm.is_finite() {
        return Err(Error::invalid(format!("{what} has zero or non-finite norm")));
    }
    Ok((x.iter().map(|&v| v / norm).collect(), norm))
}

/// Backward of `y = x / ‖x‖` given the normalised output and the norm.
pub fn l2_normalize_backward<S: Scalar>(y: &[S], norm: S, dy: &[S]) -> Vec<S> {
    let proj = dot(y, dy);
    y.iter()
        .zip(dy)
        .map(|(&yv, &g)| (g - yv * proj) / norm)
        .collect()
}
