//! Bias-free linear classification heads and the baseline losses built on
//! them: cross entropy, sigmoid MSE against binary targets, and a softmax
//! that can ignore a subset of classes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Shape, Tensor};
use crate::error::{Error, Result};

/// `K` weight vectors `w^0 .. w^{K-1}` of a shared dimension `C`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierWeights {
    classes: usize,
    dim: usize,
    data: Vec<f64>,
}

impl ClassifierWeights {
    pub fn new<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "classifier weights",
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_flat(rows.len(), dim, data)
    }

    pub fn from_flat(classes: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::invalid(
                "classifier weights",
                "needs at least one class and one dimension",
            ));
        }
        if data.len() != classes * dim {
            return Err(Error::DimensionMismatch {
                context: "classifier weights",
                expected: classes * dim,
                actual: data.len(),
            });
        }
        let w = ClassifierWeights { classes, dim, data };
        if let Some(i) = (0..classes).find(|&i| !(w.norm(i) > 0.0)) {
            return Err(Error::ZeroNormWeight(i));
        }
        Ok(w)
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn norm(&self, i: usize) -> f64 {
        l2_norm(self.row(i))
    }

    /// Smallest Euclidean norm among the weight vectors.
    pub fn min_norm(&self) -> f64 {
        (0..self.classes).map(|i| self.norm(i)).fold(f64::INFINITY, f64::min)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.classes, self.dim, self.data.clone()).expect("validated shape")
    }
}

/// Per-class logits `l^i = f . w^i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid("logits", format!("entry {i} is not finite")));
        }
        Ok(Logits(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub fn forward_logits(f: &[f64], w: &ClassifierWeights) -> Result<Logits> {
    if f.len() != w.dim() {
        return Err(Error::DimensionMismatch {
            context: "forward_logits",
            expected: w.dim(),
            actual: f.len(),
        });
    }
    Logits::new(w.rows().map(|row| dot(f, row)).collect())
}

/// Graph version of [`forward_logits`]: `W f` for a `K x C` weight node.
pub fn logits_node(g: &mut Graph, f: NodeId, w: NodeId) -> Result<NodeId> {
    Ok(g.matvec(w, f)?)
}

/// Set of class indices excluded from a softmax or loss.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IgnoreMask {
    ignored: BTreeSet<usize>,
}

impl IgnoreMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(ignored: impl IntoIterator<Item = usize>) -> Self {
        IgnoreMask {
            ignored: ignored.into_iter().collect(),
        }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.ignored.contains(&i)
    }

    pub fn ignored(&self) -> impl Iterator<Item = usize> + '_ {
        self.ignored.iter().copied()
    }

    /// Indices in `0..len` that survive the mask, ascending.
    pub fn kept(&self, len: usize) -> Result<Vec<usize>> {
        if let Some(&bad) = self.ignored.iter().find(|&&i| i >= len) {
            return Err(Error::ClassOutOfRange {
                index: bad,
                classes: len,
            });
        }
        let kept: Vec<usize> = (0..len).filter(|i| !self.ignored.contains(i)).collect();
        if kept.is_empty() {
            return Err(Error::AllIgnored(len));
        }
        Ok(kept)
    }
}

/// Output of [`masked_softmax`]: the probability node and which entries survived.
#[derive(Clone, Debug)]
pub struct MaskedSoftmax {
    pub probs: NodeId,
    pub kept: Vec<bool>,
}

/// Softmax over the unignored entries; ignored entries are exactly 0 and
/// are disconnected from the graph.
pub fn masked_softmax(g: &mut Graph, logits: NodeId, mask: &IgnoreMask) -> Result<MaskedSoftmax> {
    let len = vector_len(g, logits, "masked_softmax")?;
    let kept = mask.kept(len)?;
    let sub = g.gather(logits, &kept)?;
    let lse = g.log_sum_exp(sub)?;
    let shifted = g.sub(sub, lse)?;
    let e = g.exp(shifted);
    let probs = g.scatter(e, &kept, len)?;
    let mut flags = vec![false; len];
    kept.iter().for_each(|&i| flags[i] = true);
    Ok(MaskedSoftmax { probs, kept: flags })
}

/// `log(sum_i exp(l^i - l^label))`.
pub fn ce_loss(g: &mut Graph, logits: NodeId, label: usize) -> Result<NodeId> {
    let len = vector_len(g, logits, "ce_loss")?;
    if label >= len {
        return Err(Error::ClassOutOfRange {
            index: label,
            classes: len,
        });
    }
    let lse = g.log_sum_exp(logits)?;
    let target = g.index(logits, label)?;
    Ok(g.sub(lse, target)?)
}

/// `sum over unignored i of (sigmoid(l^i) - t^i)^2` with binary targets.
pub fn mse_targets_loss(g: &mut Graph, logits: NodeId, targets: &[f64], mask: &IgnoreMask) -> Result<NodeId> {
    let len = vector_len(g, logits, "mse_targets_loss")?;
    if targets.len() != len {
        return Err(Error::DimensionMismatch {
            context: "mse_targets_loss",
            expected: len,
            actual: targets.len(),
        });
    }
    if let Some((index, &value)) = targets.iter().enumerate().find(|(_, &t)| t != 0.0 && t != 1.0) {
        return Err(Error::NonBinaryTarget { index, value });
    }
    let kept = mask.kept(len)?;
    let sub = g.gather(logits, &kept)?;
    let s = g.sigmoid(sub);
    let t = g.constant(Tensor::vector(kept.iter().map(|&i| targets[i]).collect()));
    let diff = g.sub(s, t)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.sum(sq))
}

pub(crate) fn vector_len(g: &Graph, id: NodeId, context: &'static str) -> Result<usize> {
    match g.shape(id) {
        Shape::Vector(n) => Ok(n),
        other => Err(Error::invalid(context, format!("expected a vector, got shape {other}"))),
    }
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
