use crate::classifier::{mse_targets_loss, vector_len, IgnoreMask};
use crate::diffcore::{Graph, NodeId, Shape, Tensor};
use crate::error::{Error, Result};

use super::{ExtendedLogits, PotentialCategorySet, VcTarget, VirtualWeight};

/// Focal exponent used when a focal term is requested without a value.
pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;

/// `[f . w^v, f . w^0, ..., f . w^{K-1}]` for a student feature `f` and a
/// `K x C` weight node. The virtual weight enters as a constant.
pub fn extend_logits(g: &mut Graph, f: NodeId, weights: NodeId, wv: &VirtualWeight) -> Result<ExtendedLogits> {
    let dim = vector_len(g, f, "extend_logits")?;
    let num_classes = match g.shape(weights) {
        Shape::Matrix(k, c) if c == dim => k,
        Shape::Matrix(_, c) => {
            return Err(Error::DimensionMismatch {
                context: "extend_logits weights",
                expected: dim,
                actual: c,
            })
        }
        other => {
            return Err(Error::invalid(
                "extend_logits",
                format!("weights must be a matrix, got {other}"),
            ))
        }
    };
    let class_logits = g.matvec(weights, f)?;
    extend_with(g, f, class_logits, num_classes, wv)
}

/// Same as [`extend_logits`] when the class logits already exist on the graph.
pub(crate) fn extend_with(
    g: &mut Graph,
    f: NodeId,
    class_logits: NodeId,
    num_classes: usize,
    wv: &VirtualWeight,
) -> Result<ExtendedLogits> {
    let dim = vector_len(g, f, "extend_logits")?;
    if wv.dim() != dim {
        return Err(Error::DimensionMismatch {
            context: "virtual weight",
            expected: dim,
            actual: wv.dim(),
        });
    }
    let wv_node = g.constant(Tensor::vector(wv.vector().to_vec()));
    let lv = g.dot(f, wv_node)?;
    extend_with_logit(g, lv, class_logits, num_classes)
}

pub(crate) fn extend_with_logit(
    g: &mut Graph,
    lv: NodeId,
    class_logits: NodeId,
    num_classes: usize,
) -> Result<ExtendedLogits> {
    let node = g.concat(&[lv, class_logits])?;
    Ok(ExtendedLogits {
        node,
        vc_index: 0,
        num_classes,
    })
}

/// `log sum_{i not in PC} exp(l^i - l^v)` over the extended logits, i.e. the
/// negative log masked-softmax probability of the virtual slot. With a focal
/// exponent the loss is scaled by `(1 - p_v)^gamma`.
pub fn vc_ce_loss(
    g: &mut Graph,
    ext: &ExtendedLogits,
    pc: &PotentialCategorySet,
    focal_gamma: Option<f64>,
) -> Result<NodeId> {
    let target = VcTarget::new(ext, pc)?;
    let kept = target.mask().kept(ext.len())?;
    let survivors = g.gather(ext.node, &kept)?;
    let lse = g.log_sum_exp(survivors)?;
    let lv = g.index(ext.node, ext.vc_index)?;
    let ce = g.sub(lse, lv)?;
    match focal_gamma {
        None => Ok(ce),
        Some(gamma) if gamma >= 0.0 && gamma.is_finite() => {
            let neg = g.scale(ce, -1.0);
            let pv = g.exp(neg);
            let one = g.scalar(1.0);
            let rest = g.sub(one, pv)?;
            let weight = g.powf(rest, gamma)?;
            Ok(g.mul(weight, ce)?)
        }
        Some(gamma) => Err(Error::invalid(
            "focal_gamma",
            format!("must be a non-negative real, got {gamma}"),
        )),
    }
}

/// `sum_{i not in PC} (sigmoid(l^i) - t^i)^2` with `t^v = 1` and 0 elsewhere.
pub fn vc_mse_loss(g: &mut Graph, ext: &ExtendedLogits, pc: &PotentialCategorySet) -> Result<NodeId> {
    let target = VcTarget::new(ext, pc)?;
    mse_targets_loss(g, ext.node, &target.binary(), &target.mask())
}

/// Negatives-only MSE on plain `K` logits: `sum_{i not in PC} sigmoid(l^i)^2`.
pub fn neg_loss(g: &mut Graph, logits: NodeId, pc: &PotentialCategorySet) -> Result<NodeId> {
    let len = vector_len(g, logits, "neg_loss")?;
    if let Some(bad) = pc.classes().find(|&c| c >= len) {
        return Err(Error::ClassOutOfRange {
            index: bad,
            classes: len,
        });
    }
    if pc.len() >= len {
        return Err(Error::PcCoversAll);
    }
    mse_targets_loss(g, logits, &vec![0.0; len], &IgnoreMask::new(pc.classes()))
}

/// `(1 - cos(f, w^v)) + sum_{i not in PC} max(0, cos(f, w^i))`.
pub fn cosine_sim_loss(
    g: &mut Graph,
    f: NodeId,
    wv: &VirtualWeight,
    weights: NodeId,
    pc: &PotentialCategorySet,
) -> Result<NodeId> {
    let dim = vector_len(g, f, "cosine_sim_loss")?;
    let num_classes = match g.shape(weights) {
        Shape::Matrix(k, c) if c == dim => k,
        other => {
            return Err(Error::invalid(
                "cosine_sim_loss",
                format!("weights of shape {other} do not match feature dim {dim}"),
            ))
        }
    };
    if wv.dim() != dim {
        return Err(Error::DimensionMismatch {
            context: "virtual weight",
            expected: dim,
            actual: wv.dim(),
        });
    }
    if let Some(bad) = pc.classes().find(|&c| c >= num_classes) {
        return Err(if bad == num_classes {
            Error::VirtualInPcSet
        } else {
            Error::ClassOutOfRange {
                index: bad,
                classes: num_classes,
            }
        });
    }
    let f_norm = g.norm2(f);
    if g.scalar_value(f_norm) == Some(0.0) {
        return Err(Error::ZeroNormFeature);
    }

    let wv_node = g.constant(Tensor::vector(wv.vector().to_vec()));
    let cos_v = cosine(g, f, f_norm, wv_node)?;
    let one = g.scalar(1.0);
    let mut terms = vec![g.sub(one, cos_v)?];
    for i in (0..num_classes).filter(|&i| !pc.contains(i)) {
        let wi = g.row(weights, i)?;
        let cos_i = cosine(g, f, f_norm, wi)?;
        terms.push(g.relu(cos_i));
    }
    let stacked = g.concat(&terms)?;
    Ok(g.sum(stacked))
}

fn cosine(g: &mut Graph, f: NodeId, f_norm: NodeId, w: NodeId) -> Result<NodeId> {
    let d = g.dot(f, w)?;
    let wn = g.norm2(w);
    let denom = g.mul(f_norm, wn)?;
    Ok(g.div(d, denom)?)
}
