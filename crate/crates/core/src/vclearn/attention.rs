use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierWeights;
use crate::diffcore::{Graph, NodeId, Shape, Tensor};
use crate::error::{Error, Result};

use super::loss::extend_with_logit;
use super::{vc_ce_loss, MagnitudePolicy, PcSource, PotentialCategorySet, VirtualWeight, WeightOrigin};

const PROJECTIONS: usize = 4;

/// Single-head self-attention over `[f, w^0, ..., w^{K-1}]` whose output at
/// the feature token becomes the direction of `w^v`.
///
/// Parameters are stored flat as `W_q, W_k, W_v, W_o`, each `C x C` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionGenerator {
    width: usize,
    params: Vec<f64>,
}

/// A labelled unit used to fit the generator: student feature, teacher
/// feature and a ground-truth or fully trusted class.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidentSample {
    pub feature: Vec<f64>,
    pub teacher_feature: Vec<f64>,
    pub label: usize,
}

/// Graph handles for one generator loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorObjective {
    pub params: NodeId,
    pub weights: NodeId,
    pub loss: NodeId,
}

impl AttentionGenerator {
    /// `W_v = W_o = I`; query and key projections drawn from `N(0, scale^2)`
    /// approximated by a uniform of equal variance.
    pub fn new<R: Rng + ?Sized>(width: usize, init_scale: f64, rng: &mut R) -> Result<Self> {
        let mut gen = Self::identity(width)?;
        let half = init_scale * 3f64.sqrt();
        let cc = width * width;
        for p in &mut gen.params[..2 * cc] {
            *p = if half > 0.0 { rng.random_range(-half..half) } else { 0.0 };
        }
        Ok(gen)
    }

    /// All four projections set to the identity.
    pub fn identity(width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::invalid("width", "must be positive"));
        }
        let cc = width * width;
        let mut params = vec![0.0; PROJECTIONS * cc];
        for block in 0..PROJECTIONS {
            for i in 0..width {
                params[block * cc + i * width + i] = 1.0;
            }
        }
        Ok(AttentionGenerator { width, params })
    }

    pub fn from_params(width: usize, params: Vec<f64>) -> Result<Self> {
        if width == 0 || params.len() != PROJECTIONS * width * width {
            return Err(Error::DimensionMismatch {
                context: "attention parameters",
                expected: PROJECTIONS * width * width,
                actual: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("attention parameters", "non-finite entry"));
        }
        Ok(AttentionGenerator { width, params })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable view of one projection block (0 = query, 1 = key, 2 = value, 3 = output).
    pub fn projection_mut(&mut self, block: usize) -> &mut [f64] {
        let cc = self.width * self.width;
        &mut self.params[block * cc..(block + 1) * cc]
    }

    /// Unscaled attention output at the feature token.
    pub fn attend(&self, f: &[f64], weights: &ClassifierWeights) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let params = g.constant(Tensor::vector(self.params.clone()));
        let fnode = g.constant(Tensor::vector(f.to_vec()));
        let wnode = g.constant(weights.to_tensor());
        let out = attention_output(&mut g, self.width, params, fnode, wnode, weights)?;
        Ok(g.value(out).data().to_vec())
    }

    fn check(&self, f: &[f64], weights: &ClassifierWeights) -> Result<()> {
        if weights.dim() != self.width {
            return Err(Error::DimensionMismatch {
                context: "attention width vs classifier dim",
                expected: self.width,
                actual: weights.dim(),
            });
        }
        if f.len() != self.width {
            return Err(Error::DimensionMismatch {
                context: "attention width vs feature",
                expected: self.width,
                actual: f.len(),
            });
        }
        Ok(())
    }
}

/// Canonical token order for the weight rows so that the result does not
/// depend on class order, down to the last bit.
fn canonical_order(weights: &ClassifierWeights) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.num_classes()).collect();
    order.sort_by(|&a, &b| {
        weights
            .row(a)
            .iter()
            .zip(weights.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// Builds the attention forward pass and returns the first token's output.
fn attention_output(
    g: &mut Graph,
    width: usize,
    params: NodeId,
    f: NodeId,
    weights: NodeId,
    host: &ClassifierWeights,
) -> Result<NodeId> {
    let c = width;
    let cc = c * c;
    let k = host.num_classes();
    let order = canonical_order(host);
    let flat_w = g.reshape(weights, Shape::Vector(k * c))?;
    let gather: Vec<usize> = order.iter().flat_map(|&r| (r * c)..(r * c + c)).collect();
    let w_tokens = g.gather(flat_w, &gather)?;
    let tokens = g.concat(&[f, w_tokens])?;
    let x = g.reshape(tokens, Shape::Matrix(k + 1, c))?;

    let mut proj = [params; PROJECTIONS];
    for (block, slot) in proj.iter_mut().enumerate() {
        let flat = g.slice(params, block * cc, cc)?;
        *slot = g.reshape(flat, Shape::Matrix(c, c))?;
    }
    let [wq, wk, wv, wo] = proj;

    let xq = g.matmul(x, wq)?;
    let q0 = g.row(xq, 0)?;
    let keys = g.matmul(x, wk)?;
    let raw = g.matvec(keys, q0)?;
    let scores = g.scale(raw, 1.0 / (c as f64).sqrt());
    let lse = g.log_sum_exp(scores)?;
    let shifted = g.sub(scores, lse)?;
    let attn = g.exp(shifted);
    let values = g.matmul(x, wv)?;
    let values_t = g.transpose(values)?;
    let context = g.matvec(values_t, attn)?;
    let wo_t = g.transpose(wo)?;
    Ok(g.matvec(wo_t, context)?)
}

/// `w^v` from the generator's output at the feature token, rescaled to the
/// magnitude policy.
pub fn make_virtual_weight_attention(
    gen: &AttentionGenerator,
    f: &[f64],
    weights: &ClassifierWeights,
    policy: MagnitudePolicy,
) -> Result<VirtualWeight> {
    gen.check(f, weights)?;
    let magnitude = policy.magnitude(weights)?;
    let out = gen.attend(f, weights)?;
    VirtualWeight::from_direction(&out, magnitude, WeightOrigin::AttentionGenerator)
}

/// VC-CE on a confident sample with `PC = {label}`, differentiable in the
/// generator parameters only. Classifier weights enter as a constant.
pub fn generator_objective(
    gen: &AttentionGenerator,
    sample: &ConfidentSample,
    weights: &ClassifierWeights,
    policy: MagnitudePolicy,
) -> Result<(Graph, GeneratorObjective)> {
    gen.check(&sample.teacher_feature, weights)?;
    gen.check(&sample.feature, weights)?;
    let k = weights.num_classes();
    let pc = PotentialCategorySet::singleton(sample.label, k, PcSource::Label)?;
    let magnitude = policy.magnitude(weights)?;

    let mut g = Graph::new();
    let params = g.leaf(Tensor::vector(gen.params.clone()));
    let wnode = g.constant(weights.to_tensor());
    let ft = g.constant(Tensor::vector(sample.teacher_feature.clone()));
    let f = g.constant(Tensor::vector(sample.feature.clone()));

    let out = attention_output(&mut g, gen.width, params, ft, wnode, weights)?;
    let norm = g.norm2(out);
    if g.scalar_value(norm) == Some(0.0) {
        return Err(Error::ZeroNormFeature);
    }
    let unit = g.div(out, norm)?;
    let wv = g.scale(unit, magnitude);
    let lv = g.dot(f, wv)?;
    let class_logits = g.matvec(wnode, f)?;
    let ext = extend_with_logit(&mut g, lv, class_logits, k)?;
    let loss = vc_ce_loss(&mut g, &ext, &pc, None)?;
    Ok((
        g,
        GeneratorObjective {
            params,
            weights: wnode,
            loss,
        },
    ))
}

/// One plain gradient step on the generator. Returns the loss before the step.
pub fn train_attention_generator_step(
    gen: &mut AttentionGenerator,
    sample: &ConfidentSample,
    weights: &ClassifierWeights,
    policy: MagnitudePolicy,
    learning_rate: f64,
) -> Result<f64> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::invalid(
            "learning_rate",
            format!("must be positive, got {learning_rate}"),
        ));
    }
    let (g, obj) = generator_objective(gen, sample, weights, policy)?;
    let loss = g.scalar_value(obj.loss).unwrap_or(f64::NAN);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "generator loss",
            step: 0,
        });
    }
    let grads = g.backward(obj.loss)?;
    let grad = grads.wrt(obj.params)?.data();
    for (p, d) in gen.params.iter_mut().zip(grad) {
        *p -= learning_rate * d;
    }
    Ok(loss)
}
