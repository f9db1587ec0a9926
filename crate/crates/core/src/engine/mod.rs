//! Teacher-student training with virtual-category handling of confusing
//! pseudo labels.
//!
//! Both trainers follow the same loop: the teacher labels weakly perturbed
//! unlabelled units, each unit is banded by confidence and routed to a
//! potential-category policy, and the student is trained on labelled data
//! plus `beta` times the unlabelled loss. The teacher only ever moves by
//! [`ema_update`].

mod det;
mod model;
mod seg;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, ce_loss, softmax, ClassifierWeights};
use crate::diffcore::{Graph, NodeId, Shape, Tensor};
use crate::error::{Error, Result};
use crate::pcset::{Band, PolicyConfig};
use crate::synthdata::{mix_seed, rng_for, Strength, ViewParams};
use crate::vclearn::{
    cosine_sim_loss, extend_with, make_virtual_weight_attention, make_virtual_weight_normalized, neg_loss,
    train_attention_generator_step, vc_ce_loss, vc_mse_loss, AttentionGenerator, ConfidentSample, MagnitudePolicy,
    PotentialCategorySet, VirtualWeight,
};

pub use det::{DetEval, DetTrainer};
pub use model::{
    bn_update, ema_update, forward, sgd_step, ForwardOut, LayerStats, ModelParams, ModelShape, Norm, NormStatsBank,
    Phase, SgdConfig, SgdState,
};
pub use seg::{SegEval, SegTrainer};

/// What the unlabelled loss does with a confusing unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossForm {
    VcCe,
    VcMse,
    Neg,
    Cosine,
    /// Train on every potential label of the unit with equal weight.
    BaselineKeep,
    /// Drop the unit.
    BaselineDiscard,
}

impl LossForm {
    pub fn uses_virtual_weight(&self) -> bool {
        matches!(self, LossForm::VcCe | LossForm::VcMse | LossForm::Cosine)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightGen {
    Normalized,
    Attention,
}

/// Confidence thresholds and the unlabelled loss weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Above this the pseudo label is fully trusted.
    pub t: f64,
    /// Below this the pseudo label is discarded. Without a floor every
    /// untrusted unit is discarded.
    pub t_low: Option<f64>,
    pub beta: f64,
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(Error::invalid("t", format!("must lie in (0, 1], got {}", self.t)));
        }
        if let Some(lo) = self.t_low {
            if !(0.0..self.t).contains(&lo) {
                return Err(Error::invalid("t_low", format!("need 0 <= t_low < t, got {lo}")));
            }
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid(
                "beta",
                format!("must be non-negative, got {}", self.beta),
            ));
        }
        Ok(())
    }
}

/// Bands a probability vector by its maximum.
pub fn filter_pseudo(probs: &[f64], thr: &Thresholds) -> Band {
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > thr.t {
        Band::Trusted
    } else if thr.t_low.is_some_and(|lo| max >= lo) {
        Band::Retained
    } else {
        Band::Discarded
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub policy: PolicyConfig,
    pub loss_form: LossForm,
    /// Focal exponent for the VC-CE form; `None` is plain cross-entropy.
    pub focal_gamma: Option<f64>,
    pub weight_gen: WeightGen,
    pub magnitude: MagnitudePolicy,
    pub thresholds: Thresholds,
    pub ema_momentum: f64,
    pub bn_momentum: f64,
    pub optimizer: SgdConfig,
    pub hidden: usize,
    pub batch_labelled: usize,
    pub batch_unlabelled: usize,
    /// Supervised-only iterations before the teacher is initialised from
    /// the student.
    pub burn_in: usize,
    /// Total iterations including burn-in.
    pub iterations: usize,
    pub eval_every: usize,
    pub t_loc: f64,
    pub generator_lr: f64,
    pub views: ViewParams,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self::segmentation()
    }
}

impl EngineConfig {
    pub fn segmentation() -> Self {
        EngineConfig {
            policy: PolicyConfig::default(),
            loss_form: LossForm::VcCe,
            focal_gamma: None,
            weight_gen: WeightGen::Normalized,
            magnitude: MagnitudePolicy::MinWeightNorm,
            thresholds: Thresholds {
                t: 0.95,
                t_low: Some(0.6),
                beta: 1.0,
            },
            ema_momentum: 0.9996,
            bn_momentum: 0.5,
            optimizer: SgdConfig {
                lr: 0.001,
                weight_decay: 1e-4,
                momentum: 0.9,
            },
            hidden: 32,
            batch_labelled: 16,
            batch_unlabelled: 64,
            burn_in: 100,
            iterations: 400,
            eval_every: 50,
            t_loc: 0.05,
            generator_lr: 0.01,
            views: ViewParams::default(),
            seed: 0,
        }
    }

    pub fn detection() -> Self {
        EngineConfig {
            policy: PolicyConfig {
                policy: crate::pcset::Policy::Temporal,
                ..PolicyConfig::default()
            },
            magnitude: MagnitudePolicy::Constant(3.5),
            thresholds: Thresholds {
                t: 0.7,
                t_low: None,
                beta: 4.0,
            },
            optimizer: SgdConfig {
                lr: 0.01,
                weight_decay: 0.02,
                momentum: 0.9,
            },
            batch_labelled: 4,
            batch_unlabelled: 8,
            ..Self::segmentation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.thresholds.validate()?;
        self.optimizer.validate()?;
        self.views.validate()?;
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::invalid(
                "ema_momentum",
                format!("must lie in [0, 1), got {}", self.ema_momentum),
            ));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::invalid(
                "bn_momentum",
                format!("must lie in (0, 1], got {}", self.bn_momentum),
            ));
        }
        if let Some(gamma) = self.focal_gamma {
            if !(gamma >= 0.0) || !gamma.is_finite() {
                return Err(Error::invalid(
                    "focal_gamma",
                    format!("must be non-negative, got {gamma}"),
                ));
            }
        }
        if let MagnitudePolicy::Constant(c) = self.magnitude {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::InvalidMagnitude(c));
            }
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden", "must be positive"));
        }
        if self.batch_labelled == 0 {
            return Err(Error::EmptyLabelledBatch);
        }
        if self.batch_unlabelled == 0 {
            return Err(Error::invalid("batch_unlabelled", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every", "must be positive"));
        }
        if !(self.t_loc > 0.0) || !self.t_loc.is_finite() {
            return Err(Error::invalid("t_loc", format!("must be positive, got {}", self.t_loc)));
        }
        if !(self.generator_lr > 0.0) || !self.generator_lr.is_finite() {
            return Err(Error::invalid(
                "generator_lr",
                format!("must be positive, got {}", self.generator_lr),
            ));
        }
        Ok(())
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iter: usize,
    pub loss_labelled: f64,
    /// Sum of VC-form terms only, already divided by the unlabelled batch.
    pub loss_vc: f64,
    /// Confusing units over units that passed the noise floor.
    pub confusing_ratio: f64,
    /// Agreement of the teacher's pseudo labels with ground truth over units
    /// that passed the noise floor.
    pub pseudo_accuracy: f64,
    pub eval_metric: Option<f64>,
    /// Units that passed the noise floor.
    pub units_kept: usize,
    pub units_confusing: usize,
    /// Unlabelled units that contributed a loss term.
    pub units_contributing: usize,
}

impl StepMetrics {
    fn supervised(iter: usize, loss_labelled: f64) -> Self {
        StepMetrics {
            iter,
            loss_labelled,
            loss_vc: 0.0,
            confusing_ratio: 0.0,
            pseudo_accuracy: 0.0,
            eval_metric: None,
            units_kept: 0,
            units_confusing: 0,
            units_contributing: 0,
        }
    }
}

/// Running totals over the unlabelled units of one step.
#[derive(Default)]
struct UnitTally {
    kept: usize,
    confusing: usize,
    correct: usize,
    contributing: usize,
}

impl UnitTally {
    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    fn into_metrics(self, iter: usize, loss_labelled: f64, loss_vc: f64) -> StepMetrics {
        StepMetrics {
            iter,
            loss_labelled,
            loss_vc,
            confusing_ratio: Self::ratio(self.confusing, self.kept),
            pseudo_accuracy: Self::ratio(self.correct, self.kept),
            eval_metric: None,
            units_kept: self.kept,
            units_confusing: self.confusing,
            units_contributing: self.contributing,
        }
    }
}

fn check_finite(value: f64, what: &'static str, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { what, step })
    }
}

/// A teacher-student pair with its own statistics, optimiser state and
/// optional weight generator.
#[derive(Clone, Debug)]
struct Pair {
    student: ModelParams,
    teacher: ModelParams,
    student_bank: NormStatsBank,
    teacher_bank: NormStatsBank,
    sgd: SgdState,
    generator: Option<AttentionGenerator>,
}

impl Pair {
    fn new(shape: ModelShape, cfg: &EngineConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_for(&[seed, 0x5EED]);
        let student = ModelParams::init(shape, &mut rng)?;
        let bank = NormStatsBank::for_shape(&shape, cfg.bn_momentum)?;
        let generator = match cfg.weight_gen {
            WeightGen::Normalized => None,
            WeightGen::Attention => Some(AttentionGenerator::new(shape.hidden, GENERATOR_INIT_SCALE, &mut rng)?),
        };
        Ok(Pair {
            teacher: student.clone(),
            student,
            teacher_bank: bank.clone(),
            student_bank: bank,
            sgd: SgdState::default(),
            generator,
        })
    }

    /// Teacher becomes an exact copy of the student, statistics included.
    fn sync_teacher(&mut self) {
        self.teacher = self.student.clone();
        self.teacher_bank = self.student_bank.clone();
    }

    fn ema(&mut self, m: f64) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, m)
    }

    fn virtual_weight(
        &self,
        cfg: &EngineConfig,
        teacher_feature: &[f64],
        weights: &ClassifierWeights,
    ) -> Result<Option<VirtualWeight>> {
        let made = match (&self.generator, cfg.weight_gen) {
            (Some(gen), WeightGen::Attention) => {
                make_virtual_weight_attention(gen, teacher_feature, weights, cfg.magnitude)
            }
            _ => make_virtual_weight_normalized(teacher_feature, weights, cfg.magnitude),
        };
        match made {
            Ok(wv) => Ok(Some(wv)),
            Err(Error::ZeroNormFeature) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// A few plain gradient steps on the generator from confident units.
    fn train_generator(&mut self, cfg: &EngineConfig, samples: &[ConfidentSample]) -> Result<()> {
        let Some(gen) = self.generator.as_mut() else {
            return Ok(());
        };
        let weights = self.student.classifier()?;
        for s in samples.iter().take(GENERATOR_SAMPLES_PER_STEP) {
            match train_attention_generator_step(gen, s, &weights, cfg.magnitude, cfg.generator_lr) {
                Ok(_) | Err(Error::ZeroNormFeature) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

const GENERATOR_INIT_SCALE: f64 = 0.1;
const GENERATOR_SAMPLES_PER_STEP: usize = 4;

/// Draws batches by walking a reshuffled permutation of `0..n`.
#[derive(Clone, Debug)]
struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl EpochSampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        EpochSampler {
            order: (0..n).collect(),
            cursor: n,
            rng,
            epoch: 0,
        }
    }

    /// Next `count` indices; an empty pool yields an empty batch.
    fn next_batch(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < count {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Values of one gradient-free forward pass.
struct Inference {
    probs: Vec<Vec<f64>>,
    features: Vec<Vec<f64>>,
    regression: Option<Vec<[f64; 4]>>,
    batch_stats: Vec<LayerStats>,
}

impl Inference {
    fn labels(&self) -> Vec<usize> {
        self.probs.iter().map(|p| argmax(p)).collect()
    }
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| t.row(i).expect("row in range").to_vec())
        .collect()
}

fn infer(params: &ModelParams, rows: &[Vec<f64>], norm: Norm<'_>) -> Result<Inference> {
    let shape = params.shape();
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(params.as_flat().to_vec()));
    let x = g.constant(Tensor::from_rows(rows)?);
    let out = forward(&mut g, p, &shape, x, norm)?;
    let probs = rows_of(g.value(out.logits)).iter().map(|l| softmax(l)).collect();
    let features = rows_of(g.value(out.features));
    let regression = out.regression.map(|r| {
        rows_of(g.value(r))
            .into_iter()
            .map(|v| [v[0], v[1], v[2], v[3]])
            .collect()
    });
    Ok(Inference {
        probs,
        features,
        regression,
        batch_stats: out.batch_stats,
    })
}

/// The unlabelled term of one confusing unit, or `None` when the form
/// contributes nothing for it. The flag marks VC-form terms.
#[allow(clippy::too_many_arguments)]
fn confusing_unit_loss(
    g: &mut Graph,
    cfg: &EngineConfig,
    feature: NodeId,
    logits: NodeId,
    weights: NodeId,
    wv: Option<&VirtualWeight>,
    pc: &PotentialCategorySet,
) -> Result<Option<(NodeId, bool)>> {
    let num_classes = pc_num_classes(g, logits)?;
    let term = match cfg.loss_form {
        LossForm::BaselineDiscard => return Ok(None),
        LossForm::BaselineKeep => return Ok(Some((keep_all_loss(g, logits, pc)?, false))),
        LossForm::Neg if pc.len() >= num_classes => return Ok(None),
        LossForm::Neg => neg_loss(g, logits, pc)?,
        LossForm::VcCe | LossForm::VcMse | LossForm::Cosine => {
            let Some(wv) = wv else {
                return Ok(None);
            };
            match cfg.loss_form {
                LossForm::VcCe => {
                    let ext = extend_with(g, feature, logits, num_classes, wv)?;
                    vc_ce_loss(g, &ext, pc, cfg.focal_gamma)?
                }
                LossForm::VcMse => {
                    let ext = extend_with(g, feature, logits, num_classes, wv)?;
                    vc_mse_loss(g, &ext, pc)?
                }
                _ => match cosine_sim_loss(g, feature, wv, weights, pc) {
                    Ok(node) => node,
                    Err(Error::ZeroNormFeature) => return Ok(None),
                    Err(e) => return Err(e),
                },
            }
        }
    };
    Ok(Some((term, true)))
}

/// Cross-entropy against the uniform distribution over the PC members, i.e.
/// every potential label retained with equal weight. A singleton PC gives
/// plain cross-entropy on that label.
fn keep_all_loss(g: &mut Graph, logits: NodeId, pc: &PotentialCategorySet) -> Result<NodeId> {
    let terms = pc
        .classes()
        .map(|c| ce_loss(g, logits, c))
        .collect::<Result<Vec<_>>>()?;
    let total = sum_nodes(g, &terms)?.ok_or(Error::EmptyPcSet)?;
    Ok(g.scale(total, 1.0 / terms.len() as f64))
}

fn pc_num_classes(g: &Graph, logits: NodeId) -> Result<usize> {
    match g.shape(logits) {
        Shape::Vector(k) => Ok(k),
        other => Err(Error::invalid("unit logits", format!("expected a vector, got {other}"))),
    }
}

/// Sum of scalar nodes, or `None` for an empty list.
fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<Option<NodeId>> {
    if nodes.is_empty() {
        return Ok(None);
    }
    let stacked = g.concat(nodes)?;
    Ok(Some(g.sum(stacked)))
}

fn view_seed(run_seed: u64, iter: usize, unit: u64, strength: Strength) -> u64 {
    mix_seed(&[run_seed, 0x71E3, iter as u64, unit, strength as u64])
}
