use serde::{Deserialize, Serialize};

use super::{
    bn_update, check_finite, confusing_unit_loss, filter_pseudo, forward, infer, sgd_step, sum_nodes, view_seed,
    EngineConfig, EpochSampler, Inference, ModelParams, ModelShape, Norm, Pair, Phase, StepMetrics, UnitTally,
};
use crate::classifier::ce_loss;
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, compute_miou};
use crate::pcset::{pcset_crossmodel_pixel, pcset_mutual, pcset_top2, Band, Policy, Route};
use crate::synthdata::{perturb, rng_for, GridDataset, Strength, Unit};
use crate::vclearn::{ConfidentSample, PcSource, PotentialCategorySet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEval {
    pub miou: f64,
    pub accuracy: f64,
}

/// What the unlabelled loss does with one unit.
#[derive(Clone, Debug, PartialEq)]
enum Plan {
    Skip,
    Pseudo { label: usize, trusted: bool },
    Confusing(PotentialCategorySet),
}

/// Gradient-free passes of one pair on the weak unlabelled views.
struct LabelPass {
    teacher: Inference,
    teacher_labels: Vec<usize>,
    student_labels: Vec<usize>,
    student_features: Vec<Vec<f64>>,
}

/// The unlabelled half of a training forward pass.
struct UnlabelledInput<'a> {
    strong: &'a [Vec<f64>],
    plans: &'a [Plan],
    teacher_features: &'a [Vec<f64>],
}

struct TrainOutcome {
    loss_l: f64,
    loss_vc: f64,
    contributing: usize,
}

/// Teacher-student training on a per-pixel grid task.
#[derive(Clone, Debug)]
pub struct SegTrainer {
    cfg: EngineConfig,
    data: GridDataset,
    main: Pair,
    /// Second independently initialised pair for the cross-model policy.
    peer: Option<Pair>,
    /// Last teacher label of each unlabelled unit.
    history: Vec<Option<usize>>,
    labelled: EpochSampler,
    unlabelled: EpochSampler,
    iter: usize,
}

impl SegTrainer {
    pub fn new(cfg: EngineConfig, data: GridDataset) -> Result<Self> {
        cfg.validate()?;
        let Some(first) = data.labelled.first() else {
            return Err(Error::EmptyLabelledBatch);
        };
        let shape = ModelShape {
            input_dim: first.features.len(),
            hidden: cfg.hidden,
            num_classes: data.num_classes,
            regression: false,
        };
        let main = Pair::new(shape, &cfg, cfg.seed)?;
        let peer = match cfg.policy.policy {
            Policy::Cross => Some(Pair::new(shape, &cfg, cfg.seed ^ 0xC055)?),
            _ => None,
        };
        Ok(SegTrainer {
            history: vec![None; data.unlabelled.len()],
            labelled: EpochSampler::new(data.labelled.len(), rng_for(&[cfg.seed, 0x1AB])),
            unlabelled: EpochSampler::new(data.unlabelled.len(), rng_for(&[cfg.seed, 0x0B1])),
            cfg,
            data,
            main,
            peer,
            iter: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.cfg.iterations
    }

    pub fn student(&self) -> &ModelParams {
        &self.main.student
    }

    pub fn teacher(&self) -> &ModelParams {
        &self.main.teacher
    }

    /// Student predictions on the test grid, using label-phase statistics.
    pub fn predict_test(&self) -> Result<Vec<usize>> {
        let rows: Vec<Vec<f64>> = self.data.test.iter().map(|u| u.features.clone()).collect();
        let bank = self.main.student_bank.group(Phase::Label);
        Ok(infer(&self.main.student, &rows, Norm::Running(bank))?.labels())
    }

    pub fn evaluate(&self) -> Result<SegEval> {
        let pred = self.predict_test()?;
        let gt: Vec<usize> = self.data.test.iter().map(|u| u.label).collect();
        Ok(SegEval {
            miou: compute_miou(&pred, &gt, self.data.num_classes)?,
            accuracy: accuracy(&pred, &gt)?,
        })
    }

    /// Runs every remaining iteration, handing each record to `sink`.
    pub fn run<F: FnMut(&StepMetrics) -> Result<()>>(&mut self, mut sink: F) -> Result<SegEval> {
        while !self.is_done() {
            let m = self.step()?;
            sink(&m)?;
        }
        self.evaluate()
    }

    /// One training iteration. Evaluation is attached every `eval_every`
    /// iterations and at the last one.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let iter = self.iter;
        let lab = self.labelled.next_batch(self.cfg.batch_labelled);
        let unl = self.unlabelled.next_batch(self.cfg.batch_unlabelled);
        let supervised = iter < self.cfg.burn_in || self.cfg.thresholds.beta == 0.0 || unl.is_empty();
        let mut metrics = if supervised {
            self.supervised_step(&lab, &unl)?
        } else {
            self.semi_supervised_step(&lab, &unl)?
        };
        self.advance_teachers()?;
        self.iter += 1;
        if self.iter % self.cfg.eval_every == 0 || self.iter == self.cfg.iterations {
            metrics.eval_metric = Some(check_finite(self.evaluate()?.miou, "eval metric", iter)?);
        }
        Ok(metrics)
    }

    /// Teacher copy at the end of burn-in, EMA afterwards.
    fn advance_teachers(&mut self) -> Result<()> {
        let m = self.cfg.ema_momentum;
        for pair in std::iter::once(&mut self.main).chain(self.peer.as_mut()) {
            if self.iter + 1 == self.cfg.burn_in {
                pair.sync_teacher();
            } else if self.iter >= self.cfg.burn_in {
                pair.ema(m)?;
            }
        }
        Ok(())
    }

    fn views(&self, units: &[&Unit], strength: Strength) -> Vec<Vec<f64>> {
        units
            .iter()
            .map(|u| {
                let seed = view_seed(self.cfg.seed, self.iter, u.id, strength);
                perturb(&u.features, strength, &self.cfg.views, seed)
            })
            .collect()
    }

    fn labelled_batch(&self, lab: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
        let units: Vec<&Unit> = lab.iter().map(|&i| &self.data.labelled[i]).collect();
        (
            self.views(&units, Strength::Weak),
            units.iter().map(|u| u.label).collect(),
        )
    }

    /// Labelled loss only. The student still sees the weak unlabelled views
    /// so its label-phase statistics follow the data it is evaluated on.
    fn supervised_step(&mut self, lab: &[usize], unl: &[usize]) -> Result<StepMetrics> {
        let (x_l, y_l) = self.labelled_batch(lab);
        let units: Vec<&Unit> = unl.iter().map(|&i| &self.data.unlabelled[i]).collect();
        let weak = self.views(&units, Strength::Weak);
        let (cfg, iter) = (&self.cfg, self.iter);
        let mut loss_l = 0.0;
        for (k, pair) in std::iter::once(&mut self.main).chain(self.peer.as_mut()).enumerate() {
            if !weak.is_empty() {
                let s = infer(&pair.student, &weak, Norm::Batch)?;
                bn_update(&mut pair.student_bank, &s.batch_stats, Phase::Label)?;
            }
            let out = train_pair(pair, cfg, iter, &x_l, &y_l, None)?;
            if k == 0 {
                loss_l = out.loss_l;
            }
        }
        Ok(StepMetrics::supervised(iter, loss_l))
    }

    fn label_pass(pair: &mut Pair, weak: &[Vec<f64>]) -> Result<LabelPass> {
        let teacher = infer(&pair.teacher, weak, Norm::Batch)?;
        bn_update(&mut pair.teacher_bank, &teacher.batch_stats, Phase::Label)?;
        let student = infer(&pair.student, weak, Norm::Batch)?;
        bn_update(&mut pair.student_bank, &student.batch_stats, Phase::Label)?;
        Ok(LabelPass {
            teacher_labels: teacher.labels(),
            student_labels: student.labels(),
            student_features: student.features,
            teacher,
        })
    }

    /// Bands and routes every unit of the batch against one pair's teacher.
    fn route(
        &self,
        unl: &[usize],
        pass: &LabelPass,
        other_teacher: Option<&[usize]>,
    ) -> Result<(Vec<Plan>, UnitTally)> {
        let k = self.data.num_classes;
        let mut tally = UnitTally::default();
        let mut plans = Vec::with_capacity(unl.len());
        for (j, &u) in unl.iter().enumerate() {
            let probs = &pass.teacher.probs[j];
            let y_t = pass.teacher_labels[j];
            let band = filter_pseudo(probs, &self.cfg.thresholds);
            if band != Band::Discarded {
                tally.kept += 1;
                tally.correct += usize::from(y_t == self.data.unlabelled[u].label);
            }
            let policy = match self.cfg.policy.route(band) {
                Route::Discard => {
                    plans.push(Plan::Skip);
                    continue;
                }
                Route::Policy(p) => p,
            };
            let pc = match policy {
                Policy::Top2 => pcset_top2(probs)?,
                Policy::Mutual => pcset_mutual(y_t, pass.student_labels[j], k)?,
                Policy::Temporal => match self.history[u] {
                    Some(last) => PotentialCategorySet::new([y_t, last], k, PcSource::Temporal)?,
                    None => PotentialCategorySet::singleton(y_t, k, PcSource::Temporal)?,
                },
                Policy::Cross => {
                    let other = other_teacher.ok_or_else(|| Error::invalid("policy", "cross-model needs a peer"))?;
                    pcset_crossmodel_pixel(y_t, other[j], k)?
                }
            };
            if pc.is_confusing() {
                tally.confusing += 1;
                plans.push(Plan::Confusing(pc));
            } else {
                plans.push(Plan::Pseudo {
                    label: y_t,
                    trusted: band == Band::Trusted,
                });
            }
        }
        Ok((plans, tally))
    }

    fn semi_supervised_step(&mut self, lab: &[usize], unl: &[usize]) -> Result<StepMetrics> {
        let iter = self.iter;
        let (x_l, y_l) = self.labelled_batch(lab);
        let units: Vec<&Unit> = unl.iter().map(|&i| &self.data.unlabelled[i]).collect();
        let weak = self.views(&units, Strength::Weak);
        let strong = self.views(&units, Strength::Strong);

        let main_pass = Self::label_pass(&mut self.main, &weak)?;
        let peer_pass = match self.peer.as_mut() {
            Some(p) => Some(Self::label_pass(p, &weak)?),
            None => None,
        };
        let (plans, tally) = self.route(unl, &main_pass, peer_pass.as_ref().map(|p| &p.teacher_labels[..]))?;
        let peer_plans = match &peer_pass {
            Some(pp) => Some(self.route(unl, pp, Some(&main_pass.teacher_labels))?.0),
            None => None,
        };
        for (j, &u) in unl.iter().enumerate() {
            self.history[u] = Some(main_pass.teacher_labels[j]);
        }

        let cfg = &self.cfg;
        let input = UnlabelledInput {
            strong: &strong,
            plans: &plans,
            teacher_features: &main_pass.teacher.features,
        };
        let out = train_pair(&mut self.main, cfg, iter, &x_l, &y_l, Some(input))?;
        self.main.train_generator(cfg, &confident_samples(&plans, &main_pass))?;
        if let (Some(peer), Some(pp), Some(plans)) = (self.peer.as_mut(), &peer_pass, &peer_plans) {
            let input = UnlabelledInput {
                strong: &strong,
                plans,
                teacher_features: &pp.teacher.features,
            };
            train_pair(peer, cfg, iter, &x_l, &y_l, Some(input))?;
            peer.train_generator(cfg, &confident_samples(plans, pp))?;
        }
        let mut tally = tally;
        tally.contributing = out.contributing;
        Ok(tally.into_metrics(iter, out.loss_l, out.loss_vc))
    }
}

/// Trusted, non-confusing units as generator training data.
fn confident_samples(plans: &[Plan], pass: &LabelPass) -> Vec<ConfidentSample> {
    plans
        .iter()
        .enumerate()
        .filter_map(|(j, p)| match p {
            Plan::Pseudo { label, trusted: true } => Some(ConfidentSample {
                feature: pass.student_features[j].clone(),
                teacher_feature: pass.teacher.features[j].clone(),
                label: *label,
            }),
            _ => None,
        })
        .collect()
}

/// One optimiser step of `pair.student` on `L_l + beta * L_u`.
fn train_pair(
    pair: &mut Pair,
    cfg: &EngineConfig,
    iter: usize,
    x_l: &[Vec<f64>],
    y_l: &[usize],
    unlabelled: Option<UnlabelledInput<'_>>,
) -> Result<TrainOutcome> {
    if x_l.is_empty() {
        return Err(Error::EmptyLabelledBatch);
    }
    let shape = pair.student.shape();
    let weights = pair.student.classifier()?;
    let mut rows: Vec<Vec<f64>> = x_l.to_vec();
    if let Some(u) = &unlabelled {
        rows.extend_from_slice(u.strong);
    }

    let mut g = Graph::new();
    let p = g.leaf(Tensor::vector(pair.student.as_flat().to_vec()));
    let x = g.constant(Tensor::from_rows(&rows)?);
    let out = forward(&mut g, p, &shape, x, Norm::Batch)?;
    bn_update(&mut pair.student_bank, &out.batch_stats, Phase::Train)?;

    let mut labelled_terms = Vec::with_capacity(x_l.len());
    for (i, &y) in y_l.iter().enumerate() {
        let row = g.row(out.logits, i)?;
        labelled_terms.push(ce_loss(&mut g, row, y)?);
    }
    let sum_l = sum_nodes(&mut g, &labelled_terms)?.expect("non-empty labelled batch");
    let loss_l = g.scale(sum_l, 1.0 / x_l.len() as f64);
    let mut total = loss_l;

    let mut loss_vc = 0.0;
    let mut contributing = 0;
    if let Some(u) = unlabelled {
        let b_u = u.plans.len() as f64;
        let mut terms = Vec::new();
        for (j, plan) in u.plans.iter().enumerate() {
            let r = x_l.len() + j;
            match plan {
                Plan::Skip => {}
                Plan::Pseudo { label, .. } => {
                    let row = g.row(out.logits, r)?;
                    terms.push(ce_loss(&mut g, row, *label)?);
                    contributing += 1;
                }
                Plan::Confusing(pc) => {
                    let wv = if cfg.loss_form.uses_virtual_weight() {
                        pair.virtual_weight(cfg, &u.teacher_features[j], &weights)?
                    } else {
                        None
                    };
                    let logits = g.row(out.logits, r)?;
                    let feature = g.row(out.features, r)?;
                    if let Some((term, is_vc)) =
                        confusing_unit_loss(&mut g, cfg, feature, logits, out.weights, wv.as_ref(), pc)?
                    {
                        if is_vc {
                            loss_vc += g.scalar_value(term).unwrap_or(f64::NAN);
                        }
                        terms.push(term);
                        contributing += 1;
                    }
                }
            }
        }
        loss_vc /= b_u;
        if let Some(sum_u) = sum_nodes(&mut g, &terms)? {
            let weighted = g.scale(sum_u, cfg.thresholds.beta / b_u);
            total = g.add(total, weighted)?;
        }
    }

    let loss_l_value = check_finite(g.scalar_value(loss_l).unwrap_or(f64::NAN), "labelled loss", iter)?;
    check_finite(loss_vc, "vc loss", iter)?;
    check_finite(g.scalar_value(total).unwrap_or(f64::NAN), "total loss", iter)?;
    let grads = g.backward(total)?;
    let grad = grads.wrt(p)?.data().to_vec();
    sgd_step(pair.student.as_flat_mut(), &grad, &mut pair.sgd, &cfg.optimizer).map_err(|e| match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, step: iter },
        other => other,
    })?;
    Ok(TrainOutcome {
        loss_l: loss_l_value,
        loss_vc,
        contributing,
    })
}
