use serde::{Deserialize, Serialize};

use super::{
    bn_update, check_finite, confusing_unit_loss, filter_pseudo, forward, infer, sgd_step, sum_nodes, view_seed,
    EngineConfig, EpochSampler, Inference, ModelParams, ModelShape, Norm, Pair, Phase, StepMetrics, UnitTally,
};
use crate::boxgeom::{boundary_quality, iou, reg_star_loss, BBox, QualityFlags};
use crate::classifier::{argmax, ce_loss};
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{mean_average_precision, Detection, GroundTruth};
use crate::pcset::{
    match_boxes, pcset_crossmodel, pcset_pairwise_boxes, pcset_temporal, BoxPc, BoxPrediction, Policy, Route,
};
use crate::synthdata::{perturb, rng_for, Scene, SceneDataset, Strength};
use crate::vclearn::{PcSource, PotentialCategorySet};

/// IoU a proposal needs with a pseudo box to inherit its PC set.
const ASSIGN_IOU: f64 = 0.5;
const EVAL_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetEval {
    /// Mean AP at IoU 0.5 over foreground classes.
    pub map50: f64,
    /// Proposal classification accuracy, background included.
    pub accuracy: f64,
}

/// Training signal for one unlabelled proposal.
#[derive(Clone, Debug, PartialEq)]
enum Plan {
    Pseudo(usize),
    Confusing { pc: PotentialCategorySet, label: usize },
}

/// Regression signal for one unlabelled proposal matched to a pseudo pair.
#[derive(Clone, Copy, Debug, PartialEq)]
struct RegPlan {
    target: [f64; 4],
    flags: QualityFlags,
}

/// Proposals of a batch of scenes, flattened.
struct Flat<'a> {
    scenes: Vec<&'a Scene>,
    /// `(scene position, proposal index)` per row.
    rows: Vec<(usize, usize)>,
}

impl<'a> Flat<'a> {
    fn new(scenes: Vec<&'a Scene>) -> Self {
        let rows = scenes
            .iter()
            .enumerate()
            .flat_map(|(s, sc)| (0..sc.proposals.len()).map(move |p| (s, p)))
            .collect();
        Flat { scenes, rows }
    }

    fn proposal(&self, row: usize) -> &'a crate::synthdata::Proposal {
        let (s, p) = self.rows[row];
        &self.scenes[s].proposals[p]
    }
}

struct UnlabelledInput<'a> {
    strong: &'a [Vec<f64>],
    plans: &'a [Plan],
    regression: &'a [Option<RegPlan>],
    teacher_features: &'a [Vec<f64>],
}

struct TrainOutcome {
    loss_l: f64,
    loss_vc: f64,
    contributing: usize,
}

/// Teacher-student training on box proposals of synthetic scenes.
#[derive(Clone, Debug)]
pub struct DetTrainer {
    cfg: EngineConfig,
    data: SceneDataset,
    bg: usize,
    main: Pair,
    peer: Option<Pair>,
    /// Filtered teacher detections from the last visit of each unlabelled scene.
    history: Vec<Option<Vec<BoxPrediction>>>,
    labelled: EpochSampler,
    unlabelled: EpochSampler,
    iter: usize,
}

impl DetTrainer {
    pub fn new(cfg: EngineConfig, data: SceneDataset) -> Result<Self> {
        cfg.validate()?;
        if cfg.policy.policy == Policy::Top2 {
            return Err(Error::invalid(
                "policy",
                "top-2 is confidence based and does not apply to box predictions",
            ));
        }
        let Some(first) = data.labelled.iter().flat_map(|s| s.proposals.first()).next() else {
            return Err(Error::EmptyLabelledBatch);
        };
        let shape = ModelShape {
            input_dim: first.features.len(),
            hidden: cfg.hidden,
            num_classes: data.num_fg + 1,
            regression: true,
        };
        let main = Pair::new(shape, &cfg, cfg.seed)?;
        let peer = match cfg.policy.policy {
            Policy::Cross => Some(Pair::new(shape, &cfg, cfg.seed ^ 0xC055)?),
            _ => None,
        };
        Ok(DetTrainer {
            bg: data.num_fg,
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

    /// Completed passes over the unlabelled scenes since burn-in ended.
    pub fn unlabelled_epoch(&self) -> usize {
        self.unlabelled.epoch.saturating_sub(1)
    }

    pub fn unlabelled_scene_count(&self) -> usize {
        self.data.unlabelled.len()
    }

    pub fn evaluate(&self) -> Result<DetEval> {
        let flat = Flat::new(self.data.test.iter().collect());
        if flat.rows.is_empty() {
            return Ok(DetEval {
                map50: 0.0,
                accuracy: 0.0,
            });
        }
        let rows: Vec<Vec<f64>> = (0..flat.rows.len())
            .map(|r| flat.proposal(r).features.clone())
            .collect();
        let bank = self.main.student_bank.group(Phase::Label);
        let inf = infer(&self.main.student, &rows, Norm::Running(bank))?;
        let regression = inf.regression.as_ref().expect("detection model has a regression head");
        let mut detections = Vec::new();
        let mut correct = 0usize;
        for (r, probs) in inf.probs.iter().enumerate() {
            let p = flat.proposal(r);
            let class = argmax(probs);
            correct += usize::from(class == p.class);
            if class == self.bg {
                continue;
            }
            if let Ok(bbox) = BBox::apply_deltas(&p.bbox, &regression[r]) {
                detections.push(Detection {
                    image: flat.rows[r].0,
                    class,
                    score: probs[class],
                    bbox,
                });
            }
        }
        let truths: Vec<GroundTruth> = flat
            .scenes
            .iter()
            .enumerate()
            .flat_map(|(image, s)| {
                s.objects.iter().map(move |o| GroundTruth {
                    image,
                    class: o.class,
                    bbox: o.bbox,
                })
            })
            .collect();
        Ok(DetEval {
            map50: mean_average_precision(&detections, &truths, self.data.num_fg, EVAL_IOU)?,
            accuracy: correct as f64 / flat.rows.len() as f64,
        })
    }

    pub fn run<F: FnMut(&StepMetrics) -> Result<()>>(&mut self, mut sink: F) -> Result<DetEval> {
        while !self.is_done() {
            let m = self.step()?;
            sink(&m)?;
        }
        self.evaluate()
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let iter = self.iter;
        let lab = self.labelled.next_batch(self.cfg.batch_labelled);
        let in_burn_in = iter < self.cfg.burn_in;
        let unl = if in_burn_in {
            Vec::new()
        } else {
            self.unlabelled.next_batch(self.cfg.batch_unlabelled)
        };
        let mut metrics = if in_burn_in || self.cfg.thresholds.beta == 0.0 || unl.is_empty() {
            self.supervised_step(&lab, &unl)?
        } else {
            self.semi_supervised_step(&lab, &unl)?
        };
        let m = self.cfg.ema_momentum;
        for pair in std::iter::once(&mut self.main).chain(self.peer.as_mut()) {
            if iter + 1 == self.cfg.burn_in {
                pair.sync_teacher();
            } else if iter >= self.cfg.burn_in {
                pair.ema(m)?;
            }
        }
        self.iter += 1;
        if self.iter % self.cfg.eval_every == 0 || self.iter == self.cfg.iterations {
            metrics.eval_metric = Some(check_finite(self.evaluate()?.map50, "eval metric", iter)?);
        }
        Ok(metrics)
    }

    fn views(&self, flat: &Flat<'_>, strength: Strength) -> Vec<Vec<f64>> {
        (0..flat.rows.len())
            .map(|r| {
                let (s, p) = flat.rows[r];
                let unit = flat.scenes[s].id * 4096 + p as u64;
                let seed = view_seed(self.cfg.seed, self.iter, unit, strength);
                perturb(&flat.proposal(r).features, strength, &self.cfg.views, seed)
            })
            .collect()
    }

    fn labelled_targets(&self, flat: &Flat<'_>) -> Result<Vec<(usize, Option<[f64; 4]>)>> {
        Ok((0..flat.rows.len())
            .map(|r| {
                let p = flat.proposal(r);
                (p.class, p.target.map(|t| t.deltas_from(&p.bbox)))
            })
            .collect())
    }

    /// Labelled loss only. Weak unlabelled views, when present, refresh the
    /// label-phase statistics.
    fn supervised_step(&mut self, lab: &[usize], unl: &[usize]) -> Result<StepMetrics> {
        let lab_flat = Flat::new(lab.iter().map(|&i| &self.data.labelled[i]).collect());
        let x_l = self.views(&lab_flat, Strength::Weak);
        let y_l = self.labelled_targets(&lab_flat)?;
        let unl_flat = Flat::new(unl.iter().map(|&i| &self.data.unlabelled[i]).collect());
        let weak_u = self.views(&unl_flat, Strength::Weak);
        let (cfg, iter) = (&self.cfg, self.iter);
        let mut loss_l = 0.0;
        for (k, pair) in std::iter::once(&mut self.main).chain(self.peer.as_mut()).enumerate() {
            let label_rows = if weak_u.is_empty() { &x_l } else { &weak_u };
            let s = infer(&pair.student, label_rows, Norm::Batch)?;
            bn_update(&mut pair.student_bank, &s.batch_stats, Phase::Label)?;
            let out = train_pair(pair, cfg, iter, &x_l, &y_l, None)?;
            if k == 0 {
                loss_l = out.loss_l;
            }
        }
        Ok(StepMetrics::supervised(iter, loss_l))
    }

    /// Filtered detections of one scene. Rows `rows` of `inf` belong to it.
    fn detections(&self, inf: &Inference, flat: &Flat<'_>, rows: std::ops::Range<usize>) -> Vec<BoxPrediction> {
        let regression = inf.regression.as_ref().expect("detection model has a regression head");
        let mut out = Vec::new();
        for r in rows {
            let probs = &inf.probs[r];
            let class = argmax(probs);
            if class == self.bg {
                continue;
            }
            let band = filter_pseudo(probs, &self.cfg.thresholds);
            if self.cfg.policy.route(band) == Route::Discard {
                continue;
            }
            if let Ok(bbox) = BBox::apply_deltas(&flat.proposal(r).bbox, &regression[r]) {
                out.push(BoxPrediction {
                    bbox,
                    class,
                    confidence: probs[class],
                    id: flat.rows[r].1,
                });
            }
        }
        out
    }

    /// Per-scene box sets `(A, B)` and their PC units for one pair. `A` is
    /// always the pair's own filtered teacher detections.
    fn box_units(
        &self,
        scene_slot: usize,
        current: &[BoxPrediction],
        other: &[BoxPrediction],
    ) -> Result<(Vec<BoxPc>, Vec<BoxPrediction>)> {
        let k = self.data.num_fg + 1;
        let thr = self.cfg.policy.iou_threshold;
        Ok(match self.cfg.policy.policy {
            Policy::Temporal => {
                let last = self.history[scene_slot].as_deref();
                let units = pcset_temporal(current, last, thr, self.bg, k)?;
                (units, last.map(<[_]>::to_vec).unwrap_or_default())
            }
            Policy::Mutual => {
                let m = match_boxes(current, other, thr)?;
                (
                    pcset_pairwise_boxes(&m, current, other, self.bg, k, PcSource::Mutual)?,
                    other.to_vec(),
                )
            }
            Policy::Cross => (pcset_crossmodel(current, other, thr, self.bg, k)?, other.to_vec()),
            Policy::Top2 => unreachable!("rejected at construction"),
        })
    }

    fn semi_supervised_step(&mut self, lab: &[usize], unl: &[usize]) -> Result<StepMetrics> {
        let iter = self.iter;
        let lab_flat = Flat::new(lab.iter().map(|&i| &self.data.labelled[i]).collect());
        let x_l = self.views(&lab_flat, Strength::Weak);
        let y_l = self.labelled_targets(&lab_flat)?;
        let flat = Flat::new(unl.iter().map(|&i| &self.data.unlabelled[i]).collect());
        let weak = self.views(&flat, Strength::Weak);
        let strong = self.views(&flat, Strength::Strong);

        let teacher = infer(&self.main.teacher, &weak, Norm::Batch)?;
        bn_update(&mut self.main.teacher_bank, &teacher.batch_stats, Phase::Label)?;
        let student_weak = infer(&self.main.student, &weak, Norm::Batch)?;
        bn_update(&mut self.main.student_bank, &student_weak.batch_stats, Phase::Label)?;
        let peer_teacher = match self.peer.as_mut() {
            Some(p) => {
                let t = infer(&p.teacher, &weak, Norm::Batch)?;
                bn_update(&mut p.teacher_bank, &t.batch_stats, Phase::Label)?;
                let s = infer(&p.student, &weak, Norm::Batch)?;
                bn_update(&mut p.student_bank, &s.batch_stats, Phase::Label)?;
                Some(t)
            }
            None => None,
        };

        let n = flat.rows.len();
        let (mut plans, mut reg) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let (mut peer_plans, mut peer_reg) = (Vec::new(), Vec::new());
        let mut new_history = Vec::with_capacity(flat.scenes.len());
        let mut start = 0;
        for (s, scene) in flat.scenes.iter().enumerate() {
            let rows = start..start + scene.proposals.len();
            start = rows.end;
            let current = self.detections(&teacher, &flat, rows.clone());
            let other = match (self.cfg.policy.policy, &peer_teacher) {
                (Policy::Mutual, _) => self.detections(&student_weak, &flat, rows.clone()),
                (Policy::Cross, Some(pt)) => self.detections(pt, &flat, rows.clone()),
                _ => Vec::new(),
            };
            let (units, b) = self.box_units(unl[s], &current, &other)?;
            let (p, r) = assign(&units, &current, &b, &flat, rows.clone(), self.bg, self.cfg.t_loc)?;
            plans.extend(p);
            reg.extend(r);
            if self.peer.is_some() {
                let (units, b) = self.box_units(unl[s], &other, &current)?;
                let (p, r) = assign(&units, &other, &b, &flat, rows, self.bg, self.cfg.t_loc)?;
                peer_plans.extend(p);
                peer_reg.extend(r);
            }
            new_history.push(current);
        }
        if self.cfg.policy.policy == Policy::Temporal {
            for (&slot, dets) in unl.iter().zip(new_history) {
                self.history[slot] = Some(dets);
            }
        }

        let mut tally = UnitTally::default();
        for (row, plan) in plans.iter().enumerate() {
            tally.kept += 1;
            let label = match plan {
                Plan::Pseudo(c) => *c,
                Plan::Confusing { label, .. } => {
                    tally.confusing += 1;
                    *label
                }
            };
            tally.correct += usize::from(label == flat.proposal(row).class);
        }

        let cfg = &self.cfg;
        let input = UnlabelledInput {
            strong: &strong,
            plans: &plans,
            regression: &reg,
            teacher_features: &teacher.features,
        };
        let out = train_pair(&mut self.main, cfg, iter, &x_l, &y_l, Some(input))?;
        if let (Some(peer), Some(pt)) = (self.peer.as_mut(), &peer_teacher) {
            let input = UnlabelledInput {
                strong: &strong,
                plans: &peer_plans,
                regression: &peer_reg,
                teacher_features: &pt.features,
            };
            train_pair(peer, cfg, iter, &x_l, &y_l, Some(input))?;
        }
        tally.contributing = out.contributing;
        Ok(tally.into_metrics(iter, out.loss_l, out.loss_vc))
    }
}

/// Gives each proposal the PC set of the pseudo unit it overlaps most
/// (IoU at least [`ASSIGN_IOU`], lowest index on ties). Proposals without
/// such a unit are pseudo background. Units backed by both sets also carry a
/// flag-gated regression target towards the `A` box.
fn assign(
    units: &[BoxPc],
    set_a: &[BoxPrediction],
    set_b: &[BoxPrediction],
    flat: &Flat<'_>,
    rows: std::ops::Range<usize>,
    bg: usize,
    t_loc: f64,
) -> Result<(Vec<Plan>, Vec<Option<RegPlan>>)> {
    let mut plans = Vec::with_capacity(rows.len());
    let mut reg = Vec::with_capacity(rows.len());
    for row in rows {
        let proposal = flat.proposal(row);
        let best =
            units
                .iter()
                .map(|u| iou(&proposal.bbox, &u.bbox))
                .enumerate()
                .fold(None::<(usize, f64)>, |acc, (i, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((i, v)),
                });
        let Some((i, _)) = best.filter(|&(_, v)| v >= ASSIGN_IOU) else {
            plans.push(Plan::Pseudo(bg));
            reg.push(None);
            continue;
        };
        let unit = &units[i];
        let label = unit.from_a.map_or(bg, |a| set_a[a].class);
        plans.push(match unit.pc.single() {
            Some(c) => Plan::Pseudo(c),
            None => Plan::Confusing {
                pc: unit.pc.clone(),
                label,
            },
        });
        reg.push(match (unit.from_a, unit.from_b) {
            (Some(a), Some(b)) => {
                let a_box = set_a[a].bbox;
                Some(RegPlan {
                    target: a_box.deltas_from(&proposal.bbox),
                    flags: boundary_quality(&a_box, &set_b[b].bbox, t_loc)?,
                })
            }
            _ => None,
        });
    }
    Ok((plans, reg))
}

fn regression_row(g: &mut Graph, out: Option<NodeId>, row: usize) -> Result<NodeId> {
    let r = out.ok_or_else(|| Error::invalid("model", "detection needs a regression head"))?;
    Ok(g.row(r, row)?)
}

/// One optimiser step on `L_l^cls + L_l^reg + beta * (L_u^cls + L_u^reg*)`.
fn train_pair(
    pair: &mut Pair,
    cfg: &EngineConfig,
    iter: usize,
    x_l: &[Vec<f64>],
    y_l: &[(usize, Option<[f64; 4]>)],
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

    let mut cls = Vec::with_capacity(x_l.len());
    let mut regs = Vec::new();
    for (i, (class, target)) in y_l.iter().enumerate() {
        let row = g.row(out.logits, i)?;
        cls.push(ce_loss(&mut g, row, *class)?);
        if let Some(t) = target {
            let pred = regression_row(&mut g, out.regression, i)?;
            regs.push(reg_star_loss(&mut g, pred, t, QualityFlags::ALL)?);
        }
    }
    let n_l = x_l.len() as f64;
    let sum_cls = sum_nodes(&mut g, &cls)?.expect("non-empty labelled batch");
    let mut loss_l = g.scale(sum_cls, 1.0 / n_l);
    if let Some(sum_reg) = sum_nodes(&mut g, &regs)? {
        let mean_reg = g.scale(sum_reg, 1.0 / n_l);
        loss_l = g.add(loss_l, mean_reg)?;
    }
    let mut total = loss_l;

    let mut loss_vc = 0.0;
    let mut contributing = 0;
    if let Some(u) = unlabelled {
        let b_u = u.plans.len() as f64;
        let mut terms = Vec::new();
        for (j, plan) in u.plans.iter().enumerate() {
            let r = x_l.len() + j;
            let mut contributed = false;
            match plan {
                Plan::Pseudo(label) => {
                    let row = g.row(out.logits, r)?;
                    terms.push(ce_loss(&mut g, row, *label)?);
                    contributed = true;
                }
                Plan::Confusing { pc, .. } => {
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
                        contributed = true;
                    }
                }
            }
            if let Some(rp) = u.regression[j] {
                let pred = regression_row(&mut g, out.regression, r)?;
                terms.push(reg_star_loss(&mut g, pred, &rp.target, rp.flags)?);
            }
            contributing += usize::from(contributed);
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
