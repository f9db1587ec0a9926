//! Potential category set discovery.
//!
//! Pixel-style units compare class predictions directly; box-style units are
//! first paired across two prediction sets by greedy IoU matching.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, BBox};
use crate::classifier::argmax;
use crate::error::{Error, Result};
use crate::vclearn::{PcSource, PotentialCategorySet};

const PROB_TOLERANCE: f64 = 1e-6;

/// A detected object: box, predicted class, confidence and a caller-defined id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub bbox: BBox,
    pub class: usize,
    pub confidence: f64,
    pub id: usize,
}

/// Confidence band of a pseudo label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Band {
    Trusted,
    Retained,
    Discarded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Top2,
    Mutual,
    Temporal,
    Cross,
}

/// Which confidence bands a policy is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandSelector {
    /// Trusted units use the policy, retained units use top-2.
    Banded,
    /// Only trusted units are used; retained units are dropped.
    TrustedOnly,
    /// Trusted and retained units both use the policy.
    AllKept,
}

/// What to do with one unit after band filtering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Policy(Policy),
    Discard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub policy: Policy,
    pub iou_threshold: f64,
    pub applies_to: BandSelector,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            policy: Policy::Mutual,
            iou_threshold: 0.5,
            applies_to: BandSelector::Banded,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::invalid(
                "iou_threshold",
                format!("must lie in (0, 1], got {}", self.iou_threshold),
            ));
        }
        Ok(())
    }

    pub fn route(&self, band: Band) -> Route {
        match (band, self.applies_to) {
            (Band::Discarded, _) => Route::Discard,
            (Band::Trusted, _) => Route::Policy(self.policy),
            (Band::Retained, BandSelector::Banded) => Route::Policy(Policy::Top2),
            (Band::Retained, BandSelector::TrustedOnly) => Route::Discard,
            (Band::Retained, BandSelector::AllKept) => Route::Policy(self.policy),
        }
    }
}

pub(crate) fn check_probs(probs: &[f64]) -> Result<()> {
    if let Some((index, &value)) = probs.iter().enumerate().find(|(_, p)| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid("probs", format!("entry {index} is {value}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::invalid("probs", format!("sum is {total}, expected 1")));
    }
    Ok(())
}

/// The two most probable classes; ties go to the lower index.
pub fn pcset_top2(probs: &[f64]) -> Result<PotentialCategorySet> {
    if probs.len() < 2 {
        return Err(Error::invalid(
            "probs",
            format!("top-2 needs at least 2 classes, got {}", probs.len()),
        ));
    }
    check_probs(probs)?;
    let first = argmax(probs);
    let second = (0..probs.len())
        .filter(|&i| i != first)
        .fold(None::<usize>, |best, i| match best {
            Some(b) if probs[b] >= probs[i] => Some(b),
            _ => Some(i),
        })
        .expect("at least two classes");
    PotentialCategorySet::new([first, second], probs.len(), PcSource::Top2)
}

/// `{y_teacher}` on agreement, otherwise `{y_teacher, y_student}`.
pub fn pcset_mutual(y_teacher: usize, y_student: usize, num_classes: usize) -> Result<PotentialCategorySet> {
    PotentialCategorySet::new([y_teacher, y_student], num_classes, PcSource::Mutual)
}

/// Pixel-level cross-model verification; same rule as [`pcset_mutual`].
pub fn pcset_crossmodel_pixel(y_a: usize, y_b: usize, num_classes: usize) -> Result<PotentialCategorySet> {
    PotentialCategorySet::new([y_a, y_b], num_classes, PcSource::Cross)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxMatch {
    pub a: usize,
    pub b: usize,
    pub iou: f64,
}

/// One-to-one pairing between two box lists; indices refer to the inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matching {
    pub pairs: Vec<BoxMatch>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
}

impl Matching {
    pub fn total_iou(&self) -> f64 {
        self.pairs.iter().map(|p| p.iou).sum()
    }
}

/// Greedy matching by descending IoU, ties broken by `(a, b)` index.
pub fn match_boxes(set_a: &[BoxPrediction], set_b: &[BoxPrediction], iou_thr: f64) -> Result<Matching> {
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(Error::invalid(
            "iou_threshold",
            format!("must lie in (0, 1], got {iou_thr}"),
        ));
    }
    let mut candidates = Vec::new();
    for (i, a) in set_a.iter().enumerate() {
        for (j, b) in set_b.iter().enumerate() {
            let v = iou(&a.bbox, &b.bbox);
            if v >= iou_thr {
                candidates.push(BoxMatch { a: i, b: j, iou: v });
            }
        }
    }
    candidates.sort_by(|x, y| {
        y.iou
            .partial_cmp(&x.iou)
            .unwrap_or(Ordering::Equal)
            .then(x.a.cmp(&y.a))
            .then(x.b.cmp(&y.b))
    });
    let mut used_a = vec![false; set_a.len()];
    let mut used_b = vec![false; set_b.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !used_a[c.a] && !used_b[c.b] {
            used_a[c.a] = true;
            used_b[c.b] = true;
            pairs.push(c);
        }
    }
    pairs.sort_by_key(|p| p.a);
    Ok(Matching {
        pairs,
        unmatched_a: (0..set_a.len()).filter(|&i| !used_a[i]).collect(),
        unmatched_b: (0..set_b.len()).filter(|&j| !used_b[j]).collect(),
    })
}

/// A box-level unit with its PC set. `from_a` / `from_b` name the input
/// boxes it came from; the box itself is taken from set A when available.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxPc {
    pub bbox: BBox,
    pub pc: PotentialCategorySet,
    pub from_a: Option<usize>,
    pub from_b: Option<usize>,
}

/// Matched pairs give `{c_a, c_b}`; an unmatched box of class `c` gives
/// `{c, bg}`. Output order: pairs, then unmatched A, then unmatched B.
pub fn pcset_pairwise_boxes(
    matching: &Matching,
    set_a: &[BoxPrediction],
    set_b: &[BoxPrediction],
    bg_index: usize,
    num_classes: usize,
    source: PcSource,
) -> Result<Vec<BoxPc>> {
    if bg_index >= num_classes {
        return Err(Error::ClassOutOfRange {
            index: bg_index,
            classes: num_classes,
        });
    }
    let mut out = Vec::with_capacity(matching.pairs.len() + matching.unmatched_a.len() + matching.unmatched_b.len());
    for p in &matching.pairs {
        let (a, b) = (&set_a[p.a], &set_b[p.b]);
        out.push(BoxPc {
            bbox: a.bbox,
            pc: PotentialCategorySet::new([a.class, b.class], num_classes, source)?,
            from_a: Some(p.a),
            from_b: Some(p.b),
        });
    }
    for &i in &matching.unmatched_a {
        out.push(BoxPc {
            bbox: set_a[i].bbox,
            pc: PotentialCategorySet::new([set_a[i].class, bg_index], num_classes, source)?,
            from_a: Some(i),
            from_b: None,
        });
    }
    for &j in &matching.unmatched_b {
        out.push(BoxPc {
            bbox: set_b[j].bbox,
            pc: PotentialCategorySet::new([set_b[j].class, bg_index], num_classes, source)?,
            from_a: None,
            from_b: Some(j),
        });
    }
    Ok(out)
}

/// Compares current predictions with the ones made at the last visit of the
/// same input. Without history every current box is a singleton.
pub fn pcset_temporal(
    current: &[BoxPrediction],
    last_seen: Option<&[BoxPrediction]>,
    iou_thr: f64,
    bg_index: usize,
    num_classes: usize,
) -> Result<Vec<BoxPc>> {
    match last_seen {
        None => current
            .iter()
            .enumerate()
            .map(|(i, b)| {
                Ok(BoxPc {
                    bbox: b.bbox,
                    pc: PotentialCategorySet::singleton(b.class, num_classes, PcSource::Temporal)?,
                    from_a: Some(i),
                    from_b: None,
                })
            })
            .collect(),
        Some(last) => {
            let m = match_boxes(current, last, iou_thr)?;
            pcset_pairwise_boxes(&m, current, last, bg_index, num_classes, PcSource::Temporal)
        }
    }
}

/// Compares the predictions of two independently trained models.
pub fn pcset_crossmodel(
    model_a: &[BoxPrediction],
    model_b: &[BoxPrediction],
    iou_thr: f64,
    bg_index: usize,
    num_classes: usize,
) -> Result<Vec<BoxPc>> {
    let m = match_boxes(model_a, model_b, iou_thr)?;
    pcset_pairwise_boxes(&m, model_a, model_b, bg_index, num_classes, PcSource::Cross)
}
