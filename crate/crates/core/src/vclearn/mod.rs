//! Virtual-category learning.
//!
//! A confusing training unit has a potential category set (PC) with more than
//! one plausible class. Instead of picking one, the student classifier is
//! extended by a per-unit virtual weight `w^v`, built from the teacher's
//! feature for the same unit. The extended logit vector is
//! `[l^v, l^0, ..., l^{K-1}]`, the training target puts a 1 on the virtual
//! slot, and every PC member is ignored. The losses here implement that
//! target in cross-entropy, sigmoid-MSE, negatives-only and cosine forms.

mod attention;
mod loss;
mod weight;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classifier::IgnoreMask;
use crate::diffcore::{Graph, NodeId};
use crate::error::{Error, Result};

pub use attention::{
    generator_objective, make_virtual_weight_attention, train_attention_generator_step, AttentionGenerator,
    ConfidentSample, GeneratorObjective,
};
pub(crate) use loss::extend_with;
pub use loss::{cosine_sim_loss, extend_logits, neg_loss, vc_ce_loss, vc_mse_loss, DEFAULT_FOCAL_GAMMA};
pub use weight::{make_virtual_weight_normalized, MagnitudePolicy, VirtualWeight, WeightOrigin};

/// Which discovery rule produced a potential category set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PcSource {
    Top2,
    Mutual,
    Temporal,
    Cross,
    /// Ground truth or a fully trusted pseudo label.
    Label,
}

impl fmt::Display for PcSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PcSource::Top2 => "top2",
            PcSource::Mutual => "mutual",
            PcSource::Temporal => "temporal",
            PcSource::Cross => "cross",
            PcSource::Label => "label",
        };
        f.write_str(s)
    }
}

/// Set of doubtful class indices for one training unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PotentialCategorySet {
    classes: BTreeSet<usize>,
    source: PcSource,
}

impl PotentialCategorySet {
    /// Validates against a classifier with `num_classes` real classes; index
    /// `num_classes` is the virtual slot and is rejected.
    pub fn new(classes: impl IntoIterator<Item = usize>, num_classes: usize, source: PcSource) -> Result<Self> {
        let classes: BTreeSet<usize> = classes.into_iter().collect();
        if classes.is_empty() {
            return Err(Error::EmptyPcSet);
        }
        for &c in &classes {
            if c == num_classes {
                return Err(Error::VirtualInPcSet);
            }
            if c > num_classes {
                return Err(Error::ClassOutOfRange {
                    index: c,
                    classes: num_classes,
                });
            }
        }
        Ok(PotentialCategorySet { classes, source })
    }

    pub fn singleton(class: usize, num_classes: usize, source: PcSource) -> Result<Self> {
        Self::new([class], num_classes, source)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.iter().copied()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.contains(&class)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn is_confusing(&self) -> bool {
        self.classes.len() > 1
    }

    pub fn source(&self) -> PcSource {
        self.source
    }

    /// The only member of a non-confusing set.
    pub fn single(&self) -> Option<usize> {
        if self.classes.len() == 1 {
            self.classes.first().copied()
        } else {
            None
        }
    }
}

/// A `K+1` logit vector with one virtual slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtendedLogits {
    pub node: NodeId,
    pub vc_index: usize,
    pub num_classes: usize,
}

impl ExtendedLogits {
    pub fn len(&self) -> usize {
        self.num_classes + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Position of real class `class` inside the extended vector.
    pub fn position_of(&self, class: usize) -> usize {
        if class < self.vc_index {
            class
        } else {
            class + 1
        }
    }

    pub fn values<'g>(&self, g: &'g Graph) -> &'g [f64] {
        g.value(self.node).data()
    }
}

/// One entry of the VC training target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetEntry {
    Positive,
    Negative,
    Ignore,
}

/// `[1, 0, ..., ign, ..., ign, 0]` laid out over the extended logits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VcTarget {
    entries: Vec<TargetEntry>,
}

impl VcTarget {
    pub fn new(ext: &ExtendedLogits, pc: &PotentialCategorySet) -> Result<Self> {
        let mut entries = vec![TargetEntry::Negative; ext.len()];
        entries[ext.vc_index] = TargetEntry::Positive;
        for c in pc.classes() {
            if c >= ext.num_classes {
                return Err(if c == ext.num_classes {
                    Error::VirtualInPcSet
                } else {
                    Error::ClassOutOfRange {
                        index: c,
                        classes: ext.num_classes,
                    }
                });
            }
            entries[ext.position_of(c)] = TargetEntry::Ignore;
        }
        Ok(VcTarget { entries })
    }

    pub fn entries(&self) -> &[TargetEntry] {
        &self.entries
    }

    pub fn mask(&self) -> IgnoreMask {
        IgnoreMask::new(
            self.entries
                .iter()
                .enumerate()
                .filter(|(_, e)| **e == TargetEntry::Ignore)
                .map(|(i, _)| i),
        )
    }

    /// Binary form with ignored slots set to 0; pair with [`VcTarget::mask`].
    pub fn binary(&self) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| if *e == TargetEntry::Positive { 1.0 } else { 0.0 })
            .collect()
    }
}
