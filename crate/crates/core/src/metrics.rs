//! Evaluation metrics for dense labels and detections.

use std::cmp::Ordering;

use crate::boxgeom::{iou, BBox};
use crate::error::{Error, Result};

fn check_labels(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            context: "label grids",
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c >= num_classes) {
        return Err(Error::ClassOutOfRange {
            index: bad,
            classes: num_classes,
        });
    }
    Ok(())
}

/// Mean IoU over the classes present in `gt`. An empty grid scores 0.
pub fn compute_miou(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<f64> {
    check_labels(pred, gt, num_classes)?;
    let mut inter = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut gt_count = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(gt) {
        pred_count[p] += 1;
        gt_count[t] += 1;
        if p == t {
            inter[p] += 1;
        }
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| gt_count[c] > 0).collect();
    if present.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = present
        .iter()
        .map(|&c| inter[c] as f64 / (pred_count[c] + gt_count[c] - inter[c]) as f64)
        .sum();
    Ok(total / present.len() as f64)
}

/// Fraction of equal entries. An empty grid scores 0.
pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            context: "label grids",
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if gt.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(gt).filter(|(p, t)| p == t).count() as f64 / gt.len() as f64)
}

/// One scored detection in image `image`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// One ground-truth object in image `image`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub class: usize,
    pub bbox: BBox,
}

/// Area under the monotone precision envelope, all-point interpolation.
fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Mean average precision at an IoU threshold, averaged over classes with
/// at least one ground-truth object. Detections are matched greedily in
/// descending score order (ties by input order); each object matches once.
pub fn mean_average_precision(
    detections: &[Detection],
    truths: &[GroundTruth],
    num_classes: usize,
    iou_threshold: f64,
) -> Result<f64> {
    if let Some(bad) = detections
        .iter()
        .map(|d| d.class)
        .chain(truths.iter().map(|t| t.class))
        .find(|&c| c >= num_classes)
    {
        return Err(Error::ClassOutOfRange {
            index: bad,
            classes: num_classes,
        });
    }
    if let Some(d) = detections.iter().find(|d| !d.score.is_finite()) {
        return Err(Error::invalid("detection score", format!("{}", d.score)));
    }
    let mut aps = Vec::new();
    for class in 0..num_classes {
        let gts: Vec<&GroundTruth> = truths.iter().filter(|t| t.class == class).collect();
        if gts.is_empty() {
            continue;
        }
        let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.class == class).collect();
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
        let mut used = vec![false; gts.len()];
        let hits: Vec<bool> = dets
            .iter()
            .map(|d| {
                let best = gts
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.image == d.image)
                    .map(|(j, t)| (j, iou(&d.bbox, &t.bbox)))
                    .fold(None::<(usize, f64)>, |acc, (j, v)| match acc {
                        Some((_, bv)) if bv >= v => acc,
                        _ => Some((j, v)),
                    });
                match best {
                    Some((j, v)) if v >= iou_threshold && !used[j] => {
                        used[j] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        aps.push(average_precision(&hits, gts.len()));
    }
    if aps.is_empty() {
        return Ok(0.0);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn miou_examples() {
        assert_eq!(compute_miou(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
        assert_eq!(compute_miou(&[1, 0, 0, 1], &[0, 1, 1, 0], 2).unwrap(), 0.0);
        let v = compute_miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((v - 7.0 / 12.0).abs() < 1e-15);
        assert!(compute_miou(&[0, 1], &[0], 2).is_err());
        assert!(compute_miou(&[0, 2], &[0, 1], 2).is_err());
    }

    #[test]
    fn miou_ignores_classes_absent_from_ground_truth() {
        // Class 2 appears only in the prediction; it lowers class 0's IoU
        // but is not averaged in itself.
        let v = compute_miou(&[0, 2], &[0, 0], 3).unwrap();
        assert_eq!(v, 0.5);
    }

    fn b(a1: f64, b1: f64, a2: f64, b2: f64) -> BBox {
        BBox::new(a1, b1, a2, b2).unwrap()
    }

    #[test]
    fn map_examples() {
        let truths = [
            GroundTruth {
                image: 0,
                class: 0,
                bbox: b(0.0, 0.0, 10.0, 10.0),
            },
            GroundTruth {
                image: 1,
                class: 0,
                bbox: b(0.0, 0.0, 10.0, 10.0),
            },
        ];
        let hit = |image, score| Detection {
            image,
            class: 0,
            score,
            bbox: b(0.0, 0.0, 10.0, 9.0),
        };
        let perfect = [hit(0, 0.9), hit(1, 0.8)];
        assert_eq!(mean_average_precision(&perfect, &truths, 2, 0.5).unwrap(), 1.0);
        assert_eq!(mean_average_precision(&[], &truths, 2, 0.5).unwrap(), 0.0);
        // A duplicate above the second hit: precision 1, 1/2, 2/3 at recalls
        // 1/2, 1/2, 1 gives AP = 1/2 + 1/2 * 2/3.
        let dup = [hit(0, 0.9), hit(0, 0.85), hit(1, 0.8)];
        let v = mean_average_precision(&dup, &truths, 2, 0.5).unwrap();
        assert!((v - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
        // Wrong image never matches.
        let miss = [Detection {
            image: 2,
            ..hit(0, 0.9)
        }];
        assert_eq!(mean_average_precision(&miss, &truths, 2, 0.5).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn miou_and_accuracy_lie_in_unit_interval(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..64),
        ) {
            let (pred, gt): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let m = compute_miou(&pred, &gt, 4).unwrap();
            let a = accuracy(&pred, &gt).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(m == 1.0, pred == gt);
        }
    }
}
