//! Axis-aligned boxes, overlap, boundary-quality flags and the flag-gated
//! regression loss.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Box with top-left `(a1, b1)` and bottom-right `(a2, b2)`; always of
/// positive area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    a1: f64,
    b1: f64,
    a2: f64,
    b2: f64,
}

impl BBox {
    pub fn new(a1: f64, b1: f64, a2: f64, b2: f64) -> Result<Self> {
        let finite = [a1, b1, a2, b2].iter().all(|v| v.is_finite());
        if !finite || a2 <= a1 || b2 <= b1 {
            return Err(Error::DegenerateBox { a1, b1, a2, b2 });
        }
        Ok(BBox { a1, b1, a2, b2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn a1(&self) -> f64 {
        self.a1
    }

    pub fn b1(&self) -> f64 {
        self.b1
    }

    pub fn a2(&self) -> f64 {
        self.a2
    }

    pub fn b2(&self) -> f64 {
        self.b2
    }

    pub fn width(&self) -> f64 {
        self.a2 - self.a1
    }

    pub fn height(&self) -> f64 {
        self.b2 - self.b1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.a1 + self.a2) / 2.0, (self.b1 + self.b2) / 2.0)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.a1 && x < self.a2 && y >= self.b1 && y < self.b2
    }

    /// Uniform scaling of all coordinates about the origin.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.a1 * s, self.b1 * s, self.a2 * s, self.b2 * s)
    }

    /// Offsets `(dx, dy, dw, dh)` of `self` relative to `anchor`, normalised by
    /// the anchor size. No log on the size terms.
    pub fn deltas_from(&self, anchor: &BBox) -> [f64; 4] {
        let (cx, cy) = self.center();
        let (ax, ay) = anchor.center();
        let (aw, ah) = (anchor.width(), anchor.height());
        [
            (cx - ax) / aw,
            (cy - ay) / ah,
            (self.width() - aw) / aw,
            (self.height() - ah) / ah,
        ]
    }

    /// Inverse of [`BBox::deltas_from`].
    pub fn apply_deltas(anchor: &BBox, d: &[f64; 4]) -> Result<Self> {
        let (ax, ay) = anchor.center();
        let (aw, ah) = (anchor.width(), anchor.height());
        Self::from_center(ax + d[0] * aw, ay + d[1] * ah, aw * (1.0 + d[2]), ah * (1.0 + d[3]))
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.a1, b.b1, b.a2, b.b2]
    }
}

/// Intersection over union; 0 for disjoint or edge-touching boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.a2.min(b.a2) - a.a1.max(b.a1)).max(0.0);
    let ih = (a.b2.min(b.b2) - a.b1.max(b.b1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QualityFlags {
    pub q_hor: bool,
    pub q_ver: bool,
}

impl QualityFlags {
    pub const NONE: QualityFlags = QualityFlags {
        q_hor: false,
        q_ver: false,
    };
    pub const ALL: QualityFlags = QualityFlags {
        q_hor: true,
        q_ver: true,
    };

    /// Gate per regression coordinate `(x, y, w, h)`.
    pub fn gates(&self) -> [f64; 4] {
        let h = if self.q_hor { 1.0 } else { 0.0 };
        let v = if self.q_ver { 1.0 } else { 0.0 };
        [h, v, h, v]
    }
}

/// A side is stable when both of its boundaries moved by less than `t_loc`
/// of the box extent along that axis.
pub fn boundary_quality(b: &BBox, nearby: &BBox, t_loc: f64) -> Result<QualityFlags> {
    if !(t_loc > 0.0) || !t_loc.is_finite() {
        return Err(Error::invalid("t_loc", format!("must be positive, got {t_loc}")));
    }
    let (w, h) = (b.width(), b.height());
    let q_hor = (b.a1 - nearby.a1).abs() / w < t_loc && (b.a2 - nearby.a2).abs() / w < t_loc;
    let q_ver = (b.b1 - nearby.b1).abs() / h < t_loc && (b.b2 - nearby.b2).abs() / h < t_loc;
    Ok(QualityFlags { q_hor, q_ver })
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// `q_hor*L_x + q_ver*L_y + q_hor*L_w + q_ver*L_h` over a length-4 prediction
/// node and fixed targets.
pub fn reg_star_loss(g: &mut Graph, pred: NodeId, target: &[f64; 4], flags: QualityFlags) -> Result<NodeId> {
    if target.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("reg_star target", "non-finite entry"));
    }
    let t = g.constant(Tensor::vector(target.to_vec()));
    let diff = g.sub(pred, t)?;
    let per = g.smooth_l1(diff);
    let gates = g.constant(Tensor::vector(flags.gates().to_vec()));
    let gated = g.mul(per, gates)?;
    Ok(g.sum(gated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(a1: f64, b1: f64, a2: f64, b2: f64) -> BBox {
        BBox::new(a1, b1, a2, b2).unwrap()
    }

    /// Midpoint-rule estimate of IoU on an `n x n` grid over the joint hull.
    fn grid_iou(a: &BBox, b: &BBox, n: usize) -> f64 {
        let (x0, y0) = (a.a1.min(b.a1), a.b1.min(b.b1));
        let (x1, y1) = (a.a2.max(b.a2), a.b2.max(b.b2));
        let (dx, dy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (x0 + (i as f64 + 0.5) * dx, y0 + (j as f64 + 0.5) * dy);
                let (ia, ib) = (a.contains_point(x, y), b.contains_point(x, y));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_eq!(iou(&a, &bx(2.0, 0.0, 3.0, 2.0)), 0.0);
        let b = bx(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        assert!((grid_iou(&a, &b, 600) - 1.0 / 7.0).abs() < 1e-3);
    }

    #[test]
    fn iou_matches_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let random_box = |rng: &mut ChaCha8Rng| {
            let (x, y) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
            bx(x, y, x + rng.random_range(0.5..6.0), y + rng.random_range(0.5..6.0))
        };
        for _ in 0..100 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            assert!((iou(&a, &b) - grid_iou(&a, &b, 800)).abs() < 1e-3);
        }
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(matches!(
            BBox::new(1.0, 0.0, 1.0, 2.0),
            Err(Error::DegenerateBox { .. })
        ));
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(serde_json::from_str::<BBox>("[0,0,0,1]").is_err());
        let b: BBox = serde_json::from_str("[0,0,2,1]").unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[0.0,0.0,2.0,1.0]");
    }

    #[test]
    fn quality_flag_examples() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(boundary_quality(&b, &b, 0.05).unwrap(), QualityFlags::ALL);
        let near = bx(0.2, 0.0, 10.3, 10.0);
        assert_eq!(boundary_quality(&b, &near, 0.05).unwrap(), QualityFlags::ALL);
        let shifted = bx(1.0, 0.0, 10.0, 10.0);
        assert_eq!(
            boundary_quality(&b, &shifted, 0.05).unwrap(),
            QualityFlags {
                q_hor: false,
                q_ver: true
            }
        );
        // a large negative shift counts like a positive one
        let left = bx(-1.0, 0.0, 10.0, 10.0);
        assert!(!boundary_quality(&b, &left, 0.05).unwrap().q_hor);
        let tall = bx(0.0, 0.0, 10.0, 10.6);
        assert_eq!(
            boundary_quality(&b, &tall, 0.05).unwrap(),
            QualityFlags {
                q_hor: true,
                q_ver: false
            }
        );
        assert!(boundary_quality(&b, &b, 0.0).is_err());
    }

    #[test]
    fn smooth_l1_examples_and_continuity() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        let e = 1e-9;
        for x in [1.0, -1.0] {
            assert!((smooth_l1(x - e) - smooth_l1(x + e)).abs() < 1e-8);
            let left = (smooth_l1(x - e) - smooth_l1(x - 2.0 * e)) / e;
            let right = (smooth_l1(x + 2.0 * e) - smooth_l1(x + e)) / e;
            assert!((left - right).abs() < 1e-5);
        }
    }

    fn reg(pred: [f64; 4], target: [f64; 4], flags: QualityFlags) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::vector(pred.to_vec()));
        let loss = reg_star_loss(&mut g, p, &target, flags).unwrap();
        let grad = g.backward(loss).unwrap().wrt(p).unwrap().data().to_vec();
        (g.scalar_value(loss).unwrap(), grad)
    }

    #[test]
    fn reg_star_gating() {
        let (l, grad) = reg([0.3, -2.0, 1.0, 0.1], [0.0; 4], QualityFlags::NONE);
        assert_eq!(l, 0.0);
        assert!(grad.iter().all(|d| *d == 0.0));

        let hor = QualityFlags {
            q_hor: true,
            q_ver: false,
        };
        let (a, grad) = reg([0.3, -2.0, 1.5, 0.1], [0.0; 4], hor);
        let (b, _) = reg([0.3, 7.0, 1.5, -4.0], [0.0; 4], hor);
        assert!((a - b).abs() < 1e-12);
        assert!((a - (0.045 + 1.0)).abs() < 1e-12);
        assert_eq!((grad[1], grad[3]), (0.0, 0.0));

        let t = [0.2, 0.1, -0.3, 0.4];
        assert_eq!(reg(t, t, QualityFlags::ALL).0, 0.0);
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(
            a in (0.0f64..10.0, 0.0f64..10.0, 0.1f64..5.0, 0.1f64..5.0),
            b in (0.0f64..10.0, 0.0f64..10.0, 0.1f64..5.0, 0.1f64..5.0),
        ) {
            let a = bx(a.0, a.1, a.0 + a.2, a.1 + a.3);
            let b = bx(b.0, b.1, b.0 + b.2, b.1 + b.3);
            let (ab, ba) = (iou(&a, &b), iou(&b, &a));
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn quality_flags_are_scale_invariant(
            a in (0.0f64..10.0, 0.0f64..10.0, 1.0f64..5.0, 1.0f64..5.0),
            d in prop::array::uniform4(-0.3f64..0.3),
            s in prop::sample::select(vec![0.25, 0.5, 2.0, 4.0, 8.0]),
        ) {
            // power-of-two scale factors keep the arithmetic exact
            let b = bx(a.0, a.1, a.0 + a.2, a.1 + a.3);
            let n = bx(a.0 + d[0], a.1 + d[1], a.0 + a.2 + d[2], a.1 + a.3 + d[3]);
            let flags = boundary_quality(&b, &n, 0.05).unwrap();
            let scaled = boundary_quality(&b.scaled(s).unwrap(), &n.scaled(s).unwrap(), 0.05).unwrap();
            prop_assert_eq!(flags, scaled);
        }

        #[test]
        fn reg_star_is_nonnegative_and_zero_iff_flagged_errors_vanish(
            p in prop::array::uniform4(-3.0f64..3.0),
            t in prop::array::uniform4(-3.0f64..3.0),
            h: bool, v: bool,
        ) {
            let flags = QualityFlags { q_hor: h, q_ver: v };
            let (l, _) = reg(p, t, flags);
            prop_assert!(l >= 0.0);
            let gates = flags.gates();
            let flagged_err = (0..4).any(|i| gates[i] > 0.0 && p[i] != t[i]);
            prop_assert_eq!(l == 0.0, !flagged_err);
        }

        #[test]
        fn deltas_round_trip(
            a in (0.0f64..10.0, 0.0f64..10.0, 0.5f64..5.0, 0.5f64..5.0),
            b in (0.0f64..10.0, 0.0f64..10.0, 0.5f64..5.0, 0.5f64..5.0),
        ) {
            let anchor = bx(a.0, a.1, a.0 + a.2, a.1 + a.3);
            let target = bx(b.0, b.1, b.0 + b.2, b.1 + b.3);
            let back = BBox::apply_deltas(&anchor, &target.deltas_from(&anchor)).unwrap();
            let (x, y): ([f64; 4], [f64; 4]) = (back.into(), target.into());
            for i in 0..4 {
                prop_assert!((x[i] - y[i]).abs() < 1e-9);
            }
        }
    }
}
