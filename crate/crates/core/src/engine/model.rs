use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierWeights;
use crate::diffcore::{column_moments, Graph, NodeId, Shape, Tensor};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const NORM_LAYERS: usize = 2;

/// Layer sizes of the two-hidden-layer perceptron with normalisation after
/// each linear map, a bias-free classifier and an optional box-regression head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub regression: bool,
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Clone, Copy, Debug)]
struct Layout {
    w1: usize,
    g1: usize,
    b1: usize,
    w2: usize,
    g2: usize,
    b2: usize,
    wc: usize,
    wr: usize,
    br: usize,
    len: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.num_classes < 2 {
            return Err(Error::invalid("model shape", format!("{self:?}")));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let (d, h, k) = (self.input_dim, self.hidden, self.num_classes);
        let w1 = 0;
        let g1 = w1 + h * d;
        let b1 = g1 + h;
        let w2 = b1 + h;
        let g2 = w2 + h * h;
        let b2 = g2 + h;
        let wc = b2 + h;
        let wr = wc + k * h;
        let br = wr + if self.regression { 4 * h } else { 0 };
        let len = br + if self.regression { 4 } else { 0 };
        Layout {
            w1,
            g1,
            b1,
            w2,
            g2,
            b2,
            wc,
            wr,
            br,
            len,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }

    pub fn norm_widths(&self) -> [usize; NORM_LAYERS] {
        [self.hidden; NORM_LAYERS]
    }
}

/// Flat parameter vector of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    shape: ModelShape,
    data: Vec<f64>,
}

impl ModelParams {
    /// He-style Gaussian initialisation; normalisation scales start at 1 and
    /// shifts at 0.
    pub fn init<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let l = shape.layout();
        let mut data = vec![0.0; l.len];
        let mut fill = |range: std::ops::Range<usize>, std: f64| {
            for v in &mut data[range] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        };
        let (d, h, k) = (shape.input_dim as f64, shape.hidden as f64, shape.num_classes);
        fill(l.w1..l.g1, (2.0 / d).sqrt());
        fill(l.w2..l.g2, (2.0 / h).sqrt());
        fill(l.wc..l.wc + k * shape.hidden, (1.0 / h).sqrt());
        if shape.regression {
            fill(l.wr..l.br, 0.01);
        }
        data[l.g1..l.b1].fill(1.0);
        data[l.g2..l.b2].fill(1.0);
        Ok(ModelParams { shape, data })
    }

    pub fn from_flat(shape: ModelShape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.param_count() {
            return Err(Error::DimensionMismatch {
                context: "model parameters",
                expected: shape.param_count(),
                actual: data.len(),
            });
        }
        Ok(ModelParams { shape, data })
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Current student classifier rows.
    pub fn classifier(&self) -> Result<ClassifierWeights> {
        let l = self.shape.layout();
        let (k, h) = (self.shape.num_classes, self.shape.hidden);
        ClassifierWeights::from_flat(k, h, self.data[l.wc..l.wc + k * h].to_vec())
    }
}

/// `theta_t <- m * theta_t + (1 - m) * theta_s`.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, m: f64) -> Result<()> {
    if teacher.shape != student.shape {
        return Err(Error::invalid("ema_update", "teacher and student shapes differ"));
    }
    if !(0.0..1.0).contains(&m) {
        return Err(Error::invalid("ema momentum", format!("must lie in [0, 1), got {m}")));
    }
    for (t, s) in teacher.data.iter_mut().zip(&student.data) {
        *t = m * *t + (1.0 - m) * s;
    }
    Ok(())
}

/// Running or batch statistics of one normalisation layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl LayerStats {
    fn identity(width: usize) -> Self {
        LayerStats {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }
}

/// Which forward pass a set of statistics belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Pseudo-labelling passes on weakly perturbed inputs.
    Label,
    /// Gradient passes on training inputs.
    Train,
}

/// Two independent groups of running statistics, one per [`Phase`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStatsBank {
    label: Vec<LayerStats>,
    train: Vec<LayerStats>,
    momentum: f64,
}

impl NormStatsBank {
    pub fn new(widths: &[usize], momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::invalid(
                "bn momentum",
                format!("must lie in (0, 1], got {momentum}"),
            ));
        }
        let fresh: Vec<LayerStats> = widths.iter().map(|&w| LayerStats::identity(w)).collect();
        Ok(NormStatsBank {
            label: fresh.clone(),
            train: fresh,
            momentum,
        })
    }

    pub fn for_shape(shape: &ModelShape, momentum: f64) -> Result<Self> {
        Self::new(&shape.norm_widths(), momentum)
    }

    pub fn group(&self, phase: Phase) -> &[LayerStats] {
        match phase {
            Phase::Label => &self.label,
            Phase::Train => &self.train,
        }
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }
}

/// `x_new = (1 - momentum) * x_old + momentum * x_current` on the selected
/// group only.
pub fn bn_update(bank: &mut NormStatsBank, batch: &[LayerStats], phase: Phase) -> Result<()> {
    let m = bank.momentum;
    let group = match phase {
        Phase::Label => &mut bank.label,
        Phase::Train => &mut bank.train,
    };
    if batch.len() != group.len() {
        return Err(Error::DimensionMismatch {
            context: "normalisation layers",
            expected: group.len(),
            actual: batch.len(),
        });
    }
    for (old, cur) in group.iter().zip(batch) {
        if cur.mean.len() != old.mean.len() || cur.var.len() != old.var.len() {
            return Err(Error::DimensionMismatch {
                context: "normalisation width",
                expected: old.mean.len(),
                actual: cur.mean.len(),
            });
        }
        if let Some((index, &value)) = cur.var.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::NonPositiveVariance { index, value });
        }
    }
    for (old, cur) in group.iter_mut().zip(batch) {
        for (o, c) in old.mean.iter_mut().zip(&cur.mean) {
            *o = (1.0 - m) * *o + m * c;
        }
        for (o, c) in old.var.iter_mut().zip(&cur.var) {
            *o = (1.0 - m) * *o + m * c;
        }
    }
    Ok(())
}

/// How normalisation layers standardise their input.
#[derive(Clone, Copy, Debug)]
pub enum Norm<'a> {
    /// Batch statistics; the moments are returned for a later [`bn_update`].
    Batch,
    Running(&'a [LayerStats]),
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// `B x hidden` feature rows.
    pub features: NodeId,
    /// `B x K` class logits.
    pub logits: NodeId,
    /// `K x hidden` classifier block of the parameters.
    pub weights: NodeId,
    /// `B x 4` regression deltas when the model has a regression head.
    pub regression: Option<NodeId>,
    /// Batch moments per normalisation layer; empty in running mode.
    pub batch_stats: Vec<LayerStats>,
}

fn block(g: &mut Graph, params: NodeId, start: usize, shape: Shape) -> Result<NodeId> {
    let flat = g.slice(params, start, shape.len())?;
    Ok(match shape {
        Shape::Vector(_) => flat,
        other => g.reshape(flat, other)?,
    })
}

/// Forward pass over a `B x input_dim` matrix node. `params` may be a leaf
/// (student) or a constant (teacher).
pub fn forward(g: &mut Graph, params: NodeId, shape: &ModelShape, x: NodeId, norm: Norm<'_>) -> Result<ForwardOut> {
    let l = shape.layout();
    let (d, h, k) = (shape.input_dim, shape.hidden, shape.num_classes);
    match g.shape(x) {
        Shape::Matrix(_, c) if c == d => {}
        other => {
            return Err(Error::invalid(
                "forward input",
                format!("expected B x {d}, got {other}"),
            ));
        }
    }
    if g.value(params).len() != l.len {
        return Err(Error::DimensionMismatch {
            context: "model parameters",
            expected: l.len,
            actual: g.value(params).len(),
        });
    }
    let mut batch_stats = Vec::new();
    let mut hidden = x;
    let layers = [(l.w1, d, l.g1, l.b1), (l.w2, h, l.g2, l.b2)];
    for (layer, &(w_at, fan_in, g_at, b_at)) in layers.iter().enumerate() {
        let w = block(g, params, w_at, Shape::Matrix(h, fan_in))?;
        let wt = g.transpose(w)?;
        let pre = g.matmul(hidden, wt)?;
        let normed = match norm {
            Norm::Batch => {
                let v = g.value(pre);
                let (rows, cols) = (v.rows(), v.cols());
                let (mean, var) = column_moments(v.data(), rows, cols);
                batch_stats.push(LayerStats { mean, var });
                g.batch_norm(pre, BN_EPS)?
            }
            Norm::Running(stats) => {
                let s = stats.get(layer).ok_or(Error::DimensionMismatch {
                    context: "normalisation layers",
                    expected: NORM_LAYERS,
                    actual: stats.len(),
                })?;
                let neg_mean = g.constant(Tensor::vector(s.mean.iter().map(|m| -m).collect()));
                let inv_std = g.constant(Tensor::vector(
                    s.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
                ));
                let centred = g.add_row(pre, neg_mean)?;
                g.mul_row(centred, inv_std)?
            }
        };
        let gamma = block(g, params, g_at, Shape::Vector(h))?;
        let beta = block(g, params, b_at, Shape::Vector(h))?;
        let scaled = g.mul_row(normed, gamma)?;
        let shifted = g.add_row(scaled, beta)?;
        hidden = g.relu(shifted);
    }
    let wc = block(g, params, l.wc, Shape::Matrix(k, h))?;
    let wct = g.transpose(wc)?;
    let logits = g.matmul(hidden, wct)?;
    let regression = if shape.regression {
        let wr = block(g, params, l.wr, Shape::Matrix(4, h))?;
        let br = block(g, params, l.br, Shape::Vector(4))?;
        let wrt = g.transpose(wr)?;
        let raw = g.matmul(hidden, wrt)?;
        Some(g.add_row(raw, br)?)
    } else {
        None
    };
    Ok(ForwardOut {
        features: hidden,
        logits,
        weights: wc,
        regression,
        batch_stats,
    })
}

/// Classic momentum SGD with weight decay folded into the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid(
                "weight_decay",
                format!("must be non-negative, got {}", self.weight_decay),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        Ok(())
    }
}

/// Velocity buffer of [`sgd_step`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    velocity: Vec<f64>,
}

/// `v <- mu v + (g + wd theta)`, `theta <- theta - lr v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], state: &mut SgdState, cfg: &SgdConfig) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::DimensionMismatch {
            context: "sgd gradient",
            expected: params.len(),
            actual: grads.len(),
        });
    }
    if grads.iter().chain(params.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "sgd input",
            step: 0,
        });
    }
    if state.velocity.len() != params.len() {
        state.velocity = vec![0.0; params.len()];
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
        *p -= cfg.lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(regression: bool) -> ModelShape {
        ModelShape {
            input_dim: 5,
            hidden: 6,
            num_classes: 3,
            regression,
        }
    }

    #[test]
    fn ema_examples() {
        let s = shape(false);
        let mut t = ModelParams::from_flat(s, vec![0.0; s.param_count()]).unwrap();
        let st = ModelParams::from_flat(s, vec![1.0; s.param_count()]).unwrap();
        ema_update(&mut t, &st, 0.9996).unwrap();
        assert!(t.as_flat().iter().all(|v| (v - 0.0004).abs() < 1e-15));
        ema_update(&mut t, &st, 0.0).unwrap();
        assert_eq!(t.as_flat(), st.as_flat());
        assert!(ema_update(&mut t, &st, 1.0).is_err());
        let other = ModelParams::from_flat(shape(true), vec![0.0; shape(true).param_count()]).unwrap();
        assert!(ema_update(&mut t, &other, 0.5).is_err());
    }

    #[test]
    fn ema_distance_shrinks_geometrically() {
        let s = shape(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = ModelParams::init(s, &mut rng).unwrap();
        let p = ModelParams::init(s, &mut rng).unwrap();
        let dist = |a: &ModelParams| -> f64 {
            a.as_flat()
                .iter()
                .zip(p.as_flat())
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let d0 = dist(&t);
        let m: f64 = 0.9996;
        for n in 1..=500 {
            ema_update(&mut t, &p, m).unwrap();
            if n % 100 == 0 {
                let expected = d0 * m.powi(n);
                assert!(((dist(&t) - expected) / expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bn_update_examples() {
        let mut bank = NormStatsBank::new(&[1], 0.1).unwrap();
        let batch = [LayerStats {
            mean: vec![1.0],
            var: vec![3.0],
        }];
        bn_update(&mut bank, &batch, Phase::Train).unwrap();
        assert!((bank.group(Phase::Train)[0].mean[0] - 0.1).abs() < 1e-15);
        assert!((bank.group(Phase::Train)[0].var[0] - (0.9 + 0.3)).abs() < 1e-15);
        assert_eq!(bank.group(Phase::Label)[0], LayerStats::identity(1));

        let mut full = NormStatsBank::new(&[1], 1.0).unwrap();
        bn_update(&mut full, &batch, Phase::Label).unwrap();
        assert_eq!(full.group(Phase::Label), &batch);

        let bad = [LayerStats {
            mean: vec![0.0],
            var: vec![0.0],
        }];
        assert!(matches!(
            bn_update(&mut bank, &bad, Phase::Train),
            Err(Error::NonPositiveVariance { .. })
        ));
        assert!(NormStatsBank::new(&[1], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn updating_one_group_leaves_the_other_bit_identical(
            seed in 0u64..1000,
            momentum in 0.01f64..1.0,
            train_first: bool,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bank = NormStatsBank::new(&[4, 4], momentum).unwrap();
            let random_stats = |rng: &mut ChaCha8Rng| -> Vec<LayerStats> {
                (0..2).map(|_| LayerStats {
                    mean: (0..4).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    var: (0..4).map(|_| rng.random_range(0.1..3.0)).collect(),
                }).collect()
            };
            let first = random_stats(&mut rng);
            let (p, q) = if train_first { (Phase::Train, Phase::Label) } else { (Phase::Label, Phase::Train) };
            bn_update(&mut bank, &first, q).unwrap();
            let before = bank.group(q).to_vec();
            for _ in 0..5 {
                let s = random_stats(&mut rng);
                bn_update(&mut bank, &s, p).unwrap();
            }
            prop_assert_eq!(bank.group(q), &before[..]);
        }
    }

    #[test]
    fn sgd_examples() {
        let cfg = SgdConfig {
            lr: 0.5,
            weight_decay: 0.0,
            momentum: 0.9,
        };
        let mut p = vec![1.0, -2.0];
        let mut st = SgdState::default();
        sgd_step(&mut p, &[0.0, 0.0], &mut st, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let plain = SgdConfig {
            lr: 1.0,
            weight_decay: 0.1,
            momentum: 0.0,
        };
        let mut p = vec![1.0, -2.0];
        sgd_step(&mut p, &[0.5, 0.25], &mut SgdState::default(), &plain).unwrap();
        assert!((p[0] - (1.0 - 0.5 - 0.1)).abs() < 1e-15);
        assert!((p[1] - (-2.0 - 0.25 + 0.2)).abs() < 1e-15);
        assert!(sgd_step(&mut p, &[f64::NAN, 0.0], &mut SgdState::default(), &plain).is_err());
    }

    #[test]
    fn sgd_converges_on_a_quadratic_bowl() {
        let opt = [3.0, -1.0, 0.5];
        let scales = [1.0, 2.0, 0.5];
        // Heavy-ball contraction is at least sqrt(momentum) per step, so a
        // moderate momentum is needed to reach 1e-6 within 200 steps.
        let cfg = SgdConfig {
            lr: 0.1,
            weight_decay: 0.0,
            momentum: 0.5,
        };
        let mut p = vec![0.0; 3];
        let mut st = SgdState::default();
        for _ in 0..200 {
            let g: Vec<f64> = (0..3).map(|i| scales[i] * (p[i] - opt[i])).collect();
            sgd_step(&mut p, &g, &mut st, &cfg).unwrap();
        }
        for i in 0..3 {
            assert!((p[i] - opt[i]).abs() < 1e-6, "{p:?}");
        }
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        for (regression, norm_batch) in [(false, true), (true, true), (true, false)] {
            let s = shape(regression);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let params = ModelParams::init(s, &mut rng).unwrap();
            let x: Vec<f64> = (0..7 * s.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let running = vec![
                LayerStats {
                    mean: (0..6).map(|_| rng.random_range(-0.5..0.5)).collect(),
                    var: (0..6).map(|_| rng.random_range(0.5..2.0)).collect(),
                };
                2
            ];
            let proj: Vec<f64> = (0..7 * 10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
                let mut g = Graph::new();
                let pn = g.leaf(Tensor::vector(p.to_vec()));
                let xn = g.constant(Tensor::matrix(7, s.input_dim, x.clone())?);
                let norm = if norm_batch {
                    Norm::Batch
                } else {
                    Norm::Running(&running)
                };
                let out = forward(&mut g, pn, &s, xn, norm)?;
                let mut parts = vec![g.reshape(out.logits, Shape::Vector(7 * 3))?];
                if let Some(r) = out.regression {
                    parts.push(g.reshape(r, Shape::Vector(7 * 4))?);
                }
                let flat = g.concat(&parts)?;
                let len = g.value(flat).len();
                let w = g.constant(Tensor::vector(proj[..len].to_vec()));
                let loss = g.dot(flat, w)?;
                let grads = g.backward(loss)?;
                Ok((g.scalar_value(loss).unwrap(), grads.wrt(pn)?.data().to_vec()))
            };
            let err = finite_diff_check(f, params.as_flat(), 1e-5).unwrap();
            assert!(err < 1e-4, "regression={regression} batch={norm_batch}: {err}");
        }
    }

    #[test]
    fn batch_mode_reports_moments_and_running_mode_does_not() {
        let s = shape(false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = ModelParams::init(s, &mut rng).unwrap();
        let mut g = Graph::new();
        let pn = g.constant(Tensor::vector(params.as_flat().to_vec()));
        let x: Vec<f64> = (0..4 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xn = g.constant(Tensor::matrix(4, 5, x).unwrap());
        let out = forward(&mut g, pn, &s, xn, Norm::Batch).unwrap();
        assert_eq!(out.batch_stats.len(), 2);
        assert!(out.batch_stats.iter().all(|l| l.var.iter().all(|v| *v > 0.0)));
        let bank = NormStatsBank::for_shape(&s, 0.5).unwrap();
        let out = forward(&mut g, pn, &s, xn, Norm::Running(bank.group(Phase::Label))).unwrap();
        assert!(out.batch_stats.is_empty());
        assert_eq!(g.shape(out.logits), Shape::Matrix(4, 3));
    }
}
