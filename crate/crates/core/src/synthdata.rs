//! Deterministic synthetic tasks with controllable class confusion.
//!
//! Features are drawn from class-centred isotropic Gaussians. A confusable
//! pair `(a, b, overlap)` adds extra noise with standard deviation `overlap`
//! along the line joining the two centres, for samples of either class, so the
//! two classes genuinely overlap while the rest stay separable.

use std::io::{BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, BBox};
use crate::error::{Error, Result};

fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::invalid(field, reason)
}

/// splitmix64 finaliser folded over `parts`; used to derive independent
/// per-purpose seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub(crate) fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusablePair {
    pub a: usize,
    pub b: usize,
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridTaskSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub centers: Vec<Vec<f64>>,
    /// Isotropic per-dimension noise shared by all classes.
    pub noise: f64,
    pub confusable: Vec<ConfusablePair>,
    /// Relative class frequencies; normalised internally.
    pub class_priors: Vec<f64>,
    /// Labelled pixels per class.
    pub label_budget: usize,
    pub seed: u64,
}

/// `K` centres at `radius * e_i`, cycling through the axes when `K > C`
/// with alternating sign.
pub fn axis_centers(num_classes: usize, dim: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|k| {
            let mut c = vec![0.0; dim];
            let sign = if (k / dim.max(1)) % 2 == 0 { 1.0 } else { -1.0 };
            c[k % dim] = sign * radius;
            c
        })
        .collect()
}

impl GridTaskSpec {
    /// 64x64 grid, four classes in eight dimensions, classes 2 and 3
    /// confusable, five labels per class.
    pub fn desk_default(seed: u64) -> Self {
        GridTaskSpec {
            height: 64,
            width: 64,
            num_classes: 4,
            feature_dim: 8,
            centers: axis_centers(4, 8, 2.0),
            noise: 0.6,
            confusable: vec![ConfusablePair {
                a: 2,
                b: 3,
                overlap: 1.0,
            }],
            class_priors: vec![1.0; 4],
            label_budget: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid("num_classes", "need at least 2 classes"));
        }
        if self.height == 0 || self.width == 0 || self.feature_dim == 0 {
            return Err(invalid("grid", "height, width and feature_dim must be positive"));
        }
        if self.label_budget == 0 {
            return Err(invalid("label_budget", "must be at least 1"));
        }
        check_centers(&self.centers, self.num_classes, self.feature_dim)?;
        check_noise(self.noise)?;
        check_pairs(&self.confusable, self.num_classes)?;
        if self.class_priors.len() != self.num_classes {
            return Err(Error::DimensionMismatch {
                context: "class_priors",
                expected: self.num_classes,
                actual: self.class_priors.len(),
            });
        }
        if self.class_priors.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(invalid("class_priors", "entries must be positive"));
        }
        Ok(())
    }
}

fn check_centers(centers: &[Vec<f64>], k: usize, dim: usize) -> Result<()> {
    if centers.len() != k {
        return Err(Error::DimensionMismatch {
            context: "centers",
            expected: k,
            actual: centers.len(),
        });
    }
    if let Some(c) = centers.iter().find(|c| c.len() != dim) {
        return Err(Error::DimensionMismatch {
            context: "center dimension",
            expected: dim,
            actual: c.len(),
        });
    }
    if centers.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("centers", "non-finite coordinate"));
    }
    Ok(())
}

fn check_noise(noise: f64) -> Result<()> {
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(invalid("noise", format!("must be non-negative, got {noise}")));
    }
    Ok(())
}

fn check_pairs(pairs: &[ConfusablePair], k: usize) -> Result<()> {
    for p in pairs {
        if p.a >= k || p.b >= k || p.a == p.b {
            return Err(invalid("confusable", format!("bad pair ({}, {})", p.a, p.b)));
        }
        if !(p.overlap > 0.0) || !p.overlap.is_finite() {
            return Err(invalid(
                "confusable",
                format!("overlap must be positive, got {}", p.overlap),
            ));
        }
    }
    Ok(())
}

/// One feature vector with its true class. For unlabelled units the label is
/// kept only for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Labelled,
    Unlabelled,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridDataset {
    pub labelled: Vec<Unit>,
    pub unlabelled: Vec<Unit>,
    /// Full held-out grid in row-major order.
    pub test: Vec<Unit>,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

/// Per-class counts summing to `n`, proportional to `priors`, with the
/// remainder going to the largest fractional parts (lowest index on ties).
pub fn allocate_counts(priors: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = priors.iter().sum();
    let exact: Vec<f64> = priors.iter().map(|p| p / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..priors.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Draws one feature vector of class `class`.
pub(crate) fn sample_features<R: Rng + ?Sized>(
    rng: &mut R,
    class: usize,
    centers: &[Vec<f64>],
    noise: f64,
    pairs: &[ConfusablePair],
) -> Vec<f64> {
    let mut x: Vec<f64> = centers[class]
        .iter()
        .map(|c| c + noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    for p in pairs.iter().filter(|p| p.a == class || p.b == class) {
        let dir: Vec<f64> = centers[p.b].iter().zip(&centers[p.a]).map(|(b, a)| b - a).collect();
        let n = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        if n > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            for (xi, di) in x.iter_mut().zip(&dir) {
                *xi += p.overlap * z * di / n;
            }
        }
    }
    x
}

fn grid_labels(spec: &GridTaskSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = spec.height * spec.width;
    let counts = allocate_counts(&spec.class_priors, n);
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &m)| std::iter::repeat_n(c, m))
        .collect();
    labels.shuffle(rng);
    labels
}

/// Training grid split into labelled and unlabelled pixels plus a separate
/// test grid of the same size.
pub fn gen_grid(spec: &GridTaskSpec) -> Result<GridDataset> {
    spec.validate()?;
    let n = spec.height * spec.width;
    let mut label_rng = rng_for(&[spec.seed, 1]);
    let mut feat_rng = rng_for(&[spec.seed, 2]);
    let mut pick_rng = rng_for(&[spec.seed, 3]);
    let mut test_rng = rng_for(&[spec.seed, 4]);

    let train_labels = grid_labels(spec, &mut label_rng);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); spec.num_classes];
    for (i, &c) in train_labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut is_labelled = vec![false; n];
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < spec.label_budget {
            return Err(Error::BudgetExceeded {
                class,
                budget: spec.label_budget,
                available: members.len(),
            });
        }
        for &i in members.choose_multiple(&mut pick_rng, spec.label_budget) {
            is_labelled[i] = true;
        }
    }

    let mut labelled = Vec::with_capacity(spec.label_budget * spec.num_classes);
    let mut unlabelled = Vec::with_capacity(n);
    for (i, &label) in train_labels.iter().enumerate() {
        let unit = Unit {
            id: i as u64,
            features: sample_features(&mut feat_rng, label, &spec.centers, spec.noise, &spec.confusable),
            label,
        };
        if is_labelled[i] {
            labelled.push(unit);
        } else {
            unlabelled.push(unit);
        }
    }

    let test_labels = grid_labels(spec, &mut test_rng);
    let test = test_labels
        .iter()
        .enumerate()
        .map(|(i, &label)| Unit {
            id: (n + i) as u64,
            features: sample_features(&mut test_rng, label, &spec.centers, spec.noise, &spec.confusable),
            label,
        })
        .collect();

    Ok(GridDataset {
        labelled,
        unlabelled,
        test,
        height: spec.height,
        width: spec.width,
        num_classes: spec.num_classes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strength {
    Weak,
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewParams {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub mask_prob: f64,
}

impl Default for ViewParams {
    fn default() -> Self {
        ViewParams {
            weak_sigma: 0.05,
            strong_sigma: 0.3,
            mask_prob: 0.5,
        }
    }
}

impl ViewParams {
    pub fn validate(&self) -> Result<()> {
        check_noise(self.weak_sigma)?;
        check_noise(self.strong_sigma)?;
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(invalid(
                "mask_prob",
                format!("must lie in [0, 1], got {}", self.mask_prob),
            ));
        }
        Ok(())
    }
}

/// Weak: additive Gaussian noise. Strong: larger noise, then each coordinate
/// zeroed independently with `mask_prob`. Pure in `(features, seed)`.
pub fn perturb(features: &[f64], strength: Strength, params: &ViewParams, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = match strength {
        Strength::Weak => params.weak_sigma,
        Strength::Strong => params.strong_sigma,
    };
    let mut out: Vec<f64> = features
        .iter()
        .map(|x| {
            let z: f64 = rng.sample(StandardNormal);
            if sigma == 0.0 {
                *x
            } else {
                x + sigma * z
            }
        })
        .collect();
    if strength == Strength::Strong && params.mask_prob > 0.0 {
        for x in &mut out {
            if rng.random::<f64>() < params.mask_prob {
                *x = 0.0;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneTaskSpec {
    /// Scenes are squares `[0, extent]^2`.
    pub extent: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Foreground classes; background is index `num_fg`.
    pub num_fg: usize,
    pub feature_dim: usize,
    /// `num_fg + 1` centres, background last.
    pub centers: Vec<Vec<f64>>,
    pub noise: f64,
    pub confusable: Vec<ConfusablePair>,
    pub min_size: f64,
    pub max_size: f64,
    /// Proposal jitter as a fraction of box size.
    pub jitter: f64,
    pub background_proposals: usize,
    /// Noise on the regression cue appended to proposal features.
    pub reg_noise: f64,
    pub labelled_scenes: usize,
    pub unlabelled_scenes: usize,
    pub test_scenes: usize,
    pub seed: u64,
}

impl SceneTaskSpec {
    pub fn desk_default(seed: u64) -> Self {
        SceneTaskSpec {
            extent: 100.0,
            min_objects: 2,
            max_objects: 5,
            num_fg: 4,
            feature_dim: 8,
            centers: axis_centers(5, 8, 2.0),
            noise: 0.6,
            confusable: vec![ConfusablePair {
                a: 2,
                b: 3,
                overlap: 1.0,
            }],
            min_size: 10.0,
            max_size: 30.0,
            jitter: 0.08,
            background_proposals: 3,
            reg_noise: 0.02,
            labelled_scenes: 8,
            unlabelled_scenes: 120,
            test_scenes: 60,
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_fg + 1
    }

    pub fn bg_index(&self) -> usize {
        self.num_fg
    }

    /// Input width of a proposal: appearance plus four regression cues.
    pub fn input_dim(&self) -> usize {
        self.feature_dim + 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_fg < 2 {
            return Err(invalid("num_fg", "need at least 2 foreground classes"));
        }
        if !(self.extent > 0.0)
            || !(self.min_size > 0.0)
            || self.max_size < self.min_size
            || self.max_size >= self.extent
        {
            return Err(invalid("scene geometry", "need 0 < min_size <= max_size < extent"));
        }
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            return Err(invalid("objects", "need 1 <= min_objects <= max_objects"));
        }
        if self.labelled_scenes == 0 {
            return Err(invalid("labelled_scenes", "must be at least 1"));
        }
        check_centers(&self.centers, self.num_fg + 1, self.feature_dim)?;
        check_noise(self.noise)?;
        check_noise(self.jitter)?;
        check_noise(self.reg_noise)?;
        check_pairs(&self.confusable, self.num_fg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: BBox,
    pub class: usize,
}

/// A candidate region. `features` holds the appearance followed by a noisy
/// estimate of the offset to the nearest object; `target` is that object's
/// box for foreground proposals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub features: Vec<f64>,
    pub class: usize,
    pub target: Option<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub objects: Vec<SceneObject>,
    pub proposals: Vec<Proposal>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub labelled: Vec<Scene>,
    pub unlabelled: Vec<Scene>,
    pub test: Vec<Scene>,
    pub num_fg: usize,
}

fn random_box<R: Rng + ?Sized>(rng: &mut R, spec: &SceneTaskSpec) -> BBox {
    let w = rng.random_range(spec.min_size..=spec.max_size);
    let h = rng.random_range(spec.min_size..=spec.max_size);
    let x = rng.random_range(0.0..spec.extent - w);
    let y = rng.random_range(0.0..spec.extent - h);
    BBox::new(x, y, x + w, y + h).expect("positive size")
}

/// Box with each side moved by `N(0, (jitter * size)^2)`, clamped to keep a
/// positive extent.
pub fn jitter_box<R: Rng + ?Sized>(rng: &mut R, b: &BBox, jitter: f64) -> BBox {
    if jitter == 0.0 {
        return *b;
    }
    let (w, h) = (b.width(), b.height());
    let mut d = [0.0; 4];
    for (i, v) in d.iter_mut().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * jitter * if i % 2 == 0 { w } else { h };
    }
    let a1 = b.a1() + d[0];
    let b1 = b.b1() + d[1];
    let a2 = (b.a2() + d[2]).max(a1 + 0.1 * w);
    let b2 = (b.b2() + d[3]).max(b1 + 0.1 * h);
    BBox::new(a1, b1, a2, b2).expect("clamped to positive size")
}

fn gen_one_scene(spec: &SceneTaskSpec, id: u64) -> Scene {
    let mut rng = rng_for(&[spec.seed, 10, id]);
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count && attempts < 200 {
        attempts += 1;
        let bbox = random_box(&mut rng, spec);
        if objects.iter().all(|o| iou(&o.bbox, &bbox) < 0.1) {
            objects.push(SceneObject {
                bbox,
                class: rng.random_range(0..spec.num_fg),
            });
        }
    }
    let cue = |rng: &mut ChaCha8Rng, d: [f64; 4]| -> Vec<f64> {
        d.iter()
            .map(|v| v + spec.reg_noise * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let mut proposals = Vec::with_capacity(objects.len() + spec.background_proposals);
    for o in &objects {
        let bbox = jitter_box(&mut rng, &o.bbox, spec.jitter);
        let mut features = sample_features(&mut rng, o.class, &spec.centers, spec.noise, &spec.confusable);
        features.extend(cue(&mut rng, o.bbox.deltas_from(&bbox)));
        proposals.push(Proposal {
            bbox,
            features,
            class: o.class,
            target: Some(o.bbox),
        });
    }
    let mut placed = 0;
    attempts = 0;
    while placed < spec.background_proposals && attempts < 200 {
        attempts += 1;
        let bbox = random_box(&mut rng, spec);
        if objects.iter().all(|o| iou(&o.bbox, &bbox) < 0.3) {
            let mut features = sample_features(&mut rng, spec.num_fg, &spec.centers, spec.noise, &[]);
            features.extend(cue(&mut rng, [0.0; 4]));
            proposals.push(Proposal {
                bbox,
                features,
                class: spec.num_fg,
                target: None,
            });
            placed += 1;
        }
    }
    Scene { id, objects, proposals }
}

pub fn gen_scene(spec: &SceneTaskSpec) -> Result<SceneDataset> {
    spec.validate()?;
    let (nl, nu) = (spec.labelled_scenes as u64, spec.unlabelled_scenes as u64);
    let nt = spec.test_scenes as u64;
    let scenes = |range: std::ops::Range<u64>| range.map(|id| gen_one_scene(spec, id)).collect::<Vec<_>>();
    Ok(SceneDataset {
        labelled: scenes(0..nl),
        unlabelled: scenes(nl..nl + nu),
        test: scenes(nl + nu..nl + nu + nt),
        num_fg: spec.num_fg,
    })
}

/// One line of a dataset cache file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: u64,
    pub split: Split,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl GridDataset {
    /// Records in split order; unlabelled units carry no label.
    pub fn records(&self) -> impl Iterator<Item = Record> + '_ {
        tag_units(&self.labelled, Split::Labelled)
            .chain(tag_units(&self.unlabelled, Split::Unlabelled))
            .chain(tag_units(&self.test, Split::Test))
    }
}

fn tag_units(units: &[Unit], split: Split) -> impl Iterator<Item = Record> + '_ {
    units.iter().map(move |u| Record {
        id: u.id,
        split,
        features: u.features.clone(),
        label: (split != Split::Unlabelled).then_some(u.label),
    })
}

pub fn write_records<W: Write>(mut out: W, records: impl IntoIterator<Item = Record>) -> std::io::Result<usize> {
    let mut n = 0;
    for r in records {
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

pub fn read_records<R: BufRead>(input: R) -> std::io::Result<Vec<Record>> {
    input
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(std::io::Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_spec(seed: u64) -> GridTaskSpec {
        GridTaskSpec {
            height: 16,
            width: 16,
            ..GridTaskSpec::desk_default(seed)
        }
    }

    #[test]
    fn grid_is_deterministic_in_seed() {
        let a = gen_grid(&small_spec(3)).unwrap();
        let b = gen_grid(&small_spec(3)).unwrap();
        assert_eq!(a, b);
        let c = gen_grid(&small_spec(4)).unwrap();
        assert_ne!(a.unlabelled, c.unlabelled);
    }

    #[test]
    fn grid_split_sizes_and_disjointness() {
        let spec = GridTaskSpec::desk_default(1);
        let d = gen_grid(&spec).unwrap();
        assert_eq!(d.labelled.len(), spec.label_budget * spec.num_classes);
        assert_eq!(d.labelled.len() + d.unlabelled.len(), 64 * 64);
        assert_eq!(d.test.len(), 64 * 64);
        assert!(d.unlabelled.len() > 100 * d.labelled.len());
        for c in 0..spec.num_classes {
            assert_eq!(d.labelled.iter().filter(|u| u.label == c).count(), spec.label_budget);
        }
        let train: HashSet<u64> = d.labelled.iter().chain(&d.unlabelled).map(|u| u.id).collect();
        assert_eq!(train.len(), 64 * 64);
        assert!(d.test.iter().all(|u| !train.contains(&u.id)));
    }

    #[test]
    fn class_priors_are_matched() {
        let spec = GridTaskSpec {
            class_priors: vec![0.1, 0.2, 0.3, 0.4],
            ..GridTaskSpec::desk_default(2)
        };
        let d = gen_grid(&spec).unwrap();
        for units in [&d.test, &d.unlabelled] {
            for (c, p) in spec.class_priors.iter().enumerate() {
                let frac = units.iter().filter(|u| u.label == c).count() as f64 / units.len() as f64;
                assert!((frac - p).abs() < 0.02, "class {c}: {frac} vs {p}");
            }
        }
    }

    #[test]
    fn budget_exceeding_class_size_is_an_error() {
        let spec = GridTaskSpec {
            height: 4,
            width: 4,
            label_budget: 5,
            ..GridTaskSpec::desk_default(0)
        };
        assert!(matches!(gen_grid(&spec), Err(Error::BudgetExceeded { .. })));
        let bad = GridTaskSpec {
            num_classes: 1,
            ..GridTaskSpec::desk_default(0)
        };
        assert!(gen_grid(&bad).is_err());
    }

    #[test]
    fn allocation_is_exact() {
        assert_eq!(allocate_counts(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(allocate_counts(&[0.1, 0.2, 0.3, 0.4], 4096).iter().sum::<usize>(), 4096);
    }

    /// Least-squares one-vs-all linear classifier on the labelled pool.
    fn linear_accuracy(train: &[Unit], test: &[Unit], k: usize) -> f64 {
        let dim = train[0].features.len() + 1;
        let mut ata = vec![vec![0.0; dim]; dim];
        let mut atb = vec![vec![0.0; k]; dim];
        for u in train {
            let x: Vec<f64> = u.features.iter().copied().chain([1.0]).collect();
            for i in 0..dim {
                for j in 0..dim {
                    ata[i][j] += x[i] * x[j];
                }
                atb[i][u.label] += x[i];
            }
        }
        for (i, row) in ata.iter_mut().enumerate() {
            row[i] += 1e-6;
        }
        // Gauss-Jordan on [ata | atb]
        for col in 0..dim {
            let piv = (col..dim)
                .max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs()))
                .unwrap();
            ata.swap(col, piv);
            atb.swap(col, piv);
            let d = ata[col][col];
            for j in 0..dim {
                ata[col][j] /= d;
            }
            for j in 0..k {
                atb[col][j] /= d;
            }
            for r in 0..dim {
                if r != col {
                    let m = ata[r][col];
                    for j in 0..dim {
                        ata[r][j] -= m * ata[col][j];
                    }
                    for j in 0..k {
                        atb[r][j] -= m * atb[col][j];
                    }
                }
            }
        }
        let correct = test
            .iter()
            .filter(|u| {
                let x: Vec<f64> = u.features.iter().copied().chain([1.0]).collect();
                let scores: Vec<f64> = (0..k).map(|c| (0..dim).map(|i| x[i] * atb[i][c]).sum()).collect();
                crate::classifier::argmax(&scores) == u.label
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn separable_without_overlap() {
        let spec = GridTaskSpec {
            noise: 0.35,
            confusable: vec![ConfusablePair {
                a: 2,
                b: 3,
                overlap: 1e-9,
            }],
            ..GridTaskSpec::desk_default(5)
        };
        let d = gen_grid(&spec).unwrap();
        let full: Vec<Unit> = d.labelled.iter().chain(&d.unlabelled).cloned().collect();
        assert!(linear_accuracy(&full, &d.test, spec.num_classes) >= 0.99);
    }

    #[test]
    fn perturb_examples() {
        let x = vec![1.0, -2.0, 0.5, 3.0];
        let none = ViewParams {
            weak_sigma: 0.0,
            ..ViewParams::default()
        };
        assert_eq!(perturb(&x, Strength::Weak, &none, 7), x);
        let all_masked = ViewParams {
            mask_prob: 1.0,
            ..ViewParams::default()
        };
        assert!(perturb(&x, Strength::Strong, &all_masked, 7).iter().all(|v| *v == 0.0));
        let p = ViewParams::default();
        let w = perturb(&x, Strength::Weak, &p, 11);
        let s = perturb(&x, Strength::Strong, &p, 11);
        assert_ne!(w, s);
        assert_eq!(w, perturb(&x, Strength::Weak, &p, 11));
        assert_eq!(s, perturb(&x, Strength::Strong, &p, 11));
    }

    #[test]
    fn scenes_are_deterministic_and_inside_extent() {
        let spec = SceneTaskSpec::desk_default(4);
        let a = gen_scene(&spec).unwrap();
        assert_eq!(a, gen_scene(&spec).unwrap());
        assert_eq!(a.labelled.len(), spec.labelled_scenes);
        let ids: HashSet<u64> = a.labelled.iter().chain(&a.unlabelled).map(|s| s.id).collect();
        assert!(a.test.iter().all(|s| !ids.contains(&s.id)));
        for s in a.labelled.iter().chain(&a.unlabelled).chain(&a.test) {
            assert!(!s.objects.is_empty());
            for o in &s.objects {
                assert!(o.bbox.a1() >= 0.0 && o.bbox.b1() >= 0.0);
                assert!(o.bbox.a2() <= spec.extent && o.bbox.b2() <= spec.extent);
            }
            for p in &s.proposals {
                assert_eq!(p.features.len(), spec.input_dim());
            }
        }
    }

    #[test]
    fn zero_jitter_proposals_coincide_with_objects() {
        let spec = SceneTaskSpec {
            jitter: 0.0,
            ..SceneTaskSpec::desk_default(2)
        };
        let d = gen_scene(&spec).unwrap();
        for s in &d.unlabelled {
            for (o, p) in s.objects.iter().zip(&s.proposals) {
                assert_eq!(o.bbox, p.bbox);
            }
        }
    }

    #[test]
    fn confusion_concentrates_on_the_confusable_pair() {
        let nearest = |x: &[f64], centers: &[Vec<f64>]| {
            let d: Vec<f64> = centers
                .iter()
                .map(|c| -c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .collect();
            crate::classifier::argmax(&d)
        };
        let (mut confusing, mut in_pair) = (0usize, 0usize);
        for seed in 0..10 {
            let spec = SceneTaskSpec {
                confusable: vec![ConfusablePair {
                    a: 2,
                    b: 3,
                    overlap: 1.5,
                }],
                noise: 0.35,
                ..SceneTaskSpec::desk_default(seed)
            };
            let d = gen_scene(&spec).unwrap();
            let fg = &spec.centers[..spec.num_fg];
            // two noisy perceptions of each object, no masking
            let view = ViewParams {
                strong_sigma: 0.15,
                mask_prob: 0.0,
                ..ViewParams::default()
            };
            for s in &d.unlabelled {
                for (i, p) in s.proposals.iter().enumerate().filter(|(_, p)| p.target.is_some()) {
                    let app = &p.features[..spec.feature_dim];
                    let one = nearest(
                        &perturb(app, Strength::Strong, &view, mix_seed(&[s.id, i as u64, 1])),
                        fg,
                    );
                    let two = nearest(
                        &perturb(app, Strength::Strong, &view, mix_seed(&[s.id, i as u64, 2])),
                        fg,
                    );
                    if one != two {
                        confusing += 1;
                        in_pair += ([one, two] == [2, 3] || [one, two] == [3, 2]) as usize;
                    }
                }
            }
        }
        assert!(confusing > 0);
        assert!(in_pair as f64 >= 0.8 * confusing as f64, "{in_pair}/{confusing}");
    }

    #[test]
    fn records_round_trip() {
        let d = gen_grid(&small_spec(9)).unwrap();
        let mut buf = Vec::new();
        let n = write_records(&mut buf, d.records()).unwrap();
        assert_eq!(n, d.labelled.len() + d.unlabelled.len() + d.test.len());
        let back = read_records(&buf[..]).unwrap();
        assert_eq!(back.len(), n);
        assert!(back
            .iter()
            .filter(|r| r.split == Split::Unlabelled)
            .all(|r| r.label.is_none()));
        assert_eq!(back[0].features, d.labelled[0].features);
        assert!(serde_json::from_str::<Record>(r#"{"id":1,"split":"test","features":[],"extra":1}"#).is_err());
    }
}
