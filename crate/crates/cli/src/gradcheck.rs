//! Finite-difference checks of every VC loss form on random instances.
//!
//! Each case draws a student feature `f` (dimension `C`), classifier weights
//! `W` (`K x C`), a teacher feature for the virtual weight, and a PC of size
//! 2 to 4. Gradients are taken wrt the flat vector `[f, W]`; the generator
//! form instead differentiates its own objective wrt the attention
//! parameters. The error of a case is the worst coordinate of
//! `|analytic - numeric| / max(1, |analytic|)`.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vcforge::classifier::ClassifierWeights;
use vcforge::diffcore::{eval_with_grad, finite_diff_check, Graph, NodeId, Shape};
use vcforge::synthdata::mix_seed;
use vcforge::vclearn::{
    cosine_sim_loss, extend_logits, generator_objective, make_virtual_weight_normalized, neg_loss, vc_ce_loss,
    vc_mse_loss, AttentionGenerator, ConfidentSample, MagnitudePolicy, PcSource, PotentialCategorySet, VirtualWeight,
    DEFAULT_FOCAL_GAMMA,
};

pub const FEATURE_DIM: usize = 8;
pub const NUM_CLASSES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradForm {
    VcCe,
    VcCeFocal,
    VcMse,
    Neg,
    Cosine,
    /// Attention generator parameters under its confident-sample objective.
    Generator,
}

impl GradForm {
    pub const ALL: [GradForm; 6] = [
        GradForm::VcCe,
        GradForm::VcCeFocal,
        GradForm::VcMse,
        GradForm::Neg,
        GradForm::Cosine,
        GradForm::Generator,
    ];
}

impl fmt::Display for GradForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GradForm::VcCe => "vc-ce",
            GradForm::VcCeFocal => "vc-ce-focal",
            GradForm::VcMse => "vc-mse",
            GradForm::Neg => "neg",
            GradForm::Cosine => "cosine",
            GradForm::Generator => "generator",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub cases_per_form: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Negates the largest analytic coordinate of every case of this form.
    /// Only for checking that the suite catches broken gradients.
    pub sign_flip: Option<GradForm>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            cases_per_form: 200,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            sign_flip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FormReport {
    pub form: GradForm,
    pub cases: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseFailure {
    pub form: GradForm,
    pub case: usize,
    /// Relative error, or the evaluation error text.
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub forms: Vec<FormReport>,
    pub failures: Vec<CaseFailure>,
}

impl GradcheckReport {
    pub fn total_cases(&self) -> usize {
        self.forms.iter().map(|f| f.cases).sum()
    }

    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>6} {:>9} {:>14}",
            "form", "cases", "failures", "max_rel_error"
        )?;
        for r in &self.forms {
            writeln!(
                f,
                "{:<12} {:>6} {:>9} {:>14.3e}",
                r.form.to_string(),
                r.cases,
                r.failures,
                r.max_rel_error
            )?;
        }
        write!(
            f,
            "total {} cases, {} failures",
            self.total_cases(),
            self.failures.len()
        )
    }
}

/// One random instance shared by the `[f, W]` forms.
struct Instance {
    point: Vec<f64>,
    wv: VirtualWeight,
    pc: PotentialCategorySet,
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_weights(rng: &mut ChaCha8Rng) -> ClassifierWeights {
    let rows: Vec<Vec<f64>> = (0..NUM_CLASSES).map(|_| uniform_vec(rng, FEATURE_DIM)).collect();
    ClassifierWeights::new(&rows).expect("random rows have positive norm")
}

fn instance(rng: &mut ChaCha8Rng) -> vcforge::Result<Instance> {
    let f = uniform_vec(rng, FEATURE_DIM);
    let w = random_weights(rng);
    let f_t = uniform_vec(rng, FEATURE_DIM);
    let wv = make_virtual_weight_normalized(&f_t, &w, MagnitudePolicy::MinWeightNorm)?;
    let size = rng.random_range(2..=4);
    let pc = PotentialCategorySet::new(sample(rng, NUM_CLASSES, size), NUM_CLASSES, PcSource::Label)?;
    let mut point = f;
    point.extend_from_slice(w.as_flat());
    Ok(Instance { point, wv, pc })
}

/// Splits the flat leaf into a feature vector and a `K x C` weight matrix.
fn split(g: &mut Graph, x: NodeId) -> vcforge::Result<(NodeId, NodeId)> {
    let f = g.slice(x, 0, FEATURE_DIM)?;
    let w = g.slice(x, FEATURE_DIM, NUM_CLASSES * FEATURE_DIM)?;
    let w = g.reshape(w, Shape::Matrix(NUM_CLASSES, FEATURE_DIM))?;
    Ok((f, w))
}

fn loss_at(form: GradForm, inst: &Instance, point: &[f64]) -> vcforge::Result<(f64, Vec<f64>)> {
    eval_with_grad(point, |g, x| {
        let (f, w) = split(g, x)?;
        match form {
            GradForm::VcCe | GradForm::VcCeFocal => {
                let ext = extend_logits(g, f, w, &inst.wv)?;
                let focal = (form == GradForm::VcCeFocal).then_some(DEFAULT_FOCAL_GAMMA);
                vc_ce_loss(g, &ext, &inst.pc, focal)
            }
            GradForm::VcMse => {
                let ext = extend_logits(g, f, w, &inst.wv)?;
                vc_mse_loss(g, &ext, &inst.pc)
            }
            GradForm::Neg => {
                let logits = g.matvec(w, f)?;
                neg_loss(g, logits, &inst.pc)
            }
            GradForm::Cosine => cosine_sim_loss(g, f, &inst.wv, w, &inst.pc),
            GradForm::Generator => unreachable!("generator handled separately"),
        }
    })
}

fn generator_at(sample: &ConfidentSample, w: &ClassifierWeights, point: &[f64]) -> vcforge::Result<(f64, Vec<f64>)> {
    let gen = AttentionGenerator::from_params(FEATURE_DIM, point.to_vec())?;
    let (g, obj) = generator_objective(&gen, sample, w, MagnitudePolicy::MinWeightNorm)?;
    let value = g.scalar_value(obj.loss).unwrap_or(f64::NAN);
    let grads = g.backward(obj.loss)?;
    Ok((value, grads.wrt(obj.params)?.data().to_vec()))
}

fn flip_largest(grad: &mut [f64]) {
    if let Some(i) = (0..grad.len()).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())) {
        grad[i] = -grad[i];
    }
}

/// Runs one case and returns its worst relative error.
fn check_case(form: GradForm, rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> vcforge::Result<f64> {
    let flip = cfg.sign_flip == Some(form);
    let with_fault = |r: vcforge::Result<(f64, Vec<f64>)>, first: &mut bool| {
        r.map(|(v, mut grad)| {
            if flip && std::mem::take(first) {
                flip_largest(&mut grad);
            }
            (v, grad)
        })
    };
    // finite_diff_check reads the analytic gradient from the first call only.
    let mut first = true;
    if form == GradForm::Generator {
        let w = random_weights(rng);
        let sample = ConfidentSample {
            feature: uniform_vec(rng, FEATURE_DIM),
            teacher_feature: uniform_vec(rng, FEATURE_DIM),
            label: rng.random_range(0..NUM_CLASSES),
        };
        let gen = AttentionGenerator::new(FEATURE_DIM, 0.3, rng)?;
        let point = gen.params().to_vec();
        finite_diff_check(
            |p| with_fault(generator_at(&sample, &w, p), &mut first),
            &point,
            cfg.step,
        )
    } else {
        let inst = instance(rng)?;
        finite_diff_check(
            |p| with_fault(loss_at(form, &inst, p), &mut first),
            &inst.point,
            cfg.step,
        )
    }
}

/// Checks `cases_per_form` instances of every form. Instances depend only
/// on `(seed, form, case)`.
pub fn gradcheck_suite(cfg: &GradcheckConfig) -> GradcheckReport {
    let mut forms = Vec::new();
    let mut failures = Vec::new();
    for (k, &form) in GradForm::ALL.iter().enumerate() {
        let mut report = FormReport {
            form,
            cases: cfg.cases_per_form,
            failures: 0,
            max_rel_error: 0.0,
        };
        for case in 0..cfg.cases_per_form {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, k as u64, case as u64]));
            let detail = match check_case(form, &mut rng, cfg) {
                Ok(err) => {
                    report.max_rel_error = report.max_rel_error.max(err);
                    if err <= cfg.tolerance {
                        continue;
                    }
                    format!("relative error {err:.3e}")
                }
                Err(e) => e.to_string(),
            };
            report.failures += 1;
            failures.push(CaseFailure { form, case, detail });
        }
        forms.push(report);
    }
    GradcheckReport { forms, failures }
}
