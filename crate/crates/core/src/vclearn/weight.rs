use serde::{Deserialize, Serialize};

use crate::classifier::{l2_norm, ClassifierWeights};
use crate::error::{Error, Result};

/// How the norm of a virtual weight is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MagnitudePolicy {
    /// Smallest norm among the student's classifier weights.
    MinWeightNorm,
    Constant(f64),
}

impl MagnitudePolicy {
    pub fn magnitude(&self, weights: &ClassifierWeights) -> Result<f64> {
        match *self {
            MagnitudePolicy::MinWeightNorm => Ok(weights.min_norm()),
            MagnitudePolicy::Constant(c) if c > 0.0 && c.is_finite() => Ok(c),
            MagnitudePolicy::Constant(c) => Err(Error::InvalidMagnitude(c)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightOrigin {
    NormalizedTeacherFeature,
    AttentionGenerator,
}

/// Per-unit classifier weight appended for one loss evaluation. Always a
/// constant from the student's point of view.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualWeight {
    vector: Vec<f64>,
    magnitude: f64,
    origin: WeightOrigin,
}

impl VirtualWeight {
    /// Rescales `direction` to `magnitude`.
    pub(crate) fn from_direction(direction: &[f64], magnitude: f64, origin: WeightOrigin) -> Result<Self> {
        let n = l2_norm(direction);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroNormFeature);
        }
        if !(magnitude > 0.0) || !magnitude.is_finite() {
            return Err(Error::InvalidMagnitude(magnitude));
        }
        let vector = direction.iter().map(|x| x / n * magnitude).collect();
        Ok(VirtualWeight {
            vector,
            magnitude,
            origin,
        })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    pub fn origin(&self) -> WeightOrigin {
        self.origin
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// `w^v = f_t / |f_t| * magnitude`.
pub fn make_virtual_weight_normalized(
    f_teacher: &[f64],
    weights: &ClassifierWeights,
    policy: MagnitudePolicy,
) -> Result<VirtualWeight> {
    if f_teacher.len() != weights.dim() {
        return Err(Error::DimensionMismatch {
            context: "virtual weight",
            expected: weights.dim(),
            actual: f_teacher.len(),
        });
    }
    let magnitude = policy.magnitude(weights)?;
    VirtualWeight::from_direction(f_teacher, magnitude, WeightOrigin::NormalizedTeacherFeature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn weights() -> ClassifierWeights {
        ClassifierWeights::new(&[[2.0, 0.0], [0.0, 3.0], [3.0, 4.0]]).unwrap()
    }

    #[test]
    fn constant_magnitude_example() {
        let w = ClassifierWeights::new(&[[1.0, 0.0]]).unwrap();
        let v = make_virtual_weight_normalized(&[3.0, 4.0], &w, MagnitudePolicy::Constant(3.5)).unwrap();
        assert!((v.vector()[0] - 2.1).abs() < 1e-12);
        assert!((v.vector()[1] - 2.8).abs() < 1e-12);
        assert_eq!(v.magnitude(), 3.5);
        assert_eq!(v.origin(), WeightOrigin::NormalizedTeacherFeature);
    }

    #[test]
    fn min_norm_magnitude_example() {
        let v = make_virtual_weight_normalized(&[1.0, 0.0], &weights(), MagnitudePolicy::MinWeightNorm).unwrap();
        assert_eq!(v.vector(), &[2.0, 0.0]);
    }

    #[test]
    fn invalid_inputs() {
        assert_eq!(
            make_virtual_weight_normalized(&[0.0, 0.0], &weights(), MagnitudePolicy::MinWeightNorm),
            Err(Error::ZeroNormFeature)
        );
        assert_eq!(
            make_virtual_weight_normalized(&[1.0, 0.0], &weights(), MagnitudePolicy::Constant(0.0)),
            Err(Error::InvalidMagnitude(0.0))
        );
        assert_eq!(
            make_virtual_weight_normalized(&[1.0, 0.0], &weights(), MagnitudePolicy::Constant(-2.0)),
            Err(Error::InvalidMagnitude(-2.0))
        );
        assert!(matches!(
            make_virtual_weight_normalized(&[1.0], &weights(), MagnitudePolicy::MinWeightNorm),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn norm_equals_magnitude(f in prop::collection::vec(-10.0f64..10.0, 2), m in 0.01f64..50.0) {
            prop_assume!(l2_norm(&f) > 1e-6);
            for policy in [MagnitudePolicy::Constant(m), MagnitudePolicy::MinWeightNorm] {
                let v = make_virtual_weight_normalized(&f, &weights(), policy).unwrap();
                prop_assert!((l2_norm(v.vector()) - v.magnitude()).abs() < 1e-9);
            }
        }
    }
}
