//! Benchmark fixtures shared by the criterion targets.

use vcforge::classifier::ClassifierWeights;
use vcforge::vclearn::{PcSource, PotentialCategorySet};

/// Deterministic `k x c` weights with entries in `[-1, 1)`; never zero rows.
pub fn weights(k: usize, c: usize) -> ClassifierWeights {
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..c)
                .map(|j| ((i * 31 + j * 17) % 23) as f64 / 11.5 - 1.0 + 0.01)
                .collect()
        })
        .collect();
    ClassifierWeights::new(&rows).expect("rows are non-zero")
}

pub fn feature(c: usize, shift: usize) -> Vec<f64> {
    (0..c)
        .map(|j| ((j * 7 + shift) % 13) as f64 / 6.5 - 1.0 + 0.03)
        .collect()
}

pub fn pc(classes: &[usize], k: usize) -> PotentialCategorySet {
    PotentialCategorySet::new(classes.iter().copied(), k, PcSource::Label).expect("valid classes")
}
