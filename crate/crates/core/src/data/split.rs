use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::dataset::LabeledDataset;
use crate::error::{Error, Result};

/// Assigns whole patients to the test split until it holds about
/// `test_fraction` of the images. Image order within each split follows the
/// input order.
pub fn patient_split<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    test_fraction: f64,
    rng: &mut R,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut members: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, p) in dataset.patient_ids().iter().enumerate() {
        members
            .entry(p.as_str())
            .or_insert_with(|| {
                order.push(p.as_str());
                Vec::new()
            })
            .push(i);
    }
    if order.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 distinct patients, found {}",
            order.len()
        )));
    }
    order.shuffle(rng);

    let target = (test_fraction * dataset.len() as f64).round() as usize;
    let mut in_test = vec![false; dataset.len()];
    let mut taken = 0;
    let mut test_patients = 0;
    for p in &order {
        let idx = &members[p];
        if taken + idx.len() <= target {
            taken += idx.len();
            test_patients += 1;
            for &i in idx {
                in_test[i] = true;
            }
        }
    }
    if test_patients == 0 {
        for &i in &members[order[0]] {
            in_test[i] = true;
        }
        test_patients = 1;
    }
    if test_patients == order.len() {
        for &i in &members[order[order.len() - 1]] {
            in_test[i] = false;
        }
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| in_test[i]);
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Raw three-valued annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawLabel {
    Negative,
    Uncertain,
    Positive,
}

impl std::str::FromStr for RawLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "neg" | "negative" | "0" | "0.0" => Ok(RawLabel::Negative),
            "uncertain" | "u" | "-1" | "-1.0" => Ok(RawLabel::Uncertain),
            "pos" | "positive" | "1" | "1.0" => Ok(RawLabel::Positive),
            other => Err(Error::Parse(format!("unknown label symbol `{other}`"))),
        }
    }
}

/// Uncertain annotations count as negative.
pub fn binarize_uncertain(raw: &[&str]) -> Result<Vec<bool>> {
    raw.iter()
        .map(|s| Ok(s.parse::<RawLabel>()? == RawLabel::Positive))
        .collect()
}
