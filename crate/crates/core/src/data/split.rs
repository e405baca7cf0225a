use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(format!("split ratios must be nonnegative: {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

impl std::str::FromStr for SplitRatios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad ratio `{p}`: {e}")))
            })
            .collect::<Result<_>>()?;
        match parts.as_slice() {
            [a, b, c] => Self::new(*a, *b, *c),
            _ => Err(Error::Config(format!("expected three ratios, got `{s}`"))),
        }
    }
}

/// Patient-level partition of a cohort.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl CohortSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Shuffles patient ids with a seeded stream; validation and test sizes are
/// `floor(n * ratio)`, the remainder goes to training.
pub fn split_patients(patient_ids: &[String], ratios: SplitRatios, seed: u64) -> Result<CohortSplit> {
    let (n_val, n_test) = part_sizes(patient_ids, ratios)?;
    let mut ids = patient_ids.to_vec();
    ids.shuffle(&mut rng::stream(seed, &["split"]));
    let test = ids[..n_test].to_vec();
    let val = ids[n_test..n_test + n_val].to_vec();
    let train = ids[n_test + n_val..].to_vec();
    Ok(CohortSplit {
        seed,
        train,
        val,
        test,
    })
}

fn part_sizes(patient_ids: &[String], ratios: SplitRatios) -> Result<(usize, usize)> {
    ratios.validate()?;
    let n = patient_ids.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 patients to split, got {n}")));
    }
    let unique: std::collections::HashSet<_> = patient_ids.iter().collect();
    if unique.len() != n {
        return Err(Error::InvalidInput("duplicate patient ids".into()));
    }
    // the epsilon keeps products like 0.1 * 140 from flooring one short
    let n_val = (n as f64 * ratios.val + 1e-9).floor() as usize;
    let n_test = (n as f64 * ratios.test + 1e-9).floor() as usize;
    Ok((n_val, n_test))
}

/// Takes `k` entries at evenly spaced ranks `floor((i + u) len / k)` with a
/// random offset `u` in [0, 1).
fn systematic_pick(sorted: &mut Vec<String>, k: usize, rng: &mut rng::Rng) -> Vec<String> {
    if k == 0 {
        return Vec::new();
    }
    let len = sorted.len();
    let u: f64 = rng.random();
    let positions: Vec<usize> = (0..k)
        .map(|i| (((i as f64 + u) * len as f64 / k as f64).floor() as usize).min(len - 1))
        .collect();
    let picked = positions.iter().map(|&p| sorted[p].clone()).collect();
    for &p in positions.iter().rev() {
        sorted.remove(p);
    }
    picked
}

/// Like [`split_patients`] with the same part sizes, but each part is drawn
/// at evenly spaced survival ranks, so every part covers the whole survival
/// range. With few patients this keeps the training median between the
/// prognosis groups instead of wherever a random draw leaves it.
pub fn split_stratified(patients: &[(String, u32)], ratios: SplitRatios, seed: u64) -> Result<CohortSplit> {
    let ids: Vec<String> = patients.iter().map(|(id, _)| id.clone()).collect();
    let (n_val, n_test) = part_sizes(&ids, ratios)?;
    let mut sorted = patients.to_vec();
    sorted.sort_by(|a, b| (a.1, &a.0).cmp(&(b.1, &b.0)));
    let mut remaining: Vec<String> = sorted.into_iter().map(|(id, _)| id).collect();
    let mut rng = rng::stream(seed, &["split", "stratified"]);
    let test = systematic_pick(&mut remaining, n_test, &mut rng);
    let val = systematic_pick(&mut remaining, n_val, &mut rng);
    remaining.shuffle(&mut rng);
    Ok(CohortSplit {
        seed,
        train: remaining,
        val,
        test,
    })
}
