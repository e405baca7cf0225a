use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassMode {
    TwoClass,
    FourClass,
}

impl ClassMode {
    pub fn n_classes(self) -> usize {
        match self {
            ClassMode::TwoClass => 2,
            ClassMode::FourClass => 4,
        }
    }

    fn quantiles(self) -> &'static [f64] {
        match self {
            ClassMode::TwoClass => &[0.5],
            ClassMode::FourClass => &[0.25, 0.5, 0.75],
        }
    }
}

/// Survival thresholds fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalClassScheme {
    pub mode: ClassMode,
    pub thresholds: Vec<u32>,
    /// Reserved unconditional token; equals the number of real classes.
    pub null_class_index: usize,
    /// Set when ties collapsed two or more thresholds onto one value.
    pub degenerate: bool,
}

impl SurvivalClassScheme {
    pub fn n_classes(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// Number of thresholds strictly below `survival_days`; a survival equal
    /// to a threshold falls in the lower class.
    pub fn class_of(&self, survival_days: u32) -> usize {
        self.thresholds.iter().filter(|t| **t < survival_days).count()
    }
}

/// Lower-interpolation order statistic: element `floor((n - 1) * q)` of the
/// sorted sample.
pub fn lower_quantile(sorted: &[u32], q: f64) -> u32 {
    let idx = ((sorted.len() - 1) as f64 * q).floor() as usize;
    sorted[idx]
}

/// Fits class thresholds from the survival times of the training patients only.
pub fn fit_survival_scheme(train_survival_days: &[u32], mode: ClassMode) -> Result<SurvivalClassScheme> {
    if train_survival_days.is_empty() {
        return Err(Error::InvalidInput("cannot fit survival classes on an empty training set".into()));
    }
    let mut sorted = train_survival_days.to_vec();
    sorted.sort_unstable();
    let thresholds: Vec<u32> = mode.quantiles().iter().map(|q| lower_quantile(&sorted, *q)).collect();
    let lo = sorted[0];
    let degenerate =
        thresholds.windows(2).any(|w| w[0] >= w[1]) || sorted.iter().all(|s| *s == lo);
    if degenerate {
        log::warn!("degenerate survival thresholds {thresholds:?}: ties collapse classes");
    }
    Ok(SurvivalClassScheme {
        mode,
        thresholds,
        null_class_index: mode.n_classes(),
        degenerate,
    })
}
