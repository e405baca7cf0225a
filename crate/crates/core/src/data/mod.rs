//! Images, cohorts and everything needed to turn them into training triples.

mod augment;
pub mod format;
mod grid;
mod manifest;
mod split;
mod survival;
pub mod synth;

pub use augment::{augment_triple, hflip, shift};
pub use format::{read_grid, read_mask, write_grid};
pub use grid::{ImageGrid, ValueRange};
pub use manifest::{read_cohort, read_split, write_cohort, write_split};
pub use split::{split_patients, split_stratified, CohortSplit, SplitRatios};
pub use survival::{fit_survival_scheme, ClassMode, SurvivalClassScheme};
pub use synth::{generate_synthetic_cohort, lesion_area, SynthConfig};

use serde::{Deserialize, Serialize};

/// One aligned (pre, gtv, post) slice triple of a patient.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceTriple {
    pub pre: ImageGrid,
    pub gtv: ImageGrid,
    pub post: ImageGrid,
}

impl SliceTriple {
    pub fn new(pre: ImageGrid, gtv: ImageGrid, post: ImageGrid) -> crate::Result<Self> {
        let dims = pre.dims();
        if gtv.dims() != dims || post.dims() != dims {
            return Err(crate::Error::Shape(format!(
                "triple members differ: pre {:?}, gtv {:?}, post {:?}",
                dims,
                gtv.dims(),
                post.dims()
            )));
        }
        if gtv.range() != ValueRange::Binary {
            return Err(crate::Error::InvalidInput("gtv must be a binary mask".into()));
        }
        if gtv.count_nonzero() == 0 {
            return Err(crate::Error::InvalidInput("gtv mask is empty".into()));
        }
        Ok(Self { pre, gtv, post })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub slices: Vec<SliceTriple>,
    pub survival_days: u32,
}

/// Identifies one slice of one patient.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceKey {
    pub patient_id: String,
    pub slice: usize,
}

impl SliceKey {
    pub fn new(patient_id: impl Into<String>, slice: usize) -> Self {
        Self {
            patient_id: patient_id.into(),
            slice,
        }
    }

    /// Flat file stem used for per-slice directories, e.g. `p007__002`.
    pub fn file_stem(&self) -> String {
        format!("{}__{:03}", self.patient_id, self.slice)
    }

    pub fn parse_stem(stem: &str) -> Option<Self> {
        let (pid, idx) = stem.rsplit_once("__")?;
        Some(Self::new(pid, idx.parse().ok()?))
    }
}

impl std::fmt::Display for SliceKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}", self.patient_id, self.slice)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
}

impl Cohort {
    pub fn new(patients: Vec<PatientRecord>) -> crate::Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for p in &patients {
            if !seen.insert(p.patient_id.as_str()) {
                return Err(crate::Error::InvalidInput(format!(
                    "duplicate patient id {}",
                    p.patient_id
                )));
            }
        }
        Ok(Self { patients })
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn patient(&self, id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.patient_id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.patient_id.clone()).collect()
    }

    pub fn n_triples(&self) -> usize {
        self.patients.iter().map(|p| p.slices.len()).sum()
    }

    /// Patients of one split member, in split order.
    pub fn subset(&self, ids: &[String]) -> crate::Result<Vec<&PatientRecord>> {
        ids.iter()
            .map(|id| {
                self.patient(id)
                    .ok_or_else(|| crate::Error::InvalidInput(format!("unknown patient {id}")))
            })
            .collect()
    }

    /// All (key, triple, survival) entries of the given patients, in order.
    pub fn triples<'a>(
        &'a self,
        ids: &[String],
    ) -> crate::Result<Vec<(SliceKey, &'a SliceTriple, u32)>> {
        Ok(self
            .subset(ids)?
            .into_iter()
            .flat_map(|p| {
                p.slices.iter().enumerate().map(move |(k, t)| {
                    (SliceKey::new(p.patient_id.clone(), k), t, p.survival_days)
                })
            })
            .collect())
    }
}
