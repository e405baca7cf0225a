//! Cohort directories: one `LTG1` file per slice plus a JSON manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_grid, read_mask, write_grid, Cohort, CohortSplit, PatientRecord, SliceTriple};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct CohortManifest {
    pub patients: Vec<PatientEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PatientEntry {
    pub patient_id: String,
    pub survival_days: u32,
    pub slices: Vec<SliceEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SliceEntry {
    pub pre: PathBuf,
    pub gtv: PathBuf,
    pub post: PathBuf,
}

pub fn write_cohort(dir: impl AsRef<Path>, cohort: &Cohort) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut patients = Vec::with_capacity(cohort.len());
    for p in &cohort.patients {
        let mut slices = Vec::with_capacity(p.slices.len());
        for (k, t) in p.slices.iter().enumerate() {
            let entry = SliceEntry {
                pre: PathBuf::from(&p.patient_id).join(format!("slice_{k:03}_pre.ltg")),
                gtv: PathBuf::from(&p.patient_id).join(format!("slice_{k:03}_gtv.ltg")),
                post: PathBuf::from(&p.patient_id).join(format!("slice_{k:03}_post.ltg")),
            };
            write_grid(dir.join(&entry.pre), &t.pre)?;
            write_grid(dir.join(&entry.gtv), &t.gtv)?;
            write_grid(dir.join(&entry.post), &t.post)?;
            slices.push(entry);
        }
        patients.push(PatientEntry {
            patient_id: p.patient_id.clone(),
            survival_days: p.survival_days,
            slices,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&CohortManifest { patients })?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a cohort from a directory containing `manifest.json` (or from the
/// manifest path itself). Slice paths are relative to the manifest.
pub fn read_cohort(path: impl AsRef<Path>) -> Result<Cohort> {
    let path = path.as_ref();
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CohortManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let mut patients = Vec::with_capacity(manifest.patients.len());
    for p in manifest.patients {
        let slices = p
            .slices
            .iter()
            .map(|s| {
                SliceTriple::new(
                    read_grid(base.join(&s.pre))?,
                    read_mask(base.join(&s.gtv))?,
                    read_grid(base.join(&s.post))?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        patients.push(PatientRecord {
            patient_id: p.patient_id,
            slices,
            survival_days: p.survival_days,
        });
    }
    Cohort::new(patients)
}

pub fn write_split(path: impl AsRef<Path>, split: &CohortSplit) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(split)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_split(path: impl AsRef<Path>) -> Result<CohortSplit> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
