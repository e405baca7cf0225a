use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::data::{write_grid, ImageGrid};
use crate::{Error, Result};

/// A full-image comparison metric supplied from outside the crate (e.g. a
/// perceptual distance backed by pretrained weights).
pub trait PairMetric: Send + Sync {
    fn name(&self) -> &str;
    fn compute(&self, generated: &ImageGrid, truth: &ImageGrid) -> Result<f64>;
}

/// Runs `program [args..] GENERATED TRUTH` on two temporary `LTG1` files and
/// parses the last line of stdout as the metric value.
pub struct ExternalCommandMetric {
    pub name: String,
    pub program: PathBuf,
    pub args: Vec<String>,
}

static COUNTER: AtomicUsize = AtomicUsize::new(0);

impl PairMetric for ExternalCommandMetric {
    fn name(&self) -> &str {
        &self.name
    }

    fn compute(&self, generated: &ImageGrid, truth: &ImageGrid) -> Result<f64> {
        let id = COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir();
        let stem = format!("tumor-ldm-metric-{}-{id}", std::process::id());
        let (gen_path, truth_path) = (dir.join(format!("{stem}-gen.ltg")), dir.join(format!("{stem}-truth.ltg")));
        write_grid(&gen_path, generated)?;
        write_grid(&truth_path, truth)?;
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(&gen_path)
            .arg(&truth_path)
            .output();
        let _ = std::fs::remove_file(&gen_path);
        let _ = std::fs::remove_file(&truth_path);
        let output = output.map_err(|e| Error::io(&self.program, e))?;
        if !output.status.success() {
            return Err(Error::InvalidInput(format!(
                "metric `{}` exited with {}",
                self.name, output.status
            )));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        stdout
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .and_then(|l| l.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::InvalidInput(format!("metric `{}` printed no number", self.name)))
    }
}
