//! Procedural paired cohort standing in for clinical pre/post MRI.
//!
//! Every patient draws a latent prognosis `u` in [0, 1]. Patients are split
//! evenly into a poor group (`u` in [0, 0.3)) and a good group (`u` in
//! [0.7, 1]). The prognosis drives three observable quantities:
//!
//! * survival days, `120 + 1000 u`, so short survival means small `u`;
//! * lesion brightness on both slices, brighter for poor prognosis, which is
//!   what lets a classifier read the survival class off the pre slice;
//! * the post-treatment lesion radius, which grows by up to 1.5x for poor
//!   prognosis and shrinks to 0.6x for good prognosis.
//!
//! Pre and post slices share the same head, ventricles and texture; only the
//! lesion differs.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Cohort, ImageGrid, PatientRecord, SliceTriple};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Raw (pre-normalization) intensities.
const TISSUE: f32 = 0.45;
const VENTRICLE: f32 = 0.25;
const SKULL: f32 = 1.0;
/// Brain interior ends at this fraction of the head radius; the skull ring
/// fills the rest.
const BRAIN_FRACTION: f32 = 0.86;

/// Lesion detection threshold in normalized [-1, 1] intensity. Tissue and
/// texture stay below it, every lesion stays above it.
pub const LESION_THRESHOLD: f32 = 0.06;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub slices_per_patient: usize,
    pub size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_patients: 10,
            slices_per_patient: 4,
            size: 32,
        }
    }
}

struct Head {
    cx: f32,
    cy: f32,
    ax: f32,
    ay: f32,
    ventricles: [(f32, f32, f32, f32); 2],
    waves: [(f32, f32, f32); 3],
}

struct Lesion {
    cx: f32,
    cy: f32,
    radius: f32,
    brightness: f32,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Head {
    fn sample(rng: &mut Rng, size: f32) -> Self {
        let cx = size / 2.0 + rng.random_range(-0.04..0.04) * size;
        let cy = size / 2.0 + rng.random_range(-0.04..0.04) * size;
        let limit = 0.48 * size - (cx - size / 2.0).abs().max((cy - size / 2.0).abs());
        let ax = (rng.random_range(0.36..0.43) * size).min(limit);
        let ay = (rng.random_range(0.39..0.46) * size).min(limit);
        let vr = rng.random_range(0.045..0.07) * size;
        let vx = rng.random_range(0.05..0.08) * size;
        let vy = rng.random_range(-0.06..0.02) * size;
        let ventricles = [(cx - vx, cy + vy, vr * 0.7, vr), (cx + vx, cy + vy, vr * 0.7, vr)];
        let mut waves = [(0.0, 0.0, 0.0); 3];
        for w in waves.iter_mut() {
            let wavelength = rng.random_range(0.3..0.7) * size;
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            let k = std::f32::consts::TAU / wavelength;
            *w = (k * angle.cos(), k * angle.sin(), rng.random_range(0.0..std::f32::consts::TAU));
        }
        Self {
            cx,
            cy,
            ax,
            ay,
            ventricles,
            waves,
        }
    }

    /// Raw background intensity at pixel centre (x, y) for the axial slice at
    /// `offset`, whose head cross-section is scaled by `scale`.
    fn intensity(&self, x: f32, y: f32, scale: f32, offset: f32) -> f32 {
        let (ax, ay) = (self.ax * scale, self.ay * scale);
        let (dx, dy) = (x - self.cx, y - self.cy);
        let rho = ((dx / ax).powi(2) + (dy / ay).powi(2)).sqrt();
        // linear ramps half a pixel wide at the outer and inner skull boundaries,
        // so the exterior is exactly 0 and the skull core exactly 1
        let px = ax.min(ay);
        let head = ((1.0 - rho) * px * 2.0 + 0.5).clamp(0.0, 1.0);
        let brain = ((BRAIN_FRACTION - rho) * px * 2.0 + 0.5).clamp(0.0, 1.0);
        let mut tissue = TISSUE;
        for (k, (wx, wy, phase)) in self.waves.iter().enumerate() {
            let amp = 0.016 / (k as f32 + 1.0).sqrt();
            tissue += amp * (wx * x + wy * y + phase + 2.5 * offset).sin();
        }
        for (vx, vy, rx, ry) in &self.ventricles {
            let r = (((x - vx) / (rx * scale)).powi(2) + ((y - vy) / (ry * scale)).powi(2)).sqrt();
            let w = sigmoid((1.0 - r) * rx * scale / 0.4);
            tissue = tissue * (1.0 - w) + VENTRICLE * w;
        }
        head * (SKULL * (1.0 - brain) + tissue * brain)
    }
}

impl Lesion {
    fn weight(&self, x: f32, y: f32, radius: f32) -> f32 {
        let d = ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt();
        sigmoid((radius - d) / 0.5)
    }

    fn inside(&self, x: f32, y: f32, radius: f32) -> bool {
        ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt() <= radius
    }
}

/// Min-max normalization into [-1, 1].
fn normalize(raw: &[f32]) -> Vec<f32> {
    let lo = raw.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = raw.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    raw.iter().map(|v| ((v - lo) / span * 2.0 - 1.0).clamp(-1.0, 1.0)).collect()
}

fn render(size: usize, head: &Head, (scale, offset): (f32, f32), lesion: &Lesion, radius: f32) -> Vec<f32> {
    let mut raw = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f32 + 0.5, r as f32 + 0.5);
            let bg = head.intensity(x, y, scale, offset);
            let w = lesion.weight(x, y, radius);
            raw.push((bg * (1.0 - w) + lesion.brightness * w).clamp(0.0, 1.0));
        }
    }
    normalize(&raw)
}

fn generate_patient(cfg: &SynthConfig, index: usize, poor: bool) -> Result<PatientRecord> {
    let size = cfg.size as f32;
    let mut rng = rng::stream(cfg.seed, &["synth", "patient", &index.to_string()]);
    let u: f32 = if poor {
        rng.random_range(0.0..0.3)
    } else {
        rng.random_range(0.7..=1.0)
    };
    let survival_days = (120.0 + 1000.0 * u).round() as u32;
    let growth = 1.5 - 0.9 * u;
    let head = Head::sample(&mut rng, size);

    let radius = rng.random_range(2.2..3.6) * size / 32.0;
    let brain_radius = BRAIN_FRACTION * head.ax.min(head.ay) * 0.98;
    let room = (brain_radius - (2.0 * radius + 3.0 * size / 32.0)).max(0.0);
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let dist = room * rng.random_range(0.0f32..1.0).sqrt();
    let lesion = Lesion {
        cx: head.cx + dist * angle.cos(),
        cy: head.cy + dist * angle.sin(),
        radius,
        brightness: 0.95 - 0.35 * u,
    };
    // axial position of the lesion centre relative to the middle slice
    let depth = rng.random_range(-0.2f32..0.2);

    let n = cfg.slices_per_patient;
    let mut slices = Vec::with_capacity(n);
    for k in 0..n {
        let offset = if n == 1 { 0.0 } else { -0.5 + k as f32 / (n - 1) as f32 };
        let scale = (1.0 - (0.3 * offset).powi(2)).sqrt();
        let rel = offset - depth;
        let r_pre = lesion.radius * (1.0 - rel * rel).sqrt();
        let r_post = r_pre * growth;
        let pre = render(cfg.size, &head, (scale, offset), &lesion, r_pre);
        let post = render(cfg.size, &head, (scale, offset), &lesion, r_post);
        let mut gtv = Vec::with_capacity(cfg.size * cfg.size);
        for r in 0..cfg.size {
            for c in 0..cfg.size {
                let inside = lesion.inside(c as f32 + 0.5, r as f32 + 0.5, r_pre);
                gtv.push(if inside { 1.0 } else { 0.0 });
            }
        }
        slices.push(SliceTriple::new(
            ImageGrid::intensity(cfg.size, cfg.size, pre)?,
            ImageGrid::mask(cfg.size, cfg.size, gtv)?,
            ImageGrid::intensity(cfg.size, cfg.size, post)?,
        )?);
    }
    Ok(PatientRecord {
        patient_id: format!("p{index:03}"),
        slices,
        survival_days,
    })
}

/// Deterministic synthetic cohort; identical configs give bit-identical output.
pub fn generate_synthetic_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    if cfg.n_patients < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 patients, got {}",
            cfg.n_patients
        )));
    }
    if cfg.size < 16 {
        return Err(Error::InvalidInput(format!(
            "size {} too small to place a lesion (minimum 16)",
            cfg.size
        )));
    }
    if cfg.slices_per_patient == 0 {
        return Err(Error::InvalidInput("slices_per_patient must be positive".into()));
    }
    let mut groups: Vec<bool> = (0..cfg.n_patients).map(|i| i < cfg.n_patients / 2).collect();
    if cfg.n_patients % 2 == 1 {
        let last = cfg.n_patients - 1;
        groups[last] = rng::stream(cfg.seed, &["synth", "odd"]).random_bool(0.5);
    }
    groups.shuffle(&mut rng::stream(cfg.seed, &["synth", "groups"]));
    let patients = groups
        .iter()
        .enumerate()
        .map(|(i, poor)| generate_patient(cfg, i, *poor))
        .collect::<Result<Vec<_>>>()?;
    Cohort::new(patients)
}

/// Lesion area estimate: pixels above [`LESION_THRESHOLD`] inside a disk
/// around the GTV centroid with radius `2 r_eq + 1.5`, where `r_eq` is the
/// radius of a disk with the GTV's area. The disk covers any post-treatment
/// growth of the synthetic lesions while staying inside the skull.
pub fn lesion_area(image: &ImageGrid, gtv: &ImageGrid) -> Result<usize> {
    if image.dims() != gtv.dims() {
        return Err(Error::Shape(format!("image {:?} vs gtv {:?}", image.dims(), gtv.dims())));
    }
    let (h, w) = gtv.dims();
    let (mut n, mut sr, mut sc) = (0usize, 0f64, 0f64);
    for r in 0..h {
        for c in 0..w {
            if gtv.get(r, c) != 0.0 {
                n += 1;
                sr += r as f64;
                sc += c as f64;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("empty gtv mask".into()));
    }
    let (cr, cc) = (sr / n as f64, sc / n as f64);
    let radius = 2.0 * (n as f64 / std::f64::consts::PI).sqrt() + 1.5;
    let mut area = 0;
    for r in 0..h {
        for c in 0..w {
            let d = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt();
            if d <= radius && image.get(r, c) > LESION_THRESHOLD {
                area += 1;
            }
        }
    }
    Ok(area)
}
