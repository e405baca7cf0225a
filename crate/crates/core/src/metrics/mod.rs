//! Image-quality metrics between generated and ground-truth slices.
//!
//! Metrics are computed in unit space: MRI intensities are mapped from
//! [-1, 1] to [0, 1] and the data range is 1.

mod external;
mod report;
mod ssim;

pub use external::{ExternalCommandMetric, PairMetric};
pub use report::{evaluate, Aggregate, EvalItem, MetricReport, SliceMetrics, CSV_HEADER};
pub use ssim::{gaussian_window, ssim, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};

use crate::data::ImageGrid;
use crate::{Error, Result};

/// Border added around the GTV bounding box for local metrics.
pub const LOCAL_PAD: usize = 8;

/// Grid in metric space, values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct UnitGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl UnitGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} grid",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("nonempty")
    }

    pub fn from_image(image: &ImageGrid) -> Self {
        let values = image.to_unit().into_iter().map(f64::from).collect();
        Self::new(image.height(), image.width(), values).expect("image grids are nonempty")
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn crop(&self, b: &CropBox) -> Result<Self> {
        if b.row1 > self.height || b.col1 > self.width || b.row0 >= b.row1 || b.col0 >= b.col1 {
            return Err(Error::Shape(format!("crop {b:?} outside {:?}", self.dims())));
        }
        let mut values = Vec::with_capacity(b.height() * b.width());
        for r in b.row0..b.row1 {
            values.extend_from_slice(&self.values[r * self.width + b.col0..r * self.width + b.col1]);
        }
        Self::new(b.height(), b.width(), values)
    }
}

fn same_dims(a: &UnitGrid, b: &UnitGrid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse(a: &UnitGrid, b: &UnitGrid) -> Result<f64> {
    same_dims(a, b)?;
    let sum: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.values.len() as f64)
}

/// `10 log10(range² / mse)`; `f64::INFINITY` when `mse == 0`.
pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

pub fn psnr(a: &UnitGrid, b: &UnitGrid, data_range: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, data_range))
}

/// Half-open pixel box `[row0, row1) × [col0, col1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CropBox {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl CropBox {
    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }

    /// Grows the box symmetrically (then shifts it inside the image) until
    /// each side is at least `min` pixels or spans the whole image.
    pub fn at_least(&self, min: usize, height: usize, width: usize) -> CropBox {
        let grow = |lo: usize, hi: usize, limit: usize| {
            let want = min.min(limit);
            if hi - lo >= want {
                return (lo, hi);
            }
            let extra = want - (hi - lo);
            let lo = lo.saturating_sub(extra / 2);
            let hi = (lo + want).min(limit);
            (hi - want, hi)
        };
        let (row0, row1) = grow(self.row0, self.row1, height);
        let (col0, col1) = grow(self.col0, self.col1, width);
        CropBox {
            row0,
            row1,
            col0,
            col1,
        }
    }
}

/// Bounding box of the nonzero mask pixels padded by `pad` and clamped to
/// the image; `None` for an empty mask.
pub fn mask_bbox(mask: &ImageGrid, pad: usize) -> Option<CropBox> {
    let (h, w) = mask.dims();
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) != 0.0 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    (r0 != usize::MAX).then(|| CropBox {
        row0: r0.saturating_sub(pad),
        row1: (r1 + pad + 1).min(h),
        col0: c0.saturating_sub(pad),
        col1: (c1 + pad + 1).min(w),
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LocalMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// MSE over the mask pixels only.
    pub masked_mse: f64,
    pub crop: CropBox,
}

/// Metrics on the GTV bounding box padded by [`LOCAL_PAD`] pixels. SSIM
/// uses the same box widened to the SSIM window when the clamped box is
/// smaller than the window.
pub fn local_metrics(a: &UnitGrid, b: &UnitGrid, gtv: &ImageGrid) -> Result<LocalMetrics> {
    same_dims(a, b)?;
    if gtv.dims() != a.dims() {
        return Err(Error::Shape(format!("mask {:?} vs image {:?}", gtv.dims(), a.dims())));
    }
    let crop = mask_bbox(gtv, LOCAL_PAD)
        .ok_or_else(|| Error::InvalidInput("local metrics need a nonempty gtv mask".into()))?;
    let (ca, cb) = (a.crop(&crop)?, b.crop(&crop)?);
    let local_mse = mse(&ca, &cb)?;
    let (h, w) = a.dims();
    let ssim_box = crop.at_least(SSIM_WINDOW, h, w);
    let local_ssim = if ssim_box == crop {
        ssim(&ca, &cb)?
    } else {
        ssim(&a.crop(&ssim_box)?, &b.crop(&ssim_box)?)?
    };
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, m) in gtv.values().iter().enumerate() {
        if *m != 0.0 {
            let d = a.values[i] - b.values[i];
            sum += d * d;
            n += 1;
        }
    }
    Ok(LocalMetrics {
        mse: local_mse,
        psnr: psnr_from_mse(local_mse, 1.0),
        ssim: local_ssim,
        masked_mse: sum / n as f64,
        crop,
    })
}
