use candle_core::{DType, Device, Tensor};

use crate::data::format::RawGrid;
use crate::{Error, Result};

/// H×W×C latent grid, row-major with channels fastest (the `LTG1` order).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
    /// Codebook index per position for quantized latents.
    pub indices: Option<Vec<usize>>,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} latent",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
            indices: None,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn vector(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.values[start..start + self.channels]
    }

    pub fn is_quantized(&self) -> bool {
        self.indices.is_some()
    }

    /// (1, C, H, W) tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_vec(
            self.values.clone(),
            (1, self.height, self.width, self.channels),
            &Device::Cpu,
        )?;
        Ok(t.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(dtype)?)
    }

    /// From a (C, H, W) or (1, C, H, W) tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            3 => t.clone(),
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            _ => return Err(Error::Shape(format!("expected (C,H,W), got {:?}", t.dims()))),
        };
        let (c, h, w) = t.dims3()?;
        let values = t
            .permute((1, 2, 0))?
            .contiguous()?
            .flatten_all()?
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?;
        Self::new(h, w, c, values)
    }

    pub fn to_raw(&self) -> RawGrid {
        RawGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            values: self.values.clone(),
        }
    }

    pub fn from_raw(raw: RawGrid) -> Result<Self> {
        Self::new(raw.height, raw.width, raw.channels, raw.values)
    }
}
