use candle_core::Tensor;

use crate::Result;

/// Quantizer output whose forward value is `z_q` and whose gradient flows to
/// `z_e` unchanged.
pub fn straight_through(z_e: &Tensor, z_q: &Tensor) -> Result<Tensor> {
    Ok((z_e + (z_q - z_e)?.detach())?)
}

pub struct VqLoss {
    pub total: Tensor,
    pub reconstruction: Tensor,
    pub codebook: Tensor,
    pub commitment: Tensor,
}

/// `mean|x - x̂|² + mean|sg(z_e) - z_q|² + β mean|z_e - sg(z_q)|²`.
pub fn vqvae_loss(x: &Tensor, x_hat: &Tensor, z_e: &Tensor, z_q: &Tensor, beta_commit: f64) -> Result<VqLoss> {
    let reconstruction = (x - x_hat)?.sqr()?.mean_all()?;
    let codebook = (z_e.detach() - z_q)?.sqr()?.mean_all()?;
    let commitment = ((z_e - z_q.detach())?.sqr()?.mean_all()? * beta_commit)?;
    let total = ((&reconstruction + &codebook)? + &commitment)?;
    Ok(VqLoss {
        total,
        reconstruction,
        codebook,
        commitment,
    })
}
