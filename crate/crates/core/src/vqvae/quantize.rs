use candle_core::{DType, Tensor};

use super::LatentGrid;
use crate::{Error, Result};

/// Index of the codebook row nearest to `vector` in Euclidean distance and
/// the squared distance; ties resolve to the lowest index.
pub fn nearest_code(vector: &[f32], codebook: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, entry) in codebook.chunks_exact(dim).enumerate() {
        let d2: f64 = vector
            .iter()
            .zip(entry)
            .map(|(a, b)| {
                let d = *a as f64 - *b as f64;
                d * d
            })
            .sum();
        if d2 < best.1 {
            best = (k, d2);
        }
    }
    best
}

/// Snaps every vector of `z_e` to its nearest entry of the (K × d) row-major
/// `codebook`. The output vectors are bit-exact codebook copies.
pub fn quantize(z_e: &LatentGrid, codebook: &[f32], dim: usize) -> Result<(LatentGrid, Vec<usize>)> {
    if z_e.channels != dim {
        return Err(Error::Shape(format!(
            "latent has {} channels, codebook dimension is {dim}",
            z_e.channels
        )));
    }
    if codebook.len() < 2 * dim || codebook.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "codebook of {} values is not K×{dim} with K ≥ 2",
            codebook.len()
        )));
    }
    let mut values = Vec::with_capacity(z_e.values.len());
    let indices: Vec<usize> = z_e
        .values
        .chunks_exact(dim)
        .map(|v| {
            let (k, _) = nearest_code(v, codebook, dim);
            values.extend_from_slice(&codebook[k * dim..(k + 1) * dim]);
            k
        })
        .collect();
    let mut z_q = LatentGrid::new(z_e.height, z_e.width, dim, values)?;
    z_q.indices = Some(indices.clone());
    Ok((z_q, indices))
}

/// Tensor version for a (B, d, h, w) batch. Returns the quantized batch,
/// gathered from `codebook` (K, d) so gradients reach the codebook, and the
/// flat index list in (b, y, x) order.
pub fn quantize_tensor(z_e: &Tensor, codebook: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (b, d, h, w) = z_e.dims4()?;
    let (k, cd) = codebook.dims2()?;
    if cd != d {
        return Err(Error::Shape(format!("latent channels {d} vs codebook dim {cd}")));
    }
    let flat = z_e.permute((0, 2, 3, 1))?.contiguous()?.reshape((b * h * w, d))?;
    let vectors = flat.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let entries = codebook.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    debug_assert_eq!(entries.len(), k * d);
    let indices: Vec<u32> = vectors
        .chunks_exact(d)
        .map(|v| nearest_code(v, &entries, d).0 as u32)
        .collect();
    let idx = Tensor::new(indices.as_slice(), z_e.device())?;
    let z_q = codebook
        .index_select(&idx, 0)?
        .reshape((b, h, w, d))?
        .permute((0, 3, 1, 2))?
        .contiguous()?;
    Ok((z_q, indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(vecs: &[[f32; 2]]) -> LatentGrid {
        LatentGrid::new(1, vecs.len(), 2, vecs.iter().flatten().cloned().collect()).unwrap()
    }

    const BOOK: [f32; 4] = [0.0, 0.0, 1.0, 1.0];

    #[test]
    fn picks_nearest_entry() {
        // |(0.9,0.8)-(0,0)|² = 1.45, |(0.9,0.8)-(1,1)|² = 0.05
        let (_, idx) = quantize(&grid(&[[0.9, 0.8]]), &BOOK, 2).unwrap();
        assert_eq!(idx, vec![1]);
    }

    #[test]
    fn exact_member_is_a_fixed_point() {
        let (q, idx) = quantize(&grid(&[[1.0, 1.0]]), &BOOK, 2).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(q.values, vec![1.0, 1.0]);
        assert_eq!(nearest_code(&[1.0, 1.0], &BOOK, 2).1, 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let (_, idx) = quantize(&grid(&[[0.5, 0.5]]), &BOOK, 2).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(quantize(&grid(&[[0.5, 0.5]]), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 3).is_err());
    }

    proptest! {
        #[test]
        fn idempotent_and_codebook_members(
            book in proptest::collection::vec(-2.0f32..2.0, 6..24),
            vecs in proptest::collection::vec(-3.0f32..3.0, 3..30),
        ) {
            let dim = 3;
            let book = &book[..book.len() / dim * dim];
            let vecs = &vecs[..vecs.len() / dim * dim];
            let z = LatentGrid::new(1, vecs.len() / dim, dim, vecs.to_vec()).unwrap();
            let (q, idx) = quantize(&z, book, dim).unwrap();
            for (v, k) in q.values.chunks_exact(dim).zip(&idx) {
                let entry = &book[k * dim..(k + 1) * dim];
                prop_assert_eq!(
                    v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    entry.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                );
            }
            let (q2, idx2) = quantize(&q, book, dim).unwrap();
            prop_assert_eq!(&q2.values, &q.values);
            // identical indices unless the codebook repeats a vector
            for (a, b) in idx.iter().zip(&idx2) {
                prop_assert_eq!(&book[a * dim..(a + 1) * dim], &book[b * dim..(b + 1) * dim]);
                prop_assert!(b <= a);
            }
        }
    }
}
