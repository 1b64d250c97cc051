//! Full two-stage compression of one labeled latent tensor.

use super::{BitmapCompressed, PQCodebook, PQEncoded};
use crate::{Error, Result};

/// Serialized record overhead: label (u32) + total length n (u32) +
/// non-zero count d (u32).
pub const SAMPLE_HEADER_BYTES: usize = 12;

/// One stored rehearsal unit: the presence bitmap of the latent tensor, the
/// PQ indices of its packed non-zero vector, and the class label.
///
/// Serialized size is exactly `SAMPLE_HEADER_BYTES + ceil(n / 8) +
/// ceil(nnz / L)` — the lossless stage's size law with the 4-bytes-per-value
/// term replaced by one byte per sub-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedSample {
    label: u32,
    n: usize,
    bitmap: Vec<u8>,
    pq: PQEncoded,
}

impl CompressedSample {
    /// Compress a latent tensor: bitmap stage first, then PQ on the packed
    /// non-zeros.
    pub fn compress(latent: &[f32], codebook: &PQCodebook, label: u32) -> Result<Self> {
        let stage1 = BitmapCompressed::compress(latent)?;
        let pq = codebook.encode(stage1.nonzeros());
        Ok(Self { label, n: stage1.total_len(), bitmap: stage1.bitmap_bytes().to_vec(), pq })
    }

    /// Reconstruct the full latent tensor: PQ-decoded values at the bitmap's
    /// one-positions, exact zeros everywhere else.
    pub fn decompress(&self, codebook: &PQCodebook) -> Result<Vec<f32>> {
        let nonzeros = codebook.decode(&self.pq)?;
        let stage1 = BitmapCompressed::from_parts(self.n, self.bitmap.clone(), nonzeros)?;
        stage1.decompress()
    }

    pub fn from_parts(label: u32, n: usize, bitmap: Vec<u8>, pq: PQEncoded) -> Result<Self> {
        if bitmap.len() != n.div_ceil(8) {
            return Err(Error::Corruption(format!(
                "bitmap of {} bytes cannot cover {} elements",
                bitmap.len(),
                n
            )));
        }
        let pop: usize = bitmap.iter().map(|b| b.count_ones() as usize).sum();
        if pop != pq.original_len() {
            return Err(Error::Corruption(format!(
                "bitmap popcount {} != encoded non-zero count {}",
                pop,
                pq.original_len()
            )));
        }
        Ok(Self { label, n, bitmap, pq })
    }

    pub fn label(&self) -> u32 {
        self.label
    }

    pub fn total_len(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.pq.original_len()
    }

    pub fn bitmap_bytes(&self) -> &[u8] {
        &self.bitmap
    }

    pub fn pq(&self) -> &PQEncoded {
        &self.pq
    }

    pub fn serialized_len(&self) -> usize {
        SAMPLE_HEADER_BYTES + self.bitmap.len() + self.pq.indices().len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&self.label.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.pq.original_len() as u32).to_le_bytes());
        out.extend_from_slice(&self.bitmap);
        out.extend_from_slice(self.pq.indices());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn trained_codebook(latents: &[Vec<f32>], subvec_len: usize, k: usize) -> PQCodebook {
        let nonzeros: Vec<Vec<f32>> = latents
            .iter()
            .map(|l| BitmapCompressed::compress(l).unwrap().into_nonzeros())
            .collect();
        PQCodebook::train(&nonzeros, subvec_len, k, 15, 17).unwrap()
    }

    fn sparse_latent(n: usize, sparsity: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f32> {
        (0..n)
            .map(|_| if rng.gen::<f64>() < sparsity { 0.0 } else { rng.gen_range(0.05f32..2.0) })
            .collect()
    }

    #[test]
    fn all_zero_latent_roundtrip() {
        let mut rng = stream(1, "sample");
        let latents: Vec<Vec<f32>> = (0..16).map(|_| sparse_latent(64, 0.9, &mut rng)).collect();
        let cb = trained_codebook(&latents, 8, 8);
        let sample = CompressedSample::compress(&vec![0.0; 64], &cb, 3).unwrap();
        assert_eq!(sample.pq().indices().len(), 0);
        assert_eq!(sample.nnz(), 0);
        let back = sample.decompress(&cb).unwrap();
        assert!(back.iter().all(|&v| v == 0.0));
        assert_eq!(back.len(), 64);
    }

    #[test]
    fn centroid_tiling_roundtrips_exactly() {
        let cb = PQCodebook::from_parts(
            2,
            2,
            2,
            vec![1.0, 2.0, 3.0, 4.0, /* col 1 */ 5.0, 6.0, 7.0, 8.0],
        )
        .unwrap();
        // latent whose non-zeros are centroid 1 of column 0 then centroid 0
        // of column 1
        let latent = vec![0.0, 3.0, 4.0, 0.0, 5.0, 6.0, 0.0, 0.0];
        let sample = CompressedSample::compress(&latent, &cb, 0).unwrap();
        let back = sample.decompress(&cb).unwrap();
        assert_eq!(back, latent);
    }

    #[test]
    fn zeros_survive_lossy_stage_exactly() {
        let mut rng = stream(2, "sample");
        let latents: Vec<Vec<f32>> = (0..32).map(|_| sparse_latent(128, 0.85, &mut rng)).collect();
        let cb = trained_codebook(&latents, 8, 16);
        for latent in latents.iter().take(8) {
            let sample = CompressedSample::compress(latent, &cb, 1).unwrap();
            let back = sample.decompress(&cb).unwrap();
            for (orig, rec) in latent.iter().zip(&back) {
                if *orig == 0.0 {
                    assert_eq!(*rec, 0.0);
                }
            }
        }
    }

    #[test]
    fn size_law_at_paper_scale_geometry() {
        // n = 2304 with 230 non-zeros (90% sparsity) and L = 32.
        let mut rng = stream(3, "sample");
        let mut latent = vec![0.0f32; 2304];
        let mut placed = 0;
        while placed < 230 {
            let i = rng.gen_range(0..2304);
            if latent[i] == 0.0 {
                latent[i] = rng.gen_range(0.1f32..1.0);
                placed += 1;
            }
        }
        let corpus: Vec<Vec<f32>> = (0..64).map(|_| sparse_latent(2304, 0.9, &mut rng)).collect();
        let cb = trained_codebook(&corpus, 32, 32);
        let sample = CompressedSample::compress(&latent, &cb, 0).unwrap();
        assert_eq!(sample.serialized_len(), SAMPLE_HEADER_BYTES + 288 + 8);
        assert_eq!(sample.to_bytes().len(), sample.serialized_len());
        let ratio = (4.0 * 2304.0) / sample.serialized_len() as f64;
        assert!((27.0..33.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn compression_ratio_non_increasing_in_nnz() {
        let mut rng = stream(4, "sample");
        let n = 512;
        let corpus: Vec<Vec<f32>> = (0..64).map(|_| sparse_latent(n, 0.5, &mut rng)).collect();
        let cb = trained_codebook(&corpus, 16, 16);
        let mut last_ratio = f64::INFINITY;
        for nnz in [0usize, 10, 50, 120, 256, 400, 512] {
            let mut latent = vec![0.0f32; n];
            for slot in latent.iter_mut().take(nnz) {
                *slot = rng.gen_range(0.1f32..1.0);
            }
            let sample = CompressedSample::compress(&latent, &cb, 0).unwrap();
            let ratio = (4 * n) as f64 / sample.serialized_len() as f64;
            assert!(ratio <= last_ratio + 1e-12, "ratio grew at nnz={nnz}");
            last_ratio = ratio;
        }
    }

    #[test]
    fn popcount_mismatch_rejected_at_assembly() {
        let pq = PQEncoded::new(vec![0], 3);
        let err = CompressedSample::from_parts(0, 8, vec![0b0000_0011], pq).unwrap_err();
        assert!(matches!(err, crate::Error::Corruption(_)));
    }
}
