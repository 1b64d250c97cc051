//! Product quantization of packed non-zero vectors.

use rand_chacha::ChaCha8Rng;

use super::kmeans;
use crate::rng;
use crate::{Error, Result};

/// Learned centroid table: `columns` independent codebooks, each holding
/// `num_centroids` sub-vectors of length `subvec_len`.
///
/// Column `j` quantizes the `j`-th sub-vector of the packed non-zero stream;
/// vectors shorter than `columns * subvec_len` are zero-padded, longer ones
/// reuse the last column for their overflow sub-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PQCodebook {
    subvec_len: usize,
    num_centroids: usize,
    columns: usize,
    /// `[column][centroid][component]`, flattened row-major.
    centroids: Vec<f32>,
}

/// A vector encoded as one centroid index per sub-vector plus its original
/// (pre-padding) length.
#[derive(Debug, Clone, PartialEq)]
pub struct PQEncoded {
    indices: Vec<u8>,
    original_len: usize,
}

impl PQEncoded {
    pub fn new(indices: Vec<u8>, original_len: usize) -> Self {
        Self { indices, original_len }
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }
}

impl PQCodebook {
    /// Learn per-column codebooks from a corpus of packed non-zero vectors.
    ///
    /// The column count is fixed by the longest training vector. Each column
    /// runs k-means (k-means++ init, `iters` Lloyd rounds) on its aligned,
    /// zero-padded sub-vectors, with an independent seeded stream so columns
    /// do not perturb one another.
    pub fn train(
        vectors: &[Vec<f32>],
        subvec_len: usize,
        num_centroids: usize,
        iters: usize,
        seed: u64,
    ) -> Result<Self> {
        if subvec_len < 1 {
            return Err(Error::Validation("sub-vector length must be >= 1".into()));
        }
        if num_centroids < 1 || num_centroids > 256 {
            return Err(Error::Validation(format!(
                "centroid count {num_centroids} outside [1, 256] (indices are one byte)"
            )));
        }
        if vectors.is_empty() {
            return Err(Error::Training("pq training requires at least one vector".into()));
        }
        let max_len = vectors.iter().map(|v| v.len()).max().unwrap_or(0);
        if max_len == 0 {
            return Err(Error::Training("pq training vectors are all empty".into()));
        }
        let columns = max_len.div_ceil(subvec_len);
        if vectors.len() < num_centroids {
            return Err(Error::Training(format!(
                "pq column 0 sees {} sub-vectors but needs >= {} (one per centroid)",
                vectors.len(),
                num_centroids
            )));
        }

        let mut centroids = Vec::with_capacity(columns * num_centroids * subvec_len);
        for col in 0..columns {
            let mut points = Vec::with_capacity(vectors.len() * subvec_len);
            for v in vectors {
                let start = col * subvec_len;
                for i in 0..subvec_len {
                    points.push(v.get(start + i).copied().unwrap_or(0.0));
                }
            }
            let mut col_rng: ChaCha8Rng = rng::stream(seed, &format!("pq-column-{col}"));
            let result = kmeans::run(&points, subvec_len, num_centroids, iters, &mut col_rng);
            centroids.extend_from_slice(&result.centroids);
        }
        Ok(Self { subvec_len, num_centroids, columns, centroids })
    }

    /// Rebuild a codebook from stored fields (file loads, tests).
    pub fn from_parts(
        subvec_len: usize,
        num_centroids: usize,
        columns: usize,
        centroids: Vec<f32>,
    ) -> Result<Self> {
        if num_centroids > 256 {
            return Err(Error::Validation("centroid count exceeds one-byte index range".into()));
        }
        if centroids.len() != subvec_len * num_centroids * columns {
            return Err(Error::Corruption(format!(
                "codebook has {} values, expected {}",
                centroids.len(),
                subvec_len * num_centroids * columns
            )));
        }
        Ok(Self { subvec_len, num_centroids, columns, centroids })
    }

    pub fn subvec_len(&self) -> usize {
        self.subvec_len
    }

    pub fn num_centroids(&self) -> usize {
        self.num_centroids
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn centroid(&self, column: usize, index: usize) -> &[f32] {
        let base = (column * self.num_centroids + index) * self.subvec_len;
        &self.centroids[base..base + self.subvec_len]
    }

    pub fn centroid_data(&self) -> &[f32] {
        &self.centroids
    }

    fn column_for(&self, subvec_idx: usize) -> usize {
        subvec_idx.min(self.columns - 1)
    }

    /// Encode a packed non-zero vector: one index per sub-vector, nearest
    /// centroid by Euclidean distance, lowest index on ties. The trailing
    /// partial sub-vector is zero-padded before the distance scan.
    pub fn encode(&self, v: &[f32]) -> PQEncoded {
        let s = v.len().div_ceil(self.subvec_len);
        let mut indices = Vec::with_capacity(s);
        let mut padded = vec![0.0f32; self.subvec_len];
        for j in 0..s {
            let start = j * self.subvec_len;
            for (i, slot) in padded.iter_mut().enumerate() {
                *slot = v.get(start + i).copied().unwrap_or(0.0);
            }
            let col = self.column_for(j);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..self.num_centroids {
                let d = kmeans::squared_distance(&padded, self.centroid(col, c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            indices.push(best as u8);
        }
        PQEncoded { indices, original_len: v.len() }
    }

    /// Reconstruct the packed non-zero vector: concatenated centroids,
    /// truncated to the original length.
    pub fn decode(&self, encoded: &PQEncoded) -> Result<Vec<f32>> {
        let expected = encoded.original_len.div_ceil(self.subvec_len);
        if encoded.indices.len() != expected {
            return Err(Error::Config(format!(
                "encoding holds {} indices but a sub-vector length of {} implies {}",
                encoded.indices.len(),
                self.subvec_len,
                expected
            )));
        }
        let mut out = Vec::with_capacity(encoded.indices.len() * self.subvec_len);
        for (j, &idx) in encoded.indices.iter().enumerate() {
            if usize::from(idx) >= self.num_centroids {
                return Err(Error::Corruption(format!(
                    "pq index {} out of range for {} centroids",
                    idx, self.num_centroids
                )));
            }
            out.extend_from_slice(self.centroid(self.column_for(j), usize::from(idx)));
        }
        out.truncate(encoded.original_len);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn toy_codebook() -> PQCodebook {
        // 2 columns, 3 centroids, sub-vector length 2.
        let centroids = vec![
            0.0, 0.0, /**/ 1.0, 1.0, /**/ 2.0, 2.0, // column 0
            0.5, 0.5, /**/ 3.0, 3.0, /**/ 6.0, 6.0, // column 1
        ];
        PQCodebook::from_parts(2, 3, 2, centroids).unwrap()
    }

    #[test]
    fn first_centroid_concatenation_encodes_to_zero_indices() {
        let cb = toy_codebook();
        let v = [0.0, 0.0, 0.5, 0.5];
        let e = cb.encode(&v);
        assert_eq!(e.indices(), &[0, 0]);
        assert_eq!(cb.decode(&e).unwrap(), v.to_vec());
    }

    #[test]
    fn index_count_is_ceil_d_over_l() {
        let vectors: Vec<Vec<f32>> = (0..8).map(|i| vec![i as f32; 256]).collect();
        let cb = PQCodebook::train(&vectors, 32, 4, 10, 3).unwrap();
        let e = cb.encode(&vec![0.25; 256]);
        assert_eq!(e.indices().len(), 8);
        // 8 one-byte indices is the whole payload
        assert_eq!(cb.columns(), 8);
    }

    #[test]
    fn encode_matches_exhaustive_scan() {
        let mut rng = stream(12, "pq");
        let vectors: Vec<Vec<f32>> =
            (0..64).map(|_| (0..24).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect();
        let cb = PQCodebook::train(&vectors, 4, 16, 15, 99).unwrap();
        for _ in 0..50 {
            let v: Vec<f32> = (0..24).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let e = cb.encode(&v);
            for (j, &idx) in e.indices().iter().enumerate() {
                let mut padded = vec![0.0f32; 4];
                for i in 0..4 {
                    padded[i] = v.get(j * 4 + i).copied().unwrap_or(0.0);
                }
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for c in 0..cb.num_centroids() {
                    let d = kmeans::squared_distance(&padded, cb.centroid(j.min(cb.columns() - 1), c));
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                assert_eq!(usize::from(idx), best);
            }
        }
    }

    #[test]
    fn reconstruction_error_is_sum_of_column_distances() {
        let cb = toy_codebook();
        let v = [0.3f32, -0.2, 2.9, 3.4];
        let e = cb.encode(&v);
        let back = cb.decode(&e).unwrap();
        let direct: f64 = v.iter().zip(&back).map(|(a, b)| f64::from(a - b).powi(2)).sum();
        let mut by_column = 0.0f64;
        for (j, &idx) in e.indices().iter().enumerate() {
            let mut padded = vec![0.0f32; 2];
            for i in 0..2 {
                padded[i] = v.get(j * 2 + i).copied().unwrap_or(0.0);
            }
            by_column += kmeans::squared_distance(&padded, cb.centroid(j, usize::from(idx)));
        }
        assert!((direct - by_column).abs() < 1e-9);
    }

    #[test]
    fn decode_rejects_out_of_range_index() {
        let cb = toy_codebook();
        let bad = PQEncoded::new(vec![0, 7], 4);
        assert!(matches!(cb.decode(&bad).unwrap_err(), crate::Error::Corruption(_)));
    }

    #[test]
    fn decode_rejects_mismatched_subvec_len() {
        let cb = toy_codebook();
        // 3 indices for a 4-long vector implies L != 2.
        let bad = PQEncoded::new(vec![0, 0, 0], 4);
        assert!(matches!(cb.decode(&bad).unwrap_err(), crate::Error::Config(_)));
    }

    #[test]
    fn train_rejects_insufficient_vectors() {
        let vectors: Vec<Vec<f32>> = (0..3).map(|i| vec![i as f32; 8]).collect();
        let err = PQCodebook::train(&vectors, 4, 16, 10, 1).unwrap_err();
        assert!(err.to_string().contains("column 0"));
    }

    #[test]
    fn train_rejects_oversized_k() {
        let vectors: Vec<Vec<f32>> = (0..300).map(|i| vec![i as f32; 8]).collect();
        assert!(PQCodebook::train(&vectors, 4, 257, 10, 1).is_err());
    }

    #[test]
    fn held_out_mse_close_to_training_mse() {
        // Clustered sub-vector data: both splits draw from the same mixture
        // of 8 templates, so quantization error must generalize.
        let mut rng = stream(31, "pq-gen");
        let templates: Vec<Vec<f32>> = (0..8)
            .map(|_| (0..8).map(|_| rng.gen_range(-2.0f32..2.0)).collect())
            .collect();
        let mut make = |count: usize| -> Vec<Vec<f32>> {
            (0..count)
                .map(|_| {
                    let mut v = Vec::with_capacity(32);
                    for _ in 0..4 {
                        let t = &templates[rng.gen_range(0..templates.len())];
                        v.extend(t.iter().map(|&c| c + rng.gen_range(-0.1f32..0.1)));
                    }
                    v
                })
                .collect()
        };
        let train = make(1000);
        let held_out = make(1000);
        let cb = PQCodebook::train(&train, 8, 8, 25, 7).unwrap();
        let mse = |set: &[Vec<f32>]| -> f64 {
            let mut total = 0.0f64;
            let mut count = 0usize;
            for v in set {
                let back = cb.decode(&cb.encode(v)).unwrap();
                total += v.iter().zip(&back).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>();
                count += v.len();
            }
            total / count as f64
        };
        let train_mse = mse(&train);
        let held_mse = mse(&held_out);
        assert!(
            held_mse <= train_mse * 1.05,
            "held-out mse {held_mse} vs train {train_mse}"
        );
    }
}
