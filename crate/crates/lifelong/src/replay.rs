//! Per-class storage of rehearsal samples with byte-exact accounting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::compress::{BitmapCompressed, CompressedSample, PQCodebook, SAMPLE_HEADER_BYTES};
use crate::{Error, Result};

/// How a rehearsal latent is held in the buffer.
///
/// `BitPq` is the deployment codec. `Bitmap` (lossless only) and `Raw`
/// (dense f32) exist as controls: with a frozen extractor, a lossless buffer
/// must reproduce raw-latent replay exactly.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleBody {
    Raw(Vec<f32>),
    Bitmap(BitmapCompressed),
    BitPq(CompressedSample),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredSample {
    label: u32,
    body: SampleBody,
}

impl StoredSample {
    pub fn raw(label: u32, latent: Vec<f32>) -> Self {
        Self { label, body: SampleBody::Raw(latent) }
    }

    pub fn bitmap(label: u32, latent: &[f32]) -> Result<Self> {
        Ok(Self { label, body: SampleBody::Bitmap(BitmapCompressed::compress(latent)?) })
    }

    pub fn bit_pq(label: u32, latent: &[f32], codebook: &PQCodebook) -> Result<Self> {
        Ok(Self { label, body: SampleBody::BitPq(CompressedSample::compress(latent, codebook, label)?) })
    }

    pub fn from_compressed(sample: CompressedSample) -> Self {
        Self { label: sample.label(), body: SampleBody::BitPq(sample) }
    }

    pub fn label(&self) -> u32 {
        self.label
    }

    pub fn body(&self) -> &SampleBody {
        &self.body
    }

    /// Serialized record size. Raw records are label + length + dense f32
    /// payload; the compressed forms follow their stage size laws with the
    /// shared 12-byte record header.
    pub fn byte_size(&self) -> usize {
        match &self.body {
            SampleBody::Raw(latent) => 8 + 4 * latent.len(),
            SampleBody::Bitmap(b) => {
                SAMPLE_HEADER_BYTES + b.bitmap_bytes().len() + 4 * b.nnz()
            }
            SampleBody::BitPq(s) => s.serialized_len(),
        }
    }

    /// Length of the latent this sample reconstructs to.
    pub fn latent_len(&self) -> usize {
        match &self.body {
            SampleBody::Raw(latent) => latent.len(),
            SampleBody::Bitmap(b) => b.total_len(),
            SampleBody::BitPq(s) => s.total_len(),
        }
    }

    /// Reconstruct the latent. The codebook is only required for `BitPq`
    /// bodies.
    pub fn decompress(&self, codebook: Option<&PQCodebook>) -> Result<Vec<f32>> {
        match &self.body {
            SampleBody::Raw(latent) => Ok(latent.clone()),
            SampleBody::Bitmap(b) => b.decompress(),
            SampleBody::BitPq(s) => {
                let cb = codebook.ok_or_else(|| {
                    Error::Config("decompressing a PQ sample requires a codebook".into())
                })?;
                s.decompress(cb)
            }
        }
    }
}

/// Per-class rehearsal storage. `byte_size` is maintained incrementally and
/// always equals the sum of serialized sizes of the stored samples.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    per_class: BTreeMap<u32, Vec<StoredSample>>,
    capacity_per_class: usize,
    byte_size: usize,
}

impl ReplayBuffer {
    pub fn new(capacity_per_class: usize) -> Self {
        Self { per_class: BTreeMap::new(), capacity_per_class, byte_size: 0 }
    }

    pub fn capacity_per_class(&self) -> usize {
        self.capacity_per_class
    }

    /// Append a sample. Capacity equals the per-class trajectory length, so
    /// hitting it means the caller is double-storing a class.
    pub fn store(&mut self, sample: StoredSample) -> Result<()> {
        let class = self.per_class.entry(sample.label()).or_default();
        if class.len() >= self.capacity_per_class {
            return Err(Error::Capacity {
                class_id: sample.label(),
                capacity: self.capacity_per_class,
            });
        }
        self.byte_size += sample.byte_size();
        class.push(sample);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.per_class.len()
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(|v| v.len()).sum()
    }

    pub fn byte_size(&self) -> usize {
        self.byte_size
    }

    /// Recompute the byte total from scratch (accounting cross-check).
    pub fn recompute_byte_size(&self) -> usize {
        self.per_class.values().flatten().map(|s| s.byte_size()).sum()
    }

    /// Iterate samples in deterministic (class, insertion) order.
    pub fn samples(&self) -> impl Iterator<Item = &StoredSample> {
        self.per_class.values().flatten()
    }

    /// Decompress every stored sample, in deterministic order.
    pub fn decompress_all(&self, codebook: Option<&PQCodebook>) -> Result<(Vec<Vec<f32>>, Vec<u32>)> {
        let mut latents = Vec::with_capacity(self.len());
        let mut labels = Vec::with_capacity(self.len());
        for sample in self.samples() {
            latents.push(sample.decompress(codebook)?);
            labels.push(sample.label());
        }
        Ok((latents, labels))
    }

    /// Draw `batch_size` samples uniformly without replacement across all
    /// classes and decompress them. An empty buffer yields an empty batch
    /// (the first class of a stream has nothing to rehearse); a batch larger
    /// than the buffer returns every sample exactly once.
    pub fn draw_replay_batch(
        &self,
        codebook: Option<&PQCodebook>,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Vec<f32>>, Vec<u32>)> {
        let all: Vec<&StoredSample> = self.samples().collect();
        let take = batch_size.min(all.len());
        let mut indices: Vec<usize> = (0..all.len()).collect();
        let (chosen, _) = indices.partial_shuffle(rng, take);
        let mut latents = Vec::with_capacity(take);
        let mut labels = Vec::with_capacity(take);
        for &i in chosen.iter() {
            latents.push(all[i].decompress(codebook)?);
            labels.push(all[i].label());
        }
        Ok((latents, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn toy_codebook(rng: &mut ChaCha8Rng) -> PQCodebook {
        let corpus: Vec<Vec<f32>> =
            (0..32).map(|_| (0..24).map(|_| rng.gen_range(0.0f32..1.0)).collect()).collect();
        PQCodebook::train(&corpus, 8, 8, 10, 5).unwrap()
    }

    fn sparse_latent(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n)
            .map(|_| if rng.gen::<f64>() < 0.8 { 0.0 } else { rng.gen_range(0.1f32..1.0) })
            .collect()
    }

    #[test]
    fn store_accumulates_exact_bytes() {
        let mut rng = stream(1, "replay");
        let cb = toy_codebook(&mut rng);
        let mut buffer = ReplayBuffer::new(30);
        let mut expected = 0usize;
        for _ in 0..30 {
            let sample = StoredSample::bit_pq(2, &sparse_latent(64, &mut rng), &cb).unwrap();
            expected += sample.byte_size();
            buffer.store(sample).unwrap();
        }
        assert_eq!(buffer.byte_size(), expected);
        assert_eq!(buffer.byte_size(), buffer.recompute_byte_size());
        assert_eq!(buffer.class_count(), 1);
        assert_eq!(buffer.len(), 30);
    }

    #[test]
    fn store_into_empty_buffer_creates_class() {
        let mut buffer = ReplayBuffer::new(4);
        buffer.store(StoredSample::raw(7, vec![1.0, 0.0])).unwrap();
        assert_eq!(buffer.class_count(), 1);
        assert!(!buffer.is_empty());
    }

    #[test]
    fn overflow_is_a_capacity_error() {
        let mut buffer = ReplayBuffer::new(30);
        for _ in 0..30 {
            buffer.store(StoredSample::raw(0, vec![1.0])).unwrap();
        }
        let err = buffer.store(StoredSample::raw(0, vec![1.0])).unwrap_err();
        assert!(matches!(err, Error::Capacity { class_id: 0, capacity: 30 }));
        // other classes unaffected
        buffer.store(StoredSample::raw(1, vec![1.0])).unwrap();
    }

    #[test]
    fn empty_buffer_draws_empty_batch() {
        let buffer = ReplayBuffer::new(8);
        let (latents, labels) =
            buffer.draw_replay_batch(None, 16, &mut stream(0, "draw")).unwrap();
        assert!(latents.is_empty() && labels.is_empty());
    }

    #[test]
    fn single_sample_draw_returns_it() {
        let mut rng = stream(2, "replay");
        let cb = toy_codebook(&mut rng);
        let latent = sparse_latent(48, &mut rng);
        let mut buffer = ReplayBuffer::new(4);
        buffer.store(StoredSample::bit_pq(3, &latent, &cb).unwrap()).unwrap();
        let (latents, labels) = buffer.draw_replay_batch(Some(&cb), 1, &mut rng).unwrap();
        assert_eq!(labels, vec![3]);
        let direct = buffer.samples().next().unwrap().decompress(Some(&cb)).unwrap();
        assert_eq!(latents[0], direct);
    }

    #[test]
    fn exhaustive_draw_covers_every_sample_once() {
        let mut rng = stream(3, "replay");
        let mut buffer = ReplayBuffer::new(10);
        for class in 0..3u32 {
            for i in 0..10 {
                buffer.store(StoredSample::raw(class, vec![class as f32, i as f32])).unwrap();
            }
        }
        let (latents, labels) = buffer.draw_replay_batch(None, 30, &mut rng).unwrap();
        assert_eq!(latents.len(), 30);
        let mut seen: Vec<(u32, u32)> =
            latents.iter().zip(&labels).map(|(l, &c)| (c, l[1] as u32)).collect();
        seen.sort_unstable();
        let want: Vec<(u32, u32)> =
            (0..3).flat_map(|c| (0..10).map(move |i| (c, i))).collect();
        assert_eq!(seen, want);
    }

    #[test]
    fn draw_is_uniform_across_classes() {
        // chi-squared over 5 classes, 10,000 single draws; critical value
        // for df = 4 at p = 0.01 is 13.2767.
        let mut rng = stream(4, "replay");
        let mut buffer = ReplayBuffer::new(10);
        for class in 0..5u32 {
            for _ in 0..10 {
                buffer.store(StoredSample::raw(class, vec![0.5])).unwrap();
            }
        }
        let mut counts = [0u32; 5];
        for _ in 0..10_000 {
            let (_, labels) = buffer.draw_replay_batch(None, 1, &mut rng).unwrap();
            counts[labels[0] as usize] += 1;
        }
        let expected = 10_000.0 / 5.0;
        let chi2: f64 =
            counts.iter().map(|&c| (f64::from(c) - expected).powi(2) / expected).sum();
        assert!(chi2 < 13.2767, "chi-squared {chi2}, counts {counts:?}");
    }

    #[test]
    fn accounting_survives_mixed_bodies() {
        let mut rng = stream(5, "replay");
        let cb = toy_codebook(&mut rng);
        let mut buffer = ReplayBuffer::new(16);
        for i in 0..12u32 {
            let latent = sparse_latent(40, &mut rng);
            let sample = match i % 3 {
                0 => StoredSample::raw(i % 2, latent),
                1 => StoredSample::bitmap(i % 2, &latent).unwrap(),
                _ => StoredSample::bit_pq(i % 2, &latent, &cb).unwrap(),
            };
            buffer.store(sample).unwrap();
        }
        assert_eq!(buffer.byte_size(), buffer.recompute_byte_size());
    }

    #[test]
    fn decompressed_latents_stay_non_negative() {
        let mut rng = stream(6, "replay");
        let cb = toy_codebook(&mut rng);
        let mut buffer = ReplayBuffer::new(16);
        for _ in 0..16 {
            buffer
                .store(StoredSample::bit_pq(0, &sparse_latent(48, &mut rng), &cb).unwrap())
                .unwrap();
        }
        let (latents, _) = buffer.decompress_all(Some(&cb)).unwrap();
        for latent in &latents {
            assert!(latent.iter().all(|&v| v >= 0.0));
        }
    }
}
