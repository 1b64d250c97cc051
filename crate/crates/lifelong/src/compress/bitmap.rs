//! Lossless sparse-bitmap stage.

use crate::{Error, Result};

/// Fixed serialization overhead: total length `n` (u32) + non-zero count
/// (u32).
pub const BITMAP_HEADER_BYTES: usize = 8;

/// A tensor split into a presence bitmap and its packed non-zero values.
///
/// Bit `i` of the bitmap (LSB-first within each byte) is 1 iff element `i`
/// was non-zero; the non-zeros are stored in element order. Decompression is
/// exact. Serialized size is `BITMAP_HEADER_BYTES + ceil(n / 8) + 4 * nnz`.
#[derive(Debug, Clone, PartialEq)]
pub struct BitmapCompressed {
    n: usize,
    bitmap: Vec<u8>,
    nonzeros: Vec<f32>,
}

impl BitmapCompressed {
    /// Compress a dense value slice. Rejects non-finite input (NaN would
    /// break the zero/non-zero dichotomy on reconstruction checks).
    pub fn compress(values: &[f32]) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("bitmap compression of non-finite value {bad}")));
        }
        let n = values.len();
        let mut bitmap = vec![0u8; n.div_ceil(8)];
        let mut nonzeros = Vec::new();
        for (i, &v) in values.iter().enumerate() {
            if v != 0.0 {
                bitmap[i / 8] |= 1 << (i % 8);
                nonzeros.push(v);
            }
        }
        Ok(Self { n, bitmap, nonzeros })
    }

    /// Reassemble from parts (used by the full-sample codec and loaders).
    pub fn from_parts(n: usize, bitmap: Vec<u8>, nonzeros: Vec<f32>) -> Result<Self> {
        if bitmap.len() != n.div_ceil(8) {
            return Err(Error::Corruption(format!(
                "bitmap of {} bytes cannot cover {} elements",
                bitmap.len(),
                n
            )));
        }
        let c = Self { n, bitmap, nonzeros };
        c.check_popcount()?;
        Ok(c)
    }

    fn check_popcount(&self) -> Result<()> {
        let pop = self.popcount();
        if pop != self.nonzeros.len() {
            return Err(Error::Corruption(format!(
                "bitmap popcount {} != stored non-zero count {}",
                pop,
                self.nonzeros.len()
            )));
        }
        // Bits beyond n must be clear, otherwise round-trips are ambiguous.
        for i in self.n..self.bitmap.len() * 8 {
            if self.bitmap[i / 8] & (1 << (i % 8)) != 0 {
                return Err(Error::Corruption(format!("bitmap bit {} set beyond length {}", i, self.n)));
            }
        }
        Ok(())
    }

    /// Exact inverse of [`BitmapCompressed::compress`].
    pub fn decompress(&self) -> Result<Vec<f32>> {
        self.check_popcount()?;
        let mut out = vec![0.0f32; self.n];
        let mut next = 0;
        for (i, slot) in out.iter_mut().enumerate() {
            if self.bitmap[i / 8] & (1 << (i % 8)) != 0 {
                *slot = self.nonzeros[next];
                next += 1;
            }
        }
        Ok(out)
    }

    pub fn total_len(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.nonzeros.len()
    }

    pub fn popcount(&self) -> usize {
        self.bitmap.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn bitmap_bytes(&self) -> &[u8] {
        &self.bitmap
    }

    pub fn nonzeros(&self) -> &[f32] {
        &self.nonzeros
    }

    pub fn into_nonzeros(self) -> Vec<f32> {
        self.nonzeros
    }

    /// Byte length of [`BitmapCompressed::to_bytes`] without materializing it.
    pub fn serialized_len(&self) -> usize {
        BITMAP_HEADER_BYTES + self.bitmap.len() + 4 * self.nonzeros.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.nonzeros.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.bitmap);
        for v in &self.nonzeros {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < BITMAP_HEADER_BYTES {
            return Err(Error::Corruption("bitmap record shorter than header".into()));
        }
        let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let nnz = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let bm_len = n.div_ceil(8);
        let want = BITMAP_HEADER_BYTES + bm_len + 4 * nnz;
        if bytes.len() != want {
            return Err(Error::Corruption(format!(
                "bitmap record of {} bytes, expected {}",
                bytes.len(),
                want
            )));
        }
        let bitmap = bytes[8..8 + bm_len].to_vec();
        let nonzeros = bytes[8 + bm_len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_parts(n, bitmap, nonzeros)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_example_layout() {
        let c = BitmapCompressed::compress(&[0.0, 0.0, 3.0, 0.0, 1.0]).unwrap();
        assert_eq!(c.total_len(), 5);
        assert_eq!(c.nonzeros(), &[3.0, 1.0]);
        // elements 2 and 4 set, LSB-first: 0b0001_0100
        assert_eq!(c.bitmap_bytes(), &[0b0001_0100]);
        assert_eq!(c.decompress().unwrap(), vec![0.0, 0.0, 3.0, 0.0, 1.0]);
    }

    #[test]
    fn all_zero_tensor_size() {
        let c = BitmapCompressed::compress(&vec![0.0; 1000]).unwrap();
        assert_eq!(c.nnz(), 0);
        assert_eq!(c.serialized_len(), BITMAP_HEADER_BYTES + 125);
        assert_eq!(c.to_bytes().len(), c.serialized_len());
    }

    #[test]
    fn size_matches_formula_for_partial_sparsity() {
        // n = 1000, nnz = 100: payload 4*100 + 125 bytes on top of the header.
        let mut values = vec![0.0f32; 1000];
        for i in 0..100 {
            values[i * 10] = (i + 1) as f32;
        }
        let c = BitmapCompressed::compress(&values).unwrap();
        assert_eq!(c.nnz(), 100);
        assert_eq!(c.serialized_len(), BITMAP_HEADER_BYTES + 125 + 400);
        let dense = 4 * 1000;
        let ratio = dense as f64 / (4.0 * 100.0 + 125.0);
        assert!((ratio - 7.6).abs() < 0.1);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(BitmapCompressed::compress(&[1.0, f32::NAN]).is_err());
        assert!(BitmapCompressed::compress(&[f32::INFINITY]).is_err());
    }

    #[test]
    fn popcount_mismatch_detected() {
        let c = BitmapCompressed::from_parts(5, vec![0b0001_0100], vec![3.0]);
        assert!(matches!(c.unwrap_err(), crate::Error::Corruption(_)));
    }

    #[test]
    fn stray_bits_beyond_length_detected() {
        let c = BitmapCompressed::from_parts(5, vec![0b0010_0100], vec![3.0, 9.0]);
        assert!(matches!(c.unwrap_err(), crate::Error::Corruption(_)));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(values in proptest::collection::vec(
            prop_oneof![3 => Just(0.0f32), 2 => any::<i16>().prop_map(|v| v as f32 / 128.0)],
            0..300,
        )) {
            let c = BitmapCompressed::compress(&values).unwrap();
            let back = c.decompress().unwrap();
            prop_assert_eq!(values.len(), back.len());
            for (a, b) in values.iter().zip(&back) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            // byte round-trip too
            let again = BitmapCompressed::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(again, c);
        }

        #[test]
        fn serialized_size_law(n in 0usize..2000, density in 0.0f64..1.0) {
            let values: Vec<f32> = (0..n)
                .map(|i| if (i as f64 * 0.618).fract() < density { 1.5 } else { 0.0 })
                .collect();
            let nnz = values.iter().filter(|&&v| v != 0.0).count();
            let c = BitmapCompressed::compress(&values).unwrap();
            prop_assert_eq!(c.serialized_len(), BITMAP_HEADER_BYTES + n.div_ceil(8) + 4 * nnz);
            prop_assert_eq!(c.to_bytes().len(), c.serialized_len());
        }
    }
}
