use std::path::Path;

use indexmap::IndexMap;

use super::binio::{sha256_hex, write_atomic, ByteReader, ByteWriter, FormatError};
use super::EncoderError;
use crate::numerics::{self, Embedding, NumericsError, Scalar};

const MAGIC: &[u8; 4] = b"MPES";
const VERSION: u32 = 1;

/// Precomputed `f32` vectors keyed by id (frames, or shots when a producer
/// exports shot-level vectors directly). Insertion order is preserved and is
/// the on-disk record order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: IndexMap<String, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: IndexMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.vectors.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    pub fn insert(&mut self, id: impl Into<String>, values: Vec<f32>) -> Result<(), EncoderError> {
        let id = id.into();
        if values.len() != self.dim {
            return Err(EncoderError::DimMismatch {
                expected: self.dim,
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(i).into());
        }
        if id.len() > u16::MAX as usize {
            return Err(FormatError::StringTooLong(id.len()).into());
        }
        if self.vectors.contains_key(&id) {
            return Err(EncoderError::DuplicateId(id));
        }
        self.vectors.insert(id, values);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    /// Stored vector widened to `T`.
    pub fn embedding<T: Scalar>(&self, id: &str) -> Result<Embedding<T>, EncoderError> {
        let v = self
            .get(id)
            .ok_or_else(|| EncoderError::MissingFrame(id.to_string()))?;
        Ok(Embedding::new(
            v.iter().map(|&x| T::lit(x as f64)).collect(),
        )?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut w = ByteWriter::new(MAGIC);
        w.u32(VERSION);
        w.u32(self.dim as u32);
        w.u64(self.vectors.len() as u64);
        for (id, v) in &self.vectors {
            w.str16(id)?;
            for &x in v {
                w.f32(x);
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let mut r = ByteReader::open(bytes, MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        let mut store = Self::new(dim);
        for _ in 0..count {
            let id = r.str16()?;
            let v = r.f32_vec(dim, "store vector")?;
            store.insert(id, v)?;
        }
        r.finish()?;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        write_atomic(path, &self.to_bytes()?).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let bytes = std::fs::read(path).map_err(FormatError::from)?;
        Self::from_bytes(&bytes)
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes().expect("ids validated on insert"))
    }
}

/// Normalized mean of a shot's frame vectors. Frames are summed in sorted id
/// order, so the result does not depend on the order they are listed in.
pub fn shot_embedding<T: Scalar, S: AsRef<str>>(
    frame_ids: &[S],
    store: &EmbeddingStore,
) -> Result<Embedding<T>, EncoderError> {
    if frame_ids.is_empty() {
        return Err(EncoderError::EmptyShot);
    }
    let mut ids: Vec<&str> = frame_ids.iter().map(AsRef::as_ref).collect();
    ids.sort_unstable();
    let mut acc = vec![0.0f64; store.dim()];
    for id in &ids {
        let v = store
            .get(id)
            .ok_or_else(|| EncoderError::MissingFrame(id.to_string()))?;
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += x as f64;
        }
    }
    let n = ids.len() as f64;
    let mean: Vec<T> = acc.into_iter().map(|x| T::lit(x / n)).collect();
    Ok(Embedding::new(numerics::normalize_slice(&mean)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn store() -> EmbeddingStore {
        let mut rng = RngStream::new(4);
        let mut s = EmbeddingStore::new(6);
        for i in 0..5 {
            let v = rng
                .normal_vec(6, 1.0)
                .into_iter()
                .map(|x| x as f32)
                .collect();
            s.insert(format!("v1/s0/f{i}"), v).unwrap();
        }
        s
    }

    #[test]
    fn one_frame_is_its_normalized_vector() {
        let s = store();
        let e: Embedding<f64> = shot_embedding(&["v1/s0/f2"], &s).unwrap();
        let raw: Vec<f64> = s
            .get("v1/s0/f2")
            .unwrap()
            .iter()
            .map(|&x| x as f64)
            .collect();
        assert_eq!(e.as_slice(), &numerics::normalize_slice(&raw).unwrap()[..]);
    }

    #[test]
    fn antipodal_frames_raise_zero_vector() {
        let mut s = EmbeddingStore::new(2);
        s.insert("a", vec![1.0, -2.0]).unwrap();
        s.insert("b", vec![-1.0, 2.0]).unwrap();
        assert!(matches!(
            shot_embedding::<f64, _>(&["a", "b"], &s),
            Err(EncoderError::Numerics(NumericsError::ZeroVector))
        ));
    }

    #[test]
    fn five_frames_match_scalar_mean() {
        let s = store();
        let ids: Vec<String> = (0..5).map(|i| format!("v1/s0/f{i}")).collect();
        let e: Embedding<f64> = shot_embedding(&ids, &s).unwrap();
        let mut mean = [0.0f64; 6];
        for id in &ids {
            for (k, &x) in s.get(id).unwrap().iter().enumerate() {
                mean[k] += x as f64 / 5.0;
            }
        }
        let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        for k in 0..6 {
            assert!((e.as_slice()[k] - mean[k] / n).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_order_does_not_matter() {
        let s = store();
        let a: Embedding<f64> = shot_embedding(&["v1/s0/f0", "v1/s0/f3", "v1/s0/f1"], &s).unwrap();
        let b: Embedding<f64> = shot_embedding(&["v1/s0/f1", "v1/s0/f0", "v1/s0/f3"], &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_and_empty_shots() {
        let s = store();
        assert!(matches!(
            shot_embedding::<f64, &str>(&[], &s),
            Err(EncoderError::EmptyShot)
        ));
        assert!(matches!(
            shot_embedding::<f64, _>(&["nope"], &s),
            Err(EncoderError::MissingFrame(id)) if id == "nope"
        ));
    }

    #[test]
    fn insert_validates() {
        let mut s = EmbeddingStore::new(2);
        assert!(matches!(
            s.insert("a", vec![1.0]),
            Err(EncoderError::DimMismatch { .. })
        ));
        s.insert("a", vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            s.insert("a", vec![1.0, 0.0]),
            Err(EncoderError::DuplicateId(_))
        ));
    }

    #[test]
    fn byte_layout_is_exact() {
        let mut s = EmbeddingStore::new(2);
        s.insert("ab", vec![1.0, -0.5]).unwrap();
        let bytes = s.to_bytes().unwrap();
        let mut expected = b"MPES".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-0.5f32).to_le_bytes());
        let crc = crc32fast::hash(&expected);
        expected.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_and_truncation() {
        let s = store();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(EmbeddingStore::from_bytes(&bytes).unwrap(), s);
        assert!(matches!(
            EmbeddingStore::from_bytes(&bytes[..bytes.len() - 10]),
            Err(EncoderError::Format(FormatError::ChecksumMismatch { .. }))
        ));
    }
}
