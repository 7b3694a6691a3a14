use std::collections::HashMap;
use std::path::Path;

use super::binio::{sha256_hex, write_atomic, ByteReader, ByteWriter, FormatError};
use super::EncoderError;
use crate::numerics::{Matrix, RngStream, Scalar};

pub type TokenId = u32;

pub const OOV_TOKEN: &str = "<oov>";
pub const PLACEHOLDER_TOKEN: &str = "<*>";
pub const START_TOKEN: &str = "<sot>";
/// Surface form of the placeholder inside prompt text.
pub const PLACEHOLDER_MARK: &str = "*";

pub const OOV_ID: TokenId = 0;
pub const PLACEHOLDER_ID: TokenId = 1;
pub const START_ID: TokenId = 2;

const MAGIC: &[u8; 4] = b"MPTT";
const VERSION: u32 = 1;

/// Lowercases and strips everything but letters and digits.
/// Returns `None` when nothing is left.
pub fn normalize_word(word: &str) -> Option<String> {
    let w: String = word
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    (!w.is_empty()).then_some(w)
}

/// Frozen vocabulary with token and positional embedding rows.
///
/// Rows are held at `f32` precision regardless of `T`, so a table written to
/// disk and read back is bit-identical to the one in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTable<T: Scalar> {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
    embeddings: Matrix<T>,
    positional: Matrix<T>,
}

impl<T: Scalar> TokenTable<T> {
    /// `vocab[i]` names row `i` of `embeddings`. The first three entries must be
    /// the reserved OOV, placeholder and start tokens.
    pub fn new(
        vocab: Vec<String>,
        embeddings: Matrix<T>,
        positional: Matrix<T>,
    ) -> Result<Self, EncoderError> {
        let reserved = [OOV_TOKEN, PLACEHOLDER_TOKEN, START_TOKEN];
        if vocab.len() < 3 || vocab[..3].iter().zip(reserved).any(|(a, b)| a != b) {
            return Err(EncoderError::InvalidTable(
                "first three tokens must be <oov>, <*>, <sot>".into(),
            ));
        }
        if embeddings.rows() != vocab.len() {
            return Err(EncoderError::InvalidTable(format!(
                "{} vocabulary entries but {} embedding rows",
                vocab.len(),
                embeddings.rows()
            )));
        }
        if positional.cols() != embeddings.cols() {
            return Err(EncoderError::InvalidTable(format!(
                "positional width {} differs from embedding width {}",
                positional.cols(),
                embeddings.cols()
            )));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(EncoderError::InvalidTable(format!("duplicate token {w:?}")));
            }
        }
        Ok(Self {
            vocab,
            index,
            embeddings: embeddings.map(Scalar::quantize),
            positional: positional.map(Scalar::quantize),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn max_len(&self) -> usize {
        self.positional.rows()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn embedding(&self, id: TokenId) -> &[T] {
        self.embeddings.row(id as usize)
    }

    pub fn positional(&self, pos: usize) -> &[T] {
        self.positional.row(pos)
    }

    /// Lowercased, punctuation-stripped, whitespace-split; unknown words map
    /// to OOV and a bare `*` maps to the placeholder.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .filter_map(|raw| {
                if raw == PLACEHOLDER_MARK {
                    return Some(PLACEHOLDER_ID);
                }
                normalize_word(raw).map(|w| self.id(&w).unwrap_or(OOV_ID))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut w = ByteWriter::new(MAGIC);
        w.u32(VERSION);
        w.u32(self.vocab.len() as u32);
        w.u32(self.dim() as u32);
        w.u32(self.max_len() as u32);
        for word in &self.vocab {
            w.str16(word)?;
        }
        for &x in self
            .embeddings
            .as_slice()
            .iter()
            .chain(self.positional.as_slice())
        {
            w.f32(x.as_f64() as f32);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let mut r = ByteReader::open(bytes, MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let v = r.u32()? as usize;
        let d = r.u32()? as usize;
        let m_max = r.u32()? as usize;
        let vocab = (0..v).map(|_| r.str16()).collect::<Result<Vec<_>, _>>()?;
        let emb = r.f32_vec(v * d, "token embeddings")?;
        let pos = r.f32_vec(m_max * d, "positional embeddings")?;
        r.finish()?;
        let widen = |xs: Vec<f32>| xs.into_iter().map(|x| T::lit(x as f64)).collect();
        Self::new(
            vocab,
            Matrix::from_vec(v, d, widen(emb))?,
            Matrix::from_vec(m_max, d, widen(pos))?,
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        write_atomic(path, &self.to_bytes()?).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let bytes = std::fs::read(path).map_err(FormatError::from)?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized table.
    pub fn fingerprint(&self) -> String {
        sha256_hex(
            &self
                .to_bytes()
                .expect("table was validated on construction"),
        )
    }
}

/// Mutable staging area for a [`TokenTable`]; rows can be planted before
/// the table is frozen by [`TokenTableBuilder::build`].
#[derive(Debug, Clone)]
pub struct TokenTableBuilder<T: Scalar> {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
    rows: Vec<Vec<T>>,
    positional: Matrix<T>,
    dim: usize,
}

impl<T: Scalar> TokenTableBuilder<T> {
    /// Reserved tokens plus `words` (deduplicated, first occurrence wins),
    /// rows drawn from `N(0, token_std²)` and positions from `N(0, pos_std²)`.
    pub fn random<S: AsRef<str>>(
        words: &[S],
        dim: usize,
        max_len: usize,
        token_std: f64,
        pos_std: f64,
        rng: &mut RngStream,
    ) -> Self {
        let mut b = Self {
            vocab: Vec::new(),
            index: HashMap::new(),
            rows: Vec::new(),
            positional: Matrix::random_normal(max_len, dim, pos_std, rng),
            dim,
        };
        for w in [OOV_TOKEN, PLACEHOLDER_TOKEN, START_TOKEN] {
            b.push(w.to_string(), rng, token_std);
        }
        for w in words {
            if let Some(w) = normalize_word(w.as_ref()) {
                if !b.index.contains_key(&w) {
                    b.push(w, rng, token_std);
                }
            }
        }
        b
    }

    fn push(&mut self, word: String, rng: &mut RngStream, std: f64) {
        self.index.insert(word.clone(), self.vocab.len() as TokenId);
        self.vocab.push(word);
        self.rows.push(
            rng.normal_vec(self.dim, std)
                .into_iter()
                .map(T::lit)
                .collect(),
        );
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn row(&self, id: TokenId) -> &[T] {
        &self.rows[id as usize]
    }

    pub fn positional(&self, pos: usize) -> &[T] {
        self.positional.row(pos)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn set_row(&mut self, id: TokenId, values: Vec<T>) {
        assert_eq!(values.len(), self.dim, "row width");
        self.rows[id as usize] = values.into_iter().map(Scalar::quantize).collect();
    }

    pub fn set_positional(&mut self, pos: usize, values: Vec<T>) {
        assert_eq!(values.len(), self.dim, "row width");
        for (slot, v) in self.positional.row_mut(pos).iter_mut().zip(values) {
            *slot = v.quantize();
        }
    }

    pub fn build(self) -> Result<TokenTable<T>, EncoderError> {
        let v = self.vocab.len();
        let data = self.rows.into_iter().flatten().collect();
        TokenTable::new(
            self.vocab,
            Matrix::from_vec(v, self.dim, data)?,
            self.positional,
        )
    }
}
