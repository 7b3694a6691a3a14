use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::PersonalizationError;
use crate::encoders::binio::{ByteReader, ByteWriter};
use crate::encoders::{
    build_personalized_query, sha256_hex, write_atomic, FormatError, PromptTemplate,
    ReferenceTextEncoder,
};
use crate::numerics::{Embedding, Matrix, RngStream, Scalar};

const MODEL_MAGIC: &[u8; 4] = b"MPMD";
const MODEL_VERSION: u32 = 1;

/// Bank key used when every category shares one feature matrix.
pub const SHARED_KEY: &str = "<shared>";

/// How instance tokens are produced from the learned parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// `w = C_l · z`.
    Composed,
    /// `w` is learned directly; no category features.
    Direct,
}

/// `wᵢ = C · zᵢ` for every instance weight vector.
pub fn instance_tokens<T: Scalar>(
    c: &Matrix<T>,
    z: &[Vec<T>],
) -> Result<Vec<Vec<T>>, PersonalizationError> {
    z.iter().map(|zi| Ok(c.matvec(zi)?)).collect()
}

/// One `d×q` feature matrix per category (or a single shared one).
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryFeatureBank<T: Scalar> {
    categories: Vec<String>,
    shared: bool,
    dim: usize,
    q: usize,
    matrices: IndexMap<String, Matrix<T>>,
}

impl<T: Scalar> CategoryFeatureBank<T> {
    /// Entries drawn from `N(0, std²)`.
    pub fn random(
        categories: &[String],
        dim: usize,
        q: usize,
        shared: bool,
        std: f64,
        rng: &mut RngStream,
    ) -> Result<Self, PersonalizationError> {
        if categories.is_empty() {
            return Err(PersonalizationError::EmptyCategoryList);
        }
        let keys: Vec<String> = if shared {
            vec![SHARED_KEY.to_string()]
        } else {
            categories.to_vec()
        };
        let matrices = keys
            .into_iter()
            .map(|k| (k, Matrix::random_normal(dim, q, std, rng)))
            .collect();
        Self::from_parts(categories.to_vec(), shared, matrices)
    }

    pub fn from_parts(
        categories: Vec<String>,
        shared: bool,
        matrices: IndexMap<String, Matrix<T>>,
    ) -> Result<Self, PersonalizationError> {
        if categories.is_empty() {
            return Err(PersonalizationError::EmptyCategoryList);
        }
        let (dim, q) = matrices
            .values()
            .next()
            .map(Matrix::shape)
            .ok_or_else(|| PersonalizationError::InvalidModel("bank has no matrices".into()))?;
        if dim == 0 || q == 0 {
            return Err(PersonalizationError::InvalidModel(
                "zero-sized feature matrix".into(),
            ));
        }
        if let Some((k, m)) = matrices.iter().find(|(_, m)| m.shape() != (dim, q)) {
            return Err(PersonalizationError::InvalidModel(format!(
                "matrix {k:?} is {:?}, expected ({dim}, {q})",
                m.shape()
            )));
        }
        let expected: Vec<&str> = if shared {
            vec![SHARED_KEY]
        } else {
            categories.iter().map(String::as_str).collect()
        };
        let mut found: Vec<&str> = matrices.keys().map(String::as_str).collect();
        let mut want = expected.clone();
        found.sort_unstable();
        want.sort_unstable();
        if found != want {
            return Err(PersonalizationError::InvalidModel(
                "bank keys do not match the category list".into(),
            ));
        }
        if matrices
            .values()
            .any(|m| m.as_slice().iter().any(|x| !x.is_finite()))
        {
            return Err(PersonalizationError::InvalidModel(
                "non-finite feature entry".into(),
            ));
        }
        Ok(Self {
            categories,
            shared,
            dim,
            q,
            matrices,
        })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Bank key holding the matrix of `category`.
    pub fn key_for(&self, category: &str) -> Result<&str, PersonalizationError> {
        let own = self
            .categories
            .iter()
            .find(|c| *c == category)
            .ok_or_else(|| PersonalizationError::UnknownCategory(category.to_string()))?;
        Ok(if self.shared { SHARED_KEY } else { own })
    }

    pub fn matrix(&self, category: &str) -> Result<&Matrix<T>, PersonalizationError> {
        let key = self.key_for(category)?;
        Ok(&self.matrices[key])
    }

    pub fn matrices(&self) -> &IndexMap<String, Matrix<T>> {
        &self.matrices
    }

    pub fn matrices_mut(&mut self) -> &mut IndexMap<String, Matrix<T>> {
        &mut self.matrices
    }

    /// Rounds every entry to f32 precision, so a saved bank reloads exactly.
    pub fn quantize(&mut self) {
        for m in self.matrices.values_mut() {
            m.as_mut_slice().iter_mut().for_each(|x| *x = x.quantize());
        }
    }

    pub fn fingerprint(&self) -> String {
        let mut w = ByteWriter::new(b"BANK");
        for (k, m) in &self.matrices {
            w.bytes(k.as_bytes());
            m.as_slice()
                .iter()
                .for_each(|x| w.bytes(&x.as_f64().to_le_bytes()));
        }
        sha256_hex(&w.finish())
    }
}

/// Learned weights of one instance: `n_w` vectors of length `q` (composed)
/// or `d` (direct).
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceEntry<T: Scalar> {
    pub category: String,
    pub weights: Vec<Vec<T>>,
}

/// The output of test-time personalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizedModel<T: Scalar> {
    pub parameterization: Parameterization,
    pub categories: Vec<String>,
    /// Absent for the direct parameterization.
    pub bank: Option<CategoryFeatureBank<T>>,
    pub instances: IndexMap<String, InstanceEntry<T>>,
    pub encoder_fingerprint: String,
    /// Training configuration snapshot.
    pub config: serde_json::Value,
}

impl<T: Scalar> PersonalizedModel<T> {
    pub fn entry(&self, instance: &str) -> Result<&InstanceEntry<T>, PersonalizationError> {
        self.instances
            .get(instance)
            .ok_or_else(|| PersonalizationError::UnknownInstance(instance.to_string()))
    }

    /// The instance's token embeddings `[w₁..w_{n_w}]`.
    pub fn instance_tokens(&self, instance: &str) -> Result<Vec<Vec<T>>, PersonalizationError> {
        let e = self.entry(instance)?;
        match (self.parameterization, &self.bank) {
            (Parameterization::Direct, _) => Ok(e.weights.clone()),
            (Parameterization::Composed, Some(bank)) => {
                instance_tokens(bank.matrix(&e.category)?, &e.weights)
            }
            (Parameterization::Composed, None) => Err(PersonalizationError::InvalidModel(
                "composed model without a bank".into(),
            )),
        }
    }

    /// `f_l` of `template` with the instance tokens spliced in.
    pub fn query_embedding(
        &self,
        instance: &str,
        template: &PromptTemplate,
        encoder: &ReferenceTextEncoder<T>,
    ) -> Result<Embedding<T>, PersonalizationError> {
        let tokens = self.instance_tokens(instance)?;
        let q = build_personalized_query(template, &tokens, encoder)?;
        Ok(encoder.encode(&q.tokens)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut w = ByteWriter::new(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        w.str16(&self.encoder_fingerprint)?;
        w.u32(match self.parameterization {
            Parameterization::Composed => 0,
            Parameterization::Direct => 1,
        });
        w.u32(self.categories.len() as u32);
        for c in &self.categories {
            w.str16(c)?;
        }
        match &self.bank {
            None => {
                w.u32(0);
                w.u32(0);
                w.u32(0);
                w.u32(0);
            }
            Some(bank) => {
                w.u32(bank.shared as u32);
                w.u32(bank.dim as u32);
                w.u32(bank.q as u32);
                w.u32(bank.matrices.len() as u32);
                for (k, m) in &bank.matrices {
                    w.str16(k)?;
                    m.as_slice().iter().for_each(|x| w.f32(x.as_f64() as f32));
                }
            }
        }
        w.u32(self.instances.len() as u32);
        for (id, e) in &self.instances {
            w.str16(id)?;
            w.str16(&e.category)?;
            w.u32(e.weights.len() as u32);
            let len = e.weights.first().map_or(0, Vec::len);
            w.u32(len as u32);
            for v in &e.weights {
                if v.len() != len {
                    return Err(FormatError::Invalid(format!(
                        "instance {id:?} has ragged weights"
                    )));
                }
                v.iter().for_each(|x| w.f32(x.as_f64() as f32));
            }
        }
        let config =
            serde_json::to_vec(&self.config).map_err(|e| FormatError::Invalid(e.to_string()))?;
        w.u32(config.len() as u32);
        w.bytes(&config);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PersonalizationError> {
        let mut r = ByteReader::open(bytes, MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let encoder_fingerprint = r.str16()?;
        let parameterization = match r.u32()? {
            0 => Parameterization::Composed,
            1 => Parameterization::Direct,
            other => {
                return Err(FormatError::Invalid(format!("parameterization tag {other}")).into())
            }
        };
        let n_cat = r.u32()? as usize;
        let categories = (0..n_cat)
            .map(|_| r.str16())
            .collect::<Result<Vec<_>, _>>()?;
        let shared = r.u32()? != 0;
        let dim = r.u32()? as usize;
        let q = r.u32()? as usize;
        let n_mat = r.u32()? as usize;
        let mut matrices = IndexMap::new();
        for _ in 0..n_mat {
            let key = r.str16()?;
            let values = r.f32_vec(dim * q, "feature matrix")?;
            let m = Matrix::from_vec(
                dim,
                q,
                values.into_iter().map(|x| T::lit(x as f64)).collect(),
            )?;
            matrices.insert(key, m);
        }
        let bank = if n_mat == 0 {
            None
        } else {
            Some(CategoryFeatureBank::from_parts(
                categories.clone(),
                shared,
                matrices,
            )?)
        };
        let n_inst = r.u32()? as usize;
        let mut instances = IndexMap::new();
        for _ in 0..n_inst {
            let id = r.str16()?;
            let category = r.str16()?;
            let n_w = r.u32()? as usize;
            let len = r.u32()? as usize;
            let weights = (0..n_w)
                .map(|_| {
                    r.f32_vec(len, "instance weights")
                        .map(|v| v.into_iter().map(|x| T::lit(x as f64)).collect())
                })
                .collect::<Result<Vec<Vec<T>>, _>>()?;
            instances.insert(id, InstanceEntry { category, weights });
        }
        let config_len = r.u32()? as usize;
        let config = serde_json::from_slice(r.bytes(config_len)?)
            .map_err(|e| FormatError::Invalid(e.to_string()))?;
        r.finish()?;
        let model = Self {
            parameterization,
            categories,
            bank,
            instances,
            encoder_fingerprint,
            config,
        };
        model.check()?;
        Ok(model)
    }

    /// Structural consistency of instances with the bank.
    pub fn check(&self) -> Result<(), PersonalizationError> {
        let expected_len = match (self.parameterization, &self.bank) {
            (Parameterization::Composed, Some(b)) => b.q(),
            (Parameterization::Composed, None) => {
                return Err(PersonalizationError::InvalidModel(
                    "composed model without a bank".into(),
                ))
            }
            (Parameterization::Direct, _) => 0,
        };
        for (id, e) in &self.instances {
            if !self.categories.contains(&e.category) {
                return Err(PersonalizationError::UnknownCategory(e.category.clone()));
            }
            if e.weights.is_empty() {
                return Err(PersonalizationError::InvalidModel(format!(
                    "instance {id:?} has no weights"
                )));
            }
            if expected_len > 0 && e.weights.iter().any(|w| w.len() != expected_len) {
                return Err(PersonalizationError::InvalidModel(format!(
                    "instance {id:?} weight length"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), PersonalizationError> {
        write_atomic(path, &self.to_bytes()?).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PersonalizationError> {
        let bytes = std::fs::read(path).map_err(FormatError::from)?;
        Self::from_bytes(&bytes)
    }
}
