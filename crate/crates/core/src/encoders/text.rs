use super::tokens::{TokenId, TokenTable, START_ID};
use super::EncoderError;
use crate::numerics::{self, Embedding, Matrix, NumericsError, RngStream, Scalar};

/// Frozen linear text encoder: `φ = normalize(P · meanᵢ(vᵢ + posᵢ))`.
///
/// `P` is `d×d` with entries from `N(0, 1/d)`, drawn from a seeded stream, so
/// the encoder is fully determined by its token table and seed.
#[derive(Debug, Clone)]
pub struct ReferenceTextEncoder<T: Scalar> {
    table: TokenTable<T>,
    projection: Matrix<T>,
    seed: u64,
}

/// Intermediate values of a forward pass, reused by the backward pass.
struct Pooled<T: Scalar> {
    projected: Vec<T>,
    norm: T,
    len: usize,
}

impl<T: Scalar> ReferenceTextEncoder<T> {
    pub fn new(table: TokenTable<T>, seed: u64) -> Self {
        let projection = Self::seeded_projection(table.dim(), seed);
        Self {
            table,
            projection,
            seed,
        }
    }

    /// The projection [`ReferenceTextEncoder::new`] draws for `seed`.
    pub fn seeded_projection(dim: usize, seed: u64) -> Matrix<T> {
        Matrix::random_normal(
            dim,
            dim,
            1.0 / (dim as f64).sqrt(),
            &mut RngStream::new(seed),
        )
    }

    /// Encoder with an explicit projection (tests and identity baselines).
    pub fn with_projection(
        table: TokenTable<T>,
        projection: Matrix<T>,
    ) -> Result<Self, EncoderError> {
        let d = table.dim();
        if projection.shape() != (d, d) {
            return Err(NumericsError::ShapeMismatch {
                expected: format!("{d}x{d}"),
                found: format!("{:?}", projection.shape()),
            }
            .into());
        }
        Ok(Self {
            table,
            projection,
            seed: u64::MAX,
        })
    }

    pub fn table(&self) -> &TokenTable<T> {
        &self.table
    }

    pub fn projection(&self) -> &Matrix<T> {
        &self.projection
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn max_len(&self) -> usize {
        self.table.max_len()
    }

    /// Stable identity of the frozen encoder: table bytes plus projection seed.
    pub fn fingerprint(&self) -> String {
        format!("{}:{}", self.table.fingerprint(), self.seed)
    }

    /// `[<sot>] + tokenize(text)`.
    pub fn text_ids(&self, text: &str) -> Vec<TokenId> {
        std::iter::once(START_ID)
            .chain(self.table.tokenize(text))
            .collect()
    }

    pub fn embed_ids(&self, ids: &[TokenId]) -> Vec<Vec<T>> {
        ids.iter()
            .map(|&id| self.table.embedding(id).to_vec())
            .collect()
    }

    fn pool(&self, tokens: &[Vec<T>]) -> Result<Pooled<T>, EncoderError> {
        let m = tokens.len();
        if m == 0 {
            return Err(EncoderError::EmptySequence);
        }
        if m > self.max_len() {
            return Err(EncoderError::SequenceTooLong {
                len: m,
                max: self.max_len(),
            });
        }
        let d = self.dim();
        let mut mean = vec![T::zero(); d];
        for (pos, v) in tokens.iter().enumerate() {
            numerics::check_len(d, v.len())?;
            for ((acc, &x), &p) in mean.iter_mut().zip(v).zip(self.table.positional(pos)) {
                *acc += x + p;
            }
        }
        let inv = T::one() / T::lit(m as f64);
        mean.iter_mut().for_each(|x| *x *= inv);
        let projected = self.projection.matvec(&mean)?;
        let norm = numerics::norm(&projected);
        if !(norm.as_f64() >= numerics::ZERO_NORM) {
            return Err(NumericsError::ZeroVector.into());
        }
        Ok(Pooled {
            projected,
            norm,
            len: m,
        })
    }

    /// Encodes a sequence of token embeddings; positional rows are added here.
    pub fn encode(&self, tokens: &[Vec<T>]) -> Result<Embedding<T>, EncoderError> {
        let p = self.pool(tokens)?;
        Ok(Embedding::new(
            p.projected.iter().map(|&x| x / p.norm).collect(),
        )?)
    }

    /// Gradient of `upstreamᵀ φ` with respect to the pooled input. Every token
    /// position receives this same vector.
    pub fn pooled_grad(&self, tokens: &[Vec<T>], upstream: &[T]) -> Result<Vec<T>, EncoderError> {
        numerics::check_len(self.dim(), upstream.len())?;
        let p = self.pool(tokens)?;
        let phi: Vec<T> = p.projected.iter().map(|&x| x / p.norm).collect();
        let along = numerics::dot(&phi, upstream);
        // (I - φφᵀ) u / ‖g‖, pulled back through P and the 1/m of the mean.
        let dg: Vec<T> = upstream
            .iter()
            .zip(&phi)
            .map(|(&u, &f)| (u - f * along) / p.norm)
            .collect();
        let mut dmean = self.projection.matvec_t(&dg)?;
        let inv = T::one() / T::lit(p.len as f64);
        dmean.iter_mut().for_each(|x| *x *= inv);
        Ok(dmean)
    }

    /// `∂(upstreamᵀ φ) / ∂vᵢ` for every input token.
    pub fn encode_grad(
        &self,
        tokens: &[Vec<T>],
        upstream: &[T],
    ) -> Result<Vec<Vec<T>>, EncoderError> {
        let g = self.pooled_grad(tokens, upstream)?;
        Ok(vec![g; tokens.len()])
    }

    /// Encodes natural-language text with a leading start token.
    pub fn encode_text(&self, text: &str) -> Result<Embedding<T>, EncoderError> {
        self.encode(&self.embed_ids(&self.text_ids(text)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::tokens::TokenTableBuilder;
    use crate::numerics::{finite_diff_check, GradCheckConfig};

    fn table(d: usize) -> TokenTable<f64> {
        let words = ["an", "image", "of", "a", "dog", "cat", "red"];
        TokenTableBuilder::random(&words, d, 12, 0.5, 0.2, &mut RngStream::new(3))
            .build()
            .unwrap()
    }

    fn zero_pos_table(d: usize) -> TokenTable<f64> {
        let t = table(d);
        let emb = Matrix::from_vec(
            t.vocab_size(),
            d,
            (0..t.vocab_size())
                .flat_map(|i| t.embedding(i as u32).to_vec())
                .collect(),
        )
        .unwrap();
        TokenTable::new(t.vocab().to_vec(), emb, Matrix::zeros(12, d)).unwrap()
    }

    #[test]
    fn identity_projection_single_token() {
        let enc =
            ReferenceTextEncoder::with_projection(zero_pos_table(6), Matrix::identity(6)).unwrap();
        let v = vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0];
        let out = enc.encode(&[v.clone()]).unwrap();
        let expected = numerics::normalize_slice(&v).unwrap();
        assert_eq!(out.as_slice(), &expected[..]);
    }

    #[test]
    fn permutation_leaves_pooled_output_unchanged() {
        // Additive positions under a mean pool: Σ(vᵢ + posᵢ) does not depend on
        // which token sits at which position.
        for table in [table(8), zero_pos_table(8)] {
            let enc = ReferenceTextEncoder::new(table, 5);
            let ids = enc.text_ids("red dog");
            let swapped = vec![ids[0], ids[2], ids[1]];
            let a = enc.encode(&enc.embed_ids(&ids)).unwrap();
            let b = enc.encode(&enc.embed_ids(&swapped)).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn four_token_prompt_matches_scalar_loop() {
        let enc = ReferenceTextEncoder::new(table(8), 11);
        let ids = enc.text_ids("an image of a");
        assert_eq!(ids.len(), 5);
        let toks = enc.embed_ids(&ids);
        let d = 8;
        let mut mean = vec![0.0; d];
        for (p, &id) in ids.iter().enumerate() {
            for k in 0..d {
                mean[k] += enc.table().embedding(id)[k] + enc.table().positional(p)[k];
            }
        }
        for k in 0..d {
            mean[k] /= ids.len() as f64;
        }
        let mut g = vec![0.0; d];
        for r in 0..d {
            for c in 0..d {
                g[r] += enc.projection().get(r, c) * mean[c];
            }
        }
        let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let got = enc.encode(&toks).unwrap();
        for k in 0..d {
            assert!((got.as_slice()[k] - g[k] / n).abs() < 1e-14);
        }
    }

    #[test]
    fn output_is_unit_norm() {
        let enc = ReferenceTextEncoder::new(table(16), 2);
        for text in ["a", "an image of a dog", "cat cat cat red", "zzz"] {
            assert!(enc.encode_text(text).unwrap().is_unit(1e-9));
        }
    }

    #[test]
    fn too_long_sequence_errors() {
        let enc = ReferenceTextEncoder::new(table(4), 2);
        let toks = vec![vec![1.0; 4]; 13];
        assert!(matches!(
            enc.encode(&toks),
            Err(EncoderError::SequenceTooLong { len: 13, max: 12 })
        ));
        assert!(enc.encode_grad(&toks, &[0.0; 4]).is_err());
    }

    #[test]
    fn gradient_orthogonal_to_output_when_upstream_is_output() {
        let enc = ReferenceTextEncoder::new(table(8), 4);
        let toks = enc.embed_ids(&enc.text_ids("an image of a dog"));
        let phi = enc.encode(&toks).unwrap();
        let g = enc.pooled_grad(&toks, phi.as_slice()).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn gradient_linear_in_upstream() {
        let enc = ReferenceTextEncoder::new(table(8), 4);
        let toks = enc.embed_ids(&enc.text_ids("red cat"));
        let u = RngStream::new(8).normal_vec(8, 1.0);
        let u2: Vec<f64> = u.iter().map(|x| 2.0 * x).collect();
        let g1 = enc.encode_grad(&toks, &u).unwrap();
        let g2 = enc.encode_grad(&toks, &u2).unwrap();
        for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let enc = ReferenceTextEncoder::new(table(8), 6);
        let toks = enc.embed_ids(&enc.text_ids("an image of a dog"));
        let u = RngStream::new(1).normal_vec(8, 1.0);
        let grads = enc.encode_grad(&toks, &u).unwrap();
        let flat: Vec<f64> = toks.iter().flatten().copied().collect();
        let analytic: Vec<f64> = grads.into_iter().flatten().collect();
        let loss = |x: &[f64]| {
            let seq: Vec<Vec<f64>> = x.chunks(8).map(<[f64]>::to_vec).collect();
            numerics::dot(enc.encode(&seq).unwrap().as_slice(), &u)
        };
        let r = finite_diff_check(loss, &flat, &analytic, GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn reloaded_table_gives_bit_identical_outputs() {
        let t = table(8);
        let enc = ReferenceTextEncoder::new(t.clone(), 9);
        let back = ReferenceTextEncoder::new(
            TokenTable::<f64>::from_bytes(&t.to_bytes().unwrap()).unwrap(),
            9,
        );
        let a = enc.encode_text("an image of a red dog").unwrap();
        let b = back.encode_text("an image of a red dog").unwrap();
        assert!(a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(enc.fingerprint(), back.fingerprint());
    }
}
