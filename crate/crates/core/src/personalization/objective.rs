//! The total training objective and its chain rule back to `z` and `C`.

use super::loss::{loss_cat, loss_ll, loss_vl};
use super::model::Parameterization;
use super::PersonalizationError;
use crate::encoders::{build_personalized_query, PromptTemplate, ReferenceTextEncoder};
use crate::numerics::{self, Embedding, Matrix, Scalar};

/// One instance's training shots, already embedded.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainInstance<T: Scalar> {
    pub id: String,
    pub category: String,
    pub shots: Vec<Embedding<T>>,
}

/// Which loss terms are active and how they are weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub lambda_c: f64,
    pub use_ll: bool,
    pub use_cat: bool,
    pub vl_exclude_self: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lambda_c: 0.5,
            use_ll: true,
            use_cat: true,
            vl_exclude_self: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    /// Index into the objective's instances.
    pub instance: usize,
    /// Index into that instance's shots.
    pub shot: usize,
    /// Index into the objective's templates.
    pub template: usize,
}

/// A mini-batch plus the extra negatives used with it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainBatch {
    pub items: Vec<BatchItem>,
    /// Indices into the objective's distractor pool.
    pub distractors: Vec<usize>,
}

/// Learnable tensors. `c[k]` is a flattened `d×q` matrix; `z[i]` holds the
/// `n_w` weight vectors of instance `i` back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar> {
    pub mode: Parameterization,
    pub dim: usize,
    pub q: usize,
    pub n_w: usize,
    pub c: Vec<Matrix<T>>,
    /// Which `c` entry each instance uses (ignored in direct mode).
    pub c_of: Vec<usize>,
    pub z: Vec<Vec<T>>,
}

impl<T: Scalar> ParamSet<T> {
    /// Length of one weight vector.
    pub fn weight_len(&self) -> usize {
        match self.mode {
            Parameterization::Composed => self.q,
            Parameterization::Direct => self.dim,
        }
    }

    pub fn weights(&self, instance: usize) -> Vec<Vec<T>> {
        self.z[instance]
            .chunks(self.weight_len())
            .map(<[T]>::to_vec)
            .collect()
    }

    pub fn tokens(&self, instance: usize) -> Result<Vec<Vec<T>>, PersonalizationError> {
        let weights = self.weights(instance);
        match self.mode {
            Parameterization::Direct => Ok(weights),
            Parameterization::Composed => {
                super::instance_tokens(&self.c[self.c_of[instance]], &weights)
            }
        }
    }

    /// Flattened sizes of every tensor, `c` first.
    pub fn sizes(&self) -> Vec<usize> {
        self.c
            .iter()
            .map(|m| m.as_slice().len())
            .chain(self.z.iter().map(Vec::len))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = self.c.iter_mut().map(Matrix::as_mut_slice).collect();
        out.extend(self.z.iter_mut().map(Vec::as_mut_slice));
        out
    }

    pub fn flatten(&self) -> Vec<T> {
        self.c
            .iter()
            .flat_map(|m| m.as_slice().iter().copied())
            .chain(self.z.iter().flatten().copied())
            .collect()
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn assign(&mut self, flat: &[T]) {
        let mut it = flat.iter().copied();
        for t in self.tensors_mut() {
            t.iter_mut()
                .for_each(|x| *x = it.next().expect("flat length matches"));
        }
    }
}

/// Gradients laid out like [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T: Scalar> {
    pub c: Vec<Vec<T>>,
    pub z: Vec<Vec<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn tensors(&self) -> Vec<&[T]> {
        self.c.iter().chain(&self.z).map(Vec::as_slice).collect()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.c.iter().chain(&self.z).flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss<T: Scalar> {
    pub value: T,
    pub ll: T,
    pub vl: T,
    pub cat: T,
    pub grads: ParamGrads<T>,
}

/// Everything the objective needs besides the parameters.
pub struct Objective<'a, T: Scalar> {
    pub encoder: &'a ReferenceTextEncoder<T>,
    pub templates: &'a [PromptTemplate],
    pub instances: &'a [TrainInstance<T>],
    /// Category anchor `c_l` of each instance.
    pub anchors: &'a [Embedding<T>],
    pub distractors: &'a [Embedding<T>],
    pub weights: LossWeights,
}

impl<T: Scalar> Objective<'_, T> {
    /// `L = L_l + L_vl + λ_c·L_c` on `batch`, with gradients for every tensor.
    pub fn total_loss(
        &self,
        batch: &TrainBatch,
        params: &ParamSet<T>,
    ) -> Result<TotalLoss<T>, PersonalizationError> {
        let n = batch.items.len();
        let mut tokens_of: Vec<Option<Vec<Vec<T>>>> = vec![None; self.instances.len()];
        let mut sequences = Vec::with_capacity(n);
        let mut phi = Vec::with_capacity(n);
        for item in &batch.items {
            let i = item.instance;
            if tokens_of[i].is_none() {
                tokens_of[i] = Some(params.tokens(i)?);
            }
            let template = self.templates.get(item.template).ok_or_else(|| {
                PersonalizationError::InvalidConfig(format!("template index {}", item.template))
            })?;
            let q = build_personalized_query(
                template,
                tokens_of[i].as_ref().expect("filled above"),
                self.encoder,
            )?;
            phi.push(self.encoder.encode(&q.tokens)?.into_vec());
            sequences.push(q);
        }
        let labels: Vec<usize> = batch.items.iter().map(|it| it.instance).collect();
        let psi: Vec<&[T]> = batch
            .items
            .iter()
            .map(|it| {
                self.instances[it.instance]
                    .shots
                    .get(it.shot)
                    .map(Embedding::as_slice)
                    .ok_or_else(|| {
                        PersonalizationError::EmptyInstance(self.instances[it.instance].id.clone())
                    })
            })
            .collect::<Result<_, _>>()?;
        let extra: Vec<&[T]> = batch
            .distractors
            .iter()
            .map(|&k| self.distractors[k].as_slice())
            .collect();

        let d = self.encoder.dim();
        let mut grad_phi = vec![vec![T::zero(); d]; n];
        let vl = loss_vl(
            &labels,
            &phi,
            &psi,
            &extra,
            self.weights.lambda,
            self.weights.vl_exclude_self,
        )?;
        add_rows(&mut grad_phi, &vl.grads, T::one());
        let mut ll_value = T::zero();
        if self.weights.use_ll {
            let ll = loss_ll(&labels, &phi, self.weights.lambda)?;
            add_rows(&mut grad_phi, &ll.grads, T::one());
            ll_value = ll.value;
        }
        let mut cat_value = T::zero();
        let lambda_c = T::lit(self.weights.lambda_c);
        if self.weights.use_cat && self.weights.lambda_c != 0.0 {
            let anchors: Vec<&[T]> = labels.iter().map(|&i| self.anchors[i].as_slice()).collect();
            let cat = loss_cat(&phi, &anchors)?;
            add_rows(&mut grad_phi, &cat.grads, lambda_c);
            cat_value = cat.value;
        }
        let value = ll_value + vl.value + lambda_c * cat_value;

        // Back through the encoder to the instance tokens.
        let wl = params.weight_len();
        let mut grad_w: Vec<Option<Vec<Vec<T>>>> = vec![None; self.instances.len()];
        for ((item, seq), gp) in batch.items.iter().zip(&sequences).zip(&grad_phi) {
            let g = self.encoder.pooled_grad(&seq.tokens, gp)?;
            let acc =
                grad_w[item.instance].get_or_insert_with(|| vec![vec![T::zero(); d]; params.n_w]);
            for slot in acc.iter_mut() {
                numerics::axpy(slot, T::one(), &g);
            }
        }
        let mut grads = ParamGrads {
            c: params
                .c
                .iter()
                .map(|m| vec![T::zero(); m.as_slice().len()])
                .collect(),
            z: params.z.iter().map(|z| vec![T::zero(); z.len()]).collect(),
        };
        for (i, gw) in grad_w.iter().enumerate() {
            let Some(gw) = gw else { continue };
            match params.mode {
                Parameterization::Direct => {
                    for (s, g) in gw.iter().enumerate() {
                        grads.z[i][s * wl..(s + 1) * wl].copy_from_slice(g);
                    }
                }
                Parameterization::Composed => {
                    let k = params.c_of[i];
                    let c = &params.c[k];
                    let weights = params.weights(i);
                    let mut gc =
                        Matrix::from_vec(c.rows(), c.cols(), std::mem::take(&mut grads.c[k]))?;
                    for (s, g) in gw.iter().enumerate() {
                        // ∂L/∂z = Cᵀ ∂L/∂w ; ∂L/∂C += ∂L/∂w zᵀ
                        let gz = c.matvec_t(g)?;
                        numerics::axpy(&mut grads.z[i][s * wl..(s + 1) * wl], T::one(), &gz);
                        gc.add_outer(T::one(), g, &weights[s])?;
                    }
                    grads.c[k] = gc.as_slice().to_vec();
                }
            }
        }
        Ok(TotalLoss {
            value,
            ll: ll_value,
            vl: vl.value,
            cat: cat_value,
            grads,
        })
    }
}

fn add_rows<T: Scalar>(acc: &mut [Vec<T>], rows: &[Vec<T>], scale: T) {
    for (a, r) in acc.iter_mut().zip(rows) {
        numerics::axpy(a, scale, r);
    }
}
