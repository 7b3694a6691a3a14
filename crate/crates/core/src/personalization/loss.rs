//! Contrastive and anchoring losses with analytic gradients with respect to
//! the language embeddings φ. Vision embeddings ψ and anchors are constants.

use super::PersonalizationError;
use crate::numerics::{self, NumericsError, Scalar};

/// A loss value with its gradient for every φ row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T: Scalar> {
    pub value: T,
    pub grads: Vec<Vec<T>>,
}

impl<T: Scalar> LossOutput<T> {
    fn zero(n: usize, d: usize) -> Self {
        Self {
            value: T::zero(),
            grads: vec![vec![T::zero(); d]; n],
        }
    }
}

/// Unit-normalized copies and the original norms.
fn units<T: Scalar, V: AsRef<[T]>>(rows: &[V]) -> Result<(Vec<Vec<T>>, Vec<T>), NumericsError> {
    let mut out = Vec::with_capacity(rows.len());
    let mut norms = Vec::with_capacity(rows.len());
    for r in rows {
        let r = r.as_ref();
        norms.push(numerics::norm(r));
        out.push(numerics::normalize_slice(r)?);
    }
    Ok((out, norms))
}

/// Pulls a gradient taken with respect to `â = a/‖a‖` back to `a`.
fn unproject<T: Scalar>(g: &mut [T], unit: &[T], norm: T) {
    let along = numerics::dot(g, unit);
    for (gi, &u) in g.iter_mut().zip(unit) {
        *gi = (*gi - along * u) / norm;
    }
}

fn check_rows<T: Scalar, V: AsRef<[T]>>(rows: &[V], d: usize) -> Result<(), NumericsError> {
    rows.iter()
        .try_for_each(|r| numerics::check_len(d, r.as_ref().len()))
}

fn check_temperature(lambda: f64) -> Result<(), PersonalizationError> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(NumericsError::InvalidTemperature(lambda).into())
    }
}

/// Language-language loss:
/// `Σᵢ Σ_{j≠i} −1{yᵢ=yⱼ} log( d(φᵢ,φⱼ) / Σ_{k≠i} d(φᵢ,φₖ) )` with
/// `d(a,b) = exp(cos(a,b)/λ)`.
///
/// Batches without a positive pair contribute zero.
pub fn loss_ll<T: Scalar, V: AsRef<[T]>>(
    labels: &[usize],
    phi: &[V],
    lambda: f64,
) -> Result<LossOutput<T>, PersonalizationError> {
    check_temperature(lambda)?;
    let n = phi.len();
    if labels.len() != n {
        return Err(numerics::shape_mismatch(format!("{n} labels"), labels.len()).into());
    }
    let d = phi.first().map_or(0, |r| r.as_ref().len());
    check_rows(phi, d)?;
    let has_pair = (0..n).any(|i| (0..n).any(|j| j != i && labels[i] == labels[j]));
    if !has_pair {
        if n > 0 {
            tracing::debug!(batch = n, "no positive pairs for language-language loss");
        }
        return Ok(LossOutput::zero(n, d));
    }
    let (u, norms) = units(phi)?;
    let inv = T::lit(1.0 / lambda);
    let mut value = T::zero();
    let mut gu = vec![vec![T::zero(); d]; n];
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let logits: Vec<(usize, T)> = (0..n)
            .filter(|&k| k != i)
            .map(|k| (k, numerics::dot(&u[i], &u[k]) * inv))
            .collect();
        let lse = numerics::log_sum_exp(logits.iter().map(|&(_, s)| s));
        let p = T::lit(positives.len() as f64);
        for &j in &positives {
            value += lse - numerics::dot(&u[i], &u[j]) * inv;
        }
        // ∂/∂s_ik = p·softmax_ik − 1{k positive}
        for &(k, s) in &logits {
            let mut coef = p * (s - lse).exp();
            if labels[k] == labels[i] {
                coef -= T::one();
            }
            let c = coef * inv;
            let (ui, uk) = (u[i].clone(), u[k].clone());
            numerics::axpy(&mut gu[i], c, &uk);
            numerics::axpy(&mut gu[k], c, &ui);
        }
    }
    for i in 0..n {
        unproject(&mut gu[i], &u[i], norms[i]);
    }
    Ok(LossOutput { value, grads: gu })
}

/// Vision-language loss:
/// `Σᵢ Σⱼ −1{yᵢ=yⱼ} log( d(φᵢ,ψⱼ) / Σ_{k∈𝒩} d(φᵢ,ψₖ) )`, where `ψⱼ` is the
/// shot of batch item `j` and `𝒩` is every batch shot plus `distractors`.
/// Self-pairs `i = j` are included unless `exclude_self` is set.
pub fn loss_vl<T: Scalar, V: AsRef<[T]>, W: AsRef<[T]>>(
    labels: &[usize],
    phi: &[V],
    psi: &[W],
    distractors: &[W],
    lambda: f64,
    exclude_self: bool,
) -> Result<LossOutput<T>, PersonalizationError> {
    check_temperature(lambda)?;
    let n = phi.len();
    if labels.len() != n || psi.len() != n {
        return Err(numerics::shape_mismatch(
            format!("{n} labels and shots"),
            format!("{} labels, {} shots", labels.len(), psi.len()),
        )
        .into());
    }
    if n + distractors.len() == 0 {
        return Err(PersonalizationError::EmptyNegativesSet);
    }
    let d = phi
        .first()
        .map(|r| r.as_ref().len())
        .or_else(|| distractors.first().map(|r| r.as_ref().len()))
        .unwrap_or(0);
    check_rows(phi, d)?;
    check_rows(psi, d)?;
    check_rows(distractors, d)?;
    if n == 0 {
        return Ok(LossOutput::zero(0, d));
    }
    let (u, norms) = units(phi)?;
    let (negatives, _) = units::<T, &[T]>(
        &psi.iter()
            .map(AsRef::as_ref)
            .chain(distractors.iter().map(AsRef::as_ref))
            .collect::<Vec<_>>(),
    )?;
    let inv = T::lit(1.0 / lambda);
    let mut value = T::zero();
    let mut gu = vec![vec![T::zero(); d]; n];
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| labels[j] == labels[i] && !(exclude_self && j == i))
            .collect();
        if positives.is_empty() {
            continue;
        }
        let logits: Vec<T> = negatives
            .iter()
            .map(|v| numerics::dot(&u[i], v) * inv)
            .collect();
        let lse = numerics::log_sum_exp(logits.iter().copied());
        let p = T::lit(positives.len() as f64);
        for &j in &positives {
            value += lse - logits[j];
        }
        for (k, &s) in logits.iter().enumerate() {
            numerics::axpy(&mut gu[i], p * (s - lse).exp() * inv, &negatives[k]);
        }
        for &j in &positives {
            numerics::axpy(&mut gu[i], -inv, &negatives[j]);
        }
        unproject(&mut gu[i], &u[i], norms[i]);
    }
    Ok(LossOutput { value, grads: gu })
}

/// Category anchoring: `−Σᵢ cos(c_{l(i)}, φᵢ)`, one anchor per item.
pub fn loss_cat<T: Scalar, V: AsRef<[T]>, W: AsRef<[T]>>(
    phi: &[V],
    anchors: &[W],
) -> Result<LossOutput<T>, PersonalizationError> {
    if anchors.len() != phi.len() {
        return Err(
            numerics::shape_mismatch(format!("{} anchors", phi.len()), anchors.len()).into(),
        );
    }
    let mut value = T::zero();
    let mut grads = Vec::with_capacity(phi.len());
    for (p, c) in phi.iter().zip(anchors) {
        let (cos, gp, _) = numerics::cosine_grad(p.as_ref(), c.as_ref())?;
        value -= cos;
        grads.push(gp.into_iter().map(|g| -g).collect());
    }
    Ok(LossOutput { value, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{
        finite_diff_check, temp_similarity, Embedding, GradCheckConfig, RngStream,
    };
    use proptest::prelude::*;

    fn rows(rng: &mut RngStream, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| rng.normal_vec(d, 1.0)).collect()
    }

    fn kernel(a: &[f64], b: &[f64], lambda: f64) -> f64 {
        temp_similarity(
            &Embedding::new(a.to_vec()).unwrap(),
            &Embedding::new(b.to_vec()).unwrap(),
            lambda,
        )
        .unwrap()
    }

    /// Literal transcription of the language-language sum.
    fn ll_oracle(labels: &[usize], phi: &[Vec<f64>], lambda: f64) -> f64 {
        let n = phi.len();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if j == i || labels[i] != labels[j] {
                    continue;
                }
                let den: f64 = (0..n)
                    .filter(|&k| k != i)
                    .map(|k| kernel(&phi[i], &phi[k], lambda))
                    .sum();
                total -= (kernel(&phi[i], &phi[j], lambda) / den).ln();
            }
        }
        total
    }

    fn vl_oracle(
        labels: &[usize],
        phi: &[Vec<f64>],
        psi: &[Vec<f64>],
        extra: &[Vec<f64>],
        lambda: f64,
    ) -> f64 {
        let n = phi.len();
        let negs: Vec<&Vec<f64>> = psi.iter().chain(extra).collect();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] != labels[j] {
                    continue;
                }
                let den: f64 = negs.iter().map(|k| kernel(&phi[i], k, lambda)).sum();
                total -= (kernel(&phi[i], &psi[j], lambda) / den).ln();
            }
        }
        total
    }

    fn flat(v: &[Vec<f64>]) -> Vec<f64> {
        v.iter().flatten().copied().collect()
    }

    fn unflat(x: &[f64], d: usize) -> Vec<Vec<f64>> {
        x.chunks(d).map(<[f64]>::to_vec).collect()
    }

    #[test]
    fn ll_two_identical_items_is_zero() {
        let v = vec![0.3, -0.2, 0.9];
        let out = loss_ll::<f64, _>(&[0, 0], &[v.clone(), v], 0.1).unwrap();
        assert!(out.value.abs() < 1e-12);
    }

    #[test]
    fn ll_matches_transcription() {
        let mut rng = RngStream::new(17);
        let phi = rows(&mut rng, 3, 8);
        let labels = [0, 0, 1];
        let out = loss_ll::<f64, _>(&labels, &phi, 0.1).unwrap();
        let want = ll_oracle(&labels, &phi, 0.1);
        assert!(
            (out.value - want).abs() < 1e-9 * want.abs().max(1.0),
            "{} vs {want}",
            out.value
        );
    }

    #[test]
    fn ll_all_distinct_is_zero() {
        let mut rng = RngStream::new(1);
        let out = loss_ll::<f64, _>(&[0, 1, 2, 3], &rows(&mut rng, 4, 5), 0.1).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn vl_single_item_self_pair_is_zero() {
        let out =
            loss_vl::<f64, _, _>(&[0], &[vec![1.0, 2.0]], &[vec![-0.5, 0.1]], &[], 0.1, false)
                .unwrap();
        assert!(out.value.abs() < 1e-12);
    }

    #[test]
    fn vl_matches_transcription() {
        let mut rng = RngStream::new(23);
        let phi = rows(&mut rng, 3, 8);
        let psi = rows(&mut rng, 3, 8);
        let extra = rows(&mut rng, 2, 8);
        let labels = [4, 1, 4];
        let out = loss_vl(&labels, &phi, &psi, &extra, 0.1, false).unwrap();
        let want = vl_oracle(&labels, &phi, &psi, &extra, 0.1);
        assert!((out.value - want).abs() < 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn vl_near_distractor_costs_more_than_far_one() {
        let mut rng = RngStream::new(5);
        let phi = rows(&mut rng, 2, 6);
        let psi = rows(&mut rng, 2, 6);
        let labels = [0, 0];
        let base = loss_vl(&labels, &phi, &psi, &[], 0.1, false).unwrap().value;
        let far: Vec<f64> = phi[0].iter().map(|x| -x).collect();
        let near = phi[0].clone();
        let with_far = loss_vl(&labels, &phi, &psi, &[far], 0.1, false)
            .unwrap()
            .value;
        let with_near = loss_vl(&labels, &phi, &psi, &[near], 0.1, false)
            .unwrap()
            .value;
        assert!(with_far > base && with_near > with_far);
        assert!(with_far - base < with_near - base);
    }

    #[test]
    fn vl_needs_negatives() {
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(
            loss_vl::<f64, _, _>(&[], &empty, &empty, &empty, 0.1, false),
            Err(PersonalizationError::EmptyNegativesSet)
        ));
    }

    #[test]
    fn vl_exclude_self_drops_diagonal_terms() {
        let mut rng = RngStream::new(8);
        let phi = rows(&mut rng, 1, 4);
        let psi = rows(&mut rng, 1, 4);
        let out = loss_vl(&[0], &phi, &psi, &rows(&mut rng, 2, 4), 0.1, true).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn cat_extremes() {
        let c = vec![0.0, 1.0, 0.0];
        let aligned =
            loss_cat::<f64, _, _>(&[c.clone(), vec![0.0, 3.0, 0.0]], &[c.clone(), c.clone()])
                .unwrap();
        assert!((aligned.value + 2.0).abs() < 1e-12);
        let ortho = loss_cat::<f64, _, _>(&[vec![1.0, 0.0, 0.0]], &[c]).unwrap();
        assert!(ortho.value.abs() < 1e-12);
    }

    #[test]
    fn cat_matches_scalar_oracle() {
        let mut rng = RngStream::new(31);
        let phi = rows(&mut rng, 4, 7);
        let anchors = rows(&mut rng, 4, 7);
        let out = loss_cat(&phi, &anchors).unwrap();
        let mut want = 0.0;
        for (p, c) in phi.iter().zip(&anchors) {
            let (mut pc, mut pp, mut cc) = (0.0, 0.0, 0.0);
            for k in 0..7 {
                pc += p[k] * c[k];
                pp += p[k] * p[k];
                cc += c[k] * c[k];
            }
            want -= pc / (pp.sqrt() * cc.sqrt());
        }
        assert!((out.value - want).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = RngStream::new(100 + seed);
            let d = 5;
            let phi = rows(&mut rng, 4, d);
            let psi = rows(&mut rng, 4, d);
            let extra = rows(&mut rng, 3, d);
            let anchors = rows(&mut rng, 4, d);
            let labels = [0, 1, 0, 1];
            let x = flat(&phi);
            let cfg = GradCheckConfig::default();

            let ll = loss_ll(&labels, &phi, 0.1).unwrap();
            let r = finite_diff_check(
                |p| loss_ll(&labels, &unflat(p, d), 0.1).unwrap().value,
                &x,
                &flat(&ll.grads),
                cfg,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-4, "ll {}", r.max_rel_error);

            for exclude in [false, true] {
                let vl = loss_vl(&labels, &phi, &psi, &extra, 0.1, exclude).unwrap();
                let r = finite_diff_check(
                    |p| {
                        loss_vl(&labels, &unflat(p, d), &psi, &extra, 0.1, exclude)
                            .unwrap()
                            .value
                    },
                    &x,
                    &flat(&vl.grads),
                    cfg,
                )
                .unwrap();
                assert!(r.max_rel_error <= 1e-4, "vl {}", r.max_rel_error);
            }

            let cat = loss_cat(&phi, &anchors).unwrap();
            let r = finite_diff_check(
                |p| loss_cat(&unflat(p, d), &anchors).unwrap().value,
                &x,
                &flat(&cat.grads),
                cfg,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-4, "cat {}", r.max_rel_error);
        }
    }

    proptest! {
        #[test]
        fn losses_ignore_phi_scale(seed in 0u64..500, s in 0.1f64..10.0) {
            let mut rng = RngStream::new(seed);
            let phi = rows(&mut rng, 3, 4);
            let psi = rows(&mut rng, 3, 4);
            let scaled: Vec<Vec<f64>> = phi.iter().map(|r| r.iter().map(|x| x * s).collect()).collect();
            let labels = [0, 0, 1];
            let a = loss_ll(&labels, &phi, 0.1).unwrap().value;
            let b = loss_ll(&labels, &scaled, 0.1).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            let a = loss_vl(&labels, &phi, &psi, &[], 0.1, false).unwrap().value;
            let b = loss_vl(&labels, &scaled, &psi, &[], 0.1, false).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn cat_is_bounded_by_batch_size(seed in 0u64..500, n in 1usize..6) {
            let mut rng = RngStream::new(seed);
            let v = loss_cat(&rows(&mut rng, n, 4), &rows(&mut rng, n, 4)).unwrap().value;
            prop_assert!(v.abs() <= n as f64 + 1e-12);
        }
    }
}
