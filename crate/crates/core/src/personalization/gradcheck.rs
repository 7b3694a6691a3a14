//! Finite-difference validation of every loss term on small seeded problems.

use serde::Serialize;

use super::loss::{loss_cat, loss_ll, loss_vl};
use super::model::Parameterization;
use super::objective::{BatchItem, LossWeights, Objective, ParamSet, TrainBatch, TrainInstance};
use super::PersonalizationError;
use crate::encoders::{PromptTemplate, ReferenceTextEncoder, TokenTableBuilder, DEFAULT_TEMPLATES};
use crate::numerics::{
    finite_diff_check, normalize_slice, Embedding, GradCheckConfig, Matrix, RngStream,
};

/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub problem: u64,
    /// `ll`, `vl`, `cat` or `total`.
    pub term: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckSuite {
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub entries: Vec<GradCheckEntry>,
}

fn rows(rng: &mut RngStream, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| rng.normal_vec(d, 1.0)).collect()
}

fn flat(v: &[Vec<f64>]) -> Vec<f64> {
    v.concat()
}

fn unflat(v: &[f64], d: usize) -> Vec<Vec<f64>> {
    v.chunks(d).map(<[f64]>::to_vec).collect()
}

fn unit(rng: &mut RngStream, d: usize) -> Result<Embedding<f64>, PersonalizationError> {
    Ok(Embedding::new(normalize_slice(&rng.normal_vec(d, 1.0))?)?)
}

/// Checks `L_l`, `L_vl`, `L_c` against φ and the weighted total against the
/// learnable `C` and `z`, one problem per seed.
pub fn run_gradcheck(seeds: &[u64]) -> Result<GradCheckSuite, PersonalizationError> {
    let cfg = GradCheckConfig::default();
    let mut entries = Vec::new();
    let mut push = |problem: u64, term: &str, r: crate::numerics::GradCheckReport| {
        entries.push(GradCheckEntry {
            problem,
            term: term.to_string(),
            max_rel_error: r.max_rel_error,
            coords_checked: r.coords_checked,
        })
    };
    for &seed in seeds {
        let mut rng = RngStream::new(seed);
        let d = 5;
        let phi = rows(&mut rng, 4, d);
        let psi = rows(&mut rng, 4, d);
        let extra = rows(&mut rng, 3, d);
        let anchors = rows(&mut rng, 4, d);
        let labels = [0, 1, 0, 1];
        let x = flat(&phi);

        let ll = loss_ll(&labels, &phi, 0.1)?;
        let r = finite_diff_check(
            |p| loss_ll(&labels, &unflat(p, d), 0.1).map_or(f64::NAN, |o| o.value),
            &x,
            &flat(&ll.grads),
            cfg,
        )?;
        push(seed, "ll", r);

        let vl = loss_vl(&labels, &phi, &psi, &extra, 0.1, false)?;
        let r = finite_diff_check(
            |p| {
                loss_vl(&labels, &unflat(p, d), &psi, &extra, 0.1, false)
                    .map_or(f64::NAN, |o| o.value)
            },
            &x,
            &flat(&vl.grads),
            cfg,
        )?;
        push(seed, "vl", r);

        let cat = loss_cat(&phi, &anchors)?;
        let r = finite_diff_check(
            |p| loss_cat(&unflat(p, d), &anchors).map_or(f64::NAN, |o| o.value),
            &x,
            &flat(&cat.grads),
            cfg,
        )?;
        push(seed, "cat", r);

        push(seed, "total", total_problem(seed, cfg)?);
    }
    let max_rel_error = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckSuite {
        tolerance: GRADCHECK_TOLERANCE,
        max_rel_error,
        passed: max_rel_error <= GRADCHECK_TOLERANCE,
        entries,
    })
}

/// The full objective through the text encoder: two categories, three
/// instances, composed tokens.
fn total_problem(
    seed: u64,
    cfg: GradCheckConfig,
) -> Result<crate::numerics::GradCheckReport, PersonalizationError> {
    let (n, d, q) = (3, 6, 4);
    let mut rng = RngStream::new(seed ^ 0x5eed);
    let words: Vec<&str> = DEFAULT_TEMPLATES
        .iter()
        .flat_map(|t| t.split(' '))
        .filter(|w| *w != "*")
        .collect();
    let table = TokenTableBuilder::random(&words, d, 12, 0.5, 0.1, &mut rng).build()?;
    let encoder = ReferenceTextEncoder::new(table, seed + 1);
    let templates = PromptTemplate::defaults(encoder.table())?;
    let instances = (0..n)
        .map(|i| {
            Ok(TrainInstance {
                id: format!("v{i}#0"),
                category: if i % 2 == 0 { "dog" } else { "cup" }.into(),
                shots: (0..3)
                    .map(|_| unit(&mut rng, d))
                    .collect::<Result<_, PersonalizationError>>()?,
            })
        })
        .collect::<Result<Vec<_>, PersonalizationError>>()?;
    let cat_dirs = [unit(&mut rng, d)?, unit(&mut rng, d)?];
    let anchors: Vec<Embedding<f64>> = (0..n).map(|i| cat_dirs[i % 2].clone()).collect();
    let distractors = (0..4)
        .map(|_| unit(&mut rng, d))
        .collect::<Result<Vec<_>, _>>()?;
    let obj = Objective {
        encoder: &encoder,
        templates: &templates,
        instances: &instances,
        anchors: &anchors,
        distractors: &distractors,
        weights: LossWeights::default(),
    };
    let mut p = ParamSet {
        mode: Parameterization::Composed,
        dim: d,
        q,
        n_w: 1,
        c: (0..2)
            .map(|_| Matrix::random_normal(d, q, 0.5, &mut rng))
            .collect(),
        c_of: (0..n).map(|i| i % 2).collect(),
        z: (0..n).map(|_| rng.normal_vec(q, 0.5)).collect(),
    };
    let batch = TrainBatch {
        items: (0..2 * n)
            .map(|k| BatchItem {
                instance: k % n,
                shot: k % 3,
                template: k % 3,
            })
            .collect(),
        distractors: vec![0, 2, 3],
    };
    let analytic = obj.total_loss(&batch, &p)?.grads.flatten();
    let x = p.flatten();
    Ok(finite_diff_check(
        |v| {
            p.assign(v);
            obj.total_loss(&batch, &p).map_or(f64::NAN, |o| o.value)
        },
        &x,
        &analytic,
        cfg,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_problems_pass() {
        let s = run_gradcheck(&[0, 1, 2]).unwrap();
        assert_eq!(s.entries.len(), 12);
        assert!(s.passed, "{s:?}");
        assert!(s.entries.iter().all(|e| e.coords_checked > 0));
    }
}
