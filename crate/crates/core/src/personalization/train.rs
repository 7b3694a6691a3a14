use indexmap::IndexMap;
use serde::Serialize;

use super::category::category_anchor;
use super::model::{CategoryFeatureBank, InstanceEntry, Parameterization, PersonalizedModel};
use super::objective::{BatchItem, Objective, ParamSet, TrainBatch, TrainInstance};
use super::{Ablation, PersonalizationConfig, PersonalizationError};
use crate::encoders::{PromptTemplate, ReferenceTextEncoder, DEFAULT_TEMPLATES};
use crate::numerics::{adam_step, Embedding, Matrix, OptimizerState, RngStream, Scalar};

/// Mean loss of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub round: Option<usize>,
    pub category: Option<String>,
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct MetaOutcome<T: Scalar> {
    pub bank: CategoryFeatureBank<T>,
    pub log: Vec<EpochLog>,
    /// Bank fingerprint after each round.
    pub round_fingerprints: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TestTimeOutcome<T: Scalar> {
    pub model: PersonalizedModel<T>,
    pub log: Vec<EpochLog>,
    /// Ids of the meta-dataset instances trained alongside.
    pub extra_instances: Vec<String>,
}

fn templates<T: Scalar>(
    cfg: &PersonalizationConfig,
    encoder: &ReferenceTextEncoder<T>,
) -> Result<Vec<PromptTemplate>, PersonalizationError> {
    DEFAULT_TEMPLATES
        .iter()
        .map(|t| t.to_string())
        .chain(cfg.templates.iter().cloned())
        .map(|t| Ok(PromptTemplate::parse(&t, encoder.table())?))
        .collect()
}

fn anchors<T: Scalar>(
    instances: &[TrainInstance<T>],
    encoder: &ReferenceTextEncoder<T>,
) -> Result<Vec<Embedding<T>>, PersonalizationError> {
    let mut cache: IndexMap<&str, Embedding<T>> = IndexMap::new();
    instances
        .iter()
        .map(|inst| {
            if let Some(a) = cache.get(inst.category.as_str()) {
                return Ok(a.clone());
            }
            let a = category_anchor(&inst.category, encoder)?;
            cache.insert(&inst.category, a.clone());
            Ok(a)
        })
        .collect()
}

fn init_weights<T: Scalar>(len: usize, std: f64, rng: &mut RngStream) -> Vec<T> {
    rng.normal_vec(len, std).into_iter().map(T::lit).collect()
}

fn item_list<T: Scalar>(instances: &[TrainInstance<T>]) -> Vec<(usize, usize)> {
    instances
        .iter()
        .enumerate()
        .flat_map(|(i, inst)| (0..inst.shots.len()).map(move |s| (i, s)))
        .collect()
}

fn batches_per_epoch(items: usize, batch: usize) -> u64 {
    items.div_ceil(batch) as u64
}

/// Shuffled epoch split into batches with a freshly sampled template per item.
fn epoch_batches(
    items: &[(usize, usize)],
    batch: usize,
    n_templates: usize,
    rng: &mut RngStream,
) -> Vec<Vec<BatchItem>> {
    let mut order = items.to_vec();
    rng.shuffle(&mut order);
    order
        .chunks(batch)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&(instance, shot)| BatchItem {
                    instance,
                    shot,
                    template: rng.index(n_templates),
                })
                .collect()
        })
        .collect()
}

/// Meta-personalization: for each round and each category (in bank order),
/// sample up to `instances_per_category` instances, draw fresh `z`, and train
/// `C_l` and `z` jointly for `meta_epochs`. Only the bank is returned.
///
/// The cosine schedule of each bank matrix spans all of its rounds.
pub fn meta_personalize<T: Scalar>(
    dataset: &[TrainInstance<T>],
    bank: CategoryFeatureBank<T>,
    encoder: &ReferenceTextEncoder<T>,
    cfg: &PersonalizationConfig,
    rng: &mut RngStream,
) -> Result<MetaOutcome<T>, PersonalizationError> {
    cfg.validate()?;
    let mut bank = bank;
    let mut out = MetaOutcome {
        bank: bank.clone(),
        log: Vec::new(),
        round_fingerprints: Vec::new(),
    };
    if cfg.ablation == Some(Ablation::NoMeta) {
        tracing::info!("meta-personalization skipped for ablation a");
        return Ok(out);
    }
    if bank.q() != cfg.q {
        return Err(PersonalizationError::InvalidConfig(format!(
            "bank has q={}, config q={}",
            bank.q(),
            cfg.q
        )));
    }
    let templates = templates(cfg, encoder)?;
    let weights = cfg.loss_weights();

    let mut by_category: IndexMap<String, Vec<usize>> = bank
        .categories()
        .iter()
        .map(|c| (c.clone(), Vec::new()))
        .collect();
    for (i, inst) in dataset.iter().enumerate() {
        match by_category.get_mut(&inst.category) {
            Some(v) if !inst.shots.is_empty() => v.push(i),
            Some(_) => {
                tracing::warn!(instance = %inst.id, "instance without shots left out of meta training")
            }
            None => return Err(PersonalizationError::UnknownCategory(inst.category.clone())),
        }
    }
    for (cat, members) in &by_category {
        if members.is_empty() {
            tracing::warn!(category = %cat, "no instances for category; skipped");
        }
    }

    // Draw every round's sample first so each matrix's schedule length is known.
    let mut plan: Vec<(usize, String, Vec<usize>)> = Vec::new();
    let mut totals: IndexMap<String, u64> = IndexMap::new();
    for round in 0..cfg.meta_rounds {
        for (cat, members) in by_category.iter().filter(|(_, m)| !m.is_empty()) {
            let picks: Vec<usize> = rng
                .sample_indices(members.len(), cfg.instances_per_category)
                .into_iter()
                .map(|k| members[k])
                .collect();
            let shots: usize = picks.iter().map(|&i| dataset[i].shots.len()).sum();
            let key = bank.key_for(cat)?.to_string();
            *totals.entry(key).or_default() +=
                cfg.meta_epochs as u64 * batches_per_epoch(shots, cfg.meta_batch);
            plan.push((round, cat.clone(), picks));
        }
    }

    let mut c_states: IndexMap<String, OptimizerState<T>> = totals
        .iter()
        .map(|(k, &total)| {
            let len = bank.dim() * bank.q();
            (k.clone(), OptimizerState::new(&[len], cfg.adam, total))
        })
        .collect();

    let mut current_round = 0;
    for (round, cat, picks) in plan {
        if round != current_round {
            out.round_fingerprints.push(bank.fingerprint());
            current_round = round;
        }
        let key = bank.key_for(&cat)?.to_string();
        let instances: Vec<TrainInstance<T>> = picks.iter().map(|&i| dataset[i].clone()).collect();
        let anchors = anchors(&instances, encoder)?;
        let objective = Objective {
            encoder,
            templates: &templates,
            instances: &instances,
            anchors: &anchors,
            distractors: &[],
            weights,
        };
        let c = bank.matrices()[key.as_str()].clone();
        let mut params = ParamSet {
            mode: Parameterization::Composed,
            dim: bank.dim(),
            q: bank.q(),
            n_w: cfg.n_w,
            c: vec![c],
            c_of: vec![0; instances.len()],
            z: instances
                .iter()
                .map(|_| init_weights(cfg.n_w * cfg.q, cfg.init_std, rng))
                .collect(),
        };
        let c_state = c_states.get_mut(&key).expect("planned key");
        let z_sizes: Vec<usize> = params.z.iter().map(Vec::len).collect();
        let mut z_state =
            OptimizerState::resumed(&z_sizes, cfg.adam, c_state.total_steps(), c_state.step());
        let items = item_list(&instances);
        for epoch in 0..cfg.meta_epochs {
            let mut sum = 0.0;
            let mut count = 0usize;
            for items in epoch_batches(&items, cfg.meta_batch, templates.len(), rng) {
                let batch = TrainBatch {
                    items,
                    distractors: Vec::new(),
                };
                let loss = objective.total_loss(&batch, &params)?;
                sum += loss.value.as_f64();
                count += 1;
                let ParamSet { c, z, .. } = &mut params;
                adam_step(&mut [c[0].as_mut_slice()], &[&loss.grads.c[0]], c_state)?;
                let mut zs: Vec<&mut [T]> = z.iter_mut().map(Vec::as_mut_slice).collect();
                let gz: Vec<&[T]> = loss.grads.z.iter().map(Vec::as_slice).collect();
                adam_step(&mut zs, &gz, &mut z_state)?;
            }
            out.log.push(EpochLog {
                round: Some(round),
                category: Some(cat.clone()),
                epoch,
                mean_loss: sum / count.max(1) as f64,
            });
        }
        let [c] = <[Matrix<T>; 1]>::try_from(params.c).expect("one matrix");
        bank.matrices_mut()[key.as_str()] = c;
    }
    if cfg.meta_rounds > 0 {
        out.round_fingerprints.push(bank.fingerprint());
    }
    bank.quantize();
    out.bank = bank;
    Ok(out)
}

/// Test-time personalization of the instances in `personal`, starting from
/// `bank` (or a random bank when absent or under ablation f). Up to
/// `extra_instances` same-category instances from `meta_pool` are trained
/// alongside and then dropped. Distractors are redrawn every iteration.
#[allow(clippy::too_many_arguments)]
pub fn test_time_personalize<T: Scalar>(
    personal: &[TrainInstance<T>],
    bank: Option<&CategoryFeatureBank<T>>,
    meta_pool: &[TrainInstance<T>],
    distractor_pool: &[Embedding<T>],
    categories: &[String],
    encoder: &ReferenceTextEncoder<T>,
    cfg: &PersonalizationConfig,
    rng: &mut RngStream,
) -> Result<TestTimeOutcome<T>, PersonalizationError> {
    cfg.validate()?;
    if categories.is_empty() {
        return Err(PersonalizationError::EmptyCategoryList);
    }
    for inst in personal {
        if inst.shots.is_empty() {
            return Err(PersonalizationError::EmptyInstance(inst.id.clone()));
        }
        if !categories.contains(&inst.category) {
            return Err(PersonalizationError::UnknownCategory(inst.category.clone()));
        }
    }
    let mode = cfg.parameterization();
    let bank = match (mode, bank, cfg.ablation) {
        (Parameterization::Direct, _, _) => None,
        (_, Some(b), ab) if ab != Some(Ablation::RandomC) => {
            if b.is_shared() != cfg.shared_bank() {
                return Err(PersonalizationError::InvalidConfig(
                    "bank sharing does not match the ablation setting".into(),
                ));
            }
            if b.q() != cfg.q || b.dim() != encoder.dim() {
                return Err(PersonalizationError::InvalidConfig(format!(
                    "bank is {}x{}, expected {}x{}",
                    b.dim(),
                    b.q(),
                    encoder.dim(),
                    cfg.q
                )));
            }
            Some(b.clone())
        }
        _ => Some(CategoryFeatureBank::random(
            categories,
            encoder.dim(),
            cfg.q,
            cfg.shared_bank(),
            cfg.feature_std(),
            rng,
        )?),
    };

    // Extra same-category instances from the meta dataset.
    let personal_ids: Vec<&str> = personal.iter().map(|i| i.id.as_str()).collect();
    let mut extra = Vec::new();
    let mut seen_cats: Vec<&str> = Vec::new();
    for inst in personal {
        if seen_cats.contains(&inst.category.as_str()) {
            continue;
        }
        seen_cats.push(&inst.category);
        let pool: Vec<&TrainInstance<T>> = meta_pool
            .iter()
            .filter(|m| {
                m.category == inst.category
                    && !m.shots.is_empty()
                    && !personal_ids.contains(&m.id.as_str())
            })
            .collect();
        for k in rng.sample_indices(pool.len(), cfg.extra_instances) {
            extra.push(pool[k].clone());
        }
    }
    let extra_ids: Vec<String> = extra.iter().map(|i| i.id.clone()).collect();
    let instances: Vec<TrainInstance<T>> = personal.iter().cloned().chain(extra).collect();

    let weight_len = match mode {
        Parameterization::Composed => cfg.q,
        Parameterization::Direct => encoder.dim(),
    };
    let (c, c_of) = match &bank {
        Some(b) => {
            let keys: Vec<&String> = b.matrices().keys().collect();
            let c_of = instances
                .iter()
                .map(|inst| {
                    let k = b.key_for(&inst.category)?;
                    Ok(keys.iter().position(|x| *x == k).expect("key present"))
                })
                .collect::<Result<Vec<_>, PersonalizationError>>()?;
            (b.matrices().values().cloned().collect(), c_of)
        }
        None => (Vec::new(), vec![0; instances.len()]),
    };
    let mut params = ParamSet {
        mode,
        dim: encoder.dim(),
        q: cfg.q,
        n_w: cfg.n_w,
        c,
        c_of,
        z: instances
            .iter()
            .map(|_| init_weights(cfg.n_w * weight_len, cfg.init_std, rng))
            .collect(),
    };

    let templates = templates(cfg, encoder)?;
    let anchors = anchors(&instances, encoder)?;
    let use_distractors = cfg.ablation != Some(Ablation::BatchNegativesOnly);
    let objective = Objective {
        encoder,
        templates: &templates,
        instances: &instances,
        anchors: &anchors,
        distractors: distractor_pool,
        weights: cfg.loss_weights(),
    };
    let items = item_list(&instances);
    let total = cfg.epochs as u64 * batches_per_epoch(items.len(), cfg.batch);
    let mut state = OptimizerState::new(&params.sizes(), cfg.adam, total);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut count = 0usize;
        for items in epoch_batches(&items, cfg.batch, templates.len(), rng) {
            let distractors = if use_distractors {
                rng.sample_indices(distractor_pool.len(), cfg.distractors)
            } else {
                Vec::new()
            };
            let batch = TrainBatch { items, distractors };
            let loss = objective.total_loss(&batch, &params)?;
            sum += loss.value.as_f64();
            count += 1;
            adam_step(&mut params.tensors_mut(), &loss.grads.tensors(), &mut state)?;
        }
        log.push(EpochLog {
            round: None,
            category: None,
            epoch,
            mean_loss: sum / count.max(1) as f64,
        });
    }

    let bank = match bank {
        Some(mut b) => {
            for (slot, m) in b.matrices_mut().values_mut().zip(params.c.iter()) {
                *slot = m.clone();
            }
            b.quantize();
            Some(b)
        }
        None => None,
    };
    let instances_out = personal
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let weights = params
                .weights(i)
                .into_iter()
                .map(|w| w.into_iter().map(Scalar::quantize).collect())
                .collect();
            (
                inst.id.clone(),
                InstanceEntry {
                    category: inst.category.clone(),
                    weights,
                },
            )
        })
        .collect();
    let model = PersonalizedModel {
        parameterization: mode,
        categories: categories.to_vec(),
        bank,
        instances: instances_out,
        encoder_fingerprint: encoder.fingerprint(),
        config: serde_json::to_value(cfg).expect("serializable config"),
    };
    model.check()?;
    Ok(TestTimeOutcome {
        model,
        log,
        extra_instances: extra_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::personalization::objective::tests::problem;

    fn small_cfg() -> PersonalizationConfig {
        PersonalizationConfig {
            q: 4,
            meta_rounds: 2,
            instances_per_category: 2,
            meta_epochs: 3,
            meta_batch: 8,
            epochs: 4,
            batch: 4,
            distractors: 3,
            extra_instances: 1,
            ..PersonalizationConfig::default()
        }
    }

    fn cats() -> Vec<String> {
        vec!["dog".into(), "cup".into()]
    }

    fn bank(seed: u64, q: usize) -> CategoryFeatureBank<f64> {
        CategoryFeatureBank::random(&cats(), 6, q, false, 0.5, &mut RngStream::new(seed)).unwrap()
    }

    #[test]
    fn zero_rounds_leave_bank_unchanged() {
        let pr = problem(1, 4, 6);
        let cfg = PersonalizationConfig {
            meta_rounds: 0,
            ..small_cfg()
        };
        let b = bank(2, 4);
        let out = meta_personalize(
            &pr.instances,
            b.clone(),
            &pr.encoder,
            &cfg,
            &mut RngStream::new(0),
        )
        .unwrap();
        let mut want = b;
        want.quantize();
        assert_eq!(out.bank, want);
        assert!(out.round_fingerprints.is_empty());
    }

    #[test]
    fn every_round_changes_the_bank() {
        let pr = problem(1, 4, 6);
        let b = bank(2, 4);
        let start = b.fingerprint();
        let out = meta_personalize(
            &pr.instances,
            b,
            &pr.encoder,
            &small_cfg(),
            &mut RngStream::new(0),
        )
        .unwrap();
        assert_eq!(out.round_fingerprints.len(), 2);
        assert_ne!(out.round_fingerprints[0], start);
        assert_ne!(out.round_fingerprints[0], out.round_fingerprints[1]);
        assert_eq!(out.log.len(), 2 * 2 * 3);
    }

    #[test]
    fn meta_training_is_bit_reproducible() {
        let pr = problem(3, 4, 6);
        let run = || {
            meta_personalize(
                &pr.instances,
                bank(5, 4),
                &pr.encoder,
                &small_cfg(),
                &mut RngStream::new(9),
            )
            .unwrap()
            .bank
        };
        let a = run();
        let b = run();
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let pr = problem(4, 2, 6);
        let mut cfg = small_cfg();
        cfg.epochs = 1;
        cfg.adam.lr_max = 0.0;
        cfg.extra_instances = 0;
        let b = bank(7, 4);
        let run = |cfg: &PersonalizationConfig| {
            test_time_personalize(
                &pr.instances,
                Some(&b),
                &[],
                &pr.distractors,
                &cats(),
                &pr.encoder,
                cfg,
                &mut RngStream::new(11),
            )
            .unwrap()
            .model
        };
        let trained = run(&cfg);
        let untrained = run(&PersonalizationConfig {
            epochs: 0,
            ..cfg.clone()
        });
        assert_eq!(trained.bank, untrained.bank);
        assert_eq!(trained.instances, untrained.instances);
        let mut want = b.clone();
        want.quantize();
        assert_eq!(trained.bank.as_ref().unwrap(), &want);
    }

    #[test]
    fn test_time_training_is_bit_reproducible_and_lowers_loss() {
        let pr = problem(6, 4, 6);
        let mut cfg = small_cfg();
        cfg.epochs = 30;
        let run = || {
            test_time_personalize(
                &pr.instances[..2],
                Some(&bank(1, 4)),
                &pr.instances[2..],
                &pr.distractors,
                &cats(),
                &pr.encoder,
                &cfg,
                &mut RngStream::new(2),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.model.to_bytes().unwrap(), b.model.to_bytes().unwrap());
        assert_eq!(a.extra_instances.len(), 2);
        let first = a.log.first().unwrap().mean_loss;
        let last = a.log.last().unwrap().mean_loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn direct_ablation_has_no_bank() {
        let pr = problem(6, 2, 6);
        let cfg = PersonalizationConfig {
            ablation: Some(Ablation::NoMeta),
            ..small_cfg()
        };
        let out = test_time_personalize(
            &pr.instances,
            None,
            &[],
            &pr.distractors,
            &cats(),
            &pr.encoder,
            &cfg,
            &mut RngStream::new(0),
        )
        .unwrap();
        assert!(out.model.bank.is_none());
        assert_eq!(
            out.model.instance_tokens(&pr.instances[0].id).unwrap()[0].len(),
            6
        );
    }

    #[test]
    fn instance_without_shots_is_rejected() {
        let mut pr = problem(6, 2, 6);
        pr.instances[1].shots.clear();
        let err = test_time_personalize(
            &pr.instances,
            None,
            &[],
            &pr.distractors,
            &cats(),
            &pr.encoder,
            &small_cfg(),
            &mut RngStream::new(0),
        )
        .unwrap_err();
        assert!(matches!(err, PersonalizationError::EmptyInstance(_)));
    }
}
