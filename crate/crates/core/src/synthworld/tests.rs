use std::sync::OnceLock;

use super::*;
use crate::mining::{expand_instance_shots, mine_corpus, InstanceRecord, MiningConfig, ShotCache};
use crate::personalization::assign_category;
use crate::retrieval::{compute_metrics, rank_corpus, ShotCorpus};

fn default_world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| generate_world(&WorldSpec::default()).expect("default world"))
}

#[test]
fn default_world_shape() {
    let w = default_world();
    let s = &w.spec;
    assert_eq!(
        w.personal_videos.len(),
        s.categories * s.instances_per_category
    );
    assert_eq!(
        w.meta_videos.len(),
        s.categories * s.meta_instances_per_category
    );
    assert_eq!(
        w.manifest.corpus.len(),
        s.categories * s.instances_per_category * s.shots_per_instance + s.distractor_shots
    );
    assert_eq!(w.queries.len(), 12);
    assert_eq!(w.truth.decoys.len(), s.decoys);
    assert_eq!(w.truth.instances[0].name, "fender guitar");
    for v in w.videos() {
        v.validate().unwrap();
        assert_eq!(v.shots.len(), s.train_shots + s.background_shots);
    }
    for q in &w.queries {
        assert_eq!(q.relevant_shots.len(), s.shots_per_instance);
    }
}

#[test]
fn generation_is_reproducible() {
    let again = generate_world(&WorldSpec::default()).unwrap();
    let w = default_world();
    assert_eq!(again.store_hash(), w.store_hash());
    assert_eq!(again.truth, w.truth);
    assert_eq!(again.table.fingerprint(), w.table.fingerprint());
    assert_eq!(again.meta_videos, w.meta_videos);
}

#[test]
fn seeds_change_the_store() {
    let other = generate_world(&WorldSpec {
        seed: 8,
        ..WorldSpec::default()
    })
    .unwrap();
    assert_ne!(other.store_hash(), default_world().store_hash());
}

#[test]
fn zero_noise_expansion_recovers_every_shot() {
    let w = generate_world(&WorldSpec {
        sigma_ctx: 0.0,
        sigma_frame: 0.0,
        meta_instances_per_category: 2,
        ..WorldSpec::default()
    })
    .unwrap();
    for inst in &w.truth.instances {
        let video = w.videos().find(|v| v.video_id == inst.video_id).unwrap();
        let shots = ShotCache::<f64>::new(video, &w.store);
        let s = video.shot_index(&inst.train_shots[0]).unwrap();
        let got = expand_instance_shots(s, video, &shots, THETA_EXP).unwrap();
        assert_eq!(got, inst.train_shots);
    }
}

#[test]
fn mining_recovers_planted_instances() {
    let w = default_world();
    let enc = w.encoder::<f64>().unwrap();
    let videos: Vec<_> = w.videos().cloned().collect();
    let out = mine_corpus::<f64>(&videos, &enc, &w.store, &MiningConfig::default());
    let report = world_report(&w.truth, &out.records, &out.rejections, None);
    assert!(report.instances.precision.is_perfect(), "{report:?}");
    assert!(report.instances.recall.is_perfect(), "{report:?}");
    assert!(report.shots.precision.is_perfect());
    assert!(report.shots.recall.is_perfect());
    assert!(report.names.is_perfect());
    assert!(report.decoys_rejected.is_perfect());
    // Hand count: 3 × (4 + 32) instances, 3 shots each, 6 decoys.
    assert_eq!(report.instances.recall.total, 108);
    assert_eq!(report.shots.recall.total, 324);
    assert_eq!(report.decoys_rejected.total, 6);
}

#[test]
fn category_assignment_recovers_planted_categories() {
    let w = default_world();
    let enc = w.encoder::<f64>().unwrap();
    for inst in &w.truth.instances {
        let shots: Vec<_> = inst
            .train_shots
            .iter()
            .map(|s| {
                let video = w.videos().find(|v| v.video_id == inst.video_id).unwrap();
                let shot = &video.shots[video.shot_index(s).unwrap()];
                shot_embedding::<f64, _>(&shot.frames, &w.store).unwrap()
            })
            .collect();
        assert_eq!(
            assign_category(&shots, &w.truth.categories, &enc).unwrap(),
            inst.category
        );
    }
}

#[test]
fn category_prompts_meet_the_margin() {
    let w = default_world();
    let enc = w.encoder::<f64>().unwrap();
    for (cat, proto) in w.truth.categories.iter().zip(&w.truth.prototypes) {
        let a = enc.encode_text(&category_prompt(cat)).unwrap();
        let c = cos(a.as_slice(), proto);
        assert!((c - w.spec.anchor_cosine).abs() < 1e-4, "{cat}: {c}");
    }
}

#[test]
fn instance_vectors_rank_their_shots_first() {
    let w = default_world();
    let corpus = ShotCorpus::<f64>::from_shots(&w.manifest.corpus, &w.store).unwrap();
    let mut rankings = Vec::new();
    let mut relevant = Vec::new();
    for (inst, v) in w.truth.instances.iter().zip(&w.truth.instance_vectors) {
        if inst.role == Role::Personal {
            let q = Embedding::new(v.clone()).unwrap();
            rankings.push(rank_corpus(&inst.instance_id, &q, &corpus).unwrap());
            relevant.push(inst.eval_shots.clone());
        }
    }
    let m = compute_metrics(&rankings, &relevant, 5).unwrap();
    // Six relevant shots contribute 1/6 each, so the sum rounds below 1.
    for q in &m.queries {
        assert_eq!(q.rank, 1);
        assert!((q.average_precision - 1.0).abs() < 1e-12, "{q:?}");
    }
}

#[test]
fn impossible_margin_is_rejected() {
    let err = generate_world(&WorldSpec {
        margin: 0.95,
        meta_instances_per_category: 1,
        ..WorldSpec::default()
    })
    .unwrap_err();
    assert!(matches!(err, SynthError::InfeasibleMargin(_)), "{err}");
}

#[test]
fn invalid_specs_are_rejected() {
    for spec in [
        WorldSpec {
            categories: 0,
            ..WorldSpec::default()
        },
        WorldSpec {
            text_dim: 64,
            ..WorldSpec::default()
        },
        WorldSpec {
            sigma_ctx: -1.0,
            ..WorldSpec::default()
        },
        WorldSpec {
            anchor_cosine: 1.0,
            ..WorldSpec::default()
        },
        WorldSpec {
            max_len: 4,
            ..WorldSpec::default()
        },
    ] {
        assert!(matches!(
            generate_world(&spec),
            Err(SynthError::InvalidSpec(_))
        ));
    }
}

#[test]
fn report_flags_empty_denominators() {
    let mut truth = default_world().truth.clone();
    truth.instances.clear();
    let r = world_report(&truth, &[], &[], None);
    assert_eq!(r.instances.recall.value, None);
    assert_eq!(r.instances.precision.value, None);
    assert_eq!(r.instances.recall.to_string(), "N/A (0/0)");
    assert_eq!(r.decoys_rejected.value, Some(0.0));
}

#[test]
fn report_of_a_perfect_pipeline() {
    let truth = &default_world().truth;
    let records: Vec<InstanceRecord> = truth
        .instances
        .iter()
        .map(|i| InstanceRecord {
            instance_id: i.instance_id.clone(),
            name: i.name.clone(),
            video_id: i.video_id.clone(),
            reference_shot: i.train_shots[0].clone(),
            shots: i.train_shots.clone(),
            category: Some(i.category.clone()),
            rejected: false,
        })
        .collect();
    let r = world_report(truth, &records, &[], None);
    for ratio in [
        r.instances.precision,
        r.instances.recall,
        r.shots.precision,
        r.shots.recall,
        r.names,
        r.categories,
    ] {
        assert!(ratio.is_perfect());
    }
}

#[test]
fn written_files_load_back() {
    let w = default_world();
    let dir = tempfile::tempdir().unwrap();
    let files = w.write(dir.path()).unwrap();
    let store = EmbeddingStore::load(&files.store).unwrap();
    assert_eq!(sha256_hex(&store.to_bytes().unwrap()), w.store_hash());
    let table = TokenTable::<f64>::load(&files.tokens).unwrap();
    assert_eq!(table.fingerprint(), w.table.fingerprint());
    let videos: Vec<TranscriptedVideo> = io::read_jsonl(&files.personal_transcripts).unwrap();
    assert_eq!(videos, w.personal_videos);
    let queries: Vec<QuerySpec> = io::read_jsonl(&files.queries).unwrap();
    assert_eq!(queries, w.queries);
    let spec: WorldSpec = io::read_json(&files.spec).unwrap();
    assert_eq!(spec, w.spec);
}
