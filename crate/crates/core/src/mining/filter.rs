use serde::Serialize;

use super::{InstanceCandidate, MiningError, TranscriptedVideo};
use crate::encoders::{shot_embedding, EmbeddingStore, EncoderError, ReferenceTextEncoder};
use crate::numerics::{Embedding, Scalar};

/// Shot embeddings of one video, computed once.
pub struct ShotCache<T: Scalar> {
    shots: Vec<Result<Embedding<T>, String>>,
}

impl<T: Scalar> ShotCache<T> {
    pub fn new(video: &TranscriptedVideo, store: &EmbeddingStore) -> Self {
        Self {
            shots: video
                .shots
                .iter()
                .map(|s| {
                    shot_embedding(&s.frames, store).map_err(|e| format!("shot {}: {e}", s.id))
                })
                .collect(),
        }
    }

    pub fn get(&self, index: usize) -> Result<&Embedding<T>, MiningError> {
        self.shots[index]
            .as_ref()
            .map_err(|e| EncoderError::MissingFrame(e.clone()).into())
    }

    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisualReference {
    pub shot_index: usize,
    pub shot_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FilterOutcome {
    Accepted(VisualReference),
    Rejected { best_similarity: f64 },
}

/// Compares the candidate's name with the shots around its mention
/// (`[s−1, s, s+1]`, clamped to the video) and accepts the best shot when its
/// cosine is strictly above `theta_vis`.
pub fn filter_nonvisual<T: Scalar>(
    candidate: &InstanceCandidate,
    video: &TranscriptedVideo,
    encoder: &ReferenceTextEncoder<T>,
    shots: &ShotCache<T>,
    theta_vis: f64,
) -> Result<FilterOutcome, MiningError> {
    let center = candidate
        .overlapping_shot
        .ok_or(MiningError::NoOverlappingShot(candidate.mention_time))?;
    let text = encoder.encode_text(&candidate.name.join(" "))?;
    let lo = center.saturating_sub(1);
    let hi = (center + 1).min(shots.len() - 1);

    let mut best: Option<(usize, f64)> = None;
    for i in lo..=hi {
        let sim = text.cosine(shots.get(i)?)?.as_f64();
        if best.is_none_or(|(_, b)| sim > b) {
            best = Some((i, sim));
        }
    }
    let (shot_index, similarity) = best.expect("window holds at least one shot");
    Ok(if similarity > theta_vis {
        FilterOutcome::Accepted(VisualReference {
            shot_index,
            shot_id: video.shots[shot_index].id.clone(),
            similarity,
        })
    } else {
        FilterOutcome::Rejected {
            best_similarity: similarity,
        }
    })
}

/// Longest prefix of the candidate name whose text embedding has cosine
/// strictly above `theta` with the reference shot.
pub fn truncate_name<T: Scalar>(
    candidate: &InstanceCandidate,
    reference: &Embedding<T>,
    encoder: &ReferenceTextEncoder<T>,
    theta: f64,
) -> Result<Vec<String>, MiningError> {
    for k in (1..=candidate.name.len()).rev() {
        let text = encoder.encode_text(&candidate.name[..k].join(" "))?;
        if text.cosine(reference)?.as_f64() > theta {
            return Ok(candidate.name[..k].to_vec());
        }
    }
    Err(MiningError::NoVisualName)
}

/// Every shot of the video whose cosine with the reference shot is strictly
/// above `theta_exp`, in video order. The reference itself is always kept.
/// Shots that cannot be embedded are skipped.
pub fn expand_instance_shots<T: Scalar>(
    reference_index: usize,
    video: &TranscriptedVideo,
    shots: &ShotCache<T>,
    theta_exp: f64,
) -> Result<Vec<String>, MiningError> {
    let reference = shots.get(reference_index)?;
    let mut out = Vec::new();
    for (i, shot) in video.shots.iter().enumerate() {
        if i == reference_index {
            out.push(shot.id.clone());
            continue;
        }
        let Ok(e) = shots.get(i) else {
            tracing::warn!(shot = %shot.id, "skipping shot without embedding during expansion");
            continue;
        };
        if reference.cosine(e)?.as_f64() > theta_exp {
            out.push(shot.id.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::encoders::{TokenTable, TokenTableBuilder};
    use crate::mining::{Shot, Word};
    use crate::numerics::{Matrix, RngStream};

    /// Encoder with identity projection and zero positions, whose tokens are
    /// planted so text embeddings are exactly controllable.
    pub(crate) fn planted_encoder(
        rows: &[(&str, Vec<f64>)],
        d: usize,
    ) -> ReferenceTextEncoder<f64> {
        let words: Vec<&str> = rows.iter().map(|(w, _)| *w).collect();
        let mut b = TokenTableBuilder::random(&words, d, 16, 0.0, 0.0, &mut RngStream::new(0));
        for (w, v) in rows {
            let id = b.id(w).unwrap();
            b.set_row(id, v.clone());
        }
        let t: TokenTable<f64> = b.build().unwrap();
        ReferenceTextEncoder::with_projection(t, Matrix::identity(d)).unwrap()
    }

    /// Unit vector in 4-d with given cosine to e₀ and the rest along `axis`.
    pub(crate) fn at_cos(c: f64, axis: usize) -> Vec<f64> {
        let mut v = vec![0.0; 4];
        v[0] = c;
        v[axis] = (1.0 - c * c).sqrt();
        v
    }

    fn video_with(shot_vecs: &[Vec<f64>], store: &mut EmbeddingStore) -> TranscriptedVideo {
        let shots = shot_vecs
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let fid = format!("v/s{i}/f0");
                store
                    .insert(fid.clone(), v.iter().map(|&x| x as f32).collect())
                    .unwrap();
                Shot {
                    id: format!("v/s{i}"),
                    t0: i as f64 * 10.0,
                    t1: (i + 1) as f64 * 10.0,
                    frames: vec![fid],
                }
            })
            .collect();
        TranscriptedVideo {
            video_id: "v".into(),
            words: vec![Word {
                t0: 0.0,
                t1: 0.1,
                w: "x".into(),
            }],
            shots,
        }
    }

    fn candidate(name: &[&str], shot: Option<usize>) -> InstanceCandidate {
        InstanceCandidate {
            video_id: "v".into(),
            match_index: 0,
            pattern: "this is my".into(),
            name: name.iter().map(|s| s.to_string()).collect(),
            mention_time: shot.map_or(-1.0, |s| s as f64 * 10.0 + 1.0),
            overlapping_shot: shot,
        }
    }

    // The start token row is zero, so the text embedding of a single planted
    // word is exactly that word's direction.
    fn start_zero(mut rows: Vec<(&'static str, Vec<f64>)>) -> Vec<(&'static str, Vec<f64>)> {
        rows.push(("<sot>", vec![0.0; 4]));
        rows
    }

    #[test]
    fn planted_similarities_pick_middle_shot() {
        let enc = planted_encoder(&start_zero(vec![("guitar", vec![1.0, 0.0, 0.0, 0.0])]), 4);
        let mut store = EmbeddingStore::new(4);
        let v = video_with(
            &[at_cos(0.1, 1), at_cos(0.35, 2), at_cos(0.2, 3)],
            &mut store,
        );
        let shots = ShotCache::new(&v, &store);
        let out =
            filter_nonvisual(&candidate(&["guitar"], Some(1)), &v, &enc, &shots, 0.3).unwrap();
        match out {
            FilterOutcome::Accepted(r) => {
                assert_eq!(r.shot_id, "v/s1");
                assert!((r.similarity - 0.35).abs() < 1e-6);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn window_clamps_at_first_shot() {
        let enc = planted_encoder(&start_zero(vec![("guitar", vec![1.0, 0.0, 0.0, 0.0])]), 4);
        let mut store = EmbeddingStore::new(4);
        // Shot 2 is the best match overall but lies outside the clamped window.
        let v = video_with(
            &[at_cos(0.1, 1), at_cos(0.5, 2), at_cos(0.9, 3)],
            &mut store,
        );
        let shots = ShotCache::new(&v, &store);
        let FilterOutcome::Accepted(r) =
            filter_nonvisual(&candidate(&["guitar"], Some(0)), &v, &enc, &shots, 0.3).unwrap()
        else {
            panic!("expected acceptance")
        };
        assert_eq!(r.shot_index, 1);
    }

    #[test]
    fn threshold_is_strict_and_monotone() {
        let enc = planted_encoder(&start_zero(vec![("guitar", vec![1.0, 0.0, 0.0, 0.0])]), 4);
        let mut store = EmbeddingStore::new(4);
        let v = video_with(&[at_cos(0.5, 1)], &mut store);
        let shots = ShotCache::new(&v, &store);
        let c = candidate(&["guitar"], Some(0));
        let sim = match filter_nonvisual(&c, &v, &enc, &shots, 0.0).unwrap() {
            FilterOutcome::Accepted(r) => r.similarity,
            _ => unreachable!(),
        };
        assert!(matches!(
            filter_nonvisual(&c, &v, &enc, &shots, sim).unwrap(),
            FilterOutcome::Rejected { .. }
        ));
        let mut accepted_prev = true;
        for k in 0..20 {
            let theta = k as f64 * 0.05;
            let ok = matches!(
                filter_nonvisual(&c, &v, &enc, &shots, theta).unwrap(),
                FilterOutcome::Accepted(_)
            );
            assert!(
                accepted_prev || !ok,
                "raising the threshold re-accepted at {theta}"
            );
            accepted_prev = ok;
        }
    }

    #[test]
    fn missing_overlap_is_an_error() {
        let enc = planted_encoder(&start_zero(vec![("guitar", vec![1.0, 0.0, 0.0, 0.0])]), 4);
        let mut store = EmbeddingStore::new(4);
        let v = video_with(&[at_cos(0.5, 1)], &mut store);
        let shots = ShotCache::new(&v, &store);
        assert!(matches!(
            filter_nonvisual(&candidate(&["guitar"], None), &v, &enc, &shots, 0.3),
            Err(MiningError::NoOverlappingShot(_))
        ));
    }

    #[test]
    fn truncation_keeps_dog_waggy() {
        // Prefix embeddings are means of the word rows (start row is zero, P=I).
        let reference = Embedding::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let enc = planted_encoder(
            &start_zero(vec![
                ("dog", vec![1.0, 1.0, 0.0, 0.0]),
                ("waggy", vec![1.0, -1.0, 0.0, 0.0]),
                ("he", vec![-1.0, 0.0, 6.0, 0.0]),
                ("is", vec![0.0, 0.0, 0.0, 5.0]),
            ]),
            4,
        );
        let c = candidate(&["dog", "waggy", "he", "is"], Some(0));
        assert_eq!(
            truncate_name(&c, &reference, &enc, 0.3).unwrap(),
            ["dog", "waggy"]
        );
    }

    #[test]
    fn truncation_with_constructed_prefix_similarities() {
        // Word rows chosen so the four prefix means have cosines 0.5, 0.6, 0.2, 0.1
        // with e₀: each row is k·p_k − (k−1)·p_{k−1} for target prefix means p_k.
        let targets = [
            at_cos(0.5, 1),
            at_cos(0.6, 2),
            at_cos(0.2, 3),
            at_cos(0.1, 1),
        ];
        // Mean over (start + k words) = (k/(k+1))·mean of words; scaling does not move cosines.
        let mut rows = Vec::new();
        let names = ["q1", "q2", "q3", "q4"];
        let mut prev = vec![0.0; 4];
        for (k, t) in targets.iter().enumerate() {
            let kk = (k + 1) as f64;
            let row: Vec<f64> = (0..4).map(|i| kk * t[i] - (kk - 1.0) * prev[i]).collect();
            rows.push((names[k], row));
            prev = t.clone();
        }
        let enc = planted_encoder(&start_zero(rows), 4);
        let reference = Embedding::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        for (k, want) in [0.5, 0.6, 0.2, 0.1].iter().enumerate() {
            let e = enc.encode_text(&names[..=k].join(" ")).unwrap();
            assert!((e.cosine(&reference).unwrap() - want).abs() < 1e-6);
        }
        let c = candidate(&names, Some(0));
        assert_eq!(
            truncate_name(&c, &reference, &enc, 0.3).unwrap(),
            ["q1", "q2"]
        );
    }

    #[test]
    fn truncation_fails_when_nothing_is_visual() {
        let enc = planted_encoder(&start_zero(vec![("time", vec![0.0, 1.0, 0.0, 0.0])]), 4);
        let reference = Embedding::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            truncate_name(&candidate(&["time"], Some(0)), &reference, &enc, 0.3),
            Err(MiningError::NoVisualName)
        ));
    }

    #[test]
    fn expansion_keeps_planted_shots() {
        let mut store = EmbeddingStore::new(4);
        // Reference is shot 0 (e₀); shots 3, 5, 8 lie within acos(0.9) of it.
        let mut vecs = vec![vec![1.0, 0.0, 0.0, 0.0]];
        for i in 1..10 {
            let c = if [3, 5, 8].contains(&i) { 0.95 } else { 0.5 };
            vecs.push(at_cos(c, 1 + i % 3));
        }
        let v = video_with(&vecs, &mut store);
        let shots = ShotCache::<f64>::new(&v, &store);
        assert_eq!(
            expand_instance_shots(0, &v, &shots, 0.9).unwrap(),
            ["v/s0", "v/s3", "v/s5", "v/s8"]
        );
        assert_eq!(expand_instance_shots(0, &v, &shots, 1.0).unwrap(), ["v/s0"]);
        let loose = expand_instance_shots(0, &v, &shots, 0.4).unwrap();
        assert_eq!(loose.len(), 10);
    }
}
