use super::{InstanceCandidate, TranscriptedVideo, MAX_NAME_WORDS};
use crate::encoders::normalize_word;

/// The ten possessive patterns that introduce a named instance.
pub const POSSESSIVE_PATTERNS: [&str; 10] = [
    "this is my",
    "this is our",
    "this is his",
    "this is her",
    "this is their",
    "these are my",
    "these are our",
    "these are his",
    "these are her",
    "these are their",
];

const POSSESSIVES: [&str; 5] = ["my", "our", "his", "her", "their"];

/// Finds every possessive mention in the transcript. Matching is
/// case-insensitive and ignores punctuation; each match yields one candidate
/// whose name is the (up to four) words that follow.
pub fn spot_instances(video: &TranscriptedVideo) -> Vec<InstanceCandidate> {
    // (normalized word, start time)
    let words: Vec<(String, f64)> = video
        .words
        .iter()
        .flat_map(|w| {
            w.w.split_whitespace()
                .filter_map(normalize_word)
                .map(move |n| (n, w.t0))
        })
        .collect();

    let mut out = Vec::new();
    for i in 0..words.len().saturating_sub(3) {
        let verb = match words[i].0.as_str() {
            "this" => "is",
            "these" => "are",
            _ => continue,
        };
        if words[i + 1].0 != verb || !POSSESSIVES.contains(&words[i + 2].0.as_str()) {
            continue;
        }
        let name_end = (i + 3 + MAX_NAME_WORDS).min(words.len());
        let name: Vec<String> = words[i + 3..name_end]
            .iter()
            .map(|(w, _)| w.clone())
            .collect();
        let mention_time = words[i + 3].1;
        out.push(InstanceCandidate {
            video_id: video.video_id.clone(),
            match_index: out.len(),
            pattern: format!("{} {} {}", words[i].0, words[i + 1].0, words[i + 2].0),
            name,
            mention_time,
            overlapping_shot: video.shot_at(mention_time),
        });
    }
    out
}
