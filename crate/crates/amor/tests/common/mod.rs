//! Shared label-soundness oracles: independent scans over raw token
//! streams that recover what each retrieval position's target must be.

use amor::tasks::{SequenceSample, TaskConfig};

/// Scan a Simple Retrieval sequence: every needs_retrieval position must
/// sit on a RECALL token whose target equals the most recent marked value,
/// recoverable from at least `min_distance` tokens earlier.
pub fn check_simple_labels(cfg: &TaskConfig, sample: &SequenceSample, min_distance: usize) {
    let mut last_mark: Option<(usize, usize)> = None;
    for (i, &tok) in sample.tokens.iter().enumerate() {
        if tok == cfg.tok_mark() && i + 1 < sample.tokens.len() {
            last_mark = Some((i + 1, sample.tokens[i + 1]));
        }
        if sample.needs_retrieval[i] {
            assert_eq!(tok, cfg.tok_recall(), "label must sit on the recall token");
            let (value_pos, value) = last_mark.expect("recall without a preceding mark");
            assert_eq!(
                sample.targets[i], value,
                "target must equal the most recent marked value"
            );
            assert!(
                i - value_pos >= min_distance,
                "retrieval distance {} below {min_distance}",
                i - value_pos
            );
        }
    }
}

/// Replay STORE events of a NeedleHaystack sequence and check every query.
pub fn check_needle_labels(cfg: &TaskConfig, sample: &SequenceSample) {
    let toks = &sample.tokens;
    let mut map = std::collections::HashMap::new();
    let mut i = 0;
    while i < toks.len() {
        if toks[i] == cfg.tok_mark() {
            map.insert(toks[i + 1], toks[i + 2]);
            i += 3;
        } else {
            i += 1;
        }
    }
    for (i, &tok) in toks.iter().enumerate() {
        if tok == cfg.tok_recall() {
            let key = toks[i + 1];
            match map.get(&key) {
                Some(&v) => {
                    assert!(sample.needs_retrieval[i + 1], "possible query unlabelled");
                    assert_eq!(sample.targets[i + 1], v, "stored value mismatch");
                }
                None => {
                    assert!(sample.impossible[i + 1], "impossible query unlabelled");
                    assert_eq!(sample.targets[i + 1], cfg.tok_placeholder());
                }
            }
        }
    }
}
