//! Turning recognized tags back into text supervision.

use std::collections::BTreeSet;

use crate::graph::Mat;
use crate::lexicon::TagLexicon;
use crate::losses::ItcTargets;
use crate::tagger::{tokenize, TagVector};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagTextPair {
    pub original_text: String,
    pub tag2text: String,
    pub combined: String,
}

/// Space-joined tag names for the pseudo positives in `corrected` (plus the
/// original tags when `retain_original`), in lexicon order. Empty when no
/// pseudo positive was added.
pub fn compose_tag2text(
    original: &TagVector,
    corrected: &TagVector,
    lexicon: &TagLexicon,
    retain_original: bool,
    removed_top: &BTreeSet<String>,
) -> String {
    debug_assert!(corrected.is_superset_of(original));
    if corrected == original || corrected.bits() == original.bits() {
        return String::new();
    }
    corrected
        .indices()
        .filter(|&i| retain_original || !original.get(i))
        .map(|i| lexicon.name(i))
        .filter(|name| !removed_top.contains(*name))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn concat_text(original: &str, tag2text: &str) -> TagTextPair {
    let combined = if tag2text.is_empty() {
        original.to_string()
    } else {
        format!("{original} {tag2text}")
    };
    TagTextPair {
        original_text: original.to_string(),
        tag2text: tag2text.to_string(),
        combined,
    }
}

impl TagTextPair {
    /// Word tokens of the combined text, at most `max_len`. Tag tokens are
    /// dropped first; the caption is cut only if it alone exceeds `max_len`.
    pub fn tokens(&self, max_len: usize) -> Vec<String> {
        let mut toks = tokenize(&self.original_text);
        toks.truncate(max_len);
        let room = max_len - toks.len();
        toks.extend(tokenize(&self.tag2text).into_iter().take(room));
        toks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetMode {
    /// One combined text per image; one-hot diagonal targets.
    #[default]
    Combined,
    /// Each non-empty Tag2Text string is an extra text column that counts as
    /// a second positive for its source image.
    ExtraColumns,
}

/// Targets for a batch of `m` images. In `ExtraColumns` mode the text axis
/// is `m + k`, where `k` is the number of set entries in `pseudo_mask`, and
/// the extra columns follow the mask order.
pub fn build_itc_targets(m: usize, pseudo_mask: &[bool], mode: TargetMode) -> ItcTargets {
    assert_eq!(pseudo_mask.len(), m, "pseudo mask length");
    match mode {
        TargetMode::Combined => ItcTargets::identity(m),
        TargetMode::ExtraColumns => {
            let extra: Vec<usize> = (0..m).filter(|&i| pseudo_mask[i]).collect();
            let n = m + extra.len();
            let mut i2t = Mat::zeros((m, n));
            let mut t2i = Mat::zeros((n, m));
            for a in 0..m {
                i2t[[a, a]] = 1.0;
                t2i[[a, a]] = 1.0;
            }
            for (j, &a) in extra.iter().enumerate() {
                i2t[[a, a]] = 0.5;
                i2t[[a, m + j]] = 0.5;
                t2i[[m + j, a]] = 1.0;
            }
            ItcTargets { i2t, t2i }
        }
    }
}
