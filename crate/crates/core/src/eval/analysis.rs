use crate::error::{Error, Result};
use crate::model::{Image, Model};
use crate::tagger::TagVector;

pub const HISTOGRAM_BINS: usize = 50;

/// Fixed-width histogram over `[-1, 1]`; returns `(bin_left, count)`.
/// Values are clamped into range and `1.0` falls in the last bin.
pub fn similarity_histogram(values: &[f64], bins: usize) -> Vec<(f64, usize)> {
    let width = 2.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = (((v.clamp(-1.0, 1.0) + 1.0) / width).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (-1.0 + i as f64 * width, c))
        .collect()
}

pub fn histogram_table(hist: &[(f64, usize)]) -> String {
    hist.iter().map(|(l, c)| format!("{l:.2}\t{c}\n")).collect()
}

/// Cosine similarity of each image with its own caption (`shift = 0`) or
/// with the caption `shift` places later (mismatched pairs).
pub fn pair_similarities(model: &Model, images: &[&Image], texts: &[String], shift: usize) -> Result<Vec<f64>> {
    if images.len() != texts.len() {
        return Err(Error::invalid("images and texts differ in length"));
    }
    let zi = model.embed_images(images)?;
    let zt = model.embed_texts(texts)?;
    let n = texts.len();
    Ok((0..n).map(|i| zi.row(i).dot(&zt.row((i + shift) % n))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TagPrCounts {
    /// New bits that are in the full ground truth.
    pub correct: usize,
    /// New bits that are not.
    pub wrong: usize,
    /// Ground-truth bits absent from the extracted targets.
    pub missing: usize,
}

impl TagPrCounts {
    pub fn added(&self) -> usize {
        self.correct + self.wrong
    }

    pub fn precision(&self) -> Option<f64> {
        (self.added() > 0).then(|| self.correct as f64 / self.added() as f64)
    }

    /// 0 when nothing was missing.
    pub fn recall(&self) -> f64 {
        if self.missing == 0 {
            0.0
        } else {
            self.correct as f64 / self.missing as f64
        }
    }
}

impl std::ops::AddAssign for TagPrCounts {
    fn add_assign(&mut self, o: Self) {
        self.correct += o.correct;
        self.wrong += o.wrong;
        self.missing += o.missing;
    }
}

pub fn tag_pr_counts(corrected: &[TagVector], extracted: &[TagVector], full: &[TagVector]) -> TagPrCounts {
    assert!(corrected.len() == extracted.len() && extracted.len() == full.len());
    let mut c = TagPrCounts::default();
    for ((cor, ext), gt) in corrected.iter().zip(extracted).zip(full) {
        for i in 0..gt.len() {
            let new = cor.get(i) && !ext.get(i);
            if new && gt.get(i) {
                c.correct += 1;
            } else if new {
                c.wrong += 1;
            }
            if gt.get(i) && !ext.get(i) {
                c.missing += 1;
            }
        }
    }
    c
}

/// Precision and recall of the bits added by correction. Precision is
/// `None` when nothing was added.
pub fn tag_pr_online(corrected: &[TagVector], extracted: &[TagVector], full: &[TagVector]) -> (Option<f64>, f64) {
    let c = tag_pr_counts(corrected, extracted, full);
    (c.precision(), c.recall())
}
