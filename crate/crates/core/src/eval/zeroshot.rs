use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::lexicon::TagLexicon;
use crate::model::Model;

pub const PLACEHOLDER: &str = "{label}";
const DEFAULT_TEMPLATES: &str = include_str!("../../data/prompt_templates.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: Vec<String>,
}

impl PromptSet {
    pub fn new<S: Into<String>>(templates: impl IntoIterator<Item = S>) -> Result<Self> {
        let templates: Vec<String> = templates.into_iter().map(Into::into).collect();
        if templates.is_empty() {
            return Err(Error::invalid("prompt set is empty"));
        }
        if let Some(t) = templates.iter().find(|t| t.matches(PLACEHOLDER).count() != 1) {
            return Err(Error::invalid(format!(
                "template {t:?} must contain {PLACEHOLDER} exactly once"
            )));
        }
        Ok(Self { templates })
    }

    /// Lines of a template file; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    /// The bundled 80-template ensemble.
    pub fn ensemble() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }

    /// `"a photo of a {label}"` only.
    pub fn single() -> Self {
        Self::new(["a photo of a {label}"]).expect("valid template")
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn fill(&self, label: &str) -> Vec<String> {
        self.templates.iter().map(|t| t.replace(PLACEHOLDER, label)).collect()
    }
}

/// Anything that maps texts to unit embedding rows.
pub trait TextEmbedder {
    fn embed_texts(&self, texts: &[String]) -> Result<Mat>;
}

impl TextEmbedder for Model {
    fn embed_texts(&self, texts: &[String]) -> Result<Mat> {
        Model::embed_texts(self, texts)
    }
}

/// One unit row per class: the renormalized mean of the unit embeddings of
/// every filled template. Templates are summed in sorted order so the
/// result does not depend on their listing order.
pub fn class_embeddings<E: TextEmbedder + ?Sized>(
    embedder: &E,
    class_names: &[String],
    prompts: &PromptSet,
) -> Result<Mat> {
    if class_names.is_empty() {
        return Err(Error::invalid("no class names"));
    }
    let mut sorted = prompts.clone();
    sorted.templates.sort();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(class_names.len());
    for name in class_names {
        let e = embedder.embed_texts(&sorted.fill(name))?;
        let mut mean = e.sum_axis(ndarray::Axis(0));
        let n = mean.dot(&mean).sqrt();
        if n <= 0.0 || !n.is_finite() {
            return Err(Error::DegenerateEmbedding);
        }
        mean /= n;
        rows.push(mean.to_vec());
    }
    let d = rows[0].len();
    Ok(Mat::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotResult {
    pub top1: f64,
    pub top5: f64,
    /// Top-1 accuracy per class; `None` for classes without images.
    pub per_class: Vec<Option<f64>>,
    pub seen_mask: Vec<bool>,
    pub predictions: Vec<usize>,
}

impl ZeroShotResult {
    /// Mean of per-class accuracies over the classes selected by `seen`.
    pub fn split_accuracy(&self, seen: bool) -> Option<f64> {
        let v: Vec<f64> = self
            .per_class
            .iter()
            .zip(&self.seen_mask)
            .filter(|(_, &s)| s == seen)
            .filter_map(|(a, _)| *a)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Classes whose normalized name is a lexicon entry.
pub fn seen_mask(class_names: &[String], lexicon: &TagLexicon) -> Vec<bool> {
    class_names.iter().map(|n| lexicon.contains(n)).collect()
}

/// Fraction of rows whose true label is among the `k` highest scores.
/// Ties are broken by class index.
pub fn top_k_accuracy(scores: &Mat, labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = scores.row(i);
            let better = row.iter().enumerate().filter(|&(j, &s)| s > row[y] || (s == row[y] && j < y)).count();
            better < k
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Classify unit image rows against precomputed unit class rows.
pub fn classify(
    image_embeddings: &Mat,
    class_emb: &Mat,
    labels: &[usize],
    seen_mask: Vec<bool>,
) -> Result<ZeroShotResult> {
    let c = class_emb.nrows();
    if image_embeddings.nrows() != labels.len() || image_embeddings.ncols() != class_emb.ncols() {
        return Err(Error::Shape {
            context: "zero_shot_classify",
            expected: format!("{} x {}", labels.len(), class_emb.ncols()),
            got: format!("{:?}", image_embeddings.dim()),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
    }
    let scores = image_embeddings.dot(&class_emb.t());
    let predictions: Vec<usize> = scores
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &s)| if s > best.1 { (j, s) } else { best })
                .0
        })
        .collect();
    let mut correct = vec![0usize; c];
    let mut total = vec![0usize; c];
    for (&y, &p) in labels.iter().zip(&predictions) {
        total[y] += 1;
        correct[y] += usize::from(p == y);
    }
    Ok(ZeroShotResult {
        top1: top_k_accuracy(&scores, labels, 1),
        top5: top_k_accuracy(&scores, labels, 5),
        per_class: correct
            .iter()
            .zip(&total)
            .map(|(&a, &n)| (n > 0).then(|| a as f64 / n as f64))
            .collect(),
        seen_mask,
        predictions,
    })
}

/// Prompt-ensembled zero-shot classification.
pub fn zero_shot_classify<E: TextEmbedder + ?Sized>(
    image_embeddings: &Mat,
    labels: &[usize],
    class_names: &[String],
    prompts: &PromptSet,
    embedder: &E,
    lexicon: &TagLexicon,
) -> Result<ZeroShotResult> {
    let class_emb = class_embeddings(embedder, class_names, prompts)?;
    classify(image_embeddings, &class_emb, labels, seen_mask(class_names, lexicon))
}
