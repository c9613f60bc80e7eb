//! Evaluation: multi-label metrics, zero-shot classification, compute
//! estimates, similarity histograms and online tag precision/recall.

mod analysis;
mod flops;
mod metrics;
mod zeroshot;

pub use analysis::{
    histogram_table, pair_similarities, similarity_histogram, tag_pr_counts, tag_pr_online, TagPrCounts,
    HISTOGRAM_BINS,
};
pub use flops::{encoder_macs, flop_estimate, group_macs, head_macs, FlopEstimate};
pub use metrics::{average_precision, multilabel_metrics, MultiLabelMetrics};
pub use zeroshot::{
    class_embeddings, classify, seen_mask, top_k_accuracy, zero_shot_classify, PromptSet, TextEmbedder,
    ZeroShotResult, PLACEHOLDER,
};

use crate::graph::Mat;

/// In-batch retrieval: fraction of image rows whose most similar text row
/// is the matching one, and likewise for text rows. Rows are unit vectors.
pub fn retrieval_top1(z_img: &Mat, z_txt: &Mat) -> (f64, f64) {
    let s = z_img.dot(&z_txt.t());
    let argmax = |row: ndarray::ArrayView1<f64>| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
            .0
    };
    let n = s.nrows().min(s.ncols());
    if n == 0 {
        return (0.0, 0.0);
    }
    let i2t = (0..n).filter(|&i| argmax(s.row(i)) == i).count() as f64 / n as f64;
    let t2i = (0..n).filter(|&j| argmax(s.column(j)) == j).count() as f64 / n as f64;
    (i2t, t2i)
}
