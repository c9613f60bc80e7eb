use std::fmt;

use crate::error::{Error, Result};
use crate::graph::Mat;

/// Multi-label metric suite. Values are fractions in `[0, 1]`; `Display`
/// prints percentages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiLabelMetrics {
    pub map: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
}

impl fmt::Display for MultiLabelMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mAP\tCP\tCR\tCF1\tOP\tOR\tOF1")?;
        let v = [self.map, self.cp, self.cr, self.cf1, self.op, self.or, self.of1];
        let cells: Vec<String> = v.iter().map(|x| format!("{:.2}", x * 100.0)).collect();
        write!(f, "{}", cells.join("\t"))
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// All-point average precision: precision averaged over the rank of every
/// positive. Ties keep input order. `None` when the column has no positive.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// `probs` and `truth` are `N x C`. A label is predicted when
/// `prob > threshold`. Classes without positives are left out of mAP, CP and
/// CR; the overall scores count every class. Precision with no predictions
/// is 0.
pub fn multilabel_metrics(probs: &Mat, truth: &Mat, threshold: f64) -> Result<MultiLabelMetrics> {
    if probs.dim() != truth.dim() {
        return Err(Error::Shape {
            context: "multilabel_metrics",
            expected: format!("{:?}", probs.dim()),
            got: format!("{:?}", truth.dim()),
        });
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("threshold must be in (0,1)"));
    }
    let (_, c) = probs.dim();
    let (mut aps, mut precs, mut recs) = (Vec::new(), Vec::new(), Vec::new());
    let (mut tp_all, mut pred_all, mut pos_all) = (0usize, 0usize, 0usize);
    for j in 0..c {
        let scores: Vec<f64> = probs.column(j).to_vec();
        let gt: Vec<bool> = truth.column(j).iter().map(|&v| v > 0.5).collect();
        let pred: Vec<bool> = scores.iter().map(|&p| p > threshold).collect();
        let tp = pred.iter().zip(&gt).filter(|(p, g)| **p && **g).count();
        let n_pred = pred.iter().filter(|&&p| p).count();
        let n_pos = gt.iter().filter(|&&g| g).count();
        tp_all += tp;
        pred_all += n_pred;
        pos_all += n_pos;
        if let Some(ap) = average_precision(&scores, &gt) {
            aps.push(ap);
            precs.push(if n_pred > 0 { tp as f64 / n_pred as f64 } else { 0.0 });
            recs.push(tp as f64 / n_pos as f64);
        }
    }
    if aps.is_empty() {
        return Err(Error::MetricsUndefined);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (cp, cr) = (mean(&precs), mean(&recs));
    let op = if pred_all > 0 { tp_all as f64 / pred_all as f64 } else { 0.0 };
    let or = tp_all as f64 / pos_all as f64;
    Ok(MultiLabelMetrics {
        map: mean(&aps),
        cp,
        cr,
        cf1: f1(cp, cr),
        op,
        or,
        of1: f1(op, or),
    })
}
