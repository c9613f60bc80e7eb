//! Training objectives: the re-weighted multi-label loss with BCE or
//! self-paced correction (SPLC) terms, and the KL-based image-text
//! contrastive loss.
//!
//! Every loss returns its value together with the gradient with respect to
//! its differentiable inputs, so the same code serves both the graph and the
//! finite-difference checks.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::lexicon::ClassWeights;
use crate::tagger::{TagSource, TagVector};

/// Clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// SPLC threshold; negatives with `p > tau` become pseudo positives.
    pub tau: f64,
    /// First epoch (0-based) at which SPLC is active.
    pub changing_epoch: usize,
    pub temperature_init: f64,
    pub temperature_bounds: (f64, f64),
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            tau: 0.6,
            changing_epoch: 1,
            temperature_init: 0.07,
            temperature_bounds: (1e-3, 10.0),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid(format!("tau must be in (0,1), got {}", self.tau)));
        }
        let (lo, hi) = self.temperature_bounds;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("temperature bounds must satisfy 0 < lo <= hi"));
        }
        if !(self.temperature_init >= lo && self.temperature_init <= hi) {
            return Err(Error::invalid("temperature_init outside bounds"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchReduction {
    #[default]
    Mean,
    Sum,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_probs(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&x| sigmoid(x)).collect()
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `log(p)` where `y` is set and `log(1-p)` otherwise (no outer minus).
pub fn bce_terms(p: &[f64], y: &TagVector) -> Vec<f64> {
    assert_eq!(p.len(), y.len());
    p.iter()
        .zip(y.bits())
        .map(|(&p, &pos)| {
            let p = clamp_p(p);
            if pos {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplcOutput {
    /// Per-class `log(p)` or `log(1-p)`, before the outer minus.
    pub terms: Vec<f64>,
    /// Which classes used the positive form `log(p)`.
    pub positive_form: Vec<bool>,
    pub corrected: TagVector,
    /// True iff any pseudo positive was generated.
    pub pseudo: bool,
}

pub fn splc_correct(
    p: &[f64],
    y: &TagVector,
    tau: f64,
    epoch: usize,
    changing_epoch: usize,
) -> SplcOutput {
    assert_eq!(p.len(), y.len());
    let active = epoch >= changing_epoch;
    let positive_form: Vec<bool> = p
        .iter()
        .zip(y.bits())
        .map(|(&pi, &yi)| yi || (active && pi > tau))
        .collect();
    let terms = p
        .iter()
        .zip(&positive_form)
        .map(|(&pi, &pos)| {
            let pi = clamp_p(pi);
            if pos {
                pi.ln()
            } else {
                (1.0 - pi).ln()
            }
        })
        .collect();
    let pseudo = positive_form.iter().zip(y.bits()).any(|(&f, &yi)| f && !yi);
    let corrected = TagVector::from_bits(
        positive_form.clone(),
        if pseudo {
            TagSource::Corrected
        } else {
            y.source
        },
    );
    SplcOutput {
        terms,
        positive_form,
        corrected,
        pseudo,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlrLossReport {
    pub loss: f64,
    pub corrected_targets: Vec<TagVector>,
    pub pseudo_mask: Vec<bool>,
    pub pseudo_count: usize,
}

#[derive(Debug, Clone)]
pub struct MlrOutput {
    pub report: MlrLossReport,
    /// d loss / d logits, `batch x C`.
    pub grad: Mat,
}

/// `-Σ_i w_i (y_i L+ + (1-y_i) L-)`, reduced over the batch.
pub fn mlr_loss(
    logits: ArrayView2<f64>,
    targets: &[TagVector],
    weights: &ClassWeights,
    hyper: &Hyperparams,
    epoch: usize,
    reduction: BatchReduction,
) -> Result<MlrOutput> {
    let (batch, c) = logits.dim();
    if weights.len() != c {
        return Err(Error::Shape {
            context: "mlr_loss class weights",
            expected: c.to_string(),
            got: weights.len().to_string(),
        });
    }
    if targets.len() != batch {
        return Err(Error::Shape {
            context: "mlr_loss targets",
            expected: batch.to_string(),
            got: targets.len().to_string(),
        });
    }
    if let Some(t) = targets.iter().find(|t| t.len() != c) {
        return Err(Error::Shape {
            context: "mlr_loss target length",
            expected: c.to_string(),
            got: t.len().to_string(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mlr_loss logits"));
    }
    let scale = match reduction {
        BatchReduction::Mean => 1.0 / batch.max(1) as f64,
        BatchReduction::Sum => 1.0,
    };
    let w = weights.as_slice();
    let mut loss = 0.0;
    let mut grad = Mat::zeros((batch, c));
    let mut corrected_targets = Vec::with_capacity(batch);
    let mut pseudo_mask = Vec::with_capacity(batch);
    let mut pseudo_count = 0;
    for (b, y) in targets.iter().enumerate() {
        let p = sigmoid_probs(logits.row(b).as_slice().expect("contiguous logits row"));
        let out = splc_correct(&p, y, hyper.tau, epoch, hyper.changing_epoch);
        for i in 0..c {
            loss -= scale * w[i] * out.terms[i];
            let unclamped = p[i] > PROB_EPS && p[i] < 1.0 - PROB_EPS;
            if unclamped {
                // d/dx log σ(x) = 1 - p ; d/dx log(1 - σ(x)) = -p
                let dterm = if out.positive_form[i] {
                    1.0 - p[i]
                } else {
                    -p[i]
                };
                grad[[b, i]] = -scale * w[i] * dterm;
            }
        }
        pseudo_count += out.corrected.count() - y.count();
        pseudo_mask.push(out.pseudo);
        corrected_targets.push(out.corrected);
    }
    Ok(MlrOutput {
        report: MlrLossReport {
            loss,
            corrected_targets,
            pseudo_mask,
            pseudo_count,
        },
        grad,
    })
}

/// Temperature-scaled similarities between image rows and text rows, with
/// row-softmax probabilities and target row-distributions in both
/// directions. Images are `M` rows, texts `N` rows (`N = M` unless extra
/// text columns are in play).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub s_i2t: Mat,
    pub s_t2i: Mat,
    pub p_i2t: Mat,
    pub p_t2i: Mat,
    pub y_i2t: Mat,
    pub y_t2i: Mat,
    pub temperature: f64,
    log_p_i2t: Mat,
    log_p_t2i: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItcTargets {
    pub i2t: Mat,
    pub t2i: Mat,
}

impl ItcTargets {
    /// One-hot diagonal targets for `m` matched pairs.
    pub fn identity(m: usize) -> Self {
        Self {
            i2t: Array2::eye(m),
            t2i: Array2::eye(m),
        }
    }
}

fn check_unit_rows(z: ArrayView2<f64>, what: &'static str) -> Result<()> {
    for row in z.rows() {
        let n = row.dot(&row).sqrt();
        if !n.is_finite() {
            return Err(Error::NonFinite(what));
        }
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("{what} rows must be unit norm (got {n})")));
        }
    }
    Ok(())
}

fn check_distribution_rows(y: &Mat, what: &'static str) -> Result<()> {
    for row in y.rows() {
        if row.iter().any(|&v| v < 0.0) || (row.sum() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("{what} rows must be distributions")));
        }
    }
    Ok(())
}

fn log_softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn itc_similarities(
    z_img: ArrayView2<f64>,
    z_txt: ArrayView2<f64>,
    temperature: f64,
    targets: &ItcTargets,
) -> Result<SimilarityMatrix> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    if z_img.ncols() != z_txt.ncols() {
        return Err(Error::Shape {
            context: "itc embedding width",
            expected: z_img.ncols().to_string(),
            got: z_txt.ncols().to_string(),
        });
    }
    let (m, n) = (z_img.nrows(), z_txt.nrows());
    if targets.i2t.dim() != (m, n) || targets.t2i.dim() != (n, m) {
        return Err(Error::Shape {
            context: "itc targets",
            expected: format!("{m}x{n} and {n}x{m}"),
            got: format!("{:?} and {:?}", targets.i2t.dim(), targets.t2i.dim()),
        });
    }
    check_unit_rows(z_img, "image embeddings")?;
    check_unit_rows(z_txt, "text embeddings")?;
    check_distribution_rows(&targets.i2t, "i2t targets")?;
    check_distribution_rows(&targets.t2i, "t2i targets")?;

    let s_i2t = z_img.dot(&z_txt.t());
    let s_t2i = s_i2t.t().to_owned();
    let log_p_i2t = log_softmax_rows(&(&s_i2t / temperature));
    let log_p_t2i = log_softmax_rows(&(&s_t2i / temperature));
    Ok(SimilarityMatrix {
        p_i2t: log_p_i2t.mapv(f64::exp),
        p_t2i: log_p_t2i.mapv(f64::exp),
        s_i2t,
        s_t2i,
        y_i2t: targets.i2t.clone(),
        y_t2i: targets.t2i.clone(),
        temperature,
        log_p_i2t,
        log_p_t2i,
    })
}

fn kl_rows_mean(y: &Mat, log_p: &Mat) -> f64 {
    let mut total = 0.0;
    for (yr, lr) in y.rows().into_iter().zip(log_p.rows()) {
        for (&yv, &lp) in yr.iter().zip(lr.iter()) {
            if yv > 0.0 {
                total += yv * (yv.ln() - lp);
            }
        }
    }
    total / y.nrows().max(1) as f64
}

/// `½ [KL(y_i2t ‖ p_i2t) + KL(y_t2i ‖ p_t2i)]`, each averaged over rows.
pub fn itc_loss(sim: &SimilarityMatrix) -> f64 {
    0.5 * (kl_rows_mean(&sim.y_i2t, &sim.log_p_i2t) + kl_rows_mean(&sim.y_t2i, &sim.log_p_t2i))
}

#[derive(Debug, Clone)]
pub struct ItcGradients {
    pub z_img: Mat,
    pub z_txt: Mat,
    /// d loss / d temperature.
    pub temperature: f64,
}

/// Gradient of [`itc_loss`] with respect to both embedding matrices and the
/// temperature.
pub fn itc_loss_grad(sim: &SimilarityMatrix, z_img: ArrayView2<f64>, z_txt: ArrayView2<f64>) -> ItcGradients {
    let (m, n) = sim.s_i2t.dim();
    // d loss / d logits for each direction: (p - y) * rowsum(y) / rows / 2
    let mut g_i2t = Mat::zeros((m, n));
    for a in 0..m {
        let ysum = sim.y_i2t.row(a).sum();
        for b in 0..n {
            g_i2t[[a, b]] = 0.5 * (sim.p_i2t[[a, b]] * ysum - sim.y_i2t[[a, b]]) / m as f64;
        }
    }
    let mut g_t2i = Mat::zeros((n, m));
    for b in 0..n {
        let ysum = sim.y_t2i.row(b).sum();
        for a in 0..m {
            g_t2i[[b, a]] = 0.5 * (sim.p_t2i[[b, a]] * ysum - sim.y_t2i[[b, a]]) / n as f64;
        }
    }
    let g_logits = &g_i2t + &g_t2i.t();
    let g_s = &g_logits / sim.temperature;
    let g_temp = -(&g_logits * &sim.s_i2t).sum() / (sim.temperature * sim.temperature);
    ItcGradients {
        z_img: g_s.dot(&z_txt),
        z_txt: g_s.t().dot(&z_img),
        temperature: g_temp,
    }
}

/// Temperature stored as its logarithm and clamped after exponentiation.
pub fn temperature_from_log(log_t: f64, bounds: (f64, f64)) -> (f64, bool) {
    let t = log_t.exp();
    let clamped = t.clamp(bounds.0, bounds.1);
    (clamped, clamped != t)
}

pub fn total_loss(mlr: f64, itc: f64) -> f64 {
    mlr + itc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_abs_diff_eq!(sigmoid(50.0), 1.0, epsilon = 1e-9);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert_abs_diff_eq!(sigmoid(3f64.ln()), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn bce_values() {
        let one = TagVector::from_indices(1, [0]);
        let zero = TagVector::zeros(1);
        assert_abs_diff_eq!(bce_terms(&[1.0 - 1e-12], &one)[0], 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(-bce_terms(&[0.5], &zero)[0], std::f64::consts::LN_2, epsilon = 1e-12);
        assert_eq!(bce_terms(&[0.5], &one), bce_terms(&[0.5], &zero));
    }

    #[test]
    fn splc_gating_and_threshold() {
        let y = TagVector::zeros(2);
        let p = [0.7, 0.6];
        let before = splc_correct(&p, &y, 0.6, 0, 1);
        assert_eq!(before.terms, bce_terms(&p, &y));
        assert_eq!(before.corrected, y);
        assert!(!before.pseudo);

        let after = splc_correct(&p, &y, 0.6, 1, 1);
        assert_abs_diff_eq!(-after.terms[0], 0.356_674_943_938_732_4, epsilon = 1e-12);
        assert!(after.corrected.get(0));
        // p == tau stays negative
        assert_abs_diff_eq!(after.terms[1], 0.4f64.ln(), epsilon = 1e-12);
        assert!(!after.corrected.get(1));
        assert!(after.pseudo);
        assert_eq!(after.corrected.source, TagSource::Corrected);
    }

    #[test]
    fn mlr_uniform_bce_matches_mean_bce_times_c() {
        let logits = array![[0.3, -1.2, 2.0], [-0.4, 0.9, 0.1]];
        let targets = vec![
            TagVector::from_indices(3, [0, 2]),
            TagVector::from_indices(3, [1]),
        ];
        let h = Hyperparams {
            changing_epoch: 5,
            ..Default::default()
        };
        let out = mlr_loss(logits.view(), &targets, &ClassWeights::uniform(3), &h, 0, BatchReduction::Mean)
            .unwrap();
        // reference: elementwise BCE averaged over all B*C entries
        let mut bce = 0.0;
        for b in 0..2 {
            for i in 0..3 {
                let p = 1.0 / (1.0 + (-logits[[b, i]] as f64).exp());
                let y = if targets[b].get(i) { 1.0 } else { 0.0 };
                bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
        }
        bce /= 6.0;
        assert_abs_diff_eq!(out.report.loss, bce * 3.0, epsilon = 1e-12);
        assert_eq!(out.report.pseudo_count, 0);
    }

    #[test]
    fn mlr_weight_linearity() {
        let logits = array![[0.3, -1.2]];
        let targets = vec![TagVector::from_indices(2, [0])];
        let h = Hyperparams::default();
        let run = |w: Vec<f64>| {
            mlr_loss(logits.view(), &targets, &ClassWeights::from_vec(w).unwrap(), &h, 0, BatchReduction::Mean)
                .unwrap()
                .report
                .loss
        };
        let base = run(vec![1.0, 1.0]);
        let only0 = run(vec![1.0, 1e-300]);
        let doubled = run(vec![2.0, 1.0]);
        assert_abs_diff_eq!(doubled - base, only0, epsilon = 1e-12);
    }

    #[test]
    fn mlr_saturated_is_finite_and_near_zero() {
        let logits = array![[50.0, -50.0]];
        let targets = vec![TagVector::from_indices(2, [0])];
        let out = mlr_loss(
            logits.view(),
            &targets,
            &ClassWeights::uniform(2),
            &Hyperparams::default(),
            3,
            BatchReduction::Mean,
        )
        .unwrap();
        assert!(out.report.loss.is_finite() && out.report.loss < 1e-7);
        let wrong = array![[-50.0, 50.0]];
        let out = mlr_loss(
            wrong.view(),
            &targets,
            &ClassWeights::uniform(2),
            &Hyperparams::default(),
            0,
            BatchReduction::Mean,
        )
        .unwrap();
        assert!(out.report.loss.is_finite());
    }

    #[test]
    fn mlr_class_mismatch() {
        let logits = array![[0.0, 0.0]];
        let r = mlr_loss(
            logits.view(),
            &[TagVector::zeros(2)],
            &ClassWeights::uniform(3),
            &Hyperparams::default(),
            0,
            BatchReduction::Mean,
        );
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn single_pair_itc() {
        let z = array![[0.6, 0.8]];
        let sim = itc_similarities(z.view(), z.view(), 0.07, &ItcTargets::identity(1)).unwrap();
        assert_eq!(sim.p_i2t, array![[1.0]]);
        assert_eq!(itc_loss(&sim), 0.0);
    }

    #[test]
    fn orthonormal_small_temperature_gives_identity() {
        let z: Mat = Array2::eye(3);
        let sim = itc_similarities(z.view(), z.view(), 1e-3, &ItcTargets::identity(3)).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(sim.p_i2t[[a, b]], want, epsilon = 1e-12);
            }
        }
        assert_eq!(sim.s_t2i, sim.s_i2t.t());
    }

    #[test]
    fn bad_temperature() {
        let z: Mat = Array2::eye(2);
        assert!(itc_similarities(z.view(), z.view(), 0.0, &ItcTargets::identity(2)).is_err());
    }

    #[test]
    fn non_unit_rows_rejected() {
        let z = array![[2.0, 0.0]];
        assert!(itc_similarities(z.view(), z.view(), 0.1, &ItcTargets::identity(1)).is_err());
    }

    #[test]
    fn temperature_clamp() {
        let (t, c) = temperature_from_log(0.07f64.ln(), (1e-3, 10.0));
        assert_abs_diff_eq!(t, 0.07, epsilon = 1e-15);
        assert!(!c);
        let (t, c) = temperature_from_log(100.0, (1e-3, 10.0));
        assert_eq!(t, 10.0);
        assert!(c);
    }

    #[test]
    fn total() {
        assert_eq!(total_loss(0.0, 0.0), 0.0);
        assert_eq!(total_loss(1.5, 0.5), 2.0);
    }
}
