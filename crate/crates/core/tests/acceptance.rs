//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::Axis;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tagvlp::checkpoint::Checkpoint;
use tagvlp::config::TrainConfig;
use tagvlp::data::{synth_fixture, synth_with_lexicon, ImageTextRecord, SynthOptions, DEFAULT_CONCEPTS};
use tagvlp::eval::{flop_estimate, multilabel_metrics, TagPrCounts};
use tagvlp::graph::Mat;
use tagvlp::lexicon::{ClassWeights, TagLexicon};
use tagvlp::losses::{
    itc_loss, itc_loss_grad, itc_similarities, mlr_loss, splc_correct, BatchReduction, Hyperparams, ItcTargets,
};
use tagvlp::model::{EncoderConfig, Model, RecognitionHeadConfig};
use tagvlp::tagger::{TagSource, TagVector, Tagger};
use tagvlp::trainer::{StepRecord, Trainer};

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

const TOY: &str = "image_size=32\npatch_size=8\nwidth=64\ndepth=2\nheads=4\nmlp_ratio=2\ntext_max_len=16\n\
proj_dim=32\ngroup_factor=4\ndecoder_dim=64\ndecoder_heads=4\nffn_dim=128\naugment=identity\nbatch_size=32\n\
warmup_steps=20\nmax_lr=1e-3\nseed=0\n";

fn synth_opts() -> SynthOptions {
    SynthOptions {
        image_size: 32,
        cell_size: 8,
        ..Default::default()
    }
}

fn toy_config(extra: &str) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.apply_text(TOY, "toy").unwrap();
    c.apply_text(extra, "extra").unwrap();
    c
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normal_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((r, c), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn normalize_rows(u: &Mat) -> Mat {
    let mut z = u.clone();
    for mut row in z.rows_mut() {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / n);
    }
    z
}

/// Gradient through row normalization: `(I - z z^T) g / |u|` per row.
fn through_normalize(u: &Mat, g: &Mat) -> Mat {
    let z = normalize_rows(u);
    let mut out = g.clone();
    for ((mut o, zr), ur) in out.rows_mut().into_iter().zip(z.rows()).zip(u.rows()) {
        let n = ur.dot(&ur).sqrt();
        let proj = o.dot(&zr);
        for (ov, zv) in o.iter_mut().zip(zr.iter()) {
            *ov = (*ov - proj * zv) / n;
        }
    }
    out
}

fn random_distribution_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    let mut y = Mat::from_shape_fn((r, c), |_| if rng.random_bool(0.5) { rng.random::<f64>() } else { 0.0 });
    for (i, mut row) in y.rows_mut().into_iter().enumerate() {
        row[i % c] += 0.5;
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    y
}

fn criterion_1() -> Outcome {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for seed in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(2..=8);
        let m = rng.random_range(2..=6);

        // Recognition loss, BCE mode (epoch 0) and SPLC mode (epoch 1).
        let hyper = Hyperparams::default();
        let logits = loop {
            let x = normal_mat(&mut rng, m, c, 2.0);
            if x.iter().all(|&v| (sigmoid(v) - hyper.tau).abs() > 1e-3) {
                break x;
            }
        };
        let targets: Vec<TagVector> = (0..m)
            .map(|_| TagVector::from_bits((0..c).map(|_| rng.random_bool(0.3)).collect(), TagSource::Extracted))
            .collect();
        let weights = ClassWeights::from_vec((0..c).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap();
        for epoch in [0, 1] {
            let f = |x: &Mat| {
                mlr_loss(x.view(), &targets, &weights, &hyper, epoch, BatchReduction::Mean)
                    .unwrap()
                    .report
                    .loss
            };
            let analytic = mlr_loss(logits.view(), &targets, &weights, &hyper, epoch, BatchReduction::Mean)
                .unwrap()
                .grad;
            let mut numeric = Mat::zeros((m, c));
            for idx in ndarray::indices((m, c)) {
                let (mut xp, mut xm) = (logits.clone(), logits.clone());
                xp[idx] += h;
                xm[idx] -= h;
                numeric[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
            }
            worst = worst.max(rel_err(analytic.as_slice().unwrap(), numeric.as_slice().unwrap()));
            instances += 1;
        }

        // Contrastive loss over unnormalized embeddings, soft targets and
        // one extra text column, plus the temperature.
        let d = rng.random_range(3..=8);
        let n = m + 1;
        let u_img = normal_mat(&mut rng, m, d, 1.0);
        let u_txt = normal_mat(&mut rng, n, d, 1.0);
        let targets = ItcTargets {
            i2t: random_distribution_rows(&mut rng, m, n),
            t2i: random_distribution_rows(&mut rng, n, m),
        };
        let t = rng.random_range(0.05..0.5);
        let loss = |ui: &Mat, ut: &Mat, t: f64| {
            let sim = itc_similarities(normalize_rows(ui).view(), normalize_rows(ut).view(), t, &targets).unwrap();
            itc_loss(&sim)
        };
        let (zi, zt) = (normalize_rows(&u_img), normalize_rows(&u_txt));
        let sim = itc_similarities(zi.view(), zt.view(), t, &targets).unwrap();
        let g = itc_loss_grad(&sim, zi.view(), zt.view());
        let mut analytic: Vec<f64> = through_normalize(&u_img, &g.z_img).iter().copied().collect();
        analytic.extend(through_normalize(&u_txt, &g.z_txt).iter());
        analytic.push(g.temperature);
        let mut numeric = Vec::new();
        for which in 0..2 {
            let base = if which == 0 { &u_img } else { &u_txt };
            for idx in ndarray::indices(base.dim()) {
                let (mut p, mut q) = (base.clone(), base.clone());
                p[idx] += h;
                q[idx] -= h;
                let (lp, lm) = if which == 0 {
                    (loss(&p, &u_txt, t), loss(&q, &u_txt, t))
                } else {
                    (loss(&u_img, &p, t), loss(&u_img, &q, t))
                };
                numeric.push((lp - lm) / (2.0 * h));
            }
        }
        numeric.push((loss(&u_img, &u_txt, t + h) - loss(&u_img, &u_txt, t - h)) / (2.0 * h));
        worst = worst.max(rel_err(&analytic, &numeric));
        instances += 1;
    }
    (
        worst <= 1e-4,
        format!("{instances} instances over 12 seeds, worst relative error {worst:.2e} (limit 1e-4)"),
    )
}

fn criterion_2() -> Outcome {
    let grid: Vec<f64> = (1..=19).map(|i| i as f64 / 20.0).collect();
    let mut checked = 0;
    let mut mismatches = 0;
    for &tau in &[0.3, 0.6, 0.9] {
        for &p in &grid {
            for y in [false, true] {
                for (epoch, active) in [(0, false), (1, true), (5, true)] {
                    let out = splc_correct(&[p], &TagVector::from_bits(vec![y], TagSource::Extracted), tau, epoch, 1);
                    let pseudo = active && !y && p > tau;
                    let want_target = y || pseudo;
                    let want_term = if want_target { p.ln() } else { (1.0 - p).ln() };
                    if out.corrected.get(0) != want_target
                        || out.positive_form[0] != want_target
                        || out.terms[0] != want_term
                        || out.pseudo != pseudo
                    {
                        mismatches += 1;
                    }
                    checked += 1;
                }
            }
        }
    }
    (mismatches == 0, format!("{checked} grid points, {mismatches} mismatches"))
}

const SINGLES: [&str; 30] = [
    "dog", "cat", "tree", "car", "boat", "kite", "bird", "cup", "plate", "window", "chair", "table", "horse", "zebra",
    "giraffe", "bear", "truck", "phone", "light", "balloon", "cake", "sign", "bottle", "clock", "apple", "pizza",
    "book", "mouse", "knife", "child",
];
const COMPOUNDS: [&str; 9] = [
    "hot dog",
    "teddy bear",
    "fire truck",
    "cell phone",
    "traffic light",
    "stop sign",
    "hot air balloon",
    "ice cream",
    "tennis racket",
];
const IRREGULAR: [(&str, &str); 3] = [("mouse", "mice"), ("knife", "knives"), ("child", "children")];
const DISTRACTORS: [&str; 16] = [
    "a", "the", "on", "near", "with", "red", "big", "running", "hot", "sweet", "under", "and", "fire", "air", "ice",
    "traffic",
];

fn plural(word: &str) -> String {
    IRREGULAR
        .iter()
        .find(|(s, _)| *s == word)
        .map(|(_, p)| p.to_string())
        .unwrap_or_else(|| format!("{word}s"))
}

/// Caption text plus the lemma of each emitted word.
fn synth_caption(rng: &mut ChaCha8Rng) -> (String, Vec<String>) {
    let mut words = Vec::new();
    let mut lemmas = Vec::new();
    for _ in 0..rng.random_range(0..=10) {
        let kind = rng.random_range(0..10);
        let phrase: Vec<&str> = if kind < 4 {
            vec![*SINGLES.choose(rng).unwrap()]
        } else if kind < 6 {
            COMPOUNDS.choose(rng).unwrap().split(' ').collect()
        } else {
            vec![*DISTRACTORS.choose(rng).unwrap()]
        };
        let is_noun = kind < 6;
        let pluralize = is_noun && rng.random_bool(0.4);
        for (i, w) in phrase.iter().enumerate() {
            let last = i + 1 == phrase.len();
            let surface = if pluralize && last { plural(w) } else { w.to_string() };
            let surface = if rng.random_bool(0.1) {
                let mut cs = surface.chars();
                let first = cs.next().unwrap().to_uppercase().to_string();
                first + cs.as_str()
            } else {
                surface
            };
            words.push(surface);
            lemmas.push(w.to_string());
        }
        if rng.random_bool(0.15) {
            let last = words.last_mut().unwrap();
            last.push(*[',', '.', ';'].choose(rng).unwrap());
        }
    }
    (words.join(" "), lemmas)
}

/// Scan every n-gram of the lemma sequence against every entry. Single-word
/// hits inside a compound hit are dropped.
fn tagger_oracle(lemmas: &[String], names: &[&str]) -> BTreeSet<String> {
    let entries: Vec<Vec<&str>> = names.iter().map(|n| n.split(' ').collect()).collect();
    let mut compound_cover = vec![false; lemmas.len()];
    let mut found = BTreeSet::new();
    for start in 0..lemmas.len() {
        for len in 2..=lemmas.len() - start {
            let gram: Vec<&str> = lemmas[start..start + len].iter().map(String::as_str).collect();
            for e in &entries {
                if *e == gram {
                    found.insert(e.join(" "));
                    compound_cover[start..start + len].iter_mut().for_each(|c| *c = true);
                }
            }
        }
    }
    for (pos, l) in lemmas.iter().enumerate() {
        for e in &entries {
            if e.len() == 1 && e[0] == l && !compound_cover[pos] {
                found.insert(l.clone());
            }
        }
    }
    found
}

fn criterion_3() -> Outcome {
    let names: Vec<&str> = SINGLES.iter().chain(COMPOUNDS.iter()).copied().collect();
    let lexicon = TagLexicon::from_counts(names.iter().map(|n| (*n, 1u64)), vec![], names.len()).unwrap();
    let tagger = Tagger::new(&lexicon);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut captions: Vec<(String, Vec<String>)> = (0..198).map(|_| synth_caption(&mut rng)).collect();
    captions.push((
        "a hot dog on a plate".into(),
        ["a", "hot", "dog", "on", "a", "plate"].map(String::from).to_vec(),
    ));
    captions.push((
        "A dog eats two hot dogs.".into(),
        ["a", "dog", "eat", "two", "hot", "dog"].map(String::from).to_vec(),
    ));
    let mut agree = 0;
    let mut first_bad = None;
    for (text, lemmas) in &captions {
        let got: BTreeSet<String> = tagger.extract(text).indices().map(|i| lexicon.name(i).to_string()).collect();
        let want = tagger_oracle(lemmas, &names);
        if got == want {
            agree += 1;
        } else if first_bad.is_none() {
            first_bad = Some(format!("{text:?}: got {got:?}, oracle {want:?}"));
        }
    }
    let hot_dog: BTreeSet<String> = tagger
        .extract("a hot dog on a plate")
        .indices()
        .map(|i| lexicon.name(i).to_string())
        .collect();
    let suppression = hot_dog == BTreeSet::from(["hot dog".to_string(), "plate".to_string()]);
    let mut detail = format!(
        "{agree}/{} captions match the n-gram oracle, hot dog suppression {}",
        captions.len(),
        if suppression { "ok" } else { "broken" }
    );
    if let Some(b) = first_bad {
        detail.push_str(&format!("; first mismatch {b}"));
    }
    (agree == captions.len() && suppression, detail)
}

fn criterion_4() -> Outcome {
    let probs = ndarray::array![
        [0.9, 0.3, 0.55, 0.2],
        [0.4, 0.7, 0.6, 0.1],
        [0.6, 0.8, 0.3, 0.7],
        [0.2, 0.1, 0.7, 0.3],
        [0.1, 0.2, 0.45, 0.4],
    ];
    let truth = ndarray::array![
        [1.0, 0.0, 1.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ];
    // Class 3 has no positive and is left out of mAP, CP and CR.
    // AP: c0 (1 + 2/3)/2, c1 1, c2 (1 + 2/3 + 3/4)/3.
    // Predictions at p > 0.5: c0 tp 1 of 2, c1 tp 1 of 2, c2 tp 2 of 3, c3 tp 0 of 1.
    let map = (5.0 / 6.0 + 1.0 + 29.0 / 36.0) / 3.0;
    let cp = (0.5 + 0.5 + 2.0 / 3.0) / 3.0;
    let cr = (0.5 + 1.0 + 2.0 / 3.0) / 3.0;
    let cf1 = 2.0 * cp * cr / (cp + cr);
    let op = 4.0 / 8.0;
    let or = 4.0 / 6.0;
    let of1 = 2.0 * op * or / (op + or);
    let m = multilabel_metrics(&probs, &truth, 0.5).unwrap();
    let got = [m.map, m.cp, m.cr, m.cf1, m.op, m.or, m.of1];
    let want = [map, cp, cr, cf1, op, or, of1];
    let hand_err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut invariant = 0;
    let transforms: [fn(f64) -> f64; 4] = [|x| x.powi(3), |x| 2.0 * x + 1.0, f64::exp, |x| x.ln() - 4.0];
    for inst in 0..20 {
        let (n, c) = (rng.random_range(4..12), rng.random_range(2..6));
        let scores = Mat::from_shape_fn((n, c), |_| rng.random_range(0.01..0.99));
        let mut truth = Mat::from_shape_fn((n, c), |_| f64::from(rng.random_bool(0.4)));
        for j in 0..c {
            truth[[j % n, j]] = 1.0;
        }
        let base = multilabel_metrics(&scores, &truth, 0.5).unwrap().map;
        let t = transforms[inst % transforms.len()];
        let moved = multilabel_metrics(&scores.mapv(t), &truth, 0.5).unwrap().map;
        if moved == base {
            invariant += 1;
        }
    }
    (
        hand_err <= 1e-6 && invariant == 20,
        format!("hand 5x4 case max error {hand_err:.1e} (limit 1e-6), mAP unchanged on {invariant}/20 transformed instances"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut zero_err: f64 = 0.0;
    let mut nce_err: f64 = 0.0;
    let mut argmax_ok = 0;
    for _ in 0..50 {
        let (m, d) = (rng.random_range(2..8), rng.random_range(2..10));
        let zi = normalize_rows(&normal_mat(&mut rng, m, d, 1.0));
        let zt = normalize_rows(&normal_mat(&mut rng, m, d, 1.0));
        let t = rng.random_range(0.02..1.0);

        let first = itc_similarities(zi.view(), zt.view(), t, &ItcTargets::identity(m)).unwrap();
        let matched = ItcTargets {
            i2t: first.p_i2t.clone(),
            t2i: first.p_t2i.clone(),
        };
        let same = itc_similarities(zi.view(), zt.view(), t, &matched).unwrap();
        zero_err = zero_err.max(itc_loss(&same).abs());

        let s = zi.dot(&zt.t()) / t;
        let mut i2t = 0.0;
        let mut t2i = 0.0;
        for k in 0..m {
            let row: f64 = s.row(k).iter().map(|v| v.exp()).sum();
            let col: f64 = s.column(k).iter().map(|v| v.exp()).sum();
            i2t -= (s[[k, k]].exp() / row).ln();
            t2i -= (s[[k, k]].exp() / col).ln();
        }
        let info_nce = 0.5 * (i2t + t2i) / m as f64;
        nce_err = nce_err.max((itc_loss(&first) - info_nce).abs());

        let argmax_rows = |p: &Mat| -> Vec<usize> {
            p.axis_iter(Axis(0))
                .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b }).0)
                .collect()
        };
        let reference = (argmax_rows(&first.p_i2t), argmax_rows(&first.p_t2i));
        let stable = [0.01, 0.07, 0.5, 3.0, 10.0].iter().all(|&t2| {
            let other = itc_similarities(zi.view(), zt.view(), t2, &ItcTargets::identity(m)).unwrap();
            (argmax_rows(&other.p_i2t), argmax_rows(&other.p_t2i)) == reference
        });
        if stable {
            argmax_ok += 1;
        }
    }
    (
        zero_err <= 1e-12 && nce_err <= 1e-9 && argmax_ok == 50,
        format!(
            "loss at p=y {zero_err:.1e}, InfoNCE gap {nce_err:.1e} (limit 1e-9), argmax stable on {argmax_ok}/50 matrices"
        ),
    )
}

fn criterion_6() -> Outcome {
    let enc = EncoderConfig::vit_b16();
    let head = RecognitionHeadConfig::large(1000);
    let f = flop_estimate(&enc, &head);
    let enc_ok = (f.encoder_gflops - 22.42).abs() <= 0.15 * 22.42;
    let over_ok = (f.overhead_percent - 3.88).abs() <= 2.0;
    (
        enc.image_size == 256 && enc_ok && over_ok,
        format!(
            "encoder {:.2} G (22.42 +/- 15%), head {:.3} G, overhead {:.2}% (3.88 +/- 2.0)",
            f.encoder_gflops, f.head_gflops, f.overhead_percent
        ),
    )
}

fn retrieval(model: &Model, records: &[ImageTextRecord]) -> (f64, f64) {
    let images: Vec<_> = records.iter().map(|r| r.load_image(32).unwrap()).collect();
    let refs: Vec<_> = images.iter().collect();
    let zi = model.embed_images(&refs).unwrap();
    let captions: Vec<&str> = records.iter().map(|r| r.caption.as_str()).collect();
    let zt = model.embed_texts(&captions).unwrap();
    let s = zi.dot(&zt.t());
    let n = s.nrows();
    let best = |v: Vec<f64>| v.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &x)| if x > b.1 { (j, x) } else { b }).0;
    let i2t = (0..n).filter(|&i| best(s.row(i).to_vec()) == i).count();
    let t2i = (0..n).filter(|&j| best(s.column(j).to_vec()) == j).count();
    (i2t as f64 / n as f64, t2i as f64 / n as f64)
}

fn overfit_setup() -> (Vec<ImageTextRecord>, TagLexicon, TrainConfig) {
    let lexicon = TagLexicon::from_counts(DEFAULT_CONCEPTS.iter().map(|n| (*n, 10u64)), vec![], 12).unwrap();
    let records = synth_fixture(7, 32, &lexicon, 0.0, &synth_opts()).unwrap();
    (records, lexicon, toy_config("epochs=200\nmax_steps=200"))
}

fn log_text(log: &[StepRecord]) -> String {
    log.iter().map(|r| r.to_tsv() + "\n").collect()
}

fn criterion_7() -> Outcome {
    let (records, lexicon, config) = overfit_setup();
    let mut trainer = Trainer::new(&records, &lexicon, &config).unwrap();
    let log = trainer.run().unwrap();
    let windows: Vec<f64> = log.chunks(20).map(|w| w.iter().map(|r| r.l_total).sum::<f64>() / w.len() as f64).collect();
    let decreasing = windows.windows(2).all(|w| w[1] < w[0]);
    let (i2t, t2i) = retrieval(trainer.model(), &records);
    let rerun = Trainer::new(&records, &lexicon, &config).unwrap().run().unwrap();
    let deterministic = log_text(&rerun) == log_text(&log);
    (
        log.len() == 200 && decreasing && i2t == 1.0 && t2i == 1.0 && deterministic,
        format!(
            "{} steps, 20-step window loss {:.3} -> {:.3} ({}), retrieval i2t {:.0}% t2i {:.0}%, rerun {}",
            log.len(),
            windows.first().unwrap(),
            windows.last().unwrap(),
            if decreasing { "strictly decreasing" } else { "not monotone" },
            i2t * 100.0,
            t2i * 100.0,
            if deterministic { "identical" } else { "differs" },
        ),
    )
}

fn fig5_fixture() -> (Vec<ImageTextRecord>, TagLexicon) {
    synth_with_lexicon(&DEFAULT_CONCEPTS, 7, 256, 0.5, &synth_opts()).unwrap()
}

const FIG5: &str = "epochs=63\nmax_steps=500\ntau=0.6\nchanging_epoch=1\n";

fn criterion_8() -> Outcome {
    let (records, lexicon) = fig5_fixture();
    let config = toy_config(FIG5);
    let mut trainer = Trainer::new(&records, &lexicon, &config).unwrap();
    let spe = trainer.steps_per_epoch();
    let log = trainer.run().unwrap();
    let mut per_epoch: BTreeMap<usize, TagPrCounts> = BTreeMap::new();
    for r in &log {
        if let Some(pr) = r.tag_pr {
            *per_epoch.entry(r.epoch).or_default() += pr;
        }
    }
    let full_epochs = log.len() / spe;
    let min_precision = per_epoch
        .values()
        .filter_map(TagPrCounts::precision)
        .fold(1.0, f64::min);
    let active = per_epoch.values().any(|p| p.added() > 0);
    let checkpoints = [full_epochs / 3 - 1, 2 * full_epochs / 3 - 1, full_epochs - 1];
    let recalls: Vec<f64> = checkpoints.iter().map(|e| per_epoch[e].recall()).collect();
    let non_decreasing = recalls.windows(2).all(|w| w[1] >= w[0]);
    (
        log.len() == 500 && active && min_precision >= 0.9 && non_decreasing,
        format!(
            "500 steps, {} epochs; min per-epoch pseudo-tag precision {:.3} (>= 0.9); recall at epochs {:?}: {}",
            full_epochs,
            min_precision,
            checkpoints,
            recalls.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" -> ")
        ),
    )
}

fn criterion_9() -> Outcome {
    let (records, lexicon) = fig5_fixture();
    let held_out = synth_fixture(1234, 32, &lexicon, 0.5, &synth_opts()).unwrap();
    let mut scores = Vec::new();
    for extra in ["tag2text=true\nrm_top_freq=2", "tag2text=false"] {
        let config = toy_config(&format!("{FIG5}{extra}"));
        let mut trainer = Trainer::new(&records, &lexicon, &config).unwrap();
        trainer.run().unwrap();
        let (i2t, t2i) = retrieval(trainer.model(), &held_out);
        scores.push((i2t, t2i));
    }
    let (with, without) = (scores[0], scores[1]);
    let mean = |s: (f64, f64)| (s.0 + s.1) / 2.0;
    (
        mean(with) >= mean(without),
        format!(
            "held-out top-1 (i2t/t2i) with Tag2Text+RmTopFreq {:.3}/{:.3}, without {:.3}/{:.3}",
            with.0, with.1, without.0, without.1
        ),
    )
}

fn criterion_10() -> Outcome {
    let (records, lexicon, config) = overfit_setup();
    let full = Trainer::new(&records, &lexicon, &config).unwrap().run().unwrap();
    let mut first = Trainer::new(&records, &lexicon, &config).unwrap();
    let mut log = first.run_until(100, |_, _| Ok(())).unwrap();
    let bytes = first.checkpoint().to_bytes();
    drop(first);
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::resume(&records, &lexicon, &ckpt).unwrap();
    log.extend(resumed.run().unwrap());
    let same_log = log_text(&log) == log_text(&full);
    let mut straight = Trainer::new(&records, &lexicon, &config).unwrap();
    straight.run().unwrap();
    let same_state = straight.checkpoint().to_bytes() == resumed.checkpoint().to_bytes();
    (
        same_log && same_state && full.len() == 200,
        format!(
            "resumed at step 100: metrics log {}, final state {}",
            if same_log { "identical" } else { "differs" },
            if same_state { "identical" } else { "differs" }
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient suite", criterion_1),
        ("SPLC oracle", criterion_2),
        ("tagger oracle", criterion_3),
        ("metric oracle", criterion_4),
        ("ITC identities", criterion_5),
        ("FLOP estimate", criterion_6),
        ("overfit smoke test", criterion_7),
        ("pseudo-tag precision/recall trend", criterion_8),
        ("Tag2Text ablation direction", criterion_9),
        ("determinism and resume", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| *f == (i + 1).to_string()) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        if !ok {
            failed += 1;
        }
        println!(
            "{id} {}: {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
