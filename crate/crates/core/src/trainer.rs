//! Joint training loop: recognition with loss correction, Tag2Text
//! composition and image-text contrastive alignment.
//!
//! Data order: at epoch `e` the pairs are visited in a permutation drawn
//! from `ChaCha8(derive_seed(seed, 1, e))`; the last batch of an epoch may
//! be short. Pair `i` in epoch `e` is augmented with seed
//! `derive_seed(seed, 2, e, i)`. Everything else is deterministic, so a
//! resumed run replays the uninterrupted one exactly.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{augment, ImageTextRecord};
use crate::error::{Error, Result};
use crate::eval::{tag_pr_counts, TagPrCounts};
use crate::graph::{Gradients, Graph, Mat};
use crate::lexicon::{class_weights, exclusion_set, ClassWeights, TagLexicon};
use crate::losses::{itc_loss, itc_loss_grad, itc_similarities, mlr_loss, temperature_from_log, BatchReduction};
use crate::model::{Image, Modality, Model, ModelConfig, TextTokenizer, TEMPERATURE_PARAM};
use crate::optim::{AdamW, LrSchedule};
use crate::supervision::{build_itc_targets, compose_tag2text, concat_text, TargetMode};
use crate::tagger::{tokenize, TagVector, Tagger};

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based optimizer step.
    pub step: usize,
    pub epoch: usize,
    pub l_mlr: f64,
    pub l_itc: f64,
    pub l_total: f64,
    pub pseudo_count: usize,
    pub learning_rate: f64,
    /// Online precision/recall counts of the added tags, when every pair in
    /// the batch carries complete ground truth.
    pub tag_pr: Option<TagPrCounts>,
}

impl StepRecord {
    pub const TSV_HEADER: &'static str = "step\tl_mlr\tl_itc\tl_total\tpseudo_count\tlr";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.l_mlr, self.l_itc, self.l_total, self.pseudo_count, self.learning_rate
        )
    }
}

pub fn write_metrics_log(records: &[StepRecord], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{}", StepRecord::TSV_HEADER)?;
    for r in records {
        writeln!(out, "{}", r.to_tsv())?;
    }
    Ok(())
}

/// SplitMix64 over the parts.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut x: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 1, epoch as u64]));
    order.shuffle(&mut rng);
    order
}

fn fingerprint(records: &[ImageTextRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.id.as_bytes());
        h.update([0]);
        h.update(r.caption.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// Per-step internals, exposed for diagnostics and tests.
pub struct StepOutput {
    pub record: StepRecord,
    pub gradients: Gradients,
    pub batch: Vec<usize>,
    pub corrected: Vec<TagVector>,
    pub texts: Vec<String>,
}

pub struct Trainer {
    config: TrainConfig,
    lexicon: TagLexicon,
    model: Model,
    opt: AdamW,
    step: usize,
    schedule: LrSchedule,
    ids: Vec<String>,
    captions: Vec<String>,
    images: Vec<Image>,
    targets: Vec<TagVector>,
    /// Training targets: the extracted tags plus any persisted pseudo
    /// positives.
    current: Vec<TagVector>,
    full: Vec<Option<TagVector>>,
    weights: ClassWeights,
    exclusion: BTreeSet<String>,
    fingerprint: String,
    order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(records: &[ImageTextRecord], lexicon: &TagLexicon, config: &TrainConfig) -> Result<Self> {
        let mut config = config.clone();
        if config.head.num_classes == 0 {
            config.head.num_classes = lexicon.len();
        }
        let mut texts: Vec<&str> = records.iter().map(|r| r.caption.as_str()).collect();
        let names = lexicon.names();
        texts.extend(names.iter().copied());
        let tokenizer = TextTokenizer::build(&texts, config.vocab_size);
        let mut model = Model::new(
            ModelConfig {
                encoder: config.encoder.clone(),
                head: config.head.clone(),
                init_seed: config.seed,
            },
            tokenizer,
        )?;
        model.set_temperature(config.hyper.temperature_init);
        config.encoder = model.config.encoder.clone();
        let opt = AdamW::new(config.adam, &model.params);
        Self::assemble(records, lexicon, config, model, opt, 0, &[])
    }

    pub fn resume(records: &[ImageTextRecord], lexicon: &TagLexicon, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.lexicon.names() != lexicon.names() {
            return Err(Error::CheckpointMismatch("lexicon differs from the checkpoint".into()));
        }
        if ckpt.data_fingerprint != fingerprint(records) {
            return Err(Error::CheckpointMismatch("training data differs from the checkpoint".into()));
        }
        let model = ckpt.model()?;
        let mut opt = AdamW::new(ckpt.config.adam, &model.params);
        if ckpt.adam_m.len() != opt.m.len() || ckpt.adam_v.len() != opt.v.len() {
            return Err(Error::CheckpointMismatch("optimizer state size".into()));
        }
        opt.m = ckpt.adam_m.clone();
        opt.v = ckpt.adam_v.clone();
        opt.t = ckpt.adam_t;
        Self::assemble(
            records,
            lexicon,
            ckpt.config.clone(),
            model,
            opt,
            ckpt.step,
            &ckpt.pseudo_labels,
        )
    }

    fn assemble(
        records: &[ImageTextRecord],
        lexicon: &TagLexicon,
        config: TrainConfig,
        model: Model,
        opt: AdamW,
        step: usize,
        pseudo_labels: &[Vec<usize>],
    ) -> Result<Self> {
        config.validate()?;
        if records.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if config.head.num_classes != lexicon.len() {
            return Err(Error::CheckpointMismatch(format!(
                "head has {} classes but lexicon has {}",
                config.head.num_classes,
                lexicon.len()
            )));
        }
        let tagger = Tagger::new(lexicon);
        let size = config.encoder.image_size;
        let images = records
            .iter()
            .map(|r| r.load_image(size))
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<TagVector> = records.iter().map(|r| tagger.extract(&r.caption)).collect();
        let mut current = targets.clone();
        if !pseudo_labels.is_empty() {
            if pseudo_labels.len() != records.len() {
                return Err(Error::CheckpointMismatch("pseudo label count differs from the data".into()));
            }
            for (t, extra) in current.iter_mut().zip(pseudo_labels) {
                for &j in extra {
                    if j >= t.len() {
                        return Err(Error::CheckpointMismatch(format!("pseudo label {j} out of range")));
                    }
                    t.set(j, true);
                }
            }
        }
        let full = records
            .iter()
            .map(|r| match &r.full_tags {
                Some(t) if t.len() == lexicon.len() => Ok(Some(t.clone())),
                Some(t) => Err(Error::Record {
                    id: r.id.clone(),
                    msg: format!("full_tags has {} entries, lexicon {}", t.len(), lexicon.len()),
                }),
                None => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = if config.reweight {
            class_weights(lexicon)?
        } else {
            ClassWeights::uniform(lexicon.len())
        };
        Ok(Self {
            schedule: config.schedule(records.len()),
            exclusion: exclusion_set(lexicon, config.rm_top_freq),
            lexicon: lexicon.clone(),
            model,
            opt,
            step,
            ids: records.iter().map(|r| r.id.clone()).collect(),
            captions: records.iter().map(|r| r.caption.clone()).collect(),
            images,
            targets,
            current,
            full,
            weights,
            fingerprint: fingerprint(records),
            order: None,
            config,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Optimizer steps completed so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.ids.len().div_ceil(self.config.batch_size)
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Caption-extracted targets, in record order.
    pub fn targets(&self) -> &[TagVector] {
        &self.targets
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            adam_t: self.opt.t,
            vocab: self.model.tokenizer.vocab().to_vec(),
            lexicon: self.lexicon.clone(),
            data_fingerprint: self.fingerprint.clone(),
            params: self
                .model
                .params
                .iter()
                .map(|(_, n, m)| (n.to_string(), m.clone()))
                .collect(),
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
            queries: self.model.queries.clone(),
            pseudo_labels: if self.config.persist_pseudo {
                self.current
                    .iter()
                    .zip(&self.targets)
                    .map(|(c, t)| c.indices().filter(|&j| !t.get(j)).collect())
                    .collect()
            } else {
                Vec::new()
            },
        }
    }

    fn batch_indices(&mut self, step: usize) -> (usize, Vec<usize>) {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let pos = step % spe;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, epoch_order(self.ids.len(), self.config.seed, epoch)));
        }
        let order = &self.order.as_ref().expect("order set").1;
        let bs = self.config.batch_size;
        let end = ((pos + 1) * bs).min(order.len());
        (epoch, order[pos * bs..end].to_vec())
    }

    /// Text for each pair of the batch plus ITC targets.
    fn compose_texts(&self, batch: &[usize], corrected: &[TagVector]) -> (Vec<Vec<usize>>, Vec<String>, Vec<bool>) {
        let max_len = self.config.encoder.text_max_len;
        let tok = &self.model.tokenizer;
        let tag_texts: Vec<String> = batch
            .iter()
            .zip(corrected)
            .map(|(&i, c)| {
                if self.config.tag2text {
                    compose_tag2text(
                        &self.targets[i],
                        c,
                        &self.lexicon,
                        self.config.retain_original,
                        &self.exclusion,
                    )
                } else {
                    String::new()
                }
            })
            .collect();
        let mask: Vec<bool> = tag_texts.iter().map(|t| !t.is_empty()).collect();
        let mut ids = Vec::new();
        let mut texts = Vec::new();
        match self.config.target_mode {
            TargetMode::Combined => {
                for (&i, t) in batch.iter().zip(&tag_texts) {
                    let pair = concat_text(&self.captions[i], t);
                    ids.push(tok.encode_tokens(&pair.tokens(max_len), max_len));
                    texts.push(pair.combined);
                }
            }
            TargetMode::ExtraColumns => {
                for &i in batch {
                    ids.push(tok.encode(&self.captions[i], max_len));
                    texts.push(self.captions[i].clone());
                }
                for t in tag_texts.iter().filter(|t| !t.is_empty()) {
                    ids.push(tok.encode_tokens(&tokenize(t), max_len));
                    texts.push(t.clone());
                }
            }
        }
        (ids, texts, mask)
    }

    /// Forward and backward for the next batch without updating parameters.
    pub fn compute_step(&mut self) -> Result<StepOutput> {
        let step = self.step;
        let (epoch, batch) = self.batch_indices(step);
        let m = batch.len();
        let images: Vec<Image> = batch
            .iter()
            .map(|&i| {
                let seed = derive_seed(&[self.config.seed, 2, epoch as u64, i as u64]);
                augment(&self.images[i], seed, self.config.augment)
            })
            .collect();
        let refs: Vec<&Image> = images.iter().collect();
        let targets: Vec<TagVector> = batch.iter().map(|&i| self.targets[i].clone()).collect();
        let train_targets: Vec<TagVector> = batch.iter().map(|&i| self.current[i].clone()).collect();
        let lr = self.schedule.lr_at(step);

        let model = &self.model;
        let mut g = Graph::new(&model.params);
        let feats = model.forward_images(&mut g, &refs)?;
        let logits = model.forward_head(&mut g, feats.spatial, m)?;
        let mlr = mlr_loss(
            g.value(logits).view(),
            &train_targets,
            &self.weights,
            &self.config.hyper,
            epoch,
            BatchReduction::Mean,
        )?;
        let w = self.config.mlr_weight;
        let mlr_node = g.loss(w * mlr.report.loss, vec![logits], vec![mlr.grad * w]);

        let corrected = mlr.report.corrected_targets;
        let (ids, texts, mask) = self.compose_texts(&batch, &corrected);
        let txt = model.forward_texts(&mut g, &ids)?;
        let zi = model.forward_project(&mut g, feats.global, Modality::Image)?;
        let zt = model.forward_project(&mut g, txt, Modality::Text)?;
        let lt = g.param_by_name(TEMPERATURE_PARAM);
        let (t, clamped) = temperature_from_log(g.scalar(lt), self.config.hyper.temperature_bounds);
        let itc_targets = build_itc_targets(m, &mask, self.config.target_mode);
        let sim = itc_similarities(g.value(zi).view(), g.value(zt).view(), t, &itc_targets)?;
        let l_itc = itc_loss(&sim);
        let ig = itc_loss_grad(&sim, g.value(zi).view(), g.value(zt).view());
        let dlog = if clamped { 0.0 } else { ig.temperature * t };
        let itc_node = g.loss(
            l_itc,
            vec![zi, zt, lt],
            vec![ig.z_img, ig.z_txt, Mat::from_elem((1, 1), dlog)],
        );
        let total = g.sum(&[mlr_node, itc_node]);
        let l_total = g.scalar(total);
        if !l_total.is_finite() || !mlr.report.loss.is_finite() || !l_itc.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|&i| self.ids[i].as_str()).collect();
            return Err(Error::NonFiniteLoss {
                step: step + 1,
                batch_ids: ids.join(","),
            });
        }
        let gradients = g.backward(total);

        let tag_pr = batch
            .iter()
            .map(|&i| self.full[i].clone())
            .collect::<Option<Vec<_>>>()
            .map(|full| tag_pr_counts(&corrected, &targets, &full));
        if self.config.target_mode == TargetMode::ExtraColumns || mask.iter().any(|&b| b) {
            log::trace!("step {}: pseudo mask {:?}", step + 1, mask);
        }
        Ok(StepOutput {
            record: StepRecord {
                step: step + 1,
                epoch,
                l_mlr: mlr.report.loss,
                l_itc,
                l_total,
                pseudo_count: mlr.report.pseudo_count,
                learning_rate: lr,
                tag_pr,
            },
            gradients,
            batch,
            corrected,
            texts,
        })
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let out = self.compute_step()?;
        self.opt
            .step(&mut self.model.params, &out.gradients, out.record.learning_rate);
        if self.config.persist_pseudo {
            for (&i, c) in out.batch.iter().zip(&out.corrected) {
                self.current[i] = c.clone();
            }
        }
        self.step += 1;
        log::debug!("{}", out.record.to_tsv());
        Ok(out.record)
    }

    /// Steps until `end` steps are done (or training finishes), calling
    /// `on_step` after each.
    pub fn run_until(
        &mut self,
        end: usize,
        mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let end = end.min(self.total_steps());
        let mut out = Vec::new();
        while self.step < end {
            let r = self.step()?;
            on_step(self, &r)?;
            out.push(r);
        }
        Ok(out)
    }

    pub fn run(&mut self) -> Result<Vec<StepRecord>> {
        self.run_until(self.total_steps(), |_, _| Ok(()))
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

/// Train from scratch to completion.
pub fn train(
    records: &[ImageTextRecord],
    lexicon: &TagLexicon,
    config: &TrainConfig,
) -> Result<(Model, Vec<StepRecord>)> {
    let mut t = Trainer::new(records, lexicon, config)?;
    let log = t.run()?;
    Ok((t.into_model(), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_fixture, SynthOptions};

    fn setup() -> (Vec<ImageTextRecord>, TagLexicon, TrainConfig) {
        let names = ["circle", "square", "star", "tree", "car", "kite"];
        let lex = TagLexicon::from_counts(names.iter().zip([9u64, 4, 6, 8, 5, 7]).map(|(n, f)| (*n, f)), vec![], 6)
            .unwrap();
        let opts = SynthOptions {
            image_size: 16,
            cell_size: 8,
            ..Default::default()
        };
        let recs = synth_fixture(1, 6, &lex, 0.5, &opts).unwrap();
        let mut cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        for (k, v) in [
            ("image_size", "16"),
            ("patch_size", "8"),
            ("width", "16"),
            ("depth", "1"),
            ("heads", "2"),
            ("mlp_ratio", "2"),
            ("text_max_len", "12"),
            ("proj_dim", "8"),
            ("group_factor", "4"),
            ("decoder_dim", "16"),
            ("decoder_heads", "2"),
            ("ffn_dim", "16"),
        ] {
            cfg.set(k, v).unwrap();
        }
        (recs, lex, cfg)
    }

    #[test]
    fn seeds_differ_by_part() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_eq!(epoch_order(10, 3, 1), epoch_order(10, 3, 1));
        assert_ne!(epoch_order(10, 3, 1), epoch_order(10, 3, 2));
    }

    #[test]
    fn deterministic_and_gated() {
        let (recs, lex, cfg) = setup();
        let (_, a) = train(&recs, &lex, &cfg).unwrap();
        let (_, b) = train(&recs, &lex, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.iter().filter(|r| r.epoch == 0).all(|r| r.pseudo_count == 0));
    }

    #[test]
    fn zero_mlr_weight_isolates_head() {
        let (recs, lex, mut cfg) = setup();
        cfg.mlr_weight = 0.0;
        let mut t = Trainer::new(&recs, &lex, &cfg).unwrap();
        let out = t.compute_step().unwrap();
        let params = &t.model().params;
        for (id, name, _) in params.iter() {
            let g = out.gradients.get(id);
            let nonzero = g.is_some_and(|g| g.iter().any(|&v| v != 0.0));
            if name.starts_with("head.") {
                assert!(!nonzero, "{name}");
            }
        }
    }

    #[test]
    fn every_tensor_gets_gradient() {
        let (recs, lex, cfg) = setup();
        let mut t = Trainer::new(&recs, &lex, &cfg).unwrap();
        let out = t.compute_step().unwrap();
        for (id, name, _) in t.model().params.iter() {
            let g = out.gradients.get(id).unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(g.iter().any(|&v| v != 0.0), "{name}");
        }
    }

    #[test]
    fn persisted_pseudo_labels_resume_exactly() {
        let (recs, lex, mut cfg) = setup();
        cfg.persist_pseudo = true;
        cfg.epochs = 3;
        cfg.hyper.tau = 0.04;
        cfg.hyper.changing_epoch = 0;
        let full = Trainer::new(&recs, &lex, &cfg).unwrap().run().unwrap();
        let mut first = Trainer::new(&recs, &lex, &cfg).unwrap();
        let mut log = first.run_until(3, |_, _| Ok(())).unwrap();
        let ckpt = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
        assert!(ckpt.pseudo_labels.iter().any(|p| !p.is_empty()));
        for (cur, ext) in first.current.iter().zip(&first.targets) {
            assert!(cur.is_superset_of(ext));
        }
        let mut resumed = Trainer::resume(&recs, &lex, &ckpt).unwrap();
        log.extend(resumed.run().unwrap());
        assert_eq!(log, full);

        cfg.persist_pseudo = false;
        let plain = Trainer::new(&recs, &lex, &cfg).unwrap().run().unwrap();
        assert_ne!(plain, full);
    }
}
