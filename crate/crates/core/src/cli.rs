//! Command-line interface.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{load_corpus, synth_with_lexicon, write_corpus, SynthOptions, DEFAULT_CONCEPTS};
use crate::eval::{
    flop_estimate, histogram_table, multilabel_metrics, pair_similarities, similarity_histogram, zero_shot_classify,
    PromptSet, TagPrCounts, HISTOGRAM_BINS,
};
use crate::graph::Mat;
use crate::lexicon::{build_lexicon, load_lexicon, save_lexicon, BaseTag, BuildOptions, MinCountRule};
use crate::model::Image;
use crate::tagger::Tagger;
use crate::trainer::{StepRecord, Trainer};

#[derive(Debug, Parser)]
#[command(name = "tagvlp", version, about = "Tag-aware image-text pretraining toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a tag lexicon from captions and a base vocabulary.
    BuildLexicon(BuildLexiconArgs),
    /// Extract tag vectors from captions.
    ExtractTags(ExtractTagsArgs),
    /// Generate a synthetic glyph corpus with planted missing tags.
    Synth(SynthArgs),
    /// Train the model.
    Train(TrainArgs),
    /// Zero-shot classification with prompt ensembling.
    EvalZeroshot(EvalZeroshotArgs),
    /// Multi-label recognition metrics.
    EvalMlr(EvalMlrArgs),
    /// Analytic compute estimate for encoder and head.
    EstimateFlops(EstimateFlopsArgs),
    /// Histogram of image-text cosine similarities.
    PlotSim(PlotSimArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RuleArg {
    AtLeast,
    MoreThan,
}

#[derive(Debug, Args)]
pub struct BuildLexiconArgs {
    /// Caption source: a corpus `.jsonl` file or a text file with one caption per line.
    #[arg(long)]
    pub captions: PathBuf,
    /// Base vocabulary, one `name[<TAB>hypernym]` per line.
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub min_count: u64,
    #[arg(long, value_enum, default_value = "at-least")]
    pub rule: RuleArg,
    /// Drop the T most frequent tags.
    #[arg(long, default_value_t = 0)]
    pub remove_top: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractTagsArgs {
    #[arg(long)]
    pub lexicon: PathBuf,
    /// Captions, one per line, or a corpus `.jsonl` file.
    #[arg(long)]
    pub input: PathBuf,
    /// Match multi-word tags on surface tokens only.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0)]
    pub missing_rate: f64,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    /// Glyph cell size; match the encoder patch size.
    #[arg(long, default_value_t = 8)]
    pub cell_size: usize,
    /// Concept names, one per line (default: a built-in list of 12).
    #[arg(long)]
    pub concepts: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub lexicon: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Write a checkpoint every N steps (0 = only the final one).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps (the schedule is unchanged).
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalZeroshotArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus whose records carry a `label`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Class names, one per line (default: sorted distinct labels).
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Template file with one `{label}` template per line.
    #[arg(long, conflicts_with = "single_template")]
    pub prompts: Option<PathBuf>,
    /// Use only "a photo of a {label}".
    #[arg(long)]
    pub single_template: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalMlrArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus whose records carry `tags`; otherwise caption tags are used.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimateFlopsArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotSimArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: BTreeMap<String, String>,
    pub overrides: Vec<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: None,
            config: BTreeMap::new(),
            overrides: Vec::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn input(mut self, path: &Path) -> anyhow::Result<Self> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(self)
    }

    fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    fn with_config(mut self, cfg: &TrainConfig) -> Self {
        self.config = cfg
            .to_text()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        self.seed = Some(cfg.seed);
        self
    }

    /// Writes `out/manifest.json`, creating `out`.
    fn write(&self, out: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}

fn read_captions(path: &Path) -> anyhow::Result<Vec<String>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        Ok(load_corpus(path, None)?.into_iter().map(|r| r.caption).collect())
    } else {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(text.lines().map(str::to_string).collect())
    }
}

fn build_config(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> anyhow::Result<TrainConfig> {
    let mut cfg = match file {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("override {o:?} is not key=value"))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_images(records: &[crate::data::ImageTextRecord], size: usize) -> anyhow::Result<Vec<Image>> {
    Ok(records
        .iter()
        .map(|r| r.load_image(size))
        .collect::<crate::Result<Vec<_>>>()?)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::BuildLexicon(a) => build_lexicon_cmd(a),
        Command::ExtractTags(a) => extract_tags_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::EvalZeroshot(a) => eval_zeroshot_cmd(a),
        Command::EvalMlr(a) => eval_mlr_cmd(a),
        Command::EstimateFlops(a) => estimate_flops_cmd(a),
        Command::PlotSim(a) => plot_sim_cmd(a),
    }
}

fn build_lexicon_cmd(a: BuildLexiconArgs) -> anyhow::Result<()> {
    let out_file = a.out.join("lexicon.tsv");
    RunManifest::new("build-lexicon")
        .input(&a.captions)?
        .input(&a.vocab)?
        .output(&out_file)
        .write(&a.out)?;
    let captions = read_captions(&a.captions)?;
    let vocab_text = fs::read_to_string(&a.vocab).with_context(|| format!("reading {}", a.vocab.display()))?;
    let vocab: Vec<BaseTag> = vocab_text.lines().filter_map(BaseTag::parse_line).collect();
    let opts = BuildOptions {
        min_count: a.min_count,
        rule: match a.rule {
            RuleArg::AtLeast => MinCountRule::AtLeast,
            RuleArg::MoreThan => MinCountRule::MoreThan,
        },
        remove_top_t: a.remove_top,
    };
    let lex = build_lexicon(&captions, &vocab, &opts)?;
    save_lexicon(&lex, &out_file)?;
    println!("{} tags written to {}", lex.len(), out_file.display());
    Ok(())
}

fn extract_tags_cmd(a: ExtractTagsArgs) -> anyhow::Result<()> {
    let out_file = a.out.join("tags.tsv");
    RunManifest::new("extract-tags")
        .input(&a.lexicon)?
        .input(&a.input)?
        .output(&out_file)
        .write(&a.out)?;
    let lex = load_lexicon(&a.lexicon)?;
    let tagger = Tagger::new(&lex).strict(a.strict);
    let mut out = String::from("index\ttags\n");
    for (i, cap) in read_captions(&a.input)?.iter().enumerate() {
        let tags: Vec<&str> = tagger.extract(cap).indices().map(|j| lex.name(j)).collect();
        out.push_str(&format!("{i}\t{}\n", tags.join("|")));
    }
    fs::write(&out_file, out).with_context(|| format!("writing {}", out_file.display()))?;
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> anyhow::Result<()> {
    if !(0.0..1.0).contains(&a.missing_rate) {
        bail!("--missing-rate must be in [0, 1)");
    }
    let mut manifest = RunManifest::new("synth");
    manifest.seed = Some(a.seed);
    if let Some(c) = &a.concepts {
        manifest = manifest.input(c)?;
    }
    manifest
        .output(&a.out.join("corpus.jsonl"))
        .output(&a.out.join("images"))
        .output(&a.out.join("lexicon.tsv"))
        .write(&a.out)?;
    let names: Vec<String> = match &a.concepts {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
        None => DEFAULT_CONCEPTS.iter().map(|s| s.to_string()).collect(),
    };
    let opts = SynthOptions {
        image_size: a.image_size,
        cell_size: a.cell_size,
        ..Default::default()
    };
    let (records, lex) = synth_with_lexicon(&names, a.seed, a.n, a.missing_rate, &opts)?;
    write_corpus(&records, Some(&lex), &a.out, a.image_size)?;
    save_lexicon(&lex, a.out.join("lexicon.tsv"))?;
    println!("{} pairs written to {}", records.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let lex = load_lexicon(&a.lexicon)?;
    let records = load_corpus(&a.corpus, Some(&lex))?;
    let mut trainer = match &a.resume {
        Some(p) => {
            if a.config.is_some() || !a.overrides.is_empty() || a.seed.is_some() {
                bail!("--resume takes its configuration from the checkpoint");
            }
            Trainer::resume(&records, &lex, &Checkpoint::load(p)?)?
        }
        None => {
            let cfg = build_config(a.config.as_deref(), &a.overrides, a.seed)?;
            Trainer::new(&records, &lex, &cfg)?
        }
    };
    let end = a.stop_after.unwrap_or(usize::MAX).min(trainer.total_steps());
    let start = trainer.steps_done();
    let ckpt_path = |s: usize| a.out.join(format!("step-{s:06}.ckpt"));
    let metrics_path = a.out.join("metrics.tsv");
    let pr_path = a.out.join("tag_pr.tsv");
    let final_path = a.out.join("final.ckpt");

    let mut manifest = RunManifest::new("train")
        .with_config(trainer.config())
        .input(&a.lexicon)?
        .input(&a.corpus)?;
    manifest.overrides = a.overrides.clone();
    if let Some(c) = &a.config {
        manifest = manifest.input(c)?;
    }
    if let Some(r) = &a.resume {
        manifest = manifest.input(r)?;
    }
    manifest = manifest.output(&metrics_path).output(&pr_path);
    if a.checkpoint_every > 0 {
        for s in (start + 1..=end).filter(|s| s % a.checkpoint_every == 0) {
            manifest = manifest.output(&ckpt_path(s));
        }
    }
    manifest.output(&final_path).write(&a.out)?;

    let mut metrics = std::io::BufWriter::new(
        fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?,
    );
    writeln!(metrics, "{}", StepRecord::TSV_HEADER)?;
    let mut per_epoch: BTreeMap<usize, TagPrCounts> = BTreeMap::new();
    let every = a.checkpoint_every;
    trainer.run_until(end, |t, r| {
        writeln!(metrics, "{}", r.to_tsv()).map_err(|e| crate::Error::io(&metrics_path, e))?;
        if let Some(pr) = r.tag_pr {
            *per_epoch.entry(r.epoch).or_default() += pr;
        }
        if every > 0 && r.step % every == 0 {
            t.checkpoint().save(ckpt_path(r.step))?;
        }
        Ok(())
    })?;
    metrics.flush()?;
    trainer.checkpoint().save(&final_path)?;
    let mut pr = String::from("epoch\tadded\tcorrect\tmissing\tprecision\trecall\n");
    for (e, c) in &per_epoch {
        let p = c.precision().map_or("NA".to_string(), |p| format!("{p:.4}"));
        pr.push_str(&format!("{e}\t{}\t{}\t{}\t{p}\t{:.4}\n", c.added(), c.correct, c.missing, c.recall()));
    }
    fs::write(&pr_path, pr)?;
    println!("trained {} steps; checkpoint {}", trainer.steps_done(), final_path.display());
    Ok(())
}

fn eval_zeroshot_cmd(a: EvalZeroshotArgs) -> anyhow::Result<()> {
    let out_file = a.out.join("zeroshot.tsv");
    let mut m = RunManifest::new("eval-zeroshot").input(&a.checkpoint)?.input(&a.corpus)?;
    if let Some(p) = &a.classes {
        m = m.input(p)?;
    }
    if let Some(p) = &a.prompts {
        m = m.input(p)?;
    }
    m.output(&out_file).write(&a.out)?;

    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let records = load_corpus(&a.corpus, None)?;
    let classes: Vec<String> = match &a.classes {
        Some(p) => fs::read_to_string(p)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
        None => {
            let set: std::collections::BTreeSet<String> = records.iter().filter_map(|r| r.label.clone()).collect();
            set.into_iter().collect()
        }
    };
    let labels = records
        .iter()
        .map(|r| {
            let l = r.label.as_deref().with_context(|| format!("record {} has no label", r.id))?;
            classes
                .iter()
                .position(|c| c == l)
                .with_context(|| format!("record {}: label {l:?} not among classes", r.id))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let prompts = if a.single_template {
        PromptSet::single()
    } else if let Some(p) = &a.prompts {
        PromptSet::parse(&fs::read_to_string(p)?)?
    } else {
        PromptSet::ensemble()
    };
    let images = load_images(&records, model.config.encoder.image_size)?;
    let refs: Vec<&Image> = images.iter().collect();
    let z = model.embed_images(&refs)?;
    let r = zero_shot_classify(&z, &labels, &classes, &prompts, &model, &ckpt.lexicon)?;
    let mut out = format!("top1\ttop5\n{:.2}\t{:.2}\n\nclass\tseen\taccuracy\n", r.top1 * 100.0, r.top5 * 100.0);
    for ((c, s), acc) in classes.iter().zip(&r.seen_mask).zip(&r.per_class) {
        let acc = acc.map_or("NA".to_string(), |v| format!("{:.2}", v * 100.0));
        out.push_str(&format!("{c}\t{s}\t{acc}\n"));
    }
    fs::write(&out_file, &out)?;
    print!("{out}");
    Ok(())
}

fn eval_mlr_cmd(a: EvalMlrArgs) -> anyhow::Result<()> {
    let out_file = a.out.join("mlr.tsv");
    RunManifest::new("eval-mlr")
        .input(&a.checkpoint)?
        .input(&a.corpus)?
        .output(&out_file)
        .write(&a.out)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let lex = &ckpt.lexicon;
    let records = load_corpus(&a.corpus, Some(lex))?;
    let tagger = Tagger::new(lex);
    let c = lex.len();
    let mut truth = Mat::zeros((records.len(), c));
    for (i, r) in records.iter().enumerate() {
        let t = r.full_tags.clone().unwrap_or_else(|| tagger.extract(&r.caption));
        for j in t.indices() {
            truth[[i, j]] = 1.0;
        }
    }
    let images = load_images(&records, model.config.encoder.image_size)?;
    let refs: Vec<&Image> = images.iter().collect();
    let probs = model.predict_tags(&refs)?;
    let m = multilabel_metrics(&probs, &truth, a.threshold)?;
    let out = format!("{m}\n");
    fs::write(&out_file, &out)?;
    print!("{out}");
    Ok(())
}

fn estimate_flops_cmd(a: EstimateFlopsArgs) -> anyhow::Result<()> {
    let cfg = build_config(Some(&a.config), &a.overrides, None)?;
    if let Some(out) = &a.out {
        let mut m = RunManifest::new("estimate-flops").with_config(&cfg).input(&a.config)?;
        m.overrides = a.overrides.clone();
        m.output(&out.join("flops.tsv")).write(out)?;
    }
    cfg.encoder.validate()?;
    cfg.head.validate()?;
    let f = flop_estimate(&cfg.encoder, &cfg.head);
    let text = format!(
        "encoder_gflops\thead_gflops\toverhead_percent\n{:.4}\t{:.4}\t{:.4}\n",
        f.encoder_gflops, f.head_gflops, f.overhead_percent
    );
    if let Some(out) = &a.out {
        fs::write(out.join("flops.tsv"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn plot_sim_cmd(a: PlotSimArgs) -> anyhow::Result<()> {
    let matched_path = a.out.join("similarity_matched.tsv");
    let mismatched_path = a.out.join("similarity_mismatched.tsv");
    RunManifest::new("plot-sim")
        .input(&a.checkpoint)?
        .input(&a.corpus)?
        .output(&matched_path)
        .output(&mismatched_path)
        .write(&a.out)?;
    let model = Checkpoint::load(&a.checkpoint)?.model()?;
    let records = load_corpus(&a.corpus, None)?;
    let images = load_images(&records, model.config.encoder.image_size)?;
    let refs: Vec<&Image> = images.iter().collect();
    let texts: Vec<String> = records.iter().map(|r| r.caption.clone()).collect();
    for (shift, path) in [(0, &matched_path), (1, &mismatched_path)] {
        let sims = pair_similarities(&model, &refs, &texts, shift)?;
        let table = histogram_table(&similarity_histogram(&sims, HISTOGRAM_BINS));
        fs::write(path, format!("bin_left\tcount\n{table}"))?;
    }
    println!("histograms written to {}", a.out.display());
    Ok(())
}
