//! Dual encoders and the query-based recognition head.
//!
//! Parameter names (as stored in checkpoints):
//!
//! | prefix | contents |
//! |---|---|
//! | `image.patch.{weight,bias}` | patch embedding, `(p*p*3) x width` |
//! | `image.cls`, `image.pos` | class token `1 x width`, positions `(S+1) x width` |
//! | `image.block{i}.*`, `text.block{i}.*` | pre-norm transformer blocks: `ln1`, `attn.{q,k,v,out}`, `ln2`, `mlp.{fc1,fc2}` |
//! | `image.ln_final`, `text.ln_final` | final layer norms (`gamma`, `beta`) |
//! | `text.token_embed`, `text.pos` | `vocab x width`, `(max_len+1) x width` |
//! | `head.embed` | spatial input projection `width x D` |
//! | `head.ln{1,2,3}`, `head.attn.{q,k,v,out}`, `head.ffn.{fc1,fc2}` | decoder layer |
//! | `head.group.{weight,bias}` | group projection `(K*D) x g`, bias `1 x C` |
//! | `proj.image`, `proj.text` | projectors `width x proj_dim` |
//! | `itc.log_temperature` | `1 x 1` |
//!
//! The fixed random head queries are stored as the buffer `head.queries`.

pub mod tokenizer;

use ndarray::{s, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::graph::{AttnSpec, Graph, Mat, ParamStore, Var};
use crate::losses::sigmoid;
pub use tokenizer::TextTokenizer;

/// An RGB image, `height x width x 3`, values in `[0, 1]`.
pub type Image = Array3<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_vocab: usize,
    pub text_max_len: usize,
    pub proj_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            width: 128,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            text_vocab: 0,
            text_max_len: 40,
            proj_dim: 128,
        }
    }
}

impl EncoderConfig {
    /// ViT-B/16 geometry at 256x256 with a BERT-base-sized text side.
    pub fn vit_b16() -> Self {
        Self {
            image_size: 256,
            patch_size: 16,
            width: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            text_vocab: 30522,
            text_max_len: 40,
            proj_dim: 256,
        }
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "width {} must be divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.depth == 0 || self.proj_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("depth, proj_dim and mlp_ratio must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionHeadConfig {
    pub num_classes: usize,
    /// Classes per query.
    pub group_factor: usize,
    /// Number of queries; 0 means `ceil(num_classes / group_factor)`.
    pub num_queries: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub ffn_dim: usize,
    /// Initial sigmoid output of every class.
    pub prior_prob: f64,
}

impl Default for RecognitionHeadConfig {
    fn default() -> Self {
        Self {
            num_classes: 0,
            group_factor: 16,
            num_queries: 0,
            decoder_dim: 128,
            decoder_heads: 4,
            ffn_dim: 256,
            prior_prob: 0.05,
        }
    }
}

impl RecognitionHeadConfig {
    /// ML-Decoder defaults for a ViT-B/16 backbone: 100 groups, width 768.
    pub fn large(num_classes: usize) -> Self {
        Self {
            num_classes,
            group_factor: num_classes.div_ceil(100),
            num_queries: 100,
            decoder_dim: 768,
            decoder_heads: 8,
            ffn_dim: 2048,
            prior_prob: 0.05,
        }
    }

    pub fn queries(&self) -> usize {
        if self.num_queries > 0 {
            self.num_queries
        } else {
            self.num_classes.div_ceil(self.group_factor.max(1))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.group_factor == 0 {
            return Err(Error::invalid("head needs num_classes >= 1 and group_factor >= 1"));
        }
        let k = self.queries();
        if k == 0 || k * self.group_factor < self.num_classes {
            return Err(Error::invalid(format!(
                "{k} queries x group factor {} cannot cover {} classes",
                self.group_factor, self.num_classes
            )));
        }
        if self.decoder_heads == 0 || !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return Err(Error::invalid("decoder_dim must be divisible by decoder_heads"));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(Error::invalid("prior_prob must be in (0,1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: RecognitionHeadConfig,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub global: Vec<f64>,
    /// `S x width`.
    pub spatial: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub global: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagLogits {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

/// Graph nodes produced by the image encoder for a batch.
#[derive(Debug, Clone, Copy)]
pub struct ImageFeatures {
    /// `batch x width`
    pub global: Var,
    /// `(batch * S) x width`
    pub spatial: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Fixed random queries, `K x decoder_dim`.
    pub queries: Mat,
    pub tokenizer: TextTokenizer,
}

pub const TEMPERATURE_PARAM: &str = "itc.log_temperature";

struct Init<'a> {
    rng: ChaCha8Rng,
    store: &'a mut ParamStore,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) {
        let d = Normal::new(0.0, std).expect("valid std");
        let m = Mat::from_shape_simple_fn((rows, cols), || d.sample(&mut self.rng));
        self.store.insert(name, m);
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let d = Uniform::new_inclusive(-a, a).expect("valid range");
        let w = Mat::from_shape_simple_fn((fan_in, fan_out), || d.sample(&mut self.rng));
        self.store.insert(format!("{name}.weight"), w);
        self.store.insert(format!("{name}.bias"), Mat::zeros((1, fan_out)));
    }

    fn layer_norm(&mut self, name: &str, dim: usize) {
        self.store.insert(format!("{name}.gamma"), Mat::ones((1, dim)));
        self.store.insert(format!("{name}.beta"), Mat::zeros((1, dim)));
    }

    fn block(&mut self, prefix: &str, width: usize, hidden: usize) {
        self.layer_norm(&format!("{prefix}.ln1"), width);
        for p in ["q", "k", "v", "out"] {
            self.linear(&format!("{prefix}.attn.{p}"), width, width);
        }
        self.layer_norm(&format!("{prefix}.ln2"), width);
        self.linear(&format!("{prefix}.mlp.fc1"), width, hidden);
        self.linear(&format!("{prefix}.mlp.fc2"), hidden, width);
    }
}

fn linear(g: &mut Graph, x: Var, name: &str) -> Var {
    let w = g.param_by_name(&format!("{name}.weight"));
    let b = g.param_by_name(&format!("{name}.bias"));
    g.linear(x, w, b)
}

fn layer_norm(g: &mut Graph, x: Var, name: &str) -> Var {
    let gamma = g.param_by_name(&format!("{name}.gamma"));
    let beta = g.param_by_name(&format!("{name}.beta"));
    g.layer_norm(x, gamma, beta)
}

fn attention_block(g: &mut Graph, prefix: &str, query_in: Var, kv_in: Var, spec: AttnSpec) -> Var {
    let q = linear(g, query_in, &format!("{prefix}.q"));
    let k = linear(g, kv_in, &format!("{prefix}.k"));
    let v = linear(g, kv_in, &format!("{prefix}.v"));
    let a = g.attention(q, k, v, spec);
    linear(g, a, &format!("{prefix}.out"))
}

fn transformer_block(g: &mut Graph, prefix: &str, x: Var, spec: AttnSpec) -> Var {
    let h = layer_norm(g, x, &format!("{prefix}.ln1"));
    let a = attention_block(g, &format!("{prefix}.attn"), h, h, spec);
    let x = g.add(x, a);
    let h = layer_norm(g, x, &format!("{prefix}.ln2"));
    let h = linear(g, h, &format!("{prefix}.mlp.fc1"));
    let h = g.gelu(h);
    let h = linear(g, h, &format!("{prefix}.mlp.fc2"));
    g.add(x, h)
}

impl Model {
    pub fn new(mut config: ModelConfig, tokenizer: TextTokenizer) -> Result<Self> {
        config.encoder.text_vocab = tokenizer.len();
        config.encoder.validate()?;
        config.head.validate()?;
        let e = &config.encoder;
        let h = &config.head;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let queries = {
            let d = Normal::new(0.0, 1.0).expect("valid std");
            Mat::from_shape_simple_fn((h.queries(), h.decoder_dim), || d.sample(&mut rng))
        };
        let mut init = Init {
            rng,
            store: &mut params,
        };
        let hidden = e.width * e.mlp_ratio;
        let patch_dim = e.patch_size * e.patch_size * 3;

        init.linear("image.patch", patch_dim, e.width);
        init.normal("image.cls", 1, e.width, 0.02);
        init.normal("image.pos", e.num_patches() + 1, e.width, 0.02);
        for i in 0..e.depth {
            init.block(&format!("image.block{i}"), e.width, hidden);
        }
        init.layer_norm("image.ln_final", e.width);

        init.normal("text.token_embed", e.text_vocab, e.width, 0.02);
        init.normal("text.pos", e.text_max_len + 1, e.width, 0.02);
        for i in 0..e.depth {
            init.block(&format!("text.block{i}"), e.width, hidden);
        }
        init.layer_norm("text.ln_final", e.width);

        let d = h.decoder_dim;
        init.linear("head.embed", e.width, d);
        init.layer_norm("head.ln1", d);
        for p in ["q", "k", "v", "out"] {
            init.linear(&format!("head.attn.{p}"), d, d);
        }
        init.layer_norm("head.ln2", d);
        init.linear("head.ffn.fc1", d, h.ffn_dim);
        init.linear("head.ffn.fc2", h.ffn_dim, d);
        init.layer_norm("head.ln3", d);
        {
            let k = h.queries();
            let a = (6.0 / (d + h.group_factor) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("valid range");
            let w = Mat::from_shape_simple_fn((k * d, h.group_factor), || dist.sample(&mut init.rng));
            init.store.insert("head.group.weight", w);
            let prior = (h.prior_prob / (1.0 - h.prior_prob)).ln();
            init.store
                .insert("head.group.bias", Mat::from_elem((1, h.num_classes), prior));
        }

        init.linear("proj.image", e.width, e.proj_dim);
        init.linear("proj.text", e.width, e.proj_dim);
        init.store.insert(
            TEMPERATURE_PARAM,
            Mat::from_elem((1, 1), 0.07f64.ln()),
        );

        Ok(Self {
            config,
            params,
            queries,
            tokenizer,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.head.num_classes
    }

    pub fn set_temperature(&mut self, t: f64) {
        let id = self.params.id(TEMPERATURE_PARAM).expect("temperature param");
        self.params.get_mut(id)[[0, 0]] = t.ln();
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let n = self.config.encoder.image_size;
        if image.dim() != (n, n, 3) {
            return Err(Error::Shape {
                context: "encode_image",
                expected: format!("{n}x{n}x3"),
                got: format!("{:?}", image.dim()),
            });
        }
        Ok(())
    }

    /// Flattened patches, one row per patch, `(batch * S) x (p*p*3)`, with
    /// pixels rescaled to `[-1, 1]`.
    fn patchify(&self, images: &[&Image]) -> Mat {
        let e = &self.config.encoder;
        let p = e.patch_size;
        let side = e.image_size / p;
        let s_count = side * side;
        let mut out = Mat::zeros((images.len() * s_count, p * p * 3));
        for (b, img) in images.iter().enumerate() {
            for pi in 0..side {
                for pj in 0..side {
                    let row = b * s_count + pi * side + pj;
                    let patch = img.slice(s![pi * p..(pi + 1) * p, pj * p..(pj + 1) * p, ..]);
                    for (c, v) in patch.iter().enumerate() {
                        out[[row, c]] = v * 2.0 - 1.0;
                    }
                }
            }
        }
        out
    }

    pub fn forward_images(&self, g: &mut Graph, images: &[&Image]) -> Result<ImageFeatures> {
        for img in images {
            self.check_image(img)?;
        }
        let e = &self.config.encoder;
        let batch = images.len();
        let s_count = e.num_patches();
        let seq = s_count + 1;

        let patches = g.constant(self.patchify(images));
        let x = linear(g, patches, "image.patch");
        let cls = g.param_by_name("image.cls");
        let mut index = Vec::with_capacity(batch * seq);
        for b in 0..batch {
            index.push((1, 0));
            index.extend((0..s_count).map(|s| (0, b * s_count + s)));
        }
        let tokens = g.gather(&[x, cls], index);
        let pos = g.param_by_name("image.pos");
        let pos = g.gather(&[pos], (0..batch).flat_map(|_| (0..seq).map(|t| (0, t))).collect());
        let mut x = g.add(tokens, pos);
        for i in 0..e.depth {
            let spec = AttnSpec {
                batch,
                heads: e.heads,
                q_len: seq,
                k_len: seq,
                key_lens: None,
            };
            x = transformer_block(g, &format!("image.block{i}"), x, spec);
        }
        let x = layer_norm(g, x, "image.ln_final");
        let global = g.rows(x, (0..batch).map(|b| b * seq));
        let spatial = g.rows(
            x,
            (0..batch).flat_map(|b| (1..seq).map(move |t| b * seq + t)),
        );
        Ok(ImageFeatures { global, spatial })
    }

    /// `ids` are full sequences starting with `[CLS]` (see
    /// [`TextTokenizer::encode`]). Returns `batch x width` class outputs.
    pub fn forward_texts(&self, g: &mut Graph, ids: &[Vec<usize>]) -> Result<Var> {
        let e = &self.config.encoder;
        let vocab = self.tokenizer.len();
        for seq in ids {
            if seq.is_empty() || seq.len() > e.text_max_len + 1 {
                return Err(Error::Shape {
                    context: "encode_text",
                    expected: format!("1..={} ids", e.text_max_len + 1),
                    got: seq.len().to_string(),
                });
            }
            if let Some(&id) = seq.iter().find(|&&id| id >= vocab) {
                return Err(Error::OutOfVocab { id, vocab });
            }
        }
        let batch = ids.len();
        let len = ids.iter().map(Vec::len).max().unwrap_or(1);
        let table = g.param_by_name("text.token_embed");
        let mut index = Vec::with_capacity(batch * len);
        for seq in ids {
            for t in 0..len {
                index.push((0, seq.get(t).copied().unwrap_or(tokenizer::PAD_ID)));
            }
        }
        let tokens = g.gather(&[table], index);
        let pos = g.param_by_name("text.pos");
        let pos = g.gather(&[pos], (0..batch).flat_map(|_| (0..len).map(|t| (0, t))).collect());
        let mut x = g.add(tokens, pos);
        let key_lens: Vec<usize> = ids.iter().map(Vec::len).collect();
        for i in 0..e.depth {
            let spec = AttnSpec {
                batch,
                heads: e.heads,
                q_len: len,
                k_len: len,
                key_lens: Some(key_lens.clone()),
            };
            x = transformer_block(g, &format!("text.block{i}"), x, spec);
        }
        let x = layer_norm(g, x, "text.ln_final");
        Ok(g.rows(x, (0..batch).map(|b| b * len)))
    }

    /// Recognition head over `(batch * S) x width` spatial tokens; returns
    /// `batch x C` logits.
    pub fn forward_head(&self, g: &mut Graph, spatial: Var, batch: usize) -> Result<Var> {
        if g.value(spatial).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("recognition head input"));
        }
        let rows = g.value(spatial).nrows();
        if batch == 0 || !rows.is_multiple_of(batch) || rows == 0 {
            return Err(Error::Shape {
                context: "recognition_head",
                expected: format!("a positive multiple of batch {batch} rows"),
                got: rows.to_string(),
            });
        }
        let s_count = rows / batch;
        let h = &self.config.head;
        let k = h.queries();

        let mem = linear(g, spatial, "head.embed");
        let mem = g.relu(mem);
        let q = g.constant(self.queries.clone());
        let q = g.gather(&[q], (0..batch).flat_map(|_| (0..k).map(|i| (0, i))).collect());
        let t = layer_norm(g, q, "head.ln1");
        let spec = AttnSpec {
            batch,
            heads: h.decoder_heads,
            q_len: k,
            k_len: s_count,
            key_lens: None,
        };
        let a = attention_block(g, "head.attn", t, mem, spec);
        let t = g.add(t, a);
        let t = layer_norm(g, t, "head.ln2");
        let f = linear(g, t, "head.ffn.fc1");
        let f = g.gelu(f);
        let f = linear(g, f, "head.ffn.fc2");
        let t = g.add(t, f);
        let t = layer_norm(g, t, "head.ln3");
        let w = g.param_by_name("head.group.weight");
        let b = g.param_by_name("head.group.bias");
        Ok(g.group_linear(t, w, b, k))
    }

    /// Projector followed by row-wise L2 normalization.
    pub fn forward_project(&self, g: &mut Graph, x: Var, modality: Modality) -> Result<Var> {
        let name = match modality {
            Modality::Image => "proj.image",
            Modality::Text => "proj.text",
        };
        let z = linear(g, x, name);
        g.l2_normalize(z)
    }

    pub fn encode_image(&self, image: &Image) -> Result<EncoderOutput> {
        let mut g = Graph::new(&self.params);
        let f = self.forward_images(&mut g, &[image])?;
        let out = EncoderOutput {
            global: g.value(f.global).row(0).to_vec(),
            spatial: g.value(f.spatial).clone(),
        };
        if out.global.iter().chain(out.spatial.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image encoder output"));
        }
        Ok(out)
    }

    /// Encode word ids (no `[CLS]`); longer inputs are truncated.
    pub fn encode_text(&self, word_ids: &[usize]) -> Result<TextEmbedding> {
        let max = self.config.encoder.text_max_len;
        if word_ids.len() > max {
            log::info!("truncating text from {} to {max} tokens", word_ids.len());
        }
        let seq: Vec<usize> = std::iter::once(tokenizer::CLS_ID)
            .chain(word_ids.iter().take(max).copied())
            .collect();
        let mut g = Graph::new(&self.params);
        let v = self.forward_texts(&mut g, &[seq])?;
        let global = g.value(v).row(0).to_vec();
        if global.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("text encoder output"));
        }
        Ok(TextEmbedding { global })
    }

    pub fn recognition_head(&self, spatial: &Mat) -> Result<TagLogits> {
        if spatial.nrows() == 0 {
            return Err(Error::invalid("recognition head needs at least one spatial token"));
        }
        let mut g = Graph::new(&self.params);
        let s = g.constant(spatial.clone());
        let logits = self.forward_head(&mut g, s, 1)?;
        Ok(TagLogits {
            values: g.value(logits).row(0).to_vec(),
        })
    }

    pub fn project_and_normalize(&self, v: &[f64], modality: Modality) -> Result<Vec<f64>> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("projector input"));
        }
        let mut g = Graph::new(&self.params);
        let x = g.constant(Mat::from_shape_vec((1, v.len()), v.to_vec()).map_err(|_| {
            Error::Shape {
                context: "project_and_normalize",
                expected: self.config.encoder.width.to_string(),
                got: v.len().to_string(),
            }
        })?);
        let z = self.forward_project(&mut g, x, modality)?;
        Ok(g.value(z).row(0).to_vec())
    }

    /// Unit image embeddings, one row per image.
    pub fn embed_images(&self, images: &[&Image]) -> Result<Mat> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut g = Graph::new(&self.params);
            let f = self.forward_images(&mut g, chunk)?;
            let z = self.forward_project(&mut g, f.global, Modality::Image)?;
            rows.extend(g.value(z).rows().into_iter().map(|r| r.to_owned()));
        }
        stack_rows(&rows, self.config.encoder.proj_dim)
    }

    /// Unit text embeddings, one row per text.
    pub fn embed_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<Mat> {
        let max = self.config.encoder.text_max_len;
        let mut rows = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(64) {
            let ids: Vec<Vec<usize>> = chunk
                .iter()
                .map(|t| self.tokenizer.encode(t.as_ref(), max))
                .collect();
            let mut g = Graph::new(&self.params);
            let x = self.forward_texts(&mut g, &ids)?;
            let z = self.forward_project(&mut g, x, Modality::Text)?;
            rows.extend(g.value(z).rows().into_iter().map(|r| r.to_owned()));
        }
        stack_rows(&rows, self.config.encoder.proj_dim)
    }

    /// Sigmoid tag probabilities, `batch x C`.
    pub fn predict_tags(&self, images: &[&Image]) -> Result<Mat> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut g = Graph::new(&self.params);
            let f = self.forward_images(&mut g, chunk)?;
            let logits = self.forward_head(&mut g, f.spatial, chunk.len())?;
            rows.extend(g.value(logits).rows().into_iter().map(|r| r.mapv(sigmoid)));
        }
        stack_rows(&rows, self.num_classes())
    }
}

fn stack_rows(rows: &[ndarray::Array1<f64>], cols: usize) -> Result<Mat> {
    let mut out = Mat::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}
