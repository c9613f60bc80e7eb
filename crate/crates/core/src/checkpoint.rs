//! Binary checkpoint archive.
//!
//! Layout (little endian):
//!
//! ```text
//! b"TAGVLPCK"  u32 version  u64 header_len  header_json  f64 data...
//! ```
//!
//! The JSON header holds the training config (as `key=value` text), the step
//! counter, optimizer step count, text vocabulary, lexicon text, a data
//! fingerprint, persisted pseudo labels and the name and shape of every
//! tensor. The data section is
//! every parameter in header order, then the first optimizer moments in the
//! same order, then the second moments, then the fixed head queries.
//! Parameter names are listed in [`crate::model`].

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::{Mat, ParamStore};
use crate::lexicon::TagLexicon;
use crate::model::{Model, ModelConfig, TextTokenizer};

const MAGIC: &[u8; 8] = b"TAGVLPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Optimizer steps completed.
    pub step: usize,
    pub adam_t: u64,
    pub vocab: Vec<String>,
    pub lexicon: TagLexicon,
    pub data_fingerprint: String,
    pub params: Vec<(String, Mat)>,
    pub adam_m: Vec<Mat>,
    pub adam_v: Vec<Mat>,
    pub queries: Mat,
    /// Per training record, the pseudo positives kept as targets (empty
    /// unless `persist_pseudo` is on).
    pub pseudo_labels: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    step: usize,
    adam_t: u64,
    vocab: Vec<String>,
    lexicon: String,
    data_fingerprint: String,
    tensors: Vec<(String, usize, usize)>,
    queries: (usize, usize),
    #[serde(default)]
    pseudo_labels: Vec<Vec<usize>>,
}

fn write_mat(out: &mut Vec<u8>, m: &Mat) {
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_mat(data: &[u8], pos: &mut usize, rows: usize, cols: usize) -> Result<Mat> {
    let n = rows * cols;
    let end = *pos + n * 8;
    if end > data.len() {
        return Err(Error::CheckpointMismatch("truncated tensor data".into()));
    }
    let vals: Vec<f64> = data[*pos..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    *pos = end;
    Ok(Mat::from_shape_vec((rows, cols), vals).expect("length matches shape"))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.to_text(),
            step: self.step,
            adam_t: self.adam_t,
            vocab: self.vocab.clone(),
            lexicon: self.lexicon.to_text(),
            data_fingerprint: self.data_fingerprint.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, m)| (n.clone(), m.nrows(), m.ncols()))
                .collect(),
            queries: self.queries.dim(),
            pseudo_labels: self.pseudo_labels.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &self.params {
            write_mat(&mut out, m);
        }
        for m in self.adam_m.iter().chain(&self.adam_v) {
            write_mat(&mut out, m);
        }
        write_mat(&mut out, &self.queries);
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() < 20 || &data[..8] != MAGIC {
            return Err(Error::CheckpointMismatch("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(data[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version.to_string(),
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        let hlen = u64::from_le_bytes(data[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| Error::CheckpointMismatch("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&data[20..hend])
            .map_err(|e| Error::CheckpointMismatch(format!("bad header: {e}")))?;
        let mut config = TrainConfig::parse_text(&header.config, "checkpoint config")?;
        config.encoder.text_vocab = TextTokenizer::from_vocab(header.vocab.clone())?.len();
        let lexicon = TagLexicon::parse(&header.lexicon, "checkpoint lexicon")?;
        let mut pos = hend;
        let mut params = Vec::with_capacity(header.tensors.len());
        for (name, r, c) in &header.tensors {
            params.push((name.clone(), read_mat(data, &mut pos, *r, *c)?));
        }
        let mut moments = Vec::with_capacity(2 * params.len());
        for _ in 0..2 {
            for (_, r, c) in &header.tensors {
                moments.push(read_mat(data, &mut pos, *r, *c)?);
            }
        }
        let adam_v = moments.split_off(params.len());
        let queries = read_mat(data, &mut pos, header.queries.0, header.queries.1)?;
        if pos != data.len() {
            return Err(Error::CheckpointMismatch("trailing bytes".into()));
        }
        Ok(Self {
            config,
            step: header.step,
            adam_t: header.adam_t,
            vocab: header.vocab,
            lexicon,
            data_fingerprint: header.data_fingerprint,
            params,
            adam_m: moments,
            adam_v,
            queries,
            pseudo_labels: header.pseudo_labels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Rebuild the model, checking tensor names and shapes against a fresh
    /// model built from the stored config.
    pub fn model(&self) -> Result<Model> {
        let tokenizer = TextTokenizer::from_vocab(self.vocab.clone())?;
        let mut encoder = self.config.encoder.clone();
        encoder.text_vocab = tokenizer.len();
        let config = ModelConfig {
            encoder,
            head: self.config.head.clone(),
            init_seed: self.config.seed,
        };
        if config.head.num_classes != self.lexicon.len() {
            return Err(Error::CheckpointMismatch(format!(
                "head has {} classes but lexicon has {}",
                config.head.num_classes,
                self.lexicon.len()
            )));
        }
        let template = Model::new(config.clone(), tokenizer.clone())?;
        let mut params = ParamStore::new();
        let expected: Vec<(&str, (usize, usize))> =
            template.params.iter().map(|(_, n, m)| (n, m.dim())).collect();
        let got: Vec<(&str, (usize, usize))> =
            self.params.iter().map(|(n, m)| (n.as_str(), m.dim())).collect();
        if expected != got {
            return Err(Error::CheckpointMismatch(
                "tensor names or shapes differ from the stored config".into(),
            ));
        }
        if self.queries.dim() != template.queries.dim() {
            return Err(Error::CheckpointMismatch("query buffer shape".into()));
        }
        for (n, m) in &self.params {
            params.insert(n.clone(), m.clone());
        }
        Ok(Model {
            config,
            params,
            queries: self.queries.clone(),
            tokenizer,
        })
    }
}
