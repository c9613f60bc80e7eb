//! Tag vocabulary construction, persistence and per-class weights.
//!
//! On disk a lexicon is a UTF-8 text file. The first line is a header:
//!
//! ```text
//! #tag-lexicon<TAB>version=1<TAB>source_vocab_size=<N><TAB>removed_top=<a>|<b>|...
//! ```
//!
//! followed by one `name<TAB>frequency` line per entry, sorted by name.
//! The line position (from 0) is the class index.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tagger::{normalize_name, Tagger};

pub const LEXICON_FORMAT_VERSION: u32 = 1;
const HEADER_TAG: &str = "#tag-lexicon";

/// A candidate tag from the base vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaseTag {
    pub name: String,
    /// Multi-word tags flagged with a hypernym are dropped during build.
    pub has_hypernym: bool,
}

impl From<&str> for BaseTag {
    fn from(name: &str) -> Self {
        Self {
            name: name.to_string(),
            has_hypernym: false,
        }
    }
}

impl BaseTag {
    /// Parse one base-vocabulary line: `name` or `name<TAB>hypernym`.
    pub fn parse_line(line: &str) -> Option<Self> {
        let mut parts = line.split('\t');
        let name = parts.next()?.trim();
        if name.is_empty() || name.starts_with('#') {
            return None;
        }
        let has_hypernym = parts.any(|p| p.trim().eq_ignore_ascii_case("hypernym"));
        Some(Self {
            name: name.to_string(),
            has_hypernym,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MinCountRule {
    /// Keep tags with `frequency >= min_count`.
    #[default]
    AtLeast,
    /// Keep tags with `frequency > min_count`.
    MoreThan,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildOptions {
    pub min_count: u64,
    pub rule: MinCountRule,
    pub remove_top_t: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            min_count: 6,
            rule: MinCountRule::AtLeast,
            remove_top_t: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconEntry {
    pub name: String,
    pub is_compound: bool,
    pub frequency: u64,
    pub class_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagLexicon {
    entries: Vec<LexiconEntry>,
    removed_top: Vec<String>,
    source_vocab_size: usize,
}

impl TagLexicon {
    /// Build directly from `(name, frequency)` pairs. Names are normalized
    /// and sorted; every invariant of a built lexicon is checked.
    pub fn from_counts<S: AsRef<str>>(
        counts: impl IntoIterator<Item = (S, u64)>,
        removed_top: Vec<String>,
        source_vocab_size: usize,
    ) -> Result<Self> {
        let mut named: Vec<(String, u64)> = Vec::new();
        let mut seen = HashSet::new();
        for (name, freq) in counts {
            let norm = normalize_name(name.as_ref());
            if norm.is_empty() {
                return Err(Error::invalid(format!("empty tag name {:?}", name.as_ref())));
            }
            if !seen.insert(norm.clone()) {
                return Err(Error::DuplicateTag(norm));
            }
            named.push((norm, freq));
        }
        if named.is_empty() {
            return Err(Error::EmptyLexicon);
        }
        if let Some(r) = removed_top.iter().find(|r| seen.contains(*r)) {
            return Err(Error::invalid(format!("{r:?} is both an entry and removed")));
        }
        named.sort_by(|a, b| a.0.cmp(&b.0));
        let entries = named
            .into_iter()
            .enumerate()
            .map(|(class_index, (name, frequency))| LexiconEntry {
                is_compound: name.contains(' '),
                name,
                frequency,
                class_index,
            })
            .collect();
        Ok(Self {
            entries,
            removed_top,
            source_vocab_size,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn removed_top(&self) -> &[String] {
        &self.removed_top
    }

    pub fn source_vocab_size(&self) -> usize {
        self.source_vocab_size
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn name(&self, class_index: usize) -> &str {
        &self.entries[class_index].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let norm = normalize_name(name);
        self.entries
            .binary_search_by(|e| e.name.as_str().cmp(norm.as_str()))
            .ok()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    /// Names of the `t` most frequent entries (ties alphabetical).
    pub fn top_frequent(&self, t: usize) -> Vec<String> {
        let mut order: Vec<&LexiconEntry> = self.entries.iter().collect();
        order.sort_by(|a, b| b.frequency.cmp(&a.frequency).then(a.name.cmp(&b.name)));
        order.into_iter().take(t).map(|e| e.name.clone()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{HEADER_TAG}\tversion={LEXICON_FORMAT_VERSION}\tsource_vocab_size={}\tremoved_top={}",
            self.source_vocab_size,
            self.removed_top.join("|")
        );
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}", e.name, e.frequency);
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| perr(1, "missing header".into()))?;
        let mut fields = header.split('\t');
        if fields.next() != Some(HEADER_TAG) {
            return Err(perr(1, format!("expected header starting with {HEADER_TAG}")));
        }
        let mut version = None;
        let mut source_vocab_size = 0usize;
        let mut removed_top = Vec::new();
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| perr(1, format!("malformed header field {field:?}")))?;
            match key {
                "version" => version = Some(value.to_string()),
                "source_vocab_size" => {
                    source_vocab_size = value
                        .parse()
                        .map_err(|_| perr(1, format!("bad source_vocab_size {value:?}")))?
                }
                "removed_top" => {
                    removed_top = value
                        .split('|')
                        .filter(|s| !s.is_empty())
                        .map(str::to_string)
                        .collect()
                }
                _ => return Err(perr(1, format!("unknown header field {key:?}"))),
            }
        }
        let version = version.ok_or_else(|| perr(1, "missing version".into()))?;
        if version != LEXICON_FORMAT_VERSION.to_string() {
            return Err(Error::Version {
                what: "lexicon",
                found: version,
                expected: LEXICON_FORMAT_VERSION.to_string(),
            });
        }

        let removed: HashSet<&str> = removed_top.iter().map(String::as_str).collect();
        let mut entries: Vec<LexiconEntry> = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let (name, freq) = line
                .split_once('\t')
                .ok_or_else(|| perr(lineno, "expected name<TAB>frequency".into()))?;
            let frequency: u64 = freq
                .parse()
                .map_err(|_| perr(lineno, format!("invalid frequency {freq:?}")))?;
            if name.is_empty() || normalize_name(name) != name {
                return Err(perr(lineno, format!("tag name {name:?} is not normalized")));
            }
            if let Some(prev) = entries.last() {
                match prev.name.as_str().cmp(name) {
                    std::cmp::Ordering::Equal => {
                        return Err(perr(lineno, format!("duplicate tag {name:?}")))
                    }
                    std::cmp::Ordering::Greater => {
                        return Err(perr(lineno, format!("tag {name:?} out of order")))
                    }
                    std::cmp::Ordering::Less => {}
                }
            }
            if removed.contains(name) {
                return Err(perr(lineno, format!("tag {name:?} also listed as removed")));
            }
            entries.push(LexiconEntry {
                is_compound: name.contains(' '),
                name: name.to_string(),
                frequency,
                class_index: entries.len(),
            });
        }
        if entries.is_empty() {
            return Err(Error::EmptyLexicon);
        }
        Ok(Self {
            entries,
            removed_top,
            source_vocab_size,
        })
    }
}

pub fn build_lexicon<S: AsRef<str>>(
    captions: &[S],
    base_vocab: &[BaseTag],
    opts: &BuildOptions,
) -> Result<TagLexicon> {
    if base_vocab.is_empty() {
        return Err(Error::invalid("base vocabulary is empty"));
    }
    if opts.min_count < 1 {
        return Err(Error::invalid("min_count must be >= 1"));
    }
    let mut seen = HashSet::new();
    let mut candidates: Vec<String> = Vec::new();
    for tag in base_vocab {
        let norm = normalize_name(&tag.name);
        if norm.is_empty() {
            return Err(Error::invalid(format!("empty tag name {:?}", tag.name)));
        }
        if !seen.insert(norm.clone()) {
            return Err(Error::DuplicateTag(norm));
        }
        if norm.contains(' ') && tag.has_hypernym {
            continue;
        }
        candidates.push(norm);
    }

    let tagger = Tagger::from_names(&candidates);
    let mut freq = vec![0u64; candidates.len()];
    for caption in captions {
        for i in tagger.extract(caption.as_ref()).indices() {
            freq[i] += 1;
        }
    }

    let keep = |f: u64| match opts.rule {
        MinCountRule::AtLeast => f >= opts.min_count,
        MinCountRule::MoreThan => f > opts.min_count,
    };
    let mut survivors: Vec<(String, u64)> = candidates
        .into_iter()
        .zip(freq)
        .filter(|&(_, f)| keep(f))
        .collect();
    survivors.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let cut = opts.remove_top_t.min(survivors.len());
    let removed_top: Vec<String> = survivors.drain(..cut).map(|(n, _)| n).collect();
    if survivors.is_empty() {
        return Err(Error::EmptyLexicon);
    }
    TagLexicon::from_counts(survivors, removed_top, base_vocab.len())
}

pub fn save_lexicon(lexicon: &TagLexicon, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, lexicon.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_lexicon(path: impl AsRef<Path>) -> Result<TagLexicon> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TagLexicon::parse(&text, &path.display().to_string())
}

/// Per-class re-weighting coefficients, `w_i ∝ 1/sqrt(f_i)` scaled to mean 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(c: usize) -> Self {
        Self {
            weights: vec![1.0; c],
        }
    }

    pub fn from_frequencies(freqs: &[u64]) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::EmptyLexicon);
        }
        if let Some(i) = freqs.iter().position(|&f| f == 0) {
            return Err(Error::invalid(format!("class {i} has zero frequency")));
        }
        let inv: Vec<f64> = freqs.iter().map(|&f| 1.0 / (f as f64).sqrt()).collect();
        let k = freqs.len() as f64 / inv.iter().sum::<f64>();
        Ok(Self {
            weights: inv.into_iter().map(|w| w * k).collect(),
        })
    }

    /// Arbitrary positive weights, used as-is.
    pub fn from_vec(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("class weights must be finite and positive"));
        }
        Ok(Self { weights })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn class_weights(lexicon: &TagLexicon) -> Result<ClassWeights> {
    let freqs: Vec<u64> = lexicon.entries().iter().map(|e| e.frequency).collect();
    ClassWeights::from_frequencies(&freqs)
}

/// Union of the lexicon's own removed tags and its `t` most frequent entries.
pub fn exclusion_set(lexicon: &TagLexicon, t: usize) -> BTreeSet<String> {
    lexicon
        .removed_top()
        .iter()
        .cloned()
        .chain(lexicon.top_frequent(t))
        .collect()
}

/// Frequencies keyed by name; handy for reports.
pub fn frequency_map(lexicon: &TagLexicon) -> HashMap<String, u64> {
    lexicon
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.frequency))
        .collect()
}
