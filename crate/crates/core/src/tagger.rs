//! Caption normalization and tag matching.
//!
//! Captions are lowercased and split on anything that is not alphanumeric
//! (hyphens included). A trailing possessive `'s` is dropped, other
//! apostrophes are elided (`don't` -> `dont`). Each token is paired with its
//! noun lemma: plural folding by suffix rules plus a bundled table of
//! irregular forms. Verbs and adjectives pass through unchanged.
//!
//! Tags are matched on the lemma sequence. Single-word tags match any equal
//! lemma; multi-word tags match a contiguous run of lemmas (or of raw tokens
//! in strict mode). A single-word match that sits inside a matched
//! multi-word span is suppressed for that occurrence only.

use std::collections::HashMap;

use crate::lexicon::TagLexicon;

/// Irregular plural -> singular.
const IRREGULAR_PLURALS: &[(&str, &str)] = &[
    ("men", "man"),
    ("women", "woman"),
    ("children", "child"),
    ("feet", "foot"),
    ("teeth", "tooth"),
    ("geese", "goose"),
    ("mice", "mouse"),
    ("lice", "louse"),
    ("oxen", "ox"),
    ("dice", "die"),
    ("knives", "knife"),
    ("wives", "wife"),
    ("lives", "life"),
    ("leaves", "leaf"),
    ("loaves", "loaf"),
    ("halves", "half"),
    ("calves", "calf"),
    ("shelves", "shelf"),
    ("wolves", "wolf"),
    ("scarves", "scarf"),
    ("thieves", "thief"),
    ("elves", "elf"),
    ("selves", "self"),
    ("hooves", "hoof"),
    ("buses", "bus"),
    ("gases", "gas"),
    ("lenses", "lens"),
    ("potatoes", "potato"),
    ("tomatoes", "tomato"),
    ("heroes", "hero"),
    ("echoes", "echo"),
    ("mangoes", "mango"),
    ("volcanoes", "volcano"),
    ("cacti", "cactus"),
    ("fungi", "fungus"),
    ("octopi", "octopus"),
    ("indices", "index"),
    ("vertices", "vertex"),
    ("matrices", "matrix"),
    ("criteria", "criterion"),
    ("phenomena", "phenomenon"),
    ("data", "datum"),
    ("bacteria", "bacterium"),
    ("axes", "axis"),
    ("analyses", "analysis"),
    ("oases", "oasis"),
    ("crises", "crisis"),
];

/// Words ending in `s` that are already singular (or invariant).
const INVARIANT_S: &[&str] = &[
    "news",
    "series",
    "species",
    "lens",
    "canvas",
    "physics",
    "mathematics",
    "pants",
    "jeans",
    "shorts",
    "scissors",
    "trousers",
    "glasses",
    "binoculars",
    "christmas",
    "always",
    "perhaps",
    "sometimes",
    "afterwards",
    "towards",
    "besides",
    "whereas",
    "its",
    "this",
    "his",
    "hers",
    "ours",
    "yours",
    "theirs",
    "was",
    "has",
    "does",
    "goes",
    "across",
    "less",
    "chess",
    "bus",
    "gas",
    "plus",
    "yes",
    "tennis",
    "atlas",
    "iris",
    "walrus",
    "circus",
    "cactus",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedText {
    pub tokens: Vec<String>,
    pub lemmas: Vec<String>,
    pub joined: String,
}

/// Split `text` into lowercase word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_alphanumeric() {
            cur.push(c);
        } else if (c == '\'' || c == '\u{2019}') && !cur.is_empty() {
            let next = chars.get(i + 1).copied();
            let after = chars.get(i + 2).copied();
            if next == Some('s') && !after.is_some_and(char::is_alphanumeric) {
                tokens.push(std::mem::take(&mut cur));
                i += 1;
            } else if !next.is_some_and(char::is_alphanumeric) {
                tokens.push(std::mem::take(&mut cur));
            }
        } else if !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
        i += 1;
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

/// Noun lemma of a lowercase token.
pub fn lemmatize_noun(token: &str) -> String {
    if let Some((_, singular)) = IRREGULAR_PLURALS.iter().find(|(p, _)| *p == token) {
        return (*singular).to_string();
    }
    let n = token.chars().count();
    if n <= 3 || !token.ends_with('s') || INVARIANT_S.contains(&token) {
        return token.to_string();
    }
    if !token.chars().all(char::is_alphabetic) {
        return token.to_string();
    }
    if token.ends_with("ss") || token.ends_with("us") || token.ends_with("is") {
        return token.to_string();
    }
    if let Some(stem) = token.strip_suffix("ies") {
        if n > 4 {
            return format!("{stem}y");
        }
    }
    for suffix in ["sses", "ches", "shes", "xes", "zes"] {
        if token.ends_with(suffix) {
            return token[..token.len() - 2].to_string();
        }
    }
    token[..token.len() - 1].to_string()
}

pub fn normalize_text(text: &str) -> NormalizedText {
    let tokens = tokenize(text);
    let lemmas = tokens.iter().map(|t| lemmatize_noun(t)).collect();
    let joined = tokens.join(" ");
    NormalizedText {
        tokens,
        lemmas,
        joined,
    }
}

/// Canonical form of a tag name: lowercase, single-spaced word tokens.
pub fn normalize_name(name: &str) -> String {
    tokenize(name).join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagSource {
    Extracted,
    Corrected,
}

/// Binary label vector over the lexicon classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagVector {
    bits: Vec<bool>,
    pub source: TagSource,
}

impl TagVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            bits: vec![false; len],
            source: TagSource::Extracted,
        }
    }

    pub fn from_bits(bits: Vec<bool>, source: TagSource) -> Self {
        Self { bits, source }
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut v = Self::zeros(len);
        for i in indices {
            v.bits[i] = true;
        }
        v
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, value: bool) {
        self.bits[i] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    /// True if every bit set in `other` is also set here.
    pub fn is_superset_of(&self, other: &TagVector) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a || !b)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone)]
struct Pattern {
    lemmas: Vec<String>,
    raw: Vec<String>,
}

/// Reusable matcher over a fixed list of tag names.
#[derive(Debug, Clone)]
pub struct Tagger {
    patterns: Vec<Pattern>,
    by_first_lemma: HashMap<String, Vec<usize>>,
    by_first_raw: HashMap<String, Vec<usize>>,
    strict_compounds: bool,
}

impl Tagger {
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Self {
        let patterns: Vec<Pattern> = names
            .iter()
            .map(|n| {
                let norm = normalize_text(n.as_ref());
                Pattern {
                    lemmas: norm.lemmas,
                    raw: norm.tokens,
                }
            })
            .collect();
        let mut by_first_lemma: HashMap<String, Vec<usize>> = HashMap::new();
        let mut by_first_raw: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, p) in patterns.iter().enumerate() {
            if let Some(first) = p.lemmas.first() {
                by_first_lemma.entry(first.clone()).or_default().push(i);
            }
            if let Some(first) = p.raw.first() {
                by_first_raw.entry(first.clone()).or_default().push(i);
            }
        }
        Self {
            patterns,
            by_first_lemma,
            by_first_raw,
            strict_compounds: false,
        }
    }

    pub fn new(lexicon: &TagLexicon) -> Self {
        Self::from_names(&lexicon.names())
    }

    /// Match multi-word tags against raw tokens instead of lemmas.
    pub fn strict(mut self, strict: bool) -> Self {
        self.strict_compounds = strict;
        self
    }

    pub fn num_tags(&self) -> usize {
        self.patterns.len()
    }

    pub fn extract(&self, text: &str) -> TagVector {
        let norm = normalize_text(text);
        let mut out = TagVector::zeros(self.patterns.len());
        let n = norm.lemmas.len();

        let mut covered = vec![false; n];
        let mut singles: Vec<(usize, usize)> = Vec::new();
        for pos in 0..n {
            if let Some(cands) = self.by_first_lemma.get(&norm.lemmas[pos]) {
                for &idx in cands {
                    if self.patterns[idx].lemmas.len() == 1 {
                        singles.push((idx, pos));
                    } else if !self.strict_compounds
                        && seq_at(&norm.lemmas, pos, &self.patterns[idx].lemmas)
                    {
                        out.set(idx, true);
                        covered[pos..pos + self.patterns[idx].lemmas.len()].fill(true);
                    }
                }
            }
            if self.strict_compounds {
                if let Some(cands) = self.by_first_raw.get(&norm.tokens[pos]) {
                    for &idx in cands {
                        let raw = &self.patterns[idx].raw;
                        if raw.len() > 1 && seq_at(&norm.tokens, pos, raw) {
                            out.set(idx, true);
                            covered[pos..pos + raw.len()].fill(true);
                        }
                    }
                }
            }
        }
        for (idx, pos) in singles {
            if !covered[pos] {
                out.set(idx, true);
            }
        }
        out
    }

    pub fn extract_batch<S: AsRef<str>>(&self, captions: &[S]) -> Vec<TagVector> {
        captions.iter().map(|c| self.extract(c.as_ref())).collect()
    }
}

fn seq_at(haystack: &[String], pos: usize, needle: &[String]) -> bool {
    haystack.len() >= pos + needle.len() && haystack[pos..pos + needle.len()] == *needle
}

pub fn extract_tags(text: &str, lexicon: &TagLexicon) -> TagVector {
    Tagger::new(lexicon).extract(text)
}

pub fn batch_extract<S: AsRef<str>>(captions: &[S], lexicon: &TagLexicon) -> Vec<TagVector> {
    Tagger::new(lexicon).extract_batch(captions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &TagVector, tagger_names: &[&str]) -> Vec<String> {
        v.indices().map(|i| tagger_names[i].to_string()).collect()
    }

    #[test]
    fn normalizes_plurals() {
        let n = normalize_text("Two dogs running");
        assert_eq!(n.tokens, ["two", "dogs", "running"]);
        assert_eq!(n.lemmas, ["two", "dog", "running"]);
        assert_eq!(n.joined, "two dogs running");
    }

    #[test]
    fn empty_text() {
        let n = normalize_text("");
        assert!(n.tokens.is_empty() && n.lemmas.is_empty() && n.joined.is_empty());
    }

    #[test]
    fn hyphen_and_punctuation() {
        let n = normalize_text("hot-dogs!");
        assert_eq!(n.tokens, ["hot", "dogs"]);
        assert_eq!(n.lemmas, ["hot", "dog"]);
    }

    #[test]
    fn possessive_and_contraction() {
        assert_eq!(tokenize("the dog's bowl"), ["the", "dog", "bowl"]);
        assert_eq!(tokenize("don't stop"), ["dont", "stop"]);
        assert_eq!(tokenize("the dogs' bowls"), ["the", "dogs", "bowls"]);
    }

    #[test]
    fn lemma_rules() {
        for (w, l) in [
            ("cities", "city"),
            ("boxes", "box"),
            ("benches", "bench"),
            ("glasses", "glasses"),
            ("grass", "grass"),
            ("buses", "bus"),
            ("children", "child"),
            ("knives", "knife"),
            ("gloves", "glove"),
            ("swimming", "swimming"),
            ("bus", "bus"),
            ("ties", "tie"),
            ("shoes", "shoe"),
            ("4s", "4s"),
        ] {
            assert_eq!(lemmatize_noun(w), l, "{w}");
        }
    }

    #[test]
    fn matches_single_words() {
        let lex = ["car", "giraffe", "window", "zebra"];
        let t = Tagger::from_names(&lex);
        let v = t.extract("a giraffe and a zebra by the window");
        assert_eq!(names(&v, &lex), ["giraffe", "window", "zebra"]);
    }

    #[test]
    fn compound_suppresses_contained_word() {
        let lex = ["dog", "hot dog", "plate"];
        let t = Tagger::from_names(&lex);
        let v = t.extract("a hot dog on a plate");
        assert_eq!(names(&v, &lex), ["hot dog", "plate"]);
        let v = t.extract("a hot dog next to a dog");
        assert_eq!(names(&v, &lex), ["dog", "hot dog"]);
        let v = t.extract("two hot dogs");
        assert_eq!(names(&v, &lex), ["hot dog"]);
    }

    #[test]
    fn strict_mode_matches_raw_compounds() {
        let lex = ["dog", "hot dog"];
        let t = Tagger::from_names(&lex).strict(true);
        assert_eq!(names(&t.extract("two hot dogs"), &lex), ["dog"]);
        assert_eq!(names(&t.extract("a hot dog"), &lex), ["hot dog"]);
    }

    #[test]
    fn empty_caption_is_zero() {
        let t = Tagger::from_names(&["dog"]);
        assert_eq!(t.extract("").count(), 0);
        assert!(t.extract_batch::<&str>(&[]).is_empty());
    }

    #[test]
    fn superset() {
        let a = TagVector::from_indices(4, [0, 2]);
        let b = TagVector::from_indices(4, [0]);
        assert!(a.is_superset_of(&b));
        assert!(!b.is_superset_of(&a));
    }
}
