//! Image-caption corpora, the glyph fixture generator and augmentation.
//!
//! Corpus files are JSON lines:
//!
//! ```text
//! {"id": "r0", "image": "images/r0.png", "caption": "a red square", "tags": ["square"]}
//! ```
//!
//! `image` is resolved relative to the corpus file. `caption` defaults to the
//! empty string. `tags` (complete ground truth) and `label` (a single class
//! name for zero-shot evaluation) are optional.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::TagLexicon;
use crate::model::Image;
use crate::tagger::{TagVector, Tagger};

#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Pixels(Image),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTextRecord {
    pub id: String,
    pub image: ImageSource,
    pub caption: String,
    pub full_tags: Option<TagVector>,
    pub label: Option<String>,
}

impl ImageTextRecord {
    /// Pixels at `size x size`, resizing as needed.
    pub fn load_image(&self, size: usize) -> Result<Image> {
        match &self.image {
            ImageSource::Pixels(img) if img.dim() == (size, size, 3) => Ok(img.clone()),
            ImageSource::Pixels(img) => Ok(resize(img, size)),
            ImageSource::File(path) => read_image(path, size),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusLine {
    id: String,
    image: String,
    #[serde(default)]
    caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

/// Read a corpus file. With a lexicon, `tags` become `full_tags` and unknown
/// tag names are an error; without one they are ignored.
pub fn load_corpus(path: impl AsRef<Path>, lexicon: Option<&TagLexicon>) -> Result<Vec<ImageTextRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        if !seen.insert(parsed.id.clone()) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                msg: format!("duplicate id {:?}", parsed.id),
            });
        }
        let image_path = base.join(&parsed.image);
        if !image_path.is_file() {
            return Err(Error::Record {
                id: parsed.id,
                msg: format!("missing image file {}", image_path.display()),
            });
        }
        let full_tags = match (parsed.tags, lexicon) {
            (Some(names), Some(lex)) => {
                let mut v = TagVector::zeros(lex.len());
                for name in names {
                    let i = lex.index_of(&name).ok_or_else(|| Error::Record {
                        id: parsed.id.clone(),
                        msg: format!("tag {name:?} not in lexicon"),
                    })?;
                    v.set(i, true);
                }
                Some(v)
            }
            _ => None,
        };
        out.push(ImageTextRecord {
            id: parsed.id,
            image: ImageSource::File(image_path),
            caption: parsed.caption.unwrap_or_default(),
            full_tags,
            label: parsed.label,
        });
    }
    Ok(out)
}

/// Write records as PNG files under `dir/images` plus `dir/corpus.jsonl`.
/// Returns the corpus path.
pub fn write_corpus(
    records: &[ImageTextRecord],
    lexicon: Option<&TagLexicon>,
    dir: impl AsRef<Path>,
    image_size: usize,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let corpus = dir.join("corpus.jsonl");
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(&corpus).map_err(|e| Error::io(&corpus, e))?,
    );
    for r in records {
        let rel = format!("images/{}.png", r.id);
        write_png(&r.load_image(image_size)?, dir.join(&rel))?;
        let line = CorpusLine {
            id: r.id.clone(),
            image: rel,
            caption: Some(r.caption.clone()),
            tags: match (&r.full_tags, lexicon) {
                (Some(t), Some(lex)) => Some(t.indices().map(|i| lex.name(i).to_string()).collect()),
                _ => None,
            },
            label: r.label.clone(),
        };
        let json = serde_json::to_string(&line).expect("corpus line serializes");
        writeln!(file, "{json}").map_err(|e| Error::io(&corpus, e))?;
    }
    file.flush().map_err(|e| Error::io(&corpus, e))?;
    Ok(corpus)
}

pub fn read_image(path: &Path, size: usize) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = if img.width() as usize == size && img.height() as usize == size {
        img.to_rgb8()
    } else {
        img.resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
            .to_rgb8()
    };
    Ok(Image::from_shape_fn((size, size, 3), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

pub fn write_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, _) = img.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Bilinear resize of an in-memory image.
pub fn resize(img: &Image, size: usize) -> Image {
    let (h, w, _) = img.dim();
    Image::from_shape_fn((size, size, 3), |(y, x, c)| {
        let fy = ((y as f64 + 0.5) * h as f64 / size as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((x as f64 + 0.5) * w as f64 / size as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
        let top = img[[y0, x0, c]] * (1.0 - dx) + img[[y0, x1, c]] * dx;
        let bottom = img[[y1, x0, c]] * (1.0 - dx) + img[[y1, x1, c]] * dx;
        top * (1.0 - dy) + bottom * dy
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AugmentMode {
    Identity,
    #[default]
    FlipCrop,
}

impl std::str::FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "none" => Ok(Self::Identity),
            "flip-crop" | "flip_crop" => Ok(Self::FlipCrop),
            _ => Err(Error::invalid(format!("unknown augmentation {s:?}"))),
        }
    }
}

impl std::fmt::Display for AugmentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::FlipCrop => "flip-crop",
        })
    }
}

pub fn hflip(img: &Image) -> Image {
    let (_, w, _) = img.dim();
    Image::from_shape_fn(img.dim(), |(y, x, c)| img[[y, w - 1 - x, c]])
}

/// Horizontal flip with probability 1/2, then a random crop of the
/// edge-padded image (padding `size / 8`) back to the input size.
pub fn augment(img: &Image, seed: u64, mode: AugmentMode) -> Image {
    match mode {
        AugmentMode::Identity => img.clone(),
        AugmentMode::FlipCrop => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let flipped = if rng.random_bool(0.5) { hflip(img) } else { img.clone() };
            let (h, w, _) = img.dim();
            let pad = (h.min(w) / 8) as i64;
            let dy = rng.random_range(-pad..=pad);
            let dx = rng.random_range(-pad..=pad);
            Image::from_shape_fn(img.dim(), |(y, x, c)| {
                let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                flipped[[sy, sx, c]]
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub image_size: usize,
    /// Side of a glyph cell; use the encoder patch size to align glyphs with
    /// patches.
    pub cell_size: usize,
    pub min_concepts: usize,
    pub max_concepts: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            image_size: 64,
            cell_size: 8,
            min_concepts: 2,
            max_concepts: 4,
        }
    }
}

const SHAPES: usize = 6;
const TEMPLATES: [&str; 6] = [
    "a picture showing {}",
    "there is {} in this scene",
    "an image with {}",
    "{} on a dark background",
    "look at {}",
    "this shot contains {}",
];

/// Colour and shape assigned to lexicon class `i` of `c` classes.
fn glyph_style(i: usize, c: usize) -> (usize, [f64; 3]) {
    let groups = c.div_ceil(SHAPES).max(1);
    let hue = (i / SHAPES) as f64 / groups as f64 + 0.07 * (i % SHAPES) as f64 / SHAPES as f64;
    (i % SHAPES, hsv(hue.fract(), 0.85, 0.95))
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [k(5.0), k(3.0), k(1.0)]
}

fn inside(shape: usize, u: f64, v: f64) -> bool {
    // u, v in [-1, 1] relative to the glyph centre
    match shape {
        0 => u.abs() <= 0.8 && v.abs() <= 0.8,
        1 => u * u + v * v <= 0.8,
        2 => (-0.8..=0.8).contains(&v) && u.abs() <= (v + 0.8) / 1.6 * 0.9,
        3 => (u.abs() <= 0.3 && v.abs() <= 0.9) || (v.abs() <= 0.3 && u.abs() <= 0.9),
        4 => {
            let r = u * u + v * v;
            (0.3..=0.9).contains(&r)
        }
        _ => u.abs() + v.abs() <= 0.9,
    }
}

fn draw_glyph(img: &mut Image, cell: (usize, usize), cell_size: usize, shape: usize, rgb: [f64; 3]) {
    let half = cell_size as f64 / 2.0;
    for dy in 0..cell_size {
        for dx in 0..cell_size {
            let u = (dx as f64 + 0.5 - half) / half;
            let v = (dy as f64 + 0.5 - half) / half;
            if inside(shape, u, v) {
                for (c, val) in rgb.iter().enumerate() {
                    img[[cell.0 * cell_size + dy, cell.1 * cell_size + dx, c]] = *val;
                }
            }
        }
    }
}

fn distractor_words(tagger: &Tagger) -> Vec<&'static str> {
    ["photo", "view", "snapshot", "colourful", "nice", "simple", "small", "bright"]
        .into_iter()
        .filter(|w| tagger.extract(w).count() == 0)
        .collect()
}

/// Glyph images with captions that name a random `1 - missing_rate` share
/// (rounded up, at least one) of the rendered concepts.
pub fn synth_fixture(
    seed: u64,
    n_pairs: usize,
    lexicon: &TagLexicon,
    missing_rate: f64,
    opts: &SynthOptions,
) -> Result<Vec<ImageTextRecord>> {
    let c = lexicon.len();
    if c < 4 {
        return Err(Error::invalid(format!("synthetic fixture needs at least 4 tags, lexicon has {c}")));
    }
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::invalid("missing_rate must be in [0, 1)"));
    }
    if opts.cell_size < 4 || !opts.image_size.is_multiple_of(opts.cell_size) {
        return Err(Error::invalid("image_size must be a multiple of cell_size >= 4"));
    }
    let grid = opts.image_size / opts.cell_size;
    let max_k = opts.max_concepts.min(c).min(grid * grid);
    let min_k = opts.min_concepts.clamp(1, max_k);
    let tagger = Tagger::new(lexicon);
    let distractors = distractor_words(&tagger);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used: HashSet<Vec<usize>> = HashSet::new();
    let mut out = Vec::with_capacity(n_pairs);

    for i in 0..n_pairs {
        let mut concepts: Vec<usize> = Vec::new();
        for _attempt in 0..100 {
            let k = rng.random_range(min_k..=max_k);
            let mut pick: Vec<usize> = rand::seq::index::sample(&mut rng, c, k).into_vec();
            pick.sort_unstable();
            concepts = pick;
            if !used.contains(&concepts) {
                break;
            }
        }
        used.insert(concepts.clone());

        let mut img = Image::from_shape_fn((opts.image_size, opts.image_size, 3), |_| {
            0.08 + 0.04 * rng.random::<f64>()
        });
        let cells = rand::seq::index::sample(&mut rng, grid * grid, concepts.len()).into_vec();
        for (&concept, &cell) in concepts.iter().zip(&cells) {
            let (shape, rgb) = glyph_style(concept, c);
            draw_glyph(&mut img, (cell / grid, cell % grid), opts.cell_size, shape, rgb);
        }

        let k = concepts.len();
        let named_count = (((1.0 - missing_rate) * k as f64).ceil() as usize).clamp(1, k);
        let mut named = concepts.clone();
        named.shuffle(&mut rng);
        named.truncate(named_count);
        let phrase = named
            .iter()
            .map(|&j| format!("a {}", lexicon.name(j)))
            .collect::<Vec<_>>()
            .join(" and ");
        let mut caption = TEMPLATES.choose(&mut rng).expect("templates").replace("{}", &phrase);
        if let Some(w) = distractors.choose(&mut rng) {
            caption = format!("{w} {caption}");
        }

        out.push(ImageTextRecord {
            id: format!("s{seed}-{i:05}"),
            image: ImageSource::Pixels(img),
            caption,
            full_tags: Some(TagVector::from_indices(c, concepts)),
            label: None,
        });
    }
    Ok(out)
}

/// Bits present in `full_tags` but absent from the caption's extracted tags.
pub fn planted_missing(records: &[ImageTextRecord], lexicon: &TagLexicon) -> Vec<BTreeSet<usize>> {
    let tagger = Tagger::new(lexicon);
    records
        .iter()
        .map(|r| {
            let y = tagger.extract(&r.caption);
            r.full_tags
                .as_ref()
                .map(|f| f.indices().filter(|&i| !y.get(i)).collect())
                .unwrap_or_default()
        })
        .collect()
}

/// Concept names used by the command-line fixture generator.
pub const DEFAULT_CONCEPTS: [&str; 12] = [
    "apple", "ball", "bird", "boat", "car", "cat", "cup", "dog", "fish", "kite", "star", "tree",
];

/// A fixture together with a lexicon over `names` whose frequencies are the
/// caption document frequencies of the generated records (at least 1).
pub fn synth_with_lexicon<S: AsRef<str>>(
    names: &[S],
    seed: u64,
    n_pairs: usize,
    missing_rate: f64,
    opts: &SynthOptions,
) -> Result<(Vec<ImageTextRecord>, TagLexicon)> {
    let provisional = TagLexicon::from_counts(names.iter().map(|n| (n.as_ref(), 1u64)), vec![], names.len())?;
    let records = synth_fixture(seed, n_pairs, &provisional, missing_rate, opts)?;
    let tagger = Tagger::new(&provisional);
    let mut counts = vec![0u64; provisional.len()];
    for r in &records {
        for i in tagger.extract(&r.caption).indices() {
            counts[i] += 1;
        }
    }
    let lexicon = TagLexicon::from_counts(
        provisional
            .names()
            .into_iter()
            .zip(&counts)
            .map(|(n, &c)| (n, c.max(1))),
        vec![],
        names.len(),
    )?;
    Ok((records, lexicon))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> TagLexicon {
        let names = ["circle", "square", "star", "tree", "car", "dog", "hot dog", "kite"];
        TagLexicon::from_counts(names.iter().map(|n| (*n, 10u64)), vec![], 8).unwrap()
    }

    #[test]
    fn closure_at_zero_missing_rate() {
        let l = lex();
        let recs = synth_fixture(3, 40, &l, 0.0, &SynthOptions::default()).unwrap();
        let tagger = Tagger::new(&l);
        for r in &recs {
            assert_eq!(tagger.extract(&r.caption).bits(), r.full_tags.as_ref().unwrap().bits(), "{}", r.caption);
        }
        assert!(planted_missing(&recs, &l).iter().all(BTreeSet::is_empty));
    }

    #[test]
    fn deterministic_and_distinct_ids() {
        let l = lex();
        let a = synth_fixture(9, 64, &l, 0.5, &SynthOptions::default()).unwrap();
        let b = synth_fixture(9, 64, &l, 0.5, &SynthOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(planted_missing(&a, &l), planted_missing(&b, &l));
        let ids: HashSet<_> = a.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids.len(), 64);
        assert!(planted_missing(&a, &l).iter().any(|s| !s.is_empty()));
    }

    #[test]
    fn fixture_lexicon_keeps_indices() {
        let (recs, lex) = synth_with_lexicon(&DEFAULT_CONCEPTS, 2, 50, 0.0, &SynthOptions::default()).unwrap();
        let tagger = Tagger::new(&lex);
        for r in &recs {
            assert_eq!(tagger.extract(&r.caption).bits(), r.full_tags.as_ref().unwrap().bits());
        }
        let total: u64 = lex.entries().iter().map(|e| e.frequency).sum();
        assert!(total >= 100);
    }

    #[test]
    fn small_lexicon_rejected() {
        let l = TagLexicon::from_counts([("a", 1u64), ("b", 1), ("c", 1)], vec![], 3).unwrap();
        assert!(synth_fixture(0, 4, &l, 0.0, &SynthOptions::default()).is_err());
    }

    #[test]
    fn augmentation_contracts() {
        let img = Image::from_shape_fn((16, 16, 3), |(y, x, c)| ((y * 16 + x + c) % 7) as f64 / 6.0);
        assert_eq!(augment(&img, 1, AugmentMode::Identity), img);
        assert_eq!(hflip(&hflip(&img)), img);
        for s in 0..20 {
            let a = augment(&img, s, AugmentMode::FlipCrop);
            assert_eq!(a.dim(), img.dim());
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a, augment(&img, s, AugmentMode::FlipCrop));
        }
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let l = lex();
        let recs = synth_fixture(1, 2, &l, 0.0, &SynthOptions::default()).unwrap();
        let path = write_corpus(&recs, Some(&l), dir.path(), 64).unwrap();
        let back = load_corpus(&path, Some(&l)).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].id, recs[0].id);
        assert_eq!(back[1].full_tags, recs[1].full_tags);
        let px = back[0].load_image(64).unwrap();
        let orig = recs[0].load_image(64).unwrap();
        assert!(px.iter().zip(orig.iter()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-9));
        assert_eq!(back[0].load_image(32).unwrap().dim(), (32, 32, 3));
    }

    #[test]
    fn corpus_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, "{\"id\":\"x\",\"image\":\"nope.png\"}\n").unwrap();
        let e = load_corpus(&p, None).unwrap_err();
        assert!(e.to_string().contains("record x"), "{e}");
        std::fs::write(&p, "\n{not json\n").unwrap();
        let e = load_corpus(&p, None).unwrap_err();
        assert!(e.to_string().contains(":2:"), "{e}");
    }

    #[test]
    fn missing_caption_defaults_to_empty() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&Image::zeros((4, 4, 3)), dir.path().join("a.png")).unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, "{\"id\":\"a\",\"image\":\"a.png\"}\n").unwrap();
        assert_eq!(load_corpus(&p, None).unwrap()[0].caption, "");
    }
}
