//! C ABI over the `tagvlp` library.
//!
//! Conventions:
//! - every fallible function returns a [`TagvlpStatus`]; on failure a message
//!   is available from [`tagvlp_last_error`] on the same thread;
//! - objects are opaque handles created by `*_load`/`*_new` functions and
//!   released with the matching `*_free`;
//! - matrices are dense, row-major `double` buffers;
//! - boolean vectors are `uint8_t` buffers holding 0 or 1.
//!
//! The generated header is `include/tagvlp.h`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use tagvlp::checkpoint::Checkpoint;
use tagvlp::eval::{flop_estimate, multilabel_metrics};
use tagvlp::graph::Mat;
use tagvlp::lexicon::{class_weights, load_lexicon, ClassWeights, TagLexicon};
use tagvlp::losses::{itc_loss, itc_loss_grad, itc_similarities, mlr_loss, splc_correct, BatchReduction, Hyperparams, ItcTargets};
use tagvlp::model::{EncoderConfig, Image, Modality, Model, RecognitionHeadConfig};
use tagvlp::tagger::{TagVector, Tagger};
use tagvlp::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagvlpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    ShapeMismatch = 5,
    NonFinite = 6,
    DegenerateEmbedding = 7,
    Checkpoint = 8,
    MetricsUndefined = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Opaque tag lexicon.
pub struct TagvlpLexicon {
    lexicon: TagLexicon,
    tagger: Tagger,
}

/// Opaque trained model loaded from a checkpoint.
pub struct TagvlpModel {
    model: Model,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TagvlpMetrics {
    pub map: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or_: f64,
    pub of1: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TagvlpEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TagvlpHeadConfig {
    pub num_classes: usize,
    pub group_factor: usize,
    /// 0 selects `ceil(num_classes / group_factor)`.
    pub num_queries: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub ffn_dim: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TagvlpFlops {
    pub encoder_gflops: f64,
    pub head_gflops: f64,
    pub overhead_percent: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("no interior nul"));
}

fn status_of(e: &Error) -> TagvlpStatus {
    match e {
        Error::Parse { .. } | Error::Version { .. } | Error::DuplicateTag(_) | Error::Record { .. } => TagvlpStatus::Parse,
        Error::Io { .. } | Error::Image { .. } => TagvlpStatus::Io,
        Error::Shape { .. } | Error::OutOfVocab { .. } => TagvlpStatus::ShapeMismatch,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } => TagvlpStatus::NonFinite,
        Error::DegenerateEmbedding => TagvlpStatus::DegenerateEmbedding,
        Error::CheckpointMismatch(_) => TagvlpStatus::Checkpoint,
        Error::MetricsUndefined => TagvlpStatus::MetricsUndefined,
        _ => TagvlpStatus::InvalidArgument,
    }
}

struct Fail(TagvlpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail(status: TagvlpStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TagvlpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TagvlpStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            TagvlpStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(TagvlpStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(fail(TagvlpStatus::NullPointer, format!("{what} is null")));
    }
    if len < need {
        return Err(fail(
            TagvlpStatus::BufferTooSmall,
            format!("{what} holds {len} values, {need} needed"),
        ));
    }
    Ok(slice::from_raw_parts_mut(p, need))
}

unsafe fn reference<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| fail(TagvlpStatus::NullPointer, format!("{what} is null")))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(fail(TagvlpStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(TagvlpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> Mat {
    Mat::from_shape_vec((rows, cols), data.to_vec()).expect("length checked by caller")
}

/// Message for the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tagvlp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tagvlp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a lexicon file.
#[no_mangle]
pub unsafe extern "C" fn tagvlp_lexicon_load(path: *const c_char, out: *mut *mut TagvlpLexicon) -> TagvlpStatus {
    guard(|| {
        let path = string(path, "path")?;
        let out = out
            .as_mut()
            .ok_or_else(|| fail(TagvlpStatus::NullPointer, "out is null"))?;
        let lexicon = load_lexicon(path)?;
        let tagger = Tagger::new(&lexicon);
        *out = Box::into_raw(Box::new(TagvlpLexicon { lexicon, tagger }));
        Ok(())
    })
}

/// Build a lexicon from `n` names and their corpus frequencies.
#[no_mangle]
pub unsafe extern "C" fn tagvlp_lexicon_new(
    names: *const *const c_char,
    frequencies: *const u64,
    n: usize,
    out: *mut *mut TagvlpLexicon,
) -> TagvlpStatus {
    guard(|| {
        let names = input(names, n, "names")?;
        let freqs = input(frequencies, n, "frequencies")?;
        let out = out
            .as_mut()
            .ok_or_else(|| fail(TagvlpStatus::NullPointer, "out is null"))?;
        let names = names
            .iter()
            .map(|&p| string(p, "name"))
            .collect::<Result<Vec<_>, _>>()?;
        let lexicon = TagLexicon::from_counts(names.into_iter().zip(freqs.iter().copied()), vec![], n)?;
        let tagger = Tagger::new(&lexicon);
        *out = Box::into_raw(Box::new(TagvlpLexicon { lexicon, tagger }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn tagvlp_lexicon_free(lexicon: *mut TagvlpLexicon) {
    if !lexicon.is_null() {
        drop(Box::from_raw(lexicon));
    }
}

/// Number of tags (C).
#[no_mangle]
pub unsafe extern "C" fn tagvlp_lexicon_len(lexicon: *const TagvlpLexicon, out: *mut usize) -> TagvlpStatus {
    guard(|| {
        let lex = reference(lexicon, "lexicon")?;
        *output(out, 1, 1, "out")?.first_mut().expect("one slot") = lex.lexicon.len();
        Ok(())
    })
}

/// Copy the name of tag `index` into `buf` (NUL-terminated).
#[no_mangle]
pub unsafe extern "C" fn tagvlp_lexicon_name(
    lexicon: *const TagvlpLexicon,
    index: usize,
    buf: *mut c_char,
    buf_len: usize,
) -> TagvlpStatus {
    guard(|| {
        let lex = reference(lexicon, "lexicon")?;
        if index >= lex.lexicon.len() {
            return Err(fail(TagvlpStatus::InvalidArgument, format!("index {index} out of range")));
        }
        let name = lex.lexicon.name(index).as_bytes();
        let out = output(buf.cast::<u8>(), buf_len, name.len() + 1, "buf")?;
        out[..name.len()].copy_from_slice(name);
        out[name.len()] = 0;
        Ok(())
    })
}

/// Write the caption's tag vector (C bytes) into `out_bits`.
#[no_mangle]
pub unsafe extern "C" fn tagvlp_extract_tags(
    lexicon: *const TagvlpLexicon,
    text: *const c_char,
    out_bits: *mut u8,
    len: usize,
) -> TagvlpStatus {
    guard(|| {
        let lex = reference(lexicon, "lexicon")?;
        let text = string(text, "text")?;
        let out = output(out_bits, len, lex.lexicon.len(), "out_bits")?;
        for (o, &b) in out.iter_mut().zip(lex.tagger.extract(text).bits()) {
            *o = u8::from(b);
        }
        Ok(())
    })
}

/// Inverse square-root frequency weights with mean 1.
#[no_mangle]
pub unsafe extern "C" fn tagvlp_class_weights(lexicon: *const TagvlpLexicon, out: *mut f64, len: usize) -> TagvlpStatus {
    guard(|| {
        let lex = reference(lexicon, "lexicon")?;
        let w = class_weights(&lex.lexicon)?;
        output(out, len, w.len(), "out")?.copy_from_slice(w.as_slice());
        Ok(())
    })
}

fn tag_vector(bits: &[u8]) -> TagVector {
    TagVector::from_indices(bits.len(), bits.iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, _)| i))
}

/// Self-paced loss correction for one sample of `len` classes. Writes the
/// corrected targets and, if `terms_out` is non-null, the per-class log
/// terms.
#[no_mangle]
pub unsafe extern "C" fn tagvlp_splc_correct(
    probs: *const f64,
    targets: *const u8,
    len: usize,
    tau: f64,
    epoch: usize,
    changing_epoch: usize,
    corrected_out: *mut u8,
    terms_out: *mut f64,
) -> TagvlpStatus {
    guard(|| {
        let p = input(probs, len, "probs")?;
        let y = tag_vector(input(targets, len, "targets")?);
        let out = splc_correct(p, &y, tau, epoch, changing_epoch);
        for (o, &b) in output(corrected_out, len, len, "corrected_out")?
            .iter_mut()
            .zip(out.corrected.bits())
        {
            *o = u8::from(b);
        }
        if !terms_out.is_null() {
            output(terms_out, len, len, "terms_out")?.copy_from_slice(&out.terms);
        }
        Ok(())
    })
}

/// Batch-mean recognition loss over `batch x classes` logits. `weights` may
/// be null for uniform weights. `grad_out` (same shape as logits) and
/// `pseudo_count_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn tagvlp_mlr_loss(
    logits: *const f64,
    targets: *const u8,
    batch: usize,
    classes: usize,
    weights: *const f64,
    tau: f64,
    epoch: usize,
    changing_epoch: usize,
    loss_out: *mut f64,
    grad_out: *mut f64,
    pseudo_count_out: *mut usize,
) -> TagvlpStatus {
    guard(|| {
        let n = batch * classes;
        let x = matrix(input(logits, n, "logits")?, batch, classes);
        let y = input(targets, n, "targets")?;
        let targets: Vec<TagVector> = y.chunks(classes.max(1)).map(tag_vector).collect();
        let w = if weights.is_null() {
            ClassWeights::uniform(classes)
        } else {
            ClassWeights::from_vec(input(weights, classes, "weights")?.to_vec())?
        };
        let hyper = Hyperparams {
            tau,
            changing_epoch,
            ..Default::default()
        };
        hyper.validate()?;
        let out = mlr_loss(x.view(), &targets, &w, &hyper, epoch, BatchReduction::Mean)?;
        *output(loss_out, 1, 1, "loss_out")?.first_mut().expect("one slot") = out.report.loss;
        if !grad_out.is_null() {
            output(grad_out, n, n, "grad_out")?.copy_from_slice(out.grad.as_slice().expect("contiguous"));
        }
        if let Some(pc) = pseudo_count_out.as_mut() {
            *pc = out.report.pseudo_count;
        }
        Ok(())
    })
}

/// Contrastive loss for `m` matched pairs of unit embeddings of width
/// `dim`, with one-hot targets. Gradient buffers may be null.
#[no_mangle]
pub unsafe extern "C" fn tagvlp_itc_loss(
    z_img: *const f64,
    z_txt: *const f64,
    m: usize,
    dim: usize,
    temperature: f64,
    loss_out: *mut f64,
    grad_img_out: *mut f64,
    grad_txt_out: *mut f64,
) -> TagvlpStatus {
    guard(|| {
        let n = m * dim;
        let zi = matrix(input(z_img, n, "z_img")?, m, dim);
        let zt = matrix(input(z_txt, n, "z_txt")?, m, dim);
        let sim = itc_similarities(zi.view(), zt.view(), temperature, &ItcTargets::identity(m))?;
        *output(loss_out, 1, 1, "loss_out")?.first_mut().expect("one slot") = itc_loss(&sim);
        if !grad_img_out.is_null() || !grad_txt_out.is_null() {
            let g = itc_loss_grad(&sim, zi.view(), zt.view());
            if !grad_img_out.is_null() {
                output(grad_img_out, n, n, "grad_img_out")?.copy_from_slice(g.z_img.as_slice().expect("contiguous"));
            }
            if !grad_txt_out.is_null() {
                output(grad_txt_out, n, n, "grad_txt_out")?.copy_from_slice(g.z_txt.as_slice().expect("contiguous"));
            }
        }
        Ok(())
    })
}

/// Multi-label metrics for `n x c` probabilities and 0/1 ground truth, as
/// fractions.
#[no_mangle]
pub unsafe extern "C" fn tagvlp_multilabel_metrics(
    probs: *const f64,
    truth: *const u8,
    n: usize,
    c: usize,
    threshold: f64,
    out: *mut TagvlpMetrics,
) -> TagvlpStatus {
    guard(|| {
        let p = matrix(input(probs, n * c, "probs")?, n, c);
        let t: Vec<f64> = input(truth, n * c, "truth")?.iter().map(|&b| f64::from(b != 0)).collect();
        let m = multilabel_metrics(&p, &matrix(&t, n, c), threshold)?;
        let out = out
            .as_mut()
            .ok_or_else(|| fail(TagvlpStatus::NullPointer, "out is null"))?;
        *out = TagvlpMetrics {
            map: m.map,
            cp: m.cp,
            cr: m.cr,
            cf1: m.cf1,
            op: m.op,
            or_: m.or,
            of1: m.of1,
        };
        Ok(())
    })
}

/// Analytic compute estimate (multiply-accumulates, in G).
#[no_mangle]
pub unsafe extern "C" fn tagvlp_flop_estimate(
    encoder: *const TagvlpEncoderConfig,
    head: *const TagvlpHeadConfig,
    out: *mut TagvlpFlops,
) -> TagvlpStatus {
    guard(|| {
        let e = reference(encoder, "encoder")?;
        let h = reference(head, "head")?;
        let enc = EncoderConfig {
            image_size: e.image_size,
            patch_size: e.patch_size,
            width: e.width,
            depth: e.depth,
            heads: e.heads,
            mlp_ratio: e.mlp_ratio,
            ..EncoderConfig::default()
        };
        let head = RecognitionHeadConfig {
            num_classes: h.num_classes,
            group_factor: h.group_factor,
            num_queries: h.num_queries,
            decoder_dim: h.decoder_dim,
            decoder_heads: h.decoder_heads,
            ffn_dim: h.ffn_dim,
            ..RecognitionHeadConfig::default()
        };
        enc.validate()?;
        head.validate()?;
        let f = flop_estimate(&enc, &head);
        let out = out
            .as_mut()
            .ok_or_else(|| fail(TagvlpStatus::NullPointer, "out is null"))?;
        *out = TagvlpFlops {
            encoder_gflops: f.encoder_gflops,
            head_gflops: f.head_gflops,
            overhead_percent: f.overhead_percent,
        };
        Ok(())
    })
}

/// Load the model stored in a training checkpoint.
#[no_mangle]
pub unsafe extern "C" fn tagvlp_model_load(path: *const c_char, out: *mut *mut TagvlpModel) -> TagvlpStatus {
    guard(|| {
        let path = string(path, "path")?;
        let out = out
            .as_mut()
            .ok_or_else(|| fail(TagvlpStatus::NullPointer, "out is null"))?;
        let model = Checkpoint::load(path)?.model()?;
        *out = Box::into_raw(Box::new(TagvlpModel { model }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn tagvlp_model_free(model: *mut TagvlpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input side length, joint embedding width and number of tags.
#[no_mangle]
pub unsafe extern "C" fn tagvlp_model_dims(
    model: *const TagvlpModel,
    image_size: *mut usize,
    embed_dim: *mut usize,
    num_classes: *mut usize,
) -> TagvlpStatus {
    guard(|| {
        let m = &reference(model, "model")?.model;
        for (p, v) in [
            (image_size, m.config.encoder.image_size),
            (embed_dim, m.config.encoder.proj_dim),
            (num_classes, m.num_classes()),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

unsafe fn image_arg(pixels: *const f64, height: usize, width: usize) -> Result<Image, Fail> {
    let data = input(pixels, height * width * 3, "pixels")?;
    Ok(Image::from_shape_vec((height, width, 3), data.to_vec()).expect("length checked"))
}

/// Unit joint-space embedding of an `height x width x 3` image in `[0,1]`.
#[no_mangle]
pub unsafe extern "C" fn tagvlp_model_encode_image(
    model: *const TagvlpModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
    out_len: usize,
) -> TagvlpStatus {
    guard(|| {
        let m = &reference(model, "model")?.model;
        let img = image_arg(pixels, height, width)?;
        let z = m.embed_images(&[&img])?;
        output(out, out_len, z.ncols(), "out")?.copy_from_slice(z.as_slice().expect("contiguous"));
        Ok(())
    })
}

/// Unit joint-space embedding of a text.
#[no_mangle]
pub unsafe extern "C" fn tagvlp_model_encode_text(
    model: *const TagvlpModel,
    text: *const c_char,
    out: *mut f64,
    out_len: usize,
) -> TagvlpStatus {
    guard(|| {
        let m = &reference(model, "model")?.model;
        let text = string(text, "text")?;
        let z = m.embed_texts(&[text])?;
        output(out, out_len, z.ncols(), "out")?.copy_from_slice(z.as_slice().expect("contiguous"));
        Ok(())
    })
}

/// Tag probabilities for one image.
#[no_mangle]
pub unsafe extern "C" fn tagvlp_model_predict_tags(
    model: *const TagvlpModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
    out_len: usize,
) -> TagvlpStatus {
    guard(|| {
        let m = &reference(model, "model")?.model;
        let img = image_arg(pixels, height, width)?;
        let p = m.predict_tags(&[&img])?;
        output(out, out_len, p.ncols(), "out")?.copy_from_slice(p.as_slice().expect("contiguous"));
        Ok(())
    })
}

/// Project a width-dim encoder output into the joint space (0 = image
/// projector, 1 = text projector).
#[no_mangle]
pub unsafe extern "C" fn tagvlp_model_project(
    model: *const TagvlpModel,
    modality: u32,
    v: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> TagvlpStatus {
    guard(|| {
        let m = &reference(model, "model")?.model;
        let modality = match modality {
            0 => Modality::Image,
            1 => Modality::Text,
            other => return Err(fail(TagvlpStatus::InvalidArgument, format!("unknown modality {other}"))),
        };
        let z = m.project_and_normalize(input(v, len, "v")?, modality)?;
        output(out, out_len, z.len(), "out")?.copy_from_slice(&z);
        Ok(())
    })
}
