//! Analytic compute estimate for the image encoder and recognition head.
//!
//! One multiply-accumulate counts as one FLOP, the convention of common
//! FLOP counters for vision transformers (ViT-B/16 at 224x224 comes out at
//! 17.6 G). Only matrix products are counted: linear maps, `QK^T` and
//! attention-weighted values. Norms, softmax and activations are ignored.

use crate::model::{EncoderConfig, RecognitionHeadConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopEstimate {
    pub encoder_gflops: f64,
    pub head_gflops: f64,
    /// `head / encoder * 100`.
    pub overhead_percent: f64,
}

/// Image encoder MACs: patch embedding plus `depth` transformer blocks over
/// `S + 1` tokens.
pub fn encoder_macs(e: &EncoderConfig) -> f64 {
    let s = e.num_patches() as f64;
    let t = s + 1.0;
    let w = e.width as f64;
    let hidden = (e.width * e.mlp_ratio) as f64;
    let patch_dim = (e.patch_size * e.patch_size * 3) as f64;
    let patch = s * patch_dim * w;
    let qkv_out = 4.0 * t * w * w;
    let attn = 2.0 * t * t * w;
    let mlp = 2.0 * t * w * hidden;
    patch + e.depth as f64 * (qkv_out + attn + mlp)
}

/// Head MACs for `s` spatial tokens of width `width`.
pub fn head_macs(h: &RecognitionHeadConfig, s: usize, width: usize) -> f64 {
    let s = s as f64;
    let k = h.queries() as f64;
    let d = h.decoder_dim as f64;
    let embed = s * width as f64 * d;
    let kv = 2.0 * s * d * d;
    let q_out = 2.0 * k * d * d;
    let attn = 2.0 * k * s * d;
    let ffn = 2.0 * k * d * h.ffn_dim as f64;
    embed + kv + q_out + attn + ffn + group_macs(h)
}

/// The group projection term, independent of the spatial size.
pub fn group_macs(h: &RecognitionHeadConfig) -> f64 {
    (h.queries() * h.decoder_dim * h.group_factor) as f64
}

pub fn flop_estimate(e: &EncoderConfig, h: &RecognitionHeadConfig) -> FlopEstimate {
    let enc = encoder_macs(e);
    let head = head_macs(h, e.num_patches(), e.width);
    FlopEstimate {
        encoder_gflops: enc / 1e9,
        head_gflops: head / 1e9,
        overhead_percent: head / enc * 100.0,
    }
}
