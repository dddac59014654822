//! Audio side of the model: raw frames are grouped into fixed-duration
//! chunks, stacked, and run through a transformer whose first layer may look
//! a bounded number of chunks ahead. Output is one embedding per chunk in
//! the decoder's width.

use crate::error::{Error, Result};
use crate::kernels::{self, AttnMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::decoder::run_layers;
use super::{Model, ModelConfig};

/// Groups raw frames into chunk rows of `frames_per_chunk * raw_frame_dim`.
/// Frames left over after the last full chunk are folded into it: the final
/// group is split into `frames_per_chunk` bins and each bin averaged, so the
/// row width never changes and no audio is dropped.
pub fn stack_chunks<S: Scalar>(raw: &Tensor<S>, config: &ModelConfig) -> Result<Tensor<S>> {
    let fpc = config.frames_per_chunk();
    let rd = config.raw_frame_dim;
    if raw.shape.len() != 2 || raw.shape[1] != rd {
        return Err(Error::Shape {
            op: "stack_chunks",
            lhs: raw.shape.clone(),
            rhs: vec![0, rd],
        });
    }
    let n = raw.shape[0];
    let chunks = n / fpc;
    if chunks == 0 {
        return Err(Error::InputTooShort { frames: n, needed: fpc });
    }
    let width = fpc * rd;
    let mut out = vec![S::zero(); chunks * width];
    for c in 0..chunks {
        let start = c * fpc;
        let group = if c + 1 == chunks { n - start } else { fpc };
        let row = &mut out[c * width..(c + 1) * width];
        for bin in 0..fpc {
            let lo = start + bin * group / fpc;
            let hi = start + (bin + 1) * group / fpc;
            debug_assert!(hi > lo);
            let scale = S::from_usize(hi - lo).recip();
            for f in lo..hi {
                for (dst, &src) in row[bin * rd..(bin + 1) * rd].iter_mut().zip(raw.row(f)) {
                    *dst += src * scale;
                }
            }
        }
    }
    Tensor::from_vec(vec![chunks, width], out)
}

/// Mask schedule: all lookahead is spent in the first layer, deeper layers
/// are strictly causal, so total right context equals the configured bound.
pub(super) fn encoder_mask(config: &ModelConfig, layer: usize) -> AttnMask {
    if layer == 0 && config.encoder_right_context_chunks > 0 {
        AttnMask::CausalWithRight(config.encoder_right_context_chunks)
    } else {
        AttnMask::Causal
    }
}

impl<S: Scalar> Model<S> {
    /// Raw frame matrix -> one decoder-width embedding per chunk.
    pub fn encode_utterance(&self, raw: &Tensor<S>) -> Result<Tensor<S>> {
        let cfg = &self.config;
        let p = &self.params;
        let stacked = stack_chunks(raw, cfg)?;
        let chunks = stacked.shape[0];
        let e = cfg.encoder_dim;
        let d = cfg.decoder_dim;

        let mut x = vec![S::zero(); chunks * e];
        kernels::gemm_nn(false, &stacked.data, &p.enc_in_w.data, chunks, stacked.shape[1], e, &mut x);
        for row in x.chunks_exact_mut(e) {
            for (v, &b) in row.iter_mut().zip(&p.enc_in_b.data) {
                *v += b;
            }
        }

        let hidden = run_layers(
            &p.enc_layers,
            x,
            chunks,
            e,
            cfg.decoder_heads,
            |layer| encoder_mask(cfg, layer),
            None,
        );

        let mut normed = vec![S::zero(); chunks * e];
        let mut row = vec![S::zero(); e];
        for i in 0..chunks {
            kernels::rms_norm_row(&hidden[i * e..(i + 1) * e], &p.enc_out_norm.data, &mut row);
            normed[i * e..(i + 1) * e].copy_from_slice(&row);
        }
        let mut out = vec![S::zero(); chunks * d];
        kernels::gemm_nn(false, &normed, &p.frame_proj_w.data, chunks, e, d, &mut out);
        for row in out.chunks_exact_mut(d) {
            for (v, &b) in row.iter_mut().zip(&p.frame_proj_b.data) {
                *v += b;
            }
        }
        Tensor::from_vec(vec![chunks, d], out)
    }
}
