//! Decoder forwards: full-sequence (teacher forcing, prefill) and
//! incremental single-item steps over per-layer KV caches.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::kernels::{self, AttnMask};
use crate::scalar::Scalar;
use crate::targets::InputItem;
use crate::tensor::Tensor;
use crate::vocab;

use super::{LayerParams, Model, MAX_CONTEXT};

/// Work counters for one decode session. `advances` counts decoder stack
/// evaluations (one per history item), `output_evals` counts output head
/// evaluations; the two are separated because prompt-style decoding pays
/// for the stack on every frame but for the head only when generating.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub advances: u64,
    pub output_evals: u64,
    pub advance_ns: u128,
    pub output_ns: u128,
}

#[derive(Debug, Clone)]
pub(super) struct LayerCache<S> {
    /// Rotated keys, row per position.
    k: Vec<S>,
    v: Vec<S>,
}

/// Incremental decode history: KV caches plus the last pre-norm hidden row.
#[derive(Debug, Clone)]
pub struct DecoderState<S> {
    caches: Vec<LayerCache<S>>,
    last_hidden: Vec<S>,
    len: usize,
    pub stats: StepStats,
}

impl<S: Scalar> DecoderState<S> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<S: Scalar> Model<S> {
    pub fn init_state(&self) -> DecoderState<S> {
        DecoderState {
            caches: (0..self.config.decoder_layers)
                .map(|_| LayerCache { k: Vec::new(), v: Vec::new() })
                .collect(),
            last_hidden: Vec::new(),
            len: 0,
            stats: StepStats::default(),
        }
    }

    /// Embedding row for one history item. Frames carry their own payload;
    /// everything else reads the token table.
    pub fn embed_item(&self, item: &InputItem<S>) -> Result<Vec<S>> {
        let d = self.config.decoder_dim;
        match item {
            InputItem::Bos => Ok(self.params.tok_embed.row(vocab::BOS as usize).to_vec()),
            InputItem::EosEmb => Ok(self.params.tok_embed.row(vocab::EOS as usize).to_vec()),
            InputItem::Token(id) => {
                let id = *id as usize;
                if id >= self.config.vocab_size {
                    return Err(Error::Index {
                        what: "token id",
                        index: id,
                        len: self.config.vocab_size,
                        position: None,
                    });
                }
                Ok(self.params.tok_embed.row(id).to_vec())
            }
            InputItem::Frame { embedding, .. } => {
                if embedding.len() != d {
                    return Err(Error::Shape {
                        op: "embed_item",
                        lhs: vec![embedding.len()],
                        rhs: vec![d],
                    });
                }
                Ok(embedding.clone())
            }
        }
    }

    /// Pushes one item through the decoder stack, extending the KV caches.
    /// Does not touch the output head.
    pub fn advance(&self, state: &mut DecoderState<S>, item: &InputItem<S>) -> Result<()> {
        if state.len >= MAX_CONTEXT {
            return Err(Error::ContextFull { len: state.len, max: MAX_CONTEXT });
        }
        let t0 = Instant::now();
        let d = self.config.decoder_dim;
        let heads = self.config.decoder_heads;
        let head_dim = self.config.head_dim();
        let pos = state.len;
        let mut x = self.embed_item(item)?;
        let mut normed = vec![S::zero(); d];

        for (layer, cache) in self.params.dec_layers.iter().zip(state.caches.iter_mut()) {
            kernels::rms_norm_row(&x, &layer.attn_norm.data, &mut normed);
            let mut q = vec![S::zero(); d];
            let mut k = vec![S::zero(); d];
            let mut v = vec![S::zero(); d];
            kernels::gemm_nn(false,&normed, &layer.wq.data, 1, d, d, &mut q);
            kernels::gemm_nn(false,&normed, &layer.wk.data, 1, d, d, &mut k);
            kernels::gemm_nn(false,&normed, &layer.wv.data, 1, d, d, &mut v);
            kernels::rope_row(&mut q, head_dim, pos, false);
            kernels::rope_row(&mut k, head_dim, pos, false);
            cache.k.extend_from_slice(&k);
            cache.v.extend_from_slice(&v);

            let len = pos + 1;
            let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
            let mut att = vec![S::zero(); d];
            let mut scores = vec![S::zero(); len];
            for h in 0..heads {
                let col = h * head_dim;
                for (j, s) in scores.iter_mut().enumerate() {
                    let krow = &cache.k[j * d + col..j * d + col + head_dim];
                    let mut dot = S::zero();
                    for (a, b) in q[col..col + head_dim].iter().zip(krow) {
                        dot += *a * *b;
                    }
                    *s = dot * scale;
                }
                kernels::softmax_row(&mut scores);
                for (j, s) in scores.iter().enumerate() {
                    let vrow = &cache.v[j * d + col..j * d + col + head_dim];
                    for (acc, b) in att[col..col + head_dim].iter_mut().zip(vrow) {
                        *acc += *s * *b;
                    }
                }
            }
            let mut attn_out = vec![S::zero(); d];
            kernels::gemm_nn(false,&att, &layer.wo.data, 1, d, d, &mut attn_out);
            for (xv, o) in x.iter_mut().zip(&attn_out) {
                *xv += *o;
            }

            ffn_row(layer, &mut x, &mut normed, self.config.decoder_ffn_dim);
        }

        state.last_hidden = x;
        state.len += 1;
        state.stats.advances += 1;
        state.stats.advance_ns += t0.elapsed().as_nanos();
        Ok(())
    }

    /// Output head over the newest history item.
    pub fn logits_head(&self, state: &mut DecoderState<S>) -> Result<Vec<S>> {
        if state.len == 0 {
            return Err(Error::Contract("logits_head on empty decode history".into()));
        }
        let t0 = Instant::now();
        let d = self.config.decoder_dim;
        let v = self.config.vocab_size;
        let mut normed = vec![S::zero(); d];
        kernels::rms_norm_row(&state.last_hidden, &self.params.dec_out_norm.data, &mut normed);
        let mut logits = vec![S::zero(); v];
        kernels::gemm_nn(false,&normed, &self.params.out_proj.data, 1, d, v, &mut logits);
        state.stats.output_evals += 1;
        state.stats.output_ns += t0.elapsed().as_nanos();
        Ok(logits)
    }

    /// advance + logits_head in one call.
    pub fn decoder_step(&self, state: &mut DecoderState<S>, item: &InputItem<S>) -> Result<Vec<S>> {
        self.advance(state, item)?;
        self.logits_head(state)
    }

    /// Runs a whole item sequence through the stack at once, filling the
    /// caches. Only valid on a fresh state; counts one advance per item.
    pub fn prefill(&self, state: &mut DecoderState<S>, items: &[InputItem<S>]) -> Result<()> {
        if state.len != 0 {
            return Err(Error::Contract("prefill requires an empty decode history".into()));
        }
        if items.is_empty() {
            return Ok(());
        }
        if items.len() > MAX_CONTEXT {
            return Err(Error::ContextFull { len: items.len(), max: MAX_CONTEXT });
        }
        let t0 = Instant::now();
        let d = self.config.decoder_dim;
        let len = items.len();
        let mut x = Vec::with_capacity(len * d);
        for item in items {
            x.extend_from_slice(&self.embed_item(item)?);
        }
        let hidden = run_layers(
            &self.params.dec_layers,
            x,
            len,
            d,
            self.config.decoder_heads,
            |_| AttnMask::Causal,
            Some(&mut state.caches),
        );
        state.last_hidden = hidden[(len - 1) * d..].to_vec();
        state.len = len;
        state.stats.advances += len as u64;
        state.stats.advance_ns += t0.elapsed().as_nanos();
        Ok(())
    }

    /// Full-sequence forward over a teacher-forced history; returns the
    /// logits matrix, one row per input position.
    pub fn forward_teacher_forced(&self, items: &[InputItem<S>]) -> Result<Tensor<S>> {
        if items.is_empty() {
            return Err(Error::Contract("teacher-forced forward needs at least one item".into()));
        }
        if items.len() > MAX_CONTEXT {
            return Err(Error::ContextFull { len: items.len(), max: MAX_CONTEXT });
        }
        let d = self.config.decoder_dim;
        let v = self.config.vocab_size;
        let len = items.len();
        let mut x = Vec::with_capacity(len * d);
        for item in items {
            x.extend_from_slice(&self.embed_item(item)?);
        }
        let hidden = run_layers(
            &self.params.dec_layers,
            x,
            len,
            d,
            self.config.decoder_heads,
            |_| AttnMask::Causal,
            None,
        );
        let mut normed = vec![S::zero(); len * d];
        for i in 0..len {
            let (src, dst) = (&hidden[i * d..(i + 1) * d], &mut normed[i * d..(i + 1) * d]);
            kernels::rms_norm_row(src, &self.params.dec_out_norm.data, dst);
        }
        let mut logits = vec![S::zero(); len * v];
        kernels::gemm_nn(false,&normed, &self.params.out_proj.data, len, d, v, &mut logits);
        Tensor::from_vec(vec![len, v], logits)
    }
}

/// Shared full-sequence transformer stack; `capture` stores rotated K and V
/// per layer for later incremental continuation.
pub(super) fn run_layers<S: Scalar>(
    layers: &[LayerParams<S>],
    mut x: Vec<S>,
    len: usize,
    dim: usize,
    heads: usize,
    mask_of: impl Fn(usize) -> AttnMask,
    mut capture: Option<&mut Vec<LayerCache<S>>>,
) -> Vec<S> {
    let head_dim = dim / heads;
    let mut normed = vec![S::zero(); len * dim];
    let mut row = vec![S::zero(); dim];
    for (li, layer) in layers.iter().enumerate() {
        for i in 0..len {
            kernels::rms_norm_row(&x[i * dim..(i + 1) * dim], &layer.attn_norm.data, &mut row);
            normed[i * dim..(i + 1) * dim].copy_from_slice(&row);
        }
        let mut q = vec![S::zero(); len * dim];
        let mut k = vec![S::zero(); len * dim];
        let mut v = vec![S::zero(); len * dim];
        kernels::gemm_nn(false,&normed, &layer.wq.data, len, dim, dim, &mut q);
        kernels::gemm_nn(false,&normed, &layer.wk.data, len, dim, dim, &mut k);
        kernels::gemm_nn(false,&normed, &layer.wv.data, len, dim, dim, &mut v);
        for i in 0..len {
            kernels::rope_row(&mut q[i * dim..(i + 1) * dim], head_dim, i, false);
            kernels::rope_row(&mut k[i * dim..(i + 1) * dim], head_dim, i, false);
        }
        if let Some(caches) = capture.as_deref_mut() {
            caches[li].k = k.clone();
            caches[li].v = v.clone();
        }
        let (att, _) = kernels::attention(&q, &k, &v, len, heads, head_dim, mask_of(li), false);
        let mut attn_out = vec![S::zero(); len * dim];
        kernels::gemm_nn(false,&att, &layer.wo.data, len, dim, dim, &mut attn_out);
        for (xv, o) in x.iter_mut().zip(&attn_out) {
            *xv += *o;
        }
        let ffn = layer.w_gate.shape[1];
        for i in 0..len {
            let mut slice = x[i * dim..(i + 1) * dim].to_vec();
            ffn_row(layer, &mut slice, &mut row, ffn);
            x[i * dim..(i + 1) * dim].copy_from_slice(&slice);
        }
    }
    x
}

/// Gated FFN residual applied to one row in place; `normed` is scratch.
fn ffn_row<S: Scalar>(layer: &LayerParams<S>, x: &mut [S], normed: &mut [S], ffn: usize) {
    let dim = x.len();
    kernels::rms_norm_row(x, &layer.ffn_norm.data, normed);
    let mut gate = vec![S::zero(); ffn];
    let mut up = vec![S::zero(); ffn];
    kernels::gemm_nn(false,normed, &layer.w_gate.data, 1, dim, ffn, &mut gate);
    kernels::gemm_nn(false,normed, &layer.w_up.data, 1, dim, ffn, &mut up);
    for (g, u) in gate.iter_mut().zip(&up) {
        *g = kernels::silu(*g) * *u;
    }
    let mut down = vec![S::zero(); dim];
    kernels::gemm_nn(false,&gate, &layer.w_down.data, 1, ffn, dim, &mut down);
    for (xv, o) in x.iter_mut().zip(&down) {
        *xv += *o;
    }
}
