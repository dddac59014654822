//! Model forward on the autodiff tape. Mirrors the plain forwards through
//! recorded graph ops so one backward sweep reaches every parameter,
//! encoder included.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::AttnMask;
use crate::scalar::Scalar;
use crate::targets::{InputItem, InterleavedSample};
use crate::tensor::Tensor;
use crate::vocab::{self, BLANK, IGNORE};

use super::encoder::{encoder_mask, stack_chunks};
use super::{Model, ModelConfig};

#[derive(Debug, Clone, Copy)]
pub struct TapedLayer {
    pub attn_norm: NodeId,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub ffn_norm: NodeId,
    pub w_gate: NodeId,
    pub w_up: NodeId,
    pub w_down: NodeId,
}

/// Parameter leaves on a tape, one per model tensor.
#[derive(Debug, Clone)]
pub struct TapedParams {
    pub tok_embed: NodeId,
    pub enc_in_w: NodeId,
    pub enc_in_b: NodeId,
    pub enc_layers: Vec<TapedLayer>,
    pub enc_out_norm: NodeId,
    pub frame_proj_w: NodeId,
    pub frame_proj_b: NodeId,
    pub dec_layers: Vec<TapedLayer>,
    pub dec_out_norm: NodeId,
    pub out_proj: NodeId,
}

fn lease_layer<S: Scalar>(g: &mut Graph<S>, l: &super::LayerParams<S>) -> TapedLayer {
    let mut leaf = |t: &Tensor<S>| g.leaf(t.clone().with_grad());
    TapedLayer {
        attn_norm: leaf(&l.attn_norm),
        wq: leaf(&l.wq),
        wk: leaf(&l.wk),
        wv: leaf(&l.wv),
        wo: leaf(&l.wo),
        ffn_norm: leaf(&l.ffn_norm),
        w_gate: leaf(&l.w_gate),
        w_up: leaf(&l.w_up),
        w_down: leaf(&l.w_down),
    }
}

impl TapedParams {
    /// Copies every parameter onto the tape as a gradient-tracked leaf.
    /// Leaf order matches [`super::ModelParams::visit`].
    pub fn lease<S: Scalar>(model: &Model<S>, g: &mut Graph<S>) -> TapedParams {
        let p = &model.params;
        let mut leaf = |t: &Tensor<S>| g.leaf(t.clone().with_grad());
        let tok_embed = leaf(&p.tok_embed);
        let enc_in_w = leaf(&p.enc_in_w);
        let enc_in_b = leaf(&p.enc_in_b);
        let enc_layers = p.enc_layers.iter().map(|l| lease_layer(g, l)).collect();
        let enc_out_norm = g.leaf(p.enc_out_norm.clone().with_grad());
        let frame_proj_w = g.leaf(p.frame_proj_w.clone().with_grad());
        let frame_proj_b = g.leaf(p.frame_proj_b.clone().with_grad());
        let dec_layers = p.dec_layers.iter().map(|l| lease_layer(g, l)).collect();
        let dec_out_norm = g.leaf(p.dec_out_norm.clone().with_grad());
        let out_proj = g.leaf(p.out_proj.clone().with_grad());
        TapedParams {
            tok_embed,
            enc_in_w,
            enc_in_b,
            enc_layers,
            enc_out_norm,
            frame_proj_w,
            frame_proj_b,
            dec_layers,
            dec_out_norm,
            out_proj,
        }
    }

    /// Node ids in the same order as [`super::ModelParams::visit`].
    pub fn node_ids(&self) -> Vec<NodeId> {
        let layer = |l: &TapedLayer| {
            vec![
                l.attn_norm,
                l.wq,
                l.wk,
                l.wv,
                l.wo,
                l.ffn_norm,
                l.w_gate,
                l.w_up,
                l.w_down,
            ]
        };
        let mut ids = vec![self.tok_embed, self.enc_in_w, self.enc_in_b];
        for l in &self.enc_layers {
            ids.extend(layer(l));
        }
        ids.push(self.enc_out_norm);
        ids.extend([self.frame_proj_w, self.frame_proj_b]);
        for l in &self.dec_layers {
            ids.extend(layer(l));
        }
        ids.extend([self.dec_out_norm, self.out_proj]);
        ids
    }
}

fn layer_forward<S: Scalar>(
    g: &mut Graph<S>,
    l: &TapedLayer,
    x: NodeId,
    positions: &[usize],
    heads: usize,
    head_dim: usize,
    mask: AttnMask,
) -> Result<NodeId> {
    let normed = g.rms_norm(x, l.attn_norm)?;
    let q = g.matmul(normed, l.wq)?;
    let k = g.matmul(normed, l.wk)?;
    let v = g.matmul(normed, l.wv)?;
    let q = g.rope(q, positions, head_dim)?;
    let k = g.rope(k, positions, head_dim)?;
    let att = g.attention(q, k, v, heads, mask)?;
    let proj = g.matmul(att, l.wo)?;
    let x = g.add(x, proj)?;

    let normed = g.rms_norm(x, l.ffn_norm)?;
    let pre_gate = g.matmul(normed, l.w_gate)?;
    let gate = g.silu(pre_gate);
    let up = g.matmul(normed, l.w_up)?;
    let h = g.mul(gate, up)?;
    let down = g.matmul(h, l.w_down)?;
    g.add(x, down)
}

/// Encoder forward on the tape: raw frames -> per-chunk embedding node.
pub fn encode_on_tape<S: Scalar>(
    g: &mut Graph<S>,
    tp: &TapedParams,
    config: &ModelConfig,
    raw: &Tensor<S>,
) -> Result<NodeId> {
    let stacked = stack_chunks(raw, config)?;
    let chunks = stacked.shape[0];
    let positions: Vec<usize> = (0..chunks).collect();
    let heads = config.decoder_heads;
    let head_dim = config.encoder_head_dim();

    let input = g.constant(stacked);
    let projected = g.matmul(input, tp.enc_in_w)?;
    let mut x = g.add_row(projected, tp.enc_in_b)?;
    for (i, l) in tp.enc_layers.iter().enumerate() {
        x = layer_forward(g, l, x, &positions, heads, head_dim, encoder_mask(config, i))?;
    }
    let normed = g.rms_norm(x, tp.enc_out_norm)?;
    let projected = g.matmul(normed, tp.frame_proj_w)?;
    g.add_row(projected, tp.frame_proj_b)
}

/// Decoder forward on the tape over a teacher-forced item sequence.
/// Frame items pull rows from `enc_out` by chunk index; their inline
/// payloads are ignored here.
pub fn decode_on_tape<S: Scalar>(
    g: &mut Graph<S>,
    tp: &TapedParams,
    config: &ModelConfig,
    enc_out: NodeId,
    items: &[InputItem<S>],
) -> Result<NodeId> {
    if items.is_empty() {
        return Err(Error::Contract("decode_on_tape: empty item sequence".into()));
    }
    let chunks = g.shape(enc_out)[0];
    let mut sources = Vec::with_capacity(items.len());
    for item in items {
        let src = match item {
            InputItem::Bos => (tp.tok_embed, vocab::BOS as usize),
            InputItem::EosEmb => (tp.tok_embed, vocab::EOS as usize),
            InputItem::Token(id) => {
                if *id as usize >= config.vocab_size {
                    return Err(Error::Index {
                        what: "token id",
                        index: *id as usize,
                        len: config.vocab_size,
                        position: Some(sources.len()),
                    });
                }
                (tp.tok_embed, *id as usize)
            }
            InputItem::Frame { index, .. } => {
                if *index >= chunks {
                    return Err(Error::Index {
                        what: "frame chunk index",
                        index: *index,
                        len: chunks,
                        position: Some(sources.len()),
                    });
                }
                (enc_out, *index)
            }
        };
        sources.push(src);
    }
    let positions: Vec<usize> = (0..items.len()).collect();
    let mut x = g.stack_rows(&sources)?;
    for l in &tp.dec_layers {
        x = layer_forward(g, l, x, &positions, config.decoder_heads, config.head_dim(), AttnMask::Causal)?;
    }
    let normed = g.rms_norm(x, tp.dec_out_norm)?;
    g.matmul(normed, tp.out_proj)
}

/// Full loss of one sample: taped encoder + taped decoder + weighted
/// cross entropy. Returns the loss node and the sample's total target
/// weight (for pooling losses across a batch).
pub fn sample_loss_on_tape<S: Scalar>(
    g: &mut Graph<S>,
    tp: &TapedParams,
    config: &ModelConfig,
    raw: &Tensor<S>,
    sample: &InterleavedSample<S>,
    blank_weight: S,
) -> Result<(NodeId, S)> {
    let enc = encode_on_tape(g, tp, config, raw)?;
    let logits = decode_on_tape(g, tp, config, enc, &sample.inputs)?;
    let weights: Vec<S> = sample
        .targets
        .iter()
        .map(|&t| match t {
            IGNORE => S::zero(),
            BLANK => blank_weight,
            _ => S::one(),
        })
        .collect();
    let total: S = weights
        .iter()
        .zip(&sample.targets)
        .filter(|(_, &t)| t != IGNORE)
        .map(|(&w, _)| w)
        .sum();
    let loss = g.cross_entropy(logits, &sample.targets, Some(&weights))?;
    Ok((loss, total))
}
