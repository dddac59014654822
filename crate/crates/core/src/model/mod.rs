//! The streaming transducer model.
//!
//! A small chunked audio encoder feeds frame embeddings into a pre-norm
//! transformer decoder (RMS norm, rotary positions, gated FFN). The decoder
//! runs either over full teacher-forced sequences or incrementally with
//! per-layer KV caches.

pub mod checkpoint;
mod decoder;
mod encoder;
pub mod taped;

pub use decoder::{DecoderState, StepStats};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Hard cap on decode history length.
pub const MAX_CONTEXT: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Includes the three control tokens, so at least 4.
    pub vocab_size: usize,
    pub decoder_layers: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub decoder_ffn_dim: usize,
    pub encoder_layers: usize,
    pub encoder_dim: usize,
    pub raw_frame_dim: usize,
    pub raw_frame_ms: u32,
    pub chunk_ms: u32,
    /// How many future chunks the encoder may see, in total across layers.
    pub encoder_right_context_chunks: usize,
    /// Safety cap on tokens emitted per chunk during decoding.
    pub max_emissions_per_chunk: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 23,
            decoder_layers: 2,
            decoder_dim: 64,
            decoder_heads: 4,
            decoder_ffn_dim: 256,
            encoder_layers: 2,
            encoder_dim: 64,
            raw_frame_dim: 8,
            raw_frame_ms: 20,
            chunk_ms: 240,
            encoder_right_context_chunks: 4,
            max_emissions_per_chunk: 10,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 4 {
            return fail(format!(
                "vocab_size {} < 4 (three control tokens plus at least one word)",
                self.vocab_size
            ));
        }
        if self.raw_frame_ms == 0 || self.chunk_ms == 0 || self.chunk_ms % self.raw_frame_ms != 0 {
            return fail(format!(
                "chunk_ms {} must be a positive multiple of raw_frame_ms {}",
                self.chunk_ms, self.raw_frame_ms
            ));
        }
        if self.decoder_layers == 0 || self.encoder_layers == 0 {
            return fail("need at least one encoder and one decoder layer".into());
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return fail(format!(
                "decoder_dim {} not divisible by decoder_heads {}",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!(
                "head dimension {} must be even for rotary positions",
                self.head_dim()
            ));
        }
        // The encoder reuses the decoder head count.
        if self.encoder_dim % self.decoder_heads != 0 || self.encoder_head_dim() % 2 != 0 {
            return fail(format!(
                "encoder_dim {} must split into {} even-sized heads",
                self.encoder_dim, self.decoder_heads
            ));
        }
        if self.raw_frame_dim == 0 || self.decoder_ffn_dim == 0 {
            return fail("raw_frame_dim and decoder_ffn_dim must be positive".into());
        }
        if self.max_emissions_per_chunk == 0 {
            return fail("max_emissions_per_chunk must be positive".into());
        }
        Ok(())
    }

    pub fn frames_per_chunk(&self) -> usize {
        (self.chunk_ms / self.raw_frame_ms) as usize
    }

    pub fn head_dim(&self) -> usize {
        self.decoder_dim / self.decoder_heads
    }

    pub fn encoder_head_dim(&self) -> usize {
        self.encoder_dim / self.decoder_heads
    }

    pub fn encoder_ffn_dim(&self) -> usize {
        4 * self.encoder_dim
    }

    /// Closed-form parameter count:
    /// embed V*d + encoder input (s*e + e) + per encoder layer
    /// (4e^2 + 3e*fe + 2e) + final encoder norm e + frame projection
    /// (e*d + d) + per decoder layer (4d^2 + 3d*fd + 2d) + final decoder
    /// norm d + output d*V, where s stacks one chunk of raw frames.
    pub fn param_count(&self) -> usize {
        let (v, d, e) = (self.vocab_size, self.decoder_dim, self.encoder_dim);
        let (fd, fe) = (self.decoder_ffn_dim, self.encoder_ffn_dim());
        let s = self.frames_per_chunk() * self.raw_frame_dim;
        let enc_layer = 4 * e * e + 3 * e * fe + 2 * e;
        let dec_layer = 4 * d * d + 3 * d * fd + 2 * d;
        v * d
            + (s * e + e)
            + self.encoder_layers * enc_layer
            + e
            + (e * d + d)
            + self.decoder_layers * dec_layer
            + d
            + d * v
    }
}

/// One pre-norm transformer layer: attention then gated FFN.
#[derive(Debug, Clone)]
pub struct LayerParams<S> {
    pub attn_norm: Tensor<S>,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub ffn_norm: Tensor<S>,
    pub w_gate: Tensor<S>,
    pub w_up: Tensor<S>,
    pub w_down: Tensor<S>,
}

impl<S: Scalar> LayerParams<S> {
    fn init(dim: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        LayerParams {
            attn_norm: ones(dim),
            wq: projection(dim, dim, rng),
            wk: projection(dim, dim, rng),
            wv: projection(dim, dim, rng),
            wo: projection(dim, dim, rng),
            ffn_norm: ones(dim),
            w_gate: projection(dim, ffn, rng),
            w_up: projection(dim, ffn, rng),
            w_down: projection(ffn, dim, rng),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<S>); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ffn_norm", &self.ffn_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<S>); 9] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ffn_norm", &mut self.ffn_norm),
            ("w_gate", &mut self.w_gate),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }
}

/// Uniform init scaled by 1/sqrt(fan_in); draws happen in f64 so every
/// scalar instantiation sees the same values.
fn projection<S: Scalar>(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let scale = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| S::from_f64(rng::uniform_symmetric(rng, scale)))
        .collect();
    Tensor::from_vec(vec![fan_in, fan_out], data).unwrap()
}

/// Token table, one row per id, scaled like a projection out of the model dim.
fn embedding<S: Scalar>(vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let scale = 1.0 / (dim as f64).sqrt();
    let data = (0..vocab * dim)
        .map(|_| S::from_f64(rng::uniform_symmetric(rng, scale)))
        .collect();
    Tensor::from_vec(vec![vocab, dim], data).unwrap()
}

fn ones<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::from_vec(vec![n], vec![S::one(); n]).unwrap()
}

fn zeros_1d<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::from_vec(vec![n], vec![S::zero(); n]).unwrap()
}

#[derive(Debug, Clone)]
pub struct ModelParams<S> {
    pub tok_embed: Tensor<S>,
    pub enc_in_w: Tensor<S>,
    pub enc_in_b: Tensor<S>,
    pub enc_layers: Vec<LayerParams<S>>,
    pub enc_out_norm: Tensor<S>,
    pub frame_proj_w: Tensor<S>,
    pub frame_proj_b: Tensor<S>,
    pub dec_layers: Vec<LayerParams<S>>,
    pub dec_out_norm: Tensor<S>,
    pub out_proj: Tensor<S>,
}

impl<S: Scalar> ModelParams<S> {
    fn init(config: &ModelConfig) -> Self {
        let mut rng = rng::stream(config.seed, 0);
        let (d, e) = (config.decoder_dim, config.encoder_dim);
        let stacked = config.frames_per_chunk() * config.raw_frame_dim;
        ModelParams {
            tok_embed: embedding(config.vocab_size, d, &mut rng),
            enc_in_w: projection(stacked, e, &mut rng),
            enc_in_b: zeros_1d(e),
            enc_layers: (0..config.encoder_layers)
                .map(|_| LayerParams::init(e, config.encoder_ffn_dim(), &mut rng))
                .collect(),
            enc_out_norm: ones(e),
            frame_proj_w: projection(e, d, &mut rng),
            frame_proj_b: zeros_1d(d),
            dec_layers: (0..config.decoder_layers)
                .map(|_| LayerParams::init(d, config.decoder_ffn_dim, &mut rng))
                .collect(),
            dec_out_norm: ones(d),
            out_proj: projection(d, config.vocab_size, &mut rng),
        }
    }

    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a Tensor<S>)) {
        f("tok_embed".into(), &self.tok_embed);
        f("enc_in.w".into(), &self.enc_in_w);
        f("enc_in.b".into(), &self.enc_in_b);
        for (i, layer) in self.enc_layers.iter().enumerate() {
            for (name, t) in layer.named() {
                f(format!("enc.{i}.{name}"), t);
            }
        }
        f("enc_norm".into(), &self.enc_out_norm);
        f("frame_proj.w".into(), &self.frame_proj_w);
        f("frame_proj.b".into(), &self.frame_proj_b);
        for (i, layer) in self.dec_layers.iter().enumerate() {
            for (name, t) in layer.named() {
                f(format!("dec.{i}.{name}"), t);
            }
        }
        f("dec_norm".into(), &self.dec_out_norm);
        f("out_proj".into(), &self.out_proj);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Tensor<S>)) {
        f("tok_embed".into(), &mut self.tok_embed);
        f("enc_in.w".into(), &mut self.enc_in_w);
        f("enc_in.b".into(), &mut self.enc_in_b);
        for (i, layer) in self.enc_layers.iter_mut().enumerate() {
            for (name, t) in layer.named_mut() {
                f(format!("enc.{i}.{name}"), t);
            }
        }
        f("enc_norm".into(), &mut self.enc_out_norm);
        f("frame_proj.w".into(), &mut self.frame_proj_w);
        f("frame_proj.b".into(), &mut self.frame_proj_b);
        for (i, layer) in self.dec_layers.iter_mut().enumerate() {
            for (name, t) in layer.named_mut() {
                f(format!("dec.{i}.{name}"), t);
            }
        }
        f("dec_norm".into(), &mut self.dec_out_norm);
        f("out_proj".into(), &mut self.out_proj);
    }

    /// Parameter tensors in manifest order.
    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = Vec::new();
        self.visit(|n, t| v.push((n, t)));
        v
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.numel());
        n
    }
}

#[derive(Debug, Clone)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: ModelParams<S>,
}

impl<S: Scalar> Model<S> {
    /// Deterministic initialization from (config, config.seed).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config);
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<S>) -> Result<Self> {
        config.validate()?;
        Ok(Model { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            decoder_layers: 1,
            decoder_dim: 8,
            decoder_heads: 2,
            decoder_ffn_dim: 16,
            encoder_layers: 1,
            encoder_dim: 8,
            raw_frame_dim: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_bit_identical() {
        let a = Model::<f32>::new(tiny_config()).unwrap();
        let b = Model::<f32>::new(tiny_config()).unwrap();
        for ((na, ta), (nb, tb)) in a.params.named().iter().zip(b.params.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data, tb.data, "{na}");
        }
        let mut other_seed = tiny_config();
        other_seed.seed = 1;
        let c = Model::<f32>::new(other_seed).unwrap();
        assert_ne!(a.params.tok_embed.data, c.params.tok_embed.data);
    }

    #[test]
    fn norm_gains_start_at_one_and_count_matches_closed_form() {
        let m = Model::<f32>::new(ModelConfig::default()).unwrap();
        assert!(m.params.enc_out_norm.data.iter().all(|&v| v == 1.0));
        assert!(m.params.dec_layers[0].attn_norm.data.iter().all(|&v| v == 1.0));
        assert_eq!(m.params.param_count(), m.config.param_count());

        let tiny = Model::<f32>::new(tiny_config()).unwrap();
        assert_eq!(tiny.params.param_count(), tiny.config.param_count());
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut c = ModelConfig::default();
        c.vocab_size = 3;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::default();
        c.chunk_ms = 250;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::default();
        c.decoder_heads = 5;
        assert!(c.validate().is_err());

        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn scalar_instantiations_share_initial_values() {
        let a = Model::<f32>::new(tiny_config()).unwrap();
        let b = Model::<f64>::new(tiny_config()).unwrap();
        for (x, y) in a.params.out_proj.data.iter().zip(&b.params.out_proj.data) {
            assert_eq!(*x, *y as f32);
        }
    }
}
