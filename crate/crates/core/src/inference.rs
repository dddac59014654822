//! Decoding.
//!
//! The streaming decoder alternates audio and text: after each chunk
//! embedding enters the history, the model generates words until it predicts
//! BLANK (or EOS), which closes the chunk without entering the history. After
//! the last chunk an EOS-embedding marker is appended and the model finishes
//! the utterance. [`greedy_decode`] runs this over a whole recording;
//! [`StreamSession`] is an independently written incremental version that
//! accepts audio piecemeal and respects encoder lookahead; [`beam_decode`]
//! keeps multiple hypotheses. [`llm_generate`] covers the two prompt-style
//! baselines.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{DecoderState, Model, StepStats};
use crate::scalar::Scalar;
use crate::targets::InputItem;
use crate::tensor::Tensor;
use crate::vocab::{is_word, BLANK, EOS};

/// Generation stop after end of audio, to bound degenerate decodes.
pub const TAIL_CAP: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EndReason {
    /// Model predicted EOS after the end-of-audio marker.
    #[default]
    Eos,
    /// Model predicted BLANK (or BOS) after the end-of-audio marker.
    TailBlank,
    /// Tail generation hit [`TAIL_CAP`].
    TailCapped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub token: u32,
    /// Chunk after which the word appeared (0-based). `None` for words
    /// generated after the end-of-audio marker and for non-streaming
    /// decodes; alignment metrics attribute those to the final chunk.
    pub after_chunk: Option<usize>,
    pub logprob: f64,
}

/// Work and outcome counters for one decode.
///
/// Every output-head call ends in exactly one counter, so
/// `steps.output_evals == blank_predicts + word_predicts + tail closure`
/// (the closure eval is present unless the tail was capped).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeStats {
    pub chunks: usize,
    /// Chunk-closing predictions (BLANK, or a degenerate EOS/BOS mid-audio).
    pub blank_predicts: u64,
    pub word_predicts: u64,
    /// Chunks closed by the per-chunk emission cap instead of a prediction.
    pub forced_blanks: u64,
    pub ended_by: EndReason,
    pub steps: StepStats,
    pub wall: Duration,
}

#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    pub words: Vec<u32>,
    pub emissions: Vec<Emission>,
    pub stats: DecodeStats,
}

fn argmax_logprob<S: Scalar>(logits: &[S]) -> (u32, f64) {
    let lp = kernels::log_softmax_row(logits);
    let mut best = 0usize;
    for (i, v) in lp.iter().enumerate() {
        if *v > lp[best] {
            best = i;
        }
    }
    (best as u32, lp[best].as_f64())
}

/// Greedy action at one decode step. The legal moves are closing the burst
/// (BLANK or EOS, whichever scores higher) or emitting a word; BOS is not a
/// legal emission, so ties and degenerate argmaxes resolve toward closing.
struct Choice {
    close: bool,
    /// On close, whether EOS outscored BLANK.
    eos: bool,
    token: u32,
    logprob: f64,
}

fn choose<S: Scalar>(logits: &[S]) -> Choice {
    let lp = kernels::log_softmax_row(logits);
    let lp_blank = lp[BLANK as usize].as_f64();
    let lp_eos = lp[EOS as usize].as_f64();
    let barrier = lp_blank.max(lp_eos);
    let mut word = 0u32;
    let mut word_lp = f64::NEG_INFINITY;
    for (t, v) in lp.iter().enumerate() {
        if is_word(t as u32) && v.as_f64() > word_lp {
            word = t as u32;
            word_lp = v.as_f64();
        }
    }
    if barrier >= word_lp {
        Choice { close: true, eos: lp_eos >= lp_blank, token: 0, logprob: barrier }
    } else {
        Choice { close: false, eos: false, token: word, logprob: word_lp }
    }
}

/// One-pass greedy decode of a full recording.
pub fn greedy_decode<S: Scalar>(model: &Model<S>, raw: &Tensor<S>) -> Result<DecodeOutcome> {
    let t0 = Instant::now();
    let enc = model.encode_utterance(raw)?;
    let chunks = enc.shape[0];
    let cap = model.config.max_emissions_per_chunk;
    let mut state = model.init_state();
    let mut words = Vec::new();
    let mut emissions = Vec::new();
    let mut stats = DecodeStats { chunks, ..DecodeStats::default() };

    model.advance(&mut state, &InputItem::Bos)?;
    for c in 0..chunks {
        let frame = InputItem::Frame { index: c, embedding: enc.row(c).to_vec() };
        model.advance(&mut state, &frame)?;
        let mut burst = 0;
        loop {
            let logits = model.logits_head(&mut state)?;
            let choice = choose(&logits);
            if choice.close {
                // The closing prediction never enters the history.
                stats.blank_predicts += 1;
                break;
            }
            words.push(choice.token);
            emissions.push(Emission { token: choice.token, after_chunk: Some(c), logprob: choice.logprob });
            stats.word_predicts += 1;
            model.advance(&mut state, &InputItem::Token(choice.token))?;
            burst += 1;
            if burst >= cap {
                stats.forced_blanks += 1;
                break;
            }
        }
    }

    model.advance(&mut state, &InputItem::EosEmb)?;
    let mut tail = 0;
    loop {
        let logits = model.logits_head(&mut state)?;
        let choice = choose(&logits);
        if choice.close {
            stats.ended_by = if choice.eos { EndReason::Eos } else { EndReason::TailBlank };
            break;
        }
        words.push(choice.token);
        emissions.push(Emission { token: choice.token, after_chunk: None, logprob: choice.logprob });
        stats.word_predicts += 1;
        model.advance(&mut state, &InputItem::Token(choice.token))?;
        tail += 1;
        if tail >= TAIL_CAP {
            stats.ended_by = EndReason::TailCapped;
            break;
        }
    }

    stats.steps = state.stats;
    stats.wall = t0.elapsed();
    Ok(DecodeOutcome { words, emissions, stats })
}

/// Incremental decoding over audio arriving in arbitrary pieces.
///
/// A chunk is decoded as soon as its encoder output can no longer change:
/// all chunks inside its lookahead window are complete and none of them can
/// still absorb trailing frames. Written independently of [`greedy_decode`];
/// the two must produce identical output on identical audio.
pub struct StreamSession<'m, S: Scalar> {
    model: &'m Model<S>,
    state: DecoderState<S>,
    raw: Vec<S>,
    frames_seen: usize,
    chunks_done: usize,
    words: Vec<u32>,
    emissions: Vec<Emission>,
    stats: DecodeStats,
    started: Instant,
}

impl<'m, S: Scalar> StreamSession<'m, S> {
    pub fn new(model: &'m Model<S>) -> Result<Self> {
        let mut state = model.init_state();
        model.advance(&mut state, &InputItem::Bos)?;
        Ok(StreamSession {
            model,
            state,
            raw: Vec::new(),
            frames_seen: 0,
            chunks_done: 0,
            words: Vec::new(),
            emissions: Vec::new(),
            stats: DecodeStats::default(),
            started: Instant::now(),
        })
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    /// Feeds raw frames; returns the words emitted in response.
    pub fn push_frames(&mut self, frames: &Tensor<S>) -> Result<Vec<Emission>> {
        let dim = self.model.config.raw_frame_dim;
        if frames.shape.len() != 2 || frames.shape[1] != dim {
            return Err(Error::Shape {
                op: "push_frames",
                lhs: frames.shape.clone(),
                rhs: vec![0, dim],
            });
        }
        self.raw.extend_from_slice(&frames.data);
        self.frames_seen += frames.shape[0];

        let fpc = self.model.config.frames_per_chunk();
        let full = self.frames_seen / fpc;
        // The newest chunk can still absorb trailing frames, so only chunks
        // strictly before it are content-final; lookahead pushes the decode
        // horizon back further.
        let content_final = full.saturating_sub(1);
        let decodable = content_final.saturating_sub(self.model.config.encoder_right_context_chunks);
        if decodable <= self.chunks_done {
            return Ok(Vec::new());
        }
        let first_new = self.emissions.len();
        let prefix = Tensor::from_vec(
            vec![content_final * fpc, dim],
            self.raw[..content_final * fpc * dim].to_vec(),
        )?;
        let enc = self.model.encode_utterance(&prefix)?;
        for c in self.chunks_done..decodable {
            self.consume_chunk(c, enc.row(c).to_vec())?;
        }
        Ok(self.emissions[first_new..].to_vec())
    }

    /// Runs one chunk through the decoder and generates its burst.
    fn consume_chunk(&mut self, c: usize, embedding: Vec<S>) -> Result<()> {
        let model = self.model;
        model.advance(&mut self.state, &InputItem::Frame { index: c, embedding })?;
        let cap = model.config.max_emissions_per_chunk;
        let mut burst = 0;
        loop {
            let logits = model.logits_head(&mut self.state)?;
            let choice = choose(&logits);
            if choice.close {
                self.stats.blank_predicts += 1;
                break;
            }
            self.words.push(choice.token);
            self.emissions.push(Emission {
                token: choice.token,
                after_chunk: Some(c),
                logprob: choice.logprob,
            });
            self.stats.word_predicts += 1;
            model.advance(&mut self.state, &InputItem::Token(choice.token))?;
            burst += 1;
            if burst >= cap {
                self.stats.forced_blanks += 1;
                break;
            }
        }
        self.chunks_done = c + 1;
        Ok(())
    }

    /// Ends the audio: decodes every remaining chunk (trailing frames fold
    /// into the last one), then finishes the utterance.
    pub fn finish(mut self) -> Result<DecodeOutcome> {
        let model = self.model;
        let dim = model.config.raw_frame_dim;
        let raw = Tensor::from_vec(vec![self.frames_seen, dim], std::mem::take(&mut self.raw))?;
        let enc = model.encode_utterance(&raw)?;
        let chunks = enc.shape[0];
        for c in self.chunks_done..chunks {
            self.consume_chunk(c, enc.row(c).to_vec())?;
        }
        self.stats.chunks = chunks;

        model.advance(&mut self.state, &InputItem::EosEmb)?;
        let mut tail = 0;
        loop {
            let logits = model.logits_head(&mut self.state)?;
            let choice = choose(&logits);
            if choice.close {
                self.stats.ended_by =
                    if choice.eos { EndReason::Eos } else { EndReason::TailBlank };
                break;
            }
            self.words.push(choice.token);
            self.emissions.push(Emission {
                token: choice.token,
                after_chunk: None,
                logprob: choice.logprob,
            });
            self.stats.word_predicts += 1;
            model.advance(&mut self.state, &InputItem::Token(choice.token))?;
            tail += 1;
            if tail >= TAIL_CAP {
                self.stats.ended_by = EndReason::TailCapped;
                break;
            }
        }
        self.stats.steps = self.state.stats;
        self.stats.wall = self.started.elapsed();
        Ok(DecodeOutcome { words: self.words, emissions: self.emissions, stats: self.stats })
    }
}

#[derive(Debug, Clone)]
struct Hyp<S: Scalar> {
    score: f64,
    words: Vec<u32>,
    emissions: Vec<Emission>,
    state: DecoderState<S>,
    blanks: u64,
    forced: u64,
    ended_by: EndReason,
}

/// Beam search over the same alternating schedule as [`greedy_decode`].
///
/// Closing a chunk scores the better of BLANK and EOS (both end the burst
/// and neither enters the history); hypotheses that hit the emission cap
/// still pay that closing score. With `width == 1` the decisions reduce to
/// greedy argmax.
pub fn beam_decode<S: Scalar>(
    model: &Model<S>,
    raw: &Tensor<S>,
    width: usize,
) -> Result<DecodeOutcome> {
    if width == 0 {
        return Err(Error::Config("beam width must be positive".into()));
    }
    let t0 = Instant::now();
    let enc = model.encode_utterance(raw)?;
    let chunks = enc.shape[0];
    let cap = model.config.max_emissions_per_chunk;

    let mut state = model.init_state();
    model.advance(&mut state, &InputItem::Bos)?;
    let mut beam = vec![Hyp {
        score: 0.0,
        words: Vec::new(),
        emissions: Vec::new(),
        state,
        blanks: 0,
        forced: 0,
        ended_by: EndReason::default(),
    }];

    for c in 0..chunks {
        for hyp in &mut beam {
            let frame = InputItem::Frame { index: c, embedding: enc.row(c).to_vec() };
            model.advance(&mut hyp.state, &frame)?;
        }
        beam = expand_burst(model, beam, width, cap, Some(c))?;
    }

    for hyp in &mut beam {
        model.advance(&mut hyp.state, &InputItem::EosEmb)?;
    }
    beam = expand_burst(model, beam, width, TAIL_CAP, None)?;
    // Tail closures decide the end reason; chunk closures set it too but
    // are overwritten here.
    let best = beam
        .into_iter()
        .max_by(|a, b| a.score.total_cmp(&b.score))
        .expect("beam never empties");

    let stats = DecodeStats {
        chunks,
        blank_predicts: best.blanks,
        word_predicts: best.words.len() as u64,
        forced_blanks: best.forced,
        ended_by: best.ended_by,
        steps: best.state.stats,
        wall: t0.elapsed(),
    };
    Ok(DecodeOutcome { words: best.words, emissions: best.emissions, stats })
}

/// One pruning candidate inside a burst step. Closed hypotheses keep
/// competing for beam slots against fresh extensions; insertion order
/// breaks score ties in favour of closing, mirroring greedy's argmax scan
/// where BLANK and EOS precede the word ids.
enum Cand {
    Kept(usize),
    Close { parent: usize, score: f64, eos: bool },
    Extend { parent: usize, token: u32, score: f64, logprob: f64 },
}

impl Cand {
    fn score(&self) -> f64 {
        match self {
            Cand::Kept(_) => f64::NAN, // patched before sorting
            Cand::Close { score, .. } | Cand::Extend { score, .. } => *score,
        }
    }
}

/// Generates one burst for every hypothesis entering a chunk (or the tail).
///
/// Each step, every live hypothesis offers a closure (scored with the
/// better of BLANK and EOS) and one-word extensions; the union with
/// already-closed survivors is pruned to `width`. The burst ends when no
/// live hypothesis survives or the emission cap forces the rest to close.
/// With `width == 1` each step picks the single locally best move, which is
/// exactly the greedy argmax decision.
fn expand_burst<S: Scalar>(
    model: &Model<S>,
    entering: Vec<Hyp<S>>,
    width: usize,
    cap: usize,
    chunk: Option<usize>,
) -> Result<Vec<Hyp<S>>> {
    let mut live = entering;
    let mut closed: Vec<Hyp<S>> = Vec::new();
    for step in 0..=cap {
        let mut cands: Vec<Cand> = (0..closed.len()).map(Cand::Kept).collect();
        let mut parents: Vec<Hyp<S>> = Vec::with_capacity(live.len());
        for mut hyp in live {
            let logits = model.logits_head(&mut hyp.state)?;
            let lp = kernels::log_softmax_row(&logits);
            let lp_blank = lp[BLANK as usize].as_f64();
            let lp_eos = lp[EOS as usize].as_f64();
            let parent = parents.len();
            cands.push(Cand::Close {
                parent,
                score: hyp.score + lp_blank.max(lp_eos),
                eos: lp_eos >= lp_blank,
            });
            if step < cap {
                for (t, v) in lp.iter().enumerate() {
                    if is_word(t as u32) {
                        cands.push(Cand::Extend {
                            parent,
                            token: t as u32,
                            score: hyp.score + v.as_f64(),
                            logprob: v.as_f64(),
                        });
                    }
                }
            }
            parents.push(hyp);
        }

        let kept_scores: Vec<f64> = closed.iter().map(|h| h.score).collect();
        cands.sort_by(|a, b| {
            let sa = if let Cand::Kept(i) = a { kept_scores[*i] } else { a.score() };
            let sb = if let Cand::Kept(i) = b { kept_scores[*i] } else { b.score() };
            sb.total_cmp(&sa)
        });
        cands.truncate(width);

        let mut kept: Vec<Option<Hyp<S>>> = closed.into_iter().map(Some).collect();
        let mut next_closed = Vec::new();
        let mut next_live = Vec::new();
        for cand in cands {
            match cand {
                Cand::Kept(i) => next_closed.push(kept[i].take().expect("kept once")),
                Cand::Close { parent, score, eos } => {
                    let mut done = parents[parent].clone();
                    done.score = score;
                    if step == cap && cap > 0 {
                        done.forced += 1;
                    } else {
                        done.blanks += 1;
                    }
                    done.ended_by = if eos { EndReason::Eos } else { EndReason::TailBlank };
                    next_closed.push(done);
                }
                Cand::Extend { parent, token, score, logprob } => {
                    let mut child = parents[parent].clone();
                    child.score = score;
                    child.words.push(token);
                    child.emissions.push(Emission { token, after_chunk: chunk, logprob });
                    model.advance(&mut child.state, &InputItem::Token(token))?;
                    next_live.push(child);
                }
            }
        }
        closed = next_closed;
        live = next_live;
        if live.is_empty() {
            break;
        }
    }
    closed.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(closed)
}

/// Prompt-style baselines: the whole recording is prefilled before any
/// text is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlmStyle {
    /// Generates the transcript directly.
    Prompted,
    /// Generates the blank-interleaved label string; BLANK is a real token
    /// here and re-enters the history.
    TimeAligned,
}

pub fn llm_generate<S: Scalar>(
    model: &Model<S>,
    raw: &Tensor<S>,
    style: LlmStyle,
) -> Result<DecodeOutcome> {
    let t0 = Instant::now();
    let enc = model.encode_utterance(raw)?;
    let chunks = enc.shape[0];
    let mut items = Vec::with_capacity(chunks + 2);
    items.push(InputItem::Bos);
    for c in 0..chunks {
        items.push(InputItem::Frame { index: c, embedding: enc.row(c).to_vec() });
    }
    items.push(InputItem::EosEmb);

    let mut state = model.init_state();
    model.prefill(&mut state, &items)?;

    let mut stats = DecodeStats { chunks, ..DecodeStats::default() };
    let mut words = Vec::new();
    let mut emissions = Vec::new();
    let cap = model.config.max_emissions_per_chunk * (chunks + 1);
    let mut steps = 0;
    loop {
        let logits = model.logits_head(&mut state)?;
        let (token, logprob) = argmax_logprob(&logits);
        match token {
            EOS => {
                stats.ended_by = EndReason::Eos;
                break;
            }
            BLANK if style == LlmStyle::TimeAligned => {
                stats.blank_predicts += 1;
                model.advance(&mut state, &InputItem::Token(BLANK))?;
            }
            t if is_word(t) => {
                // In the time-aligned string, the blanks generated so far
                // say which chunk a word claims to fall in.
                let after_chunk = match style {
                    LlmStyle::TimeAligned => {
                        Some((stats.blank_predicts as usize).saturating_sub(1))
                    }
                    LlmStyle::Prompted => None,
                };
                words.push(t);
                emissions.push(Emission { token: t, after_chunk, logprob });
                stats.word_predicts += 1;
                model.advance(&mut state, &InputItem::Token(t))?;
            }
            _ => {
                stats.ended_by = EndReason::TailBlank;
                break;
            }
        }
        steps += 1;
        if steps >= cap {
            stats.ended_by = EndReason::TailCapped;
            break;
        }
    }
    stats.steps = state.stats;
    stats.wall = t0.elapsed();
    Ok(DecodeOutcome { words, emissions, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn config(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            decoder_layers: 1,
            decoder_dim: 16,
            decoder_heads: 2,
            decoder_ffn_dim: 32,
            encoder_layers: 2,
            encoder_dim: 16,
            raw_frame_dim: 4,
            encoder_right_context_chunks: 2,
            max_emissions_per_chunk: 4,
            seed,
            ..ModelConfig::default()
        }
    }

    fn audio(n_frames: usize, dim: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng::stream(seed, 77);
        let data = (0..n_frames * dim)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r) as f32)
            .collect();
        Tensor::from_vec(vec![n_frames, dim], data).unwrap()
    }

    /// A decode's head calls split exactly into chunk closures, words, and
    /// one tail closure (absent when capped); advances are BOS + chunks +
    /// fed-back words + the end marker.
    fn assert_stats_identities(stats: &DecodeStats) {
        let closure = match stats.ended_by {
            EndReason::TailCapped => 0,
            _ => 1,
        };
        assert_eq!(
            stats.steps.output_evals,
            stats.blank_predicts + stats.word_predicts + closure
        );
        assert_eq!(stats.blank_predicts + stats.forced_blanks, stats.chunks as u64);
        assert_eq!(
            stats.steps.advances,
            2 + stats.chunks as u64 + stats.word_predicts
        );
    }

    #[test]
    fn greedy_stats_identities_hold_across_models() {
        for seed in 0..6 {
            let model = Model::<f32>::new(config(seed)).unwrap();
            let fpc = model.config.frames_per_chunk();
            let raw = audio(4 * fpc + seed as usize, 4, seed);
            let out = greedy_decode(&model, &raw).unwrap();
            assert_stats_identities(&out.stats);
            assert_eq!(out.words.len() as u64, out.stats.word_predicts);
            assert!(out.emissions.iter().all(|e| e.logprob <= 0.0));
            assert!(out.emissions.iter().all(|e| is_word(e.token)));
        }
    }

    /// The independent streaming path must reproduce greedy exactly,
    /// including per-word log-probabilities, regardless of how the audio is
    /// sliced up.
    #[test]
    fn stream_session_matches_greedy() {
        for seed in 0..4 {
            let model = Model::<f32>::new(config(seed)).unwrap();
            let fpc = model.config.frames_per_chunk();
            let dim = model.config.raw_frame_dim;
            let raw = audio(7 * fpc + 5, dim, 100 + seed);
            let greedy = greedy_decode(&model, &raw).unwrap();

            let mut session = StreamSession::new(&model).unwrap();
            let mut fed = 0;
            let mut piece = 1;
            while fed < raw.shape[0] {
                let take = piece.min(raw.shape[0] - fed);
                let slice = Tensor::from_vec(
                    vec![take, dim],
                    raw.data[fed * dim..(fed + take) * dim].to_vec(),
                )
                .unwrap();
                session.push_frames(&slice).unwrap();
                fed += take;
                piece = piece * 2 + 1;
            }
            let streamed = session.finish().unwrap();

            assert_eq!(streamed.words, greedy.words, "seed {seed}");
            assert_eq!(streamed.emissions, greedy.emissions, "seed {seed}");
            assert_eq!(streamed.stats.chunks, greedy.stats.chunks);
            assert_eq!(streamed.stats.blank_predicts, greedy.stats.blank_predicts);
            assert_eq!(streamed.stats.ended_by, greedy.stats.ended_by);
            assert_stats_identities(&streamed.stats);
        }
    }

    /// Before lookahead is satisfied the session must not emit anything.
    #[test]
    fn stream_session_waits_for_lookahead() {
        let model = Model::<f32>::new(config(1)).unwrap();
        let fpc = model.config.frames_per_chunk();
        let rc = model.config.encoder_right_context_chunks;
        let mut session = StreamSession::new(&model).unwrap();
        // rc+1 full chunks: newest may still grow, the rest lack context.
        let first = audio((rc + 1) * fpc, 4, 7);
        session.push_frames(&first).unwrap();
        assert_eq!(session.chunks_done, 0);
        let second = audio(fpc, 4, 8);
        session.push_frames(&second).unwrap();
        assert_eq!(session.chunks_done, 1);
    }

    #[test]
    fn stream_session_rejects_wrong_frame_width() {
        let model = Model::<f32>::new(config(2)).unwrap();
        let mut session = StreamSession::new(&model).unwrap();
        let bad = audio(4, 3, 9);
        assert!(matches!(
            session.push_frames(&bad),
            Err(Error::Shape { op: "push_frames", .. })
        ));
    }

    #[test]
    fn too_short_audio_fails_cleanly() {
        let model = Model::<f32>::new(config(3)).unwrap();
        let fpc = model.config.frames_per_chunk();
        let raw = audio(fpc - 1, 4, 10);
        assert!(matches!(greedy_decode(&model, &raw), Err(Error::InputTooShort { .. })));
        let session = StreamSession::new(&model).unwrap();
        // No frames pushed at all.
        drop(session);
        let mut session = StreamSession::new(&model).unwrap();
        session.push_frames(&raw).unwrap();
        assert!(matches!(session.finish(), Err(Error::InputTooShort { .. })));
    }

    #[test]
    fn beam_width_one_matches_greedy_words() {
        for seed in 0..4 {
            let model = Model::<f32>::new(config(seed)).unwrap();
            let fpc = model.config.frames_per_chunk();
            let raw = audio(5 * fpc + 3, 4, 200 + seed);
            let greedy = greedy_decode(&model, &raw).unwrap();
            let beam = beam_decode(&model, &raw, 1).unwrap();
            assert_eq!(beam.words, greedy.words, "seed {seed}");
            assert_eq!(beam.emissions, greedy.emissions, "seed {seed}");
            assert!(beam.emissions.iter().all(|e| e.logprob.is_finite()));
        }
    }

    /// Exhaustive oracle: enumerate every bounded emission schedule, score
    /// it with the same objective (word logprobs plus the best of BLANK/EOS
    /// at each closure), and check a wide beam finds the optimum.
    #[test]
    fn wide_beam_matches_exhaustive_search_on_tiny_model() {
        let cfg = ModelConfig {
            vocab_size: 5, // two word types
            decoder_layers: 1,
            decoder_dim: 8,
            decoder_heads: 2,
            decoder_ffn_dim: 16,
            encoder_layers: 1,
            encoder_dim: 8,
            raw_frame_dim: 4,
            max_emissions_per_chunk: 2,
            seed: 9,
            ..ModelConfig::default()
        };
        let model = Model::<f32>::new(cfg).unwrap();
        let fpc = model.config.frames_per_chunk();
        let raw = audio(2 * fpc, 4, 33);
        let enc = model.encode_utterance(&raw).unwrap();
        let chunks = enc.shape[0];
        assert_eq!(chunks, 2);
        let word_ids = [3u32, 4u32];
        // Oracle bound on tail length; asserted against the beam's actual
        // tail below. Random-init log-probs make long tails strictly worse.
        let tail_cap = 3usize;

        // Score one schedule (words per chunk, then tail words) exactly as
        // the beam does.
        let score_schedule = |schedule: &[Vec<u32>]| -> f64 {
            let mut state = model.init_state();
            model.advance(&mut state, &InputItem::Bos).unwrap();
            let mut total = 0.0;
            for (c, burst) in schedule.iter().enumerate() {
                if c < chunks {
                    let item = InputItem::Frame { index: c, embedding: enc.row(c).to_vec() };
                    model.advance(&mut state, &item).unwrap();
                } else {
                    model.advance(&mut state, &InputItem::EosEmb).unwrap();
                }
                for &w in burst {
                    let lp = kernels::log_softmax_row(&model.logits_head(&mut state).unwrap());
                    total += lp[w as usize] as f64;
                    model.advance(&mut state, &InputItem::Token(w)).unwrap();
                }
                let lp = kernels::log_softmax_row(&model.logits_head(&mut state).unwrap());
                total += (lp[BLANK as usize] as f64).max(lp[EOS as usize] as f64);
            }
            total
        };

        // All word sequences up to the burst cap.
        fn bursts(word_ids: &[u32], cap: usize) -> Vec<Vec<u32>> {
            let mut all = vec![vec![]];
            let mut frontier = vec![vec![]];
            for _ in 0..cap {
                let mut next = Vec::new();
                for b in &frontier {
                    for &w in word_ids {
                        let mut e = b.clone();
                        e.push(w);
                        next.push(e);
                    }
                }
                all.extend(next.iter().cloned());
                frontier = next;
            }
            all
        }

        let per_chunk = bursts(&word_ids, model.config.max_emissions_per_chunk);
        let tails = bursts(&word_ids, tail_cap);
        let mut best_score = f64::NEG_INFINITY;
        let mut best_words: Vec<u32> = Vec::new();
        for b0 in &per_chunk {
            for b1 in &per_chunk {
                for t in &tails {
                    let schedule = [b0.clone(), b1.clone(), t.clone()];
                    let s = score_schedule(&schedule);
                    if s > best_score {
                        best_score = s;
                        best_words = schedule.concat();
                    }
                }
            }
        }

        let schedule_of = |emissions: &[Emission]| {
            let mut schedule = vec![Vec::new(); chunks + 1];
            for e in emissions {
                schedule[e.after_chunk.unwrap_or(chunks)].push(e.token);
            }
            schedule
        };

        // Wide enough to hold every live hypothesis at every step.
        let beam = beam_decode(&model, &raw, 512).unwrap();
        let tail_words = schedule_of(&beam.emissions)[chunks].len();
        assert!(tail_words <= tail_cap, "oracle tail bound too small: {tail_words}");
        let beam_score = score_schedule(&schedule_of(&beam.emissions));

        assert_eq!(beam.words, best_words);
        assert!((beam_score - best_score).abs() < 1e-6, "{beam_score} vs {best_score}");

        // Narrower beams never beat the optimum and never lose to greedy.
        let greedy = greedy_decode(&model, &raw).unwrap();
        let narrow = beam_decode(&model, &raw, 4).unwrap();
        let g = score_schedule(&schedule_of(&greedy.emissions));
        let n = score_schedule(&schedule_of(&narrow.emissions));
        assert!(n <= best_score + 1e-9);
        assert!(g <= n + 1e-9);
    }

    #[test]
    fn llm_prefill_pays_no_output_evals() {
        for style in [LlmStyle::Prompted, LlmStyle::TimeAligned] {
            let model = Model::<f32>::new(config(4)).unwrap();
            let fpc = model.config.frames_per_chunk();
            let raw = audio(5 * fpc, 4, 55);
            let out = llm_generate(&model, &raw, style).unwrap();
            let generated = out.stats.word_predicts
                + out.stats.blank_predicts
                + match out.stats.ended_by {
                    EndReason::TailCapped => 0,
                    _ => 1,
                };
            assert_eq!(out.stats.steps.output_evals, generated);
            // Prompt: BOS + chunks + end marker; then one advance per token.
            assert_eq!(
                out.stats.steps.advances,
                (out.stats.chunks as u64 + 2)
                    + out.stats.word_predicts
                    + out.stats.blank_predicts
            );
            match style {
                LlmStyle::Prompted => {
                    assert_eq!(out.stats.blank_predicts, 0);
                    assert!(out.emissions.iter().all(|e| e.after_chunk.is_none()));
                }
                LlmStyle::TimeAligned => {
                    // Words claim the chunk opened by the preceding blanks.
                    assert!(out
                        .emissions
                        .iter()
                        .all(|e| e.after_chunk.is_some_and(|c| c <= out.stats.chunks)));
                }
            }
        }
    }
}
