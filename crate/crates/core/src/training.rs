//! Training and evaluation loops.
//!
//! One optimizer step processes a batch of utterances on a single tape:
//! each sample contributes its weighted-mean cross entropy, the batch pools
//! them by weight, and the pooled loss backpropagates through decoder and
//! encoder alike. The schedule is tri-partite (linear warmup, hold, linear
//! decay), gradients are globally norm-clipped, and updates are Adam.
//! Checkpoints capture parameters, optimizer moments, and loop position, so
//! a resumed run reproduces the uninterrupted one batch for batch.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::inference::{greedy_decode, llm_generate, DecodeOutcome, LlmStyle};
use crate::kernels;
use crate::metrics::{self, EditBreakdown, WerAccumulator};
use crate::model::{checkpoint, taped, Model, ModelConfig};
use crate::optim::{adam_step, clip_grad_norm, AdamHyper, Moments};
use crate::rng;
use crate::scalar::Scalar;
use crate::synthdata::Utterance;
use crate::targets::{
    build_realm_sample, build_speech_llm_sample, build_time_aligned_llm_sample,
    InterleavedSample, Mode,
};
use crate::tensor::Tensor;
use crate::vocab::IGNORE;

/// Seed perturbation separating frame jitter from the epoch shuffles.
const JITTER_STREAM: u64 = 0x6a69_7474;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_epochs: u32,
    pub hold_epochs: u32,
    pub decay_epochs: u32,
    pub batch_size: usize,
    pub max_epochs: u32,
    pub eval_every: u32,
    pub mode: Mode,
    pub delay_chunks: u32,
    /// Relative loss weight of BLANK targets; words and EOS weigh 1.
    pub blank_weight: f64,
    pub grad_clip: f64,
    /// Decoupled weight decay coefficient; zero disables it.
    pub weight_decay: f64,
    /// Standard deviation of fresh Gaussian jitter added to the raw frames
    /// at every presentation; zero disables it. Evaluation never jitters.
    pub input_noise: f64,
    /// Seed for the per-epoch shuffles, independent of the model seed.
    pub shuffle_seed: u64,
    pub checkpoint_dir: std::path::PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 5e-4,
            warmup_epochs: 2,
            hold_epochs: 4,
            decay_epochs: 8,
            batch_size: 8,
            max_epochs: 14,
            eval_every: 2,
            mode: Mode::Realm,
            delay_chunks: 0,
            blank_weight: 1.0,
            grad_clip: 1.0,
            weight_decay: 0.0,
            input_noise: 0.0,
            shuffle_seed: 0,
            checkpoint_dir: std::path::PathBuf::from("checkpoints"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr.is_finite() && self.max_lr > 0.0) {
            return Err(Error::Config("max_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.blank_weight.is_finite() && self.blank_weight >= 0.0) {
            return Err(Error::Config("blank_weight must be non-negative".into()));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.input_noise.is_finite() && self.input_noise >= 0.0) {
            return Err(Error::Config("input_noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate before optimizer step `step` (0-based): linear warmup from
/// zero, a constant hold, linear decay back to zero, and zero afterward.
/// Boundaries are exact: the end of warmup and the whole hold phase sit at
/// `max_lr`, the end of decay at zero.
pub fn lr_at(step: u64, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let spe = steps_per_epoch.max(1) as f64;
    let s = step as f64;
    let warm = cfg.warmup_epochs as f64 * spe;
    let hold = cfg.hold_epochs as f64 * spe;
    let decay = cfg.decay_epochs as f64 * spe;
    if warm + hold + decay == 0.0 {
        return 0.0;
    }
    if s < warm {
        cfg.max_lr * s / warm
    } else if s <= warm + hold {
        cfg.max_lr
    } else if s < warm + hold + decay {
        cfg.max_lr * (1.0 - (s - warm - hold) / decay)
    } else {
        0.0
    }
}

/// Builds the mode's teacher-forcing sample for one utterance. Frame items
/// carry placeholder embeddings: the training tape reads chunk embeddings
/// from its own encoder pass by index.
pub fn sample_for<S: Scalar>(
    mode: Mode,
    u: &Utterance<S>,
    config: &ModelConfig,
    delay_chunks: u32,
) -> Result<InterleavedSample<S>> {
    let chunks = u.alignment.total_chunks(config.chunk_ms)?;
    let placeholder = Tensor::from_vec(
        vec![chunks, config.decoder_dim],
        vec![S::zero(); chunks * config.decoder_dim],
    )?;
    match mode {
        Mode::Realm => build_realm_sample(&u.alignment, &placeholder, config.chunk_ms, delay_chunks),
        Mode::SpeechLlm => build_speech_llm_sample(&u.alignment, &placeholder, config.chunk_ms),
        Mode::TimeAlignedLlm => {
            build_time_aligned_llm_sample(&u.alignment, &placeholder, config.chunk_ms)
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub batches: usize,
    /// Loss-bearing target positions processed.
    pub positions: usize,
    pub weighted_loss: f64,
    pub weight: f64,
    pub wall: Duration,
}

impl TrainStats {
    pub fn mean_loss(&self) -> f64 {
        if self.weight > 0.0 {
            self.weighted_loss / self.weight
        } else {
            0.0
        }
    }

    pub fn tokens_per_sec(&self) -> f64 {
        let secs = self.wall.as_secs_f64();
        if secs > 0.0 {
            self.positions as f64 / secs
        } else {
            0.0
        }
    }
}

pub struct Trainer<S: Scalar> {
    pub model: Model<S>,
    pub cfg: TrainConfig,
    moments: Vec<Moments<S>>,
    hyper: AdamHyper,
    /// Completed optimizer steps.
    pub global_step: u64,
    pub epoch: usize,
    /// Next batch within the current epoch.
    pub batch_in_epoch: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Model<S>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut moments = Vec::new();
        model.params.visit(|_, t| moments.push(Moments::zeros(t.data.len())));
        let hyper = AdamHyper {
            weight_decay: cfg.weight_decay,
            ..AdamHyper::default()
        };
        Ok(Trainer {
            model,
            cfg,
            moments,
            hyper,
            global_step: 0,
            epoch: 0,
            batch_in_epoch: 0,
        })
    }

    pub fn batches_per_epoch(&self, n_utterances: usize) -> usize {
        n_utterances.div_ceil(self.cfg.batch_size)
    }

    /// The epoch's utterance order, a pure function of seed and epoch, so a
    /// resumed run shuffles identically.
    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(self.cfg.shuffle_seed, self.epoch as u64));
        order
    }

    /// Runs the rest of the current epoch.
    pub fn train_epoch(&mut self, corpus: &[Utterance<S>]) -> Result<TrainStats> {
        let remaining = self
            .batches_per_epoch(corpus.len().max(1))
            .saturating_sub(self.batch_in_epoch);
        self.train_batches(corpus, remaining)
    }

    /// Runs up to `max_batches` optimizer steps, crossing epoch boundaries
    /// as needed.
    pub fn train_batches(
        &mut self,
        corpus: &[Utterance<S>],
        max_batches: usize,
    ) -> Result<TrainStats> {
        if corpus.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let n = corpus.len();
        let spe = self.batches_per_epoch(n);
        let mut stats = TrainStats::default();
        let t0 = Instant::now();
        for _ in 0..max_batches {
            let order = self.epoch_order(n);
            let lo = self.batch_in_epoch * self.cfg.batch_size;
            let hi = (lo + self.cfg.batch_size).min(n);
            let ids: Vec<usize> = order[lo..hi].to_vec();
            let (loss, weight, positions) = self.step_batch(corpus, &ids, spe)?;
            stats.batches += 1;
            stats.positions += positions;
            stats.weighted_loss += loss * weight;
            stats.weight += weight;
            self.batch_in_epoch += 1;
            if self.batch_in_epoch >= spe {
                self.epoch += 1;
                self.batch_in_epoch = 0;
            }
        }
        stats.wall = t0.elapsed();
        Ok(stats)
    }

    /// One optimizer step over the given utterances. Returns the pooled
    /// loss, its total weight, and the number of scored positions.
    fn step_batch(
        &mut self,
        corpus: &[Utterance<S>],
        ids: &[usize],
        steps_per_epoch: usize,
    ) -> Result<(f64, f64, usize)> {
        let mut g = Graph::new();
        let tp = taped::TapedParams::lease(&self.model, &mut g);
        let mut parts: Vec<(NodeId, S)> = Vec::with_capacity(ids.len());
        let mut positions = 0usize;
        // Jitter is keyed by (shuffle_seed, global_step) so a resumed run
        // draws the same noise as an uninterrupted one.
        let mut jitter = rng::stream(self.cfg.shuffle_seed ^ JITTER_STREAM, self.global_step);
        for &i in ids {
            let u = &corpus[i];
            let sample = sample_for(self.cfg.mode, u, &self.model.config, self.cfg.delay_chunks)?;
            positions += sample.targets.iter().filter(|t| **t != IGNORE).count();
            let frames = if self.cfg.input_noise > 0.0 {
                let mut data = u.frames.data.clone();
                for v in &mut data {
                    *v = *v + S::from_f64(self.cfg.input_noise * rng::normal(&mut jitter));
                }
                Some(Tensor::from_vec(u.frames.shape.clone(), data)?)
            } else {
                None
            };
            parts.push(taped::sample_loss_on_tape(
                &mut g,
                &tp,
                &self.model.config,
                frames.as_ref().unwrap_or(&u.frames),
                &sample,
                S::from_f64(self.cfg.blank_weight),
            )?);
        }
        let total_w: S = parts.iter().map(|(_, w)| *w).sum();
        if total_w <= S::zero() {
            return Err(Error::Contract("batch contains no scorable positions".into()));
        }
        let mut pooled: Option<NodeId> = None;
        for (loss, w) in &parts {
            let scaled = g.scale(*loss, *w / total_w);
            pooled = Some(match pooled {
                None => scaled,
                Some(p) => g.add(p, scaled)?,
            });
        }
        let loss_node = pooled.expect("batch is non-empty");
        let loss = g.scalar_value(loss_node).as_f64();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss {loss} at step {}",
                self.global_step
            )));
        }
        g.backward(loss_node)?;

        let leaf_ids = tp.node_ids();
        let mut grads: Vec<Vec<S>> = Vec::with_capacity(leaf_ids.len());
        for id in &leaf_ids {
            match g.grad(*id) {
                Some(grad) => grads.push(grad.to_vec()),
                None => grads.push(vec![S::zero(); g.data(*id).len()]),
            }
        }
        {
            let mut views: Vec<&mut [S]> = grads.iter_mut().map(Vec::as_mut_slice).collect();
            let norm = clip_grad_norm(&mut views, self.cfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient norm at step {}",
                    self.global_step
                )));
            }
        }

        let lr = lr_at(self.global_step, steps_per_epoch, &self.cfg);
        self.global_step += 1;
        let step = self.global_step;
        let hyper = self.hyper;
        let moments = &mut self.moments;
        let mut k = 0;
        let mut apply_err = None;
        self.model.params.visit_mut(|_, t| {
            if apply_err.is_none() {
                if let Err(e) = adam_step(&mut t.data, &grads[k], &mut moments[k], step, lr, hyper)
                {
                    apply_err = Some(e);
                }
            }
            k += 1;
        });
        match apply_err {
            Some(e) => Err(e),
            None => Ok((loss, total_w.as_f64(), positions)),
        }
    }

    /// Writes parameters, optimizer moments, and loop position.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        let named = self.model.params.named();
        let entries: Vec<(String, &[usize], &[S])> = named
            .iter()
            .zip(&self.moments)
            .flat_map(|((name, t), mom)| {
                [
                    (format!("m.{name}"), t.shape.as_slice(), mom.m.as_slice()),
                    (format!("v.{name}"), t.shape.as_slice(), mom.v.as_slice()),
                ]
            })
            .collect();
        checkpoint::write_blob(dir, "optim", &entries)?;
        let state = format!(
            "global_step={}\nepoch={}\nbatch_in_epoch={}\nmode={}\n",
            self.global_step, self.epoch, self.batch_in_epoch, self.cfg.mode
        );
        let path = dir.join("state.txt");
        std::fs::write(&path, state).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Restores a checkpoint written by [`Trainer::save_checkpoint`]. The
    /// stored mode must match the requested configuration.
    pub fn resume(config: ModelConfig, cfg: TrainConfig, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let model = Model::load(config, dir)?;
        let blob = checkpoint::read_blob::<S>(dir, "optim")?;
        let mut by_name: std::collections::HashMap<String, checkpoint::BlobEntry<S>> =
            blob.into_iter().map(|e| (e.name.clone(), e)).collect();
        let mut moments = Vec::new();
        let mut missing = Vec::new();
        model.params.visit(|name, t| {
            let m = by_name.remove(&format!("m.{name}"));
            let v = by_name.remove(&format!("v.{name}"));
            match (m, v) {
                (Some(m), Some(v)) if m.data.len() == t.data.len() && v.data.len() == t.data.len() => {
                    moments.push(Moments { m: m.data, v: v.data });
                }
                _ => missing.push(name),
            }
        });
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "optimizer state missing or mis-shaped for: {}",
                missing.join(", ")
            )));
        }

        let state_path = dir.join("state.txt");
        let text =
            std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let mut global_step = None;
        let mut epoch = None;
        let mut batch_in_epoch = None;
        let mut mode = None;
        for line in text.lines() {
            let Some((key, value)) = line.split_once('=') else { continue };
            match key {
                "global_step" => global_step = value.parse::<u64>().ok(),
                "epoch" => epoch = value.parse::<usize>().ok(),
                "batch_in_epoch" => batch_in_epoch = value.parse::<usize>().ok(),
                "mode" => mode = value.parse::<Mode>().ok(),
                _ => {}
            }
        }
        let (Some(global_step), Some(epoch), Some(batch_in_epoch), Some(mode)) =
            (global_step, epoch, batch_in_epoch, mode)
        else {
            return Err(Error::Checkpoint(format!(
                "state file {} is incomplete",
                state_path.display()
            )));
        };
        if mode != cfg.mode {
            return Err(Error::Config(format!(
                "checkpoint was trained in mode {mode}, requested {}",
                cfg.mode
            )));
        }
        let hyper = AdamHyper {
            weight_decay: cfg.weight_decay,
            ..AdamHyper::default()
        };
        Ok(Trainer {
            model,
            cfg,
            moments,
            hyper,
            global_step,
            epoch,
            batch_in_epoch,
        })
    }
}

/// Corpus-level scores of decoded output against reference alignments.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub wer: f64,
    pub errors: EditBreakdown,
    /// Absent for the prompted baseline, which has no emission times.
    pub aer: Option<f64>,
    /// Absent for the prompted baseline, which has no length prediction.
    pub ler: Option<f64>,
    pub mean_loss: f64,
    pub buckets: Vec<BucketScore>,
}

/// WER over one duration bucket: terciles plus the longest utterances.
#[derive(Debug, Clone)]
pub struct BucketScore {
    pub name: String,
    pub utterances: usize,
    pub wer: f64,
}

/// One line of the metrics log; absent scores print as n/a.
pub fn metrics_line(epoch: usize, split: &str, r: &EvalReport) -> String {
    let opt = |v: Option<f64>| match v {
        Some(v) => format!("{v:.4}"),
        None => "n/a".to_string(),
    };
    format!(
        "{epoch}\t{split}\t{:.4}\t{}\t{}\t{:.4}",
        r.wer,
        opt(r.aer),
        opt(r.ler),
        r.mean_loss
    )
}

/// Scores already-decoded outcomes; separated from decoding so stub
/// outcomes can exercise the scoring rules directly.
pub fn score_decodes<S: Scalar>(
    corpus: &[Utterance<S>],
    outcomes: &[DecodeOutcome],
    mode: Mode,
    chunk_ms: u32,
    delay_chunks: u32,
) -> Result<EvalReport> {
    if corpus.len() != outcomes.len() {
        return Err(Error::Contract(format!(
            "{} utterances but {} decodes",
            corpus.len(),
            outcomes.len()
        )));
    }
    let mut wer_acc = WerAccumulator::default();
    let mut aer_edits = 0usize;
    let mut aer_words = 0usize;
    let mut ler_samples = Vec::new();
    for (u, out) in corpus.iter().zip(outcomes) {
        wer_acc.add(&u.alignment.transcript(), &out.words);
        if mode != Mode::SpeechLlm {
            let (edits, words) =
                metrics::alignment_edits(&u.alignment, chunk_ms, delay_chunks, &out.emissions)?;
            aer_edits += edits;
            aer_words += words;
        }
        if let Some(predicted) = metrics::predicted_blank_count(mode, &out.stats) {
            ler_samples.push((predicted, u.alignment.total_chunks(chunk_ms)?));
        }
    }
    let aer = (mode != Mode::SpeechLlm).then(|| aer_edits as f64 / aer_words.max(1) as f64);
    let ler = (!ler_samples.is_empty()).then(|| metrics::ler(&ler_samples));
    let buckets = bucket_scores(corpus, outcomes);
    Ok(EvalReport {
        wer: wer_acc.rate(),
        errors: wer_acc.errors,
        aer,
        ler,
        mean_loss: 0.0,
        buckets,
    })
}

/// Duration terciles (short/medium/long) plus the longest 100 utterances.
fn bucket_scores<S: Scalar>(corpus: &[Utterance<S>], outcomes: &[DecodeOutcome]) -> Vec<BucketScore> {
    let n = corpus.len();
    if n == 0 {
        return Vec::new();
    }
    let mut by_duration: Vec<usize> = (0..n).collect();
    by_duration.sort_by_key(|&i| (corpus[i].alignment.end_ms, corpus[i].id.clone()));
    let score = |name: &str, ids: &[usize]| {
        let mut acc = WerAccumulator::default();
        for &i in ids {
            acc.add(&corpus[i].alignment.transcript(), &outcomes[i].words);
        }
        BucketScore { name: name.to_string(), utterances: ids.len(), wer: acc.rate() }
    };
    vec![
        score("short", &by_duration[..n / 3]),
        score("medium", &by_duration[n / 3..2 * n / 3]),
        score("long", &by_duration[2 * n / 3..]),
        score("longest-100", &by_duration[n.saturating_sub(100)..]),
    ]
}

/// Teacher-forced mean loss per scored position, pooled over the corpus.
pub fn mean_eval_loss<S: Scalar>(
    model: &Model<S>,
    corpus: &[Utterance<S>],
    mode: Mode,
    delay_chunks: u32,
) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for u in corpus {
        let enc = model.encode_utterance(&u.frames)?;
        let sample = match mode {
            Mode::Realm => {
                build_realm_sample(&u.alignment, &enc, model.config.chunk_ms, delay_chunks)?
            }
            Mode::SpeechLlm => build_speech_llm_sample(&u.alignment, &enc, model.config.chunk_ms)?,
            Mode::TimeAlignedLlm => {
                build_time_aligned_llm_sample(&u.alignment, &enc, model.config.chunk_ms)?
            }
        };
        let logits = model.forward_teacher_forced(&sample.inputs)?;
        for (i, &t) in sample.targets.iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            let lp = kernels::log_softmax_row(logits.row(i));
            total -= lp[t as usize].as_f64();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Decodes and scores a whole split with the mode's inference procedure.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    corpus: &[Utterance<S>],
    mode: Mode,
    delay_chunks: u32,
) -> Result<EvalReport> {
    let mut outcomes = Vec::with_capacity(corpus.len());
    for u in corpus {
        let out = match mode {
            Mode::Realm => greedy_decode(model, &u.frames)?,
            Mode::SpeechLlm => llm_generate(model, &u.frames, LlmStyle::Prompted)?,
            Mode::TimeAlignedLlm => llm_generate(model, &u.frames, LlmStyle::TimeAligned)?,
        };
        outcomes.push(out);
    }
    let mut report = score_decodes(corpus, &outcomes, mode, model.config.chunk_ms, delay_chunks)?;
    report.mean_loss = mean_eval_loss(model, corpus, mode, delay_chunks)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::DecodeStats;
    use crate::synthdata::{gen_utterance, SynthSpec};
    use crate::targets::emission_chunk;
    use tempfile::tempdir;

    fn train_cfg() -> TrainConfig {
        TrainConfig {
            warmup_epochs: 0,
            hold_epochs: 1000,
            decay_epochs: 0,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_model_config(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 9,
            decoder_layers: 1,
            decoder_dim: 16,
            decoder_heads: 2,
            decoder_ffn_dim: 32,
            encoder_layers: 1,
            encoder_dim: 16,
            raw_frame_dim: 6,
            encoder_right_context_chunks: 1,
            seed,
            ..ModelConfig::default()
        }
    }

    fn tiny_corpus<S: Scalar>(n: usize, seed: u64) -> Vec<Utterance<S>> {
        let spec = SynthSpec {
            n_words: 6,
            raw_frame_dim: 6,
            words_per_utt: (2, 4),
            seed,
            ..SynthSpec::default()
        };
        let signatures = spec.word_signatures::<S>();
        (0..n)
            .map(|i| {
                let (alignment, frames) =
                    gen_utterance(&spec, &signatures, spec.words_per_utt, 0, i);
                Utterance { id: format!("t-{i:05}"), alignment, frames }
            })
            .collect()
    }

    #[test]
    fn lr_schedule_hits_exact_boundaries() {
        let cfg = TrainConfig {
            max_lr: 5e-4,
            warmup_epochs: 2,
            hold_epochs: 3,
            decay_epochs: 4,
            ..TrainConfig::default()
        };
        let spe = 10;
        assert_eq!(lr_at(0, spe, &cfg), 0.0);
        assert_eq!(lr_at(10, spe, &cfg), 2.5e-4); // warmup midpoint
        assert_eq!(lr_at(20, spe, &cfg), 5e-4); // end of warmup, exact
        assert_eq!(lr_at(35, spe, &cfg), 5e-4); // inside hold
        assert_eq!(lr_at(50, spe, &cfg), 5e-4); // last hold step
        assert_eq!(lr_at(70, spe, &cfg), 2.5e-4); // decay midpoint, exact
        assert_eq!(lr_at(90, spe, &cfg), 0.0); // end of decay
        assert_eq!(lr_at(5000, spe, &cfg), 0.0);
    }

    /// At random init the head's logits have variance sigma^2, so expected
    /// cross entropy sits a little above ln(V), never far below it.
    #[test]
    fn initial_loss_is_near_log_vocab() {
        let config = ModelConfig { vocab_size: 24, ..tiny_model_config(3) };
        let model = Model::<f32>::new(config).unwrap();
        let corpus = tiny_corpus::<f32>(3, 5);
        for mode in Mode::ALL {
            let loss = mean_eval_loss(&model, &corpus, mode, 0).unwrap();
            let expected = (24.0f64).ln();
            assert!(
                loss > expected * 0.9 && loss < expected * 1.35,
                "{mode}: loss {loss} vs ln(24) {expected}"
            );
        }
    }

    #[test]
    fn zero_lr_schedule_leaves_parameters_untouched() {
        let model = Model::<f32>::new(tiny_model_config(7)).unwrap();
        let before: Vec<Vec<f32>> = model.params.named().iter().map(|(_, t)| t.data.clone()).collect();
        let cfg = TrainConfig {
            warmup_epochs: 0,
            hold_epochs: 0,
            decay_epochs: 0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let corpus = tiny_corpus::<f32>(4, 11);
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let stats = trainer.train_epoch(&corpus).unwrap();
        assert_eq!(stats.batches, 2);
        assert!(stats.mean_loss().is_finite());
        let after: Vec<Vec<f32>> = trainer.model.params.named().iter().map(|(_, t)| t.data.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn single_utterance_overfit_decreases_loss_monotonically() {
        let model = Model::<f64>::new(tiny_model_config(1)).unwrap();
        let cfg = TrainConfig {
            max_lr: 2e-3,
            batch_size: 1,
            ..train_cfg()
        };
        let corpus = tiny_corpus::<f64>(1, 21);
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let mut losses = Vec::new();
        for _ in 0..20 {
            let stats = trainer.train_epoch(&corpus).unwrap();
            losses.push(stats.mean_loss());
        }
        for pair in losses.windows(2) {
            assert!(pair[1] < pair[0], "loss went {} -> {}", pair[0], pair[1]);
        }
        assert!(losses.last().unwrap() < &(losses[0] * 0.5));
    }

    #[test]
    fn resumed_training_reproduces_uninterrupted_run() {
        let corpus = tiny_corpus::<f32>(6, 31);
        let make = || Trainer::new(Model::<f32>::new(tiny_model_config(9)).unwrap(), {
            TrainConfig { max_lr: 1e-3, batch_size: 2, ..train_cfg() }
        })
        .unwrap();

        // Uninterrupted: 5 batches straight.
        let mut a = make();
        let mut a_losses = Vec::new();
        for _ in 0..5 {
            a_losses.push(a.train_batches(&corpus, 1).unwrap().mean_loss());
        }

        // Interrupted after 2 batches, saved mid-epoch, resumed.
        let dir = tempdir().unwrap();
        let mut b = make();
        let mut b_losses = Vec::new();
        for _ in 0..2 {
            b_losses.push(b.train_batches(&corpus, 1).unwrap().mean_loss());
        }
        b.save_checkpoint(dir.path()).unwrap();
        assert_eq!((b.epoch, b.batch_in_epoch), (0, 2));
        let mut b = Trainer::<f32>::resume(
            tiny_model_config(9),
            TrainConfig { max_lr: 1e-3, batch_size: 2, ..train_cfg() },
            dir.path(),
        )
        .unwrap();
        assert_eq!((b.epoch, b.batch_in_epoch, b.global_step), (0, 2, 2));
        for _ in 0..3 {
            b_losses.push(b.train_batches(&corpus, 1).unwrap().mean_loss());
        }

        assert_eq!(a_losses, b_losses);
        let pa: Vec<Vec<f32>> = a.model.params.named().iter().map(|(_, t)| t.data.clone()).collect();
        let pb: Vec<Vec<f32>> = b.model.params.named().iter().map(|(_, t)| t.data.clone()).collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn resume_rejects_mode_mismatch_and_missing_state() {
        let corpus = tiny_corpus::<f32>(2, 41);
        let mut t = Trainer::new(
            Model::<f32>::new(tiny_model_config(2)).unwrap(),
            TrainConfig { batch_size: 1, ..train_cfg() },
        )
        .unwrap();
        t.train_batches(&corpus, 1).unwrap();
        let dir = tempdir().unwrap();
        t.save_checkpoint(dir.path()).unwrap();

        let wrong_mode = TrainConfig { mode: Mode::SpeechLlm, ..train_cfg() };
        let err = Trainer::<f32>::resume(tiny_model_config(2), wrong_mode, dir.path());
        assert!(matches!(err, Err(Error::Config(_))));

        std::fs::remove_file(dir.path().join("optim.bin")).unwrap();
        let err = Trainer::<f32>::resume(tiny_model_config(2), train_cfg(), dir.path());
        assert!(err.is_err());
    }

    #[test]
    fn training_on_empty_split_fails() {
        let mut t = Trainer::new(
            Model::<f32>::new(tiny_model_config(4)).unwrap(),
            train_cfg(),
        )
        .unwrap();
        assert!(matches!(
            t.train_batches(&[], 1),
            Err(Error::Config(_))
        ));
    }

    fn oracle_outcome<S: Scalar>(u: &Utterance<S>, chunk_ms: u32) -> DecodeOutcome {
        let chunks = u.alignment.total_chunks(chunk_ms).unwrap();
        let emissions = u
            .alignment
            .words
            .iter()
            .map(|w| crate::inference::Emission {
                token: w.token,
                after_chunk: Some(emission_chunk(w.end_ms, chunk_ms, 0, chunks)),
                logprob: 0.0,
            })
            .collect();
        DecodeOutcome {
            words: u.alignment.transcript(),
            emissions,
            stats: DecodeStats {
                chunks,
                blank_predicts: chunks as u64,
                word_predicts: u.alignment.words.len() as u64,
                ..DecodeStats::default()
            },
        }
    }

    #[test]
    fn oracle_decodes_score_zero_everywhere() {
        let corpus = tiny_corpus::<f32>(12, 51);
        let outcomes: Vec<DecodeOutcome> =
            corpus.iter().map(|u| oracle_outcome(u, 240)).collect();
        let report = score_decodes(&corpus, &outcomes, Mode::Realm, 240, 0).unwrap();
        assert_eq!(report.wer, 0.0);
        assert_eq!(report.aer, Some(0.0));
        assert_eq!(report.ler, Some(0.0));
        assert_eq!(report.buckets.len(), 4);
        assert!(report.buckets.iter().all(|b| b.wer == 0.0));
        let tercile_total: usize = report.buckets[..3].iter().map(|b| b.utterances).sum();
        assert_eq!(tercile_total, 12);
    }

    #[test]
    fn empty_decodes_score_as_all_deletions() {
        let corpus = tiny_corpus::<f32>(4, 61);
        let outcomes: Vec<DecodeOutcome> = corpus
            .iter()
            .map(|u| DecodeOutcome {
                words: Vec::new(),
                emissions: Vec::new(),
                stats: DecodeStats {
                    chunks: u.alignment.total_chunks(240).unwrap(),
                    ..DecodeStats::default()
                },
            })
            .collect();
        let report = score_decodes(&corpus, &outcomes, Mode::Realm, 240, 0).unwrap();
        assert_eq!(report.wer, 1.0);
        let total_words: usize = corpus.iter().map(|u| u.alignment.words.len()).sum();
        assert_eq!(report.errors.deletions, total_words);
        assert_eq!(report.errors.substitutions + report.errors.insertions, 0);
        // Zero blank predictions never matches chunks+1.
        assert_eq!(report.ler, Some(1.0));
    }

    #[test]
    fn metrics_line_formats_missing_scores() {
        let report = EvalReport {
            wer: 0.03125,
            errors: EditBreakdown::default(),
            aer: None,
            ler: None,
            mean_loss: 1.25,
            buckets: Vec::new(),
        };
        assert_eq!(metrics_line(7, "dev", &report), "7\tdev\t0.0312\tn/a\tn/a\t1.2500");
        let report = EvalReport { aer: Some(0.5), ler: Some(0.0), ..report };
        assert_eq!(metrics_line(7, "dev", &report), "7\tdev\t0.0312\t0.5000\t0.0000\t1.2500");
    }

    /// End-to-end evaluate on an untrained model: rates are defined, loss
    /// is near uniform, and bucket sizes cover the corpus.
    #[test]
    fn evaluate_runs_end_to_end_untrained() {
        let model = Model::<f32>::new(tiny_model_config(6)).unwrap();
        let corpus = tiny_corpus::<f32>(6, 71);
        let report = evaluate(&model, &corpus, Mode::Realm, 0).unwrap();
        assert!(report.wer >= 0.0 && report.wer.is_finite());
        assert!(report.aer.is_some());
        assert!(report.ler.is_some());
        assert!(report.mean_loss.is_finite());
        let report = evaluate(&model, &corpus, Mode::SpeechLlm, 0).unwrap();
        assert_eq!(report.aer, None);
        assert_eq!(report.ler, None);
    }
}
