//! Scoring and benchmarking.
//!
//! Word error rate over transcripts, alignment error rate over per-chunk
//! emission times, length error rate over predicted blank counts, an
//! analytic decode-cost model for the three architecture families, and
//! wall-clock real-time-factor measurement with a per-stage breakdown.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::inference::{DecodeStats, Emission};
use crate::targets::{emission_chunk, AlignedUtterance, Mode};

/// Error counts from one edit-distance alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditBreakdown {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn add(&mut self, other: EditBreakdown) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
    }
}

#[derive(Clone, Copy)]
struct Cell {
    total: usize,
    b: EditBreakdown,
}

/// Levenshtein alignment with unit costs, two rows of state. Ties prefer
/// match/substitution, then deletion, then insertion; the split can differ
/// from other tie-break orders but the total never does.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditBreakdown {
    let cols = hypothesis.len() + 1;
    let mut prev: Vec<Cell> = (0..cols)
        .map(|j| Cell {
            total: j,
            b: EditBreakdown { insertions: j, ..EditBreakdown::default() },
        })
        .collect();
    let mut cur = prev.clone();
    for i in 1..=reference.len() {
        cur[0] = Cell {
            total: i,
            b: EditBreakdown { deletions: i, ..EditBreakdown::default() },
        };
        for j in 1..cols {
            let mut best = prev[j - 1];
            if reference[i - 1] != hypothesis[j - 1] {
                best.total += 1;
                best.b.substitutions += 1;
            }
            let mut del = prev[j];
            del.total += 1;
            del.b.deletions += 1;
            if del.total < best.total {
                best = del;
            }
            let mut ins = cur[j - 1];
            ins.total += 1;
            ins.b.insertions += 1;
            if ins.total < best.total {
                best = ins;
            }
            cur[j] = best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[cols - 1].b
}

/// Word error rate: (S+I+D) / |reference|. An empty reference scores the
/// hypothesis' insertions over a denominator of one.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> (f64, EditBreakdown) {
    let b = edit_distance(reference, hypothesis);
    (b.total() as f64 / reference.len().max(1) as f64, b)
}

/// Corpus-level WER: pooled edits over pooled reference words.
#[derive(Debug, Clone, Copy, Default)]
pub struct WerAccumulator {
    pub errors: EditBreakdown,
    pub ref_words: usize,
}

impl WerAccumulator {
    pub fn add<T: PartialEq>(&mut self, reference: &[T], hypothesis: &[T]) {
        self.errors.add(edit_distance(reference, hypothesis));
        self.ref_words += reference.len();
    }

    pub fn rate(&self) -> f64 {
        self.errors.total() as f64 / self.ref_words.max(1) as f64
    }
}

/// Per-chunk emission errors for one utterance: the edit distance between
/// expected and decoded words of every chunk, plus the reference word count.
/// Tail emissions (`after_chunk == None`) count toward the final chunk.
pub fn alignment_edits(
    reference: &AlignedUtterance,
    chunk_ms: u32,
    delay_chunks: u32,
    emissions: &[Emission],
) -> Result<(usize, usize)> {
    let total_chunks = reference.total_chunks(chunk_ms)?;
    let mut expected: Vec<Vec<u32>> = vec![Vec::new(); total_chunks];
    for w in &reference.words {
        expected[emission_chunk(w.end_ms, chunk_ms, delay_chunks, total_chunks)].push(w.token);
    }
    let mut decoded: Vec<Vec<u32>> = vec![Vec::new(); total_chunks];
    for e in emissions {
        let c = e.after_chunk.unwrap_or(total_chunks - 1).min(total_chunks - 1);
        decoded[c].push(e.token);
    }
    let edits = (0..total_chunks)
        .map(|c| edit_distance(&expected[c], &decoded[c]).total())
        .sum();
    Ok((edits, reference.words.len()))
}

/// Alignment error rate for one utterance; see [`alignment_edits`].
pub fn aer(
    reference: &AlignedUtterance,
    chunk_ms: u32,
    delay_chunks: u32,
    emissions: &[Emission],
) -> Result<f64> {
    let (edits, ref_words) = alignment_edits(reference, chunk_ms, delay_chunks, emissions)?;
    Ok(edits as f64 / ref_words.max(1) as f64)
}

/// Length error rate: the fraction of utterances whose predicted BLANK
/// count misses the expected `chunks + 1`. Samples are
/// `(predicted_blank_count, total_chunks)` pairs.
pub fn ler(samples: &[(u64, usize)]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let wrong = samples
        .iter()
        .filter(|(predicted, chunks)| *predicted != *chunks as u64 + 1)
        .count();
    wrong as f64 / samples.len() as f64
}

/// How many BLANKs a decode effectively predicted, for [`ler`] scoring.
///
/// The streaming decoder is never queried before the first chunk, so the
/// leading blank of the label sequence is counted as given; the time-aligned
/// baseline generates every blank itself; the prompted baseline has no
/// notion of length.
pub fn predicted_blank_count(mode: Mode, stats: &DecodeStats) -> Option<u64> {
    match mode {
        Mode::Realm => Some(stats.blank_predicts + 1),
        Mode::TimeAlignedLlm => Some(stats.blank_predicts),
        Mode::SpeechLlm => None,
    }
}

/// Symbols of the analytic per-utterance decode cost model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    /// T: audio duration in seconds.
    pub audio_seconds: f64,
    /// U: output token count.
    pub output_tokens: f64,
    /// f: chunk embeddings per second for the decoder-only models.
    pub chunk_rate: f64,
    /// f': encoder frames per second for the transducer family.
    pub rnnt_frame_rate: f64,
    /// Encoder cost per second of audio.
    pub enc_cost: f64,
    /// Decoder cost per consumed position.
    pub dec_cost: f64,
    /// Output-head cost per evaluation.
    pub out_cost: f64,
}

impl CostParams {
    /// The transducer's frame rate defaults to four times the chunk rate,
    /// which it needs for comparable accuracy.
    pub fn new(
        audio_seconds: f64,
        output_tokens: f64,
        chunk_rate: f64,
        enc_cost: f64,
        dec_cost: f64,
        out_cost: f64,
    ) -> Self {
        CostParams {
            audio_seconds,
            output_tokens,
            chunk_rate,
            rnnt_frame_rate: 4.0 * chunk_rate,
            enc_cost,
            dec_cost,
            out_cost,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.audio_seconds,
            self.output_tokens,
            self.chunk_rate,
            self.rnnt_frame_rate,
            self.enc_cost,
            self.dec_cost,
            self.out_cost,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("cost parameters must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Architecture families the cost model covers. The transducer exists here
/// only analytically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostArch {
    Realm,
    SpeechLlm,
    Rnnt,
}

impl CostArch {
    pub fn name(self) -> &'static str {
        match self {
            CostArch::Realm => "realm",
            CostArch::SpeechLlm => "speech_llm",
            CostArch::Rnnt => "rnnt",
        }
    }
}

impl std::fmt::Display for CostArch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CostArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [CostArch::Realm, CostArch::SpeechLlm, CostArch::Rnnt]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!("unknown architecture {s:?}, expected realm, speech_llm, or rnnt"))
            })
    }
}

/// Greedy decode cost. All families share the encoder pass and the per-word
/// decoder and output-head work; on top of that the streaming decoder pays
/// decoder plus output head for every chunk, the prompted baseline pays
/// only the decoder for its prefilled chunks, and the transducer pays the
/// output head at its higher frame rate.
pub fn cost_estimate(arch: CostArch, p: &CostParams) -> f64 {
    let common = p.audio_seconds * p.enc_cost + p.output_tokens * (p.dec_cost + p.out_cost);
    let per_chunk = p.audio_seconds * p.chunk_rate;
    match arch {
        CostArch::Realm => common + per_chunk * (p.dec_cost + p.out_cost),
        CostArch::SpeechLlm => common + per_chunk * p.dec_cost,
        CostArch::Rnnt => common + p.audio_seconds * p.rnnt_frame_rate * p.out_cost,
    }
}

/// Wall-clock decode speed relative to audio duration, with the decoder and
/// output-head shares taken from the instrumented step counters. Everything
/// else (encoder, bookkeeping) lands in `other_ns`.
#[derive(Debug, Clone)]
pub struct RtfReport {
    pub audio_ms: u64,
    pub wall: Duration,
    pub rtf: f64,
    pub decoder_ns: u128,
    pub output_head_ns: u128,
    pub other_ns: u128,
}

pub fn measure_rtf<F>(audio_ms: u64, decode: F) -> Result<RtfReport>
where
    F: FnOnce() -> Result<Vec<DecodeStats>>,
{
    if audio_ms == 0 {
        return Err(Error::Contract("cannot measure a real-time factor over zero audio".into()));
    }
    let t0 = Instant::now();
    let stats = decode()?;
    let wall = t0.elapsed();
    let decoder_ns: u128 = stats.iter().map(|s| s.steps.advance_ns).sum();
    let output_head_ns: u128 = stats.iter().map(|s| s.steps.output_ns).sum();
    Ok(RtfReport {
        audio_ms,
        wall,
        rtf: wall.as_secs_f64() / (audio_ms as f64 / 1000.0),
        decoder_ns,
        output_head_ns,
        other_ns: wall.as_nanos().saturating_sub(decoder_ns + output_head_ns),
    })
}

/// Plain-text table with left-aligned, width-padded columns.
pub fn format_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        debug_assert_eq!(row.len(), cols);
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    fn pad_row(cells: &[&str], widths: &[usize]) -> String {
        let line: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        format!("{}\n", line.join("  ").trim_end())
    }
    let separator: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let mut out = pad_row(headers, &widths);
    out.push_str(&pad_row(
        &separator.iter().map(String::as_str).collect::<Vec<_>>(),
        &widths,
    ));
    for row in rows {
        out.push_str(&pad_row(
            &row.iter().map(String::as_str).collect::<Vec<_>>(),
            &widths,
        ));
    }
    out
}
