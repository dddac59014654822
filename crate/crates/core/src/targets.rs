//! Training targets: interleaving time-aligned transcripts with audio chunks.
//!
//! A word whose audio ends inside chunk k is emitted right after the decoder
//! consumes chunk k (plus an optional fixed delay). BLANK fills every
//! position whose next input is audio (or the end-of-audio marker), so the
//! model learns to ask for more input when no word is due.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{self, Vocab, BLANK, EOS, IGNORE};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedWord {
    pub token: u32,
    pub start_ms: u32,
    pub end_ms: u32,
}

/// A transcript with exact word timings, plus the total audio length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedUtterance {
    pub words: Vec<AlignedWord>,
    pub end_ms: u32,
}

impl AlignedUtterance {
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = 0;
        for (i, w) in self.words.iter().enumerate() {
            if !vocab::is_word(w.token) {
                return Err(Error::Alignment(format!(
                    "word {i}: token {} is not a word id",
                    w.token
                )));
            }
            if w.start_ms >= w.end_ms {
                return Err(Error::Alignment(format!(
                    "word {i}: empty interval [{}, {})",
                    w.start_ms, w.end_ms
                )));
            }
            if w.start_ms < prev_end {
                return Err(Error::Alignment(format!(
                    "word {i}: starts at {} before previous end {}",
                    w.start_ms, prev_end
                )));
            }
            if w.end_ms > self.end_ms {
                return Err(Error::Alignment(format!(
                    "word {i}: ends at {} past utterance end {}",
                    w.end_ms, self.end_ms
                )));
            }
            prev_end = w.end_ms;
        }
        Ok(())
    }

    /// Whole chunks in the audio; trailing audio shorter than a chunk merges
    /// into the final chunk.
    pub fn total_chunks(&self, chunk_ms: u32) -> Result<usize> {
        let c = (self.end_ms / chunk_ms) as usize;
        if c == 0 {
            return Err(Error::Alignment(format!(
                "utterance of {} ms is shorter than one {} ms chunk",
                self.end_ms, chunk_ms
            )));
        }
        Ok(c)
    }

    pub fn transcript(&self) -> Vec<u32> {
        self.words.iter().map(|w| w.token).collect()
    }
}

/// 0-based index of the chunk after which a word ending at `end_ms` is
/// emitted. Words ending exactly on a boundary belong to the chunk they
/// close; emissions never land past the final chunk.
pub fn emission_chunk(end_ms: u32, chunk_ms: u32, delay_chunks: u32, total_chunks: usize) -> usize {
    debug_assert!(end_ms > 0);
    let k = (end_ms + chunk_ms - 1) / chunk_ms; // 1-based ceil
    ((k - 1 + delay_chunks) as usize).min(total_chunks - 1)
}

/// Which of the three trainable decodings a model is built for. Selects the
/// target builder, the decode procedure, and the length-metric convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Streaming: words interleaved with audio chunks, BLANK-terminated.
    Realm,
    /// Prompted baseline: full audio first, then the plain transcript.
    SpeechLlm,
    /// Prompted baseline that generates the blank-interleaved label string.
    TimeAlignedLlm,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Realm, Mode::SpeechLlm, Mode::TimeAlignedLlm];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Realm => "realm",
            Mode::SpeechLlm => "speech_llm",
            Mode::TimeAlignedLlm => "time_aligned_llm",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}, expected one of realm, speech_llm, time_aligned_llm")))
    }
}

/// One position of decoder input: a control token, an emitted word, or an
/// audio chunk embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum InputItem<S> {
    Bos,
    Frame { index: usize, embedding: Vec<S> },
    Token(u32),
    /// End-of-audio marker; embeds as the EOS token's row.
    EosEmb,
}

impl<S> InputItem<S> {
    pub fn is_frame(&self) -> bool {
        matches!(self, InputItem::Frame { .. })
    }
}

/// Teacher-forcing sample: `targets[i]` is the label predicted after the
/// decoder has consumed `inputs[..=i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterleavedSample<S> {
    pub inputs: Vec<InputItem<S>>,
    pub targets: Vec<u32>,
}

impl<S: Scalar> InterleavedSample<S> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.inputs.iter().filter(|i| i.is_frame()).count()
    }

    /// Structural checks for streaming-mode samples.
    pub fn validate_realm(&self) -> Result<()> {
        if self.inputs.len() != self.targets.len() {
            return Err(Error::Contract(format!(
                "sample: {} inputs vs {} targets",
                self.inputs.len(),
                self.targets.len()
            )));
        }
        if self.targets.last() != Some(&EOS) {
            return Err(Error::Contract("sample: last target must be EOS".into()));
        }
        let blanks = self.targets.iter().filter(|&&t| t == BLANK).count();
        if blanks != self.frame_count() + 1 {
            return Err(Error::Contract(format!(
                "sample: {blanks} BLANK targets for {} frames",
                self.frame_count()
            )));
        }
        for i in 0..self.targets.len() {
            let next_requests_input = matches!(
                self.inputs.get(i + 1),
                Some(InputItem::Frame { .. }) | Some(InputItem::EosEmb)
            );
            if (self.targets[i] == BLANK) != next_requests_input {
                return Err(Error::Contract(format!(
                    "sample: BLANK/input mismatch at position {i}"
                )));
            }
        }
        for item in &self.inputs {
            if let InputItem::Token(id) = item {
                if !vocab::is_word(*id) {
                    return Err(Error::Contract(format!(
                        "sample: non-word token {id} in history"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_embeddings<S: Scalar>(
    a: &AlignedUtterance,
    chunk_embeddings: &Tensor<S>,
    chunk_ms: u32,
) -> Result<usize> {
    a.validate()?;
    let chunks = a.total_chunks(chunk_ms)?;
    if chunk_embeddings.rows() != chunks || chunk_embeddings.shape.len() != 2 {
        return Err(Error::Shape {
            op: "build_sample",
            lhs: vec![chunks],
            rhs: chunk_embeddings.shape.to_vec(),
        });
    }
    Ok(chunks)
}

fn frame_item<S: Scalar>(chunk_embeddings: &Tensor<S>, index: usize) -> InputItem<S> {
    InputItem::Frame {
        index,
        embedding: chunk_embeddings.row(index).to_vec(),
    }
}

/// Streaming-mode sample: chunks and emitted words interleaved by emission
/// time, BLANK wherever the next input is audio (or end-of-audio).
pub fn build_realm_sample<S: Scalar>(
    a: &AlignedUtterance,
    chunk_embeddings: &Tensor<S>,
    chunk_ms: u32,
    delay_chunks: u32,
) -> Result<InterleavedSample<S>> {
    let chunks = check_embeddings(a, chunk_embeddings, chunk_ms)?;
    let emit_at: Vec<usize> = a
        .words
        .iter()
        .map(|w| emission_chunk(w.end_ms, chunk_ms, delay_chunks, chunks))
        .collect();

    let mut inputs = vec![InputItem::Bos];
    let mut targets = Vec::new();
    let mut next_word = 0;
    for c in 0..chunks {
        targets.push(BLANK);
        inputs.push(frame_item(chunk_embeddings, c));
        while next_word < a.words.len() && emit_at[next_word] <= c {
            targets.push(a.words[next_word].token);
            inputs.push(InputItem::Token(a.words[next_word].token));
            next_word += 1;
        }
    }
    targets.push(BLANK);
    inputs.push(InputItem::EosEmb);
    // Emission chunks are clamped, so this only fires on malformed input.
    while next_word < a.words.len() {
        targets.push(a.words[next_word].token);
        inputs.push(InputItem::Token(a.words[next_word].token));
        next_word += 1;
    }
    targets.push(EOS);

    let sample = InterleavedSample { inputs, targets };
    debug_assert!(sample.validate_realm().is_ok());
    Ok(sample)
}

/// Prompted-LM sample: all audio first, then the transcript. Prompt
/// positions carry [`IGNORE`] and are excluded from the loss.
pub fn build_speech_llm_sample<S: Scalar>(
    a: &AlignedUtterance,
    chunk_embeddings: &Tensor<S>,
    chunk_ms: u32,
) -> Result<InterleavedSample<S>> {
    let chunks = check_embeddings(a, chunk_embeddings, chunk_ms)?;
    let mut inputs = vec![InputItem::Bos];
    inputs.extend((0..chunks).map(|c| frame_item(chunk_embeddings, c)));
    inputs.push(InputItem::EosEmb);
    let mut targets = vec![IGNORE; chunks + 1];
    for w in &a.words {
        targets.push(w.token);
        inputs.push(InputItem::Token(w.token));
    }
    targets.push(EOS);
    Ok(InterleavedSample { inputs, targets })
}

/// Prompted-LM sample whose generated string is the full blank-interleaved
/// label sequence. BLANKs appear as genuine input tokens here: on the
/// generation side there is no audio chunk to stand in for them.
pub fn build_time_aligned_llm_sample<S: Scalar>(
    a: &AlignedUtterance,
    chunk_embeddings: &Tensor<S>,
    chunk_ms: u32,
) -> Result<InterleavedSample<S>> {
    let chunks = check_embeddings(a, chunk_embeddings, chunk_ms)?;
    let label_string = build_realm_sample(a, chunk_embeddings, chunk_ms, 0)?.targets;

    let mut inputs = vec![InputItem::Bos];
    inputs.extend((0..chunks).map(|c| frame_item(chunk_embeddings, c)));
    inputs.push(InputItem::EosEmb);
    let mut targets = vec![IGNORE; chunks + 1];
    targets.extend(&label_string);
    // Everything but the closing EOS is fed back as input.
    inputs.extend(
        label_string[..label_string.len() - 1]
            .iter()
            .map(|&t| InputItem::Token(t)),
    );
    Ok(InterleavedSample { inputs, targets })
}

/// `utt_id<TAB>end_ms<TAB>word:start:end,...` (words field empty for an
/// empty transcript).
pub fn format_alignment_line(utt_id: &str, a: &AlignedUtterance, vocab: &Vocab) -> String {
    let words = a
        .words
        .iter()
        .map(|w| format!("{}:{}:{}", vocab.surface(w.token), w.start_ms, w.end_ms))
        .collect::<Vec<_>>()
        .join(",");
    format!("{utt_id}\t{}\t{words}", a.end_ms)
}

pub fn parse_alignment_line(line: &str, vocab: &Vocab) -> Result<(String, AlignedUtterance)> {
    let parse_err = |detail: String| Error::Parse {
        what: "alignment line",
        detail,
    };
    let mut fields = line.splitn(3, '\t');
    let utt_id = fields
        .next()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| parse_err("missing utterance id".into()))?;
    let end_ms: u32 = fields
        .next()
        .ok_or_else(|| parse_err("missing end_ms".into()))?
        .parse()
        .map_err(|e| parse_err(format!("bad end_ms: {e}")))?;
    let words_field = fields.next().unwrap_or("");

    let mut words = Vec::new();
    for part in words_field.split(',').filter(|p| !p.is_empty()) {
        let mut rev = part.rsplitn(3, ':');
        let end = rev.next();
        let start = rev.next();
        let surface = rev.next();
        let (Some(surface), Some(start), Some(end)) = (surface, start, end) else {
            return Err(parse_err(format!("bad word entry {part:?}")));
        };
        let token = match surface.parse::<u32>() {
            Ok(id) if (id as usize) < vocab.size() => id,
            _ => vocab
                .id_of(surface)
                .ok_or_else(|| parse_err(format!("unknown word {surface:?}")))?,
        };
        words.push(AlignedWord {
            token,
            start_ms: start
                .parse()
                .map_err(|e| parse_err(format!("bad start in {part:?}: {e}")))?,
            end_ms: end
                .parse()
                .map_err(|e| parse_err(format!("bad end in {part:?}: {e}")))?,
        });
    }
    let a = AlignedUtterance {
        words,
        end_ms,
    };
    a.validate()?;
    Ok((utt_id.to_string(), a))
}

/// The worked six-word example used by demos and the test suite:
/// "and hand it over to you" with exact timings, 2180 ms of audio.
pub fn six_word_utterance() -> (AlignedUtterance, Vocab) {
    let vocab = Vocab::from_words(
        ["and", "hand", "it", "over", "to", "you"]
            .map(String::from),
    );
    let mk = |surface: &str, start, end| AlignedWord {
        token: vocab.id_of(surface).unwrap(),
        start_ms: start,
        end_ms: end,
    };
    let a = AlignedUtterance {
        words: vec![
            mk("and", 140, 380),
            mk("hand", 460, 740),
            mk("it", 740, 860),
            mk("over", 900, 1180),
            mk("to", 1180, 1380),
            mk("you", 1380, 1700),
        ],
        end_ms: 2180,
    };
    (a, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::BOS;

    fn zeros_embeddings(chunks: usize) -> Tensor<f32> {
        Tensor::zeros(vec![chunks, 4])
    }

    /// Independent oracle: group words by their (1-based) ceil-rounded
    /// emission chunk, then flatten chunk by chunk.
    fn oracle_label_string(a: &AlignedUtterance, chunk_ms: u32, delay: u32) -> Vec<u32> {
        let total = (a.end_ms / chunk_ms) as usize;
        let mut by_chunk: Vec<Vec<u32>> = vec![Vec::new(); total];
        for w in &a.words {
            let mut k = ((w.end_ms + chunk_ms - 1) / chunk_ms + delay) as usize;
            if k > total {
                k = total;
            }
            by_chunk[k - 1].push(w.token);
        }
        let mut s = Vec::new();
        for words in by_chunk {
            s.push(BLANK);
            s.extend(words);
        }
        s.push(BLANK);
        s.push(EOS);
        s
    }

    fn token_of(item: &InputItem<f32>) -> String {
        match item {
            InputItem::Bos => "BOS".into(),
            InputItem::Frame { index, .. } => format!("f{}", index + 1),
            InputItem::Token(t) => format!("t{t}"),
            InputItem::EosEmb => "EOSEMB".into(),
        }
    }

    #[test]
    fn six_word_sample_matches_published_interleaving() {
        let (a, vocab) = six_word_utterance();
        assert_eq!(a.total_chunks(240).unwrap(), 9);
        let sample = build_realm_sample(&a, &zeros_embeddings(9), 240, 0).unwrap();
        let id = |s: &str| vocab.id_of(s).unwrap();
        let (and, hand, it, over, to, you) = (
            id("and"),
            id("hand"),
            id("it"),
            id("over"),
            id("to"),
            id("you"),
        );
        assert_eq!(
            sample.targets,
            vec![
                BLANK, BLANK, and, BLANK, BLANK, hand, it, BLANK, over, BLANK, to, BLANK, BLANK,
                you, BLANK, BLANK, EOS
            ]
        );
        let input_names: Vec<String> = sample.inputs.iter().map(token_of).collect();
        let expected: Vec<String> = [
            "BOS", "f1", "f2", "t:and", "f3", "f4", "t:hand", "t:it", "f5", "t:over", "f6",
            "t:to", "f7", "f8", "t:you", "f9", "EOSEMB",
        ]
        .iter()
        .map(|s| {
            s.strip_prefix("t:")
                .map(|w| format!("t{}", id(w)))
                .unwrap_or_else(|| s.to_string())
        })
        .collect();
        assert_eq!(input_names, expected);
        sample.validate_realm().unwrap();
    }

    #[test]
    fn empty_transcript_is_all_blanks_then_eos() {
        let a = AlignedUtterance {
            words: vec![],
            end_ms: 3 * 240,
        };
        let sample = build_realm_sample(&a, &zeros_embeddings(3), 240, 0).unwrap();
        assert_eq!(sample.targets, vec![BLANK, BLANK, BLANK, BLANK, EOS]);
        sample.validate_realm().unwrap();
    }

    #[test]
    fn delay_shifts_emissions_and_clamps_at_final_chunk() {
        let (a, _) = six_word_utterance();
        for delay in 0..4u32 {
            let sample = build_realm_sample(&a, &zeros_embeddings(9), 240, delay).unwrap();
            assert_eq!(sample.targets, oracle_label_string(&a, 240, delay));
            sample.validate_realm().unwrap();
        }
        // With a large delay everything rides on the final chunk.
        let sample = build_realm_sample(&a, &zeros_embeddings(9), 240, 50).unwrap();
        let tail = &sample.targets[sample.targets.len() - 8..];
        assert_eq!(&tail[..6], a.transcript().as_slice());
        assert_eq!(tail[6], BLANK);
        assert_eq!(tail[7], EOS);
    }

    #[test]
    fn boundary_word_emits_in_closing_chunk() {
        assert_eq!(emission_chunk(240, 240, 0, 3), 0);
        assert_eq!(emission_chunk(241, 240, 0, 3), 1);
        assert_eq!(emission_chunk(480, 240, 0, 3), 1);
        // Delay applies before clamping.
        assert_eq!(emission_chunk(240, 240, 2, 3), 2);
        assert_eq!(emission_chunk(700, 240, 2, 3), 2);
    }

    #[test]
    fn speech_llm_sample_prompts_then_transcribes() {
        let (a, _) = six_word_utterance();
        let sample = build_speech_llm_sample(&a, &zeros_embeddings(9), 240).unwrap();
        let mut want = vec![IGNORE; 10];
        want.extend(a.transcript());
        want.push(EOS);
        assert_eq!(sample.targets, want);
        assert_eq!(sample.inputs.len(), sample.targets.len());
        assert!(matches!(sample.inputs[10], InputItem::EosEmb));
        assert!(matches!(sample.inputs[11], InputItem::Token(_)));
    }

    #[test]
    fn speech_llm_empty_transcript() {
        let a = AlignedUtterance {
            words: vec![],
            end_ms: 720,
        };
        let sample = build_speech_llm_sample(&a, &zeros_embeddings(3), 240).unwrap();
        let mut want = vec![IGNORE; 4];
        want.push(EOS);
        assert_eq!(sample.targets, want);
    }

    #[test]
    fn time_aligned_sample_generates_full_label_string() {
        let (a, _) = six_word_utterance();
        let sample = build_time_aligned_llm_sample(&a, &zeros_embeddings(9), 240).unwrap();
        let label_string = oracle_label_string(&a, 240, 0);
        let mut want = vec![IGNORE; 10];
        want.extend(&label_string);
        assert_eq!(sample.targets, want);
        // Generated BLANKs are real input tokens here.
        let blank_inputs = sample
            .inputs
            .iter()
            .filter(|i| matches!(i, InputItem::Token(BLANK)))
            .count();
        // All 10 BLANK labels are fed back; only the final EOS is not.
        assert_eq!(blank_inputs, 10);
        assert_eq!(sample.inputs.len(), sample.targets.len());
    }

    #[test]
    fn time_aligned_empty_transcript() {
        let a = AlignedUtterance {
            words: vec![],
            end_ms: 720,
        };
        let sample = build_time_aligned_llm_sample(&a, &zeros_embeddings(3), 240).unwrap();
        let want_string = [BLANK, BLANK, BLANK, BLANK, EOS];
        assert_eq!(&sample.targets[4..], &want_string);
    }

    #[test]
    fn rejects_overlapping_and_out_of_range_words() {
        let mk = |token, start_ms, end_ms| AlignedWord {
            token,
            start_ms,
            end_ms,
        };
        let overlapping = AlignedUtterance {
            words: vec![mk(3, 0, 300), mk(4, 200, 500)],
            end_ms: 960,
        };
        assert!(matches!(
            overlapping.validate().unwrap_err(),
            Error::Alignment(_)
        ));
        let past_end = AlignedUtterance {
            words: vec![mk(3, 0, 1000)],
            end_ms: 960,
        };
        assert!(past_end.validate().is_err());
        let control_token = AlignedUtterance {
            words: vec![mk(BOS, 0, 100)],
            end_ms: 960,
        };
        assert!(control_token.validate().is_err());
    }

    #[test]
    fn rejects_chunk_count_mismatch() {
        let (a, _) = six_word_utterance();
        let err = build_realm_sample(&a, &zeros_embeddings(5), 240, 0).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn alignment_line_round_trips() {
        let (a, vocab) = six_word_utterance();
        let line = format_alignment_line("u000123", &a, &vocab);
        let (id, parsed) = parse_alignment_line(&line, &vocab).unwrap();
        assert_eq!(id, "u000123");
        assert_eq!(parsed, a);

        let empty = AlignedUtterance {
            words: vec![],
            end_ms: 480,
        };
        let line = format_alignment_line("u9", &empty, &vocab);
        let (_, parsed) = parse_alignment_line(&line, &vocab).unwrap();
        assert_eq!(parsed, empty);
    }

    fn arb_utterance(seed: u64) -> AlignedUtterance {
        let mut rng = crate::rng::stream(seed, 3);
        use rand::Rng;
        let n_words = rng.gen_range(0..8);
        let mut t = 0u32;
        let mut words = Vec::new();
        for _ in 0..n_words {
            t += rng.gen_range(0..20) * 20;
            let dur = rng.gen_range(1..=24) * 20;
            words.push(AlignedWord {
                token: rng.gen_range(3..20),
                start_ms: t,
                end_ms: t + dur,
            });
            t += dur;
        }
        let end_ms = (t + rng.gen_range(0..20) * 20).max(240);
        AlignedUtterance { words, end_ms }
    }

    #[test]
    fn random_utterances_keep_invariants_and_word_order() {
        for seed in 0..300 {
            let a = arb_utterance(seed);
            let chunks = a.total_chunks(240).unwrap();
            let emb = zeros_embeddings(chunks);
            for delay in [0u32, 1, 2] {
                let sample = build_realm_sample(&a, &emb, 240, delay).unwrap();
                sample.validate_realm().unwrap();
                let words: Vec<u32> = sample
                    .targets
                    .iter()
                    .copied()
                    .filter(|&t| vocab::is_word(t))
                    .collect();
                assert_eq!(words, a.transcript(), "seed {seed} delay {delay}");
                assert_eq!(sample.targets, oracle_label_string(&a, 240, delay));
            }
        }
    }

    proptest::proptest! {
        /// Emission chunks are monotone in end time and never exceed the
        /// final chunk.
        #[test]
        fn emission_chunk_monotone(
            end_a in 1u32..5000,
            bump in 0u32..500,
            delay in 0u32..4,
        ) {
            let total = 10;
            let a = emission_chunk(end_a, 240, delay, total);
            let b = emission_chunk(end_a + bump, 240, delay, total);
            proptest::prop_assert!(a <= b);
            proptest::prop_assert!(b < total);
        }
    }
}
