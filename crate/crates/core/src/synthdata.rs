//! Synthetic speech-like corpora.
//!
//! Every word type gets a fixed random signature of a few frames; an
//! utterance lays words out on a silence timeline with random durations and
//! gaps, then renders frames as the time-stretched signature plus Gaussian
//! noise (silence is noise alone). Generation is keyed by (seed, split,
//! index), so any utterance can be regenerated independently and the whole
//! corpus is byte-stable.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::targets::{format_alignment_line, parse_alignment_line, AlignedUtterance, AlignedWord};
use crate::tensor::Tensor;
use crate::vocab::{Vocab, FIRST_WORD};

const FRAMES_MAGIC: &[u8; 4] = b"RLFR";
const SIGNATURE_FRAMES: usize = 4;
/// Stream ids 0 (model init) and 1 (signatures) are reserved; split s,
/// utterance i draws from stream (s + 2) << 32 | i.
const SIGNATURE_STREAM: u64 = 1;
const SPLIT_STREAM_BASE: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Distinct word types (vocabulary size minus the three control tokens).
    pub n_words: usize,
    pub raw_frame_dim: usize,
    pub raw_frame_ms: u32,
    /// Inclusive duration range of one spoken word.
    pub word_ms: (u32, u32),
    /// Inclusive silence range before, between, and after words.
    pub gap_ms: (u32, u32),
    pub words_per_utt: (usize, usize),
    pub noise_sigma: f64,
    /// Utterances are padded with silence up to this length.
    pub min_utterance_ms: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_words: 20,
            raw_frame_dim: 8,
            raw_frame_ms: 20,
            word_ms: (140, 400),
            gap_ms: (0, 200),
            words_per_utt: (2, 8),
            noise_sigma: 0.1,
            min_utterance_ms: 240,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_words == 0 || self.raw_frame_dim == 0 || self.raw_frame_ms == 0 {
            return fail("n_words, raw_frame_dim, raw_frame_ms must be positive".into());
        }
        if self.word_ms.0 == 0 || self.word_ms.0 > self.word_ms.1 {
            return fail(format!("bad word_ms range {:?}", self.word_ms));
        }
        if self.gap_ms.0 > self.gap_ms.1 || self.words_per_utt.0 > self.words_per_utt.1 {
            return fail("empty gap_ms or words_per_utt range".into());
        }
        if self.words_per_utt.0 == 0 {
            return fail("words_per_utt must start at 1".into());
        }
        if self.noise_sigma < 0.0 {
            return fail(format!("negative noise_sigma {}", self.noise_sigma));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::synthetic(self.n_words)
    }

    /// One fixed signature per word type, `SIGNATURE_FRAMES` rows each.
    pub fn word_signatures<S: Scalar>(&self) -> Vec<Vec<S>> {
        let mut r = rng::stream(self.seed, SIGNATURE_STREAM);
        (0..self.n_words)
            .map(|_| {
                (0..SIGNATURE_FRAMES * self.raw_frame_dim)
                    .map(|_| S::from_f64(rng::normal(&mut r)))
                    .collect()
            })
            .collect()
    }
}

/// Per-split generation request; `words_per_utt`, when set, overrides the
/// spec (used to make a long-utterance split).
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub name: String,
    pub count: usize,
    pub words_per_utt: Option<(usize, usize)>,
}

impl SplitSpec {
    pub fn new(name: &str, count: usize) -> Self {
        SplitSpec { name: name.to_string(), count, words_per_utt: None }
    }

    pub fn with_words(mut self, range: (usize, usize)) -> Self {
        self.words_per_utt = Some(range);
        self
    }
}

fn gen_alignment(spec: &SynthSpec, words_range: (usize, usize), r: &mut ChaCha8Rng) -> AlignedUtterance {
    let n = r.gen_range(words_range.0..=words_range.1);
    let mut words = Vec::with_capacity(n);
    let mut t = r.gen_range(spec.gap_ms.0..=spec.gap_ms.1);
    for _ in 0..n {
        let token = FIRST_WORD + r.gen_range(0..spec.n_words) as u32;
        let dur = r.gen_range(spec.word_ms.0..=spec.word_ms.1);
        words.push(AlignedWord { token, start_ms: t, end_ms: t + dur });
        t += dur + r.gen_range(spec.gap_ms.0..=spec.gap_ms.1);
    }
    let end = t.max(spec.min_utterance_ms);
    // Pad to the frame grid so the rendered frame count covers everything.
    let end_ms = end.div_ceil(spec.raw_frame_ms) * spec.raw_frame_ms;
    AlignedUtterance { words, end_ms }
}

/// Renders frames for an alignment: each frame is sigma-scaled noise, plus
/// the word's signature segment when the frame starts inside a word. The
/// signature is stretched to the word by nearest-neighbor segment lookup.
fn render_frames<S: Scalar>(
    spec: &SynthSpec,
    signatures: &[Vec<S>],
    a: &AlignedUtterance,
    r: &mut ChaCha8Rng,
) -> Tensor<S> {
    let fm = spec.raw_frame_ms;
    let dim = spec.raw_frame_dim;
    let n_frames = (a.end_ms / fm) as usize;
    let sigma = spec.noise_sigma;
    let mut data = Vec::with_capacity(n_frames * dim);
    let mut word_iter = a.words.iter().peekable();
    for f in 0..n_frames {
        let start = f as u32 * fm;
        while word_iter.peek().map_or(false, |w| w.end_ms <= start) {
            word_iter.next();
        }
        let segment = word_iter.peek().and_then(|w| {
            if start >= w.start_ms && start < w.end_ms {
                let span = (w.end_ms - w.start_ms) as usize;
                let offset = (start - w.start_ms) as usize;
                let seg = offset * SIGNATURE_FRAMES / span;
                let sig = &signatures[(w.token - FIRST_WORD) as usize];
                Some(&sig[seg * dim..(seg + 1) * dim])
            } else {
                None
            }
        });
        for j in 0..dim {
            let noise = S::from_f64(sigma * rng::normal(r));
            data.push(segment.map_or(noise, |s| s[j] + noise));
        }
    }
    Tensor::from_vec(vec![n_frames, dim], data).unwrap()
}

fn utt_stream(split_ordinal: usize, index: usize) -> u64 {
    ((split_ordinal as u64 + SPLIT_STREAM_BASE) << 32) | index as u64
}

/// Regenerates one utterance from scratch; alignment and audio depend only
/// on (spec, split ordinal, index).
pub fn gen_utterance<S: Scalar>(
    spec: &SynthSpec,
    signatures: &[Vec<S>],
    words_range: (usize, usize),
    split_ordinal: usize,
    index: usize,
) -> (AlignedUtterance, Tensor<S>) {
    let mut r = rng::stream(spec.seed, utt_stream(split_ordinal, index));
    let a = gen_alignment(spec, words_range, &mut r);
    let frames = render_frames(spec, signatures, &a, &mut r);
    (a, frames)
}

#[derive(Debug, Clone)]
pub struct Utterance<S> {
    pub id: String,
    pub alignment: AlignedUtterance,
    pub frames: Tensor<S>,
}

#[derive(Debug)]
pub struct Corpus<S> {
    pub vocab: Vocab,
    pub raw_frame_dim: usize,
    pub raw_frame_ms: u32,
    pub splits: BTreeMap<String, Vec<Utterance<S>>>,
}

impl<S: Scalar> Corpus<S> {
    pub fn split(&self, name: &str) -> Result<&[Utterance<S>]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("corpus has no split {name:?}")))
    }

    pub fn total_audio_ms(&self, name: &str) -> Result<u64> {
        Ok(self.split(name)?.iter().map(|u| u.alignment.end_ms as u64).sum())
    }
}

fn alignments_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.alignments.tsv"))
}

fn frames_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.frames.bin"))
}

/// Generates and writes a corpus: `vocab.txt`, `meta.txt`, `manifest.tsv`,
/// and per split an alignments TSV plus a frames blob.
pub fn gen_corpus<S: Scalar>(dir: &Path, spec: &SynthSpec, splits: &[SplitSpec]) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let signatures = spec.word_signatures::<S>();
    let vocab = spec.vocab();

    let vocab_path = dir.join("vocab.txt");
    fs::write(&vocab_path, vocab.to_lines()).map_err(|e| Error::io(&vocab_path, e))?;

    let meta_path = dir.join("meta.txt");
    let meta = format!(
        "raw_frame_dim={}\nraw_frame_ms={}\nn_words={}\nnoise_sigma={}\nseed={}\n",
        spec.raw_frame_dim, spec.raw_frame_ms, spec.n_words, spec.noise_sigma, spec.seed
    );
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;

    let mut manifest = String::new();
    for (ordinal, split) in splits.iter().enumerate() {
        let words_range = split.words_per_utt.unwrap_or(spec.words_per_utt);
        let mut lines = String::new();
        let fpath = frames_path(dir, &split.name);
        let file = fs::File::create(&fpath).map_err(|e| Error::io(&fpath, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(FRAMES_MAGIC).map_err(|e| Error::io(&fpath, e))?;
        w.write_all(&(spec.raw_frame_dim as u32).to_le_bytes())
            .map_err(|e| Error::io(&fpath, e))?;
        w.write_all(&(split.count as u32).to_le_bytes())
            .map_err(|e| Error::io(&fpath, e))?;
        for i in 0..split.count {
            let (a, frames) = gen_utterance::<S>(spec, &signatures, words_range, ordinal, i);
            let id = format!("{}-{i:05}", split.name);
            lines.push_str(&format_alignment_line(&id, &a, &vocab));
            lines.push('\n');
            w.write_all(&(frames.shape[0] as u32).to_le_bytes())
                .map_err(|e| Error::io(&fpath, e))?;
            for v in &frames.data {
                w.write_all(&v.as_f32().to_le_bytes()).map_err(|e| Error::io(&fpath, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&fpath, e))?;
        let apath = alignments_path(dir, &split.name);
        fs::write(&apath, lines).map_err(|e| Error::io(&apath, e))?;
        manifest.push_str(&format!("{}\t{}\n", split.name, split.count));
    }
    let mpath = dir.join("manifest.tsv");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

fn parse_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            what: "meta line",
            detail: line.to_string(),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn meta_field<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &'static str) -> Result<T> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or(Error::Parse { what: "meta field", detail: key.to_string() })
}

fn read_frames_blob<S: Scalar>(path: &Path, expect_dim: usize) -> Result<Vec<Tensor<S>>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Parse { what: "frames blob", detail };
    if bytes.len() < 12 || &bytes[..4] != FRAMES_MAGIC {
        return Err(bad(format!("{}: bad magic or truncated header", path.display())));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim != expect_dim {
        return Err(bad(format!("{}: frame dim {dim}, meta says {expect_dim}", path.display())));
    }
    let mut out = Vec::with_capacity(count);
    let mut off = 12;
    for u in 0..count {
        if off + 4 > bytes.len() {
            return Err(bad(format!("{}: truncated at utterance {u}", path.display())));
        }
        let n = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        let need = n * dim * 4;
        if off + need > bytes.len() {
            return Err(bad(format!("{}: truncated at utterance {u}", path.display())));
        }
        let data = bytes[off..off + need]
            .chunks_exact(4)
            .map(|b| S::from_f32(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        off += need;
        out.push(Tensor::from_vec(vec![n, dim], data)?);
    }
    if off != bytes.len() {
        return Err(bad(format!("{}: {} trailing bytes", path.display(), bytes.len() - off)));
    }
    Ok(out)
}

impl<S: Scalar> Corpus<S> {
    pub fn load(dir: &Path) -> Result<Corpus<S>> {
        let vpath = dir.join("vocab.txt");
        let vtext = fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?;
        let vocab = Vocab::from_lines(&vtext)?;

        let meta = parse_meta(&dir.join("meta.txt"))?;
        let raw_frame_dim: usize = meta_field(&meta, "raw_frame_dim")?;
        let raw_frame_ms: u32 = meta_field(&meta, "raw_frame_ms")?;

        let mpath = dir.join("manifest.tsv");
        let mtext = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut splits = BTreeMap::new();
        for line in mtext.lines().filter(|l| !l.trim().is_empty()) {
            let (name, count) = line.split_once('\t').ok_or_else(|| Error::Parse {
                what: "manifest line",
                detail: line.to_string(),
            })?;
            let count: usize = count.parse().map_err(|_| Error::Parse {
                what: "manifest count",
                detail: line.to_string(),
            })?;

            let apath = alignments_path(dir, name);
            let atext = fs::read_to_string(&apath).map_err(|e| Error::io(&apath, e))?;
            let frames = read_frames_blob::<S>(&frames_path(dir, name), raw_frame_dim)?;
            let mut utts = Vec::with_capacity(count);
            for (line, frames) in atext.lines().zip(frames.into_iter()) {
                let (id, alignment) = parse_alignment_line(line, &vocab)?;
                let expect = (alignment.end_ms / raw_frame_ms) as usize;
                if frames.shape[0] != expect {
                    return Err(Error::Contract(format!(
                        "{id}: {} frames on disk, alignment implies {expect}",
                        frames.shape[0]
                    )));
                }
                alignment.validate()?;
                utts.push(Utterance { id, alignment, frames });
            }
            if utts.len() != count {
                return Err(Error::Contract(format!(
                    "split {name}: manifest says {count}, found {}",
                    utts.len()
                )));
            }
            splits.insert(name.to_string(), utts);
        }
        Ok(Corpus { vocab, raw_frame_dim, raw_frame_ms, splits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab;

    fn spec() -> SynthSpec {
        SynthSpec { n_words: 5, raw_frame_dim: 6, seed: 42, ..SynthSpec::default() }
    }

    fn splits() -> Vec<SplitSpec> {
        vec![
            SplitSpec::new("train", 12),
            SplitSpec::new("dev", 5),
            SplitSpec::new("long", 3).with_words((10, 16)),
        ]
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        gen_corpus::<f32>(d1.path(), &spec(), &splits()).unwrap();
        gen_corpus::<f32>(d2.path(), &spec(), &splits()).unwrap();
        for file in ["train.frames.bin", "train.alignments.tsv", "dev.frames.bin", "vocab.txt"] {
            let a = fs::read(d1.path().join(file)).unwrap();
            let b = fs::read(d2.path().join(file)).unwrap();
            assert_eq!(a, b, "{file}");
        }
        let mut reseeded = spec();
        reseeded.seed = 43;
        let d3 = tempfile::tempdir().unwrap();
        gen_corpus::<f32>(d3.path(), &reseeded, &splits()).unwrap();
        assert_ne!(
            fs::read(d1.path().join("train.frames.bin")).unwrap(),
            fs::read(d3.path().join("train.frames.bin")).unwrap()
        );
    }

    #[test]
    fn alignments_are_valid_and_within_configured_ranges() {
        let s = spec();
        let sigs = s.word_signatures::<f32>();
        for i in 0..200 {
            let (a, frames) = gen_utterance::<f32>(&s, &sigs, s.words_per_utt, 0, i);
            a.validate().unwrap();
            assert_eq!(a.end_ms % s.raw_frame_ms, 0);
            assert!(a.end_ms >= s.min_utterance_ms);
            assert_eq!(frames.shape, vec![(a.end_ms / s.raw_frame_ms) as usize, s.raw_frame_dim]);
            assert!(a.words.len() >= s.words_per_utt.0 && a.words.len() <= s.words_per_utt.1);
            for w in &a.words {
                let dur = w.end_ms - w.start_ms;
                assert!(dur >= s.word_ms.0 && dur <= s.word_ms.1);
                assert!(vocab::is_word(w.token));
                assert!((w.token - FIRST_WORD) < s.n_words as u32);
            }
        }
    }

    /// Word frames carry their signature: energy inside words must dwarf
    /// silence energy, and the word regions must match the right signature
    /// far better than any other word's.
    #[test]
    fn rendered_frames_track_word_signatures() {
        let s = spec();
        let sigs = s.word_signatures::<f32>();
        let mut word_energy = 0.0f64;
        let mut word_n = 0usize;
        let mut sil_energy = 0.0f64;
        let mut sil_n = 0usize;
        let mut match_own = 0.0f64;
        let mut match_other = 0.0f64;
        for i in 0..50 {
            let (a, frames) = gen_utterance::<f32>(&s, &sigs, s.words_per_utt, 1, i);
            for f in 0..frames.shape[0] {
                let start = f as u32 * s.raw_frame_ms;
                let row = frames.row(f);
                let energy: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum();
                let word = a.words.iter().find(|w| start >= w.start_ms && start < w.end_ms);
                match word {
                    Some(w) => {
                        word_energy += energy;
                        word_n += 1;
                        let span = (w.end_ms - w.start_ms) as usize;
                        let seg = (start - w.start_ms) as usize * SIGNATURE_FRAMES / span;
                        let own = &sigs[(w.token - FIRST_WORD) as usize]
                            [seg * s.raw_frame_dim..(seg + 1) * s.raw_frame_dim];
                        let other_tok = (w.token - FIRST_WORD + 1) % s.n_words as u32;
                        let other = &sigs[other_tok as usize]
                            [seg * s.raw_frame_dim..(seg + 1) * s.raw_frame_dim];
                        match_own += row.iter().zip(own).map(|(&x, &y)| (x * y) as f64).sum::<f64>();
                        match_other +=
                            row.iter().zip(other).map(|(&x, &y)| (x * y) as f64).sum::<f64>();
                    }
                    None => {
                        sil_energy += energy;
                        sil_n += 1;
                    }
                }
            }
        }
        assert!(word_n > 100 && sil_n > 100);
        let word_mean = word_energy / word_n as f64;
        let sil_mean = sil_energy / sil_n as f64;
        assert!(word_mean > 20.0 * sil_mean, "word {word_mean} vs silence {sil_mean}");
        assert!(match_own > 5.0 * match_other.abs(), "{match_own} vs {match_other}");
    }

    #[test]
    fn tokens_cover_the_vocabulary_roughly_uniformly() {
        let s = spec();
        let sigs = s.word_signatures::<f32>();
        let mut counts = vec![0usize; s.n_words];
        for i in 0..300 {
            let (a, _) = gen_utterance::<f32>(&s, &sigs, s.words_per_utt, 2, i);
            for w in &a.words {
                counts[(w.token - FIRST_WORD) as usize] += 1;
            }
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(*min > 0, "{counts:?}");
        assert!(*max < 3 * *min, "{counts:?}");
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        gen_corpus::<f32>(dir.path(), &s, &splits()).unwrap();
        let corpus = Corpus::<f32>::load(dir.path()).unwrap();
        assert_eq!(corpus.vocab.n_words(), s.n_words);
        assert_eq!(corpus.raw_frame_dim, s.raw_frame_dim);
        assert_eq!(corpus.split("train").unwrap().len(), 12);
        assert_eq!(corpus.split("long").unwrap().len(), 3);
        assert!(corpus.split("nope").is_err());

        let sigs = s.word_signatures::<f32>();
        let direct = gen_utterance::<f32>(&s, &sigs, (10, 16), 2, 1);
        let loaded = &corpus.split("long").unwrap()[1];
        assert_eq!(loaded.id, "long-00001");
        assert_eq!(loaded.alignment, direct.0);
        assert_eq!(loaded.frames.data, direct.1.data);

        let long_words: usize =
            corpus.split("long").unwrap().iter().map(|u| u.alignment.words.len()).sum();
        assert!(long_words >= 30);
    }

    #[test]
    fn corrupt_frames_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        gen_corpus::<f32>(dir.path(), &spec(), &[SplitSpec::new("train", 2)]).unwrap();
        let fpath = dir.path().join("train.frames.bin");
        let mut bytes = fs::read(&fpath).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&fpath, &bytes).unwrap();
        let err = Corpus::<f32>::load(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { what: "frames blob", .. }), "{err}");
    }
}
