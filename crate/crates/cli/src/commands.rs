//! Implementations behind the `realm` subcommands.
//!
//! Everything here runs in f32, the training and serving precision; f64
//! exists for the numerics tests, not for the tool.

use std::cell::RefCell;
use std::io::Write as _;
use std::time::{Duration, Instant};

use realm_core::inference::{
    beam_decode, greedy_decode, llm_generate, DecodeOutcome, DecodeStats, LlmStyle,
    StreamSession,
};
use realm_core::metrics::{cost_estimate, format_table, measure_rtf, CostArch, CostParams};
use realm_core::model::Model;
use realm_core::synthdata::{gen_corpus, Corpus, SplitSpec, Utterance};
use realm_core::targets::{
    build_realm_sample, six_word_utterance, InputItem, InterleavedSample, Mode,
};
use realm_core::tensor::Tensor;
use realm_core::training::{evaluate, metrics_line, sample_for, score_decodes, Trainer};
use realm_core::vocab::{Vocab, IGNORE};

use crate::config::RunConfig;
use crate::CliError;

fn split_specs(cfg: &RunConfig) -> Vec<SplitSpec> {
    let mut splits = vec![
        SplitSpec::new("train", cfg.n_train),
        SplitSpec::new("dev", cfg.n_dev),
        SplitSpec::new("test", cfg.n_test),
    ];
    if cfg.n_long > 0 {
        splits.push(SplitSpec::new("long", cfg.n_long).with_words((
            cfg.words_min * cfg.long_factor,
            cfg.words_max * cfg.long_factor,
        )));
    }
    splits
}

pub fn gen_data(cfg: &RunConfig, force: bool, verify: bool) -> Result<(), CliError> {
    if cfg.n_train == 0 {
        return Err(CliError::usage("n_train must be at least 1"));
    }
    let dir = &cfg.data_dir;
    let occupied = dir
        .read_dir()
        .map(|mut entries| entries.next().is_some())
        .unwrap_or(false);
    if occupied && !force {
        return Err(CliError::data(format!(
            "{} is not empty; pass --force to regenerate over it",
            dir.display()
        )));
    }
    let spec = cfg.synth_spec();
    let splits = split_specs(cfg);
    gen_corpus::<f32>(dir, &spec, &splits)?;
    cfg.persist(dir)?;

    let corpus = Corpus::<f32>::load(dir)?;
    println!("wrote corpus to {}", dir.display());
    for s in &splits {
        println!(
            "  {}: {} utterances, {:.1} s audio",
            s.name,
            corpus.split(&s.name)?.len(),
            corpus.total_audio_ms(&s.name)? as f64 / 1000.0
        );
    }

    if verify {
        let tmp = tempfile::tempdir()?;
        gen_corpus::<f32>(tmp.path(), &spec, &splits)?;
        let mut checked = 0;
        for entry in tmp.path().read_dir()? {
            let entry = entry?;
            let name = entry.file_name();
            let fresh = std::fs::read(entry.path())?;
            let original = std::fs::read(dir.join(&name))?;
            if fresh != original {
                return Err(CliError::data(format!(
                    "regenerated {} differs from the written corpus",
                    name.to_string_lossy()
                )));
            }
            checked += 1;
        }
        println!("verify: regeneration is byte-identical ({checked} files)");
    }
    Ok(())
}

fn print_sample(sample: &InterleavedSample<f32>, vocab: &Vocab) {
    println!("{:>4}  {:<12}  {}", "pos", "input", "target");
    for (i, (input, &target)) in sample.inputs.iter().zip(&sample.targets).enumerate() {
        let input = match input {
            InputItem::Bos => "<bos>".to_string(),
            InputItem::Frame { index, .. } => format!("f{}", index + 1),
            InputItem::Token(t) => vocab.surface(*t).to_string(),
            InputItem::EosEmb => "<eos-emb>".to_string(),
        };
        let target = match target {
            IGNORE => "-".to_string(),
            t => vocab.surface(t).to_string(),
        };
        println!("{i:>4}  {input:<12}  {target}");
    }
}

fn item_name(item: &InputItem<f32>, vocab: &Vocab) -> String {
    match item {
        InputItem::Bos => "<bos>".to_string(),
        InputItem::Frame { index, .. } => format!("f{}", index + 1),
        InputItem::Token(t) => vocab.surface(*t).to_string(),
        InputItem::EosEmb => "<eos-emb>".to_string(),
    }
}

/// The worked "and hand it over to you" dump; at zero delay the output is
/// checked against the expected 17-position interleaving.
fn worked_example(delay_chunks: u32, chunk_ms: u32) -> Result<(), CliError> {
    let (a, vocab) = six_word_utterance();
    let chunks = a.total_chunks(chunk_ms)?;
    let embeddings = Tensor::<f32>::zeros(vec![chunks, 1]);
    let sample = build_realm_sample(&a, &embeddings, chunk_ms, delay_chunks)?;
    println!(
        "\"and hand it over to you\" ({} ms, {chunks} chunks of {chunk_ms} ms, delay {delay_chunks})",
        a.end_ms
    );
    print_sample(&sample, &vocab);

    if delay_chunks == 0 && chunk_ms == 240 {
        let inputs: Vec<String> =
            sample.inputs.iter().map(|i| item_name(i, &vocab)).collect();
        let targets: Vec<String> =
            sample.targets.iter().map(|&t| vocab.surface(t).to_string()).collect();
        let expected_inputs = "<bos> f1 f2 and f3 f4 hand it f5 over f6 to f7 f8 you f9 <eos-emb>";
        let expected_targets = "<blank> <blank> and <blank> <blank> hand it <blank> over \
                                <blank> to <blank> <blank> you <blank> <blank> <eos>";
        if inputs.join(" ") != expected_inputs || targets.join(" ") != expected_targets {
            return Err(CliError::data(
                "worked example no longer matches the expected interleaving",
            ));
        }
        println!("verified against the expected {}-position sequence", sample.len());
    }
    Ok(())
}

pub fn build_targets(
    cfg: &RunConfig,
    utt: Option<&str>,
    paper_example: bool,
) -> Result<(), CliError> {
    if paper_example {
        return worked_example(cfg.delay_chunks, cfg.chunk_ms);
    }
    let Some(id) = utt else {
        return Err(CliError::usage("pass --utt ID or --paper-example"));
    };
    let corpus = Corpus::<f32>::load(&cfg.data_dir)?;
    let found = corpus.splits.iter().find_map(|(name, utts)| {
        utts.iter().find(|u| u.id == id).map(|u| (name.as_str(), u))
    });
    let Some((split, u)) = found else {
        return Err(CliError::data(format!(
            "no utterance {id:?} in {}",
            cfg.data_dir.display()
        )));
    };
    let sample = sample_for(cfg.mode, u, &cfg.model_config(), cfg.delay_chunks)?;
    println!(
        "{} ({split}, {} ms, mode {}, delay {})",
        u.id, u.alignment.end_ms, cfg.mode, cfg.delay_chunks
    );
    print_sample(&sample, &corpus.vocab);
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<(), CliError> {
    let corpus = Corpus::<f32>::load(&cfg.data_dir)?;
    let train_utts = corpus.split("train")?;
    if train_utts.is_empty() {
        return Err(CliError::usage("train split is empty"));
    }
    let dev = corpus.splits.get("dev").map(Vec::as_slice).unwrap_or(&[]);

    let dir = cfg.checkpoint_dir.clone();
    let latest = dir.join("latest");
    let mut trainer = if resume {
        Trainer::<f32>::resume(cfg.model_config(), cfg.train_config(), &latest)?
    } else {
        Trainer::new(Model::new(cfg.model_config())?, cfg.train_config())?
    };
    cfg.persist(&dir)?;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("metrics.log"))?;

    let max_epochs = cfg.max_epochs as usize;
    if trainer.epoch >= max_epochs {
        println!("checkpoint is already at epoch {}, nothing to do", trainer.epoch);
        return Ok(());
    }
    let mut best_wer = f64::INFINITY;
    while trainer.epoch < max_epochs {
        let epoch = trainer.epoch;
        let stats = trainer.train_epoch(train_utts)?;
        println!(
            "epoch {epoch}: loss {:.4}  {} positions  {:.0} tok/s  step {}",
            stats.mean_loss(),
            stats.positions,
            stats.tokens_per_sec(),
            trainer.global_step
        );
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every as usize == 0;
        if (due || trainer.epoch >= max_epochs) && !dev.is_empty() {
            let report = evaluate(&trainer.model, dev, cfg.mode, cfg.delay_chunks)?;
            let line = metrics_line(epoch, "dev", &report);
            println!("{line}");
            writeln!(log, "{line}")?;
            if report.wer < best_wer {
                best_wer = report.wer;
                trainer.save_checkpoint(&dir.join("best"))?;
                println!("new best dev wer {:.4}", report.wer);
            }
        }
        trainer.save_checkpoint(&latest)?;
    }
    if dev.is_empty() || best_wer.is_infinite() {
        trainer.save_checkpoint(&dir.join("best"))?;
    }
    println!(
        "trained to epoch {} ({} optimizer steps), checkpoints in {}",
        trainer.epoch,
        trainer.global_step,
        dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
    Stream { realtime: bool },
}

fn load_model(cfg: &RunConfig) -> Result<Model<f32>, CliError> {
    let best = cfg.checkpoint_dir.join("best");
    let latest = cfg.checkpoint_dir.join("latest");
    let dir = if best.is_dir() {
        best
    } else if latest.is_dir() {
        latest
    } else {
        return Err(CliError::data(format!(
            "no checkpoint under {}; run `realm train` first",
            cfg.checkpoint_dir.display()
        )));
    };
    Ok(Model::load(cfg.model_config(), &dir)?)
}

/// Pulls one split out of the corpus, sorted by utterance id.
fn take_split(
    corpus: &mut Corpus<f32>,
    split: &str,
) -> Result<Vec<Utterance<f32>>, CliError> {
    let mut utts = corpus.splits.remove(split).ok_or_else(|| {
        let names: Vec<String> = corpus.splits.keys().cloned().collect();
        CliError::usage(format!("unknown split {split:?}; corpus has {names:?}"))
    })?;
    utts.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(utts)
}

fn stream_one(
    model: &Model<f32>,
    u: &Utterance<f32>,
    rows_per_push: usize,
    realtime_ms_per_row: Option<u64>,
    latencies: &mut Vec<Duration>,
) -> Result<DecodeOutcome, CliError> {
    let mut session = StreamSession::new(model)?;
    let (rows, dim) = (u.frames.shape[0], u.frames.shape[1]);
    let mut at = 0;
    while at < rows {
        let hi = (at + rows_per_push).min(rows);
        let slice = Tensor::from_vec(
            vec![hi - at, dim],
            u.frames.data[at * dim..hi * dim].to_vec(),
        )?;
        if let Some(ms) = realtime_ms_per_row {
            std::thread::sleep(Duration::from_millis(ms * (hi - at) as u64));
        }
        let t = Instant::now();
        session.push_frames(&slice)?;
        latencies.push(t.elapsed());
        at = hi;
    }
    let t = Instant::now();
    let out = session.finish()?;
    latencies.push(t.elapsed());
    Ok(out)
}

pub fn decode(
    cfg: &RunConfig,
    split: &str,
    mode: DecodeMode,
    buckets: bool,
) -> Result<(), CliError> {
    if cfg.mode != Mode::Realm && mode != DecodeMode::Greedy {
        return Err(CliError::usage(format!(
            "--beam and --stream apply to mode realm; mode {} decodes as a prompted LM",
            cfg.mode
        )));
    }
    let mut corpus = Corpus::<f32>::load(&cfg.data_dir)?;
    let utts = take_split(&mut corpus, split)?;
    if utts.is_empty() {
        return Err(CliError::usage(format!("split {split:?} is empty")));
    }
    let model = load_model(cfg)?;

    let label = match mode {
        DecodeMode::Greedy => match cfg.mode {
            Mode::Realm => "greedy".to_string(),
            Mode::SpeechLlm => "prompted".to_string(),
            Mode::TimeAlignedLlm => "prompted time-aligned".to_string(),
        },
        DecodeMode::Beam(w) => format!("beam {w}"),
        DecodeMode::Stream { realtime: false } => "streaming".to_string(),
        DecodeMode::Stream { realtime: true } => "streaming, real-time paced".to_string(),
    };
    let rows_per_push = (cfg.chunk_ms / cfg.raw_frame_ms).max(1) as usize;
    let mut latencies = Vec::new();
    let t0 = Instant::now();
    let mut outcomes = Vec::with_capacity(utts.len());
    for u in &utts {
        let out = match mode {
            DecodeMode::Greedy => match cfg.mode {
                Mode::Realm => greedy_decode(&model, &u.frames)?,
                Mode::SpeechLlm => llm_generate(&model, &u.frames, LlmStyle::Prompted)?,
                Mode::TimeAlignedLlm => {
                    llm_generate(&model, &u.frames, LlmStyle::TimeAligned)?
                }
            },
            DecodeMode::Beam(w) => beam_decode(&model, &u.frames, w)?,
            DecodeMode::Stream { realtime } => stream_one(
                &model,
                u,
                rows_per_push,
                realtime.then_some(cfg.raw_frame_ms as u64),
                &mut latencies,
            )?,
        };
        outcomes.push(out);
    }
    let wall = t0.elapsed();

    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.persist(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join(format!("emissions-{split}.tsv"));
    let mut log = String::new();
    for (u, out) in utts.iter().zip(&outcomes) {
        for e in &out.emissions {
            let chunk = match e.after_chunk {
                Some(c) => c.to_string(),
                None => "tail".to_string(),
            };
            log.push_str(&format!(
                "{}\t{}\t{}\t{:.4}\n",
                u.id,
                chunk,
                corpus.vocab.surface(e.token),
                e.logprob
            ));
        }
    }
    std::fs::write(&log_path, log)?;

    let audio_s =
        utts.iter().map(|u| u.alignment.end_ms as u64).sum::<u64>() as f64 / 1000.0;
    let report = score_decodes(&utts, &outcomes, cfg.mode, cfg.chunk_ms, cfg.delay_chunks)?;
    println!(
        "decoded {} {split} utterances ({label}) in {:.2} s, rtf {:.4}",
        utts.len(),
        wall.as_secs_f64(),
        wall.as_secs_f64() / audio_s
    );
    println!("emission log: {}", log_path.display());
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "wer {:.4} (sub {} ins {} del {})  aer {}  ler {}",
        report.wer,
        report.errors.substitutions,
        report.errors.insertions,
        report.errors.deletions,
        opt(report.aer),
        opt(report.ler)
    );
    if !latencies.is_empty() {
        let max = latencies.iter().max().copied().unwrap_or_default();
        let mean = latencies.iter().sum::<Duration>() / latencies.len() as u32;
        println!(
            "push latency over {} pushes: mean {:.2} ms, max {:.2} ms",
            latencies.len(),
            mean.as_secs_f64() * 1e3,
            max.as_secs_f64() * 1e3
        );
    }
    if buckets {
        let rows: Vec<Vec<String>> = report
            .buckets
            .iter()
            .map(|b| {
                vec![b.name.clone(), b.utterances.to_string(), format!("{:.4}", b.wer)]
            })
            .collect();
        print!("{}", format_table(&["bucket", "utterances", "wer"], &rows));
    }
    Ok(())
}

/// Sums the op counts a correct decode of `utts` would need; the measured
/// counters land within a word-error of these.
fn predicted_ops(utts: &[Utterance<f32>], chunk_ms: u32, mode: Mode) -> (u64, u64) {
    let mut advances = 0u64;
    let mut evals = 0u64;
    for u in utts {
        let chunks = u.alignment.total_chunks(chunk_ms).unwrap_or(0) as u64;
        let words = u.alignment.words.len() as u64;
        match mode {
            Mode::Realm => {
                advances += 2 + chunks + words;
                evals += chunks + words + 1;
            }
            // Prompted prefill advances BOS, every chunk, and the marker;
            // each generated token (words plus EOS) advances and scores.
            Mode::SpeechLlm => {
                advances += chunks + 2 + words + 1;
                evals += words + 1;
            }
            Mode::TimeAlignedLlm => {
                advances += chunks + 2 + chunks + words + 2;
                evals += chunks + words + 2;
            }
        }
    }
    (advances, evals)
}

pub fn bench(cfg: &RunConfig, split: &str) -> Result<(), CliError> {
    let mut corpus = Corpus::<f32>::load(&cfg.data_dir)?;
    let utts = take_split(&mut corpus, split)?;
    if utts.is_empty() {
        return Err(CliError::usage(format!(
            "split {split:?} is empty; benchmarking needs audio"
        )));
    }
    let model = load_model(cfg)?;
    let audio_ms: u64 = utts.iter().map(|u| u.alignment.end_ms as u64).sum();
    let audio_s = audio_ms as f64 / 1000.0;
    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.persist(&cfg.out_dir)?;

    let run = |style: Option<LlmStyle>| -> Result<_, CliError> {
        let kept: RefCell<Vec<DecodeStats>> = RefCell::new(Vec::new());
        let report = measure_rtf(audio_ms, || {
            let stats: Vec<DecodeStats> = utts
                .iter()
                .map(|u| {
                    let out = match style {
                        None => greedy_decode(&model, &u.frames)?,
                        Some(s) => llm_generate(&model, &u.frames, s)?,
                    };
                    Ok(out.stats)
                })
                .collect::<realm_core::error::Result<_>>()?;
            kept.replace(stats.clone());
            Ok(stats)
        })?;
        Ok((report, kept.into_inner()))
    };
    let (realm_rtf, realm_stats) = run(None)?;
    let (llm_rtf, llm_stats) = run(Some(LlmStyle::Prompted))?;

    let pct = |ns: u128, whole: Duration| 100.0 * ns as f64 / whole.as_nanos().max(1) as f64;
    let rows = vec![
        (CostArch::Realm.name(), &realm_rtf),
        (CostArch::SpeechLlm.name(), &llm_rtf),
    ]
    .into_iter()
    .map(|(name, r)| {
        vec![
            name.to_string(),
            format!("{:.5}", r.rtf),
            format!("{:.1}", r.wall.as_secs_f64() * 1e3),
            format!("{:.0}%", pct(r.decoder_ns, r.wall)),
            format!("{:.0}%", pct(r.output_head_ns, r.wall)),
            format!("{:.0}%", pct(r.other_ns, r.wall)),
        ]
    })
    .collect::<Vec<_>>();
    println!(
        "bench over {} {split} utterances, {:.1} s audio",
        utts.len(),
        audio_s
    );
    print!(
        "{}",
        format_table(&["mode", "rtf", "wall_ms", "decoder", "output", "other"], &rows)
    );

    let sum = |stats: &[DecodeStats], f: fn(&DecodeStats) -> u64| -> u64 {
        stats.iter().map(f).sum()
    };
    let realm_adv = sum(&realm_stats, |s| s.steps.advances);
    let realm_out = sum(&realm_stats, |s| s.steps.output_evals);
    let llm_adv = sum(&llm_stats, |s| s.steps.advances);
    let llm_out = sum(&llm_stats, |s| s.steps.output_evals);
    let (realm_adv_pred, realm_out_pred) = predicted_ops(&utts, cfg.chunk_ms, Mode::Realm);
    let (llm_adv_pred, llm_out_pred) = predicted_ops(&utts, cfg.chunk_ms, Mode::SpeechLlm);
    let ratio = |m: u64, p: u64| m as f64 / p.max(1) as f64;
    println!("op counts, measured / predicted-from-reference:");
    println!(
        "  realm       advances {realm_adv} / {realm_adv_pred} = {:.3}   output evals {realm_out} / {realm_out_pred} = {:.3}",
        ratio(realm_adv, realm_adv_pred),
        ratio(realm_out, realm_out_pred)
    );
    println!(
        "  speech_llm  advances {llm_adv} / {llm_adv_pred} = {:.3}   output evals {llm_out} / {llm_out_pred} = {:.3}",
        ratio(llm_adv, llm_adv_pred),
        ratio(llm_out, llm_out_pred)
    );

    // Per-op costs fitted from the instrumented realm pass; encoder and
    // bookkeeping time goes to the per-second term.
    let dec_ns = realm_stats.iter().map(|s| s.steps.advance_ns).sum::<u128>() as f64;
    let out_ns = realm_stats.iter().map(|s| s.steps.output_ns).sum::<u128>() as f64;
    let dec_cost = dec_ns / realm_adv.max(1) as f64;
    let out_cost = out_ns / realm_out.max(1) as f64;
    let enc_cost = realm_rtf.other_ns as f64 / audio_s;
    let tokens: u64 = utts.iter().map(|u| u.alignment.words.len() as u64).sum();
    let params = CostParams::new(
        audio_s,
        tokens as f64,
        1000.0 / cfg.chunk_ms as f64,
        enc_cost,
        dec_cost,
        out_cost,
    );
    println!(
        "fitted per-op cost: encoder {:.0} ns/s-audio, decoder {:.0} ns/advance, output head {:.0} ns/eval",
        enc_cost, dec_cost, out_cost
    );
    let common = audio_s * enc_cost + tokens as f64 * (dec_cost + out_cost);
    let analytic: Vec<(&str, f64, Option<f64>)> = vec![
        ("common", common, None),
        (
            CostArch::Realm.name(),
            cost_estimate(CostArch::Realm, &params),
            Some(realm_rtf.wall.as_nanos() as f64),
        ),
        (
            CostArch::SpeechLlm.name(),
            cost_estimate(CostArch::SpeechLlm, &params),
            Some(llm_rtf.wall.as_nanos() as f64),
        ),
        (
            CostArch::Rnnt.name(),
            cost_estimate(CostArch::Rnnt, &params),
            None,
        ),
    ];
    let rows: Vec<Vec<String>> = analytic
        .into_iter()
        .map(|(name, cost, measured)| {
            vec![
                name.to_string(),
                format!("{:.1}", cost / 1e6),
                measured.map_or("-".to_string(), |m| format!("{:.1}", m / 1e6)),
                measured.map_or("-".to_string(), |m| format!("{:.3}", m / cost)),
            ]
        })
        .collect();
    print!(
        "{}",
        format_table(&["cost model", "analytic_ms", "measured_ms", "ratio"], &rows)
    );
    Ok(())
}
