//! Flat `key = value` run configuration.
//!
//! One file (plus `--key value` command-line overrides and the `REALM_SEED`
//! environment variable) configures every command. Unknown keys are
//! rejected, and each run persists its fully resolved configuration next to
//! its outputs so any result can be reproduced from that file alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use realm_core::model::ModelConfig;
use realm_core::synthdata::SynthSpec;
use realm_core::targets::Mode;
use realm_core::training::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Extra split of utterances this many times the normal maximum length;
    /// 0 skips it.
    pub long_factor: usize,
    pub n_long: usize,

    pub seed: u64,
    pub n_words: usize,
    pub raw_frame_dim: usize,
    pub raw_frame_ms: u32,
    pub word_ms_min: u32,
    pub word_ms_max: u32,
    pub gap_ms_min: u32,
    pub gap_ms_max: u32,
    pub words_min: usize,
    pub words_max: usize,
    pub noise_sigma: f64,
    pub min_utterance_ms: u32,

    pub decoder_layers: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub decoder_ffn_dim: usize,
    pub encoder_layers: usize,
    pub encoder_dim: usize,
    pub chunk_ms: u32,
    pub right_context_chunks: usize,
    pub max_emissions_per_chunk: usize,

    pub mode: Mode,
    pub max_lr: f64,
    pub warmup_epochs: u32,
    pub hold_epochs: u32,
    pub decay_epochs: u32,
    pub batch_size: usize,
    pub max_epochs: u32,
    pub eval_every: u32,
    pub delay_chunks: u32,
    pub blank_weight: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub input_noise: f64,
    pub checkpoint_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            n_train: 2000,
            n_dev: 100,
            n_test: 200,
            long_factor: 3,
            n_long: 0,
            seed: synth.seed,
            n_words: synth.n_words,
            raw_frame_dim: synth.raw_frame_dim,
            raw_frame_ms: synth.raw_frame_ms,
            word_ms_min: synth.word_ms.0,
            word_ms_max: synth.word_ms.1,
            gap_ms_min: synth.gap_ms.0,
            gap_ms_max: synth.gap_ms.1,
            words_min: synth.words_per_utt.0,
            words_max: synth.words_per_utt.1,
            noise_sigma: synth.noise_sigma,
            min_utterance_ms: synth.min_utterance_ms,
            decoder_layers: model.decoder_layers,
            decoder_dim: model.decoder_dim,
            decoder_heads: model.decoder_heads,
            decoder_ffn_dim: model.decoder_ffn_dim,
            encoder_layers: model.encoder_layers,
            encoder_dim: model.encoder_dim,
            chunk_ms: model.chunk_ms,
            right_context_chunks: model.encoder_right_context_chunks,
            max_emissions_per_chunk: model.max_emissions_per_chunk,
            mode: train.mode,
            max_lr: train.max_lr,
            warmup_epochs: train.warmup_epochs,
            hold_epochs: train.hold_epochs,
            decay_epochs: train.decay_epochs,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            eval_every: train.eval_every,
            delay_chunks: train.delay_chunks,
            blank_weight: train.blank_weight,
            grad_clip: train.grad_clip,
            weight_decay: train.weight_decay,
            input_noise: train.input_noise,
            checkpoint_dir: PathBuf::from("checkpoints"),
        }
    }
}

macro_rules! keys {
    ($($name:ident),+ $(,)?) => {
        pub const KEYS: &[&str] = &[$(stringify!($name)),+];

        fn set(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), CliError> {
            match key {
                $(stringify!($name) => {
                    cfg.$name = value.parse().map_err(|_| {
                        CliError::usage(format!("invalid value {value:?} for key {key}"))
                    })?;
                })+
                _ => {
                    return Err(CliError::usage(format!(
                        "unknown configuration key {key:?}; known keys: {}",
                        KEYS.join(", ")
                    )))
                }
            }
            Ok(())
        }

        fn render(cfg: &RunConfig) -> String {
            let mut entries = BTreeMap::new();
            $(entries.insert(stringify!($name), format!("{}", Display(&cfg.$name)));)+
            let mut out = String::new();
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
            out
        }
    };
}

/// Uniform value formatting for the resolved-config file; paths print
/// as-is, everything else via its `Display`.
struct Display<'a, T>(&'a T);

macro_rules! via_display {
    ($($ty:ty),+ $(,)?) => {
        $(impl std::fmt::Display for Display<'_, $ty> {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}", self.0)
            }
        })+
    };
}

via_display!(usize, u32, u64, f64, Mode);

impl std::fmt::Display for Display<'_, PathBuf> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0.display())
    }
}

keys! {
    data_dir, out_dir, n_train, n_dev, n_test, long_factor, n_long,
    seed, n_words, raw_frame_dim, raw_frame_ms, word_ms_min, word_ms_max,
    gap_ms_min, gap_ms_max, words_min, words_max, noise_sigma,
    min_utterance_ms,
    decoder_layers, decoder_dim, decoder_heads, decoder_ffn_dim,
    encoder_layers, encoder_dim, chunk_ms, right_context_chunks,
    max_emissions_per_chunk,
    mode, max_lr, warmup_epochs, hold_epochs, decay_epochs, batch_size,
    max_epochs, eval_every, delay_chunks, blank_weight, grad_clip,
    weight_decay, input_noise, checkpoint_dir,
}

impl RunConfig {
    /// Defaults, then the config file, then command-line overrides, then
    /// the `REALM_SEED` environment variable.
    pub fn load(
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::data(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(CliError::usage(format!(
                        "{}:{}: expected `key = value`, got {line:?}",
                        path.display(),
                        lineno + 1
                    )));
                };
                set(&mut cfg, key.trim(), value.trim())?;
            }
        }
        for (key, value) in overrides {
            set(&mut cfg, key, value)?;
        }
        if let Ok(seed) = std::env::var("REALM_SEED") {
            cfg.seed = seed
                .parse()
                .map_err(|_| CliError::usage(format!("REALM_SEED {seed:?} is not an integer")))?;
        }
        Ok(cfg)
    }

    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    /// Writes the fully resolved configuration into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join("config.resolved");
        std::fs::write(&path, render(self))
            .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_words: self.n_words,
            raw_frame_dim: self.raw_frame_dim,
            raw_frame_ms: self.raw_frame_ms,
            word_ms: (self.word_ms_min, self.word_ms_max),
            gap_ms: (self.gap_ms_min, self.gap_ms_max),
            words_per_utt: (self.words_min, self.words_max),
            noise_sigma: self.noise_sigma,
            min_utterance_ms: self.min_utterance_ms,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.n_words + 3,
            decoder_layers: self.decoder_layers,
            decoder_dim: self.decoder_dim,
            decoder_heads: self.decoder_heads,
            decoder_ffn_dim: self.decoder_ffn_dim,
            encoder_layers: self.encoder_layers,
            encoder_dim: self.encoder_dim,
            raw_frame_dim: self.raw_frame_dim,
            raw_frame_ms: self.raw_frame_ms,
            chunk_ms: self.chunk_ms,
            encoder_right_context_chunks: self.right_context_chunks,
            max_emissions_per_chunk: self.max_emissions_per_chunk,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_lr: self.max_lr,
            warmup_epochs: self.warmup_epochs,
            hold_epochs: self.hold_epochs,
            decay_epochs: self.decay_epochs,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            eval_every: self.eval_every,
            mode: self.mode,
            delay_chunks: self.delay_chunks,
            blank_weight: self.blank_weight,
            grad_clip: self.grad_clip,
            weight_decay: self.weight_decay,
            input_noise: self.input_noise,
            shuffle_seed: self.seed,
            checkpoint_dir: self.checkpoint_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_then_cli_overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "n_words = 7\nmax_lr = 0.002\n# comment\n\nmode = speech_llm\n")
            .unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            &[("max_lr".into(), "0.004".into()), ("batch_size".into(), "4".into())],
        )
        .unwrap();
        assert_eq!(cfg.n_words, 7);
        assert_eq!(cfg.max_lr, 0.004);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.mode, Mode::SpeechLlm);
    }

    #[test]
    fn unknown_key_is_a_usage_error() {
        let err = RunConfig::load(None, &[("frobnicate".into(), "1".into())]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("frobnicate"));
    }

    #[test]
    fn resolved_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.n_words = 5;
        cfg.mode = Mode::TimeAlignedLlm;
        cfg.persist(dir.path()).unwrap();
        let reread =
            RunConfig::load(Some(&dir.path().join("config.resolved")), &[]).unwrap();
        assert_eq!(cfg, reread);
    }

    #[test]
    fn every_key_is_settable_and_rendered() {
        let rendered = render(&RunConfig::default());
        for key in KEYS {
            assert!(
                rendered.lines().any(|l| l.starts_with(&format!("{key} = "))),
                "{key} missing from render"
            );
        }
    }
}
