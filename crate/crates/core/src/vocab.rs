//! Token vocabulary: three fixed control tokens followed by word tokens.

use crate::error::{Error, Result};

/// Ends a burst of emissions and requests the next input. Never appears in
/// a streaming decode history.
pub const BLANK: u32 = 0;
/// Start-of-sequence input token.
pub const BOS: u32 = 1;
/// End-of-sequence. Its embedding row doubles as the end-of-audio input
/// marker; as a label it terminates generation.
pub const EOS: u32 = 2;
/// First word id.
pub const FIRST_WORD: u32 = 3;

/// Target label excluded from the loss (prompt positions in LM-style modes).
pub const IGNORE: u32 = u32::MAX;

pub fn is_word(id: u32) -> bool {
    id >= FIRST_WORD && id != IGNORE
}

/// Id/surface table. Ids are line numbers in the vocabulary file; the three
/// control tokens always occupy ids 0..3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    surfaces: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary of `n_words` generated word surfaces (w00, w01, ...).
    pub fn synthetic(n_words: usize) -> Vocab {
        let mut surfaces = Self::control_surfaces();
        surfaces.extend((0..n_words).map(|i| format!("w{i:02}")));
        Vocab { surfaces }
    }

    /// Builds a vocabulary from word surfaces, prepending the control tokens.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Vocab {
        let mut surfaces = Self::control_surfaces();
        surfaces.extend(words);
        Vocab { surfaces }
    }

    fn control_surfaces() -> Vec<String> {
        vec!["<blank>".into(), "<bos>".into(), "<eos>".into()]
    }

    pub fn size(&self) -> usize {
        self.surfaces.len()
    }

    pub fn n_words(&self) -> usize {
        self.size() - FIRST_WORD as usize
    }

    pub fn surface(&self, id: u32) -> &str {
        &self.surfaces[id as usize]
    }

    pub fn id_of(&self, surface: &str) -> Option<u32> {
        self.surfaces.iter().position(|s| s == surface).map(|i| i as u32)
    }

    pub fn to_lines(&self) -> String {
        let mut s = self.surfaces.join("\n");
        s.push('\n');
        s
    }

    pub fn from_lines(text: &str) -> Result<Vocab> {
        let surfaces: Vec<String> = text.lines().map(str::to_string).collect();
        if surfaces.len() < FIRST_WORD as usize + 1 {
            return Err(Error::Parse {
                what: "vocabulary",
                detail: format!(
                    "need at least {} entries (control tokens plus one word), got {}",
                    FIRST_WORD + 1,
                    surfaces.len()
                ),
            });
        }
        Ok(Vocab { surfaces })
    }
}
