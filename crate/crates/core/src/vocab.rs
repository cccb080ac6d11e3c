//! Symbolic vocabulary.
//!
//! Token ids are partitioned into bands, bottom to top:
//!
//! | band      | ids                              | rendering      |
//! |-----------|----------------------------------|----------------|
//! | control   | `0..CONTROL_BAND`                | named          |
//! | words     | `CONTROL_BAND..FACT_START`       | `w<id>`        |
//! | facts     | `FACT_START..size - n_citation`  | `f<id>`        |
//! | citations | `size - n_citation..size`        | `[i]`          |
//!
//! Fact tokens are owned by exactly one document in a synthetic example, which
//! is what makes entailment decidable by set containment.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SYSTEM: usize = 1;
pub const USER: usize = 2;
pub const EOT: usize = 3;
pub const QUESTION: usize = 4;
pub const DOCUMENT: usize = 5;
pub const COLON: usize = 6;
pub const ANSWER: usize = 7;
/// End of sentence.
pub const EOS: usize = 8;
/// End of response.
pub const END: usize = 9;
pub const YOU: usize = 10;
pub const ARE: usize = 11;
pub const A: usize = 12;
pub const HELPFUL: usize = 13;
pub const ASSISTANT: usize = 14;

pub const CONTROL_BAND: usize = 32;
pub const FACT_START: usize = 96;

const CONTROL_NAMES: [(usize, &str); 15] = [
    (PAD, "<pad>"),
    (SYSTEM, "<|system|>"),
    (USER, "<|user|>"),
    (EOT, "<|eot|>"),
    (QUESTION, "Question"),
    (DOCUMENT, "Document"),
    (COLON, ":"),
    (ANSWER, "Answer"),
    (EOS, "."),
    (END, "<|end|>"),
    (YOU, "You"),
    (ARE, "are"),
    (A, "a"),
    (HELPFUL, "helpful"),
    (ASSISTANT, "assistant"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Default,
    Citation,
}

impl Role {
    /// Router class label: 0 for default, 1 for citation.
    pub fn label(self) -> usize {
        match self {
            Role::Default => 0,
            Role::Citation => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaggedToken {
    pub token_id: usize,
    pub role: Role,
    /// 1-based document index; present iff `role == Citation`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marker: Option<usize>,
}

impl TaggedToken {
    pub fn default_token(token_id: usize) -> Self {
        Self {
            token_id,
            role: Role::Default,
            marker: None,
        }
    }

    pub fn is_citation(&self) -> bool {
        self.role == Role::Citation
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    n_citation: usize,
}

impl Vocab {
    pub fn new(size: usize, n_citation: usize) -> Result<Self> {
        if n_citation == 0 {
            return Err(Error::InvalidConfig("need at least one citation token".into()));
        }
        if size < FACT_START + n_citation + 1 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {size} leaves no fact band (need > {})",
                FACT_START + n_citation
            )));
        }
        Ok(Self { size, n_citation })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Number of reserved citation tokens (`N_max`).
    pub fn n_citation(&self) -> usize {
        self.n_citation
    }

    pub fn word_band(&self) -> Range<usize> {
        CONTROL_BAND..FACT_START
    }

    pub fn fact_band(&self) -> Range<usize> {
        FACT_START..self.citation_start()
    }

    fn citation_start(&self) -> usize {
        self.size - self.n_citation
    }

    pub fn citation_ids(&self) -> Range<usize> {
        self.citation_start()..self.size
    }

    pub fn is_fact(&self, id: usize) -> bool {
        self.fact_band().contains(&id)
    }

    /// Token id of `⟨c_marker⟩`, `marker` 1-based.
    pub fn citation_id(&self, marker: usize) -> Result<usize> {
        if marker == 0 || marker > self.n_citation {
            return Err(Error::MarkerOutOfRange {
                marker,
                n: self.n_citation,
            });
        }
        Ok(self.citation_start() + marker - 1)
    }

    pub fn marker_of(&self, id: usize) -> Option<usize> {
        self.citation_ids()
            .contains(&id)
            .then(|| id - self.citation_start() + 1)
    }

    pub fn citation(&self, marker: usize) -> Result<TaggedToken> {
        Ok(TaggedToken {
            token_id: self.citation_id(marker)?,
            role: Role::Citation,
            marker: Some(marker),
        })
    }

    /// Tags a raw id by band.
    pub fn tag(&self, id: usize) -> Result<TaggedToken> {
        if id >= self.size {
            return Err(Error::UnknownToken {
                id,
                vocab_size: self.size,
            });
        }
        Ok(match self.marker_of(id) {
            Some(m) => TaggedToken {
                token_id: id,
                role: Role::Citation,
                marker: Some(m),
            },
            None => TaggedToken::default_token(id),
        })
    }

    pub fn render(&self, id: usize) -> String {
        if let Some(m) = self.marker_of(id) {
            return format!("[{m}]");
        }
        if let Some((_, name)) = CONTROL_NAMES.iter().find(|(i, _)| *i == id) {
            return (*name).to_string();
        }
        if id < CONTROL_BAND {
            format!("<ctl{id}>")
        } else if id < FACT_START {
            format!("w{id}")
        } else {
            format!("f{id}")
        }
    }

    /// Inverse of [`Vocab::render`] for non-citation surface tokens.
    pub fn lookup(&self, surface: &str) -> Option<usize> {
        if let Some((id, _)) = CONTROL_NAMES.iter().find(|(_, n)| *n == surface) {
            return Some(*id);
        }
        let parse = |prefix: &str| -> Option<usize> {
            let rest = surface.strip_prefix(prefix)?;
            if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            rest.parse().ok()
        };
        if let Some(rest) = surface.strip_prefix("<ctl").and_then(|r| r.strip_suffix('>')) {
            let id: usize = rest.parse().ok()?;
            return (id < CONTROL_BAND).then_some(id);
        }
        if let Some(id) = parse("w") {
            return self.word_band().contains(&id).then_some(id);
        }
        if let Some(id) = parse("f") {
            return self.fact_band().contains(&id).then_some(id);
        }
        None
    }

    /// Space-joined rendering; `.` and `:` attach to the preceding token.
    pub fn render_tokens(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let s = self.render(id);
            let attach = id == EOS || id == COLON;
            if !out.is_empty() && !attach {
                out.push(' ');
            }
            out.push_str(&s);
        }
        out
    }

    pub fn render_tagged(&self, tokens: &[TaggedToken]) -> String {
        let ids: Vec<usize> = tokens.iter().map(|t| t.token_id).collect();
        self.render_tokens(&ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bands_partition_the_vocabulary() {
        let v = Vocab::new(512, 8).unwrap();
        assert_eq!(v.citation_ids(), 504..512);
        assert_eq!(v.fact_band(), 96..504);
        assert_eq!(v.citation_id(1).unwrap(), 504);
        assert_eq!(v.marker_of(511), Some(8));
        assert_eq!(v.marker_of(503), None);
        assert!(v.citation_id(9).is_err());
        assert!(v.citation_id(0).is_err());
    }

    #[test]
    fn render_lookup_inverse() {
        let v = Vocab::new(512, 8).unwrap();
        for id in 0..504 {
            let s = v.render(id);
            assert_eq!(v.lookup(&s), Some(id), "{s}");
        }
        assert_eq!(v.lookup("f504"), None);
        assert_eq!(v.lookup("w96"), None);
        assert_eq!(v.lookup("fact"), None);
    }

    #[test]
    fn punctuation_attaches() {
        let v = Vocab::new(512, 8).unwrap();
        let text = v.render_tokens(&[100, 504, EOS, ANSWER, COLON]);
        assert_eq!(text, "f100 [1]. Answer:");
    }

    #[test]
    fn too_small_vocab_rejected() {
        assert!(Vocab::new(100, 8).is_err());
        assert!(Vocab::new(512, 0).is_err());
    }
}
