//! Queries, documents and gold attributed responses.

mod jsonl;
mod markers;
mod synth;

pub use jsonl::{read_jsonl, write_jsonl};
pub use markers::normalize_markers;
pub use synth::{generate_synthetic_corpus, FILLERS_PER_DOC, QUERY_WORDS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{self, TaggedToken, Vocab};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    /// 1-based citation number.
    pub index: usize,
    pub tokens: Vec<usize>,
    pub text: String,
}

impl Document {
    pub fn new(index: usize, tokens: Vec<usize>, vocab: &Vocab) -> Self {
        let text = vocab.render_tokens(&tokens);
        Self {
            index,
            tokens,
            text,
        }
    }
}

/// One sentence and the markers cited after it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub sentence: Vec<usize>,
    pub citations: Vec<usize>,
}

/// Alternating sentences and citation sets.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributedResponse {
    pub segments: Vec<Segment>,
}

impl AttributedResponse {
    /// Token stream for a response: each sentence, its citation tokens, then
    /// the end-of-sentence token; the stream closes with the end token.
    pub fn to_tagged(&self, vocab: &Vocab) -> Result<Vec<TaggedToken>> {
        let mut out = Vec::new();
        for seg in &self.segments {
            for &t in &seg.sentence {
                out.push(vocab.tag(t)?);
            }
            for &m in &seg.citations {
                out.push(vocab.citation(m)?);
            }
            out.push(TaggedToken::default_token(vocab::EOS));
        }
        out.push(TaggedToken::default_token(vocab::END));
        Ok(out)
    }

    /// Human-readable `"… [i]."` form.
    pub fn render(&self, vocab: &Vocab) -> String {
        let mut ids = Vec::new();
        for seg in &self.segments {
            ids.extend_from_slice(&seg.sentence);
            ids.extend(seg.citations.iter().filter_map(|&m| vocab.citation_id(m).ok()));
            ids.push(vocab::EOS);
        }
        vocab.render_tokens(&ids)
    }

    pub fn n_citations(&self) -> usize {
        self.segments.iter().map(|s| s.citations.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub query: Vec<usize>,
    pub documents: Vec<Document>,
    pub gold: AttributedResponse,
}

impl Example {
    pub fn n_docs(&self) -> usize {
        self.documents.len()
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidExample(m));
        let n = self.documents.len();
        if n == 0 {
            return bad("example has no documents".into());
        }
        if n > vocab.n_citation() {
            return bad(format!(
                "{n} documents but only {} citation tokens",
                vocab.n_citation()
            ));
        }
        let plain = |tokens: &[usize], what: &str| -> Result<()> {
            for &t in tokens {
                let tag = vocab.tag(t)?;
                if tag.is_citation() {
                    return Err(Error::InvalidExample(format!("{what} contains citation token {t}")));
                }
            }
            Ok(())
        };
        plain(&self.query, "query")?;
        for (i, d) in self.documents.iter().enumerate() {
            if d.index != i + 1 {
                return bad(format!(
                    "document at position {} has index {}; indices must run 1..={n}",
                    i + 1,
                    d.index
                ));
            }
            if d.tokens.is_empty() {
                return Err(Error::EmptyDocument(d.index));
            }
            plain(&d.tokens, "document")?;
        }
        for seg in &self.gold.segments {
            plain(&seg.sentence, "gold sentence")?;
            if let Some(&m) = seg.citations.iter().find(|&&m| m == 0 || m > n) {
                return bad(format!("gold cites [{m}] but there are {n} documents"));
            }
        }
        Ok(())
    }
}

/// Assembled prompt plus where its in-prompt citation tokens sit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<TaggedToken>,
    /// Position of `⟨c_i⟩` for documents 1..=N, ascending.
    pub citation_positions: Vec<usize>,
}

/// Lays out the chat template:
///
/// ```text
/// <|system|> You are a helpful assistant <|eot|>
/// <|user|> Question: {query}
/// Document [1]: {document 1}
/// ...
/// Document [N]: {document N}
/// Answer:
/// ```
///
/// where each `[i]` is the reserved citation token itself.
pub fn assemble_prompt(example: &Example, vocab: &Vocab) -> Result<Prompt> {
    example.validate(vocab)?;
    let d = TaggedToken::default_token;
    let mut tokens: Vec<TaggedToken> = [
        vocab::SYSTEM,
        vocab::YOU,
        vocab::ARE,
        vocab::A,
        vocab::HELPFUL,
        vocab::ASSISTANT,
        vocab::EOT,
        vocab::USER,
        vocab::QUESTION,
        vocab::COLON,
    ]
    .into_iter()
    .map(d)
    .collect();
    tokens.extend(example.query.iter().map(|&t| d(t)));
    let mut citation_positions = Vec::with_capacity(example.documents.len());
    for doc in &example.documents {
        tokens.push(d(vocab::DOCUMENT));
        citation_positions.push(tokens.len());
        tokens.push(vocab.citation(doc.index)?);
        tokens.push(d(vocab::COLON));
        tokens.extend(doc.tokens.iter().map(|&t| d(t)));
    }
    tokens.push(d(vocab::ANSWER));
    tokens.push(d(vocab::COLON));
    Ok(Prompt {
        tokens,
        citation_positions,
    })
}
