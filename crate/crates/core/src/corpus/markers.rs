use crate::error::{Error, Result};
use crate::vocab::{TaggedToken, Vocab};

enum Lexeme<'a> {
    Word(&'a str),
    Marker(&'a str),
}

fn lex<'a>(text: &'a str) -> Result<Vec<Lexeme<'a>>> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut word_start: Option<usize> = None;
    let mut i = 0;
    let flush = |out: &mut Vec<Lexeme<'a>>, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            out.push(Lexeme::Word(&text[s..end]));
        }
    };
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b'[' => {
                flush(&mut out, &mut word_start, i);
                let close = text[i + 1..]
                    .find(|c: char| c == ']' || c == '[' || c.is_whitespace())
                    .map(|off| i + 1 + off);
                match close {
                    Some(j) if bytes[j] == b']' => {
                        out.push(Lexeme::Marker(&text[i + 1..j]));
                        i = j + 1;
                        continue;
                    }
                    _ => {
                        let end = close.unwrap_or(text.len());
                        return Err(Error::MalformedMarker(text[i..end].to_string()));
                    }
                }
            }
            b']' => return Err(Error::MalformedMarker("]".into())),
            b'.' | b':' => {
                flush(&mut out, &mut word_start, i);
                out.push(Lexeme::Word(&text[i..i + 1]));
            }
            _ if b.is_ascii_whitespace() => flush(&mut out, &mut word_start, i),
            _ => {
                word_start.get_or_insert(i);
            }
        }
        i += 1;
    }
    flush(&mut out, &mut word_start, text.len());
    Ok(out)
}

/// Lexes marker-bearing text, replacing every surface `[i]` by the single
/// reserved citation token `⟨c_i⟩`; everything else is tagged default.
pub fn normalize_markers(text: &str, vocab: &Vocab, n_docs: usize) -> Result<Vec<TaggedToken>> {
    if n_docs == 0 {
        return Err(Error::InvalidConfig("n_docs must be at least 1".into()));
    }
    lex(text)?
        .into_iter()
        .map(|lx| match lx {
            Lexeme::Word(w) => {
                let id = vocab
                    .lookup(w)
                    .ok_or_else(|| Error::UnknownSurfaceToken(w.to_string()))?;
                Ok(TaggedToken::default_token(id))
            }
            Lexeme::Marker(body) => {
                let digits = body.strip_prefix('-').unwrap_or(body);
                if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(Error::MalformedMarker(format!("[{body}]")));
                }
                let marker: i64 = body
                    .parse()
                    .map_err(|_| Error::MalformedMarker(format!("[{body}]")))?;
                if marker < 1 || marker as u64 > n_docs as u64 {
                    return Err(Error::OutOfRangeMarker { marker, n_docs });
                }
                vocab.citation(marker as usize)
            }
        })
        .collect()
}
