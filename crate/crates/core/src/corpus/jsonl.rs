//! One example per line:
//!
//! ```json
//! {"query":"w40 f101","documents":[{"index":1,"text":"f101 w77"}],"gold":[{"sentence":"f101","citations":[1]}]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{normalize_markers, AttributedResponse, Document, Example, Segment};
use crate::error::{Error, Result};
use crate::vocab::Vocab;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    query: String,
    documents: Vec<DocumentRecord>,
    gold: Vec<SegmentRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentRecord {
    index: usize,
    text: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentRecord {
    sentence: String,
    citations: Vec<usize>,
}

fn to_record(ex: &Example, vocab: &Vocab) -> ExampleRecord {
    ExampleRecord {
        query: vocab.render_tokens(&ex.query),
        documents: ex
            .documents
            .iter()
            .map(|d| DocumentRecord {
                index: d.index,
                text: vocab.render_tokens(&d.tokens),
            })
            .collect(),
        gold: ex
            .gold
            .segments
            .iter()
            .map(|s| SegmentRecord {
                sentence: vocab.render_tokens(&s.sentence),
                citations: s.citations.clone(),
            })
            .collect(),
    }
}

fn plain_tokens(text: &str, vocab: &Vocab) -> Result<Vec<usize>> {
    let tagged = normalize_markers(text, vocab, vocab.n_citation())?;
    if tagged.iter().any(|t| t.is_citation()) {
        return Err(Error::InvalidExample(format!(
            "citation marker inside plain text `{text}`"
        )));
    }
    Ok(tagged.into_iter().map(|t| t.token_id).collect())
}

fn from_record(rec: ExampleRecord, vocab: &Vocab) -> Result<Example> {
    let n = rec.documents.len();
    let documents = rec
        .documents
        .into_iter()
        .map(|d| Ok(Document::new(d.index, plain_tokens(&d.text, vocab)?, vocab)))
        .collect::<Result<Vec<_>>>()?;
    let segments = rec
        .gold
        .into_iter()
        .map(|s| {
            if let Some(&m) = s.citations.iter().find(|&&m| m == 0 || m > n) {
                return Err(Error::InvalidExample(format!(
                    "citation {m} outside 1..={n} (indices are 1-based)"
                )));
            }
            Ok(Segment {
                sentence: plain_tokens(&s.sentence, vocab)?,
                citations: s.citations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ex = Example {
        query: plain_tokens(&rec.query, vocab)?,
        documents,
        gold: AttributedResponse { segments },
    };
    ex.validate(vocab)?;
    Ok(ex)
}

pub fn write_examples<W: Write>(mut w: W, examples: &[Example], vocab: &Vocab) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, &to_record(ex, vocab))?;
        w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    w.flush().map_err(|e| Error::io("<writer>", e))
}

/// Parses examples; blank lines are skipped. Errors carry the 1-based line.
pub fn read_examples<R: BufRead>(r: R, vocab: &Vocab) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let line = line.map_err(|e| parse_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(from_record(rec, vocab).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example], vocab: &Vocab) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_examples(BufWriter::new(f), examples, vocab)
}

pub fn read_jsonl(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_examples(BufReader::new(f), vocab)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::corpus::generate_synthetic_corpus;

    fn vocab() -> Vocab {
        Vocab::new(512, 8).unwrap()
    }

    #[test]
    fn empty_input_is_empty_corpus() {
        assert!(read_examples(&b""[..], &vocab()).unwrap().is_empty());
        assert!(read_examples(&b"\n\n"[..], &vocab()).unwrap().is_empty());
    }

    #[test]
    fn zero_citation_index_is_a_parse_error_with_line() {
        let v = vocab();
        let good = generate_synthetic_corpus(1, 1, 2, 1, &v).unwrap();
        let mut buf = Vec::new();
        write_examples(&mut buf, &good, &v).unwrap();
        buf.extend_from_slice(
            br#"{"query":"w40","documents":[{"index":1,"text":"f100"}],"gold":[{"sentence":"f100","citations":[0]}]}"#,
        );
        match read_examples(&buf[..], &v) {
            Err(Error::Parse { line: 2, message }) => assert!(message.contains("1-based"), "{message}"),
            other => panic!("expected parse error on line 2, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let err = read_examples(&b"{\"query\":"[..], &vocab()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn field_order_is_stable() {
        let v = vocab();
        let ex = generate_synthetic_corpus(2, 1, 2, 1, &v).unwrap();
        let mut buf = Vec::new();
        write_examples(&mut buf, &ex, &v).unwrap();
        let line = String::from_utf8(buf).unwrap();
        let q = line.find("\"query\"").unwrap();
        let d = line.find("\"documents\"").unwrap();
        let g = line.find("\"gold\"").unwrap();
        assert!(q < d && d < g);
        assert!(line.contains("\"index\":1,\"text\""));
        assert!(line.contains("\"sentence\""));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip(seed in any::<u64>(), n_docs in 1usize..=8, fpd in 1usize..=3) {
            let v = vocab();
            let corpus = generate_synthetic_corpus(seed, 4, n_docs, fpd, &v).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.jsonl");
            write_jsonl(&path, &corpus, &v).unwrap();
            prop_assert_eq!(read_jsonl(&path, &v).unwrap(), corpus);
        }
    }
}
