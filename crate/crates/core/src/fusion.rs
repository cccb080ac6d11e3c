//! Contextual citation embeddings.
//!
//! The embedding of citation marker `⟨c_i⟩` is the mean of document `i`'s raw
//! token-table embeddings. These rows replace the markers' own table rows in
//! every input stream, and the same matrix is what the alignment head scores
//! against. Everything is recomputed from the live table, so gradients reach
//! the document tokens' rows with a `1/|doc|` share each.

use crate::autograd::{Tape, Var};
use crate::backbone::{embed, ModelState, ParamVars};
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::TaggedToken;

/// Where citation-marker embeddings come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CitationSource {
    /// Mean-pooled document embeddings.
    #[default]
    Contextual,
    /// The markers' own table rows (the fusion ablation).
    Symbolic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CitationEmbeddingSet {
    /// Row `i - 1` is the embedding of marker `i`.
    pub matrix: Tensor,
    /// Tokens pooled per document (zero for symbolic rows).
    pub token_counts: Vec<usize>,
}

impl CitationEmbeddingSet {
    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn row(&self, marker: usize) -> Result<&[f64]> {
        if marker == 0 || marker > self.len() {
            return Err(Error::UnknownMarker {
                marker,
                available: self.len(),
            });
        }
        Ok(self.matrix.row(marker - 1))
    }
}

pub fn contextual_embed(state: &ModelState, document: &Document) -> Result<Vec<f64>> {
    if document.tokens.is_empty() {
        return Err(Error::EmptyDocument(document.index));
    }
    let rows = embed(state, &document.tokens)?;
    let mut mean = vec![0.0; rows.cols()];
    for r in 0..rows.rows() {
        for (m, v) in mean.iter_mut().zip(rows.row(r)) {
            *m += v;
        }
    }
    let n = rows.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

pub fn build_citation_set(state: &ModelState, documents: &[Document]) -> Result<CitationEmbeddingSet> {
    build_citation_set_with(state, documents, CitationSource::Contextual)
}

pub fn build_citation_set_with(
    state: &ModelState,
    documents: &[Document],
    source: CitationSource,
) -> Result<CitationEmbeddingSet> {
    if documents.is_empty() {
        return Err(Error::EmptyCitationSet);
    }
    let mut tape = Tape::new();
    let p = state.load(&mut tape);
    let m = citation_matrix_graph(&mut tape, state, &p, documents, source)?;
    Ok(CitationEmbeddingSet {
        matrix: tape.value(m).clone(),
        token_counts: token_counts(documents, source),
    })
}

fn token_counts(documents: &[Document], source: CitationSource) -> Vec<usize> {
    match source {
        CitationSource::Contextual => documents.iter().map(|d| d.tokens.len()).collect(),
        CitationSource::Symbolic => vec![0; documents.len()],
    }
}

/// `N×H` citation matrix on the tape.
pub fn citation_matrix_graph(
    tape: &mut Tape,
    state: &ModelState,
    p: &ParamVars,
    documents: &[Document],
    source: CitationSource,
) -> Result<Var> {
    if documents.is_empty() {
        return Err(Error::EmptyCitationSet);
    }
    let vocab = state.vocab();
    let vs = state.config().vocab_size;
    let table = p.tok_emb();
    let mut rows = Vec::with_capacity(documents.len());
    for (i, doc) in documents.iter().enumerate() {
        match source {
            CitationSource::Contextual => {
                if doc.tokens.is_empty() {
                    return Err(Error::EmptyDocument(doc.index));
                }
                if let Some(&id) = doc.tokens.iter().find(|&&t| t >= vs) {
                    return Err(Error::UnknownToken { id, vocab_size: vs });
                }
                let m = tape.mean_rows(table, doc.tokens.clone());
                rows.push((m, 0));
            }
            CitationSource::Symbolic => rows.push((table, vocab.citation_id(i + 1)?)),
        }
    }
    Ok(tape.gather(rows))
}

fn check_markers(tokens: &[TaggedToken], available: usize) -> Result<()> {
    for t in tokens {
        if let Some(m) = t.marker {
            if m == 0 || m > available {
                return Err(Error::UnknownMarker { marker: m, available });
            }
        }
    }
    Ok(())
}

/// Input embeddings for a tagged stream: table rows for default tokens, the
/// citation set's row for citation tokens.
pub fn splice(
    state: &ModelState,
    tokens: &[TaggedToken],
    citation_set: &CitationEmbeddingSet,
) -> Result<Tensor> {
    check_markers(tokens, citation_set.len())?;
    let ids: Vec<usize> = tokens.iter().map(|t| t.token_id).collect();
    let mut out = embed(state, &ids)?;
    for (k, t) in tokens.iter().enumerate() {
        if let Some(m) = t.marker {
            out.row_mut(k).copy_from_slice(citation_set.row(m)?);
        }
    }
    Ok(out)
}

pub fn splice_graph(
    tape: &mut Tape,
    state: &ModelState,
    p: &ParamVars,
    tokens: &[TaggedToken],
    citation_matrix: Var,
) -> Result<Var> {
    let available = tape.shape(citation_matrix).0;
    check_markers(tokens, available)?;
    let vs = state.config().vocab_size;
    let parts = tokens
        .iter()
        .map(|t| match t.marker {
            Some(m) => Ok((citation_matrix, m - 1)),
            None if t.token_id < vs => Ok((p.tok_emb(), t.token_id)),
            None => Err(Error::UnknownToken {
                id: t.token_id,
                vocab_size: vs,
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.gather(parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::vocab::Vocab;

    fn state() -> ModelState {
        ModelState::init(&BackboneConfig {
            vocab_size: 128,
            n_citation: 4,
            hidden_size: 2,
            n_layers: 1,
            n_heads: 1,
            max_seq_len: 16,
            seed: 1,
        })
        .unwrap()
    }

    fn doc(index: usize, tokens: Vec<usize>, v: &Vocab) -> Document {
        Document::new(index, tokens, v)
    }

    #[test]
    fn mean_of_two_rows() {
        let mut s = state();
        let v = s.vocab();
        let table = s.param_mut("tok_emb").unwrap();
        table.row_mut(100).copy_from_slice(&[1.0, 3.0]);
        table.row_mut(101).copy_from_slice(&[3.0, 5.0]);
        let c = contextual_embed(&s, &doc(1, vec![100, 101], &v)).unwrap();
        assert_eq!(c, vec![2.0, 4.0]);
        let one = contextual_embed(&s, &doc(1, vec![101], &v)).unwrap();
        assert_eq!(one, vec![3.0, 5.0]);
    }

    #[test]
    fn empty_document_is_rejected() {
        let s = state();
        let v = s.vocab();
        assert!(matches!(
            contextual_embed(&s, &doc(2, vec![], &v)),
            Err(Error::EmptyDocument(2))
        ));
        assert!(matches!(
            build_citation_set(&s, &[doc(1, vec![100], &v), doc(2, vec![], &v)]),
            Err(Error::EmptyDocument(2))
        ));
        assert!(matches!(build_citation_set(&s, &[]), Err(Error::EmptyCitationSet)));
    }

    #[test]
    fn citation_set_rows_follow_documents() {
        let s = state();
        let v = s.vocab();
        let d1 = doc(1, vec![100, 102, 40], &v);
        let set = build_citation_set(&s, std::slice::from_ref(&d1)).unwrap();
        assert_eq!(set.matrix.shape(), (1, 2));
        let c = contextual_embed(&s, &d1).unwrap();
        for (a, b) in set.matrix.row(0).iter().zip(&c) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(set.token_counts, vec![3]);
        let twin = build_citation_set(&s, &[d1.clone(), doc(2, d1.tokens.clone(), &v)]).unwrap();
        assert_eq!(twin.matrix.row(0), twin.matrix.row(1));
    }

    #[test]
    fn symbolic_rows_are_marker_table_rows() {
        let s = state();
        let v = s.vocab();
        let docs = [doc(1, vec![100], &v), doc(2, vec![101], &v)];
        let set = build_citation_set_with(&s, &docs, CitationSource::Symbolic).unwrap();
        let table = s.param("tok_emb").unwrap();
        assert_eq!(set.matrix.row(1), table.row(v.citation_id(2).unwrap()));
    }

    #[test]
    fn splice_substitutes_citation_rows_only() {
        let s = state();
        let v = s.vocab();
        let docs = [doc(1, vec![100, 101], &v), doc(2, vec![102], &v)];
        let set = build_citation_set(&s, &docs).unwrap();
        let stream = vec![
            TaggedToken::default_token(40),
            v.citation(2).unwrap(),
            TaggedToken::default_token(vocab_eos()),
        ];
        let out = splice(&s, &stream, &set).unwrap();
        assert_eq!(out.row(1), set.matrix.row(1));
        let plain = embed(&s, &[40, v.citation_id(2).unwrap(), vocab_eos()]).unwrap();
        assert_eq!(out.row(0), plain.row(0));
        assert_eq!(out.row(2), plain.row(2));

        let mut unknown = stream.clone();
        unknown[1] = v.citation(3).unwrap();
        assert!(matches!(
            splice(&s, &unknown, &set),
            Err(Error::UnknownMarker { marker: 3, available: 2 })
        ));
    }

    #[test]
    fn swapping_documents_changes_only_citation_positions() {
        let s = state();
        let v = s.vocab();
        let a = doc(1, vec![100, 101], &v);
        let b = doc(2, vec![102, 103, 104], &v);
        let set = build_citation_set(&s, &[a.clone(), b.clone()]).unwrap();
        let swapped = build_citation_set(&s, &[doc(1, b.tokens, &v), doc(2, a.tokens, &v)]).unwrap();
        let stream = vec![
            TaggedToken::default_token(40),
            v.citation(1).unwrap(),
            TaggedToken::default_token(41),
            v.citation(2).unwrap(),
        ];
        let x = splice(&s, &stream, &set).unwrap();
        let y = splice(&s, &stream, &swapped).unwrap();
        for k in [0, 2] {
            assert_eq!(x.row(k), y.row(k));
        }
        for k in [1, 3] {
            assert_ne!(x.row(k), y.row(k));
        }
    }

    #[test]
    fn graph_and_plain_splice_agree() {
        let s = state();
        let v = s.vocab();
        let docs = [doc(1, vec![100, 101], &v), doc(2, vec![102], &v)];
        let set = build_citation_set(&s, &docs).unwrap();
        let stream = vec![TaggedToken::default_token(40), v.citation(1).unwrap()];
        let mut tape = Tape::new();
        let p = s.load(&mut tape);
        let m = citation_matrix_graph(&mut tape, &s, &p, &docs, CitationSource::Contextual).unwrap();
        let x = splice_graph(&mut tape, &s, &p, &stream, m).unwrap();
        assert_eq!(tape.value(x), &splice(&s, &stream, &set).unwrap());
    }

    fn vocab_eos() -> usize {
        crate::vocab::EOS
    }
}
